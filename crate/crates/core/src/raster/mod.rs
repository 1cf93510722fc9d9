//! Pixel grids and the operations the loaders apply to them.
//!
//! White (gray 255, or the designated palette index for paletted rasters)
//! doubles as "no data". Source pixels that are legitimately white are
//! therefore indistinguishable from padding.

mod codec;
mod pnm;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{PixelFormat, Quadrant, TILE_PIXELS};

pub use codec::{decode_png, decode_tile, encode_png, encode_tile};
pub use pnm::{read_pgm, write_pgm};

/// Blank sentinel for gray8 rasters.
pub const GRAY_BLANK: u8 = 255;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("raster is {width}x{height}, larger than a {TILE_PIXELS}-pixel tile")]
    TooLarge { width: u32, height: u32 },
    #[error("resampled dimension would be zero")]
    EmptyOutput,
    #[error("rasters differ in shape or format")]
    Mismatch,
    #[error("pixel buffer has {got} bytes, expected {expected}")]
    BadLength { got: usize, expected: usize },
    #[error("palette index {index} out of range for a {len}-entry palette")]
    BadIndex { index: u8, len: usize },
    #[error("corrupt image: {0}")]
    Corrupt(String),
    #[error("unsupported image: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Raster {
    width: u32,
    height: u32,
    format: PixelFormat,
    palette: Vec<[u8; 3]>,
    blank_index: u8,
    pixels: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlankStats {
    pub blank_count: u32,
    pub total: u32,
}

impl BlankStats {
    pub fn has_blanks(&self) -> bool {
        self.blank_count > 0
    }

    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.blank_count as f64 / self.total as f64
        }
    }
}

impl Raster {
    pub fn gray(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, RasterError> {
        let expected = width as usize * height as usize;
        if pixels.len() != expected {
            return Err(RasterError::BadLength { got: pixels.len(), expected });
        }
        Ok(Raster { width, height, format: PixelFormat::Gray8, palette: vec![], blank_index: 0, pixels })
    }

    pub fn indexed(
        width: u32,
        height: u32,
        palette: Vec<[u8; 3]>,
        blank_index: u8,
        pixels: Vec<u8>,
    ) -> Result<Self, RasterError> {
        let expected = width as usize * height as usize;
        if pixels.len() != expected {
            return Err(RasterError::BadLength { got: pixels.len(), expected });
        }
        if palette.is_empty() || palette.len() > 256 {
            return Err(RasterError::Unsupported(format!("palette of {} entries", palette.len())));
        }
        if blank_index as usize >= palette.len() {
            return Err(RasterError::BadIndex { index: blank_index, len: palette.len() });
        }
        if let Some(&bad) = pixels.iter().find(|&&p| p as usize >= palette.len()) {
            return Err(RasterError::BadIndex { index: bad, len: palette.len() });
        }
        Ok(Raster { width, height, format: PixelFormat::Indexed8, palette, blank_index, pixels })
    }

    pub fn filled_gray(width: u32, height: u32, value: u8) -> Self {
        Raster {
            width,
            height,
            format: PixelFormat::Gray8,
            palette: vec![],
            blank_index: 0,
            pixels: vec![value; width as usize * height as usize],
        }
    }

    /// A fully blank raster with the same format and palette as `self`.
    pub fn blank_like(&self, width: u32, height: u32) -> Self {
        Raster {
            width,
            height,
            format: self.format,
            palette: self.palette.clone(),
            blank_index: self.blank_index,
            pixels: vec![self.blank_value(); width as usize * height as usize],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn format(&self) -> PixelFormat {
        self.format
    }

    pub fn palette(&self) -> &[[u8; 3]] {
        &self.palette
    }

    pub fn blank_index(&self) -> u8 {
        self.blank_index
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.pixels[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, v: u8) {
        self.pixels[(y * self.width + x) as usize] = v;
    }

    pub fn row(&self, y: u32) -> &[u8] {
        let w = self.width as usize;
        &self.pixels[y as usize * w..(y as usize + 1) * w]
    }

    /// The value that marks a pixel as no-data.
    pub fn blank_value(&self) -> u8 {
        match self.format {
            PixelFormat::Gray8 => GRAY_BLANK,
            PixelFormat::Indexed8 => self.blank_index,
        }
    }

    fn same_kind(&self, other: &Raster) -> bool {
        self.format == other.format && self.palette == other.palette && self.blank_index == other.blank_index
    }

    /// Copies the `w`×`h` window at (`x`, `y`); parts outside the raster are blank.
    pub fn crop(&self, x: i64, y: i64, w: u32, h: u32) -> Raster {
        let mut out = self.blank_like(w, h);
        out.paste(self, -x, -y);
        out
    }

    /// Writes `src` with its top-left at (`x`, `y`), clipping to bounds.
    pub fn paste(&mut self, src: &Raster, x: i64, y: i64) {
        let x0 = x.max(0);
        let y0 = y.max(0);
        let x1 = (x + src.width as i64).min(self.width as i64);
        let y1 = (y + src.height as i64).min(self.height as i64);
        if x0 >= x1 || y0 >= y1 {
            return;
        }
        let len = (x1 - x0) as usize;
        for dy in y0..y1 {
            let sy = (dy - y) as usize;
            let sx = (x0 - x) as usize;
            let s = sy * src.width as usize + sx;
            let d = dy as usize * self.width as usize + x0 as usize;
            self.pixels[d..d + len].copy_from_slice(&src.pixels[s..s + len]);
        }
    }
}

pub fn blankness(r: &Raster) -> BlankStats {
    let b = r.blank_value();
    BlankStats {
        blank_count: r.pixels.iter().filter(|&&p| p == b).count() as u32,
        total: r.pixels.len() as u32,
    }
}

/// Pads right and bottom with blank pixels up to a full tile.
pub fn pad_to_tile(r: &Raster) -> Result<Raster, RasterError> {
    if r.width > TILE_PIXELS || r.height > TILE_PIXELS {
        return Err(RasterError::TooLarge { width: r.width, height: r.height });
    }
    if r.width == TILE_PIXELS && r.height == TILE_PIXELS {
        return Ok(r.clone());
    }
    Ok(r.crop(0, 0, TILE_PIXELS, TILE_PIXELS))
}

/// A tile cut from a larger raster, positioned by column and row from the top-left.
#[derive(Debug, Clone, PartialEq)]
pub struct CutTile {
    pub col: u32,
    pub row: u32,
    pub tile: Raster,
}

/// Cuts a scene into tiles left to right, top to bottom. Partial tiles on the
/// right and bottom edges are padded with blank pixels.
pub fn cut_tiles(scene: &Raster) -> Vec<CutTile> {
    let cols = scene.width.div_ceil(TILE_PIXELS);
    let rows = scene.height.div_ceil(TILE_PIXELS);
    let mut out = Vec::with_capacity((cols * rows) as usize);
    for row in 0..rows {
        for col in 0..cols {
            let tile = scene.crop(
                (col * TILE_PIXELS) as i64,
                (row * TILE_PIXELS) as i64,
                TILE_PIXELS,
                TILE_PIXELS,
            );
            out.push(CutTile { col, row, tile });
        }
    }
    out
}

/// Resamples from `src_m` to `dst_m` meters per pixel. Gray rasters use
/// bilinear interpolation on half-pixel centers; paletted rasters use
/// nearest neighbour so the palette survives.
pub fn resample(r: &Raster, src_m: f64, dst_m: f64) -> Result<Raster, RasterError> {
    if src_m == dst_m {
        return Ok(r.clone());
    }
    let ratio = src_m / dst_m;
    let out_w = (r.width as f64 * ratio).round() as u32;
    let out_h = (r.height as f64 * ratio).round() as u32;
    if out_w == 0 || out_h == 0 || r.width == 0 || r.height == 0 {
        return Err(RasterError::EmptyOutput);
    }
    // Output pixel i has its centre at source coordinate (i + 0.5) * step.
    let step = dst_m / src_m;
    let mut out = r.blank_like(out_w, out_h);
    match r.format {
        PixelFormat::Indexed8 => {
            let max_x = r.width - 1;
            let max_y = r.height - 1;
            let xs: Vec<u32> = (0..out_w)
                .map(|i| (((i as f64 + 0.5) * step).floor() as u32).min(max_x))
                .collect();
            for j in 0..out_h {
                let sy = (((j as f64 + 0.5) * step).floor() as u32).min(max_y);
                let src_row = r.row(sy);
                let dst = &mut out.pixels[(j * out_w) as usize..((j + 1) * out_w) as usize];
                for (d, &sx) in dst.iter_mut().zip(&xs) {
                    *d = src_row[sx as usize];
                }
            }
        }
        PixelFormat::Gray8 => {
            let taps = |n: u32, len: u32| -> Vec<(usize, usize, f64)> {
                (0..n)
                    .map(|i| {
                        let c = ((i as f64 + 0.5) * step - 0.5).clamp(0.0, (len - 1) as f64);
                        let i0 = c.floor() as usize;
                        let i1 = (i0 + 1).min(len as usize - 1);
                        (i0, i1, c - i0 as f64)
                    })
                    .collect()
            };
            let xt = taps(out_w, r.width);
            let yt = taps(out_h, r.height);
            for (j, &(y0, y1, fy)) in yt.iter().enumerate() {
                let r0 = r.row(y0 as u32);
                let r1 = r.row(y1 as u32);
                for (i, &(x0, x1, fx)) in xt.iter().enumerate() {
                    let top = r0[x0] as f64 * (1.0 - fx) + r0[x1] as f64 * fx;
                    let bot = r1[x0] as f64 * (1.0 - fx) + r1[x1] as f64 * fx;
                    let v = top * (1.0 - fy) + bot * fy;
                    out.pixels[j * out_w as usize + i] = (v + 0.5).floor().clamp(0.0, 255.0) as u8;
                }
            }
        }
    }
    Ok(out)
}

/// Builds one coarser tile from up to four finer ones, given in
/// [`Quadrant::ALL`] order. Missing children contribute blank quadrants.
/// Gray pixels are the 2×2 mean rounded half up; paletted pixels take the
/// top-left sample of each block.
pub fn downsample_2x2(children: [Option<&Raster>; 4]) -> Result<Raster, RasterError> {
    let first = children
        .iter()
        .flatten()
        .next()
        .ok_or(RasterError::EmptyOutput)?;
    for c in children.iter().flatten() {
        if !c.same_kind(first) {
            return Err(RasterError::Mismatch);
        }
        if c.width != TILE_PIXELS || c.height != TILE_PIXELS {
            return Err(RasterError::Mismatch);
        }
    }
    let mut out = first.blank_like(TILE_PIXELS, TILE_PIXELS);
    let half = TILE_PIXELS / 2;
    let w = TILE_PIXELS as usize;
    for (child, quad) in children.iter().zip(Quadrant::ALL) {
        let Some(child) = child else { continue };
        let (ox, oy) = quad.pixel_offset();
        for j in 0..half {
            let r0 = child.row(2 * j);
            let r1 = child.row(2 * j + 1);
            let dst = &mut out.pixels[(oy + j) as usize * w + ox as usize..][..half as usize];
            for (i, d) in dst.iter_mut().enumerate() {
                *d = match first.format {
                    PixelFormat::Gray8 => {
                        let s = r0[2 * i] as u32 + r0[2 * i + 1] as u32 + r1[2 * i] as u32 + r1[2 * i + 1] as u32;
                        ((s + 2) / 4) as u8
                    }
                    PixelFormat::Indexed8 => r0[2 * i],
                };
            }
        }
    }
    Ok(out)
}

/// Per-pixel merge that keeps data over blanks; where both carry data the new
/// raster wins.
pub fn merge_prefer_nonblank(new: &Raster, old: &Raster) -> Result<Raster, RasterError> {
    if new.width != old.width || new.height != old.height || !new.same_kind(old) {
        return Err(RasterError::Mismatch);
    }
    let b = new.blank_value();
    let mut out = new.clone();
    for (o, &p) in out.pixels.iter_mut().zip(&old.pixels) {
        if *o == b {
            *o = p;
        }
    }
    Ok(out)
}
