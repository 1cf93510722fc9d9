//! Lossless tile storage as PNG. Gray rasters are 8-bit grayscale; paletted
//! rasters are 8-bit indexed with a `PLTE` chunk and a `tEXt` chunk naming
//! the blank index. Encoder settings are fixed so the bytes are reproducible.

use super::{Raster, RasterError};
use crate::grid::{PixelFormat, TILE_PIXELS};

const BLANK_KEY: &str = "blank-index";

pub fn encode_tile(r: &Raster) -> Result<Vec<u8>, RasterError> {
    if r.width() != TILE_PIXELS || r.height() != TILE_PIXELS {
        return Err(RasterError::Mismatch);
    }
    encode_png(r)
}

pub fn decode_tile(blob: &[u8]) -> Result<Raster, RasterError> {
    let r = decode_png(blob)?;
    if r.width() != TILE_PIXELS || r.height() != TILE_PIXELS {
        return Err(RasterError::Corrupt(format!("tile is {}x{}", r.width(), r.height())));
    }
    Ok(r)
}

pub fn encode_png(r: &Raster) -> Result<Vec<u8>, RasterError> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, r.width(), r.height());
        enc.set_depth(png::BitDepth::Eight);
        enc.set_compression(png::Compression::Balanced);
        enc.set_filter(png::Filter::Up);
        match r.format() {
            PixelFormat::Gray8 => enc.set_color(png::ColorType::Grayscale),
            PixelFormat::Indexed8 => {
                enc.set_color(png::ColorType::Indexed);
                enc.set_palette(r.palette().iter().flatten().copied().collect::<Vec<u8>>());
                enc.add_text_chunk(BLANK_KEY.to_string(), r.blank_index().to_string())
                    .map_err(|e| RasterError::Corrupt(e.to_string()))?;
            }
        }
        let mut w = enc.write_header().map_err(|e| RasterError::Corrupt(e.to_string()))?;
        w.write_image_data(r.pixels()).map_err(|e| RasterError::Corrupt(e.to_string()))?;
        w.finish().map_err(|e| RasterError::Corrupt(e.to_string()))?;
    }
    Ok(out)
}

/// Decodes an 8-bit grayscale or 8-bit indexed PNG without colour expansion.
pub fn decode_png(bytes: &[u8]) -> Result<Raster, RasterError> {
    let mut dec = png::Decoder::new(std::io::Cursor::new(bytes));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| RasterError::Corrupt(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| RasterError::Corrupt("image too large".into()))?;
    let mut buf = vec![0; size];
    let frame = reader.next_frame(&mut buf).map_err(|e| RasterError::Corrupt(e.to_string()))?;
    if frame.bit_depth != png::BitDepth::Eight {
        return Err(RasterError::Unsupported(format!("bit depth {:?}", frame.bit_depth)));
    }
    buf.truncate(frame.buffer_size());
    let (w, h) = (frame.width, frame.height);
    // Rows are tightly packed for 8-bit single-channel images.
    match frame.color_type {
        png::ColorType::Grayscale => Raster::gray(w, h, buf),
        png::ColorType::Indexed => {
            let info = reader.info();
            let palette: Vec<[u8; 3]> = info
                .palette
                .as_ref()
                .ok_or_else(|| RasterError::Corrupt("indexed PNG without palette".into()))?
                .chunks_exact(3)
                .map(|c| [c[0], c[1], c[2]])
                .collect();
            let blank = info
                .uncompressed_latin1_text
                .iter()
                .find(|t| t.keyword == BLANK_KEY)
                .map(|t| t.text.parse::<u8>())
                .transpose()
                .map_err(|e| RasterError::Corrupt(format!("blank index: {e}")))?
                .unwrap_or(0);
            Raster::indexed(w, h, palette, blank, buf)
        }
        other => Err(RasterError::Unsupported(format!("color type {other:?}"))),
    }
}
