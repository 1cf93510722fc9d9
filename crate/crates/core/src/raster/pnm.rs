//! Binary PGM (`P5`, maxval 255) ingest format.

use super::{Raster, RasterError};
use crate::grid::PixelFormat;

pub fn read_pgm(bytes: &[u8]) -> Result<Raster, RasterError> {
    let mut pos = 0usize;
    let mut token = || -> Result<String, RasterError> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(RasterError::Corrupt("truncated PGM header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|c| !c.is_ascii_whitespace()) {
            pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    if magic != "P5" {
        return Err(RasterError::Unsupported(format!("PGM magic {magic:?}")));
    }
    let num = |s: String| s.parse::<u32>().map_err(|_| RasterError::Corrupt(format!("bad PGM field {s:?}")));
    let width = num(token()?)?;
    let height = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval != 255 {
        return Err(RasterError::Unsupported(format!("PGM maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let data_start = pos + 1;
    let len = width as usize * height as usize;
    let data = bytes
        .get(data_start..data_start + len)
        .ok_or_else(|| RasterError::Corrupt("truncated PGM raster".into()))?;
    Raster::gray(width, height, data.to_vec())
}

pub fn write_pgm(r: &Raster) -> Result<Vec<u8>, RasterError> {
    if r.format() != PixelFormat::Gray8 {
        return Err(RasterError::Unsupported("PGM holds gray rasters only".into()));
    }
    let mut out = format!("P5\n{} {}\n255\n", r.width(), r.height()).into_bytes();
    out.extend_from_slice(r.pixels());
    Ok(out)
}
