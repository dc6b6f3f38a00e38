//! Binary netpbm images.
//!
//! Three-channel grids are written as P6, single-channel grids as P5. The
//! byte layout is exactly
//!
//! ```text
//! "P6\n" <width> " " <height> "\n255\n" <height * width * 3 bytes, row-major RGB>
//! ```
//!
//! with each value clamped to `[0, 1]` and stored as `round(v * 255)`.
//! Readers accept any whitespace and `#` comments in the header and any
//! maxval up to 255.

use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{Grid, Shape};
use crate::guidance::RegionMask;

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_image(x: &Grid) -> Result<Vec<u8>> {
    if !x.is_finite() {
        return Err(Error::Config("cannot encode a non-finite image".into()));
    }
    let s = x.shape();
    let magic = match s.channels {
        3 => "P6",
        1 => "P5",
        d => return Err(Error::dims("1 or 3 channels", d)),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", s.width, s.height).into_bytes();
    out.extend(x.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

pub fn write_image(x: &Grid, path: &Path) -> Result<()> {
    let bytes = encode_image(x)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

struct Header<'a> {
    rest: &'a [u8],
}

impl<'a> Header<'a> {
    fn skip(&mut self) {
        loop {
            match self.rest.first() {
                Some(b) if b.is_ascii_whitespace() => self.rest = &self.rest[1..],
                Some(b'#') => {
                    let end = self.rest.iter().position(|&b| b == b'\n').unwrap_or(self.rest.len());
                    self.rest = &self.rest[end..];
                }
                _ => return,
            }
        }
    }

    fn number(&mut self) -> Option<usize> {
        self.skip();
        let end = self.rest.iter().position(|b| !b.is_ascii_digit()).unwrap_or(self.rest.len());
        let n = std::str::from_utf8(&self.rest[..end]).ok()?.parse().ok()?;
        self.rest = &self.rest[end..];
        Some(n)
    }
}

pub fn decode_image(bytes: &[u8], path: &Path) -> Result<Grid> {
    let bad = |message: &str| Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    };
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(bad("not a binary PPM (P6) or PGM (P5) file")),
    };
    let mut h = Header { rest: &bytes[2..] };
    let width = h.number().ok_or_else(|| bad("missing width"))?;
    let height = h.number().ok_or_else(|| bad("missing height"))?;
    let maxval = h.number().ok_or_else(|| bad("missing maxval"))?;
    if maxval == 0 || maxval > 255 {
        return Err(bad("maxval must be in 1..=255"));
    }
    match h.rest.first() {
        Some(b) if b.is_ascii_whitespace() => {}
        _ => return Err(bad("malformed header")),
    }
    let data = &h.rest[1..];
    let shape = Shape::new(height, width, channels);
    if data.len() != shape.len() {
        return Err(bad(&format!(
            "expected {} data bytes for {shape}, found {}",
            shape.len(),
            data.len()
        )));
    }
    Grid::from_vec(shape, data.iter().map(|&b| b as f64 / maxval as f64).collect())
}

pub fn read_image(path: &Path) -> Result<Grid> {
    decode_image(&std::fs::read(path)?, path)
}

/// Binary region mask from a PGM file: pixels at or above half intensity are set.
pub fn read_mask(path: &Path) -> Result<RegionMask> {
    let g = read_image(path)?;
    let s = g.shape();
    if s.channels != 1 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: "instance masks must be single-channel PGM".into(),
        });
    }
    RegionMask::from_intensities(s.height, s.width, g.data(), 0.5)
}

pub fn write_mask(mask: &RegionMask, path: &Path) -> Result<()> {
    let g = Grid::from_vec(
        Shape::new(mask.height(), mask.width(), 1),
        mask.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    )?;
    write_image(&g, path)
}
