//! Grayscale PFM disparity maps.
//!
//! Layout: a `Pf` magic line, a `width height` line, a scale line whose sign
//! encodes endianness (negative = little-endian), then `width * height`
//! 32-bit floats stored row-major with rows running bottom to top. Non-finite
//! and negative entries decode as invalid pixels. Color `PF` files are
//! rejected.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::types::DisparityMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PfmEndianness {
    #[default]
    Little,
    Big,
}

struct Lexer<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Lexer<'a> {
    fn token(&mut self, what: &str) -> Result<(&'a str, u64)> {
        while self.pos < self.data.len() && self.data[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        while self.pos < self.data.len() && !self.data[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format(
                self.path,
                start as u64,
                format!("missing {what}"),
            ));
        }
        let text = std::str::from_utf8(&self.data[start..self.pos])
            .map_err(|_| Error::format(self.path, start as u64, format!("non-ASCII {what}")))?;
        Ok((text, start as u64))
    }
}

/// Loads a grayscale PFM file as a disparity map (rows flipped to
/// top-to-bottom; non-finite or negative samples marked invalid).
pub fn load_pfm(path: &Path) -> Result<DisparityMap> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut lex = Lexer {
        data: &data,
        pos: 0,
        path,
    };

    let (magic, magic_at) = lex.token("magic")?;
    match magic {
        "Pf" => {}
        "PF" => {
            return Err(Error::format(
                path,
                magic_at,
                "color PFM (magic PF) is unsupported; expected grayscale Pf",
            ))
        }
        other => {
            return Err(Error::format(
                path,
                magic_at,
                format!("bad magic {other:?}; expected Pf"),
            ))
        }
    }

    let (w_txt, w_at) = lex.token("width")?;
    let width: usize = w_txt
        .parse()
        .map_err(|_| Error::format(path, w_at, format!("bad width {w_txt:?}")))?;
    let (h_txt, h_at) = lex.token("height")?;
    let height: usize = h_txt
        .parse()
        .map_err(|_| Error::format(path, h_at, format!("bad height {h_txt:?}")))?;
    if width == 0 || height == 0 {
        return Err(Error::format(path, w_at, "zero-sized image"));
    }
    let (scale_txt, scale_at) = lex.token("scale")?;
    let scale: f64 = scale_txt
        .parse()
        .map_err(|_| Error::format(path, scale_at, format!("bad scale {scale_txt:?}")))?;
    if scale == 0.0 {
        return Err(Error::format(path, scale_at, "scale must be nonzero"));
    }
    let little_endian = scale < 0.0;

    // Exactly one whitespace byte separates the header from the payload.
    let payload_at = lex.pos + 1;
    let need = width * height * 4;
    if data.len() < payload_at + need {
        return Err(Error::format(
            path,
            data.len() as u64,
            format!(
                "truncated payload: need {need} bytes from offset {payload_at}, have {}",
                data.len().saturating_sub(payload_at)
            ),
        ));
    }

    let mut values = Array2::zeros((height, width));
    let mut valid = Array2::from_elem((height, width), false);
    for row in 0..height {
        // Rows are stored bottom to top.
        let v = height - 1 - row;
        for u in 0..width {
            let at = payload_at + (row * width + u) * 4;
            let raw: [u8; 4] = data[at..at + 4].try_into().unwrap();
            let x = if little_endian {
                f32::from_le_bytes(raw)
            } else {
                f32::from_be_bytes(raw)
            } as f64;
            if x.is_finite() && x >= 0.0 {
                values[(v, u)] = x;
                valid[(v, u)] = true;
            }
        }
    }
    DisparityMap::new(values, valid)
}

/// Writes a disparity map as grayscale PFM; invalid pixels become NaN.
///
/// Values pass through `f32`, so round-trips are exact only for
/// `f32`-representable disparities.
pub fn write_pfm(path: &Path, map: &DisparityMap, endianness: PfmEndianness) -> Result<()> {
    let (h, w) = (map.height(), map.width());
    let scale = match endianness {
        PfmEndianness::Little => "-1.0",
        PfmEndianness::Big => "1.0",
    };
    let mut out = format!("Pf\n{w} {h}\n{scale}\n").into_bytes();
    out.reserve(h * w * 4);
    for row in 0..h {
        let v = h - 1 - row;
        for u in 0..w {
            let x = if map.valid()[(v, u)] {
                map.values()[(v, u)] as f32
            } else {
                f32::NAN
            };
            let bytes = match endianness {
                PfmEndianness::Little => x.to_le_bytes(),
                PfmEndianness::Big => x.to_be_bytes(),
            };
            out.extend_from_slice(&bytes);
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
