//! Binary PGM (P5) reading and writing.
//!
//! Gray values are normalized to [0, 1]; 8-bit and 16-bit sources are both
//! honored (16-bit samples are big-endian per the format). ASCII (P2) files
//! are rejected explicitly.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::RealTensor;

/// A grayscale image with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFile {
    pub width: usize,
    pub height: usize,
    pub pixels: RealTensor,
}

impl ImageFile {
    pub fn from_tensor(pixels: RealTensor) -> Result<Self> {
        let (height, width) = pixels.hw()?;
        if pixels.rank() != 2 {
            return Err(Error::Shape(format!(
                "image tensor must be rank 2, got {:?}",
                pixels.shape()
            )));
        }
        Ok(ImageFile {
            width,
            height,
            pixels,
        })
    }
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Parser<'a> {
    fn err(&self, what: &str) -> Error {
        Error::Data(format!(
            "{}: {} at byte offset {}",
            self.path.display(),
            what,
            self.pos
        ))
    }

    /// Skip whitespace and '#' comment lines.
    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<&'a [u8]> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err("unexpected end of header"));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let tok = self.token()?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| self.err(&format!("malformed {what}")))
    }
}

pub fn load_pgm(path: &Path) -> Result<ImageFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut p = Parser {
        bytes: &bytes,
        pos: 0,
        path,
    };
    let magic = p.token()?;
    match magic {
        b"P5" => {}
        b"P2" => {
            return Err(Error::Data(format!(
                "{}: unsupported variant P2 (ASCII); only binary P5 is supported",
                path.display()
            )))
        }
        other => {
            return Err(Error::Data(format!(
                "{}: not a PGM file (magic {:?})",
                path.display(),
                String::from_utf8_lossy(other)
            )))
        }
    }
    let width = p.number("width")?;
    let height = p.number("height")?;
    let maxval = p.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(p.err("zero image dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(p.err("maxval out of range"));
    }
    // exactly one whitespace byte separates the header from the payload
    if p.pos >= p.bytes.len() || !p.bytes[p.pos].is_ascii_whitespace() {
        return Err(p.err("missing header terminator"));
    }
    p.pos += 1;

    let two_byte = maxval > 255;
    let expected = width * height * if two_byte { 2 } else { 1 };
    let payload = &bytes[p.pos..];
    if payload.len() < expected {
        return Err(Error::Data(format!(
            "{}: truncated payload at byte offset {} (have {}, need {expected})",
            path.display(),
            p.pos,
            payload.len()
        )));
    }
    let scale = 1.0 / maxval as f64;
    let mut data = Vec::with_capacity(width * height);
    if two_byte {
        for chunk in payload[..expected].chunks_exact(2) {
            let v = u16::from_be_bytes([chunk[0], chunk[1]]);
            data.push(v as f64 * scale);
        }
    } else {
        for &b in &payload[..expected] {
            data.push(b as f64 * scale);
        }
    }
    Ok(ImageFile {
        width,
        height,
        pixels: RealTensor::from_vec(&[height, width], data)?,
    })
}

/// Write an 8-bit binary PGM; values are clamped to [0, 1] on save.
pub fn save_pgm(img: &ImageFile, path: &Path) -> Result<()> {
    save_pgm_with_maxval(img, path, 255)
}

pub fn save_pgm_with_maxval(img: &ImageFile, path: &Path, maxval: usize) -> Result<()> {
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Config(format!("maxval {maxval} out of range")));
    }
    let mut out = format!("P5\n{} {}\n{}\n", img.width, img.height, maxval).into_bytes();
    let two_byte = maxval > 255;
    for &v in img.pixels.data() {
        let q = (v.clamp(0.0, 1.0) * maxval as f64).round() as u32;
        if two_byte {
            out.extend_from_slice(&(q as u16).to_be_bytes());
        } else {
            out.push(q as u8);
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Rescale an arbitrary tensor plane into [0, 1] for viewing.
pub fn normalize_for_view(t: &RealTensor) -> RealTensor {
    let lo = t.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return RealTensor::zeros(t.shape());
    }
    t.map(|v| (v - lo) / (hi - lo))
}
