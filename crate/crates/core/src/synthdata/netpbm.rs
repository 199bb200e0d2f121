//! Binary PPM (P6) and PGM (P5) with maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

fn write_pnm(path: &Path, magic: &str, width: usize, height: usize, channels: usize, raster: &[u8]) -> Result<()> {
    if raster.len() != width * height * channels {
        return Err(Error::invalid(format!(
            "{}: raster has {} bytes, expected {}",
            path.display(),
            raster.len(),
            width * height * channels
        )));
    }
    let mut bytes = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(raster);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    write_pnm(path, "P6", width, height, 3, rgb)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, grey: &[u8]) -> Result<()> {
    write_pnm(path, "P5", width, height, 1, grey)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn err(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            detail: detail.into(),
        }
    }

    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err(format!("expected {what}")))
    }
}

fn read_pnm(path: &Path, magic: &[u8; 2], channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(cur.err(format!("bad magic, expected {}", String::from_utf8_lossy(magic))));
    }
    cur.pos = 2;
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(cur.err(format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(cur.pos) {
        Some(c) if c.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(cur.err("missing whitespace before raster")),
    }
    let need = width * height * channels;
    let raster = &bytes[cur.pos..];
    if raster.len() != need {
        return Err(cur.err(format!("raster has {} bytes, expected {need}", raster.len())));
    }
    Ok((width, height, raster.to_vec()))
}

/// Returns `(width, height, rgb bytes)`.
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    read_pnm(path, b"P6", 3)
}

/// Returns `(width, height, grey bytes)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    read_pnm(path, b"P5", 1)
}
