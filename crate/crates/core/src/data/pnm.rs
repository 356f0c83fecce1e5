//! Binary PPM (P6) and PGM (P5) images with 8-bit samples.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// An 8-bit RGB image, row-major, interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, pixels: vec![0; width * height * 3] }
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    assert_eq!(gray.len(), width * height, "pgm buffer size");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (magic, width, height, body) = parse_header(&bytes).map_err(|msg| Error::data(path, msg))?;
    if magic != *b"P6" {
        return Err(Error::data(path, "not a binary PPM (P6) image"));
    }
    let need = width * height * 3;
    if body.len() < need {
        return Err(Error::data(path, format!("truncated pixel data: {} of {need} bytes", body.len())));
    }
    Ok(RgbImage { width, height, pixels: body[..need].to_vec() })
}

/// Reads a P5 image, returning `(width, height, samples)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (magic, width, height, body) = parse_header(&bytes).map_err(|msg| Error::data(path, msg))?;
    if magic != *b"P5" {
        return Err(Error::data(path, "not a binary PGM (P5) image"));
    }
    if body.len() < width * height {
        return Err(Error::data(path, "truncated pixel data"));
    }
    Ok((width, height, body[..width * height].to_vec()))
}

/// Splits a netpbm header into magic, width, height and the pixel bytes.
/// Only `maxval = 255` is accepted.
fn parse_header(bytes: &[u8]) -> std::result::Result<([u8; 2], usize, usize, &[u8]), String> {
    if bytes.len() < 2 {
        return Err("empty or truncated image".into());
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and `#` comments may precede every field
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap_or("");
        *field = text.parse().map_err(|_| "malformed netpbm header".to_string())?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}, expected 255"));
    }
    if width == 0 || height == 0 {
        return Err("zero image dimension".into());
    }
    // exactly one whitespace byte separates the header from the samples
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("malformed netpbm header".into());
    }
    Ok((magic, width, height, &bytes[pos + 1..]))
}
