//! Binary netpbm images: P5 (grey) and P6 (RGB), maxval 255.

use std::path::Path;

use crate::detect::FloatImage;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    /// 1 or 3.
    pub channels: usize,
    /// Interleaved samples, row-major.
    pub data: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Format(format!("images have 1 or 3 channels, got {channels}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::Format(format!("empty image {width}x{height}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::Format(format!(
                "{width}x{height}x{channels} image needs {} samples, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    /// Samples scaled to `[0, 1]`.
    pub fn to_float(&self) -> FloatImage {
        FloatImage {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| f64::from(v) / 255.0).collect(),
        }
    }

    /// Rounds `[0, 1]` samples to 8 bits; out-of-range values are clamped.
    pub fn from_float(img: &FloatImage) -> Result<Self> {
        let data = img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        Self::new(img.width, img.height, img.channels, data)
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let magic = bytes.get(..2).ok_or_else(|| Error::Format("file too short for a header".into()))?;
        let channels = match magic {
            b"P5" => 1,
            b"P6" => 3,
            _ => return Err(Error::Format("bad magic: expected P5 or P6".into())),
        };
        pos += 2;
        let mut fields = [0usize; 3];
        for f in &mut fields {
            *f = header_number(bytes, &mut pos)?;
        }
        let [width, height, maxval] = fields;
        if maxval != 255 {
            return Err(Error::Format(format!("only maxval 255 is supported, got {maxval}")));
        }
        // exactly one whitespace byte separates the header from the samples
        match bytes.get(pos) {
            Some(b) if b.is_ascii_whitespace() => pos += 1,
            _ => return Err(Error::Format("missing whitespace after maxval".into())),
        }
        let expected = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| Error::Format("image dimensions overflow".into()))?;
        let body = &bytes[pos..];
        if body.len() != expected {
            return Err(Error::Format(format!("expected {expected} sample bytes, found {}", body.len())));
        }
        Self::new(width, height, channels, body.to_vec())
    }
}

/// Skips whitespace and `#` comments, then reads one decimal number that
/// must be followed by whitespace.
fn header_number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let mut saw_space = false;
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
                saw_space = true;
            }
            Some(b) if b.is_ascii_whitespace() => {
                *pos += 1;
                saw_space = true;
            }
            Some(_) => break,
            None => return Err(Error::Format("header ends early".into())),
        }
    }
    if !saw_space {
        return Err(Error::Format("header fields must be separated by whitespace".into()));
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    if start == *pos || *pos - start > 9 {
        return Err(Error::Format(format!("bad header number at byte {start}")));
    }
    let n: usize = std::str::from_utf8(&bytes[start..*pos]).unwrap().parse().unwrap();
    if n == 0 {
        return Err(Error::Format(format!("header number at byte {start} must be positive")));
    }
    Ok(n)
}

pub fn read_image(path: &Path) -> Result<ImageBuffer> {
    ImageBuffer::decode(&std::fs::read(path)?)
}

pub fn write_image(img: &ImageBuffer, path: &Path) -> Result<()> {
    std::fs::write(path, img.encode())?;
    Ok(())
}
