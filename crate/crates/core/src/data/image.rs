//! Binary PGM (P5) grayscale images.

use std::path::Path;

use crate::error::{DataError, Error, Result};

/// Grayscale image with values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Self {
        assert_eq!(width * height, pixels.len(), "pixel count");
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Self {
        Self::new(width, height, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    /// 8-bit quantization (round to nearest, clamped).
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}

/// Parses a binary PGM with `maxval <= 255`.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    let corrupt = |msg: &str| -> Error {
        DataError::CorruptImage {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        }
        .into()
    };
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(DataError::UnsupportedFormat(path.to_path_buf()).into());
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(corrupt("header ends early")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| corrupt("bad header number"))?;
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(corrupt("missing raster separator"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(corrupt("only 8-bit PGM is supported"));
    }
    let n = width * height;
    let raster = bytes
        .get(pos..pos + n)
        .ok_or_else(|| corrupt("raster is truncated"))?;
    let scale = maxval as f32;
    Ok(GrayImage::new(
        width,
        height,
        raster.iter().map(|&b| (b as f32 / scale).min(1.0)).collect(),
    ))
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.to_bytes());
    out
}

pub fn load_image(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => DataError::MissingFile(path.to_path_buf()).into(),
        _ => Error::io(path, e),
    })?;
    decode_pgm(&bytes, path)
}

pub fn save_image(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}
