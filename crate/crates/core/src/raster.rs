//! Binary PPM (P6) images and PGM (P5) label masks, maxval 255.

use std::path::Path;

use crate::error::{Error, Result};
use crate::taxonomy::{Granularity, LabelMask};
use crate::tensor::Tensor;

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Quantise an (H, W, 3) image in [0, 1] to bytes.
pub fn image_to_bytes(image: &Tensor) -> Result<Vec<u8>> {
    let (_, _, c) = image.dims3()?;
    if c != 3 {
        return Err(format_err(format!("PPM needs 3 channels, got {c}")));
    }
    Ok(image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect())
}

pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w, _) = image.dims3()?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(image_to_bytes(image)?);
    Ok(out)
}

pub fn encode_pgm(mask: &LabelMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend_from_slice(mask.labels());
    out
}

/// Parse a netpbm header, returning (width, height, payload offset).
fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<(usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(format_err(format!("missing {} magic", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
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
        if start == pos {
            return Err(format_err("malformed header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_err("header number out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(format_err("header must end with one whitespace byte"));
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(format_err(format!("maxval must be 255, got {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(format_err("zero-sized raster"));
    }
    Ok((w, h, pos + 1))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let (w, h, off) = parse_header(bytes, b"P6")?;
    let payload = &bytes[off..];
    if payload.len() != w * h * 3 {
        return Err(format_err(format!("expected {} payload bytes, found {}", w * h * 3, payload.len())));
    }
    Tensor::new(&[h, w, 3], payload.iter().map(|&b| b as f64 / 255.0).collect())
}

pub fn decode_pgm(bytes: &[u8], granularity: Granularity) -> Result<LabelMask> {
    let (w, h, off) = parse_header(bytes, b"P5")?;
    let payload = &bytes[off..];
    if payload.len() != w * h {
        return Err(format_err(format!("expected {} payload bytes, found {}", w * h, payload.len())));
    }
    LabelMask::new(h, w, payload.to_vec(), granularity).map_err(|e| format_err(e.to_string()))
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    std::fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    decode_ppm(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_pgm(path: &Path, mask: &LabelMask) -> Result<()> {
    std::fs::write(path, encode_pgm(mask)).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<LabelMask> {
    decode_pgm(&std::fs::read(path).map_err(|e| Error::io(path, e))?, Granularity::Fine)
}
