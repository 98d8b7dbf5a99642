//! Binary PGM (P5) and PPM (P6) encoding, 8-bit only.

use std::path::Path;

use crate::{Error, Result};

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), width * height * 3);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Quantizes values in `[0, 1]` to bytes (`round(v * 255)`, clamped).
pub fn quantize(values: &[f64]) -> Vec<u8> {
    values
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

pub fn write_gray(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    std::fs::write(path, encode_pgm(width, height, &quantize(values)))?;
    Ok(())
}

struct Header {
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::format(format!(
            "expected {} magic",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Skip whitespace and comments.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::format("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let token = std::str::from_utf8(&bytes[start..pos]).unwrap_or_default();
        *field = token
            .parse()
            .map_err(|_| Error::format(format!("bad header field {token:?}")))?;
    }
    // Exactly one whitespace byte separates the header from the raster.
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format("missing whitespace after header"));
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(format!("unsupported maxval {maxval}")));
    }
    Ok(Header {
        width,
        height,
        maxval,
        data_start: pos + 1,
    })
}

/// Decodes a P5 image into `(width, height, values in [0, 1])`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let h = parse_header(bytes, b"P5")?;
    let n = h.width * h.height;
    let raster = bytes
        .get(h.data_start..h.data_start + n)
        .ok_or_else(|| Error::format("truncated raster"))?;
    let scale = h.maxval as f64;
    Ok((h.width, h.height, raster.iter().map(|&b| b as f64 / scale).collect()))
}
