//! Binary PPM (`P6`, maxval 255) images as channel-first `[3, d, d]`
//! tensors with values in `[0, 1]`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Quantizes `[3, h, w]` values to 8 bits (clamped to `[0, 1]`).
pub fn encode(image: &Tensor) -> Result<Vec<u8>> {
    let [c, h, w] = image.shape() else {
        return Err(Error::Input(format!(
            "expected a [3, h, w] image, got {:?}",
            image.shape()
        )));
    };
    if *c != 3 {
        return Err(Error::Input(format!("expected 3 channels, got {c}")));
    }
    let (h, w) = (*h, *w);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let src = image.data();
    for i in 0..plane {
        for ch in 0..3 {
            out.push(to_byte(src[ch * plane + i]));
        }
    }
    Ok(out)
}

pub fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write(path: &Path, image: &Tensor) -> Result<()> {
    fs::write(path, encode(image)?).map_err(|e| Error::io(path, e))
}

struct Header {
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<Header> {
    let malformed = |reason: &str| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    match bytes.get(..2) {
        Some(b"P6") => {}
        Some(m @ (b"P1" | b"P2" | b"P3" | b"P4" | b"P5")) => {
            return Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
                reason: format!("{} is not binary RGB (P6)", String::from_utf8_lossy(m)),
            })
        }
        _ => return Err(malformed("missing P6 magic")),
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // Whitespace and `#` comments separate header tokens.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(malformed("header ends early")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(malformed("expected a decimal number"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| malformed("number out of range"))?;
    }
    // Exactly one whitespace byte precedes the raster.
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(malformed("missing whitespace after maxval"));
    }
    Ok(Header {
        width: fields[0],
        height: fields[1],
        maxval: fields[2],
        data_start: pos + 1,
    })
}

/// Decodes a P6 image that must be `size × size`.
pub fn decode(path: &Path, bytes: &[u8], size: usize) -> Result<Tensor> {
    let h = parse_header(path, bytes)?;
    if h.maxval != 255 {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: format!("maxval {} (only 8-bit, maxval 255, is supported)", h.maxval),
        });
    }
    if h.width != size || h.height != size {
        return Err(Error::WrongDimensions {
            path: path.to_path_buf(),
            expected: size,
            width: h.width,
            height: h.height,
        });
    }
    let plane = size * size;
    let payload = &bytes[h.data_start.min(bytes.len())..];
    if payload.len() < 3 * plane {
        return Err(Error::TruncatedPayload {
            path: path.to_path_buf(),
            expected: 3 * plane,
            found: payload.len(),
        });
    }
    let mut data = vec![0.0; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            data[c * plane + i] = f32::from(payload[3 * i + c]) / 255.0;
        }
    }
    Tensor::new(&[3, size, size], data)
}

pub fn read_image(path: &Path, size: usize) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(path, &bytes, size)
}
