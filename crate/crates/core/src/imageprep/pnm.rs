//! Binary PGM (`P5`) and PPM (`P6`) with maxval 255.
//!
//! Decoding yields raw intensities in `[0, 255]` ready for [`super::normalize`];
//! encoding takes a normalized image and quantizes it back to bytes.

use std::path::Path;

use super::ImageBuffer;
use crate::error::{Error, Result};

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    data_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(format_err("not a binary PGM/PPM file (expected P5 or P6)")),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments between tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(format_err("truncated header")),
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
            .ok_or_else(|| format_err("header value out of range"))?;
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(format_err("missing whitespace after maxval"));
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(format_err(format!("maxval {maxval} unsupported; expected 255")));
    }
    if width == 0 || height == 0 {
        return Err(format_err("zero image dimension"));
    }
    Ok(Header {
        channels,
        width,
        height,
        data_offset: pos + 1,
    })
}

pub fn decode(bytes: &[u8]) -> Result<ImageBuffer> {
    let h = parse_header(bytes)?;
    let len = h
        .width
        .checked_mul(h.height)
        .and_then(|n| n.checked_mul(h.channels))
        .ok_or_else(|| format_err("image dimensions overflow"))?;
    let data = &bytes[h.data_offset..];
    if data.len() < len {
        return Err(format_err(format!("raster has {} bytes, expected {len}", data.len())));
    }
    let pixels = data[..len].iter().map(|&b| b as f64).collect();
    ImageBuffer::new(h.height, h.width, h.channels, pixels)
}

/// Quantizes a normalized image (`v * 255`, rounded half up) to P5/P6 bytes.
pub fn encode(img: &ImageBuffer) -> Result<Vec<u8>> {
    if !img.is_normalized() {
        return Err(crate::error::domain("encoding expects pixels normalized to [0, 1]"));
    }
    let magic = if img.channels() == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic} {} {} 255\n", img.width(), img.height()).into_bytes();
    out.extend(img.pixels().iter().map(|&v| (v * 255.0 + 0.5).floor() as u8));
    Ok(out)
}

pub fn read(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| format_err(format!("{}: {e}", path.display())))?;
    decode(&bytes).map_err(|e| format_err(format!("{}: {e}", path.display())))
}

pub fn write(path: impl AsRef<Path>, img: &ImageBuffer) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(img)?).map_err(|e| format_err(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageprep::normalize;

    #[test]
    fn decodes_with_comments() {
        let mut bytes = b"P5\n# made by hand\n3 2\n255\n".to_vec();
        bytes.extend([0, 51, 255, 10, 20, 30]);
        let img = decode(&bytes).unwrap();
        assert_eq!((img.height(), img.width(), img.channels()), (2, 3, 1));
        assert_eq!(img.get(0, 1, 0), 51.0);
        assert_eq!(img.get(1, 2, 0), 30.0);
    }

    #[test]
    fn ppm_round_trip() {
        let raw: Vec<f64> = (0..2 * 2 * 3).map(|i| (i * 20) as f64).collect();
        let img = ImageBuffer::new(2, 2, 3, raw).unwrap();
        let bytes = encode(&normalize(&img).unwrap()).unwrap();
        assert!(bytes.starts_with(b"P6 2 2 255\n"));
        assert_eq!(decode(&bytes).unwrap(), img);
    }

    #[test]
    fn rounding_is_half_up() {
        let img = ImageBuffer::new(1, 3, 1, vec![0.5, 1.49 / 255.0, 1.51 / 255.0]).unwrap();
        let bytes = encode(&img).unwrap();
        // 127.5 rounds up to 128
        assert_eq!(&bytes[bytes.len() - 3..], [128, 1, 2]);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(decode(b"P2 1 1 255\n0").is_err());
        assert!(decode(b"P5 2 2 255\n\x00\x00").is_err());
        assert!(decode(b"P5 1 1 65535\n\x00\x00").is_err());
        assert!(decode(b"P5 1").is_err());
    }
}
