//! Binary PGM (P5) and PPM (P6) with maxval 255.
//!
//! Writing quantizes `v ∈ [0, 1]` to `floor(255·v + 0.5)` (round half up);
//! reading maps a byte `b` to `b / 255`.

use std::fs;
use std::path::Path;

use super::GrayImage;
use crate::error::{Error, Result};

pub fn quantize(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0) + 0.5).floor() as u8
}

pub fn encode_pgm(image: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.pixels.iter().map(|&v| quantize(v)));
    out
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    if rgb.len() != 3 * width * height {
        return Err(Error::shape(format!(
            "{width}×{height} PPM needs {} bytes, got {}",
            3 * width * height,
            rgb.len()
        )));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    Ok(out)
}

pub fn write_pgm(image: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(image)).map_err(|e| Error::io(path, e))
}

pub fn write_ppm(width: usize, height: usize, rgb: &[u8], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(width, height, rgb)?).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let (magic, header) = parse_header(bytes)?;
    if magic != *b"P5" {
        return Err(Error::Format("not a binary PGM (expected P5 magic)".into()));
    }
    let Header {
        width,
        height,
        offset,
    } = header;
    let payload = &bytes[offset..];
    let n = width * height;
    if payload.len() < n {
        return Err(Error::Format(format!(
            "truncated PGM payload: {} of {n} bytes",
            payload.len()
        )));
    }
    let pixels = payload[..n].iter().map(|&b| f64::from(b) / 255.0).collect();
    GrayImage::new(width, height, pixels)
}

/// Decodes a P6 file into raw RGB bytes.
pub fn decode_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let (magic, header) = parse_header(bytes)?;
    if magic != *b"P6" {
        return Err(Error::Format("not a binary PPM (expected P6 magic)".into()));
    }
    let n = 3 * header.width * header.height;
    let payload = &bytes[header.offset..];
    if payload.len() < n {
        return Err(Error::Format("truncated PPM payload".into()));
    }
    Ok((header.width, header.height, payload[..n].to_vec()))
}

struct Header {
    width: usize,
    height: usize,
    offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<([u8; 2], Header)> {
    if bytes.len() < 2 {
        return Err(Error::Format("file too short for a netpbm header".into()));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|b| *b != b'\n') {
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
            return Err(Error::Format("malformed netpbm header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("header value out of range".into()))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format("missing separator after netpbm header".into()));
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval}; only 255 is handled")));
    }
    Ok((
        magic,
        Header {
            width,
            height,
            offset: pos + 1,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_rounds_up() {
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        let img = GrayImage::filled(4, 3, 0.5);
        let back = decode_pgm(&encode_pgm(&img)).unwrap();
        assert!(back.pixels.iter().all(|&v| v == 128.0 / 255.0));
    }

    #[test]
    fn zero_image_is_zero_bytes() {
        let bytes = encode_pgm(&GrayImage::filled(5, 2, 0.0));
        assert_eq!(&bytes[..11], b"P5\n5 2\n255\n");
        assert!(bytes[11..].iter().all(|&b| b == 0));
        assert_eq!(bytes.len(), 11 + 10);
    }

    #[test]
    fn roundtrip_within_quantization_step() {
        let pixels: Vec<f64> = (0..64).map(|i| (i as f64 * 0.137).fract()).collect();
        let img = GrayImage::new(8, 8, pixels).unwrap();
        let back = decode_pgm(&encode_pgm(&img)).unwrap();
        for (a, b) in img.pixels.iter().zip(&back.pixels) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn header_errors() {
        assert!(matches!(decode_pgm(b"P2\n1 1\n255\n\x00"), Err(Error::Format(_))));
        assert!(matches!(decode_pgm(b"P5\n2 2\n255\n\x00\x01"), Err(Error::Format(_))));
        assert!(matches!(decode_pgm(b"P5\n2 2\n65535\n"), Err(Error::Format(_))));
        let with_comment = b"P5\n# made by hand\n1 1\n255\n\x80";
        assert_eq!(decode_pgm(with_comment).unwrap().pixels, vec![128.0 / 255.0]);
    }

    #[test]
    fn ppm_roundtrip() {
        let rgb = vec![1, 2, 3, 4, 5, 6];
        let bytes = encode_ppm(2, 1, &rgb).unwrap();
        assert_eq!(decode_ppm(&bytes).unwrap(), (2, 1, rgb));
        assert!(encode_ppm(2, 2, &[0; 3]).is_err());
    }
}
