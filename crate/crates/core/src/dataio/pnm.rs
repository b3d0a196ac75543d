//! Binary netpbm codecs: P6 for RGB images, P5 for masks and attention maps.
//!
//! Writers always emit `P6\n<w> <h>\n255\n` (or `P5`) followed by the raw
//! bytes, so output is bit-exact. Readers accept comments and arbitrary
//! whitespace in the header but only maxval 255.

use std::path::Path;

use crate::dataio::{Mask, RgbImage};
use crate::error::{Error, Result};

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 {
        return Err(Error::Truncated("netpbm magic".into()));
    }
    let magic = [bytes[0], bytes[1]];
    if magic != *b"P6" && magic != *b"P5" {
        return Err(Error::UnsupportedFormat(format!(
            "netpbm magic {:?}, only binary P5/P6 are supported",
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&c) = bytes.get(pos) {
                        pos += 1;
                        if c == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(Error::Truncated("netpbm header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::UnsupportedFormat("netpbm header field is not a number".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::UnsupportedFormat("netpbm header field overflow".into()))?;
    }
    match bytes.get(pos) {
        Some(c) if c.is_ascii_whitespace() => pos += 1,
        Some(_) => return Err(Error::UnsupportedFormat("missing whitespace after maxval".into())),
        None => return Err(Error::Truncated("netpbm header".into())),
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::UnsupportedFormat(format!("maxval {maxval}, only 255 is supported")));
    }
    Ok(Header { magic, width, height, offset: pos })
}

fn payload<'a>(bytes: &'a [u8], header: &Header, channels: usize) -> Result<&'a [u8]> {
    let need = header.width * header.height * channels;
    let body = &bytes[header.offset..];
    if body.len() < need {
        return Err(Error::Truncated(format!("pixel payload has {} of {need} bytes", body.len())));
    }
    Ok(&body[..need])
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let header = parse_header(bytes)?;
    if header.magic != *b"P6" {
        return Err(Error::UnsupportedFormat("expected P6 image".into()));
    }
    let data = payload(bytes, &header, 3)?;
    RgbImage::new(header.width, header.height, data.to_vec())
}

pub fn encode_ppm(image: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend_from_slice(image.data());
    out
}

/// Raw 8-bit gray plane of a P5 file: (width, height, bytes).
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let header = parse_header(bytes)?;
    if header.magic != *b"P5" {
        return Err(Error::UnsupportedFormat("expected P5 graymap".into()));
    }
    let data = payload(bytes, &header, 1)?;
    Ok((header.width, header.height, data.to_vec()))
}

pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Result<Vec<u8>> {
    if gray.len() != width * height {
        return Err(Error::dim(format!("{width}x{height} graymap needs {} bytes", width * height)));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    Ok(out)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

pub fn load_ppm(path: &Path) -> Result<RgbImage> {
    decode_ppm(&read(path)?)
}

pub fn save_ppm(image: &RgbImage, path: &Path) -> Result<()> {
    std::fs::write(path, encode_ppm(image))?;
    Ok(())
}

pub fn load_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    decode_pgm(&read(path)?)
}

pub fn save_pgm(width: usize, height: usize, gray: &[u8], path: &Path) -> Result<()> {
    std::fs::write(path, encode_pgm(width, height, gray)?)?;
    Ok(())
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    let (w, h, bytes) = load_pgm(path)?;
    Mask::from_bytes(w, h, &bytes)
}

pub fn save_mask(mask: &Mask, path: &Path) -> Result<()> {
    save_pgm(mask.width(), mask.height(), &mask.to_bytes(), path)
}
