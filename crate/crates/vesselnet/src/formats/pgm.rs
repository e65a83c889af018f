//! Binary greymap (P5, maxval 255) images.

use std::path::Path;

use vesselnet_core::volume::Image;

use super::{read_bytes, write_atomic};
use crate::{Error, Result};

pub fn encode(img: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.cols(), img.rows()).into_bytes();
    out.extend(img.pixels().iter().map(|&p| (p * 255.0).round() as u8));
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Image, String> {
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err("not a binary PGM".into());
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field {s:?}"));
    let (cols, rows, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(format!("maxval {max}, expected 255"));
    }
    let data = &bytes[pos + 1..];
    if data.len() != rows * cols {
        return Err(format!("{rows}x{cols} needs {} bytes, found {}", rows * cols, data.len()));
    }
    let pixels = data.iter().map(|&b| b as f32 / 255.0).collect();
    Image::from_pixels(rows, cols, pixels).map_err(|e| e.to_string())
}

pub fn read(path: &Path) -> Result<Image> {
    decode(&read_bytes(path)?).map_err(|d| Error::format(path, d))
}

pub fn write(path: &Path, img: &Image) -> Result<()> {
    write_atomic(path, &encode(img))
}
