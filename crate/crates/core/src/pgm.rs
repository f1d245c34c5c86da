//! 8-bit binary PGM (`P5`) reading and writing.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{BinaryMask, GrayImage};
use crate::util::write_atomic;

pub fn encode(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Returns `(width, height, pixels)`.
pub fn decode(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<u8>), String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("unexpected end of header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err("not a binary PGM (missing P5 magic)".into());
    }
    let num = |s: String| s.parse::<usize>().map_err(|_| format!("bad header field {s:?}"));
    let width = num(token()?)?;
    let height = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    // single whitespace byte separates header and raster
    let start = pos + 1;
    let n = width * height;
    if bytes.len() < start + n {
        return Err(format!(
            "raster truncated: need {n} bytes, found {}",
            bytes.len().saturating_sub(start)
        ));
    }
    Ok((width, height, bytes[start..start + n].to_vec()))
}

fn read(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|msg| Error::Parse {
        path: path.to_path_buf(),
        row: 0,
        msg,
    })
}

pub fn write_image(path: &Path, img: &GrayImage) -> Result<()> {
    write_atomic(path, &encode(img.width(), img.height(), &img.to_bytes()))
}

pub fn read_image(path: &Path) -> Result<GrayImage> {
    let (w, h, px) = read(path)?;
    GrayImage::from_bytes(w, h, &px)
}

pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let px: Vec<u8> = mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    write_atomic(path, &encode(mask.width(), mask.height(), &px))
}

/// Any non-zero pixel counts as foreground.
pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let (w, h, px) = read(path)?;
    BinaryMask::from_bits(w, h, px.iter().map(|&v| v > 0).collect())
}
