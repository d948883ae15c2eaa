//! Portable float map (PFM) reader and writer.
//!
//! Only the 3-channel `PF` variant is accepted. Rows are stored bottom-up;
//! a negative scale marks little-endian payloads. Files are written
//! little-endian with scale `-1.0`.

use std::fs;
use std::path::Path;

use super::HdrImage;
use crate::error::{Error, Result};

/// Unvalidated 3-channel float raster, as stored in a PFM file. Used for
/// data that may be negative, such as optical flow.
#[derive(Debug, Clone, PartialEq)]
pub struct PfmImage {
    pub width: usize,
    pub height: usize,
    /// Top-down, row-major, interleaved RGB.
    pub data: Vec<f32>,
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("truncated PFM header".into()));
    }
    std::str::from_utf8(&bytes[start..*pos]).map_err(|_| Error::Format("non-ASCII PFM header".into()))
}

pub fn decode_pfm(bytes: &[u8]) -> Result<PfmImage> {
    let mut pos = 0;
    match next_token(bytes, &mut pos)? {
        "PF" => {}
        "Pf" => return Err(Error::Format("grayscale PFM (`Pf`) is not supported".into())),
        other => return Err(Error::Format(format!("bad PFM magic {other:?}"))),
    }
    let parse_dim = |s: &str| {
        s.parse::<usize>()
            .ok()
            .filter(|d| *d > 0)
            .ok_or_else(|| Error::Format(format!("bad PFM dimension {s:?}")))
    };
    let width = parse_dim(next_token(bytes, &mut pos)?)?;
    let height = parse_dim(next_token(bytes, &mut pos)?)?;
    let scale_tok = next_token(bytes, &mut pos)?;
    let scale: f32 = scale_tok
        .parse()
        .ok()
        .filter(|s: &f32| s.is_finite() && *s != 0.0)
        .ok_or_else(|| Error::Format(format!("bad PFM scale {scale_tok:?}")))?;
    // exactly one whitespace byte separates the header from the payload
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Format("missing PFM header terminator".into()));
    }
    pos += 1;

    let count = width * height * 3;
    let payload = &bytes[pos..];
    if payload.len() != count * 4 {
        return Err(Error::Format(format!(
            "PFM payload has {} bytes, expected {}",
            payload.len(),
            count * 4
        )));
    }
    let little = scale < 0.0;
    let mut data = vec![0.0f32; count];
    let row = width * 3;
    for (file_row, chunk) in payload.chunks_exact(row * 4).enumerate() {
        let y = height - 1 - file_row;
        for (i, b) in chunk.chunks_exact(4).enumerate() {
            let raw = [b[0], b[1], b[2], b[3]];
            data[y * row + i] = if little {
                f32::from_le_bytes(raw)
            } else {
                f32::from_be_bytes(raw)
            };
        }
    }
    Ok(PfmImage {
        width,
        height,
        data,
    })
}

pub fn encode_pfm(img: &PfmImage) -> Vec<u8> {
    let header = format!("PF\n{} {}\n-1.0\n", img.width, img.height);
    let mut out = Vec::with_capacity(header.len() + img.data.len() * 4);
    out.extend_from_slice(header.as_bytes());
    let row = img.width * 3;
    for y in (0..img.height).rev() {
        for v in &img.data[y * row..(y + 1) * row] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_pfm_raw(path: impl AsRef<Path>) -> Result<PfmImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pfm(&bytes)
}

pub fn write_pfm_raw(img: &PfmImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pfm(img)).map_err(|e| Error::io(path, e))
}

/// Reads a PFM file as a validated HDR image.
pub fn read_pfm(path: impl AsRef<Path>) -> Result<HdrImage> {
    let raw = read_pfm_raw(path)?;
    HdrImage::new(raw.width, raw.height, raw.data)
}

pub fn write_pfm(img: &HdrImage, path: impl AsRef<Path>) -> Result<()> {
    write_pfm_raw(
        &PfmImage {
            width: img.width(),
            height: img.height(),
            data: img.data().to_vec(),
        },
        path,
    )
}
