//! Binary PGM (P5) and PPM (P6) import, PGM export.

use std::path::Path;

use super::GrayFrame;
use crate::error::{Error, Result};

const MAX_SIDE: usize = 1 << 14;
const MAX_PIXELS: usize = 1 << 24;

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn frame_err(source: &str, msg: impl std::fmt::Display) -> Error {
    Error::Frame(format!("{source}: {msg}"))
}

fn header(bytes: &[u8], source: &str) -> Result<Header> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(frame_err(source, "not a binary PGM/PPM file")),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments
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
        if start == pos || pos - start > 6 {
            return Err(frame_err(source, "malformed header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| frame_err(source, "malformed header"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(frame_err(source, "malformed header"));
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(frame_err(source, format!("unsupported maxval {maxval}")));
    }
    if width > MAX_SIDE || height > MAX_SIDE || width * height > MAX_PIXELS {
        return Err(frame_err(source, format!("frame {width}x{height} is too large")));
    }
    Ok(Header {
        channels,
        width,
        height,
        maxval,
        data_start: pos + 1,
    })
}

/// Decodes P5 directly and P6 via luminance `0.299R + 0.587G + 0.114B`.
pub fn parse_pnm(bytes: &[u8], source: &str) -> Result<GrayFrame> {
    let h = header(bytes, source)?;
    let n = h.width * h.height;
    let data = &bytes[h.data_start..];
    if data.len() < n * h.channels {
        return Err(frame_err(source, "truncated pixel data"));
    }
    let max = h.maxval as f64;
    let pixels: Vec<f64> = if h.channels == 1 {
        data[..n].iter().map(|&b| (b as f64 / max).min(1.0)).collect()
    } else {
        data[..3 * n]
            .chunks_exact(3)
            .map(|c| {
                let y = 0.299 * c[0] as f64 + 0.587 * c[1] as f64 + 0.114 * c[2] as f64;
                (y / max).clamp(0.0, 1.0)
            })
            .collect()
    };
    GrayFrame::new(h.width, h.height, pixels).map_err(|e| frame_err(source, e))
}

pub fn read_pnm(path: &Path) -> Result<GrayFrame> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pnm(&bytes, &path.display().to_string())
}

/// 8-bit P5 encoding; intensities are rounded to the nearest of 256 levels.
pub fn encode_pgm(frame: &GrayFrame) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", frame.width(), frame.height()).into_bytes();
    out.extend(frame.pixels().iter().map(|v| (v * 255.0).round() as u8));
    out
}

pub fn write_pgm(path: &Path, frame: &GrayFrame) -> Result<()> {
    std::fs::write(path, encode_pgm(frame)).map_err(|e| Error::io(path, e))
}
