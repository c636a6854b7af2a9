//! Binary PPM (P6) and PGM (P5) image I/O, maxval 255 only. Parse errors
//! carry the byte offset where the problem was found.

use crate::wavelet::ImagePlane;
use crate::{Error, Result};
use std::path::Path;

/// 8-bit image, row-major with interleaved channels (1 = gray, 3 = RGB).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<RawImage> {
        if channels != 1 && channels != 3 {
            return Err(Error::Shape(format!("images must have 1 or 3 channels, got {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "pixel buffer holds {} bytes, expected {}",
                data.len(),
                width * height * channels
            )));
        }
        Ok(RawImage { width, height, channels, data })
    }

    /// Lift to continuous coefficients (requires a square power-of-two image).
    pub fn to_plane(&self) -> Result<ImagePlane> {
        if self.width != self.height {
            return Err(Error::Shape(format!(
                "image must be square, got {}x{}",
                self.width, self.height
            )));
        }
        ImagePlane::new(
            self.width,
            self.channels,
            self.data.iter().map(|&b| b as f64).collect(),
        )
    }

    /// Quantize a plane to bytes: round to nearest, clamp to [0, 255].
    pub fn from_plane(plane: &ImagePlane) -> RawImage {
        let data = plane
            .tensor()
            .data()
            .iter()
            .map(|&v| v.round().clamp(0.0, 255.0) as u8)
            .collect();
        RawImage {
            width: plane.size(),
            height: plane.size(),
            channels: plane.channels(),
            data,
        }
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn fail<T>(&self, offset: usize, msg: impl Into<String>) -> Result<T> {
        Err(Error::Format { offset, msg: msg.into() })
    }

    fn skip_space(&mut self) {
        while let Some(&b) = self.buf.get(self.pos) {
            match b {
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                b'#' => {
                    while let Some(&c) = self.buf.get(self.pos) {
                        self.pos += 1;
                        if c == b'\n' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
    }

    fn read_uint(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        let mut value: usize = 0;
        let mut digits = 0;
        while let Some(&b) = self.buf.get(self.pos) {
            if b.is_ascii_digit() {
                if value > (usize::MAX - 9) / 10 {
                    return self.fail(start, format!("{what} is out of range"));
                }
                value = value * 10 + (b - b'0') as usize;
                digits += 1;
                self.pos += 1;
            } else {
                break;
            }
        }
        if digits == 0 {
            return self.fail(self.pos, format!("expected {what}"));
        }
        Ok(value)
    }
}

/// Parse a binary PPM/PGM buffer.
pub fn parse_pnm(buf: &[u8]) -> Result<RawImage> {
    let mut cur = Cursor { buf, pos: 0 };
    if buf.first() != Some(&b'P') {
        return cur.fail(0, "not a PNM file (expected 'P' magic)");
    }
    let channels = match buf.get(1) {
        Some(b'6') => 3,
        Some(b'5') => 1,
        Some(b'1') | Some(b'2') | Some(b'3') => {
            return cur.fail(1, "unsupported variant: ASCII PNM (P1/P2/P3); use binary P5/P6")
        }
        Some(other) => return cur.fail(1, format!("unknown PNM magic 'P{}'", *other as char)),
        None => return cur.fail(1, "file ends inside the magic number"),
    };
    cur.pos = 2;
    let width = cur.read_uint("width")?;
    if width == 0 {
        return cur.fail(cur.pos, "width must be positive");
    }
    let height = cur.read_uint("height")?;
    if height == 0 {
        return cur.fail(cur.pos, "height must be positive");
    }
    cur.skip_space();
    let maxval_at = cur.pos;
    let maxval = cur.read_uint("maxval")?;
    if maxval != 255 {
        return cur.fail(maxval_at, format!("maxval {maxval} unsupported, must be 255"));
    }
    match buf.get(cur.pos) {
        Some(b' ') | Some(b'\t') | Some(b'\r') | Some(b'\n') => cur.pos += 1,
        _ => return cur.fail(cur.pos, "expected a single whitespace byte after maxval"),
    }
    let need = width * height * channels;
    let have = buf.len() - cur.pos;
    if have < need {
        return cur.fail(buf.len(), format!("truncated pixel data: need {need} bytes, found {have}"));
    }
    if have > need {
        return cur.fail(cur.pos + need, format!("{} trailing bytes after pixel data", have - need));
    }
    RawImage::new(width, height, channels, buf[cur.pos..].to_vec())
}

/// Encode as binary PGM (1 channel) or PPM (3 channels).
pub fn encode_pnm(img: &RawImage) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn read_pnm(path: impl AsRef<Path>) -> Result<RawImage> {
    let buf = std::fs::read(path.as_ref())?;
    parse_pnm(&buf)
}

pub fn write_pnm(path: impl AsRef<Path>, img: &RawImage) -> Result<()> {
    std::fs::write(path.as_ref(), encode_pnm(img))?;
    Ok(())
}
