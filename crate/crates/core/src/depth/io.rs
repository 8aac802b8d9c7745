//! PGM (16-bit, millimeters) and PFM (32-bit float) readers and a PFM writer.
//!
//! PGM depth uses 0.001 m per unit unless the header carries a
//! `# depth_scale <meters per unit>` comment.

use std::fs;
use std::path::Path;

use super::DepthImage;
use crate::{Error, Result};

pub const DEFAULT_PGM_SCALE: f64 = 0.001;

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
    comments: Vec<String>,
}

impl<'a> Header<'a> {
    fn new(bytes: &'a [u8], pos: usize) -> Self {
        Self {
            bytes,
            pos,
            comments: Vec::new(),
        }
    }

    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                let start = self.pos + 1;
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
                self.comments
                    .push(String::from_utf8_lossy(&self.bytes[start..self.pos]).trim().to_string());
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self, what: &str) -> Result<(usize, &'a str)> {
        self.skip_space();
        let start = self.pos;
        while self
            .bytes
            .get(self.pos)
            .is_some_and(|b| !b.is_ascii_whitespace() && *b != b'#')
        {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format(start, format!("expected {what}")));
        }
        let s = std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| Error::format(start, format!("{what} is not ASCII")))?;
        Ok((start, s))
    }

    fn number<T: std::str::FromStr>(&mut self, what: &str) -> Result<T> {
        let (at, s) = self.token(what)?;
        s.parse()
            .map_err(|_| Error::format(at, format!("invalid {what} {s:?}")))
    }

    /// Consumes the single whitespace byte that ends the header.
    fn end(&mut self) -> Result<usize> {
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => Ok(self.pos + 1),
            _ => Err(Error::format(self.pos, "expected whitespace before raster")),
        }
    }
}

fn magic(bytes: &[u8]) -> Result<&[u8]> {
    bytes
        .get(..2)
        .ok_or_else(|| Error::format(bytes.len(), "file too short for a magic number"))
}

fn raster(bytes: &[u8], start: usize, len: usize) -> Result<&[u8]> {
    bytes.get(start..start + len).ok_or_else(|| {
        Error::format(
            bytes.len(),
            format!("raster truncated: need {len} bytes from offset {start}"),
        )
    })
}

fn positive_dims(h: &mut Header) -> Result<(usize, usize)> {
    h.skip_space();
    let at = h.pos;
    let w: usize = h.number("width")?;
    let ht: usize = h.number("height")?;
    if w == 0 || ht == 0 {
        return Err(Error::format(at, "image dimensions must be positive"));
    }
    Ok((w, ht))
}

/// Binary PGM (`P5`). Values above 255 are two bytes, big-endian.
pub fn read_pgm(bytes: &[u8]) -> Result<DepthImage> {
    if magic(bytes)? != b"P5" {
        return Err(Error::format(0, "not a binary PGM (expected P5)"));
    }
    let mut h = Header::new(bytes, 2);
    let (w, ht) = positive_dims(&mut h)?;
    h.skip_space();
    let maxval_at = h.pos;
    let maxval: u32 = h.number("maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format(maxval_at, format!("maxval {maxval} out of range")));
    }
    let start = h.end()?;
    let mut scale = DEFAULT_PGM_SCALE;
    for c in &h.comments {
        if let Some(v) = c.strip_prefix("depth_scale") {
            scale = v
                .trim()
                .parse()
                .ok()
                .filter(|s: &f64| *s > 0.0 && s.is_finite())
                .ok_or_else(|| Error::format(0, format!("bad depth_scale comment {c:?}")))?;
        }
    }
    let wide = maxval > 255;
    let bpp = if wide { 2 } else { 1 };
    let body = raster(bytes, start, w * ht * bpp)?;
    let data = if wide {
        body.chunks_exact(2)
            .map(|p| (u16::from_be_bytes([p[0], p[1]]) as f64 * scale) as f32)
            .collect()
    } else {
        body.iter().map(|&p| (p as f64 * scale) as f32).collect()
    };
    DepthImage::new(w, ht, data)
}

/// 16-bit PGM with the scale recorded in a header comment. Values are
/// rounded and saturated to the `u16` range.
pub fn write_pgm16(img: &DepthImage, scale: f64) -> Vec<u8> {
    let mut out = format!(
        "P5\n# depth_scale {scale}\n{} {}\n65535\n",
        img.width(),
        img.height()
    )
    .into_bytes();
    for &v in img.data() {
        let units = (v as f64 / scale).round().clamp(0.0, 65535.0) as u16;
        out.extend_from_slice(&units.to_be_bytes());
    }
    out
}

/// Grayscale PFM (`Pf`). A negative scale marks little-endian data; rows are
/// stored bottom to top.
pub fn read_pfm(bytes: &[u8]) -> Result<DepthImage> {
    match magic(bytes)? {
        b"Pf" => {}
        b"PF" => return Err(Error::format(0, "colour PFM is not supported")),
        _ => return Err(Error::format(0, "not a PFM (expected Pf)")),
    }
    let mut h = Header::new(bytes, 2);
    let (w, ht) = positive_dims(&mut h)?;
    h.skip_space();
    let scale_at = h.pos;
    let scale: f64 = h.number("scale")?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::format(scale_at, "PFM scale must be non-zero"));
    }
    let start = h.end()?;
    let body = raster(bytes, start, w * ht * 4)?;
    let little = scale < 0.0;
    let mut data = vec![0.0f32; w * ht];
    for (i, p) in body.chunks_exact(4).enumerate() {
        let raw = [p[0], p[1], p[2], p[3]];
        let v = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let (file_row, col) = (i / w, i % w);
        data[(ht - 1 - file_row) * w + col] = v;
    }
    DepthImage::new(w, ht, data)
}

pub fn write_pfm(img: &DepthImage) -> Vec<u8> {
    let (w, h) = (img.width(), img.height());
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(w * h * 4);
    for r in (0..h).rev() {
        for &v in &img.data()[r * w..(r + 1) * w] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Reads either format, chosen by magic number.
pub fn decode(bytes: &[u8]) -> Result<DepthImage> {
    match magic(bytes)? {
        b"P5" => read_pgm(bytes),
        b"Pf" | b"PF" => read_pfm(bytes),
        _ => Err(Error::format(0, "unrecognised image magic")),
    }
}

pub fn load(path: impl AsRef<Path>) -> Result<DepthImage> {
    decode(&fs::read(path)?)
}

pub fn save_pfm(img: &DepthImage, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_pfm(img))?;
    Ok(())
}
