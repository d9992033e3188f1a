//! Binary netpbm codec: P6 (RGB) images and P5 (grayscale) masks and heatmaps.

use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    /// P5
    Gray,
    /// P6
    Rgb,
}

impl Kind {
    fn channels(self) -> usize {
        match self {
            Kind::Gray => 1,
            Kind::Rgb => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub kind: Kind,
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    /// Interleaved samples, row-major.
    pub samples: Vec<u16>,
    /// Header comment lines without the leading `#`.
    pub comments: Vec<String>,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::format("pnm", detail)
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
    comments: Vec<String>,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    let start = self.pos + 1;
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' && self.bytes[self.pos] != b'\r' {
                        self.pos += 1;
                    }
                    self.comments.push(String::from_utf8_lossy(&self.bytes[start..self.pos]).trim().to_string());
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(bad(format!("missing {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(format!("{what} out of range")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Pnm> {
    let kind = match bytes.get(..2) {
        Some(b"P5") => Kind::Gray,
        Some(b"P6") => Kind::Rgb,
        _ => return Err(bad("not a binary PGM/PPM (expected magic P5 or P6)")),
    };
    let mut hdr = Header { bytes, pos: 2, comments: Vec::new() };
    let width = hdr.number("width")?;
    let height = hdr.number("height")?;
    let maxval = hdr.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(bad(format!("degenerate extents {width}x{height}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(bad(format!("maxval {maxval} outside 1..=65535")));
    }
    match bytes.get(hdr.pos) {
        Some(b) if b.is_ascii_whitespace() => hdr.pos += 1,
        _ => return Err(bad("header must end with a single whitespace byte")),
    }
    let n = width * height * kind.channels();
    let wide = maxval > 255;
    let need = if wide { 2 * n } else { n };
    let raster = &bytes[hdr.pos..];
    if raster.len() < need {
        return Err(bad(format!("truncated raster: need {need} bytes, have {}", raster.len())));
    }
    let samples: Vec<u16> = if wide {
        raster[..need].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    } else {
        raster[..need].iter().map(|&b| b as u16).collect()
    };
    if let Some(&s) = samples.iter().find(|&&s| s as usize > maxval) {
        return Err(bad(format!("sample {s} exceeds maxval {maxval}")));
    }
    Ok(Pnm { kind, width, height, maxval: maxval as u16, samples, comments: hdr.comments })
}

pub fn encode(img: &Pnm) -> Vec<u8> {
    let magic = match img.kind {
        Kind::Gray => "P5",
        Kind::Rgb => "P6",
    };
    let mut out = format!("{magic}\n").into_bytes();
    for c in &img.comments {
        out.extend_from_slice(format!("# {c}\n").as_bytes());
    }
    out.extend_from_slice(format!("{} {}\n{}\n", img.width, img.height, img.maxval).as_bytes());
    if img.maxval > 255 {
        for s in &img.samples {
            out.extend_from_slice(&s.to_be_bytes());
        }
    } else {
        out.extend(img.samples.iter().map(|&s| s as u8));
    }
    out
}

fn read(path: &Path) -> Result<Pnm> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

fn write(path: &Path, img: &Pnm) -> Result<()> {
    std::fs::write(path, encode(img)).map_err(|e| Error::io(path, e))
}

/// Decodes an RGB image into a `[3, H, W]` tensor scaled to `[0, 1]`.
pub fn to_tensor(img: &Pnm) -> Result<Tensor> {
    if img.kind != Kind::Rgb {
        return Err(bad("expected an RGB (P6) image"));
    }
    let plane = img.width * img.height;
    let mut data = vec![0.0; 3 * plane];
    let scale = img.maxval as f64;
    for (i, px) in img.samples.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f64 / scale;
        }
    }
    Tensor::new(vec![3, img.height, img.width], data)
}

/// Encodes a `[3, H, W]` tensor with values in `[0, 1]` as 8-bit RGB.
pub fn from_tensor(t: &Tensor) -> Result<Pnm> {
    let (c, h, w) = t.chw()?;
    if c != 3 {
        return Err(Error::dim("ppm", format!("expected 3 channels, got {c}")));
    }
    let plane = h * w;
    let mut samples = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for ch in 0..3 {
            samples.push((t.data()[ch * plane + i].clamp(0.0, 1.0) * 255.0).round() as u16);
        }
    }
    Ok(Pnm { kind: Kind::Rgb, width: w, height: h, maxval: 255, samples, comments: Vec::new() })
}

/// Masks are stored as P5 with values `{0, maxval}`; anything else is rejected.
pub fn to_mask(img: &Pnm) -> Result<Mask> {
    if img.kind != Kind::Gray {
        return Err(bad("expected a grayscale (P5) mask"));
    }
    let bits = img
        .samples
        .iter()
        .map(|&s| match s {
            0 => Ok(false),
            v if v == img.maxval => Ok(true),
            v => Err(bad(format!("non-binary mask value {v} (maxval {})", img.maxval))),
        })
        .collect::<Result<_>>()?;
    Mask::new(img.height, img.width, bits)
}

pub fn from_mask(mask: &Mask) -> Pnm {
    Pnm {
        kind: Kind::Gray,
        width: mask.width(),
        height: mask.height(),
        maxval: 255,
        samples: mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect(),
        comments: Vec::new(),
    }
}

/// Scores affinely mapped onto `0..=255`; the original range is kept in a
/// `min=... max=...` header comment.
pub fn heatmap(scores: &[f64], height: usize, width: usize) -> Result<Pnm> {
    if scores.len() != height * width {
        return Err(Error::dim("heatmap", format!("{} scores for {height}x{width}", scores.len())));
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let samples = scores
        .iter()
        .map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u16 } else { 0 })
        .collect();
    Ok(Pnm {
        kind: Kind::Gray,
        width,
        height,
        maxval: 255,
        samples,
        comments: vec![format!("min={lo:e} max={hi:e}")],
    })
}

pub fn read_ppm_file(path: &Path) -> Result<Tensor> {
    to_tensor(&read(path)?).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

pub fn read_mask_file(path: &Path) -> Result<Mask> {
    to_mask(&read(path)?).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

pub fn read_file(path: &Path) -> Result<Pnm> {
    read(path)
}

pub fn write_file(path: &Path, img: &Pnm) -> Result<()> {
    write(path, img)
}
