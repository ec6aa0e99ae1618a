//! Dense image containers and the binary file formats used on disk:
//! P6 frames, P5 masks, and the `WAHD` depth video container.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Interleaved RGB image with channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::ShapeMismatch(format!(
                "image {width}x{height} needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Rounds every channel to the nearest multiple of 1/255 so the image
    /// survives an 8-bit round trip unchanged.
    pub fn quantize_u8(&mut self) {
        for v in &mut self.data {
            *v = f32::from(to_u8(*v)) / 255.0;
        }
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut bytes = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        bytes.extend(self.data.iter().map(|&v| to_u8(v)));
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (magic, width, height, offset) = parse_pnm_header(path, &bytes)?;
        if magic != "P6" {
            return Err(Error::format(path, 0, format!("expected P6, found {magic}")));
        }
        let need = width * height * 3;
        let body = &bytes[offset..];
        if body.len() != need {
            return Err(Error::format(
                path,
                offset as u64,
                format!("expected {need} pixel bytes, found {}", body.len()),
            ));
        }
        let data = body.iter().map(|&b| f32::from(b) / 255.0).collect();
        Ok(Self {
            width,
            height,
            data,
        })
    }
}

/// Binary per-pixel mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn fraction(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.count() as f64 / self.data.len() as f64
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut bytes = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        bytes.extend(self.data.iter().map(|&v| if v { 255u8 } else { 0 }));
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (magic, width, height, offset) = parse_pnm_header(path, &bytes)?;
        if magic != "P5" {
            return Err(Error::format(path, 0, format!("expected P5, found {magic}")));
        }
        let body = &bytes[offset..];
        if body.len() != width * height {
            return Err(Error::format(
                path,
                offset as u64,
                format!("expected {} mask bytes, found {}", width * height, body.len()),
            ));
        }
        let mut data = Vec::with_capacity(body.len());
        for (i, &b) in body.iter().enumerate() {
            match b {
                0 => data.push(false),
                255 => data.push(true),
                other => {
                    return Err(Error::format(
                        path,
                        (offset + i) as u64,
                        format!("mask byte must be 0 or 255, found {other}"),
                    ))
                }
            }
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }
}

/// Per-pixel camera-space depth (z along the optical axis).
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

const DEPTH_MAGIC: &[u8; 4] = b"WAHD";
const DEPTH_HEADER_LEN: usize = 16;

/// Writes a depth video: `WAHD`, then width, height, frame count as u32 LE,
/// then every frame row-major as f32 LE.
pub fn write_depth_video(path: &Path, frames: &[DepthMap]) -> Result<()> {
    let (w, h) = frames.first().map(DepthMap::dims).unwrap_or((0, 0));
    if let Some(bad) = frames.iter().find(|d| d.dims() != (w, h)) {
        return Err(Error::ResolutionMismatch {
            expected: (w, h),
            actual: bad.dims(),
        });
    }
    let mut out = Vec::with_capacity(DEPTH_HEADER_LEN + frames.len() * w * h * 4);
    out.extend_from_slice(DEPTH_MAGIC);
    for v in [w, h, frames.len()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for d in frames {
        for v in &d.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_depth_video(path: &Path) -> Result<Vec<DepthMap>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < DEPTH_HEADER_LEN {
        return Err(Error::format(
            path,
            bytes.len() as u64,
            format!(
                "truncated header: expected {DEPTH_HEADER_LEN} bytes, found {}",
                bytes.len()
            ),
        ));
    }
    if &bytes[..4] != DEPTH_MAGIC {
        return Err(Error::format(path, 0, "bad magic, expected WAHD"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (w, h, n) = (word(4), word(8), word(12));
    let expected = DEPTH_HEADER_LEN + w * h * n * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            bytes.len().min(expected) as u64,
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let mut frames = Vec::with_capacity(n);
    let mut cursor = DEPTH_HEADER_LEN;
    for _ in 0..n {
        let mut d = DepthMap::new(w, h);
        for v in &mut d.data {
            *v = f32::from_le_bytes(bytes[cursor..cursor + 4].try_into().unwrap());
            cursor += 4;
        }
        frames.push(d);
    }
    Ok(frames)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Parses a binary netpbm header. Returns (magic, width, height, body offset).
fn parse_pnm_header(path: &Path, bytes: &[u8]) -> Result<(String, usize, usize, usize)> {
    let mut pos = 0usize;
    let mut fields: Vec<String> = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, pos as u64, "truncated netpbm header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos = (pos + 1).min(bytes.len());
    let num = |i: usize| -> Result<usize> {
        fields[i]
            .parse::<usize>()
            .map_err(|_| Error::format(path, 0, format!("bad header field `{}`", fields[i])))
    };
    let (w, h, maxval) = (num(1)?, num(2)?, num(3)?);
    if maxval != 255 {
        return Err(Error::format(path, 0, format!("maxval must be 255, found {maxval}")));
    }
    Ok((fields[0].clone(), w, h, pos))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_header_is_p6_compliant() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ppm");
        let mut img = Image::filled(3, 2, [0.2, 0.4, 0.6]);
        img.quantize_u8();
        img.write_ppm(&p).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 18);
        assert_eq!(Image::read_ppm(&p).unwrap(), img);
    }

    #[test]
    fn truncated_depth_reports_byte_counts() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.wahd");
        let mut d = DepthMap::new(4, 4);
        d.data.iter_mut().for_each(|v| *v = 2.5);
        write_depth_video(&p, &[d.clone(), d]).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 7);
        fs::write(&p, &bytes).unwrap();
        let err = read_depth_video(&p).unwrap_err().to_string();
        assert!(err.contains("expected 144 bytes, found 137"), "{err}");
    }

    #[test]
    fn mask_rejects_non_binary_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        fs::write(&p, b"P5\n2 1\n255\n\x00\x07").unwrap();
        let err = Mask::read_pgm(&p).unwrap_err().to_string();
        assert!(err.contains("byte 12"), "{err}");
    }
}
