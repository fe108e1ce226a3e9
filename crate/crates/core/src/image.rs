//! Float grayscale images and PGM (P5) file I/O.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major single-channel image. Working values live in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "{} values cannot form a {width}x{height} image",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, y: usize) -> &[f32] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Pixel access with replicated borders.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f32 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.data[y * self.width + x]
    }

    /// Bilinear sample with replicated borders.
    #[inline]
    pub fn sample(&self, x: f32, y: f32) -> f32 {
        let x0 = x.floor();
        let y0 = y.floor();
        let ax = x - x0;
        let ay = y - y0;
        let (xi, yi) = (x0 as isize, y0 as isize);
        let v00 = self.get_clamped(xi, yi);
        let v10 = self.get_clamped(xi + 1, yi);
        let v01 = self.get_clamped(xi, yi + 1);
        let v11 = self.get_clamped(xi + 1, yi + 1);
        (v00 * (1.0 - ax) + v10 * ax) * (1.0 - ay) + (v01 * (1.0 - ax) + v11 * ax) * ay
    }

    /// Bilinear samples on the `(2·half + 1)²` grid centered at `(cx, cy)`,
    /// row-major into `out`. Every grid point shares the same fractional
    /// offset, so interior patches skip the per-sample setup.
    pub fn sample_patch(&self, cx: f64, cy: f64, half: usize, out: &mut Vec<f32>) {
        out.clear();
        let (x0, y0) = (cx.floor(), cy.floor());
        let (ax, ay) = ((cx - x0) as f32, (cy - y0) as f32);
        let h = half as isize;
        let (xi, yi) = (x0 as isize - h, y0 as isize - h);
        let side = 2 * half + 1;
        let interior = x0.is_finite()
            && y0.is_finite()
            && xi >= 0
            && yi >= 0
            && xi + side as isize + 1 <= self.width as isize
            && yi + side as isize + 1 <= self.height as isize;
        if !interior {
            for v in -h..=h {
                for u in -h..=h {
                    out.push(self.sample((cx + u as f64) as f32, (cy + v as f64) as f32));
                }
            }
            return;
        }
        let (w00, w10, w01, w11) = ((1.0 - ax) * (1.0 - ay), ax * (1.0 - ay), (1.0 - ax) * ay, ax * ay);
        let (xi, yi) = (xi as usize, yi as usize);
        for r in 0..side {
            let top = &self.data[(yi + r) * self.width + xi..][..side + 1];
            let bot = &self.data[(yi + r + 1) * self.width + xi..][..side + 1];
            for c in 0..side {
                out.push(top[c] * w00 + top[c + 1] * w10 + bot[c] * w01 + bot[c + 1] * w11);
            }
        }
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::MIN, f32::max)
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::MAX, f32::min)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> GrayImage {
        GrayImage { width: self.width, height: self.height, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Divides by the maximum value when it is positive.
    pub fn max_normalized(&self) -> GrayImage {
        let m = self.max();
        if m > 0.0 {
            self.map(|v| v / m)
        } else {
            self.clone()
        }
    }

    pub fn clamp01(&self) -> GrayImage {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn check_same_dims(&self, other: &GrayImage) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch { a: self.dims(), b: other.dims() });
        }
        Ok(())
    }

    /// `round(v · 255)` after clamping to `[0, 1]`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::from_vec(width, height, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    pub fn read_pgm(path: impl AsRef<Path>) -> Result<Self> {
        let pgm = read_pgm(path)?;
        let scale = pgm.maxval as f32;
        Self::from_vec(pgm.width, pgm.height, pgm.data.iter().map(|&v| v as f32 / scale).collect())
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        write_pgm8(path, self.width, self.height, &self.to_u8())
    }
}

/// Raw PGM contents; samples are widened to `u16` regardless of bit depth.
#[derive(Clone, Debug, PartialEq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub data: Vec<u16>,
}

fn header_token(bytes: &[u8], pos: &mut usize) -> Option<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

pub fn parse_pgm(bytes: &[u8]) -> Result<Pgm> {
    let bad = |msg: &str| Error::parse(1, format!("PGM: {msg}"));
    let mut pos = 0;
    if header_token(bytes, &mut pos).as_deref() != Some("P5") {
        return Err(bad("missing P5 magic"));
    }
    let mut field = || -> Result<usize> {
        header_token(bytes, &mut pos)
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad("malformed header"))
    };
    let width = field()?;
    let height = field()?;
    let maxval = field()?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(bad("invalid header values"));
    }
    // single whitespace byte before the raster
    pos += 1;
    let n = width * height;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    let data = if maxval < 256 {
        if raster.len() < n {
            return Err(bad("truncated raster"));
        }
        raster[..n].iter().map(|&b| b as u16).collect()
    } else {
        if raster.len() < 2 * n {
            return Err(bad("truncated raster"));
        }
        raster[..2 * n].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    };
    Ok(Pgm { width, height, maxval: maxval as u16, data })
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Pgm> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes)
}

pub fn write_pgm8(path: impl AsRef<Path>, width: usize, height: usize, data: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = format!("P5\n{width} {height}\n255\n").into_bytes();
    buf.extend_from_slice(data);
    fs::File::create(path).and_then(|mut f| f.write_all(&buf)).map_err(|e| Error::io(path, e))
}

/// 16-bit big-endian PGM with maxval 65535.
pub fn write_pgm16(path: impl AsRef<Path>, width: usize, height: usize, data: &[u16]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for v in data {
        buf.extend_from_slice(&v.to_be_bytes());
    }
    fs::File::create(path).and_then(|mut f| f.write_all(&buf)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_sample_interpolates() {
        let img = GrayImage::from_fn(4, 4, |x, _| x as f32);
        assert_eq!(img.sample(1.25, 2.0), 1.25);
        assert_eq!(img.sample(-3.0, 0.0), 0.0);
        assert_eq!(img.sample(10.0, 10.0), 3.0);
    }

    #[test]
    fn u8_conversion_rounds() {
        let img = GrayImage::from_vec(3, 1, vec![0.0, 0.5, 1.2]).unwrap();
        assert_eq!(img.to_u8(), vec![0, 128, 255]);
    }

    #[test]
    fn pgm_roundtrip_8_and_16_bit() {
        let dir = tempfile::tempdir().unwrap();
        let img = GrayImage::from_fn(5, 3, |x, y| ((x + 5 * y) * 17 % 256) as f32 / 255.0);
        let p8 = dir.path().join("a.pgm");
        img.write_pgm(&p8).unwrap();
        assert_eq!(GrayImage::read_pgm(&p8).unwrap(), img);

        let raw: Vec<u16> = (0..15).map(|i| i * 4000).collect();
        let p16 = dir.path().join("b.pgm");
        write_pgm16(&p16, 5, 3, &raw).unwrap();
        let back = read_pgm(&p16).unwrap();
        assert_eq!(back.maxval, 65535);
        assert_eq!(back.data, raw);
    }

    #[test]
    fn pgm_rejects_garbage() {
        assert!(parse_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(parse_pgm(b"P5\n4 4\n255\n\x00\x01").is_err());
        let ok = parse_pgm(b"P5\n# comment\n2 1\n255\n\x01\x02").unwrap();
        assert_eq!(ok.data, vec![1, 2]);
    }
}
