//! Event-frame enhancement: blur, CLAHE, optional sharpening, edge extraction,
//! optional erosion and a final blend with the input frame.
//!
//! All stages use replicated borders and map `[0, 1]` images to `[0, 1]`.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::GrayImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeMethod {
    Canny,
    Laplacian,
    Sobel,
    /// No edge operator: the contrast-normalized frame is blended directly.
    ClaheOnly,
}

impl FromStr for EdgeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "canny" => Ok(EdgeMethod::Canny),
            "laplacian" => Ok(EdgeMethod::Laplacian),
            "sobel" => Ok(EdgeMethod::Sobel),
            "clahe-only" | "clahe" => Ok(EdgeMethod::ClaheOnly),
            other => Err(Error::Config(format!("unknown edge method `{other}`"))),
        }
    }
}

impl fmt::Display for EdgeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EdgeMethod::Canny => "canny",
            EdgeMethod::Laplacian => "laplacian",
            EdgeMethod::Sobel => "sobel",
            EdgeMethod::ClaheOnly => "clahe-only",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnhanceConfig {
    /// Gaussian blur standard deviation (px).
    pub sigma: f64,
    /// Sharpening gain; sharpening runs only when positive.
    pub lambda: f64,
    pub method: EdgeMethod,
    pub thinning: bool,
    /// Side of the square erosion element (odd, px).
    pub erode_size: usize,
    pub alpha: f64,
    pub beta: f64,
    /// CLAHE tile grid as (rows, cols).
    pub clahe_tiles: (usize, usize),
    pub clahe_clip: f64,
    /// Canny thresholds on the max-normalized gradient magnitude.
    pub canny_low: f64,
    pub canny_high: f64,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            lambda: 0.5,
            method: EdgeMethod::Sobel,
            thinning: false,
            erode_size: 3,
            alpha: 0.7,
            beta: 0.3,
            clahe_tiles: (8, 8),
            clahe_clip: 2.0,
            canny_low: 0.1,
            canny_high: 0.3,
        }
    }
}

impl EnhanceConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.sigma > 0.0) {
            return fail(format!("enhance.sigma must be > 0, got {}", self.sigma));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return fail("enhance.alpha and enhance.beta must be >= 0".into());
        }
        if !(self.clahe_clip >= 1.0) {
            return fail(format!("enhance.clahe_clip must be >= 1, got {}", self.clahe_clip));
        }
        if self.clahe_tiles.0 == 0 || self.clahe_tiles.1 == 0 {
            return fail("enhance.clahe_tiles must be positive".into());
        }
        if self.erode_size % 2 == 0 {
            return fail(format!("enhance.erode_size must be odd, got {}", self.erode_size));
        }
        if !(0.0 <= self.canny_low && self.canny_low <= self.canny_high) {
            return fail("canny thresholds must satisfy 0 <= low <= high".into());
        }
        Ok(())
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let w: Vec<f64> = (-radius..=radius).map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|v| (v / s) as f32).collect()
}

/// Separable Gaussian blur, kernel radius `ceil(3σ)`, replicated borders.
pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> Result<GrayImage> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("blur sigma must be > 0, got {sigma}")));
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let (w, h) = img.dims();

    let mut tmp = vec![0f32; w * h];
    tmp.par_chunks_mut(w).enumerate().for_each(|(y, out)| {
        let row = img.row(y);
        for (x, o) in out.iter_mut().enumerate() {
            let mut acc = 0f32;
            for (k, &kv) in kernel.iter().enumerate() {
                let xx = (x as isize + k as isize - r).clamp(0, w as isize - 1) as usize;
                acc += kv * row[xx];
            }
            *o = acc;
        }
    });
    let mut out = vec![0f32; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, out_row)| {
        for (k, &kv) in kernel.iter().enumerate() {
            let yy = (y as isize + k as isize - r).clamp(0, h as isize - 1) as usize;
            let src = &tmp[yy * w..(yy + 1) * w];
            for (o, &s) in out_row.iter_mut().zip(src) {
                *o += kv * s;
            }
        }
    });
    GrayImage::from_vec(w, h, out)
}

#[inline]
fn to_bin(v: f32) -> usize {
    (v.clamp(0.0, 1.0) * 255.0).round() as usize
}

/// Equalization map of one tile, or `None` when the tile holds a single grey level.
fn tile_map(hist: &[f64; 256], clip: f64) -> Option<[f32; 256]> {
    let n: f64 = hist.iter().sum();
    if hist.iter().filter(|&&c| c > 0.0).count() <= 1 {
        return None;
    }
    let mut h = *hist;
    if clip.is_finite() {
        let limit = clip * n / 256.0;
        let mut excess = 0.0;
        for c in h.iter_mut() {
            if *c > limit {
                excess += *c - limit;
                *c = limit;
            }
        }
        let add = excess / 256.0;
        for c in h.iter_mut() {
            *c += add;
        }
    }
    let mut cdf = [0f64; 256];
    let mut acc = 0.0;
    for (c, &v) in cdf.iter_mut().zip(h.iter()) {
        acc += v;
        *c = acc;
    }
    let first = h.iter().position(|&c| c > 0.0).unwrap_or(0);
    let cdf_min = cdf[first];
    let denom = n - cdf_min;
    let mut map = [0f32; 256];
    for (m, &c) in map.iter_mut().zip(cdf.iter()) {
        *m = ((c - cdf_min) / denom).clamp(0.0, 1.0) as f32;
    }
    Some(map)
}

/// Contrast-limited adaptive histogram equalization.
///
/// `tiles` is (rows, cols). Tiles that do not divide the image evenly are
/// completed with replicated edge pixels. `clip` multiplies the mean bin count;
/// pass `f64::INFINITY` to disable clipping. A tile containing a single grey
/// level leaves its pixels unchanged.
pub fn clahe(img: &GrayImage, tiles: (usize, usize), clip: f64) -> Result<GrayImage> {
    let (rows, cols) = tiles;
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument("CLAHE tile counts must be positive".into()));
    }
    if !(clip >= 1.0) {
        return Err(Error::InvalidArgument(format!("CLAHE clip must be >= 1, got {clip}")));
    }
    let (w, h) = img.dims();
    let tile_w = w.div_ceil(cols);
    let tile_h = h.div_ceil(rows);

    let mut maps: Vec<Option<[f32; 256]>> = Vec::with_capacity(rows * cols);
    for tr in 0..rows {
        for tc in 0..cols {
            let mut hist = [0f64; 256];
            for y in tr * tile_h..(tr + 1) * tile_h {
                let yy = y.min(h - 1);
                let row = img.row(yy);
                for x in tc * tile_w..(tc + 1) * tile_w {
                    hist[to_bin(row[x.min(w - 1)])] += 1.0;
                }
            }
            maps.push(tile_map(&hist, clip));
        }
    }

    // tile-center interpolation coordinates
    let coord = |p: usize, tile: usize, count: usize| -> (usize, usize, f32) {
        let f = (p as f32 + 0.5) / tile as f32 - 0.5;
        if f <= 0.0 {
            return (0, 0, 0.0);
        }
        let i0 = (f.floor() as usize).min(count - 1);
        let i1 = (i0 + 1).min(count - 1);
        (i0, i1, if i1 == i0 { 0.0 } else { f - i0 as f32 })
    };
    let xs: Vec<_> = (0..w).map(|x| coord(x, tile_w, cols)).collect();
    let apply = |m: &Option<[f32; 256]>, v: f32, bin: usize| m.as_ref().map_or(v, |m| m[bin]);

    let mut out = vec![0f32; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, out_row)| {
        let (r0, r1, wy) = coord(y, tile_h, rows);
        let row = img.row(y);
        for (x, o) in out_row.iter_mut().enumerate() {
            let (c0, c1, wx) = xs[x];
            let v = row[x];
            let b = to_bin(v);
            let m00 = apply(&maps[r0 * cols + c0], v, b);
            let m01 = apply(&maps[r0 * cols + c1], v, b);
            let m10 = apply(&maps[r1 * cols + c0], v, b);
            let m11 = apply(&maps[r1 * cols + c1], v, b);
            let top = m00 + (m01 - m00) * wx;
            let bottom = m10 + (m11 - m10) * wx;
            *o = (top + (bottom - top) * wy).clamp(0.0, 1.0);
        }
    });
    GrayImage::from_vec(w, h, out)
}

/// `I_clahe + λ (I_clahe − I_blur)`, clamped to `[0, 1]`.
pub fn sharpen(i_clahe: &GrayImage, i_blur: &GrayImage, lambda: f64) -> Result<GrayImage> {
    i_clahe.check_same_dims(i_blur)?;
    let l = lambda as f32;
    let data = i_clahe
        .data()
        .iter()
        .zip(i_blur.data())
        .map(|(&c, &b)| (c + l * (c - b)).clamp(0.0, 1.0))
        .collect();
    GrayImage::from_vec(i_clahe.width(), i_clahe.height(), data)
}

/// Raw 3×3 Sobel derivatives `(Gx, Gy)` with replicated borders.
pub fn sobel_gradients(img: &GrayImage) -> (GrayImage, GrayImage) {
    let (w, h) = img.dims();
    let mut gx = GrayImage::new(w, h);
    let mut gy = GrayImage::new(w, h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let p = |dx: isize, dy: isize| img.get_clamped(x + dx, y + dy);
            let dx = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
            let dy = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
            gx.set(x as usize, y as usize, dx);
            gy.set(x as usize, y as usize, dy);
        }
    }
    (gx, gy)
}

fn sobel_magnitude(img: &GrayImage) -> GrayImage {
    let (gx, gy) = sobel_gradients(img);
    let data = gx.data().iter().zip(gy.data()).map(|(a, b)| (a * a + b * b).sqrt()).collect();
    GrayImage::from_vec(img.width(), img.height(), data).expect("same dims")
}

fn laplacian_abs(img: &GrayImage) -> GrayImage {
    let (w, h) = img.dims();
    GrayImage::from_fn(w, h, |x, y| {
        let (x, y) = (x as isize, y as isize);
        let c = img.get_clamped(x, y);
        (img.get_clamped(x - 1, y) + img.get_clamped(x + 1, y) + img.get_clamped(x, y - 1)
            + img.get_clamped(x, y + 1)
            - 4.0 * c)
            .abs()
    })
}

/// Canny: Sobel gradients, 4-direction non-maximum suppression, double
/// threshold on the normalized magnitude, 8-connected hysteresis.
pub fn canny(img: &GrayImage, low: f64, high: f64) -> GrayImage {
    let (w, h) = img.dims();
    let (gx, gy) = sobel_gradients(img);
    let mag = GrayImage::from_vec(
        w,
        h,
        gx.data().iter().zip(gy.data()).map(|(a, b)| (a * a + b * b).sqrt()).collect(),
    )
    .expect("same dims");
    let mag = normalize_response(mag);

    let mut thin = GrayImage::new(w, h);
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let m = mag.get(x, y);
            if m == 0.0 {
                continue;
            }
            let mut angle = gy.get(x, y).atan2(gx.get(x, y)).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            // (dx, dy) of the neighbour along the gradient direction
            let (dx, dy): (isize, isize) = if !(22.5..157.5).contains(&angle) {
                (1, 0)
            } else if angle < 67.5 {
                (1, 1)
            } else if angle < 112.5 {
                (0, 1)
            } else {
                (-1, 1)
            };
            let before = mag.get((x as isize - dx) as usize, (y as isize - dy) as usize);
            let after = mag.get((x as isize + dx) as usize, (y as isize + dy) as usize);
            if m > before && m >= after {
                thin.set(x, y, m);
            }
        }
    }

    let (low, high) = (low as f32, high as f32);
    let mut out = GrayImage::new(w, h);
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if thin.get(x, y) >= high {
                out.set(x, y, 1.0);
                queue.push_back((x, y));
            }
        }
    }
    while let Some((x, y)) = queue.pop_front() {
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let (nx, ny) = (nx as usize, ny as usize);
                if out.get(nx, ny) == 0.0 && thin.get(nx, ny) >= low {
                    out.set(nx, ny, 1.0);
                    queue.push_back((nx, ny));
                }
            }
        }
    }
    out
}

/// Responses below this are rounding noise and are not stretched to 1.
const EDGE_FLOOR: f32 = 1e-6;

fn normalize_response(img: GrayImage) -> GrayImage {
    if img.max() < EDGE_FLOOR {
        GrayImage::new(img.width(), img.height())
    } else {
        img.max_normalized()
    }
}

/// Edge map: binary for Canny, max-normalized magnitude for Sobel and Laplacian.
pub fn edge_detect(img: &GrayImage, method: EdgeMethod, canny_low: f64, canny_high: f64) -> GrayImage {
    match method {
        EdgeMethod::Sobel => normalize_response(sobel_magnitude(img)),
        EdgeMethod::Laplacian => normalize_response(laplacian_abs(img)),
        EdgeMethod::Canny => canny(img, canny_low, canny_high),
        EdgeMethod::ClaheOnly => img.clone(),
    }
}

/// Grayscale erosion with a `size`×`size` square element.
pub fn erode(img: &GrayImage, size: usize) -> Result<GrayImage> {
    if size == 0 || size % 2 == 0 {
        return Err(Error::InvalidArgument(format!("erosion element must be odd and >= 1, got {size}")));
    }
    if size == 1 {
        return Ok(img.clone());
    }
    let r = (size / 2) as isize;
    let (w, h) = img.dims();
    let horiz = GrayImage::from_fn(w, h, |x, y| {
        (-r..=r).map(|d| img.get_clamped(x as isize + d, y as isize)).fold(f32::MAX, f32::min)
    });
    Ok(GrayImage::from_fn(w, h, |x, y| {
        (-r..=r).map(|d| horiz.get_clamped(x as isize, y as isize + d)).fold(f32::MAX, f32::min)
    }))
}

/// Every intermediate image of one enhancement pass.
#[derive(Clone, Debug)]
pub struct EnhanceStages {
    pub blur: GrayImage,
    pub clahe: GrayImage,
    pub enhanced: GrayImage,
    pub edge: GrayImage,
    pub output: GrayImage,
}

impl EnhanceStages {
    pub fn named(&self) -> [(&'static str, &GrayImage); 5] {
        [
            ("blur", &self.blur),
            ("clahe", &self.clahe),
            ("enhanced", &self.enhanced),
            ("edge", &self.edge),
            ("output", &self.output),
        ]
    }
}

/// `α·img + β·edge`, without clamping.
pub fn blend(img: &GrayImage, edge: &GrayImage, alpha: f64, beta: f64) -> Result<GrayImage> {
    img.check_same_dims(edge)?;
    let (a, b) = (alpha as f32, beta as f32);
    let data = img.data().iter().zip(edge.data()).map(|(&i, &e)| a * i + b * e).collect();
    GrayImage::from_vec(img.width(), img.height(), data)
}

pub fn enhance_stages(img: &GrayImage, cfg: &EnhanceConfig) -> Result<EnhanceStages> {
    cfg.validate()?;
    let blur = gaussian_blur(img, cfg.sigma)?;
    let clahe_img = clahe(&blur, cfg.clahe_tiles, cfg.clahe_clip)?;
    let enhanced = if cfg.lambda > 0.0 { sharpen(&clahe_img, &blur, cfg.lambda)? } else { clahe_img.clone() };
    let mut edge = edge_detect(&enhanced, cfg.method, cfg.canny_low, cfg.canny_high);
    if cfg.thinning {
        edge = erode(&edge, cfg.erode_size)?;
    }
    let output = blend(img, &edge, cfg.alpha, cfg.beta)?.clamp01();
    Ok(EnhanceStages { blur, clahe: clahe_img, enhanced, edge, output })
}

/// Runs the full enhancement and returns the blended frame.
pub fn enhance_event_frame(img: &GrayImage, cfg: &EnhanceConfig) -> Result<GrayImage> {
    Ok(enhance_stages(img, cfg)?.output)
}
