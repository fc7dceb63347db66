//! Box and touch geometry shared by the placement model, the editor and the
//! benchmark tooling.
//!
//! Boxes are centre-format `[x_c, y_c, w, h]` in unit coordinates. Quantised
//! coordinates use [`COORD_BINS`] bins per axis.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bins per axis for coordinate tokens.
pub const COORD_BINS: usize = 100;

/// Standard deviation of the unit perturbation before clamping and scaling.
pub const PERTURB_STD: f64 = 1.0 / 3.0;

/// Sizes that stay non-positive after this many Gaussian redraws are clamped.
const SIZE_RESAMPLE_LIMIT: usize = 8;
const MIN_SAMPLED_SIZE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct NormalizedBBox {
    x_c: f64,
    y_c: f64,
    w: f64,
    h: f64,
}

impl NormalizedBBox {
    pub fn new(x_c: f64, y_c: f64, w: f64, h: f64) -> Result<Self> {
        let finite = [x_c, y_c, w, h].iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidBox(format!("non-finite value in [{x_c}, {y_c}, {w}, {h}]")));
        }
        if !(0.0..=1.0).contains(&x_c) || !(0.0..=1.0).contains(&y_c) {
            return Err(Error::InvalidBox(format!("centre ({x_c}, {y_c}) outside the unit square")));
        }
        if !(w > 0.0 && w <= 1.0 && h > 0.0 && h <= 1.0) {
            return Err(Error::InvalidBox(format!("size ({w}, {h}) outside (0, 1]")));
        }
        Ok(Self { x_c, y_c, w, h })
    }

    /// Builds a box from corner coordinates, clamping to the unit square.
    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let (x0, x1) = (x0.clamp(0.0, 1.0), x1.clamp(0.0, 1.0));
        let (y0, y1) = (y0.clamp(0.0, 1.0), y1.clamp(0.0, 1.0));
        Self::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    }

    pub fn x_c(&self) -> f64 {
        self.x_c
    }
    pub fn y_c(&self) -> f64 {
        self.y_c
    }
    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_c, self.y_c, self.w, self.h]
    }

    /// Corner form `(x0, y0, x1, y1)` clamped to the unit square.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            (self.x_c - self.w / 2.0).max(0.0),
            (self.y_c - self.h / 2.0).max(0.0),
            (self.x_c + self.w / 2.0).min(1.0),
            (self.y_c + self.h / 2.0).min(1.0),
        )
    }

    pub fn clamped_area(&self) -> f64 {
        let (x0, y0, x1, y1) = self.corners();
        (x1 - x0).max(0.0) * (y1 - y0).max(0.0)
    }

    /// Closed containment test for a normalised point.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (x0, y0, x1, y1) = self.corners();
        x >= x0 && x <= x1 && y >= y0 && y <= y1
    }

    /// Moves the centre, clamping it to `[w/2, 1 - w/2] x [h/2, 1 - h/2]` so the
    /// box never leaves the unit square.
    pub fn with_center_clamped(&self, x_c: f64, y_c: f64) -> Self {
        Self {
            x_c: x_c.clamp(self.w / 2.0, 1.0 - self.w / 2.0),
            y_c: y_c.clamp(self.h / 2.0, 1.0 - self.h / 2.0),
            w: self.w,
            h: self.h,
        }
    }

    /// Pixel rectangle `[x0, x1) x [y0, y1)` obtained by rounding the corners.
    pub fn pixel_rect(&self, width: u32, height: u32) -> (u32, u32, u32, u32) {
        let (x0, y0, x1, y1) = self.corners();
        let px = |v: f64, n: u32| ((v * n as f64).round() as u32).min(n);
        (px(x0, width), px(y0, height), px(x1, width), px(y1, height))
    }
}

impl TryFrom<[f64; 4]> for NormalizedBBox {
    type Error = Error;
    fn try_from(v: [f64; 4]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<NormalizedBBox> for [f64; 4] {
    fn from(b: NormalizedBBox) -> Self {
        b.to_array()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frame {
    Pixel,
    Normalized,
}

/// A user touch. Pixel-frame coordinates are continuous positions in
/// `[0, width) x [0, height)`; normalised ones live in the unit square.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TouchPoint {
    pub x: f64,
    pub y: f64,
    pub frame: Frame,
}

impl TouchPoint {
    pub fn normalized(x: f64, y: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
            return Err(Error::CoordOutOfRange(if (0.0..=1.0).contains(&x) { y } else { x }));
        }
        Ok(Self { x, y, frame: Frame::Normalized })
    }

    pub fn pixel(x: f64, y: f64) -> Self {
        Self { x, y, frame: Frame::Pixel }
    }

    pub fn check_bounds(&self, width: u32, height: u32) -> Result<()> {
        let ok = match self.frame {
            Frame::Normalized => (0.0..=1.0).contains(&self.x) && (0.0..=1.0).contains(&self.y),
            Frame::Pixel => self.x >= 0.0 && self.y >= 0.0 && self.x < width as f64 && self.y < height as f64,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::TouchOutOfBounds { x: self.x, y: self.y, width, height })
        }
    }

    pub fn to_normalized(&self, width: u32, height: u32) -> Result<Self> {
        self.check_bounds(width, height)?;
        Ok(match self.frame {
            Frame::Normalized => *self,
            Frame::Pixel => Self { x: self.x / width as f64, y: self.y / height as f64, frame: Frame::Normalized },
        })
    }

    /// Integer pixel holding the touch.
    pub fn pixel_index(&self, width: u32, height: u32) -> Result<(u32, u32)> {
        let n = self.to_normalized(width, height)?;
        let ix = ((n.x * width as f64).floor() as u32).min(width - 1);
        let iy = ((n.y * height as f64).floor() as u32).min(height - 1);
        Ok((ix, iy))
    }
}

/// Training-set size statistics used by the random baseline and as the
/// placement model's fallback size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeStats {
    pub mean_w: f64,
    pub std_w: f64,
    pub mean_h: f64,
    pub std_h: f64,
}

impl SizeStats {
    pub fn validate(&self) -> Result<()> {
        let means_ok = self.mean_w > 0.0 && self.mean_w <= 1.0 && self.mean_h > 0.0 && self.mean_h <= 1.0;
        if !means_ok || self.std_w < 0.0 || self.std_h < 0.0 {
            return Err(Error::Config(format!("invalid size statistics {self:?}")));
        }
        Ok(())
    }
}

/// Intersection over union of the clamped corner rectangles. Two boxes whose
/// union has zero area score 0.
pub fn iou(a: &NormalizedBBox, b: &NormalizedBBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.clamped_area() + b.clamped_area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

pub fn quantize_coord(v: f64, bins: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::CoordOutOfRange(v));
    }
    if bins == 0 {
        return Err(Error::BinOutOfRange { idx: 0, bins });
    }
    Ok(((v * bins as f64).floor() as usize).min(bins - 1))
}

/// Centre of bin `idx`.
pub fn dequantize_coord(idx: usize, bins: usize) -> Result<f64> {
    if idx >= bins {
        return Err(Error::BinOutOfRange { idx, bins });
    }
    Ok((idx as f64 + 0.5) / bins as f64)
}

/// One draw of `clamp(N(0, 1/3), -1, 1) * extent / 2`.
pub fn perturbation_offset<R: Rng + ?Sized>(extent: f64, rng: &mut R) -> f64 {
    let normal = Normal::new(0.0, PERTURB_STD).expect("constant std is positive");
    let unit: f64 = normal.sample(rng);
    unit.clamp(-1.0, 1.0) * extent / 2.0
}

/// Shifts the centroid by `(delta(w), delta(h))`, keeping the size.
pub fn perturb_centroid<R: Rng + ?Sized>(bbox: &NormalizedBBox, rng: &mut R) -> NormalizedBBox {
    let dx = perturbation_offset(bbox.w, rng);
    let dy = perturbation_offset(bbox.h, rng);
    bbox.with_center_clamped(bbox.x_c + dx, bbox.y_c + dy)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomPlacement {
    /// Uniform centre jitter of up to a quarter of the sampled size per axis.
    pub jitter: bool,
}

impl Default for RandomPlacement {
    fn default() -> Self {
        Self { jitter: true }
    }
}

impl RandomPlacement {
    pub fn sample<R: Rng + ?Sized>(
        &self,
        touch: &TouchPoint,
        stats: &SizeStats,
        rng: &mut R,
    ) -> Result<NormalizedBBox> {
        if touch.frame != Frame::Normalized {
            return Err(Error::Config("random placement expects a normalized touch".into()));
        }
        touch.check_bounds(1, 1)?;
        stats.validate()?;
        let w = sample_size(stats.mean_w, stats.std_w, rng);
        let h = sample_size(stats.mean_h, stats.std_h, rng);
        let (mut x, mut y) = (touch.x, touch.y);
        if self.jitter {
            x += Uniform::new_inclusive(-w / 4.0, w / 4.0).expect("w > 0").sample(rng);
            y += Uniform::new_inclusive(-h / 4.0, h / 4.0).expect("h > 0").sample(rng);
        }
        NormalizedBBox::new(x.clamp(0.0, 1.0), y.clamp(0.0, 1.0), w, h)
    }
}

/// Random-placement baseline with the default jitter.
pub fn random_placement<R: Rng + ?Sized>(touch: &TouchPoint, stats: &SizeStats, rng: &mut R) -> Result<NormalizedBBox> {
    RandomPlacement::default().sample(touch, stats, rng)
}

fn sample_size<R: Rng + ?Sized>(mean: f64, std: f64, rng: &mut R) -> f64 {
    if std == 0.0 {
        return mean.clamp(MIN_SAMPLED_SIZE, 1.0);
    }
    let normal = Normal::new(mean, std).expect("std validated non-negative");
    for _ in 0..=SIZE_RESAMPLE_LIMIT {
        let v: f64 = normal.sample(rng);
        if v > 0.0 {
            return v.min(1.0);
        }
    }
    MIN_SAMPLED_SIZE
}

/// Mean and sample standard deviation (n - 1 denominator, 0 for a single
/// box) of box widths and heights.
pub fn derive_size_stats<'a, I>(boxes: I) -> Result<SizeStats>
where
    I: IntoIterator<Item = &'a NormalizedBBox>,
{
    let (ws, hs): (Vec<f64>, Vec<f64>) = boxes.into_iter().map(|b| (b.w, b.h)).unzip();
    if ws.is_empty() {
        return Err(Error::Empty("size statistics need at least one box"));
    }
    let (mean_w, std_w) = mean_std(&ws);
    let (mean_h, std_h) = mean_std(&hs);
    Ok(SizeStats { mean_w, std_w, mean_h, std_h })
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    // Sorting makes the sums independent of input order.
    let mut sorted = v.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = sorted.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = sorted.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
