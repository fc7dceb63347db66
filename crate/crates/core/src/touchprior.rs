//! Touch prior rendering: the alpha-blended marker the placement model sees,
//! the binary touch mask used by the touch-conditioned editor ablation, and
//! the textual query.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::TouchPoint;
use crate::image::{unit_from_u8, Image, Mask};

pub const PROMPT_PREFIX: &str = "Suggest a bounding box to ";
pub const PROMPT_SUFFIX: &str = " roughly centered at the red dot";

pub const DEFAULT_TOUCH_MASK_SIZE: u32 = 12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MarkerSpec {
    pub size_px: u32,
    pub alpha: f32,
    pub color: [u8; 3],
}

impl Default for MarkerSpec {
    fn default() -> Self {
        Self { size_px: 10, alpha: 0.4, color: [255, 0, 0] }
    }
}

impl MarkerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size_px == 0 || !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("invalid marker spec {self:?}")));
        }
        Ok(())
    }
}

/// Half-open pixel span of a `size`-wide square around `center`: ceil(size/2)
/// pixels up to and including the centre, floor(size/2) after it, clipped to
/// `[0, n)`.
fn span(center: u32, size: u32, n: u32) -> (u32, u32) {
    let before = size.div_ceil(2) - 1;
    let after = size / 2;
    (center.saturating_sub(before), (center + after + 1).min(n))
}

/// Pixel rectangle `(x0, y0, x1, y1)` (half-open) covered by a square marker.
pub fn marker_rect(width: u32, height: u32, touch: &TouchPoint, size: u32) -> Result<(u32, u32, u32, u32)> {
    let (cx, cy) = touch.pixel_index(width, height)?;
    let (x0, x1) = span(cx, size, width);
    let (y0, y1) = span(cy, size, height);
    Ok((x0, y0, x1, y1))
}

/// Composites the marker: inside the square `out = alpha * color + (1 - alpha) * in`
/// evaluated on 8-bit levels and rounded half-up; every other pixel is copied.
pub fn render_marker(image: &Image, touch: &TouchPoint, spec: &MarkerSpec) -> Result<Image> {
    spec.validate()?;
    let (x0, y0, x1, y1) = marker_rect(image.width(), image.height(), touch, spec.size_px)?;
    let alpha = spec.alpha as f64;
    let mut out = image.clone();
    for y in y0..y1 {
        for x in x0..x1 {
            let src = image.pixel_u8(x, y);
            let mut px = [0f32; 3];
            for c in 0..3 {
                let v = alpha * spec.color[c] as f64 + (1.0 - alpha) * src[c] as f64;
                px[c] = unit_from_u8((v + 0.5).floor().clamp(0.0, 255.0) as u8);
            }
            out.set_pixel(x, y, px);
        }
    }
    Ok(out)
}

pub fn render_touch_mask(width: u32, height: u32, touch: &TouchPoint, size_px: u32) -> Result<Mask> {
    if size_px == 0 {
        return Err(Error::Config("touch mask size must be positive".into()));
    }
    let (x0, y0, x1, y1) = marker_rect(width, height, touch, size_px)?;
    let mut mask = Mask::zeros(width, height);
    for y in y0..y1 {
        for x in x0..x1 {
            mask.set(x, y, 1.0);
        }
    }
    Ok(mask)
}

/// The placement query, with the instruction inserted verbatim.
pub fn build_prompt(instruction: &str) -> Result<String> {
    if instruction.trim().is_empty() {
        return Err(Error::Empty("instruction"));
    }
    Ok(format!("{PROMPT_PREFIX}{instruction}{PROMPT_SUFFIX}"))
}
