//! Procedural training data: scenes of coloured shapes over textured
//! backgrounds. Each sample removes one shape from a scene and keeps the
//! pair (object-free source, original target) with the object's box, mask,
//! instruction, placement reasoning and a simulated touch.
//!
//! Stages per sample: generate a scene, filter candidate objects (size,
//! boundary distance, salience), remove the chosen object through an
//! inpainting backend, caption it and sample a touch. Samples that violate
//! the [`EditSample`] invariants are regenerated.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{perturbation_offset, NormalizedBBox, TouchPoint};
use crate::image::{unit_from_u8, Image, Mask};
use crate::rng::{child_seed, seeded};

pub const MANIFEST_SCHEMA: &str = "touchedit.manifest/1";
pub const MAX_RETRIES: usize = 32;
/// Pixels by which boxes are grown when checking locality invariants.
pub const LOCALITY_DILATION_PX: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Diamond,
    Bar,
    Pillar,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 6] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Diamond,
        ShapeKind::Bar,
        ShapeKind::Pillar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Diamond => "diamond",
            ShapeKind::Bar => "bar",
            ShapeKind::Pillar => "pillar",
        }
    }

    /// Samples a normalised `(w, h)`; every kind has its own scale so the
    /// instruction carries size information.
    fn sample_size<R: Rng + ?Sized>(self, rng: &mut R) -> (f64, f64) {
        match self {
            ShapeKind::Circle => {
                let s = rng.random_range(0.14..0.20);
                (s, s)
            }
            ShapeKind::Square => {
                let s = rng.random_range(0.22..0.30);
                (s, s)
            }
            ShapeKind::Triangle => {
                let w = rng.random_range(0.18..0.24);
                (w, w * 0.9)
            }
            ShapeKind::Diamond => {
                let w = rng.random_range(0.16..0.22);
                (w, w * 1.3)
            }
            ShapeKind::Bar => (rng.random_range(0.34..0.44), rng.random_range(0.09..0.13)),
            ShapeKind::Pillar => (rng.random_range(0.09..0.13), rng.random_range(0.34..0.44)),
        }
    }

    /// Membership test in box-local coordinates `u, v` in `[-1, 1]`.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            ShapeKind::Circle => u * u + v * v <= 1.0,
            ShapeKind::Square | ShapeKind::Bar | ShapeKind::Pillar => u.abs() <= 1.0 && v.abs() <= 1.0,
            // apex at the top
            ShapeKind::Triangle => (-1.0..=1.0).contains(&v) && u.abs() <= (v + 1.0) / 2.0,
            ShapeKind::Diamond => u.abs() + v.abs() <= 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorName {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Orange,
}

impl ColorName {
    pub const ALL: [ColorName; 6] =
        [ColorName::Red, ColorName::Green, ColorName::Blue, ColorName::Yellow, ColorName::Purple, ColorName::Orange];

    pub fn name(self) -> &'static str {
        match self {
            ColorName::Red => "red",
            ColorName::Green => "green",
            ColorName::Blue => "blue",
            ColorName::Yellow => "yellow",
            ColorName::Purple => "purple",
            ColorName::Orange => "orange",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            ColorName::Red => [215, 40, 40],
            ColorName::Green => [40, 165, 60],
            ColorName::Blue => [40, 80, 215],
            ColorName::Yellow => [235, 205, 40],
            ColorName::Purple => [145, 55, 175],
            ColorName::Orange => [240, 130, 30],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Appearance {
    pub shape: ShapeKind,
    pub color: ColorName,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    /// Draw order within the scene.
    pub id: usize,
    pub category: String,
    pub bbox: NormalizedBBox,
    pub appearance: Appearance,
    /// Stand-in for an image-text similarity score: colour contrast against
    /// the local background times the unoccluded fraction.
    pub salience_score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub top: [u8; 3],
    pub bottom: [u8; 3],
    pub stripe_period: f64,
    pub stripe_amplitude: f64,
}

impl Background {
    fn color_at(&self, x: u32, y: u32, height: u32) -> [u8; 3] {
        let t = (y as f64 + 0.5) / height as f64;
        let stripe = self.stripe_amplitude
            * (2.0 * std::f64::consts::PI * (x as f64 + 0.5) / self.stripe_period + t * 3.0).sin();
        let mut out = [0u8; 3];
        for c in 0..3 {
            let v = self.top[c] as f64 * (1.0 - t) + self.bottom[c] as f64 * t + stripe;
            out[c] = v.round().clamp(0.0, 255.0) as u8;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub resolution: u32,
    pub min_objects: usize,
    pub max_objects: usize,
    pub palette: Vec<ColorName>,
    pub shapes: Vec<ShapeKind>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            min_objects: 1,
            max_objects: 4,
            palette: ColorName::ALL.to_vec(),
            shapes: ShapeKind::ALL.to_vec(),
        }
    }
}

impl SceneConfig {
    fn validate(&self) -> Result<()> {
        if self.resolution < crate::image::MIN_SIDE {
            return Err(Error::InvalidImage(format!(
                "scene resolution {0}x{0} is below the 16x16 minimum",
                self.resolution
            )));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::Config(format!(
                "object count range ({}, {}) is invalid",
                self.min_objects, self.max_objects
            )));
        }
        if self.palette.is_empty() || self.shapes.is_empty() {
            return Err(Error::Config("palette and shape list must be non-empty".into()));
        }
        Ok(())
    }
}

/// A scene definition plus its rendering. Rendering is a pure function of
/// the definition, which is what makes exact object removal possible.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub width: u32,
    pub height: u32,
    pub background: Background,
    pub objects: Vec<SceneObject>,
    pub image: Image,
}

impl Scene {
    fn render_filtered(&self, skip: Option<usize>) -> Image {
        let (w, h) = (self.width, self.height);
        let mut data = Vec::with_capacity((w * h * 3) as usize);
        for y in 0..h {
            for x in 0..w {
                let mut px = self.background.color_at(x, y, h);
                if let Some(obj) = self.top_object_at(x, y, skip) {
                    px = obj.appearance.color.rgb();
                }
                data.extend(px.map(unit_from_u8));
            }
        }
        Image::new(w, h, data).expect("scene dimensions validated")
    }

    fn top_object_at(&self, x: u32, y: u32, skip: Option<usize>) -> Option<&SceneObject> {
        let (px, py) = ((x as f64 + 0.5) / self.width as f64, (y as f64 + 0.5) / self.height as f64);
        self.objects.iter().rev().filter(|o| Some(o.id) != skip).find(|o| covers(o, px, py))
    }

    pub fn render_without(&self, id: usize) -> Image {
        self.render_filtered(Some(id))
    }

    /// Pixels where object `id` is the top-most layer.
    pub fn visible_mask(&self, id: usize) -> Mask {
        let mut mask = Mask::zeros(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.top_object_at(x, y, None).is_some_and(|o| o.id == id) {
                    mask.set(x, y, 1.0);
                }
            }
        }
        mask
    }

    fn shape_pixel_count(&self, obj: &SceneObject) -> usize {
        let mut n = 0;
        for y in 0..self.height {
            for x in 0..self.width {
                let (px, py) = ((x as f64 + 0.5) / self.width as f64, (y as f64 + 0.5) / self.height as f64);
                if covers(obj, px, py) {
                    n += 1;
                }
            }
        }
        n
    }
}

fn covers(obj: &SceneObject, px: f64, py: f64) -> bool {
    let b = &obj.bbox;
    let u = (px - b.x_c()) / (b.w() / 2.0);
    let v = (py - b.y_c()) / (b.h() / 2.0);
    obj.appearance.shape.contains(u, v)
}

pub fn generate_scene<R: Rng + ?Sized>(rng: &mut R, config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let res = config.resolution;
    let mut base = [0u8; 3];
    for c in base.iter_mut() {
        *c = rng.random_range(95..=165);
    }
    let shift = |rng: &mut R, v: u8| (v as i32 + rng.random_range(-30..=30)).clamp(60, 200) as u8;
    let bottom = [shift(rng, base[0]), shift(rng, base[1]), shift(rng, base[2])];
    let background = Background {
        top: base,
        bottom,
        stripe_period: rng.random_range(6.0..18.0),
        stripe_amplitude: rng.random_range(0.0..6.0),
    };

    let count = rng.random_range(config.min_objects..=config.max_objects);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    for _ in 0..count {
        let shape = *config.shapes.choose(rng).expect("validated non-empty");
        let color = *config.palette.choose(rng).expect("validated non-empty");
        let (w, h) = shape.sample_size(rng);
        let mut placed = None;
        for _ in 0..20 {
            let x_c = rng.random_range(w / 2.0..=1.0 - w / 2.0);
            let y_c = rng.random_range(h / 2.0..=1.0 - h / 2.0);
            let bbox = NormalizedBBox::new(x_c, y_c, w, h)?;
            if objects.iter().all(|o| crate::geometry::iou(&o.bbox, &bbox) <= 0.05) {
                placed = Some(bbox);
                break;
            }
        }
        let Some(bbox) = placed else { continue };
        objects.push(SceneObject {
            id: objects.len(),
            category: shape.name().to_string(),
            bbox,
            appearance: Appearance { shape, color },
            salience_score: 0.0,
        });
    }
    // The first object always fits on an empty canvas, so `objects` is non-empty.

    let mut scene = Scene { width: res, height: res, background, objects, image: Image::filled(res, res, [0, 0, 0])? };
    scene.image = scene.render_filtered(None);
    let scores: Vec<f64> = scene.objects.iter().map(|o| salience(&scene, o)).collect();
    for (o, s) in scene.objects.iter_mut().zip(scores) {
        o.salience_score = s;
    }
    Ok(scene)
}

fn salience(scene: &Scene, obj: &SceneObject) -> f64 {
    let total = scene.shape_pixel_count(obj);
    if total == 0 {
        return 0.0;
    }
    let visible = scene.visible_mask(obj.id).sum() / total as f64;
    let (x0, y0, x1, y1) = obj.bbox.pixel_rect(scene.width, scene.height);
    let color = obj.appearance.color.rgb();
    let mut diff = 0.0;
    let mut n = 0usize;
    for y in y0..y1.max(y0 + 1).min(scene.height) {
        for x in x0..x1.max(x0 + 1).min(scene.width) {
            let bg = scene.background.color_at(x, y, scene.height);
            diff += (0..3).map(|c| (bg[c] as f64 - color[c] as f64).abs()).sum::<f64>() / (3.0 * 255.0);
            n += 1;
        }
    }
    let contrast = (2.5 * diff / n.max(1) as f64).min(1.0);
    (contrast * visible).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub min_area: f64,
    pub boundary_margin: f64,
    pub score_thresh: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { min_area: 0.002, boundary_margin: 0.01, score_thresh: 0.3 }
    }
}

/// Keeps objects that are large enough, clear of the image border and
/// salient enough. Order is preserved.
pub fn filter_objects(objects: &[SceneObject], config: &FilterConfig) -> Vec<SceneObject> {
    let m = config.boundary_margin;
    objects
        .iter()
        .filter(|o| {
            let b = &o.bbox;
            let inside = b.x_c() - b.w() / 2.0 >= m
                && b.x_c() + b.w() / 2.0 <= 1.0 - m
                && b.y_c() - b.h() / 2.0 >= m
                && b.y_c() + b.h() / 2.0 <= 1.0 - m;
            b.w() * b.h() >= config.min_area && inside && o.salience_score >= config.score_thresh
        })
        .cloned()
        .collect()
}

/// Object-removal backend. The default regenerates the scene without the
/// object; external inpainting models plug in through this trait.
pub trait InpaintBackend: Send + Sync {
    fn inpaint(&self, scene: &Scene, object: &SceneObject) -> Result<Image>;
}

pub const RESYNTH_BACKEND: &str = "resynth";

#[derive(Debug, Default, Clone, Copy)]
pub struct ResynthBackend;

impl InpaintBackend for ResynthBackend {
    fn inpaint(&self, scene: &Scene, object: &SceneObject) -> Result<Image> {
        Ok(scene.render_without(object.id))
    }
}

pub struct BackendRegistry {
    backends: HashMap<String, Box<dyn InpaintBackend>>,
}

impl Default for BackendRegistry {
    fn default() -> Self {
        let mut reg = Self { backends: HashMap::new() };
        reg.register(RESYNTH_BACKEND, Box::new(ResynthBackend));
        reg
    }
}

impl BackendRegistry {
    pub fn register(&mut self, id: &str, backend: Box<dyn InpaintBackend>) {
        self.backends.insert(id.to_string(), backend);
    }

    pub fn remove_object(&self, scene: &Scene, object: &SceneObject, backend: &str) -> Result<Image> {
        let b = self.backends.get(backend).ok_or_else(|| Error::UnknownBackend(backend.to_string()))?;
        if !scene.objects.iter().any(|o| o.id == object.id && o.bbox == object.bbox) {
            return Err(Error::Config(format!("object {} is not part of the scene", object.id)));
        }
        b.inpaint(scene, object)
    }
}

/// Removes `object` with the built-in backends.
pub fn remove_object(scene: &Scene, object: &SceneObject, backend: &str) -> Result<Image> {
    BackendRegistry::default().remove_object(scene, object, backend)
}

pub fn horizontal_third(x: f64) -> &'static str {
    if x < 1.0 / 3.0 {
        "left"
    } else if x < 2.0 / 3.0 {
        "center"
    } else {
        "right"
    }
}

pub fn vertical_third(y: f64) -> &'static str {
    if y < 1.0 / 3.0 {
        "top"
    } else if y < 2.0 / 3.0 {
        "middle"
    } else {
        "bottom"
    }
}

pub fn instruction_for(appearance: &Appearance) -> String {
    format!("add a {} {}", appearance.color.name(), appearance.shape.name())
}

/// Template captioning: the instruction names colour and shape; the
/// reasoning relates the object to its nearest neighbour and always ends
/// with its image thirds (`<vertical> <horizontal>`).
pub fn caption_object<R: Rng + ?Sized>(object: &SceneObject, context: &[SceneObject], rng: &mut R) -> (String, String) {
    let instruction = instruction_for(&object.appearance);
    let b = &object.bbox;
    let place = format!("{} {}", vertical_third(b.y_c()), horizontal_third(b.x_c()));
    let nearest = context.iter().filter(|o| o.id != object.id).min_by(|p, q| {
        let d = |o: &SceneObject| (o.bbox.x_c() - b.x_c()).powi(2) + (o.bbox.y_c() - b.y_c()).powi(2);
        d(p).total_cmp(&d(q))
    });
    let variant = rng.random_range(0..2);
    let reasoning = match nearest {
        Some(other) => {
            let (dx, dy) = (b.x_c() - other.bbox.x_c(), b.y_c() - other.bbox.y_c());
            let rel = if dx.abs() >= dy.abs() {
                if dx < 0.0 {
                    "left of"
                } else {
                    "right of"
                }
            } else if dy < 0.0 {
                "above"
            } else {
                "below"
            };
            let other_name = format!("{} {}", other.appearance.color.name(), other.appearance.shape.name());
            if variant == 0 {
                format!("place it {rel} the {other_name} near the {place}")
            } else {
                format!("it fits {rel} the {other_name} in the {place}")
            }
        }
        None if variant == 0 => format!("place it in open space near the {place}"),
        None => format!("it fits in the empty {place}"),
    };
    (instruction, reasoning)
}

/// Every word the instruction and reasoning templates can produce.
pub fn grammar_words() -> Vec<&'static str> {
    let mut words = vec![
        "add", "a", "place", "it", "fits", "the", "near", "in", "of", "open", "space", "empty", "left", "right",
        "above", "below", "center", "top", "middle", "bottom",
    ];
    words.extend(ColorName::ALL.iter().map(|c| c.name()));
    words.extend(ShapeKind::ALL.iter().map(|s| s.name()));
    words.sort_unstable();
    words.dedup();
    words
}

/// Simulated touch: the box centroid moved by the centroid-perturbation law
/// and clamped into the box.
pub fn sample_touch<R: Rng + ?Sized>(gt_bbox: &NormalizedBBox, rng: &mut R) -> TouchPoint {
    let (x0, y0, x1, y1) = gt_bbox.corners();
    let x = (gt_bbox.x_c() + perturbation_offset(gt_bbox.w(), rng)).clamp(x0, x1);
    let y = (gt_bbox.y_c() + perturbation_offset(gt_bbox.h(), rng)).clamp(y0, y1);
    TouchPoint::normalized(x, y).expect("clamped into a box inside the unit square")
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditSample {
    pub id: String,
    pub source_image: Image,
    pub target_image: Image,
    pub instruction: String,
    pub reasoning: String,
    pub gt_bbox: NormalizedBBox,
    pub gt_mask: Mask,
    pub touch: TouchPoint,
}

/// Pixel rectangle `[x0, x1) x [y0, y1)` of the box grown by `dilate` pixels.
pub fn dilated_rect(b: &NormalizedBBox, width: u32, height: u32, dilate: u32) -> (u32, u32, u32, u32) {
    let (x0, y0, x1, y1) = b.corners();
    let lo = |v: f64, n: u32| ((v * n as f64).floor() as i64 - dilate as i64).clamp(0, n as i64) as u32;
    let hi = |v: f64, n: u32| ((v * n as f64).ceil() as i64 + dilate as i64).clamp(0, n as i64) as u32;
    (lo(x0, width), lo(y0, height), hi(x1, width), hi(y1, height))
}

impl EditSample {
    /// Locality, mask containment and touch containment.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let (w, h) = (self.source_image.width(), self.source_image.height());
        if (self.target_image.width(), self.target_image.height()) != (w, h)
            || (self.gt_mask.width(), self.gt_mask.height()) != (w, h)
        {
            return Err("source, target and mask sizes differ".into());
        }
        let (x0, y0, x1, y1) = dilated_rect(&self.gt_bbox, w, h, LOCALITY_DILATION_PX);
        for y in 0..h {
            for x in 0..w {
                if x >= x0 && x < x1 && y >= y0 && y < y1 {
                    continue;
                }
                if self.gt_mask.get(x, y) != 0.0 {
                    return Err(format!("mask set outside the box at ({x}, {y})"));
                }
                if self.source_image.pixel(x, y) != self.target_image.pixel(x, y) {
                    return Err(format!("source and target differ outside the box at ({x}, {y})"));
                }
            }
        }
        if self.gt_mask.sum() == 0.0 {
            return Err("empty instance mask".into());
        }
        let t = self.touch.to_normalized(w, h).map_err(|e| e.to_string())?;
        if !self.gt_bbox.contains(t.x, t.y) {
            return Err(format!("touch ({}, {}) outside the box", t.x, t.y));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub scene: SceneConfig,
    pub filter: FilterConfig,
    pub backend: String,
    pub split_ratio: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            filter: FilterConfig::default(),
            backend: RESYNTH_BACKEND.to_string(),
            split_ratio: 0.9,
        }
    }
}

/// Runs all stages for one sample index, retrying with derived seeds.
pub fn generate_sample(
    config: &DatasetConfig,
    registry: &BackendRegistry,
    seed: u64,
    index: usize,
    id: String,
) -> Result<EditSample> {
    let sample_seed = child_seed(seed, index as u64);
    for attempt in 0..MAX_RETRIES {
        let mut rng = seeded(child_seed(sample_seed, attempt as u64));
        let scene = generate_scene(&mut rng, &config.scene)?;
        let kept = filter_objects(&scene.objects, &config.filter);
        let Some(object) = kept.choose(&mut rng).cloned() else { continue };
        let source = registry.remove_object(&scene, &object, &config.backend)?;
        let others: Vec<SceneObject> = scene.objects.iter().filter(|o| o.id != object.id).cloned().collect();
        let (instruction, reasoning) = caption_object(&object, &others, &mut rng);
        let touch = sample_touch(&object.bbox, &mut rng);
        let sample = EditSample {
            id: id.clone(),
            source_image: source,
            target_image: scene.image.clone(),
            instruction,
            reasoning,
            gt_bbox: object.bbox,
            gt_mask: scene.visible_mask(object.id),
            touch,
        };
        if sample.check_invariants().is_ok() {
            return Ok(sample);
        }
    }
    Err(Error::GenerationExhausted { index, retries: MAX_RETRIES })
}

/// Generates `n` samples in parallel; each index has its own child seed.
pub fn generate_samples(config: &DatasetConfig, n: usize, seed: u64, id_prefix: &str) -> Result<Vec<EditSample>> {
    let registry = BackendRegistry::default();
    (0..n).into_par_iter().map(|i| generate_sample(config, &registry, seed, i, format!("{id_prefix}{i:06}"))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Bench,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub split: Split,
    pub source_image: String,
    pub target_image: String,
    pub mask: String,
    pub instruction: String,
    pub reasoning: String,
    pub gt_bbox: NormalizedBBox,
    pub touch: TouchPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: String,
    pub seed: u64,
    pub split_ratio: f64,
    pub counts: BTreeMap<Split, usize>,
    pub config: DatasetConfig,
    pub records: Vec<ManifestRecord>,
}

/// Number of training samples for a split ratio, `floor(n * ratio)`.
pub fn train_count(n: usize, ratio: f64) -> usize {
    ((n as f64 * ratio + 1e-9).floor() as usize).min(n)
}

fn write_sample(dir: &Path, sample: &EditSample, split: Split) -> Result<ManifestRecord> {
    let src = format!("images/{}_src.png", sample.id);
    let tgt = format!("images/{}_tgt.png", sample.id);
    let mask = format!("masks/{}.png", sample.id);
    sample.source_image.save_png(&dir.join(&src))?;
    sample.target_image.save_png(&dir.join(&tgt))?;
    sample.gt_mask.save_png(&dir.join(&mask))?;
    Ok(ManifestRecord {
        id: sample.id.clone(),
        split,
        source_image: src,
        target_image: tgt,
        mask,
        instruction: sample.instruction.clone(),
        reasoning: sample.reasoning.clone(),
        gt_bbox: sample.gt_bbox,
        touch: sample.touch,
    })
}

/// Generates `n` samples, splits them train/val by index and writes
/// `manifest.json`, `images/` and `masks/` under `out_dir`.
pub fn build_dataset(config: &DatasetConfig, n: usize, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    if n < 10 {
        return Err(Error::Config(format!("dataset needs at least 10 samples, got {n}")));
    }
    if !(config.split_ratio > 0.0 && config.split_ratio < 1.0) {
        return Err(Error::Config(format!("split ratio {} outside (0, 1)", config.split_ratio)));
    }
    let samples = generate_samples(config, n, seed, "")?;
    let n_train = train_count(n, config.split_ratio);
    let splits = (0..n).map(|i| if i < n_train { Split::Train } else { Split::Val });
    write_dataset(out_dir, config, seed, samples.iter().zip(splits))
}

/// Writes a held-out set with every record tagged [`Split::Bench`].
pub fn build_bench_set(config: &DatasetConfig, n: usize, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    let samples = generate_samples(config, n, seed, "b")?;
    write_dataset(out_dir, config, seed, samples.iter().map(|s| (s, Split::Bench)))
}

fn write_dataset<'a>(
    out_dir: &Path,
    config: &DatasetConfig,
    seed: u64,
    samples: impl Iterator<Item = (&'a EditSample, Split)>,
) -> Result<DatasetManifest> {
    fs::create_dir_all(out_dir.join("images"))?;
    fs::create_dir_all(out_dir.join("masks"))?;
    let mut records = Vec::new();
    let mut counts = BTreeMap::new();
    for (sample, split) in samples {
        records.push(write_sample(out_dir, sample, split)?);
        *counts.entry(split).or_insert(0) += 1;
    }
    let manifest = DatasetManifest {
        schema_version: MANIFEST_SCHEMA.to_string(),
        seed,
        split_ratio: config.split_ratio,
        counts,
        config: config.clone(),
        records,
    };
    fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// A manifest and its decoded samples.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub samples: Vec<(Split, EditSample)>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        if manifest.schema_version != MANIFEST_SCHEMA {
            return Err(Error::SchemaVersion { expected: MANIFEST_SCHEMA.to_string(), found: manifest.schema_version });
        }
        let samples = manifest
            .records
            .iter()
            .map(|r| {
                Ok((
                    r.split,
                    EditSample {
                        id: r.id.clone(),
                        source_image: Image::load_png(&dir.join(&r.source_image))?,
                        target_image: Image::load_png(&dir.join(&r.target_image))?,
                        instruction: r.instruction.clone(),
                        reasoning: r.reasoning.clone(),
                        gt_bbox: r.gt_bbox,
                        gt_mask: Mask::load_png(&dir.join(&r.mask))?,
                        touch: r.touch,
                    },
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { root: dir.to_path_buf(), manifest, samples })
    }

    pub fn split(&self, split: Split) -> Vec<&EditSample> {
        self.samples.iter().filter(|(s, _)| *s == split).map(|(_, e)| e).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obj(id: usize, bbox: NormalizedBBox, score: f64) -> SceneObject {
        SceneObject {
            id,
            category: "square".into(),
            bbox,
            appearance: Appearance { shape: ShapeKind::Square, color: ColorName::Red },
            salience_score: score,
        }
    }

    #[test]
    fn scene_is_deterministic() {
        let cfg = SceneConfig::default();
        let a = generate_scene(&mut seeded(9), &cfg).unwrap();
        let b = generate_scene(&mut seeded(9), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.image.encode_png().unwrap(), b.image.encode_png().unwrap());
    }

    #[test]
    fn single_object_range() {
        let cfg = SceneConfig { min_objects: 1, max_objects: 1, ..SceneConfig::default() };
        for s in 0..20 {
            let scene = generate_scene(&mut seeded(s), &cfg).unwrap();
            assert_eq!(scene.objects.len(), 1);
            let b = scene.objects[0].bbox;
            assert!(NormalizedBBox::new(b.x_c(), b.y_c(), b.w(), b.h()).is_ok());
            assert!((0.0..=1.0).contains(&scene.objects[0].salience_score));
        }
    }

    #[test]
    fn tiny_resolution_rejected() {
        let cfg = SceneConfig { resolution: 8, ..SceneConfig::default() };
        assert!(generate_scene(&mut seeded(0), &cfg).is_err());
    }

    #[test]
    fn filter_rules() {
        let objs = vec![
            obj(0, NormalizedBBox::new(0.5, 0.5, 0.02, 0.02).unwrap(), 0.9),
            obj(1, NormalizedBBox::new(0.104, 0.5, 0.2, 0.2).unwrap(), 0.9),
            obj(2, NormalizedBBox::new(0.5, 0.5, 0.3, 0.3).unwrap(), 0.1),
            obj(3, NormalizedBBox::new(0.5, 0.5, 0.3, 0.3).unwrap(), 0.9),
        ];
        let none = FilterConfig { min_area: 0.0, boundary_margin: 0.0, score_thresh: 0.0 };
        assert_eq!(filter_objects(&objs, &none), objs);
        // 0.02 * 0.02 = 0.0004 < 0.001
        let area = FilterConfig { min_area: 0.001, ..none };
        assert!(!filter_objects(&objs, &area).iter().any(|o| o.id == 0));
        // left edge at 0.004 < 0.01
        let margin = FilterConfig { boundary_margin: 0.01, ..none };
        assert!(!filter_objects(&objs, &margin).iter().any(|o| o.id == 1));
        let kept: Vec<usize> = filter_objects(&objs, &FilterConfig::default()).iter().map(|o| o.id).collect();
        assert_eq!(kept, vec![3]);
    }

    #[test]
    fn default_removal_matches_rerender_and_is_local() {
        let cfg = SceneConfig { min_objects: 3, max_objects: 3, ..SceneConfig::default() };
        let scene = generate_scene(&mut seeded(4), &cfg).unwrap();
        let target = &scene.objects[1];
        let removed = remove_object(&scene, target, RESYNTH_BACKEND).unwrap();
        assert_eq!(removed, scene.render_without(target.id));
        let (x0, y0, x1, y1) = dilated_rect(&target.bbox, 64, 64, LOCALITY_DILATION_PX);
        for y in 0..64 {
            for x in 0..64 {
                if !(x >= x0 && x < x1 && y >= y0 && y < y1) {
                    assert_eq!(removed.pixel(x, y), scene.image.pixel(x, y));
                }
            }
        }
        assert!(matches!(remove_object(&scene, target, "lama"), Err(Error::UnknownBackend(_))));
    }

    struct Echo;
    impl InpaintBackend for Echo {
        fn inpaint(&self, scene: &Scene, _object: &SceneObject) -> Result<Image> {
            Ok(scene.image.clone())
        }
    }

    #[test]
    fn external_backend_contract() {
        let scene = generate_scene(&mut seeded(1), &SceneConfig::default()).unwrap();
        let mut reg = BackendRegistry::default();
        reg.register("echo", Box::new(Echo));
        let out = reg.remove_object(&scene, &scene.objects[0], "echo").unwrap();
        assert_eq!(out, scene.image);
    }

    #[test]
    fn captions() {
        let lone = SceneObject {
            appearance: Appearance { shape: ShapeKind::Circle, color: ColorName::Red },
            ..obj(0, NormalizedBBox::new(0.2, 0.8, 0.2, 0.2).unwrap(), 1.0)
        };
        let (instr, reason) = caption_object(&lone, &[], &mut seeded(0));
        assert_eq!(instr, "add a red circle");
        assert!(reason.ends_with("bottom left"), "{reason}");
        let other = obj(1, NormalizedBBox::new(0.7, 0.75, 0.2, 0.2).unwrap(), 1.0);
        let (_, reason) = caption_object(&lone, std::slice::from_ref(&other), &mut seeded(0));
        assert!(reason.contains("left of the red square"), "{reason}");
        let again = caption_object(&lone, std::slice::from_ref(&other), &mut seeded(0));
        assert_eq!(again.1, reason);
    }

    #[test]
    fn reasoning_thirds_follow_centre() {
        // Independent binning: third index = floor(3 * x), capped at 2.
        let names = ["left", "center", "right"];
        for i in 0..50 {
            let x = 0.05 + 0.9 * i as f64 / 49.0;
            let o = obj(0, NormalizedBBox::new(x, 0.5, 0.1, 0.1).unwrap(), 1.0);
            let (_, r) = caption_object(&o, &[], &mut seeded(i));
            let expected = names[((3.0 * x).floor() as usize).min(2)];
            assert_eq!(r.split_whitespace().last().unwrap(), expected);
        }
    }

    #[test]
    fn touches_stay_in_box() {
        let b = NormalizedBBox::new(0.3, 0.6, 0.2, 0.3).unwrap();
        let mut rng = seeded(8);
        let xs: Vec<f64> = (0..20_000)
            .map(|_| {
                let t = sample_touch(&b, &mut rng);
                assert!(b.contains(t.x, t.y));
                t.x
            })
            .collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
        // w / 6 before the 3-sigma clamp
        assert!((std - 0.2 / 6.0).abs() / (0.2 / 6.0) < 0.05, "std {std}");
        let tiny = NormalizedBBox::new(0.5, 0.5, 1e-6, 1e-6).unwrap();
        let t = sample_touch(&tiny, &mut rng);
        assert!((t.x - 0.5).abs() < 1e-6 && (t.y - 0.5).abs() < 1e-6);
    }

    #[test]
    fn samples_satisfy_invariants() {
        let cfg = DatasetConfig::default();
        let samples = generate_samples(&cfg, 12, 77, "").unwrap();
        for s in &samples {
            s.check_invariants().unwrap();
            assert!(s.gt_mask.is_binary());
        }
        let again = generate_samples(&cfg, 12, 77, "").unwrap();
        assert_eq!(samples, again);
    }

    #[test]
    fn invariant_check_catches_leaks() {
        let mut s = generate_samples(&DatasetConfig::default(), 1, 3, "").unwrap().remove(0);
        let (x0, _, _, _) = dilated_rect(&s.gt_bbox, 64, 64, LOCALITY_DILATION_PX);
        let (lx, ly) = if x0 > 0 { (0, 0) } else { (63, 63) };
        s.gt_mask.set(lx, ly, 1.0);
        assert!(s.check_invariants().is_err());
    }

    #[test]
    fn exhausted_filter_reports_retries() {
        let cfg = DatasetConfig {
            filter: FilterConfig { min_area: 0.9, ..FilterConfig::default() },
            ..DatasetConfig::default()
        };
        let err = generate_sample(&cfg, &BackendRegistry::default(), 1, 0, "x".into()).unwrap_err();
        assert!(matches!(err, Error::GenerationExhausted { retries: MAX_RETRIES, .. }));
    }

    #[test]
    fn split_counts() {
        assert_eq!(train_count(10, 0.9), 9);
        assert_eq!(train_count(1112, 0.9), 1000);
    }

    #[test]
    fn dataset_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig::default();
        let m = build_dataset(&cfg, 10, 5, dir.path()).unwrap();
        assert_eq!(m.counts[&Split::Train], 9);
        assert_eq!(m.counts[&Split::Val], 1);
        let ds = Dataset::load(dir.path()).unwrap();
        let mem = generate_samples(&cfg, 10, 5, "").unwrap();
        for ((_, loaded), orig) in ds.samples.iter().zip(&mem) {
            assert_eq!(loaded, orig);
        }
        let dir2 = tempfile::tempdir().unwrap();
        build_dataset(&cfg, 10, 5, dir2.path()).unwrap();
        assert_eq!(
            fs::read(dir.path().join("manifest.json")).unwrap(),
            fs::read(dir2.path().join("manifest.json")).unwrap()
        );
        assert!(build_dataset(&cfg, 9, 5, dir2.path()).is_err());
    }
}
