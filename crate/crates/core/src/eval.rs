//! Benchmark schema, placement and edit metrics, method comparison and
//! report files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::DatasetManifest;
use crate::editor::{sample_edits, EditCondition, EditRequest, EditResult, EditorModel};
use crate::error::{Error, Result};
use crate::geometry::{iou, random_placement, NormalizedBBox, SizeStats, TouchPoint};
use crate::image::{Image, Mask};
use crate::nn::config_hash;
use crate::placement::{predict_placement, PlacementModel};
use crate::rng::{seeded, stage_seed};

pub const BENCHMARK_SCHEMA: &str = "touch2add/1";
pub const REPORT_SCHEMA: &str = "touchedit.report/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRecord {
    pub id: String,
    /// Image path relative to the benchmark file.
    pub image: String,
    pub width: u32,
    pub height: u32,
    pub instruction: String,
    /// Normalised touch.
    pub touch: TouchPoint,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_bbox: Option<NormalizedBBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_mask: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BenchmarkFile {
    schema_version: String,
    records: Vec<serde_json::Value>,
}

/// Writes records under the current schema version.
pub fn save_benchmark(records: &[BenchmarkRecord], path: &Path) -> Result<()> {
    let file = BenchmarkFile {
        schema_version: BENCHMARK_SCHEMA.to_string(),
        records: records.iter().map(serde_json::to_value).collect::<std::result::Result<_, _>>()?,
    };
    fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

/// Reads and validates a benchmark file.
pub fn load_benchmark(path: &Path) -> Result<Vec<BenchmarkRecord>> {
    let file: BenchmarkFile = serde_json::from_slice(&fs::read(path)?)?;
    if file.schema_version != BENCHMARK_SCHEMA {
        return Err(Error::SchemaVersion { expected: BENCHMARK_SCHEMA.to_string(), found: file.schema_version });
    }
    file.records
        .into_iter()
        .enumerate()
        .map(|(index, value)| {
            let rec: BenchmarkRecord =
                serde_json::from_value(value).map_err(|e| Error::MalformedRecord { index, reason: e.to_string() })?;
            let bad = |reason: String| Error::MalformedRecord { index, reason };
            if rec.touch.frame != crate::geometry::Frame::Normalized {
                return Err(bad("touch must be normalised".into()));
            }
            rec.touch.check_bounds(rec.width, rec.height).map_err(|e| bad(e.to_string()))?;
            if rec.instruction.trim().is_empty() {
                return Err(bad("empty instruction".into()));
            }
            Ok(rec)
        })
        .collect()
}

/// Benchmark records for every sample of a dataset manifest.
pub fn benchmark_from_manifest(manifest: &DatasetManifest) -> Vec<BenchmarkRecord> {
    let size = manifest.config.scene.resolution;
    manifest
        .records
        .iter()
        .map(|r| BenchmarkRecord {
            id: r.id.clone(),
            image: r.source_image.clone(),
            width: size,
            height: size,
            instruction: r.instruction.clone(),
            touch: r.touch.to_normalized(size, size).expect("generated touches are in bounds"),
            gt_bbox: Some(r.gt_bbox),
            target_image: Some(r.target_image.clone()),
            target_mask: Some(r.mask.clone()),
        })
        .collect()
}

/// A record with its images decoded.
#[derive(Debug, Clone)]
pub struct LoadedRecord {
    pub record: BenchmarkRecord,
    pub image: Image,
    pub target: Option<Image>,
    pub target_mask: Option<Mask>,
}

pub fn load_benchmark_images(records: Vec<BenchmarkRecord>, root: &Path) -> Result<Vec<LoadedRecord>> {
    records
        .into_iter()
        .enumerate()
        .map(|(index, record)| {
            let image = Image::load_png(&root.join(&record.image))?;
            if (image.width(), image.height()) != (record.width, record.height) {
                return Err(Error::MalformedRecord {
                    index,
                    reason: format!(
                        "image is {}x{}, record says {}x{}",
                        image.width(),
                        image.height(),
                        record.width,
                        record.height
                    ),
                });
            }
            let target = record.target_image.as_ref().map(|p| Image::load_png(&root.join(p))).transpose()?;
            let target_mask = record.target_mask.as_ref().map(|p| Mask::load_png(&root.join(p))).transpose()?;
            Ok(LoadedRecord { record, image, target, target_mask })
        })
        .collect()
}

/// Loads a benchmark file and the images it references.
pub fn open_benchmark(path: &Path) -> Result<Vec<LoadedRecord>> {
    let root: PathBuf = path.parent().map(Path::to_path_buf).unwrap_or_default();
    load_benchmark_images(load_benchmark(path)?, &root)
}

/// Image-to-vector model for embedding-similarity metrics.
pub trait EmbeddingBackend: Send + Sync {
    fn embed(&self, image: &Image) -> Result<Vec<f32>>;
}

/// Optional CLIP- and DINO-style backends; absent columns stay empty.
#[derive(Default)]
pub struct EmbeddingBackends {
    pub clip: Option<Box<dyn EmbeddingBackend>>,
    pub dino: Option<Box<dyn EmbeddingBackend>>,
}

pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch(format!("embeddings of length {} and {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(dot / (na * nb))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RecordMetrics {
    pub id: String,
    pub iou: Option<f64>,
    pub l1: Option<f64>,
    pub l2: Option<f64>,
    pub clip: Option<f64>,
    pub dino: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub seed: u64,
    pub mean_iou: Option<f64>,
    pub iou_gt_0_5_rate: Option<f64>,
    pub l1: Option<f64>,
    pub l2: Option<f64>,
    pub clip: Option<f64>,
    pub dino: Option<f64>,
    pub error: Option<String>,
    pub records: Vec<RecordMetrics>,
}

impl MethodRow {
    fn failed(method: String, seed: u64, records: &[LoadedRecord], err: &Error) -> Self {
        Self {
            method,
            seed,
            error: Some(err.to_string()),
            records: records
                .iter()
                .map(|r| RecordMetrics { id: r.record.id.clone(), error: Some(err.to_string()), ..Default::default() })
                .collect(),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub rows: Vec<MethodRow>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Mean IoU and the fraction of records with IoU strictly above 0.5.
pub fn evaluate_placement(
    method: &str,
    seed: u64,
    predictions: &[Result<NormalizedBBox>],
    benchmark: &[LoadedRecord],
) -> Result<MethodRow> {
    if predictions.len() != benchmark.len() {
        return Err(Error::ShapeMismatch(format!("{} predictions for {} records", predictions.len(), benchmark.len())));
    }
    let mut records = Vec::with_capacity(benchmark.len());
    for (pred, rec) in predictions.iter().zip(benchmark) {
        let gt = rec.record.gt_bbox.ok_or_else(|| Error::MissingGroundTruth(rec.record.id.clone()))?;
        let mut m = RecordMetrics { id: rec.record.id.clone(), ..Default::default() };
        match pred {
            Ok(b) => m.iou = Some(iou(b, &gt)),
            Err(e) => m.error = Some(e.to_string()),
        }
        records.push(m);
    }
    // A failed record scores zero so rows stay comparable.
    let ious: Vec<f64> = records.iter().map(|r| r.iou.unwrap_or(0.0)).collect();
    Ok(MethodRow {
        method: method.to_string(),
        seed,
        mean_iou: mean(ious.iter().copied()),
        iou_gt_0_5_rate: mean(ious.iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 })),
        records,
        ..Default::default()
    })
}

/// Per-pixel mean absolute and squared error of the blended images against
/// the targets, on unit-interval values.
pub fn pixel_errors(result: &Image, target: &Image) -> Result<(f64, f64)> {
    if (result.width(), result.height()) != (target.width(), target.height()) {
        return Err(Error::ShapeMismatch(format!(
            "result {}x{} vs target {}x{}",
            result.width(),
            result.height(),
            target.width(),
            target.height()
        )));
    }
    let n = result.data().len() as f64;
    let (mut l1, mut l2) = (0.0, 0.0);
    for (&a, &b) in result.data().iter().zip(target.data()) {
        let d = (a as f64 - b as f64).abs();
        l1 += d;
        l2 += d * d;
    }
    Ok((l1 / n, l2 / n))
}

pub fn evaluate_edit(
    method: &str,
    seed: u64,
    results: &[Result<EditResult>],
    benchmark: &[LoadedRecord],
    backends: &EmbeddingBackends,
) -> Result<MethodRow> {
    if results.len() != benchmark.len() {
        return Err(Error::ShapeMismatch(format!("{} results for {} records", results.len(), benchmark.len())));
    }
    let mut records = Vec::with_capacity(benchmark.len());
    for (res, rec) in results.iter().zip(benchmark) {
        let target = rec.target.as_ref().ok_or_else(|| Error::MissingGroundTruth(rec.record.id.clone()))?;
        let mut m = RecordMetrics { id: rec.record.id.clone(), ..Default::default() };
        match res {
            Ok(r) => {
                let (l1, l2) = pixel_errors(&r.blended_image, target)?;
                m.l1 = Some(l1);
                m.l2 = Some(l2);
                let sim = |b: &Option<Box<dyn EmbeddingBackend>>| -> Result<Option<f64>> {
                    b.as_ref().map(|b| cosine_similarity(&b.embed(&r.blended_image)?, &b.embed(target)?)).transpose()
                };
                m.clip = sim(&backends.clip)?;
                m.dino = sim(&backends.dino)?;
            }
            Err(e) => m.error = Some(e.to_string()),
        }
        records.push(m);
    }
    let ok = || records.iter().filter(|r| r.error.is_none());
    Ok(MethodRow {
        method: method.to_string(),
        seed,
        l1: mean(ok().filter_map(|r| r.l1)),
        l2: mean(ok().filter_map(|r| r.l2)),
        clip: mean(ok().filter_map(|r| r.clip)),
        dino: mean(ok().filter_map(|r| r.dino)),
        error: records.iter().any(|r| r.error.is_some()).then(|| "some records failed".to_string()),
        records,
        ..Default::default()
    })
}

/// Produces one placement per record; `seed` is the method's own seed.
pub trait PlacementMethod: Send + Sync {
    fn name(&self) -> String;
    fn place(&self, record: &LoadedRecord, seed: u64) -> Result<NormalizedBBox>;
}

/// Produces edits for a whole benchmark (so models can batch).
pub trait EditMethod: Send + Sync {
    fn name(&self) -> String;
    fn edit_all(&self, records: &[LoadedRecord], seed: u64) -> Result<Vec<Result<EditResult>>>;
}

pub struct RandomBaseline {
    pub stats: SizeStats,
}

impl PlacementMethod for RandomBaseline {
    fn name(&self) -> String {
        "random_placement".into()
    }

    fn place(&self, record: &LoadedRecord, seed: u64) -> Result<NormalizedBBox> {
        let mut rng = seeded(stage_seed(seed, &record.record.id));
        random_placement(&record.record.touch, &self.stats, &mut rng)
    }
}

pub struct ModelPlacement<'a> {
    pub name: String,
    pub model: &'a PlacementModel,
}

impl PlacementMethod for ModelPlacement<'_> {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn place(&self, record: &LoadedRecord, _seed: u64) -> Result<NormalizedBBox> {
        let r = predict_placement(self.model, &record.image, &record.record.instruction, &record.record.touch)?;
        Ok(r.bbox)
    }
}

/// Returns the ground-truth box.
pub struct OraclePlacement;

impl PlacementMethod for OraclePlacement {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn place(&self, record: &LoadedRecord, _seed: u64) -> Result<NormalizedBBox> {
        record.record.gt_bbox.ok_or_else(|| Error::MissingGroundTruth(record.record.id.clone()))
    }
}

/// Placement followed by a box-conditioned editor.
pub struct BoxEditPipeline<'a> {
    pub name: String,
    pub placement: &'a dyn PlacementMethod,
    pub editor: &'a EditorModel,
}

/// Touch-mask-conditioned editor without a placement stage.
pub struct TouchPriorEditor<'a> {
    pub name: String,
    pub editor: &'a EditorModel,
}

fn run_edits(
    editor: &EditorModel,
    records: &[LoadedRecord],
    conditions: Vec<Result<EditCondition>>,
    seed: u64,
) -> Result<Vec<Result<EditResult>>> {
    let mut out: Vec<Option<Result<EditResult>>> = Vec::with_capacity(records.len());
    let mut requests = Vec::new();
    let mut slots = Vec::new();
    for (i, (rec, cond)) in records.iter().zip(conditions).enumerate() {
        match cond {
            Ok(condition) => {
                requests.push(EditRequest {
                    source: &rec.image,
                    instruction: &rec.record.instruction,
                    condition,
                    seed: stage_seed(seed, &rec.record.id),
                });
                slots.push(i);
                out.push(None);
            }
            Err(e) => out.push(Some(Err(e))),
        }
    }
    const CHUNK: usize = 50;
    let mut results = Vec::with_capacity(requests.len());
    for chunk in requests.chunks(CHUNK) {
        results.extend(sample_edits(editor, chunk)?);
    }
    for (slot, res) in slots.into_iter().zip(results) {
        out[slot] = Some(Ok(res));
    }
    Ok(out.into_iter().map(|r| r.expect("every slot filled")).collect())
}

impl EditMethod for BoxEditPipeline<'_> {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn edit_all(&self, records: &[LoadedRecord], seed: u64) -> Result<Vec<Result<EditResult>>> {
        let place_seed = stage_seed(seed, "placement");
        let boxes: Vec<_> =
            records.par_iter().map(|r| self.placement.place(r, place_seed).map(EditCondition::Box)).collect();
        run_edits(self.editor, records, boxes, stage_seed(seed, "edit"))
    }
}

impl EditMethod for TouchPriorEditor<'_> {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn edit_all(&self, records: &[LoadedRecord], seed: u64) -> Result<Vec<Result<EditResult>>> {
        let touches = records.iter().map(|r| Ok(EditCondition::Touch(r.record.touch))).collect();
        run_edits(self.editor, records, touches, stage_seed(seed, "edit"))
    }
}

pub enum Method<'a> {
    Placement(&'a dyn PlacementMethod),
    Edit(&'a dyn EditMethod),
}

impl Method<'_> {
    pub fn name(&self) -> String {
        match self {
            Method::Placement(m) => m.name(),
            Method::Edit(m) => m.name(),
        }
    }
}

/// Runs every method over the benchmark with its own child seed. A failing
/// method yields an error row instead of aborting the comparison.
pub fn run_comparison(
    methods: &[Method<'_>],
    benchmark: &[LoadedRecord],
    seed: u64,
    backends: &EmbeddingBackends,
) -> Result<MetricsReport> {
    if methods.is_empty() {
        return Err(Error::Empty("comparison needs at least one method"));
    }
    let mut rows = Vec::with_capacity(methods.len());
    for method in methods {
        let name = method.name();
        let method_seed = stage_seed(seed, &name);
        let row = match method {
            Method::Placement(m) => {
                let preds: Vec<_> = benchmark.par_iter().map(|r| m.place(r, method_seed)).collect();
                evaluate_placement(&name, method_seed, &preds, benchmark)
            }
            Method::Edit(m) => m
                .edit_all(benchmark, method_seed)
                .and_then(|res| evaluate_edit(&name, method_seed, &res, benchmark, backends)),
        };
        rows.push(row.unwrap_or_else(|e| MethodRow::failed(name, method_seed, benchmark, &e)));
    }
    let names: Vec<String> = methods.iter().map(Method::name).collect();
    let ids: Vec<&str> = benchmark.iter().map(|r| r.record.id.as_str()).collect();
    Ok(MetricsReport {
        schema_version: REPORT_SCHEMA.to_string(),
        config_hash: config_hash(&(names, ids, seed))?,
        seed,
        rows,
    })
}

fn cell(v: Option<f64>, scale: f64, decimals: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.*}", decimals, x * scale))
}

/// Aligned plain-text table: method, mean IoU, IoU > 0.5 (%), L1, L2, CLIP, DINO.
pub fn render_table(report: &MetricsReport) -> String {
    let width = report.rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:>8}  {:>11}  {:>7}  {:>7}  {:>6}  {:>6}",
        "method", "mean IoU", "IoU>0.5 (%)", "L1", "L2", "CLIP", "DINO"
    );
    for r in &report.rows {
        let _ = write!(
            out,
            "{:<width$}  {:>8}  {:>11}  {:>7}  {:>7}  {:>6}  {:>6}",
            r.method,
            cell(r.mean_iou, 1.0, 4),
            cell(r.iou_gt_0_5_rate, 100.0, 2),
            cell(r.l1, 1.0, 4),
            cell(r.l2, 1.0, 4),
            cell(r.clip, 1.0, 3),
            cell(r.dino, 1.0, 3),
        );
        if let Some(e) = &r.error {
            let _ = write!(out, "  [{e}]");
        }
        out.push('\n');
    }
    out
}

/// Writes `<stem>.json`, `<stem>.txt` and `<stem>_records.csv` into `dir`.
pub fn write_report(report: &MetricsReport, dir: &Path, stem: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(report)?)?;
    fs::write(dir.join(format!("{stem}.txt")), render_table(report))?;
    let mut w = csv::Writer::from_path(dir.join(format!("{stem}_records.csv")))?;
    w.write_record(["method", "id", "iou", "l1", "l2", "clip", "dino", "error"])?;
    let f = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
    for row in &report.rows {
        for r in &row.records {
            w.write_record([
                row.method.clone(),
                r.id.clone(),
                f(r.iou),
                f(r.l1),
                f(r.l2),
                f(r.clip),
                f(r.dino),
                r.error.clone().unwrap_or_default(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
