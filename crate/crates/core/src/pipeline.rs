//! End-to-end stages over files: dataset generation, training, evaluation
//! and comparison. Every output is a pure function of config and seed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{build_bench_set, build_dataset, Dataset, DatasetConfig, Split};
use crate::editor::{train_editor, write_editor_loss_csv, Conditioning, EditorConfig, EditorModel, EditorTrainConfig};
use crate::error::{Error, Result};
use crate::eval::{
    benchmark_from_manifest, evaluate_edit, open_benchmark, run_comparison, save_benchmark, write_report,
    BoxEditPipeline, EditMethod, EmbeddingBackends, LoadedRecord, Method, MetricsReport, ModelPlacement,
    RandomBaseline, TouchPriorEditor, REPORT_SCHEMA,
};
use crate::nn::config_hash;
use crate::placement::{train_placement, write_loss_csv, PlacementConfig, PlacementModel, PlacementTrainConfig};
use crate::rng::stage_seed;

pub const PLACEMENT_CKPT: &str = "placement.ckpt";
pub const PLACEMENT_LOSS: &str = "placement_loss.csv";
pub const EDITOR_CKPT: &str = "editor.ckpt";
pub const EDITOR_LOSS: &str = "editor_loss.csv";
pub const BENCHMARK_FILE: &str = "benchmark.json";

pub const RANDOM_METHOD: &str = "random_placement";
pub const PLACEMENT_METHOD: &str = "touch_placement";
pub const NO_REASONING_METHOD: &str = "touch_placement_no_reasoning";
pub const EDIT_METHOD: &str = "placement_box_editor";
pub const TOUCH_EDIT_METHOD: &str = "touch_mask_editor";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Train plus validation samples.
    pub samples: usize,
    pub bench_samples: usize,
    pub dataset: DatasetConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { samples: 1112, bench_samples: 100, dataset: DatasetConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Evaluate edits on the first `n` records only.
    pub edit_records: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub data: DataConfig,
    pub placement: PlacementConfig,
    pub placement_train: PlacementTrainConfig,
    pub editor: EditorConfig,
    pub editor_train: EditorTrainConfig,
    pub eval: EvalConfig,
}

/// Writes `out/train` (train and val splits) and `out/bench` (held-out set
/// plus its benchmark file).
pub fn gen_data(cfg: &PipelineConfig, seed: u64, out: &Path) -> Result<()> {
    build_dataset(&cfg.data.dataset, cfg.data.samples, stage_seed(seed, "train-data"), &out.join("train"))?;
    let bench_dir = out.join("bench");
    let manifest =
        build_bench_set(&cfg.data.dataset, cfg.data.bench_samples, stage_seed(seed, "bench-data"), &bench_dir)?;
    save_benchmark(&benchmark_from_manifest(&manifest), &bench_dir.join(BENCHMARK_FILE))
}

fn splits(data: &Dataset) -> Result<(Vec<&crate::datagen::EditSample>, Vec<&crate::datagen::EditSample>)> {
    let train = data.split(Split::Train);
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    Ok((train, data.split(Split::Val)))
}

/// Trains a placement model on `data/manifest.json`; writes the checkpoint
/// and loss curve into `out`.
pub fn train_placement_stage(cfg: &PipelineConfig, seed: u64, data: &Path, out: &Path) -> Result<PlacementModel> {
    let dataset = Dataset::load(data)?;
    let (train, val) = splits(&dataset)?;
    let trained = train_placement(&train, &val, &cfg.placement, &cfg.placement_train, seed)?;
    fs::create_dir_all(out)?;
    trained.model.save(&out.join(PLACEMENT_CKPT))?;
    write_loss_csv(&trained.curve, &out.join(PLACEMENT_LOSS))?;
    Ok(trained.model)
}

pub fn train_editor_stage(cfg: &PipelineConfig, seed: u64, data: &Path, out: &Path) -> Result<EditorModel> {
    let dataset = Dataset::load(data)?;
    let (train, val) = splits(&dataset)?;
    let trained = train_editor(&train, &val, &cfg.editor, &cfg.editor_train, seed)?;
    fs::create_dir_all(out)?;
    trained.model.save(&out.join(EDITOR_CKPT))?;
    write_editor_loss_csv(&trained.curve, &out.join(EDITOR_LOSS))?;
    Ok(trained.model)
}

/// Checkpoints taking part in a comparison; absent ones are skipped.
#[derive(Debug, Clone, Default)]
pub struct CompareInputs {
    pub placement: Option<PathBuf>,
    pub placement_no_reasoning: Option<PathBuf>,
    pub editor: Option<PathBuf>,
    pub touch_editor: Option<PathBuf>,
}

/// Loaded models for a comparison.
#[derive(Default)]
pub struct CompareModels {
    pub placement: Option<PlacementModel>,
    pub placement_no_reasoning: Option<PlacementModel>,
    pub editor: Option<EditorModel>,
    pub touch_editor: Option<EditorModel>,
}

impl CompareModels {
    pub fn load(inputs: &CompareInputs) -> Result<Self> {
        let placement = |p: &Option<PathBuf>| p.as_deref().map(PlacementModel::load).transpose();
        let editor = |p: &Option<PathBuf>| p.as_deref().map(EditorModel::load).transpose();
        Ok(Self {
            placement: placement(&inputs.placement)?,
            placement_no_reasoning: placement(&inputs.placement_no_reasoning)?,
            editor: editor(&inputs.editor)?,
            touch_editor: editor(&inputs.touch_editor)?,
        })
    }
}

/// Placement rows (random baseline, trained, no-reasoning) over the whole
/// benchmark and edit rows over the first `eval.edit_records` records.
/// The random baseline needs a placement model for its size statistics.
pub fn compare(
    cfg: &PipelineConfig,
    seed: u64,
    benchmark: &[LoadedRecord],
    models: &CompareModels,
) -> Result<(MetricsReport, Option<MetricsReport>)> {
    let stats_source = models.placement.as_ref().or(models.placement_no_reasoning.as_ref());
    let stats = stats_source.ok_or_else(|| Error::Config("comparison needs a placement checkpoint".into()))?.size_stats;
    let random = RandomBaseline { stats };
    let trained = models.placement.as_ref().map(|m| ModelPlacement { name: PLACEMENT_METHOD.into(), model: m });
    let ablated =
        models.placement_no_reasoning.as_ref().map(|m| ModelPlacement { name: NO_REASONING_METHOD.into(), model: m });
    let mut methods = vec![Method::Placement(&random)];
    methods.extend(trained.as_ref().map(|m| Method::Placement(m)));
    methods.extend(ablated.as_ref().map(|m| Method::Placement(m)));
    let backends = EmbeddingBackends::default();
    let placement_report = run_comparison(&methods, benchmark, stage_seed(seed, "placement"), &backends)?;

    let box_edit = match (&trained, &models.editor) {
        (Some(p), Some(e)) => {
            check_conditioning(e, Conditioning::Box)?;
            Some(BoxEditPipeline { name: EDIT_METHOD.into(), placement: p, editor: e })
        }
        _ => None,
    };
    let touch_edit = match &models.touch_editor {
        Some(e) => {
            check_conditioning(e, Conditioning::TouchMask)?;
            Some(TouchPriorEditor { name: format!("{TOUCH_EDIT_METHOD}_{0}x{0}", e.config.touch_mask_size), editor: e })
        }
        None => None,
    };
    let mut edit_methods: Vec<Method<'_>> = Vec::new();
    edit_methods.extend(box_edit.as_ref().map(|m| Method::Edit(m)));
    edit_methods.extend(touch_edit.as_ref().map(|m| Method::Edit(m)));
    let edit_report = if edit_methods.is_empty() {
        None
    } else {
        let n = cfg.eval.edit_records.unwrap_or(benchmark.len()).min(benchmark.len());
        Some(run_comparison(&edit_methods, &benchmark[..n], stage_seed(seed, "edit"), &backends)?)
    };
    Ok((placement_report, edit_report))
}

fn check_conditioning(model: &EditorModel, want: Conditioning) -> Result<()> {
    if model.config.conditioning != want {
        return Err(Error::Config(format!(
            "editor checkpoint is {:?}-conditioned, expected {want:?}",
            model.config.conditioning
        )));
    }
    Ok(())
}

/// Runs [`compare`] on a benchmark file and writes `placement.*` and
/// `edit.*` reports into `out`.
pub fn compare_stage(
    cfg: &PipelineConfig,
    seed: u64,
    benchmark: &Path,
    inputs: &CompareInputs,
    out: &Path,
) -> Result<(MetricsReport, Option<MetricsReport>)> {
    let records = open_benchmark(benchmark)?;
    let models = CompareModels::load(inputs)?;
    let (placement, edit) = compare(cfg, seed, &records, &models)?;
    write_report(&placement, out, "placement")?;
    if let Some(e) = &edit {
        write_report(e, out, "edit")?;
    }
    Ok((placement, edit))
}

/// Evaluates one placement checkpoint and, when given, the box editor on
/// its predictions. Writes `placement.*`, `edit.*` and PNG triplets under
/// `out/edits`.
pub fn eval_stage(
    cfg: &PipelineConfig,
    seed: u64,
    benchmark: &Path,
    placement: &Path,
    editor: Option<&Path>,
    out: &Path,
) -> Result<(MetricsReport, Option<MetricsReport>)> {
    let records = open_benchmark(benchmark)?;
    let model = PlacementModel::load(placement)?;
    let method = ModelPlacement { name: PLACEMENT_METHOD.into(), model: &model };
    let backends = EmbeddingBackends::default();
    let placement_report =
        run_comparison(&[Method::Placement(&method)], &records, stage_seed(seed, "placement"), &backends)?;
    write_report(&placement_report, out, "placement")?;
    let Some(editor) = editor else { return Ok((placement_report, None)) };
    let editor = EditorModel::load(editor)?;
    check_conditioning(&editor, Conditioning::Box)?;
    let n = cfg.eval.edit_records.unwrap_or(records.len()).min(records.len());
    let records = &records[..n];
    let pipeline = BoxEditPipeline { name: EDIT_METHOD.into(), placement: &method, editor: &editor };
    let edit_seed = stage_seed(stage_seed(seed, "edit"), EDIT_METHOD);
    let results = pipeline.edit_all(records, edit_seed)?;
    let row = evaluate_edit(EDIT_METHOD, edit_seed, &results, records, &backends)?;
    let ids: Vec<&str> = records.iter().map(|r| r.record.id.as_str()).collect();
    let edit_report = MetricsReport {
        schema_version: REPORT_SCHEMA.to_string(),
        config_hash: config_hash(&(vec![EDIT_METHOD], ids, seed))?,
        seed,
        rows: vec![row],
    };
    write_report(&edit_report, out, "edit")?;
    let dir = out.join("edits");
    fs::create_dir_all(&dir)?;
    for (rec, res) in records.iter().zip(&results) {
        if let Ok(r) = res {
            let id = &rec.record.id;
            r.edited_image.save_png(&dir.join(format!("{id}_edited.png")))?;
            r.instance_mask.save_png(&dir.join(format!("{id}_mask.png")))?;
            r.blended_image.save_png(&dir.join(format!("{id}_blended.png")))?;
        }
    }
    Ok((placement_report, Some(edit_report)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::editor::ScheduleConfig;
    use crate::editor::UNetConfig;

    fn tiny() -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.data.samples = 24;
        cfg.data.bench_samples = 6;
        cfg.placement.dim = 32;
        cfg.placement.layers = 1;
        cfg.placement.heads = 2;
        cfg.placement.max_new_tokens = 24;
        cfg.placement_train.epochs = 1;
        cfg.placement_train.batch_size = 8;
        cfg.editor.unet = UNetConfig { base_channels: 8, mid_channels: 16, cond_dim: 16, groups: 4 };
        cfg.editor.schedule = ScheduleConfig { steps: 4, beta_start: 1e-2, beta_end: 0.5 };
        cfg.editor_train.epochs = 1;
        cfg.editor_train.batch_size = 8;
        cfg.eval.edit_records = Some(3);
        cfg
    }

    #[test]
    fn config_parses_partial_toml() {
        let cfg: PipelineConfig = toml::from_str("[placement]\ndim = 48\n[data]\nbench_samples = 7\n").unwrap();
        assert_eq!(cfg.placement.dim, 48);
        assert_eq!(cfg.placement.layers, PlacementConfig::default().layers);
        assert_eq!(cfg.data.bench_samples, 7);
        let back: PipelineConfig = toml::from_str(&toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn stages_compose() {
        let cfg = tiny();
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        gen_data(&cfg, 4, root).unwrap();
        train_placement_stage(&cfg, 4, &root.join("train"), &root.join("p")).unwrap();
        train_editor_stage(&cfg, 4, &root.join("train"), &root.join("e")).unwrap();
        let inputs = CompareInputs {
            placement: Some(root.join("p").join(PLACEMENT_CKPT)),
            editor: Some(root.join("e").join(EDITOR_CKPT)),
            ..Default::default()
        };
        let bench = root.join("bench").join(BENCHMARK_FILE);
        let (p, e) = compare_stage(&cfg, 4, &bench, &inputs, &root.join("r")).unwrap();
        assert_eq!(p.rows.len(), 2);
        assert!(p.rows.iter().all(|r| r.records.len() == 6));
        let e = e.unwrap();
        assert_eq!(e.rows[0].records.len(), 3);
        assert!(e.rows[0].l1.is_some());
        // A box editor in the touch slot is rejected rather than misused.
        let wrong = CompareInputs { touch_editor: inputs.editor.clone(), ..inputs.clone() };
        assert!(compare_stage(&cfg, 4, &bench, &wrong, &root.join("r2")).is_err());

        let ckpt = root.join("p").join(PLACEMENT_CKPT);
        let ed = root.join("e").join(EDITOR_CKPT);
        let (p1, e1) = eval_stage(&cfg, 4, &bench, &ckpt, Some(&ed), &root.join("v")).unwrap();
        assert_eq!(p1.rows[0], p.rows[1]);
        assert_eq!(e1.unwrap().rows[0].records.len(), 3);
        let edits = fs::read_dir(root.join("v").join("edits")).unwrap().count();
        assert_eq!(edits, 9);
    }
}
