//! Placement model: vocabulary, decoder, Eq.-1-style training and greedy
//! decoding into a [`PlacementResult`].

pub mod model;
pub mod vocab;

use std::path::Path;

use candle_core::DType;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use model::{sequence_nll, KvCache, PlacementConfig, PlacementModel};
pub use vocab::{decode_response, encode_response, parse_bbox, Axis, Role, TokenSequence, Vocabulary};

use crate::datagen::{grammar_words, EditSample};
use crate::error::{Error, Result};
use crate::geometry::{derive_size_stats, perturb_centroid, quantize_coord, NormalizedBBox, SizeStats, TouchPoint};
use crate::image::Image;
use crate::nn::{config_hash, load_checkpoint, save_checkpoint, Trainer};
use crate::rng::{seeded, stage_seed};
use crate::touchprior::{build_prompt, render_marker, PROMPT_PREFIX, PROMPT_SUFFIX};

pub const CHECKPOINT_KIND: &str = "placement";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementResult {
    pub reasoning: String,
    pub bbox: NormalizedBBox,
    pub fallback_used: bool,
    pub token_ids: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlacementTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr_ratio: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Fresh centroid perturbation of every target box on every visit.
    pub augment: bool,
}

impl Default for PlacementTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            min_lr_ratio: 0.1,
            warmup_steps: 50,
            weight_decay: 0.01,
            grad_clip: 1.0,
            augment: true,
        }
    }
}

impl PlacementTrainConfig {
    /// Warmup then cosine decay to `min_lr_ratio * lr`.
    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.lr * (self.min_lr_ratio + (1.0 - self.min_lr_ratio) * cosine)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: PlacementConfig,
    vocab: Vocabulary,
    size_stats: SizeStats,
}

/// Vocabulary over the prompt template, the caption grammar and a corpus.
pub fn build_vocabulary<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Vocabulary {
    let fixed = [PROMPT_PREFIX, PROMPT_SUFFIX];
    Vocabulary::from_corpus(fixed.into_iter().chain(grammar_words()).chain(corpus))
}

impl PlacementModel {
    /// The model input for one request: the marker composited onto the image
    /// at model resolution, and the prompt token ids ending in BOS.
    pub fn prepare(&self, image: &Image, instruction: &str, touch: &TouchPoint) -> Result<(Image, TokenSequence)> {
        let touch = touch.to_normalized(image.width(), image.height())?;
        let s = self.config.image_size;
        let resized = image.resized(s, s)?;
        let composite = render_marker(&resized, &touch, &self.config.marker)?;
        let mut prompt = self.vocab.encode_prompt(&build_prompt(instruction)?)?;
        if self.config.touch_tokens {
            let bins = self.vocab.bins();
            let at = prompt.ids.len() - 1;
            let y = self.vocab.coord_token(Axis::Y, quantize_coord(touch.y, bins)?)?;
            let x = self.vocab.coord_token(Axis::X, quantize_coord(touch.x, bins)?)?;
            for id in [y, x] {
                prompt.ids.insert(at, id);
                prompt.roles.insert(at, Role::Prompt);
            }
        }
        Ok((composite, prompt))
    }

    pub fn target_response(&self, reasoning: &str, bbox: &NormalizedBBox) -> Result<TokenSequence> {
        encode_response(if self.config.reasoning { reasoning } else { "" }, bbox, &self.vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta =
            CheckpointMeta { config: self.config.clone(), vocab: self.vocab.clone(), size_stats: self.size_stats };
        save_checkpoint(path, CHECKPOINT_KIND, &config_hash(&self.config)?, &meta, self.params())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = load_checkpoint::<CheckpointMeta>(path, CHECKPOINT_KIND)?;
        if ckpt.config_hash != config_hash(&ckpt.meta.config)? {
            return Err(Error::Checkpoint(format!("{}: config hash mismatch", path.display())));
        }
        let model = Self::new(ckpt.meta.config, ckpt.meta.vocab, ckpt.meta.size_stats, DType::F32, &mut seeded(0))?;
        model.params().load(&ckpt.tensors)?;
        Ok(model)
    }
}

/// Decodes greedily and parses the last well-ordered coordinate quadruple;
/// without one, falls back to a box of training-mean size at the touch.
pub fn predict_placement(
    model: &PlacementModel,
    image: &Image,
    instruction: &str,
    touch: &TouchPoint,
) -> Result<PlacementResult> {
    let (composite, prompt) = model.prepare(image, instruction, touch)?;
    let ids = model.generate(&composite, &prompt)?;
    Ok(result_from_tokens(&ids, &model.vocab, &touch.to_normalized(image.width(), image.height())?, &model.size_stats))
}

/// Builds a result from generated ids; `touch` must be normalised.
pub fn result_from_tokens(ids: &[u32], vocab: &Vocabulary, touch: &TouchPoint, stats: &SizeStats) -> PlacementResult {
    let (reasoning, parsed) = decode_response(ids, vocab);
    let (bbox, fallback_used) = match parsed {
        Some(b) => (b, false),
        None => (fallback_box(touch, stats), true),
    };
    PlacementResult { reasoning, bbox, fallback_used, token_ids: ids.to_vec() }
}

pub fn fallback_box(touch: &TouchPoint, stats: &SizeStats) -> NormalizedBBox {
    NormalizedBBox::new(touch.x.clamp(0.0, 1.0), touch.y.clamp(0.0, 1.0), stats.mean_w, stats.mean_h)
        .expect("validated size statistics")
}

struct Prepared {
    composite: Image,
    prompt: TokenSequence,
    reasoning: String,
    gt_bbox: NormalizedBBox,
}

fn prepare_all(model: &PlacementModel, samples: &[&EditSample]) -> Result<Vec<Prepared>> {
    samples
        .iter()
        .map(|s| {
            let (composite, prompt) = model.prepare(&s.source_image, &s.instruction, &s.touch)?;
            Ok(Prepared { composite, prompt, reasoning: s.reasoning.clone(), gt_bbox: s.gt_bbox })
        })
        .collect()
}

fn epoch_loss(
    model: &PlacementModel,
    data: &[Prepared],
    order: &[usize],
    batch_size: usize,
    mut targets: impl FnMut(&Prepared) -> Result<TokenSequence>,
    mut on_batch: impl FnMut(&candle_core::Tensor) -> Result<()>,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for chunk in order.chunks(batch_size) {
        let items: Vec<&Prepared> = chunk.iter().map(|&i| &data[i]).collect();
        let responses = items.iter().map(|p| targets(p)).collect::<Result<Vec<_>>>()?;
        let pairs: Vec<_> = items.iter().zip(&responses).map(|(p, r)| (&p.prompt, r)).collect();
        let images = model.image_batch(&items.iter().map(|p| &p.composite).collect::<Vec<_>>())?;
        let loss = model.batch_loss(&images, &pairs)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        on_batch(&loss)?;
        sum += value * chunk.len() as f64;
        count += chunk.len();
        if !value.is_finite() {
            return Ok(value);
        }
    }
    Ok(sum / count.max(1) as f64)
}

pub struct TrainedPlacement {
    pub model: PlacementModel,
    pub curve: Vec<LossRow>,
}

/// Trains a fresh model. Each epoch shuffles the training set, perturbs
/// every target centroid anew (when enabled) and reports train and val loss.
pub fn train_placement(
    train: &[&EditSample],
    val: &[&EditSample],
    config: &PlacementConfig,
    train_config: &PlacementTrainConfig,
    seed: u64,
) -> Result<TrainedPlacement> {
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if train_config.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let corpus = train.iter().flat_map(|s| [s.instruction.as_str(), s.reasoning.as_str()]);
    let vocab = build_vocabulary(corpus);
    let stats = derive_size_stats(train.iter().map(|s| &s.gt_bbox))?;
    let model =
        PlacementModel::new(config.clone(), vocab, stats, DType::F32, &mut seeded(stage_seed(seed, "placement-init")))?;
    let curve = fit(&model, train, val, train_config, seed)?;
    Ok(TrainedPlacement { model, curve })
}

/// Optimises `model` in place and returns the loss curve.
pub fn fit(
    model: &PlacementModel,
    train: &[&EditSample],
    val: &[&EditSample],
    cfg: &PlacementTrainConfig,
    seed: u64,
) -> Result<Vec<LossRow>> {
    let train_data = prepare_all(model, train)?;
    let val_data = prepare_all(model, val)?;
    let mut trainer = Trainer::new(model.params().vars(), cfg.lr, cfg.weight_decay, Some(cfg.grad_clip))?;
    let steps_per_epoch = train_data.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut shuffle_rng = seeded(stage_seed(seed, "placement-shuffle"));
    let mut aug_rng = seeded(stage_seed(seed, "placement-augment"));
    let mut step = 0;
    let mut curve = Vec::new();
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_data.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let loss = epoch_loss(
            model,
            &train_data,
            &order,
            cfg.batch_size,
            |p| {
                let bbox = if cfg.augment { perturb_centroid(&p.gt_bbox, &mut aug_rng) } else { p.gt_bbox };
                model.target_response(&p.reasoning, &bbox)
            },
            |loss| {
                trainer.set_lr(cfg.lr_at(step, total_steps));
                step += 1;
                let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
                if !value.is_finite() {
                    return Ok(());
                }
                trainer.step(loss)
            },
        )?;
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, loss });
        }
        curve.push(LossRow { epoch, split: "train", loss });
        if !val_data.is_empty() {
            let order: Vec<usize> = (0..val_data.len()).collect();
            let val_loss = epoch_loss(
                model,
                &val_data,
                &order,
                cfg.batch_size,
                |p| model.target_response(&p.reasoning, &p.gt_bbox),
                |_| Ok(()),
            )?;
            if !val_loss.is_finite() {
                return Err(Error::Diverged { epoch, loss: val_loss });
            }
            curve.push(LossRow { epoch, split: "val", loss: val_loss });
        }
        tracing::info!(epoch, loss, "placement epoch");
    }
    Ok(curve)
}

/// Loss curve as CSV with columns `epoch,split,loss`.
pub fn write_loss_csv(rows: &[LossRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "split", "loss"])?;
    for r in rows {
        w.write_record([r.epoch.to_string(), r.split.to_string(), format!("{:.6}", r.loss)])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests;
