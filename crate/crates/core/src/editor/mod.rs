//! Pixel-space diffusion editor that jointly predicts noise and an instance
//! mask, plus mask-based blending onto the source.

pub mod schedule;
pub mod unet;

use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use schedule::{DiffusionSchedule, ScheduleConfig};
pub use unet::{UNet, UNetConfig};

use crate::datagen::{grammar_words, EditSample};
use crate::error::{Error, Result};
use crate::geometry::{NormalizedBBox, TouchPoint};
use crate::image::{Image, Mask};
use crate::nn::{config_hash, load_checkpoint, save_checkpoint, sigmoid, ParamStore, Trainer};
use crate::placement::vocab::split_words;
use crate::rng::{child_seed, seeded, stage_seed};
use crate::touchprior::{render_touch_mask, DEFAULT_TOUCH_MASK_SIZE};

pub const CHECKPOINT_KIND: &str = "editor";
pub const DICE_EPS: f64 = 1e-6;
/// Final-step mask values below this snap to exactly 0, above `1 - MASK_SNAP` to 1.
pub const MASK_SNAP: f32 = 0.05;

/// What the extra input channel holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    Box,
    TouchMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditorConfig {
    pub image_size: u32,
    pub unet: UNetConfig,
    pub schedule: ScheduleConfig,
    pub conditioning: Conditioning,
    pub touch_mask_size: u32,
}

impl Default for EditorConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            unet: UNetConfig::default(),
            schedule: ScheduleConfig::default(),
            conditioning: Conditioning::Box,
            touch_mask_size: DEFAULT_TOUCH_MASK_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub lambda_dice: f64,
}

impl Default for EditorTrainConfig {
    fn default() -> Self {
        Self { epochs: 20, batch_size: 16, lr: 2e-3, weight_decay: 0.0, grad_clip: 1.0, lambda_dice: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditResult {
    pub edited_image: Image,
    pub instance_mask: Mask,
    pub blended_image: Image,
}

/// The per-request spatial condition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EditCondition {
    Box(NormalizedBBox),
    Touch(TouchPoint),
}

/// 1 inside the pixel-rounded box, 0 elsewhere.
pub fn box_channel(bbox: &NormalizedBBox, width: u32, height: u32) -> Mask {
    let (x0, y0, x1, y1) = bbox.pixel_rect(width, height);
    let mut m = Mask::zeros(width, height);
    for y in y0..y1 {
        for x in x0..x1 {
            m.set(x, y, 1.0);
        }
    }
    m
}

/// Mean over the batch of `1 - (2 sum(p g) + eps) / (sum p + sum g + eps)`
/// for `(B, ...)` tensors.
pub fn dice_loss(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    if pred.dims() != gt.dims() {
        return Err(Error::ShapeMismatch(format!("dice of {:?} and {:?}", pred.dims(), gt.dims())));
    }
    let b = pred.dim(0)?;
    let p = pred.reshape((b, ()))?;
    let g = gt.reshape((b, ()))?;
    let inter = (p.mul(&g)?.sum(D::Minus1)? * 2.0)?;
    let denom = (p.sum(D::Minus1)? + g.sum(D::Minus1)?)?;
    let ratio = ((inter + DICE_EPS)? / (denom + DICE_EPS)?)?;
    Ok(ratio.affine(-1.0, 1.0)?.mean_all()?)
}

/// Dice loss of two single masks.
pub fn dice_loss_masks(pred: &Mask, gt: &Mask) -> Result<f64> {
    if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
        return Err(Error::ShapeMismatch("dice of masks with different sizes".into()));
    }
    let dev = Device::Cpu;
    let p = pred.to_tensor(DType::F64, &dev)?.unsqueeze(0)?;
    let g = gt.to_tensor(DType::F64, &dev)?.unsqueeze(0)?;
    Ok(dice_loss(&p, &g)?.to_scalar::<f64>()?)
}

/// `mask * edited + (1 - mask) * source`, per pixel.
pub fn blend(source: &Image, edited: &Image, mask: &Mask) -> Result<Image> {
    let (w, h) = (source.width(), source.height());
    if (edited.width(), edited.height()) != (w, h) || (mask.width(), mask.height()) != (w, h) {
        return Err(Error::ShapeMismatch("blend inputs differ in size".into()));
    }
    let data = source
        .data()
        .iter()
        .zip(edited.data())
        .enumerate()
        .map(|(i, (&s, &e))| {
            let m = mask.data()[i / 3];
            m * e + (1.0 - m) * s
        })
        .collect();
    Image::new(w, h, data)
}

fn snap(v: f32) -> f32 {
    if v < MASK_SNAP {
        0.0
    } else if v > 1.0 - MASK_SNAP {
        1.0
    } else {
        v
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: EditorConfig,
    words: Vec<String>,
}

pub struct EditorModel {
    pub config: EditorConfig,
    /// Instruction words; id 0 is reserved for unknown and padding.
    words: Vec<String>,
    schedule: DiffusionSchedule,
    params: ParamStore,
    unet: UNet,
}

/// One precomputed conditioning bundle, in signed pixel space.
struct Inputs {
    source: Tensor,
    cond: Tensor,
    words: Vec<u32>,
}

impl EditorModel {
    pub fn new<R: Rng + ?Sized>(config: EditorConfig, words: Vec<String>, dtype: DType, rng: &mut R) -> Result<Self> {
        let schedule = DiffusionSchedule::new(&config.schedule)?;
        if !config.image_size.is_multiple_of(8) || config.image_size < 16 {
            return Err(Error::Config(format!("editor resolution {} must be a multiple of 8", config.image_size)));
        }
        let mut params = ParamStore::new(dtype);
        let unet = UNet::new(&mut params, &config.unet, words.len() + 1, rng)?;
        Ok(Self { config, words, schedule, params, unet })
    }

    /// Word list over the caption grammar and a corpus of instructions.
    pub fn vocabulary<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Vec<String> {
        let mut words: Vec<String> = grammar_words()
            .into_iter()
            .map(str::to_string)
            .chain(corpus.into_iter().flat_map(|t| split_words(t).into_iter().map(str::to_string).collect::<Vec<_>>()))
            .collect();
        words.sort();
        words.dedup();
        words
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    fn dtype(&self) -> DType {
        self.params.dtype()
    }

    fn word_ids(&self, instruction: &str) -> Vec<u32> {
        split_words(instruction)
            .into_iter()
            .map(|w| self.words.binary_search_by(|x| x.as_str().cmp(w)).map_or(0, |i| i as u32 + 1))
            .collect()
    }

    fn inputs(&self, source: &Image, instruction: &str, condition: &EditCondition) -> Result<Inputs> {
        let s = self.config.image_size;
        if (source.width(), source.height()) != (s, s) {
            return Err(Error::Resolution { expected: s, width: source.width(), height: source.height() });
        }
        let cond = match (condition, self.config.conditioning) {
            (EditCondition::Box(b), Conditioning::Box) => box_channel(b, s, s),
            (EditCondition::Touch(t), Conditioning::TouchMask) => {
                render_touch_mask(s, s, &t.to_normalized(s, s)?, self.config.touch_mask_size)?
            }
            _ => {
                return Err(Error::Config(format!(
                    "a {:?}-conditioned editor cannot take {condition:?}",
                    self.config.conditioning
                )))
            }
        };
        Ok(Inputs {
            source: source.to_chw_tensor(true, self.dtype(), self.params.device())?,
            cond: cond.to_tensor(self.dtype(), self.params.device())?,
            words: self.word_ids(instruction),
        })
    }

    fn word_batch(&self, items: &[&Inputs]) -> Result<(Tensor, Tensor)> {
        let len = items.iter().map(|i| i.words.len()).max().unwrap_or(0).max(1);
        let mut ids = vec![0u32; items.len() * len];
        let mut weights = vec![0f32; items.len() * len];
        for (r, item) in items.iter().enumerate() {
            let n = item.words.len().max(1) as f32;
            for (k, &w) in item.words.iter().enumerate() {
                ids[r * len + k] = w;
                weights[r * len + k] = 1.0 / n;
            }
        }
        let dev = self.params.device();
        Ok((
            Tensor::from_vec(ids, (items.len(), len), dev)?,
            Tensor::from_vec(weights, (items.len(), len), dev)?.to_dtype(self.dtype())?,
        ))
    }

    /// Noise prediction `(B, 3, S, S)` and mask logits `(B, 1, S, S)`.
    fn predict(&self, xt: &Tensor, ts: &[usize], items: &[&Inputs]) -> Result<(Tensor, Tensor)> {
        let sources = Tensor::stack(&items.iter().map(|i| &i.source).collect::<Vec<_>>(), 0)?;
        let conds = Tensor::stack(&items.iter().map(|i| &i.cond).collect::<Vec<_>>(), 0)?;
        let x = Tensor::cat(&[xt, &sources, &conds], 1)?;
        let (words, weights) = self.word_batch(items)?;
        let out = self.unet.forward(&x, ts, &words, &weights)?;
        Ok((out.narrow(1, 0, 3)?, out.narrow(1, 3, 1)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta { config: self.config.clone(), words: self.words.clone() };
        save_checkpoint(path, CHECKPOINT_KIND, &config_hash(&self.config)?, &meta, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = load_checkpoint::<CheckpointMeta>(path, CHECKPOINT_KIND)?;
        if ckpt.config_hash != config_hash(&ckpt.meta.config)? {
            return Err(Error::Checkpoint(format!("{}: config hash mismatch", path.display())));
        }
        let model = Self::new(ckpt.meta.config, ckpt.meta.words, DType::F32, &mut seeded(0))?;
        model.params.load(&ckpt.tensors)?;
        Ok(model)
    }
}

fn gaussian(shape: &[usize], rng: &mut impl Rng, dtype: DType) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f32> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditorLossRow {
    pub epoch: usize,
    pub split: &'static str,
    pub mse: f64,
    pub dice: f64,
    pub total: f64,
}

struct TrainItem {
    inputs: Inputs,
    target: Tensor,
    mask: Tensor,
}

pub struct TrainedEditor {
    pub model: EditorModel,
    pub curve: Vec<EditorLossRow>,
}

fn train_items(model: &EditorModel, samples: &[&EditSample]) -> Result<Vec<TrainItem>> {
    let s = model.config.image_size;
    samples
        .iter()
        .map(|smp| {
            let source = smp.source_image.resized(s, s)?;
            let target = smp.target_image.resized(s, s)?;
            let mask = smp.gt_mask.resized_nearest(s, s);
            let condition = match model.config.conditioning {
                Conditioning::Box => EditCondition::Box(smp.gt_bbox),
                Conditioning::TouchMask => {
                    EditCondition::Touch(smp.touch.to_normalized(smp.source_image.width(), smp.source_image.height())?)
                }
            };
            Ok(TrainItem {
                inputs: model.inputs(&source, &smp.instruction, &condition)?,
                target: target.to_chw_tensor(true, model.dtype(), model.params.device())?,
                mask: mask.to_tensor(model.dtype(), model.params.device())?,
            })
        })
        .collect()
}

/// Loss terms of one batch at the given steps and noise.
fn batch_losses(
    model: &EditorModel,
    items: &[&TrainItem],
    ts: &[usize],
    noise: &Tensor,
    lambda: f64,
) -> Result<(Tensor, Tensor, Tensor)> {
    let x0 = Tensor::stack(&items.iter().map(|i| &i.target).collect::<Vec<_>>(), 0)?;
    let gt = Tensor::stack(&items.iter().map(|i| &i.mask).collect::<Vec<_>>(), 0)?;
    let xt = model.schedule.q_sample(&x0, ts, noise)?;
    let inputs: Vec<&Inputs> = items.iter().map(|i| &i.inputs).collect();
    let (eps, logits) = model.predict(&xt, ts, &inputs)?;
    let mse = (eps - noise)?.sqr()?.mean_all()?;
    let dice = dice_loss(&sigmoid(&logits)?, &gt)?;
    let total = if lambda == 0.0 { mse.clone() } else { (&mse + (&dice * lambda)?)? };
    Ok((mse, dice, total))
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Trains a fresh editor: per batch a uniform step in `1..=T` and fresh
/// Gaussian noise per sample; loss `MSE(noise) + lambda * dice`.
pub fn train_editor(
    train: &[&EditSample],
    val: &[&EditSample],
    config: &EditorConfig,
    train_config: &EditorTrainConfig,
    seed: u64,
) -> Result<TrainedEditor> {
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let words = EditorModel::vocabulary(train.iter().map(|s| s.instruction.as_str()));
    let model = EditorModel::new(config.clone(), words, DType::F32, &mut seeded(stage_seed(seed, "editor-init")))?;
    let curve = fit_editor(&model, train, val, train_config, seed)?;
    Ok(TrainedEditor { model, curve })
}

pub fn fit_editor(
    model: &EditorModel,
    train: &[&EditSample],
    val: &[&EditSample],
    cfg: &EditorTrainConfig,
    seed: u64,
) -> Result<Vec<EditorLossRow>> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let train_items = train_items(model, train)?;
    let val_items = train_items_or_empty(model, val)?;
    let mut trainer = Trainer::new(model.params.vars(), cfg.lr, cfg.weight_decay, Some(cfg.grad_clip))?;
    let mut rng = seeded(stage_seed(seed, "editor-train"));
    let s = model.config.image_size as usize;
    let steps = model.schedule.steps();
    let mut curve = Vec::new();
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_items.len()).collect();
        order.shuffle(&mut rng);
        let (mut sm, mut sd, mut st) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let items: Vec<&TrainItem> = chunk.iter().map(|&i| &train_items[i]).collect();
            let ts: Vec<usize> = items.iter().map(|_| rng.random_range(1..=steps)).collect();
            let noise = gaussian(&[items.len(), 3, s, s], &mut rng, model.dtype())?;
            let (mse, dice, total) = batch_losses(model, &items, &ts, &noise, cfg.lambda_dice)?;
            let tv = scalar(&total)?;
            if !tv.is_finite() {
                return Err(Error::Diverged { epoch, loss: tv });
            }
            trainer.step(&total)?;
            let n = items.len() as f64;
            sm += scalar(&mse)? * n;
            sd += scalar(&dice)? * n;
            st += tv * n;
        }
        let n = train_items.len() as f64;
        curve.push(EditorLossRow { epoch, split: "train", mse: sm / n, dice: sd / n, total: st / n });
        if !val_items.is_empty() {
            // Fixed steps and noise so validation losses are comparable across epochs.
            let mut vrng = seeded(stage_seed(seed, "editor-val"));
            let (mut vm, mut vd, mut vt) = (0.0, 0.0, 0.0);
            for chunk in val_items.chunks(cfg.batch_size) {
                let items: Vec<&TrainItem> = chunk.iter().collect();
                let ts: Vec<usize> = items.iter().map(|_| vrng.random_range(1..=steps)).collect();
                let noise = gaussian(&[items.len(), 3, s, s], &mut vrng, model.dtype())?;
                let (mse, dice, total) = batch_losses(model, &items, &ts, &noise, cfg.lambda_dice)?;
                let n = items.len() as f64;
                vm += scalar(&mse)? * n;
                vd += scalar(&dice)? * n;
                vt += scalar(&total)? * n;
            }
            if !vt.is_finite() {
                return Err(Error::Diverged { epoch, loss: vt });
            }
            let n = val_items.len() as f64;
            curve.push(EditorLossRow { epoch, split: "val", mse: vm / n, dice: vd / n, total: vt / n });
        }
        tracing::info!(epoch, mse = sm / n, dice = sd / n, "editor epoch");
    }
    Ok(curve)
}

fn train_items_or_empty(model: &EditorModel, samples: &[&EditSample]) -> Result<Vec<TrainItem>> {
    if samples.is_empty() {
        Ok(Vec::new())
    } else {
        train_items(model, samples)
    }
}

/// Noise-prediction MSE of the model against pure-noise targets at step T.
pub fn pure_noise_mse(model: &EditorModel, samples: &[&EditSample], seed: u64) -> Result<f64> {
    let items = train_items(model, samples)?;
    let refs: Vec<&TrainItem> = items.iter().collect();
    let s = model.config.image_size as usize;
    let mut rng = seeded(seed);
    let noise = gaussian(&[refs.len(), 3, s, s], &mut rng, model.dtype())?;
    let ts = vec![model.schedule.steps(); refs.len()];
    scalar(&batch_losses(model, &refs, &ts, &noise, 0.0)?.0)
}

pub fn write_editor_loss_csv(rows: &[EditorLossRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "split", "mse", "dice", "total"])?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.split.to_string(),
            format!("{:.6}", r.mse),
            format!("{:.6}", r.dice),
            format!("{:.6}", r.total),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One editing request at any resolution.
#[derive(Debug, Clone)]
pub struct EditRequest<'a> {
    pub source: &'a Image,
    pub instruction: &'a str,
    pub condition: EditCondition,
    pub seed: u64,
}

/// Ancestral sampling for a batch of requests. Each request draws its noise
/// from its own seed, so results do not depend on batching. The model runs
/// at its own resolution; output and mask are resized back and blended
/// onto the original source.
pub fn sample_edits(model: &EditorModel, requests: &[EditRequest<'_>]) -> Result<Vec<EditResult>> {
    let s = model.config.image_size;
    let su = s as usize;
    let dtype = model.dtype();
    let mut inputs = Vec::with_capacity(requests.len());
    for r in requests {
        let small = r.source.resized(s, s)?;
        let condition = match r.condition {
            EditCondition::Touch(t) => EditCondition::Touch(t.to_normalized(r.source.width(), r.source.height())?),
            c => c,
        };
        inputs.push(model.inputs(&small, r.instruction, &condition)?);
    }
    let refs: Vec<&Inputs> = inputs.iter().collect();
    let mut rngs: Vec<_> = requests.iter().map(|r| seeded(child_seed(r.seed, 0))).collect();
    let draw = |rngs: &mut Vec<crate::rng::StdRng>| -> Result<Tensor> {
        let parts = rngs.iter_mut().map(|g| gaussian(&[3, su, su], g, dtype)).collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&parts, 0)?)
    };
    let mut x = draw(&mut rngs)?;
    let mut logits = None;
    for t in (1..=model.schedule.steps()).rev() {
        let ts = vec![t; requests.len()];
        let (eps, lg) = model.predict(&x, &ts, &refs)?;
        let (eps, lg) = (eps.detach(), lg.detach());
        let x0 = model.schedule.predict_x0(&x, &ts, &eps)?.clamp(-1.0, 1.0)?;
        let (c0, ct, sigma) = model.schedule.posterior(t);
        let mean = ((x0 * c0)? + (&x * ct)?)?;
        x = if t > 1 { (mean + (draw(&mut rngs)? * sigma)?)? } else { mean };
        logits = Some(lg);
    }
    let probs = sigmoid(&logits.expect("at least one step"))?;
    requests
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let edited = Image::from_chw_tensor(&x.get(i)?, true)?.resized(r.source.width(), r.source.height())?;
            let m: Vec<f32> = probs.get(i)?.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
            let mask = resize_mask_bilinear(&Mask::new(s, s, m)?, r.source.width(), r.source.height())?;
            let mask = Mask::new(mask.width(), mask.height(), mask.data().iter().map(|&v| snap(v)).collect())?;
            let blended = blend(r.source, &edited, &mask)?;
            Ok(EditResult { edited_image: edited, instance_mask: mask, blended_image: blended })
        })
        .collect()
}

fn resize_mask_bilinear(mask: &Mask, width: u32, height: u32) -> Result<Mask> {
    if (width, height) == (mask.width(), mask.height()) {
        return Ok(mask.clone());
    }
    let rgb: Vec<f32> = mask.data().iter().flat_map(|&v| [v, v, v]).collect();
    let up = Image::new(mask.width(), mask.height(), rgb)?.resized(width, height)?;
    Mask::new(width, height, up.data().chunks_exact(3).map(|p| p[0]).collect())
}

/// Edits inside `bbox` with a box-conditioned editor.
pub fn sample_edit(
    model: &EditorModel,
    source: &Image,
    instruction: &str,
    bbox: &NormalizedBBox,
    seed: u64,
) -> Result<EditResult> {
    let req = EditRequest { source, instruction, condition: EditCondition::Box(*bbox), seed };
    Ok(sample_edits(model, &[req])?.remove(0))
}

/// Edits around `touch` with a touch-mask-conditioned editor.
pub fn sample_edit_touch_ablation(
    model: &EditorModel,
    source: &Image,
    instruction: &str,
    touch: &TouchPoint,
    seed: u64,
) -> Result<EditResult> {
    let req = EditRequest { source, instruction, condition: EditCondition::Touch(*touch), seed };
    Ok(sample_edits(model, &[req])?.remove(0))
}
