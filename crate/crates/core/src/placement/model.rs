//! Patch-embedding vision stand-in and a causal transformer decoder over
//! `[image patches, prompt, BOS, response]`.

use candle_core::{DType, Device, IndexOp, Tensor, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{Axis, Role, TokenSequence, Vocabulary, PAD};
use crate::error::{Error, Result};
use crate::geometry::SizeStats;
use crate::image::Image;
use crate::nn::{Init, LayerNorm, Linear, ParamStore};
use crate::touchprior::MarkerSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlacementConfig {
    pub image_size: u32,
    pub patch_size: u32,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub context: usize,
    pub max_new_tokens: usize,
    pub marker: MarkerSpec,
    /// When false the response is coordinates only (reasoning ablation).
    pub reasoning: bool,
    /// Append the quantised touch as X/Y coordinate tokens to the prompt.
    pub touch_tokens: bool,
}

impl Default for PlacementConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            dim: 128,
            layers: 4,
            heads: 4,
            mlp_ratio: 4,
            context: 256,
            max_new_tokens: 48,
            marker: MarkerSpec::default(),
            reasoning: true,
            touch_tokens: true,
        }
    }
}

impl PlacementConfig {
    pub fn num_patches(&self) -> usize {
        let n = (self.image_size / self.patch_size) as usize;
        n * n
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!("patch size {} does not tile {}", self.patch_size, self.image_size));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) || !(self.dim / self.heads).is_multiple_of(2) {
            return bad(format!("dim {} not divisible into {} even-width heads", self.dim, self.heads));
        }
        if !self.dim.is_multiple_of(4) {
            return bad(format!("dim {} must be a multiple of 4", self.dim));
        }
        if self.layers == 0 || self.mlp_ratio == 0 {
            return bad("layers and mlp_ratio must be positive".into());
        }
        if self.context <= self.num_patches() + self.max_new_tokens {
            return bad(format!(
                "context {} cannot hold {} patches plus {} generated tokens",
                self.context,
                self.num_patches(),
                self.max_new_tokens
            ));
        }
        self.marker.validate()
    }
}

/// Fixed 2D sine-cosine features of patch grid positions, `(n*n, dim)`.
fn patch_positions(n: usize, dim: usize) -> Vec<f32> {
    let quarter = dim / 4;
    let mut out = Vec::with_capacity(n * n * dim);
    for row in 0..n {
        for col in 0..n {
            for pos in [col, row] {
                for i in 0..quarter {
                    let freq = 1.0 / 100f64.powf(i as f64 / quarter as f64);
                    out.push((pos as f64 * freq).sin() as f32);
                }
                for i in 0..quarter {
                    let freq = 1.0 / 100f64.powf(i as f64 / quarter as f64);
                    out.push((pos as f64 * freq).cos() as f32);
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Per-layer keys and values of everything already decoded.
#[derive(Debug, Clone, Default)]
pub struct KvCache {
    layers: Vec<Option<(Tensor, Tensor)>>,
    len: usize,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

pub struct PlacementModel {
    pub config: PlacementConfig,
    pub vocab: Vocabulary,
    /// Training-set box sizes, used for the fallback box.
    pub size_stats: SizeStats,
    params: ParamStore,
    patch_embed: Linear,
    patch_pos: Tensor,
    tok_emb: Tensor,
    pos_emb: Tensor,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
}

impl PlacementModel {
    pub fn new<R: Rng + ?Sized>(
        config: PlacementConfig,
        vocab: Vocabulary,
        size_stats: SizeStats,
        dtype: DType,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        size_stats.validate()?;
        let mut ps = ParamStore::new(dtype);
        let d = config.dim;
        let patch_in = 3 * (config.patch_size * config.patch_size) as usize;
        let patch_embed = Linear::new(&mut ps, "patch_embed", patch_in, d, true, rng)?;
        let grid = (config.image_size / config.patch_size) as usize;
        let patch_pos = Tensor::from_vec(patch_positions(grid, d), (grid * grid, d), ps.device())?.to_dtype(dtype)?;
        let tok_emb = ps.init("tok_emb", &[vocab.len(), d], Init::Normal(0.02), rng)?;
        let pos_emb = ps.init("pos_emb", &[config.context, d], Init::Normal(0.02), rng)?;
        let resid_std = (1.0 / d as f64).sqrt() / (2.0 * config.layers as f64).sqrt();
        let hidden = d * config.mlp_ratio;
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("blocks.{l}");
            blocks.push(Block {
                ln1: LayerNorm::new(&mut ps, &format!("{p}.ln1"), d, rng)?,
                qkv: Linear::new(&mut ps, &format!("{p}.qkv"), d, 3 * d, true, rng)?,
                proj: Linear::with_std(&mut ps, &format!("{p}.proj"), d, d, true, resid_std, rng)?,
                ln2: LayerNorm::new(&mut ps, &format!("{p}.ln2"), d, rng)?,
                fc1: Linear::new(&mut ps, &format!("{p}.fc1"), d, hidden, true, rng)?,
                fc2: Linear::with_std(
                    &mut ps,
                    &format!("{p}.fc2"),
                    hidden,
                    d,
                    true,
                    (1.0 / hidden as f64).sqrt() / (2.0 * config.layers as f64).sqrt(),
                    rng,
                )?,
            });
        }
        let ln_f = LayerNorm::new(&mut ps, "ln_f", d, rng)?;
        let head = Linear::with_std(&mut ps, "head", d, vocab.len(), true, 0.02, rng)?;
        let model = Self {
            config,
            vocab,
            size_stats,
            params: ps,
            patch_embed,
            patch_pos,
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
            head,
        };
        model.init_coordinate_rows()?;
        Ok(model)
    }

    /// Gives each coordinate token's input embedding and output row smooth
    /// sine-cosine features of its bin centre, so neighbouring bins start
    /// out similar.
    fn init_coordinate_rows(&self) -> Result<()> {
        let d = self.config.dim;
        let bins = self.vocab.bins();
        let emb_var = self.params.get("tok_emb").expect("defined in new");
        let head_var = self.params.get("head.weight").expect("defined in new");
        let mut emb: Vec<f64> = emb_var.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let mut head: Vec<f64> = head_var.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let v = self.vocab.len();
        let half = d / 2;
        for axis in Axis::ALL {
            for bin in 0..bins {
                let id = self.vocab.coord_token(axis, bin)? as usize;
                let pos = (bin as f64 + 0.5) / bins as f64;
                for i in 0..half {
                    let freq = std::f64::consts::PI * (1 + i % 8) as f64;
                    let phase = (axis as usize) as f64 * 0.25;
                    let (s, c) = ((pos * freq + phase).sin(), (pos * freq + phase).cos());
                    emb[id * d + 2 * i] = 0.05 * s;
                    emb[id * d + 2 * i + 1] = 0.05 * c;
                    head[(2 * i) * v + id] = 0.05 * s;
                    head[(2 * i + 1) * v + id] = 0.05 * c;
                }
            }
        }
        let dtype = self.params.dtype();
        emb_var.set(&Tensor::from_vec(emb, emb_var.dims(), self.params.device())?.to_dtype(dtype)?)?;
        head_var.set(&Tensor::from_vec(head, head_var.dims(), self.params.device())?.to_dtype(dtype)?)?;
        Ok(())
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    fn device(&self) -> &Device {
        self.params.device()
    }

    /// `(B, 3, S, S)` batch of composites mapped to `[-1, 1]`.
    pub fn image_batch(&self, composites: &[&Image]) -> Result<Tensor> {
        let s = self.config.image_size;
        let ts = composites
            .iter()
            .map(|img| {
                if (img.width(), img.height()) != (s, s) {
                    return Err(Error::Resolution { expected: s, width: img.width(), height: img.height() });
                }
                img.to_chw_tensor(true, self.dtype(), self.device())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&ts, 0)?)
    }

    /// Patch features `(B, P, D)`: linear projection of each patch plus fixed
    /// 2D position features.
    pub fn vision_embed_batch(&self, images: &Tensor) -> Result<Tensor> {
        let (b, _, s, _) = images.dims4()?;
        let p = self.config.patch_size as usize;
        let g = s / p;
        let patches = images.reshape((b, 3, g, p, g, p))?.permute((0, 2, 4, 1, 3, 5))?.contiguous()?.reshape((
            b,
            g * g,
            3 * p * p,
        ))?;
        Ok(self.patch_embed.forward(&patches)?.broadcast_add(&self.patch_pos)?)
    }

    /// Patch features `(P, D)` of one composite at model resolution.
    pub fn vision_embed(&self, composite: &Image) -> Result<Tensor> {
        Ok(self.vision_embed_batch(&self.image_batch(&[composite])?)?.squeeze(0)?)
    }

    fn attention(&self, block: &Block, x: &Tensor, layer: usize, cache: Option<&mut KvCache>) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let h = self.config.heads;
        let dh = d / h;
        let qkv = block.qkv.forward(x)?.reshape((b, t, 3, h, dh))?.permute((2, 0, 3, 1, 4))?;
        let q = qkv.i(0)?.contiguous()?;
        let mut k = qkv.i(1)?.contiguous()?;
        let mut v = qkv.i(2)?.contiguous()?;
        let offset = match cache {
            Some(cache) => {
                let offset = cache.len;
                if cache.layers.len() <= layer {
                    cache.layers.resize(layer + 1, None);
                }
                if let Some((pk, pv)) = &cache.layers[layer] {
                    k = Tensor::cat(&[pk, &k], 2)?;
                    v = Tensor::cat(&[pv, &v], 2)?;
                }
                cache.layers[layer] = Some((k.detach(), v.detach()));
                offset
            }
            None => 0,
        };
        let total = offset + t;
        let scores = (q.matmul(&k.t()?)? * (1.0 / (dh as f64).sqrt()))?;
        let mask: Vec<f32> = (0..t)
            .flat_map(|i| (0..total).map(move |j| if j <= offset + i { 0.0 } else { f32::NEG_INFINITY }))
            .collect();
        let mask = Tensor::from_vec(mask, (t, total), self.device())?.to_dtype(self.dtype())?;
        let probs = candle_nn::ops::softmax(&scores.broadcast_add(&mask)?, D::Minus1)?;
        let out = probs.matmul(&v)?.permute((0, 2, 1, 3))?.contiguous()?.reshape((b, t, d))?;
        block.proj.forward(&out)
    }

    /// Runs the decoder over embeddings `(B, T, D)` placed after the cached
    /// prefix and returns logits `(B, T, V)`.
    fn decode(&self, x: &Tensor, mut cache: Option<&mut KvCache>) -> Result<Tensor> {
        let t = x.dim(1)?;
        let offset = cache.as_ref().map_or(0, |c| c.len);
        if offset + t > self.config.context {
            return Err(Error::ContextOverflow { len: offset + t, context: self.config.context });
        }
        let mut x = x.broadcast_add(&self.pos_emb.narrow(0, offset, t)?)?;
        for (l, block) in self.blocks.iter().enumerate() {
            let a = self.attention(block, &block.ln1.forward(&x)?, l, cache.as_deref_mut())?;
            x = (x + a)?;
            let m = block.fc2.forward(&block.fc1.forward(&block.ln2.forward(&x)?)?.gelu()?)?;
            x = (x + m)?;
        }
        if let Some(c) = cache {
            c.len += t;
        }
        self.head.forward(&self.ln_f.forward(&x)?)
    }

    fn embed_tokens(&self, ids: &Tensor) -> Result<Tensor> {
        let (b, t) = ids.dims2()?;
        Ok(self.tok_emb.embedding(&ids.flatten_all()?)?.reshape((b, t, self.config.dim))?)
    }

    /// Logits `(B, P + T, V)` over patch features followed by token ids `(B, T)`.
    pub fn forward(&self, images: &Tensor, ids: &Tensor, cache: Option<&mut KvCache>) -> Result<Tensor> {
        let feats = self.vision_embed_batch(images)?;
        let x = Tensor::cat(&[&feats, &self.embed_tokens(ids)?], 1)?;
        self.decode(&x, cache)
    }

    /// Logits `(B, T, V)` for further tokens appended after a cached prefix.
    pub fn forward_tokens(&self, ids: &Tensor, cache: &mut KvCache) -> Result<Tensor> {
        self.decode(&self.embed_tokens(ids)?, Some(cache))
    }

    /// Teacher-forced inputs, targets and loss weights for a batch of
    /// `(prompt-with-BOS, response)` pairs, right-padded.
    pub fn build_batch(&self, pairs: &[(&TokenSequence, &TokenSequence)]) -> Result<(Tensor, Tensor, Tensor)> {
        let patches = self.config.num_patches();
        let max_len = pairs.iter().map(|(p, r)| p.len() + r.len() - 1).max().unwrap_or(0);
        if patches + max_len > self.config.context {
            return Err(Error::ContextOverflow { len: patches + max_len, context: self.config.context });
        }
        let b = pairs.len();
        let mut inputs = vec![PAD; b * max_len];
        let mut targets = vec![PAD; b * (patches + max_len)];
        let mut weights = vec![0f32; b * (patches + max_len)];
        for (row, (prompt, response)) in pairs.iter().enumerate() {
            if response.roles.contains(&Role::Prompt) {
                return Err(Error::Config("response contains prompt tokens".into()));
            }
            let seq: Vec<u32> = prompt.ids.iter().chain(&response.ids).copied().collect();
            for (i, &id) in seq[..seq.len() - 1].iter().enumerate() {
                inputs[row * max_len + i] = id;
            }
            // Logit at sequence position i (after the patches) predicts seq[i + 1].
            let base = row * (patches + max_len) + patches;
            for i in 0..seq.len() - 1 {
                targets[base + i] = seq[i + 1];
                if i + 1 >= prompt.len() {
                    weights[base + i] = 1.0;
                }
            }
        }
        let dev = self.device();
        Ok((
            Tensor::from_vec(inputs, (b, max_len), dev)?,
            Tensor::from_vec(targets, (b, patches + max_len), dev)?,
            Tensor::from_vec(weights, (b, patches + max_len), dev)?.to_dtype(self.dtype())?,
        ))
    }

    /// Mean response-token NLL of a batch.
    pub fn batch_loss(&self, images: &Tensor, pairs: &[(&TokenSequence, &TokenSequence)]) -> Result<Tensor> {
        let (inputs, targets, weights) = self.build_batch(pairs)?;
        let logits = self.forward(images, &inputs, None)?;
        sequence_nll(&logits, &targets, &weights)
    }

    /// Autoregressive LM loss of `response` given a composite and a prompt
    /// (ending in BOS): mean NLL over response positions only.
    pub fn lm_loss(&self, composite: &Image, prompt: &TokenSequence, response: &TokenSequence) -> Result<Tensor> {
        self.batch_loss(&self.image_batch(&[composite])?, &[(prompt, response)])
    }

    /// Greedy decoding with a key/value cache. Returns the generated ids,
    /// stopping after EOS, `max_new_tokens` or a full context.
    pub fn generate(&self, composite: &Image, prompt: &TokenSequence) -> Result<Vec<u32>> {
        let mut cache = KvCache::default();
        let ids = Tensor::from_vec(prompt.ids.clone(), (1, prompt.len()), self.device())?;
        let logits = self.forward(&self.image_batch(&[composite])?, &ids, Some(&mut cache))?;
        let mut next = argmax_last(&logits)?;
        let mut out = Vec::new();
        loop {
            out.push(next);
            if next == super::vocab::EOS || out.len() >= self.config.max_new_tokens || cache.len >= self.config.context
            {
                break;
            }
            let ids = Tensor::from_vec(vec![next], (1, 1), self.device())?;
            next = argmax_last(&self.forward_tokens(&ids, &mut cache)?)?;
        }
        Ok(out)
    }
}

fn argmax_last(logits: &Tensor) -> Result<u32> {
    let t = logits.dim(1)?;
    let row: Vec<f32> = logits.i((0, t - 1))?.to_dtype(DType::F32)?.to_vec1()?;
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    Ok(best as u32)
}

/// `sum(w * -log softmax(logits)[target]) / sum(w)` over `(B, T)` positions.
pub fn sequence_nll(logits: &Tensor, targets: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let logp = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    let picked = logp.gather(&targets.unsqueeze(D::Minus1)?.contiguous()?, D::Minus1)?.squeeze(D::Minus1)?;
    let total = weights.sum_all()?;
    Ok((picked * weights)?.sum_all()?.neg()?.div(&total)?)
}
