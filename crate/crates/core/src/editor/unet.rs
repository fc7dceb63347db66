//! Compact UNet over space-to-depth packed maps. The 64x64 input is folded
//! into 4x4 cells, processed at 16x16 and 8x8 with residual blocks and a
//! skip connection, and unfolded into per-pixel features. A full-resolution
//! per-pixel head reads those features next to the raw input and emits noise
//! and mask-logit channels.

use candle_core::{Tensor, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{depth_to_space, sinusoidal_embedding, space_to_depth, Conv2d, GroupNorm, Init, Linear, ParamStore};

pub const IN_CHANNELS: usize = 7;
pub const OUT_CHANNELS: usize = 4;
const FOLD: usize = 4;
/// Per-pixel features handed from the folded trunk to the head.
const HEAD_FEATURES: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub base_channels: usize,
    pub mid_channels: usize,
    pub cond_dim: usize,
    pub groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self { base_channels: 32, mid_channels: 64, cond_dim: 64, groups: 8 }
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    cond: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
}

impl ResBlock {
    fn new<R: Rng + ?Sized>(ps: &mut ParamStore, name: &str, ch: usize, cfg: &UNetConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(ps, &format!("{name}.norm1"), cfg.groups, ch, rng)?,
            conv1: Conv2d::new(ps, &format!("{name}.conv1"), ch, ch, 3, 1.0, rng)?,
            cond: Linear::new(ps, &format!("{name}.cond"), cfg.cond_dim, ch, true, rng)?,
            norm2: GroupNorm::new(ps, &format!("{name}.norm2"), cfg.groups, ch, rng)?,
            conv2: Conv2d::new(ps, &format!("{name}.conv2"), ch, ch, 3, 0.5, rng)?,
        })
    }

    fn forward(&self, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let c = self.cond.forward(cond)?.unsqueeze(D::Minus1)?.unsqueeze(D::Minus1)?;
        let h = h.broadcast_add(&c)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        Ok((x + h)?)
    }
}

#[derive(Debug, Clone)]
pub struct UNet {
    cfg: UNetConfig,
    time_mlp1: Linear,
    time_mlp2: Linear,
    word_emb: Tensor,
    stem: Conv2d,
    down: ResBlock,
    to_mid: Conv2d,
    mid1: ResBlock,
    mid2: ResBlock,
    from_mid: Conv2d,
    merge: Conv2d,
    up: ResBlock,
    out_norm: GroupNorm,
    out: Conv2d,
    head_in: Conv2d,
    head_film: Linear,
    head_mid: Conv2d,
    head_out: Conv2d,
}

impl UNet {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, cfg: &UNetConfig, vocab_len: usize, rng: &mut R) -> Result<Self> {
        let (c1, c2, cd) = (cfg.base_channels, cfg.mid_channels, cfg.cond_dim);
        if c1 % cfg.groups != 0 || c2 % cfg.groups != 0 || cd % 2 != 0 {
            return Err(Error::Config(format!("invalid UNet config {cfg:?}")));
        }
        let folded = IN_CHANNELS * FOLD * FOLD;
        Ok(Self {
            cfg: cfg.clone(),
            time_mlp1: Linear::new(ps, "time.fc1", cd, cd, true, rng)?,
            time_mlp2: Linear::new(ps, "time.fc2", cd, cd, true, rng)?,
            word_emb: ps.init("words", &[vocab_len, cd], Init::Normal(1.0), rng)?,
            stem: Conv2d::new(ps, "stem", folded, c1, 1, 1.0, rng)?,
            down: ResBlock::new(ps, "down", c1, cfg, rng)?,
            to_mid: Conv2d::new(ps, "to_mid", c1 * 4, c2, 1, 1.0, rng)?,
            mid1: ResBlock::new(ps, "mid1", c2, cfg, rng)?,
            mid2: ResBlock::new(ps, "mid2", c2, cfg, rng)?,
            from_mid: Conv2d::new(ps, "from_mid", c2, c1 * 4, 1, 1.0, rng)?,
            merge: Conv2d::new(ps, "merge", c1 * 2, c1, 1, 1.0, rng)?,
            up: ResBlock::new(ps, "up", c1, cfg, rng)?,
            out_norm: GroupNorm::new(ps, "out_norm", cfg.groups, c1, rng)?,
            out: Conv2d::new(ps, "out", c1, HEAD_FEATURES * FOLD * FOLD, 1, 1.0, rng)?,
            head_in: Conv2d::new(ps, "head.in", IN_CHANNELS + HEAD_FEATURES, c1, 1, 1.0, rng)?,
            head_film: Linear::new(ps, "head.film", cd, 2 * c1, true, rng)?,
            head_mid: Conv2d::new(ps, "head.mid", c1, c1, 1, 1.0, rng)?,
            // Zero output layer: a fresh model predicts zero noise and mask logit 0.
            head_out: Conv2d::new(ps, "head.out", c1, OUT_CHANNELS, 1, 0.0, rng)?,
        })
    }

    /// Conditioning vector from diffusion steps and padded word ids with
    /// per-row counts (mean bag of words).
    fn conditioning(&self, ts: &[usize], words: &Tensor, counts: &Tensor, x: &Tensor) -> Result<Tensor> {
        let pos: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
        let temb = sinusoidal_embedding(&pos, self.cfg.cond_dim, x.dtype(), x.device())?;
        let temb = self.time_mlp2.forward(&self.time_mlp1.forward(&temb)?.silu()?)?;
        let (b, l) = words.dims2()?;
        let wemb = self.word_emb.embedding(&words.flatten_all()?)?.reshape((b, l, self.cfg.cond_dim))?;
        // Padding ids point at row 0, whose weight is zeroed through `counts`.
        let bag = wemb.broadcast_mul(&counts.unsqueeze(D::Minus1)?)?.sum(1)?;
        Ok((temb + bag)?.silu()?)
    }

    /// `x`: `(B, 7, S, S)`; `counts`: `(B, L)` weights summing to one per
    /// row. Returns `(B, 4, S, S)`: three noise channels and a mask logit.
    pub fn forward(&self, x: &Tensor, ts: &[usize], words: &Tensor, counts: &Tensor) -> Result<Tensor> {
        let cond = self.conditioning(ts, words, counts, x)?;
        let h0 = self.stem.forward(&space_to_depth(x, FOLD)?)?;
        let h1 = self.down.forward(&h0, &cond)?;
        let m = self.to_mid.forward(&space_to_depth(&h1, 2)?)?;
        let m = self.mid2.forward(&self.mid1.forward(&m, &cond)?, &cond)?;
        let u = depth_to_space(&self.from_mid.forward(&m)?, 2)?;
        let u = self.merge.forward(&Tensor::cat(&[&u, &h1], 1)?)?;
        let u = self.up.forward(&u, &cond)?;
        let o = self.out.forward(&self.out_norm.forward(&u)?.silu()?)?;
        let feats = depth_to_space(&o, FOLD)?;
        let h = self.head_in.forward(&Tensor::cat(&[x, &feats], 1)?)?;
        let film = self.head_film.forward(&cond)?.unsqueeze(D::Minus1)?.unsqueeze(D::Minus1)?;
        let c1 = self.cfg.base_channels;
        let (scale, shift) = (film.narrow(1, 0, c1)?, film.narrow(1, c1, c1)?);
        let h = h.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(&shift)?.silu()?;
        let h = self.head_mid.forward(&h)?.silu()?;
        self.head_out.forward(&h)
    }
}
