//! Small neural-network toolkit on top of candle: a named parameter store
//! with seeded initialisation, the handful of layers the two models use, and
//! the single-file checkpoint container.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

/// Parameters keyed by dotted path, iterated in name order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self { dtype, device: Device::Cpu, vars: BTreeMap::new() }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn init<R: Rng + ?Sized>(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut R) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                (0..n).map(|_| dist.sample(rng)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        if self.vars.insert(name.to_string(), var).is_some() {
            return Err(Error::Config(format!("parameter '{name}' defined twice")));
        }
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn named(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites every parameter from `tensors`; names and shapes must match.
    pub fn load(&self, tensors: &BTreeMap<String, (Vec<usize>, Vec<f32>)>) -> Result<()> {
        if tensors.len() != self.vars.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                tensors.len(),
                self.vars.len()
            )));
        }
        for (name, var) in &self.vars {
            let (shape, data) =
                tensors.get(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))?;
            if shape.as_slice() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}' has shape {shape:?}, model expects {:?}",
                    var.dims()
                )));
            }
            let t = Tensor::from_vec(data.clone(), shape.as_slice(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Result<BTreeMap<String, (Vec<usize>, Vec<f32>)>> {
        self.vars
            .iter()
            .map(|(name, var)| {
                let data = var.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
                Ok((name.clone(), (var.dims().to_vec(), data)))
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Self::with_std(store, name, in_dim, out_dim, bias, (1.0 / in_dim as f64).sqrt(), rng)
    }

    pub fn with_std<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let init = if std == 0.0 { Init::Zeros } else { Init::Normal(std) };
        let weight = store.init(&format!("{name}.weight"), &[in_dim, out_dim], init, rng)?;
        let bias = if bias { Some(store.init(&format!("{name}.bias"), &[out_dim], Init::Zeros, rng)?) } else { None };
        Ok(Self { weight, bias })
    }

    /// Applies to the last dimension of any-rank input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().expect("rank >= 1");
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let mut y = x.reshape((rows, in_dim))?.matmul(&self.weight)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().expect("rank >= 1") = self.weight.dim(1)?;
        Ok(y.reshape(out_dims)?)
    }
}

/// Layer normalisation over the last dimension, built from differentiable
/// primitives.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            gamma: store.init(&format!("{name}.gamma"), &[dim], Init::Ones, rng)?,
            beta: store.init(&format!("{name}.beta"), &[dim], Init::Zeros, rng)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Group normalisation for `(B, C, H, W)` maps.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    groups: usize,
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl GroupNorm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        groups: usize,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if !channels.is_multiple_of(groups) {
            return Err(Error::Config(format!("{channels} channels not divisible into {groups} groups")));
        }
        Ok(Self {
            groups,
            gamma: store.init(&format!("{name}.gamma"), &[1, channels, 1, 1], Init::Ones, rng)?,
            beta: store.init(&format!("{name}.beta"), &[1, channels, 1, 1], Init::Zeros, rng)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let g = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(D::Minus1)?;
        let centered = g.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?.reshape((b, c, h, w))?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    padding: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        std_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let std = std_scale * (1.0 / fan_in).sqrt();
        let init = if std == 0.0 { Init::Zeros } else { Init::Normal(std) };
        Ok(Self {
            weight: store.init(&format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], init, rng)?,
            bias: store.init(&format!("{name}.bias"), &[1, out_ch, 1, 1], Init::Zeros, rng)?,
            padding: kernel / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, k, _) = self.weight.dims4()?;
        let y = if k == 1 {
            // 1x1 convolutions as a channel matmul.
            let (b, c, h, w) = x.dims4()?;
            let out = self.weight.dim(0)?;
            let flat = x.reshape((b, c, h * w))?;
            let wt = self.weight.reshape((out, c))?;
            wt.broadcast_matmul(&flat)?.reshape((b, out, h, w))?
        } else {
            x.conv2d(&self.weight, self.padding, 1, 1, 1)?
        };
        Ok(y.broadcast_add(&self.bias)?)
    }
}

/// `(B, C, H, W) -> (B, C * f * f, H / f, W / f)`.
pub fn space_to_depth(x: &Tensor, f: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h / f, f, w / f, f))?.permute((0, 1, 3, 5, 2, 4))?.reshape((b, c * f * f, h / f, w / f))?)
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space(x: &Tensor, f: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let oc = c / (f * f);
    Ok(x.reshape((b, oc, f, f, h, w))?.permute((0, 1, 4, 2, 5, 3))?.reshape((b, oc, h * f, w * f))?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// Sinusoidal features of a scalar position (used for diffusion time).
pub fn sinusoidal_embedding(positions: &[f64], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(positions.len() * dim);
    for &p in positions {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((p * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((p * freq).cos());
        }
    }
    Ok(Tensor::from_vec(data, (positions.len(), 2 * half), device)?.to_dtype(dtype)?)
}

/// AdamW with global-norm gradient clipping.
pub struct Trainer {
    opt: AdamW,
    vars: Vec<Var>,
    clip_norm: Option<f64>,
}

impl Trainer {
    pub fn new(vars: Vec<Var>, lr: f64, weight_decay: f64, clip_norm: Option<f64>) -> Result<Self> {
        let params = ParamsAdamW { lr, weight_decay, ..ParamsAdamW::default() };
        Ok(Self { opt: AdamW::new(vars.clone(), params)?, vars, clip_norm })
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.opt.set_learning_rate(lr);
    }

    pub fn step(&mut self, loss: &Tensor) -> Result<()> {
        let mut grads = loss.backward()?;
        if let Some(max_norm) = self.clip_norm {
            let mut sq = 0f64;
            for v in &self.vars {
                if let Some(g) = grads.get(v) {
                    sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
                }
            }
            let norm = sq.sqrt();
            if norm > max_norm {
                let scale = max_norm / norm;
                for v in &self.vars {
                    if let Some(g) = grads.remove(v) {
                        grads.insert(v, (g * scale)?);
                    }
                }
            }
        }
        self.opt.step(&grads)?;
        Ok(())
    }
}

const MAGIC: &[u8; 8] = b"TEDCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    format_version: u32,
    config_hash: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Hex SHA-256 of the canonical JSON encoding of `config`.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Writes magic, version, JSON header (kind, config hash, metadata such as
/// the vocabulary, tensor table) and little-endian f32 tensor data.
pub fn save_checkpoint<M: Serialize>(
    path: &Path,
    kind: &str,
    config_hash: &str,
    meta: &M,
    params: &ParamStore,
) -> Result<()> {
    let snapshot = params.snapshot()?;
    let mut offset = 0;
    let mut tensors = Vec::with_capacity(snapshot.len());
    for (name, (shape, data)) in &snapshot {
        tensors.push(TensorEntry { name: name.clone(), shape: shape.clone(), offset, len: data.len() });
        offset += data.len();
    }
    let header = Header {
        kind: kind.to_string(),
        format_version: CHECKPOINT_VERSION,
        config_hash: config_hash.to_string(),
        meta: serde_json::to_value(meta)?,
        tensors,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + 4 + 8 + header_bytes.len() + offset * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, data) in snapshot.values() {
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub struct LoadedCheckpoint<M> {
    pub config_hash: String,
    pub meta: M,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

pub fn load_checkpoint<M: DeserializeOwned>(path: &Path, kind: &str) -> Result<LoadedCheckpoint<M>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported format version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + header_len).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    if header.kind != kind {
        return Err(bad(&format!("expected a '{kind}' checkpoint, found '{}'", header.kind)));
    }
    let data = &bytes[20 + header_len..];
    let mut tensors = BTreeMap::new();
    for t in header.tensors {
        let start = t.offset * 4;
        let end = start + t.len * 4;
        let raw = data.get(start..end).ok_or_else(|| bad("truncated tensor data"))?;
        let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        tensors.insert(t.name, (t.shape, values));
    }
    Ok(LoadedCheckpoint { config_hash: header.config_hash, meta: serde_json::from_value(header.meta)?, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn space_depth_round_trip() {
        let x = Tensor::arange(0f32, 2.0 * 3.0 * 8.0 * 8.0, &Device::Cpu).unwrap().reshape((2, 3, 8, 8)).unwrap();
        let y = space_to_depth(&x, 4).unwrap();
        assert_eq!(y.dims(), &[2, 48, 2, 2]);
        let back = depth_to_space(&y, 4).unwrap();
        let diff = (back - &x).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
        // Channel c*16 + i*4 + j of the packed map holds pixel (i, j) of each block.
        let v = y.get(0).unwrap().get(1 * 4 + 2).unwrap().get(1).unwrap().get(0).unwrap();
        let v = v.to_scalar::<f32>().unwrap();
        assert_eq!(v, (4 + 1) as f32 * 8.0 + 2.0);
    }

    #[test]
    fn init_is_seeded() {
        let mut a = ParamStore::new(DType::F32);
        let mut b = ParamStore::new(DType::F32);
        a.init("w", &[4, 4], Init::Normal(1.0), &mut seeded(3)).unwrap();
        b.init("w", &[4, 4], Init::Normal(1.0), &mut seeded(3)).unwrap();
        assert_eq!(a.snapshot().unwrap(), b.snapshot().unwrap());
        assert!(a.init("w", &[1], Init::Zeros, &mut seeded(0)).is_err());
    }

    #[test]
    fn layer_norm_normalises() {
        let mut store = ParamStore::new(DType::F64);
        let ln = LayerNorm::new(&mut store, "ln", 4, &mut seeded(0)).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 4.0]], &Device::Cpu).unwrap();
        let y: Vec<f64> = ln.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        let var: f64 = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn checkpoint_round_trip_and_kind_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut store = ParamStore::new(DType::F32);
        store.init("a.weight", &[3, 2], Init::Normal(1.0), &mut seeded(1)).unwrap();
        store.init("b", &[5], Init::Ones, &mut seeded(1)).unwrap();
        save_checkpoint(&path, "toy", "abc", &vec!["meta"], &store).unwrap();
        let loaded: LoadedCheckpoint<Vec<String>> = load_checkpoint(&path, "toy").unwrap();
        assert_eq!(loaded.meta, vec!["meta".to_string()]);
        assert_eq!(loaded.config_hash, "abc");
        assert_eq!(loaded.tensors, store.snapshot().unwrap());
        assert!(load_checkpoint::<Vec<String>>(&path, "other").is_err());
        std::fs::write(&path, b"garbage").unwrap();
        assert!(load_checkpoint::<Vec<String>>(&path, "toy").is_err());
    }
}
