//! Linear-beta DDPM schedule with steps `1..=T`; step 0 is the clean image.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    /// The usual 1e-4..0.02 over 1000 steps, rescaled to 200 steps.
    fn default() -> Self {
        Self { steps: 200, beta_start: 5e-4, beta_end: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(cfg: &ScheduleConfig) -> Result<Self> {
        let ok = cfg.steps >= 1 && cfg.beta_start > 0.0 && cfg.beta_end < 1.0 && cfg.beta_start <= cfg.beta_end;
        if !ok || (cfg.steps > 1 && cfg.beta_start == cfg.beta_end) {
            return Err(Error::Config(format!("invalid diffusion schedule {cfg:?}")));
        }
        let n = cfg.steps;
        // Index 0 is the noiseless boundary.
        let mut betas = vec![0.0];
        for i in 0..n {
            let frac = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
            betas.push(cfg.beta_start + frac * (cfg.beta_end - cfg.beta_start));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(n + 1);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alphas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len() - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// `sqrt(ab_t) * x0 + sqrt(1 - ab_t) * noise` with per-sample steps.
    pub fn q_sample(&self, x0: &Tensor, ts: &[usize], noise: &Tensor) -> Result<Tensor> {
        let a = self.per_sample(ts, x0, |t| self.alpha_bar(t).sqrt())?;
        let b = self.per_sample(ts, x0, |t| (1.0 - self.alpha_bar(t)).sqrt())?;
        Ok((x0.broadcast_mul(&a)? + noise.broadcast_mul(&b)?)?)
    }

    /// Inverts [`Self::q_sample`] given the noise.
    pub fn predict_x0(&self, xt: &Tensor, ts: &[usize], noise: &Tensor) -> Result<Tensor> {
        let a = self.per_sample(ts, xt, |t| 1.0 / self.alpha_bar(t).sqrt())?;
        let b = self.per_sample(ts, xt, |t| (1.0 - self.alpha_bar(t)).sqrt())?;
        Ok((xt - noise.broadcast_mul(&b)?)?.broadcast_mul(&a)?)
    }

    /// Mean and standard deviation of `q(x_{t-1} | x_t, x0)`.
    pub fn posterior(&self, t: usize) -> (f64, f64, f64) {
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let beta = self.beta(t);
        let c_x0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let c_xt = self.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let var = beta * (1.0 - ab_prev) / (1.0 - ab);
        (c_x0, c_xt, var.sqrt())
    }

    fn per_sample(&self, ts: &[usize], like: &Tensor, f: impl Fn(usize) -> f64) -> Result<Tensor> {
        if ts.len() != like.dim(0)? {
            return Err(Error::ShapeMismatch(format!("{} steps for a batch of {}", ts.len(), like.dim(0)?)));
        }
        if let Some(&t) = ts.iter().find(|&&t| t > self.steps()) {
            return Err(Error::Config(format!("step {t} beyond schedule length {}", self.steps())));
        }
        let mut shape = vec![ts.len()];
        shape.extend(std::iter::repeat_n(1, like.rank() - 1));
        let v: Vec<f64> = ts.iter().map(|&t| f(t)).collect();
        Ok(Tensor::from_vec(v, shape, like.device())?.to_dtype(like.dtype())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn schedule_is_monotone() {
        let s = DiffusionSchedule::new(&ScheduleConfig::default()).unwrap();
        assert_eq!(s.steps(), 200);
        assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=200 {
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1) && s.alpha_bar(t) > 0.0);
            if t > 1 {
                assert!(s.beta(t) > s.beta(t - 1));
            }
        }
        assert!(s.alpha_bar(200) < 1e-3);
        assert!(DiffusionSchedule::new(&ScheduleConfig { steps: 10, beta_start: 0.2, beta_end: 0.1 }).is_err());
    }

    #[test]
    fn step_zero_is_clean_and_inversion_is_exact() {
        let s = DiffusionSchedule::new(&ScheduleConfig::default()).unwrap();
        let dev = Device::Cpu;
        let x0 = Tensor::new(&[[0.3f64, -0.7], [0.9, 0.0]], &dev).unwrap();
        let noise = Tensor::new(&[[1.2f64, -0.4], [0.1, 2.0]], &dev).unwrap();
        let clean = s.q_sample(&x0, &[0, 0], &noise).unwrap();
        assert_eq!(clean.to_vec2::<f64>().unwrap(), x0.to_vec2::<f64>().unwrap());
        for t in [1, 57, 200] {
            let xt = s.q_sample(&x0, &[t, t], &noise).unwrap();
            let back = s.predict_x0(&xt, &[t, t], &noise).unwrap();
            let err = (back - &x0).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(err < 1e-9, "t={t} err={err}");
        }
        let f32x = x0.to_dtype(DType::F32).unwrap();
        assert!(s.q_sample(&f32x, &[201, 0], &noise.to_dtype(DType::F32).unwrap()).is_err());
    }
}
