use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::transformer::{layout, ModelConfig, Params, TensorKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub peak_lr: f64,
    /// Upper bound on warmup steps; each stage warms up for
    /// `min(steps / 10, warmup)`.
    pub warmup: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Keep Adam moments across growth boundaries that leave every tensor
    /// shape unchanged.
    pub carry_moments: bool,
    /// Clip the global gradient norm to this value.
    pub grad_clip: Option<f64>,
    /// Std of Gaussian noise added to FFN weights after each growth.
    pub growth_noise: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            peak_lr: 1e-4,
            warmup: 10_000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.01,
            carry_moments: false,
            grad_clip: None,
            growth_noise: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let v = |p: &str, r: &str| Err(Error::validation(format!("optimizer.{p}"), r));
        if !(self.peak_lr.is_finite() && self.peak_lr >= 0.0) {
            return v("peak_lr", "must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return v("beta1", "must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return v("beta2", "must be in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return v("eps", "must be > 0");
        }
        if !(self.weight_decay >= 0.0) {
            return v("weight_decay", "must be >= 0");
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return v("grad_clip", "must be > 0");
        }
        if !(self.growth_noise >= 0.0) {
            return v("growth_noise", "must be >= 0");
        }
        Ok(())
    }

    pub fn stage_warmup(&self, stage_steps: u64) -> u64 {
        (stage_steps / 10).min(self.warmup)
    }
}

/// Linear warmup from 0 to `peak` over `warmup` steps, then linear decay to
/// 0 at `stage_steps`.
pub fn lr_at(step: u64, stage_steps: u64, warmup: u64, peak: f64) -> f64 {
    if step >= stage_steps {
        0.0
    } else if step < warmup {
        peak * (step as f64 / warmup as f64)
    } else {
        peak * ((stage_steps - step) as f64 / (stage_steps - warmup) as f64)
    }
}

/// AdamW moments for one parameter set.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub m: Params,
    pub v: Params,
    pub step: u64,
    decay: Vec<bool>,
}

impl OptimizerState {
    /// Zero moments. Weight decay applies to matrices only; gains and
    /// biases are exempt.
    pub fn new(params: &Params, config: &ModelConfig) -> Result<Self> {
        params.audit(config)?;
        let decay = layout(config).into_iter().map(|(_, _, k)| k == TensorKind::Weight).collect();
        Ok(OptimizerState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            decay,
        })
    }

    /// Apply weight decay to every tensor, including gains and biases.
    pub fn decay_all(mut self) -> Self {
        self.decay.iter_mut().for_each(|d| *d = true);
        self
    }

    /// Verify the moments still match `params` tensor by tensor.
    pub fn audit(&self, params: &Params) -> Result<()> {
        let (p, m, v) = (params.tensors(), self.m.tensors(), self.v.tensors());
        if p.len() != m.len() || p.len() != v.len() || p.len() != self.decay.len() {
            return Err(Error::State(format!(
                "optimizer holds {} tensors, params have {}",
                m.len(),
                p.len()
            )));
        }
        for (i, t) in p.iter().enumerate() {
            if t.shape() != m[i].shape() || t.shape() != v[i].shape() {
                return Err(Error::State(format!(
                    "optimizer moment {i} has shape {:?}, parameter has {:?}",
                    m[i].shape(),
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Scale `grads` so its global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut Params, max_norm: f64) -> f64 {
    let norm = grads
        .tensors()
        .iter()
        .flat_map(|t| t.data())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for t in grads.tensors_mut() {
            *t = t.scale(s);
        }
    }
    norm
}

/// One decoupled AdamW update with bias correction:
/// `p ← p − lr·(m̂/(√v̂ + ε) + wd·p)`.
pub fn optimizer_step(params: &mut Params, grads: &Params, state: &mut OptimizerState, lr: f64, config: &OptimizerConfig) -> Result<()> {
    state.audit(params)?;
    state.audit(grads)?;
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let gs = grads.tensors();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for (i, ((p, m), v)) in params.tensors_mut().into_iter().zip(ms).zip(vs).enumerate() {
        let wd = if state.decay[i] { config.weight_decay } else { 0.0 };
        update(p, gs[i], m, v, lr, wd, b1, b2, c1, c2, config.eps);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn update(p: &mut Tensor, g: &Tensor, m: &mut Tensor, v: &mut Tensor, lr: f64, wd: f64, b1: f64, b2: f64, c1: f64, c2: f64, eps: f64) {
    let g = g.data();
    let m = m.data_mut();
    let v = v.data_mut();
    for (j, p) in p.data_mut().iter_mut().enumerate() {
        m[j] = b1 * m[j] + (1.0 - b1) * g[j];
        v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
        let m_hat = m[j] / c1;
        let v_hat = v[j] / c2;
        *p -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
    }
}
