use crate::error::{Error, Result};

use super::{Rng, Tensor};

fn require_matrix(x: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if x.shape().len() != 2 {
        return Err(Error::dim(op, x.shape(), &[]));
    }
    Ok((x.shape()[0], x.shape()[1]))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (m, _) = require_matrix(x, "softmax_rows")?;
    let mut out = x.clone();
    for i in 0..m {
        let row = out.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}

/// Adjoint of [`softmax_rows`] given its output `y` and upstream `g`:
/// `dx = y ⊙ (g − ⟨g, y⟩)` per row.
pub fn softmax_rows_backward(y: &Tensor, g: &Tensor) -> Result<Tensor> {
    if y.shape() != g.shape() {
        return Err(Error::dim("softmax_rows_backward", y.shape(), g.shape()));
    }
    let (m, _) = require_matrix(y, "softmax_rows_backward")?;
    let mut out = g.clone();
    for i in 0..m {
        let yr = y.row(i);
        let dot: f64 = yr.iter().zip(g.row(i)).map(|(a, b)| a * b).sum();
        for (o, &yy) in out.row_mut(i).iter_mut().zip(yr) {
            *o = yy * (*o - dot);
        }
    }
    Ok(out)
}

const GELU_C: f64 = 0.044_715;
// √(2/π)
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Tanh-approximated GELU of a single value.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

/// Adjoint of [`gelu`] at input `x`.
pub fn gelu_backward(x: &Tensor, g: &Tensor) -> Result<Tensor> {
    if x.shape() != g.shape() {
        return Err(Error::dim("gelu_backward", x.shape(), g.shape()));
    }
    let data = x
        .data()
        .iter()
        .zip(g.data())
        .map(|(&xi, &gi)| gi * gelu_derivative(xi))
        .collect();
    Tensor::new(x.shape(), data)
}

/// Saved normalized rows and inverse standard deviations.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct LayerNormGrads {
    pub x: Tensor,
    pub gain: Tensor,
    pub bias: Tensor,
}

/// Per-row normalization with population variance, then `gain ⊙ x̂ + bias`.
pub fn layer_norm(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormCache)> {
    let (m, n) = require_matrix(x, "layer_norm")?;
    if gain.len() != n || bias.len() != n {
        return Err(Error::dim("layer_norm", x.shape(), gain.shape()));
    }
    if eps <= 0.0 {
        return Err(Error::Parameter(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let mut xhat = x.clone();
    let mut out = x.clone();
    let mut inv_std = Vec::with_capacity(m);
    for i in 0..m {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        for (j, h) in xhat.row_mut(i).iter_mut().enumerate() {
            *h = (row[j] - mean) * is;
        }
        let hr = xhat.row(i).to_vec();
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = hr[j] * gain.data()[j] + bias.data()[j];
        }
    }
    Ok((out, LayerNormCache { xhat, inv_std }))
}

pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &Tensor,
    g: &Tensor,
) -> Result<LayerNormGrads> {
    if cache.xhat.shape() != g.shape() {
        return Err(Error::dim("layer_norm_backward", cache.xhat.shape(), g.shape()));
    }
    let (m, n) = require_matrix(g, "layer_norm_backward")?;
    let mut gx = Tensor::zeros(&[m, n]);
    let mut ggain = vec![0.0; n];
    let mut gbias = vec![0.0; n];
    let nf = n as f64;
    for i in 0..m {
        let xh = cache.xhat.row(i);
        let gr = g.row(i);
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for j in 0..n {
            let gh = gr[j] * gain.data()[j];
            sum_g += gh;
            sum_gx += gh * xh[j];
            ggain[j] += gr[j] * xh[j];
            gbias[j] += gr[j];
        }
        let is = cache.inv_std[i];
        for (j, o) in gx.row_mut(i).iter_mut().enumerate() {
            let gh = gr[j] * gain.data()[j];
            *o = is / nf * (nf * gh - sum_g - xh[j] * sum_gx);
        }
    }
    Ok(LayerNormGrads {
        x: gx,
        gain: Tensor::vector(ggain),
        bias: Tensor::vector(gbias),
    })
}

/// Partition of sequence rows into consecutive groups that are averaged
/// into one output row each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolPlan {
    input_len: usize,
    // (start, len) per output row
    groups: Vec<(usize, usize)>,
}

impl PoolPlan {
    /// Groups of `k` consecutive rows; a trailing short group keeps its
    /// `m mod k` rows.
    pub fn uniform(m: usize, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Parameter("pool window k must be >= 1".into()));
        }
        let mut groups = Vec::with_capacity(m.div_ceil(k));
        let mut start = 0;
        while start < m {
            let len = k.min(m - start);
            groups.push((start, len));
            start += len;
        }
        Ok(PoolPlan { input_len: m, groups })
    }

    /// Pooling over unmasked tokens: every position in `exempt` (strictly
    /// increasing) becomes its own row; the runs between them are pooled
    /// with window `k`.
    pub fn with_exemptions(n: usize, exempt: &[usize], k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Parameter("pool window k must be >= 1".into()));
        }
        let mut groups = Vec::new();
        let push_run = |from: usize, to: usize, groups: &mut Vec<(usize, usize)>| {
            let mut s = from;
            while s < to {
                let len = k.min(to - s);
                groups.push((s, len));
                s += len;
            }
        };
        let mut cursor = 0;
        let mut prev: Option<usize> = None;
        for &p in exempt {
            if p >= n || prev.is_some_and(|q| p <= q) {
                return Err(Error::Input(format!(
                    "exempt positions must be strictly increasing and < {n}, got {exempt:?}"
                )));
            }
            push_run(cursor, p, &mut groups);
            groups.push((p, 1));
            cursor = p + 1;
            prev = Some(p);
        }
        push_run(cursor, n, &mut groups);
        Ok(PoolPlan { input_len: n, groups })
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn output_len(&self) -> usize {
        self.groups.len()
    }

    /// Output row that contains input row `pos`.
    pub fn output_index(&self, pos: usize) -> Option<usize> {
        self.groups
            .binary_search_by(|&(s, l)| {
                if pos < s {
                    std::cmp::Ordering::Greater
                } else if pos >= s + l {
                    std::cmp::Ordering::Less
                } else {
                    std::cmp::Ordering::Equal
                }
            })
            .ok()
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (m, n) = require_matrix(x, "mean_pool_rows")?;
        if m != self.input_len {
            return Err(Error::dim("mean_pool_rows", x.shape(), &[self.input_len]));
        }
        let mut out = Tensor::zeros(&[self.groups.len(), n]);
        for (o, &(s, l)) in self.groups.iter().enumerate() {
            let inv = 1.0 / l as f64;
            let orow = out.row_mut(o);
            for r in s..s + l {
                for (a, &b) in orow.iter_mut().zip(x.row(r)) {
                    *a += b;
                }
            }
            for a in orow.iter_mut() {
                *a *= inv;
            }
        }
        Ok(out)
    }

    /// Adjoint: each input row receives its group's gradient divided by the group size.
    pub fn backward(&self, g: &Tensor) -> Result<Tensor> {
        let (m, n) = require_matrix(g, "mean_pool_rows_backward")?;
        if m != self.groups.len() {
            return Err(Error::dim("mean_pool_rows_backward", g.shape(), &[self.groups.len()]));
        }
        let mut out = Tensor::zeros(&[self.input_len, n]);
        for (o, &(s, l)) in self.groups.iter().enumerate() {
            let inv = 1.0 / l as f64;
            for r in s..s + l {
                for (a, &b) in out.row_mut(r).iter_mut().zip(g.row(o)) {
                    *a = b * inv;
                }
            }
        }
        Ok(out)
    }
}

/// Average consecutive groups of `k` rows.
pub fn mean_pool_rows(x: &Tensor, k: usize) -> Result<Tensor> {
    let (m, _) = require_matrix(x, "mean_pool_rows")?;
    PoolPlan::uniform(m, k)?.apply(x)
}

pub fn mean_pool_rows_backward(g: &Tensor, m: usize, k: usize) -> Result<Tensor> {
    PoolPlan::uniform(m, k)?.backward(g)
}

/// Per-element multipliers applied by a dropout call (`None` = identity).
#[derive(Clone, Debug)]
pub struct DropoutMask(Option<Vec<f64>>);

impl DropoutMask {
    pub fn identity() -> Self {
        DropoutMask(None)
    }
}

/// Inverted dropout: zero with probability `p`, scale survivors by `1/(1−p)`.
pub fn dropout(x: &Tensor, p: f64, rng: &mut Rng, training: bool) -> Result<(Tensor, DropoutMask)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Parameter(format!("dropout p must be in [0, 1), got {p}")));
    }
    if !training || p == 0.0 {
        return Ok((x.clone(), DropoutMask(None)));
    }
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..x.len())
        .map(|_| if rng.uniform() < p { 0.0 } else { keep })
        .collect();
    let data = x.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
    Ok((Tensor::new(x.shape(), data)?, DropoutMask(Some(mask))))
}

pub fn dropout_backward(mask: &DropoutMask, g: &Tensor) -> Result<Tensor> {
    match &mask.0 {
        None => Ok(g.clone()),
        Some(m) => {
            if m.len() != g.len() {
                return Err(Error::dim("dropout_backward", &[m.len()], g.shape()));
            }
            Tensor::new(g.shape(), g.data().iter().zip(m).map(|(a, b)| a * b).collect())
        }
    }
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of
/// `logits`, with its analytic gradient `(softmax − onehot) / m`.
pub fn cross_entropy_logits(logits: &Tensor, targets: &[usize]) -> Result<(f64, Tensor)> {
    let (m, v) = require_matrix(logits, "cross_entropy_logits")?;
    if targets.len() != m {
        return Err(Error::dim("cross_entropy_logits", logits.shape(), &[targets.len()]));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= v) {
        return Err(Error::Index(format!("target {t} not in [0, {v})")));
    }
    let mut grad = softmax_rows(logits)?;
    let mut loss = 0.0;
    let inv_m = 1.0 / m as f64;
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
        loss += lse - row[t];
        let gr = grad.row_mut(i);
        gr[t] -= 1.0;
        for g in gr.iter_mut() {
            *g *= inv_m;
        }
    }
    Ok((loss * inv_m, grad))
}
