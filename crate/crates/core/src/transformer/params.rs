use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

use super::{FfnMode, ModelConfig};

const INIT_STD: f64 = 0.02;

/// Attention projections. Every matrix is `D×D` and head `m` occupies
/// columns `[m·D/M, (m+1)·D/M)`. `W_K` and `W_V2` are kept transposed so
/// their head blocks are column blocks too.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub w_q: Tensor,
    pub w_k_t: Tensor,
    pub w_v1: Tensor,
    pub w_v2_t: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub enum FfnParams {
    Full { w1: Tensor, w2: Tensor },
    Shared { w1: Tensor, w2: Tensor },
    Factorized {
        w11: Tensor,
        w12: Tensor,
        w21: Tensor,
        w22: Tensor,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub attn: AttentionParams,
    pub attn_norm_gain: Tensor,
    pub attn_norm_bias: Tensor,
    pub ffn: FfnParams,
    pub ffn_norm_gain: Tensor,
    pub ffn_norm_bias: Tensor,
}

/// All weights of the encoder plus its untied MLM head.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub token_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerParams>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

/// Role of a tensor, used by initializers and by weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorKind {
    Weight,
    Gain,
    Bias,
}

/// Canonical (name, shape, kind) listing for a config, in storage order.
pub fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>, TensorKind)> {
    use TensorKind::*;
    let (d, v) = (config.d_model, config.vocab);
    let mut out = vec![
        ("embeddings.token".to_string(), vec![v, d], Weight),
        ("embeddings.position".to_string(), vec![config.max_len, d], Weight),
    ];
    for l in 0..config.layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        out.push((p("attention.w_q"), vec![d, d], Weight));
        out.push((p("attention.w_k_t"), vec![d, d], Weight));
        out.push((p("attention.w_v1"), vec![d, d], Weight));
        out.push((p("attention.w_v2_t"), vec![d, d], Weight));
        out.push((p("attention_norm.gain"), vec![d], Gain));
        out.push((p("attention_norm.bias"), vec![d], Bias));
        match config.ffn {
            FfnMode::Full => {
                out.push((p("ffn.w1"), vec![d, config.d_ff], Weight));
                out.push((p("ffn.w2"), vec![config.d_ff, d], Weight));
            }
            FfnMode::Shared { .. } => {
                let hk = config.ffn_hidden();
                out.push((p("ffn.w1_shared"), vec![d, hk], Weight));
                out.push((p("ffn.w2_shared"), vec![hk, d], Weight));
            }
            FfnMode::Factorized { rank } => {
                out.push((p("ffn.w11"), vec![d, rank], Weight));
                out.push((p("ffn.w12"), vec![rank, config.d_ff], Weight));
                out.push((p("ffn.w21"), vec![config.d_ff, rank], Weight));
                out.push((p("ffn.w22"), vec![rank, d], Weight));
            }
        }
        out.push((p("ffn_norm.gain"), vec![d], Gain));
        out.push((p("ffn_norm.bias"), vec![d], Bias));
    }
    out.push(("mlm_head.weight".to_string(), vec![d, v], Weight));
    out.push(("mlm_head.bias".to_string(), vec![v], Bias));
    out
}

impl Params {
    /// Assemble params from tensors yielded in [`layout`] order.
    fn assemble(config: &ModelConfig, mut next: impl FnMut(&str, &[usize], TensorKind) -> Result<Tensor>) -> Result<Self> {
        let spec = layout(config);
        let mut it = spec.iter();
        let mut take = || -> Result<Tensor> {
            let (name, shape, kind) = it.next().expect("layout exhausted");
            next(name, shape, *kind)
        };
        let token_emb = take()?;
        let pos_emb = take()?;
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            let attn = AttentionParams {
                w_q: take()?,
                w_k_t: take()?,
                w_v1: take()?,
                w_v2_t: take()?,
            };
            let attn_norm_gain = take()?;
            let attn_norm_bias = take()?;
            let ffn = match config.ffn {
                FfnMode::Full => FfnParams::Full {
                    w1: take()?,
                    w2: take()?,
                },
                FfnMode::Shared { .. } => FfnParams::Shared {
                    w1: take()?,
                    w2: take()?,
                },
                FfnMode::Factorized { .. } => FfnParams::Factorized {
                    w11: take()?,
                    w12: take()?,
                    w21: take()?,
                    w22: take()?,
                },
            };
            layers.push(LayerParams {
                attn,
                attn_norm_gain,
                attn_norm_bias,
                ffn,
                ffn_norm_gain: take()?,
                ffn_norm_bias: take()?,
            });
        }
        let head_w = take()?;
        let head_b = take()?;
        Ok(Params {
            token_emb,
            pos_emb,
            layers,
            head_w,
            head_b,
        })
    }

    /// Truncated-normal(0, 0.02) weights, unit gains, zero biases.
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        Self::assemble(config, |_, shape, kind| {
            Ok(match kind {
                TensorKind::Weight => {
                    let n = shape.iter().product();
                    Tensor::new(shape, (0..n).map(|_| rng.truncated_normal(INIT_STD)).collect())?
                }
                TensorKind::Gain => Tensor::full(shape, 1.0),
                TensorKind::Bias => Tensor::zeros(shape),
            })
        })
    }

    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        Self::assemble(config, |_, shape, _| Ok(Tensor::zeros(shape)))
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        z
    }

    /// Build from named tensors, checking every name and shape against the config.
    pub fn from_named(config: &ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut map: BTreeMap<String, Tensor> = tensors.into_iter().collect();
        let params = Self::assemble(config, |name, shape, _| {
            let t = map.remove(name).ok_or_else(|| Error::ShapeAudit {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: vec![],
            })?;
            if t.shape() != shape {
                return Err(Error::ShapeAudit {
                    name: name.to_string(),
                    expected: shape.to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            Ok(t)
        })?;
        if let Some(extra) = map.keys().next() {
            return Err(Error::ShapeAudit {
                name: extra.clone(),
                expected: vec![],
                found: map[extra].shape().to_vec(),
            });
        }
        Ok(params)
    }

    /// All tensors in [`layout`] order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.token_emb, &self.pos_emb];
        for l in &self.layers {
            out.extend([&l.attn.w_q, &l.attn.w_k_t, &l.attn.w_v1, &l.attn.w_v2_t]);
            out.extend([&l.attn_norm_gain, &l.attn_norm_bias]);
            match &l.ffn {
                FfnParams::Full { w1, w2 } | FfnParams::Shared { w1, w2 } => out.extend([w1, w2]),
                FfnParams::Factorized { w11, w12, w21, w22 } => out.extend([w11, w12, w21, w22]),
            }
            out.extend([&l.ffn_norm_gain, &l.ffn_norm_bias]);
        }
        out.extend([&self.head_w, &self.head_b]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.token_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.extend([&mut l.attn.w_q, &mut l.attn.w_k_t, &mut l.attn.w_v1, &mut l.attn.w_v2_t]);
            out.extend([&mut l.attn_norm_gain, &mut l.attn_norm_bias]);
            match &mut l.ffn {
                FfnParams::Full { w1, w2 } | FfnParams::Shared { w1, w2 } => out.extend([w1, w2]),
                FfnParams::Factorized { w11, w12, w21, w22 } => out.extend([w11, w12, w21, w22]),
            }
            out.extend([&mut l.ffn_norm_gain, &mut l.ffn_norm_bias]);
        }
        out.extend([&mut self.head_w, &mut self.head_b]);
        out
    }

    /// `(name, tensor)` pairs for a config this params was built for.
    pub fn named<'a>(&'a self, config: &ModelConfig) -> Vec<(String, &'a Tensor)> {
        layout(config)
            .into_iter()
            .map(|(n, _, _)| n)
            .zip(self.tensors())
            .collect()
    }

    /// Verify every tensor shape against the config.
    pub fn audit(&self, config: &ModelConfig) -> Result<()> {
        let spec = layout(config);
        let tensors = self.tensors();
        if spec.len() != tensors.len() {
            let (name, shape, _) = &spec[spec.len().min(tensors.len()).saturating_sub(1)];
            return Err(Error::ShapeAudit {
                name: name.clone(),
                expected: shape.clone(),
                found: vec![],
            });
        }
        for ((name, shape, _), t) in spec.iter().zip(tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeAudit {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// `self += s * other`, tensor by tensor.
    pub fn axpy(&mut self, s: f64, other: &Params) -> Result<()> {
        let others = other.tensors();
        let mine = self.tensors_mut();
        if mine.len() != others.len() {
            return Err(Error::State("parameter sets differ in structure".into()));
        }
        for (a, b) in mine.into_iter().zip(others) {
            a.axpy(s, b)?;
        }
        Ok(())
    }

    pub fn element_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn bit_eq(&self, other: &Params) -> bool {
        let (a, b) = (self.tensors(), other.tensors());
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.bit_eq(y))
    }
}

/// Parameter counts per component.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub attention_per_layer: u64,
    pub ffn_per_layer: u64,
    pub layer_norm_per_layer: u64,
    pub embeddings: u64,
    pub head: u64,
    pub layers: u64,
    pub total: u64,
}

impl ParamCount {
    pub fn as_map(&self) -> BTreeMap<&'static str, u64> {
        BTreeMap::from([
            ("attention_per_layer", self.attention_per_layer),
            ("ffn_per_layer", self.ffn_per_layer),
            ("layer_norm_per_layer", self.layer_norm_per_layer),
            ("embeddings", self.embeddings),
            ("head", self.head),
            ("total", self.total),
        ])
    }
}

/// Closed-form parameter counts: attention `4D²`, FFN `2DH` (full),
/// `2DH/k` (shared), `2h(D+H)` (factorized).
pub fn param_count(config: &ModelConfig) -> ParamCount {
    let d = config.d_model as u64;
    let h = config.d_ff as u64;
    let v = config.vocab as u64;
    let attention = 4 * d * d;
    let ffn = match config.ffn {
        FfnMode::Full => 2 * d * h,
        FfnMode::Shared { k } => 2 * d * h / k as u64,
        FfnMode::Factorized { rank } => 2 * rank as u64 * (d + h),
    };
    let norms = 4 * d;
    let embeddings = (v + config.max_len as u64) * d;
    let head = d * v + v;
    let layers = config.layers as u64;
    ParamCount {
        attention_per_layer: attention,
        ffn_per_layer: ffn,
        layer_norm_per_layer: norms,
        embeddings,
        head,
        layers,
        total: layers * (attention + ffn + norms) + embeddings + head,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bert_base() -> ModelConfig {
        ModelConfig {
            layers: 12,
            d_model: 768,
            d_ff: 3072,
            heads: 12,
            max_len: 512,
            vocab: 30522,
            dropout: 0.1,
            ffn: FfnMode::Full,
            pool_k: 1,
            attn_scale: true,
        }
    }

    #[test]
    fn param_count_examples() {
        let c = param_count(&bert_base());
        assert_eq!(c.ffn_per_layer, 4_718_592);
        assert_eq!(c.attention_per_layer, 2_359_296);
        let mut shared = bert_base();
        shared.ffn = FfnMode::Shared { k: 2 };
        assert_eq!(param_count(&shared).ffn_per_layer, 2_359_296);
        let tiny = ModelConfig {
            layers: 1,
            d_model: 1,
            d_ff: 1,
            heads: 1,
            max_len: 1,
            vocab: 1,
            dropout: 0.0,
            ffn: FfnMode::Full,
            pool_k: 1,
            attn_scale: true,
        };
        let c = param_count(&tiny);
        assert_eq!((c.attention_per_layer, c.ffn_per_layer), (4, 2));
    }

    #[test]
    fn param_count_matches_materialized_tensors() {
        for ffn in [FfnMode::Full, FfnMode::Shared { k: 2 }, FfnMode::Shared { k: 4 }, FfnMode::Factorized { rank: 6 }] {
            let cfg = ModelConfig { ffn, ..ModelConfig::desk() };
            let p = Params::zeros(&cfg).unwrap();
            assert_eq!(p.element_count() as u64, param_count(&cfg).total, "{ffn}");
        }
    }

    #[test]
    fn audit_catches_wrong_shape() {
        let cfg = ModelConfig::desk();
        let mut p = Params::zeros(&cfg).unwrap();
        p.audit(&cfg).unwrap();
        p.layers[1].attn.w_q = Tensor::zeros(&[32, 16]);
        match p.audit(&cfg) {
            Err(Error::ShapeAudit { name, .. }) => assert_eq!(name, "layers.1.attention.w_q"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn from_named_roundtrip_and_errors() {
        let cfg = ModelConfig { layers: 2, ..ModelConfig::desk() };
        let p = Params::init(&cfg, &mut Rng::new(1)).unwrap();
        let named: Vec<(String, Tensor)> = p.named(&cfg).into_iter().map(|(n, t)| (n, t.clone())).collect();
        let back = Params::from_named(&cfg, named.clone()).unwrap();
        assert!(back.bit_eq(&p));
        let mut missing = named.clone();
        missing.retain(|(n, _)| n != "mlm_head.bias");
        assert!(matches!(Params::from_named(&cfg, missing), Err(Error::ShapeAudit { .. })));
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::desk();
        let a = Params::init(&cfg, &mut Rng::new(3)).unwrap();
        let b = Params::init(&cfg, &mut Rng::new(3)).unwrap();
        assert!(a.bit_eq(&b));
        assert!(a.layers[0].attn.w_q.max_abs() <= 0.04);
        assert_eq!(a.layers[0].attn_norm_gain.data()[0], 1.0);
    }
}
