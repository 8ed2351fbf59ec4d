//! Growth operators applied between training stages.
//!
//! Depth grows by stacking copies of the trained layers, FFN width by
//! tiling shared blocks or multiplying out low-rank factors, and length by
//! dropping query pooling or raising the truncation length. The two width
//! operators preserve the network function exactly; the others do not.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::data::{DataConfig, Example};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};
use crate::transformer::{encoder_forward, FfnMode, FfnParams, ModelConfig, Params};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GrowthOp {
    /// Repeat the layer stack until it has `target_layers` layers.
    StackDepth { target_layers: usize },
    /// `shared(k)` → full FFN.
    UnshareFfn,
    /// `factorized(h)` → full FFN.
    DefactorizeFfn,
    /// Remove first-layer query pooling.
    Unpool,
    /// Train on longer prefixes with more masks.
    ExtendLength { train_len: usize, masks_per_seq: usize },
}

impl GrowthOp {
    /// Composition order within one boundary: depth, then width, then length.
    fn phase(&self) -> u8 {
        match self {
            GrowthOp::StackDepth { .. } => 0,
            GrowthOp::UnshareFfn | GrowthOp::DefactorizeFfn => 1,
            GrowthOp::Unpool | GrowthOp::ExtendLength { .. } => 2,
        }
    }

    /// Whether the op leaves the encoder's outputs unchanged.
    pub fn preserves_function(&self) -> bool {
        matches!(self, GrowthOp::UnshareFfn | GrowthOp::DefactorizeFfn)
    }

    /// Parse a comma-separated op list; empty input is the empty list.
    pub fn parse_list(s: &str) -> Result<Vec<GrowthOp>> {
        s.split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(str::parse)
            .collect()
    }

    pub fn format_list(ops: &[GrowthOp]) -> String {
        ops.iter().map(|o| o.to_string()).collect::<Vec<_>>().join(",")
    }
}

impl fmt::Display for GrowthOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GrowthOp::StackDepth { target_layers } => write!(f, "stack:{target_layers}"),
            GrowthOp::UnshareFfn => write!(f, "unshare"),
            GrowthOp::DefactorizeFfn => write!(f, "defactorize"),
            GrowthOp::Unpool => write!(f, "unpool"),
            GrowthOp::ExtendLength {
                train_len,
                masks_per_seq,
            } => write!(f, "extend:{train_len}:{masks_per_seq}"),
        }
    }
}

impl FromStr for GrowthOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::OpSpec(s.to_string());
        let num = |t: &str| t.parse::<usize>().map_err(|_| bad());
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["stack", l] => Ok(GrowthOp::StackDepth { target_layers: num(l)? }),
            ["unshare"] => Ok(GrowthOp::UnshareFfn),
            ["defactorize"] => Ok(GrowthOp::DefactorizeFfn),
            ["unpool"] => Ok(GrowthOp::Unpool),
            ["extend", len, masks] => Ok(GrowthOp::ExtendLength {
                train_len: num(len)?,
                masks_per_seq: num(masks)?,
            }),
            _ => Err(bad()),
        }
    }
}

/// Layer `ℓ` of the grown model is a copy of source layer `ℓ mod L`.
pub fn grow_depth_stack(params: &Params, config: &ModelConfig, target_layers: usize) -> Result<(Params, ModelConfig)> {
    let l = config.layers;
    if target_layers == 0 || target_layers % l != 0 {
        return Err(Error::Parameter(format!(
            "stack target {target_layers} is not a positive multiple of {l} layers"
        )));
    }
    let mut grown = params.clone();
    grown.layers = (0..target_layers).map(|i| params.layers[i % l].clone()).collect();
    let config = ModelConfig {
        layers: target_layers,
        ..config.clone()
    };
    Ok((grown, config))
}

/// `W1 = [W1', …, W1']` (k copies across columns) and `W2 = [W2'/k; …; W2'/k]`.
pub fn grow_ffn_unshare(params: &Params, config: &ModelConfig) -> Result<(Params, ModelConfig)> {
    let FfnMode::Shared { k } = config.ffn else {
        return Err(Error::State(format!("unshare requires a shared FFN, model is {}", config.ffn)));
    };
    let mut grown = params.clone();
    for layer in &mut grown.layers {
        let FfnParams::Shared { w1, w2 } = &layer.ffn else {
            return Err(Error::State("FFN weights are not in shared form".into()));
        };
        let w1_full = Tensor::hcat(&vec![w1; k])?;
        let w2_part = w2.scale(1.0 / k as f64);
        let w2_full = Tensor::vcat(&vec![&w2_part; k])?;
        layer.ffn = FfnParams::Full {
            w1: w1_full,
            w2: w2_full,
        };
    }
    let config = ModelConfig {
        ffn: FfnMode::Full,
        ..config.clone()
    };
    Ok((grown, config))
}

/// `W1 = W11·W12`, `W2 = W21·W22`.
pub fn grow_ffn_defactorize(params: &Params, config: &ModelConfig) -> Result<(Params, ModelConfig)> {
    if !matches!(config.ffn, FfnMode::Factorized { .. }) {
        return Err(Error::State(format!(
            "defactorize requires a factorized FFN, model is {}",
            config.ffn
        )));
    }
    let mut grown = params.clone();
    for layer in &mut grown.layers {
        let FfnParams::Factorized { w11, w12, w21, w22 } = &layer.ffn else {
            return Err(Error::State("FFN weights are not in factorized form".into()));
        };
        layer.ffn = FfnParams::Full {
            w1: w11.matmul(w12)?,
            w2: w21.matmul(w22)?,
        };
    }
    let config = ModelConfig {
        ffn: FfnMode::Full,
        ..config.clone()
    };
    Ok((grown, config))
}

/// Sets `pool_k = 1`; parameters are returned untouched.
pub fn grow_remove_pooling(params: &Params, config: &ModelConfig) -> Result<(Params, ModelConfig)> {
    if config.pool_k <= 1 {
        return Err(Error::State("unpool requires pool_k > 1".into()));
    }
    let config = ModelConfig {
        pool_k: 1,
        ..config.clone()
    };
    Ok((params.clone(), config))
}

/// Raise the truncation length and masks per sequence. Positions beyond the
/// old length keep whatever the embedding table holds (their initial values
/// when only truncated data has been seen).
pub fn extend_length(data: &DataConfig, train_len: usize, masks_per_seq: usize, max_len: usize) -> Result<DataConfig> {
    if train_len > max_len {
        return Err(Error::Parameter(format!(
            "extend to {train_len} exceeds the position table ({max_len})"
        )));
    }
    if train_len < data.train_len {
        return Err(Error::Parameter(format!(
            "extend to {train_len} is shorter than the current length {}",
            data.train_len
        )));
    }
    let grown = DataConfig {
        train_len,
        masks_per_seq,
        ..data.clone()
    };
    grown.validate().map_err(|e| Error::Parameter(e.to_string()))?;
    Ok(grown)
}

fn sorted(ops: &[GrowthOp]) -> Vec<GrowthOp> {
    let mut ops = ops.to_vec();
    ops.sort_by_key(GrowthOp::phase);
    ops
}

/// Apply ops to configs only; used for planning and validation.
pub fn apply_config(ops: &[GrowthOp], model: &ModelConfig, data: &DataConfig) -> Result<(ModelConfig, DataConfig)> {
    let mut model = model.clone();
    let mut data = data.clone();
    for op in sorted(ops) {
        match op {
            GrowthOp::StackDepth { target_layers } => {
                if target_layers == 0 || target_layers % model.layers != 0 {
                    return Err(Error::Parameter(format!(
                        "stack target {target_layers} is not a positive multiple of {} layers",
                        model.layers
                    )));
                }
                model.layers = target_layers;
            }
            GrowthOp::UnshareFfn => {
                if !matches!(model.ffn, FfnMode::Shared { .. }) {
                    return Err(Error::State(format!("unshare requires a shared FFN, model is {}", model.ffn)));
                }
                model.ffn = FfnMode::Full;
            }
            GrowthOp::DefactorizeFfn => {
                if !matches!(model.ffn, FfnMode::Factorized { .. }) {
                    return Err(Error::State(format!(
                        "defactorize requires a factorized FFN, model is {}",
                        model.ffn
                    )));
                }
                model.ffn = FfnMode::Full;
            }
            GrowthOp::Unpool => {
                if model.pool_k <= 1 {
                    return Err(Error::State("unpool requires pool_k > 1".into()));
                }
                model.pool_k = 1;
            }
            GrowthOp::ExtendLength {
                train_len,
                masks_per_seq,
            } => data = extend_length(&data, train_len, masks_per_seq, model.max_len)?,
        }
    }
    Ok((model, data))
}

/// Grown state produced by [`apply`].
#[derive(Clone, Debug)]
pub struct GrownState {
    pub params: Params,
    pub model: ModelConfig,
    pub data: DataConfig,
}

/// Apply a set of ops at one stage boundary (depth, width, length order).
/// Inputs are not modified.
pub fn apply(ops: &[GrowthOp], params: &Params, model: &ModelConfig, data: &DataConfig) -> Result<GrownState> {
    let mut params = params.clone();
    let mut model = model.clone();
    let mut data = data.clone();
    for op in sorted(ops) {
        match op {
            GrowthOp::StackDepth { target_layers } => {
                (params, model) = grow_depth_stack(&params, &model, target_layers)?;
            }
            GrowthOp::UnshareFfn => (params, model) = grow_ffn_unshare(&params, &model)?,
            GrowthOp::DefactorizeFfn => (params, model) = grow_ffn_defactorize(&params, &model)?,
            GrowthOp::Unpool => (params, model) = grow_remove_pooling(&params, &model)?,
            GrowthOp::ExtendLength {
                train_len,
                masks_per_seq,
            } => data = extend_length(&data, train_len, masks_per_seq, model.max_len)?,
        }
    }
    params.audit(&model)?;
    Ok(GrownState { params, model, data })
}

/// Add `N(0, eps²)` noise to every FFN weight. Breaks the symmetry between
/// tiled blocks when training without dropout.
pub fn perturb_ffn(params: &mut Params, eps: f64, rng: &mut Rng) {
    for layer in &mut params.layers {
        let tensors: Vec<&mut Tensor> = match &mut layer.ffn {
            FfnParams::Full { w1, w2 } | FfnParams::Shared { w1, w2 } => vec![w1, w2],
            FfnParams::Factorized { w11, w12, w21, w22 } => vec![w11, w12, w21, w22],
        };
        for t in tensors {
            for v in t.data_mut() {
                *v += eps * rng.normal();
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PreservationReport {
    pub ops: String,
    pub max_abs_diff: f64,
    /// Whether every op in the set is function-preserving.
    pub expected_preserving: bool,
    /// `None` for report-only op sets.
    pub pass: Option<bool>,
}

pub const DEFAULT_PRESERVATION_TOL: f64 = 1e-9;

/// Run the probe batch through the model before and after `ops` (dropout
/// off) and compare logits, plus hidden states when their shapes agree.
pub fn verify_function_preserving(
    ops: &[GrowthOp],
    params: &Params,
    model: &ModelConfig,
    data: &DataConfig,
    probe: &[Example],
    tol: f64,
) -> Result<PreservationReport> {
    let grown = apply(ops, params, model, data)?;
    let mut diff: f64 = 0.0;
    let mut rng = Rng::new(0);
    for ex in probe {
        let before = encoder_forward(&ex.input_ids, &ex.masked_positions, params, model, &mut rng, false)?;
        let after = encoder_forward(&ex.input_ids, &ex.masked_positions, &grown.params, &grown.model, &mut rng, false)?;
        if let (Some(a), Some(b)) = (&before.logits, &after.logits) {
            diff = diff.max(a.max_abs_diff(b)?);
        }
        if before.hidden.shape() == after.hidden.shape() {
            diff = diff.max(before.hidden.max_abs_diff(&after.hidden)?);
        }
    }
    let expected = !ops.is_empty() && ops.iter().all(GrowthOp::preserves_function);
    Ok(PreservationReport {
        ops: GrowthOp::format_list(ops),
        max_abs_diff: diff,
        expected_preserving: expected,
        pass: expected.then_some(diff <= tol),
    })
}
