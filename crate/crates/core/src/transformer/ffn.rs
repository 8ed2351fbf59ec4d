use crate::error::{Error, Result};
use crate::numerics::{dropout, dropout_backward, gelu, gelu_backward, DropoutMask, Rng, Tensor};

use super::FfnParams;

/// Nonlinearity between the two FFN projections. `Identity` exists so the
/// linear algebra of the reduced modes can be checked by hand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Identity,
}

#[derive(Clone, Debug)]
pub struct FfnCache {
    x: Tensor,
    // factorized mode only: x·W11
    low: Option<Tensor>,
    pre: Tensor,
    dropped: Tensor,
    // factorized mode only: dropped·W21
    low_out: Option<Tensor>,
    mask: DropoutMask,
    act: Activation,
}

fn activate(act: Activation, x: &Tensor) -> Tensor {
    match act {
        Activation::Gelu => gelu(x),
        Activation::Identity => x.clone(),
    }
}

/// `φ(x·W1)·W2` in full or shared mode, `φ(x·W11·W12)·W21·W22` when
/// factorized, with dropout on the hidden activations.
pub fn ffn_forward(
    x: &Tensor,
    p: &FfnParams,
    dropout_p: f64,
    act: Activation,
    rng: &mut Rng,
    training: bool,
) -> Result<(Tensor, FfnCache)> {
    let (low, pre) = match p {
        FfnParams::Full { w1, .. } | FfnParams::Shared { w1, .. } => (None, x.matmul(w1)?),
        FfnParams::Factorized { w11, w12, .. } => {
            let low = x.matmul(w11)?;
            let pre = low.matmul(w12)?;
            (Some(low), pre)
        }
    };
    let hidden = activate(act, &pre);
    let (dropped, mask) = dropout(&hidden, dropout_p, rng, training)?;
    let (low_out, out) = match p {
        FfnParams::Full { w2, .. } | FfnParams::Shared { w2, .. } => (None, dropped.matmul(w2)?),
        FfnParams::Factorized { w21, w22, .. } => {
            let lo = dropped.matmul(w21)?;
            let out = lo.matmul(w22)?;
            (Some(lo), out)
        }
    };
    Ok((
        out,
        FfnCache {
            x: x.clone(),
            low,
            pre,
            dropped,
            low_out,
            mask,
            act,
        },
    ))
}

/// Returns `(∂x, ∂params)`; the parameter gradient has the same variant as `p`.
pub fn ffn_backward(cache: &FfnCache, p: &FfnParams, g: &Tensor) -> Result<(Tensor, FfnParams)> {
    let (g_dropped, g_out_weights) = match (p, &cache.low_out) {
        (FfnParams::Full { w2, .. } | FfnParams::Shared { w2, .. }, None) => {
            let (gd, gw2) = Tensor::matmul_backward(&cache.dropped, w2, g)?;
            (gd, vec![gw2])
        }
        (FfnParams::Factorized { w21, w22, .. }, Some(lo)) => {
            let (g_lo, g_w22) = Tensor::matmul_backward(lo, w22, g)?;
            let (gd, g_w21) = Tensor::matmul_backward(&cache.dropped, w21, &g_lo)?;
            (gd, vec![g_w21, g_w22])
        }
        _ => return Err(Error::State("ffn cache does not match parameter mode".into())),
    };
    let g_hidden = dropout_backward(&cache.mask, &g_dropped)?;
    let g_pre = match cache.act {
        Activation::Gelu => gelu_backward(&cache.pre, &g_hidden)?,
        Activation::Identity => g_hidden,
    };
    match (p, &cache.low) {
        (FfnParams::Full { w1, .. }, None) | (FfnParams::Shared { w1, .. }, None) => {
            let (gx, gw1) = Tensor::matmul_backward(&cache.x, w1, &g_pre)?;
            let gw2 = g_out_weights.into_iter().next().expect("w2 grad");
            let grads = match p {
                FfnParams::Full { .. } => FfnParams::Full { w1: gw1, w2: gw2 },
                _ => FfnParams::Shared { w1: gw1, w2: gw2 },
            };
            Ok((gx, grads))
        }
        (FfnParams::Factorized { w11, w12, .. }, Some(low)) => {
            let (g_low, g_w12) = Tensor::matmul_backward(low, w12, &g_pre)?;
            let (gx, g_w11) = Tensor::matmul_backward(&cache.x, w11, &g_low)?;
            let mut it = g_out_weights.into_iter();
            Ok((
                gx,
                FfnParams::Factorized {
                    w11: g_w11,
                    w12: g_w12,
                    w21: it.next().expect("w21 grad"),
                    w22: it.next().expect("w22 grad"),
                },
            ))
        }
        _ => Err(Error::State("ffn cache does not match parameter mode".into())),
    }
}
