//! Pre-norm encoder stack, MLM head, and the batch loss with its gradient.
//!
//! Each layer computes `x ← x + Att(LN(x))`, `x ← x + FFN(LN(x))`. With
//! `pool_k > 1`, the first layer's query stream and residual are mean-pooled
//! over unmasked tokens (masked positions keep their own row) while keys and
//! values see the full sequence; every later layer runs at the pooled length.

use crate::data::Example;
use crate::error::{Error, Result};
use crate::numerics::{
    cross_entropy_logits, dropout, dropout_backward, layer_norm, layer_norm_backward, DropoutMask,
    LayerNormCache, PoolPlan, Rng, Tensor,
};

use super::attention::{attention_backward, attention_forward, AttentionCache};
use super::ffn::{ffn_backward, ffn_forward, Activation, FfnCache};
use super::{LayerParams, ModelConfig, Params};

pub const LAYER_NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `|masked| × V`; `None` when no positions are masked.
    pub logits: Option<Tensor>,
    /// Final hidden states, `n' × D`.
    pub hidden: Tensor,
    /// Row of `hidden` holding each masked position.
    pub masked_rows: Vec<usize>,
}

struct LayerCache {
    pool: Option<PoolPlan>,
    ln_attn: LayerNormCache,
    attn: AttentionCache,
    attn_drop: DropoutMask,
    ln_ffn: LayerNormCache,
    ffn: FfnCache,
    ffn_drop: DropoutMask,
}

pub(crate) struct EncoderCache {
    ids: Vec<usize>,
    layers: Vec<LayerCache>,
    gathered: Option<Tensor>,
    masked_rows: Vec<usize>,
    hidden_rows: usize,
}

fn check_inputs(ids: &[usize], masked: &[usize], config: &ModelConfig) -> Result<()> {
    let n = ids.len();
    if n == 0 {
        return Err(Error::Input("empty token sequence".into()));
    }
    if n > config.max_len {
        return Err(Error::Input(format!("sequence length {n} exceeds max_len {}", config.max_len)));
    }
    if let Some(&t) = ids.iter().find(|&&t| t >= config.vocab) {
        return Err(Error::Input(format!("token id {t} outside vocabulary of {}", config.vocab)));
    }
    for (i, &p) in masked.iter().enumerate() {
        if p >= n || (i > 0 && masked[i - 1] >= p) {
            return Err(Error::Input(format!(
                "masked positions must be strictly increasing within [0, {n}), got {masked:?}"
            )));
        }
    }
    Ok(())
}

fn layer_forward(
    x: &Tensor,
    lp: &LayerParams,
    pool: Option<PoolPlan>,
    config: &ModelConfig,
    rng: &mut Rng,
    training: bool,
) -> Result<(Tensor, LayerCache)> {
    let (h, ln_attn) = layer_norm(x, &lp.attn_norm_gain, &lp.attn_norm_bias, LAYER_NORM_EPS)?;
    let (q_in, residual) = match &pool {
        Some(plan) => (plan.apply(&h)?, plan.apply(x)?),
        None => (h.clone(), x.clone()),
    };
    let (att, attn) = attention_forward(&q_in, &h, &lp.attn, config, rng, training)?;
    let (att, attn_drop) = dropout(&att, config.dropout, rng, training)?;
    let x1 = residual.add(&att)?;
    let (h2, ln_ffn) = layer_norm(&x1, &lp.ffn_norm_gain, &lp.ffn_norm_bias, LAYER_NORM_EPS)?;
    let (f, ffn) = ffn_forward(&h2, &lp.ffn, config.dropout, Activation::Gelu, rng, training)?;
    let (f, ffn_drop) = dropout(&f, config.dropout, rng, training)?;
    let x2 = x1.add(&f)?;
    Ok((
        x2,
        LayerCache {
            pool,
            ln_attn,
            attn,
            attn_drop,
            ln_ffn,
            ffn,
            ffn_drop,
        },
    ))
}

fn layer_backward(cache: &LayerCache, lp: &LayerParams, g: &Tensor) -> Result<(Tensor, LayerParams)> {
    let g_f = dropout_backward(&cache.ffn_drop, g)?;
    let (g_h2, g_ffn) = ffn_backward(&cache.ffn, &lp.ffn, &g_f)?;
    let ln2 = layer_norm_backward(&cache.ln_ffn, &lp.ffn_norm_gain, &g_h2)?;
    let g_x1 = g.add(&ln2.x)?;
    let g_att = dropout_backward(&cache.attn_drop, &g_x1)?;
    let ag = attention_backward(&cache.attn, &lp.attn, &g_att)?;
    let (g_h, g_resid) = match &cache.pool {
        Some(plan) => (ag.x_kv.add(&plan.backward(&ag.x_q)?)?, plan.backward(&g_x1)?),
        None => (ag.x_kv.add(&ag.x_q)?, g_x1),
    };
    let ln1 = layer_norm_backward(&cache.ln_attn, &lp.attn_norm_gain, &g_h)?;
    let g_x = g_resid.add(&ln1.x)?;
    Ok((
        g_x,
        LayerParams {
            attn: ag.params,
            attn_norm_gain: ln1.gain,
            attn_norm_bias: ln1.bias,
            ffn: g_ffn,
            ffn_norm_gain: ln2.gain,
            ffn_norm_bias: ln2.bias,
        },
    ))
}

pub(crate) fn forward_cached(
    ids: &[usize],
    masked: &[usize],
    params: &Params,
    config: &ModelConfig,
    rng: &mut Rng,
    training: bool,
) -> Result<(EncoderOutput, EncoderCache)> {
    check_inputs(ids, masked, config)?;
    if params.layers.len() != config.layers {
        return Err(Error::State(format!(
            "params have {} layers, config says {}",
            params.layers.len(),
            config.layers
        )));
    }
    let n = ids.len();
    let d = config.d_model;
    let mut x = Tensor::zeros(&[n, d]);
    for (i, &t) in ids.iter().enumerate() {
        let row = x.row_mut(i);
        for ((o, &a), &b) in row.iter_mut().zip(params.token_emb.row(t)).zip(params.pos_emb.row(i)) {
            *o = a + b;
        }
    }
    let first_pool = if config.pool_k > 1 {
        Some(PoolPlan::with_exemptions(n, masked, config.pool_k)?)
    } else {
        None
    };
    let masked_rows: Vec<usize> = match &first_pool {
        Some(plan) => masked
            .iter()
            .map(|&p| plan.output_index(p).expect("masked position is inside the plan"))
            .collect(),
        None => masked.to_vec(),
    };
    let mut layers = Vec::with_capacity(config.layers);
    let mut pool = first_pool;
    for lp in &params.layers {
        let (next, cache) = layer_forward(&x, lp, pool.take(), config, rng, training)?;
        x = next;
        layers.push(cache);
    }
    let (logits, gathered) = if masked_rows.is_empty() {
        (None, None)
    } else {
        let gathered = x.gather_rows(&masked_rows)?;
        let logits = gathered.matmul(&params.head_w)?.add_row_vector(&params.head_b)?;
        (Some(logits), Some(gathered))
    };
    let hidden_rows = x.rows();
    Ok((
        EncoderOutput {
            logits,
            hidden: x,
            masked_rows: masked_rows.clone(),
        },
        EncoderCache {
            ids: ids.to_vec(),
            layers,
            gathered,
            masked_rows,
            hidden_rows,
        },
    ))
}

/// Forward pass returning logits at the masked positions and the final
/// hidden states.
pub fn encoder_forward(
    ids: &[usize],
    masked: &[usize],
    params: &Params,
    config: &ModelConfig,
    rng: &mut Rng,
    training: bool,
) -> Result<EncoderOutput> {
    forward_cached(ids, masked, params, config, rng, training).map(|(out, _)| out)
}

/// Accumulate `∂loss/∂params` into `grads` given `∂loss/∂logits`.
pub(crate) fn backward_into(
    cache: &EncoderCache,
    params: &Params,
    config: &ModelConfig,
    g_logits: &Tensor,
    grads: &mut Params,
) -> Result<()> {
    let gathered = cache
        .gathered
        .as_ref()
        .ok_or_else(|| Error::Input("no masked positions to backpropagate from".into()))?;
    let (g_gathered, g_head_w) = Tensor::matmul_backward(gathered, &params.head_w, g_logits)?;
    grads.head_w.add_assign(&g_head_w)?;
    grads.head_b.add_assign(&g_logits.sum_rows()?)?;
    let mut g = Tensor::zeros(&[cache.hidden_rows, config.d_model]);
    for (k, &r) in cache.masked_rows.iter().enumerate() {
        for (o, &v) in g.row_mut(r).iter_mut().zip(g_gathered.row(k)) {
            *o += v;
        }
    }
    for (l, lc) in cache.layers.iter().enumerate().rev() {
        let (g_x, lg) = layer_backward(lc, &params.layers[l], &g)?;
        let dst = &mut grads.layers[l];
        dst.attn.w_q.add_assign(&lg.attn.w_q)?;
        dst.attn.w_k_t.add_assign(&lg.attn.w_k_t)?;
        dst.attn.w_v1.add_assign(&lg.attn.w_v1)?;
        dst.attn.w_v2_t.add_assign(&lg.attn.w_v2_t)?;
        dst.attn_norm_gain.add_assign(&lg.attn_norm_gain)?;
        dst.attn_norm_bias.add_assign(&lg.attn_norm_bias)?;
        dst.ffn_norm_gain.add_assign(&lg.ffn_norm_gain)?;
        dst.ffn_norm_bias.add_assign(&lg.ffn_norm_bias)?;
        use super::FfnParams::*;
        match (&mut dst.ffn, &lg.ffn) {
            (Full { w1, w2 }, Full { w1: g1, w2: g2 }) | (Shared { w1, w2 }, Shared { w1: g1, w2: g2 }) => {
                w1.add_assign(g1)?;
                w2.add_assign(g2)?;
            }
            (
                Factorized { w11, w12, w21, w22 },
                Factorized {
                    w11: g11,
                    w12: g12,
                    w21: g21,
                    w22: g22,
                },
            ) => {
                w11.add_assign(g11)?;
                w12.add_assign(g12)?;
                w21.add_assign(g21)?;
                w22.add_assign(g22)?;
            }
            _ => return Err(Error::State("gradient buffer has a different ffn mode".into())),
        }
        g = g_x;
    }
    for (i, &t) in cache.ids.iter().enumerate() {
        for (o, &v) in grads.token_emb.row_mut(t).iter_mut().zip(g.row(i)) {
            *o += v;
        }
        for (o, &v) in grads.pos_emb.row_mut(i).iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    Ok(())
}

fn total_masked(batch: &[Example]) -> Result<usize> {
    let total: usize = batch.iter().map(|e| e.masked_positions.len()).sum();
    if total == 0 {
        return Err(Error::Input("batch has no masked positions".into()));
    }
    Ok(total)
}

/// Mean cross-entropy over every masked position in the batch, with
/// gradients shaped like `params`. Example `i` draws its dropout from
/// `rng.fork_index(i)`.
pub fn mlm_loss(
    batch: &[Example],
    params: &Params,
    config: &ModelConfig,
    rng: &Rng,
    training: bool,
) -> Result<(f64, Params)> {
    let total = total_masked(batch)? as f64;
    let mut grads = params.zeros_like();
    let mut loss = 0.0;
    for (i, ex) in batch.iter().enumerate() {
        if ex.masked_positions.is_empty() {
            continue;
        }
        let mut r = rng.fork_index(i as u64);
        let (out, cache) = forward_cached(&ex.input_ids, &ex.masked_positions, params, config, &mut r, training)?;
        let logits = out.logits.as_ref().expect("masked positions present");
        let (l, g) = cross_entropy_logits(logits, &ex.targets)?;
        let weight = ex.masked_positions.len() as f64 / total;
        loss += l * weight;
        backward_into(&cache, params, config, &g.scale(weight), &mut grads)?;
    }
    Ok((loss, grads))
}

/// Loss only, without gradients.
pub fn mlm_loss_value(batch: &[Example], params: &Params, config: &ModelConfig, rng: &Rng, training: bool) -> Result<f64> {
    let total = total_masked(batch)? as f64;
    let mut loss = 0.0;
    for (i, ex) in batch.iter().enumerate() {
        if ex.masked_positions.is_empty() {
            continue;
        }
        let mut r = rng.fork_index(i as u64);
        let out = encoder_forward(&ex.input_ids, &ex.masked_positions, params, config, &mut r, training)?;
        let (l, _) = cross_entropy_logits(out.logits.as_ref().expect("masked"), &ex.targets)?;
        loss += l * ex.masked_positions.len() as f64 / total;
    }
    Ok(loss)
}
