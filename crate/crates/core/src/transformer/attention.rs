//! Multi-head attention as a sum over heads:
//! `Σ_m softmax(x_q W_Q,m W_K,m x_kvᵀ) x_kv W_V1,m W_V2,m`.
//!
//! The query and key/value streams may have different lengths; this is how
//! the pooled first layer shortens the sequence while still attending over
//! every token.

use crate::error::{Error, Result};
use crate::numerics::{dropout, dropout_backward, softmax_rows, softmax_rows_backward, DropoutMask, Rng, Tensor};

use super::{AttentionParams, ModelConfig};

#[derive(Clone, Debug)]
pub struct AttentionCache {
    x_q: Tensor,
    x_kv: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    probs: Vec<Tensor>,
    dropped: Vec<Tensor>,
    masks: Vec<DropoutMask>,
    ctx: Tensor,
    scale: f64,
    heads: usize,
}

#[derive(Clone, Debug)]
pub struct AttentionGrads {
    pub x_q: Tensor,
    pub x_kv: Tensor,
    pub params: AttentionParams,
}

fn score_scale(config: &ModelConfig) -> f64 {
    if config.attn_scale {
        1.0 / (config.head_dim() as f64).sqrt()
    } else {
        1.0
    }
}

pub fn attention_forward(
    x_q: &Tensor,
    x_kv: &Tensor,
    p: &AttentionParams,
    config: &ModelConfig,
    rng: &mut Rng,
    training: bool,
) -> Result<(Tensor, AttentionCache)> {
    let d = config.d_model;
    if x_q.cols() != d || x_kv.cols() != d {
        return Err(Error::dim("attention_forward", x_q.shape(), x_kv.shape()));
    }
    let dh = config.head_dim();
    let scale = score_scale(config);
    let q = x_q.matmul(&p.w_q)?;
    let k = x_kv.matmul(&p.w_k_t)?;
    let v = x_kv.matmul(&p.w_v1)?;
    let mut ctx = Tensor::zeros(&[x_q.rows(), d]);
    let mut probs = Vec::with_capacity(config.heads);
    let mut dropped = Vec::with_capacity(config.heads);
    let mut masks = Vec::with_capacity(config.heads);
    for m in 0..config.heads {
        let qm = q.col_block(m * dh, dh)?;
        let km = k.col_block(m * dh, dh)?;
        let vm = v.col_block(m * dh, dh)?;
        let scores = qm.matmul_nt(&km)?.scale(scale);
        let pm = softmax_rows(&scores)?;
        let (pd, mask) = dropout(&pm, config.dropout, rng, training)?;
        ctx.set_col_block(m * dh, &pd.matmul(&vm)?)?;
        probs.push(pm);
        dropped.push(pd);
        masks.push(mask);
    }
    // Σ_m ctx_m · W_V2,m  ==  concat(ctx) · W_V2ᵀ-stored
    let out = ctx.matmul_nt(&p.w_v2_t)?;
    Ok((
        out,
        AttentionCache {
            x_q: x_q.clone(),
            x_kv: x_kv.clone(),
            q,
            k,
            v,
            probs,
            dropped,
            masks,
            ctx,
            scale,
            heads: config.heads,
        },
    ))
}

pub fn attention_backward(cache: &AttentionCache, p: &AttentionParams, g: &Tensor) -> Result<AttentionGrads> {
    let d = cache.q.cols();
    let dh = d / cache.heads;
    // out = ctx · W_V2_tᵀ
    let g_ctx = g.matmul(&p.w_v2_t)?;
    let g_w_v2_t = g.matmul_tn(&cache.ctx)?;
    let mut g_q = Tensor::zeros(cache.q.shape());
    let mut g_k = Tensor::zeros(cache.k.shape());
    let mut g_v = Tensor::zeros(cache.v.shape());
    for m in 0..cache.heads {
        let qm = cache.q.col_block(m * dh, dh)?;
        let km = cache.k.col_block(m * dh, dh)?;
        let vm = cache.v.col_block(m * dh, dh)?;
        let gcm = g_ctx.col_block(m * dh, dh)?;
        let g_pd = gcm.matmul_nt(&vm)?;
        g_v.set_col_block(m * dh, &cache.dropped[m].matmul_tn(&gcm)?)?;
        let g_p = dropout_backward(&cache.masks[m], &g_pd)?;
        let g_s = softmax_rows_backward(&cache.probs[m], &g_p)?.scale(cache.scale);
        g_q.set_col_block(m * dh, &g_s.matmul(&km)?)?;
        g_k.set_col_block(m * dh, &g_s.matmul_tn(&qm)?)?;
    }
    let x_q = g_q.matmul_nt(&p.w_q)?;
    let mut x_kv = g_k.matmul_nt(&p.w_k_t)?;
    x_kv.add_assign(&g_v.matmul_nt(&p.w_v1)?)?;
    Ok(AttentionGrads {
        x_q,
        x_kv,
        params: AttentionParams {
            w_q: cache.x_q.matmul_tn(&g_q)?,
            w_k_t: cache.x_kv.matmul_tn(&g_k)?,
            w_v1: cache.x_kv.matmul_tn(&g_v)?,
            w_v2_t: g_w_v2_t,
        },
    })
}
