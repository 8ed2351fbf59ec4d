//! Analytic forward-pass Mult-Add accounting.
//!
//! Attention costs `2·N_kv·D²` for the key and value projections,
//! `2·N_q·D²` for the query and output projections and `2·N_q·N_kv·D` for
//! scores and context. A full or shared FFN costs `2·N·D·H_eff`; a
//! factorized one `2·N·h·(D+H)`. Embedding lookups and layer norms count
//! as zero. The only overhead term is the MLM head, `2·masks·D·V`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::transformer::{param_count, FfnMode, ModelConfig};

pub fn ffn_mult_adds(n: u64, d: u64, h: u64, mode: FfnMode) -> u64 {
    match mode {
        FfnMode::Full => 2 * n * d * h,
        FfnMode::Shared { k } => 2 * n * d * (h / k as u64),
        FfnMode::Factorized { rank } => 2 * n * rank as u64 * (d + h),
    }
}

pub fn attn_mult_adds(n_q: u64, n_kv: u64, d: u64) -> u64 {
    2 * n_kv * d * d + 2 * n_q * d * d + 2 * n_q * n_kv * d
}

/// Per-sequence forward cost of one optimizer step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct StepCost {
    pub attention: u64,
    pub ffn: u64,
    /// `attention + ffn`.
    pub layers: u64,
    /// MLM head; zero when overhead is not counted.
    pub overhead: u64,
    pub total: u64,
}

/// Layer 1 runs queries and FFN at `⌈N/k⌉` against `N` keys when pooled;
/// later layers run entirely at `⌈N/k⌉`. The masked-row exemption is
/// ignored.
pub fn model_mult_adds_per_step(config: &ModelConfig, train_len: usize, masks_per_seq: usize) -> StepCost {
    let n = train_len as u64;
    let d = config.d_model as u64;
    let h = config.d_ff as u64;
    let pooled = n.div_ceil(config.pool_k.max(1) as u64);
    let mut attention = 0;
    let mut ffn = 0;
    for layer in 0..config.layers {
        let n_kv = if layer == 0 { n } else { pooled };
        attention += attn_mult_adds(pooled, n_kv, d);
        ffn += ffn_mult_adds(pooled, d, h, config.ffn);
    }
    let overhead = 2 * masks_per_seq as u64 * d * config.vocab as u64;
    StepCost {
        attention,
        ffn,
        layers: attention + ffn,
        overhead,
        total: attention + ffn + overhead,
    }
}

/// One stage as seen by the cost model.
#[derive(Clone, Debug, PartialEq)]
pub struct StagePlan {
    pub steps: u64,
    pub model: ModelConfig,
    pub train_len: usize,
    pub masks_per_seq: usize,
    pub batch_size: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CostOptions {
    pub count_overhead: bool,
    /// Report FLOPs (`2 ×` Mult-Adds) instead of Mult-Adds.
    pub flops_x2: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageCost {
    pub stage: usize,
    pub steps: u64,
    pub layers: usize,
    pub ffn: String,
    pub pool_k: usize,
    pub train_len: usize,
    pub masks_per_seq: usize,
    pub batch_size: usize,
    pub params: u64,
    /// Per sequence.
    pub per_step: StepCost,
    /// `steps × batch_size × per_step.total`.
    pub total: u128,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub unit: &'static str,
    pub count_overhead: bool,
    pub stages: Vec<StageCost>,
    pub baseline: Vec<StageCost>,
    pub total: u128,
    pub baseline_total: u128,
    /// `baseline_total / total − 1`; `0.739` means +73.9%.
    pub speedup: f64,
}

impl CostReport {
    pub fn speedup_percent(&self) -> f64 {
        self.speedup * 100.0
    }

    /// Plain-text table, one row per stage.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let section = |out: &mut String, title: &str, rows: &[StageCost]| {
            out.push_str(&format!("{title}\n"));
            out.push_str(&format!(
                "{:>5} {:>10} {:>6} {:>14} {:>4} {:>6} {:>5} {:>5} {:>12} {:>20} {:>26}\n",
                "stage", "steps", "layers", "ffn", "pool", "len", "masks", "batch", "params", "per_step", "total"
            ));
            for s in rows {
                out.push_str(&format!(
                    "{:>5} {:>10} {:>6} {:>14} {:>4} {:>6} {:>5} {:>5} {:>12} {:>20} {:>26}\n",
                    s.stage,
                    s.steps,
                    s.layers,
                    s.ffn,
                    s.pool_k,
                    s.train_len,
                    s.masks_per_seq,
                    s.batch_size,
                    s.params,
                    s.per_step.total,
                    s.total
                ));
            }
        };
        section(&mut out, &format!("schedule ({})", self.unit), &self.stages);
        section(&mut out, &format!("baseline ({})", self.unit), &self.baseline);
        out.push_str(&format!("schedule total: {}\n", self.total));
        out.push_str(&format!("baseline total: {}\n", self.baseline_total));
        out.push_str(&format!("speedup: {:+.1}%\n", self.speedup_percent()));
        out
    }
}

fn stage_costs(stages: &[StagePlan], opts: CostOptions) -> Vec<StageCost> {
    let scale = if opts.flops_x2 { 2 } else { 1 };
    stages
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut c = model_mult_adds_per_step(&s.model, s.train_len, s.masks_per_seq);
            if !opts.count_overhead {
                c.overhead = 0;
            }
            c = StepCost {
                attention: c.attention * scale,
                ffn: c.ffn * scale,
                layers: c.layers * scale,
                overhead: c.overhead * scale,
                total: (c.layers + c.overhead) * scale,
            };
            StageCost {
                stage: i,
                steps: s.steps,
                layers: s.model.layers,
                ffn: s.model.ffn.to_string(),
                pool_k: s.model.pool_k,
                train_len: s.train_len,
                masks_per_seq: s.masks_per_seq,
                batch_size: s.batch_size,
                params: param_count(&s.model).total,
                per_step: c,
                total: s.steps as u128 * s.batch_size as u128 * c.total as u128,
            }
        })
        .collect()
}

fn cost_shape(s: &StagePlan) -> (usize, usize, usize, usize, usize, FfnMode, usize, usize, usize) {
    let m = &s.model;
    (m.layers, m.d_model, m.d_ff, m.heads, m.vocab, m.ffn, m.pool_k, s.train_len, s.masks_per_seq)
}

/// Compare a growth schedule against a baseline that must end in the same
/// configuration.
pub fn schedule_cost(schedule: &[StagePlan], baseline: &[StagePlan], opts: CostOptions) -> Result<CostReport> {
    let (Some(last), Some(base_last)) = (schedule.last(), baseline.last()) else {
        return Err(Error::validation("schedule", "needs at least one stage"));
    };
    if cost_shape(last) != cost_shape(base_last) {
        return Err(Error::validation(
            "schedule",
            format!(
                "final configuration differs from the baseline's (layers {} vs {}, ffn {} vs {}, pool {} vs {}, len {} vs {})",
                last.model.layers,
                base_last.model.layers,
                last.model.ffn,
                base_last.model.ffn,
                last.model.pool_k,
                base_last.model.pool_k,
                last.train_len,
                base_last.train_len
            ),
        ));
    }
    let stages = stage_costs(schedule, opts);
    let baseline = stage_costs(baseline, opts);
    let total: u128 = stages.iter().map(|s| s.total).sum();
    let baseline_total: u128 = baseline.iter().map(|s| s.total).sum();
    if total == 0 {
        return Err(Error::validation("schedule", "total cost is zero"));
    }
    Ok(CostReport {
        unit: if opts.flops_x2 { "flops" } else { "mult-adds" },
        count_overhead: opts.count_overhead,
        stages,
        baseline,
        total,
        baseline_total,
        speedup: baseline_total as f64 / total as f64 - 1.0,
    })
}
