use serde::Serialize;

use crate::data::{gen_corpus, heldout_batch, make_batch, Batch, Batcher, DataConfig, Example, MaskingRule};
use crate::error::{Error, Result};
use crate::growth::{apply, perturb_ffn};
use crate::io::Checkpoint;
use crate::numerics::Rng;
use crate::transformer::{mlm_loss, mlm_loss_value, FfnMode, ModelConfig, Params};

use super::optimizer::{clip_grad_norm, lr_at, optimizer_step, OptimizerConfig, OptimizerState};
use super::schedule::Schedule;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainOptions {
    pub seed: u64,
    /// Emit a log row every this many global steps (and at each stage end).
    pub log_every: u64,
    /// Sequences in the held-out set and in each boundary probe batch.
    pub heldout_size: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            seed: 0,
            log_every: 10,
            heldout_size: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub step: u64,
    pub stage: usize,
    pub lr: f64,
    pub loss: f64,
}

impl LogRow {
    pub const CSV_HEADER: &'static str = "step,stage,lr,loss";

    pub fn csv(&self) -> String {
        format!("{},{},{},{}", self.step, self.stage, self.lr, self.loss)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum CheckpointKind {
    /// Last state of stage `stage_index`, before the next stage grows it.
    PreGrowth,
    /// First state of stage `stage_index`, right after growth.
    PostGrowth,
    Final,
}

impl CheckpointKind {
    /// Directory name used by file sinks.
    pub fn dir_name(&self, stage_index: usize) -> String {
        match self {
            CheckpointKind::PreGrowth => format!("stage{stage_index}_pre_growth"),
            CheckpointKind::PostGrowth => format!("stage{stage_index}_post_growth"),
            CheckpointKind::Final => "final".to_string(),
        }
    }
}

/// Receives log rows and checkpoints as training proceeds.
pub trait TrainSink {
    fn log(&mut self, row: &LogRow) -> Result<()>;
    fn checkpoint(&mut self, kind: CheckpointKind, ckpt: &Checkpoint) -> Result<()>;
}

/// Keeps everything in memory.
#[derive(Debug, Default)]
pub struct MemorySink {
    pub rows: Vec<LogRow>,
    pub checkpoints: Vec<(CheckpointKind, Checkpoint)>,
}

impl TrainSink for MemorySink {
    fn log(&mut self, row: &LogRow) -> Result<()> {
        self.rows.push(*row);
        Ok(())
    }

    fn checkpoint(&mut self, kind: CheckpointKind, ckpt: &Checkpoint) -> Result<()> {
        self.checkpoints.push((kind, ckpt.clone()));
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContinuityReport {
    pub stage_index: usize,
    pub loss_before: f64,
    pub loss_after: f64,
    pub diff: f64,
    pub expected_preserving: bool,
    /// `None` when the boundary is not expected to preserve the loss.
    pub pass: Option<bool>,
}

pub const CONTINUITY_TOL: f64 = 1e-9;

/// Whether the growth from `a` to `b` is one that leaves the function intact:
/// only the FFN storage changed, from shared or factorized to full.
fn preserving_transition(a: &ModelConfig, b: &ModelConfig) -> bool {
    let same_rest = a.layers == b.layers && a.pool_k == b.pool_k && a.d_model == b.d_model && a.d_ff == b.d_ff;
    let ffn_ok = a.ffn == b.ffn || (b.ffn == FfnMode::Full && !matches!(a.ffn, FfnMode::Full));
    same_rest && ffn_ok
}

/// Probe-batch MLM loss (dropout off) just before and just after a growth.
pub fn loss_continuity_check(pre: &Checkpoint, post: &Checkpoint, probe: &[Example]) -> Result<ContinuityReport> {
    if post.stage_index != pre.stage_index + 1 || post.global_step != pre.global_step {
        return Err(Error::Input(format!(
            "checkpoints are not from one boundary: stage {} step {} vs stage {} step {}",
            pre.stage_index, pre.global_step, post.stage_index, post.global_step
        )));
    }
    let rng = Rng::new(0);
    let loss_before = mlm_loss_value(probe, &pre.params, &pre.model, &rng, false)?;
    let loss_after = mlm_loss_value(probe, &post.params, &post.model, &rng, false)?;
    let diff = (loss_after - loss_before).abs();
    let expected = preserving_transition(&pre.model, &post.model);
    Ok(ContinuityReport {
        stage_index: post.stage_index,
        loss_before,
        loss_after,
        diff,
        expected_preserving: expected,
        pass: expected.then_some(diff <= CONTINUITY_TOL),
    })
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub final_checkpoint: Checkpoint,
    /// Held-out loss of the freshly initialised model.
    pub heldout_initial: f64,
    /// Held-out loss at the end of each stage.
    pub heldout_per_stage: Vec<f64>,
    pub boundaries: Vec<ContinuityReport>,
}

impl RunSummary {
    pub fn heldout_final(&self) -> f64 {
        *self.heldout_per_stage.last().expect("at least one stage")
    }
}

/// The held-out set: fresh sequences from the corpus's chain, truncated and
/// masked per `data`. Depends only on `data`.
pub fn heldout_set(data: &DataConfig, size: usize) -> Result<Batch> {
    heldout_batch(data, size, &Rng::new(data.seed).fork("heldout"))
}

pub fn heldout_loss(params: &Params, model: &ModelConfig, heldout: &[Example]) -> Result<f64> {
    mlm_loss_value(heldout, params, model, &Rng::new(0), false)
}

/// Train every stage of `schedule`, growing the model at each boundary.
pub fn run_schedule(schedule: &Schedule, opt: &OptimizerConfig, train: &TrainOptions, sink: &mut dyn TrainSink) -> Result<RunSummary> {
    let resolved = schedule.resolve()?;
    opt.validate()?;
    if train.log_every == 0 {
        return Err(Error::validation("train.log_every", "must be >= 1"));
    }
    if train.heldout_size == 0 {
        return Err(Error::validation("data.heldout_size", "must be >= 1"));
    }
    let root = Rng::new(train.seed);
    let corpus = gen_corpus(&schedule.data, &mut Rng::new(schedule.data.seed).fork("corpus"))?;
    let final_data = &resolved.last().expect("non-empty").1;
    let heldout = heldout_set(final_data, train.heldout_size)?;
    let mut batcher = Batcher::new(corpus.sequences.len(), root.fork("batches"));
    let mask_rng = root.fork("mask");
    let dropout_rng = root.fork("dropout");

    let mut model = schedule.model.clone();
    let mut data = schedule.data.clone();
    let mut params = Params::init(&model, &mut root.fork("init"))?;
    let heldout_initial = heldout_loss(&params, &model, &heldout)?;
    let mut state = OptimizerState::new(&params, &model)?;
    let mut global_step = 0u64;
    let mut heldout_per_stage = Vec::with_capacity(schedule.stages.len());
    let mut boundaries = Vec::new();
    let snapshot = |params: &Params, model: &ModelConfig, data: &DataConfig, stage: usize, step: u64| Checkpoint {
        model: model.clone(),
        data: data.clone(),
        stage_index: stage,
        global_step: step,
        rng_state: root.state(),
        params: params.clone(),
    };

    for (s, stage) in schedule.stages.iter().enumerate() {
        if s > 0 {
            let pre = snapshot(&params, &model, &data, s - 1, global_step);
            sink.checkpoint(CheckpointKind::PreGrowth, &pre)?;
            let grown = apply(&stage.ops, &params, &model, &data)?;
            let reshaped = !grown.params.tensors().iter().zip(params.tensors()).all(|(a, b)| a.shape() == b.shape())
                || grown.params.tensors().len() != params.tensors().len();
            (params, model, data) = (grown.params, grown.model, grown.data);
            if opt.growth_noise > 0.0 {
                perturb_ffn(&mut params, opt.growth_noise, &mut root.fork("growth_noise").fork_index(s as u64));
            }
            debug_assert_eq!((&model, &data), (&resolved[s].0, &resolved[s].1));
            let post = snapshot(&params, &model, &data, s, global_step);
            sink.checkpoint(CheckpointKind::PostGrowth, &post)?;
            let probe = heldout_set(&pre.data, train.heldout_size)?;
            boundaries.push(loss_continuity_check(&pre, &post, &probe)?);
            if !opt.carry_moments || reshaped {
                state = OptimizerState::new(&params, &model)?;
            }
            state.audit(&params)?;
        }
        let warmup = opt.stage_warmup(stage.steps);
        for t in 0..stage.steps {
            let idx = batcher.next_indices(stage.batch_size);
            let batch = make_batch(&corpus, &idx, &data, MaskingRule::default(), &mut mask_rng.fork_index(global_step))?;
            let (loss, mut grads) = mlm_loss(&batch, &params, &model, &dropout_rng.fork_index(global_step), true)?;
            if let Some(c) = opt.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            let lr = lr_at(t + 1, stage.steps, warmup, opt.peak_lr);
            optimizer_step(&mut params, &grads, &mut state, lr, opt)?;
            global_step += 1;
            if global_step % train.log_every == 0 || t + 1 == stage.steps {
                sink.log(&LogRow {
                    step: global_step,
                    stage: s,
                    lr,
                    loss,
                })?;
            }
        }
        heldout_per_stage.push(heldout_loss(&params, &model, &heldout)?);
    }
    let final_checkpoint = snapshot(&params, &model, &data, schedule.stages.len() - 1, global_step);
    sink.checkpoint(CheckpointKind::Final, &final_checkpoint)?;
    Ok(RunSummary {
        final_checkpoint,
        heldout_initial,
        heldout_per_stage,
        boundaries,
    })
}
