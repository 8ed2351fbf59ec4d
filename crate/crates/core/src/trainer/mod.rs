//! Staged training: grow at each boundary, then run AdamW with a per-stage
//! warmup/decay learning rate.

mod optimizer;
mod run;
mod schedule;

pub use optimizer::{clip_grad_norm, lr_at, optimizer_step, OptimizerConfig, OptimizerState};
pub use run::{
    heldout_loss, heldout_set, loss_continuity_check, run_schedule, CheckpointKind, ContinuityReport, LogRow, MemorySink,
    RunSummary, TrainOptions, TrainSink, CONTINUITY_TOL,
};
pub use schedule::{Schedule, Stage};
