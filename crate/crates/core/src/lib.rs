//! Progressive compound growth for Transformer masked-language-model
//! pre-training.
//!
//! The crate provides a small f64 Transformer encoder with hand-written
//! backward passes, the growth operators that move a reduced model
//! (shallow, FFN-shared or factorized, query-pooled, short-sequence) to a
//! larger one, a staged trainer with per-stage learning-rate reset, and an
//! analytic Mult-Add cost model for whole growth schedules.

pub mod cost;
pub mod data;
pub mod error;
pub mod growth;
pub mod io;
pub mod numerics;
pub mod trainer;
pub mod transformer;

pub use cost::{CostReport, StageCost, StepCost};
pub use data::{Batch, DataConfig, Example, MaskingRule};
pub use error::{Error, Result};
pub use growth::GrowthOp;
pub use io::{Checkpoint, RunConfig};
pub use numerics::{Rng, Tensor};
pub use trainer::{Schedule, Stage};
pub use transformer::{FfnMode, ModelConfig, Params};
