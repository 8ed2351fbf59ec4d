use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cost::{schedule_cost, CostOptions, CostReport};
use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::growth::GrowthOp;
use crate::trainer::{OptimizerConfig, Schedule, Stage, TrainOptions};
use crate::transformer::ModelConfig;

/// Built-in configurations, selectable by name wherever a config path is
/// accepted.
pub const PRESETS: &[(&str, &str)] = &[
    ("stack_base", include_str!("../../presets/stack_base.toml")),
    ("compound_base", include_str!("../../presets/compound_base.toml")),
    ("stack_base_desk", include_str!("../../presets/stack_base_desk.toml")),
    ("compound_base_desk", include_str!("../../presets/compound_base_desk.toml")),
];

fn default_markov_order() -> usize {
    1
}

fn default_heldout() -> usize {
    64
}

fn default_batch() -> usize {
    16
}

fn default_log_every() -> u64 {
    10
}

fn yes() -> bool {
    true
}

/// Corpus and masking settings. The vocabulary comes from the model and the
/// mask token is always its last id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub seed: u64,
    pub corpus_size: usize,
    pub seq_len_full: usize,
    pub train_len: usize,
    pub masks_per_seq: usize,
    #[serde(default = "default_markov_order")]
    pub markov_order: usize,
    #[serde(default = "default_heldout")]
    pub heldout_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSection {
    pub steps: u64,
    /// Comma-separated growth ops applied at the start of the stage.
    #[serde(default)]
    pub ops: String,
    #[serde(default)]
    pub train_len: Option<usize>,
    #[serde(default)]
    pub masks_per_seq: Option<usize>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    #[serde(default = "yes")]
    pub count_overhead: bool,
    #[serde(default)]
    pub flops_x2: bool,
}

impl Default for CostSection {
    fn default() -> Self {
        CostSection {
            count_overhead: true,
            flops_x2: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            seed: 0,
            log_every: default_log_every(),
        }
    }
}

/// A complete run description as read from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataSection,
    pub schedule: Vec<StageSection>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub cost: CostSection,
    #[serde(default)]
    pub train: TrainSection,
}

impl RunConfig {
    /// Parse and validate.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn preset_text(name: &str) -> Option<&'static str> {
        PRESETS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
    }

    pub fn preset(name: &str) -> Option<Result<Self>> {
        Self::preset_text(name).map(Self::from_toml_str)
    }

    /// A preset name, or else a path to a TOML file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        match Self::preset(name_or_path) {
            Some(c) => c,
            None => Self::load(Path::new(name_or_path)),
        }
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            vocab: self.model.vocab,
            corpus_size: self.data.corpus_size,
            seq_len_full: self.data.seq_len_full,
            train_len: self.data.train_len,
            masks_per_seq: self.data.masks_per_seq,
            mask_token_id: self.model.vocab.saturating_sub(1),
            markov_order: self.data.markov_order,
            seed: self.data.seed,
        }
    }

    pub fn schedule(&self) -> Result<Schedule> {
        let stages = self
            .schedule
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let ops = GrowthOp::parse_list(&s.ops).map_err(|e| Error::validation(format!("schedule[{i}].ops"), e.to_string()))?;
                Ok(Stage {
                    steps: s.steps,
                    ops,
                    train_len: s.train_len,
                    masks_per_seq: s.masks_per_seq,
                    batch_size: s.batch_size,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Schedule {
            model: self.model.clone(),
            data: self.data_config(),
            stages,
        })
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            seed: self.train.seed,
            log_every: self.train.log_every,
            heldout_size: self.data.heldout_size,
        }
    }

    pub fn cost_options(&self) -> CostOptions {
        CostOptions {
            count_overhead: self.cost.count_overhead,
            flops_x2: self.cost.flops_x2,
        }
    }

    /// Every section, with errors prefixed by their key path.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data_config().validate()?;
        if self.data.heldout_size == 0 {
            return Err(Error::validation("data.heldout_size", "must be >= 1"));
        }
        self.optimizer.validate()?;
        if self.train.log_every == 0 {
            return Err(Error::validation("train.log_every", "must be >= 1"));
        }
        self.schedule()?.validate()
    }

    /// Cost of the schedule against the same number of steps on its final
    /// configuration.
    pub fn plan(&self, opts: CostOptions) -> Result<CostReport> {
        let schedule = self.schedule()?;
        schedule_cost(&schedule.plan()?, &schedule.baseline()?, opts)
    }
}
