use crate::cost::StagePlan;
use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::growth::{apply_config, GrowthOp};
use crate::transformer::ModelConfig;

/// A run of optimizer steps at one architecture, preceded by growth.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub steps: u64,
    /// Applied at the start of the stage; must be empty for stage 0.
    pub ops: Vec<GrowthOp>,
    /// Declared truncation length, checked against the length reached.
    pub train_len: Option<usize>,
    /// Declared masks per sequence, checked like `train_len`.
    pub masks_per_seq: Option<usize>,
    pub batch_size: usize,
}

impl Stage {
    pub fn new(steps: u64, ops: Vec<GrowthOp>, batch_size: usize) -> Self {
        Stage {
            steps,
            ops,
            train_len: None,
            masks_per_seq: None,
            batch_size,
        }
    }
}

/// Initial configs plus the stages that grow them.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub stages: Vec<Stage>,
}

impl Schedule {
    /// Configs in force during each stage, after that stage's growth.
    pub fn resolve(&self) -> Result<Vec<(ModelConfig, DataConfig)>> {
        self.model.validate()?;
        self.data.validate()?;
        if self.model.vocab != self.data.vocab {
            return Err(Error::validation(
                "data.vocab",
                format!("{} differs from model.vocab {}", self.data.vocab, self.model.vocab),
            ));
        }
        if self.data.seq_len_full > self.model.max_len {
            return Err(Error::validation(
                "data.seq_len_full",
                format!("{} exceeds model.max_len {}", self.data.seq_len_full, self.model.max_len),
            ));
        }
        if self.stages.is_empty() {
            return Err(Error::validation("schedule", "needs at least one stage"));
        }
        let mut model = self.model.clone();
        let mut data = self.data.clone();
        let mut out = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate() {
            let path = |f: &str| format!("schedule[{i}].{f}");
            if stage.steps == 0 {
                return Err(Error::validation(path("steps"), "must be >= 1"));
            }
            if stage.batch_size == 0 {
                return Err(Error::validation(path("batch_size"), "must be >= 1"));
            }
            if i == 0 && !stage.ops.is_empty() {
                return Err(Error::validation(path("ops"), "the first stage cannot grow"));
            }
            (model, data) = apply_config(&stage.ops, &model, &data).map_err(|e| Error::validation(path("ops"), e.to_string()))?;
            if let Some(len) = stage.train_len.filter(|&l| l != data.train_len) {
                return Err(Error::validation(
                    path("train_len"),
                    format!("declared {len}, but the stage trains at {}", data.train_len),
                ));
            }
            if let Some(m) = stage.masks_per_seq.filter(|&m| m != data.masks_per_seq) {
                return Err(Error::validation(
                    path("masks_per_seq"),
                    format!("declared {m}, but the stage masks {}", data.masks_per_seq),
                ));
            }
            out.push((model.clone(), data.clone()));
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.resolve().map(|_| ())
    }

    pub fn total_steps(&self) -> u64 {
        self.stages.iter().map(|s| s.steps).sum()
    }

    pub fn final_configs(&self) -> Result<(ModelConfig, DataConfig)> {
        Ok(self.resolve()?.pop().expect("at least one stage"))
    }

    pub fn plan(&self) -> Result<Vec<StagePlan>> {
        Ok(self
            .resolve()?
            .into_iter()
            .zip(&self.stages)
            .map(|((model, data), s)| StagePlan {
                steps: s.steps,
                model,
                train_len: data.train_len,
                masks_per_seq: data.masks_per_seq,
                batch_size: s.batch_size,
            })
            .collect())
    }

    /// The same number of steps spent entirely on the final configuration.
    pub fn baseline(&self) -> Result<Vec<StagePlan>> {
        let mut last = self.plan()?.pop().expect("at least one stage");
        last.steps = self.total_steps();
        Ok(vec![last])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::FfnMode;

    fn schedule() -> Schedule {
        let mut model = ModelConfig::desk();
        model.layers = 1;
        model.ffn = FfnMode::Shared { k: 2 };
        model.pool_k = 2;
        Schedule {
            model,
            data: DataConfig::desk(),
            stages: vec![
                Stage::new(10, vec![], 4),
                Stage::new(10, GrowthOp::parse_list("stack:2").unwrap(), 4),
                Stage::new(10, GrowthOp::parse_list("stack:4,unshare,unpool").unwrap(), 4),
            ],
        }
    }

    #[test]
    fn resolves_each_stage() {
        let r = schedule().resolve().unwrap();
        assert_eq!(r.iter().map(|(m, _)| m.layers).collect::<Vec<_>>(), vec![1, 2, 4]);
        assert_eq!(r[2].0.ffn, FfnMode::Full);
        assert_eq!(r[2].0.pool_k, 1);
        let base = schedule().baseline().unwrap();
        assert_eq!(base.len(), 1);
        assert_eq!((base[0].steps, base[0].model.layers), (30, 4));
    }

    #[test]
    fn error_paths() {
        let mut s = schedule();
        s.stages[1].ops = vec![GrowthOp::DefactorizeFfn];
        let e = s.validate().unwrap_err().to_string();
        assert!(e.starts_with("schedule[1].ops:"), "{e}");

        let mut s = schedule();
        s.stages[0].ops = vec![GrowthOp::Unpool];
        assert!(s.validate().unwrap_err().to_string().starts_with("schedule[0].ops"));

        let mut s = schedule();
        s.stages[2].steps = 0;
        assert!(s.validate().unwrap_err().to_string().starts_with("schedule[2].steps"));

        let mut s = schedule();
        s.stages[1].train_len = Some(64);
        assert!(s.validate().unwrap_err().to_string().starts_with("schedule[1].train_len"));
    }
}
