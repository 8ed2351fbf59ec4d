use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the feedforward block stores its weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum FfnMode {
    /// `W1: D×H`, `W2: H×D`.
    Full,
    /// `W1': D×(H/k)`, `W2': (H/k)×D`; grows by tiling `k` copies.
    Shared { k: usize },
    /// Rank-`rank` factors of each of `W1` and `W2`.
    Factorized { rank: usize },
}

impl fmt::Display for FfnMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FfnMode::Full => write!(f, "full"),
            FfnMode::Shared { k } => write!(f, "shared:{k}"),
            FfnMode::Factorized { rank } => write!(f, "factorized:{rank}"),
        }
    }
}

impl FromStr for FfnMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parameter(format!("ffn mode `{s}`: expected full, shared:<k> or factorized:<h>"));
        match s.split_once(':') {
            None if s == "full" => Ok(FfnMode::Full),
            Some(("shared", k)) => Ok(FfnMode::Shared {
                k: k.parse().map_err(|_| bad())?,
            }),
            Some(("factorized", h)) => Ok(FfnMode::Factorized {
                rank: h.parse().map_err(|_| bad())?,
            }),
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for FfnMode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<FfnMode> for String {
    fn from(m: FfnMode) -> String {
        m.to_string()
    }
}

fn default_true() -> bool {
    true
}

fn default_pool() -> usize {
    1
}

fn default_ffn() -> FfnMode {
    FfnMode::Full
}

/// Encoder architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of encoder layers `L`.
    pub layers: usize,
    /// Embedding width `D`.
    pub d_model: usize,
    /// Full FFN hidden width `H` (also the target width of reduced modes).
    pub d_ff: usize,
    /// Attention heads `M`.
    pub heads: usize,
    /// Rows in the position table.
    pub max_len: usize,
    /// Vocabulary size `V`.
    pub vocab: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "default_ffn")]
    pub ffn: FfnMode,
    /// Query pooling window for the first layer; 1 disables pooling.
    #[serde(default = "default_pool")]
    pub pool_k: usize,
    /// Scale attention scores by `1/√(D/M)`.
    #[serde(default = "default_true")]
    pub attn_scale: bool,
}

impl ModelConfig {
    /// Desk-scale defaults: `L=4, D=32, H=64, M=2, N_max=128, V=64`.
    pub fn desk() -> Self {
        ModelConfig {
            layers: 4,
            d_model: 32,
            d_ff: 64,
            heads: 2,
            max_len: 128,
            vocab: 64,
            dropout: 0.1,
            ffn: FfnMode::Full,
            pool_k: 1,
            attn_scale: true,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Hidden width actually stored by the FFN in the current mode.
    pub fn ffn_hidden(&self) -> usize {
        match self.ffn {
            FfnMode::Shared { k } => self.d_ff / k,
            _ => self.d_ff,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.layers", self.layers),
            ("model.d_model", self.d_model),
            ("model.d_ff", self.d_ff),
            ("model.heads", self.heads),
            ("model.max_len", self.max_len),
            ("model.vocab", self.vocab),
            ("model.pool_k", self.pool_k),
        ];
        for (path, v) in positive {
            if v == 0 {
                return Err(Error::validation(path, "must be >= 1"));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::validation(
                "model.heads",
                format!("d_model {} not divisible by heads {}", self.d_model, self.heads),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::validation("model.dropout", "must be in [0, 1)"));
        }
        match self.ffn {
            FfnMode::Full => {}
            FfnMode::Shared { k } => {
                if k == 0 || self.d_ff % k != 0 {
                    return Err(Error::validation(
                        "model.ffn",
                        format!("shared:{k} requires k >= 1 dividing d_ff {}", self.d_ff),
                    ));
                }
            }
            FfnMode::Factorized { rank } => {
                if rank == 0 || rank > self.d_model.min(self.d_ff) {
                    return Err(Error::validation(
                        "model.ffn",
                        format!("factorized:{rank} requires 1 <= h <= min(D, H)"),
                    ));
                }
            }
        }
        Ok(())
    }
}
