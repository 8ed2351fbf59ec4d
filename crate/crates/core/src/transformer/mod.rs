//! Transformer encoder with masked-LM head, including the reduced
//! configurations (shared or factorized FFN, pooled first-layer queries)
//! used before growth.

mod attention;
mod config;
mod encoder;
mod ffn;
mod params;

pub use attention::{attention_backward, attention_forward, AttentionCache, AttentionGrads};
pub use config::{FfnMode, ModelConfig};
pub use encoder::{encoder_forward, mlm_loss, mlm_loss_value, EncoderOutput, LAYER_NORM_EPS};
pub use ffn::{ffn_backward, ffn_forward, Activation, FfnCache};
pub use params::{layout, param_count, AttentionParams, FfnParams, LayerParams, ParamCount, Params, TensorKind};
