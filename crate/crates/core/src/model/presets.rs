//! Reference configurations of the 47M-parameter Wikitext-103 models.
//!
//! The model width is not published with these hyperparameters; 412 is the
//! width that reproduces the published compute figures and is used by
//! default. The vocabulary is the 8k sub-word vocabulary.

use super::{MlpSpec, ModelSpec};
use crate::attention::AttentionConfig;

pub const D_MODEL_47M: usize = 412;
pub const VOCAB_47M: usize = 8000;

/// Dense Transformer-XL baseline: 10 heads of width 41, `d_ff` 2053.
pub fn dense_47m(d_model: usize) -> ModelSpec {
    ModelSpec {
        n_layers: 16,
        d_model,
        vocab_size: VOCAB_47M,
        chunk_len: 256,
        tied_embeddings: false,
        dropout: 0.1,
        n_classes: None,
        attention: AttentionConfig::dense(d_model, 10, 41).with_context(2),
        mlp: MlpSpec::Dense { d_ff: 2053 },
    }
}

/// SwitchHead with 2 heads of 5 experts (published sizes: `d_head` 76, `d_ff` 2080).
pub fn switchhead_47m(d_model: usize) -> ModelSpec {
    ModelSpec {
        attention: AttentionConfig::switchhead(d_model, 2, 76, 5, 2).with_context(2),
        mlp: MlpSpec::Dense { d_ff: 2080 },
        ..dense_47m(d_model)
    }
}

/// SwitchHead attention with a 16-expert MLP of total width 1648.
pub fn switchall_47m(d_model: usize) -> ModelSpec {
    ModelSpec {
        dropout: 0.0,
        mlp: MlpSpec::SigmaMoe { n_experts: 16, k_active: 4, d_exp: 103, force_unit_gates: false },
        ..switchhead_47m(d_model)
    }
}
