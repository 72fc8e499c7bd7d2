//! Closed-form parameter count.
//!
//! Counted: token embedding, every projection and selection matrix, all
//! biases, the XL position biases, layer-norm gains and biases (two per
//! block plus the final one) and the readout. A tied readout contributes
//! only its bias.

use super::{MlpSpec, ModelSpec};

/// Weights plus optional bias of one `d_in -> d_out` affine map.
pub fn linear_params(d_in: usize, d_out: usize, bias: bool) -> usize {
    d_in * d_out + if bias { d_out } else { 0 }
}

fn mlp_params(mlp: &MlpSpec, d: usize) -> usize {
    match *mlp {
        MlpSpec::Dense { d_ff } => linear_params(d, d_ff, true) + linear_params(d_ff, d, true),
        MlpSpec::SigmaMoe { n_experts, d_exp, .. } => {
            linear_params(d, n_experts, false) + n_experts * (linear_params(d, d_exp, false) + linear_params(d_exp, d, false))
        }
    }
}

pub fn count_params(spec: &ModelSpec) -> usize {
    let d = spec.d_model;
    let layer_norm = 2 * d;
    let block = 2 * layer_norm + spec.attention.param_count() + mlp_params(&spec.mlp, d);
    let readout = if spec.tied_embeddings { spec.n_outputs() } else { linear_params(d, spec.n_outputs(), true) };
    spec.vocab_size * d + spec.n_layers * block + layer_norm + readout
}
