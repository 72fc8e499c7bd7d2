//! Deterministic 64-bit tensor engine: values, a differentiation tape, the
//! instrumented op counter, Adam, and top-k routing.

mod counter;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod optim;
mod params;
pub mod rng;
mod tensor;
mod topk;


pub use counter::{Acct, OpCounter, Term, TermCount};
pub use graph::{GateSide, Graph, RowRanges, Var};
pub use optim::{adam_step, clip_grad_norm, grad_norm, AdamConfig, OptimizerState, StepInfo};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
pub use topk::{argtopk, Route};

use crate::error::Result;

/// Matrix product of plain tensors, booking `m*n*k` MACs (and `m*n` stored
/// floats when `acct.store`) on `counter`.
pub fn matmul(a: &Tensor, b: &Tensor, counter: &mut OpCounter, acct: Acct) -> Result<Tensor> {
    let mut g = Graph::with_counter(std::mem::take(counter));
    g.set_acct(acct);
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let out = g.matmul(va, vb);
    *counter = std::mem::take(g.counter_mut());
    Ok(g.value(out?).clone())
}

/// Softmax over the last dimension of a plain tensor.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let out = g.softmax_last(v)?;
    Ok(g.value(out).clone())
}
