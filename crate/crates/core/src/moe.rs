//! Non-competitive expert selection and expert-mixture projections.
//!
//! A selection turns `x · W_sel` logits into a top-k route plus gate values.
//! With the sigmoid activation every expert's gate depends on its own logit
//! only, so experts never compete for probability mass and no balancing loss
//! is needed anywhere.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numerics::rng::{uniform, SeededRng};
use crate::numerics::{Acct, GateSide, Graph, ParamId, ParamStore, Route, Term, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Sigmoid,
    Softmax,
}

/// Whether gate values come from the selection network or are pinned to 1.
/// Routing is always decided by the logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GateMode {
    #[default]
    Learned,
    ForcedUnit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SelectionConfig {
    pub n_experts: usize,
    pub k_active: usize,
    pub activation: Activation,
    pub d_model: usize,
}

impl SelectionConfig {
    pub fn sigmoid(d_model: usize, n_experts: usize, k_active: usize) -> Self {
        Self { n_experts, k_active, activation: Activation::Sigmoid, d_model }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_experts >= 1, Contract, "need at least one expert");
        ensure!(
            self.k_active >= 1 && self.k_active <= self.n_experts,
            Contract,
            "k_active = {} must lie in 1..={}",
            self.k_active,
            self.n_experts
        );
        Ok(())
    }
}

/// Chosen experts per row and the full activation matrix they are read from.
#[derive(Clone, Debug)]
pub struct ExpertSelection {
    pub route: Rc<Route>,
    /// `[rows x E]` activations, or `None` when gates are pinned to 1.
    pub gates: Option<Var>,
}

impl ExpertSelection {
    /// Gate value of every selected `(row, slot)`, row-major.
    pub fn weights(&self, g: &Graph) -> Vec<f64> {
        let e = self.route.n_experts();
        (0..self.route.rows())
            .flat_map(|r| self.route.row(r).iter().map(move |&x| (r, x)))
            .map(|(r, x)| self.gates.map_or(1.0, |v| g.value(v).data()[r * e + x]))
            .collect()
    }

    pub fn slice_rows(&self, g: &mut Graph, start: usize, len: usize) -> Result<Self> {
        let gates = self.gates.map(|v| g.slice_rows(v, start, len)).transpose()?;
        Ok(Self { route: Rc::new(self.route.slice_rows(start, len)), gates })
    }
}

/// Expert weights for one projection role, stored as one `[E, d_in, d_out]`
/// parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExpertBank {
    pub id: ParamId,
    pub n_experts: usize,
    pub d_in: usize,
    pub d_out: usize,
}

impl ExpertBank {
    /// Adds a bank initialised uniformly in `±1/√d_in`.
    pub fn init(
        store: &mut ParamStore,
        name: impl Into<String>,
        n_experts: usize,
        d_in: usize,
        d_out: usize,
        rng: &mut SeededRng,
    ) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let id = store.add(name, uniform(rng, &[n_experts, d_in, d_out], bound));
        Self { id, n_experts, d_in, d_out }
    }

    pub fn numel(&self) -> usize {
        self.n_experts * self.d_in * self.d_out
    }
}

/// Selection logits `x · w_sel` (no bias), activated, then routed top-k.
/// Logits are booked as [`Term::Selection`].
pub fn select(g: &mut Graph, x: Var, w_sel: Var, cfg: &SelectionConfig, mode: GateMode) -> Result<ExpertSelection> {
    cfg.validate()?;
    ensure!(
        g.shape(w_sel) == [cfg.d_model, cfg.n_experts],
        Dimension,
        "selection matrix {:?} does not match [{}, {}]",
        g.shape(w_sel),
        cfg.d_model,
        cfg.n_experts
    );
    let prev = g.set_acct(Acct::stored(Term::Selection));
    let logits = g.matmul(x, w_sel);
    g.set_acct(prev);
    let logits = logits?;
    let rows = g.shape(logits)[0];
    let route = Rc::new(Route::from_logits(g.value(logits).data(), rows, cfg.n_experts, cfg.k_active)?);
    let gates = match mode {
        GateMode::ForcedUnit => None,
        GateMode::Learned => Some(match cfg.activation {
            Activation::Sigmoid => g.sigmoid(logits),
            Activation::Softmax => g.softmax_last(logits)?,
        }),
    };
    Ok(ExpertSelection { route, gates })
}

/// `out[t] = Σ_{e ∈ sel[t]} w[t, e] · x[t] · bank[e]`. Projection MACs go
/// to the graph's current tag, gating MACs to `gate_term`.
pub fn mixture_project(
    g: &mut Graph,
    x: Var,
    bank: Var,
    sel: &ExpertSelection,
    side: GateSide,
    gate_term: Term,
) -> Result<Var> {
    g.mixture(x, bank, sel.gates, sel.route.clone(), side, gate_term)
}

/// σ-MoE feed-forward block: sigmoid top-k selection over two-layer ReLU
/// experts, summed with their gates. No biases.
pub fn sigma_moe_mlp(
    g: &mut Graph,
    x: Var,
    w_sel: Var,
    up: Var,
    down: Var,
    cfg: &SelectionConfig,
    mode: GateMode,
) -> Result<(Var, ExpertSelection)> {
    let sel = select(g, x, w_sel, cfg, mode)?;
    let prev = g.set_acct(Acct::stored(Term::Mlp));
    let y = g.moe_mlp(x, up, down, sel.gates, sel.route.clone());
    g.set_acct(prev);
    Ok((y?, sel))
}
