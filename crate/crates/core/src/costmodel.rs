//! Closed-form MAC and activation-memory counts of one attention layer on
//! one sequence, and the instrumented measurement they are checked against.
//!
//! The closed forms split into the terms the counter books: projections,
//! attention scores (product plus pre/post softmax storage), readout,
//! position-encoding projection and expert mixing. Selection logic,
//! query-by-position score products and rotary rotations are itemized
//! separately as extras, because the headline formulas leave them out.

use std::collections::BTreeMap;

use crate::attention::{AttentionConfig, AttentionLayer, ExpertFlags, ForwardOpts, LayerCache, Position, Variant};
use crate::error::{ensure, Result};
use crate::numerics::rng::{rng_for, uniform};
use crate::numerics::{Graph, OpCounter, ParamStore, Term, TermCount};

/// Terms that make up the headline cost; everything else is an extra.
pub const MAIN_TERMS: [Term; 5] = [Term::Projection, Term::Scores, Term::Readout, Term::Position, Term::ExpertMixing];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostInputs {
    pub variant: Variant,
    pub position: Position,
    /// Attention matrices per layer (active heads for MoA).
    pub n_heads: usize,
    pub t: usize,
    pub d_head: usize,
    pub d_model: usize,
    pub context_mult: usize,
    pub k_active: usize,
    pub n_experts: usize,
    pub experts: ExpertFlags,
}

impl CostInputs {
    /// Dense Transformer-XL layer.
    pub fn xl(n_heads: usize, t: usize, d_head: usize, d_model: usize, context_mult: usize) -> Self {
        Self {
            variant: Variant::Dense,
            position: Position::XlRelative,
            n_heads,
            t,
            d_head,
            d_model,
            context_mult,
            k_active: 1,
            n_experts: 1,
            experts: ExpertFlags::NONE,
        }
    }

    /// SwitchHead with value and output experts.
    pub fn switchhead(n_heads: usize, t: usize, d_head: usize, d_model: usize, context_mult: usize, n_experts: usize, k_active: usize) -> Self {
        Self {
            variant: Variant::SwitchHead,
            n_experts,
            k_active,
            experts: ExpertFlags::default(),
            ..Self::xl(n_heads, t, d_head, d_model, context_mult)
        }
    }

    pub fn moa(k_active: usize, t: usize, d_head: usize, d_model: usize, context_mult: usize, n_experts: usize) -> Self {
        Self { variant: Variant::Moa, n_experts, k_active, ..Self::xl(k_active, t, d_head, d_model, context_mult) }
    }

    pub fn from_config(cfg: &AttentionConfig, t: usize) -> Self {
        Self {
            variant: cfg.variant,
            position: cfg.position,
            n_heads: cfg.n_heads,
            t,
            d_head: cfg.d_head,
            d_model: cfg.d_model,
            context_mult: cfg.context_mult,
            k_active: cfg.k_active,
            n_experts: cfg.n_experts,
            experts: cfg.experts,
        }
    }

    pub fn with_position(mut self, position: Position) -> Self {
        self.position = position;
        self
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.n_heads >= 1 && self.t >= 1 && self.d_head >= 1 && self.d_model >= 1 && self.context_mult >= 1,
            Contract,
            "cost inputs must be positive: {:?}",
            self
        );
        ensure!(
            self.k_active >= 1 && self.n_experts >= 1,
            Contract,
            "expert counts must be positive: {:?}",
            self
        );
        Ok(())
    }
}

/// MACs and stored floats, per term.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CostReport {
    pub macs: u64,
    pub mem_floats: u64,
    pub terms: BTreeMap<Term, TermCount>,
    /// Itemized costs outside the headline formulas.
    pub extras: BTreeMap<Term, TermCount>,
}

impl CostReport {
    fn add(&mut self, term: Term, macs: usize, mem: usize) {
        if macs == 0 && mem == 0 {
            return;
        }
        let main = MAIN_TERMS.contains(&term);
        let slot = if main { &mut self.terms } else { &mut self.extras }.entry(term).or_default();
        slot.macs += macs as u64;
        slot.mem_floats += mem as u64;
        if main {
            self.macs += macs as u64;
            self.mem_floats += mem as u64;
        }
    }

    pub fn from_counter(counter: &OpCounter) -> Self {
        let mut r = CostReport::default();
        for (term, c) in counter.terms() {
            r.add(term, c.macs as usize, c.mem_floats as usize);
        }
        r
    }

    pub fn term(&self, term: Term) -> TermCount {
        self.terms.get(&term).or_else(|| self.extras.get(&term)).copied().unwrap_or_default()
    }
}

/// Per-head costs shared by every variant: scores, readout and, for XL, the
/// query-by-position products.
fn attention_core(r: &mut CostReport, i: &CostInputs, matrices: usize) {
    let (t, s, dh) = (i.t, i.context_mult * i.t, i.d_head);
    r.add(Term::Scores, matrices * t * s * dh, matrices * 2 * t * s);
    r.add(Term::Readout, matrices * t * s * dh, matrices * t * dh);
    match i.position {
        Position::XlRelative => r.add(Term::PositionScores, matrices * t * s * dh, 0),
        Position::Rope => r.add(Term::Rotary, matrices * 2 * (t + s) * dh, 0),
        Position::None => {}
    }
}

/// Projection of the `2CT` relative encodings, `copies` times.
fn position_projection(r: &mut CostReport, i: &CostInputs, copies: usize) {
    if i.position == Position::XlRelative {
        let rows = 2 * i.context_mult * i.t;
        r.add(Term::Position, copies * rows * i.d_model * i.d_head, copies * rows * i.d_head);
    }
}

/// Dense XL: `H(4T·d_head·d_model + 2CT²·d_head + 2CT·d_head·d_model)` MACs
/// and `H(4T·d_head + 2CT² + 2CT·d_head)` floats. Without relative positions
/// the position term drops out. The head-gated variant adds its gate
/// scaling and selection on top.
pub fn cost_xl(i: &CostInputs) -> CostReport {
    let mut r = CostReport::default();
    let (h, t, d, dh) = (i.n_heads, i.t, i.d_model, i.d_head);
    r.add(Term::Projection, h * 4 * t * d * dh, h * 3 * t * dh);
    attention_core(&mut r, i, h);
    position_projection(&mut r, i, h);
    if i.variant == Variant::HeadGated {
        r.add(Term::ExpertMixing, h * t * d, 0);
        r.add(Term::Selection, t * d * h, t * h);
    }
    r
}

/// SwitchHead: each expert projection costs `T·K·d_model·d_head` plus
/// `T·K·d_head` for the gate-weighted average; plain projections cost
/// `T·d_model·d_head`. With value/output experts this is
/// `H(2T·d_head·d_model + 2TK·d_head(d_model+1) + 2CT²·d_head + 2CT·d_head·d_model)`.
/// With `shared_pos` the position projection is paid once per layer.
pub fn cost_switchhead(i: &CostInputs, shared_pos: bool) -> CostReport {
    let mut r = CostReport::default();
    let (h, t, d, dh, k, e) = (i.n_heads, i.t, i.d_model, i.d_head, i.k_active, i.n_experts);
    let f = i.experts;
    for flagged in [f.q, f.k, f.v, f.o] {
        if flagged {
            r.add(Term::Projection, h * t * k * d * dh, 0);
            r.add(Term::ExpertMixing, h * t * k * dh, 0);
        } else {
            r.add(Term::Projection, h * t * d * dh, 0);
        }
    }
    r.add(Term::Projection, 0, h * 3 * t * dh);
    attention_core(&mut r, i, h);
    position_projection(&mut r, i, if shared_pos { 1 } else { h });
    let gate_sets = usize::from(f.source_side()) + usize::from(f.destination_side());
    r.add(Term::Selection, h * gate_sets * t * d * e, h * gate_sets * t * e);
    r
}

/// MoA with `H = k_active` attention matrices, shared K/V and one shared
/// position projection: `(2H+2)T·d_head·d_model + 2H·CT²·d_head +
/// 2CT·d_head·d_model` MACs and `(2H+2)T·d_head + 2H·CT² + 2CT·d_head` floats.
pub fn cost_moa(i: &CostInputs) -> CostReport {
    let mut r = CostReport::default();
    let (h, t, d, dh, e) = (i.k_active, i.t, i.d_model, i.d_head, i.n_experts);
    r.add(Term::Projection, (2 * h + 2) * t * d * dh, (h + 2) * t * dh);
    attention_core(&mut r, i, h);
    position_projection(&mut r, i, 1);
    r.add(Term::Selection, t * d * e + h * t * dh, t * e);
    r
}

/// Closed form matching the implementation of `cfg`'s variant.
pub fn cost(cfg: &AttentionConfig, t: usize) -> CostReport {
    let i = CostInputs::from_config(cfg, t);
    match cfg.variant {
        Variant::Dense | Variant::HeadGated => cost_xl(&i),
        Variant::SwitchHead => cost_switchhead(&i, true),
        Variant::Moa => cost_moa(&i),
    }
}

/// Counts one forward pass of `layer` over a fresh `t`-row chunk whose
/// cache already holds `(C - 1) * t` positions.
pub fn measure(layer: &AttentionLayer, store: &ParamStore, t: usize, seed: u64) -> Result<CostReport> {
    ensure!(t >= 1, Contract, "measurement needs at least one position");
    let cfg = layer.config();
    let mut rng = rng_for(seed, "measure");
    let cached = (cfg.context_mult - 1) * t;
    let mut caches = vec![LayerCache::default()];
    if cached > 0 {
        let streams = cfg.kv_streams();
        caches[0].k = (0..streams).map(|_| uniform(&mut rng, &[cached, cfg.d_head], 1.0)).collect();
        caches[0].v = (0..streams).map(|_| uniform(&mut rng, &[cached, cfg.d_head], 1.0)).collect();
    }
    let mut g = Graph::with_counter(OpCounter::enabled());
    let x = g.constant(uniform(&mut rng, &[t, cfg.d_model], 1.0));
    layer.forward(&mut g, store, x, &[t], Some(&mut caches), ForwardOpts::default())?;
    Ok(CostReport::from_counter(g.counter()))
}

/// Short display: one decimal in millions below 10⁹, else billions.
pub fn human(n: u64) -> String {
    if n >= 1_000_000_000 {
        format!("{:.1}G", n as f64 / 1e9)
    } else {
        format!("{:.1}M", n as f64 / 1e6)
    }
}
