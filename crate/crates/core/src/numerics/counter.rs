//! Instrumented multiply-accumulate and activation-storage counter.
//!
//! Every primitive that performs MACs or stores an activation for the backward
//! pass reports to the counter under the accounting tag that is current on the
//! graph. The tags mirror the terms of the closed-form cost model so that a
//! measured forward pass can be compared term by term.

use std::collections::BTreeMap;
use std::fmt;

/// Cost category a primitive call is booked under.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Term {
    /// K, Q, V and output projections.
    Projection,
    /// Q·Kᵀ products plus the pre- and post-softmax score storage.
    Scores,
    /// A·V readout.
    Readout,
    /// Projection of relative position encodings.
    Position,
    /// Gate-weighted averaging of expert outputs.
    ExpertMixing,
    /// Selection logits and routing logic (ignored by the closed forms).
    Selection,
    /// Query-by-position score products of XL attention (ignored by the closed forms).
    PositionScores,
    /// Rotary embedding rotations (ignored by the closed forms).
    Rotary,
    /// Feed-forward blocks.
    Mlp,
    /// Embeddings, readouts, anything else.
    Other,
}

impl Term {
    pub const ALL: [Term; 10] = [
        Term::Projection,
        Term::Scores,
        Term::Readout,
        Term::Position,
        Term::ExpertMixing,
        Term::Selection,
        Term::PositionScores,
        Term::Rotary,
        Term::Mlp,
        Term::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Term::Projection => "projections",
            Term::Scores => "attention-scores",
            Term::Readout => "readout",
            Term::Position => "position-encoding",
            Term::ExpertMixing => "expert-mixing",
            Term::Selection => "selection",
            Term::PositionScores => "position-scores",
            Term::Rotary => "rotary",
            Term::Mlp => "mlp",
            Term::Other => "other",
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Accounting tag: which term a call is booked under and whether its output
/// counts as a stored activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Acct {
    pub term: Term,
    pub store: bool,
}

impl Acct {
    pub const fn stored(term: Term) -> Self {
        Self { term, store: true }
    }

    pub const fn transient(term: Term) -> Self {
        Self { term, store: false }
    }
}

impl Default for Acct {
    fn default() -> Self {
        Acct::transient(Term::Other)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TermCount {
    pub macs: u64,
    pub mem_floats: u64,
}

/// Monotone MAC / stored-float accumulator.
#[derive(Clone, Debug, Default)]
pub struct OpCounter {
    enabled: bool,
    macs: u64,
    mem_floats: u64,
    attention_matrices: u64,
    by_term: BTreeMap<Term, TermCount>,
}

impl OpCounter {
    pub fn enabled() -> Self {
        Self { enabled: true, ..Self::default() }
    }

    pub fn disabled() -> Self {
        Self::default()
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn set_enabled(&mut self, on: bool) {
        self.enabled = on;
    }

    pub fn record(&mut self, acct: Acct, macs: u64, out_floats: u64) {
        if !self.enabled {
            return;
        }
        let mem = if acct.store { out_floats } else { 0 };
        self.macs += macs;
        self.mem_floats += mem;
        let e = self.by_term.entry(acct.term).or_default();
        e.macs += macs;
        e.mem_floats += mem;
    }

    pub fn record_attention_matrix(&mut self) {
        if self.enabled {
            self.attention_matrices += 1;
        }
    }

    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn mem_floats(&self) -> u64 {
        self.mem_floats
    }

    /// Number of attention probability matrices computed (one per head per
    /// sequence).
    pub fn attention_matrices(&self) -> u64 {
        self.attention_matrices
    }

    pub fn term(&self, term: Term) -> TermCount {
        self.by_term.get(&term).copied().unwrap_or_default()
    }

    pub fn terms(&self) -> impl Iterator<Item = (Term, TermCount)> + '_ {
        self.by_term.iter().map(|(t, c)| (*t, *c))
    }

    pub fn reset(&mut self) {
        let enabled = self.enabled;
        *self = Self { enabled, ..Self::default() };
    }
}
