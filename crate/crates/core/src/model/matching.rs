//! Parameter matching: size a template so that its parameter count lands
//! just below a dense target.
//!
//! `d_head` is raised in steps of 4 to the largest value whose count stays
//! within the target, then the MLP width grows one unit at a time until the
//! remaining slack is at most [`MAX_SLACK`]. The count never exceeds the
//! target. An expert MLP can only grow by `E` hidden units at once; when that
//! step alone overshoots, the result is returned with `coarse_step` set and
//! a slack that may exceed the band.

use super::{count_params, MlpSpec, ModelSpec};
use crate::error::{Error, Result};

pub const MAX_SLACK: usize = 100_000;
const HEAD_STEP: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatchStep {
    pub d_head: usize,
    pub d_ff: usize,
    pub params: usize,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub spec: ModelSpec,
    pub param_count: usize,
    pub target: usize,
    /// `target - param_count`.
    pub slack: usize,
    /// Every candidate evaluated, in order.
    pub trace: Vec<MatchStep>,
    /// The MLP growth step was too coarse to reach the slack band.
    pub coarse_step: bool,
}

fn with_d_head(t: &ModelSpec, d_head: usize) -> ModelSpec {
    let mut s = t.clone();
    s.attention.d_head = d_head;
    s
}

fn grow_mlp(s: &ModelSpec) -> ModelSpec {
    let mut s = s.clone();
    s.mlp = match s.mlp {
        MlpSpec::Dense { d_ff } => MlpSpec::Dense { d_ff: d_ff + 1 },
        MlpSpec::SigmaMoe { n_experts, k_active, d_exp, force_unit_gates } => {
            MlpSpec::SigmaMoe { n_experts, k_active, d_exp: d_exp + 1, force_unit_gates }
        }
    };
    s
}

/// Sizes `template`'s `d_head` and MLP width against `target`. The
/// template's `d_head` is ignored; its MLP width is the starting point.
pub fn match_params(target: usize, template: &ModelSpec) -> Result<MatchResult> {
    with_d_head(template, HEAD_STEP).validate()?;
    let mut trace = Vec::new();
    let mut log = |s: &ModelSpec, params: usize, accepted: bool| {
        trace.push(MatchStep { d_head: s.attention.d_head, d_ff: s.mlp.d_ff(), params, accepted });
    };

    let mut best: Option<(ModelSpec, usize)> = None;
    let mut d_head = HEAD_STEP;
    loop {
        let s = with_d_head(template, d_head);
        let n = count_params(&s);
        let fits = n <= target;
        log(&s, n, fits);
        if !fits {
            break;
        }
        best = Some((s, n));
        d_head += HEAD_STEP;
    }
    let Some((mut spec, mut count)) = best else {
        return Err(Error::Matching(format!(
            "even d_head = {HEAD_STEP} needs {} parameters, above the target of {target}",
            trace[0].params
        )));
    };

    while target - count > MAX_SLACK {
        let s = grow_mlp(&spec);
        let n = count_params(&s);
        let fits = n <= target;
        log(&s, n, fits);
        if !fits {
            break;
        }
        spec = s;
        count = n;
    }
    let slack = target - count;
    let coarse_step = slack > MAX_SLACK;
    if coarse_step && matches!(spec.mlp, MlpSpec::Dense { .. }) {
        return Err(Error::Matching(format!(
            "one unit of d_ff overshoots the target; best count {count} leaves slack {slack} > {MAX_SLACK}"
        )));
    }
    Ok(MatchResult { spec, param_count: count, target, slack, trace, coarse_step })
}
