//! Finite-difference gradient checks of every attention variant and of a
//! small fully expert-based model, at sequence length 4 and width 8.

use std::rc::Rc;

use super::{switchall_build, MlpSpec, ModelSpec, RunOpts};
use crate::attention::{AttentionConfig, AttentionLayer, ExpertFlags, ForwardOpts, Position, Readout};
use crate::error::Result;
use crate::moe::Activation;
use crate::numerics::gradcheck::{check_params, GradCheckReport};
use crate::numerics::rng::{rng_for, uniform};
use crate::numerics::ParamStore;

pub const SUITE_T: usize = 4;
pub const SUITE_D: usize = 8;
/// Finite-difference step.
pub const SUITE_H: f64 = 1e-5;
/// Largest accepted relative error.
pub const SUITE_TOL: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct SuiteCase {
    pub name: String,
    pub seed: u64,
    pub report: GradCheckReport,
}

impl SuiteCase {
    pub fn passes(&self) -> bool {
        self.report.passes(SUITE_TOL)
    }
}

/// One configuration per attention variant and position scheme.
pub fn attention_variants(d: usize) -> Vec<(&'static str, AttentionConfig)> {
    let all = ExpertFlags { v: true, k: true, q: true, o: true };
    let mut concat = AttentionConfig::dense(d, 2, 4);
    concat.readout = Readout::Concat;
    let mut soft_moa = AttentionConfig::moa(d, 4, 4, 2);
    soft_moa.selection = Activation::Softmax;
    vec![
        ("dense-xl", AttentionConfig::dense(d, 2, 4).with_context(2)),
        ("dense-xl-concat", concat),
        ("dense-rope", AttentionConfig::dense(d, 2, 4).with_position(Position::Rope)),
        ("dense-plain", AttentionConfig::dense(d, 2, 4).with_position(Position::None)),
        ("head-gated", AttentionConfig::head_gated(d, 3, 4, 2)),
        ("switchhead-vo", AttentionConfig::switchhead(d, 2, 4, 3, 2).with_context(2)),
        ("switchhead-vkqo", AttentionConfig::switchhead(d, 2, 4, 3, 2).with_experts(all)),
        ("switchhead-rope", AttentionConfig::switchhead(d, 2, 4, 3, 2).with_experts(all).with_position(Position::Rope)),
        ("moa", AttentionConfig::moa(d, 4, 4, 2).with_context(2)),
        ("moa-softmax", soft_moa),
    ]
}

/// Replaces every parameter (including zero-initialised biases) by
/// `U[-0.5, 0.5]` so that no gradient is trivially zero.
pub fn redraw(store: &mut ParamStore, seed: u64) {
    let mut r = rng_for(seed, "redraw");
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        store.set(id, uniform(&mut r, &shape, 0.5)).expect("same shape");
    }
}

fn check_attention(cfg: AttentionConfig, seed: u64) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let layer = AttentionLayer::init(cfg, &mut store, "l", &mut rng_for(seed, "init"))?;
    redraw(&mut store, seed);
    let mut r = rng_for(seed, "input");
    let x = uniform(&mut r, &[SUITE_T, cfg.d_model], 1.0);
    let w = uniform(&mut r, &[SUITE_T, cfg.d_model], 1.0);
    check_params(&store, SUITE_H, |g, s| {
        let xv = g.constant(x.clone());
        let (y, _) = layer.forward(g, s, xv, &[SUITE_T], None, ForwardOpts::default())?;
        let wv = g.constant(w.clone());
        let p = g.mul(y, wv)?;
        Ok(g.sum(p))
    })
}

/// Two-layer SwitchHead attention plus expert MLP language model.
pub fn switchall_suite_spec() -> ModelSpec {
    ModelSpec {
        n_layers: 2,
        d_model: SUITE_D,
        vocab_size: 7,
        chunk_len: SUITE_T,
        tied_embeddings: false,
        dropout: 0.0,
        n_classes: None,
        attention: AttentionConfig::switchhead(SUITE_D, 2, 4, 3, 2),
        mlp: MlpSpec::SigmaMoe { n_experts: 4, k_active: 2, d_exp: 4, force_unit_gates: false },
    }
}

fn check_switchall(seed: u64) -> Result<GradCheckReport> {
    let mut m = switchall_build(&switchall_suite_spec(), seed)?;
    redraw(m.params_mut(), seed);
    let mut r = rng_for(seed, "tokens");
    use rand::Rng;
    let tokens: Vec<usize> = (0..SUITE_T).map(|_| r.gen_range(0..7)).collect();
    let targets = Rc::new((0..SUITE_T).map(|_| r.gen_range(0..7)).collect::<Vec<usize>>());
    check_params(m.params(), SUITE_H, |g, s| {
        let out = m.forward_with(g, s, &tokens, &[SUITE_T], None, RunOpts::default())?;
        g.cross_entropy(out.logits, targets.clone())
    })
}

/// Every attention variant and the SwitchAll model, for each seed.
pub fn gradient_suite(seeds: &[u64]) -> Result<Vec<SuiteCase>> {
    let mut out = Vec::new();
    for &seed in seeds {
        for (name, cfg) in attention_variants(SUITE_D) {
            out.push(SuiteCase { name: name.into(), seed, report: check_attention(cfg, seed)? });
        }
        out.push(SuiteCase { name: "switchall".into(), seed, report: check_switchall(seed)? });
    }
    Ok(out)
}
