mod common;

use proptest::prelude::*;
use rand::Rng;
use switchhead_core::attention::{AttentionConfig, ExpertFlags, Position, Variant, Window};
use switchhead_core::model::presets::{dense_47m, switchall_47m, switchhead_47m, D_MODEL_47M};
use switchhead_core::model::{build, count_params, match_params, switchall_build, MlpSpec, Model, ModelSpec, RunOpts, MAX_SLACK};
use switchhead_core::numerics::gradcheck::check_params;
use switchhead_core::numerics::rng::{rng_for, uniform};
use switchhead_core::numerics::{Graph, ParamStore, Tensor};
use switchhead_core::Error;

fn tiny(attention: AttentionConfig, mlp: MlpSpec, n_layers: usize) -> ModelSpec {
    ModelSpec {
        n_layers,
        d_model: attention.d_model,
        vocab_size: 7,
        chunk_len: 4,
        tied_embeddings: false,
        dropout: 0.0,
        n_classes: None,
        attention,
        mlp,
    }
}

fn random_spec(seed: u64) -> ModelSpec {
    let mut r = rng_for(seed, "spec");
    let d = r.gen_range(1..=12);
    let h = r.gen_range(1..=3);
    let dh = 2 * r.gen_range(1..=4);
    let e = r.gen_range(1..=4);
    let k = r.gen_range(1..=e);
    let mut attention = match r.gen_range(0..4) {
        0 => AttentionConfig::dense(d, h, dh),
        1 => AttentionConfig::head_gated(d, h, dh, r.gen_range(1..=h)),
        2 => {
            let flags = ExpertFlags::all_combinations().nth(r.gen_range(1..16)).unwrap();
            AttentionConfig::switchhead(d, h, dh, e, k).with_experts(flags)
        }
        _ => AttentionConfig::moa(d, dh, e, k),
    };
    attention = attention.with_position([Position::XlRelative, Position::Rope, Position::None][r.gen_range(0..3)]);
    let mlp = if r.gen_bool(0.5) {
        MlpSpec::Dense { d_ff: r.gen_range(1..=20) }
    } else {
        let n = r.gen_range(1..=4);
        MlpSpec::SigmaMoe { n_experts: n, k_active: r.gen_range(1..=n), d_exp: r.gen_range(1..=6), force_unit_gates: false }
    };
    let classifier = r.gen_bool(0.3);
    ModelSpec {
        n_layers: r.gen_range(0..=3),
        vocab_size: r.gen_range(1..=9),
        tied_embeddings: !classifier && r.gen_bool(0.5),
        n_classes: classifier.then(|| r.gen_range(1..=5)),
        ..tiny(attention, mlp, 0)
    }
}

fn redraw(store: &mut ParamStore, seed: u64) {
    let mut r = rng_for(seed, "redraw");
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        store.set(id, uniform(&mut r, &shape, 0.5)).unwrap();
    }
}

fn logits(m: &Model, tokens: &[usize], segments: &[usize]) -> Tensor {
    let mut g = Graph::new();
    let out = m.forward(&mut g, tokens, segments, None, RunOpts::default()).unwrap();
    g.value(out.logits).clone()
}

#[test]
fn closed_form_count_matches_instantiated_tensors() {
    for seed in 0..25 {
        let spec = random_spec(seed);
        let m = build(&spec, seed).unwrap();
        assert_eq!(count_params(&spec), m.params().numel(), "seed {seed}: {spec:?}");
    }
}

#[test]
fn zero_layers_is_embedding_and_readout() {
    let spec = tiny(AttentionConfig::dense(6, 1, 2), MlpSpec::Dense { d_ff: 3 }, 0);
    let m = build(&spec, 0).unwrap();
    // embedding + final layer norm + readout weights and bias
    assert_eq!(count_params(&spec), 7 * 6 + 2 * 6 + 6 * 7 + 7);
    assert_eq!(m.params().numel(), count_params(&spec));
    assert_eq!(logits(&m, &[1, 2, 3], &[3]).shape(), &[3, 7]);
}

#[test]
fn random_specs_produce_one_row_of_logits_per_token() {
    for seed in 0..10 {
        let spec = random_spec(100 + seed);
        let m = build(&spec, seed).unwrap();
        let tokens: Vec<usize> = (0..5).map(|i| i % spec.vocab_size).collect();
        let rows = if spec.is_classifier() { 2 } else { 5 };
        assert_eq!(logits(&m, &tokens, &[3, 2]).shape(), &[rows, spec.n_outputs()]);
    }
}

#[test]
fn switchhead_layer_params_grow_linearly_in_experts() {
    let flags = ExpertFlags { v: true, k: true, q: true, o: true };
    let at = |e| count_params(&tiny(AttentionConfig::switchhead(8, 2, 4, e, 1).with_experts(flags), MlpSpec::Dense { d_ff: 4 }, 3));
    assert_eq!(at(3) - at(2), at(2) - at(1));
}

#[test]
fn dense_47m_builds_and_runs_a_full_chunk() {
    let spec = dense_47m(D_MODEL_47M);
    let m = build(&spec, 0).unwrap();
    let tokens: Vec<usize> = (0..256).map(|i| (i * 37) % spec.vocab_size).collect();
    let mut cache = m.new_cache(1);
    let mut g = Graph::new();
    let out = m.forward(&mut g, &tokens, &[256], Some(&mut cache), RunOpts::default()).unwrap();
    assert_eq!(g.shape(out.logits), &[256, 8000]);
    assert!(g.value(out.logits).data().iter().all(|v| v.is_finite()));
    assert_eq!(cache.layers[15][0].len(), 256);
}

#[test]
fn matching_a_spec_against_its_own_count_is_a_fixed_point() {
    let spec = tiny(AttentionConfig::dense(32, 4, 12).with_context(2), MlpSpec::Dense { d_ff: 50 }, 2);
    let r = match_params(count_params(&spec), &spec).unwrap();
    assert_eq!(r.spec, spec);
    assert_eq!(r.slack, 0);
    assert!(!r.coarse_step);
}

#[test]
fn matching_47m_switchhead_against_the_dense_baseline() {
    let target = count_params(&dense_47m(D_MODEL_47M));
    let r = match_params(target, &switchhead_47m(D_MODEL_47M)).unwrap();
    assert!(r.param_count <= target && r.slack <= MAX_SLACK);
    assert_eq!(r.spec.attention.d_head % 4, 0);
    assert_eq!(r.param_count, count_params(&r.spec));
    assert!(r.trace.iter().any(|s| !s.accepted));
    eprintln!(
        "47M: target {target}, d_head {} d_ff {} (published 76, 2080), slack {}",
        r.spec.attention.d_head,
        r.spec.mlp.d_ff(),
        r.slack
    );
}

#[test]
fn expert_mlp_matching_reports_a_coarse_step() {
    let target = count_params(&dense_47m(D_MODEL_47M));
    let r = match_params(target, &switchall_47m(D_MODEL_47M)).unwrap();
    assert!(r.param_count <= target);
    assert_eq!(r.coarse_step, r.slack > MAX_SLACK);
    // One more unit per expert adds 16 · 2 · 412 · 16 parameters, above the band.
    assert!(r.coarse_step);
}

#[test]
fn infeasible_target_is_a_matching_error() {
    let spec = tiny(AttentionConfig::dense(8, 2, 4), MlpSpec::Dense { d_ff: 4 }, 1);
    assert!(matches!(match_params(100, &spec), Err(Error::Matching(_))));
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(32) })]
    #[test]
    fn raising_the_target_never_shrinks_heads(base in 2_000_000usize..40_000_000, d in prop::sample::select(vec![128usize, 256, 412])) {
        let template = ModelSpec { n_layers: 4, vocab_size: 1000, mlp: MlpSpec::Dense { d_ff: 64 }, ..switchhead_47m(d) };
        let lo = match_params(base, &template);
        let hi = match_params(base + 1_000_000, &template);
        match (lo, hi) {
            (Ok(lo), Ok(hi)) => {
                prop_assert!(hi.param_count <= base + 1_000_000 && hi.slack <= MAX_SLACK);
                prop_assert_eq!(hi.spec.attention.d_head % 4, 0);
                prop_assert!(hi.spec.attention.d_head >= lo.spec.attention.d_head);
            }
            (Err(_), _) => {}
            (Ok(_), Err(e)) => prop_assert!(false, "larger target became infeasible: {}", e),
        }
    }
}

#[test]
fn switchall_needs_expert_attention_and_expert_mlp() {
    let spec = tiny(AttentionConfig::dense(8, 2, 4), MlpSpec::Dense { d_ff: 4 }, 1);
    match switchall_build(&spec, 0) {
        Err(Error::Config(v)) => assert_eq!(v.len(), 2),
        other => panic!("{:?}", other.map(|_| ())),
    }
    let m = switchall_build(&switchall_47m(D_MODEL_47M), 0).unwrap();
    assert_eq!(m.params().numel(), count_params(m.spec()));
}

#[test]
fn single_expert_switchall_with_unit_gates_is_the_dense_model() {
    for seed in 0..3 {
        let mut att = AttentionConfig::switchhead(8, 2, 4, 1, 1).with_context(2);
        att.force_unit_gates = true;
        let moe = MlpSpec::SigmaMoe { n_experts: 1, k_active: 1, d_exp: 6, force_unit_gates: true };
        let mut switchall = switchall_build(&tiny(att, moe, 2), seed).unwrap();
        redraw(switchall.params_mut(), seed);
        let mut dense = build(&tiny(AttentionConfig::dense(8, 2, 4).with_context(2), MlpSpec::Dense { d_ff: 6 }, 2), seed).unwrap();
        let src = switchall.params().clone();
        let dst = dense.params_mut();
        let ids: Vec<_> = dst.ids().collect();
        for id in ids {
            let name = dst.name(id).to_string();
            let from = if name.ends_with(".mlp.b1") || name.ends_with(".mlp.b2") {
                continue;
            } else if let Some(p) = name.strip_suffix(".mlp.w1") {
                format!("{p}.mlp.up")
            } else if let Some(p) = name.strip_suffix(".mlp.w2") {
                format!("{p}.mlp.down")
            } else if name.ends_with(".pos") {
                let (layer, _) = name.split_once(".attn.").unwrap();
                format!("{layer}.attn.pos")
            } else {
                name.clone()
            };
            let v = src.get(src.find(&from).unwrap_or_else(|| panic!("{from}")));
            let shape = dst.get(id).shape().to_vec();
            dst.set(id, Tensor::new(&shape, v.data().to_vec()).unwrap()).unwrap();
        }
        let tokens = [1, 5, 2, 6, 0, 3, 4];
        let diff = logits(&switchall, &tokens, &[4, 3]).max_abs_diff(&logits(&dense, &tokens, &[4, 3]));
        assert!(diff < 1e-10, "seed {seed}: {diff}");
    }
}

#[test]
fn switchall_gradients_match_finite_differences() {
    for seed in 0..3 {
        let att = AttentionConfig::switchhead(8, 2, 4, 3, 2);
        let moe = MlpSpec::SigmaMoe { n_experts: 4, k_active: 2, d_exp: 4, force_unit_gates: false };
        let mut m = switchall_build(&tiny(att, moe, 2), seed).unwrap();
        redraw(m.params_mut(), seed);
        let tokens = [3, 1, 4, 1];
        let targets = std::rc::Rc::new(vec![1, 5, 2, 6]);
        let rep = check_params(m.params(), 1e-5, |g, s| {
            let out = m.forward_with(g, s, &tokens, &[4], None, RunOpts::default())?;
            g.cross_entropy(out.logits, targets.clone())
        })
        .unwrap();
        assert!(rep.passes(1e-5), "seed {seed}: {rep:?}");
        assert_eq!(rep.checked, m.params().numel());
    }
}

#[test]
fn chunked_streaming_equals_a_truncated_window() {
    for (variant, seed) in [(Variant::Dense, 0), (Variant::SwitchHead, 1), (Variant::Moa, 2)] {
        let att = match variant {
            Variant::Dense => AttentionConfig::dense(8, 2, 4),
            Variant::SwitchHead => AttentionConfig::switchhead(8, 2, 4, 3, 2),
            _ => AttentionConfig::moa(8, 4, 3, 2),
        }
        .with_context(2);
        let mut m = build(&tiny(att, MlpSpec::Dense { d_ff: 8 }, 2), seed).unwrap();
        redraw(m.params_mut(), seed);
        let tokens: Vec<usize> = (0..12).map(|i| (i * 5 + 1) % 7).collect();
        let mut cache = m.new_cache(1);
        let mut chunked = Vec::new();
        for chunk in tokens.chunks(4) {
            let mut g = Graph::new();
            let out = m.forward(&mut g, chunk, &[4], Some(&mut cache), RunOpts::default()).unwrap();
            chunked.extend_from_slice(g.value(out.logits).data());
        }
        let mut g = Graph::new();
        let opts = RunOpts { window: Some(Window { chunk: 4, memory: 4 }), ..Default::default() };
        let out = m.forward(&mut g, &tokens, &[12], None, opts).unwrap();
        let whole = g.value(out.logits).data();
        let diff = chunked.iter().zip(whole).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-8, "{variant:?}: {diff}");
    }
}
