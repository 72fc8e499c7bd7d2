use proptest::prelude::*;
use rand::Rng;
use switchhead_core::attention::{AttentionConfig, AttentionLayer, ExpertFlags, Position};
use switchhead_core::costmodel::{cost, cost_moa, cost_switchhead, cost_xl, measure, CostInputs};
use switchhead_core::numerics::rng::rng_for;
use switchhead_core::numerics::{ParamStore, Term};
use switchhead_core::Error;

fn measured(cfg: AttentionConfig, t: usize, seed: u64) -> switchhead_core::costmodel::CostReport {
    let mut store = ParamStore::new();
    let layer = AttentionLayer::init(cfg, &mut store, "l", &mut rng_for(seed, "init")).unwrap();
    measure(&layer, &store, t, seed).unwrap()
}

/// Random tiny geometry: T ≤ 8, widths ≤ 16.
fn tiny(seed: u64) -> (usize, usize, usize, usize, usize) {
    let mut r = rng_for(seed, "tiny");
    let t = r.gen_range(1..=8);
    let d = r.gen_range(1..=16);
    let dh = 2 * r.gen_range(1..=8);
    let h = r.gen_range(1..=3);
    let c = r.gen_range(1..=3);
    (t, d, dh, h, c)
}

#[test]
fn dense_xl_measurement_equals_closed_form() {
    for seed in 0..20 {
        let (t, d, dh, h, c) = tiny(seed);
        let cfg = AttentionConfig::dense(d, h, dh).with_context(c);
        let m = measured(cfg, t, seed);
        assert_eq!(m, cost_xl(&CostInputs::xl(h, t, dh, d, c)), "seed {seed}: {cfg:?}");
        assert_eq!(m.macs, cost(&cfg, t).macs);
    }
}

#[test]
fn switchhead_measurement_equals_closed_form_for_all_flag_combinations() {
    for seed in 0..20 {
        let (t, d, dh, h, c) = tiny(100 + seed);
        let mut r = rng_for(seed, "experts");
        let e = r.gen_range(1..=5);
        let k = r.gen_range(1..=e);
        for flags in ExpertFlags::all_combinations() {
            let e = if flags.any() { e } else { 1 };
            let k = k.min(e);
            let cfg = AttentionConfig::switchhead(d, h, dh, e, k).with_experts(flags).with_context(c);
            let m = measured(cfg, t, seed);
            let want = cost_switchhead(&CostInputs::from_config(&cfg, t), true);
            assert_eq!(m, want, "seed {seed}: {cfg:?}");
        }
    }
}

#[test]
fn moa_measurement_equals_closed_form() {
    for seed in 0..20 {
        let (t, d, dh, _, c) = tiny(200 + seed);
        let mut r = rng_for(seed, "moa");
        let e = r.gen_range(1..=5);
        let k = r.gen_range(1..=e);
        let cfg = AttentionConfig::moa(d, dh, e, k).with_context(c);
        let m = measured(cfg, t, seed);
        assert_eq!(m, cost_moa(&CostInputs::moa(k, t, dh, d, c, e)), "seed {seed}: {cfg:?}");
        assert_eq!(m.macs, cost(&cfg, t).macs);
    }
}

#[test]
fn rope_and_head_gated_measurements_equal_closed_form() {
    for seed in 0..20 {
        let (t, d, dh, h, c) = tiny(300 + seed);
        let rope = AttentionConfig::dense(d, h, dh).with_position(Position::Rope);
        assert_eq!(measured(rope, t, seed), cost(&rope, t));
        let rope_sh = AttentionConfig::switchhead(d, h, dh, 3, 2).with_position(Position::Rope);
        assert_eq!(measured(rope_sh, t, seed), cost(&rope_sh, t));
        let hg = AttentionConfig::head_gated(d, h, dh, 1).with_context(c);
        assert_eq!(measured(hg, t, seed), cost(&hg, t));
        let plain = AttentionConfig::moa(d, dh, 3, 2).with_position(Position::None).with_context(c);
        assert_eq!(measured(plain, t, seed), cost(&plain, t));
    }
}

#[test]
fn selection_cost_is_itemized_not_in_the_headline() {
    let cfg = AttentionConfig::switchhead(12, 2, 4, 3, 2).with_context(2);
    let m = measured(cfg, 5, 1);
    assert!(m.extras.contains_key(&Term::Selection));
    assert!(!m.terms.contains_key(&Term::Selection));
    assert_eq!(m.term(Term::Selection).macs, 2 * 2 * 5 * 12 * 3);
}

#[test]
fn zero_length_input_is_rejected() {
    let mut store = ParamStore::new();
    let layer = AttentionLayer::init(AttentionConfig::dense(4, 1, 2), &mut store, "l", &mut rng_for(0, "i")).unwrap();
    assert!(matches!(measure(&layer, &store, 0, 0), Err(Error::Contract(_))));
}

/// Published SwitchHead/XL pairs with H_dense = H·E. `d_model` is not listed;
/// the values used here are assumptions and the claim holds for all of them.
#[test]
fn switchhead_is_cheaper_than_its_dense_counterpart() {
    let pairs = [
        // (sh H, sh d_head, E, K, dense H, dense d_head, T, C, d_model)
        (2, 76, 5, 2, 10, 41, 256, 2, 412),
        (2, 76, 5, 3, 10, 41, 256, 2, 412),
        (4, 112, 4, 2, 16, 64, 512, 2, 1024),
        (2, 132, 8, 4, 16, 64, 512, 2, 1024),
        (2, 112, 4, 2, 8, 64, 512, 2, 512),
        (2, 64, 5, 3, 10, 41, 512, 1, 412),
        (4, 100, 4, 2, 16, 64, 1024, 1, 1024),
    ];
    for (h, dh, e, k, hd, dhd, t, c, d) in pairs {
        let pos = if c == 1 { Position::None } else { Position::XlRelative };
        let sh = cost_switchhead(&CostInputs::switchhead(h, t, dh, d, c, e, k).with_position(pos), true);
        let xl = cost_xl(&CostInputs::xl(hd, t, dhd, d, c).with_position(pos));
        assert!(sh.macs < xl.macs && sh.mem_floats < xl.mem_floats, "{h}x{dh} vs {hd}x{dhd}");
    }
}

#[test]
fn quadratic_terms_dominate_long_sequences() {
    let mut last = 0.0;
    for p in 8..=14 {
        let t = 1usize << p;
        let r = cost_xl(&CostInputs::xl(10, t, 41, 412, 2));
        let quad = r.term(Term::Scores).macs + r.term(Term::Readout).macs;
        let ratio = quad as f64 / r.macs as f64;
        assert!(ratio > last);
        last = ratio;
    }
    assert!(last > 0.9);
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]
    #[test]
    fn closed_forms_are_monotone(
        h in 1usize..6, t in 1usize..64, dh in 1usize..32, d in 1usize..64,
        c in 1usize..4, e in 1usize..6, k in 1usize..6, which in 0usize..7,
    ) {
        let k = k.min(e);
        let base = [h, t, dh, d, c, e, k];
        let mut bumped = base;
        bumped[which] += 1;
        if bumped[6] > bumped[5] {
            bumped[5] = bumped[6];
        }
        let eval = |v: [usize; 7]| {
            let [h, t, dh, d, c, e, k] = v;
            [
                cost_xl(&CostInputs::xl(h, t, dh, d, c)),
                cost_switchhead(&CostInputs::switchhead(h, t, dh, d, c, e, k), true),
                cost_moa(&CostInputs::moa(k, t, dh, d, c, e)),
            ]
        };
        for (a, b) in eval(base).iter().zip(eval(bumped).iter()) {
            prop_assert!(b.macs >= a.macs && b.mem_floats >= a.mem_floats);
        }
    }
}
