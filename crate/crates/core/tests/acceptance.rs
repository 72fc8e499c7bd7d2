//! One PASS/FAIL line per acceptance criterion.
//!
//! Built without the libtest harness so the lines always reach the output.
//! The ListOps comparison needs about fourteen hours on one core and only
//! runs when `SWITCHHEAD_LISTOPS_FULL=1` is set; otherwise its line reports
//! FAIL (not run) without failing the target. Every other criterion exits
//! nonzero on failure.

mod common;

use std::path::Path;
use std::time::Instant;

use rand::Rng;
use switchhead_core::attention::{AttentionConfig, ExpertFlags, Position, Readout};
use switchhead_core::costmodel::{cost_moa, cost_switchhead, cost_xl, human, measure, CostInputs};
use switchhead_core::model::presets::{dense_47m, switchhead_47m, D_MODEL_47M};
use switchhead_core::model::suite::{gradient_suite, SUITE_TOL};
use switchhead_core::model::{build, count_params, match_params, ModelSpec, MAX_SLACK};
use switchhead_core::numerics::rng::rng_for;
use switchhead_core::numerics::{ParamStore, Term};
use switchhead_core::tasks::{evaluate, gen_listops, train, ListOpsParams, Split, Task, TrainConfig};

use common::{build as build_layer, copy_matching, max_diff, rand_tensor, run, set_named};

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
    /// Counted against the test result.
    enforced: bool,
}

fn line(o: &Outcome) {
    println!("{} {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.name, o.detail);
}

fn memory_column() -> Outcome {
    let xl = |h, t, dh| cost_xl(&CostInputs::xl(h, t, dh, 1024, 2)).mem_floats;
    let sh = |h, t, dh| cost_switchhead(&CostInputs::switchhead(h, t, dh, 1024, 2, 4, 2), true).mem_floats;
    let cells = [
        ("xl 10x41 T256", xl(10, 256, 41), 3_461_120, "3.5M"),
        ("xl 16x64 T512", xl(16, 512, 64), 20_971_520, "21.0M"),
        ("xl 8x64 T512", xl(8, 512, 64), 10_485_760, "10.5M"),
        ("switchhead 2x76 T256", sh(2, 256, 76), 757_760, "0.8M"),
        ("switchhead 2x112 T512", sh(2, 512, 112), 2_785_280, "2.8M"),
        ("switchhead 2x132 T512", sh(2, 512, 132), 2_908_160, "2.9M"),
    ];
    let bad: Vec<String> = cells
        .iter()
        .filter(|(_, got, want, shown)| got != want || human(*got) != *shown)
        .map(|(n, got, want, _)| format!("{n}: {got} vs {want}"))
        .collect();
    Outcome {
        name: "memory column",
        pass: bad.is_empty(),
        detail: if bad.is_empty() { format!("{} cells exact with matching display", cells.len()) } else { bad.join("; ") },
        enforced: true,
    }
}

fn measured(cfg: AttentionConfig, t: usize, seed: u64) -> switchhead_core::costmodel::CostReport {
    let mut store = ParamStore::new();
    let layer = switchhead_core::attention::AttentionLayer::init(cfg, &mut store, "l", &mut rng_for(seed, "init")).unwrap();
    measure(&layer, &store, t, seed).unwrap()
}

fn counter_vs_formula() -> Outcome {
    let mut checked = 0;
    let mut bad = Vec::new();
    for seed in 0..20u64 {
        let mut r = rng_for(seed, "acceptance-geometry");
        let (t, d, dh, h, c) = (r.gen_range(1..=8), r.gen_range(1..=16), 2 * r.gen_range(1..=8), r.gen_range(1..=3), r.gen_range(1..=3));
        let e = r.gen_range(1..=5);
        let k = r.gen_range(1..=e);
        let xl = AttentionConfig::dense(d, h, dh).with_context(c);
        let mut cases = vec![(measured(xl, t, seed), cost_xl(&CostInputs::xl(h, t, dh, d, c)))];
        for flags in ExpertFlags::all_combinations() {
            let (e, k) = if flags.any() { (e, k) } else { (1, 1) };
            let cfg = AttentionConfig::switchhead(d, h, dh, e, k).with_experts(flags).with_context(c);
            cases.push((measured(cfg, t, seed), cost_switchhead(&CostInputs::from_config(&cfg, t), true)));
        }
        let moa = AttentionConfig::moa(d, dh, e, k).with_context(c);
        cases.push((measured(moa, t, seed), cost_moa(&CostInputs::moa(k, t, dh, d, c, e))));
        for (i, (m, f)) in cases.iter().enumerate() {
            checked += 1;
            let itemized = !m.terms.contains_key(&Term::Selection);
            if m != f || !itemized {
                bad.push(format!("seed {seed} case {i}"));
            }
        }
    }
    Outcome {
        name: "counter vs formula",
        pass: bad.is_empty(),
        detail: if bad.is_empty() { format!("{checked} configurations equal, selection itemized") } else { bad.join(", ") },
        enforced: true,
    }
}

fn gradient_suite_line() -> Outcome {
    let start = Instant::now();
    let cases = gradient_suite(&[0, 1, 2]).unwrap();
    let worst = cases.iter().map(|c| c.report.max_rel_err).fold(0.0, f64::max);
    let failing: Vec<String> = cases.iter().filter(|c| !c.passes()).map(|c| format!("{}@{}", c.name, c.seed)).collect();
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        name: "gradient suite",
        pass: failing.is_empty() && secs < 60.0,
        detail: format!("{} cases, worst relative error {worst:.2e} (< {SUITE_TOL:e}), {secs:.1} s{}", cases.len(), if failing.is_empty() { String::new() } else { format!("; failing {}", failing.join(", ")) }),
        enforced: true,
    }
}

fn reductions() -> Outcome {
    const D: usize = 8;
    let mut diffs = Vec::new();
    for pos in [Position::XlRelative, Position::Rope, Position::None] {
        let mut sw = AttentionConfig::switchhead(D, 2, 4, 1, 1).with_position(pos);
        sw.force_unit_gates = true;
        let (a, store) = build_layer(sw, 300);
        let (b, mut ds) = build_layer(AttentionConfig::dense(D, 2, 4).with_position(pos), 301);
        copy_matching(&mut ds, &store);
        if pos == Position::XlRelative {
            let shared = store.get(store.find("l.pos").unwrap()).clone();
            for h in 0..2 {
                set_named(&mut ds, &format!("l.h{h}.pos"), shared.clone());
            }
        }
        let x = rand_tensor(300, "x", &[6, D], 1.0);
        diffs.push(("switchhead E=1", max_diff(run(&a, &store, &x).y.data(), run(&b, &ds, &x).y.data()), 1e-12));
    }
    let mut hg = AttentionConfig::head_gated(D, 3, 4, 3);
    hg.force_unit_gates = true;
    let (a, store) = build_layer(hg, 310);
    let (b, mut ds) = build_layer(AttentionConfig::dense(D, 3, 4), 311);
    copy_matching(&mut ds, &store);
    let x = rand_tensor(310, "x", &[5, D], 1.0);
    diffs.push(("head-gated K=H", max_diff(run(&a, &store, &x).y.data(), run(&b, &ds, &x).y.data()), 1e-12));
    let per_head = AttentionConfig::dense(D, 3, 4);
    let (a, store) = build_layer(per_head, 320);
    let (b, mut cs) = build_layer(AttentionConfig { readout: Readout::Concat, ..per_head }, 321);
    copy_matching(&mut cs, &store);
    diffs.push(("per-head vs concatenated readout", max_diff(run(&a, &store, &x).y.data(), run(&b, &cs, &x).y.data()), 1e-10));
    let bad: Vec<String> = diffs.iter().filter(|(_, d, tol)| d.is_nan() || d >= tol).map(|(n, d, _)| format!("{n} {d:.1e}")).collect();
    let worst = diffs.iter().map(|(_, d, _)| *d).fold(0.0, f64::max);
    Outcome {
        name: "reduction oracles",
        pass: bad.is_empty(),
        detail: if bad.is_empty() { format!("{} reductions, largest difference {worst:.1e}", diffs.len()) } else { bad.join("; ") },
        enforced: true,
    }
}

fn structural_sparsity() -> Outcome {
    const D: usize = 8;
    let x = rand_tensor(400, "x", &[5, D], 1.0);
    let mut bad = Vec::new();
    for (e, k) in [(1, 1), (4, 1), (4, 4), (8, 3)] {
        let (layer, store) = build_layer(AttentionConfig::switchhead(D, 2, 4, e, k), 400);
        let n = run(&layer, &store, &x).counter.attention_matrices();
        if n != 2 {
            bad.push(format!("switchhead E={e} K={k}: {n} matrices"));
        }
    }
    for (e, k) in [(4, 1), (4, 2), (6, 3)] {
        let (layer, store) = build_layer(AttentionConfig::moa(D, 4, e, k), 401);
        let n = run(&layer, &store, &x).counter.attention_matrices();
        if n != k as u64 {
            bad.push(format!("moa E={e} K={k}: {n} matrices"));
        }
    }
    Outcome {
        name: "structural sparsity",
        pass: bad.is_empty(),
        detail: if bad.is_empty() { "switchhead computes H matrices for every E, K; MoA computes K".into() } else { bad.join("; ") },
        enforced: true,
    }
}

fn matching() -> Outcome {
    let target = count_params(&dense_47m(D_MODEL_47M));
    let m = match_params(target, &switchhead_47m(D_MODEL_47M)).unwrap();
    let ok = m.param_count <= target && m.slack <= MAX_SLACK && m.spec.attention.d_head.is_multiple_of(4) && count_params(&m.spec) == m.param_count;
    Outcome {
        name: "matching invariants",
        pass: ok,
        detail: format!(
            "target {target}, found d_head {} d_ff {} ({} parameters, slack {}); published 76 / 2080",
            m.spec.attention.d_head,
            m.spec.mlp.d_ff(),
            m.param_count,
            m.slack
        ),
        enforced: true,
    }
}

/// Model, training and data settings of one ListOps configuration file.
fn listops_setup(file: &str) -> (ModelSpec, TrainConfig, ListOpsParams, usize, usize) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(file);
    let doc: toml::Table = toml::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let spec = ModelSpec::from_toml(&toml::to_string(&doc["model"]).unwrap()).unwrap();
    let train: TrainConfig = doc["train"].clone().try_into().unwrap();
    let data = doc["data"].as_table().unwrap();
    let gen: ListOpsParams = data["generator"].clone().try_into().unwrap();
    let n = |k: &str| data[k].as_integer().unwrap() as usize;
    (spec, train, gen, n("n_train"), n("n_valid"))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn listops() -> Outcome {
    const NAME: &str = "ListOps desk-scale";
    if std::env::var("SWITCHHEAD_LISTOPS_FULL").as_deref() != Ok("1") {
        return Outcome {
            name: NAME,
            pass: false,
            detail: "not run: 3 models x 3 seeds x 8000 steps take about 14 h on one core (measured 0.4-0.7 s per step) against a 1 h budget; set SWITCHHEAD_LISTOPS_FULL=1 to run".into(),
            enforced: false,
        };
    }
    let mut medians = Vec::new();
    for file in ["listops_switchhead2.toml", "listops_dense2.toml", "listops_dense8.toml"] {
        let (spec, cfg, gen, n_train, n_valid) = listops_setup(file);
        let mut accs = Vec::new();
        for seed in 0..3 {
            let mut all = gen_listops(n_train + n_valid, &gen, seed).unwrap();
            let valid = all.split_off(n_train);
            let task = Task::ListOps { train: all, valid };
            let mut model = build(&spec, seed).unwrap();
            train(&mut model, &task, &cfg, seed).unwrap();
            accs.push(evaluate(&model, &task, Split::Valid).unwrap().accuracy.unwrap());
        }
        medians.push(median(accs));
    }
    let (sh2, d2, d8) = (medians[0], medians[1], medians[2]);
    Outcome {
        name: NAME,
        pass: sh2 >= d2 && sh2 >= d8 - 0.05,
        detail: format!("median accuracy switchhead-2 {sh2:.3}, dense-2 {d2:.3}, dense-8 {d8:.3}"),
        enforced: true,
    }
}

fn exclusions() -> Outcome {
    Outcome {
        name: "excluded results",
        pass: true,
        detail: "perplexity, bpc and wall-clock columns are documented targets only, not tested".into(),
        enforced: true,
    }
}

fn main() {
    let outcomes = [memory_column(), counter_vs_formula(), gradient_suite_line(), reductions(), structural_sparsity(), matching(), listops(), exclusions()];
    for o in &outcomes {
        line(o);
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| o.enforced && !o.pass).map(|o| o.name).collect();
    if !failed.is_empty() {
        eprintln!("acceptance failed: {failed:?}");
        std::process::exit(1);
    }
}
