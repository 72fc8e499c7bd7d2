//! Shared helpers and independent loop-based oracles for integration tests.
#![allow(dead_code)]

use switchhead_core::attention::{AttentionConfig, AttentionLayer, AttentionTrace, ForwardOpts, LayerCache, Position, Scale, Variant};
use switchhead_core::numerics::rng::{rng_for, uniform};
use switchhead_core::numerics::{Graph, OpCounter, ParamStore, Tensor, Var};

pub fn rand_tensor(seed: u64, label: &str, shape: &[usize], bound: f64) -> Tensor {
    uniform(&mut rng_for(seed, label), shape, bound)
}

/// Builds a layer and re-draws every parameter (including the zero-initialised
/// position biases) so that no term of the forward pass is trivially zero.
pub fn build(cfg: AttentionConfig, seed: u64) -> (AttentionLayer, ParamStore) {
    let mut store = ParamStore::new();
    let layer = AttentionLayer::init(cfg, &mut store, "l", &mut rng_for(seed, "init")).unwrap();
    let mut r = rng_for(seed, "redraw");
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        store.set(id, uniform(&mut r, &shape, 0.5)).unwrap();
    }
    (layer, store)
}

pub struct Run {
    pub y: Tensor,
    pub trace: AttentionTrace,
    pub counter: OpCounter,
}

pub fn run_with(layer: &AttentionLayer, store: &ParamStore, x: &Tensor, segs: &[usize], caches: Option<&mut [LayerCache]>) -> Run {
    let mut g = Graph::with_counter(OpCounter::enabled());
    let xv = g.constant(x.clone());
    let (y, trace) = layer.forward(&mut g, store, xv, segs, caches, ForwardOpts { trace: true, window: None }).unwrap();
    Run { y: g.value(y).clone(), trace, counter: g.counter().clone() }
}

pub fn run(layer: &AttentionLayer, store: &ParamStore, x: &Tensor) -> Run {
    run_with(layer, store, x, &[x.rows()], None)
}

/// Overwrites every parameter of `dst` whose name exists in `src` with the
/// same number of entries.
pub fn copy_matching(dst: &mut ParamStore, src: &ParamStore) {
    let ids: Vec<_> = dst.ids().collect();
    for id in ids {
        if let Some(s) = src.find(dst.name(id)) {
            let v = src.get(s);
            if v.numel() == dst.get(id).numel() {
                let shape = dst.get(id).shape().to_vec();
                dst.set(id, Tensor::new(&shape, v.data().to_vec()).unwrap()).unwrap();
            }
        }
    }
}

pub fn set_named(store: &mut ParamStore, name: &str, value: Tensor) {
    let id = store.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    let shape = store.get(id).shape().to_vec();
    store.set(id, Tensor::new(&shape, value.into_data()).unwrap()).unwrap();
}

/// Weighted sum of all outputs, for finite-difference checks.
pub fn probe(g: &mut Graph, y: Var, seed: u64) -> Var {
    let shape = g.shape(y).to_vec();
    let w = g.constant(rand_tensor(seed, "probe", &shape, 1.0));
    let p = g.mul(y, w).unwrap();
    g.sum(p)
}

// ---- independent oracle -------------------------------------------------

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn row_times(x: &[f64], m: &[f64], d_out: usize) -> Vec<f64> {
    (0..d_out).map(|j| x.iter().enumerate().map(|(i, xi)| xi * m[i * d_out + j]).sum()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Top-k experts and their gates for one logit row, by full sort.
pub fn oracle_topk(logits: &[f64], k: usize, softmax: bool, unit: bool) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b)));
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    let mut chosen: Vec<usize> = order[..k].to_vec();
    chosen.sort();
    chosen
        .into_iter()
        .map(|e| {
            let w = if unit {
                1.0
            } else if softmax {
                logits[e].exp() / z
            } else {
                sigmoid(logits[e])
            };
            (e, w)
        })
        .collect()
}

/// Sinusoid of a signed distance, sines then cosines.
pub fn oracle_sinusoid(dist: f64, d: usize) -> Vec<f64> {
    let half_up = d.div_ceil(2);
    let freq = |c: usize| 1.0 / 10000f64.powf(2.0 * c as f64 / d as f64);
    let mut out: Vec<f64> = (0..half_up).map(|c| (dist * freq(c)).sin()).collect();
    out.extend((0..d / 2).map(|c| (dist * freq(c)).cos()));
    out
}

pub fn oracle_rotate(v: &[f64], pos: usize) -> Vec<f64> {
    let n = v.len();
    let mut out = v.to_vec();
    for i in 0..n / 2 {
        let theta = pos as f64 * 10000f64.powf(-2.0 * i as f64 / n as f64);
        let (s, c) = theta.sin_cos();
        out[2 * i] = v[2 * i] * c - v[2 * i + 1] * s;
        out[2 * i + 1] = v[2 * i] * s + v[2 * i + 1] * c;
    }
    out
}

/// Per-token matrix of one projection role: a plain matrix, or the gate
/// weighted sum of the selected expert matrices materialised first.
fn mixed(store: &ParamStore, name: &str, sel: Option<&[(usize, f64)]>) -> Vec<f64> {
    let w = store.get(store.find(name).unwrap());
    match w.shape().len() {
        2 => w.data().to_vec(),
        _ => {
            let per = w.shape()[1] * w.shape()[2];
            let mut m = vec![0.0; per];
            for &(e, g) in sel.expect("bank without selection") {
                for (mi, wi) in m.iter_mut().zip(&w.data()[e * per..(e + 1) * per]) {
                    *mi += g * wi;
                }
            }
            m
        }
    }
}

/// Loop oracle for dense, head-gated and SwitchHead layers over one
/// sequence without cache.
pub fn oracle_heads(cfg: &AttentionConfig, store: &ParamStore, x: &Tensor) -> Vec<f64> {
    let (t_len, d, dh) = (x.rows(), cfg.d_model, cfg.d_head);
    let scale = match cfg.scale {
        Scale::DModel => 1.0 / (d as f64).sqrt(),
        Scale::DHead => 1.0 / (dh as f64).sqrt(),
    };
    let unit = cfg.force_unit_gates;
    let softmax_sel = cfg.selection == switchhead_core::moe::Activation::Softmax;
    let logits_of = |name: &str, t: usize| -> Vec<f64> {
        let w = store.get(store.find(name).unwrap());
        row_times(x.row(t), w.data(), w.shape()[1])
    };
    let head_gate: Option<Vec<Vec<(usize, f64)>>> = (cfg.variant == Variant::HeadGated)
        .then(|| (0..t_len).map(|t| oracle_topk(&logits_of("l.head_gate", t), cfg.k_active, softmax_sel, unit)).collect());
    let mut y = vec![0.0; t_len * d];
    for h in 0..cfg.n_heads {
        let p = format!("l.h{h}");
        let sel = |side: &str| -> Vec<Option<Vec<(usize, f64)>>> {
            let name = format!("{p}.{side}");
            (0..t_len)
                .map(|t| store.find(&name).map(|_| oracle_topk(&logits_of(&name, t), cfg.k_active, softmax_sel, unit)))
                .collect()
        };
        let src = sel("sel_src");
        let dst = sel("sel_dst");
        let proj = |role: &str, sides: &[Option<Vec<(usize, f64)>>], t: usize, d_out: usize, input: &[f64]| {
            let m = mixed(store, &format!("{p}.{role}"), sides[t].as_deref());
            row_times(input, &m, d_out)
        };
        let q: Vec<Vec<f64>> = (0..t_len).map(|t| proj("q", &dst, t, dh, x.row(t))).collect();
        let k: Vec<Vec<f64>> = (0..t_len).map(|t| proj("k", &src, t, dh, x.row(t))).collect();
        let v: Vec<Vec<f64>> = (0..t_len).map(|t| proj("v", &src, t, dh, x.row(t))).collect();
        let get = |n: &str| store.find(n).map(|id| store.get(id).data().to_vec());
        let u = get(&format!("{p}.u"));
        let vb = get(&format!("{p}.v_bias"));
        let wpos = get(&format!("{p}.pos")).or_else(|| get("l.pos"));
        for t in 0..t_len {
            let hi = if cfg.causal { t + 1 } else { t_len };
            let mut s: Vec<f64> = (0..hi)
                .map(|j| {
                    let raw = match cfg.position {
                        Position::XlRelative => {
                            let qu: Vec<f64> = q[t].iter().zip(u.as_ref().unwrap()).map(|(a, b)| a + b).collect();
                            let qv: Vec<f64> = q[t].iter().zip(vb.as_ref().unwrap()).map(|(a, b)| a + b).collect();
                            let r = row_times(&oracle_sinusoid(t as f64 - j as f64, d), wpos.as_ref().unwrap(), dh);
                            dot(&qu, &k[j]) + dot(&qv, &r)
                        }
                        Position::Rope => dot(&oracle_rotate(&q[t], t), &oracle_rotate(&k[j], j)),
                        Position::None => dot(&q[t], &k[j]),
                    };
                    raw * scale
                })
                .collect();
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            s.iter_mut().for_each(|v| *v = (*v - mx).exp());
            let z: f64 = s.iter().sum();
            let mut r = vec![0.0; dh];
            for (j, a) in s.iter().enumerate() {
                for c in 0..dh {
                    r[c] += a / z * v[j][c];
                }
            }
            let mut o = proj("o", &dst, t, d, &r);
            if let Some(hg) = &head_gate {
                let g = hg[t].iter().find(|(e, _)| *e == h).map_or(0.0, |(_, w)| *w);
                o.iter_mut().for_each(|v| *v *= g);
            }
            for c in 0..d {
                y[t * d + c] += o[c];
            }
        }
    }
    y
}

/// Loop oracle for MoA: every expert computes its own attention against the
/// shared keys/values; outputs are masked to the routed experts and gated.
pub fn oracle_moa(cfg: &AttentionConfig, store: &ParamStore, x: &Tensor) -> Vec<f64> {
    let (t_len, d, dh, e_n) = (x.rows(), cfg.d_model, cfg.d_head, cfg.n_experts);
    let scale = 1.0 / (d as f64).sqrt();
    let get = |n: &str| store.get(store.find(n).unwrap()).data().to_vec();
    let (wk, wv, wq, wo, router) = (get("l.k"), get("l.v"), get("l.q"), get("l.o"), get("l.router"));
    let softmax_sel = cfg.selection == switchhead_core::moe::Activation::Softmax;
    let k: Vec<Vec<f64>> = (0..t_len).map(|t| row_times(x.row(t), &wk, dh)).collect();
    let v: Vec<Vec<f64>> = (0..t_len).map(|t| row_times(x.row(t), &wv, dh)).collect();
    let xl = cfg.position == Position::XlRelative;
    let (u, vb, wpos) = if xl { (get("l.u"), get("l.v_bias"), get("l.pos")) } else { (vec![], vec![], vec![]) };
    let mut y = vec![0.0; t_len * d];
    for e in 0..e_n {
        let q: Vec<Vec<f64>> = (0..t_len).map(|t| row_times(x.row(t), &wq[e * d * dh..(e + 1) * d * dh], dh)).collect();
        for t in 0..t_len {
            let sel = oracle_topk(&row_times(x.row(t), &router, e_n), cfg.k_active, softmax_sel, cfg.force_unit_gates);
            let Some(&(_, gate)) = sel.iter().find(|(i, _)| *i == e) else { continue };
            let hi = if cfg.causal { t + 1 } else { t_len };
            let mut s: Vec<f64> = (0..hi)
                .map(|j| {
                    let raw = if xl {
                        let qu: Vec<f64> = q[t].iter().zip(&u).map(|(a, b)| a + b).collect();
                        let qv: Vec<f64> = q[t].iter().zip(&vb).map(|(a, b)| a + b).collect();
                        let r = row_times(&oracle_sinusoid(t as f64 - j as f64, d), &wpos, dh);
                        dot(&qu, &k[j]) + dot(&qv, &r)
                    } else {
                        dot(&q[t], &k[j])
                    };
                    raw * scale
                })
                .collect();
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            s.iter_mut().for_each(|v| *v = (*v - mx).exp());
            let z: f64 = s.iter().sum();
            let mut r = vec![0.0; dh];
            for (j, a) in s.iter().enumerate() {
                for c in 0..dh {
                    r[c] += a / z * v[j][c];
                }
            }
            let o = row_times(&r, &wo[e * dh * d..(e + 1) * dh * d], d);
            for c in 0..d {
                y[t * d + c] += gate * o[c];
            }
        }
    }
    y
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
