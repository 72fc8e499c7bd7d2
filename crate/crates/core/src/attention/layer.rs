//! Parameters and forward pass of one attention layer, for every variant.

use std::rc::Rc;

use crate::attention::config::{AttentionConfig, ExpertFlags, Position, Readout, Variant};
use crate::attention::position::{relative_base, relative_table, source_ranges, Window};
use crate::error::{ensure, Error, Result};
use crate::moe::{mixture_project, select, ExpertBank, ExpertSelection, GateMode, SelectionConfig};
use crate::numerics::rng::{uniform, SeededRng};
use crate::numerics::{Acct, GateSide, Graph, ParamId, ParamStore, Tensor, Term, Var};

/// A projection that is either one matrix or a bank of expert matrices.
#[derive(Clone, Copy, Debug)]
pub enum Proj {
    Single(ParamId),
    Bank(ExpertBank),
}

#[derive(Clone, Debug)]
struct HeadParams {
    q: Proj,
    k: Proj,
    v: Proj,
    o: Proj,
    /// Per-head position projection (dense XL).
    pos: Option<ParamId>,
    u: Option<ParamId>,
    v_bias: Option<ParamId>,
    w_src: Option<ParamId>,
    w_dst: Option<ParamId>,
}

#[derive(Clone, Debug)]
struct MoaParams {
    k: ParamId,
    v: ParamId,
    q: ExpertBank,
    o: ExpertBank,
    router: ParamId,
    u: Option<ParamId>,
    v_bias: Option<ParamId>,
}

/// Projected keys and values of earlier chunks, one entry per K/V stream.
/// Cached states are constants: no gradient reaches them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerCache {
    pub k: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl LayerCache {
    pub fn len(&self) -> usize {
        self.k.first().map_or(0, Tensor::rows)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOpts {
    /// Keep attention matrices and selections in the returned trace.
    pub trace: bool,
    pub window: Option<Window>,
}

/// Chosen experts and their gate values for every row of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionRecord {
    pub k: usize,
    pub n_experts: usize,
    /// Row-major `[rows x k]`.
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

impl SelectionRecord {
    fn from_selection(sel: &ExpertSelection, g: &Graph) -> Self {
        Self {
            k: sel.route.k(),
            n_experts: sel.route.n_experts(),
            indices: sel.route.indices().to_vec(),
            weights: sel.weights(g),
        }
    }

    pub fn rows(&self) -> usize {
        self.indices.len() / self.k
    }

    /// Dense `[rows x E]` gate grid with zeros for unselected experts.
    pub fn dense(&self) -> Tensor {
        let mut out = vec![0.0; self.rows() * self.n_experts];
        for (i, (&e, &w)) in self.indices.iter().zip(&self.weights).enumerate() {
            out[(i / self.k) * self.n_experts + e] = w;
        }
        Tensor::from_raw(vec![self.rows(), self.n_experts], out)
    }
}

#[derive(Clone, Debug, Default)]
pub struct AttentionTrace {
    /// `[segment][matrix]` attention matrices of shape `[T x S]`.
    pub attention: Vec<Vec<Tensor>>,
    /// Per head: source-side (V/K) selection of SwitchHead.
    pub source: Vec<Option<SelectionRecord>>,
    /// Per head: destination-side (Q/O) selection of SwitchHead.
    pub destination: Vec<Option<SelectionRecord>>,
    /// Head gate of the head-gated variant, or MoA's router.
    pub router: Option<SelectionRecord>,
}

#[derive(Clone, Debug)]
pub struct AttentionLayer {
    cfg: AttentionConfig,
    heads: Vec<HeadParams>,
    shared_pos: Option<ParamId>,
    head_gate: Option<ParamId>,
    moa: Option<MoaParams>,
}

/// Per-segment geometry shared by all heads.
struct Segment {
    start: usize,
    len: usize,
    cached: usize,
    ranges: crate::numerics::RowRanges,
    table: Option<Var>,
}

fn mat(store: &mut ParamStore, name: String, d_in: usize, d_out: usize, rng: &mut SeededRng) -> ParamId {
    store.add(name, uniform(rng, &[d_in, d_out], 1.0 / (d_in as f64).sqrt()))
}

impl AttentionLayer {
    /// Adds the layer's parameters to `store` under `prefix`. Projections
    /// are uniform in `±1/√fan_in`; position biases start at zero.
    pub fn init(cfg: AttentionConfig, store: &mut ParamStore, prefix: &str, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let (d, dh, e) = (cfg.d_model, cfg.d_head, cfg.n_experts);
        let xl = cfg.position == Position::XlRelative;
        let zeros = |store: &mut ParamStore, name: String| xl.then(|| store.add(name, Tensor::zeros(&[dh])));

        if cfg.variant == Variant::Moa {
            let moa = MoaParams {
                k: mat(store, format!("{prefix}.k"), d, dh, rng),
                v: mat(store, format!("{prefix}.v"), d, dh, rng),
                q: ExpertBank::init(store, format!("{prefix}.q"), e, d, dh, rng),
                o: ExpertBank::init(store, format!("{prefix}.o"), e, dh, d, rng),
                router: mat(store, format!("{prefix}.router"), d, e, rng),
                u: zeros(store, format!("{prefix}.u")),
                v_bias: zeros(store, format!("{prefix}.v_bias")),
            };
            let shared_pos = xl.then(|| mat(store, format!("{prefix}.pos"), d, dh, rng));
            return Ok(Self { cfg, heads: Vec::new(), shared_pos, head_gate: None, moa: Some(moa) });
        }

        let switch = cfg.variant == Variant::SwitchHead;
        let flags = if switch { cfg.experts } else { ExpertFlags::NONE };
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let p = format!("{prefix}.h{h}");
            let mut proj = |store: &mut ParamStore, role: &str, flagged: bool, d_in: usize, d_out: usize| {
                if flagged {
                    Proj::Bank(ExpertBank::init(store, format!("{p}.{role}"), e, d_in, d_out, rng))
                } else {
                    Proj::Single(mat(store, format!("{p}.{role}"), d_in, d_out, rng))
                }
            };
            let q = proj(store, "q", flags.q, d, dh);
            let k = proj(store, "k", flags.k, d, dh);
            let v = proj(store, "v", flags.v, d, dh);
            let o = proj(store, "o", flags.o, dh, d);
            let pos = (xl && !switch).then(|| mat(store, format!("{p}.pos"), d, dh, rng));
            let w_src = (switch && flags.source_side()).then(|| mat(store, format!("{p}.sel_src"), d, e, rng));
            let w_dst = (switch && flags.destination_side()).then(|| mat(store, format!("{p}.sel_dst"), d, e, rng));
            let u = zeros(store, format!("{p}.u"));
            let v_bias = zeros(store, format!("{p}.v_bias"));
            heads.push(HeadParams { q, k, v, o, pos, u, v_bias, w_src, w_dst });
        }
        let shared_pos = (xl && switch).then(|| mat(store, format!("{prefix}.pos"), d, dh, rng));
        let head_gate =
            (cfg.variant == Variant::HeadGated).then(|| mat(store, format!("{prefix}.head_gate"), d, cfg.n_heads, rng));
        Ok(Self { cfg, heads, shared_pos, head_gate, moa: None })
    }

    pub fn config(&self) -> &AttentionConfig {
        &self.cfg
    }

    fn gate_mode(&self) -> GateMode {
        if self.cfg.force_unit_gates {
            GateMode::ForcedUnit
        } else {
            GateMode::Learned
        }
    }

    fn selection_cfg(&self, n_experts: usize) -> SelectionConfig {
        SelectionConfig {
            n_experts,
            k_active: self.cfg.k_active,
            activation: self.cfg.selection,
            d_model: self.cfg.d_model,
        }
    }

    /// Attention over a batch of sequences concatenated along rows.
    ///
    /// `segments` holds the row count of each sequence. With `caches`, each
    /// sequence attends to its cached keys/values first and its cache is
    /// then advanced to the last `(C - 1) * T` positions.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        segments: &[usize],
        caches: Option<&mut [LayerCache]>,
        opts: ForwardOpts,
    ) -> Result<(Var, AttentionTrace)> {
        let cfg = &self.cfg;
        let n: usize = segments.iter().sum();
        ensure!(n >= 1 && segments.iter().all(|&s| s >= 1), Contract, "every sequence needs at least one position");
        ensure!(
            g.shape(x) == [n, cfg.d_model],
            Dimension,
            "attention input {:?} does not match [{}, {}]",
            g.shape(x),
            n,
            cfg.d_model
        );
        if let Some(c) = caches.as_deref() {
            self.check_caches(c, segments.len())?;
        }
        let mut segs = Vec::with_capacity(segments.len());
        let mut start = 0;
        for (b, &len) in segments.iter().enumerate() {
            let cached = caches.as_deref().map_or(0, |c| c[b].len());
            segs.push(Segment {
                start,
                len,
                cached,
                ranges: source_ranges(len, cached, cfg.causal, opts.window),
                table: None,
            });
            start += len;
        }
        if cfg.position == Position::XlRelative {
            for s in &mut segs {
                s.table = Some(g.constant(relative_table(s.cached + s.len, cfg.d_model)));
            }
        }
        let mut trace = AttentionTrace { attention: vec![Vec::new(); segs.len()], ..Default::default() };
        let (y, new_kv) = match cfg.variant {
            Variant::Moa => self.forward_moa(g, store, x, &segs, caches.as_deref(), opts, &mut trace)?,
            _ => self.forward_heads(g, store, x, &segs, caches.as_deref(), opts, &mut trace)?,
        };
        if let Some(c) = caches {
            if cfg.context_mult > 1 {
                for ((cache, seg), (k, v)) in c.iter_mut().zip(&segs).zip(new_kv) {
                    let keep = (cfg.context_mult - 1) * seg.len;
                    cache.k = k.into_iter().map(|t| tail(t, keep)).collect();
                    cache.v = v.into_iter().map(|t| tail(t, keep)).collect();
                }
            }
        }
        Ok((y, trace))
    }

    fn check_caches(&self, caches: &[LayerCache], n_segments: usize) -> Result<()> {
        ensure!(
            caches.len() == n_segments,
            Contract,
            "{} caches supplied for {} sequences",
            caches.len(),
            n_segments
        );
        let streams = self.cfg.kv_streams();
        for (b, c) in caches.iter().enumerate() {
            if c.k.is_empty() && c.v.is_empty() {
                continue;
            }
            ensure!(
                c.k.len() == streams && c.v.len() == streams,
                Contract,
                "cache {} holds {}/{} K/V streams, layer uses {}",
                b,
                c.k.len(),
                c.v.len(),
                streams
            );
            let rows = c.len();
            for t in c.k.iter().chain(&c.v) {
                ensure!(
                    t.shape() == [rows, self.cfg.d_head],
                    Contract,
                    "cache {} entry {:?} does not match [{}, {}]",
                    b,
                    t.shape(),
                    rows,
                    self.cfg.d_head
                );
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn project(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        p: &Proj,
        sel: Option<&ExpertSelection>,
        side: GateSide,
        acct: Acct,
    ) -> Result<Var> {
        let prev = g.set_acct(acct);
        let out = match p {
            Proj::Single(id) => {
                let w = g.param(store, *id);
                g.matmul(x, w)
            }
            Proj::Bank(bank) => match sel {
                Some(sel) => {
                    let w = g.param(store, bank.id);
                    mixture_project(g, x, w, sel, side, Term::ExpertMixing)
                }
                None => Err(Error::Contract("expert projection without a selection".into())),
            },
        };
        g.set_acct(prev);
        out
    }

    /// `R = P · W_pos` for one segment, booked as the position term.
    fn position_rows(&self, g: &mut Graph, store: &ParamStore, seg: &Segment, w_pos: ParamId) -> Result<Var> {
        let table = seg.table.ok_or_else(|| Error::Contract("position table missing".into()))?;
        let w = g.param(store, w_pos);
        let prev = g.set_acct(Acct::stored(Term::Position));
        let r = g.matmul(table, w);
        g.set_acct(prev);
        r
    }

    /// Scores, masked softmax and readout of one attention matrix.
    #[allow(clippy::too_many_arguments)]
    fn attend(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        seg: &Segment,
        q: Var,
        k_all: Var,
        v_all: Var,
        rel: Option<(Var, Option<ParamId>, Option<ParamId>)>,
        trace: Option<&mut Vec<Tensor>>,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let sources = seg.cached + seg.len;
        let prev = g.acct();
        let scores = match cfg.position {
            Position::XlRelative => {
                let (r, u, vb) = rel.ok_or_else(|| Error::Contract("relative attention without position rows".into()))?;
                let qu = match u {
                    Some(u) => {
                        let u = g.param(store, u);
                        g.add_row(q, u)?
                    }
                    None => q,
                };
                let qv = match vb {
                    Some(vb) => {
                        let vb = g.param(store, vb);
                        g.add_row(q, vb)?
                    }
                    None => q,
                };
                g.set_acct(Acct::stored(Term::Scores));
                let content = g.matmul_nt(qu, k_all)?;
                g.set_acct(Acct::transient(Term::PositionScores));
                let pos = g.rel_scores(qv, r, sources, relative_base(seg.cached, sources))?;
                g.add(content, pos)?
            }
            Position::Rope => {
                g.set_acct(Acct::transient(Term::Rotary));
                let qr = g.rope(q, seg.cached)?;
                let kr = g.rope(k_all, 0)?;
                g.set_acct(Acct::stored(Term::Scores));
                g.matmul_nt(qr, kr)?
            }
            Position::None => {
                g.set_acct(Acct::stored(Term::Scores));
                g.matmul_nt(q, k_all)?
            }
        };
        let scores = g.scale(scores, cfg.scale_factor());
        g.set_acct(Acct::stored(Term::Scores));
        let a = g.attention_softmax(scores, seg.ranges.clone())?;
        g.set_acct(Acct::stored(Term::Readout));
        let out = g.matmul(a, v_all);
        g.set_acct(prev);
        if let Some(t) = trace {
            t.push(g.value(a).clone());
        }
        out
    }

    fn rows(&self, g: &mut Graph, v: Var, seg: &Segment, total: usize) -> Result<Var> {
        if seg.start == 0 && seg.len == total {
            Ok(v)
        } else {
            g.slice_rows(v, seg.start, seg.len)
        }
    }

    /// Prepends the cached rows of stream `stream` to this segment's rows.
    fn with_cache(&self, g: &mut Graph, cur: Var, cache: Option<&Tensor>) -> Result<Var> {
        match cache {
            Some(t) if t.rows() > 0 => {
                let c = g.constant(t.clone());
                g.concat_rows(&[c, cur])
            }
            _ => Ok(cur),
        }
    }

    #[allow(clippy::too_many_arguments, clippy::type_complexity)]
    fn forward_heads(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        segs: &[Segment],
        caches: Option<&[LayerCache]>,
        opts: ForwardOpts,
        trace: &mut AttentionTrace,
    ) -> Result<(Var, Vec<(Vec<Tensor>, Vec<Tensor>)>)> {
        let cfg = &self.cfg;
        let n: usize = segs.iter().map(|s| s.len).sum();
        let mode = self.gate_mode();
        let shared_rows = match self.shared_pos {
            Some(id) => segs.iter().map(|s| self.position_rows(g, store, s, id).map(Some)).collect::<Result<Vec<_>>>()?,
            None => vec![None; segs.len()],
        };
        let head_sel = match self.head_gate {
            Some(id) => {
                let w = g.param(store, id);
                let sel = select(g, x, w, &self.selection_cfg(cfg.n_heads), mode)?;
                if opts.trace {
                    trace.router = Some(SelectionRecord::from_selection(&sel, g));
                }
                Some(sel)
            }
            None => None,
        };
        let mut new_kv: Vec<(Vec<Tensor>, Vec<Tensor>)> = vec![(Vec::new(), Vec::new()); segs.len()];
        let mut outputs = Vec::with_capacity(self.heads.len());
        let mut readouts = Vec::with_capacity(self.heads.len());
        for (h, head) in self.heads.iter().enumerate() {
            let mut sel_for = |w: Option<ParamId>| -> Result<Option<ExpertSelection>> {
                match w {
                    Some(id) => {
                        let w = g.param(store, id);
                        Ok(Some(select(g, x, w, &self.selection_cfg(cfg.n_experts), mode)?))
                    }
                    None => Ok(None),
                }
            };
            let src = sel_for(head.w_src)?;
            let dst = sel_for(head.w_dst)?;
            if opts.trace {
                trace.source.push(src.as_ref().map(|s| SelectionRecord::from_selection(s, g)));
                trace.destination.push(dst.as_ref().map(|s| SelectionRecord::from_selection(s, g)));
            }
            let stored = Acct::stored(Term::Projection);
            let q = self.project(g, store, x, &head.q, dst.as_ref(), GateSide::Output, stored)?;
            let k = self.project(g, store, x, &head.k, src.as_ref(), GateSide::Output, stored)?;
            let v = self.project(g, store, x, &head.v, src.as_ref(), GateSide::Output, stored)?;
            let mut parts = Vec::with_capacity(segs.len());
            for (b, seg) in segs.iter().enumerate() {
                let qb = self.rows(g, q, seg, n)?;
                let kb = self.rows(g, k, seg, n)?;
                let vb = self.rows(g, v, seg, n)?;
                let cache = caches.map(|c| &c[b]);
                let k_all = self.with_cache(g, kb, cache.and_then(|c| c.k.get(h)))?;
                let v_all = self.with_cache(g, vb, cache.and_then(|c| c.v.get(h)))?;
                let rel = match cfg.position {
                    Position::XlRelative => {
                        let r = match (head.pos, shared_rows[b]) {
                            (Some(id), _) => self.position_rows(g, store, seg, id)?,
                            (None, Some(r)) => r,
                            (None, None) => return Err(Error::Contract("no position projection".into())),
                        };
                        Some((r, head.u, head.v_bias))
                    }
                    _ => None,
                };
                let t = opts.trace.then(|| &mut trace.attention[b]);
                parts.push(self.attend(g, store, seg, qb, k_all, v_all, rel, t)?);
                if cfg.context_mult > 1 {
                    new_kv[b].0.push(g.value(k_all).clone());
                    new_kv[b].1.push(g.value(v_all).clone());
                }
            }
            let r = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
            if cfg.readout == Readout::Concat {
                readouts.push(r);
                continue;
            }
            let mut o = self.project(g, store, r, &head.o, dst.as_ref(), GateSide::Input, Acct::transient(Term::Projection))?;
            if let Some(sel) = &head_sel {
                if let Some(gates) = sel.gates {
                    let gate = g.routed_gate(gates, sel.route.clone(), h)?;
                    let prev = g.set_acct(Acct::transient(Term::ExpertMixing));
                    o = g.scale_rows(o, gate)?;
                    g.set_acct(prev);
                } else {
                    // Unit gates: heads outside the route are still dropped.
                    let mask: Vec<f64> =
                        (0..n).map(|t| if sel.route.contains(t, h) { 1.0 } else { 0.0 }).collect();
                    if mask.contains(&0.0) {
                        let m = g.constant(Tensor::from_raw(vec![n], mask));
                        let prev = g.set_acct(Acct::transient(Term::ExpertMixing));
                        o = g.scale_rows(o, m)?;
                        g.set_acct(prev);
                    }
                }
            }
            outputs.push(o);
        }
        let y = if cfg.readout == Readout::Concat {
            let cat = g.concat_cols(&readouts)?;
            let ws: Vec<Var> = self
                .heads
                .iter()
                .map(|h| match h.o {
                    Proj::Single(id) => Ok(g.param(store, id)),
                    Proj::Bank(_) => Err(Error::Contract("concatenated readout needs plain output projections".into())),
                })
                .collect::<Result<_>>()?;
            let w = g.concat_rows(&ws)?;
            let prev = g.set_acct(Acct::transient(Term::Projection));
            let y = g.matmul(cat, w);
            g.set_acct(prev);
            y?
        } else {
            sum_all(g, &outputs)?
        };
        Ok((y, new_kv))
    }

    #[allow(clippy::too_many_arguments, clippy::type_complexity)]
    fn forward_moa(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        segs: &[Segment],
        caches: Option<&[LayerCache]>,
        opts: ForwardOpts,
        trace: &mut AttentionTrace,
    ) -> Result<(Var, Vec<(Vec<Tensor>, Vec<Tensor>)>)> {
        let cfg = &self.cfg;
        let p = self.moa.as_ref().ok_or_else(|| Error::Contract("MoA parameters missing".into()))?;
        let n: usize = segs.iter().map(|s| s.len).sum();
        let router = g.param(store, p.router);
        let sel = select(g, x, router, &self.selection_cfg(cfg.n_experts), self.gate_mode())?;
        if opts.trace {
            trace.router = Some(SelectionRecord::from_selection(&sel, g));
        }
        let stored = Acct::stored(Term::Projection);
        let k = self.project(g, store, x, &Proj::Single(p.k), None, GateSide::Output, stored)?;
        let v = self.project(g, store, x, &Proj::Single(p.v), None, GateSide::Output, stored)?;
        let mut kv = Vec::with_capacity(segs.len());
        let mut new_kv: Vec<(Vec<Tensor>, Vec<Tensor>)> = vec![(Vec::new(), Vec::new()); segs.len()];
        for (b, seg) in segs.iter().enumerate() {
            let kb = self.rows(g, k, seg, n)?;
            let vb = self.rows(g, v, seg, n)?;
            let cache = caches.map(|c| &c[b]);
            let k_all = self.with_cache(g, kb, cache.and_then(|c| c.k.first()))?;
            let v_all = self.with_cache(g, vb, cache.and_then(|c| c.v.first()))?;
            let r = match self.shared_pos {
                Some(id) => Some(self.position_rows(g, store, seg, id)?),
                None => None,
            };
            if cfg.context_mult > 1 {
                new_kv[b] = (vec![g.value(k_all).clone()], vec![g.value(v_all).clone()]);
            }
            kv.push((k_all, v_all, r));
        }
        let q_bank = g.param(store, p.q.id);
        let o_bank = g.param(store, p.o.id);
        let mut outputs = Vec::with_capacity(cfg.k_active);
        for slot in 0..cfg.k_active {
            let one = ExpertSelection { route: Rc::new(sel.route.slot(slot)), gates: None };
            let prev = g.set_acct(stored);
            let q = mixture_project(g, x, q_bank, &one, GateSide::Output, Term::Selection);
            g.set_acct(prev);
            let q = q?;
            let mut parts = Vec::with_capacity(segs.len());
            for (b, seg) in segs.iter().enumerate() {
                let qb = self.rows(g, q, seg, n)?;
                let (k_all, v_all, r) = kv[b];
                let rel = r.map(|r| (r, p.u, p.v_bias));
                let t = opts.trace.then(|| &mut trace.attention[b]);
                parts.push(self.attend(g, store, seg, qb, k_all, v_all, rel, t)?);
            }
            let r = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
            let gated = ExpertSelection { route: one.route, gates: sel.gates };
            let prev = g.set_acct(Acct::transient(Term::Projection));
            let o = mixture_project(g, r, o_bank, &gated, GateSide::Input, Term::Selection);
            g.set_acct(prev);
            outputs.push(o?);
        }
        Ok((sum_all(g, &outputs)?, new_kv))
    }
}

fn sum_all(g: &mut Graph, parts: &[Var]) -> Result<Var> {
    let (&first, rest) = parts.split_first().ok_or_else(|| Error::Contract("nothing to sum".into()))?;
    rest.iter().try_fold(first, |acc, &p| g.add(acc, p))
}

fn tail(t: Tensor, keep: usize) -> Tensor {
    let rows = t.rows();
    if rows <= keep {
        t
    } else {
        t.slice_rows(rows - keep, keep).expect("tail within bounds")
    }
}
