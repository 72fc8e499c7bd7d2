//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Node values are
//! owned by the tape; [`Var`] is a plain index. Inputs of a node always have
//! smaller indices than the node itself, so a single reverse sweep suffices.

use std::rc::Rc;

use crate::error::{ensure, Error, Result};
use crate::numerics::counter::{Acct, OpCounter, Term};
use crate::numerics::kernels::{self, gemm};
use crate::numerics::params::{ParamId, ParamStore};
use crate::numerics::topk::Route;
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which side of an expert projection the gate multiplies.
///
/// Both are the same linear map; they differ in where the `rows * k * width`
/// gating MACs are paid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateSide {
    Input,
    Output,
}

/// Per-row allowed source range `[lo, hi)` for masked softmax.
pub type RowRanges = Rc<Vec<(usize, usize)>>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    MaskedSoftmax(Var, RowRanges),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Rc<Vec<usize>>),
    MeanRows(Var),
    Sum(Var),
    CrossEntropy { logits: Var, targets: Rc<Vec<usize>>, probs: Vec<f64> },
    RelScores { q: Var, r: Var, base: usize },
    Rope { a: Var, offset: usize },
    Mixture { x: Var, bank: Var, gates: Option<Var>, route: Rc<Route> },
    MoeMlp { x: Var, up: Var, down: Var, gates: Option<Var>, route: Rc<Route>, hidden: Vec<Vec<f64>>, outs: Vec<Vec<f64>> },
    RoutedGate { gates: Var, route: Rc<Route>, expert: usize },
    Dropout(Var, Vec<f64>),
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    param: Option<ParamId>,
    op: Op,
}

/// One recorded forward computation.
pub struct Graph {
    nodes: Vec<Node>,
    counter: OpCounter,
    acct: Acct,
    param_vars: Vec<Option<Var>>,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::with_counter(OpCounter::disabled())
    }

    pub fn with_counter(counter: OpCounter) -> Self {
        Self {
            nodes: Vec::new(),
            counter,
            acct: Acct::default(),
            param_vars: Vec::new(),
            backward_done: false,
        }
    }

    pub fn counter(&self) -> &OpCounter {
        &self.counter
    }

    pub fn counter_mut(&mut self) -> &mut OpCounter {
        &mut self.counter
    }

    /// Sets the accounting tag for subsequent primitive calls; returns the
    /// previous one.
    pub fn set_acct(&mut self, acct: Acct) -> Acct {
        std::mem::replace(&mut self.acct, acct)
    }

    pub fn acct(&self) -> Acct {
        self.acct
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, grad: None, requires_grad, param: None, op });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, macs: usize, out: usize) {
        self.counter.record(self.acct, macs as u64, out as u64);
    }

    // ---- leaves -------------------------------------------------------

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad: false, param: None, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf not tied to a parameter store.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad: true, param: None, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if id.0 >= self.param_vars.len() {
            self.param_vars.resize(id.0 + 1, None);
        }
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: store.get(id).clone(),
            grad: None,
            requires_grad: true,
            param: Some(id),
            op: Op::Leaf,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    // ---- linear algebra ----------------------------------------------

    /// `a [m x k] @ b [k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        ensure!(
            k == k2,
            Dimension,
            "matmul inner dimensions differ: {:?} @ {:?}",
            self.shape(a),
            self.shape(b)
        );
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        self.record(m * n * k, m * n);
        Ok(self.push(Tensor::from_raw(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    /// `a [m x k] @ b [n x k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(b).dims2()?;
        ensure!(
            k == k2,
            Dimension,
            "matmul_nt inner dimensions differ: {:?} @ {:?}ᵀ",
            self.shape(a),
            self.shape(b)
        );
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), true, &mut out, 0.0);
        self.record(m * n * k, m * n);
        Ok(self.push(Tensor::from_raw(vec![m, n], out), Op::MatMulNt(a, b), &[a, b]))
    }

    // ---- elementwise --------------------------------------------------

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        ensure!(
            self.shape(a) == self.shape(b),
            Dimension,
            "{} shape mismatch: {:?} vs {:?}",
            what,
            self.shape(a),
            self.shape(b)
        );
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f64> = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_raw(shape, out), Op::Add(a, b), &[a, b]))
    }

    /// Adds a length-`n` vector to every row of `a [m x n]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        ensure!(
            self.value(bias).numel() == n,
            Dimension,
            "row bias of {} values for {} columns",
            self.value(bias).numel(),
            n
        );
        let b = self.value(bias).data();
        let mut out = self.value(a).data().to_vec();
        for r in 0..m {
            kernels::add_into(&mut out[r * n..(r + 1) * n], b);
        }
        Ok(self.push(Tensor::from_raw(vec![m, n], out), Op::AddRow(a, bias), &[a, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<f64> = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_raw(shape, out), Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out: Vec<f64> = self.value(a).data().iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_raw(shape, out), Op::Scale(a, c), &[a])
    }

    /// Multiplies row `i` of `a [m x n]` by `g[i]`.
    pub fn scale_rows(&mut self, a: Var, g: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        ensure!(
            self.value(g).numel() == m,
            Dimension,
            "row scale of {} values for {} rows",
            self.value(g).numel(),
            m
        );
        let gv = self.value(g).data();
        let av = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                out[r * n + c] = av[r * n + c] * gv[r];
            }
        }
        self.record(m * n, m * n);
        Ok(self.push(Tensor::from_raw(vec![m, n], out), Op::ScaleRows(a, g), &[a, g]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.value(a).data().iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_raw(shape, out), Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.value(a).data().iter().map(|&x| kernels::sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_raw(shape, out), Op::Sigmoid(a), &[a])
    }

    /// Inverted dropout with a caller-supplied keep mask (`true` = keep).
    pub fn dropout(&mut self, a: Var, keep: &[bool], rate: f64) -> Result<Var> {
        ensure!(keep.len() == self.value(a).numel(), Dimension, "dropout mask length mismatch");
        ensure!((0.0..1.0).contains(&rate), Contract, "dropout rate {} outside [0, 1)", rate);
        let scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = keep.iter().map(|&k| if k { scale } else { 0.0 }).collect();
        let out: Vec<f64> = self.value(a).data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_raw(shape, out), Op::Dropout(a, mask), &[a]))
    }

    // ---- normalisation -------------------------------------------------

    /// Softmax over the last dimension, max-subtracted.
    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).cols();
        ensure!(n >= 1 && !self.shape(a).is_empty(), Dimension, "softmax over an empty last dimension");
        let x = self.value(a).data();
        let mut out = vec![0.0; x.len()];
        for (xr, or) in x.chunks(n).zip(out.chunks_mut(n)) {
            kernels::softmax_into(xr, or);
        }
        let total = out.len();
        self.record(0, total);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_raw(shape, out), Op::Softmax(a), &[a]))
    }

    /// Row-wise softmax of an attention score matrix restricted to the
    /// allowed source range of each row; masked entries are exactly zero.
    /// Counts as one computed attention matrix.
    pub fn attention_softmax(&mut self, scores: Var, ranges: RowRanges) -> Result<Var> {
        let (m, n) = self.value(scores).dims2()?;
        ensure!(ranges.len() == m, Dimension, "mask has {} rows for {} score rows", ranges.len(), m);
        for &(lo, hi) in ranges.iter() {
            ensure!(lo < hi && hi <= n, Contract, "invalid attention range {}..{} for {} sources", lo, hi, n);
        }
        let x = self.value(scores).data();
        let mut out = vec![0.0; m * n];
        for (r, &(lo, hi)) in ranges.iter().enumerate() {
            kernels::softmax_into(&x[r * n + lo..r * n + hi], &mut out[r * n + lo..r * n + hi]);
        }
        self.record(0, m * n);
        self.counter.record_attention_matrix();
        Ok(self.push(Tensor::from_raw(vec![m, n], out), Op::MaskedSoftmax(scores, ranges), &[scores]))
    }

    /// Layer normalisation over the last dimension with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        ensure!(
            self.value(gain).numel() == n && self.value(bias).numel() == n,
            Dimension,
            "layer norm parameters do not match width {}",
            n
        );
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * gv[c] + bv[c];
            }
        }
        Ok(self.push(
            Tensor::from_raw(vec![m, n], out),
            Op::LayerNorm { x, gain, bias, xhat, rstd },
            &[x, gain, bias],
        ))
    }

    // ---- structure -----------------------------------------------------

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        ensure!(!parts.is_empty(), Contract, "concat_rows of nothing");
        let n = self.value(parts[0]).dims2()?.1;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.value(p).dims2()?;
            ensure!(pn == n, Dimension, "concat_rows width mismatch: {} vs {}", pn, n);
            out.extend_from_slice(self.value(p).data());
            m += pm;
        }
        Ok(self.push(Tensor::from_raw(vec![m, n], out), Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        ensure!(!parts.is_empty(), Contract, "concat_cols of nothing");
        let m = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.value(p).dims2()?;
            ensure!(pm == m, Dimension, "concat_cols height mismatch: {} vs {}", pm, m);
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let mut off = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                out[r * n + off..r * n + off + w].copy_from_slice(self.value(p).row(r));
                off += w;
            }
        }
        Ok(self.push(Tensor::from_raw(vec![m, n], out), Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a).slice_rows(start, len)?;
        Ok(self.push(t, Op::SliceRows(a, start), &[a]))
    }

    /// Rows of `table` selected by `idx` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let (m, n) = self.value(table).dims2()?;
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx.iter() {
            ensure!(i < m, Contract, "row index {} out of range for {} rows", i, m);
            out.extend_from_slice(self.value(table).row(i));
        }
        Ok(self.push(Tensor::from_raw(vec![idx.len(), n], out), Op::GatherRows(table, idx), &[table]))
    }

    /// Column means of `a [m x n]` as a `[1 x n]` matrix.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        ensure!(m > 0, Contract, "mean over zero rows");
        let mut out = vec![0.0; n];
        for r in 0..m {
            kernels::add_into(&mut out, self.value(a).row(r));
        }
        out.iter_mut().for_each(|v| *v /= m as f64);
        Ok(self.push(Tensor::from_raw(vec![1, n], out), Op::MeanRows(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Mean cross-entropy of row-wise logits against class targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: Rc<Vec<usize>>) -> Result<Var> {
        let (m, n) = self.value(logits).dims2()?;
        ensure!(targets.len() == m, Dimension, "{} targets for {} rows", targets.len(), m);
        ensure!(m > 0, Contract, "cross entropy over zero rows");
        let x = self.value(logits).data();
        let mut probs = vec![0.0; m * n];
        let mut loss = 0.0;
        for r in 0..m {
            let t = targets[r];
            ensure!(t < n, Contract, "target {} out of range for {} classes", t, n);
            let row = &x[r * n..(r + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            for c in 0..n {
                probs[r * n + c] = (row[c] - lse).exp();
            }
        }
        Ok(self.push(
            Tensor::scalar(loss / m as f64),
            Op::CrossEntropy { logits, targets, probs },
            &[logits],
        ))
    }

    // ---- attention-specific -------------------------------------------

    /// Relative-position scores `out[t, j] = q[t] · r[base + t - j]` for a
    /// `[T x S]` score block.
    pub fn rel_scores(&mut self, q: Var, r: Var, sources: usize, base: usize) -> Result<Var> {
        let (t_len, d) = self.value(q).dims2()?;
        let (p, d2) = self.value(r).dims2()?;
        ensure!(d == d2, Dimension, "relative scores width mismatch {} vs {}", d, d2);
        ensure!(
            base + 1 >= sources && base + t_len <= p,
            Dimension,
            "position table of {} rows cannot cover base {} for {}x{} scores",
            p,
            base,
            t_len,
            sources
        );
        let qv = self.value(q).data();
        let rv = self.value(r).data();
        let mut out = vec![0.0; t_len * sources];
        for t in 0..t_len {
            let qt = &qv[t * d..(t + 1) * d];
            for j in 0..sources {
                let idx = base + t - j;
                out[t * sources + j] = kernels::dot(qt, &rv[idx * d..(idx + 1) * d]);
            }
        }
        self.record(t_len * sources * d, t_len * sources);
        Ok(self.push(
            Tensor::from_raw(vec![t_len, sources], out),
            Op::RelScores { q, r, base },
            &[q, r],
        ))
    }

    /// Rotary embedding of consecutive channel pairs, row `t` rotated by
    /// position `offset + t` with base 10000.
    pub fn rope(&mut self, a: Var, offset: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        ensure!(n % 2 == 0, Contract, "rotary embedding needs an even width, got {}", n);
        let out = rotate(self.value(a).data(), m, n, offset, 1.0);
        self.record(2 * m * n, m * n);
        Ok(self.push(Tensor::from_raw(vec![m, n], out), Op::Rope { a, offset }, &[a]))
    }

    /// Gate-weighted mixture of expert projections:
    /// `out[t] = Σ_{e ∈ route[t]} g[t, e] · x[t] · bank[e]`.
    ///
    /// `bank` is `[E, d_in, d_out]`; `gates` is `[rows, E]` or `None` for unit
    /// gates. Projection MACs go to the current tag, gating MACs to
    /// `gate_term`, paid on `side`.
    pub fn mixture(
        &mut self,
        x: Var,
        bank: Var,
        gates: Option<Var>,
        route: Rc<Route>,
        side: GateSide,
        gate_term: Term,
    ) -> Result<Var> {
        let (rows, d_in) = self.value(x).dims2()?;
        let (e_count, bd_in, d_out) = match *self.shape(bank) {
            [e, i, o] => (e, i, o),
            ref s => return Err(Error::Dimension(format!("expert bank must be 3-D, got {:?}", s))),
        };
        ensure!(bd_in == d_in, Dimension, "bank input width {} vs activations {}", bd_in, d_in);
        ensure!(
            route.rows() == rows && route.n_experts() == e_count,
            Contract,
            "route {}x{} over {} experts does not match {} rows / {} experts",
            route.rows(),
            route.k(),
            route.n_experts(),
            rows,
            e_count
        );
        if let Some(g) = gates {
            ensure!(
                self.shape(g) == [rows, e_count],
                Dimension,
                "gates {:?} do not match {}x{}",
                self.shape(g),
                rows,
                e_count
            );
        }
        let xv = self.value(x).data();
        let bv = self.value(bank).data();
        let gv = gates.map(|g| self.value(g).data());
        let mut out = vec![0.0; rows * d_out];
        for (e, members) in route.by_expert().iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let w = &bv[e * d_in * d_out..(e + 1) * d_in * d_out];
            let xe = gather(xv, d_in, members);
            let mut pe = vec![0.0; members.len() * d_out];
            gemm(members.len(), d_in, d_out, &xe, false, w, false, &mut pe, 0.0);
            for (i, &(r, _)) in members.iter().enumerate() {
                let gate = gv.map_or(1.0, |g| g[r * e_count + e]);
                kernels::axpy(gate, &pe[i * d_out..(i + 1) * d_out], &mut out[r * d_out..(r + 1) * d_out]);
            }
        }
        let k = route.k();
        self.record(rows * k * d_in * d_out, rows * d_out);
        if gates.is_some() {
            let width = match side {
                GateSide::Input => d_in,
                GateSide::Output => d_out,
            };
            self.counter.record(Acct::transient(gate_term), (rows * k * width) as u64, 0);
        }
        let inputs: Vec<Var> = [Some(x), Some(bank), gates].into_iter().flatten().collect();
        Ok(self.push(
            Tensor::from_raw(vec![rows, d_out], out),
            Op::Mixture { x, bank, gates, route },
            &inputs,
        ))
    }

    /// Non-competitive expert MLP:
    /// `out[t] = Σ_{e ∈ route[t]} g[t, e] · relu(x[t] · up[e]) · down[e]`.
    pub fn moe_mlp(
        &mut self,
        x: Var,
        up: Var,
        down: Var,
        gates: Option<Var>,
        route: Rc<Route>,
    ) -> Result<Var> {
        let (rows, d) = self.value(x).dims2()?;
        let (e_count, d_exp) = match *self.shape(up) {
            [e, i, o] if i == d => (e, o),
            ref s => return Err(Error::Dimension(format!("up bank {:?} does not match width {}", s, d))),
        };
        ensure!(
            self.shape(down) == [e_count, d_exp, d],
            Dimension,
            "down bank {:?} does not match [{}, {}, {}]",
            self.shape(down),
            e_count,
            d_exp,
            d
        );
        ensure!(
            route.rows() == rows && route.n_experts() == e_count,
            Contract,
            "route does not match {} rows / {} experts",
            rows,
            e_count
        );
        if let Some(g) = gates {
            ensure!(self.shape(g) == [rows, e_count], Dimension, "gate shape {:?}", self.shape(g));
        }
        let xv = self.value(x).data();
        let uv = self.value(up).data();
        let dv = self.value(down).data();
        let gv = gates.map(|g| self.value(g).data());
        let mut out = vec![0.0; rows * d];
        let groups = route.by_expert();
        let mut hidden = Vec::with_capacity(e_count);
        let mut outs = Vec::with_capacity(e_count);
        for (e, members) in groups.iter().enumerate() {
            let n_e = members.len();
            let mut h = vec![0.0; n_e * d_exp];
            let mut y = vec![0.0; n_e * d];
            if n_e > 0 {
                let xe = gather(xv, d, members);
                gemm(n_e, d, d_exp, &xe, false, &uv[e * d * d_exp..(e + 1) * d * d_exp], false, &mut h, 0.0);
                h.iter_mut().for_each(|v| *v = v.max(0.0));
                gemm(n_e, d_exp, d, &h, false, &dv[e * d_exp * d..(e + 1) * d_exp * d], false, &mut y, 0.0);
                for (i, &(r, _)) in members.iter().enumerate() {
                    let gate = gv.map_or(1.0, |g| g[r * e_count + e]);
                    kernels::axpy(gate, &y[i * d..(i + 1) * d], &mut out[r * d..(r + 1) * d]);
                }
            }
            hidden.push(h);
            outs.push(y);
        }
        let k = route.k();
        let gating = if gates.is_some() { rows * k * d } else { 0 };
        self.record(rows * k * 2 * d * d_exp + gating, rows * d);
        let inputs: Vec<Var> = [Some(x), Some(up), Some(down), gates].into_iter().flatten().collect();
        Ok(self.push(
            Tensor::from_raw(vec![rows, d], out),
            Op::MoeMlp { x, up, down, gates, route, hidden, outs },
            &inputs,
        ))
    }

    /// Column `expert` of `gates [rows x E]`, zeroed on rows that did not
    /// route to it. Gradient reaches selected entries only.
    pub fn routed_gate(&mut self, gates: Var, route: Rc<Route>, expert: usize) -> Result<Var> {
        let (rows, e_count) = self.value(gates).dims2()?;
        ensure!(expert < e_count, Contract, "expert {} out of range for {}", expert, e_count);
        ensure!(route.rows() == rows, Dimension, "route rows {} vs gates rows {}", route.rows(), rows);
        let gv = self.value(gates).data();
        let out: Vec<f64> = (0..rows)
            .map(|r| if route.contains(r, expert) { gv[r * e_count + expert] } else { 0.0 })
            .collect();
        Ok(self.push(Tensor::from_raw(vec![rows], out), Op::RoutedGate { gates, route, expert }, &[gates]))
    }

    // ---- reverse sweep -------------------------------------------------

    /// Back-propagates from a scalar loss. A graph supports one sweep.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        ensure!(!self.backward_done, Contract, "backward already ran on this graph; re-run the forward pass");
        ensure!(
            self.value(loss).is_scalar(),
            Contract,
            "backward needs a scalar loss, got shape {:?}",
            self.shape(loss)
        );
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            // Slices add into their source in place; a dense contribution
            // would cost a full-size buffer per slice.
            if let Op::SliceRows(a, start) = self.nodes[i].op {
                let off = start * self.value(a).cols();
                let numel = self.value(a).numel();
                let node = &mut self.nodes[a.0];
                if node.requires_grad {
                    let acc = node.grad.get_or_insert_with(|| vec![0.0; numel]);
                    kernels::add_into(&mut acc[off..off + g.len()], &g);
                }
                self.nodes[i].grad = Some(g);
                continue;
            }
            let contribs = self.vjp(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, c) in contribs {
                let node = &mut self.nodes[v.0];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => kernels::add_into(acc, &c),
                    None => node.grad = Some(c),
                }
            }
        }
        Ok(())
    }

    /// Adds parameter-leaf gradients into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for node in &self.nodes {
            if let (Some(id), Some(g)) = (node.param, &node.grad) {
                store.accumulate_grad(id, g);
            }
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of node `i` for upstream gradient `g`.
    fn vjp(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.value(a).rows(), self.value(a).cols());
                let n = self.value(b).cols();
                if self.needs(a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, val(b), true, &mut da, 0.0);
                    out.push((a, da));
                }
                if self.needs(b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, val(a), true, g, false, &mut db, 0.0);
                    out.push((b, db));
                }
            }
            &Op::MatMulNt(a, b) => {
                let (m, k) = (self.value(a).rows(), self.value(a).cols());
                let n = self.value(b).rows();
                if self.needs(a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, val(b), false, &mut da, 0.0);
                    out.push((a, da));
                }
                if self.needs(b) {
                    let mut db = vec![0.0; n * k];
                    gemm(n, m, k, g, true, val(a), false, &mut db, 0.0);
                    out.push((b, db));
                }
            }
            &Op::Add(a, b) => {
                out.push((a, g.to_vec()));
                out.push((b, g.to_vec()));
            }
            &Op::AddRow(a, bias) => {
                out.push((a, g.to_vec()));
                if self.needs(bias) {
                    let n = self.value(bias).numel();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        kernels::add_into(&mut db, row);
                    }
                    out.push((bias, db));
                }
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    out.push((a, g.iter().zip(val(b)).map(|(x, y)| x * y).collect()));
                }
                if self.needs(b) {
                    out.push((b, g.iter().zip(val(a)).map(|(x, y)| x * y).collect()));
                }
            }
            &Op::Scale(a, c) => out.push((a, g.iter().map(|x| x * c).collect())),
            &Op::ScaleRows(a, s) => {
                let n = self.value(a).cols();
                let sv = val(s);
                if self.needs(a) {
                    let mut da = g.to_vec();
                    for (r, row) in da.chunks_mut(n).enumerate() {
                        row.iter_mut().for_each(|v| *v *= sv[r]);
                    }
                    out.push((a, da));
                }
                if self.needs(s) {
                    let ds = g.chunks(n).zip(val(a).chunks(n)).map(|(gr, ar)| kernels::dot(gr, ar)).collect();
                    out.push((s, ds));
                }
            }
            &Op::Relu(a) => {
                let y = node.value.data();
                out.push((a, g.iter().zip(y).map(|(gi, yi)| if *yi > 0.0 { *gi } else { 0.0 }).collect()));
            }
            &Op::Sigmoid(a) => {
                let y = node.value.data();
                out.push((a, g.iter().zip(y).map(|(gi, s)| gi * s * (1.0 - s)).collect()));
            }
            &Op::Softmax(a) => {
                let n = node.value.cols();
                let y = node.value.data();
                let mut da = vec![0.0; y.len()];
                for ((gr, yr), dr) in g.chunks(n).zip(y.chunks(n)).zip(da.chunks_mut(n)) {
                    let s = kernels::dot(gr, yr);
                    for c in 0..n {
                        dr[c] = yr[c] * (gr[c] - s);
                    }
                }
                out.push((a, da));
            }
            Op::MaskedSoftmax(a, ranges) => {
                let n = node.value.cols();
                let y = node.value.data();
                let mut da = vec![0.0; y.len()];
                for (r, &(lo, hi)) in ranges.iter().enumerate() {
                    let gr = &g[r * n + lo..r * n + hi];
                    let yr = &y[r * n + lo..r * n + hi];
                    let s = kernels::dot(gr, yr);
                    for c in 0..hi - lo {
                        da[r * n + lo + c] = yr[c] * (gr[c] - s);
                    }
                }
                out.push((*a, da));
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let n = self.value(*x).cols();
                let gv = val(*gain);
                if self.needs(*x) {
                    let mut dx = vec![0.0; xhat.len()];
                    for r in 0..rstd.len() {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for c in 0..n {
                            let dh = gr[c] * gv[c];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[c];
                        }
                        mean_dh /= n as f64;
                        mean_dh_h /= n as f64;
                        for c in 0..n {
                            let dh = gr[c] * gv[c];
                            dx[r * n + c] = rstd[r] * (dh - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                    out.push((*x, dx));
                }
                if self.needs(*gain) {
                    let mut dg = vec![0.0; n];
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            dg[c] += gr[c] * hr[c];
                        }
                    }
                    out.push((*gain, dg));
                }
                if self.needs(*bias) {
                    let mut db = vec![0.0; n];
                    for gr in g.chunks(n) {
                        kernels::add_into(&mut db, gr);
                    }
                    out.push((*bias, db));
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if self.needs(p) {
                        out.push((p, g[off..off + len].to_vec()));
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = (node.value.rows(), node.value.cols());
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.needs(p) {
                        let mut dp = vec![0.0; m * w];
                        for r in 0..m {
                            dp[r * w..(r + 1) * w].copy_from_slice(&g[r * n + off..r * n + off + w]);
                        }
                        out.push((p, dp));
                    }
                    off += w;
                }
            }
            Op::SliceRows(..) => unreachable!("slices are handled in backward"),
            Op::GatherRows(table, idx) => {
                let n = self.value(*table).cols();
                let mut dt = vec![0.0; self.value(*table).numel()];
                for (r, &i) in idx.iter().enumerate() {
                    kernels::add_into(&mut dt[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                }
                out.push((*table, dt));
            }
            &Op::MeanRows(a) => {
                let m = self.value(a).rows();
                let scaled: Vec<f64> = g.iter().map(|v| v / m as f64).collect();
                out.push((a, scaled.repeat(m)));
            }
            &Op::Sum(a) => out.push((a, vec![g[0]; self.value(a).numel()])),
            Op::CrossEntropy { logits, targets, probs } => {
                let n = self.value(*logits).cols();
                let m = targets.len();
                let scale = g[0] / m as f64;
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * n + t] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= scale);
                out.push((*logits, d));
            }
            &Op::RelScores { q, r, base } => {
                let (t_len, d) = (self.value(q).rows(), self.value(q).cols());
                let s = node.value.cols();
                let qv = val(q);
                let rv = val(r);
                let mut dq = vec![0.0; qv.len()];
                let mut dr = vec![0.0; rv.len()];
                for t in 0..t_len {
                    for j in 0..s {
                        let gij = g[t * s + j];
                        if gij == 0.0 {
                            continue;
                        }
                        let idx = base + t - j;
                        kernels::axpy(gij, &rv[idx * d..(idx + 1) * d], &mut dq[t * d..(t + 1) * d]);
                        kernels::axpy(gij, &qv[t * d..(t + 1) * d], &mut dr[idx * d..(idx + 1) * d]);
                    }
                }
                if self.needs(q) {
                    out.push((q, dq));
                }
                if self.needs(r) {
                    out.push((r, dr));
                }
            }
            &Op::Rope { a, offset } => {
                let (m, n) = (node.value.rows(), node.value.cols());
                out.push((a, rotate(g, m, n, offset, -1.0)));
            }
            Op::Mixture { x, bank, gates, route } => {
                out.extend(self.mixture_vjp(*x, *bank, *gates, route, g));
            }
            Op::MoeMlp { x, up, down, gates, route, hidden, outs } => {
                out.extend(self.moe_mlp_vjp(*x, *up, *down, *gates, route, hidden, outs, g));
            }
            Op::RoutedGate { gates, route, expert } => {
                let e_count = self.value(*gates).cols();
                let mut dg = vec![0.0; self.value(*gates).numel()];
                for r in 0..route.rows() {
                    if route.contains(r, *expert) {
                        dg[r * e_count + expert] = g[r];
                    }
                }
                out.push((*gates, dg));
            }
            Op::Dropout(a, mask) => {
                out.push((*a, g.iter().zip(mask).map(|(x, m)| x * m).collect()));
            }
        }
        out
    }

    fn mixture_vjp(&self, x: Var, bank: Var, gates: Option<Var>, route: &Route, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let (rows, d_in) = (self.value(x).rows(), self.value(x).cols());
        let e_count = route.n_experts();
        let d_out = self.value(bank).shape()[2];
        let xv = self.value(x).data();
        let bv = self.value(bank).data();
        let gv = gates.map(|v| self.value(v).data());
        let mut dx = vec![0.0; rows * d_in];
        let mut dbank = vec![0.0; bv.len()];
        let mut dgates = gates.map(|_| vec![0.0; rows * e_count]);
        for (e, members) in route.by_expert().iter().enumerate() {
            let n_e = members.len();
            if n_e == 0 {
                continue;
            }
            let w = &bv[e * d_in * d_out..(e + 1) * d_in * d_out];
            let xe = gather(xv, d_in, members);
            let ge = gather(g, d_out, members);
            let gate_of = |r: usize| gv.map_or(1.0, |gv| gv[r * e_count + e]);
            // u = g_e · Wᵀ, shared by dx (scaled by gate) and dgate (dotted with x).
            let mut u = vec![0.0; n_e * d_in];
            gemm(n_e, d_out, d_in, &ge, false, w, true, &mut u, 0.0);
            let mut gs = ge;
            for (i, &(r, _)) in members.iter().enumerate() {
                let gate = gate_of(r);
                gs[i * d_out..(i + 1) * d_out].iter_mut().for_each(|v| *v *= gate);
                kernels::axpy(gate, &u[i * d_in..(i + 1) * d_in], &mut dx[r * d_in..(r + 1) * d_in]);
                if let Some(dg) = dgates.as_mut() {
                    dg[r * e_count + e] += kernels::dot(&xe[i * d_in..(i + 1) * d_in], &u[i * d_in..(i + 1) * d_in]);
                }
            }
            gemm(d_in, n_e, d_out, &xe, true, &gs, false, &mut dbank[e * d_in * d_out..(e + 1) * d_in * d_out], 0.0);
        }
        let mut out = Vec::new();
        if self.needs(x) {
            out.push((x, dx));
        }
        if self.needs(bank) {
            out.push((bank, dbank));
        }
        if let (Some(gvar), Some(dg)) = (gates, dgates) {
            if self.needs(gvar) {
                out.push((gvar, dg));
            }
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn moe_mlp_vjp(
        &self,
        x: Var,
        up: Var,
        down: Var,
        gates: Option<Var>,
        route: &Route,
        hidden: &[Vec<f64>],
        outs: &[Vec<f64>],
        g: &[f64],
    ) -> Vec<(Var, Vec<f64>)> {
        let (rows, d) = (self.value(x).rows(), self.value(x).cols());
        let e_count = route.n_experts();
        let d_exp = self.value(up).shape()[2];
        let xv = self.value(x).data();
        let uv = self.value(up).data();
        let dv = self.value(down).data();
        let gv = gates.map(|v| self.value(v).data());
        let mut dx = vec![0.0; rows * d];
        let mut dup = vec![0.0; uv.len()];
        let mut ddown = vec![0.0; dv.len()];
        let mut dgates = gates.map(|_| vec![0.0; rows * e_count]);
        for (e, members) in route.by_expert().iter().enumerate() {
            let n_e = members.len();
            if n_e == 0 {
                continue;
            }
            let ue = &uv[e * d * d_exp..(e + 1) * d * d_exp];
            let de = &dv[e * d_exp * d..(e + 1) * d_exp * d];
            let h = &hidden[e];
            let y = &outs[e];
            let mut gs = gather(g, d, members);
            for (i, &(r, _)) in members.iter().enumerate() {
                let gate = gv.map_or(1.0, |gv| gv[r * e_count + e]);
                if let Some(dg) = dgates.as_mut() {
                    dg[r * e_count + e] += kernels::dot(&gs[i * d..(i + 1) * d], &y[i * d..(i + 1) * d]);
                }
                gs[i * d..(i + 1) * d].iter_mut().for_each(|v| *v *= gate);
            }
            gemm(d_exp, n_e, d, h, true, &gs, false, &mut ddown[e * d_exp * d..(e + 1) * d_exp * d], 0.0);
            let mut dh = vec![0.0; n_e * d_exp];
            gemm(n_e, d, d_exp, &gs, false, de, true, &mut dh, 0.0);
            for (dhv, hv) in dh.iter_mut().zip(h) {
                if *hv <= 0.0 {
                    *dhv = 0.0;
                }
            }
            let xe = gather(xv, d, members);
            gemm(d, n_e, d_exp, &xe, true, &dh, false, &mut dup[e * d * d_exp..(e + 1) * d * d_exp], 0.0);
            let mut dxe = vec![0.0; n_e * d];
            gemm(n_e, d_exp, d, &dh, false, ue, true, &mut dxe, 0.0);
            for (i, &(r, _)) in members.iter().enumerate() {
                kernels::add_into(&mut dx[r * d..(r + 1) * d], &dxe[i * d..(i + 1) * d]);
            }
        }
        let mut out = Vec::new();
        if self.needs(x) {
            out.push((x, dx));
        }
        if self.needs(up) {
            out.push((up, dup));
        }
        if self.needs(down) {
            out.push((down, ddown));
        }
        if let (Some(gvar), Some(dg)) = (gates, dgates) {
            if self.needs(gvar) {
                out.push((gvar, dg));
            }
        }
        out
    }
}

fn gather(src: &[f64], width: usize, members: &[(usize, usize)]) -> Vec<f64> {
    let mut out = Vec::with_capacity(members.len() * width);
    for &(r, _) in members {
        out.extend_from_slice(&src[r * width..(r + 1) * width]);
    }
    out
}

/// Rotates channel pairs `(2i, 2i+1)` of each row by `sign * pos * θ_i`.
fn rotate(x: &[f64], m: usize, n: usize, offset: usize, sign: f64) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for t in 0..m {
        let pos = (offset + t) as f64;
        for i in 0..n / 2 {
            let theta = 10000f64.powf(-2.0 * i as f64 / n as f64);
            let (s, c) = (sign * pos * theta).sin_cos();
            let a = x[t * n + 2 * i];
            let b = x[t * n + 2 * i + 1];
            out[t * n + 2 * i] = a * c - b * s;
            out[t * n + 2 * i + 1] = a * s + b * c;
        }
    }
    out
}
