//! Training and evaluation loops.
//!
//! Classification batches are drawn from per-epoch shuffles of the training
//! set. Language-model batches split the training stream into one lane per
//! batch row; each step consumes the next chunk of every lane while the
//! attention caches carry the previous chunks.

use std::f64::consts::LN_2;
use std::io::Write;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::corpus::CharCorpus;
use super::listops::{ListOpsExample, N_CLASSES};
use crate::error::{ensure, Error, Result};
use crate::model::{Model, RunOpts};
use crate::numerics::rng::rng_for;
use crate::numerics::{adam_step, AdamConfig, Graph, OptimizerState, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    /// Maximum global gradient norm.
    pub clip_norm: f64,
    /// Emit a metrics row every this many steps (and after the last one).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 8000, batch_size: 64, lr: 0.00025, warmup_steps: 0, clip_norm: 0.25, log_every: 100 }
    }
}

pub enum Task {
    ListOps { train: Vec<ListOpsExample>, valid: Vec<ListOpsExample> },
    Chars(CharCorpus),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
}

impl Task {
    fn check_model(&self, model: &Model) -> Result<()> {
        let spec = model.spec();
        match self {
            Task::ListOps { .. } => {
                ensure!(
                    spec.n_classes == Some(N_CLASSES),
                    Contract,
                    "ListOps needs a {}-class readout, model has {:?}",
                    N_CLASSES,
                    spec.n_classes
                );
                ensure!(!spec.attention.causal, Contract, "ListOps is classified without autoregressive masking: set causal = false");
                ensure!(
                    spec.vocab_size >= super::listops::VOCAB_SIZE,
                    Contract,
                    "model vocabulary {} is smaller than the ListOps vocabulary {}",
                    spec.vocab_size,
                    super::listops::VOCAB_SIZE
                );
            }
            Task::Chars(c) => {
                ensure!(!spec.is_classifier(), Contract, "language modelling needs a token readout, not a classifier");
                ensure!(
                    spec.vocab_size >= c.vocab_size(),
                    Contract,
                    "model vocabulary {} is smaller than the corpus vocabulary {}",
                    spec.vocab_size,
                    c.vocab_size()
                );
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub step: usize,
    /// Mean training loss since the previous row.
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub bpc: Option<f64>,
    pub grad_norm: f64,
    pub lr: f64,
}

impl MetricRow {
    fn values(&self) -> Vec<(&'static str, f64)> {
        let mut v = vec![("loss", self.loss)];
        v.extend(self.accuracy.map(|a| ("accuracy", a)));
        v.extend(self.bpc.map(|b| ("bpc", b)));
        v.push(("grad_norm", self.grad_norm));
        v.push(("lr", self.lr));
        v
    }
}

/// Writes `step<TAB>metric<TAB>value` lines.
pub fn write_metrics(rows: &[MetricRow], w: &mut impl Write) -> std::io::Result<()> {
    for r in rows {
        for (name, value) in r.values() {
            writeln!(w, "{}\t{}\t{}", r.step, name, value)?;
        }
    }
    Ok(())
}

/// Running negative log-likelihood and argmax accuracy.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Tally {
    pub nll: f64,
    pub correct: usize,
    pub count: usize,
}

impl Tally {
    pub fn add(&mut self, logits: &Tensor, targets: &[usize]) {
        let n = logits.cols();
        for (r, &t) in targets.iter().enumerate() {
            let row = logits.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            self.nll += lse - row[t];
            let best = (0..n).fold(0, |b, i| if row[i] > row[b] { i } else { b });
            self.correct += usize::from(best == t);
            self.count += 1;
        }
    }

    pub fn mean_nll(&self) -> f64 {
        self.nll / self.count as f64
    }

    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.count as f64
    }

    pub fn perplexity(&self) -> f64 {
        self.mean_nll().exp()
    }

    /// Bits per symbol.
    pub fn bpc(&self) -> f64 {
        self.mean_nll() / LN_2
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub loss: f64,
    pub count: usize,
    pub accuracy: Option<f64>,
    pub perplexity: Option<f64>,
    pub bpc: Option<f64>,
}

pub fn train(model: &mut Model, task: &Task, cfg: &TrainConfig, seed: u64) -> Result<Vec<MetricRow>> {
    train_with(model, task, cfg, seed, |_| {})
}

/// [`train`] calling `on_row` as each metrics row is produced.
pub fn train_with(
    model: &mut Model,
    task: &Task,
    cfg: &TrainConfig,
    seed: u64,
    mut on_row: impl FnMut(&MetricRow),
) -> Result<Vec<MetricRow>> {
    task.check_model(model)?;
    ensure!(cfg.batch_size >= 1 && cfg.log_every >= 1, Contract, "batch size and log interval must be positive");
    let mut opt = OptimizerState::new(AdamConfig::new(cfg.lr, cfg.warmup_steps, cfg.clip_norm), model.params())?;
    let mut batches = Batches::new(model, task, cfg.batch_size, seed)?;
    let mut dropout_seeds = rng_for(seed, "dropout-seeds");
    let mut rows = Vec::new();
    let mut window = Tally::default();
    let mut window_steps = 0;
    let mut window_loss = 0.0;
    let mut last_norm = f64::NAN;
    for step in 1..=cfg.steps {
        let batch = batches.next(model)?;
        let mut g = Graph::new();
        let opts = RunOpts { dropout_seed: Some(dropout_seeds.gen()), ..Default::default() };
        let out = model.forward(&mut g, &batch.tokens, &batch.segments, batches.cache.as_mut(), opts)?;
        let loss = g.cross_entropy(out.logits, Rc::new(batch.targets.clone()))?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            let norm: f64 = model.params().ids().map(|id| model.params().get(id).data().iter().map(|v| v * v).sum::<f64>()).sum();
            return Err(Error::Diverged {
                step,
                loss: value,
                snapshot: format!(
                    "lr {:.3e}, previous gradient norm {:.3e}, parameter norm {:.3e}",
                    opt.config.lr_at(step),
                    last_norm,
                    norm.sqrt()
                ),
            });
        }
        window.add(g.value(out.logits), &batch.targets);
        g.backward(loss)?;
        g.accumulate_param_grads(model.params_mut());
        let info = adam_step(model.params_mut(), &mut opt)?;
        last_norm = info.grad_norm;
        window_loss += value;
        window_steps += 1;
        if step % cfg.log_every == 0 || step == cfg.steps {
            let loss = window_loss / window_steps as f64;
            let row = MetricRow {
                step,
                loss,
                accuracy: matches!(task, Task::ListOps { .. }).then(|| window.accuracy()),
                bpc: matches!(task, Task::Chars(_)).then(|| loss / LN_2),
                grad_norm: info.grad_norm,
                lr: info.lr,
            };
            on_row(&row);
            rows.push(row);
            window = Tally::default();
            window_loss = 0.0;
            window_steps = 0;
        }
    }
    Ok(rows)
}

struct Batch {
    tokens: Vec<usize>,
    segments: Vec<usize>,
    targets: Vec<usize>,
}

/// Source of training batches and, for language modelling, the stream caches.
struct Batches<'a> {
    task: &'a Task,
    batch_size: usize,
    rng: crate::numerics::rng::SeededRng,
    order: Vec<usize>,
    pos: usize,
    lane_len: usize,
    chunks_per_lane: usize,
    chunk: usize,
    t: usize,
    cache: Option<crate::model::ModelCache>,
}

impl<'a> Batches<'a> {
    fn new(model: &Model, task: &'a Task, batch_size: usize, seed: u64) -> Result<Self> {
        let t = model.spec().chunk_len;
        let mut b = Self {
            task,
            batch_size,
            rng: rng_for(seed, "batches"),
            order: Vec::new(),
            pos: 0,
            lane_len: 0,
            chunks_per_lane: 0,
            chunk: 0,
            t,
            cache: None,
        };
        match task {
            Task::ListOps { train, .. } => {
                ensure!(!train.is_empty(), Contract, "empty training set");
                b.order = (0..train.len()).collect();
                b.pos = train.len();
            }
            Task::Chars(c) => {
                b.lane_len = c.train_ids().len() / batch_size;
                ensure!(
                    b.lane_len > t,
                    Contract,
                    "{} training bytes cannot feed {} lanes of chunk length {}",
                    c.train_ids().len(),
                    batch_size,
                    t
                );
                b.chunks_per_lane = (b.lane_len - 1) / t;
                b.cache = Some(model.new_cache(batch_size));
            }
        }
        Ok(b)
    }

    fn next(&mut self, model: &Model) -> Result<Batch> {
        match self.task {
            Task::ListOps { train, .. } => {
                let mut batch = Batch { tokens: Vec::new(), segments: Vec::new(), targets: Vec::new() };
                for _ in 0..self.batch_size {
                    if self.pos == self.order.len() {
                        self.order.shuffle(&mut self.rng);
                        self.pos = 0;
                    }
                    let ex = &train[self.order[self.pos]];
                    self.pos += 1;
                    batch.tokens.extend_from_slice(&ex.tokens);
                    batch.segments.push(ex.tokens.len());
                    batch.targets.push(ex.label);
                }
                Ok(batch)
            }
            Task::Chars(c) => {
                if self.chunk == 0 {
                    self.cache = Some(model.new_cache(self.batch_size));
                }
                let ids = c.train_ids();
                let mut batch = Batch { tokens: Vec::new(), segments: Vec::new(), targets: Vec::new() };
                for lane in 0..self.batch_size {
                    let start = lane * self.lane_len + self.chunk * self.t;
                    batch.tokens.extend_from_slice(&ids[start..start + self.t]);
                    batch.targets.extend_from_slice(&ids[start + 1..start + 1 + self.t]);
                    batch.segments.push(self.t);
                }
                self.chunk = (self.chunk + 1) % self.chunks_per_lane;
                Ok(batch)
            }
        }
    }
}

const EVAL_BATCH: usize = 64;

/// Accuracy for classification; loss, perplexity and bits per byte for
/// language modelling (one stream, chunked with the attention cache).
pub fn evaluate(model: &Model, task: &Task, split: Split) -> Result<Evaluation> {
    task.check_model(model)?;
    let mut tally = Tally::default();
    match task {
        Task::ListOps { train, valid } => {
            let data = if split == Split::Train { train } else { valid };
            ensure!(!data.is_empty(), Contract, "cannot evaluate on an empty split");
            for batch in data.chunks(EVAL_BATCH) {
                let tokens: Vec<usize> = batch.iter().flat_map(|e| e.tokens.iter().copied()).collect();
                let segments: Vec<usize> = batch.iter().map(|e| e.tokens.len()).collect();
                let targets: Vec<usize> = batch.iter().map(|e| e.label).collect();
                let mut g = Graph::new();
                let out = model.forward(&mut g, &tokens, &segments, None, RunOpts::default())?;
                tally.add(g.value(out.logits), &targets);
            }
            Ok(Evaluation { loss: tally.mean_nll(), count: tally.count, accuracy: Some(tally.accuracy()), perplexity: None, bpc: None })
        }
        Task::Chars(c) => {
            let ids = if split == Split::Train { c.train_ids() } else { c.valid_ids() };
            ensure!(ids.len() >= 2, Contract, "cannot evaluate on an empty split");
            let t = model.spec().chunk_len;
            let mut cache = model.new_cache(1);
            let mut start = 0;
            while start + 1 < ids.len() {
                let end = (start + t).min(ids.len() - 1);
                let mut g = Graph::new();
                let out = model.forward(&mut g, &ids[start..end], &[end - start], Some(&mut cache), RunOpts::default())?;
                tally.add(g.value(out.logits), &ids[start + 1..end + 1]);
                start = end;
            }
            Ok(Evaluation {
                loss: tally.mean_nll(),
                count: tally.count,
                accuracy: None,
                perplexity: Some(tally.perplexity()),
                bpc: Some(tally.bpc()),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_one_hot_logits_have_unit_perplexity() {
        let mut t = Tally::default();
        let logits = Tensor::from_rows(&[vec![1000.0, 0.0, 0.0], vec![0.0, 0.0, 1000.0]]).unwrap();
        t.add(&logits, &[0, 2]);
        assert_eq!(t.perplexity(), 1.0);
        assert_eq!(t.accuracy(), 1.0);
    }

    #[test]
    fn uniform_byte_model_is_eight_bits() {
        let mut t = Tally::default();
        let text = b"any text at all";
        t.add(&Tensor::zeros(&[text.len(), 256]), &text.iter().map(|&b| b as usize).collect::<Vec<_>>());
        assert!((t.bpc() - 8.0).abs() < 1e-12);
    }

    #[test]
    fn metric_lines() {
        let rows = [MetricRow { step: 5, loss: 1.5, accuracy: Some(0.25), bpc: None, grad_norm: 2.0, lr: 0.1 }];
        let mut out = Vec::new();
        write_metrics(&rows, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "5\tloss\t1.5\n5\taccuracy\t0.25\n5\tgrad_norm\t2\n5\tlr\t0.1\n");
    }
}
