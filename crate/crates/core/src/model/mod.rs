//! Whole transformers: token embedding, pre-norm `[attention, MLP]` blocks
//! with residual connections, and a language-model or sequence-classification
//! readout. Also the closed-form parameter count and the parameter-matching
//! search built on it.

mod count;
mod matching;
pub mod presets;
pub mod suite;

pub use count::{count_params, linear_params};
pub use matching::{match_params, MatchResult, MatchStep, MAX_SLACK};

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, AttentionLayer, AttentionTrace, ForwardOpts, LayerCache, Variant, Window};
use crate::error::{ensure, Error, Result};
use crate::moe::{sigma_moe_mlp, Activation, GateMode, SelectionConfig};
use crate::numerics::rng::{rng_for, uniform, SeededRng};
use crate::numerics::{Acct, Graph, ParamId, ParamStore, Tensor, Term, Var};

const LN_EPS: f64 = 1e-5;

/// Feed-forward block of every layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MlpSpec {
    /// `relu(x W1 + b1) W2 + b2`.
    Dense { d_ff: usize },
    /// Non-competitive sigmoid top-k over `E` experts of width `d_exp`, no biases.
    SigmaMoe {
        #[serde(rename = "E")]
        n_experts: usize,
        #[serde(rename = "K")]
        k_active: usize,
        d_exp: usize,
        #[serde(default)]
        force_unit_gates: bool,
    },
}

impl MlpSpec {
    /// Total hidden width (`E * d_exp` for the expert MLP).
    pub fn d_ff(&self) -> usize {
        match *self {
            MlpSpec::Dense { d_ff } => d_ff,
            MlpSpec::SigmaMoe { n_experts, d_exp, .. } => n_experts * d_exp,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub n_layers: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    /// Chunk length processed per step.
    #[serde(rename = "T")]
    pub chunk_len: usize,
    #[serde(default)]
    pub tied_embeddings: bool,
    #[serde(default)]
    pub dropout: f64,
    /// Classes of a mean-pooled classification readout; absent for a language model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_classes: Option<usize>,
    pub attention: AttentionConfig,
    pub mlp: MlpSpec,
}

impl ModelSpec {
    /// Parses a TOML spec. The attention table may omit `d_model`.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut spec: ModelSpec = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        if spec.attention.d_model == 0 {
            spec.attention.d_model = spec.d_model;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model spec serializes")
    }

    pub fn is_classifier(&self) -> bool {
        self.n_classes.is_some()
    }

    /// Width of the readout: vocabulary or class count.
    pub fn n_outputs(&self) -> usize {
        self.n_classes.unwrap_or(self.vocab_size)
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                errs.push(msg);
            }
        };
        check(self.d_model >= 1, "d_model must be positive".into());
        check(self.vocab_size >= 1, "vocab_size must be positive".into());
        check(self.chunk_len >= 1, "T must be positive".into());
        check((0.0..1.0).contains(&self.dropout), format!("dropout {} outside [0, 1)", self.dropout));
        check(
            self.attention.d_model == self.d_model,
            format!("attention d_model {} differs from model d_model {}", self.attention.d_model, self.d_model),
        );
        if let Some(c) = self.n_classes {
            check(c >= 1, "n_classes must be positive".into());
            check(!self.tied_embeddings, "a classifier readout cannot be tied to the embedding".into());
        }
        match self.mlp {
            MlpSpec::Dense { d_ff } => check(d_ff >= 1, "d_ff must be positive".into()),
            MlpSpec::SigmaMoe { n_experts, k_active, d_exp, .. } => {
                check(d_exp >= 1, "d_exp must be positive".into());
                check(
                    k_active >= 1 && k_active <= n_experts,
                    format!("MLP K = {k_active} must lie in 1..=E = {n_experts}"),
                );
            }
        }
        if let Err(Error::Config(more)) = self.attention.validate() {
            errs.extend(more.into_iter().map(|m| format!("attention: {m}")));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

#[derive(Clone, Debug)]
enum MlpParams {
    Dense { w1: ParamId, b1: ParamId, w2: ParamId, b2: ParamId },
    SigmaMoe { sel: ParamId, up: ParamId, down: ParamId, cfg: SelectionConfig, mode: GateMode },
}

#[derive(Clone, Debug)]
struct Block {
    ln1: (ParamId, ParamId),
    attn: AttentionLayer,
    ln2: (ParamId, ParamId),
    mlp: MlpParams,
}

/// Per-layer, per-sequence attention caches for chunked streaming.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelCache {
    pub layers: Vec<Vec<LayerCache>>,
}

impl ModelCache {
    pub fn new(n_layers: usize, n_sequences: usize) -> Self {
        Self { layers: vec![vec![LayerCache::default(); n_sequences]; n_layers] }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOpts {
    pub trace: bool,
    pub window: Option<Window>,
    /// Draw dropout masks for the MLP outputs from this seed; `None` runs without dropout.
    pub dropout_seed: Option<u64>,
}

pub struct ModelOutput {
    /// `[rows x vocab]` for a language model, `[sequences x classes]` for a classifier.
    pub logits: Var,
    /// One trace per layer (empty unless requested).
    pub traces: Vec<AttentionTrace>,
}

#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    store: ParamStore,
    embed: ParamId,
    blocks: Vec<Block>,
    final_ln: (ParamId, ParamId),
    out_w: Option<ParamId>,
    out_b: ParamId,
}

fn linear(store: &mut ParamStore, name: String, d_in: usize, d_out: usize, rng: &mut SeededRng) -> ParamId {
    store.add(name, uniform(rng, &[d_in, d_out], 1.0 / (d_in as f64).sqrt()))
}

fn layer_norm(store: &mut ParamStore, name: &str, d: usize) -> (ParamId, ParamId) {
    (store.add(format!("{name}.gain"), Tensor::full(&[d], 1.0)), store.add(format!("{name}.bias"), Tensor::zeros(&[d])))
}

/// Deterministic weights from `seed`. Projections are uniform in
/// `±1/√fan_in`, embeddings in `±1/√d_model`; biases start at zero and
/// layer-norm gains at one.
pub fn build(spec: &ModelSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let d = spec.d_model;
    let mut store = ParamStore::new();
    let mut rng = rng_for(seed, "embed");
    let embed = store.add("embed", uniform(&mut rng, &[spec.vocab_size, d], 1.0 / (d as f64).sqrt()));
    let mut blocks = Vec::with_capacity(spec.n_layers);
    for i in 0..spec.n_layers {
        let p = format!("layers.{i}");
        let ln1 = layer_norm(&mut store, &format!("{p}.ln1"), d);
        let attn = AttentionLayer::init(spec.attention, &mut store, &format!("{p}.attn"), &mut rng_for(seed, &format!("{p}.attn")))?;
        let ln2 = layer_norm(&mut store, &format!("{p}.ln2"), d);
        let rng = &mut rng_for(seed, &format!("{p}.mlp"));
        let mlp = match spec.mlp {
            MlpSpec::Dense { d_ff } => MlpParams::Dense {
                w1: linear(&mut store, format!("{p}.mlp.w1"), d, d_ff, rng),
                b1: store.add(format!("{p}.mlp.b1"), Tensor::zeros(&[d_ff])),
                w2: linear(&mut store, format!("{p}.mlp.w2"), d_ff, d, rng),
                b2: store.add(format!("{p}.mlp.b2"), Tensor::zeros(&[d])),
            },
            MlpSpec::SigmaMoe { n_experts, k_active, d_exp, force_unit_gates } => MlpParams::SigmaMoe {
                sel: linear(&mut store, format!("{p}.mlp.sel"), d, n_experts, rng),
                up: store.add(format!("{p}.mlp.up"), uniform(rng, &[n_experts, d, d_exp], 1.0 / (d as f64).sqrt())),
                down: store.add(format!("{p}.mlp.down"), uniform(rng, &[n_experts, d_exp, d], 1.0 / (d_exp as f64).sqrt())),
                cfg: SelectionConfig { n_experts, k_active, activation: Activation::Sigmoid, d_model: d },
                mode: if force_unit_gates { GateMode::ForcedUnit } else { GateMode::Learned },
            },
        };
        blocks.push(Block { ln1, attn, ln2, mlp });
    }
    let final_ln = layer_norm(&mut store, "final_ln", d);
    let n_out = spec.n_outputs();
    let out_w = (!spec.tied_embeddings).then(|| linear(&mut store, "out.w".into(), d, n_out, &mut rng_for(seed, "out")));
    let out_b = store.add("out.b", Tensor::zeros(&[n_out]));
    Ok(Model { spec: spec.clone(), store, embed, blocks, final_ln, out_w, out_b })
}

/// [`build`] restricted to fully expert-based models: SwitchHead attention
/// and an expert MLP.
pub fn switchall_build(spec: &ModelSpec, seed: u64) -> Result<Model> {
    let mut errs = Vec::new();
    if spec.attention.variant != Variant::SwitchHead {
        errs.push(format!("fully expert-based models need switchhead attention, got {:?}", spec.attention.variant));
    }
    if !matches!(spec.mlp, MlpSpec::SigmaMoe { .. }) {
        errs.push("fully expert-based models need a sigma_moe MLP".into());
    }
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    build(spec, seed)
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn attention_layers(&self) -> impl Iterator<Item = &AttentionLayer> {
        self.blocks.iter().map(|b| &b.attn)
    }

    pub fn new_cache(&self, n_sequences: usize) -> ModelCache {
        ModelCache::new(self.blocks.len(), n_sequences)
    }

    /// Runs a batch of token sequences concatenated along rows, `segments`
    /// holding their lengths.
    pub fn forward(
        &self,
        g: &mut Graph,
        tokens: &[usize],
        segments: &[usize],
        cache: Option<&mut ModelCache>,
        opts: RunOpts,
    ) -> Result<ModelOutput> {
        self.forward_with(g, &self.store, tokens, segments, cache, opts)
    }

    /// [`Model::forward`] reading parameters from `store`, which must hold
    /// the same names and shapes as the model's own.
    pub fn forward_with(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: &[usize],
        segments: &[usize],
        mut cache: Option<&mut ModelCache>,
        opts: RunOpts,
    ) -> Result<ModelOutput> {
        ensure!(
            segments.iter().sum::<usize>() == tokens.len(),
            Contract,
            "segment lengths sum to {} for {} tokens",
            segments.iter().sum::<usize>(),
            tokens.len()
        );
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.spec.vocab_size) {
            return Err(Error::Contract(format!("token {bad} outside vocabulary of {}", self.spec.vocab_size)));
        }
        if let Some(c) = cache.as_deref() {
            ensure!(c.layers.len() == self.blocks.len(), Contract, "cache has {} layers, model {}", c.layers.len(), self.blocks.len());
        }
        let mut drop_rng = (self.spec.dropout > 0.0).then_some(()).and(opts.dropout_seed).map(|s| rng_for(s, "dropout"));
        let mut dropout = |g: &mut Graph, v: Var| -> Result<Var> {
            match drop_rng.as_mut() {
                Some(rng) => {
                    let keep: Vec<bool> = (0..g.value(v).numel()).map(|_| rng.gen::<f64>() >= self.spec.dropout).collect();
                    g.dropout(v, &keep, self.spec.dropout)
                }
                None => Ok(v),
            }
        };

        let prev = g.set_acct(Acct::transient(Term::Other));
        let table = g.param(store, self.embed);
        let emb = g.gather_rows(table, Rc::new(tokens.to_vec()))?;
        let mut h = emb;
        let fwd = ForwardOpts { trace: opts.trace, window: opts.window };
        let mut traces = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let a_in = self.norm(g, store, h, b.ln1)?;
            let layer_cache = cache.as_deref_mut().map(|c| c.layers[i].as_mut_slice());
            let (a, trace) = b.attn.forward(g, store, a_in, segments, layer_cache, fwd)?;
            g.set_acct(Acct::transient(Term::Other));
            h = g.add(h, a)?;
            if opts.trace {
                traces.push(trace);
            }
            let m_in = self.norm(g, store, h, b.ln2)?;
            let m = self.mlp(g, store, m_in, &b.mlp)?;
            g.set_acct(Acct::transient(Term::Other));
            let m = dropout(g, m)?;
            h = g.add(h, m)?;
        }
        h = self.norm(g, store, h, self.final_ln)?;
        if self.spec.is_classifier() {
            let mut pooled = Vec::with_capacity(segments.len());
            let mut start = 0;
            for &len in segments {
                let rows = g.slice_rows(h, start, len)?;
                pooled.push(g.mean_rows(rows)?);
                start += len;
            }
            h = g.concat_rows(&pooled)?;
        }
        let logits = match self.out_w {
            Some(w) => {
                let w = g.param(store, w);
                g.matmul(h, w)?
            }
            None => g.matmul_nt(h, table)?,
        };
        let bias = g.param(store, self.out_b);
        let logits = g.add_row(logits, bias)?;
        g.set_acct(prev);
        Ok(ModelOutput { logits, traces })
    }

    fn norm(&self, g: &mut Graph, store: &ParamStore, x: Var, (gain, bias): (ParamId, ParamId)) -> Result<Var> {
        let gain = g.param(store, gain);
        let bias = g.param(store, bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }

    fn mlp(&self, g: &mut Graph, store: &ParamStore, x: Var, p: &MlpParams) -> Result<Var> {
        match *p {
            MlpParams::Dense { w1, b1, w2, b2 } => {
                let prev = g.set_acct(Acct::stored(Term::Mlp));
                let (w1, b1, w2, b2) =
                    (g.param(store, w1), g.param(store, b1), g.param(store, w2), g.param(store, b2));
                let hidden = g.matmul(x, w1)?;
                let hidden = g.add_row(hidden, b1)?;
                let hidden = g.relu(hidden);
                let y = g.matmul(hidden, w2)?;
                let y = g.add_row(y, b2);
                g.set_acct(prev);
                y
            }
            MlpParams::SigmaMoe { sel, up, down, cfg, mode } => {
                let (sel, up, down) = (g.param(store, sel), g.param(store, up), g.param(store, down));
                Ok(sigma_moe_mlp(g, x, sel, up, down, &cfg, mode)?.0)
            }
        }
    }
}
