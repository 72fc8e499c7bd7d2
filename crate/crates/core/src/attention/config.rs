use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::Activation;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Dense,
    HeadGated,
    #[serde(rename = "switchhead")]
    SwitchHead,
    Moa,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Position {
    /// Relative sinusoidal encodings with learned content/position biases.
    #[default]
    XlRelative,
    Rope,
    /// No positional signal at all (plain scaled dot-product attention).
    None,
}

/// Softmax temperature: `1/√d_model` (the default) or `1/√d_head`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    #[default]
    DModel,
    DHead,
}

/// Output projection form of dense attention: a sum of per-head products or
/// one product of the concatenated head readouts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    #[default]
    PerHead,
    Concat,
}

/// Which SwitchHead projections are expert mixtures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertFlags {
    pub v: bool,
    pub k: bool,
    pub q: bool,
    pub o: bool,
}

impl Default for ExpertFlags {
    /// Value and output experts.
    fn default() -> Self {
        Self { v: true, k: false, q: false, o: true }
    }
}

impl ExpertFlags {
    pub const NONE: ExpertFlags = ExpertFlags { v: false, k: false, q: false, o: false };

    /// All 16 combinations, indexed by the bit pattern `vkqo`.
    pub fn all_combinations() -> impl Iterator<Item = ExpertFlags> {
        (0..16u8).map(|b| ExpertFlags { v: b & 8 != 0, k: b & 4 != 0, q: b & 2 != 0, o: b & 1 != 0 })
    }

    pub fn any(&self) -> bool {
        self.v || self.k || self.q || self.o
    }

    pub fn count(&self) -> usize {
        [self.v, self.k, self.q, self.o].iter().filter(|&&f| f).count()
    }

    pub fn source_side(&self) -> bool {
        self.v || self.k
    }

    pub fn destination_side(&self) -> bool {
        self.q || self.o
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "AttentionConfigRepr")]
pub struct AttentionConfig {
    #[serde(default)]
    pub variant: Variant,
    #[serde(default)]
    pub position: Position,
    /// May be left out inside a model spec, which supplies its own.
    #[serde(default)]
    pub d_model: usize,
    /// Number of computed attention matrices.
    pub n_heads: usize,
    pub d_head: usize,
    /// Experts per head (SwitchHead) or head-experts in total (MoA).
    #[serde(rename = "E", default = "one")]
    pub n_experts: usize,
    #[serde(rename = "K", default = "one")]
    pub k_active: usize,
    #[serde(default)]
    pub experts: ExpertFlags,
    /// Source length is `C * T`; `C - 1` past chunks are cached.
    #[serde(rename = "C", default = "one")]
    pub context_mult: usize,
    #[serde(default = "yes")]
    pub causal: bool,
    #[serde(default)]
    pub scale: Scale,
    #[serde(default)]
    pub readout: Readout,
    /// Gate activation of the selection networks.
    #[serde(default)]
    pub selection: Activation,
    /// Pin every gate value to 1 while keeping the top-k routing.
    #[serde(default)]
    pub force_unit_gates: bool,
}

/// Serialized form: the expert flags default by variant.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AttentionConfigRepr {
    #[serde(default)]
    variant: Variant,
    #[serde(default)]
    position: Position,
    /// May be left out inside a model spec, which supplies its own.
    #[serde(default)]
    d_model: usize,
    /// Number of computed attention matrices.
    n_heads: usize,
    d_head: usize,
    /// Experts per head (SwitchHead) or head-experts in total (MoA).
    #[serde(rename = "E", default = "one")]
    n_experts: usize,
    #[serde(rename = "K", default = "one")]
    k_active: usize,
    /// Value and output experts for SwitchHead, none otherwise.
    experts: Option<ExpertFlags>,
    /// Source length is `C * T`; `C - 1` past chunks are cached.
    #[serde(rename = "C", default = "one")]
    context_mult: usize,
    #[serde(default = "yes")]
    causal: bool,
    #[serde(default)]
    scale: Scale,
    #[serde(default)]
    readout: Readout,
    /// Gate activation of the selection networks.
    #[serde(default)]
    selection: Activation,
    /// Pin every gate value to 1 while keeping the top-k routing.
    #[serde(default)]
    force_unit_gates: bool,
}

impl From<AttentionConfigRepr> for AttentionConfig {
    fn from(r: AttentionConfigRepr) -> Self {
        let experts = r.experts.unwrap_or(if r.variant == Variant::SwitchHead { ExpertFlags::default() } else { ExpertFlags::NONE });
        Self {
            variant: r.variant,
            position: r.position,
            d_model: r.d_model,
            n_heads: r.n_heads,
            d_head: r.d_head,
            n_experts: r.n_experts,
            k_active: r.k_active,
            experts,
            context_mult: r.context_mult,
            causal: r.causal,
            scale: r.scale,
            readout: r.readout,
            selection: r.selection,
            force_unit_gates: r.force_unit_gates,
        }
    }
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

impl AttentionConfig {
    pub fn dense(d_model: usize, n_heads: usize, d_head: usize) -> Self {
        Self {
            variant: Variant::Dense,
            position: Position::XlRelative,
            d_model,
            n_heads,
            d_head,
            n_experts: 1,
            k_active: 1,
            experts: ExpertFlags::NONE,
            context_mult: 1,
            causal: true,
            scale: Scale::DModel,
            readout: Readout::PerHead,
            selection: Activation::Sigmoid,
            force_unit_gates: false,
        }
    }

    pub fn switchhead(d_model: usize, n_heads: usize, d_head: usize, n_experts: usize, k_active: usize) -> Self {
        Self {
            variant: Variant::SwitchHead,
            n_experts,
            k_active,
            experts: ExpertFlags::default(),
            ..Self::dense(d_model, n_heads, d_head)
        }
    }

    /// `k_active` of `n_experts` head-experts, each computing its own attention.
    pub fn moa(d_model: usize, d_head: usize, n_experts: usize, k_active: usize) -> Self {
        Self { variant: Variant::Moa, n_experts, k_active, ..Self::dense(d_model, k_active, d_head) }
    }

    /// Dense heads with `k_active` of them gated on per output position.
    pub fn head_gated(d_model: usize, n_heads: usize, d_head: usize, k_active: usize) -> Self {
        Self { variant: Variant::HeadGated, k_active, ..Self::dense(d_model, n_heads, d_head) }
    }

    pub fn with_position(mut self, position: Position) -> Self {
        self.position = position;
        self
    }

    pub fn with_context(mut self, c: usize) -> Self {
        self.context_mult = c;
        self
    }

    pub fn with_experts(mut self, flags: ExpertFlags) -> Self {
        self.experts = flags;
        self
    }

    pub fn scale_factor(&self) -> f64 {
        match self.scale {
            Scale::DModel => 1.0 / (self.d_model as f64).sqrt(),
            Scale::DHead => 1.0 / (self.d_head as f64).sqrt(),
        }
    }

    /// Number of K/V streams kept per sequence (shared K/V for MoA).
    pub fn kv_streams(&self) -> usize {
        match self.variant {
            Variant::Moa => 1,
            _ => self.n_heads,
        }
    }

    /// Collects every violated constraint into one configuration error.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                errs.push(msg);
            }
        };
        check(self.d_model >= 1, "d_model must be positive".into());
        check(self.n_heads >= 1, "n_heads must be positive".into());
        check(self.d_head >= 1, "d_head must be positive".into());
        check(self.context_mult >= 1, "C must be positive".into());
        check(self.n_experts >= 1, "E must be positive".into());
        check(
            self.k_active >= 1,
            format!("K = {} must be positive", self.k_active),
        );
        match self.variant {
            Variant::Dense => {
                check(
                    self.n_experts == 1 && self.k_active == 1 && !self.experts.any(),
                    "dense attention needs E = 1, K = 1 and no expert projections".into(),
                );
            }
            Variant::HeadGated => {
                check(self.n_experts == 1 && !self.experts.any(), "head gating selects heads, not experts: E must be 1".into());
                check(
                    self.k_active <= self.n_heads,
                    format!("K = {} exceeds n_heads = {}", self.k_active, self.n_heads),
                );
            }
            Variant::SwitchHead => {
                check(
                    self.k_active <= self.n_experts,
                    format!("K = {} exceeds E = {}", self.k_active, self.n_experts),
                );
                check(
                    self.n_experts == 1 || self.experts.any(),
                    "E > 1 with no expert projections is degenerate; use dense attention".into(),
                );
            }
            Variant::Moa => {
                check(
                    self.k_active <= self.n_experts,
                    format!("K = {} exceeds E = {}", self.k_active, self.n_experts),
                );
                check(
                    self.n_heads == self.k_active,
                    format!("MoA computes one attention matrix per active expert: n_heads ({}) must equal K ({})", self.n_heads, self.k_active),
                );
            }
        }
        if self.variant != Variant::Dense {
            check(self.readout == Readout::PerHead, "the concatenated readout form exists for dense attention only".into());
        }
        if self.position == Position::Rope {
            check(self.context_mult == 1, "RoPE attention runs without a cache: C must be 1".into());
            check(self.d_head.is_multiple_of(2), format!("RoPE needs an even d_head, got {}", self.d_head));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Closed-form parameter count of one attention layer (no biases on
    /// projections; learned `u`, `v` vectors for XL position scoring).
    pub fn param_count(&self) -> usize {
        let (d, dh, e) = (self.d_model, self.d_head, self.n_experts);
        let xl = self.position == Position::XlRelative;
        let pos = if xl { d * dh } else { 0 };
        let biases = if xl { 2 * dh } else { 0 };
        match self.variant {
            Variant::Dense => self.n_heads * (4 * d * dh + pos + biases),
            Variant::HeadGated => self.n_heads * (4 * d * dh + pos + biases) + d * self.n_heads,
            Variant::SwitchHead => {
                let f = self.experts;
                let role = |flag: bool| if flag { e * d * dh } else { d * dh };
                let per_head = role(f.v)
                    + role(f.k)
                    + role(f.q)
                    + role(f.o)
                    + if f.source_side() { d * e } else { 0 }
                    + if f.destination_side() { d * e } else { 0 }
                    + biases;
                self.n_heads * per_head + pos
            }
            Variant::Moa => 2 * d * dh + 2 * e * d * dh + d * e + pos + biases,
        }
    }
}
