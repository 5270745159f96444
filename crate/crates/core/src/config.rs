//! Architecture and gating hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which structure produces a layer's eviction flags.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateVariant {
    /// Reduced-head causal attention over the layer input, projected to one
    /// score per attention head.
    #[default]
    MhaGate,
    /// Per-token linear map from the hidden state to one score per head.
    LinearGate,
    /// The gate of layer `l` reads the hidden state entering layer `l - 1`.
    PrevLayerGate,
    /// No gates at all: a vanilla causal transformer.
    Disabled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub d_ff: usize,
    /// Heads of the gate's attention scorer.
    pub gate_heads: usize,
    /// Key (and value) width per gate head.
    pub gate_d_k: usize,
    /// Retention threshold on the sigmoid output; equality evicts.
    pub tau: f64,
    /// Offset added to gate scores inside the sigmoid.
    pub gamma: f64,
    pub gate_variant: GateVariant,
    /// Layers below this index are never gated.
    pub gate_start_layer: usize,
    /// Most recent tokens every query keeps regardless of flags.
    pub recent_window: usize,
    pub max_seq: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_k: 16,
            d_v: 16,
            d_ff: 128,
            gate_heads: 2,
            gate_d_k: 16,
            tau: 0.5,
            gamma: 2.0,
            gate_variant: GateVariant::MhaGate,
            gate_start_layer: 0,
            recent_window: 0,
            max_seq: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("d_ff", self.d_ff),
            ("gate_heads", self.gate_heads),
            ("gate_d_k", self.gate_d_k),
            ("max_seq", self.max_seq),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.gate_heads >= self.n_heads {
            return Err(Error::config(
                "gate_heads",
                format!("must be fewer than n_heads ({})", self.n_heads),
            ));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::config("tau", "must lie in (0, 1)"));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::config("gamma", "must be finite and >= 0"));
        }
        if self.gate_variant == GateVariant::PrevLayerGate && self.gate_start_layer == 0 {
            return Err(Error::config(
                "gate_start_layer",
                "prev_layer_gate needs a start layer >= 1",
            ));
        }
        if self.gate_start_layer > self.n_layers {
            return Err(Error::config("gate_start_layer", "exceeds n_layers"));
        }
        Ok(())
    }

    pub fn is_gated(&self, layer: usize) -> bool {
        self.gate_variant != GateVariant::Disabled && layer >= self.gate_start_layer
    }

    pub fn gated_layers(&self) -> usize {
        (0..self.n_layers).filter(|&l| self.is_gated(l)).count()
    }
}
