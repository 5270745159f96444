//! Named parameter storage and the per-layer parameter layout.

use crate::config::{GateVariant, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Coarse grouping used by freezing rules and initialization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Embedding,
    /// `W_Q`, `W_K`, `W_V`, `W_O` of the main attention.
    AttentionProjection,
    FeedForward,
    Norm,
    /// Anything inside an attention gate.
    Gate,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub role: ParamRole,
    pub value: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    fn add(&mut self, name: String, role: ParamRole, shape: &[usize]) -> ParamId {
        let value = match role {
            ParamRole::Norm => Tensor::full(shape, 1.0),
            _ => Tensor::zeros(shape),
        };
        self.params.push(Param { name, role, value });
        ParamId(self.params.len() - 1)
    }

    /// Appends a parameter holding `value` as is.
    pub(crate) fn push(&mut self, name: String, role: ParamRole, value: Tensor) -> ParamId {
        self.params.push(Param { name, role, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn total_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Copies the value of every same-named parameter from `other`.
    /// Returns how many were copied; a shape disagreement is an error.
    pub fn load_matching(&mut self, other: &ParamStore) -> Result<usize> {
        let mut copied = 0;
        for p in &mut self.params {
            if let Some(src) = other.params.iter().find(|q| q.name == p.name) {
                if src.value.shape() != p.value.shape() {
                    return Err(Error::Shape {
                        op: "load_matching",
                        lhs: p.value.shape().to_vec(),
                        rhs: src.value.shape().to_vec(),
                    });
                }
                p.value = src.value.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }
}

#[derive(Clone, Debug)]
pub enum GateLayout {
    Attention {
        norm: ParamId,
        w_q: ParamId,
        w_k: ParamId,
        w_v: ParamId,
        /// `gate_heads * gate_d_k × n_heads`: one score per attention head.
        w_o: ParamId,
    },
    Linear {
        norm: ParamId,
        w: ParamId,
    },
}

/// Head `i` of the main attention owns columns `i*d_k..(i+1)*d_k` of
/// `w_q`/`w_k` and `i*d_v..(i+1)*d_v` of `w_v`.
#[derive(Clone, Debug)]
pub struct LayerLayout {
    pub attn_norm: ParamId,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub ffn_norm: ParamId,
    pub w_up: ParamId,
    pub w_down: ParamId,
    pub gate: Option<GateLayout>,
}

#[derive(Clone, Debug)]
pub struct ModelLayout {
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub final_norm: ParamId,
    pub layers: Vec<LayerLayout>,
}

impl ModelLayout {
    /// Allocates every parameter for `cfg` (zeros, norms at one).
    pub fn build(cfg: &ModelConfig) -> (ModelLayout, ParamStore) {
        use ParamRole::*;
        let mut s = ParamStore::default();
        let d = cfg.d_model;
        let tok_emb = s.add("tok_emb".into(), Embedding, &[cfg.vocab_size, d]);
        let pos_emb = s.add("pos_emb".into(), Embedding, &[cfg.max_seq, d]);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |name: &str| format!("layers.{l}.{name}");
            let attn_norm = s.add(p("attn_norm"), Norm, &[d]);
            let w_q = s.add(p("attn.w_q"), AttentionProjection, &[d, cfg.n_heads * cfg.d_k]);
            let w_k = s.add(p("attn.w_k"), AttentionProjection, &[d, cfg.n_heads * cfg.d_k]);
            let w_v = s.add(p("attn.w_v"), AttentionProjection, &[d, cfg.n_heads * cfg.d_v]);
            let w_o = s.add(p("attn.w_o"), AttentionProjection, &[cfg.n_heads * cfg.d_v, d]);
            let ffn_norm = s.add(p("ffn_norm"), Norm, &[d]);
            let w_up = s.add(p("ffn.w_up"), FeedForward, &[d, cfg.d_ff]);
            let w_down = s.add(p("ffn.w_down"), FeedForward, &[cfg.d_ff, d]);
            let gate = if cfg.is_gated(l) {
                let norm = s.add(p("gate.norm"), Gate, &[d]);
                Some(match cfg.gate_variant {
                    GateVariant::LinearGate => GateLayout::Linear {
                        norm,
                        w: s.add(p("gate.w_lin"), Gate, &[d, cfg.n_heads]),
                    },
                    _ => {
                        let width = cfg.gate_heads * cfg.gate_d_k;
                        GateLayout::Attention {
                            norm,
                            w_q: s.add(p("gate.w_q"), Gate, &[d, width]),
                            w_k: s.add(p("gate.w_k"), Gate, &[d, width]),
                            w_v: s.add(p("gate.w_v"), Gate, &[d, width]),
                            w_o: s.add(p("gate.w_o"), Gate, &[width, cfg.n_heads]),
                        }
                    }
                })
            } else {
                None
            };
            layers.push(LayerLayout {
                attn_norm,
                w_q,
                w_k,
                w_v,
                w_o,
                ffn_norm,
                w_up,
                w_down,
                gate,
            });
        }
        let final_norm = s.add("final_norm".into(), Norm, &[d]);
        (
            ModelLayout {
                tok_emb,
                pos_emb,
                final_norm,
                layers,
            },
            s,
        )
    }
}
