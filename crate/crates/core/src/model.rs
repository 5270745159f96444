//! Decoder-only transformer with per-layer attention gates.
//!
//! Layer wiring (pre-norm):
//!
//! ```text
//! x ─┬─ norm ─ MHA(mask from gate) ─ + ─┬─ norm ─ W_up ─ SiLU ─ W_down ─ + ─▶
//!    │                               ▲  │                               ▲
//!    └───────────────────────────────┘  └───────────────────────────────┘
//!    └─ gate (own norm) ─▶ flags
//! ```
//!
//! Logits use the transposed token embedding. [`Model::forward`] records
//! onto a [`Graph`] for training; [`Model::prefill`] and
//! [`Model::decode_step`] are the inference path with a physical
//! [`KVCache`].

use std::sync::Arc;

use crate::cache::{CacheEntry, KVCache};
use crate::config::{GateVariant, ModelConfig};
use crate::error::{Error, Result};
use crate::gate::{
    build_mask, gate_cells, linear_gate_scores, mha_gate_scores, threshold, AttentionMask,
    EvictionFlags, GateOutput,
};
use crate::params::{LayerLayout, ModelLayout, Param, ParamId, ParamStore};
use crate::tensor::{matmul_into, softmax_in_place, GateCell, Graph, Tensor, Var, RMS_EPS};

pub type TokenId = u32;

/// Graph handles of every parameter, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// How a forward pass decides which keys each head may attend to.
#[derive(Clone, Copy, Debug)]
pub enum GateMode<'a> {
    /// Run the gates and mask with their hard flags.
    Gated,
    /// Skip the gates; plain causal attention everywhere.
    Open,
    /// Mask with externally supplied flags; gates are not run.
    Provided(&'a EvictionFlags),
    /// Run the gates but keep the hard mask frozen at the given flags, with
    /// a smooth forward value (gradient checks).
    Relaxed(&'a EvictionFlags),
}

/// Everything one recorded forward pass exposes.
#[derive(Debug)]
pub struct ForwardPass {
    /// `n × vocab`.
    pub logits: Var,
    pub flags: EvictionFlags,
    /// Gate outputs for gated layers (only in `Gated`/`Relaxed` modes).
    pub gates: Vec<Option<GateOutput>>,
    /// `[layer][head]`, `n × d_k`.
    pub keys: Vec<Vec<Tensor>>,
    /// `[layer][head]`, `n × d_v`.
    pub values: Vec<Vec<Tensor>>,
    /// `[layer][head]`, `n × n` post-softmax attention weights.
    pub attention: Vec<Vec<Tensor>>,
    /// Residual stream entering each layer.
    pub hidden_inputs: Vec<Var>,
}

/// Result of processing a prompt.
#[derive(Clone, Debug)]
pub struct Prefill {
    /// `n × vocab`.
    pub logits: Tensor,
    pub cache: KVCache,
    pub flags: EvictionFlags,
    /// `[layer][head]`, `n × n`.
    pub attention: Vec<Vec<Tensor>>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub layout: ModelLayout,
    pub params: ParamStore,
}

struct HeadTensors {
    out: Var,
    keys: Vec<Tensor>,
    values: Vec<Tensor>,
    attention: Vec<Tensor>,
}

impl Model {
    /// Validates `config` and draws fresh weights from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, mut params) = ModelLayout::build(&config);
        crate::train::init_weights(&mut params, seed);
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    /// Rebuilds a model from stored parameters; names and shapes must match
    /// the layout `config` implies.
    pub fn from_params(config: ModelConfig, stored: &ParamStore) -> Result<Self> {
        config.validate()?;
        let (layout, mut params) = ModelLayout::build(&config);
        let copied = params.load_matching(stored)?;
        if copied != params.len() || stored.len() != params.len() {
            return Err(Error::Format(format!(
                "parameter set mismatch: model has {}, file has {}, {} in common",
                params.len(),
                stored.len(),
                copied
            )));
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    /// Places every parameter on `g` as a leaf; `trainable` picks which ones
    /// collect gradients.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(&Param) -> bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(_, p)| g.leaf(p.value.clone(), trainable(p)))
            .collect();
        BoundParams { vars }
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<Vec<usize>> {
        if tokens.is_empty() {
            return Err(Error::contract("empty token sequence"));
        }
        if tokens.len() > self.config.max_seq {
            return Err(Error::contract(format!(
                "sequence length {} exceeds max_seq {}",
                tokens.len(),
                self.config.max_seq
            )));
        }
        tokens
            .iter()
            .map(|&t| {
                let t = t as usize;
                if t >= self.config.vocab_size {
                    Err(Error::contract(format!(
                        "token {t} out of vocab {}",
                        self.config.vocab_size
                    )))
                } else {
                    Ok(t)
                }
            })
            .collect()
    }

    /// Records a full forward pass of `tokens` on `g`.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        tokens: &[TokenId],
        mode: GateMode<'_>,
    ) -> Result<ForwardPass> {
        let ids = self.check_tokens(tokens)?;
        let cfg = &self.config;
        let n = ids.len();
        if let GateMode::Provided(f) | GateMode::Relaxed(f) = mode {
            if f.layers.len() != cfg.n_layers {
                return Err(Error::Shape {
                    op: "forward flags",
                    lhs: vec![f.layers.len()],
                    rhs: vec![cfg.n_layers],
                });
            }
        }
        let positions: Vec<usize> = (0..n).collect();
        let tok = g.gather_rows(bound.var(self.layout.tok_emb), &ids)?;
        let pos = g.gather_rows(bound.var(self.layout.pos_emb), &positions)?;
        let mut x = g.add(tok, pos)?;

        let cells = gate_cells(n, cfg.recent_window);
        let mut out = ForwardPass {
            logits: x,
            flags: EvictionFlags::open(cfg.n_layers),
            gates: Vec::with_capacity(cfg.n_layers),
            keys: Vec::with_capacity(cfg.n_layers),
            values: Vec::with_capacity(cfg.n_layers),
            attention: Vec::with_capacity(cfg.n_layers),
            hidden_inputs: Vec::with_capacity(cfg.n_layers),
        };
        for (l, layer) in self.layout.layers.iter().enumerate() {
            out.hidden_inputs.push(x);
            let gate_out = match (&layer.gate, mode) {
                (None, _) | (_, GateMode::Open) | (_, GateMode::Provided(_)) => None,
                (Some(gl), GateMode::Gated) | (Some(gl), GateMode::Relaxed(_)) => {
                    let src = if cfg.gate_variant == GateVariant::PrevLayerGate {
                        out.hidden_inputs[l - 1]
                    } else {
                        x
                    };
                    let scores = match cfg.gate_variant {
                        GateVariant::LinearGate => linear_gate_scores(g, src, gl, bound)?,
                        _ => mha_gate_scores(g, src, gl, bound, cfg)?,
                    };
                    let frozen = match mode {
                        GateMode::Relaxed(f) => Some(f.layer(l).ok_or_else(|| {
                            Error::contract(format!("relaxed mode lacks flags for layer {l}"))
                        })?),
                        _ => None,
                    };
                    Some(threshold(g, scores, cfg, frozen)?)
                }
            };
            let flags = match (&gate_out, mode) {
                (Some(go), _) => Some(go.flags.clone()),
                (None, GateMode::Provided(f)) => f.layer(l).cloned(),
                _ => None,
            };
            let mask = build_mask(flags.as_ref(), n, cfg.n_heads, cfg.recent_window)?;
            let gate_var = gate_out
                .as_ref()
                .map(|go| go.value)
                .filter(|&v| matches!(mode, GateMode::Relaxed(_)) || g.requires_grad(v));

            let xn = g.rms_norm(x, bound.var(layer.attn_norm))?;
            let heads = self.attention(g, bound, layer, xn, &mask, gate_var.map(|v| (v, &cells)))?;
            x = g.add(x, heads.out)?;
            let xn = g.rms_norm(x, bound.var(layer.ffn_norm))?;
            let up = g.matmul(xn, bound.var(layer.w_up))?;
            let act = g.silu(up);
            let down = g.matmul(act, bound.var(layer.w_down))?;
            x = g.add(x, down)?;

            out.flags.layers[l] = flags;
            out.gates.push(gate_out);
            out.keys.push(heads.keys);
            out.values.push(heads.values);
            out.attention.push(heads.attention);
        }
        let h = g.rms_norm(x, bound.var(self.layout.final_norm))?;
        out.logits = g.matmul_nt(h, bound.var(self.layout.tok_emb))?;
        Ok(out)
    }

    /// Multi-head attention of one layer on normalized input `xn` under
    /// `mask`. With `gate`, post-softmax weights are multiplied by the
    /// expanded straight-through gate so gradients reach the gate; the
    /// forward value is unchanged because the mask already zeroes evicted
    /// columns.
    fn attention(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        layer: &LayerLayout,
        xn: Var,
        mask: &AttentionMask,
        gate: Option<(Var, &Arc<[GateCell]>)>,
    ) -> Result<HeadTensors> {
        let cfg = &self.config;
        let n = g.value(xn).rows();
        if mask.heads() != cfg.n_heads || mask.n() != n {
            return Err(Error::Shape {
                op: "mha mask",
                lhs: vec![mask.heads(), mask.n(), mask.n()],
                rhs: vec![cfg.n_heads, n, n],
            });
        }
        let q = g.matmul(xn, bound.var(layer.w_q))?;
        let k = g.matmul(xn, bound.var(layer.w_k))?;
        let v = g.matmul(xn, bound.var(layer.w_v))?;
        let scale = 1.0 / (cfg.d_k as f64).sqrt();
        let mut outs = Vec::with_capacity(cfg.n_heads);
        let mut keys = Vec::with_capacity(cfg.n_heads);
        let mut values = Vec::with_capacity(cfg.n_heads);
        let mut attention = Vec::with_capacity(cfg.n_heads);
        for i in 0..cfg.n_heads {
            let qi = g.slice_cols(q, i * cfg.d_k, cfg.d_k)?;
            let ki = g.slice_cols(k, i * cfg.d_k, cfg.d_k)?;
            let vi = g.slice_cols(v, i * cfg.d_v, cfg.d_v)?;
            let s = g.matmul_nt(qi, ki)?;
            let s = g.scale(s, scale);
            let s = g.add_const(s, &mask.additive(i))?;
            let mut a = g.softmax_rows(s)?;
            attention.push(g.value(a).clone());
            if let Some((gv, cells)) = gate {
                let m = g.expand_gate(gv, i, Arc::clone(cells))?;
                a = g.mul(a, m)?;
            }
            outs.push(g.matmul(a, vi)?);
            keys.push(g.value(ki).clone());
            values.push(g.value(vi).clone());
        }
        let cat = g.concat_cols(&outs)?;
        let out = g.matmul(cat, bound.var(layer.w_o))?;
        Ok(HeadTensors {
            out,
            keys,
            values,
            attention,
        })
    }

    /// Processes a prompt and builds the pruned cache: each head keeps the
    /// entries its flags retain, plus the recent-window entries the next
    /// query still sees.
    pub fn prefill(&self, tokens: &[TokenId], mode: GateMode<'_>) -> Result<Prefill> {
        if let GateMode::Relaxed(_) = mode {
            return Err(Error::contract("relaxed mode is for recorded passes only"));
        }
        let mut g = Graph::new();
        let bound = self.bind(&mut g, |_| false);
        let pass = self.forward(&mut g, &bound, tokens, mode)?;
        let cfg = &self.config;
        let n = tokens.len();
        let r = cfg.recent_window;
        let mut cache = KVCache::empty(cfg.n_layers, cfg.n_heads, cfg.d_k, cfg.d_v, r);
        cache.n_prefill = n;
        for l in 0..cfg.n_layers {
            let flags = pass.flags.layer(l);
            for i in 0..cfg.n_heads {
                let (k, v) = (&pass.keys[l][i], &pass.values[l][i]);
                let entries = &mut cache.layers[l][i].entries;
                for t in 0..n {
                    let pinned = flags.map_or(true, |f| f.hard(t, i));
                    let in_window = r > 0 && t + r >= n;
                    if pinned || in_window {
                        entries.push(CacheEntry {
                            position: t,
                            key: k.row(t).to_vec(),
                            value: v.row(t).to_vec(),
                            pinned,
                        });
                    }
                }
            }
        }
        Ok(Prefill {
            logits: g.value(pass.logits).clone(),
            cache,
            flags: pass.flags,
            attention: pass.attention,
        })
    }

    /// Appends one token to `cache` in every head and returns its next-token
    /// logits. Gates are not consulted.
    pub fn decode_step(&self, token: TokenId, cache: &mut KVCache) -> Result<Vec<f64>> {
        let cfg = &self.config;
        if cache.n_layers() != cfg.n_layers
            || cache.n_heads() != cfg.n_heads
            || cache.d_k != cfg.d_k
            || cache.d_v != cfg.d_v
        {
            return Err(Error::contract(format!(
                "cache has {} layers × {} heads (d_k {}, d_v {}), model expects {} × {} ({}, {})",
                cache.n_layers(),
                cache.n_heads(),
                cache.d_k,
                cache.d_v,
                cfg.n_layers,
                cfg.n_heads,
                cfg.d_k,
                cfg.d_v
            )));
        }
        if cache.recent_window != cfg.recent_window {
            return Err(Error::contract("cache recent window differs from model"));
        }
        let p = cache.next_position();
        if p >= cfg.max_seq {
            return Err(Error::contract(format!("position {p} exceeds max_seq {}", cfg.max_seq)));
        }
        let id = self.check_tokens(&[token])?[0];
        cache.expire_window(p);

        let d = cfg.d_model;
        let w = |pid: ParamId| self.params.get(pid).value.data();
        let mut x: Vec<f64> = w(self.layout.tok_emb)[id * d..(id + 1) * d]
            .iter()
            .zip(&w(self.layout.pos_emb)[p * d..(p + 1) * d])
            .map(|(a, b)| a + b)
            .collect();
        let scale = 1.0 / (cfg.d_k as f64).sqrt();
        for (l, layer) in self.layout.layers.iter().enumerate() {
            let xn = rms_norm_row(&x, w(layer.attn_norm));
            let q = vec_mat(&xn, w(layer.w_q), cfg.n_heads * cfg.d_k);
            let k = vec_mat(&xn, w(layer.w_k), cfg.n_heads * cfg.d_k);
            let v = vec_mat(&xn, w(layer.w_v), cfg.n_heads * cfg.d_v);
            let mut cat = vec![0.0; cfg.n_heads * cfg.d_v];
            for i in 0..cfg.n_heads {
                let head = &mut cache.layers[l][i];
                head.entries.push(CacheEntry {
                    position: p,
                    key: k[i * cfg.d_k..(i + 1) * cfg.d_k].to_vec(),
                    value: v[i * cfg.d_v..(i + 1) * cfg.d_v].to_vec(),
                    pinned: true,
                });
                let qi = &q[i * cfg.d_k..(i + 1) * cfg.d_k];
                let mut scores: Vec<f64> = head
                    .entries
                    .iter()
                    .map(|e| dot(qi, &e.key) * scale)
                    .collect();
                softmax_in_place(&mut scores).expect("self entry is always present");
                let o = &mut cat[i * cfg.d_v..(i + 1) * cfg.d_v];
                for (a, e) in scores.iter().zip(&head.entries) {
                    for (o, v) in o.iter_mut().zip(&e.value) {
                        *o += a * v;
                    }
                }
            }
            let attn = vec_mat(&cat, w(layer.w_o), d);
            x.iter_mut().zip(&attn).for_each(|(x, a)| *x += a);
            let xn = rms_norm_row(&x, w(layer.ffn_norm));
            let up = vec_mat(&xn, w(layer.w_up), cfg.d_ff);
            let act: Vec<f64> = up.iter().map(|&u| u * crate::tensor::sigmoid(u)).collect();
            let down = vec_mat(&act, w(layer.w_down), d);
            x.iter_mut().zip(&down).for_each(|(x, a)| *x += a);
        }
        cache.n_decoded += 1;
        let h = rms_norm_row(&x, w(self.layout.final_norm));
        let emb = w(self.layout.tok_emb);
        Ok((0..cfg.vocab_size)
            .map(|t| dot(&h, &emb[t * d..(t + 1) * d]))
            .collect())
    }

    /// Logits of the final position of a recorded pass with no gradients.
    pub fn logits(&self, tokens: &[TokenId], mode: GateMode<'_>) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, |_| false);
        let pass = self.forward(&mut g, &bound, tokens, mode)?;
        Ok(g.value(pass.logits).clone())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn vec_mat(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    matmul_into(1, x.len(), cols, x, w, &mut out);
    out
}

fn rms_norm_row(x: &[f64], w: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    x.iter().zip(w).map(|(v, g)| v * inv * g).collect()
}

/// Plain causal attention over explicit key/value rows; the reference the
/// masked path is checked against.
pub fn attend(query: &[f64], keys: &[&[f64]], values: &[&[f64]]) -> Vec<f64> {
    let scale = 1.0 / (query.len() as f64).sqrt();
    let mut scores: Vec<f64> = keys.iter().map(|k| dot(query, k) * scale).collect();
    let width = values.first().map_or(0, |v| v.len());
    if softmax_in_place(&mut scores).is_err() {
        return vec![0.0; width];
    }
    let mut out = vec![0.0; width];
    for (a, v) in scores.iter().zip(values) {
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += a * x;
        }
    }
    out
}
