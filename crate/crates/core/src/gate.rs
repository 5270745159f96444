//! Attention gates: per-token, per-head retention flags and the column
//! masks they induce.
//!
//! A gate maps the `n×d` hidden states entering a layer to `n×h` scores
//! `s`. The soft retention probability is `sigmoid(s + gamma)` and the hard
//! flag is `soft > tau` (strict, so the boundary evicts). During training the
//! hard flag is used in the forward pass while gradients flow through the
//! soft value (straight-through).
//!
//! Mask rule for head `i`, query `j`, key `t`:
//!
//! | condition                    | mask |
//! |------------------------------|------|
//! | `j < t`                      | 0    |
//! | `j == t`                     | 1    |
//! | `r > 0` and `t >= j - r`     | 1    |
//! | otherwise                    | `hard[t][i]` |

use std::sync::Arc;

use crate::config::{GateVariant, ModelConfig};
use crate::error::{Error, Result};
use crate::model::BoundParams;
use crate::params::GateLayout;
use crate::tensor::{sigmoid, GateCell, Graph, Tensor, Var};

/// Gate decisions for one layer, row-major `n × heads`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerFlags {
    n: usize,
    heads: usize,
    soft: Vec<f64>,
    hard: Vec<bool>,
}

impl LayerFlags {
    /// Thresholds sigmoid outputs: `hard = soft > tau`.
    pub fn from_soft(n: usize, heads: usize, soft: Vec<f64>, tau: f64) -> Result<Self> {
        if soft.len() != n * heads {
            return Err(Error::Shape {
                op: "flags",
                lhs: vec![n, heads],
                rhs: vec![soft.len()],
            });
        }
        let hard = soft.iter().map(|&p| p > tau).collect();
        Ok(Self {
            n,
            heads,
            soft,
            hard,
        })
    }

    /// Flags fixed from outside; the soft view mirrors the hard values.
    pub fn from_hard(n: usize, heads: usize, hard: Vec<bool>) -> Result<Self> {
        if hard.len() != n * heads {
            return Err(Error::Shape {
                op: "flags",
                lhs: vec![n, heads],
                rhs: vec![hard.len()],
            });
        }
        let soft = hard.iter().map(|&h| if h { 1.0 } else { 0.0 }).collect();
        Ok(Self {
            n,
            heads,
            soft,
            hard,
        })
    }

    pub fn all_open(n: usize, heads: usize) -> Self {
        Self {
            n,
            heads,
            soft: vec![1.0; n * heads],
            hard: vec![true; n * heads],
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn hard(&self, token: usize, head: usize) -> bool {
        self.hard[token * self.heads + head]
    }

    pub fn soft(&self, token: usize, head: usize) -> f64 {
        self.soft[token * self.heads + head]
    }

    pub fn hard_values(&self) -> &[bool] {
        &self.hard
    }

    pub fn soft_values(&self) -> &[f64] {
        &self.soft
    }

    pub fn retained_in_head(&self, head: usize) -> usize {
        (0..self.n).filter(|&t| self.hard(t, head)).count()
    }

    pub fn retention(&self) -> f64 {
        if self.hard.is_empty() {
            return 1.0;
        }
        self.hard.iter().filter(|&&h| h).count() as f64 / self.hard.len() as f64
    }

    fn hard_tensor(&self) -> Tensor {
        let data = self.hard.iter().map(|&h| if h { 1.0 } else { 0.0 }).collect();
        Tensor::new(vec![self.n, self.heads], data).expect("n×h")
    }
}

/// Flags for every layer of one sequence; `None` marks an ungated layer
/// (everything retained).
#[derive(Clone, Debug, PartialEq, Default)]
pub struct EvictionFlags {
    pub layers: Vec<Option<LayerFlags>>,
}

impl EvictionFlags {
    pub fn open(n_layers: usize) -> Self {
        Self {
            layers: vec![None; n_layers],
        }
    }

    pub fn layer(&self, l: usize) -> Option<&LayerFlags> {
        self.layers.get(l).and_then(Option::as_ref)
    }
}

/// Aggregate gate statistics over a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct GateStats {
    /// Mean hard gate output over every gated layer, head and token.
    pub mean_retention: f64,
    /// One entry per layer; ungated layers evict nothing.
    pub per_layer_eviction: Vec<f64>,
    /// `layers × heads`.
    pub per_head_eviction: Vec<Vec<f64>>,
}

impl GateStats {
    pub fn from_flags<'a>(
        flags: impl IntoIterator<Item = &'a EvictionFlags>,
        n_layers: usize,
        n_heads: usize,
    ) -> Self {
        let mut kept = vec![vec![0usize; n_heads]; n_layers];
        let mut total = vec![0usize; n_layers];
        let mut gated_kept = 0usize;
        let mut gated_total = 0usize;
        for f in flags {
            for (l, lf) in f.layers.iter().enumerate() {
                let Some(lf) = lf else { continue };
                for (h, k) in kept[l].iter_mut().enumerate() {
                    *k += lf.retained_in_head(h);
                }
                total[l] += lf.len();
                gated_kept += lf.hard.iter().filter(|&&h| h).count();
                gated_total += lf.hard.len();
            }
        }
        let per_head_eviction: Vec<Vec<f64>> = kept
            .iter()
            .zip(&total)
            .map(|(ks, &t)| {
                ks.iter()
                    .map(|&k| if t == 0 { 0.0 } else { 1.0 - k as f64 / t as f64 })
                    .collect()
            })
            .collect();
        let per_layer_eviction = per_head_eviction
            .iter()
            .map(|hs| hs.iter().sum::<f64>() / n_heads as f64)
            .collect();
        let mean_retention = if gated_total == 0 {
            1.0
        } else {
            gated_kept as f64 / gated_total as f64
        };
        Self {
            mean_retention,
            per_layer_eviction,
            per_head_eviction,
        }
    }

    pub fn mean_eviction(&self) -> f64 {
        1.0 - self.mean_retention
    }
}

/// `heads × n × n` binary attention mask.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    n: usize,
    heads: usize,
    data: Vec<bool>,
}

impl AttentionMask {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn get(&self, head: usize, query: usize, key: usize) -> bool {
        self.data[(head * self.n + query) * self.n + key]
    }

    /// Row of head `head` for query `query`.
    pub fn row(&self, head: usize, query: usize) -> &[bool] {
        let start = (head * self.n + query) * self.n;
        &self.data[start..start + self.n]
    }

    /// `0` where attended, `-inf` where masked.
    pub fn additive(&self, head: usize) -> Tensor {
        let start = head * self.n * self.n;
        let data = self.data[start..start + self.n * self.n]
            .iter()
            .map(|&m| if m { 0.0 } else { f64::NEG_INFINITY })
            .collect();
        Tensor::new(vec![self.n, self.n], data).expect("n×n")
    }

    pub fn count_ones(&self, head: usize) -> usize {
        let start = head * self.n * self.n;
        self.data[start..start + self.n * self.n].iter().filter(|&&m| m).count()
    }
}

fn window_covers(query: usize, key: usize, window: usize) -> bool {
    window > 0 && key + window >= query
}

/// Builds the per-head mask for one layer. `flags == None` yields the plain
/// causal mask.
pub fn build_mask(
    flags: Option<&LayerFlags>,
    n: usize,
    heads: usize,
    recent_window: usize,
) -> Result<AttentionMask> {
    if let Some(f) = flags {
        if f.len() != n || f.heads() != heads {
            return Err(Error::Shape {
                op: "build_mask",
                lhs: vec![f.len(), f.heads()],
                rhs: vec![n, heads],
            });
        }
    }
    let mut data = vec![false; heads * n * n];
    for i in 0..heads {
        for j in 0..n {
            for t in 0..=j {
                let keep = j == t
                    || window_covers(j, t, recent_window)
                    || flags.map_or(true, |f| f.hard(t, i));
                data[(i * n + j) * n + t] = keep;
            }
        }
    }
    Ok(AttentionMask { n, heads, data })
}

/// Which cells of an `n×n` mask are decided by a gate (as opposed to being
/// fixed by causality, the diagonal or the recent window).
pub fn gate_cells(n: usize, recent_window: usize) -> Arc<[GateCell]> {
    let mut cells = Vec::with_capacity(n * n);
    for j in 0..n {
        for t in 0..n {
            cells.push(if t > j {
                GateCell::Zero
            } else if t == j || window_covers(j, t, recent_window) {
                GateCell::One
            } else {
                GateCell::Gate
            });
        }
    }
    cells.into()
}

/// Gate tensors produced for one layer of one sequence.
#[derive(Clone, Debug)]
pub struct GateOutput {
    /// Raw `n×h` scores.
    pub scores: Var,
    /// `sigmoid(scores + gamma)`.
    pub soft: Var,
    /// Straight-through node: hard flags forward, `soft` backward.
    pub value: Var,
    pub flags: LayerFlags,
}

/// Scores from the reduced-head causal attention scorer.
pub fn mha_gate_scores(
    g: &mut Graph,
    x: Var,
    gate: &GateLayout,
    bound: &BoundParams,
    cfg: &ModelConfig,
) -> Result<Var> {
    let GateLayout::Attention {
        norm,
        w_q,
        w_k,
        w_v,
        w_o,
    } = gate
    else {
        return Err(Error::contract("mha gate scores need attention gate weights"));
    };
    let n = g.value(x).rows();
    let xn = g.rms_norm(x, bound.var(*norm))?;
    let q = g.matmul(xn, bound.var(*w_q))?;
    let k = g.matmul(xn, bound.var(*w_k))?;
    let v = g.matmul(xn, bound.var(*w_v))?;
    let causal = build_mask(None, n, 1, 0)?.additive(0);
    let dk = cfg.gate_d_k;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.gate_heads);
    for h in 0..cfg.gate_heads {
        let qh = g.slice_cols(q, h * dk, dk)?;
        let kh = g.slice_cols(k, h * dk, dk)?;
        let vh = g.slice_cols(v, h * dk, dk)?;
        let s = g.matmul_nt(qh, kh)?;
        let s = g.scale(s, scale);
        let s = g.add_const(s, &causal)?;
        let a = g.softmax_rows(s)?;
        heads.push(g.matmul(a, vh)?);
    }
    let cat = g.concat_cols(&heads)?;
    g.matmul(cat, bound.var(*w_o))
}

/// Scores from a per-token linear map; no information crosses tokens.
pub fn linear_gate_scores(
    g: &mut Graph,
    x: Var,
    gate: &GateLayout,
    bound: &BoundParams,
) -> Result<Var> {
    let GateLayout::Linear { norm, w } = gate else {
        return Err(Error::contract("linear gate scores need linear gate weights"));
    };
    let xn = g.rms_norm(x, bound.var(*norm))?;
    g.matmul(xn, bound.var(*w))
}

/// Applies `sigmoid(s + gamma) > tau`. With `relax_around`, the forward value
/// becomes `soft + (hard0 - soft0)` and the hard flags stay frozen at `hard0`:
/// a smooth function whose gradient equals the straight-through gradient
/// at the frozen point, used for finite-difference checks.
pub fn threshold(
    g: &mut Graph,
    scores: Var,
    cfg: &ModelConfig,
    relax_around: Option<&LayerFlags>,
) -> Result<GateOutput> {
    let (n, h) = (g.value(scores).rows(), g.value(scores).cols());
    let shifted = g.add_scalar(scores, cfg.gamma);
    let soft = g.sigmoid(shifted);
    let soft_vals = g.value(soft).data().to_vec();
    let (flags, forward) = match relax_around {
        None => {
            let flags = LayerFlags::from_soft(n, h, soft_vals, cfg.tau)?;
            let fwd = flags.hard_tensor();
            (flags, fwd)
        }
        Some(frozen) => {
            if frozen.len() != n || frozen.heads() != h {
                return Err(Error::Shape {
                    op: "threshold",
                    lhs: vec![frozen.len(), frozen.heads()],
                    rhs: vec![n, h],
                });
            }
            let data = soft_vals
                .iter()
                .zip(frozen.soft_values())
                .zip(frozen.hard_values())
                .map(|((s, s0), &h0)| s + if h0 { 1.0 } else { 0.0 } - s0)
                .collect();
            (frozen.clone(), Tensor::new(vec![n, h], data)?)
        }
    };
    let value = g.straight_through(soft, forward)?;
    Ok(GateOutput {
        scores,
        soft,
        value,
        flags,
    })
}

/// Gate of a `mha_gate` layer.
pub fn ag_forward(
    g: &mut Graph,
    x: Var,
    gate: &GateLayout,
    bound: &BoundParams,
    cfg: &ModelConfig,
) -> Result<GateOutput> {
    if cfg.gate_variant != GateVariant::MhaGate {
        return Err(Error::contract("ag_forward requires gate_variant = mha_gate"));
    }
    let s = mha_gate_scores(g, x, gate, bound, cfg)?;
    threshold(g, s, cfg, None)
}

/// Gate of a `linear_gate` layer.
pub fn ag_forward_linear(
    g: &mut Graph,
    x: Var,
    gate: &GateLayout,
    bound: &BoundParams,
    cfg: &ModelConfig,
) -> Result<GateOutput> {
    if cfg.gate_variant != GateVariant::LinearGate {
        return Err(Error::contract("ag_forward_linear requires gate_variant = linear_gate"));
    }
    let s = linear_gate_scores(g, x, gate, bound)?;
    threshold(g, s, cfg, None)
}

/// Gate of a `prev_layer_gate` layer: layer `layer` is gated from the hidden
/// states that entered layer `layer - 1`.
pub fn ag_forward_prev_layer(
    g: &mut Graph,
    layer: usize,
    x_prev: Var,
    gate: &GateLayout,
    bound: &BoundParams,
    cfg: &ModelConfig,
) -> Result<GateOutput> {
    if cfg.gate_variant != GateVariant::PrevLayerGate {
        return Err(Error::contract(
            "ag_forward_prev_layer requires gate_variant = prev_layer_gate",
        ));
    }
    if layer == 0 || layer < cfg.gate_start_layer {
        return Err(Error::contract(format!(
            "previous-layer gate applied at layer {layer} below start {}",
            cfg.gate_start_layer.max(1)
        )));
    }
    let s = mha_gate_scores(g, x_prev, gate, bound, cfg)?;
    threshold(g, s, cfg, None)
}

/// Derivative the straight-through estimator assigns to a hard flag with
/// respect to its raw score.
pub fn ste_derivative(score: f64, gamma: f64) -> f64 {
    let s = sigmoid(score + gamma);
    s * (1.0 - s)
}
