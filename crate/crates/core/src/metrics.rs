//! FLOPs accounting, cache memory and held-out perplexity under a policy.

use serde::Serialize;

use crate::cache::{prune_cache, KVCache};
use crate::config::ModelConfig;
use crate::corpus::Window;
use crate::error::{Error, Result};
use crate::gate::AttentionMask;
use crate::model::{GateMode, Model};
use crate::parallel::Parallelism;
use crate::policy::PolicySpec;
use crate::tensor::{softmax_in_place, Tensor};

/// Basis points in one whole: `t_bp = 10_000` means everything evicted.
pub const BP: u32 = 10_000;

/// Dominant attention-term FLOPs, every value multiplied by [`BP`] so that
/// fractional eviction rates stay exact integers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Flops {
    /// `n² · d_k' · h'`.
    pub ag: u128,
    /// `(1 - t) · n² · d_k · h`.
    pub mha: u128,
    /// `n² · max(d_k' h', (1 - t) d_k h)`.
    pub combined: u128,
}

/// Dominant-term FLOPs for `n` tokens with `t_bp` basis points of the cache
/// evicted. Pass `h_gate = 0` for a model without gates.
pub fn flops_model(n: u64, d_k: u64, h: u64, d_k_gate: u64, h_gate: u64, t_bp: u32) -> Result<Flops> {
    if t_bp > BP {
        return Err(Error::contract(format!("eviction {t_bp} bp exceeds {BP}")));
    }
    let n2 = (n as u128) * (n as u128);
    let ag_width = (d_k_gate as u128) * (h_gate as u128) * BP as u128;
    let mha_width = (d_k as u128) * (h as u128) * (BP - t_bp) as u128;
    Ok(Flops {
        ag: n2 * ag_width,
        mha: n2 * mha_width,
        combined: n2 * ag_width.max(mha_width),
    })
}

/// [`flops_model`] with the dimensions of `cfg`.
pub fn flops_for(cfg: &ModelConfig, n: usize, t_bp: u32, with_gate: bool) -> Result<Flops> {
    let h_gate = if with_gate { cfg.gate_heads as u64 } else { 0 };
    flops_model(n as u64, cfg.d_k as u64, cfg.n_heads as u64, cfg.gate_d_k as u64, h_gate, t_bp)
}

/// Ratio in `[0, 1]` to basis points, rounded to nearest.
pub fn to_bp(ratio: f64) -> u32 {
    (ratio.clamp(0.0, 1.0) * BP as f64).round() as u32
}

/// Score plus value multiply-accumulates a mask implies:
/// `(d_k + d_v)` per attended (query, key) pair, summed over heads.
pub fn mask_macs(mask: &AttentionMask, d_k: usize, d_v: usize) -> u128 {
    (0..mask.heads())
        .map(|h| mask.count_ones(h) as u128 * (d_k + d_v) as u128)
        .sum()
}

/// Causal attention for one head that visits only unmasked keys, returning
/// the output and the multiply-accumulates actually performed.
pub fn sparse_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &AttentionMask,
    head: usize,
) -> Result<(Tensor, u128)> {
    let n = q.rows();
    if k.rows() != n || v.rows() != n || mask.n() != n || q.cols() != k.cols() {
        return Err(Error::Shape {
            op: "sparse_attention",
            lhs: q.shape().to_vec(),
            rhs: vec![k.rows(), v.rows(), mask.n()],
        });
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut macs = 0u128;
    let mut out = Vec::with_capacity(n * v.cols());
    for j in 0..n {
        let keys: Vec<usize> = (0..n).filter(|&t| mask.get(head, j, t)).collect();
        let mut scores = Vec::with_capacity(keys.len());
        for &t in &keys {
            let mut s = 0.0;
            for (a, b) in q.row(j).iter().zip(k.row(t)) {
                s += a * b;
                macs += 1;
            }
            scores.push(s * scale);
        }
        softmax_in_place(&mut scores)
            .map_err(|_| Error::contract(format!("query {j} of head {head} attends nothing")))?;
        let mut o = vec![0.0; v.cols()];
        for (a, &t) in scores.iter().zip(&keys) {
            for (o, x) in o.iter_mut().zip(v.row(t)) {
                *o += a * x;
                macs += 1;
            }
        }
        out.extend(o);
    }
    Ok((Tensor::new(vec![n, v.cols()], out)?, macs))
}

/// Summary of one policy over a held-out set.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunMetrics {
    pub flops_ag: u128,
    pub flops_mha: u128,
    pub flops_combined: u128,
    pub eviction_ratio_mean: f64,
    /// `[layer][head]`.
    pub eviction_per_layer_head: Vec<Vec<f64>>,
    pub kv_bytes_full: u64,
    pub kv_bytes_pruned: u64,
    pub perplexity: f64,
    /// Mean retained prefill entries per head and window.
    pub retained_per_head: f64,
    pub scored_tokens: u64,
}

/// One window scored under a policy.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowEval {
    pub nll_sum: f64,
    pub tokens: usize,
    pub prompt_len: usize,
    pub eviction_per_head: Vec<Vec<f64>>,
    pub kv_bytes_full: usize,
    pub kv_bytes_pruned: usize,
    pub retained_entries: usize,
}

/// Prompt length for a window: the first half, at least one token, leaving
/// at least one token to decode.
pub fn prompt_len(window_len: usize) -> usize {
    (window_len / 2).clamp(1, window_len.saturating_sub(1).max(1))
}

/// Retained-count budget that evicts `ratio` of `n` entries.
pub fn matched_budget(ratio: f64, n: usize) -> usize {
    ((1.0 - ratio.clamp(0.0, 1.0)) * n as f64).round() as usize
}

/// Prefills `window`'s prompt, prunes per `policy`, then teacher-forces the
/// rest through the cache. Only tokens predicted by decode steps are scored.
pub fn evaluate_window(model: &Model, window: &Window, policy: &PolicySpec) -> Result<WindowEval> {
    let len = window.input.len();
    if len < 2 {
        return Err(Error::contract("evaluation window needs at least two tokens"));
    }
    let m = prompt_len(len);
    let prompt = &window.input[..m];
    let mode = match policy {
        PolicySpec::AttentionGate => GateMode::Gated,
        _ => GateMode::Open,
    };
    let pre = model.prefill(prompt, mode)?;
    let cfg = &model.config;
    let mut cache: KVCache = match policy {
        PolicySpec::None | PolicySpec::AttentionGate => pre.cache,
        _ => {
            let keep = policy.retained(m, cfg.n_layers, cfg.n_heads, Some(&pre.attention))?;
            prune_cache(&pre.cache, &keep)?
        }
    };
    let eviction_per_head = cache.eviction_per_head();
    let kv_bytes_full = cache.full_prefill_bytes();
    let kv_bytes_pruned = cache.prefill_bytes();
    let retained_entries = (0..cfg.n_layers)
        .flat_map(|l| (0..cfg.n_heads).map(move |h| (l, h)))
        .map(|(l, h)| cache.retained_prefill(l, h))
        .sum();
    let mut nll_sum = 0.0;
    for j in m..len {
        let logits = model.decode_step(window.input[j], &mut cache)?;
        nll_sum += nll(&logits, window.target[j] as usize)?;
    }
    Ok(WindowEval {
        nll_sum,
        tokens: len - m,
        prompt_len: m,
        eviction_per_head,
        kv_bytes_full,
        kv_bytes_pruned,
        retained_entries,
    })
}

fn nll(logits: &[f64], target: usize) -> Result<f64> {
    let x = logits
        .get(target)
        .ok_or_else(|| Error::contract(format!("target {target} out of vocab")))?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(lse - x)
}

/// Per-window variant of `policy`: random draws get a window-specific seed.
fn policy_for_window(policy: &PolicySpec, index: usize) -> PolicySpec {
    match *policy {
        PolicySpec::Random { budget, seed } => PolicySpec::Random {
            budget,
            seed: seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64),
        },
        ref p => p.clone(),
    }
}

/// Scores every window under `policy` and aggregates.
pub fn evaluate(
    model: &Model,
    windows: &[Window],
    policy: &PolicySpec,
    par: Parallelism,
) -> Result<RunMetrics> {
    if windows.is_empty() {
        return Err(Error::contract("evaluation corpus has no windows"));
    }
    policy.validate()?;
    let indexed: Vec<(usize, &Window)> = windows.iter().enumerate().collect();
    let evals = par
        .map(&indexed, |&(i, w)| evaluate_window(model, w, &policy_for_window(policy, i)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    aggregate(model, policy, &evals)
}

fn aggregate(model: &Model, policy: &PolicySpec, evals: &[WindowEval]) -> Result<RunMetrics> {
    let cfg = &model.config;
    let count = evals.len() as f64;
    let mut per = vec![vec![0.0; cfg.n_heads]; cfg.n_layers];
    let (mut nll, mut tokens, mut full, mut pruned, mut retained) = (0.0, 0usize, 0usize, 0usize, 0usize);
    for e in evals {
        for (acc, row) in per.iter_mut().zip(&e.eviction_per_head) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v / count;
            }
        }
        nll += e.nll_sum;
        tokens += e.tokens;
        full += e.kv_bytes_full;
        pruned += e.kv_bytes_pruned;
        retained += e.retained_entries;
    }
    let mean = per.iter().flatten().sum::<f64>() / (cfg.n_layers * cfg.n_heads) as f64;
    let n = evals[0].prompt_len;
    let flops = flops_for(cfg, n, to_bp(mean), matches!(policy, PolicySpec::AttentionGate))?;
    Ok(RunMetrics {
        flops_ag: flops.ag,
        flops_mha: flops.mha,
        flops_combined: flops.combined,
        eviction_ratio_mean: mean,
        eviction_per_layer_head: per,
        kv_bytes_full: full as u64,
        kv_bytes_pruned: pruned as u64,
        perplexity: (nll / tokens as f64).exp(),
        retained_per_head: retained as f64 / (count * (cfg.n_layers * cfg.n_heads) as f64),
        scored_tokens: tokens as u64,
    })
}

/// Perplexity of `windows` under `policy`.
pub fn perplexity(model: &Model, windows: &[Window], policy: &PolicySpec, par: Parallelism) -> Result<f64> {
    Ok(evaluate(model, windows, policy, par)?.perplexity)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrendPoint {
    pub retention: f64,
    pub perplexity: f64,
}

/// Perplexity as heavy-hitter retention grows from diagonal-only (0) to
/// full (1).
pub fn retention_trend(
    model: &Model,
    windows: &[Window],
    fractions: &[f64],
    par: Parallelism,
) -> Result<Vec<TrendPoint>> {
    let m = prompt_len(
        windows
            .first()
            .ok_or_else(|| Error::contract("evaluation corpus has no windows"))?
            .input
            .len(),
    );
    fractions
        .iter()
        .map(|&f| {
            let budget = matched_budget(1.0 - f, m);
            let policy = PolicySpec::H2o { budget, window: 0 };
            Ok(TrendPoint {
                retention: f,
                perplexity: perplexity(model, windows, &policy, par)?,
            })
        })
        .collect()
}

/// Consecutive points where more retention gave higher perplexity.
pub fn trend_violations(points: &[TrendPoint]) -> usize {
    points
        .windows(2)
        .filter(|w| w[1].perplexity > w[0].perplexity)
        .count()
}
