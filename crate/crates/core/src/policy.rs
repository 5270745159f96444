//! Baseline eviction policies: which prefill positions each head keeps.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `{n - window, …, n - 1}`.
pub fn apply_local(n: usize, window: usize) -> Result<BTreeSet<usize>> {
    if window == 0 {
        return Err(Error::contract("local window must be at least 1"));
    }
    Ok((n.saturating_sub(window)..n).collect())
}

/// Attention sinks `{0, …, sinks - 1}` plus the local window.
pub fn apply_streaming_llm(n: usize, sinks: usize, window: usize) -> Result<BTreeSet<usize>> {
    if sinks == 0 && window == 0 {
        return Err(Error::contract("streaming_llm needs sinks or a window"));
    }
    Ok((0..sinks.min(n)).chain(n.saturating_sub(window)..n).collect())
}

/// Column sums of a post-softmax attention matrix.
pub fn column_scores(attention: &Tensor) -> Vec<f64> {
    let n = attention.cols();
    let mut score = vec![0.0; n];
    for j in 0..attention.rows() {
        for (s, a) in score.iter_mut().zip(attention.row(j)) {
            *s += a;
        }
    }
    score
}

/// Heavy-hitter selection for one head: the `window` latest positions plus
/// the best column sums until `budget` is reached. Ties go to the lower
/// position.
pub fn apply_h2o_head(attention: &Tensor, budget: usize, window: usize) -> Result<BTreeSet<usize>> {
    let n = attention.cols();
    if !attention.is_matrix() || attention.rows() != n {
        return Err(Error::Shape {
            op: "apply_h2o",
            lhs: attention.shape().to_vec(),
            rhs: vec![n, n],
        });
    }
    if budget < window {
        return Err(Error::contract(format!("h2o budget {budget} below window {window}")));
    }
    if budget > n {
        return Err(Error::contract(format!("h2o budget {budget} exceeds sequence {n}")));
    }
    let score = column_scores(attention);
    let recent = n.saturating_sub(window);
    let mut keep: BTreeSet<usize> = (recent..n).collect();
    let mut rest: Vec<usize> = (0..recent).collect();
    rest.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
    keep.extend(rest.into_iter().take(budget - keep.len()));
    Ok(keep)
}

/// Per-head heavy-hitter selection over an `[head]` list of `n×n` matrices.
pub fn apply_h2o(attention: &[Tensor], budget: usize, window: usize) -> Result<Vec<BTreeSet<usize>>> {
    attention
        .iter()
        .map(|a| apply_h2o_head(a, budget, window))
        .collect()
}

/// Uniformly random `budget`-subset of `0..n`.
pub fn apply_random(n: usize, budget: usize, rng: &mut ChaCha8Rng) -> BTreeSet<usize> {
    sample(rng, n, budget.min(n)).into_iter().collect()
}

/// Prefill-time eviction policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicySpec {
    /// Keep everything.
    None,
    /// Flags from the model's own attention gates.
    AttentionGate,
    StreamingLlm { sinks: usize, window: usize },
    H2o { budget: usize, window: usize },
    Local { window: usize },
    /// `budget` positions per head drawn uniformly; a control, not a method.
    Random { budget: usize, seed: u64 },
}

impl PolicySpec {
    pub fn name(&self) -> &'static str {
        match self {
            PolicySpec::None => "none",
            PolicySpec::AttentionGate => "ag",
            PolicySpec::StreamingLlm { .. } => "streaming_llm",
            PolicySpec::H2o { .. } => "h2o",
            PolicySpec::Local { .. } => "local",
            PolicySpec::Random { .. } => "random",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            PolicySpec::StreamingLlm { sinks: 0, window: 0 } => {
                Err(Error::config("policy", "streaming_llm needs sinks or a window"))
            }
            PolicySpec::H2o { budget, window } if budget < window => {
                Err(Error::config("policy", "h2o budget must be at least the window"))
            }
            PolicySpec::Local { window: 0 } => Err(Error::config("policy", "local window must be >= 1")),
            _ => Ok(()),
        }
    }

    /// Retained prefill positions `[layer][head]` for a prompt of length `n`.
    /// `attention` (`[layer][head]`, unevicted prefill weights) is required by
    /// H2O only. `AttentionGate` and `None` keep everything here; gate-driven
    /// pruning happens inside prefill.
    pub fn retained(
        &self,
        n: usize,
        n_layers: usize,
        n_heads: usize,
        attention: Option<&[Vec<Tensor>]>,
    ) -> Result<Vec<Vec<Vec<usize>>>> {
        let uniform = |set: BTreeSet<usize>| {
            let v: Vec<usize> = set.into_iter().collect();
            vec![vec![v; n_heads]; n_layers]
        };
        Ok(match *self {
            PolicySpec::None | PolicySpec::AttentionGate => uniform((0..n).collect()),
            PolicySpec::StreamingLlm { sinks, window } => uniform(apply_streaming_llm(n, sinks, window)?),
            PolicySpec::Local { window } => uniform(apply_local(n, window)?),
            PolicySpec::H2o { budget, window } => {
                let attention =
                    attention.ok_or_else(|| Error::contract("h2o needs prefill attention"))?;
                attention
                    .iter()
                    .map(|layer| {
                        apply_h2o(layer, budget.min(n), window.min(n))
                            .map(|sets| sets.into_iter().map(|s| s.into_iter().collect()).collect())
                    })
                    .collect::<Result<_>>()?
            }
            PolicySpec::Random { budget, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..n_layers)
                    .map(|_| {
                        (0..n_heads)
                            .map(|_| apply_random(n, budget, &mut rng).into_iter().collect())
                            .collect()
                    })
                    .collect()
            }
        })
    }
}

/// Splits a retained-count budget into sinks and window the way the
/// StreamingLLM baseline uses it: `min(sinks, budget)` sinks, rest window.
pub fn streaming_split(budget: usize, sinks: usize) -> (usize, usize) {
    let s = sinks.min(budget);
    (s, budget - s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    #[test]
    fn local_examples() {
        assert_eq!(apply_local(10, 3).unwrap(), set(&[7, 8, 9]));
        assert_eq!(apply_local(4, 9).unwrap(), set(&[0, 1, 2, 3]));
        assert_eq!(apply_local(1, 1).unwrap(), set(&[0]));
        assert!(apply_local(5, 0).is_err());
    }

    #[test]
    fn streaming_examples() {
        assert_eq!(apply_streaming_llm(10, 2, 3).unwrap(), set(&[0, 1, 7, 8, 9]));
        assert_eq!(apply_streaming_llm(4, 3, 3).unwrap(), set(&[0, 1, 2, 3]));
        assert_eq!(apply_streaming_llm(9, 0, 4).unwrap(), apply_local(9, 4).unwrap());
        assert!(apply_streaming_llm(9, 0, 0).is_err());
    }

    #[test]
    fn h2o_uniform_causal_prefers_early_columns() {
        let n = 6;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|j| (0..n).map(|t| if t <= j { 1.0 / (j + 1) as f64 } else { 0.0 }).collect())
            .collect();
        let a = Tensor::from_rows(&rows).unwrap();
        assert_eq!(apply_h2o_head(&a, 3, 0).unwrap(), set(&[0, 1, 2]));
    }

    #[test]
    fn h2o_one_hot_column_survives() {
        let n = 6;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|j| (0..n).map(|t| if t == 3.min(j) { 1.0 } else { 0.0 }).collect())
            .collect();
        let a = Tensor::from_rows(&rows).unwrap();
        for window in 0..3 {
            assert!(apply_h2o_head(&a, 1 + window, window).unwrap().contains(&3));
        }
    }

    #[test]
    fn h2o_budget_below_window_errors() {
        let a = Tensor::zeros(&[4, 4]);
        assert!(matches!(apply_h2o_head(&a, 1, 2), Err(Error::Contract(_))));
    }

    #[test]
    fn random_is_seeded() {
        let p = PolicySpec::Random { budget: 3, seed: 9 };
        let a = p.retained(10, 2, 2, None).unwrap();
        assert_eq!(a, p.retained(10, 2, 2, None).unwrap());
        assert!(a.iter().flatten().all(|s| s.len() == 3));
    }

    #[test]
    fn policy_json_is_tagged() {
        let p: PolicySpec = serde_json::from_str(r#"{"kind":"streaming_llm","sinks":4,"window":8}"#).unwrap();
        assert_eq!(p, PolicySpec::StreamingLlm { sinks: 4, window: 8 });
    }
}
