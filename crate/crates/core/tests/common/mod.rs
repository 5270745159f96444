#![allow(dead_code)]

use gatedkv::corpus::Window;
use gatedkv::gate::LayerFlags;
use gatedkv::{EvictionFlags, GateVariant, ModelConfig, TokenId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny(variant: GateVariant) -> ModelConfig {
    ModelConfig {
        vocab_size: 13,
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_k: 4,
        d_v: 4,
        d_ff: 16,
        gate_heads: 1,
        gate_d_k: 4,
        gate_variant: variant,
        gate_start_layer: usize::from(variant == GateVariant::PrevLayerGate),
        max_seq: 16,
        ..Default::default()
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tokens(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<TokenId> {
    (0..n).map(|_| rng.gen_range(0..vocab as TokenId)).collect()
}

pub fn window(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Window {
    let t = tokens(rng, n + 1, vocab);
    Window {
        input: t[..n].to_vec(),
        target: t[1..].to_vec(),
    }
}

/// Random hard flags for every layer of `cfg`'s shape (ungated layers stay
/// `None`).
pub fn random_flags(rng: &mut ChaCha8Rng, cfg: &ModelConfig, n: usize, p_keep: f64) -> EvictionFlags {
    EvictionFlags {
        layers: (0..cfg.n_layers)
            .map(|l| {
                cfg.is_gated(l).then(|| {
                    let hard = (0..n * cfg.n_heads).map(|_| rng.gen_bool(p_keep)).collect();
                    LayerFlags::from_hard(n, cfg.n_heads, hard).unwrap()
                })
            })
            .collect(),
    }
}

/// `flags` extended with `extra` always-retained positions.
pub fn extend_open(flags: &EvictionFlags, extra: usize) -> EvictionFlags {
    EvictionFlags {
        layers: flags
            .layers
            .iter()
            .map(|lf| {
                lf.as_ref().map(|lf| {
                    let mut hard = lf.hard_values().to_vec();
                    hard.extend(std::iter::repeat(true).take(extra * lf.heads()));
                    LayerFlags::from_hard(lf.len() + extra, lf.heads(), hard).unwrap()
                })
            })
            .collect(),
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
