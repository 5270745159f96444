//! Analytic FLOPs terms and exact multiply-accumulate counts.

mod common;

use common::rng;
use gatedkv::gate::{build_mask, LayerFlags};
use gatedkv::metrics::{flops_model, mask_macs, sparse_attention, BP};
use gatedkv::tensor::Tensor;
use rand::Rng;

/// Same terms computed with percent scaling, then rescaled.
fn percent_oracle(n: u128, dk: u128, h: u128, dkg: u128, hg: u128, t_pct: u128) -> (u128, u128, u128) {
    let ag = n * n * dkg * hg * 100;
    let mha = n * n * dk * h * (100 - t_pct);
    let k = BP as u128 / 100;
    (ag * k, mha * k, ag.max(mha) * k)
}

#[test]
fn dominant_terms_over_grid() {
    for n in [1u64, 7, 64, 1024] {
        for (dk, h) in [(16u64, 4u64), (128, 32), (64, 8)] {
            for (dkg, hg) in [(0u64, 0u64), (16, 2), (128, 4), (32, 1)] {
                for t in (0..=100).step_by(5) {
                    let f = flops_model(n, dk, h, dkg, hg, t as u32 * 100).unwrap();
                    let (ag, mha, combined) =
                        percent_oracle(n as u128, dk as u128, h as u128, dkg as u128, hg as u128, t);
                    assert_eq!((f.ag, f.mha, f.combined), (ag, mha, combined));
                }
            }
        }
    }
}

#[test]
fn paper_configuration() {
    let f = flops_model(1024, 128, 32, 128, 4, 5_000).unwrap();
    assert_eq!(f.combined, 1024u128 * 1024 * 2048 * BP as u128);
    let even = flops_model(1024, 128, 32, 128, 4, 8_750).unwrap();
    assert_eq!(even.ag, even.mha);
    let plain = flops_model(1024, 128, 32, 0, 0, 0).unwrap();
    assert_eq!(plain.combined, 1024u128 * 1024 * 128 * 32 * BP as u128);
}

fn count_pairs(n: usize, keep: impl Fn(usize, usize) -> bool) -> u128 {
    (0..n)
        .flat_map(|j| (0..=j).map(move |t| (j, t)))
        .filter(|&(j, t)| keep(j, t))
        .count() as u128
}

#[test]
fn mask_counts_on_eight_tokens() {
    let n = 8;
    let (dk, dv) = (4, 3);
    let width = (dk + dv) as u128;
    let open = build_mask(None, n, 2, 0).unwrap();
    assert_eq!(mask_macs(&open, dk, dv), 2 * width * (n * (n + 1) / 2) as u128);

    let odd = LayerFlags::from_hard(n, 1, (0..n).map(|t| t % 2 == 1).collect()).unwrap();
    let m = build_mask(Some(&odd), n, 1, 0).unwrap();
    let expect = count_pairs(n, |j, t| t == j || t % 2 == 1);
    assert_eq!(mask_macs(&m, dk, dv), width * expect);
    // Evicting the even columns removes every off-diagonal cell below them.
    let removed: usize = (0..n).filter(|t| t % 2 == 0).map(|t| n - 1 - t).sum();
    assert_eq!(expect, 36 - removed as u128);
    assert_eq!(expect, 20);

    let closed = LayerFlags::from_hard(n, 1, vec![false; n]).unwrap();
    let m = build_mask(Some(&closed), n, 1, 0).unwrap();
    assert_eq!(mask_macs(&m, dk, dv), width * n as u128);
}

#[test]
fn measured_macs_equal_mask_counts() {
    let mut r = rng(31);
    let n = 8;
    let rand_t = |r: &mut rand_chacha::ChaCha8Rng, c: usize| {
        Tensor::new(vec![n, c], (0..n * c).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    };
    for trial in 0..20 {
        let hard = (0..n).map(|_| r.gen_bool(0.5)).collect();
        let flags = LayerFlags::from_hard(n, 1, hard).unwrap();
        let mask = build_mask(Some(&flags), n, 1, trial % 3).unwrap();
        let (q, k, v) = (rand_t(&mut r, 4), rand_t(&mut r, 4), rand_t(&mut r, 3));
        let (_, measured) = sparse_attention(&q, &k, &v, &mask, 0).unwrap();
        assert_eq!(measured, mask_macs(&mask, 4, 3));
    }
}
