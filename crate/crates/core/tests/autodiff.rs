//! Every differentiable op against central finite differences.

use std::sync::Arc;

use gatedkv::tensor::{GateCell, Graph, Tensor, Var};
use proptest::prelude::*;

const STEP: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Builds `sum(op(inputs) ⊙ weights)` on a fresh graph.
type Build = dyn Fn(&mut Graph, &[Var]) -> Var;

fn scalar_loss(inputs: &[Tensor], build: &Build) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let out = build(&mut g, &vars);
    g.value(out).item()
}

fn check(inputs: &[Tensor], build: &Build) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &vars);
    g.backward(out).unwrap();
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= STEP;
            let numeric = (scalar_loss(&plus, build) - scalar_loss(&minus, build)) / (2.0 * STEP);
            assert!(
                rel_err(analytic[i], numeric) <= TOL,
                "input {k} index {i}: analytic {} numeric {numeric}",
                analytic[i]
            );
        }
    }
}

/// Weighted sum so every output element has a distinct sensitivity.
fn weighted(g: &mut Graph, x: Var) -> Var {
    let t = g.value(x).clone();
    let w: Vec<f64> = (0..t.numel()).map(|i| 0.3 + 0.17 * ((i * 7 % 11) as f64)).collect();
    let w = g.constant(Tensor::new(t.shape().to_vec(), w).unwrap());
    let p = g.mul(x, w).unwrap();
    g.sum(p)
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-1.5f64..1.5, rows * cols)
        .prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul(a in matrix(3, 4), b in matrix(4, 2)) {
        check(&[a, b], &|g, v| { let m = g.matmul(v[0], v[1]).unwrap(); weighted(g, m) });
    }

    #[test]
    fn matmul_nt(a in matrix(3, 4), b in matrix(2, 4)) {
        check(&[a, b], &|g, v| { let m = g.matmul_nt(v[0], v[1]).unwrap(); weighted(g, m) });
    }

    #[test]
    fn transpose(a in matrix(3, 2)) {
        check(&[a], &|g, v| { let m = g.transpose(v[0]); weighted(g, m) });
    }

    #[test]
    fn add_sub_mul(a in matrix(2, 3), b in matrix(2, 3)) {
        check(&[a.clone(), b.clone()], &|g, v| { let m = g.add(v[0], v[1]).unwrap(); weighted(g, m) });
        check(&[a.clone(), b.clone()], &|g, v| { let m = g.sub(v[0], v[1]).unwrap(); weighted(g, m) });
        check(&[a, b], &|g, v| { let m = g.mul(v[0], v[1]).unwrap(); weighted(g, m) });
    }

    #[test]
    fn add_row(a in matrix(3, 4), b in matrix(1, 4)) {
        check(&[a, b], &|g, v| { let m = g.add_row(v[0], v[1]).unwrap(); weighted(g, m) });
    }

    #[test]
    fn scalar_ops(a in matrix(2, 3)) {
        let c = Tensor::full(&[2, 3], 0.25);
        check(&[a.clone()], &move |g, v| { let m = g.add_const(v[0], &c).unwrap(); weighted(g, m) });
        check(&[a.clone()], &|g, v| { let m = g.scale(v[0], -1.7); weighted(g, m) });
        check(&[a.clone()], &|g, v| { let m = g.add_scalar(v[0], 0.9); weighted(g, m) });
        check(&[a.clone()], &|g, v| { let m = g.mean(v[0]); g.scale(m, 2.0) });
        check(&[a], &|g, v| g.sum(v[0]));
    }

    #[test]
    fn activations(a in matrix(3, 3)) {
        check(&[a.clone()], &|g, v| { let m = g.sigmoid(v[0]); weighted(g, m) });
        check(&[a], &|g, v| { let m = g.silu(v[0]); weighted(g, m) });
    }

    #[test]
    fn abs_away_from_kink(a in matrix(2, 3)) {
        let shifted: Vec<f64> = a.data().iter().map(|x| if x.abs() < 0.01 { x + 0.05 } else { *x }).collect();
        let a = Tensor::new(vec![2, 3], shifted).unwrap();
        check(&[a], &|g, v| { let m = g.abs(v[0]); weighted(g, m) });
    }

    #[test]
    fn rms_norm(x in matrix(3, 5), w in matrix(1, 5)) {
        let w = Tensor::new(vec![5], w.into_data()).unwrap();
        check(&[x, w], &|g, v| { let m = g.rms_norm(v[0], v[1]).unwrap(); weighted(g, m) });
    }

    #[test]
    fn softmax_with_mask(a in matrix(4, 4)) {
        let mask = Tensor::new(
            vec![4, 4],
            (0..16).map(|i| if i % 4 <= i / 4 { 0.0 } else { f64::NEG_INFINITY }).collect(),
        ).unwrap();
        check(&[a], &move |g, v| {
            let s = g.add_const(v[0], &mask).unwrap();
            let m = g.softmax_rows(s).unwrap();
            weighted(g, m)
        });
    }

    #[test]
    fn gather_and_cross_entropy(table in matrix(5, 3), logits in matrix(4, 6)) {
        check(&[table], &|g, v| { let m = g.gather_rows(v[0], &[4, 0, 4, 2]).unwrap(); weighted(g, m) });
        check(&[logits], &|g, v| g.cross_entropy(v[0], &[1, 5, 0, 1]).unwrap());
    }

    #[test]
    fn concat_and_slice(a in matrix(3, 2), b in matrix(3, 3)) {
        check(&[a, b], &|g, v| {
            let c = g.concat_cols(&[v[0], v[1]]).unwrap();
            let s = g.slice_cols(c, 1, 3).unwrap();
            weighted(g, s)
        });
    }

    #[test]
    fn expand_gate(gate in matrix(4, 2)) {
        let cells: Arc<[GateCell]> = gatedkv::gate::gate_cells(4, 1);
        check(&[gate], &move |g, v| {
            let e = g.expand_gate(v[0], 1, Arc::clone(&cells)).unwrap();
            weighted(g, e)
        });
    }
}

#[test]
fn straight_through_passes_soft_gradient() {
    // The node's value ignores the soft input, so finite differences of the
    // forward value are zero; the contract is identity to `soft` instead.
    let mut g = Graph::new();
    let s = g.leaf(Tensor::vector(vec![0.2, 0.7, -0.4]), true);
    let st = g.straight_through(s, Tensor::vector(vec![0.0, 1.0, 0.0])).unwrap();
    assert_eq!(g.value(st).data(), &[0.0, 1.0, 0.0]);
    let l = weighted(&mut g, st);
    g.backward(l).unwrap();
    let expect: Vec<f64> = (0..3).map(|i| 0.3 + 0.17 * ((i * 7 % 11) as f64)).collect();
    assert_eq!(g.grad(s).unwrap(), expect.as_slice());
}
