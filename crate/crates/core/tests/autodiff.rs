mod common;

use common::{probe, randn, H, TOL};
use emofuse::autodiff::softmax_rows;
use emofuse::gradcheck::check_graph;
use emofuse::{Graph, Result, Tensor, Var};
use proptest::prelude::*;

const SEEDS: std::ops::Range<u64> = 0..10;

fn check(name: &str, inputs: impl Fn(u64) -> Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) {
    for seed in SEEDS {
        let ins = inputs(seed);
        let err = check_graph(
            &ins,
            |g, v| {
                let out = f(g, v)?;
                probe(g, out, seed)
            },
            H,
        )
        .unwrap();
        assert!(err < TOL, "{name} seed {seed}: relative error {err:e}");
    }
}

fn positive(shape: &[usize], seed: u64) -> Tensor {
    randn(shape, seed).map(|v| v.abs() + 0.5)
}

#[test]
fn unary_ops() {
    let x = |s| vec![randn(&[3, 4], s)];
    check("relu", x, |g, v| Ok(g.relu(v[0])));
    check("tanh", x, |g, v| Ok(g.tanh(v[0])));
    check("sigmoid", x, |g, v| Ok(g.sigmoid(v[0])));
    check("exp", x, |g, v| Ok(g.exp(v[0])));
    check("scale", x, |g, v| Ok(g.scale(v[0], -2.5)));
    check("log", |s| vec![positive(&[3, 4], s)], |g, v| g.log(v[0]));
}

#[test]
fn binary_ops_with_and_without_broadcast() {
    let same = |s: u64| vec![randn(&[3, 4], s), randn(&[3, 4], s + 50)];
    let bias = |s: u64| vec![randn(&[2, 3, 4], s), randn(&[4], s + 50)];
    check("add", same, |g, v| g.add(v[0], v[1]));
    check("sub", same, |g, v| g.sub(v[0], v[1]));
    check("mul", same, |g, v| g.mul(v[0], v[1]));
    check("add bias", bias, |g, v| g.add(v[0], v[1]));
    check("sub bias", bias, |g, v| g.sub(v[0], v[1]));
    check("mul bias", bias, |g, v| g.mul(v[0], v[1]));
}

#[test]
fn linear_algebra_and_reductions() {
    check("matmul", |s| vec![randn(&[3, 5], s), randn(&[5, 2], s + 50)], |g, v| g.matmul(v[0], v[1]));
    check("sum", |s| vec![randn(&[3, 4], s)], |g, v| {
        let s = g.sum(v[0]);
        g.mul(s, s)
    });
    check("mask", |s| vec![randn(&[3, 4], s)], |g, v| {
        let m = Tensor::from_fn(vec![3, 4], |i| (i % 3) as f64);
        g.mask_apply(v[0], m)
    });
    check("max_axis1", |s| vec![randn(&[2, 5, 3], s)], |g, v| g.max_axis1(v[0]));
}

#[test]
fn shape_ops() {
    let x3 = |s| vec![randn(&[2, 3, 4], s)];
    check("reshape", x3, |g, v| {
        let r = g.reshape(v[0], vec![6, 4])?;
        Ok(g.tanh(r))
    });
    check("flatten", x3, |g, v| {
        let f = g.flatten(v[0])?;
        Ok(g.sigmoid(f))
    });
    check("concat axis 1", |s| vec![randn(&[2, 3], s), randn(&[2, 5], s + 50)], |g, v| g.concat(&[v[0], v[1]], 1));
    check("concat axis 0", |s| vec![randn(&[2, 3], s), randn(&[4, 3], s + 50)], |g, v| g.concat(&[v[0], v[1]], 0));
    check("slice_last", x3, |g, v| g.slice_last(v[0], 1, 2));
    check("select_axis1", x3, |g, v| g.select_axis1(v[0], 2));
    check("stack_axis1", |s| vec![randn(&[2, 4], s), randn(&[2, 4], s + 50)], |g, v| g.stack_axis1(&[v[0], v[1], v[0]]));
    check("expand_axis1", |s| vec![randn(&[2, 4], s)], |g, v| g.expand_axis1(v[0], 3));
}

#[test]
fn softmax_and_attention_ops() {
    check("softmax_last", |s| vec![randn(&[3, 5], s)], |g, v| Ok(g.softmax_last(v[0])));
    check("weighted_sum_axis1", |s| vec![randn(&[2, 3], s), randn(&[2, 3, 4], s + 50)], |g, v| {
        g.weighted_sum_axis1(v[0], v[1])
    });
    check("softmax_xent", |s| vec![randn(&[4, 4], s)], |g, v| g.softmax_xent(v[0], &[0, 3, 1, 1]));
}

#[test]
fn conv_and_gather() {
    for stride in 1..=2 {
        check(
            "conv2d",
            |s| vec![randn(&[2, 5, 4, 2], s), randn(&[3, 3, 2, 3], s + 50), randn(&[3], s + 99)],
            |g, v| g.conv2d(v[0], v[1], v[2], (stride, stride)),
        );
    }
    check("gather", |s| vec![randn(&[4, 3], s)], |g, v| {
        g.gather(v[0], &[Some(1), None, Some(1), Some(3), Some(0), None], &[2, 3])
    });
}

#[test]
fn backward_visits_each_node_once() {
    let mut g = Graph::new();
    let a = g.param(randn(&[2, 2], 1));
    let b = g.param(randn(&[2, 2], 2));
    let c = g.constant(randn(&[2, 2], 3));
    let ab = g.mul(a, b).unwrap();
    let d = g.add(ab, a).unwrap();
    let e = g.mul(d, d).unwrap();
    let f = g.add(e, c).unwrap();
    let root = g.sum(f);
    let _unused = g.tanh(a);
    let stats = g.backward(root).unwrap();
    // a, b, ab, d, e, f, root
    assert_eq!(stats.visited, 7);
}

#[test]
fn gradients_accumulate_until_zeroed() {
    let mut g = Graph::new();
    let x = g.param(Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
    let y = g.mul(x, x).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[4.0, -8.0]);
    g.zero_grad();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0]);
}

#[test]
fn non_scalar_root_is_rejected() {
    let mut g = Graph::new();
    let x = g.param(randn(&[2, 2], 0));
    assert!(g.backward(x).is_err());
}

#[test]
fn shape_errors_carry_both_shapes() {
    let mut g = Graph::new();
    let a = g.param(randn(&[2, 3], 0));
    let b = g.param(randn(&[2, 3], 1));
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn matmul_associativity() {
    for seed in 0..20 {
        let (a, b, c) = (randn(&[3, 3], seed), randn(&[3, 3], seed + 100), randn(&[3, 3], seed + 200));
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        assert!(left.max_abs_diff(&right) < 1e-9);
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..9, scale in 0.1f64..200.0, seed in 0u64..1000) {
        let x = randn(&[rows, cols], seed).map(|v| v * scale);
        let p = softmax_rows(&x);
        for r in 0..rows {
            let s: f64 = p.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(p.row(r).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn bias_broadcast_matches_explicit_tiling(b in 1usize..4, n in 1usize..5, seed in 0u64..1000) {
        let x = randn(&[b, n], seed);
        let bias = randn(&[n], seed + 7);
        let tiled = Tensor::from_fn(vec![b, n], |i| bias.data()[i % n]);
        let mut g = Graph::new();
        let (xv, bv, tv) = (g.constant(x.clone()), g.constant(bias), g.constant(tiled));
        let broadcast = g.add(xv, bv).unwrap();
        let explicit = g.add(xv, tv).unwrap();
        prop_assert_eq!(g.value(broadcast), g.value(explicit));
    }
}
