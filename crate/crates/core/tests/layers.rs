mod common;

use std::rc::Rc;

use common::{layer_error, randn, rng, TOL};
use emofuse::autodiff::{same_padding, sigmoid};
use emofuse::nn::{
    dropout, Activation, AttentionDecoder, BiLstm, Conv1d, Conv2d, Ctx, Dense, Embedding, Init, Lstm, LstmCell, Mode,
    OptimizerKind, ParamStore, Seq,
};
use emofuse::{Graph, Result, Tensor, Var};

const OPT: OptimizerKind = OptimizerKind::Adam;

fn assert_small(name: &str, errs: impl Iterator<Item = f64>) {
    for (seed, e) in errs.enumerate() {
        assert!(e < TOL, "{name} seed {seed}: relative error {e:e}");
    }
}

/// Forward pass in inference mode; returns the value of the output.
fn eval(store: &ParamStore, inputs: &[Tensor], f: impl FnOnce(&mut Ctx, &[Var]) -> Result<Var>) -> Tensor {
    let mut g = Graph::new();
    let vars = store.bind(&mut g);
    let ins: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let mut r = rng(0);
    let mut ctx = Ctx {
        graph: &mut g,
        vars: &vars,
        mode: Mode::Infer,
        rng: &mut r,
    };
    let out = f(&mut ctx, &ins).unwrap();
    g.value(out).clone()
}

fn build<T>(seed: u64, f: impl FnOnce(&mut ParamStore, &mut Init) -> Result<T>) -> (ParamStore, T) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let layer = f(&mut store, &mut Init { rng: &mut r }).unwrap();
    (store, layer)
}

fn lengths(l: &[usize]) -> Option<Rc<[usize]>> {
    Some(l.to_vec().into())
}

#[test]
fn dense_gradients() {
    for act in [Activation::Relu, Activation::None] {
        assert_small(
            "dense",
            (0..5).map(|s| {
                let (store, d) = build(s, |st, i| Dense::new(st, i, "d", 10, 6, act, OPT));
                layer_error(s, |st, _| {
                    let _: () = *st = store;
                    Ok(())
                }, &[randn(&[4, 10], s)], |c, x| d.forward(c, x[0]))
            }),
        );
    }
}

#[test]
fn lstm_gradients() {
    for (lens, seq) in [(None, true), (None, false), (Some([5, 3]), true), (Some([2, 5]), false)] {
        assert_small(
            "lstm",
            (0..5).map(|s| {
                let (store, l) = build(s, |st, i| Lstm::new(st, i, "l", 3, 4, seq, OPT));
                layer_error(s, |st, _| {
                    let _: () = *st = store;
                    Ok(())
                }, &[randn(&[2, 5, 3], s)], |c, x| {
                    let input = Seq {
                        var: x[0],
                        lengths: lens.and_then(|l| lengths(&l)),
                    };
                    Ok(l.forward(c, &input)?.var)
                })
            }),
        );
    }
}

#[test]
fn bilstm_gradients() {
    for seq in [true, false] {
        assert_small(
            "bilstm",
            (0..5).map(|s| {
                let (store, l) = build(s, |st, i| BiLstm::new(st, i, "b", 3, 2, seq, OPT));
                layer_error(s, |st, _| {
                    let _: () = *st = store;
                    Ok(())
                }, &[randn(&[2, 4, 3], s)], |c, x| {
                    let input = Seq {
                        var: x[0],
                        lengths: lengths(&[4, 2]),
                    };
                    Ok(l.forward(c, &input)?.var)
                })
            }),
        );
    }
}

#[test]
fn attention_gradients() {
    for (bi, lens) in [(false, None), (true, None), (true, Some([3, 2]))] {
        assert_small(
            "attention",
            (0..5).map(|s| {
                let (store, a) = build(s, |st, i| AttentionDecoder::new(st, i, "a", 4, 3, bi, OPT));
                layer_error(s, |st, _| {
                    let _: () = *st = store;
                    Ok(())
                }, &[randn(&[2, 3, 4], s)], |c, x| {
                    let enc = Seq {
                        var: x[0],
                        lengths: lens.and_then(|l| lengths(&l)),
                    };
                    a.forward(c, &enc)
                })
            }),
        );
    }
}

#[test]
fn conv_gradients() {
    assert_small(
        "conv2d",
        (0..5).map(|s| {
            let (mut store, c2) = build(s, |st, i| Conv2d::new(st, i, "c", 2, 3, 3, 2, Activation::Relu, OPT));
            // Nonzero biases so every bias path is exercised.
            for p in store.iter_mut().filter(|p| p.name.ends_with("bias")) {
                p.value = randn(p.value.shape(), s + 77);
            }
            let out = eval(&store, &[randn(&[1, 8, 8, 2], s)], |c, x| c2.forward(c, x[0]));
            assert_eq!(out.shape(), &[1, 4, 4, 3]);
            layer_error(s, |st, _| {
                let _: () = *st = store;
                Ok(())
            }, &[randn(&[1, 8, 8, 2], s)], |c, x| c2.forward(c, x[0]))
        }),
    );
    assert_small(
        "conv1d",
        (0..5).map(|s| {
            let (store, c1) = build(s, |st, i| Conv1d::new(st, i, "c", 3, 4, 3, 1, Activation::None, OPT));
            layer_error(s, |st, _| {
                let _: () = *st = store;
                Ok(())
            }, &[randn(&[2, 7, 3], s)], |c, x| c1.forward(c, x[0]))
        }),
    );
}

#[test]
fn embedding_gradients() {
    assert_small(
        "embedding",
        (0..5).map(|s| {
            let (store, e) = build(s, |st, i| Embedding::new(st, i, "e", 6, 3, OPT));
            let ids = [Some(0), Some(5), Some(0), Some(2), None, None];
            layer_error(s, |st, _| {
                let _: () = *st = store;
                Ok(())
            }, &[], |c, _| Ok(e.forward(c, &ids, 2)?.var))
        }),
    );
}

#[test]
fn softmax_xent_gradients_and_values() {
    assert_small(
        "softmax_xent",
        (0..5).map(|s| {
            layer_error(s, |_, _| Ok(()), &[randn(&[3, 4], s)], |c, x| c.graph.softmax_xent(x[0], &[2, 0, 3]))
        }),
    );
    let mut g = Graph::new();
    let uniform = g.constant(Tensor::full(vec![2, 4], 0.7));
    let l = g.softmax_xent(uniform, &[1, 3]).unwrap();
    assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
    let confident = g.constant(Tensor::new(vec![1, 4], vec![0.0, 1000.0, 0.0, 0.0]).unwrap());
    let l = g.softmax_xent(confident, &[1]).unwrap();
    assert!(g.value(l).item().abs() < 1e-12);
}

#[test]
fn lstm_single_step_by_hand() {
    let (mut store, cell) = build(0, |st, i| LstmCell::new(st, i, "c", 1, 1, OPT));
    let set = |store: &mut ParamStore, name: &str, v: Vec<f64>| {
        let p = store.iter_mut().find(|p| p.name == name).unwrap();
        p.value = Tensor::new(p.value.shape().to_vec(), v).unwrap();
    };
    let (wx, bias) = ([0.5, -0.3, 0.8, 1.2], [0.1, 1.0, -0.2, 0.05]);
    set(&mut store, "c.wx", wx.to_vec());
    set(&mut store, "c.bias", bias.to_vec());
    let x = 0.7;
    let z: Vec<f64> = (0..4).map(|k| wx[k] * x + bias[k]).collect();
    let c = sigmoid(z[0]) * z[2].tanh();
    let want = sigmoid(z[3]) * c.tanh();
    let out = eval(&store, &[Tensor::new(vec![1, 1, 1], vec![x]).unwrap()], |ctx, v| {
        Ok(cell.run(ctx, &Seq::dense(v[0]), false)?.1)
    });
    assert!((out.item() - want).abs() < 1e-15);
}

#[test]
fn forget_bias_starts_at_one() {
    let (store, _) = build(0, |st, i| LstmCell::new(st, i, "c", 2, 3, OPT));
    let b = store.find("c.bias").unwrap().value.data().to_vec();
    assert_eq!(b, [0., 0., 0., 1., 1., 1., 0., 0., 0., 0., 0., 0.]);
}

fn reverse_time(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (b, t, d) = (s[0], s[1], s[2]);
    Tensor::from_fn(s.to_vec(), |i| {
        let (bi, ti, di) = (i / (t * d), (i / d) % t, i % d);
        x.data()[(bi * t + (t - 1 - ti)) * d + di]
    })
    .reshape(vec![b, t, d])
    .unwrap()
}

#[test]
fn bilstm_is_symmetric_under_reversal_with_swapped_cells() {
    let (store, bl) = build(5, |st, i| BiLstm::new(st, i, "b", 3, 2, true, OPT));
    let mut swapped = store.clone();
    for p in swapped.iter_mut() {
        let other = if p.name.contains(".fwd.") { p.name.replace(".fwd.", ".bwd.") } else { p.name.replace(".bwd.", ".fwd.") };
        p.value = store.find(&other).unwrap().value.clone();
    }
    let x = randn(&[2, 4, 3], 8);
    let a = eval(&store, std::slice::from_ref(&x), |c, v| Ok(bl.forward(c, &Seq::dense(v[0]))?.var));
    let b = eval(&swapped, &[reverse_time(&x)], |c, v| Ok(bl.forward(c, &Seq::dense(v[0]))?.var));
    for bi in 0..2 {
        for t in 0..4 {
            for u in 0..4 {
                let mirrored = b.data()[(bi * 4 + (3 - t)) * 4 + (u + 2) % 4];
                assert!((a.data()[(bi * 4 + t) * 4 + u] - mirrored).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn padded_sample_matches_unpadded_run() {
    let (store, l) = build(2, |st, i| Lstm::new(st, i, "l", 3, 4, false, OPT));
    let x = randn(&[2, 6, 3], 1);
    let padded = eval(&store, std::slice::from_ref(&x), |c, v| {
        Ok(l.forward(c, &Seq { var: v[0], lengths: lengths(&[6, 3]) })?.var)
    });
    let short = Tensor::new(vec![1, 3, 3], (0..3).flat_map(|t| x.data()[(6 + t) * 3..(6 + t) * 3 + 3].to_vec()).collect()).unwrap();
    let alone = eval(&store, &[short], |c, v| Ok(l.forward(c, &Seq::dense(v[0]))?.var));
    for u in 0..4 {
        assert!((padded.data()[4 + u] - alone.data()[u]).abs() < 1e-12);
    }
}

fn attention_weights(a: &AttentionDecoder, store: &ParamStore, enc: Tensor) -> Vec<Tensor> {
    let mut g = Graph::new();
    let vars = store.bind(&mut g);
    let e = g.constant(enc);
    let mut r = rng(0);
    let mut ctx = Ctx {
        graph: &mut g,
        vars: &vars,
        mode: Mode::Infer,
        rng: &mut r,
    };
    let (_, w) = a.forward_with_weights(&mut ctx, &Seq::dense(e)).unwrap();
    w.iter().map(|v| g.value(*v).clone()).collect()
}

#[test]
fn attention_weight_properties() {
    let (store, a) = build(4, |st, i| AttentionDecoder::new(st, i, "a", 4, 3, true, OPT));
    for w in attention_weights(&a, &store, randn(&[2, 1, 4], 1)) {
        assert!(w.data().iter().all(|&v| v == 1.0));
    }
    let same = Tensor::from_fn(vec![2, 5, 4], |i| (i % 4) as f64 * 0.3 - 0.2);
    for w in attention_weights(&a, &store, same) {
        assert!(w.data().iter().all(|&v| (v - 0.2).abs() < 1e-12));
    }
    for w in attention_weights(&a, &store, randn(&[3, 6, 4], 9)) {
        for r in 0..3 {
            assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

/// Zero-padded convolution written out index by index.
fn conv_oracle(x: &[f64], n: usize, k: &[f64], stride: usize) -> Vec<f64> {
    let out = n.div_ceil(stride);
    let total = ((out - 1) * stride + k.len()).saturating_sub(n);
    let pad = total / 2;
    (0..out)
        .map(|o| {
            (0..k.len())
                .map(|j| {
                    let pos = (o * stride + j) as isize - pad as isize;
                    if pos >= 0 && (pos as usize) < n { x[pos as usize] * k[j] } else { 0.0 }
                })
                .sum()
        })
        .collect()
}

#[test]
fn same_padding_extents_and_values_match_oracle() {
    for n in 1..=64 {
        for stride in 1..=3 {
            assert_eq!(same_padding(n, 3, stride).0, n.div_ceil(stride));
            let (mut store, conv) = build(n as u64, |st, i| Conv2d::new(st, i, "c", 1, 1, 3, stride, Activation::None, OPT));
            let kernel = store.find("c.weight").unwrap().value.data().to_vec();
            // A 3x3 kernel whose outer rows are zero acts along the width only.
            let k = [kernel[3], kernel[4], kernel[5]];
            let w = store.iter_mut().find(|p| p.name == "c.weight").unwrap();
            w.value = Tensor::new(vec![3, 3, 1, 1], vec![0., 0., 0., k[0], k[1], k[2], 0., 0., 0.]).unwrap();
            let x = randn(&[1, 1, n, 1], n as u64 + 100);
            let y = eval(&store, std::slice::from_ref(&x), |c, v| conv.forward(c, v[0]));
            let h_out = 1usize.div_ceil(stride);
            assert_eq!(y.shape(), &[1, h_out, n.div_ceil(stride), 1]);
            let want = conv_oracle(x.data(), n, &k, stride);
            for (a, b) in y.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "n {n} stride {stride}");
            }
        }
    }
}

#[test]
fn delta_kernel_is_identity() {
    let (mut store, conv) = build(0, |st, i| Conv2d::new(st, i, "c", 2, 2, 3, 1, Activation::None, OPT));
    let w = store.iter_mut().find(|p| p.name == "c.weight").unwrap();
    w.value = Tensor::from_fn(vec![3, 3, 2, 2], |i| {
        let (ky, kx, ci, co) = (i / 12, (i / 4) % 3, (i / 2) % 2, i % 2);
        if ky == 1 && kx == 1 && ci == co { 1.0 } else { 0.0 }
    });
    let x = randn(&[2, 5, 7, 2], 3);
    let y = eval(&store, std::slice::from_ref(&x), |c, v| conv.forward(c, v[0]));
    assert_eq!(y, x);
}

fn dropout_out(x: &Tensor, p: f64, mode: Mode, seed: u64) -> Tensor {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let mut r = rng(seed);
    let mut ctx = Ctx {
        graph: &mut g,
        vars: &[],
        mode,
        rng: &mut r,
    };
    let out = dropout(&mut ctx, v, p).unwrap();
    g.value(out).clone()
}

#[test]
fn dropout_keeps_expected_fraction_and_is_identity_when_off() {
    let x = Tensor::full(vec![100_000], 1.0);
    for p in [0.1, 0.2, 0.5] {
        let y = dropout_out(&x, p, Mode::Train, 11);
        let kept = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / 1e5;
        assert!((kept - (1.0 - p)).abs() < 0.01, "p {p}: kept {kept}");
        assert!(y.data().iter().all(|&v| v == 0.0 || (v - 1.0 / (1.0 - p)).abs() < 1e-12));
    }
    let x = randn(&[50, 20], 1);
    assert_eq!(dropout_out(&x, 0.4, Mode::Infer, 1).to_le_bytes(), x.to_le_bytes());
    assert_eq!(dropout_out(&x, 0.0, Mode::Train, 1).to_le_bytes(), x.to_le_bytes());
}

#[test]
fn dropout_rejects_bad_probability() {
    let mut g = Graph::new();
    let v = g.constant(Tensor::zeros(vec![2]));
    let mut r = rng(0);
    let mut ctx = Ctx {
        graph: &mut g,
        vars: &[],
        mode: Mode::Train,
        rng: &mut r,
    };
    assert!(dropout(&mut ctx, v, 1.0).is_err());
    assert!(dropout(&mut ctx, v, -0.1).is_err());
}
