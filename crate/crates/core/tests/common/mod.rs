#![allow(dead_code)]

use emofuse::gradcheck::check_graph;
use emofuse::nn::{Ctx, Init, Mode, ParamStore};
use emofuse::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape.to_vec(), |_| r.gen_range(-1.0..1.0))
}

/// Sum of `x` weighted by fixed pseudo-random coefficients.
pub fn probe(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let w = g.constant(randn(&shape, seed ^ 0x5eed));
    let y = g.mul(x, w)?;
    Ok(g.sum(y))
}

/// Builds a store with `make`, then checks gradients of a probed layer
/// output with respect to every parameter and every input tensor.
pub fn layer_error(
    seed: u64,
    make: impl FnOnce(&mut ParamStore, &mut Init) -> Result<()>,
    inputs: &[Tensor],
    f: impl Fn(&mut Ctx, &[Var]) -> Result<Var>,
) -> f64 {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    make(&mut store, &mut Init { rng: &mut r }).unwrap();
    let n = store.len();
    let all: Vec<Tensor> = store.iter().map(|p| p.value.clone()).chain(inputs.iter().cloned()).collect();
    check_graph(
        &all,
        |g, vars| {
            let mut r = rng(seed + 1000);
            let mut ctx = Ctx {
                graph: g,
                vars: &vars[..n],
                mode: Mode::Train,
                rng: &mut r,
            };
            let out = f(&mut ctx, &vars[n..])?;
            probe(g, out, seed)
        },
        H,
    )
    .unwrap()
}

use emofuse::zoo::{catalog, Batch, CatalogOptions, InputKind, ModelSpec};

/// Catalog model shrunk for finite-difference checks: widths divided by 64
/// and inputs cut to a few steps and channels.
pub fn small_spec(name: &str) -> ModelSpec {
    let opts = CatalogOptions {
        width_divisor: 64,
        text_dim: 6,
        vocab_size: 6,
        embedding_dim: 3,
        ..CatalogOptions::default()
    };
    let mut spec = catalog(name, &opts).unwrap();
    spec.input_shape = match spec.input {
        InputKind::Tokens => vec![5],
        InputKind::Speech => vec![4, 5],
        InputKind::Text => vec![4, 6],
        _ => vec![6, 5],
    };
    spec.validate().unwrap();
    spec
}

/// Random batch for `spec`; sequence inputs get one full and one shorter sample.
pub fn batch_for(spec: &ModelSpec, b: usize, seed: u64) -> Batch {
    let mut r = rng(seed);
    match spec.input {
        InputKind::Tokens => {
            let t = spec.input_shape[0];
            let rows = match spec.layers[0] {
                emofuse::zoo::LayerSpec::Embedding { rows, .. } => rows,
                _ => unreachable!(),
            };
            let ids = (0..b * t)
                .map(|i| (i % t < t - (i / t) % 2).then(|| r.gen_range(0..rows)))
                .collect();
            Batch::Tokens { ids, batch: b }
        }
        _ => {
            let mut shape = vec![b];
            shape.extend(&spec.input_shape);
            let t = spec.input_shape[0];
            let lengths = (0..b).map(|i| if i % 2 == 0 { t } else { t - 1 }).collect::<Vec<_>>();
            let mut x = randn(&shape, seed);
            let per = x.len() / b;
            let width = per / t;
            for (i, &n) in lengths.iter().enumerate() {
                x.data_mut()[i * per + n * width..(i + 1) * per].fill(0.0);
            }
            Batch::Dense {
                x,
                lengths: Some(lengths),
            }
        }
    }
}

pub fn labels(b: usize, seed: u64) -> Vec<usize> {
    (0..b).map(|i| (i + seed as usize) % 4).collect()
}

/// Moves zero-initialized biases off zero so that no ReLU sits exactly on
/// its kink, where finite differences are undefined.
pub fn jitter_biases(net: &mut emofuse::zoo::Network, seed: u64) {
    let mut r = rng(seed ^ 0xb1a5);
    for p in net.params.iter_mut().filter(|p| p.name.ends_with("bias")) {
        p.value.data_mut().iter_mut().filter(|v| **v == 0.0).for_each(|v| *v = r.gen_range(0.02..0.2));
    }
}
