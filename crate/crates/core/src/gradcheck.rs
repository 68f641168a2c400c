//! Central finite-difference gradient checking.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::nn::Mode;
use crate::tensor::Tensor;
use crate::zoo::{Batch, Network};

/// Central differences of `f` around `x` with step `h`.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Norm-wise relative error `‖a − n‖ / (‖a‖ + ‖n‖)`; zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, b)| a - b));
    let scale = norm(&mut analytic.iter().copied()) + norm(&mut numeric.iter().copied());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Relative error between backpropagated and finite-difference gradients of
/// the scalar built by `build` with respect to every element of `inputs`.
pub fn check_graph(
    inputs: &[Tensor],
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
    h: f64,
) -> Result<f64> {
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
        let root = build(&mut g, &vars)?;
        Ok(g.value(root).item())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = build(&mut g, &vars)?;
    g.backward(root)?;
    let mut analytic = Vec::new();
    for (v, t) in vars.iter().zip(inputs) {
        match g.grad(*v) {
            Some(gr) => analytic.extend_from_slice(gr.data()),
            None => analytic.extend(std::iter::repeat_n(0.0, t.len())),
        }
    }
    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
    let mut failure = None;
    let numeric = numeric_gradient(
        |x| {
            let mut off = 0;
            let vals: Vec<Tensor> = inputs
                .iter()
                .map(|t| {
                    let part = x[off..off + t.len()].to_vec();
                    off += t.len();
                    Tensor::new(t.shape().to_vec(), part).expect("same shape")
                })
                .collect();
            eval(&vals).unwrap_or_else(|e| {
                failure = Some(e);
                f64::NAN
            })
        },
        &flat,
        h,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(relative_error(&analytic, &numeric))
}

/// Relative gradient error of a network's loss over all trainable
/// parameters. Dropout masks are replayed from `seed` on every evaluation.
pub fn check_network(net: &Network, batches: &[&Batch], labels: &[usize], mode: Mode, seed: u64, h: f64) -> Result<f64> {
    let (_, grads) = net.loss_and_grads(batches, labels, mode, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let mut probe = net.clone();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (i, g) in grads.iter().enumerate() {
        let p = &net.params.iter().nth(i).expect("param");
        if !p.trainable {
            continue;
        }
        let n = p.value.len();
        match g {
            Some(g) => analytic.extend_from_slice(g.data()),
            None => analytic.extend(std::iter::repeat_n(0.0, n)),
        }
        for j in 0..n {
            let orig = p.value.data()[j];
            let mut at = |x: f64| -> Result<f64> {
                probe.params.iter_mut().nth(i).expect("param").value.data_mut()[j] = x;
                probe.loss(batches, labels, mode, &mut ChaCha8Rng::seed_from_u64(seed))
            };
            let up = at(orig + h)?;
            let down = at(orig - h)?;
            at(orig)?;
            numeric.push((up - down) / (2.0 * h));
        }
    }
    Ok(relative_error(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_derivative() {
        let g = numeric_gradient(|x| x[0].powi(3) + 2.0 * x[1], &[2.0, 5.0], 1e-5);
        assert!((g[0] - 12.0).abs() < 1e-8);
        assert!((g[1] - 2.0).abs() < 1e-8);
        assert!(relative_error(&[12.0, 2.0], &g) < 1e-9);
    }
}
