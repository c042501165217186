//! Central finite-difference gradient checks.

use super::tensor::{no_grad, Tensor};
use crate::error::Result;

/// Norm-wise relative error `‖a − n‖ / max(‖a‖ + ‖n‖, floor)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let an: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / (an + nn).max(1e-12)
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_error: f64,
}

/// Compares the backward pass of `f` against central differences with step
/// `h` for every element of every input. `f` must rebuild its graph from the
/// current input values on each call.
pub fn check_gradients(
    inputs: &[Tensor<f64>],
    h: f64,
    f: impl Fn() -> Result<Tensor<f64>>,
) -> Result<GradCheck> {
    inputs.iter().for_each(|t| t.zero_grad());
    let loss = f()?;
    loss.backward()?;
    let analytic: Vec<f64> = inputs
        .iter()
        .flat_map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut numeric = Vec::with_capacity(analytic.len());
    for t in inputs {
        for i in 0..t.numel() {
            let orig = t.data()[i];
            t.update_data(|d| d[i] = orig + h);
            let fp = no_grad(&f)?.item();
            t.update_data(|d| d[i] = orig - h);
            let fm = no_grad(&f)?.item();
            t.update_data(|d| d[i] = orig);
            numeric.push((fp - fm) / (2.0 * h));
        }
    }
    inputs.iter().for_each(|t| t.zero_grad());
    let rel_error = relative_error(&analytic, &numeric);
    Ok(GradCheck {
        analytic,
        numeric,
        rel_error,
    })
}

/// A fixed random weighting so that vector-valued outputs reduce to a
/// scalar whose gradient exercises every output element.
pub fn probe_weights(n: usize, seed: u64) -> Vec<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}
