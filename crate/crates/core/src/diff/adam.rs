use super::params::ParameterStore;
use super::scalar::Scalar;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update over every entry of the store. Gradients are
/// consumed (zeroed) by the step. Every entry must hold a gradient.
pub fn adam_step<T: Scalar>(store: &mut ParameterStore<T>, cfg: &AdamConfig) -> Result<()> {
    if let Some((name, _)) = store.iter().find(|(_, e)| e.tensor.grad().is_none()) {
        return Err(Error::MissingGradient(name.to_string()));
    }
    store.step += 1;
    let t = store.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let one = T::one();
    let bc1 = one - b1.powi(t);
    let bc2 = one - b2.powi(t);
    let lr = T::lit(cfg.lr);
    let eps = T::lit(cfg.eps);
    for (_, e) in store.iter_mut() {
        let g = e.tensor.take_grad().expect("checked above");
        let (m, v) = (&mut e.m, &mut e.v);
        e.tensor.update_data(|p| {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] = p[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        });
    }
    Ok(())
}
