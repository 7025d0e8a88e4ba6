use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Network, NnError, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, batch_size: 64 }
    }
}

impl OptimizerSpec {
    pub fn validate(&self) -> Result<(), NnError> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.batch_size > 0;
        if ok {
            Ok(())
        } else {
            Err(NnError::Spec(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// First and second moment estimates, one per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(n: usize) -> Self {
        Self { m: vec![T::zero(); n], v: vec![T::zero(); n] }
    }
}

/// One bias-corrected Adam update at step `t` (1-based) with learning rate `lr`.
pub fn adam_step<T: Real>(params: &mut [T], grads: &[T], state: &mut AdamState<T>, spec: &OptimizerSpec, lr: f64, t: u64) {
    assert!(t >= 1, "adam step index starts at 1");
    assert_eq!(params.len(), grads.len());
    let (b1, b2) = (T::from_f64(spec.beta1), T::from_f64(spec.beta2));
    let c1 = 1.0 - spec.beta1.powf(t as f64);
    let c2 = 1.0 - spec.beta2.powf(t as f64);
    let step = T::from_f64(lr / c1);
    let inv_c2 = T::from_f64(1.0 / c2);
    let eps = T::from_f64(spec.eps);
    let one = T::one();
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        *p -= step * *m / ((*v * inv_c2).sqrt() + eps);
    }
}

/// He-uniform weights `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero biases.
pub fn init_params<T: Real>(net: &Network, seed: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = vec![T::zero(); net.param_count()];
    for &(offset, len, fan_in) in net.weight_tensors() {
        let limit = (6.0 / fan_in as f64).sqrt();
        for p in &mut params[offset..offset + len] {
            *p = T::from_f64(rng.random_range(-limit..limit));
        }
    }
    params
}

/// `mean_i w_i (pred_i - target_i)^2` over the values of one example, averaged
/// over the batch. Returns the loss and its gradient with respect to `pred`.
pub fn mse_loss<T: Real>(pred: &[T], target: &[T], weights: &[T]) -> (f64, Vec<T>) {
    assert_eq!(pred.len(), target.len());
    let d = weights.len();
    assert!(d > 0 && pred.len() % d == 0, "weights must divide the prediction length");
    let count = pred.len() as f64;
    let scale = T::from_f64(2.0 / count);
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .enumerate()
        .map(|(i, (&p, &t))| {
            let w = weights[i % d];
            let e = p - t;
            loss += (w * e * e).as_f64();
            scale * w * e
        })
        .collect();
    (loss / count, grad)
}
