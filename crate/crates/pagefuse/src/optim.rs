//! AdamW with decoupled weight decay, plus the warmup/decay schedule.
//!
//! Decay is applied directly to the weights (scaled by the current learning
//! rate), not folded into the gradient — so with lr = 0 a step is a no-op,
//! and with zero gradients and zero decay parameters are untouched.

use std::collections::BTreeMap;

use crate::params::ParamStore;
use crate::tensor::Scalar;

#[derive(Debug, Clone)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct AdamW<T: Scalar> {
    pub weight_decay: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: u64,
    moments: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            weight_decay: T::from_f64(weight_decay),
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update over every parameter in the store. Every parameter must
    /// carry a gradient buffer (zeroed is fine); a missing buffer means the
    /// training loop forgot to accumulate and is a bug.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: T) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        let one = T::one();

        for (name, tensor) in store.iter_mut() {
            let n = tensor.len();
            let mom = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| Moments {
                    m: vec![T::zero(); n],
                    v: vec![T::zero(); n],
                });
            assert_eq!(mom.m.len(), n, "moment buffer shape drifted for {name:?}");
            let grad = tensor
                .grad()
                .unwrap_or_else(|| panic!("parameter {name:?} has no gradient buffer"))
                .to_vec();
            let data = tensor.data_mut();
            for i in 0..n {
                let g = grad[i];
                mom.m[i] = self.beta1 * mom.m[i] + (one - self.beta1) * g;
                mom.v[i] = self.beta2 * mom.v[i] + (one - self.beta2) * g * g;
                let mhat = mom.m[i] / bc1;
                let vhat = mom.v[i] / bc2;
                data[i] = data[i] - lr * (mhat / (vhat.sqrt() + self.eps))
                    - lr * self.weight_decay * data[i];
            }
        }
    }
}

/// Linear warmup over the first ⌈total/10⌉ steps, then linear decay to zero
/// at `step == total`.
pub fn lr_schedule(step: u64, total: u64, base_lr: f64) -> f64 {
    assert!(total > 0, "lr_schedule: total steps must be positive");
    assert!(step <= total, "lr_schedule: step {step} beyond total {total}");
    let warmup = total.div_ceil(10);
    if step >= total {
        0.0
    } else if step < warmup {
        base_lr * step as f64 / warmup as f64
    } else {
        base_lr * (total - step) as f64 / (total - warmup) as f64
    }
}
