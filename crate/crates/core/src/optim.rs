//! Optimizers and the stepwise learning-rate schedule.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Element, Tensor};

/// Adam moment buffers plus the step counter.
pub struct AdamState<E> {
    pub m: Vec<Tensor<E>>,
    pub v: Vec<Tensor<E>>,
    pub step: u64,
}

pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn init_state<E: Element>(&self, store: &ParamStore<E>) -> AdamState<E> {
        let m = store
            .entries
            .iter()
            .map(|e| Tensor::zeros(&e.value.shape))
            .collect();
        let v = store
            .entries
            .iter()
            .map(|e| Tensor::zeros(&e.value.shape))
            .collect();
        AdamState { m, v, step: 0 }
    }

    /// One bias-corrected Adam update over all trainable entries.
    pub fn step<E: Element>(
        &self,
        store: &mut ParamStore<E>,
        state: &mut AdamState<E>,
        lr: f64,
    ) -> Result<()> {
        if lr <= 0.0 {
            return Err(Error::invalid("adam_step", format!("lr must be positive, got {lr}")));
        }
        if state.m.len() != store.len() {
            return Err(Error::invalid(
                "adam_step",
                "optimizer state does not match parameter store",
            ));
        }
        state.step += 1;
        let t = state.step as f64;
        let b1 = E::from_f64(self.beta1);
        let b2 = E::from_f64(self.beta2);
        let one_b1 = E::one() - b1;
        let one_b2 = E::one() - b2;
        let corr1 = 1.0 - self.beta1.powf(t);
        let corr2 = 1.0 - self.beta2.powf(t);
        let alpha = E::from_f64(lr * corr2.sqrt() / corr1);
        let eps = E::from_f64(self.eps * corr2.sqrt());
        for (i, entry) in store.entries.iter_mut().enumerate() {
            if !entry.trainable {
                continue;
            }
            let m = &mut state.m[i];
            let v = &mut state.v[i];
            for j in 0..entry.value.numel() {
                let g = entry.grad.data[j];
                m.data[j] = b1 * m.data[j] + one_b1 * g;
                v.data[j] = b2 * v.data[j] + one_b2 * g * g;
                entry.value.data[j] -= alpha * m.data[j] / (v.data[j].sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// SGD with classical momentum, selectable as an alternative optimizer.
pub struct SgdMomentum {
    pub momentum: f64,
}

pub struct SgdState<E> {
    pub velocity: Vec<Tensor<E>>,
}

impl SgdMomentum {
    pub fn init_state<E: Element>(&self, store: &ParamStore<E>) -> SgdState<E> {
        SgdState {
            velocity: store
                .entries
                .iter()
                .map(|e| Tensor::zeros(&e.value.shape))
                .collect(),
        }
    }

    pub fn step<E: Element>(
        &self,
        store: &mut ParamStore<E>,
        state: &mut SgdState<E>,
        lr: f64,
    ) -> Result<()> {
        if lr <= 0.0 {
            return Err(Error::invalid("sgd_step", format!("lr must be positive, got {lr}")));
        }
        let mu = E::from_f64(self.momentum);
        let lr_e = E::from_f64(lr);
        for (i, entry) in store.entries.iter_mut().enumerate() {
            if !entry.trainable {
                continue;
            }
            let vel = &mut state.velocity[i];
            for j in 0..entry.value.numel() {
                vel.data[j] = mu * vel.data[j] + entry.grad.data[j];
                entry.value.data[j] -= lr_e * vel.data[j];
            }
        }
        Ok(())
    }
}

/// `base_lr * factor^(number of milestones <= epoch)`.
pub fn lr_schedule(epoch: usize, base_lr: f64, milestones: &[usize], factor: f64) -> f64 {
    debug_assert!(milestones.windows(2).all(|w| w[0] < w[1]), "milestones must increase");
    let decays = milestones.iter().filter(|&&m| m <= epoch).count();
    base_lr * factor.powi(decays as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64, g: f64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(v), true);
        store.value_mut(id); // touch
        store.entries[0].grad = Tensor::scalar(g);
        store
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut store = scalar_store(1.5, 0.0);
        let adam = Adam::default();
        let mut state = adam.init_state(&store);
        adam.step(&mut store, &mut state, 0.1).unwrap();
        assert_eq!(store.entries[0].value.data[0], 1.5);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        // Bias-corrected first step with g=1: update = lr * g / (|g| + eps') ~ lr.
        let mut store = scalar_store(0.0, 1.0);
        let adam = Adam::default();
        let mut state = adam.init_state(&store);
        adam.step(&mut store, &mut state, 0.1).unwrap();
        let w = store.entries[0].value.data[0];
        assert!((w + 0.1).abs() < 1e-6, "w = {w}");
    }

    #[test]
    fn converges_on_quadratic() {
        // f(w) = (w - 3)^2, gradient 2(w - 3), from w = 0.
        let mut store = scalar_store(0.0, 0.0);
        let adam = Adam::default();
        let mut state = adam.init_state(&store);
        for _ in 0..100 {
            let w = store.entries[0].value.data[0];
            store.entries[0].grad = Tensor::scalar(2.0 * (w - 3.0));
            adam.step(&mut store, &mut state, 0.1).unwrap();
        }
        let w = store.entries[0].value.data[0];
        assert!((w - 3.0).abs() < 0.1, "w = {w}");
    }

    #[test]
    fn rejects_nonpositive_lr() {
        let mut store = scalar_store(0.0, 1.0);
        let adam = Adam::default();
        let mut state = adam.init_state(&store);
        assert!(adam.step(&mut store, &mut state, 0.0).is_err());
        assert!(adam.step(&mut store, &mut state, -1.0).is_err());
    }

    #[test]
    fn schedule_decays_at_milestones() {
        let ms = [65, 80, 85, 90];
        assert_eq!(lr_schedule(0, 0.0016, &ms, 0.1), 0.0016);
        assert!((lr_schedule(80, 0.0016, &ms, 0.1) - 0.000016).abs() < 1e-12);
        assert_eq!(lr_schedule(64, 0.0016, &ms, 0.1), 0.0016);
        assert!((lr_schedule(100, 0.0016, &ms, 0.1) - 1.6e-7).abs() < 1e-15);
    }

    #[test]
    fn empty_milestones_never_decay() {
        for epoch in [0, 10, 1000] {
            assert_eq!(lr_schedule(epoch, 0.01, &[], 0.1), 0.01);
        }
    }
}
