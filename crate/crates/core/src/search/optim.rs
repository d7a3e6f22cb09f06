use std::collections::HashMap;

use crate::tensor::{Gradients, ParamGroup, ParamId, ParamStore, Scalar, Tensor};

/// Adam with optional L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    steps: u64,
    moments: HashMap<ParamId, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-9,
            weight_decay,
            steps: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Updates every parameter of `group` that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, group: ParamGroup, lr: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let ids: Vec<ParamId> = store.ids_in(group).collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let shape = g.shape().to_vec();
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Tensor::zeros(shape.clone()), Tensor::zeros(shape)));
            let p = store.value_mut(id);
            let wd = T::of(self.weight_decay);
            for i in 0..p.numel() {
                let gi = g.data()[i] + wd * p.data()[i];
                let mi = b1 * m.data()[i] + (T::one() - b1) * gi;
                let vi = b2 * v.data()[i] + (T::one() - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi.as_f64() / c1;
                let vhat = vi.as_f64() / c2;
                let upd = lr * mhat / (vhat.sqrt() + self.eps);
                p.data_mut()[i] -= T::of(upd);
            }
        }
    }
}

/// Linear warmup to `peak`, then decay with the inverse square root of the step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InverseSqrt {
    pub peak: f64,
    pub warmup: u64,
}

impl InverseSqrt {
    /// Rate for the 1-based step `step`.
    pub fn lr(&self, step: u64) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup.max(1) as f64;
        self.peak * (s / w).min((w / s).sqrt())
    }
}

/// The two optimizers of the alternating update.
#[derive(Clone, Debug)]
pub struct BilevelOptimizer<T> {
    pub theta: Adam<T>,
    pub alpha: Adam<T>,
    pub schedule: InverseSqrt,
    pub alpha_lr: f64,
    pub rejected_steps: u64,
}

impl<T: Scalar> BilevelOptimizer<T> {
    pub fn new(beta1: f64, beta2: f64, schedule: InverseSqrt, alpha_lr: f64, alpha_weight_decay: f64) -> Self {
        Self {
            theta: Adam::new(beta1, beta2, 0.0),
            alpha: Adam::new(beta1, beta2, alpha_weight_decay),
            schedule,
            alpha_lr,
            rejected_steps: 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_peaks_at_warmup() {
        let s = InverseSqrt {
            peak: 5e-4,
            warmup: 100,
        };
        assert!((s.lr(100) - 5e-4).abs() < 1e-15);
        assert!((s.lr(50) - 2.5e-4).abs() < 1e-15);
        assert!((s.lr(400) - 2.5e-4).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", ParamGroup::Theta, Tensor::from_f64(vec![2], &[1.0, -1.0]).unwrap());
        let mut g = Gradients::new();
        g.accumulate(id, &Tensor::from_f64(vec![2], &[0.5, -2.0]).unwrap())
            .unwrap();
        let mut opt = Adam::new(0.9, 0.98, 0.0);
        opt.step(&mut store, &g, ParamGroup::Theta, 0.1);
        let v = store.value(id).to_f64_vec();
        assert!((v[0] - 0.9).abs() < 1e-6 && (v[1] + 0.9).abs() < 1e-6);
    }
}
