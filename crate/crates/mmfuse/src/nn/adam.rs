//! Adam with additive (L2-style) weight decay, matching the convention of
//! passing `weight_decay` to a stock Adam optimizer: the decay term joins
//! the gradient before the moment updates.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use super::{ParamStore, Scalar};

pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    steps: u64,
}

impl Adam {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Adam {
        Adam { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, steps: 0 }
    }

    /// One update over the trainable parameters present in `grads`.
    pub fn step<F: Scalar>(
        &mut self,
        store: &mut ParamStore<F>,
        grads: &BTreeMap<String, ArrayD<F>>,
    ) {
        self.steps += 1;
        let t = self.steps as f64;
        let b1 = F::of_f64(self.beta1);
        let b2 = F::of_f64(self.beta2);
        let one = F::one();
        let wd = F::of_f64(self.weight_decay);
        let eps = F::of_f64(self.eps);
        let bias1 = F::of_f64(1.0 - self.beta1.powf(t));
        let bias2 = F::of_f64(1.0 - self.beta2.powf(t));
        let lr = F::of_f64(self.learning_rate);

        for (name, grad) in grads {
            let entry = store.entry_mut(name);
            if !entry.trainable {
                continue;
            }
            debug_assert_eq!(entry.value.shape(), grad.shape(), "grad shape for {name}");
            let gs = grad.as_slice().expect("contiguous grad");
            let values = entry.value.as_slice_mut().expect("contiguous value");
            let ms = entry.adam_m.as_slice_mut().expect("contiguous m");
            let vs = entry.adam_v.as_slice_mut().expect("contiguous v");
            for i in 0..values.len() {
                let g = gs[i] + wd * values[i];
                ms[i] = b1 * ms[i] + (one - b1) * g;
                vs[i] = b2 * vs[i] + (one - b2) * g * g;
                let mh = ms[i] / bias1;
                let vh = vs[i] / bias2;
                values[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction, the first Adam step is lr * sign(grad).
        let mut store = ParamStore::<f64>::new();
        store.insert("w", ArrayD::from_elem(IxDyn(&[2]), 1.0), true);
        let mut adam = Adam::new(0.1, 0.0);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), ArrayD::from_elem(IxDyn(&[2]), 0.5));
        adam.step(&mut store, &grads);
        for &v in store.value("w").iter() {
            assert!((v - 0.9).abs() < 1e-6, "{v}");
        }
    }

    #[test]
    fn frozen_parameters_are_never_touched() {
        let mut store = ParamStore::<f64>::new();
        store.insert("frozen", ArrayD::from_elem(IxDyn(&[3]), 2.0), false);
        let mut adam = Adam::new(0.1, 0.01);
        let mut grads = BTreeMap::new();
        grads.insert("frozen".to_string(), ArrayD::from_elem(IxDyn(&[3]), 1.0));
        adam.step(&mut store, &grads);
        assert!(store.value("frozen").iter().all(|&v| v == 2.0));
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", ArrayD::from_elem(IxDyn(&[1]), 5.0), true);
        let mut adam = Adam::new(0.01, 0.1);
        let grads: BTreeMap<String, ArrayD<f64>> =
            [("w".to_string(), ArrayD::zeros(IxDyn(&[1])))].into();
        for _ in 0..10 {
            adam.step(&mut store, &grads);
        }
        assert!(store.value("w")[[0]] < 5.0);
    }
}
