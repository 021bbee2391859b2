//! AdamW with decoupled weight decay.

use ndarray::ArrayD;

use super::{Grads, ParamStore, Real};

/// Optimizer state: first and second moments per parameter, plus the step
/// counter used for bias correction.
#[derive(Debug, Clone)]
pub struct AdamW<F> {
    pub m: Vec<ArrayD<F>>,
    pub v: Vec<ArrayD<F>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl<F: Real> AdamW<F> {
    pub fn new(store: &ParamStore<F>, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        AdamW {
            m: store.entries().iter().map(|e| ArrayD::zeros(e.value.raw_dim())).collect(),
            v: store.entries().iter().map(|e| ArrayD::zeros(e.value.raw_dim())).collect(),
            t: 0,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
        }
    }

    /// One update. Weight decay is decoupled and applies only to parameters
    /// registered with `decay = true`.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &Grads<F>, lr: f64) {
        self.t += 1;
        let b1 = F::of(self.beta1);
        let b2 = F::of(self.beta2);
        let one_b1 = F::of(1.0 - self.beta1);
        let one_b2 = F::of(1.0 - self.beta2);
        let corr1 = F::of(1.0 / (1.0 - self.beta1.powi(self.t as i32)));
        let corr2 = F::of(1.0 / (1.0 - self.beta2.powi(self.t as i32)));
        let lr_f = F::of(lr);
        let eps = F::of(self.eps);
        let decay_mul = F::of(1.0 - lr * self.weight_decay);

        for i in 0..self.m.len() {
            let g = grads.get(super::ParamId(i));
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(g, |m, &g| *m = *m * b1 + g * one_b1);
            v.zip_mut_with(g, |v, &g| *v = *v * b2 + g * g * one_b2);

            let entry = &mut store.entries_mut()[i];
            if entry.decay {
                entry.value.mapv_inplace(|p| p * decay_mul);
            }
            ndarray::Zip::from(&mut entry.value).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let mhat = m * corr1;
                let vhat = v * corr2;
                *p = *p - lr_f * mhat / (vhat.sqrt() + eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let id = store.add1("p", arr1(&[1.0, -2.0, 3.0]), true);
        let before = store.value(id).clone();
        let mut opt = AdamW::new(&store, 0.9, 0.95, 0.01);
        let mut grads = Grads::zeros(&store);
        grads.acc1(id, &arr1(&[5.0, 5.0, 5.0]));
        opt.step(&mut store, &grads, 0.0);
        assert_eq!(store.value(id), &before);
    }

    #[test]
    fn single_step_matches_hand_computed_update() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let id = store.add1("p", arr1(&[1.0]), false);
        let mut opt = AdamW::new(&store, 0.9, 0.95, 0.01);
        let mut grads = Grads::zeros(&store);
        grads.acc1(id, &arr1(&[0.5]));
        opt.step(&mut store, &grads, 0.1);
        // m_hat = g, v_hat = g^2 after bias correction at t=1, so the update
        // is lr * g / (|g| + eps) = lr * sign(g) up to eps.
        let expected = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((store.value(id)[[0]] - expected).abs() < 1e-12);
    }

    #[test]
    fn decay_applies_only_to_flagged_parameters() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let wid = store.add1("w", arr1(&[2.0]), true);
        let bid = store.add1("b", arr1(&[2.0]), false);
        let mut opt = AdamW::new(&store, 0.9, 0.95, 0.5);
        let grads = Grads::zeros(&store);
        opt.step(&mut store, &grads, 0.1);
        // Zero gradient: only decay moves the decayed parameter.
        assert!((store.value(wid)[[0]] - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-12);
        assert_eq!(store.value(bid)[[0]], 2.0);
    }
}
