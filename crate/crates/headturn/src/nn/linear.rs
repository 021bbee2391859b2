//! Affine layer `y = x W + b` with explicit backward.

use ndarray::{Array1, Array2, Axis};

use super::{uniform_init1, uniform_init2, Grads, ParamId, ParamStore, Real};
use crate::rng::RandomStream;

/// Linear map `[n, in] -> [n, out]`. Weights are stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Registers `{name}.w` and `{name}.b`, initialized uniform on
    /// `(-1/sqrt(in_dim), +1/sqrt(in_dim))`.
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        seed: u64,
    ) -> Self {
        let mut rw = RandomStream::new(seed, &format!("init/{name}.w"));
        let mut rb = RandomStream::new(seed, &format!("init/{name}.b"));
        let w = store.add2(&format!("{name}.w"), uniform_init2(in_dim, out_dim, in_dim, &mut rw), true);
        let b = store.add1(&format!("{name}.b"), uniform_init1(out_dim, in_dim, &mut rb), false);
        Linear { w, b, in_dim, out_dim }
    }

    /// Registers zero-initialized weights and bias. Used for gates and output
    /// heads that must start as the zero map.
    pub fn new_zeroed<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = store.add2(&format!("{name}.w"), Array2::zeros((in_dim, out_dim)), true);
        let b = store.add1(&format!("{name}.b"), Array1::zeros(out_dim), false);
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward<F: Real>(&self, store: &ParamStore<F>, x: &Array2<F>) -> Array2<F> {
        debug_assert_eq!(x.ncols(), self.in_dim);
        let mut y = x.dot(&store.get2(self.w));
        y += &store.get1(self.b);
        y
    }

    /// Accumulates weight and bias gradients and returns the input gradient.
    /// `x` must be the forward input that produced `dy`.
    pub fn backward<F: Real>(
        &self,
        store: &ParamStore<F>,
        grads: &mut Grads<F>,
        x: &Array2<F>,
        dy: &Array2<F>,
    ) -> Array2<F> {
        grads.acc2(self.w, &x.t().dot(dy));
        grads.acc1(self.b, &dy.sum_axis(Axis(0)));
        dy.dot(&store.get2(self.w).t())
    }
}
