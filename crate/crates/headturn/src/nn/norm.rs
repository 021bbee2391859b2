//! Row-wise layer normalization, with and without learnable affine.

use ndarray::{Array1, Array2, Axis};

use super::{Grads, ParamId, ParamStore, Real};

const EPS: f64 = 1e-5;

/// Cache from a normalization forward pass: the standardized rows and each
/// row's inverse standard deviation.
#[derive(Debug, Clone)]
pub struct NormCache<F> {
    pub xhat: Array2<F>,
    pub inv_std: Array1<F>,
}

fn row_means<F: Real>(x: &Array2<F>) -> Array1<F> {
    let inv = F::of(1.0 / x.ncols() as f64);
    x.sum_axis(Axis(1)).mapv_into(|v| v * inv)
}

/// Standardizes each row to zero mean and unit variance.
pub fn plain_norm<F: Real>(x: &Array2<F>) -> (Array2<F>, NormCache<F>) {
    let mean = row_means(x);
    let mut centered = x.clone();
    centered -= &mean.view().insert_axis(Axis(1));
    let var = row_means(&centered.mapv(|v| v * v));
    let inv_std = var.mapv(|v| F::of(1.0) / (v + F::of(EPS)).sqrt());
    let mut xhat = centered;
    xhat *= &inv_std.view().insert_axis(Axis(1));
    (xhat.clone(), NormCache { xhat, inv_std })
}

/// Backward pass of [`plain_norm`]: `dy` is the gradient at the standardized
/// output.
pub fn plain_norm_backward<F: Real>(cache: &NormCache<F>, dy: &Array2<F>) -> Array2<F> {
    let mean_dy = row_means(dy);
    let mean_dy_xhat = row_means(&(dy * &cache.xhat));
    let mut dx = dy.clone();
    dx -= &mean_dy.view().insert_axis(Axis(1));
    dx -= &(&cache.xhat * &mean_dy_xhat.view().insert_axis(Axis(1)));
    dx *= &cache.inv_std.view().insert_axis(Axis(1));
    dx
}

/// Layer norm with learnable gain and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub g: ParamId,
    pub b: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    /// Registers `{name}.g` (ones) and `{name}.b` (zeros).
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        let g = store.add1(&format!("{name}.g"), Array1::from_elem(dim, F::of(1.0)), false);
        let b = store.add1(&format!("{name}.b"), Array1::zeros(dim), false);
        LayerNorm { g, b, dim }
    }

    pub fn forward<F: Real>(&self, store: &ParamStore<F>, x: &Array2<F>) -> (Array2<F>, NormCache<F>) {
        let (xhat, cache) = plain_norm(x);
        let mut y = xhat;
        y *= &store.get1(self.g);
        y += &store.get1(self.b);
        (y, cache)
    }

    pub fn backward<F: Real>(
        &self,
        store: &ParamStore<F>,
        grads: &mut Grads<F>,
        cache: &NormCache<F>,
        dy: &Array2<F>,
    ) -> Array2<F> {
        grads.acc1(self.g, &(dy * &cache.xhat).sum_axis(Axis(0)));
        grads.acc1(self.b, &dy.sum_axis(Axis(0)));
        let dxhat = dy * &store.get1(self.g);
        plain_norm_backward(cache, &dxhat)
    }
}
