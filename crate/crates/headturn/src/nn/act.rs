//! Elementwise activations with explicit derivatives.
//!
//! GELU uses the tanh approximation; its backward differentiates the
//! approximation itself, so analytic and finite-difference gradients agree.

use ndarray::Array2;

use super::Real;

const GELU_K: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub fn gelu<F: Real>(x: &Array2<F>) -> Array2<F> {
    x.mapv(|v| {
        let v64 = v.to_f64();
        let t = (GELU_K * (v64 + GELU_A * v64 * v64 * v64)).tanh();
        F::of(0.5 * v64 * (1.0 + t))
    })
}

/// `dy * gelu'(x)`, where `x` is the forward input.
pub fn gelu_backward<F: Real>(x: &Array2<F>, dy: &Array2<F>) -> Array2<F> {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |d, &v| {
        let v64 = v.to_f64();
        let inner = GELU_K * (v64 + GELU_A * v64 * v64 * v64);
        let t = inner.tanh();
        let dt = (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_A * v64 * v64);
        *d = *d * F::of(0.5 * (1.0 + t) + 0.5 * v64 * dt);
    });
    dx
}

pub fn silu<F: Real>(x: &Array2<F>) -> Array2<F> {
    x.mapv(|v| {
        let v64 = v.to_f64();
        let s = 1.0 / (1.0 + (-v64).exp());
        F::of(v64 * s)
    })
}

pub fn silu_backward<F: Real>(x: &Array2<F>, dy: &Array2<F>) -> Array2<F> {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |d, &v| {
        let v64 = v.to_f64();
        let s = 1.0 / (1.0 + (-v64).exp());
        *d = *d * F::of(s * (1.0 + v64 * (1.0 - s)));
    });
    dx
}

pub fn relu<F: Real>(x: &Array2<F>) -> Array2<F> {
    x.mapv(|v| if v > F::of(0.0) { v } else { F::of(0.0) })
}

pub fn relu_backward<F: Real>(x: &Array2<F>, dy: &Array2<F>) -> Array2<F> {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |d, &v| {
        if v <= F::of(0.0) {
            *d = F::of(0.0);
        }
    });
    dx
}
