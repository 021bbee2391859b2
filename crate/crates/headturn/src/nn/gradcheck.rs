//! Finite-difference gradient checking.
//!
//! Central differences: `df/dp ~ (f(p+h) - f(p-h)) / 2h`, evaluated per
//! coordinate. Used by unit tests to validate every analytic backward pass,
//! always in f64.

use ndarray::{Array2, ArrayD};

use super::{ParamId, ParamStore};

/// Numeric gradient of a scalar objective with respect to one parameter
/// tensor. The store is restored to its original values afterwards.
pub fn numeric_grad_param<G>(
    f: &G,
    store: &mut ParamStore<f64>,
    id: ParamId,
    step: f64,
) -> ArrayD<f64>
where
    G: Fn(&ParamStore<f64>) -> f64,
{
    let shape = store.value(id).raw_dim();
    let mut grad = ArrayD::<f64>::zeros(shape);
    let n = store.value(id).len();
    for i in 0..n {
        let original = store.value(id).as_slice().unwrap()[i];
        store.value_mut(id).as_slice_mut().unwrap()[i] = original + step;
        let up = f(store);
        store.value_mut(id).as_slice_mut().unwrap()[i] = original - step;
        let down = f(store);
        store.value_mut(id).as_slice_mut().unwrap()[i] = original;
        grad.as_slice_mut().unwrap()[i] = (up - down) / (2.0 * step);
    }
    grad
}

/// Numeric gradient of a scalar objective with respect to an input matrix.
pub fn numeric_grad_input<G>(f: &G, x: &Array2<f64>, step: f64) -> Array2<f64>
where
    G: Fn(&Array2<f64>) -> f64,
{
    let mut grad = Array2::<f64>::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let original = probe.as_slice().unwrap()[idx];
        probe.as_slice_mut().unwrap()[idx] = original + step;
        let up = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = original - step;
        let down = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = original;
        grad.as_slice_mut().unwrap()[idx] = (up - down) / (2.0 * step);
    }
    grad
}

/// Largest relative disagreement between analytic and numeric gradients.
/// Each coordinate is scored as `|a - n| / max(|a|, |n|, floor)`.
pub fn max_rel_err(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shape mismatch");
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn numeric_gradient_recovers_quadratic_slope() {
        let x = arr2(&[[3.0, -2.0]]);
        let f = |x: &Array2<f64>| x.mapv(|v| v * v).sum();
        let g = numeric_grad_input(&f, &x, 1e-5);
        assert!((g[[0, 0]] - 6.0).abs() < 1e-8);
        assert!((g[[0, 1]] + 4.0).abs() < 1e-8);
    }

    #[test]
    fn rel_err_uses_floor_for_tiny_entries() {
        let a = ndarray::arr1(&[0.0]).into_dyn();
        let n = ndarray::arr1(&[1e-12]).into_dyn();
        assert!(max_rel_err(&a, &n, 1e-6) < 1e-5);
    }
}
