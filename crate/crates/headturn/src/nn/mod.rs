//! Minimal neural network substrate: a flat parameter store, layers with
//! explicit forward and backward passes, and an AdamW optimizer.
//!
//! All layers are generic over [`Real`] so the same code runs in f32 for
//! training and f64 for tests and finite-difference oracles. There is no
//! autodiff tape: each layer returns the caches its backward pass needs, and
//! callers chain backward calls in reverse order. Gradients accumulate into a
//! [`Grads`] buffer that mirrors the store, which keeps per-sample work
//! independent and makes batch reduction a deterministic index-ordered sum.

mod act;
mod adamw;
mod attention;
mod block;
pub mod gradcheck;
mod linear;
mod norm;

pub use act::{gelu, gelu_backward, relu, relu_backward, silu, silu_backward};
pub use adamw::AdamW;
pub use attention::{AttnCache, MultiHeadAttention};
pub use block::{EncoderLayer, EncoderLayerCache, NormStyle};
pub use linear::Linear;
pub use norm::{plain_norm, plain_norm_backward, LayerNorm, NormCache};

use ndarray::{Array1, Array2, ArrayD, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Ix1, Ix2};

use crate::rng::RandomStream;

/// Floating point element type for model math.
pub trait Real: ndarray::NdFloat + Send + Sync + 'static {
    fn of(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Handle to one named parameter tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One registered parameter.
#[derive(Debug, Clone)]
pub struct ParamEntry<F> {
    pub name: String,
    pub value: ArrayD<F>,
    /// Whether AdamW applies decoupled weight decay to this tensor. Weight
    /// matrices decay; biases, norm parameters, and embeddings do not.
    pub decay: bool,
}

/// Flat, insertion-ordered collection of named parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    entries: Vec<ParamEntry<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    fn add(&mut self, name: &str, value: ArrayD<F>, decay: bool) -> ParamId {
        assert!(
            self.find(name).is_none(),
            "parameter '{name}' registered twice"
        );
        self.entries.push(ParamEntry { name: name.to_string(), value, decay });
        ParamId(self.entries.len() - 1)
    }

    pub fn add1(&mut self, name: &str, value: Array1<F>, decay: bool) -> ParamId {
        self.add(name, value.into_dyn(), decay)
    }

    pub fn add2(&mut self, name: &str, value: Array2<F>, decay: bool) -> ParamId {
        self.add(name, value.into_dyn(), decay)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<F>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<F>] {
        &mut self.entries
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<F> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.entries[id.0].value
    }

    pub fn get1(&self, id: ParamId) -> ArrayView1<'_, F> {
        self.entries[id.0].value.view().into_dimensionality::<Ix1>().expect("1-d parameter")
    }

    pub fn get2(&self, id: ParamId) -> ArrayView2<'_, F> {
        self.entries[id.0].value.view().into_dimensionality::<Ix2>().expect("2-d parameter")
    }

    pub fn get1_mut(&mut self, id: ParamId) -> ArrayViewMut1<'_, F> {
        self.entries[id.0]
            .value
            .view_mut()
            .into_dimensionality::<Ix1>()
            .expect("1-d parameter")
    }

    pub fn get2_mut(&mut self, id: ParamId) -> ArrayViewMut2<'_, F> {
        self.entries[id.0]
            .value
            .view_mut()
            .into_dimensionality::<Ix2>()
            .expect("2-d parameter")
    }

    /// Total scalar count across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Gradient buffer aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Grads<F> {
    buffers: Vec<ArrayD<F>>,
}

impl<F: Real> Grads<F> {
    pub fn zeros(store: &ParamStore<F>) -> Self {
        Grads { buffers: store.entries.iter().map(|e| ArrayD::zeros(e.value.raw_dim())).collect() }
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<F> {
        &self.buffers[id.0]
    }

    pub fn get2(&self, id: ParamId) -> ArrayView2<'_, F> {
        self.buffers[id.0].view().into_dimensionality::<Ix2>().expect("2-d gradient")
    }

    pub fn get1(&self, id: ParamId) -> ArrayView1<'_, F> {
        self.buffers[id.0].view().into_dimensionality::<Ix1>().expect("1-d gradient")
    }

    pub fn acc2(&mut self, id: ParamId, dw: &Array2<F>) {
        let mut view = self.buffers[id.0].view_mut().into_dimensionality::<Ix2>().unwrap();
        view += dw;
    }

    pub fn acc1(&mut self, id: ParamId, db: &Array1<F>) {
        let mut view = self.buffers[id.0].view_mut().into_dimensionality::<Ix1>().unwrap();
        view += db;
    }

    /// Adds another gradient buffer element-wise. Used to reduce per-sample
    /// gradients in a fixed order.
    pub fn add_assign(&mut self, other: &Grads<F>) {
        for (a, b) in self.buffers.iter_mut().zip(&other.buffers) {
            *a += b;
        }
    }

    /// Scales every gradient, e.g. by 1/batch.
    pub fn scale(&mut self, s: F) {
        for a in &mut self.buffers {
            a.mapv_inplace(|v| v * s);
        }
    }

    /// Global L2 norm over all gradients, in f64.
    pub fn global_norm(&self) -> f64 {
        self.buffers
            .iter()
            .map(|a| {
                a.iter()
                    .map(|&v| {
                        let x = Real::to_f64(v);
                        x * x
                    })
                    .sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Uniform init on `(-1/sqrt(fan_in), +1/sqrt(fan_in))` for a matrix.
pub fn uniform_init2<F: Real>(rows: usize, cols: usize, fan_in: usize, rng: &mut RandomStream) -> Array2<F> {
    let a = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || F::of(rng.uniform_in(-a, a)))
}

/// Uniform init on `(-1/sqrt(fan_in), +1/sqrt(fan_in))` for a vector.
pub fn uniform_init1<F: Real>(len: usize, fan_in: usize, rng: &mut RandomStream) -> Array1<F> {
    let a = 1.0 / (fan_in as f64).sqrt();
    Array1::from_shape_simple_fn(len, || F::of(rng.uniform_in(-a, a)))
}
