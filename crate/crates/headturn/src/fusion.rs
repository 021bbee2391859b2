//! Fusion transformer over the flat interleaved window.
//!
//! Rows are projected from token width to `d_e`, given a learnable absolute
//! position embedding, and passed through a pre-norm encoder stack with
//! turn-level causal attention: a query row may attend to every row whose
//! turn id is at most its own. Because the window lays turns out
//! consecutively, that visibility set is always a flat prefix, so attention
//! takes per-row prefix lengths instead of a mask matrix. Scores outside the
//! prefix are never computed, which is arithmetically identical to additive
//! negative-infinity masking.

use ndarray::Array2;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{
    uniform_init2, EncoderLayer, EncoderLayerCache, Grads, LayerNorm, Linear, NormCache,
    NormStyle, ParamId, ParamStore, Real,
};
use crate::rng::RandomStream;

/// Boolean visibility matrix for turn-level causal attention:
/// `allow[q][k]` is true when key row `k` belongs to the same or an earlier
/// turn than query row `q`. Kept as an explicit matrix for tests and
/// reference implementations.
pub fn build_tlca_mask(turn_ids: &[usize]) -> Array2<bool> {
    let n = turn_ids.len();
    Array2::from_shape_fn((n, n), |(q, k)| turn_ids[k] <= turn_ids[q])
}

/// Converts per-row turn ids into per-row visible prefix lengths. Valid only
/// when ids are non-decreasing, which the window layout guarantees; each
/// row's visible set is then rows `0..prefix[q]`.
pub fn prefixes_from_turn_ids(turn_ids: &[usize]) -> Vec<usize> {
    let n = turn_ids.len();
    (0..n)
        .map(|q| {
            let mut p = q + 1;
            while p < n && turn_ids[p] <= turn_ids[q] {
                p += 1;
            }
            p
        })
        .collect()
}

/// The fusion stack: input projection, position table, pre-norm encoder
/// layers, and a final normalization.
#[derive(Debug, Clone)]
pub struct Fusion {
    pub in_proj: Linear,
    pub p1: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub final_ln: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct FusionCache<F> {
    flat: Array2<F>,
    layer_caches: Vec<EncoderLayerCache<F>>,
    final_cache: NormCache<F>,
}

impl Fusion {
    pub fn new<F: Real>(store: &mut ParamStore<F>, cfg: &ModelConfig, seed: u64) -> Self {
        let mut rp = RandomStream::new(seed, "init/fusion.P1");
        Fusion {
            in_proj: Linear::new(store, "fusion.in_proj", cfg.d_t, cfg.d_e, seed),
            p1: store.add2(
                "fusion.P1",
                uniform_init2(cfg.flat_capacity(), cfg.d_e, cfg.d_e, &mut rp),
                false,
            ),
            layers: (0..cfg.encoder_layers)
                .map(|i| {
                    EncoderLayer::new(
                        store,
                        &format!("fusion.layer{i}"),
                        cfg.d_e,
                        cfg.encoder_heads,
                        NormStyle::Pre,
                        seed,
                    )
                })
                .collect(),
            final_ln: LayerNorm::new(store, "fusion.final_ln", cfg.d_e),
        }
    }

    /// Fuses a flat window `[rows, d_t]` under per-row visible prefixes into
    /// `[rows, d_e]`. Windows longer than the position table are rejected.
    pub fn forward<F: Real>(
        &self,
        store: &ParamStore<F>,
        flat: &Array2<F>,
        prefix: &[usize],
    ) -> Result<(Array2<F>, FusionCache<F>)> {
        let rows = flat.nrows();
        let capacity = store.get2(self.p1).nrows();
        if rows > capacity {
            return Err(Error::Capacity {
                what: "flat window rows".into(),
                limit: capacity,
                got: rows,
            });
        }
        debug_assert_eq!(prefix.len(), rows);
        debug_assert!(prefix.iter().enumerate().all(|(q, &p)| p > q && p <= rows));

        let mut x = self.in_proj.forward(store, flat);
        {
            let p1 = store.get2(self.p1);
            x += &p1.slice(ndarray::s![..rows, ..]);
        }
        let mut layer_caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, cache) = layer.forward(store, &x, prefix);
            layer_caches.push(cache);
            x = y;
        }
        let (fused, final_cache) = self.final_ln.forward(store, &x);
        Ok((fused, FusionCache { flat: flat.clone(), layer_caches, final_cache }))
    }

    /// Accumulates parameter gradients and returns the gradient at the flat
    /// window rows.
    pub fn backward<F: Real>(
        &self,
        store: &ParamStore<F>,
        grads: &mut Grads<F>,
        cache: &FusionCache<F>,
        dfused: &Array2<F>,
    ) -> Array2<F> {
        let mut d = self.final_ln.backward(store, grads, &cache.final_cache, dfused);
        for (layer, lcache) in self.layers.iter().zip(&cache.layer_caches).rev() {
            d = layer.backward(store, grads, lcache, &d);
        }
        let rows = d.nrows();
        let capacity = store.get2(self.p1).nrows();
        let mut dp1 = Array2::<F>::zeros((capacity, d.ncols()));
        dp1.slice_mut(ndarray::s![..rows, ..]).assign(&d);
        grads.acc2(self.p1, &dp1);
        self.in_proj.backward(store, grads, &cache.flat, &d)
    }
}
