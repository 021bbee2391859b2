//! Multi-head scaled dot-product attention with per-query key prefixes.
//!
//! Visibility is expressed as a prefix length per query row: query `i` may
//! attend to keys `0..prefix[i]`. Full bidirectional attention is the special
//! case `prefix[i] == len` for every row. Scores outside the prefix are never
//! computed, which is arithmetically identical to adding negative infinity
//! before the softmax: excluded keys have exactly zero probability and
//! contribute exactly nothing to the output.

use ndarray::{s, Array2, Axis};

use super::{Grads, Linear, ParamStore, Real};

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

/// Forward cache: projections, per-group attention probabilities, and the
/// concatenated head outputs (input to the output projection).
#[derive(Debug, Clone)]
pub struct AttnCache<F> {
    pub q: Array2<F>,
    pub k: Array2<F>,
    pub v: Array2<F>,
    pub concat: Array2<F>,
    /// `groups[gi] = (row_start, row_end, prefix)`.
    pub groups: Vec<(usize, usize, usize)>,
    /// `probs[gi][head]` has shape `[row_end - row_start, prefix]`.
    pub probs: Vec<Vec<Array2<F>>>,
}

/// Splits consecutive rows that share a prefix into ranges.
fn group_rows(prefix: &[usize]) -> Vec<(usize, usize, usize)> {
    let mut groups = Vec::new();
    let mut start = 0;
    while start < prefix.len() {
        let p = prefix[start];
        let mut end = start + 1;
        while end < prefix.len() && prefix[end] == p {
            end += 1;
        }
        groups.push((start, end, p));
        start = end;
    }
    groups
}

fn softmax_rows_inplace<F: Real>(scores: &mut Array2<F>) {
    for mut row in scores.rows_mut() {
        let mut max = F::of(f64::NEG_INFINITY);
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        let mut sum = F::of(0.0);
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        let inv = F::of(1.0) / sum;
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    }
}

impl MultiHeadAttention {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        heads: usize,
        seed: u64,
    ) -> Self {
        assert!(dim % heads == 0, "heads must divide dim");
        MultiHeadAttention {
            wq: Linear::new(store, &format!("{name}.wq"), dim, dim, seed),
            wk: Linear::new(store, &format!("{name}.wk"), dim, dim, seed),
            wv: Linear::new(store, &format!("{name}.wv"), dim, dim, seed),
            wo: Linear::new(store, &format!("{name}.wo"), dim, dim, seed),
            heads,
            dim,
        }
    }

    /// `x` is `[len, dim]`; `prefix[i]` gives the visible key count for query
    /// `i` and must be at least 1 and at most `len`.
    pub fn forward<F: Real>(
        &self,
        store: &ParamStore<F>,
        x: &Array2<F>,
        prefix: &[usize],
    ) -> (Array2<F>, AttnCache<F>) {
        let len = x.nrows();
        debug_assert_eq!(prefix.len(), len);
        debug_assert!(prefix.iter().all(|&p| p >= 1 && p <= len));
        let dh = self.dim / self.heads;
        let scale = F::of(1.0 / (dh as f64).sqrt());

        let q = self.wq.forward(store, x);
        let k = self.wk.forward(store, x);
        let v = self.wv.forward(store, x);

        let groups = group_rows(prefix);
        let mut concat = Array2::<F>::zeros((len, self.dim));
        let mut probs = Vec::with_capacity(groups.len());
        for &(r0, r1, p) in &groups {
            let mut head_probs = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = q.slice(s![r0..r1, cols.clone()]);
                let kh = k.slice(s![0..p, cols.clone()]);
                let vh = v.slice(s![0..p, cols.clone()]);
                let mut scores = qh.dot(&kh.t());
                scores.mapv_inplace(|s| s * scale);
                softmax_rows_inplace(&mut scores);
                let out = scores.dot(&vh);
                concat.slice_mut(s![r0..r1, cols]).assign(&out);
                head_probs.push(scores);
            }
            probs.push(head_probs);
        }

        let y = self.wo.forward(store, &concat);
        (y, AttnCache { q, k, v, concat, groups, probs })
    }

    /// Backward through the whole block. `x` is the forward input; returns
    /// its gradient and accumulates parameter gradients.
    pub fn backward<F: Real>(
        &self,
        store: &ParamStore<F>,
        grads: &mut Grads<F>,
        x: &Array2<F>,
        cache: &AttnCache<F>,
        dy: &Array2<F>,
    ) -> Array2<F> {
        let len = x.nrows();
        let dh = self.dim / self.heads;
        let scale = F::of(1.0 / (dh as f64).sqrt());

        let dconcat = self.wo.backward(store, grads, &cache.concat, dy);

        let mut dq = Array2::<F>::zeros((len, self.dim));
        let mut dk = Array2::<F>::zeros((len, self.dim));
        let mut dv = Array2::<F>::zeros((len, self.dim));

        for (gi, &(r0, r1, p)) in cache.groups.iter().enumerate() {
            for h in 0..self.heads {
                let cols = h * dh..(h + 1) * dh;
                let probs = &cache.probs[gi][h];
                let dout = dconcat.slice(s![r0..r1, cols.clone()]);
                let qh = cache.q.slice(s![r0..r1, cols.clone()]);
                let kh = cache.k.slice(s![0..p, cols.clone()]);
                let vh = cache.v.slice(s![0..p, cols.clone()]);

                let dprobs = dout.dot(&vh.t());
                {
                    let mut dvh = dv.slice_mut(s![0..p, cols.clone()]);
                    dvh += &probs.t().dot(&dout);
                }
                // Softmax Jacobian: ds = p .* (dp - rowsum(dp .* p)).
                let rowdot = (&dprobs * probs).sum_axis(Axis(1));
                let mut dscores = dprobs;
                dscores -= &rowdot.view().insert_axis(Axis(1));
                dscores *= probs;
                dscores.mapv_inplace(|s| s * scale);

                {
                    let mut dqh = dq.slice_mut(s![r0..r1, cols.clone()]);
                    dqh += &dscores.dot(&kh);
                }
                {
                    let mut dkh = dk.slice_mut(s![0..p, cols]);
                    dkh += &dscores.t().dot(&qh);
                }
            }
        }

        let mut dx = self.wq.backward(store, grads, x, &dq);
        dx += &self.wk.backward(store, grads, x, &dk);
        dx += &self.wv.backward(store, grads, x, &dv);
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{max_rel_err, numeric_grad_input, numeric_grad_param};
    use crate::rng::RandomStream;

    fn random_x(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = RandomStream::new(seed, "attn/x");
        Array2::from_shape_simple_fn((rows, cols), || rng.normal())
    }

    #[test]
    fn probabilities_are_rowwise_simplex() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let attn = MultiHeadAttention::new(&mut store, "a", 8, 2, 3);
        let x = random_x(6, 8, 1);
        let prefix = vec![2, 2, 4, 4, 6, 6];
        let (_, cache) = attn.forward(&store, &x, &prefix);
        for (gi, &(r0, r1, p)) in cache.groups.iter().enumerate() {
            for h in 0..2 {
                let probs = &cache.probs[gi][h];
                assert_eq!(probs.shape(), &[r1 - r0, p]);
                for row in probs.rows() {
                    let sum: f64 = row.sum();
                    assert!((sum - 1.0).abs() < 1e-12, "row sum {sum}");
                    assert!(row.iter().all(|&v| v >= 0.0));
                }
            }
        }
    }

    #[test]
    fn prefix_truncation_ignores_later_keys_exactly() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let attn = MultiHeadAttention::new(&mut store, "a", 8, 2, 3);
        let mut x = random_x(6, 8, 2);
        let prefix = vec![2, 2, 4, 4, 6, 6];
        let (y1, _) = attn.forward(&store, &x, &prefix);
        // Perturb a row beyond every earlier prefix; rows 0..4 must not move.
        x[[5, 3]] += 10.0;
        let (y2, _) = attn.forward(&store, &x, &prefix);
        for i in 0..4 {
            for j in 0..8 {
                assert_eq!(y1[[i, j]], y2[[i, j]], "row {i} col {j} moved");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let attn = MultiHeadAttention::new(&mut store, "a", 6, 2, 5);
        let x = random_x(5, 6, 3);
        let prefix = vec![1, 3, 3, 5, 5];
        let w = random_x(5, 6, 4);

        let (y, cache) = attn.forward(&store, &x, &prefix);
        let _ = y;
        let mut grads = Grads::zeros(&store);
        let dx = attn.backward(&store, &mut grads, &x, &cache, &w);

        let fx = |x: &Array2<f64>| (&attn.forward(&store, x, &prefix).0 * &w).sum();
        let num_dx = numeric_grad_input(&fx, &x, 1e-6);
        let err = max_rel_err(&dx.into_dyn(), &num_dx.into_dyn(), 1e-8);
        assert!(err < 1e-6, "input grad rel err {err}");

        for id in [attn.wq.w, attn.wk.w, attn.wv.w, attn.wo.w, attn.wq.b] {
            let fp = |s: &ParamStore<f64>| (&attn.forward(s, &x, &prefix).0 * &w).sum();
            let num = numeric_grad_param(&fp, &mut store.clone(), id, 1e-6);
            let err = max_rel_err(grads.get(id), &num, 1e-8);
            assert!(err < 1e-6, "param {} rel err {err}", store.name(id));
        }
    }
}
