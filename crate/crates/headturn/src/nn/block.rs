//! Transformer encoder layer: attention plus a GELU feed-forward, in either
//! pre-norm or post-norm arrangement.
//!
//! Pre-norm (used by the fusion stack):
//! `h = x + attn(ln1(x)); y = h + ffn(ln2(h))`.
//! Post-norm (used by the per-chunk speech encoder, classic arrangement):
//! `h = ln1(x + attn(x)); y = ln2(h + ffn(h))`.

use ndarray::Array2;

use super::{gelu, gelu_backward, Grads, LayerNorm, Linear, MultiHeadAttention, NormCache, ParamStore, Real};
use super::attention::AttnCache;

pub const FFN_RATIO: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormStyle {
    Pre,
    Post,
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub style: NormStyle,
}

/// Everything the backward pass needs, captured during forward.
#[derive(Debug, Clone)]
pub struct EncoderLayerCache<F> {
    attn_in: Array2<F>,
    attn_cache: AttnCache<F>,
    ln1_cache: NormCache<F>,
    ffn_in: Array2<F>,
    ln2_cache: NormCache<F>,
    ffn_hidden_pre: Array2<F>,
    ffn_hidden: Array2<F>,
}

impl EncoderLayer {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        heads: usize,
        style: NormStyle,
        seed: u64,
    ) -> Self {
        EncoderLayer {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, seed),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            ffn1: Linear::new(store, &format!("{name}.ffn1"), dim, dim * FFN_RATIO, seed),
            ffn2: Linear::new(store, &format!("{name}.ffn2"), dim * FFN_RATIO, dim, seed),
            style,
        }
    }

    pub fn forward<F: Real>(
        &self,
        store: &ParamStore<F>,
        x: &Array2<F>,
        prefix: &[usize],
    ) -> (Array2<F>, EncoderLayerCache<F>) {
        match self.style {
            NormStyle::Pre => {
                let (a_in, ln1_cache) = self.ln1.forward(store, x);
                let (a, attn_cache) = self.attn.forward(store, &a_in, prefix);
                let h = x + &a;
                let (f_in, ln2_cache) = self.ln2.forward(store, &h);
                let hidden_pre = self.ffn1.forward(store, &f_in);
                let hidden = gelu(&hidden_pre);
                let f = self.ffn2.forward(store, &hidden);
                let y = &h + &f;
                (
                    y,
                    EncoderLayerCache {
                        attn_in: a_in,
                        attn_cache,
                        ln1_cache,
                        ffn_in: f_in,
                        ln2_cache,
                        ffn_hidden_pre: hidden_pre,
                        ffn_hidden: hidden,
                    },
                )
            }
            NormStyle::Post => {
                let (a, attn_cache) = self.attn.forward(store, x, prefix);
                let sum1 = x + &a;
                let (h, ln1_cache) = self.ln1.forward(store, &sum1);
                let hidden_pre = self.ffn1.forward(store, &h);
                let hidden = gelu(&hidden_pre);
                let f = self.ffn2.forward(store, &hidden);
                let sum2 = &h + &f;
                let (y, ln2_cache) = self.ln2.forward(store, &sum2);
                (
                    y,
                    EncoderLayerCache {
                        attn_in: x.clone(),
                        attn_cache,
                        ln1_cache,
                        ffn_in: h,
                        ln2_cache,
                        ffn_hidden_pre: hidden_pre,
                        ffn_hidden: hidden,
                    },
                )
            }
        }
    }

    pub fn backward<F: Real>(
        &self,
        store: &ParamStore<F>,
        grads: &mut Grads<F>,
        cache: &EncoderLayerCache<F>,
        dy: &Array2<F>,
    ) -> Array2<F> {
        match self.style {
            NormStyle::Pre => {
                // y = h + ffn2(gelu(ffn1(ln2(h)))), h = x + attn(ln1(x)).
                let dh_direct = dy;
                let dhidden = self.ffn2.backward(store, grads, &cache.ffn_hidden, dy);
                let dhidden_pre = gelu_backward(&cache.ffn_hidden_pre, &dhidden);
                let df_in = self.ffn1.backward(store, grads, &cache.ffn_in, &dhidden_pre);
                let mut dh = self.ln2.backward(store, grads, &cache.ln2_cache, &df_in);
                dh += dh_direct;

                let da = &dh;
                let da_in = self.attn.backward(store, grads, &cache.attn_in, &cache.attn_cache, da);
                let mut dx = self.ln1.backward(store, grads, &cache.ln1_cache, &da_in);
                dx += &dh;
                dx
            }
            NormStyle::Post => {
                // y = ln2(h + ffn(h)), h = ln1(x + attn(x)).
                let dsum2 = self.ln2.backward(store, grads, &cache.ln2_cache, dy);
                let dhidden = self.ffn2.backward(store, grads, &cache.ffn_hidden, &dsum2);
                let dhidden_pre = gelu_backward(&cache.ffn_hidden_pre, &dhidden);
                let mut dh = self.ffn1.backward(store, grads, &cache.ffn_in, &dhidden_pre);
                dh += &dsum2;

                let dsum1 = self.ln1.backward(store, grads, &cache.ln1_cache, &dh);
                let dx_attn =
                    self.attn.backward(store, grads, &cache.attn_in, &cache.attn_cache, &dsum1);
                &dsum1 + &dx_attn
            }
        }
    }
}
