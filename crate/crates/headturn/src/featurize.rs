//! Waveform featurization and the two token encoders.
//!
//! A chunk of audio (`c` seconds at `f_s` Hz) is framed into 400-sample
//! windows with hop 320, giving `c*f_w - 1` rows. Each row holds a log
//! short-time energy followed by `d_raw - 1` log band energies sampled from a
//! zero-padded 1024-point DFT at frequencies spaced linearly up to `f_s/2`.
//! Rows are then linearly resampled onto the head frame grid (`c*f_h` rows),
//! preserving endpoints.
//!
//! The speech encoder lifts rows to `d_t`, adds a learnable per-row position
//! vector, applies one bidirectional self-attention encoder layer within the
//! chunk, and projects to token width. The head encoder is a per-frame MLP
//! `56 -> d_t/2 -> d_t/2 -> d_t` with ReLU after the hidden layers. Both are
//! stateless across chunks.

use ndarray::Array2;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{
    relu, relu_backward, uniform_init2, EncoderLayer, EncoderLayerCache, Grads, Linear, NormStyle,
    ParamId, ParamStore, Real,
};
use crate::rng::RandomStream;

/// Analysis window length in samples.
pub const WINDOW: usize = 400;
/// Hop between windows in samples.
pub const HOP: usize = 320;
/// Zero-padded DFT length used for the band energies.
const FFT_N: usize = 1024;
/// Floor inside every log so silence maps to a finite constant.
const LOG_EPS: f64 = 1e-10;

/// DFT bin index sampled for band `j` (1-based among `d_raw - 1` bands).
/// Band centers are spaced linearly from near zero to `f_s/2`.
fn band_bin(j: usize, d_raw: usize) -> usize {
    let bands = (d_raw - 1) as f64;
    ((j as f64) * (FFT_N as f64) / (2.0 * bands)).round() as usize
}

/// Iterative radix-2 FFT over `FFT_N` points. Input shorter than `FFT_N` is
/// zero padded. Returns (re, im).
fn fft_1024(input: &[f64]) -> (Vec<f64>, Vec<f64>) {
    debug_assert!(input.len() <= FFT_N);
    let n = FFT_N;
    let mut re = vec![0.0; n];
    let mut im = vec![0.0; n];
    // Bit-reversed copy-in.
    let bits = n.trailing_zeros();
    for (i, &x) in input.iter().enumerate() {
        let rev = (i as u32).reverse_bits() >> (32 - bits);
        re[rev as usize] = x;
    }
    let mut len = 2;
    while len <= n {
        let ang = -2.0 * std::f64::consts::PI / len as f64;
        let (wr, wi) = (ang.cos(), ang.sin());
        let mut start = 0;
        while start < n {
            let (mut cr, mut ci) = (1.0, 0.0);
            for k in 0..len / 2 {
                let a = start + k;
                let b = a + len / 2;
                let tr = re[b] * cr - im[b] * ci;
                let ti = re[b] * ci + im[b] * cr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
                let ncr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = ncr;
            }
            start += len;
        }
        len <<= 1;
    }
    (re, im)
}

/// Featurizes one chunk of waveform into `[c*f_w - 1, d_raw]` rows:
/// column 0 is log short-time energy, columns `1..d_raw` are log band
/// energies. Deterministic, no learnable parameters.
pub fn extract_features(wave: &[f64], cfg: &ModelConfig) -> Result<Array2<f64>> {
    let expected = cfg.chunk_samples();
    if wave.len() != expected {
        return Err(Error::Shape {
            what: "chunk waveform".into(),
            expected: format!("{expected} samples"),
            got: format!("{}", wave.len()),
        });
    }
    let rows = cfg.feat_rows();
    let mut out = Array2::<f64>::zeros((rows, cfg.d_raw));
    let norm = (WINDOW * WINDOW) as f64;
    for r in 0..rows {
        let seg = &wave[r * HOP..r * HOP + WINDOW];
        let energy = seg.iter().map(|v| v * v).sum::<f64>() / WINDOW as f64;
        out[[r, 0]] = (energy + LOG_EPS).ln();
        let (re, im) = fft_1024(seg);
        for j in 1..cfg.d_raw {
            let k = band_bin(j, cfg.d_raw);
            let power = (re[k] * re[k] + im[k] * im[k]) / norm;
            out[[r, j]] = (power + LOG_EPS).ln();
        }
    }
    Ok(out)
}

/// Linearly resamples feature rows onto `out_rows` rows. The output grid
/// spans `[0, out_rows-1]` mapped onto `[0, rows-1]`, so both endpoints are
/// preserved exactly.
pub fn interp_to_framerate(feats: &Array2<f64>, out_rows: usize) -> Array2<f64> {
    let rows = feats.nrows();
    assert!(rows >= 1 && out_rows >= 1, "need at least one row");
    let mut out = Array2::<f64>::zeros((out_rows, feats.ncols()));
    for i in 0..out_rows {
        let pos = if out_rows == 1 {
            0.0
        } else {
            i as f64 * (rows - 1) as f64 / (out_rows - 1) as f64
        };
        let i0 = (pos.floor() as usize).min(rows - 1);
        let i1 = (i0 + 1).min(rows - 1);
        let frac = pos - i0 as f64;
        let lo = feats.row(i0);
        let hi = feats.row(i1);
        let mut dst = out.row_mut(i);
        for ((d, &a), &b) in dst.iter_mut().zip(lo.iter()).zip(hi.iter()) {
            *d = (1.0 - frac) * a + frac * b;
        }
    }
    out
}

/// Per-chunk speech encoder: lift, position vector, one bidirectional
/// encoder layer, projection to token width.
#[derive(Debug, Clone)]
pub struct SpeechEncoder {
    pub lift: Linear,
    pub pos: ParamId,
    pub enc: EncoderLayer,
    pub proj: Linear,
    pub k_frames: usize,
}

#[derive(Debug, Clone)]
pub struct SpeechCache<F> {
    feats: Array2<F>,
    enc_cache: EncoderLayerCache<F>,
    enc_out: Array2<F>,
}

impl SpeechEncoder {
    pub fn new<F: Real>(store: &mut ParamStore<F>, cfg: &ModelConfig, seed: u64) -> Self {
        let d_s = cfg.d_t;
        let mut rng = RandomStream::new(seed, "init/speech.enc.pos");
        let pos = store.add2(
            "speech.enc.pos",
            uniform_init2(cfg.k_frames(), d_s, d_s, &mut rng),
            false,
        );
        SpeechEncoder {
            lift: Linear::new(store, "speech.lift", cfg.d_raw, d_s, seed),
            pos,
            enc: EncoderLayer::new(store, "speech.enc", d_s, cfg.encoder_heads, NormStyle::Post, seed),
            proj: Linear::new(store, "speech.proj", d_s, cfg.d_t, seed),
            k_frames: cfg.k_frames(),
        }
    }

    /// `feats` is `[k_frames, d_raw]` (already resampled); returns tokens
    /// `[k_frames, d_t]`.
    pub fn forward<F: Real>(
        &self,
        store: &ParamStore<F>,
        feats: &Array2<F>,
    ) -> (Array2<F>, SpeechCache<F>) {
        debug_assert_eq!(feats.nrows(), self.k_frames);
        let mut lifted = self.lift.forward(store, feats);
        lifted += &store.get2(self.pos);
        let prefix = vec![lifted.nrows(); lifted.nrows()];
        let (enc_out, enc_cache) = self.enc.forward(store, &lifted, &prefix);
        let tokens = self.proj.forward(store, &enc_out);
        (tokens, SpeechCache { feats: feats.clone(), enc_cache, enc_out })
    }

    pub fn backward<F: Real>(
        &self,
        store: &ParamStore<F>,
        grads: &mut Grads<F>,
        cache: &SpeechCache<F>,
        dtokens: &Array2<F>,
    ) {
        let denc_out = self.proj.backward(store, grads, &cache.enc_out, dtokens);
        let dlifted = self.enc.backward(store, grads, &cache.enc_cache, &denc_out);
        grads.acc2(self.pos, &dlifted);
        let _ = self.lift.backward(store, grads, &cache.feats, &dlifted);
    }
}

/// Per-frame head parameter encoder: `56 -> d_t/2 -> d_t/2 -> d_t`.
#[derive(Debug, Clone)]
pub struct HeadEncoder {
    pub l1: Linear,
    pub l2: Linear,
    pub l3: Linear,
}

#[derive(Debug, Clone)]
pub struct HeadCache<F> {
    frames: Array2<F>,
    h1_pre: Array2<F>,
    h1: Array2<F>,
    h2_pre: Array2<F>,
    h2: Array2<F>,
}

impl HeadEncoder {
    pub fn new<F: Real>(store: &mut ParamStore<F>, cfg: &ModelConfig, seed: u64) -> Self {
        let hidden = cfg.d_t / 2;
        HeadEncoder {
            l1: Linear::new(store, "head.mlp.l1", cfg.d_h, hidden, seed),
            l2: Linear::new(store, "head.mlp.l2", hidden, hidden, seed),
            l3: Linear::new(store, "head.mlp.l3", hidden, cfg.d_t, seed),
        }
    }

    /// `frames` is `[n, 56]`; returns tokens `[n, d_t]`. Frames are encoded
    /// independently, so the map commutes with row permutations.
    pub fn forward<F: Real>(
        &self,
        store: &ParamStore<F>,
        frames: &Array2<F>,
    ) -> (Array2<F>, HeadCache<F>) {
        let h1_pre = self.l1.forward(store, frames);
        let h1 = relu(&h1_pre);
        let h2_pre = self.l2.forward(store, &h1);
        let h2 = relu(&h2_pre);
        let tokens = self.l3.forward(store, &h2);
        (tokens, HeadCache { frames: frames.clone(), h1_pre, h1, h2_pre, h2 })
    }

    pub fn backward<F: Real>(
        &self,
        store: &ParamStore<F>,
        grads: &mut Grads<F>,
        cache: &HeadCache<F>,
        dtokens: &Array2<F>,
    ) -> Array2<F> {
        let dh2 = self.l3.backward(store, grads, &cache.h2, dtokens);
        let dh2_pre = relu_backward(&cache.h2_pre, &dh2);
        let dh1 = self.l2.backward(store, grads, &cache.h1, &dh2_pre);
        let dh1_pre = relu_backward(&cache.h1_pre, &dh1);
        self.l1.backward(store, grads, &cache.frames, &dh1_pre)
    }
}

/// Convenience: featurize and resample one chunk in f64, then convert.
pub fn chunk_features<F: Real>(wave: &[f64], cfg: &ModelConfig) -> Result<Array2<F>> {
    let raw = extract_features(wave, cfg)?;
    let interp = interp_to_framerate(&raw, cfg.k_frames());
    Ok(interp.mapv(F::of))
}
