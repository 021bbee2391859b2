//! Deterministic, splittable random streams.
//!
//! Every random draw in the library flows through [`RandomStream`], which is
//! keyed by a `u64` seed plus a string label. The generator is a counter
//! style 64-bit mixer (SplitMix64): the key fixes the whole sequence, so the
//! same `(seed, label)` pair yields the same draws on every platform and
//! independent labels yield independent streams. There is no global RNG and
//! no dependence on thread scheduling.

/// SplitMix64 finalizer. Bijective on `u64`, good avalanche behavior.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a hash of the label bytes, used to fold the label into the key.
#[inline]
fn hash_label(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in label.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A deterministic random stream identified by `(seed, label)`.
///
/// Draws advance an internal counter through the SplitMix64 mixer. Cloning a
/// stream clones its position; use [`RandomStream::substream`] to derive an
/// independent child stream instead.
#[derive(Debug, Clone)]
pub struct RandomStream {
    key: u64,
    counter: u64,
    gauss_spare: Option<f64>,
}

impl RandomStream {
    /// Opens the stream identified by `(seed, label)`.
    pub fn new(seed: u64, label: &str) -> Self {
        let key = mix64(mix64(seed) ^ hash_label(label));
        RandomStream { key, counter: 0, gauss_spare: None }
    }

    /// Derives an independent child stream. Children with different indices
    /// are mutually independent and do not disturb the parent's position.
    pub fn substream(&self, index: u64) -> Self {
        let key = mix64(self.key ^ mix64(index.wrapping_add(0x5851_f42d_4c95_7f2d)));
        RandomStream { key, counter: 0, gauss_spare: None }
    }

    /// Next raw 64-bit draw.
    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let out = mix64(self.key.wrapping_add(self.counter.wrapping_mul(0x9e37_79b9_7f4a_7c15)));
        self.counter = self.counter.wrapping_add(1);
        out
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[lo, hi)`.
    #[inline]
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`. `n` must be nonzero.
    #[inline]
    pub fn below(&mut self, n: u64) -> u64 {
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Standard normal draw via Box-Muller. The paired value is cached, so
    /// draws come in deterministic order.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.gauss_spare.take() {
            return z;
        }
        // u1 in (0, 1] keeps the log finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.gauss_spare = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Fills a slice with standard normal draws.
    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.normal();
        }
    }

    /// Draws `m` distinct indices uniformly from `[0, n)` via a partial
    /// Fisher-Yates shuffle. The result is sorted ascending.
    pub fn choose_sorted(&mut self, n: usize, m: usize) -> Vec<usize> {
        assert!(m <= n, "cannot choose {m} of {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..m {
            let j = i + self.below((n - i) as u64) as usize;
            pool.swap(i, j);
        }
        let mut picked = pool[..m].to_vec();
        picked.sort_unstable();
        picked
    }
}
