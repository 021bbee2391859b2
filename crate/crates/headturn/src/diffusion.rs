//! Diffusion head: noise schedule, forward noising, the modulation-based
//! denoiser, the masked-position loss, and the ancestral sampler.
//!
//! The denoiser predicts the clean head vector directly (x0 form). Its
//! condition vector is the sum of a lifted fusion row, a learnable frame
//! position embedding, and a timestep embedding; each residual block reads
//! (shift, scale, gate) off that condition through an affine map and applies
//! a gated MLP to the modulated, normalized state. Gates and the output
//! layer start at zero, so a freshly initialized head is the zero map.
//!
//! Guidance combines the conditional and unconditional branch in x0 space as
//! `g = u + omega * (c - u)`. The endpoints skip the unused branch entirely,
//! so omega = 1 is bitwise the conditional prediction and omega = 0 the
//! unconditional one.

use ndarray::{s, Array1, Array2, ArrayView2};

use crate::config::{ModelConfig, EXP_DIM, HEAD_DIM, JAW_DIM};
use crate::error::{Error, Result};
use crate::nn::{
    gelu, gelu_backward, plain_norm, plain_norm_backward, silu, silu_backward, uniform_init2,
    Grads, Linear, NormCache, ParamId, ParamStore, Real,
};
use crate::rng::RandomStream;

const MLP_RATIO: usize = 4;
const SCHEDULE_S: f64 = 0.008;
const MAX_BETA: f64 = 0.999;
const TEMB_MAX_PERIOD: f64 = 10000.0;

/// Cosine noise schedule over `steps` training timesteps.
///
/// Betas come from the cosine envelope `f(t) = cos^2(((t/steps + s) /
/// (1 + s)) * pi/2)` as `beta_t = 1 - f(t)/f(t-1)`, clipped to 0.999, and
/// the stored `alpha_bar` is the running product of `1 - beta_t` so the two
/// arrays stay mutually consistent after clipping.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub steps: usize,
    /// `alpha_bar[t]` for t in 0..=steps, with `alpha_bar[0] = 1`.
    alpha_bar: Vec<f64>,
    /// `betas[t]` for t in 1..=steps; index 0 is unused and holds 0.
    betas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn cosine(steps: usize) -> Self {
        assert!(steps >= 1, "schedule needs at least one step");
        let f = |t: f64| {
            let x = (t / steps as f64 + SCHEDULE_S) / (1.0 + SCHEDULE_S);
            (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
        };
        let mut betas = vec![0.0; steps + 1];
        let mut alpha_bar = vec![1.0; steps + 1];
        for t in 1..=steps {
            betas[t] = (1.0 - f(t as f64) / f(t as f64 - 1.0)).min(MAX_BETA);
            alpha_bar[t] = alpha_bar[t - 1] * (1.0 - betas[t]);
        }
        NoiseSchedule { steps, alpha_bar, betas }
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    /// Evenly strided ancestral sub-schedule: `steps_out` timesteps, strictly
    /// increasing, ending exactly at `steps`.
    pub fn sub_schedule(&self, steps_out: usize) -> Vec<usize> {
        assert!(
            steps_out >= 1 && steps_out <= self.steps,
            "steps_out {steps_out} outside [1, {}]",
            self.steps
        );
        (0..steps_out).map(|k| ((k + 1) * self.steps) / steps_out).collect()
    }
}

/// Noises one clean vector to timestep `tau`, drawing the unit Gaussian from
/// `rng`: `x_tau = sqrt(abar) * x0 + sqrt(1 - abar) * eps`.
pub fn forward_noise<F: Real>(
    x0: &Array1<F>,
    tau: usize,
    schedule: &NoiseSchedule,
    rng: &mut RandomStream,
) -> Array1<F> {
    let ab = schedule.alpha_bar(tau);
    let (a, b) = (F::of(ab.sqrt()), F::of((1.0 - ab).sqrt()));
    x0.mapv(|v| v * a) + Array1::from_shape_simple_fn(x0.len(), || F::of(rng.normal()) * b)
}

/// Batched noising with explicit per-row timesteps and noise.
pub fn apply_noise<F: Real>(
    x0: &Array2<F>,
    taus: &[usize],
    eps: &Array2<F>,
    schedule: &NoiseSchedule,
) -> Array2<F> {
    let mut out = Array2::zeros(x0.raw_dim());
    for (i, &tau) in taus.iter().enumerate() {
        let ab = schedule.alpha_bar(tau);
        let (a, b) = (F::of(ab.sqrt()), F::of((1.0 - ab).sqrt()));
        let (x, e) = (x0.row(i), eps.row(i));
        let mut o = out.row_mut(i);
        for ((o, &x), &e) in o.iter_mut().zip(x.iter()).zip(e.iter()) {
            *o = x * a + e * b;
        }
    }
    out
}

/// Draws each position's timestep and noise from a substream keyed by its
/// window-global frame index, so the noising of one position never depends
/// on how many other positions are in the batch or in what order they come.
pub fn noise_positions<F: Real>(
    x0: &Array2<F>,
    frames: &[usize],
    schedule: &NoiseSchedule,
    base: &RandomStream,
) -> (Vec<usize>, Array2<F>, Array2<F>) {
    let n = x0.nrows();
    debug_assert_eq!(frames.len(), n);
    let mut taus = vec![0usize; n];
    let mut eps = Array2::<F>::zeros(x0.raw_dim());
    let mut buf = vec![0.0f64; x0.ncols()];
    for (i, &g) in frames.iter().enumerate() {
        let mut s = base.substream(g as u64);
        taus[i] = 1 + s.below(schedule.steps as u64) as usize;
        s.fill_normal(&mut buf);
        for (o, &v) in eps.row_mut(i).iter_mut().zip(buf.iter()) {
            *o = F::of(v);
        }
    }
    let x_tau = apply_noise(x0, &taus, &eps, schedule);
    (taus, eps, x_tau)
}

/// `x * (1 + scale) + shift`, the conditioning primitive of the denoiser.
pub fn modulate<F: Real>(x: &Array2<F>, shift: &ArrayView2<F>, scale: &ArrayView2<F>) -> Array2<F> {
    let mut out = x.clone();
    ndarray::Zip::from(&mut out).and(shift).and(scale).for_each(|o, &sh, &sc| {
        *o = *o * (F::of(1.0) + sc) + sh;
    });
    out
}

/// One residual modulation block. `mod_proj` maps the condition to
/// concatenated (shift, scale, gate) and starts at zero, so the block is an
/// identity map until training moves the gates.
#[derive(Debug, Clone)]
pub struct ModBlock {
    pub mod_proj: Linear,
    pub mlp1: Linear,
    pub mlp2: Linear,
}

/// The denoiser network.
#[derive(Debug, Clone)]
pub struct DiffusionHead {
    pub input_lift: Linear,
    pub cond_lift: Linear,
    pub temb_l1: Linear,
    pub temb_l2: Linear,
    pub p2: ParamId,
    pub blocks: Vec<ModBlock>,
    pub final_mod: Linear,
    pub out: Linear,
    pub d_m: usize,
}

#[derive(Debug, Clone)]
struct BlockCache<F> {
    norm: NormCache<F>,
    modulated: Array2<F>,
    mlp_pre: Array2<F>,
    mlp_hidden: Array2<F>,
    mlp_out: Array2<F>,
    mod_vec: Array2<F>,
}

#[derive(Debug, Clone)]
pub struct DenoiseCache<F> {
    x_tau: Array2<F>,
    cond: Array2<F>,
    frames: Vec<usize>,
    sinus: Array2<F>,
    temb_pre: Array2<F>,
    temb_hidden: Array2<F>,
    c: Array2<F>,
    blocks: Vec<BlockCache<F>>,
    final_norm: NormCache<F>,
    final_mod_vec: Array2<F>,
    final_modulated: Array2<F>,
}

/// Classic sinusoidal embedding of integer timesteps: `d_m/2` cosine
/// features followed by `d_m/2` sine features at geometrically spaced
/// frequencies.
fn timestep_embedding<F: Real>(taus: &[usize], d_m: usize) -> Array2<F> {
    let half = d_m / 2;
    let ln_max = TEMB_MAX_PERIOD.ln();
    Array2::from_shape_fn((taus.len(), d_m), |(r, cidx)| {
        let (i, is_sin) = if cidx < half { (cidx, false) } else { (cidx - half, true) };
        let freq = (-ln_max * i as f64 / half as f64).exp();
        let arg = taus[r] as f64 * freq;
        F::of(if is_sin { arg.sin() } else { arg.cos() })
    })
}

impl DiffusionHead {
    pub fn new<F: Real>(store: &mut ParamStore<F>, cfg: &ModelConfig, seed: u64) -> Self {
        let d = cfg.d_m;
        let mut rp = RandomStream::new(seed, "init/diff.P2");
        DiffusionHead {
            input_lift: Linear::new(store, "diff.input_lift", HEAD_DIM, d, seed),
            cond_lift: Linear::new(store, "diff.cond_lift", cfg.d_e, d, seed),
            temb_l1: Linear::new(store, "diff.temb.l1", d, d, seed),
            temb_l2: Linear::new(store, "diff.temb.l2", d, d, seed),
            p2: store.add2(
                "diff.P2",
                uniform_init2(cfg.frame_capacity(), d, d, &mut rp),
                false,
            ),
            blocks: (0..cfg.k_blocks)
                .map(|i| ModBlock {
                    mod_proj: Linear::new_zeroed(store, &format!("diff.block{i}.mod"), d, 3 * d),
                    mlp1: Linear::new(store, &format!("diff.block{i}.mlp1"), d, MLP_RATIO * d, seed),
                    mlp2: Linear::new(store, &format!("diff.block{i}.mlp2"), MLP_RATIO * d, d, seed),
                })
                .collect(),
            final_mod: Linear::new_zeroed(store, "diff.final_mod", d, 2 * d),
            out: Linear::new_zeroed(store, "diff.out", d, HEAD_DIM),
            d_m: d,
        }
    }

    /// Predicts the clean vectors for a batch of noised positions.
    /// `frames` are window-global agent head frame indices addressing the
    /// position table.
    pub fn forward<F: Real>(
        &self,
        store: &ParamStore<F>,
        x_tau: &Array2<F>,
        taus: &[usize],
        cond: &Array2<F>,
        frames: &[usize],
    ) -> (Array2<F>, DenoiseCache<F>) {
        let n = x_tau.nrows();
        debug_assert_eq!(taus.len(), n);
        debug_assert_eq!(cond.nrows(), n);
        debug_assert_eq!(frames.len(), n);
        let p2 = store.get2(self.p2);
        assert!(
            frames.iter().all(|&g| g < p2.nrows()),
            "frame index beyond the position table"
        );

        let sinus = timestep_embedding::<F>(taus, self.d_m);
        let temb_pre = self.temb_l1.forward(store, &sinus);
        let temb_hidden = silu(&temb_pre);
        let temb = self.temb_l2.forward(store, &temb_hidden);

        let mut c = self.cond_lift.forward(store, cond);
        for (i, &g) in frames.iter().enumerate() {
            let mut row = c.row_mut(i);
            row += &p2.row(g);
        }
        c += &temb;

        let mut x = self.input_lift.forward(store, x_tau);
        let d = self.d_m;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let mod_vec = block.mod_proj.forward(store, &c);
            let (hn, norm) = plain_norm(&x);
            let modulated =
                modulate(&hn, &mod_vec.slice(s![.., 0..d]), &mod_vec.slice(s![.., d..2 * d]));
            let mlp_pre = block.mlp1.forward(store, &modulated);
            let mlp_hidden = gelu(&mlp_pre);
            let mlp_out = block.mlp2.forward(store, &mlp_hidden);
            let gate = mod_vec.slice(s![.., 2 * d..3 * d]);
            ndarray::Zip::from(&mut x).and(&mlp_out).and(&gate).for_each(|x, &u, &g| {
                *x = *x + g * u;
            });
            blocks.push(BlockCache { norm, modulated, mlp_pre, mlp_hidden, mlp_out, mod_vec });
        }

        let final_mod_vec = self.final_mod.forward(store, &c);
        let (hn, final_norm) = plain_norm(&x);
        let final_modulated = modulate(
            &hn,
            &final_mod_vec.slice(s![.., 0..d]),
            &final_mod_vec.slice(s![.., d..2 * d]),
        );
        let x0_hat = self.out.forward(store, &final_modulated);
        (
            x0_hat,
            DenoiseCache {
                x_tau: x_tau.clone(),
                cond: cond.clone(),
                frames: frames.to_vec(),
                sinus,
                temb_pre,
                temb_hidden,
                c,
                blocks,
                final_norm,
                final_mod_vec,
                final_modulated,
            },
        )
    }

    /// Accumulates parameter gradients and returns the gradient at the
    /// condition rows, the path back into the fusion stack.
    pub fn backward<F: Real>(
        &self,
        store: &ParamStore<F>,
        grads: &mut Grads<F>,
        cache: &DenoiseCache<F>,
        dx0_hat: &Array2<F>,
    ) -> Array2<F> {
        let d = self.d_m;
        let one = F::of(1.0);
        let n = dx0_hat.nrows();

        let dfinal_modulated = self.out.backward(store, grads, &cache.final_modulated, dx0_hat);
        let scale2 = cache.final_mod_vec.slice(s![.., d..2 * d]);
        let hn_final = &cache.final_norm.xhat;
        let mut dhn = dfinal_modulated.clone();
        ndarray::Zip::from(&mut dhn).and(&scale2).for_each(|g, &sc| *g = *g * (one + sc));
        let mut dfinal_vec = Array2::<F>::zeros((n, 2 * d));
        dfinal_vec.slice_mut(s![.., 0..d]).assign(&dfinal_modulated);
        {
            let mut dscale = dfinal_vec.slice_mut(s![.., d..2 * d]);
            ndarray::Zip::from(&mut dscale)
                .and(&dfinal_modulated)
                .and(hn_final)
                .for_each(|o, &g, &h| *o = g * h);
        }
        let mut dc = self.final_mod.backward(store, grads, &cache.c, &dfinal_vec);
        let mut dx = plain_norm_backward(&cache.final_norm, &dhn);

        for (block, bcache) in self.blocks.iter().zip(&cache.blocks).rev() {
            let gate = bcache.mod_vec.slice(s![.., 2 * d..3 * d]);
            let scale = bcache.mod_vec.slice(s![.., d..2 * d]);
            // The residual x_out = x_in + gate * u splits the incoming
            // gradient three ways: straight through, into u, and into gate.
            let mut du = dx.clone();
            ndarray::Zip::from(&mut du).and(&gate).for_each(|g, &gt| *g = *g * gt);
            let mut dgate = dx.clone();
            ndarray::Zip::from(&mut dgate).and(&bcache.mlp_out).for_each(|g, &u| *g = *g * u);

            let dhidden = block.mlp2.backward(store, grads, &bcache.mlp_hidden, &du);
            let dpre = gelu_backward(&bcache.mlp_pre, &dhidden);
            let dmodulated = block.mlp1.backward(store, grads, &bcache.modulated, &dpre);

            let hn = &bcache.norm.xhat;
            let mut dhn = dmodulated.clone();
            ndarray::Zip::from(&mut dhn).and(&scale).for_each(|g, &sc| *g = *g * (one + sc));
            let mut dmod_vec = Array2::<F>::zeros((n, 3 * d));
            dmod_vec.slice_mut(s![.., 0..d]).assign(&dmodulated);
            {
                let mut ds = dmod_vec.slice_mut(s![.., d..2 * d]);
                ndarray::Zip::from(&mut ds)
                    .and(&dmodulated)
                    .and(hn)
                    .for_each(|o, &g, &h| *o = g * h);
            }
            dmod_vec.slice_mut(s![.., 2 * d..3 * d]).assign(&dgate);
            dc += &block.mod_proj.backward(store, grads, &cache.c, &dmod_vec);

            dx += &plain_norm_backward(&bcache.norm, &dhn);
        }
        let _ = self.input_lift.backward(store, grads, &cache.x_tau, &dx);

        // The condition fans out into the lifted fusion row, position table
        // rows, and the timestep MLP; only the first leaves this module.
        let p2_rows = store.get2(self.p2).nrows();
        let mut dp2 = Array2::<F>::zeros((p2_rows, d));
        for (i, &g) in cache.frames.iter().enumerate() {
            let mut row = dp2.row_mut(g);
            row += &dc.row(i);
        }
        grads.acc2(self.p2, &dp2);

        let dtemb_hidden = self.temb_l2.backward(store, grads, &cache.temb_hidden, &dc);
        let dtemb_pre = silu_backward(&cache.temb_pre, &dtemb_hidden);
        let _ = self.temb_l1.backward(store, grads, &cache.sinus, &dtemb_pre);

        self.cond_lift.backward(store, grads, &cache.cond, &dc)
    }
}

/// Squared-error loss over masked positions, reported separately for the
/// expression, jaw, and pose slices; each component is averaged over
/// positions and the three are summed with equal weight. Contributions are
/// accumulated in ascending frame order, so any batch ordering of the same
/// positions produces bitwise identical sums. `frames` must be distinct.
pub fn split_loss<F: Real>(
    x0: &Array2<F>,
    x0_hat: &Array2<F>,
    frames: &[usize],
) -> (f64, [f64; 3]) {
    let n = x0.nrows();
    assert!(n > 0, "loss over an empty batch");
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| frames[i]);
    let mut comp = [0.0f64; 3];
    for &i in &order {
        let mut acc = [0.0f64; 3];
        for dim in 0..HEAD_DIM {
            let d = (x0_hat[[i, dim]] - x0[[i, dim]]).to_f64();
            let slot = if dim < EXP_DIM {
                0
            } else if dim < EXP_DIM + JAW_DIM {
                1
            } else {
                2
            };
            acc[slot] += d * d;
        }
        for (c, a) in comp.iter_mut().zip(acc) {
            *c += a;
        }
    }
    for c in &mut comp {
        *c /= n as f64;
    }
    (comp[0] + comp[1] + comp[2], comp)
}

/// Gradient of [`split_loss`]'s total with respect to the predictions:
/// `2/n * (x0_hat - x0)`, the same expression for all three components
/// because they share the position average and unit weights.
pub fn split_loss_grad<F: Real>(x0: &Array2<F>, x0_hat: &Array2<F>) -> Array2<F> {
    let scale = F::of(2.0 / x0.nrows() as f64);
    let mut g = x0_hat - x0;
    g.mapv_inplace(|v| v * scale);
    g
}

/// Noises a batch of clean targets and scores a predictor on it. Generic
/// over the predictor so tests can substitute oracles for the real head.
pub fn diffusion_loss<F: Real>(
    predict: impl Fn(&Array2<F>, &[usize], &Array2<F>, &[usize]) -> Array2<F>,
    schedule: &NoiseSchedule,
    x0: &Array2<F>,
    cond: &Array2<F>,
    frames: &[usize],
    base: &RandomStream,
) -> (f64, [f64; 3]) {
    let (taus, _eps, x_tau) = noise_positions(x0, frames, schedule, base);
    let x0_hat = predict(&x_tau, &taus, cond, frames);
    split_loss(x0, &x0_hat, frames)
}

/// The guided prediction `u + omega * (c - u)` for interior omega.
pub fn guided_x0<F: Real>(cond_pred: &Array2<F>, uncond_pred: &Array2<F>, omega: f64) -> Array2<F> {
    let w = F::of(omega);
    let mut g = cond_pred - uncond_pred;
    g.mapv_inplace(|v| v * w);
    g + uncond_pred
}

/// Respaced ancestral sampler. `predict(x_tau, taus, cond)` returns x0
/// predictions; `cond` and `uncond` are condition rows for the two guidance
/// branches. Each sub-step converts the guided x0 into the posterior mean of
/// the previous sub-step and perturbs it with the posterior variance; the
/// final sub-step returns the prediction itself. `omega = 1` never evaluates
/// the unconditional branch and `omega = 0` never evaluates the conditional
/// one, so those endpoints cost a single branch per step.
pub fn sample<F: Real>(
    predict: impl Fn(&Array2<F>, &[usize], &Array2<F>) -> Array2<F>,
    schedule: &NoiseSchedule,
    cond: &Array2<F>,
    uncond: Option<&Array2<F>>,
    steps_out: usize,
    omega: f64,
    rng: &mut RandomStream,
) -> Result<Array2<F>> {
    if steps_out == 0 || steps_out > schedule.steps {
        return Err(Error::invalid(format!(
            "steps_out must lie in [1, {}], got {steps_out}",
            schedule.steps
        )));
    }
    if omega != 1.0 && uncond.is_none() {
        return Err(Error::invalid(format!(
            "omega = {omega} needs an unconditional branch"
        )));
    }
    let n = cond.nrows();
    let taus = schedule.sub_schedule(steps_out);
    let mut x = Array2::from_shape_simple_fn((n, HEAD_DIM), || F::of(rng.normal()));
    for idx in (0..taus.len()).rev() {
        let t_hi = taus[idx];
        let t_lo = if idx == 0 { 0 } else { taus[idx - 1] };
        let tvec = vec![t_hi; n];
        let g = if omega == 1.0 {
            predict(&x, &tvec, cond)
        } else if omega == 0.0 {
            predict(&x, &tvec, uncond.unwrap())
        } else {
            let pc = predict(&x, &tvec, cond);
            let pu = predict(&x, &tvec, uncond.unwrap());
            guided_x0(&pc, &pu, omega)
        };
        if t_lo == 0 {
            x = g;
        } else {
            let ab_hi = schedule.alpha_bar(t_hi);
            let ab_lo = schedule.alpha_bar(t_lo);
            let a_eff = ab_hi / ab_lo;
            let b_eff = 1.0 - a_eff;
            let c0 = F::of(ab_lo.sqrt() * b_eff / (1.0 - ab_hi));
            let ct = F::of(a_eff.sqrt() * (1.0 - ab_lo) / (1.0 - ab_hi));
            let sigma = F::of(((1.0 - ab_lo) / (1.0 - ab_hi) * b_eff).sqrt());
            let mut next = Array2::<F>::zeros((n, HEAD_DIM));
            ndarray::Zip::from(&mut next).and(&g).and(&x).for_each(|o, &gv, &xv| {
                *o = c0 * gv + ct * xv;
            });
            for o in next.iter_mut() {
                *o = *o + sigma * F::of(rng.normal());
            }
            x = next;
        }
    }
    Ok(x)
}
