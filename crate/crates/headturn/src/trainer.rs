//! Training loop: target normalization, the masked-denoising objective over
//! interleaved windows, AdamW updates, and checkpoints.
//!
//! Every random decision in a step (window placement, the user-stream drop
//! coin, the masked frame subset, per-position noise) comes from
//! counter-based streams keyed by seed, step index, and batch slot. A slot's
//! draws never depend on how slots are spread over workers, so a resumed run
//! replays the exact trajectory and per-step loss records are identical for
//! any worker count. Gradient reduction sums worker accumulators in worker
//! order, which is bit-stable for a fixed worker count; strict runs use one
//! worker.

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayD, Ix1};
use serde::Serialize;

use crate::archive::{Archive, ArchiveArray};
use crate::config::{ModelConfig, Precision, HEAD_DIM};
use crate::context::{mask_count, TurnTokens, WindowTokens};
use crate::datagen::DialogueSample;
use crate::diffusion::{noise_positions, split_loss, split_loss_grad};
use crate::error::{Error, Result};
use crate::model::{chunk_sample, Model, TurnInput};
use crate::nn::{AdamW, Grads, ParamStore, Real};
use crate::rng::RandomStream;

/// Checkpoint layout revision; bumped whenever the entry set changes shape.
const CKPT_VERSION: i64 = 1;

/// Per-dimension z-score statistics over head frames. Both speakers' head
/// streams of the training split are pooled, since either side can appear as
/// the generation target.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl NormStats {
    /// Two-pass population mean and standard deviation over every row of the
    /// given frame blocks. The std is floored at 1e-6 so constant dimensions
    /// stay invertible.
    pub fn compute<'a, I>(blocks: I) -> Result<NormStats>
    where
        I: IntoIterator<Item = &'a Array2<f64>>,
    {
        let blocks: Vec<&Array2<f64>> = blocks.into_iter().collect();
        let mut count = 0usize;
        let mut mean = Array1::<f64>::zeros(HEAD_DIM);
        for b in &blocks {
            if b.ncols() != HEAD_DIM {
                return Err(Error::Shape {
                    what: "normalization frames".into(),
                    expected: format!("{HEAD_DIM} columns"),
                    got: format!("{} columns", b.ncols()),
                });
            }
            count += b.nrows();
            for row in b.rows() {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
        }
        if count == 0 {
            return Err(Error::invalid("no head frames to compute normalization stats from"));
        }
        mean.mapv_inplace(|sum| sum / count as f64);
        let mut std = Array1::<f64>::zeros(HEAD_DIM);
        for b in &blocks {
            for row in b.rows() {
                for ((acc, &m), &v) in std.iter_mut().zip(&mean).zip(row) {
                    let d = v - m;
                    *acc += d * d;
                }
            }
        }
        std.mapv_inplace(|sum| (sum / count as f64).sqrt().max(1e-6));
        Ok(NormStats { mean, std })
    }

    /// Stats that leave values untouched; useful as a neutral placeholder.
    pub fn identity() -> NormStats {
        NormStats { mean: Array1::zeros(HEAD_DIM), std: Array1::ones(HEAD_DIM) }
    }

    pub fn normalize(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            for ((v, &m), &s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        out
    }

    pub fn denormalize(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            for ((v, &m), &s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * s + m;
            }
        }
        out
    }

    /// Denormalizes model output rows into full-precision head frames.
    pub fn denormalize_rows<F: Real>(&self, x: &Array2<F>) -> Array2<f64> {
        let mut out = Array2::<f64>::zeros(x.raw_dim());
        for (mut dst, src) in out.rows_mut().into_iter().zip(x.rows()) {
            for (((o, &v), &m), &s) in dst.iter_mut().zip(src).zip(&self.mean).zip(&self.std) {
                *o = v.to_f64() * s + m;
            }
        }
        out
    }
}

/// Pools every head frame of both speakers across the given samples.
pub fn compute_norm_stats(samples: &[DialogueSample]) -> Result<NormStats> {
    NormStats::compute(samples.iter().flat_map(|s| [&s.user_head, &s.agent_head]))
}

/// Same pooling, over already featurized samples.
pub fn norm_stats_from_prepared<F: Real>(samples: &[PreparedSample<F>]) -> Result<NormStats> {
    NormStats::compute(
        samples.iter().flat_map(|s| s.turns.iter()).flat_map(|t| [&t.user_head, &t.agent_head]),
    )
}

/// Optimization hyperparameters. Defaults follow the training recipe: batch
/// 32 for 400 epochs, lr 1e-4 after a 100-iteration linear warmup, AdamW
/// with betas (0.9, 0.95) and weight decay 0.01.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_iters: u64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// When set, each step trains on a random contiguous window of
    /// `min..=max` turns instead of the full clip. Shorter windows are how
    /// small-budget runs see every context length.
    pub window_turns: Option<(usize, usize)>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            warmup_iters: 100,
            batch_size: 32,
            epochs: 400,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.01,
            window_turns: None,
        }
    }
}

impl TrainConfig {
    /// Linear warmup to `lr` over `warmup_iters` updates, then constant.
    /// `step` counts completed updates, so the very first update already
    /// moves with lr/warmup_iters rather than zero.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_iters == 0 {
            return self.lr;
        }
        let ramp = (step as f64 + 1.0) / self.warmup_iters as f64;
        self.lr * ramp.min(1.0)
    }

    fn to_raw(&self) -> [f64; 10] {
        let (flag, lo, hi) = match self.window_turns {
            Some((lo, hi)) => (1.0, lo as f64, hi as f64),
            None => (0.0, 0.0, 0.0),
        };
        [
            self.lr,
            self.warmup_iters as f64,
            self.batch_size as f64,
            self.epochs as f64,
            self.beta1,
            self.beta2,
            self.weight_decay,
            flag,
            lo,
            hi,
        ]
    }

    fn from_raw(raw: &[f64]) -> Result<TrainConfig> {
        if raw.len() != 10 {
            return Err(Error::invalid(format!(
                "opt.hyper must hold ten values, found {}",
                raw.len()
            )));
        }
        let window_turns =
            if raw[7] != 0.0 { Some((raw[8] as usize, raw[9] as usize)) } else { None };
        Ok(TrainConfig {
            lr: raw[0],
            warmup_iters: raw[1] as u64,
            batch_size: raw[2] as usize,
            epochs: raw[3] as usize,
            beta1: raw[4],
            beta2: raw[5],
            weight_decay: raw[6],
            window_turns,
        })
    }
}

/// One recording featurized into per-turn model inputs. Waveforms are gone
/// after this point; only speech features and raw head frames remain.
#[derive(Debug, Clone)]
pub struct PreparedSample<F> {
    pub id: String,
    pub turns: Vec<TurnInput<F>>,
}

/// Featurizes a batch of recordings, fanning samples out over `workers`
/// threads. Each sample's features depend only on its own waveforms, so the
/// output is identical for any worker count.
pub fn prepare_samples<F: Real>(
    cfg: &ModelConfig,
    samples: &[DialogueSample],
    workers: usize,
) -> Result<Vec<PreparedSample<F>>> {
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let w = workers.clamp(1, samples.len());
    let mut parts: Vec<(usize, Result<PreparedSample<F>>)> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..w)
            .map(|wid| {
                scope.spawn(move || {
                    let mut out = Vec::new();
                    let mut i = wid;
                    while i < samples.len() {
                        let sm = &samples[i];
                        let r = chunk_sample::<F>(
                            cfg,
                            &sm.user_wave,
                            &sm.agent_wave,
                            &sm.user_head,
                            &sm.agent_head,
                        )
                        .map(|turns| PreparedSample { id: sm.id.clone(), turns });
                        out.push((i, r));
                        i += w;
                    }
                    out
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("featurize worker panicked"))
            .collect()
    });
    parts.sort_by_key(|(i, _)| *i);
    parts.into_iter().map(|(_, r)| r).collect()
}

/// Per-step log line, one JSON object per update.
#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    /// Number of completed optimizer updates after this one.
    pub step: u64,
    /// Batch-mean total loss (sum of the three subset terms).
    pub loss: f64,
    pub exp: f64,
    pub jaw: f64,
    pub pose: f64,
    pub lr: f64,
    /// Masked agent frames across the batch.
    pub masked: usize,
    /// Samples whose user streams were dropped this step.
    pub dropped: usize,
    pub batch: usize,
}

struct SlotStats {
    slot: usize,
    loss: f64,
    comp: [f64; 3],
    masked: usize,
    dropped: bool,
}

/// Everything a run needs to continue: weights, optimizer moments, progress
/// counters, the rng seed, normalization stats, and the model config.
pub struct TrainState<F> {
    pub cfg: ModelConfig,
    pub tcfg: TrainConfig,
    pub store: ParamStore<F>,
    pub model: Model,
    pub opt: AdamW<F>,
    pub norm: NormStats,
    pub step: u64,
    pub epoch: u64,
    pub seed: u64,
}

fn check_precision<F: Real>(cfg: &ModelConfig) -> Result<()> {
    let width = std::mem::size_of::<F>();
    let want = match cfg.precision {
        Precision::F32 => 4,
        Precision::F64 => 8,
    };
    if width != want {
        return Err(Error::invalid(format!(
            "config precision {} does not match the {width}-byte element type",
            cfg.precision
        )));
    }
    Ok(())
}

impl<F: Real> TrainState<F> {
    pub fn new(cfg: ModelConfig, tcfg: TrainConfig, norm: NormStats, seed: u64) -> Result<Self> {
        cfg.validate()?;
        check_precision::<F>(&cfg)?;
        if norm.mean.len() != HEAD_DIM || norm.std.len() != HEAD_DIM {
            return Err(Error::Shape {
                what: "normalization stats".into(),
                expected: format!("[{HEAD_DIM}] mean and std"),
                got: format!("[{}] mean, [{}] std", norm.mean.len(), norm.std.len()),
            });
        }
        let mut store = ParamStore::new();
        let model = Model::new(&mut store, &cfg, seed);
        let opt = AdamW::new(&store, tcfg.beta1, tcfg.beta2, tcfg.weight_decay);
        Ok(TrainState { cfg, tcfg, store, model, opt, norm, step: 0, epoch: 0, seed })
    }

    /// One optimizer update over a batch. Slots run on up to `workers`
    /// threads; pass 1 for bit-stable strict runs.
    pub fn train_step(
        &mut self,
        batch: &[&PreparedSample<F>],
        workers: usize,
    ) -> Result<StepRecord> {
        if batch.is_empty() {
            return Err(Error::invalid("empty training batch"));
        }
        let lr = self.tcfg.lr_at(self.step);
        let step_stream = RandomStream::new(self.seed, "train/step").substream(self.step);
        let w = workers.clamp(1, batch.len());
        let (store, model, cfg, tcfg, norm) =
            (&self.store, &self.model, &self.cfg, &self.tcfg, &self.norm);
        let step_ref = &step_stream;
        let outcomes: Vec<std::result::Result<(Grads<F>, Vec<SlotStats>), (usize, Error)>> =
            std::thread::scope(|scope| {
                let handles: Vec<_> = (0..w)
                    .map(|wid| {
                        scope.spawn(move || {
                            let mut grads = Grads::zeros(store);
                            let mut stats = Vec::new();
                            let mut slot = wid;
                            while slot < batch.len() {
                                let per = step_ref.substream(slot as u64);
                                match sample_pass(
                                    store,
                                    model,
                                    cfg,
                                    tcfg,
                                    norm,
                                    batch[slot],
                                    &per,
                                    &mut grads,
                                ) {
                                    Ok((loss, comp, masked, dropped)) => {
                                        stats.push(SlotStats { slot, loss, comp, masked, dropped })
                                    }
                                    Err(e) => return Err((slot, e)),
                                }
                                slot += w;
                            }
                            Ok((grads, stats))
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("train worker panicked")).collect()
            });

        let mut worker_outs = Vec::with_capacity(w);
        let mut first_err: Option<(usize, Error)> = None;
        for out in outcomes {
            match out {
                Ok(pair) => worker_outs.push(pair),
                Err((slot, e)) => {
                    if first_err.as_ref().is_none_or(|(s, _)| slot < *s) {
                        first_err = Some((slot, e));
                    }
                }
            }
        }
        if let Some((_, e)) = first_err {
            return Err(e);
        }

        let mut outs = worker_outs.into_iter();
        let (mut grads, mut stats) = outs.next().expect("at least one worker");
        for (g, s) in outs {
            grads.add_assign(&g);
            stats.extend(s);
        }
        stats.sort_by_key(|s| s.slot);

        let b = batch.len();
        grads.scale(F::of(1.0 / b as f64));
        let mut loss = 0.0;
        let mut comp = [0.0f64; 3];
        let mut masked = 0usize;
        let mut dropped = 0usize;
        for s in &stats {
            loss += s.loss;
            for (c, &v) in comp.iter_mut().zip(&s.comp) {
                *c += v;
            }
            masked += s.masked;
            dropped += usize::from(s.dropped);
        }
        loss /= b as f64;
        for c in comp.iter_mut() {
            *c /= b as f64;
        }

        self.opt.step(&mut self.store, &grads, lr);
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            loss,
            exp: comp[0],
            jaw: comp[1],
            pose: comp[2],
            lr,
            masked,
            dropped,
            batch: b,
        })
    }

    /// One pass over the dataset in a seeded shuffle order, including the
    /// final partial batch. Calls `on_step` after every update.
    pub fn train_epoch(
        &mut self,
        data: &[PreparedSample<F>],
        workers: usize,
        mut on_step: impl FnMut(&StepRecord),
    ) -> Result<()> {
        if data.is_empty() {
            return Err(Error::invalid("empty training set"));
        }
        let order = shuffled_indices(self.seed, self.epoch, data.len());
        for chunk in order.chunks(self.tcfg.batch_size.max(1)) {
            let batch: Vec<&PreparedSample<F>> = chunk.iter().map(|&i| &data[i]).collect();
            let rec = self.train_step(&batch, workers)?;
            on_step(&rec);
        }
        self.epoch += 1;
        Ok(())
    }

    /// Runs epochs until `epochs` have completed or the optimizer step count
    /// reaches `max_steps`, whichever comes first. Shuffle order matches
    /// [`train_epoch`], so a capped run walks a prefix of the uncapped step
    /// sequence, and a resumed capped run picks up mid-epoch exactly where
    /// it stopped as long as the dataset size and batch size are unchanged.
    ///
    /// [`train_epoch`]: TrainState::train_epoch
    pub fn train_until(
        &mut self,
        data: &[PreparedSample<F>],
        workers: usize,
        epochs: u64,
        max_steps: Option<u64>,
        mut on_step: impl FnMut(&StepRecord),
    ) -> Result<()> {
        if data.is_empty() {
            return Err(Error::invalid("empty training set"));
        }
        let capped = |step: u64| max_steps.is_some_and(|cap| step >= cap);
        let bs = self.tcfg.batch_size.max(1);
        let per_epoch = data.len().div_ceil(bs) as u64;
        while self.epoch < epochs && !capped(self.step) {
            let order = shuffled_indices(self.seed, self.epoch, data.len());
            let done = self.step.saturating_sub(self.epoch * per_epoch).min(per_epoch) as usize;
            for chunk in order.chunks(bs).skip(done) {
                if capped(self.step) {
                    return Ok(());
                }
                let batch: Vec<&PreparedSample<F>> = chunk.iter().map(|&i| &data[i]).collect();
                let rec = self.train_step(&batch, workers)?;
                on_step(&rec);
            }
            self.epoch += 1;
        }
        Ok(())
    }

    /// Writes weights, optimizer moments, normalization stats, progress
    /// counters, and the config snapshot into one archive. Float width
    /// follows the config's precision.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let f32_mode = matches!(self.cfg.precision, Precision::F32);
        let mut ar = Archive::new();
        for e in self.store.entries() {
            ar.insert(e.name.clone(), encode_array(&e.value, f32_mode))?;
        }
        for (e, m) in self.store.entries().iter().zip(&self.opt.m) {
            ar.insert(format!("adam.m.{}", e.name), encode_array(m, f32_mode))?;
        }
        for (e, v) in self.store.entries().iter().zip(&self.opt.v) {
            ar.insert(format!("adam.v.{}", e.name), encode_array(v, f32_mode))?;
        }
        ar.insert("norm.mean", ArchiveArray::F64(self.norm.mean.clone().into_dyn()))?;
        ar.insert("norm.std", ArchiveArray::F64(self.norm.std.clone().into_dyn()))?;
        let meta = vec![
            CKPT_VERSION,
            self.step as i64,
            self.epoch as i64,
            self.opt.t as i64,
            self.seed as i64,
        ];
        ar.insert("ckpt.meta", ArchiveArray::I64(Array1::from(meta).into_dyn()))?;
        ar.insert(
            "opt.hyper",
            ArchiveArray::F64(Array1::from(self.tcfg.to_raw().to_vec()).into_dyn()),
        )?;
        let kv: Vec<i64> = self.cfg.to_kv_string().bytes().map(|b| b as i64).collect();
        ar.insert("config.kv", ArchiveArray::I64(Array1::from(kv).into_dyn()))?;
        ar.write(path)
    }

    /// Rebuilds a state from [`save_checkpoint`] output. The element type
    /// must match the precision recorded in the embedded config.
    ///
    /// [`save_checkpoint`]: TrainState::save_checkpoint
    pub fn load_checkpoint(path: &Path) -> Result<TrainState<F>> {
        let ar = Archive::read(path)?;
        let meta: Vec<i64> = ar.get("ckpt.meta")?.as_i64("ckpt.meta")?.iter().copied().collect();
        if meta.len() != 5 {
            return Err(Error::invalid(format!(
                "ckpt.meta must hold five values, found {}",
                meta.len()
            )));
        }
        if meta[0] != CKPT_VERSION {
            return Err(Error::Version { expected: CKPT_VERSION, got: meta[0] });
        }
        let kv = ar.get("config.kv")?.as_i64("config.kv")?;
        let bytes: Vec<u8> = kv.iter().map(|&b| b as u8).collect();
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::invalid("config.kv bytes are not valid utf-8"))?;
        let cfg = ModelConfig::from_str_validated(&text)?;
        check_precision::<F>(&cfg)?;
        let f32_mode = matches!(cfg.precision, Precision::F32);
        let hyper: Vec<f64> = ar.get("opt.hyper")?.as_f64("opt.hyper")?.iter().copied().collect();
        let tcfg = TrainConfig::from_raw(&hyper)?;

        let seed = meta[4] as u64;
        let mut store = ParamStore::new();
        let model = Model::new(&mut store, &cfg, seed);
        for e in store.entries_mut() {
            let loaded = decode_array::<F>(&e.name, ar.get(&e.name)?, f32_mode)?;
            if loaded.shape() != e.value.shape() {
                return Err(Error::Shape {
                    what: e.name.clone(),
                    expected: format!("{:?}", e.value.shape()),
                    got: format!("{:?}", loaded.shape()),
                });
            }
            e.value = loaded;
        }

        let mut opt = AdamW::new(&store, tcfg.beta1, tcfg.beta2, tcfg.weight_decay);
        opt.t = meta[3] as u64;
        let names: Vec<String> = store.entries().iter().map(|e| e.name.clone()).collect();
        for (i, name) in names.iter().enumerate() {
            let mname = format!("adam.m.{name}");
            opt.m[i] = decode_array::<F>(&mname, ar.get(&mname)?, f32_mode)?;
            let vname = format!("adam.v.{name}");
            opt.v[i] = decode_array::<F>(&vname, ar.get(&vname)?, f32_mode)?;
        }

        let norm = NormStats {
            mean: dyn_to_1d("norm.mean", ar.get("norm.mean")?.as_f64("norm.mean")?)?,
            std: dyn_to_1d("norm.std", ar.get("norm.std")?.as_f64("norm.std")?)?,
        };
        if norm.mean.len() != HEAD_DIM || norm.std.len() != HEAD_DIM {
            return Err(Error::Shape {
                what: "normalization stats".into(),
                expected: format!("[{HEAD_DIM}] mean and std"),
                got: format!("[{}] mean, [{}] std", norm.mean.len(), norm.std.len()),
            });
        }
        Ok(TrainState {
            cfg,
            tcfg,
            store,
            model,
            opt,
            norm,
            step: meta[1] as u64,
            epoch: meta[2] as u64,
            seed,
        })
    }
}

/// Reads only the model configuration embedded in a checkpoint, which lets
/// callers pick the matching element type before a full load.
pub fn checkpoint_config(path: &Path) -> Result<ModelConfig> {
    let ar = Archive::read(path)?;
    let kv = ar.get("config.kv")?.as_i64("config.kv")?;
    let bytes: Vec<u8> = kv.iter().map(|&b| b as u8).collect();
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::invalid("config.kv bytes are not valid utf-8"))?;
    ModelConfig::from_str_validated(&text)
}

/// Seeded Fisher-Yates permutation of `0..n`, one per epoch.
pub fn shuffled_indices(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rs = RandomStream::new(seed, "train/shuffle").substream(epoch);
    for i in (1..n).rev() {
        let j = rs.below(i as u64 + 1) as usize;
        order.swap(i, j);
    }
    order
}

/// Draws the turn window for one slot: a length from the configured range
/// (clipped to what the sample and the model capacity allow), then a start
/// offset.
fn select_window(
    total: usize,
    n_max: usize,
    window: Option<(usize, usize)>,
    rs: &mut RandomStream,
) -> (usize, usize) {
    let cap = total.min(n_max).max(1);
    let (wmin, wmax) = window.unwrap_or((cap, cap));
    let hi = wmax.min(cap).max(1);
    let lo = wmin.clamp(1, hi);
    let n = lo + rs.below((hi - lo) as u64 + 1) as usize;
    let start = rs.below((total - n) as u64 + 1) as usize;
    (start, n)
}

/// Forward and backward for one batch slot. Accumulates parameter gradients
/// into `grads` and returns (loss, subset losses, masked count, dropped).
#[allow(clippy::too_many_arguments)]
fn sample_pass<F: Real>(
    store: &ParamStore<F>,
    model: &Model,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    norm: &NormStats,
    sample: &PreparedSample<F>,
    per: &RandomStream,
    grads: &mut Grads<F>,
) -> Result<(f64, [f64; 3], usize, bool)> {
    let mut win_rs = per.substream(0);
    let (start, n) = select_window(sample.turns.len(), cfg.n_max, tcfg.window_turns, &mut win_rs);
    let window = &sample.turns[start..start + n];

    let mut tokens = Vec::with_capacity(n);
    let mut caches = Vec::with_capacity(n);
    for turn in window {
        let (t, c) = model.encode_turn(store, turn);
        tokens.push(t);
        caches.push(c);
    }
    let mut ctx = WindowTokens::interleave(store, &model.specials, &tokens)?;

    let dropped = per.substream(1).uniform() < cfg.p_cfg;
    if dropped {
        ctx.drop_user_streams(store, &model.specials);
    }

    let k = cfg.k_frames();
    let m = mask_count(n * k, cfg.r);
    if m == 0 {
        return Err(Error::invalid("mask ratio selects zero agent frames"));
    }
    let chosen = per.substream(2).choose_sorted(n * k, m);
    ctx.mask_agent_frames(store, &model.specials, &chosen);

    let prefix = ctx.prefix_bounds();
    let (fused, fcache) = model.fusion.forward(store, &ctx.flat, &prefix)?;

    let rows: Vec<usize> = chosen.iter().map(|&g| ctx.agent_head_row(g / k, g % k)).collect();
    let mut cond = Array2::<F>::zeros((m, fused.ncols()));
    for (mut dst, &row) in cond.rows_mut().into_iter().zip(&rows) {
        dst.assign(&fused.row(row));
    }

    let mut x0 = Array2::<F>::zeros((m, HEAD_DIM));
    for (i, &g) in chosen.iter().enumerate() {
        let src = window[g / k].agent_head.row(g % k);
        for (d, &v) in src.iter().enumerate() {
            x0[[i, d]] = F::of((v - norm.mean[d]) / norm.std[d]);
        }
    }

    let noise_rs = per.substream(3);
    let (taus, _eps, x_tau) = noise_positions(&x0, &chosen, &model.schedule, &noise_rs);
    let (x0_hat, dcache) = model.diffusion.forward(store, &x_tau, &taus, &cond, &chosen);
    let (loss, comp) = split_loss(&x0, &x0_hat, &chosen);
    if !loss.is_finite() {
        let stage =
            locate_nonfinite(store, model, &tokens, &ctx, &prefix, &x0, &taus, &x_tau, &cond, &chosen);
        return Err(Error::invalid(format!(
            "non-finite loss on sample {}; first non-finite stage: {stage}",
            sample.id
        )));
    }

    let dx0_hat = split_loss_grad(&x0, &x0_hat);
    let dcond = model.diffusion.backward(store, grads, &dcache, &dx0_hat);
    let mut dfused = Array2::<F>::zeros(fused.raw_dim());
    for (src, &row) in dcond.rows().into_iter().zip(&rows) {
        dfused.row_mut(row).assign(&src);
    }
    let dflat = model.fusion.backward(store, grads, &fcache, &dfused);
    let dturns = ctx.scatter_backward(grads, &model.specials, &dflat);
    for (cache, d) in caches.iter().zip(&dturns) {
        model.backward_turn(store, grads, cache, d);
    }
    Ok((loss, comp, m, dropped))
}

/// Re-runs the forward pass stage by stage and names the first one whose
/// output is not finite, for the abort diagnostic.
#[allow(clippy::too_many_arguments)]
fn locate_nonfinite<F: Real>(
    store: &ParamStore<F>,
    model: &Model,
    tokens: &[TurnTokens<F>],
    ctx: &WindowTokens<F>,
    prefix: &[usize],
    x0: &Array2<F>,
    taus: &[usize],
    x_tau: &Array2<F>,
    cond: &Array2<F>,
    frames: &[usize],
) -> String {
    fn bad<F: Real>(a: &Array2<F>) -> bool {
        a.iter().any(|&v| !v.to_f64().is_finite())
    }
    for (t, tok) in tokens.iter().enumerate() {
        if bad(&tok.user_speech) || bad(&tok.agent_speech) {
            return format!("speech tokens (turn {t})");
        }
        if bad(&tok.user_head) || bad(&tok.agent_head) {
            return format!("head tokens (turn {t})");
        }
    }
    if bad(&ctx.flat) {
        return "interleaved window".into();
    }
    let rows = ctx.flat.nrows();
    let mut x = model.fusion.in_proj.forward(store, &ctx.flat);
    x += &store.get2(model.fusion.p1).slice(s![..rows, ..]);
    if bad(&x) {
        return "fusion.in_proj".into();
    }
    for (i, layer) in model.fusion.layers.iter().enumerate() {
        x = layer.forward(store, &x, prefix).0;
        if bad(&x) {
            return format!("fusion.layer{i}");
        }
    }
    let fused = model.fusion.final_ln.forward(store, &x).0;
    if bad(&fused) {
        return "fusion.final_ln".into();
    }
    if bad(cond) {
        return "conditioning rows".into();
    }
    if bad(x0) {
        return "normalized targets".into();
    }
    if bad(x_tau) {
        return "noised targets".into();
    }
    let x0_hat = model.diffusion.forward(store, x_tau, taus, cond, frames).0;
    if bad(&x0_hat) {
        return "diffusion head output".into();
    }
    "loss reduction".into()
}

fn encode_array<F: Real>(value: &ArrayD<F>, f32_mode: bool) -> ArchiveArray {
    if f32_mode {
        ArchiveArray::F32(value.mapv(|v| v.to_f64() as f32))
    } else {
        ArchiveArray::F64(value.mapv(|v| v.to_f64()))
    }
}

fn decode_array<F: Real>(name: &str, arr: &ArchiveArray, f32_mode: bool) -> Result<ArrayD<F>> {
    Ok(if f32_mode {
        arr.as_f32(name)?.mapv(|v| F::of(v as f64))
    } else {
        arr.as_f64(name)?.mapv(F::of)
    })
}

fn dyn_to_1d(name: &str, a: &ArrayD<f64>) -> Result<Array1<f64>> {
    a.clone().into_dimensionality::<Ix1>().map_err(|_| Error::Shape {
        what: name.into(),
        expected: "1-d array".into(),
        got: format!("{:?}", a.shape()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::Split;

    fn tiny_cfg(precision: Precision) -> ModelConfig {
        let mut cfg = ModelConfig::tiny();
        cfg.c = 0.2;
        cfg.n_max = 4;
        cfg.precision = precision;
        cfg.validate().unwrap();
        cfg
    }

    fn quick_tcfg() -> TrainConfig {
        TrainConfig { lr: 1e-3, warmup_iters: 10, batch_size: 2, ..TrainConfig::default() }
    }

    fn rand2<F: Real>(rs: &mut RandomStream, rows: usize, cols: usize, scale: f64) -> Array2<F> {
        Array2::from_shape_simple_fn((rows, cols), || F::of(rs.normal() * scale))
    }

    fn random_prepared<F: Real>(
        cfg: &ModelConfig,
        id: &str,
        turns: usize,
        seed: u64,
    ) -> PreparedSample<F> {
        let mut rs = RandomStream::new(seed, "test/prepared");
        let k = cfg.k_frames();
        let turns = (0..turns)
            .map(|_| TurnInput {
                user_feats: rand2(&mut rs, k, cfg.d_raw, 0.3),
                agent_feats: rand2(&mut rs, k, cfg.d_raw, 0.3),
                user_head: rand2::<f64>(&mut rs, k, HEAD_DIM, 0.5),
                agent_head: rand2::<f64>(&mut rs, k, HEAD_DIM, 0.5),
            })
            .collect();
        PreparedSample { id: id.into(), turns }
    }

    fn state_with_data(
        precision: Precision,
        seed: u64,
    ) -> (TrainState<f32>, Vec<PreparedSample<f32>>) {
        let cfg = tiny_cfg(precision);
        let data: Vec<PreparedSample<f32>> =
            (0..4).map(|i| random_prepared(&cfg, &format!("s{i}"), 3, 900 + i)).collect();
        let norm = norm_stats_from_prepared(&data).unwrap();
        let state = TrainState::new(cfg, quick_tcfg(), norm, seed).unwrap();
        (state, data)
    }

    fn all_params_equal<F: Real>(a: &ParamStore<F>, b: &ParamStore<F>) -> bool {
        a.entries().iter().zip(b.entries()).all(|(x, y)| x.name == y.name && x.value == y.value)
    }

    #[test]
    fn norm_stats_match_a_two_pass_oracle() {
        let mut rs = RandomStream::new(11, "test/norm");
        let blocks: Vec<Array2<f64>> =
            (0..3).map(|_| rand2(&mut rs, 17, HEAD_DIM, 1.5)).collect();
        let stats = NormStats::compute(blocks.iter()).unwrap();

        for d in 0..HEAD_DIM {
            let vals: Vec<f64> =
                blocks.iter().flat_map(|b| b.column(d).to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!((stats.mean[d] - mean).abs() < 1e-10);
            assert!((stats.std[d] - var.sqrt().max(1e-6)).abs() < 1e-10);
        }
    }

    #[test]
    fn norm_stats_handle_constant_and_two_point_data() {
        let constant = Array2::from_elem((9, HEAD_DIM), 0.375);
        let stats = NormStats::compute([&constant]).unwrap();
        assert!(stats.mean.iter().all(|&m| m == 0.375));
        assert!(stats.std.iter().all(|&s| s == 1e-6));

        let mut two = Array2::zeros((2, HEAD_DIM));
        two.row_mut(1).fill(2.0);
        let stats = NormStats::compute([&two]).unwrap();
        assert!(stats.mean.iter().all(|&m| m == 1.0));
        assert!(stats.std.iter().all(|&s| s == 1.0));

        assert!(NormStats::compute([]).is_err());
    }

    #[test]
    fn normalization_round_trips_within_tolerance() {
        let mut rs = RandomStream::new(12, "test/roundtrip");
        let mut stats = NormStats::identity();
        for v in stats.mean.iter_mut() {
            *v = rs.normal();
        }
        for v in stats.std.iter_mut() {
            *v = 0.5 + rs.uniform() * 1.5;
        }
        let x = rand2::<f64>(&mut rs, 13, HEAD_DIM, 2.0);
        let back = stats.denormalize(&stats.normalize(&x));
        for (a, b) in back.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn window_selection_stays_in_bounds_and_covers_the_range() {
        let mut rs = RandomStream::new(13, "test/window");
        let mut seen_n = [false; 4];
        let mut seen_start = [false; 8];
        for _ in 0..400 {
            let (start, n) = select_window(8, 8, Some((1, 3)), &mut rs);
            assert!((1..=3).contains(&n));
            assert!(start + n <= 8);
            seen_n[n] = true;
            seen_start[start] = true;
        }
        assert!(seen_n[1] && seen_n[2] && seen_n[3]);
        assert!(seen_start.iter().filter(|&&s| s).count() >= 5);

        let (start, n) = select_window(8, 4, None, &mut rs);
        assert_eq!(n, 4);
        assert!(start <= 4);
        let (start, n) = select_window(2, 8, None, &mut rs);
        assert_eq!((start, n), (0, 2));
    }

    #[test]
    fn learning_rate_warms_up_linearly_then_holds() {
        let tcfg = TrainConfig { lr: 1e-4, warmup_iters: 100, ..TrainConfig::default() };
        assert!((tcfg.lr_at(0) - 1e-6).abs() < 1e-18);
        assert!((tcfg.lr_at(49) - 5e-5).abs() < 1e-18);
        assert_eq!(tcfg.lr_at(99), 1e-4);
        assert_eq!(tcfg.lr_at(5000), 1e-4);
        let flat = TrainConfig { warmup_iters: 0, ..tcfg };
        assert_eq!(flat.lr_at(0), 1e-4);
    }

    #[test]
    fn shuffles_are_permutations_that_vary_by_epoch() {
        let a = shuffled_indices(5, 0, 32);
        let b = shuffled_indices(5, 1, 32);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..32).collect::<Vec<_>>());
        assert_ne!(a, b);
        assert_eq!(a, shuffled_indices(5, 0, 32));
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let (mut state, data) = state_with_data(Precision::F32, 21);
        state.tcfg.lr = 0.0;
        let before = state.store.clone();
        state.train_step(&[&data[0], &data[1]], 1).unwrap();
        assert!(all_params_equal(&before, &state.store));
    }

    #[test]
    fn step_records_report_counts_and_identical_losses_per_worker_count() {
        let (mut one, data) = state_with_data(Precision::F32, 22);
        let (mut two, _) = state_with_data(Precision::F32, 22);
        let batch = [&data[0], &data[1], &data[2]];
        let ra = one.train_step(&batch, 1).unwrap();
        let rb = two.train_step(&batch, 3).unwrap();
        assert_eq!(ra.loss.to_bits(), rb.loss.to_bits());
        assert_eq!(ra.exp.to_bits(), rb.exp.to_bits());
        assert_eq!(ra.masked, rb.masked);

        let k = one.cfg.k_frames();
        let expect = mask_count(3 * k, one.cfg.r) * batch.len();
        assert_eq!(ra.masked, expect);
        assert_eq!(ra.batch, 3);
        assert_eq!(ra.step, 1);
        assert_eq!(ra.lr, one.tcfg.lr_at(0));
    }

    #[test]
    fn identical_states_take_identical_steps() {
        let (mut a, data) = state_with_data(Precision::F32, 23);
        let (mut b, _) = state_with_data(Precision::F32, 23);
        for _ in 0..2 {
            let ra = a.train_step(&[&data[0], &data[1]], 2).unwrap();
            let rb = b.train_step(&[&data[0], &data[1]], 2).unwrap();
            assert_eq!(ra.loss.to_bits(), rb.loss.to_bits());
        }
        assert!(all_params_equal(&a.store, &b.store));
    }

    #[test]
    fn checkpoint_resume_replays_the_exact_trajectory() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.tmr");
        let (mut full, data) = state_with_data(Precision::F32, 24);
        let batch = [&data[0], &data[1]];

        full.train_step(&batch, 1).unwrap();
        full.train_step(&batch, 1).unwrap();
        full.save_checkpoint(&path).unwrap();
        let mut resumed = TrainState::<f32>::load_checkpoint(&path).unwrap();
        assert_eq!(resumed.step, 2);

        for _ in 0..3 {
            let rf = full.train_step(&batch, 1).unwrap();
            let rr = resumed.train_step(&batch, 1).unwrap();
            assert_eq!(rf.loss.to_bits(), rr.loss.to_bits());
            assert_eq!(rf.step, rr.step);
        }
        assert!(all_params_equal(&full.store, &resumed.store));
        for (m1, m2) in full.opt.m.iter().zip(&resumed.opt.m) {
            assert_eq!(m1, m2);
        }
        for (v1, v2) in full.opt.v.iter().zip(&resumed.opt.v) {
            assert_eq!(v1, v2);
        }
    }

    #[test]
    fn checkpoints_expose_parameters_under_their_registered_names() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("named.tmr");
        let (state, _) = state_with_data(Precision::F32, 25);
        state.save_checkpoint(&path).unwrap();

        let ar = Archive::read(&path).unwrap();
        for name in ["fusion.P1", "diff.P2", "adam.m.fusion.P1", "adam.v.diff.P2"] {
            assert!(ar.contains(name), "missing {name}");
        }
        let p1 = ar.get("fusion.P1").unwrap();
        assert_eq!(p1.shape(), [state.cfg.flat_capacity(), state.cfg.d_e]);
        for name in ["norm.mean", "norm.std", "ckpt.meta", "opt.hyper", "config.kv"] {
            assert!(ar.contains(name), "missing {name}");
        }
    }

    #[test]
    fn loading_rejects_bad_versions_missing_arrays_and_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("good.tmr");
        let (state, _) = state_with_data(Precision::F32, 26);
        state.save_checkpoint(&path).unwrap();

        let ar = Archive::read(&path).unwrap();
        let bad_version = dir.path().join("version.tmr");
        let mut tampered = Archive::new();
        for (name, arr) in ar.entries() {
            if name == "ckpt.meta" {
                let mut meta = arr.as_i64(name).unwrap().clone();
                meta[0] = CKPT_VERSION + 1;
                tampered.insert(name.clone(), ArchiveArray::I64(meta)).unwrap();
            } else {
                tampered.insert(name.clone(), arr.clone()).unwrap();
            }
        }
        tampered.write(&bad_version).unwrap();
        let err = TrainState::<f32>::load_checkpoint(&bad_version).err().unwrap();
        match err {
            Error::Version { expected, got } => {
                assert_eq!(expected, CKPT_VERSION);
                assert_eq!(got, CKPT_VERSION + 1);
            }
            other => panic!("expected version error, got {other:?}"),
        }

        let missing = dir.path().join("missing.tmr");
        let mut partial = Archive::new();
        for (name, arr) in ar.entries() {
            if name != "head.mlp.l1.w" {
                partial.insert(name.clone(), arr.clone()).unwrap();
            }
        }
        partial.write(&missing).unwrap();
        let err = TrainState::<f32>::load_checkpoint(&missing).err().unwrap();
        match err {
            Error::MissingArray { name } => assert_eq!(name, "head.mlp.l1.w"),
            other => panic!("expected missing-array error, got {other:?}"),
        }

        let err = TrainState::<f64>::load_checkpoint(&path).err().unwrap();
        match err {
            Error::Invalid { msg } => assert!(msg.contains("precision")),
            other => panic!("expected precision error, got {other:?}"),
        }
    }

    #[test]
    fn full_user_drop_makes_user_content_irrelevant() {
        let cfg = tiny_cfg(Precision::F32);
        let data_a: Vec<PreparedSample<f32>> =
            (0..2).map(|i| random_prepared(&cfg, &format!("a{i}"), 3, 700 + i)).collect();
        let mut data_b = data_a.clone();
        let mut rs = RandomStream::new(31, "test/replace");
        for sample in &mut data_b {
            for turn in &mut sample.turns {
                turn.user_feats = rand2(&mut rs, cfg.k_frames(), cfg.d_raw, 0.3);
                turn.user_head = rand2::<f64>(&mut rs, cfg.k_frames(), HEAD_DIM, 0.5);
            }
        }

        let norm = NormStats::identity();
        let mut a = TrainState::<f32>::new(cfg.clone(), quick_tcfg(), norm.clone(), 77).unwrap();
        let mut b = TrainState::<f32>::new(cfg, quick_tcfg(), norm, 77).unwrap();
        a.cfg.p_cfg = 1.0;
        b.cfg.p_cfg = 1.0;

        for _ in 0..2 {
            let ra = a.train_step(&[&data_a[0], &data_a[1]], 1).unwrap();
            let rb = b.train_step(&[&data_b[0], &data_b[1]], 1).unwrap();
            assert_eq!(ra.loss.to_bits(), rb.loss.to_bits());
            assert_eq!(ra.dropped, 2);
        }
        assert!(all_params_equal(&a.store, &b.store));
    }

    #[test]
    fn fully_masked_windows_route_no_gradient_through_agent_tokens() {
        let mut cfg = tiny_cfg(Precision::F64);
        cfg.r = 1.0;
        let sample = random_prepared::<f64>(&cfg, "m0", 3, 41);
        let state = TrainState::<f64>::new(cfg.clone(), quick_tcfg(), NormStats::identity(), 42)
            .unwrap();
        let (store, model) = (&state.store, &state.model);

        let k = cfg.k_frames();
        let mut tokens = Vec::new();
        let mut caches = Vec::new();
        for turn in &sample.turns {
            let (t, c) = model.encode_turn(store, turn);
            tokens.push(t);
            caches.push(c);
        }
        let mut ctx = WindowTokens::interleave(store, &model.specials, &tokens).unwrap();
        let all: Vec<usize> = (0..3 * k).collect();
        assert_eq!(mask_count(3 * k, cfg.r), 3 * k);
        ctx.mask_agent_frames(store, &model.specials, &all);

        let mut rs = RandomStream::new(43, "test/probe");
        let dflat = rand2::<f64>(&mut rs, ctx.flat.nrows(), cfg.d_t, 1.0);
        let mut scattered = Grads::zeros(store);
        let routed = ctx.scatter_backward(&mut scattered, &model.specials, &dflat);

        for tg in &routed {
            assert!(tg.agent_head.iter().all(|&v| v == 0.0));
            assert!(tg.user_head.iter().any(|&v| v != 0.0));
        }
        assert!(scattered.get1(model.specials.mask).iter().any(|&v| v != 0.0));

        let mut with_agent = scattered.clone();
        let mut without_agent = scattered;
        for (cache, d) in caches.iter().zip(&routed) {
            model.backward_turn(store, &mut with_agent, cache, d);
            model.speech_enc.backward(store, &mut without_agent, &cache.user_speech, &d.user_speech);
            model.speech_enc.backward(store, &mut without_agent, &cache.agent_speech, &d.agent_speech);
            model.head_enc.backward(store, &mut without_agent, &cache.user_head, &d.user_head);
        }
        for e in store.entries() {
            let id = store.find(&e.name).unwrap();
            assert_eq!(with_agent.get(id), without_agent.get(id), "{} differs", e.name);
        }
    }

    #[test]
    fn non_finite_losses_abort_with_a_stage_diagnostic() {
        let (mut state, data) = state_with_data(Precision::F32, 27);
        let poisoned = state
            .store
            .entries()
            .iter()
            .position(|e| e.name.starts_with("fusion.layer1."))
            .unwrap();
        state.store.entries_mut()[poisoned].value.iter_mut().take(1).for_each(|v| *v = f32::NAN);

        match state.train_step(&[&data[0]], 1) {
            Err(Error::Invalid { msg }) => {
                assert!(msg.contains("fusion.layer1"), "diagnostic was: {msg}")
            }
            other => panic!("expected a non-finite abort, got {other:?}"),
        }
    }

    #[test]
    fn prepared_features_do_not_depend_on_worker_count() {
        let cfg = tiny_cfg(Precision::F32);
        let mut rs = RandomStream::new(61, "test/waves");
        let samples: Vec<DialogueSample> = (0..3)
            .map(|i| {
                let len = 2 * cfg.chunk_samples();
                DialogueSample {
                    id: format!("w{i}"),
                    split: Split::Train,
                    seed: i as u64,
                    user_wave: (0..len).map(|_| rs.normal() * 0.1).collect(),
                    agent_wave: (0..len).map(|_| rs.normal() * 0.1).collect(),
                    user_head: rand2::<f64>(&mut rs, 2 * cfg.k_frames(), HEAD_DIM, 0.5),
                    agent_head: rand2::<f64>(&mut rs, 2 * cfg.k_frames(), HEAD_DIM, 0.5),
                }
            })
            .collect();

        let one = prepare_samples::<f32>(&cfg, &samples, 1).unwrap();
        let three = prepare_samples::<f32>(&cfg, &samples, 3).unwrap();
        assert_eq!(one.len(), three.len());
        for (a, b) in one.iter().zip(&three) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.turns.len(), 2);
            for (ta, tb) in a.turns.iter().zip(&b.turns) {
                assert_eq!(ta.user_feats, tb.user_feats);
                assert_eq!(ta.agent_feats, tb.agent_feats);
                assert_eq!(ta.user_head, tb.user_head);
                assert_eq!(ta.agent_head, tb.agent_head);
            }
        }
    }

    #[test]
    fn training_reduces_the_loss_on_a_small_synthetic_problem() {
        let (mut state, data) = state_with_data(Precision::F32, 28);
        let mut first = Vec::new();
        let mut last = Vec::new();
        for i in 0..60 {
            let batch = [&data[i % 4], &data[(i + 1) % 4]];
            let rec = state.train_step(&batch, 1).unwrap();
            if i < 10 {
                first.push(rec.loss);
            }
            if i >= 50 {
                last.push(rec.loss);
            }
        }
        let head: f64 = first.iter().sum::<f64>() / first.len() as f64;
        let tail: f64 = last.iter().sum::<f64>() / last.len() as f64;
        assert!(tail < head, "loss did not decrease: {head} -> {tail}");
    }

    #[test]
    fn epochs_walk_the_whole_set_and_advance_counters() {
        let (mut state, data) = state_with_data(Precision::F32, 29);
        let mut records = Vec::new();
        state.train_epoch(&data, 1, |r| records.push(r.clone())).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].batch, 2);
        assert_eq!(records[1].batch, 2);
        assert_eq!(state.epoch, 1);
        assert_eq!(state.step, 2);
    }

    #[test]
    fn capped_run_is_a_prefix_of_the_uncapped_one() {
        let (mut full, data) = state_with_data(Precision::F32, 31);
        let mut full_records = Vec::new();
        full.train_until(&data, 1, 3, None, |r| full_records.push(r.clone())).unwrap();
        assert_eq!(full_records.len(), 6);
        assert_eq!(full.epoch, 3);

        let (mut capped, _) = state_with_data(Precision::F32, 31);
        let mut capped_records = Vec::new();
        capped.train_until(&data, 1, 3, Some(3), |r| capped_records.push(r.clone())).unwrap();
        assert_eq!(capped_records.len(), 3);
        assert_eq!(capped.step, 3);
        assert_eq!(capped.epoch, 1);
        for (a, b) in capped_records.iter().zip(&full_records) {
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
            assert_eq!(a.step, b.step);
        }

        capped.train_until(&data, 1, 3, Some(3), |_| panic!("cap already reached")).unwrap();
    }

    #[test]
    fn mid_epoch_resume_continues_the_uncapped_trajectory() {
        let (mut full, data) = state_with_data(Precision::F32, 33);
        let mut full_records = Vec::new();
        full.train_until(&data, 1, 3, Some(5), |r| full_records.push(r.clone())).unwrap();

        let (mut resumed, _) = state_with_data(Precision::F32, 33);
        let mut records = Vec::new();
        resumed.train_until(&data, 1, 3, Some(3), |r| records.push(r.clone())).unwrap();
        assert_eq!(resumed.epoch, 1);
        resumed.train_until(&data, 1, 3, Some(5), |r| records.push(r.clone())).unwrap();

        assert_eq!(records.len(), full_records.len());
        for (a, b) in records.iter().zip(&full_records) {
            assert_eq!(a.step, b.step);
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        }
        assert!(all_params_equal(&resumed.store, &full.store));
    }

    #[test]
    fn checkpoint_config_reads_the_embedded_snapshot() {
        let (state, _) = state_with_data(Precision::F32, 37);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.tmr");
        state.save_checkpoint(&path).unwrap();
        let cfg = checkpoint_config(&path).unwrap();
        assert_eq!(cfg, state.cfg);
    }
}
