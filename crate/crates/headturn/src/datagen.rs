//! Synthetic dyadic-conversation generator with known cross-speaker
//! coupling, plus the on-disk dataset layout.
//!
//! Two speakers alternate turns. Each sample carries both waveforms and both
//! head tracks; the agent's head is driven by documented formulas so tests
//! and experiments can compare models against the true generative process.
//! The load-bearing structure is the listener coupling: agent expression
//! dims 0..5 and the pose pitch dim follow the user's speech envelope at a
//! 5 frame (200 ms) lag. The lag reaches across 1 second context-turn
//! boundaries, so models that see previous turns have strictly more
//! information about early-turn frames than models that do not.
//!
//! Everything is derived from per-sample seeds through labeled streams, and
//! every stored array is quantized through f32, so regenerating a dataset
//! reproduces it byte for byte.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::archive::{Archive, ArchiveArray};
use crate::config::{ModelConfig, EXP_DIM, HEAD_DIM, JAW_DIM, POSE_DIM};
use crate::error::{Error, Result};
use crate::rng::RandomStream;

/// Fixed sample duration in seconds.
pub const SAMPLE_SECONDS: usize = 8;
/// Listener coupling lag in head frames (200 ms at 25 fps).
pub const COUPLING_LAG: usize = 5;
/// Gain from the lagged user envelope into agent pose pitch.
pub const PITCH_GAIN: f64 = 0.08;

const TURN_MEAN_S: f64 = 2.0;
const TURN_MIN_S: f64 = 0.5;
const TURN_MAX_S: f64 = 4.0;
const ENVELOPE_MS: usize = 120;
const TONE_BASE_HZ: f64 = 220.0;
const TONE_GAIN: f64 = 0.3;
const COUPLE_ENV: f64 = 0.6;
const COUPLE_SELF: f64 = 0.3;
const COUPLED_DIMS: usize = 5;
const JAW_GAIN: f64 = 0.04;
const USER_JAW_NOISE: f64 = 0.002;
const USER_EXP_ENV: f64 = 0.5;
const WALK_PHI: f64 = 0.95;
const USER_WALK_SIGMA: f64 = 0.05;
const AGENT_WALK_SIGMA: f64 = 0.005;
const USER_POSE_AMP: f64 = 0.05;
const AGENT_POSE_AMP: f64 = 0.03;
const POSE_HZ: f64 = 0.2;
const OBS_SIGMA: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!(
                "split must be train, val, or test, got '{other}'"
            ))),
        }
    }
}

/// One generated conversation: 8 s of audio per speaker and aligned head
/// tracks at the head frame rate. All values are f32-representable.
#[derive(Debug, Clone)]
pub struct DialogueSample {
    pub id: String,
    pub split: Split,
    pub seed: u64,
    pub user_wave: Vec<f64>,
    pub agent_wave: Vec<f64>,
    pub user_head: Array2<f64>,
    pub agent_head: Array2<f64>,
}

/// Ground-truth process state behind a sample, at head frame rate. Exposed
/// so oracles can test against the generative formulas directly.
#[derive(Debug, Clone)]
pub struct ProcessTruth {
    pub user_env: Vec<f64>,
    pub agent_env: Vec<f64>,
}

fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

/// Generates one sample along with its ground-truth envelopes.
pub fn gen_sample_traced(
    cfg: &ModelConfig,
    id: &str,
    split: Split,
    seed: u64,
) -> (DialogueSample, ProcessTruth) {
    let audio_len = SAMPLE_SECONDS * cfg.f_s;
    let frames = SAMPLE_SECONDS * cfg.f_h;
    let spf = cfg.f_s / cfg.f_h;
    let tau = 2.0 * std::f64::consts::PI;

    // Alternating speaker activity with exponential holding times. The two
    // speakers are complementary at every sample: when one stops the other
    // starts.
    let mut r_turn = RandomStream::new(seed, "datagen/turns");
    let mut user_now = r_turn.below(2) == 0;
    let mut user_active = vec![false; audio_len];
    let mut pos = 0usize;
    while pos < audio_len {
        let hold =
            (-TURN_MEAN_S * (1.0 - r_turn.uniform()).ln()).clamp(TURN_MIN_S, TURN_MAX_S);
        let end = (pos + (hold * cfg.f_s as f64).round() as usize).min(audio_len);
        if user_now {
            for slot in &mut user_active[pos..end] {
                *slot = true;
            }
        }
        pos = end.max(pos + 1);
        user_now = !user_now;
    }

    // Envelope: 120 ms centered moving average of the activity, via prefix
    // sums. The agent envelope is the exact complement.
    let half = cfg.f_s * ENVELOPE_MS / 1000 / 2;
    let mut prefix = vec![0.0f64; audio_len + 1];
    for i in 0..audio_len {
        prefix[i + 1] = prefix[i] + if user_active[i] { 1.0 } else { 0.0 };
    }
    let e_u_audio: Vec<f64> = (0..audio_len)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(audio_len);
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect();

    // Waveforms: enveloped white noise plus an enveloped marker tone, an
    // octave apart between the speakers.
    let mut r_wu = RandomStream::new(seed, "datagen/wave.user");
    let mut r_wa = RandomStream::new(seed, "datagen/wave.agent");
    let mut user_wave = vec![0.0f64; audio_len];
    let mut agent_wave = vec![0.0f64; audio_len];
    for i in 0..audio_len {
        let t = i as f64 / cfg.f_s as f64;
        let (eu, ea) = (e_u_audio[i], 1.0 - e_u_audio[i]);
        user_wave[i] = r_wu.normal() * eu + (tau * TONE_BASE_HZ * t).sin() * TONE_GAIN * eu;
        agent_wave[i] =
            r_wa.normal() * ea + (tau * 2.0 * TONE_BASE_HZ * t).sin() * TONE_GAIN * ea;
    }

    // Frame-rate envelopes: mean of the audio envelope over each frame.
    let e_u: Vec<f64> = (0..frames)
        .map(|f| e_u_audio[f * spf..(f + 1) * spf].iter().sum::<f64>() / spf as f64)
        .collect();
    let e_a: Vec<f64> = e_u.iter().map(|v| 1.0 - v).collect();

    let jaw0 = EXP_DIM;
    let pose0 = EXP_DIM + JAW_DIM;
    let frame_secs = |f: usize| f as f64 / cfg.f_h as f64;
    let stationary = |sigma: f64| sigma / (1.0 - WALK_PHI * WALK_PHI).sqrt();

    // User head. Expression rides the envelope on the first dims plus an
    // AR(1) walk on every dim; jaw follows the envelope with light noise;
    // pose is slow sinusoidal sway. Walks start at their stationary spread
    // and each dim draws from its own substream.
    let mut user_head = Array2::<f64>::zeros((frames, HEAD_DIM));
    let r_hu = RandomStream::new(seed, "datagen/head.user");
    for d in 0..EXP_DIM {
        let mut s = r_hu.substream(d as u64);
        let mut walk = stationary(USER_WALK_SIGMA) * s.normal();
        for f in 0..frames {
            let base = if d < COUPLED_DIMS { USER_EXP_ENV * e_u[f] } else { 0.0 };
            user_head[[f, d]] = base + walk;
            walk = WALK_PHI * walk + USER_WALK_SIGMA * s.normal();
        }
    }
    for d in 0..JAW_DIM {
        let mut s = r_hu.substream(100 + d as u64);
        for f in 0..frames {
            user_head[[f, jaw0 + d]] = JAW_GAIN * e_u[f] + USER_JAW_NOISE * s.normal();
        }
    }
    {
        let mut s = r_hu.substream(200);
        for d in 0..POSE_DIM {
            let phase = s.uniform_in(0.0, tau);
            for f in 0..frames {
                user_head[[f, pose0 + d]] =
                    USER_POSE_AMP * (tau * POSE_HZ * frame_secs(f) + phase).sin();
            }
        }
    }

    // Agent head, the structure a model is supposed to learn. The first
    // expression dims and the pose pitch dim react to the user envelope at
    // COUPLING_LAG frames; jaw follows the agent's own envelope; the rest is
    // low-amplitude texture. Observation noise lands on every dim.
    let lag_env = |f: usize| if f >= COUPLING_LAG { e_u[f - COUPLING_LAG] } else { 0.0 };
    let mut agent_head = Array2::<f64>::zeros((frames, HEAD_DIM));
    let r_ha = RandomStream::new(seed, "datagen/head.agent");
    for f in 0..frames {
        let coupled = COUPLE_ENV * lag_env(f) + COUPLE_SELF * e_a[f];
        for d in 0..COUPLED_DIMS {
            agent_head[[f, d]] = coupled;
        }
        for d in 0..JAW_DIM {
            agent_head[[f, jaw0 + d]] = JAW_GAIN * e_a[f];
        }
        agent_head[[f, pose0]] = PITCH_GAIN * lag_env(f);
    }
    for d in COUPLED_DIMS..EXP_DIM {
        let mut s = r_ha.substream(d as u64);
        let mut walk = stationary(AGENT_WALK_SIGMA) * s.normal();
        for f in 0..frames {
            agent_head[[f, d]] = walk;
            walk = WALK_PHI * walk + AGENT_WALK_SIGMA * s.normal();
        }
    }
    {
        let mut s = r_ha.substream(200);
        for d in 1..POSE_DIM {
            let phase = s.uniform_in(0.0, tau);
            for f in 0..frames {
                agent_head[[f, pose0 + d]] =
                    AGENT_POSE_AMP * (tau * POSE_HZ * frame_secs(f) + phase).sin();
            }
        }
    }
    for dim in 0..HEAD_DIM {
        let mut s = r_ha.substream(300 + dim as u64);
        for f in 0..frames {
            agent_head[[f, dim]] += OBS_SIGMA * s.normal();
        }
    }

    let sample = DialogueSample {
        id: id.to_string(),
        split,
        seed,
        user_wave: user_wave.into_iter().map(quantize).collect(),
        agent_wave: agent_wave.into_iter().map(quantize).collect(),
        user_head: user_head.mapv(quantize),
        agent_head: agent_head.mapv(quantize),
    };
    let truth = ProcessTruth {
        user_env: e_u.into_iter().map(quantize).collect(),
        agent_env: e_a.into_iter().map(quantize).collect(),
    };
    (sample, truth)
}

pub fn gen_sample(cfg: &ModelConfig, id: &str, split: Split, seed: u64) -> DialogueSample {
    gen_sample_traced(cfg, id, split, seed).0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestSample {
    pub id: String,
    pub split: Split,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: i64,
    pub seed: u64,
    pub samples: Vec<ManifestSample>,
}

impl DatasetManifest {
    pub fn ids(&self, split: Split) -> Vec<&ManifestSample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }
}

fn f32_array2(a: &Array2<f64>) -> ArchiveArray {
    ArchiveArray::F32(a.mapv(|v| v as f32).into_dyn())
}

fn f32_vec(v: &[f64]) -> ArchiveArray {
    ArchiveArray::F32(
        ndarray::Array1::from_iter(v.iter().map(|&x| x as f32)).into_dyn(),
    )
}

/// Writes one sample as `{id}.tmr` in `dir`.
pub fn write_sample(sample: &DialogueSample, dir: &Path) -> Result<()> {
    let mut ar = Archive::new();
    ar.insert("user_wave", f32_vec(&sample.user_wave))?;
    ar.insert("agent_wave", f32_vec(&sample.agent_wave))?;
    ar.insert("user_head", f32_array2(&sample.user_head))?;
    ar.insert("agent_head", f32_array2(&sample.agent_head))?;
    ar.write(&dir.join(format!("{}.tmr", sample.id)))
}

fn read_f64_vec(ar: &Archive, name: &str) -> Result<Vec<f64>> {
    Ok(ar.get(name)?.as_f32(name)?.iter().map(|&v| v as f64).collect())
}

fn read_f64_mat(ar: &Archive, name: &str) -> Result<Array2<f64>> {
    let a = ar.get(name)?.as_f32(name)?;
    let mat = a.view().into_dimensionality::<ndarray::Ix2>().map_err(|_| Error::Shape {
        what: name.into(),
        expected: "2 axes".into(),
        got: format!("{:?}", a.shape()),
    })?;
    Ok(mat.mapv(|v| v as f64))
}

/// Loads one sample back from `dir` by its manifest entry.
pub fn load_sample(dir: &Path, entry: &ManifestSample) -> Result<DialogueSample> {
    let ar = Archive::read(&dir.join(format!("{}.tmr", entry.id)))?;
    Ok(DialogueSample {
        id: entry.id.clone(),
        split: entry.split,
        seed: entry.seed,
        user_wave: read_f64_vec(&ar, "user_wave")?,
        agent_wave: read_f64_vec(&ar, "agent_wave")?,
        user_head: read_f64_mat(&ar, "user_head")?,
        agent_head: read_f64_mat(&ar, "agent_head")?,
    })
}

/// Generates a full dataset under `out_dir`: one archive per sample plus
/// `manifest.json`. Per-sample seeds come from substreams of the dataset
/// seed keyed by global sample index, so any prefix of the dataset is stable
/// under count changes further down the list.
pub fn gen_dataset(
    cfg: &ModelConfig,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let seeder = RandomStream::new(seed, "datagen/seeds");
    let mut samples = Vec::new();
    let mut index = 0u64;
    for (split, count) in
        [(Split::Train, n_train), (Split::Val, n_val), (Split::Test, n_test)]
    {
        for j in 0..count {
            let sample_seed = seeder.substream(index).next_u64();
            index += 1;
            let id = format!("{}_{j:04}", split.as_str());
            let sample = gen_sample(cfg, &id, split, sample_seed);
            write_sample(&sample, out_dir)?;
            samples.push(ManifestSample { id, split, seed: sample_seed });
        }
    }
    let manifest = DatasetManifest { schema_version: 1, seed, samples };
    write_manifest(&manifest, out_dir)?;
    Ok(manifest)
}

/// Writes `manifest.json` atomically.
pub fn write_manifest(manifest: &DatasetManifest, dir: &Path) -> Result<()> {
    let path = dir.join("manifest.json");
    let mut bytes = serde_json::to_vec_pretty(manifest)
        .map_err(|e| Error::Manifest { path: path.clone(), msg: e.to_string() })?;
    bytes.push(b'\n');
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(&path, e))?;
    tmp.write_all(&bytes).map_err(|e| Error::io(&path, e))?;
    tmp.flush().map_err(|e| Error::io(&path, e))?;
    tmp.persist(&path).map_err(|e| Error::io(&path, e.error))?;
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::Manifest { path, msg: e.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig::default()
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let c = cfg();
        let a = gen_sample(&c, "s", Split::Train, 1234);
        let b = gen_sample(&c, "s", Split::Train, 1234);
        assert_eq!(a.user_wave, b.user_wave);
        assert_eq!(a.agent_wave, b.agent_wave);
        assert_eq!(a.user_head, b.user_head);
        assert_eq!(a.agent_head, b.agent_head);
        let d = gen_sample(&c, "s", Split::Train, 1235);
        assert_ne!(a.user_head, d.user_head);
    }

    #[test]
    fn shapes_match_the_documented_duration() {
        let c = cfg();
        let s = gen_sample(&c, "s", Split::Train, 7);
        assert_eq!(s.user_wave.len(), 8 * 16000);
        assert_eq!(s.agent_wave.len(), 8 * 16000);
        assert_eq!(s.user_head.dim(), (200, 56));
        assert_eq!(s.agent_head.dim(), (200, 56));
    }

    #[test]
    fn envelopes_are_complementary_and_bounded() {
        let c = cfg();
        let (_, truth) = gen_sample_traced(&c, "s", Split::Train, 11);
        for (u, a) in truth.user_env.iter().zip(&truth.agent_env) {
            assert!((0.0..=1.0).contains(u));
            assert!((u + a - 1.0).abs() < 1e-6);
        }
        // Both speakers actually get the floor somewhere.
        assert!(truth.user_env.iter().any(|&v| v > 0.9));
        assert!(truth.user_env.iter().any(|&v| v < 0.1));
    }

    #[test]
    fn silent_stretches_leave_agent_motion_at_noise_level() {
        let c = cfg();
        let mut jaw_vals = Vec::new();
        let mut pitch_vals = Vec::new();
        for seed in 0..10u64 {
            let (s, truth) = gen_sample_traced(&c, "s", Split::Train, 500 + seed);
            let frames = truth.user_env.len();
            for f in 0..frames {
                // Agent fully silent: jaw must be pure observation noise.
                if truth.agent_env[f] == 0.0 {
                    for d in 0..JAW_DIM {
                        jaw_vals.push(s.agent_head[[f, EXP_DIM + d]]);
                    }
                }
                // Lagged user envelope zero: pitch must be pure noise.
                if f >= COUPLING_LAG && truth.user_env[f - COUPLING_LAG] == 0.0 {
                    pitch_vals.push(s.agent_head[[f, EXP_DIM + JAW_DIM]]);
                }
            }
        }
        assert!(jaw_vals.len() > 100, "too few agent-silent frames: {}", jaw_vals.len());
        assert!(pitch_vals.len() > 100, "too few user-silent frames: {}", pitch_vals.len());
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&jaw_vals).abs() < 0.005, "jaw mean {}", mean(&jaw_vals));
        assert!(mean(&pitch_vals).abs() < 0.005, "pitch mean {}", mean(&pitch_vals));
    }

    fn pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let mut sxy = 0.0;
        let mut sxx = 0.0;
        let mut syy = 0.0;
        for (&a, &b) in x.iter().zip(y) {
            sxy += (a - mx) * (b - my);
            sxx += (a - mx) * (a - mx);
            syy += (b - my) * (b - my);
        }
        sxy / (sxx * syy).sqrt()
    }

    #[test]
    fn pitch_cross_correlation_peaks_at_the_coupling_lag() {
        let c = cfg();
        let max_lag = 10usize;
        let mut by_lag = vec![0.0f64; max_lag + 1];
        let n_seeds = 8;
        for seed in 0..n_seeds {
            let (s, truth) = gen_sample_traced(&c, "s", Split::Train, 900 + seed);
            let frames = truth.user_env.len();
            let pitch: Vec<f64> =
                (max_lag..frames).map(|f| s.agent_head[[f, EXP_DIM + JAW_DIM]]).collect();
            for lag in 0..=max_lag {
                let env: Vec<f64> =
                    (max_lag..frames).map(|f| truth.user_env[f - lag]).collect();
                by_lag[lag] += pearson(&env, &pitch);
            }
        }
        let argmax = by_lag
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, COUPLING_LAG, "correlogram {by_lag:?}");
        assert!(by_lag[COUPLING_LAG] / n_seeds as f64 > 0.9);
    }

    #[test]
    fn regression_recovers_the_pitch_coupling_gain() {
        let c = cfg();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for seed in 0..20u64 {
            let (s, truth) = gen_sample_traced(&c, "s", Split::Train, 1300 + seed);
            for f in COUPLING_LAG..truth.user_env.len() {
                xs.push(truth.user_env[f - COUPLING_LAG]);
                ys.push(s.agent_head[[f, EXP_DIM + JAW_DIM]]);
            }
        }
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let mut sxy = 0.0;
        let mut sxx = 0.0;
        for (&x, &y) in xs.iter().zip(&ys) {
            sxy += (x - mx) * (y - my);
            sxx += (x - mx) * (x - mx);
        }
        let slope = sxy / sxx;
        assert!(
            (slope - PITCH_GAIN).abs() <= 0.005,
            "recovered slope {slope}, expected {PITCH_GAIN}"
        );
    }

    #[test]
    fn history_carries_real_information_about_early_turn_frames() {
        // Two analytic predictors for the coupled agent expression dims.
        // One knows the full user envelope history; the other lives inside
        // 1 second context turns and must extrapolate the envelope backward
        // across its turn boundary. The gap between them is the information
        // a context-using model can capture and a turn-local model cannot.
        let c = cfg();
        let k = c.k_frames();
        let mut se_full = 0.0f64;
        let mut se_local = 0.0f64;
        let mut se_baseline = 0.0f64;
        let mut count = 0usize;

        // Pooled mean of the coupled dims for the baseline predictor.
        let mut pool = Vec::new();
        let mut samples = Vec::new();
        for seed in 0..30u64 {
            let pair = gen_sample_traced(&c, "s", Split::Train, 2200 + seed);
            for f in COUPLING_LAG..pair.1.user_env.len() {
                for d in 0..COUPLED_DIMS {
                    pool.push(pair.0.agent_head[[f, d]]);
                }
            }
            samples.push(pair);
        }
        let baseline = pool.iter().sum::<f64>() / pool.len() as f64;

        for (s, truth) in &samples {
            let frames = truth.user_env.len();
            for f in COUPLING_LAG..frames {
                let lag_true = truth.user_env[f - COUPLING_LAG];
                // Inside a turn the lagged envelope is visible; across the
                // boundary the best turn-local guess is the envelope frozen
                // at the turn start.
                let turn_start = (f / k) * k;
                let lag_local = truth.user_env[(f - COUPLING_LAG).max(turn_start)];
                let e_a = truth.agent_env[f];
                let pred_full = COUPLE_ENV * lag_true + COUPLE_SELF * e_a;
                let pred_local = COUPLE_ENV * lag_local + COUPLE_SELF * e_a;
                for d in 0..COUPLED_DIMS {
                    let y = s.agent_head[[f, d]];
                    se_full += (y - pred_full) * (y - pred_full);
                    se_local += (y - pred_local) * (y - pred_local);
                    se_baseline += (y - baseline) * (y - baseline);
                    count += 1;
                }
            }
        }
        let mse_full = se_full / count as f64;
        let mse_local = se_local / count as f64;
        let mse_baseline = se_baseline / count as f64;

        // Full history must beat the turn-local ceiling by a clear margin,
        // and even the turn-local ceiling must crush the mean baseline.
        // These are the margins the context-length experiments rely on.
        assert!(
            mse_local > 1.5 * mse_full,
            "local {mse_local} vs full {mse_full}: no cross-boundary information"
        );
        assert!(
            mse_local < 0.5 * mse_baseline,
            "local {mse_local} vs baseline {mse_baseline}: turn-local signal too weak"
        );
        // The full-history predictor is the generative formula, so it sits
        // at the observation noise floor.
        assert!(mse_full < 3.0 * OBS_SIGMA * OBS_SIGMA, "full-history mse {mse_full}");
    }

    #[test]
    fn agent_texture_dims_stay_low_amplitude() {
        let c = cfg();
        let mut vals = Vec::new();
        for seed in 0..5u64 {
            let s = gen_sample(&c, "s", Split::Train, 3100 + seed);
            for f in 0..s.agent_head.nrows() {
                vals.push(s.agent_head[[f, 10]]);
            }
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        assert!(
            (0.005..0.05).contains(&std),
            "texture std {std} outside the intended range"
        );
    }

    #[test]
    fn dataset_layout_counts_and_roundtrip() {
        let c = cfg();
        let dir = tempfile::tempdir().unwrap();
        let manifest = gen_dataset(&c, 3, 2, 2, 99, dir.path()).unwrap();
        assert_eq!(manifest.samples.len(), 7);
        assert_eq!(manifest.ids(Split::Train).len(), 3);
        assert_eq!(manifest.ids(Split::Val).len(), 2);
        assert_eq!(manifest.ids(Split::Test).len(), 2);
        let tmr_count = std::fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| {
                e.as_ref().unwrap().path().extension().map(|x| x == "tmr").unwrap_or(false)
            })
            .count();
        assert_eq!(tmr_count, 7);

        let back = load_manifest(dir.path()).unwrap();
        assert_eq!(back.samples.len(), 7);
        let entry = &back.samples[4];
        assert_eq!(entry.split, Split::Val);
        let loaded = load_sample(dir.path(), entry).unwrap();
        let fresh = gen_sample(&c, &entry.id, entry.split, entry.seed);
        assert_eq!(loaded.user_wave, fresh.user_wave);
        assert_eq!(loaded.agent_wave, fresh.agent_wave);
        assert_eq!(loaded.user_head, fresh.user_head);
        assert_eq!(loaded.agent_head, fresh.agent_head);
    }

    #[test]
    fn regenerating_a_dataset_is_byte_identical() {
        let c = cfg();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        gen_dataset(&c, 2, 1, 0, 4242, dir_a.path()).unwrap();
        gen_dataset(&c, 2, 1, 0, 4242, dir_b.path()).unwrap();
        for name in ["manifest.json", "train_0000.tmr", "train_0001.tmr", "val_0000.tmr"] {
            let a = std::fs::read(dir_a.path().join(name)).unwrap();
            let b = std::fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "file {name} differs between regenerations");
        }
    }

    #[test]
    fn split_parsing_rejects_unknown_names() {
        assert_eq!("train".parse::<Split>().unwrap(), Split::Train);
        assert_eq!("val".parse::<Split>().unwrap(), Split::Val);
        assert_eq!("test".parse::<Split>().unwrap(), Split::Test);
        assert!("dev".parse::<Split>().is_err());
    }
}
