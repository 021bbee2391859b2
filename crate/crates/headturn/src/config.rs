//! Model configuration: dimensions, rates, and sampling knobs, with a flat
//! `key=value` file format.
//!
//! Lines are `key=value`; `#` starts a comment; blank lines are ignored.
//! Unknown keys are rejected so typos fail loudly. Validation names the
//! offending key in the error.

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

/// Width of the head parameter vector: 50 expression + 3 jaw + 3 pose.
pub const EXP_DIM: usize = 50;
pub const JAW_DIM: usize = 3;
pub const POSE_DIM: usize = 3;
pub const HEAD_DIM: usize = EXP_DIM + JAW_DIM + POSE_DIM;

/// Floating point width used for model math. Training defaults to `F32`;
/// tests and oracles use `F64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

/// All structural hyperparameters of the model and featurizer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Shared token width for speech and head tokens.
    pub d_t: usize,
    /// Fusion transformer width.
    pub d_e: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    /// Denoiser latent width.
    pub d_m: usize,
    /// Number of residual modulation blocks in the denoiser.
    pub k_blocks: usize,
    /// Head parameter width; the expression/jaw/pose split is fixed, so this
    /// must equal [`HEAD_DIM`].
    pub d_h: usize,
    /// Audio sample rate, Hz.
    pub f_s: usize,
    /// Head frame rate, fps.
    pub f_h: usize,
    /// Raw speech feature rate, Hz.
    pub f_w: usize,
    /// Raw speech feature width per row.
    pub d_raw: usize,
    /// Chunk length in seconds. `c*f_h`, `c*f_s`, and `c*f_w` must land on
    /// integers.
    pub c: f64,
    /// Maximum number of turns in a fused window.
    pub n_max: usize,
    /// Masking ratio for agent head positions during training.
    pub r: f64,
    /// Probability of dropping the user streams during training.
    pub p_cfg: f64,
    /// Guidance weight at sampling time.
    pub omega: f64,
    /// Diffusion training schedule length.
    pub diff_train_steps: usize,
    /// Default number of sampling steps.
    pub diff_sample_steps: usize,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_t: 1024,
            d_e: 1024,
            encoder_layers: 16,
            encoder_heads: 16,
            d_m: 1024,
            k_blocks: 3,
            d_h: HEAD_DIM,
            f_s: 16000,
            f_h: 25,
            f_w: 50,
            d_raw: 512,
            c: 1.0,
            n_max: 8,
            r: 0.7,
            p_cfg: 0.1,
            omega: 1.0,
            diff_train_steps: 1000,
            diff_sample_steps: 100,
            precision: Precision::F32,
        }
    }
}

fn near_integer(x: f64) -> Option<usize> {
    let r = x.round();
    if (x - r).abs() < 1e-9 && r >= 0.0 {
        Some(r as usize)
    } else {
        None
    }
}

impl ModelConfig {
    /// Head frames per chunk.
    pub fn k_frames(&self) -> usize {
        near_integer(self.c * self.f_h as f64).expect("validated config")
    }

    /// Audio samples per chunk.
    pub fn chunk_samples(&self) -> usize {
        near_integer(self.c * self.f_s as f64).expect("validated config")
    }

    /// Raw feature rows produced per chunk.
    pub fn feat_rows(&self) -> usize {
        near_integer(self.c * self.f_w as f64).expect("validated config") - 1
    }

    /// Flat token count contributed by one turn: four modality blocks of
    /// `k_frames` plus ten separators.
    pub fn turn_len(&self) -> usize {
        4 * self.k_frames() + 10
    }

    /// Maximum flat sequence length the fusion model can address.
    pub fn flat_capacity(&self) -> usize {
        self.n_max * self.turn_len()
    }

    /// Maximum number of agent head frames addressable in one window.
    pub fn frame_capacity(&self) -> usize {
        self.n_max * self.k_frames()
    }

    /// Checks every structural invariant, naming the offending key.
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::ConfigValue { key: key.into(), msg });

        if self.d_t == 0 || self.d_t % 2 != 0 {
            return bad("d_t", format!("must be positive and even, got {}", self.d_t));
        }
        if self.d_e == 0 {
            return bad("d_e", "must be positive".into());
        }
        if self.encoder_layers == 0 {
            return bad("encoder_layers", "must be positive".into());
        }
        if self.encoder_heads == 0 || self.d_e % self.encoder_heads != 0 {
            return bad(
                "encoder_heads",
                format!("must divide d_e={}, got {}", self.d_e, self.encoder_heads),
            );
        }
        if self.d_m == 0 || self.d_m % 2 != 0 {
            return bad("d_m", format!("must be positive and even, got {}", self.d_m));
        }
        if self.k_blocks == 0 {
            return bad("k_blocks", "must be positive".into());
        }
        if self.d_h != HEAD_DIM {
            return bad("d_h", format!("head split is fixed at {HEAD_DIM}, got {}", self.d_h));
        }
        if self.f_s == 0 {
            return bad("f_s", "must be positive".into());
        }
        if self.f_h == 0 {
            return bad("f_h", "must be positive".into());
        }
        if self.f_w == 0 {
            return bad("f_w", "must be positive".into());
        }
        if self.d_raw < 2 {
            return bad("d_raw", format!("needs energy plus at least one band, got {}", self.d_raw));
        }
        if !(self.c > 0.0) || !self.c.is_finite() {
            return bad("c", format!("must be a positive finite number, got {}", self.c));
        }
        for (key, rate) in [("f_h", self.f_h), ("f_s", self.f_s), ("f_w", self.f_w)] {
            if near_integer(self.c * rate as f64).is_none() {
                return bad("c", format!("c*{key} = {} is not an integer", self.c * rate as f64));
            }
        }
        let k = near_integer(self.c * self.f_h as f64).unwrap();
        if k == 0 {
            return bad("f_h", "c*f_h must be at least 1".into());
        }
        let rows = near_integer(self.c * self.f_w as f64).unwrap();
        if rows < 3 {
            return bad("f_w", format!("c*f_w-1 = {} leaves too few feature rows", rows as i64 - 1));
        }
        let samples = near_integer(self.c * self.f_s as f64).unwrap();
        if samples < crate::featurize::WINDOW {
            return bad("f_s", "chunk shorter than one analysis window".into());
        }
        // The fixed 400/320 framing must produce exactly c*f_w - 1 rows.
        let framed = (samples - crate::featurize::WINDOW) / crate::featurize::HOP + 1;
        if framed != rows - 1 {
            return bad(
                "f_w",
                format!("framing yields {framed} rows but c*f_w-1 = {}", rows - 1),
            );
        }
        if self.n_max == 0 {
            return bad("n_max", "must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.r) {
            return bad("r", format!("must lie in [0, 1], got {}", self.r));
        }
        if !(0.0..=1.0).contains(&self.p_cfg) {
            return bad("p_cfg", format!("must lie in [0, 1], got {}", self.p_cfg));
        }
        if !self.omega.is_finite() {
            return bad("omega", format!("must be finite, got {}", self.omega));
        }
        if self.diff_train_steps == 0 {
            return bad("diff_train_steps", "must be positive".into());
        }
        if self.diff_sample_steps == 0 || self.diff_sample_steps > self.diff_train_steps {
            return bad(
                "diff_sample_steps",
                format!(
                    "must lie in [1, diff_train_steps={}], got {}",
                    self.diff_train_steps, self.diff_sample_steps
                ),
            );
        }
        Ok(())
    }

    /// Applies one `key=value` assignment.
    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| Error::ConfigValue {
                key: key.to_string(),
                msg: format!("cannot parse '{value}'"),
            })
        }
        match key {
            "d_t" => self.d_t = parse(key, value)?,
            "d_e" => self.d_e = parse(key, value)?,
            "encoder_layers" => self.encoder_layers = parse(key, value)?,
            "encoder_heads" => self.encoder_heads = parse(key, value)?,
            "d_m" => self.d_m = parse(key, value)?,
            "k_blocks" => self.k_blocks = parse(key, value)?,
            "d_h" => self.d_h = parse(key, value)?,
            "f_s" => self.f_s = parse(key, value)?,
            "f_h" => self.f_h = parse(key, value)?,
            "f_w" => self.f_w = parse(key, value)?,
            "d_raw" => self.d_raw = parse(key, value)?,
            "c" => self.c = parse(key, value)?,
            "n_max" => self.n_max = parse(key, value)?,
            "r" => self.r = parse(key, value)?,
            "p_cfg" => self.p_cfg = parse(key, value)?,
            "omega" => self.omega = parse(key, value)?,
            "diff_train_steps" => self.diff_train_steps = parse(key, value)?,
            "diff_sample_steps" => self.diff_sample_steps = parse(key, value)?,
            "precision" => {
                self.precision = match value {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    other => {
                        return Err(Error::ConfigValue {
                            key: key.to_string(),
                            msg: format!("expected f32 or f64, got '{other}'"),
                        })
                    }
                }
            }
            other => {
                return Err(Error::ConfigParse { line, msg: format!("unknown key '{other}'") });
            }
        }
        Ok(())
    }

    /// Parses config text. Later assignments override earlier ones; the
    /// result is validated before being returned.
    pub fn from_str_validated(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::ConfigParse {
                line: line_no,
                msg: format!("expected key=value, got '{line}'"),
            })?;
            cfg.set(key.trim(), value.trim(), line_no)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads and validates a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_str_validated(&text)
    }

    /// Renders the config in the same `key=value` format `load` accepts.
    pub fn to_kv_string(&self) -> String {
        format!(
            "d_t={}\nd_e={}\nencoder_layers={}\nencoder_heads={}\nd_m={}\nk_blocks={}\n\
             d_h={}\nf_s={}\nf_h={}\nf_w={}\nd_raw={}\nc={}\nn_max={}\nr={}\np_cfg={}\n\
             omega={}\ndiff_train_steps={}\ndiff_sample_steps={}\nprecision={}\n",
            self.d_t,
            self.d_e,
            self.encoder_layers,
            self.encoder_heads,
            self.d_m,
            self.k_blocks,
            self.d_h,
            self.f_s,
            self.f_h,
            self.f_w,
            self.d_raw,
            self.c,
            self.n_max,
            self.r,
            self.p_cfg,
            self.omega,
            self.diff_train_steps,
            self.diff_sample_steps,
            self.precision,
        )
    }

    /// A small but structurally complete configuration for fast tests.
    pub fn tiny() -> Self {
        ModelConfig {
            d_t: 16,
            d_e: 16,
            encoder_layers: 2,
            encoder_heads: 2,
            d_m: 16,
            k_blocks: 2,
            ..ModelConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_yields_defaults() {
        let cfg = ModelConfig::from_str_validated("").unwrap();
        assert_eq!(cfg, ModelConfig::default());
        assert_eq!(cfg.d_t, 1024);
        assert_eq!(cfg.n_max, 8);
        assert_eq!(cfg.flat_capacity(), 880);
    }

    #[test]
    fn out_of_range_r_names_the_key() {
        let err = ModelConfig::from_str_validated("r=1.5").unwrap_err();
        match err {
            Error::ConfigValue { key, .. } => assert_eq!(key, "r"),
            other => panic!("expected ConfigValue, got {other:?}"),
        }
    }

    #[test]
    fn chunk_frame_count_follows_rates() {
        let cfg = ModelConfig::from_str_validated("c=1\nf_h=25").unwrap();
        assert_eq!(cfg.k_frames(), 25);
        assert_eq!(cfg.turn_len(), 110);
    }

    #[test]
    fn fractional_chunk_must_hit_integer_grid() {
        let err = ModelConfig::from_str_validated("c=0.3").unwrap_err();
        match err {
            Error::ConfigValue { key, .. } => assert_eq!(key, "c"),
            other => panic!("expected ConfigValue, got {other:?}"),
        }
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let cfg = ModelConfig::from_str_validated("# comment\n\nd_t = 64 # trailing\n").unwrap();
        assert_eq!(cfg.d_t, 64);
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = ModelConfig::from_str_validated("\nnot_a_key=3\n").unwrap_err();
        match err {
            Error::ConfigParse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected ConfigParse, got {other:?}"),
        }
    }

    #[test]
    fn kv_roundtrip_preserves_every_field() {
        let mut cfg = ModelConfig::tiny();
        cfg.r = 0.35;
        cfg.omega = 2.5;
        cfg.precision = Precision::F64;
        cfg.c = 2.0;
        let back = ModelConfig::from_str_validated(&cfg.to_kv_string()).unwrap();
        assert_eq!(cfg, back);
    }
}
