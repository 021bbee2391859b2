//! `train`: fit a model on a generated dataset, logging one JSON step record
//! per optimizer update and writing a resumable checkpoint.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use clap::Args;
use headturn::config::{ModelConfig, Precision};
use headturn::datagen::{load_manifest, load_sample, DialogueSample, ManifestSample, Split};
use headturn::error::{Error, Result};
use headturn::nn::Real;
use headturn::trainer::{
    checkpoint_config, norm_stats_from_prepared, prepare_samples, PreparedSample, TrainConfig,
    TrainState,
};
use serde_json::json;

use crate::manifest::{log_line, manifest_path, RunManifest};

fn parse_window(s: &str) -> std::result::Result<(usize, usize), String> {
    let one =
        |t: &str| t.trim().parse::<usize>().map_err(|e| format!("bad window bound '{t}': {e}"));
    match s.split_once(',') {
        Some((a, b)) => Ok((one(a)?, one(b)?)),
        None => {
            let v = one(s)?;
            Ok((v, v))
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Model config file for a fresh run; defaults apply when omitted.
    #[arg(long, conflicts_with = "checkpoint")]
    pub config: Option<PathBuf>,

    /// Dataset directory produced by gen-data.
    #[arg(long)]
    pub data: PathBuf,

    /// Output directory for the checkpoint and step log.
    #[arg(long)]
    pub out: PathBuf,

    /// Training seed; ignored when resuming, the checkpoint's seed wins.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Resume from this checkpoint instead of initializing fresh.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,

    #[arg(long, default_value_t = 1)]
    pub workers: usize,

    /// Single-threaded determinism.
    #[arg(long)]
    pub strict: bool,

    /// Stop once this many optimizer steps have completed.
    #[arg(long)]
    pub steps: Option<u64>,

    #[arg(long)]
    pub epochs: Option<usize>,

    #[arg(long)]
    pub batch_size: Option<usize>,

    #[arg(long)]
    pub lr: Option<f64>,

    /// Linear warmup length in optimizer steps.
    #[arg(long)]
    pub warmup: Option<u64>,

    /// Per-step turn window range as LO,HI (or a single length). Each step
    /// then trains on a random contiguous span of that many turns.
    #[arg(long, value_parser = parse_window)]
    pub window_turns: Option<(usize, usize)>,
}

impl TrainArgs {
    fn apply_overrides(&self, tcfg: &mut TrainConfig) -> Result<()> {
        if let Some(lr) = self.lr {
            tcfg.lr = lr;
        }
        if let Some(w) = self.warmup {
            tcfg.warmup_iters = w;
        }
        if let Some(b) = self.batch_size {
            tcfg.batch_size = b;
        }
        if let Some(e) = self.epochs {
            tcfg.epochs = e;
        }
        if let Some((lo, hi)) = self.window_turns {
            if lo == 0 || lo > hi {
                return Err(Error::invalid(format!(
                    "window turns must satisfy 1 <= lo <= hi, got {lo},{hi}"
                )));
            }
            tcfg.window_turns = Some((lo, hi));
        }
        Ok(())
    }
}

pub fn run(args: &TrainArgs) -> Result<()> {
    let cfg = match &args.checkpoint {
        Some(path) => checkpoint_config(path)?,
        None => match &args.config {
            Some(path) => ModelConfig::load(path)?,
            None => ModelConfig::default(),
        },
    };
    match cfg.precision {
        Precision::F32 => train_run::<f32>(args, cfg),
        Precision::F64 => train_run::<f64>(args, cfg),
    }
}

/// Loads the train split in chunks so raw audio is dropped as soon as each
/// chunk is featurized.
fn load_prepared<F: Real>(
    args: &TrainArgs,
    cfg: &ModelConfig,
    workers: usize,
) -> Result<Vec<PreparedSample<F>>> {
    let manifest = load_manifest(&args.data)?;
    let entries: Vec<&ManifestSample> = manifest.ids(Split::Train);
    if entries.is_empty() {
        return Err(Error::invalid("dataset has no train split samples"));
    }
    let mut prepared = Vec::with_capacity(entries.len());
    for chunk in entries.chunks(32) {
        let raw: Vec<DialogueSample> =
            chunk.iter().map(|e| load_sample(&args.data, e)).collect::<Result<_>>()?;
        prepared.extend(prepare_samples(cfg, &raw, workers)?);
    }
    Ok(prepared)
}

fn train_run<F: Real>(args: &TrainArgs, cfg: ModelConfig) -> Result<()> {
    let workers = crate::effective_workers(args.workers, args.strict);
    let mut run = RunManifest::begin("train", args.config.as_deref(), args.seed);

    let prepared = load_prepared::<F>(args, &cfg, workers)?;
    log_line(json!({ "event": "prepared", "samples": prepared.len() }));

    let mut state = match &args.checkpoint {
        Some(path) => TrainState::<F>::load_checkpoint(path)?,
        None => {
            let norm = norm_stats_from_prepared(&prepared)?;
            TrainState::new(cfg, TrainConfig::default(), norm, args.seed)?
        }
    };
    args.apply_overrides(&mut state.tcfg)?;

    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let log_path = args.out.join("train_log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);

    let epochs = state.tcfg.epochs as u64;
    state.train_until(&prepared, workers, epochs, args.steps, |rec| {
        let line = serde_json::to_string(rec).expect("step records serialize");
        writeln!(log, "{line}").expect("step log writable");
        eprintln!("{line}");
    })?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;

    let ckpt_path = args.out.join("checkpoint.tmr");
    state.save_checkpoint(&ckpt_path)?;
    log_line(json!({
        "event": "checkpoint",
        "path": ckpt_path.display().to_string(),
        "step": state.step,
        "epoch": state.epoch,
    }));

    run.push_output(&ckpt_path);
    run.push_output(&log_path);
    run.finish(&manifest_path(&args.out))
}
