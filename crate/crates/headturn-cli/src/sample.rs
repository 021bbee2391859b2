//! `sample`: turn-by-turn generation over a dataset split, sweeping context
//! lengths and guidance weights. Each (context, omega) combination fills its
//! own subdirectory with one motion archive and one JSON sidecar per
//! conversation.

use std::path::{Path, PathBuf};

use clap::Args;
use headturn::archive::{Archive, ArchiveArray};
use headturn::config::Precision;
use headturn::datagen::{load_manifest, load_sample, ManifestSample, Split};
use headturn::error::{Error, Result};
use headturn::nn::Real;
use headturn::rng::RandomStream;
use headturn::streamer::{split_turns, Streamer};
use headturn::trainer::{checkpoint_config, TrainState};
use serde_json::json;

use crate::manifest::{log_line, manifest_path, write_json_atomic, RunManifest};

#[derive(Args, Debug)]
pub struct SampleArgs {
    /// Trained checkpoint to sample from.
    #[arg(long)]
    pub checkpoint: PathBuf,

    /// Dataset directory providing the conversations to react to.
    #[arg(long)]
    pub data: PathBuf,

    #[arg(long, default_value = "test")]
    pub split: String,

    /// Context history lengths to sweep, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub context_n: Vec<usize>,

    /// Guidance weights to sweep, comma separated; defaults to the
    /// checkpoint config's omega.
    #[arg(long, value_delimiter = ',')]
    pub omega: Vec<f64>,

    /// Diffusion sampling steps; defaults to the config value.
    #[arg(long)]
    pub steps: Option<usize>,

    /// Base seed; per-conversation seeds derive from it by split index, so
    /// every sweep combination reuses the same noise draws.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Output directory; one n{n}_omega{w} subdirectory per combination.
    #[arg(long)]
    pub out: PathBuf,

    /// Conversations generate independently, sharded over this many threads.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,

    /// Single-threaded determinism.
    #[arg(long)]
    pub strict: bool,
}

pub fn run(args: &SampleArgs) -> Result<()> {
    let cfg = checkpoint_config(&args.checkpoint)?;
    match cfg.precision {
        Precision::F32 => sample_run::<f32>(args),
        Precision::F64 => sample_run::<f64>(args),
    }
}

fn sample_run<F: Real>(args: &SampleArgs) -> Result<()> {
    let workers = crate::effective_workers(args.workers, args.strict);
    let split: Split = args.split.parse()?;
    let state = TrainState::<F>::load_checkpoint(&args.checkpoint)?;
    let steps_out = args.steps.unwrap_or(state.cfg.diff_sample_steps);
    let omegas =
        if args.omega.is_empty() { vec![state.cfg.omega] } else { args.omega.clone() };
    for &n in &args.context_n {
        if n + 1 > state.cfg.n_max {
            return Err(Error::invalid(format!(
                "context-n {n} plus the current turn exceeds n_max {}",
                state.cfg.n_max
            )));
        }
    }

    let manifest = load_manifest(&args.data)?;
    let entries: Vec<&ManifestSample> = manifest.ids(split);
    if entries.is_empty() {
        return Err(Error::invalid(format!("dataset split '{}' is empty", args.split)));
    }

    let streamer = Streamer::new(&state.store, &state.model, &state.cfg, &state.norm);
    let seeder = RandomStream::new(args.seed, "cli/sample");
    let mut run = RunManifest::begin("sample", None, args.seed);

    for &n in &args.context_n {
        for &w in &omegas {
            let dir = args.out.join(format!("n{n}_omega{w}"));
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            generate_combo(args, &streamer, &seeder, &entries, &dir, n, w, steps_out, workers)?;
            log_line(json!({
                "event": "generated",
                "context_n": n,
                "omega": w,
                "samples": entries.len(),
                "dir": dir.display().to_string(),
            }));
            run.push_output(&dir);
        }
    }
    run.finish(&manifest_path(&args.out))
}

/// Generates every conversation of the split for one sweep combination. The
/// per-conversation work is independent, so errors are reported for the
/// lowest split index regardless of sharding.
#[allow(clippy::too_many_arguments)]
fn generate_combo<F: Real>(
    args: &SampleArgs,
    streamer: &Streamer<'_, F>,
    seeder: &RandomStream,
    entries: &[&ManifestSample],
    dir: &Path,
    n: usize,
    omega: f64,
    steps_out: usize,
    workers: usize,
) -> Result<()> {
    let stride = workers.clamp(1, entries.len());
    let mut first_err: Option<(usize, Error)> = None;
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for wid in 0..stride {
            handles.push(scope.spawn(move || {
                let mut errs = Vec::new();
                let mut i = wid;
                while i < entries.len() {
                    if let Err(e) =
                        generate_one(streamer, &args.data, entries[i], dir, n, omega, steps_out, seeder, i)
                    {
                        errs.push((i, e));
                    }
                    i += stride;
                }
                errs
            }));
        }
        for h in handles {
            for (i, e) in h.join().expect("sampler worker panicked") {
                if first_err.as_ref().is_none_or(|(fi, _)| i < *fi) {
                    first_err = Some((i, e));
                }
            }
        }
    });
    match first_err {
        Some((_, e)) => Err(e),
        None => Ok(()),
    }
}

#[allow(clippy::too_many_arguments)]
fn generate_one<F: Real>(
    streamer: &Streamer<'_, F>,
    data: &Path,
    entry: &ManifestSample,
    dir: &Path,
    n: usize,
    omega: f64,
    steps_out: usize,
    seeder: &RandomStream,
    index: usize,
) -> Result<()> {
    let sample = load_sample(data, entry)?;
    let turns = split_turns(streamer.cfg, &sample)?;
    let mut stream = seeder.substream(index as u64);
    let seed = stream.next_u64();
    let motion = streamer.run_conversation(&turns, n, omega, steps_out, seed)?;

    let mut ar = Archive::new();
    ar.insert("agent_head", ArchiveArray::F32(motion.mapv(|v| v as f32).into_dyn()))?;
    ar.write(&dir.join(format!("{}.tmr", entry.id)))?;
    write_json_atomic(
        &dir.join(format!("{}.json", entry.id)),
        &json!({
            "id": entry.id,
            "seed": seed,
            "omega": omega,
            "context_n": n,
            "steps_out": steps_out,
        }),
    )
}
