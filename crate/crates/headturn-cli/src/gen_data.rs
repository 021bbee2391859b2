//! `gen-data`: write a synthetic dialogue dataset.

use std::path::PathBuf;

use clap::Args;
use headturn::config::ModelConfig;
use headturn::datagen::gen_dataset;
use headturn::error::Result;
use serde_json::json;

use crate::manifest::{log_line, manifest_path, RunManifest};

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Model config file (key=value lines); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Dataset seed; per-sample seeds derive from it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,

    /// Training samples to generate.
    #[arg(long, default_value_t = 400)]
    pub train_n: usize,

    /// Validation samples to generate.
    #[arg(long, default_value_t = 40)]
    pub val_n: usize,

    /// Test samples to generate.
    #[arg(long, default_value_t = 40)]
    pub test_n: usize,
}

pub fn run(args: &GenDataArgs) -> Result<()> {
    let cfg = match &args.config {
        Some(path) => ModelConfig::load(path)?,
        None => ModelConfig::default(),
    };
    let mut run = RunManifest::begin("gen-data", args.config.as_deref(), args.seed);

    let manifest =
        gen_dataset(&cfg, args.train_n, args.val_n, args.test_n, args.seed, &args.out)?;
    log_line(json!({
        "event": "dataset_written",
        "out": args.out.display().to_string(),
        "train": args.train_n,
        "val": args.val_n,
        "test": args.test_n,
        "samples": manifest.samples.len(),
    }));

    run.push_output(&args.out.join("manifest.json"));
    run.finish(&manifest_path(&args.out))
}
