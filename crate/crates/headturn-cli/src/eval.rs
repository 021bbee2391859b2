//! `eval`: score generated motion against ground truth, one metric block per
//! sweep combination found under the generated directory.

use std::path::{Path, PathBuf};

use clap::Args;
use headturn::archive::Archive;
use headturn::datagen::{load_manifest, load_sample, ManifestSample, Split};
use headturn::error::{Error, Result};
use headturn::metrics::{evaluate, MetricReport};
use ndarray::{Array2, Ix2};
use serde::Serialize;
use serde_json::json;

use crate::manifest::{log_line, write_json_atomic, RunManifest};

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory produced by `sample`, holding n{n}_omega{w} subdirectories.
    #[arg(long)]
    pub generated: PathBuf,

    /// Dataset directory providing ground truth and user motion.
    #[arg(long)]
    pub data: PathBuf,

    #[arg(long, default_value = "test")]
    pub split: String,

    /// k-means cluster count for the diversity score.
    #[arg(long, default_value_t = 40)]
    pub clusters: usize,

    /// Seed for the k-means fit.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Report path; defaults to eval.json inside the generated directory.
    #[arg(long)]
    pub out: Option<PathBuf>,

    /// Conversations load in parallel; metric reductions stay order-fixed.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,

    /// Single-threaded determinism.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Serialize)]
struct EvalGroup {
    context_n: usize,
    omega: f64,
    metrics: MetricReport,
}

#[derive(Debug, Serialize)]
struct EvalReport {
    schema_version: i64,
    split: String,
    generated: String,
    data: String,
    sid_clusters: usize,
    seed: u64,
    groups: Vec<EvalGroup>,
}

/// Finds `n{n}_omega{w}` subdirectories and returns them sorted by context
/// length, then guidance weight.
fn scan_groups(root: &Path) -> Result<Vec<(usize, f64, PathBuf)>> {
    let mut groups = Vec::new();
    let listing = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    for item in listing {
        let item = item.map_err(|e| Error::io(root, e))?;
        if !item.path().is_dir() {
            continue;
        }
        let name = item.file_name();
        let Some(name) = name.to_str() else { continue };
        let Some(rest) = name.strip_prefix('n') else { continue };
        let Some((n_part, w_part)) = rest.split_once("_omega") else { continue };
        let (Ok(n), Ok(w)) = (n_part.parse::<usize>(), w_part.parse::<f64>()) else { continue };
        groups.push((n, w, item.path()));
    }
    if groups.is_empty() {
        return Err(Error::invalid(format!(
            "no generation directories (n<N>_omega<W>) under {}",
            root.display()
        )));
    }
    groups.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    Ok(groups)
}

fn load_one(
    data: &Path,
    entry: &ManifestSample,
    dir: &Path,
) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
    let gt = load_sample(data, entry)?;
    let ar = Archive::read(&dir.join(format!("{}.tmr", entry.id)))?;
    let raw = ar.get("agent_head")?.as_f32("agent_head")?;
    let gen = raw
        .view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::Shape {
            what: format!("generated motion for {}", entry.id),
            expected: "2 axes".into(),
            got: format!("{:?}", raw.shape()),
        })?
        .mapv(|v| v as f64);
    if gen.dim() != gt.agent_head.dim() {
        return Err(Error::Shape {
            what: format!("generated motion for {}", entry.id),
            expected: format!("{:?}", gt.agent_head.dim()),
            got: format!("{:?}", gen.dim()),
        });
    }
    Ok((gen, gt.agent_head, gt.user_head))
}

/// Loads a whole group in split order. Workers stride over conversations;
/// results land in index slots, so pooling order never depends on sharding.
fn load_group(
    data: &Path,
    entries: &[&ManifestSample],
    dir: &Path,
    workers: usize,
) -> Result<(Vec<Array2<f64>>, Vec<Array2<f64>>, Vec<Array2<f64>>)> {
    let total = entries.len();
    let stride = workers.clamp(1, total);
    let mut slots: Vec<Option<(Array2<f64>, Array2<f64>, Array2<f64>)>> = Vec::new();
    slots.resize_with(total, || None);
    let mut first_err: Option<(usize, Error)> = None;
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for wid in 0..stride {
            handles.push(scope.spawn(move || {
                let mut loaded = Vec::new();
                let mut errs = Vec::new();
                let mut i = wid;
                while i < total {
                    match load_one(data, entries[i], dir) {
                        Ok(t) => loaded.push((i, t)),
                        Err(e) => errs.push((i, e)),
                    }
                    i += stride;
                }
                (loaded, errs)
            }));
        }
        for h in handles {
            let (loaded, errs) = h.join().expect("eval loader panicked");
            for (i, t) in loaded {
                slots[i] = Some(t);
            }
            for (i, e) in errs {
                if first_err.as_ref().is_none_or(|(fi, _)| i < *fi) {
                    first_err = Some((i, e));
                }
            }
        }
    });
    if let Some((_, e)) = first_err {
        return Err(e);
    }
    let mut gen = Vec::with_capacity(total);
    let mut gt = Vec::with_capacity(total);
    let mut user = Vec::with_capacity(total);
    for slot in slots {
        let (g, t, u) = slot.expect("every slot filled without error");
        gen.push(g);
        gt.push(t);
        user.push(u);
    }
    Ok((gen, gt, user))
}

pub fn run(args: &EvalArgs) -> Result<()> {
    let workers = crate::effective_workers(args.workers, args.strict);
    let split: Split = args.split.parse()?;
    let manifest = load_manifest(&args.data)?;
    let entries: Vec<&ManifestSample> = manifest.ids(split);
    if entries.is_empty() {
        return Err(Error::invalid(format!("dataset split '{}' is empty", args.split)));
    }

    let mut run = RunManifest::begin("eval", None, args.seed);
    let mut groups = Vec::new();
    for (n, w, dir) in scan_groups(&args.generated)? {
        let (gen, gt, user) = load_group(&args.data, &entries, &dir, workers)?;
        let metrics = evaluate(&gen, &gt, &user, args.clusters, args.seed)?;
        log_line(json!({
            "event": "evaluated",
            "context_n": n,
            "omega": w,
            "mse_exp": metrics.exp.mse,
            "fd_exp": metrics.exp.fd,
        }));
        groups.push(EvalGroup { context_n: n, omega: w, metrics });
    }

    let out = args.out.clone().unwrap_or_else(|| args.generated.join("eval.json"));
    let report = EvalReport {
        schema_version: 1,
        split: args.split.clone(),
        generated: args.generated.display().to_string(),
        data: args.data.display().to_string(),
        sid_clusters: args.clusters,
        seed: args.seed,
        groups,
    };
    write_json_atomic(&out, &report)?;
    log_line(json!({ "event": "report", "path": out.display().to_string() }));
    run.push_output(&out);
    run.finish(&out.with_extension("manifest.json"))
}
