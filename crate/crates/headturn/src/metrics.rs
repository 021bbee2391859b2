//! Evaluation metrics over generated head motion: Frechet distance, its
//! paired variant with the user's motion attached, frame MSE, cluster-entropy
//! diversity (SID), and the correlation-pattern distance (rPCC). Each is
//! reported separately for the expression, jaw, and pose components.
//!
//! Distribution statistics use the population convention over all pooled
//! frames. Features are the raw per-frame parameters; no learned feature
//! encoder is involved, so absolute values are only comparable within runs
//! of this codebase.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::Serialize;

use crate::config::{EXP_DIM, HEAD_DIM, JAW_DIM, POSE_DIM};
use crate::error::{Error, Result};
use crate::rng::RandomStream;

/// One head-parameter subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Exp,
    Jaw,
    Pose,
}

impl Component {
    pub fn all() -> [Component; 3] {
        [Component::Exp, Component::Jaw, Component::Pose]
    }

    /// Column range of this component within a 56-dim frame.
    pub fn range(self) -> Range<usize> {
        match self {
            Component::Exp => 0..EXP_DIM,
            Component::Jaw => EXP_DIM..EXP_DIM + JAW_DIM,
            Component::Pose => EXP_DIM + JAW_DIM..EXP_DIM + JAW_DIM + POSE_DIM,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Component::Exp => "exp",
            Component::Jaw => "jaw",
            Component::Pose => "pose",
        }
    }
}

/// All five metrics for one component.
#[derive(Debug, Clone, Serialize)]
pub struct ComponentScores {
    pub fd: f64,
    pub pfd: f64,
    pub mse: f64,
    pub sid: f64,
    pub rpcc: f64,
}

/// Full evaluation result, one score block per component.
#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub exp: ComponentScores,
    pub jaw: ComponentScores,
    pub pose: ComponentScores,
    pub samples: usize,
    pub sid_clusters: usize,
    pub seed: u64,
}

fn ensure_finite(name: &str, x: &Array2<f64>) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("non-finite values in {name}")));
    }
    Ok(())
}

fn population_mean_cov(x: &Array2<f64>) -> (Array1<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let d = x.ncols();
    let mean = x.mean_axis(Axis(0)).expect("nonempty rows");
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for row in x.rows() {
        for i in 0..d {
            let di = row[i] - mean[i];
            for j in i..d {
                cov[(i, j)] += di * (row[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / n;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    for i in 0..d {
        cov[(i, i)] += 1e-6;
    }
    (mean, cov)
}

/// Symmetric PSD square root via eigendecomposition, negative eigenvalues
/// clamped to zero.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let roots = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()),
    );
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Frechet distance between the Gaussian fits of two frame sets:
/// squared mean distance plus the Bures covariance term. Covariances carry a
/// 1e-6 diagonal regularizer.
pub fn frechet_distance(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return Err(Error::Shape {
            what: "distribution features".into(),
            expected: format!("{} columns on both sides", a.ncols()),
            got: format!("{} vs {}", a.ncols(), b.ncols()),
        });
    }
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::invalid("empty frame set"));
    }
    ensure_finite("distribution features", a)?;
    ensure_finite("distribution features", b)?;

    let (ma, ca) = population_mean_cov(a);
    let (mb, cb) = population_mean_cov(b);
    let mean_term: f64 = ma.iter().zip(mb.iter()).map(|(x, y)| (x - y).powi(2)).sum();

    let a_half = sqrt_psd(&ca);
    let mut inner = &a_half * &cb * &a_half;
    let symmetrized = (&inner + inner.transpose()) * 0.5;
    inner = symmetrized;
    let eig = inner.symmetric_eigen();
    let cross: f64 = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum();

    Ok((mean_term + ca.trace() + cb.trace() - 2.0 * cross).max(0.0))
}

/// Frechet distance on frame-aligned [agent || user] concatenations, so the
/// score reflects how well generated motion fits the interlocutor, not just
/// the marginal motion distribution.
pub fn paired_frechet(
    a_agent: &Array2<f64>,
    a_user: &Array2<f64>,
    b_agent: &Array2<f64>,
    b_user: &Array2<f64>,
) -> Result<f64> {
    let pair = |agent: &Array2<f64>, user: &Array2<f64>| -> Result<Array2<f64>> {
        if agent.nrows() != user.nrows() {
            return Err(Error::Shape {
                what: "paired motion streams".into(),
                expected: format!("{} frames on both streams", agent.nrows()),
                got: format!("{} agent, {} user", agent.nrows(), user.nrows()),
            });
        }
        let (n, d, du) = (agent.nrows(), agent.ncols(), user.ncols());
        let mut joined = Array2::zeros((n, d + du));
        joined.slice_mut(s![.., ..d]).assign(agent);
        joined.slice_mut(s![.., d..]).assign(user);
        Ok(joined)
    };
    frechet_distance(&pair(a_agent, a_user)?, &pair(b_agent, b_user)?)
}

/// Mean over frames of the squared Euclidean distance between prediction and
/// ground truth.
pub fn mse(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape {
            what: "mse inputs".into(),
            expected: format!("{:?}", gt.dim()),
            got: format!("{:?}", pred.dim()),
        });
    }
    if pred.nrows() == 0 {
        return Err(Error::invalid("empty frame set"));
    }
    let mut total = 0.0;
    for (p, g) in pred.rows().into_iter().zip(gt.rows()) {
        total += p.iter().zip(g.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    Ok(total / pred.nrows() as f64)
}

fn nearest_centroid(centroids: &Array2<f64>, point: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, row) in centroids.rows().into_iter().enumerate() {
        let d: f64 = row.iter().zip(point.iter()).map(|(a, b)| (a - b).powi(2)).sum();
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

/// Lloyd's k-means with k-means++ seeding, at most 100 iterations, stopping
/// when no centroid moves more than 1e-6. Single-threaded and fully
/// determined by the seed.
fn kmeans_fit(x: &Array2<f64>, k: usize, seed: u64) -> Array2<f64> {
    let n = x.nrows();
    let d = x.ncols();
    let mut rng = RandomStream::new(seed, "metrics/kmeans");
    let mut centroids = Array2::<f64>::zeros((k, d));
    let first = rng.below(n as u64) as usize;
    centroids.row_mut(0).assign(&x.row(first));

    let mut d2 = vec![f64::INFINITY; n];
    for c in 1..k {
        for (i, row) in x.rows().into_iter().enumerate() {
            let dist: f64 =
                row.iter().zip(centroids.row(c - 1).iter()).map(|(a, b)| (a - b).powi(2)).sum();
            if dist < d2[i] {
                d2[i] = dist;
            }
        }
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut cum = 0.0;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                cum += w;
                if cum > target {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.below(n as u64) as usize
        };
        centroids.row_mut(c).assign(&x.row(next));
    }

    let mut assign = vec![0usize; n];
    for _ in 0..100 {
        for (i, row) in x.rows().into_iter().enumerate() {
            assign[i] = nearest_centroid(&centroids, row);
        }
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (i, row) in x.rows().into_iter().enumerate() {
            let c = assign[i];
            counts[c] += 1;
            for (acc, &v) in sums.row_mut(c).iter_mut().zip(row.iter()) {
                *acc += v;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let inv = 1.0 / counts[c] as f64;
            let mut moved = 0.0;
            for (old, acc) in centroids.row_mut(c).iter_mut().zip(sums.row(c).iter()) {
                let new = acc * inv;
                moved += (new - *old).powi(2);
                *old = new;
            }
            shift = shift.max(moved.sqrt());
        }
        if shift < 1e-6 {
            break;
        }
    }
    centroids
}

/// Diversity of generated motion as the entropy (bits) of its distribution
/// over k-means clusters fit on the reference set. Clamped at zero against
/// the epsilon inside the log.
pub fn sid(generated: &Array2<f64>, reference: &Array2<f64>, k: usize, seed: u64) -> Result<f64> {
    if generated.ncols() != reference.ncols() {
        return Err(Error::Shape {
            what: "sid features".into(),
            expected: format!("{} columns", reference.ncols()),
            got: format!("{} columns", generated.ncols()),
        });
    }
    if reference.nrows() < k {
        return Err(Error::invalid(format!(
            "sid needs at least {k} reference frames, found {}",
            reference.nrows()
        )));
    }
    if generated.nrows() == 0 {
        return Err(Error::invalid("empty generated frame set"));
    }
    ensure_finite("sid features", generated)?;
    ensure_finite("sid features", reference)?;

    let centroids = kmeans_fit(reference, k, seed);
    let mut hist = vec![0usize; k];
    for row in generated.rows() {
        hist[nearest_centroid(&centroids, row)] += 1;
    }
    let n = generated.nrows() as f64;
    let mut entropy = 0.0;
    for &count in &hist {
        let p = count as f64 / n;
        entropy -= p * (p + 1e-12).log2();
    }
    Ok(entropy.max(0.0))
}

/// Pearson correlation with population moments; returns 0 when either series
/// is (numerically) constant.
pub fn safe_pearson(x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> f64 {
    let n = x.len() as f64;
    let mx = x.sum() / n;
    let my = y.sum() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&a, &b) in x.iter().zip(y.iter()) {
        let dx = a - mx;
        let dy = b - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    sxx /= n;
    syy /= n;
    sxy /= n;
    if sxx <= 1e-12 || syy <= 1e-12 {
        return 0.0;
    }
    sxy / (sxx.sqrt() * syy.sqrt())
}

/// One conversation's frame-aligned motion streams for rPCC.
pub struct MotionPair<'a> {
    pub gen_agent: ArrayView2<'a, f64>,
    pub gt_agent: ArrayView2<'a, f64>,
    pub user: ArrayView2<'a, f64>,
}

/// How far generated agent-to-user correlation patterns sit from the real
/// ones: per dimension, the Pearson correlation against the user stream is
/// computed for generated and ground-truth motion, and the mean absolute
/// difference is averaged over samples.
pub fn rpcc(pairs: &[MotionPair<'_>]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("rpcc needs at least one sample"));
    }
    let mut total = 0.0;
    for pair in pairs {
        let frames = pair.user.nrows();
        if frames < 2 {
            return Err(Error::invalid(format!(
                "rpcc needs at least 2 frames per sample, found {frames}"
            )));
        }
        if pair.gen_agent.dim() != pair.user.dim() || pair.gt_agent.dim() != pair.user.dim() {
            return Err(Error::Shape {
                what: "rpcc streams".into(),
                expected: format!("{:?} for all three streams", pair.user.dim()),
                got: format!("{:?} gen, {:?} gt", pair.gen_agent.dim(), pair.gt_agent.dim()),
            });
        }
        let d = pair.user.ncols();
        let mut sum = 0.0;
        for j in 0..d {
            let rho_gen = safe_pearson(pair.gen_agent.column(j), pair.user.column(j));
            let rho_real = safe_pearson(pair.gt_agent.column(j), pair.user.column(j));
            sum += (rho_gen - rho_real).abs();
        }
        total += sum / d as f64;
    }
    Ok(total / pairs.len() as f64)
}

fn pool_component(seqs: &[Array2<f64>], range: &Range<usize>) -> Array2<f64> {
    let rows: usize = seqs.iter().map(|s| s.nrows()).sum();
    let mut out = Array2::zeros((rows, range.len()));
    let mut at = 0;
    for seq in seqs {
        let n = seq.nrows();
        out.slice_mut(s![at..at + n, ..]).assign(&seq.slice(s![.., range.clone()]));
        at += n;
    }
    out
}

/// Runs all five metrics per component over a set of conversations.
/// `gen`, `gt`, and `user` hold one [frames, 56] sequence per conversation,
/// frame-aligned within each index.
pub fn evaluate(
    gen: &[Array2<f64>],
    gt: &[Array2<f64>],
    user: &[Array2<f64>],
    sid_clusters: usize,
    seed: u64,
) -> Result<MetricReport> {
    if gen.is_empty() || gen.len() != gt.len() || gen.len() != user.len() {
        return Err(Error::invalid(format!(
            "evaluate needs matching nonempty sequence sets, got {} gen, {} gt, {} user",
            gen.len(),
            gt.len(),
            user.len()
        )));
    }
    for (i, ((g, t), u)) in gen.iter().zip(gt).zip(user).enumerate() {
        if g.ncols() != HEAD_DIM || g.dim() != t.dim() || g.dim() != u.dim() {
            return Err(Error::Shape {
                what: format!("evaluation sequence {i}"),
                expected: format!("matching [frames, {HEAD_DIM}] shapes"),
                got: format!("{:?} gen, {:?} gt, {:?} user", g.dim(), t.dim(), u.dim()),
            });
        }
    }

    let mut scores = Vec::with_capacity(3);
    for comp in Component::all() {
        let r = comp.range();
        let g = pool_component(gen, &r);
        let t = pool_component(gt, &r);
        let u = pool_component(user, &r);
        let pairs: Vec<MotionPair<'_>> = gen
            .iter()
            .zip(gt)
            .zip(user)
            .map(|((g, t), u)| MotionPair {
                gen_agent: g.slice(s![.., r.clone()]),
                gt_agent: t.slice(s![.., r.clone()]),
                user: u.slice(s![.., r.clone()]),
            })
            .collect();
        scores.push(ComponentScores {
            fd: frechet_distance(&g, &t)?,
            pfd: paired_frechet(&g, &u, &t, &u)?,
            mse: mse(&g, &t)?,
            sid: sid(&g, &t, sid_clusters, seed)?,
            rpcc: rpcc(&pairs)?,
        });
    }
    let pose = scores.pop().expect("three components");
    let jaw = scores.pop().expect("three components");
    let exp = scores.pop().expect("three components");
    Ok(MetricReport { exp, jaw, pose, samples: gen.len(), sid_clusters, seed })
}
