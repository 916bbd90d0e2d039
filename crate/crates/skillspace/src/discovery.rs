//! Clustering evaluation and model selection: purity/perfect-clustering
//! metrics, combined-loss ranking, the codebook-size sweep, and skill
//! prototype extraction.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, TrajectoryPoint};
use crate::vqcnmp::{
    assign_all, decode, train, Assignment, LossBreakdown, ModelError, TrainingConfig, VqCnmpModel,
};

/// Trailing window over which "final" losses are averaged for model
/// selection.
pub const LOSS_WINDOW: usize = 1000;

#[derive(Debug, Error)]
pub enum DiscoveryError {
    #[error("assignment is empty")]
    EmptyAssignment,
    #[error("demo {0:?} has no ground-truth label")]
    MissingLabel(String),
    #[error("training failed for k={k}, seed={seed}: {source}")]
    TrainFailed { k: usize, seed: u64, source: ModelError },
    #[error(transparent)]
    Model(#[from] ModelError),
}

// ---------------------------------------------------------------------------
// Clustering metrics
// ---------------------------------------------------------------------------

/// How well an assignment recovers the ground-truth skills.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    /// Purity: fraction of demos whose vector's majority label matches their
    /// own.
    pub accuracy: f64,
    /// True when every skill's demos share a single vector and, given enough
    /// vectors, no two skills share one. With fewer vectors than skills only
    /// the cohesion half applies (merges are allowed).
    pub perfect: bool,
    /// Majority ground-truth label per used vector.
    pub vector_to_label: BTreeMap<usize, String>,
    /// Which vectors each skill's demos landed on.
    pub per_skill_split: BTreeMap<String, BTreeSet<usize>>,
}

/// Score an assignment against ground-truth labels for a codebook of size
/// `k`.
pub fn cluster_report(
    asg: &Assignment,
    labels: &BTreeMap<String, String>,
    k: usize,
) -> Result<ClusterReport, DiscoveryError> {
    if asg.is_empty() {
        return Err(DiscoveryError::EmptyAssignment);
    }
    let mut per_vector: BTreeMap<usize, BTreeMap<&str, usize>> = BTreeMap::new();
    let mut per_skill_split: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
    for (id, &index) in asg {
        let label = labels.get(id).ok_or_else(|| DiscoveryError::MissingLabel(id.clone()))?;
        *per_vector.entry(index).or_default().entry(label.as_str()).or_default() += 1;
        per_skill_split.entry(label.clone()).or_default().insert(index);
    }

    let mut majority_total = 0usize;
    let mut vector_to_label = BTreeMap::new();
    for (&index, counts) in &per_vector {
        // Ties break to the lexicographically smallest label.
        let (&label, &count) =
            counts.iter().max_by_key(|(label, count)| (**count, std::cmp::Reverse(*label))).unwrap();
        majority_total += count;
        vector_to_label.insert(index, label.to_string());
    }
    let accuracy = majority_total as f64 / asg.len() as f64;

    let cohesive = per_skill_split.values().all(|s| s.len() == 1);
    let n_skills = per_skill_split.len();
    let perfect = if k >= n_skills {
        let used: BTreeSet<usize> = per_skill_split.values().flatten().copied().collect();
        cohesive && used.len() == n_skills
    } else {
        cohesive
    };

    Ok(ClusterReport { accuracy, perfect, vector_to_label, per_skill_split })
}

// ---------------------------------------------------------------------------
// Model selection
// ---------------------------------------------------------------------------

/// Mean total loss over the trailing [`LOSS_WINDOW`] steps (or the whole
/// history when shorter); the quantity models are ranked by.
pub fn combined_loss(history: &[LossBreakdown]) -> f64 {
    trailing_mean(history, |l| l.total)
}

/// Mean quantization term over the trailing window.
pub fn vq_loss(history: &[LossBreakdown]) -> f64 {
    trailing_mean(history, |l| l.codebook_term)
}

fn trailing_mean(history: &[LossBreakdown], f: impl Fn(&LossBreakdown) -> f64) -> f64 {
    assert!(!history.is_empty(), "empty history");
    let window = history.len().min(LOSS_WINDOW);
    let tail = &history[history.len() - window..];
    tail.iter().map(f).sum::<f64>() / window as f64
}

/// Order a batch of trained models by combined loss, ascending. Returns
/// `(batch index, combined loss)`; the sort is stable so ties keep their
/// original order.
pub fn rank_models(batch: &[(VqCnmpModel, Vec<LossBreakdown>)]) -> Vec<(usize, f64)> {
    assert!(!batch.is_empty(), "empty batch");
    let mut ranked: Vec<(usize, f64)> =
        batch.iter().enumerate().map(|(i, (_, h))| (i, combined_loss(h))).collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1));
    ranked
}

// ---------------------------------------------------------------------------
// Codebook-size sweep
// ---------------------------------------------------------------------------

/// One trained model inside a sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCell {
    pub seed: u64,
    pub combined_loss: f64,
    pub vq_loss: f64,
    pub report: ClusterReport,
}

/// Batch results per codebook size.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub sizes: Vec<usize>,
    pub batch: usize,
    pub cells: BTreeMap<usize, Vec<SweepCell>>,
}

impl SweepReport {
    pub fn min_vq_loss(&self, k: usize) -> f64 {
        self.cells[&k].iter().map(|c| c.vq_loss).fold(f64::INFINITY, f64::min)
    }

    pub fn median_vq_loss(&self, k: usize) -> f64 {
        median(self.cells[&k].iter().map(|c| c.vq_loss).collect())
    }

    pub fn mean_accuracy(&self, k: usize) -> f64 {
        let cells = &self.cells[&k];
        cells.iter().map(|c| c.report.accuracy).sum::<f64>() / cells.len() as f64
    }

    pub fn max_accuracy(&self, k: usize) -> f64 {
        self.cells[&k].iter().map(|c| c.report.accuracy).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn median_accuracy(&self, k: usize) -> f64 {
        median(self.cells[&k].iter().map(|c| c.report.accuracy).collect())
    }

    pub fn perfect_count(&self, k: usize) -> usize {
        self.cells[&k].iter().filter(|c| c.report.perfect).count()
    }

    /// Text table with one column per codebook size: perfect-clustering
    /// counts and accuracy (mean and max over the batch).
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<20}", "skill space size"));
        for k in &self.sizes {
            out.push_str(&format!("{k:>12}"));
        }
        out.push('\n');
        out.push_str(&format!("{:<20}", "perfect clustering"));
        for k in &self.sizes {
            out.push_str(&format!("{:>12}", format!("{}/{}", self.perfect_count(*k), self.batch)));
        }
        out.push('\n');
        out.push_str(&format!("{:<20}", "accuracy (mean)"));
        for k in &self.sizes {
            out.push_str(&format!("{:>12.5}", self.mean_accuracy(*k)));
        }
        out.push('\n');
        out.push_str(&format!("{:<20}", "accuracy (max)"));
        for k in &self.sizes {
            out.push_str(&format!("{:>12.5}", self.max_accuracy(*k)));
        }
        out.push('\n');
        out.push_str(&format!("{:<20}", "min vq loss"));
        for k in &self.sizes {
            out.push_str(&format!("{:>12.5}", self.min_vq_loss(*k)));
        }
        out.push('\n');
        out
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    assert!(!xs.is_empty());
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Train `batch` models per codebook size (seeds `cfg.seed .. cfg.seed +
/// batch`) and score each against the dataset's labels. Jobs run in
/// parallel; results are ordered deterministically.
pub fn codebook_sweep(
    ds: &Dataset,
    sizes: &[usize],
    batch: usize,
    cfg: &TrainingConfig,
) -> Result<SweepReport, DiscoveryError> {
    assert!(!sizes.is_empty(), "sizes must be non-empty");
    assert!(batch >= 1, "batch must be >= 1");
    let labels = ds.labels();
    for demo in &ds.demos {
        if !labels.contains_key(&demo.id) {
            return Err(DiscoveryError::MissingLabel(demo.id.clone()));
        }
    }

    let jobs: Vec<(usize, u64)> = sizes
        .iter()
        .flat_map(|&k| (0..batch as u64).map(move |b| (k, cfg.seed + b)))
        .collect();
    let results: Vec<Result<(usize, SweepCell), DiscoveryError>> = jobs
        .par_iter()
        .map(|&(k, seed)| {
            let job_cfg = TrainingConfig { k, seed, ..cfg.clone() };
            let (model, history) = train(ds, &job_cfg)
                .map_err(|source| DiscoveryError::TrainFailed { k, seed, source })?;
            let asg = assign_all(&model, ds)
                .map_err(|source| DiscoveryError::TrainFailed { k, seed, source })?;
            let report = cluster_report(&asg, &labels, k)?;
            Ok((
                k,
                SweepCell {
                    seed,
                    combined_loss: combined_loss(&history),
                    vq_loss: vq_loss(&history),
                    report,
                },
            ))
        })
        .collect();

    let mut cells: BTreeMap<usize, Vec<SweepCell>> = BTreeMap::new();
    for r in results {
        let (k, cell) = r?;
        cells.entry(k).or_default().push(cell);
    }
    for column in cells.values_mut() {
        column.sort_by_key(|c| c.seed);
    }
    Ok(SweepReport { sizes: sizes.to_vec(), batch, cells })
}

// ---------------------------------------------------------------------------
// Skill prototypes
// ---------------------------------------------------------------------------

/// Decode the mean trajectory of every codebook vector used by at least one
/// training demo, denormalized, over the given time grid.
pub fn skill_prototypes(
    model: &VqCnmpModel,
    asg: &Assignment,
    times: &[f64],
) -> Result<BTreeMap<usize, Vec<TrajectoryPoint>>, DiscoveryError> {
    let used: BTreeSet<usize> = asg.values().copied().collect();
    let mut out = BTreeMap::new();
    for &k in &used {
        let v = model.codebook.vector(k).to_vec();
        let mut proto = Vec::with_capacity(times.len());
        for &t in times {
            let pred = decode(model, &v, t)?;
            proto.push(TrajectoryPoint { t, sm: model.norm_stats.denormalize_sm(&pred.mu) });
        }
        out.insert(k, proto);
    }
    Ok(out)
}

/// Evenly spaced time grid over `[0, 1]`.
pub fn time_grid(len: usize) -> Vec<f64> {
    assert!(len >= 2);
    (0..len).map(|i| i as f64 / (len - 1) as f64).collect()
}

// ---------------------------------------------------------------------------
