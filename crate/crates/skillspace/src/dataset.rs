//! Trajectory data types, the synthetic kitchen demonstration generator, and
//! dataset persistence.
//!
//! A [`Demonstration`] is a time-indexed sensorimotor trajectory: `(t, sm)`
//! pairs with `t` normalized to `[0, 1]`. The default sensorimotor layout is
//! 4 channels: end-effector `x, y, z` in meters plus a gripper state in
//! `[0, 1]`. Ground-truth skill labels ride along for evaluation only; no
//! training code reads them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sensorimotor channels emitted by the synthetic generator: x, y, z, gripper.
pub const GENERATOR_DIM: usize = 4;

/// Default number of points per demonstration.
pub const DEFAULT_DEMO_LEN: usize = 150;

/// Fraction of the trajectory at which the end effector reaches the object.
pub const CONTACT_FRACTION: f64 = 0.4;

/// Fraction of the trajectory at which the object is released over the sink.
pub const RELEASE_FRACTION: f64 = 0.8;

/// Grasping dwell: the hand holds still at the object while the gripper
/// closes.
const GRASP_HOLD_FRACTION: f64 = 0.43;

/// The transfer arrives at the sink before the release so the drop happens
/// from a standstill.
const ARRIVE_FRACTION: f64 = 0.75;

/// End of the post-release dwell over the sink.
const DEPART_FRACTION: f64 = 0.84;

/// Fixed start pose shared by every synthetic demonstration, meters.
pub const HOME_POSE: [f64; 3] = [0.0, -0.35, 0.25];

const RETREAT_OFFSET: [f64; 3] = [0.0, -0.05, 0.10];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("dataset is already normalized")]
    AlreadyNormalized,
    #[error("dataset is not normalized")]
    NotNormalized,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("schema error at line {line}: {msg}")]
    Schema { line: usize, msg: String },
}

// ---------------------------------------------------------------------------
// Core types
// ---------------------------------------------------------------------------

/// One sample of a trajectory: normalized time plus the sensorimotor vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    /// Normalized time in `[0, 1]`.
    pub t: f64,
    /// Sensorimotor vector, `d` entries.
    pub sm: Vec<f64>,
}

/// A single demonstration trajectory, the unit of clustering.
#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub id: String,
    /// Points ordered strictly increasing in `t`.
    pub points: Vec<TrajectoryPoint>,
    /// Ground-truth skill name. Evaluation only; never read during training.
    pub skill_label: Option<String>,
    /// Normalized time at which the end effector contacts the object.
    pub contact_time: Option<f64>,
    /// Object location this demonstration reached for, meters.
    pub object_pose: Option<[f64; 3]>,
}

/// Per-channel affine normalization parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// Channels whose variance was zero; their scale is forced to 1.
    pub zero_variance: Vec<bool>,
}

impl NormStats {
    /// Map a raw sensorimotor vector into normalized space.
    pub fn normalize_sm(&self, sm: &[f64]) -> Vec<f64> {
        sm.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }

    /// Map a normalized sensorimotor vector back to raw units.
    pub fn denormalize_sm(&self, sm: &[f64]) -> Vec<f64> {
        sm.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(x, (m, s))| x * s + m)
            .collect()
    }
}

/// A collection of demonstrations sharing one sensorimotor dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub demos: Vec<Demonstration>,
    /// Sensorimotor dimension shared by all demos.
    pub d: usize,
    /// Present iff the dataset is in normalized space.
    pub norm_stats: Option<NormStats>,
}

impl Dataset {
    pub fn is_normalized(&self) -> bool {
        self.norm_stats.is_some()
    }

    /// Copy of the dataset with all ground-truth labels removed.
    pub fn strip_labels(&self) -> Dataset {
        let mut ds = self.clone();
        for demo in &mut ds.demos {
            demo.skill_label = None;
        }
        ds
    }

    /// Ground-truth labels keyed by demo id, for metrics only. Unlabeled
    /// demos are omitted.
    pub fn labels(&self) -> BTreeMap<String, String> {
        self.demos
            .iter()
            .filter_map(|d| d.skill_label.clone().map(|l| (d.id.clone(), l)))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Kitchen generator config
// ---------------------------------------------------------------------------

/// Axis-aligned box in workspace coordinates, meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Region {
    pub fn cube(center: [f64; 3], side: f64) -> Region {
        let h = side / 2.0;
        Region {
            min: [center[0] - h, center[1] - h, center[2] - h],
            max: [center[0] + h, center[1] + h, center[2] + h],
        }
    }

    pub fn contains(&self, p: &[f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn center(&self) -> [f64; 3] {
        [
            (self.min[0] + self.max[0]) / 2.0,
            (self.min[1] + self.max[1]) / 2.0,
            (self.min[2] + self.max[2]) / 2.0,
        ]
    }

    fn is_degenerate(&self) -> bool {
        (0..3).any(|a| !(self.max[a] > self.min[a]))
    }

    /// Grow the box by `margin` on every face.
    pub fn dilate(&self, margin: f64) -> Region {
        Region {
            min: [self.min[0] - margin, self.min[1] - margin, self.min[2] - margin],
            max: [self.max[0] + margin, self.max[1] + margin, self.max[2] + margin],
        }
    }
}

/// One pick-and-place skill: where objects appear and where they are dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillSpec {
    pub name: String,
    pub source_region: Region,
    /// Drop location (the pan), meters.
    pub sink: [f64; 3],
}

/// Demonstration counts, either uniform across skills or per skill.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DemoCount {
    Uniform(usize),
    PerSkill(Vec<usize>),
}

impl DemoCount {
    fn count_for(&self, skill_index: usize) -> usize {
        match self {
            DemoCount::Uniform(n) => *n,
            DemoCount::PerSkill(v) => v[skill_index],
        }
    }
}

/// Configuration for the synthetic kitchen corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KitchenConfig {
    pub skills: Vec<SkillSpec>,
    pub demos_per_skill: DemoCount,
    /// Additive Gaussian position noise, meters.
    pub noise_std: f64,
    pub seed: u64,
    /// Sensorimotor dimension; the generator only supports 4.
    #[serde(default = "default_dim")]
    pub d: usize,
}

fn default_dim() -> usize {
    GENERATOR_DIM
}

impl KitchenConfig {
    /// The default five-skill kitchen: two cupboards, a drawer, and two
    /// stove-side spots, all feeding one pan. Skill order matches the action
    /// catalog keys 1..=5.
    pub fn default_layout(demos_per_skill: DemoCount, noise_std: f64, seed: u64) -> KitchenConfig {
        let pan = [0.0, 0.25, 0.20];
        let mk = |name: &str, center: [f64; 3]| SkillSpec {
            name: name.to_string(),
            source_region: Region::cube(center, 0.1),
            sink: pan,
        };
        KitchenConfig {
            skills: vec![
                mk("right_cupboard", [0.45, 0.20, 0.50]),
                mk("left_cupboard", [-0.45, 0.20, 0.50]),
                mk("drawer", [0.0, 0.40, 0.10]),
                mk("stove_left", [-0.20, 0.45, 0.25]),
                mk("stove_right", [0.20, 0.45, 0.25]),
            ],
            demos_per_skill,
            noise_std,
            seed,
            d: GENERATOR_DIM,
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.skills.is_empty() {
            return Err(DatasetError::InvalidConfig("no skills defined".into()));
        }
        for s in &self.skills {
            if s.source_region.is_degenerate() {
                return Err(DatasetError::InvalidConfig(format!(
                    "skill {:?} has a degenerate source region",
                    s.name
                )));
            }
        }
        match &self.demos_per_skill {
            DemoCount::Uniform(n) if *n < 1 => {
                return Err(DatasetError::InvalidConfig("demos_per_skill must be >= 1".into()));
            }
            DemoCount::PerSkill(v) => {
                if v.len() != self.skills.len() {
                    return Err(DatasetError::InvalidConfig(format!(
                        "per-skill counts ({}) do not match skill count ({})",
                        v.len(),
                        self.skills.len()
                    )));
                }
                if v.iter().any(|&n| n < 1) {
                    return Err(DatasetError::InvalidConfig("demos_per_skill must be >= 1".into()));
                }
            }
            _ => {}
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(DatasetError::InvalidConfig("noise_std must be finite and >= 0".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

/// Minimum-jerk interpolation factor, zero velocity and acceleration at both
/// ends. `u` in `[0, 1]`.
fn min_jerk(u: f64) -> f64 {
    u * u * u * (10.0 - 15.0 * u + 6.0 * u * u)
}

fn lerp3(a: &[f64; 3], b: &[f64; 3], s: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * s,
        a[1] + (b[1] - a[1]) * s,
        a[2] + (b[2] - a[2]) * s,
    ]
}

/// Generate the synthetic kitchen corpus: per skill, minimum-jerk
/// reach-and-transfer demonstrations with the object pose sampled uniformly
/// in the skill's source region. Deterministic for a given `(cfg, seed)`.
pub fn generate_synthetic_dataset(cfg: &KitchenConfig) -> Result<Dataset, DatasetError> {
    cfg.validate()?;
    if cfg.d != GENERATOR_DIM {
        return Err(DatasetError::InvalidConfig(format!(
            "generator only emits {GENERATOR_DIM}-channel data, requested d={}",
            cfg.d
        )));
    }

    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.seed);
    let mut demos = Vec::new();
    for (si, skill) in cfg.skills.iter().enumerate() {
        let count = cfg.demos_per_skill.count_for(si);
        for j in 0..count {
            let r = &skill.source_region;
            let object = [
                rng.gen_range(r.min[0]..=r.max[0]),
                rng.gen_range(r.min[1]..=r.max[1]),
                rng.gen_range(r.min[2]..=r.max[2]),
            ];
            let mut demo = synth_demo(skill, &object, DEFAULT_DEMO_LEN);
            demo.id = format!("{}-{:03}", skill.name, j);
            if cfg.noise_std > 0.0 {
                let normal = Normal::new(0.0, cfg.noise_std)
                    .map_err(|e| DatasetError::InvalidConfig(e.to_string()))?;
                for p in &mut demo.points {
                    for c in 0..3 {
                        p.sm[c] += normal.sample(&mut rng);
                    }
                }
            }
            demos.push(demo);
        }
    }
    Ok(Dataset { demos, d: GENERATOR_DIM, norm_stats: None })
}

/// Noiseless reach -> grasp dwell -> transfer -> release dwell -> retreat
/// trajectory for one object pose.
fn synth_demo(skill: &SkillSpec, object: &[f64; 3], len: usize) -> Demonstration {
    let at = |f: f64| (f * (len - 1) as f64).round() as usize;
    let i_contact = at(CONTACT_FRACTION);
    let i_grasped = at(GRASP_HOLD_FRACTION);
    let i_arrive = at(ARRIVE_FRACTION);
    let i_release = at(RELEASE_FRACTION);
    let i_depart = at(DEPART_FRACTION);
    let retreat_end = [
        skill.sink[0] + RETREAT_OFFSET[0],
        skill.sink[1] + RETREAT_OFFSET[1],
        skill.sink[2] + RETREAT_OFFSET[2],
    ];

    let mut points = Vec::with_capacity(len);
    for i in 0..len {
        let t = i as f64 / (len - 1) as f64;
        let pos = if i <= i_contact {
            let u = i as f64 / i_contact as f64;
            lerp3(&HOME_POSE, object, min_jerk(u))
        } else if i <= i_grasped {
            *object
        } else if i <= i_arrive {
            let u = (i - i_grasped) as f64 / (i_arrive - i_grasped) as f64;
            lerp3(object, &skill.sink, min_jerk(u))
        } else if i <= i_depart {
            skill.sink
        } else {
            let u = (i - i_depart) as f64 / (len - 1 - i_depart) as f64;
            lerp3(&skill.sink, &retreat_end, min_jerk(u))
        };
        // Gripper holds the object from contact through release, inclusive.
        let gripper = if i >= i_contact && i <= i_release { 1.0 } else { 0.0 };
        points.push(TrajectoryPoint { t, sm: vec![pos[0], pos[1], pos[2], gripper] });
    }

    Demonstration {
        id: String::new(),
        points,
        skill_label: Some(skill.name.clone()),
        contact_time: Some(i_contact as f64 / (len - 1) as f64),
        object_pose: Some(*object),
    }
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Shift and scale every sensorimotor channel to zero mean and unit variance
/// over all points of all demos. `t` is untouched. Zero-variance channels get
/// scale 1 and are flagged in the returned stats.
pub fn normalize_dataset(ds: &Dataset) -> Result<Dataset, DatasetError> {
    if ds.is_normalized() {
        return Err(DatasetError::AlreadyNormalized);
    }
    let d = ds.d;
    let mut mean = vec![0.0; d];
    let mut count = 0usize;
    for demo in &ds.demos {
        for p in &demo.points {
            for c in 0..d {
                mean[c] += p.sm[c];
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(DatasetError::InvalidConfig("cannot normalize an empty dataset".into()));
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    let mut var = vec![0.0; d];
    for demo in &ds.demos {
        for p in &demo.points {
            for c in 0..d {
                let r = p.sm[c] - mean[c];
                var[c] += r * r;
            }
        }
    }
    let mut scale = vec![0.0; d];
    let mut zero_variance = vec![false; d];
    for c in 0..d {
        let sd = (var[c] / count as f64).sqrt();
        if sd < 1e-12 {
            scale[c] = 1.0;
            zero_variance[c] = true;
        } else {
            scale[c] = sd;
        }
    }
    let stats = NormStats { mean, scale, zero_variance };
    Ok(apply_stats(ds, &stats, true))
}

/// Apply existing normalization stats (e.g. a trained model's) to a raw
/// dataset.
pub fn normalize_with(ds: &Dataset, stats: &NormStats) -> Result<Dataset, DatasetError> {
    if ds.is_normalized() {
        return Err(DatasetError::AlreadyNormalized);
    }
    Ok(apply_stats(ds, stats, true))
}

/// Invert [`normalize_dataset`], restoring raw units.
pub fn denormalize_dataset(ds: &Dataset) -> Result<Dataset, DatasetError> {
    let stats = ds.norm_stats.clone().ok_or(DatasetError::NotNormalized)?;
    let mut out = apply_stats(ds, &stats, false);
    out.norm_stats = None;
    Ok(out)
}

fn apply_stats(ds: &Dataset, stats: &NormStats, forward: bool) -> Dataset {
    let mut out = ds.clone();
    for demo in &mut out.demos {
        for p in &mut demo.points {
            p.sm = if forward { stats.normalize_sm(&p.sm) } else { stats.denormalize_sm(&p.sm) };
        }
    }
    out.norm_stats = if forward { Some(stats.clone()) } else { None };
    out
}

// ---------------------------------------------------------------------------
// Context/target sampling
// ---------------------------------------------------------------------------

/// Sample a conditioning context and prediction targets from one
/// demonstration. Context size is uniform on `{1..=n_max}` and drawn without
/// replacement; targets likewise on `{1..=m_max}` and may overlap the
/// context.
pub fn sample_context(
    demo: &Demonstration,
    rng: &mut ChaCha8Rng,
    n_max: usize,
    m_max: usize,
) -> (Vec<TrajectoryPoint>, Vec<TrajectoryPoint>) {
    let len = demo.points.len();
    assert!(n_max >= 1 && n_max <= len, "n_max out of range: {n_max} for demo of {len}");
    assert!(m_max >= 1 && m_max <= len, "m_max out of range: {m_max} for demo of {len}");

    let n = rng.gen_range(1..=n_max);
    let context = rand::seq::index::sample(rng, len, n)
        .into_iter()
        .map(|i| demo.points[i].clone())
        .collect();
    let m = rng.gen_range(1..=m_max);
    let targets = rand::seq::index::sample(rng, len, m)
        .into_iter()
        .map(|i| demo.points[i].clone())
        .collect();
    (context, targets)
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

/// Format a float with 17 significant digits so the decimal round trip is
/// bit-exact.
pub(crate) fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

#[derive(Serialize, Deserialize)]
struct HeaderRecord {
    version: u32,
    d: usize,
    normalized: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    norm_stats: Option<NormStats>,
}

#[derive(Deserialize)]
struct DemoRecord {
    id: String,
    #[serde(default)]
    skill_label: Option<String>,
    #[serde(default)]
    contact_time: Option<f64>,
    #[serde(default)]
    object_pose: Option<[f64; 3]>,
    points: Vec<Vec<f64>>,
}

/// Write a dataset as line-delimited records: one header line, then one demo
/// per line. Floats carry 17 significant digits.
pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<(), DatasetError> {
    let mut out = String::new();
    out.push_str(&header_line(ds));
    out.push('\n');
    for demo in &ds.demos {
        demo_line(&mut out, demo);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn header_line(ds: &Dataset) -> String {
    let mut s = format!("{{\"version\":1,\"d\":{},\"normalized\":{}", ds.d, ds.is_normalized());
    if let Some(stats) = &ds.norm_stats {
        s.push_str(",\"norm_stats\":{\"mean\":[");
        s.push_str(&join_floats(&stats.mean));
        s.push_str("],\"scale\":[");
        s.push_str(&join_floats(&stats.scale));
        s.push_str("],\"zero_variance\":[");
        let flags: Vec<&str> =
            stats.zero_variance.iter().map(|&z| if z { "true" } else { "false" }).collect();
        s.push_str(&flags.join(","));
        s.push_str("]}");
    }
    s.push('}');
    s
}

fn demo_line(out: &mut String, demo: &Demonstration) {
    out.push_str("{\"id\":");
    out.push_str(&serde_json::to_string(&demo.id).expect("string encodes"));
    if let Some(label) = &demo.skill_label {
        out.push_str(",\"skill_label\":");
        out.push_str(&serde_json::to_string(label).expect("string encodes"));
    }
    if let Some(tc) = demo.contact_time {
        let _ = write!(out, ",\"contact_time\":{}", fmt_f64(tc));
    }
    if let Some(pose) = &demo.object_pose {
        let _ = write!(out, ",\"object_pose\":[{}]", join_floats(pose));
    }
    out.push_str(",\"points\":[");
    for (i, p) in demo.points.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "[{}", fmt_f64(p.t));
        for v in &p.sm {
            let _ = write!(out, ",{}", fmt_f64(*v));
        }
        out.push(']');
    }
    out.push_str("]}");
}

fn join_floats(xs: &[f64]) -> String {
    xs.iter().map(|&x| fmt_f64(x)).collect::<Vec<_>>().join(",")
}

/// Read a dataset written by [`write_dataset`]. Malformed lines produce a
/// parse error naming the line number; inconsistent dimensions produce a
/// schema error.
pub fn read_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();

    let (_, header_text) = lines
        .next()
        .ok_or(DatasetError::Parse { line: 1, msg: "empty file".into() })?;
    let header: HeaderRecord = serde_json::from_str(header_text)
        .map_err(|e| DatasetError::Parse { line: 1, msg: e.to_string() })?;
    if header.version != 1 {
        return Err(DatasetError::Schema {
            line: 1,
            msg: format!("unsupported version {}", header.version),
        });
    }
    if header.normalized != header.norm_stats.is_some() {
        return Err(DatasetError::Schema {
            line: 1,
            msg: "normalized flag does not match norm_stats presence".into(),
        });
    }

    let mut demos = Vec::new();
    for (idx, line_text) in lines {
        let line = idx + 1;
        if line_text.trim().is_empty() {
            continue;
        }
        let rec: DemoRecord = serde_json::from_str(line_text)
            .map_err(|e| DatasetError::Parse { line, msg: e.to_string() })?;
        let mut points = Vec::with_capacity(rec.points.len());
        for row in &rec.points {
            if row.len() != header.d + 1 {
                return Err(DatasetError::Schema {
                    line,
                    msg: format!(
                        "demo {:?} has a point of dimension {} (expected d={})",
                        rec.id,
                        row.len().saturating_sub(1),
                        header.d
                    ),
                });
            }
            points.push(TrajectoryPoint { t: row[0], sm: row[1..].to_vec() });
        }
        for w in points.windows(2) {
            if !(w[1].t > w[0].t) {
                return Err(DatasetError::Schema {
                    line,
                    msg: format!("demo {:?} times are not strictly increasing", rec.id),
                });
            }
        }
        demos.push(Demonstration {
            id: rec.id,
            points,
            skill_label: rec.skill_label,
            contact_time: rec.contact_time,
            object_pose: rec.object_pose,
        });
    }

    Ok(Dataset { demos, d: header.d, norm_stats: header.norm_stats })
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn one_skill_cfg(noise_std: f64, seed: u64) -> KitchenConfig {
        KitchenConfig {
            skills: vec![SkillSpec {
                name: "drawer".into(),
                source_region: Region::cube([0.0, 0.40, 0.10], 0.1),
                sink: [0.0, 0.25, 0.20],
            }],
            demos_per_skill: DemoCount::Uniform(1),
            noise_std,
            seed,
            d: GENERATOR_DIM,
        }
    }

    #[test]
    fn noiseless_demo_has_gripper_closed_between_contact_and_release() {
        let ds = generate_synthetic_dataset(&one_skill_cfg(0.0, 3)).unwrap();
        assert_eq!(ds.demos.len(), 1);
        let demo = &ds.demos[0];
        assert_eq!(demo.points.len(), DEFAULT_DEMO_LEN);
        let tc = demo.contact_time.unwrap();
        let i_release = (RELEASE_FRACTION * (DEFAULT_DEMO_LEN - 1) as f64).round() as usize;
        let t_release = i_release as f64 / (DEFAULT_DEMO_LEN - 1) as f64;
        for p in &demo.points {
            let expected = if p.t >= tc && p.t <= t_release { 1.0 } else { 0.0 };
            assert_eq!(p.sm[3], expected, "gripper at t={}", p.t);
        }
        // Contact point hits the sampled object pose exactly when noiseless.
        let obj = demo.object_pose.unwrap();
        let i_contact = (CONTACT_FRACTION * (DEFAULT_DEMO_LEN - 1) as f64).round() as usize;
        for c in 0..3 {
            assert!((demo.points[i_contact].sm[c] - obj[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn generator_is_deterministic() {
        let cfg = KitchenConfig::default_layout(DemoCount::Uniform(3), 0.002, 42);
        let a = generate_synthetic_dataset(&cfg).unwrap();
        let b = generate_synthetic_dataset(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn object_poses_lie_in_their_skill_boxes() {
        let cfg = KitchenConfig::default_layout(DemoCount::Uniform(30), 0.002, 7);
        let ds = generate_synthetic_dataset(&cfg).unwrap();
        assert_eq!(ds.demos.len(), 150);
        // Brute-force containment oracle over every demo.
        for demo in &ds.demos {
            let label = demo.skill_label.as_ref().unwrap();
            let skill = cfg.skills.iter().find(|s| &s.name == label).unwrap();
            let pose = demo.object_pose.unwrap();
            assert!(
                skill.source_region.contains(&pose),
                "demo {} pose {:?} outside {:?}",
                demo.id,
                pose,
                skill.source_region
            );
        }
    }

    #[test]
    fn generator_rejects_non_default_dim() {
        let mut cfg = one_skill_cfg(0.0, 1);
        cfg.d = 3;
        assert!(matches!(
            generate_synthetic_dataset(&cfg),
            Err(DatasetError::InvalidConfig(_))
        ));
    }

    #[test]
    fn uneven_counts_are_respected() {
        let mut cfg = KitchenConfig::default_layout(DemoCount::Uniform(1), 0.0, 9);
        cfg.demos_per_skill = DemoCount::PerSkill(vec![2, 1, 3, 1, 4]);
        let ds = generate_synthetic_dataset(&cfg).unwrap();
        assert_eq!(ds.demos.len(), 11);
        let count = |name: &str| {
            ds.demos.iter().filter(|d| d.skill_label.as_deref() == Some(name)).count()
        };
        assert_eq!(count("right_cupboard"), 2);
        assert_eq!(count("stove_right"), 4);
    }

    #[test]
    fn constant_channel_gets_unit_scale() {
        let cfg = one_skill_cfg(0.0, 5);
        let mut ds = generate_synthetic_dataset(&cfg).unwrap();
        // Freeze channel 1 so it has zero variance.
        for demo in &mut ds.demos {
            for p in &mut demo.points {
                p.sm[1] = 0.7;
            }
        }
        let norm = normalize_dataset(&ds).unwrap();
        let stats = norm.norm_stats.as_ref().unwrap();
        assert!(stats.zero_variance[1]);
        assert_eq!(stats.scale[1], 1.0);
        for p in &norm.demos[0].points {
            assert!(p.sm[1].abs() < 1e-12);
        }
    }

    #[test]
    fn normalization_round_trips() {
        let cfg = KitchenConfig::default_layout(DemoCount::Uniform(2), 0.002, 11);
        let ds = generate_synthetic_dataset(&cfg).unwrap();
        let norm = normalize_dataset(&ds).unwrap();
        let back = denormalize_dataset(&norm).unwrap();
        let mut max_dev: f64 = 0.0;
        for (a, b) in ds.demos.iter().zip(&back.demos) {
            for (pa, pb) in a.points.iter().zip(&b.points) {
                assert_eq!(pa.t, pb.t);
                for c in 0..ds.d {
                    max_dev = max_dev.max((pa.sm[c] - pb.sm[c]).abs());
                }
            }
        }
        assert!(max_dev < 1e-9, "round-trip deviation {max_dev}");
    }

    #[test]
    fn normalized_moments_vanish() {
        let mut cfg = one_skill_cfg(0.001, 13);
        cfg.demos_per_skill = DemoCount::Uniform(2);
        let ds = generate_synthetic_dataset(&cfg).unwrap();
        let norm = normalize_dataset(&ds).unwrap();
        // Independent recomputation of the per-channel first moment.
        for c in 0..ds.d {
            let mut sum = 0.0;
            let mut n = 0usize;
            for demo in &norm.demos {
                for p in &demo.points {
                    sum += p.sm[c];
                    n += 1;
                }
            }
            assert!((sum / n as f64).abs() < 1e-9, "channel {c} mean {}", sum / n as f64);
        }
    }

    #[test]
    fn double_normalization_is_rejected() {
        let ds = generate_synthetic_dataset(&one_skill_cfg(0.0, 2)).unwrap();
        let norm = normalize_dataset(&ds).unwrap();
        assert!(matches!(normalize_dataset(&norm), Err(DatasetError::AlreadyNormalized)));
    }

    #[test]
    fn degenerate_bounds_give_single_points() {
        let ds = generate_synthetic_dataset(&one_skill_cfg(0.0, 21)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (ctx, tgt) = sample_context(&ds.demos[0], &mut rng, 1, 1);
        assert_eq!(ctx.len(), 1);
        assert_eq!(tgt.len(), 1);
        assert!(ds.demos[0].points.contains(&ctx[0]));
        assert!(ds.demos[0].points.contains(&tgt[0]));
    }

    #[test]
    fn full_draw_is_a_permutation() {
        let ds = generate_synthetic_dataset(&one_skill_cfg(0.0, 22)).unwrap();
        let demo = &ds.demos[0];
        // Scan seeds until the uniform draw lands on n = 150, then check the
        // context is a permutation of all points.
        for seed in 0..4000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (ctx, _) = sample_context(demo, &mut rng, DEFAULT_DEMO_LEN, 1);
            if ctx.len() == DEFAULT_DEMO_LEN {
                let mut ts: Vec<f64> = ctx.iter().map(|p| p.t).collect();
                ts.sort_by(f64::total_cmp);
                let expected: Vec<f64> = demo.points.iter().map(|p| p.t).collect();
                assert_eq!(ts, expected);
                return;
            }
        }
        panic!("no seed produced a full draw");
    }

    #[test]
    fn context_size_is_uniform() {
        let ds = generate_synthetic_dataset(&one_skill_cfg(0.0, 23)).unwrap();
        let demo = &ds.demos[0];
        let mut rng = ChaCha8Rng::seed_from_u64(170);
        let mut counts = [0usize; 5];
        let draws = 10_000;
        for _ in 0..draws {
            let (ctx, _) = sample_context(demo, &mut rng, 5, 1);
            counts[ctx.len() - 1] += 1;
        }
        // Chi-squared goodness of fit against uniform over {1..5};
        // 13.2767 is the 4-dof critical value at p = 0.01.
        let expected = draws as f64 / 5.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 13.2767, "chi2 = {chi2}, counts = {counts:?}");
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let cfg = KitchenConfig::default_layout(DemoCount::Uniform(1), 0.002, 31);
        let ds = generate_synthetic_dataset(&cfg).unwrap();
        assert_eq!(ds.demos.len(), 5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("demos.jsonl");
        write_dataset(&ds, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn normalized_dataset_round_trips_with_stats() {
        let cfg = KitchenConfig::default_layout(DemoCount::Uniform(1), 0.002, 33);
        let ds = normalize_dataset(&generate_synthetic_dataset(&cfg).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("norm.jsonl");
        write_dataset(&ds, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn dimension_mismatch_is_a_schema_error() {
        let cfg = one_skill_cfg(0.0, 40);
        let mut ds = generate_synthetic_dataset(&cfg).unwrap();
        ds.demos.push(ds.demos[0].clone());
        ds.demos[1].id = "bad".into();
        for p in &mut ds.demos[1].points {
            p.sm.pop(); // now d=3 inside a d=4 dataset
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        write_dataset(&ds, &path).unwrap();
        match read_dataset(&path) {
            Err(DatasetError::Schema { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_final_line_is_a_parse_error() {
        let cfg = KitchenConfig::default_layout(DemoCount::Uniform(1), 0.0, 50);
        let ds = generate_synthetic_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.jsonl");
        write_dataset(&ds, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        // Corrupt the file by dropping the tail of the last record.
        while bytes.last() == Some(&b'\n') {
            bytes.pop();
        }
        bytes.truncate(bytes.len() - 20);
        fs::write(&path, &bytes).unwrap();
        match read_dataset(&path) {
            Err(DatasetError::Parse { line, .. }) => assert_eq!(line, 6),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn label_stripping_keeps_geometry() {
        let cfg = KitchenConfig::default_layout(DemoCount::Uniform(2), 0.002, 60);
        let ds = generate_synthetic_dataset(&cfg).unwrap();
        let stripped = ds.strip_labels();
        assert!(stripped.demos.iter().all(|d| d.skill_label.is_none()));
        for (a, b) in ds.demos.iter().zip(&stripped.demos) {
            assert_eq!(a.points, b.points);
        }
        assert_eq!(ds.labels().len(), 10);
        assert!(stripped.labels().is_empty());
    }
}
