//! Low-level planning: gradient descent on a skill vector until the decoded
//! contact-time position matches the actual object pose, then decoding the
//! full trajectory from the adjusted vector. The model's parameters stay
//! frozen throughout; only the latent input moves.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::dataset::{TrajectoryPoint, DEFAULT_DEMO_LEN};
use crate::discovery::time_grid;
use crate::nn_core::mlp_input_grad;
use crate::vqcnmp::{decode_raw, split_prediction, ModelError, VqCnmpModel};

/// Positional convergence threshold, meters.
pub const DEFAULT_TOLERANCE: f64 = 0.02;
pub const DEFAULT_MAX_ITERS: usize = 2000;
pub const DEFAULT_STEP_SIZE: f64 = 0.05;

/// A run whose loss grows past this multiple of its initial value is
/// declared divergent and returned non-converged.
const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("skill index {index} outside codebook of size {k}")]
    InvalidSkillIndex { index: usize, k: usize },
    #[error("no object pose or contact time configured for skill key {0}")]
    MissingStepData(usize),
    #[error("non-finite gradient at iteration {0}")]
    NonFiniteGradient(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One low-level planning problem.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanRequest {
    pub skill_index: usize,
    /// Actual object location, meters.
    pub object_pose: [f64; 3],
    /// Normalized time at which the trajectory should meet the object.
    pub contact_time: f64,
    /// Positional error below which the plan counts as converged, meters.
    pub tolerance: f64,
    pub max_iters: usize,
    pub step_size: f64,
}

impl PlanRequest {
    pub fn new(skill_index: usize, object_pose: [f64; 3], contact_time: f64) -> PlanRequest {
        PlanRequest {
            skill_index,
            object_pose,
            contact_time,
            tolerance: DEFAULT_TOLERANCE,
            max_iters: DEFAULT_MAX_ITERS,
            step_size: DEFAULT_STEP_SIZE,
        }
    }
}

/// Outcome of one latent optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanResult {
    pub z_star: Vec<f64>,
    pub iterations: usize,
    /// Euclidean distance between the decoded contact point and the object,
    /// meters.
    pub final_error: f64,
    /// Full decoded trajectory from `z_star`, denormalized.
    pub trajectory: Vec<TrajectoryPoint>,
    /// Holds exactly when `final_error < tolerance`.
    pub converged: bool,
}

/// MSE (mean over x, y, z, in m^2) between the decoded contact-time position
/// and the object pose, plus its analytic gradient w.r.t. the latent vector.
pub fn plan_loss(
    model: &VqCnmpModel,
    z: &[f64],
    contact_time: f64,
    object_pose: &[f64; 3],
) -> Result<(f64, Vec<f64>), PlanError> {
    if !(0.0..=1.0).contains(&contact_time) {
        return Err(PlanError::Model(ModelError::TimeOutOfRange(contact_time)));
    }
    let (out, cache) = decode_raw(model, z, contact_time);
    let stats = &model.norm_stats;

    let mut loss = 0.0;
    let mut dy = vec![0.0; out.len()];
    for c in 0..3 {
        let denorm = out[c] * stats.scale[c] + stats.mean[c];
        let r = denorm - object_pose[c];
        loss += r * r / 3.0;
        dy[c] = 2.0 * r * stats.scale[c] / 3.0;
    }
    let dx = mlp_input_grad(&model.decoder, &cache, &dy);
    let dz = dx[..model.d_z].to_vec();
    if !loss.is_finite() || dz.iter().any(|g| !g.is_finite()) {
        return Err(PlanError::NonFiniteGradient(0));
    }
    Ok((loss, dz))
}

fn positional_error(loss: f64) -> f64 {
    (3.0 * loss).sqrt()
}

/// Plain gradient descent on the latent vector, starting from the skill's
/// codebook entry, until the decoded contact point lands within tolerance of
/// the object (or the iteration cap / divergence guard trips). Deterministic.
pub fn optimize_skill_vector(
    model: &VqCnmpModel,
    req: &PlanRequest,
) -> Result<PlanResult, PlanError> {
    let k = model.codebook.len();
    if req.skill_index >= k {
        return Err(PlanError::InvalidSkillIndex { index: req.skill_index, k });
    }
    assert!(req.tolerance > 0.0, "tolerance must be positive");

    let mut z = model.codebook.vector(req.skill_index).to_vec();
    let (mut loss, mut dz) = plan_loss(model, &z, req.contact_time, &req.object_pose)?;
    let initial_loss = loss;
    let mut iterations = 0;
    while positional_error(loss) >= req.tolerance && iterations < req.max_iters {
        if loss > DIVERGENCE_FACTOR * initial_loss {
            break;
        }
        for (zi, gi) in z.iter_mut().zip(&dz) {
            *zi -= req.step_size * gi;
        }
        let (next_loss, next_dz) =
            plan_loss(model, &z, req.contact_time, &req.object_pose).map_err(|e| match e {
                PlanError::NonFiniteGradient(_) => PlanError::NonFiniteGradient(iterations + 1),
                other => other,
            })?;
        loss = next_loss;
        dz = next_dz;
        iterations += 1;
    }

    let final_error = positional_error(loss);
    let trajectory = decode_trajectory(model, &z, DEFAULT_DEMO_LEN);
    Ok(PlanResult {
        z_star: z,
        iterations,
        final_error,
        trajectory,
        converged: final_error < req.tolerance,
    })
}

/// Decode the full denormalized mean trajectory for a latent vector.
pub fn decode_trajectory(model: &VqCnmpModel, z: &[f64], len: usize) -> Vec<TrajectoryPoint> {
    time_grid(len)
        .into_iter()
        .map(|t| {
            let (out, _) = decode_raw(model, z, t);
            let pred = split_prediction(model.d, &out);
            TrajectoryPoint { t, sm: model.norm_stats.denormalize_sm(&pred.mu) }
        })
        .collect()
}

/// Run [`optimize_skill_vector`] for each step of a high-level plan. Steps
/// are independent; a failing step does not abort the rest.
pub fn execute_plan(
    model: &VqCnmpModel,
    high_plan: &[usize],
    object_poses: &BTreeMap<usize, [f64; 3]>,
    contact_times: &BTreeMap<usize, f64>,
) -> Vec<Result<PlanResult, PlanError>> {
    high_plan
        .iter()
        .map(|&skill| {
            let pose = object_poses.get(&skill).ok_or(PlanError::MissingStepData(skill))?;
            let t_c = contact_times.get(&skill).ok_or(PlanError::MissingStepData(skill))?;
            optimize_skill_vector(model, &PlanRequest::new(skill, *pose, *t_c))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Execution scoring
// ---------------------------------------------------------------------------

/// Demonstration-free checker for a planned trajectory: did it reach the
/// object with the gripper closing, and release it over the sink?
#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionChecker {
    pub object_pose: [f64; 3],
    pub sink: [f64; 3],
    /// Meters.
    pub tolerance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecutionScore {
    pub picked: bool,
    pub delivered: bool,
}

impl ExecutionChecker {
    /// `picked`: the closest approach to the object is within tolerance and
    /// the gripper closes within 5 steps of it. `delivered`: the gripper
    /// opens again, and the last in-contact point sits within tolerance of
    /// the sink.
    pub fn score_points(&self, points: &[TrajectoryPoint]) -> ExecutionScore {
        assert!(points.iter().all(|p| p.sm.len() >= 4), "need xyz + gripper channels");
        let dist = |p: &TrajectoryPoint, q: &[f64; 3]| {
            ((p.sm[0] - q[0]).powi(2) + (p.sm[1] - q[1]).powi(2) + (p.sm[2] - q[2]).powi(2))
                .sqrt()
        };
        let closed = |p: &TrajectoryPoint| p.sm[3] >= 0.5;

        let (i_star, d_star) = points
            .iter()
            .enumerate()
            .map(|(i, p)| (i, dist(p, &self.object_pose)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("non-empty trajectory");

        let closes_nearby = points.iter().enumerate().any(|(i, p)| {
            let crossing = closed(p) && (i == 0 || !closed(&points[i - 1]));
            crossing && i.abs_diff(i_star) <= 5
        });
        let picked = d_star < self.tolerance && closes_nearby;

        // Final-contact point: the last closed step that is followed by an
        // open one.
        let release = (0..points.len().saturating_sub(1))
            .rev()
            .find(|&i| closed(&points[i]) && !closed(&points[i + 1]));
        let delivered = match release {
            Some(i) => dist(&points[i], &self.sink) < self.tolerance,
            None => false,
        };

        ExecutionScore { picked, delivered }
    }
}

/// Score a plan result against the object it targeted and the sink it should
/// deliver to.
pub fn score_execution(result: &PlanResult, checker: &ExecutionChecker) -> ExecutionScore {
    checker.score_points(&result.trajectory)
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{
        generate_synthetic_dataset, normalize_dataset, DemoCount, Dataset, KitchenConfig,
        HOME_POSE,
    };
    use crate::vqcnmp::{decode, init_model, TrainingConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_dataset(seed: u64) -> (KitchenConfig, Dataset) {
        let kc = KitchenConfig::default_layout(DemoCount::Uniform(2), 0.002, seed);
        let ds = normalize_dataset(&generate_synthetic_dataset(&kc).unwrap()).unwrap();
        (kc, ds)
    }

    fn toy_model(seed: u64) -> VqCnmpModel {
        let (_, ds) = toy_dataset(seed);
        let cfg =
            TrainingConfig { iterations: 0, hidden: vec![24, 24], d_z: 8, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_model(ds.d, ds.norm_stats.clone().unwrap(), &cfg, &mut rng)
    }

    #[test]
    fn zero_residual_means_zero_loss_and_gradient() {
        let model = toy_model(1);
        let z = model.codebook.vector(0).to_vec();
        let t_c = 0.4;
        let pred = decode(&model, &z, t_c).unwrap();
        let xyz = model.norm_stats.denormalize_sm(&pred.mu);
        let object = [xyz[0], xyz[1], xyz[2]];
        let (loss, dz) = plan_loss(&model, &z, t_c, &object).unwrap();
        assert_eq!(loss, 0.0);
        assert!(dz.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn loss_units_are_square_meters() {
        let model = toy_model(2);
        let z = model.codebook.vector(0).to_vec();
        let t_c = 0.5;
        let pred = decode(&model, &z, t_c).unwrap();
        let xyz = model.norm_stats.denormalize_sm(&pred.mu);
        // Residual of 3 cm on x only -> MSE of 3e-4 m^2.
        let object = [xyz[0] + 0.03, xyz[1], xyz[2]];
        let (loss, _) = plan_loss(&model, &z, t_c, &object).unwrap();
        assert!((loss - 3e-4).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn plan_gradient_matches_finite_differences() {
        let model = toy_model(3);
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let h = 1e-5;
        for _ in 0..20 {
            let z: Vec<f64> = (0..model.d_z).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let t_c = rng.gen_range(0.0..=1.0);
            let object = [
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(0.0..0.6),
            ];
            let (_, dz) = plan_loss(&model, &z, t_c, &object).unwrap();
            for i in 0..z.len() {
                let mut zp = z.clone();
                zp[i] += h;
                let mut zm = z.clone();
                zm[i] -= h;
                let fp = plan_loss(&model, &zp, t_c, &object).unwrap().0;
                let fm = plan_loss(&model, &zm, t_c, &object).unwrap().0;
                let fd = (fp - fm) / (2.0 * h);
                let rel = (dz[i] - fd).abs() / dz[i].abs().max(fd.abs()).max(1e-6);
                assert!(rel < 1e-4, "dz[{i}] {} vs fd {fd}", dz[i]);
            }
        }
    }

    #[test]
    fn object_at_decoded_contact_converges_immediately() {
        let model = toy_model(4);
        let t_c = 0.4;
        let z = model.codebook.vector(1).to_vec();
        let pred = decode(&model, &z, t_c).unwrap();
        let xyz = model.norm_stats.denormalize_sm(&pred.mu);
        let req = PlanRequest::new(1, [xyz[0], xyz[1], xyz[2]], t_c);
        let result = optimize_skill_vector(&model, &req).unwrap();
        assert!(result.converged);
        assert!(result.iterations <= 1);
        assert_eq!(result.z_star, z);
        assert_eq!(result.trajectory.len(), DEFAULT_DEMO_LEN);
    }

    #[test]
    fn optimization_is_deterministic() {
        let model = toy_model(5);
        let req = PlanRequest::new(0, [0.1, 0.3, 0.2], 0.4);
        let a = optimize_skill_vector(&model, &req).unwrap();
        let b = optimize_skill_vector(&model, &req).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn converged_runs_descend() {
        let model = toy_model(6);
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let mut seen = 0;
        for trial in 0..30 {
            let k = trial % model.codebook.len();
            let z0 = model.codebook.vector(k).to_vec();
            let t_c = 0.4;
            let pred = decode(&model, &z0, t_c).unwrap();
            let xyz = model.norm_stats.denormalize_sm(&pred.mu);
            let object = [
                xyz[0] + rng.gen_range(-0.05..0.05),
                xyz[1] + rng.gen_range(-0.05..0.05),
                xyz[2] + rng.gen_range(-0.05..0.05),
            ];
            let (initial, _) = plan_loss(&model, &z0, t_c, &object).unwrap();
            let req = PlanRequest::new(k, object, t_c);
            let result = optimize_skill_vector(&model, &req).unwrap();
            if result.converged && result.iterations > 0 {
                let (final_loss, _) = plan_loss(&model, &result.z_star, t_c, &object).unwrap();
                assert!(final_loss < initial, "converged but did not descend");
                seen += 1;
            }
        }
        assert!(seen > 0, "no converged multi-step runs to check");
    }

    #[test]
    fn invalid_skill_index_is_rejected() {
        let model = toy_model(7);
        let req = PlanRequest::new(99, [0.0, 0.0, 0.0], 0.4);
        assert!(matches!(
            optimize_skill_vector(&model, &req),
            Err(PlanError::InvalidSkillIndex { index: 99, .. })
        ));
    }

    #[test]
    fn empty_plan_yields_empty_results() {
        let model = toy_model(8);
        let results = execute_plan(&model, &[], &BTreeMap::new(), &BTreeMap::new());
        assert!(results.is_empty());
    }

    #[test]
    fn singleton_plan_matches_direct_call() {
        let model = toy_model(9);
        let mut poses = BTreeMap::new();
        poses.insert(2usize, [0.0, 0.4, 0.1]);
        let mut times = BTreeMap::new();
        times.insert(2usize, 0.4);
        let results = execute_plan(&model, &[2], &poses, &times);
        assert_eq!(results.len(), 1);
        let direct =
            optimize_skill_vector(&model, &PlanRequest::new(2, [0.0, 0.4, 0.1], 0.4)).unwrap();
        assert_eq!(*results[0].as_ref().unwrap(), direct);
    }

    #[test]
    fn missing_step_data_fails_that_step_only() {
        let model = toy_model(10);
        let mut poses = BTreeMap::new();
        poses.insert(0usize, [0.0, 0.4, 0.1]);
        let mut times = BTreeMap::new();
        times.insert(0usize, 0.4);
        let results = execute_plan(&model, &[1, 0], &poses, &times);
        assert!(matches!(results[0], Err(PlanError::MissingStepData(1))));
        assert!(results[1].is_ok());
    }

    #[test]
    fn generator_demo_scores_full_marks() {
        let kc = KitchenConfig::default_layout(DemoCount::Uniform(1), 0.0, 70);
        let ds = generate_synthetic_dataset(&kc).unwrap();
        for demo in &ds.demos {
            let skill =
                kc.skills.iter().find(|s| Some(&s.name) == demo.skill_label.as_ref()).unwrap();
            let checker = ExecutionChecker {
                object_pose: demo.object_pose.unwrap(),
                sink: skill.sink,
                tolerance: DEFAULT_TOLERANCE,
            };
            let score = checker.score_points(&demo.points);
            assert!(score.picked, "{} not picked", demo.id);
            assert!(score.delivered, "{} not delivered", demo.id);
        }
    }

    #[test]
    fn holding_at_home_scores_nothing() {
        let points: Vec<TrajectoryPoint> = (0..50)
            .map(|i| TrajectoryPoint {
                t: i as f64 / 49.0,
                sm: vec![HOME_POSE[0], HOME_POSE[1], HOME_POSE[2], 0.0],
            })
            .collect();
        let checker = ExecutionChecker {
            object_pose: [0.45, 0.2, 0.5],
            sink: [0.0, 0.25, 0.2],
            tolerance: DEFAULT_TOLERANCE,
        };
        let score = checker.score_points(&points);
        assert!(!score.picked);
        assert!(!score.delivered);
    }
}
