//! Central finite-difference verification for every analytic gradient path:
//! raw MLP backprop, the Gaussian likelihood head, the softplus head, the
//! straight-through composite, and the planning loss. Used by the `gradcheck`
//! command and the acceptance suite.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::dataset::{NormStats, TrajectoryPoint};
use crate::nn_core::{
    gaussian_nll, mlp_backward, mlp_forward, softplus_positive, GaussianPrediction, MlpParams,
};
use crate::planner_low::plan_loss;
use crate::vqcnmp::{
    decode_raw, encode_with_caches, init_model, split_prediction, TrainingConfig, VqCnmpModel,
};

/// Step for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Pass threshold on the relative error.
pub const REL_TOLERANCE: f64 = 1e-4;

/// Outcome of one gradient family.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < REL_TOLERANCE
    }
}

fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6)
}

fn random_vec(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-scale..scale)).collect()
}

/// Run every family with at least `instances` random cases each.
pub fn run_all(seed: u64, instances: usize) -> Vec<CheckResult> {
    vec![
        check_mlp(seed, instances),
        check_gaussian_nll(seed + 1, instances),
        check_softplus_head(seed + 2, instances),
        check_straight_through(seed + 3, instances),
        check_plan_loss(seed + 4, instances),
    ]
}

/// Largest relative error across families.
pub fn worst(results: &[CheckResult]) -> f64 {
    results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
}

/// Random small networks, every parameter and the input, against central
/// differences of a random scalarization.
fn check_mlp(seed: u64, instances: usize) -> CheckResult {
    let mut max_err: f64 = 0.0;
    for instance in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (instance as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let d_in = rng.gen_range(2..5usize);
        let d_hidden = rng.gen_range(3..7usize);
        let d_out = rng.gen_range(1..4usize);
        let p = MlpParams::init(&[d_in, d_hidden, d_out], &mut rng);
        let x = random_vec(&mut rng, d_in, 1.0);
        let c = random_vec(&mut rng, d_out, 1.0);
        let objective = |p: &MlpParams, x: &[f64]| -> f64 {
            let (y, _) = mlp_forward(p, x);
            y.iter().zip(&c).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = mlp_forward(&p, &x);
        let (grads, dx) = mlp_backward(&p, &cache, &c);
        for li in 0..p.layers.len() {
            for wi in 0..p.layers[li].weight.len() {
                let mut pp = p.clone();
                pp.layers[li].weight[wi] += FD_STEP;
                let mut pm = p.clone();
                pm.layers[li].weight[wi] -= FD_STEP;
                let fd = (objective(&pp, &x) - objective(&pm, &x)) / (2.0 * FD_STEP);
                max_err = max_err.max(rel_err(grads.layers[li].weight[wi], fd));
            }
            for bi in 0..p.layers[li].bias.len() {
                let mut pp = p.clone();
                pp.layers[li].bias[bi] += FD_STEP;
                let mut pm = p.clone();
                pm.layers[li].bias[bi] -= FD_STEP;
                let fd = (objective(&pp, &x) - objective(&pm, &x)) / (2.0 * FD_STEP);
                max_err = max_err.max(rel_err(grads.layers[li].bias[bi], fd));
            }
        }
        for xi in 0..x.len() {
            let mut xp = x.clone();
            xp[xi] += FD_STEP;
            let mut xm = x.clone();
            xm[xi] -= FD_STEP;
            let fd = (objective(&p, &xp) - objective(&p, &xm)) / (2.0 * FD_STEP);
            max_err = max_err.max(rel_err(dx[xi], fd));
        }
    }
    CheckResult { name: "mlp_backward", instances, max_rel_err: max_err }
}

fn check_gaussian_nll(seed: u64, instances: usize) -> CheckResult {
    let mut max_err: f64 = 0.0;
    for instance in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (instance as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let d = rng.gen_range(1..6usize);
        let mu = random_vec(&mut rng, d, 1.5);
        let sigma: Vec<f64> = (0..d).map(|_| rng.gen_range(0.2..2.0)).collect();
        let target = random_vec(&mut rng, d, 1.5);
        let pred = GaussianPrediction { mu: mu.clone(), sigma: sigma.clone() };
        let (_, dmu, dsigma) = gaussian_nll(&pred, &target);
        for j in 0..d {
            let eval = |mu: Vec<f64>, sigma: Vec<f64>| gaussian_nll(
                &GaussianPrediction { mu, sigma },
                &target,
            )
            .0;
            let mut mp = mu.clone();
            mp[j] += FD_STEP;
            let mut mm = mu.clone();
            mm[j] -= FD_STEP;
            let fd = (eval(mp, sigma.clone()) - eval(mm, sigma.clone())) / (2.0 * FD_STEP);
            max_err = max_err.max(rel_err(dmu[j], fd));

            let mut sp = sigma.clone();
            sp[j] += FD_STEP;
            let mut sm = sigma.clone();
            sm[j] -= FD_STEP;
            let fd = (eval(mu.clone(), sp) - eval(mu.clone(), sm)) / (2.0 * FD_STEP);
            max_err = max_err.max(rel_err(dsigma[j], fd));
        }
    }
    CheckResult { name: "gaussian_nll", instances, max_rel_err: max_err }
}

/// The sigma head end to end: raw decoder output through softplus into the
/// likelihood.
fn check_softplus_head(seed: u64, instances: usize) -> CheckResult {
    let mut max_err: f64 = 0.0;
    for instance in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (instance as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let d = rng.gen_range(1..5usize);
        let mu = random_vec(&mut rng, d, 1.0);
        let raw = random_vec(&mut rng, d, 4.0);
        let target = random_vec(&mut rng, d, 1.0);
        let eval = |raw: &[f64]| {
            let sigma = softplus_positive(raw);
            gaussian_nll(&GaussianPrediction { mu: mu.clone(), sigma }, &target).0
        };
        let sigma = softplus_positive(&raw);
        let (_, _, dsigma) =
            gaussian_nll(&GaussianPrediction { mu: mu.clone(), sigma }, &target);
        for j in 0..d {
            let analytic = dsigma[j] * crate::nn_core::softplus_grad(raw[j]);
            let mut rp = raw.clone();
            rp[j] += FD_STEP;
            let mut rm = raw.clone();
            rm[j] -= FD_STEP;
            let fd = (eval(&rp) - eval(&rm)) / (2.0 * FD_STEP);
            max_err = max_err.max(rel_err(analytic, fd));
        }
    }
    CheckResult { name: "softplus_head", instances, max_rel_err: max_err }
}

fn tiny_model(rng: &mut ChaCha8Rng, d: usize) -> VqCnmpModel {
    let stats = NormStats {
        mean: (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        scale: (0..d).map(|_| rng.gen_range(0.1..2.0)).collect(),
        zero_variance: vec![false; d],
    };
    let cfg = TrainingConfig { k: 1, d_z: 6, hidden: vec![8], ..TrainingConfig::default() };
    init_model(d, stats, &cfg, rng)
}

/// Straight-through composite with K=1 and v_0 = 0: zero the encoder's last
/// layer so z_e == z_q == 0, then compare the copied decoder gradient
/// against finite differences of the identity-bottleneck loss. At this point
/// the estimator is exact.
fn check_straight_through(seed: u64, instances: usize) -> CheckResult {
    let mut max_err: f64 = 0.0;
    let mut done = 0usize;
    let mut attempt = 0u64;
    'instances: while done < instances {
        let instance = attempt;
        attempt += 1;
        done += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ instance.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let d = 3;
        let mut model = tiny_model(&mut rng, d);
        let last = model.encoder.layers.len() - 1;
        model.encoder.layers[last].weight.iter_mut().for_each(|w| *w = 0.0);
        model.encoder.layers[last].bias.iter_mut().for_each(|b| *b = 0.0);
        model.codebook.vector_mut(0).iter_mut().for_each(|v| *v = 0.0);
        // Keep the instance in the regime where the h=1e-5 oracle resolves
        // the derivative: lift the sigma head away from the softplus floor
        // and sample targets near the decoder's own initial mean, since the
        // likelihood surface turns extremely stiff once sigma drops far
        // below the residual.
        let dec_last = model.decoder.layers.len() - 1;
        {
            let layer = &mut model.decoder.layers[dec_last];
            for b in layer.bias[d..].iter_mut() {
                *b = 2.0;
            }
            let cols = layer.cols;
            for w in layer.weight[d * cols..].iter_mut() {
                *w *= 0.3;
            }
        }

        let context: Vec<TrajectoryPoint> = (0..rng.gen_range(1..4usize))
            .map(|i| TrajectoryPoint { t: i as f64 * 0.3, sm: random_vec(&mut rng, d, 1.0) })
            .collect();
        let zero_latent = vec![0.0; model.d_z];
        let targets: Vec<TrajectoryPoint> = (0..rng.gen_range(1..4usize))
            .map(|i| {
                let t = 0.1 + i as f64 * 0.25;
                let (out, _) = decode_raw(&model, &zero_latent, t);
                let sm = (0..d).map(|j| out[j] + rng.gen_range(-0.5..0.5)).collect();
                TrajectoryPoint { t, sm }
            })
            .collect();
        // Finite differences are meaningless across a relu kink. With
        // z_e = 0 the decoder's first-layer pre-activation is exactly
        // w_t * t, so skip the rare instance that sits on the boundary.
        let l0 = &model.decoder.layers[0];
        for tgt in &targets {
            for r in 0..l0.rows {
                let pre = l0.weight[r * l0.cols + l0.cols - 1] * tgt.t + l0.bias[r];
                if pre.abs() < 1e-3 {
                    done -= 1;
                    continue 'instances;
                }
            }
        }
        let m = targets.len() as f64;
        let n = context.len() as f64;

        // NLL through the identity bottleneck: the latent goes straight into
        // the decoder. This is the function the estimator's copy
        // differentiates.
        let loss_through_copy = |model: &VqCnmpModel| -> f64 {
            let (z_e, _) = encode_with_caches(model, &context).unwrap();
            let mut total = 0.0;
            for tgt in &targets {
                let (out, _) = decode_raw(model, &z_e, tgt.t);
                let pred = split_prediction(d, &out);
                total += gaussian_nll(&pred, &tgt.sm).0;
            }
            total / m
        };

        // Analytic path: decoder gradients at z_q = v_0, copied onto the
        // encoder mean exactly as the training step does.
        let z_q = model.codebook.vector(0).to_vec();
        let mut d_zq = vec![0.0; model.d_z];
        for tgt in &targets {
            let (out, cache) = decode_raw(&model, &z_q, tgt.t);
            let pred = split_prediction(d, &out);
            let (_, dmu, dsigma) = gaussian_nll(&pred, &tgt.sm);
            let mut dy = vec![0.0; 2 * d];
            for j in 0..d {
                dy[j] = dmu[j] / m;
                dy[d + j] = dsigma[j] * crate::nn_core::softplus_grad(out[d + j]) / m;
            }
            let dx = crate::nn_core::mlp_input_grad(&model.decoder, &cache, &dy);
            for (acc, v) in d_zq.iter_mut().zip(&dx) {
                *acc += v;
            }
        }
        let (_, caches) = encode_with_caches(&model, &context).unwrap();
        let mut enc_grads = crate::nn_core::MlpGrads::zeros_like(&model.encoder);
        let per_point: Vec<f64> = d_zq.iter().map(|g| g / n).collect();
        for cache in &caches {
            crate::nn_core::mlp_backward_acc(&model.encoder, cache, &per_point, &mut enc_grads);
        }

        for li in 0..model.encoder.layers.len() {
            for wi in 0..model.encoder.layers[li].weight.len() {
                let mut mp = model.clone();
                mp.encoder.layers[li].weight[wi] += FD_STEP;
                let mut mm = model.clone();
                mm.encoder.layers[li].weight[wi] -= FD_STEP;
                let fd = (loss_through_copy(&mp) - loss_through_copy(&mm)) / (2.0 * FD_STEP);
                max_err = max_err.max(rel_err(enc_grads.layers[li].weight[wi], fd));
            }
            for bi in 0..model.encoder.layers[li].bias.len() {
                let mut mp = model.clone();
                mp.encoder.layers[li].bias[bi] += FD_STEP;
                let mut mm = model.clone();
                mm.encoder.layers[li].bias[bi] -= FD_STEP;
                let fd = (loss_through_copy(&mp) - loss_through_copy(&mm)) / (2.0 * FD_STEP);
                max_err = max_err.max(rel_err(enc_grads.layers[li].bias[bi], fd));
            }
        }
    }
    CheckResult { name: "straight_through", instances, max_rel_err: max_err }
}

fn check_plan_loss(seed: u64, instances: usize) -> CheckResult {
    let mut max_err: f64 = 0.0;
    for instance in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (instance as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let model = tiny_model(&mut rng, 4);
        let z = random_vec(&mut rng, model.d_z, 0.8);
        let t_c = rng.gen_range(0.0..=1.0);
        let object = [
            rng.gen_range(-0.6..0.6),
            rng.gen_range(-0.6..0.6),
            rng.gen_range(-0.2..0.8),
        ];
        let (_, dz) = plan_loss(&model, &z, t_c, &object).unwrap();
        for i in 0..z.len() {
            let mut zp = z.clone();
            zp[i] += FD_STEP;
            let mut zm = z.clone();
            zm[i] -= FD_STEP;
            let fp = plan_loss(&model, &zp, t_c, &object).unwrap().0;
            let fm = plan_loss(&model, &zm, t_c, &object).unwrap().0;
            let fd = (fp - fm) / (2.0 * FD_STEP);
            max_err = max_err.max(rel_err(dz[i], fd));
        }
    }
    CheckResult { name: "plan_loss", instances, max_rel_err: max_err }
}

// ---------------------------------------------------------------------------
