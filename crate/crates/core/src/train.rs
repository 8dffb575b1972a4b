//! Flow-matching objective, exact gradients and the optimizer loop.

use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::lie::{geodesic_interp, so3_exp, so3_log, Pose, Rotation, TangentVec};
use crate::net::{round_f32, NetError, Observation, VelocityNet};
use crate::scene::SceneSample;

/// Largest training time; keeps 1/(1−t) bounded.
pub const T_MAX: f64 = 0.99;
/// Standard deviation of the translation prior around the centroid (m).
pub const PRIOR_TRANS_SIGMA: f64 = 0.1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda_pos: f64,
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warmup: usize,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Flow draws per scene within a batch (scenes per batch = batch / draws_per_scene).
    pub draws_per_scene: usize,
    /// Fraction of draws whose start pose is a perturbation of the ground truth.
    pub track_frac: f64,
    pub track_rot: f64,
    pub track_trans: f64,
    /// Perturbed-start draws take t uniform in [0, track_t_max); 0 trains
    /// them exactly where warm-started tracking begins.
    pub track_t_max: f64,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_pos: 10.0,
            batch: 64,
            steps: 2000,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            warmup: 100,
            grad_clip: 1.0,
            draws_per_scene: 4,
            track_frac: 0.25,
            track_rot: 25f64.to_radians(),
            track_trans: 0.06,
            track_t_max: 0.0,
            log_every: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.lambda_pos > 0.0) {
            return Err("lambda_pos must be positive".into());
        }
        if self.steps == 0 || self.batch == 0 || self.draws_per_scene == 0 {
            return Err("steps, batch and draws_per_scene must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.track_frac) {
            return Err("track_frac must lie in [0, 1]".into());
        }
        if !(0.0..=T_MAX).contains(&self.track_t_max) {
            return Err(format!("track_t_max must lie in [0, {T_MAX}]"));
        }
        Ok(())
    }
}

/// Point on the straight path between two poses.
pub fn interpolate(pose0: &Pose, pose1: &Pose, t: f64) -> Pose {
    Pose::new(geodesic_interp(&pose0.rot, &pose1.rot, t), pose0.trans * (1.0 - t) + pose1.trans * t)
}

/// Conditional velocity at time t on the path from `pose0` to `pose1`
/// (rotational part in the body frame).
pub fn target_velocity(pose0: &Pose, pose1: &Pose, t: f64) -> TangentVec {
    let pt = interpolate(pose0, pose1, t);
    let k = 1.0 / (1.0 - t);
    TangentVec {
        trans_vel: (pose1.trans - pt.trans) * k,
        rot_vel: so3_log(&pt.rot.transpose().compose(&pose1.rot)) * k,
    }
}

/// One sampled point of the flow-matching objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowDraw {
    pub t: f64,
    pub pose0: Pose,
    pub pose_t: Pose,
    pub target: TangentVec,
}

impl FlowDraw {
    pub fn new(pose0: Pose, gt: &Pose, t: f64) -> FlowDraw {
        FlowDraw { t, pose0, pose_t: interpolate(&pose0, gt, t), target: target_velocity(&pose0, gt, t) }
    }
}

/// Start pose from the prior: Haar rotation, Gaussian translation about the centroid.
pub fn prior_pose<R: Rng + ?Sized>(rng: &mut R, centroid: &Vector3<f64>) -> Pose {
    let n = Normal::new(0.0, PRIOR_TRANS_SIGMA).expect("valid sigma");
    let rot = Rotation::random(rng);
    Pose::new(rot, centroid + Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng)))
}

/// Start pose near `gt`: rotation angle ≤ `rot`, translation within a ball of radius `trans`.
pub fn perturbed_pose<R: Rng + ?Sized>(rng: &mut R, gt: &Pose, rot: f64, trans: f64) -> Pose {
    let axis = crate::lie::random_unit(rng);
    let angle = rng.random::<f64>() * rot;
    let dr = so3_exp(&(axis * angle));
    Pose::new(gt.rot.compose(&dr), gt.trans + crate::lie::random_in_ball(rng, trans))
}

pub fn sample_draw<R: Rng + ?Sized>(rng: &mut R, centroid: &Vector3<f64>, gt: &Pose) -> FlowDraw {
    let pose0 = prior_pose(rng, centroid);
    let t = rng.random::<f64>() * T_MAX;
    FlowDraw::new(pose0, gt, t)
}

fn per_draw_loss(v: &TangentVec, target: &TangentVec, lambda: f64) -> f64 {
    lambda * (v.trans_vel - target.trans_vel).norm_squared() + (v.rot_vel - target.rot_vel).norm_squared()
}

/// Loss sum over the draws of one observation; adds `weight` × gradient into `grad`.
pub fn observation_loss_grad(
    net: &VelocityNet,
    obs: &Observation,
    draws: &[FlowDraw],
    lambda: f64,
    weight: f64,
    grad: &mut [f64],
) -> f64 {
    let enc = net.encode(obs);
    let mut og = net.new_obs_grad(&enc);
    let mut cache = Default::default();
    let s = net.config.trans_scale;
    let mut total = 0.0;
    for d in draws {
        net.query_cached(&enc, &d.pose_t, d.t, &mut cache);
        let v = net.output(&cache);
        total += per_draw_loss(&v, &d.target, lambda);
        let et = (v.trans_vel - d.target.trans_vel) * (2.0 * lambda * s * weight);
        let er = (v.rot_vel - d.target.rot_vel) * (2.0 * weight);
        net.query_backward(&enc, &cache, &[et.x, et.y, et.z], &[er.x, er.y, er.z], grad, &mut og);
    }
    net.encode_backward(&enc, &og, grad);
    total
}

/// Mean loss and exact gradient over fixed draws.
pub fn fm_loss_with_draws(net: &VelocityNet, batch: &[(&Observation, Vec<FlowDraw>)], lambda: f64) -> (f64, Vec<f64>) {
    let n: usize = batch.iter().map(|(_, d)| d.len()).sum();
    assert!(n > 0, "empty batch");
    let w = 1.0 / n as f64;
    let parts: Vec<(f64, Vec<f64>)> = batch
        .par_iter()
        .map(|(obs, draws)| {
            let mut g = vec![0.0; net.n_params()];
            let l = observation_loss_grad(net, obs, draws, lambda, w, &mut g);
            (l, g)
        })
        .collect();
    let mut grad = vec![0.0; net.n_params()];
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    (loss * w, grad)
}

/// Loss only (no gradient), for finite differences.
pub fn fm_loss_value(net: &VelocityNet, batch: &[(&Observation, Vec<FlowDraw>)], lambda: f64) -> f64 {
    let n: usize = batch.iter().map(|(_, d)| d.len()).sum();
    let mut total = 0.0;
    for (obs, draws) in batch {
        let enc = net.encode(obs);
        for d in draws {
            total += per_draw_loss(&net.query(&enc, &d.pose_t, d.t), &d.target, lambda);
        }
    }
    total / n as f64
}

/// One prior draw per batch element; mean loss and its exact gradient.
pub fn fm_loss<R: Rng + ?Sized>(
    net: &VelocityNet,
    batch: &[(&Observation, Pose)],
    rng: &mut R,
    lambda: f64,
) -> (f64, Vec<f64>) {
    let drawn: Vec<(&Observation, Vec<FlowDraw>)> =
        batch.iter().map(|(obs, gt)| (*obs, vec![sample_draw(rng, &obs.centroid, gt)])).collect();
    fm_loss_with_draws(net, &drawn, lambda)
}

/// A tokenized training scene.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub obs: Observation,
    pub gt: Pose,
}

pub fn examples_from_scenes(net: &VelocityNet, scenes: &[SceneSample]) -> Result<Vec<TrainExample>, NetError> {
    scenes
        .iter()
        .map(|s| Ok(TrainExample { obs: net.tokenize(&s.cloud, &s.mask)?, gt: s.gt_pose }))
        .collect()
}

pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(n: usize) -> Adam {
        Adam { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64, b1: f64, b2: f64, eps: f64) {
        self.step += 1;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grad[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
        }
    }
}

/// Warmup followed by cosine decay to zero.
pub fn learning_rate(cfg: &TrainConfig, step: usize) -> f64 {
    if step < cfg.warmup {
        return cfg.lr * (step + 1) as f64 / cfg.warmup as f64;
    }
    let span = (cfg.steps.saturating_sub(cfg.warmup)).max(1) as f64;
    let frac = (step - cfg.warmup) as f64 / span;
    0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss_trace: Vec<f64>,
    pub steps: usize,
}

/// Runs `cfg.steps` optimizer steps over `examples`; writes the checkpoint if a path is given.
pub fn train(
    net: &mut VelocityNet,
    examples: &[TrainExample],
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<TrainReport, NetError> {
    if examples.is_empty() {
        return Err(NetError::DegenerateCloud("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(net.n_params());
    let scenes = (cfg.batch / cfg.draws_per_scene).max(1);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch: Vec<(&Observation, Vec<FlowDraw>)> = Vec::with_capacity(scenes);
        for _ in 0..scenes {
            let ex = &examples[rng.random_range(0..examples.len())];
            let draws = (0..cfg.draws_per_scene)
                .map(|_| {
                    if rng.random::<f64>() < cfg.track_frac {
                        let p0 = perturbed_pose(&mut rng, &ex.gt, cfg.track_rot, cfg.track_trans);
                        FlowDraw::new(p0, &ex.gt, rng.random::<f64>() * cfg.track_t_max)
                    } else {
                        sample_draw(&mut rng, &ex.obs.centroid, &ex.gt)
                    }
                })
                .collect();
            batch.push((&ex.obs, draws));
        }
        let (loss, mut grad) = fm_loss_with_draws(net, &batch, cfg.lambda_pos);
        if cfg.grad_clip > 0.0 {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > cfg.grad_clip {
                let k = cfg.grad_clip / norm;
                grad.iter_mut().for_each(|g| *g *= k);
            }
        }
        let lr = learning_rate(cfg, step);
        adam.update(&mut net.params, &grad, lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
        round_f32(&mut net.params);
        trace.push(loss);
        if cfg.log_every > 0 && (step + 1) % cfg.log_every == 0 {
            let k = cfg.log_every.min(trace.len());
            let recent = trace[trace.len() - k..].iter().sum::<f64>() / k as f64;
            log::info!("step {:>6}  loss {:.5}  lr {:.2e}", step + 1, recent, lr);
        }
    }
    if let Some(path) = checkpoint {
        net.save(path)?;
    }
    Ok(TrainReport { loss_trace: trace, steps: cfg.steps })
}

/// Outcome of a finite-difference comparison for one parameter tensor.
#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_err: f64,
    pub passed: bool,
}

/// Compares the analytic gradient against central differences: a random
/// full-tensor direction plus up to `entries` individual coordinates per
/// tensor. When a probe changes the max-pool selection the step is shrunk.
pub fn check_gradients(
    net: &VelocityNet,
    batch: &[(&Observation, Vec<FlowDraw>)],
    lambda: f64,
    h: f64,
    rel_tol: f64,
    abs_tol: f64,
    entries: usize,
    seed: u64,
) -> Vec<TensorCheck> {
    let (_, grad) = fm_loss_with_draws(net, batch, lambda);
    let patterns: Vec<Vec<u32>> = batch.iter().map(|(o, _)| net.encode(o).pool_pattern().to_vec()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = net.clone();
    let same_pattern = |n: &VelocityNet| {
        batch.iter().zip(&patterns).all(|((o, _), p)| n.encode(o).pool_pattern() == p.as_slice())
    };
    let probe = |dir: &[(usize, f64)], work: &mut VelocityNet| -> Option<f64> {
        let mut step = h;
        for _ in 0..4 {
            for &(i, d) in dir {
                work.params[i] = net.params[i] + step * d;
            }
            let ok_p = same_pattern(work);
            let lp = fm_loss_value(work, batch, lambda);
            for &(i, d) in dir {
                work.params[i] = net.params[i] - step * d;
            }
            let ok_m = same_pattern(work);
            let lm = fm_loss_value(work, batch, lambda);
            for &(i, _) in dir {
                work.params[i] = net.params[i];
            }
            if ok_p && ok_m {
                return Some((lp - lm) / (2.0 * step));
            }
            step *= 0.1;
        }
        None
    };
    let mut out = Vec::new();
    for spec in net.tensors() {
        let n: usize = spec.shape.iter().product();
        let mut checked = 0;
        let mut max_err: f64 = 0.0;
        let mut passed = true;
        let mut judge = |analytic: f64, numeric: f64| {
            let err = (analytic - numeric).abs();
            let scale = analytic.abs().max(numeric.abs());
            let ok = err <= abs_tol || err <= rel_tol * scale;
            // Relative error is only meaningful above the absolute floor.
            if scale > abs_tol {
                max_err = max_err.max(err / scale);
            }
            ok
        };
        let dir: Vec<(usize, f64)> =
            (0..n).map(|k| (spec.offset + k, if rng.random::<bool>() { 1.0 } else { -1.0 })).collect();
        let analytic: f64 = dir.iter().map(|&(i, d)| grad[i] * d).sum();
        if let Some(num) = probe(&dir, &mut work) {
            passed &= judge(analytic, num);
            checked += 1;
        }
        let picks: Vec<usize> = if n <= entries {
            (0..n).collect()
        } else {
            (0..entries).map(|_| rng.random_range(0..n)).collect()
        };
        for k in picks {
            let i = spec.offset + k;
            if let Some(num) = probe(&[(i, 1.0)], &mut work) {
                passed &= judge(grad[i], num);
                checked += 1;
            }
        }
        out.push(TensorCheck { name: spec.name.clone(), checked, max_err, passed: passed && checked > 0 });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::lie::geodesic_dist;
    use crate::net::NetConfig;
    use proptest::prelude::*;

    fn blob(n: usize, seed: u64) -> Vec<Vector3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Vector3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.03..0.03), 0.5 + rng.random_range(-0.04..0.04)))
            .collect()
    }

    fn small_config() -> NetConfig {
        NetConfig { d_model: 16, point_hidden: 8, n_tokens: 4, group_size: 8, n_heads: 2, ff_mult: 2, ..NetConfig::default() }
    }

    #[test]
    fn straight_translation_has_unit_velocity() {
        let p0 = Pose::identity();
        let p1 = Pose::from_translation(Vector3::new(1.0, 0.0, 0.0));
        for t in [0.0, 0.3, 0.9] {
            let v = target_velocity(&p0, &p1, t);
            assert!((v.trans_vel - Vector3::x()).norm() < 1e-12);
        }
    }

    #[test]
    fn same_axis_rotation_velocity_is_constant() {
        let p1 = Pose::new(Rotation::rot_z(std::f64::consts::FRAC_PI_2), Vector3::zeros());
        for t in [0.0, 0.5, 0.95] {
            let v = target_velocity(&Pose::identity(), &p1, t);
            assert!((v.rot_vel - Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2)).norm() < 1e-12);
        }
    }

    #[test]
    fn target_velocity_constant_along_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..1000 {
            let a = prior_pose(&mut rng, &Vector3::zeros());
            let b = prior_pose(&mut rng, &Vector3::new(0.0, 0.0, 0.5));
            let v0 = target_velocity(&a, &b, 0.1);
            for t in [0.5, 0.9] {
                let v = target_velocity(&a, &b, t);
                assert!((v.rot_vel - v0.rot_vel).norm() < 1e-9, "{t}");
                assert!((v.trans_vel - v0.trans_vel).norm() < 1e-9);
            }
            let one = Pose::new(a.rot.compose(&so3_exp(&v0.rot_vel)), a.trans + v0.trans_vel);
            // t = 0.1 velocity equals the t = 0 one, so a unit Euler step lands on b.
            assert!(geodesic_dist(&one.rot, &b.rot) < 1e-9 && (one.trans - b.trans).norm() < 1e-9);
        }
    }

    fn zero_heads(net: &mut VelocityNet) {
        for name in ["head.translation.w", "head.translation.b", "head.rotation.w", "head.rotation.b"] {
            let s = net.tensor(name).unwrap().clone();
            let n: usize = s.shape.iter().product();
            net.params[s.offset..s.offset + n].iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn zero_heads_give_closed_form_loss() {
        let mut net = VelocityNet::new_random(small_config(), 1, 1.0);
        zero_heads(&mut net);
        let obs = net.tokenize(&blob(64, 2), &[true; 64]).unwrap();
        let gt = Pose::new(Rotation::rot_x(0.3), Vector3::new(0.0, 0.0, 0.5));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws: Vec<FlowDraw> = (0..5).map(|_| sample_draw(&mut rng, &obs.centroid, &gt)).collect();
        let expect =
            draws.iter().map(|d| 10.0 * d.target.trans_vel.norm_squared() + d.target.rot_vel.norm_squared()).sum::<f64>() / 5.0;
        let (loss, _) = fm_loss_with_draws(&net, &[(&obs, draws)], 10.0);
        assert!((loss - expect).abs() < 1e-12 * expect.max(1.0));
    }

    #[test]
    fn translation_term_is_linear_in_lambda() {
        let net = VelocityNet::new_random(small_config(), 4, 1.0);
        let obs = net.tokenize(&blob(64, 5), &[true; 64]).unwrap();
        let gt = Pose::new(Rotation::rot_y(0.7), Vector3::new(0.01, 0.0, 0.5));
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let draws: Vec<FlowDraw> = (0..4).map(|_| sample_draw(&mut rng, &obs.centroid, &gt)).collect();
        let b = [(&obs, draws)];
        let l0 = fm_loss_value(&net, &b, 0.0);
        let l10 = fm_loss_value(&net, &b, 10.0);
        let l20 = fm_loss_value(&net, &b, 20.0);
        assert!(((l20 - l0) - 2.0 * (l10 - l0)).abs() < 1e-10 * l20);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let net = VelocityNet::new_random(small_config(), 7, 1.0);
        let obs_a = net.tokenize(&blob(48, 8), &[true; 48]).unwrap();
        let mut mask = vec![true; 48];
        mask[..12].iter_mut().for_each(|m| *m = false);
        let obs_b = net.tokenize(&blob(48, 9), &mask).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let gt = Pose::new(Rotation::random(&mut rng), Vector3::new(0.0, 0.0, 0.5));
        let batch = vec![
            (&obs_a, vec![sample_draw(&mut rng, &obs_a.centroid, &gt)]),
            (&obs_b, vec![sample_draw(&mut rng, &obs_b.centroid, &gt)]),
        ];
        for c in check_gradients(&net, &batch, 10.0, 1e-4, 1e-3, 1e-5, 8, 11) {
            assert!(c.passed, "{} err {}", c.name, c.max_err);
        }
    }

    #[test]
    fn loss_is_invariant_to_scene_translation() {
        let net = VelocityNet::new_random(small_config(), 12, 1.0);
        let cloud = blob(64, 13);
        let shift = Vector3::new(0.2, -0.1, 0.3);
        let moved: Vec<_> = cloud.iter().map(|p| p + shift).collect();
        let gt = Pose::new(Rotation::rot_z(1.0), Vector3::new(0.01, 0.02, 0.5));
        let gt2 = Pose::new(gt.rot, gt.trans + shift);
        let a = net.tokenize(&cloud, &[true; 64]).unwrap();
        let b = net.tokenize(&moved, &[true; 64]).unwrap();
        let (la, _) = fm_loss(&net, &[(&a, gt)], &mut ChaCha8Rng::seed_from_u64(1), 10.0);
        let (lb, _) = fm_loss(&net, &[(&b, gt2)], &mut ChaCha8Rng::seed_from_u64(1), 10.0);
        assert!((la - lb).abs() < 1e-6);
    }

    #[test]
    fn single_scene_overfits() {
        let mut net = VelocityNet::new(small_config(), 14);
        let obs = net.tokenize(&blob(64, 15), &[true; 64]).unwrap();
        let gt = Pose::new(Rotation::rot_x(0.5), obs.centroid);
        let ex = vec![TrainExample { obs, gt }];
        let cfg = TrainConfig { steps: 2000, batch: 16, draws_per_scene: 16, track_frac: 0.0, seed: 3, log_every: 0, ..TrainConfig::default() };
        let report = train(&mut net, &ex, &cfg, None).unwrap();
        let head = report.loss_trace[..100].iter().sum::<f64>() / 100.0;
        let tail = report.loss_trace[1900..].iter().sum::<f64>() / 100.0;
        assert!(tail < 0.1 * head, "{head} → {tail}");
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let mut net = VelocityNet::new(small_config(), 16);
            let obs = net.tokenize(&blob(64, 17), &[true; 64]).unwrap();
            let ex = vec![TrainExample { obs, gt: Pose::new(Rotation::rot_y(0.2), Vector3::new(0.0, 0.0, 0.5)) }];
            let cfg = TrainConfig { steps: 30, batch: 8, log_every: 0, seed: 5, ..TrainConfig::default() };
            train(&mut net, &ex, &cfg, None).unwrap();
            net.to_bytes()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn learning_rate_schedule() {
        let cfg = TrainConfig { steps: 1000, warmup: 100, ..TrainConfig::default() };
        assert!((learning_rate(&cfg, 99) - 1e-3).abs() < 1e-15);
        assert!(learning_rate(&cfg, 550) < 6e-4 && learning_rate(&cfg, 550) > 4e-4);
        assert!(learning_rate(&cfg, 999) < 1e-8);
    }

    proptest! {
        #[test]
        fn velocity_constant_for_random_pairs(seed in any::<u64>(), t in 0.0f64..0.95) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = prior_pose(&mut rng, &Vector3::zeros());
            let b = prior_pose(&mut rng, &Vector3::zeros());
            let v0 = target_velocity(&a, &b, 0.0);
            let v = target_velocity(&a, &b, t);
            prop_assert!((v.rot_vel - v0.rot_vel).norm() < 1e-8);
            prop_assert!((v.trans_vel - v0.trans_vel).norm() < 1e-9);
        }
    }
}
