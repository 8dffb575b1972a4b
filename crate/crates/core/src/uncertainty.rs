//! Tangent-space pose uncertainty and next-best-view planning.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::rotation_error;
use crate::lie::{pose_mean, so3_log, LieError, Pose, PoseJson, Rotation};
use crate::sampler::{sample_poses, VelocityField};
use crate::scene::{look_at, render_depth, ObjectModel, RenderConfig, SceneError};
use crate::select::{rank_and_retain, Scorer};

#[derive(Debug, Error)]
pub enum UncertaintyError {
    #[error("need at least two hypotheses")]
    TooFew,
    #[error(transparent)]
    Lie(#[from] LieError),
    #[error("no candidate view sees the object")]
    AllInvisible,
    #[error(transparent)]
    Scene(#[from] SceneError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseBelief {
    pub mean: Pose,
    /// Covariance of log(μᵀRᵢ) (rad²).
    pub cov_rot: Matrix3<f64>,
    /// Covariance of translations (m²).
    pub cov_trans: Matrix3<f64>,
    pub n: usize,
}

impl PoseBelief {
    pub fn tr_cov_rot(&self) -> f64 {
        self.cov_rot.trace()
    }

    pub fn tr_cov_trans(&self) -> f64 {
        self.cov_trans.trace()
    }
}

fn sample_cov(v: &[Vector3<f64>]) -> Matrix3<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<Vector3<f64>>() / n;
    let mut c = Matrix3::zeros();
    for x in v {
        let d = x - mean;
        c += d * d.transpose();
    }
    c /= n - 1.0;
    (c + c.transpose()) * 0.5
}

/// Belief with rotation covariance taken in the tangent space at `mean`.
pub fn belief_at(mean: Pose, poses: &[Pose]) -> Result<PoseBelief, UncertaintyError> {
    if poses.len() < 2 {
        return Err(UncertaintyError::TooFew);
    }
    let mt = mean.rot.transpose();
    let logs: Vec<Vector3<f64>> = poses.iter().map(|p| so3_log(&mt.compose(&p.rot))).collect();
    let trans: Vec<Vector3<f64>> = poses.iter().map(|p| p.trans).collect();
    Ok(PoseBelief { mean, cov_rot: sample_cov(&logs), cov_trans: sample_cov(&trans), n: poses.len() })
}

pub fn belief_from_hypotheses(poses: &[Pose]) -> Result<PoseBelief, UncertaintyError> {
    if poses.len() < 2 {
        return Err(UncertaintyError::TooFew);
    }
    belief_at(pose_mean(poses)?, poses)
}

/// Projection of the arithmetic mean of rotation matrices onto SO(3).
pub fn chordal_mean(rs: &[Rotation]) -> Rotation {
    let m: Matrix3<f64> = rs.iter().map(|r| r.matrix()).sum::<Matrix3<f64>>() / rs.len() as f64;
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v"));
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    Rotation::from_matrix(u * d * vt).unwrap_or_else(|_| Rotation::identity()).renormalized()
}

/// Belief that falls back to the chordal mean when the Karcher iteration
/// does not settle (widely spread, multi-modal sets).
pub fn robust_belief(poses: &[Pose]) -> Result<PoseBelief, UncertaintyError> {
    match belief_from_hypotheses(poses) {
        Err(UncertaintyError::Lie(LieError::NonConvergence { .. })) => {
            let rots: Vec<Rotation> = poses.iter().map(|p| p.rot).collect();
            let t = poses.iter().map(|p| p.trans).sum::<Vector3<f64>>() / poses.len() as f64;
            belief_at(Pose::new(chordal_mean(&rots), t), poses)
        }
        other => other,
    }
}

/// `n` unit directions spread evenly over the sphere.
pub fn fibonacci_sphere(n: usize) -> Vec<Vector3<f64>> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            Vector3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewCandidate {
    /// Camera-to-world pose looking at the sphere center.
    pub camera: Pose,
    /// Predicted mean tr(cov_rot) after observing from this view.
    pub score: f64,
    pub score_trans: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NbvConfig {
    pub candidates: usize,
    pub radius: f64,
    pub n_particles: usize,
    pub particle_samples: usize,
    pub particle_steps: usize,
    pub n_samples: usize,
    pub n_steps: usize,
    pub top_frac: f64,
}

impl Default for NbvConfig {
    fn default() -> Self {
        NbvConfig {
            candidates: 12,
            radius: 0.5,
            n_particles: 8,
            particle_samples: 16,
            particle_steps: 2,
            n_samples: 50,
            n_steps: 5,
            top_frac: 0.2,
        }
    }
}

pub fn candidate_cameras(center: &Vector3<f64>, n: usize, radius: f64) -> Vec<Pose> {
    fibonacci_sphere(n).into_iter().map(|u| look_at(&(center + u * radius), center)).collect()
}

/// Renders one view of the object and samples world-frame hypotheses from it.
pub fn observe<F: VelocityField + ?Sized, R: Rng>(
    field: &F,
    model: &ObjectModel,
    obj_world: &Pose,
    camera: &Pose,
    cfg: &RenderConfig,
    n_samples: usize,
    n_steps: usize,
    rng: &mut R,
) -> Option<(Vec<Vector3<f64>>, Vec<Pose>)> {
    let scene = render_depth(model, obj_world, camera, cfg, rng).ok()?;
    let obs = field.observe(&scene.cloud, &scene.mask).ok()?;
    let hs = sample_poses(field, &obs, n_samples, n_steps, rng.random());
    Some((scene.cloud, hs.poses.iter().map(|h| camera.compose(h)).collect()))
}

/// Picks the candidate view whose simulated observations, one per particle
/// drawn from `particles` (world-frame poses), leave the smallest mean rotational
/// covariance; ties go to the smaller translational covariance.
pub fn next_best_view<F: VelocityField + ?Sized>(
    field: &F,
    model: &ObjectModel,
    particles: &[Pose],
    candidates: &[Pose],
    cfg: &NbvConfig,
    render: &RenderConfig,
    seed: u64,
) -> Result<ViewCandidate, UncertaintyError> {
    assert!(!candidates.is_empty() && !particles.is_empty());
    let mut pick_rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: Vec<Pose> =
        (0..cfg.n_particles).map(|_| particles[pick_rng.random_range(0..particles.len())]).collect();
    let scored: Vec<Option<ViewCandidate>> = candidates
        .par_iter()
        .enumerate()
        .map(|(ci, cam)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9);
            rng.set_stream(ci as u64 + 1);
            let mut rot = Vec::new();
            let mut trans = Vec::new();
            for p in &chosen {
                let Some((_, hyps)) =
                    observe(field, model, p, cam, render, cfg.particle_samples, cfg.particle_steps, &mut rng)
                else {
                    continue;
                };
                if let Ok(b) = robust_belief(&hyps) {
                    rot.push(b.tr_cov_rot());
                    trans.push(b.tr_cov_trans());
                }
            }
            if rot.is_empty() {
                return None;
            }
            let k = rot.len() as f64;
            Some(ViewCandidate {
                camera: *cam,
                score: rot.iter().sum::<f64>() / k,
                score_trans: trans.iter().sum::<f64>() / k,
            })
        })
        .collect();
    let mut best: Option<ViewCandidate> = None;
    for c in scored.into_iter().flatten() {
        let better = match &best {
            None => true,
            Some(b) => c.score < b.score || (c.score == b.score && c.score_trans < b.score_trans),
        };
        if better {
            best = Some(c);
        }
    }
    best.ok_or(UncertaintyError::AllInvisible)
}

/// How the next camera is chosen in [`nbv_loop`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewPolicy {
    NextBest,
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NbvStep {
    pub camera: Pose,
    pub belief: PoseBelief,
    /// Best-scoring hypothesis (world frame).
    pub estimate: Pose,
    /// Symmetry-aware rotation error of `estimate` (rad).
    pub rot_error: f64,
    pub trans_error: f64,
    /// Predicted tr(cov_rot) that led to choosing this view (none for the first).
    pub predicted: Option<f64>,
}

impl NbvStep {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "view": PoseJson::from(self.camera),
            "tr_cov_rot": self.belief.tr_cov_rot(),
            "tr_cov_trans": self.belief.tr_cov_trans(),
            "rot_error_deg": self.rot_error.to_degrees(),
            "trans_error_m": self.trans_error,
            "predicted_tr_cov_rot": self.predicted,
            "estimate": PoseJson::from(self.estimate),
        })
    }
}

/// Closed loop: observe, sample, summarize, move to the next view. Only the
/// newest view's hypotheses form the belief.
pub fn nbv_loop<F: VelocityField + ?Sized>(
    field: &F,
    model: &ObjectModel,
    gt_world: &Pose,
    first_camera: &Pose,
    max_views: usize,
    policy: ViewPolicy,
    cfg: &NbvConfig,
    render: &RenderConfig,
    seed: u64,
) -> Result<Vec<NbvStep>, UncertaintyError> {
    assert!(max_views >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut camera = *first_camera;
    let mut predicted = None;
    let mut steps = Vec::with_capacity(max_views);
    for v in 0..max_views {
        let (cloud, hyps) =
            observe(field, model, gt_world, &camera, render, cfg.n_samples, cfg.n_steps, &mut rng)
                .ok_or(UncertaintyError::AllInvisible)?;
        let belief = robust_belief(&hyps)?;
        // Select in the camera frame, where the cloud lives.
        let inv = camera.inverse();
        let local = crate::sampler::HypothesisSet {
            poses: hyps.iter().map(|h| inv.compose(h)).collect(),
            scores: None,
            meta: crate::sampler::HypothesisMeta {
                n_steps: cfg.n_steps,
                mode: crate::sampler::SampleMode::Estimate,
                seed,
            },
        };
        let scored = rank_and_retain(&local, Scorer::Chamfer, cfg.top_frac, &cloud, model);
        let estimate = camera.compose(&scored.poses[scored.best()]);
        steps.push(NbvStep {
            camera,
            rot_error: rotation_error(&model.symmetry, &estimate.rot, &gt_world.rot),
            trans_error: (estimate.trans - gt_world.trans).norm(),
            belief,
            estimate,
            predicted,
        });
        if v + 1 == max_views {
            break;
        }
        let center = hyps.iter().map(|h| h.trans).sum::<Vector3<f64>>() / hyps.len() as f64;
        let cands = candidate_cameras(&center, cfg.candidates, cfg.radius);
        match policy {
            ViewPolicy::NextBest => {
                let best = next_best_view(field, model, &hyps, &cands, cfg, render, rng.random())?;
                camera = best.camera;
                predicted = Some(best.score);
            }
            ViewPolicy::Random => {
                camera = cands[rng.random_range(0..cands.len())];
                predicted = None;
            }
        }
    }
    Ok(steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::so3_exp;
    use crate::sampler::ConstantField;
    use crate::scene::{make_object, ObjectId};
    use crate::TangentVec;

    #[test]
    fn identical_hypotheses_have_zero_covariance() {
        let p = Pose::new(Rotation::rot_x(0.3), Vector3::new(0.0, 0.0, 0.5));
        let b = belief_from_hypotheses(&[p; 6]).unwrap();
        assert!(b.tr_cov_rot().abs() < 1e-20 && b.tr_cov_trans().abs() < 1e-20);
    }

    #[test]
    fn two_point_yaw_covariance() {
        let a = 5f64.to_radians();
        let poses = [
            Pose::new(Rotation::rot_z(a), Vector3::zeros()),
            Pose::new(Rotation::rot_z(-a), Vector3::zeros()),
        ];
        let b = belief_from_hypotheses(&poses).unwrap();
        let expect = Matrix3::from_diagonal(&Vector3::new(0.0, 0.0, 2.0 * a * a));
        assert!((b.cov_rot - expect).norm() < 1e-12, "{}", b.cov_rot);
    }

    #[test]
    fn covariance_is_symmetric_psd_and_left_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = Rotation::random(&mut rng);
        let poses: Vec<Pose> = (0..30)
            .map(|_| {
                let w = crate::lie::random_unit(&mut rng) * rng.random_range(0.0..0.5);
                Pose::new(base.compose(&so3_exp(&w)), crate::lie::random_in_ball(&mut rng, 0.02))
            })
            .collect();
        let b = belief_from_hypotheses(&poses).unwrap();
        assert!((b.cov_rot - b.cov_rot.transpose()).norm() < 1e-12);
        assert!(b.cov_rot.symmetric_eigenvalues().iter().all(|&e| e >= -1e-10));
        let q = Rotation::random(&mut rng);
        let moved: Vec<Pose> = poses.iter().map(|p| Pose::new(q.compose(&p.rot), p.trans)).collect();
        let b2 = belief_from_hypotheses(&moved).unwrap();
        assert!((b.tr_cov_rot() - b2.tr_cov_rot()).abs() < 1e-9);
        let mut perm = poses.clone();
        perm.reverse();
        assert!((belief_from_hypotheses(&perm).unwrap().tr_cov_rot() - b.tr_cov_rot()).abs() < 1e-12);
    }

    #[test]
    fn fibonacci_points_are_on_the_sphere() {
        let c = Vector3::new(0.1, -0.2, 0.4);
        for cam in candidate_cameras(&c, 20, 0.5) {
            assert!(((cam.trans - c).norm() - 0.5).abs() < 1e-6);
            let axis = cam.rot.apply(&Vector3::z());
            assert!((axis - (c - cam.trans).normalize()).norm() < 1e-9);
        }
    }

    #[test]
    fn single_candidate_is_returned_and_loop_is_deterministic() {
        let field = ConstantField(TangentVec::zero());
        let model = make_object(ObjectId::Sphere);
        let gt = Pose::identity();
        let cam = look_at(&Vector3::new(0.0, -0.5, 0.0), &Vector3::zeros());
        let cfg = NbvConfig { n_particles: 2, particle_samples: 4, n_samples: 8, ..NbvConfig::default() };
        let render = RenderConfig::default();
        let only = [look_at(&Vector3::new(0.5, 0.0, 0.0), &Vector3::zeros())];
        let parts = [gt];
        let v = next_best_view(&field, &model, &parts, &only, &cfg, &render, 1).unwrap();
        assert_eq!(v.camera, only[0]);
        let a = nbv_loop(&field, &model, &gt, &cam, 3, ViewPolicy::NextBest, &cfg, &render, 4).unwrap();
        let b = nbv_loop(&field, &model, &gt, &cam, 3, ViewPolicy::NextBest, &cfg, &render, 4).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a, b);
    }
}
