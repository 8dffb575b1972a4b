//! Pose hypotheses by Euler integration of a velocity field on SE(3).

use std::path::Path;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::lie::{so3_exp, Pose, PoseJson, TangentVec};
use crate::net::{tokenize, NetError, Observation, VelocityNet};
use crate::train::{perturbed_pose, prior_pose};

/// Default warm-start perturbation: 5° and 1 cm.
pub const DEFAULT_JITTER: (f64, f64) = (5.0 * std::f64::consts::PI / 180.0, 0.01);

pub type BoundField<'a> = Box<dyn Fn(&Pose, f64) -> TangentVec + Sync + 'a>;

/// A velocity field conditioned on an observation.
pub trait VelocityField: Sync {
    fn bind<'a>(&'a self, obs: &'a Observation) -> BoundField<'a>;

    /// Groups a cloud into the observation this field expects.
    fn observe(&self, cloud: &[Vector3<f64>], mask: &[bool]) -> Result<Observation, NetError> {
        tokenize(cloud, mask, 16, 32)
    }
}

impl VelocityField for VelocityNet {
    fn bind<'a>(&'a self, obs: &'a Observation) -> BoundField<'a> {
        let enc = self.encode(obs);
        Box::new(move |pose, t| self.query(&enc, pose, t))
    }

    fn observe(&self, cloud: &[Vector3<f64>], mask: &[bool]) -> Result<Observation, NetError> {
        self.tokenize(cloud, mask)
    }
}

/// The same velocity everywhere.
#[derive(Debug, Clone, Copy)]
pub struct ConstantField(pub TangentVec);

impl VelocityField for ConstantField {
    fn bind<'a>(&'a self, _obs: &'a Observation) -> BoundField<'a> {
        let v = self.0;
        Box::new(move |_, _| v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    Estimate,
    Track,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisMeta {
    pub n_steps: usize,
    pub mode: SampleMode,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisSet {
    pub poses: Vec<Pose>,
    pub scores: Option<Vec<f64>>,
    pub meta: HypothesisMeta,
}

#[derive(Serialize, Deserialize)]
struct HypJson {
    #[serde(flatten)]
    pose: PoseJson,
    score: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct HypFile {
    meta: HypothesisMeta,
    hyps: Vec<HypJson>,
}

impl HypothesisSet {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn to_json(&self) -> String {
        let hyps = self
            .poses
            .iter()
            .enumerate()
            .map(|(i, p)| HypJson { pose: PoseJson::from(*p), score: self.scores.as_ref().map(|s| s[i]) })
            .collect();
        serde_json::to_string(&HypFile { meta: self.meta.clone(), hyps }).expect("serializable")
    }

    pub fn from_json(s: &str) -> Result<HypothesisSet, String> {
        let f: HypFile = serde_json::from_str(s).map_err(|e| e.to_string())?;
        if f.hyps.is_empty() {
            return Err("hypothesis file has no poses".into());
        }
        let mut poses = Vec::with_capacity(f.hyps.len());
        let mut scores = Vec::with_capacity(f.hyps.len());
        for h in f.hyps {
            poses.push(Pose::try_from(h.pose).map_err(|e| e.to_string())?);
            scores.push(h.score);
        }
        let scores = if scores.iter().all(Option::is_some) {
            Some(scores.into_iter().map(Option::unwrap).collect())
        } else {
            None
        };
        Ok(HypothesisSet { poses, scores, meta: f.meta })
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_json() + "\n")
    }

    pub fn read(path: &Path) -> Result<HypothesisSet, String> {
        HypothesisSet::from_json(&std::fs::read_to_string(path).map_err(|e| e.to_string())?)
    }
}

/// Euler integration from t = 0 to t = 1; rotation updated in the body frame
/// and renormalized every step.
pub fn integrate(field: &dyn Fn(&Pose, f64) -> TangentVec, start: Pose, n_steps: usize) -> Pose {
    let dt = 1.0 / n_steps as f64;
    let mut pose = start;
    for k in 0..n_steps {
        let t = k as f64 * dt;
        let v = field(&pose, t);
        pose = Pose::new(pose.rot.compose(&so3_exp(&(v.rot_vel * dt))).renormalized(), pose.trans + v.trans_vel * dt);
    }
    pose
}

/// Per-sample generator; sample i only depends on (seed, i).
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Cold-start hypotheses from the training prior.
pub fn sample_poses<F: VelocityField + ?Sized>(
    field: &F,
    obs: &Observation,
    n_samples: usize,
    n_steps: usize,
    seed: u64,
) -> HypothesisSet {
    assert!(n_samples >= 1 && n_steps >= 1);
    let bound = field.bind(obs);
    let poses = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let start = prior_pose(&mut sample_rng(seed, i), &obs.centroid);
            integrate(&*bound, start, n_steps)
        })
        .collect();
    HypothesisSet { poses, scores: None, meta: HypothesisMeta { n_steps, mode: SampleMode::Estimate, seed } }
}

/// Warm-start hypotheses around a previous estimate.
pub fn track_pose<F: VelocityField + ?Sized>(
    field: &F,
    obs: &Observation,
    prev: &Pose,
    n_samples: usize,
    n_steps: usize,
    jitter: (f64, f64),
    seed: u64,
) -> HypothesisSet {
    assert!(n_samples >= 1 && n_steps >= 1);
    let bound = field.bind(obs);
    let poses = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let start = perturbed_pose(&mut sample_rng(seed, i), prev, jitter.0, jitter.1);
            integrate(&*bound, start, n_steps)
        })
        .collect();
    HypothesisSet { poses, scores: None, meta: HypothesisMeta { n_steps, mode: SampleMode::Track, seed } }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::{geodesic_dist, Rotation};
    use crate::net::tokenize;
    use crate::train::target_velocity;
    use std::f64::consts::FRAC_PI_2;

    fn obs() -> Observation {
        let cloud: Vec<Vector3<f64>> =
            (0..64).map(|i| Vector3::new((i % 8) as f64 * 0.01, (i / 8) as f64 * 0.01, 0.5)).collect();
        tokenize(&cloud, &[true; 64], 16, 8).unwrap()
    }

    #[test]
    fn constant_field_lands_on_quarter_turn() {
        let field = ConstantField(TangentVec::new(Vector3::new(0.0, 0.0, FRAC_PI_2), Vector3::zeros()));
        let o = obs();
        let bound = field.bind(&o);
        for n in [1, 2, 5, 10, 37] {
            let p = integrate(&*bound, Pose::identity(), n);
            assert!((p.rot.matrix() - Rotation::rot_z(FRAC_PI_2).matrix()).norm() < 1e-12, "{n}");
        }
    }

    #[test]
    fn exact_field_reaches_target_in_one_step() {
        let mut rng = sample_rng(4, 0);
        let a = prior_pose(&mut rng, &Vector3::zeros());
        let b = prior_pose(&mut rng, &Vector3::new(0.0, 0.0, 0.5));
        // Straight-line field towards b from wherever the integrator is at time t.
        let field = move |p: &Pose, t: f64| target_velocity(p, &b, 0.0).scaled(1.0 / (1.0 - t));
        let p = integrate(&field, a, 1);
        assert!(geodesic_dist(&p.rot, &b.rot) < 1e-9 && (p.trans - b.trans).norm() < 1e-9);
        let p = integrate(&field, a, 7);
        assert!(geodesic_dist(&p.rot, &b.rot) < 1e-8 && (p.trans - b.trans).norm() < 1e-9);
    }

    #[test]
    fn sampling_is_deterministic_and_exchangeable() {
        let net = VelocityNet::new_random(crate::net::NetConfig::default(), 1, 0.5);
        let o = obs();
        let a = sample_poses(&net, &o, 50, 3, 9);
        assert_eq!(a, sample_poses(&net, &o, 50, 3, 9));
        assert!(a.poses.iter().all(|p| p.is_finite()));
        let short = sample_poses(&net, &o, 10, 3, 9);
        assert_eq!(short.poses[..], a.poses[..10]);
    }

    #[test]
    fn zero_jitter_tracks_identically() {
        let net = VelocityNet::new_random(crate::net::NetConfig::default(), 2, 0.5);
        let o = obs();
        let prev = Pose::new(Rotation::rot_x(0.3), Vector3::new(0.0, 0.0, 0.5));
        let h = track_pose(&net, &o, &prev, 3, 2, (0.0, 0.0), 1);
        assert_eq!(h.poses[0], h.poses[1]);
        assert_eq!(h.poses[1], h.poses[2]);
    }

    #[test]
    fn hypothesis_file_roundtrip() {
        let net = VelocityNet::new_random(crate::net::NetConfig::default(), 3, 0.5);
        let mut h = sample_poses(&net, &obs(), 4, 2, 5);
        h.scores = Some(vec![0.5, -1.0, 2.0, 0.0]);
        let back = HypothesisSet::from_json(&h.to_json()).unwrap();
        assert_eq!(back.meta, h.meta);
        assert_eq!(back.scores, h.scores);
        for (a, b) in back.poses.iter().zip(&h.poses) {
            assert!(geodesic_dist(&a.rot, &b.rot) < 1e-9 && (a.trans - b.trans).norm() < 1e-12);
        }
    }
}
