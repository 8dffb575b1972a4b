//! Pose metrics, benchmark protocol, step ablation and Mollweide export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::lie::{geodesic_dist, Pose, Rotation};
use crate::sampler::{sample_poses, track_pose, HypothesisSet, VelocityField, DEFAULT_JITTER};
use crate::scene::{make_object, ObjectId, ObjectModel, SceneSample, SymmetrySet};
use crate::select::{cluster, rank_and_retain, ClusterParams, Scorer};
use crate::train::perturbed_pose;

/// (rotation °, translation cm) accuracy thresholds.
pub const THRESHOLDS: [(f64, f64); 4] = [(5.0, 2.0), (5.0, 5.0), (10.0, 2.0), (10.0, 5.0)];

/// Minimum geodesic angle between `pred` and `gt · S` over the symmetry set (rad).
pub fn rotation_error(sym: &SymmetrySet, pred: &Rotation, gt: &Rotation) -> f64 {
    sym.rotations.iter().map(|s| geodesic_dist(pred, &gt.compose(s))).fold(f64::INFINITY, f64::min)
}

/// (rotation error in degrees, translation error in meters).
pub fn pose_error(pred: &Pose, gt: &Pose, sym: &SymmetrySet) -> (f64, f64) {
    (rotation_error(sym, &pred.rot, &gt.rot).to_degrees(), (pred.trans - gt.trans).norm())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Lowest Chamfer residual.
    Chamfer,
    /// Lowest SDF residual.
    Sdf,
    /// Mean of the largest DBSCAN cluster (falls back to Chamfer).
    Cluster,
}

impl std::str::FromStr for Selection {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "chamfer" => Ok(Selection::Chamfer),
            "sdf" => Ok(Selection::Sdf),
            "cluster" => Ok(Selection::Cluster),
            _ => Err(format!("unknown selection '{s}' (expected chamfer, sdf or cluster)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Estimate,
    /// Warm start from the ground truth perturbed by up to 20° and 5 cm.
    Track,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Protocol {
    pub n_samples: usize,
    pub n_steps: usize,
    pub selection: Selection,
    pub mode: EvalMode,
    pub top_frac: f64,
    pub track_init: (f64, f64),
    pub seed: u64,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol {
            n_samples: 50,
            n_steps: 5,
            selection: Selection::Chamfer,
            mode: EvalMode::Estimate,
            top_frac: 0.2,
            track_init: (20f64.to_radians(), 0.05),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub rot_deg: f64,
    pub trans_cm: f64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Runtime {
    pub wall_s: f64,
    pub poses_per_s: f64,
    pub ms_per_step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneResult {
    pub object: ObjectId,
    pub rot_err_deg: f64,
    pub trans_err_m: f64,
    /// Selection fell back to a single best-scored hypothesis.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub protocol: Protocol,
    pub n_scenes: usize,
    pub accuracy: Vec<Accuracy>,
    pub per_object: BTreeMap<String, Vec<Accuracy>>,
    pub scenes: Vec<SceneResult>,
    pub flagged: usize,
    /// Wall-clock figures; left out of serialized reports unless requested
    /// so reports stay reproducible.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub runtime: Option<Runtime>,
}

fn accuracy_table(results: &[&SceneResult]) -> Vec<Accuracy> {
    THRESHOLDS
        .iter()
        .map(|&(r, t)| {
            let hits = results.iter().filter(|s| s.rot_err_deg < r && s.trans_err_m < t / 100.0).count();
            let fraction = if results.is_empty() { 0.0 } else { hits as f64 / results.len() as f64 };
            Accuracy { rot_deg: r, trans_cm: t, fraction }
        })
        .collect()
}

impl MetricReport {
    pub fn fraction(&self, rot_deg: f64, trans_cm: f64) -> f64 {
        self.accuracy
            .iter()
            .find(|a| a.rot_deg == rot_deg && a.trans_cm == trans_cm)
            .map(|a| a.fraction)
            .expect("known threshold")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    /// Fixed-width summary table.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<14}", "object");
        for (r, t) in THRESHOLDS {
            let _ = write!(s, "{:>10}", format!("{r}°{t}cm"));
        }
        s.push('\n');
        let mut row = |name: &str, acc: &[Accuracy]| {
            let _ = write!(s, "{name:<14}");
            for a in acc {
                let _ = write!(s, "{:>10.3}", a.fraction);
            }
            s.push('\n');
        };
        for (name, acc) in &self.per_object {
            row(name, acc);
        }
        row("all", &self.accuracy);
        if let Some(rt) = &self.runtime {
            let _ = writeln!(s, "{:.1} poses/s, {:.3} ms/step, {:.2} s wall", rt.poses_per_s, rt.ms_per_step, rt.wall_s);
        }
        s
    }
}

/// Model lookup built once per evaluation.
pub fn models_for(scenes: &[SceneSample]) -> BTreeMap<ObjectId, ObjectModel> {
    let mut m = BTreeMap::new();
    for s in scenes {
        m.entry(s.object).or_insert_with(|| make_object(s.object));
    }
    m
}

/// Hypotheses for one scene under the protocol; `None` if the cloud is degenerate.
pub fn scene_hypotheses<F: VelocityField + ?Sized>(
    field: &F,
    scene: &SceneSample,
    protocol: &Protocol,
    scene_seed: u64,
) -> Option<HypothesisSet> {
    let obs = field.observe(&scene.cloud, &scene.mask).ok()?;
    Some(match protocol.mode {
        EvalMode::Estimate => sample_poses(field, &obs, protocol.n_samples, protocol.n_steps, scene_seed),
        EvalMode::Track => {
            let mut rng = ChaCha8Rng::seed_from_u64(scene_seed ^ 0x7A11);
            let prev = perturbed_pose(&mut rng, &scene.gt_pose, protocol.track_init.0, protocol.track_init.1);
            track_pose(field, &obs, &prev, protocol.n_samples, protocol.n_steps, DEFAULT_JITTER, scene_seed)
        }
    })
}

/// Single representative pose; the flag reports a selection fallback.
pub fn select_pose(hs: &HypothesisSet, scene: &SceneSample, model: &ObjectModel, protocol: &Protocol) -> (Pose, bool) {
    let best_of = |scorer| {
        let s = rank_and_retain(hs, scorer, protocol.top_frac, &scene.cloud, model);
        s.poses[s.best()]
    };
    match protocol.selection {
        Selection::Chamfer => (best_of(Scorer::Chamfer), false),
        Selection::Sdf => (best_of(Scorer::Sdf), false),
        Selection::Cluster => match cluster(hs, &ClusterParams::default()) {
            Ok(c) => (c.representative, false),
            Err(_) => (best_of(Scorer::Chamfer), true),
        },
    }
}

pub fn scene_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

/// Sample → select → score every scene; aggregation is in scene order.
pub fn evaluate<F: VelocityField + ?Sized>(scenes: &[SceneSample], field: &F, protocol: &Protocol) -> MetricReport {
    let models = models_for(scenes);
    let start = Instant::now();
    let per_scene: Vec<(SceneResult, f64)> = scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let model = &models[&s.object];
            let t0 = Instant::now();
            let hs = scene_hypotheses(field, s, protocol, scene_seed(protocol.seed, i));
            let sample_time = t0.elapsed().as_secs_f64();
            match hs {
                Some(hs) => {
                    let (pose, fallback) = select_pose(&hs, s, model, protocol);
                    let (r, t) = pose_error(&pose, &s.gt_pose, &model.symmetry);
                    (SceneResult { object: s.object, rot_err_deg: r, trans_err_m: t, fallback }, sample_time)
                }
                None => (
                    SceneResult { object: s.object, rot_err_deg: 180.0, trans_err_m: f64::INFINITY, fallback: true },
                    sample_time,
                ),
            }
        })
        .collect();
    let wall = start.elapsed().as_secs_f64();
    let sample_time: f64 = per_scene.iter().map(|(_, t)| t).sum();
    let scenes_out: Vec<SceneResult> = per_scene.into_iter().map(|(r, _)| r).collect();
    let all: Vec<&SceneResult> = scenes_out.iter().collect();
    let mut per_object = BTreeMap::new();
    for id in models.keys() {
        let sub: Vec<&SceneResult> = scenes_out.iter().filter(|r| r.object == *id).collect();
        per_object.insert(id.name().to_string(), accuracy_table(&sub));
    }
    let n_poses = (scenes.len() * protocol.n_samples) as f64;
    MetricReport {
        protocol: *protocol,
        n_scenes: scenes.len(),
        accuracy: accuracy_table(&all),
        per_object,
        flagged: scenes_out.iter().filter(|r| r.fallback).count(),
        scenes: scenes_out,
        runtime: Some(Runtime {
            wall_s: wall,
            poses_per_s: n_poses / sample_time.max(1e-12),
            ms_per_step: 1e3 * sample_time / (n_poses * protocol.n_steps as f64).max(1.0),
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub n_steps: usize,
    pub estimate_acc: f64,
    pub track_acc: f64,
    /// Median sampling throughput over the repetitions (poses/s).
    pub poses_per_s: f64,
}

/// Pure sampling throughput (no selection), median over `reps` passes.
pub fn throughput<F: VelocityField + ?Sized>(field: &F, scenes: &[SceneSample], n_samples: usize, n_steps: usize, reps: usize) -> f64 {
    let obs: Vec<_> = scenes.iter().filter_map(|s| field.observe(&s.cloud, &s.mask).ok()).collect();
    let mut rates: Vec<f64> = (0..reps.max(1))
        .map(|r| {
            let t0 = Instant::now();
            for (i, o) in obs.iter().enumerate() {
                std::hint::black_box(sample_poses(field, o, n_samples, n_steps, (r * 1000 + i) as u64));
            }
            (obs.len() * n_samples) as f64 / t0.elapsed().as_secs_f64().max(1e-12)
        })
        .collect();
    rates.sort_by(f64::total_cmp);
    rates[rates.len() / 2]
}

/// Accuracy at 10°5cm for estimation and tracking, plus throughput, per step count.
pub fn steps_ablation<F: VelocityField + ?Sized>(
    scenes: &[SceneSample],
    field: &F,
    steps_list: &[usize],
    base: &Protocol,
    reps: usize,
) -> Vec<AblationRow> {
    steps_list
        .iter()
        .map(|&n_steps| {
            let est = evaluate(scenes, field, &Protocol { n_steps, mode: EvalMode::Estimate, ..*base });
            let trk = evaluate(scenes, field, &Protocol { n_steps, mode: EvalMode::Track, ..*base });
            AblationRow {
                n_steps,
                estimate_acc: est.fraction(10.0, 5.0),
                track_acc: trk.fraction(10.0, 5.0),
                poses_per_s: throughput(field, scenes, base.n_samples, n_steps, reps),
            }
        })
        .collect()
}

/// z-y-x intrinsic Euler angles `(yaw, pitch, roll)` with R = Rz(yaw)·Ry(pitch)·Rx(roll).
pub fn euler_zyx(r: &Rotation) -> (f64, f64, f64) {
    let m = r.matrix();
    let pitch = (-m[(2, 0)]).clamp(-1.0, 1.0).asin();
    let yaw = m[(1, 0)].atan2(m[(0, 0)]);
    let roll = m[(2, 1)].atan2(m[(2, 2)]);
    (yaw, pitch, roll)
}

/// Mollweide forward projection on a unit-radius sphere.
pub fn mollweide(lat: f64, lon: f64) -> (f64, f64) {
    let target = std::f64::consts::PI * lat.sin();
    let mut theta = lat;
    if (lat.abs() - std::f64::consts::FRAC_PI_2).abs() > 1e-12 {
        for _ in 0..100 {
            let f = 2.0 * theta + (2.0 * theta).sin() - target;
            let df = 2.0 + 2.0 * (2.0 * theta).cos();
            if df.abs() < 1e-300 {
                break;
            }
            let step = f / df;
            theta -= step;
            if step.abs() < 1e-10 {
                break;
            }
        }
    }
    let sq2 = std::f64::consts::SQRT_2;
    (2.0 * sq2 / std::f64::consts::PI * lon * theta.cos(), sq2 * theta.sin())
}

fn hue_rgb(h: f64) -> [u8; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    let (r, g, b) = match h as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
}

/// Writes a plain PPM of the rotations splatted on a Mollweide ellipse
/// (latitude = pitch, longitude = roll, hue = yaw) and a CSV of the same data.
pub fn viz_mollweide(rotations: &[Rotation], ppm_path: &Path, csv_path: &Path) -> std::io::Result<()> {
    const W: usize = 400;
    const H: usize = 200;
    let sq2 = std::f64::consts::SQRT_2;
    let to_px = |x: f64, y: f64| -> (i64, i64) {
        let px = ((x / (2.0 * sq2) + 1.0) * 0.5 * (W - 1) as f64).round() as i64;
        let py = ((1.0 - y / sq2) * 0.5 * (H - 1) as f64).round() as i64;
        (px, py)
    };
    let mut img = vec![[255u8; 3]; W * H];
    for k in 0..2000 {
        let a = k as f64 / 2000.0 * std::f64::consts::TAU;
        let (px, py) = to_px(2.0 * sq2 * a.cos(), sq2 * a.sin());
        if (0..W as i64).contains(&px) && (0..H as i64).contains(&py) {
            img[py as usize * W + px as usize] = [160, 160, 160];
        }
    }
    let mut csv = String::from("# euler=zyx_intrinsic lon=roll lat=pitch hue=yaw\nlon_deg,lat_deg,yaw_deg\n");
    for r in rotations {
        let (yaw, pitch, roll) = euler_zyx(r);
        let (x, y) = mollweide(pitch, roll);
        let _ = writeln!(csv, "{:.6},{:.6},{:.6}", roll.to_degrees(), pitch.to_degrees(), yaw.to_degrees());
        let color = hue_rgb(yaw / std::f64::consts::TAU);
        let (cx, cy) = to_px(x, y);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (px, py) = (cx + dx, cy + dy);
                if (0..W as i64).contains(&px) && (0..H as i64).contains(&py) {
                    img[py as usize * W + px as usize] = color;
                }
            }
        }
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(ppm_path)?);
    writeln!(f, "P3\n{W} {H}\n255")?;
    for row in img.chunks(W) {
        let line: Vec<String> = row.iter().map(|c| format!("{} {} {}", c[0], c[1], c[2])).collect();
        writeln!(f, "{}", line.join(" "))?;
    }
    f.flush()?;
    std::fs::write(csv_path, csv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::TangentVec;
    use crate::net::Observation;
    use crate::sampler::BoundField;
    use crate::scene::{generate_scenes, RenderConfig};
    use crate::train::target_velocity;
    use nalgebra::Vector3;

    #[test]
    fn pose_error_examples() {
        let gt = Pose::new(Rotation::rot_x(0.4), Vector3::new(0.0, 0.0, 0.5));
        let cyl = make_object(ObjectId::Cylinder);
        let prism = make_object(ObjectId::SquarePrism);
        assert_eq!(pose_error(&gt, &gt, &SymmetrySet::trivial()), (0.0, 0.0));
        let turned = Pose::new(gt.rot.compose(&Rotation::rot_z(10f64.to_radians())), gt.trans);
        assert!(pose_error(&turned, &gt, &cyl.symmetry).0 < 1e-9);
        let turned = Pose::new(gt.rot.compose(&Rotation::rot_z(45f64.to_radians())), gt.trans);
        assert!((pose_error(&turned, &gt, &prism.symmetry).0 - 45.0).abs() < 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let a = Rotation::random(&mut rng);
            let b = Rotation::random(&mut rng);
            assert_eq!(rotation_error(&SymmetrySet::trivial(), &a, &b), geodesic_dist(&a, &b));
        }
    }

    /// Looks up the ground truth by the scene's first raw point and flows straight to it.
    struct OracleField(Vec<(Vector3<f64>, Pose)>);

    impl VelocityField for OracleField {
        fn bind<'a>(&'a self, obs: &'a Observation) -> BoundField<'a> {
            let gt = self.0.iter().find(|(p, _)| *p == obs.raw_cloud[0]).expect("known scene").1;
            Box::new(move |pose: &Pose, t: f64| -> TangentVec { target_velocity(pose, &gt, 0.0).scaled(1.0 / (1.0 - t)) })
        }
    }

    #[test]
    fn oracle_field_scores_perfectly_and_deterministically() {
        let scenes = generate_scenes(&[ObjectId::Mug, ObjectId::SquarePrism], 6, 3, &RenderConfig::default());
        let oracle = OracleField(scenes.iter().map(|s| (s.cloud[0], s.gt_pose)).collect());
        for mode in [EvalMode::Estimate, EvalMode::Track] {
            let p = Protocol { n_samples: 8, n_steps: 1, mode, ..Protocol::default() };
            let mut a = evaluate(&scenes, &oracle, &p);
            assert!(a.accuracy.iter().all(|x| x.fraction == 1.0), "{a:?}");
            let mut b = evaluate(&scenes, &oracle, &p);
            a.runtime = None;
            b.runtime = None;
            assert_eq!(a.to_json(), b.to_json());
            assert!(a.fraction(10.0, 5.0) >= a.fraction(5.0, 5.0));
        }
    }

    #[test]
    fn mollweide_landmarks() {
        assert_eq!(mollweide(0.0, 0.0), (0.0, 0.0));
        let (x, y) = mollweide(std::f64::consts::FRAC_PI_2, 0.0);
        assert!(x.abs() < 1e-12 && (y - std::f64::consts::SQRT_2).abs() < 1e-12);
        let (_, y) = mollweide(-std::f64::consts::FRAC_PI_2, 1.0);
        assert!((y + std::f64::consts::SQRT_2).abs() < 1e-12);
        let (x, _) = mollweide(0.0, std::f64::consts::PI);
        assert!((x - 2.0 * std::f64::consts::SQRT_2).abs() < 1e-12);
        let (yaw, pitch, roll) = euler_zyx(&Rotation::identity());
        assert_eq!((yaw, pitch, roll), (0.0, 0.0, 0.0));
        let r = Rotation::rot_z(0.3).compose(&Rotation::rot_y(-0.2)).compose(&Rotation::rot_x(1.1));
        let (yaw, pitch, roll) = euler_zyx(&r);
        assert!((yaw - 0.3).abs() < 1e-12 && (pitch + 0.2).abs() < 1e-12 && (roll - 1.1).abs() < 1e-12);
    }

    #[test]
    fn viz_writes_one_row_per_rotation() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rs: Vec<Rotation> = (0..37).map(|_| Rotation::random(&mut rng)).collect();
        let (ppm, csv) = (dir.path().join("m.ppm"), dir.path().join("m.csv"));
        viz_mollweide(&rs, &ppm, &csv).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 38);
        assert!(std::fs::read_to_string(&ppm).unwrap().starts_with("P3\n400 200\n255\n"));
    }
}
