//! Synthetic world: primitive objects with analytic SDFs and known symmetry
//! groups, a z-buffered pinhole depth sensor, and dataset persistence.

use std::f64::consts::PI;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lie::{geodesic_dist, Pose, PoseJson, Rotation};

pub const N_SURFACE_POINTS: usize = 4096;
const SURFACE_TOL: f64 = 1e-4;
/// Depth slack when deciding whether a surface sample is hidden behind the z-buffer.
const VISIBILITY_TOL: f64 = 0.015;
const MIN_OCCUPIED_CELLS: usize = 16;

pub const PART_BODY: u8 = 0;
pub const PART_HANDLE: u8 = 1;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("object not visible: only {0} occupied cells")]
    NotVisible(usize),
    #[error("object point behind the camera (depth {0:.4} m)")]
    BehindCamera(f64),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed dataset: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum ObjectId {
    Cylinder,
    SquarePrism,
    Mug,
    Sphere,
}

impl ObjectId {
    pub const ALL: [ObjectId; 4] = [ObjectId::Cylinder, ObjectId::SquarePrism, ObjectId::Mug, ObjectId::Sphere];

    pub fn name(&self) -> &'static str {
        match self {
            ObjectId::Cylinder => "cylinder",
            ObjectId::SquarePrism => "square_prism",
            ObjectId::Mug => "mug",
            ObjectId::Sphere => "sphere",
        }
    }
}

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ObjectId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        ObjectId::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| format!("unknown object '{s}' (expected cylinder, square_prism, mug or sphere)"))
    }
}

/// Finite set of object-frame rotations under which the shape is unchanged.
#[derive(Debug, Clone)]
pub struct SymmetrySet {
    pub rotations: Vec<Rotation>,
}

impl SymmetrySet {
    pub fn trivial() -> Self {
        SymmetrySet { rotations: vec![Rotation::identity()] }
    }

    /// `n` rotations about z, optionally doubled by a half turn about x.
    pub fn dihedral_z(n: usize, with_flip: bool) -> Self {
        let mut rotations = Vec::new();
        for k in 0..n {
            let yaw = Rotation::rot_z(2.0 * PI * k as f64 / n as f64);
            rotations.push(yaw);
            if with_flip {
                rotations.push(yaw.compose(&Rotation::rot_x(PI)));
            }
        }
        SymmetrySet { rotations }
    }

    /// Rotation group of the icosahedron (60 elements).
    pub fn icosahedral() -> Self {
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        let gens = [
            Rotation::about_axis(&Vector3::new(0.0, 1.0, phi), 2.0 * PI / 5.0),
            Rotation::rot_x(PI),
            Rotation::about_axis(&Vector3::new(1.0, 1.0, 1.0), 2.0 * PI / 3.0),
        ];
        Self::closure(&gens)
    }

    fn closure(gens: &[Rotation]) -> Self {
        let mut rotations = vec![Rotation::identity()];
        let mut frontier = vec![Rotation::identity()];
        while let Some(r) = frontier.pop() {
            for g in gens {
                let c = r.compose(g).renormalized();
                if !rotations.iter().any(|e| geodesic_dist(e, &c) < 1e-7) {
                    rotations.push(c);
                    frontier.push(c);
                }
            }
        }
        SymmetrySet { rotations }
    }

    pub fn len(&self) -> usize {
        self.rotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rotations.is_empty()
    }

    pub fn contains(&self, r: &Rotation, tol: f64) -> bool {
        self.rotations.iter().any(|e| geodesic_dist(e, r) < tol)
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Cylinder { radius: f64, half_height: f64 },
    Box { half: Vector3<f64> },
    Sphere { radius: f64 },
    Mug,
}

// Mug geometry: open cup with a torus handle on +x.
const MUG_R: f64 = 0.04;
const MUG_HALF_H: f64 = 0.05;
const MUG_WALL: f64 = 0.004;
const MUG_FLOOR: f64 = 0.005;
const HANDLE_CENTER: [f64; 3] = [0.05, 0.0, -0.01];
const HANDLE_MAJOR: f64 = 0.03;
const HANDLE_MINOR: f64 = 0.008;

fn sdf_cylinder(p: &Vector3<f64>, radius: f64, half_height: f64, z_center: f64) -> f64 {
    let dx = (p.x * p.x + p.y * p.y).sqrt() - radius;
    let dz = (p.z - z_center).abs() - half_height;
    dx.max(dz).min(0.0) + (dx.max(0.0).powi(2) + dz.max(0.0).powi(2)).sqrt()
}

fn sdf_box(p: &Vector3<f64>, half: &Vector3<f64>) -> f64 {
    let q = p.abs() - half;
    let outside = Vector3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
    outside + q.x.max(q.y).max(q.z).min(0.0)
}

fn mug_cup(p: &Vector3<f64>) -> f64 {
    let outer = sdf_cylinder(p, MUG_R, MUG_HALF_H, 0.0);
    let cav_bottom = -MUG_HALF_H + MUG_FLOOR;
    let cav_top = MUG_HALF_H + 0.02;
    let cavity = sdf_cylinder(p, MUG_R - MUG_WALL, 0.5 * (cav_top - cav_bottom), 0.5 * (cav_top + cav_bottom));
    outer.max(-cavity)
}

fn mug_torus(p: &Vector3<f64>) -> f64 {
    let dx = p.x - HANDLE_CENTER[0];
    let dz = p.z - HANDLE_CENTER[2];
    let ring = (dx * dx + dz * dz).sqrt() - HANDLE_MAJOR;
    (ring * ring + (p.y - HANDLE_CENTER[1]).powi(2)).sqrt() - HANDLE_MINOR
}

fn mug_handle(p: &Vector3<f64>) -> f64 {
    // Only the part of the torus outside the cup's outer wall.
    mug_torus(p).max(-sdf_cylinder(p, MUG_R, MUG_HALF_H, 0.0))
}

impl Shape {
    fn sdf(&self, p: &Vector3<f64>) -> f64 {
        match *self {
            Shape::Cylinder { radius, half_height } => sdf_cylinder(p, radius, half_height, 0.0),
            Shape::Box { ref half } => sdf_box(p, half),
            Shape::Sphere { radius } => p.norm() - radius,
            Shape::Mug => mug_cup(p).min(mug_handle(p)),
        }
    }

    /// Axis-aligned bounding box of the solid.
    fn bbox(&self) -> (Vector3<f64>, Vector3<f64>) {
        match *self {
            Shape::Cylinder { radius, half_height } => {
                let h = Vector3::new(radius, radius, half_height);
                (-h, h)
            }
            Shape::Box { half } => (-half, half),
            Shape::Sphere { radius } => (Vector3::repeat(-radius), Vector3::repeat(radius)),
            Shape::Mug => {
                let x_max = HANDLE_CENTER[0] + HANDLE_MAJOR + HANDLE_MINOR;
                (Vector3::new(-MUG_R, -MUG_R, -MUG_HALF_H), Vector3::new(x_max, MUG_R, MUG_HALF_H))
            }
        }
    }
}

/// Rigid primitive with dense surface samples and an analytic SDF.
#[derive(Debug, Clone)]
pub struct ObjectModel {
    pub id: ObjectId,
    pub surface_points: Vec<Vector3<f64>>,
    /// Part label per surface sample (`PART_BODY` / `PART_HANDLE`).
    pub parts: Vec<u8>,
    pub symmetry: SymmetrySet,
    pub diameter: f64,
    shape: Shape,
}

impl ObjectModel {
    pub fn sdf(&self, p: &Vector3<f64>) -> f64 {
        self.shape.sdf(p)
    }

    pub fn bbox(&self) -> (Vector3<f64>, Vector3<f64>) {
        self.shape.bbox()
    }

    /// Center and uniform scale taking the bounding box into `[-1, 1]³`.
    pub fn normalization(&self) -> (Vector3<f64>, f64) {
        let (lo, hi) = self.bbox();
        let center = (lo + hi) * 0.5;
        let half = (hi - lo) * 0.5;
        (center, half.max())
    }

    pub fn surface_centroid(&self) -> Vector3<f64> {
        self.surface_points.iter().sum::<Vector3<f64>>() / self.surface_points.len() as f64
    }
}

fn sample_disk<R: Rng>(rng: &mut R, r_in: f64, r_out: f64) -> (f64, f64) {
    let r = (r_in * r_in + rng.random::<f64>() * (r_out * r_out - r_in * r_in)).sqrt();
    let a = rng.random::<f64>() * 2.0 * PI;
    (r * a.cos(), r * a.sin())
}

type Sampler = Box<dyn Fn(&mut ChaCha8Rng) -> (Vector3<f64>, u8)>;

fn weighted_pick<R: Rng>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

fn surface_samplers(shape: Shape) -> Vec<(f64, Sampler)> {
    match shape {
        Shape::Cylinder { radius, half_height } => vec![
            (
                2.0 * PI * radius * 2.0 * half_height,
                Box::new(move |rng: &mut ChaCha8Rng| {
                    let a = rng.random::<f64>() * 2.0 * PI;
                    let z = (rng.random::<f64>() * 2.0 - 1.0) * half_height;
                    (Vector3::new(radius * a.cos(), radius * a.sin(), z), PART_BODY)
                }),
            ),
            (
                2.0 * PI * radius * radius,
                Box::new(move |rng: &mut ChaCha8Rng| {
                    let (x, y) = sample_disk(rng, 0.0, radius);
                    let z = if rng.random::<bool>() { half_height } else { -half_height };
                    (Vector3::new(x, y, z), PART_BODY)
                }),
            ),
        ],
        Shape::Box { half } => {
            let mut v: Vec<(f64, Sampler)> = Vec::new();
            for axis in 0..3 {
                let (u, w) = ((axis + 1) % 3, (axis + 2) % 3);
                let area = 2.0 * (2.0 * half[u]) * (2.0 * half[w]);
                v.push((
                    area,
                    Box::new(move |rng: &mut ChaCha8Rng| {
                        let mut p = Vector3::zeros();
                        p[axis] = if rng.random::<bool>() { half[axis] } else { -half[axis] };
                        p[u] = (rng.random::<f64>() * 2.0 - 1.0) * half[u];
                        p[w] = (rng.random::<f64>() * 2.0 - 1.0) * half[w];
                        (p, PART_BODY)
                    }),
                ));
            }
            v
        }
        Shape::Sphere { radius } => vec![(
            4.0 * PI * radius * radius,
            Box::new(move |rng: &mut ChaCha8Rng| {
                let d = crate::lie::random_unit(rng);
                (d * radius, PART_BODY)
            }),
        )],
        Shape::Mug => {
            let r_in = MUG_R - MUG_WALL;
            let floor = -MUG_HALF_H + MUG_FLOOR;
            vec![
                (
                    2.0 * PI * MUG_R * 2.0 * MUG_HALF_H,
                    Box::new(|rng: &mut ChaCha8Rng| {
                        let a = rng.random::<f64>() * 2.0 * PI;
                        let z = (rng.random::<f64>() * 2.0 - 1.0) * MUG_HALF_H;
                        (Vector3::new(MUG_R * a.cos(), MUG_R * a.sin(), z), PART_BODY)
                    }),
                ),
                (
                    PI * MUG_R * MUG_R,
                    Box::new(|rng: &mut ChaCha8Rng| {
                        let (x, y) = sample_disk(rng, 0.0, MUG_R);
                        (Vector3::new(x, y, -MUG_HALF_H), PART_BODY)
                    }),
                ),
                (
                    PI * (MUG_R * MUG_R - r_in * r_in),
                    Box::new(move |rng: &mut ChaCha8Rng| {
                        let (x, y) = sample_disk(rng, r_in, MUG_R);
                        (Vector3::new(x, y, MUG_HALF_H), PART_BODY)
                    }),
                ),
                (
                    2.0 * PI * r_in * (MUG_HALF_H - floor),
                    Box::new(move |rng: &mut ChaCha8Rng| {
                        let a = rng.random::<f64>() * 2.0 * PI;
                        let z = floor + rng.random::<f64>() * (MUG_HALF_H - floor);
                        (Vector3::new(r_in * a.cos(), r_in * a.sin(), z), PART_BODY)
                    }),
                ),
                (
                    PI * r_in * r_in,
                    Box::new(move |rng: &mut ChaCha8Rng| {
                        let (x, y) = sample_disk(rng, 0.0, r_in);
                        (Vector3::new(x, y, floor), PART_BODY)
                    }),
                ),
                (
                    4.0 * PI * PI * HANDLE_MAJOR * HANDLE_MINOR,
                    Box::new(|rng: &mut ChaCha8Rng| {
                        // Area-uniform on the torus: accept the tube angle with weight (R + r cos v).
                        loop {
                            let u = rng.random::<f64>() * 2.0 * PI;
                            let v = rng.random::<f64>() * 2.0 * PI;
                            let w = (HANDLE_MAJOR + HANDLE_MINOR * v.cos()) / (HANDLE_MAJOR + HANDLE_MINOR);
                            if rng.random::<f64>() < w {
                                let rr = HANDLE_MAJOR + HANDLE_MINOR * v.cos();
                                let p = Vector3::new(
                                    HANDLE_CENTER[0] + rr * u.cos(),
                                    HANDLE_CENTER[1] + HANDLE_MINOR * v.sin(),
                                    HANDLE_CENTER[2] + rr * u.sin(),
                                );
                                return (p, PART_HANDLE);
                            }
                        }
                    }),
                ),
            ]
        }
    }
}

/// Builds one of the four primitives with 4096 area-uniform surface samples.
pub fn make_object(id: ObjectId) -> ObjectModel {
    let (shape, symmetry) = match id {
        ObjectId::Cylinder => {
            (Shape::Cylinder { radius: 0.04, half_height: 0.06 }, SymmetrySet::dihedral_z(36, true))
        }
        ObjectId::SquarePrism => {
            (Shape::Box { half: Vector3::new(0.03, 0.03, 0.06) }, SymmetrySet::dihedral_z(4, true))
        }
        ObjectId::Mug => (Shape::Mug, SymmetrySet::trivial()),
        ObjectId::Sphere => (Shape::Sphere { radius: 0.05 }, SymmetrySet::icosahedral()),
    };
    let samplers = surface_samplers(shape);
    let weights: Vec<f64> = samplers.iter().map(|(a, _)| *a).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_0000 + id as u64);
    let mut surface_points = Vec::with_capacity(N_SURFACE_POINTS);
    let mut parts = Vec::with_capacity(N_SURFACE_POINTS);
    while surface_points.len() < N_SURFACE_POINTS {
        let k = weighted_pick(&mut rng, &weights);
        let (p, part) = (samplers[k].1)(&mut rng);
        if shape.sdf(&p).abs() > SURFACE_TOL {
            continue;
        }
        if let Shape::Mug = shape {
            // Drop wall samples buried in the handle and handle samples inside the wall.
            let buried = match part {
                PART_HANDLE => sdf_cylinder(&p, MUG_R, MUG_HALF_H, 0.0) < 0.0,
                _ => mug_torus(&p) < 0.0,
            };
            if buried {
                continue;
            }
        }
        if let Shape::Cylinder { .. } = shape {
            // Quarter-turn orbits keep the sample set itself symmetric about z.
            for q in [p, Vector3::new(-p.y, p.x, p.z), Vector3::new(-p.x, -p.y, p.z), Vector3::new(p.y, -p.x, p.z)] {
                surface_points.push(q);
                parts.push(part);
            }
            continue;
        }
        surface_points.push(p);
        parts.push(part);
    }
    let diameter = max_pairwise_distance(&surface_points);
    ObjectModel { id, surface_points, parts, symmetry, diameter, shape }
}

pub fn max_pairwise_distance(pts: &[Vector3<f64>]) -> f64 {
    let mut best = 0.0f64;
    for (i, a) in pts.iter().enumerate() {
        for b in &pts[i + 1..] {
            best = best.max((a - b).norm_squared());
        }
    }
    best.sqrt()
}

#[derive(Debug, Clone, Copy)]
pub struct RenderConfig {
    pub res: usize,
    pub fov_deg: f64,
    pub noise_sigma: f64,
    pub subsample: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig { res: 64, fov_deg: 60.0, noise_sigma: 0.002, subsample: 256 }
    }
}

/// One rendered observation with its ground truth.
#[derive(Debug, Clone)]
pub struct SceneSample {
    pub object: ObjectId,
    /// Object → camera.
    pub gt_pose: Pose,
    /// Camera → world.
    pub camera: Pose,
    /// Observed points in the camera frame.
    pub cloud: Vec<Vector3<f64>>,
    pub mask: Vec<bool>,
    pub occlusion: f64,
}

/// Result of z-buffering surface samples, before noise and subsampling.
#[derive(Debug, Clone)]
pub struct VisibleSet {
    /// Surface-sample index of the nearest point in each occupied cell.
    pub cell_winners: Vec<usize>,
    /// Per surface sample: not hidden behind the z-buffer.
    pub visible: Vec<bool>,
}

/// Z-buffers the model's surface samples; `obj_to_cam` maps object to camera frame.
pub fn zbuffer(model: &ObjectModel, obj_to_cam: &Pose, cfg: &RenderConfig) -> Result<VisibleSet, SceneError> {
    let res = cfg.res;
    let f = (res as f64 / 2.0) / (cfg.fov_deg.to_radians() / 2.0).tan();
    let c = res as f64 / 2.0;
    let mut depth = vec![f64::INFINITY; res * res];
    let mut winner = vec![usize::MAX; res * res];
    let mut cells = vec![usize::MAX; model.surface_points.len()];
    let mut depths = vec![0.0; model.surface_points.len()];
    for (i, p) in model.surface_points.iter().enumerate() {
        let q = obj_to_cam.transform_point(p);
        if q.z <= 1e-6 {
            return Err(SceneError::BehindCamera(q.z));
        }
        let u = f * q.x / q.z + c;
        let v = f * q.y / q.z + c;
        if !(u >= 0.0 && v >= 0.0 && u < res as f64 && v < res as f64) {
            continue;
        }
        let cell = v as usize * res + u as usize;
        cells[i] = cell;
        depths[i] = q.z;
        if q.z < depth[cell] {
            depth[cell] = q.z;
            winner[cell] = i;
        }
    }
    let cell_winners: Vec<usize> = winner.iter().copied().filter(|&w| w != usize::MAX).collect();
    let visible = cells
        .iter()
        .zip(&depths)
        .map(|(&cell, &z)| cell != usize::MAX && z <= depth[cell] + VISIBILITY_TOL)
        .collect();
    Ok(VisibleSet { cell_winners, visible })
}

/// Renders a partial, noisy point cloud of `model` placed at `gt_pose`
/// (object → world) as seen from `camera` (camera → world).
pub fn render_depth<R: Rng>(
    model: &ObjectModel,
    gt_pose: &Pose,
    camera: &Pose,
    cfg: &RenderConfig,
    rng: &mut R,
) -> Result<SceneSample, SceneError> {
    let obj_to_cam = camera.inverse().compose(gt_pose);
    let vis = zbuffer(model, &obj_to_cam, cfg)?;
    let n_cells = vis.cell_winners.len();
    if n_cells < MIN_OCCUPIED_CELLS {
        return Err(SceneError::NotVisible(n_cells));
    }
    let k = cfg.subsample;
    let chosen: Vec<usize> = if n_cells >= k {
        sample_indices(rng, n_cells, k).into_iter().collect()
    } else {
        let mut idx: Vec<usize> = (0..n_cells).collect();
        while idx.len() < k {
            idx.push(rng.random_range(0..n_cells));
        }
        idx
    };
    let cloud = chosen
        .into_iter()
        .map(|c| {
            let p = obj_to_cam.transform_point(&model.surface_points[vis.cell_winners[c]]);
            p + truncated_noise(rng, cfg.noise_sigma)
        })
        .collect();
    let n_vis = vis.visible.iter().filter(|&&v| v).count();
    let occlusion = 1.0 - n_vis as f64 / model.surface_points.len() as f64;
    Ok(SceneSample {
        object: model.id,
        gt_pose: obj_to_cam,
        camera: *camera,
        cloud,
        mask: vec![true; k],
        occlusion,
    })
}

/// Isotropic Gaussian noise, rejected beyond a norm of 2σ.
fn truncated_noise<R: Rng>(rng: &mut R, sigma: f64) -> Vector3<f64> {
    if sigma <= 0.0 {
        return Vector3::zeros();
    }
    loop {
        let n = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        ) * sigma;
        if n.norm() <= 2.0 * sigma {
            return n;
        }
    }
}

pub const STANDOFF: f64 = 0.5;
pub const TRANSLATION_JITTER: f64 = 0.1;

/// Haar-uniform rotation, translation uniform in a ±0.1 m cube around a 0.5 m standoff.
pub fn random_gt_pose<R: Rng>(rng: &mut R) -> Pose {
    let rot = Rotation::random(rng);
    let j = TRANSLATION_JITTER;
    let t = Vector3::new(
        rng.random_range(-j..=j),
        rng.random_range(-j..=j),
        STANDOFF + rng.random_range(-j..=j),
    );
    Pose::new(rot, t)
}

/// Scene `index` of a dataset; depends only on `(seed, index)`.
pub fn generate_scene(models: &[ObjectModel], seed: u64, index: usize, cfg: &RenderConfig) -> SceneSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let model = &models[index % models.len()];
    loop {
        let gt = random_gt_pose(&mut rng);
        if let Ok(s) = render_depth(model, &gt, &Pose::identity(), cfg, &mut rng) {
            return s;
        }
    }
}

pub fn generate_scenes(objects: &[ObjectId], n_scenes: usize, seed: u64, cfg: &RenderConfig) -> Vec<SceneSample> {
    let models: Vec<ObjectModel> = objects.iter().map(|&o| make_object(o)).collect();
    (0..n_scenes).map(|i| generate_scene(&models, seed, i, cfg)).collect()
}

pub const DATASET_MAGIC: &str = "PFDS1\n";

/// Rounds to 7 significant digits.
pub fn round7(x: f64) -> f64 {
    format!("{x:.6e}").parse().unwrap_or(x)
}

#[derive(Serialize, Deserialize)]
struct SceneLine {
    obj: ObjectId,
    gt: PoseJson,
    cam: PoseJson,
    cloud: Vec<[f64; 3]>,
    mask: Vec<bool>,
    occ: f64,
}

fn pose_json7(p: &Pose) -> PoseJson {
    let j = PoseJson::from(*p);
    PoseJson { q: j.q.map(round7), t: j.t.map(round7) }
}

pub fn write_dataset(path: &Path, scenes: &[SceneSample]) -> Result<(), SceneError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(DATASET_MAGIC.as_bytes())?;
    for s in scenes {
        let line = SceneLine {
            obj: s.object,
            gt: pose_json7(&s.gt_pose),
            cam: pose_json7(&s.camera),
            cloud: s.cloud.iter().map(|p| [round7(p.x), round7(p.y), round7(p.z)]).collect(),
            mask: s.mask.clone(),
            occ: round7(s.occlusion),
        };
        serde_json::to_writer(&mut w, &line).map_err(|e| SceneError::Format(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<SceneSample>, SceneError> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = String::new();
    r.read_line(&mut magic)?;
    if magic != DATASET_MAGIC {
        return Err(SceneError::Format("bad magic".into()));
    }
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let l: SceneLine =
            serde_json::from_str(&line).map_err(|e| SceneError::Format(format!("line {}: {e}", n + 2)))?;
        if l.cloud.len() != l.mask.len() {
            return Err(SceneError::Format(format!("line {}: cloud/mask length mismatch", n + 2)));
        }
        let to_pose = |j: PoseJson| Pose::try_from(j).map_err(|e| SceneError::Format(e.to_string()));
        out.push(SceneSample {
            object: l.obj,
            gt_pose: to_pose(l.gt)?,
            camera: to_pose(l.cam)?,
            cloud: l.cloud.iter().map(|p| Vector3::new(p[0], p[1], p[2])).collect(),
            mask: l.mask,
            occlusion: l.occ,
        });
    }
    Ok(out)
}

/// Generates and writes a dataset; objects are assigned round-robin.
pub fn make_dataset(objects: &[ObjectId], n_scenes: usize, seed: u64, out_path: &Path) -> Result<Vec<SceneSample>, SceneError> {
    if n_scenes == 0 || objects.is_empty() {
        return Err(SceneError::Format("need at least one scene and one object".into()));
    }
    let scenes = generate_scenes(objects, n_scenes, seed, &RenderConfig::default());
    write_dataset(out_path, &scenes)?;
    Ok(scenes)
}

/// Camera pose at `position` whose optical (+z) axis points at `target`.
pub fn look_at(position: &Vector3<f64>, target: &Vector3<f64>) -> Pose {
    let z = (target - position).normalize();
    let up = if z.z.abs() < 0.95 { Vector3::z() } else { Vector3::x() };
    let x = up.cross(&z).normalize();
    let y = z.cross(&x);
    let m = nalgebra::Matrix3::from_columns(&[x, y, z]);
    Pose::new(Rotation::from_matrix_unchecked(m), *position)
}

/// Upright object at the world origin turned by `yaw` about +z, with a camera
/// at `STANDOFF` on the side facing away from its +x axis (the mug handle),
/// raised by `elevation`. Returns (object → world, camera → world).
pub fn handle_occluded_setup(yaw: f64, elevation: f64) -> (Pose, Pose) {
    let gt = Pose::new(Rotation::rot_z(yaw), Vector3::zeros());
    let dir = Vector3::new(-yaw.cos() * elevation.cos(), -yaw.sin() * elevation.cos(), elevation.sin());
    (gt, look_at(&(dir * STANDOFF), &Vector3::zeros()))
}

/// Fraction of the surface samples with part label `part` that survive the z-buffer.
pub fn visible_part_fraction(
    model: &ObjectModel,
    gt_world: &Pose,
    camera: &Pose,
    cfg: &RenderConfig,
    part: u8,
) -> Result<f64, SceneError> {
    let vis = zbuffer(model, &camera.inverse().compose(gt_world), cfg)?;
    let (mut seen, mut total) = (0usize, 0usize);
    for (v, &p) in vis.visible.iter().zip(&model.parts) {
        if p == part {
            total += 1;
            seen += *v as usize;
        }
    }
    Ok(if total == 0 { 0.0 } else { seen as f64 / total as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_sdf_landmarks() {
        let cyl = make_object(ObjectId::Cylinder);
        assert!((cyl.sdf(&Vector3::zeros()) + 0.04).abs() < 1e-15);
        let sph = make_object(ObjectId::Sphere);
        assert!((sph.sdf(&Vector3::new(0.1, 0.0, 0.0)) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn surface_points_on_zero_level_set_and_diameter() {
        for id in ObjectId::ALL {
            let m = make_object(id);
            assert_eq!(m.surface_points.len(), N_SURFACE_POINTS);
            assert!(m.surface_points.iter().all(|p| m.sdf(p).abs() < 1e-3), "{id}");
            let analytic = match id {
                ObjectId::Cylinder => (0.08f64.powi(2) + 0.12f64.powi(2)).sqrt(),
                ObjectId::SquarePrism => (0.06f64.powi(2) * 2.0 + 0.12f64.powi(2)).sqrt(),
                ObjectId::Sphere => 0.1,
                ObjectId::Mug => m.diameter,
            };
            assert!((m.diameter - analytic).abs() / analytic < 0.01, "{id}: {} vs {analytic}", m.diameter);
        }
    }

    #[test]
    fn symmetry_groups_are_closed() {
        for (id, n) in [
            (ObjectId::SquarePrism, 8),
            (ObjectId::Cylinder, 72),
            (ObjectId::Mug, 1),
            (ObjectId::Sphere, 60),
        ] {
            let s = make_object(id).symmetry;
            assert_eq!(s.len(), n, "{id}");
            assert!(s.contains(&Rotation::identity(), 1e-12));
            for a in &s.rotations {
                for b in &s.rotations {
                    assert!(s.contains(&a.compose(b), 1e-7), "{id}");
                }
            }
        }
    }

    #[test]
    fn symmetries_leave_the_sdf_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for id in [ObjectId::Cylinder, ObjectId::SquarePrism, ObjectId::Sphere] {
            let m = make_object(id);
            for s in &m.symmetry.rotations {
                for _ in 0..20 {
                    let p = crate::lie::random_in_ball(&mut rng, 0.1);
                    assert!((m.sdf(&p) - m.sdf(&s.apply(&p))).abs() < 1e-12, "{id}");
                }
            }
        }
    }

    #[test]
    fn noiseless_render_lies_on_surface() {
        let m = make_object(ObjectId::SquarePrism);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = RenderConfig { noise_sigma: 0.0, ..Default::default() };
        let gt = random_gt_pose(&mut rng);
        let s = render_depth(&m, &gt, &Pose::identity(), &cfg, &mut rng).unwrap();
        assert_eq!(s.cloud.len(), 256);
        for p in &s.cloud {
            let d = m.surface_points.iter().map(|q| (gt.transform_point(q) - p).norm()).fold(f64::INFINITY, f64::min);
            assert!(d < 1e-9);
        }
    }

    #[test]
    fn noisy_render_within_two_sigma() {
        let m = make_object(ObjectId::Cylinder);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = RenderConfig::default();
        let gt = random_gt_pose(&mut rng);
        let s = render_depth(&m, &gt, &Pose::identity(), &cfg, &mut rng).unwrap();
        for p in &s.cloud {
            let local = gt.inverse().transform_point(p);
            assert!(m.sdf(&local).abs() <= 2.0 * cfg.noise_sigma + 1e-12);
        }
        assert!((0.0..=1.0).contains(&s.occlusion));
    }

    #[test]
    fn sphere_visible_fraction_matches_hemisphere_cap() {
        let m = make_object(ObjectId::Sphere);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt = Pose::from_translation(Vector3::new(0.0, 0.0, 0.5));
        let s = render_depth(&m, &gt, &Pose::identity(), &RenderConfig::default(), &mut rng).unwrap();
        // A sphere of radius r seen from distance d exposes a cap of area fraction (1 - r/d) / 2.
        let analytic_occ = 1.0 - (1.0 - 0.05 / 0.5) / 2.0;
        assert!((0.4..=0.6).contains(&s.occlusion), "{}", s.occlusion);
        assert!((s.occlusion - analytic_occ).abs() < 0.03, "{} vs {analytic_occ}", s.occlusion);
    }

    #[test]
    fn mug_handle_hidden_when_facing_away() {
        let m = make_object(ObjectId::Mug);
        // Mug upright in the world, handle (+x) pointing away from a camera on the -x side.
        let gt = Pose::identity();
        let cam = look_at(&Vector3::new(-0.5, 0.0, 0.0), &Vector3::zeros());
        let vis = zbuffer(&m, &cam.inverse().compose(&gt), &RenderConfig::default()).unwrap();
        let handle_visible =
            (0..m.parts.len()).filter(|&i| m.parts[i] == PART_HANDLE && vis.visible[i]).count();
        assert_eq!(handle_visible, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = render_depth(&m, &gt, &cam, &RenderConfig::default(), &mut rng).unwrap();
        assert!(s.occlusion > 0.2);
        // Facing the camera the handle shows up.
        let cam2 = look_at(&Vector3::new(0.5, 0.0, 0.0), &Vector3::zeros());
        let vis2 = zbuffer(&m, &cam2.inverse().compose(&gt), &RenderConfig::default()).unwrap();
        assert!((0..m.parts.len()).any(|i| m.parts[i] == PART_HANDLE && vis2.visible[i]));
    }

    #[test]
    fn not_visible_when_too_far() {
        let m = make_object(ObjectId::Sphere);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gt = Pose::from_translation(Vector3::new(0.0, 0.0, 40.0));
        match render_depth(&m, &gt, &Pose::identity(), &RenderConfig::default(), &mut rng) {
            Err(SceneError::NotVisible(n)) => assert!(n < 16),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn render_is_equivariant_to_moving_camera_and_object_together() {
        let m = make_object(ObjectId::Sphere);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = RenderConfig { noise_sigma: 0.0, ..Default::default() };
        for _ in 0..5 {
            let gt = random_gt_pose(&mut rng);
            let q = Pose::new(Rotation::random(&mut rng), Vector3::new(0.2, -0.1, 0.3));
            let cam = Pose::identity();
            let a = render_depth(&m, &gt, &cam, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            let b = render_depth(&m, &q.compose(&gt), &q.compose(&cam), &cfg, &mut ChaCha8Rng::seed_from_u64(1))
                .unwrap();
            for (p, r) in a.cloud.iter().zip(&b.cloud) {
                assert!((p - r).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn cylinder_yaw_renders_cover_the_same_surface() {
        let m = make_object(ObjectId::Cylinder);
        let cfg = RenderConfig { noise_sigma: 0.0, ..Default::default() };
        let gt = Pose::new(Rotation::rot_x(0.8), Vector3::new(0.0, 0.0, 0.5));
        let gt2 = Pose::new(gt.rot.compose(&Rotation::rot_z(1.1)), gt.trans);
        let a = render_depth(&m, &gt, &Pose::identity(), &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = render_depth(&m, &gt2, &Pose::identity(), &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        // Same surface up to sampling: every point of one cloud is near the other (cell size ≈ 9 mm).
        for p in &a.cloud {
            let d = b.cloud.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min);
            assert!(d < 0.012, "{d}");
        }
    }

    #[test]
    fn dataset_is_deterministic_and_readable() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.pfds"), dir.path().join("b.pfds"));
        let objs = [ObjectId::Cylinder, ObjectId::Mug];
        make_dataset(&objs, 6, 42, &a).unwrap();
        make_dataset(&objs, 6, 42, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let scenes = read_dataset(&a).unwrap();
        assert_eq!(scenes.len(), 6);
        let models: Vec<_> = objs.iter().map(|&o| make_object(o)).collect();
        for s in &scenes {
            let m = models.iter().find(|m| m.id == s.object).unwrap();
            assert_eq!(s.cloud.len(), s.mask.len());
            assert!((0.0..=1.0).contains(&s.occlusion));
            for p in &s.cloud {
                let local = s.gt_pose.inverse().transform_point(p);
                assert!(m.sdf(&local).abs() <= 2.0 * 0.002 + 1e-5);
            }
        }
    }

    #[test]
    fn cylinder_yaw_is_uniform() {
        // Chi-square on the yaw of the object's x-axis around its own z-axis, 12 bins.
        let scenes = generate_scenes(&[ObjectId::Cylinder], 1000, 8, &RenderConfig::default());
        let mut bins = [0usize; 12];
        for s in &scenes {
            let g = s.gt_pose;
            // Twist about the body z-axis relative to the minimal swing aligning z.
            let z = g.rot.apply(&Vector3::z());
            let swing = {
                let axis = Vector3::z().cross(&z);
                let s = axis.norm();
                if s < 1e-12 { Rotation::identity() } else { Rotation::about_axis(&axis, s.atan2(z.z)) }
            };
            let twist = swing.transpose().compose(&g.rot);
            let x = twist.apply(&Vector3::x());
            let yaw = x.y.atan2(x.x) + PI;
            bins[((yaw / (2.0 * PI) * 12.0) as usize).min(11)] += 1;
        }
        let e = 1000.0 / 12.0;
        let chi2: f64 = bins.iter().map(|&b| (b as f64 - e).powi(2) / e).sum();
        // 11 dof, p = 0.01 critical value.
        assert!(chi2 < 24.725, "chi2 {chi2}");
    }

    #[test]
    fn datasets_with_different_seeds_share_no_scene() {
        let cfg = RenderConfig::default();
        let a = generate_scenes(&[ObjectId::Cylinder], 300, 1, &cfg);
        let b = generate_scenes(&[ObjectId::Cylinder], 300, 999, &cfg);
        for s in &b {
            assert!(a.iter().all(|t| t.gt_pose != s.gt_pose));
        }
    }
}
