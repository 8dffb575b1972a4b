//! Python bindings: poses, the synthetic scene generator, the velocity
//! network, sampling, selection and pose-marginalized grasping.

use std::path::PathBuf;

use nalgebra::Vector3;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use poseflow::eval::{pose_error, Protocol};
use poseflow::grasp::{self, CanonicalCloudSet};
use poseflow::lie::{self, PoseJson};
use poseflow::net::{NetConfig, NetError, VelocityNet};
use poseflow::sampler::{sample_poses, track_pose, DEFAULT_JITTER};
use poseflow::scene::{self, RenderConfig};
use poseflow::select::{rank_and_retain, Scorer};
use poseflow::train::{examples_from_scenes, train, TrainConfig};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn net_err(e: NetError) -> PyErr {
    match e {
        NetError::Io(io) => PyIOError::new_err(io.to_string()),
        other => value_err(other),
    }
}

fn vec3(v: [f64; 3]) -> Vector3<f64> {
    Vector3::new(v[0], v[1], v[2])
}

fn arr3(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

fn object_id(name: &str) -> PyResult<scene::ObjectId> {
    name.parse().map_err(value_err)
}

/// Rigid transform: unit quaternion [w, x, y, z] and translation [x, y, z] in meters.
#[pyclass(name = "Pose", module = "poseflow_py", skip_from_py_object)]
#[derive(Clone, Copy)]
struct PyPose(lie::Pose);

#[pymethods]
impl PyPose {
    #[new]
    #[pyo3(signature = (q = [1.0, 0.0, 0.0, 0.0], t = [0.0, 0.0, 0.0]))]
    fn new(q: [f64; 4], t: [f64; 3]) -> PyResult<Self> {
        let rot = lie::Rotation::from_quaternion(q).map_err(value_err)?;
        Ok(PyPose(lie::Pose::new(rot, vec3(t))))
    }

    /// Rotation exp(omega) followed by translation t.
    #[staticmethod]
    fn from_axis_angle(omega: [f64; 3], t: [f64; 3]) -> Self {
        PyPose(lie::Pose::new(lie::so3_exp(&vec3(omega)), vec3(t)))
    }

    #[getter]
    fn q(&self) -> [f64; 4] {
        PoseJson::from(self.0).q
    }

    #[getter]
    fn t(&self) -> [f64; 3] {
        arr3(&self.0.trans)
    }

    /// Row-major 3×3 rotation matrix.
    fn matrix(&self) -> [[f64; 3]; 3] {
        let m = self.0.rot.matrix();
        [[m[(0, 0)], m[(0, 1)], m[(0, 2)]], [m[(1, 0)], m[(1, 1)], m[(1, 2)]], [m[(2, 0)], m[(2, 1)], m[(2, 2)]]]
    }

    /// Axis-angle vector of the rotation.
    fn log_rot(&self) -> [f64; 3] {
        arr3(&lie::so3_log(&self.0.rot))
    }

    fn compose(&self, other: &PyPose) -> PyPose {
        PyPose(self.0.compose(&other.0))
    }

    fn inverse(&self) -> PyPose {
        PyPose(self.0.inverse())
    }

    fn transform_point(&self, p: [f64; 3]) -> [f64; 3] {
        arr3(&self.0.transform_point(&vec3(p)))
    }

    /// Geodesic rotation distance to another pose (rad).
    fn rot_dist(&self, other: &PyPose) -> f64 {
        lie::geodesic_dist(&self.0.rot, &other.0.rot)
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&PoseJson::from(self.0)).expect("serializable")
    }

    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        let pj: PoseJson = serde_json::from_str(s).map_err(value_err)?;
        Ok(PyPose(lie::Pose::try_from(pj).map_err(value_err)?))
    }

    fn __repr__(&self) -> String {
        let q = self.q();
        let t = self.t();
        format!("Pose(q=[{:.6}, {:.6}, {:.6}, {:.6}], t=[{:.6}, {:.6}, {:.6}])", q[0], q[1], q[2], q[3], t[0], t[1], t[2])
    }
}

/// Karcher (intrinsic) mean of the rotations, with the arithmetic mean translation.
#[pyfunction]
fn pose_mean(poses: Vec<PyRef<'_, PyPose>>) -> PyResult<PyPose> {
    let ps: Vec<lie::Pose> = poses.iter().map(|p| p.0).collect();
    if ps.is_empty() {
        return Err(value_err("empty pose list"));
    }
    Ok(PyPose(lie::pose_mean(&ps).map_err(value_err)?))
}

/// Symmetry-aware (rotation error in degrees, translation error in meters).
#[pyfunction]
fn pose_error_of(object: &str, pred: &PyPose, gt: &PyPose) -> PyResult<(f64, f64)> {
    let model = scene::make_object(object_id(object)?);
    Ok(pose_error(&pred.0, &gt.0, &model.symmetry))
}

/// One rendered depth observation of a single object.
#[pyclass(name = "Scene", module = "poseflow_py", skip_from_py_object)]
#[derive(Clone)]
struct PyScene(scene::SceneSample);

#[pymethods]
impl PyScene {
    #[getter]
    fn object(&self) -> &'static str {
        self.0.object.name()
    }

    /// Object → camera.
    #[getter]
    fn gt_pose(&self) -> PyPose {
        PyPose(self.0.gt_pose)
    }

    /// Camera → world.
    #[getter]
    fn camera(&self) -> PyPose {
        PyPose(self.0.camera)
    }

    #[getter]
    fn cloud(&self) -> Vec<[f64; 3]> {
        self.0.cloud.iter().map(arr3).collect()
    }

    #[getter]
    fn mask(&self) -> Vec<bool> {
        self.0.mask.clone()
    }

    #[getter]
    fn occlusion(&self) -> f64 {
        self.0.occlusion
    }
}

/// Renders `n_scenes` scenes cycling through `objects`.
#[pyfunction]
#[pyo3(signature = (objects, n_scenes, seed = 0))]
fn synth(objects: Vec<String>, n_scenes: usize, seed: u64) -> PyResult<Vec<PyScene>> {
    let ids = objects.iter().map(|s| object_id(s)).collect::<PyResult<Vec<_>>>()?;
    if ids.is_empty() || n_scenes == 0 {
        return Err(value_err("need at least one object and one scene"));
    }
    Ok(scene::generate_scenes(&ids, n_scenes, seed, &RenderConfig::default()).into_iter().map(PyScene).collect())
}

#[pyfunction]
fn write_dataset(path: PathBuf, scenes: Vec<PyRef<'_, PyScene>>) -> PyResult<()> {
    let s: Vec<scene::SceneSample> = scenes.iter().map(|x| x.0.clone()).collect();
    scene::write_dataset(&path, &s).map_err(value_err)
}

#[pyfunction]
fn read_dataset(path: PathBuf) -> PyResult<Vec<PyScene>> {
    Ok(scene::read_dataset(&path).map_err(value_err)?.into_iter().map(PyScene).collect())
}

/// Signed distance of a point to an object in its own frame (m).
#[pyfunction]
fn object_sdf(object: &str, p: [f64; 3]) -> PyResult<f64> {
    Ok(scene::make_object(object_id(object)?).sdf(&vec3(p)))
}

/// The conditional SE(3) velocity network.
#[pyclass(name = "VelocityNet", module = "poseflow_py")]
struct PyNet(VelocityNet);

#[pymethods]
impl PyNet {
    /// Fresh network; `config` is an optional JSON object of architecture overrides.
    #[new]
    #[pyo3(signature = (seed = 0, config = None))]
    fn new(seed: u64, config: Option<&str>) -> PyResult<Self> {
        let cfg: NetConfig = match config {
            Some(c) => serde_json::from_str(c).map_err(value_err)?,
            None => NetConfig::default(),
        };
        Ok(PyNet(VelocityNet::new(cfg, seed)))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyNet(VelocityNet::load(&path).map_err(net_err)?))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(net_err)
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.0.n_params()
    }

    /// Trains in place on the scenes; returns the per-step loss trace.
    #[pyo3(signature = (scenes, steps, seed = 0, batch = 64, lr = 1e-3))]
    fn train(&mut self, py: Python<'_>, scenes: Vec<PyRef<'_, PyScene>>, steps: usize, seed: u64, batch: usize, lr: f64) -> PyResult<Vec<f64>> {
        let s: Vec<scene::SceneSample> = scenes.iter().map(|x| x.0.clone()).collect();
        let cfg = TrainConfig { steps, seed, batch, lr, log_every: 0, ..TrainConfig::default() };
        cfg.validate().map_err(value_err)?;
        let net = &mut self.0;
        py.detach(|| {
            let examples = examples_from_scenes(net, &s)?;
            train(net, &examples, &cfg, None)
        })
        .map(|r| r.loss_trace)
        .map_err(net_err)
    }

    /// Cold-start hypotheses for a scene (camera frame).
    #[pyo3(signature = (scene, n_samples = 50, n_steps = 5, seed = 0))]
    fn sample(&self, py: Python<'_>, scene: &PyScene, n_samples: usize, n_steps: usize, seed: u64) -> PyResult<Vec<PyPose>> {
        if n_samples == 0 || n_steps == 0 {
            return Err(value_err("n_samples and n_steps must be positive"));
        }
        let obs = self.0.tokenize(&scene.0.cloud, &scene.0.mask).map_err(net_err)?;
        let hs = py.detach(|| sample_poses(&self.0, &obs, n_samples, n_steps, seed));
        Ok(hs.poses.into_iter().map(PyPose).collect())
    }

    /// Warm-start hypotheses around `prev`.
    #[pyo3(signature = (scene, prev, n_samples = 50, n_steps = 1, seed = 0))]
    fn track(&self, py: Python<'_>, scene: &PyScene, prev: &PyPose, n_samples: usize, n_steps: usize, seed: u64) -> PyResult<Vec<PyPose>> {
        if n_samples == 0 || n_steps == 0 {
            return Err(value_err("n_samples and n_steps must be positive"));
        }
        let obs = self.0.tokenize(&scene.0.cloud, &scene.0.mask).map_err(net_err)?;
        let hs = py.detach(|| track_pose(&self.0, &obs, &prev.0, n_samples, n_steps, DEFAULT_JITTER, seed));
        Ok(hs.poses.into_iter().map(PyPose).collect())
    }
}

/// Scores hypotheses against the scene cloud; returns (best index, scores, retained flags).
#[pyfunction]
#[pyo3(signature = (scene, hyps, scorer = "chamfer", top_frac = 0.2))]
fn select(scene: &PyScene, hyps: Vec<PyRef<'_, PyPose>>, scorer: &str, top_frac: f64) -> PyResult<(usize, Vec<f64>, Vec<bool>)> {
    if hyps.is_empty() || !(top_frac > 0.0 && top_frac <= 1.0) {
        return Err(value_err("need hypotheses and top_frac in (0, 1]"));
    }
    let scorer: Scorer = scorer.parse().map_err(value_err)?;
    let hs = poseflow::sampler::HypothesisSet {
        poses: hyps.iter().map(|p| p.0).collect(),
        scores: None,
        meta: poseflow::sampler::HypothesisMeta {
            n_steps: 0,
            mode: poseflow::sampler::SampleMode::Estimate,
            seed: Protocol::default().seed,
        },
    };
    let model = scene::make_object(scene.0.object);
    let s = rank_and_retain(&hs, scorer, top_frac, &scene.0.cloud, &model);
    Ok((s.best(), s.scores, s.retained))
}

/// Grasps from the hypothesis-averaged grasp field, as (pose, width) pairs in the world frame.
#[pyfunction]
#[pyo3(signature = (grasp_net, object, hyps, n_grasps = 16, n_steps = 10, seed = 0))]
fn marginal_grasps(
    py: Python<'_>,
    grasp_net: &PyNet,
    object: &str,
    hyps: Vec<PyRef<'_, PyPose>>,
    n_grasps: usize,
    n_steps: usize,
    seed: u64,
) -> PyResult<Vec<(PyPose, f64)>> {
    if hyps.is_empty() || n_grasps == 0 || n_steps == 0 {
        return Err(value_err("need hypotheses and positive n_grasps, n_steps"));
    }
    let model = scene::make_object(object_id(object)?);
    let ps: Vec<lie::Pose> = hyps.iter().map(|p| p.0).collect();
    let canon: CanonicalCloudSet = grasp::canonicalize(&model, &ps);
    let gs = py.detach(|| grasp::marginal_grasp_sample(&grasp_net.0, &canon, n_grasps, n_steps, seed)).map_err(net_err)?;
    Ok(gs.into_iter().map(|g| (PyPose(g.pose), g.width)).collect())
}

#[pyfunction]
#[pyo3(signature = (object, pose, width, hyp))]
fn grasp_feasible(object: &str, pose: &PyPose, width: f64, hyp: &PyPose) -> PyResult<bool> {
    let model = scene::make_object(object_id(object)?);
    Ok(grasp::grasp_feasible(&grasp::GraspPose::new(pose.0, width), &hyp.0, &model))
}

#[pymodule]
pub fn poseflow_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPose>()?;
    m.add_class::<PyScene>()?;
    m.add_class::<PyNet>()?;
    m.add_function(wrap_pyfunction!(pose_mean, m)?)?;
    m.add_function(wrap_pyfunction!(pose_error_of, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(write_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(read_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(object_sdf, m)?)?;
    m.add_function(wrap_pyfunction!(select, m)?)?;
    m.add_function(wrap_pyfunction!(marginal_grasps, m)?)?;
    m.add_function(wrap_pyfunction!(grasp_feasible, m)?)?;
    Ok(())
}
