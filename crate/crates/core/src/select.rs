//! Reducing hypothesis sets: DBSCAN clustering on SE(3) and model-based scoring.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lie::{geodesic_dist, pose_mean, LieError, Pose, PoseJson};
use crate::sampler::HypothesisSet;
use crate::scene::ObjectModel;

pub const DEFAULT_EPS_R: f64 = 10.0 * std::f64::consts::PI / 180.0;
pub const DEFAULT_EPS_T: f64 = 0.03;
pub const DEFAULT_TOP_FRAC: f64 = 0.2;

#[derive(Debug, Error, PartialEq)]
pub enum SelectError {
    #[error("every hypothesis is noise")]
    NoCluster,
    #[error(transparent)]
    Lie(#[from] LieError),
}

/// Normalized pose distance: rotation in units of `eps_r`, translation in units of `eps_t`.
pub fn se3_distance(a: &Pose, b: &Pose, eps_r: f64, eps_t: f64) -> f64 {
    let r = geodesic_dist(&a.rot, &b.rot) / eps_r;
    let t = (a.trans - b.trans).norm() / eps_t;
    (r * r + t * t).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterParams {
    pub eps: f64,
    pub min_pts: usize,
    pub eps_r: f64,
    pub eps_t: f64,
}

impl Default for ClusterParams {
    fn default() -> Self {
        ClusterParams { eps: 1.0, min_pts: 3, eps_r: DEFAULT_EPS_R, eps_t: DEFAULT_EPS_T }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    /// Cluster id per hypothesis; −1 marks noise.
    pub labels: Vec<i32>,
    pub cluster_sizes: Vec<usize>,
    /// Id of the selected (largest) cluster.
    pub largest: usize,
    pub representative: Pose,
}

impl ClusterResult {
    pub fn n_clusters(&self) -> usize {
        self.cluster_sizes.len()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "labels": self.labels,
            "cluster_sizes": self.cluster_sizes,
            "largest": self.largest,
            "representative": PoseJson::from(self.representative),
        })
    }
}

fn distance_matrix(poses: &[Pose], p: &ClusterParams) -> Vec<Vec<f64>> {
    poses.iter().map(|a| poses.iter().map(|b| se3_distance(a, b, p.eps_r, p.eps_t)).collect()).collect()
}

/// DBSCAN labels in index order. A point's neighborhood includes itself;
/// border points join the first cluster that reaches them.
pub fn dbscan(dist: &[Vec<f64>], eps: f64, min_pts: usize) -> Vec<i32> {
    const UNSEEN: i32 = -2;
    let n = dist.len();
    let neighbors = |i: usize| -> Vec<usize> { (0..n).filter(|&j| dist[i][j] <= eps).collect() };
    let mut labels = vec![UNSEEN; n];
    let mut next = 0;
    for i in 0..n {
        if labels[i] != UNSEEN {
            continue;
        }
        let nb = neighbors(i);
        if nb.len() < min_pts {
            labels[i] = -1;
            continue;
        }
        labels[i] = next;
        let mut queue: std::collections::VecDeque<usize> = nb.into_iter().filter(|&j| j != i).collect();
        while let Some(q) = queue.pop_front() {
            if labels[q] == -1 {
                labels[q] = next;
            }
            if labels[q] != UNSEEN {
                continue;
            }
            labels[q] = next;
            let nq = neighbors(q);
            if nq.len() >= min_pts {
                queue.extend(nq);
            }
        }
        next += 1;
    }
    labels
}

/// DBSCAN over a hypothesis set; representative is the Karcher/Euclidean mean
/// of the largest cluster (ties: smallest mean intra-cluster distance).
pub fn cluster(hs: &HypothesisSet, params: &ClusterParams) -> Result<ClusterResult, SelectError> {
    let dist = distance_matrix(&hs.poses, params);
    let labels = dbscan(&dist, params.eps, params.min_pts);
    let n_clusters = labels.iter().copied().max().map_or(0, |m| (m + 1).max(0) as usize);
    if n_clusters == 0 {
        return Err(SelectError::NoCluster);
    }
    let members: Vec<Vec<usize>> =
        (0..n_clusters).map(|c| (0..labels.len()).filter(|&i| labels[i] == c as i32).collect()).collect();
    let sizes: Vec<usize> = members.iter().map(Vec::len).collect();
    let max_size = *sizes.iter().max().expect("non-empty");
    let spread = |m: &[usize]| -> f64 {
        let mut s = 0.0;
        for &a in m {
            for &b in m {
                s += dist[a][b];
            }
        }
        s / (m.len() * m.len()) as f64
    };
    let mut largest = usize::MAX;
    for c in 0..n_clusters {
        if sizes[c] == max_size && (largest == usize::MAX || spread(&members[c]) < spread(&members[largest])) {
            largest = c;
        }
    }
    let poses: Vec<Pose> = members[largest].iter().map(|&i| hs.poses[i]).collect();
    Ok(ClusterResult { labels, cluster_sizes: sizes, largest, representative: pose_mean(&poses)? })
}

#[inline]
fn sq_dist(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let d = a - b;
    d.x * d.x + d.y * d.y + d.z * d.z
}

/// Uniform grid over a point set for exact nearest-neighbor distance queries.
pub struct PointGrid {
    points: Vec<Vector3<f64>>,
    origin: Vector3<f64>,
    cell: f64,
    dims: [i64; 3],
    starts: Vec<u32>,
    order: Vec<u32>,
}

impl PointGrid {
    pub fn new(points: Vec<Vector3<f64>>) -> PointGrid {
        assert!(!points.is_empty());
        let mut lo = points[0];
        let mut hi = points[0];
        for p in &points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let ext = hi - lo;
        let vol = (ext.x * ext.y * ext.z).max(1e-12);
        let target = (points.len() as f64 / 2.0).max(1.0);
        let cell = (vol / target).cbrt().max(ext.max() / 64.0).max(1e-6);
        let dims = [0, 1, 2].map(|k| ((ext[k] / cell).floor() as i64 + 1).max(1));
        let index = |p: &Vector3<f64>| -> usize {
            let c = [0, 1, 2].map(|k| (((p[k] - lo[k]) / cell).floor() as i64).clamp(0, dims[k] - 1));
            ((c[2] * dims[1] + c[1]) * dims[0] + c[0]) as usize
        };
        let n_cells = (dims[0] * dims[1] * dims[2]) as usize;
        let mut counts = vec![0u32; n_cells + 1];
        for p in &points {
            counts[index(p) + 1] += 1;
        }
        for i in 0..n_cells {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut order = vec![0u32; points.len()];
        for (i, p) in points.iter().enumerate() {
            let c = index(p);
            order[fill[c] as usize] = i as u32;
            fill[c] += 1;
        }
        PointGrid { points, origin: lo, cell, dims, starts: counts, order }
    }

    /// Squared distance from `q` to its nearest grid point; equals the
    /// brute-force minimum bit for bit.
    pub fn nearest_sq(&self, q: &Vector3<f64>) -> f64 {
        let c = [0, 1, 2].map(|k| ((q[k] - self.origin[k]) / self.cell).floor() as i64);
        let outside = (0..3).map(|k| (-c[k]).max(c[k] - (self.dims[k] - 1)).max(0)).max().unwrap_or(0);
        let max_r = (0..3).map(|k| c[k].abs().max((c[k] - (self.dims[k] - 1)).abs())).max().unwrap_or(0);
        let mut best = f64::INFINITY;
        let mut r = outside;
        loop {
            for z in (c[2] - r).max(0)..=(c[2] + r).min(self.dims[2] - 1) {
                for y in (c[1] - r).max(0)..=(c[1] + r).min(self.dims[1] - 1) {
                    let edge = (z - c[2]).abs() == r || (y - c[1]).abs() == r;
                    let xs: Vec<i64> = if edge {
                        ((c[0] - r).max(0)..=(c[0] + r).min(self.dims[0] - 1)).collect()
                    } else {
                        [c[0] - r, c[0] + r].into_iter().filter(|&x| x >= 0 && x < self.dims[0]).collect()
                    };
                    for x in xs {
                        let cell = ((z * self.dims[1] + y) * self.dims[0] + x) as usize;
                        for &i in &self.order[self.starts[cell] as usize..self.starts[cell + 1] as usize] {
                            let d = sq_dist(q, &self.points[i as usize]);
                            if d < best {
                                best = d;
                            }
                        }
                    }
                }
            }
            // Unvisited cells are at least r·cell away from q.
            let bound = r as f64 * self.cell;
            if (best.is_finite() && best < bound * bound * (1.0 - 1e-9)) || r >= max_r {
                return best;
            }
            r += 1;
        }
    }
}

fn transformed_model(model: &ObjectModel, pose: &Pose) -> Vec<Vector3<f64>> {
    model.surface_points.iter().map(|p| pose.transform_point(p)).collect()
}

/// One-sided Chamfer residual of `cloud` against the model placed at `pose`.
pub fn chamfer_score(cloud: &[Vector3<f64>], model: &ObjectModel, pose: &Pose) -> f64 {
    let grid = PointGrid::new(transformed_model(model, pose));
    cloud.iter().map(|q| grid.nearest_sq(q)).sum::<f64>() / cloud.len() as f64
}

/// Reference O(K·N) Chamfer residual.
pub fn chamfer_score_brute(cloud: &[Vector3<f64>], model: &ObjectModel, pose: &Pose) -> f64 {
    let pts = transformed_model(model, pose);
    cloud
        .iter()
        .map(|q| pts.iter().map(|p| sq_dist(q, p)).fold(f64::INFINITY, |a, b| if b < a { b } else { a }))
        .sum::<f64>()
        / cloud.len() as f64
}

/// Mean squared SDF of the cloud pulled into the model frame, in units of
/// the model's normalization scale.
pub fn sdf_score(cloud: &[Vector3<f64>], model: &ObjectModel, pose: &Pose) -> f64 {
    let (_, s) = model.normalization();
    let inv = pose.inverse();
    cloud.iter().map(|p| (model.sdf(&inv.transform_point(p)) / s).powi(2)).sum::<f64>() / cloud.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scorer {
    Chamfer,
    Sdf,
}

impl std::str::FromStr for Scorer {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "chamfer" => Ok(Scorer::Chamfer),
            "sdf" => Ok(Scorer::Sdf),
            _ => Err(format!("unknown scorer '{s}' (expected chamfer or sdf)")),
        }
    }
}

pub fn residual(scorer: Scorer, cloud: &[Vector3<f64>], model: &ObjectModel, pose: &Pose) -> f64 {
    match scorer {
        Scorer::Chamfer => chamfer_score(cloud, model, pose),
        Scorer::Sdf => sdf_score(cloud, model, pose),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    pub poses: Vec<Pose>,
    pub residuals: Vec<f64>,
    pub scores: Vec<f64>,
    pub retained: Vec<bool>,
    pub sigma: f64,
}

impl ScoredSet {
    /// Index of the highest-scoring pose (lowest index on ties).
    pub fn best(&self) -> usize {
        let mut b = 0;
        for i in 1..self.scores.len() {
            if self.scores[i] > self.scores[b] {
                b = i;
            }
        }
        b
    }

    pub fn retained_poses(&self) -> Vec<Pose> {
        self.poses.iter().zip(&self.retained).filter(|(_, &k)| k).map(|(p, _)| *p).collect()
    }

    pub fn to_json(&self, scorer: Scorer) -> serde_json::Value {
        let hyps: Vec<_> = (0..self.poses.len())
            .map(|i| {
                let pj = PoseJson::from(self.poses[i]);
                serde_json::json!({
                    "q": pj.q, "t": pj.t,
                    "residual": self.residuals[i],
                    "score": self.scores[i],
                    "retained": self.retained[i],
                })
            })
            .collect();
        serde_json::json!({ "scorer": scorer, "sigma": self.sigma, "best": self.best(), "hyps": hyps })
    }
}

/// Gaussian log-likelihood scores with the median residual as scale, and
/// the best `ceil(top_frac · n)` marked retained.
pub fn scores_from_residuals(residuals: &[f64], top_frac: f64) -> (Vec<f64>, Vec<bool>, f64) {
    assert!(top_frac > 0.0 && top_frac <= 1.0, "top_frac must lie in (0, 1]");
    let n = residuals.len();
    let mut sorted = residuals.to_vec();
    sorted.sort_by(f64::total_cmp);
    let med = if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };
    let sigma = if med > 0.0 && med.is_finite() { med } else { 1.0 };
    let scores: Vec<f64> = residuals.iter().map(|r| -r / (2.0 * sigma * sigma)).collect();
    let keep = ((top_frac * n as f64).ceil() as usize).clamp(1, n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| residuals[a].total_cmp(&residuals[b]).then(a.cmp(&b)));
    let mut retained = vec![false; n];
    for &i in &idx[..keep] {
        retained[i] = true;
    }
    (scores, retained, sigma)
}

pub fn rank_and_retain(
    hs: &HypothesisSet,
    scorer: Scorer,
    top_frac: f64,
    cloud: &[Vector3<f64>],
    model: &ObjectModel,
) -> ScoredSet {
    let residuals: Vec<f64> = hs.poses.par_iter().map(|p| residual(scorer, cloud, model, p)).collect();
    let (scores, retained, sigma) = scores_from_residuals(&residuals, top_frac);
    ScoredSet { poses: hs.poses.clone(), residuals, scores, retained, sigma }
}
