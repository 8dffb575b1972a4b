//! SO(3) / SE(3) numerics: exponential and logarithm maps, geodesics,
//! distances and averaging.
//!
//! Rotations are stored as 3×3 matrices. Tangent vectors are axis-angle
//! vectors in radians, expressed in the body frame (`R · exp(ω)`).

use std::f64::consts::PI;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const SMALL_ANGLE: f64 = 1e-8;
const NEAR_PI: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LieError {
    #[error("matrix is not a rotation (orthonormality error {orth:.3e}, det {det:.6})")]
    NotARotation { orth: f64, det: f64 },
    #[error("empty input")]
    Empty,
    #[error("Karcher mean did not converge: residual {residual:.3e} rad after {iters} iterations")]
    NonConvergence { residual: f64, iters: usize },
    #[error("invalid quaternion")]
    BadQuaternion,
    #[error("non-finite translation")]
    NonFinite,
}

/// Element of SO(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Validates orthonormality and orientation to 1e-9.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, LieError> {
        let orth = (m.transpose() * m - Matrix3::identity()).abs().max();
        let det = m.determinant();
        if !(orth <= 1e-9 && (det - 1.0).abs() <= 1e-9) {
            return Err(LieError::NotARotation { orth, det });
        }
        Ok(Rotation(m))
    }

    pub(crate) fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    /// Quaternion `[w, x, y, z]`; normalized on the way in.
    pub fn from_quaternion(q: [f64; 4]) -> Result<Self, LieError> {
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !n.is_finite() || n < 1e-12 {
            return Err(LieError::BadQuaternion);
        }
        let uq = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]));
        Ok(Rotation(uq.to_rotation_matrix().into_inner()))
    }

    /// Unit quaternion `[w, x, y, z]` with `w >= 0`.
    pub fn to_quaternion(&self) -> [f64; 4] {
        let uq = UnitQuaternion::from_matrix(&self.0);
        let q = uq.quaternion();
        let s = if q.w < 0.0 { -1.0 } else { 1.0 };
        [s * q.w, s * q.i, s * q.j, s * q.k]
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Rotation {
        Rotation(self.0.transpose())
    }

    pub fn inverse(&self) -> Rotation {
        self.transpose()
    }

    pub fn compose(&self, other: &Rotation) -> Rotation {
        Rotation(self.0 * other.0)
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Projects back onto SO(3) through the quaternion representation.
    pub fn renormalized(&self) -> Rotation {
        let uq = UnitQuaternion::from_matrix(&self.0);
        Rotation(uq.to_rotation_matrix().into_inner())
    }

    pub fn about_axis(axis: &Vector3<f64>, angle: f64) -> Rotation {
        let n = axis.norm();
        so3_exp(&(axis / n * angle))
    }

    pub fn rot_x(angle: f64) -> Rotation {
        so3_exp(&Vector3::new(angle, 0.0, 0.0))
    }

    pub fn rot_y(angle: f64) -> Rotation {
        so3_exp(&Vector3::new(0.0, angle, 0.0))
    }

    pub fn rot_z(angle: f64) -> Rotation {
        so3_exp(&Vector3::new(0.0, 0.0, angle))
    }

    /// Haar-uniform rotation from a normalized 4D Gaussian quaternion.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Rotation {
        loop {
            let q: [f64; 4] = [
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
            ];
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 1e-6 {
                return Rotation::from_quaternion(q).expect("non-degenerate quaternion");
            }
        }
    }

    /// Flattened row-major entries.
    pub fn flat(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Rotation::identity()
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        self.compose(&rhs)
    }
}

/// Rigid transform: `x ↦ rot · x + trans` (translation in meters).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseJson", into = "PoseJson")]
pub struct Pose {
    pub rot: Rotation,
    pub trans: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

impl Pose {
    pub fn new(rot: Rotation, trans: Vector3<f64>) -> Self {
        Pose { rot, trans }
    }

    pub fn identity() -> Self {
        Pose { rot: Rotation::identity(), trans: Vector3::zeros() }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Pose { rot: Rotation::identity(), trans: t }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rot.apply(p) + self.trans
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rot.transpose();
        Pose { rot: rt, trans: -rt.apply(&self.trans) }
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose { rot: self.rot.compose(&other.rot), trans: self.rot.apply(&other.trans) + self.trans }
    }

    pub fn is_finite(&self) -> bool {
        self.trans.iter().all(|v| v.is_finite()) && self.rot.0.iter().all(|v| v.is_finite())
    }
}

/// Wire form of a pose: `{"q":[w,x,y,z], "t":[x,y,z]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseJson {
    pub q: [f64; 4],
    pub t: [f64; 3],
}

impl From<Pose> for PoseJson {
    fn from(p: Pose) -> Self {
        PoseJson { q: p.rot.to_quaternion(), t: [p.trans.x, p.trans.y, p.trans.z] }
    }
}

impl TryFrom<PoseJson> for Pose {
    type Error = LieError;
    fn try_from(j: PoseJson) -> Result<Self, LieError> {
        let trans = Vector3::new(j.t[0], j.t[1], j.t[2]);
        if !trans.iter().all(|v| v.is_finite()) {
            return Err(LieError::NonFinite);
        }
        Ok(Pose { rot: Rotation::from_quaternion(j.q)?, trans })
    }
}

/// Body-frame velocity on SE(3) (rotation part in rad, translation in m).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TangentVec {
    pub rot_vel: Vector3<f64>,
    pub trans_vel: Vector3<f64>,
}

impl TangentVec {
    pub fn new(rot_vel: Vector3<f64>, trans_vel: Vector3<f64>) -> Self {
        TangentVec { rot_vel, trans_vel }
    }

    pub fn zero() -> Self {
        TangentVec::default()
    }

    pub fn scaled(&self, s: f64) -> TangentVec {
        TangentVec { rot_vel: self.rot_vel * s, trans_vel: self.trans_vel * s }
    }
}

pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

fn vee_antisym(m: &Matrix3<f64>) -> Vector3<f64> {
    // vee of (m - mᵀ) / 2
    Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Rodrigues' formula.
pub fn so3_exp(omega: &Vector3<f64>) -> Rotation {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(omega);
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Rotation(Matrix3::identity() + k * a + k * k * b)
}

/// Principal logarithm; the result has norm in `[0, π]`.
pub fn so3_log(r: &Rotation) -> Vector3<f64> {
    let m = &r.0;
    let s = vee_antisym(m); // sinθ · axis
    let sin_t = s.norm();
    let cos_t = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = sin_t.atan2(cos_t);
    if theta < SMALL_ANGLE {
        return s * (1.0 + theta * theta / 6.0);
    }
    if PI - theta > NEAR_PI {
        return s * (theta / sin_t);
    }
    // Near a half turn: axis from the symmetric part, aaᵀ = (S − cosθ I)/(1 − cosθ).
    let sym = (m + m.transpose()) * 0.5;
    let denom = 1.0 - cos_t;
    let b = (sym - Matrix3::identity() * cos_t) / denom;
    let i = (0..3).max_by(|&a, &c| b[(a, a)].total_cmp(&b[(c, c)])).unwrap();
    let ai = b[(i, i)].max(0.0).sqrt();
    let mut axis = Vector3::zeros();
    for j in 0..3 {
        axis[j] = if j == i { ai } else { b[(i, j)] / ai };
    }
    axis /= axis.norm();
    if axis.dot(&s) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

/// `r0 · exp(t · log(r0ᵀ r1))`.
pub fn geodesic_interp(r0: &Rotation, r1: &Rotation, t: f64) -> Rotation {
    let w = so3_log(&r0.transpose().compose(r1));
    r0.compose(&so3_exp(&(w * t)))
}

/// Geodesic angle in `[0, π]`.
pub fn geodesic_dist(r0: &Rotation, r1: &Rotation) -> f64 {
    so3_log(&r0.transpose().compose(r1)).norm()
}

pub const KARCHER_TOL: f64 = 1e-8;
pub const KARCHER_MAX_ITER: usize = 100;
const KARCHER_FAIL_RESIDUAL: f64 = 1e-3;

/// Fixed-point Karcher (Fréchet) mean, initialized at `rs[0]`.
pub fn karcher_mean(rs: &[Rotation], tol: f64, max_iter: usize) -> Result<Rotation, LieError> {
    let first = rs.first().ok_or(LieError::Empty)?;
    let mut mu = *first;
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let mut acc = Vector3::zeros();
        for r in rs {
            acc += so3_log(&mu.transpose().compose(r));
        }
        let delta = acc / rs.len() as f64;
        residual = delta.norm();
        if residual < tol {
            return Ok(mu);
        }
        mu = mu.compose(&so3_exp(&delta)).renormalized();
    }
    if residual > KARCHER_FAIL_RESIDUAL {
        return Err(LieError::NonConvergence { residual, iters: max_iter });
    }
    Ok(mu)
}

/// Decoupled mean: Karcher mean of rotations, arithmetic mean of translations.
pub fn pose_mean(hs: &[Pose]) -> Result<Pose, LieError> {
    if hs.is_empty() {
        return Err(LieError::Empty);
    }
    let rots: Vec<Rotation> = hs.iter().map(|p| p.rot).collect();
    let rot = karcher_mean(&rots, KARCHER_TOL, KARCHER_MAX_ITER)?;
    let trans = hs.iter().fold(Vector3::zeros(), |a, p| a + p.trans) / hs.len() as f64;
    Ok(Pose { rot, trans })
}

/// Uniform point in the ball of the given radius.
pub fn random_in_ball<R: Rng + ?Sized>(rng: &mut R, radius: f64) -> Vector3<f64> {
    let dir = random_unit(rng);
    let r = radius * rng.random::<f64>().cbrt();
    dir * r
}

pub fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mat_close(a: &Rotation, b: &Rotation, tol: f64) -> bool {
        (a.0 - b.0).abs().max() <= tol
    }

    #[test]
    fn exp_of_zero_is_identity() {
        assert_eq!(so3_exp(&Vector3::zeros()), Rotation::identity());
    }

    #[test]
    fn quarter_turn_maps_x_to_y() {
        let r = so3_exp(&Vector3::new(0.0, 0.0, PI / 2.0));
        let y = r.apply(&Vector3::x());
        assert!((y - Vector3::y()).norm() < 1e-15);
    }

    #[test]
    fn log_of_identity_and_half_turn() {
        assert_eq!(so3_log(&Rotation::identity()), Vector3::zeros());
        let r = Rotation::from_matrix(Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0))).unwrap();
        let w = so3_log(&r);
        assert!((w - Vector3::new(PI, 0.0, 0.0)).norm() < 1e-12, "{w}");
    }

    #[test]
    fn roundtrips_near_zero_and_pi() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &angle in &[0.0, 1e-12, 1e-9, 1e-7, 1e-3, PI - 1e-2, PI - 1e-4, PI - 1e-7, PI] {
            for _ in 0..50 {
                let w = random_unit(&mut rng) * angle;
                let r = so3_exp(&w);
                let back = so3_exp(&so3_log(&r));
                assert!(mat_close(&r, &back, 1e-9), "angle {angle}");
                if angle < PI - 1e-6 {
                    assert!((so3_log(&r) - w).norm() < 1e-9, "angle {angle}");
                }
            }
        }
    }

    #[test]
    fn exp_output_is_a_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let w = random_unit(&mut rng) * rng.random_range(0.0..10.0);
            assert!(Rotation::from_matrix(so3_exp(&w).0).is_ok());
        }
    }

    #[test]
    fn interp_endpoints_and_midpoint() {
        let r1 = Rotation::rot_z(PI / 2.0);
        let i = Rotation::identity();
        assert!(mat_close(&geodesic_interp(&i, &r1, 0.0), &i, 1e-15));
        assert!(mat_close(&geodesic_interp(&i, &r1, 1.0), &r1, 1e-12));
        assert!(mat_close(&geodesic_interp(&i, &r1, 0.5), &Rotation::rot_z(PI / 4.0), 1e-12));
    }

    #[test]
    fn interp_is_left_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let (q, a, b) = (Rotation::random(&mut rng), Rotation::random(&mut rng), Rotation::random(&mut rng));
            let t = rng.random::<f64>();
            let lhs = geodesic_interp(&q.compose(&a), &q.compose(&b), t);
            let rhs = q.compose(&geodesic_interp(&a, &b, t));
            assert!(mat_close(&lhs, &rhs, 1e-9));
        }
    }

    #[test]
    fn distance_landmarks() {
        let r = Rotation::rot_y(0.3);
        assert_eq!(geodesic_dist(&r, &r), 0.0);
        assert!((geodesic_dist(&Rotation::identity(), &Rotation::rot_x(PI)) - PI).abs() < 1e-12);
    }

    #[test]
    fn karcher_single_and_pair() {
        let r = Rotation::rot_x(0.7);
        assert_eq!(karcher_mean(&[r], KARCHER_TOL, KARCHER_MAX_ITER).unwrap(), r);
        let m = karcher_mean(&[Rotation::identity(), Rotation::rot_z(PI / 3.0)], KARCHER_TOL, KARCHER_MAX_ITER)
            .unwrap();
        assert!(geodesic_dist(&m, &Rotation::rot_z(PI / 6.0)) < 1e-9);
    }

    #[test]
    fn karcher_rejects_empty_and_reports_nonconvergence() {
        assert_eq!(karcher_mean(&[], 1e-8, 10), Err(LieError::Empty));
        // Two antipodal-ish half turns about different axes with a capped iteration budget.
        let rs = [Rotation::rot_x(PI - 0.01), Rotation::rot_y(PI - 0.01), Rotation::rot_z(PI - 0.01)];
        match karcher_mean(&rs, 1e-14, 1) {
            Err(LieError::NonConvergence { .. }) => {}
            other => panic!("expected NonConvergence, got {other:?}"),
        }
    }

    #[test]
    fn pose_mean_translation() {
        let a = Pose::from_translation(Vector3::zeros());
        let b = Pose::from_translation(Vector3::new(0.0, 0.0, 1.0));
        let m = pose_mean(&[a, b]).unwrap();
        assert!((m.trans - Vector3::new(0.0, 0.0, 0.5)).norm() < 1e-15);
        assert_eq!(pose_mean(&[b]).unwrap(), b);
    }

    #[test]
    fn pose_json_canonicalizes_w() {
        let p = Pose::new(Rotation::rot_x(3.0), Vector3::new(0.1, -0.2, 0.3));
        let s = serde_json::to_string(&p).unwrap();
        let j: PoseJson = serde_json::from_str(&s).unwrap();
        assert!(j.q[0] >= 0.0);
        let back: Pose = serde_json::from_str(&s).unwrap();
        assert!(mat_close(&back.rot, &p.rot, 1e-12));
        // unnormalized quaternion on read
        let q: Pose = serde_json::from_str(r#"{"q":[2.0,0.0,0.0,0.0],"t":[0,0,0]}"#).unwrap();
        assert!(mat_close(&q.rot, &Rotation::identity(), 1e-15));
    }

    #[test]
    fn pose_compose_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = Pose::new(Rotation::random(&mut rng), Vector3::new(0.3, 0.1, -0.2));
        let e = p.compose(&p.inverse());
        assert!(mat_close(&e.rot, &Rotation::identity(), 1e-12));
        assert!(e.trans.norm() < 1e-12);
    }
}
