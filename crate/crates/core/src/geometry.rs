//! Rigid-body transforms.
//!
//! [`Pose`] is generic over the scalar so that kinematic chains and camera
//! transforms can be composed on dual numbers during optimization. Routines
//! that need a matrix decomposition (alignment, polar projection, the
//! logarithm map) work on `f64` only and go through nalgebra.

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub type Mat3<S> = [[S; 3]; 3];
pub type Vec3<S> = [S; 3];

/// Rigid transform `x ↦ R·x + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose<S = f64> {
    pub rotation: Mat3<S>,
    pub translation: Vec3<S>,
}

/// Six-number chart of a pose: translation plus axis-angle rotation.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseParams {
    pub translation: [f64; 3],
    pub rotation: [f64; 3],
}

impl PoseParams {
    pub fn new(translation: [f64; 3], rotation: [f64; 3]) -> Self {
        PoseParams { translation, rotation }
    }

    pub fn to_array(&self) -> [f64; 6] {
        let [a, b, c] = self.translation;
        let [d, e, f] = self.rotation;
        [a, b, c, d, e, f]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        PoseParams { translation: [v[0], v[1], v[2]], rotation: [v[3], v[4], v[5]] }
    }
}

#[inline]
pub fn mat_mul<S: Scalar>(a: &Mat3<S>, b: &Mat3<S>) -> Mat3<S> {
    let mut out = [[S::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

#[inline]
pub fn mat_vec<S: Scalar>(a: &Mat3<S>, v: &Vec3<S>) -> Vec3<S> {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

#[inline]
pub fn transpose<S: Scalar>(a: &Mat3<S>) -> Mat3<S> {
    let mut out = *a;
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

/// Rotation matrix of an axis-angle vector (Rodrigues). Uses a series
/// expansion near zero so the derivative stays exact at the identity.
pub fn so3_exp<S: Scalar>(w: &Vec3<S>) -> Mat3<S> {
    let theta2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    let (a, b) = if theta2.re() < 1e-6 {
        let t4 = theta2 * theta2;
        (
            S::one() - theta2 / 6.0 + t4 / 120.0,
            S::cst(0.5) - theta2 / 24.0 + t4 / 720.0,
        )
    } else {
        let theta = theta2.sqrt();
        let (s, c) = theta.sin_cos();
        (s / theta, (S::one() - c) / theta2)
    };
    let (x, y, z) = (w[0], w[1], w[2]);
    // I + a·[w]x + b·[w]x²
    let xx = x * x;
    let yy = y * y;
    let zz = z * z;
    let xy = x * y;
    let xz = x * z;
    let yz = y * z;
    [
        [S::one() - b * (yy + zz), b * xy - a * z, b * xz + a * y],
        [b * xy + a * z, S::one() - b * (xx + zz), b * yz - a * x],
        [b * xz - a * y, b * yz + a * x, S::one() - b * (xx + yy)],
    ]
}

/// Axis-angle vector of a rotation matrix, with norm in `[0, π]`.
pub fn so3_log(r: &Mat3<f64>) -> Vec3<f64> {
    let rot = Rotation3::from_matrix_unchecked(to_na(r));
    let v = rot.scaled_axis();
    [v.x, v.y, v.z]
}

pub fn to_na(r: &Mat3<f64>) -> Matrix3<f64> {
    Matrix3::new(
        r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
    )
}

pub fn from_na(m: &Matrix3<f64>) -> Mat3<f64> {
    [
        [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
        [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
        [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
    ]
}

/// Nearest rotation (polar projection) of an approximately orthonormal matrix.
pub fn orthonormalize(r: &Mat3<f64>) -> Mat3<f64> {
    let svd = to_na(r).svd(true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let mut out = u * v_t;
    if out.determinant() < 0.0 {
        let mut u2 = u;
        u2.column_mut(2).neg_mut();
        out = u2 * v_t;
    }
    from_na(&out)
}

impl<S: Scalar> Pose<S> {
    pub fn identity() -> Self {
        let o = S::zero();
        let l = S::one();
        Pose { rotation: [[l, o, o], [o, l, o], [o, o, l]], translation: [o, o, o] }
    }

    pub fn from_translation(t: Vec3<S>) -> Self {
        Pose { translation: t, ..Self::identity() }
    }

    pub fn from_rotation(r: Mat3<S>) -> Self {
        Pose { rotation: r, translation: [S::zero(); 3] }
    }

    /// `self · other` as homogeneous matrices.
    #[inline]
    pub fn compose(&self, other: &Pose<S>) -> Pose<S> {
        let r = mat_mul(&self.rotation, &other.rotation);
        let mut t = mat_vec(&self.rotation, &other.translation);
        for i in 0..3 {
            t[i] += self.translation[i];
        }
        Pose { rotation: r, translation: t }
    }

    #[inline]
    pub fn apply(&self, p: &Vec3<S>) -> Vec3<S> {
        let mut out = mat_vec(&self.rotation, p);
        for i in 0..3 {
            out[i] += self.translation[i];
        }
        out
    }

    pub fn inverse(&self) -> Pose<S> {
        let rt = transpose(&self.rotation);
        let t = mat_vec(&rt, &self.translation);
        Pose { rotation: rt, translation: [-t[0], -t[1], -t[2]] }
    }

    /// Pose from a translation and an axis-angle rotation.
    pub fn exp(translation: Vec3<S>, rotation: &Vec3<S>) -> Pose<S> {
        Pose { rotation: so3_exp(rotation), translation }
    }

    /// Squared Frobenius norm of the difference of the homogeneous matrices.
    pub fn distance_sq(&self, other: &Pose<S>) -> S {
        let mut acc = S::zero();
        for i in 0..3 {
            for j in 0..3 {
                let d = self.rotation[i][j] - other.rotation[i][j];
                acc += d * d;
            }
            let d = self.translation[i] - other.translation[i];
            acc += d * d;
        }
        acc
    }

    /// Lifts an `f64` pose to constants of another scalar type.
    pub fn lift(p: &Pose<f64>) -> Pose<S> {
        let mut out = Pose::<S>::identity();
        for i in 0..3 {
            for j in 0..3 {
                out.rotation[i][j] = S::cst(p.rotation[i][j]);
            }
            out.translation[i] = S::cst(p.translation[i]);
        }
        out
    }

    pub fn value(&self) -> Pose<f64> {
        let mut out = Pose::<f64>::identity();
        for i in 0..3 {
            for j in 0..3 {
                out.rotation[i][j] = self.rotation[i][j].re();
            }
            out.translation[i] = self.translation[i].re();
        }
        out
    }
}

impl Pose<f64> {
    pub fn from_params(q: &PoseParams) -> Pose<f64> {
        Pose::exp(q.translation, &q.rotation)
    }

    pub fn to_params(&self) -> PoseParams {
        PoseParams { translation: self.translation, rotation: so3_log(&self.rotation) }
    }

    pub fn rotation_na(&self) -> Matrix3<f64> {
        to_na(&self.rotation)
    }

    pub fn translation_na(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }

    pub fn from_na(r: &Matrix3<f64>, t: &Vector3<f64>) -> Pose<f64> {
        Pose { rotation: from_na(r), translation: [t.x, t.y, t.z] }
    }

    /// Re-projects the rotation onto SO(3).
    pub fn orthonormalized(&self) -> Pose<f64> {
        Pose { rotation: orthonormalize(&self.rotation), translation: self.translation }
    }

    /// Angle of the relative rotation between two poses.
    pub fn rotation_angle_to(&self, other: &Pose<f64>) -> f64 {
        let rel = mat_mul(&transpose(&self.rotation), &other.rotation);
        let tr = rel[0][0] + rel[1][1] + rel[2][2];
        let v = so3_log(&rel);
        // acos is ill-conditioned near zero, the log map is not
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n.is_finite() {
            n
        } else {
            ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
        }
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.iter().flatten().chain(self.translation.iter()).all(|v| v.is_finite())
    }

    /// Maximum elementwise deviation of `Rᵀ·R` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let rtr = mat_mul(&transpose(&self.rotation), &self.rotation);
        let mut worst: f64 = 0.0;
        for (i, row) in rtr.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((v - target).abs());
            }
        }
        worst
    }

    pub fn determinant(&self) -> f64 {
        self.rotation_na().determinant()
    }
}

/// Pose composition, `a · b`.
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

pub fn pose_from_params(q: &PoseParams) -> Pose {
    Pose::from_params(q)
}

/// Frobenius norm between the 4×4 homogeneous matrices of two poses.
pub fn pose_distance(a: &Pose, g: &Pose) -> f64 {
    a.distance_sq(g).sqrt()
}

/// Least-squares rigid transform `T` minimizing `Σ‖T·pᵢ − qᵢ‖²`.
pub fn arun_align(p: &[Vec3<f64>], q: &[Vec3<f64>]) -> Result<Pose> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch { expected: p.len(), got: q.len() });
    }
    if p.len() < 3 {
        return Err(Error::DegenerateConfiguration(format!(
            "need at least 3 point pairs, got {}",
            p.len()
        )));
    }
    let n = p.len() as f64;
    let cp = p.iter().fold(Vector3::zeros(), |acc, v| acc + Vector3::from(*v)) / n;
    let cq = q.iter().fold(Vector3::zeros(), |acc, v| acc + Vector3::from(*v)) / n;

    let mut h = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for (a, b) in p.iter().zip(q) {
        let da = Vector3::from(*a) - cp;
        let db = Vector3::from(*b) - cq;
        h += da * db.transpose();
        spread += da * da.transpose();
    }
    let sv = spread.symmetric_eigenvalues();
    let mut ev: Vec<f64> = sv.iter().copied().collect();
    ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
    if ev[0] <= 0.0 || ev[1] <= 1e-12 * ev[0] {
        return Err(Error::DegenerateConfiguration("points are collinear".into()));
    }

    let svd = h.svd(true, true);
    let u = svd.u.unwrap();
    let mut v = svd.v_t.unwrap().transpose();
    let mut r = v * u.transpose();
    if r.determinant() < 0.0 {
        v.column_mut(2).neg_mut();
        r = v * u.transpose();
    }
    let t = cq - r * cp;
    Ok(Pose::from_na(&r, &t))
}
