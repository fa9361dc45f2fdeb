//! Relative pose of two calibrated views, linear triangulation and camera
//! resection.

use nalgebra::{DMatrix, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{from_na, mat_mul, mat_vec, orthonormalize, so3_exp, Pose, Vec3};
use crate::learning::{pixel_residuals, solve, ChartProblem, Obs};
use crate::model::{retract_pose, Intrinsics};
use crate::optim::{OptimizerOptions, ResidualModel};
use crate::par::Execution;
use crate::scalar::Scalar;

/// One feature seen at the same timestep in two cameras (pixel coordinates).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    pub feature: usize,
    pub timestep: usize,
    pub pixel_a: [f64; 2],
    pub pixel_b: [f64; 2],
}

/// Smallest-singular-value ratio below which a linear system is treated as
/// rank deficient.
const RANK_TOL: f64 = 1e-10;

/// Minimum angle between viewing rays for triangulation.
pub const MIN_RAY_ANGLE: f64 = 1e-4;

pub fn normalize(k: &Intrinsics, px: [f64; 2]) -> [f64; 2] {
    [(px[0] - k.cx) / k.fx, (px[1] - k.cy) / k.fy]
}

/// Right singular vector of the smallest singular value, plus the sorted
/// singular values (descending). Rows are zero-padded up to the column count.
fn null_vector(a: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let cols = a.ncols();
    let a = if a.nrows() < cols { a.clone().resize_vertically(cols, 0.0) } else { a.clone() };
    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("requested");
    let sv = svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]));
    let last = *order.last().unwrap();
    let v = v_t.row(last).iter().copied().collect();
    (v, order.iter().map(|&i| sv[i]).collect())
}

/// Hartley conditioning: centroid to the origin, mean distance √2.
fn conditioning(pts: &[[f64; 2]]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let (mx, my) = pts.iter().fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
    let (mx, my) = (mx / n, my / n);
    let mean_dist = pts.iter().map(|p| ((p[0] - mx).powi(2) + (p[1] - my).powi(2)).sqrt()).sum::<f64>() / n;
    let s = if mean_dist > 0.0 { std::f64::consts::SQRT_2 / mean_dist } else { 1.0 };
    Matrix3::new(s, 0.0, -s * mx, 0.0, s, -s * my, 0.0, 0.0, 1.0)
}

fn apply_h(h: &Matrix3<f64>, p: [f64; 2]) -> [f64; 2] {
    let v = h * Vector3::new(p[0], p[1], 1.0);
    [v.x / v.z, v.y / v.z]
}

/// Essential matrix with `x_bᵀ·E·x_a = 0` by the linear 8-point method.
pub fn essential_matrix(xa: &[[f64; 2]], xb: &[[f64; 2]]) -> Result<Matrix3<f64>> {
    if xa.len() < 8 {
        return Err(Error::InsufficientCorrespondences { needed: 8, got: xa.len() });
    }
    let ha = conditioning(xa);
    let hb = conditioning(xb);
    let mut a = DMatrix::zeros(xa.len(), 9);
    for (r, (pa, pb)) in xa.iter().zip(xb).enumerate() {
        let [x1, y1] = apply_h(&ha, *pa);
        let [x2, y2] = apply_h(&hb, *pb);
        let row = [x2 * x1, x2 * y1, x2, y2 * x1, y2 * y1, y2, x1, y1, 1.0];
        for (c, v) in row.iter().enumerate() {
            a[(r, c)] = *v;
        }
    }
    let (e, sv) = null_vector(&a);
    // a second null direction means the epipolar geometry is not determined
    if sv[7] <= RANK_TOL * sv[0] {
        return Err(Error::DegenerateMotion("epipolar constraints are rank deficient".into()));
    }
    let e = Matrix3::new(e[0], e[1], e[2], e[3], e[4], e[5], e[6], e[7], e[8]);
    let e = hb.transpose() * e * ha;
    let svd = e.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut s: Vec<f64> = svd.singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    let mean = 0.5 * (s[0] + s[1]);
    // rebuild with the two largest singular values equalized and the third zeroed
    let mut d = svd.singular_values;
    let small = (0..3).min_by(|&i, &j| d[i].total_cmp(&d[j])).unwrap();
    for i in 0..3 {
        d[i] = if i == small { 0.0 } else { mean };
    }
    Ok(u * Matrix3::from_diagonal(&d) * v_t)
}

/// The four `(R, t)` factorizations of an essential matrix, `|t| = 1`.
pub fn decompose_essential(e: &Matrix3<f64>) -> [Pose; 4] {
    let svd = e.svd(true, true);
    let mut u = svd.u.unwrap();
    let mut v_t = svd.v_t.unwrap();
    // order columns so that the null direction is last
    let sv = svd.singular_values;
    let small = (0..3).min_by(|&i, &j| sv[i].total_cmp(&sv[j])).unwrap();
    if small != 2 {
        u.swap_columns(small, 2);
        v_t.swap_rows(small, 2);
    }
    if u.determinant() < 0.0 {
        u.column_mut(2).neg_mut();
    }
    if v_t.determinant() < 0.0 {
        v_t.row_mut(2).neg_mut();
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * v_t;
    let r2 = u * w.transpose() * v_t;
    let t: Vector3<f64> = u.column(2).into_owned();
    [
        Pose::from_na(&r1, &t),
        Pose::from_na(&r1, &-t),
        Pose::from_na(&r2, &t),
        Pose::from_na(&r2, &-t),
    ]
}

/// Relative pose of camera B with respect to camera A (`X_b = R·X_a + t`)
/// from at least eight correspondences; `|t| = 1`.
pub fn estimate_baseline(
    correspondences: &[Correspondence],
    intr_a: &Intrinsics,
    intr_b: &Intrinsics,
) -> Result<Pose> {
    if correspondences.len() < 8 {
        return Err(Error::InsufficientCorrespondences { needed: 8, got: correspondences.len() });
    }
    let xa: Vec<[f64; 2]> = correspondences.iter().map(|c| normalize(intr_a, c.pixel_a)).collect();
    let xb: Vec<[f64; 2]> = correspondences.iter().map(|c| normalize(intr_b, c.pixel_b)).collect();
    relative_pose(&xa, &xb)
}

/// Relative pose from normalized coordinates, choosing the factorization
/// that puts the most points in front of both views.
pub fn relative_pose(xa: &[[f64; 2]], xb: &[[f64; 2]]) -> Result<Pose> {
    let e = essential_matrix(xa, xb)?;
    let identity = Pose::identity();
    let mut best: Option<(usize, Pose)> = None;
    for cand in decompose_essential(&e) {
        let mut front = 0;
        for (a, b) in xa.iter().zip(xb) {
            if let Ok(x) = triangulate_normalized(&[(&identity, *a), (&cand, *b)]) {
                if identity.apply(&x)[2] > 0.0 && cand.apply(&x)[2] > 0.0 {
                    front += 1;
                }
            }
        }
        if best.as_ref().map_or(true, |(n, _)| front > *n) {
            best = Some((front, cand));
        }
    }
    match best {
        Some((n, pose)) if n > 0 => Ok(pose),
        _ => Err(Error::DegenerateMotion("no factorization puts points in front".into())),
    }
}

fn ray_direction(pose: &Pose, x: [f64; 2]) -> Vector3<f64> {
    // camera-frame ray rotated into the world frame
    (pose.rotation_na().transpose() * Vector3::new(x[0], x[1], 1.0)).normalize()
}

/// DLT triangulation from normalized coordinates; poses are camera-from-world.
pub fn triangulate_normalized(views: &[(&Pose, [f64; 2])]) -> Result<Vec3<f64>> {
    if views.len() < 2 {
        return Err(Error::InsufficientCorrespondences { needed: 2, got: views.len() });
    }
    let mut widest: f64 = 0.0;
    let rays: Vec<Vector3<f64>> = views.iter().map(|(p, x)| ray_direction(p, *x)).collect();
    for i in 0..rays.len() {
        for j in i + 1..rays.len() {
            widest = widest.max(rays[i].cross(&rays[j]).norm().min(1.0).asin());
        }
    }
    if widest < MIN_RAY_ANGLE {
        return Err(Error::DegenerateRays { angle: widest });
    }
    let mut a = DMatrix::zeros(2 * views.len(), 4);
    for (k, (pose, x)) in views.iter().enumerate() {
        let r = &pose.rotation;
        let t = &pose.translation;
        let p = |i: usize| [r[i][0], r[i][1], r[i][2], t[i]];
        let (p1, p2, p3) = (p(0), p(1), p(2));
        let mut r1 = [0.0; 4];
        let mut r2 = [0.0; 4];
        for c in 0..4 {
            r1[c] = x[0] * p3[c] - p1[c];
            r2[c] = x[1] * p3[c] - p2[c];
        }
        for (row, vals) in [(2 * k, r1), (2 * k + 1, r2)] {
            let n = vals.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
            for c in 0..4 {
                a[(row, c)] = vals[c] / n;
            }
        }
    }
    let (h, _) = null_vector(&a);
    if h[3].abs() < 1e-300 {
        return Err(Error::DegenerateRays { angle: widest });
    }
    Ok([h[0] / h[3], h[1] / h[3], h[2] / h[3]])
}

/// DLT triangulation of one feature from pixel observations in two or more
/// cameras. `views` holds (camera-from-world pose, intrinsics, pixel).
pub fn triangulate(views: &[(&Pose, &Intrinsics, [f64; 2])]) -> Result<Vec3<f64>> {
    let norm: Vec<(&Pose, [f64; 2])> = views.iter().map(|(p, k, px)| (*p, normalize(k, *px))).collect();
    triangulate_normalized(&norm)
}

/// Camera-from-world pose of a calibrated camera from six or more
/// 2D–3D correspondences.
///
/// The linear estimate is refined by minimizing the reprojection error,
/// started from it and from its depth-reversed mirror images; small or
/// shallow point sets leave the linear solution's depth sign unreliable.
/// The best refined pose with every point in front of the camera wins.
pub fn resect(points: &[Vec3<f64>], pixels: &[[f64; 2]], k: &Intrinsics) -> Result<Pose> {
    let linear = resect_linear(points, pixels, k)?;
    let n = points.len() as f64;
    let mut centroid = [0.0; 3];
    for x in points {
        for i in 0..3 {
            centroid[i] += x[i] / n;
        }
    }
    let depth = linear.apply(&centroid)[2].abs().max(1e-9);
    let mut starts = vec![linear];
    for axis in [[std::f64::consts::PI, 0.0, 0.0], [0.0, std::f64::consts::PI, 0.0], [0.0, 0.0, std::f64::consts::PI]] {
        for base in [linear.rotation, mat_mul(&so3_exp(&[0.0, 0.0, std::f64::consts::PI]), &linear.rotation)] {
            let rotation = mat_mul(&so3_exp(&axis), &base);
            let c = mat_vec(&rotation, &centroid);
            starts.push(Pose { rotation, translation: [-c[0], -c[1], depth - c[2]] });
        }
    }
    let obs: Vec<Obs> = pixels.iter().enumerate().map(|(i, px)| Obs { cam: 0, feat: i, px: *px }).collect();
    let opts = OptimizerOptions::default().with_max_iterations(200);
    let mut best: Option<(f64, Pose)> = None;
    for start in starts {
        let mut problem = Resection { points, intrinsics: *k, pose: start, obs: &obs };
        let Ok(rep) = solve(&mut problem, &[true; 6], &opts, Execution::Sequential) else { continue };
        let pose = problem.pose;
        let in_front = points.iter().all(|x| pose.apply(x)[2] > 0.0);
        if in_front && best.as_ref().map_or(true, |(f, _)| rep.final_objective < *f) {
            best = Some((rep.final_objective, pose));
        }
    }
    best.map(|(_, p)| p)
        .ok_or_else(|| Error::DegenerateConfiguration("no resection places the points in front of the camera".into()))
}

/// Reprojection error of known points over one camera pose.
#[derive(Clone)]
struct Resection<'a> {
    points: &'a [Vec3<f64>],
    intrinsics: Intrinsics,
    pose: Pose,
    obs: &'a [Obs],
}

impl ResidualModel for Resection<'_> {
    fn num_params(&self) -> usize {
        6
    }
    fn num_blocks(&self) -> usize {
        1
    }
    fn block_indices(&self, _block: usize, out: &mut Vec<usize>) {
        out.extend(0..6);
    }
    fn residuals<S: Scalar>(&self, _block: usize, local: &[S], out: &mut Vec<S>) {
        let points: Vec<Vec3<S>> = self.points.iter().map(|x| x.map(S::cst)).collect();
        let camera = (self.intrinsics.to_array().map(S::cst), retract_pose(&self.pose, local));
        pixel_residuals(&points, &[camera], &Pose::identity(), self.obs, out);
    }
}

impl ChartProblem for Resection<'_> {
    fn absorb(&mut self, delta: &[f64]) {
        self.pose = retract_pose(&self.pose, delta).orthonormalized();
    }
}

/// Linear (DLT) resection with the rotation projected onto SO(3).
pub fn resect_linear(points: &[Vec3<f64>], pixels: &[[f64; 2]], k: &Intrinsics) -> Result<Pose> {
    if points.len() < 6 {
        return Err(Error::InsufficientCorrespondences { needed: 6, got: points.len() });
    }
    let mut a = DMatrix::zeros(2 * points.len(), 12);
    for (i, (x, px)) in points.iter().zip(pixels).enumerate() {
        let [u, v] = normalize(k, *px);
        let xh = [x[0], x[1], x[2], 1.0];
        for c in 0..4 {
            a[(2 * i, c)] = xh[c];
            a[(2 * i, 8 + c)] = -u * xh[c];
            a[(2 * i + 1, 4 + c)] = xh[c];
            a[(2 * i + 1, 8 + c)] = -v * xh[c];
        }
    }
    let (p, sv) = null_vector(&a);
    if sv[10] <= RANK_TOL * sv[0] {
        return Err(Error::DegenerateConfiguration("resection points are degenerate".into()));
    }
    let m = Matrix3::new(p[0], p[1], p[2], p[4], p[5], p[6], p[8], p[9], p[10]);
    let t = Vector3::new(p[3], p[7], p[11]);
    let mut scale = m.determinant().abs().cbrt();
    if scale <= 0.0 {
        return Err(Error::DegenerateConfiguration("resection matrix is singular".into()));
    }
    // points must end up in front of the camera
    let depth = |s: f64| {
        points
            .iter()
            .map(|x| (m.row(2).dot(&Vector3::from(*x).transpose()) + t.z) * s)
            .filter(|z| *z > 0.0)
            .count()
    };
    if depth(-1.0 / scale) > depth(1.0 / scale) {
        scale = -scale;
    }
    let rot = orthonormalize(&from_na(&(m / scale)));
    let t = t / scale;
    Ok(Pose { rotation: rot, translation: [t.x, t.y, t.z] })
}
