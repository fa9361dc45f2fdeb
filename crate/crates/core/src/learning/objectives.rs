//! Residual models of the learning objectives.
//!
//! Every problem is parameterized by a delta around a reference state:
//! additive for plain parameters, `exp(δ)·R_ref` for rotations. After an
//! optimizer run the delta is absorbed into the reference
//! ([`ChartProblem::absorb`]) so the next run starts at zero again.

use crate::dataset::{Dataset, Sample};
use crate::geometry::{Pose, Vec3};
use crate::model::{
    forward_kinematics_generic, project_generic, retract_pose, CameraParams, DhLink, Intrinsics,
    KinematicParams, ModelChart, ModelParams,
};
use crate::optim::ResidualModel;
use crate::scalar::{Dual, Scalar};

/// A residual model whose parameters are a delta around a movable reference.
pub trait ChartProblem: ResidualModel + Clone {
    fn absorb(&mut self, delta: &[f64]);
}

/// One detection: camera, feature, pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Obs {
    pub cam: usize,
    pub feat: usize,
    pub px: [f64; 2],
}

pub fn sample_observations(s: &Sample) -> Vec<Obs> {
    let mut out = Vec::new();
    for (cam, dets) in s.detections.iter().enumerate() {
        for (feat, d) in dets.iter().enumerate() {
            if let Some(px) = d {
                out.push(Obs { cam, feat, px: *px });
            }
        }
    }
    out
}

pub fn dataset_observations(d: &Dataset) -> Vec<Vec<Obs>> {
    d.samples.iter().map(sample_observations).collect()
}

/// Residual charged per axis for a detection the model places behind its
/// camera. Without it, moving features out of view would zero the loss.
pub const BEHIND_CAMERA_PX: f64 = 1e4;

/// Pixel residuals of one timestep: `(u − u_obs, v − v_obs)` for every
/// detection whose feature lies in front of the camera, and a constant
/// [`BEHIND_CAMERA_PX`] pair for the others.
pub fn pixel_residuals<S: Scalar>(
    features: &[Vec3<S>],
    cameras: &[([S; 4], Pose<S>)],
    pose: &Pose<S>,
    obs: &[Obs],
    out: &mut Vec<S>,
) {
    let mut world: Vec<Option<Vec3<S>>> = vec![None; features.len()];
    for o in obs {
        if o.cam >= cameras.len() || o.feat >= features.len() {
            continue;
        }
        let w = *world[o.feat].get_or_insert_with(|| pose.apply(&features[o.feat]));
        let (k, ext) = &cameras[o.cam];
        let (u, v, in_front) = project_generic(k, ext, &w);
        if in_front {
            out.push(u - o.px[0]);
            out.push(v - o.px[1]);
        } else {
            out.push(S::cst(BEHIND_CAMERA_PX));
            out.push(S::cst(BEHIND_CAMERA_PX));
        }
    }
}

fn lift_joints<S: Scalar>(j: &[f64]) -> Vec<S> {
    j.iter().map(|v| S::cst(*v)).collect()
}

// ---------------------------------------------------------------------------

// ---------------------------------------------------------------------------
// Structured Jacobian of pixel blocks.
//
// A pixel residual depends on the end-effector pose, one feature row and one
// camera. Derivatives of the pose with respect to its parameters are taken
// once per block; each detection then only differentiates a projection with
// respect to the world point and its camera, and the two are chained.

/// Where a pixel block keeps its parameters.
trait PixelBlock {
    /// Local slots the end-effector pose depends on.
    fn pose_slots(&self, block: usize) -> Vec<usize>;
    fn pose<S: Scalar>(&self, block: usize, local: &[S]) -> Pose<S>;
    /// Local slot of feature `k`'s first coordinate and its reference value.
    fn feature(&self, k: usize) -> Option<(usize, Vec3<f64>)>;
    /// Local slot of camera `i`'s first parameter and its reference value.
    fn camera(&self, i: usize) -> Option<(usize, &CameraParams)>;
}

type D = Dual<16>;

fn pixel_block_jacobian<P: PixelBlock>(
    p: &P,
    block: usize,
    local: &[f64],
    obs: &[Obs],
    res: &mut Vec<f64>,
    jac: &mut Vec<f64>,
) {
    let nl = local.len();
    let slots = p.pose_slots(block);
    // column c holds d(R row-major, t)/d local[slots[c]]
    let mut dpose = vec![[0.0; 12]; slots.len()];
    let mut lifted: Vec<D> = local.iter().map(|&v| D::constant(v)).collect();
    let mut pose = None;
    for (c, chunk) in slots.chunks(16).enumerate() {
        for (k, &s) in chunk.iter().enumerate() {
            lifted[s] = D::variable(local[s], k);
        }
        let pd = p.pose(block, &lifted);
        for k in 0..chunk.len() {
            let col = &mut dpose[16 * c + k];
            for i in 0..3 {
                for j in 0..3 {
                    col[3 * i + j] = pd.rotation[i][j].d[k];
                }
                col[9 + i] = pd.translation[i].d[k];
            }
        }
        pose.get_or_insert_with(|| pd.value());
        for &s in chunk {
            lifted[s] = D::constant(local[s]);
        }
    }
    let pose = pose.unwrap_or_else(|| p.pose(block, local));

    let mut cams: Vec<Option<([D; 4], Pose<D>)>> = Vec::new();
    for o in obs {
        let (Some((fs, fref)), Some((cs, cam))) = (p.feature(o.feat), p.camera(o.cam)) else { continue };
        let f = [fref[0] + local[fs], fref[1] + local[fs + 1], fref[2] + local[fs + 2]];
        let w = pose.apply(&f);
        if cams.len() <= o.cam {
            cams.resize(o.cam + 1, None);
        }
        let (intr, ext) = cams[o.cam].get_or_insert_with(|| {
            let k = cam.intrinsics.to_array();
            let intr = std::array::from_fn(|q| D::variable(k[q] + local[cs + q], 3 + q));
            let delta: Vec<D> = (0..6).map(|q| D::variable(local[cs + 4 + q], 7 + q)).collect();
            (intr, retract_pose(&cam.extrinsics, &delta))
        });
        let wd = [D::variable(w[0], 0), D::variable(w[1], 1), D::variable(w[2], 2)];
        let (u, v, in_front) = project_generic(intr, ext, &wd);
        let start = jac.len();
        jac.resize(start + 2 * nl, 0.0);
        if !in_front {
            res.push(BEHIND_CAMERA_PX);
            res.push(BEHIND_CAMERA_PX);
            continue;
        }
        res.push(u.v - o.px[0]);
        res.push(v.v - o.px[1]);
        for (r, e) in [u, v].iter().enumerate() {
            let row = &mut jac[start + r * nl..start + (r + 1) * nl];
            for q in 0..10 {
                row[cs + q] += e.d[3 + q];
            }
            let gw = [e.d[0], e.d[1], e.d[2]];
            for (col, &s) in dpose.iter().zip(&slots) {
                let mut acc = 0.0;
                for i in 0..3 {
                    let dw = col[3 * i] * f[0] + col[3 * i + 1] * f[1] + col[3 * i + 2] * f[2] + col[9 + i];
                    acc += gw[i] * dw;
                }
                row[s] += acc;
            }
            for q in 0..3 {
                row[fs + q] += (0..3).map(|i| gw[i] * pose.rotation[i][q]).sum::<f64>();
            }
        }
    }
}

// ---------------------------------------------------------------------------

/// All model parameters against joint/detection pairs (full-model learning).
#[derive(Clone)]
pub struct FullProblem {
    pub chart: ModelChart,
    pub joints: Vec<Vec<f64>>,
    pub obs: Vec<Vec<Obs>>,
}

impl FullProblem {
    pub fn new(model: ModelParams, joints: Vec<Vec<f64>>, obs: Vec<Vec<Obs>>) -> Self {
        FullProblem { chart: ModelChart::new(model), joints, obs }
    }

    pub fn model(&self) -> &ModelParams {
        &self.chart.reference
    }
}

impl ResidualModel for FullProblem {
    fn num_params(&self) -> usize {
        self.chart.layout.len()
    }
    fn num_blocks(&self) -> usize {
        self.joints.len()
    }
    fn block_indices(&self, _block: usize, out: &mut Vec<usize>) {
        out.extend(0..self.num_params());
    }
    fn residuals<S: Scalar>(&self, block: usize, local: &[S], out: &mut Vec<S>) {
        let view = self.chart.view(local);
        let pose = view.end_effector(&lift_joints::<S>(&self.joints[block]));
        pixel_residuals(&view.features, &view.cameras, &pose, &self.obs[block], out);
    }
    fn jacobian(&self, block: usize, local: &[f64], res: &mut Vec<f64>, jac: &mut Vec<f64>) -> bool {
        pixel_block_jacobian(self, block, local, &self.obs[block], res, jac);
        true
    }
}

impl PixelBlock for FullProblem {
    fn pose_slots(&self, _block: usize) -> Vec<usize> {
        (0..self.chart.layout.kinematics_len()).collect()
    }
    fn pose<S: Scalar>(&self, block: usize, local: &[S]) -> Pose<S> {
        let (base, links) = self.chart.kinematics_view(local);
        forward_kinematics_generic(&base, &links, &lift_joints::<S>(&self.joints[block]))
    }
    fn feature(&self, k: usize) -> Option<(usize, Vec3<f64>)> {
        Some((self.chart.layout.feature(k), *self.chart.reference.features.coords.get(k)?))
    }
    fn camera(&self, i: usize) -> Option<(usize, &CameraParams)> {
        Some((self.chart.layout.camera(i), self.chart.reference.cameras.get(i)?))
    }
}

impl ChartProblem for FullProblem {
    fn absorb(&mut self, delta: &[f64]) {
        self.chart.reference = self.chart.retract(delta);
    }
}

// ---------------------------------------------------------------------------

/// Features, cameras and one free end-effector pose per timestep
/// (camera and structure learning).
///
/// Parameter order: feature rows (3m), cameras (10c, intrinsics then
/// extrinsic translation and rotation), poses (6T).
#[derive(Clone)]
pub struct StructureProblem {
    pub features: Vec<Vec3<f64>>,
    pub cameras: Vec<CameraParams>,
    pub poses: Vec<Pose>,
    pub obs: Vec<Vec<Obs>>,
}

impl StructureProblem {
    fn shared_len(&self) -> usize {
        3 * self.features.len() + 10 * self.cameras.len()
    }

    pub fn camera_offset(&self, i: usize) -> usize {
        3 * self.features.len() + 10 * i
    }

    fn view<S: Scalar>(&self, local: &[S]) -> (Vec<Vec3<S>>, Vec<([S; 4], Pose<S>)>) {
        let features = self
            .features
            .iter()
            .enumerate()
            .map(|(k, f)| [local[3 * k] + f[0], local[3 * k + 1] + f[1], local[3 * k + 2] + f[2]])
            .collect();
        let cameras = self
            .cameras
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let o = self.camera_offset(i);
                let k = c.intrinsics.to_array();
                let intr = [local[o] + k[0], local[o + 1] + k[1], local[o + 2] + k[2], local[o + 3] + k[3]];
                (intr, retract_pose(&c.extrinsics, &local[o + 4..o + 10]))
            })
            .collect();
        (features, cameras)
    }
}

impl ResidualModel for StructureProblem {
    fn num_params(&self) -> usize {
        self.shared_len() + 6 * self.poses.len()
    }
    fn num_blocks(&self) -> usize {
        self.poses.len()
    }
    fn block_indices(&self, block: usize, out: &mut Vec<usize>) {
        let s = self.shared_len();
        out.extend(0..s);
        out.extend(s + 6 * block..s + 6 * block + 6);
    }
    fn residuals<S: Scalar>(&self, block: usize, local: &[S], out: &mut Vec<S>) {
        let s = self.shared_len();
        let (features, cameras) = self.view(local);
        let pose = retract_pose(&self.poses[block], &local[s..s + 6]);
        pixel_residuals(&features, &cameras, &pose, &self.obs[block], out);
    }
    fn jacobian(&self, block: usize, local: &[f64], res: &mut Vec<f64>, jac: &mut Vec<f64>) -> bool {
        pixel_block_jacobian(self, block, local, &self.obs[block], res, jac);
        true
    }
}

impl PixelBlock for StructureProblem {
    fn pose_slots(&self, _block: usize) -> Vec<usize> {
        let s = self.shared_len();
        (s..s + 6).collect()
    }
    fn pose<S: Scalar>(&self, block: usize, local: &[S]) -> Pose<S> {
        let s = self.shared_len();
        retract_pose(&self.poses[block], &local[s..s + 6])
    }
    fn feature(&self, k: usize) -> Option<(usize, Vec3<f64>)> {
        Some((3 * k, *self.features.get(k)?))
    }
    fn camera(&self, i: usize) -> Option<(usize, &CameraParams)> {
        Some((self.camera_offset(i), self.cameras.get(i)?))
    }
}

impl ChartProblem for StructureProblem {
    fn absorb(&mut self, delta: &[f64]) {
        let s = self.shared_len();
        for (k, f) in self.features.iter_mut().enumerate() {
            for i in 0..3 {
                f[i] += delta[3 * k + i];
            }
        }
        for i in 0..self.cameras.len() {
            let o = self.camera_offset(i);
            let c = &mut self.cameras[i];
            c.intrinsics = Intrinsics {
                fx: c.intrinsics.fx + delta[o],
                fy: c.intrinsics.fy + delta[o + 1],
                cx: c.intrinsics.cx + delta[o + 2],
                cy: c.intrinsics.cy + delta[o + 3],
            };
            c.extrinsics = retract_pose(&c.extrinsics, &delta[o + 4..o + 10]).orthonormalized();
        }
        for (t, p) in self.poses.iter_mut().enumerate() {
            *p = retract_pose(p, &delta[s + 6 * t..s + 6 * t + 6]).orthonormalized();
        }
    }
}

// ---------------------------------------------------------------------------

/// Kinematic chain plus a tool offset against target end-effector poses
/// (kinematic learning). The residuals are the entries of
/// `K(j)·H − P` (rotation and translation), so the objective is the squared
/// Frobenius pose distance.
///
/// Parameter order: base (6), links (4n), tool offset (6).
#[derive(Clone)]
pub struct KinematicsProblem {
    pub base: Pose,
    pub links: Vec<DhLink>,
    pub tool: Pose,
    pub joints: Vec<Vec<f64>>,
    pub targets: Vec<Pose>,
}

impl KinematicsProblem {
    pub fn tool_offset(&self) -> usize {
        6 + 4 * self.links.len()
    }

    pub fn kinematics(&self) -> KinematicParams {
        KinematicParams { base: self.base, links: self.links.clone() }
    }
}

impl ResidualModel for KinematicsProblem {
    fn num_params(&self) -> usize {
        12 + 4 * self.links.len()
    }
    fn num_blocks(&self) -> usize {
        self.joints.len()
    }
    fn block_indices(&self, _block: usize, out: &mut Vec<usize>) {
        out.extend(0..self.num_params());
    }
    fn residuals<S: Scalar>(&self, block: usize, local: &[S], out: &mut Vec<S>) {
        let base = retract_pose(&self.base, &local[0..6]);
        let links: Vec<[S; 4]> = self
            .links
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let v = l.to_array();
                let o = 6 + 4 * i;
                [local[o] + v[0], local[o + 1] + v[1], local[o + 2] + v[2], local[o + 3] + v[3]]
            })
            .collect();
        let o = self.tool_offset();
        let tool = retract_pose(&self.tool, &local[o..o + 6]);
        let pose = forward_kinematics_generic(&base, &links, &lift_joints::<S>(&self.joints[block])).compose(&tool);
        let target = &self.targets[block];
        for i in 0..3 {
            for j in 0..3 {
                out.push(pose.rotation[i][j] - target.rotation[i][j]);
            }
            out.push(pose.translation[i] - target.translation[i]);
        }
    }
}

impl ChartProblem for KinematicsProblem {
    fn absorb(&mut self, delta: &[f64]) {
        self.base = retract_pose(&self.base, &delta[0..6]).orthonormalized();
        for (i, l) in self.links.iter_mut().enumerate() {
            let o = 6 + 4 * i;
            *l = DhLink::new(l.omega + delta[o], l.d + delta[o + 1], l.a + delta[o + 2], l.alpha + delta[o + 3]);
        }
        let o = self.tool_offset();
        self.tool = retract_pose(&self.tool, &delta[o..o + 6]).orthonormalized();
    }
}

// ---------------------------------------------------------------------------

/// Full model plus per-timestep joint estimates, with a penalty tying joint
/// differences to the commanded actions (learning without joint readings).
///
/// Parameter order: model chart (layout order), then joints (n per
/// timestep). Blocks `0..T` carry pixel residuals, blocks `T..2T−1` the
/// scaled action residuals `√λ·((jₜ₊₁ − jₜ) − aₜ)`.
#[derive(Clone)]
pub struct UnobservedProblem {
    pub chart: ModelChart,
    pub joints: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub obs: Vec<Vec<Obs>>,
    pub sqrt_lambda: f64,
}

impl UnobservedProblem {
    fn n(&self) -> usize {
        self.chart.layout.n
    }

    pub fn joint_offset(&self, t: usize) -> usize {
        self.chart.layout.len() + self.n() * t
    }
}

impl ResidualModel for UnobservedProblem {
    fn num_params(&self) -> usize {
        self.chart.layout.len() + self.n() * self.joints.len()
    }
    fn num_blocks(&self) -> usize {
        2 * self.joints.len() - 1
    }
    fn block_indices(&self, block: usize, out: &mut Vec<usize>) {
        let t_len = self.joints.len();
        let n = self.n();
        if block < t_len {
            out.extend(0..self.chart.layout.len());
            let o = self.joint_offset(block);
            out.extend(o..o + n);
        } else {
            let t = block - t_len;
            let o = self.joint_offset(t);
            out.extend(o..o + 2 * n);
        }
    }
    fn residuals<S: Scalar>(&self, block: usize, local: &[S], out: &mut Vec<S>) {
        let t_len = self.joints.len();
        let n = self.n();
        if block < t_len {
            let l = self.chart.layout.len();
            let view = self.chart.view(&local[..l]);
            let j: Vec<S> = (0..n).map(|i| local[l + i] + self.joints[block][i]).collect();
            let pose = view.end_effector(&j);
            pixel_residuals(&view.features, &view.cameras, &pose, &self.obs[block], out);
        } else {
            let t = block - t_len;
            for i in 0..n {
                let a = local[i] + self.joints[t][i];
                let b = local[n + i] + self.joints[t + 1][i];
                out.push((b - a - self.actions[t][i]) * self.sqrt_lambda);
            }
        }
    }
    fn jacobian(&self, block: usize, local: &[f64], res: &mut Vec<f64>, jac: &mut Vec<f64>) -> bool {
        if block >= self.joints.len() {
            return false;
        }
        pixel_block_jacobian(self, block, local, &self.obs[block], res, jac);
        true
    }
}

impl PixelBlock for UnobservedProblem {
    fn pose_slots(&self, _block: usize) -> Vec<usize> {
        let l = self.chart.layout.len();
        (0..self.chart.layout.kinematics_len()).chain(l..l + self.n()).collect()
    }
    fn pose<S: Scalar>(&self, block: usize, local: &[S]) -> Pose<S> {
        let l = self.chart.layout.len();
        let (base, links) = self.chart.kinematics_view(local);
        let j: Vec<S> = (0..self.n()).map(|i| local[l + i] + self.joints[block][i]).collect();
        forward_kinematics_generic(&base, &links, &j)
    }
    fn feature(&self, k: usize) -> Option<(usize, Vec3<f64>)> {
        Some((self.chart.layout.feature(k), *self.chart.reference.features.coords.get(k)?))
    }
    fn camera(&self, i: usize) -> Option<(usize, &CameraParams)> {
        Some((self.chart.layout.camera(i), self.chart.reference.cameras.get(i)?))
    }
}

impl ChartProblem for UnobservedProblem {
    fn absorb(&mut self, delta: &[f64]) {
        let l = self.chart.layout.len();
        self.chart.reference = self.chart.retract(&delta[..l]);
        let n = self.n();
        for (t, j) in self.joints.iter_mut().enumerate() {
            for i in 0..n {
                j[i] += delta[l + n * t + i];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{LeastSquares, Objective};
    use crate::simulator::{collect_random, make_world, rng_from_seed, WorldConfig};
    use rand::Rng;

    fn agree<M: ResidualModel>(m: &M, seed: u64) {
        let mut rng = rng_from_seed(seed);
        let base: Vec<f64> = (0..m.num_params()).map(|_| rng.gen_range(-0.01..0.01)).collect();
        let fast = LeastSquares::new(m, base.clone());
        let slow = LeastSquares::new(m, base).model_jacobian(false);
        let y = vec![0.0; fast.num_vars()];
        let (mut ga, mut gb) = (vec![0.0; y.len()], vec![0.0; y.len()]);
        let fa = fast.eval(&y, Some(&mut ga));
        let fb = slow.eval(&y, Some(&mut gb));
        assert!((fa - fb).abs() <= 1e-9 * fb.max(1.0));
        let scale = gb.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for (a, b) in ga.iter().zip(&gb) {
            assert!((a - b).abs() <= 1e-9 * scale, "{a} vs {b}");
        }
    }

    #[test]
    fn structured_jacobians_match_duals() {
        let w = make_world(&WorldConfig::preset("ur5_sim").unwrap()).unwrap();
        let d = collect_random(&w, 6, 0.1, &mut rng_from_seed(2)).unwrap();
        let joints = d.joints().unwrap();
        let obs = dataset_observations(&d);
        agree(&FullProblem::new(w.true_model.clone(), joints.clone(), obs.clone()), 1);
        let poses = joints
            .iter()
            .map(|j| crate::model::forward_kinematics(&w.true_model.kinematics, j).unwrap())
            .collect();
        let structure = StructureProblem {
            features: w.true_model.features.coords.clone(),
            cameras: w.true_model.cameras.clone(),
            poses,
            obs: obs.clone(),
        };
        agree(&structure, 2);
        let actions = joints.windows(2).map(|p| p[1].iter().zip(&p[0]).map(|(b, a)| b - a).collect()).collect();
        let unobserved = UnobservedProblem {
            chart: ModelChart::new(w.true_model.clone()),
            joints,
            actions,
            obs,
            sqrt_lambda: 3.0,
        };
        agree(&unobserved, 3);
    }
}
