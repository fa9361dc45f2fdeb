//! The generative model: joint angles → end-effector pose → feature
//! positions → pixel coordinates.
//!
//! Every stage exists in a generic form (`*_generic`, over [`Scalar`]) used by
//! the optimizers, and an `f64` form used everywhere else.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{so3_exp, mat_mul, Pose, PoseParams, Vec3};
use crate::scalar::Scalar;

/// Points closer to the image plane than this are treated as not in front.
pub const DEPTH_EPSILON: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct DhLink {
    pub omega: f64,
    pub d: f64,
    pub a: f64,
    pub alpha: f64,
}

impl DhLink {
    pub fn new(omega: f64, d: f64, a: f64, alpha: f64) -> Self {
        DhLink { omega, d, a, alpha }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.omega, self.d, self.a, self.alpha]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KinematicParams {
    pub base: Pose,
    pub links: Vec<DhLink>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStructure {
    pub coords: Vec<[f64; 3]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn to_array(&self) -> [f64; 4] {
        [self.fx, self.fy, self.cx, self.cy]
    }

    /// Guess used when nothing is known: focal length equal to the image
    /// width, principal point at the image centre.
    pub fn default_guess(width: f64, height: f64) -> Self {
        Intrinsics { fx: width, fy: width, cx: width / 2.0, cy: height / 2.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraParams {
    pub intrinsics: Intrinsics,
    /// Camera-from-world transform.
    pub extrinsics: Pose,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub kinematics: KinematicParams,
    pub features: FeatureStructure,
    pub cameras: Vec<CameraParams>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub in_front: bool,
}

/// Predicted pixel coordinates, indexed `[camera][feature]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelPrediction {
    pub cameras: Vec<Vec<Projection>>,
}

pub fn parameter_count(n: usize, m: usize, c: usize) -> usize {
    6 + 4 * n + 3 * m + 10 * c
}

/// Offsets into the packed parameter vector.
///
/// Order: base (translation, axis-angle), links (ω, d, a, α), feature rows,
/// then per camera fx, fy, cx, cy, extrinsic translation, extrinsic axis-angle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub n: usize,
    pub m: usize,
    pub c: usize,
}

impl Layout {
    pub fn new(n: usize, m: usize, c: usize) -> Self {
        Layout { n, m, c }
    }
    pub fn len(&self) -> usize {
        parameter_count(self.n, self.m, self.c)
    }
    pub fn is_empty(&self) -> bool {
        false
    }
    pub fn base(&self) -> usize {
        0
    }
    pub fn link(&self, i: usize) -> usize {
        6 + 4 * i
    }
    pub fn kinematics_len(&self) -> usize {
        6 + 4 * self.n
    }
    pub fn feature(&self, k: usize) -> usize {
        6 + 4 * self.n + 3 * k
    }
    pub fn camera(&self, i: usize) -> usize {
        6 + 4 * self.n + 3 * self.m + 10 * i
    }
    /// Indices holding rotation (axis-angle) components.
    pub fn rotation_slots(&self) -> Vec<usize> {
        let mut out = vec![3, 4, 5];
        for i in 0..self.c {
            let o = self.camera(i) + 7;
            out.extend([o, o + 1, o + 2]);
        }
        out
    }
}

/// A separately learnable part of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    Kinematics,
    Features,
    Feature(usize),
    Intrinsics(usize),
    Extrinsics(usize),
}

impl ParamGroup {
    /// Packed-vector indices belonging to this group.
    pub fn indices(&self, l: &Layout) -> Vec<usize> {
        match *self {
            ParamGroup::Kinematics => (0..l.kinematics_len()).collect(),
            ParamGroup::Features => (l.feature(0)..l.feature(l.m)).collect(),
            ParamGroup::Feature(k) => (l.feature(k)..l.feature(k) + 3).collect(),
            ParamGroup::Intrinsics(i) => (l.camera(i)..l.camera(i) + 4).collect(),
            ParamGroup::Extrinsics(i) => (l.camera(i) + 4..l.camera(i) + 10).collect(),
        }
    }

    pub fn validate(&self, l: &Layout) -> Result<()> {
        match *self {
            ParamGroup::Feature(k) if k >= l.m => Err(Error::IndexOutOfRange { index: k, len: l.m }),
            ParamGroup::Intrinsics(i) | ParamGroup::Extrinsics(i) if i >= l.c => {
                Err(Error::IndexOutOfRange { index: i, len: l.c })
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamGroup::Kinematics => write!(f, "kinematics"),
            ParamGroup::Features => write!(f, "features"),
            ParamGroup::Feature(k) => write!(f, "feature:{k}"),
            ParamGroup::Intrinsics(i) => write!(f, "intrinsics:{i}"),
            ParamGroup::Extrinsics(i) => write!(f, "extrinsics:{i}"),
        }
    }
}

impl FromStr for ParamGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, idx) = match s.split_once(':') {
            Some((a, b)) => {
                let i = b.parse::<usize>().map_err(|_| Error::Parse(format!("bad group `{s}`")))?;
                (a, Some(i))
            }
            None => (s, None),
        };
        match (name, idx) {
            ("kinematics", None) => Ok(ParamGroup::Kinematics),
            ("features", None) => Ok(ParamGroup::Features),
            ("feature", Some(k)) => Ok(ParamGroup::Feature(k)),
            ("intrinsics", Some(i)) => Ok(ParamGroup::Intrinsics(i)),
            ("extrinsics", Some(i)) => Ok(ParamGroup::Extrinsics(i)),
            _ => Err(Error::Parse(format!("unknown parameter group `{s}`"))),
        }
    }
}

/// Boolean mask over the packed vector: true where the parameter may change.
pub fn free_mask(layout: &Layout, frozen: &[ParamGroup]) -> Vec<bool> {
    let mut mask = vec![true; layout.len()];
    for g in frozen {
        for i in g.indices(layout) {
            mask[i] = false;
        }
    }
    mask
}

/// Mask that frees only the listed groups.
pub fn only_mask(layout: &Layout, free: &[ParamGroup]) -> Vec<bool> {
    let mut mask = vec![false; layout.len()];
    for g in free {
        for i in g.indices(layout) {
            mask[i] = true;
        }
    }
    mask
}

// ---------------------------------------------------------------------------
// generic model stages

/// Classic DH transform `Rz(q + ω)·Tz(d)·Tx(a)·Rx(α)`.
#[inline]
pub fn dh_transform_generic<S: Scalar>(link: &[S; 4], q: S) -> Pose<S> {
    let [omega, d, a, alpha] = *link;
    let (st, ct) = (q + omega).sin_cos();
    let (sa, ca) = alpha.sin_cos();
    Pose {
        rotation: [
            [ct, -(st * ca), st * sa],
            [st, ct * ca, -(ct * sa)],
            [S::zero(), sa, ca],
        ],
        translation: [a * ct, a * st, d],
    }
}

pub fn forward_kinematics_generic<S: Scalar>(base: &Pose<S>, links: &[[S; 4]], joints: &[S]) -> Pose<S> {
    let mut pose = *base;
    for (link, q) in links.iter().zip(joints) {
        pose = pose.compose(&dh_transform_generic(link, *q));
    }
    pose
}

/// Pixel coordinates of a world point; the flag is false behind the camera.
#[inline]
pub fn project_generic<S: Scalar>(intr: &[S; 4], cam: &Pose<S>, p: &Vec3<S>) -> (S, S, bool) {
    let pc = cam.apply(p);
    let z = pc[2];
    let in_front = z.re() > DEPTH_EPSILON;
    let inv = S::one() / z;
    (intr[0] * pc[0] * inv + intr[2], intr[1] * pc[1] * inv + intr[3], in_front)
}

/// Model parameters evaluated on a generic scalar.
#[derive(Clone, Debug)]
pub struct ModelView<S> {
    pub base: Pose<S>,
    pub links: Vec<[S; 4]>,
    pub features: Vec<Vec3<S>>,
    pub cameras: Vec<([S; 4], Pose<S>)>,
}

impl<S: Scalar> ModelView<S> {
    pub fn end_effector(&self, joints: &[S]) -> Pose<S> {
        forward_kinematics_generic(&self.base, &self.links, joints)
    }
}

/// Local chart around a reference model: additive for every parameter except
/// rotations, which are perturbed as `exp(δ)·R_ref`.
#[derive(Clone, Debug)]
pub struct ModelChart {
    pub reference: ModelParams,
    pub layout: Layout,
}

/// Pose perturbed in the chart: translation added, rotation left-multiplied.
#[inline]
pub fn retract_pose<S: Scalar>(reference: &Pose<f64>, delta: &[S]) -> Pose<S> {
    let r = so3_exp(&[delta[3], delta[4], delta[5]]);
    let rref = Pose::<S>::lift(reference);
    Pose {
        rotation: mat_mul(&r, &rref.rotation),
        translation: [
            rref.translation[0] + delta[0],
            rref.translation[1] + delta[1],
            rref.translation[2] + delta[2],
        ],
    }
}

impl ModelChart {
    pub fn new(reference: ModelParams) -> Self {
        let layout = reference.layout();
        ModelChart { reference, layout }
    }

    /// Base and DH rows at chart coordinate `delta`; only the kinematic
    /// slots of `delta` are read.
    pub fn kinematics_view<S: Scalar>(&self, delta: &[S]) -> (Pose<S>, Vec<[S; 4]>) {
        let l = &self.layout;
        let r = &self.reference;
        let base = retract_pose(&r.kinematics.base, &delta[0..6]);
        let links = r
            .kinematics
            .links
            .iter()
            .enumerate()
            .map(|(i, link)| {
                let o = l.link(i);
                let v = link.to_array();
                [delta[o] + v[0], delta[o + 1] + v[1], delta[o + 2] + v[2], delta[o + 3] + v[3]]
            })
            .collect();
        (base, links)
    }

    pub fn view<S: Scalar>(&self, delta: &[S]) -> ModelView<S> {
        let l = &self.layout;
        let r = &self.reference;
        let (base, links) = self.kinematics_view(delta);
        let features = r
            .features
            .coords
            .iter()
            .enumerate()
            .map(|(k, f)| {
                let o = l.feature(k);
                [delta[o] + f[0], delta[o + 1] + f[1], delta[o + 2] + f[2]]
            })
            .collect();
        let cameras = r
            .cameras
            .iter()
            .enumerate()
            .map(|(i, cam)| {
                let o = l.camera(i);
                let k = cam.intrinsics.to_array();
                let intr = [delta[o] + k[0], delta[o + 1] + k[1], delta[o + 2] + k[2], delta[o + 3] + k[3]];
                (intr, retract_pose(&cam.extrinsics, &delta[o + 4..o + 10]))
            })
            .collect();
        ModelView { base, links, features, cameras }
    }

    /// Model at chart coordinate `delta`.
    pub fn retract(&self, delta: &[f64]) -> ModelParams {
        let v = self.view(delta);
        let mut out = self.reference.clone();
        out.kinematics.base = v.base.orthonormalized();
        for (dst, src) in out.kinematics.links.iter_mut().zip(&v.links) {
            *dst = DhLink::new(src[0], src[1], src[2], src[3]);
        }
        out.features.coords = v.features;
        for (dst, (k, e)) in out.cameras.iter_mut().zip(&v.cameras) {
            dst.intrinsics = Intrinsics { fx: k[0], fy: k[1], cx: k[2], cy: k[3] };
            dst.extrinsics = e.orthonormalized();
        }
        out
    }
}

// ---------------------------------------------------------------------------
// f64 API

pub fn dh_link_transform(link: &DhLink, joint_angle: f64) -> Pose {
    dh_transform_generic(&link.to_array(), joint_angle)
}

pub fn forward_kinematics(kin: &KinematicParams, joints: &[f64]) -> Result<Pose> {
    if joints.len() != kin.links.len() {
        return Err(Error::DimensionMismatch { expected: kin.links.len(), got: joints.len() });
    }
    let links: Vec<[f64; 4]> = kin.links.iter().map(|l| l.to_array()).collect();
    Ok(forward_kinematics_generic(&kin.base, &links, joints))
}

pub fn feature_world_coords(f: &FeatureStructure, pose: &Pose) -> Vec<[f64; 3]> {
    f.coords.iter().map(|p| pose.apply(p)).collect()
}

pub fn project(cam: &CameraParams, points: &[[f64; 3]]) -> Vec<Projection> {
    let k = cam.intrinsics.to_array();
    points
        .iter()
        .map(|p| {
            let (u, v, in_front) = project_generic(&k, &cam.extrinsics, p);
            Projection { u, v, in_front }
        })
        .collect()
}

pub fn predict_image_from_pose(
    features: &FeatureStructure,
    cameras: &[CameraParams],
    pose: &Pose,
) -> PixelPrediction {
    let world = feature_world_coords(features, pose);
    PixelPrediction { cameras: cameras.iter().map(|c| project(c, &world)).collect() }
}

pub fn predict_image(params: &ModelParams, joints: &[f64]) -> Result<PixelPrediction> {
    let pose = forward_kinematics(&params.kinematics, joints)?;
    Ok(predict_image_from_pose(&params.features, &params.cameras, &pose))
}

impl ModelParams {
    pub fn n(&self) -> usize {
        self.kinematics.links.len()
    }
    pub fn m(&self) -> usize {
        self.features.coords.len()
    }
    pub fn c(&self) -> usize {
        self.cameras.len()
    }
    pub fn layout(&self) -> Layout {
        Layout::new(self.n(), self.m(), self.c())
    }
    pub fn parameter_count(&self) -> usize {
        self.layout().len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n() == 0 || self.m() == 0 {
            return Err(Error::ConfigInvalid("model needs at least one link and one feature".into()));
        }
        if !self.pack().iter().all(|v| v.is_finite()) {
            return Err(Error::ConfigInvalid("model has non-finite parameters".into()));
        }
        if self.cameras.iter().any(|c| !(c.intrinsics.fx > 0.0 && c.intrinsics.fy > 0.0)) {
            return Err(Error::ConfigInvalid("focal lengths must be positive".into()));
        }
        Ok(())
    }

    /// Flat parameter vector in [`Layout`] order.
    pub fn pack(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        out.extend(self.kinematics.base.to_params().to_array());
        for l in &self.kinematics.links {
            out.extend(l.to_array());
        }
        for f in &self.features.coords {
            out.extend(f);
        }
        for c in &self.cameras {
            out.extend(c.intrinsics.to_array());
            out.extend(c.extrinsics.to_params().to_array());
        }
        out
    }

    pub fn unpack(layout: Layout, v: &[f64]) -> Result<ModelParams> {
        if v.len() != layout.len() {
            return Err(Error::DimensionMismatch { expected: layout.len(), got: v.len() });
        }
        let base = Pose::from_params(&PoseParams::from_slice(&v[0..6]));
        let links = (0..layout.n)
            .map(|i| {
                let o = layout.link(i);
                DhLink::new(v[o], v[o + 1], v[o + 2], v[o + 3])
            })
            .collect();
        let coords = (0..layout.m)
            .map(|k| {
                let o = layout.feature(k);
                [v[o], v[o + 1], v[o + 2]]
            })
            .collect();
        let cameras = (0..layout.c)
            .map(|i| {
                let o = layout.camera(i);
                CameraParams {
                    intrinsics: Intrinsics { fx: v[o], fy: v[o + 1], cx: v[o + 2], cy: v[o + 3] },
                    extrinsics: Pose::from_params(&PoseParams::from_slice(&v[o + 4..o + 10])),
                }
            })
            .collect();
        Ok(ModelParams {
            kinematics: KinematicParams { base, links },
            features: FeatureStructure { coords },
            cameras,
        })
    }

    /// Multiplies every length-valued parameter by `s`; predictions are unchanged.
    pub fn scaled(&self, s: f64) -> ModelParams {
        let mut out = self.clone();
        for t in out.kinematics.base.translation.iter_mut() {
            *t *= s;
        }
        for l in out.kinematics.links.iter_mut() {
            l.d *= s;
            l.a *= s;
        }
        for f in out.features.coords.iter_mut() {
            for v in f.iter_mut() {
                *v *= s;
            }
        }
        for c in out.cameras.iter_mut() {
            for t in c.extrinsics.translation.iter_mut() {
                *t *= s;
            }
        }
        out
    }

    /// Re-expresses the model in a world frame moved by `g`; predictions are
    /// unchanged.
    pub fn reframed(&self, g: &Pose) -> ModelParams {
        let mut out = self.clone();
        out.kinematics.base = g.compose(&self.kinematics.base);
        let ginv = g.inverse();
        for c in out.cameras.iter_mut() {
            c.extrinsics = c.extrinsics.compose(&ginv);
        }
        out
    }
}
