//! Simulated robot-camera world used to generate data and as ground truth.
//!
//! The world holds a true [`ModelParams`]; observations are its predictions
//! plus Gaussian pixel noise, masked to what each camera can see. Random-walk
//! data collection adds Gaussian joint-execution noise. All randomness comes
//! from an explicit RNG argument.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Detections, Sample};
use crate::error::{Error, Result};
use crate::geometry::{mat_vec, transpose, Pose, PoseParams};
use crate::model::{
    forward_kinematics, predict_image, CameraParams, DhLink, FeatureStructure, Intrinsics,
    KinematicParams, ModelParams,
};

pub type Rng64 = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng64 {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraConfig {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Camera-from-world transform.
    pub extrinsics: PoseParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    #[serde(default = "default_pixel_sigma")]
    pub pixel_sigma: f64,
    #[serde(default)]
    pub controller_sigma: f64,
}

fn default_pixel_sigma() -> f64 {
    0.5
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { pixel_sigma: default_pixel_sigma(), controller_sigma: 0.0 }
    }
}

/// World description as stored in a world config file (TOML or JSON).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    #[serde(default)]
    pub name: String,
    pub links: Vec<DhLink>,
    /// Datasheet DH values handed to the learner as an initial guess.
    #[serde(default)]
    pub nominal_links: Option<Vec<DhLink>>,
    #[serde(default)]
    pub base: PoseParams,
    pub joint_limits: Vec<[f64; 2]>,
    /// Start configuration of random walks; defaults to the middle of the limits.
    #[serde(default)]
    pub home: Option<Vec<f64>>,
    pub features: Vec<[f64; 3]>,
    pub cameras: Vec<CameraConfig>,
    #[serde(default)]
    pub noise: NoiseConfig,
    pub image_bounds: [f64; 2],
    /// Factory intrinsics guess per camera; defaults to focal = image width.
    #[serde(default)]
    pub intrinsics_guess: Option<Vec<Intrinsics>>,
    #[serde(default)]
    pub seed: u64,
}

/// The simulator's hidden truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldTruth {
    pub true_model: ModelParams,
    pub joint_limits: Vec<(f64, f64)>,
    pub home: Vec<f64>,
    pub pixel_noise_sigma: f64,
    pub controller_noise_sigma: f64,
    pub image_bounds: (f64, f64),
    pub rng_seed: u64,
    pub nominal_links: Option<Vec<DhLink>>,
    pub intrinsics_guess: Vec<Intrinsics>,
}

/// What a learner may know about the world without calibration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldHints {
    pub nominal_links: Option<Vec<DhLink>>,
    pub intrinsics_guess: Vec<Intrinsics>,
    pub home: Vec<f64>,
    pub joint_limits: Vec<(f64, f64)>,
    pub controller_noise_sigma: Option<f64>,
    pub image_bounds: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Perturbation {
    /// Moves camera `index`: its centre is shifted by the delta translation
    /// (world axes) and its orientation pre-rotated by the delta rotation.
    MoveCamera { index: usize, delta: Pose },
    AddCamera { camera: CameraParams },
    AttachFeatures { rows: Vec<[f64; 3]> },
    /// Multiplies every `a` and `d` by `1 + N(0, relative_sigma)`.
    JitterLinks { relative_sigma: f64, seed: u64 },
}

pub fn make_world(cfg: &WorldConfig) -> Result<WorldTruth> {
    let n = cfg.links.len();
    if n == 0 || cfg.features.is_empty() || cfg.cameras.is_empty() {
        return Err(Error::ConfigInvalid("need links, features and cameras".into()));
    }
    if cfg.joint_limits.len() != n {
        return Err(Error::ConfigInvalid(format!(
            "{} joint limits for {} links",
            cfg.joint_limits.len(),
            n
        )));
    }
    if cfg.joint_limits.iter().any(|[lo, hi]| !(lo < hi)) {
        return Err(Error::ConfigInvalid("joint limits need lo < hi".into()));
    }
    if !(cfg.noise.pixel_sigma >= 0.0 && cfg.noise.controller_sigma >= 0.0) {
        return Err(Error::ConfigInvalid("noise sigmas must be non-negative".into()));
    }
    if !(cfg.image_bounds[0] > 0.0 && cfg.image_bounds[1] > 0.0) {
        return Err(Error::ConfigInvalid("image bounds must be positive".into()));
    }
    let cameras: Vec<CameraParams> = cfg
        .cameras
        .iter()
        .map(|c| CameraParams {
            intrinsics: Intrinsics { fx: c.fx, fy: c.fy, cx: c.cx, cy: c.cy },
            extrinsics: Pose::from_params(&c.extrinsics),
        })
        .collect();
    let true_model = ModelParams {
        kinematics: KinematicParams { base: Pose::from_params(&cfg.base), links: cfg.links.clone() },
        features: FeatureStructure { coords: cfg.features.clone() },
        cameras,
    };
    true_model.validate()?;
    let limits: Vec<(f64, f64)> = cfg.joint_limits.iter().map(|l| (l[0], l[1])).collect();
    let home = match &cfg.home {
        Some(h) if h.len() == n => h.clone(),
        Some(_) => return Err(Error::ConfigInvalid("home has wrong length".into())),
        None => limits.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect(),
    };
    if home.iter().zip(&limits).any(|(h, (lo, hi))| h < lo || h > hi) {
        return Err(Error::ConfigInvalid("home outside joint limits".into()));
    }
    let guess = match &cfg.intrinsics_guess {
        Some(g) if g.len() == cfg.cameras.len() => g.clone(),
        Some(_) => return Err(Error::ConfigInvalid("one intrinsics guess per camera".into())),
        None => vec![Intrinsics::default_guess(cfg.image_bounds[0], cfg.image_bounds[1]); cfg.cameras.len()],
    };
    if let Some(nom) = &cfg.nominal_links {
        if nom.len() != n {
            return Err(Error::ConfigInvalid("nominal links length mismatch".into()));
        }
    }
    Ok(WorldTruth {
        true_model,
        joint_limits: limits,
        home,
        pixel_noise_sigma: cfg.noise.pixel_sigma,
        controller_noise_sigma: cfg.noise.controller_sigma,
        image_bounds: (cfg.image_bounds[0], cfg.image_bounds[1]),
        rng_seed: cfg.seed,
        nominal_links: cfg.nominal_links.clone(),
        intrinsics_guess: guess,
    })
}

impl WorldTruth {
    pub fn n(&self) -> usize {
        self.true_model.n()
    }

    pub fn hints(&self) -> WorldHints {
        WorldHints {
            nominal_links: self.nominal_links.clone(),
            intrinsics_guess: self.intrinsics_guess.clone(),
            home: self.home.clone(),
            joint_limits: self.joint_limits.clone(),
            controller_noise_sigma: Some(self.controller_noise_sigma),
            image_bounds: self.image_bounds,
        }
    }

    pub fn with_noise(mut self, pixel_sigma: f64, controller_sigma: f64) -> Self {
        self.pixel_noise_sigma = pixel_sigma;
        self.controller_noise_sigma = controller_sigma;
        self
    }

    pub fn check_limits(&self, joints: &[f64]) -> Result<()> {
        if joints.len() != self.n() {
            return Err(Error::DimensionMismatch { expected: self.n(), got: joints.len() });
        }
        for (i, (q, (lo, hi))) in joints.iter().zip(&self.joint_limits).enumerate() {
            if !(*q >= lo - 1e-12 && *q <= hi + 1e-12) {
                return Err(Error::JointLimitViolation { joint: i, value: *q, lo: *lo, hi: *hi });
            }
        }
        Ok(())
    }

    pub fn clamp_joints(&self, joints: &mut [f64]) {
        for (q, (lo, hi)) in joints.iter_mut().zip(&self.joint_limits) {
            *q = q.clamp(*lo, *hi);
        }
    }

    pub fn random_joints(&self, rng: &mut Rng64) -> Vec<f64> {
        self.joint_limits.iter().map(|(lo, hi)| rng.gen_range(*lo..*hi)).collect()
    }

    fn visible(&self, u: f64, v: f64, in_front: bool) -> bool {
        in_front && u >= 0.0 && v >= 0.0 && u <= self.image_bounds.0 && v <= self.image_bounds.1
    }

    /// Noise-free detections of the true model (visibility-masked).
    pub fn render(&self, joints: &[f64]) -> Result<Detections> {
        let pred = predict_image(&self.true_model, joints)?;
        Ok(pred
            .cameras
            .iter()
            .map(|cam| {
                cam.iter()
                    .map(|p| self.visible(p.u, p.v, p.in_front).then_some([p.u, p.v]))
                    .collect()
            })
            .collect())
    }
}

/// Detections at `joints` with pixel noise; invisible features are absent.
pub fn observe(world: &WorldTruth, joints: &[f64], rng: &mut Rng64) -> Result<Sample> {
    world.check_limits(joints)?;
    let pred = predict_image(&world.true_model, joints)?;
    let noise = Normal::new(0.0, world.pixel_noise_sigma.max(0.0)).expect("sigma >= 0");
    let detections = pred
        .cameras
        .iter()
        .map(|cam| {
            cam.iter()
                .map(|p| {
                    // draw for every feature so the RNG stream does not depend on visibility
                    let (du, dv) = if world.pixel_noise_sigma > 0.0 {
                        (noise.sample(rng), noise.sample(rng))
                    } else {
                        (0.0, 0.0)
                    };
                    let (u, v) = (p.u + du, p.v + dv);
                    world.visible(u, v, p.in_front).then_some([u, v])
                })
                .collect()
        })
        .collect();
    Ok(Sample { joints: Some(joints.to_vec()), detections })
}

/// Random walk from the home configuration.
pub fn collect_random(world: &WorldTruth, t: usize, step_scale: f64, rng: &mut Rng64) -> Result<Dataset> {
    collect_random_from(world, &world.home, t, step_scale, rng)
}

pub fn collect_random_from(
    world: &WorldTruth,
    start: &[f64],
    t: usize,
    step_scale: f64,
    rng: &mut Rng64,
) -> Result<Dataset> {
    if t == 0 {
        return Err(Error::Precondition("need at least one sample".into()));
    }
    let joint_noise = Normal::new(0.0, world.controller_noise_sigma).expect("sigma >= 0");
    let mut joints = start.to_vec();
    world.clamp_joints(&mut joints);
    let mut samples = Vec::with_capacity(t);
    let mut actions = Vec::with_capacity(t.saturating_sub(1));
    for step in 0..t {
        samples.push(observe(world, &joints, rng)?);
        if step + 1 == t {
            break;
        }
        let action: Vec<f64> = joints
            .iter()
            .zip(&world.joint_limits)
            .map(|(q, (lo, hi))| {
                let a = if step_scale > 0.0 { rng.gen_range(-step_scale..=step_scale) } else { 0.0 };
                (q + a).clamp(*lo, *hi) - q
            })
            .collect();
        for (q, a) in joints.iter_mut().zip(&action) {
            *q += a;
        }
        if world.controller_noise_sigma > 0.0 {
            for q in joints.iter_mut() {
                *q += joint_noise.sample(rng);
            }
            world.clamp_joints(&mut joints);
        }
        actions.push(action);
    }
    // a lone sample has no displacements to record
    Ok(Dataset { samples, actions: (!actions.is_empty()).then_some(actions) })
}

/// A simulated robot for closed-loop control: commands are executed with
/// controller noise and clamped to the joint limits, and every observation
/// carries pixel noise.
#[derive(Clone, Debug)]
pub struct SimRobot {
    pub world: WorldTruth,
    joints: Vec<f64>,
    rng: Rng64,
}

impl SimRobot {
    pub fn new(world: WorldTruth, start: &[f64], seed: u64) -> Result<Self> {
        world.check_limits(start)?;
        Ok(SimRobot { joints: start.to_vec(), world, rng: rng_from_seed(seed) })
    }

    /// True joint configuration.
    pub fn true_joints(&self) -> &[f64] {
        &self.joints
    }
}

impl crate::inference::Robot for SimRobot {
    fn num_joints(&self) -> usize {
        self.joints.len()
    }

    fn joints(&self) -> Option<Vec<f64>> {
        Some(self.joints.clone())
    }

    fn observe(&mut self) -> Result<Detections> {
        Ok(observe(&self.world, &self.joints, &mut self.rng)?.detections)
    }

    fn command(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.joints.len() {
            return Err(Error::DimensionMismatch { expected: self.joints.len(), got: delta.len() });
        }
        let sigma = self.world.controller_noise_sigma;
        let noise = Normal::new(0.0, sigma.max(0.0)).expect("sigma >= 0");
        for (q, d) in self.joints.iter_mut().zip(delta) {
            *q += d;
            if sigma > 0.0 {
                *q += noise.sample(&mut self.rng);
            }
        }
        self.world.clamp_joints(&mut self.joints);
        Ok(())
    }
}

pub fn apply_perturbation(world: &WorldTruth, p: &Perturbation) -> Result<WorldTruth> {
    let mut out = world.clone();
    match p {
        Perturbation::MoveCamera { index, delta } => {
            let c = world.true_model.c();
            let cam = out
                .true_model
                .cameras
                .get_mut(*index)
                .ok_or(Error::IndexOutOfRange { index: *index, len: c })?;
            let w = cam.extrinsics.inverse();
            let moved = Pose {
                rotation: crate::geometry::mat_mul(&delta.rotation, &w.rotation),
                translation: [
                    w.translation[0] + delta.translation[0],
                    w.translation[1] + delta.translation[1],
                    w.translation[2] + delta.translation[2],
                ],
            };
            cam.extrinsics = moved.inverse();
        }
        Perturbation::AddCamera { camera } => {
            out.true_model.cameras.push(camera.clone());
            let (w, h) = world.image_bounds;
            out.intrinsics_guess.push(Intrinsics::default_guess(w, h));
        }
        Perturbation::AttachFeatures { rows } => {
            out.true_model.features.coords.extend(rows.iter().copied());
        }
        Perturbation::JitterLinks { relative_sigma, seed } => {
            let mut rng = rng_from_seed(*seed);
            let dist = Normal::new(0.0, *relative_sigma)
                .map_err(|e| Error::ConfigInvalid(e.to_string()))?;
            for l in out.true_model.kinematics.links.iter_mut() {
                l.a *= 1.0 + dist.sample(&mut rng);
                l.d *= 1.0 + dist.sample(&mut rng);
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// presets

/// Camera looking at `target` from `position`, image y pointing down.
pub fn look_at(position: [f64; 3], target: [f64; 3]) -> Pose {
    let sub = |a: [f64; 3], b: [f64; 3]| [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    let norm = |a: [f64; 3]| {
        let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
        [a[0] / n, a[1] / n, a[2] / n]
    };
    let cross = |a: [f64; 3], b: [f64; 3]| {
        [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
    };
    let fwd = norm(sub(target, position));
    let right = norm(cross(fwd, [0.0, 0.0, 1.0]));
    let down = cross(fwd, right);
    // world-from-camera has columns (right, down, forward)
    let r = [
        [right[0], down[0], fwd[0]],
        [right[1], down[1], fwd[1]],
        [right[2], down[2], fwd[2]],
    ];
    let rt = transpose(&r);
    let t = mat_vec(&rt, &position);
    Pose { rotation: rt, translation: [-t[0], -t[1], -t[2]] }
}

/// Twelve corners of three small square markers on a tool block.
fn marker_features() -> Vec<[f64; 3]> {
    let mut out = Vec::new();
    let h = 0.025;
    // marker facing +x
    for (dy, dz) in [(-h, -h), (h, -h), (h, h), (-h, h)] {
        out.push([0.06, 0.01 + dy, 0.08 + dz]);
    }
    // marker facing +y
    for (dx, dz) in [(-h, -h), (h, -h), (h, h), (-h, h)] {
        out.push([-0.01 + dx, 0.06, 0.09 + dz]);
    }
    // marker on top, slightly rotated
    let (s, c) = 0.3f64.sin_cos();
    for (a, b) in [(-h, -h), (h, -h), (h, h), (-h, h)] {
        out.push([0.01 + c * a - s * b, -0.005 + s * a + c * b, 0.14]);
    }
    out
}

/// Extra marker for feature-attachment experiments, in end-effector coordinates.
pub fn extra_marker(k: usize) -> Vec<[f64; 3]> {
    let h = 0.02;
    let corners = [(-h, -h), (h, -h), (h, h), (-h, h)];
    (0..k)
        .map(|i| {
            let (a, b) = corners[i % 4];
            let ring = (i / 4) as f64 * 0.03;
            [-0.06 - ring, -0.02 + a, 0.1 + b]
        })
        .collect()
}

struct ArmTable {
    name: &'static str,
    links: Vec<DhLink>,
    home: Vec<f64>,
    half_range: f64,
    jitter_seed: u64,
    camera_distance: f64,
}

fn arm_table(name: &str) -> Option<ArmTable> {
    use std::f64::consts::FRAC_PI_2 as H;
    let t = match name {
        "ur5_sim" => ArmTable {
            name: "ur5_sim",
            links: vec![
                DhLink::new(0.0, 0.0892, 0.0, H),
                DhLink::new(0.0, 0.0, -0.425, 0.0),
                DhLink::new(0.0, 0.0, -0.3922, 0.0),
                DhLink::new(0.0, 0.1092, 0.0, H),
                DhLink::new(0.0, 0.0947, 0.0, -H),
                DhLink::new(0.0, 0.0823, 0.0, 0.0),
            ],
            home: vec![0.0, -2.0, 1.4, -1.0, -1.5708, 0.3],
            half_range: 0.6,
            jitter_seed: 11,
            camera_distance: 1.5,
        },
        "xarm_sim" => ArmTable {
            name: "xarm_sim",
            links: vec![
                DhLink::new(0.0, 0.267, 0.0, -H),
                DhLink::new(-1.3849, 0.0, 0.2895, 0.0),
                DhLink::new(1.3849, 0.0, 0.0775, -H),
                DhLink::new(0.0, 0.3425, 0.0, H),
                DhLink::new(0.0, 0.0, 0.076, -H),
                DhLink::new(0.0, 0.097, 0.0, 0.0),
            ],
            home: vec![0.0, 0.3, -0.6, 0.0, 0.9, 0.0],
            half_range: 0.6,
            jitter_seed: 23,
            camera_distance: 1.5,
        },
        "baxter_like" => ArmTable {
            name: "baxter_like",
            links: vec![
                DhLink::new(0.0, 0.2704, 0.069, -H),
                DhLink::new(H, 0.0, 0.0, H),
                DhLink::new(0.0, 0.3644, 0.069, -H),
                DhLink::new(0.0, 0.0, 0.0, H),
                DhLink::new(0.0, 0.3743, 0.01, -H),
                DhLink::new(0.0, 0.0, 0.0, H),
                DhLink::new(0.0, 0.2295, 0.0, 0.0),
            ],
            home: vec![0.0, -0.6, 0.0, 1.2, 0.0, 0.9, 0.0],
            half_range: 0.5,
            jitter_seed: 37,
            camera_distance: 2.0,
        },
        _ => return None,
    };
    Some(t)
}

pub const PRESETS: [&str; 3] = ["ur5_sim", "xarm_sim", "baxter_like"];

impl WorldConfig {
    /// Built-in worlds: `ur5_sim`, `xarm_sim` (6 joints) and `baxter_like`
    /// (7 joints), each with 12 features and 2 cameras.
    ///
    /// The nominal DH table is the arm's datasheet; the true table deviates
    /// from it by a few millimetres and a fraction of a degree. Cameras sit
    /// 1.5 m (2 m for the 7-joint arm) from the centre of the reachable workspace, ±30° apart.
    pub fn preset(name: &str) -> Result<WorldConfig> {
        let table = arm_table(name)
            .ok_or_else(|| Error::ConfigInvalid(format!("unknown preset `{name}`")))?;
        let mut rng = rng_from_seed(table.jitter_seed);
        let len_noise = Normal::new(0.0, 0.003).unwrap();
        let ang_noise = Normal::new(0.0, 0.008).unwrap();
        let links: Vec<DhLink> = table
            .links
            .iter()
            .map(|l| DhLink {
                omega: l.omega + ang_noise.sample(&mut rng),
                d: l.d + if l.d != 0.0 { len_noise.sample(&mut rng) } else { 0.0 },
                a: l.a + if l.a != 0.0 { len_noise.sample(&mut rng) } else { 0.0 },
                alpha: l.alpha + ang_noise.sample(&mut rng),
            })
            .collect();
        let limits: Vec<[f64; 2]> =
            table.home.iter().map(|h| [h - table.half_range, h + table.half_range]).collect();
        let features = marker_features();

        // centre of the feature cloud over the reachable workspace
        let kin = KinematicParams { base: Pose::identity(), links: links.clone() };
        let mut centre = [0.0; 3];
        let mut count = 0.0;
        for _ in 0..200 {
            let j: Vec<f64> = limits.iter().map(|[lo, hi]| rng.gen_range(*lo..*hi)).collect();
            let p = forward_kinematics(&kin, &j)?;
            for f in &features {
                let w = p.apply(f);
                for i in 0..3 {
                    centre[i] += w[i];
                }
                count += 1.0;
            }
        }
        for c in centre.iter_mut() {
            *c /= count;
        }
        let horiz = {
            let n = (centre[0] * centre[0] + centre[1] * centre[1]).sqrt().max(1e-9);
            [centre[0] / n, centre[1] / n]
        };
        let (width, height) = (640.0, 480.0);
        let distance = table.camera_distance;
        let elevation = 20f64.to_radians();
        let intrinsics = [(615.0, 612.0, 322.0, 238.0), (608.0, 606.0, 318.5, 243.0)];
        let cameras = [-30f64, 30.0]
            .iter()
            .zip(intrinsics)
            .map(|(az, (fx, fy, cx, cy))| {
                let (s, c) = az.to_radians().sin_cos();
                let dir = [c * horiz[0] - s * horiz[1], s * horiz[0] + c * horiz[1]];
                let pos = [
                    centre[0] + distance * elevation.cos() * dir[0],
                    centre[1] + distance * elevation.cos() * dir[1],
                    centre[2] + distance * elevation.sin(),
                ];
                CameraConfig { fx, fy, cx, cy, extrinsics: look_at(pos, centre).to_params() }
            })
            .collect();
        Ok(WorldConfig {
            name: table.name.to_string(),
            links,
            nominal_links: Some(table.links.clone()),
            base: PoseParams::default(),
            joint_limits: limits,
            home: Some(table.home.clone()),
            features,
            cameras,
            noise: NoiseConfig::default(),
            image_bounds: [width, height],
            intrinsics_guess: None,
            seed: 0,
        })
    }

    pub fn with_noise(mut self, pixel_sigma: f64, controller_sigma: f64) -> Self {
        self.noise = NoiseConfig { pixel_sigma, controller_sigma };
        self
    }

    pub fn from_toml(s: &str) -> Result<WorldConfig> {
        toml::from_str(s).map_err(|e| Error::ConfigInvalid(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::ConfigInvalid(e.to_string()))
    }

    /// Reads a preset name, or a `.toml` / `.json` world file.
    pub fn load(spec: &str) -> Result<WorldConfig> {
        if arm_table(spec).is_some() {
            return WorldConfig::preset(spec);
        }
        let text = std::fs::read_to_string(spec)
            .map_err(|e| Error::ConfigInvalid(format!("cannot read world `{spec}`: {e}")))?;
        if spec.ends_with(".json") {
            serde_json::from_str(&text).map_err(|e| Error::ConfigInvalid(e.to_string()))
        } else {
            WorldConfig::from_toml(&text)
        }
    }
}
