//! Inverting the learned model: pose from an image, joints from a pose,
//! joints from an image, and the closed-loop servo controller built on them.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Detections;
use crate::error::{Error, Result};
use crate::geometry::{Pose, Vec3};
use crate::learning::{pixel_loss, pixel_residuals, ChartProblem, Obs};
use crate::model::{
    forward_kinematics, forward_kinematics_generic, predict_image, retract_pose, CameraParams, ModelParams,
};
use crate::optim::{minimize_bounded, Bounds, LeastSquares, OptimizerOptions, ResidualModel};
use crate::par::Execution;
use crate::scalar::Scalar;
use crate::simulator::rng_from_seed;

/// Desired pixel location per camera and feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServoTarget {
    pub pixels: Detections,
}

impl ServoTarget {
    pub fn new(pixels: Detections) -> Result<Self> {
        let t = ServoTarget { pixels };
        t.validate()?;
        Ok(t)
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().flatten().filter(|p| p.is_some()).count()
    }

    pub fn validate(&self) -> Result<()> {
        let got = self.count();
        if got < MIN_DETECTIONS {
            return Err(Error::InsufficientDetections { needed: MIN_DETECTIONS, got });
        }
        if self.pixels.iter().flatten().flatten().any(|p| !(p[0].is_finite() && p[1].is_finite())) {
            return Err(Error::Precondition("target pixels must be finite".into()));
        }
        Ok(())
    }
}

/// Fewest detections a pose can be recovered from.
pub const MIN_DETECTIONS: usize = 4;

/// Settings shared by the inference operations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferOptions {
    /// Joint box constraints, enforced by projection.
    #[serde(default)]
    pub limits: Option<Vec<(f64, f64)>>,
    pub optimizer: OptimizerOptions,
    /// Seed of the random restarts.
    #[serde(default)]
    pub seed: u64,
    /// Pose distance below which inverse kinematics counts as solved.
    pub ik_tolerance: f64,
}

impl Default for InferOptions {
    fn default() -> Self {
        InferOptions { limits: None, optimizer: OptimizerOptions::default(), seed: 0, ik_tolerance: 1e-6 }
    }
}

impl InferOptions {
    pub fn with_limits(mut self, limits: Vec<(f64, f64)>) -> Self {
        self.limits = Some(limits);
        self
    }
}

fn observations(d: &Detections) -> Vec<Obs> {
    let mut out = Vec::new();
    for (cam, row) in d.iter().enumerate() {
        for (feat, p) in row.iter().enumerate() {
            if let Some(px) = p {
                out.push(Obs { cam, feat, px: *px });
            }
        }
    }
    out
}


fn model_cameras<S: Scalar>(cameras: &[CameraParams]) -> Vec<([S; 4], Pose<S>)> {
    cameras.iter().map(|c| (c.intrinsics.to_array().map(S::cst), Pose::lift(&c.extrinsics))).collect()
}

// ---------------------------------------------------------------------------

/// Pixel loss of the truncated model over one end-effector pose.
#[derive(Clone)]
pub struct PoseProblem<'a> {
    pub features: &'a [Vec3<f64>],
    pub cameras: &'a [CameraParams],
    pub pose: Pose,
    pub obs: Vec<Obs>,
}

impl ResidualModel for PoseProblem<'_> {
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
        let features: Vec<Vec3<S>> = self.features.iter().map(|f| f.map(S::cst)).collect();
        let pose = retract_pose(&self.pose, local);
        pixel_residuals(&features, &model_cameras(self.cameras), &pose, &self.obs, out);
    }
}

impl ChartProblem for PoseProblem<'_> {
    fn absorb(&mut self, delta: &[f64]) {
        self.pose = retract_pose(&self.pose, delta).orthonormalized();
    }
}

/// Entries of `K(j) − P` over the joints (inverse kinematics).
pub struct IkProblem<'a> {
    pub model: &'a ModelParams,
    pub target: Pose,
}

impl ResidualModel for IkProblem<'_> {
    fn num_params(&self) -> usize {
        self.model.n()
    }
    fn num_blocks(&self) -> usize {
        1
    }
    fn block_indices(&self, _block: usize, out: &mut Vec<usize>) {
        out.extend(0..self.model.n());
    }
    fn residuals<S: Scalar>(&self, _block: usize, j: &[S], out: &mut Vec<S>) {
        let kin = &self.model.kinematics;
        let links: Vec<[S; 4]> = kin.links.iter().map(|l| l.to_array().map(S::cst)).collect();
        let pose = forward_kinematics_generic(&Pose::lift(&kin.base), &links, j);
        for i in 0..3 {
            for k in 0..3 {
                out.push(pose.rotation[i][k] - self.target.rotation[i][k]);
            }
            out.push(pose.translation[i] - self.target.translation[i]);
        }
    }
}

/// Pixel loss of the full model over the joints.
pub struct ImageJointsProblem<'a> {
    pub model: &'a ModelParams,
    pub obs: Vec<Obs>,
}

impl ResidualModel for ImageJointsProblem<'_> {
    fn num_params(&self) -> usize {
        self.model.n()
    }
    fn num_blocks(&self) -> usize {
        1
    }
    fn block_indices(&self, _block: usize, out: &mut Vec<usize>) {
        out.extend(0..self.model.n());
    }
    fn residuals<S: Scalar>(&self, _block: usize, j: &[S], out: &mut Vec<S>) {
        let kin = &self.model.kinematics;
        let links: Vec<[S; 4]> = kin.links.iter().map(|l| l.to_array().map(S::cst)).collect();
        let pose = forward_kinematics_generic(&Pose::lift(&kin.base), &links, j);
        let features: Vec<Vec3<S>> = self.model.features.coords.iter().map(|f| f.map(S::cst)).collect();
        pixel_residuals(&features, &model_cameras(&self.model.cameras), &pose, &self.obs, out);
    }
}

// ---------------------------------------------------------------------------

/// Minimizes a joint-space problem from `j0` inside `limits`, then refines
/// with projected Gauss-Newton steps. Returns the joints and `Σr²`.
fn fit_joints<M: ResidualModel>(
    problem: &M,
    j0: &[f64],
    limits: Option<&[(f64, f64)]>,
    opts: &OptimizerOptions,
) -> Result<(Vec<f64>, f64)> {
    let n = j0.len();
    let (lo, hi): (Vec<f64>, Vec<f64>) = match limits {
        Some(l) => l.iter().copied().unzip(),
        None => (vec![f64::NEG_INFINITY; n], vec![f64::INFINITY; n]),
    };
    let mut j: Vec<f64> = j0.iter().zip(lo.iter().zip(&hi)).map(|(v, (a, b))| v.clamp(*a, *b)).collect();
    let ls = LeastSquares::new(problem, j.clone()).execution(Execution::Sequential);
    let bounds = Bounds {
        lo: lo.iter().zip(&j).map(|(l, b)| l - b).collect(),
        hi: hi.iter().zip(&j).map(|(h, b)| h - b).collect(),
    };
    let (y, rep) = minimize_bounded(&ls, &vec![0.0; n], &bounds, opts)?;
    j = ls.params_at(&y);
    let mut f = rep.final_objective;
    let mut damping = 1e-6;
    for _ in 0..opts.polish_iterations.min(20) {
        if f == 0.0 {
            break;
        }
        let ls = LeastSquares::new(problem, j.clone()).execution(Execution::Sequential);
        let Some((y, _, f0, _)) = ls.gauss_newton_step(&mut damping) else { break };
        let mut next = ls.params_at(&y);
        for (v, (a, b)) in next.iter_mut().zip(lo.iter().zip(&hi)) {
            *v = v.clamp(*a, *b);
        }
        let fn_ = crate::optim::Objective::eval(&LeastSquares::new(problem, next.clone()), &vec![0.0; n], None);
        if !(fn_ < f0) {
            break;
        }
        j = next;
        let done = fn_ > f0 * (1.0 - 1e-10);
        f = fn_;
        if done {
            break;
        }
    }
    Ok((j, f))
}

/// Runs damped Gauss-Newton steps on a chart problem until the objective
/// stops decreasing; returns the final objective.
fn gauss_newton_fit<P: ChartProblem>(problem: &mut P, max_steps: usize) -> f64 {
    let n = problem.num_params();
    let mut damping = 1e-6;
    for _ in 0..max_steps {
        let ls = LeastSquares::new(&*problem, vec![0.0; n]).execution(Execution::Sequential);
        let Some((y, f, f0, _)) = ls.gauss_newton_step(&mut damping) else { break };
        let delta = ls.params_at(&y);
        problem.absorb(&delta);
        if f0 - f <= 1e-12 * f0 {
            return f;
        }
    }
    let ls = LeastSquares::new(&*problem, vec![0.0; n]).execution(Execution::Sequential);
    crate::optim::Objective::eval(&ls, &vec![0.0; n], None)
}

/// End-effector pose that best explains `detections` under the model's
/// features and cameras. Starts at `init` and at four random rotations about
/// its position, keeping the lowest residual.
pub fn infer_pose_from_image(
    model: &ModelParams,
    detections: &Detections,
    init: &Pose,
    opts: &InferOptions,
) -> Result<Pose> {
    let obs: Vec<Obs> = observations(detections)
        .into_iter()
        .filter(|o| o.cam < model.c() && o.feat < model.m())
        .collect();
    if obs.len() < MIN_DETECTIONS {
        return Err(Error::InsufficientDetections { needed: MIN_DETECTIONS, got: obs.len() });
    }
    let mut rng = rng_from_seed(opts.seed ^ 0x706f_7365);
    let mut starts = vec![*init];
    for _ in 0..4 {
        let axis: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let norm = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt().max(1e-12);
        let angle = rng.gen_range(0.0..std::f64::consts::PI);
        let w = axis.map(|a| a / norm * angle);
        let r = Pose::exp([0.0; 3], &w);
        starts.push(Pose { rotation: r.compose(init).rotation, translation: init.translation });
    }
    let mut results: Vec<(f64, Pose)> = Vec::new();
    for start in starts {
        let mut problem = PoseProblem {
            features: &model.features.coords,
            cameras: &model.cameras,
            pose: start,
            obs: obs.clone(),
        };
        let f = gauss_newton_fit(&mut problem, opts.optimizer.max_iterations.min(100));
        results.push((f, problem.pose));
    }
    results.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (best_f, best) = results[0];
    let tie = 1e-9 * best_f.max(1e-12) + 1e-18;
    for (f, p) in &results[1..] {
        if (f - best_f).abs() <= tie {
            let distance = best.distance_sq(p).sqrt();
            if distance > 1e-3 {
                return Err(Error::AmbiguousPose { distance });
            }
        }
    }
    Ok(best)
}

fn random_start(j_init: &[f64], limits: Option<&[(f64, f64)]>, spread: f64, rng: &mut impl Rng) -> Vec<f64> {
    match limits {
        Some(l) => l.iter().map(|(lo, hi)| rng.gen_range(*lo..=*hi)).collect(),
        None => j_init.iter().map(|v| v + rng.gen_range(-spread..spread)).collect(),
    }
}

/// Joints whose forward kinematics reach `target`. Starts at `j_init`,
/// then up to eight random restarts; fails with the best joints found when
/// none gets within `opts.ik_tolerance`.
pub fn infer_joints_from_pose(model: &ModelParams, target: &Pose, j_init: &[f64], opts: &InferOptions) -> Result<Vec<f64>> {
    if j_init.len() != model.n() {
        return Err(Error::DimensionMismatch { expected: model.n(), got: j_init.len() });
    }
    if !target.is_finite() {
        return Err(Error::Precondition("target pose must be finite".into()));
    }
    let problem = IkProblem { model, target: *target };
    let limits = opts.limits.as_deref();
    let mut rng = rng_from_seed(opts.seed ^ 0x696b);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for attempt in 0..9 {
        let start = if attempt == 0 { j_init.to_vec() } else { random_start(j_init, limits, std::f64::consts::PI, &mut rng) };
        let (j, f) = fit_joints(&problem, &start, limits, &opts.optimizer)?;
        let residual = f.sqrt();
        if residual <= opts.ik_tolerance {
            return Ok(j);
        }
        if best.as_ref().map_or(true, |(b, _)| residual < *b) {
            best = Some((residual, j));
        }
    }
    let (residual, best) = best.expect("at least one attempt");
    Err(Error::IkNotConverged { residual, best })
}

/// Joints whose predicted image best matches `target` (pixel loss through
/// the full model). Starts at `j_init` plus four random restarts near it;
/// the best result is returned even when it does not reach the target.
pub fn infer_joints_from_image(
    model: &ModelParams,
    target: &ServoTarget,
    j_init: &[f64],
    opts: &InferOptions,
) -> Result<Vec<f64>> {
    infer_joints_with_residual(model, target, j_init, opts).map(|(j, _)| j)
}

/// [`infer_joints_from_image`] also returning the RMS pixel residual.
pub fn infer_joints_with_residual(
    model: &ModelParams,
    target: &ServoTarget,
    j_init: &[f64],
    opts: &InferOptions,
) -> Result<(Vec<f64>, f64)> {
    target.validate()?;
    if j_init.len() != model.n() {
        return Err(Error::DimensionMismatch { expected: model.n(), got: j_init.len() });
    }
    let obs: Vec<Obs> = observations(&target.pixels)
        .into_iter()
        .filter(|o| o.cam < model.c() && o.feat < model.m())
        .collect();
    if obs.len() < MIN_DETECTIONS {
        return Err(Error::InsufficientDetections { needed: MIN_DETECTIONS, got: obs.len() });
    }
    let count = obs.len() as f64;
    let problem = ImageJointsProblem { model, obs };
    let limits = opts.limits.as_deref();
    let mut rng = rng_from_seed(opts.seed ^ 0x696d_6167);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for attempt in 0..5 {
        let start = if attempt == 0 {
            j_init.to_vec()
        } else {
            let near = random_start(j_init, None, 0.5, &mut rng);
            match limits {
                Some(l) => near.iter().zip(l).map(|(v, (lo, hi))| v.clamp(*lo, *hi)).collect(),
                None => near,
            }
        };
        let Ok((j, f)) = fit_joints(&problem, &start, limits, &opts.optimizer) else { continue };
        if best.as_ref().map_or(true, |(b, _)| f < *b) {
            best = Some((f, j));
        }
    }
    let (f, j) = best.ok_or(Error::InferenceNotConverged)?;
    if !f.is_finite() || f >= crate::learning::BEHIND_CAMERA_PX.powi(2) {
        return Err(Error::InferenceNotConverged);
    }
    Ok((j, (f / count).sqrt()))
}

// ---------------------------------------------------------------------------

/// Controller settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServoConfig {
    /// Fraction of the inferred displacement commanded per step, in (0, 1].
    pub gain: f64,
    /// Per-joint clamp on each command (rad).
    pub max_step: f64,
    pub max_steps: usize,
    /// Stop once the pixel RMS to the target falls below this.
    pub stop_px: f64,
    /// Stop once every joint command is smaller than this (rad).
    pub min_command: f64,
    /// Read the current joints from encoders rather than infer them.
    pub use_encoders: bool,
    pub infer: InferOptions,
}

impl Default for ServoConfig {
    fn default() -> Self {
        ServoConfig {
            gain: 0.7,
            max_step: 0.2,
            max_steps: 50,
            stop_px: 1e-6,
            min_command: 1e-9,
            use_encoders: true,
            infer: InferOptions::default(),
        }
    }
}

impl ServoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gain > 0.0 && self.gain <= 1.0) {
            return Err(Error::ConfigInvalid("gain must lie in (0, 1]".into()));
        }
        if !(self.max_step > 0.0) || self.max_steps == 0 || !(self.stop_px >= 0.0) || !(self.min_command >= 0.0) {
            return Err(Error::ConfigInvalid("servo limits must be positive".into()));
        }
        Ok(())
    }
}

/// A robot the servo loop can drive.
pub trait Robot {
    fn num_joints(&self) -> usize;
    /// Encoder reading, if the robot has encoders.
    fn joints(&self) -> Option<Vec<f64>>;
    fn observe(&mut self) -> Result<Detections>;
    /// Executes a joint displacement.
    fn command(&mut self, delta: &[f64]) -> Result<()>;
}

/// Masked RMS pixel distance between detections and target.
pub fn target_error(detections: &Detections, target: &ServoTarget) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0;
    for (dc, tc) in detections.iter().zip(&target.pixels) {
        for (d, t) in dc.iter().zip(tc) {
            if let (Some(d), Some(t)) = (d, t) {
                sum += (d[0] - t[0]).powi(2) + (d[1] - t[1]).powi(2);
                count += 1;
            }
        }
    }
    (count > 0).then(|| (sum / count as f64).sqrt())
}

/// One controller step: `gain·(ĵ − j)` with `ĵ` inferred from the target,
/// each joint clamped to `max_step`. `current` is the encoder reading; without
/// one the current joints are inferred from `detections`, starting at `guess`.
pub fn servo_step(
    model: &ModelParams,
    detections: &Detections,
    current: Option<&[f64]>,
    guess: &[f64],
    target: &ServoTarget,
    cfg: &ServoConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    cfg.validate()?;
    let j_now = match current {
        Some(j) => j.to_vec(),
        None => infer_joints_from_image(model, &ServoTarget::new(detections.clone())?, guess, &cfg.infer)?,
    };
    let j_hat = infer_joints_from_image(model, target, &j_now, &cfg.infer)?;
    let delta = j_hat
        .iter()
        .zip(&j_now)
        .map(|(h, c)| (cfg.gain * (h - c)).clamp(-cfg.max_step, cfg.max_step))
        .collect();
    Ok((delta, j_hat))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServoStep {
    pub step: usize,
    pub command: Vec<f64>,
    /// Pixel RMS to the target after the step; `None` when nothing overlapped.
    pub rms_px: Option<f64>,
    pub inferred_joints: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServoTrace {
    pub initial_rms_px: Option<f64>,
    pub steps: Vec<ServoStep>,
    pub converged: bool,
}

impl ServoTrace {
    pub fn final_rms_px(&self) -> Option<f64> {
        self.steps.last().map_or(self.initial_rms_px, |s| s.rms_px)
    }

    /// CSV with columns `step, rms_px, dj0, …`; step 0 is the start.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let n = self.steps.first().map_or(0, |s| s.command.len());
        let fmt = |r: Option<f64>| r.map_or(String::new(), |v| v.to_string());
        let mut header = vec!["step".to_string(), "rms_px".to_string()];
        header.extend((0..n).map(|i| format!("dj{i}")));
        writeln!(out, "{}", header.join(","))?;
        let mut first = vec!["0".to_string(), fmt(self.initial_rms_px)];
        first.extend((0..n).map(|_| "0".to_string()));
        writeln!(out, "{}", first.join(","))?;
        for s in &self.steps {
            let mut rec = vec![s.step.to_string(), fmt(s.rms_px)];
            rec.extend(s.command.iter().map(|v| v.to_string()));
            writeln!(out, "{}", rec.join(","))?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Servos `robot` toward `target` until the pixel RMS drops below
/// `cfg.stop_px`, the commands fall below `cfg.min_command`, or
/// `cfg.max_steps` commands were sent. Inference failures
/// end the loop early; they are part of the trace, not errors.
pub fn servo_loop<R: Robot + ?Sized>(
    model: &ModelParams,
    robot: &mut R,
    target: &ServoTarget,
    cfg: &ServoConfig,
) -> Result<ServoTrace> {
    cfg.validate()?;
    target.validate()?;
    let mut detections = robot.observe()?;
    let initial = target_error(&detections, target);
    let mut trace = ServoTrace { initial_rms_px: initial, steps: Vec::new(), converged: false };
    if initial.is_some_and(|e| e < cfg.stop_px) {
        trace.converged = true;
        return Ok(trace);
    }
    let mut guess = robot.joints().unwrap_or_else(|| vec![0.0; robot.num_joints()]);
    for step in 1..=cfg.max_steps {
        let encoders = if cfg.use_encoders { robot.joints() } else { None };
        let Ok((delta, j_hat)) = servo_step(model, &detections, encoders.as_deref(), &guess, target, cfg) else {
            break;
        };
        let stalled = delta.iter().all(|d| d.abs() < cfg.min_command);
        robot.command(&delta)?;
        detections = robot.observe()?;
        let rms = target_error(&detections, target);
        guess = encoders.unwrap_or_else(|| guess.clone()).iter().zip(&delta).map(|(a, b)| a + b).collect();
        trace.steps.push(ServoStep { step, command: delta, rms_px: rms, inferred_joints: j_hat });
        if rms.is_some_and(|e| e < cfg.stop_px) {
            trace.converged = true;
            break;
        }
        if stalled {
            break;
        }
    }
    Ok(trace)
}

/// Pixel RMS of the model's prediction at `joints` against `target`.
pub fn predicted_error(model: &ModelParams, joints: &[f64], target: &ServoTarget) -> Result<f64> {
    let pred = predict_image(model, joints)?;
    let (sum, count) = pixel_loss(&pred, &target.pixels);
    Ok(if count == 0 { 0.0 } else { (sum / count as f64).sqrt() })
}

/// Forward kinematics of the model, for callers holding only inference types.
pub fn end_effector(model: &ModelParams, joints: &[f64]) -> Result<Pose> {
    forward_kinematics(&model.kinematics, joints)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{make_world, SimRobot, WorldConfig, WorldTruth};

    fn world(name: &str) -> WorldTruth {
        make_world(&WorldConfig::preset(name).unwrap().with_noise(0.0, 0.0)).unwrap()
    }

    fn opts(w: &WorldTruth) -> InferOptions {
        InferOptions::default().with_limits(w.joint_limits.clone())
    }

    fn nearby(w: &WorldTruth, j: &[f64], spread: f64, seed: u64) -> Vec<f64> {
        let mut rng = rng_from_seed(seed);
        let mut out: Vec<f64> = j.iter().map(|v| v + rng.gen_range(-spread..spread)).collect();
        w.clamp_joints(&mut out);
        out
    }

    #[test]
    fn pose_from_image_recovers_forward_kinematics() {
        let w = world("ur5_sim");
        let j = w.home.iter().map(|v| v + 0.2).collect::<Vec<_>>();
        let truth = end_effector(&w.true_model, &j).unwrap();
        let det = w.render(&j).unwrap();
        let start = end_effector(&w.true_model, &w.home).unwrap();
        let pose = infer_pose_from_image(&w.true_model, &det, &start, &InferOptions::default()).unwrap();
        assert!(pose.distance_sq(&truth).sqrt() < 1e-6);
    }

    #[test]
    fn pose_needs_four_detections() {
        let w = world("ur5_sim");
        let mut det = w.render(&w.home).unwrap();
        let mut kept = 0;
        for p in det.iter_mut().flatten() {
            if p.is_some() {
                kept += 1;
                if kept > 3 {
                    *p = None;
                }
            }
        }
        let start = Pose::identity();
        assert!(matches!(
            infer_pose_from_image(&w.true_model, &det, &start, &InferOptions::default()),
            Err(Error::InsufficientDetections { got: 3, .. })
        ));
    }

    #[test]
    fn inverse_kinematics_round_trip() {
        let w = world("ur5_sim");
        let mut rng = rng_from_seed(5);
        for seed in 0..3 {
            let j = w.random_joints(&mut rng);
            let target = end_effector(&w.true_model, &j).unwrap();
            let init = nearby(&w, &j, 0.3, seed);
            let got = infer_joints_from_pose(&w.true_model, &target, &init, &opts(&w)).unwrap();
            let reached = end_effector(&w.true_model, &got).unwrap();
            assert!(reached.distance_sq(&target).sqrt() < 1e-6, "seed {seed}");
            assert!(w.check_limits(&got).is_ok());
        }
    }

    #[test]
    fn unreachable_pose_reports_best_effort() {
        let w = world("ur5_sim");
        let mut target = end_effector(&w.true_model, &w.home).unwrap();
        target.translation[0] += 50.0;
        match infer_joints_from_pose(&w.true_model, &target, &w.home, &opts(&w)) {
            Err(Error::IkNotConverged { residual, best }) => {
                assert!(residual > 1.0);
                assert_eq!(best.len(), w.n());
            }
            other => panic!("expected IkNotConverged, got {other:?}"),
        }
    }

    #[test]
    fn joints_from_image_round_trip() {
        let w = world("xarm_sim");
        let j = nearby(&w, &w.home, 0.4, 9);
        let target = ServoTarget::new(w.render(&j).unwrap()).unwrap();
        let init = nearby(&w, &j, 0.2, 10);
        let (got, rms) = infer_joints_with_residual(&w.true_model, &target, &init, &opts(&w)).unwrap();
        assert!(rms < 1e-6, "rms {rms}");
        assert!(predicted_error(&w.true_model, &got, &target).unwrap() < 1e-6);
    }

    #[test]
    fn joints_from_image_ignore_the_gauge() {
        let w = world("ur5_sim");
        let j = nearby(&w, &w.home, 0.3, 3);
        let target = ServoTarget::new(w.render(&j).unwrap()).unwrap();
        let g = Pose::exp([0.3, -0.2, 0.5], &[0.1, 0.4, -0.2]);
        let other = w.true_model.reframed(&g).scaled(1.7);
        let a = infer_joints_from_image(&w.true_model, &target, &w.home, &opts(&w)).unwrap();
        let b = infer_joints_from_image(&other, &target, &w.home, &opts(&w)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn servo_step_is_clamped() {
        let w = world("ur5_sim");
        let j = w.home.iter().map(|v| v + 0.5).collect::<Vec<_>>();
        let target = ServoTarget::new(w.render(&j).unwrap()).unwrap();
        let det = w.render(&w.home).unwrap();
        let cfg = ServoConfig { infer: opts(&w), ..Default::default() };
        let (delta, _) = servo_step(&w.true_model, &det, Some(&w.home), &w.home, &target, &cfg).unwrap();
        assert!(delta.iter().all(|d| d.abs() <= cfg.max_step + 1e-15));
    }

    #[test]
    fn unit_gain_servo_with_true_model_converges_immediately() {
        let w = world("ur5_sim");
        let goal = nearby(&w, &w.home, 0.15, 4);
        let target = ServoTarget::new(w.render(&goal).unwrap()).unwrap();
        let mut robot = SimRobot::new(w.clone(), &w.home, 0).unwrap();
        let cfg = ServoConfig { gain: 1.0, max_step: 1.0, infer: opts(&w), ..Default::default() };
        let trace = servo_loop(&w.true_model, &mut robot, &target, &cfg).unwrap();
        assert!(trace.converged);
        assert!(trace.steps.len() <= 2);
        let mut csv = Vec::new();
        trace.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("step,rms_px,dj0"));
        assert_eq!(text.lines().count(), trace.steps.len() + 2);
    }

    #[test]
    fn invalid_servo_config_is_rejected() {
        for gain in [0.0, 1.5, f64::NAN] {
            assert!(ServoConfig { gain, ..Default::default() }.validate().is_err());
        }
    }
}
