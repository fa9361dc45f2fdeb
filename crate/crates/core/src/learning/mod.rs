//! Learning the generative model from (joints, detections) pairs.
//!
//! The pipeline runs three stages: cameras and feature structure with free
//! per-timestep end-effector poses, then the kinematic chain against those
//! poses, then every parameter through the full model. The ablation variants
//! skip the last stage or run only the last one from a generic start.

mod objectives;
mod online;
mod stages;
mod unobserved;

pub use objectives::{
    dataset_observations, pixel_residuals, sample_observations, ChartProblem, BEHIND_CAMERA_PX, FullProblem,
    KinematicsProblem, Obs, StructureProblem, UnobservedProblem,
};
pub use online::{
    default_change_threshold, detect_change, extend_cameras, extend_features, online_update,
    ChangeCheck, SharedModel,
};
pub use stages::{
    hand_eye_init, learn_camera_structure, learn_full, learn_kinematics, learn_pipeline,
    only_full_init, KinematicFit, StructureFit,
};
pub use unobserved::{integrate_actions, learn_unobserved};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Detections};
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::model::{free_mask, predict_image, Layout, ModelParams, ParamGroup, PixelPrediction};
use crate::optim::{minimize, FitReport, LeastSquares, OptimizerOptions, Termination};
use crate::par::Execution;

/// Which stages of the pipeline run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageToggles {
    pub camera_structure: bool,
    pub kinematic: bool,
    pub full: bool,
}

/// Pipeline variants compared in the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// All three stages.
    #[serde(rename = "dvs")]
    Full,
    /// Stages one and two only.
    #[serde(rename = "dvs-nofull")]
    NoFull,
    /// Stage three only, from a generic starting model.
    #[serde(rename = "dvs-onlyfull")]
    OnlyFull,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoFull, Variant::OnlyFull];

    pub fn stages(self) -> StageToggles {
        match self {
            Variant::Full => StageToggles { camera_structure: true, kinematic: true, full: true },
            Variant::NoFull => StageToggles { camera_structure: true, kinematic: true, full: false },
            Variant::OnlyFull => StageToggles { camera_structure: false, kinematic: false, full: true },
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "dvs",
            Variant::NoFull => "dvs-nofull",
            Variant::OnlyFull => "dvs-onlyfull",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dvs" => Ok(Variant::Full),
            "dvs-nofull" => Ok(Variant::NoFull),
            "dvs-onlyfull" => Ok(Variant::OnlyFull),
            _ => Err(Error::Parse(format!("unknown variant `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnConfig {
    pub stages: StageToggles,
    /// Groups held fixed in full-model and online learning.
    #[serde(default)]
    pub frozen: Vec<ParamGroup>,
    pub structure_options: OptimizerOptions,
    pub kinematic_options: OptimizerOptions,
    pub full_options: OptimizerOptions,
    #[serde(default)]
    pub unobserved_joints: bool,
    /// Weight of the action-consistency penalty; `None` picks a default
    /// from the known controller noise.
    #[serde(default)]
    pub lambda: Option<f64>,
    /// Sliding-window length for online updates.
    pub window: usize,
    /// Seed for the random parts (generic starting models, restarts).
    pub seed: u64,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for LearnConfig {
    fn default() -> Self {
        LearnConfig {
            stages: Variant::Full.stages(),
            frozen: Vec::new(),
            structure_options: OptimizerOptions::default(),
            kinematic_options: OptimizerOptions::default(),
            full_options: OptimizerOptions::default(),
            unobserved_joints: false,
            lambda: None,
            window: 50,
            seed: 0,
            execution: Execution::default(),
        }
    }
}

impl LearnConfig {
    pub fn for_variant(v: Variant) -> Self {
        LearnConfig { stages: v.stages(), ..Default::default() }
    }

    pub fn variant(&self) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.stages() == self.stages)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.stages;
        if !(s.camera_structure || s.kinematic || s.full) {
            return Err(Error::ConfigInvalid("at least one stage must be enabled".into()));
        }
        if let Some(l) = self.lambda {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::ConfigInvalid("lambda must be positive".into()));
            }
        }
        if self.window == 0 {
            return Err(Error::ConfigInvalid("window must be positive".into()));
        }
        self.structure_options.validate()?;
        self.kinematic_options.validate()?;
        self.full_options.validate()
    }
}

/// Diagnostics of one optimization stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub report: FitReport,
}

/// One line of the optimization log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: String,
    pub iter: usize,
    pub objective: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnResult {
    pub model: ModelParams,
    /// End-effector pose per training timestep.
    pub ee_poses: Vec<Pose>,
    #[serde(default)]
    pub inferred_joints: Option<Vec<Vec<f64>>>,
    pub reports: Vec<StageReport>,
    pub train_rms_px: f64,
    /// Set when the data cannot pin down the kinematic chain.
    #[serde(default)]
    pub underdetermined: bool,
}

impl LearnResult {
    pub fn log_records(&self) -> Vec<LogRecord> {
        let mut out = Vec::new();
        for s in &self.reports {
            out.push(LogRecord { stage: s.stage.clone(), iter: 0, objective: s.report.initial_objective });
            for (i, v) in s.report.trace.iter().enumerate() {
                out.push(LogRecord { stage: s.stage.clone(), iter: i + 1, objective: *v });
            }
        }
        out
    }

    pub fn converged(&self) -> bool {
        self.reports.iter().all(|r| r.report.converged)
    }
}

/// Sum of squared pixel differences over pairs where the detection exists
/// and the prediction is in front of the camera, with the number of such
/// pairs.
pub fn pixel_loss(predicted: &PixelPrediction, observed: &Detections) -> (f64, usize) {
    let mut sum = 0.0;
    let mut count = 0;
    for (pc, oc) in predicted.cameras.iter().zip(observed) {
        for (p, o) in pc.iter().zip(oc) {
            if let (true, Some(o)) = (p.in_front, o) {
                sum += (p.u - o[0]).powi(2) + (p.v - o[1]).powi(2);
                count += 1;
            }
        }
    }
    (sum, count)
}

/// Root mean squared pixel distance between predictions and detections,
/// over all contributing (camera, feature) pairs. Samples need joints.
pub fn evaluate_rms(model: &ModelParams, data: &Dataset) -> Result<f64> {
    evaluate_rms_features(model, data, None)
}

/// [`evaluate_rms`] restricted to the listed features.
pub fn evaluate_rms_features(model: &ModelParams, data: &Dataset, features: Option<&[usize]>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidDataset("dataset is empty".into()));
    }
    let mut sum = 0.0;
    let mut count = 0;
    for (t, s) in data.samples.iter().enumerate() {
        let j = s
            .joints
            .as_ref()
            .ok_or_else(|| Error::InvalidDataset(format!("sample {t} has no joint reading")))?;
        let mut pred = predict_image(model, j)?;
        if let Some(keep) = features {
            for cam in pred.cameras.iter_mut() {
                for (k, p) in cam.iter_mut().enumerate() {
                    if !keep.contains(&k) {
                        p.in_front = false;
                    }
                }
            }
        }
        let (s2, n) = pixel_loss(&pred, &s.detections);
        sum += s2;
        count += n;
    }
    Ok(if count == 0 { 0.0 } else { (sum / count as f64).sqrt() })
}

/// Groups that are not listed in `free`, i.e. the complement within a layout.
pub fn frozen_except(layout: &Layout, free: &[ParamGroup]) -> Vec<ParamGroup> {
    let mask = free_mask(layout, free);
    let mut out = Vec::new();
    if ParamGroup::Kinematics.indices(layout).iter().all(|&i| mask[i]) {
        out.push(ParamGroup::Kinematics);
    }
    for k in 0..layout.m {
        if ParamGroup::Feature(k).indices(layout).iter().all(|&i| mask[i]) {
            out.push(ParamGroup::Feature(k));
        }
    }
    for i in 0..layout.c {
        for g in [ParamGroup::Intrinsics(i), ParamGroup::Extrinsics(i)] {
            if g.indices(layout).iter().all(|&j| mask[j]) {
                out.push(g);
            }
        }
    }
    out
}

/// Copies the listed groups from `from` into `model`, bit for bit.
pub fn restore_groups(model: &mut ModelParams, from: &ModelParams, groups: &[ParamGroup]) {
    for g in groups {
        match *g {
            ParamGroup::Kinematics => model.kinematics = from.kinematics.clone(),
            ParamGroup::Features => model.features = from.features.clone(),
            ParamGroup::Feature(k) => {
                if let (Some(dst), Some(src)) = (model.features.coords.get_mut(k), from.features.coords.get(k)) {
                    *dst = *src;
                }
            }
            ParamGroup::Intrinsics(i) => {
                if let (Some(dst), Some(src)) = (model.cameras.get_mut(i), from.cameras.get(i)) {
                    dst.intrinsics = src.intrinsics;
                }
            }
            ParamGroup::Extrinsics(i) => {
                if let (Some(dst), Some(src)) = (model.cameras.get_mut(i), from.cameras.get(i)) {
                    dst.extrinsics = src.extrinsics;
                }
            }
        }
    }
}

const MAX_ROUNDS: usize = 4;

fn objective_at_reference<P: ChartProblem>(problem: &P, free: &[bool], exec: Execution) -> f64 {
    let ls = LeastSquares::with_free(problem, vec![0.0; problem.num_params()], free).execution(exec);
    crate::optim::Objective::eval(&ls, &vec![0.0; ls.num_vars()], None)
}

/// Re-centers on `delta` unless the objective there, evaluated afresh, is
/// above `bound`. The behind-camera penalty is discontinuous, so the value
/// an optimizer saw at a point on the wall need not survive the re-centering.
fn absorb_checked<P: ChartProblem>(
    problem: &mut P,
    delta: &[f64],
    bound: f64,
    free: &[bool],
    exec: Execution,
) -> Option<f64> {
    let saved = problem.clone();
    problem.absorb(delta);
    let f = objective_at_reference(problem, free, exec);
    if f.is_finite() && f <= bound {
        Some(f)
    } else {
        *problem = saved;
        None
    }
}

/// Minimizes a chart problem over the parameters marked free, re-centering
/// the chart and the variable scaling between rounds. The iteration budget
/// of `opts` is shared by all rounds.
pub fn solve<P: ChartProblem>(
    problem: &mut P,
    free: &[bool],
    opts: &OptimizerOptions,
    exec: Execution,
) -> Result<FitReport> {
    opts.validate()?;
    let n = problem.num_params();
    let mut total: Option<FitReport> = None;
    let mut used = 0;
    for _ in 0..MAX_ROUNDS {
        let budget = opts.max_iterations.saturating_sub(used);
        if budget == 0 {
            break;
        }
        let round_opts = OptimizerOptions { max_iterations: budget, ..opts.clone() };
        let (delta, rep) = {
            let mut ls = LeastSquares::with_free(&*problem, vec![0.0; n], free).execution(exec);
            if ls.num_vars() == 0 {
                let f = crate::optim::Objective::eval(&ls, &[], None);
                let rep = FitReport {
                    initial_objective: f,
                    final_objective: f,
                    iterations: 0,
                    evaluations: 1,
                    converged: true,
                    termination_reason: Termination::GradientTol,
                    trace: Vec::new(),
                };
                return Ok(rep);
            }
            ls.precondition();
            let y0 = vec![0.0; ls.num_vars()];
            let (y, rep) = minimize(&ls, &y0, &round_opts).map_err(|e| match e {
                Error::NonFiniteObjective => Error::OptimizationDiverged("objective became non-finite".into()),
                other => other,
            })?;
            (ls.params_at(&y), rep)
        };
        if !rep.final_objective.is_finite() || delta.iter().any(|v| !v.is_finite()) {
            return Err(Error::OptimizationDiverged("non-finite parameters".into()));
        }
        used += rep.iterations.max(1);
        let mut rep = rep;
        let before = rep.initial_objective;
        let after = match absorb_checked(problem, &delta, before, free, exec) {
            Some(f) => f,
            None => {
                rep.trace.clear();
                rep.iterations = 0;
                before
            }
        };
        rep.final_objective = after;
        if let Some(last) = rep.trace.last_mut() {
            *last = after;
        }
        let stop = rep.termination_reason != Termination::LineSearchFailure
            || !(after < before * (1.0 - 1e-9))
            || after == 0.0;
        match total.as_mut() {
            Some(t) => t.merge(rep),
            None => total = Some(rep),
        }
        if stop {
            break;
        }
    }
    let mut total = total.expect("at least one round");
    // a start that already meets the tolerance is left alone
    let polish = if total.iterations == 0 { 0 } else { opts.polish_iterations };
    let mut damping = 1e-6;
    for _ in 0..polish {
        let ls = LeastSquares::with_free(&*problem, vec![0.0; n], free).execution(exec);
        let Some((y, _, f0, evals)) = ls.gauss_newton_step(&mut damping) else { break };
        let delta = ls.params_at(&y);
        if delta.iter().any(|v| !v.is_finite()) {
            break;
        }
        drop(ls);
        let Some(f) = absorb_checked(problem, &delta, f0, free, exec) else { break };
        total.iterations += 1;
        total.evaluations += evals;
        total.final_objective = f;
        total.trace.push(f);
        if f > f0 * (1.0 - 1e-10) {
            break;
        }
    }
    let mut ls = LeastSquares::with_free(&*problem, vec![0.0; n], free).execution(exec);
    ls.precondition();
    let mut g = vec![0.0; ls.num_vars()];
    let f = crate::optim::Objective::eval(&ls, &vec![0.0; ls.num_vars()], Some(&mut g));
    let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if gmax <= opts.gradient_tolerance * f.abs().max(1.0) {
        total.converged = true;
        total.termination_reason = Termination::GradientTol;
    }
    Ok(total)
}
