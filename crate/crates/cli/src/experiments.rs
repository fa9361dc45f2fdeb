//! Experiment harnesses behind the subcommands: the learning table, servo
//! runs against the simulator, adaptation curves and query timings.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use genservo::dataset::Dataset;
use genservo::geometry::Pose;
use genservo::inference::{
    infer_joints_from_image, infer_joints_from_pose, infer_pose_from_image, servo_loop, InferOptions,
    ServoConfig, ServoTarget, ServoTrace,
};
use genservo::learning::{
    dataset_observations, default_change_threshold, detect_change, evaluate_rms, evaluate_rms_features,
    extend_cameras, extend_features, frozen_except, learn_pipeline, online_update, FullProblem, LearnConfig,
    Variant,
};
use genservo::model::{forward_kinematics, predict_image, CameraParams, ModelParams, ParamGroup};
use genservo::optim::{LeastSquares, Objective};
use genservo::par::Execution;
use genservo::simulator::{
    apply_perturbation, collect_random, extra_marker, look_at, make_world, rng_from_seed, Perturbation, Rng64,
    SimRobot, WorldConfig, WorldTruth,
};
use genservo::{Error, Result};

/// Joint step bound of the random walks used for training and held-out data.
pub const STEP_SCALE: f64 = 0.1;
/// Length of every held-out set.
pub const HELD_OUT_SAMPLES: usize = 100;
/// Held-out sets use the run seed plus this offset, so they never share a
/// random stream with training data.
pub const HELD_OUT_SEED_OFFSET: u64 = 1000;

pub fn held_out(world: &WorldTruth, seed: u64) -> Result<Dataset> {
    collect_random(world, HELD_OUT_SAMPLES, STEP_SCALE, &mut rng_from_seed(seed + HELD_OUT_SEED_OFFSET))
}

/// Median of a non-empty list; NaN entries sort last.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

// ---------------------------------------------------------------------------
// learning table

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub world: String,
    pub samples: usize,
    pub seed: u64,
    pub variant: String,
    /// `NaN` when learning failed.
    pub held_out_rms_px: f64,
    pub train_rms_px: f64,
    pub seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Learns one model on `samples` random-walk samples and scores it on the
/// held-out set of the same seed.
pub fn learning_run(
    world_name: &str,
    world: &WorldTruth,
    samples: usize,
    seed: u64,
    variant: Variant,
    exec: Execution,
) -> RunResult {
    let start = Instant::now();
    let outcome = (|| {
        let data = collect_random(world, samples, STEP_SCALE, &mut rng_from_seed(seed))?;
        let cfg = LearnConfig { seed, execution: exec, ..LearnConfig::for_variant(variant) };
        let learned = learn_pipeline(&data, &world.hints(), &cfg)?;
        let held = held_out(world, seed)?;
        Ok::<_, Error>((evaluate_rms(&learned.model, &held)?, learned.train_rms_px))
    })();
    let (held_out_rms_px, train_rms_px, error) = match outcome {
        Ok((h, t)) => (h, t, None),
        Err(e) => (f64::NAN, f64::NAN, Some(e.to_string())),
    };
    RunResult {
        world: world_name.to_string(),
        samples,
        seed,
        variant: variant.to_string(),
        held_out_rms_px,
        train_rms_px,
        seconds: start.elapsed().as_secs_f64(),
        error,
    }
}

#[derive(Clone, Debug)]
pub struct TableSpec {
    pub worlds: Vec<String>,
    pub sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    pub pixel_sigma: f64,
    pub workers: usize,
}

impl TableSpec {
    pub fn validate(&self) -> Result<()> {
        if self.worlds.is_empty() || self.sizes.is_empty() || self.seeds.is_empty() || self.variants.is_empty() {
            return Err(Error::ConfigInvalid("worlds, sizes, seeds and variants must be non-empty".into()));
        }
        if self.sizes.contains(&0) {
            return Err(Error::ConfigInvalid("sizes must be positive".into()));
        }
        if !(self.pixel_sigma >= 0.0) {
            return Err(Error::ConfigInvalid("pixel sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// Every (world, size, variant, seed) run, fanned out over `spec.workers`
/// threads and returned sorted by key.
pub fn learning_table(spec: &TableSpec) -> Result<Vec<RunResult>> {
    spec.validate()?;
    let mut worlds = Vec::new();
    for name in &spec.worlds {
        let cfg = WorldConfig::load(name)?;
        let sigma = spec.pixel_sigma;
        let cfg = cfg.clone().with_noise(sigma, cfg.noise.controller_sigma);
        worlds.push((name.clone(), make_world(&cfg)?));
    }
    let mut jobs = Vec::new();
    for (w, _) in worlds.iter().enumerate() {
        for &size in &spec.sizes {
            for &variant in &spec.variants {
                for &seed in &spec.seeds {
                    jobs.push((w, size, variant, seed));
                }
            }
        }
    }
    let workers = spec.workers.max(1);
    // a single worker keeps the data-parallel objective; several split the runs instead
    let inner = if workers == 1 { Execution::Parallel } else { Execution::Sequential };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::ConfigInvalid(e.to_string()))?;
    let mut results: Vec<RunResult> = pool.install(|| {
        use rayon::prelude::*;
        jobs.par_iter()
            .map(|&(w, size, variant, seed)| learning_run(&worlds[w].0, &worlds[w].1, size, seed, variant, inner))
            .collect()
    });
    results.sort_by(|a, b| {
        (&a.world, a.samples, &a.variant, a.seed).cmp(&(&b.world, b.samples, &b.variant, b.seed))
    });
    Ok(results)
}

/// Median held-out RMS per (world, variant, size).
pub fn table_medians(results: &[RunResult]) -> BTreeMap<(String, String, usize), f64> {
    let mut groups: BTreeMap<(String, String, usize), Vec<f64>> = BTreeMap::new();
    for r in results {
        groups.entry((r.world.clone(), r.variant.clone(), r.samples)).or_default().push(r.held_out_rms_px);
    }
    groups.into_iter().map(|(k, v)| (k, median(&v))).collect()
}

/// Markdown table of median held-out RMS, one row per (world, variant) and
/// one column per training size.
pub fn table_markdown(results: &[RunResult]) -> String {
    let medians = table_medians(results);
    let mut sizes: Vec<usize> = results.iter().map(|r| r.samples).collect();
    sizes.sort_unstable();
    sizes.dedup();
    let mut out = String::from("| world | variant |");
    for s in &sizes {
        out.push_str(&format!(" {s} samples |"));
    }
    out.push_str("\n|---|---|");
    out.push_str(&"---:|".repeat(sizes.len()));
    out.push('\n');
    let mut rows: Vec<(String, String)> = medians.keys().map(|(w, v, _)| (w.clone(), v.clone())).collect();
    rows.dedup();
    for (w, v) in rows {
        out.push_str(&format!("| {w} | {v} |"));
        for s in &sizes {
            match medians.get(&(w.clone(), v.clone(), *s)) {
                Some(m) => out.push_str(&format!(" {m:.3} |")),
                None => out.push_str(" - |"),
            }
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// servoing

/// Targets rendered from random joint vectors within the limits; vectors
/// whose rendering has fewer than four detections are redrawn.
pub fn reachable_targets(world: &WorldTruth, k: usize, rng: &mut Rng64) -> Result<Vec<(Vec<f64>, ServoTarget)>> {
    let mut out = Vec::with_capacity(k);
    let mut draws = 0;
    while out.len() < k {
        draws += 1;
        if draws > 100 * k.max(1) {
            return Err(Error::Precondition("could not draw visible targets".into()));
        }
        let joints = world.random_joints(rng);
        if let Ok(target) = ServoTarget::new(world.render(&joints)?) {
            out.push((joints, target));
        }
    }
    Ok(out)
}

/// Shifts every target pixel by its own random offset, so that no rigid
/// placement of the features matches.
pub fn make_unreachable(target: &mut ServoTarget, offset_px: f64, rng: &mut Rng64) {
    for p in target.pixels.iter_mut().flatten().flatten() {
        p[0] += rng.gen_range(-offset_px..offset_px);
        p[1] += rng.gen_range(-offset_px..offset_px);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServoSummary {
    pub targets: usize,
    pub converged: usize,
    /// Mean over targets of the final pixel RMS; targets that left the view
    /// count as `NaN` and are excluded and counted in `lost`.
    pub mean_final_px: f64,
    pub lost: usize,
    pub mean_steps: f64,
}

pub struct ServoRun {
    pub traces: Vec<ServoTrace>,
    pub summary: ServoSummary,
}

/// Servos a simulated robot from the home configuration to `k` random
/// reachable targets, one loop per target.
pub fn servo_experiment(
    model: &ModelParams,
    world: &WorldTruth,
    k: usize,
    cfg: &ServoConfig,
    seed: u64,
    unreachable: bool,
) -> Result<ServoRun> {
    cfg.validate()?;
    let mut rng = rng_from_seed(seed);
    let targets = reachable_targets(world, k, &mut rng)?;
    let mut traces = Vec::with_capacity(k);
    for (i, (_, mut target)) in targets.into_iter().enumerate() {
        if unreachable {
            make_unreachable(&mut target, 20.0, &mut rng);
        }
        let mut robot = SimRobot::new(world.clone(), &world.home, seed.wrapping_add(i as u64))?;
        traces.push(servo_loop(model, &mut robot, &target, cfg)?);
    }
    let finals: Vec<f64> = traces.iter().filter_map(|t| t.final_rms_px()).collect();
    let summary = ServoSummary {
        targets: traces.len(),
        converged: traces.iter().filter(|t| t.converged).count(),
        mean_final_px: finals.iter().sum::<f64>() / finals.len().max(1) as f64,
        lost: traces.len() - finals.len(),
        mean_steps: traces.iter().map(|t| t.steps.len() as f64).sum::<f64>() / traces.len().max(1) as f64,
    };
    Ok(ServoRun { traces, summary })
}

/// Per-step rows of several traces: `target, step, rms_px, dj…`.
pub fn servo_csv_rows(traces: &[ServoTrace]) -> Vec<Vec<f64>> {
    let mut rows = Vec::new();
    for (i, t) in traces.iter().enumerate() {
        let n = t.steps.first().map_or(0, |s| s.command.len());
        let mut first = vec![i as f64, 0.0, t.initial_rms_px.unwrap_or(f64::NAN)];
        first.extend(std::iter::repeat(0.0).take(n));
        rows.push(first);
        for s in &t.steps {
            let mut row = vec![i as f64, s.step as f64, s.rms_px.unwrap_or(f64::NAN)];
            row.extend(&s.command);
            rows.push(row);
        }
    }
    rows
}

// ---------------------------------------------------------------------------
// adaptation

/// Perturbation of an adaptation experiment.
#[derive(Clone, Debug, PartialEq)]
pub enum PerturbKind {
    None,
    /// Shifts a camera's centre by `meters` along its image x axis.
    MoveCamera { index: usize, meters: f64 },
    AddCamera,
    AttachFeatures(usize),
    JitterLinks(f64),
}

impl FromStr for PerturbKind {
    type Err = Error;

    /// `none`, `move-camera[:index[:meters]]`, `add-camera`,
    /// `attach-features[:k]`, `jitter-links[:sigma]`.
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let kind = parts.next().unwrap_or_default();
        let args: Vec<&str> = parts.collect();
        let bad = || Error::ConfigInvalid(format!("malformed perturbation `{s}`"));
        let num = |i: usize| -> Result<Option<f64>> { args.get(i).map(|a| a.parse::<f64>().map_err(|_| bad())).transpose() };
        let count = |i: usize| -> Result<Option<usize>> { args.get(i).map(|a| a.parse::<usize>().map_err(|_| bad())).transpose() };
        let p = match kind {
            "none" => PerturbKind::None,
            "move-camera" => PerturbKind::MoveCamera { index: count(0)?.unwrap_or(0), meters: num(1)?.unwrap_or(0.05) },
            "add-camera" => PerturbKind::AddCamera,
            "attach-features" => PerturbKind::AttachFeatures(count(0)?.unwrap_or(4)),
            "jitter-links" => PerturbKind::JitterLinks(num(0)?.unwrap_or(0.02)),
            _ => return Err(Error::ConfigInvalid(format!("unknown perturbation `{kind}`"))),
        };
        let max_args = match p {
            PerturbKind::None | PerturbKind::AddCamera => 0,
            PerturbKind::MoveCamera { .. } => 2,
            _ => 1,
        };
        if args.len() > max_args {
            return Err(bad());
        }
        Ok(p)
    }
}

impl fmt::Display for PerturbKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PerturbKind::None => write!(f, "none"),
            PerturbKind::MoveCamera { index, meters } => write!(f, "move-camera:{index}:{meters}"),
            PerturbKind::AddCamera => write!(f, "add-camera"),
            PerturbKind::AttachFeatures(k) => write!(f, "attach-features:{k}"),
            PerturbKind::JitterLinks(s) => write!(f, "jitter-links:{s}"),
        }
    }
}

impl PerturbKind {
    /// The simulator perturbation this kind applies to `world`.
    pub fn perturbation(&self, world: &WorldTruth, seed: u64) -> Result<Option<Perturbation>> {
        Ok(match *self {
            PerturbKind::None => None,
            PerturbKind::MoveCamera { index, meters } => {
                let cam = world
                    .true_model
                    .cameras
                    .get(index)
                    .ok_or(Error::IndexOutOfRange { index, len: world.true_model.c() })?;
                // the camera's x axis in world coordinates is the first row of its rotation
                let x = cam.extrinsics.rotation[0];
                let delta = Pose::from_translation([x[0] * meters, x[1] * meters, x[2] * meters]);
                Some(Perturbation::MoveCamera { index, delta })
            }
            PerturbKind::AddCamera => Some(Perturbation::AddCamera { camera: extra_camera(world)? }),
            PerturbKind::AttachFeatures(k) => Some(Perturbation::AttachFeatures { rows: extra_marker(k) }),
            PerturbKind::JitterLinks(sigma) => Some(Perturbation::JitterLinks { relative_sigma: sigma, seed }),
        })
    }

    /// Groups relearned by default after this perturbation; `model` is the
    /// model before any extension.
    pub fn default_relearn(&self, model: &ModelParams) -> Vec<ParamGroup> {
        match *self {
            PerturbKind::None | PerturbKind::JitterLinks(_) => vec![ParamGroup::Kinematics],
            PerturbKind::MoveCamera { index, .. } => vec![ParamGroup::Extrinsics(index)],
            PerturbKind::AddCamera => vec![ParamGroup::Intrinsics(model.c()), ParamGroup::Extrinsics(model.c())],
            PerturbKind::AttachFeatures(k) => (model.m()..model.m() + k).map(ParamGroup::Feature).collect(),
        }
    }

    /// Feature indices scored on the held-out set (all when `None`).
    pub fn scored_features(&self, model: &ModelParams) -> Option<Vec<usize>> {
        match *self {
            PerturbKind::AttachFeatures(k) => Some((model.m()..model.m() + k).collect()),
            _ => None,
        }
    }
}

/// A camera above the two preset ones, looking at the tool in its home pose.
pub fn extra_camera(world: &WorldTruth) -> Result<CameraParams> {
    let cams = &world.true_model.cameras;
    let mut centre = [0.0; 3];
    for c in cams {
        let p = c.extrinsics.inverse().translation;
        for i in 0..3 {
            centre[i] += p[i] / cams.len() as f64;
        }
    }
    centre[2] += 0.4;
    let tool = forward_kinematics(&world.true_model.kinematics, &world.home)?;
    let first = cams.first().ok_or(Error::ConfigInvalid("world has no camera".into()))?;
    Ok(CameraParams { intrinsics: first.intrinsics, extrinsics: look_at(centre, tool.translation) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptRow {
    pub samples_seen: usize,
    pub held_out_rms_px: f64,
    /// RMS residual of the new sample under the model before updating.
    pub sample_rms_px: f64,
    pub changed: bool,
    pub updated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptCurve {
    pub perturbation: String,
    pub relearn: Vec<String>,
    /// Held-out RMS of the input model on the unperturbed world.
    pub baseline_rms_px: f64,
    pub threshold_px: f64,
    pub rows: Vec<AdaptRow>,
}

impl AdaptCurve {
    pub fn changes(&self) -> usize {
        self.rows.iter().filter(|r| r.changed).count()
    }

    pub fn csv_rows(&self) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| {
                vec![
                    r.samples_seen as f64,
                    r.held_out_rms_px,
                    r.sample_rms_px,
                    f64::from(u8::from(r.changed)),
                    f64::from(u8::from(r.updated)),
                ]
            })
            .collect()
    }
}

pub const ADAPT_CSV_HEADER: [&str; 5] = ["samples_seen", "held_out_rms_px", "sample_rms_px", "changed", "updated"];

/// Applies `kind` to `world`, then streams `samples` random-walk samples of
/// the changed world. After each one, change detection runs; from the first
/// detected change on, the `relearn` groups are refit on every sample since
/// the change. New cameras or features are added to the model as soon as the
/// stream shows them.
pub fn adapt_experiment(
    model: &ModelParams,
    world: &WorldTruth,
    kind: &PerturbKind,
    relearn: Option<&[ParamGroup]>,
    samples: usize,
    seed: u64,
) -> Result<AdaptCurve> {
    if samples == 0 {
        return Err(Error::ConfigInvalid("need at least one sample".into()));
    }
    let baseline = evaluate_rms(model, &held_out(world, seed)?)?;
    let threshold = default_change_threshold(baseline);
    let changed_world = match kind.perturbation(world, seed)? {
        Some(p) => apply_perturbation(world, &p)?,
        None => world.clone(),
    };
    let relearn: Vec<ParamGroup> = relearn.map(<[_]>::to_vec).unwrap_or_else(|| kind.default_relearn(model));
    let scored = kind.scored_features(model);
    let held = held_out(&changed_world, seed)?;
    let stream = collect_random(&changed_world, samples, STEP_SCALE, &mut rng_from_seed(seed + 1))?;
    let cfg = LearnConfig { seed, window: samples, ..LearnConfig::default() };

    let mut current = model.clone();
    // every update refits from the model as it was when the change showed up
    let mut since_change: Option<(usize, ModelParams)> = None;
    let mut rows = Vec::with_capacity(samples);
    for t in 0..samples {
        let sample = &stream.samples[t];
        let check = detect_change(&current, sample, threshold)?;
        let mut grew = false;
        if current.c() < stream.num_cameras() {
            if let Ok(m) = extend_cameras(&current, &stream.slice(t, t + 1), &changed_world.intrinsics_guess[current.c()..]) {
                current = m;
                grew = true;
            }
        }
        if current.m() < stream.num_features() {
            if let Ok(m) = extend_features(&current, &stream.slice(t, t + 1)) {
                current = m;
                grew = true;
            }
        }
        let changed = check.changed || grew;
        if changed && since_change.is_none() {
            since_change = Some((t, current.clone()));
        }
        let mut updated = false;
        if let Some((start, anchor)) = &since_change {
            let known = relearn.iter().all(|g| g.validate(&anchor.layout()).is_ok());
            if known {
                let frozen = frozen_except(&anchor.layout(), &relearn);
                if let Ok(r) = online_update(anchor, &stream.slice(*start, t + 1), &frozen, &cfg) {
                    current = r.model;
                    updated = true;
                }
            }
        }
        let held_out_rms_px = if scored.as_ref().is_some_and(|f| f.iter().any(|&k| k >= current.m())) {
            f64::NAN
        } else {
            evaluate_rms_features(&current, &held, scored.as_deref())?
        };
        rows.push(AdaptRow { samples_seen: t + 1, held_out_rms_px, sample_rms_px: check.rms_px, changed, updated });
    }
    Ok(AdaptCurve {
        perturbation: kind.to_string(),
        relearn: relearn.iter().map(ToString::to_string).collect(),
        baseline_rms_px: baseline,
        threshold_px: threshold,
        rows,
    })
}

// ---------------------------------------------------------------------------
// timing

pub const BENCH_OPS: [&str; 6] = ["fk", "forward", "gradient", "infer-pose", "infer-joints", "ik"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpTiming {
    pub reps: usize,
    pub mean_seconds: f64,
    pub per_second: f64,
}

/// Mean wall time of each named query on `model`, over `reps` random joint
/// vectors around `home`.
pub fn bench_ops(
    model: &ModelParams,
    home: &[f64],
    ops: &[String],
    reps: usize,
    seed: u64,
) -> Result<BTreeMap<String, OpTiming>> {
    if reps == 0 {
        return Err(Error::ConfigInvalid("reps must be positive".into()));
    }
    if home.len() != model.n() {
        return Err(Error::DimensionMismatch { expected: model.n(), got: home.len() });
    }
    let mut rng = rng_from_seed(seed);
    let joints: Vec<Vec<f64>> =
        (0..reps).map(|_| home.iter().map(|h| h + rng.gen_range(-0.3..0.3)).collect()).collect();
    let images: Vec<_> = joints
        .iter()
        .map(|j| {
            predict_image(model, j).map(|p| {
                p.cameras.iter().map(|c| c.iter().map(|q| q.in_front.then_some([q.u, q.v])).collect()).collect()
            })
        })
        .collect::<Result<Vec<genservo::dataset::Detections>>>()?;
    let infer = InferOptions::default();
    let mut out = BTreeMap::new();
    for op in ops {
        let start = Instant::now();
        match op.as_str() {
            "fk" => {
                for j in &joints {
                    std::hint::black_box(forward_kinematics(&model.kinematics, j)?);
                }
            }
            "forward" => {
                for j in &joints {
                    std::hint::black_box(predict_image(model, j)?);
                }
            }
            "gradient" => {
                for (j, img) in joints.iter().zip(&images) {
                    let data = Dataset::new(vec![genservo::dataset::Sample { joints: Some(j.clone()), detections: img.clone() }]);
                    let problem = FullProblem::new(model.clone(), vec![j.clone()], dataset_observations(&data));
                    let ls = LeastSquares::new(&problem, vec![0.0; model.parameter_count()])
                        .execution(Execution::Sequential)
                        .model_jacobian(true);
                    let mut g = vec![0.0; ls.num_vars()];
                    std::hint::black_box(ls.eval(&vec![0.0; ls.num_vars()], Some(&mut g)));
                }
            }
            "infer-pose" => {
                let start_pose = forward_kinematics(&model.kinematics, home)?;
                for img in &images {
                    std::hint::black_box(infer_pose_from_image(model, img, &start_pose, &infer)?);
                }
            }
            "infer-joints" => {
                for img in &images {
                    let target = ServoTarget::new(img.clone())?;
                    std::hint::black_box(infer_joints_from_image(model, &target, home, &infer)?);
                }
            }
            "ik" => {
                for j in &joints {
                    let pose = forward_kinematics(&model.kinematics, j)?;
                    std::hint::black_box(infer_joints_from_pose(model, &pose, home, &infer).ok());
                }
            }
            other => {
                return Err(Error::ConfigInvalid(format!(
                    "unknown op `{other}` (expected one of {})",
                    BENCH_OPS.join(", ")
                )))
            }
        }
        let mean = start.elapsed().as_secs_f64() / reps as f64;
        out.insert(op.clone(), OpTiming { reps, mean_seconds: mean, per_second: 1.0 / mean.max(1e-12) });
    }
    Ok(out)
}

