//! The three learning stages and the pipeline that chains them.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::Rng;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{from_na, so3_log, transpose, mat_mul, orthonormalize, Pose, Vec3};
use crate::init::{initialize_by_sfm, initialize_by_triangulation, mirrored_in_depth, resect_flagged, InitEstimate};
use crate::model::{
    forward_kinematics, free_mask, CameraParams, DhLink, FeatureStructure, Intrinsics,
    KinematicParams, ModelParams, ParamGroup,
};
use crate::optim::{FitReport, LeastSquares, Objective};
use crate::simulator::{look_at, rng_from_seed, WorldHints};

use super::objectives::{dataset_observations, FullProblem, KinematicsProblem, StructureProblem};
use super::{evaluate_rms, restore_groups, solve, LearnConfig, LearnResult, StageReport};

/// Output of camera and structure learning.
#[derive(Clone, Debug)]
pub struct StructureFit {
    pub features: Vec<Vec3<f64>>,
    pub cameras: Vec<CameraParams>,
    pub ee_poses: Vec<Pose>,
    pub report: FitReport,
}

/// Output of kinematic learning. `tool` maps the learned chain's last frame
/// to the frame of the target poses.
#[derive(Clone, Debug)]
pub struct KinematicFit {
    pub kinematics: KinematicParams,
    pub tool: Pose,
    pub report: FitReport,
    pub underdetermined: bool,
}

fn nearest_present<T: Copy>(items: &[Option<T>], t: usize) -> Option<T> {
    (0..items.len())
        .flat_map(|d| [t.checked_sub(d), Some(t + d)])
        .flatten()
        .filter(|&i| i < items.len())
        .find_map(|i| items[i])
}

/// Fits feature structure, cameras and one end-effector pose per timestep to
/// the detections, starting from an initialization. Camera 0's extrinsics
/// stay fixed to anchor the world frame.
pub fn learn_camera_structure(
    data: &Dataset,
    init: &InitEstimate,
    intrinsics: &[Intrinsics],
    cfg: &LearnConfig,
) -> Result<StructureFit> {
    let c = intrinsics.len();
    let m = data.num_features().max(init.structure.len());
    if init.ee_poses.iter().all(|p| p.is_none()) {
        return Err(Error::Precondition("initialization has no end-effector poses".into()));
    }
    let known: Vec<Vec3<f64>> = init.structure.iter().flatten().copied().collect();
    let centroid = if known.is_empty() {
        [0.0; 3]
    } else {
        let n = known.len() as f64;
        let s = known.iter().fold([0.0; 3], |a, p| [a[0] + p[0], a[1] + p[1], a[2] + p[2]]);
        [s[0] / n, s[1] / n, s[2] / n]
    };
    let features: Vec<Vec3<f64>> = (0..m).map(|k| init.structure.get(k).copied().flatten().unwrap_or(centroid)).collect();
    let anchor = init.extrinsics(0).unwrap_or_else(Pose::identity);
    let cameras: Vec<CameraParams> = (0..c)
        .map(|i| CameraParams { intrinsics: intrinsics[i], extrinsics: init.extrinsics(i).unwrap_or(anchor) })
        .collect();
    let poses: Vec<Pose> = (0..data.len())
        .map(|t| nearest_present(&init.ee_poses, t).expect("some pose present"))
        .collect();

    let mut problem = StructureProblem { features, cameras, poses, obs: dataset_observations(data) };
    let mut free = vec![true; crate::optim::ResidualModel::num_params(&problem)];
    let o = problem.camera_offset(0);
    free[o + 4..o + 10].iter_mut().for_each(|f| *f = false);
    for g in &cfg.frozen {
        let range = match *g {
            ParamGroup::Features => 0..3 * m,
            ParamGroup::Feature(k) if k < m => 3 * k..3 * k + 3,
            ParamGroup::Intrinsics(i) if i < c => problem.camera_offset(i)..problem.camera_offset(i) + 4,
            ParamGroup::Extrinsics(i) if i < c => problem.camera_offset(i) + 4..problem.camera_offset(i) + 10,
            _ => 0..0,
        };
        free[range].iter_mut().for_each(|f| *f = false);
    }
    let report = solve(&mut problem, &free, &cfg.structure_options, cfg.execution)?;
    Ok(StructureFit { features: problem.features, cameras: problem.cameras, ee_poses: problem.poses, report })
}

/// Closed-form alignment of a kinematic chain to target poses.
///
/// Finds base `B`, tool offset `H` and scale `s` such that
/// `Pₜ ≈ B·Aₜ(s)·H`, where `Aₜ(s)` is the chain's pose at `jₜ` with all
/// lengths multiplied by `s`. The base rotation comes from matching the
/// rotation axes of relative motions, the tool rotation from averaging, and
/// scale and translations from one linear least-squares solve.
pub fn hand_eye_init(joints: &[Vec<f64>], targets: &[Pose], links: &[DhLink]) -> Result<(Pose, Pose, f64)> {
    if joints.len() != targets.len() || joints.is_empty() {
        return Err(Error::DimensionMismatch { expected: joints.len(), got: targets.len() });
    }
    let kin = KinematicParams { base: Pose::identity(), links: links.to_vec() };
    let a: Vec<Pose> = joints.iter().map(|j| forward_kinematics(&kin, j)).collect::<Result<_>>()?;

    // rotation axes of relative motions: log(Qₜ·Q₀ᵀ) = R_B·log(Rₜ·R₀ᵀ)
    let mut h = Matrix3::zeros();
    let (q0, r0) = (targets[0].rotation, a[0].rotation);
    for (p, at) in targets.iter().zip(&a).skip(1) {
        let alpha = so3_log(&mat_mul(&at.rotation, &transpose(&r0)));
        let beta = so3_log(&mat_mul(&p.rotation, &transpose(&q0)));
        h += Vector3::from(alpha) * Vector3::from(beta).transpose();
    }
    let r_b = if h.norm() > 1e-12 {
        let svd = h.svd(true, true);
        let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut v = v_t.transpose();
        let mut r = v * u.transpose();
        if r.determinant() < 0.0 {
            v.column_mut(2).neg_mut();
            r = v * u.transpose();
        }
        r
    } else {
        Matrix3::identity()
    };
    let rb = from_na(&r_b);
    let mut acc = [[0.0; 3]; 3];
    for (p, at) in targets.iter().zip(&a) {
        let m = mat_mul(&transpose(&at.rotation), &mat_mul(&transpose(&rb), &p.rotation));
        for i in 0..3 {
            for j in 0..3 {
                acc[i][j] += m[i][j];
            }
        }
    }
    let r_h = orthonormalize(&acc);

    // R_Bᵀ·uₜ = s·τₜ + Rₜ·h + c, unknowns (s, h, c) with c = R_Bᵀ·b
    let rows = 3 * targets.len();
    let mut m = DMatrix::zeros(rows, 7);
    let mut rhs = DVector::zeros(rows);
    let rbt = r_b.transpose();
    for (t, (p, at)) in targets.iter().zip(&a).enumerate() {
        let u = rbt * Vector3::from(p.translation);
        for i in 0..3 {
            let r = 3 * t + i;
            m[(r, 0)] = at.translation[i];
            for j in 0..3 {
                m[(r, 1 + j)] = at.rotation[i][j];
            }
            m[(r, 4 + i)] = 1.0;
            rhs[r] = u[i];
        }
    }
    let sol = m
        .svd(true, true)
        .solve(&rhs, 1e-12)
        .map_err(|e| Error::DegenerateConfiguration(e.to_string()))?;
    let mut s = sol[0];
    if !(s.abs() > 1e-9) {
        s = 1.0;
    }
    let c = Vector3::new(sol[4], sol[5], sol[6]);
    let b = r_b * c;
    let base = Pose { rotation: rb, translation: [b.x, b.y, b.z] };
    let tool = Pose { rotation: r_h, translation: [sol[1], sol[2], sol[3]] };
    Ok((base, tool, s.abs()))
}

fn scaled_links(links: &[DhLink], s: f64) -> Vec<DhLink> {
    links.iter().map(|l| DhLink { d: l.d * s, a: l.a * s, ..*l }).collect()
}

fn random_links(n: usize, rng: &mut impl Rng) -> Vec<DhLink> {
    use std::f64::consts::PI;
    (0..n)
        .map(|_| {
            DhLink::new(rng.gen_range(-PI..PI), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-PI..PI))
        })
        .collect()
}

fn distinct_joint_vectors(joints: &[Vec<f64>]) -> usize {
    let mut seen: Vec<&Vec<f64>> = Vec::new();
    for j in joints {
        if !seen.contains(&j) {
            seen.push(j);
        }
    }
    seen.len()
}

/// Fits base, DH links and a tool offset so that the chain reproduces the
/// target poses (squared Frobenius distance). Starts from `nominal` aligned
/// by [`hand_eye_init`]; without a nominal table, three random tables are
/// tried and the best fit kept.
pub fn learn_kinematics(
    joints: &[Vec<f64>],
    targets: &[Pose],
    nominal: Option<&[DhLink]>,
    cfg: &LearnConfig,
) -> Result<KinematicFit> {
    if joints.len() != targets.len() {
        return Err(Error::DimensionMismatch { expected: joints.len(), got: targets.len() });
    }
    if joints.is_empty() {
        return Err(Error::Precondition("no poses to fit".into()));
    }
    let n = joints[0].len();
    let starts: Vec<Vec<DhLink>> = match nominal {
        Some(links) => {
            if links.len() != n {
                return Err(Error::DimensionMismatch { expected: n, got: links.len() });
            }
            vec![links.to_vec()]
        }
        None => {
            let mut rng = rng_from_seed(cfg.seed ^ 0x6b69_6e65);
            (0..3).map(|_| random_links(n, &mut rng)).collect()
        }
    };
    let mut best: Option<KinematicFit> = None;
    for links in starts {
        let (base, tool, s) = hand_eye_init(joints, targets, &links)?;
        let mut problem = KinematicsProblem {
            base,
            links: scaled_links(&links, s),
            tool,
            joints: joints.to_vec(),
            targets: targets.to_vec(),
        };
        let free = vec![true; crate::optim::ResidualModel::num_params(&problem)];
        let report = solve(&mut problem, &free, &cfg.kinematic_options, cfg.execution)?;
        let fit = KinematicFit {
            kinematics: problem.kinematics(),
            tool: problem.tool,
            report,
            underdetermined: distinct_joint_vectors(joints) < 3,
        };
        if best.as_ref().map_or(true, |b| fit.report.final_objective < b.report.final_objective) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one start"))
}

/// Minimizes the pixel loss of the full model over every non-frozen
/// parameter, starting at `init_model`. Frozen groups are returned bit for
/// bit unchanged.
pub fn learn_full(data: &Dataset, init_model: &ModelParams, cfg: &LearnConfig) -> Result<LearnResult> {
    let joints = data.joints()?;
    if let Some(j) = joints.iter().find(|j| j.len() != init_model.n()) {
        return Err(Error::DimensionMismatch { expected: init_model.n(), got: j.len() });
    }
    for g in &cfg.frozen {
        g.validate(&init_model.layout())?;
    }
    let mut problem = FullProblem::new(init_model.clone(), joints.clone(), dataset_observations(data));
    let free = free_mask(&init_model.layout(), &cfg.frozen);
    let report = solve(&mut problem, &free, &cfg.full_options, cfg.execution)?;
    let mut model = problem.chart.reference;
    restore_groups(&mut model, init_model, &cfg.frozen);
    finish(data, model, vec![StageReport { stage: "full".into(), report }], &joints)
}

fn finish(data: &Dataset, model: ModelParams, reports: Vec<StageReport>, joints: &[Vec<f64>]) -> Result<LearnResult> {
    let ee_poses = joints.iter().map(|j| forward_kinematics(&model.kinematics, j)).collect::<Result<_>>()?;
    let train_rms_px = evaluate_rms(&model, data)?;
    Ok(LearnResult { model, ee_poses, inferred_joints: None, reports, train_rms_px, underdetermined: false })
}

fn intrinsics_for(hints: &WorldHints, c: usize) -> Vec<Intrinsics> {
    let (w, h) = hints.image_bounds;
    (0..c)
        .map(|i| hints.intrinsics_guess.get(i).copied().unwrap_or_else(|| Intrinsics::default_guess(w, h)))
        .collect()
}

/// Generic starting model for full-model-only learning: nominal (or random)
/// DH table, identity base, small random feature offsets, guessed
/// intrinsics, and cameras 2 m from the nominal end-effector position at
/// evenly spread azimuths, 20° above it, looking at it.
pub fn only_full_init(hints: &WorldHints, n: usize, m: usize, c: usize, seed: u64) -> Result<ModelParams> {
    let mut rng = rng_from_seed(seed ^ 0x6f6e_6c79);
    let links = match &hints.nominal_links {
        Some(l) if l.len() == n => l.clone(),
        _ => random_links(n, &mut rng),
    };
    let kinematics = KinematicParams { base: Pose::identity(), links };
    let home = if hints.home.len() == n { hints.home.clone() } else { vec![0.0; n] };
    let centre = forward_kinematics(&kinematics, &home)?.translation;
    let coords = (0..m)
        .map(|_| [rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05)])
        .collect();
    let intrinsics = intrinsics_for(hints, c);
    let elevation = 20f64.to_radians();
    let cameras = (0..c)
        .map(|i| {
            let az = 2.0 * std::f64::consts::PI * i as f64 / c as f64 + std::f64::consts::FRAC_PI_4;
            let pos = [
                centre[0] + 2.0 * elevation.cos() * az.cos(),
                centre[1] + 2.0 * elevation.cos() * az.sin(),
                centre[2] + 2.0 * elevation.sin(),
            ];
            CameraParams { intrinsics: intrinsics[i], extrinsics: look_at(pos, centre) }
        })
        .collect();
    Ok(ModelParams { kinematics, features: FeatureStructure { coords }, cameras })
}

/// Initializes from the detections alone, preferring triangulation across
/// cameras and falling back to single-camera structure from motion.
fn initialize(data: &Dataset, intrinsics: &[Intrinsics]) -> Result<InitEstimate> {
    match initialize_by_triangulation(data, intrinsics) {
        Err(Error::InsufficientCorrespondences { .. }) | Err(Error::NoChainableTimesteps) if intrinsics.len() > 1 => {
            let mut init = initialize_by_sfm(data, intrinsics)?;
            resect_flagged(data, intrinsics, &mut init);
            Ok(init)
        }
        other => other,
    }
}

/// The full learning pipeline on data with joint readings: initialization,
/// camera and structure learning, kinematic learning, then full-model
/// learning, as enabled in `cfg.stages`. Data without joint readings (or
/// `cfg.unobserved_joints`) goes through [`super::learn_unobserved`].
pub fn learn_pipeline(data: &Dataset, hints: &WorldHints, cfg: &LearnConfig) -> Result<LearnResult> {
    cfg.validate()?;
    data.validate()?;
    if cfg.unobserved_joints || !data.has_joints() {
        return super::learn_unobserved(data, hints, cfg);
    }
    let joints = data.joints()?;
    let n = joints[0].len();
    let c = data.num_cameras();
    let m = data.num_features();
    let stages = cfg.stages;

    if !stages.camera_structure {
        if stages.kinematic {
            return Err(Error::ConfigInvalid("kinematic learning needs camera and structure learning".into()));
        }
        let start = only_full_init(hints, n, m, c, cfg.seed)?;
        return learn_full(data, &start, cfg);
    }

    let intrinsics = intrinsics_for(hints, c);
    let init = initialize(data, &intrinsics)?;
    if c > 1 {
        return learn_from_init(data, &init, &intrinsics, hints, cfg);
    }
    // one camera leaves the reconstruction's depth orientation ambiguous
    let twin = mirrored_in_depth(&init);
    let a = learn_from_init(data, &init, &intrinsics, hints, cfg);
    let b = learn_from_init(data, &twin, &intrinsics, hints, cfg);
    match (a, b) {
        (Ok(a), Ok(b)) => {
            let keep_b = penalized_loss(&b.model, data, cfg)? < penalized_loss(&a.model, data, cfg)?;
            Ok(if keep_b { b } else { a })
        }
        (Ok(r), Err(_)) | (Err(_), Ok(r)) => Ok(r),
        (Err(e), Err(_)) => Err(e),
    }
}

/// Training pixel loss with detections predicted behind their camera
/// charged, unlike the masked RMS.
fn penalized_loss(model: &ModelParams, data: &Dataset, cfg: &LearnConfig) -> Result<f64> {
    let problem = FullProblem::new(model.clone(), data.joints()?, dataset_observations(data));
    let n = model.parameter_count();
    let ls = LeastSquares::new(&problem, vec![0.0; n]).execution(cfg.execution);
    Ok(Objective::eval(&ls, &vec![0.0; n], None))
}

/// Camera and structure, kinematic and full learning from an initial
/// estimate, as enabled in `cfg.stages`.
fn learn_from_init(
    data: &Dataset,
    init: &InitEstimate,
    intrinsics: &[Intrinsics],
    hints: &WorldHints,
    cfg: &LearnConfig,
) -> Result<LearnResult> {
    let joints = data.joints()?;
    let n = joints[0].len();
    let stages = cfg.stages;
    let fit = learn_camera_structure(data, init, intrinsics, cfg)?;
    let mut reports = vec![StageReport { stage: "camera_structure".into(), report: fit.report.clone() }];

    let nominal = hints.nominal_links.as_deref().filter(|l| l.len() == n);
    let (kinematics, tool, underdetermined) = if stages.kinematic {
        let kfit = learn_kinematics(&joints, &fit.ee_poses, nominal, cfg)?;
        reports.push(StageReport { stage: "kinematic".into(), report: kfit.report });
        (kfit.kinematics, kfit.tool, kfit.underdetermined)
    } else {
        let links = nominal.map(|l| l.to_vec()).unwrap_or_else(|| vec![DhLink::default(); n]);
        let (base, tool, s) = hand_eye_init(&joints, &fit.ee_poses, &links)?;
        (KinematicParams { base, links: scaled_links(&links, s) }, tool, false)
    };
    // features move into the chain's last frame
    let features = FeatureStructure { coords: fit.features.iter().map(|f| tool.apply(f)).collect() };
    let model = ModelParams { kinematics, features, cameras: fit.cameras };

    let mut result = if stages.full {
        let mut full = learn_full(data, &model, cfg)?;
        reports.append(&mut full.reports);
        full.reports = reports;
        full
    } else {
        finish(data, model, reports, &joints)?
    };
    result.underdetermined = underdetermined;
    Ok(result)
}
