//! Initial estimates of camera poses, feature structure and end-effector
//! poses computed from raw detections.
//!
//! With two or more cameras, pairwise baselines from the essential matrix
//! place the cameras and triangulation gives per-timestep 3D points, which
//! are chained into end-effector poses. A single camera uses incremental
//! structure from motion instead ([`initialize_by_sfm`]).

mod chain;
mod sfm;
mod two_view;

pub use chain::{chain_ee_poses, structure_from_chain, MIN_SHARED};
pub use sfm::{initialize_by_sfm, mirrored_in_depth};
pub use two_view::{
    decompose_essential, essential_matrix, estimate_baseline, normalize, relative_pose, resect,
    triangulate, triangulate_normalized, Correspondence, MIN_RAY_ANGLE,
};

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{Pose, Vec3};
use crate::model::Intrinsics;

/// Starting point for learning. The world frame is camera 0's frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitEstimate {
    /// World-from-camera poses; `None` where a camera could not be placed.
    pub camera_poses: Vec<Option<Pose>>,
    /// World-from-end-effector pose per timestep; `None` where chaining failed.
    pub ee_poses: Vec<Option<Pose>>,
    /// Feature coordinates in the end-effector frame.
    pub structure: Vec<Option<Vec3<f64>>>,
    /// Cameras no baseline reached. They may still have a pose from resection.
    pub flagged_cameras: Vec<usize>,
}

impl InitEstimate {
    /// Camera-from-world transform of camera `i`.
    pub fn extrinsics(&self, i: usize) -> Option<Pose> {
        self.camera_poses.get(i).copied().flatten().map(|p| p.inverse())
    }
}

/// All pairs of detections of one feature at one timestep in cameras `a`, `b`.
pub fn correspondences(data: &Dataset, a: usize, b: usize) -> Vec<Correspondence> {
    let mut out = Vec::new();
    for (t, s) in data.samples.iter().enumerate() {
        let (Some(da), Some(db)) = (s.detections.get(a), s.detections.get(b)) else { continue };
        for (k, (pa, pb)) in da.iter().zip(db).enumerate() {
            if let (Some(pa), Some(pb)) = (pa, pb) {
                out.push(Correspondence { feature: k, timestep: t, pixel_a: *pa, pixel_b: *pb });
            }
        }
    }
    out
}

fn norm(v: &Vec3<f64>) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    Some(if n % 2 == 1 { xs[n / 2] } else { 0.5 * (xs[n / 2 - 1] + xs[n / 2]) })
}

/// Triangulates feature `k` at timestep `t` from every placed camera that
/// sees it; the point must lie in front of all of them.
fn triangulate_detection(
    data: &Dataset,
    extrinsics: &[Option<Pose>],
    intrinsics: &[Intrinsics],
    t: usize,
    k: usize,
) -> Option<Vec3<f64>> {
    let views: Vec<(&Pose, &Intrinsics, [f64; 2])> = extrinsics
        .iter()
        .enumerate()
        .filter_map(|(i, e)| {
            let px = (*data.samples[t].detections.get(i)?.get(k)?)?;
            Some((e.as_ref()?, &intrinsics[i], px))
        })
        .collect();
    if views.len() < 2 {
        return None;
    }
    let x = triangulate(&views).ok()?;
    views.iter().all(|(p, _, _)| p.apply(&x)[2] > 0.0).then_some(x)
}

/// Camera-from-world pose of camera `j`, given camera `i` is placed, or
/// `None` if the pair does not determine it.
fn place_camera(
    data: &Dataset,
    extrinsics: &[Option<Pose>],
    intrinsics: &[Intrinsics],
    i: usize,
    j: usize,
) -> Option<Pose> {
    let corr = correspondences(data, i, j);
    let rel = estimate_baseline(&corr, &intrinsics[i], &intrinsics[j]).ok()?;
    let placed = extrinsics.iter().filter(|e| e.is_some()).count();
    let ext_i = extrinsics[i].as_ref()?;
    let scale = if placed == 1 {
        1.0
    } else {
        // fix the unknown baseline length against points the placed cameras already see
        let identity = Pose::identity();
        let ratios: Vec<f64> = corr
            .iter()
            .filter_map(|c| {
                let known = triangulate_detection(data, extrinsics, intrinsics, c.timestep, c.feature)?;
                let known = ext_i.apply(&known);
                let unit = triangulate_normalized(&[
                    (&identity, normalize(&intrinsics[i], c.pixel_a)),
                    (&rel, normalize(&intrinsics[j], c.pixel_b)),
                ])
                .ok()?;
                let d = norm(&unit);
                (d > 0.0 && unit[2] > 0.0).then(|| norm(&known) / d)
            })
            .collect();
        median(ratios)?
    };
    let scaled = Pose {
        rotation: rel.rotation,
        translation: rel.translation.map(|v| v * scale),
    };
    Some(scaled.compose(ext_i))
}

/// Initialization from features seen by two or more cameras.
///
/// `intrinsics` holds the factory guess of every camera. Cameras are placed
/// pairwise, always extending from a placed camera through the pair with the
/// most correspondences (at least eight). Cameras that no pair reaches are
/// flagged and, when possible, placed by resection against the recovered
/// structure. With a single camera this defers to [`initialize_by_sfm`].
pub fn initialize_by_triangulation(data: &Dataset, intrinsics: &[Intrinsics]) -> Result<InitEstimate> {
    data.validate()?;
    let c = intrinsics.len();
    if data.num_cameras() > c {
        return Err(Error::DimensionMismatch { expected: c, got: data.num_cameras() });
    }
    if c == 1 {
        return initialize_by_sfm(data, intrinsics);
    }
    let m = data.num_features();
    let mut counts = vec![vec![0usize; c]; c];
    for (i, row) in counts.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            if i != j {
                *v = correspondences(data, i, j).len();
            }
        }
    }
    let mut ext: Vec<Option<Pose>> = vec![None; c];
    ext[0] = Some(Pose::identity());
    let mut tried = vec![vec![false; c]; c];
    loop {
        let next = (0..c)
            .flat_map(|i| (0..c).map(move |j| (i, j)))
            .filter(|&(i, j)| ext[i].is_some() && ext[j].is_none() && !tried[i][j] && counts[i][j] >= 8)
            .max_by(|a, b| counts[a.0][a.1].cmp(&counts[b.0][b.1]).then(b.cmp(a)));
        let Some((i, j)) = next else { break };
        tried[i][j] = true;
        if let Some(pose) = place_camera(data, &ext, intrinsics, i, j) {
            ext[j] = Some(pose);
        }
    }
    let placed = ext.iter().filter(|e| e.is_some()).count();
    if placed < 2 {
        let best = counts.iter().flatten().copied().max().unwrap_or(0);
        return Err(Error::InsufficientCorrespondences { needed: 8, got: best });
    }
    let flagged: Vec<usize> = (0..c).filter(|&i| ext[i].is_none()).collect();

    let points: Vec<Vec<Option<Vec3<f64>>>> = (0..data.len())
        .map(|t| (0..m).map(|k| triangulate_detection(data, &ext, intrinsics, t, k)).collect())
        .collect();
    let ee_poses = chain_ee_poses(&points)?;
    let structure = structure_from_chain(&points, &ee_poses, m);

    let mut init = InitEstimate {
        camera_poses: ext.iter().map(|e| e.map(|p| p.inverse())).collect(),
        ee_poses,
        structure,
        flagged_cameras: flagged,
    };
    resect_flagged(data, intrinsics, &mut init);
    Ok(init)
}

/// Places every flagged camera that has no pose yet by resection against the
/// estimated structure and end-effector poses (at least six detections).
pub fn resect_flagged(data: &Dataset, intrinsics: &[Intrinsics], init: &mut InitEstimate) {
    for &j in &init.flagged_cameras {
        if init.camera_poses[j].is_some() || j >= intrinsics.len() {
            continue;
        }
        let mut pts = Vec::new();
        let mut px = Vec::new();
        for (t, s) in data.samples.iter().enumerate() {
            let Some(pose) = &init.ee_poses[t] else { continue };
            let Some(dets) = s.detections.get(j) else { continue };
            for (k, d) in dets.iter().enumerate() {
                if let (Some(d), Some(Some(f))) = (d, init.structure.get(k)) {
                    pts.push(pose.apply(f));
                    px.push(*d);
                }
            }
        }
        init.camera_poses[j] = resect(&pts, &px, &intrinsics[j]).ok().map(|e| e.inverse());
    }
}
