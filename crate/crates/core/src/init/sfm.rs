//! Incremental structure from motion for a single fixed camera watching the
//! moving end-effector.
//!
//! Each timestep is treated as a virtual view of a static object. The camera
//! frame is the world frame; the object frame coincides with the camera frame
//! at the seed timestep.

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{Pose, Vec3};
use crate::learning::BEHIND_CAMERA_PX;
use crate::model::Intrinsics;

use super::two_view::{normalize, relative_pose, resect, triangulate, triangulate_normalized};
use super::{median, InitEstimate};

const MIN_PAIR: usize = 8;
/// Median pixel displacement below which a pair has no usable parallax.
const MIN_PARALLAX_PX: f64 = 1e-3;
const SEED_ATTEMPTS: usize = 20;
/// Seed pairs grown into full reconstructions before the best is kept.
const SEED_TRIALS: usize = 6;
/// Placed features a timestep must see to be resected.
const MIN_RESECT: usize = 6;
const REFINE_ROUNDS: usize = 3;
/// Smallest angle between viewing rays, in radians, for a point to be placed.
const MIN_TRIANGULATION_ANGLE: f64 = 0.02;

struct PairScore {
    shared: Vec<usize>,
    parallax: f64,
}

fn detection(data: &Dataset, t: usize, k: usize) -> Option<[f64; 2]> {
    *data.samples[t].detections.first()?.get(k)?
}

fn score(data: &Dataset, a: usize, b: usize, m: usize) -> PairScore {
    let shared: Vec<usize> =
        (0..m).filter(|&k| detection(data, a, k).is_some() && detection(data, b, k).is_some()).collect();
    let moves: Vec<f64> = shared
        .iter()
        .map(|&k| {
            let (p, q) = (detection(data, a, k).unwrap(), detection(data, b, k).unwrap());
            ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
        })
        .collect();
    PairScore { shared, parallax: median(moves).unwrap_or(0.0) }
}

/// Initialization from camera 0 alone.
///
/// Seed pairs are pairs of timesteps sharing the most features, ties
/// broken by median parallax; the first few are each grown into a
/// reconstruction and the one registering the most timesteps at the lowest
/// reprojection error is kept. Growing adds timesteps greedily, the one
/// seeing the most placed features first, by resection against the current
/// structure, and triangulates newly visible features. A few rounds of
/// re-triangulating every feature and re-resecting every timestep follow.
pub fn initialize_by_sfm(data: &Dataset, intrinsics: &[Intrinsics]) -> Result<InitEstimate> {
    data.validate()?;
    let k = intrinsics.first().ok_or_else(|| Error::Precondition("no camera intrinsics".into()))?;
    let c = intrinsics.len().max(1);
    let t_len = data.len();
    let m = data.num_features();
    let x = |t: usize, f: usize| detection(data, t, f).map(|p| normalize(k, p));

    let scores: Vec<Vec<PairScore>> =
        (0..t_len).map(|a| (0..t_len).map(|b| score(data, a, b, m)).collect()).collect();

    // seed pair
    let mut candidates: Vec<(usize, usize)> = (0..t_len)
        .flat_map(|a| (a + 1..t_len).map(move |b| (a, b)))
        .filter(|&(a, b)| scores[a][b].shared.len() >= MIN_PAIR && scores[a][b].parallax > MIN_PARALLAX_PX)
        .collect();
    candidates.sort_by(|p, q| {
        let (sp, sq) = (&scores[p.0][p.1], &scores[q.0][q.1]);
        (sq.shared.len(), sq.parallax).partial_cmp(&(sp.shared.len(), sp.parallax)).unwrap().then(p.cmp(q))
    });
    let mut best: Option<Reconstruction> = None;
    let mut tried = 0;
    for &(a, b) in candidates.iter().take(SEED_ATTEMPTS) {
        if tried == SEED_TRIALS {
            break;
        }
        let shared = &scores[a][b].shared;
        let xa: Vec<[f64; 2]> = shared.iter().map(|&f| x(a, f).unwrap()).collect();
        let xb: Vec<[f64; 2]> = shared.iter().map(|&f| x(b, f).unwrap()).collect();
        let Ok(rel) = relative_pose(&xa, &xb) else { continue };
        let identity = Pose::identity();
        let mut structure: Vec<Option<Vec3<f64>>> = vec![None; m];
        for (i, &f) in shared.iter().enumerate() {
            if let Ok(p) = triangulate_normalized(&[(&identity, xa[i]), (&rel, xb[i])]) {
                if p[2] > 0.0 && rel.apply(&p)[2] > 0.0 && widest_angle(&p, &[&identity, &rel]) >= MIN_TRIANGULATION_ANGLE {
                    structure[f] = Some(p);
                }
            }
        }
        if structure.iter().filter(|s| s.is_some()).count() < MIN_PAIR {
            continue;
        }
        tried += 1;
        let mut poses: Vec<Option<Pose>> = vec![None; t_len];
        poses[a] = Some(Pose::identity());
        poses[b] = Some(rel);
        let rec = grow(data, k, structure, poses);
        if best.as_ref().map_or(true, |b| rec.better_than(b)) {
            best = Some(rec);
        }
    }
    let rec = best.ok_or(Error::SeedPairNotFound)?;
    let mut camera_poses = vec![None; c];
    camera_poses[0] = Some(Pose::identity());
    Ok(InitEstimate {
        camera_poses,
        ee_poses: rec.poses,
        structure: rec.structure,
        flagged_cameras: (1..c).collect(),
    })
}

struct Reconstruction {
    structure: Vec<Option<Vec3<f64>>>,
    poses: Vec<Option<Pose>>,
    registered: usize,
    rms_px: f64,
}

impl Reconstruction {
    fn better_than(&self, other: &Reconstruction) -> bool {
        (self.registered, -self.rms_px) > (other.registered, -other.rms_px)
    }
}

/// Registers every reachable timestep against a seeded structure, then
/// alternates re-triangulation and re-resection.
fn grow(data: &Dataset, k: &Intrinsics, mut structure: Vec<Option<Vec3<f64>>>, mut poses: Vec<Option<Pose>>) -> Reconstruction {
    let (t_len, m) = (poses.len(), structure.len());
    let mut failed = vec![false; t_len];
    loop {
        // the unregistered timestep seeing the most known points
        let known = |t: usize| (0..m).filter(|&f| structure[f].is_some() && detection(data, t, f).is_some()).count();
        let next = (0..t_len)
            .filter(|&t| poses[t].is_none() && !failed[t])
            .map(|t| (known(t), t))
            .filter(|&(n, _)| n >= MIN_RESECT)
            .max_by(|p, q| p.0.cmp(&q.0).then(q.1.cmp(&p.1)));
        let Some((_, t)) = next else { break };
        match resect_timestep(data, &structure, k, t) {
            Some(pose) => {
                poses[t] = Some(pose);
                for f in 0..m {
                    if structure[f].is_none() {
                        structure[f] = triangulate_feature(data, &poses, k, f);
                    }
                }
            }
            None => failed[t] = true,
        }
    }
    for _ in 0..REFINE_ROUNDS {
        for (f, slot) in structure.iter_mut().enumerate() {
            if let Some(p) = triangulate_feature(data, &poses, k, f) {
                *slot = Some(p);
            }
        }
        for t in 0..t_len {
            if poses[t].is_some() {
                if let Some(pose) = resect_timestep(data, &structure, k, t) {
                    poses[t] = Some(pose);
                }
            }
        }
    }
    for (f, slot) in structure.iter_mut().enumerate() {
        if let Some(p) = triangulate_feature(data, &poses, k, f) {
            *slot = Some(p);
        }
    }
    let (mut sq, mut count) = (0.0, 0usize);
    for (t, pose) in poses.iter().enumerate() {
        let Some(pose) = pose else { continue };
        for (f, p) in structure.iter().enumerate() {
            let (Some(p), Some(px)) = (p, detection(data, t, f)) else { continue };
            let q = pose.apply(p);
            let (u, v) = if q[2] > 0.0 {
                (k.fx * q[0] / q[2] + k.cx - px[0], k.fy * q[1] / q[2] + k.cy - px[1])
            } else {
                (BEHIND_CAMERA_PX, BEHIND_CAMERA_PX)
            };
            sq += u * u + v * v;
            count += 1;
        }
    }
    let rms_px = if count == 0 { f64::INFINITY } else { (sq / count as f64).sqrt() };
    Reconstruction { registered: poses.iter().filter(|p| p.is_some()).count(), structure, poses, rms_px }
}

/// The depth-reversed twin of a single-camera reconstruction.
///
/// Under near-affine viewing a shallow object and its mirror image through a
/// plane facing the camera reproject almost alike, so structure from motion
/// may settle on either. Structure is reflected in `z`; each timestep's
/// points are reflected about the depth of their centroid.
pub fn mirrored_in_depth(init: &InitEstimate) -> InitEstimate {
    let flip = |p: &Vec3<f64>| [p[0], p[1], -p[2]];
    let known: Vec<Vec3<f64>> = init.structure.iter().flatten().copied().collect();
    let n = known.len().max(1) as f64;
    let centroid = known.iter().fold([0.0; 3], |a, p| [a[0] + p[0] / n, a[1] + p[1] / n, a[2] + p[2] / n]);
    let ee_poses = init
        .ee_poses
        .iter()
        .map(|pose| {
            pose.map(|pose| {
                let mut rotation = pose.rotation;
                for (i, row) in rotation.iter_mut().enumerate() {
                    for (j, v) in row.iter_mut().enumerate() {
                        if (i == 2) != (j == 2) {
                            *v = -*v;
                        }
                    }
                }
                let c = pose.apply(&centroid);
                let t = pose.translation;
                Pose { rotation, translation: [t[0], t[1], 2.0 * c[2] - t[2]] }
            })
        })
        .collect();
    InitEstimate {
        camera_poses: init.camera_poses.clone(),
        ee_poses,
        structure: init.structure.iter().map(|p| p.as_ref().map(flip)).collect(),
        flagged_cameras: init.flagged_cameras.clone(),
    }
}

/// Pose of timestep `t` from its detections of already placed features.
fn resect_timestep(data: &Dataset, structure: &[Option<Vec3<f64>>], k: &Intrinsics, t: usize) -> Option<Pose> {
    let (points, pixels): (Vec<Vec3<f64>>, Vec<[f64; 2]>) = structure
        .iter()
        .enumerate()
        .filter_map(|(f, p)| Some(((*p)?, detection(data, t, f)?)))
        .unzip();
    if points.len() < MIN_RESECT {
        return None;
    }
    resect(&points, &pixels, k).ok()
}

fn triangulate_feature(data: &Dataset, poses: &[Option<Pose>], k: &Intrinsics, f: usize) -> Option<Vec3<f64>> {
    let views: Vec<(&Pose, &Intrinsics, [f64; 2])> = poses
        .iter()
        .enumerate()
        .filter_map(|(t, p)| Some((p.as_ref()?, k, detection(data, t, f)?)))
        .collect();
    if views.len() < 2 {
        return None;
    }
    let p = triangulate(&views).ok()?;
    let poses: Vec<&Pose> = views.iter().map(|v| v.0).collect();
    (views.iter().all(|(q, _, _)| q.apply(&p)[2] > 0.0) && widest_angle(&p, &poses) >= MIN_TRIANGULATION_ANGLE)
        .then_some(p)
}

/// Widest angle at `p` between the rays from two of the view centres.
fn widest_angle(p: &Vec3<f64>, poses: &[&Pose]) -> f64 {
    let rays: Vec<Vec3<f64>> = poses
        .iter()
        .map(|q| {
            let c = q.inverse().translation;
            let d = [c[0] - p[0], c[1] - p[1], c[2] - p[2]];
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            [d[0] / n, d[1] / n, d[2] / n]
        })
        .collect();
    let mut widest: f64 = 0.0;
    for (i, a) in rays.iter().enumerate() {
        for b in &rays[i + 1..] {
            let cos = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).clamp(-1.0, 1.0);
            widest = widest.max(cos.acos());
        }
    }
    widest
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{collect_random, make_world, rng_from_seed, WorldConfig};
    use nalgebra::{Matrix3, Vector3};

    fn single_camera(name: &str, seed: u64) -> (crate::simulator::WorldTruth, Dataset) {
        let w = make_world(&WorldConfig::preset(name).unwrap().with_noise(0.0, 0.0)).unwrap();
        let mut d = collect_random(&w, 30, 0.15, &mut rng_from_seed(seed)).unwrap();
        for s in d.samples.iter_mut() {
            s.detections.truncate(1);
        }
        (w, d)
    }

    /// RMS distance after the best similarity transform (Umeyama).
    fn similarity_rms(a: &[Vec3<f64>], b: &[Vec3<f64>]) -> f64 {
        let n = a.len() as f64;
        let ca = a.iter().fold(Vector3::zeros(), |s, p| s + Vector3::from(*p)) / n;
        let cb = b.iter().fold(Vector3::zeros(), |s, p| s + Vector3::from(*p)) / n;
        let mut cov = Matrix3::zeros();
        let mut var_a = 0.0;
        for (p, q) in a.iter().zip(b) {
            let da = Vector3::from(*p) - ca;
            let db = Vector3::from(*q) - cb;
            cov += db * da.transpose();
            var_a += da.norm_squared();
        }
        let svd = cov.svd(true, true);
        let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut d = Matrix3::identity();
        if (u * v_t).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        let r = u * d * v_t;
        let s = (Matrix3::from_diagonal(&svd.singular_values) * d).trace() / var_a;
        let err: f64 = a
            .iter()
            .zip(b)
            .map(|(p, q)| (s * r * (Vector3::from(*p) - ca) + cb - Vector3::from(*q)).norm_squared())
            .sum();
        (err / n).sqrt()
    }

    #[test]
    fn structure_matches_truth_up_to_similarity() {
        for (name, seed) in [("ur5_sim", 1), ("xarm_sim", 2)] {
            let (w, d) = single_camera(name, seed);
            let k = [w.true_model.cameras[0].intrinsics];
            let init = initialize_by_sfm(&d, &k).unwrap();
            let est: Vec<Vec3<f64>> = init.structure.iter().map(|p| p.unwrap()).collect();
            let rms = similarity_rms(&est, &w.true_model.features.coords);
            assert!(rms < 1e-4, "{name}: {rms}");
            assert!(init.ee_poses.iter().filter(|p| p.is_some()).count() >= 28);
        }
    }

    #[test]
    fn mirror_reflects_each_view_about_its_centroid_depth() {
        let (w, d) = single_camera("xarm_sim", 5);
        let init = initialize_by_sfm(&d, &[w.true_model.cameras[0].intrinsics]).unwrap();
        let twin = mirrored_in_depth(&init);
        let pts: Vec<Vec3<f64>> = init.structure.iter().flatten().copied().collect();
        let flipped: Vec<Vec3<f64>> = twin.structure.iter().flatten().copied().collect();
        let n = pts.len() as f64;
        for (p, q) in init.ee_poses.iter().zip(&twin.ee_poses) {
            let (Some(p), Some(q)) = (p, q) else { continue };
            let x: Vec<Vec3<f64>> = pts.iter().map(|s| p.apply(s)).collect();
            let depth = x.iter().map(|v| v[2]).sum::<f64>() / n;
            for (a, s) in x.iter().zip(&flipped) {
                let b = q.apply(s);
                assert!((b[0] - a[0]).abs() < 1e-9 && (b[1] - a[1]).abs() < 1e-9);
                assert!((b[2] - (2.0 * depth - a[2])).abs() < 1e-9);
            }
            assert!(q.orthonormality_error() < 1e-12 && (q.determinant() - 1.0).abs() < 1e-12);
        }
        let back = mirrored_in_depth(&twin);
        assert_eq!(back.structure, init.structure);
    }

    #[test]
    fn identical_frames_have_no_seed_pair() {
        let (w, d) = single_camera("ur5_sim", 3);
        let frozen = Dataset::new(vec![d.samples[0].clone(); 10]);
        let k = [w.true_model.cameras[0].intrinsics];
        assert_eq!(initialize_by_sfm(&frozen, &k).unwrap_err(), Error::SeedPairNotFound);
    }

    #[test]
    fn sparse_frame_is_left_unregistered() {
        let (w, mut d) = single_camera("ur5_sim", 4);
        let dets = &mut d.samples[5].detections[0];
        for p in dets.iter_mut().skip(5) {
            *p = None;
        }
        let init = initialize_by_sfm(&d, &[w.true_model.cameras[0].intrinsics]).unwrap();
        assert!(init.ee_poses[5].is_none());
        assert!(init.ee_poses[6].is_some());
    }
}
