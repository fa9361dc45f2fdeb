//! Linking per-timestep point sets into end-effector poses.

use crate::error::{Error, Result};
use crate::geometry::{arun_align, Pose, Vec3};

/// Features needed to align two timesteps.
pub const MIN_SHARED: usize = 3;

fn shared(a: &[Option<Vec3<f64>>], b: &[Option<Vec3<f64>>]) -> (Vec<Vec3<f64>>, Vec<Vec3<f64>>) {
    a.iter()
        .zip(b)
        .filter_map(|(x, y)| Some(((*x)?, (*y)?)))
        .unzip()
}

/// End-effector poses from points triangulated at each timestep
/// (`points[t][k]`, world frame).
///
/// The first timestep with at least three points is the identity. Others are
/// linked greedily, always taking the pair (unchained, chained) with the most
/// shared points. Timesteps that cannot be linked are `None`.
pub fn chain_ee_poses(points: &[Vec<Option<Vec3<f64>>>]) -> Result<Vec<Option<Pose>>> {
    let count = |t: usize| points[t].iter().filter(|p| p.is_some()).count();
    let anchor = (0..points.len()).find(|&t| count(t) >= MIN_SHARED).ok_or(Error::NoChainableTimesteps)?;
    let mut poses: Vec<Option<Pose>> = vec![None; points.len()];
    poses[anchor] = Some(Pose::identity());

    let overlap = |a: usize, b: usize| {
        points[a].iter().zip(&points[b]).filter(|(x, y)| x.is_some() && y.is_some()).count()
    };
    let mut failed = vec![false; points.len()];
    // best link into the chained set for every unchained timestep
    let mut link: Vec<Option<(usize, usize)>> = (0..points.len())
        .map(|t| {
            if t == anchor || count(t) < MIN_SHARED {
                return None;
            }
            let n = overlap(t, anchor);
            (n >= MIN_SHARED).then_some((n, anchor))
        })
        .collect();
    loop {
        let next = (0..points.len())
            .filter(|&t| poses[t].is_none() && !failed[t])
            .filter_map(|t| link[t].map(|(n, s)| (n, t, s)))
            .max_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)));
        let Some((_, t, s)) = next else { break };
        let (ps, pt) = shared(&points[s], &points[t]);
        match arun_align(&ps, &pt) {
            Ok(rel) => {
                poses[t] = Some(rel.compose(poses[s].as_ref().unwrap()));
                for u in 0..points.len() {
                    if poses[u].is_none() && count(u) >= MIN_SHARED {
                        let n = overlap(u, t);
                        if n >= MIN_SHARED && link[u].map_or(true, |(m, _)| n > m) {
                            link[u] = Some((n, t));
                        }
                    }
                }
            }
            Err(_) => failed[t] = true,
        }
    }
    Ok(poses)
}

/// Feature coordinates in the end-effector frame: each point mapped back
/// through its timestep's pose, averaged over timesteps.
pub fn structure_from_chain(points: &[Vec<Option<Vec3<f64>>>], poses: &[Option<Pose>], m: usize) -> Vec<Option<Vec3<f64>>> {
    let mut sum = vec![[0.0; 3]; m];
    let mut n = vec![0usize; m];
    for (pts, pose) in points.iter().zip(poses) {
        let Some(pose) = pose else { continue };
        let inv = pose.inverse();
        for (k, p) in pts.iter().enumerate().take(m) {
            if let Some(p) = p {
                let q = inv.apply(p);
                for i in 0..3 {
                    sum[k][i] += q[i];
                }
                n[k] += 1;
            }
        }
    }
    sum.iter()
        .zip(&n)
        .map(|(s, &c)| (c > 0).then(|| [s[0] / c as f64, s[1] / c as f64, s[2] / c as f64]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn structure() -> Vec<Vec3<f64>> {
        vec![[0.1, 0.0, 0.0], [0.0, 0.1, 0.0], [0.0, 0.0, 0.1], [0.05, 0.05, 0.02], [-0.03, 0.02, 0.07]]
    }

    fn observe(p: &Pose) -> Vec<Option<Vec3<f64>>> {
        structure().iter().map(|f| Some(p.apply(f))).collect()
    }

    #[test]
    fn static_scene_gives_identities() {
        let pts = vec![observe(&Pose::identity()); 4];
        let poses = chain_ee_poses(&pts).unwrap();
        for p in poses {
            let p = p.unwrap();
            assert!(p.distance_sq(&Pose::identity()) < 1e-24);
        }
    }

    #[test]
    fn relative_poses_are_recovered() {
        let truth: Vec<Pose> = (0..6)
            .map(|t| Pose::exp([0.1 * t as f64, 0.3, 1.0], &[0.2 * t as f64, -0.1, 0.05 * t as f64]))
            .collect();
        let pts: Vec<_> = truth.iter().map(observe).collect();
        let poses = chain_ee_poses(&pts).unwrap();
        let g = truth[0].inverse();
        for (p, q) in poses.iter().zip(&truth) {
            let expected = q.compose(&g);
            assert!(p.unwrap().distance_sq(&expected).sqrt() < 1e-9);
        }
    }

    #[test]
    fn sparse_timestep_is_dropped() {
        let mut pts = vec![observe(&Pose::identity()); 3];
        for p in pts[1].iter_mut().skip(2) {
            *p = None;
        }
        let poses = chain_ee_poses(&pts).unwrap();
        assert!(poses[0].is_some() && poses[1].is_none() && poses[2].is_some());
    }

    #[test]
    fn nothing_to_chain() {
        let pts = vec![vec![Some([0.0; 3]), None, None]; 3];
        assert_eq!(chain_ee_poses(&pts).unwrap_err(), Error::NoChainableTimesteps);
    }

    #[test]
    fn structure_is_expressed_in_the_anchor_frame() {
        let truth = [Pose::identity(), Pose::exp([0.2, 0.0, 0.0], &[0.0, 0.3, 0.0])];
        let pts: Vec<_> = truth.iter().map(observe).collect();
        let poses = chain_ee_poses(&pts).unwrap();
        let s = structure_from_chain(&pts, &poses, 5);
        for (a, b) in s.iter().zip(structure()) {
            let a = a.unwrap();
            assert!((0..3).all(|i| (a[i] - b[i]).abs() < 1e-12));
        }
    }
}
