//! Online adaptation: change detection, windowed relearning of selected
//! parameter groups, and growing the model by new cameras or features.

use std::sync::{Arc, RwLock};

use crate::dataset::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::init::{resect, triangulate};
use crate::model::{forward_kinematics, predict_image, CameraParams, Intrinsics, ModelParams, ParamGroup};

use super::{learn_full, pixel_loss, LearnConfig, LearnResult};

/// Change-detection threshold for a model whose training RMS is `train_rms`.
pub fn default_change_threshold(train_rms: f64) -> f64 {
    1.5 * train_rms + 0.25
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChangeCheck {
    pub changed: bool,
    /// RMS reprojection residual of the sample; 0 when nothing was detected.
    pub rms_px: f64,
}

/// Flags a sample whose detections disagree with the model's prediction by
/// more than `threshold_px` (RMS over detected features).
pub fn detect_change(model: &ModelParams, sample: &Sample, threshold_px: f64) -> Result<ChangeCheck> {
    let joints = sample.joints.as_ref().ok_or_else(|| Error::Precondition("sample has no joint reading".into()))?;
    let pred = predict_image(model, joints)?;
    let (sum, count) = pixel_loss(&pred, &sample.detections);
    let rms_px = if count == 0 { 0.0 } else { (sum / count as f64).sqrt() };
    Ok(ChangeCheck { changed: rms_px > threshold_px, rms_px })
}

/// Relearns the non-frozen groups of `model` on the most recent
/// `cfg.window` samples of `samples`.
pub fn online_update(
    model: &ModelParams,
    samples: &Dataset,
    frozen: &[ParamGroup],
    cfg: &LearnConfig,
) -> Result<LearnResult> {
    if samples.is_empty() {
        return Err(Error::Precondition("online update needs at least one sample".into()));
    }
    let start = samples.len().saturating_sub(cfg.window);
    let window = samples.slice(start, samples.len());
    let cfg = LearnConfig { frozen: frozen.to_vec(), ..cfg.clone() };
    learn_full(&window, model, &cfg)
}

/// Adds a camera for every camera index in `data` beyond the model's,
/// placed by resection against the features the model predicts in 3D.
/// `intrinsics` supplies the guess for each new camera, in order.
pub fn extend_cameras(model: &ModelParams, data: &Dataset, intrinsics: &[Intrinsics]) -> Result<ModelParams> {
    let mut out = model.clone();
    for (extra, i) in (model.c()..data.num_cameras()).enumerate() {
        let k = *intrinsics.get(extra).ok_or(Error::IndexOutOfRange { index: extra, len: intrinsics.len() })?;
        let mut points = Vec::new();
        let mut pixels = Vec::new();
        for s in &data.samples {
            let Some(j) = &s.joints else { continue };
            let Some(dets) = s.detections.get(i) else { continue };
            let ee = forward_kinematics(&model.kinematics, j)?;
            for (f, d) in model.features.coords.iter().zip(dets) {
                if let Some(px) = d {
                    points.push(ee.apply(f));
                    pixels.push(*px);
                }
            }
        }
        if points.len() < 6 {
            return Err(Error::InsufficientDetections { needed: 6, got: points.len() });
        }
        let extrinsics = resect(&points, &pixels, &k)?;
        out.cameras.push(CameraParams { intrinsics: k, extrinsics });
    }
    Ok(out)
}

/// Adds a feature row for every feature index in `data` beyond the model's,
/// triangulated in the end-effector frame from all its detections.
pub fn extend_features(model: &ModelParams, data: &Dataset) -> Result<ModelParams> {
    let mut out = model.clone();
    for f in model.m()..data.num_features() {
        let mut views: Vec<(Pose, Intrinsics, [f64; 2])> = Vec::new();
        for s in &data.samples {
            let Some(j) = &s.joints else { continue };
            let ee = forward_kinematics(&model.kinematics, j)?;
            for (cam, dets) in model.cameras.iter().zip(&s.detections) {
                if let Some(Some(px)) = dets.get(f) {
                    views.push((cam.extrinsics.compose(&ee), cam.intrinsics, *px));
                }
            }
        }
        if views.len() < 2 {
            return Err(Error::InsufficientDetections { needed: 2, got: views.len() });
        }
        let refs: Vec<(&Pose, &Intrinsics, [f64; 2])> = views.iter().map(|(p, k, x)| (p, k, *x)).collect();
        out.features.coords.push(triangulate(&refs)?);
    }
    Ok(out)
}

/// The current model, shared between a learner that replaces it and readers
/// (such as a servo loop) that take consistent snapshots.
#[derive(Clone, Debug)]
pub struct SharedModel(Arc<RwLock<Arc<ModelParams>>>);

impl SharedModel {
    pub fn new(model: ModelParams) -> Self {
        SharedModel(Arc::new(RwLock::new(Arc::new(model))))
    }

    pub fn snapshot(&self) -> Arc<ModelParams> {
        Arc::clone(&self.0.read().unwrap_or_else(|e| e.into_inner()))
    }

    pub fn replace(&self, model: ModelParams) {
        *self.0.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(model);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learning::evaluate_rms;
    use crate::simulator::{
        apply_perturbation, collect_random, collect_random_from, make_world, observe, rng_from_seed,
        Perturbation, WorldConfig, WorldTruth,
    };

    fn world() -> WorldTruth {
        make_world(&WorldConfig::preset("ur5_sim").unwrap().with_noise(0.0, 0.0)).unwrap()
    }

    #[test]
    fn threshold_formula() {
        assert_eq!(default_change_threshold(0.5), 1.0);
        assert_eq!(default_change_threshold(0.0), 0.25);
    }

    #[test]
    fn unperturbed_sample_is_not_flagged() {
        let w = world();
        let s = observe(&w, &w.home, &mut rng_from_seed(0)).unwrap();
        let c = detect_change(&w.true_model, &s, 3.0).unwrap();
        assert_eq!(c, ChangeCheck { changed: false, rms_px: 0.0 });
    }

    #[test]
    fn moved_camera_is_flagged_and_relearned_with_the_rest_frozen() {
        let w = world();
        let delta = Pose::from_translation([0.05, 0.0, 0.0]);
        let moved = apply_perturbation(&w, &Perturbation::MoveCamera { index: 0, delta }).unwrap();
        let mut rng = rng_from_seed(4);
        let new = collect_random(&moved, 3, 0.1, &mut rng).unwrap();
        assert!(detect_change(&w.true_model, &new.samples[1], 3.0).unwrap().changed);

        let layout = w.true_model.layout();
        let frozen = crate::learning::frozen_except(&layout, &[ParamGroup::Extrinsics(0)]);
        let r = online_update(&w.true_model, &new.slice(0, 2), &frozen, &LearnConfig::default()).unwrap();
        assert_eq!(r.model.kinematics, w.true_model.kinematics);
        assert_eq!(r.model.features, w.true_model.features);
        assert_eq!(r.model.cameras[1], w.true_model.cameras[1]);
        assert_eq!(r.model.cameras[0].intrinsics, w.true_model.cameras[0].intrinsics);
        let held = collect_random_from(&moved, &moved.home, 50, 0.1, &mut rng_from_seed(99)).unwrap();
        assert!(evaluate_rms(&r.model, &held).unwrap() < 1e-3);
    }

    #[test]
    fn window_keeps_most_recent_samples() {
        let w = world();
        let d = collect_random(&w, 6, 0.1, &mut rng_from_seed(1)).unwrap();
        let cfg = LearnConfig { window: 2, ..Default::default() };
        let layout = w.true_model.layout();
        let all = crate::learning::frozen_except(&layout, &[]);
        let r = online_update(&w.true_model, &d, &all, &cfg).unwrap();
        assert_eq!(r.ee_poses.len(), 2);
        assert_eq!(r.model, w.true_model);
    }

    #[test]
    fn new_camera_and_feature_are_recovered() {
        let w = world();
        let cam = w.true_model.cameras[1].clone();
        let bigger = apply_perturbation(&w, &Perturbation::AddCamera { camera: cam.clone() }).unwrap();
        let d = collect_random(&bigger, 10, 0.1, &mut rng_from_seed(2)).unwrap();
        let ext = extend_cameras(&w.true_model, &d, &[cam.intrinsics]).unwrap();
        assert_eq!(ext.c(), 3);
        assert!(ext.cameras[2].extrinsics.distance_sq(&cam.extrinsics).sqrt() < 1e-6);

        let row = crate::simulator::extra_marker(1)[0];
        let more = apply_perturbation(&w, &Perturbation::AttachFeatures { rows: vec![row] }).unwrap();
        let d = collect_random(&more, 10, 0.1, &mut rng_from_seed(3)).unwrap();
        let ext = extend_features(&w.true_model, &d).unwrap();
        let got = ext.features.coords[12];
        assert!((0..3).all(|i| (got[i] - row[i]).abs() < 1e-7), "{got:?} vs {row:?}");
    }

    #[test]
    fn snapshots_are_whole_models() {
        let w = world();
        let shared = SharedModel::new(w.true_model.clone());
        let before = shared.snapshot();
        let mut other = w.true_model.clone();
        other.features.coords[0][0] += 1.0;
        shared.replace(other.clone());
        assert_eq!(*before, w.true_model);
        assert_eq!(*shared.snapshot(), other);
    }
}
