//! Learning when joint positions are not read out, only commanded actions.

use crate::dataset::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::{forward_kinematics, free_mask};
use crate::simulator::WorldHints;

use super::objectives::{dataset_observations, UnobservedProblem};
use super::{evaluate_rms, learn_pipeline, restore_groups, solve, LearnConfig, LearnResult, StageReport};

/// Weight used when the controller noise is unknown or zero.
pub const DEFAULT_LAMBDA: f64 = 1e4;

/// Joint positions reached from `start` if every action executes exactly.
pub fn integrate_actions(start: &[f64], actions: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(actions.len() + 1);
    let mut j = start.to_vec();
    out.push(j.clone());
    for a in actions {
        for (x, d) in j.iter_mut().zip(a) {
            *x += d;
        }
        out.push(j.clone());
    }
    out
}

fn lambda_for(hints: &WorldHints, cfg: &LearnConfig) -> f64 {
    cfg.lambda.unwrap_or(match hints.controller_noise_sigma {
        Some(s) if s > 0.0 => 1.0 / (s * s),
        _ => DEFAULT_LAMBDA,
    })
}

/// Learns the model and the unobserved joint trajectory.
///
/// The standard pipeline first runs on joints integrated from the home
/// configuration as if every action executed perfectly. Model and joints
/// are then refined together on the pixel loss plus
/// `λ·Σₜ‖(jₜ₊₁ − jₜ) − aₜ‖²`, with the first joint vector held at home.
pub fn learn_unobserved(data: &Dataset, hints: &WorldHints, cfg: &LearnConfig) -> Result<LearnResult> {
    let actions = match &data.actions {
        Some(a) if !a.is_empty() => a,
        _ => return Err(Error::Precondition("learning without joints needs commanded actions".into())),
    };
    if actions.len() + 1 != data.len() {
        return Err(Error::DimensionMismatch { expected: data.len() - 1, got: actions.len() });
    }
    let n = actions[0].len();
    if let Some(a) = actions.iter().find(|a| a.len() != n) {
        return Err(Error::DimensionMismatch { expected: n, got: a.len() });
    }
    let home = if hints.home.len() == n { hints.home.clone() } else { vec![0.0; n] };
    let pseudo = integrate_actions(&home, actions);
    let seeded = Dataset {
        samples: data
            .samples
            .iter()
            .zip(&pseudo)
            .map(|(s, j)| Sample { joints: Some(j.clone()), detections: s.detections.clone() })
            .collect(),
        actions: None,
    };
    let standard = LearnConfig { unobserved_joints: false, ..cfg.clone() };
    let first = learn_pipeline(&seeded, hints, &standard)?;

    let lambda = lambda_for(hints, cfg);
    let start_model = first.model.clone();
    let mut problem = UnobservedProblem {
        chart: crate::model::ModelChart::new(start_model.clone()),
        joints: pseudo,
        actions: actions.clone(),
        obs: dataset_observations(data),
        sqrt_lambda: lambda.sqrt(),
    };
    let layout = start_model.layout();
    let mut free = free_mask(&layout, &cfg.frozen);
    free.resize(crate::optim::ResidualModel::num_params(&problem), true);
    let o = problem.joint_offset(0);
    free[o..o + n].iter_mut().for_each(|f| *f = false);
    let report = solve(&mut problem, &free, &cfg.full_options, cfg.execution)?;

    let mut model = problem.chart.reference;
    restore_groups(&mut model, &start_model, &cfg.frozen);
    let joints = problem.joints;
    let ee_poses = joints.iter().map(|j| forward_kinematics(&model.kinematics, j)).collect::<Result<_>>()?;
    let with_joints = Dataset {
        samples: data
            .samples
            .iter()
            .zip(&joints)
            .map(|(s, j)| Sample { joints: Some(j.clone()), detections: s.detections.clone() })
            .collect(),
        actions: None,
    };
    let train_rms_px = evaluate_rms(&model, &with_joints)?;
    let mut reports = first.reports;
    reports.push(StageReport { stage: "unobserved".into(), report });
    Ok(LearnResult {
        model,
        ee_poses,
        inferred_joints: Some(joints),
        reports,
        train_rms_px,
        underdetermined: first.underdetermined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integration_accumulates_actions() {
        let j = integrate_actions(&[1.0, 0.0], &[vec![0.5, -1.0], vec![0.25, 2.0]]);
        assert_eq!(j, vec![vec![1.0, 0.0], vec![1.5, -1.0], vec![1.75, 1.0]]);
    }

    #[test]
    fn missing_actions_is_a_precondition_error() {
        let w = crate::simulator::make_world(&crate::simulator::WorldConfig::preset("ur5_sim").unwrap()).unwrap();
        let d = Dataset::new(vec![Sample { joints: None, detections: vec![vec![None; 12]; 2] }; 3]);
        assert!(matches!(
            learn_unobserved(&d, &w.hints(), &LearnConfig::default()),
            Err(Error::Precondition(_))
        ));
    }
}
