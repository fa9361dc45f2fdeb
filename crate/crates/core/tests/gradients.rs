//! Exact gradients of every learning and inference objective against central
//! finite differences, at 20 random points each.

use rand::Rng;

use genservo::dataset::Dataset;
use genservo::geometry::{Pose, Vec3};
use genservo::inference::{ImageJointsProblem, IkProblem, PoseProblem};
use genservo::learning::{
    dataset_observations, sample_observations, FullProblem, KinematicsProblem, StructureProblem, UnobservedProblem,
};
use genservo::model::{forward_kinematics, ModelChart};
use genservo::optim::{finite_difference, max_relative_error, LeastSquares, Objective, ResidualModel};
use genservo::simulator::{collect_random, make_world, rng_from_seed, Rng64, WorldConfig, WorldTruth};

const POINTS: usize = 20;
const TOLERANCE: f64 = 1e-5;

fn setup() -> (WorldTruth, Dataset) {
    let world = make_world(&WorldConfig::preset("ur5_sim").unwrap()).unwrap();
    let data = collect_random(&world, 12, 0.1, &mut rng_from_seed(3)).unwrap();
    (world, data)
}

fn random_point(rng: &mut Rng64, n: usize, spread: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-spread..spread)).collect()
}

/// Worst componentwise relative error over `POINTS` random points, with the
/// dual-number path and, where the model offers one, the hand-written
/// Jacobian path.
fn worst_error<M: ResidualModel>(model: &M, base: Vec<f64>, spread: f64, seed: u64) -> f64 {
    let mut rng = rng_from_seed(seed);
    let mut worst: f64 = 0.0;
    for structured in [false, true] {
        let ls = LeastSquares::new(model, base.clone()).model_jacobian(structured);
        for _ in 0..POINTS {
            let y = random_point(&mut rng, ls.num_vars(), spread);
            let mut g = vec![0.0; y.len()];
            ls.eval(&y, Some(&mut g));
            let fd = finite_difference(|x| ls.eval(x, None), &y);
            worst = worst.max(max_relative_error(&g, &fd));
        }
    }
    worst
}

#[test]
fn full_model_objective() {
    let (world, data) = setup();
    let p = FullProblem::new(world.true_model.clone(), data.joints().unwrap(), dataset_observations(&data));
    let err = worst_error(&p, vec![0.0; world.true_model.parameter_count()], 0.01, 1);
    assert!(err < TOLERANCE, "{err}");
}

#[test]
fn structure_objective() {
    let (world, data) = setup();
    let m = &world.true_model;
    let poses = data.joints().unwrap().iter().map(|j| forward_kinematics(&m.kinematics, j).unwrap()).collect();
    let p = StructureProblem {
        features: m.features.coords.clone(),
        cameras: m.cameras.clone(),
        poses,
        obs: dataset_observations(&data),
    };
    let err = worst_error(&p, vec![0.0; p.num_params()], 0.01, 2);
    assert!(err < TOLERANCE, "{err}");
}

#[test]
fn kinematics_objective() {
    let (world, data) = setup();
    let kin = &world.true_model.kinematics;
    let joints = data.joints().unwrap();
    let targets = joints.iter().map(|j| forward_kinematics(kin, j).unwrap()).collect();
    let p = KinematicsProblem {
        base: kin.base,
        links: kin.links.clone(),
        tool: Pose::exp([0.01, 0.02, 0.1], &[0.1, -0.2, 0.3]),
        joints,
        targets,
    };
    let err = worst_error(&p, vec![0.0; p.num_params()], 0.05, 3);
    assert!(err < TOLERANCE, "{err}");
}

#[test]
fn unobserved_joints_objective() {
    let (world, data) = setup();
    let joints = data.joints().unwrap();
    let actions = joints.windows(2).map(|w| w[1].iter().zip(&w[0]).map(|(b, a)| b - a).collect()).collect();
    let p = UnobservedProblem {
        chart: ModelChart::new(world.true_model.clone()),
        joints,
        actions,
        obs: dataset_observations(&data),
        sqrt_lambda: 100.0,
    };
    let err = worst_error(&p, vec![0.0; p.num_params()], 0.01, 4);
    assert!(err < TOLERANCE, "{err}");
}

#[test]
fn pose_objective() {
    let (world, data) = setup();
    let m = &world.true_model;
    let features: Vec<Vec3<f64>> = m.features.coords.clone();
    let pose = forward_kinematics(&m.kinematics, data.samples[0].joints.as_ref().unwrap()).unwrap();
    let p = PoseProblem { features: &features, cameras: &m.cameras, pose, obs: sample_observations(&data.samples[0]) };
    let err = worst_error(&p, vec![0.0; 6], 0.05, 5);
    assert!(err < TOLERANCE, "{err}");
}

#[test]
fn inverse_kinematics_objective() {
    let (world, data) = setup();
    let m = &world.true_model;
    let target = forward_kinematics(&m.kinematics, data.samples[1].joints.as_ref().unwrap()).unwrap();
    let p = IkProblem { model: m, target };
    let err = worst_error(&p, world.home.clone(), 0.5, 6);
    assert!(err < TOLERANCE, "{err}");
}

#[test]
fn image_joints_objective() {
    let (world, data) = setup();
    let s = &data.samples[2];
    let p = ImageJointsProblem { model: &world.true_model, obs: sample_observations(s) };
    let err = worst_error(&p, s.joints.clone().unwrap(), 0.05, 7);
    assert!(err < TOLERANCE, "{err}");
}
