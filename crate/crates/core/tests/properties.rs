//! Randomized invariants of the model, optimizer, simulator and file formats.

use proptest::prelude::*;
use rand::Rng;

use genservo::dataset::Dataset;
use genservo::geometry::Pose;
use genservo::io::{read_dataset, write_dataset};
use genservo::learning::{dataset_observations, FullProblem};
use genservo::model::{forward_kinematics, parameter_count, predict_image, DhLink, KinematicParams, Layout, ParamGroup, PixelPrediction};
use genservo::optim::{minimize, LeastSquares, Objective, OptimizerOptions};
use genservo::par::Execution;
use genservo::simulator::{
    apply_perturbation, collect_random, make_world, rng_from_seed, Perturbation, WorldConfig, WorldTruth, PRESETS,
};

fn world(i: usize) -> WorldTruth {
    make_world(&WorldConfig::preset(PRESETS[i]).unwrap()).unwrap()
}

fn joints_in_limits(w: &WorldTruth, seed: u64) -> Vec<f64> {
    w.random_joints(&mut rng_from_seed(seed))
}

fn max_pixel_gap(a: &PixelPrediction, b: &PixelPrediction) -> f64 {
    let mut worst: f64 = 0.0;
    for (ca, cb) in a.cameras.iter().zip(&b.cameras) {
        for (p, q) in ca.iter().zip(cb) {
            assert_eq!(p.in_front, q.in_front);
            if p.in_front {
                worst = worst.max((p.u - q.u).abs()).max((p.v - q.v).abs());
            }
        }
    }
    worst
}

fn arb_pose() -> impl Strategy<Value = Pose> {
    (prop::array::uniform3(-2.0f64..2.0), prop::array::uniform3(-1.8f64..1.8)).prop_map(|(t, w)| Pose::exp(t, &w))
}

struct Rosenbrock;

impl Objective for Rosenbrock {
    fn dim(&self) -> usize {
        2
    }
    fn eval(&self, x: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let (a, b) = (1.0 - x[0], x[1] - x[0] * x[0]);
        if let Some(g) = grad {
            g[0] = -2.0 * a - 400.0 * x[0] * b;
            g[1] = 200.0 * b;
        }
        a * a + 100.0 * b * b
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scale_gauge_preserves_pixels(preset in 0usize..3, seed in any::<u64>(), s in 0.05f64..20.0) {
        let w = world(preset);
        let j = joints_in_limits(&w, seed);
        let a = predict_image(&w.true_model, &j).unwrap();
        let b = predict_image(&w.true_model.scaled(s), &j).unwrap();
        prop_assert!(max_pixel_gap(&a, &b) < 1e-9);
    }

    #[test]
    fn frame_gauge_preserves_pixels(preset in 0usize..3, seed in any::<u64>(), g in arb_pose()) {
        let w = world(preset);
        let j = joints_in_limits(&w, seed);
        let a = predict_image(&w.true_model, &j).unwrap();
        let b = predict_image(&w.true_model.reframed(&g), &j).unwrap();
        prop_assert!(max_pixel_gap(&a, &b) < 1e-9);
    }

    #[test]
    fn packed_length_matches_count(n in 1usize..10, m in 1usize..30, c in 1usize..5) {
        prop_assert_eq!(Layout::new(n, m, c).len(), parameter_count(n, m, c));
        prop_assert_eq!(parameter_count(n, m, c), 6 + 4 * n + 3 * m + 10 * c);
    }

    #[test]
    fn forward_kinematics_is_rigid(
        links in prop::collection::vec(prop::array::uniform4(-3.0f64..3.0), 1..9),
        base in arb_pose(),
        seed in any::<u64>(),
    ) {
        let mut rng = rng_from_seed(seed);
        let kin = KinematicParams { base, links: links.iter().map(|l| DhLink::new(l[0], l[1], l[2], l[3])).collect() };
        let j: Vec<f64> = links.iter().map(|_| rng.gen_range(-6.0..6.0)).collect();
        let pose = forward_kinematics(&kin, &j).unwrap();
        prop_assert!(pose.orthonormality_error() < 1e-9);
        prop_assert!((pose.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn minimizer_descends_and_repeats(x0 in prop::array::uniform2(-3.0f64..3.0)) {
        let opts = OptimizerOptions::default();
        let (xa, ra) = minimize(&Rosenbrock, &x0, &opts).unwrap();
        let (xb, rb) = minimize(&Rosenbrock, &x0, &opts).unwrap();
        prop_assert!(ra.final_objective <= ra.initial_objective);
        prop_assert!(ra.trace.windows(2).all(|w| w[1] <= w[0]));
        prop_assert_eq!(xa.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), xb.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(ra, rb);
    }

    #[test]
    fn collection_is_a_function_of_its_inputs(preset in 0usize..3, seed in any::<u64>(), t in 1usize..15) {
        let w = world(preset);
        let a = collect_random(&w, t, 0.1, &mut rng_from_seed(seed)).unwrap();
        let b = collect_random(&w, t, 0.1, &mut rng_from_seed(seed)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn dataset_file_round_trips(preset in 0usize..3, seed in any::<u64>(), t in 1usize..10, drop_joints in any::<bool>()) {
        let w = world(preset);
        let mut data = collect_random(&w, t, 0.1, &mut rng_from_seed(seed)).unwrap();
        if drop_joints {
            data = data.without_joints();
        }
        let mut buf = Vec::new();
        write_dataset(&data, &mut buf).unwrap();
        let back: Dataset = read_dataset(buf.as_slice()).unwrap();
        prop_assert_eq!(back, data);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn parallel_objective_matches_sequential(seed in any::<u64>()) {
        let w = world(0);
        let data = collect_random(&w, 30, 0.1, &mut rng_from_seed(seed)).unwrap();
        let p = FullProblem::new(w.true_model.clone(), data.joints().unwrap(), dataset_observations(&data));
        let n = w.true_model.parameter_count();
        let mut rng = rng_from_seed(seed ^ 1);
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.01..0.01)).collect();
        let seq = LeastSquares::new(&p, vec![0.0; n]).execution(Execution::Sequential);
        let par = LeastSquares::new(&p, vec![0.0; n]).execution(Execution::Parallel);
        let (mut gs, mut gp) = (vec![0.0; n], vec![0.0; n]);
        let fs = seq.eval(&y, Some(&mut gs));
        let fp = par.eval(&y, Some(&mut gp));
        prop_assert!((fs - fp).abs() <= 1e-12 * fs.abs().max(1.0));
        for (a, b) in gs.iter().zip(&gp) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn perturbations_touch_only_their_group(preset in 0usize..3, seed in any::<u64>(), delta in arb_pose()) {
        let w = world(preset);
        let layout = w.true_model.layout();
        let before = w.true_model.pack();
        let cases = [
            (Perturbation::MoveCamera { index: 0, delta }, ParamGroup::Extrinsics(0)),
            (Perturbation::JitterLinks { relative_sigma: 0.02, seed }, ParamGroup::Kinematics),
        ];
        for (p, group) in cases {
            let after = apply_perturbation(&w, &p).unwrap().true_model.pack();
            let touched = group.indices(&layout);
            for (i, (a, b)) in before.iter().zip(&after).enumerate() {
                if !touched.contains(&i) {
                    prop_assert_eq!(a.to_bits(), b.to_bits(), "index {} changed under {:?}", i, p);
                }
            }
        }
        let rows = vec![[0.01, 0.02, 0.03]; 2];
        let grown = apply_perturbation(&w, &Perturbation::AttachFeatures { rows: rows.clone() }).unwrap().true_model;
        prop_assert_eq!(&grown.kinematics, &w.true_model.kinematics);
        prop_assert_eq!(&grown.cameras, &w.true_model.cameras);
        prop_assert_eq!(&grown.features.coords[..w.true_model.m()], &w.true_model.features.coords[..]);
        prop_assert_eq!(&grown.features.coords[w.true_model.m()..], &rows[..]);
    }
}
