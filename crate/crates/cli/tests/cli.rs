//! The `genservo` binary: determinism, exit codes and file formats.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

use genservo::io::{load_dataset, load_model, read_dataset, save_dataset, save_model, write_dataset};
use genservo::simulator::{make_world, WorldConfig};

fn genservo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_genservo")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = genservo(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    genservo(args).status.code().expect("exit code")
}

fn last_json(stdout: &str) -> Value {
    serde_json::from_str(stdout.lines().last().expect("output")).unwrap()
}

fn path(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// The world's true model, saved as a model file.
fn truth_model(dir: &TempDir, world: &str) -> PathBuf {
    let p = path(dir, &format!("{world}.truth.json"));
    save_model(&make_world(&WorldConfig::preset(world).unwrap()).unwrap().true_model, &p).unwrap();
    p
}

#[test]
fn collect_is_byte_deterministic() {
    let dir = TempDir::new().unwrap();
    let (a, b, c) = (path(&dir, "a.jsonl"), path(&dir, "b.jsonl"), path(&dir, "c.jsonl"));
    ok(&["collect", "--world", "xarm_sim", "--samples", "20", "--seed", "7", "--out", s(&a)]);
    ok(&["collect", "--world", "xarm_sim", "--samples", "20", "--seed", "7", "--out", s(&b)]);
    ok(&["collect", "--world", "xarm_sim", "--samples", "20", "--seed", "8", "--out", s(&c)]);
    let (a, b, c) = (std::fs::read(a).unwrap(), std::fs::read(b).unwrap(), std::fs::read(c).unwrap());
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn dataset_files_round_trip() {
    let dir = TempDir::new().unwrap();
    let file = path(&dir, "d.jsonl");
    ok(&["collect", "--samples", "15", "--seed", "3", "--out", s(&file)]);
    let data = load_dataset(&file).unwrap();
    assert_eq!(data.len(), 15);
    let again = path(&dir, "again.jsonl");
    save_dataset(&data, &again).unwrap();
    assert_eq!(std::fs::read(&file).unwrap(), std::fs::read(&again).unwrap());
    assert_eq!(load_dataset(&again).unwrap(), data);
}

#[test]
fn usage_and_config_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let out = path(&dir, "x.jsonl");
    assert_eq!(code(&["collect", "--samples", "0", "--out", s(&out)]), 2);
    assert_eq!(code(&["collect", "--world", "no_such_arm", "--samples", "3", "--out", s(&out)]), 2);
    assert_eq!(code(&["collect", "--samples", "3", "--pixel-sigma", "-1", "--out", s(&out)]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
    assert_eq!(code(&["learn", "--data", s(&path(&dir, "missing.jsonl")), "--out", s(&out)]), 2);
    ok(&["collect", "--samples", "3", "--out", s(&out)]);
    assert_eq!(code(&["learn", "--data", s(&out), "--variant", "bogus", "--out", s(&path(&dir, "m.json"))]), 2);
    let garbage = path(&dir, "garbage.jsonl");
    std::fs::write(&garbage, "{\"t\": 0, \"detections\": [\n").unwrap();
    assert_eq!(code(&["learn", "--data", s(&garbage), "--out", s(&path(&dir, "m.json"))]), 2);
    let model = truth_model(&dir, "ur5_sim");
    assert_eq!(code(&["servo", "--model", s(&model), "--world", "baxter_like", "--targets", "1"]), 2);
    assert_eq!(code(&["servo", "--model", s(&model), "--gain", "1.5", "--targets", "1"]), 2);
    assert_eq!(code(&["adapt", "--model", s(&model), "--perturb", "melt"]), 2);
    assert_eq!(code(&["bench", "--model", s(&model), "--ops", "teleport"]), 2);
    assert_eq!(code(&["table1", "--sizes", "20", "--seeds", "1", "--workers", "0"]), 2);
}

#[test]
fn unlearnable_data_exits_3() {
    let dir = TempDir::new().unwrap();
    let file = path(&dir, "d.jsonl");
    ok(&["collect", "--samples", "5", "--seed", "1", "--out", s(&file)]);
    let mut data = load_dataset(&file).unwrap();
    for sample in &mut data.samples {
        let mut kept = 0;
        for (cam, row) in sample.detections.iter_mut().enumerate() {
            for d in row.iter_mut() {
                if cam > 0 || kept == 3 {
                    *d = None;
                } else if d.is_some() {
                    kept += 1;
                }
            }
        }
    }
    let mut buf = Vec::new();
    write_dataset(&data, &mut buf).unwrap();
    assert_eq!(read_dataset(buf.as_slice()).unwrap(), data);
    std::fs::write(&file, buf).unwrap();
    assert_eq!(code(&["learn", "--data", s(&file), "--out", s(&path(&dir, "m.json"))]), 3);
}

#[test]
fn learn_then_evaluate() {
    let dir = TempDir::new().unwrap();
    let (train, test, model) = (path(&dir, "train.jsonl"), path(&dir, "test.jsonl"), path(&dir, "model.json"));
    ok(&["collect", "--pixel-sigma", "0", "--samples", "40", "--seed", "1", "--out", s(&train)]);
    ok(&["collect", "--pixel-sigma", "0", "--samples", "30", "--seed", "2", "--out", s(&test)]);
    let log = ok(&["learn", "--data", s(&train), "--out", s(&model), "--seed", "1"]);
    let stages: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    for stage in &stages[..stages.len() - 1] {
        assert!(stage["final_objective"].as_f64().unwrap() <= stage["initial_objective"].as_f64().unwrap());
    }
    let learned = load_model(&model).unwrap();
    assert_eq!(learned.parameter_count(), 6 + 4 * 6 + 3 * 12 + 10 * 2);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(path(&dir, "model.report.json")).unwrap()).unwrap();
    assert_eq!(report["variant"], "dvs");
    let eval = last_json(&ok(&["eval", "--model", s(&model), "--data", s(&test)]));
    assert!(eval["rms_px"].as_f64().unwrap() < 1e-3, "{eval}");
    assert_eq!(eval["samples"], 30);

    let copy = path(&dir, "copy.json");
    save_model(&learned, &copy).unwrap();
    assert_eq!(load_model(&copy).unwrap(), learned);

    // refining from the learned model with kinematics frozen leaves them alone
    let refit = path(&dir, "refit.json");
    ok(&["learn", "--data", s(&test), "--init", s(&model), "--frozen", "kinematics", "--out", s(&refit)]);
    assert_eq!(load_model(&refit).unwrap().kinematics, learned.kinematics);
}

#[test]
fn servo_summary_and_trace() {
    let dir = TempDir::new().unwrap();
    let model = truth_model(&dir, "ur5_sim");
    let csv = path(&dir, "servo.csv");
    let args = ["servo", "--model", s(&model), "--pixel-sigma", "0", "--targets", "3", "--seed", "4", "--out", s(&csv)];
    let summary = last_json(&ok(&args));
    assert_eq!(summary["targets"], 3);
    assert!(summary["mean_final_px"].as_f64().unwrap() < 1e-3, "{summary}");
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "target,step,rms_px,dj0,dj1,dj2,dj3,dj4,dj5");
    assert!(lines.all(|l| l.split(',').count() == 9));
    assert_eq!(ok(&args), ok(&args));
}

#[test]
fn adaptation_curve() {
    let dir = TempDir::new().unwrap();
    let model = truth_model(&dir, "ur5_sim");
    let csv = path(&dir, "adapt.csv");
    let args = ["adapt", "--model", s(&model), "--perturb", "move-camera:0:0.05", "--samples", "4", "--out", s(&csv)];
    let summary = last_json(&ok(&args));
    assert_eq!(summary["relearn"], serde_json::json!(["extrinsics:0"]));
    assert!(summary["changes"].as_u64().unwrap() >= 1);
    assert!(summary["final_rms_px"].as_f64().unwrap() < 2.0, "{summary}");
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("samples_seen,held_out_rms_px,sample_rms_px,changed,updated\n"));
    assert_eq!(text.lines().count(), 5);
}

#[test]
fn bench_reports_every_operation() {
    let dir = TempDir::new().unwrap();
    let model = truth_model(&dir, "xarm_sim");
    let timings = last_json(&ok(&["bench", "--model", s(&model), "--world", "xarm_sim", "--reps", "5"]));
    for op in ["fk", "forward", "gradient", "infer-pose", "infer-joints", "ik"] {
        assert_eq!(timings[op]["reps"], 5, "{op}");
        assert!(timings[op]["per_second"].as_f64().unwrap() > 0.0, "{op}");
    }
}

#[test]
fn table_is_independent_of_worker_count() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (path(&dir, "a.md"), path(&dir, "b.md"));
    let base = ["table1", "--worlds", "ur5_sim", "--sizes", "20", "--seeds", "2", "--variants", "dvs"];
    let mut one = base.to_vec();
    one.extend(["--workers", "1", "--out", s(&a)]);
    ok(&one);
    // worker count from the environment this time
    let out = Command::new(env!("CARGO_BIN_EXE_genservo"))
        .args(base)
        .args(["--out", s(&b)])
        .env("GENSERVO_WORKERS", "2")
        .output()
        .unwrap();
    assert!(out.status.success());
    let (ta, tb) = (std::fs::read_to_string(&a).unwrap(), std::fs::read_to_string(&b).unwrap());
    assert_eq!(ta, tb);
    assert!(ta.contains("| ur5_sim | dvs |"));
    let runs: Value = serde_json::from_str(&std::fs::read_to_string(path(&dir, "a.runs.json")).unwrap()).unwrap();
    assert_eq!(runs.as_array().unwrap().len(), 2);
}
