//! Subcommands of the `genservo` binary, callable as functions.

pub mod experiments;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use genservo::inference::{InferOptions, ServoConfig};
use genservo::io::{
    load_dataset, load_model, report_path, save_dataset, save_json, save_model, write_csv, LearnReport,
};
use genservo::learning::{evaluate_rms, learn_full, learn_pipeline, LearnConfig, Variant};
use genservo::model::ParamGroup;
use genservo::simulator::{collect_random, make_world, rng_from_seed, WorldConfig, WorldTruth};
use genservo::Error;

use experiments::{
    adapt_experiment, bench_ops, learning_table, servo_csv_rows, servo_experiment, table_markdown, PerturbKind,
    TableSpec, ADAPT_CSV_HEADER, BENCH_OPS, STEP_SCALE,
};

/// Environment variable holding the default worker count.
pub const WORKERS_ENV: &str = "GENSERVO_WORKERS";

/// Failure of a command, with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidDataset(_)
            | Error::ConfigInvalid(_)
            | Error::Precondition(_)
            | Error::Io(_)
            | Error::Parse(_)
            | Error::IndexOutOfRange { .. }
            | Error::DimensionMismatch { .. }
            | Error::JointLimitViolation { .. } => EXIT_USAGE,
            _ => EXIT_NUMERIC,
        };
        CliError { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

fn usage(message: impl Into<String>) -> CliError {
    CliError { code: EXIT_USAGE, message: message.into() }
}

pub type CliResult<T = ()> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "genservo", version, about = "Learn a robot-camera model from random motion and servo with it")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Record a random-walk dataset in a simulated world.
    Collect(CollectArgs),
    /// Learn a model from a dataset.
    Learn(LearnArgs),
    /// Held-out pixel RMS of a model on a dataset.
    Eval(EvalArgs),
    /// Servo a simulated robot to random targets with a model.
    Servo(ServoArgs),
    /// Perturb a world and record how online updates recover.
    Adapt(AdaptArgs),
    /// Time the model queries.
    Bench(BenchArgs),
    /// Median held-out RMS over sizes, variants and seeds as a Markdown table.
    Table1(TableArgs),
}

#[derive(Args, Debug)]
pub struct WorldArgs {
    /// Preset name (ur5_sim, xarm_sim, baxter_like) or a TOML/JSON world file.
    #[arg(long, default_value = "ur5_sim")]
    pub world: String,
    /// Override the world's pixel noise (px).
    #[arg(long)]
    pub pixel_sigma: Option<f64>,
    /// Override the world's joint execution noise (rad).
    #[arg(long)]
    pub controller_sigma: Option<f64>,
}

impl WorldArgs {
    pub fn load(&self) -> CliResult<WorldTruth> {
        let mut cfg = WorldConfig::load(&self.world)?;
        if let Some(s) = self.pixel_sigma {
            cfg.noise.pixel_sigma = s;
        }
        if let Some(s) = self.controller_sigma {
            cfg.noise.controller_sigma = s;
        }
        Ok(make_world(&cfg)?)
    }
}

#[derive(Args, Debug)]
pub struct CollectArgs {
    #[command(flatten)]
    pub world: WorldArgs,
    #[arg(long)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Bound of each random joint step (rad).
    #[arg(long, default_value_t = STEP_SCALE)]
    pub step_scale: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct LearnArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// World whose uncalibrated hints (nominal DH table, intrinsics guess,
    /// home, limits) the learner may use. Its true parameters are not read.
    #[arg(long, default_value = "ur5_sim")]
    pub world: String,
    /// dvs, dvs-nofull or dvs-onlyfull.
    #[arg(long, default_value = "dvs")]
    pub variant: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Start from this model and run full-model learning only.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Comma-separated groups held fixed, e.g. `kinematics,extrinsics:0,feature:3`.
    #[arg(long, value_delimiter = ',')]
    pub frozen: Vec<String>,
    /// Treat joints as unobserved and infer them from the actions.
    #[arg(long)]
    pub unobserved_joints: bool,
    /// Weight of the action-consistency penalty in unobserved-joints mode.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Iteration budget of each optimization stage.
    #[arg(long)]
    pub max_iterations: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Args, Debug)]
pub struct ServoArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub world: WorldArgs,
    #[arg(long, default_value_t = 50)]
    pub targets: usize,
    #[arg(long, default_value_t = 0.7)]
    pub gain: f64,
    #[arg(long, default_value_t = 50)]
    pub max_steps: usize,
    #[arg(long, default_value_t = 0.2)]
    pub max_step_rad: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub stop_px: f64,
    /// Infer the current joints from the image instead of reading encoders.
    #[arg(long)]
    pub pure_image: bool,
    /// Distort every target by inconsistent per-feature offsets.
    #[arg(long)]
    pub unreachable: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AdaptArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub world: WorldArgs,
    /// none, move-camera[:index[:meters]], add-camera, attach-features[:k], jitter-links[:sigma].
    #[arg(long)]
    pub perturb: String,
    /// Groups refit after a change; defaults to the perturbed part.
    #[arg(long, value_delimiter = ',')]
    pub relearn: Vec<String>,
    #[arg(long, default_value_t = 25)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// World providing the home configuration the queries are sampled around.
    #[arg(long, default_value = "ur5_sim")]
    pub world: String,
    #[arg(long, value_delimiter = ',', default_values_t = BENCH_OPS.map(String::from))]
    pub ops: Vec<String>,
    #[arg(long, default_value_t = 1000)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct TableArgs {
    #[arg(long, value_delimiter = ',', default_values_t = ["ur5_sim".to_string(), "xarm_sim".to_string()])]
    pub worlds: Vec<String>,
    #[arg(long, value_delimiter = ',', default_values_t = [50usize, 75, 100])]
    pub sizes: Vec<usize>,
    /// Number of seeds, run as 0..seeds.
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    #[arg(long, value_delimiter = ',', default_values_t = ["dvs".to_string(), "dvs-nofull".to_string(), "dvs-onlyfull".to_string()])]
    pub variants: Vec<String>,
    #[arg(long, default_value_t = 0.5)]
    pub pixel_sigma: f64,
    /// Parallel runs; defaults to $GENSERVO_WORKERS, then the core count.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Markdown output; the per-run results go next to it as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_groups(items: &[String]) -> CliResult<Vec<ParamGroup>> {
    items.iter().filter(|s| !s.is_empty()).map(|s| s.parse::<ParamGroup>().map_err(CliError::from)).collect()
}

fn parse_variant(s: &str) -> CliResult<Variant> {
    s.parse::<Variant>().map_err(|e| usage(e.to_string()))
}

fn print_json<T: Serialize>(out: &mut impl Write, value: &T) -> CliResult {
    serde_json::to_writer(&mut *out, value).map_err(Error::from)?;
    writeln!(out)?;
    Ok(())
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| usage(format!("{}: {e}", path.display())))?))
}

pub fn run(cli: Cli, out: &mut impl Write) -> CliResult {
    match cli.command {
        Command::Collect(a) => cmd_collect(&a, out),
        Command::Learn(a) => cmd_learn(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Servo(a) => cmd_servo(&a, out),
        Command::Adapt(a) => cmd_adapt(&a, out),
        Command::Bench(a) => cmd_bench(&a, out),
        Command::Table1(a) => cmd_table1(&a, out),
    }
}

pub fn cmd_collect(a: &CollectArgs, out: &mut impl Write) -> CliResult {
    if a.samples == 0 {
        return Err(usage("--samples must be at least 1"));
    }
    if !(a.step_scale >= 0.0) {
        return Err(usage("--step-scale must be non-negative"));
    }
    let world = a.world.load()?;
    let data = collect_random(&world, a.samples, a.step_scale, &mut rng_from_seed(a.seed))?;
    save_dataset(&data, &a.out)?;
    print_json(out, &json!({ "samples": data.len(), "out": a.out }))
}

pub fn cmd_learn(a: &LearnArgs, out: &mut impl Write) -> CliResult {
    let variant = parse_variant(&a.variant)?;
    let frozen = parse_groups(&a.frozen)?;
    let hints = make_world(&WorldConfig::load(&a.world)?)?.hints();
    let mut data = load_dataset(&a.data)?;
    let mut cfg = LearnConfig { frozen, lambda: a.lambda, unobserved_joints: a.unobserved_joints, seed: a.seed, ..LearnConfig::for_variant(variant) };
    if let Some(n) = a.max_iterations {
        for o in [&mut cfg.structure_options, &mut cfg.kinematic_options, &mut cfg.full_options] {
            o.max_iterations = n;
        }
    }
    cfg.validate()?;
    if a.unobserved_joints {
        if data.actions.is_none() {
            return Err(usage("--unobserved-joints needs a dataset with actions"));
        }
        data = data.without_joints();
    }
    let result = match &a.init {
        Some(path) => {
            if a.unobserved_joints {
                return Err(usage("--init cannot be combined with --unobserved-joints"));
            }
            let init = load_model(path)?;
            data.normalize_shape(init.c(), init.m());
            learn_full(&data, &init, &cfg)?
        }
        None => learn_pipeline(&data, &hints, &cfg)?,
    };
    save_model(&result.model, &a.out)?;
    save_json(&LearnReport::from_result(&result, Some(variant.to_string())), &report_path(&a.out))?;
    for r in &result.reports {
        print_json(
            out,
            &json!({
                "stage": r.stage,
                "initial_objective": r.report.initial_objective,
                "final_objective": r.report.final_objective,
                "iterations": r.report.iterations,
                "converged": r.report.converged,
            }),
        )?;
    }
    print_json(out, &json!({ "train_rms_px": result.train_rms_px, "underdetermined": result.underdetermined, "out": a.out }))
}

pub fn cmd_eval(a: &EvalArgs, out: &mut impl Write) -> CliResult {
    let model = load_model(&a.model)?;
    let data = load_dataset(&a.data)?;
    let rms = evaluate_rms(&model, &data)?;
    let detections: usize = data.samples.iter().map(|s| s.detected_count()).sum();
    print_json(out, &json!({ "rms_px": rms, "samples": data.len(), "detections": detections }))
}

pub fn cmd_servo(a: &ServoArgs, out: &mut impl Write) -> CliResult {
    if a.targets == 0 {
        return Err(usage("--targets must be at least 1"));
    }
    let model = load_model(&a.model)?;
    let world = a.world.load()?;
    if model.n() != world.n() {
        return Err(usage(format!("model has {} joints, world has {}", model.n(), world.n())));
    }
    let cfg = ServoConfig {
        gain: a.gain,
        max_step: a.max_step_rad,
        max_steps: a.max_steps,
        stop_px: a.stop_px,
        use_encoders: !a.pure_image,
        infer: InferOptions { seed: a.seed, ..InferOptions::default() }.with_limits(world.joint_limits.clone()),
        ..ServoConfig::default()
    };
    cfg.validate()?;
    let run = servo_experiment(&model, &world, a.targets, &cfg, a.seed, a.unreachable)?;
    if let Some(path) = &a.out {
        let n = model.n();
        let mut header = vec!["target".to_string(), "step".to_string(), "rms_px".to_string()];
        header.extend((0..n).map(|i| format!("dj{i}")));
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        write_csv(create(path)?, &header, &servo_csv_rows(&run.traces))?;
    }
    print_json(out, &run.summary)
}

pub fn cmd_adapt(a: &AdaptArgs, out: &mut impl Write) -> CliResult {
    let kind: PerturbKind = a.perturb.parse()?;
    let relearn = parse_groups(&a.relearn)?;
    let model = load_model(&a.model)?;
    let world = a.world.load()?;
    if model.n() != world.n() {
        return Err(usage(format!("model has {} joints, world has {}", model.n(), world.n())));
    }
    let curve = adapt_experiment(
        &model,
        &world,
        &kind,
        (!relearn.is_empty()).then_some(relearn.as_slice()),
        a.samples,
        a.seed,
    )?;
    if let Some(path) = &a.out {
        write_csv(create(path)?, &ADAPT_CSV_HEADER, &curve.csv_rows())?;
    }
    let last = curve.rows.last().map(|r| r.held_out_rms_px);
    print_json(
        out,
        &json!({
            "perturbation": curve.perturbation,
            "relearn": curve.relearn,
            "baseline_rms_px": curve.baseline_rms_px,
            "threshold_px": curve.threshold_px,
            "changes": curve.changes(),
            "final_rms_px": last,
        }),
    )
}

pub fn cmd_bench(a: &BenchArgs, out: &mut impl Write) -> CliResult {
    let model = load_model(&a.model)?;
    let world = make_world(&WorldConfig::load(&a.world)?)?;
    if model.n() != world.n() {
        return Err(usage(format!("model has {} joints, world has {}", model.n(), world.n())));
    }
    let timings = bench_ops(&model, &world.home, &a.ops, a.reps, a.seed)?;
    print_json(out, &timings)
}

/// Worker count from the flag, then [`WORKERS_ENV`], then the core count.
pub fn worker_count(flag: Option<usize>) -> CliResult<usize> {
    if let Some(n) = flag {
        return if n == 0 { Err(usage("--workers must be positive")) } else { Ok(n) };
    }
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(usage(format!("{WORKERS_ENV} must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

pub fn cmd_table1(a: &TableArgs, out: &mut impl Write) -> CliResult {
    let variants = a.variants.iter().map(|v| parse_variant(v)).collect::<CliResult<Vec<_>>>()?;
    let spec = TableSpec {
        worlds: a.worlds.clone(),
        sizes: a.sizes.clone(),
        seeds: (0..a.seeds).collect(),
        variants,
        pixel_sigma: a.pixel_sigma,
        workers: worker_count(a.workers)?,
    };
    let results = learning_table(&spec)?;
    let table = table_markdown(&results);
    if let Some(path) = &a.out {
        create(path)?.write_all(table.as_bytes())?;
        save_json(&results, &path.with_extension("runs.json"))?;
    }
    write!(out, "{table}")?;
    Ok(())
}
