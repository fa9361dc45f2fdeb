//! File formats: JSON-lines datasets, JSON model files with a report
//! sidecar, and CSV curves.
//!
//! Floats are written in shortest round-trip form, so reading a file back
//! reproduces every value bit for bit.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::learning::{LearnResult, StageReport};
use crate::model::ModelParams;

/// One detected coordinate in a dataset line.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub cam: usize,
    pub feat: usize,
    pub u: f64,
    pub v: f64,
}

/// One dataset line. `actions` is the displacement commanded after this
/// sample; `cameras`/`features` record the detection table's shape so that
/// trailing all-missing rows survive a round trip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub t: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joints: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actions: Option<Vec<f64>>,
    pub detections: Vec<DetectionRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cameras: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<usize>,
}

pub fn dataset_records(data: &Dataset) -> Vec<SampleRecord> {
    let (c, m) = (data.num_cameras(), data.num_features());
    data.samples
        .iter()
        .enumerate()
        .map(|(t, s)| {
            let mut detections = Vec::new();
            for (cam, row) in s.detections.iter().enumerate() {
                for (feat, p) in row.iter().enumerate() {
                    if let Some([u, v]) = p {
                        detections.push(DetectionRecord { cam, feat, u: *u, v: *v });
                    }
                }
            }
            SampleRecord {
                t,
                joints: s.joints.clone(),
                actions: data.actions.as_ref().and_then(|a| a.get(t).cloned()),
                detections,
                cameras: Some(c),
                features: Some(m),
            }
        })
        .collect()
}

pub fn dataset_from_records(mut records: Vec<SampleRecord>) -> Result<Dataset> {
    records.sort_by_key(|r| r.t);
    for (i, r) in records.iter().enumerate() {
        if r.t != i {
            return Err(Error::InvalidDataset(format!("timesteps must be 0..T without gaps, found {} at line {}", r.t, i + 1)));
        }
    }
    let shape = |r: &SampleRecord| {
        let c = r.detections.iter().map(|d| d.cam + 1).max().unwrap_or(0).max(r.cameras.unwrap_or(0));
        let m = r.detections.iter().map(|d| d.feat + 1).max().unwrap_or(0).max(r.features.unwrap_or(0));
        (c, m)
    };
    let (c, m) = records.iter().map(shape).fold((0, 0), |a, b| (a.0.max(b.0), a.1.max(b.1)));
    let with_actions = records.iter().filter(|r| r.actions.is_some()).count();
    let actions = if with_actions == 0 {
        None
    } else if with_actions + 1 == records.len() && records.last().is_some_and(|r| r.actions.is_none()) {
        Some(records.iter().filter_map(|r| r.actions.clone()).collect())
    } else {
        return Err(Error::InvalidDataset("actions must be present on every line but the last".into()));
    };
    let mut samples = Vec::with_capacity(records.len());
    for r in records {
        let mut detections = vec![vec![None; m]; c];
        for d in r.detections {
            let slot = &mut detections[d.cam][d.feat];
            if slot.is_some() {
                return Err(Error::InvalidDataset(format!("duplicate detection cam {} feat {} at t={}", d.cam, d.feat, r.t)));
            }
            *slot = Some([d.u, d.v]);
        }
        samples.push(Sample { joints: r.joints, detections });
    }
    let data = Dataset { samples, actions };
    data.validate()?;
    Ok(data)
}

pub fn write_dataset<W: Write>(data: &Dataset, mut out: W) -> Result<()> {
    for r in dataset_records(data) {
        serde_json::to_writer(&mut out, &r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset<R: Read>(input: R) -> Result<Dataset> {
    let mut records = Vec::new();
    for (i, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: SampleRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?;
        records.push(r);
    }
    if records.is_empty() {
        return Err(Error::InvalidDataset("dataset is empty".into()));
    }
    dataset_from_records(records)
}

pub fn save_dataset(data: &Dataset, path: &Path) -> Result<()> {
    write_dataset(data, BufWriter::new(create(path)?))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    read_dataset(open(path)?)
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_reader(BufReader::new(open(path)?)).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

pub fn save_model(model: &ModelParams, path: &Path) -> Result<()> {
    model.validate()?;
    save_json(model, path)
}

pub fn load_model(path: &Path) -> Result<ModelParams> {
    let model: ModelParams = load_json(path)?;
    model.validate()?;
    Ok(model)
}

/// Learning diagnostics stored next to a model file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnReport {
    #[serde(default)]
    pub variant: Option<String>,
    pub train_rms_px: f64,
    pub converged: bool,
    pub underdetermined: bool,
    pub stages: Vec<StageReport>,
    #[serde(default)]
    pub inferred_joints: Option<Vec<Vec<f64>>>,
}

impl LearnReport {
    pub fn from_result(r: &LearnResult, variant: Option<String>) -> Self {
        LearnReport {
            variant,
            train_rms_px: r.train_rms_px,
            converged: r.converged(),
            underdetermined: r.underdetermined,
            stages: r.reports.clone(),
            inferred_joints: r.inferred_joints.clone(),
        }
    }
}

/// `model.json` → `model.report.json`.
pub fn report_path(model_path: &Path) -> PathBuf {
    let stem = model_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    model_path.with_file_name(format!("{stem}.report.json"))
}

/// Writes a header line and rows as comma-separated values.
pub fn write_csv<W: Write>(mut out: W, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    writeln!(out, "{}", header.join(","))?;
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", cells.join(","))?;
    }
    out.flush()?;
    Ok(())
}
