//! Recorded robot runs: joint readings, commanded actions and feature
//! detections.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Detections of one timestep, indexed `[camera][feature]`.
pub type Detections = Vec<Vec<Option<[f64; 2]>>>;

/// One timestep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub joints: Option<Vec<f64>>,
    pub detections: Detections,
}

impl Sample {
    pub fn detected_count(&self) -> usize {
        self.detections.iter().flatten().filter(|d| d.is_some()).count()
    }
}

/// A run of `T` samples plus, optionally, the `T − 1` joint displacements
/// commanded between consecutive samples.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// `None` rather than empty when `T = 1`.
    pub actions: Option<Vec<Vec<f64>>>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Dataset { samples, actions: None }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_cameras(&self) -> usize {
        self.samples.iter().map(|s| s.detections.len()).max().unwrap_or(0)
    }

    pub fn num_features(&self) -> usize {
        self.samples
            .iter()
            .flat_map(|s| s.detections.iter().map(|c| c.len()))
            .max()
            .unwrap_or(0)
    }

    pub fn num_joints(&self) -> Option<usize> {
        self.samples
            .iter()
            .find_map(|s| s.joints.as_ref().map(|j| j.len()))
            .or_else(|| self.actions.as_ref().and_then(|a| a.first().map(|v| v.len())))
    }

    pub fn has_joints(&self) -> bool {
        !self.samples.is_empty() && self.samples.iter().all(|s| s.joints.is_some())
    }

    /// Joint vectors of every sample; fails if any is missing.
    pub fn joints(&self) -> Result<Vec<Vec<f64>>> {
        self.samples
            .iter()
            .enumerate()
            .map(|(t, s)| {
                s.joints
                    .clone()
                    .ok_or_else(|| Error::InvalidDataset(format!("sample {t} has no joint reading")))
            })
            .collect()
    }

    /// Pads every sample's detection table to `c × m`.
    pub fn normalize_shape(&mut self, c: usize, m: usize) {
        for s in self.samples.iter_mut() {
            s.detections.resize(c.max(s.detections.len()), Vec::new());
            for cam in s.detections.iter_mut() {
                cam.resize(m.max(cam.len()), None);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::InvalidDataset("dataset is empty".into()));
        }
        for (t, s) in self.samples.iter().enumerate() {
            for d in s.detections.iter().flatten().flatten() {
                if !(d[0].is_finite() && d[1].is_finite()) {
                    return Err(Error::InvalidDataset(format!("non-finite detection at sample {t}")));
                }
            }
            if let Some(j) = &s.joints {
                if j.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidDataset(format!("non-finite joints at sample {t}")));
                }
            }
        }
        if !self.has_joints() && self.samples.len() > 1 {
            match &self.actions {
                Some(a) if a.len() + 1 == self.samples.len() => {}
                _ => {
                    return Err(Error::InvalidDataset(
                        "samples without joints need T − 1 actions".into(),
                    ))
                }
            }
        }
        if let Some(a) = &self.actions {
            if a.len() + 1 != self.samples.len() {
                return Err(Error::InvalidDataset(format!(
                    "expected {} actions, got {}",
                    self.samples.len() - 1,
                    a.len()
                )));
            }
        }
        Ok(())
    }

    /// Samples `range`, keeping the matching actions.
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        let end = end.min(self.samples.len());
        let start = start.min(end);
        Dataset {
            samples: self.samples[start..end].to_vec(),
            actions: self
                .actions
                .as_ref()
                .filter(|_| end - start > 1)
                .map(|a| a[start..end - 1].to_vec()),
        }
    }

    /// Copy without joint readings (actions kept).
    pub fn without_joints(&self) -> Dataset {
        Dataset {
            samples: self
                .samples
                .iter()
                .map(|s| Sample { joints: None, detections: s.detections.clone() })
                .collect(),
            actions: self.actions.clone(),
        }
    }
}
