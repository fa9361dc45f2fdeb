//! Calibration-free visual servoing with a learned generative model.
//!
//! The model maps joint angles to the pixel coordinates of features rigidly
//! attached to a robot's end-effector, through a Denavit–Hartenberg kinematic
//! chain, a rigid feature structure, and pinhole cameras. Its parameters are
//! learned from unlabeled (joints, detections) pairs and need not match the
//! real robot and cameras: any member of the gauge family that predicts the
//! same pixels serves equally well for servoing.

pub mod dataset;
pub mod error;
pub mod geometry;
pub mod inference;
pub mod io;
pub mod init;
pub mod learning;
pub mod model;
pub mod optim;
pub mod par;
pub mod scalar;
pub mod simulator;

pub use error::{Error, Result};
