//! Calibrated mixtures of object detectors.
//!
//! The crate calibrates each detector's confidence against the IoU of its
//! best-matching object, fuses several calibrated detectors with Soft NMS and
//! Score Voting, and evaluates the result with COCO-style AP/AR and
//! localisation-aware calibration errors.

pub mod calib;
pub mod detections;
pub mod error;
pub mod fuse;
pub mod geometry;
pub mod matching;
pub mod metrics;
pub mod oracle;

pub use error::{Error, Result};
