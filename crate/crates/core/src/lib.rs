//! Batch pipeline toolkit for wind-turbine inspection imagery.
//!
//! The pipeline runs in four steps: multi-scale sliding-window tiling
//! augments the image set, a pluggable detector produces fault boxes, a
//! key-value mapping turns the detections into a deterministic text summary,
//! and a two-stage chat pipeline produces a structured diagnostic report.
//! An evaluation suite scores the whole chain (precision/recall/F1/accuracy,
//! per-class AP and mAP, fault-consistency and keyword-coverage scores) and
//! an ablation harness compares stage combinations.

pub mod config;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod kvmap;
pub mod llm;
pub mod metrics;
pub mod net;
pub mod tiler;

#[cfg(test)]
pub(crate) mod testserver;

pub use error::{Error, Result};
