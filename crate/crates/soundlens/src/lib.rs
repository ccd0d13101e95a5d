//! Self-supervised "hearing" object detector: a small detection stack that
//! learns to localize moving objects from multichannel audio alone, by
//! distilling boxes and attention maps from visual teachers.
//!
//! The crate is organized bottom-up:
//! - [`tensor`] / [`graph`] / [`fd`]: dense `f64` tensors, static autodiff
//!   graphs over a fixed primitive set, and finite-difference oracles;
//! - [`boxes`]: axis-aligned boxes, IoU, NMS, anchors, target assignment;
//! - [`attention`]: activation-derived attention maps and teacher products;
//! - [`losses`]: focal, temperature-softened KL alignment, and the combined
//!   training objective, all expressed as graph fragments;
//! - [`audio`]: WAV handling, log-mel spectrograms, channel stacking;
//! - [`student`]: the audio student network and its pretext variant;
//! - [`tracker`]: IoU tracking over per-frame detections;
//! - [`metrics`]: AP/mAP, center distances, and CLEAR-MOT;
//! - [`synth`]: the procedural street-corner world and its teacher oracles;
//! - [`train`] / [`config`]: optimization loop, schedules, and run configs.

// `!(x > 0.0)` style guards are deliberate: unlike `x <= 0.0` they also
// reject NaN, which is exactly what the validators want.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod audio;
pub mod boxes;
pub mod config;
pub mod container;
pub mod error;
pub mod fd;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod student;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod tracker;

pub use error::{Error, Result};
pub use tensor::Tensor;
