//! Multi-task 6-DoF gaze estimation on synthetic desk-scale data: box-only
//! normalization, PoGz geometry, lens-fixation calibration, a small two-branch
//! network trained from scratch, evaluation metrics and a CLI.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod camera;
pub mod cli;
pub mod dataset;
pub mod easy_norm;
pub mod frame;
pub mod metrics;
pub mod model;
pub mod pogz;
pub mod synth;
