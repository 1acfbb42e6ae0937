//! Desk-scale multi-task gaze network.
//!
//! Two encoder branches feed five affine decoder heads:
//!
//! ```text
//! gaze features ──GazeEnc──► d ─────────────────────────► g_n head
//!                            │
//!                            ├──────────┐
//! pose features ──PoseEnc──┐ │          ▼
//!                          ├─Fusion──► p ──[d, p]──► g_o, PoGz, r_on heads
//! box features  ──BoxEnc───┘            └──────────► face-depth head
//! ```
//!
//! The g_n head sees nothing but the directional embedding `d`, so its
//! output is bit-identical under any change to the positional inputs.

pub mod adam;
pub mod euler;
pub mod gradcheck;
pub mod loss;
pub mod network;
pub mod predict;
pub mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use euler::{euler_from_vec, vec_from_euler, EulerGaze};
pub use loss::{loss, LossBreakdown, Targets};
pub use network::{MageModel, ModelConfig};
pub use predict::{predict_6dof, Gaze6Dof, GazeModel};
pub use train::{fine_tune, train, EpochStats, TrainConfig, TrainSample};

use crate::frame::Ccs;
use crate::pogz::PlanePoint;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("gaze vector at a pole (unit y = {0}), yaw undefined")]
    Gimbal(f64),
    #[error("expected {expected} features, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("malformed parameter file: {0}")]
    Params(String),
}

/// The five supervised tasks, in head order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    GazeNormalized,
    GazeOriginal,
    Pogz,
    Rotation,
    FaceOrigin,
}

impl Task {
    pub const ALL: [Task; 5] = [
        Task::GazeNormalized,
        Task::GazeOriginal,
        Task::Pogz,
        Task::Rotation,
        Task::FaceOrigin,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::GazeNormalized => "g_n",
            Task::GazeOriginal => "g_o",
            Task::Pogz => "pogz",
            Task::Rotation => "r_on",
            Task::FaceOrigin => "face",
        }
    }

    pub fn from_name(s: &str) -> Option<Task> {
        Task::ALL.into_iter().find(|t| t.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub g_n: f64,
    pub g_o: f64,
    pub pogz: f64,
    pub r_on: f64,
    pub face: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            g_n: 1.0,
            g_o: 0.5,
            pogz: 0.1,
            r_on: 0.5,
            face: 0.1,
        }
    }
}

impl LossWeights {
    pub fn get(&self, t: Task) -> f64 {
        match t {
            Task::GazeNormalized => self.g_n,
            Task::GazeOriginal => self.g_o,
            Task::Pogz => self.pogz,
            Task::Rotation => self.r_on,
            Task::FaceOrigin => self.face,
        }
    }

    pub fn set(&mut self, t: Task, v: f64) {
        *match t {
            Task::GazeNormalized => &mut self.g_n,
            Task::GazeOriginal => &mut self.g_o,
            Task::Pogz => &mut self.pogz,
            Task::Rotation => &mut self.r_on,
            Task::FaceOrigin => &mut self.face,
        } = v;
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for t in Task::ALL {
            let w = self.get(t);
            if !(w.is_finite() && w >= 0.0) {
                return Err(ModelError::Config(format!("loss weight {} = {w}", t.name())));
            }
        }
        Ok(())
    }
}

/// Decoded head outputs for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultiTaskOutput {
    pub g_n: EulerGaze,
    pub g_o: EulerGaze,
    pub pogz: PlanePoint<Ccs>,
    pub r_on: [f64; 2],
    /// Always positive.
    pub face_depth: f64,
}
