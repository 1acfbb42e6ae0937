//! Yaw/pitch encoding of unit gaze directions.
//!
//! The camera looks along +z and a gaze toward the camera has negative z, so
//! `(0, 0)` means "looking straight at the camera":
//! `yaw = atan2(-g_x, -g_z)`, `pitch = asin(-g_y)`.

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::frame::{Frame, GazeVec};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EulerGaze {
    pub yaw: f64,
    pub pitch: f64,
}

impl EulerGaze {
    pub fn new(yaw: f64, pitch: f64) -> Self {
        Self { yaw, pitch }
    }

    pub fn to_array(&self) -> [f64; 2] {
        [self.yaw, self.pitch]
    }

    pub fn from_array(a: [f64; 2]) -> Self {
        Self::new(a[0], a[1])
    }
}

/// Poles (`|g_y| = 1`) have no defined yaw and are rejected.
pub fn euler_from_vec<F: Frame>(g: &GazeVec<F>) -> Result<EulerGaze, ModelError> {
    let u = g.normalized();
    if !(u.norm() > 0.0) || u.y().abs() >= 1.0 - 1e-15 {
        return Err(ModelError::Gimbal(u.y()));
    }
    Ok(EulerGaze::new((-u.x()).atan2(-u.z()), (-u.y()).asin()))
}

pub fn vec_from_euler<F: Frame>(e: EulerGaze) -> GazeVec<F> {
    let (sy, cy) = e.yaw.sin_cos();
    let (sp, cp) = e.pitch.sin_cos();
    GazeVec::new(-cp * sy, -sp, -cp * cy)
}
