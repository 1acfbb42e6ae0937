//! 6-DoF gaze assembly from the decoded heads.

use super::network::MageModel;
use super::{vec_from_euler, ModelError, MultiTaskOutput};
use crate::camera::{self, BoundingBox, CameraIntrinsics};
use crate::frame::{Ccs, GazeVec, Point3};
use crate::pogz::{self, PlanePoint, PogzError};

pub trait GazeModel {
    fn forward(&self, features: &[f64]) -> Result<MultiTaskOutput, ModelError>;
}

impl GazeModel for MageModel {
    fn forward(&self, features: &[f64]) -> Result<MultiTaskOutput, ModelError> {
        MageModel::forward(self, features)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaze6Dof {
    pub origin: Point3<Ccs>,
    pub direction: GazeVec<Ccs>,
    /// What the PoGz head emitted.
    pub pogz_head: PlanePoint<Ccs>,
    /// Intersection of the assembled line with the XY-plane; `Err` when the
    /// line runs parallel to it.
    pub pogz_geometric: Result<PlanePoint<Ccs>, PogzError>,
}

impl Gaze6Dof {
    /// Distance between the head PoGz and the geometric one, if both exist.
    pub fn pogz_gap(&self) -> Option<f64> {
        let g = self.pogz_geometric.as_ref().ok()?;
        Some((g.x - self.pogz_head.x).hypot(g.y - self.pogz_head.y))
    }
}

pub fn assemble(out: &MultiTaskOutput, bbox: &BoundingBox, intr: &CameraIntrinsics) -> Gaze6Dof {
    let origin =
        camera::backproject(intr, bbox.center, out.face_depth).expect("depth head output is positive");
    let direction = vec_from_euler::<Ccs>(out.g_o);
    Gaze6Dof {
        origin,
        direction,
        pogz_head: out.pogz,
        pogz_geometric: pogz::pogz_from_ray(&origin, &direction),
    }
}

pub fn predict_6dof<M: GazeModel + ?Sized>(
    model: &M,
    features: &[f64],
    bbox: &BoundingBox,
    intr: &CameraIntrinsics,
) -> Result<(MultiTaskOutput, Gaze6Dof), ModelError> {
    let out = model.forward(features)?;
    Ok((out, assemble(&out, bbox, intr)))
}
