//! PoGz: where the gaze line crosses the camera's XY-plane, and conversion
//! to and from the on-screen point of gaze through a camera-to-screen rigid
//! transform.

use std::marker::PhantomData;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::easy_norm::Rotation3;
pub use crate::frame::{Ccs, Frame, GazeVec, Point3, Scs};

/// Minimum |z| of the unit direction for a ray/plane intersection.
pub const EPS_RAY: f64 = 1e-9;

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum PogzError {
    #[error("gaze ray is parallel to the target plane (unit z = {0:e})")]
    ParallelRay(f64),
    #[error("gaze direction is zero or non-finite")]
    DegenerateDirection,
    #[error("rotation is not orthonormal (error {0:e})")]
    ImproperRotation(f64),
}

/// A point on a frame's z = 0 plane, in millimeters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanePoint<F: Frame> {
    pub x: f64,
    pub y: f64,
    _frame: PhantomData<F>,
}

impl<F: Frame> PlanePoint<F> {
    pub fn new(x: f64, y: f64) -> Self {
        Self {
            x,
            y,
            _frame: PhantomData,
        }
    }

    pub fn lift(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, 0.0)
    }

    pub fn to_array(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

/// Camera-to-screen transform: `p_s = R p_c + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Rotation3,
    pub translation: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
struct TransformJson {
    #[serde(rename = "R")]
    r: [f64; 9],
    t: [f64; 3],
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Rotation3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Rotation3, translation: Vector3<f64>) -> Result<Self, PogzError> {
        let err = rotation.orthonormality_error();
        if !(err <= 1e-9) {
            return Err(PogzError::ImproperRotation(err));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_json(s: &str) -> anyhow::Result<Self> {
        let raw: TransformJson = serde_json::from_str(s)?;
        Ok(Self::new(
            Rotation3::from_row_major(raw.r),
            Vector3::from(raw.t),
        )?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&TransformJson {
            r: self.rotation.to_row_major(),
            t: self.translation.into(),
        })
        .expect("transform serializes")
    }

    fn point_to_screen(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.apply(p) + self.translation
    }

    fn point_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose().apply(&(p - self.translation))
    }
}

/// Result of intersecting a gaze line with a frame's XY-plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineHit<F: Frame> {
    pub point: PlanePoint<F>,
    /// The gaze direction re-expressed in `F`.
    pub direction: GazeVec<F>,
    /// Line parameter of the hit, in units of `direction`.
    pub lambda: f64,
}

impl<F: Frame> LineHit<F> {
    /// The hit lies behind the line's reference point.
    pub fn behind_origin(&self) -> bool {
        self.lambda < 0.0
    }
}

fn intersect_xy(origin: &Vector3<f64>, dir: &Vector3<f64>) -> Result<(f64, f64, f64), PogzError> {
    let n = dir.norm();
    if !(n.is_finite() && n > 0.0) {
        return Err(PogzError::DegenerateDirection);
    }
    if (dir.z / n).abs() < EPS_RAY {
        return Err(PogzError::ParallelRay(dir.z / n));
    }
    let lambda = -origin.z / dir.z;
    Ok((origin.x + lambda * dir.x, origin.y + lambda * dir.y, lambda))
}

/// Intersection of the gaze ray with the oCCS XY-plane. Depends only on the
/// line, never on any screen geometry.
pub fn pogz_from_ray(origin: &Point3<Ccs>, g_o: &GazeVec<Ccs>) -> Result<PlanePoint<Ccs>, PogzError> {
    let (x, y, _) = intersect_xy(&origin.coords, &g_o.dir)?;
    Ok(PlanePoint::new(x, y))
}

/// PoGz to on-screen PoG. The direction is only rotated: translating a
/// direction vector has no geometric meaning.
pub fn pogz_to_pog(
    pogz: &PlanePoint<Ccs>,
    g_o: &GazeVec<Ccs>,
    cam_to_screen: &RigidTransform,
) -> Result<LineHit<Scs>, PogzError> {
    let o_s = cam_to_screen.point_to_screen(&pogz.lift());
    let g_s = cam_to_screen.rotation.apply(&g_o.dir);
    let (x, y, lambda) = intersect_xy(&o_s, &g_s)?;
    Ok(LineHit {
        point: PlanePoint::new(x, y),
        direction: GazeVec::from_vector(g_s),
        lambda,
    })
}

/// Inverse of [`pogz_to_pog`].
pub fn pog_to_pogz(
    pog: &PlanePoint<Scs>,
    g_s: &GazeVec<Scs>,
    cam_to_screen: &RigidTransform,
) -> Result<LineHit<Ccs>, PogzError> {
    let o_c = cam_to_screen.point_to_camera(&pog.lift());
    let g_c = cam_to_screen.rotation.transpose().apply(&g_s.dir);
    let (x, y, lambda) = intersect_xy(&o_c, &g_c)?;
    Ok(LineHit {
        point: PlanePoint::new(x, y),
        direction: GazeVec::from_vector(g_c),
        lambda,
    })
}
