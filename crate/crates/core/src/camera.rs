//! Pinhole camera model: intrinsics standardization, pixel/metric conversion
//! and face-center back-projection.
//!
//! Image quantities are in pixels, metric quantities in millimeters. The
//! pixel pitch `k` is the only bridge between the two.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::frame::{Ccs, Point3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CameraError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid bounding box: side must be positive, got {0}")]
    InvalidBox(f64),
    #[error("depth must be positive, got {0} mm")]
    NonPositiveDepth(f64),
    #[error("point is behind the camera (z = {0} mm)")]
    BehindCamera(f64),
}

/// Pinhole intrinsics with square pixels and no skew.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub focal_px: f64,
    pub cx: f64,
    pub cy: f64,
    /// Millimeters per pixel.
    #[serde(rename = "k_mm_per_px")]
    pub pixel_pitch_mm: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(
        focal_px: f64,
        principal: (f64, f64),
        pixel_pitch_mm: f64,
        image_size: (u32, u32),
    ) -> Result<Self, CameraError> {
        let intr = Self {
            focal_px,
            cx: principal.0,
            cy: principal.1,
            pixel_pitch_mm,
            width: image_size.0,
            height: image_size.1,
        };
        intr.validate()?;
        Ok(intr)
    }

    /// The standardized camera used throughout the pipeline: 640x480, 600 px
    /// focal length, principal point on the image center.
    pub fn standard() -> Self {
        Self {
            focal_px: 600.0,
            cx: 320.0,
            cy: 240.0,
            pixel_pitch_mm: 0.003,
            width: 640,
            height: 480,
        }
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        let bad = |msg: String| Err(CameraError::InvalidIntrinsics(msg));
        if !(self.focal_px.is_finite() && self.focal_px > 0.0) {
            return bad(format!("focal length {} px", self.focal_px));
        }
        if !(self.pixel_pitch_mm.is_finite() && self.pixel_pitch_mm > 0.0) {
            return bad(format!("pixel pitch {} mm/px", self.pixel_pitch_mm));
        }
        if self.width == 0 || self.height == 0 {
            return bad(format!("image size {}x{}", self.width, self.height));
        }
        let (w, h) = (self.width as f64, self.height as f64);
        if !(0.0..=w).contains(&self.cx) || !(0.0..=h).contains(&self.cy) {
            return bad(format!(
                "principal point ({}, {}) outside {}x{}",
                self.cx, self.cy, self.width, self.height
            ));
        }
        Ok(())
    }

    pub fn principal(&self) -> Pixel {
        Pixel::new(self.cx, self.cy)
    }

    pub fn focal_mm(&self) -> f64 {
        self.focal_px * self.pixel_pitch_mm
    }

    pub fn contains(&self, px: Pixel) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x <= self.width as f64 && px.y <= self.height as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pixel {
    pub x: f64,
    pub y: f64,
}

impl Pixel {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Square facial bounding box. `center` doubles as the face-center projection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub center: Pixel,
    pub side: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, side: f64) -> Result<Self, CameraError> {
        if !(side.is_finite() && side > 0.0) {
            return Err(CameraError::InvalidBox(side));
        }
        Ok(Self {
            center: Pixel::new(x, y),
            side,
        })
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.center.x, self.center.y, self.side]
    }

    pub fn from_array(a: [f64; 3]) -> Result<Self, CameraError> {
        Self::new(a[0], a[1], a[2])
    }

    /// True when the whole box lies within the image.
    pub fn inside(&self, intr: &CameraIntrinsics) -> bool {
        let h = self.side / 2.0;
        self.center.x - h >= 0.0
            && self.center.y - h >= 0.0
            && self.center.x + h <= intr.width as f64
            && self.center.y + h <= intr.height as f64
    }
}

/// Map a box from the original image onto the standardized image.
///
/// The metric scene (and therefore any metric gaze vector) is untouched; only
/// image-space quantities are rescaled about the principal point. Calling it
/// with the arguments swapped is the exact inverse.
pub fn standardize(
    orig: &CameraIntrinsics,
    std: &CameraIntrinsics,
    bbox: &BoundingBox,
) -> Result<BoundingBox, CameraError> {
    orig.validate()?;
    std.validate()?;
    if !(bbox.side.is_finite() && bbox.side > 0.0) {
        return Err(CameraError::InvalidIntrinsics(format!(
            "box side {} px",
            bbox.side
        )));
    }
    let scale = std.focal_px / orig.focal_px;
    Ok(BoundingBox {
        center: Pixel::new(
            (bbox.center.x - orig.cx) * scale + std.cx,
            (bbox.center.y - orig.cy) * scale + std.cy,
        ),
        side: bbox.side * scale,
    })
}

/// Lift a pixel to the oCCS point at the given depth.
pub fn backproject(
    intr: &CameraIntrinsics,
    pixel: Pixel,
    depth_mm: f64,
) -> Result<Point3<Ccs>, CameraError> {
    if !(depth_mm > 0.0) {
        return Err(CameraError::NonPositiveDepth(depth_mm));
    }
    Ok(Point3::new(
        (pixel.x - intr.cx) * depth_mm / intr.focal_px,
        (pixel.y - intr.cy) * depth_mm / intr.focal_px,
        depth_mm,
    ))
}

pub fn project(intr: &CameraIntrinsics, p: &Point3<Ccs>) -> Result<Pixel, CameraError> {
    if !(p.z() > 0.0) {
        return Err(CameraError::BehindCamera(p.z()));
    }
    Ok(Pixel::new(
        intr.focal_px * p.x() / p.z() + intr.cx,
        intr.focal_px * p.y() / p.z() + intr.cy,
    ))
}
