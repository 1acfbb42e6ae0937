//! Coordinate-system tags.
//!
//! Points and directions carry their frame in the type so that, for
//! example, a screen-space point cannot be fed to an operation that expects
//! camera coordinates. [`FrameKind`] is the runtime mirror used where two
//! differently-tagged values may legitimately meet (metrics).

use std::fmt::Debug;
use std::marker::PhantomData;

use nalgebra::Vector3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FrameKind {
    /// Original camera coordinate system.
    Ccs,
    /// Normalized camera coordinate system (z-axis through the face center).
    Ncs,
    /// Screen coordinate system.
    Scs,
}

pub trait Frame: Copy + Debug + Default + PartialEq + 'static {
    const KIND: FrameKind;
}

/// Original camera frame (oCCS).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Ccs;
/// Normalized camera frame (nCCS).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Ncs;
/// Screen frame (SCS).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Scs;

impl Frame for Ccs {
    const KIND: FrameKind = FrameKind::Ccs;
}
impl Frame for Ncs {
    const KIND: FrameKind = FrameKind::Ncs;
}
impl Frame for Scs {
    const KIND: FrameKind = FrameKind::Scs;
}

/// A 3D point in millimeters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point3<F: Frame> {
    pub coords: Vector3<f64>,
    _frame: PhantomData<F>,
}

impl<F: Frame> Point3<F> {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self::from_vector(Vector3::new(x, y, z))
    }

    pub fn from_vector(coords: Vector3<f64>) -> Self {
        Self {
            coords,
            _frame: PhantomData,
        }
    }

    pub fn x(&self) -> f64 {
        self.coords.x
    }
    pub fn y(&self) -> f64 {
        self.coords.y
    }
    pub fn z(&self) -> f64 {
        self.coords.z
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.coords.x, self.coords.y, self.coords.z]
    }
}

/// A gaze direction. Not necessarily unit length; see [`GazeVec::normalized`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GazeVec<F: Frame> {
    pub dir: Vector3<f64>,
    _frame: PhantomData<F>,
}

impl<F: Frame> GazeVec<F> {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self::from_vector(Vector3::new(x, y, z))
    }

    pub fn from_vector(dir: Vector3<f64>) -> Self {
        Self {
            dir,
            _frame: PhantomData,
        }
    }

    pub fn x(&self) -> f64 {
        self.dir.x
    }
    pub fn y(&self) -> f64 {
        self.dir.y
    }
    pub fn z(&self) -> f64 {
        self.dir.z
    }

    pub fn norm(&self) -> f64 {
        self.dir.norm()
    }

    /// Unit-length copy. A zero vector stays zero.
    pub fn normalized(&self) -> Self {
        let n = self.dir.norm();
        if n == 0.0 {
            *self
        } else {
            Self::from_vector(self.dir / n)
        }
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.dir.x, self.dir.y, self.dir.z]
    }
}
