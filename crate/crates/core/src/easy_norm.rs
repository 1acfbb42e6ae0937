//! Bounding-box-only normalization: rotate the camera frame so that its
//! optical axis passes through the face center, and carry gaze vectors
//! between the original and the normalized frame.

use nalgebra::{Matrix3, Vector3};

use crate::camera::{CameraIntrinsics, Pixel};
pub use crate::frame::{Ccs, GazeVec, Ncs};

/// Below this angle (radians) the face is treated as sitting on the optical
/// axis and the zero rotation is returned.
pub const EPS_PARALLEL: f64 = 1e-12;

/// Rotation vector: axis times angle in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisAngle(pub Vector3<f64>);

impl AxisAngle {
    pub fn zero() -> Self {
        Self(Vector3::zeros())
    }

    pub fn from_axis(axis: Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Self::zero();
        }
        Self(axis / n * angle)
    }

    /// Two-component form with the implicit zero z-component.
    pub fn from_2d(r: [f64; 2]) -> Self {
        Self(Vector3::new(r[0], r[1], 0.0))
    }

    pub fn to_2d(&self) -> [f64; 2] {
        [self.0.x, self.0.y]
    }

    pub fn angle(&self) -> f64 {
        self.0.norm()
    }
}

/// A proper 3x3 rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation3(Matrix3<f64>);

impl Rotation3 {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Active rotation about `r`'s axis by `|r|` (Rodrigues):
    /// `R = I + sin(t) K + (1 - cos(t)) K^2`.
    pub fn from_axis_angle(r: &AxisAngle) -> Self {
        let theta = r.angle();
        if theta == 0.0 {
            return Self::identity();
        }
        let k = r.0 / theta;
        let kx = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
        Self(Matrix3::identity() + kx * theta.sin() + kx * kx * (1.0 - theta.cos()))
    }

    /// Wrap a matrix without checking it. Use [`Rotation3::is_proper`] to
    /// validate externally supplied data.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Self(m)
    }

    /// Row-major entries.
    pub fn from_row_major(r: [f64; 9]) -> Self {
        Self(Matrix3::from_row_slice(&r))
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Max deviation of `R^T R` from identity and of `det R` from 1.
    pub fn orthonormality_error(&self) -> f64 {
        let e = (self.0.transpose() * self.0 - Matrix3::identity()).abs().max();
        e.max((self.0.determinant() - 1.0).abs())
    }

    pub fn is_proper(&self, tol: f64) -> bool {
        self.orthonormality_error() <= tol
    }
}

/// Rotation vector taking the oCCS to the nCCS for a face seen at `face_px`
/// on the standardized image. The z-component is zero by construction.
pub fn norm_rotation(intr: &CameraIntrinsics, face_px: Pixel) -> AxisAngle {
    let z_s = Vector3::new(face_px.x - intr.cx, face_px.y - intr.cy, intr.focal_px);
    let z_n = z_s / z_s.norm();
    // z_o x z_n with z_o = (0, 0, 1)
    let axis = Vector3::new(-z_n.y, z_n.x, 0.0);
    let s = axis.norm();
    let theta = s.atan2(z_n.z);
    if theta < EPS_PARALLEL || s == 0.0 {
        return AxisAngle::zero();
    }
    AxisAngle(axis / s * theta)
}

/// The oCCS -> nCCS coordinate transform associated with `r`: it re-expresses
/// an oCCS vector in the rotated frame, so it is the transpose of the active
/// rotation [`Rotation3::from_axis_angle`]. Maps `z_n` onto `[0, 0, 1]`.
pub fn to_matrix(r: &AxisAngle) -> Rotation3 {
    Rotation3::from_axis_angle(r).transpose()
}

pub fn normalize_gaze(g_o: &GazeVec<Ccs>, r: &AxisAngle) -> GazeVec<Ncs> {
    GazeVec::from_vector(to_matrix(r).apply(&g_o.dir))
}

pub fn denormalize_gaze(g_n: &GazeVec<Ncs>, r: &AxisAngle) -> GazeVec<Ccs> {
    GazeVec::from_vector(to_matrix(r).transpose().apply(&g_n.dir))
}

/// Unit optical axis of the nCCS, expressed in the oCCS.
pub fn normalized_axis(intr: &CameraIntrinsics, face_px: Pixel) -> Vector3<f64> {
    Vector3::new(face_px.x - intr.cx, face_px.y - intr.cy, intr.focal_px).normalize()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

    fn cam500() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, (320.0, 240.0), 0.003, (640, 480)).unwrap()
    }

    // Independent route: nalgebra's quaternion exponential map.
    fn quat_matrix(r: &Vector3<f64>) -> Matrix3<f64> {
        UnitQuaternion::from_scaled_axis(*r)
            .to_rotation_matrix()
            .into_inner()
    }

    #[test]
    fn face_on_principal_point_gives_zero_rotation() {
        let c = cam500();
        assert_eq!(norm_rotation(&c, c.principal()), AxisAngle::zero());
        assert_eq!(to_matrix(&AxisAngle::zero()), Rotation3::identity());
    }

    #[test]
    fn quarter_turn_about_y() {
        let c = cam500();
        let r = norm_rotation(&c, Pixel::new(820.0, 240.0));
        assert!(r.0.x.abs() < 1e-15);
        assert!((r.0.y - FRAC_PI_4).abs() < 1e-15);
        assert_eq!(r.0.z, 0.0);

        let q = quat_matrix(&Vector3::new(0.0, FRAC_PI_4, 0.0));
        let z_n = Vector3::new(1.0, 0.0, 1.0) / 2f64.sqrt();
        assert!((q * Vector3::z() - z_n).norm() < 1e-15);
        assert!((to_matrix(&r).apply(&z_n) - Vector3::z()).norm() < 1e-15);
    }

    #[test]
    fn canonical_z_rotation() {
        let r = AxisAngle::from_axis(Vector3::z(), FRAC_PI_2);
        let m = Rotation3::from_axis_angle(&r).to_row_major();
        let expect = [0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        for (a, b) in m.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15, "{m:?}");
        }
    }

    #[test]
    fn rodrigues_matches_quaternion() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..2000 {
            let axis = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let r = AxisAngle::from_axis(axis, rng.random_range(0.0..3.1));
            let a = Rotation3::from_axis_angle(&r);
            let b = quat_matrix(&r.0);
            assert!((a.matrix() - b).abs().max() < 1e-12);
            assert!((to_matrix(&r).matrix() - b.transpose()).abs().max() < 1e-12);
        }
    }

    #[test]
    fn axis_has_no_z_component() {
        let c = CameraIntrinsics::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let px = Pixel::new(
                rng.random_range(0.0..640.0),
                rng.random_range(0.0..480.0),
            );
            assert_eq!(norm_rotation(&c, px).0.z, 0.0);
        }
    }

    #[test]
    fn gaze_along_new_axis_normalizes_to_z() {
        let c = cam500();
        let px = Pixel::new(100.0, 400.0);
        let r = norm_rotation(&c, px);
        let z_n = GazeVec::<Ccs>::from_vector(normalized_axis(&c, px));
        let g_n = normalize_gaze(&z_n, &r);
        assert!((g_n.dir - Vector3::z()).norm() < 1e-12);
        let back = denormalize_gaze(&GazeVec::new(0.0, 0.0, 1.0), &r);
        assert!((back.dir - z_n.dir).norm() < 1e-12);
    }

    #[test]
    fn zero_rotation_is_identity_both_ways() {
        let g = GazeVec::<Ccs>::new(0.3, -0.2, -0.9);
        let n = normalize_gaze(&g, &AxisAngle::zero());
        assert_eq!(n.dir, g.dir);
        assert_eq!(denormalize_gaze(&n, &AxisAngle::zero()).dir, g.dir);
    }

    #[test]
    fn near_principal_point_stays_finite() {
        let c = CameraIntrinsics::standard();
        let r = norm_rotation(&c, Pixel::new(320.0 + 1e-13, 240.0));
        assert!(r.0.iter().all(|v| v.is_finite()));
        assert!(to_matrix(&r).is_proper(1e-12));
    }

    proptest! {
        #[test]
        fn norm_and_roundtrip(x in 0.0..640.0f64, y in 0.0..480.0f64,
                              gx in -1.0..1.0f64, gy in -1.0..1.0f64, gz in -1.0..1.0f64) {
            let c = CameraIntrinsics::standard();
            let r = norm_rotation(&c, Pixel::new(x, y));
            let g = GazeVec::<Ccs>::new(gx, gy, gz);
            let n = normalize_gaze(&g, &r);
            prop_assert!((n.norm() - g.norm()).abs() < 1e-12);
            let back = denormalize_gaze(&n, &r);
            prop_assert!((back.dir - g.dir).abs().max() < 1e-12);
            prop_assert!(to_matrix(&r).is_proper(1e-9));
        }
    }
}
