//! Screen-free calibration: the subject fixates the camera lens while moving
//! the head, so the gaze line passes through both the face center and the
//! camera origin. The label follows from the face-center pixel alone.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::{BoundingBox, CameraIntrinsics, Pixel};
use crate::frame::{Ccs, GazeVec};
use crate::synth::{self, GazeTarget, SceneConfig, Stream, Subject, SynthError, FEATURE_DIM};

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationRecord {
    pub subject: u32,
    pub face_px: Pixel,
    pub bbox: BoundingBox,
    /// Unit gaze label in the oCCS, pointing from the face toward the lens.
    pub g_o: GazeVec<Ccs>,
    /// Rendered appearance features of the frame.
    pub features: [f64; FEATURE_DIM],
}

/// Gaze label for a lens-fixation frame. All three components are taken in
/// millimeters (`f_mm = f_px * k`), so the unit direction does not depend on
/// `k`.
pub fn derive_calibration_label(intr: &CameraIntrinsics, face_px: Pixel) -> GazeVec<Ccs> {
    let k = intr.pixel_pitch_mm;
    let x = (face_px.x - intr.cx) * k;
    let y = (face_px.y - intr.cy) * k;
    GazeVec::new(-x, -y, -intr.focal_mm()).normalized()
}

/// `n_frames` lens-fixation frames for one subject, deterministic in
/// `cfg.seed`.
pub fn build_calibration_set(
    subject: &Subject,
    cfg: &SceneConfig,
    n_frames: usize,
) -> Result<Vec<CalibrationRecord>, SynthError> {
    if n_frames == 0 {
        return Err(SynthError::Config("calibration needs at least one frame".into()));
    }
    cfg.validate()?;
    let intr = &cfg.intrinsics;
    (0..n_frames)
        .map(|i| {
            let mut rng = synth::stream(cfg.seed, Stream::Calibration, subject.id as u64, i as u64);
            let frame = synth::sample_scene(cfg, GazeTarget::Lens, &mut rng)?;
            let mut frng = ChaCha8Rng::seed_from_u64(rng.next_u64());
            let features = synth::render_features(&frame, subject, intr, &mut frng);
            Ok(CalibrationRecord {
                subject: subject.id,
                face_px: frame.bbox.center,
                bbox: frame.bbox,
                g_o: derive_calibration_label(intr, frame.bbox.center),
                features,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::backproject;
    use crate::metrics::angular_error;
    use crate::synth::AngleDist;

    #[test]
    fn principal_point_looks_straight_back() {
        let c = CameraIntrinsics::standard();
        let g = derive_calibration_label(&c, c.principal());
        assert_eq!(g.to_array(), [-0.0, -0.0, -1.0]);
    }

    #[test]
    fn offset_face_matches_backprojected_ray() {
        let c = CameraIntrinsics::new(500.0, (320.0, 240.0), 0.05, (640, 480)).unwrap();
        let px = Pixel::new(420.0, 190.0);
        let g = derive_calibration_label(&c, px);
        let expect = GazeVec::<Ccs>::new(-5.0, 2.5, -25.0).normalized();
        assert!((g.dir - expect.dir).norm() < 1e-12);

        // oracle: a face somewhere on the pixel ray, looking at the origin
        let face = backproject(&c, px, 731.0).unwrap();
        let truth = GazeVec::<Ccs>::from_vector(-face.coords);
        assert!(angular_error(&g, &truth).unwrap() < 1e-9);
    }

    #[test]
    fn label_independent_of_pixel_pitch() {
        let px = Pixel::new(17.0, 433.0);
        let a = CameraIntrinsics::new(600.0, (320.0, 240.0), 0.001, (640, 480)).unwrap();
        let b = CameraIntrinsics { pixel_pitch_mm: 0.37, ..a };
        let ga = derive_calibration_label(&a, px);
        let gb = derive_calibration_label(&b, px);
        assert!((ga.dir - gb.dir).norm() < 1e-15);
        assert!((ga.norm() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn single_on_axis_frame() {
        let cfg = SceneConfig {
            head_yaw: AngleDist::fixed(0.0),
            head_pitch: AngleDist::fixed(0.0),
            face_region: [0.5, 0.5, 0.5, 0.5],
            ..SceneConfig::default()
        };
        let subj = Subject::new(0, [0.0, 0.0], 0.0).unwrap();
        let recs = build_calibration_set(&subj, &cfg, 1).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].g_o.to_array(), [-0.0, -0.0, -1.0]);
    }

    #[test]
    fn labels_are_geometrically_consistent() {
        let cfg = SceneConfig::default();
        let subj = synth::make_subjects(&cfg, 2)[1];
        let recs = build_calibration_set(&subj, &cfg, 100).unwrap();
        assert_eq!(recs.len(), 100);
        for r in &recs {
            assert!((r.g_o.norm() - 1.0).abs() < 1e-12);
            assert!(r.g_o.z() < 0.0);
            // any depth works: the true face lies on the pixel's ray
            let face = backproject(&cfg.intrinsics, r.face_px, 555.0).unwrap();
            let truth = GazeVec::<Ccs>::from_vector(-face.coords);
            assert!(angular_error(&r.g_o, &truth).unwrap() < 1e-6);
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let cfg = SceneConfig {
            seed: 42,
            ..SceneConfig::default()
        };
        let subj = synth::make_subjects(&cfg, 1)[0];
        assert_eq!(
            build_calibration_set(&subj, &cfg, 30).unwrap(),
            build_calibration_set(&subj, &cfg, 30).unwrap()
        );
        assert!(build_calibration_set(&subj, &cfg, 0).is_err());
    }
}
