//! Synthetic ground-truth scenes.
//!
//! Each frame places a face center in front of the standardized camera,
//! draws a gaze and a head pose from the Table-I-style distributions, and
//! derives every supervised label through the geometry modules. A compact
//! feature vector stands in for the normalized face image: it carries the
//! normalized gaze angles offset by the subject's kappa bias plus noise, the
//! noisy head pose and the normalized bounding box.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::calibration::{self, CalibrationRecord};
use crate::camera::{self, BoundingBox, CameraIntrinsics, Pixel};
use crate::dataset::{self, DatasetError, DatasetHeader, DatasetKind};
use crate::easy_norm;
use crate::frame::{Ccs, GazeVec, Ncs, Point3};
use crate::model::euler::{euler_from_vec, vec_from_euler, EulerGaze};
use crate::pogz::{self, PlanePoint};

pub const FEATURE_DIM: usize = 7;
pub const MAX_KAPPA: f64 = 0.15;
const MAX_DRAWS: usize = 1000;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene config: {0}")]
    Config(String),
    #[error("no valid frame after {MAX_DRAWS} draws: {0}")]
    RejectionExhausted(&'static str),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Gaussian clipped (by resampling) to `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngleDist {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl AngleDist {
    pub const fn new(mean: f64, std: f64, min: f64, max: f64) -> Self {
        Self {
            mean,
            std,
            min,
            max,
        }
    }

    pub const fn fixed(v: f64) -> Self {
        Self::new(v, 0.0, v, v)
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Option<f64> {
        for _ in 0..MAX_DRAWS {
            let z: f64 = rng.sample(StandardNormal);
            let v = self.mean + self.std * z;
            if (self.min..=self.max).contains(&v) {
                return Some(v);
            }
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub gaze_yaw: AngleDist,
    pub gaze_pitch: AngleDist,
    pub head_yaw: AngleDist,
    pub head_pitch: AngleDist,
    pub depth_mm: [f64; 2],
    /// Physical face width; the box side is `face_width_mm * f / depth`.
    pub face_width_mm: f64,
    /// Region the face center is drawn from, as image fractions `[x0, y0, x1, y1]`.
    pub face_region: [f64; 4],
    pub intrinsics: CameraIntrinsics,
    /// Per-subject kappa components are uniform in `[-kappa_range, kappa_range]`.
    pub kappa_range: f64,
    pub feature_noise_sigma: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            gaze_yaw: AngleDist::new(0.01, 0.27, -0.86, 0.97),
            gaze_pitch: AngleDist::new(-0.01, 0.23, -0.69, 0.84),
            head_yaw: AngleDist::new(0.03, 0.29, -1.45, 1.12),
            head_pitch: AngleDist::new(-0.01, 0.12, -0.77, 0.72),
            depth_mm: [400.0, 800.0],
            face_width_mm: 150.0,
            face_region: [0.0, 0.0, 1.0, 1.0],
            intrinsics: CameraIntrinsics::standard(),
            kappa_range: 0.09,
            feature_noise_sigma: 0.035,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        for (name, d) in [
            ("gaze_yaw", &self.gaze_yaw),
            ("gaze_pitch", &self.gaze_pitch),
            ("head_yaw", &self.head_yaw),
            ("head_pitch", &self.head_pitch),
        ] {
            if !(d.min <= d.max && d.std >= 0.0) {
                return bad(format!("{name}: empty range or negative std"));
            }
        }
        if !(self.depth_mm[0] > 0.0 && self.depth_mm[0] <= self.depth_mm[1]) {
            return bad(format!("depth range {:?}", self.depth_mm));
        }
        if !(self.face_width_mm > 0.0) {
            return bad("face width must be positive".into());
        }
        let r = self.face_region;
        if !(0.0 <= r[0] && r[0] <= r[2] && r[2] <= 1.0 && 0.0 <= r[1] && r[1] <= r[3] && r[3] <= 1.0) {
            return bad(format!("face region {r:?}"));
        }
        if !(0.0..=MAX_KAPPA).contains(&self.kappa_range) {
            return bad(format!("kappa range {} exceeds {MAX_KAPPA}", self.kappa_range));
        }
        if !(self.feature_noise_sigma >= 0.0) {
            return bad("feature noise must be non-negative".into());
        }
        self.intrinsics
            .validate()
            .map_err(|e| SynthError::Config(e.to_string()))
    }

    /// Short stable digest of the serialized config.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: u32,
    /// (yaw, pitch) offset between apparent and true gaze, radians.
    pub kappa: [f64; 2],
    pub feature_noise_sigma: f64,
}

impl Subject {
    pub fn new(id: u32, kappa: [f64; 2], feature_noise_sigma: f64) -> Result<Self, SynthError> {
        if kappa.iter().any(|k| !(k.abs() <= MAX_KAPPA)) {
            return Err(SynthError::Config(format!("kappa {kappa:?} exceeds {MAX_KAPPA}")));
        }
        if !(feature_noise_sigma >= 0.0) {
            return Err(SynthError::Config("negative feature noise".into()));
        }
        Ok(Self {
            id,
            kappa,
            feature_noise_sigma,
        })
    }
}

/// Subjects `0..n`, each drawn from its own seed stream.
pub fn make_subjects(cfg: &SceneConfig, n: u32) -> Vec<Subject> {
    (0..n)
        .map(|id| {
            let mut rng = stream(cfg.seed, Stream::Subject, id as u64, 0);
            let mut k = || cfg.kappa_range * (2.0 * rng.random::<f64>() - 1.0);
            Subject {
                id,
                kappa: [k(), k()],
                feature_noise_sigma: cfg.feature_noise_sigma,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Subject = 1,
    General = 2,
    Calibration = 3,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent RNG for one (stream, subject, index) triple, so frames can be
/// generated in any order and re-generated individually.
pub fn stream(seed: u64, kind: Stream, subject: u64, index: u64) -> ChaCha8Rng {
    let mut h = splitmix64(seed);
    for part in [kind as u64, subject, index] {
        h = splitmix64(h ^ part);
    }
    ChaCha8Rng::seed_from_u64(h)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Labels {
    pub g_n: EulerGaze,
    pub g_o: EulerGaze,
    pub pogz: PlanePoint<Ccs>,
    pub r_on: [f64; 2],
    pub o_face: Point3<Ccs>,
}

/// Scene geometry of one frame, before features are rendered.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneFrame {
    pub bbox: BoundingBox,
    pub head_pose: EulerGaze,
    pub labels: Labels,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GazeSample {
    pub subject: u32,
    pub features: [f64; FEATURE_DIM],
    pub bbox: BoundingBox,
    pub head_pose: EulerGaze,
    pub labels: Labels,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GazeTarget {
    /// Gaze drawn from the configured distributions.
    Free,
    /// Subject fixates the lens center (oCCS origin).
    Lens,
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

pub fn sample_scene<R: Rng>(
    cfg: &SceneConfig,
    target: GazeTarget,
    rng: &mut R,
) -> Result<SceneFrame, SynthError> {
    let intr = &cfg.intrinsics;
    let (w, h) = (intr.width as f64, intr.height as f64);
    let r = cfg.face_region;
    for _ in 0..MAX_DRAWS {
        let depth = uniform(rng, cfg.depth_mm[0], cfg.depth_mm[1]);
        let px = Pixel::new(uniform(rng, r[0] * w, r[2] * w), uniform(rng, r[1] * h, r[3] * h));
        let bbox = BoundingBox {
            center: px,
            side: cfg.face_width_mm * intr.focal_px / depth,
        };
        if !bbox.inside(intr) {
            continue;
        }
        let o_face = camera::backproject(intr, px, depth).expect("depth is positive");
        let (Some(hy), Some(hp)) = (cfg.head_yaw.sample(rng), cfg.head_pitch.sample(rng)) else {
            return Err(SynthError::RejectionExhausted("head pose outside its range"));
        };
        let r_on = easy_norm::norm_rotation(intr, px);
        let (g_n, g_o): (GazeVec<Ncs>, GazeVec<Ccs>) = match target {
            GazeTarget::Free => {
                let (Some(yaw), Some(pitch)) = (cfg.gaze_yaw.sample(rng), cfg.gaze_pitch.sample(rng))
                else {
                    return Err(SynthError::RejectionExhausted("gaze outside its range"));
                };
                let g_n = vec_from_euler(EulerGaze::new(yaw, pitch));
                (g_n, easy_norm::denormalize_gaze(&g_n, &r_on))
            }
            GazeTarget::Lens => {
                let g_o = GazeVec::from_vector(-o_face.coords.normalize());
                (easy_norm::normalize_gaze(&g_o, &r_on), g_o)
            }
        };
        let Ok(pogz) = pogz::pogz_from_ray(&o_face, &g_o) else {
            continue;
        };
        let (Ok(e_n), Ok(e_o)) = (euler_from_vec(&g_n), euler_from_vec(&g_o)) else {
            continue;
        };
        return Ok(SceneFrame {
            bbox,
            head_pose: EulerGaze::new(hy, hp),
            labels: Labels {
                g_n: e_n,
                g_o: e_o,
                pogz,
                r_on: r_on.to_2d(),
                o_face,
            },
        });
    }
    Err(SynthError::RejectionExhausted("face does not fit in the image"))
}

/// Feature vector: `[gaze yaw, gaze pitch, head yaw, head pitch, x/W, y/H, L/W]`.
///
/// The gaze channels are the normalized-gaze labels shifted by the subject's
/// kappa; all angle channels get iid Gaussian noise of the subject's sigma.
/// The number of RNG draws does not depend on the subject.
pub fn render_features<R: Rng>(
    frame: &SceneFrame,
    subject: &Subject,
    intr: &CameraIntrinsics,
    rng: &mut R,
) -> [f64; FEATURE_DIM] {
    let mut noise = || -> f64 { subject.feature_noise_sigma * rng.sample::<f64, _>(StandardNormal) };
    let w = intr.width as f64;
    [
        frame.labels.g_n.yaw + subject.kappa[0] + noise(),
        frame.labels.g_n.pitch + subject.kappa[1] + noise(),
        frame.head_pose.yaw + noise(),
        frame.head_pose.pitch + noise(),
        frame.bbox.center.x / w,
        frame.bbox.center.y / intr.height as f64,
        frame.bbox.side / w,
    ]
}

pub fn sample_frame<R: Rng>(
    subject: &Subject,
    cfg: &SceneConfig,
    rng: &mut R,
) -> Result<GazeSample, SynthError> {
    let frame = sample_scene(cfg, GazeTarget::Free, rng)?;
    // features get their own sub-stream so geometry draws stay aligned
    let mut frng = ChaCha8Rng::seed_from_u64(rng.next_u64());
    let features = render_features(&frame, subject, &cfg.intrinsics, &mut frng);
    Ok(GazeSample {
        subject: subject.id,
        features,
        bbox: frame.bbox,
        head_pose: frame.head_pose,
        labels: frame.labels,
    })
}

/// General frames for every subject, subject-major order.
pub fn generate_general(
    cfg: &SceneConfig,
    subjects: &[Subject],
    n_per_subject: usize,
) -> Result<Vec<GazeSample>, SynthError> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(subjects.len() * n_per_subject);
    for s in subjects {
        for i in 0..n_per_subject {
            let mut rng = stream(cfg.seed, Stream::General, s.id as u64, i as u64);
            out.push(sample_frame(s, cfg, &mut rng)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    General,
    Calibration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSummary {
    pub records: usize,
    pub header: DatasetHeader,
    /// (mean, std) of gaze yaw, gaze pitch, head yaw, head pitch (general mode only).
    pub stats: Option<[(f64, f64); 4]>,
}

pub fn mean_std(xs: impl IntoIterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = xs.into_iter().collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

pub fn attribute_stats(samples: &[GazeSample]) -> [(f64, f64); 4] {
    [
        mean_std(samples.iter().map(|s| s.labels.g_n.yaw)),
        mean_std(samples.iter().map(|s| s.labels.g_n.pitch)),
        mean_std(samples.iter().map(|s| s.head_pose.yaw)),
        mean_std(samples.iter().map(|s| s.head_pose.pitch)),
    ]
}

/// Generate and write a JSONL dataset (header line first).
pub fn generate_dataset(
    cfg: &SceneConfig,
    subjects: &[Subject],
    n_per_subject: usize,
    mode: Mode,
    path: &Path,
) -> Result<DatasetSummary, SynthError> {
    cfg.validate()?;
    let header = DatasetHeader::new(
        match mode {
            Mode::General => DatasetKind::General,
            Mode::Calibration => DatasetKind::Calibration,
        },
        cfg,
        subjects,
    );
    match mode {
        Mode::General => {
            let samples = generate_general(cfg, subjects, n_per_subject)?;
            dataset::write_general(path, &header, &samples)?;
            let stats = (!samples.is_empty()).then(|| attribute_stats(&samples));
            Ok(DatasetSummary {
                records: samples.len(),
                header,
                stats,
            })
        }
        Mode::Calibration => {
            let mut records: Vec<CalibrationRecord> = Vec::new();
            if n_per_subject > 0 {
                for s in subjects {
                    records.extend(calibration::build_calibration_set(s, cfg, n_per_subject)?);
                }
            }
            dataset::write_calibration(path, &header, &records)?;
            Ok(DatasetSummary {
                records: records.len(),
                header,
                stats: None,
            })
        }
    }
}

/// Zero-kappa twin of `subjects`: same seeds, so the same frames and noise.
pub fn without_kappa(subjects: &[Subject]) -> Vec<Subject> {
    subjects
        .iter()
        .map(|s| Subject {
            kappa: [0.0, 0.0],
            ..*s
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::angular_error;

    fn frozen_cfg() -> SceneConfig {
        SceneConfig {
            gaze_yaw: AngleDist::fixed(0.0),
            gaze_pitch: AngleDist::fixed(0.0),
            head_yaw: AngleDist::fixed(0.0),
            head_pitch: AngleDist::fixed(0.0),
            face_region: [0.5, 0.5, 0.5, 0.5],
            ..SceneConfig::default()
        }
    }

    fn check_consistency(s: &GazeSample, intr: &CameraIntrinsics) {
        let l = &s.labels;
        let r = easy_norm::norm_rotation(intr, s.bbox.center);
        assert!((r.to_2d()[0] - l.r_on[0]).abs() < 1e-6 && (r.to_2d()[1] - l.r_on[1]).abs() < 1e-6);
        let g_n: GazeVec<Ncs> = vec_from_euler(l.g_n);
        let g_o: GazeVec<Ccs> = vec_from_euler(l.g_o);
        let back = easy_norm::denormalize_gaze(&g_n, &easy_norm::AxisAngle::from_2d(l.r_on));
        assert!((back.dir - g_o.dir).abs().max() < 1e-6);
        let p = pogz::pogz_from_ray(&l.o_face, &g_o).unwrap();
        assert!((p.x - l.pogz.x).abs() < 1e-6 && (p.y - l.pogz.y).abs() < 1e-6);
        let px = camera::project(intr, &l.o_face).unwrap();
        assert!((px.x - s.bbox.center.x).abs() < 1e-9 && (px.y - s.bbox.center.y).abs() < 1e-9);
    }

    #[test]
    fn degenerate_frame() {
        let cfg = frozen_cfg();
        let subj = Subject::new(0, [0.0, 0.0], 0.0).unwrap();
        let s = sample_frame(&subj, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(s.labels.g_o.to_array(), [0.0, 0.0]);
        assert_eq!(s.labels.r_on, [0.0, 0.0]);
        assert_eq!(s.labels.pogz.to_array(), [0.0, 0.0]);
        assert_eq!((s.labels.o_face.x(), s.labels.o_face.y()), (0.0, 0.0));
    }

    #[test]
    fn every_sample_is_consistent() {
        let cfg = SceneConfig {
            seed: 9,
            ..SceneConfig::default()
        };
        let subjects = make_subjects(&cfg, 4);
        let samples = generate_general(&cfg, &subjects, 500).unwrap();
        assert_eq!(samples.len(), 2000);
        for s in &samples {
            check_consistency(s, &cfg.intrinsics);
            assert!(s.bbox.inside(&cfg.intrinsics));
        }
    }

    #[test]
    fn box_side_inverse_to_depth() {
        let cfg = SceneConfig::default();
        let subj = make_subjects(&cfg, 1)[0];
        for i in 0..50 {
            let s = sample_frame(&subj, &cfg, &mut stream(0, Stream::General, 0, i)).unwrap();
            let k = s.bbox.side * s.labels.o_face.z();
            assert!((k - cfg.face_width_mm * cfg.intrinsics.focal_px).abs() < 1e-6);
        }
    }

    #[test]
    fn features_with_zero_kappa_and_noise_equal_labels() {
        let cfg = SceneConfig::default();
        let clean = Subject::new(0, [0.0, 0.0], 0.0).unwrap();
        let biased = Subject::new(0, [0.05, 0.0], 0.0).unwrap();
        for i in 0..20 {
            let a = sample_frame(&clean, &cfg, &mut stream(3, Stream::General, 0, i)).unwrap();
            let b = sample_frame(&biased, &cfg, &mut stream(3, Stream::General, 0, i)).unwrap();
            assert_eq!(a.features[0], a.labels.g_n.yaw);
            assert_eq!(a.features[1], a.labels.g_n.pitch);
            assert_eq!(b.features[0], b.labels.g_n.yaw + 0.05);
            assert_eq!(a.labels, b.labels);
        }
    }

    #[test]
    fn kappa_is_identifiable() {
        let cfg = SceneConfig::default();
        let subj = Subject::new(0, [0.05, 0.0], 0.0).unwrap();
        let samples = generate_general(&cfg, &[subj], 200).unwrap();
        let gap = samples
            .iter()
            .map(|s| s.features[0] - s.labels.g_n.yaw)
            .sum::<f64>()
            / samples.len() as f64;
        assert!((gap - 0.05).abs() < 1e-9);
    }

    #[test]
    fn noise_floor_matches_rayleigh_mean() {
        // Oracle: for small iid N(0, s^2) perturbations of yaw and pitch the
        // angular gap is Rayleigh distributed with mean s * sqrt(pi/2); the
        // cos(pitch) foreshortening of yaw lowers it slightly.
        let cfg = SceneConfig::default();
        let subj = Subject::new(0, [0.0, 0.0], 0.035).unwrap();
        let samples = generate_general(&cfg, &[subj], 20_000).unwrap();
        let mean_gap = samples
            .iter()
            .map(|s| {
                let a: GazeVec<Ncs> = vec_from_euler(EulerGaze::new(s.features[0], s.features[1]));
                let b: GazeVec<Ncs> = vec_from_euler(s.labels.g_n);
                angular_error(&a, &b).unwrap()
            })
            .sum::<f64>()
            / samples.len() as f64;
        let rayleigh = 0.035 * (std::f64::consts::PI / 2.0).sqrt();
        assert!((mean_gap.to_radians() / rayleigh - 1.0).abs() < 0.03, "{mean_gap}");
    }

    #[test]
    fn deterministic_and_order_independent() {
        let cfg = SceneConfig {
            seed: 77,
            ..SceneConfig::default()
        };
        let subjects = make_subjects(&cfg, 3);
        let a = generate_general(&cfg, &subjects, 20).unwrap();
        let b = generate_general(&cfg, &subjects, 20).unwrap();
        assert_eq!(a, b);
        let only_last = generate_general(&cfg, &subjects[2..], 20).unwrap();
        assert_eq!(&a[40..], &only_last[..]);
    }

    #[test]
    fn subjects_respect_kappa_range() {
        let cfg = SceneConfig::default();
        for s in make_subjects(&cfg, 200) {
            assert!(s.kappa.iter().all(|k| k.abs() <= 0.09));
        }
        assert!(Subject::new(0, [0.2, 0.0], 0.0).is_err());
        assert!(Subject::new(0, [0.0, 0.0], -1.0).is_err());
    }

    #[test]
    fn impossible_config_fails_after_bounded_draws() {
        let cfg = SceneConfig {
            face_region: [0.0, 0.0, 0.0, 0.0],
            ..SceneConfig::default()
        };
        let subj = make_subjects(&cfg, 1)[0];
        let r = sample_frame(&subj, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(SynthError::RejectionExhausted(_))));
    }

    #[test]
    fn invalid_configs_rejected() {
        let cfg = SceneConfig {
            depth_mm: [0.0, 10.0],
            ..SceneConfig::default()
        };
        assert!(cfg.validate().is_err());
        let mut cfg = SceneConfig::default();
        cfg.gaze_yaw.min = 1.0;
        assert!(cfg.validate().is_err());
    }
}
