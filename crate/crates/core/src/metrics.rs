//! Angular and point-of-gaze errors, aggregated per subject.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::Serialize;
use thiserror::Error;

use crate::camera::CameraIntrinsics;
use crate::frame::{Ccs, Frame, FrameKind, GazeVec, Ncs};
use crate::model::{predict_6dof, vec_from_euler, GazeModel, ModelError};
use crate::pogz::{pogz_to_pog, PlanePoint, RigidTransform};
use crate::synth::GazeSample;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("angular error of a zero vector")]
    ZeroVector,
    #[error("points live in different frames ({0:?} vs {1:?})")]
    FrameMismatch(FrameKind, FrameKind),
    #[error("nothing to evaluate")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Angle between two directions in degrees.
///
/// Equal to `acos` of the clamped cosine, but evaluated as
/// `atan2(|g x g_hat|, g . g_hat)`, which keeps full precision for nearly
/// parallel vectors where `acos` bottoms out around 1e-6 degrees.
pub fn angular_error<F: Frame>(g: &GazeVec<F>, g_hat: &GazeVec<F>) -> Result<f64, MetricsError> {
    let n = g.norm() * g_hat.norm();
    if !(n > 0.0) {
        return Err(MetricsError::ZeroVector);
    }
    let a = g.dir / g.norm();
    let b = g_hat.dir / g_hat.norm();
    Ok(a.cross(&b).norm().atan2(a.dot(&b)).to_degrees())
}

/// Euclidean distance between two plane points of the same frame.
pub fn pog_error<A: Frame, B: Frame>(p: &PlanePoint<A>, p_hat: &PlanePoint<B>) -> Result<f64, MetricsError> {
    if A::KIND != B::KIND {
        return Err(MetricsError::FrameMismatch(A::KIND, B::KIND));
    }
    Ok((p.x - p_hat.x).hypot(p.y - p_hat.y))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    /// `None` for the aggregate row.
    pub subject: Option<u32>,
    pub count: usize,
    pub g_n_mean_deg: f64,
    pub g_n_median_deg: f64,
    pub g_o_mean_deg: f64,
    pub g_o_median_deg: f64,
    pub pogz_mean_mm: f64,
    pub pog_mean_mm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub subjects: Vec<ReportRow>,
    pub overall: ReportRow,
    /// Median distance between head PoGz and the PoGz of the assembled line.
    pub pogz_consistency_median_mm: Option<f64>,
    /// Samples whose on-screen PoG could not be formed (line parallel to the screen).
    pub pog_skipped: usize,
}

#[derive(Default)]
struct Acc {
    g_n: Vec<f64>,
    g_o: Vec<f64>,
    pogz: Vec<f64>,
    pog: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

impl Acc {
    fn row(&self, subject: Option<u32>, with_pog: bool) -> ReportRow {
        ReportRow {
            subject,
            count: self.g_n.len(),
            g_n_mean_deg: mean(&self.g_n),
            g_n_median_deg: median(&self.g_n),
            g_o_mean_deg: mean(&self.g_o),
            g_o_median_deg: median(&self.g_o),
            pogz_mean_mm: mean(&self.pogz),
            pog_mean_mm: (with_pog && !self.pog.is_empty()).then(|| mean(&self.pog)),
        }
    }
}

/// Run the model over `samples` and aggregate errors. PoG errors are only
/// computed when a camera-to-screen transform is given.
pub fn evaluate<M: GazeModel + ?Sized>(
    model: &M,
    samples: &[GazeSample],
    intr: &CameraIntrinsics,
    screen: Option<&RigidTransform>,
) -> Result<EvalReport, MetricsError> {
    evaluate_per_subject(|_| model, samples, intr, screen)
}

/// As [`evaluate`], scoring each subject with `model_for(subject)`.
pub fn evaluate_per_subject<'m, M: GazeModel + ?Sized + 'm>(
    model_for: impl Fn(u32) -> &'m M,
    samples: &[GazeSample],
    intr: &CameraIntrinsics,
    screen: Option<&RigidTransform>,
) -> Result<EvalReport, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    let mut per: BTreeMap<u32, Acc> = BTreeMap::new();
    let mut all = Acc::default();
    let mut gaps = Vec::new();
    let mut skipped = 0;
    for s in samples {
        let (out, g6) = predict_6dof(model_for(s.subject), &s.features, &s.bbox, intr)?;
        let e_n = angular_error(&vec_from_euler::<Ncs>(out.g_n), &vec_from_euler::<Ncs>(s.labels.g_n))?;
        let truth_o = vec_from_euler::<Ccs>(s.labels.g_o);
        let e_o = angular_error(&g6.direction, &truth_o)?;
        let e_z = pog_error(&out.pogz, &s.labels.pogz)?;
        let e_s = match screen {
            Some(t) => match (pogz_to_pog(&s.labels.pogz, &truth_o, t), pogz_to_pog(&out.pogz, &g6.direction, t)) {
                (Ok(a), Ok(b)) => Some(pog_error(&a.point, &b.point)?),
                _ => {
                    skipped += 1;
                    None
                }
            },
            None => None,
        };
        if let Some(gap) = g6.pogz_gap() {
            gaps.push(gap);
        }
        for acc in [per.entry(s.subject).or_default(), &mut all] {
            acc.g_n.push(e_n);
            acc.g_o.push(e_o);
            acc.pogz.push(e_z);
            acc.pog.extend(e_s);
        }
    }
    let with_pog = screen.is_some();
    Ok(EvalReport {
        subjects: per.iter().map(|(&id, a)| a.row(Some(id), with_pog)).collect(),
        overall: all.row(None, with_pog),
        pogz_consistency_median_mm: (!gaps.is_empty()).then(|| median(&gaps)),
        pog_skipped: skipped,
    })
}

impl EvalReport {
    pub const CSV_HEADER: &'static str =
        "subject,count,g_n_mean_deg,g_n_median_deg,g_o_mean_deg,g_o_median_deg,pogz_mean_mm,pog_mean_mm";

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{}", Self::CSV_HEADER).unwrap();
        for r in self.subjects.iter().chain(std::iter::once(&self.overall)) {
            writeln!(
                s,
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
                r.subject.map_or("all".to_string(), |id| id.to_string()),
                r.count,
                r.g_n_mean_deg,
                r.g_n_median_deg,
                r.g_o_mean_deg,
                r.g_o_median_deg,
                r.pogz_mean_mm,
                r.pog_mean_mm.map_or("NA".to_string(), |v| format!("{v:.6}")),
            )
            .unwrap();
        }
        s
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>8} {:>6} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}",
            "subject", "n", "g_n mean", "g_n med", "g_o mean", "g_o med", "PoGz mm", "PoG mm"
        )?;
        for r in self.subjects.iter().chain(std::iter::once(&self.overall)) {
            writeln!(
                f,
                "{:>8} {:>6} {:>10.3} {:>10.3} {:>10.3} {:>10.3} {:>10.2} {:>10}",
                r.subject.map_or("all".to_string(), |id| id.to_string()),
                r.count,
                r.g_n_mean_deg,
                r.g_n_median_deg,
                r.g_o_mean_deg,
                r.g_o_median_deg,
                r.pogz_mean_mm,
                r.pog_mean_mm.map_or("N/A".to_string(), |v| format!("{v:.2}")),
            )?;
        }
        if let Some(g) = self.pogz_consistency_median_mm {
            writeln!(f, "head vs geometric PoGz, median gap: {g:.2} mm")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::easy_norm::{AxisAngle, Rotation3};
    use crate::frame::Scs;
    use crate::model::predict::tests::Oracle;
    use crate::synth::{self, SceneConfig};
    use nalgebra::Vector3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn known_angles() {
        let z = GazeVec::<Ccs>::new(0.0, 0.0, -1.0);
        assert_eq!(angular_error(&z, &z).unwrap(), 0.0);
        let x = GazeVec::<Ccs>::new(1.0, 0.0, 0.0);
        assert!((angular_error(&z, &x).unwrap() - 90.0).abs() < 1e-9);
        let neg = GazeVec::<Ccs>::new(0.0, 0.0, 1.0);
        assert!((angular_error(&z, &neg).unwrap() - 180.0).abs() < 1e-9);
        let five = 5f64.to_radians();
        let g = GazeVec::<Ccs>::new(five.sin(), 0.0, -five.cos());
        assert!((angular_error(&z, &g).unwrap() - 5.0).abs() < 1e-9);
    }

    #[test]
    fn zero_vector_is_rejected() {
        let z = GazeVec::<Ccs>::new(0.0, 0.0, 0.0);
        let g = GazeVec::<Ccs>::new(0.0, 0.0, -1.0);
        assert_eq!(angular_error(&z, &g), Err(MetricsError::ZeroVector));
    }

    #[test]
    fn matches_clamped_acos() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let a: Vector3<f64> = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), -1.0);
            let b: Vector3<f64> = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let c = (a.dot(&b) / (a.norm() * b.norm())).clamp(-1.0, 1.0);
            let e = angular_error(&GazeVec::<Ccs>::from_vector(a), &GazeVec::from_vector(b)).unwrap();
            assert!((e - c.acos().to_degrees()).abs() < 1e-6);
        }
    }

    #[test]
    fn clamped_near_parallel() {
        // the cosine of these rounds above one without the clamp
        let a = GazeVec::<Ccs>::new(0.1, 0.2, 0.3);
        for k in [1.0, 3.0, 7.0, 1e-3, 123.456] {
            let b = GazeVec::<Ccs>::from_vector(a.dir * k);
            let e = angular_error(&a, &b).unwrap();
            assert!(e.is_finite() && e < 1e-5, "{e}");
        }
    }

    #[test]
    fn pog_known_values() {
        let o = PlanePoint::<Scs>::new(0.0, 0.0);
        assert_eq!(pog_error(&o, &o).unwrap(), 0.0);
        assert!((pog_error(&o, &PlanePoint::<Scs>::new(3.0, 4.0)).unwrap() - 5.0).abs() < 1e-9);
        assert_eq!(
            pog_error(&o, &PlanePoint::<Ccs>::new(0.0, 0.0)),
            Err(MetricsError::FrameMismatch(FrameKind::Scs, FrameKind::Ccs))
        );
    }

    fn unit() -> impl Strategy<Value = Vector3<f64>> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
            .prop_filter("nonzero", |(x, y, z)| x * x + y * y + z * z > 1e-6)
            .prop_map(|(x, y, z)| Vector3::new(x, y, z))
    }

    proptest! {
        #[test]
        fn scaling_and_negation(v in unit(), k in 1e-3..1e3f64) {
            let g = GazeVec::<Ccs>::from_vector(v);
            prop_assert!(angular_error(&g, &GazeVec::from_vector(v * k)).unwrap() < 1e-5);
            let e = angular_error(&g, &GazeVec::from_vector(-v)).unwrap();
            prop_assert!((e - 180.0).abs() < 1e-5);
        }

        #[test]
        fn angle_matches_rotation(v in unit(), axis in unit(), ang in 0.0..3.1f64) {
            // oracle: rotating about an axis perpendicular to v turns it by exactly `ang`
            let perp = v.cross(&axis);
            prop_assume!(perp.norm() > 1e-3);
            let r = Rotation3::from_axis_angle(&AxisAngle::from_axis(perp, ang));
            let a = GazeVec::<Ccs>::from_vector(v);
            let b = GazeVec::<Ccs>::from_vector(r.apply(&v));
            prop_assert!((angular_error(&a, &b).unwrap() - ang.to_degrees()).abs() < 1e-6);
        }

        #[test]
        fn pog_error_is_a_metric(
            a in (-1e3..1e3f64, -1e3..1e3f64),
            b in (-1e3..1e3f64, -1e3..1e3f64),
            c in (-1e3..1e3f64, -1e3..1e3f64),
        ) {
            let (a, b, c) = (
                PlanePoint::<Scs>::new(a.0, a.1),
                PlanePoint::<Scs>::new(b.0, b.1),
                PlanePoint::<Scs>::new(c.0, c.1),
            );
            let ab = pog_error(&a, &b).unwrap();
            prop_assert_eq!(ab, pog_error(&b, &a).unwrap());
            prop_assert!(ab <= pog_error(&a, &c).unwrap() + pog_error(&c, &b).unwrap() + 1e-9);
            prop_assert!(ab >= 0.0);
        }
    }

    fn screen() -> RigidTransform {
        let r = Rotation3::from_axis_angle(&AxisAngle::from_axis(Vector3::x(), 0.2));
        RigidTransform::new(r, Vector3::new(150.0, -20.0, 10.0)).unwrap()
    }

    #[test]
    fn oracle_has_zero_error() {
        let cfg = SceneConfig::default();
        let subjects = synth::make_subjects(&cfg, 4);
        let samples = synth::generate_general(&cfg, &subjects, 25).unwrap();
        let oracle = Oracle(samples.clone());
        let t = screen();
        let rep = evaluate(&oracle, &samples, &cfg.intrinsics, Some(&t)).unwrap();
        assert_eq!(rep.subjects.len(), 4);
        assert_eq!(rep.overall.count, 100);
        let o = &rep.overall;
        for v in [o.g_n_mean_deg, o.g_o_mean_deg, o.pogz_mean_mm, o.pog_mean_mm.unwrap()] {
            assert!(v < 1e-5, "{v}");
        }
        assert!(rep.subjects.iter().all(|r| r.count == 25));
    }

    #[test]
    fn subject_means_average_to_overall() {
        let cfg = SceneConfig::default();
        let subjects = synth::make_subjects(&cfg, 5);
        let samples = synth::generate_general(&cfg, &subjects, 40).unwrap();
        let model = crate::model::MageModel::new(Default::default()).unwrap();
        let rep = evaluate(&model, &samples, &cfg.intrinsics, None).unwrap();
        let m = rep.subjects.iter().map(|r| r.g_n_mean_deg).sum::<f64>() / 5.0;
        assert!((m - rep.overall.g_n_mean_deg).abs() < 1e-9);
        let m = rep.subjects.iter().map(|r| r.pogz_mean_mm).sum::<f64>() / 5.0;
        assert!((m - rep.overall.pogz_mean_mm).abs() < 1e-9);
        assert!(rep.overall.pog_mean_mm.is_none());
        assert!(rep.to_csv().lines().last().unwrap().ends_with(",NA"));
        assert!(rep.to_string().contains("N/A"));
        assert_eq!(rep.to_csv().lines().count(), 7);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let model = crate::model::MageModel::new(Default::default()).unwrap();
        assert_eq!(
            evaluate(&model, &[], &CameraIntrinsics::standard(), None),
            Err(MetricsError::EmptyDataset)
        );
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }
}
