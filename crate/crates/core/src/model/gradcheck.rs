//! Central finite-difference check of the analytic parameter gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::loss::{face_point, loss_and_grad, Targets};
use super::network::{MageModel, ModelConfig};
use super::train::{batch_gradient, predict_all, TrainSample};
use super::{EulerGaze, LossWeights, ModelError};
use crate::camera::{BoundingBox, CameraIntrinsics, Pixel};
use crate::frame::Point3;
use crate::pogz::PlanePoint;
use crate::synth::FEATURE_DIM;

/// Smallest |residual| allowed on any L1 component at the checked point.
pub const KINK_MARGIN: f64 = 1e-3;
pub const STEP: f64 = 1e-5;
/// Denominator floor for the relative error of near-zero gradients, per
/// unit of loss: the difference quotient cannot resolve gradients much
/// below `ulp(loss) / STEP`.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheck {
    pub restarts: usize,
    pub params_per_restart: usize,
    pub max_rel_error: f64,
    /// Index of the parameter with the largest error in the flat layout.
    pub worst_param: usize,
    /// Analytic and numeric values at `worst_param`.
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

fn random_sample<R: Rng>(rng: &mut R, intr: &CameraIntrinsics, with_face: bool) -> TrainSample {
    let mut features = [0.0; FEATURE_DIM];
    for f in &mut features[..4] {
        *f = rng.random_range(-0.6..0.6);
    }
    features[4] = rng.random_range(0.1..0.9);
    features[5] = rng.random_range(0.1..0.9);
    features[6] = rng.random_range(0.15..0.4);
    let center = Pixel::new(features[4] * intr.width as f64, features[5] * intr.height as f64);
    let mut a = || rng.random_range(-0.8..0.8);
    let targets = Targets {
        g_n: Some(EulerGaze::new(a(), a())),
        g_o: Some(EulerGaze::new(a(), a())),
        pogz: Some(PlanePoint::new(200.0 * a(), 200.0 * a())),
        r_on: Some([a(), a()]),
        o_face: with_face.then(|| Point3::new(300.0 * a(), 300.0 * a(), 600.0 + 200.0 * a())),
    };
    TrainSample {
        subject: 0,
        features,
        bbox: BoundingBox {
            center,
            side: features[6] * intr.width as f64,
        },
        targets,
    }
}

fn clear_of_kinks(model: &MageModel, batch: &[&TrainSample], intr: &CameraIntrinsics) -> bool {
    let outs = predict_all(model, batch);
    outs.iter().zip(batch).all(|(o, s)| {
        let t = &s.targets;
        let mut r: Vec<f64> = Vec::new();
        if let Some(y) = t.g_n {
            r.extend([o.g_n.yaw - y.yaw, o.g_n.pitch - y.pitch]);
        }
        if let Some(y) = t.g_o {
            r.extend([o.g_o.yaw - y.yaw, o.g_o.pitch - y.pitch]);
        }
        if let Some(y) = t.pogz {
            r.extend([o.pogz.x - y.x, o.pogz.y - y.y]);
        }
        if let Some(y) = t.r_on {
            r.extend([o.r_on[0] - y[0], o.r_on[1] - y[1]]);
        }
        if let Some(y) = t.o_face {
            let p = face_point(intr, s.bbox.center, o.face_depth);
            r.extend([p[0] - y.x(), p[1] - y.y(), p[2] - y.z()]);
        }
        r.iter().all(|v| v.abs() > KINK_MARGIN)
    })
}

fn total(model: &MageModel, batch: &[&TrainSample], intr: &CameraIntrinsics, w: &LossWeights) -> f64 {
    loss_and_grad(&predict_all(model, batch), batch, intr, w).0.total
}

/// Compare analytic and central-difference gradients over every parameter,
/// on `restarts` random models and batches of `batch_size`.
pub fn gradcheck(
    restarts: usize,
    batch_size: usize,
    seed: u64,
    config: &ModelConfig,
) -> Result<GradCheck, ModelError> {
    let intr = CameraIntrinsics::standard();
    let w = LossWeights::default();
    let mut out = GradCheck {
        restarts,
        params_per_restart: 0,
        max_rel_error: 0.0,
        worst_param: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..restarts {
        let (mut model, samples) = loop {
            let model = MageModel::new(ModelConfig {
                init_seed: rng.random(),
                ..config.clone()
            })?;
            // every other sample lacks a face label, exercising the mask
            let samples: Vec<TrainSample> = (0..batch_size)
                .map(|i| random_sample(&mut rng, &intr, i % 2 == 0))
                .collect();
            let refs: Vec<&TrainSample> = samples.iter().collect();
            if clear_of_kinks(&model, &refs, &intr) {
                break (model, samples);
            }
        };
        let batch: Vec<&TrainSample> = samples.iter().collect();
        let mut grad = model.zeros_like();
        batch_gradient(&model, &batch, &intr, &w, &[], &mut grad);
        let analytic: Vec<f64> = grad.values().copied().collect();
        let params: Vec<f64> = model.values().copied().collect();
        out.params_per_restart = analytic.len();
        let floor = REL_FLOOR * total(&model, &batch, &intr, &w).abs().max(1.0);

        for (k, &a) in analytic.iter().enumerate() {
            let p0 = params[k];
            set(&mut model, k, p0 + STEP);
            let up = total(&model, &batch, &intr, &w);
            set(&mut model, k, p0 - STEP);
            let down = total(&model, &batch, &intr, &w);
            set(&mut model, k, p0);
            let n = (up - down) / (2.0 * STEP);
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
            if rel > out.max_rel_error {
                out.max_rel_error = rel;
                out.worst_param = k;
                out.worst_analytic = a;
                out.worst_numeric = n;
            }
        }
    }
    Ok(out)
}

fn set(model: &mut MageModel, k: usize, v: f64) {
    let mut i = k;
    for l in &mut model.layers {
        if i < l.w.len() {
            l.w[i] = v;
            return;
        }
        i -= l.w.len();
        if i < l.b.len() {
            l.b[i] = v;
            return;
        }
        i -= l.b.len();
    }
    panic!("parameter index {k} out of range");
}
