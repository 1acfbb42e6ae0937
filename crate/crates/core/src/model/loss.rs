//! Weighted multi-task L1 loss and its gradient with respect to the decoded
//! head outputs.
//!
//! Each task term is the mean absolute error over the task's components
//! (2 for the angle and plane tasks, 3 for the face point), averaged over the
//! samples that carry that label. Missing labels contribute exactly zero.

use serde::Serialize;

use super::network::HeadGrad;
use super::train::TrainSample;
use super::{EulerGaze, LossWeights, MultiTaskOutput, Task};
use crate::camera::{CameraIntrinsics, Pixel};
use crate::frame::{Ccs, Point3};
use crate::pogz::PlanePoint;
use crate::synth::Labels;

/// Supervision for one sample. `None` masks the task.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Targets {
    pub g_n: Option<EulerGaze>,
    pub g_o: Option<EulerGaze>,
    pub pogz: Option<PlanePoint<Ccs>>,
    pub r_on: Option<[f64; 2]>,
    pub o_face: Option<Point3<Ccs>>,
}

impl Targets {
    pub fn full(l: &Labels) -> Self {
        Self {
            g_n: Some(l.g_n),
            g_o: Some(l.g_o),
            pogz: Some(l.pogz),
            r_on: Some(l.r_on),
            o_face: Some(l.o_face),
        }
    }

    pub fn has(&self, t: Task) -> bool {
        match t {
            Task::GazeNormalized => self.g_n.is_some(),
            Task::GazeOriginal => self.g_o.is_some(),
            Task::Pogz => self.pogz.is_some(),
            Task::Rotation => self.r_on.is_some(),
            Task::FaceOrigin => self.o_face.is_some(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossBreakdown {
    /// `sum_t w_t * terms[t]`.
    pub total: f64,
    /// Unweighted per-task terms, in [`Task::ALL`] order.
    pub terms: [f64; 5],
    /// Samples contributing to each term.
    pub counts: [usize; 5],
}

impl LossBreakdown {
    pub fn term(&self, t: Task) -> f64 {
        self.terms[t as usize]
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn l1<const N: usize>(pred: [f64; N], target: [f64; N], grad: &mut [f64; N]) -> f64 {
    let mut s = 0.0;
    for i in 0..N {
        let r = pred[i] - target[i];
        s += r.abs();
        grad[i] = sign(r) / N as f64;
    }
    s / N as f64
}

/// Face point decoded from the predicted depth along the box-center ray.
pub fn face_point(intr: &CameraIntrinsics, center: Pixel, depth: f64) -> [f64; 3] {
    let (ux, uy) = ray(intr, center);
    [ux * depth, uy * depth, depth]
}

fn ray(intr: &CameraIntrinsics, center: Pixel) -> (f64, f64) {
    (
        (center.x - intr.cx) / intr.focal_px,
        (center.y - intr.cy) / intr.focal_px,
    )
}

/// Per-task unweighted terms of one sample and their output gradients.
/// Masked tasks report 0 with zero gradient.
pub fn sample_terms(
    out: &MultiTaskOutput,
    t: &Targets,
    center: Pixel,
    intr: &CameraIntrinsics,
) -> ([f64; 5], HeadGrad) {
    let mut terms = [0.0; 5];
    let mut g = HeadGrad::default();
    if let Some(y) = t.g_n {
        terms[0] = l1(out.g_n.to_array(), y.to_array(), &mut g.g_n);
    }
    if let Some(y) = t.g_o {
        terms[1] = l1(out.g_o.to_array(), y.to_array(), &mut g.g_o);
    }
    if let Some(y) = t.pogz {
        terms[2] = l1(out.pogz.to_array(), y.to_array(), &mut g.pogz);
    }
    if let Some(y) = t.r_on {
        terms[3] = l1(out.r_on, y, &mut g.r_on);
    }
    if let Some(y) = t.o_face {
        let mut gp = [0.0; 3];
        terms[4] = l1(face_point(intr, center, out.face_depth), y.to_array(), &mut gp);
        let (ux, uy) = ray(intr, center);
        g.face_depth = gp[0] * ux + gp[1] * uy + gp[2];
    }
    (terms, g)
}

/// Batch loss and per-sample gradients of the total with respect to the
/// decoded outputs.
pub fn loss_and_grad(
    outputs: &[MultiTaskOutput],
    samples: &[&TrainSample],
    intr: &CameraIntrinsics,
    w: &LossWeights,
) -> (LossBreakdown, Vec<HeadGrad>) {
    assert_eq!(outputs.len(), samples.len());
    let mut counts = [0usize; 5];
    for s in samples {
        for task in Task::ALL {
            counts[task as usize] += s.targets.has(task) as usize;
        }
    }
    let scale: [f64; 5] = std::array::from_fn(|i| {
        if counts[i] == 0 {
            0.0
        } else {
            w.get(Task::ALL[i]) / counts[i] as f64
        }
    });

    let mut sums = [0.0; 5];
    let mut grads = Vec::with_capacity(samples.len());
    for (o, s) in outputs.iter().zip(samples) {
        let (terms, mut g) = sample_terms(o, &s.targets, s.bbox.center, intr);
        for i in 0..5 {
            sums[i] += terms[i];
        }
        for v in &mut g.g_n {
            *v *= scale[0];
        }
        for v in &mut g.g_o {
            *v *= scale[1];
        }
        for v in &mut g.pogz {
            *v *= scale[2];
        }
        for v in &mut g.r_on {
            *v *= scale[3];
        }
        g.face_depth *= scale[4];
        grads.push(g);
    }

    let terms: [f64; 5] = std::array::from_fn(|i| {
        if counts[i] == 0 {
            0.0
        } else {
            sums[i] / counts[i] as f64
        }
    });
    let total = Task::ALL
        .iter()
        .zip(&terms)
        .map(|(&t, v)| if w.get(t) == 0.0 { 0.0 } else { w.get(t) * v })
        .sum();
    (
        LossBreakdown {
            total,
            terms,
            counts,
        },
        grads,
    )
}

pub fn loss(
    outputs: &[MultiTaskOutput],
    samples: &[&TrainSample],
    intr: &CameraIntrinsics,
    w: &LossWeights,
) -> LossBreakdown {
    loss_and_grad(outputs, samples, intr, w).0
}
