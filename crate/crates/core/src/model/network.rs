//! Layers, parameters, forward pass and reverse-mode gradients.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EulerGaze, ModelError, MultiTaskOutput, Task};
use crate::pogz::PlanePoint;
use crate::synth::FEATURE_DIM;

pub const GAZE_IN: Range<usize> = 0..2;
pub const POSE_IN: Range<usize> = 2..4;
pub const BOX_IN: Range<usize> = 4..7;

const LN_2: f64 = std::f64::consts::LN_2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub embed: usize,
    /// Hidden width of each decoder head; 0 makes every head a single
    /// affine map.
    pub head_hidden: usize,
    /// PoGz head outputs are multiplied by this (mm).
    pub pogz_scale_mm: f64,
    /// Depth at zero raw head output (mm).
    pub depth_scale_mm: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            embed: 32,
            head_hidden: 32,
            pogz_scale_mm: 100.0,
            depth_scale_mm: 600.0,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden == 0 || self.embed == 0 {
            return Err(ModelError::Config("layer widths must be positive".into()));
        }
        if !(self.pogz_scale_mm > 0.0 && self.depth_scale_mm > 0.0) {
            return Err(ModelError::Config("output scales must be positive".into()));
        }
        Ok(())
    }

    fn head_depth(&self) -> usize {
        if self.head_hidden == 0 {
            1
        } else {
            2
        }
    }

    pub fn layer_count(&self) -> usize {
        ENCODER_LAYERS + 5 * self.head_depth()
    }

    /// Layer indices making up the decoder head of `t`.
    pub fn head_range(&self, t: Task) -> Range<usize> {
        let d = self.head_depth();
        let start = ENCODER_LAYERS + d * t as usize;
        start..start + d
    }

    pub fn layer_names(&self) -> Vec<String> {
        let mut names: Vec<String> = ENCODER_NAMES.iter().map(|s| s.to_string()).collect();
        for t in Task::ALL {
            if self.head_hidden == 0 {
                names.push(format!("head.{}", t.name()));
            } else {
                names.push(format!("head.{}.0", t.name()));
                names.push(format!("head.{}.1", t.name()));
            }
        }
        names
    }
}

/// Affine layer `y = W x + b`, `W` row-major `rows x cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            w: vec![0.0; rows * cols],
            b: vec![0.0; rows],
        }
    }

    fn xavier<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        Self {
            rows,
            cols,
            w: (0..rows * cols).map(|_| rng.random_range(-a..a)).collect(),
            b: vec![0.0; rows],
        }
    }

    fn forward(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        for (i, yi) in y.iter_mut().enumerate() {
            let row = &self.w[i * self.cols..(i + 1) * self.cols];
            *yi = self.b[i] + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>();
        }
    }

    /// Accumulate `dy x^T` and `dy` into `grad`; add `W^T dy` into `dx`.
    fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Dense, dx: Option<&mut [f64]>) {
        for (i, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.b[i] += g;
            let row = &mut grad.w[i * self.cols..(i + 1) * self.cols];
            for (r, xj) in row.iter_mut().zip(x) {
                *r += g * xj;
            }
        }
        if let Some(dx) = dx {
            for (i, &g) in dy.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let row = &self.w[i * self.cols..(i + 1) * self.cols];
                for (d, w) in dx.iter_mut().zip(row) {
                    *d += g * w;
                }
            }
        }
    }

    fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.w.iter().chain(self.b.iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w.iter_mut().chain(self.b.iter_mut())
    }
}

/// Encoder and fusion slots; decoder heads follow them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    GazeEnc0 = 0,
    GazeEnc1,
    PoseEnc0,
    PoseEnc1,
    BoxEnc0,
    BoxEnc1,
    Fusion,
}

pub const ENCODER_LAYERS: usize = 7;

const ENCODER_NAMES: [&str; ENCODER_LAYERS] = [
    "gaze_enc.0",
    "gaze_enc.1",
    "pose_enc.0",
    "pose_enc.1",
    "box_enc.0",
    "box_enc.1",
    "fusion",
];

fn head_outputs(t: Task) -> usize {
    if t == Task::FaceOrigin {
        1
    } else {
        2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MageModel {
    pub config: ModelConfig,
    pub layers: Vec<Dense>,
}

/// Gradient of the loss with respect to the decoded outputs of one sample.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct HeadGrad {
    pub g_n: [f64; 2],
    pub g_o: [f64; 2],
    /// With respect to the PoGz in mm.
    pub pogz: [f64; 2],
    pub r_on: [f64; 2],
    /// With respect to the decoded depth in mm.
    pub face_depth: f64,
}

/// Activations kept from the forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    input: [f64; FEATURE_DIM],
    gaze_h: Vec<f64>,
    dir: Vec<f64>,
    pose_h: Vec<f64>,
    box_h: Vec<f64>,
    // pose and box embeddings, concatenated (fusion input)
    pose_box: Vec<f64>,
    pos: Vec<f64>,
    // [dir, pos]
    both: Vec<f64>,
    // hidden layer of each head, empty for affine heads
    head_h: [Vec<f64>; 5],
    raw_depth: f64,
    pub output: MultiTaskOutput,
}

impl Trace {
    fn new(cfg: &ModelConfig) -> Self {
        let (h, e) = (cfg.hidden, cfg.embed);
        Self {
            input: [0.0; FEATURE_DIM],
            gaze_h: vec![0.0; h],
            dir: vec![0.0; e],
            pose_h: vec![0.0; h],
            box_h: vec![0.0; h],
            pose_box: vec![0.0; 2 * e],
            pos: vec![0.0; e],
            both: vec![0.0; 2 * e],
            head_h: std::array::from_fn(|_| vec![0.0; cfg.head_hidden]),
            raw_depth: 0.0,
            output: MultiTaskOutput {
                g_n: EulerGaze::default(),
                g_o: EulerGaze::default(),
                pogz: PlanePoint::new(0.0, 0.0),
                r_on: [0.0; 2],
                face_depth: 0.0,
            },
        }
    }

    /// What each head reads.
    fn head_input(&self, t: Task) -> &[f64] {
        match t {
            Task::GazeNormalized => &self.dir,
            Task::GazeOriginal | Task::Pogz | Task::Rotation => &self.both,
            Task::FaceOrigin => &self.pos,
        }
    }
}

fn tanh_in_place(v: &mut [f64]) {
    for x in v {
        *x = x.tanh();
    }
}

fn tanh_back(d: &mut [f64], y: &[f64]) {
    for (d, y) in d.iter_mut().zip(y) {
        *d *= 1.0 - y * y;
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl MageModel {
    /// Xavier-uniform weights, zero biases.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let layers = Self::shapes(&config)
            .into_iter()
            .map(|(r, c)| Dense::xavier(r, c, &mut rng))
            .collect();
        Ok(Self { config, layers })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let layers = Self::shapes(&config)
            .into_iter()
            .map(|(r, c)| Dense::zeros(r, c))
            .collect();
        Ok(Self { config, layers })
    }

    fn shapes(cfg: &ModelConfig) -> Vec<(usize, usize)> {
        let (h, e) = (cfg.hidden, cfg.embed);
        let mut s = vec![
            (h, GAZE_IN.len()),
            (e, h),
            (h, POSE_IN.len()),
            (e, h),
            (h, BOX_IN.len()),
            (e, h),
            (e, 2 * e),
        ];
        for t in Task::ALL {
            let input = match t {
                Task::GazeNormalized | Task::FaceOrigin => e,
                _ => 2 * e,
            };
            if cfg.head_hidden == 0 {
                s.push((head_outputs(t), input));
            } else {
                s.push((cfg.head_hidden, input));
                s.push((head_outputs(t), cfg.head_hidden));
            }
        }
        s
    }

    pub fn layer(&self, l: Layer) -> &Dense {
        &self.layers[l as usize]
    }

    pub fn layer_mut(&mut self, l: Layer) -> &mut Dense {
        &mut self.layers[l as usize]
    }

    /// Layers of the decoder head of `t`.
    pub fn head(&self, t: Task) -> &[Dense] {
        &self.layers[self.config.head_range(t)]
    }

    pub fn head_mut(&mut self, t: Task) -> &mut [Dense] {
        let r = self.config.head_range(t);
        &mut self.layers[r]
    }

    /// The layer producing the head's outputs.
    pub fn head_out_mut(&mut self, t: Task) -> &mut Dense {
        self.head_mut(t).last_mut().expect("heads are never empty")
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    /// Zero-valued gradient buffer of the same shape.
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.rows, l.cols))
                .collect(),
        }
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(Dense::values)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(Dense::values_mut)
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    fn check_features(features: &[f64]) -> Result<[f64; FEATURE_DIM], ModelError> {
        features.try_into().map_err(|_| ModelError::Shape {
            expected: FEATURE_DIM,
            got: features.len(),
        })
    }

    pub fn trace(&self) -> Trace {
        Trace::new(&self.config)
    }

    /// Forward pass recording activations into `t`.
    pub fn forward_into(&self, features: &[f64], t: &mut Trace) -> Result<(), ModelError> {
        t.input = Self::check_features(features)?;
        let e = self.config.embed;
        let l = &self.layers;

        l[Layer::GazeEnc0 as usize].forward(&t.input[GAZE_IN], &mut t.gaze_h);
        tanh_in_place(&mut t.gaze_h);
        l[Layer::GazeEnc1 as usize].forward(&t.gaze_h, &mut t.dir);
        tanh_in_place(&mut t.dir);

        l[Layer::PoseEnc0 as usize].forward(&t.input[POSE_IN], &mut t.pose_h);
        tanh_in_place(&mut t.pose_h);
        l[Layer::PoseEnc1 as usize].forward(&t.pose_h, &mut t.pose_box[..e]);
        l[Layer::BoxEnc0 as usize].forward(&t.input[BOX_IN], &mut t.box_h);
        tanh_in_place(&mut t.box_h);
        l[Layer::BoxEnc1 as usize].forward(&t.box_h, &mut t.pose_box[e..]);
        tanh_in_place(&mut t.pose_box);

        l[Layer::Fusion as usize].forward(&t.pose_box, &mut t.pos);
        tanh_in_place(&mut t.pos);

        t.both[..e].copy_from_slice(&t.dir);
        t.both[e..].copy_from_slice(&t.pos);
        self.decode(t);
        Ok(())
    }

    fn head_forward(&self, task: Task, t: &mut Trace) -> [f64; 2] {
        let r = self.config.head_range(task);
        let mut y = [0.0; 2];
        let n = head_outputs(task);
        if r.len() == 1 {
            self.layers[r.start].forward(t.head_input(task), &mut y[..n]);
        } else {
            let mut h = std::mem::take(&mut t.head_h[task as usize]);
            self.layers[r.start].forward(t.head_input(task), &mut h);
            tanh_in_place(&mut h);
            self.layers[r.start + 1].forward(&h, &mut y[..n]);
            t.head_h[task as usize] = h;
        }
        y
    }

    /// Recompute the heads from the embeddings already held in `t`.
    pub fn decode(&self, t: &mut Trace) {
        let s = self.config.pogz_scale_mm;
        t.output.g_n = EulerGaze::from_array(self.head_forward(Task::GazeNormalized, t));
        t.output.g_o = EulerGaze::from_array(self.head_forward(Task::GazeOriginal, t));
        let p = self.head_forward(Task::Pogz, t);
        t.output.pogz = PlanePoint::new(s * p[0], s * p[1]);
        t.output.r_on = self.head_forward(Task::Rotation, t);
        t.raw_depth = self.head_forward(Task::FaceOrigin, t)[0];
        t.output.face_depth = self.config.depth_scale_mm * softplus(t.raw_depth) / LN_2;
    }

    pub fn forward(&self, features: &[f64]) -> Result<MultiTaskOutput, ModelError> {
        let mut t = self.trace();
        self.forward_into(features, &mut t)?;
        Ok(t.output)
    }

    fn head_backward(&self, task: Task, t: &Trace, dy: &[f64], grad: &mut MageModel, dx: &mut [f64]) {
        let r = self.config.head_range(task);
        let x = t.head_input(task);
        if r.len() == 1 {
            self.layers[r.start].backward(x, dy, &mut grad.layers[r.start], Some(dx));
        } else {
            let h = &t.head_h[task as usize];
            let mut dh = vec![0.0; h.len()];
            self.layers[r.start + 1].backward(h, dy, &mut grad.layers[r.start + 1], Some(&mut dh));
            tanh_back(&mut dh, h);
            self.layers[r.start].backward(x, &dh, &mut grad.layers[r.start], Some(dx));
        }
    }

    /// Accumulate parameter gradients for one traced sample into `grad`.
    pub fn backward(&self, t: &Trace, dout: &HeadGrad, grad: &mut MageModel) {
        self.backward_to(t, dout, grad, true)
    }

    /// As [`backward`](Self::backward); `through_encoders = false` stops at
    /// the heads and leaves encoder and fusion gradients untouched.
    pub fn backward_to(&self, t: &Trace, dout: &HeadGrad, grad: &mut MageModel, through_encoders: bool) {
        let e = self.config.embed;
        let l = &self.layers;

        let mut d_dir = vec![0.0; e];
        let mut d_both = vec![0.0; 2 * e];
        let mut d_pos = vec![0.0; e];

        let s = self.config.pogz_scale_mm;
        let raw_pogz = [s * dout.pogz[0], s * dout.pogz[1]];
        let raw_depth = [dout.face_depth * self.config.depth_scale_mm * sigmoid(t.raw_depth) / LN_2];

        self.head_backward(Task::GazeNormalized, t, &dout.g_n, grad, &mut d_dir);
        self.head_backward(Task::GazeOriginal, t, &dout.g_o, grad, &mut d_both);
        self.head_backward(Task::Pogz, t, &raw_pogz, grad, &mut d_both);
        self.head_backward(Task::Rotation, t, &dout.r_on, grad, &mut d_both);
        self.head_backward(Task::FaceOrigin, t, &raw_depth, grad, &mut d_pos);
        if !through_encoders {
            return;
        }
        let g = &mut grad.layers;

        for i in 0..e {
            d_dir[i] += d_both[i];
            d_pos[i] += d_both[e + i];
        }

        // positional branch
        tanh_back(&mut d_pos, &t.pos);
        let mut d_pose_box = vec![0.0; 2 * e];
        l[Layer::Fusion as usize].backward(&t.pose_box, &d_pos, &mut g[Layer::Fusion as usize], Some(&mut d_pose_box));
        tanh_back(&mut d_pose_box, &t.pose_box);
        let mut d_h = vec![0.0; self.config.hidden];
        l[Layer::PoseEnc1 as usize].backward(&t.pose_h, &d_pose_box[..e], &mut g[Layer::PoseEnc1 as usize], Some(&mut d_h));
        tanh_back(&mut d_h, &t.pose_h);
        l[Layer::PoseEnc0 as usize].backward(&t.input[POSE_IN], &d_h, &mut g[Layer::PoseEnc0 as usize], None);

        d_h.iter_mut().for_each(|v| *v = 0.0);
        l[Layer::BoxEnc1 as usize].backward(&t.box_h, &d_pose_box[e..], &mut g[Layer::BoxEnc1 as usize], Some(&mut d_h));
        tanh_back(&mut d_h, &t.box_h);
        l[Layer::BoxEnc0 as usize].backward(&t.input[BOX_IN], &d_h, &mut g[Layer::BoxEnc0 as usize], None);

        // directional branch
        tanh_back(&mut d_dir, &t.dir);
        d_h.iter_mut().for_each(|v| *v = 0.0);
        l[Layer::GazeEnc1 as usize].backward(&t.gaze_h, &d_dir, &mut g[Layer::GazeEnc1 as usize], Some(&mut d_h));
        tanh_back(&mut d_h, &t.gaze_h);
        l[Layer::GazeEnc0 as usize].backward(&t.input[GAZE_IN], &d_h, &mut g[Layer::GazeEnc0 as usize], None);
    }

    pub fn to_json(&self) -> String {
        let layers = self
            .config
            .layer_names()
            .into_iter()
            .zip(&self.layers)
            .map(|(name, l)| {
                (
                    name,
                    LayerJson {
                        weight: TensorJson {
                            shape: vec![l.rows, l.cols],
                            data: l.w.clone(),
                        },
                        bias: TensorJson {
                            shape: vec![l.rows],
                            data: l.b.clone(),
                        },
                    },
                )
            })
            .collect();
        serde_json::to_string(&ParamsJson {
            format: PARAMS_FORMAT.into(),
            version: PARAMS_VERSION,
            config: self.config.clone(),
            layers,
        })
        .expect("params serialize")
    }

    pub fn from_json(s: &str) -> Result<Self, ModelError> {
        let p: ParamsJson = serde_json::from_str(s).map_err(|e| ModelError::Params(e.to_string()))?;
        if p.format != PARAMS_FORMAT || p.version != PARAMS_VERSION {
            return Err(ModelError::Params(format!(
                "unsupported format {} v{}",
                p.format, p.version
            )));
        }
        let mut model = Self::zeros(p.config)?;
        let mut layers = p.layers;
        for (i, name) in model.config.layer_names().iter().enumerate() {
            let lj = layers
                .remove(name)
                .ok_or_else(|| ModelError::Params(format!("missing layer {name}")))?;
            let dst = &mut model.layers[i];
            if lj.weight.shape != [dst.rows, dst.cols]
                || lj.weight.data.len() != dst.w.len()
                || lj.bias.shape != [dst.rows]
                || lj.bias.data.len() != dst.b.len()
            {
                return Err(ModelError::Params(format!("shape mismatch in {name}")));
            }
            dst.w = lj.weight.data;
            dst.b = lj.bias.data;
        }
        if let Some(extra) = layers.keys().next() {
            return Err(ModelError::Params(format!("unknown layer {extra}")));
        }
        if !model.is_finite() {
            return Err(ModelError::Params("non-finite parameter".into()));
        }
        Ok(model)
    }
}

const PARAMS_FORMAT: &str = "mage-params";
const PARAMS_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorJson {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct LayerJson {
    weight: TensorJson,
    bias: TensorJson,
}

#[derive(Serialize, Deserialize)]
struct ParamsJson {
    format: String,
    version: u32,
    config: ModelConfig,
    layers: BTreeMap<String, LayerJson>,
}
