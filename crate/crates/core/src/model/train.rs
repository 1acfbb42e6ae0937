//! Mini-batch training, calibration fine-tuning and data plumbing around them.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::loss::{loss_and_grad, LossBreakdown, Targets};
use super::network::{MageModel, ModelConfig, Trace, ENCODER_LAYERS};
use super::{euler_from_vec, vec_from_euler, LossWeights, ModelError, MultiTaskOutput, Task};
use crate::calibration::CalibrationRecord;
use crate::camera::{BoundingBox, CameraIntrinsics};
use crate::easy_norm;
use crate::frame::Ncs;
use crate::metrics::angular_error;
use crate::synth::{GazeSample, FEATURE_DIM};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub subject: u32,
    pub features: [f64; FEATURE_DIM],
    pub bbox: BoundingBox,
    pub targets: Targets,
}

impl From<&GazeSample> for TrainSample {
    fn from(s: &GazeSample) -> Self {
        Self {
            subject: s.subject,
            features: s.features,
            bbox: s.bbox,
            targets: Targets::full(&s.labels),
        }
    }
}

impl TrainSample {
    /// Lens-fixation frame: supervises both gaze heads. The normalized label
    /// comes from the same box-only normalization the general data uses; the
    /// depth-dependent tasks stay masked.
    pub fn from_calibration(r: &CalibrationRecord, intr: &CameraIntrinsics) -> Self {
        let rot = easy_norm::norm_rotation(intr, r.bbox.center);
        let g_n = easy_norm::normalize_gaze(&r.g_o, &rot);
        Self {
            subject: r.subject,
            features: r.features,
            bbox: r.bbox,
            targets: Targets {
                g_n: euler_from_vec(&g_n).ok(),
                g_o: euler_from_vec(&r.g_o).ok(),
                ..Targets::default()
            },
        }
    }
}

/// Parameters that calibration fine-tuning may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FineTuneScope {
    All,
    /// Decoder heads, weights and biases.
    Heads,
    /// Decoder head biases only: a per-subject output offset.
    HeadBias,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Drives both weight init and batch order.
    pub seed: u64,
    pub weights: LossWeights,
    /// Heads whose parameters are never updated.
    pub frozen: Vec<Task>,
    pub finetune_lr: f64,
    pub finetune_epochs: usize,
    pub finetune_scope: FineTuneScope,
    pub calibration_fraction: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 128,
            epochs: 100,
            seed: 0,
            weights: LossWeights::default(),
            frozen: Vec::new(),
            finetune_lr: 1e-5,
            finetune_epochs: 10_000,
            finetune_scope: FineTuneScope::HeadBias,
            calibration_fraction: 1.0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.lr.is_finite() && self.lr >= 0.0) || !(self.finetune_lr.is_finite() && self.finetune_lr >= 0.0) {
            return Err(ModelError::Config("learning rates must be finite and non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(ModelError::Config("batch size must be at least 1".into()));
        }
        if !(self.calibration_fraction > 0.0 && self.calibration_fraction <= 1.0) {
            return Err(ModelError::Config(format!(
                "calibration fraction {} not in (0, 1]",
                self.calibration_fraction
            )));
        }
        self.weights.validate()?;
        self.model.validate()
    }

    /// Zero the task's weight and freeze its head.
    pub fn ablate(mut self, t: Task) -> Self {
        self.weights.set(t, 0.0);
        if !self.frozen.contains(&t) {
            self.frozen.push(t);
        }
        self
    }

    /// Per-layer freeze flags for this config's model layout.
    pub fn frozen_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.model.layer_count()];
        for &t in &self.frozen {
            m[self.model.head_range(t)].iter_mut().for_each(|f| *f = true);
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    /// NaN without a validation split.
    pub val_loss: f64,
    pub val_angular_deg: f64,
}

/// Last tenth of each subject's samples (in order) is held out.
pub fn split_validation(samples: &[TrainSample]) -> (Vec<TrainSample>, Vec<TrainSample>) {
    let mut per: BTreeMap<u32, usize> = BTreeMap::new();
    for s in samples {
        *per.entry(s.subject).or_default() += 1;
    }
    let mut seen: BTreeMap<u32, usize> = BTreeMap::new();
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for s in samples {
        let k = seen.entry(s.subject).or_default();
        let n = per[&s.subject];
        if *k >= n - n / 10 {
            val.push(s.clone());
        } else {
            train.push(s.clone());
        }
        *k += 1;
    }
    (train, val)
}

/// Cross-subject folds: subject `id % k == i` is the held-out part of fold `i`.
pub fn subject_folds(samples: &[TrainSample], k: u32) -> Vec<(Vec<TrainSample>, Vec<TrainSample>)> {
    (0..k)
        .map(|i| {
            samples
                .iter()
                .cloned()
                .partition::<Vec<_>, _>(|s| s.subject % k != i)
        })
        .collect()
}

/// The first `fraction` of each subject's records, at least one.
pub fn calibration_subset<T: Clone>(records: &[T], subject: impl Fn(&T) -> u32, fraction: f64) -> Vec<T> {
    let mut per: BTreeMap<u32, usize> = BTreeMap::new();
    for r in records {
        *per.entry(subject(r)).or_default() += 1;
    }
    let mut seen: BTreeMap<u32, usize> = BTreeMap::new();
    records
        .iter()
        .filter(|r| {
            let id = subject(r);
            let keep = ((per[&id] as f64 * fraction).round() as usize).max(1);
            let k = seen.entry(id).or_default();
            *k += 1;
            *k <= keep
        })
        .cloned()
        .collect()
}

pub fn predict_all(model: &MageModel, samples: &[&TrainSample]) -> Vec<MultiTaskOutput> {
    let mut t = model.trace();
    samples
        .iter()
        .map(|s| {
            model.forward_into(&s.features, &mut t).expect("fixed-size features");
            t.output
        })
        .collect()
}

fn encoders_frozen(frozen: &[bool]) -> bool {
    frozen.len() > ENCODER_LAYERS && frozen[..ENCODER_LAYERS].iter().all(|&f| f)
}

/// Loss over `batch` and its gradient with respect to every parameter.
/// Frozen heads get an exactly zero gradient.
pub fn batch_gradient(
    model: &MageModel,
    batch: &[&TrainSample],
    intr: &CameraIntrinsics,
    w: &LossWeights,
    frozen: &[bool],
    grad: &mut MageModel,
) -> LossBreakdown {
    let mut traces: Vec<Trace> = (0..batch.len()).map(|_| model.trace()).collect();
    for (s, t) in batch.iter().zip(traces.iter_mut()) {
        model.forward_into(&s.features, t).expect("fixed-size features");
    }
    let refs: Vec<&Trace> = traces.iter().collect();
    traced_gradient(model, &refs, batch, intr, w, frozen, grad)
}

fn traced_gradient(
    model: &MageModel,
    traces: &[&Trace],
    batch: &[&TrainSample],
    intr: &CameraIntrinsics,
    w: &LossWeights,
    frozen: &[bool],
    grad: &mut MageModel,
) -> LossBreakdown {
    grad.values_mut().for_each(|v| *v = 0.0);
    if batch.is_empty() {
        return LossBreakdown::default();
    }
    let outputs: Vec<MultiTaskOutput> = traces.iter().map(|t| t.output).collect();
    let (b, dout) = loss_and_grad(&outputs, batch, intr, w);
    let deep = !encoders_frozen(frozen);
    for (t, d) in traces.iter().zip(&dout) {
        model.backward_to(t, d, grad, deep);
    }
    for (i, l) in grad.layers.iter_mut().enumerate() {
        if frozen.get(i).copied().unwrap_or(false) {
            l.values_mut().for_each(|v| *v = 0.0);
        }
    }
    b
}

/// Mean g_n angular error in degrees over samples carrying a g_n label.
pub fn gaze_n_error(model: &MageModel, samples: &[&TrainSample]) -> f64 {
    let outs = predict_all(model, samples);
    let errs: Vec<f64> = outs
        .iter()
        .zip(samples)
        .filter_map(|(o, s)| {
            let y = s.targets.g_n?;
            angular_error(&vec_from_euler::<Ncs>(o.g_n), &vec_from_euler::<Ncs>(y)).ok()
        })
        .collect();
    if errs.is_empty() {
        f64::NAN
    } else {
        errs.iter().sum::<f64>() / errs.len() as f64
    }
}

fn eval_stats(
    model: &MageModel,
    epoch: usize,
    train_loss: f64,
    val: &[&TrainSample],
    intr: &CameraIntrinsics,
    w: &LossWeights,
) -> EpochStats {
    let (val_loss, val_angular_deg) = if val.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        let outs = predict_all(model, val);
        (loss_and_grad(&outs, val, intr, w).0.total, gaze_n_error(model, val))
    };
    EpochStats {
        epoch,
        train_loss,
        val_loss,
        val_angular_deg,
    }
}

struct Run<'a> {
    lr: f64,
    epochs: usize,
    batch_size: usize,
    seed: u64,
    weights: &'a LossWeights,
    frozen: Vec<bool>,
    bias_only: bool,
}

fn run(
    mut model: MageModel,
    r: &Run,
    train: &[&TrainSample],
    val: &[&TrainSample],
    intr: &CameraIntrinsics,
) -> Result<(MageModel, Vec<EpochStats>), ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(r.seed);
    let mut opt = Adam::new(&model, r.lr);
    let mut grad = model.zeros_like();
    let mut order: Vec<usize> = (0..train.len()).collect();

    let init = {
        let outs = predict_all(&model, train);
        loss_and_grad(&outs, train, intr, r.weights).0.total
    };
    let mut history = vec![eval_stats(&model, 0, init, val, intr, r.weights)];

    // with the encoders fixed the embeddings never change, so only the heads rerun
    let mut cache: Vec<Trace> = Vec::new();
    if encoders_frozen(&r.frozen) {
        cache = train
            .iter()
            .map(|s| {
                let mut t = model.trace();
                model.forward_into(&s.features, &mut t).expect("fixed-size features");
                t
            })
            .collect();
    }

    let mut step = 0;
    for epoch in 1..=r.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut n) = (0.0, 0usize);
        for chunk in order.chunks(r.batch_size) {
            let batch: Vec<&TrainSample> = chunk.iter().map(|&i| train[i]).collect();
            let b = if cache.is_empty() {
                batch_gradient(&model, &batch, intr, r.weights, &r.frozen, &mut grad)
            } else {
                for &i in chunk {
                    model.decode(&mut cache[i]);
                }
                let traces: Vec<&Trace> = chunk.iter().map(|&i| &cache[i]).collect();
                traced_gradient(&model, &traces, &batch, intr, r.weights, &r.frozen, &mut grad)
            };
            if r.bias_only {
                grad.layers.iter_mut().for_each(|l| l.w.iter_mut().for_each(|v| *v = 0.0));
            }
            step += 1;
            if !b.total.is_finite() || !grad.is_finite() {
                return Err(ModelError::Diverged {
                    epoch,
                    step,
                    loss: b.total,
                });
            }
            opt.step(&mut model, &grad, &r.frozen);
            sum += b.total * batch.len() as f64;
            n += batch.len();
        }
        if !model.is_finite() {
            return Err(ModelError::Diverged {
                epoch,
                step,
                loss: f64::NAN,
            });
        }
        let stats = eval_stats(&model, epoch, sum / n as f64, val, intr, r.weights);
        log::debug!(
            "epoch {epoch}: train {:.5} val {:.5} g_n {:.3} deg",
            stats.train_loss,
            stats.val_loss,
            stats.val_angular_deg
        );
        history.push(stats);
    }
    Ok((model, history))
}

/// Train from scratch on `samples`, holding out the last tenth of each
/// subject for validation. History row 0 is the untrained model.
pub fn train(
    cfg: &TrainConfig,
    samples: &[TrainSample],
    intr: &CameraIntrinsics,
) -> Result<(MageModel, Vec<EpochStats>), ModelError> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let (tr, va) = split_validation(samples);
    let model = MageModel::new(ModelConfig {
        init_seed: cfg.seed,
        ..cfg.model.clone()
    })?;
    train_split(model, cfg, &tr, &va, intr)
}

/// Continue training `model` on an explicit train/validation split.
pub fn train_split(
    model: MageModel,
    cfg: &TrainConfig,
    train: &[TrainSample],
    val: &[TrainSample],
    intr: &CameraIntrinsics,
) -> Result<(MageModel, Vec<EpochStats>), ModelError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let tr: Vec<&TrainSample> = train.iter().collect();
    let va: Vec<&TrainSample> = val.iter().collect();
    let r = Run {
        lr: cfg.lr,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        weights: &cfg.weights,
        frozen: cfg.frozen_mask(),
        bias_only: false,
    };
    run(model, &r, &tr, &va, intr)
}

/// Per-subject adaptation on calibration samples at the fine-tune learning
/// rate. An empty set returns the model unchanged.
pub fn fine_tune(
    model: &MageModel,
    cfg: &TrainConfig,
    calibration: &[TrainSample],
    intr: &CameraIntrinsics,
) -> Result<MageModel, ModelError> {
    cfg.validate()?;
    if calibration.is_empty() {
        return Ok(model.clone());
    }
    let tr: Vec<&TrainSample> = calibration.iter().collect();
    let mut frozen = cfg.frozen_mask();
    if cfg.finetune_scope != FineTuneScope::All {
        frozen[..ENCODER_LAYERS].iter_mut().for_each(|f| *f = true);
    }
    let r = Run {
        lr: cfg.finetune_lr,
        epochs: cfg.finetune_epochs,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        weights: &cfg.weights,
        frozen,
        bias_only: cfg.finetune_scope == FineTuneScope::HeadBias,
    };
    Ok(run(model.clone(), &r, &tr, &[], intr)?.0)
}

fn na(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.9}")
    } else {
        "NA".into()
    }
}

pub fn write_history_csv<W: Write>(mut w: W, history: &[EpochStats]) -> std::io::Result<()> {
    writeln!(w, "epoch,train_loss,val_loss,val_angular_deg")?;
    for h in history {
        writeln!(
            w,
            "{},{},{},{}",
            h.epoch,
            na(h.train_loss),
            na(h.val_loss),
            na(h.val_angular_deg)
        )?;
    }
    Ok(())
}

pub fn save_history(path: &Path, history: &[EpochStats]) -> std::io::Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_history_csv(f, history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{self, SceneConfig};

    fn data(n_subjects: u32, n: usize, seed: u64) -> (SceneConfig, Vec<TrainSample>) {
        let cfg = SceneConfig {
            seed,
            ..SceneConfig::default()
        };
        let subjects = synth::make_subjects(&cfg, n_subjects);
        let samples = synth::generate_general(&cfg, &subjects, n).unwrap();
        (cfg, samples.iter().map(TrainSample::from).collect())
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let (scene, s) = data(1, 1, 0);
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 1,
            ..TrainConfig::default()
        };
        let (m, hist) = train(&cfg, &s, &scene.intrinsics).unwrap();
        let init = MageModel::new(ModelConfig {
            init_seed: cfg.seed,
            ..cfg.model.clone()
        })
        .unwrap();
        assert_eq!(m, init);
        assert_eq!(hist.len(), 2);
        assert!(hist[0].val_loss.is_nan());
    }

    #[test]
    fn same_seed_same_params() {
        let (scene, s) = data(3, 40, 5);
        let cfg = TrainConfig {
            lr: 1e-3,
            epochs: 3,
            batch_size: 16,
            seed: 9,
            ..TrainConfig::default()
        };
        let (a, ha) = train(&cfg, &s, &scene.intrinsics).unwrap();
        let (b, hb) = train(&cfg, &s, &scene.intrinsics).unwrap();
        assert_eq!(a, b);
        assert_eq!(format!("{ha:?}"), format!("{hb:?}"));
        let (c, _) = train(&TrainConfig { seed: 10, ..cfg }, &s, &scene.intrinsics).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn training_reduces_loss() {
        let (scene, s) = data(4, 100, 1);
        let cfg = TrainConfig {
            lr: 3e-3,
            epochs: 10,
            batch_size: 32,
            ..TrainConfig::default()
        };
        let (_, h) = train(&cfg, &s, &scene.intrinsics).unwrap();
        assert!(h.last().unwrap().val_loss < 0.5 * h[0].val_loss, "{h:?}");
        assert!(h.last().unwrap().val_angular_deg < h[0].val_angular_deg);
    }

    #[test]
    fn frozen_head_keeps_its_init() {
        let (scene, s) = data(2, 30, 2);
        let cfg = TrainConfig {
            lr: 1e-2,
            epochs: 2,
            batch_size: 8,
            ..TrainConfig::default()
        }
        .ablate(Task::Pogz);
        assert_eq!(cfg.weights.pogz, 0.0);
        let (m, _) = train(&cfg, &s, &scene.intrinsics).unwrap();
        let init = MageModel::new(ModelConfig::default()).unwrap();
        assert_eq!(m.head(Task::Pogz), init.head(Task::Pogz));
        assert_ne!(m.head(Task::GazeOriginal), init.head(Task::GazeOriginal));
    }

    #[test]
    fn frozen_gradient_is_identically_zero() {
        let (scene, s) = data(1, 8, 3);
        let m = MageModel::new(ModelConfig::default()).unwrap();
        let mut g = m.zeros_like();
        let refs: Vec<&TrainSample> = s.iter().collect();
        let cfg = TrainConfig::default().ablate(Task::GazeOriginal);
        batch_gradient(&m, &refs, &scene.intrinsics, &cfg.weights, &cfg.frozen_mask(), &mut g);
        assert!(g.head(Task::GazeOriginal).iter().flat_map(|l| l.values()).all(|&v| v == 0.0));
        assert!(g.head(Task::GazeNormalized).iter().flat_map(|l| l.values()).any(|&v| v != 0.0));
    }

    #[test]
    fn empty_inputs() {
        let scene = SceneConfig::default();
        let m = MageModel::new(ModelConfig::default()).unwrap();
        assert_eq!(
            train(&TrainConfig::default(), &[], &scene.intrinsics),
            Err(ModelError::EmptyDataset)
        );
        assert_eq!(fine_tune(&m, &TrainConfig::default(), &[], &scene.intrinsics).unwrap(), m);
    }

    #[test]
    fn divergence_is_reported() {
        let (scene, mut s) = data(1, 20, 4);
        s[3].features[0] = f64::NAN;
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&cfg, &s, &scene.intrinsics),
            Err(ModelError::Diverged { epoch: 1, .. })
        ));
    }

    #[test]
    fn validation_split_is_per_subject_tail() {
        let (_, s) = data(3, 20, 0);
        let (tr, va) = split_validation(&s);
        assert_eq!((tr.len(), va.len()), (54, 6));
        for id in 0..3 {
            let tail: Vec<_> = s.iter().filter(|x| x.subject == id).skip(18).cloned().collect();
            let v: Vec<_> = va.iter().filter(|x| x.subject == id).cloned().collect();
            assert_eq!(tail, v);
        }
    }

    #[test]
    fn folds_hold_out_by_subject_modulo() {
        let (_, s) = data(6, 5, 0);
        let folds = subject_folds(&s, 4);
        assert_eq!(folds.len(), 4);
        for (i, (tr, te)) in folds.iter().enumerate() {
            assert_eq!(tr.len() + te.len(), s.len());
            assert!(te.iter().all(|x| x.subject % 4 == i as u32));
            assert!(tr.iter().all(|x| x.subject % 4 != i as u32));
        }
    }

    #[test]
    fn calibration_subset_takes_leading_fraction() {
        let recs: Vec<(u32, usize)> = (0..2).flat_map(|s| (0..100).map(move |i| (s, i))).collect();
        let half = calibration_subset(&recs, |r| r.0, 0.5);
        assert_eq!(half.len(), 100);
        assert!(half.iter().all(|r| r.1 < 50));
        assert_eq!(calibration_subset(&recs, |r| r.0, 1.0), recs);
    }

    #[test]
    fn calibration_samples_look_at_the_lens() {
        let scene = SceneConfig::default();
        let subj = synth::make_subjects(&scene, 1)[0];
        let recs = crate::calibration::build_calibration_set(&subj, &scene, 20).unwrap();
        for r in &recs {
            let t = TrainSample::from_calibration(r, &scene.intrinsics).targets;
            let g_n = t.g_n.unwrap();
            assert!(g_n.yaw.abs() < 1e-9 && g_n.pitch.abs() < 1e-9);
            assert!(t.g_o.is_some() && t.pogz.is_none() && t.o_face.is_none());
        }
    }

    #[test]
    fn history_csv_marks_missing_values() {
        let h = [EpochStats {
            epoch: 0,
            train_loss: 1.5,
            val_loss: f64::NAN,
            val_angular_deg: f64::NAN,
        }];
        let mut buf = Vec::new();
        write_history_csv(&mut buf, &h).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s, "epoch,train_loss,val_loss,val_angular_deg\n0,1.500000000,NA,NA\n");
    }
}
