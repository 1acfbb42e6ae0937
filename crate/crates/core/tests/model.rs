use mage::calibration::build_calibration_set;
use mage::model::network::ENCODER_LAYERS;
use mage::model::train::{gaze_n_error, predict_all};
use mage::model::{fine_tune, train, MageModel, ModelConfig, Task, TrainConfig, TrainSample};
use mage::synth::{generate_general, make_subjects, without_kappa, SceneConfig, Subject};

fn scene(seed: u64) -> SceneConfig {
    SceneConfig {
        seed,
        ..SceneConfig::default()
    }
}

fn samples(scene: &SceneConfig, subjects: &[Subject], n: usize) -> Vec<TrainSample> {
    generate_general(scene, subjects, n).unwrap().iter().map(TrainSample::from).collect()
}

fn mean_signed_yaw(model: &MageModel, s: &[TrainSample]) -> f64 {
    let refs: Vec<&TrainSample> = s.iter().collect();
    let out = predict_all(model, &refs);
    out.iter()
        .zip(s)
        .map(|(o, s)| o.g_n.yaw - s.targets.g_n.unwrap().yaw)
        .sum::<f64>()
        / s.len() as f64
}

fn base_model(scene: &SceneConfig) -> (MageModel, TrainConfig) {
    let subjects = without_kappa(&make_subjects(scene, 8));
    let cfg = TrainConfig {
        epochs: 60,
        seed: scene.seed,
        ..TrainConfig::default()
    };
    let (m, _) = train(&cfg, &samples(scene, &subjects, 400), &scene.intrinsics).unwrap();
    (m, cfg)
}

#[test]
fn calibration_removes_an_injected_yaw_bias() {
    let sc = scene(21);
    let (base, cfg) = base_model(&sc);
    let subject = Subject::new(50, [0.05, 0.0], sc.feature_noise_sigma).unwrap();
    let test = samples(&sc, &[subject], 400);
    let calib: Vec<TrainSample> = build_calibration_set(&subject, &sc, 50)
        .unwrap()
        .iter()
        .map(|r| TrainSample::from_calibration(r, &sc.intrinsics))
        .collect();
    let before = mean_signed_yaw(&base, &test);
    let tuned = fine_tune(&base, &cfg, &calib, &sc.intrinsics).unwrap();
    let after = mean_signed_yaw(&tuned, &test);
    assert!(before > 0.03, "injected bias not visible: {before}");
    assert!(after.abs() <= 0.5 * before.abs(), "before {before}, after {after}");
}

#[test]
fn head_bias_fine_tune_touches_only_head_biases() {
    let sc = scene(4);
    let subjects = make_subjects(&sc, 2);
    let cfg = TrainConfig {
        epochs: 2,
        finetune_epochs: 20,
        finetune_lr: 1e-3,
        ..TrainConfig::default()
    };
    let (base, _) = train(&cfg, &samples(&sc, &subjects, 60), &sc.intrinsics).unwrap();
    let calib: Vec<TrainSample> = build_calibration_set(&subjects[0], &sc, 20)
        .unwrap()
        .iter()
        .map(|r| TrainSample::from_calibration(r, &sc.intrinsics))
        .collect();
    let tuned = fine_tune(&base, &cfg, &calib, &sc.intrinsics).unwrap();
    assert_eq!(&tuned.layers[..ENCODER_LAYERS], &base.layers[..ENCODER_LAYERS]);
    for (a, b) in tuned.layers.iter().zip(&base.layers).skip(ENCODER_LAYERS) {
        assert_eq!(a.w, b.w);
    }
    let gn = tuned.config.head_range(Task::GazeNormalized);
    assert_ne!(tuned.layers[gn.end - 1].b, base.layers[gn.end - 1].b);

    assert_eq!(fine_tune(&base, &cfg, &[], &sc.intrinsics).unwrap(), base);
}

#[test]
fn ablated_head_stays_at_init() {
    let sc = scene(8);
    let subjects = make_subjects(&sc, 2);
    let cfg = TrainConfig {
        epochs: 3,
        seed: 8,
        ..TrainConfig::default()
    }
    .ablate(Task::Pogz);
    let (m, _) = train(&cfg, &samples(&sc, &subjects, 80), &sc.intrinsics).unwrap();
    let init = MageModel::new(ModelConfig {
        init_seed: 8,
        ..cfg.model.clone()
    })
    .unwrap();
    assert_eq!(m.head(Task::Pogz), init.head(Task::Pogz));
    assert_ne!(m.head(Task::GazeNormalized), init.head(Task::GazeNormalized));
}

#[test]
fn saved_params_predict_identically() {
    let sc = scene(2);
    let subjects = make_subjects(&sc, 2);
    let s = samples(&sc, &subjects, 50);
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let (m, _) = train(&cfg, &s, &sc.intrinsics).unwrap();
    let back = MageModel::from_json(&m.to_json()).unwrap();
    let refs: Vec<&TrainSample> = s.iter().collect();
    assert_eq!(predict_all(&m, &refs), predict_all(&back, &refs));
    assert_eq!(gaze_n_error(&m, &refs), gaze_n_error(&back, &refs));
}

#[test]
fn affine_heads_remain_available() {
    let sc = scene(3);
    let subjects = without_kappa(&make_subjects(&sc, 4));
    let s = samples(&sc, &subjects, 200);
    let cfg = TrainConfig {
        epochs: 20,
        lr: 1e-3,
        model: ModelConfig {
            head_hidden: 0,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    };
    let (m, h) = train(&cfg, &s, &sc.intrinsics).unwrap();
    assert_eq!(m.layers.len(), ENCODER_LAYERS + 5);
    assert!(h.last().unwrap().val_angular_deg < 0.5 * h[0].val_angular_deg);
}
