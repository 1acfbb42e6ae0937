//! The `mage` command line.
//!
//! Every artifact-producing command writes into its `--out` run directory,
//! next to a `config.json` snapshot of the merged configuration. Passing that
//! snapshot back with `--config` reproduces the run.
//!
//! Exit codes: 0 success, 2 usage, configuration or input errors, 3 numeric
//! failure (divergence, failed gradient check).

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dataset::{read_calibration, read_general};
use crate::frame::{GazeVec, Scs};
use crate::metrics::{evaluate, evaluate_per_subject, EvalReport};
use crate::model::gradcheck::gradcheck;
use crate::model::train::{calibration_subset, save_history, subject_folds, train_split, FineTuneScope};
use crate::model::{fine_tune, train, MageModel, ModelConfig, ModelError, Task, TrainConfig, TrainSample};
use crate::pogz::{pog_to_pogz, pogz_to_pog, PlanePoint, RigidTransform};
use crate::synth::{self, make_subjects, Mode, SceneConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Largest gradient-check relative error that still passes.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "mage", version, about = "Multi-task 6-DoF gaze estimation on synthetic data")]
pub struct Cli {
    /// JSON run configuration; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for generation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory for all outputs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "snake_case")]
enum Command {
    /// Generate a synthetic general or calibration dataset.
    Gen(GenArgs),
    /// Train from scratch, optionally with cross-subject folds.
    Train(TrainArgs),
    /// Per-subject adaptation on calibration frames.
    Finetune(FinetuneArgs),
    /// Report angular and point errors of trained parameters.
    Eval(EvalArgs),
    /// Map a JSONL stream of (point, gaze) records between PoGz and PoG.
    Convert(ConvertArgs),
    /// Finite-difference check of the loss gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum ModeArg {
    General,
    Calibration,
}

#[derive(Debug, Args, Serialize)]
struct GenArgs {
    #[arg(long, value_enum, default_value = "general")]
    mode: ModeArg,
    #[arg(long, default_value_t = 12)]
    subjects: u32,
    /// Frames per subject.
    #[arg(long, default_value_t = 833)]
    frames: usize,
    /// Standard deviation of the gaze feature noise (rad).
    #[arg(long)]
    noise: Option<f64>,
    /// Half-width of the per-subject kappa range (rad).
    #[arg(long)]
    kappa_range: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
struct TrainOpts {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Zero a task's loss weight and freeze its head (g_n, g_o, pogz, r_on, face).
    #[arg(long = "ablate", value_name = "TASK")]
    ablate: Vec<String>,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Cross-subject folds; 1 trains once with a per-subject validation tail.
    #[arg(long, default_value_t = 1)]
    folds: u32,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum ScopeArg {
    All,
    Heads,
    HeadBias,
}

#[derive(Debug, Args, Serialize)]
struct FinetuneArgs {
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    calib: PathBuf,
    /// Share of each subject's calibration frames to use, in (0, 1].
    #[arg(long)]
    fraction: Option<f64>,
    /// General data to evaluate the adapted models on.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    scope: Option<ScopeArg>,
}

#[derive(Debug, Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Camera-to-screen transform JSON; enables the PoG column.
    #[arg(long)]
    screen: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Direction {
    Pogz2pog,
    Pog2pogz,
}

#[derive(Debug, Args, Serialize)]
struct ConvertArgs {
    #[arg(long, value_enum)]
    dir: Direction,
    #[arg(long)]
    transform: PathBuf,
    /// Input JSONL; standard input when absent.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output JSONL; standard output when absent.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 10)]
    restarts: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 8)]
    hidden: usize,
    #[arg(long, default_value_t = 6)]
    embed: usize,
    #[arg(long, default_value_t = 4)]
    head_hidden: usize,
}

/// Settings shared by the subcommands, as read from `--config`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub scene: SceneConfig,
    pub train: TrainConfig,
}

#[derive(Serialize)]
struct Snapshot<'a> {
    #[serde(flatten)]
    config: &'a RunConfig,
    command: &'a Command,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Diverged { .. } | ModelError::Gimbal(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Parse the process arguments, run, and return the exit code.
pub fn main_exit() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MAGE_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<RunConfig>(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = Some(s);
    }
    if let Some(s) = cfg.seed {
        cfg.scene.seed = s;
        cfg.train.seed = s;
    }
    let out = cli.out.as_deref();
    match &cli.command {
        Command::Gen(a) => cmd_gen(&mut cfg, a, required_out(out)?, &cli.command),
        Command::Train(a) => cmd_train(&mut cfg, a, required_out(out)?, &cli.command),
        Command::Finetune(a) => cmd_finetune(&mut cfg, a, required_out(out)?, &cli.command),
        Command::Eval(a) => cmd_eval(&cfg, a, out, &cli.command),
        Command::Convert(a) => cmd_convert(a),
        Command::Gradcheck(a) => cmd_gradcheck(&cfg, a, out, &cli.command),
    }
}

fn required_out(out: Option<&Path>) -> Result<&Path> {
    out.ok_or_else(|| usage("--out <DIR> is required for this command"))
}

fn require_seed(cfg: &RunConfig) -> Result<()> {
    cfg.seed
        .map(|_| ())
        .ok_or_else(|| usage("a seed is required (--seed or \"seed\" in --config)"))
}

fn require_input(p: &Path) -> Result<()> {
    if p.exists() && !p.is_dir() {
        Ok(())
    } else {
        Err(usage(format!("input not found: {}", p.display())))
    }
}

fn prepare_out(dir: &Path, cfg: &RunConfig, command: &Command) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| usage(format!("{}: {e}", dir.display())))?;
    let snap = serde_json::to_string_pretty(&Snapshot { config: cfg, command }).expect("config serializes");
    write_file(&dir.join("config.json"), &(snap + "\n"))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn load_params(path: &Path) -> Result<MageModel> {
    require_input(path)?;
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    MageModel::from_json(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn apply_train_opts(t: &mut TrainConfig, o: &TrainOpts) -> Result<()> {
    if let Some(v) = o.epochs {
        t.epochs = v;
    }
    if let Some(v) = o.lr {
        t.lr = v;
    }
    if let Some(v) = o.batch_size {
        t.batch_size = v;
    }
    for name in &o.ablate {
        let task = Task::from_name(name).ok_or_else(|| usage(format!("unknown task {name:?}")))?;
        *t = t.clone().ablate(task);
    }
    t.validate().map_err(usage)
}

fn cmd_gen(cfg: &mut RunConfig, a: &GenArgs, out: &Path, command: &Command) -> Result<()> {
    require_seed(cfg)?;
    if let Some(v) = a.noise {
        cfg.scene.feature_noise_sigma = v;
    }
    if let Some(v) = a.kappa_range {
        cfg.scene.kappa_range = v;
    }
    cfg.scene.validate().map_err(usage)?;
    prepare_out(out, cfg, command)?;
    let (mode, name) = match a.mode {
        ModeArg::General => (Mode::General, "general.jsonl"),
        ModeArg::Calibration => (Mode::Calibration, "calibration.jsonl"),
    };
    let subjects = make_subjects(&cfg.scene, a.subjects);
    let path = out.join(name);
    let summary = synth::generate_dataset(&cfg.scene, &subjects, a.frames, mode, &path).map_err(usage)?;
    println!("wrote {} records to {}", summary.records, path.display());
    if let Some(stats) = summary.stats {
        let s = &cfg.scene;
        println!("{:<12} {:>9} {:>9} {:>9} {:>9}", "attribute", "mean", "target", "std", "target");
        for ((name, d), (m, sd)) in [
            ("gaze yaw", &s.gaze_yaw),
            ("gaze pitch", &s.gaze_pitch),
            ("head yaw", &s.head_yaw),
            ("head pitch", &s.head_pitch),
        ]
        .into_iter()
        .zip(stats)
        {
            println!("{name:<12} {m:>9.4} {:>9.4} {sd:>9.4} {:>9.4}", d.mean, d.std);
        }
    }
    Ok(())
}

fn cmd_train(cfg: &mut RunConfig, a: &TrainArgs, out: &Path, command: &Command) -> Result<()> {
    require_seed(cfg)?;
    require_input(&a.data)?;
    apply_train_opts(&mut cfg.train, &a.opts)?;
    if a.folds == 0 {
        return Err(usage("--folds must be at least 1"));
    }
    let ds = read_general(&a.data).map_err(usage)?;
    let intr = ds.header.config.intrinsics;
    let samples: Vec<TrainSample> = ds.samples.iter().map(TrainSample::from).collect();
    prepare_out(out, cfg, command)?;

    if a.folds == 1 {
        let (model, history) = train(&cfg.train, &samples, &intr)?;
        write_file(&out.join("params.json"), &model.to_json())?;
        save_history(&out.join("history.csv"), &history).map_err(usage)?;
        if let Some(last) = history.last() {
            println!(
                "epoch {}: train loss {:.5}, val loss {:.5}, val g_n {:.4} deg (untrained {:.4})",
                last.epoch, last.train_loss, last.val_loss, last.val_angular_deg, history[0].val_angular_deg
            );
        }
        return Ok(());
    }

    let mut rows = String::from("fold,train_samples,test_samples,test_g_n_deg\n");
    let mut errs = Vec::new();
    for (i, (tr, te)) in subject_folds(&samples, a.folds).into_iter().enumerate() {
        if tr.is_empty() || te.is_empty() {
            return Err(usage(format!("fold {i} has no train or no test subjects")));
        }
        let init = MageModel::new(ModelConfig {
            init_seed: cfg.train.seed,
            ..cfg.train.model.clone()
        })?;
        let (model, history) = train_split(init, &cfg.train, &tr, &te, &intr)?;
        let dir = out.join(format!("fold{i}"));
        fs::create_dir_all(&dir).map_err(usage)?;
        write_file(&dir.join("params.json"), &model.to_json())?;
        save_history(&dir.join("history.csv"), &history).map_err(usage)?;
        let e = history.last().map_or(f64::NAN, |h| h.val_angular_deg);
        println!("fold {i}: test g_n {e:.4} deg over {} samples", te.len());
        rows.push_str(&format!("{i},{},{},{e:.6}\n", tr.len(), te.len()));
        errs.push(e);
    }
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    rows.push_str(&format!("mean,,,{mean:.6}\n"));
    println!("mean test g_n {mean:.4} deg");
    write_file(&out.join("folds.csv"), &rows)
}

fn cmd_finetune(cfg: &mut RunConfig, a: &FinetuneArgs, out: &Path, command: &Command) -> Result<()> {
    let base = load_params(&a.params)?;
    require_input(&a.calib)?;
    if let Some(d) = &a.data {
        require_input(d)?;
    }
    let t = &mut cfg.train;
    if let Some(v) = a.fraction {
        t.calibration_fraction = v;
    }
    if let Some(v) = a.epochs {
        t.finetune_epochs = v;
    }
    if let Some(v) = a.lr {
        t.finetune_lr = v;
    }
    if let Some(s) = a.scope {
        t.finetune_scope = match s {
            ScopeArg::All => FineTuneScope::All,
            ScopeArg::Heads => FineTuneScope::Heads,
            ScopeArg::HeadBias => FineTuneScope::HeadBias,
        };
    }
    t.model = base.config.clone();
    t.validate().map_err(usage)?;

    let calib = read_calibration(&a.calib).map_err(usage)?;
    let intr = calib.header.config.intrinsics;
    let chosen = calibration_subset(&calib.records, |r| r.subject, cfg.train.calibration_fraction);
    let mut per: BTreeMap<u32, Vec<TrainSample>> = BTreeMap::new();
    for r in &chosen {
        per.entry(r.subject).or_default().push(TrainSample::from_calibration(r, &intr));
    }
    prepare_out(out, cfg, command)?;

    let mut tuned: BTreeMap<u32, MageModel> = BTreeMap::new();
    for (&id, samples) in &per {
        let m = fine_tune(&base, &cfg.train, samples, &intr)?;
        write_file(&out.join(format!("params_subject{id}.json")), &m.to_json())?;
        log::info!("subject {id}: adapted on {} frames", samples.len());
        tuned.insert(id, m);
    }
    println!("adapted {} subjects on {} calibration frames", tuned.len(), chosen.len());

    if let Some(d) = &a.data {
        let ds = read_general(d).map_err(usage)?;
        let report = evaluate_per_subject(
            |id| tuned.get(&id).unwrap_or(&base),
            &ds.samples,
            &ds.header.config.intrinsics,
            None,
        )
        .map_err(metrics_err)?;
        write_file(&out.join("report.csv"), &report.to_csv())?;
        print!("{report}");
    }
    Ok(())
}

fn metrics_err(e: crate::metrics::MetricsError) -> CliError {
    match e {
        crate::metrics::MetricsError::Model(m) => m.into(),
        other => usage(other),
    }
}

fn cmd_eval(cfg: &RunConfig, a: &EvalArgs, out: Option<&Path>, command: &Command) -> Result<()> {
    let model = load_params(&a.params)?;
    require_input(&a.data)?;
    let screen = match &a.screen {
        Some(p) => Some(load_transform(p)?),
        None => None,
    };
    let ds = read_general(&a.data).map_err(usage)?;
    let report: EvalReport =
        evaluate(&model, &ds.samples, &ds.header.config.intrinsics, screen.as_ref()).map_err(metrics_err)?;
    if let Some(dir) = out {
        prepare_out(dir, cfg, command)?;
        write_file(&dir.join("report.csv"), &report.to_csv())?;
    }
    print!("{report}");
    Ok(())
}

fn load_transform(p: &Path) -> Result<RigidTransform> {
    require_input(p)?;
    let text = fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
    RigidTransform::from_json(&text).map_err(|e| usage(format!("{}: {e}", p.display())))
}

#[derive(Deserialize)]
struct PointGaze {
    point: [f64; 2],
    gaze: [f64; 3],
}

fn convert_line(line: &str, dir: Direction, t: &RigidTransform) -> std::result::Result<serde_json::Value, String> {
    let r: PointGaze = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let [gx, gy, gz] = r.gaze;
    let (point, gaze, lambda) = match dir {
        Direction::Pogz2pog => {
            let h = pogz_to_pog(&PlanePoint::new(r.point[0], r.point[1]), &GazeVec::new(gx, gy, gz), t)
                .map_err(|e| e.to_string())?;
            (h.point.to_array(), h.direction.to_array(), h.lambda)
        }
        Direction::Pog2pogz => {
            let h = pog_to_pogz(&PlanePoint::new(r.point[0], r.point[1]), &GazeVec::<Scs>::new(gx, gy, gz), t)
                .map_err(|e| e.to_string())?;
            (h.point.to_array(), h.direction.to_array(), h.lambda)
        }
    };
    let mut v = json!({ "point": point, "gaze": gaze });
    if lambda < 0.0 {
        v["behind_origin"] = json!(true);
    }
    Ok(v)
}

fn cmd_convert(a: &ConvertArgs) -> Result<()> {
    let t = load_transform(&a.transform)?;
    let input: Box<dyn BufRead> = match &a.input {
        Some(p) => {
            require_input(p)?;
            Box::new(io::BufReader::new(fs::File::open(p).map_err(usage)?))
        }
        None => Box::new(io::stdin().lock()),
    };
    let mut output: Box<dyn Write> = match &a.output {
        Some(p) => Box::new(BufWriter::new(
            fs::File::create(p).map_err(|e| usage(format!("{}: {e}", p.display())))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    let mut failed = 0usize;
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(usage)?;
        if line.trim().is_empty() {
            continue;
        }
        let v = convert_line(&line, a.dir, &t).unwrap_or_else(|e| {
            failed += 1;
            json!({ "line": i + 1, "error": e })
        });
        writeln!(output, "{v}").map_err(usage)?;
    }
    output.flush().map_err(usage)?;
    if failed > 0 {
        log::warn!("{failed} records could not be converted");
    }
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig, a: &GradcheckArgs, out: Option<&Path>, command: &Command) -> Result<()> {
    let model = ModelConfig {
        hidden: a.hidden,
        embed: a.embed,
        head_hidden: a.head_hidden,
        ..cfg.train.model.clone()
    };
    let r = gradcheck(a.restarts, a.batch, cfg.seed.unwrap_or(0), &model)?;
    let report = serde_json::to_string_pretty(&r).expect("report serializes");
    if let Some(dir) = out {
        prepare_out(dir, cfg, command)?;
        write_file(&dir.join("gradcheck.json"), &(report.clone() + "\n"))?;
    }
    println!("{report}");
    if r.max_rel_error < GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "max relative gradient error {:.3e} exceeds {GRADCHECK_TOLERANCE:e}",
            r.max_rel_error
        )))
    }
}
