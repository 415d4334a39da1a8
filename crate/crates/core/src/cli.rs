//! Command-line orchestration: one JSON config, seeded stages, on-disk artifacts.

use crate::datagen::{
    derive_seed, generate_dataset, generate_schedules, load_data_file, save_data_file,
    synthesize_file, DataFile, Dataset, ProtocolConfig, SensorTwin, Split,
};
use crate::eval::{compute_metrics, predict_dataset, render_report, row_times, write_reports, EvalConfig};
use crate::geometry::LayoutConfig;
use crate::mechanics::{ComplianceModel, FingerConfig};
use crate::model::{init_params, train_logged, MlpDims, TrainConfig, TrainedModel};
use crate::optics::{fwhm, sweep_pair, write_sweep_csv, MediumKind, MediumModel, NoiseModel, SweepAxis, SweepSpec};
use crate::pipeline::{preprocess, Normalizer, PipelineConfig};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Failure categories mapped to process exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, unreadable or invalid configuration, missing inputs (exit 2).
    Usage(String),
    /// Failure while running a stage (exit 1).
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Usage(m) | Self::Runtime(m) => f.write_str(m),
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn runtime(msg: impl std::fmt::Display) -> CliError {
    CliError::Runtime(msg.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub geometry: LayoutConfig,
    pub medium: MediumModel,
    pub noise: NoiseModel,
    pub compliance: ComplianceModel,
    pub finger: FingerConfig,
    pub protocol: ProtocolConfig,
    pub pipeline: PipelineConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Master seed for data generation.
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            geometry: LayoutConfig::default(),
            medium: MediumModel::default(),
            noise: NoiseModel::default(),
            compliance: ComplianceModel::default(),
            finger: FingerConfig::default(),
            protocol: ProtocolConfig::default(),
            pipeline: PipelineConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            seed: 0,
            output_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Serialize)]
struct DataSections<'a> {
    geometry: &'a LayoutConfig,
    medium: &'a MediumModel,
    noise: &'a NoiseModel,
    compliance: &'a ComplianceModel,
    finger: &'a FingerConfig,
    protocol: &'a ProtocolConfig,
    seed: u64,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| usage(format!("invalid config {}: {e}", path.display())))?;
        cfg.validate()
            .map_err(|e| usage(format!("invalid config {}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// Reads `path` when given, defaults otherwise.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.twin()?;
        self.protocol.validate().map_err(|e| e.to_string())?;
        self.pipeline.validate().map_err(|e| e.to_string())?;
        self.train.validate().map_err(|e| e.to_string())?;
        self.eval.validate().map_err(|e| e.to_string())?;
        Ok(())
    }

    pub fn twin(&self) -> Result<SensorTwin, String> {
        SensorTwin::new(
            &self.geometry,
            self.medium.clone(),
            self.noise.clone(),
            self.compliance.clone(),
            self.finger.clone(),
        )
    }

    /// Hash of everything that determines the generated data.
    pub fn data_hash(&self) -> String {
        let sections = DataSections {
            geometry: &self.geometry,
            medium: &self.medium,
            noise: &self.noise,
            compliance: &self.compliance,
            finger: &self.finger,
            protocol: &self.protocol,
            seed: self.seed,
        };
        sha256_hex(serde_json::to_string(&sections).expect("config serializes").as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub seed: u64,
    pub frames: usize,
    pub csv_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub files: Vec<ManifestEntry>,
}

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG_ECHO: &str = "config.json";

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| usage(format!("cannot read manifest {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| usage(format!("invalid manifest {}: {e}", path.display())))
    }

    pub fn ids(&self, split: Split) -> impl Iterator<Item = &str> {
        self.files.iter().filter(move |f| f.split == split).map(|f| f.id.as_str())
    }
}

#[derive(Parser, Debug)]
#[command(name = "ledft", version, about = "LED force/torque sensor twin and calibration stack")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed override: the master seed for generate/pipeline/bench, the
    /// training seed for train.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthesize train and test files plus a manifest.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Output directory (defaults to the configured output directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Preprocess the training split and fit the calibration network.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Model output path (defaults to `<data>/model.json`).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Evaluate a trained model on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Report directory (defaults to `<data>/report`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Evaluate on the training split instead.
        #[arg(long)]
        on_train: bool,
    },
    /// Single-pair displacement sweep.
    Sweep {
        #[arg(long, value_enum, default_value = "pdms")]
        medium: MediumKind,
        #[arg(long, value_enum, default_value = "horizontal")]
        axis: SweepAxis,
        #[arg(long, default_value_t = -3.0, allow_negative_numbers = true)]
        start: f64,
        #[arg(long, default_value_t = 3.0, allow_negative_numbers = true)]
        stop: f64,
        #[arg(long, default_value_t = 0.1)]
        step: f64,
        /// Emitter-receiver separation, mm.
        #[arg(long, default_value_t = 6.0)]
        separation: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesis throughput and prediction latency.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Trained model to time; a freshly initialized one is used otherwise.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// generate, train and eval in one go.
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn resolve_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load_or_default(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(|e| runtime(format!("{}: {e}", path.display())))
}

/// Generates the dataset under `out`; returns the in-memory files too.
pub fn generate(cfg: &RunConfig, out: &Path) -> Result<(Manifest, Dataset), CliError> {
    let twin = cfg.twin().map_err(usage)?;
    let data = generate_dataset(&cfg.protocol, &twin, cfg.seed).map_err(runtime)?;
    let mut files = Vec::new();
    for (split, list) in [(Split::Train, &data.train), (Split::Test, &data.test)] {
        let dir = out.join(split.as_str());
        create_dir(&dir)?;
        let entries: Vec<ManifestEntry> = list
            .par_iter()
            .map(|f| {
                let csv = save_data_file(&dir, f).map_err(runtime)?;
                let bytes = std::fs::read(&csv).map_err(|e| runtime(format!("{}: {e}", csv.display())))?;
                Ok(ManifestEntry {
                    id: f.id().to_string(),
                    split,
                    seed: f.meta.seed,
                    frames: f.frames.len(),
                    csv_sha256: sha256_hex(&bytes),
                })
            })
            .collect::<Result<_, CliError>>()?;
        files.extend(entries);
    }
    let manifest = Manifest {
        config_hash: cfg.data_hash(),
        seed: cfg.seed,
        files,
    };
    write_json(&out.join(CONFIG_ECHO), cfg)?;
    write_json(&out.join(MANIFEST), &manifest)?;
    Ok((manifest, data))
}

/// Loads one split listed in the manifest, checking file hashes.
pub fn load_split(dir: &Path, manifest: &Manifest, split: Split) -> Result<Vec<DataFile>, CliError> {
    let sub = dir.join(split.as_str());
    manifest
        .files
        .par_iter()
        .filter(|e| e.split == split)
        .map(|e| {
            let file = load_data_file(&sub, &e.id).map_err(runtime)?;
            let csv = sub.join(format!("{}.csv", e.id));
            let bytes = std::fs::read(&csv).map_err(|err| runtime(format!("{}: {err}", csv.display())))?;
            if sha256_hex(&bytes) != e.csv_sha256 {
                return Err(runtime(format!("{}: content does not match manifest hash", csv.display())));
            }
            Ok(file)
        })
        .collect()
}

/// Config for a stage that consumes `data`: the explicit one if given (it
/// must describe the same data), otherwise the echo written at generation.
fn config_for_data(common: &Common, data: &Path, manifest: &Manifest) -> Result<RunConfig, CliError> {
    let cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::load(&data.join(CONFIG_ECHO))?,
    };
    if cfg.data_hash() != manifest.config_hash {
        return Err(usage(format!(
            "config does not match the dataset in {} (hash {} vs {})",
            data.display(),
            cfg.data_hash(),
            manifest.config_hash
        )));
    }
    Ok(cfg)
}

/// Preprocesses the training split and fits the network. Progress lines
/// `epoch,loss` go to `log`.
pub fn train_on(
    cfg: &RunConfig,
    train_files: &[DataFile],
    data_hash: &str,
    log: &mut dyn Write,
) -> Result<TrainedModel, CliError> {
    let (ds, normalizer) = preprocess(train_files, &cfg.pipeline, None).map_err(runtime)?;
    let _ = writeln!(log, "epoch,loss");
    let mut model = train_logged(&ds, &normalizer, &cfg.pipeline, &cfg.train, |e, l| {
        let _ = writeln!(log, "{e},{l}");
    })
    .map_err(runtime)?;
    model.data_config_hash = Some(data_hash.to_string());
    Ok(model)
}

pub struct EvalOutcome {
    pub report: crate::eval::MetricsReport,
    pub text: String,
}

/// Evaluates `model` on `files` and writes every report artifact into `out`.
pub fn evaluate_on(
    model: &TrainedModel,
    files: &[DataFile],
    eval_cfg: &EvalConfig,
    out: &Path,
) -> Result<EvalOutcome, CliError> {
    let (ds, _) = preprocess(files, &model.pipeline, Some(&model.normalizer)).map_err(runtime)?;
    let (pred, truth) = predict_dataset(model, &ds).map_err(runtime)?;
    let report = compute_metrics(&pred, &truth, eval_cfg).map_err(runtime)?;
    let times = row_times(&ds, files);
    write_reports(out, &report, &times, &pred, &truth).map_err(runtime)?;
    let text = render_report(&report);
    Ok(EvalOutcome { report, text })
}

fn load_model(path: &Path) -> Result<TrainedModel, CliError> {
    if !path.exists() {
        return Err(usage(format!("model not found: {}", path.display())));
    }
    TrainedModel::load(path).map_err(|e| usage(e.to_string()))
}

fn cmd_generate(common: &Common, out: Option<PathBuf>, stdout: &mut dyn Write) -> Result<(), CliError> {
    let cfg = resolve_config(common)?;
    let out = out.unwrap_or_else(|| cfg.output_dir.clone());
    let (manifest, _) = generate(&cfg, &out)?;
    let n_train = manifest.ids(Split::Train).count();
    let n_test = manifest.ids(Split::Test).count();
    let _ = writeln!(
        stdout,
        "wrote {n_train} train and {n_test} test files to {} (config {})",
        out.display(),
        manifest.config_hash
    );
    Ok(())
}

fn cmd_train(
    common: &Common,
    data: &Path,
    model_path: Option<PathBuf>,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    let manifest = Manifest::load(data)?;
    let mut cfg = config_for_data(common, data, &manifest)?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    let files = load_split(data, &manifest, Split::Train)?;
    let model = train_on(&cfg, &files, &manifest.config_hash, stdout)?;
    let path = model_path.unwrap_or_else(|| data.join("model.json"));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    model.save(&path).map_err(runtime)?;
    let _ = writeln!(stdout, "model written to {}", path.display());
    Ok(())
}

fn cmd_eval(
    common: &Common,
    data: &Path,
    model_path: &Path,
    out: Option<PathBuf>,
    on_train: bool,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    let model = load_model(model_path)?;
    let manifest = Manifest::load(data)?;
    let cfg = config_for_data(common, data, &manifest)?;
    if let Some(h) = &model.data_config_hash {
        if h != &manifest.config_hash {
            return Err(usage(format!(
                "model {} was trained on different data (hash {h})",
                model_path.display()
            )));
        }
    }
    let split = if on_train { Split::Train } else { Split::Test };
    let files = load_split(data, &manifest, split)?;
    let out = out.unwrap_or_else(|| data.join("report"));
    let outcome = evaluate_on(&model, &files, &cfg.eval, &out)?;
    let _ = write!(stdout, "{}", outcome.text);
    Ok(())
}

fn cmd_sweep(
    medium: MediumKind,
    spec: SweepSpec,
    out: &Path,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    let chosen = MediumModel::preset(medium);
    let profile = sweep_pair(&chosen, &spec).map_err(|e| usage(e.to_string()))?;
    let mut buf = Vec::new();
    write_sweep_csv(&mut buf, &profile).map_err(runtime)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    std::fs::write(out, buf).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    let _ = writeln!(stdout, "medium,fwhm_mm");
    for kind in [MediumKind::Air, MediumKind::Pdms] {
        let p = sweep_pair(&MediumModel::preset(kind), &spec).map_err(|e| usage(e.to_string()))?;
        let w = fwhm(&p).map(|v| v.to_string()).unwrap_or_else(|| "n/a".into());
        let name = if kind == MediumKind::Air { "air" } else { "pdms" };
        let _ = writeln!(stdout, "{name},{w}");
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchResult {
    pub frames_per_second: f64,
    pub predict_latency_us: f64,
}

/// Times single-threaded synthesis of one training file and single-window prediction.
pub fn bench(cfg: &RunConfig, model: Option<&TrainedModel>) -> Result<BenchResult, CliError> {
    let twin = cfg.twin().map_err(usage)?;
    let (train, _) = generate_schedules(&cfg.protocol, &twin.finger, cfg.seed).map_err(runtime)?;
    let schedule = train.first().ok_or_else(|| runtime("empty schedule"))?;
    let seed = derive_seed(cfg.seed, &format!("file/{}", schedule.id));
    let start = Instant::now();
    let file = synthesize_file(schedule, &cfg.protocol, &twin, seed).map_err(runtime)?;
    let fps = file.frames.len() as f64 / start.elapsed().as_secs_f64();

    let fresh;
    let model = match model {
        Some(m) => m,
        None => {
            let width = cfg.pipeline.feature_width();
            let dims = MlpDims::calibration(width);
            let params = init_params(&mut ChaCha8Rng::seed_from_u64(cfg.train.seed), &dims).map_err(runtime)?;
            fresh = TrainedModel {
                params,
                normalizer: Normalizer {
                    feature_mean: vec![0.0; width],
                    feature_std: vec![1.0; width],
                    label_mean: vec![0.0; 6],
                    label_std: vec![1.0; 6],
                },
                pipeline: cfg.pipeline.clone(),
                train: cfg.train.clone(),
                loss_curve: vec![],
                data_config_hash: None,
            };
            &fresh
        }
    };
    let window: Vec<f64> = (0..model.input_width()).map(|i| (i % 7) as f64 - 3.0).collect();
    let reps = 200;
    model.predict(&window).map_err(runtime)?;
    let start = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(model.predict(std::hint::black_box(&window)).map_err(runtime)?);
    }
    let latency = start.elapsed().as_secs_f64() / reps as f64 * 1e6;
    Ok(BenchResult {
        frames_per_second: fps,
        predict_latency_us: latency,
    })
}

fn cmd_bench(common: &Common, model: Option<PathBuf>, stdout: &mut dyn Write) -> Result<(), CliError> {
    let cfg = resolve_config(common)?;
    let model = model.as_deref().map(load_model).transpose()?;
    let r = bench(&cfg, model.as_ref())?;
    let _ = writeln!(stdout, "synthesis_frames_per_s,{:.0}", r.frames_per_second);
    let _ = writeln!(stdout, "predict_latency_us,{:.1}", r.predict_latency_us);
    Ok(())
}

fn cmd_pipeline(common: &Common, out: Option<PathBuf>, stdout: &mut dyn Write) -> Result<(), CliError> {
    let cfg = resolve_config(common)?;
    let out = out.unwrap_or_else(|| cfg.output_dir.clone());
    let (manifest, data) = generate(&cfg, &out)?;
    let _ = writeln!(
        stdout,
        "generated {} train / {} test files",
        data.train.len(),
        data.test.len()
    );
    let model = train_on(&cfg, &data.train, &manifest.config_hash, stdout)?;
    let model_path = out.join("model.json");
    model.save(&model_path).map_err(runtime)?;
    let outcome = evaluate_on(&model, &data.test, &cfg.eval, &out.join("report"))?;
    let _ = write!(stdout, "{}", outcome.text);
    Ok(())
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, stdout: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = write!(stdout, "{e}");
            return Ok(());
        }
        Err(e) => return Err(usage(e.to_string())),
    };
    match cli.command {
        Command::Generate { common, out } => cmd_generate(&common, out, stdout),
        Command::Train { common, data, model } => cmd_train(&common, &data, model, stdout),
        Command::Eval {
            common,
            data,
            model,
            out,
            on_train,
        } => cmd_eval(&common, &data, &model, out, on_train, stdout),
        Command::Sweep {
            medium,
            axis,
            start,
            stop,
            step,
            separation,
            out,
        } => cmd_sweep(
            medium,
            SweepSpec {
                axis,
                start,
                stop,
                step,
                separation,
            },
            &out,
            stdout,
        ),
        Command::Bench { common, model } => cmd_bench(&common, model, stdout),
        Command::Pipeline { common, out } => cmd_pipeline(&common, out, stdout),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_and_validates() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.data_hash(), cfg.data_hash());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"seed": 7, "train": {"epochs": 3}}"#).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, 2000);
        assert_eq!(cfg.protocol, ProtocolConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 1}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"epoch": 1}}"#).is_err());
    }

    #[test]
    fn data_hash_tracks_data_sections_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.train.epochs = 3;
        b.output_dir = "elsewhere".into();
        assert_eq!(a.data_hash(), b.data_hash());
        b.seed = 1;
        assert_ne!(a.data_hash(), b.data_hash());
        let mut c = a.clone();
        c.noise.base_std = 3.0;
        assert_ne!(a.data_hash(), c.data_hash());
    }

    #[test]
    fn missing_config_is_usage_error_naming_path() {
        let err = RunConfig::load(Path::new("/nonexistent/cfg.json")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("/nonexistent/cfg.json"));
    }

    #[test]
    fn bad_flags_are_usage_errors() {
        let mut sink = Vec::new();
        let err = run(["ledft", "frobnicate"], &mut sink).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        run(["ledft", "--help"], &mut sink).unwrap();
    }
}
