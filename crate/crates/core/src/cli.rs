//! The `oocdet` command surface: prepare → (finetune → predict | zeroshot)
//! → evaluate.
//!
//! Every command reads one TOML [`RunConfig`], takes an exclusive lock on the
//! output directory, writes the resolved config next to its outputs and keeps
//! wall-clock timestamps in a separate `*.run-meta.json` sidecar so that all
//! other artifacts are byte-stable across identical runs.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data or runtime error,
//! 4 backend error.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use base64::Engine as _;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chat::{
    batch_probe, ChatBackendConfig, ChatClient, ChatError, RawReply, Transport, TransportError,
};
use crate::eval::{
    compare_report, read_predictions, score_predictions, write_predictions, BaselineTable,
    Comparison, EvalError, MetricsReport, Predicted, PredictionRecord, ReportMeta, SystemRole,
    DEFAULT_GAIN_THRESHOLD,
};
use crate::extract::{Extractor, Lexicon, LexiconError};
use crate::images::FsImageStore;
use crate::manifest::{
    load_manifest_file, read_records, restructure_for_finetune, split_stats, write_records,
    FineTuneRecord, ManifestError, Partition, Sample, SplitManifest,
};
use crate::model::{
    load_checkpoint, save_checkpoint, DetectorModel, EncoderBackend, ModelError, ModelMetadata,
    DEFAULT_HIDDEN, DEFAULT_TRIGRAM_DIM,
};
use crate::prompt::{
    PromptError, PromptSpec, PromptTemplate, DEFAULT_QUESTION, DEFAULT_TEMPLATE_ID,
    DEFAULT_TEMPLATE_TEXT,
};
use crate::trainer::{encode_records, fine_tune, CheckpointWriter, TrainConfig, TrainError};

pub const LOCK_FILE: &str = ".oocdet.lock";
pub const MODEL_FILE: &str = "model.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINETUNE_SUMMARY: &str = "finetune-summary.json";
pub const SPLIT_STATS_FILE: &str = "split-stats.json";
pub const TRANSCRIPT_FILE: &str = "transcript.jsonl";
pub const REPORT_TEXT: &str = "report.txt";
pub const REPORT_JSON: &str = "report.json";

pub fn records_file(partition: Partition) -> String {
    format!("records-{}.jsonl", partition.as_str())
}

pub fn predictions_file(role: SystemRole) -> String {
    match role {
        SystemRole::FineTuned => "predictions-fine-tuned.jsonl".to_string(),
        SystemRole::ZeroShot => "predictions-zero-shot.jsonl".to_string(),
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("backend error: {0}")]
    Backend(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Backend(_) => 4,
        }
    }
}

impl From<ManifestError> for CliError {
    fn from(e: ManifestError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Config(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<ChatError> for CliError {
    fn from(e: ChatError) -> Self {
        match e {
            ChatError::Config(_) => CliError::Config(e.to_string()),
            ChatError::EmptyBatch | ChatError::Transcript { .. } | ChatError::Io(_) => {
                CliError::Data(e.to_string())
            }
            other => CliError::Backend(other.to_string()),
        }
    }
}

impl From<LexiconError> for CliError {
    fn from(e: LexiconError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<PromptError> for CliError {
    fn from(e: PromptError) -> Self {
        CliError::Config(e.to_string())
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSelection {
    pub train: Partition,
    /// Validation partition used for best-checkpoint selection, if present.
    pub val: Option<Partition>,
    /// Partition scored by `predict` and `zeroshot`.
    pub eval: Partition,
}

impl Default for PartitionSelection {
    fn default() -> Self {
        Self {
            train: Partition::Train,
            val: Some(Partition::Val),
            eval: Partition::Test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub template_id: String,
    pub template: String,
    pub question: String,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            template_id: DEFAULT_TEMPLATE_ID.to_string(),
            template: DEFAULT_TEMPLATE_TEXT.to_string(),
            question: DEFAULT_QUESTION.to_string(),
        }
    }
}

impl PromptConfig {
    pub fn spec(&self) -> Result<PromptSpec, CliError> {
        let spec = PromptSpec {
            template: PromptTemplate::new(&self.template_id, &self.template)?,
            question: self.question.clone(),
        };
        // surfaces an empty question before any work starts
        spec.render("probe")?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub text_dim: usize,
    pub hash_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: DEFAULT_HIDDEN,
            text_dim: DEFAULT_TRIGRAM_DIM,
            hash_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// The in-process toy detector answers zero-shot probes.
    Toy,
    /// A remote chat endpoint answers zero-shot probes.
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub active: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub remote: Option<ChatBackendConfig>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            active: BackendKind::Toy,
            remote: None,
        }
    }
}

/// Everything a command needs. Relative paths are resolved against the
/// directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub split_name: String,
    pub out: PathBuf,
    /// Seeds model initialization and per-epoch shuffling.
    #[serde(default)]
    pub seed: u64,
    /// Root for image references; defaults to the manifest's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images: Option<PathBuf>,
    /// Verdict lexicon; the bundled one is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lexicon: Option<PathBuf>,
    #[serde(default)]
    pub partitions: PartitionSelection,
    #[serde(default)]
    pub prompt: PromptConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub backend: BackendConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut c: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut c.manifest);
        resolve(&mut c.out);
        c.images.as_mut().map(resolve);
        c.lexicon.as_mut().map(resolve);
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.epochs {
            self.train.epochs = v;
        }
        if let Some(v) = o.batch_size {
            self.train.batch_size = v;
        }
        if let Some(v) = o.lr {
            self.train.learning_rate = v;
        }
        if let Some(v) = o.backend {
            self.backend.active = v;
        }
        if let Some(v) = &o.out {
            self.out = v.clone();
        }
        // one seed drives the whole run
        self.train.seed = self.seed;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.split_name.trim().is_empty() {
            return Err(CliError::Config("split_name is empty".into()));
        }
        self.train.validate()?;
        self.prompt.spec()?;
        if self.model.hidden == 0 || self.model.text_dim == 0 {
            return Err(CliError::Config(
                "model.hidden and model.text_dim must be positive".into(),
            ));
        }
        match (self.backend.active, &self.backend.remote) {
            (BackendKind::Remote, None) => {
                return Err(CliError::Config(
                    "backend.active is \"remote\" but no [backend.remote] block is given".into(),
                ))
            }
            (_, Some(remote)) => remote.validate()?,
            _ => {}
        }
        Ok(())
    }

    pub fn image_root(&self) -> PathBuf {
        self.images.clone().unwrap_or_else(|| {
            self.manifest
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from("."))
        })
    }

    pub fn extractor(&self) -> Result<Extractor, CliError> {
        let lexicon = match &self.lexicon {
            Some(p) => Lexicon::load(p)?,
            None => Lexicon::default(),
        };
        Ok(Extractor::new(lexicon))
    }

    /// The seeded, untrained detector for this config.
    pub fn initial_model(&self) -> Result<DetectorModel, CliError> {
        let metadata = ModelMetadata {
            template_id: self.prompt.template_id.clone(),
            question: self.prompt.question.clone(),
            seed: self.seed,
            epoch: 0,
        };
        Ok(DetectorModel::new(
            EncoderBackend::byte_histogram(),
            EncoderBackend::char_trigram(self.model.text_dim, self.model.hash_seed),
            self.model.hidden,
            metadata,
        )?)
    }
}

// ---------------------------------------------------------------------------
// argument parsing

#[derive(Debug, Parser)]
#[command(
    name = "oocdet",
    version,
    about = "Out-of-context image-caption detection"
)]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long, global = true)]
    pub epochs: Option<u32>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    /// Partition for `prepare` (only this one), `finetune` (training) or
    /// `predict` / `zeroshot` (scored).
    #[arg(long, global = true)]
    pub partition: Option<Partition>,
    #[arg(long, global = true, value_enum)]
    pub backend: Option<BackendKind>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Validate the manifest, print split statistics and write fine-tune
    /// record files.
    Prepare,
    /// Train the projection and classifier on prepared records.
    Finetune {
        /// Start from this checkpoint instead of the seeded initialization.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Score a partition with the fine-tuned detector.
    Predict {
        /// Checkpoint to use; defaults to the run's final model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Probe a partition through the configured chat backend.
    Zeroshot,
    /// Score prediction files and compare them with the baseline table.
    Evaluate {
        /// `ROLE:PATH` with ROLE `fine-tuned` or `zero-shot`; repeatable.
        /// Defaults to the prediction files present in the output directory.
        #[arg(long = "predictions")]
        predictions: Vec<String>,
        /// Baseline table (TOML); the bundled table is used when absent.
        #[arg(long)]
        baselines: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_GAIN_THRESHOLD)]
        gain_threshold: f64,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Prepare => "prepare",
            Command::Finetune { .. } => "finetune",
            Command::Predict { .. } => "predict",
            Command::Zeroshot => "zeroshot",
            Command::Evaluate { .. } => "evaluate",
        }
    }
}

/// Parse-independent entry point: load and resolve the config, lock the
/// output directory and run one command, printing human output to `stdout`.
pub fn run(cli: &Cli, stdout: &mut dyn Write) -> Result<(), CliError> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| CliError::Config("--config is required".into()))?;
    let mut config = RunConfig::load(path)?;
    config.apply(&cli.overrides);
    config.validate()?;
    execute(&config, &cli.command, cli.overrides.partition, stdout)
}

/// Run one command against an already resolved config.
pub fn execute(
    config: &RunConfig,
    command: &Command,
    partition: Option<Partition>,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    let _lock = OutputLock::acquire(&config.out)?;
    let name = command.name();
    let started = unix_now();
    write_json(&config.out.join(format!("{name}.run-config.json")), config)?;

    let result = match command {
        Command::Prepare => cmd_prepare(config, partition, stdout),
        Command::Finetune { init } => cmd_finetune(config, partition, init.as_deref(), stdout),
        Command::Predict { checkpoint } => {
            cmd_predict(config, partition, checkpoint.as_deref(), stdout)
        }
        Command::Zeroshot => cmd_zeroshot(config, partition, stdout),
        Command::Evaluate {
            predictions,
            baselines,
            gain_threshold,
        } => cmd_evaluate(
            config,
            predictions,
            baselines.as_deref(),
            *gain_threshold,
            stdout,
        ),
    };

    let meta = RunMeta {
        command: name,
        version: env!("CARGO_PKG_VERSION"),
        started_unix: started,
        finished_unix: unix_now(),
        exit_code: result.as_ref().map_or_else(CliError::exit_code, |_| 0),
    };
    // a failing sidecar write must not mask the command's own error
    let meta_written = write_json(&config.out.join(format!("{name}.run-meta.json")), &meta);
    result.and(meta_written)
}

#[derive(Serialize)]
struct RunMeta {
    command: &'static str,
    version: &'static str,
    started_unix: u64,
    finished_unix: u64,
    exit_code: i32,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Exclusive claim on an output directory, released on drop.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::Config(format!("output directory {}: {e}", dir.display())))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(CliError::Config(format!(
                "output directory {} is locked by another run (remove {} if that run is gone)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(CliError::Config(format!(
                "output directory {} is not writable: {e}",
                dir.display()
            ))),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(io_err(path))
}

fn say(stdout: &mut dyn Write, text: impl std::fmt::Display) -> Result<(), CliError> {
    writeln!(stdout, "{text}").map_err(|e| CliError::Data(format!("stdout: {e}")))
}

fn load_manifest(config: &RunConfig) -> Result<SplitManifest, CliError> {
    Ok(load_manifest_file(&config.manifest, &config.split_name)?)
}

fn eval_samples(
    config: &RunConfig,
    partition: Option<Partition>,
) -> Result<(SplitManifest, Partition), CliError> {
    let manifest = load_manifest(config)?;
    let p = partition.unwrap_or(config.partitions.eval);
    if !manifest.partitions.contains_key(&p) {
        return Err(ManifestError::UnknownPartition(p.as_str().to_string()).into());
    }
    Ok((manifest, p))
}

// ---------------------------------------------------------------------------
// commands

fn cmd_prepare(
    config: &RunConfig,
    only: Option<Partition>,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    let manifest = load_manifest(config)?;
    let stats = split_stats(&manifest);
    say(stdout, &stats)?;
    write_json(&config.out.join(SPLIT_STATS_FILE), &stats)?;

    let targets: Vec<Partition> = match only {
        Some(p) => vec![p],
        None => Partition::ALL
            .iter()
            .copied()
            .filter(|p| manifest.partitions.contains_key(p))
            .collect(),
    };
    for p in targets {
        let records = restructure_for_finetune(&manifest, p)?;
        let path = config.out.join(records_file(p));
        let mut w = io::BufWriter::new(File::create(&path).map_err(io_err(&path))?);
        write_records(&records, &mut w)
            .and_then(|_| w.flush())
            .map_err(io_err(&path))?;
        say(
            stdout,
            format!("wrote {} records to {}", records.len(), path.display()),
        )?;
    }
    Ok(())
}

fn read_record_file(path: &Path) -> Result<Vec<FineTuneRecord>, CliError> {
    let f = File::open(path)
        .map_err(|e| CliError::Data(format!("{}: {e} (run `prepare` first)", path.display())))?;
    Ok(read_records(BufReader::new(f))?)
}

#[derive(Serialize)]
struct FinetuneSummary<'a> {
    final_epoch: Option<&'a crate::trainer::EpochStats>,
    best_epoch: Option<u32>,
    audit: &'a crate::trainer::GradientAudit,
    freeze: &'a crate::trainer::FreezeReport,
}

fn cmd_finetune(
    config: &RunConfig,
    partition: Option<Partition>,
    init: Option<&Path>,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    let train_partition = partition.unwrap_or(config.partitions.train);
    let train = read_record_file(&config.out.join(records_file(train_partition)))?;
    let val = match config.partitions.val {
        Some(p) if p != train_partition => {
            let path = config.out.join(records_file(p));
            if path.exists() {
                read_record_file(&path)?
            } else {
                Vec::new()
            }
        }
        _ => Vec::new(),
    };

    let model = match init {
        Some(p) => load_checkpoint(p)?,
        None => config.initial_model()?,
    };
    let prompt = config.prompt.spec()?;
    let images = FsImageStore::new(config.image_root());
    let mut writer = CheckpointWriter::new(config.out.join(CHECKPOINT_DIR), config.train.keep_last);

    let outcome = fine_tune(
        model,
        &train,
        &val,
        &images,
        &prompt,
        &config.train,
        Some(&mut writer),
    )?;

    let final_stats = outcome.history.last();
    if let Some(s) = final_stats {
        say(
            stdout,
            format!(
                "epoch {} of {}: mean loss {:.6}, train accuracy {:.4}, val accuracy {}",
                s.epoch,
                config.train.epochs,
                s.mean_loss,
                s.train_accuracy,
                s.val_accuracy
                    .map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
            ),
        )?;
    }
    say(
        stdout,
        format!(
            "gradient audit: max relative error {:.3e}",
            outcome.audit.max_relative_error
        ),
    )?;
    say(stdout, &outcome.freeze)?;

    write_json(
        &config.out.join(FINETUNE_SUMMARY),
        &FinetuneSummary {
            final_epoch: final_stats,
            best_epoch: outcome.best_epoch,
            audit: &outcome.audit,
            freeze: &outcome.freeze,
        },
    )?;
    if !outcome.freeze.passed {
        return Err(CliError::Data(format!(
            "freeze check failed: {}",
            outcome.freeze.violations.join("; ")
        )));
    }
    save_checkpoint(&outcome.model, &config.out.join(MODEL_FILE))?;
    Ok(())
}

fn write_prediction_file(path: &Path, records: &[PredictionRecord]) -> Result<(), CliError> {
    let mut w = io::BufWriter::new(File::create(path).map_err(io_err(path))?);
    write_predictions(records, &mut w)
        .and_then(|_| w.flush())
        .map_err(io_err(path))
}

fn cmd_predict(
    config: &RunConfig,
    partition: Option<Partition>,
    checkpoint: Option<&Path>,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    let (manifest, p) = eval_samples(config, partition)?;
    let ckpt = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| config.out.join(MODEL_FILE));
    let model = load_checkpoint(&ckpt)?;
    if model.metadata.template_id != config.prompt.template_id {
        log::warn!(
            "checkpoint was trained with template {:?}, config uses {:?}",
            model.metadata.template_id,
            config.prompt.template_id
        );
    }
    let records: Vec<FineTuneRecord> = manifest
        .partition(p)
        .iter()
        .map(FineTuneRecord::from)
        .collect();
    let encoded = encode_records(
        &model,
        &records,
        &FsImageStore::new(config.image_root()),
        &config.prompt.spec()?,
    )?;

    let predictions = encoded
        .iter()
        .map(|r| {
            let pass = model.forward(&r.features)?;
            let pred = crate::model::Prediction::from_logits(pass.logits);
            Ok(PredictionRecord {
                id: r.id.clone(),
                true_label: r.label,
                predicted: pred.label.into(),
                score: Some(pred.p_mismatch()),
            })
        })
        .collect::<Result<Vec<_>, ModelError>>()?;

    let path = config.out.join(predictions_file(SystemRole::FineTuned));
    write_prediction_file(&path, &predictions)?;
    say(
        stdout,
        format!(
            "wrote {} predictions for {} to {}",
            predictions.len(),
            p.as_str(),
            path.display()
        ),
    )
}

/// Answers probes with the untrained toy detector, in the same wire format
/// as a remote endpoint.
pub struct ToyTransport {
    model: DetectorModel,
}

impl ToyTransport {
    pub fn new(model: DetectorModel) -> Self {
        Self { model }
    }
}

#[derive(Deserialize)]
struct ProbeBody {
    prompt: String,
    image: String,
}

impl Transport for ToyTransport {
    fn post(&self, body: &str) -> Result<RawReply, TransportError> {
        let bad = |message: String| {
            Ok(RawReply {
                status: 400,
                body: message,
            })
        };
        let req: ProbeBody = match serde_json::from_str(body) {
            Ok(r) => r,
            Err(e) => return bad(e.to_string()),
        };
        let image = match base64::engine::general_purpose::STANDARD.decode(req.image) {
            Ok(b) => b,
            Err(e) => return bad(e.to_string()),
        };
        let prediction = match self.model.predict(&image, &req.prompt) {
            Ok(p) => p,
            Err(e) => return bad(e.to_string()),
        };
        let text = match prediction.label {
            crate::manifest::Label::Match => "Yes, the caption matches the image.",
            crate::manifest::Label::Mismatch => "No, the caption does not match the image.",
        };
        Ok(RawReply {
            status: 200,
            body: serde_json::json!({ "text": text }).to_string(),
        })
    }
}

fn cmd_zeroshot(
    config: &RunConfig,
    partition: Option<Partition>,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    let (manifest, p) = eval_samples(config, partition)?;
    let samples: &[Sample] = manifest.partition(p);
    let prompt = config.prompt.spec()?;
    let images = FsImageStore::new(config.image_root());
    let transcript = config.out.join(TRANSCRIPT_FILE);

    let records = match config.backend.active {
        BackendKind::Toy => {
            let backend = ChatBackendConfig {
                backoff_base_secs: 0.0,
                max_retries: 0,
                ..ChatBackendConfig::default()
            };
            let client =
                ChatClient::with_transport(backend, ToyTransport::new(config.initial_model()?))?;
            batch_probe(&client, samples, &images, &prompt, &transcript)?
        }
        BackendKind::Remote => {
            let remote = config.backend.remote.clone().expect("validated");
            let client = ChatClient::http(remote)?;
            batch_probe(&client, samples, &images, &prompt, &transcript)?
        }
    };

    let extractor = config.extractor()?;
    let answered = records.iter().filter(|r| r.is_answered()).count();
    let errors = records.len() - answered;
    let predictions: Vec<PredictionRecord> = samples
        .iter()
        .zip(&records)
        .map(|(s, r)| PredictionRecord {
            id: s.id.clone(),
            true_label: s.label,
            predicted: r
                .raw_response
                .as_deref()
                .map_or(Predicted::Unknown, |text| {
                    extractor.extract_verdict(text).value.into()
                }),
            score: None,
        })
        .collect();

    say(
        stdout,
        format!(
            "probed {} samples: {answered} answered, {errors} errors",
            records.len()
        ),
    )?;
    if answered == 0 {
        let first = records
            .iter()
            .find_map(|r| r.error.clone())
            .unwrap_or_default();
        return Err(CliError::Backend(format!(
            "no sample was answered; first error: {first}"
        )));
    }
    let path = config.out.join(predictions_file(SystemRole::ZeroShot));
    write_prediction_file(&path, &predictions)?;
    say(
        stdout,
        format!(
            "wrote {} predictions to {}",
            predictions.len(),
            path.display()
        ),
    )
}

fn parse_prediction_arg(arg: &str) -> Result<(SystemRole, PathBuf), CliError> {
    let (role, path) = arg
        .split_once(':')
        .ok_or_else(|| CliError::Config(format!("--predictions {arg:?}: expected ROLE:PATH")))?;
    let role = match role {
        "fine-tuned" => SystemRole::FineTuned,
        "zero-shot" => SystemRole::ZeroShot,
        other => {
            return Err(CliError::Config(format!(
                "unknown role {other:?}; expected fine-tuned or zero-shot"
            )))
        }
    };
    Ok((role, PathBuf::from(path)))
}

#[derive(Serialize)]
struct ReportFile<'a> {
    reports: &'a [MetricsReport],
    comparison: &'a Comparison,
}

fn cmd_evaluate(
    config: &RunConfig,
    prediction_args: &[String],
    baselines: Option<&Path>,
    gain_threshold: f64,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    let inputs: Vec<(SystemRole, PathBuf)> = if prediction_args.is_empty() {
        [SystemRole::FineTuned, SystemRole::ZeroShot]
            .into_iter()
            .map(|role| (role, config.out.join(predictions_file(role))))
            .filter(|(_, p)| p.exists())
            .collect()
    } else {
        prediction_args
            .iter()
            .map(|a| parse_prediction_arg(a))
            .collect::<Result<_, _>>()?
    };
    if inputs.is_empty() {
        return Err(CliError::Data(format!(
            "no prediction files given and none found in {}",
            config.out.display()
        )));
    }
    let table = match baselines {
        Some(p) => BaselineTable::load(p)?,
        None => BaselineTable::default(),
    };
    let extractor_version = config.extractor()?.version().to_string();

    let mut reports = Vec::with_capacity(inputs.len());
    for (role, path) in &inputs {
        let f = File::open(path).map_err(io_err(path))?;
        let records = read_predictions(BufReader::new(f))?;
        let report = score_predictions(
            &records,
            ReportMeta {
                system_name: role.default_name().to_string(),
                role: *role,
                split_name: config.split_name.clone(),
                extractor_version: (*role == SystemRole::ZeroShot)
                    .then(|| extractor_version.clone()),
            },
        )
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        reports.push(report);
    }

    let comparison = compare_report(&reports, &table, gain_threshold)?;
    for w in &comparison.warnings {
        log::warn!("{w}");
    }

    let mut text = String::new();
    for r in &reports {
        text.push_str(&r.to_string());
        text.push_str("\n\n");
    }
    text.push_str(&comparison.render_text());
    fs::write(config.out.join(REPORT_TEXT), &text)
        .map_err(io_err(&config.out.join(REPORT_TEXT)))?;
    write_json(
        &config.out.join(REPORT_JSON),
        &ReportFile {
            reports: &reports,
            comparison: &comparison,
        },
    )?;
    say(stdout, text.trim_end())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config_text(extra: &str) -> String {
        format!("manifest = \"m.jsonl\"\nsplit_name = \"Merged/Balanced\"\nout = \"run\"\n{extra}")
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let c = RunConfig::from_toml(&config_text("images = \"img\""), Path::new("/cfg")).unwrap();
        assert_eq!(c.manifest, PathBuf::from("/cfg/m.jsonl"));
        assert_eq!(c.out, PathBuf::from("/cfg/run"));
        assert_eq!(c.image_root(), PathBuf::from("/cfg/img"));
        assert_eq!(c.train, TrainConfig::default());
    }

    #[test]
    fn overrides_apply_and_seed_propagates() {
        let mut c = RunConfig::from_toml(&config_text("seed = 9"), Path::new("/")).unwrap();
        c.apply(&Overrides {
            epochs: Some(1),
            lr: Some(0.0),
            out: Some(PathBuf::from("/elsewhere")),
            ..Overrides::default()
        });
        assert_eq!(
            (c.train.epochs, c.train.learning_rate, c.train.seed),
            (1, 0.0, 9)
        );
        assert_eq!(c.out, PathBuf::from("/elsewhere"));
        assert!(c.validate().is_ok());
    }

    #[test]
    fn remote_backend_needs_its_block() {
        let c = RunConfig::from_toml(
            &config_text("[backend]\nactive = \"remote\""),
            Path::new("/"),
        )
        .unwrap();
        assert!(matches!(c.validate(), Err(CliError::Config(_))));
        let c = RunConfig::from_toml(
            &config_text("[backend]\nactive = \"remote\"\n[backend.remote]\nendpoint = \"http://localhost:1/x\""),
            Path::new("/"),
        )
        .unwrap();
        assert!(c.validate().is_ok());
    }

    #[test]
    fn bad_config_is_exit_two() {
        let err = RunConfig::from_toml(&config_text("bogus = 1"), Path::new("/")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let c =
            RunConfig::from_toml(&config_text("[train]\nbatch_size = 0"), Path::new("/")).unwrap();
        assert_eq!(c.validate().unwrap_err().exit_code(), 2);
        let c = RunConfig::from_toml(
            &config_text("[prompt]\ntemplate = \"{caption}\""),
            Path::new("/"),
        )
        .unwrap();
        assert_eq!(c.validate().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let lock = OutputLock::acquire(dir.path()).unwrap();
        assert!(matches!(
            OutputLock::acquire(dir.path()),
            Err(CliError::Config(_))
        ));
        drop(lock);
        assert!(OutputLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn prediction_args() {
        assert_eq!(
            parse_prediction_arg("zero-shot:a/b.jsonl").unwrap(),
            (SystemRole::ZeroShot, PathBuf::from("a/b.jsonl"))
        );
        assert!(parse_prediction_arg("ours:x").is_err());
        assert!(parse_prediction_arg("x").is_err());
    }

    #[test]
    fn error_classes() {
        assert_eq!(CliError::from(ChatError::Auth(401)).exit_code(), 4);
        assert_eq!(CliError::from(ChatError::EmptyBatch).exit_code(), 3);
        assert_eq!(CliError::from(TrainError::NoRecords).exit_code(), 3);
        assert_eq!(
            CliError::from(TrainError::Config("x".into())).exit_code(),
            2
        );
    }
}
