//! Subcommand flags, settings and drivers.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use skiprec::baselines::{self, BaselineCheckpointConfig, BaselineConfig, BASELINE_KIND};
use skiprec::checkpoint::Checkpoint;
use skiprec::dataset::{sha256_hex, Dataset, IngestConfig, MANIFEST_FILE};
use skiprec::eval::{self, MetricsFile, MetricsReport};
use skiprec::models::{Architecture, ModelConfig};
use skiprec::objective::{LossConfig, NegativeScope};
use skiprec::synthetic::{generate_dataset, SyntheticConfig, GROUND_TRUTH_FILE};
use skiprec::training::{self, ModelCheckpointConfig, TrainConfig, MODEL_KIND};
use skiprec::{Error, Result};

use crate::settings::{required, resolve, Resolved};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRAIN_LOG_FILE: &str = "train_log.ndjson";
pub const METRICS_FILE: &str = "metrics.json";
pub const RUN_MANIFEST_FILE: &str = "manifest.json";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(io_err(path))
}

fn write_run_manifest(
    path: &Path,
    command: &str,
    settings: &Map<String, Value>,
    inputs: Value,
    results: Value,
) -> Result<()> {
    let manifest = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "settings": settings,
        "inputs": inputs,
        "results": results,
    });
    write_bytes(path, (serde_json::to_string_pretty(&manifest)? + "\n").as_bytes())
}

/// Reads a dataset directory and checks it against its manifest.
fn load_dataset(dir: &Path) -> Result<Dataset> {
    let dataset = Dataset::read(dir)?;
    if dir.join(MANIFEST_FILE).exists() {
        let manifest = Dataset::read_manifest(dir)?;
        let hash = dataset.content_hash();
        if manifest.dataset_hash != hash {
            return Err(Error::Integrity(format!(
                "dataset in {} hashes to {hash} but its manifest records {}",
                dir.display(),
                manifest.dataset_hash
            )));
        }
    }
    Ok(dataset)
}

fn to_btree(values: &Map<String, Value>) -> BTreeMap<String, Value> {
    values.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
}

// ---------------------------------------------------------------- ingest

#[derive(Args, Serialize)]
pub struct IngestFlags {
    /// Flat JSON file with default settings; flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Event log to read.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output dataset directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// raw-log or pre-sessionized.
    #[arg(long)]
    schema: Option<String>,
    /// Inactivity gap that closes a session.
    #[arg(long)]
    gap_minutes: Option<i64>,
    /// Plays shorter than this are skips.
    #[arg(long)]
    skip_seconds: Option<i64>,
    #[arg(long)]
    min_events: Option<usize>,
    /// Longer sessions are chunked to this length.
    #[arg(long)]
    max_len: Option<usize>,
    /// Subsample sessions so this share contains a skip.
    #[arg(long)]
    skip_session_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IngestSettings {
    input: Option<PathBuf>,
    out: Option<PathBuf>,
    schema: String,
    gap_minutes: i64,
    skip_seconds: i64,
    min_events: usize,
    max_len: usize,
    skip_session_fraction: Option<f64>,
    seed: u64,
}

impl Default for IngestSettings {
    fn default() -> Self {
        IngestSettings {
            input: None,
            out: None,
            schema: "raw-log".into(),
            gap_minutes: 20,
            skip_seconds: 30,
            min_events: 5,
            max_len: 20,
            skip_session_fraction: None,
            seed: 0,
        }
    }
}

pub fn ingest(flags: IngestFlags) -> Result<()> {
    let r: Resolved<IngestSettings> = resolve(&flags, flags.config.as_deref())?;
    let s = &r.settings;
    let input = required(&s.input, "input")?;
    let out = required(&s.out, "out")?;
    let config = IngestConfig {
        schema: s.schema.parse()?,
        gap_seconds: s.gap_minutes.checked_mul(60).ok_or_else(|| {
            Error::Config(format!("gap_minutes {} is out of range", s.gap_minutes))
        })?,
        skip_seconds: s.skip_seconds,
        min_events: s.min_events,
        max_len: s.max_len,
        skip_session_fraction: s.skip_session_fraction,
        seed: s.seed,
    };
    config.validate()?;
    let bytes = read_bytes(&input)?;
    let dataset = skiprec::dataset::ingest(&bytes[..], &config)?;
    let mut settings = to_btree(&r.values);
    settings.insert("input_sha256".into(), json!(sha256_hex(&bytes)));
    let manifest = dataset.write(&out, settings)?;
    info!(
        "{} sessions, {} items, skip rate {:.4}",
        manifest.session_count, manifest.num_items, manifest.skip_rate
    );
    Ok(())
}

// ---------------------------------------------------------------- synth

#[derive(Args, Serialize)]
pub struct SynthFlags {
    /// Flat JSON file with default settings; flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Output dataset directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    catalog_size: Option<usize>,
    /// Dimension of the planted taste space.
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    sessions: Option<usize>,
    #[arg(long)]
    min_length: Option<usize>,
    #[arg(long)]
    max_length: Option<usize>,
    /// Plays with affinity below this are skipped.
    #[arg(long)]
    skip_threshold: Option<f64>,
    /// Probability of drawing the next track on-taste.
    #[arg(long)]
    coherence: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SynthSettings {
    out: Option<PathBuf>,
    catalog_size: usize,
    latent_dim: usize,
    sessions: usize,
    min_length: usize,
    max_length: usize,
    skip_threshold: f64,
    coherence: f64,
    seed: u64,
}

impl Default for SynthSettings {
    fn default() -> Self {
        let c = SyntheticConfig::default();
        SynthSettings {
            out: None,
            catalog_size: c.catalog_size,
            latent_dim: c.latent_dim,
            sessions: c.sessions,
            min_length: c.session_length_range.0,
            max_length: c.session_length_range.1,
            skip_threshold: c.skip_threshold,
            coherence: c.coherence,
            seed: c.seed,
        }
    }
}

pub fn synth(flags: SynthFlags) -> Result<()> {
    let r: Resolved<SynthSettings> = resolve(&flags, flags.config.as_deref())?;
    let s = &r.settings;
    let out = required(&s.out, "out")?;
    if s.min_length > s.max_length {
        return Err(Error::Conflict {
            first: "min_length".into(),
            second: "max_length".into(),
            message: format!("{} exceeds {}", s.min_length, s.max_length),
        });
    }
    if s.catalog_size < s.max_length {
        return Err(Error::Conflict {
            first: "catalog_size".into(),
            second: "max_length".into(),
            message: format!(
                "sessions never repeat a track, so {} items cannot fill {} plays",
                s.catalog_size, s.max_length
            ),
        });
    }
    let config = SyntheticConfig {
        catalog_size: s.catalog_size,
        latent_dim: s.latent_dim,
        sessions: s.sessions,
        session_length_range: (s.min_length, s.max_length),
        skip_threshold: s.skip_threshold,
        coherence: s.coherence,
        seed: s.seed,
    };
    let (dataset, truth) = generate_dataset(&config)?;
    let manifest = dataset.write(&out, to_btree(&r.values))?;
    truth.write(&out.join(GROUND_TRUTH_FILE))?;
    info!(
        "{} sessions, skip rate {:.4}, {:.1}% of sessions contain a skip",
        manifest.session_count,
        manifest.skip_rate,
        100.0 * manifest.sessions_with_skip
    );
    Ok(())
}

// ---------------------------------------------------------------- train

#[derive(Args, Serialize)]
pub struct TrainFlags {
    /// Flat JSON file with default settings; flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// gru4rec, caser, sasrec or bert4rec.
    #[arg(long)]
    model: Option<String>,
    /// Embedding dimension.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Masking rate (bert4rec only).
    #[arg(long)]
    mask_prob: Option<f64>,
    /// Caser window length.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    horizontal_filters: Option<usize>,
    #[arg(long)]
    vertical_filters: Option<usize>,
    /// Weight of the sampled-softmax term.
    #[arg(long)]
    alpha: Option<f64>,
    /// Weight of the contrastive skip term; 0 disables it.
    #[arg(long)]
    beta: Option<f64>,
    /// Sampled negatives per session.
    #[arg(long)]
    neg_samples: Option<usize>,
    /// all-session-skips or between-next-positive.
    #[arg(long)]
    nce_scope: Option<String>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Epochs without validation gain before stopping; 0 disables.
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainSettings {
    dataset: Option<PathBuf>,
    out: Option<PathBuf>,
    model: String,
    dim: usize,
    max_len: usize,
    blocks: usize,
    heads: usize,
    mask_prob: f64,
    window: usize,
    horizontal_filters: usize,
    vertical_filters: usize,
    alpha: f64,
    beta: f64,
    neg_samples: usize,
    nce_scope: String,
    lr: f64,
    epochs: usize,
    batch_size: usize,
    patience: usize,
    seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let m = ModelConfig::new(Architecture::CausalAttention, 0);
        let l = LossConfig::default();
        let t = TrainConfig::default();
        TrainSettings {
            dataset: None,
            out: None,
            model: m.architecture.name().into(),
            dim: m.embed_dim,
            max_len: m.max_len,
            blocks: m.blocks,
            heads: m.heads,
            mask_prob: m.mask_prob,
            window: m.window,
            horizontal_filters: m.horizontal_filters,
            vertical_filters: m.vertical_filters,
            alpha: l.alpha,
            beta: l.beta,
            neg_samples: l.num_negatives,
            nce_scope: "all-session-skips".into(),
            lr: t.learning_rate,
            epochs: t.epochs,
            batch_size: t.batch_size,
            patience: t.patience,
            seed: t.seed,
        }
    }
}

fn model_config(r: &Resolved<TrainSettings>, vocab_size: usize) -> Result<ModelConfig> {
    let s = &r.settings;
    let arch: Architecture = s.model.parse()?;
    if r.is_explicit("mask_prob") && arch != Architecture::BidirectionalAttention {
        return Err(Error::Conflict {
            first: "mask_prob".into(),
            second: "model".into(),
            message: format!("masking only applies to bert4rec, not {}", arch.name()),
        });
    }
    if arch.is_attention() && (s.heads == 0 || s.dim % s.heads != 0) {
        return Err(Error::Conflict {
            first: "dim".into(),
            second: "heads".into(),
            message: format!("dim {} is not divisible by {} heads", s.dim, s.heads),
        });
    }
    let mut c = ModelConfig::new(arch, vocab_size);
    c.embed_dim = s.dim;
    c.max_len = s.max_len;
    c.blocks = s.blocks;
    c.heads = s.heads;
    c.mask_prob = s.mask_prob;
    c.window = s.window;
    c.horizontal_filters = s.horizontal_filters;
    c.vertical_filters = s.vertical_filters;
    c.validate()?;
    Ok(c)
}

pub fn train(flags: TrainFlags) -> Result<()> {
    let r: Resolved<TrainSettings> = resolve(&flags, flags.config.as_deref())?;
    let s = &r.settings;
    let dataset_dir = required(&s.dataset, "dataset")?;
    let out = required(&s.out, "out")?;
    let loss = LossConfig {
        alpha: s.alpha,
        beta: s.beta,
        num_negatives: s.neg_samples,
        nce_negative_scope: s.nce_scope.parse::<NegativeScope>()?,
    };
    let train_config = TrainConfig {
        learning_rate: s.lr,
        epochs: s.epochs,
        batch_size: s.batch_size,
        seed: s.seed,
        patience: s.patience,
        ..TrainConfig::default()
    };
    let dataset = load_dataset(&dataset_dir)?;
    let model_cfg = model_config(&r, dataset.vocab.len())?;

    let outcome = training::train_with(&dataset, model_cfg.clone(), &loss, &train_config, |rec| {
        info!(
            "epoch {:>3}  nll {:.4}  nce {:.4}  combined {:.4}  val_hr10 {:.4}",
            rec.epoch, rec.nll, rec.nce, rec.combined, rec.val_hr10
        );
    })?;

    let mut log = String::new();
    for rec in &outcome.log {
        log.push_str(&rec.to_ndjson()?);
    }
    write_bytes(&out.join(TRAIN_LOG_FILE), log.as_bytes())?;
    let vocab_hash = dataset.vocab.hash();
    let dataset_hash = dataset.content_hash();
    let ckpt_cfg = ModelCheckpointConfig {
        model: model_cfg,
        loss,
        train: train_config,
        dataset_hash: dataset_hash.clone(),
        best_epoch: outcome.best_epoch,
        val_hr10: outcome.best_val_hr10,
    };
    training::model_checkpoint(&outcome.model, &ckpt_cfg, &vocab_hash)?
        .write(&out.join(CHECKPOINT_FILE))?;
    write_run_manifest(
        &out.join(RUN_MANIFEST_FILE),
        "train",
        &r.values,
        json!({"dataset_hash": dataset_hash, "vocab_hash": vocab_hash}),
        json!({
            "best_epoch": outcome.best_epoch,
            "best_val_hr10": outcome.best_val_hr10,
            "epochs_run": outcome.log.len(),
            "stopped_early": outcome.stopped_early,
            "short_negative_sessions": outcome.short_negative_sessions,
            "aborted": outcome.aborted.as_ref().map(|e| e.to_string()),
        }),
    )?;
    match outcome.aborted {
        Some(e) => {
            warn!("training diverged; kept the checkpoint of epoch {}", outcome.best_epoch);
            Err(e)
        }
        None => {
            info!(
                "best epoch {} with val_hr10 {:.4}",
                outcome.best_epoch, outcome.best_val_hr10
            );
            Ok(())
        }
    }
}

// ---------------------------------------------------------------- eval

#[derive(Args, Serialize)]
pub struct EvalFlags {
    /// Flat JSON file with default settings; flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output directory for metrics.json and manifest.json.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Model label written into the metrics file.
    #[arg(long)]
    name: Option<String>,
}

#[derive(Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct EvalSettings {
    checkpoint: Option<PathBuf>,
    dataset: Option<PathBuf>,
    out: Option<PathBuf>,
    name: Option<String>,
}

/// Test metrics of a stored encoder or baseline, with its label and seed.
fn evaluate_checkpoint(ckpt: &Checkpoint, dataset: &Dataset) -> Result<(String, u64, MetricsReport)> {
    match ckpt.kind.as_str() {
        MODEL_KIND => {
            let (model, cfg) = training::load_model(ckpt)?;
            let report = eval::evaluate(&model, &ckpt.vocab_hash, dataset)?;
            Ok((cfg.model.architecture.name().to_string(), cfg.train.seed, report))
        }
        BASELINE_KIND => {
            let (params, cfg) = baselines::load_baseline(ckpt)?;
            if ckpt.vocab_hash != dataset.vocab.hash() {
                return Err(Error::Integrity(
                    "checkpoint vocabulary hash does not match the dataset".into(),
                ));
            }
            if cfg.dataset_hash != dataset.content_hash() {
                return Err(Error::Integrity(
                    "baseline session factors belong to a different dataset".into(),
                ));
            }
            let report = baselines::evaluate(&params, dataset)?;
            Ok((cfg.baseline.name(), cfg.baseline.seed, report))
        }
        other => Err(Error::Integrity(format!("unknown checkpoint kind `{other}`"))),
    }
}

pub fn eval(flags: EvalFlags) -> Result<()> {
    let r: Resolved<EvalSettings> = resolve(&flags, flags.config.as_deref())?;
    let s = &r.settings;
    let ckpt_path = required(&s.checkpoint, "checkpoint")?;
    let dataset_dir = required(&s.dataset, "dataset")?;
    let out = required(&s.out, "out")?;
    let ckpt_bytes = read_bytes(&ckpt_path)?;
    let ckpt = Checkpoint::from_bytes(&ckpt_bytes, &ckpt_path)?;
    let dataset = load_dataset(&dataset_dir)?;
    let (label, seed, report) = evaluate_checkpoint(&ckpt, &dataset)?;
    let metrics = MetricsFile {
        model: s.name.clone().unwrap_or(label),
        dataset_hash: dataset.content_hash(),
        seed,
        report,
    };
    write_bytes(&out.join(METRICS_FILE), metrics.to_json()?.as_bytes())?;
    write_run_manifest(
        &out.join(RUN_MANIFEST_FILE),
        "eval",
        &r.values,
        json!({
            "checkpoint_sha256": sha256_hex(&ckpt_bytes),
            "dataset_hash": metrics.dataset_hash,
        }),
        json!({"metrics": METRICS_FILE}),
    )?;
    info!(
        "{}: hr10 {:.4}  map10 {:.4}  skip_mrr10 {}",
        metrics.model,
        metrics.report.hr10,
        metrics.report.map10,
        metrics.report.skip_mrr10.map_or("n/a".into(), |v| format!("{v:.4}"))
    );
    Ok(())
}

// ---------------------------------------------------------------- baseline

#[derive(Args, Serialize)]
pub struct BaselineFlags {
    /// Flat JSON file with default settings; flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// wrmf or bpr.
    #[arg(long)]
    method: Option<String>,
    /// orig, bl or nr.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    factors: Option<usize>,
    #[arg(long)]
    regularization: Option<f64>,
    /// WRMF confidence slope.
    #[arg(long)]
    confidence: Option<f64>,
    /// WRMF sweeps.
    #[arg(long)]
    iterations: Option<usize>,
    /// BPR step size.
    #[arg(long)]
    lr: Option<f64>,
    /// BPR passes.
    #[arg(long)]
    epochs: Option<usize>,
    /// Skipped negatives per unseen negative for the nr variant.
    #[arg(long)]
    skip_ratio: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BaselineSettings {
    dataset: Option<PathBuf>,
    out: Option<PathBuf>,
    method: String,
    variant: String,
    factors: usize,
    regularization: f64,
    confidence: f64,
    iterations: usize,
    lr: f64,
    epochs: usize,
    skip_ratio: f64,
    seed: u64,
}

impl Default for BaselineSettings {
    fn default() -> Self {
        let c = BaselineConfig::new(baselines::Method::Wrmf, baselines::Variant::Orig);
        BaselineSettings {
            dataset: None,
            out: None,
            method: c.method.to_string(),
            variant: c.variant.to_string(),
            factors: c.factors,
            regularization: c.regularization,
            confidence: c.confidence,
            iterations: c.iterations,
            lr: c.learning_rate,
            epochs: c.epochs,
            skip_ratio: c.skip_ratio,
            seed: c.seed,
        }
    }
}

pub fn baseline(flags: BaselineFlags) -> Result<()> {
    let r: Resolved<BaselineSettings> = resolve(&flags, flags.config.as_deref())?;
    let s = &r.settings;
    let dataset_dir = required(&s.dataset, "dataset")?;
    let out = required(&s.out, "out")?;
    let config = BaselineConfig {
        method: s.method.parse()?,
        variant: s.variant.parse()?,
        factors: s.factors,
        regularization: s.regularization,
        confidence: s.confidence,
        iterations: s.iterations,
        learning_rate: s.lr,
        epochs: s.epochs,
        skip_ratio: s.skip_ratio,
        seed: s.seed,
    };
    config.validate()?;
    let dataset = load_dataset(&dataset_dir)?;
    let params = baselines::fit(&dataset, &config)?;
    let report = baselines::evaluate(&params, &dataset)?;
    let dataset_hash = dataset.content_hash();
    let vocab_hash = dataset.vocab.hash();
    let ckpt_cfg = BaselineCheckpointConfig {
        baseline: config.clone(),
        dataset_hash: dataset_hash.clone(),
    };
    baselines::baseline_checkpoint(&params, &ckpt_cfg, &vocab_hash)?
        .write(&out.join(CHECKPOINT_FILE))?;
    let metrics = MetricsFile {
        model: config.name(),
        dataset_hash: dataset_hash.clone(),
        seed: config.seed,
        report,
    };
    write_bytes(&out.join(METRICS_FILE), metrics.to_json()?.as_bytes())?;
    write_run_manifest(
        &out.join(RUN_MANIFEST_FILE),
        "baseline",
        &r.values,
        json!({"dataset_hash": dataset_hash, "vocab_hash": vocab_hash}),
        json!({"metrics": METRICS_FILE}),
    )?;
    info!("{}: hr10 {:.4}  map10 {:.4}", metrics.model, metrics.report.hr10, metrics.report.map10);
    Ok(())
}

// ---------------------------------------------------------------- compare / report

fn read_metrics(path: &Path) -> Result<(MetricsFile, String)> {
    let bytes = read_bytes(path)?;
    let file = serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: format!("not a metrics file: {e}"),
    })?;
    Ok((file, sha256_hex(&bytes)))
}

/// Prints `text`, or writes it to `out` with a manifest beside it.
fn emit(
    text: &str,
    out: Option<&Path>,
    command: &str,
    settings: &Map<String, Value>,
    inputs: Value,
) -> Result<()> {
    match out {
        None => {
            print!("{text}");
            Ok(())
        }
        Some(path) => {
            write_bytes(path, text.as_bytes())?;
            let mut name = path.as_os_str().to_owned();
            name.push(".manifest.json");
            write_run_manifest(Path::new(&name), command, settings, inputs, json!({}))
        }
    }
}

#[derive(Args, Serialize)]
pub struct CompareFlags {
    /// Flat JSON file with default settings; flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Reference metrics file.
    a: Option<PathBuf>,
    /// Metrics file compared against A.
    b: Option<PathBuf>,
    /// Write the comparison here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct CompareSettings {
    a: Option<PathBuf>,
    b: Option<PathBuf>,
    out: Option<PathBuf>,
}

pub fn compare(flags: CompareFlags) -> Result<()> {
    let r: Resolved<CompareSettings> = resolve(&flags, flags.config.as_deref())?;
    let s = &r.settings;
    let (a, ha) = read_metrics(&required(&s.a, "a")?)?;
    let (b, hb) = read_metrics(&required(&s.b, "b")?)?;
    let deltas = eval::compare(&a, &b)?;
    let text = eval::render_comparison(&a, &b, &deltas);
    emit(&text, s.out.as_deref(), "compare", &r.values, json!({"a_sha256": ha, "b_sha256": hb}))
}

#[derive(Args, Serialize)]
pub struct ReportFlags {
    /// Flat JSON file with default settings; flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Metrics files; the first is the reference row.
    metrics: Option<Vec<PathBuf>>,
    /// Write the table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ReportSettings {
    metrics: Vec<PathBuf>,
    out: Option<PathBuf>,
}

pub fn report(flags: ReportFlags) -> Result<()> {
    let r: Resolved<ReportSettings> = resolve(&flags, flags.config.as_deref())?;
    let s = &r.settings;
    let mut files = Vec::new();
    let mut hashes = Vec::new();
    for p in &s.metrics {
        let (f, h) = read_metrics(p)?;
        files.push(f);
        hashes.push(h);
    }
    let text = eval::render_report(&files)?;
    emit(&text, s.out.as_deref(), "report", &r.values, json!({"metrics_sha256": hashes}))
}
