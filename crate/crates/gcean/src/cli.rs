//! Command-line surface: dataset generation, training, evaluation,
//! prediction, and diagnostics. Human summaries go to stdout, data goes
//! to files, and exit codes are stable: 0 success, 1 IO, 2 bad
//! flags/config, 3 non-finite loss, 4 missing annotations.

use crate::data::{load_paired_dataset, DataError, EventAnnotation, PairedDataset};
use crate::metrics::{self, SampleEval};
use crate::params::{CkptError, ParamStore};
use crate::synthgen::{generate_benchmark, load_benchmark_index, GenError, GeneratorConfig};
use crate::trainer::{
    self, fit, fit_source_only, TrainConfig, TrainError, TrainMode, TrainResult, View,
};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NON_FINITE: i32 = 3;
pub const EXIT_NO_ANNOTATIONS: i32 = 4;

#[derive(Debug)]
pub enum CliError {
    Io(String),
    Config(String),
    NonFinite(String),
    NoAnnotations(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Io(_) => EXIT_IO,
            CliError::Config(_) => EXIT_CONFIG,
            CliError::NonFinite(_) => EXIT_NON_FINITE,
            CliError::NoAnnotations(_) => EXIT_NO_ANNOTATIONS,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Io(m)
            | CliError::Config(m)
            | CliError::NonFinite(m)
            | CliError::NoAnnotations(m) => m,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Io(format!("data error: {e}"))
    }
}

impl From<GenError> for CliError {
    fn from(e: GenError) -> Self {
        match e {
            GenError::Io { .. } => CliError::Io(format!("{e}")),
            GenError::Data(d) => d.into(),
            other => CliError::Config(format!("{other}")),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } => CliError::NonFinite(format!("{e}")),
            TrainError::MissingAnnotations => CliError::NoAnnotations(format!("{e}")),
            TrainError::Config(_) | TrainError::EmptyDataset(_) => {
                CliError::Config(format!("{e}"))
            }
            other => CliError::Config(format!("{other}")),
        }
    }
}

impl From<CkptError> for CliError {
    fn from(e: CkptError) -> Self {
        CliError::Io(format!("checkpoint error: {e}"))
    }
}

fn io_at(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Parser)]
#[command(
    name = "gcean",
    about = "Gaze-guided cross-view adaptation for dense activity captioning",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic paired-view benchmark.
    GenData(GenDataArgs),
    /// Train a model on a benchmark split pair.
    Train(TrainArgs),
    /// Decode a split and score it against its annotations.
    Eval(EvalArgs),
    /// Decode a split without scoring (no annotations needed).
    Predict(PredictArgs),
    /// Dump representation distances, attention entropies, and
    /// parameter counts for a checkpoint.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Generator config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Benchmark seed; falls back to GCEAN_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for the benchmark tree.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum DirectionArg {
    /// Annotated source view adapts toward the unannotated target view.
    Src2tgt,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum AblateArg {
    /// Drop the frame-branch alignment losses.
    SalmF,
    /// Drop the gaze-branch alignment losses.
    SalmG,
    /// Drop the attention consistency loss.
    GccmA,
    /// Drop the prototype consistency loss.
    GccmP,
}

#[derive(Args)]
struct TrainArgs {
    /// Benchmark index written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Training config (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (checkpoint, history, manifest).
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed; falls back to GCEAN_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Adaptation direction; only the as-generated pairing exists.
    #[arg(long, value_enum, default_value = "src2tgt")]
    direction: DirectionArg,
    /// Train on the source view only, with every alignment loss off.
    #[arg(long)]
    source_only: bool,
    /// Disable one loss group; repeatable.
    #[arg(long = "ablate", value_enum)]
    ablate: Vec<AblateArg>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ViewArg {
    Source,
    Target,
}

impl ViewArg {
    fn view(self) -> View {
        match self {
            ViewArg::Source => View::Source,
            ViewArg::Target => View::Target,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by train.
    #[arg(long)]
    ckpt: PathBuf,
    /// Benchmark index.
    #[arg(long)]
    data: PathBuf,
    /// Split to evaluate.
    #[arg(long, default_value = "test")]
    split: String,
    /// Which view of each pair to decode and score.
    #[arg(long, value_enum, default_value = "target")]
    view: ViewArg,
    /// Output directory (predictions, report, manifest).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, value_enum, default_value = "target")]
    view: ViewArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Split whose pairs feed the distance and entropy reports.
    #[arg(long, default_value = "val")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

/// Seed precedence: explicit flag, then the GCEAN_SEED environment
/// value, then the config (or zero where no config carries one).
fn resolve_seed(flag: Option<u64>, env: Option<&str>, config: u64) -> Result<u64, CliError> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Some(raw) = env {
        return raw
            .trim()
            .parse::<u64>()
            .map_err(|_| CliError::Config(format!("GCEAN_SEED must be an unsigned integer, got {raw:?}")));
    }
    Ok(config)
}

/// Unix timestamp for manifests; SOURCE_DATE_EPOCH pins it for
/// reproducible runs.
fn resolve_timestamp(env: Option<&str>) -> Result<u64, CliError> {
    if let Some(raw) = env {
        return raw.trim().parse::<u64>().map_err(|_| {
            CliError::Config(format!("SOURCE_DATE_EPOCH must be an unsigned integer, got {raw:?}"))
        });
    }
    Ok(std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0))
}

fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

/// Written to `<out>/run_manifest.json` before any other output.
#[derive(Serialize)]
struct RunManifest {
    command: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<String>,
    seed: u64,
    out_dir: String,
    input_hash: String,
    timestamp_unix: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    variant: Option<String>,
}

fn manifest_json(m: &RunManifest) -> String {
    let mut s = serde_json::to_string_pretty(m).expect("manifest serialization cannot fail");
    s.push('\n');
    s
}

fn write_run_manifest(out_dir: &Path, m: &RunManifest) -> Result<(), CliError> {
    std::fs::create_dir_all(out_dir).map_err(|e| io_at(out_dir, e))?;
    let path = out_dir.join("run_manifest.json");
    std::fs::write(&path, manifest_json(m)).map_err(|e| io_at(&path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| io_at(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_at(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| io_at(path, e))
}

/// Loads one split of a benchmark at the index's sequence length.
fn load_split(index_path: &Path, split: &str) -> Result<PairedDataset, CliError> {
    let index = load_benchmark_index(index_path)?;
    let rel = index.splits.get(split).ok_or_else(|| {
        CliError::Config(format!(
            "split {split:?} not present in {} (have: {})",
            index_path.display(),
            index.splits.keys().cloned().collect::<Vec<_>>().join(", ")
        ))
    })?;
    let base = index_path.parent().unwrap_or_else(|| Path::new("."));
    Ok(load_paired_dataset(&base.join(rel), index.l)?)
}

fn load_checkpoint(path: &Path) -> Result<(ParamStore, TrainConfig, u64), CliError> {
    if !path.exists() {
        return Err(CliError::Config(format!("checkpoint not found: {}", path.display())));
    }
    let (store, config_json, seed) = ParamStore::load(path)?;
    let cfg: TrainConfig = serde_json::from_str(&config_json)
        .map_err(|e| CliError::Config(format!("checkpoint config does not parse: {e}")))?;
    Ok((store, cfg, seed))
}

fn cmd_gen_data(a: &GenDataArgs) -> Result<(), CliError> {
    let raw = read_file(&a.config)?;
    let cfg: GeneratorConfig = serde_json::from_slice(&raw)
        .map_err(|e| CliError::Config(format!("{}: {e}", a.config.display())))?;
    let seed = resolve_seed(a.seed, std::env::var("GCEAN_SEED").ok().as_deref(), 0)?;
    let timestamp = resolve_timestamp(std::env::var("SOURCE_DATE_EPOCH").ok().as_deref())?;
    write_run_manifest(
        &a.out,
        &RunManifest {
            command: "gen-data".into(),
            config: Some(a.config.display().to_string()),
            seed,
            out_dir: a.out.display().to_string(),
            input_hash: sha256_hex(&[&raw, &seed.to_le_bytes()]),
            timestamp_unix: timestamp,
            variant: None,
        },
    )?;
    let index_path = generate_benchmark(&cfg, seed, &a.out)?;
    println!("benchmark index: {}", index_path.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = match &a.config {
        Some(path) => {
            let raw = read_file(path)?;
            serde_json::from_slice::<TrainConfig>(&raw)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    cfg.seed = resolve_seed(a.seed, std::env::var("GCEAN_SEED").ok().as_deref(), cfg.seed)?;
    for flag in &a.ablate {
        match flag {
            AblateArg::SalmF => cfg.ablate_salm_frame = true,
            AblateArg::SalmG => cfg.ablate_salm_gaze = true,
            AblateArg::GccmA => cfg.ablate_gccm_a = true,
            AblateArg::GccmP => cfg.ablate_gccm_p = true,
        }
    }
    cfg.validate()?;

    let index_raw = read_file(&a.data)?;
    let train_set = load_split(&a.data, "train")?;
    let val_set = load_split(&a.data, "val")?;

    let cfg_json = serde_json::to_string(&cfg).expect("config serialization cannot fail");
    let timestamp = resolve_timestamp(std::env::var("SOURCE_DATE_EPOCH").ok().as_deref())?;
    let variant = if a.source_only { "source_only" } else { "full" };
    write_run_manifest(
        &a.out,
        &RunManifest {
            command: "train".into(),
            config: a.config.as_ref().map(|p| p.display().to_string()),
            seed: cfg.seed,
            out_dir: a.out.display().to_string(),
            input_hash: sha256_hex(&[cfg_json.as_bytes(), &index_raw]),
            timestamp_unix: timestamp,
            variant: Some(variant.into()),
        },
    )?;

    let result: TrainResult = if a.source_only {
        fit_source_only(&cfg, &train_set, &val_set)?
    } else {
        fit(&cfg, TrainMode::Full, &train_set, &val_set)?
    };

    let history_path = a.out.join("history.jsonl");
    trainer::write_history_jsonl(&history_path, &result.history)
        .map_err(|e| io_at(&history_path, e))?;
    let ckpt_path = a.out.join("checkpoint");
    result.best_params.save(&ckpt_path, &cfg_json, cfg.seed)?;

    let best = &result.history[result.best_epoch.saturating_sub(1)];
    println!(
        "trained {} epochs ({variant}); best epoch {} with val SODA_tIoU {:.4}",
        result.history.len(),
        result.best_epoch,
        best.val_soda_tiou
    );
    if result.stopped_early {
        println!("stopped early: no improvement for {} epochs", cfg.patience);
    }
    println!("checkpoint: {}", ckpt_path.display());
    println!("history: {}", history_path.display());
    Ok(())
}

/// Decodes every pair of a split and writes one prediction file each;
/// returns the predictions paired with that view's annotations when
/// they exist.
fn write_predictions(
    store: &ParamStore,
    cfg: &TrainConfig,
    data: &PairedDataset,
    view: View,
    out: &Path,
) -> Result<Vec<(Vec<EventAnnotation>, Option<Vec<EventAnnotation>>)>, CliError> {
    let dir = out.join("predictions");
    let mut rows = Vec::with_capacity(data.pairs.len());
    for pair in &data.pairs {
        let file = trainer::predict_pair(store, cfg, pair, view, &data.vocab)?;
        let mut body = serde_json::to_string_pretty(&file)
            .map_err(|e| CliError::Io(format!("prediction serialization: {e}")))?;
        body.push('\n');
        write_file(&dir.join(format!("pair{:04}.json", pair.index)), body.as_bytes())?;
        let gts = match view {
            View::Source => Some(pair.source_events.clone()),
            View::Target => pair.target_events.as_ref().map(|e| e.read().clone()),
        };
        rows.push((trainer::prediction_annotations(&file), gts));
    }
    Ok(rows)
}

fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let (store, cfg, seed) = load_checkpoint(&a.ckpt)?;
    let index_raw = read_file(&a.data)?;
    let data = load_split(&a.data, &a.split)?;
    if a.view == ViewArg::Target && data.pairs.iter().any(|p| p.target_events.is_none()) {
        return Err(CliError::NoAnnotations(format!(
            "split {:?} carries no target-view annotations",
            a.split
        )));
    }

    let ckpt_raw = read_file(&a.ckpt)?;
    let timestamp = resolve_timestamp(std::env::var("SOURCE_DATE_EPOCH").ok().as_deref())?;
    write_run_manifest(
        &a.out,
        &RunManifest {
            command: "eval".into(),
            config: None,
            seed,
            out_dir: a.out.display().to_string(),
            input_hash: sha256_hex(&[&ckpt_raw, &index_raw]),
            timestamp_unix: timestamp,
            variant: None,
        },
    )?;

    let rows = write_predictions(&store, &cfg, &data, a.view.view(), &a.out)?;
    let samples: Vec<SampleEval> = rows
        .into_iter()
        .map(|(preds, gts)| SampleEval {
            preds,
            gts: gts.expect("annotation presence was checked above"),
        })
        .collect();
    let report = metrics::evaluate_dataset(&samples);

    let mut json = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Io(format!("report serialization: {e}")))?;
    json.push('\n');
    write_file(&a.out.join("eval_report.json"), json.as_bytes())?;
    write_file(&a.out.join("eval_report.csv"), report.to_csv().as_bytes())?;

    println!(
        "evaluated {} pairs on split {} ({:?} view)",
        report.n_samples, a.split, a.view
    );
    println!("dvc_B4     {:.6}", report.dvc_b4);
    println!("dvc_C      {:.6}", report.dvc_c);
    println!("SODA_C     {:.6}", report.soda_c);
    println!("SODA_tIoU  {:.6}", report.soda_tiou);
    println!("report: {}", a.out.join("eval_report.json").display());
    Ok(())
}

fn cmd_predict(a: &PredictArgs) -> Result<(), CliError> {
    let (store, cfg, seed) = load_checkpoint(&a.ckpt)?;
    let index_raw = read_file(&a.data)?;
    let data = load_split(&a.data, &a.split)?;
    let ckpt_raw = read_file(&a.ckpt)?;
    let timestamp = resolve_timestamp(std::env::var("SOURCE_DATE_EPOCH").ok().as_deref())?;
    write_run_manifest(
        &a.out,
        &RunManifest {
            command: "predict".into(),
            config: None,
            seed,
            out_dir: a.out.display().to_string(),
            input_hash: sha256_hex(&[&ckpt_raw, &index_raw]),
            timestamp_unix: timestamp,
            variant: None,
        },
    )?;
    let rows = write_predictions(&store, &cfg, &data, a.view.view(), &a.out)?;
    println!(
        "decoded {} pairs on split {} ({:?} view) into {}",
        rows.len(),
        a.split,
        a.view,
        a.out.join("predictions").display()
    );
    Ok(())
}

fn cmd_inspect(a: &InspectArgs) -> Result<(), CliError> {
    let (store, cfg, seed) = load_checkpoint(&a.ckpt)?;
    let index_raw = read_file(&a.data)?;
    let data = load_split(&a.data, &a.split)?;
    let ckpt_raw = read_file(&a.ckpt)?;
    let timestamp = resolve_timestamp(std::env::var("SOURCE_DATE_EPOCH").ok().as_deref())?;
    write_run_manifest(
        &a.out,
        &RunManifest {
            command: "inspect".into(),
            config: None,
            seed,
            out_dir: a.out.display().to_string(),
            input_hash: sha256_hex(&[&ckpt_raw, &index_raw]),
            timestamp_unix: timestamp,
            variant: None,
        },
    )?;

    let distances = trainer::representation_distances(&store, &cfg, &data)?;
    write_file(
        &a.out.join("distances.csv"),
        trainer::distance_report_csv(&distances).as_bytes(),
    )?;
    let attention = trainer::inspect_attention(&store, &cfg, &data)?;
    write_file(&a.out.join("attention.csv"), trainer::inspect_csv(&attention).as_bytes())?;

    let mut params_csv = String::from("segment,scalars\n");
    for (segment, count) in store.segment_counts() {
        println!("params {segment}: {count}");
        params_csv.push_str(&format!("{segment},{count}\n"));
    }
    println!("params total: {}", store.total_scalars());
    params_csv.push_str(&format!("total,{}\n", store.total_scalars()));
    write_file(&a.out.join("params.csv"), params_csv.as_bytes())?;

    println!("distances: {}", a.out.join("distances.csv").display());
    println!("attention: {}", a.out.join("attention.csv").display());
    Ok(())
}

/// Parses `args` (argv[0] included) and runs one command, mapping every
/// failure to its documented exit code.
pub fn run<S: AsRef<str>>(args: &[S]) -> i32 {
    let cli = match Cli::try_parse_from(args.iter().map(|s| s.as_ref())) {
        Ok(c) => c,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    EXIT_OK
                }
                _ => {
                    eprint!("{e}");
                    EXIT_CONFIG
                }
            };
        }
    };
    let result = match &cli.cmd {
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Predict(a) => cmd_predict(a),
        Cmd::Inspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

pub fn run_from_env() -> i32 {
    let args: Vec<String> = std::env::args().collect();
    run(&args)
}
