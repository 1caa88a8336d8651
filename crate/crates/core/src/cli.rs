//! The `fbe` command-line tool.
//!
//! Every command accepts `--config FILE` (TOML). Keys mirror the long flag
//! names with `-` replaced by `_`; the score spec lives in a `[score]`
//! table. Flags override file values, which override defaults. Relative
//! paths in a config file are resolved against the file's directory.
//!
//! Exit codes: 0 success, 1 runtime or data error, 2 usage or config error.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::bank::{
    load_bank, load_head, save_bank, save_head, BankFormat, FeatureBank, LinearHead,
};
use crate::error::Error;
use crate::fbe::{
    clamp_bank_with_stats, fit_boundaries, load_boundaries, save_boundaries, DeviationBoundaries,
};
use crate::metrics::{EvalSet, Report};
use crate::scores::{clip_above, react_threshold, ScoreBatch, ScoreKind, ScoreSpec, Scorer};
use crate::synth::{generate, Manifest, ManifestFile, SynthConfig};
use crate::theory::{sweep_surface, GridPoint, SimConfig, MIN_RECOMMENDED_TRIALS};
use crate::VERSION;

#[derive(Debug, Parser)]
#[command(
    name = "fbe",
    version,
    about = "Feature bank enhancement for OOD detection"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit percentile boundaries on a training bank.
    Fit(FitArgs),
    /// Clamp a bank onto previously fitted boundaries.
    Apply(ApplyArgs),
    /// Score ID and OOD queries with and without FBE; report AUROC / FPR95.
    Eval(EvalArgs),
    /// Evaluate a list of percentiles; emit `lambda,auroc,fpr95` CSV.
    Sweep(SweepArgs),
    /// Monte Carlo surface of Pr{d_in < d_out} with and without clamping.
    Simulate(SimulateArgs),
    /// Generate a synthetic near/far-OOD benchmark.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ReactScope {
    /// Clip only the queries.
    Queries,
    /// Clip the bank too, before FBE fitting and scoring.
    Both,
}

impl ReactScope {
    fn name(self) -> &'static str {
        match self {
            ReactScope::Queries => "queries",
            ReactScope::Both => "both",
        }
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// TOML config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training feature bank (`.fbnk` binary or `.csv`).
    #[arg(long)]
    pub bank: Option<PathBuf>,
    /// CSV banks carry a trailing integer label column.
    #[arg(long)]
    pub labels: bool,
    /// Retention percentile in [0, 100].
    #[arg(long, allow_negative_numbers = true)]
    pub lambda: Option<f64>,
    /// Output boundaries file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ApplyArgs {
    /// TOML config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training feature bank (`.fbnk` binary or `.csv`).
    #[arg(long)]
    pub bank: Option<PathBuf>,
    /// CSV banks carry a trailing integer label column.
    #[arg(long)]
    pub labels: bool,
    /// Boundaries file from `fbe fit`.
    #[arg(long)]
    pub boundaries: Option<PathBuf>,
    /// Output bank file (binary format).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Score function.
    #[arg(long, value_enum)]
    pub score: Option<ScoreKindArg>,
    /// Neighbour rank for knn and nnguide.
    #[arg(long)]
    pub k: Option<usize>,
    /// Energy temperature.
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Enable ReAct clipping at this percentile of the bank.
    #[arg(long)]
    pub react_percentile: Option<f64>,
    /// Which features ReAct clips.
    #[arg(long, value_enum)]
    pub react_scope: Option<ReactScope>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScoreKindArg {
    Knn,
    Mahalanobis,
    Nnguide,
    Energy,
    Msp,
    Maxlogit,
}

impl From<ScoreKindArg> for ScoreKind {
    fn from(k: ScoreKindArg) -> Self {
        match k {
            ScoreKindArg::Knn => ScoreKind::Knn,
            ScoreKindArg::Mahalanobis => ScoreKind::Mahalanobis,
            ScoreKindArg::Nnguide => ScoreKind::Nnguide,
            ScoreKindArg::Energy => ScoreKind::Energy,
            ScoreKindArg::Msp => ScoreKind::Msp,
            ScoreKindArg::Maxlogit => ScoreKind::Maxlogit,
        }
    }
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// TOML config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training feature bank (`.fbnk` binary or `.csv`).
    #[arg(long)]
    pub bank: Option<PathBuf>,
    /// CSV banks carry a trailing integer label column.
    #[arg(long)]
    pub labels: bool,
    /// In-distribution query bank.
    #[arg(long)]
    pub id: Option<PathBuf>,
    /// Out-of-distribution query bank.
    #[arg(long)]
    pub ood: Option<PathBuf>,
    /// Linear head file (energy, msp, maxlogit, nnguide).
    #[arg(long)]
    pub head: Option<PathBuf>,
    #[command(flatten)]
    pub score: ScoreArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Boundaries file for the FBE run.
    #[arg(long, conflicts_with = "lambda")]
    pub boundaries: Option<PathBuf>,
    /// Fit FBE boundaries on the bank at this percentile.
    #[arg(long, allow_negative_numbers = true)]
    pub lambda: Option<f64>,
    /// Report file (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory for per-sample `index,score` CSVs.
    #[arg(long)]
    pub scores_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated percentiles, or `start:stop:step`.
    #[arg(long, value_parser = parse_lambda_list, allow_hyphen_values = true)]
    pub lambdas: Option<LambdaList>,
    /// CSV output (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON report with provenance.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaList(pub Vec<f64>);

fn parse_lambda_list(s: &str) -> Result<LambdaList, String> {
    let num = |t: &str| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}"));
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() == 3 {
        let (start, stop, step) = (num(parts[0])?, num(parts[1])?, num(parts[2])?);
        if step.is_nan() || step <= 0.0 || start > stop {
            return Err(format!("bad range {s:?}: need start <= stop and step > 0"));
        }
        let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
        return Ok(LambdaList(
            (0..count).map(|i| start + step * i as f64).collect(),
        ));
    }
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(num)
        .collect::<Result<Vec<_>, _>>()
        .map(LambdaList)
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// TOML config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// RNG seed (required, here or in the config).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Monte Carlo trials per grid point.
    #[arg(long)]
    pub trials: Option<u64>,
    /// Feature dimension.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Clamp half-width in units of sigma_in (`inf` disables).
    #[arg(long)]
    pub clamp: Option<f64>,
    /// Standard deviation of the in-distribution normal.
    #[arg(long)]
    pub sigma_in: Option<f64>,
    /// Grid values of sigma_out (comma-separated); the grid is the product
    /// with `--epsilon`.
    #[arg(
        long,
        value_delimiter = ',',
        requires = "epsilon",
        allow_hyphen_values = true
    )]
    pub sigma_out: Option<Vec<f64>>,
    /// Grid values of the skewness parameter (comma-separated).
    #[arg(
        long,
        value_delimiter = ',',
        requires = "sigma_out",
        allow_hyphen_values = true
    )]
    pub epsilon: Option<Vec<f64>>,
    /// Allow grid points with sigma_out <= sigma_in.
    #[arg(long)]
    pub control: bool,
    /// Surface CSV (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON report with the surface and provenance.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// TOML config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// RNG seed (required, here or in the config).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of classes.
    #[arg(long)]
    pub classes: Option<usize>,
    /// Feature dimension.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Training rows per class.
    #[arg(long)]
    pub per_class: Option<usize>,
    /// ID test rows per class.
    #[arg(long)]
    pub test_per_class: Option<usize>,
    /// Per-class standard deviation.
    #[arg(long)]
    pub class_spread: Option<f64>,
    /// Near-OOD mean shift, in class-spread units.
    #[arg(long)]
    pub near_shift: Option<f64>,
    /// Far-OOD center distance, in class-spread units.
    #[arg(long)]
    pub far_shift: Option<f64>,
    /// Fraction of training rows drawn with inflated variance.
    #[arg(long)]
    pub heavy_tail_frac: Option<f64>,
    /// Common offset of all class means, in class-spread units.
    #[arg(long, allow_negative_numbers = true)]
    pub center_offset: Option<f64>,
    /// Spread of class means around the offset, in class-spread units.
    #[arg(long)]
    pub mean_scale: Option<f64>,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out_dir: PathBuf,
}

// ---------------------------------------------------------------------------
// Errors

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Run(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "usage error: {msg}"),
            CliError::Run(e) => write!(f, "error: {e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        if e.is_usage() {
            CliError::Usage(e.to_string())
        } else {
            CliError::Run(e)
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn warn(msg: impl fmt::Display) {
    eprintln!("warning: {msg}");
}

// ---------------------------------------------------------------------------
// Config layering

const PATH_KEYS: [&str; 5] = ["bank", "id", "ood", "head", "boundaries"];

fn read_config(path: Option<&Path>) -> CliResult<Table> {
    let Some(path) = path else {
        return Ok(Table::new());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut table: Table = text
        .parse()
        .map_err(|e| usage(format!("config {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new(""));
    for key in PATH_KEYS {
        if let Some(Value::String(s)) = table.get(key) {
            if Path::new(s).is_relative() {
                let joined = base.join(s).to_string_lossy().into_owned();
                table.insert(key.into(), Value::String(joined));
            }
        }
    }
    Ok(table)
}

struct Overlay(Table);

impl Overlay {
    fn new(base: Table) -> Self {
        Overlay(base)
    }

    fn set(&mut self, key: &str, v: Option<impl Into<Value>>) -> &mut Self {
        if let Some(v) = v {
            self.0.insert(key.into(), v.into());
        }
        self
    }

    fn path(&mut self, key: &str, p: Option<&PathBuf>) -> &mut Self {
        self.set(key, p.map(|p| p.to_string_lossy().into_owned()))
    }

    fn flag(&mut self, key: &str, on: bool) -> &mut Self {
        self.set(key, on.then_some(true))
    }

    fn uint(&mut self, key: &str, v: Option<impl TryInto<i64>>) -> CliResult<&mut Self> {
        let v = v
            .map(|x| {
                x.try_into()
                    .map_err(|_| usage(format!("--{key} is too large")))
            })
            .transpose()?;
        Ok(self.set(key, v))
    }

    fn finish<T: DeserializeOwned>(self, what: &str) -> CliResult<T> {
        Value::Table(self.0)
            .try_into()
            .map_err(|e| usage(format!("{what}: {}", e.to_string().trim_end())))
    }
}

fn overlay_score(table: &mut Table, args: &ScoreArgs) -> CliResult<()> {
    let mut score = match table.remove("score") {
        Some(Value::Table(t)) => t,
        Some(_) => return Err(usage("config key `score` must be a table")),
        None => Table::new(),
    };
    if let Some(kind) = args.score {
        score.insert(
            "kind".into(),
            Value::String(ScoreKind::from(kind).name().into()),
        );
    }
    if let Some(k) = args.k {
        let k = i64::try_from(k).map_err(|_| usage("--k is too large"))?;
        score.insert("k".into(), Value::Integer(k));
    }
    if let Some(t) = args.temperature {
        score.insert("temperature".into(), Value::Float(t));
    }
    if let Some(p) = args.react_percentile {
        score.insert("react_percentile".into(), Value::Float(p));
    }
    if !score.is_empty() {
        table.insert("score".into(), Value::Table(score));
    }
    if let Some(scope) = args.react_scope {
        table.insert("react_scope".into(), Value::String(scope.name().into()));
    }
    Ok(())
}

fn overlay_data(args: &DataArgs) -> CliResult<Overlay> {
    let mut table = read_config(args.config.as_deref())?;
    overlay_score(&mut table, &args.score)?;
    let mut o = Overlay::new(table);
    o.path("bank", args.bank.as_ref())
        .flag("labels", args.labels)
        .path("id", args.id.as_ref())
        .path("ood", args.ood.as_ref())
        .path("head", args.head.as_ref());
    Ok(o)
}

// ---------------------------------------------------------------------------
// Effective configs

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub bank: PathBuf,
    #[serde(default)]
    pub labels: bool,
    pub lambda: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApplyConfig {
    pub bank: PathBuf,
    #[serde(default)]
    pub labels: bool,
    pub boundaries: PathBuf,
}

fn default_scope() -> ReactScope {
    ReactScope::Both
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub bank: PathBuf,
    #[serde(default)]
    pub labels: bool,
    pub id: PathBuf,
    pub ood: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<PathBuf>,
    pub score: ScoreSpec,
    #[serde(default = "default_scope")]
    pub react_scope: ReactScope,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundaries: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

fn default_lambdas() -> Vec<f64> {
    (1..=20).map(|i| 5.0 * i as f64).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub bank: PathBuf,
    #[serde(default)]
    pub labels: bool,
    pub id: PathBuf,
    pub ood: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<PathBuf>,
    pub score: ScoreSpec,
    #[serde(default = "default_scope")]
    pub react_scope: ReactScope,
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub inputs: BTreeMap<String, InputFile>,
}

impl Provenance {
    fn new(command: &str) -> Self {
        Provenance {
            tool: "fbe".into(),
            version: VERSION.into(),
            command: command.into(),
            inputs: BTreeMap::new(),
        }
    }

    /// Starts a record, hashing the config file when one was given.
    fn with_config(command: &str, config: Option<&Path>) -> CliResult<Self> {
        let mut p = Provenance::new(command);
        if let Some(path) = config {
            p.hash("config", path)?;
        }
        Ok(p)
    }

    fn hash(&mut self, role: &str, path: &Path) -> CliResult<()> {
        let sha256 = sha256_file(path)?;
        self.inputs.insert(
            role.into(),
            InputFile {
                path: path.to_path_buf(),
                sha256,
            },
        );
        Ok(())
    }
}

pub fn sha256_file(path: &Path) -> Result<String, Error> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

impl Summary {
    fn of(values: impl IntoIterator<Item = f64>) -> Summary {
        let (mut min, mut max, mut sum, mut n) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
        for v in values {
            min = min.min(v);
            max = max.max(v);
            sum += v;
            n += 1;
        }
        Summary {
            min,
            mean: sum / n.max(1) as f64,
            max,
        }
    }
}

#[derive(Debug, Serialize)]
struct FitReport<'a> {
    #[serde(flatten)]
    provenance: Provenance,
    config: &'a FitConfig,
    out: &'a Path,
    n: usize,
    m: usize,
    d_star: Summary,
    fit_ms: f64,
}

#[derive(Debug, Serialize)]
struct ApplyReport<'a> {
    #[serde(flatten)]
    provenance: Provenance,
    config: &'a ApplyConfig,
    out: &'a Path,
    n: usize,
    m: usize,
    lambda: f64,
    clamped_total: usize,
    clamped_fraction: f64,
    clamped_fraction_per_dim: Summary,
    clamped_per_dim: Vec<usize>,
    apply_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FbeRun {
    pub lambda: f64,
    pub clamped_fraction: f64,
    pub report: Report,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timings {
    pub base_score_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub apply_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fbe_score_ms: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub config: EvalConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub react_threshold: Option<f32>,
    pub base: Report,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fbe: Option<FbeRun>,
    pub timings: Timings,
}

#[derive(Debug, Serialize)]
struct SweepReport<'a> {
    #[serde(flatten)]
    provenance: Provenance,
    config: &'a SweepConfig,
    rows: &'a [SweepRow],
}

#[derive(Debug, Clone, Serialize)]
struct SweepRow {
    lambda: f64,
    auroc: f64,
    fpr95: f64,
}

#[derive(Debug, Serialize)]
struct SimulateReport<'a> {
    #[serde(flatten)]
    provenance: Provenance,
    config: &'a SimConfig,
    surface: &'a crate::theory::Surface,
}

fn to_json(v: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("reports serialize");
    s.push('\n');
    s
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::Run(Error::io(path, e)))
}

fn emit(path: Option<&Path>, text: &str) -> CliResult<()> {
    match path {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

// ---------------------------------------------------------------------------
// Commands

fn load_train(path: &Path, labels: bool) -> CliResult<FeatureBank> {
    Ok(load_bank(path, BankFormat::from_path(path, labels))?)
}

fn load_queries(path: &Path) -> CliResult<FeatureBank> {
    Ok(load_bank(path, BankFormat::from_path(path, false))?)
}

fn cmd_fit(args: &FitArgs) -> CliResult<()> {
    let mut o = Overlay::new(read_config(args.config.as_deref())?);
    o.path("bank", args.bank.as_ref())
        .flag("labels", args.labels)
        .set("lambda", args.lambda);
    let cfg: FitConfig = o.finish("fit config")?;

    let bank = load_train(&cfg.bank, cfg.labels)?;
    let start = Instant::now();
    let bounds = fit_boundaries(&bank, cfg.lambda)?;
    let fit_ms = ms_since(start);
    save_boundaries(&bounds, &args.out)?;

    let mut provenance = Provenance::with_config("fit", args.config.as_deref())?;
    provenance.hash("bank", &cfg.bank)?;
    let report = FitReport {
        provenance,
        config: &cfg,
        out: &args.out,
        n: bank.n(),
        m: bank.m(),
        d_star: Summary::of(bounds.d_star().iter().map(|&d| d as f64)),
        fit_ms,
    };
    emit(None, &to_json(&report))
}

fn cmd_apply(args: &ApplyArgs) -> CliResult<()> {
    let mut o = Overlay::new(read_config(args.config.as_deref())?);
    o.path("bank", args.bank.as_ref())
        .flag("labels", args.labels)
        .path("boundaries", args.boundaries.as_ref());
    let cfg: ApplyConfig = o.finish("apply config")?;

    let bank = load_train(&cfg.bank, cfg.labels)?;
    let bounds = load_boundaries(&cfg.boundaries)?;
    let start = Instant::now();
    let outcome = clamp_bank_with_stats(&bank, &bounds)?;
    let apply_ms = ms_since(start);
    save_bank(&outcome.bank, &args.out)?;

    let mut provenance = Provenance::with_config("apply", args.config.as_deref())?;
    provenance.hash("bank", &cfg.bank)?;
    provenance.hash("boundaries", &cfg.boundaries)?;
    let report = ApplyReport {
        provenance,
        config: &cfg,
        out: &args.out,
        n: bank.n(),
        m: bank.m(),
        lambda: bounds.lambda(),
        clamped_total: outcome.total_clamped(),
        clamped_fraction: outcome.overall_fraction(),
        clamped_fraction_per_dim: Summary::of(outcome.fraction_per_dim()),
        clamped_per_dim: outcome.clamped_per_dim.clone(),
        apply_ms,
    };
    emit(None, &to_json(&report))
}

/// Inputs shared by `eval` and `sweep`, after ReAct clipping of the bank.
struct Workload {
    bank: FeatureBank,
    id: FeatureBank,
    ood: FeatureBank,
    head: Option<LinearHead>,
    tau: Option<f32>,
}

struct DataPaths<'a> {
    bank: &'a Path,
    labels: bool,
    id: &'a Path,
    ood: &'a Path,
    head: Option<&'a Path>,
}

fn load_workload(
    paths: DataPaths<'_>,
    spec: &ScoreSpec,
    scope: ReactScope,
    provenance: &mut Provenance,
) -> CliResult<Workload> {
    let raw = load_train(paths.bank, paths.labels)?;
    spec.validate(raw.n())?;
    let id = load_queries(paths.id)?;
    let ood = load_queries(paths.ood)?;
    let head = paths.head.map(load_head).transpose()?;
    if head.is_some() && !spec.kind.needs_head() {
        warn(format!("{} scoring ignores the linear head", spec.kind));
    }
    provenance.hash("bank", paths.bank)?;
    provenance.hash("id", paths.id)?;
    provenance.hash("ood", paths.ood)?;
    if let Some(h) = paths.head {
        provenance.hash("head", h)?;
    }
    let tau = spec
        .react_percentile
        .map(|p| react_threshold(&raw, p))
        .transpose()?;
    let bank = match (tau, scope) {
        (Some(t), ReactScope::Both) => clip_above(&raw, t),
        _ => raw,
    };
    Ok(Workload {
        bank,
        id,
        ood,
        head,
        tau,
    })
}

struct Scored {
    id: ScoreBatch,
    ood: ScoreBatch,
    report: Report,
    ms: f64,
}

fn score_both(w: &Workload, bank: &FeatureBank, spec: &ScoreSpec) -> CliResult<Scored> {
    let start = Instant::now();
    let scorer = Scorer::fit_with_threshold(spec, bank, w.head.as_ref(), w.tau)?;
    let id = scorer.score(&w.id)?;
    let ood = scorer.score(&w.ood)?;
    let ms = ms_since(start);
    let set = EvalSet::new(id.scores.clone(), ood.scores.clone())?;
    let report = Report::from_scores(spec, &set, ms.round() as u64)?;
    Ok(Scored {
        id,
        ood,
        report,
        ms,
    })
}

fn cmd_eval(args: &EvalArgs) -> CliResult<()> {
    let mut o = overlay_data(&args.data)?;
    o.path("boundaries", args.boundaries.as_ref())
        .set("lambda", args.lambda);
    let cfg: EvalConfig = o.finish("eval config")?;
    if cfg.boundaries.is_some() && cfg.lambda.is_some() {
        return Err(usage("give either boundaries or lambda, not both"));
    }

    let mut provenance = Provenance::with_config("eval", args.data.config.as_deref())?;
    let paths = DataPaths {
        bank: &cfg.bank,
        labels: cfg.labels,
        id: &cfg.id,
        ood: &cfg.ood,
        head: cfg.head.as_deref(),
    };
    let w = load_workload(paths, &cfg.score, cfg.react_scope, &mut provenance)?;
    if !cfg.score.kind.uses_bank() && (cfg.boundaries.is_some() || cfg.lambda.is_some()) {
        warn(format!(
            "{} scoring does not read the bank; the FBE run equals the base run",
            cfg.score.kind
        ));
    }

    let base = score_both(&w, &w.bank, &cfg.score)?;
    let mut timings = Timings {
        base_score_ms: base.ms,
        fit_ms: None,
        apply_ms: None,
        fbe_score_ms: None,
    };

    let bounds: Option<DeviationBoundaries> = match (&cfg.boundaries, cfg.lambda) {
        (Some(path), _) => {
            provenance.hash("boundaries", path)?;
            Some(load_boundaries(path)?)
        }
        (None, Some(lambda)) => {
            let start = Instant::now();
            let b = fit_boundaries(&w.bank, lambda)?;
            timings.fit_ms = Some(ms_since(start));
            Some(b)
        }
        (None, None) => None,
    };
    let mut fbe_scores = None;
    let fbe = match bounds {
        Some(b) => {
            let start = Instant::now();
            let outcome = clamp_bank_with_stats(&w.bank, &b)?;
            timings.apply_ms = Some(ms_since(start));
            let run = score_both(&w, &outcome.bank, &cfg.score)?;
            timings.fbe_score_ms = Some(run.ms);
            let report = run.report.clone();
            fbe_scores = Some(run);
            Some(FbeRun {
                lambda: b.lambda(),
                clamped_fraction: outcome.overall_fraction(),
                report,
            })
        }
        None => None,
    };

    if let Some(dir) = &args.scores_dir {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Run(Error::io(dir, e)))?;
        write_text(&dir.join("base_id.csv"), &base.id.to_csv())?;
        write_text(&dir.join("base_ood.csv"), &base.ood.to_csv())?;
        if let Some(run) = &fbe_scores {
            write_text(&dir.join("fbe_id.csv"), &run.id.to_csv())?;
            write_text(&dir.join("fbe_ood.csv"), &run.ood.to_csv())?;
        }
    }

    let report = EvalReport {
        provenance,
        config: cfg,
        react_threshold: w.tau,
        base: base.report,
        fbe,
        timings,
    };
    emit(args.out.as_deref(), &to_json(&report))
}

/// Drops repeated percentiles, keeping first occurrences in order.
fn dedup_lambdas(lambdas: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(lambdas.len());
    for &l in lambdas {
        if out.contains(&l) {
            warn(format!("duplicate lambda {l} ignored"));
        } else {
            out.push(l);
        }
    }
    out
}

fn cmd_sweep(args: &SweepArgs) -> CliResult<()> {
    let mut o = overlay_data(&args.data)?;
    o.set(
        "lambdas",
        args.lambdas
            .as_ref()
            .map(|l| Value::Array(l.0.iter().map(|&x| Value::Float(x)).collect())),
    );
    let mut cfg: SweepConfig = o.finish("sweep config")?;
    cfg.lambdas = dedup_lambdas(&cfg.lambdas);
    if cfg.lambdas.is_empty() {
        return Err(usage("lambda list is empty"));
    }
    if let Some(bad) = cfg.lambdas.iter().find(|l| !(0.0..=100.0).contains(*l)) {
        return Err(usage(format!("lambda {bad} is outside [0, 100]")));
    }

    let mut provenance = Provenance::with_config("sweep", args.data.config.as_deref())?;
    let paths = DataPaths {
        bank: &cfg.bank,
        labels: cfg.labels,
        id: &cfg.id,
        ood: &cfg.ood,
        head: cfg.head.as_deref(),
    };
    let w = load_workload(paths, &cfg.score, cfg.react_scope, &mut provenance)?;
    if !cfg.score.kind.uses_bank() {
        warn(format!(
            "{} scoring does not read the bank; every lambda gives the same row",
            cfg.score.kind
        ));
    }
    let mut rows = Vec::with_capacity(cfg.lambdas.len());
    for &lambda in &cfg.lambdas {
        let bounds = fit_boundaries(&w.bank, lambda)?;
        let clamped = clamp_bank_with_stats(&w.bank, &bounds)?.bank;
        let r = score_both(&w, &clamped, &cfg.score)?.report;
        eprintln!("lambda {lambda}: auroc {:.6} fpr95 {:.6}", r.auroc, r.fpr95);
        rows.push(SweepRow {
            lambda,
            auroc: r.auroc,
            fpr95: r.fpr95,
        });
    }

    let mut csv = String::from("lambda,auroc,fpr95\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{}\n", r.lambda, r.auroc, r.fpr95));
    }
    emit(args.out.as_deref(), &csv)?;
    if let Some(path) = &args.report {
        let report = SweepReport {
            provenance,
            config: &cfg,
            rows: &rows,
        };
        write_text(path, &to_json(&report))?;
    }
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs) -> CliResult<()> {
    let mut o = Overlay::new(read_config(args.config.as_deref())?);
    o.uint("seed", args.seed)?
        .uint("trials", args.trials)?
        .uint("dim", args.dim)?;
    o.set("clamp", args.clamp)
        .set("sigma_in", args.sigma_in)
        .flag("control", args.control);
    if let (Some(sigmas), Some(epsilons)) = (&args.sigma_out, &args.epsilon) {
        let grid = epsilons
            .iter()
            .flat_map(|&epsilon| {
                sigmas.iter().map(move |&sigma_out| {
                    let mut t = Table::new();
                    t.insert("sigma_out".into(), Value::Float(sigma_out));
                    t.insert("epsilon".into(), Value::Float(epsilon));
                    Value::Table(t)
                })
            })
            .collect();
        o.set("grid", Some(Value::Array(grid)));
    }
    let cfg: SimConfig = o.finish("simulate config")?;
    cfg.validate()?;
    if cfg.trials < MIN_RECOMMENDED_TRIALS {
        warn(format!(
            "{} trials: the standard error may swamp the difference between the two probabilities",
            cfg.trials
        ));
    }
    let surface = sweep_surface(&cfg)?;
    let negative: Vec<&GridPoint> = cfg
        .grid
        .iter()
        .zip(&surface.rows)
        .filter(|(_, r)| r.delta <= 0.0)
        .map(|(p, _)| p)
        .collect();
    if !negative.is_empty() {
        warn(format!("{} grid points with delta <= 0", negative.len()));
    }
    emit(args.out.as_deref(), &surface.to_csv())?;
    if let Some(path) = &args.report {
        let report = SimulateReport {
            provenance: Provenance::with_config("simulate", args.config.as_deref())?,
            config: &cfg,
            surface: &surface,
        };
        write_text(path, &to_json(&report))?;
    }
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> CliResult<()> {
    let mut o = Overlay::new(read_config(args.config.as_deref())?);
    o.uint("seed", args.seed)?
        .uint("classes", args.classes)?
        .uint("dim", args.dim)?
        .uint("per_class", args.per_class)?
        .uint("test_per_class", args.test_per_class)?;
    o.set("class_spread", args.class_spread)
        .set("near_shift", args.near_shift)
        .set("far_shift", args.far_shift)
        .set("heavy_tail_frac", args.heavy_tail_frac)
        .set("center_offset", args.center_offset)
        .set("mean_scale", args.mean_scale);
    let cfg: SynthConfig = o.finish("synth config")?;
    let data = generate(&cfg)?;

    let dir = &args.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| CliError::Run(Error::io(dir, e)))?;
    let mut files = Vec::new();
    for (role, bank) in [
        ("train", &data.train),
        ("id_test", &data.id_test),
        ("near_ood", &data.near_ood),
        ("far_ood", &data.far_ood),
    ] {
        let name = format!("{role}.fbnk");
        save_bank(bank, dir.join(&name))?;
        files.push(ManifestFile {
            role: role.into(),
            sha256: sha256_file(&dir.join(&name))?,
            path: name,
            rows: bank.n(),
        });
    }
    save_head(&data.head, dir.join("head.fhed"))?;
    files.push(ManifestFile {
        role: "head".into(),
        sha256: sha256_file(&dir.join("head.fhed"))?,
        path: "head.fhed".into(),
        rows: data.head.classes(),
    });
    let manifest = Manifest {
        tool_version: VERSION.into(),
        config: cfg,
        files,
    };
    let text = to_json(&manifest);
    write_text(&dir.join("manifest.json"), &text)?;
    emit(None, &text)
}

pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Apply(a) => cmd_apply(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

/// Parses `std::env::args`, runs the command, and maps errors to exit codes.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
