//! Command-line front end.
//!
//! Every subcommand writes one JSON document (or CSV table) to `--output`
//! or stdout. Failures print a JSON error object on stderr and exit with 2
//! (configuration), 3 (data) or 4 (numerical).

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bandwidth::{
    cv_conditional_density, cv_simex, modal_cv_bootstrap, prediction_band_cv, silverman_choice, silverman_rule,
    BandwidthChoice, CandidateGrid, CvConfig, Method, DEFAULT_MODAL_CV_RESAMPLES, DEFAULT_REPLICATES,
};
use crate::datagen::{censor, contaminate, generate, true_modes, CensoringDistribution, MixtureSpec};
use crate::density::{CensorWeighting, CensoredSample, ContaminatedSample, JointDensityModel, Sample};
use crate::error::ModalError;
use crate::kernels::{DeconvBase, ErrorDistribution, Kernel};
use crate::metrics::{error_report, ErrorReport};
use crate::modes::{fit_multimodal, fit_unimodal, FitSettings, MeanshiftConfig, ModalCurve};
use crate::numeric::{derive_seed, linspace, min_max};
use crate::uncertainty::{bootstrap_confidence_band, prediction_band, ConfidenceBand, PredictionBand};

const STREAM_HOLDOUT: u64 = 0x401D;
const DEFAULT_GRID_POINTS: usize = 101;
const DEFAULT_LEVEL: f64 = 0.9;
const DEFAULT_FOLDS: usize = 2;
const DEFAULT_CONFIDENCE_REPLICATES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numerical => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Config, message: message.into() }
    }

    fn data(message: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Data, message: message.into() }
    }

    fn numerical(message: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Numerical, message: message.into() }
    }
}

impl From<ModalError> for CliError {
    fn from(e: ModalError) -> Self {
        let kind = match e {
            ModalError::Unsupported(_) | ModalError::WrongVariant { .. } => ErrorKind::Config,
            ModalError::InvalidInput(_) | ModalError::GridMismatch(_) => ErrorKind::Data,
            ModalError::NotDifferentiable { .. }
            | ModalError::Singular(_)
            | ModalError::DivergedInit { .. }
            | ModalError::EmptySet(_)
            | ModalError::TooManyDropped { .. } => ErrorKind::Numerical,
        };
        Self { kind, message: e.to_string() }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Errors raised while turning flags into settings are configuration errors
/// whatever their library classification.
fn as_config(e: ModalError) -> CliError {
    CliError::config(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "modalkit", version, about = "Kernel-density modal regression")]
pub struct Cli {
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate the conditional modes on a covariate grid.
    Fit(RunConfig),
    /// Select bandwidths and report the full criterion trace.
    Bandwidth(RunConfig),
    /// Build a prediction band or a bootstrap confidence band.
    Band(RunConfig),
    /// Draw a synthetic data set from a mixture-of-regressions spec.
    Simulate(RunConfig),
    /// Compare a fitted modal curve against a reference curve.
    Eval(RunConfig),
}

/// Options shared by all subcommands. A JSON file passed with `--config`
/// supplies the same keys (kebab-case); flags given on the command line take
/// precedence. Unknown keys are rejected.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct RunConfig {
    /// JSON file with default values for any of the options below.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Input CSV (header required).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// json | csv
    #[arg(long)]
    pub format: Option<String>,
    #[arg(long)]
    pub x_col: Option<String>,
    #[arg(long)]
    pub y_col: Option<String>,
    #[arg(long)]
    pub delta_col: Option<String>,
    #[arg(long)]
    pub w_col: Option<String>,
    /// standard | censored | deconv
    #[arg(long)]
    pub variant: Option<String>,
    /// gaussian | box | epanechnikov
    #[arg(long)]
    pub kernel_x: Option<String>,
    #[arg(long)]
    pub kernel_y: Option<String>,
    #[arg(long)]
    pub h1: Option<f64>,
    #[arg(long)]
    pub h2: Option<f64>,
    /// fixed | silverman | cv | simex | predband | modalcv
    #[arg(long)]
    pub bw_method: Option<String>,
    /// Comma-separated covariate bandwidth candidates.
    #[arg(long, value_delimiter = ',')]
    pub h1_candidates: Option<Vec<f64>>,
    /// Comma-separated response bandwidth candidates.
    #[arg(long, value_delimiter = ',')]
    pub h2_candidates: Option<Vec<f64>>,
    /// Covariate grid as min:max:count.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long)]
    pub level: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// laplace | gaussian
    #[arg(long)]
    pub error_dist: Option<String>,
    #[arg(long)]
    pub error_scale: Option<f64>,
    /// gaussian | compact-fourier
    #[arg(long)]
    pub deconv_base: Option<String>,
    /// censoring-survival | response-survival
    #[arg(long)]
    pub censor_weighting: Option<String>,
    /// Also report the single highest mode per grid point.
    #[arg(long)]
    pub unimodal: Option<bool>,
    #[arg(long)]
    pub folds: Option<usize>,
    /// CV-SIMEX replicates or bootstrap replicates of a confidence band.
    #[arg(long)]
    pub replicates: Option<usize>,
    /// Bootstrap resamples of the modal CV criterion.
    #[arg(long)]
    pub resamples: Option<usize>,
    /// prediction | confidence
    #[arg(long)]
    pub kind: Option<String>,
    /// Holdout CSV for a prediction band; half of the input otherwise.
    #[arg(long)]
    pub holdout: Option<PathBuf>,
    /// Named fixture: three-curves | single-line | outliers | sine
    #[arg(long)]
    pub fixture: Option<String>,
    /// Mixture spec as JSON.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    /// never | always | constant:V | uniform:LO:HI | normal:MEAN:SD
    #[arg(long)]
    pub censoring: Option<String>,
    /// Where `simulate` writes the true modal curve on `--grid`.
    #[arg(long)]
    pub truth_output: Option<PathBuf>,
    /// Fitted curve for `eval` (output of `fit`, or a bare curve).
    #[arg(long)]
    pub fit: Option<PathBuf>,
    /// Reference curve for `eval`.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Distance used by `eval` where exactly one side has no modes.
    #[arg(long)]
    pub penalty: Option<f64>,
}

impl RunConfig {
    /// Overlay the command-line values on the `--config` file, if any.
    fn resolve(self) -> CliResult<Self> {
        let Some(path) = self.config.clone() else {
            return Ok(self);
        };
        let text = fs::read_to_string(&path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut base: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("config {} is not valid JSON: {e}", path.display())))?;
        let overrides = serde_json::to_value(&self).map_err(|e| CliError::config(e.to_string()))?;
        let (Some(map), Value::Object(over)) = (base.as_object_mut(), overrides) else {
            return Err(CliError::config("config file must hold a JSON object"));
        };
        for (k, v) in over {
            if !v.is_null() {
                map.insert(k, v);
            }
        }
        serde_json::from_value(base).map_err(|e| CliError::config(format!("invalid config: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
enum VariantArg {
    Standard,
    Censored,
    Deconvolution,
}

fn parse_enum<T: DeserializeOwned>(flag: &str, value: &str) -> CliResult<T> {
    serde_json::from_value(Value::String(value.to_string()))
        .map_err(|_| CliError::config(format!("invalid value '{value}' for --{flag}")))
}

fn required<T: Clone>(flag: &str, value: &Option<T>) -> CliResult<T> {
    value.clone().ok_or_else(|| CliError::config(format!("--{flag} is required")))
}

fn positive(flag: &str, value: f64) -> CliResult<f64> {
    if value.is_finite() && value > 0.0 {
        Ok(value)
    } else {
        Err(CliError::config(format!("--{flag} must be positive and finite, got {value}")))
    }
}

impl RunConfig {
    fn format(&self) -> CliResult<Format> {
        match self.format.as_deref().unwrap_or("json") {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            other => Err(CliError::config(format!("invalid value '{other}' for --format (json | csv)"))),
        }
    }

    fn variant(&self) -> CliResult<VariantArg> {
        match self.variant.as_deref().unwrap_or("standard") {
            "standard" => Ok(VariantArg::Standard),
            "censored" => Ok(VariantArg::Censored),
            "deconv" | "deconvolution" => Ok(VariantArg::Deconvolution),
            other => Err(CliError::config(format!(
                "invalid value '{other}' for --variant (standard | censored | deconv)"
            ))),
        }
    }

    fn kernel(&self, flag: &str, value: &Option<String>) -> CliResult<Kernel> {
        value.as_deref().map_or(Ok(Kernel::Gaussian), |v| parse_enum(flag, v))
    }

    fn kernels(&self) -> CliResult<(Kernel, Kernel)> {
        Ok((self.kernel("kernel-x", &self.kernel_x)?, self.kernel("kernel-y", &self.kernel_y)?))
    }

    fn deconv_base(&self) -> CliResult<DeconvBase> {
        self.deconv_base.as_deref().map_or(Ok(DeconvBase::Gaussian), |v| parse_enum("deconv-base", v))
    }

    fn censor_weighting(&self) -> CliResult<CensorWeighting> {
        self.censor_weighting.as_deref().map_or(Ok(CensorWeighting::default()), |v| parse_enum("censor-weighting", v))
    }

    fn error_distribution(&self) -> CliResult<Option<ErrorDistribution>> {
        match (&self.error_dist, self.error_scale) {
            (None, None) => Ok(None),
            (Some(d), Some(s)) => {
                let dist = match d.as_str() {
                    "laplace" => ErrorDistribution::laplace(s),
                    "gaussian" => ErrorDistribution::gaussian(s),
                    other => {
                        return Err(CliError::config(format!(
                            "invalid value '{other}' for --error-dist (laplace | gaussian)"
                        )))
                    }
                };
                dist.map(Some).map_err(as_config)
            }
            _ => Err(CliError::config("--error-dist and --error-scale must be given together")),
        }
    }

    fn method(&self, default: Method) -> CliResult<Method> {
        match &self.bw_method {
            Some(m) => m.parse().map_err(as_config),
            None if self.h1.is_some() && self.h2.is_some() => Ok(Method::Fixed),
            None => Ok(default),
        }
    }

    fn level(&self) -> CliResult<f64> {
        let level = self.level.unwrap_or(DEFAULT_LEVEL);
        if level > 0.0 && level < 1.0 {
            Ok(level)
        } else {
            Err(CliError::config(format!("--level must be in (0, 1), got {level}")))
        }
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn grid_or(&self, default_range: (f64, f64)) -> CliResult<Vec<f64>> {
        match &self.grid {
            Some(spec) => parse_grid(spec),
            None => Ok(linspace(default_range.0, default_range.1, DEFAULT_GRID_POINTS)),
        }
    }

    fn cv_config(&self, h1_default: f64, h2_default: f64) -> CliResult<CvConfig> {
        let (kernel_x, kernel_y) = self.kernels()?;
        let candidates = match (&self.h1_candidates, &self.h2_candidates) {
            (None, None) => None,
            (Some(h1s), Some(h2s)) => Some(CandidateGrid::Product { h1s: h1s.clone(), h2s: h2s.clone() }),
            (Some(h1s), None) => Some(CandidateGrid::Product { h1s: h1s.clone(), h2s: vec![h2_default] }),
            (None, Some(h2s)) => Some(CandidateGrid::Product { h1s: vec![h1_default], h2s: h2s.clone() }),
        };
        let grid = self.grid.as_deref().map(parse_grid).transpose()?;
        let cfg = CvConfig {
            candidates,
            kernel_x,
            kernel_y,
            deconv_base: self.deconv_base()?,
            grid,
            meanshift: MeanshiftConfig::default(),
            ..CvConfig::default()
        };
        cfg.validate().map_err(as_config)?;
        Ok(cfg)
    }
}

/// `min:max:count` with `min < max` and `count >= 1`.
pub fn parse_grid(spec: &str) -> CliResult<Vec<f64>> {
    let bad = || CliError::config(format!("invalid grid '{spec}' (expected min:max:count)"));
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        return Err(bad());
    }
    let lo: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let hi: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let count: usize = parts[2].trim().parse().map_err(|_| bad())?;
    if !(lo.is_finite() && hi.is_finite()) || count == 0 || (count > 1 && lo >= hi) {
        return Err(bad());
    }
    Ok(linspace(lo, hi, count))
}

fn parse_censoring(spec: &str) -> CliResult<CensoringDistribution> {
    let bad = || CliError::config(format!("invalid censoring '{spec}'"));
    let parts: Vec<&str> = spec.split(':').collect();
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
    let dist = match parts.as_slice() {
        ["never"] => CensoringDistribution::Never,
        ["always"] => CensoringDistribution::Always,
        ["constant", v] => CensoringDistribution::Constant { value: num(v)? },
        ["uniform", lo, hi] => {
            let (lo, hi) = (num(lo)?, num(hi)?);
            if !(lo < hi) {
                return Err(bad());
            }
            CensoringDistribution::Uniform { low: lo, high: hi }
        }
        ["normal", m, s] => {
            let (mean, sd) = (num(m)?, num(s)?);
            if !(sd >= 0.0) {
                return Err(bad());
            }
            CensoringDistribution::Normal { mean, sd }
        }
        _ => return Err(bad()),
    };
    Ok(dist)
}

/// Columns of a CSV table by header name.
struct Table {
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
    source: String,
}

impl Table {
    fn read(path: &Path) -> CliResult<Self> {
        let source = path.display().to_string();
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| CliError::data(format!("cannot read {source}: {e}")))?;
        let headers = reader
            .headers()
            .map_err(|e| CliError::data(format!("{source}: {e}")))?
            .iter()
            .map(str::to_string)
            .collect();
        let rows = reader
            .records()
            .map(|r| r.map(|rec| rec.iter().map(str::to_string).collect()))
            .collect::<std::result::Result<Vec<Vec<String>>, _>>()
            .map_err(|e| CliError::data(format!("{source}: {e}")))?;
        if rows.is_empty() {
            return Err(CliError::data(format!("{source} has no data rows")));
        }
        Ok(Self { headers, rows, source })
    }

    fn index(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }

    fn column(&self, name: &str) -> CliResult<Vec<f64>> {
        let k = self.index(name).ok_or_else(|| CliError::data(format!("{} has no column '{name}'", self.source)))?;
        self.rows
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let cell = row.get(k).map(String::as_str).unwrap_or("");
                cell.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| CliError::data(format!("{} row {}: '{cell}' in column '{name}' is not a finite number", self.source, i + 2)))
            })
            .collect()
    }

    fn flags(&self, name: &str) -> CliResult<Vec<bool>> {
        let k = self.index(name).ok_or_else(|| CliError::data(format!("{} has no column '{name}'", self.source)))?;
        self.rows
            .iter()
            .enumerate()
            .map(|(i, row)| match row.get(k).map(String::as_str).unwrap_or("") {
                "1" | "true" | "TRUE" | "True" => Ok(true),
                "0" | "false" | "FALSE" | "False" => Ok(false),
                cell => Err(CliError::data(format!(
                    "{} row {}: '{cell}' in column '{name}' is not 0/1",
                    self.source,
                    i + 2
                ))),
            })
            .collect()
    }
}

struct Columns<'a> {
    x: &'a str,
    y: &'a str,
    delta: &'a str,
    w: &'a str,
}

impl RunConfig {
    fn columns(&self) -> Columns<'_> {
        Columns {
            x: self.x_col.as_deref().unwrap_or("x"),
            y: self.y_col.as_deref().unwrap_or("y"),
            delta: self.delta_col.as_deref().unwrap_or("delta"),
            w: self.w_col.as_deref().unwrap_or("w"),
        }
    }

    fn input_table(&self) -> CliResult<Table> {
        Table::read(&required("input", &self.input)?)
    }

    fn read_sample(&self, path: &Path) -> CliResult<Sample> {
        let t = Table::read(path)?;
        let c = self.columns();
        Ok(Sample::new(t.column(c.x)?, t.column(c.y)?)?)
    }

    fn read_censored(&self, t: &Table) -> CliResult<CensoredSample> {
        let c = self.columns();
        Ok(CensoredSample::new(t.column(c.x)?, t.column(c.y)?, t.flags(c.delta)?)?)
    }

    /// Error-prone covariates come from the `w` column when present.
    fn read_contaminated(&self, t: &Table, error: ErrorDistribution) -> CliResult<ContaminatedSample> {
        let c = self.columns();
        let w = if t.index(c.w).is_some() { t.column(c.w)? } else { t.column(c.x)? };
        Ok(ContaminatedSample::new(w, t.column(c.y)?, error)?)
    }
}

/// One output document: JSON, plus a CSV rendering when one exists.
struct Output {
    json: Value,
    csv: Option<String>,
}

fn to_json<T: Serialize>(value: &T) -> CliResult<Value> {
    let v = serde_json::to_value(value).map_err(|e| CliError::numerical(e.to_string()))?;
    if let Some(path) = find_null(&v, "$") {
        return Err(CliError::numerical(format!("non-finite number in output at {path}")));
    }
    Ok(v)
}

/// serde_json turns NaN and infinities into `null`; outputs never contain
/// a genuine null, so any null marks a non-finite value.
fn find_null(v: &Value, path: &str) -> Option<String> {
    match v {
        Value::Null => Some(path.to_string()),
        Value::Array(items) => items.iter().enumerate().find_map(|(k, x)| find_null(x, &format!("{path}[{k}]"))),
        Value::Object(map) => map.iter().find_map(|(k, x)| find_null(x, &format!("{path}.{k}"))),
        _ => None,
    }
}

/// Writes every float with 17 significant digits.
struct SeventeenDigits;

impl serde_json::ser::Formatter for SeventeenDigits {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{}", fmt_f64(value))
    }
}

pub fn fmt_f64(value: f64) -> String {
    format!("{value:.16e}")
}

pub fn render_json(value: &Value) -> String {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SeventeenDigits);
    value.serialize(&mut ser).expect("serializing a JSON value cannot fail");
    buf.push(b'\n');
    String::from_utf8(buf).expect("JSON is UTF-8")
}

fn csv_table(headers: &[&str], rows: Vec<Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(headers).expect("in-memory write");
    for row in rows {
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("CSV is UTF-8")
}

fn curve_rows(label: &str, curve: &ModalCurve) -> Vec<Vec<String>> {
    curve
        .sets
        .iter()
        .flat_map(|set| {
            set.modes.iter().enumerate().map(move |(k, m)| {
                vec![label.to_string(), fmt_f64(set.x), k.to_string(), fmt_f64(m.y), fmt_f64(m.density)]
            })
        })
        .collect()
}

fn interval_rows(grid: &[f64], intervals: &[Vec<(f64, f64)>]) -> Vec<Vec<String>> {
    grid.iter()
        .zip(intervals)
        .flat_map(|(&x, iv)| {
            iv.iter().enumerate().map(move |(k, &(lo, hi))| vec![fmt_f64(x), k.to_string(), fmt_f64(lo), fmt_f64(hi)])
        })
        .collect()
}

#[derive(Serialize)]
struct FitOutput {
    variant: VariantArg,
    kernel_x: String,
    kernel_y: String,
    h1: f64,
    h2: f64,
    bandwidth: BandwidthChoice,
    #[serde(skip_serializing_if = "Option::is_none")]
    censor_weighting: Option<CensorWeighting>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<ErrorDistribution>,
    curve: ModalCurve,
    #[serde(skip_serializing_if = "Option::is_none")]
    unimodal: Option<ModalCurve>,
}

fn fixed_choice(h1: f64, h2: f64) -> BandwidthChoice {
    BandwidthChoice {
        h1,
        h2,
        method: Method::Fixed,
        criterion: None,
        trace: Vec::new(),
        secondary_trace: Vec::new(),
        simex: None,
        flags: Vec::new(),
    }
}

impl RunConfig {
    fn fixed_bandwidths(&self) -> CliResult<(f64, f64)> {
        let h1 = required("h1", &self.h1)?;
        let h2 = required("h2", &self.h2)?;
        Ok((positive("h1", h1)?, positive("h2", h2)?))
    }

    /// Bandwidths for the standard variant.
    fn choose_standard(&self, data: &Sample, default: Method) -> CliResult<BandwidthChoice> {
        let method = self.method(default)?;
        let seed = self.seed();
        let reference = || -> CliResult<(f64, f64)> { Ok((silverman_rule(data.x())?, silverman_rule(data.y())?)) };
        match method {
            Method::Fixed => self.fixed_bandwidths().map(|(a, b)| fixed_choice(a, b)),
            Method::Silverman => Ok(silverman_choice(data)?),
            Method::Cv => {
                let (a, b) = reference()?;
                Ok(cv_conditional_density(data, &self.cv_config(a, b)?)?)
            }
            Method::PredictionBand => {
                let (a, b) = reference()?;
                let folds = self.folds.unwrap_or(DEFAULT_FOLDS);
                Ok(prediction_band_cv(data, &self.cv_config(a, b)?, self.level()?, folds, seed)?)
            }
            Method::ModalCv => {
                let (a, b) = reference()?;
                let resamples = self.resamples.unwrap_or(DEFAULT_MODAL_CV_RESAMPLES);
                Ok(modal_cv_bootstrap(data, &self.cv_config(a, b)?, resamples, seed)?)
            }
            Method::Simex => Err(CliError::config("--bw-method simex requires --variant deconv")),
        }
    }

    fn choose_censored(&self, data: &CensoredSample) -> CliResult<BandwidthChoice> {
        match self.method(Method::Silverman)? {
            Method::Fixed => self.fixed_bandwidths().map(|(a, b)| fixed_choice(a, b)),
            Method::Silverman => {
                let observed: Vec<f64> =
                    data.t().iter().zip(data.delta()).filter(|(_, &d)| d).map(|(&t, _)| t).collect();
                let mut choice = fixed_choice(silverman_rule(data.x())?, silverman_rule(&observed)?);
                choice.method = Method::Silverman;
                Ok(choice)
            }
            other => Err(CliError::config(format!(
                "--bw-method {other:?} is not available for the censored variant (use fixed or silverman)"
            ))),
        }
    }

    fn choose_deconv(&self, data: &ContaminatedSample) -> CliResult<BandwidthChoice> {
        match self.method(Method::Silverman)? {
            Method::Fixed => self.fixed_bandwidths().map(|(a, b)| fixed_choice(a, b)),
            Method::Silverman => Ok(silverman_choice(&data.naive())?),
            Method::Simex => {
                let h1 = silverman_rule(data.w())?;
                let h2 = silverman_rule(data.y())?;
                let replicates = self.replicates.unwrap_or(DEFAULT_REPLICATES);
                Ok(cv_simex(data, &self.cv_config(h1, h2)?, replicates, self.seed())?)
            }
            other => Err(CliError::config(format!(
                "--bw-method {other:?} is not available for the deconvolution variant (use fixed, silverman or simex)"
            ))),
        }
    }

    fn deconv_error(&self) -> CliResult<ErrorDistribution> {
        self.error_distribution()?
            .ok_or_else(|| CliError::config("--variant deconv needs --error-dist and --error-scale"))
    }
}

fn cmd_fit(cfg: &RunConfig) -> CliResult<Output> {
    let format = cfg.format()?;
    let variant = cfg.variant()?;
    let (kx, ky) = cfg.kernels()?;
    let table = cfg.input_table()?;
    let meanshift = MeanshiftConfig::default();
    let (model, bandwidth, censor_weighting, error) = match variant {
        VariantArg::Standard => {
            let c = cfg.columns();
            let data = Sample::new(table.column(c.x)?, table.column(c.y)?)?;
            let bw = cfg.choose_standard(&data, Method::Silverman)?;
            (JointDensityModel::standard(&data, kx, ky, bw.h1, bw.h2).map_err(as_config)?, bw, None, None)
        }
        VariantArg::Censored => {
            let data = cfg.read_censored(&table)?;
            let weighting = cfg.censor_weighting()?;
            let bw = cfg.choose_censored(&data)?;
            (JointDensityModel::censored(&data, kx, ky, bw.h1, bw.h2, weighting)?, bw, Some(weighting), None)
        }
        VariantArg::Deconvolution => {
            let error = cfg.deconv_error()?;
            let data = cfg.read_contaminated(&table, error)?;
            let bw = cfg.choose_deconv(&data)?;
            let model = JointDensityModel::deconvolution(&data, cfg.deconv_base()?, ky, bw.h1, bw.h2).map_err(as_config)?;
            (model, bw, None, Some(error))
        }
    };
    let grid = cfg.grid_or(min_max(model.covariates()))?;
    info!("fitting {} points on {} grid points", model.n(), grid.len());
    let curve = fit_multimodal(&model, &grid, &meanshift)?;
    let unimodal = if cfg.unimodal.unwrap_or(false) {
        Some(fit_unimodal(&model, &grid, &meanshift)?.to_modal_curve())
    } else {
        None
    };
    let out = FitOutput {
        variant,
        kernel_x: model.covariate_kernel().name().to_string(),
        kernel_y: ky.name().to_string(),
        h1: bandwidth.h1,
        h2: bandwidth.h2,
        bandwidth,
        censor_weighting,
        error,
        curve,
        unimodal,
    };
    let json = to_json(&out)?;
    let csv = (format == Format::Csv).then(|| {
        let mut rows = curve_rows("multimodal", &out.curve);
        if let Some(u) = &out.unimodal {
            rows.extend(curve_rows("unimodal", u));
        }
        csv_table(&["curve", "x", "mode_index", "y", "density"], rows)
    });
    Ok(Output { json, csv })
}

fn cmd_bandwidth(cfg: &RunConfig) -> CliResult<Output> {
    let format = cfg.format()?;
    let table = cfg.input_table()?;
    let choice = match cfg.variant()? {
        VariantArg::Standard => {
            let c = cfg.columns();
            let data = Sample::new(table.column(c.x)?, table.column(c.y)?)?;
            cfg.choose_standard(&data, Method::Cv)?
        }
        VariantArg::Censored => cfg.choose_censored(&cfg.read_censored(&table)?)?,
        VariantArg::Deconvolution => {
            let data = cfg.read_contaminated(&table, cfg.deconv_error()?)?;
            if cfg.bw_method.is_none() && cfg.h1.is_none() {
                let mut with_simex = cfg.clone();
                with_simex.bw_method = Some("simex".into());
                with_simex.choose_deconv(&data)?
            } else {
                cfg.choose_deconv(&data)?
            }
        }
    };
    let json = to_json(&choice)?;
    let csv = (format == Format::Csv).then(|| {
        let mut rows: Vec<Vec<String>> = choice
            .trace
            .iter()
            .map(|e| vec!["primary".to_string(), fmt_f64(e.h1), fmt_f64(e.h2), fmt_f64(e.criterion)])
            .collect();
        rows.extend(
            choice
                .secondary_trace
                .iter()
                .map(|e| vec!["secondary".to_string(), fmt_f64(e.h1), fmt_f64(e.h2), fmt_f64(e.criterion)]),
        );
        csv_table(&["trace", "h1", "h2", "criterion"], rows)
    });
    Ok(Output { json, csv })
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum BandOutput {
    Prediction {
        settings: FitSettings,
        unimodal: bool,
        curve: ModalCurve,
        band: PredictionBand,
    },
    Confidence {
        settings: FitSettings,
        band: ConfidenceBand,
    },
}

fn cmd_band(cfg: &RunConfig) -> CliResult<Output> {
    let format = cfg.format()?;
    if cfg.variant()? != VariantArg::Standard {
        return Err(CliError::config("bands are available for the standard variant only"));
    }
    let data = cfg.read_sample(&required("input", &cfg.input)?)?;
    let level = cfg.level()?;
    let seed = cfg.seed();
    let (kernel_x, kernel_y) = cfg.kernels()?;
    let grid = cfg.grid_or(data.covariate_range())?;
    let kind = cfg.kind.as_deref().unwrap_or("prediction");
    let (out, grid_out, intervals) = match kind {
        "prediction" => {
            let (train, holdout) = match &cfg.holdout {
                Some(path) => (data.clone(), cfg.read_sample(path)?),
                None => split_half(&data, seed)?,
            };
            let bw = cfg.choose_standard(&train, Method::Silverman)?;
            let settings = FitSettings { kernel_x, kernel_y, h1: bw.h1, h2: bw.h2, meanshift: MeanshiftConfig::default() };
            let unimodal = cfg.unimodal.unwrap_or(false);
            let curve = if unimodal {
                settings.fit_unimodal(&train, &grid)?.to_modal_curve()
            } else {
                settings.fit(&train, &grid)?
            };
            let band = prediction_band(&curve, &holdout, level)?;
            let intervals = band.intervals.clone();
            (BandOutput::Prediction { settings, unimodal, curve, band }, grid, intervals)
        }
        "confidence" => {
            let bw = cfg.choose_standard(&data, Method::Silverman)?;
            let settings = FitSettings { kernel_x, kernel_y, h1: bw.h1, h2: bw.h2, meanshift: MeanshiftConfig::default() };
            let b = cfg.replicates.unwrap_or(DEFAULT_CONFIDENCE_REPLICATES);
            let band = bootstrap_confidence_band(&data, &settings, &grid, b, level, seed)?;
            let intervals = band.intervals.clone();
            (BandOutput::Confidence { settings, band }, grid, intervals)
        }
        other => return Err(CliError::config(format!("invalid value '{other}' for --kind (prediction | confidence)"))),
    };
    let json = to_json(&out)?;
    let csv = (format == Format::Csv).then(|| csv_table(&["x", "interval_index", "lo", "hi"], interval_rows(&grid_out, &intervals)));
    Ok(Output { json, csv })
}

/// Seeded random half split into (training, holdout).
fn split_half(data: &Sample, seed: u64) -> CliResult<(Sample, Sample)> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let n = data.len();
    if n < 4 {
        return Err(CliError::data("need at least four observations to split off a holdout set"));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_HOLDOUT, 0)));
    let (hold, train) = perm.split_at(n / 2);
    Ok((data.select(train)?, data.select(hold)?))
}

#[derive(Serialize)]
struct CurveDocument<'a> {
    curve: &'a ModalCurve,
}

fn cmd_simulate(cfg: &RunConfig) -> CliResult<Output> {
    let format = cfg.format.as_deref().map_or(Ok(Format::Csv), |_| cfg.format())?;
    let spec = match (&cfg.fixture, &cfg.spec) {
        (Some(name), None) => MixtureSpec::named(name).map_err(as_config)?,
        (None, Some(path)) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::config(format!("cannot read spec {}: {e}", path.display())))?;
            let spec: MixtureSpec = serde_json::from_str(&text)
                .map_err(|e| CliError::config(format!("invalid mixture spec {}: {e}", path.display())))?;
            spec.validate().map_err(as_config)?;
            spec
        }
        (None, None) => MixtureSpec::three_curves(),
        (Some(_), Some(_)) => return Err(CliError::config("give either --fixture or --spec, not both")),
    };
    let n = cfg.n.unwrap_or(500);
    let seed = cfg.seed();
    let sample = generate(&spec, n, derive_seed(seed, 0, 0)).map_err(as_config)?;
    let error = cfg.error_distribution()?;
    let censoring = cfg.censoring.as_deref().map(parse_censoring).transpose()?;
    let (headers, columns): (Vec<&str>, Vec<Vec<String>>) = match (error, censoring) {
        (Some(_), Some(_)) => return Err(CliError::config("--error-dist and --censoring cannot be combined")),
        (Some(e), None) => {
            let c = contaminate(&sample, e, derive_seed(seed, 1, 0))?;
            (vec!["x", "w", "y"], vec![fmt_col(sample.x()), fmt_col(c.w()), fmt_col(c.y())])
        }
        (None, Some(d)) => {
            let c = censor(&sample, d, derive_seed(seed, 2, 0))?;
            let delta = c.delta().iter().map(|&d| if d { "1".to_string() } else { "0".to_string() }).collect();
            (vec!["x", "y", "delta"], vec![fmt_col(c.x()), fmt_col(c.t()), delta])
        }
        (None, None) => (vec!["x", "y"], vec![fmt_col(sample.x()), fmt_col(sample.y())]),
    };
    if let Some(path) = &cfg.truth_output {
        let grid = cfg.grid_or(spec.covariate.support())?;
        let truth = true_modes(&spec, &grid)?;
        write_file(path, &render_json(&to_json(&CurveDocument { curve: &truth })?))?;
    }
    let rows: Vec<Vec<String>> = (0..n).map(|i| columns.iter().map(|c| c[i].clone()).collect()).collect();
    let json = {
        let mut map = serde_json::Map::new();
        for (h, col) in headers.iter().zip(&columns) {
            let values: Vec<Value> = col
                .iter()
                .map(|s| match s.parse::<f64>() {
                    Ok(v) if *h != "delta" => Value::from(v),
                    _ => Value::from(s == "1"),
                })
                .collect();
            map.insert(h.to_string(), Value::Array(values));
        }
        Value::Object(map)
    };
    let csv = (format == Format::Csv).then(|| csv_table(&headers, rows));
    Ok(Output { json, csv })
}

fn fmt_col(values: &[f64]) -> Vec<String> {
    values.iter().map(|&v| fmt_f64(v)).collect()
}

/// A modal curve stored bare or under a `curve` key.
fn read_curve(path: &Path) -> CliResult<ModalCurve> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
    let v: Value =
        serde_json::from_str(&text).map_err(|e| CliError::data(format!("{} is not valid JSON: {e}", path.display())))?;
    let inner = match v.get("curve") {
        Some(c) => c.clone(),
        None => v,
    };
    let curve: ModalCurve = serde_json::from_value(inner)
        .map_err(|e| CliError::data(format!("{} does not hold a modal curve: {e}", path.display())))?;
    Ok(ModalCurve::new(curve.grid, curve.sets)?)
}

fn cmd_eval(cfg: &RunConfig) -> CliResult<Output> {
    let format = cfg.format()?;
    let est = read_curve(&required("fit", &cfg.fit)?)?;
    let truth = read_curve(&required("truth", &cfg.truth)?)?;
    let penalty = match cfg.penalty {
        Some(p) if p.is_finite() && p >= 0.0 => p,
        Some(p) => return Err(CliError::config(format!("--penalty must be finite and >= 0, got {p}"))),
        None => {
            let all: Vec<f64> = est.sets.iter().chain(&truth.sets).flat_map(|s| s.values()).collect();
            if all.is_empty() {
                0.0
            } else {
                let (lo, hi) = min_max(&all);
                hi - lo
            }
        }
    };
    let report: ErrorReport = error_report(&est, &truth, None, penalty)?;
    let json = to_json(&report)?;
    let csv = (format == Format::Csv).then(|| {
        let rows = report
            .grid
            .iter()
            .zip(&report.pointwise)
            .enumerate()
            .map(|(k, (&x, &d))| vec![fmt_f64(x), fmt_f64(d), report.penalized.contains(&k).to_string()])
            .collect();
        csv_table(&["x", "hausdorff", "penalized"], rows)
    });
    Ok(Output { json, csv })
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::config(format!("cannot write {}: {e}", path.display())))
}

fn emit(cfg: &RunConfig, out: Output) -> CliResult<()> {
    let text = match out.csv {
        Some(csv) => csv,
        None => render_json(&out.json),
    };
    match &cfg.output {
        Some(path) => write_file(path, &text),
        None => io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| CliError::config(format!("cannot write to stdout: {e}"))),
    }
}

fn dispatch(command: Command) -> CliResult<()> {
    let (cfg, handler): (RunConfig, fn(&RunConfig) -> CliResult<Output>) = match command {
        Command::Fit(c) => (c, cmd_fit),
        Command::Bandwidth(c) => (c, cmd_bandwidth),
        Command::Band(c) => (c, cmd_band),
        Command::Simulate(c) => (c, cmd_simulate),
        Command::Eval(c) => (c, cmd_eval),
    };
    let cfg = cfg.resolve()?;
    let out = handler(&cfg)?;
    emit(&cfg, out)
}

#[derive(Serialize)]
struct ErrorDocument<'a> {
    error: ErrorBody<'a>,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    kind: ErrorKind,
    code: i32,
    message: &'a str,
}

fn report(e: &CliError) -> i32 {
    let code = e.kind.exit_code();
    let doc = ErrorDocument { error: ErrorBody { kind: e.kind, code, message: &e.message } };
    let text = serde_json::to_string(&doc).expect("error document serializes");
    let _ = writeln!(io::stderr(), "{text}");
    code
}

/// Parse `argv`, run the subcommand and return the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("MODALKIT_LOG", "warn"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion | K::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return 0;
            }
            return report(&CliError::config(e.render().to_string().trim().to_string()));
        }
    };
    let result = match cli.threads {
        Some(0) => Err(CliError::config("--threads must be at least 1")),
        Some(t) => match rayon::ThreadPoolBuilder::new().num_threads(t).build() {
            Ok(pool) => pool.install(|| dispatch(cli.command)),
            Err(e) => Err(CliError::config(format!("cannot start {t} threads: {e}"))),
        },
        None => dispatch(cli.command),
    };
    match result {
        Ok(()) => 0,
        Err(e) => report(&e),
    }
}
