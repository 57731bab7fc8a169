//! Bandwidth selectors: Silverman's reference rule, leave-one-out
//! conditional-density cross-validation, CV-SIMEX for error-prone
//! covariates, the prediction-band selector and a bootstrap modal CV.

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::{ContaminatedSample, Sample};
use crate::error::{ModalError, Result};
use crate::kernels::{CovariateKernel, DeconvBase, DeconvKernel, Kernel};
use crate::metrics::error_report;
use crate::modes::{FitSettings, MeanshiftConfig};
use crate::numeric::{derive_seed, linspace, mean_sd, min_max, quantile_sorted_linear, trapezoid_weights};
use crate::uncertainty::{prediction_band, resample_pairs};

const STREAM_SIMEX: u64 = 0x51E7;
const STREAM_FOLDS: u64 = 0xF01D;
const STREAM_MODAL_CV: u64 = 0x30CF;

/// Default number of candidates per bandwidth axis.
pub const DEFAULT_CANDIDATES: usize = 15;
/// Default number of CV-SIMEX replicates.
pub const DEFAULT_REPLICATES: usize = 20;
/// Default number of bootstrap resamples for the modal CV criterion.
pub const DEFAULT_MODAL_CV_RESAMPLES: usize = 50;
/// Minimum training-set size for the prediction-band selector.
pub const MIN_TRAINING_POINTS: usize = 10;

/// `1.06 · min(sd, IQR / 1.34) · n^(-1/5)`.
///
/// The IQR uses linear interpolation between order statistics. When the
/// IQR is zero but the values are not all equal, the standard deviation is
/// used alone.
pub fn silverman_rule(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(ModalError::invalid("Silverman's rule needs at least two values"));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(ModalError::invalid(format!("value {i} is not finite")));
    }
    let (_, sd) = mean_sd(values);
    if !(sd > 0.0) {
        return Err(ModalError::invalid("Silverman's rule needs values with nonzero spread"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile_sorted_linear(&sorted, 0.75) - quantile_sorted_linear(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    Ok(1.06 * spread * (values.len() as f64).powf(-0.2))
}

/// `count` log-spaced values from `lo` to `hi` inclusive.
pub fn log_spaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    linspace(lo.ln(), hi.ln(), count).into_iter().map(f64::exp).collect()
}

/// Bandwidth candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum CandidateGrid {
    /// Every combination of `h1s` and `h2s`.
    Product { h1s: Vec<f64>, h2s: Vec<f64> },
    /// Explicit `(h1, h2)` pairs.
    Paired { pairs: Vec<(f64, f64)> },
}

impl CandidateGrid {
    pub fn pairs(&self) -> Vec<(f64, f64)> {
        match self {
            CandidateGrid::Product { h1s, h2s } => {
                h1s.iter().flat_map(|&a| h2s.iter().map(move |&b| (a, b))).collect()
            }
            CandidateGrid::Paired { pairs } => pairs.clone(),
        }
    }

    /// Distinct covariate bandwidths in increasing order.
    pub fn h1_values(&self) -> Vec<f64> {
        let mut h1s: Vec<f64> = self.pairs().into_iter().map(|p| p.0).collect();
        h1s.sort_by(f64::total_cmp);
        h1s.dedup();
        h1s
    }

    pub fn validate(&self) -> Result<()> {
        let pairs = self.pairs();
        if pairs.is_empty() {
            return Err(ModalError::invalid("bandwidth candidate grid is empty"));
        }
        if pairs.iter().any(|&(a, b)| !(a.is_finite() && a > 0.0 && b.is_finite() && b > 0.0)) {
            return Err(ModalError::invalid("bandwidth candidates must be positive and finite"));
        }
        Ok(())
    }

    /// `count × count` product of log-spaced multiples of the reference
    /// bandwidths.
    pub fn product_around(h1: f64, h2: f64, lo: f64, hi: f64, count: usize) -> Self {
        let factors = log_spaced(lo, hi, count);
        CandidateGrid::Product {
            h1s: factors.iter().map(|f| f * h1).collect(),
            h2s: factors.iter().map(|f| f * h2).collect(),
        }
    }

    /// Both bandwidths scaled together by log-spaced factors.
    pub fn ray_around(h1: f64, h2: f64, lo: f64, hi: f64, count: usize) -> Self {
        CandidateGrid::Paired { pairs: log_spaced(lo, hi, count).into_iter().map(|f| (f * h1, f * h2)).collect() }
    }
}

/// Weight function `ω(x)`: the indicator of an interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum Omega {
    /// `ω ≡ 1`.
    All,
    /// Indicator of the covariate range with a fraction `trim` cut from
    /// each end.
    Interior { trim: f64 },
    Interval { lo: f64, hi: f64 },
}

impl Default for Omega {
    fn default() -> Self {
        Omega::Interior { trim: 0.05 }
    }
}

impl Omega {
    /// The interval where `ω = 1` for the given covariates.
    pub fn interval(&self, covariates: &[f64]) -> (f64, f64) {
        match *self {
            Omega::All => min_max(covariates),
            Omega::Interior { trim } => {
                let (lo, hi) = min_max(covariates);
                (lo + trim * (hi - lo), hi - trim * (hi - lo))
            }
            Omega::Interval { lo, hi } => (lo, hi),
        }
    }

    fn weights(&self, covariates: &[f64]) -> Vec<f64> {
        let (lo, hi) = self.interval(covariates);
        covariates.iter().map(|&x| if lo <= x && x <= hi { 1.0 } else { 0.0 }).collect()
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Omega::All => Ok(()),
            Omega::Interior { trim } if (0.0..0.5).contains(&trim) => Ok(()),
            Omega::Interior { trim } => Err(ModalError::invalid(format!("omega trim {trim} not in [0, 0.5)"))),
            Omega::Interval { lo, hi } if lo.is_finite() && hi.is_finite() && lo < hi => Ok(()),
            Omega::Interval { lo, hi } => Err(ModalError::invalid(format!("omega interval [{lo}, {hi}] is empty"))),
        }
    }
}

/// Shared configuration of the selectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvConfig {
    /// Candidates; each selector has its own default around Silverman's rule.
    pub candidates: Option<CandidateGrid>,
    pub omega: Omega,
    /// Response grid for `∫ p̂² dy`. Defaults to a grid covering the
    /// responses padded by `4 h2` with spacing at most `h2 / 4`.
    pub y_grid: Option<Vec<f64>>,
    pub kernel_x: Kernel,
    pub kernel_y: Kernel,
    /// Base of the deconvolution kernel used by CV-SIMEX.
    pub deconv_base: DeconvBase,
    /// Covariate grid for the modal selectors. Defaults to 50 points on the
    /// `ω` interval.
    pub grid: Option<Vec<f64>>,
    pub meanshift: MeanshiftConfig,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            candidates: None,
            omega: Omega::default(),
            y_grid: None,
            kernel_x: Kernel::Gaussian,
            kernel_y: Kernel::Gaussian,
            deconv_base: DeconvBase::Gaussian,
            grid: None,
            meanshift: MeanshiftConfig::default(),
        }
    }
}

impl CvConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(c) = &self.candidates {
            c.validate()?;
        }
        self.omega.validate()?;
        if let Some(g) = &self.y_grid {
            crate::modes::validate_grid(g)?;
            if g.len() < 2 {
                return Err(ModalError::invalid("response integration grid needs at least two points"));
            }
        }
        if let Some(g) = &self.grid {
            crate::modes::validate_grid(g)?;
        }
        self.meanshift.validate()
    }

    fn modal_grid(&self, covariates: &[f64]) -> Vec<f64> {
        match &self.grid {
            Some(g) => g.clone(),
            None => {
                let (lo, hi) = self.omega.interval(covariates);
                linspace(lo, hi, 50)
            }
        }
    }

    fn settings(&self, h1: f64, h2: f64) -> FitSettings {
        FitSettings { kernel_x: self.kernel_x, kernel_y: self.kernel_y, h1, h2, meanshift: self.meanshift }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Fixed,
    Silverman,
    Cv,
    Simex,
    PredictionBand,
    ModalCv,
}

impl std::str::FromStr for Method {
    type Err = ModalError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(Method::Fixed),
            "silverman" => Ok(Method::Silverman),
            "cv" => Ok(Method::Cv),
            "simex" => Ok(Method::Simex),
            "predband" | "prediction-band" => Ok(Method::PredictionBand),
            "modalcv" | "modal-cv" => Ok(Method::ModalCv),
            other => Err(ModalError::invalid(format!(
                "unknown bandwidth method '{other}' (expected fixed, silverman, cv, simex, predband, modalcv)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub h1: f64,
    pub h2: f64,
    pub criterion: f64,
}

/// Diagnostics raised during selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SelectionFlag {
    /// Leave-one-out terms dropped because the marginal estimate was not
    /// positive.
    SkippedTerms { h1: f64, h2: f64, count: usize },
    /// The minimizer of the named criterion sits on the edge of the grid.
    BoundaryMinimizer { criterion: String, h1: f64 },
    /// Validation residuals measured at a non-nearest grid point.
    FallbackResiduals { h1: f64, h2: f64, count: usize },
    /// Candidate left out of the trace because it could not be evaluated.
    CandidateFailed { h1: f64, h2: f64, reason: String },
}

/// Extrapolation inputs of CV-SIMEX.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimexSummary {
    /// Minimizer of the averaged once-contaminated criterion.
    pub h1_star: f64,
    /// Minimizer of the averaged twice-contaminated criterion.
    pub h1_star_star: f64,
    pub replicates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthChoice {
    pub h1: f64,
    pub h2: f64,
    pub method: Method,
    /// Criterion at the chosen pair, when the pair is a candidate.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub criterion: Option<f64>,
    pub trace: Vec<TraceEntry>,
    /// CV-SIMEX only: the twice-contaminated criterion.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub secondary_trace: Vec<TraceEntry>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub simex: Option<SimexSummary>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub flags: Vec<SelectionFlag>,
}

/// Silverman's rule on each coordinate.
pub fn silverman_choice(data: &Sample) -> Result<BandwidthChoice> {
    Ok(BandwidthChoice {
        h1: silverman_rule(data.x())?,
        h2: silverman_rule(data.y())?,
        method: Method::Silverman,
        criterion: None,
        trace: Vec::new(),
        secondary_trace: Vec::new(),
        simex: None,
        flags: Vec::new(),
    })
}

/// Index of the smallest criterion (first on ties).
fn argmin(trace: &[TraceEntry]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (k, e) in trace.iter().enumerate() {
        if e.criterion.is_finite() && best.map_or(true, |b| e.criterion < trace[b].criterion) {
            best = Some(k);
        }
    }
    best
}

fn choose(method: Method, trace: Vec<TraceEntry>, flags: Vec<SelectionFlag>) -> Result<BandwidthChoice> {
    let k = argmin(&trace)
        .ok_or_else(|| ModalError::EmptySet("no bandwidth candidate produced a finite criterion".into()))?;
    let best = trace[k];
    debug!("{method:?} selected h1 = {}, h2 = {} (criterion {})", best.h1, best.h2, best.criterion);
    Ok(BandwidthChoice {
        h1: best.h1,
        h2: best.h2,
        method,
        criterion: Some(best.criterion),
        trace,
        secondary_trace: Vec::new(),
        simex: None,
        flags,
    })
}

fn default_y_grid(y: &[f64], h2: f64) -> Vec<f64> {
    let (lo, hi) = min_max(y);
    let (lo, hi) = (lo - 4.0 * h2, hi + 4.0 * h2);
    let count = (((hi - lo) / (h2 / 4.0)).ceil() as usize + 1).clamp(64, 2001);
    linspace(lo, hi, count)
}

/// Leave-one-out conditional-density CV criterion
///
/// `(1/n) Σ_i ω_i ∫ p̂²_{-i}(y | e_i) dy - (2/n) Σ_i ω_i p̂_{-i}(Y_i | e_i)`
///
/// where `p̂_{-i}(y | e) = Σ_{j≠i} k((c_j - e)/h1) K2((Y_j - y)/h2)/h2 /
/// Σ_{j≠i} k((c_j - e)/h1)` is built from covariates `c` and evaluated at
/// covariates `e`. Terms with a non-positive denominator are skipped; their
/// count is returned.
#[allow(clippy::too_many_arguments)]
pub fn loo_cv_criterion<K>(
    eval_x: &[f64],
    est_x: &[f64],
    y: &[f64],
    omega: &[f64],
    kx: K,
    h1: f64,
    ky: Kernel,
    h2: f64,
    y_grid: &[f64],
) -> (f64, usize)
where
    K: Fn(f64) -> f64 + Sync,
{
    let n = y.len();
    let yw = trapezoid_weights(y_grid);
    let g = y_grid.len();
    let b: Vec<f64> = y
        .iter()
        .flat_map(|&yj| y_grid.iter().map(move |&t| ky.eval((yj - t) / h2) / h2))
        .collect();
    let terms: Vec<Option<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            if omega[i] == 0.0 {
                return Some(0.0);
            }
            let mut denom = 0.0;
            let mut point = 0.0;
            let mut s = vec![0.0; g];
            for j in 0..n {
                if j == i {
                    continue;
                }
                let a = kx((est_x[j] - eval_x[i]) / h1);
                if a == 0.0 {
                    continue;
                }
                denom += a;
                point += a * ky.eval((y[j] - y[i]) / h2) / h2;
                for (sk, bk) in s.iter_mut().zip(&b[j * g..(j + 1) * g]) {
                    *sk += a * bk;
                }
            }
            if !(denom > 0.0) {
                return None;
            }
            let integral: f64 = s.iter().zip(&yw).map(|(v, w)| w * v * v).sum::<f64>() / (denom * denom);
            Some(omega[i] * (integral - 2.0 * point / denom))
        })
        .collect();
    let skipped = terms.iter().filter(|t| t.is_none()).count();
    let total: f64 = terms.iter().flatten().sum();
    (total / n as f64, skipped)
}

/// Choose `(h1, h2)` minimizing the conditional-density CV criterion.
pub fn cv_conditional_density(data: &Sample, cfg: &CvConfig) -> Result<BandwidthChoice> {
    cfg.validate()?;
    if data.len() < 3 {
        return Err(ModalError::invalid("conditional-density CV needs at least three observations"));
    }
    let candidates = match &cfg.candidates {
        Some(c) => c.clone(),
        None => CandidateGrid::product_around(
            silverman_rule(data.x())?,
            silverman_rule(data.y())?,
            0.25,
            4.0,
            DEFAULT_CANDIDATES,
        ),
    };
    let omega = cfg.omega.weights(data.x());
    let kx = cfg.kernel_x;
    let results: Vec<(TraceEntry, usize)> = candidates
        .pairs()
        .into_par_iter()
        .map(|(h1, h2)| {
            let y_grid = cfg.y_grid.clone().unwrap_or_else(|| default_y_grid(data.y(), h2));
            let (cv, skipped) = loo_cv_criterion(
                data.x(),
                data.x(),
                data.y(),
                &omega,
                |u| kx.eval(u),
                h1,
                cfg.kernel_y,
                h2,
                &y_grid,
            );
            (TraceEntry { h1, h2, criterion: cv }, skipped)
        })
        .collect();
    let mut flags = Vec::new();
    for (e, skipped) in &results {
        if *skipped > 0 {
            warn!("CV skipped {skipped} terms at h1 = {}, h2 = {}", e.h1, e.h2);
            flags.push(SelectionFlag::SkippedTerms { h1: e.h1, h2: e.h2, count: *skipped });
        }
    }
    choose(Method::Cv, results.into_iter().map(|r| r.0).collect(), flags)
}

/// Even kernel tabulated on `[0, t_max]` with linear interpolation; the
/// compact-Fourier deconvolution kernel has no closed form and is too
/// costly to integrate for every pair.
fn tabulated(kernel: DeconvKernel, t_max: f64) -> impl Fn(f64) -> f64 + Sync {
    const POINTS: usize = 8192;
    let step = t_max / (POINTS - 1) as f64;
    let table: Vec<f64> = (0..POINTS).into_par_iter().map(|k| kernel.eval(k as f64 * step)).collect();
    move |t: f64| {
        let pos = t.abs() / step;
        let k = pos.floor() as usize;
        if k + 1 >= POINTS {
            return kernel.eval(t);
        }
        let frac = pos - k as f64;
        table[k] + frac * (table[k + 1] - table[k])
    }
}

fn deconv_criterion(
    eval_x: &[f64],
    est_x: &[f64],
    y: &[f64],
    omega: Omega,
    kernel: DeconvKernel,
    ky: Kernel,
    h2: f64,
    y_grid: &[f64],
) -> (f64, usize) {
    let h1 = kernel.bandwidth();
    let weights = omega.weights(eval_x);
    match kernel.base() {
        DeconvBase::Gaussian => {
            let k: CovariateKernel = kernel.into();
            loo_cv_criterion(eval_x, est_x, y, &weights, |u| k.eval(u), h1, ky, h2, y_grid)
        }
        DeconvBase::CompactFourier => {
            let (elo, ehi) = min_max(eval_x);
            let (clo, chi) = min_max(est_x);
            let t_max = (chi - elo).max(ehi - clo).abs() / h1 + 1.0;
            let k = tabulated(kernel, t_max);
            loo_cv_criterion(eval_x, est_x, y, &weights, k, h1, ky, h2, y_grid)
        }
    }
}

/// CV-SIMEX: `h2` from Silverman's rule on the responses; `h1 = h1*² / h1**`
/// where `h1*` and `h1**` minimize the replicate-averaged criteria of
/// once- and twice-further-contaminated covariates.
pub fn cv_simex(data: &ContaminatedSample, cfg: &CvConfig, replicates: usize, seed: u64) -> Result<BandwidthChoice> {
    cfg.validate()?;
    if replicates == 0 {
        return Err(ModalError::invalid("CV-SIMEX needs at least one replicate"));
    }
    if data.len() < 3 {
        return Err(ModalError::invalid("CV-SIMEX needs at least three observations"));
    }
    let h2 = silverman_rule(data.y())?;
    let h1s = match &cfg.candidates {
        Some(c) => c.h1_values(),
        None => {
            let h = silverman_rule(data.w())?;
            log_spaced(0.25 * h, 4.0 * h, DEFAULT_CANDIDATES)
        }
    };
    let kernels: Vec<DeconvKernel> =
        h1s.iter().map(|&h1| DeconvKernel::new(cfg.deconv_base, data.error(), h1)).collect::<Result<_>>()?;
    let y_grid = cfg.y_grid.clone().unwrap_or_else(|| default_y_grid(data.y(), h2));
    let error = data.error();
    let w = data.w();
    let per_replicate: Vec<(Vec<(f64, usize)>, Vec<(f64, usize)>)> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_SIMEX, r as u64));
            let w1: Vec<f64> = w.iter().map(|&v| v + error.draw(&mut rng)).collect();
            let w2: Vec<f64> = w1.iter().map(|&v| v + error.draw(&mut rng)).collect();
            let once = kernels
                .iter()
                .map(|&k| deconv_criterion(w, &w1, data.y(), cfg.omega, k, cfg.kernel_y, h2, &y_grid))
                .collect();
            let twice = kernels
                .iter()
                .map(|&k| deconv_criterion(&w1, &w2, data.y(), cfg.omega, k, cfg.kernel_y, h2, &y_grid))
                .collect();
            (once, twice)
        })
        .collect();
    let average = |pick: &dyn Fn(&(Vec<(f64, usize)>, Vec<(f64, usize)>)) -> &Vec<(f64, usize)>| {
        h1s.iter()
            .enumerate()
            .map(|(k, &h1)| {
                let cv = per_replicate.iter().map(|r| pick(r)[k].0).sum::<f64>() / replicates as f64;
                let skipped = per_replicate.iter().map(|r| pick(r)[k].1).sum::<usize>();
                (TraceEntry { h1, h2, criterion: cv }, skipped)
            })
            .collect::<Vec<_>>()
    };
    let once = average(&|r| &r.0);
    let twice = average(&|r| &r.1);
    let mut flags = Vec::new();
    for (e, skipped) in once.iter().chain(&twice) {
        if *skipped > 0 {
            flags.push(SelectionFlag::SkippedTerms { h1: e.h1, h2: e.h2, count: *skipped });
        }
    }
    let trace: Vec<TraceEntry> = once.into_iter().map(|r| r.0).collect();
    let secondary_trace: Vec<TraceEntry> = twice.into_iter().map(|r| r.0).collect();
    let no_min = || ModalError::EmptySet("no CV-SIMEX candidate produced a finite criterion".into());
    let k1 = argmin(&trace).ok_or_else(no_min)?;
    let k2 = argmin(&secondary_trace).ok_or_else(no_min)?;
    for (name, k) in [("once-contaminated", k1), ("twice-contaminated", k2)] {
        if h1s.len() > 1 && (k == 0 || k == h1s.len() - 1) {
            warn!("CV-SIMEX {name} minimizer h1 = {} is on the grid boundary", h1s[k]);
            flags.push(SelectionFlag::BoundaryMinimizer { criterion: name.into(), h1: h1s[k] });
        }
    }
    let (h1_star, h1_star_star) = (h1s[k1], h1s[k2]);
    Ok(BandwidthChoice {
        h1: h1_star * h1_star / h1_star_star,
        h2,
        method: Method::Simex,
        criterion: None,
        trace,
        secondary_trace,
        simex: Some(SimexSummary { h1_star, h1_star_star, replicates }),
        flags,
    })
}

/// Train/validation index splits. `folds = 1` is a single random half split.
fn splits(n: usize, folds: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if folds == 0 {
        return Err(ModalError::invalid("folds must be positive"));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_FOLDS, 0)));
    let bounds: Vec<(usize, usize)> =
        if folds == 1 { vec![(0, n / 2)] } else { (0..folds).map(|f| (f * n / folds, (f + 1) * n / folds)).collect() };
    bounds
        .into_iter()
        .map(|(a, b)| {
            let val: Vec<usize> = perm[a..b].to_vec();
            let train: Vec<usize> = perm[..a].iter().chain(&perm[b..]).copied().collect();
            if train.len() < MIN_TRAINING_POINTS || val.is_empty() {
                return Err(ModalError::invalid(format!(
                    "{n} observations are too few for {folds} folds (each training set needs {MIN_TRAINING_POINTS})"
                )));
            }
            Ok((train, val))
        })
        .collect()
}

/// Choose the candidate whose cross-validated prediction band at `level`
/// has the smallest average size.
pub fn prediction_band_cv(
    data: &Sample,
    cfg: &CvConfig,
    level: f64,
    folds: usize,
    seed: u64,
) -> Result<BandwidthChoice> {
    cfg.validate()?;
    if !(level > 0.0 && level < 1.0) {
        return Err(ModalError::invalid(format!("level {level} not in (0, 1)")));
    }
    let parts: Vec<(Sample, Sample)> = splits(data.len(), folds, seed)?
        .into_iter()
        .map(|(t, v)| Ok((data.select(&t)?, data.select(&v)?)))
        .collect::<Result<_>>()?;
    let candidates = match &cfg.candidates {
        Some(c) => c.clone(),
        None => CandidateGrid::ray_around(
            silverman_rule(data.x())?,
            silverman_rule(data.y())?,
            0.1,
            3.0,
            DEFAULT_CANDIDATES,
        ),
    };
    let grid = cfg.modal_grid(data.x());
    let results: Vec<(f64, f64, Result<(f64, usize)>)> = candidates
        .pairs()
        .into_par_iter()
        .map(|(h1, h2)| {
            let settings = cfg.settings(h1, h2);
            let outcome = parts.iter().try_fold((0.0, 0usize), |(size, fb), (train, val)| {
                let curve = settings.fit(train, &grid)?;
                let band = prediction_band(&curve, val, level)?;
                Ok((size + band.total_size, fb + band.fallback.len()))
            });
            (h1, h2, outcome.map(|(size, fb)| (size / parts.len() as f64, fb)))
        })
        .collect();
    collect_modal(Method::PredictionBand, results)
}

fn collect_modal(method: Method, results: Vec<(f64, f64, Result<(f64, usize)>)>) -> Result<BandwidthChoice> {
    let mut trace = Vec::new();
    let mut flags = Vec::new();
    for (h1, h2, outcome) in results {
        match outcome {
            Ok((criterion, fallback)) => {
                trace.push(TraceEntry { h1, h2, criterion });
                if fallback > 0 {
                    flags.push(SelectionFlag::FallbackResiduals { h1, h2, count: fallback });
                }
            }
            Err(e @ (ModalError::EmptySet(_) | ModalError::Singular(_))) => {
                warn!("candidate h1 = {h1}, h2 = {h2} failed: {e}");
                flags.push(SelectionFlag::CandidateFailed { h1, h2, reason: e.to_string() });
            }
            Err(e) => return Err(e),
        }
    }
    choose(method, trace, flags)
}

/// Bootstrap estimate of the integrated squared Hausdorff error of each
/// candidate: the average over `resamples` of `Σ_k w_k Hausdorff²` between a
/// refit on a resample and the fit on the full data.
pub fn modal_cv_bootstrap(data: &Sample, cfg: &CvConfig, resamples: usize, seed: u64) -> Result<BandwidthChoice> {
    cfg.validate()?;
    if resamples == 0 {
        return Err(ModalError::invalid("modal CV needs at least one bootstrap resample"));
    }
    if data.len() < 3 {
        return Err(ModalError::invalid("modal CV needs at least three observations"));
    }
    let candidates = match &cfg.candidates {
        Some(c) => c.clone(),
        None => CandidateGrid::ray_around(
            silverman_rule(data.x())?,
            silverman_rule(data.y())?,
            0.1,
            3.0,
            DEFAULT_CANDIDATES,
        ),
    };
    let grid = cfg.modal_grid(data.x());
    let (lo, hi) = data.response_range();
    let boots: Vec<Sample> = (0..resamples)
        .map(|r| resample_pairs(data, derive_seed(seed, STREAM_MODAL_CV, r as u64)))
        .collect::<Result<_>>()?;
    let results: Vec<(f64, f64, Result<(f64, usize)>)> = candidates
        .pairs()
        .into_par_iter()
        .map(|(h1, h2)| {
            let settings = cfg.settings(h1, h2);
            let outcome = (|| {
                let full = settings.fit(data, &grid)?;
                if full.empty_count() == full.len() {
                    return Err(ModalError::EmptySet("fit on the full data has no modes".into()));
                }
                let mut total = 0.0;
                for boot in &boots {
                    let refit = settings.fit(boot, &grid)?;
                    total += error_report(&refit, &full, None, hi - lo)?.mise;
                }
                Ok((total / resamples as f64, 0))
            })();
            (h1, h2, outcome)
        })
        .collect();
    collect_modal(Method::ModalCv, results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{contaminate, generate, MixtureSpec};
    use crate::kernels::ErrorDistribution;

    #[test]
    fn silverman_examples() {
        // Unit spread at n = 100.
        let expected = 1.06 * 100f64.powf(-0.2);
        assert!((expected - 0.421_993_600_786_707).abs() < 1e-15);
        let values: Vec<f64> = (0..100).map(|k| k as f64).collect();
        let (_, sd) = mean_sd(&values);
        let iqr = 74.25 - 24.75;
        let h = silverman_rule(&values).unwrap();
        assert!((h - 1.06 * sd.min(iqr / 1.34) * 100f64.powf(-0.2)).abs() < 1e-12);
        let scaled: Vec<f64> = values.iter().map(|v| 3.5 * v).collect();
        assert!((silverman_rule(&scaled).unwrap() - 3.5 * h).abs() < 1e-12);
        let two = silverman_rule(&[0.0, 1.0]).unwrap();
        assert!(two.is_finite() && two > 0.0);
        assert!(silverman_rule(&[2.0, 2.0, 2.0]).is_err());
        assert!(silverman_rule(&[1.0]).is_err());
        // IQR zero, spread nonzero
        assert!(silverman_rule(&[0.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap() > 0.0);
    }

    /// Leave-one-out sums written out term by term.
    fn cv_oracle(x: &[f64], y: &[f64], h1: f64, h2: f64, y_grid: &[f64]) -> f64 {
        let n = x.len();
        let phi = |u: f64| (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let cond = |i: usize, t: f64| {
            let mut num = 0.0;
            let mut den = 0.0;
            for j in 0..n {
                if j != i {
                    num += phi((x[j] - x[i]) / h1) * phi((y[j] - t) / h2) / h2;
                    den += phi((x[j] - x[i]) / h1);
                }
            }
            num / den
        };
        let mut first = 0.0;
        let mut second = 0.0;
        for i in 0..n {
            let vals: Vec<f64> = y_grid.iter().map(|&t| cond(i, t).powi(2)).collect();
            let mut integral = 0.0;
            for k in 1..y_grid.len() {
                integral += 0.5 * (y_grid[k] - y_grid[k - 1]) * (vals[k] + vals[k - 1]);
            }
            first += integral;
            second += cond(i, y[i]);
        }
        first / n as f64 - 2.0 * second / n as f64
    }

    #[test]
    fn five_point_criterion_matches_hand_expansion() {
        let x = [0.1, 0.4, 0.5, 0.8, 0.95];
        let y = [1.0, 0.2, 0.7, 1.5, 0.9];
        let y_grid = linspace(-2.0, 4.0, 241);
        let omega = [1.0; 5];
        let k = Kernel::Gaussian;
        let (cv, skipped) = loo_cv_criterion(&x, &x, &y, &omega, |u| k.eval(u), 0.3, k, 0.4, &y_grid);
        assert_eq!(skipped, 0);
        assert!((cv - cv_oracle(&x, &y, 0.3, 0.4, &y_grid)).abs() < 1e-13);
        // Independent evaluation of the same sums in extended precision.
        assert!((cv - (-0.206_396_619_551_410_8)).abs() < 1e-12, "{cv}");
    }

    #[test]
    fn box_kernel_skips_isolated_terms() {
        let x = [0.0, 0.1, 5.0];
        let y = [0.0, 0.5, 1.0];
        let y_grid = linspace(-3.0, 4.0, 100);
        let k = Kernel::Box;
        let (_, skipped) =
            loo_cv_criterion(&x, &x, &y, &[1.0; 3], |u| k.eval(u), 0.5, Kernel::Gaussian, 0.3, &y_grid);
        assert_eq!(skipped, 1);
    }

    #[test]
    fn cv_selects_the_trace_minimum() {
        let data = generate(&MixtureSpec::single_line(0.2), 40, 1).unwrap();
        let cfg = CvConfig {
            candidates: Some(CandidateGrid::Product { h1s: vec![0.05, 0.1, 0.2, 0.4], h2s: vec![0.05, 0.1, 0.2, 0.4] }),
            ..CvConfig::default()
        };
        let choice = cv_conditional_density(&data, &cfg).unwrap();
        assert_eq!(choice.trace.len(), 16);
        assert!(choice.trace.iter().all(|e| e.criterion.is_finite()));
        let min = choice.trace.iter().map(|e| e.criterion).fold(f64::INFINITY, f64::min);
        assert_eq!(choice.criterion, Some(min));
        assert!(choice.trace.iter().any(|e| e.h1 == choice.h1 && e.h2 == choice.h2 && e.criterion == min));
    }

    #[test]
    fn simex_extrapolation_and_determinism() {
        let clean = generate(&MixtureSpec::sine_wave(), 80, 2).unwrap();
        let data = contaminate(&clean, ErrorDistribution::Laplace { scale: 0.1 }, 3).unwrap();
        let cfg = CvConfig {
            candidates: Some(CandidateGrid::Paired { pairs: log_spaced(0.02, 0.5, 8).into_iter().map(|h| (h, 1.0)).collect() }),
            ..CvConfig::default()
        };
        let a = cv_simex(&data, &cfg, 2, 7).unwrap();
        let b = cv_simex(&data, &cfg, 2, 7).unwrap();
        assert_eq!(a, b);
        let s = a.simex.unwrap();
        assert_eq!(a.h1, s.h1_star * s.h1_star / s.h1_star_star);
        assert_eq!(a.h2, silverman_rule(data.y()).unwrap());
        assert_eq!(a.trace.len(), 8);
        assert_eq!(a.secondary_trace.len(), 8);
    }

    #[test]
    fn simex_without_error_matches_plain_cv() {
        let clean = generate(&MixtureSpec::sine_wave(), 60, 4).unwrap();
        let data = contaminate(&clean, ErrorDistribution::Laplace { scale: 0.0 }, 5).unwrap();
        let h2 = silverman_rule(clean.y()).unwrap();
        let h1s = log_spaced(0.01, 0.5, 10);
        let cfg = CvConfig {
            candidates: Some(CandidateGrid::Product { h1s: h1s.clone(), h2s: vec![h2] }),
            ..CvConfig::default()
        };
        let simex = cv_simex(&data, &cfg, 1, 6).unwrap();
        let cv = cv_conditional_density(&clean, &cfg).unwrap();
        let step = (h1s[1] / h1s[0]).ln();
        assert!((simex.h1.ln() - cv.h1.ln()).abs() <= step + 1e-12);
    }

    #[test]
    fn compact_fourier_simex_runs() {
        let clean = generate(&MixtureSpec::single_line(0.1), 40, 8).unwrap();
        let data = contaminate(&clean, ErrorDistribution::Gaussian { scale: 0.05 }, 9).unwrap();
        let cfg = CvConfig {
            candidates: Some(CandidateGrid::Paired { pairs: vec![(0.1, 1.0), (0.2, 1.0), (0.3, 1.0)] }),
            deconv_base: DeconvBase::CompactFourier,
            ..CvConfig::default()
        };
        let choice = cv_simex(&data, &cfg, 1, 1).unwrap();
        assert!(choice.h1.is_finite() && choice.h1 > 0.0);
        let gaussian_base = CvConfig { deconv_base: DeconvBase::Gaussian, ..cfg };
        assert!(matches!(cv_simex(&data, &gaussian_base, 1, 1), Err(ModalError::Unsupported(_))));
    }

    #[test]
    fn tabulated_kernel_is_accurate() {
        let k = DeconvKernel::new(DeconvBase::CompactFourier, ErrorDistribution::Gaussian { scale: 0.1 }, 0.3).unwrap();
        let t = tabulated(k, 30.0);
        for u in [0.0, 0.37, 1.9, -4.2, 11.3, 29.0] {
            assert!((t(u) - k.eval(u)).abs() < 1e-5, "{u}");
        }
    }

    #[test]
    fn prediction_band_selector_penalizes_extremes() {
        let data = generate(&MixtureSpec::three_curves(), 400, 11).unwrap();
        let cfg = CvConfig {
            candidates: Some(CandidateGrid::Paired { pairs: vec![(0.005, 0.02), (0.08, 0.25), (2.0, 5.0)] }),
            grid: Some(linspace(0.05, 0.95, 25)),
            ..CvConfig::default()
        };
        let choice = prediction_band_cv(&data, &cfg, 0.9, 2, 3).unwrap();
        let sizes: Vec<f64> = choice.trace.iter().map(|e| e.criterion).collect();
        assert!(sizes[0] > sizes[1], "{sizes:?}");
        assert!(sizes[2] > sizes[1], "{sizes:?}");
        assert_eq!((choice.h1, choice.h2), (0.08, 0.25));
    }

    #[test]
    fn folds_need_enough_training_points() {
        let data = generate(&MixtureSpec::single_line(0.1), 12, 1).unwrap();
        let cfg = CvConfig::default();
        assert!(prediction_band_cv(&data, &cfg, 0.9, 1, 1).is_err());
        assert!(prediction_band_cv(&data, &cfg, 1.5, 2, 1).is_err());
        assert!(splits(30, 3, 1).unwrap().iter().all(|(t, v)| t.len() == 20 && v.len() == 10));
    }

    #[test]
    fn modal_cv_selects_trace_minimum() {
        let data = generate(&MixtureSpec::single_line(0.1), 80, 12).unwrap();
        let cfg = CvConfig {
            candidates: Some(CandidateGrid::Paired { pairs: vec![(0.05, 0.05), (0.1, 0.1), (0.3, 0.3)] }),
            grid: Some(linspace(0.1, 0.9, 9)),
            ..CvConfig::default()
        };
        let choice = modal_cv_bootstrap(&data, &cfg, 10, 4).unwrap();
        let min = choice.trace.iter().map(|e| e.criterion).fold(f64::INFINITY, f64::min);
        assert_eq!(choice.criterion, Some(min));
        assert_eq!(choice, modal_cv_bootstrap(&data, &cfg, 10, 4).unwrap());
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_values() {
        assert!(serde_json::from_str::<CvConfig>(r#"{"bogus": 1}"#).is_err());
        let bad = CvConfig { candidates: Some(CandidateGrid::Paired { pairs: vec![(0.0, 1.0)] }), ..CvConfig::default() };
        assert!(bad.validate().is_err());
        let empty = CvConfig { candidates: Some(CandidateGrid::Product { h1s: vec![], h2s: vec![1.0] }), ..CvConfig::default() };
        assert!(empty.validate().is_err());
    }
}
