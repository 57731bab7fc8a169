//! Prediction bands and bootstrap confidence bands around modal curves.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::Sample;
use crate::error::{ModalError, Result};
use crate::metrics::error_report;
use crate::modes::{FitSettings, ModalCurve};
use crate::numeric::{derive_seed, merge_intervals, quantile_higher, trapezoid_weights};

const STREAM_BOOTSTRAP: u64 = 0xB007;

/// Minimum number of bootstrap replicates for a confidence band.
pub const MIN_REPLICATES: usize = 20;

/// Largest tolerated fraction of dropped bootstrap replicates.
pub const MAX_DROPPED_FRACTION: f64 = 0.1;

/// Union of `[mode - r, mode + r]` at each grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionBand {
    pub level: f64,
    pub radius: f64,
    pub grid: Vec<f64>,
    /// Disjoint sorted intervals per grid point.
    pub intervals: Vec<Vec<(f64, f64)>>,
    /// `Σ_k w_k · (total interval length at x_k)` with trapezoid weights.
    pub total_size: f64,
    pub residuals: Vec<f64>,
    /// Holdout points whose nearest grid point had no modes, so the residual
    /// was taken at the nearest non-empty grid point instead.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub fallback: Vec<usize>,
}

impl PredictionBand {
    /// Whether `(x, y)` lies in the band, judged at the grid point used for
    /// residuals.
    pub fn covers(&self, curve_grid_index: usize, y: f64) -> bool {
        self.intervals[curve_grid_index].iter().any(|&(lo, hi)| lo <= y && y <= hi)
    }
}

/// Residual of `(x, y)` against the closest non-empty mode set: the index
/// used, whether it was a fallback, and the distance.
pub fn modal_residual(curve: &ModalCurve, x: f64, y: f64) -> Result<(usize, bool, f64)> {
    let (k, fallback) = curve
        .nearest_nonempty_index(x)
        .ok_or_else(|| ModalError::EmptySet("every mode set of the curve is empty".into()))?;
    let e = curve.sets[k].modes.iter().map(|m| (y - m.y).abs()).fold(f64::INFINITY, f64::min);
    Ok((k, fallback, e))
}

/// Merged band of half-width `radius` around each mode set.
pub fn band_intervals(curve: &ModalCurve, radius: f64) -> Vec<Vec<(f64, f64)>> {
    curve
        .sets
        .iter()
        .map(|s| merge_intervals(s.modes.iter().map(|m| (m.y - radius, m.y + radius)).collect()))
        .collect()
}

/// Trapezoid-weighted total length of per-grid-point interval unions.
pub fn band_size(grid: &[f64], intervals: &[Vec<(f64, f64)>]) -> f64 {
    trapezoid_weights(grid)
        .iter()
        .zip(intervals)
        .map(|(w, iv)| w * iv.iter().map(|(lo, hi)| hi - lo).sum::<f64>())
        .sum()
}

/// Prediction band whose radius is the `level` quantile ("higher"
/// convention) of holdout residuals to the nearest mode. `level = 1` gives
/// the maximum residual.
pub fn prediction_band(curve: &ModalCurve, holdout: &Sample, level: f64) -> Result<PredictionBand> {
    if !(level > 0.0 && level <= 1.0) {
        return Err(ModalError::invalid(format!("level {level} not in (0, 1]")));
    }
    let mut residuals = Vec::with_capacity(holdout.len());
    let mut fallback = Vec::new();
    for (i, (&x, &y)) in holdout.x().iter().zip(holdout.y()).enumerate() {
        let (_, fell_back, e) = modal_residual(curve, x, y)?;
        if fell_back {
            fallback.push(i);
        }
        residuals.push(e);
    }
    if !fallback.is_empty() {
        warn!("{} holdout points used a non-nearest grid point", fallback.len());
    }
    let radius = quantile_higher(&residuals, level)?;
    let intervals = band_intervals(curve, radius);
    let total_size = band_size(&curve.grid, &intervals);
    Ok(PredictionBand { level, radius, grid: curve.grid.clone(), intervals, total_size, residuals, fallback })
}

/// Coverage of a prediction band on fresh data, using the same grid-point
/// rule as the residuals.
pub fn empirical_coverage(curve: &ModalCurve, band: &PredictionBand, data: &Sample) -> Result<f64> {
    let mut hits = 0usize;
    for (&x, &y) in data.x().iter().zip(data.y()) {
        let (k, _, _) = modal_residual(curve, x, y)?;
        if band.covers(k, y) {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

/// `M̂_n ⊕ radius` with the radius taken from bootstrap sup-deviations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceBand {
    pub level: f64,
    pub radius: f64,
    pub curve: ModalCurve,
    pub intervals: Vec<Vec<(f64, f64)>>,
    /// `sup_x Hausdorff(M̂*_b(x), M̂_n(x))` for each retained replicate.
    pub deviations: Vec<f64>,
    pub replicates: usize,
    /// Replicates dropped because every refitted mode set was empty.
    pub dropped: usize,
}

/// Draw `n` pairs with replacement.
pub fn resample_pairs(sample: &Sample, seed: u64) -> Result<Sample> {
    let n = sample.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
    sample.select(&idx)
}

/// Empirical-bootstrap confidence band with `b` replicates.
pub fn bootstrap_confidence_band(
    data: &Sample,
    settings: &FitSettings,
    grid: &[f64],
    b: usize,
    level: f64,
    seed: u64,
) -> Result<ConfidenceBand> {
    bootstrap_confidence_band_with(data, settings, grid, b, level, seed, resample_pairs)
}

/// As [`bootstrap_confidence_band`] with a custom resampler, called with the
/// data and a per-replicate seed.
pub fn bootstrap_confidence_band_with<F>(
    data: &Sample,
    settings: &FitSettings,
    grid: &[f64],
    b: usize,
    level: f64,
    seed: u64,
    resample: F,
) -> Result<ConfidenceBand>
where
    F: Fn(&Sample, u64) -> Result<Sample> + Sync,
{
    if b < MIN_REPLICATES {
        return Err(ModalError::invalid(format!("need at least {MIN_REPLICATES} bootstrap replicates, got {b}")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(ModalError::invalid(format!("level {level} not in (0, 1)")));
    }
    let curve = settings.fit(data, grid)?;
    let (lo, hi) = data.response_range();
    let penalty = hi - lo;
    let outcomes: Vec<Option<f64>> = (0..b)
        .into_par_iter()
        .map(|r| {
            let boot = resample(data, derive_seed(seed, STREAM_BOOTSTRAP, r as u64))?;
            let refit = settings.fit(&boot, grid)?;
            if refit.empty_count() == refit.len() {
                return Ok(None);
            }
            Ok(Some(error_report(&refit, &curve, None, penalty)?.uniform))
        })
        .collect::<Result<_>>()?;
    let deviations: Vec<f64> = outcomes.iter().flatten().copied().collect();
    let dropped = b - deviations.len();
    if dropped as f64 > MAX_DROPPED_FRACTION * b as f64 {
        return Err(ModalError::TooManyDropped { dropped, total: b });
    }
    if dropped > 0 {
        warn!("dropped {dropped} of {b} bootstrap replicates with no modes");
    }
    let radius = quantile_higher(&deviations, level)?;
    let intervals = band_intervals(&curve, radius);
    Ok(ConfidenceBand { level, radius, curve, intervals, deviations, replicates: b, dropped })
}
