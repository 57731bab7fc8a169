//! Conditional mode estimation: the global conditional mode `m̂(x)` and the
//! set of conditional local modes `M̂(x)` of a joint density estimate.
//!
//! Local modes are located with the partial meanshift iteration, which holds
//! the covariate fixed and moves only the response coordinate. Converged
//! points are polished with Newton steps on `∂p̂/∂y`, merged, and kept only if
//! they satisfy the first- and second-order conditions. Models whose
//! covariate weights can be negative (deconvolution) or whose response kernel
//! is not Gaussian are handled by a dense scan of `y ↦ p̂(x, y)` followed by
//! golden-section and Newton refinement.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::{JointDensityModel, Sample, Slice, Variant};
use crate::error::{ModalError, Result};
use crate::kernels::Kernel;
use crate::numeric::{golden_section_max, linspace};

/// Scan resolution in units of `h2`.
const SCAN_STEPS_PER_BANDWIDTH: f64 = 20.0;

/// Tuning knobs for the partial meanshift search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanshiftConfig {
    pub max_iter: usize,
    /// Stop once `|Δy|` falls below this. Defaults to `1e-7` times the
    /// response range.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub conv_tol: Option<f64>,
    /// Converged points closer than this are one mode. Defaults to `h2 / 2`.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub merge_tol: Option<f64>,
    /// Equally spaced starting points per covariate value.
    pub init_count: usize,
    /// Bound on the normalized gradient `h2 |∂p̂/∂y| / p̂` of a reported mode.
    pub grad_tol: f64,
}

impl Default for MeanshiftConfig {
    fn default() -> Self {
        Self { max_iter: 500, conv_tol: None, merge_tol: None, init_count: 30, grad_tol: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy)]
struct Resolved {
    max_iter: usize,
    conv_tol: f64,
    merge_tol: f64,
    init_count: usize,
    grad_tol: f64,
    lo: f64,
    hi: f64,
}

impl MeanshiftConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: Option<f64>| v.map_or(true, |t| t.is_finite() && t > 0.0);
        if self.max_iter == 0 || self.init_count == 0 {
            return Err(ModalError::invalid("max_iter and init_count must be positive"));
        }
        if !positive(self.conv_tol) || !positive(self.merge_tol) || !positive(Some(self.grad_tol)) {
            return Err(ModalError::invalid("tolerances must be positive"));
        }
        Ok(())
    }

    fn resolve(&self, model: &JointDensityModel) -> Result<Resolved> {
        self.validate()?;
        let (ymin, ymax) = model.response_range();
        let h2 = model.h2();
        let scale = (ymax - ymin).max(h2);
        Ok(Resolved {
            max_iter: self.max_iter,
            conv_tol: self.conv_tol.unwrap_or(1e-7 * scale),
            merge_tol: self.merge_tol.unwrap_or(0.5 * h2),
            init_count: self.init_count,
            grad_tol: self.grad_tol,
            lo: ymin - h2,
            hi: ymax + h2,
        })
    }
}

/// One conditional local mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    pub y: f64,
    /// `p̂(x, y)` at the mode.
    pub density: f64,
    /// `∂²p̂/∂y²` at the mode (negative).
    pub curvature: f64,
    /// `h2 |∂p̂/∂y| / |p̂|` at the mode.
    pub gradient: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SetFlag {
    /// No observation carries covariate weight at this `x`.
    FlatDensity,
    /// Candidates were found but none passed the mode conditions.
    NoMode,
}

/// Conditional local modes at one covariate value, sorted by `y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSet {
    pub x: f64,
    pub modes: Vec<Mode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<SetFlag>,
}

impl ModeSet {
    pub fn empty(x: f64, flag: SetFlag) -> Self {
        Self { x, modes: Vec::new(), flag: Some(flag) }
    }

    pub fn values(&self) -> Vec<f64> {
        self.modes.iter().map(|m| m.y).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    /// Mode with the largest density (first on ties).
    pub fn highest(&self) -> Option<&Mode> {
        self.modes
            .iter()
            .fold(None, |best: Option<&Mode>, m| match best {
                Some(b) if b.density >= m.density => Some(b),
                _ => Some(m),
            })
    }
}

/// Multi-valued curve: a [`ModeSet`] per covariate grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalCurve {
    pub grid: Vec<f64>,
    pub sets: Vec<ModeSet>,
}

impl ModalCurve {
    pub fn new(grid: Vec<f64>, sets: Vec<ModeSet>) -> Result<Self> {
        validate_grid(&grid)?;
        if grid.len() != sets.len() {
            return Err(ModalError::GridMismatch(format!(
                "{} grid points but {} mode sets",
                grid.len(),
                sets.len()
            )));
        }
        Ok(Self { grid, sets })
    }

    /// Curve of plain values (density/curvature unknown, recorded as 0).
    pub fn from_values(grid: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        let sets = grid
            .iter()
            .zip(values)
            .map(|(&x, ys)| {
                let mut ys = ys;
                ys.sort_by(f64::total_cmp);
                let modes: Vec<Mode> = ys
                    .into_iter()
                    .map(|y| Mode { y, density: 0.0, curvature: 0.0, gradient: 0.0 })
                    .collect();
                let flag = modes.is_empty().then_some(SetFlag::NoMode);
                ModeSet { x, modes, flag }
            })
            .collect();
        Self::new(grid, sets)
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    /// Index of the grid point closest to `x` (lower index on ties).
    pub fn nearest_index(&self, x: f64) -> usize {
        let k = self.grid.partition_point(|&g| g < x);
        if k == 0 {
            0
        } else if k == self.grid.len() {
            k - 1
        } else if (x - self.grid[k - 1]) <= (self.grid[k] - x) {
            k - 1
        } else {
            k
        }
    }

    /// Index of the closest grid point whose mode set is non-empty, and
    /// whether that differs from the plain nearest index.
    pub fn nearest_nonempty_index(&self, x: f64) -> Option<(usize, bool)> {
        let k = self.nearest_index(x);
        if !self.sets[k].is_empty() {
            return Some((k, false));
        }
        self.grid
            .iter()
            .enumerate()
            .filter(|(j, _)| !self.sets[*j].is_empty())
            .min_by(|a, b| (a.1 - x).abs().total_cmp(&(b.1 - x).abs()))
            .map(|(j, _)| (j, true))
    }

    pub fn empty_count(&self) -> usize {
        self.sets.iter().filter(|s| s.is_empty()).count()
    }
}

/// Single-valued curve `m̂(x)`; `None` where no mode was found.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnimodalCurve {
    pub grid: Vec<f64>,
    pub values: Vec<Option<f64>>,
}

impl UnimodalCurve {
    /// View as a multi-valued curve with at most one mode per point.
    pub fn to_modal_curve(&self) -> ModalCurve {
        let values = self.values.iter().map(|v| v.iter().copied().collect()).collect();
        ModalCurve::from_values(self.grid.clone(), values).expect("grid validated at construction")
    }
}

pub(crate) fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(ModalError::invalid("covariate grid is empty"));
    }
    if grid.iter().any(|g| !g.is_finite()) {
        return Err(ModalError::invalid("covariate grid has non-finite values"));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(ModalError::invalid("covariate grid must be strictly increasing"));
    }
    Ok(())
}

/// `h2 |∂p̂/∂y| / |p̂|`, the length of the meanshift step a Gaussian response
/// kernel would take, in units of `h2`.
pub fn normalized_gradient(dy: f64, density: f64, h2: f64) -> f64 {
    if density == 0.0 {
        f64::INFINITY
    } else {
        h2 * dy.abs() / density.abs()
    }
}

fn require_gaussian_response(model: &JointDensityModel) -> Result<()> {
    if model.response_kernel() == Kernel::Gaussian {
        Ok(())
    } else {
        Err(ModalError::Unsupported(format!(
            "partial meanshift needs a gaussian response kernel, got {}",
            model.response_kernel().name()
        )))
    }
}

/// One partial meanshift update at fixed `x`.
pub fn partial_meanshift_step(model: &JointDensityModel, x: f64, y: f64) -> Result<f64> {
    require_gaussian_response(model)?;
    model.slice(x).meanshift(y).ok_or(ModalError::DivergedInit { x, y })
}

/// Full meanshift trajectory `y⁽⁰⁾, y⁽¹⁾, …` from `y0` until the step falls
/// below the convergence tolerance or the iteration cap is reached.
pub fn meanshift_path(model: &JointDensityModel, x: f64, y0: f64, cfg: &MeanshiftConfig) -> Result<Vec<f64>> {
    require_gaussian_response(model)?;
    let r = cfg.resolve(model)?;
    let slice = model.slice(x);
    let mut path = vec![y0];
    let mut y = y0;
    for _ in 0..r.max_iter {
        let next = slice.meanshift(y).ok_or(ModalError::DivergedInit { x, y })?;
        path.push(next);
        let done = (next - y).abs() < r.conv_tol;
        y = next;
        if done {
            break;
        }
    }
    Ok(path)
}

fn iterate_meanshift(slice: &Slice, y0: f64, r: &Resolved) -> Option<f64> {
    let mut y = y0;
    for _ in 0..r.max_iter {
        let next = slice.meanshift(y)?;
        let step = (next - y).abs();
        y = next;
        if step < r.conv_tol {
            break;
        }
    }
    Some(y)
}

/// Newton refinement of a local maximum of `y ↦ p̂(x, y)`, accepting steps
/// only while they shrink the gradient.
fn polish(slice: &Slice, mut y: f64, lo: f64, hi: f64) -> f64 {
    let max_step = 0.25 * slice.h2();
    let mut g = slice.dy(y);
    for _ in 0..60 {
        let c = slice.dyy(y);
        if !(c < 0.0) || g == 0.0 {
            break;
        }
        let step = (-g / c).clamp(-max_step, max_step);
        let next = (y + step).clamp(lo, hi);
        let g_next = slice.dy(next);
        if g_next.abs() >= g.abs() {
            break;
        }
        y = next;
        g = g_next;
        if step.abs() <= 1e-15 * (1.0 + y.abs()) {
            break;
        }
    }
    y
}

fn assess(slice: &Slice, y: f64) -> Mode {
    let density = slice.density(y);
    Mode {
        y,
        density,
        curvature: slice.dyy(y),
        gradient: normalized_gradient(slice.dy(y), density, slice.h2()),
    }
}

/// Chain-cluster sorted candidates with gaps `<= merge_tol`, keeping the
/// highest-density member of each cluster.
fn merge_candidates(mut candidates: Vec<Mode>, merge_tol: f64) -> Vec<Mode> {
    candidates.sort_by(|a, b| a.y.total_cmp(&b.y));
    let mut out: Vec<Mode> = Vec::new();
    let mut last_y = f64::NEG_INFINITY;
    for c in candidates {
        match out.last_mut() {
            Some(best) if c.y - last_y <= merge_tol => {
                if c.density > best.density {
                    *best = c;
                }
            }
            _ => out.push(c),
        }
        last_y = c.y;
    }
    out
}

fn uses_meanshift(model: &JointDensityModel, slice: &Slice) -> bool {
    model.response_kernel() == Kernel::Gaussian
        && model.variant() != Variant::Deconvolution
        && slice.has_nonnegative_weights()
}

fn scan_candidates(slice: &Slice, r: &Resolved) -> Vec<f64> {
    let count = (((r.hi - r.lo) / slice.h2()) * SCAN_STEPS_PER_BANDWIDTH).ceil() as usize + 1;
    let ys = linspace(r.lo, r.hi, count.max(3));
    let ds: Vec<f64> = ys.iter().map(|&y| slice.density(y)).collect();
    let mut out = Vec::new();
    for k in 1..ys.len() - 1 {
        if ds[k] > ds[k - 1] && ds[k] >= ds[k + 1] {
            let y = golden_section_max(|y| slice.density(y), ys[k - 1], ys[k + 1], 1e-12 * slice.h2());
            out.push(y);
        }
    }
    out
}

/// Conditional local modes at a single covariate value.
pub fn modes_at(model: &JointDensityModel, x: f64, cfg: &MeanshiftConfig) -> Result<ModeSet> {
    let r = cfg.resolve(model)?;
    modes_at_resolved(model, x, &r)
}

fn modes_at_resolved(model: &JointDensityModel, x: f64, r: &Resolved) -> Result<ModeSet> {
    if !model.response_kernel().is_differentiable() {
        return Err(ModalError::Unsupported(
            "local modes need a differentiable response kernel".into(),
        ));
    }
    let slice = model.slice(x);
    if slice.is_flat() {
        warn!("flat density at x = {x}: no observation has covariate weight");
        return Ok(ModeSet::empty(x, SetFlag::FlatDensity));
    }
    let raw: Vec<f64> = if uses_meanshift(model, &slice) {
        let starts = if r.init_count == 1 {
            vec![0.5 * (r.lo + r.hi)]
        } else {
            linspace(r.lo, r.hi, r.init_count)
        };
        starts.into_iter().filter_map(|y0| iterate_meanshift(&slice, y0, r)).collect()
    } else {
        scan_candidates(&slice, r)
    };
    let had_candidates = !raw.is_empty();
    let polished: Vec<Mode> = raw
        .into_iter()
        .map(|y| assess(&slice, polish(&slice, y, r.lo, r.hi)))
        .collect();
    let modes: Vec<Mode> = merge_candidates(polished, r.merge_tol)
        .into_iter()
        .filter(|m| m.curvature < 0.0 && m.density > 0.0 && m.gradient < r.grad_tol)
        .collect();
    if modes.is_empty() {
        warn!("no conditional mode survived at x = {x}");
        let flag = if had_candidates { SetFlag::NoMode } else { SetFlag::FlatDensity };
        return Ok(ModeSet::empty(x, flag));
    }
    Ok(ModeSet { x, modes, flag: None })
}

/// Multi-modal regression: all conditional local modes on `grid`.
pub fn fit_multimodal(model: &JointDensityModel, grid: &[f64], cfg: &MeanshiftConfig) -> Result<ModalCurve> {
    validate_grid(grid)?;
    let r = cfg.resolve(model)?;
    let sets = grid
        .par_iter()
        .map(|&x| modes_at_resolved(model, x, &r))
        .collect::<Result<Vec<_>>>()?;
    ModalCurve::new(grid.to_vec(), sets)
}

/// Uni-modal regression `m̂(x) = argmax_y p̂(x, y)` on `grid`.
pub fn fit_unimodal(model: &JointDensityModel, grid: &[f64], cfg: &MeanshiftConfig) -> Result<UnimodalCurve> {
    validate_grid(grid)?;
    let r = cfg.resolve(model)?;
    let values = grid
        .par_iter()
        .map(|&x| {
            if model.response_kernel().is_differentiable() {
                let set = modes_at_resolved(model, x, &r)?;
                Ok(set.highest().map(|m| m.y))
            } else {
                Ok(scan_argmax(&model.slice(x), &r))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(UnimodalCurve { grid: grid.to_vec(), values })
}

fn scan_argmax(slice: &Slice, r: &Resolved) -> Option<f64> {
    if slice.is_flat() {
        return None;
    }
    let count = (((r.hi - r.lo) / slice.h2()) * SCAN_STEPS_PER_BANDWIDTH).ceil() as usize + 1;
    let ys = linspace(r.lo, r.hi, count.max(3));
    let (k, best) = ys
        .iter()
        .map(|&y| slice.density(y))
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (k, d)| if d > acc.1 { (k, d) } else { acc });
    if !(best > 0.0) {
        return None;
    }
    let a = ys[k.saturating_sub(1)];
    let b = ys[(k + 1).min(ys.len() - 1)];
    let y = golden_section_max(|y| slice.density(y), a, b, 1e-12 * slice.h2());
    // Golden section can settle on a lower plateau of a step function.
    Some(if slice.density(y) >= best { y } else { ys[k] })
}

/// Bundle of everything needed to refit a standard-variant modal curve on
/// a new sample (bootstrap, cross-validation).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitSettings {
    pub kernel_x: Kernel,
    pub kernel_y: Kernel,
    pub h1: f64,
    pub h2: f64,
    pub meanshift: MeanshiftConfig,
}

impl FitSettings {
    pub fn gaussian(h1: f64, h2: f64) -> Self {
        Self {
            kernel_x: Kernel::Gaussian,
            kernel_y: Kernel::Gaussian,
            h1,
            h2,
            meanshift: MeanshiftConfig::default(),
        }
    }

    pub fn with_bandwidths(self, h1: f64, h2: f64) -> Self {
        Self { h1, h2, ..self }
    }

    pub fn model(&self, sample: &Sample) -> Result<JointDensityModel> {
        JointDensityModel::standard(sample, self.kernel_x, self.kernel_y, self.h1, self.h2)
    }

    pub fn fit(&self, sample: &Sample, grid: &[f64]) -> Result<ModalCurve> {
        fit_multimodal(&self.model(sample)?, grid, &self.meanshift)
    }

    pub fn fit_unimodal(&self, sample: &Sample, grid: &[f64]) -> Result<UnimodalCurve> {
        fit_unimodal(&self.model(sample)?, grid, &self.meanshift)
    }
}
