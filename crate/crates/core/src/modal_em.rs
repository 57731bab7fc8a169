//! Linear uni-modal regression `m(x) = β0 + β1 x` fitted by the modal EM
//! algorithm with a Gaussian kernel, restarted from several initial lines.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bandwidth::silverman_rule;
use crate::density::Sample;
use crate::error::{ModalError, Result};
use crate::kernels::Kernel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    /// Kernel bandwidth; Silverman's rule on OLS residuals when `None`.
    pub h: Option<f64>,
    pub n_starts: usize,
    pub max_iter: usize,
    /// Stop when `max(|Δβ0|, |Δβ1|)` drops below this.
    pub conv_tol: f64,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self { h: None, n_starts: 20, max_iter: 1000, conv_tol: 1e-8, seed: 0 }
    }
}

/// One EM run from one initial line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmRun {
    pub start_index: usize,
    pub start: (f64, f64),
    pub beta0: f64,
    pub beta1: f64,
    /// Objective before the first iteration followed by its value after
    /// every iteration.
    pub objective_trace: Vec<f64>,
    pub n_iter: usize,
    pub converged: bool,
}

impl EmRun {
    pub fn final_objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace holds the initial value")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModalFit {
    pub beta0: f64,
    pub beta1: f64,
    pub h: f64,
    pub objective_trace: Vec<f64>,
    pub n_iter: usize,
    pub start_index: usize,
    /// Every successful run, in start order.
    pub runs: Vec<EmRun>,
}

/// `(1 / (n h)) Σ K((Y_i - β0 - β1 X_i) / h)` with a Gaussian `K`.
pub fn modal_objective(data: &Sample, beta0: f64, beta1: f64, h: f64) -> f64 {
    let s: f64 = data
        .x()
        .iter()
        .zip(data.y())
        .map(|(&x, &y)| Kernel::Gaussian.eval((y - beta0 - beta1 * x) / h))
        .sum();
    s / (data.len() as f64 * h)
}

/// E-step: `π_i ∝ K((Y_i - β0 - β1 X_i) / h)`, normalized to sum to one.
/// Falls back to uniform weights when every kernel term underflows.
pub fn em_weights(data: &Sample, beta0: f64, beta1: f64, h: f64) -> Result<Vec<f64>> {
    if !(h.is_finite() && h > 0.0) {
        return Err(ModalError::invalid(format!("bandwidth h = {h} must be positive")));
    }
    let raw: Vec<f64> = data
        .x()
        .iter()
        .zip(data.y())
        .map(|(&x, &y)| Kernel::Gaussian.eval((y - beta0 - beta1 * x) / h))
        .collect();
    let total: f64 = raw.iter().sum();
    let n = data.len();
    if total == 0.0 {
        warn!("all E-step kernel weights underflowed; using uniform weights");
        return Ok(vec![1.0 / n as f64; n]);
    }
    Ok(raw.into_iter().map(|r| r / total).collect())
}

/// M-step: weighted least squares `(XᵀWX)⁻¹XᵀWY` for the design `(1, X_i)`.
pub fn em_mstep(data: &Sample, weights: &[f64]) -> Result<(f64, f64)> {
    if weights.len() != data.len() {
        return Err(ModalError::invalid("weights and sample differ in length"));
    }
    let sw: f64 = weights.iter().sum();
    if !(sw > 0.0) {
        return Err(ModalError::Singular("weights sum to zero".into()));
    }
    let xbar = data.x().iter().zip(weights).map(|(x, w)| w * x).sum::<f64>() / sw;
    let ybar = data.y().iter().zip(weights).map(|(y, w)| w * y).sum::<f64>() / sw;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut sx2 = 0.0;
    for ((&x, &y), &w) in data.x().iter().zip(data.y()).zip(weights) {
        sxx += w * (x - xbar) * (x - xbar);
        sxy += w * (x - xbar) * (y - ybar);
        sx2 += w * x * x;
    }
    if sxx <= 1e-13 * sx2 || sxx == 0.0 {
        return Err(ModalError::Singular("weighted covariates have no spread".into()));
    }
    let beta1 = sxy / sxx;
    Ok((ybar - beta1 * xbar, beta1))
}

/// Ordinary least squares (uniform-weight M-step).
pub fn ordinary_least_squares(data: &Sample) -> Result<(f64, f64)> {
    em_mstep(data, &vec![1.0; data.len()])
}

/// Hits and misses of the box-kernel window around a candidate line:
/// `hit = #{i : |β0 + β1 X_i - Y_i| <= h}` and `miss = n - hit`.
pub fn box_loss_equivalence_check(data: &Sample, beta0: f64, beta1: f64, h: f64) -> (usize, usize) {
    let hits = data
        .x()
        .iter()
        .zip(data.y())
        .filter(|(&x, &y)| (beta0 + beta1 * x - y).abs() <= h)
        .count();
    (hits, data.len() - hits)
}

fn run_em(data: &Sample, start_index: usize, start: (f64, f64), h: f64, cfg: &EmConfig) -> Result<EmRun> {
    let (mut b0, mut b1) = start;
    let mut trace = vec![modal_objective(data, b0, b1, h)];
    let mut converged = false;
    let mut n_iter = 0;
    while n_iter < cfg.max_iter {
        let w = em_weights(data, b0, b1, h)?;
        let (nb0, nb1) = em_mstep(data, &w)?;
        n_iter += 1;
        let change = (nb0 - b0).abs().max((nb1 - b1).abs());
        b0 = nb0;
        b1 = nb1;
        trace.push(modal_objective(data, b0, b1, h));
        if change < cfg.conv_tol {
            converged = true;
            break;
        }
    }
    Ok(EmRun { start_index, start, beta0: b0, beta1: b1, objective_trace: trace, n_iter, converged })
}

fn initial_lines(data: &Sample, cfg: &EmConfig, ols: (f64, f64)) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = data.len();
    let (x, y) = (data.x(), data.y());
    let mut starts = vec![ols];
    while starts.len() < cfg.n_starts {
        let line = (0..100).find_map(|_| {
            let i = rng.gen_range(0..n);
            let j = rng.gen_range(0..n);
            (i != j && x[i] != x[j]).then(|| {
                let slope = (y[j] - y[i]) / (x[j] - x[i]);
                (y[i] - slope * x[i], slope)
            })
        });
        match line {
            Some(l) => starts.push(l),
            None => break,
        }
    }
    starts
}

/// Modal EM with restarts: the OLS line plus lines through random pairs of
/// observations. Returns the run with the largest final objective (lowest
/// start index on ties).
pub fn fit_linear_modal(data: &Sample, cfg: &EmConfig) -> Result<LinearModalFit> {
    if data.len() < 2 {
        return Err(ModalError::invalid("modal EM needs at least two observations"));
    }
    if cfg.n_starts == 0 || cfg.max_iter == 0 || !(cfg.conv_tol > 0.0) {
        return Err(ModalError::invalid("n_starts, max_iter and conv_tol must be positive"));
    }
    let ols = ordinary_least_squares(data)?;
    let h = match cfg.h {
        Some(h) if h.is_finite() && h > 0.0 => h,
        Some(h) => return Err(ModalError::invalid(format!("bandwidth h = {h} must be positive"))),
        None => {
            let resid: Vec<f64> = data
                .x()
                .iter()
                .zip(data.y())
                .map(|(&x, &y)| y - ols.0 - ols.1 * x)
                .collect();
            silverman_rule(&resid)?
        }
    };
    let starts = initial_lines(data, cfg, ols);
    let results: Vec<Result<EmRun>> = starts
        .par_iter()
        .enumerate()
        .map(|(k, &s)| run_em(data, k, s, h, cfg))
        .collect();
    let mut runs = Vec::with_capacity(results.len());
    let mut first_err = None;
    for r in results {
        match r {
            Ok(run) => runs.push(run),
            Err(e) => {
                warn!("modal EM restart failed: {e}");
                first_err.get_or_insert(e);
            }
        }
    }
    let best = runs
        .iter()
        .fold(None::<&EmRun>, |best, r| match best {
            Some(b) if b.final_objective() >= r.final_objective() => Some(b),
            _ => Some(r),
        })
        .ok_or_else(|| first_err.unwrap_or(ModalError::Singular("no EM run succeeded".into())))?
        .clone();
    Ok(LinearModalFit {
        beta0: best.beta0,
        beta1: best.beta1,
        h,
        objective_trace: best.objective_trace.clone(),
        n_iter: best.n_iter,
        start_index: best.start_index,
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn line_sample(n: usize, seed: u64, noise: f64) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let y = x
            .iter()
            .map(|&xi| 1.0 + 2.0 * xi + noise * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Sample::new(x, y).unwrap()
    }

    #[test]
    fn equal_residuals_give_uniform_weights() {
        let s = Sample::new(vec![0.0, 1.0, 2.0, 3.0], vec![1.5, 2.5, 3.5, 4.5]).unwrap();
        let w = em_weights(&s, 1.0, 1.0, 0.7).unwrap();
        for wi in &w {
            assert!((wi - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn dominant_residual_takes_the_weight() {
        let s = Sample::new(vec![0.0, 1.0, 2.0], vec![0.0, 50.0, -40.0]).unwrap();
        let w = em_weights(&s, 0.0, 0.0, 1.0).unwrap();
        assert!((w[0] - 1.0).abs() < 1e-12);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn three_point_weights() {
        let s = Sample::new(vec![0.0, 1.0, 2.0], vec![0.0, 1.5, 1.0]).unwrap();
        let w = em_weights(&s, 0.0, 1.0, 1.0).unwrap();
        // residuals 0, 0.5, -1: weights ∝ e^0, e^-0.125, e^-0.5
        let r = [1.0f64, (-0.125f64).exp(), (-0.5f64).exp()];
        let total: f64 = r.iter().sum();
        for (wi, ri) in w.iter().zip(r) {
            assert!((wi - ri / total).abs() < 1e-15);
        }
    }

    #[test]
    fn underflow_falls_back_to_uniform() {
        let s = Sample::new(vec![0.0, 1.0], vec![1e6, -1e6]).unwrap();
        assert_eq!(em_weights(&s, 0.0, 0.0, 1e-3).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn mstep_recovers_exact_line() {
        let s = Sample::new(vec![0.0, 1.0, 2.0, 5.0], vec![1.0, 3.0, 5.0, 11.0]).unwrap();
        let (b0, b1) = em_mstep(&s, &[0.25; 4]).unwrap();
        assert!((b0 - 1.0).abs() < 1e-12 && (b1 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_mstep_is_ols() {
        let s = line_sample(20, 9, 0.5);
        let (b0, b1) = em_mstep(&s, &[1.0 / 20.0; 20]).unwrap();
        // Normal equations solved by Cramer's rule.
        let n = 20.0;
        let sx: f64 = s.x().iter().sum();
        let sy: f64 = s.y().iter().sum();
        let sxx: f64 = s.x().iter().map(|x| x * x).sum();
        let sxy: f64 = s.x().iter().zip(s.y()).map(|(x, y)| x * y).sum();
        let det = n * sxx - sx * sx;
        let ob0 = (sxx * sy - sx * sxy) / det;
        let ob1 = (n * sxy - sx * sy) / det;
        assert!((b0 - ob0).abs() < 1e-10 && (b1 - ob1).abs() < 1e-10);
    }

    #[test]
    fn two_point_weights_give_the_line_through_them() {
        let s = Sample::new(vec![0.0, 1.0, 2.0, 3.0], vec![5.0, 1.0, 9.0, 4.0]).unwrap();
        let (b0, b1) = em_mstep(&s, &[0.0, 0.5, 0.0, 0.5]).unwrap();
        assert!((b1 - 1.5).abs() < 1e-12 && (b0 + 0.5).abs() < 1e-12);
    }

    #[test]
    fn constant_covariate_is_singular() {
        let s = Sample::new(vec![2.0; 5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert!(matches!(em_mstep(&s, &[0.2; 5]), Err(ModalError::Singular(_))));
        assert!(matches!(fit_linear_modal(&s, &EmConfig::default()), Err(ModalError::Singular(_))));
    }

    #[test]
    fn exact_line_is_recovered() {
        let s = line_sample(50, 1, 0.0);
        let fit = fit_linear_modal(&s, &EmConfig { h: Some(0.05), ..Default::default() }).unwrap();
        assert!((fit.beta0 - 1.0).abs() < 1e-6 && (fit.beta1 - 2.0).abs() < 1e-6);
    }

    #[test]
    fn traces_are_non_decreasing() {
        let s = line_sample(100, 2, 0.3);
        let fit = fit_linear_modal(&s, &EmConfig { h: Some(0.2), ..Default::default() }).unwrap();
        for run in &fit.runs {
            for w in run.objective_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-12);
            }
        }
    }

    #[test]
    fn majority_of_two_parallel_lines_wins() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 300;
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let offset = if i % 3 == 0 { 3.0 } else { 0.0 };
                offset + 0.5 * x[i] + 0.1 * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        let s = Sample::new(x, y).unwrap();
        let h = 0.15;
        let fit = fit_linear_modal(&s, &EmConfig { h: Some(h), n_starts: 30, ..Default::default() }).unwrap();
        // The majority line has the larger objective value.
        assert!(modal_objective(&s, 0.0, 0.5, h) > modal_objective(&s, 3.0, 0.5, h));
        assert!(fit.beta0.abs() < 0.1 && (fit.beta1 - 0.5).abs() < 0.2);
    }

    #[test]
    fn shift_equivariance() {
        let s = line_sample(80, 4, 0.4);
        let c = 7.25;
        let shifted = Sample::new(s.x().to_vec(), s.y().iter().map(|y| y + c).collect()).unwrap();
        let cfg = EmConfig { h: Some(0.3), ..Default::default() };
        let a = fit_linear_modal(&s, &cfg).unwrap();
        let b = fit_linear_modal(&shifted, &cfg).unwrap();
        assert!((b.beta0 - a.beta0 - c).abs() < 1e-6, "{} vs {} ({} vs {})", a.beta0, b.beta0, a.start_index, b.start_index);
        assert!((b.beta1 - a.beta1).abs() < 1e-6, "{} vs {}", a.beta1, b.beta1);
    }

    #[test]
    fn box_hits_and_misses() {
        let exact = line_sample(30, 5, 0.0);
        assert_eq!(box_loss_equivalence_check(&exact, 1.0, 2.0, 1e-9), (30, 0));
        let noisy = line_sample(30, 6, 0.5);
        assert_eq!(box_loss_equivalence_check(&noisy, 1.0, 2.0, 1e-300), (0, 30));
        let (hit, miss) = box_loss_equivalence_check(&noisy, 0.0, 1.0, 0.7);
        assert_eq!(hit + miss, 30);
    }
}
