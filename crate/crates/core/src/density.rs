//! Joint kernel density estimates `p̂(x, y)` (standard, censored-response and
//! deconvolution variants) together with their analytic `y`-derivatives.

use serde::{Deserialize, Serialize};

use crate::error::{ModalError, Result};
use crate::kernels::{CovariateKernel, DeconvBase, DeconvKernel, ErrorDistribution, Kernel};
use crate::numeric::min_max;

fn check_finite(name: &str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(ModalError::invalid(format!("{name}[{i}] is not finite"))),
        None => Ok(()),
    }
}

fn check_bandwidth(name: &str, h: f64) -> Result<()> {
    if h.is_finite() && h > 0.0 {
        Ok(())
    } else {
        Err(ModalError::invalid(format!("bandwidth {name} = {h} must be positive and finite")))
    }
}

/// Paired covariate/response observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    x: Vec<f64>,
    y: Vec<f64>,
}

impl Sample {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(ModalError::invalid(format!(
                "covariate and response lengths differ ({} vs {})",
                x.len(),
                y.len()
            )));
        }
        if x.is_empty() {
            return Err(ModalError::invalid("sample is empty"));
        }
        check_finite("x", &x)?;
        check_finite("y", &y)?;
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    /// Sub-sample (with repetition allowed) by observation index.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let x = indices.iter().map(|&i| self.x[i]).collect();
        let y = indices.iter().map(|&i| self.y[i]).collect();
        Self::new(x, y)
    }

    pub fn covariate_range(&self) -> (f64, f64) {
        min_max(&self.x)
    }

    pub fn response_range(&self) -> (f64, f64) {
        min_max(&self.y)
    }
}

/// Right-censored responses: `T = min(Y, C)` and `δ = I(T = Y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensoredSample {
    x: Vec<f64>,
    t: Vec<f64>,
    delta: Vec<bool>,
}

impl CensoredSample {
    pub fn new(x: Vec<f64>, t: Vec<f64>, delta: Vec<bool>) -> Result<Self> {
        if x.len() != t.len() || x.len() != delta.len() {
            return Err(ModalError::invalid("censored sample columns have different lengths"));
        }
        if x.is_empty() {
            return Err(ModalError::invalid("censored sample is empty"));
        }
        check_finite("x", &x)?;
        check_finite("t", &t)?;
        Ok(Self { x, t, delta })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn t(&self) -> &[f64] {
        &self.t
    }

    pub fn delta(&self) -> &[bool] {
        &self.delta
    }

    pub fn censored_fraction(&self) -> f64 {
        self.delta.iter().filter(|&&d| !d).count() as f64 / self.len() as f64
    }
}

/// Responses with covariates observed through additive error `W = X + U`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContaminatedSample {
    w: Vec<f64>,
    y: Vec<f64>,
    error: ErrorDistribution,
}

impl ContaminatedSample {
    pub fn new(w: Vec<f64>, y: Vec<f64>, error: ErrorDistribution) -> Result<Self> {
        let inner = Sample::new(w, y)?;
        if !(error.scale().is_finite() && error.scale() >= 0.0) {
            return Err(ModalError::invalid("error scale must be finite and >= 0"));
        }
        Ok(Self { w: inner.x, y: inner.y, error })
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn w(&self) -> &[f64] {
        &self.w
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn error(&self) -> ErrorDistribution {
        self.error
    }

    /// Treat the contaminated covariates as if they were exact.
    pub fn naive(&self) -> Sample {
        Sample { x: self.w.clone(), y: self.y.clone() }
    }
}

/// Kaplan–Meier product-limit estimate
/// `Ŝ(t) = Π_{i: T_(i) <= t} (1 - δ_(i) / (n - i + 1))` for `t < T_(n)` and
/// `0` from `T_(n)` on.
///
/// Ties are ordered with events before non-events (stable otherwise).
#[derive(Debug, Clone, PartialEq)]
pub struct KaplanMeier {
    times: Vec<f64>,
    /// `after[i]` is the running product through ordered observation `i`.
    after: Vec<f64>,
}

impl KaplanMeier {
    /// Product-limit estimator over `times` with event indicators `events`.
    /// Zero events is legal here and gives a survival of 1 before `T_(n)`.
    pub fn from_events(times: &[f64], events: &[bool]) -> Result<Self> {
        if times.is_empty() {
            return Err(ModalError::invalid("Kaplan-Meier needs at least one observation"));
        }
        if times.len() != events.len() {
            return Err(ModalError::invalid("times and event indicators differ in length"));
        }
        check_finite("t", times)?;
        Self::from_events_with_priority(times, events, events)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    fn last_time(&self) -> f64 {
        *self.times.last().expect("non-empty")
    }

    /// `Ŝ(t)`, right-continuous.
    pub fn survival(&self, t: f64) -> f64 {
        if t >= self.last_time() {
            return 0.0;
        }
        let count = self.times.partition_point(|&s| s <= t);
        if count == 0 {
            1.0
        } else {
            self.after[count - 1]
        }
    }

    /// Left limit `Ŝ(t⁻) = lim_{s↑t} Ŝ(s)`.
    pub fn survival_left(&self, t: f64) -> f64 {
        if t > self.last_time() {
            return 0.0;
        }
        let count = self.times.partition_point(|&s| s < t);
        if count == 0 {
            1.0
        } else {
            self.after[count - 1]
        }
    }
}

/// Kaplan–Meier estimator of the response survival function.
pub fn kaplan_meier(sample: &CensoredSample) -> Result<KaplanMeier> {
    KaplanMeier::from_events(&sample.t, &sample.delta)
}

/// Survival function placed in the denominator of the censored estimator's
/// weights `δ_i / S(T_i⁻)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CensorWeighting {
    /// Product-limit estimate of the censoring-time survival `P(C > t)`,
    /// obtained by treating `1 - δ` as the event indicator. Reduces to the
    /// standard estimator when nothing is censored.
    #[default]
    CensoringSurvival,
    /// Product-limit estimate of the response survival `P(Y > t)` using `δ`
    /// itself as the event indicator.
    ResponseSurvival,
}

/// Inverse-probability-of-censoring weights `δ_i / S(T_i⁻)`.
pub fn censoring_weights(sample: &CensoredSample, weighting: CensorWeighting) -> Result<Vec<f64>> {
    let km = match weighting {
        CensorWeighting::CensoringSurvival => {
            let flipped: Vec<bool> = sample.delta.iter().map(|d| !d).collect();
            // Event-first tie ordering must still put uncensored first.
            KaplanMeier::from_events_with_priority(&sample.t, &flipped, &sample.delta)?
        }
        CensorWeighting::ResponseSurvival => kaplan_meier(sample)?,
    };
    sample
        .t
        .iter()
        .zip(&sample.delta)
        .map(|(&t, &d)| {
            if !d {
                return Ok(0.0);
            }
            let s = km.survival_left(t);
            if s > 0.0 {
                Ok(1.0 / s)
            } else {
                Err(ModalError::invalid(format!("survival left limit at t = {t} is zero")))
            }
        })
        .collect()
}

impl KaplanMeier {
    /// As [`KaplanMeier::from_events`] but ordering ties by `first` (true
    /// first) rather than by the event flag.
    fn from_events_with_priority(times: &[f64], events: &[bool], first: &[bool]) -> Result<Self> {
        let n = times.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| times[a].total_cmp(&times[b]).then(first[b].cmp(&first[a])));
        // Π (1 - 1/r) over events telescopes to (remaining / n) times
        // Π r / (r - 1) over non-events; evaluating it in that form makes the
        // uncensored case a single division, equal to the empirical survival
        // function bit for bit.
        let mut correction = 1.0;
        let mut after: Vec<f64> = Vec::with_capacity(n);
        let mut sorted = Vec::with_capacity(n);
        for (rank, &i) in order.iter().enumerate() {
            let at_risk = n - rank;
            let value = if events[i] {
                (at_risk - 1) as f64 / n as f64 * correction
            } else {
                if at_risk > 1 {
                    correction *= at_risk as f64 / (at_risk - 1) as f64;
                }
                after.last().copied().unwrap_or(1.0)
            };
            after.push(value);
            sorted.push(times[i]);
        }
        Ok(Self { times: sorted, after })
    }
}

/// Which estimator a [`JointDensityModel`] represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Standard,
    Censored,
    Deconvolution,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Standard => "standard",
            Variant::Censored => "censored",
            Variant::Deconvolution => "deconvolution",
        }
    }
}

/// Kernel estimate of the joint density
/// `p̂(x, y) = (1 / (n h1 h2)) Σ w_i K1((X_i - x)/h1) K2((Y_i - y)/h2)`
/// where `w_i = 1` except for the censored variant.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDensityModel {
    variant: Variant,
    xs: Vec<f64>,
    ys: Vec<f64>,
    weights: Vec<f64>,
    k1: CovariateKernel,
    k2: Kernel,
    h1: f64,
    h2: f64,
    response_range: (f64, f64),
}

impl JointDensityModel {
    pub fn standard(sample: &Sample, k1: Kernel, k2: Kernel, h1: f64, h2: f64) -> Result<Self> {
        check_bandwidth("h1", h1)?;
        check_bandwidth("h2", h2)?;
        Ok(Self {
            variant: Variant::Standard,
            xs: sample.x.clone(),
            ys: sample.y.clone(),
            weights: vec![1.0; sample.len()],
            k1: k1.into(),
            k2,
            h1,
            h2,
            response_range: sample.response_range(),
        })
    }

    pub fn censored(
        sample: &CensoredSample,
        k1: Kernel,
        k2: Kernel,
        h1: f64,
        h2: f64,
        weighting: CensorWeighting,
    ) -> Result<Self> {
        check_bandwidth("h1", h1)?;
        check_bandwidth("h2", h2)?;
        if !sample.delta.iter().any(|&d| d) {
            return Err(ModalError::invalid("censored sample has no uncensored observation"));
        }
        let weights = censoring_weights(sample, weighting)?;
        let observed: Vec<f64> = sample
            .t
            .iter()
            .zip(&sample.delta)
            .filter(|(_, &d)| d)
            .map(|(&t, _)| t)
            .collect();
        Ok(Self {
            variant: Variant::Censored,
            xs: sample.x.clone(),
            ys: sample.t.clone(),
            weights,
            k1: k1.into(),
            k2,
            h1,
            h2,
            response_range: min_max(&observed),
        })
    }

    pub fn deconvolution(
        sample: &ContaminatedSample,
        base: DeconvBase,
        k2: Kernel,
        h1: f64,
        h2: f64,
    ) -> Result<Self> {
        check_bandwidth("h1", h1)?;
        check_bandwidth("h2", h2)?;
        let dk = DeconvKernel::new(base, sample.error, h1)?;
        Ok(Self {
            variant: Variant::Deconvolution,
            xs: sample.w.clone(),
            ys: sample.y.clone(),
            weights: vec![1.0; sample.len()],
            k1: dk.into(),
            k2,
            h1,
            h2,
            response_range: min_max(&sample.y),
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn n(&self) -> usize {
        self.xs.len()
    }

    pub fn h1(&self) -> f64 {
        self.h1
    }

    pub fn h2(&self) -> f64 {
        self.h2
    }

    pub fn covariate_kernel(&self) -> CovariateKernel {
        self.k1
    }

    pub fn response_kernel(&self) -> Kernel {
        self.k2
    }

    pub fn covariates(&self) -> &[f64] {
        &self.xs
    }

    pub fn responses(&self) -> &[f64] {
        &self.ys
    }

    /// Per-observation weights (`δ_i / S(T_i⁻)` for the censored variant).
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Range of responses carrying positive weight.
    pub fn response_range(&self) -> (f64, f64) {
        self.response_range
    }

    fn norm(&self) -> f64 {
        1.0 / (self.n() as f64 * self.h1 * self.h2)
    }

    #[inline]
    fn covariate_factor(&self, i: usize, x: f64) -> f64 {
        self.weights[i] * self.k1.eval((self.xs[i] - x) / self.h1)
    }

    /// Density of whichever variant this model is.
    pub fn density(&self, x: f64, y: f64) -> f64 {
        let s: f64 = (0..self.n())
            .map(|i| self.covariate_factor(i, x) * self.k2.eval((self.ys[i] - y) / self.h2))
            .sum();
        s * self.norm()
    }

    fn expect_variant(&self, expected: Variant) -> Result<()> {
        if self.variant == expected {
            Ok(())
        } else {
            Err(ModalError::WrongVariant { expected: expected.name(), actual: self.variant.name() })
        }
    }

    /// Standard joint KDE.
    pub fn kde_joint(&self, x: f64, y: f64) -> Result<f64> {
        self.expect_variant(Variant::Standard)?;
        Ok(self.density(x, y))
    }

    /// Censoring-weighted joint KDE.
    pub fn kde_censored(&self, x: f64, y: f64) -> Result<f64> {
        self.expect_variant(Variant::Censored)?;
        Ok(self.density(x, y))
    }

    /// Deconvolution joint KDE; may be negative.
    pub fn kde_deconv(&self, x: f64, y: f64) -> Result<f64> {
        self.expect_variant(Variant::Deconvolution)?;
        Ok(self.density(x, y))
    }

    fn require_smooth_response_kernel(&self) -> Result<()> {
        if self.k2.is_differentiable() {
            Ok(())
        } else {
            Err(ModalError::Unsupported(format!(
                "{} response kernel has no usable derivative",
                self.k2.name()
            )))
        }
    }

    /// `∂p̂/∂y`.
    pub fn kde_dy(&self, x: f64, y: f64) -> Result<f64> {
        self.require_smooth_response_kernel()?;
        let s: f64 = (0..self.n())
            .map(|i| self.covariate_factor(i, x) * self.k2.deriv1_unchecked((self.ys[i] - y) / self.h2))
            .sum();
        Ok(-s * self.norm() / self.h2)
    }

    /// `∂²p̂/∂y²`.
    pub fn kde_dyy(&self, x: f64, y: f64) -> Result<f64> {
        self.require_smooth_response_kernel()?;
        let s: f64 = (0..self.n())
            .map(|i| self.covariate_factor(i, x) * self.k2.deriv2_unchecked((self.ys[i] - y) / self.h2))
            .sum();
        Ok(s * self.norm() / (self.h2 * self.h2))
    }

    /// Covariate marginal `(1 / (n h1)) Σ w_i K1((X_i - x)/h1)`.
    pub fn marginal(&self, x: f64) -> f64 {
        let s: f64 = (0..self.n()).map(|i| self.covariate_factor(i, x)).sum();
        s / (self.n() as f64 * self.h1)
    }

    /// Conditional density estimate `p̂(y | x) = p̂(x, y) / p̂(x)`; `None`
    /// when the marginal vanishes.
    pub fn conditional(&self, x: f64, y: f64) -> Option<f64> {
        let m = self.marginal(x);
        (m != 0.0).then(|| self.density(x, y) / m)
    }

    /// Precompute the covariate factors at a fixed `x` for fast evaluation
    /// along the response axis.
    pub fn slice(&self, x: f64) -> Slice {
        let mut ys = Vec::with_capacity(self.n());
        let mut coef = Vec::with_capacity(self.n());
        for i in 0..self.n() {
            let a = self.covariate_factor(i, x);
            if a != 0.0 {
                ys.push(self.ys[i]);
                coef.push(a);
            }
        }
        Slice { x, ys, coef, k2: self.k2, h2: self.h2, norm: self.norm() }
    }
}

/// A joint density restricted to one covariate value.
#[derive(Debug, Clone)]
pub struct Slice {
    x: f64,
    ys: Vec<f64>,
    coef: Vec<f64>,
    k2: Kernel,
    h2: f64,
    norm: f64,
}

impl Slice {
    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn h2(&self) -> f64 {
        self.h2
    }

    /// No observation has a non-zero covariate factor.
    pub fn is_flat(&self) -> bool {
        self.coef.is_empty()
    }

    /// All covariate factors are non-negative.
    pub fn has_nonnegative_weights(&self) -> bool {
        self.coef.iter().all(|&a| a >= 0.0)
    }

    pub fn density(&self, y: f64) -> f64 {
        let s: f64 = self
            .ys
            .iter()
            .zip(&self.coef)
            .map(|(&yi, &a)| a * self.k2.eval((yi - y) / self.h2))
            .sum();
        s * self.norm
    }

    pub fn dy(&self, y: f64) -> f64 {
        let s: f64 = self
            .ys
            .iter()
            .zip(&self.coef)
            .map(|(&yi, &a)| a * self.k2.deriv1_unchecked((yi - y) / self.h2))
            .sum();
        -s * self.norm / self.h2
    }

    pub fn dyy(&self, y: f64) -> f64 {
        let s: f64 = self
            .ys
            .iter()
            .zip(&self.coef)
            .map(|(&yi, &a)| a * self.k2.deriv2_unchecked((yi - y) / self.h2))
            .sum();
        s * self.norm / (self.h2 * self.h2)
    }

    /// One partial meanshift update `Σ Y_i w_i / Σ w_i` with
    /// `w_i = K1(·) K2((Y_i - y)/h2)`. `None` if the weights sum to zero.
    pub fn meanshift(&self, y: f64) -> Option<f64> {
        let mut num = 0.0;
        let mut den = 0.0;
        for (&yi, &a) in self.ys.iter().zip(&self.coef) {
            let w = a * self.k2.eval((yi - y) / self.h2);
            num += w * yi;
            den += w;
        }
        (den != 0.0).then(|| num / den)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::linspace;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn three_point() -> Sample {
        Sample::new(vec![0.0, 1.0, 2.0], vec![0.0, 1.0, 0.0]).unwrap()
    }

    #[test]
    fn sample_validation() {
        assert!(Sample::new(vec![], vec![]).is_err());
        assert!(Sample::new(vec![1.0], vec![1.0, 2.0]).is_err());
        assert!(Sample::new(vec![f64::NAN], vec![1.0]).is_err());
        let all_censored = CensoredSample::new(vec![1.0], vec![1.0], vec![false]).unwrap();
        let model = JointDensityModel::censored(
            &all_censored,
            Kernel::Gaussian,
            Kernel::Gaussian,
            1.0,
            1.0,
            CensorWeighting::default(),
        );
        assert!(model.is_err());
    }

    #[test]
    fn single_point_at_origin() {
        let s = Sample::new(vec![0.0], vec![0.0]).unwrap();
        let m = JointDensityModel::standard(&s, Kernel::Gaussian, Kernel::Gaussian, 1.0, 1.0).unwrap();
        let v = m.kde_joint(0.0, 0.0).unwrap();
        assert!((v - 1.0 / (2.0 * std::f64::consts::PI)).abs() < 1e-15);
        assert!((v - 0.159155).abs() < 1e-6);
    }

    #[test]
    fn box_kernel_vanishes_far_away() {
        let m = JointDensityModel::standard(&three_point(), Kernel::Box, Kernel::Box, 0.5, 0.5).unwrap();
        assert_eq!(m.kde_joint(10.0, 0.0).unwrap(), 0.0);
        assert_eq!(m.kde_joint(1.0, 10.0).unwrap(), 0.0);
    }

    #[test]
    fn three_point_fixture_matches_direct_sum() {
        let m = JointDensityModel::standard(&three_point(), Kernel::Gaussian, Kernel::Gaussian, 0.5, 0.5)
            .unwrap();
        // Direct expansion: u = (X_i - 1)/0.5 ∈ {-2, 0, 2}, v = (Y_i - 0.5)/0.5 ∈ {-1, 1, -1}.
        let phi = |u: f64| (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let expected = (phi(-2.0) * phi(-1.0) + phi(0.0) * phi(1.0) + phi(2.0) * phi(-1.0)) / (3.0 * 0.25);
        assert!((m.kde_joint(1.0, 0.5).unwrap() - expected).abs() < 1e-15);
        // frozen from an independent 30-digit evaluation
        assert!((expected - 0.163_547_758_932_565).abs() < 1e-12, "{expected}");
    }

    #[test]
    fn wrong_variant_is_rejected() {
        let m = JointDensityModel::standard(&three_point(), Kernel::Gaussian, Kernel::Gaussian, 0.5, 0.5)
            .unwrap();
        assert!(matches!(m.kde_censored(0.0, 0.0), Err(ModalError::WrongVariant { .. })));
        assert!(matches!(m.kde_deconv(0.0, 0.0), Err(ModalError::WrongVariant { .. })));
    }

    #[test]
    fn standard_kde_integrates_to_one() {
        let s = Sample::new(
            vec![0.1, 0.4, 0.5, 0.9, 1.3, 0.2, 0.7],
            vec![1.0, -0.5, 0.3, 0.8, 0.0, 1.2, -1.0],
        )
        .unwrap();
        let m = JointDensityModel::standard(&s, Kernel::Gaussian, Kernel::Gaussian, 0.3, 0.4).unwrap();
        let xs = linspace(-3.0, 4.5, 301);
        let ys = linspace(-4.5, 4.5, 301);
        let (dx, dy) = (xs[1] - xs[0], ys[1] - ys[0]);
        let total: f64 = xs
            .iter()
            .flat_map(|&x| ys.iter().map(move |&y| (x, y)))
            .map(|(x, y)| m.density(x, y))
            .sum::<f64>()
            * dx
            * dy;
        assert!((total - 1.0).abs() < 1e-3, "{total}");
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xs: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..1.0)).collect();
        let ys: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s = Sample::new(xs, ys).unwrap();
        for k2 in [Kernel::Gaussian, Kernel::Epanechnikov] {
            let m = JointDensityModel::standard(&s, Kernel::Gaussian, k2, 0.3, 0.4).unwrap();
            let step = 1e-5;
            for _ in 0..100 {
                let x = rng.gen_range(-0.2..1.2);
                let y = rng.gen_range(-1.5..1.5);
                let fd = (m.density(x, y + step) - m.density(x, y - step)) / (2.0 * step);
                let fd2 = (m.kde_dy(x, y + step).unwrap() - m.kde_dy(x, y - step).unwrap()) / (2.0 * step);
                assert!((fd - m.kde_dy(x, y).unwrap()).abs() < 1e-6);
                if k2 == Kernel::Gaussian {
                    assert!((fd2 - m.kde_dyy(x, y).unwrap()).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn symmetric_data_has_zero_slope_at_center() {
        let s = Sample::new(vec![0.0, 0.0, 0.5, 0.5], vec![-1.0, 1.0, -0.3, 0.3]).unwrap();
        let m = JointDensityModel::standard(&s, Kernel::Gaussian, Kernel::Gaussian, 0.3, 0.4).unwrap();
        assert!(m.kde_dy(0.2, 0.0).unwrap().abs() < 1e-15);
    }

    #[test]
    fn single_point_is_a_mode() {
        let s = Sample::new(vec![0.3], vec![0.7]).unwrap();
        let m = JointDensityModel::standard(&s, Kernel::Gaussian, Kernel::Gaussian, 0.2, 0.2).unwrap();
        assert_eq!(m.kde_dy(0.1, 0.7).unwrap(), 0.0);
        assert!(m.kde_dyy(0.1, 0.7).unwrap() < 0.0);
    }

    #[test]
    fn box_response_kernel_has_no_derivative() {
        let m = JointDensityModel::standard(&three_point(), Kernel::Gaussian, Kernel::Box, 0.5, 0.5).unwrap();
        assert!(matches!(m.kde_dy(0.0, 0.0), Err(ModalError::Unsupported(_))));
        assert!(m.kde_dyy(0.0, 0.0).is_err());
    }

    #[test]
    fn kaplan_meier_without_censoring_is_empirical() {
        let s = CensoredSample::new(vec![0.0; 3], vec![1.0, 2.0, 3.0], vec![true; 3]).unwrap();
        let km = kaplan_meier(&s).unwrap();
        assert_eq!(km.survival(0.5), 1.0);
        assert!((km.survival(1.5) - 2.0 / 3.0).abs() < 1e-15);
        assert!((km.survival(2.5) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(km.survival(3.0), 0.0);
        assert!((km.survival(1.0) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(km.survival_left(1.0), 1.0);
    }

    #[test]
    fn kaplan_meier_mixed_censoring() {
        let s = CensoredSample::new(vec![0.0; 3], vec![1.0, 2.0, 3.0], vec![true, false, true]).unwrap();
        let km = kaplan_meier(&s).unwrap();
        // (1 - 1/3)(1 - 0/2) = 2/3
        assert!((km.survival(2.5) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn kaplan_meier_only_last_event() {
        let s = CensoredSample::new(vec![0.0; 4], vec![4.0, 1.0, 3.0, 2.0], vec![true, false, false, false])
            .unwrap();
        let km = kaplan_meier(&s).unwrap();
        for t in [0.0, 1.0, 2.5, 3.999] {
            assert_eq!(km.survival(t), 1.0);
        }
        assert_eq!(km.survival(4.0), 0.0);
    }

    #[test]
    fn kaplan_meier_ties_put_events_first() {
        // Two observations at t = 1: event and censored. With the event first
        // the factor is 1 - 1/3; with the censored one first it would be 1 - 1/2.
        let km = KaplanMeier::from_events(&[1.0, 1.0, 2.0], &[false, true, true]).unwrap();
        assert!((km.survival(1.5) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn censored_weights_reduce_to_standard_without_censoring() {
        let x = vec![0.1, 0.4, 0.6, 0.8];
        let t = vec![1.0, -0.5, 0.2, 0.9];
        let cs = CensoredSample::new(x.clone(), t.clone(), vec![true; 4]).unwrap();
        let s = Sample::new(x, t).unwrap();
        let mc = JointDensityModel::censored(&cs, Kernel::Gaussian, Kernel::Gaussian, 0.3, 0.3, CensorWeighting::default())
            .unwrap();
        let ms = JointDensityModel::standard(&s, Kernel::Gaussian, Kernel::Gaussian, 0.3, 0.3).unwrap();
        assert_eq!(mc.weights(), &[1.0; 4]);
        for (x, y) in [(0.0, 0.0), (0.5, 0.5), (0.9, -0.2)] {
            assert_eq!(mc.kde_censored(x, y).unwrap(), ms.kde_joint(x, y).unwrap());
        }
        // Response-survival weighting with no censoring: total weight Σ 1/Ŝ(T_i⁻) = Σ n/(n-i+1).
        let mr = JointDensityModel::censored(&cs, Kernel::Gaussian, Kernel::Gaussian, 0.3, 0.3, CensorWeighting::ResponseSurvival)
            .unwrap();
        let total: f64 = mr.weights().iter().sum();
        assert!((total - (1.0 + 4.0 / 3.0 + 2.0 + 4.0)).abs() < 1e-12);
    }

    #[test]
    fn censored_four_point_fixture() {
        // T sorted: 0.2 (δ=1), 0.5 (δ=0), 0.9 (δ=1), 1.4 (δ=0)
        let cs = CensoredSample::new(
            vec![0.3, 0.1, 0.7, 0.5],
            vec![0.9, 0.2, 1.4, 0.5],
            vec![true, true, false, false],
        )
        .unwrap();
        let m = JointDensityModel::censored(&cs, Kernel::Gaussian, Kernel::Gaussian, 0.4, 0.5, CensorWeighting::CensoringSurvival)
            .unwrap();
        // Censoring survival left limits: G(0.2⁻) = 1, G(0.9⁻) = 1 - 1/3 = 2/3.
        for (w, e) in m.weights().iter().zip([1.5, 1.0, 0.0, 0.0]) {
            assert!((w - e).abs() < 1e-15);
        }
        let phi = |u: f64| (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let (x, y) = (0.35, 0.6);
        let expected = (1.5 * phi((0.3 - x) / 0.4) * phi((0.9 - y) / 0.5)
            + 1.0 * phi((0.1 - x) / 0.4) * phi((0.2 - y) / 0.5))
            / (4.0 * 0.4 * 0.5);
        assert!((m.kde_censored(x, y).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn deconvolution_zero_error_matches_standard() {
        let s = three_point();
        let cs = ContaminatedSample::new(s.x().to_vec(), s.y().to_vec(), ErrorDistribution::Laplace { scale: 1e-9 })
            .unwrap();
        let md = JointDensityModel::deconvolution(&cs, DeconvBase::Gaussian, Kernel::Gaussian, 0.5, 0.5).unwrap();
        let ms = JointDensityModel::standard(&s, Kernel::Gaussian, Kernel::Gaussian, 0.5, 0.5).unwrap();
        for x in linspace(-1.0, 3.0, 10) {
            for y in linspace(-1.0, 2.0, 10) {
                assert!((md.kde_deconv(x, y).unwrap() - ms.kde_joint(x, y).unwrap()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn deconvolution_single_point_closed_form() {
        let cs = ContaminatedSample::new(vec![0.0], vec![0.0], ErrorDistribution::Laplace { scale: 0.2 }).unwrap();
        let m = JointDensityModel::deconvolution(&cs, DeconvBase::Gaussian, Kernel::Gaussian, 0.5, 0.4).unwrap();
        let phi = |u: f64| (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let (x, y) = (0.3, 0.1);
        let t: f64 = (0.0 - x) / 0.5;
        let ku = phi(t) * (1.0 - (0.2f64 / 0.5).powi(2) * (t * t - 1.0));
        let expected = ku * phi(-y / 0.4) / (0.5 * 0.4);
        assert!((m.kde_deconv(x, y).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn deconvolution_mirror_symmetry() {
        let e = ErrorDistribution::Laplace { scale: 0.2 };
        let cs = ContaminatedSample::new(vec![-0.4, 0.4], vec![0.5, 0.5], e).unwrap();
        let m = JointDensityModel::deconvolution(&cs, DeconvBase::Gaussian, Kernel::Gaussian, 0.3, 0.3).unwrap();
        for x in [0.1, 0.5, 1.2] {
            let a = m.kde_deconv(x, 0.2).unwrap();
            let b = m.kde_deconv(-x, 0.2).unwrap();
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn slice_agrees_with_model() {
        let m = JointDensityModel::standard(&three_point(), Kernel::Gaussian, Kernel::Gaussian, 0.5, 0.5)
            .unwrap();
        let sl = m.slice(0.7);
        for y in [-0.5, 0.2, 1.1] {
            assert_eq!(sl.density(y), m.density(0.7, y));
            assert!((sl.dy(y) - m.kde_dy(0.7, y).unwrap()).abs() < 1e-15);
            assert!((sl.dyy(y) - m.kde_dyy(0.7, y).unwrap()).abs() < 1e-15);
        }
    }

    proptest::proptest! {
        #[test]
        fn kaplan_meier_is_monotone(
            obs in proptest::collection::vec((0.0f64..10.0, proptest::bool::ANY), 1..30)
        ) {
            let mut times: Vec<f64> = obs.iter().map(|o| o.0).collect();
            let mut events: Vec<bool> = obs.iter().map(|o| o.1).collect();
            times.push(5.0);
            events.push(true);
            let km = KaplanMeier::from_events(&times, &events).unwrap();
            let grid = linspace(-1.0, 11.0, 200);
            for w in grid.windows(2) {
                proptest::prop_assert!(km.survival(w[1]) <= km.survival(w[0]));
            }
            for &t in &times {
                // right-continuous: value at t equals the limit from the right
                proptest::prop_assert_eq!(km.survival(t), km.survival(t + 1e-12));
            }
        }
    }
}
