//! Seeded synthetic data: mixture-of-regression samples, covariate
//! measurement error and random right censoring.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::density::{CensoredSample, ContaminatedSample, Sample};
use crate::error::{ModalError, Result};
use crate::kernels::ErrorDistribution;
use crate::modes::{validate_grid, ModalCurve, Mode, ModeSet, SetFlag};
use crate::numeric::{linspace, min_max};

/// A smooth scalar function of the covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Curve {
    Constant { value: f64 },
    Linear { intercept: f64, slope: f64 },
    /// `offset + amplitude * sin(frequency * x + phase)`
    Sine { amplitude: f64, frequency: f64, phase: f64, offset: f64 },
    /// `Σ c_k x^k`
    Polynomial { coefficients: Vec<f64> },
}

impl Curve {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Curve::Constant { value } => *value,
            Curve::Linear { intercept, slope } => intercept + slope * x,
            Curve::Sine { amplitude, frequency, phase, offset } => offset + amplitude * (frequency * x + phase).sin(),
            Curve::Polynomial { coefficients } => coefficients.iter().rev().fold(0.0, |acc, c| acc * x + c),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: Curve,
    pub mean: Curve,
    pub sd: Curve,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum CovariateDistribution {
    Uniform { low: f64, high: f64 },
}

impl CovariateDistribution {
    pub fn support(&self) -> (f64, f64) {
        match *self {
            CovariateDistribution::Uniform { low, high } => (low, high),
        }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            CovariateDistribution::Uniform { low, high } => low + (high - low) * rng.gen::<f64>(),
        }
    }
}

/// `Y | X = x ~ Σ_l π_l(x) N(m_l(x), σ_l(x)^2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub components: Vec<Component>,
    pub covariate: CovariateDistribution,
}

const CHECK_POINTS: usize = 201;

impl MixtureSpec {
    /// Reproducible three-branch fixture: `X ~ U[0, 1]`, equal weights,
    /// means `x - 2`, `sin(4x)`, `x + 2`, common sd `0.25`.
    pub fn three_curves() -> Self {
        let third = Curve::Constant { value: 1.0 / 3.0 };
        let sd = Curve::Constant { value: 0.25 };
        Self {
            components: vec![
                Component { weight: third.clone(), mean: Curve::Linear { intercept: -2.0, slope: 1.0 }, sd: sd.clone() },
                Component {
                    weight: third.clone(),
                    mean: Curve::Sine { amplitude: 1.0, frequency: 4.0, phase: 0.0, offset: 0.0 },
                    sd: sd.clone(),
                },
                Component { weight: third, mean: Curve::Linear { intercept: 2.0, slope: 1.0 }, sd },
            ],
            covariate: CovariateDistribution::Uniform { low: 0.0, high: 1.0 },
        }
    }

    /// Single noisy line `y = x + N(0, sd^2)` on `U[0, 1]`.
    pub fn single_line(sd: f64) -> Self {
        Self {
            components: vec![Component {
                weight: Curve::Constant { value: 1.0 },
                mean: Curve::Linear { intercept: 0.0, slope: 1.0 },
                sd: Curve::Constant { value: sd },
            }],
            covariate: CovariateDistribution::Uniform { low: 0.0, high: 1.0 },
        }
    }

    /// Line `1 + 2x` (sd 0.2) with a fraction of gross outliers shifted by +10.
    pub fn line_with_outliers(outlier_fraction: f64) -> Self {
        let sd = Curve::Constant { value: 0.2 };
        Self {
            components: vec![
                Component {
                    weight: Curve::Constant { value: 1.0 - outlier_fraction },
                    mean: Curve::Linear { intercept: 1.0, slope: 2.0 },
                    sd: sd.clone(),
                },
                Component {
                    weight: Curve::Constant { value: outlier_fraction },
                    mean: Curve::Linear { intercept: 11.0, slope: 2.0 },
                    sd,
                },
            ],
            covariate: CovariateDistribution::Uniform { low: 0.0, high: 1.0 },
        }
    }

    /// Sinusoidal single branch, steep enough that covariate noise blurs it.
    pub fn sine_wave() -> Self {
        Self {
            components: vec![Component {
                weight: Curve::Constant { value: 1.0 },
                mean: Curve::Sine { amplitude: 1.0, frequency: 2.0 * std::f64::consts::PI, phase: 0.0, offset: 0.0 },
                sd: Curve::Constant { value: 0.2 },
            }],
            covariate: CovariateDistribution::Uniform { low: 0.0, high: 1.0 },
        }
    }

    /// Named fixture lookup.
    pub fn named(name: &str) -> Result<Self> {
        match name {
            "three-curves" => Ok(Self::three_curves()),
            "single-line" => Ok(Self::single_line(0.1)),
            "outliers" => Ok(Self::line_with_outliers(0.2)),
            "sine" => Ok(Self::sine_wave()),
            other => Err(ModalError::invalid(format!(
                "unknown fixture '{other}' (expected three-curves, single-line, outliers, sine)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(ModalError::invalid("mixture has no components"));
        }
        let (lo, hi) = self.covariate.support();
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(ModalError::invalid("covariate support must be a finite interval"));
        }
        for x in linspace(lo, hi, CHECK_POINTS) {
            let mut total = 0.0;
            for (l, c) in self.components.iter().enumerate() {
                let w = c.weight.eval(x);
                if !(w >= 0.0) {
                    return Err(ModalError::invalid(format!("weight of component {l} is {w} at x = {x}")));
                }
                let sd = c.sd.eval(x);
                if !(sd > 0.0 && sd.is_finite()) {
                    return Err(ModalError::invalid(format!("sd of component {l} is {sd} at x = {x}")));
                }
                if !c.mean.eval(x).is_finite() {
                    return Err(ModalError::invalid(format!("mean of component {l} is not finite at x = {x}")));
                }
                total += w;
            }
            if (total - 1.0).abs() > 1e-9 {
                return Err(ModalError::invalid(format!("weights sum to {total} at x = {x}")));
            }
        }
        Ok(())
    }

    /// Conditional density `p(y | x)` and its first two `y`-derivatives.
    pub fn conditional_with_derivatives(&self, x: f64, y: f64) -> (f64, f64, f64) {
        let mut p = 0.0;
        let mut d1 = 0.0;
        let mut d2 = 0.0;
        for c in &self.components {
            let (w, m, s) = (c.weight.eval(x), c.mean.eval(x), c.sd.eval(x));
            let z = (y - m) / s;
            let phi = w * (-0.5 * z * z).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
            p += phi;
            d1 += -z / s * phi;
            d2 += (z * z - 1.0) / (s * s) * phi;
        }
        (p, d1, d2)
    }

    pub fn conditional_density(&self, x: f64, y: f64) -> f64 {
        self.conditional_with_derivatives(x, y).0
    }

    fn response_envelope(&self, x: f64) -> (f64, f64, f64) {
        let means: Vec<f64> = self.components.iter().map(|c| c.mean.eval(x)).collect();
        let sds: Vec<f64> = self.components.iter().map(|c| c.sd.eval(x)).collect();
        let (mlo, mhi) = min_max(&means);
        let (slo, shi) = min_max(&sds);
        (mlo - 6.0 * shi, mhi + 6.0 * shi, slo)
    }
}

/// Draw `n` observations, also returning the component of each.
pub fn generate_labeled(spec: &MixtureSpec, n: usize, seed: u64) -> Result<(Sample, Vec<usize>)> {
    spec.validate()?;
    if n == 0 {
        return Err(ModalError::invalid("sample size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let x = spec.covariate.draw(&mut rng);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut pick = spec.components.len() - 1;
        for (l, c) in spec.components.iter().enumerate() {
            acc += c.weight.eval(x);
            if u < acc {
                pick = l;
                break;
            }
        }
        let c = &spec.components[pick];
        let z: f64 = rng.sample(StandardNormal);
        xs.push(x);
        ys.push(c.mean.eval(x) + c.sd.eval(x) * z);
        labels.push(pick);
    }
    Ok((Sample::new(xs, ys)?, labels))
}

pub fn generate(spec: &MixtureSpec, n: usize, seed: u64) -> Result<Sample> {
    generate_labeled(spec, n, seed).map(|(s, _)| s)
}

/// Add i.i.d. error to the covariates: `W_i = X_i + U_i`.
pub fn contaminate(sample: &Sample, error: ErrorDistribution, seed: u64) -> Result<ContaminatedSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = sample.x().iter().map(|&x| x + error.draw(&mut rng)).collect();
    ContaminatedSample::new(w, sample.y().to_vec(), error)
}

/// Distribution of censoring times `C`, drawn independently of `(X, Y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum CensoringDistribution {
    /// `C = +∞`: nothing censored.
    Never,
    /// `C = -∞`: everything censored.
    Always,
    Constant { value: f64 },
    Uniform { low: f64, high: f64 },
    Normal { mean: f64, sd: f64 },
}

impl CensoringDistribution {
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            CensoringDistribution::Never => f64::INFINITY,
            CensoringDistribution::Always => f64::NEG_INFINITY,
            CensoringDistribution::Constant { value } => value,
            CensoringDistribution::Uniform { low, high } => low + (high - low) * rng.gen::<f64>(),
            CensoringDistribution::Normal { mean, sd } => mean + sd * rng.sample::<f64, _>(StandardNormal),
        }
    }
}

/// Right-censor responses: `T_i = min(Y_i, C_i)`, `δ_i = I(T_i = Y_i)`.
///
/// With `Always` every observation is censored; `T_i` then keeps `Y_i` so
/// the result stays finite.
pub fn censor(sample: &Sample, dist: CensoringDistribution, seed: u64) -> Result<CensoredSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Vec::with_capacity(sample.len());
    let mut delta = Vec::with_capacity(sample.len());
    for &y in sample.y() {
        let c = dist.draw(&mut rng);
        if y <= c {
            t.push(y);
            delta.push(true);
        } else {
            t.push(if c.is_finite() { c } else { y });
            delta.push(false);
        }
    }
    CensoredSample::new(sample.x().to_vec(), t, delta)
}

/// Local modes of the true conditional density on `grid`, found by a dense
/// scan in `y` refined with Newton's method.
pub fn true_modes(spec: &MixtureSpec, grid: &[f64]) -> Result<ModalCurve> {
    spec.validate()?;
    validate_grid(grid)?;
    let sets = grid
        .iter()
        .map(|&x| {
            let (lo, hi, smin) = spec.response_envelope(x);
            let step = smin / 50.0;
            let count = ((hi - lo) / step).ceil() as usize + 1;
            let ys = linspace(lo, hi, count);
            let ps: Vec<f64> = ys.iter().map(|&y| spec.conditional_density(x, y)).collect();
            let mut modes = Vec::new();
            for k in 1..count - 1 {
                if ps[k] > ps[k - 1] && ps[k] >= ps[k + 1] {
                    let (a, b) = (ys[k - 1], ys[k + 1]);
                    let mut y = ys[k];
                    for _ in 0..100 {
                        let (_, d1, d2) = spec.conditional_with_derivatives(x, y);
                        if d2 >= 0.0 {
                            break;
                        }
                        let next = (y - d1 / d2).clamp(a, b);
                        let done = (next - y).abs() < 1e-15 * (1.0 + y.abs());
                        y = next;
                        if done {
                            break;
                        }
                    }
                    let (p, d1, d2) = spec.conditional_with_derivatives(x, y);
                    if d2 < 0.0 {
                        modes.push(Mode { y, density: p, curvature: d2, gradient: smin * d1.abs() / p });
                    }
                }
            }
            let flag = modes.is_empty().then_some(SetFlag::NoMode);
            ModeSet { x, modes, flag }
        })
        .collect();
    ModalCurve::new(grid.to_vec(), sets)
}
