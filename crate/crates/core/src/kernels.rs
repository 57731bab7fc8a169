//! Smoothing kernels, their derivatives, and deconvolution kernels for
//! covariates observed with additive error of known distribution.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ModalError, Result};
use crate::numeric::adaptive_simpson;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Symmetric univariate kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    Gaussian,
    /// `0.5 * I(|u| <= 1)`.
    Box,
    /// `0.75 * (1 - u^2)` on `[-1, 1]`.
    Epanechnikov,
}

impl Kernel {
    pub fn name(self) -> &'static str {
        match self {
            Kernel::Gaussian => "gaussian",
            Kernel::Box => "box",
            Kernel::Epanechnikov => "epanechnikov",
        }
    }

    /// Interval outside of which the kernel is zero (or negligible, for the
    /// Gaussian) for quadrature purposes.
    pub fn effective_support(self) -> (f64, f64) {
        match self {
            Kernel::Gaussian => (-8.0, 8.0),
            Kernel::Box | Kernel::Epanechnikov => (-1.0, 1.0),
        }
    }

    #[inline]
    pub fn eval(self, u: f64) -> f64 {
        match self {
            Kernel::Gaussian => INV_SQRT_2PI * (-0.5 * u * u).exp(),
            Kernel::Box => {
                if u.abs() <= 1.0 {
                    0.5
                } else {
                    0.0
                }
            }
            Kernel::Epanechnikov => {
                if u.abs() <= 1.0 {
                    0.75 * (1.0 - u * u)
                } else {
                    0.0
                }
            }
        }
    }

    /// Whether `deriv1`/`deriv2` are defined almost everywhere with a
    /// non-trivial value, i.e. usable for gradient-based mode finding.
    pub fn is_differentiable(self) -> bool {
        !matches!(self, Kernel::Box)
    }

    fn check_differentiable(self, u: f64) -> Result<()> {
        match self {
            Kernel::Gaussian => Ok(()),
            Kernel::Box | Kernel::Epanechnikov if u.abs() == 1.0 => {
                Err(ModalError::NotDifferentiable { kernel: self.name(), u })
            }
            _ => Ok(()),
        }
    }

    /// First derivative. Errors at the kinks `|u| = 1` of the compact kernels.
    pub fn deriv1(self, u: f64) -> Result<f64> {
        self.check_differentiable(u)?;
        Ok(self.deriv1_unchecked(u))
    }

    /// Second derivative. Errors at the kinks `|u| = 1` of the compact kernels.
    pub fn deriv2(self, u: f64) -> Result<f64> {
        self.check_differentiable(u)?;
        Ok(self.deriv2_unchecked(u))
    }

    /// First derivative taking the interior branch at the kinks; used inside
    /// sums where exact ties with the kink have measure zero.
    #[inline]
    pub(crate) fn deriv1_unchecked(self, u: f64) -> f64 {
        match self {
            Kernel::Gaussian => -u * self.eval(u),
            Kernel::Box => 0.0,
            Kernel::Epanechnikov => {
                if u.abs() < 1.0 {
                    -1.5 * u
                } else {
                    0.0
                }
            }
        }
    }

    #[inline]
    pub(crate) fn deriv2_unchecked(self, u: f64) -> f64 {
        match self {
            Kernel::Gaussian => (u * u - 1.0) * self.eval(u),
            Kernel::Box => 0.0,
            Kernel::Epanechnikov => {
                if u.abs() < 1.0 {
                    -1.5
                } else {
                    0.0
                }
            }
        }
    }

    /// Characteristic function (Fourier transform) `∫ e^{isu} K(u) du`.
    pub fn characteristic(self, s: f64) -> f64 {
        match self {
            Kernel::Gaussian => (-0.5 * s * s).exp(),
            Kernel::Box => {
                if s.abs() < 1e-4 {
                    1.0 - s * s / 6.0
                } else {
                    s.sin() / s
                }
            }
            Kernel::Epanechnikov => {
                if s.abs() < 1e-2 {
                    1.0 - s * s / 10.0 + s.powi(4) / 280.0
                } else {
                    3.0 * (s.sin() - s * s.cos()) / s.powi(3)
                }
            }
        }
    }
}

impl std::str::FromStr for Kernel {
    type Err = ModalError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" => Ok(Kernel::Gaussian),
            "box" => Ok(Kernel::Box),
            "epanechnikov" => Ok(Kernel::Epanechnikov),
            other => Err(ModalError::invalid(format!("unknown kernel '{other}'"))),
        }
    }
}

/// Known distribution of additive covariate measurement error `U`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum ErrorDistribution {
    /// Density `exp(-|u|/scale) / (2 scale)`, variance `2 scale^2`.
    Laplace { scale: f64 },
    /// Normal with standard deviation `scale`.
    Gaussian { scale: f64 },
}

impl ErrorDistribution {
    pub fn laplace(scale: f64) -> Result<Self> {
        Self::validated(ErrorDistribution::Laplace { scale })
    }

    pub fn gaussian(scale: f64) -> Result<Self> {
        Self::validated(ErrorDistribution::Gaussian { scale })
    }

    fn validated(self) -> Result<Self> {
        let s = self.scale();
        if !(s.is_finite() && s >= 0.0) {
            return Err(ModalError::invalid(format!("error scale {s} must be finite and >= 0")));
        }
        Ok(self)
    }

    pub fn scale(&self) -> f64 {
        match *self {
            ErrorDistribution::Laplace { scale } | ErrorDistribution::Gaussian { scale } => scale,
        }
    }

    pub fn family_name(&self) -> &'static str {
        match self {
            ErrorDistribution::Laplace { .. } => "laplace",
            ErrorDistribution::Gaussian { .. } => "gaussian",
        }
    }

    /// Characteristic function `φ_U(s)`.
    pub fn characteristic(&self, s: f64) -> f64 {
        match *self {
            ErrorDistribution::Laplace { scale } => 1.0 / (1.0 + scale * scale * s * s),
            ErrorDistribution::Gaussian { scale } => (-0.5 * scale * scale * s * s).exp(),
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            ErrorDistribution::Laplace { scale } => 2.0 * scale * scale,
            ErrorDistribution::Gaussian { scale } => scale * scale,
        }
    }

    /// Draw one error realization.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            ErrorDistribution::Laplace { scale } => {
                // Inverse CDF on u in (-1/2, 1/2).
                let u: f64 = rng.gen::<f64>() - 0.5;
                -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
            }
            ErrorDistribution::Gaussian { scale } => {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                scale * z
            }
        }
    }
}

/// Base kernel of a deconvolution kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeconvBase {
    Gaussian,
    /// Kernel whose Fourier transform is `(1 - s^2)^3` on `[-1, 1]` and zero
    /// elsewhere.
    CompactFourier,
}

impl DeconvBase {
    pub fn characteristic(self, s: f64) -> f64 {
        match self {
            DeconvBase::Gaussian => Kernel::Gaussian.characteristic(s),
            DeconvBase::CompactFourier => {
                if s.abs() <= 1.0 {
                    (1.0 - s * s).powi(3)
                } else {
                    0.0
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DeconvBase::Gaussian => "gaussian",
            DeconvBase::CompactFourier => "compact-fourier",
        }
    }
}

/// Deconvolution kernel
/// `K_U(t) = (1/2π) ∫ e^{-its} φ_K(s) / φ_U(s / h) ds`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeconvKernel {
    base: DeconvBase,
    error: ErrorDistribution,
    bandwidth: f64,
}

impl DeconvKernel {
    /// Gaussian error over a Gaussian base diverges and is rejected unless
    /// the error scale is zero.
    pub fn new(base: DeconvBase, error: ErrorDistribution, bandwidth: f64) -> Result<Self> {
        if !(bandwidth.is_finite() && bandwidth > 0.0) {
            return Err(ModalError::invalid(format!("bandwidth {bandwidth} must be positive")));
        }
        let error = ErrorDistribution::validated(error)?;
        if base == DeconvBase::Gaussian
            && matches!(error, ErrorDistribution::Gaussian { .. })
            && error.scale() > 0.0
        {
            return Err(ModalError::Unsupported(
                "gaussian measurement error requires a compact-fourier base kernel".into(),
            ));
        }
        Ok(Self { base, error, bandwidth })
    }

    pub fn base(&self) -> DeconvBase {
        self.base
    }

    pub fn error(&self) -> ErrorDistribution {
        self.error
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// Fourier-domain integrand ratio `φ_K(s) / φ_U(s / h)`.
    pub fn fourier_ratio(&self, s: f64) -> f64 {
        self.base.characteristic(s) / self.error.characteristic(s / self.bandwidth)
    }

    pub fn eval(&self, t: f64) -> f64 {
        let sigma = self.error.scale();
        match (self.base, self.error) {
            (DeconvBase::Gaussian, _) if sigma == 0.0 => Kernel::Gaussian.eval(t),
            (DeconvBase::Gaussian, ErrorDistribution::Laplace { .. }) => {
                let r = sigma / self.bandwidth;
                Kernel::Gaussian.eval(t) * (1.0 - r * r * (t * t - 1.0))
            }
            (DeconvBase::Gaussian, ErrorDistribution::Gaussian { .. }) => {
                unreachable!("rejected by DeconvKernel::new")
            }
            (DeconvBase::CompactFourier, _) => {
                // Real, even integrand: (1/π) ∫_0^1 cos(ts) φ_K(s) / φ_U(s/h) ds.
                let f = |s: f64| (t * s).cos() * self.fourier_ratio(s);
                adaptive_simpson(&f, 0.0, 1.0, 1e-11) / PI
            }
        }
    }
}

/// Covariate-direction kernel: a plain kernel or a deconvolution kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum CovariateKernel {
    Plain { kernel: Kernel },
    Deconvolution { kernel: DeconvKernel },
}

impl CovariateKernel {
    #[inline]
    pub fn eval(&self, u: f64) -> f64 {
        match self {
            CovariateKernel::Plain { kernel } => kernel.eval(u),
            CovariateKernel::Deconvolution { kernel } => kernel.eval(u),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CovariateKernel::Plain { kernel } => kernel.name(),
            CovariateKernel::Deconvolution { kernel } => kernel.base().name(),
        }
    }
}

impl From<Kernel> for CovariateKernel {
    fn from(kernel: Kernel) -> Self {
        CovariateKernel::Plain { kernel }
    }
}

impl From<DeconvKernel> for CovariateKernel {
    fn from(kernel: DeconvKernel) -> Self {
        CovariateKernel::Deconvolution { kernel }
    }
}
