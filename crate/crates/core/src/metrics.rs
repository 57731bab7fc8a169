//! Hausdorff-based error measures for multi-valued curves.

use serde::{Deserialize, Serialize};

use crate::error::{ModalError, Result};
use crate::modes::ModalCurve;
use crate::numeric::trapezoid_weights;

/// `max(sup_a d(a, B), sup_b d(b, A))` for finite sets of reals.
pub fn hausdorff(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(ModalError::EmptySet("hausdorff distance needs non-empty sets".into()));
    }
    Ok(directed(a, b).max(directed(b, a)))
}

fn directed(from: &[f64], to: &[f64]) -> f64 {
    from.iter()
        .map(|&p| to.iter().map(|&q| (p - q).abs()).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max)
}

/// Pointwise, integrated and uniform error of an estimated modal curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub grid: Vec<f64>,
    /// `Δ(x) = Hausdorff(M̂(x), M(x))` per grid point.
    pub pointwise: Vec<f64>,
    /// Grid points where exactly one side had no modes and `Δ(x)` was set
    /// to the penalty.
    pub penalized: Vec<usize>,
    /// `Σ w_k Δ²(x_k)` with quadrature weights `w_k`.
    pub mise: f64,
    /// `max_k Δ(x_k)`.
    pub uniform: f64,
}

/// Compare `est` against `truth` on their shared grid.
///
/// `weights` defaults to trapezoid weights on the grid. A grid point where
/// one of the two mode sets is empty gets `Δ = empty_penalty` (typically the
/// response range); both empty counts as agreement.
pub fn error_report(
    est: &ModalCurve,
    truth: &ModalCurve,
    weights: Option<&[f64]>,
    empty_penalty: f64,
) -> Result<ErrorReport> {
    if est.grid.len() != truth.grid.len() {
        return Err(ModalError::GridMismatch(format!(
            "estimate has {} grid points, truth has {}",
            est.grid.len(),
            truth.grid.len()
        )));
    }
    for (k, (a, b)) in est.grid.iter().zip(&truth.grid).enumerate() {
        if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
            return Err(ModalError::GridMismatch(format!("grid point {k}: {a} vs {b}")));
        }
    }
    if !(empty_penalty.is_finite() && empty_penalty >= 0.0) {
        return Err(ModalError::invalid("empty-set penalty must be finite and >= 0"));
    }
    let weights = match weights {
        Some(w) if w.len() == est.grid.len() => w.to_vec(),
        Some(w) => {
            return Err(ModalError::GridMismatch(format!(
                "{} quadrature weights for {} grid points",
                w.len(),
                est.grid.len()
            )))
        }
        None => trapezoid_weights(&est.grid),
    };
    let mut pointwise = Vec::with_capacity(est.grid.len());
    let mut penalized = Vec::new();
    for (k, (e, t)) in est.sets.iter().zip(&truth.sets).enumerate() {
        let d = match (e.is_empty(), t.is_empty()) {
            (true, true) => 0.0,
            (false, false) => hausdorff(&e.values(), &t.values())?,
            _ => {
                penalized.push(k);
                empty_penalty
            }
        };
        pointwise.push(d);
    }
    let mise = pointwise.iter().zip(&weights).map(|(d, w)| w * d * d).sum();
    let uniform = pointwise.iter().copied().fold(0.0, f64::max);
    Ok(ErrorReport { grid: est.grid.clone(), pointwise, penalized, mise, uniform })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::linspace;
    use proptest::prelude::*;

    /// Brute force over every projection distance.
    fn hausdorff_oracle(a: &[f64], b: &[f64]) -> f64 {
        let mut best = 0.0f64;
        for &p in a {
            let mut m = f64::INFINITY;
            for &q in b {
                m = m.min((p - q).abs());
            }
            best = best.max(m);
        }
        for &q in b {
            let mut m = f64::INFINITY;
            for &p in a {
                m = m.min((p - q).abs());
            }
            best = best.max(m);
        }
        best
    }

    #[test]
    fn hausdorff_examples() {
        assert_eq!(hausdorff(&[1.0, 2.0], &[2.0, 1.0]).unwrap(), 0.0);
        assert_eq!(hausdorff(&[0.0], &[1.0]).unwrap(), 1.0);
        assert!((hausdorff(&[0.0, 1.0], &[0.4]).unwrap() - 0.6).abs() < 1e-15);
        assert!((hausdorff_oracle(&[0.0, 1.0], &[0.4]) - 0.6).abs() < 1e-15);
        assert!(hausdorff(&[], &[1.0]).is_err());
    }

    #[test]
    fn report_identity_and_offset() {
        let grid = linspace(0.0, 2.0, 21);
        let truth = ModalCurve::from_values(grid.clone(), vec![vec![0.0]; 21]).unwrap();
        let same = error_report(&truth, &truth, None, 1.0).unwrap();
        assert!(same.pointwise.iter().all(|&d| d == 0.0));
        assert_eq!(same.mise, 0.0);
        let c = 0.3;
        let est = ModalCurve::from_values(grid.clone(), vec![vec![c]; 21]).unwrap();
        let r = error_report(&est, &truth, None, 1.0).unwrap();
        assert!((r.mise - c * c * 2.0).abs() < 1e-14);
        assert!((r.uniform - c).abs() < 1e-15);
    }

    #[test]
    fn empty_sets_are_penalized() {
        let grid = vec![0.0, 1.0, 2.0];
        let truth = ModalCurve::from_values(grid.clone(), vec![vec![0.0], vec![0.0], vec![]]).unwrap();
        let est = ModalCurve::from_values(grid.clone(), vec![vec![0.1], vec![], vec![]]).unwrap();
        let r = error_report(&est, &truth, None, 5.0).unwrap();
        assert_eq!(r.penalized, vec![1]);
        assert_eq!(r.pointwise[1], 5.0);
        assert_eq!(r.pointwise[2], 0.0);
        assert_eq!(r.uniform, 5.0);
    }

    #[test]
    fn grid_mismatch_is_an_error() {
        let a = ModalCurve::from_values(vec![0.0, 1.0], vec![vec![0.0], vec![0.0]]).unwrap();
        let b = ModalCurve::from_values(vec![0.0, 1.5], vec![vec![0.0], vec![0.0]]).unwrap();
        let c = ModalCurve::from_values(vec![0.0], vec![vec![0.0]]).unwrap();
        assert!(matches!(error_report(&a, &b, None, 1.0), Err(ModalError::GridMismatch(_))));
        assert!(matches!(error_report(&a, &c, None, 1.0), Err(ModalError::GridMismatch(_))));
    }

    fn small_set() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-10.0f64..10.0, 1..8)
    }

    proptest! {
        #[test]
        fn matches_brute_force(a in small_set(), b in small_set()) {
            prop_assert_eq!(hausdorff(&a, &b).unwrap(), hausdorff_oracle(&a, &b));
        }

        #[test]
        fn augmentation_is_bounded(a in small_set(), extra in -10.0f64..10.0) {
            let mut ab = a.clone();
            ab.push(extra);
            let d_to_a = a.iter().map(|&p| (p - extra).abs()).fold(f64::INFINITY, f64::min);
            prop_assert!(hausdorff(&a, &ab).unwrap() <= d_to_a);
        }
    }
}
