//! Proximal operators of the regularizers used by the solvers.
//!
//! Real-vector convention: `prox_{λg}(x) = argmin_z g(z) + ‖x − z‖² / (2λ)`.

use thiserror::Error;

use crate::numkit::DenseVector;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProxError {
    #[error("prox scale must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("l1 strength must be non-negative and finite, got {0}")]
    NegativeStrength(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Regularizer {
    #[default]
    Zero,
    /// `υ‖z‖₁`
    L1(f64),
}

impl Regularizer {
    pub fn l1(strength: f64) -> Result<Self, ProxError> {
        if !(strength >= 0.0) || !strength.is_finite() {
            return Err(ProxError::NegativeStrength(strength));
        }
        Ok(Self::L1(strength))
    }

    pub fn value(&self, z: &[f64]) -> f64 {
        match *self {
            Self::Zero => 0.0,
            Self::L1(u) => u * z.iter().map(|v| v.abs()).sum::<f64>(),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(*self, Self::Zero) || matches!(*self, Self::L1(u) if u == 0.0)
    }
}

/// Soft-threshold a scalar. Points with `|x| <= threshold` map to 0.
#[inline]
pub fn soft_threshold(x: f64, threshold: f64) -> f64 {
    if x > threshold {
        x - threshold
    } else if x < -threshold {
        x + threshold
    } else {
        0.0
    }
}

pub fn prox(reg: Regularizer, scale: f64, point: &DenseVector) -> Result<DenseVector, ProxError> {
    let mut out = point.clone();
    prox_in_place(reg, scale, &mut out)?;
    Ok(out)
}

pub fn prox_in_place(reg: Regularizer, scale: f64, point: &mut [f64]) -> Result<(), ProxError> {
    if !(scale > 0.0) {
        return Err(ProxError::NonPositiveScale(scale));
    }
    match reg {
        Regularizer::Zero => {}
        Regularizer::L1(u) => {
            if u < 0.0 {
                return Err(ProxError::NegativeStrength(u));
            }
            let theta = scale * u;
            for v in point.iter_mut() {
                *v = soft_threshold(*v, theta);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> DenseVector {
        DenseVector::from_vec(x.to_vec())
    }

    #[test]
    fn zero_is_identity() {
        assert_eq!(
            prox(Regularizer::Zero, 0.3, &v(&[7.0, -2.0])).unwrap(),
            v(&[7.0, -2.0])
        );
    }

    #[test]
    fn l1_soft_threshold() {
        let p = prox(Regularizer::l1(1.0).unwrap(), 1.0, &v(&[3.0, -0.5, 1.0])).unwrap();
        assert_eq!(p, v(&[2.0, 0.0, 0.0]));
    }

    #[test]
    fn l1_matches_grid_search() {
        // argmin over z in [-10, 10] of 0.7|z| + ½(2.3 − z)² on a 1e-4 grid.
        let mut best = (f64::INFINITY, 0.0);
        for k in 0..=200_000 {
            let z = -10.0 + k as f64 * 1e-4;
            let obj = 0.7 * z.abs() + 0.5 * (2.3 - z) * (2.3 - z);
            if obj < best.0 {
                best = (obj, z);
            }
        }
        let p = prox(Regularizer::l1(0.7).unwrap(), 1.0, &v(&[2.3])).unwrap();
        assert!((p[0] - best.1).abs() < 5e-4);
        assert!((p[0] - 1.6).abs() < 1e-12);
    }

    #[test]
    fn tie_at_threshold_maps_to_zero() {
        let p = prox(Regularizer::l1(2.0).unwrap(), 0.5, &v(&[1.0, -1.0])).unwrap();
        assert_eq!(p, v(&[0.0, 0.0]));
    }

    #[test]
    fn bad_arguments() {
        assert_eq!(
            prox(Regularizer::Zero, 0.0, &v(&[1.0])),
            Err(ProxError::NonPositiveScale(0.0))
        );
        assert!(prox(Regularizer::l1(1.0).unwrap(), -1.0, &v(&[1.0])).is_err());
        assert!(Regularizer::l1(-0.1).is_err());
        assert!(Regularizer::l1(f64::NAN).is_err());
    }

    proptest! {
        #[test]
        fn nonexpansive(
            x in prop::collection::vec(-50.0f64..50.0, 1..8),
            shift in prop::collection::vec(-50.0f64..50.0, 8),
            u in 0.0f64..5.0,
            lam in 0.01f64..5.0,
        ) {
            let y: Vec<f64> = x.iter().zip(&shift).map(|(a, b)| a + b).collect();
            let (x, y) = (v(&x), v(&y));
            for reg in [Regularizer::Zero, Regularizer::L1(u)] {
                let px = prox(reg, lam, &x).unwrap();
                let py = prox(reg, lam, &y).unwrap();
                prop_assert!(px.dist(&py) <= x.dist(&y) + 1e-12);
            }
        }

        #[test]
        fn l1_optimality_conditions(
            x in prop::collection::vec(-20.0f64..20.0, 1..10),
            u in 0.0f64..5.0,
            lam in 0.01f64..5.0,
        ) {
            // 0 ∈ u·∂|p| + (p − x)/λ, coordinate-wise.
            let p = prox(Regularizer::L1(u), lam, &v(&x)).unwrap();
            for (pj, xj) in p.iter().zip(&x) {
                let r = (xj - pj) / lam;
                if *pj > 0.0 {
                    prop_assert!((r - u).abs() < 1e-9);
                } else if *pj < 0.0 {
                    prop_assert!((r + u).abs() < 1e-9);
                } else {
                    prop_assert!(r.abs() <= u + 1e-9);
                }
            }
        }

        #[test]
        fn zero_strength_collapses_to_identity(
            x in prop::collection::vec(-1e3f64..1e3, 0..10),
            lam in 0.01f64..10.0,
        ) {
            let x = v(&x);
            prop_assert_eq!(prox(Regularizer::L1(0.0), lam, &x).unwrap(), x);
        }
    }
}
