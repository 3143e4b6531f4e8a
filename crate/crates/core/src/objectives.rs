//! Regularized logistic regression on one data shard.
//!
//! Features are stored as an `n × d` matrix whose columns are examples.
//! The loss is the per-example mean
//! `(1/d) Σ_j [log(1 + exp(a_jᵀw)) − t_j·a_jᵀw] + (κ/2)‖w‖²`.

use thiserror::Error;

use crate::numkit::{max_eigenvalue_gram, DenseMatrix, DenseVector, NumError};

/// Default ridge weight `κ`.
pub const DEFAULT_KAPPA: f64 = 0.001;

const EIG_TOL: f64 = 1e-10;
const EIG_MAX_ITER: usize = 50_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("weight dimension {got} does not match feature dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("label vector has {labels} entries but the feature matrix has {examples} columns")]
    LabelCount { labels: usize, examples: usize },
    #[error("label {value} at position {index} is not 0 or 1")]
    InvalidLabel { index: usize, value: f64 },
    #[error("kappa must be non-negative and finite, got {0}")]
    BadKappa(f64),
    #[error("shard has no examples")]
    EmptyShard,
    #[error(transparent)]
    Numeric(#[from] NumError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticShard {
    features: DenseMatrix,
    labels: DenseVector,
    kappa: f64,
}

#[inline]
pub fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(u))` without overflow.
#[inline]
pub fn softplus(u: f64) -> f64 {
    if u > 0.0 {
        u + (-u).exp().ln_1p()
    } else {
        u.exp().ln_1p()
    }
}

impl LogisticShard {
    pub fn new(
        features: DenseMatrix,
        labels: DenseVector,
        kappa: f64,
    ) -> Result<Self, ObjectiveError> {
        if labels.len() != features.cols() {
            return Err(ObjectiveError::LabelCount {
                labels: labels.len(),
                examples: features.cols(),
            });
        }
        if let Some((index, &value)) = labels
            .iter()
            .enumerate()
            .find(|(_, v)| **v != 0.0 && **v != 1.0)
        {
            return Err(ObjectiveError::InvalidLabel { index, value });
        }
        if !(kappa >= 0.0) || !kappa.is_finite() {
            return Err(ObjectiveError::BadKappa(kappa));
        }
        Ok(Self {
            features,
            labels,
            kappa,
        })
    }

    pub fn features(&self) -> &DenseMatrix {
        &self.features
    }

    pub fn labels(&self) -> &DenseVector {
        &self.labels
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// Feature dimension `n`.
    pub fn dim(&self) -> usize {
        self.features.rows()
    }

    /// Number of examples `d_m`.
    pub fn len(&self) -> usize {
        self.features.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check_dim(&self, w: &[f64]) -> Result<(), ObjectiveError> {
        if w.len() != self.dim() {
            return Err(ObjectiveError::DimensionMismatch {
                expected: self.dim(),
                got: w.len(),
            });
        }
        Ok(())
    }

    /// Margins `Aᵀw`, one per example.
    pub fn scores(&self, w: &[f64]) -> Result<DenseVector, ObjectiveError> {
        self.check_dim(w)?;
        Ok(self.features.matvec_t(w))
    }

    pub fn loss(&self, w: &DenseVector) -> Result<f64, ObjectiveError> {
        let s = self.scores(w)?;
        Ok(self.loss_from_scores(&s, w))
    }

    fn loss_from_scores(&self, s: &[f64], w: &[f64]) -> f64 {
        let ridge = 0.5 * self.kappa * crate::numkit::dot(w, w);
        if s.is_empty() {
            return ridge;
        }
        let mut acc = 0.0;
        for (sj, tj) in s.iter().zip(self.labels.iter()) {
            acc += softplus(*sj) - tj * sj;
        }
        acc / s.len() as f64 + ridge
    }

    pub fn gradient(&self, w: &DenseVector) -> Result<DenseVector, ObjectiveError> {
        let s = self.scores(w)?;
        Ok(self.gradient_from_scores(s, w))
    }

    fn gradient_from_scores(&self, mut s: DenseVector, w: &[f64]) -> DenseVector {
        let mut g = if s.is_empty() {
            DenseVector::zeros(self.dim())
        } else {
            let inv_d = 1.0 / s.len() as f64;
            for (sj, tj) in s.iter_mut().zip(self.labels.iter()) {
                *sj = (sigmoid(*sj) - tj) * inv_d;
            }
            self.features.matvec(&s)
        };
        g.axpy(self.kappa, w);
        g
    }

    /// Loss and gradient from a single pass over the scores.
    pub fn loss_and_gradient(&self, w: &DenseVector) -> Result<(f64, DenseVector), ObjectiveError> {
        let s = self.scores(w)?;
        let loss = self.loss_from_scores(&s, w);
        Ok((loss, self.gradient_from_scores(s, w)))
    }

    /// `eig_max(AᵀA) / (4 + κ)`; zero for a shard without entries.
    pub fn smoothness_surrogate(&self) -> Result<f64, ObjectiveError> {
        if self.features.is_empty() {
            return Ok(0.0);
        }
        Ok(max_eigenvalue_gram(&self.features, EIG_TOL, EIG_MAX_ITER)? / (4.0 + self.kappa))
    }

    /// Fraction of examples whose thresholded prediction matches the label.
    /// A score of exactly zero (σ = ½) predicts class 1.
    pub fn accuracy(&self, w: &DenseVector) -> Result<f64, ObjectiveError> {
        if self.is_empty() {
            return Err(ObjectiveError::EmptyShard);
        }
        let s = self.scores(w)?;
        let hits = s
            .iter()
            .zip(self.labels.iter())
            .filter(|(sj, tj)| predict(**sj) == **tj)
            .count();
        Ok(hits as f64 / s.len() as f64)
    }
}

#[inline]
fn predict(score: f64) -> f64 {
    if sigmoid(score) >= 0.5 {
        1.0
    } else {
        0.0
    }
}

/// `υ‖w‖₁`
pub fn l1_term(w: &[f64], upsilon: f64) -> f64 {
    upsilon * w.iter().map(|v| v.abs()).sum::<f64>()
}
