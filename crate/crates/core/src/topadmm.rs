//! Consensus ADMM with an extra smooth operator.
//!
//! Solves `min Σ_m f_m(x_m) + g(z) + βh(z)` subject to `x_m = z`. The
//! iterate is written in the unscaled real convention (penalty `ρ‖·‖²`):
//!
//! ```text
//! x_m ← argmin f_m(x) + ρ‖x − z + y_m/ρ‖²
//! z   ← prox_{g/(2ρM)}( mean_m(x_m + y_m/ρ) − τ∇h(z) )
//! y_m ← y_m + ρ(x_m − z)
//! ```
//!
//! Block solvers work in the half convention `f(x) + (ρ_c/2)‖x − c‖²`, so the
//! x-update calls them with `ρ_c = 2ρ`. A fixed point satisfies
//! `0 ∈ Σ∇f_m(z) + ∂g(z) + 2Mρτ∇h(z)` and `y_m = −∇f_m(z)/2`.

use rayon::prelude::*;
use thiserror::Error;

use crate::numkit::{cholesky_solve, DenseMatrix, DenseVector, NumError};
use crate::objectives::{sigmoid, LogisticShard};
use crate::prox::{prox_in_place, Regularizer};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopAdmmError {
    #[error("block {index} failed: {message}")]
    Block { index: usize, message: String },
    #[error("state is inconsistent with the problem: {0}")]
    Shape(String),
    #[error("penalty rho must be positive, got {0}")]
    BadRho(f64),
    #[error("step tau must be non-negative, got {0}")]
    BadTau(f64),
    #[error("stopping thresholds must be positive")]
    BadThreshold,
    #[error("problem has no blocks")]
    NoBlocks,
}

/// One `f_m` together with its proximal solver.
pub trait ConsensusBlock: Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    /// `argmin_x f(x) + (penalty/2)‖x − anchor‖²`
    fn solve(&self, anchor: &DenseVector, penalty: f64) -> Result<DenseVector, String>;
}

/// A smooth term entering the z-update through its gradient only.
pub trait SmoothTerm: Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, z: &[f64]) -> f64;
    fn gradient(&self, z: &DenseVector) -> DenseVector;
}

/// `f ≡ 0`
#[derive(Debug, Clone)]
pub struct ZeroBlock {
    pub dim: usize,
}

impl ConsensusBlock for ZeroBlock {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, _x: &[f64]) -> f64 {
        0.0
    }

    fn solve(&self, anchor: &DenseVector, _penalty: f64) -> Result<DenseVector, String> {
        Ok(anchor.clone())
    }
}

/// Separable quadratic `½ Σ_j q_j (x_j − b_j)²` with `q_j ≥ 0`.
#[derive(Debug, Clone)]
pub struct QuadraticBlock {
    q: DenseVector,
    b: DenseVector,
}

impl QuadraticBlock {
    pub fn new(q: DenseVector, b: DenseVector) -> Self {
        assert_eq!(
            q.len(),
            b.len(),
            "curvature and center must have equal length"
        );
        assert!(
            q.iter().all(|v| *v >= 0.0),
            "curvatures must be non-negative"
        );
        Self { q, b }
    }

    /// `(q/2)‖x − b‖²`
    pub fn isotropic(q: f64, b: DenseVector) -> Self {
        Self::new(DenseVector::from_vec(vec![q; b.len()]), b)
    }

    pub fn gradient(&self, x: &[f64]) -> DenseVector {
        x.iter()
            .zip(self.q.iter().zip(self.b.iter()))
            .map(|(xj, (qj, bj))| qj * (xj - bj))
            .collect()
    }
}

impl ConsensusBlock for QuadraticBlock {
    fn dim(&self) -> usize {
        self.b.len()
    }

    fn value(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for ((xj, qj), bj) in x.iter().zip(self.q.iter()).zip(self.b.iter()) {
            acc += 0.5 * qj * (xj - bj) * (xj - bj);
        }
        acc
    }

    fn solve(&self, anchor: &DenseVector, penalty: f64) -> Result<DenseVector, String> {
        let mut out = DenseVector::zeros(self.dim());
        for j in 0..self.dim() {
            let denom = self.q[j] + penalty;
            if !(denom > 0.0) {
                return Err(format!("zero curvature and penalty in coordinate {j}"));
            }
            out[j] = (self.q[j] * self.b[j] + penalty * anchor[j]) / denom;
        }
        Ok(out)
    }
}

/// `(L/2)‖z − c‖²` as a smooth term.
#[derive(Debug, Clone)]
pub struct QuadraticTerm {
    pub lipschitz: f64,
    pub center: DenseVector,
}

impl SmoothTerm for QuadraticTerm {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn value(&self, z: &[f64]) -> f64 {
        0.5 * self.lipschitz * self.center.sub(z).norm_sq()
    }

    fn gradient(&self, z: &DenseVector) -> DenseVector {
        z.sub(&self.center).scaled(self.lipschitz)
    }
}

/// `s · f(x)` for a logistic shard `f`, usable as a block or a smooth term.
#[derive(Debug, Clone)]
pub struct ScaledLogistic {
    pub shard: LogisticShard,
    pub scale: f64,
}

const NEWTON_MAX_ITER: usize = 100;
const NEWTON_TOL: f64 = 1e-13;

impl ScaledLogistic {
    pub fn new(shard: LogisticShard, scale: f64) -> Self {
        Self { shard, scale }
    }

    fn objective(&self, x: &DenseVector, anchor: &DenseVector, penalty: f64) -> f64 {
        self.scale * self.shard.loss(x).expect("dimension checked")
            + 0.5 * penalty * x.sub(anchor).norm_sq()
    }

    /// `s[(1/d) A diag(σ(1−σ)) Aᵀ + κI] + pI`
    fn hessian(&self, x: &DenseVector, penalty: f64) -> DenseMatrix {
        let a = self.shard.features();
        let (n, d) = (a.rows(), a.cols());
        let mut h = DenseMatrix::zeros(n, n);
        if d > 0 {
            let s = a.matvec_t(x);
            let wts: Vec<f64> = s
                .iter()
                .map(|u| {
                    let p = sigmoid(*u);
                    self.scale * p * (1.0 - p) / d as f64
                })
                .collect();
            for i in 0..n {
                let ri = a.row(i);
                for j in 0..=i {
                    let rj = a.row(j);
                    let mut acc = 0.0;
                    for k in 0..d {
                        acc += ri[k] * rj[k] * wts[k];
                    }
                    h.set(i, j, acc);
                    h.set(j, i, acc);
                }
            }
        }
        let diag = self.scale * self.shard.kappa() + penalty;
        for i in 0..n {
            h.set(i, i, h.get(i, i) + diag);
        }
        h
    }
}

impl ConsensusBlock for ScaledLogistic {
    fn dim(&self) -> usize {
        self.shard.dim()
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.scale
            * self
                .shard
                .loss(&DenseVector::from_vec(x.to_vec()))
                .expect("dimension checked")
    }

    /// Damped Newton with backtracking, started at the anchor.
    fn solve(&self, anchor: &DenseVector, penalty: f64) -> Result<DenseVector, String> {
        if anchor.len() != self.shard.dim() {
            return Err(format!(
                "anchor has dimension {}, expected {}",
                anchor.len(),
                self.shard.dim()
            ));
        }
        let mut x = anchor.clone();
        let mut fx = self.objective(&x, anchor, penalty);
        for _ in 0..NEWTON_MAX_ITER {
            let mut grad = self.shard.gradient(&x).map_err(|e| e.to_string())?;
            grad.scale(self.scale);
            grad.axpy(penalty, &x.sub(anchor));
            if grad.norm() <= NEWTON_TOL * (1.0 + penalty * anchor.norm()) {
                return Ok(x);
            }
            let h = self.hessian(&x, penalty);
            let dir = cholesky_solve(&h, &grad).map_err(|e: NumError| e.to_string())?;
            let decrement = grad.dot(&dir);
            if 0.5 * decrement <= 1e-16 * (1.0 + fx.abs()) {
                // Objective differences are below round-off here, so take
                // plain Newton steps until they stop moving x.
                x.axpy(-1.0, &dir);
                fx = self.objective(&x, anchor, penalty);
                if dir.norm() <= 1e-15 * (1.0 + x.norm()) {
                    return Ok(x);
                }
                continue;
            }
            let mut t = 1.0;
            loop {
                let mut cand = x.clone();
                cand.axpy(-t, &dir);
                let fc = self.objective(&cand, anchor, penalty);
                if fc <= fx - 0.25 * t * decrement {
                    x = cand;
                    fx = fc;
                    break;
                }
                if t < 1e-10 {
                    return Err("line search failed far from the optimum".into());
                }
                t *= 0.5;
            }
        }
        Err(format!(
            "Newton solve did not converge in {NEWTON_MAX_ITER} iterations"
        ))
    }
}

impl SmoothTerm for ScaledLogistic {
    fn dim(&self) -> usize {
        self.shard.dim()
    }

    fn value(&self, z: &[f64]) -> f64 {
        ConsensusBlock::value(self, z)
    }

    fn gradient(&self, z: &DenseVector) -> DenseVector {
        self.shard
            .gradient(z)
            .expect("dimension checked")
            .scaled(self.scale)
    }
}

pub struct ConsensusProblem {
    pub blocks: Vec<Box<dyn ConsensusBlock>>,
    pub g: Regularizer,
    pub h: Option<Box<dyn SmoothTerm>>,
    /// Weight of `h` in the reported objective.
    pub beta: f64,
}

impl ConsensusProblem {
    pub fn new(blocks: Vec<Box<dyn ConsensusBlock>>, g: Regularizer) -> Self {
        Self {
            blocks,
            g,
            h: None,
            beta: 0.0,
        }
    }

    pub fn with_smooth(mut self, h: Box<dyn SmoothTerm>, beta: f64) -> Self {
        self.h = Some(h);
        self.beta = beta;
        self
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn dim(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.dim())
    }

    /// Weight `2Mρτ` that `h` carries at a fixed point of the iteration.
    pub fn implied_beta(&self, rho: f64, tau: f64) -> f64 {
        2.0 * self.num_blocks() as f64 * rho * tau
    }

    fn validate(&self, state: &SplitState) -> Result<(), TopAdmmError> {
        if self.blocks.is_empty() {
            return Err(TopAdmmError::NoBlocks);
        }
        let n = self.dim();
        if state.x.len() != self.blocks.len() || state.y.len() != self.blocks.len() {
            return Err(TopAdmmError::Shape(format!(
                "{} blocks but {} primal and {} dual vectors",
                self.blocks.len(),
                state.x.len(),
                state.y.len()
            )));
        }
        let dims_ok = self.blocks.iter().all(|b| b.dim() == n)
            && state.z.len() == n
            && state.x.iter().chain(state.y.iter()).all(|v| v.len() == n)
            && self.h.as_ref().is_none_or(|h| h.dim() == n);
        if !dims_ok {
            return Err(TopAdmmError::Shape(format!(
                "all dimensions must equal {n}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitState {
    pub x: Vec<DenseVector>,
    pub z: DenseVector,
    pub y: Vec<DenseVector>,
}

impl SplitState {
    pub fn zeros(blocks: usize, dim: usize) -> Self {
        Self {
            x: vec![DenseVector::zeros(dim); blocks],
            z: DenseVector::zeros(dim),
            y: vec![DenseVector::zeros(dim); blocks],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualReport {
    /// `‖x_m − z‖` per block.
    pub primal_norms: Vec<f64>,
    /// `‖z⁽ⁱ⁺¹⁾ − z⁽ⁱ⁾‖`
    pub dual_norm: f64,
    pub objective: f64,
}

impl ResidualReport {
    pub fn max_primal(&self) -> f64 {
        self.primal_norms.iter().copied().fold(0.0, f64::max)
    }
}

/// One sweep of the x-, z- and y-updates.
pub fn iterate(
    problem: &ConsensusProblem,
    state: &SplitState,
    rho: f64,
    tau: f64,
) -> Result<SplitState, TopAdmmError> {
    if !(rho > 0.0) {
        return Err(TopAdmmError::BadRho(rho));
    }
    if !(tau >= 0.0) {
        return Err(TopAdmmError::BadTau(tau));
    }
    problem.validate(state)?;
    let m = problem.num_blocks();

    let x: Vec<DenseVector> = problem
        .blocks
        .par_iter()
        .zip(state.y.par_iter())
        .enumerate()
        .map(|(index, (block, y))| {
            let mut anchor = state.z.clone();
            anchor.axpy(-1.0 / rho, y);
            block
                .solve(&anchor, 2.0 * rho)
                .map_err(|message| TopAdmmError::Block { index, message })
        })
        .collect::<Result<_, _>>()?;

    let mut z = DenseVector::zeros(problem.dim());
    for (xm, ym) in x.iter().zip(&state.y) {
        z.axpy(1.0, xm);
        z.axpy(1.0 / rho, ym);
    }
    z.scale(1.0 / m as f64);
    if let Some(h) = &problem.h {
        if tau > 0.0 {
            z.axpy(-tau, &h.gradient(&state.z));
        }
    }
    if !problem.g.is_zero() {
        prox_in_place(problem.g, 1.0 / (2.0 * rho * m as f64), &mut z).expect("scale is positive");
    }

    let y = state
        .y
        .iter()
        .zip(&x)
        .map(|(ym, xm)| {
            let mut next = ym.clone();
            next.axpy(rho, &xm.sub(&z));
            next
        })
        .collect();

    Ok(SplitState { x, z, y })
}

/// `Σ f_m(x_m) + g(z) + βh(z)`
pub fn objective_value(problem: &ConsensusProblem, state: &SplitState) -> f64 {
    let mut acc = 0.0;
    for (block, xm) in problem.blocks.iter().zip(&state.x) {
        acc += block.value(xm);
    }
    acc += problem.g.value(&state.z);
    if let Some(h) = &problem.h {
        if problem.beta != 0.0 {
            acc += problem.beta * h.value(&state.z);
        }
    }
    acc
}

fn report(problem: &ConsensusProblem, prev_z: &DenseVector, state: &SplitState) -> ResidualReport {
    ResidualReport {
        primal_norms: state.x.iter().map(|xm| xm.dist(&state.z)).collect(),
        dual_norm: state.z.dist(prev_z),
        objective: objective_value(problem, state),
    }
}

/// Iterate until every primal residual is below `eps_primal` and the dual
/// residual is below `eps_dual`, or `max_iter` sweeps have run. At least one
/// sweep is always taken.
pub fn solve(
    problem: &ConsensusProblem,
    init: SplitState,
    rho: f64,
    tau: f64,
    max_iter: usize,
    eps_primal: f64,
    eps_dual: f64,
) -> Result<(SplitState, Vec<ResidualReport>), TopAdmmError> {
    if !(eps_primal > 0.0) || !(eps_dual > 0.0) {
        return Err(TopAdmmError::BadThreshold);
    }
    let mut state = init;
    let mut trace = Vec::new();
    for _ in 0..max_iter.max(1) {
        let next = iterate(problem, &state, rho, tau)?;
        let rep = report(problem, &state.z, &next);
        let done = rep.max_primal() < eps_primal && rep.dual_norm < eps_dual;
        trace.push(rep);
        state = next;
        if done {
            break;
        }
    }
    Ok((state, trace))
}

/// `Σ_m (1/ρ)‖y_m − y*_m‖² + ρ‖z − z*‖²`
pub fn lyapunov(state: &SplitState, z_star: &[f64], y_star: &[DenseVector], rho: f64) -> f64 {
    let mut acc = 0.0;
    for (ym, ys) in state.y.iter().zip(y_star) {
        acc += ym.sub(ys).norm_sq() / rho;
    }
    acc + rho * state.z.sub(z_star).norm_sq()
}

/// How a penalty `ρ` of this solver is mapped onto per-client penalties of
/// the half-convention federated update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RhoMapping {
    /// `ρ_c = 2ρ`, duals `λ = 2y`; stationarity conditions coincide.
    Adapter,
    /// `ρ_c = ρ`, duals unchanged.
    Literal,
}

impl RhoMapping {
    pub fn client_penalty(self, rho: f64) -> f64 {
        match self {
            Self::Adapter => 2.0 * rho,
            Self::Literal => rho,
        }
    }

    pub fn client_dual(self, y: &DenseVector) -> DenseVector {
        match self {
            Self::Adapter => y.scaled(2.0),
            Self::Literal => y.clone(),
        }
    }
}
