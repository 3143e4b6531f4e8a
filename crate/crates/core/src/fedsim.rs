//! Federated ADMM engine with a server-side smooth term, plus FedADMM,
//! FedADMM with a virtual client, modified FedADMM, FedProx and FedAvg.
//!
//! Clients minimize `α_m s_m f_m(w)` where `f_m` is the per-example mean
//! logistic loss of their shard and `s_m` a loss scale (the shard size in the
//! default sum convention). The server holds an optional shard whose scaled
//! loss `s_h h` enters only through gradient steps.

use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::numkit::{rng_uniform_subset, DenseVector, NumError, RngStream};
use crate::objectives::{l1_term, LogisticShard, ObjectiveError};
use crate::prox::{prox_in_place, Regularizer};

#[derive(Debug, Error)]
pub enum FedError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("client {client}: {source}")]
    Objective {
        client: usize,
        #[source]
        source: ObjectiveError,
    },
    #[error("client {client} has zero curvature and penalty (alpha·r + rho = 0)")]
    SingularStep { client: usize },
    #[error("the virtual client needs a non-empty server shard")]
    EmptyServerShard,
    #[error(transparent)]
    Numeric(#[from] NumError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VariantKind {
    FedTopAdmmI,
    FedTopAdmmII,
    FedAdmm,
    FedAdmmModified,
    FedAdmmVc,
    FedProx,
    FedAvg,
}

impl VariantKind {
    pub const ALL: [VariantKind; 7] = [
        Self::FedTopAdmmI,
        Self::FedTopAdmmII,
        Self::FedAdmm,
        Self::FedAdmmModified,
        Self::FedAdmmVc,
        Self::FedProx,
        Self::FedAvg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::FedTopAdmmI => "fedtop-admm-1",
            Self::FedTopAdmmII => "fedtop-admm-2",
            Self::FedAdmm => "fedadmm",
            Self::FedAdmmModified => "fedadmm-modified",
            Self::FedAdmmVc => "fedadmm-vc",
            Self::FedProx => "fedprox",
            Self::FedAvg => "fedavg",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn is_admm(self) -> bool {
        !matches!(self, Self::FedProx | Self::FedAvg)
    }

    /// Variants that run the server gradient step on `h`.
    pub fn uses_server_step(self) -> bool {
        matches!(self, Self::FedTopAdmmI | Self::FedTopAdmmII)
    }

    /// Variants whose aggregation applies `prox_{νg}` with `g = υ‖·‖₁`.
    pub fn uses_regularizer(self) -> bool {
        matches!(
            self,
            Self::FedTopAdmmI | Self::FedTopAdmmII | Self::FedAdmmModified
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlgorithmVariant {
    pub kind: VariantKind,
    /// Dual relaxation factor.
    pub gamma: f64,
    /// Gradient step for FedProx and FedAvg.
    pub eta: f64,
    /// FedProx proximal weight; FedAvg always uses 0.
    pub mu: f64,
}

impl AlgorithmVariant {
    /// Relaxation actually applied: plain FedADMM variants use 1.
    pub fn effective_gamma(&self) -> f64 {
        match self.kind {
            VariantKind::FedTopAdmmI | VariantKind::FedTopAdmmII => self.gamma,
            _ => 1.0,
        }
    }

    pub fn effective_mu(&self) -> f64 {
        match self.kind {
            VariantKind::FedAvg => 0.0,
            _ => self.mu,
        }
    }

    pub fn validate(&self) -> Result<(), FedError> {
        if self.kind.is_admm() {
            if !(self.gamma >= 0.0 && self.gamma <= 2.0) {
                return Err(FedError::Config(format!(
                    "gamma must lie in [0, 2], got {}",
                    self.gamma
                )));
            }
        } else {
            if !(self.eta > 0.0) || !self.eta.is_finite() {
                return Err(FedError::Config(format!(
                    "eta must be positive, got {}",
                    self.eta
                )));
            }
            if !(self.mu >= 0.0) || !self.mu.is_finite() {
                return Err(FedError::Config(format!(
                    "mu must be non-negative, got {}",
                    self.mu
                )));
            }
        }
        Ok(())
    }
}

/// Decaying step recipe `β⁽ⁱ⁺¹⁾ = β⁽⁰⁾ / (1 + i·μ′·β⁽ⁱ⁾)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub beta0: f64,
    pub mu_prime: f64,
}

impl Schedule {
    pub fn constant(beta0: f64) -> Self {
        Self {
            beta0,
            mu_prime: 0.0,
        }
    }

    /// Next value of the emitted sequence. The raw recipe oscillates when
    /// `μ′β⁽⁰⁾` is large, so the emitted value never exceeds the previous one.
    pub fn advance(&self, i: usize, beta_i: f64) -> f64 {
        schedule_next(self, i, beta_i).min(beta_i)
    }
}

pub fn schedule_next(s: &Schedule, i: usize, beta_i: f64) -> f64 {
    s.beta0 / (1.0 + i as f64 * s.mu_prime * beta_i)
}

/// `a·ln(M·d_m)·α_m·r_m / ln(2 + J)`
pub fn rho_from_a(a: f64, m: usize, d_m: usize, alpha_m: f64, r_m: f64, j: usize) -> f64 {
    a * ((m * d_m) as f64).ln() * alpha_m * r_m / ((2 + j) as f64).ln()
}

pub fn comm_round(i: usize, j: usize) -> usize {
    i / j
}

/// `−τ·∇h + ζ·w`
pub fn server_intermediate(w: &[f64], grad_h: &[f64], tau: f64, zeta: f64) -> DenseVector {
    w.iter()
        .zip(grad_h)
        .map(|(wj, gj)| -tau * gj + zeta * wj)
        .collect()
}

/// `prox_{νg}(ν(Σ v_m + y))`, summing `v` in index order.
pub fn aggregate(v: &[DenseVector], y: &[f64], nu: f64, g: Regularizer) -> DenseVector {
    aggregate_with(v, y, nu, g, nu)
}

/// The same update with the point scaled by `1/ν` instead of `ν`.
pub fn aggregate_literal(v: &[DenseVector], y: &[f64], nu: f64, g: Regularizer) -> DenseVector {
    aggregate_with(v, y, nu, g, 1.0 / nu)
}

fn aggregate_with(
    v: &[DenseVector],
    y: &[f64],
    nu: f64,
    g: Regularizer,
    point_scale: f64,
) -> DenseVector {
    let mut acc = DenseVector::from_vec(y.to_vec());
    for vm in v {
        acc.axpy(1.0, vm);
    }
    acc.scale(point_scale);
    if !g.is_zero() {
        prox_in_place(g, nu, &mut acc).expect("nu is positive");
    }
    acc
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub w: DenseVector,
    pub lambda: DenseVector,
    pub u: DenseVector,
    pub rho: f64,
    pub alpha: f64,
    pub r: f64,
    /// Multiplier turning the shard's mean loss into the client loss.
    pub loss_scale: f64,
    pub v_cached: DenseVector,
}

impl ClientState {
    pub fn zeros(dim: usize, rho: f64, alpha: f64, r: f64, loss_scale: f64) -> Self {
        Self {
            w: DenseVector::zeros(dim),
            lambda: DenseVector::zeros(dim),
            u: DenseVector::zeros(dim),
            rho,
            alpha,
            r,
            loss_scale,
            v_cached: DenseVector::zeros(dim),
        }
    }
}

/// Linearized client update given the gradient of the scaled client loss
/// divided by `α` (that is, `s_m ∇f_m(w_m)`).
pub fn admm_update(
    c: &ClientState,
    v: &[f64],
    scaled_grad: &[f64],
    gamma: f64,
) -> Option<ClientState> {
    let denom = c.alpha * c.r + c.rho;
    if denom == 0.0 {
        return None;
    }
    let mut next = c.clone();
    for j in 0..c.w.len() {
        let dz = c.rho * (c.w[j] - v[j]) + c.alpha * scaled_grad[j] + c.lambda[j];
        let wj = c.w[j] - dz / denom;
        let lj = c.lambda[j] + gamma * c.rho * (wj - v[j]);
        next.w[j] = wj;
        next.lambda[j] = lj;
        next.u[j] = c.rho * wj + lj;
    }
    Some(next)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StepError {
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("alpha·r + rho = 0, the linearized step is undefined")]
    Singular,
}

pub fn client_local_step(
    c: &ClientState,
    v: &[f64],
    shard: &LogisticShard,
    gamma: f64,
) -> Result<ClientState, StepError> {
    let mut grad = shard.gradient(&c.w)?;
    grad.scale(c.loss_scale);
    admm_update(c, v, &grad, gamma).ok_or(StepError::Singular)
}

/// `w ← w − η[∇f_m(w) + μ(w − v)]` with the per-example mean gradient.
pub fn fedavg_or_fedprox_step(
    c: &ClientState,
    v: &[f64],
    shard: &LogisticShard,
    eta: f64,
    mu: f64,
) -> Result<ClientState, ObjectiveError> {
    let grad = shard.gradient(&c.w)?;
    Ok(prox_gradient_update(c, v, &grad, eta, mu))
}

pub fn prox_gradient_update(
    c: &ClientState,
    v: &[f64],
    grad: &[f64],
    eta: f64,
    mu: f64,
) -> ClientState {
    let mut next = c.clone();
    for j in 0..c.w.len() {
        next.w[j] = c.w[j] - eta * (grad[j] + mu * (c.w[j] - v[j]));
    }
    next.u = next.w.clone();
    next
}

/// Loss convention for client and server terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossScale {
    /// Losses are sums over examples: `s_m = d_m`.
    #[default]
    Sum,
    /// Losses are per-example means: `s_m = 1`.
    Mean,
}

impl LossScale {
    pub fn factor(self, examples: usize) -> f64 {
        match self {
            Self::Sum => examples as f64,
            Self::Mean => 1.0,
        }
    }
}

/// How penalties are chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PenaltyRule {
    /// `ρ_m = rho_from_a(a, …)`
    A(f64),
    /// Solve for `a` so that the mean of `ρ_m` over real clients equals this.
    MeanRho(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyper {
    pub penalty: PenaltyRule,
    pub loss_scale: LossScale,
    /// Communication period `J` used by the penalty recipe.
    pub j: usize,
}

#[derive(Debug, Clone)]
pub struct ClientData {
    pub shard: LogisticShard,
    pub alpha: f64,
    pub r: f64,
    pub rho: f64,
    pub loss_scale: f64,
    /// Collocated with the server; always active, never counted as uplink.
    pub is_virtual: bool,
}

#[derive(Debug, Clone)]
pub struct ServerData {
    pub shard: LogisticShard,
    pub loss_scale: f64,
}

impl ServerData {
    pub fn scaled_gradient(&self, w: &DenseVector) -> DenseVector {
        self.shard
            .gradient(w)
            .expect("dimension checked")
            .scaled(self.loss_scale)
    }

    pub fn scaled_loss(&self, w: &DenseVector) -> f64 {
        self.loss_scale * self.shard.loss(w).expect("dimension checked")
    }
}

#[derive(Debug, Clone)]
pub struct Federation {
    pub clients: Vec<ClientData>,
    pub server: Option<ServerData>,
    pub test: Option<LogisticShard>,
    /// Rule used to pick `a`; retained for the virtual client.
    pub a: f64,
    pub hyper: Hyper,
}

impl Federation {
    /// Attach curvature surrogates, weights `α_m = 1/(M·d_m)` (scaled by the
    /// loss convention so that `Σ α_m s_m = 1`) and penalties.
    pub fn build(
        client_shards: Vec<LogisticShard>,
        server_shard: Option<LogisticShard>,
        test: Option<LogisticShard>,
        hyper: Hyper,
    ) -> Result<Self, FedError> {
        let m = client_shards.len();
        if m == 0 {
            return Err(FedError::Config("at least one client is required".into()));
        }
        if hyper.j == 0 {
            return Err(FedError::Config("J must be at least 1".into()));
        }
        let dim = client_shards[0].dim();
        let surrogates: Vec<f64> = client_shards
            .par_iter()
            .enumerate()
            .map(|(client, s)| {
                if s.dim() != dim {
                    return Err(FedError::Config(format!(
                        "client {client} has dimension {}",
                        s.dim()
                    )));
                }
                if s.is_empty() {
                    return Err(FedError::Config(format!(
                        "client {client} holds no examples"
                    )));
                }
                s.smoothness_surrogate()
                    .map_err(|source| FedError::Objective { client, source })
            })
            .collect::<Result<_, _>>()?;
        let mut clients: Vec<ClientData> = client_shards
            .into_iter()
            .zip(surrogates)
            .map(|(shard, r)| {
                let d = shard.len();
                let loss_scale = hyper.loss_scale.factor(d);
                ClientData {
                    alpha: 1.0 / (m as f64 * loss_scale),
                    r,
                    rho: 0.0,
                    loss_scale,
                    is_virtual: false,
                    shard,
                }
            })
            .collect();
        let unit: Vec<f64> = clients
            .iter()
            .map(|c| rho_from_a(1.0, m, c.shard.len(), c.alpha, c.r, hyper.j))
            .collect();
        let a = match hyper.penalty {
            PenaltyRule::A(a) => a,
            PenaltyRule::MeanRho(target) => {
                let mean_unit = unit.iter().sum::<f64>() / m as f64;
                if !(mean_unit > 0.0) {
                    return Err(FedError::Config(
                        "cannot reach a target rho: all surrogates vanish".into(),
                    ));
                }
                target / mean_unit
            }
        };
        for (c, u) in clients.iter_mut().zip(&unit) {
            c.rho = a * u;
        }
        if let Some(s) = &server_shard {
            if s.dim() != dim {
                return Err(FedError::Config(
                    "server shard dimension differs from clients".into(),
                ));
            }
        }
        if let Some(t) = &test {
            if t.dim() != dim {
                return Err(FedError::Config(
                    "test shard dimension differs from clients".into(),
                ));
            }
        }
        let server = server_shard.map(|shard| ServerData {
            loss_scale: hyper.loss_scale.factor(shard.len()),
            shard,
        });
        Ok(Self {
            clients,
            server,
            test,
            a,
            hyper,
        })
    }

    pub fn dim(&self) -> usize {
        self.clients[0].shard.dim()
    }

    pub fn num_real_clients(&self) -> usize {
        self.clients.iter().filter(|c| !c.is_virtual).count()
    }

    /// Σ_m α_m s_m f_m(w) over real clients.
    pub fn client_objective(&self, w: &DenseVector) -> f64 {
        let parts: Vec<f64> = self
            .clients
            .par_iter()
            .map(|c| {
                if c.is_virtual {
                    0.0
                } else {
                    c.alpha * c.loss_scale * c.shard.loss(w).expect("dimension checked")
                }
            })
            .collect();
        parts.iter().sum()
    }
}

/// Add a virtual client holding the server shard, renormalizing `α` over
/// `M + 1` clients. The virtual client's penalty follows the same recipe
/// with the same `a`.
pub fn fedadmm_vc_setup(fed: &Federation) -> Result<Federation, FedError> {
    let server = fed.server.as_ref().ok_or(FedError::EmptyServerShard)?;
    if server.shard.is_empty() {
        return Err(FedError::EmptyServerShard);
    }
    let m1 = fed.num_real_clients() + 1;
    let r = server
        .shard
        .smoothness_surrogate()
        .map_err(|source| FedError::Objective {
            client: m1 - 1,
            source,
        })?;
    let mut clients: Vec<ClientData> = fed
        .clients
        .iter()
        .filter(|c| !c.is_virtual)
        .cloned()
        .collect();
    clients.push(ClientData {
        shard: server.shard.clone(),
        alpha: 0.0,
        r,
        rho: 0.0,
        loss_scale: server.loss_scale,
        is_virtual: true,
    });
    for c in clients.iter_mut() {
        c.alpha = 1.0 / (m1 as f64 * c.loss_scale);
        c.rho = rho_from_a(fed.a, m1, c.shard.len(), c.alpha, c.r, fed.hyper.j);
    }
    Ok(Federation {
        clients,
        server: None,
        test: fed.test.clone(),
        a: fed.a,
        hyper: fed.hyper,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunParams {
    pub variant: AlgorithmVariant,
    /// Clients selected per communication round.
    pub s: usize,
    /// Local iterations per communication round.
    pub j: usize,
    /// Total global iterations.
    pub iterations: usize,
    pub seed: u64,
    pub tau: Schedule,
    pub zeta: Schedule,
    /// L1 strength `υ` of `g`.
    pub upsilon: f64,
    /// Weight of the server loss in the reported objective.
    pub beta: f64,
    pub aggregate_literal: bool,
    pub per_iteration_metrics: bool,
    pub wall_clock: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub w: DenseVector,
    pub y: DenseVector,
    pub v: Vec<DenseVector>,
    pub nu: f64,
    pub tau_i: f64,
    pub zeta_i: f64,
    pub iteration: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub round: usize,
    pub iteration: usize,
    pub objective: f64,
    pub test_accuracy: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub wall_ms: f64,
}

pub struct Engine<'a> {
    fed: &'a Federation,
    params: RunParams,
    g: Regularizer,
    clients: Vec<ClientState>,
    server: ServerState,
    active: Vec<usize>,
    rng: RngStream,
    rho_sum: f64,
    started: Instant,
}

impl<'a> Engine<'a> {
    pub fn new(fed: &'a Federation, params: RunParams) -> Result<Self, FedError> {
        params.variant.validate()?;
        let kind = params.variant.kind;
        let real = fed.num_real_clients();
        if params.j == 0 {
            return Err(FedError::Config("J must be at least 1".into()));
        }
        if params.s > real {
            return Err(FedError::Config(format!(
                "S = {} exceeds the number of clients M = {real}",
                params.s
            )));
        }
        if kind == VariantKind::FedAdmmVc && !fed.clients.iter().any(|c| c.is_virtual) {
            return Err(FedError::Config(
                "fedadmm-vc needs a federation built by fedadmm_vc_setup".into(),
            ));
        }
        if kind.uses_server_step() && fed.server.is_none() {
            return Err(FedError::Config(
                "the server step needs a server shard".into(),
            ));
        }
        for (name, s) in [("tau", params.tau), ("zeta", params.zeta)] {
            if !(s.beta0 >= 0.0)
                || !(s.mu_prime >= 0.0)
                || !s.beta0.is_finite()
                || !s.mu_prime.is_finite()
            {
                return Err(FedError::Config(format!(
                    "{name} schedule must be finite and non-negative"
                )));
            }
        }
        if !(params.upsilon >= 0.0) || !params.upsilon.is_finite() {
            return Err(FedError::Config(format!(
                "upsilon must be non-negative, got {}",
                params.upsilon
            )));
        }
        let g = if kind.uses_regularizer() && params.upsilon > 0.0 {
            Regularizer::L1(params.upsilon)
        } else {
            Regularizer::Zero
        };
        let dim = fed.dim();
        let clients: Vec<ClientState> = fed
            .clients
            .iter()
            .map(|c| ClientState::zeros(dim, c.rho, c.alpha, c.r, c.loss_scale))
            .collect();
        let rho_sum: f64 = clients.iter().map(|c| c.rho).sum();
        let (tau0, zeta0) = if kind.uses_server_step() {
            (params.tau.beta0, params.zeta.beta0)
        } else {
            (0.0, 0.0)
        };
        if kind.is_admm() && !(rho_sum + zeta0 > 0.0) {
            return Err(FedError::Config(
                "sum of penalties plus zeta must be positive".into(),
            ));
        }
        let server = ServerState {
            w: DenseVector::zeros(dim),
            y: DenseVector::zeros(dim),
            v: vec![DenseVector::zeros(dim); clients.len()],
            nu: 1.0 / (rho_sum + zeta0),
            tau_i: tau0,
            zeta_i: zeta0,
            iteration: 0,
        };
        let active = (0..clients.len()).collect();
        Ok(Self {
            fed,
            rng: RngStream::new(params.seed, "client-selection"),
            params,
            g,
            clients,
            server,
            active,
            rho_sum,
            started: Instant::now(),
        })
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn regularizer(&self) -> Regularizer {
        self.g
    }

    fn is_comm_event(&self, i: usize) -> bool {
        i.is_multiple_of(self.params.j)
    }

    fn server_step(&mut self, i: usize) {
        let kind = self.params.variant.kind;
        let run = match kind {
            VariantKind::FedTopAdmmI => true,
            VariantKind::FedTopAdmmII => !self.is_comm_event(i),
            _ => false,
        };
        if run {
            let server = self.fed.server.as_ref().expect("validated");
            let grad = if self.server.tau_i > 0.0 {
                server.scaled_gradient(&self.server.w)
            } else {
                DenseVector::zeros(self.server.w.len())
            };
            self.server.y =
                server_intermediate(&self.server.w, &grad, self.server.tau_i, self.server.zeta_i);
        }
    }

    /// Receive `u_m` from the clients active in the window that just closed.
    fn ingest(&mut self) {
        for &m in &self.active {
            self.server.v[m] = self.clients[m].u.clone();
        }
    }

    fn select(&mut self) -> Result<(), FedError> {
        let real = self.fed.num_real_clients();
        let mut next = rng_uniform_subset(&mut self.rng, real, self.params.s)?;
        // Real clients occupy indices 0..real; the virtual client follows.
        next.extend(real..self.clients.len());
        self.active = next;
        Ok(())
    }

    fn aggregate_admm(&mut self) {
        self.server.nu = 1.0 / (self.rho_sum + self.server.zeta_i);
        self.server.w = if self.params.aggregate_literal {
            aggregate_literal(&self.server.v, &self.server.y, self.server.nu, self.g)
        } else {
            aggregate(&self.server.v, &self.server.y, self.server.nu, self.g)
        };
    }

    fn aggregate_average(&mut self, ingested: &[usize]) {
        if ingested.is_empty() {
            return;
        }
        let mut acc = DenseVector::zeros(self.server.w.len());
        for &m in ingested {
            acc.axpy(1.0, &self.server.v[m]);
        }
        acc.scale(1.0 / ingested.len() as f64);
        self.server.w = acc;
    }

    fn multicast(&mut self) {
        let resets = !self.params.variant.kind.is_admm();
        for &m in &self.active {
            let c = &mut self.clients[m];
            c.v_cached = self.server.w.clone();
            if resets {
                c.w = self.server.w.clone();
                c.u = c.w.clone();
            }
        }
    }

    fn local_steps(&mut self) -> Result<(), FedError> {
        let variant = self.params.variant;
        let gamma = variant.effective_gamma();
        let mu = variant.effective_mu();
        let fed = self.fed;
        let mut is_active = vec![false; self.clients.len()];
        for &m in &self.active {
            is_active[m] = true;
        }
        self.clients
            .par_iter_mut()
            .enumerate()
            .filter(|(m, _)| is_active[*m])
            .try_for_each(|(m, c)| {
                let shard = &fed.clients[m].shard;
                let grad = shard
                    .gradient(&c.w)
                    .map_err(|source| FedError::Objective { client: m, source })?;
                let next = if variant.kind.is_admm() {
                    let scaled = grad.scaled(c.loss_scale);
                    admm_update(c, &c.v_cached, &scaled, gamma)
                        .ok_or(FedError::SingularStep { client: m })?
                } else {
                    prox_gradient_update(c, &c.v_cached, &grad, variant.eta, mu)
                };
                *c = next;
                Ok(())
            })
    }

    fn advance_schedules(&mut self, i: usize) {
        if self.params.variant.kind.uses_server_step() {
            self.server.tau_i = self.params.tau.advance(i, self.server.tau_i);
            self.server.zeta_i = self.params.zeta.advance(i, self.server.zeta_i);
        }
    }

    fn metrics(&self, i: usize, prev_w: &DenseVector) -> MetricRow {
        let w = &self.server.w;
        let mut objective = self.fed.client_objective(w);
        if self.params.upsilon > 0.0 {
            objective += l1_term(w, self.params.upsilon);
        }
        if self.params.beta > 0.0 {
            if let Some(s) = &self.fed.server {
                objective += self.params.beta * s.scaled_loss(w);
            }
        }
        let test_accuracy = self
            .fed
            .test
            .as_ref()
            .filter(|t| !t.is_empty())
            .map_or(f64::NAN, |t| t.accuracy(w).expect("dimension checked"));
        let real_active: Vec<usize> = self
            .active
            .iter()
            .copied()
            .filter(|&m| !self.fed.clients[m].is_virtual)
            .collect();
        let primal_residual = if real_active.is_empty() {
            0.0
        } else {
            real_active
                .iter()
                .map(|&m| self.clients[m].w.dist(w))
                .sum::<f64>()
                / real_active.len() as f64
        };
        MetricRow {
            round: comm_round(i, self.params.j),
            iteration: i,
            objective,
            test_accuracy,
            primal_residual,
            dual_residual: w.dist(prev_w),
            wall_ms: if self.params.wall_clock {
                self.started.elapsed().as_secs_f64() * 1e3
            } else {
                0.0
            },
        }
    }

    /// Global iteration `i`. Returns a metric row when one is due.
    pub fn step(&mut self) -> Result<Option<MetricRow>, FedError> {
        let i = self.server.iteration;
        let comm = self.is_comm_event(i);
        let prev_w = self.server.w.clone();
        self.server_step(i);
        let ingested = if comm {
            self.ingest();
            let closed = self.active.clone();
            self.select()?;
            closed
        } else {
            Vec::new()
        };
        if self.params.variant.kind.is_admm() {
            self.aggregate_admm();
        } else if comm {
            self.aggregate_average(&ingested);
        }
        if comm {
            self.multicast();
        }
        let row = (comm || self.params.per_iteration_metrics).then(|| self.metrics(i, &prev_w));
        self.local_steps()?;
        self.advance_schedules(i);
        self.server.iteration += 1;
        Ok(row)
    }

    /// Closing uplink and aggregation after the last window when the final
    /// iteration index is itself a communication event.
    pub fn finish(&mut self) -> Option<MetricRow> {
        let i = self.server.iteration;
        if i == 0 || !self.is_comm_event(i) {
            return None;
        }
        let prev_w = self.server.w.clone();
        self.server_step(i);
        self.ingest();
        let closed = self.active.clone();
        if self.params.variant.kind.is_admm() {
            self.aggregate_admm();
        } else {
            self.aggregate_average(&closed);
        }
        Some(self.metrics(i, &prev_w))
    }
}

/// Run all iterations on a pool of `workers` threads (0 means the rayon
/// default). Output does not depend on the worker count.
pub fn run(
    fed: &Federation,
    params: &RunParams,
    workers: usize,
) -> Result<Vec<MetricRow>, FedError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| FedError::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| {
        let mut engine = Engine::new(fed, params.clone())?;
        let mut rows = Vec::new();
        for _ in 0..params.iterations {
            if let Some(row) = engine.step()? {
                rows.push(row);
            }
        }
        rows.extend(engine.finish());
        Ok(rows)
    })
}
