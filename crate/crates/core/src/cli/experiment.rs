//! Experiment orchestration: dataset preparation, runs, CSV output and the
//! rounds-to-accuracy comparison.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::config::{ConfigError, DatasetSpec, ExperimentConfig};
use crate::data::{
    apply_offsets, binarize, holdout_split, load_mnist, make_partition_with_server,
    scaling_offsets, synth_sparse_logistic, DataError, RawDataset,
};
use crate::fedsim::{
    fedadmm_vc_setup, run, AlgorithmVariant, FedError, Federation, Hyper, MetricRow, RunParams,
    Schedule, VariantKind,
};
use crate::numkit::{DenseMatrix, RngStream};
use crate::objectives::{LogisticShard, ObjectiveError};

pub const DATA_DIR_ENV: &str = "FEDTOP_DATA_DIR";
pub const CSV_HEADER: &str =
    "round,iteration,objective,test_accuracy,primal_residual,dual_residual,wall_ms";
pub const TARGET_ACCURACIES: [f64; 2] = [0.97, 0.98];

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Fed(#[from] FedError),
    #[error("no MNIST directory given: set data_dir, pass --data-dir or set {DATA_DIR_ENV}")]
    NoDataDir,
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("compare needs at least one configuration")]
    NoConfigs,
}

/// Client, server and test shards shared by every algorithm in a sweep.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub clients: Vec<LogisticShard>,
    pub server: Option<LogisticShard>,
    pub test: Option<LogisticShard>,
}

fn shard(
    a: DenseMatrix,
    labels: &[u8],
    positive: u8,
    kappa: f64,
) -> Result<LogisticShard, ObjectiveError> {
    LogisticShard::new(a, binarize(labels, positive), kappa)
}

/// Split a scaled training pool into client and server shards.
fn carve(
    train: &RawDataset,
    cfg: &ExperimentConfig,
    positive: u8,
    test: Option<LogisticShard>,
) -> Result<PreparedData, ExperimentError> {
    let mut rng = RngStream::new(cfg.seed, "partition");
    let part = make_partition_with_server(
        train.len(),
        cfg.m,
        cfg.partition,
        &train.labels,
        cfg.server_fraction(),
        &mut rng,
    )?;
    let clients = part
        .client_indices
        .iter()
        .map(|idx| {
            let sub = train.subset(idx);
            shard(sub.features, &sub.labels, positive, cfg.kappa)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let server = if part.server_indices.is_empty() {
        None
    } else {
        let sub = train.subset(&part.server_indices);
        Some(shard(sub.features, &sub.labels, positive, cfg.kappa)?)
    };
    Ok(PreparedData {
        clients,
        server,
        test,
    })
}

pub fn resolve_data_dir(cfg_dir: Option<&Path>, flag: Option<&Path>) -> Option<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg_dir.map(Path::to_path_buf))
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
}

/// Load or generate the dataset, scale it with training statistics, and
/// partition it. Scaling offsets are computed on the training pool only.
pub fn prepare_data(
    cfg: &ExperimentConfig,
    data_dir: Option<&Path>,
) -> Result<PreparedData, ExperimentError> {
    match &cfg.dataset {
        DatasetSpec::Mnist { dir } => {
            let dir =
                resolve_data_dir(dir.as_deref(), data_dir).ok_or(ExperimentError::NoDataDir)?;
            let (mut train, mut test) = load_mnist(&dir)?;
            let offsets = scaling_offsets(&train.features, cfg.scaling)?;
            apply_offsets(&mut train.features, &offsets);
            apply_offsets(&mut test.features, &offsets);
            let test = shard(test.features, &test.labels, cfg.positive_digit, cfg.kappa)?;
            carve(&train, cfg, cfg.positive_digit, Some(test))
        }
        DatasetSpec::Synthetic {
            n,
            d,
            density,
            labels,
            holdout,
        } => {
            let mut rng = RngStream::new(cfg.seed, "synthetic");
            let synth = synth_sparse_logistic(*n, *d, *density, *labels, &mut rng)?;
            let (train_idx, test_idx) =
                holdout_split(*d, *holdout, &mut RngStream::new(cfg.seed, "holdout"))?;
            let mut train = synth.data.subset(&train_idx);
            let mut test = synth.data.subset(&test_idx);
            let offsets = scaling_offsets(&train.features, cfg.scaling)?;
            apply_offsets(&mut train.features, &offsets);
            apply_offsets(&mut test.features, &offsets);
            let test = if test.is_empty() {
                None
            } else {
                Some(shard(test.features, &test.labels, 1, cfg.kappa)?)
            };
            carve(&train, cfg, 1, test)
        }
    }
}

pub fn hyper(cfg: &ExperimentConfig) -> Hyper {
    Hyper {
        penalty: cfg.penalty,
        loss_scale: cfg.loss_scale,
        j: cfg.j,
    }
}

pub fn run_params(cfg: &ExperimentConfig) -> RunParams {
    RunParams {
        variant: AlgorithmVariant {
            kind: cfg.algorithm,
            gamma: cfg.gamma,
            eta: cfg.eta,
            mu: cfg.mu,
        },
        s: cfg.s,
        j: cfg.j,
        iterations: cfg.i,
        seed: cfg.seed,
        tau: Schedule {
            beta0: cfg.tau0,
            mu_prime: cfg.mu_prime,
        },
        zeta: Schedule {
            beta0: cfg.zeta0,
            mu_prime: cfg.mu_prime,
        },
        upsilon: cfg.upsilon,
        beta: cfg.beta,
        aggregate_literal: cfg.aggregate_literal,
        per_iteration_metrics: cfg.per_iteration_metrics,
        wall_clock: cfg.wall_clock,
    }
}

/// Federation for one algorithm; the virtual-client variant gets the
/// server shard as an extra client.
pub fn federation_for(
    cfg: &ExperimentConfig,
    data: &PreparedData,
) -> Result<Federation, ExperimentError> {
    let fed = Federation::build(
        data.clients.clone(),
        data.server.clone(),
        data.test.clone(),
        hyper(cfg),
    )?;
    if cfg.algorithm == VariantKind::FedAdmmVc {
        Ok(fedadmm_vc_setup(&fed)?)
    } else {
        Ok(fed)
    }
}

pub fn run_prepared(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    workers: usize,
) -> Result<Vec<MetricRow>, ExperimentError> {
    cfg.validate()?;
    let fed = federation_for(cfg, data)?;
    Ok(run(&fed, &run_params(cfg), workers)?)
}

pub fn run_experiment(
    cfg: &ExperimentConfig,
    data_dir: Option<&Path>,
    workers: usize,
) -> Result<Vec<MetricRow>, ExperimentError> {
    cfg.validate()?;
    if cfg.i == 0 {
        return Ok(Vec::new());
    }
    let data = prepare_data(cfg, data_dir)?;
    run_prepared(cfg, &data, workers)
}

fn fmt_real(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.round,
            r.iteration,
            fmt_real(r.objective),
            fmt_real(r.test_accuracy),
            fmt_real(r.primal_residual),
            fmt_real(r.dual_residual),
            fmt_real(r.wall_ms)
        );
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<(), ExperimentError> {
    fs::write(path, text).map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_stdout(text: &str) -> Result<(), ExperimentError> {
    io::stdout()
        .lock()
        .write_all(text.as_bytes())
        .map_err(|source| ExperimentError::Io {
            path: PathBuf::from("<stdout>"),
            source,
        })
}

/// First communication round whose test accuracy reaches `target`.
pub fn rounds_to_target(rows: &[MetricRow], target: f64) -> Option<usize> {
    rows.iter()
        .find(|r| r.test_accuracy >= target)
        .map(|r| r.round)
}

/// `(baseline − x) / baseline`
pub fn savings(baseline: Option<usize>, x: Option<usize>) -> Option<f64> {
    match (baseline, x) {
        (Some(b), Some(x)) if b > 0 => Some((b as f64 - x as f64) / b as f64),
        (Some(0), Some(0)) => Some(0.0),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteEntry {
    pub algorithm: VariantKind,
    pub rounds: Vec<Option<usize>>,
    pub savings: Vec<Option<f64>>,
    pub rows: Vec<MetricRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteSummary {
    pub targets: Vec<f64>,
    pub baseline: VariantKind,
    pub entries: Vec<SuiteEntry>,
}

impl SuiteSummary {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("algorithm");
        for t in &self.targets {
            let _ = write!(out, ",rounds_to_{t}");
        }
        for t in &self.targets {
            let _ = write!(out, ",savings_vs_{}_{t}", self.baseline.name());
        }
        out.push('\n');
        for e in &self.entries {
            out.push_str(e.algorithm.name());
            for r in &e.rounds {
                match r {
                    Some(r) => {
                        let _ = write!(out, ",{r}");
                    }
                    None => out.push_str(",n/a"),
                }
            }
            for s in &e.savings {
                match s {
                    Some(s) => {
                        let _ = write!(out, ",{:.2}%", 100.0 * s);
                    }
                    None => out.push_str(",n/a"),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn entry(&self, kind: VariantKind) -> Option<&SuiteEntry> {
        self.entries.iter().find(|e| e.algorithm == kind)
    }
}

/// Summarize finished runs. The FedADMM run is the baseline when present,
/// otherwise the first run.
pub fn summarize(runs: Vec<(VariantKind, Vec<MetricRow>)>, targets: &[f64]) -> SuiteSummary {
    let baseline_pos = runs
        .iter()
        .position(|(k, _)| *k == VariantKind::FedAdmm)
        .unwrap_or(0);
    let baseline = runs.get(baseline_pos).map_or(VariantKind::FedAdmm, |r| r.0);
    let base_rounds: Vec<Option<usize>> = targets
        .iter()
        .map(|t| {
            runs.get(baseline_pos)
                .and_then(|r| rounds_to_target(&r.1, *t))
        })
        .collect();
    let entries = runs
        .into_iter()
        .map(|(algorithm, rows)| {
            let rounds: Vec<Option<usize>> = targets
                .iter()
                .map(|t| rounds_to_target(&rows, *t))
                .collect();
            let savings = rounds
                .iter()
                .zip(&base_rounds)
                .map(|(x, b)| savings(*b, *x))
                .collect();
            SuiteEntry {
                algorithm,
                rounds,
                savings,
                rows,
            }
        })
        .collect();
    SuiteSummary {
        targets: targets.to_vec(),
        baseline,
        entries,
    }
}

/// Run each configuration on data prepared once from the first one, write
/// `<algorithm>.csv` per run and `summary.csv` into `out_dir`.
pub fn compare_suite(
    configs: &[ExperimentConfig],
    out_dir: Option<&Path>,
    data_dir: Option<&Path>,
    workers: usize,
) -> Result<SuiteSummary, ExperimentError> {
    let first = configs.first().ok_or(ExperimentError::NoConfigs)?;
    for c in configs {
        c.validate()?;
    }
    let data = prepare_data(first, data_dir)?;
    let mut runs = Vec::with_capacity(configs.len());
    for cfg in configs {
        let rows = run_prepared(cfg, &data, workers)?;
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir).map_err(|source| ExperimentError::Io {
                path: dir.to_path_buf(),
                source,
            })?;
            write_text(
                &dir.join(format!("{}.csv", cfg.algorithm.name())),
                &metrics_csv(&rows),
            )?;
        }
        runs.push((cfg.algorithm, rows));
    }
    let summary = summarize(runs, &TARGET_ACCURACIES);
    if let Some(dir) = out_dir {
        write_text(&dir.join("summary.csv"), &summary.to_csv())?;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(round: usize, acc: f64) -> MetricRow {
        MetricRow {
            round,
            iteration: round,
            objective: 0.0,
            test_accuracy: acc,
            primal_residual: 0.0,
            dual_residual: 0.0,
            wall_ms: 0.0,
        }
    }

    #[test]
    fn single_config_saves_nothing() {
        let rows = vec![row(0, 0.5), row(1, 0.975), row(2, 0.99)];
        let s = summarize(vec![(VariantKind::FedTopAdmmI, rows)], &TARGET_ACCURACIES);
        assert_eq!(s.entries[0].rounds, vec![Some(1), Some(2)]);
        assert_eq!(s.entries[0].savings, vec![Some(0.0), Some(0.0)]);
    }

    #[test]
    fn unreached_target_is_na() {
        let base = vec![row(0, 0.5), row(4, 0.98)];
        let slow = vec![row(0, 0.5), row(1, 0.97)];
        let s = summarize(
            vec![(VariantKind::FedAdmm, base), (VariantKind::FedAvg, slow)],
            &TARGET_ACCURACIES,
        );
        let e = s.entry(VariantKind::FedAvg).unwrap();
        assert_eq!(e.rounds, vec![Some(1), None]);
        assert_eq!(e.savings, vec![Some(0.75), None]);
        assert!(s.to_csv().lines().nth(2).unwrap().ends_with("n/a"));
    }

    #[test]
    fn csv_layout() {
        let text = metrics_csv(&[row(3, 0.25)]);
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        assert_eq!(
            lines.next(),
            Some("3,3,0.0000000000000000e0,2.5000000000000000e-1,0.0000000000000000e0,0.0000000000000000e0,0.0000000000000000e0")
        );
        let v: f64 = "2.5000000000000000e-1".parse().unwrap();
        assert_eq!(v, 0.25);
    }
}
