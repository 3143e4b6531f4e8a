//! Flat `key = value` experiment configuration.

use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::data::{PartitionMode, Scaling, SynthLabels};
use crate::fedsim::{LossScale, PenaltyRule, VariantKind};

#[derive(Debug, Error, Clone, PartialEq)]
#[error("config key `{key}`: {message}")]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl ConfigError {
    fn new(key: &str, message: impl Into<String>) -> Self {
        Self {
            key: key.to_string(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    Synthetic {
        n: usize,
        d: usize,
        density: f64,
        labels: SynthLabels,
        /// Fraction of examples held out for testing.
        holdout: f64,
    },
    /// Directory with the four MNIST IDX files; `None` defers to the CLI
    /// flag or environment variable.
    Mnist { dir: Option<PathBuf> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub algorithm: VariantKind,
    pub m: usize,
    pub s: usize,
    pub j: usize,
    pub i: usize,
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub scaling: Scaling,
    pub partition: PartitionMode,
    pub positive_digit: u8,
    pub kappa: f64,
    pub upsilon: f64,
    pub penalty: PenaltyRule,
    pub tau0: f64,
    pub zeta0: f64,
    pub mu_prime: f64,
    pub gamma: f64,
    pub eta: f64,
    pub mu: f64,
    pub beta: f64,
    /// Fraction of the training pool held by the server; `None` means one
    /// client-sized share, `1/(M+1)`.
    pub server_shard_fraction: Option<f64>,
    pub loss_scale: LossScale,
    pub aggregate_literal: bool,
    pub per_iteration_metrics: bool,
    pub wall_clock: bool,
}

pub const DEFAULT_RHO_MEAN: f64 = 3.4035e-3;

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            algorithm: VariantKind::FedTopAdmmI,
            m: 200,
            s: 10,
            j: 10,
            i: 2000,
            seed: 0,
            dataset: DatasetSpec::Mnist { dir: None },
            scaling: Scaling::Approach2,
            partition: PartitionMode::Iid,
            positive_digit: 1,
            kappa: 0.001,
            upsilon: 0.0,
            penalty: PenaltyRule::MeanRho(DEFAULT_RHO_MEAN),
            tau0: 1e-8,
            zeta0: 2.5,
            mu_prime: 10.0,
            gamma: 1.999,
            eta: 1e-5,
            mu: 0.5,
            beta: 0.0,
            server_shard_fraction: None,
            loss_scale: LossScale::Sum,
            aggregate_literal: false,
            per_iteration_metrics: false,
            wall_clock: false,
        }
    }
}

impl ExperimentConfig {
    pub fn server_fraction(&self) -> f64 {
        self.server_shard_fraction
            .unwrap_or(1.0 / (self.m as f64 + 1.0))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.m == 0 {
            return Err(ConfigError::new("M", "must be at least 1"));
        }
        if self.s > self.m {
            return Err(ConfigError::new(
                "S",
                format!("{} exceeds M = {}", self.s, self.m),
            ));
        }
        if self.j == 0 {
            return Err(ConfigError::new("J", "must be at least 1"));
        }
        let reals = [
            ("kappa", self.kappa),
            ("upsilon", self.upsilon),
            ("tau0", self.tau0),
            ("zeta0", self.zeta0),
            ("mu_prime", self.mu_prime),
            ("mu", self.mu),
            ("beta", self.beta),
        ];
        for (key, v) in reals {
            if !v.is_finite() || v < 0.0 {
                return Err(ConfigError::new(
                    key,
                    format!("must be finite and non-negative, got {v}"),
                ));
            }
        }
        if !(self.gamma > 0.0 && self.gamma <= 2.0) {
            return Err(ConfigError::new(
                "gamma",
                format!("must lie in (0, 2], got {}", self.gamma),
            ));
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(ConfigError::new(
                "eta",
                format!("must be positive, got {}", self.eta),
            ));
        }
        match self.penalty {
            PenaltyRule::A(a) if !(a > 0.0) || !a.is_finite() => {
                return Err(ConfigError::new("a", format!("must be positive, got {a}")));
            }
            PenaltyRule::MeanRho(r) if !(r > 0.0) || !r.is_finite() => {
                return Err(ConfigError::new(
                    "rho_mean",
                    format!("must be positive, got {r}"),
                ));
            }
            _ => {}
        }
        if let Some(f) = self.server_shard_fraction {
            if !(0.0..1.0).contains(&f) {
                return Err(ConfigError::new(
                    "server_shard_fraction",
                    format!("must lie in [0, 1), got {f}"),
                ));
            }
        }
        if let DatasetSpec::Synthetic {
            n,
            d,
            density,
            labels,
            holdout,
        } = &self.dataset
        {
            if *n == 0 {
                return Err(ConfigError::new("n", "must be at least 1"));
            }
            if *d < self.m {
                return Err(ConfigError::new(
                    "d",
                    format!("{d} examples cannot feed M = {} clients", self.m),
                ));
            }
            if !(0.0..=1.0).contains(density) {
                return Err(ConfigError::new(
                    "density",
                    format!("must lie in [0, 1], got {density}"),
                ));
            }
            if !(0.0..1.0).contains(holdout) {
                return Err(ConfigError::new(
                    "holdout",
                    format!("must lie in [0, 1), got {holdout}"),
                ));
            }
            if let SynthLabels::Sign { noise_var } = labels {
                if !(*noise_var >= 0.0) || !noise_var.is_finite() {
                    return Err(ConfigError::new(
                        "noise_var",
                        "must be finite and non-negative",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Render as parseable text.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        put("algorithm", self.algorithm.name().into());
        put("M", self.m.to_string());
        put("S", self.s.to_string());
        put("J", self.j.to_string());
        put("I", self.i.to_string());
        put("seed", self.seed.to_string());
        match &self.dataset {
            DatasetSpec::Mnist { dir } => {
                put("dataset", "mnist".into());
                if let Some(d) = dir {
                    put("data_dir", d.display().to_string());
                }
            }
            DatasetSpec::Synthetic {
                n,
                d,
                density,
                labels,
                holdout,
            } => {
                put("dataset", "synthetic".into());
                put("n", n.to_string());
                put("d", d.to_string());
                put("density", format!("{density:e}"));
                put("holdout", format!("{holdout:e}"));
                match labels {
                    SynthLabels::Bernoulli => put("synth_labels", "bernoulli".into()),
                    SynthLabels::Sign { noise_var } => {
                        put("synth_labels", "sign".into());
                        put("noise_var", format!("{noise_var:e}"));
                    }
                }
            }
        }
        put("scaling", scaling_name(self.scaling).into());
        put("partition", partition_name(self.partition).into());
        put("positive_digit", self.positive_digit.to_string());
        put("kappa", format!("{:e}", self.kappa));
        put("upsilon", format!("{:e}", self.upsilon));
        match self.penalty {
            PenaltyRule::A(a) => put("a", format!("{a:e}")),
            PenaltyRule::MeanRho(r) => put("rho_mean", format!("{r:e}")),
        }
        put("tau0", format!("{:e}", self.tau0));
        put("zeta0", format!("{:e}", self.zeta0));
        put("mu_prime", format!("{:e}", self.mu_prime));
        put("gamma", format!("{:e}", self.gamma));
        put("eta", format!("{:e}", self.eta));
        put("mu", format!("{:e}", self.mu));
        put("beta", format!("{:e}", self.beta));
        if let Some(f) = self.server_shard_fraction {
            put("server_shard_fraction", format!("{f:e}"));
        }
        put(
            "loss_scale",
            match self.loss_scale {
                LossScale::Sum => "sum",
                LossScale::Mean => "mean",
            }
            .into(),
        );
        put("aggregate_literal", self.aggregate_literal.to_string());
        put(
            "per_iteration_metrics",
            self.per_iteration_metrics.to_string(),
        );
        put("wall_clock", self.wall_clock.to_string());
        out
    }
}

fn scaling_name(s: Scaling) -> &'static str {
    match s {
        Scaling::None => "none",
        Scaling::Approach1 => "approach1",
        Scaling::Approach2 => "approach2",
    }
}

fn partition_name(p: PartitionMode) -> &'static str {
    match p {
        PartitionMode::Iid => "iid",
        PartitionMode::NonIid => "noniid",
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value
        .parse()
        .map_err(|_| ConfigError::new(key, format!("cannot parse `{value}`")))
}

fn real(key: &str, value: &str) -> Result<f64, ConfigError> {
    let v: f64 = num(key, value)?;
    if !v.is_finite() {
        return Err(ConfigError::new(key, "must be finite"));
    }
    Ok(v)
}

fn boolean(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(ConfigError::new(
            key,
            format!("expected true or false, got `{value}`"),
        )),
    }
}

/// Synthetic-dataset fields collected before the dataset kind is known.
#[derive(Default)]
struct SynthFields {
    n: Option<usize>,
    d: Option<usize>,
    density: Option<f64>,
    labels: Option<String>,
    noise_var: Option<f64>,
    holdout: Option<f64>,
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = ExperimentConfig::default();
    let mut dataset: Option<String> = None;
    let mut data_dir: Option<PathBuf> = None;
    let mut synth = SynthFields::default();
    let mut penalty_key: Option<&'static str> = None;

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            ConfigError::new(
                line,
                format!("line {} is not of the form key = value", lineno + 1),
            )
        })?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "algorithm" => {
                cfg.algorithm = VariantKind::from_name(value)
                    .ok_or_else(|| ConfigError::new(key, format!("unknown algorithm `{value}`")))?;
            }
            "M" | "m" => cfg.m = num(key, value)?,
            "S" | "s" => cfg.s = num(key, value)?,
            "J" | "j" => cfg.j = num(key, value)?,
            "I" | "i" | "iterations" => cfg.i = num(key, value)?,
            "seed" => cfg.seed = num(key, value)?,
            "dataset" => dataset = Some(value.to_string()),
            "data_dir" => data_dir = Some(PathBuf::from(value)),
            "n" => synth.n = Some(num(key, value)?),
            "d" => synth.d = Some(num(key, value)?),
            "density" => synth.density = Some(real(key, value)?),
            "synth_labels" => synth.labels = Some(value.to_string()),
            "noise_var" => synth.noise_var = Some(real(key, value)?),
            "holdout" => synth.holdout = Some(real(key, value)?),
            "scaling" => {
                cfg.scaling = match value {
                    "none" => Scaling::None,
                    "approach1" => Scaling::Approach1,
                    "approach2" => Scaling::Approach2,
                    _ => return Err(ConfigError::new(key, format!("unknown scaling `{value}`"))),
                }
            }
            "partition" => {
                cfg.partition = match value {
                    "iid" => PartitionMode::Iid,
                    "noniid" | "non-iid" => PartitionMode::NonIid,
                    _ => {
                        return Err(ConfigError::new(
                            key,
                            format!("unknown partition `{value}`"),
                        ))
                    }
                }
            }
            "positive_digit" => cfg.positive_digit = num(key, value)?,
            "kappa" => cfg.kappa = real(key, value)?,
            "upsilon" => cfg.upsilon = real(key, value)?,
            "a" | "rho_mean" => {
                if let Some(prev) = penalty_key {
                    if prev != key {
                        return Err(ConfigError::new(
                            key,
                            format!("conflicts with `{prev}`; give only one"),
                        ));
                    }
                }
                let v = real(key, value)?;
                cfg.penalty = if key == "a" {
                    penalty_key = Some("a");
                    PenaltyRule::A(v)
                } else {
                    penalty_key = Some("rho_mean");
                    PenaltyRule::MeanRho(v)
                };
            }
            "tau0" => cfg.tau0 = real(key, value)?,
            "zeta0" => cfg.zeta0 = real(key, value)?,
            "mu_prime" => cfg.mu_prime = real(key, value)?,
            "gamma" => cfg.gamma = real(key, value)?,
            "eta" => cfg.eta = real(key, value)?,
            "mu" => cfg.mu = real(key, value)?,
            "beta" => cfg.beta = real(key, value)?,
            "server_shard_fraction" => cfg.server_shard_fraction = Some(real(key, value)?),
            "loss_scale" => {
                cfg.loss_scale = match value {
                    "sum" => LossScale::Sum,
                    "mean" => LossScale::Mean,
                    _ => {
                        return Err(ConfigError::new(
                            key,
                            format!("expected sum or mean, got `{value}`"),
                        ))
                    }
                }
            }
            "aggregate_literal" => cfg.aggregate_literal = boolean(key, value)?,
            "per_iteration_metrics" => cfg.per_iteration_metrics = boolean(key, value)?,
            "wall_clock" => cfg.wall_clock = boolean(key, value)?,
            _ => return Err(ConfigError::new(key, "unknown key")),
        }
    }

    let synthetic = match dataset.as_deref() {
        None | Some("mnist") => false,
        Some("synthetic") => true,
        Some(other) => {
            return Err(ConfigError::new(
                "dataset",
                format!("unknown dataset `{other}`"),
            ))
        }
    };
    if synthetic {
        let labels = match (synth.labels.as_deref(), synth.noise_var) {
            (None | Some("bernoulli"), None) => SynthLabels::Bernoulli,
            (None | Some("bernoulli"), Some(_)) => {
                return Err(ConfigError::new(
                    "noise_var",
                    "only applies to synth_labels = sign",
                ))
            }
            (Some("sign"), nv) => SynthLabels::Sign {
                noise_var: nv.unwrap_or(0.1),
            },
            (Some(other), _) => {
                return Err(ConfigError::new(
                    "synth_labels",
                    format!("unknown label rule `{other}`"),
                ))
            }
        };
        cfg.dataset = DatasetSpec::Synthetic {
            n: synth.n.unwrap_or(100),
            d: synth.d.unwrap_or(20_000),
            density: synth.density.unwrap_or(0.1),
            labels,
            holdout: synth.holdout.unwrap_or(0.2),
        };
        if data_dir.is_some() {
            return Err(ConfigError::new(
                "data_dir",
                "only applies to dataset = mnist",
            ));
        }
    } else {
        let given = [
            ("n", synth.n.is_some()),
            ("d", synth.d.is_some()),
            ("density", synth.density.is_some()),
            ("synth_labels", synth.labels.is_some()),
            ("noise_var", synth.noise_var.is_some()),
            ("holdout", synth.holdout.is_some()),
        ];
        if let Some((key, _)) = given.iter().find(|(_, set)| *set) {
            return Err(ConfigError::new(key, "only applies to dataset = synthetic"));
        }
        cfg.dataset = DatasetSpec::Mnist { dir: data_dir };
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.algorithm, VariantKind::FedTopAdmmI);
        assert_eq!((cfg.m, cfg.s, cfg.j), (200, 10, 10));
        assert_eq!(cfg.tau0, 1e-8);
        assert_eq!(cfg.zeta0, 2.5);
        assert_eq!(cfg.gamma, 1.999);
        assert_eq!(cfg.penalty, PenaltyRule::MeanRho(3.4035e-3));
    }

    #[test]
    fn selection_larger_than_population_names_s() {
        let err = parse_config("S = 300").unwrap_err();
        assert_eq!(err.key, "S");
    }

    #[test]
    fn exact_reals() {
        assert_eq!(parse_config("tau0 = 1e-8").unwrap().tau0, 1e-8);
        assert_eq!(
            parse_config("  kappa=0.25   # comment").unwrap().kappa,
            0.25
        );
    }

    #[test]
    fn errors_name_the_key() {
        assert_eq!(parse_config("bogus = 1").unwrap_err().key, "bogus");
        assert_eq!(parse_config("J = 0").unwrap_err().key, "J");
        assert_eq!(parse_config("gamma = x").unwrap_err().key, "gamma");
        assert_eq!(parse_config("tau0 = inf").unwrap_err().key, "tau0");
        assert_eq!(
            parse_config("a = 1\nrho_mean = 2").unwrap_err().key,
            "rho_mean"
        );
        assert_eq!(parse_config("density = 0.1").unwrap_err().key, "density");
        assert_eq!(
            parse_config("dataset = synthetic\nM = 10\nd = 5")
                .unwrap_err()
                .key,
            "d"
        );
    }

    #[test]
    fn synthetic_section() {
        let cfg = parse_config(
            "dataset = synthetic\nn = 20\nd = 400\nM = 10\nS = 10\nsynth_labels = sign",
        )
        .unwrap();
        assert_eq!(
            cfg.dataset,
            DatasetSpec::Synthetic {
                n: 20,
                d: 400,
                density: 0.1,
                labels: SynthLabels::Sign { noise_var: 0.1 },
                holdout: 0.2
            }
        );
    }

    #[test]
    fn text_round_trip() {
        let mut cfg =
            parse_config("dataset = synthetic\nM = 7\nS = 3\nupsilon = 0.01\na = 2.5").unwrap();
        cfg.server_shard_fraction = Some(0.125);
        assert_eq!(parse_config(&cfg.to_text()).unwrap(), cfg);
        let cfg = ExperimentConfig::default();
        assert_eq!(parse_config(&cfg.to_text()).unwrap(), cfg);
    }
}
