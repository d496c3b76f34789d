//! Experiment configuration.
//!
//! A config file is a single TOML document with a `[run]` table (federation
//! and optimisation settings) and a `[stream]` table (which task stream to
//! train on). Parsing is strict: unknown keys are rejected, and every
//! algorithm-specific field is checked against the chosen algorithm. The
//! only defaults applied are the ones documented on each field below.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datagen::{
    gen_class_il_stream, gen_domain_il_stream, load_csv_batch, SyntheticSpec, Task, TaskKind,
    TaskStream, DEFAULT_PARTITION_RETRIES,
};
use crate::error::{Error, Result};
use crate::nn::{LrSchedule, OptimizerKind};
use crate::psm::q_of_lambda;
use crate::regularizers::DEFAULT_SI_EPS;
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Algo {
    #[serde(rename = "fedavg", alias = "FedAvg")]
    FedAvg,
    #[serde(rename = "fedprox", alias = "FedProx")]
    FedProx,
    #[serde(rename = "fl_ewc", alias = "FlEwc")]
    FlEwc,
    #[serde(rename = "fl_si", alias = "FlSi")]
    FlSi,
    #[serde(rename = "fedssi", alias = "FedSsi")]
    FedSsi,
}

impl Algo {
    pub const ALL: [Algo; 5] = [Algo::FedAvg, Algo::FedProx, Algo::FlEwc, Algo::FlSi, Algo::FedSsi];

    pub fn name(self) -> &'static str {
        match self {
            Algo::FedAvg => "fedavg",
            Algo::FedProx => "fedprox",
            Algo::FlEwc => "fl_ewc",
            Algo::FlSi => "fl_si",
            Algo::FedSsi => "fedssi",
        }
    }

    pub fn uses_si(self) -> bool {
        matches!(self, Algo::FlSi | Algo::FedSsi)
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace(['-', '+'], "_");
        match norm.as_str() {
            "fedavg" => Ok(Algo::FedAvg),
            "fedprox" => Ok(Algo::FedProx),
            "fl_ewc" | "flewc" => Ok(Algo::FlEwc),
            "fl_si" | "flsi" => Ok(Algo::FlSi),
            "fedssi" => Ok(Algo::FedSsi),
            _ => Err(Error::config(
                "algo",
                format!("unknown algorithm {s:?}; expected one of fedavg, fedprox, fl_ewc, fl_si, fedssi"),
            )),
        }
    }
}

/// Surrogate-model settings for FedSSI. Unset fields fall back to the run's
/// `lr`, `batch_size`, and an iteration budget of 1/40 of one task's local
/// steps.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PsmSettings {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
}

fn default_eps() -> f64 {
    DEFAULT_SI_EPS
}
fn default_hidden() -> Vec<usize> {
    vec![64]
}
fn default_ewc_samples() -> usize {
    200
}
fn default_partition_retries() -> usize {
    DEFAULT_PARTITION_RETRIES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub n_clients: usize,
    pub rounds_per_task: usize,
    pub local_epochs: usize,
    pub select_ratio: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub algo: Algo,
    /// Penalty scale for fl_ewc, fl_si and fedssi.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reg_strength: Option<f64>,
    /// Proximal coefficient for fedprox.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prox_mu: Option<f64>,
    /// Surrogate mixing weight for fedssi, in (0, 1).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// Importance damping; default 1e-3.
    #[serde(default = "default_eps")]
    pub eps: f64,
    pub alpha_dir: f64,
    pub seed: u64,
    /// Hidden layer widths; default `[64]`.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub psm: PsmSettings,
    /// Default plain SGD.
    #[serde(default)]
    pub optimizer: OptimizerKind,
    /// Default constant.
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    /// Examples per Fisher estimate for fl_ewc; default 200.
    #[serde(default = "default_ewc_samples")]
    pub ewc_samples: usize,
    /// Count the jump to the freshly aggregated model as part of the fl_si
    /// path integral; default false.
    #[serde(default)]
    pub si_count_aggregation_jumps: bool,
    /// Run task boundaries only on clients selected during the outgoing task;
    /// default false (all clients).
    #[serde(default)]
    pub boundary_selected_only: bool,
    /// Evaluate the global model after every round; default false.
    #[serde(default)]
    pub per_round_eval: bool,
    /// Dirichlet re-draw budget; default 1000.
    #[serde(default = "default_partition_retries")]
    pub partition_retries: usize,
}

fn finite_positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(field, format!("must be a positive finite number, got {v}")))
    }
}

fn finite_non_negative(field: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(field, format!("must be a finite number >= 0, got {v}")))
    }
}

fn at_least_one(field: &str, v: usize) -> Result<()> {
    if v >= 1 {
        Ok(())
    } else {
        Err(Error::config(field, "must be >= 1"))
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        at_least_one("n_clients", self.n_clients)?;
        at_least_one("rounds_per_task", self.rounds_per_task)?;
        at_least_one("local_epochs", self.local_epochs)?;
        at_least_one("batch_size", self.batch_size)?;
        at_least_one("ewc_samples", self.ewc_samples)?;
        at_least_one("partition_retries", self.partition_retries)?;
        if !(self.select_ratio > 0.0 && self.select_ratio <= 1.0) {
            return Err(Error::config(
                "select_ratio",
                format!("must lie in (0, 1], got {}", self.select_ratio),
            ));
        }
        finite_positive("lr", self.lr)?;
        finite_positive("eps", self.eps)?;
        finite_positive("alpha_dir", self.alpha_dir)?;
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden", "layer widths must be >= 1"));
        }
        if let LrSchedule::Linear { end_factor } = self.lr_schedule {
            if !(0.0..=1.0).contains(&end_factor) {
                return Err(Error::config(
                    "lr_schedule.end_factor",
                    format!("must lie in [0, 1], got {end_factor}"),
                ));
            }
        }
        if let OptimizerKind::Adam { beta1, beta2, eps } = self.optimizer {
            for (f, b) in [("optimizer.beta1", beta1), ("optimizer.beta2", beta2)] {
                if !(0.0..1.0).contains(&b) {
                    return Err(Error::config(f, format!("must lie in [0, 1), got {b}")));
                }
            }
            finite_positive("optimizer.eps", eps)?;
        }
        match self.algo {
            Algo::FedAvg => {}
            Algo::FedProx => {
                let mu = self
                    .prox_mu
                    .ok_or_else(|| Error::config("prox_mu", "required when algo = fedprox"))?;
                finite_non_negative("prox_mu", mu)?;
            }
            Algo::FlEwc | Algo::FlSi | Algo::FedSsi => {
                let r = self.reg_strength.ok_or_else(|| {
                    Error::config("reg_strength", format!("required when algo = {}", self.algo))
                })?;
                finite_non_negative("reg_strength", r)?;
            }
        }
        if self.algo == Algo::FedSsi {
            let l = self
                .lambda
                .ok_or_else(|| Error::config("lambda", "required when algo = fedssi"))?;
            q_of_lambda(l)?;
            if let Some(eta) = self.psm.eta {
                finite_non_negative("psm.eta", eta)?;
            }
            if let Some(i) = self.psm.iters {
                at_least_one("psm.iters", i)?;
            }
            if let Some(b) = self.psm.batch_size {
                at_least_one("psm.batch_size", b)?;
            }
        }
        Ok(())
    }

    /// Clients sampled per round: `ceil(select_ratio * n_clients)`.
    pub fn clients_per_round(&self) -> usize {
        ((self.select_ratio * self.n_clients as f64 - 1e-9).ceil() as usize).clamp(1, self.n_clients)
    }

    pub fn reg(&self) -> f64 {
        self.reg_strength.unwrap_or(0.0)
    }

    pub fn mu(&self) -> f64 {
        self.prox_mu.unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvTaskFiles {
    pub train: PathBuf,
    pub test: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StreamConfig {
    ClassIl(SyntheticSpec),
    DomainIl(SyntheticSpec),
    Csv(CsvStream),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvStream {
    pub scenario: TaskKind,
    pub feature_dim: usize,
    pub n_classes: usize,
    pub tasks: Vec<CsvTaskFiles>,
}

const STREAM_STREAM: u64 = 0x5354;

impl StreamConfig {
    pub fn feature_dim(&self) -> usize {
        match self {
            StreamConfig::ClassIl(s) | StreamConfig::DomainIl(s) => s.feature_dim,
            StreamConfig::Csv(c) => c.feature_dim,
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            StreamConfig::ClassIl(s) | StreamConfig::DomainIl(s) => s.total_classes,
            StreamConfig::Csv(c) => c.n_classes,
        }
    }

    /// Materialises the stream. Synthetic data is seeded from `seed`; CSV
    /// paths resolve relative to `base_dir`.
    pub fn build(&self, seed: u64, base_dir: &Path) -> Result<TaskStream> {
        let data_seed = derive_seed(seed, &[STREAM_STREAM]);
        let stream = match self {
            StreamConfig::ClassIl(s) => gen_class_il_stream(s, data_seed)?,
            StreamConfig::DomainIl(s) => gen_domain_il_stream(s, data_seed)?,
            StreamConfig::Csv(c) => {
                if c.tasks.is_empty() {
                    return Err(Error::config("stream.tasks", "at least one task is required"));
                }
                let tasks = c
                    .tasks
                    .iter()
                    .enumerate()
                    .map(|(t, files)| {
                        let train = load_csv_batch(base_dir.join(&files.train), c.feature_dim, c.n_classes)?;
                        let test = load_csv_batch(base_dir.join(&files.test), c.feature_dim, c.n_classes)?;
                        let classes_present = train.labels().iter().copied().collect();
                        Ok(Task {
                            task_id: t,
                            train,
                            test,
                            classes_present,
                            kind: c.scenario,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                TaskStream {
                    kind: c.scenario,
                    n_classes: c.n_classes,
                    feature_dim: c.feature_dim,
                    tasks,
                }
            }
        };
        stream.validate()?;
        Ok(stream)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    pub stream: StreamConfig,
    /// Directory CSV paths are resolved against; set by [`load_config`].
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.run.validate()?;
        if let StreamConfig::ClassIl(s) | StreamConfig::DomainIl(s) = &self.stream {
            s.validate()?;
        }
        Ok(())
    }

    /// `[feature_dim, hidden..., n_classes]`.
    pub fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(self.stream.feature_dim())
            .chain(self.run.hidden.iter().copied())
            .chain(std::iter::once(self.stream.n_classes()))
            .collect()
    }

    pub fn build_stream(&self) -> Result<TaskStream> {
        self.stream.build(self.run.seed, &self.base_dir)
    }

    /// Stable digest of the run + stream settings.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let canonical = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&canonical))
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
        let field = e
            .message()
            .split('`')
            .nth(1)
            .unwrap_or("<document>")
            .to_string();
        Error::config(field, e.to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = parse_config(&text)?;
    cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(cfg)
}

pub fn to_toml(cfg: &ExperimentConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Serde(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
[run]
n_clients = 4
rounds_per_task = 2
local_epochs = 1
select_ratio = 0.5
lr = 0.05
batch_size = 16
algo = "fedssi"
reg_strength = 1.0
lambda = 0.5
alpha_dir = 1.0
seed = 3

[stream]
kind = "class_il"
feature_dim = 5
total_classes = 4
n_tasks = 2
samples_per_class_train = 10
samples_per_class_test = 5
cluster_spread = 1.0
"#;

    #[test]
    fn parses_with_documented_defaults() {
        let cfg = parse_config(BASE).unwrap();
        assert_eq!(cfg.run.algo, Algo::FedSsi);
        assert_eq!(cfg.run.eps, 1e-3);
        assert_eq!(cfg.run.hidden, vec![64]);
        assert_eq!(cfg.run.partition_retries, 1000);
        assert_eq!(cfg.run.optimizer, OptimizerKind::Sgd);
        assert_eq!(cfg.layer_dims(), vec![5, 64, 4]);
        assert_eq!(cfg.run.clients_per_round(), 2);
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = parse_config(BASE).unwrap();
        let again = parse_config(&to_toml(&cfg).unwrap()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn rejects_unknown_fields() {
        let text = BASE.replace("seed = 3", "seed = 3\nlearning_rate = 0.1");
        match parse_config(&text) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "learning_rate"),
            other => panic!("expected config error, got {other:?}"),
        }
        let text = BASE.replace("cluster_spread = 1.0", "cluster_spread = 1.0\nspread = 2");
        assert!(parse_config(&text).is_err());
    }

    #[test]
    fn fedssi_requires_lambda() {
        let text = BASE.replace("lambda = 0.5\n", "");
        match parse_config(&text) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "lambda"),
            other => panic!("expected config error, got {other:?}"),
        }
        let text = BASE.replace("lambda = 0.5", "lambda = 1.0");
        assert!(matches!(parse_config(&text), Err(Error::Config { field, .. }) if field == "lambda"));
    }

    #[test]
    fn algorithm_specific_fields_are_checked() {
        let prox = BASE.replace("\"fedssi\"", "\"fedprox\"");
        assert!(matches!(parse_config(&prox), Err(Error::Config { field, .. }) if field == "prox_mu"));
        let si = BASE.replace("\"fedssi\"", "\"fl_si\"").replace("reg_strength = 1.0\n", "");
        assert!(matches!(parse_config(&si), Err(Error::Config { field, .. }) if field == "reg_strength"));
        let avg = BASE.replace("\"fedssi\"", "\"fedavg\"");
        parse_config(&avg).unwrap();
    }

    #[test]
    fn range_checks_name_the_field() {
        for (from, to, field) in [
            ("select_ratio = 0.5", "select_ratio = 0.0", "select_ratio"),
            ("lr = 0.05", "lr = -1.0", "lr"),
            ("alpha_dir = 1.0", "alpha_dir = 0.0", "alpha_dir"),
            ("n_clients = 4", "n_clients = 0", "n_clients"),
        ] {
            match parse_config(&BASE.replace(from, to)) {
                Err(Error::Config { field: f, .. }) => assert_eq!(f, field),
                other => panic!("{to}: expected config error, got {other:?}"),
            }
        }
    }

    #[test]
    fn algo_names_parse() {
        assert_eq!("FedSSI".parse::<Algo>().unwrap(), Algo::FedSsi);
        assert_eq!("fl+si".parse::<Algo>().unwrap(), Algo::FlSi);
        assert_eq!("FL-EWC".parse::<Algo>().unwrap(), Algo::FlEwc);
        assert!("sgd".parse::<Algo>().is_err());
    }

    #[test]
    fn selection_size_bounds() {
        let mut cfg = parse_config(BASE).unwrap().run;
        cfg.n_clients = 20;
        cfg.select_ratio = 0.4;
        assert_eq!(cfg.clients_per_round(), 8);
        cfg.select_ratio = 1.0;
        assert_eq!(cfg.clients_per_round(), 20);
        cfg.select_ratio = 0.01;
        assert_eq!(cfg.clients_per_round(), 1);
        cfg.n_clients = 10;
        cfg.select_ratio = 0.7;
        assert_eq!(cfg.clients_per_round(), 7);
    }
}
