//! Continual federated learning simulator.
//!
//! A from-scratch MLP, synthetic class- and domain-incremental task streams,
//! Dirichlet non-IID partitioning, and a round/task engine running FedAvg,
//! FedProx, federated EWC, federated SI and FedSSI (SI with a personalized
//! surrogate model computing parameter contributions at task boundaries).

pub mod config;
pub mod datagen;
pub mod error;
pub mod federation;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod psm;
pub mod regularizers;
pub mod report;
pub mod seed;
pub mod sweep;

pub use config::{load_config, parse_config, Algo, ExperimentConfig, RunConfig, StreamConfig};
pub use datagen::{dirichlet_partition, gen_class_il_stream, gen_domain_il_stream, Partition, SyntheticSpec, TaskStream};
pub use error::{Error, Result};
pub use federation::{aggregate, run_config, run_experiment, run_experiment_with, select_clients, ExecOptions, RunOutcome};
pub use metrics::{AccuracyMatrix, MetricsRecord};
pub use nn::{init_model, Batch, Matrix, MlpModel};
pub use params::ParamVector;
