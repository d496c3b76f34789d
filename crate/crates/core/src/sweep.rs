//! Cross-product sweeps over `(alpha_dir, lambda, seed)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::federation::{run_config, ExecOptions};
use crate::metrics::MetricsRecord;

pub const THREADS_ENV: &str = "CFLSIM_THREADS";

/// Worker count from `CFLSIM_THREADS`, else the machine's parallelism.
pub fn threads_from_env() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub alpha_dir: f64,
    pub lambda: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub cell: SweepCell,
    pub error: String,
}

#[derive(Debug, Clone, Default)]
pub struct SweepOutcome {
    /// Successful runs in cell order.
    pub records: Vec<MetricsRecord>,
    pub failures: Vec<CellFailure>,
}

/// Cells ordered by alpha, then lambda, then seed.
pub fn sweep_cells(lambdas: &[f64], alpha_dirs: &[f64], seeds: &[u64]) -> Vec<SweepCell> {
    let mut cells = Vec::with_capacity(lambdas.len() * alpha_dirs.len() * seeds.len());
    for &alpha_dir in alpha_dirs {
        for &lambda in lambdas {
            for &seed in seeds {
                cells.push(SweepCell {
                    alpha_dir,
                    lambda,
                    seed,
                });
            }
        }
    }
    cells
}

pub fn cell_config(base: &ExperimentConfig, cell: SweepCell) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.run.alpha_dir = cell.alpha_dir;
    cfg.run.lambda = Some(cell.lambda);
    cfg.run.seed = cell.seed;
    cfg
}

/// Runs every cell independently on `threads` workers. A failing cell is
/// recorded and the remaining cells still run.
pub fn sweep(
    base: &ExperimentConfig,
    lambdas: &[f64],
    alpha_dirs: &[f64],
    seeds: &[u64],
    threads: usize,
) -> Result<SweepOutcome> {
    if lambdas.is_empty() {
        return Err(Error::config("lambda", "sweep grid is empty"));
    }
    if alpha_dirs.is_empty() {
        return Err(Error::config("alpha_dir", "sweep grid is empty"));
    }
    if seeds.is_empty() {
        return Err(Error::config("seed", "sweep grid is empty"));
    }
    let cells = sweep_cells(lambdas, alpha_dirs, seeds);
    let run = |cell: &SweepCell| {
        run_config(&cell_config(base, *cell), ExecOptions { threads: 1 }).map(|o| o.record)
    };
    let results: Vec<Result<MetricsRecord>> = if threads > 1 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Protocol(format!("thread pool: {e}")))?
            .install(|| cells.par_iter().map(run).collect())
    } else {
        cells.iter().map(run).collect()
    };

    let mut out = SweepOutcome::default();
    for (cell, res) in cells.into_iter().zip(results) {
        match res {
            Ok(r) => out.records.push(r),
            Err(e) => out.failures.push(CellFailure {
                cell,
                error: e.to_string(),
            }),
        }
    }
    Ok(out)
}
