//! Mean ± std tables over records grouped by `(algo, alpha_dir, lambda)`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::config::Algo;
use crate::error::Result;
use crate::metrics::MetricsRecord;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub algo: Algo,
    pub alpha_dir: f64,
    pub lambda: Option<f64>,
    pub n_seeds: usize,
    pub final_acc: Stat,
    pub avg_acc: Stat,
    pub forgetting: Stat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

/// Rows sorted by algorithm, then alpha, then lambda.
pub fn summarize(records: &[MetricsRecord]) -> Vec<ReportRow> {
    // f64 keys via their bit patterns; all values here are finite
    type Key = (Algo, u64, Option<u64>);
    let mut groups: BTreeMap<Key, Vec<&MetricsRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.algo, r.alpha_dir.to_bits(), r.lambda.map(f64::to_bits)))
            .or_default()
            .push(r);
    }
    let mut rows: Vec<ReportRow> = groups
        .into_values()
        .map(|g| {
            let col = |f: fn(&MetricsRecord) -> f64| Stat::of(&g.iter().map(|r| f(r)).collect::<Vec<_>>());
            ReportRow {
                algo: g[0].algo,
                alpha_dir: g[0].alpha_dir,
                lambda: g[0].lambda,
                n_seeds: g.len(),
                final_acc: col(|r| r.final_acc),
                avg_acc: col(|r| r.avg_acc),
                forgetting: col(|r| r.forgetting),
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        a.algo
            .cmp(&b.algo)
            .then(a.alpha_dir.total_cmp(&b.alpha_dir))
            .then(a.lambda.unwrap_or(-1.0).total_cmp(&b.lambda.unwrap_or(-1.0)))
    });
    rows
}

fn lambda_cell(l: Option<f64>) -> String {
    l.map(|l| l.to_string()).unwrap_or_else(|| "-".into())
}

pub fn render(rows: &[ReportRow], format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record([
                "algo",
                "alpha_dir",
                "lambda",
                "n_seeds",
                "final_acc_mean",
                "final_acc_std",
                "avg_acc_mean",
                "avg_acc_std",
                "forgetting_mean",
                "forgetting_std",
            ])?;
            for r in rows {
                w.write_record([
                    r.algo.name().to_string(),
                    r.alpha_dir.to_string(),
                    r.lambda.map(|l| l.to_string()).unwrap_or_default(),
                    r.n_seeds.to_string(),
                    r.final_acc.mean.to_string(),
                    r.final_acc.std.to_string(),
                    r.avg_acc.mean.to_string(),
                    r.avg_acc.std.to_string(),
                    r.forgetting.mean.to_string(),
                    r.forgetting.std.to_string(),
                ])?;
            }
            let bytes = w
                .into_inner()
                .map_err(|e| crate::error::Error::Serde(e.to_string()))?;
            Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
        }
        ReportFormat::Markdown => {
            let pct = |s: Stat| format!("{:.2} ± {:.2}", 100.0 * s.mean, 100.0 * s.std);
            let mut out = String::new();
            out.push_str("| algo | alpha_dir | lambda | seeds | A(f) % | Ā % | forgetting % |\n");
            out.push_str("|---|---|---|---|---|---|---|\n");
            for r in rows {
                let _ = writeln!(
                    out,
                    "| {} | {} | {} | {} | {} | {} | {} |",
                    r.algo,
                    r.alpha_dir,
                    lambda_cell(r.lambda),
                    r.n_seeds,
                    pct(r.final_acc),
                    pct(r.avg_acc),
                    pct(r.forgetting)
                );
            }
            Ok(out)
        }
    }
}
