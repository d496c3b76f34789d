//! Result persistence: an append-only JSON-lines record file, a summary CSV
//! regenerated from it, and a manifest describing how the records were made.

use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;

pub const RECORDS_FILE: &str = "records.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub lambdas: Vec<f64>,
    pub alpha_dirs: Vec<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepGrid>,
    pub software_version: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

impl RunManifest {
    pub fn new(config: ExperimentConfig, sweep: Option<SweepGrid>) -> Self {
        Self {
            config,
            sweep,
            software_version: format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResultPaths {
    pub records: PathBuf,
    pub summary: PathBuf,
    pub manifest: PathBuf,
}

/// Appends `records` to the record file in `out_dir`, rewrites the summary
/// CSV from every record in that file and writes the manifest.
pub fn write_results(
    records: &[MetricsRecord],
    manifest: &RunManifest,
    out_dir: impl AsRef<Path>,
) -> Result<ResultPaths> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = ResultPaths {
        records: dir.join(RECORDS_FILE),
        summary: dir.join(SUMMARY_FILE),
        manifest: dir.join(MANIFEST_FILE),
    };

    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&paths.records)
        .map_err(|e| Error::io(&paths.records, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&paths.records, e))?;
    drop(f);

    write_summary(&read_records(&paths.records)?, &paths.summary)?;

    let json = serde_json::to_string_pretty(manifest)?;
    fs::write(&paths.manifest, json).map_err(|e| Error::io(&paths.manifest, e))?;
    Ok(paths)
}

pub fn write_summary(records: &[MetricsRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "algo",
        "alpha_dir",
        "lambda",
        "seed",
        "final_acc",
        "avg_acc",
        "forgetting",
        "wall_ms",
    ])?;
    for r in records {
        w.write_record([
            r.algo.name().to_string(),
            r.alpha_dir.to_string(),
            r.lambda.map(|l| l.to_string()).unwrap_or_default(),
            r.seed.to_string(),
            r.final_acc.to_string(),
            r.avg_acc.to_string(),
            r.forgetting.to_string(),
            r.wall_ms.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a JSON-lines record file; blank lines are skipped.
pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Serde(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<RunManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// SHA-256 over the record lines with `wall_ms` zeroed.
pub fn determinism_hash(records: &[MetricsRecord]) -> Result<String> {
    let mut h = Sha256::new();
    for r in records {
        h.update(serde_json::to_vec(&r.without_timing())?);
        h.update(b"\n");
    }
    Ok(hex::encode(h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Algo;
    use crate::metrics::AccuracyMatrix;

    fn record(seed: u64, wall_ms: u64) -> MetricsRecord {
        MetricsRecord {
            algo: Algo::FedSsi,
            alpha_dir: 0.1,
            lambda: Some(0.5),
            seed,
            matrix: AccuracyMatrix::from_rows(vec![vec![0.9], vec![0.4, 0.8]]).unwrap(),
            final_acc: 0.6,
            avg_acc: 0.75,
            forgetting: 0.5,
            rounds_to_best: Some(vec![3, 7]),
            config_digest: "abc".into(),
            wall_ms,
        }
    }

    #[test]
    fn hash_ignores_wall_time_only() {
        let a = determinism_hash(&[record(1, 10)]).unwrap();
        assert_eq!(a, determinism_hash(&[record(1, 99)]).unwrap());
        assert_ne!(a, determinism_hash(&[record(2, 10)]).unwrap());
    }

    #[test]
    fn read_skips_blank_lines_and_reports_bad_ones() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.jsonl");
        let line = serde_json::to_string(&record(1, 0)).unwrap();
        fs::write(&p, format!("{line}\n\n{line}\n")).unwrap();
        assert_eq!(read_records(&p).unwrap().len(), 2);
        fs::write(&p, format!("{line}\nnot json\n")).unwrap();
        let err = read_records(&p).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
    }
}
