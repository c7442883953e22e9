//! On-disk formats of a run directory.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{hex, ExperimentConfig};
use crate::error::{Error, Result};
use crate::objectives::{EvalRecord, EvalRow};
use crate::optimizer::IterationLog;
use crate::pareto::Normalizer;
use crate::seed::SeedStreams;

pub const MANIFEST: &str = "manifest.json";
pub const EVALUATIONS: &str = "evaluations.jsonl";
pub const PARETO: &str = "pareto.csv";
pub const HV_CURVE: &str = "hv_curve.csv";
pub const BASELINE_DIR: &str = "baselines";
pub const PLOT_DIR: &str = "plots";
pub const SNR_SWEEP: &str = "snr_sweep.csv";
pub const PRIVACY: &str = "privacy.csv";
pub const PRIVACY_SUMMARY: &str = "privacy_summary.json";
pub const MANIFEST_FORMAT: &str = "tokmerge-run";

/// Version string of this build.
pub fn tool_version() -> String {
    format!("tokmerge v{}", env!("CARGO_PKG_VERSION"))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn require(path: &Path) -> Result<PathBuf> {
    if path.exists() {
        Ok(path.to_path_buf())
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub search_seconds: f64,
    pub reevaluation_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub tool_version: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub seeds: SeedStreams,
    pub normalizer: Normalizer,
    pub n_records: usize,
    /// Indices into the evaluation file of the non-dominated records.
    pub pareto_ids: Vec<usize>,
    pub hv_final: f64,
    /// Surrogate hyperparameters per search iteration.
    pub iterations: Vec<IterationLog>,
    pub timing: Timing,
}

impl RunManifest {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = require(&run_dir.join(MANIFEST))?;
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::Config(format!("{} is not a run manifest", path.display())));
        }
        Ok(m)
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let path = run_dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

/// Streams evaluation rows to a JSON-lines file as they arrive.
pub struct JsonlWriter {
    path: PathBuf,
    out: BufWriter<File>,
    wall_time: bool,
}

impl JsonlWriter {
    pub fn create(path: &Path, wall_time: bool) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(f),
            wall_time,
        })
    }

    pub fn append(&mut self, r: &EvalRecord) -> Result<()> {
        let line = serde_json::to_string(&EvalRow::from_record(r, self.wall_time))?;
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))?;
        // flush per row so a crash leaves every completed evaluation on disk
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_jsonl(path: &Path) -> Result<Vec<EvalRecord>> {
    let path = require(path)?;
    let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: EvalRow = serde_json::from_str(&line)
            .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(row.to_record()?);
    }
    Ok(out)
}

/// One row of `pareto.csv`: a non-dominated policy with its search-subset
/// objectives and its re-evaluation on the full evaluation split.
#[derive(Debug, Clone, PartialEq)]
pub struct ParetoRow {
    pub id: usize,
    pub accuracy: f64,
    pub gflops: f64,
    pub comm_cost: f64,
    pub search_accuracy: f64,
    pub search_gflops: f64,
    pub search_comm_cost: f64,
    pub thresholds: Vec<f64>,
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    csv::Writer::from_path(path).map_err(Error::from)
}

pub fn num(v: f64) -> String {
    format!("{v}")
}

pub fn write_pareto(path: &Path, rows: &[ParetoRow], layers: usize) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header: Vec<String> = [
        "id",
        "A",
        "F_gflops",
        "C_tokens",
        "A_search",
        "F_gflops_search",
        "C_tokens_search",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((1..=layers).map(|l| format!("tau_{l}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.id.to_string(),
            num(r.accuracy),
            num(r.gflops),
            num(r.comm_cost),
            num(r.search_accuracy),
            num(r.search_gflops),
            num(r.search_comm_cost),
        ];
        rec.extend(r.thresholds.iter().map(|&t| num(t)));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn parse_f64(s: &str, path: &Path) -> Result<f64> {
    s.parse()
        .map_err(|_| Error::Config(format!("{}: `{s}` is not a number", path.display())))
}

pub fn read_pareto(path: &Path) -> Result<Vec<ParetoRow>> {
    let path = require(path)?;
    let mut rdr = csv::Reader::from_path(&path)?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() < 7 {
            return Err(Error::Config(format!("{}: short row", path.display())));
        }
        let f = |i: usize| parse_f64(&rec[i], &path);
        rows.push(ParetoRow {
            id: rec[0]
                .parse()
                .map_err(|_| Error::Config(format!("{}: bad id `{}`", path.display(), &rec[0])))?,
            accuracy: f(1)?,
            gflops: f(2)?,
            comm_cost: f(3)?,
            search_accuracy: f(4)?,
            search_gflops: f(5)?,
            search_comm_cost: f(6)?,
            thresholds: (7..rec.len()).map(f).collect::<Result<_>>()?,
        });
    }
    Ok(rows)
}

pub fn write_hv_curve(path: &Path, hv: &[f64]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["evaluation", "hv"])?;
    for (i, h) in hv.iter().enumerate() {
        w.write_record([(i + 1).to_string(), num(*h)])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_hv_curve(path: &Path) -> Result<Vec<f64>> {
    let path = require(path)?;
    let mut rdr = csv::Reader::from_path(&path)?;
    rdr.records().map(|r| parse_f64(&r?[1], &path)).collect()
}

/// Writes a CSV from a header and string rows.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Short stable key of a threshold vector.
pub fn policy_hash(thresholds: &[f64]) -> String {
    let json = serde_json::to_vec(thresholds).expect("floats serialize");
    hex(&Sha256::digest(&json)[..8])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pareto_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(PARETO);
        let rows = vec![ParetoRow {
            id: 3,
            accuracy: 0.9,
            gflops: 0.0021,
            comm_cost: 5.5,
            search_accuracy: 0.91,
            search_gflops: 0.0022,
            search_comm_cost: 5.25,
            thresholds: vec![0.5, 0.75, 1.0],
        }];
        write_pareto(&p, &rows, 3).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("id,A,F_gflops,C_tokens,A_search,F_gflops_search,C_tokens_search,tau_1,tau_2,tau_3\n"));
        assert_eq!(read_pareto(&p).unwrap(), rows);
    }

    #[test]
    fn missing_artifacts_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_pareto(&dir.path().join("nope.csv")), Err(Error::MissingArtifact(_))));
        assert!(matches!(RunManifest::load(dir.path()), Err(Error::MissingArtifact(_))));
    }

    #[test]
    fn policy_hash_is_stable() {
        assert_eq!(policy_hash(&[0.5, 1.0]), policy_hash(&[0.5, 1.0]));
        assert_ne!(policy_hash(&[0.5, 1.0]), policy_hash(&[1.0, 0.5]));
        assert_eq!(policy_hash(&[0.5]).len(), 16);
    }
}
