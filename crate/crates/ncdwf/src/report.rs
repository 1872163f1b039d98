//! Run outputs other than checkpoints: training log, metrics reports,
//! per-sample predictions and the run manifest.

use std::io::Write;
use std::path::{Path, PathBuf};

use ncdwf_core::evaluation::{MetricsReport, SamplePrediction};
use ncdwf_core::kci::Route;
use ncdwf_core::trainer::EpochRecord;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const PREDICTIONS: &str = "predictions.csv";
pub const PHASE1_CKPT: &str = "phase1.ckpt";
pub const PHASE2_CKPT: &str = "phase2.ckpt";

/// Version tags recorded in every manifest.
pub const FORMAT_VERSIONS: [(&str, &str); 4] = [
    ("checkpoint", crate::checkpoint::HEADER),
    ("dataset_csv", "feat_0..feat_{d-1},label"),
    ("predictions_csv", "sample_id,true_label,route,pred_label,kci_score"),
    ("train_log", "jsonl v1"),
];

/// One training-log line: an epoch record tagged with its phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub phase: u8,
    #[serde(flatten)]
    pub record: EpochRecord,
}

pub fn write_train_log(path: &Path, lines: &[LogLine]) -> Result<()> {
    let mut out = Vec::new();
    for l in lines {
        serde_json::to_writer(&mut out, l)?;
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(Error::io(path))
}

/// Appends to an existing log.
pub fn append_train_log(path: &Path, lines: &[LogLine]) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(Error::io(path))?;
    for l in lines {
        let mut s = serde_json::to_string(l)?;
        s.push('\n');
        f.write_all(s.as_bytes()).map_err(Error::io(path))?;
    }
    Ok(())
}

pub fn read_train_log(path: &Path) -> Result<Vec<LogLine>> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// `report_task_aware.json`, or `report_generalized_tau<τ>.json`.
pub fn report_file_name(report: &MetricsReport) -> String {
    match report.tau {
        None => "report_task_aware.json".into(),
        Some(t) => format!("report_generalized_tau{t}.json"),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s).map_err(Error::io(path))
}

pub fn read_report(path: &Path) -> Result<MetricsReport> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    Ok(serde_json::from_str(&text)?)
}

fn route_name(r: Route) -> &'static str {
    match r {
        Route::LabeledHead => "labeled",
        Route::UnlabeledHead => "unlabeled",
    }
}

pub fn write_predictions(path: &Path, rows: &[SamplePrediction]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let csv_err = |e: csv::Error| Error::Config(format!("{}: {e}", path.display()));
    w.write_record(["sample_id", "true_label", "route", "pred_label", "kci_score"])
        .map_err(csv_err)?;
    for r in rows {
        let score = r.kci_score.map(|s| s.to_string()).unwrap_or_default();
        w.write_record([
            r.sample_id.to_string(),
            r.true_label.to_string(),
            route_name(r.route).to_string(),
            r.pred_label.to_string(),
            score,
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(Error::io(path))
}

pub fn read_predictions(path: &Path) -> Result<Vec<SamplePrediction>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let err = |msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: msg.to_string(),
        };
        if rec.len() != 5 {
            return Err(err("expected 5 fields"));
        }
        let int = |i: usize| rec[i].parse::<usize>().map_err(|_| err("bad integer"));
        let route = match &rec[2] {
            "labeled" => Route::LabeledHead,
            "unlabeled" => Route::UnlabeledHead,
            _ => return Err(err("route must be labeled or unlabeled")),
        };
        let kci_score = if rec[4].is_empty() {
            None
        } else {
            Some(rec[4].parse::<f64>().map_err(|_| err("bad score"))?)
        };
        rows.push(SamplePrediction {
            sample_id: int(0)?,
            true_label: int(1)?,
            route,
            pred_label: int(3)?,
            kci_score,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub formats: std::collections::BTreeMap<String, String>,
    pub artifacts: Vec<Artifact>,
    /// The fully resolved config; re-running with it reproduces the run.
    pub config: RunConfig,
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig, files: &[PathBuf]) -> Result<Self> {
        let mut artifacts = Vec::with_capacity(files.len());
        for f in files {
            artifacts.push(Artifact {
                file: f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
                sha256: file_sha256(f)?,
            });
        }
        Ok(Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed: config.seed,
            config_hash: config.hash(),
            formats: FORMAT_VERSIONS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            artifacts,
            config: config.clone(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Ok(serde_json::from_str(&text)?)
    }
}
