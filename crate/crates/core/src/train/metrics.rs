//! Line-delimited JSON metric logs.
//!
//! The first line is `{"schema":"nitp-metrics","version":1}`; every further
//! line is one [`MetricsRecord`].

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probes::GeometrySnapshot;

pub const SCHEMA: &str = "nitp-metrics";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    schema: String,
    version: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub step: usize,
    pub lr: f64,
    pub ntp_loss: f64,
    /// `None` when the auxiliary term is off at this step.
    pub nitp_loss: Option<f64>,
    pub total_loss: f64,
    /// Before clipping.
    pub grad_norm: f64,
    /// Mean cosine between predictions and targets over the batch.
    pub cosine_alignment: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effective_rank: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub avg_cosine: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_tokens: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_pairs: Option<usize>,
    /// Mean router entropy over MoE layers; absent for dense models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub router_entropy: Option<f64>,
}

impl MetricsRecord {
    pub fn attach(&mut self, snap: &GeometrySnapshot) {
        self.effective_rank = Some(snap.effective_rank);
        self.avg_cosine = Some(snap.avg_cosine);
        self.num_tokens = Some(snap.num_tokens);
        self.num_pairs = Some(snap.num_pairs);
    }

    pub fn has_snapshot(&self) -> bool {
        self.effective_rank.is_some()
    }
}

pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
    last_step: Option<usize>,
}

impl MetricsWriter {
    /// Starts a fresh log, replacing any file at `path`.
    pub fn create(path: &Path) -> Result<Self> {
        Self::with_records(path, &[])
    }

    /// Rewrites `path` with the header and `keep`, then appends after them.
    pub fn with_records(path: &Path, keep: &[MetricsRecord]) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = MetricsWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            last_step: None,
        };
        let header = Header {
            schema: SCHEMA.into(),
            version: VERSION,
        };
        w.line(&serde_json::to_string(&header)?)?;
        for r in keep {
            w.append(r)?;
        }
        Ok(w)
    }

    /// Reopens an existing log, dropping records at or after `from_step`.
    pub fn resume(path: &Path, from_step: usize) -> Result<Self> {
        let kept: Vec<MetricsRecord> = read_metrics(path)?.into_iter().filter(|r| r.step < from_step).collect();
        Self::with_records(path, &kept)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.out, "{s}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn append(&mut self, r: &MetricsRecord) -> Result<()> {
        if self.last_step.is_some_and(|last| r.step <= last) {
            return Err(Error::format(
                "metrics log",
                format!("step {} does not follow step {}", r.step, self.last_step.unwrap_or(0)),
            ));
        }
        self.last_step = Some(r.step);
        self.line(&serde_json::to_string(r)?)
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

impl Drop for MetricsWriter {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_metrics(BufReader::new(file), path)
}

fn parse_metrics(reader: impl BufRead, path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut lines = reader.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::format("metrics log", "empty file"))?
        .map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_str(&first)?;
    if header.schema != SCHEMA || header.version != VERSION {
        return Err(Error::format(
            "metrics log",
            format!("unsupported schema {} v{}", header.schema, header.version),
        ));
    }
    let mut out: Vec<MetricsRecord> = Vec::new();
    for line in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: MetricsRecord = serde_json::from_str(&line)?;
        if out.last().is_some_and(|p| r.step <= p.step) {
            return Err(Error::format("metrics log", format!("step {} out of order", r.step)));
        }
        out.push(r);
    }
    Ok(out)
}

/// Removes a log if present; used before a fresh run.
pub fn remove_log(path: &Path) -> Result<()> {
    match fs::remove_file(path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(Error::io(path, e)),
        _ => Ok(()),
    }
}
