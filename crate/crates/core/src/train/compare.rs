//! Step-aligned comparison of two metric logs.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::metrics::MetricsRecord;

/// Differences `b − a` at one step present in both logs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub step: usize,
    pub d_effective_rank: Option<f64>,
    pub d_avg_cosine: Option<f64>,
    pub d_ntp_loss: f64,
}

/// Logged records averaged into [`RunSummary::final_ntp_loss`]; single-batch
/// losses are too noisy to compare runs on.
pub const FINAL_LOSS_WINDOW: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub final_step: usize,
    /// Mean over the last [`FINAL_LOSS_WINDOW`] logged records.
    pub final_ntp_loss: f64,
    pub last_ntp_loss: f64,
    /// Means over the final third of geometry snapshots.
    pub late_effective_rank: Option<f64>,
    pub late_avg_cosine: Option<f64>,
    pub final_alignment: Option<f64>,
}

impl RunSummary {
    pub fn of(records: &[MetricsRecord]) -> Option<Self> {
        let last = records.last()?;
        let (rank, cos) = final_third_geometry(records);
        let tail = &records[records.len().saturating_sub(FINAL_LOSS_WINDOW)..];
        Some(RunSummary {
            final_step: last.step,
            final_ntp_loss: tail.iter().map(|r| r.ntp_loss).sum::<f64>() / tail.len() as f64,
            last_ntp_loss: last.ntp_loss,
            late_effective_rank: rank,
            late_avg_cosine: cos,
            final_alignment: records.iter().rev().find_map(|r| r.cosine_alignment),
        })
    }
}

/// Snapshot records in the final third of a log's snapshots (at least one).
pub fn final_third(records: &[MetricsRecord]) -> Vec<&MetricsRecord> {
    let snaps: Vec<&MetricsRecord> = records.iter().filter(|r| r.has_snapshot()).collect();
    let n = snaps.len();
    snaps[2 * n / 3..].to_vec()
}

/// Mean effective rank and mean pairwise cosine over [`final_third`].
pub fn final_third_geometry(records: &[MetricsRecord]) -> (Option<f64>, Option<f64>) {
    let late = final_third(records);
    if late.is_empty() {
        return (None, None);
    }
    let n = late.len() as f64;
    let rank = late.iter().filter_map(|r| r.effective_rank).sum::<f64>() / n;
    let cos = late.iter().filter_map(|r| r.avg_cosine).sum::<f64>() / n;
    (Some(rank), Some(cos))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<CompareRow>,
    /// Shared steps where only one log carried a snapshot.
    pub skipped_snapshots: usize,
    pub a: RunSummary,
    pub b: RunSummary,
}

pub fn compare_runs(a: &[MetricsRecord], b: &[MetricsRecord]) -> Result<Comparison> {
    let (mut i, mut j) = (0, 0);
    let mut rows = Vec::new();
    let mut skipped = 0;
    while i < a.len() && j < b.len() {
        let (ra, rb) = (&a[i], &b[j]);
        match ra.step.cmp(&rb.step) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                let both = ra.has_snapshot() && rb.has_snapshot();
                if ra.has_snapshot() != rb.has_snapshot() {
                    skipped += 1;
                }
                let diff = |x: Option<f64>, y: Option<f64>| if both { Some(y? - x?) } else { None };
                rows.push(CompareRow {
                    step: ra.step,
                    d_effective_rank: diff(ra.effective_rank, rb.effective_rank),
                    d_avg_cosine: diff(ra.avg_cosine, rb.avg_cosine),
                    d_ntp_loss: rb.ntp_loss - ra.ntp_loss,
                });
                i += 1;
                j += 1;
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::DisjointLogs);
    }
    Ok(Comparison {
        rows,
        skipped_snapshots: skipped,
        a: RunSummary::of(a).ok_or(Error::DisjointLogs)?,
        b: RunSummary::of(b).ok_or(Error::DisjointLogs)?,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:+.6}"))
}

impl Comparison {
    /// Plain-text table of snapshot rows followed by the summary.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>8} {:>12} {:>12} {:>12}", "step", "d_eff_rank", "d_avg_cos", "d_ntp_loss");
        for r in self.rows.iter().filter(|r| r.d_effective_rank.is_some()) {
            let _ = writeln!(
                s,
                "{:>8} {:>12} {:>12} {:>+12.6}",
                r.step,
                opt(r.d_effective_rank),
                opt(r.d_avg_cosine),
                r.d_ntp_loss
            );
        }
        let _ = writeln!(s, "shared steps: {}  skipped snapshots: {}", self.rows.len(), self.skipped_snapshots);
        for (name, r) in [("a", &self.a), ("b", &self.b)] {
            let _ = writeln!(
                s,
                "{name}: final step {} ntp_loss {:.6} late eff_rank {} late avg_cos {} alignment {}",
                r.final_step,
                r.final_ntp_loss,
                r.late_effective_rank.map_or("-".into(), |v| format!("{v:.4}")),
                r.late_avg_cosine.map_or("-".into(), |v| format!("{v:.4}")),
                r.final_alignment.map_or("-".into(), |v| format!("{v:.4}")),
            );
        }
        s
    }
}
