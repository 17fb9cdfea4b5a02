//! Run reports: divergence from the synchronous baseline, staleness,
//! traffic, buffers, time and speedup, serialized as CSV or JSON.
//!
//! CSV column order (stable; `CSV_COLUMNS`):
//!
//! ```text
//! label, strategy, policy, batch, num_tokens, model_hash, input_hash,
//! divergence, staleness_histogram, total_comm_bytes, routed_bytes,
//! peak_buffer_bytes, makespan_seconds, comm_stall_seconds, comm_share,
//! speedup_vs_sync, timeline_path
//! ```
//!
//! `staleness_histogram` is written as `staleness:count` pairs joined by
//! `;` in ascending staleness order. Floats use the shortest representation
//! that round-trips.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::schedule::{RunResult, Strategy};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

pub const CSV_COLUMNS: [&str; 17] = [
    "label",
    "strategy",
    "policy",
    "batch",
    "num_tokens",
    "model_hash",
    "input_hash",
    "divergence",
    "staleness_histogram",
    "total_comm_bytes",
    "routed_bytes",
    "peak_buffer_bytes",
    "makespan_seconds",
    "comm_stall_seconds",
    "comm_share",
    "speedup_vs_sync",
    "timeline_path",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub strategy: Strategy,
    pub policy: String,
    pub batch: usize,
    pub num_tokens: usize,
    pub model_hash: String,
    pub input_hash: String,
    /// `‖x − x*‖₂ / ‖x*‖₂` against the synchronous final sample.
    pub divergence: f64,
    pub staleness_histogram: BTreeMap<usize, usize>,
    /// Bytes that crossed devices.
    pub total_comm_bytes: u64,
    /// Rows sent to experts, local or remote.
    pub routed_bytes: u64,
    pub peak_buffer_bytes: u64,
    pub makespan_seconds: f64,
    /// Mean over devices of time blocked on communication.
    pub comm_stall_seconds: f64,
    /// `comm_stall_seconds / makespan_seconds`.
    pub comm_share: f64,
    pub speedup_vs_sync: f64,
    pub timeline_path: Option<String>,
}

/// Relative L2 distance; exactly zero iff the bits agree.
pub fn relative_l2(x: &[f64], reference: &[f64]) -> f64 {
    if x.len() == reference.len() && x.iter().zip(reference).all(|(a, b)| a.to_bits() == b.to_bits()) {
        return 0.0;
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in x.iter().zip(reference) {
        num += (a - b) * (a - b);
        den += b * b;
    }
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

/// Fraction of the makespan spent blocked on communication.
pub fn comm_share(run: &RunResult) -> f64 {
    let makespan = run.timeline.makespan();
    if makespan == 0.0 {
        0.0
    } else {
        run.timeline.mean_stall_seconds() / makespan
    }
}

/// Compares `run` with a synchronous baseline on the same model and input.
pub fn build_report(label: &str, run: &RunResult, baseline: &RunResult) -> Result<MetricsReport> {
    if baseline.strategy != Strategy::Synchronous {
        return Err(SimError::Contract(format!(
            "baseline must be synchronous, got {}",
            baseline.strategy
        )));
    }
    if run.model_fingerprint != baseline.model_fingerprint || run.input_fingerprint != baseline.input_fingerprint {
        return Err(SimError::Contract(format!(
            "run {label:?} and its baseline differ in model or input ({}/{} vs {}/{})",
            run.model_fingerprint, run.input_fingerprint, baseline.model_fingerprint, baseline.input_fingerprint
        )));
    }
    let makespan = run.timeline.makespan();
    let base_makespan = baseline.timeline.makespan();
    let speedup_vs_sync = if makespan > 0.0 {
        base_makespan / makespan
    } else {
        1.0
    };
    Ok(MetricsReport {
        label: label.to_string(),
        strategy: run.strategy,
        policy: run.policy.to_string(),
        batch: run.model.batch,
        num_tokens: run.model.num_tokens,
        model_hash: run.model_fingerprint.clone(),
        input_hash: run.input_fingerprint.clone(),
        divergence: relative_l2(run.final_sample.values.as_slice(), baseline.final_sample.values.as_slice()),
        staleness_histogram: run.staleness_histogram(),
        total_comm_bytes: run.total_comm_bytes(),
        routed_bytes: run.total_routed_bytes(),
        peak_buffer_bytes: run.peak_buffer_bytes,
        makespan_seconds: makespan,
        comm_stall_seconds: run.timeline.mean_stall_seconds(),
        comm_share: comm_share(run),
        speedup_vs_sync,
        timeline_path: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Csv,
    Json,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.extension())
    }
}

impl FromStr for ReportFormat {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(SimError::Config(format!("unknown report format {other:?} (csv or json)"))),
        }
    }
}

fn histogram_cell(hist: &BTreeMap<usize, usize>) -> String {
    hist.iter().map(|(s, n)| format!("{s}:{n}")).collect::<Vec<_>>().join(";")
}

pub fn to_csv_string(reports: &[MetricsReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let ser = |e: csv::Error| SimError::Serialize(e.to_string());
    w.write_record(CSV_COLUMNS).map_err(ser)?;
    for r in reports {
        w.write_record([
            r.label.clone(),
            r.strategy.to_string(),
            r.policy.clone(),
            r.batch.to_string(),
            r.num_tokens.to_string(),
            r.model_hash.clone(),
            r.input_hash.clone(),
            r.divergence.to_string(),
            histogram_cell(&r.staleness_histogram),
            r.total_comm_bytes.to_string(),
            r.routed_bytes.to_string(),
            r.peak_buffer_bytes.to_string(),
            r.makespan_seconds.to_string(),
            r.comm_stall_seconds.to_string(),
            r.comm_share.to_string(),
            r.speedup_vs_sync.to_string(),
            r.timeline_path.clone().unwrap_or_default(),
        ])
        .map_err(ser)?;
    }
    let bytes = w.into_inner().map_err(|e| SimError::Serialize(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| SimError::Serialize(e.to_string()))
}

#[derive(Serialize, Deserialize)]
struct ReportDocument {
    schema_version: u32,
    reports: Vec<MetricsReport>,
}

pub fn to_json_string(reports: &[MetricsReport]) -> Result<String> {
    let doc = ReportDocument {
        schema_version: REPORT_SCHEMA_VERSION,
        reports: reports.to_vec(),
    };
    let mut s = serde_json::to_string_pretty(&doc).map_err(|e| SimError::Serialize(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn from_json_str(s: &str) -> Result<Vec<MetricsReport>> {
    let doc: ReportDocument = serde_json::from_str(s).map_err(|e| SimError::Serialize(e.to_string()))?;
    if doc.schema_version != REPORT_SCHEMA_VERSION {
        return Err(SimError::Serialize(format!(
            "report schema_version {} (expected {REPORT_SCHEMA_VERSION})",
            doc.schema_version
        )));
    }
    Ok(doc.reports)
}

/// Writes the report set to `path`.
pub fn emit(reports: &[MetricsReport], format: ReportFormat, path: &Path) -> Result<()> {
    let body = match format {
        ReportFormat::Csv => to_csv_string(reports)?,
        ReportFormat::Json => to_json_string(reports)?,
    };
    fs::write(path, body).map_err(|e| SimError::io(path, e))
}
