//! CSV and plain-text reporting for experiment results and sweeps.

use std::io::Write;
use std::path::Path;

use crate::{BenchError, ExperimentResult, SweepRow};

pub const RUN_CSV_HEADER: &str =
    "scheme,subscribers,rate,rep,meanLatencyMs,delivered,expected,throttled,lookups";
pub const SWEEP_CSV_HEADER: &str =
    "scheme,subscribers,rate,meanLatencyMs,delivered,expected,throttled,lookups";

/// Numbers parsed back from one run CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct RunCsvRow {
    pub scheme: String,
    pub subscribers: usize,
    pub rate: u32,
    pub rep: usize,
    pub mean_latency_ms: f64,
    pub delivered: u64,
    pub expected: u64,
    pub throttled: u64,
    pub lookups: u64,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Write the per-repetition CSV at `path` and a plain-text summary next to
/// it (same stem, `.txt`).
pub fn export_report(result: &ExperimentResult, path: &Path) -> Result<(), BenchError> {
    let mut csv = std::fs::File::create(path)?;
    writeln!(csv, "{RUN_CSV_HEADER}")?;
    for (rep, run) in result.per_run.iter().enumerate() {
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{}",
            result.scheme.name(),
            result.subscribers,
            result.pubs_per_second,
            rep,
            run.mean_latency_ms,
            run.delivered,
            run.expected,
            run.throttled,
            run.store_lookups,
        )?;
    }

    let mut latencies = result.per_subscriber_latency_ms.clone();
    latencies.sort_by(|a, b| a.partial_cmp(b).expect("latencies are finite"));
    let summary_path = path.with_extension("txt");
    let mut summary = std::fs::File::create(summary_path)?;
    writeln!(summary, "scheme: {}", result.scheme.name())?;
    writeln!(
        summary,
        "subscribers: {}  rate: {}/s  publications: {}  repetitions: {}",
        result.subscribers, result.pubs_per_second, result.publication_count, result.repetitions,
    )?;
    writeln!(summary, "mean latency ms: {}", result.mean_latency_ms)?;
    writeln!(
        summary,
        "p50 ms: {}  p95 ms: {}  p99 ms: {}",
        percentile(&latencies, 0.50),
        percentile(&latencies, 0.95),
        percentile(&latencies, 0.99),
    )?;
    writeln!(
        summary,
        "delivered: {}  expected: {}  dropped: {}  throttled: {}  suppressed: {}",
        result.delivered_count,
        result.expected_count,
        result.dropped_count,
        result.throttled_count,
        result.suppressed_count,
    )?;
    writeln!(summary, "store lookups: {}", result.store_lookup_count)?;
    writeln!(summary, "incomplete subscribers: {}", result.incomplete_subscribers)?;
    Ok(())
}

pub fn parse_run_csv(path: &Path) -> Result<Vec<RunCsvRow>, BenchError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(header) if header == RUN_CSV_HEADER => {}
        other => {
            return Err(BenchError::InvalidConfig(format!(
                "unexpected CSV header: {other:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(BenchError::InvalidConfig(format!("bad CSV row: {line}")));
        }
        let parse_err = |e: &dyn std::fmt::Display| BenchError::InvalidConfig(e.to_string());
        rows.push(RunCsvRow {
            scheme: fields[0].to_string(),
            subscribers: fields[1].parse().map_err(|e| parse_err(&e))?,
            rate: fields[2].parse().map_err(|e| parse_err(&e))?,
            rep: fields[3].parse().map_err(|e| parse_err(&e))?,
            mean_latency_ms: fields[4].parse().map_err(|e| parse_err(&e))?,
            delivered: fields[5].parse().map_err(|e| parse_err(&e))?,
            expected: fields[6].parse().map_err(|e| parse_err(&e))?,
            throttled: fields[7].parse().map_err(|e| parse_err(&e))?,
            lookups: fields[8].parse().map_err(|e| parse_err(&e))?,
        });
    }
    Ok(rows)
}

/// One row per sweep cell, in the fixed column order.
pub fn export_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<(), BenchError> {
    let mut csv = std::fs::File::create(path)?;
    writeln!(csv, "{SWEEP_CSV_HEADER}")?;
    for row in rows {
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            row.scheme,
            row.subscribers,
            row.rate,
            row.mean_latency_ms,
            row.delivered,
            row.expected,
            row.throttled,
            row.lookups,
        )?;
    }
    Ok(())
}
