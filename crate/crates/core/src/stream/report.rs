use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Utilization and pruning decision for one side layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneRecord {
    pub modality: String,
    pub layer: usize,
    pub utilization: Vec<f64>,
    pub degenerate: bool,
    pub pruned: Option<usize>,
}

/// One training window: trained on `window`, tested on `window + 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowReport {
    pub schema_version: u32,
    pub window: usize,
    pub test_chunk: usize,
    pub hr_at_10: f64,
    pub ndcg_at_10: f64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_ndcg_at_10: f64,
    /// Expert counts per layer after pruning, keyed by modality.
    pub experts_per_layer: BTreeMap<String, Vec<usize>>,
    pub experts_before_prune: BTreeMap<String, Vec<usize>>,
    pub pruning: Vec<PruneRecord>,
    /// Side-network parameters after pruning.
    pub total_params: usize,
    pub trainable_params: usize,
    /// Side-network parameters while the window trained.
    pub train_total_params: usize,
    pub train_trainable_params: usize,
    pub model_total_params: usize,
    pub model_trainable_params: usize,
    pub memory_bytes: usize,
    pub test_cases: usize,
    pub test_misses: usize,
    /// Test interactions with no prior history, which cannot be encoded.
    pub test_cold_skipped: usize,
    pub wall_clock_s: f64,
}

/// Mean over test windows, emitted as the final report line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AvgReport {
    pub schema_version: u32,
    /// Always `"avg"`.
    pub window: String,
    pub variant: String,
    pub seed: u64,
    pub tau: f64,
    pub windows: usize,
    pub hr_at_10: f64,
    pub ndcg_at_10: f64,
    pub epochs: f64,
    pub experts_per_layer: BTreeMap<String, Vec<usize>>,
    pub total_params: usize,
    pub trainable_params: usize,
    pub wall_clock_s: f64,
}

impl AvgReport {
    pub fn from_windows(reports: &[WindowReport], cfg: &RunConfig) -> Self {
        let n = reports.len().max(1) as f64;
        let mean = |f: fn(&WindowReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let last = reports.last();
        AvgReport {
            schema_version: REPORT_SCHEMA_VERSION,
            window: "avg".into(),
            variant: cfg.variant.to_string(),
            seed: cfg.seed,
            tau: cfg.tau,
            windows: reports.len(),
            hr_at_10: mean(|r| r.hr_at_10),
            ndcg_at_10: mean(|r| r.ndcg_at_10),
            epochs: mean(|r| r.epochs as f64),
            experts_per_layer: last.map(|r| r.experts_per_layer.clone()).unwrap_or_default(),
            total_params: last.map_or(0, |r| r.total_params),
            trainable_params: last.map_or(0, |r| r.trainable_params),
            wall_clock_s: reports.iter().map(|r| r.wall_clock_s).sum(),
        }
    }
}

/// JSON-lines: one object per window, then the average.
pub fn write_report<W: Write>(mut out: W, reports: &[WindowReport], avg: &AvgReport) -> Result<()> {
    let json = |e: serde_json::Error| Error::Data(format!("report serialization: {e}"));
    for r in reports {
        serde_json::to_writer(&mut out, r).map_err(json)?;
        out.write_all(b"\n")?;
    }
    serde_json::to_writer(&mut out, avg).map_err(json)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

/// A report file read back: window rows and the average row.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedReport {
    pub windows: Vec<WindowReport>,
    pub avg: AvgReport,
}

pub fn parse_report(text: &str) -> std::result::Result<ParsedReport, String> {
    let mut windows = Vec::new();
    let mut avg = None;
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| format!("line {}: {e}", n + 1))?;
        let version = value.get("schema_version").and_then(|v| v.as_u64());
        if version != Some(REPORT_SCHEMA_VERSION as u64) {
            return Err(format!(
                "line {}: schema_version {version:?}, expected {REPORT_SCHEMA_VERSION}",
                n + 1
            ));
        }
        if avg.is_some() {
            return Err(format!("line {}: rows after the avg row", n + 1));
        }
        if value.get("window").and_then(|w| w.as_str()) == Some("avg") {
            avg = Some(serde_json::from_value(value).map_err(|e| format!("line {}: {e}", n + 1))?);
        } else {
            windows.push(serde_json::from_value(value).map_err(|e| format!("line {}: {e}", n + 1))?);
        }
    }
    let avg = avg.ok_or_else(|| "no avg row".to_string())?;
    Ok(ParsedReport { windows, avg })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(window: usize, ndcg: f64) -> WindowReport {
        WindowReport {
            schema_version: REPORT_SCHEMA_VERSION,
            window,
            test_chunk: window + 1,
            hr_at_10: ndcg * 2.0,
            ndcg_at_10: ndcg,
            epochs: 3,
            best_epoch: 1,
            best_val_ndcg_at_10: 0.1,
            experts_per_layer: BTreeMap::from([("visual".into(), vec![2, 2])]),
            experts_before_prune: BTreeMap::from([("visual".into(), vec![2, 2])]),
            pruning: vec![],
            total_params: 10,
            trainable_params: 5,
            train_total_params: 10,
            train_trainable_params: 5,
            model_total_params: 20,
            model_trainable_params: 15,
            memory_bytes: 1,
            test_cases: 4,
            test_misses: 0,
            test_cold_skipped: 0,
            wall_clock_s: 0.0,
        }
    }

    #[test]
    fn round_trip_and_schema_check() {
        let rows = vec![row(1, 0.2), row(2, 0.4)];
        let avg = AvgReport::from_windows(&rows, &RunConfig::default());
        assert!((avg.ndcg_at_10 - 0.3).abs() < 1e-12);
        let mut buf = Vec::new();
        write_report(&mut buf, &rows, &avg).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().last().unwrap().contains("\"window\":\"avg\""));
        let back = parse_report(&text).unwrap();
        assert_eq!(back.windows, rows);
        assert_eq!(back.avg, avg);
        assert!(parse_report("").is_err());
        assert!(parse_report(&text.replace("\"schema_version\":1", "\"schema_version\":9")).is_err());
    }
}
