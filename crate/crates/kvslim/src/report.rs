//! Machine-readable run reports.
//!
//! Every CLI run emits one JSON document: a schema version, the full
//! effective configuration (no hidden defaults), a `meta` block with the
//! timestamp and wall-clock timings, and one section per command. Floats
//! serialize with round-trip precision. Determinism checks compare reports
//! with the `meta` block stripped — everything outside it is a pure function
//! of flags and seed.

use serde::Serialize;
use serde_json::Value;

use crate::compress::{BudgetModel, ErrorPrediction, StepReport, StopReason};
use crate::lowerbound::DecodeReport;
use crate::verify::{QueryClass, Stats};

pub const SCHEMA_VERSION: u32 = 1;

/// Volatile run metadata, excluded from determinism comparisons.
#[derive(Debug, Clone, Serialize)]
pub struct ReportMeta {
    /// Seconds since the Unix epoch at the end of the run.
    pub timestamp: u64,
    pub wall_ms: u64,
}

impl ReportMeta {
    pub fn now(wall_ms: u64) -> Self {
        let timestamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self { timestamp, wall_ms }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CompressSection {
    pub n_input: usize,
    pub coreset_size: usize,
    pub coreset_indices: Vec<usize>,
    pub stop_reason: StopReason,
    pub budget: BudgetModel,
    pub prediction: ErrorPrediction,
    pub keysum_allowance: f64,
    pub steps: Vec<StepReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalRow {
    pub class: QueryClass,
    pub attn_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalSection {
    pub n_full: usize,
    pub n_coreset: usize,
    pub suite_len: usize,
    pub attn: Stats,
    pub rows: Vec<EvalRow>,
    /// True when both files carried normalization records that differ.
    pub normalization_mismatch: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingRow {
    pub n: usize,
    pub trial: u64,
    pub balanced_error: f64,
    pub random_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingSection {
    pub rows: Vec<ScalingRow>,
    /// Median balanced / random error per n, in the order of the n list.
    pub balanced_medians: Vec<(usize, f64)>,
    pub random_medians: Vec<(usize, f64)>,
}

/// The one report document every CLI command writes.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub command: String,
    pub seed: u64,
    /// Echo of the full effective configuration.
    pub config: Value,
    pub meta: ReportMeta,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub compress: Option<CompressSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scaling: Option<ScalingSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lowerbound: Option<DecodeReport>,
}

impl RunReport {
    pub fn new(command: &str, seed: u64, config: Value) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            command: command.to_string(),
            seed,
            config,
            meta: ReportMeta { timestamp: 0, wall_ms: 0 },
            compress: None,
            eval: None,
            scaling: None,
            lowerbound: None,
        }
    }

    pub fn to_json_pretty(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// The report as JSON with the volatile `meta` block removed, for
    /// byte-comparison between runs.
    pub fn deterministic_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("report serializes");
        if let Value::Object(map) = &mut v {
            map.remove("meta");
        }
        serde_json::to_string_pretty(&v).expect("value serializes")
    }
}

/// Strips the `meta` block from a serialized report, for comparing saved
/// report files.
pub fn strip_meta(report_json: &str) -> serde_json::Result<String> {
    let mut v: Value = serde_json::from_str(report_json)?;
    if let Value::Object(map) = &mut v {
        map.remove("meta");
    }
    serde_json::to_string_pretty(&v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_through_json() {
        let mut report = RunReport::new("eval", 7, serde_json::json!({"rho": 2.0}));
        report.eval = Some(EvalSection {
            n_full: 4,
            n_coreset: 2,
            suite_len: 1,
            attn: Stats {
                max: 0.1 + 0.2,
                p95: 1.0 / 3.0,
                median: f64::MIN_POSITIVE,
            },
            rows: vec![],
            normalization_mismatch: false,
        });
        let json = report.to_json_pretty();
        let v: Value = serde_json::from_str(&json).unwrap();
        let stats = &v["eval"]["attn"];
        assert_eq!(stats["max"].as_f64().unwrap(), 0.1 + 0.2);
        assert_eq!(stats["p95"].as_f64().unwrap(), 1.0 / 3.0);
        assert_eq!(stats["median"].as_f64().unwrap(), f64::MIN_POSITIVE);
    }

    #[test]
    fn meta_is_stripped_for_comparison() {
        let mut a = RunReport::new("compress", 1, serde_json::json!({}));
        let mut b = RunReport::new("compress", 1, serde_json::json!({}));
        a.meta = ReportMeta { timestamp: 100, wall_ms: 5 };
        b.meta = ReportMeta { timestamp: 200, wall_ms: 9 };
        assert_ne!(a.to_json_pretty(), b.to_json_pretty());
        assert_eq!(a.deterministic_json(), b.deterministic_json());
        assert_eq!(
            strip_meta(&a.to_json_pretty()).unwrap(),
            strip_meta(&b.to_json_pretty()).unwrap()
        );
    }

    #[test]
    fn schema_version_present() {
        let report = RunReport::new("gen", 0, serde_json::json!({}));
        let v: Value = serde_json::from_str(&report.to_json_pretty()).unwrap();
        assert_eq!(v["schema_version"].as_u64().unwrap(), 1);
        assert_eq!(v["command"], "gen");
    }
}
