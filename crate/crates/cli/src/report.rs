//! Shared report envelope and machine-readable output helpers.
//!
//! Every JSON document the CLI emits carries `schema_version` and `kind`;
//! the full structure is published in `schemas/report-v1.schema.json`.

use std::fs;
use std::path::Path;

use anyhow::Context;
use serde::Serialize;

pub const SCHEMA_VERSION: u32 = 1;

/// One verification case: a named check, its outcome, and the measured
/// metric against its tolerance where one applies.
#[derive(Debug, Clone, Serialize)]
pub struct VerifyCase {
    pub name: String,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metric: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct VerifyReport {
    pub schema_version: u32,
    pub kind: &'static str,
    pub passed: usize,
    pub failed: usize,
    pub cases: Vec<VerifyCase>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchCase {
    pub kind: String,
    pub h: usize,
    pub d: usize,
    /// 0 for the gated baseline, which has no masks.
    pub n_m: usize,
    pub split_k: usize,
    pub reps: usize,
    pub warmup_reps: usize,
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
}

#[derive(Debug, Serialize)]
pub struct Environment {
    pub cores: usize,
    pub timestamp_unix: u64,
    pub precision: String,
}

#[derive(Debug, Serialize)]
pub struct BenchReport {
    pub schema_version: u32,
    pub kind: &'static str,
    pub environment: Environment,
    pub cases: Vec<BenchCase>,
}

#[derive(Debug, Serialize)]
pub struct AnalyzeReport {
    pub schema_version: u32,
    pub kind: &'static str,
    pub rows: Vec<mglu::analysis::CostReport>,
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> anyhow::Result<()> {
    let mut body = serde_json::to_string_pretty(value)?;
    body.push('\n');
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Nearest-rank percentile over an unsorted sample, in place.
pub fn percentiles(samples: &mut [f64]) -> (f64, f64, f64) {
    samples.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let pick = |q: f64| {
        let idx = ((samples.len() - 1) as f64 * q).round() as usize;
        samples[idx]
    };
    (pick(0.10), pick(0.50), pick(0.90))
}
