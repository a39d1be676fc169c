//! `mglu train`: run a training config, emit a JSON report and an optional
//! CSV loss curve.

use std::fs;
use std::path::PathBuf;

use clap::Args;
use serde::Serialize;

use mglu::trainer::{train, MaskMode, TrainConfig, TrainReport};

use crate::report::{write_json, SCHEMA_VERSION};

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON training config; fields mirror the trainer's config structure.
    #[arg(long)]
    pub config: PathBuf,

    #[arg(long)]
    pub json: Option<PathBuf>,

    /// Loss-curve CSV: step,loss,gate_ratio_1..n_m.
    #[arg(long)]
    pub csv: Option<PathBuf>,

    /// Also run the same config with frozen masks and report the pair.
    #[arg(long, default_value_t = false)]
    pub compare_fixed: bool,

    /// Omit wall-clock time so reports compare byte-for-byte across runs.
    #[arg(long, default_value_t = false)]
    pub deterministic: bool,
}

#[derive(Serialize)]
struct TrainEnvelope<'a> {
    schema_version: u32,
    kind: &'static str,
    config: &'a TrainConfig,
    report: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    comparison: Option<Comparison>,
}

#[derive(Serialize)]
struct Comparison {
    learned_final_loss: f64,
    fixed_final_loss: f64,
    learned_better: bool,
}

/// Exit code 2 marks a malformed config, with the offending field path.
pub const EXIT_USAGE: i32 = 2;

pub fn parse_config(raw: &str) -> Result<TrainConfig, String> {
    let mut de = serde_json::Deserializer::from_str(raw);
    let config: TrainConfig = serde_path_to_error::deserialize(&mut de)
        .map_err(|e| format!("config field `{}`: {}", e.path(), e.inner()))?;
    config.validate().map_err(|e| e.to_string())?;
    Ok(config)
}

fn report_value(report: &TrainReport, deterministic: bool) -> serde_json::Value {
    if deterministic {
        serde_json::from_str(&report.canonical_json()).expect("canonical report parses")
    } else {
        serde_json::to_value(report).expect("report serializes")
    }
}

pub fn run(args: &TrainArgs) -> anyhow::Result<i32> {
    let raw = match fs::read_to_string(&args.config) {
        Ok(raw) => raw,
        Err(e) => {
            eprintln!("cannot read {}: {e}", args.config.display());
            return Ok(EXIT_USAGE);
        }
    };
    let config = match parse_config(&raw) {
        Ok(config) => config,
        Err(msg) => {
            eprintln!("invalid training config: {msg}");
            return Ok(EXIT_USAGE);
        }
    };

    let report = train::<f64>(&config).map_err(|e| anyhow::anyhow!(e.to_string()))?;
    println!(
        "train: {} steps, final loss {:.6}{}",
        config.steps,
        report.final_loss,
        if report.diverged { " (diverged)" } else { "" }
    );

    let comparison = if args.compare_fixed {
        let fixed_config = TrainConfig {
            mask_mode: MaskMode::Fixed,
            ..config.clone()
        };
        let fixed = train::<f64>(&fixed_config).map_err(|e| anyhow::anyhow!(e.to_string()))?;
        println!(
            "compare: learned {:.6} vs fixed {:.6} -> learned_better={}",
            report.final_loss,
            fixed.final_loss,
            report.final_loss < fixed.final_loss
        );
        Some(Comparison {
            learned_final_loss: report.final_loss,
            fixed_final_loss: fixed.final_loss,
            learned_better: report.final_loss < fixed.final_loss,
        })
    } else {
        None
    };

    if let Some(path) = &args.csv {
        let mut out = String::from("step,loss");
        let n_m = report
            .mask_stats_curve
            .first()
            .map_or(0, |ratios| ratios.len());
        for i in 1..=n_m {
            out.push_str(&format!(",gate_ratio_{i}"));
        }
        out.push('\n');
        for ((step, loss), ratios) in report
            .recorded_steps
            .iter()
            .zip(&report.loss_curve)
            .zip(&report.mask_stats_curve)
        {
            out.push_str(&format!("{step},{loss}"));
            for r in ratios {
                out.push_str(&format!(",{r}"));
            }
            out.push('\n');
        }
        fs::write(path, out)?;
    }

    if let Some(path) = &args.json {
        let envelope = TrainEnvelope {
            schema_version: SCHEMA_VERSION,
            kind: "train",
            config: &config,
            report: report_value(&report, args.deterministic),
            comparison,
        };
        write_json(&envelope, path)?;
    }
    Ok(0)
}
