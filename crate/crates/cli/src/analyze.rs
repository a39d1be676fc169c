//! `mglu analyze`: closed-form cost rows for the layer family.

use clap::Args;

use mglu::analysis::{cost_report, CostReport, LayerKind};

use crate::args::Shape;
use crate::report::{write_json, AnalyzeReport, SCHEMA_VERSION};

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long, value_delimiter = ',', default_values_t = vec![Shape { h: 2048, d: 8192 }])]
    pub shapes: Vec<Shape>,

    #[arg(long = "masks", value_delimiter = ',', default_values_t = vec![1, 2, 4, 8, 16])]
    pub masks: Vec<usize>,

    #[arg(long)]
    pub json: Option<std::path::PathBuf>,
}

fn print_table(rows: &[CostReport]) {
    println!(
        "{:<6} {:>6} {:>6} {:>4} {:>16} {:>12} {:>14} {:>12} {:>12} {:>12} {:>10}",
        "kind",
        "h",
        "d",
        "n_m",
        "mem_load_bits",
        "fp16_params",
        "mask_bits",
        "inf_flops",
        "ffn_flops",
        "train_flops",
        "vs_glu"
    );
    for r in rows {
        println!(
            "{:<6} {:>6} {:>6} {:>4} {:>16} {:>12} {:>14} {:>12} {:>12} {:>12} {:>9.3}%",
            r.layer_kind.to_string(),
            r.h,
            r.d,
            r.n_m.map_or("-".to_string(), |n| n.to_string()),
            r.memory_load_bits,
            r.fp16_params,
            r.mask_param_bits,
            r.inference_flops,
            r.inference_flops_ffn,
            r.training_flops,
            100.0 * r.reduction_vs_glu,
        );
    }
}

pub fn run(args: &AnalyzeArgs) -> anyhow::Result<i32> {
    let mut rows = Vec::new();
    for shape in &args.shapes {
        let (h, d) = (shape.h as u64, shape.d as u64);
        rows.push(cost_report(LayerKind::Lu, h, d, None).map_err(|e| anyhow::anyhow!(e.to_string()))?);
        rows.push(cost_report(LayerKind::Glu, h, d, None).map_err(|e| anyhow::anyhow!(e.to_string()))?);
        for &n_m in &args.masks {
            rows.push(
                cost_report(LayerKind::Mglu, h, d, Some(n_m as u64))
                    .map_err(|e| anyhow::anyhow!(e.to_string()))?,
            );
        }
    }
    print_table(&rows);
    if let Some(path) = &args.json {
        write_json(
            &AnalyzeReport {
                schema_version: SCHEMA_VERSION,
                kind: "analyze",
                rows,
            },
            path,
        )?;
    }
    Ok(0)
}
