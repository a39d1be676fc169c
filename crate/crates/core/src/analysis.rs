//! Closed-form memory, parameter, and FLOP accounting for the layer family
//! under half-precision inference.
//!
//! Per-token memory loads for the intermediate projections:
//! plain linear 16hd bits, gated 32hd, masked (16 + n_m)hd. FLOPs follow the
//! same per-token conventions the accounting exposes in two views: the
//! intermediate projections alone, or the whole block including the output
//! projection.

use serde::{Deserialize, Serialize};

use crate::error::{MgluError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    /// Two-layer FFN with a single up projection.
    Lu,
    /// Gated layer with separate gate and value matrices.
    Glu,
    /// Masked gated layer over one shared matrix.
    Mglu,
}

impl std::fmt::Display for LayerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LayerKind::Lu => write!(f, "lu"),
            LayerKind::Glu => write!(f, "glu"),
            LayerKind::Mglu => write!(f, "mglu"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Inference,
    Training,
}

/// Whether FLOP counts cover the intermediate projections only or the whole
/// block with its output projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopScope {
    Intermediate,
    FfnTotal,
}

fn require_n_m(kind: LayerKind, n_m: Option<u64>) -> Result<u64> {
    match (kind, n_m) {
        (LayerKind::Mglu, Some(n)) => Ok(n),
        (LayerKind::Mglu, None) => Err(MgluError::InvalidTrainConfig(
            "mglu accounting requires n_m".into(),
        )),
        (_, _) => Ok(0),
    }
}

/// Per-token bits transferred for the intermediate weights at FP16, masks in
/// 1-bit form.
pub fn memory_load_bits(kind: LayerKind, h: u64, d: u64, n_m: Option<u64>) -> Result<u64> {
    let n_m = require_n_m(kind, n_m)?;
    Ok(match kind {
        LayerKind::Lu => 16 * h * d,
        LayerKind::Glu => 32 * h * d,
        LayerKind::Mglu => (16 + n_m) * h * d,
    })
}

/// (FP16 parameter count, mask bits) for the intermediate projections;
/// `include_output` adds the d x h output projection to every kind.
pub fn param_counts(
    kind: LayerKind,
    h: u64,
    d: u64,
    n_m: Option<u64>,
    include_output: bool,
) -> Result<(u64, u64)> {
    let n_m = require_n_m(kind, n_m)?;
    let (mut fp16, mask_bits) = match kind {
        LayerKind::Lu => (h * d, 0),
        LayerKind::Glu => (2 * h * d, 0),
        LayerKind::Mglu => (h * d, n_m * h * d),
    };
    if include_output {
        fp16 += h * d;
    }
    Ok((fp16, mask_bits))
}

/// Multiply-add operation count per token.
///
/// Inference counts follow the per-projection convention: 2hd per dense
/// matvec, one shared matvec plus one accumulation pass per mask for the
/// masked layer, and 2hd more when the output projection is in scope.
/// Training counts are whole-block totals: 18hd for the gated baseline and
/// (6 + 8 n_m)hd for the masked layer; the plain linear block extends the
/// same three-passes-per-step rule to 12hd.
pub fn flops_per_token(
    kind: LayerKind,
    h: u64,
    d: u64,
    n_m: Option<u64>,
    phase: Phase,
    scope: FlopScope,
) -> Result<u64> {
    let n_m = require_n_m(kind, n_m)?;
    Ok(match phase {
        Phase::Inference => {
            let intermediate = match kind {
                LayerKind::Lu => 2 * h * d,
                LayerKind::Glu => 4 * h * d,
                LayerKind::Mglu => 2 * (1 + n_m) * h * d,
            };
            match scope {
                FlopScope::Intermediate => intermediate,
                FlopScope::FfnTotal => intermediate + 2 * h * d,
            }
        }
        Phase::Training => match kind {
            LayerKind::Lu => 12 * h * d,
            LayerKind::Glu => 18 * h * d,
            LayerKind::Mglu => (6 + 8 * n_m) * h * d,
        },
    })
}

/// One accounting row; `reduction_vs_glu` is the memory-load saving against
/// the gated baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostReport {
    pub layer_kind: LayerKind,
    pub h: u64,
    pub d: u64,
    pub n_m: Option<u64>,
    pub memory_load_bits: u64,
    pub fp16_params: u64,
    pub mask_param_bits: u64,
    pub inference_flops: u64,
    pub inference_flops_ffn: u64,
    pub training_flops: u64,
    pub reduction_vs_glu: f64,
}

pub fn cost_report(kind: LayerKind, h: u64, d: u64, n_m: Option<u64>) -> Result<CostReport> {
    let bits = memory_load_bits(kind, h, d, n_m)?;
    let glu_bits = memory_load_bits(LayerKind::Glu, h, d, None)?;
    let (fp16_params, mask_param_bits) = param_counts(kind, h, d, n_m, false)?;
    Ok(CostReport {
        layer_kind: kind,
        h,
        d,
        n_m: match kind {
            LayerKind::Mglu => n_m,
            _ => None,
        },
        memory_load_bits: bits,
        fp16_params,
        mask_param_bits,
        inference_flops: flops_per_token(kind, h, d, n_m, Phase::Inference, FlopScope::Intermediate)?,
        inference_flops_ffn: flops_per_token(kind, h, d, n_m, Phase::Inference, FlopScope::FfnTotal)?,
        training_flops: flops_per_token(kind, h, d, n_m, Phase::Training, FlopScope::Intermediate)?,
        reduction_vs_glu: 1.0 - bits as f64 / glu_bits as f64,
    })
}
