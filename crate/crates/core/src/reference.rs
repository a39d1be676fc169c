//! Naive, obviously-correct forward paths for every layer variant.
//!
//! These run each gate/value stream as its own dense matvec, exactly as the
//! layer equations read. They are the oracle the fused kernel is checked
//! against, and the baseline the benchmarks compare with.

use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::error::{MgluError, Result};
use crate::kernel::{self, KernelConfig, TrafficReport};
use crate::layer::MgluLayer;
use crate::masks::BinaryMask;
use crate::real::Real;
use crate::tensor::{DenseMatrix, DenseVector};

/// Partial-mask ablation variants of the single-mask layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    /// Dense gate: g(xW) applied to the complement-masked value stream.
    NoGateMask,
    /// Dense value: masked gate stream multiplied by the full xW.
    NoValueMask,
    /// Fully shared: g(xW) * (xW), no masks anywhere.
    NoMasks,
}

impl std::fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AblationVariant::NoGateMask => write!(f, "no_gate_mask"),
            AblationVariant::NoValueMask => write!(f, "no_value_mask"),
            AblationVariant::NoMasks => write!(f, "no_masks"),
        }
    }
}

/// Elementwise activation over a vector.
pub fn activation<T: Real>(kind: Activation, v: &DenseVector<T>) -> DenseVector<T> {
    DenseVector::from_vec(v.as_slice().iter().map(|&z| kind.eval(z)).collect())
        .expect("activation of finite input is finite")
}

fn check_x_w<T: Real>(x: &DenseVector<T>, w: &DenseMatrix<T>, name: &str) -> Result<()> {
    if x.len() != w.rows() {
        return Err(MgluError::DimMismatch(format!(
            "input length {} != {} rows {}",
            x.len(),
            name,
            w.rows()
        )));
    }
    Ok(())
}

/// Masked matvec x^T (M (.) W), streaming W once. `complement` selects the
/// 1-M side. One full weight pass per call, by construction.
fn masked_vec_mat<T: Real>(
    x: &[T],
    w: &DenseMatrix<T>,
    mask: &BinaryMask,
    complement: bool,
) -> Vec<T> {
    let d = w.cols();
    let mut out = vec![T::zero(); d];
    for (k, &xk) in x.iter().enumerate() {
        let wrow = w.row(k);
        let mrow = &mask.bits()[k * d..(k + 1) * d];
        for j in 0..d {
            let keep = (mrow[j] == 1) != complement;
            let m = if keep { T::one() } else { T::zero() };
            out[j] += xk * m * wrow[j];
        }
    }
    out
}

/// g(x W_g) (.) (x W_v), the two-matrix gated layer.
pub fn glu_forward<T: Real>(
    x: &DenseVector<T>,
    w_g: &DenseMatrix<T>,
    w_v: &DenseMatrix<T>,
    kind: Activation,
) -> Result<DenseVector<T>> {
    check_x_w(x, w_g, "W_g")?;
    check_x_w(x, w_v, "W_v")?;
    if w_g.rows() != w_v.rows() || w_g.cols() != w_v.cols() {
        return Err(MgluError::DimMismatch(format!(
            "W_g {}x{} != W_v {}x{}",
            w_g.rows(),
            w_g.cols(),
            w_v.rows(),
            w_v.cols()
        )));
    }
    let gate = w_g.vec_mat(x.as_slice());
    let value = w_v.vec_mat(x.as_slice());
    let out = gate
        .into_iter()
        .zip(value)
        .map(|(g, v)| kind.eval(g) * v)
        .collect();
    DenseVector::from_vec(out)
}

fn check_masks<T: Real>(w: &DenseMatrix<T>, masks: &[BinaryMask]) -> Result<()> {
    if masks.is_empty() {
        return Err(MgluError::MaskCountOutOfRange(0));
    }
    for m in masks {
        if m.rows() != w.rows() || m.cols() != w.cols() {
            return Err(MgluError::DimMismatch(format!(
                "mask {}x{} != weight {}x{}",
                m.rows(),
                m.cols(),
                w.rows(),
                w.cols()
            )));
        }
    }
    Ok(())
}

/// Sum over masks of g(x (M_i (.) W)) (.) (x (complement (.) W)), evaluated
/// as independent pairs of dense matvecs: 2 n_m weight passes.
pub fn mglu_forward_naive<T: Real>(
    x: &DenseVector<T>,
    w: &DenseMatrix<T>,
    masks: &[BinaryMask],
    kind: Activation,
) -> Result<DenseVector<T>> {
    check_x_w(x, w, "W")?;
    check_masks(w, masks)?;
    let mut out = vec![T::zero(); w.cols()];
    for mask in masks {
        let gate = masked_vec_mat(x.as_slice(), w, mask, false);
        let value = masked_vec_mat(x.as_slice(), w, mask, true);
        for ((o, g), v) in out.iter_mut().zip(gate).zip(value) {
            *o += kind.eval(g) * v;
        }
    }
    DenseVector::from_vec(out)
}

/// Same result as [`mglu_forward_naive`] plus a traffic record of what the
/// multi-pass path actually reads: 2 n_m full weight loads.
pub fn mglu_forward_naive_counted<T: Real>(
    x: &DenseVector<T>,
    w: &DenseMatrix<T>,
    masks: &[BinaryMask],
    kind: Activation,
) -> Result<(DenseVector<T>, TrafficReport)> {
    let out = mglu_forward_naive(x, w, masks, kind)?;
    let elem = std::mem::size_of::<T>() as u64;
    let (h, d) = (w.rows() as u64, w.cols() as u64);
    let n_m = masks.len() as u64;
    let streams = 2 * n_m;
    let report = TrafficReport {
        weight_bytes_read: streams * h * d * elem,
        mask_bytes_read: streams * h * d,
        input_bytes_read: streams * h * elem,
        output_bytes_written: (streams * d + d) * elem,
        modeled_weight_bits: streams * w.storage().bits() * h * d + streams * h * d,
    };
    Ok((out, report))
}

/// Single-mask ablation forwards.
pub fn mglu_ablation_forward<T: Real>(
    x: &DenseVector<T>,
    w: &DenseMatrix<T>,
    mask: &BinaryMask,
    variant: AblationVariant,
    kind: Activation,
) -> Result<DenseVector<T>> {
    check_x_w(x, w, "W")?;
    check_masks(w, std::slice::from_ref(mask))?;
    let xs = x.as_slice();
    let (gate, value) = match variant {
        AblationVariant::NoGateMask => (w.vec_mat(xs), masked_vec_mat(xs, w, mask, true)),
        AblationVariant::NoValueMask => (masked_vec_mat(xs, w, mask, false), w.vec_mat(xs)),
        AblationVariant::NoMasks => (w.vec_mat(xs), w.vec_mat(xs)),
    };
    let out = gate
        .into_iter()
        .zip(value)
        .map(|(g, v)| kind.eval(g) * v)
        .collect();
    DenseVector::from_vec(out)
}

/// Router gating: softmax over the K largest logits of x W_r, ties broken
/// toward the lowest index; all other entries exactly zero.
pub fn topk_gate<T: Real>(x: &DenseVector<T>, w_r: &DenseMatrix<T>, k: usize) -> Result<DenseVector<T>> {
    check_x_w(x, w_r, "W_r")?;
    let n_m = w_r.cols();
    if k == 0 || k > n_m {
        return Err(MgluError::TopKOutOfRange { k, n_m });
    }
    let logits = w_r.vec_mat(x.as_slice());
    let selected = select_topk(&logits, k);
    let mut out = vec![T::zero(); n_m];
    let max = selected
        .iter()
        .map(|&i| logits[i])
        .fold(T::neg_infinity(), T::max);
    let mut denom = T::zero();
    for &i in &selected {
        let e = (logits[i] - max).exp();
        out[i] = e;
        denom += e;
    }
    for &i in &selected {
        out[i] = out[i] / denom;
    }
    DenseVector::from_vec(out)
}

/// Indices of the K largest entries, descending value, lowest index first on
/// ties. Returned in selection order.
pub(crate) fn select_topk<T: Real>(logits: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .expect("finite logits")
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Routed sum: gating weights times each mask's gate-value term. Terms with
/// zero weight are not evaluated.
pub fn mglu_topk_forward<T: Real>(
    x: &DenseVector<T>,
    layer: &MgluLayer<T>,
    k: usize,
) -> Result<DenseVector<T>> {
    let router = layer.router().ok_or(MgluError::MissingRouter)?;
    check_x_w(x, layer.w(), "W")?;
    let weights = topk_gate(x, &router.w_r, k)?;
    let masks = layer.binarized();
    let kind = layer.activation();
    let mut out = vec![T::zero(); layer.d()];
    for (i, &wi) in weights.as_slice().iter().enumerate() {
        if wi == T::zero() {
            continue;
        }
        let gate = masked_vec_mat(x.as_slice(), layer.w(), &masks[i], false);
        let value = masked_vec_mat(x.as_slice(), layer.w(), &masks[i], true);
        for ((o, g), v) in out.iter_mut().zip(gate).zip(value) {
            *o += wi * kind.eval(g) * v;
        }
    }
    DenseVector::from_vec(out)
}

/// Which intermediate path the FFN composition uses.
#[derive(Debug, Clone, Copy)]
pub enum FfnPath<'a> {
    Naive,
    Fused(&'a KernelConfig),
}

/// Full feed-forward block: masked intermediate mapped back through the
/// output projection. No bias anywhere.
pub fn ffn_forward<T: Real>(
    x: &DenseVector<T>,
    layer: &MgluLayer<T>,
    path: FfnPath<'_>,
) -> Result<DenseVector<T>> {
    let w_o = layer.w_o().ok_or(MgluError::MissingOutputProjection)?;
    let mid = match path {
        FfnPath::Naive => mglu_forward_naive(x, layer.w(), &layer.binarized(), layer.activation())?,
        FfnPath::Fused(cfg) => kernel::mglu_forward_fused(x, layer, cfg)?,
    };
    DenseVector::from_vec(w_o.vec_mat(mid.as_slice()))
}
