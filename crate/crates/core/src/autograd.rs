//! Hand-derived backward passes for the layer family, plus the central
//! finite-difference harness used to verify them.
//!
//! Weight and input gradients differentiate the forward with the hard masks
//! held fixed. Mask-logit gradients follow the straight-through rule: the
//! binarization backpropagates as identity, so `d_logits` equals the
//! gradient of the continuous mask-relaxed forward taken at the binarized
//! mask values. [`relaxed_mglu_forward`] is that surrogate, which makes the
//! rule checkable by finite differences.

use crate::activation::Activation;
use crate::error::{MgluError, Result};
use crate::layer::MgluLayer;
use crate::masks::{BinaryMask, MaskLogits};
use crate::real::Real;
use crate::reference::{select_topk, AblationVariant};
use crate::tensor::{DenseMatrix, DenseVector};

/// Gradients for every trainable block of a layer.
#[derive(Debug, Clone)]
pub struct GradBundle<T> {
    pub d_x: DenseVector<T>,
    pub d_w: DenseMatrix<T>,
    pub d_logits: MaskLogits<T>,
    pub d_w_o: Option<DenseMatrix<T>>,
    pub d_w_r: Option<DenseMatrix<T>>,
}

impl<T: Real> GradBundle<T> {
    /// In-place `self += other`, block by block. Shapes must match.
    pub fn accumulate(&mut self, other: &GradBundle<T>) {
        for (a, b) in self
            .d_x
            .as_mut_slice()
            .iter_mut()
            .zip(other.d_x.as_slice())
        {
            *a += *b;
        }
        for (a, b) in self.d_w.as_mut_slice().iter_mut().zip(other.d_w.as_slice()) {
            *a += *b;
        }
        for (a, b) in self
            .d_logits
            .as_mut_slice()
            .iter_mut()
            .zip(other.d_logits.as_slice())
        {
            *a += *b;
        }
        if let (Some(a), Some(b)) = (self.d_w_o.as_mut(), other.d_w_o.as_ref()) {
            for (x, y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
                *x += *y;
            }
        }
        if let (Some(a), Some(b)) = (self.d_w_r.as_mut(), other.d_w_r.as_ref()) {
            for (x, y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for v in self.d_x.as_mut_slice() {
            *v *= factor;
        }
        for v in self.d_w.as_mut_slice() {
            *v *= factor;
        }
        for v in self.d_logits.as_mut_slice() {
            *v *= factor;
        }
        if let Some(w_o) = self.d_w_o.as_mut() {
            for v in w_o.as_mut_slice() {
                *v *= factor;
            }
        }
        if let Some(w_r) = self.d_w_r.as_mut() {
            for v in w_r.as_mut_slice() {
                *v *= factor;
            }
        }
    }
}

/// Per-mask gate/value pre-activations under the hard masks.
fn mask_streams<T: Real>(
    x: &[T],
    w: &DenseMatrix<T>,
    mask: &BinaryMask,
) -> (Vec<T>, Vec<T>) {
    let d = w.cols();
    let mut gate = vec![T::zero(); d];
    let mut value = vec![T::zero(); d];
    for (k, &xk) in x.iter().enumerate() {
        let wrow = w.row(k);
        let mrow = &mask.bits()[k * d..(k + 1) * d];
        for j in 0..d {
            let p = xk * wrow[j];
            if mrow[j] == 1 {
                gate[j] += p;
            } else {
                value[j] += p;
            }
        }
    }
    (gate, value)
}

/// Fold an upstream gradient through the output projection:
/// returns (d_mid, d_W_o) for mid of length d and upstream of length out.
pub(crate) fn fold_output<T: Real>(
    mid: &[T],
    w_o: &DenseMatrix<T>,
    upstream: &[T],
) -> (Vec<T>, DenseMatrix<T>) {
    let (d, out) = (w_o.rows(), w_o.cols());
    debug_assert_eq!(mid.len(), d);
    debug_assert_eq!(upstream.len(), out);
    let mut d_mid = vec![T::zero(); d];
    let mut d_w_o = DenseMatrix::zeros(d, out);
    {
        let dw = d_w_o.as_mut_slice();
        for j in 0..d {
            let row = w_o.row(j);
            let mut acc = T::zero();
            for t in 0..out {
                acc += row[t] * upstream[t];
                dw[j * out + t] = mid[j] * upstream[t];
            }
            d_mid[j] = acc;
        }
    }
    (d_mid, d_w_o)
}

/// Backward for the masked layer, covering the plain sum over masks, the
/// optional output projection (upstream of length `W_o.cols()`), and the
/// routed variant when the layer carries a router.
pub fn mglu_backward<T: Real>(
    x: &DenseVector<T>,
    layer: &MgluLayer<T>,
    upstream: &DenseVector<T>,
) -> Result<GradBundle<T>> {
    let masks = layer.binarized();
    mglu_backward_with_masks(x, layer, &masks, upstream).map(|(bundle, _)| bundle)
}

/// Backward over pre-binarized masks; also returns the layer output so the
/// trainer gets forward and backward from one pass. The mask slice must be
/// the binarization of the layer's current logits.
pub(crate) fn mglu_backward_with_masks<T: Real>(
    x: &DenseVector<T>,
    layer: &MgluLayer<T>,
    masks: &[BinaryMask],
    upstream: &DenseVector<T>,
) -> Result<(GradBundle<T>, Vec<T>)> {
    let (h, d, n_m) = (layer.h(), layer.d(), layer.n_m());
    if x.len() != h {
        return Err(MgluError::DimMismatch(format!(
            "input length {} != h {}",
            x.len(),
            h
        )));
    }
    let expected_up = layer.w_o().map_or(d, DenseMatrix::cols);
    if upstream.len() != expected_up {
        return Err(MgluError::DimMismatch(format!(
            "upstream length {} != {}",
            upstream.len(),
            expected_up
        )));
    }
    let kind = layer.activation();
    let xs = x.as_slice();

    // Router weights over the masks; dense sum means weight 1 everywhere.
    let (route_weights, selected): (Vec<T>, Vec<usize>) = match layer.router() {
        Some(router) => {
            let logits = router.w_r.vec_mat(xs);
            let sel = select_topk(&logits, router.k);
            let gates = crate::reference::topk_gate(x, &router.w_r, router.k)?;
            (gates.into_vec(), sel)
        }
        None => (vec![T::one(); n_m], (0..n_m).collect()),
    };

    // Recompute the streams for the participating masks.
    let mut streams: Vec<Option<(Vec<T>, Vec<T>)>> = vec![None; n_m];
    for &i in &selected {
        streams[i] = Some(mask_streams(xs, layer.w(), &masks[i]));
    }
    let mut mid = vec![T::zero(); d];
    for &i in &selected {
        let (gate, value) = streams[i].as_ref().unwrap();
        let wi = route_weights[i];
        for j in 0..d {
            mid[j] += wi * kind.eval(gate[j]) * value[j];
        }
    }

    // Upstream against the intermediate activations.
    let (d_mid, d_w_o) = match layer.w_o() {
        Some(w_o) => {
            let (d_mid, d_w_o) = fold_output(&mid, w_o, upstream.as_slice());
            (d_mid, Some(d_w_o))
        }
        None => (upstream.as_slice().to_vec(), None),
    };

    let mut d_x = vec![T::zero(); h];
    let mut d_w = DenseMatrix::zeros(h, d);
    let mut d_logits = layer.mask_logits().zeros_like();

    for &i in &selected {
        let (gate, value) = streams[i].as_ref().unwrap();
        let wi = route_weights[i];
        // du = d_mid * g'(gate) * value, dv = d_mid * g(gate), both routed.
        let mut du = vec![T::zero(); d];
        let mut dv = vec![T::zero(); d];
        for j in 0..d {
            du[j] = d_mid[j] * wi * kind.grad(gate[j]) * value[j];
            dv[j] = d_mid[j] * wi * kind.eval(gate[j]);
        }
        let dl = d_logits.mask_mut(i);
        let dw = d_w.as_mut_slice();
        for k in 0..h {
            let xk = xs[k];
            let wrow = layer.w().row(k);
            let mrow = &masks[i].bits()[k * d..(k + 1) * d];
            let mut dxk = T::zero();
            for j in 0..d {
                let stream_grad = if mrow[j] == 1 { du[j] } else { dv[j] };
                dw[k * d + j] += xk * stream_grad;
                dxk += wrow[j] * stream_grad;
                // Straight-through: moving mask mass from value to gate.
                dl[k * d + j] = xk * wrow[j] * (du[j] - dv[j]);
            }
            d_x[k] += dxk;
        }
    }

    // Router gradient: softmax Jacobian restricted to the selected set, the
    // hard selection treated as constant.
    let d_w_r = match layer.router() {
        Some(router) => {
            let mut term_dot = vec![T::zero(); n_m];
            for &i in &selected {
                let (gate, value) = streams[i].as_ref().unwrap();
                let mut acc = T::zero();
                for j in 0..d {
                    acc += d_mid[j] * kind.eval(gate[j]) * value[j];
                }
                term_dot[i] = acc;
            }
            let weighted_mean: T = selected
                .iter()
                .map(|&i| route_weights[i] * term_dot[i])
                .fold(T::zero(), |a, b| a + b);
            let mut d_logit_router = vec![T::zero(); n_m];
            for &q in &selected {
                d_logit_router[q] = route_weights[q] * (term_dot[q] - weighted_mean);
            }
            let mut d_w_r = DenseMatrix::zeros(h, n_m);
            {
                let dwr = d_w_r.as_mut_slice();
                for k in 0..h {
                    let wrow = router.w_r.row(k);
                    let mut dxk = T::zero();
                    for &q in &selected {
                        dwr[k * n_m + q] = xs[k] * d_logit_router[q];
                        dxk += wrow[q] * d_logit_router[q];
                    }
                    d_x[k] += dxk;
                }
            }
            Some(d_w_r)
        }
        None => None,
    };

    Ok((
        GradBundle {
            d_x: DenseVector::from_vec(d_x)?,
            d_w,
            d_logits,
            d_w_o,
            d_w_r,
        },
        match layer.w_o() {
            Some(w_o) => w_o.vec_mat(&mid),
            None => mid,
        },
    ))
}

/// Backward for the single-mask ablation variants, with the same optional
/// output-projection folding as [`mglu_backward`].
pub fn ablation_backward<T: Real>(
    x: &DenseVector<T>,
    layer: &MgluLayer<T>,
    variant: AblationVariant,
    upstream: &DenseVector<T>,
) -> Result<GradBundle<T>> {
    ablation_backward_with_masks(x, layer, &layer.binarized(), variant, upstream)
        .map(|(bundle, _)| bundle)
}

pub(crate) fn ablation_backward_with_masks<T: Real>(
    x: &DenseVector<T>,
    layer: &MgluLayer<T>,
    masks: &[BinaryMask],
    variant: AblationVariant,
    upstream: &DenseVector<T>,
) -> Result<(GradBundle<T>, Vec<T>)> {
    let (h, d) = (layer.h(), layer.d());
    if layer.n_m() != 1 {
        return Err(MgluError::DimMismatch(format!(
            "ablation variants are single-mask, layer has n_m={}",
            layer.n_m()
        )));
    }
    if x.len() != h {
        return Err(MgluError::DimMismatch(format!(
            "input length {} != h {}",
            x.len(),
            h
        )));
    }
    let kind = layer.activation();
    let xs = x.as_slice();
    let mask = &masks[0];

    let (mg, mv) = mask_streams(xs, layer.w(), mask);
    let full = layer.w().vec_mat(xs);
    // Which pre-activation feeds each stream in this variant.
    let (gate, value): (&[T], &[T]) = match variant {
        AblationVariant::NoGateMask => (&full, &mv),
        AblationVariant::NoValueMask => (&mg, &full),
        AblationVariant::NoMasks => (&full, &full),
    };
    let mut mid = vec![T::zero(); d];
    for j in 0..d {
        mid[j] = kind.eval(gate[j]) * value[j];
    }
    let (d_mid, d_w_o) = match layer.w_o() {
        Some(w_o) => {
            if upstream.len() != w_o.cols() {
                return Err(MgluError::DimMismatch(format!(
                    "upstream length {} != {}",
                    upstream.len(),
                    w_o.cols()
                )));
            }
            let (d_mid, d_w_o) = fold_output(&mid, w_o, upstream.as_slice());
            (d_mid, Some(d_w_o))
        }
        None => {
            if upstream.len() != d {
                return Err(MgluError::DimMismatch(format!(
                    "upstream length {} != d {}",
                    upstream.len(),
                    d
                )));
            }
            (upstream.as_slice().to_vec(), None)
        }
    };

    let mut du = vec![T::zero(); d];
    let mut dv = vec![T::zero(); d];
    for j in 0..d {
        du[j] = d_mid[j] * kind.grad(gate[j]) * value[j];
        dv[j] = d_mid[j] * kind.eval(gate[j]);
    }

    let mut d_x = vec![T::zero(); h];
    let mut d_w = DenseMatrix::zeros(h, d);
    let mut d_logits = layer.mask_logits().zeros_like();
    {
        let dw = d_w.as_mut_slice();
        let dl = d_logits.mask_mut(0);
        for k in 0..h {
            let xk = xs[k];
            let wrow = layer.w().row(k);
            let mrow = &mask.bits()[k * d..(k + 1) * d];
            let mut dxk = T::zero();
            for j in 0..d {
                let m = mrow[j] == 1;
                // Per-stream weight sensitivities depend on which streams
                // see the mask in this variant.
                let (w_grad, l_grad) = match variant {
                    AblationVariant::NoGateMask => {
                        let wg = du[j] + if m { T::zero() } else { dv[j] };
                        (wg, -xk * wrow[j] * dv[j])
                    }
                    AblationVariant::NoValueMask => {
                        let wg = dv[j] + if m { du[j] } else { T::zero() };
                        (wg, xk * wrow[j] * du[j])
                    }
                    AblationVariant::NoMasks => (du[j] + dv[j], T::zero()),
                };
                dw[k * d + j] += xk * w_grad;
                dxk += wrow[j] * w_grad;
                dl[k * d + j] = l_grad;
            }
            d_x[k] += dxk;
        }
    }

    Ok((
        GradBundle {
            d_x: DenseVector::from_vec(d_x)?,
            d_w,
            d_logits,
            d_w_o,
            d_w_r: None,
        },
        match layer.w_o() {
            Some(w_o) => w_o.vec_mat(&mid),
            None => mid,
        },
    ))
}

/// Backward for the two-matrix gated layer: returns (d_x, d_W_g, d_W_v).
pub fn glu_backward<T: Real>(
    x: &DenseVector<T>,
    w_g: &DenseMatrix<T>,
    w_v: &DenseMatrix<T>,
    kind: Activation,
    upstream: &DenseVector<T>,
) -> Result<(DenseVector<T>, DenseMatrix<T>, DenseMatrix<T>)> {
    let (h, d) = (w_g.rows(), w_g.cols());
    if x.len() != h || upstream.len() != d || w_v.rows() != h || w_v.cols() != d {
        return Err(MgluError::DimMismatch("glu_backward shapes".into()));
    }
    let xs = x.as_slice();
    let gate = w_g.vec_mat(xs);
    let value = w_v.vec_mat(xs);
    let up = upstream.as_slice();
    let mut du = vec![T::zero(); d];
    let mut dv = vec![T::zero(); d];
    for j in 0..d {
        du[j] = up[j] * kind.grad(gate[j]) * value[j];
        dv[j] = up[j] * kind.eval(gate[j]);
    }
    let mut d_x = vec![T::zero(); h];
    let mut d_wg = DenseMatrix::zeros(h, d);
    let mut d_wv = DenseMatrix::zeros(h, d);
    {
        let dg = d_wg.as_mut_slice();
        let dvs = d_wv.as_mut_slice();
        for k in 0..h {
            let xk = xs[k];
            let grow = w_g.row(k);
            let vrow = w_v.row(k);
            let mut dxk = T::zero();
            for j in 0..d {
                dg[k * d + j] = xk * du[j];
                dvs[k * d + j] = xk * dv[j];
                dxk += grow[j] * du[j] + vrow[j] * dv[j];
            }
            d_x[k] = dxk;
        }
    }
    Ok((DenseVector::from_vec(d_x)?, d_wg, d_wv))
}

/// Continuous mask surrogate: the layer equation with each hard mask entry
/// replaced by its raw soft value and the complement by one minus it. At
/// soft values in {0,1} this equals the hard forward exactly.
pub fn relaxed_mglu_forward<T: Real>(
    x: &DenseVector<T>,
    w: &DenseMatrix<T>,
    soft: &MaskLogits<T>,
    kind: Activation,
) -> Result<DenseVector<T>> {
    relaxed_mglu_forward_weighted(x, w, soft, kind, None)
}

/// Relaxed forward with optional per-mask routing weights, used to check the
/// routed straight-through gradient.
pub fn relaxed_mglu_forward_weighted<T: Real>(
    x: &DenseVector<T>,
    w: &DenseMatrix<T>,
    soft: &MaskLogits<T>,
    kind: Activation,
    weights: Option<&[T]>,
) -> Result<DenseVector<T>> {
    if soft.rows() != w.rows() || soft.cols() != w.cols() {
        return Err(MgluError::DimMismatch(format!(
            "soft masks {}x{} != weight {}x{}",
            soft.rows(),
            soft.cols(),
            w.rows(),
            w.cols()
        )));
    }
    if x.len() != w.rows() {
        return Err(MgluError::DimMismatch(format!(
            "input length {} != h {}",
            x.len(),
            w.rows()
        )));
    }
    let (h, d) = (w.rows(), w.cols());
    let xs = x.as_slice();
    let mut out = vec![T::zero(); d];
    for i in 0..soft.n_m() {
        let wi = weights.map_or(T::one(), |ws| ws[i]);
        if wi == T::zero() {
            continue;
        }
        let soft_i = soft.mask(i);
        let mut gate = vec![T::zero(); d];
        let mut value = vec![T::zero(); d];
        for k in 0..h {
            let xk = xs[k];
            let wrow = w.row(k);
            let srow = &soft_i[k * d..(k + 1) * d];
            for j in 0..d {
                let p = xk * wrow[j];
                gate[j] += p * srow[j];
                value[j] += p * (T::one() - srow[j]);
            }
        }
        for j in 0..d {
            out[j] += wi * kind.eval(gate[j]) * value[j];
        }
    }
    DenseVector::from_vec(out)
}

/// Central finite differences of a scalar function, one coordinate at a time.
pub fn finite_diff_grad<T: Real>(
    f: impl Fn(&[T]) -> T,
    params: &[T],
    eps: T,
) -> Result<Vec<T>> {
    let mut work = params.to_vec();
    let mut grad = vec![T::zero(); params.len()];
    let two = T::lit(2.0);
    for j in 0..params.len() {
        work[j] = params[j] + eps;
        let fp = f(&work);
        work[j] = params[j] - eps;
        let fm = f(&work);
        work[j] = params[j];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(MgluError::NonFinite("finite-difference evaluation".into()));
        }
        grad[j] = (fp - fm) / (two * eps);
    }
    Ok(grad)
}

/// Per-block outcome of a gradient check.
#[derive(Debug, Clone, serde::Serialize)]
pub struct BlockReport {
    pub name: String,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockReport>,
    pub pass: bool,
}

/// Compare an analytic block against its numeric oracle. Relative error is
/// floored at 1e-3 magnitude so dead coordinates do not divide by zero.
pub fn block_report<T: Real>(name: &str, analytic: &[T], numeric: &[T], tol: f64) -> BlockReport {
    assert_eq!(analytic.len(), numeric.len(), "block {name} length");
    let mut max_abs = 0f64;
    let mut max_rel = 0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        let a = a.as_f64();
        let n = n.as_f64();
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(1e-3);
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(rel);
    }
    BlockReport {
        name: name.to_string(),
        max_abs_err: max_abs,
        max_rel_err: max_rel,
        pass: max_rel <= tol,
    }
}

/// The layer's full composition as the checks see it: routed sum when a
/// router is present, then the output projection when present.
fn composed_forward<T: Real>(layer: &MgluLayer<T>, x: &DenseVector<T>) -> Result<Vec<T>> {
    let mid = match layer.router() {
        Some(router) => crate::reference::mglu_topk_forward(x, layer, router.k)?,
        None => crate::reference::mglu_forward_naive(
            x,
            layer.w(),
            &layer.binarized(),
            layer.activation(),
        )?,
    };
    Ok(match layer.w_o() {
        Some(w_o) => w_o.vec_mat(mid.as_slice()),
        None => mid.into_vec(),
    })
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (x, y)| acc + *x * *y)
}

/// Checks every analytic gradient block against central finite differences
/// of the scalar probe `dot(upstream, forward)`. Instances are redrawn when
/// they sit too close to a ReLU kink or a top-k selection boundary, where
/// finite differences are meaningless.
pub fn check_gradients<T: Real>(
    layer: &MgluLayer<T>,
    seed: u64,
    tol: f64,
) -> Result<GradCheckReport> {
    use rand::SeedableRng;
    let eps = T::lit(1e-5);
    let h = layer.h();
    let out_len = layer.w_o().map_or(layer.d(), DenseMatrix::cols);

    let mut attempt = 0u64;
    let (x, upstream) = loop {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt * 7919));
        let x = DenseVector::<T>::random_normal(h, 1.0, &mut rng);
        let upstream = DenseVector::<T>::random_normal(out_len, 1.0, &mut rng);
        if instance_is_well_separated(layer, &x) || attempt >= 32 {
            break (x, upstream);
        }
        attempt += 1;
    };

    let bundle = mglu_backward(&x, layer, &upstream)?;
    let mut blocks = Vec::new();

    let probe_x = |xv: &[T]| {
        let xd = DenseVector::from_vec(xv.to_vec()).unwrap();
        dot(upstream.as_slice(), &composed_forward(layer, &xd).unwrap())
    };
    let fd_x = finite_diff_grad(probe_x, x.as_slice(), eps)?;
    blocks.push(block_report("d_x", bundle.d_x.as_slice(), &fd_x, tol));

    let probe_w = |wv: &[T]| {
        let mut l = layer.clone();
        l.params_mut().w.copy_from_slice(wv);
        dot(upstream.as_slice(), &composed_forward(&l, &x).unwrap())
    };
    let fd_w = finite_diff_grad(probe_w, layer.w().as_slice(), eps)?;
    blocks.push(block_report("d_W", bundle.d_w.as_slice(), &fd_w, tol));

    // Straight-through oracle: differentiate the relaxed surrogate at the
    // binarized mask point. Routing weights, when present, are data and stay
    // fixed while the soft masks move.
    let hard_point: Vec<T> = layer
        .binarized()
        .iter()
        .flat_map(|m| m.bits().iter().map(|&b| if b == 1 { T::one() } else { T::zero() }))
        .collect();
    let route_weights: Option<Vec<T>> = match layer.router() {
        Some(router) => Some(
            crate::reference::topk_gate(&x, &router.w_r, router.k)?.into_vec(),
        ),
        None => None,
    };
    let probe_logits = |soft: &[T]| {
        let soft_masks = MaskLogits::from_vec(layer.n_m(), h, layer.d(), soft.to_vec()).unwrap();
        let mid = relaxed_mglu_forward_weighted(
            &x,
            layer.w(),
            &soft_masks,
            layer.activation(),
            route_weights.as_deref(),
        )
        .unwrap();
        let full = match layer.w_o() {
            Some(w_o) => w_o.vec_mat(mid.as_slice()),
            None => mid.into_vec(),
        };
        dot(upstream.as_slice(), &full)
    };
    let fd_logits = finite_diff_grad(probe_logits, &hard_point, eps)?;
    blocks.push(block_report(
        "d_logits",
        bundle.d_logits.as_slice(),
        &fd_logits,
        tol,
    ));

    if let Some(w_o) = layer.w_o() {
        let probe_wo = |wv: &[T]| {
            let mut l = layer.clone();
            l.params_mut().w_o.unwrap().copy_from_slice(wv);
            dot(upstream.as_slice(), &composed_forward(&l, &x).unwrap())
        };
        let fd_wo = finite_diff_grad(probe_wo, w_o.as_slice(), eps)?;
        blocks.push(block_report(
            "d_W_o",
            bundle.d_w_o.as_ref().unwrap().as_slice(),
            &fd_wo,
            tol,
        ));
    }

    if let Some(router) = layer.router() {
        let probe_wr = |wv: &[T]| {
            let mut l = layer.clone();
            l.params_mut().w_r.unwrap().copy_from_slice(wv);
            dot(upstream.as_slice(), &composed_forward(&l, &x).unwrap())
        };
        let fd_wr = finite_diff_grad(probe_wr, router.w_r.as_slice(), eps)?;
        blocks.push(block_report(
            "d_W_r",
            bundle.d_w_r.as_ref().unwrap().as_slice(),
            &fd_wr,
            tol,
        ));
    }

    let pass = blocks.iter().all(|b| b.pass);
    Ok(GradCheckReport { blocks, pass })
}

/// Reject draws whose gate pre-activations graze the ReLU kink or whose
/// router logits tie near the selection boundary.
fn instance_is_well_separated<T: Real>(layer: &MgluLayer<T>, x: &DenseVector<T>) -> bool {
    let margin = T::lit(1e-3);
    if layer.activation() == Activation::Relu {
        for mask in layer.binarized() {
            let (gate, _) = mask_streams(x.as_slice(), layer.w(), &mask);
            if gate.iter().any(|g| g.abs() < margin) {
                return false;
            }
        }
    }
    if let Some(router) = layer.router() {
        let mut logits = router.w_r.vec_mat(x.as_slice());
        logits.sort_by(|a, b| b.partial_cmp(a).unwrap());
        if router.k < logits.len() {
            let gap = logits[router.k - 1] - logits[router.k];
            if gap.abs() < margin {
                return false;
            }
        }
    }
    true
}
