//! Fused split-K masked matrix-vector kernel.
//!
//! One pass over the weights serves every mask: per output row the kernel
//! keeps an ungated running total `t` and one gated sum `s_i` per mask, and
//! emits the complement stream as `t - s_i` instead of re-reading weights
//! through the inverted mask. Masks arrive bit-packed, one word per weight
//! element, so a single word load carries all n_m mask bits.
//!
//! Two storage orders are supported without copying:
//! - output-major `A` (M x N row-major, reduction along each row), the
//!   layout of [`fused_masked_matvec`];
//! - reduction-major `W` (h x d row-major, outputs along each row), the
//!   layer layout, walked column-band by column-band so the transposed view
//!   never materializes.
//!
//! In deterministic mode every output cell accumulates its terms in
//! ascending-k order as one continued sum, so results are bit-identical for
//! any `split_k`. Otherwise each chunk reduces privately and partials are
//! combined in ascending chunk order, which is only reproducible up to the
//! usual reassociation tolerance.

use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::error::{MgluError, Result};
use crate::layer::MgluLayer;
use crate::masks::{PackedMasks, PackedWords};
use crate::real::Real;
use crate::tensor::{DenseMatrix, DenseVector};

/// Outputs per parallel work unit in the reduction-major walk. Accumulators
/// for a full band stay cache-resident at the largest supported mask count.
const BAND: usize = 512;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelConfig {
    /// Number of chunks the reduction dimension is split into.
    pub split_k: usize,
    /// Lane count for tiled accumulation in the non-deterministic row walk.
    pub tile_width: usize,
    /// Fixed ascending reduction order, bit-exact across `split_k`.
    pub deterministic: bool,
    /// Partition output rows across threads.
    pub parallel_rows: bool,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            split_k: 1,
            tile_width: 8,
            deterministic: false,
            parallel_rows: true,
        }
    }
}

impl KernelConfig {
    pub fn deterministic() -> Self {
        Self {
            deterministic: true,
            ..Self::default()
        }
    }

    pub fn with_split_k(mut self, split_k: usize) -> Self {
        self.split_k = split_k;
        self
    }

    fn validate(&self, reduction_len: usize) -> Result<()> {
        if self.split_k == 0 || self.split_k > reduction_len {
            return Err(MgluError::InvalidKernelConfig(format!(
                "split_k {} outside 1..={}",
                self.split_k, reduction_len
            )));
        }
        if self.tile_width == 0 || !self.tile_width.is_power_of_two() || self.tile_width > 64 {
            return Err(MgluError::InvalidKernelConfig(format!(
                "tile_width {} must be a power of two in 1..=64",
                self.tile_width
            )));
        }
        Ok(())
    }
}

/// Accumulators produced by one kernel invocation: per mask, the gated row
/// sums and their complements against the ungated total.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialSums<T> {
    n_m: usize,
    m_rows: usize,
    gate: Vec<T>,
    value: Vec<T>,
}

impl<T: Real> PartialSums<T> {
    pub fn n_m(&self) -> usize {
        self.n_m
    }

    pub fn m_rows(&self) -> usize {
        self.m_rows
    }

    /// Gate stream of mask `i`, length `m_rows`.
    pub fn gate(&self, i: usize) -> &[T] {
        &self.gate[i * self.m_rows..(i + 1) * self.m_rows]
    }

    /// Value stream of mask `i`: the ungated total minus the gate stream.
    pub fn value(&self, i: usize) -> &[T] {
        &self.value[i * self.m_rows..(i + 1) * self.m_rows]
    }
}

/// Element loads and stores one kernel invocation issued against global
/// buffers, plus the modeled half-precision transfer volume.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficReport {
    pub weight_bytes_read: u64,
    pub mask_bytes_read: u64,
    pub input_bytes_read: u64,
    pub output_bytes_written: u64,
    /// storage_width_bits * h * d weight bits plus n_m * h * d mask bits.
    pub modeled_weight_bits: u64,
}

#[derive(Default)]
struct Counters {
    weight: AtomicU64,
    mask: AtomicU64,
    input: AtomicU64,
    output: AtomicU64,
}

impl Counters {
    fn add(&self, weight: u64, mask: u64, input: u64, output: u64) {
        self.weight.fetch_add(weight, Ordering::Relaxed);
        self.mask.fetch_add(mask, Ordering::Relaxed);
        self.input.fetch_add(input, Ordering::Relaxed);
        self.output.fetch_add(output, Ordering::Relaxed);
    }
}

trait Word: Copy + Send + Sync + 'static {
    /// Mask bit `i` as 0/1.
    fn bit01(self, i: usize) -> u8;
}

impl Word for u8 {
    #[inline(always)]
    fn bit01(self, i: usize) -> u8 {
        (self >> i) & 1
    }
}

impl Word for u16 {
    #[inline(always)]
    fn bit01(self, i: usize) -> u8 {
        ((self >> i) & 1) as u8
    }
}

#[inline]
fn chunk_bounds(len: usize, split_k: usize, chunk: usize) -> (usize, usize) {
    let size = len.div_ceil(split_k);
    let start = chunk * size;
    (start.min(len), (start + size).min(len))
}

// ---------------------------------------------------------------------------
// Output-major walk: A is M x N row-major, each row reduced independently.
// ---------------------------------------------------------------------------

struct RowScratch<T> {
    lanes: Vec<T>,
    tail: Vec<T>,
}

impl<T: Real> RowScratch<T> {
    fn new(n_m: usize, tile_width: usize) -> Self {
        Self {
            lanes: vec![T::zero(); (1 + n_m) * tile_width],
            tail: vec![T::zero(); 1 + n_m],
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn row_worker<T: Real, W: Word>(
    arow: &[T],
    wrow: &[W],
    x: &[T],
    n_m: usize,
    cfg: &KernelConfig,
    scratch: &mut RowScratch<T>,
    out: &mut [T],
) {
    let n = x.len();
    out.fill(T::zero());
    for chunk in 0..cfg.split_k {
        let (start, end) = chunk_bounds(n, cfg.split_k, chunk);
        if start >= end {
            continue;
        }
        if cfg.deterministic {
            // Continued ascending-k scalar accumulation: chunk boundaries
            // leave no trace in the result. Multiply-by-bit keeps the loop
            // free of data-dependent control flow; adding a signed zero
            // never flips an accumulator bit.
            for k in start..end {
                let v = arow[k] * x[k];
                out[0] += v;
                let w = wrow[k];
                for i in 0..n_m {
                    out[1 + i] += v * T::from_bit(w.bit01(i));
                }
            }
        } else {
            let lanes = cfg.tile_width;
            scratch.lanes.fill(T::zero());
            scratch.tail.fill(T::zero());
            let mut k = start;
            while k + lanes <= end {
                for l in 0..lanes {
                    let v = arow[k + l] * x[k + l];
                    scratch.lanes[l] += v;
                    let w = wrow[k + l];
                    for i in 0..n_m {
                        scratch.lanes[(1 + i) * lanes + l] += v * T::from_bit(w.bit01(i));
                    }
                }
                k += lanes;
            }
            while k < end {
                let v = arow[k] * x[k];
                scratch.tail[0] += v;
                let w = wrow[k];
                for i in 0..n_m {
                    scratch.tail[1 + i] += v * T::from_bit(w.bit01(i));
                }
                k += 1;
            }
            // Lanes reduce in ascending order, then the chunk partial joins
            // the row total, also in ascending chunk order.
            for slot in 0..=n_m {
                let mut acc = T::zero();
                for l in 0..lanes {
                    acc += scratch.lanes[slot * lanes + l];
                }
                acc += scratch.tail[slot];
                out[slot] += acc;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn row_core<T: Real, W: Word, const COUNTED: bool>(
    a: &[T],
    m: usize,
    n: usize,
    x: &[T],
    words: &[W],
    n_m: usize,
    cfg: &KernelConfig,
    counters: &Counters,
    flat: &mut [T],
) {
    let stride = 1 + n_m;
    debug_assert_eq!(flat.len(), m * stride);
    let run = |row: usize, scratch: &mut RowScratch<T>, out: &mut [T]| {
        row_worker(
            &a[row * n..(row + 1) * n],
            &words[row * n..(row + 1) * n],
            x,
            n_m,
            cfg,
            scratch,
            out,
        );
        if COUNTED {
            let word = std::mem::size_of::<W>() as u64;
            counters.add(n as u64, n as u64 * word, n as u64, 2 * n_m as u64);
        }
    };
    if cfg.parallel_rows {
        flat.par_chunks_mut(stride).enumerate().for_each_init(
            || RowScratch::new(n_m, cfg.tile_width),
            |scratch, (row, out)| run(row, scratch, out),
        );
    } else {
        let mut scratch = RowScratch::new(n_m, cfg.tile_width);
        for (row, out) in flat.chunks_mut(stride).enumerate() {
            run(row, &mut scratch, out);
        }
    }
}

// ---------------------------------------------------------------------------
// Reduction-major walk: W is h x d row-major; outputs are W columns. Bands
// of columns stream all h rows once, which is the no-copy transposed view.
// ---------------------------------------------------------------------------

struct BandScratch<T> {
    acc: Vec<T>,
    chunk: Vec<T>,
    /// Product rows for the 4-way unrolled walk, four bands long.
    vbuf: Vec<T>,
}

impl<T: Real> BandScratch<T> {
    fn new(n_m: usize, band: usize) -> Self {
        Self {
            acc: vec![T::zero(); (1 + n_m) * band],
            chunk: vec![T::zero(); (1 + n_m) * band],
            vbuf: vec![T::zero(); 4 * band],
        }
    }
}

// Kept out of line: inlined into the dispatch loop this body loses its
// vector lowering.
#[allow(clippy::too_many_arguments)]
#[inline(never)]
fn band_worker<T: Real, W: Word>(
    w_data: &[T],
    words: &[W],
    x: &[T],
    d: usize,
    n_m: usize,
    split_k: usize,
    deterministic: bool,
    j0: usize,
    blen: usize,
    scratch: &mut BandScratch<T>,
    out_flat: &mut [T],
) {
    let h = x.len();
    let BandScratch { acc, chunk, vbuf } = scratch;
    acc[..(1 + n_m) * blen].fill(T::zero());
    for c in 0..split_k {
        let (start, end) = chunk_bounds(h, split_k, c);
        if start >= end {
            continue;
        }
        let target: &mut [T] = if deterministic {
            &mut acc[..(1 + n_m) * blen]
        } else {
            chunk[..(1 + n_m) * blen].fill(T::zero());
            &mut chunk[..(1 + n_m) * blen]
        };
        let (t_acc, gated) = target.split_at_mut(blen);
        let mut k = start;
        if !deterministic {
            // Fast path: four reduction rows at a time, so each accumulator
            // cell is touched once per quad instead of once per row. The
            // bit becomes a 0/1 multiplier, keeping the loop arithmetic-only
            // for the vectorizer; signed-zero adds never change a bit.
            while k + 4 <= end {
                let (x0, x1, x2, x3) = (x[k], x[k + 1], x[k + 2], x[k + 3]);
                let w0 = &w_data[k * d + j0..][..blen];
                let w1 = &w_data[(k + 1) * d + j0..][..blen];
                let w2 = &w_data[(k + 2) * d + j0..][..blen];
                let w3 = &w_data[(k + 3) * d + j0..][..blen];
                let m0 = &words[k * d + j0..][..blen];
                let m1 = &words[(k + 1) * d + j0..][..blen];
                let m2 = &words[(k + 2) * d + j0..][..blen];
                let m3 = &words[(k + 3) * d + j0..][..blen];
                let (vb0, rest) = vbuf.split_at_mut(blen);
                let (vb1, rest) = rest.split_at_mut(blen);
                let (vb2, rest) = rest.split_at_mut(blen);
                let vb3 = &mut rest[..blen];
                let (vb0, vb1, vb2) = (&mut vb0[..blen], &mut vb1[..blen], &mut vb2[..blen]);
                let t_acc = &mut t_acc[..blen];
                for jj in 0..blen {
                    let v0 = x0 * w0[jj];
                    let v1 = x1 * w1[jj];
                    let v2 = x2 * w2[jj];
                    let v3 = x3 * w3[jj];
                    vb0[jj] = v0;
                    vb1[jj] = v1;
                    vb2[jj] = v2;
                    vb3[jj] = v3;
                    t_acc[jj] += (v0 + v1) + (v2 + v3);
                }
                for i in 0..n_m {
                    let s = &mut gated[i * blen..][..blen];
                    for jj in 0..blen {
                        let a0 = vb0[jj].mask_by_bit(m0[jj].bit01(i));
                        let a1 = vb1[jj].mask_by_bit(m1[jj].bit01(i));
                        let a2 = vb2[jj].mask_by_bit(m2[jj].bit01(i));
                        let a3 = vb3[jj].mask_by_bit(m3[jj].bit01(i));
                        s[jj] += (a0 + a1) + (a2 + a3);
                    }
                }
                k += 4;
            }
        }
        // Deterministic walk and fast-path tail: strict ascending rows.
        while k < end {
            let xk = x[k];
            let wrow = &w_data[k * d + j0..k * d + j0 + blen];
            let mrow = &words[k * d + j0..k * d + j0 + blen];
            let vb = &mut vbuf[..blen];
            for ((v, &w), t) in vb.iter_mut().zip(wrow).zip(t_acc.iter_mut()) {
                *v = xk * w;
                *t += *v;
            }
            for i in 0..n_m {
                let s = &mut gated[i * blen..(i + 1) * blen];
                for ((s, &m), &v) in s.iter_mut().zip(mrow).zip(vb.iter()) {
                    *s += v * T::from_bit(m.bit01(i));
                }
            }
            k += 1;
        }
        if !deterministic {
            for (a, c) in acc[..(1 + n_m) * blen]
                .iter_mut()
                .zip(&chunk[..(1 + n_m) * blen])
            {
                *a += *c;
            }
        }
    }
    // Scatter the planar band accumulators into the interleaved output.
    let stride = 1 + n_m;
    for jj in 0..blen {
        for slot in 0..stride {
            out_flat[jj * stride + slot] = acc[slot * blen + jj];
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn band_core<T: Real, W: Word, const COUNTED: bool>(
    w_data: &[T],
    h: usize,
    d: usize,
    x: &[T],
    words: &[W],
    n_m: usize,
    cfg: &KernelConfig,
    counters: &Counters,
    flat: &mut [T],
) {
    let stride = 1 + n_m;
    let band = BAND.min(d.max(1));
    let run = |band_idx: usize, scratch: &mut BandScratch<T>, out_flat: &mut [T]| {
        let j0 = band_idx * band;
        let blen = out_flat.len() / stride;
        band_worker(
            w_data,
            words,
            x,
            d,
            n_m,
            cfg.split_k,
            cfg.deterministic,
            j0,
            blen,
            scratch,
            out_flat,
        );
        if COUNTED {
            let word = std::mem::size_of::<W>() as u64;
            counters.add(
                (blen * h) as u64,
                (blen * h) as u64 * word,
                h as u64,
                (2 * n_m * blen) as u64,
            );
        }
    };
    if cfg.parallel_rows {
        flat.par_chunks_mut(band * stride).enumerate().for_each_init(
            || BandScratch::new(n_m, band),
            |scratch, (idx, out)| run(idx, scratch, out),
        );
    } else {
        let mut scratch = BandScratch::new(n_m, band);
        for (idx, out) in flat.chunks_mut(band * stride).enumerate() {
            run(idx, &mut scratch, out);
        }
    }
}

fn finalize<T: Real>(flat: &[T], m: usize, n_m: usize) -> PartialSums<T> {
    let stride = 1 + n_m;
    let mut gate = vec![T::zero(); n_m * m];
    let mut value = vec![T::zero(); n_m * m];
    for r in 0..m {
        let t = flat[r * stride];
        for i in 0..n_m {
            let s = flat[r * stride + 1 + i];
            gate[i * m + r] = s;
            // Complement stream: the single subtraction that stands in for a
            // second masked pass over the weights.
            value[i * m + r] = t - s;
        }
    }
    PartialSums {
        n_m,
        m_rows: m,
        gate,
        value,
    }
}

fn check_packed_dims<T: Real>(mat: &DenseMatrix<T>, packed: &PackedMasks) -> Result<()> {
    if packed.rows() != mat.rows() || packed.cols() != mat.cols() {
        return Err(MgluError::DimMismatch(format!(
            "packed masks {}x{} != matrix {}x{}",
            packed.rows(),
            packed.cols(),
            mat.rows(),
            mat.cols()
        )));
    }
    Ok(())
}

fn run_row_form<T: Real, const COUNTED: bool>(
    a: &DenseMatrix<T>,
    x: &DenseVector<T>,
    packed: &PackedMasks,
    cfg: &KernelConfig,
    counters: &Counters,
) -> Result<PartialSums<T>> {
    check_packed_dims(a, packed)?;
    if x.len() != a.cols() {
        return Err(MgluError::DimMismatch(format!(
            "input length {} != matrix cols {}",
            x.len(),
            a.cols()
        )));
    }
    cfg.validate(a.cols())?;
    let (m, n, n_m) = (a.rows(), a.cols(), packed.n_m());
    let mut flat = vec![T::zero(); m * (1 + n_m)];
    match packed.words() {
        PackedWords::U8(w) => row_core::<T, u8, COUNTED>(
            a.as_slice(),
            m,
            n,
            x.as_slice(),
            w,
            n_m,
            cfg,
            counters,
            &mut flat,
        ),
        PackedWords::U16(w) => row_core::<T, u16, COUNTED>(
            a.as_slice(),
            m,
            n,
            x.as_slice(),
            w,
            n_m,
            cfg,
            counters,
            &mut flat,
        ),
    }
    Ok(finalize(&flat, m, n_m))
}

fn run_band_form<T: Real, const COUNTED: bool>(
    x: &DenseVector<T>,
    w: &DenseMatrix<T>,
    packed: &PackedMasks,
    cfg: &KernelConfig,
    counters: &Counters,
) -> Result<PartialSums<T>> {
    check_packed_dims(w, packed)?;
    if x.len() != w.rows() {
        return Err(MgluError::DimMismatch(format!(
            "input length {} != weight rows {}",
            x.len(),
            w.rows()
        )));
    }
    cfg.validate(w.rows())?;
    let (h, d, n_m) = (w.rows(), w.cols(), packed.n_m());
    let mut flat = vec![T::zero(); d * (1 + n_m)];
    match packed.words() {
        PackedWords::U8(words) => band_core::<T, u8, COUNTED>(
            w.as_slice(),
            h,
            d,
            x.as_slice(),
            words,
            n_m,
            cfg,
            counters,
            &mut flat,
        ),
        PackedWords::U16(words) => band_core::<T, u16, COUNTED>(
            w.as_slice(),
            h,
            d,
            x.as_slice(),
            words,
            n_m,
            cfg,
            counters,
            &mut flat,
        ),
    }
    Ok(finalize(&flat, d, n_m))
}

fn report_from<T: Real>(counters: &Counters, modeled_weight_bits: u64) -> TrafficReport {
    let elem = std::mem::size_of::<T>() as u64;
    TrafficReport {
        weight_bytes_read: counters.weight.load(Ordering::Relaxed) * elem,
        mask_bytes_read: counters.mask.load(Ordering::Relaxed),
        input_bytes_read: counters.input.load(Ordering::Relaxed) * elem,
        output_bytes_written: counters.output.load(Ordering::Relaxed) * elem,
        modeled_weight_bits,
    }
}

fn modeled_bits<T: Real>(mat: &DenseMatrix<T>, n_m: usize) -> u64 {
    let elems = (mat.rows() * mat.cols()) as u64;
    mat.storage().bits() * elems + n_m as u64 * elems
}

/// Split-K masked matvec over output-major `A` (M x N): per row `r` and mask
/// `i`, `gate[i][r]` sums the mask-selected products and `value[i][r]` is the
/// ungated row total minus that gate sum. Each element of `A` and each packed
/// word is read exactly once per invocation.
pub fn fused_masked_matvec<T: Real>(
    a: &DenseMatrix<T>,
    x: &DenseVector<T>,
    packed: &PackedMasks,
    cfg: &KernelConfig,
) -> Result<PartialSums<T>> {
    run_row_form::<T, false>(a, x, packed, cfg, &Counters::default())
}

/// [`fused_masked_matvec`] with element-load instrumentation.
pub fn fused_masked_matvec_counted<T: Real>(
    a: &DenseMatrix<T>,
    x: &DenseVector<T>,
    packed: &PackedMasks,
    cfg: &KernelConfig,
) -> Result<(PartialSums<T>, TrafficReport)> {
    let counters = Counters::default();
    let sums = run_row_form::<T, true>(a, x, packed, cfg, &counters)?;
    let report = report_from::<T>(&counters, modeled_bits(a, packed.n_m()));
    Ok((sums, report))
}

/// Kernel partials for the layer layout (x of length h against W h x d),
/// walking the transposed view in place. Packing is the caller's, so repeated
/// forwards pay no re-pack cost.
pub fn fused_layer_partials<T: Real>(
    x: &DenseVector<T>,
    w: &DenseMatrix<T>,
    packed: &PackedMasks,
    cfg: &KernelConfig,
) -> Result<PartialSums<T>> {
    run_band_form::<T, false>(x, w, packed, cfg, &Counters::default())
}

fn combine<T: Real>(sums: &PartialSums<T>, kind: Activation) -> DenseVector<T> {
    let mut out = vec![T::zero(); sums.m_rows()];
    for i in 0..sums.n_m() {
        let gate = sums.gate(i);
        let value = sums.value(i);
        for (o, (g, v)) in out.iter_mut().zip(gate.iter().zip(value)) {
            *o += kind.eval(*g) * *v;
        }
    }
    DenseVector::from_vec(out).expect("finite kernel output")
}

/// Fused forward over prepacked masks: activation and elementwise products
/// applied directly to the kernel partials.
pub fn mglu_forward_fused_prepacked<T: Real>(
    x: &DenseVector<T>,
    w: &DenseMatrix<T>,
    packed: &PackedMasks,
    kind: Activation,
    cfg: &KernelConfig,
) -> Result<DenseVector<T>> {
    let sums = fused_layer_partials(x, w, packed, cfg)?;
    Ok(combine(&sums, kind))
}

/// Fused layer forward: binarizes and packs the current mask logits, then
/// runs the single-pass kernel.
pub fn mglu_forward_fused<T: Real>(
    x: &DenseVector<T>,
    layer: &MgluLayer<T>,
    cfg: &KernelConfig,
) -> Result<DenseVector<T>> {
    mglu_forward_fused_prepacked(x, layer.w(), &layer.packed(), layer.activation(), cfg)
}

/// Fused layer forward plus the traffic it generated.
pub fn instrumented_forward<T: Real>(
    x: &DenseVector<T>,
    layer: &MgluLayer<T>,
    cfg: &KernelConfig,
) -> Result<(DenseVector<T>, TrafficReport)> {
    let packed = layer.packed();
    let counters = Counters::default();
    let sums = run_band_form::<T, true>(x, layer.w(), &packed, cfg, &counters)?;
    let report = report_from::<T>(&counters, modeled_bits(layer.w(), layer.n_m()));
    Ok((combine(&sums, layer.activation()), report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::{pack_masks, BinaryMask};
    use crate::reference::mglu_forward_naive;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn hand_instance() -> (DenseMatrix<f64>, DenseVector<f64>, PackedMasks) {
        let a = DenseMatrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let x = DenseVector::from_vec(vec![1.0, 1.0]).unwrap();
        let mask = BinaryMask::from_bits(2, 2, vec![1, 0, 0, 1]).unwrap();
        let packed = pack_masks(&[mask]).unwrap();
        (a, x, packed)
    }

    #[test]
    fn hand_computed_partials() {
        let (a, x, packed) = hand_instance();
        let sums = fused_masked_matvec(&a, &x, &packed, &KernelConfig::default()).unwrap();
        // t = [3, 7], gate = [1, 4], value = t - gate = [2, 3]
        assert_eq!(sums.gate(0), &[1.0, 4.0]);
        assert_eq!(sums.value(0), &[2.0, 3.0]);
    }

    #[test]
    fn hand_computed_fused_forward() {
        // Same instance in the layer layout: gate [1,4], value [2,3],
        // identity activation -> [1*2, 4*3].
        let w = DenseMatrix::from_vec(2, 2, vec![1.0, 3.0, 2.0, 4.0]).unwrap();
        let x = DenseVector::from_vec(vec![1.0, 1.0]).unwrap();
        let mask = BinaryMask::from_bits(2, 2, vec![1, 0, 0, 1]).unwrap();
        let packed = pack_masks(std::slice::from_ref(&mask)).unwrap();
        let y = mglu_forward_fused_prepacked(
            &x,
            &w,
            &packed,
            Activation::Identity,
            &KernelConfig::default(),
        )
        .unwrap();
        assert_eq!(y.as_slice(), &[2.0, 12.0]);
    }

    #[test]
    fn all_ones_mask_gives_zero_value_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = DenseMatrix::<f64>::random_normal(5, 8, 1.0, &mut rng);
        let x = DenseVector::random_normal(8, 1.0, &mut rng);
        let packed = pack_masks(&[BinaryMask::ones(5, 8)]).unwrap();
        let sums = fused_masked_matvec(&a, &x, &packed, &KernelConfig::default()).unwrap();
        let t: Vec<f64> = (0..5)
            .map(|r| a.row(r).iter().zip(x.as_slice()).map(|(w, xv)| w * xv).sum())
            .collect();
        for r in 0..5 {
            assert!((sums.gate(0)[r] - t[r]).abs() < 1e-12);
            assert_eq!(sums.value(0)[r], t[r] - sums.gate(0)[r]);
        }
    }

    #[test]
    fn split_k_deterministic_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = DenseMatrix::<f64>::random_normal(7, 33, 1.0, &mut rng);
        let x = DenseVector::random_normal(33, 1.0, &mut rng);
        let masks: Vec<_> = (0..3).map(|_| BinaryMask::random(7, 33, &mut rng)).collect();
        let packed = pack_masks(&masks).unwrap();
        let base = fused_masked_matvec(
            &a,
            &x,
            &packed,
            &KernelConfig::deterministic().with_split_k(1),
        )
        .unwrap();
        for split_k in [2, 4, 8, 33] {
            let sums = fused_masked_matvec(
                &a,
                &x,
                &packed,
                &KernelConfig::deterministic().with_split_k(split_k),
            )
            .unwrap();
            assert_eq!(sums, base, "split_k={split_k} changed deterministic bits");
        }
    }

    #[test]
    fn split_k_fast_mode_within_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = DenseMatrix::<f32>::random_normal(9, 73, 1.0, &mut rng);
        let x = DenseVector::random_normal(73, 1.0, &mut rng);
        let masks: Vec<_> = (0..2).map(|_| BinaryMask::random(9, 73, &mut rng)).collect();
        let packed = pack_masks(&masks).unwrap();
        let base =
            fused_masked_matvec(&a, &x, &packed, &KernelConfig::default().with_split_k(1)).unwrap();
        let scale = base
            .gate
            .iter()
            .chain(&base.value)
            .fold(0f32, |m, v| m.max(v.abs()));
        for split_k in [2, 4] {
            let sums =
                fused_masked_matvec(&a, &x, &packed, &KernelConfig::default().with_split_k(split_k))
                    .unwrap();
            for i in 0..2 {
                for r in 0..9 {
                    assert!((sums.gate(i)[r] - base.gate(i)[r]).abs() <= 1e-5 * scale);
                    assert!((sums.value(i)[r] - base.value(i)[r]).abs() <= 1e-5 * scale);
                }
            }
        }
    }

    #[test]
    fn split_k_larger_than_reduction_rejected() {
        let (a, x, packed) = hand_instance();
        let err = fused_masked_matvec(&a, &x, &packed, &KernelConfig::default().with_split_k(3));
        assert!(matches!(err, Err(MgluError::InvalidKernelConfig(_))));
    }

    #[test]
    fn layer_walk_matches_row_walk_transposed() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (h, d, n_m) = (13, 21, 4);
        let w = DenseMatrix::<f64>::random_normal(h, d, 1.0, &mut rng);
        let x = DenseVector::random_normal(h, 1.0, &mut rng);
        let masks: Vec<_> = (0..n_m).map(|_| BinaryMask::random(h, d, &mut rng)).collect();
        let packed = pack_masks(&masks).unwrap();

        // Explicit transpose fed to the output-major walk.
        let a_t = DenseMatrix::from_fn(d, h, |r, k| w.get(k, r));
        let masks_t: Vec<_> = masks
            .iter()
            .map(|m| {
                BinaryMask::from_bits(
                    d,
                    h,
                    (0..d * h).map(|i| m.get(i % h, i / h)).collect(),
                )
                .unwrap()
            })
            .collect();
        let packed_t = pack_masks(&masks_t).unwrap();

        let cfg = KernelConfig::deterministic().with_split_k(3);
        let via_band = fused_layer_partials(&x, &w, &packed, &cfg).unwrap();
        let via_rows = fused_masked_matvec(&a_t, &x, &packed_t, &cfg).unwrap();
        assert_eq!(via_band, via_rows);
    }

    #[test]
    fn fused_forward_matches_naive_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for n_m in [1usize, 2, 5, 9, 16] {
            let (h, d) = (17, 29);
            let w = DenseMatrix::<f64>::random_normal(h, d, 1.0, &mut rng);
            let x = DenseVector::random_normal(h, 1.0, &mut rng);
            let masks: Vec<_> = (0..n_m).map(|_| BinaryMask::random(h, d, &mut rng)).collect();
            let packed = pack_masks(&masks).unwrap();
            let fused = mglu_forward_fused_prepacked(
                &x,
                &w,
                &packed,
                Activation::Swish,
                &KernelConfig::deterministic(),
            )
            .unwrap();
            let naive = mglu_forward_naive(&x, &w, &masks, Activation::Swish).unwrap();
            let scale = naive
                .as_slice()
                .iter()
                .fold(0f64, |m, v| m.max(v.abs()))
                .max(1e-30);
            for (f, n) in fused.as_slice().iter().zip(naive.as_slice()) {
                assert!((f - n).abs() / scale < 1e-12, "n_m={n_m}: {f} vs {n}");
            }
        }
    }

    #[test]
    fn fused_all_ones_logits_yield_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = DenseMatrix::<f64>::random_normal(6, 11, 1.0, &mut rng);
        let logits = crate::masks::MaskLogits::from_vec(2, 6, 11, vec![5.0; 2 * 66]).unwrap();
        let layer =
            MgluLayer::new(w, logits, Activation::Gelu, None, None).unwrap();
        let x = DenseVector::random_normal(6, 1.0, &mut rng);
        let y = mglu_forward_fused(&x, &layer, &KernelConfig::default()).unwrap();
        assert_eq!(y.as_slice(), &vec![0.0; 11][..]);
    }

    #[test]
    fn counted_run_reads_each_weight_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for n_m in [1usize, 8, 16] {
            let layer = MgluLayer::<f32>::random(12, 40, n_m, Activation::Swish, &mut rng).unwrap();
            let x = DenseVector::random_normal(12, 1.0, &mut rng);
            let (_, report) =
                instrumented_forward(&x, &layer, &KernelConfig::default()).unwrap();
            assert_eq!(report.weight_bytes_read, 12 * 40 * 4, "n_m={n_m}");
            let word_bytes = if n_m <= 8 { 1 } else { 2 };
            assert_eq!(report.mask_bytes_read, 12 * 40 * word_bytes);
            // Modeled: 16-bit resident weights plus one bit per mask element.
            assert_eq!(
                report.modeled_weight_bits,
                (16 + n_m as u64) * 12 * 40
            );
        }
    }

    #[test]
    fn deterministic_value_is_exact_complement() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (h, d) = (31, 47);
        let w = DenseMatrix::<f64>::random_normal(h, d, 1.0, &mut rng);
        let x = DenseVector::random_normal(h, 1.0, &mut rng);
        let masks: Vec<_> = (0..3).map(|_| BinaryMask::random(h, d, &mut rng)).collect();
        let packed = pack_masks(&masks).unwrap();
        let sums =
            fused_layer_partials(&x, &w, &packed, &KernelConfig::deterministic()).unwrap();
        // Ascending-k reference total, the same order the kernel uses.
        let t = w.vec_mat(x.as_slice());
        for i in 0..3 {
            for j in 0..d {
                assert_eq!(sums.value(i)[j], t[j] - sums.gate(i)[j]);
            }
        }
    }
}
