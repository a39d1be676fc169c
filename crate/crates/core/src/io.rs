//! Binary layer file format.
//!
//! Little-endian layout, 32-byte header:
//!
//! ```text
//! magic "MGLU" | version u32 | h u64 | d u64 | n_m u16 | activation u8
//! flags u8 (bit0 W_o, bit1 router, bit2 masks packed) | precision u8 | 3 pad
//! ```
//!
//! Payload follows in declared order: W row-major, logits (n_m * h * d reals)
//! or packed words (one u8/u16 per element), optional W_o (d x h), optional
//! W_r (h x n_m) plus K as u16. All reals are stored as 32-bit floats, so a
//! double-precision layer round-trips at single precision.

use std::fs;
use std::path::Path;

use crate::activation::Activation;
use crate::error::{MgluError, Result};
use crate::layer::{MgluLayer, Router};
use crate::masks::{pack_masks, ste_binarize, unpack_masks, MaskLogits, PackedMasks, PackedWords};
use crate::real::{Precision, Real};
use crate::tensor::{DenseMatrix, StorageWidth};

const MAGIC: [u8; 4] = *b"MGLU";
const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 32;

const FLAG_W_O: u8 = 1;
const FLAG_ROUTER: u8 = 1 << 1;
const FLAG_PACKED: u8 = 1 << 2;

/// How the masks are written: trainable logits or frozen packed bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskStorage {
    Logits,
    Packed,
}

/// Layer decoded from a file, tagged with its declared precision.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyLayer {
    Single(MgluLayer<f32>),
    Double(MgluLayer<f64>),
}

impl AnyLayer {
    pub fn precision(&self) -> Precision {
        match self {
            AnyLayer::Single(_) => Precision::Single,
            AnyLayer::Double(_) => Precision::Double,
        }
    }
}

/// Exact on-disk size for a layer with the given shape and options.
pub fn file_size(
    h: u64,
    d: u64,
    n_m: u64,
    mask_storage: MaskStorage,
    has_w_o: bool,
    has_router: bool,
) -> u64 {
    let elems = h * d;
    let mask_bytes = match mask_storage {
        MaskStorage::Logits => n_m * elems * 4,
        MaskStorage::Packed => elems * if n_m <= 8 { 1 } else { 2 },
    };
    let mut size = HEADER_LEN as u64 + elems * 4 + mask_bytes;
    if has_w_o {
        size += elems * 4;
    }
    if has_router {
        size += h * n_m * 4 + 2;
    }
    size
}

pub fn save_layer<T: Real>(layer: &MgluLayer<T>, path: impl AsRef<Path>) -> Result<()> {
    save_layer_with(layer, path, MaskStorage::Logits)
}

pub fn save_layer_with<T: Real>(
    layer: &MgluLayer<T>,
    path: impl AsRef<Path>,
    mask_storage: MaskStorage,
) -> Result<()> {
    let h = layer.h();
    let d = layer.d();
    if let Some(w_o) = layer.w_o() {
        // The format fixes the output projection as d x h.
        if w_o.cols() != h {
            return Err(MgluError::DimMismatch(format!(
                "file format stores W_o as {}x{}, layer has {}x{}",
                d,
                h,
                w_o.rows(),
                w_o.cols()
            )));
        }
    }

    let mut flags = 0u8;
    if layer.w_o().is_some() {
        flags |= FLAG_W_O;
    }
    if layer.router().is_some() {
        flags |= FLAG_ROUTER;
    }
    if mask_storage == MaskStorage::Packed {
        flags |= FLAG_PACKED;
    }

    let mut buf = Vec::with_capacity(
        file_size(
            h as u64,
            d as u64,
            layer.n_m() as u64,
            mask_storage,
            layer.w_o().is_some(),
            layer.router().is_some(),
        ) as usize,
    );
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(h as u64).to_le_bytes());
    buf.extend_from_slice(&(d as u64).to_le_bytes());
    buf.extend_from_slice(&(layer.n_m() as u16).to_le_bytes());
    buf.push(layer.activation().code());
    buf.push(flags);
    buf.push(T::PRECISION.code());
    buf.extend_from_slice(&[0u8; 3]);
    debug_assert_eq!(buf.len(), HEADER_LEN);

    write_reals(&mut buf, layer.w().as_slice());
    match mask_storage {
        MaskStorage::Logits => write_reals(&mut buf, layer.mask_logits().as_slice()),
        MaskStorage::Packed => {
            let packed = pack_masks(&ste_binarize(layer.mask_logits()))
                .expect("layer invariants guarantee packable masks");
            match packed.words() {
                PackedWords::U8(w) => buf.extend_from_slice(w),
                PackedWords::U16(w) => {
                    for v in w {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
    }
    if let Some(w_o) = layer.w_o() {
        write_reals(&mut buf, w_o.as_slice());
    }
    if let Some(router) = layer.router() {
        write_reals(&mut buf, router.w_r.as_slice());
        buf.extend_from_slice(&(router.k as u16).to_le_bytes());
    }

    fs::write(path, buf)?;
    Ok(())
}

pub fn load_layer(path: impl AsRef<Path>) -> Result<AnyLayer> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor::new(&bytes);

    let magic: [u8; 4] = cur.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(MgluError::BadMagic { found: magic });
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(MgluError::UnsupportedVersion(version));
    }
    let h = u64::from_le_bytes(cur.take(8)?.try_into().unwrap());
    let d = u64::from_le_bytes(cur.take(8)?.try_into().unwrap());
    let n_m = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as u64;
    let activation_code = cur.take(1)?[0];
    let flags = cur.take(1)?[0];
    let precision_code = cur.take(1)?[0];
    cur.take(3)?; // padding

    let activation =
        Activation::from_code(activation_code).ok_or(MgluError::BadActivationCode(activation_code))?;
    let precision =
        Precision::from_code(precision_code).ok_or(MgluError::BadPrecisionCode(precision_code))?;
    if n_m == 0 || n_m > 16 {
        return Err(MgluError::MaskCountOutOfRange(n_m as usize));
    }

    // Validate the full payload budget against the actual file length before
    // any allocation, so a hostile header cannot trigger a huge reserve.
    let mask_storage = if flags & FLAG_PACKED != 0 {
        MaskStorage::Packed
    } else {
        MaskStorage::Logits
    };
    let expected = checked_file_size(
        h,
        d,
        n_m,
        mask_storage,
        flags & FLAG_W_O != 0,
        flags & FLAG_ROUTER != 0,
    )?;
    if (bytes.len() as u64) < expected {
        return Err(MgluError::Truncated {
            needed: expected,
            available: bytes.len() as u64,
        });
    }

    let h = h as usize;
    let d = d as usize;
    let n_m = n_m as usize;
    let elems = h * d;

    let w_data = cur.take_f32s(elems)?;
    let logits_data = match mask_storage {
        MaskStorage::Logits => cur.take_f32s(n_m * elems)?,
        MaskStorage::Packed => {
            let words = if n_m <= 8 {
                PackedWords::U8(cur.take(elems)?.to_vec())
            } else {
                let raw = cur.take(elems * 2)?;
                PackedWords::U16(
                    raw.chunks_exact(2)
                        .map(|b| u16::from_le_bytes([b[0], b[1]]))
                        .collect(),
                )
            };
            let packed = PackedMasks::from_words(n_m, h, d, words)?;
            // Frozen masks come back as +/-1 logits; binarization reproduces
            // the stored bits exactly.
            let mut data = Vec::with_capacity(n_m * elems);
            for mask in unpack_masks(&packed)? {
                data.extend(mask.bits().iter().map(|&b| if b == 1 { 1.0 } else { -1.0 }));
            }
            data
        }
    };
    let w_o_data = if flags & FLAG_W_O != 0 {
        Some(cur.take_f32s(elems)?)
    } else {
        None
    };
    let router_raw = if flags & FLAG_ROUTER != 0 {
        let w_r = cur.take_f32s(h * n_m)?;
        let k = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
        Some((w_r, k))
    } else {
        None
    };

    match precision {
        Precision::Single => Ok(AnyLayer::Single(assemble::<f32>(
            h, d, n_m, activation, w_data, logits_data, w_o_data, router_raw,
        )?)),
        Precision::Double => Ok(AnyLayer::Double(assemble::<f64>(
            h, d, n_m, activation, w_data, logits_data, w_o_data, router_raw,
        )?)),
    }
}

#[allow(clippy::too_many_arguments)]
fn assemble<T: Real>(
    h: usize,
    d: usize,
    n_m: usize,
    activation: Activation,
    w_data: Vec<f32>,
    logits_data: Vec<f32>,
    w_o_data: Option<Vec<f32>>,
    router_raw: Option<(Vec<f32>, usize)>,
) -> Result<MgluLayer<T>> {
    let widen = |v: Vec<f32>| -> Vec<T> { v.into_iter().map(|x| T::lit(x as f64)).collect() };
    let w = DenseMatrix::from_vec(h, d, widen(w_data))?.with_storage(StorageWidth::B16);
    let logits = MaskLogits::from_vec(n_m, h, d, widen(logits_data))?;
    let w_o = w_o_data
        .map(|data| DenseMatrix::from_vec(d, h, widen(data)))
        .transpose()?;
    let router = router_raw
        .map(|(data, k)| -> Result<Router<T>> {
            Ok(Router {
                w_r: DenseMatrix::from_vec(h, n_m, widen(data))?,
                k,
            })
        })
        .transpose()?;
    MgluLayer::new(w, logits, activation, w_o, router)
}

fn checked_file_size(
    h: u64,
    d: u64,
    n_m: u64,
    mask_storage: MaskStorage,
    has_w_o: bool,
    has_router: bool,
) -> Result<u64> {
    let elems = h.checked_mul(d).ok_or(MgluError::DimOverflow)?;
    let word = if n_m <= 8 { 1 } else { 2 };
    let mask_bytes = match mask_storage {
        MaskStorage::Logits => n_m
            .checked_mul(elems)
            .and_then(|v| v.checked_mul(4))
            .ok_or(MgluError::DimOverflow)?,
        MaskStorage::Packed => elems.checked_mul(word).ok_or(MgluError::DimOverflow)?,
    };
    let mut size = (HEADER_LEN as u64)
        .checked_add(elems.checked_mul(4).ok_or(MgluError::DimOverflow)?)
        .and_then(|v| v.checked_add(mask_bytes))
        .ok_or(MgluError::DimOverflow)?;
    if has_w_o {
        size = size
            .checked_add(elems.checked_mul(4).ok_or(MgluError::DimOverflow)?)
            .ok_or(MgluError::DimOverflow)?;
    }
    if has_router {
        let router_bytes = h
            .checked_mul(n_m)
            .and_then(|v| v.checked_mul(4))
            .and_then(|v| v.checked_add(2))
            .ok_or(MgluError::DimOverflow)?;
        size = size.checked_add(router_bytes).ok_or(MgluError::DimOverflow)?;
    }
    // Payload must also be addressable on this machine.
    usize::try_from(size).map_err(|_| MgluError::DimOverflow)?;
    Ok(size)
}

fn write_reals<T: Real>(buf: &mut Vec<u8>, values: &[T]) {
    for v in values {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(MgluError::DimOverflow)?;
        if end > self.bytes.len() {
            return Err(MgluError::Truncated {
                needed: end as u64,
                available: self.bytes.len() as u64,
            });
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn take_f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or(MgluError::DimOverflow)?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }
}
