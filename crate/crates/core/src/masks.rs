//! Binary masks, their trainable logits, and bit-packed storage.
//!
//! A set of `n_m` masks over one `rows x cols` weight is packed into one
//! small integer word per weight element, mask `i` in bit `i-1`. Words are
//! 8-bit for `n_m <= 8` and 16-bit for `n_m` up to [`MAX_MASKS`].

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{MgluError, Result};
use crate::real::Real;

pub const MAX_MASKS: usize = 16;

/// One binary mask, entries 0/1 stored row-major as bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    rows: usize,
    cols: usize,
    bits: Vec<u8>,
}

impl BinaryMask {
    pub fn from_bits(rows: usize, cols: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(MgluError::DimMismatch(format!(
                "mask bits length {} != {}x{}",
                bits.len(),
                rows,
                cols
            )));
        }
        if let Some((index, &found)) = bits.iter().enumerate().find(|(_, &b)| b > 1) {
            return Err(MgluError::NotBinary { found, index });
        }
        Ok(Self { rows, cols, bits })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![0; rows * cols],
        }
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![1; rows * cols],
        }
    }

    /// Fair-coin mask, one draw per element.
    pub fn random<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let bits = (0..rows * cols)
            .map(|_| if rng.random::<bool>() { 1 } else { 0 })
            .collect();
        Self { rows, cols, bits }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.bits[r * self.cols + c]
    }

    /// Fraction of entries equal to 1.
    pub fn ones_ratio(&self) -> f64 {
        let ones: u64 = self.bits.iter().map(|&b| b as u64).sum();
        ones as f64 / self.bits.len() as f64
    }
}

/// Trainable soft masks: one real logit matrix per mask, row-major,
/// binarized by sign for the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskLogits<T> {
    n_m: usize,
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> MaskLogits<T> {
    pub fn from_vec(n_m: usize, rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if n_m == 0 || n_m > MAX_MASKS {
            return Err(MgluError::MaskCountOutOfRange(n_m));
        }
        if data.len() != n_m * rows * cols {
            return Err(MgluError::DimMismatch(format!(
                "logits length {} != {}x{}x{}",
                data.len(),
                n_m,
                rows,
                cols
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(MgluError::NonFinite("mask logits".into()));
        }
        Ok(Self {
            n_m,
            rows,
            cols,
            data,
        })
    }

    /// Standard initialization: zero-mean normal with std 0.01.
    pub fn random_init<R: Rng>(n_m: usize, rows: usize, cols: usize, rng: &mut R) -> Result<Self> {
        if n_m == 0 || n_m > MAX_MASKS {
            return Err(MgluError::MaskCountOutOfRange(n_m));
        }
        let data = (0..n_m * rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(0.01 * z)
            })
            .collect();
        Ok(Self {
            n_m,
            rows,
            cols,
            data,
        })
    }

    /// Frozen-mask initialization: one fair-coin draw per entry, stored as
    /// +/-1 logits so binarization reproduces the drawn mask.
    pub fn random_fixed<R: Rng>(n_m: usize, rows: usize, cols: usize, rng: &mut R) -> Result<Self> {
        if n_m == 0 || n_m > MAX_MASKS {
            return Err(MgluError::MaskCountOutOfRange(n_m));
        }
        let data = (0..n_m * rows * cols)
            .map(|_| if rng.random::<bool>() { T::one() } else { -T::one() })
            .collect();
        Ok(Self {
            n_m,
            rows,
            cols,
            data,
        })
    }

    pub fn n_m(&self) -> usize {
        self.n_m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Logit matrix of mask `i`, row-major.
    pub fn mask(&self, i: usize) -> &[T] {
        let n = self.rows * self.cols;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn mask_mut(&mut self, i: usize) -> &mut [T] {
        let n = self.rows * self.cols;
        &mut self.data[i * n..(i + 1) * n]
    }

    /// Same shape, all entries zero. Used for gradient storage.
    pub fn zeros_like(&self) -> Self {
        Self {
            n_m: self.n_m,
            rows: self.rows,
            cols: self.cols,
            data: vec![T::zero(); self.data.len()],
        }
    }
}

/// Sign binarization used by the straight-through estimator: an entry is 1
/// iff its logit is strictly positive, so a logit of exactly 0 yields 0.
pub fn ste_binarize<T: Real>(logits: &MaskLogits<T>) -> Vec<BinaryMask> {
    (0..logits.n_m())
        .map(|i| BinaryMask {
            rows: logits.rows(),
            cols: logits.cols(),
            bits: logits
                .mask(i)
                .iter()
                .map(|&v| if v > T::zero() { 1 } else { 0 })
                .collect(),
        })
        .collect()
}

/// Word storage for packed masks: one integer per weight element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PackedWords {
    U8(Vec<u8>),
    U16(Vec<u16>),
}

/// Bit-packed mask set; mask `i` lives in bit `i-1` of each word.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedMasks {
    n_m: usize,
    rows: usize,
    cols: usize,
    words: PackedWords,
}

impl PackedMasks {
    pub fn n_m(&self) -> usize {
        self.n_m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn word_bits(&self) -> u32 {
        match self.words {
            PackedWords::U8(_) => 8,
            PackedWords::U16(_) => 16,
        }
    }

    pub fn word_bytes(&self) -> u64 {
        (self.word_bits() / 8) as u64
    }

    pub fn words(&self) -> &PackedWords {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn word_at(&self, idx: usize) -> u16 {
        match &self.words {
            PackedWords::U8(v) => v[idx] as u16,
            PackedWords::U16(v) => v[idx],
        }
    }

    /// Rebuild from raw words, validating high bits. Used by the file reader.
    pub fn from_words(n_m: usize, rows: usize, cols: usize, words: PackedWords) -> Result<Self> {
        if n_m == 0 || n_m > MAX_MASKS {
            return Err(MgluError::MaskCountOutOfRange(n_m));
        }
        let expect_u16 = n_m > 8;
        let len = match &words {
            PackedWords::U8(v) => {
                if expect_u16 {
                    return Err(MgluError::DimMismatch(
                        "n_m > 8 requires 16-bit words".into(),
                    ));
                }
                v.len()
            }
            PackedWords::U16(v) => v.len(),
        };
        if len != rows * cols {
            return Err(MgluError::DimMismatch(format!(
                "packed words length {} != {}x{}",
                len,
                rows,
                cols
            )));
        }
        let packed = Self {
            n_m,
            rows,
            cols,
            words,
        };
        packed.check_high_bits()?;
        Ok(packed)
    }

    fn check_high_bits(&self) -> Result<()> {
        for idx in 0..self.len() {
            // Widened so the shift stays in range at n_m = 16.
            if (self.word_at(idx) as u32) >> self.n_m != 0 {
                return Err(MgluError::MaskContamination {
                    index: idx,
                    n_m: self.n_m,
                });
            }
        }
        Ok(())
    }
}

/// Pack `n_m` same-shape binary masks into one word per element.
pub fn pack_masks(masks: &[BinaryMask]) -> Result<PackedMasks> {
    let n_m = masks.len();
    if n_m == 0 || n_m > MAX_MASKS {
        return Err(MgluError::MaskCountOutOfRange(n_m));
    }
    let rows = masks[0].rows();
    let cols = masks[0].cols();
    for m in masks {
        if m.rows() != rows || m.cols() != cols {
            return Err(MgluError::DimMismatch(format!(
                "mask shape {}x{} != {}x{}",
                m.rows(),
                m.cols(),
                rows,
                cols
            )));
        }
    }
    let len = rows * cols;
    let words = if n_m <= 8 {
        let mut w = vec![0u8; len];
        for (i, m) in masks.iter().enumerate() {
            let bit = 1u8 << i;
            for (word, &b) in w.iter_mut().zip(m.bits()) {
                if b != 0 {
                    *word |= bit;
                }
            }
        }
        PackedWords::U8(w)
    } else {
        let mut w = vec![0u16; len];
        for (i, m) in masks.iter().enumerate() {
            let bit = 1u16 << i;
            for (word, &b) in w.iter_mut().zip(m.bits()) {
                if b != 0 {
                    *word |= bit;
                }
            }
        }
        PackedWords::U16(w)
    };
    Ok(PackedMasks {
        n_m,
        rows,
        cols,
        words,
    })
}

/// Inverse of [`pack_masks`]; rejects words with bits at or above `n_m`.
pub fn unpack_masks(packed: &PackedMasks) -> Result<Vec<BinaryMask>> {
    packed.check_high_bits()?;
    let len = packed.len();
    let mut masks = Vec::with_capacity(packed.n_m());
    for i in 0..packed.n_m() {
        let mut bits = Vec::with_capacity(len);
        for idx in 0..len {
            bits.push(((packed.word_at(idx) >> i) & 1) as u8);
        }
        masks.push(BinaryMask {
            rows: packed.rows(),
            cols: packed.cols(),
            bits,
        });
    }
    Ok(masks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn binarize_is_strictly_positive() {
        let logits = MaskLogits::from_vec(1, 1, 3, vec![0.3, -0.2, 0.0]).unwrap();
        let masks = ste_binarize(&logits);
        assert_eq!(masks[0].bits(), &[1, 0, 0]);
    }

    #[test]
    fn binarize_all_positive_gives_ones() {
        let logits = MaskLogits::from_vec(1, 2, 2, vec![0.1, 5.0, 0.4, 2.0]).unwrap();
        assert_eq!(ste_binarize(&logits)[0].bits(), &[1, 1, 1, 1]);
    }

    #[test]
    fn binarize_seeded_half_ones() {
        // 0.01 * randn logits: sign of each sample decides the bit.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let logits = MaskLogits::<f64>::random_init(1, 100, 100, &mut rng).unwrap();
        let mask = &ste_binarize(&logits)[0];
        for (b, &l) in mask.bits().iter().zip(logits.mask(0)) {
            assert_eq!(*b, (l > 0.0) as u8);
        }
        let ratio = mask.ones_ratio();
        assert!((ratio - 0.5).abs() < 0.02, "ratio {ratio}");
    }

    #[test]
    fn pack_bit_layout() {
        let m1 = BinaryMask::from_bits(1, 3, vec![1, 0, 1]).unwrap();
        let m2 = BinaryMask::from_bits(1, 3, vec![0, 1, 1]).unwrap();
        let packed = pack_masks(&[m1, m2]).unwrap();
        assert_eq!(packed.word_bits(), 8);
        assert_eq!(packed.word_at(0), 1); // M1=1, M2=0
        assert_eq!(packed.word_at(1), 2); // M1=0, M2=1
        assert_eq!(packed.word_at(2), 3); // both
    }

    #[test]
    fn pack_single_zero_mask() {
        let packed = pack_masks(&[BinaryMask::zeros(2, 2)]).unwrap();
        assert!((0..4).all(|i| packed.word_at(i) == 0));
    }

    #[test]
    fn pack_uses_wide_words_above_eight() {
        let masks: Vec<_> = (0..9).map(|_| BinaryMask::ones(1, 1)).collect();
        let packed = pack_masks(&masks).unwrap();
        assert_eq!(packed.word_bits(), 16);
        assert_eq!(packed.word_at(0), 0x1ff);
    }

    #[test]
    fn pack_rejects_shape_mismatch_and_bad_counts() {
        let a = BinaryMask::zeros(2, 2);
        let b = BinaryMask::zeros(2, 3);
        assert!(matches!(
            pack_masks(&[a.clone(), b]),
            Err(MgluError::DimMismatch(_))
        ));
        assert!(matches!(
            pack_masks(&[]),
            Err(MgluError::MaskCountOutOfRange(0))
        ));
        let many: Vec<_> = (0..17).map(|_| a.clone()).collect();
        assert!(matches!(
            pack_masks(&many),
            Err(MgluError::MaskCountOutOfRange(17))
        ));
    }

    #[test]
    fn unpack_word_three() {
        let masks = [
            BinaryMask::from_bits(1, 1, vec![1]).unwrap(),
            BinaryMask::from_bits(1, 1, vec![1]).unwrap(),
        ];
        let packed = pack_masks(&masks).unwrap();
        let un = unpack_masks(&packed).unwrap();
        assert_eq!(un[0].get(0, 0), 1);
        assert_eq!(un[1].get(0, 0), 1);
    }

    #[test]
    fn unpack_detects_contamination() {
        let packed =
            PackedMasks::from_words(2, 1, 1, PackedWords::U8(vec![0b100]));
        assert!(matches!(
            packed,
            Err(MgluError::MaskContamination { index: 0, n_m: 2 })
        ));
    }

    #[test]
    fn seeded_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let masks: Vec<_> = (0..3).map(|_| BinaryMask::random(5, 7, &mut rng)).collect();
        let packed = pack_masks(&masks).unwrap();
        let back = unpack_masks(&packed).unwrap();
        assert_eq!(masks, back);
        // pack(unpack(p)) == p bit-exactly
        assert_eq!(pack_masks(&back).unwrap(), packed);
    }
}
