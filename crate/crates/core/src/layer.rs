//! The trainable layer bundle: shared weight, mask logits, optional output
//! projection, optional top-k router.

use rand::Rng;

use crate::activation::Activation;
use crate::error::{MgluError, Result};
use crate::masks::{pack_masks, ste_binarize, BinaryMask, MaskLogits, PackedMasks, MAX_MASKS};
use crate::real::Real;
use crate::tensor::{DenseMatrix, StorageWidth};

/// Lightweight router for the top-k variant: logits = x W_r, W_r is h x n_m.
#[derive(Debug, Clone, PartialEq)]
pub struct Router<T> {
    pub w_r: DenseMatrix<T>,
    pub k: usize,
}

/// Shared weight `W` (h x d), one logit matrix per mask, an activation, and
/// the optional output projection / router.
///
/// Values are immutable after construction on the read path; the trainer
/// mutates its own copy through [`MgluLayer::params_mut`].
#[derive(Debug, Clone, PartialEq)]
pub struct MgluLayer<T> {
    w: DenseMatrix<T>,
    mask_logits: MaskLogits<T>,
    activation: Activation,
    n_m: usize,
    w_o: Option<DenseMatrix<T>>,
    router: Option<Router<T>>,
}

/// Split mutable borrows of every trainable block, for optimizer updates.
pub struct LayerParamsMut<'a, T> {
    pub w: &'a mut [T],
    pub logits: &'a mut [T],
    pub w_o: Option<&'a mut [T]>,
    pub w_r: Option<&'a mut [T]>,
}

impl<T: Real> MgluLayer<T> {
    pub fn new(
        w: DenseMatrix<T>,
        mask_logits: MaskLogits<T>,
        activation: Activation,
        w_o: Option<DenseMatrix<T>>,
        router: Option<Router<T>>,
    ) -> Result<Self> {
        if mask_logits.rows() != w.rows() || mask_logits.cols() != w.cols() {
            return Err(MgluError::DimMismatch(format!(
                "logits {}x{} != weight {}x{}",
                mask_logits.rows(),
                mask_logits.cols(),
                w.rows(),
                w.cols()
            )));
        }
        let n_m = mask_logits.n_m();
        if let Some(ref w_o) = w_o {
            if w_o.rows() != w.cols() {
                return Err(MgluError::DimMismatch(format!(
                    "output projection rows {} != intermediate size {}",
                    w_o.rows(),
                    w.cols()
                )));
            }
        }
        if let Some(ref router) = router {
            if router.w_r.rows() != w.rows() || router.w_r.cols() != n_m {
                return Err(MgluError::DimMismatch(format!(
                    "router {}x{} != {}x{}",
                    router.w_r.rows(),
                    router.w_r.cols(),
                    w.rows(),
                    n_m
                )));
            }
            if router.k == 0 || router.k > n_m {
                return Err(MgluError::TopKOutOfRange { k: router.k, n_m });
            }
        }
        Ok(Self {
            w,
            mask_logits,
            activation,
            n_m,
            w_o,
            router,
        })
    }

    /// Seeded layer: W ~ N(0, 1/h), logits ~ N(0, 0.01^2). W is tagged as
    /// half-precision resident for traffic accounting.
    pub fn random<R: Rng>(
        h: usize,
        d: usize,
        n_m: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if n_m == 0 || n_m > MAX_MASKS {
            return Err(MgluError::MaskCountOutOfRange(n_m));
        }
        let w = DenseMatrix::random_normal(h, d, 1.0 / (h as f64).sqrt(), rng)
            .with_storage(StorageWidth::B16);
        let mask_logits = MaskLogits::random_init(n_m, h, d, rng)?;
        Self::new(w, mask_logits, activation, None, None)
    }

    /// Replace the logits with frozen fair-coin masks stored as +/-1.
    pub fn freeze_random_masks<R: Rng>(&mut self, rng: &mut R) {
        self.mask_logits =
            MaskLogits::random_fixed(self.n_m, self.h(), self.d(), rng).expect("valid dims");
    }

    /// Attach a random output projection mapping d -> out.
    pub fn with_random_output<R: Rng>(mut self, out: usize, rng: &mut R) -> Self {
        let d = self.d();
        self.w_o = Some(DenseMatrix::random_normal(
            d,
            out,
            1.0 / (d as f64).sqrt(),
            rng,
        ));
        self
    }

    pub fn with_output(mut self, w_o: DenseMatrix<T>) -> Result<Self> {
        if w_o.rows() != self.d() {
            return Err(MgluError::DimMismatch(format!(
                "output projection rows {} != intermediate size {}",
                w_o.rows(),
                self.d()
            )));
        }
        self.w_o = Some(w_o);
        Ok(self)
    }

    /// Attach a random top-k router (W_r is h x n_m).
    pub fn with_random_router<R: Rng>(mut self, k: usize, rng: &mut R) -> Result<Self> {
        if k == 0 || k > self.n_m {
            return Err(MgluError::TopKOutOfRange { k, n_m: self.n_m });
        }
        let h = self.h();
        let w_r = DenseMatrix::random_normal(h, self.n_m, 1.0 / (h as f64).sqrt(), rng);
        self.router = Some(Router { w_r, k });
        Ok(self)
    }

    pub fn h(&self) -> usize {
        self.w.rows()
    }

    pub fn d(&self) -> usize {
        self.w.cols()
    }

    pub fn n_m(&self) -> usize {
        self.n_m
    }

    pub fn w(&self) -> &DenseMatrix<T> {
        &self.w
    }

    pub fn mask_logits(&self) -> &MaskLogits<T> {
        &self.mask_logits
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn w_o(&self) -> Option<&DenseMatrix<T>> {
        self.w_o.as_ref()
    }

    pub fn router(&self) -> Option<&Router<T>> {
        self.router.as_ref()
    }

    /// Hard masks from the current logits.
    pub fn binarized(&self) -> Vec<BinaryMask> {
        ste_binarize(&self.mask_logits)
    }

    /// Binarize and pack the current masks.
    pub fn packed(&self) -> PackedMasks {
        pack_masks(&self.binarized()).expect("layer invariants guarantee packable masks")
    }

    /// Per-mask fraction of entries routed to the gate pathway.
    pub fn gate_ratios(&self) -> Vec<f64> {
        self.binarized().iter().map(BinaryMask::ones_ratio).collect()
    }

    pub fn params_mut(&mut self) -> LayerParamsMut<'_, T> {
        LayerParamsMut {
            w: self.w.as_mut_slice(),
            logits: self.mask_logits.as_mut_slice(),
            w_o: self.w_o.as_mut().map(DenseMatrix::as_mut_slice),
            w_r: self.router.as_mut().map(|r| r.w_r.as_mut_slice()),
        }
    }
}
