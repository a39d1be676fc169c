//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MgluError {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("mask count {0} outside supported range 1..=16")]
    MaskCountOutOfRange(usize),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("mask entries must be 0 or 1 (found {found} at index {index})")]
    NotBinary { found: u8, index: usize },

    #[error("packed word at index {index} has bits set above n_m={n_m}")]
    MaskContamination { index: usize, n_m: usize },

    #[error("invalid kernel config: {0}")]
    InvalidKernelConfig(String),

    #[error("layer has no router; top-k forward requires one")]
    MissingRouter,

    #[error("layer has no output projection")]
    MissingOutputProjection,

    #[error("top-k K={k} outside 1..=n_m={n_m}")]
    TopKOutOfRange { k: usize, n_m: usize },

    #[error("bad magic {found:?}, expected \"MGLU\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported layer file version {0}")]
    UnsupportedVersion(u32),

    #[error("header dimensions overflow the address space")]
    DimOverflow,

    #[error("file truncated: needed {needed} bytes, found {available}")]
    Truncated { needed: u64, available: u64 },

    #[error("unknown activation code {0}")]
    BadActivationCode(u8),

    #[error("unknown precision code {0}")]
    BadPrecisionCode(u8),

    #[error("invalid training config: {0}")]
    InvalidTrainConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MgluError>;
