//! Gating nonlinearities and their closed-form derivatives.

use serde::{Deserialize, Serialize};

use crate::real::Real;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Gelu,
    Swish,
    Sigmoid,
}

#[inline]
fn sigmoid<T: Real>(z: T) -> T {
    // Evaluate through exp of a non-positive argument for stability.
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

impl Activation {
    pub const ALL: [Activation; 5] = [
        Activation::Identity,
        Activation::Relu,
        Activation::Gelu,
        Activation::Swish,
        Activation::Sigmoid,
    ];

    #[inline]
    pub fn eval<T: Real>(self, z: T) -> T {
        match self {
            Activation::Identity => z,
            Activation::Relu => {
                if z > T::zero() {
                    z
                } else {
                    T::zero()
                }
            }
            // Exact Gaussian-CDF form: z * Phi(z) with Phi built on erf.
            Activation::Gelu => z * T::lit(0.5) * (T::one() + (z / T::lit(SQRT_2)).erf()),
            Activation::Swish => z * sigmoid(z),
            Activation::Sigmoid => sigmoid(z),
        }
    }

    /// Derivative at `z`. ReLU uses subgradient 0 at the origin.
    #[inline]
    pub fn grad<T: Real>(self, z: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Relu => {
                if z > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Gelu => {
                let phi_cdf = T::lit(0.5) * (T::one() + (z / T::lit(SQRT_2)).erf());
                let pdf = T::lit(INV_SQRT_2PI) * (-z * z * T::lit(0.5)).exp();
                phi_cdf + z * pdf
            }
            Activation::Swish => {
                let s = sigmoid(z);
                s * (T::one() + z * (T::one() - s))
            }
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (T::one() - s)
            }
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Gelu => 2,
            Activation::Swish => 3,
            Activation::Sigmoid => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Gelu),
            3 => Some(Activation::Swish),
            4 => Some(Activation::Sigmoid),
            _ => None,
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
            Activation::Swish => "swish",
            Activation::Sigmoid => "sigmoid",
        };
        write!(f, "{name}")
    }
}
