//! Scalar activation families used as expert logit maps `h(x, η) = act(ηᵀx)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Activation family of an expert. Each family supplies `act`, `act′` and `act″`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpertFamily {
    Linear,
    Tanh,
    /// Exact Gaussian-CDF form `z·Φ(z)`.
    Gelu,
    Sigmoid,
    Relu,
}

impl ExpertFamily {
    pub const ALL: [ExpertFamily; 5] = [
        ExpertFamily::Linear,
        ExpertFamily::Tanh,
        ExpertFamily::Gelu,
        ExpertFamily::Sigmoid,
        ExpertFamily::Relu,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExpertFamily::Linear => "linear",
            ExpertFamily::Tanh => "tanh",
            ExpertFamily::Gelu => "gelu",
            ExpertFamily::Sigmoid => "sigmoid",
            ExpertFamily::Relu => "relu",
        }
    }

    /// ReLU has a kink at zero and no second derivative there.
    pub fn non_smooth(self) -> bool {
        matches!(self, ExpertFamily::Relu)
    }

    #[inline]
    pub fn act(self, z: f64) -> f64 {
        match self {
            ExpertFamily::Linear => z,
            ExpertFamily::Tanh => z.tanh(),
            ExpertFamily::Gelu => z * std_normal_cdf(z),
            ExpertFamily::Sigmoid => logistic(z),
            ExpertFamily::Relu => z.max(0.0),
        }
    }

    #[inline]
    pub fn d1(self, z: f64) -> f64 {
        match self {
            ExpertFamily::Linear => 1.0,
            ExpertFamily::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            ExpertFamily::Gelu => std_normal_cdf(z) + z * std_normal_pdf(z),
            ExpertFamily::Sigmoid => {
                let s = logistic(z);
                s * (1.0 - s)
            }
            ExpertFamily::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    #[inline]
    pub fn d2(self, z: f64) -> f64 {
        match self {
            ExpertFamily::Linear | ExpertFamily::Relu => 0.0,
            ExpertFamily::Tanh => {
                let t = z.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            ExpertFamily::Gelu => std_normal_pdf(z) * (2.0 - z * z),
            ExpertFamily::Sigmoid => {
                let s = logistic(z);
                s * (1.0 - s) * (1.0 - 2.0 * s)
            }
        }
    }

    /// Value and first derivative in one call.
    #[inline]
    pub fn act_d1(self, z: f64) -> (f64, f64) {
        match self {
            ExpertFamily::Linear => (z, 1.0),
            ExpertFamily::Tanh => {
                let t = z.tanh();
                (t, 1.0 - t * t)
            }
            ExpertFamily::Sigmoid => {
                let s = logistic(z);
                (s, s * (1.0 - s))
            }
            ExpertFamily::Gelu => {
                let cdf = std_normal_cdf(z);
                (z * cdf, cdf + z * std_normal_pdf(z))
            }
            ExpertFamily::Relu => (self.act(z), self.d1(z)),
        }
    }
}

impl fmt::Display for ExpertFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExpertFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ExpertFamily::ALL
            .into_iter()
            .find(|f| f.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Input(format!("unknown expert family '{s}'")))
    }
}

#[inline]
fn std_normal_pdf(z: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * z * z).exp()
}

#[inline]
fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z * std::f64::consts::FRAC_1_SQRT_2)
}

/// Overflow-free logistic function.
#[inline]
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}
