//! Scalar activation functions and their exact derivatives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Activation applied after every convolution, after each inception
/// concatenation, and inside baseline MLPs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    /// Leaky ReLU with the given negative-side slope (must lie in `(0, 1)`).
    LeakyRelu(f64),
    Swish,
    Sigmoid,
}

impl ActivationKind {
    pub fn validate(&self) -> Result<()> {
        if let ActivationKind::LeakyRelu(slope) = *self {
            if !(slope > 0.0 && slope < 1.0) {
                return Err(Error::invalid(format!(
                    "leaky relu slope must lie in (0, 1), got {slope}"
                )));
            }
        }
        Ok(())
    }

    /// f(x).
    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            // Not `x.max(0.0)`: f64::max ignores NaN, which would silently
            // launder a diverged value into 0 instead of propagating it.
            ActivationKind::Relu => {
                if x > 0.0 || x.is_nan() {
                    x
                } else {
                    0.0
                }
            }
            ActivationKind::LeakyRelu(slope) => {
                if x >= 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            ActivationKind::Swish => x * sigmoid(x),
            ActivationKind::Sigmoid => sigmoid(x),
        }
    }

    /// df/dx evaluated at the pre-activation value `x`.
    pub fn grad(&self, x: f64) -> f64 {
        match *self {
            ActivationKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            ActivationKind::Swish => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            ActivationKind::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
        }
    }

    /// Applies the activation to every element in place.
    pub fn apply_slice(&self, xs: &mut [f64]) {
        for x in xs {
            *x = self.apply(*x);
        }
    }
}

impl std::fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ActivationKind::Relu => write!(f, "relu"),
            ActivationKind::LeakyRelu(s) => write!(f, "leaky_relu({s})"),
            ActivationKind::Swish => write!(f, "swish"),
            ActivationKind::Sigmoid => write!(f, "sigmoid"),
        }
    }
}

/// Numerically stable logistic function: never exponentiates a positive
/// argument, so it cannot overflow.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// x * sigmoid(x), exposed directly because it is the headline activation.
pub fn swish(x: f64) -> f64 {
    ActivationKind::Swish.apply(x)
}
