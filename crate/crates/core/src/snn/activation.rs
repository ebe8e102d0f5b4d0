//! Activation functions admitted by the smoothness assumptions: each must be
//! Lipschitz with a Lipschitz derivative (so no ReLU).

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Tanh,
    Identity,
    Softplus,
}

impl ActivationKind {
    #[inline]
    pub fn eval(self, x: f64) -> f64 {
        match self {
            ActivationKind::Tanh => x.tanh(),
            ActivationKind::Identity => x,
            ActivationKind::Softplus => {
                // ln(1 + e^x) without overflow on either tail
                if x > 30.0 {
                    x
                } else if x < -30.0 {
                    x.exp()
                } else {
                    x.exp().ln_1p()
                }
            }
        }
    }

    #[inline]
    pub fn deriv(self, x: f64) -> f64 {
        match self {
            ActivationKind::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            ActivationKind::Identity => 1.0,
            ActivationKind::Softplus => 1.0 / (1.0 + (-x).exp()),
        }
    }

    /// Lipschitz constant of the function itself.
    pub fn lipschitz(self) -> f64 {
        1.0
    }

    /// Lipschitz constant of the derivative. For tanh the sharp bound is
    /// `4/(3*sqrt(3))`.
    pub fn smoothness(self) -> f64 {
        match self {
            ActivationKind::Tanh => 0.7698,
            ActivationKind::Identity => 0.0,
            ActivationKind::Softplus => 0.25,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Tanh => "tanh",
            ActivationKind::Identity => "identity",
            ActivationKind::Softplus => "softplus",
        }
    }
}
