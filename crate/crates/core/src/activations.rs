//! Unary operator catalog and the scaled activation `y = alpha * f(beta * x)`.
//!
//! Every operator exposes its value and first derivative. Piecewise operators
//! use the right-hand limit at their kinks: `ReLU'(0) = 1`, `ReLU6'(0) = 1`,
//! `ReLU6'(6) = 0`, `HardSwish'(-3) = -0.5`, `HardSwish'(3) = 1`.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

static SYMEXP_SATURATIONS: AtomicU64 = AtomicU64::new(0);

/// Number of Symexp evaluations whose input was clamped since process start.
pub fn symexp_saturations() -> u64 {
    SYMEXP_SATURATIONS.load(Ordering::Relaxed)
}

/// Identifier of a scalar unary operator.
///
/// The serialized form is the catalog string returned by [`UnaryOperatorId::as_str`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum UnaryOperatorId {
    ReLU6,
    Acon,
    TanhSoft1,
    #[serde(rename = "SRS")]
    Srs,
    Symlog,
    Symexp,
    Swish,
    Tanh,
    HardSwish,
    #[serde(rename = "ELU")]
    Elu,
    #[serde(rename = "GELU")]
    Gelu,
    Softplus,
    LogisticSigmoid,
    /// Baseline activation; not a search candidate.
    ReLU,
}

const CATALOG: [UnaryOperatorId; 13] = [
    UnaryOperatorId::ReLU6,
    UnaryOperatorId::Acon,
    UnaryOperatorId::TanhSoft1,
    UnaryOperatorId::Srs,
    UnaryOperatorId::Symlog,
    UnaryOperatorId::Symexp,
    UnaryOperatorId::Swish,
    UnaryOperatorId::Tanh,
    UnaryOperatorId::HardSwish,
    UnaryOperatorId::Elu,
    UnaryOperatorId::Gelu,
    UnaryOperatorId::Softplus,
    UnaryOperatorId::LogisticSigmoid,
];

/// The 13 search candidates, in serialization order.
pub fn catalog() -> &'static [UnaryOperatorId] {
    &CATALOG
}

impl UnaryOperatorId {
    pub fn as_str(self) -> &'static str {
        match self {
            UnaryOperatorId::ReLU6 => "ReLU6",
            UnaryOperatorId::Acon => "Acon",
            UnaryOperatorId::TanhSoft1 => "TanhSoft1",
            UnaryOperatorId::Srs => "SRS",
            UnaryOperatorId::Symlog => "Symlog",
            UnaryOperatorId::Symexp => "Symexp",
            UnaryOperatorId::Swish => "Swish",
            UnaryOperatorId::Tanh => "Tanh",
            UnaryOperatorId::HardSwish => "HardSwish",
            UnaryOperatorId::Elu => "ELU",
            UnaryOperatorId::Gelu => "GELU",
            UnaryOperatorId::Softplus => "Softplus",
            UnaryOperatorId::LogisticSigmoid => "LogisticSigmoid",
            UnaryOperatorId::ReLU => "ReLU",
        }
    }

    /// Position in [`catalog`], `None` for the baseline ReLU.
    pub fn catalog_index(self) -> Option<usize> {
        CATALOG.iter().position(|&op| op == self)
    }

    /// Kink locations of piecewise operators (in the operator's own input).
    pub fn kinks(self) -> &'static [f64] {
        match self {
            UnaryOperatorId::ReLU => &[0.0],
            UnaryOperatorId::ReLU6 => &[0.0, 6.0],
            UnaryOperatorId::HardSwish => &[-3.0, 3.0],
            UnaryOperatorId::Elu | UnaryOperatorId::Symlog | UnaryOperatorId::Symexp => &[0.0],
            _ => &[],
        }
    }
}

impl fmt::Display for UnaryOperatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for UnaryOperatorId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CATALOG
            .iter()
            .copied()
            .chain(std::iter::once(UnaryOperatorId::ReLU))
            .find(|op| op.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Unknown {
                kind: "unary operator",
                name: s.to_string(),
            })
    }
}

/// Fixed internal constants of the operators that carry them. None of these
/// are trained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OperatorConstants {
    pub srs_a: f64,
    pub srs_b: f64,
    pub acon_p1: f64,
    pub acon_p2: f64,
    pub acon_s: f64,
    pub tanhsoft_c1: f64,
    pub tanhsoft_c2: f64,
    /// Symexp inputs are clamped to `[-symexp_clamp, symexp_clamp]`.
    pub symexp_clamp: f64,
}

impl Default for OperatorConstants {
    fn default() -> Self {
        OperatorConstants {
            srs_a: 2.0,
            srs_b: 3.0,
            acon_p1: 1.0,
            acon_p2: 0.1,
            acon_s: 1.0,
            tanhsoft_c1: 0.87,
            tanhsoft_c2: 0.6,
            symexp_clamp: 30.0,
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl OperatorConstants {
    /// Returns `(f(x), f'(x))`.
    pub fn value_and_derivative(&self, op: UnaryOperatorId, x: f64) -> (f64, f64) {
        use UnaryOperatorId::*;
        match op {
            ReLU => {
                if x >= 0.0 {
                    (x, 1.0)
                } else {
                    (0.0, 0.0)
                }
            }
            ReLU6 => {
                if x < 0.0 {
                    (0.0, 0.0)
                } else if x < 6.0 {
                    (x, 1.0)
                } else {
                    (6.0, 0.0)
                }
            }
            Acon => {
                let d = self.acon_p1 - self.acon_p2;
                let z = self.acon_s * d * x;
                let s = sigmoid(z);
                let y = d * x * s + self.acon_p2 * x;
                let dy = d * s + d * x * s * (1.0 - s) * self.acon_s * d + self.acon_p2;
                (y, dy)
            }
            TanhSoft1 => {
                let e = (self.tanhsoft_c2 * x).exp();
                let u = self.tanhsoft_c1 * e;
                let t = u.tanh();
                if u > 40.0 {
                    (x * t, t)
                } else {
                    let sech2 = 1.0 - t * t;
                    (x * t, t + x * sech2 * u * self.tanhsoft_c2)
                }
            }
            Srs => {
                let e = (-x / self.srs_b).exp();
                if !e.is_finite() {
                    return (0.0, 0.0);
                }
                let den = x / self.srs_a + e;
                let y = x / den;
                let dy = e * (1.0 + x / self.srs_b) / (den * den);
                (y, dy)
            }
            Symlog => {
                let a = x.abs();
                (a.ln_1p().copysign(x), 1.0 / (1.0 + a))
            }
            Symexp => {
                let a = x.abs();
                if a > self.symexp_clamp {
                    SYMEXP_SATURATIONS.fetch_add(1, Ordering::Relaxed);
                    (self.symexp_clamp.exp_m1().copysign(x), 0.0)
                } else {
                    (a.exp_m1().copysign(x), a.exp())
                }
            }
            Swish => {
                let s = sigmoid(x);
                (x * s, s + x * s * (1.0 - s))
            }
            Tanh => {
                let t = x.tanh();
                (t, 1.0 - t * t)
            }
            HardSwish => {
                if x < -3.0 {
                    (0.0, 0.0)
                } else if x < 3.0 {
                    (x * (x + 3.0) / 6.0, (2.0 * x + 3.0) / 6.0)
                } else {
                    (x, 1.0)
                }
            }
            Elu => {
                if x > 0.0 {
                    (x, 1.0)
                } else {
                    (x.exp_m1(), x.exp())
                }
            }
            Gelu => {
                let x2 = x * x;
                let inner = GELU_C * (x + GELU_K * x2 * x);
                let t = inner.tanh();
                let y = 0.5 * x * (1.0 + t);
                let dinner = GELU_C * (1.0 + 3.0 * GELU_K * x2);
                let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
                (y, dy)
            }
            Softplus => {
                let y = if x > 30.0 {
                    x
                } else {
                    x.max(0.0) + (-x.abs()).exp().ln_1p()
                };
                (y, sigmoid(x))
            }
            LogisticSigmoid => {
                let s = sigmoid(x);
                (s, s * (1.0 - s))
            }
        }
    }

    pub fn value(&self, op: UnaryOperatorId, x: f64) -> f64 {
        self.value_and_derivative(op, x).0
    }
}

/// A unary operator with per-layer output scale `alpha` and input scale `beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParametricActivation {
    pub op: UnaryOperatorId,
    pub alpha: f64,
    pub beta: f64,
    /// Whether `alpha` and `beta` receive gradients.
    pub trainable: bool,
}

/// Partial derivatives of `alpha * f(beta * x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivationGrads {
    pub dy_dx: f64,
    pub dy_dalpha: f64,
    pub dy_dbeta: f64,
}

impl ParametricActivation {
    /// Operator with unit scales and frozen `alpha`, `beta`.
    pub fn fixed(op: UnaryOperatorId) -> Self {
        ParametricActivation {
            op,
            alpha: 1.0,
            beta: 1.0,
            trainable: false,
        }
    }

    pub fn new(op: UnaryOperatorId, alpha: f64, beta: f64, trainable: bool) -> Result<Self> {
        if !alpha.is_finite() || !beta.is_finite() {
            return Err(Error::Contract(format!(
                "activation scales must be finite, got alpha={alpha} beta={beta}"
            )));
        }
        Ok(ParametricActivation {
            op,
            alpha,
            beta,
            trainable,
        })
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.eval_with(&OperatorConstants::default(), x)
    }

    pub fn eval_with(&self, consts: &OperatorConstants, x: f64) -> f64 {
        self.alpha * consts.value(self.op, self.beta * x)
    }

    pub fn eval_grads(&self, x: f64) -> ActivationGrads {
        self.eval_grads_with(&OperatorConstants::default(), x)
    }

    pub fn eval_grads_with(&self, consts: &OperatorConstants, x: f64) -> ActivationGrads {
        let (f, df) = consts.value_and_derivative(self.op, self.beta * x);
        ActivationGrads {
            dy_dx: self.alpha * self.beta * df,
            dy_dalpha: f,
            dy_dbeta: self.alpha * x * df,
        }
    }
}
