//! Pointwise activations with closed-form derivatives up to third order.
//!
//! The second derivative is needed by the shifted-gradient expansion, and the
//! third lets the tape differentiate through a fast-weight update twice.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Silu,
    /// Exact (erf-based) GELU.
    Gelu,
    EluPlusOne,
}

impl std::str::FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "silu" => Ok(Self::Silu),
            "gelu" => Ok(Self::Gelu),
            "elu_plus_one" | "elu+1" => Ok(Self::EluPlusOne),
            other => Err(config_err(format!("unknown activation {other:?}"))),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

impl ActivationKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Silu => "silu",
            Self::Gelu => "gelu",
            Self::EluPlusOne => "elu_plus_one",
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        self.derivative(x, 0)
    }

    /// `order`-th derivative at `x`; `order` ∈ 0..=3.
    pub fn derivative(self, x: f64, order: u8) -> f64 {
        match self {
            Self::Silu => {
                let s = sigmoid(x);
                let ds = s * (1.0 - s);
                let t = 1.0 - 2.0 * s;
                match order {
                    0 => x * s,
                    1 => s * (1.0 + x * (1.0 - s)),
                    2 => ds * (2.0 + x * t),
                    3 => ds * (3.0 * t + x * (t * t - 2.0 * ds)),
                    _ => panic!("activation derivative order {order} not available"),
                }
            }
            Self::Gelu => {
                let p = std_normal_pdf(x);
                match order {
                    0 => x * std_normal_cdf(x),
                    1 => std_normal_cdf(x) + x * p,
                    2 => p * (2.0 - x * x),
                    3 => p * (x * x * x - 4.0 * x),
                    _ => panic!("activation derivative order {order} not available"),
                }
            }
            Self::EluPlusOne => {
                if x > 0.0 {
                    match order {
                        0 => x + 1.0,
                        1 => 1.0,
                        2 | 3 => 0.0,
                        _ => panic!("activation derivative order {order} not available"),
                    }
                } else if order <= 3 {
                    x.exp()
                } else {
                    panic!("activation derivative order {order} not available")
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const KINDS: [ActivationKind; 3] = [
        ActivationKind::Silu,
        ActivationKind::Gelu,
        ActivationKind::EluPlusOne,
    ];

    #[test]
    fn fixed_points() {
        assert_eq!(ActivationKind::Silu.eval(0.0), 0.0);
        assert_eq!(ActivationKind::Gelu.eval(0.0), 0.0);
        assert_eq!(ActivationKind::EluPlusOne.eval(0.0), 1.0);
    }

    #[test]
    fn elu_plus_one_is_positive() {
        for i in -400..400 {
            let x = i as f64 * 0.1;
            assert!(ActivationKind::EluPlusOne.eval(x) > 0.0, "x={x}");
        }
    }

    #[test]
    fn derivatives_match_central_differences() {
        let h = 1e-5;
        for kind in KINDS {
            // Skip 0 for elu+1: its second derivative jumps there.
            for &x in &[-2.0, -0.5, 0.7, 1.9] {
                for order in 1..=3u8 {
                    let fd = (kind.derivative(x + h, order - 1) - kind.derivative(x - h, order - 1))
                        / (2.0 * h);
                    let exact = kind.derivative(x, order);
                    let err = (fd - exact).abs() / exact.abs().max(1e-3);
                    assert!(err < 1e-6, "{kind:?} order {order} at {x}: {fd} vs {exact}");
                }
            }
        }
    }

    #[test]
    fn parses_names() {
        assert_eq!("silu".parse::<ActivationKind>().unwrap(), ActivationKind::Silu);
        assert!(matches!("relu".parse::<ActivationKind>(), Err(Error::Config(_))));
    }
}
