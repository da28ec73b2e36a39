//! Key statistics and normalizations that restore the key-shift invariance
//! Softmax attention has for free, and the order-by-order expansion of the
//! inner gradient under a key shift.

use serde::{Deserialize, Serialize};

use crate::attention::AttentionInputs;
use crate::error::{config_err, dim_err, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::ttt::{fast_weight_update, InnerLoss, InnerModel, InnerVariant, KeyScale, TttConfig};

/// ε used by every normalization and by the shift-ratio guard.
pub const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KeyStats {
    pub mean_key: Vec<f64>,
    /// `‖k̄‖ / mean‖kᵢ‖`, defined as 0 when every key is (numerically) zero.
    pub shift_ratio: f64,
}

pub fn key_shift_ratio(k: &Tensor) -> Result<KeyStats> {
    let (n, d) = k.dims2()?;
    let mut mean_key = vec![0.0; d];
    let mut norm_sum = 0.0;
    for i in 0..n {
        let row = k.row(i);
        for (m, x) in mean_key.iter_mut().zip(row) {
            *m += x;
        }
        norm_sum += row.iter().map(|x| x * x).sum::<f64>().sqrt();
    }
    mean_key.iter_mut().for_each(|m| *m /= n as f64);
    let mean_norm = norm_sum / n as f64;
    let shift_ratio = if mean_norm <= f64::EPSILON {
        0.0
    } else {
        mean_key.iter().map(|x| x * x).sum::<f64>().sqrt() / mean_norm
    };
    Ok(KeyStats {
        mean_key,
        shift_ratio,
    })
}

/// Normalizations applied to the keys of one head (N×d).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KeyNorm {
    #[default]
    None,
    /// Per-channel centering and scaling over tokens.
    Instance,
    /// Per-channel scaling over tokens without centering.
    InstanceNoMean,
    /// Per-channel centering over tokens without scaling.
    InstanceNoStd,
    /// Per-token centering and scaling over channels.
    LayerNorm,
    /// Per-token scaling by the root mean square over channels.
    RmsNorm,
}

impl KeyNorm {
    pub const ALL: [KeyNorm; 6] = [
        Self::None,
        Self::Instance,
        Self::InstanceNoMean,
        Self::InstanceNoStd,
        Self::LayerNorm,
        Self::RmsNorm,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Instance => "instance",
            Self::InstanceNoMean => "instance_no_mean",
            Self::InstanceNoStd => "instance_no_std",
            Self::LayerNorm => "layernorm",
            Self::RmsNorm => "rmsnorm",
        }
    }

    pub fn apply_tape(self, k: &Var, eps: f64) -> Result<Var> {
        let (n, d) = k.value().dims2()?;
        match self {
            Self::None => Ok(k.clone()),
            Self::Instance | Self::InstanceNoMean | Self::InstanceNoStd => {
                let mean = k.col_sum()?.scale(1.0 / n as f64).repeat_rows(n)?;
                let centered = k.sub(&mean)?;
                if self == Self::InstanceNoStd {
                    return Ok(centered);
                }
                let std = centered
                    .square()?
                    .col_sum()?
                    .scale(1.0 / n as f64)
                    .add_scalar(eps)
                    .sqrt()
                    .repeat_rows(n)?;
                if self == Self::Instance {
                    centered.div(&std)
                } else {
                    k.div(&std)
                }
            }
            Self::LayerNorm => {
                let mean = k.row_sum()?.scale(1.0 / d as f64).repeat_cols(d)?;
                let centered = k.sub(&mean)?;
                let std = centered
                    .square()?
                    .row_sum()?
                    .scale(1.0 / d as f64)
                    .add_scalar(eps)
                    .sqrt()
                    .repeat_cols(d)?;
                centered.div(&std)
            }
            Self::RmsNorm => {
                let rms = k
                    .square()?
                    .row_sum()?
                    .scale(1.0 / d as f64)
                    .add_scalar(eps)
                    .sqrt()
                    .repeat_cols(d)?;
                k.div(&rms)
            }
        }
    }

    pub fn apply(self, k: &Tensor, eps: f64) -> Result<Tensor> {
        let tape = Tape::new();
        let out = self.apply_tape(&tape.constant(k.clone()), eps)?;
        Ok((*out.value()).clone())
    }
}

impl std::str::FromStr for KeyNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        KeyNorm::ALL
            .into_iter()
            .find(|n| n.label() == s)
            .ok_or_else(|| config_err(format!("unknown key normalization {s:?}")))
    }
}

pub fn instance_norm_keys(k: &Tensor, eps: f64) -> Result<Tensor> {
    KeyNorm::Instance.apply(k, eps)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenNorm {
    LayerNorm,
    RmsNorm,
}

pub fn token_norm(k: &Tensor, kind: TokenNorm, eps: f64) -> Result<Tensor> {
    match kind {
        TokenNorm::LayerNorm => KeyNorm::LayerNorm.apply(k, eps),
        TokenNorm::RmsNorm => KeyNorm::RmsNorm.apply(k, eps),
    }
}

/// Copy of `inputs` with normalized keys.
pub fn normalize_inputs(inputs: &AttentionInputs, norm: KeyNorm) -> Result<AttentionInputs> {
    inputs.with_keys(norm.apply(&inputs.k, NORM_EPS)?)
}

/// Inner-product-loss gradient w.r.t. `W₁` at a shifted key `k + δ`, split by
/// order in δ. With `u = v·W₂ᵀ`, `z = k·W₁` and `e = δ·W₁`:
///
/// ```text
/// order0  = −kᵀ[u ⊙ σ′(z)]
/// order1a = −δᵀ[u ⊙ σ′(z)]
/// order1b = −kᵀ[u ⊙ σ″(z) ⊙ e]
/// order2  = −δᵀ[u ⊙ σ″(z) ⊙ e]
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct GradientExpansion {
    pub exact_shifted: Tensor,
    pub order0: Tensor,
    pub order1a: Tensor,
    pub order1b: Tensor,
    pub order2: Tensor,
    /// ‖exact − Σ terms‖_F
    pub truncation_residual: f64,
}

impl GradientExpansion {
    pub fn expansion_sum(&self) -> Result<Tensor> {
        self.order0.add(&self.order1a)?.add(&self.order1b)?.add(&self.order2)
    }
}

pub fn shifted_gradient_expansion(
    m: &InnerModel,
    k: &Tensor,
    v: &Tensor,
    delta: &Tensor,
) -> Result<GradientExpansion> {
    if m.variant != InnerVariant::TwoLayerMlp {
        return Err(config_err("gradient expansion needs a two_layer inner model"));
    }
    let d = m.dim();
    for (name, t) in [("k", k), ("v", v), ("delta", delta)] {
        if t.shape() != [1, d] {
            return Err(dim_err(format!("{name} must be 1×{d}, got {:?}", t.shape())));
        }
    }
    let (w1, w2) = (&m.weights[0], &m.weights[1]);
    let act = m.activation;
    let u = v.matmul(&w2.transpose()?)?;
    let z = k.matmul(w1)?;
    let e = delta.matmul(w1)?;
    let first = u.mul(&z.map(|x| act.derivative(x, 1)))?;
    let second = u.mul(&z.map(|x| act.derivative(x, 2)))?.mul(&e)?;
    let outer = |a: &Tensor, b: &Tensor| -> Result<Tensor> { Ok(a.transpose()?.matmul(b)?.scale(-1.0)) };
    let order0 = outer(k, &first)?;
    let order1a = outer(delta, &first)?;
    let order1b = outer(k, &second)?;
    let order2 = outer(delta, &second)?;

    let cfg = TttConfig {
        inner_loss: InnerLoss::InnerProduct,
        inner_lr: 1.0,
        inner_steps: 1,
        key_scale: KeyScale::None,
    };
    let exact_shifted = fast_weight_update(m, &k.add(delta)?, v, &cfg)?.deltas.swap_remove(0);
    let mut out = GradientExpansion {
        exact_shifted,
        order0,
        order1a,
        order1b,
        order2,
        truncation_residual: 0.0,
    };
    out.truncation_residual = out.exact_shifted.sub(&out.expansion_sum()?)?.frobenius();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::ActivationKind;
    use crate::rng::seeded;
    use crate::ttt::{ttt_forward, two_layer_analytic_grads};

    fn shift(k: &Tensor, delta: &Tensor) -> Tensor {
        k.add_row(delta).unwrap()
    }

    #[test]
    fn ratio_edge_cases() {
        let k = Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert!((key_shift_ratio(&k).unwrap().shift_ratio - 1.0).abs() < 1e-15);
        let k = Tensor::from_rows(&[vec![1.0, -2.0], vec![-1.0, 2.0]]).unwrap();
        assert_eq!(key_shift_ratio(&k).unwrap().shift_ratio, 0.0);
        assert_eq!(key_shift_ratio(&Tensor::zeros(&[4, 3])).unwrap().shift_ratio, 0.0);
    }

    #[test]
    fn ratio_is_scale_invariant() {
        let mut rng = seeded(1);
        let k = Tensor::randn(&[10, 4], 1.0, &mut rng).add_row(&Tensor::full(&[1, 4], 0.3)).unwrap();
        let a = key_shift_ratio(&k).unwrap().shift_ratio;
        let b = key_shift_ratio(&k.scale(7.5)).unwrap().shift_ratio;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn instance_norm_statistics() {
        let mut rng = seeded(2);
        let mut k = Tensor::randn(&[12, 3], 2.0, &mut rng);
        for i in 0..12 {
            k.set(i, 1, 4.0);
        }
        let out = instance_norm_keys(&k, NORM_EPS).unwrap();
        for c in 0..3 {
            let col: Vec<f64> = (0..12).map(|i| out.at(i, c)).collect();
            let mean = col.iter().sum::<f64>() / 12.0;
            let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 12.0;
            assert!(mean.abs() < 1e-12);
            if c == 1 {
                assert_eq!(col.iter().fold(0.0f64, |a, x| a.max(x.abs())), 0.0);
            } else {
                assert!((var - 1.0).abs() < 1e-5, "var {var}");
            }
        }
    }

    #[test]
    fn instance_norm_cancels_shift() {
        let mut rng = seeded(3);
        for _ in 0..20 {
            let k = Tensor::randn(&[9, 4], 1.0, &mut rng);
            let delta = Tensor::randn(&[1, 4], 3.0, &mut rng);
            let a = instance_norm_keys(&k, NORM_EPS).unwrap();
            let b = instance_norm_keys(&shift(&k, &delta), NORM_EPS).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
        }
    }

    #[test]
    fn token_norm_cases() {
        let k = Tensor::from_rows(&[vec![2.0, 2.0, 2.0], vec![1.0, -3.0, 0.5]]).unwrap();
        let ln = token_norm(&k, TokenNorm::LayerNorm, NORM_EPS).unwrap();
        assert!(ln.row(0).iter().all(|x| *x == 0.0));
        let rms = token_norm(&k, TokenNorm::RmsNorm, NORM_EPS).unwrap();
        let ratio = rms.at(1, 0) / k.at(1, 0);
        for c in 0..3 {
            assert!((rms.at(1, c) - ratio * k.at(1, c)).abs() < 1e-12);
        }
        assert!(ratio > 0.0);
    }

    #[test]
    fn per_token_norms_and_no_mean_ablation_keep_the_shift() {
        let mut rng = seeded(4);
        for norm in [KeyNorm::LayerNorm, KeyNorm::RmsNorm, KeyNorm::InstanceNoMean] {
            let mut fired = 0;
            for _ in 0..50 {
                let k = Tensor::randn(&[8, 4], 1.0, &mut rng);
                let delta = Tensor::randn(&[1, 4], 1.0, &mut rng);
                let delta = delta.scale(1.0 / delta.frobenius());
                let a = norm.apply(&k, NORM_EPS).unwrap();
                let b = norm.apply(&shift(&k, &delta), NORM_EPS).unwrap();
                if a.max_abs_diff(&b).unwrap() > 1e-6 {
                    fired += 1;
                }
            }
            assert!(fired >= 45, "{norm:?}: {fired}");
        }
    }

    #[test]
    fn instance_norm_makes_ttt_shift_invariant() {
        let mut rng = seeded(5);
        for _ in 0..10 {
            let m = InnerModel::init(InnerVariant::TwoLayerMlp, ActivationKind::Silu, 4, 4, 0.5, &mut rng).unwrap();
            let inputs = AttentionInputs::random((3, 3), 4, &mut rng);
            let delta = Tensor::randn(&[1, 4], 2.0, &mut rng);
            let shifted = inputs.with_keys(shift(&inputs.k, &delta)).unwrap();
            let cfg = TttConfig::default();
            let a = ttt_forward(&m, &normalize_inputs(&inputs, KeyNorm::Instance).unwrap(), &cfg).unwrap();
            let b = ttt_forward(&m, &normalize_inputs(&shifted, KeyNorm::Instance).unwrap(), &cfg).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() < 1e-10);
        }
    }

    #[test]
    fn parses_labels() {
        for n in KeyNorm::ALL {
            assert_eq!(n.label().parse::<KeyNorm>().unwrap(), n);
        }
        assert!("batch".parse::<KeyNorm>().is_err());
    }

    fn random_case(seed: u64) -> (InnerModel, Tensor, Tensor, Tensor) {
        let mut rng = seeded(seed);
        let m = InnerModel::init(InnerVariant::TwoLayerMlp, ActivationKind::Silu, 4, 4, 0.6, &mut rng).unwrap();
        let k = Tensor::randn(&[1, 4], 1.0, &mut rng);
        let v = Tensor::randn(&[1, 4], 1.0, &mut rng);
        let delta = Tensor::randn(&[1, 4], 1.0, &mut rng);
        (m, k, v, delta)
    }

    #[test]
    fn zero_shift_expansion() {
        let (m, k, v, _) = random_case(6);
        let e = shifted_gradient_expansion(&m, &k, &v, &Tensor::zeros(&[1, 4])).unwrap();
        assert!(e.exact_shifted.max_abs_diff(&e.order0).unwrap() < 1e-14);
        assert_eq!(e.order1a.max_abs() + e.order1b.max_abs() + e.order2.max_abs(), 0.0);
        assert!(e.truncation_residual < 1e-14);
    }

    #[test]
    fn order0_is_the_unshifted_gradient() {
        let (m, k, v, delta) = random_case(7);
        let e = shifted_gradient_expansion(&m, &k, &v, &delta).unwrap();
        let (g1, _) = two_layer_analytic_grads(&m, &k, &v, InnerLoss::InnerProduct).unwrap();
        assert!(e.order0.rel_err(&g1, 1e-12).unwrap() < 1e-12);
    }

    #[test]
    fn residual_is_second_order() {
        for seed in 0..20 {
            let (m, k, v, delta) = random_case(100 + seed);
            let delta = delta.scale(1e-2 / delta.frobenius());
            let full = shifted_gradient_expansion(&m, &k, &v, &delta).unwrap();
            let half = shifted_gradient_expansion(&m, &k, &v, &delta.scale(0.5)).unwrap();
            let ratio = half.truncation_residual / full.truncation_residual;
            assert!((0.18..=0.35).contains(&ratio), "seed {seed}: {ratio}");
        }
    }
}
