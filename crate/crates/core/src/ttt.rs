//! Test-time-training layers.
//!
//! An inner model `f_W` is fitted to the `(key → value)` pairs of one
//! sequence by gradient steps on an inner loss, and the adapted model is then
//! applied to every query. Row-vector convention throughout: a token is a
//! 1×d row and `f(x) = σ(x·W₁)·W₂`.
//!
//! The update is non-causal: all tokens contribute to one batch gradient and
//! every query sees the same adapted weights `W − Δ`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::activation::ActivationKind;
use crate::attention::AttentionInputs;
use crate::error::{config_err, dim_err, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Standard deviation of freshly initialized inner weights.
pub const INNER_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerVariant {
    /// `x·W`
    Linear,
    /// `σ(x·W_g) ⊙ (x·W₁)`, requires `h == d`
    OneLayerGate,
    /// `σ(x·W₁)·W₂`
    TwoLayerMlp,
    /// `σ(σ(x·W₁)·W_m)·W₂`
    ThreeLayerMlp,
    /// `(σ(x·W_g) ⊙ (x·W_u))·W_d`
    SwiGlu,
}

impl InnerVariant {
    pub const ALL: [InnerVariant; 5] = [
        Self::Linear,
        Self::OneLayerGate,
        Self::TwoLayerMlp,
        Self::ThreeLayerMlp,
        Self::SwiGlu,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Self::Linear => "linear",
            Self::OneLayerGate => "one_layer_gate",
            Self::TwoLayerMlp => "two_layer",
            Self::ThreeLayerMlp => "three_layer",
            Self::SwiGlu => "swiglu",
        }
    }

    pub fn weight_names(self) -> &'static [&'static str] {
        match self {
            Self::Linear => &["w"],
            Self::OneLayerGate => &["w_gate", "w1"],
            Self::TwoLayerMlp => &["w1", "w2"],
            Self::ThreeLayerMlp => &["w1", "w_mid", "w2"],
            Self::SwiGlu => &["w_gate", "w_up", "w_down"],
        }
    }

    pub fn weight_shapes(self, d: usize, h: usize) -> Result<Vec<[usize; 2]>> {
        Ok(match self {
            Self::Linear => vec![[d, d]],
            Self::OneLayerGate => {
                if h != d {
                    return Err(config_err(format!(
                        "one_layer_gate needs hidden width == head dim ({h} != {d})"
                    )));
                }
                vec![[d, h], [d, h]]
            }
            Self::TwoLayerMlp => vec![[d, h], [h, d]],
            Self::ThreeLayerMlp => vec![[d, h], [h, h], [h, d]],
            Self::SwiGlu => vec![[d, h], [d, h], [h, d]],
        })
    }

    pub fn param_count(self, d: usize, h: usize) -> Result<usize> {
        Ok(self.weight_shapes(d, h)?.iter().map(|[a, b]| a * b).sum())
    }

    pub fn forward_tape(self, act: ActivationKind, w: &[Var], x: &Var) -> Result<Var> {
        if w.len() != self.weight_names().len() {
            return Err(dim_err(format!(
                "{} expects {} weight matrices, got {}",
                self.label(),
                self.weight_names().len(),
                w.len()
            )));
        }
        match self {
            Self::Linear => x.matmul(&w[0]),
            Self::OneLayerGate => x.matmul(&w[0])?.activation(act).mul(&x.matmul(&w[1])?),
            Self::TwoLayerMlp => x.matmul(&w[0])?.activation(act).matmul(&w[1]),
            Self::ThreeLayerMlp => x
                .matmul(&w[0])?
                .activation(act)
                .matmul(&w[1])?
                .activation(act)
                .matmul(&w[2]),
            Self::SwiGlu => x
                .matmul(&w[0])?
                .activation(act)
                .mul(&x.matmul(&w[1])?)?
                .matmul(&w[2]),
        }
    }
}

impl std::str::FromStr for InnerVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "linear" => Self::Linear,
            "one_layer_gate" | "1layer_gate" | "gate" => Self::OneLayerGate,
            "two_layer" | "two_layer_mlp" | "2layer" | "ttt2" => Self::TwoLayerMlp,
            "three_layer" | "three_layer_mlp" | "3layer" | "ttt3" => Self::ThreeLayerMlp,
            "swiglu" => Self::SwiGlu,
            other => return Err(config_err(format!("unknown inner model {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerLoss {
    /// `Σᵢ ‖f(kᵢ) − vᵢ‖²`
    L2,
    /// `−Σᵢ vᵢᵀ f(kᵢ)`
    InnerProduct,
}

impl std::str::FromStr for InnerLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(Self::L2),
            "inner_product" | "dot" => Ok(Self::InnerProduct),
            other => Err(config_err(format!("unknown inner loss {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KeyScale {
    #[default]
    None,
    InvSqrtD,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TttConfig {
    pub inner_loss: InnerLoss,
    /// η; zero disables the update.
    pub inner_lr: f64,
    pub inner_steps: usize,
    pub key_scale: KeyScale,
}

impl Default for TttConfig {
    fn default() -> Self {
        Self {
            inner_loss: InnerLoss::InnerProduct,
            inner_lr: 1.0,
            inner_steps: 1,
            key_scale: KeyScale::None,
        }
    }
}

impl TttConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inner_steps == 0 {
            return Err(config_err("inner_steps must be at least 1"));
        }
        if !(self.inner_lr >= 0.0 && self.inner_lr.is_finite()) {
            return Err(config_err(format!("inner_lr {} must be ≥ 0", self.inner_lr)));
        }
        Ok(())
    }
}

/// Inner network of a TTT layer: the compressed stand-in for a KV cache.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerModel {
    pub variant: InnerVariant,
    pub activation: ActivationKind,
    pub weights: Vec<Tensor>,
}

impl InnerModel {
    pub fn new(variant: InnerVariant, activation: ActivationKind, weights: Vec<Tensor>) -> Result<Self> {
        let d = weights
            .first()
            .ok_or_else(|| dim_err("inner model needs weights"))?
            .rows();
        let h = match variant {
            InnerVariant::Linear => d,
            _ => weights[0].cols(),
        };
        let expected = variant.weight_shapes(d, h)?;
        if expected.len() != weights.len()
            || expected.iter().zip(&weights).any(|(s, w)| w.shape() != s)
        {
            return Err(dim_err(format!(
                "{} weights must have shapes {expected:?}",
                variant.label()
            )));
        }
        Ok(Self {
            variant,
            activation,
            weights,
        })
    }

    /// Gaussian(0, `std`) weights for head dim `d` and hidden width `h`.
    pub fn init(
        variant: InnerVariant,
        activation: ActivationKind,
        d: usize,
        h: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weights = variant
            .weight_shapes(d, h)?
            .iter()
            .map(|s| Tensor::randn(s, std, rng))
            .collect();
        Self::new(variant, activation, weights)
    }

    pub fn zeros(variant: InnerVariant, activation: ActivationKind, d: usize, h: usize) -> Result<Self> {
        let weights = variant
            .weight_shapes(d, h)?
            .iter()
            .map(|s| Tensor::zeros(s))
            .collect();
        Self::new(variant, activation, weights)
    }

    pub fn dim(&self) -> usize {
        self.weights[0].rows()
    }

    pub fn hidden(&self) -> usize {
        match self.variant {
            InnerVariant::Linear => self.dim(),
            _ => self.weights[0].cols(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Tensor::len).sum()
    }

    /// Records the weights on `tape`, as leaves when `trainable`.
    pub fn on_tape(&self, tape: &Tape, trainable: bool) -> InnerVars {
        let weights = self
            .weights
            .iter()
            .map(|w| {
                if trainable {
                    tape.leaf(w.clone())
                } else {
                    tape.constant(w.clone())
                }
            })
            .collect();
        InnerVars {
            variant: self.variant,
            activation: self.activation,
            weights,
        }
    }
}

/// An inner model whose weights live on a tape.
#[derive(Debug, Clone)]
pub struct InnerVars {
    pub variant: InnerVariant,
    pub activation: ActivationKind,
    pub weights: Vec<Var>,
}

impl InnerVars {
    fn with_weights(&self, weights: Vec<Var>) -> Self {
        Self {
            variant: self.variant,
            activation: self.activation,
            weights,
        }
    }

    pub fn forward(&self, x: &Var) -> Result<Var> {
        self.variant.forward_tape(self.activation, &self.weights, x)
    }

    pub fn loss(&self, k: &Var, v: &Var, kind: InnerLoss) -> Result<Var> {
        let f = self.forward(k)?;
        match kind {
            InnerLoss::L2 => f.sub(v)?.square()?.sum(),
            InnerLoss::InnerProduct => Ok(f.mul(v)?.sum()?.neg()),
        }
    }

    /// Accumulated fast-weight deltas Δ after `cfg.inner_steps` full-batch
    /// gradient steps, each taken at `W − Δ`. The deltas stay differentiable
    /// with respect to the weights, keys and values.
    pub fn deltas(&self, k: &Var, v: &Var, cfg: &TttConfig) -> Result<Vec<Var>> {
        cfg.validate()?;
        let tape = k.tape().clone();
        let mut deltas: Option<Vec<Var>> = None;
        for step in 0..cfg.inner_steps {
            let current = match &deltas {
                None => self.weights.clone(),
                Some(ds) => self
                    .weights
                    .iter()
                    .zip(ds)
                    .map(|(w, d)| w.sub(d))
                    .collect::<Result<_>>()?,
            };
            let loss = self.with_weights(current.clone()).loss(k, v, cfg.inner_loss)?;
            if !loss.value().all_finite() {
                return Err(Error::Divergence {
                    step,
                    what: "inner loss is not finite".into(),
                });
            }
            let grads = tape.grad(&loss, &current, None)?;
            if let Some(i) = grads.iter().position(|g| !g.value().all_finite()) {
                return Err(Error::Divergence {
                    step,
                    what: format!("gradient of inner weight {i} is not finite"),
                });
            }
            let scaled = grads.iter().map(|g| g.scale(cfg.inner_lr));
            deltas = Some(match deltas {
                None => scaled.collect(),
                Some(ds) => ds
                    .iter()
                    .zip(scaled)
                    .map(|(d, g)| d.add(&g))
                    .collect::<Result<_>>()?,
            });
        }
        Ok(deltas.expect("inner_steps ≥ 1"))
    }

    /// Adapts to `(k, v)` and applies the adapted model to `q`.
    pub fn ttt_forward(&self, q: &Var, k: &Var, v: &Var, cfg: &TttConfig) -> Result<Var> {
        let k = match cfg.key_scale {
            KeyScale::None => k.clone(),
            KeyScale::InvSqrtD => k.scale(1.0 / (k.value().cols() as f64).sqrt()),
        };
        let deltas = self.deltas(&k, v, cfg)?;
        let adapted = self
            .weights
            .iter()
            .zip(&deltas)
            .map(|(w, d)| w.sub(d))
            .collect::<Result<Vec<_>>>()?;
        self.with_weights(adapted).forward(q)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FastWeights {
    pub deltas: Vec<Tensor>,
}

impl FastWeights {
    /// `W − Δ` as a new inner model.
    pub fn apply(&self, m: &InnerModel) -> Result<InnerModel> {
        let weights = m
            .weights
            .iter()
            .zip(&self.deltas)
            .map(|(w, d)| w.sub(d))
            .collect::<Result<_>>()?;
        InnerModel::new(m.variant, m.activation, weights)
    }
}

fn check_width(m: &InnerModel, x: &Tensor) -> Result<()> {
    let (_, d) = x.dims2()?;
    if d != m.dim() {
        return Err(dim_err(format!(
            "input width {d} does not match inner model width {}",
            m.dim()
        )));
    }
    Ok(())
}

pub fn inner_forward(m: &InnerModel, x: &Tensor) -> Result<Tensor> {
    check_width(m, x)?;
    let tape = Tape::new();
    let vars = m.on_tape(&tape, false);
    Ok((*vars.forward(&tape.constant(x.clone()))?.value()).clone())
}

pub fn inner_loss(m: &InnerModel, k: &Tensor, v: &Tensor, kind: InnerLoss) -> Result<f64> {
    check_width(m, k)?;
    k.check_same_shape(v)?;
    let tape = Tape::new();
    let vars = m.on_tape(&tape, false);
    let loss = vars.loss(&tape.constant(k.clone()), &tape.constant(v.clone()), kind)?;
    Ok(loss.value().data()[0])
}

pub fn fast_weight_update(m: &InnerModel, k: &Tensor, v: &Tensor, cfg: &TttConfig) -> Result<FastWeights> {
    check_width(m, k)?;
    k.check_same_shape(v)?;
    let tape = Tape::new();
    let vars = m.on_tape(&tape, false);
    let deltas = vars.deltas(&tape.constant(k.clone()), &tape.constant(v.clone()), cfg)?;
    Ok(FastWeights {
        deltas: deltas.iter().map(|d| (*d.value()).clone()).collect(),
    })
}

pub fn ttt_forward(m: &InnerModel, inputs: &AttentionInputs, cfg: &TttConfig) -> Result<Tensor> {
    check_width(m, &inputs.q)?;
    let tape = Tape::new();
    let vars = m.on_tape(&tape, false);
    let (q, k, v) = inputs.constants(&tape);
    Ok((*vars.ttt_forward(&q, &k, &v, cfg)?.value()).clone())
}

/// Closed-form inner-loss gradients `(∇W₁, ∇W₂)` of a two-layer inner model,
/// summed over tokens: with `Z = K·W₁`, `A = σ(Z)` and `G = ∂L/∂F`
/// (`−V` for the inner-product loss, `2(A·W₂ − V)` for L2),
/// `∇W₁ = Kᵀ[(G·W₂ᵀ) ⊙ σ′(Z)]` and `∇W₂ = Aᵀ·G`.
pub fn two_layer_analytic_grads(
    m: &InnerModel,
    k: &Tensor,
    v: &Tensor,
    kind: InnerLoss,
) -> Result<(Tensor, Tensor)> {
    if m.variant != InnerVariant::TwoLayerMlp {
        return Err(config_err("analytic gradients exist for two_layer only"));
    }
    check_width(m, k)?;
    k.check_same_shape(v)?;
    let (w1, w2) = (&m.weights[0], &m.weights[1]);
    let z = k.matmul(w1)?;
    let a = z.map(|x| m.activation.eval(x));
    let slope = z.map(|x| m.activation.derivative(x, 1));
    let g = match kind {
        InnerLoss::InnerProduct => v.scale(-1.0),
        InnerLoss::L2 => a.matmul(w2)?.sub(v)?.scale(2.0),
    };
    let dz = g.matmul(&w2.transpose()?)?.mul(&slope)?;
    let gw1 = k.transpose()?.matmul(&dz)?;
    let gw2 = a.transpose()?.matmul(&g)?;
    Ok((gw1, gw2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fd::finite_diff_grad;
    use crate::rng::seeded;

    const SILU: ActivationKind = ActivationKind::Silu;

    #[test]
    fn linear_identity_is_identity() {
        let m = InnerModel::new(InnerVariant::Linear, SILU, vec![Tensor::eye(3)]).unwrap();
        let mut rng = seeded(1);
        let x = Tensor::randn(&[4, 3], 1.0, &mut rng);
        assert_eq!(inner_forward(&m, &x).unwrap(), x);
    }

    #[test]
    fn two_layer_with_zero_output_weights_is_zero() {
        let mut rng = seeded(2);
        let mut m = InnerModel::init(InnerVariant::TwoLayerMlp, SILU, 3, 3, 1.0, &mut rng).unwrap();
        m.weights[1] = Tensor::zeros(&[3, 3]);
        let x = Tensor::randn(&[5, 3], 1.0, &mut rng);
        assert_eq!(inner_forward(&m, &x).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn swiglu_matches_scalar_loops() {
        let mut rng = seeded(3);
        let m = InnerModel::init(InnerVariant::SwiGlu, SILU, 4, 4, 0.7, &mut rng).unwrap();
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let (wg, wu, wd) = (&m.weights[0], &m.weights[1], &m.weights[2]);
        let out = inner_forward(&m, &x).unwrap();
        for i in 0..3 {
            let mut hidden = [0.0; 4];
            for (j, hv) in hidden.iter_mut().enumerate() {
                let (mut g, mut u) = (0.0, 0.0);
                for c in 0..4 {
                    g += x.at(i, c) * wg.at(c, j);
                    u += x.at(i, c) * wu.at(c, j);
                }
                *hv = g / (1.0 + (-g).exp()) * u;
            }
            for c in 0..4 {
                let expect: f64 = (0..4).map(|j| hidden[j] * wd.at(j, c)).sum();
                assert!((out.at(i, c) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shapes_per_variant() {
        assert_eq!(InnerVariant::Linear.weight_shapes(4, 4).unwrap(), vec![[4, 4]]);
        assert_eq!(
            InnerVariant::ThreeLayerMlp.weight_shapes(4, 6).unwrap(),
            vec![[4, 6], [6, 6], [6, 4]]
        );
        assert!(InnerVariant::OneLayerGate.weight_shapes(4, 6).is_err());
        let bad = InnerModel::new(
            InnerVariant::TwoLayerMlp,
            SILU,
            vec![Tensor::zeros(&[3, 3]), Tensor::zeros(&[2, 3])],
        );
        assert!(matches!(bad, Err(Error::Dimension(_))));
        let m = InnerModel::zeros(InnerVariant::Linear, SILU, 3, 3).unwrap();
        assert!(inner_forward(&m, &Tensor::zeros(&[2, 4])).is_err());
    }

    #[test]
    fn loss_edge_cases() {
        // N = 1 linear model mapping k exactly onto v.
        let k = Tensor::row_vector(&[1.0, 0.0]).unwrap();
        let v = Tensor::row_vector(&[0.3, -0.7]).unwrap();
        let w = Tensor::from_rows(&[vec![0.3, -0.7], vec![0.0, 0.0]]).unwrap();
        let m = InnerModel::new(InnerVariant::Linear, SILU, vec![w]).unwrap();
        assert_eq!(inner_loss(&m, &k, &v, InnerLoss::L2).unwrap(), 0.0);

        let mut rng = seeded(4);
        let m = InnerModel::init(InnerVariant::TwoLayerMlp, SILU, 3, 3, 1.0, &mut rng).unwrap();
        let k = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let zero = Tensor::zeros(&[5, 3]);
        let f = inner_forward(&m, &k).unwrap();
        let l2 = inner_loss(&m, &k, &zero, InnerLoss::L2).unwrap();
        assert!((l2 - f.frobenius().powi(2)).abs() < 1e-12);
        assert_eq!(inner_loss(&m, &k, &zero, InnerLoss::InnerProduct).unwrap(), 0.0);
    }

    #[test]
    fn loss_matches_per_token_sum() {
        let mut rng = seeded(5);
        let m = InnerModel::init(InnerVariant::ThreeLayerMlp, SILU, 3, 4, 0.8, &mut rng).unwrap();
        let k = Tensor::randn(&[6, 3], 1.0, &mut rng);
        let v = Tensor::randn(&[6, 3], 1.0, &mut rng);
        let (mut l2, mut ip) = (0.0, 0.0);
        for i in 0..6 {
            let ki = Tensor::row_vector(k.row(i)).unwrap();
            let fi = inner_forward(&m, &ki).unwrap();
            for c in 0..3 {
                l2 += (fi.data()[c] - v.at(i, c)).powi(2);
                ip -= fi.data()[c] * v.at(i, c);
            }
        }
        assert!((inner_loss(&m, &k, &v, InnerLoss::L2).unwrap() - l2).abs() < 1e-12);
        assert!((inner_loss(&m, &k, &v, InnerLoss::InnerProduct).unwrap() - ip).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_gives_zero_deltas() {
        let mut rng = seeded(6);
        let m = InnerModel::init(InnerVariant::SwiGlu, SILU, 3, 3, 0.5, &mut rng).unwrap();
        let k = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let v = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let cfg = TttConfig {
            inner_lr: 0.0,
            inner_steps: 3,
            ..TttConfig::default()
        };
        let fw = fast_weight_update(&m, &k, &v, &cfg).unwrap();
        assert!(fw.deltas.iter().all(|d| d.max_abs() == 0.0));

        let inputs = AttentionInputs::new(Tensor::randn(&[4, 3], 1.0, &mut rng), k, v, (2, 2)).unwrap();
        let out = ttt_forward(&m, &inputs, &cfg).unwrap();
        assert_eq!(out, inner_forward(&m, &inputs.q).unwrap());
    }

    #[test]
    fn linear_inner_product_delta_is_minus_ktv() {
        let mut rng = seeded(7);
        let m = InnerModel::zeros(InnerVariant::Linear, SILU, 3, 3).unwrap();
        let k = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let v = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let fw = fast_weight_update(&m, &k, &v, &TttConfig::default()).unwrap();
        let ktv = k.transpose().unwrap().matmul(&v).unwrap();
        assert!(fw.deltas[0].add(&ktv).unwrap().max_abs() < 1e-12);
        let adapted = fw.apply(&m).unwrap();
        assert!(adapted.weights[0].max_abs_diff(&ktv).unwrap() < 1e-12);
    }

    #[test]
    fn analytic_two_layer_grads_match_tape() {
        let mut rng = seeded(8);
        for kind in [InnerLoss::InnerProduct, InnerLoss::L2] {
            for _ in 0..10 {
                let m = InnerModel::init(InnerVariant::TwoLayerMlp, SILU, 4, 4, 0.5, &mut rng).unwrap();
                let k = Tensor::randn(&[6, 4], 1.0, &mut rng);
                let v = Tensor::randn(&[6, 4], 1.0, &mut rng);
                let (g1, g2) = two_layer_analytic_grads(&m, &k, &v, kind).unwrap();
                let fw = fast_weight_update(&m, &k, &v, &TttConfig { inner_loss: kind, ..Default::default() }).unwrap();
                assert!(fw.deltas[0].rel_err(&g1, 1e-12).unwrap() < 1e-8);
                assert!(fw.deltas[1].rel_err(&g2, 1e-12).unwrap() < 1e-8);
            }
        }
    }

    #[test]
    fn multi_step_update_matches_manual_loop() {
        let mut rng = seeded(9);
        let m = InnerModel::init(InnerVariant::TwoLayerMlp, SILU, 3, 3, 0.4, &mut rng).unwrap();
        let k = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let v = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let cfg = TttConfig {
            inner_loss: InnerLoss::L2,
            inner_lr: 0.05,
            inner_steps: 3,
            key_scale: KeyScale::None,
        };
        let fw = fast_weight_update(&m, &k, &v, &cfg).unwrap();
        let mut cur = m.clone();
        for _ in 0..3 {
            let (g1, g2) = two_layer_analytic_grads(&cur, &k, &v, InnerLoss::L2).unwrap();
            cur.weights[0] = cur.weights[0].sub(&g1.scale(0.05)).unwrap();
            cur.weights[1] = cur.weights[1].sub(&g2.scale(0.05)).unwrap();
        }
        let adapted = fw.apply(&m).unwrap();
        for (a, b) in adapted.weights.iter().zip(&cur.weights) {
            assert!(a.max_abs_diff(b).unwrap() < 1e-12);
        }
    }

    #[test]
    fn ttt_forward_matches_finite_difference_update() {
        let mut rng = seeded(10);
        let m = InnerModel::init(InnerVariant::TwoLayerMlp, SILU, 3, 3, 0.5, &mut rng).unwrap();
        let inputs = AttentionInputs::random((2, 2), 3, &mut rng);
        let cfg = TttConfig::default();
        let out = ttt_forward(&m, &inputs, &cfg).unwrap();

        let mut adapted = m.clone();
        for idx in 0..2 {
            let f = |w: &Tensor| {
                let mut probe = m.clone();
                probe.weights[idx] = w.clone();
                inner_loss(&probe, &inputs.k, &inputs.v, cfg.inner_loss).unwrap()
            };
            let g = finite_diff_grad(f, &m.weights[idx], 1e-5).unwrap();
            adapted.weights[idx] = m.weights[idx].sub(&g).unwrap();
        }
        let expected = inner_forward(&adapted, &inputs.q).unwrap();
        assert!(out.max_abs_diff(&expected).unwrap() < 1e-6);
    }

    #[test]
    fn divergence_reports_step() {
        let m = InnerModel::new(
            InnerVariant::Linear,
            SILU,
            vec![Tensor::full(&[2, 2], 1.0)],
        )
        .unwrap();
        let k = Tensor::full(&[2, 2], 1e200);
        let v = Tensor::full(&[2, 2], 1e200);
        let cfg = TttConfig {
            inner_loss: InnerLoss::L2,
            ..Default::default()
        };
        let err = fast_weight_update(&m, &k, &v, &cfg).unwrap_err();
        assert!(matches!(err, Error::Divergence { step: 0, .. }), "{err}");
    }

    #[test]
    fn config_validation() {
        let bad = TttConfig {
            inner_steps: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TttConfig {
            inner_lr: f64::NAN,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
