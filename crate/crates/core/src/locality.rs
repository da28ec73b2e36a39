//! Locality for linear mixers: residual depthwise convolutions on the token
//! grid, TTT/neighborhood-attention blending, and implicit attention maps
//! read off the Jacobian of a layer's output with respect to its values.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::ActivationKind;
use crate::attention::{
    linear_attention_tape, neighborhood_attention_tape, neighbors, softmax_attention_tape, AttentionInputs,
};
use crate::conv::{dwconv_tokens, Grid};
use crate::error::{config_err, dim_err, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::ttt::{InnerModel, TttConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LocalityMode {
    #[default]
    None,
    /// `x + DWC(x)` on the block input.
    CpeX,
    /// `v + DWC(v)`
    DwcV,
    /// `q + DWC(q)`, `k + DWC(k)`
    DwcQk,
}

impl LocalityMode {
    pub fn label(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::CpeX => "cpe_x",
            Self::DwcV => "dwc_v",
            Self::DwcQk => "dwc_qk",
        }
    }

    /// Number of depthwise kernels the mode adds to a block.
    pub fn kernel_count(self) -> usize {
        match self {
            Self::None => 0,
            Self::CpeX | Self::DwcV => 1,
            Self::DwcQk => 2,
        }
    }
}

impl std::str::FromStr for LocalityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "cpe_x" | "cpe" => Ok(Self::CpeX),
            "dwc_v" => Ok(Self::DwcV),
            "dwc_qk" | "dwc" => Ok(Self::DwcQk),
            other => Err(config_err(format!("unknown locality mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalityConfig {
    pub mode: LocalityMode,
    pub kernel_size: usize,
    pub blend_nat: Option<usize>,
}

impl Default for LocalityConfig {
    fn default() -> Self {
        Self {
            mode: LocalityMode::None,
            kernel_size: 3,
            blend_nat: None,
        }
    }
}

impl LocalityConfig {
    pub fn new(mode: LocalityMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn with_nat(mut self, window: usize) -> Self {
        self.blend_nat = Some(window);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size % 2 == 0 {
            return Err(config_err(format!("kernel size {} must be odd", self.kernel_size)));
        }
        if let Some(w) = self.blend_nat {
            if w % 2 == 0 {
                return Err(config_err(format!("NAT window {w} must be odd")));
            }
        }
        Ok(())
    }
}

fn residual_dwconv(x: &Tensor, kernel: &Tensor, grid: Grid) -> Result<Tensor> {
    x.add(&dwconv_tokens(x, kernel, grid)?)
}

/// `x + DWC(x)` on the tape.
pub fn residual_dwconv_tape(x: &Var, kernel: &Var, grid: Grid) -> Result<Var> {
    x.add(&x.dwconv(kernel, grid)?)
}

/// `(Q + DWC_q(Q), K + DWC_k(K))`.
pub fn enhance_qk(
    q: &Tensor,
    k: &Tensor,
    grid: Grid,
    cfg: &LocalityConfig,
    kernels: (&Tensor, &Tensor),
) -> Result<(Tensor, Tensor)> {
    cfg.validate()?;
    if cfg.mode != LocalityMode::DwcQk {
        return Err(config_err(format!("enhance_qk needs mode dwc_qk, got {}", cfg.mode.label())));
    }
    q.check_same_shape(k)?;
    Ok((residual_dwconv(q, kernels.0, grid)?, residual_dwconv(k, kernels.1, grid)?))
}

/// Residual DWC on the block input (`cpe_x`) or on the values (`dwc_v`).
pub fn enhance_alternatives(x: &Tensor, grid: Grid, cfg: &LocalityConfig, kernel: &Tensor) -> Result<Tensor> {
    cfg.validate()?;
    match cfg.mode {
        LocalityMode::CpeX | LocalityMode::DwcV => residual_dwconv(x, kernel, grid),
        other => Err(config_err(format!(
            "enhance_alternatives needs mode cpe_x or dwc_v, got {}",
            other.label()
        ))),
    }
}

/// `½·TTT + ½·NAT` with shared Q, K, V.
pub fn blend_ttt_nat_tape(
    model: &InnerModel,
    cfg: &TttConfig,
    q: &Var,
    k: &Var,
    v: &Var,
    grid: Grid,
    window: usize,
) -> Result<Var> {
    let inner = model.on_tape(q.tape(), false);
    let ttt = inner.ttt_forward(q, k, v, cfg)?;
    let nat = neighborhood_attention_tape(q, k, v, grid, window)?;
    Ok(ttt.add(&nat)?.scale(0.5))
}

pub fn blend_ttt_nat(inputs: &AttentionInputs, model: &InnerModel, cfg: &TttConfig, window: usize) -> Result<Tensor> {
    let tape = Tape::new();
    let (q, k, v) = inputs.constants(&tape);
    let out = blend_ttt_nat_tape(model, cfg, &q, &k, &v, inputs.grid, window)?;
    Ok((*out.value()).clone())
}

/// A token mixer acting on one head's `(Q, K, V)`.
#[derive(Debug, Clone)]
pub enum MixerLayer {
    Softmax,
    Linear { kernel: ActivationKind },
    Nat { window: usize },
    Ttt { model: InnerModel, cfg: TttConfig },
    Blend { model: InnerModel, cfg: TttConfig, window: usize },
}

impl MixerLayer {
    pub fn label(&self) -> String {
        match self {
            Self::Softmax => "softmax".into(),
            Self::Linear { .. } => "linear".into(),
            Self::Nat { window } => format!("nat{window}"),
            Self::Ttt { model, .. } => format!("ttt_{}", model.variant.label()),
            Self::Blend { model, window, .. } => format!("ttt_{}+nat{window}", model.variant.label()),
        }
    }

    pub fn forward_tape(&self, q: &Var, k: &Var, v: &Var, grid: Grid) -> Result<Var> {
        match self {
            Self::Softmax => softmax_attention_tape(q, k, v),
            Self::Linear { kernel } => linear_attention_tape(q, k, v, *kernel, None),
            Self::Nat { window } => neighborhood_attention_tape(q, k, v, grid, *window),
            Self::Ttt { model, cfg } => model.on_tape(q.tape(), false).ttt_forward(q, k, v, cfg),
            Self::Blend { model, cfg, window } => blend_ttt_nat_tape(model, cfg, q, k, v, grid, *window),
        }
    }

    pub fn forward(&self, inputs: &AttentionInputs) -> Result<Tensor> {
        let tape = Tape::new();
        let (q, k, v) = inputs.constants(&tape);
        Ok((*self.forward_tape(&q, &k, &v, inputs.grid)?.value()).clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    TraceOverD,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitAttentionMap {
    /// `scores[i][j] = trace(∂oᵢ/∂vⱼ) / d`
    pub scores: Tensor,
    pub reduction: Reduction,
}

impl ImplicitAttentionMap {
    /// CSV with header `i,j,score`, row-major.
    pub fn to_csv(&self) -> String {
        let n = self.scores.rows();
        let mut out = String::from("i,j,score\n");
        for i in 0..n {
            for j in 0..n {
                out.push_str(&format!("{i},{j},{:e}\n", self.scores.at(i, j)));
            }
        }
        out
    }
}

pub fn implicit_attention(layer: &MixerLayer, inputs: &AttentionInputs) -> Result<ImplicitAttentionMap> {
    let (n, d) = (inputs.tokens(), inputs.head_dim());
    let rows: Vec<Result<Vec<f64>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let tape = Tape::new();
            let q = tape.constant(inputs.q.clone());
            let k = tape.constant(inputs.k.clone());
            let v = tape.leaf(inputs.v.clone());
            let out = layer.forward_tape(&q, &k, &v, inputs.grid)?;
            let mut row = vec![0.0; n];
            for c in 0..d {
                let mut seed = Tensor::zeros(&[n, d]);
                seed.set(i, c, 1.0);
                let g = tape.grad_values(&out, &[v.clone()], Some(&seed))?.remove(0);
                for (j, r) in row.iter_mut().enumerate() {
                    *r += g.at(j, c);
                }
            }
            row.iter_mut().for_each(|r| *r /= d as f64);
            if row.iter().any(|r| !r.is_finite()) {
                return Err(Error::Divergence {
                    step: i,
                    what: "implicit attention row is not finite".into(),
                });
            }
            Ok(row)
        })
        .collect();
    let mut data = Vec::with_capacity(n * n);
    for row in rows {
        data.extend(row?);
    }
    Ok(ImplicitAttentionMap {
        scores: Tensor::new(&[n, n], data)?,
        reduction: Reduction::TraceOverD,
    })
}

/// Share of `Σ|scores|` that falls inside each token's `window` neighborhood.
pub fn locality_index(scores: &Tensor, grid: Grid, window: usize) -> Result<f64> {
    let (n, m) = scores.dims2()?;
    if n != m || n != grid.0 * grid.1 {
        return Err(dim_err(format!("scores {n}×{m} do not match grid {grid:?}")));
    }
    let (mut inside, mut outside) = (0.0, 0.0);
    for i in 0..n {
        let nb = neighbors(grid, window, i)?;
        for j in 0..n {
            if nb.contains(&j) {
                inside += scores.at(i, j).abs();
            } else {
                outside += scores.at(i, j).abs();
            }
        }
    }
    let total = inside + outside;
    Ok(if total == 0.0 { 0.0 } else { inside / total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{neighborhood_attention, softmax_weights};
    use crate::conv::delta_kernel;
    use crate::rng::seeded;
    use crate::ttt::{inner_forward, ttt_forward, InnerVariant};

    #[test]
    fn enhance_qk_identity_and_doubling() {
        let mut rng = seeded(1);
        let q = Tensor::randn(&[16, 3], 1.0, &mut rng);
        let k = Tensor::randn(&[16, 3], 1.0, &mut rng);
        let cfg = LocalityConfig::new(LocalityMode::DwcQk);
        let z = Tensor::zeros(&[3, 3, 3]);
        let (q1, k1) = enhance_qk(&q, &k, (4, 4), &cfg, (&z, &z)).unwrap();
        assert_eq!((q1, k1), (q.clone(), k.clone()));
        let dk = delta_kernel(3, 3);
        let (q2, _) = enhance_qk(&q, &k, (4, 4), &cfg, (&dk, &dk)).unwrap();
        assert_eq!(q2, q.scale(2.0));
        assert!(enhance_qk(&q, &k, (4, 4), &LocalityConfig::default(), (&z, &z)).is_err());
        assert!(matches!(
            enhance_qk(&q, &k, (3, 4), &cfg, (&z, &z)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn enhance_alternatives_is_linear() {
        let mut rng = seeded(2);
        let cfg = LocalityConfig::new(LocalityMode::DwcV);
        let kern = Tensor::randn(&[3, 3, 2], 1.0, &mut rng);
        let x = Tensor::randn(&[12, 2], 1.0, &mut rng);
        let y = Tensor::randn(&[12, 2], 1.0, &mut rng);
        let lhs = enhance_alternatives(&x.scale(2.0).add(&y.scale(-0.5)).unwrap(), (3, 4), &cfg, &kern).unwrap();
        let rhs = enhance_alternatives(&x, (3, 4), &cfg, &kern)
            .unwrap()
            .scale(2.0)
            .add(&enhance_alternatives(&y, (3, 4), &cfg, &kern).unwrap().scale(-0.5))
            .unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
        let zero = enhance_alternatives(&x, (3, 4), &LocalityConfig::new(LocalityMode::CpeX), &Tensor::zeros(&[3, 3, 2]));
        assert_eq!(zero.unwrap(), x);
    }

    #[test]
    fn blend_cases() {
        let mut rng = seeded(3);
        let inputs = AttentionInputs::random((3, 3), 4, &mut rng);
        let mut m = InnerModel::init(InnerVariant::TwoLayerMlp, ActivationKind::Silu, 4, 4, 0.5, &mut rng).unwrap();
        let cfg = TttConfig::default();
        let out = blend_ttt_nat(&inputs, &m, &cfg, 3).unwrap();
        let ttt = ttt_forward(&m, &inputs, &cfg).unwrap();
        let nat = neighborhood_attention(&inputs, 3).unwrap();
        let expected = ttt.add(&nat).unwrap().scale(0.5);
        assert!(out.max_abs_diff(&expected).unwrap() < 1e-12);

        m.weights[1] = Tensor::zeros(&[4, 4]);
        let frozen = TttConfig {
            inner_lr: 0.0,
            ..cfg
        };
        assert_eq!(inner_forward(&m, &inputs.q).unwrap().max_abs(), 0.0);
        let out = blend_ttt_nat(&inputs, &m, &frozen, 3).unwrap();
        assert!(out.max_abs_diff(&nat.scale(0.5)).unwrap() < 1e-15);
    }

    #[test]
    fn softmax_implicit_attention_is_the_attention_matrix() {
        let mut rng = seeded(4);
        let inputs = AttentionInputs::random((2, 3), 4, &mut rng);
        let map = implicit_attention(&MixerLayer::Softmax, &inputs).unwrap();
        let p = softmax_weights(&inputs).unwrap();
        assert!(map.scores.max_abs_diff(&p).unwrap() < 1e-8);
    }

    #[test]
    fn linear_implicit_rows_sum_to_one() {
        let mut rng = seeded(5);
        let inputs = AttentionInputs::random((3, 3), 3, &mut rng);
        let layer = MixerLayer::Linear {
            kernel: ActivationKind::EluPlusOne,
        };
        let map = implicit_attention(&layer, &inputs).unwrap();
        for i in 0..9 {
            let s: f64 = map.scores.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn nat_implicit_map_is_fully_local() {
        let mut rng = seeded(6);
        let inputs = AttentionInputs::random((4, 4), 3, &mut rng);
        let map = implicit_attention(&MixerLayer::Nat { window: 3 }, &inputs).unwrap();
        assert_eq!(locality_index(&map.scores, (4, 4), 3).unwrap(), 1.0);
        assert!(map.scores.data().iter().all(|s| *s >= 0.0));
        let soft = implicit_attention(&MixerLayer::Softmax, &inputs).unwrap();
        assert!(locality_index(&soft.scores, (4, 4), 3).unwrap() < 1.0);
    }

    #[test]
    fn csv_layout() {
        let map = ImplicitAttentionMap {
            scores: Tensor::eye(2),
            reduction: Reduction::TraceOverD,
        };
        assert_eq!(map.to_csv(), "i,j,score\n0,0,1e0\n0,1,0e0\n1,0,0e0\n1,1,1e0\n");
    }

    #[test]
    fn config_validation() {
        let cfg = LocalityConfig {
            kernel_size: 4,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        assert!(LocalityConfig::default().with_nat(2).validate().is_err());
        assert_eq!(LocalityMode::DwcQk.kernel_count(), 2);
    }
}
