//! Weight inheritance from Softmax attention blocks.
//!
//! A converted block keeps every pretrained tensor of the source block
//! verbatim and adds only the mixer's own parameters: inner-model weights for
//! TTT, optional Q/K projections for linear attention, and depthwise kernels
//! for locality. Every tensor carries a [`ParamGroup`] tag so optimizers can
//! give new parameters a larger learning rate.

pub mod checkpoint;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::activation::ActivationKind;
use crate::align::KeyNorm;
use crate::error::{config_err, dim_err, Error, Result};
use crate::locality::{LocalityConfig, LocalityMode};
use crate::rng::derived;
use crate::tensor::Tensor;
use crate::ttt::{InnerModel, InnerVariant, TttConfig, INNER_INIT_STD};

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};

/// Standard deviation of randomly initialized pretrained-style weights.
pub const WEIGHT_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Inherited,
    New,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Gap,
}

/// A plain ViT without class token, classified from globally pooled tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub depth: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub patch: usize,
    pub image_size: usize,
    pub in_chans: usize,
    pub num_classes: usize,
    pub mlp_ratio: usize,
    pub pooling: Pooling,
}

impl ModelConfig {
    pub fn deit_t() -> Self {
        Self {
            depth: 12,
            model_dim: 192,
            heads: 3,
            patch: 16,
            image_size: 224,
            in_chans: 3,
            num_classes: 1000,
            mlp_ratio: 4,
            pooling: Pooling::Gap,
        }
    }

    pub fn deit_s() -> Self {
        Self {
            model_dim: 384,
            heads: 6,
            ..Self::deit_t()
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "deit-t" | "deit_t" | "deit-tiny" => Ok(Self::deit_t()),
            "deit-s" | "deit_s" | "deit-small" => Ok(Self::deit_s()),
            other => Err(config_err(format!("unknown model config {other:?}"))),
        }
    }

    pub fn with_resolution(self, image_size: usize) -> Self {
        Self { image_size, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(config_err(format!(
                "model dim {} is not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(config_err(format!(
                "image size {} is not a multiple of patch {}",
                self.image_size, self.patch
            )));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn patch_dim(&self) -> usize {
        self.in_chans * self.patch * self.patch
    }
}

/// The inheritable parameters of one pre-norm Softmax attention block.
/// Matrices act on row vectors (`y = x·W + b`); vectors are stored as `1×n`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlockParams {
    pub heads: usize,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub b_q: Option<Tensor>,
    pub b_k: Option<Tensor>,
    pub b_v: Option<Tensor>,
    pub b_o: Tensor,
    pub norm1_scale: Tensor,
    pub norm1_shift: Tensor,
    pub norm2_scale: Tensor,
    pub norm2_shift: Tensor,
    pub mlp_in: Tensor,
    pub mlp_in_bias: Tensor,
    pub mlp_out: Tensor,
    pub mlp_out_bias: Tensor,
}

const BLOCK_TENSOR_NAMES: [&str; 16] = [
    "w_q",
    "b_q",
    "w_k",
    "b_k",
    "w_v",
    "b_v",
    "w_o",
    "b_o",
    "norm1.scale",
    "norm1.shift",
    "norm2.scale",
    "norm2.shift",
    "mlp.w_in",
    "mlp.b_in",
    "mlp.w_out",
    "mlp.b_out",
];

impl AttentionBlockParams {
    /// Gaussian(0, 0.02) weights, zero biases and unit norms.
    pub fn random(model_dim: usize, heads: usize, mlp_ratio: usize, qkv_bias: bool, rng: &mut impl Rng) -> Result<Self> {
        let d = model_dim;
        let h = d * mlp_ratio;
        let mut w = |r, c| Tensor::randn(&[r, c], WEIGHT_INIT_STD, rng);
        let (w_q, w_k, w_v, w_o) = (w(d, d), w(d, d), w(d, d), w(d, d));
        let (mlp_in, mlp_out) = (w(d, h), w(h, d));
        let bias = |on: bool| on.then(|| Tensor::zeros(&[1, d]));
        let p = Self {
            heads,
            w_q,
            w_k,
            w_v,
            w_o,
            b_q: bias(qkv_bias),
            b_k: bias(qkv_bias),
            b_v: bias(qkv_bias),
            b_o: Tensor::zeros(&[1, d]),
            norm1_scale: Tensor::ones(&[1, d]),
            norm1_shift: Tensor::zeros(&[1, d]),
            norm2_scale: Tensor::ones(&[1, d]),
            norm2_shift: Tensor::zeros(&[1, d]),
            mlp_in,
            mlp_in_bias: Tensor::zeros(&[1, h]),
            mlp_out,
            mlp_out_bias: Tensor::zeros(&[1, d]),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn model_dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim() / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.mlp_in.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.model_dim();
        if self.heads == 0 || d % self.heads != 0 {
            return Err(config_err(format!("model dim {d} is not divisible by {} heads", self.heads)));
        }
        let h = self.hidden_dim();
        for (name, t) in self.named() {
            let expected: [usize; 2] = match name {
                "mlp.w_in" => [d, h],
                "mlp.b_in" => [1, h],
                "mlp.w_out" => [h, d],
                n if n.starts_with("w_") => [d, d],
                _ => [1, d],
            };
            if t.shape() != expected {
                return Err(dim_err(format!("{name} has shape {:?}, expected {expected:?}", t.shape())));
            }
        }
        Ok(())
    }

    /// Tensors in a fixed order; absent biases are skipped.
    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        let slots: [Option<&Tensor>; 16] = [
            Some(&self.w_q),
            self.b_q.as_ref(),
            Some(&self.w_k),
            self.b_k.as_ref(),
            Some(&self.w_v),
            self.b_v.as_ref(),
            Some(&self.w_o),
            Some(&self.b_o),
            Some(&self.norm1_scale),
            Some(&self.norm1_shift),
            Some(&self.norm2_scale),
            Some(&self.norm2_shift),
            Some(&self.mlp_in),
            Some(&self.mlp_in_bias),
            Some(&self.mlp_out),
            Some(&self.mlp_out_bias),
        ];
        BLOCK_TENSOR_NAMES
            .iter()
            .zip(slots)
            .filter_map(|(n, t)| t.map(|t| (*n, t)))
            .collect()
    }

    pub fn from_named(heads: usize, tensors: &mut BTreeMap<String, Tensor>, prefix: &str) -> Result<Self> {
        let mut slots: BTreeMap<&str, Tensor> = BTreeMap::new();
        for n in BLOCK_TENSOR_NAMES {
            if let Some(t) = tensors.remove(&format!("{prefix}{n}")) {
                slots.insert(n, t);
            }
        }
        let mut need = |n: &str| -> Result<Tensor> {
            slots
                .remove(n)
                .ok_or_else(|| dim_err(format!("missing tensor {prefix}{n}")))
        };
        let p = Self {
            heads,
            w_q: need("w_q")?,
            b_q: need("b_q").ok(),
            w_k: need("w_k")?,
            b_k: need("b_k").ok(),
            w_v: need("w_v")?,
            b_v: need("b_v").ok(),
            w_o: need("w_o")?,
            b_o: need("b_o")?,
            norm1_scale: need("norm1.scale")?,
            norm1_shift: need("norm1.shift")?,
            norm2_scale: need("norm2.scale")?,
            norm2_shift: need("norm2.shift")?,
            mlp_in: need("mlp.w_in")?,
            mlp_in_bias: need("mlp.b_in")?,
            mlp_out: need("mlp.w_out")?,
            mlp_out_bias: need("mlp.b_out")?,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Which mixer replaces Softmax attention, with its settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MixerSpec {
    Linear {
        kernel: ActivationKind,
        proj_qk: bool,
        key_norm: KeyNorm,
    },
    Ttt {
        variant: InnerVariant,
        activation: ActivationKind,
        ttt: TttConfig,
        key_norm: KeyNorm,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvertSpec {
    pub mixer: MixerSpec,
    pub locality: LocalityConfig,
}

impl ConvertSpec {
    /// TTT with SiLU, the default update, instance-normalized keys and no locality.
    pub fn ttt(variant: InnerVariant) -> Self {
        Self {
            mixer: MixerSpec::Ttt {
                variant,
                activation: ActivationKind::Silu,
                ttt: TttConfig::default(),
                key_norm: KeyNorm::Instance,
            },
            locality: LocalityConfig::default(),
        }
    }

    /// ELU+1 kernel linear attention with raw keys.
    pub fn linear(proj_qk: bool) -> Self {
        Self {
            mixer: MixerSpec::Linear {
                kernel: ActivationKind::EluPlusOne,
                proj_qk,
                key_norm: KeyNorm::None,
            },
            locality: LocalityConfig::default(),
        }
    }

    /// SwiGLU TTT with DWC on Q/K: the converted block of the final models.
    pub fn t5() -> Self {
        Self::ttt(InnerVariant::SwiGlu).with_locality(LocalityConfig::new(LocalityMode::DwcQk))
    }

    pub fn with_locality(mut self, locality: LocalityConfig) -> Self {
        self.locality = locality;
        self
    }

    pub fn with_key_norm(mut self, norm: KeyNorm) -> Self {
        match &mut self.mixer {
            MixerSpec::Linear { key_norm, .. } | MixerSpec::Ttt { key_norm, .. } => *key_norm = norm,
        }
        self
    }

    pub fn with_ttt_config(mut self, cfg: TttConfig) -> Self {
        if let MixerSpec::Ttt { ttt, .. } = &mut self.mixer {
            *ttt = cfg;
        }
        self
    }

    pub fn key_norm(&self) -> KeyNorm {
        match self.mixer {
            MixerSpec::Linear { key_norm, .. } | MixerSpec::Ttt { key_norm, .. } => key_norm,
        }
    }

    pub fn label(&self) -> String {
        let mut s = match self.mixer {
            MixerSpec::Linear { proj_qk: false, .. } => "linear".to_string(),
            MixerSpec::Linear { proj_qk: true, .. } => "linear_projqk".to_string(),
            MixerSpec::Ttt { variant, .. } => format!("ttt_{}", variant.label()),
        };
        if self.locality.mode != LocalityMode::None {
            s.push('+');
            s.push_str(self.locality.mode.label());
        }
        if let Some(w) = self.locality.blend_nat {
            s.push_str(&format!("+nat{w}"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.locality.validate()?;
        if let MixerSpec::Ttt { ttt, .. } = &self.mixer {
            ttt.validate()?;
        }
        Ok(())
    }

    /// Names and shapes of the tensors this mixer adds to a block.
    pub fn new_tensor_shapes(&self, model_dim: usize, heads: usize) -> Result<Vec<(String, Vec<usize>)>> {
        if heads == 0 || model_dim % heads != 0 {
            return Err(config_err(format!("model dim {model_dim} is not divisible by {heads} heads")));
        }
        let d = model_dim / heads;
        let mut out = Vec::new();
        match self.mixer {
            MixerSpec::Linear { proj_qk, .. } => {
                if proj_qk {
                    for h in 0..heads {
                        out.push((format!("proj_qk.h{h}.q"), vec![d, d]));
                        out.push((format!("proj_qk.h{h}.k"), vec![d, d]));
                    }
                }
            }
            MixerSpec::Ttt { variant, .. } => {
                for h in 0..heads {
                    for (name, [r, c]) in variant.weight_names().iter().zip(variant.weight_shapes(d, d)?) {
                        out.push((format!("inner.h{h}.{name}"), vec![r, c]));
                    }
                }
            }
        }
        let k = self.locality.kernel_size;
        let kernel_names: &[&str] = match self.locality.mode {
            LocalityMode::None => &[],
            LocalityMode::CpeX => &["cpe"],
            LocalityMode::DwcV => &["dwc_v"],
            LocalityMode::DwcQk => &["dwc_q", "dwc_k"],
        };
        for name in kernel_names {
            out.push((name.to_string(), vec![k, k, model_dim]));
        }
        Ok(out)
    }
}

/// A Softmax block converted to a linear-complexity mixer.
#[derive(Debug, Clone, PartialEq)]
pub struct TttBlockParams {
    pub inherited: AttentionBlockParams,
    pub spec: ConvertSpec,
    /// Mixer and locality tensors, all in [`ParamGroup::New`].
    pub new: BTreeMap<String, Tensor>,
}

impl TttBlockParams {
    /// Inner models per head, rebuilt from the stored tensors.
    pub fn inner_models(&self) -> Result<Vec<InnerModel>> {
        let MixerSpec::Ttt { variant, activation, .. } = self.spec.mixer else {
            return Ok(Vec::new());
        };
        (0..self.inherited.heads)
            .map(|h| {
                let weights = variant
                    .weight_names()
                    .iter()
                    .map(|n| {
                        self.new
                            .get(&format!("inner.h{h}.{n}"))
                            .cloned()
                            .ok_or_else(|| dim_err(format!("missing inner.h{h}.{n}")))
                    })
                    .collect::<Result<_>>()?;
                InnerModel::new(variant, activation, weights)
            })
            .collect()
    }

    pub fn named(&self) -> Vec<(String, &Tensor, ParamGroup)> {
        let mut out: Vec<_> = self
            .inherited
            .named()
            .into_iter()
            .map(|(n, t)| (n.to_string(), t, ParamGroup::Inherited))
            .collect();
        out.extend(self.new.iter().map(|(n, t)| (n.clone(), t, ParamGroup::New)));
        out
    }

    pub fn param_groups(&self) -> BTreeMap<String, ParamGroup> {
        self.named().into_iter().map(|(n, _, g)| (n, g)).collect()
    }

    pub fn new_param_count(&self) -> usize {
        self.new.values().map(Tensor::len).sum()
    }
}

/// Converts one block. Inherited tensors are copied verbatim; inner weights
/// are drawn from Gaussian(0, 0.02), Q/K projections start at identity and
/// depthwise kernels at zero.
pub fn convert_block(src: &AttentionBlockParams, spec: &ConvertSpec, seed: u64) -> Result<TttBlockParams> {
    src.validate()?;
    spec.validate()?;
    let (d_model, heads) = (src.model_dim(), src.heads);
    let mut new = BTreeMap::new();
    for (stream, (name, shape)) in spec.new_tensor_shapes(d_model, heads)?.into_iter().enumerate() {
        let t = if name.starts_with("inner.") {
            Tensor::randn(&shape, INNER_INIT_STD, &mut derived(seed, stream as u64))
        } else if name.starts_with("proj_qk.") {
            Tensor::eye(shape[0])
        } else {
            Tensor::zeros(&shape)
        };
        new.insert(name, t);
    }
    Ok(TttBlockParams {
        inherited: src.clone(),
        spec: *spec,
        new,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    Softmax(AttentionBlockParams),
    Converted(TttBlockParams),
}

impl Block {
    pub fn attention(&self) -> &AttentionBlockParams {
        match self {
            Block::Softmax(p) => p,
            Block::Converted(c) => &c.inherited,
        }
    }

    pub fn spec(&self) -> Option<&ConvertSpec> {
        match self {
            Block::Softmax(_) => None,
            Block::Converted(c) => Some(&c.spec),
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor, ParamGroup)> {
        match self {
            Block::Softmax(p) => p
                .named()
                .into_iter()
                .map(|(n, t)| (n.to_string(), t, ParamGroup::Inherited))
                .collect(),
            Block::Converted(c) => c.named(),
        }
    }
}

/// A ViT: patch embedding, learned positional embedding, blocks, final norm
/// and a linear classifier over pooled tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct VitModel {
    pub config: ModelConfig,
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub pos_embed: Tensor,
    pub blocks: Vec<Block>,
    pub norm_scale: Tensor,
    pub norm_shift: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamBreakdown {
    pub total: usize,
    pub inherited: usize,
    pub new: usize,
}

impl VitModel {
    /// A randomly initialized Softmax model standing in for pretrained weights.
    pub fn random(config: ModelConfig, qkv_bias: bool, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let mut rng = derived(seed, u64::MAX);
        let blocks = (0..config.depth)
            .map(|i| {
                AttentionBlockParams::random(d, config.heads, config.mlp_ratio, qkv_bias, &mut derived(seed, i as u64))
                    .map(Block::Softmax)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            patch_w: Tensor::randn(&[config.patch_dim(), d], WEIGHT_INIT_STD, &mut rng),
            patch_b: Tensor::zeros(&[1, d]),
            pos_embed: Tensor::randn(&[config.tokens(), d], WEIGHT_INIT_STD, &mut rng),
            blocks,
            norm_scale: Tensor::ones(&[1, d]),
            norm_shift: Tensor::zeros(&[1, d]),
            head_w: Tensor::randn(&[d, config.num_classes], WEIGHT_INIT_STD, &mut rng),
            head_b: Tensor::zeros(&[1, config.num_classes]),
        })
    }

    /// Converts every Softmax block; already converted blocks are rejected.
    pub fn convert(&self, spec: &ConvertSpec, seed: u64) -> Result<Self> {
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| match b {
                Block::Softmax(p) => convert_block(p, spec, seed.wrapping_add(i as u64)).map(Block::Converted),
                Block::Converted(_) => Err(config_err(format!("block {i} is already converted"))),
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks,
            ..self.clone()
        })
    }

    /// Every tensor with its fully qualified name and group, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor, ParamGroup)> {
        let inh = ParamGroup::Inherited;
        let mut out = vec![
            ("patch_embed.w".to_string(), &self.patch_w, inh),
            ("patch_embed.b".to_string(), &self.patch_b, inh),
            ("pos_embed".to_string(), &self.pos_embed, inh),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.named().into_iter().map(|(n, t, g)| (format!("blocks.{i}.{n}"), t, g)));
        }
        out.push(("norm.scale".to_string(), &self.norm_scale, inh));
        out.push(("norm.shift".to_string(), &self.norm_shift, inh));
        out.push(("head.w".to_string(), &self.head_w, inh));
        out.push(("head.b".to_string(), &self.head_b, inh));
        out
    }

    pub fn param_count(&self) -> ParamBreakdown {
        let mut b = ParamBreakdown {
            total: 0,
            inherited: 0,
            new: 0,
        };
        for (_, t, g) in self.named() {
            b.total += t.len();
            match g {
                ParamGroup::Inherited => b.inherited += t.len(),
                ParamGroup::New => b.new += t.len(),
            }
        }
        b
    }

    /// `(inherited, new)` per block.
    pub fn block_breakdown(&self) -> Vec<(usize, usize)> {
        self.blocks
            .iter()
            .map(|b| match b {
                Block::Softmax(p) => (p.param_count(), 0),
                Block::Converted(c) => (c.inherited.param_count(), c.new_param_count()),
            })
            .collect()
    }

    /// Every tensor converted to `dtype` (values rounded when narrowing).
    pub fn to_dtype(&self, dtype: crate::DType) -> Self {
        let mut m = self.clone();
        m.for_each_tensor_mut(|t| *t = t.to_dtype(dtype));
        m
    }

    fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&mut Tensor)) {
        for t in [
            &mut self.patch_w,
            &mut self.patch_b,
            &mut self.pos_embed,
            &mut self.norm_scale,
            &mut self.norm_shift,
            &mut self.head_w,
            &mut self.head_b,
        ] {
            f(t);
        }
        for b in &mut self.blocks {
            let (p, new) = match b {
                Block::Softmax(p) => (p, None),
                Block::Converted(c) => (&mut c.inherited, Some(&mut c.new)),
            };
            for t in [
                &mut p.w_q,
                &mut p.w_k,
                &mut p.w_v,
                &mut p.w_o,
                &mut p.b_o,
                &mut p.norm1_scale,
                &mut p.norm1_shift,
                &mut p.norm2_scale,
                &mut p.norm2_shift,
                &mut p.mlp_in,
                &mut p.mlp_in_bias,
                &mut p.mlp_out,
                &mut p.mlp_out_bias,
            ] {
                f(t);
            }
            for t in [&mut p.b_q, &mut p.b_k, &mut p.b_v].into_iter().flatten() {
                f(t);
            }
            if let Some(new) = new {
                new.values_mut().for_each(&mut f);
            }
        }
    }
}

/// Learning rates: inherited tensors train at `base_lr`, new ones at
/// `base_lr · multiplier`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LrGroups {
    pub per_group: BTreeMap<ParamGroup, f64>,
    pub per_tensor: Vec<(String, ParamGroup, f64)>,
}

pub fn lr_groups(model: &VitModel, base_lr: f64, multiplier: f64) -> Result<LrGroups> {
    if !(multiplier > 0.0 && multiplier.is_finite()) {
        return Err(config_err(format!("lr multiplier {multiplier} must be > 0")));
    }
    if !(base_lr >= 0.0 && base_lr.is_finite()) {
        return Err(config_err(format!("base lr {base_lr} must be ≥ 0")));
    }
    let lr = |g| match g {
        ParamGroup::Inherited => base_lr,
        ParamGroup::New => base_lr * multiplier,
    };
    Ok(LrGroups {
        per_group: [ParamGroup::Inherited, ParamGroup::New].into_iter().map(|g| (g, lr(g))).collect(),
        per_tensor: model.named().into_iter().map(|(n, _, g)| (n, g, lr(g))).collect(),
    })
}

impl std::str::FromStr for ConvertSpec {
    type Err = Error;

    /// `linear`, `linear_projqk`, or an inner variant name for TTT.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::linear(false)),
            "linear_projqk" | "projqk" => Ok(Self::linear(true)),
            "t5" => Ok(Self::t5()),
            other => Ok(Self::ttt(other.parse()?)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn small_block(seed: u64) -> AttentionBlockParams {
        AttentionBlockParams::random(8, 2, 4, true, &mut seeded(seed)).unwrap()
    }

    #[test]
    fn conversion_copies_inherited_tensors() {
        let src = small_block(1);
        for spec in [
            ConvertSpec::ttt(InnerVariant::TwoLayerMlp),
            ConvertSpec::t5(),
            ConvertSpec::linear(true),
        ] {
            let c = convert_block(&src, &spec, 7).unwrap();
            assert_eq!(c.inherited, src);
            for ((_, a), (_, b)) in c.inherited.named().iter().zip(src.named()) {
                assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }

    #[test]
    fn new_tensors_are_initialized_as_documented() {
        let src = small_block(2);
        let c = convert_block(&src, &ConvertSpec::t5(), 3).unwrap();
        assert_eq!(c.new["dwc_q"].max_abs(), 0.0);
        assert_eq!(c.new["dwc_k"].shape(), &[3, 3, 8]);
        let w = &c.new["inner.h1.w_gate"];
        assert_eq!(w.shape(), &[4, 4]);
        let std = (w.data().iter().map(|x| x * x).sum::<f64>() / w.len() as f64).sqrt();
        assert!(std > 0.0 && std < 0.06);
        let p = convert_block(&src, &ConvertSpec::linear(true), 3).unwrap();
        assert_eq!(p.new["proj_qk.h0.k"], Tensor::eye(4));
        // Same seed, same draw.
        assert_eq!(convert_block(&src, &ConvertSpec::t5(), 3).unwrap(), c);
        assert_eq!(c.inner_models().unwrap().len(), 2);
    }

    #[test]
    fn head_divisibility_is_checked() {
        let mut src = small_block(3);
        src.heads = 3;
        assert!(matches!(
            convert_block(&src, &ConvertSpec::ttt(InnerVariant::Linear), 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn every_tensor_has_one_group() {
        let c = convert_block(&small_block(4), &ConvertSpec::t5(), 0).unwrap();
        let groups = c.param_groups();
        assert_eq!(groups.len(), c.named().len());
        let new: usize = c.named().iter().filter(|(_, _, g)| *g == ParamGroup::New).map(|(_, t, _)| t.len()).sum();
        assert_eq!(new, c.new_param_count());
    }

    #[test]
    fn lr_group_cases() {
        let cfg = ModelConfig {
            depth: 2,
            model_dim: 8,
            heads: 2,
            patch: 4,
            image_size: 16,
            in_chans: 3,
            num_classes: 5,
            mlp_ratio: 4,
            pooling: Pooling::Gap,
        };
        let m = VitModel::random(cfg, true, 1).unwrap().convert(&ConvertSpec::t5(), 2).unwrap();
        let g = lr_groups(&m, 2e-5, 20.0).unwrap();
        assert!((g.per_group[&ParamGroup::New] - 4e-4).abs() < 1e-18);
        assert_eq!(g.per_group[&ParamGroup::Inherited], 2e-5);
        let u = lr_groups(&m, 1e-4, 1.0).unwrap();
        assert!(u.per_tensor.iter().all(|(_, _, lr)| *lr == 1e-4));
        assert!(lr_groups(&m, 1e-4, 0.0).is_err());
    }

    #[test]
    fn spec_parsing_and_labels() {
        assert_eq!("swiglu".parse::<ConvertSpec>().unwrap().label(), "ttt_swiglu");
        assert_eq!("t5".parse::<ConvertSpec>().unwrap().label(), "ttt_swiglu+dwc_qk");
        assert_eq!("linear_projqk".parse::<ConvertSpec>().unwrap().label(), "linear_projqk");
        assert!("mamba".parse::<ConvertSpec>().is_err());
    }
}
