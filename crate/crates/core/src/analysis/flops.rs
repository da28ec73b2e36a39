//! Closed-form FLOPs and parameter counts. One multiply-accumulate counts as
//! one FLOP; elementwise work (activations, softmax exponentials, norms) is
//! not counted except for the linear-attention normalizer.

use serde::Serialize;

use crate::convert::{ConvertSpec, ModelConfig, ParamBreakdown};
use crate::error::{config_err, Error, Result};
use crate::locality::{LocalityConfig, LocalityMode};
use crate::ttt::{InnerLoss, InnerVariant, TttConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MixerArch {
    Softmax,
    Linear,
    LinearProjQk,
    Ttt(InnerVariant),
}

/// An attention-block architecture as priced by the cost model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Arch {
    pub mixer: MixerArch,
    pub locality: LocalityMode,
    pub kernel_size: usize,
    pub nat: Option<usize>,
    pub inner_loss: InnerLoss,
    pub inner_steps: usize,
}

impl Arch {
    pub fn new(mixer: MixerArch) -> Self {
        Self {
            mixer,
            locality: LocalityMode::None,
            kernel_size: 3,
            nat: None,
            inner_loss: InnerLoss::InnerProduct,
            inner_steps: 1,
        }
    }

    pub fn softmax() -> Self {
        Self::new(MixerArch::Softmax)
    }

    pub fn ttt(variant: InnerVariant) -> Self {
        Self::new(MixerArch::Ttt(variant))
    }

    pub fn with_locality(mut self, mode: LocalityMode) -> Self {
        self.locality = mode;
        self
    }

    pub fn with_nat(mut self, window: usize) -> Self {
        self.nat = Some(window);
        self
    }

    pub fn label(&self) -> String {
        let mut s = match self.mixer {
            MixerArch::Softmax => "softmax".to_string(),
            MixerArch::Linear => "linear".to_string(),
            MixerArch::LinearProjQk => "linear_projqk".to_string(),
            MixerArch::Ttt(v) => format!("ttt_{}", v.label()),
        };
        if self.locality != LocalityMode::None {
            s.push('+');
            s.push_str(self.locality.label());
        }
        if let Some(w) = self.nat {
            s.push_str(&format!("+nat{w}"));
        }
        if self.inner_loss == InnerLoss::L2 {
            s.push_str("+l2");
        }
        s
    }

    /// The conversion producing this architecture; `None` for Softmax.
    pub fn convert_spec(&self) -> Option<ConvertSpec> {
        let mut locality = LocalityConfig::new(self.locality);
        locality.kernel_size = self.kernel_size;
        locality.blend_nat = self.nat;
        let spec = match self.mixer {
            MixerArch::Softmax => return None,
            MixerArch::Linear => ConvertSpec::linear(false),
            MixerArch::LinearProjQk => ConvertSpec::linear(true),
            MixerArch::Ttt(v) => ConvertSpec::ttt(v).with_ttt_config(TttConfig {
                inner_loss: self.inner_loss,
                inner_steps: self.inner_steps,
                ..TttConfig::default()
            }),
        };
        Some(spec.with_locality(locality))
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    /// `softmax`, `linear`, `linear_projqk`, `ttt` (two-layer), `ttt_<variant>`
    /// or `t5`, followed by any of `+dwc`, `+dwc_qk`, `+cpe`, `+dwc_v`,
    /// `+nat<w>`, `+l2`.
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split('+');
        let base = parts.next().unwrap_or_default();
        let mut arch = match base {
            "softmax" => Self::softmax(),
            "linear" => Self::new(MixerArch::Linear),
            "linear_projqk" | "projqk" => Self::new(MixerArch::LinearProjQk),
            "ttt" => Self::ttt(InnerVariant::TwoLayerMlp),
            "t5" => Self::ttt(InnerVariant::SwiGlu).with_locality(LocalityMode::DwcQk),
            other => match other.strip_prefix("ttt_") {
                Some(v) => Self::ttt(v.parse()?),
                None => Self::ttt(other.parse().map_err(|_| config_err(format!("unknown architecture {s:?}")))?),
            },
        };
        for m in parts {
            match m {
                "dwc" | "dwc_qk" => arch.locality = LocalityMode::DwcQk,
                "cpe" | "cpe_x" => arch.locality = LocalityMode::CpeX,
                "dwc_v" => arch.locality = LocalityMode::DwcV,
                "l2" => arch.inner_loss = InnerLoss::L2,
                other => match other.strip_prefix("nat").and_then(|w| w.parse::<usize>().ok()) {
                    Some(w) if w % 2 == 1 => arch.nat = Some(w),
                    _ => return Err(config_err(format!("unknown architecture modifier {other:?} in {s:?}"))),
                },
            }
        }
        if arch.mixer == MixerArch::Softmax && (arch.locality != LocalityMode::None || arch.nat.is_some()) {
            return Err(config_err("softmax takes no modifiers"));
        }
        Ok(arch)
    }
}

/// Inner-model matmul counts per head in units of `N·d_h²`:
/// (forward on keys, backward, query pass, final forward layer).
fn inner_units(v: InnerVariant) -> (u64, u64, u64, u64) {
    match v {
        InnerVariant::Linear => (0, 1, 1, 1),
        InnerVariant::OneLayerGate => (2, 2, 2, 0),
        InnerVariant::TwoLayerMlp => (1, 3, 2, 1),
        InnerVariant::ThreeLayerMlp => (2, 5, 3, 1),
        InnerVariant::SwiGlu => (2, 4, 3, 1),
    }
}

/// Per-block FLOPs split by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
pub struct BlockFlops {
    pub projections: u64,
    pub mlp: u64,
    pub mixer: u64,
    pub locality: u64,
    pub nat: u64,
}

impl BlockFlops {
    pub fn total(&self) -> u64 {
        self.projections + self.mlp + self.mixer + self.locality + self.nat
    }
}

/// Token-mixing cost of one block (excludes projections and MLP).
pub fn mixer_flops(cfg: &ModelConfig, arch: &Arch) -> u64 {
    let n = cfg.tokens() as u64;
    let d = cfg.model_dim as u64;
    let dh = cfg.head_dim() as u64;
    match arch.mixer {
        MixerArch::Softmax => 2 * n * n * d,
        MixerArch::Linear => 2 * n * d * dh + 2 * n * d,
        MixerArch::LinearProjQk => 4 * n * d * dh + 2 * n * d,
        MixerArch::Ttt(v) => {
            let (fwd, bwd, query, last) = inner_units(v);
            let fwd = match arch.inner_loss {
                InnerLoss::L2 => fwd + last,
                InnerLoss::InnerProduct => fwd,
            };
            (arch.inner_steps as u64 * (fwd + bwd) + query) * n * d * dh
        }
    }
}

pub fn block_flops(cfg: &ModelConfig, arch: &Arch) -> BlockFlops {
    let n = cfg.tokens() as u64;
    let d = cfg.model_dim as u64;
    let k2 = (arch.kernel_size * arch.kernel_size) as u64;
    BlockFlops {
        projections: 4 * n * d * d,
        mlp: 2 * cfg.mlp_ratio as u64 * n * d * d,
        mixer: mixer_flops(cfg, arch),
        locality: arch.locality.kernel_count() as u64 * k2 * n * d,
        nat: arch.nat.map_or(0, |w| 2 * (w * w) as u64 * n * d),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FlopsBreakdown {
    pub patch_embed: u64,
    pub blocks: u64,
    pub head: u64,
    pub total: u64,
}

pub fn flops_breakdown(cfg: &ModelConfig, arch: &Arch) -> Result<FlopsBreakdown> {
    cfg.validate()?;
    if let Some(w) = arch.nat {
        if w % 2 == 0 {
            return Err(config_err(format!("NAT window {w} must be odd")));
        }
    }
    let n = cfg.tokens() as u64;
    let d = cfg.model_dim as u64;
    let patch_embed = n * cfg.patch_dim() as u64 * d;
    let blocks = cfg.depth as u64 * block_flops(cfg, arch).total();
    let head = d * cfg.num_classes as u64;
    Ok(FlopsBreakdown {
        patch_embed,
        blocks,
        head,
        total: patch_embed + blocks + head,
    })
}

/// Parameter counts from shapes alone, with biases on Q/K/V.
pub fn param_count(cfg: &ModelConfig, arch: &Arch) -> Result<ParamBreakdown> {
    cfg.validate()?;
    let d = cfg.model_dim;
    let hidden = d * cfg.mlp_ratio;
    let block = 4 * d * d + 4 * d + 4 * d + 2 * d * hidden + hidden + d;
    let inherited = cfg.patch_dim() * d + d + cfg.tokens() * d + cfg.depth * block + 2 * d + d * cfg.num_classes + cfg.num_classes;
    let new = match arch.convert_spec() {
        None => 0,
        Some(spec) => {
            let per_block: usize = spec
                .new_tensor_shapes(d, cfg.heads)?
                .iter()
                .map(|(_, s)| s.iter().product::<usize>())
                .sum();
            cfg.depth * per_block
        }
    };
    Ok(ParamBreakdown {
        total: inherited + new,
        inherited,
        new,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub arch: String,
    pub resolution: usize,
    pub tokens: usize,
    pub flops: u64,
    pub params: usize,
    pub wall_samples: Vec<(usize, f64)>,
    pub fitted_exponent: Option<f64>,
}

pub fn flops_model(cfg: &ModelConfig, arch: &Arch) -> Result<CostReport> {
    Ok(CostReport {
        arch: arch.label(),
        resolution: cfg.image_size,
        tokens: cfg.tokens(),
        flops: flops_breakdown(cfg, arch)?.total,
        params: param_count(cfg, arch)?.total,
        wall_samples: Vec::new(),
        fitted_exponent: None,
    })
}

/// `arch,resolution,N,flops,params` rows.
pub fn cost_curve_csv(reports: &[CostReport]) -> String {
    let mut out = String::from("arch,resolution,N,flops,params\n");
    for r in reports {
        out.push_str(&format!("{},{},{},{},{}\n", r.arch, r.resolution, r.tokens, r.flops, r.params));
    }
    out
}
