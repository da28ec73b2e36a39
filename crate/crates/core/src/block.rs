//! Pre-norm transformer block forward passes on the tape.
//!
//! `x → x + W_o·mix(LN₁(x)) → x + MLP(LN₂(x))`, with the mixer either Softmax
//! attention or the converted mixer described by a [`ConvertSpec`]. Block
//! tensors are looked up by name in a [`ParamVars`], so the same code runs
//! with any subset of them marked trainable.

use std::collections::BTreeMap;

use crate::activation::ActivationKind;
use crate::align::NORM_EPS;
use crate::attention::{linear_attention_tape, neighborhood_attention_tape, softmax_attention_tape};
use crate::conv::Grid;
use crate::convert::{Block, ConvertSpec, MixerSpec, ParamGroup};
use crate::error::{dim_err, Result};
use crate::locality::{residual_dwconv_tape, LocalityMode};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::ttt::InnerVars;

/// LayerNorm ε of the outer blocks.
pub const LN_EPS: f64 = 1e-6;

/// Named block tensors recorded on one tape.
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    /// Records every tensor; those whose group passes `trainable` become leaves.
    pub fn new<'a>(
        tape: &Tape,
        named: impl IntoIterator<Item = (String, &'a Tensor, ParamGroup)>,
        trainable: impl Fn(ParamGroup) -> bool,
    ) -> Self {
        let vars = named
            .into_iter()
            .map(|(n, t, g)| {
                let v = if trainable(g) {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (n, v)
            })
            .collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| dim_err(format!("block has no tensor {name:?}")))
    }

    pub fn opt(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    /// Leaves, in name order.
    pub fn trainable(&self) -> Vec<(&str, &Var)> {
        self.vars
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .map(|(n, v)| (n.as_str(), v))
            .collect()
    }
}

fn add_bias(x: &Var, b: &Var) -> Result<Var> {
    x.add(&b.repeat_rows(x.value().rows())?)
}

fn affine(x: &Var, w: &Var, b: Option<&Var>) -> Result<Var> {
    let y = x.matmul(w)?;
    match b {
        Some(b) => add_bias(&y, b),
        None => Ok(y),
    }
}

/// Per-token LayerNorm with a learned scale and shift.
pub fn layer_norm_tape(x: &Var, scale: &Var, shift: &Var) -> Result<Var> {
    let (n, d) = x.value().dims2()?;
    let mean = x.row_sum()?.scale(1.0 / d as f64).repeat_cols(d)?;
    let centered = x.sub(&mean)?;
    let std = centered
        .square()?
        .row_sum()?
        .scale(1.0 / d as f64)
        .add_scalar(LN_EPS)
        .sqrt()
        .repeat_cols(d)?;
    let normed = centered.div(&std)?;
    normed.mul(&scale.repeat_rows(n)?)?.add(&shift.repeat_rows(n)?)
}

fn mix_head(spec: Option<&ConvertSpec>, vars: &ParamVars, head: usize, q: &Var, k: &Var, v: &Var, grid: Grid) -> Result<Var> {
    let Some(spec) = spec else {
        return softmax_attention_tape(q, k, v);
    };
    let out = match spec.mixer {
        MixerSpec::Linear {
            kernel,
            proj_qk,
            key_norm,
        } => {
            let kn = key_norm.apply_tape(k, NORM_EPS)?;
            if proj_qk {
                let pq = vars.get(&format!("proj_qk.h{head}.q"))?;
                let pk = vars.get(&format!("proj_qk.h{head}.k"))?;
                linear_attention_tape(q, &kn, v, kernel, Some((pq, pk)))?
            } else {
                linear_attention_tape(q, &kn, v, kernel, None)?
            }
        }
        MixerSpec::Ttt {
            variant,
            activation,
            ttt,
            key_norm,
        } => {
            let weights = variant
                .weight_names()
                .iter()
                .map(|n| vars.get(&format!("inner.h{head}.{n}")).cloned())
                .collect::<Result<_>>()?;
            let inner = InnerVars {
                variant,
                activation,
                weights,
            };
            inner.ttt_forward(q, &key_norm.apply_tape(k, NORM_EPS)?, v, &ttt)?
        }
    };
    match spec.locality.blend_nat {
        Some(w) => Ok(out.add(&neighborhood_attention_tape(q, k, v, grid, w)?)?.scale(0.5)),
        None => Ok(out),
    }
}

/// One block applied to the `N×D` token matrix `x`.
pub fn block_forward_tape(spec: Option<&ConvertSpec>, heads: usize, vars: &ParamVars, x: &Var, grid: Grid) -> Result<Var> {
    let (_, dim) = x.value().dims2()?;
    if heads == 0 || dim % heads != 0 {
        return Err(dim_err(format!("width {dim} is not divisible by {heads} heads")));
    }
    let dh = dim / heads;
    let mode = spec.map_or(LocalityMode::None, |s| s.locality.mode);
    let x = match mode {
        LocalityMode::CpeX => residual_dwconv_tape(x, vars.get("cpe")?, grid)?,
        _ => x.clone(),
    };
    let h = layer_norm_tape(&x, vars.get("norm1.scale")?, vars.get("norm1.shift")?)?;
    let mut q = affine(&h, vars.get("w_q")?, vars.opt("b_q"))?;
    let mut k = affine(&h, vars.get("w_k")?, vars.opt("b_k"))?;
    let mut v = affine(&h, vars.get("w_v")?, vars.opt("b_v"))?;
    match mode {
        LocalityMode::DwcQk => {
            q = residual_dwconv_tape(&q, vars.get("dwc_q")?, grid)?;
            k = residual_dwconv_tape(&k, vars.get("dwc_k")?, grid)?;
        }
        LocalityMode::DwcV => v = residual_dwconv_tape(&v, vars.get("dwc_v")?, grid)?,
        _ => {}
    }
    let outs = (0..heads)
        .map(|i| {
            let s = i * dh;
            mix_head(
                spec,
                vars,
                i,
                &q.slice_cols(s, dh)?,
                &k.slice_cols(s, dh)?,
                &v.slice_cols(s, dh)?,
                grid,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mixed = if heads == 1 {
        outs.into_iter().next().expect("one head")
    } else {
        Var::concat_cols(&outs)?
    };
    let x = x.add(&affine(&mixed, vars.get("w_o")?, Some(vars.get("b_o")?))?)?;
    let h = layer_norm_tape(&x, vars.get("norm2.scale")?, vars.get("norm2.shift")?)?;
    let m = affine(&h, vars.get("mlp.w_in")?, Some(vars.get("mlp.b_in")?))?.activation(ActivationKind::Gelu);
    let m = affine(&m, vars.get("mlp.w_out")?, Some(vars.get("mlp.b_out")?))?;
    x.add(&m)
}

pub fn block_forward(block: &Block, x: &Tensor, grid: Grid) -> Result<Tensor> {
    let tape = Tape::new();
    let vars = ParamVars::new(&tape, block.named(), |_| false);
    let out = block_forward_tape(block.spec(), block.attention().heads, &vars, &tape.constant(x.clone()), grid)?;
    Ok((*out.value()).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{softmax_attention, AttentionInputs};
    use crate::convert::{convert_block, AttentionBlockParams};
    use crate::fd::finite_diff_grad;
    use crate::locality::LocalityConfig;
    use crate::rng::seeded;
    use crate::ttt::InnerVariant;

    fn source(seed: u64) -> AttentionBlockParams {
        let mut rng = seeded(seed);
        let mut p = AttentionBlockParams::random(8, 2, 2, true, &mut rng).unwrap();
        p.w_q = Tensor::randn(&[8, 8], 0.4, &mut rng);
        p.w_k = Tensor::randn(&[8, 8], 0.4, &mut rng);
        p.b_k = Some(Tensor::randn(&[1, 8], 0.5, &mut rng));
        p.norm1_scale = Tensor::randn(&[1, 8], 0.2, &mut rng).map(|x| x + 1.0);
        p
    }

    fn layer_norm(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Tensor {
        let (n, d) = x.dims2().unwrap();
        let mut out = Tensor::zeros(&[n, d]);
        for i in 0..n {
            let r = x.row(i);
            let mean = r.iter().sum::<f64>() / d as f64;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            for c in 0..d {
                let y = (r[c] - mean) / (var + LN_EPS).sqrt();
                out.set(i, c, y * scale.data()[c] + shift.data()[c]);
            }
        }
        out
    }

    #[test]
    fn softmax_block_matches_reference() {
        let p = source(1);
        let mut rng = seeded(2);
        let x = Tensor::randn(&[6, 8], 1.0, &mut rng);
        let out = block_forward(&Block::Softmax(p.clone()), &x, (2, 3)).unwrap();

        let lin = |a: &Tensor, w: &Tensor, b: &Tensor| a.matmul(w).unwrap().add_row(b).unwrap();
        let h = layer_norm(&x, &p.norm1_scale, &p.norm1_shift);
        let q = lin(&h, &p.w_q, p.b_q.as_ref().unwrap());
        let k = lin(&h, &p.w_k, p.b_k.as_ref().unwrap());
        let v = lin(&h, &p.w_v, p.b_v.as_ref().unwrap());
        let heads: Vec<Tensor> = (0..2)
            .map(|i| {
                let inputs = AttentionInputs::new(
                    q.slice_cols(4 * i, 4).unwrap(),
                    k.slice_cols(4 * i, 4).unwrap(),
                    v.slice_cols(4 * i, 4).unwrap(),
                    (2, 3),
                )
                .unwrap();
                softmax_attention(&inputs).unwrap()
            })
            .collect();
        let x1 = x.add(&lin(&Tensor::concat_cols(&heads).unwrap(), &p.w_o, &p.b_o)).unwrap();
        let h2 = layer_norm(&x1, &p.norm2_scale, &p.norm2_shift);
        let m = lin(&h2, &p.mlp_in, &p.mlp_in_bias).map(|z| ActivationKind::Gelu.eval(z));
        let expected = x1.add(&lin(&m, &p.mlp_out, &p.mlp_out_bias)).unwrap();
        assert!(out.max_abs_diff(&expected).unwrap() < 1e-12);
    }

    #[test]
    fn zero_kernels_do_not_change_the_block() {
        let p = source(3);
        let mut rng = seeded(4);
        let x = Tensor::randn(&[9, 8], 1.0, &mut rng);
        let plain = convert_block(&p, &ConvertSpec::ttt(InnerVariant::SwiGlu), 5).unwrap();
        let base = block_forward(&Block::Converted(plain.clone()), &x, (3, 3)).unwrap();
        for mode in [LocalityMode::CpeX, LocalityMode::DwcV, LocalityMode::DwcQk] {
            let spec = ConvertSpec::ttt(InnerVariant::SwiGlu).with_locality(LocalityConfig::new(mode));
            let c = convert_block(&p, &spec, 5).unwrap();
            let out = block_forward(&Block::Converted(c), &x, (3, 3)).unwrap();
            assert_eq!(out, base, "{mode:?}");
        }
    }

    #[test]
    fn instance_norm_absorbs_key_bias() {
        let p = source(6);
        let mut shifted = p.clone();
        shifted.b_k = Some(Tensor::full(&[1, 8], 40.0));
        let mut rng = seeded(7);
        let x = Tensor::randn(&[9, 8], 1.0, &mut rng);
        let spec = ConvertSpec::ttt(InnerVariant::TwoLayerMlp);
        let a = block_forward(&Block::Converted(convert_block(&p, &spec, 1).unwrap()), &x, (3, 3)).unwrap();
        let b = block_forward(&Block::Converted(convert_block(&shifted, &spec, 1).unwrap()), &x, (3, 3)).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-10);
    }

    #[test]
    fn outer_gradient_through_the_inner_update() {
        let p = source(8);
        let spec = ConvertSpec::ttt(InnerVariant::TwoLayerMlp).with_locality(LocalityConfig::new(LocalityMode::DwcQk));
        let mut c = convert_block(&p, &spec, 2).unwrap();
        let mut rng = seeded(9);
        c.new.insert("dwc_k".into(), Tensor::randn(&[3, 3, 8], 0.2, &mut rng));
        let x = Tensor::randn(&[6, 8], 1.0, &mut rng);
        let target = Tensor::randn(&[6, 8], 1.0, &mut rng);
        for name in ["inner.h1.w1", "dwc_k", "w_k"] {
            let loss_at = |t: &Tensor| -> (Tape, Var, Var) {
                let mut probe = c.clone();
                match probe.new.get_mut(name) {
                    Some(slot) => *slot = t.clone(),
                    None => probe.inherited.w_k = t.clone(),
                }
                let tape = Tape::new();
                let vars = ParamVars::new(&tape, Block::Converted(probe.clone()).named(), |_| true);
                let out = block_forward_tape(Some(&spec), 2, &vars, &tape.constant(x.clone()), (2, 3)).unwrap();
                let loss = out.sub(&tape.constant(target.clone())).unwrap().square().unwrap().mean().unwrap();
                let leaf = vars.get(name).unwrap().clone();
                (tape, leaf, loss)
            };
            let start = c.new.get(name).cloned().unwrap_or_else(|| c.inherited.w_k.clone());
            let (tape, leaf, loss) = loss_at(&start);
            let g = tape.grad_values(&loss, &[leaf], None).unwrap().remove(0);
            let fd = finite_diff_grad(|t| loss_at(t).2.value().data()[0], &start, 1e-4).unwrap();
            let err = g.rel_err(&fd, 1e-8).unwrap();
            assert!(err < 1e-5, "{name}: {err}");
        }
    }
}
