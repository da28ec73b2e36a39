//! Teacher-fit experiment: a converted block trained by gradient descent to
//! reproduce the outputs of the Softmax block it was converted from.

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::block::{block_forward, block_forward_tape, layer_norm_tape, ParamVars};
use crate::conv::Grid;
use crate::convert::{convert_block, AttentionBlockParams, Block, ConvertSpec, MixerSpec, ParamGroup};
use crate::error::{config_err, Error, Result};
use crate::rng::derived;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::ttt::TttConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Only newly initialized tensors are trained.
    Freeze,
    /// Every tensor is trained.
    Ft,
}

impl Protocol {
    pub fn label(self) -> &'static str {
        match self {
            Self::Freeze => "freeze",
            Self::Ft => "ft",
        }
    }

    fn trains(self, group: ParamGroup) -> bool {
        match self {
            Self::Freeze => group == ParamGroup::New,
            Self::Ft => true,
        }
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "freeze" => Ok(Self::Freeze),
            "ft" => Ok(Self::Ft),
            other => Err(config_err(format!("unknown protocol {other:?}"))),
        }
    }
}

/// The student: an unchanged copy of the teacher or a converted block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StudentArch {
    Softmax,
    Converted(ConvertSpec),
}

impl StudentArch {
    pub fn label(&self) -> String {
        match self {
            Self::Softmax => "softmax".into(),
            Self::Converted(s) => s.label(),
        }
    }
}

impl FromStr for StudentArch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Self::Softmax),
            other => other.parse().map(Self::Converted),
        }
    }
}

/// A single Softmax block with sharp attention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TeacherConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub grid_side: usize,
    pub mlp_ratio: usize,
    /// Standard deviation of the attention logits on unit-variance tokens.
    pub logit_std: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            model_dim: 32,
            heads: 2,
            grid_side: 8,
            mlp_ratio: 4,
            logit_std: 3.0,
        }
    }
}

impl TeacherConfig {
    pub fn grid(&self) -> Grid {
        (self.grid_side, self.grid_side)
    }

    pub fn tokens(&self) -> usize {
        self.grid_side * self.grid_side
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(config_err(format!(
                "teacher width {} must be a positive multiple of {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.grid_side == 0 || self.mlp_ratio == 0 || !(self.logit_std > 0.0) {
            return Err(config_err("teacher grid, MLP ratio and logit scale must be positive"));
        }
        Ok(())
    }
}

/// Random teacher. Q/K weights are scaled so logits have `logit_std`
/// spread; V/O weights preserve the token scale.
pub fn make_teacher(cfg: &TeacherConfig, rng: &mut impl Rng) -> Result<AttentionBlockParams> {
    cfg.validate()?;
    let d = cfg.model_dim;
    let mut p = AttentionBlockParams::random(d, cfg.heads, cfg.mlp_ratio, true, rng)?;
    let qk_std = (cfg.logit_std / d as f64).sqrt();
    let vo_std = 1.0 / (d as f64).sqrt();
    p.w_q = Tensor::randn(&[d, d], qk_std, rng);
    p.w_k = Tensor::randn(&[d, d], qk_std, rng);
    p.w_v = Tensor::randn(&[d, d], vo_std, rng);
    p.w_o = Tensor::randn(&[d, d], vo_std, rng);
    Ok(p)
}

/// Keys the teacher produces for token matrix `x`.
pub fn teacher_keys(teacher: &AttentionBlockParams, x: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let c = |t: &Tensor| tape.constant(t.clone());
    let h = layer_norm_tape(&c(x), &c(&teacher.norm1_scale), &c(&teacher.norm1_shift))?;
    let mut k = h.matmul(&c(&teacher.w_k))?;
    if let Some(b) = &teacher.b_k {
        k = k.add(&c(b).repeat_rows(x.rows())?)?;
    }
    let out = (*k.value()).clone();
    Ok(out)
}

/// Adds a constant offset to every key of every head. Each head's offset is
/// a random direction with norm `factor` times that head's mean key norm on
/// `probe`. Softmax outputs are unchanged; the returned teacher computes the
/// same function.
pub fn shift_keys(teacher: &AttentionBlockParams, probe: &Tensor, factor: f64, rng: &mut impl Rng) -> Result<AttentionBlockParams> {
    let k = teacher_keys(teacher, probe)?;
    let (n, d) = k.dims2()?;
    let dh = teacher.head_dim();
    let mut bias = teacher.b_k.clone().unwrap_or_else(|| Tensor::zeros(&[1, d]));
    for h in 0..teacher.heads {
        let kh = k.slice_cols(h * dh, dh)?;
        let mean_norm = (0..n).map(|r| kh.row(r).iter().map(|x| x * x).sum::<f64>().sqrt()).sum::<f64>() / n as f64;
        let dir: Vec<f64> = (0..dh).map(|_| StandardNormal.sample(rng)).collect();
        let len = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (c, u) in dir.iter().enumerate() {
            let old = bias.at(0, h * dh + c);
            bias.set(0, h * dh + c, old + factor * mean_norm * u / len);
        }
    }
    let mut out = teacher.clone();
    out.b_k = Some(bias);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitConfig {
    pub teacher: TeacherConfig,
    pub protocol: Protocol,
    pub steps: usize,
    pub lr: f64,
    pub lr_multiplier: f64,
    /// Sequences per gradient step.
    pub batch: usize,
    /// Held-out sequences for the final score.
    pub eval_batch: usize,
    /// When set, teacher keys get a constant offset of this many mean key norms.
    pub key_shift: Option<f64>,
    /// Divide a TTT student's inner step by N, so the summed inner loss acts
    /// as a per-token mean.
    pub inner_lr_per_token: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            teacher: TeacherConfig::default(),
            protocol: Protocol::Freeze,
            steps: 2000,
            lr: 0.05,
            lr_multiplier: 20.0,
            batch: 2,
            eval_batch: 8,
            key_shift: None,
            inner_lr_per_token: true,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        self.teacher.validate()?;
        if self.batch == 0 || self.eval_batch == 0 {
            return Err(config_err("batch sizes must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite() && self.lr_multiplier > 0.0 && self.lr_multiplier.is_finite()) {
            return Err(config_err("learning rate and multiplier must be positive and finite"));
        }
        if let Some(f) = self.key_shift {
            if !(f >= 0.0 && f.is_finite()) {
                return Err(config_err(format!("key shift {f} must be non-negative")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitResult {
    pub protocol: Protocol,
    pub arch: String,
    pub seed: u64,
    pub steps: usize,
    pub initial_mse: f64,
    /// Held-out MSE after training; infinite when the run diverged.
    pub teacher_output_mse: f64,
    pub diverged: bool,
}

const STREAM_TEACHER: u64 = 1;
const STREAM_SHIFT: u64 = 2;
const STREAM_STUDENT: u64 = 3;
const STREAM_TRAIN: u64 = 4;
const STREAM_EVAL: u64 = 5;

fn gaussian_tokens(n: usize, d: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::randn(&[n, d], 1.0, rng)
}

struct Student {
    spec: Option<ConvertSpec>,
    heads: usize,
    params: BTreeMap<String, (Tensor, ParamGroup)>,
}

impl Student {
    fn named(&self) -> impl Iterator<Item = (String, &Tensor, ParamGroup)> {
        self.params.iter().map(|(n, (t, g))| (n.clone(), t, *g))
    }

    fn forward(&self, x: &Tensor, grid: Grid) -> Result<Tensor> {
        let tape = Tape::new();
        let vars = ParamVars::new(&tape, self.named(), |_| false);
        let out = block_forward_tape(self.spec.as_ref(), self.heads, &vars, &tape.constant(x.clone()), grid)?;
        let out = (*out.value()).clone();
        Ok(out)
    }

    fn mse(&self, data: &[(Tensor, Tensor)], grid: Grid) -> Result<f64> {
        let mut total = 0.0;
        for (x, y) in data {
            let out = self.forward(x, grid)?;
            total += out.sub(y)?.map(|e| e * e).sum() / y.len() as f64;
        }
        Ok(total / data.len() as f64)
    }

    /// One gradient step; `Ok(false)` when the loss or a gradient is not finite.
    fn step(&mut self, batch: &[(Tensor, Tensor)], grid: Grid, cfg: &FitConfig) -> Result<bool> {
        let tape = Tape::new();
        let vars = ParamVars::new(&tape, self.named(), |g| cfg.protocol.trains(g));
        let trainable: Vec<(String, crate::tape::Var)> =
            vars.trainable().into_iter().map(|(n, v)| (n.to_string(), v.clone())).collect();
        if trainable.is_empty() {
            return Ok(true);
        }
        let mut loss = None;
        for (x, y) in batch {
            let out = block_forward_tape(self.spec.as_ref(), self.heads, &vars, &tape.constant(x.clone()), grid)?;
            let err = out.sub(&tape.constant(y.clone()))?.square()?.mean()?;
            loss = Some(match loss {
                None => err,
                Some(l) => err.add(&l)?,
            });
        }
        let loss = loss.expect("non-empty batch").scale(1.0 / batch.len() as f64);
        if !loss.value().all_finite() {
            return Ok(false);
        }
        let leaves: Vec<_> = trainable.iter().map(|(_, v)| v.clone()).collect();
        let grads = tape.grad_values(&loss, &leaves, None)?;
        if grads.iter().any(|g| !g.all_finite()) {
            return Ok(false);
        }
        for ((name, _), g) in trainable.iter().zip(grads) {
            let (t, group) = self.params.get_mut(name).expect("trainable names come from params");
            let lr = match group {
                ParamGroup::New => cfg.lr * cfg.lr_multiplier,
                ParamGroup::Inherited => cfg.lr,
            };
            *t = t.sub(&g.scale(lr))?;
        }
        Ok(true)
    }
}

fn teacher_data(teacher: &Block, cfg: &FitConfig, rng: &mut impl Rng, count: usize) -> Result<Vec<(Tensor, Tensor)>> {
    let (n, d) = (cfg.teacher.tokens(), cfg.teacher.model_dim);
    (0..count)
        .map(|_| {
            let x = gaussian_tokens(n, d, rng);
            let y = block_forward(teacher, &x, cfg.teacher.grid())?;
            Ok((x, y))
        })
        .collect()
}

/// Builds the teacher for `seed` (with its key shift, if configured).
pub fn seeded_teacher(cfg: &FitConfig, seed: u64) -> Result<AttentionBlockParams> {
    let teacher = make_teacher(&cfg.teacher, &mut derived(seed, STREAM_TEACHER))?;
    match cfg.key_shift {
        None => Ok(teacher),
        Some(f) => {
            let mut rng = derived(seed, STREAM_SHIFT);
            let probe = gaussian_tokens(cfg.teacher.tokens(), cfg.teacher.model_dim, &mut rng);
            shift_keys(&teacher, &probe, f, &mut rng)
        }
    }
}

/// Trains a student against the seed's teacher and scores it on held-out
/// inputs. Teacher, student init and data all derive from `seed`.
pub fn teacher_fit(arch: &StudentArch, cfg: &FitConfig, seed: u64) -> Result<FitResult> {
    cfg.validate()?;
    let teacher = seeded_teacher(cfg, seed)?;
    let student_block = match arch {
        StudentArch::Softmax => Block::Softmax(teacher.clone()),
        StudentArch::Converted(spec) => {
            let spec = match spec.mixer {
                MixerSpec::Ttt { ttt, .. } if cfg.inner_lr_per_token => spec.with_ttt_config(TttConfig {
                    inner_lr: ttt.inner_lr / cfg.teacher.tokens() as f64,
                    ..ttt
                }),
                _ => *spec,
            };
            Block::Converted(convert_block(&teacher, &spec, derived(seed, STREAM_STUDENT).random())?)
        }
    };
    let mut student = Student {
        spec: student_block.spec().copied(),
        heads: teacher.heads,
        params: student_block.named().into_iter().map(|(n, t, g)| (n, (t.clone(), g))).collect(),
    };
    let teacher = Block::Softmax(teacher);
    let grid = cfg.teacher.grid();
    let eval = teacher_data(&teacher, cfg, &mut derived(seed, STREAM_EVAL), cfg.eval_batch)?;
    let initial_mse = student.mse(&eval, grid)?;
    let mut train_rng = derived(seed, STREAM_TRAIN);
    let mut diverged = !initial_mse.is_finite();
    for _ in 0..cfg.steps {
        if diverged {
            break;
        }
        let batch = teacher_data(&teacher, cfg, &mut train_rng, cfg.batch)?;
        diverged = match student.step(&batch, grid, cfg) {
            Ok(ok) => !ok,
            Err(Error::Divergence { .. }) => true,
            Err(e) => return Err(e),
        };
    }
    let mse = if diverged {
        f64::INFINITY
    } else {
        match student.mse(&eval, grid) {
            Ok(m) if m.is_finite() => m,
            Ok(_) | Err(Error::Divergence { .. }) => {
                diverged = true;
                f64::INFINITY
            }
            Err(e) => return Err(e),
        }
    };
    Ok(FitResult {
        protocol: cfg.protocol,
        arch: arch.label(),
        seed,
        steps: cfg.steps,
        initial_mse,
        teacher_output_mse: mse,
        diverged,
    })
}

/// Runs several seeds in parallel; results come back in seed order.
pub fn teacher_fit_seeds(arch: &StudentArch, cfg: &FitConfig, seeds: &[u64]) -> Result<Vec<FitResult>> {
    seeds.par_iter().map(|&s| teacher_fit(arch, cfg, s)).collect()
}

/// `arch,protocol,seed,steps,mse,diverged` rows.
pub fn fit_csv(results: &[FitResult]) -> String {
    let mut out = String::from("arch,protocol,seed,steps,mse,diverged\n");
    for r in results {
        out.push_str(&format!(
            "{},{},{},{},{:e},{}\n",
            r.arch,
            r.protocol.label(),
            r.seed,
            r.steps,
            r.teacher_output_mse,
            r.diverged
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::KeyNorm;
    use crate::ttt::InnerVariant;

    fn quick(protocol: Protocol, steps: usize) -> FitConfig {
        FitConfig {
            teacher: TeacherConfig {
                model_dim: 8,
                heads: 2,
                grid_side: 3,
                ..TeacherConfig::default()
            },
            protocol,
            steps,
            batch: 1,
            eval_batch: 2,
            lr_multiplier: 2.0,
            ..FitConfig::default()
        }
    }

    #[test]
    fn self_distillation_is_exact() {
        let r = teacher_fit(&StudentArch::Softmax, &quick(Protocol::Ft, 3), 4).unwrap();
        assert!(r.teacher_output_mse < 1e-20 && !r.diverged);
    }

    #[test]
    fn key_shift_leaves_teacher_unchanged() {
        let cfg = FitConfig {
            key_shift: Some(5.0),
            ..quick(Protocol::Freeze, 0)
        };
        let plain = Block::Softmax(seeded_teacher(&quick(Protocol::Freeze, 0), 9).unwrap());
        let shifted = seeded_teacher(&cfg, 9).unwrap();
        let x = gaussian_tokens(9, 8, &mut derived(0, 0));
        let k0 = teacher_keys(plain.attention(), &x).unwrap();
        let k1 = teacher_keys(&shifted, &x).unwrap();
        assert!(k1.sub(&k0).unwrap().max_abs() > 1.0);
        let a = block_forward(&plain, &x, (3, 3)).unwrap();
        let b = block_forward(&Block::Softmax(shifted), &x, (3, 3)).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-10);
    }

    #[test]
    fn training_reduces_ttt_error() {
        let arch = StudentArch::Converted(ConvertSpec::ttt(InnerVariant::TwoLayerMlp));
        let r = teacher_fit(&arch, &quick(Protocol::Freeze, 30), 1).unwrap();
        assert!(!r.diverged);
        assert!(r.teacher_output_mse < r.initial_mse);
    }

    #[test]
    fn freeze_on_linear_has_nothing_to_train() {
        let arch = StudentArch::Converted(ConvertSpec::linear(false).with_key_norm(KeyNorm::Instance));
        let r = teacher_fit(&arch, &quick(Protocol::Freeze, 5), 2).unwrap();
        assert_eq!(r.teacher_output_mse, r.initial_mse);
    }

    #[test]
    fn seeds_are_merged_in_order_and_reproducible() {
        let arch = StudentArch::Converted(ConvertSpec::ttt(InnerVariant::Linear));
        let cfg = quick(Protocol::Freeze, 2);
        let a = teacher_fit_seeds(&arch, &cfg, &[3, 1, 2]).unwrap();
        let b = teacher_fit_seeds(&arch, &cfg, &[3, 1, 2]).unwrap();
        assert_eq!(a.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![3, 1, 2]);
        assert_eq!(fit_csv(&a), fit_csv(&b));
        assert!(fit_csv(&a).starts_with("arch,protocol,seed,steps,mse,diverged\n"));
    }

    #[test]
    fn parsing() {
        assert_eq!("softmax".parse::<StudentArch>().unwrap(), StudentArch::Softmax);
        assert!("ttt2".parse::<StudentArch>().is_ok());
        assert!("ft".parse::<Protocol>().is_ok());
        assert!("warm".parse::<Protocol>().is_err());
        assert!(FitConfig {
            lr: -1.0,
            ..FitConfig::default()
        }
        .validate()
        .is_err());
    }
}
