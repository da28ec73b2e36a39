//! Property suites with measured tolerances, shared by the CLI and tests.

use std::str::FromStr;

use rand::Rng;
use serde::Serialize;

use crate::activation::ActivationKind;
use crate::align::{instance_norm_keys, key_shift_ratio, normalize_inputs, shifted_gradient_expansion, KeyNorm, NORM_EPS};
use crate::attention::{dynamic_mlp_view, linear_attention, softmax_attention, softmax_weights, AttentionInputs};
use crate::conv::Grid;
use crate::error::{config_err, Error, Result};
use crate::fd::finite_diff_grad;
use crate::gradcheck::op_gradient_sweep;
use crate::locality::{implicit_attention, locality_index, MixerLayer};
use crate::rng::derived;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::ttt::{
    inner_loss, ttt_forward, two_layer_analytic_grads, InnerLoss, InnerModel, InnerVariant, TttConfig, INNER_INIT_STD,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    All,
    Shift,
    Degeneracy,
    Gradients,
    Implicit,
    Norm,
}

impl Suite {
    pub const EACH: [Suite; 5] = [Suite::Shift, Suite::Degeneracy, Suite::Gradients, Suite::Implicit, Suite::Norm];

    pub fn label(self) -> &'static str {
        match self {
            Self::All => "all",
            Self::Shift => "shift",
            Self::Degeneracy => "degeneracy",
            Self::Gradients => "gradients",
            Self::Implicit => "implicit",
            Self::Norm => "norm",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "shift" => Ok(Self::Shift),
            "degeneracy" => Ok(Self::Degeneracy),
            "gradients" => Ok(Self::Gradients),
            "implicit" => Ok(Self::Implicit),
            "norm" => Ok(Self::Norm),
            other => Err(config_err(format!("unknown suite {other:?}"))),
        }
    }
}

/// How `measured` is compared with `tolerance`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    Below,
    AtLeast,
    /// `|measured − target| ≤ tolerance·target`
    RelativeTo { target_milli: i64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropertyResult {
    pub suite: String,
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub tolerance: f64,
    pub check: Check,
    pub detail: String,
}

impl PropertyResult {
    fn below(suite: Suite, name: impl Into<String>, measured: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        Self {
            suite: suite.label().into(),
            name: name.into(),
            passed: measured < tolerance,
            measured,
            tolerance,
            check: Check::Below,
            detail: detail.into(),
        }
    }

    fn at_least(suite: Suite, name: impl Into<String>, measured: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        Self {
            suite: suite.label().into(),
            name: name.into(),
            passed: measured >= tolerance,
            measured,
            tolerance,
            check: Check::AtLeast,
            detail: detail.into(),
        }
    }

    /// One human-readable line.
    pub fn line(&self) -> String {
        let cmp = match self.check {
            Check::Below => format!("< {:e}", self.tolerance),
            Check::AtLeast => format!(">= {}", self.tolerance),
            Check::RelativeTo { target_milli } => {
                format!("within {}% of {}", self.tolerance * 100.0, target_milli as f64 / 1000.0)
            }
        };
        format!(
            "{} {}/{}: measured {:e} (need {cmp}){}",
            if self.passed { "PASS" } else { "FAIL" },
            self.suite,
            self.name,
            self.measured,
            if self.detail.is_empty() { String::new() } else { format!("; {}", self.detail) }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub suite: Suite,
    pub seed: u64,
    pub passed: bool,
    pub properties: Vec<PropertyResult>,
}

impl VerifyReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn lines(&self) -> String {
        self.properties.iter().map(|p| p.line() + "\n").collect()
    }
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<VerifyReport> {
    let properties = match suite {
        Suite::All => {
            let mut all = Vec::new();
            for s in Suite::EACH {
                all.extend(run_suite(s, seed)?.properties);
            }
            all
        }
        Suite::Shift => shift_suite(seed)?,
        Suite::Degeneracy => degeneracy_suite(seed)?,
        Suite::Gradients => gradient_suite(seed)?,
        Suite::Implicit => implicit_suite(seed)?,
        Suite::Norm => norm_suite(seed)?,
    };
    Ok(VerifyReport {
        suite,
        seed,
        passed: properties.iter().all(|p| p.passed),
        properties,
    })
}

const SHIFT_GRID: Grid = (4, 4);
const SHIFT_DIM: usize = 8;
pub const SHIFT_DRAWS: usize = 50;
/// Relative output change above which a shift counts as detected.
pub const SENSITIVITY_FLOOR: f64 = 1e-6;

/// A random instance and a random shift `δ` whose norm is `scale` times a
/// typical key norm.
fn shifted_instance(rng: &mut impl Rng, scale: f64) -> Result<(AttentionInputs, AttentionInputs)> {
    let x = AttentionInputs::random(SHIFT_GRID, SHIFT_DIM, rng);
    let delta = Tensor::randn(&[1, SHIFT_DIM], 1.0, rng);
    let delta = delta.scale(scale * (SHIFT_DIM as f64).sqrt() / delta.frobenius());
    let shifted = x.with_keys(x.k.add_row(&delta)?)?;
    Ok((x, shifted))
}

fn rel_change(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.rel_err(b, 1e-300)
}

/// Softmax, TTT and linear attention outputs under a constant key shift.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShiftProbe {
    pub softmax_max_abs_diff: f64,
    pub ttt_sensitive: usize,
    pub linear_sensitive: usize,
    pub ttt_in_max_abs_diff: f64,
    pub linear_in_max_abs_diff: f64,
    pub draws: usize,
}

pub fn shift_probe(seed: u64, draws: usize) -> Result<ShiftProbe> {
    let cfg = TttConfig::default();
    let mut out = ShiftProbe {
        softmax_max_abs_diff: 0.0,
        ttt_sensitive: 0,
        linear_sensitive: 0,
        ttt_in_max_abs_diff: 0.0,
        linear_in_max_abs_diff: 0.0,
        draws,
    };
    for draw in 0..draws {
        let mut rng = derived(seed, draw as u64);
        let (x, xs) = shifted_instance(&mut rng, 3.0)?;
        let m = InnerModel::init(InnerVariant::TwoLayerMlp, ActivationKind::Silu, SHIFT_DIM, SHIFT_DIM, INNER_INIT_STD, &mut rng)?;
        let d = softmax_attention(&x)?.max_abs_diff(&softmax_attention(&xs)?)?;
        out.softmax_max_abs_diff = out.softmax_max_abs_diff.max(d);

        if rel_change(&ttt_forward(&m, &xs, &cfg)?, &ttt_forward(&m, &x, &cfg)?)? > SENSITIVITY_FLOOR {
            out.ttt_sensitive += 1;
        }
        let lin = |i: &AttentionInputs| linear_attention(i, ActivationKind::EluPlusOne, None);
        if rel_change(&lin(&xs)?, &lin(&x)?)? > SENSITIVITY_FLOOR {
            out.linear_sensitive += 1;
        }

        let (xn, xsn) = (normalize_inputs(&x, KeyNorm::Instance)?, normalize_inputs(&xs, KeyNorm::Instance)?);
        let d = ttt_forward(&m, &xn, &cfg)?.max_abs_diff(&ttt_forward(&m, &xsn, &cfg)?)?;
        out.ttt_in_max_abs_diff = out.ttt_in_max_abs_diff.max(d);
        let d = lin(&xn)?.max_abs_diff(&lin(&xsn)?)?;
        out.linear_in_max_abs_diff = out.linear_in_max_abs_diff.max(d);
    }
    Ok(out)
}

fn shift_suite(seed: u64) -> Result<Vec<PropertyResult>> {
    let s = Suite::Shift;
    let p = shift_probe(seed, SHIFT_DRAWS)?;
    let n = format!("{} draws", p.draws);
    Ok(vec![
        PropertyResult::below(s, "softmax_key_shift_invariance", p.softmax_max_abs_diff, 1e-10, n.clone()),
        PropertyResult::at_least(s, "ttt_key_shift_sensitivity", p.ttt_sensitive as f64, 45.0, n.clone()),
        PropertyResult::at_least(s, "linear_key_shift_sensitivity", p.linear_sensitive as f64, 45.0, n.clone()),
        PropertyResult::below(s, "instance_norm_ttt_invariance", p.ttt_in_max_abs_diff, 1e-10, n.clone()),
        PropertyResult::below(s, "instance_norm_linear_invariance", p.linear_in_max_abs_diff, 1e-10, n),
    ])
}

/// Largest gap between a zero-initialized linear TTT layer (inner-product
/// loss, unit step) and `Q·(KᵀV)` over `instances` random draws.
pub fn degeneracy_gap(seed: u64, instances: usize) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let mut rng = derived(seed, 1000 + i as u64);
        let d = 2 + i % 7;
        let grid = (1 + i % 4, 2 + i % 3);
        let x = AttentionInputs::random(grid, d, &mut rng);
        let m = InnerModel::zeros(InnerVariant::Linear, ActivationKind::Silu, d, d)?;
        let got = ttt_forward(&m, &x, &TttConfig::default())?;
        let want = x.q.matmul(&x.k.transpose()?.matmul(&x.v)?)?;
        worst = worst.max(got.max_abs_diff(&want)?);
    }
    Ok(worst)
}

fn degeneracy_suite(seed: u64) -> Result<Vec<PropertyResult>> {
    let s = Suite::Degeneracy;
    let mut dyn_gap = 0.0f64;
    for i in 0..20 {
        let x = AttentionInputs::random((3, 4), 6, &mut derived(seed, 2000 + i));
        dyn_gap = dyn_gap.max(dynamic_mlp_view(&x)?.max_abs_diff(&softmax_attention(&x)?)?);
    }
    Ok(vec![
        PropertyResult::below(s, "linear_ttt_equals_q_kt_v", degeneracy_gap(seed, 20)?, 1e-10, "20 instances"),
        PropertyResult::below(s, "dynamic_mlp_view_equals_softmax", dyn_gap, 1e-12, "20 instances"),
    ])
}

/// Worst relative error between tape and finite-difference gradients of
/// the inner loss with respect to each inner weight, per variant and loss.
pub fn inner_loss_gradient_check(seed: u64, instances: usize) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for (vi, variant) in InnerVariant::ALL.into_iter().enumerate() {
        for kind in [InnerLoss::InnerProduct, InnerLoss::L2] {
            let mut worst = 0.0f64;
            for i in 0..instances {
                let mut rng = derived(seed, 3000 + (vi * 100 + i) as u64);
                let (d, n) = (3, 5);
                let m = InnerModel::init(variant, ActivationKind::Silu, d, d, 0.7, &mut rng)?;
                let k = Tensor::randn(&[n, d], 1.0, &mut rng);
                let v = Tensor::randn(&[n, d], 1.0, &mut rng);
                let tape = Tape::new();
                let vars = m.on_tape(&tape, true);
                let loss = vars.loss(&tape.constant(k.clone()), &tape.constant(v.clone()), kind)?;
                let grads = tape.grad_values(&loss, &vars.weights, None)?;
                for (w, g) in grads.iter().enumerate() {
                    let f = |x: &Tensor| {
                        let mut mm = m.clone();
                        mm.weights[w] = x.clone();
                        inner_loss(&mm, &k, &v, kind).unwrap_or(f64::NAN)
                    };
                    let fd = finite_diff_grad(f, &m.weights[w], 1e-5)?;
                    worst = worst.max(g.rel_err(&fd, 1e-8)?);
                }
            }
            let loss = match kind {
                InnerLoss::InnerProduct => "inner_product",
                InnerLoss::L2 => "l2",
            };
            out.push((format!("{}_{loss}", variant.label()), worst));
        }
    }
    Ok(out)
}

/// Worst relative error between the closed-form two-layer gradients and the
/// tape, over both losses.
pub fn analytic_gradient_gap(seed: u64, instances: usize) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let mut rng = derived(seed, 4000 + i as u64);
        let (d, h, n) = (4, 6, 7);
        let m = InnerModel::init(InnerVariant::TwoLayerMlp, ActivationKind::Silu, d, h, 0.5, &mut rng)?;
        let k = Tensor::randn(&[n, d], 1.0, &mut rng);
        let v = Tensor::randn(&[n, d], 1.0, &mut rng);
        for kind in [InnerLoss::InnerProduct, InnerLoss::L2] {
            let tape = Tape::new();
            let vars = m.on_tape(&tape, true);
            let loss = vars.loss(&tape.constant(k.clone()), &tape.constant(v.clone()), kind)?;
            let tg = tape.grad_values(&loss, &vars.weights, None)?;
            let (g1, g2) = two_layer_analytic_grads(&m, &k, &v, kind)?;
            worst = worst.max(g1.rel_err(&tg[0], 1e-12)?).max(g2.rel_err(&tg[1], 1e-12)?);
        }
    }
    Ok(worst)
}

/// Ratio of truncation residuals at `δ/2` and `δ` per instance.
pub fn truncation_ratios(seed: u64, instances: usize) -> Result<Vec<f64>> {
    (0..instances)
        .map(|i| {
            let mut rng = derived(seed, 5000 + i as u64);
            let d = 4;
            let m = InnerModel::init(InnerVariant::TwoLayerMlp, ActivationKind::Silu, d, d, 0.6, &mut rng)?;
            let k = Tensor::randn(&[1, d], 1.0, &mut rng);
            let v = Tensor::randn(&[1, d], 1.0, &mut rng);
            let delta = Tensor::randn(&[1, d], 1.0, &mut rng);
            let delta = delta.scale(1e-2 / delta.frobenius());
            let full = shifted_gradient_expansion(&m, &k, &v, &delta)?;
            let half = shifted_gradient_expansion(&m, &k, &v, &delta.scale(0.5))?;
            Ok(half.truncation_residual / full.truncation_residual)
        })
        .collect()
}

fn gradient_suite(seed: u64) -> Result<Vec<PropertyResult>> {
    let s = Suite::Gradients;
    let mut out: Vec<PropertyResult> = op_gradient_sweep(20, seed, 1e-5)?
        .into_iter()
        .map(|c| PropertyResult::below(s, format!("op_{}", c.op), c.max_rel_err, 1e-5, format!("{} trials", c.trials)))
        .collect();
    for (name, err) in inner_loss_gradient_check(seed, 5)? {
        out.push(PropertyResult::below(s, format!("inner_loss_{name}"), err, 1e-5, "5 instances"));
    }
    out.push(PropertyResult::below(
        s,
        "two_layer_analytic_vs_tape",
        analytic_gradient_gap(seed, 20)?,
        1e-8,
        "20 instances",
    ));
    let ratios = truncation_ratios(seed, 20)?;
    let inside = ratios.iter().filter(|r| (0.18..=0.35).contains(*r)).count();
    let (lo, hi) = ratios.iter().fold((f64::INFINITY, 0.0f64), |(a, b), r| (a.min(*r), b.max(*r)));
    out.push(PropertyResult::at_least(
        s,
        "truncation_residual_halving_ratio_in_0.18_0.35",
        inside as f64,
        20.0,
        format!("ratios span [{lo:.4}, {hi:.4}]"),
    ));
    Ok(out)
}

/// `trace(∂oᵢ/∂vⱼ)/d` by central differences on `V`.
pub fn fd_implicit_attention(layer: &MixerLayer, x: &AttentionInputs, h: f64) -> Result<Tensor> {
    let (n, d) = (x.tokens(), x.head_dim());
    let mut scores = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for c in 0..d {
                let f = |vjc: &Tensor| -> f64 {
                    let mut v = x.v.clone();
                    v.set(j, c, vjc.data()[0]);
                    let probe = AttentionInputs::new(x.q.clone(), x.k.clone(), v, x.grid).expect("same shapes");
                    layer.forward(&probe).map_or(f64::NAN, |o| o.at(i, c))
                };
                acc += finite_diff_grad(f, &Tensor::scalar(x.v.at(j, c)), h)?.data()[0];
            }
            scores.set(i, j, acc / d as f64);
        }
    }
    Ok(scores)
}

/// Softmax implicit scores against explicit weights (max abs diff) and
/// two-layer TTT implicit scores against finite differences on a 3-token
/// toy (relative Frobenius error).
pub fn implicit_checks(seed: u64) -> Result<(f64, f64)> {
    let mut rng = derived(seed, 6000);
    let x = AttentionInputs::random((4, 4), 8, &mut rng);
    let soft = implicit_attention(&MixerLayer::Softmax, &x)?.scores;
    let softmax_gap = soft.max_abs_diff(&softmax_weights(&x)?)?;

    let toy = AttentionInputs::random((3, 1), 4, &mut rng);
    let model = InnerModel::init(InnerVariant::TwoLayerMlp, ActivationKind::Silu, 4, 4, 0.5, &mut rng)?;
    let layer = MixerLayer::Ttt {
        model,
        cfg: TttConfig::default(),
    };
    let tape_scores = implicit_attention(&layer, &toy)?.scores;
    let fd_scores = fd_implicit_attention(&layer, &toy, 1e-5)?;
    Ok((softmax_gap, tape_scores.rel_err(&fd_scores, 1e-12)?))
}

fn implicit_suite(seed: u64) -> Result<Vec<PropertyResult>> {
    let s = Suite::Implicit;
    let (softmax_gap, ttt_err) = implicit_checks(seed)?;
    let x = AttentionInputs::random((5, 5), 4, &mut derived(seed, 6001));
    let nat = implicit_attention(&MixerLayer::Nat { window: 3 }, &x)?.scores;
    let nat_index = locality_index(&nat, x.grid, 3)?;
    Ok(vec![
        PropertyResult::below(s, "softmax_scores_equal_attention", softmax_gap, 1e-8, "N=16, d=8"),
        PropertyResult::below(s, "ttt_scores_match_fd_jacobian", ttt_err, 1e-4, "3 tokens, d=4"),
        PropertyResult::at_least(s, "nat3_scores_inside_window", nat_index, 1.0, "locality index, 5×5 grid"),
    ])
}

pub const RATIO_TOKENS: usize = 196;
pub const RATIO_DIM: usize = 64;

/// Mean key-shift ratio of i.i.d. standard Gaussian keys.
pub fn gaussian_key_ratio(seed: u64, draws: usize, tokens: usize, dim: usize) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..draws {
        let k = Tensor::randn(&[tokens, dim], 1.0, &mut derived(seed, 7000 + i as u64));
        total += key_shift_ratio(&k)?.shift_ratio;
    }
    Ok(total / draws as f64)
}

fn norm_suite(seed: u64) -> Result<Vec<PropertyResult>> {
    let s = Suite::Norm;
    let ratio = gaussian_key_ratio(seed, 100, RATIO_TOKENS, RATIO_DIM)?;
    let target = 0.071;
    let mut ratio_prop = PropertyResult::below(
        s,
        "gaussian_key_shift_ratio",
        ratio,
        0.2,
        format!("N={RATIO_TOKENS}, d={RATIO_DIM}, 100 draws"),
    );
    ratio_prop.check = Check::RelativeTo { target_milli: 71 };
    ratio_prop.passed = (ratio - target).abs() <= 0.2 * target;

    let mut rng = derived(seed, 7500);
    let (mut mean_err, mut var_err, mut ratio_after) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..20 {
        let k = Tensor::randn(&[24, 6], 2.0, &mut rng).add_row(&Tensor::randn(&[1, 6], 10.0, &mut rng))?;
        let kn = instance_norm_keys(&k, NORM_EPS)?;
        for c in 0..6 {
            let col: Vec<f64> = (0..24).map(|r| kn.at(r, c)).collect();
            let mean = col.iter().sum::<f64>() / 24.0;
            let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 24.0;
            mean_err = mean_err.max(mean.abs());
            var_err = var_err.max((var - 1.0).abs());
        }
        ratio_after = ratio_after.max(key_shift_ratio(&kn)?.shift_ratio);
    }
    Ok(vec![
        ratio_prop,
        PropertyResult::below(s, "instance_norm_zero_mean", mean_err, 1e-12, "20 shifted key sets"),
        PropertyResult::below(s, "instance_norm_unit_variance", var_err, 1e-5, "20 shifted key sets"),
        PropertyResult::below(s, "instance_norm_removes_shift_ratio", ratio_after, 1e-10, "20 shifted key sets"),
    ])
}
