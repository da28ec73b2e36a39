//! Wall-clock scaling of the token mixers alone.
//!
//! The kernels below work on flat row-major slices in either precision and
//! skip the tape entirely, so the timings measure arithmetic rather than
//! bookkeeping. Each is checked against its tape counterpart in the tests.

use std::hint::black_box;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{config_err, Error, Result};
use crate::rng::derived;
use crate::tensor::DType;

pub trait BenchFloat:
    Copy
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
}

impl BenchFloat for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
}

impl BenchFloat for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(x: f64) -> Self {
        x
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
}

fn dot<T: BenchFloat>(a: &[T], b: &[T]) -> T {
    let mut s = T::ZERO;
    for (x, y) in a.iter().zip(b) {
        s += *x * *y;
    }
    s
}

/// `c[m×n] = a[m×k] · b[k×n]`
fn matmul<T: BenchFloat>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::ZERO; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            for (r, y) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *r += x * *y;
            }
        }
    }
    c
}

/// `aᵀ · b` for `a, b` of shape `n×d`, giving `d×d`.
fn at_b<T: BenchFloat>(a: &[T], b: &[T], n: usize, d: usize) -> Vec<T> {
    let mut c = vec![T::ZERO; d * d];
    for t in 0..n {
        let (ar, br) = (&a[t * d..(t + 1) * d], &b[t * d..(t + 1) * d]);
        for (i, x) in ar.iter().enumerate() {
            for (r, y) in c[i * d..(i + 1) * d].iter_mut().zip(br) {
                *r += *x * *y;
            }
        }
    }
    c
}

fn transpose<T: BenchFloat>(a: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

fn sigmoid<T: BenchFloat>(x: T) -> T {
    T::ONE / (T::ONE + (-x).exp())
}

fn silu<T: BenchFloat>(x: T) -> T {
    x * sigmoid(x)
}

fn silu_prime<T: BenchFloat>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::ONE + x * (T::ONE - s))
}

fn elu_plus_one<T: BenchFloat>(x: T) -> T {
    if x > T::ZERO {
        x + T::ONE
    } else {
        x.exp()
    }
}

/// Softmax attention `softmax(QKᵀ/√d)·V`, one row of logits at a time.
pub fn softmax_kernel<T: BenchFloat>(q: &[T], k: &[T], v: &[T], n: usize, d: usize) -> Vec<T> {
    let scale = T::ONE / T::from_f64(d as f64).sqrt();
    let mut out = vec![T::ZERO; n * d];
    let mut w = vec![T::ZERO; n];
    for i in 0..n {
        let qi = &q[i * d..(i + 1) * d];
        let mut max = dot(qi, &k[..d]) * scale;
        for (j, wj) in w.iter_mut().enumerate() {
            *wj = dot(qi, &k[j * d..(j + 1) * d]) * scale;
            if *wj > max {
                max = *wj;
            }
        }
        let mut sum = T::ZERO;
        for wj in w.iter_mut() {
            *wj = (*wj - max).exp();
            sum += *wj;
        }
        let o = &mut out[i * d..(i + 1) * d];
        for (j, wj) in w.iter().enumerate() {
            for (oc, vc) in o.iter_mut().zip(&v[j * d..(j + 1) * d]) {
                *oc += *wj * *vc;
            }
        }
        for oc in o.iter_mut() {
            *oc = *oc / sum;
        }
    }
    out
}

/// ELU+1 kernel linear attention with its normalizer.
pub fn linear_kernel<T: BenchFloat>(q: &[T], k: &[T], v: &[T], n: usize, d: usize) -> Vec<T> {
    let fk: Vec<T> = k.iter().map(|x| elu_plus_one(*x)).collect();
    let kv = at_b(&fk, v, n, d);
    let mut z = vec![T::ZERO; d];
    for t in 0..n {
        for (zc, x) in z.iter_mut().zip(&fk[t * d..(t + 1) * d]) {
            *zc += *x;
        }
    }
    let fq: Vec<T> = q.iter().map(|x| elu_plus_one(*x)).collect();
    let mut out = matmul(&fq, &kv, n, d, d);
    for i in 0..n {
        let norm = dot(&fq[i * d..(i + 1) * d], &z);
        for o in &mut out[i * d..(i + 1) * d] {
            *o = *o / norm;
        }
    }
    out
}

/// One inner-product-loss step of a two-layer SiLU inner model followed by
/// the query pass, with the closed-form gradients.
pub fn ttt_two_layer_kernel<T: BenchFloat>(q: &[T], k: &[T], v: &[T], w1: &[T], w2: &[T], n: usize, d: usize) -> Vec<T> {
    let z = matmul(k, w1, n, d, d);
    let a: Vec<T> = z.iter().map(|x| silu(*x)).collect();
    let neg_v: Vec<T> = v.iter().map(|x| -*x).collect();
    let mut dz = matmul(&neg_v, &transpose(w2, d, d), n, d, d);
    for (g, x) in dz.iter_mut().zip(&z) {
        *g = *g * silu_prime(*x);
    }
    let g1 = at_b(k, &dz, n, d);
    let g2 = at_b(&a, &neg_v, n, d);
    let w1n: Vec<T> = w1.iter().zip(&g1).map(|(w, g)| *w - *g).collect();
    let w2n: Vec<T> = w2.iter().zip(&g2).map(|(w, g)| *w - *g).collect();
    let h: Vec<T> = matmul(q, &w1n, n, d, d).into_iter().map(silu).collect();
    matmul(&h, &w2n, n, d, d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchArch {
    Softmax,
    Linear,
    Ttt,
}

impl BenchArch {
    pub fn label(self) -> &'static str {
        match self {
            Self::Softmax => "softmax",
            Self::Linear => "linear",
            Self::Ttt => "ttt",
        }
    }
}

impl std::str::FromStr for BenchArch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Self::Softmax),
            "linear" => Ok(Self::Linear),
            "ttt" | "ttt_two_layer" => Ok(Self::Ttt),
            other => Err(config_err(format!("unknown benchmark architecture {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub archs: Vec<BenchArch>,
    pub tokens: Vec<usize>,
    pub head_dim: usize,
    pub repeats: usize,
    pub warmup: usize,
    /// Calls shorter than this are batched until a sample reaches it.
    pub min_sample_secs: f64,
    pub dtype: DType,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            archs: vec![BenchArch::Softmax, BenchArch::Ttt],
            tokens: (8..=14).map(|p| 1usize << p).collect(),
            head_dim: 16,
            repeats: 5,
            warmup: 1,
            min_sample_secs: 1e-4,
            dtype: DType::F32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingSample {
    pub tokens: usize,
    pub seconds_median: f64,
    pub calls_per_sample: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArchScaling {
    pub arch: String,
    pub samples: Vec<ScalingSample>,
    /// α in `log t = α·log N + c`.
    pub exponent: f64,
    pub intercept: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Crossover {
    /// Token count where the fitted softmax and TTT lines meet.
    pub fitted_tokens: f64,
    /// Smallest measured N from which TTT is faster at every larger N.
    pub measured_tokens: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingReport {
    pub head_dim: usize,
    pub dtype: DType,
    pub archs: Vec<ArchScaling>,
    pub crossover: Option<Crossover>,
    pub warnings: Vec<String>,
}

impl ScalingReport {
    pub fn arch(&self, arch: BenchArch) -> Option<&ArchScaling> {
        self.archs.iter().find(|a| a.arch == arch.label())
    }

    /// `arch,N,seconds_median` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("arch,N,seconds_median\n");
        for a in &self.archs {
            for s in &a.samples {
                out.push_str(&format!("{},{},{:e}\n", a.arch, s.tokens, s.seconds_median));
            }
        }
        out
    }
}

/// Least-squares fit of `log y = α·log x + c`; returns `(α, c)`.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    if points.len() < 2 || points.iter().any(|(x, y)| *x <= 0.0 || *y <= 0.0) {
        return Err(config_err("power-law fit needs ≥ 2 positive points"));
    }
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|(x, y)| (x.ln(), y.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(config_err("power-law fit needs distinct x values"));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let alpha = sxy / sxx;
    Ok((alpha, my - alpha * mx))
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

struct Inputs<T> {
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    w1: Vec<T>,
    w2: Vec<T>,
}

fn inputs<T: BenchFloat>(n: usize, d: usize, seed: u64) -> Inputs<T> {
    let mut rng = derived(seed, n as u64);
    let mut draw = |len: usize, std: f64| -> Vec<T> {
        (0..len)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                T::from_f64(z * std)
            })
            .collect()
    };
    let (q, k, v) = (draw(n * d, 1.0), draw(n * d, 1.0), draw(n * d, 1.0));
    let (w1, w2) = (draw(d * d, 0.02), draw(d * d, 0.02));
    let _ = rng.random::<u8>();
    Inputs { q, k, v, w1, w2 }
}

fn run_once<T: BenchFloat>(arch: BenchArch, x: &Inputs<T>, n: usize, d: usize) -> Vec<T> {
    match arch {
        BenchArch::Softmax => softmax_kernel(&x.q, &x.k, &x.v, n, d),
        BenchArch::Linear => linear_kernel(&x.q, &x.k, &x.v, n, d),
        BenchArch::Ttt => ttt_two_layer_kernel(&x.q, &x.k, &x.v, &x.w1, &x.w2, n, d),
    }
}

fn measure<T: BenchFloat>(arch: BenchArch, n: usize, cfg: &BenchConfig, warnings: &mut Vec<String>) -> ScalingSample {
    let x = inputs::<T>(n, cfg.head_dim, cfg.seed);
    let d = cfg.head_dim;
    for _ in 0..cfg.warmup {
        black_box(run_once(arch, black_box(&x), n, d));
    }
    let start = Instant::now();
    black_box(run_once(arch, black_box(&x), n, d));
    let single = start.elapsed().as_secs_f64();
    let calls = if single < cfg.min_sample_secs {
        warnings.push(format!(
            "{} at N={n}: one call takes {:.1} µs, below timer floor; batching",
            arch.label(),
            single * 1e6
        ));
        (cfg.min_sample_secs / single.max(1e-9)).ceil() as usize
    } else {
        1
    };
    let mut times: Vec<f64> = (0..cfg.repeats)
        .map(|_| {
            let start = Instant::now();
            for _ in 0..calls {
                black_box(run_once(arch, black_box(&x), n, d));
            }
            start.elapsed().as_secs_f64() / calls as f64
        })
        .collect();
    ScalingSample {
        tokens: n,
        seconds_median: median(&mut times),
        calls_per_sample: calls,
    }
}

/// Times every architecture at every token count, single-threaded.
pub fn scaling_bench(cfg: &BenchConfig) -> Result<ScalingReport> {
    if cfg.repeats < 5 {
        return Err(config_err(format!("need at least 5 repeats, got {}", cfg.repeats)));
    }
    let (lo, hi) = match (cfg.tokens.iter().min(), cfg.tokens.iter().max()) {
        (Some(&lo), Some(&hi)) if lo > 0 => (lo, hi),
        _ => return Err(config_err("token list must be non-empty and positive")),
    };
    if ((hi as f64) / (lo as f64)).log10() < 1.5 {
        return Err(config_err(format!("token range {lo}..{hi} spans less than 1.5 decades")));
    }
    if cfg.head_dim == 0 || cfg.archs.is_empty() {
        return Err(config_err("need a positive head dim and at least one architecture"));
    }
    let mut tokens = cfg.tokens.clone();
    tokens.sort_unstable();
    tokens.dedup();
    let mut warnings = Vec::new();
    let mut archs = Vec::new();
    for &arch in &cfg.archs {
        let samples: Vec<ScalingSample> = tokens
            .iter()
            .map(|&n| match cfg.dtype {
                DType::F32 => measure::<f32>(arch, n, cfg, &mut warnings),
                DType::F64 => measure::<f64>(arch, n, cfg, &mut warnings),
            })
            .collect();
        let pts: Vec<(f64, f64)> = samples.iter().map(|s| (s.tokens as f64, s.seconds_median)).collect();
        let (exponent, intercept) = fit_power_law(&pts)?;
        archs.push(ArchScaling {
            arch: arch.label().to_string(),
            samples,
            exponent,
            intercept,
        });
    }
    let mut report = ScalingReport {
        head_dim: cfg.head_dim,
        dtype: cfg.dtype,
        archs,
        crossover: None,
        warnings,
    };
    report.crossover = crossover(&report);
    Ok(report)
}

fn crossover(report: &ScalingReport) -> Option<Crossover> {
    let s = report.arch(BenchArch::Softmax)?;
    let t = report.arch(BenchArch::Ttt)?;
    if s.exponent <= t.exponent {
        return None;
    }
    let fitted_tokens = ((t.intercept - s.intercept) / (s.exponent - t.exponent)).exp();
    let faster: Vec<bool> = s
        .samples
        .iter()
        .zip(&t.samples)
        .map(|(a, b)| b.seconds_median < a.seconds_median)
        .collect();
    let measured_tokens = match faster.iter().rposition(|f| !f) {
        None => Some(t.samples[0].tokens),
        Some(i) if i + 1 < faster.len() => Some(t.samples[i + 1].tokens),
        Some(_) => None,
    };
    Some(Crossover {
        fitted_tokens,
        measured_tokens,
    })
}
