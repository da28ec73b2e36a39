//! Reference token mixers: Softmax attention, its dynamic-MLP rewriting,
//! kernel linear attention and 2D neighborhood attention.
//!
//! Every mixer exists twice: a `*_tape` form over [`Var`]s, used wherever
//! gradients are needed, and a plain form over [`AttentionInputs`].


use rand::Rng;

use crate::activation::ActivationKind;
use crate::conv::Grid;
use crate::error::{config_err, dim_err, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Below this, a linear-attention normalizer is treated as degenerate.
pub const MIN_NORMALIZER: f64 = 1e-12;

/// Queries, keys and values of one head over an `H×W` token grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionInputs {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub grid: Grid,
}

impl AttentionInputs {
    pub fn new(q: Tensor, k: Tensor, v: Tensor, grid: Grid) -> Result<Self> {
        let (n, d) = q.dims2()?;
        if k.shape() != q.shape() || v.shape() != q.shape() {
            return Err(dim_err(format!(
                "Q/K/V shapes differ: {:?} {:?} {:?}",
                q.shape(),
                k.shape(),
                v.shape()
            )));
        }
        if grid.0 * grid.1 != n {
            return Err(dim_err(format!(
                "grid {}×{} does not factor N = {n}",
                grid.0, grid.1
            )));
        }
        debug_assert!(d > 0);
        Ok(Self { q, k, v, grid })
    }

    /// Standard-normal Q, K, V.
    pub fn random(grid: Grid, d: usize, rng: &mut impl Rng) -> Self {
        let n = grid.0 * grid.1;
        let q = Tensor::randn(&[n, d], 1.0, rng);
        let k = Tensor::randn(&[n, d], 1.0, rng);
        let v = Tensor::randn(&[n, d], 1.0, rng);
        Self { q, k, v, grid }
    }

    pub fn tokens(&self) -> usize {
        self.q.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.q.cols()
    }

    pub fn with_keys(&self, k: Tensor) -> Result<Self> {
        Self::new(self.q.clone(), k, self.v.clone(), self.grid)
    }

    /// Places Q, K, V on `tape` as constants.
    pub fn constants(&self, tape: &Tape) -> (Var, Var, Var) {
        (
            tape.constant(self.q.clone()),
            tape.constant(self.k.clone()),
            tape.constant(self.v.clone()),
        )
    }
}

fn inv_sqrt_d(q: &Var) -> f64 {
    1.0 / (q.value().cols() as f64).sqrt()
}

/// `Softmax(QKᵀ/√d)`.
pub fn softmax_weights_tape(q: &Var, k: &Var) -> Result<Var> {
    let scale = inv_sqrt_d(q);
    q.matmul(&k.t()?)?.softmax_rows(scale)
}

pub fn softmax_attention_tape(q: &Var, k: &Var, v: &Var) -> Result<Var> {
    softmax_weights_tape(q, k)?.matmul(v)
}

/// The explicit N×N Softmax attention matrix.
pub fn softmax_weights(inputs: &AttentionInputs) -> Result<Tensor> {
    let tape = Tape::new();
    let (q, k, _) = inputs.constants(&tape);
    Ok((*softmax_weights_tape(&q, &k)?.value()).clone())
}

pub fn softmax_attention(inputs: &AttentionInputs) -> Result<Tensor> {
    let tape = Tape::new();
    let (q, k, v) = inputs.constants(&tape);
    Ok((*softmax_attention_tape(&q, &k, &v)?.value()).clone())
}

/// Softmax attention read as a two-layer MLP whose weights are built from
/// the keys and values: `σ(q·W₁)·W₂` with `W₁ = Kᵀ/√d`, `W₂ = V` and σ the
/// row softmax.
pub fn dynamic_mlp_view_tape(q: &Var, k: &Var, v: &Var) -> Result<Var> {
    let w1 = k.t()?.scale(inv_sqrt_d(q));
    let w2 = v;
    q.matmul(&w1)?.softmax_rows(1.0)?.matmul(w2)
}

pub fn dynamic_mlp_view(inputs: &AttentionInputs) -> Result<Tensor> {
    let tape = Tape::new();
    let (q, k, v) = inputs.constants(&tape);
    Ok((*dynamic_mlp_view_tape(&q, &k, &v)?.value()).clone())
}

/// `φ(Q)(φ(K)ᵀV) / (φ(Q)φ(K)ᵀ𝟙)`. With `proj_qk`, Q and K are first
/// multiplied by the given d×d matrices. No 1/√d scale is applied.
pub fn linear_attention_tape(
    q: &Var,
    k: &Var,
    v: &Var,
    kernel: ActivationKind,
    proj_qk: Option<(&Var, &Var)>,
) -> Result<Var> {
    let (q, k) = match proj_qk {
        Some((pq, pk)) => (q.matmul(pq)?, k.matmul(pk)?),
        None => (q.clone(), k.clone()),
    };
    let n = q.value().rows();
    let d = v.value().cols();
    let fq = q.activation(kernel);
    let fk = k.activation(kernel);
    let kv = fk.t()?.matmul(v)?;
    let numerator = fq.matmul(&kv)?;
    let key_sum = fk.col_sum()?;
    let normalizer = fq.mul(&key_sum.repeat_rows(n)?)?.row_sum()?;
    for (row, &z) in normalizer.value().data().iter().enumerate() {
        if !(z.abs() >= MIN_NORMALIZER) {
            return Err(Error::DegenerateNormalizer {
                row,
                value: z,
                threshold: MIN_NORMALIZER,
            });
        }
    }
    numerator.div(&normalizer.repeat_cols(d)?)
}

pub fn linear_attention(
    inputs: &AttentionInputs,
    kernel: ActivationKind,
    proj_qk: Option<(&Tensor, &Tensor)>,
) -> Result<Tensor> {
    let tape = Tape::new();
    let (q, k, v) = inputs.constants(&tape);
    let proj = proj_qk.map(|(a, b)| (tape.constant(a.clone()), tape.constant(b.clone())));
    let out = linear_attention_tape(&q, &k, &v, kernel, proj.as_ref().map(|(a, b)| (a, b)))?;
    Ok((*out.value()).clone())
}

fn check_window(window: usize) -> Result<()> {
    if window == 0 || window % 2 == 0 {
        return Err(config_err(format!("window {window} must be odd")));
    }
    Ok(())
}

/// Grid tokens attended by `token` in a `window×window` neighborhood.
///
/// The window is clamped inside the grid, so a token near the border sees
/// a window shifted inward and every token attends to the same number of
/// neighbors. A window wider than the grid covers that whole dimension.
pub fn neighbors(grid: Grid, window: usize, token: usize) -> Result<Vec<usize>> {
    check_window(window)?;
    let (h, w) = grid;
    if token >= h * w {
        return Err(dim_err(format!("token {token} outside {h}×{w} grid")));
    }
    let span = |extent: usize, pos: usize| {
        let len = window.min(extent);
        let start = pos.saturating_sub(window / 2).min(extent - len);
        start..start + len
    };
    let (r, c) = (token / w, token % w);
    let cols = span(w, c);
    Ok(span(h, r)
        .flat_map(|rr| cols.clone().map(move |cc| rr * w + cc))
        .collect())
}

/// Row-major N×N membership mask of [`neighbors`].
pub fn neighborhood_mask(grid: Grid, window: usize) -> Result<Vec<bool>> {
    let n = grid.0 * grid.1;
    let mut mask = vec![false; n * n];
    for i in 0..n {
        for j in neighbors(grid, window, i)? {
            mask[i * n + j] = true;
        }
    }
    Ok(mask)
}

pub fn neighborhood_weights_tape(q: &Var, k: &Var, grid: Grid, window: usize) -> Result<Var> {
    let n = q.value().rows();
    if grid.0 * grid.1 != n {
        return Err(dim_err("grid does not match token count"));
    }
    let mask = neighborhood_mask(grid, window)?;
    q.matmul(&k.t()?)?.masked_softmax_rows(inv_sqrt_d(q), &mask)
}

pub fn neighborhood_attention_tape(
    q: &Var,
    k: &Var,
    v: &Var,
    grid: Grid,
    window: usize,
) -> Result<Var> {
    neighborhood_weights_tape(q, k, grid, window)?.matmul(v)
}

pub fn neighborhood_weights(inputs: &AttentionInputs, window: usize) -> Result<Tensor> {
    let tape = Tape::new();
    let (q, k, _) = inputs.constants(&tape);
    Ok((*neighborhood_weights_tape(&q, &k, inputs.grid, window)?.value()).clone())
}

pub fn neighborhood_attention(inputs: &AttentionInputs, window: usize) -> Result<Tensor> {
    let tape = Tape::new();
    let (q, k, v) = inputs.constants(&tape);
    Ok((*neighborhood_attention_tape(&q, &k, &v, inputs.grid, window)?.value()).clone())
}
