//! Reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Backward rules
//! are themselves expressed as recorded operations, so a gradient obtained
//! from [`Tape::grad`] is an ordinary `Var` that can be differentiated again.
//! The TTT fast-weight update relies on this: the query pass consumes
//! `W − ∇L_inner`, and outer training differentiates through that gradient.
//!
//! Tapes are dynamic and single-threaded (`Rc`-based); build a fresh one per
//! forward computation.

use std::cell::RefCell;
use std::rc::Rc;

use crate::activation::ActivationKind;
use crate::conv::{self, Grid};
use crate::error::{config_err, dim_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sqrt(usize),
    Activation {
        x: usize,
        kind: ActivationKind,
        order: u8,
    },
    Softmax {
        x: usize,
        scale: f64,
    },
    RowSum(usize),
    RepeatCols(usize),
    ColSum(usize),
    RepeatRows(usize),
    SumAll(usize),
    SliceCols {
        x: usize,
        start: usize,
    },
    PadCols {
        x: usize,
        start: usize,
    },
    DwConv {
        x: usize,
        kernel: usize,
        grid: Grid,
    },
    DwKernelGrad {
        x: usize,
        g: usize,
        grid: Grid,
    },
    FlipKernel(usize),
    Reshape(usize),
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match *self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => vec![a, b],
            Transpose(a)
            | Scale(a, _)
            | AddScalar(a)
            | Sqrt(a)
            | RowSum(a)
            | RepeatCols(a)
            | ColSum(a)
            | RepeatRows(a)
            | SumAll(a)
            | FlipKernel(a)
            | Reshape(a) => vec![a],
            Activation { x, .. } | Softmax { x, .. } | SliceCols { x, .. } | PadCols { x, .. } => {
                vec![x]
            }
            DwConv { x, kernel, .. } => vec![x, kernel],
            DwKernelGrad { x, g, .. } => vec![x, g],
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
    grad: Option<Rc<Tensor>>,
}

/// Ordered record of executed operations.
#[derive(Clone, Default)]
pub struct Tape {
    nodes: Rc<RefCell<Vec<Node>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value().shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self.clone(),
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        self.push_node(value, op, requires_grad)
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn var(&self, id: usize) -> Var {
        Var {
            tape: self.clone(),
            id,
        }
    }

    fn same(&self, other: &Tape) -> Result<()> {
        if Rc::ptr_eq(&self.nodes, &other.nodes) {
            Ok(())
        } else {
            Err(config_err("variables belong to different tapes"))
        }
    }

    /// Gradients of `output` (weighted by `seed`, default all-ones) with
    /// respect to each of `wrt`, recorded on the tape so they can be
    /// differentiated further. `wrt` may name intermediate values.
    pub fn grad(&self, output: &Var, wrt: &[Var], seed: Option<&Var>) -> Result<Vec<Var>> {
        self.same(&output.tape)?;
        for w in wrt {
            self.same(&w.tape)?;
        }
        let out_id = output.id;
        let mut needed = vec![false; out_id + 1];
        for w in wrt {
            if w.id <= out_id {
                needed[w.id] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for i in 0..=out_id {
                if !needed[i] && nodes[i].op.inputs().iter().any(|&j| needed[j]) {
                    needed[i] = true;
                }
            }
        }

        let seed = match seed {
            Some(s) => {
                self.same(&s.tape)?;
                if s.value().shape() != output.value().shape() {
                    return Err(dim_err("seed shape differs from output shape"));
                }
                s.clone()
            }
            None => self.constant(Tensor::ones(output.value().shape())),
        };

        let mut grads: Vec<Option<Var>> = vec![None; out_id + 1];
        grads[out_id] = Some(seed);
        let is_target: Vec<bool> = {
            let mut t = vec![false; out_id + 1];
            for w in wrt {
                if w.id <= out_id {
                    t[w.id] = true;
                }
            }
            t
        };
        for id in (0..=out_id).rev() {
            if !needed[id] {
                continue;
            }
            let Some(g) = grads[id].clone() else { continue };
            if !is_target[id] {
                grads[id] = None;
            }
            let op = self.nodes.borrow()[id].op.clone();
            let out = self.var(id);
            for (input, contrib) in self.backprop(&op, &out, &g, |i| needed[i])? {
                grads[input] = Some(match grads[input].take() {
                    Some(acc) => acc.add(&contrib)?,
                    None => contrib,
                });
            }
        }

        wrt.iter()
            .map(|w| match grads.get(w.id).and_then(Clone::clone) {
                Some(g) => Ok(g),
                None => Ok(self.constant(Tensor::zeros(w.value().shape()))),
            })
            .collect()
    }

    /// Like [`Tape::grad`], but returns plain tensors and discards everything
    /// the gradient computation recorded.
    pub fn grad_values(&self, output: &Var, wrt: &[Var], seed: Option<&Tensor>) -> Result<Vec<Tensor>> {
        let mark = self.len();
        let seed = seed.map(|s| self.constant(s.clone()));
        let result = self
            .grad(output, wrt, seed.as_ref())
            .map(|gs| gs.iter().map(|g| (*g.value()).clone()).collect());
        self.nodes.borrow_mut().truncate(mark);
        result
    }

    /// Populates [`Var::grad`] for every `requires_grad` leaf that `output`
    /// (a 1×1 scalar) was computed from. A tape supports one backward pass.
    pub fn backward(&self, output: &Var) -> Result<()> {
        self.same(&output.tape)?;
        if output.value().len() != 1 {
            return Err(dim_err("backward needs a scalar output"));
        }
        let leaves: Vec<Var> = {
            let nodes = self.nodes.borrow();
            if nodes.iter().any(|n| n.grad.is_some()) {
                return Err(Error::Unsupported("tape already ran backward".into()));
            }
            (0..=output.id)
                .filter(|&i| matches!(nodes[i].op, Op::Leaf) && nodes[i].requires_grad)
                .map(|i| self.var(i))
                .collect()
        };
        let grads = self.grad_values(output, &leaves, None)?;
        let mut nodes = self.nodes.borrow_mut();
        for (leaf, g) in leaves.iter().zip(grads) {
            nodes[leaf.id].grad = Some(Rc::new(g));
        }
        Ok(())
    }

    fn backprop(
        &self,
        op: &Op,
        out: &Var,
        g: &Var,
        need: impl Fn(usize) -> bool,
    ) -> Result<Vec<(usize, Var)>> {
        use Op::*;
        let v = |i: usize| self.var(i);
        let mut res = Vec::with_capacity(2);
        let mut put = |i: usize, f: &dyn Fn() -> Result<Var>| -> Result<()> {
            if need(i) {
                res.push((i, f()?));
            }
            Ok(())
        };
        match *op {
            Leaf => {}
            MatMul(a, b) => {
                put(a, &|| g.matmul(&v(b).t()?))?;
                put(b, &|| v(a).t()?.matmul(g))?;
            }
            Transpose(a) => put(a, &|| g.t())?,
            Add(a, b) => {
                put(a, &|| Ok(g.clone()))?;
                put(b, &|| Ok(g.clone()))?;
            }
            Sub(a, b) => {
                put(a, &|| Ok(g.clone()))?;
                put(b, &|| Ok(g.neg()))?;
            }
            Mul(a, b) => {
                put(a, &|| g.mul(&v(b)))?;
                put(b, &|| g.mul(&v(a)))?;
            }
            Div(a, b) => {
                put(a, &|| g.div(&v(b)))?;
                put(b, &|| Ok(g.mul(out)?.div(&v(b))?.neg()))?;
            }
            Scale(a, s) => put(a, &|| Ok(g.scale(s)))?,
            AddScalar(a) => put(a, &|| Ok(g.clone()))?,
            Sqrt(a) => put(a, &|| g.scale(0.5).div(out))?,
            Activation { x, kind, order } => {
                if order >= 3 {
                    return Err(Error::Unsupported(format!(
                        "differentiating the order-{order} derivative of {}",
                        kind.name()
                    )));
                }
                put(x, &|| g.mul(&v(x).activation_derivative(kind, order + 1)))?;
            }
            Softmax { x, scale, .. } => put(x, &|| {
                let (_, n) = out.value().dims2()?;
                let weighted = g.mul(out)?.row_sum()?.repeat_cols(n)?;
                Ok(out.mul(&g.sub(&weighted)?)?.scale(scale))
            })?,
            RowSum(a) => put(a, &|| g.repeat_cols(self.value(a).cols()))?,
            RepeatCols(a) => put(a, &|| g.row_sum())?,
            ColSum(a) => put(a, &|| g.repeat_rows(self.value(a).rows()))?,
            RepeatRows(a) => put(a, &|| g.col_sum())?,
            SumAll(a) => put(a, &|| {
                let (r, c) = self.value(a).dims2()?;
                g.repeat_cols(c)?.repeat_rows(r)
            })?,
            Reshape(a) => put(a, &|| g.reshape(self.value(a).shape()))?,
            SliceCols { x, start } => put(x, &|| g.pad_cols(start, self.value(x).cols()))?,
            PadCols { x, start, .. } => put(x, &|| g.slice_cols(start, self.value(x).cols()))?,
            DwConv { x, kernel, grid } => {
                put(x, &|| g.dwconv(&v(kernel).flip_kernel()?, grid))?;
                put(kernel, &|| {
                    let k = self.value(kernel).shape()[0];
                    v(x).dwconv_kernel_grad(g, grid, k)
                })?;
            }
            DwKernelGrad { x, g: up, grid, .. } => {
                put(x, &|| v(up).dwconv(&g.flip_kernel()?, grid))?;
                put(up, &|| v(x).dwconv(g, grid))?;
            }
            FlipKernel(a) => put(a, &|| g.flip_kernel())?,
        }
        Ok(res)
    }
}

fn row_sums(t: &Tensor) -> Result<Tensor> {
    let (n, c) = t.dims2()?;
    Tensor::new(&[n, 1], (0..n).map(|i| t.data()[i * c..(i + 1) * c].iter().sum()).collect())
}

fn col_sums(t: &Tensor) -> Result<Tensor> {
    let (n, c) = t.dims2()?;
    let mut out = vec![0.0; c];
    for i in 0..n {
        for (o, x) in out.iter_mut().zip(&t.data()[i * c..(i + 1) * c]) {
            *o += x;
        }
    }
    Tensor::new(&[1, c], out)
}

pub(crate) fn softmax_values(x: &Tensor, scale: f64, mask: Option<&[bool]>) -> Result<Tensor> {
    let (n, c) = x.dims2()?;
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        let row = &x.data()[i * c..(i + 1) * c];
        let keep = |j: usize| mask.is_none_or(|m| m[i * c + j]);
        let max = (0..c)
            .filter(|&j| keep(j))
            .map(|j| scale * row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(dim_err(format!("softmax row {i} has no unmasked entries")));
        }
        let o = &mut out[i * c..(i + 1) * c];
        let mut total = 0.0;
        for j in 0..c {
            if keep(j) {
                o[j] = (scale * row[j] - max).exp();
                total += o[j];
            }
        }
        for e in o.iter_mut() {
            *e /= total;
        }
    }
    Tensor::new(&[n, c], out)
}

impl Var {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Gradient populated by [`Tape::backward`].
    pub fn grad(&self) -> Option<Tensor> {
        self.tape.nodes.borrow()[self.id]
            .grad
            .as_ref()
            .map(|g| (**g).clone())
    }

    fn binary(&self, other: &Var, op: Op, f: impl Fn(&Tensor, &Tensor) -> Result<Tensor>) -> Result<Var> {
        self.tape.same(&other.tape)?;
        let value = f(&self.value(), &other.value())?;
        Ok(self.tape.push(value, op))
    }

    fn unary(&self, op: Op, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Var> {
        let value = f(&self.value())?;
        Ok(self.tape.push(value, op))
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.binary(other, Op::MatMul(self.id, other.id), |a, b| a.matmul(b))
    }

    pub fn t(&self) -> Result<Var> {
        self.unary(Op::Transpose(self.id), |a| a.transpose())
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary(other, Op::Add(self.id, other.id), |a, b| a.add(b))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary(other, Op::Sub(self.id, other.id), |a, b| a.sub(b))
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary(other, Op::Mul(self.id, other.id), |a, b| a.mul(b))
    }

    pub fn div(&self, other: &Var) -> Result<Var> {
        self.binary(other, Op::Div(self.id, other.id), |a, b| a.zip_map(b, |x, y| x / y))
    }

    pub fn scale(&self, s: f64) -> Var {
        let value = self.value().scale(s);
        self.tape.push(value, Op::Scale(self.id, s))
    }

    pub fn add_scalar(&self, s: f64) -> Var {
        let value = self.value().map(|x| x + s);
        self.tape.push(value, Op::AddScalar(self.id))
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn square(&self) -> Result<Var> {
        self.mul(self)
    }

    pub fn sqrt(&self) -> Var {
        let value = self.value().map(f64::sqrt);
        self.tape.push(value, Op::Sqrt(self.id))
    }

    pub fn activation(&self, kind: ActivationKind) -> Var {
        self.activation_derivative(kind, 0)
    }

    /// Elementwise `order`-th derivative of `kind` (0 = the activation itself).
    pub fn activation_derivative(&self, kind: ActivationKind, order: u8) -> Var {
        let value = self.value().map(|x| kind.derivative(x, order));
        self.tape.push(
            value,
            Op::Activation {
                x: self.id,
                kind,
                order,
            },
        )
    }

    /// Row-wise softmax of `scale · self`.
    pub fn softmax_rows(&self, scale: f64) -> Result<Var> {
        let value = softmax_values(&self.value(), scale, None)?;
        Ok(self.tape.push(
            value,
            Op::Softmax {
                x: self.id,
                scale,
            },
        ))
    }

    /// Row-wise softmax restricted to entries where `mask` is true; masked
    /// entries come out as exactly zero.
    pub fn masked_softmax_rows(&self, scale: f64, mask: &[bool]) -> Result<Var> {
        if mask.len() != self.value().len() {
            return Err(dim_err("mask length differs from input"));
        }
        let value = softmax_values(&self.value(), scale, Some(mask))?;
        Ok(self.tape.push(
            value,
            Op::Softmax {
                x: self.id,
                scale,
            },
        ))
    }

    /// `N×C → N×1`.
    pub fn row_sum(&self) -> Result<Var> {
        self.unary(Op::RowSum(self.id), row_sums)
    }

    /// `N×C → 1×C`.
    pub fn col_sum(&self) -> Result<Var> {
        self.unary(Op::ColSum(self.id), col_sums)
    }

    /// `N×1 → N×n`.
    pub fn repeat_cols(&self, n: usize) -> Result<Var> {
        self.unary(Op::RepeatCols(self.id), |a| {
            let (r, c) = a.dims2()?;
            if c != 1 {
                return Err(dim_err("repeat_cols needs a column vector"));
            }
            Tensor::new(&[r, n], a.data().iter().flat_map(|&x| std::iter::repeat_n(x, n)).collect())
        })
    }

    /// `1×C → n×C`.
    pub fn repeat_rows(&self, n: usize) -> Result<Var> {
        self.unary(Op::RepeatRows(self.id), |a| {
            let (r, c) = a.dims2()?;
            if r != 1 {
                return Err(dim_err("repeat_rows needs a row vector"));
            }
            Tensor::new(&[n, c], a.data().repeat(n))
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        self.unary(Op::Reshape(self.id), |a| a.reshape(shape))
    }

    /// Sum of all entries as a 1×1 value.
    pub fn sum(&self) -> Result<Var> {
        self.unary(Op::SumAll(self.id), |a| {
            a.dims2()?;
            Ok(Tensor::scalar(a.sum()))
        })
    }

    pub fn mean(&self) -> Result<Var> {
        let n = self.value().len() as f64;
        Ok(self.sum()?.scale(1.0 / n))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var> {
        self.unary(Op::SliceCols { x: self.id, start }, |a| a.slice_cols(start, len))
    }

    /// Places `self` at column `start` of a zero matrix `total` columns wide.
    pub fn pad_cols(&self, start: usize, total: usize) -> Result<Var> {
        self.unary(
            Op::PadCols {
                x: self.id,
                start,
            },
            |a| {
                let (n, c) = a.dims2()?;
                if start + c > total {
                    return Err(dim_err("pad_cols target too narrow"));
                }
                let mut out = vec![0.0; n * total];
                for i in 0..n {
                    out[i * total + start..i * total + start + c].copy_from_slice(a.row(i));
                }
                Tensor::new(&[n, total], out)
            },
        )
    }

    pub fn concat_cols(parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| dim_err("nothing to concatenate"))?;
        let total: usize = parts.iter().map(|p| p.value().cols()).sum();
        let mut start = 0;
        let mut acc: Option<Var> = None;
        for p in parts {
            first.tape.same(&p.tape)?;
            let width = p.value().cols();
            let padded = p.pad_cols(start, total)?;
            acc = Some(match acc {
                Some(a) => a.add(&padded)?,
                None => padded,
            });
            start += width;
        }
        Ok(acc.unwrap())
    }

    /// Depthwise convolution of `N×C` tokens laid out on `grid`.
    pub fn dwconv(&self, kernel: &Var, grid: Grid) -> Result<Var> {
        self.binary(
            kernel,
            Op::DwConv {
                x: self.id,
                kernel: kernel.id,
                grid,
            },
            |x, k| conv::dwconv_tokens(x, k, grid),
        )
    }

    fn dwconv_kernel_grad(&self, g: &Var, grid: Grid, k: usize) -> Result<Var> {
        self.binary(
            g,
            Op::DwKernelGrad {
                x: self.id,
                g: g.id,
                grid,
            },
            |x, g| conv::dwconv_kernel_grad(x, g, grid, k),
        )
    }

    fn flip_kernel(&self) -> Result<Var> {
        self.unary(Op::FlipKernel(self.id), conv::flip_kernel)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_populates_each_leaf() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::row_vector(&[1.0, 2.0]).unwrap());
        let c = tape.constant(Tensor::row_vector(&[3.0, 4.0]).unwrap());
        let y = x.mul(&x).unwrap().add(&x.mul(&c).unwrap()).unwrap().sum().unwrap();
        tape.backward(&y).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[5.0, 8.0]);
        assert!(c.grad().is_none());
        assert!(tape.backward(&y).is_err());
    }

    #[test]
    fn second_order_through_grad() {
        // f(x) = Σ x³; ∇f = 3x²; Σ ∇f has gradient 6x.
        let tape = Tape::new();
        let x = tape.leaf(Tensor::row_vector(&[1.0, -2.0, 0.5]).unwrap());
        let f = x.mul(&x).unwrap().mul(&x).unwrap().sum().unwrap();
        let g = tape.grad(&f, &[x.clone()], None).unwrap().remove(0);
        assert_eq!(g.value().data(), &[3.0, 12.0, 0.75]);
        let gg = tape.grad_values(&g.sum().unwrap(), &[x], None).unwrap();
        assert_eq!(gg[0].data(), &[6.0, -12.0, 3.0]);
    }

    #[test]
    fn grad_of_unrelated_var_is_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = tape.leaf(Tensor::scalar(5.0));
        let f = x.square().unwrap().sum().unwrap();
        let gs = tape.grad_values(&f, &[x, y], None).unwrap();
        assert_eq!(gs[0].data(), &[4.0]);
        assert_eq!(gs[1].data(), &[0.0]);
    }

    #[test]
    fn grad_values_leaves_tape_unchanged() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2, 2], 0.3));
        let f = x.activation(ActivationKind::Silu).sum().unwrap();
        let before = tape.len();
        tape.grad_values(&f, &[x], None).unwrap();
        assert_eq!(tape.len(), before);
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap());
        let y = x
            .masked_softmax_rows(1.0, &[true, false, true])
            .unwrap()
            .value();
        assert_eq!(y.data()[1], 0.0);
        assert!((y.data()[0] + y.data()[2] - 1.0).abs() < 1e-15);
    }

}
