//! Tape gradients of every differentiable op against central differences.

use rand::Rng;
use serde::Serialize;

use crate::activation::ActivationKind;
use crate::error::Result;
use crate::fd::finite_diff_grad;
use crate::rng::derived;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

type Build = fn(&Tape, &Var, &Var, &Var) -> Var;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpGradCheck {
    pub op: String,
    pub trials: usize,
    pub max_rel_err: f64,
}

fn probe_weights(out: &Tensor) -> Tensor {
    let data = (0..out.len()).map(|i| ((i * 37 % 17) as f64) * 0.13 - 1.0).collect();
    Tensor::new(out.shape(), data).expect("same length")
}

fn catalog() -> Vec<(&'static str, Vec<usize>, Build)> {
    vec![
        ("matmul", vec![3, 4], |t, x, _, _| {
            let w = t.constant(Tensor::new(&[4, 5], (0..20).map(|i| ((i * 7) % 11) as f64 * 0.1 - 0.5).collect()).unwrap());
            x.matmul(&w).unwrap()
        }),
        ("matmul_rhs", vec![4, 3], |t, x, _, _| {
            let a = t.constant(Tensor::new(&[2, 4], (0..8).map(|i| i as f64 * 0.1 - 0.3).collect()).unwrap());
            a.matmul(x).unwrap()
        }),
        ("transpose", vec![3, 4], |_, x, _, _| x.t().unwrap()),
        ("add", vec![3, 4], |_, x, y, _| x.add(y).unwrap()),
        ("sub", vec![3, 4], |_, x, y, _| y.sub(x).unwrap()),
        ("mul", vec![3, 4], |_, x, y, _| x.mul(y).unwrap()),
        ("div", vec![3, 4], |_, x, _, p| x.div(p).unwrap()),
        ("div_denominator", vec![3, 4], |_, x, _, p| p.div(&x.square().unwrap().add_scalar(1.0)).unwrap()),
        ("scale", vec![3, 4], |_, x, _, _| x.scale(-1.3)),
        ("add_scalar", vec![3, 4], |_, x, _, _| x.add_scalar(0.4)),
        ("sqrt", vec![3, 4], |_, x, _, _| x.square().unwrap().add_scalar(0.5).sqrt()),
        ("silu", vec![3, 4], |_, x, _, _| x.activation(ActivationKind::Silu)),
        ("gelu", vec![3, 4], |_, x, _, _| x.activation(ActivationKind::Gelu)),
        ("elu_plus_one", vec![3, 4], |_, x, _, _| x.activation(ActivationKind::EluPlusOne)),
        ("silu_d1", vec![3, 4], |_, x, _, _| x.activation_derivative(ActivationKind::Silu, 1)),
        ("silu_d2", vec![3, 4], |_, x, _, _| x.activation_derivative(ActivationKind::Silu, 2)),
        ("gelu_d2", vec![3, 4], |_, x, _, _| x.activation_derivative(ActivationKind::Gelu, 2)),
        ("softmax", vec![3, 4], |_, x, _, _| x.softmax_rows(0.7).unwrap()),
        ("masked_softmax", vec![3, 4], |_, x, _, _| {
            let mask: Vec<bool> = (0..12).map(|i| i % 4 != 1).collect();
            x.masked_softmax_rows(1.1, &mask).unwrap()
        }),
        ("row_sum", vec![3, 4], |_, x, _, _| x.row_sum().unwrap()),
        ("col_sum", vec![3, 4], |_, x, _, _| x.col_sum().unwrap()),
        ("repeat", vec![3, 4], |_, x, _, _| {
            x.row_sum().unwrap().repeat_cols(2).unwrap().col_sum().unwrap().repeat_rows(3).unwrap()
        }),
        ("sum", vec![3, 4], |_, x, _, _| x.sum().unwrap()),
        ("mean", vec![3, 4], |_, x, _, _| x.mean().unwrap()),
        ("neg", vec![3, 4], |_, x, _, _| x.neg()),
        ("square", vec![3, 4], |_, x, _, _| x.square().unwrap()),
        ("reshape", vec![3, 4], |_, x, _, _| x.reshape(&[2, 6]).unwrap()),
        ("slice_pad", vec![3, 4], |_, x, _, _| x.slice_cols(1, 2).unwrap().pad_cols(2, 5).unwrap()),
        ("concat", vec![3, 4], |_, x, y, _| Var::concat_cols(&[x.clone(), y.clone()]).unwrap()),
        ("dwconv_input", vec![12, 4], |t, x, _, _| {
            let k = t.constant(Tensor::new(&[3, 3, 4], (0..36).map(|i| ((i * 7) % 11) as f64 * 0.1 - 0.5).collect()).unwrap());
            x.dwconv(&k, (3, 4)).unwrap()
        }),
        ("dwconv_kernel", vec![3, 3, 4], |t, x, _, _| {
            let tokens = t.constant(Tensor::new(&[12, 4], (0..48).map(|i| ((i * 5) % 13) as f64 * 0.1 - 0.6).collect()).unwrap());
            tokens.dwconv(x, (3, 4)).unwrap()
        }),
        // Second-order path: differentiate the kernel gradient itself.
        ("dwconv_kernel_grad", vec![12, 4], |t, x, _, _| {
            let k = t.leaf(Tensor::new(&[3, 3, 4], (0..36).map(|i| ((i * 3) % 7) as f64 * 0.1 - 0.3).collect()).unwrap());
            let y = x.dwconv(&k, (3, 4)).unwrap();
            let loss = y.square().unwrap().sum().unwrap();
            t.grad(&loss, &[k], None).unwrap().remove(0)
        }),
        ("softmax_grad", vec![3, 4], |t, x, _, _| {
            let y = x.softmax_rows(1.0).unwrap();
            let w = t.constant(Tensor::new(&[3, 4], (0..12).map(|i| i as f64 * 0.2 - 1.0).collect()).unwrap());
            let loss = y.mul(&w).unwrap().square().unwrap().sum().unwrap();
            t.grad(&loss, &[x.clone()], None).unwrap().remove(0)
        }),
    ]
}

/// Names of the ops covered by [`op_gradient_sweep`].
pub fn op_names() -> Vec<&'static str> {
    catalog().into_iter().map(|(n, _, _)| n).collect()
}

/// For each op, the worst relative error between the tape gradient and
/// central differences (step `h`) of a fixed linear functional of the
/// output, over `trials` random inputs.
pub fn op_gradient_sweep(trials: usize, seed: u64, h: f64) -> Result<Vec<OpGradCheck>> {
    catalog()
        .into_iter()
        .enumerate()
        .map(|(i, (name, shape, build))| {
            let mut worst = 0.0f64;
            for trial in 0..trials {
                let mut r = derived(seed, (i * 1000 + trial) as u64);
                let x0 = Tensor::randn(&shape, 1.0, &mut r);
                let y0 = Tensor::randn(&shape, 1.0, &mut r);
                let p0 = Tensor::randn(&shape, 0.3, &mut r).map(|v| v.abs() + 0.5);
                let _ = r.random::<u8>();
                let run = |x: &Tensor| -> Result<(Tape, Var, Var)> {
                    let t = Tape::new();
                    let xv = t.leaf(x.clone());
                    let yv = t.constant(y0.clone());
                    let pv = t.constant(p0.clone());
                    let out = build(&t, &xv, &yv, &pv);
                    let out = match out.shape().as_slice() {
                        &[a, b, c] => out.reshape(&[a * b, c])?,
                        _ => out,
                    };
                    let w = t.constant(probe_weights(&out.value()));
                    let loss = out.mul(&w)?.sum()?;
                    Ok((t, xv, loss))
                };
                let f = |x: &Tensor| run(x).map_or(f64::NAN, |(_, _, l)| l.value().data()[0]);
                let (tape, xv, loss) = run(&x0)?;
                let g = tape.grad_values(&loss, &[xv], None)?.remove(0);
                let fd = finite_diff_grad(f, &x0, h)?;
                worst = worst.max(g.rel_err(&fd, 1e-8)?);
            }
            Ok(OpGradCheck {
                op: name.to_string(),
                trials,
                max_rel_err: worst,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_matches_finite_differences() {
        for c in op_gradient_sweep(20, 0, 1e-5).unwrap() {
            assert!(c.max_rel_err < 1e-5, "{}: {:e}", c.op, c.max_rel_err);
        }
    }
}
