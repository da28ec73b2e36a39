//! Depthwise 2D convolution over a token grid with zero "same" padding.
//!
//! Tokens are stored as an `N×C` matrix in row-major grid order
//! (`token = row * W + col`); kernels are `k×k×C` with odd `k`.

use crate::error::{config_err, dim_err, Result};
use crate::tensor::Tensor;

/// Grid extents `(H, W)`.
pub type Grid = (usize, usize);

pub(crate) fn kernel_size(kernel: &Tensor, channels: usize) -> Result<usize> {
    match kernel.shape() {
        &[k, k2, c] if k == k2 && c == channels => {
            if k % 2 == 0 {
                Err(config_err(format!("kernel size {k} must be odd")))
            } else {
                Ok(k)
            }
        }
        s => Err(dim_err(format!(
            "kernel shape {s:?} is not k×k×{channels}"
        ))),
    }
}

pub(crate) fn check_grid(tokens: &Tensor, grid: Grid) -> Result<(usize, usize)> {
    let (n, c) = tokens.dims2()?;
    if grid.0 * grid.1 != n {
        return Err(dim_err(format!(
            "grid {}×{} does not hold {n} tokens",
            grid.0, grid.1
        )));
    }
    Ok((n, c))
}

/// `out[i,j,c] = Σ_ab kernel[a,b,c] · x[i+a−p, j+b−p, c]`, p = k/2.
pub fn dwconv_tokens(x: &Tensor, kernel: &Tensor, grid: Grid) -> Result<Tensor> {
    let (n, c) = check_grid(x, grid)?;
    let k = kernel_size(kernel, c)?;
    let (h, w) = grid;
    let p = (k / 2) as isize;
    let xd = x.data();
    let kd = kernel.data();
    let mut out = vec![0.0; n * c];
    for i in 0..h {
        for j in 0..w {
            let o = &mut out[(i * w + j) * c..(i * w + j + 1) * c];
            for a in 0..k {
                let si = i as isize + a as isize - p;
                if si < 0 || si >= h as isize {
                    continue;
                }
                for b in 0..k {
                    let sj = j as isize + b as isize - p;
                    if sj < 0 || sj >= w as isize {
                        continue;
                    }
                    let src = (si as usize * w + sj as usize) * c;
                    let kk = (a * k + b) * c;
                    for ch in 0..c {
                        o[ch] += kd[kk + ch] * xd[src + ch];
                    }
                }
            }
        }
    }
    Tensor::new(&[n, c], out)
}

/// Gradient of `Σ g ⊙ dwconv(x, ·)` with respect to the kernel:
/// `out[a,b,c] = Σ_ij g[i,j,c] · x[i+a−p, j+b−p, c]`.
pub fn dwconv_kernel_grad(x: &Tensor, g: &Tensor, grid: Grid, k: usize) -> Result<Tensor> {
    let (_, c) = check_grid(x, grid)?;
    x.check_same_shape(g)?;
    if k % 2 == 0 {
        return Err(config_err(format!("kernel size {k} must be odd")));
    }
    let (h, w) = grid;
    let p = (k / 2) as isize;
    let xd = x.data();
    let gd = g.data();
    let mut out = vec![0.0; k * k * c];
    for a in 0..k {
        for b in 0..k {
            let o = &mut out[(a * k + b) * c..(a * k + b + 1) * c];
            for i in 0..h {
                let si = i as isize + a as isize - p;
                if si < 0 || si >= h as isize {
                    continue;
                }
                for j in 0..w {
                    let sj = j as isize + b as isize - p;
                    if sj < 0 || sj >= w as isize {
                        continue;
                    }
                    let src = (si as usize * w + sj as usize) * c;
                    let dst = (i * w + j) * c;
                    for ch in 0..c {
                        o[ch] += gd[dst + ch] * xd[src + ch];
                    }
                }
            }
        }
    }
    Tensor::new(&[k, k, c], out)
}

/// Rotates each channel's k×k kernel by 180°.
pub fn flip_kernel(kernel: &Tensor) -> Result<Tensor> {
    let (k, c) = match kernel.shape() {
        &[k, k2, c] if k == k2 => (k, c),
        s => return Err(dim_err(format!("kernel shape {s:?} is not k×k×C"))),
    };
    let kd = kernel.data();
    let mut out = vec![0.0; kd.len()];
    for a in 0..k {
        for b in 0..k {
            let src = ((k - 1 - a) * k + (k - 1 - b)) * c;
            out[(a * k + b) * c..(a * k + b + 1) * c].copy_from_slice(&kd[src..src + c]);
        }
    }
    Tensor::new(&[k, k, c], out)
}

/// Depthwise convolution on an `H×W×C` feature map; output has the input's shape.
pub fn depthwise_conv2d(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (h, w, c) = match x.shape() {
        &[h, w, c] => (h, w, c),
        s => return Err(dim_err(format!("expected H×W×C input, got {s:?}"))),
    };
    let tokens = x.reshape(&[h * w, c])?;
    dwconv_tokens(&tokens, kernel, (h, w))?.reshape(&[h, w, c])
}

/// A k×k×C kernel that is 1 at the centre of every channel.
pub fn delta_kernel(k: usize, channels: usize) -> Tensor {
    let mut t = Tensor::zeros(&[k, k, channels]);
    let centre = (k / 2) * k + k / 2;
    for ch in 0..channels {
        t.data_mut()[centre * channels + ch] = 1.0;
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Sliding-window oracle working directly on the H×W×C layout.
    fn sliding_window(x: &Tensor, kernel: &Tensor) -> Tensor {
        let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let k = kernel.shape()[0];
        let half = k as i64 / 2;
        let mut out = Tensor::zeros(&[h, w, c]);
        for i in 0..h as i64 {
            for j in 0..w as i64 {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for di in -half..=half {
                        for dj in -half..=half {
                            let (si, sj) = (i + di, j + dj);
                            if si < 0 || sj < 0 || si >= h as i64 || sj >= w as i64 {
                                continue;
                            }
                            let kv = kernel.data()
                                [(((di + half) as usize) * k + (dj + half) as usize) * c + ch];
                            acc += kv * x.data()[((si as usize) * w + sj as usize) * c + ch];
                        }
                    }
                    out.data_mut()[((i as usize) * w + j as usize) * c + ch] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[4, 5, 3], 1.0, &mut rng);
        assert_eq!(depthwise_conv2d(&x, &delta_kernel(3, 3)).unwrap(), x);
    }

    #[test]
    fn zero_kernel_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[4, 4, 2], 1.0, &mut rng);
        let out = depthwise_conv2d(&x, &Tensor::zeros(&[3, 3, 2])).unwrap();
        assert_eq!(out.max_abs(), 0.0);
    }

    #[test]
    fn matches_sliding_window_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[4, 4, 1], 1.0, &mut rng);
        let kern = Tensor::randn(&[3, 3, 1], 1.0, &mut rng);
        assert_eq!(depthwise_conv2d(&x, &kern).unwrap(), sliding_window(&x, &kern));

        let x = Tensor::randn(&[5, 3, 4], 1.0, &mut rng);
        let kern = Tensor::randn(&[5, 5, 4], 1.0, &mut rng);
        let diff = depthwise_conv2d(&x, &kern)
            .unwrap()
            .max_abs_diff(&sliding_window(&x, &kern))
            .unwrap();
        assert!(diff < 1e-12);
    }

    #[test]
    fn even_kernel_rejected() {
        let x = Tensor::zeros(&[2, 2, 1]);
        let err = depthwise_conv2d(&x, &Tensor::zeros(&[2, 2, 1])).unwrap_err();
        assert!(matches!(err, crate::Error::Config(_)));
    }

    #[test]
    fn flip_is_an_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let kern = Tensor::randn(&[3, 3, 2], 1.0, &mut rng);
        assert_eq!(flip_kernel(&flip_kernel(&kern).unwrap()).unwrap(), kern);
    }
}
