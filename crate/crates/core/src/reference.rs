//! Direct, loop-per-index reference kernels.
//!
//! These are deliberately naive and share no code with [`crate::kernels`];
//! the self-check harness compares the optimized paths against them.

use crate::geometry::ConvGeometry;
use crate::scalar::Scalar;
use crate::tensor::{Result, Tensor, TensorError};

/// Direct convolution: one accumulation loop per output element.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>, g: &ConvGeometry) -> Result<Tensor<T>> {
    let &[b, h, w, c] = x.shape() else {
        return Err(TensorError::shape("reference conv2d", "input must be rank 4"));
    };
    if kernel.shape() != g.kernel_shape() || c != g.in_channels {
        return Err(TensorError::shape("reference conv2d", "kernel/input mismatch"));
    }
    let (oh, ow) = (g.output_dim(h)?, g.output_dim(w)?);
    let (f, co) = (g.kernel_size, g.out_channels);
    let xd = x.data();
    let kd = kernel.data();
    let mut out = vec![T::zero(); b * oh * ow * co];
    for n in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                for o in 0..co {
                    let mut acc = bias.data()[o];
                    for ky in 0..f {
                        for kx in 0..f {
                            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..c {
                                let xv = xd[((n * h + iy as usize) * w + ix as usize) * c + ci];
                                let kv = kd[((ky * f + kx) * c + ci) * co + o];
                                acc = acc + xv * kv;
                            }
                        }
                    }
                    out[((n * oh + oy) * ow + ox) * co + o] = acc;
                }
            }
        }
    }
    Tensor::new(vec![b, oh, ow, co], out)
}

/// Max over every window placement, scanning placements exhaustively.
pub fn maxpool2d<T: Scalar>(x: &Tensor<T>, window: usize, stride: usize) -> Result<Tensor<T>> {
    let &[b, h, w, c] = x.shape() else {
        return Err(TensorError::shape("reference maxpool2d", "input must be rank 4"));
    };
    let mut ys = Vec::new();
    let mut xs = Vec::new();
    let mut y = 0;
    while y + window <= h {
        ys.push(y);
        y += stride;
    }
    let mut xx = 0;
    while xx + window <= w {
        xs.push(xx);
        xx += stride;
    }
    if ys.is_empty() || xs.is_empty() {
        return Err(TensorError::shape("reference maxpool2d", "window larger than input"));
    }
    let mut out = Vec::with_capacity(b * ys.len() * xs.len() * c);
    for n in 0..b {
        for &y0 in &ys {
            for &x0 in &xs {
                for ch in 0..c {
                    let mut m = T::neg_infinity();
                    for dy in 0..window {
                        for dx in 0..window {
                            m = m.max(x.data()[((n * h + y0 + dy) * w + x0 + dx) * c + ch]);
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    Tensor::new(vec![b, ys.len(), xs.len(), c], out)
}

/// Counts valid window placements along one axis by enumeration.
pub fn count_placements(n: usize, kernel: usize, padding: usize, stride: usize) -> usize {
    let padded = n + 2 * padding;
    (0..padded).step_by(stride).filter(|&start| start + kernel <= padded).count()
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
        return Err(TensorError::shape("reference matmul", "rank-2 inputs required"));
    };
    if k != k2 {
        return Err(TensorError::shape("reference matmul", "inner dims differ"));
    }
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = T::zero();
            for p in 0..k {
                acc = acc + a.data()[i * k + p] * b.data()[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::new(vec![m, n], out)
}
