//! Forward and backward kernels on raw NHWC buffers.
//!
//! Convolution lowers each sample to a column matrix (im2col) and runs one
//! GEMM against the `[F·F·Cin, Cout]` kernel matrix, so the output comes out
//! directly in NHWC order. Batches are processed sample by sample with a
//! fixed reduction order, which keeps results bit-reproducible.

use crate::geometry::ConvGeometry;
use crate::scalar::{gemm, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDims {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub geom: ConvGeometry,
}

impl ConvDims {
    fn col_width(&self) -> usize {
        self.geom.kernel_size * self.geom.kernel_size * self.geom.in_channels
    }

    fn out_positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_len(&self) -> usize {
        self.in_h * self.in_w * self.geom.in_channels
    }

    fn out_len(&self) -> usize {
        self.out_positions() * self.geom.out_channels
    }

    /// 1×1, stride 1, no padding: the input already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.geom.kernel_size == 1 && self.geom.stride == 1 && self.geom.padding == 0
    }
}

fn im2col<T: Scalar>(x: &[T], d: &ConvDims, col: &mut [T]) {
    let g = &d.geom;
    let (f, c, s, p) = (g.kernel_size, g.in_channels, g.stride, g.padding as isize);
    let width = d.col_width();
    for oy in 0..d.out_h {
        for ox in 0..d.out_w {
            let row = &mut col[(oy * d.out_w + ox) * width..][..width];
            for ky in 0..f {
                let iy = (oy * s + ky) as isize - p;
                let dst = &mut row[ky * f * c..][..f * c];
                if iy < 0 || iy >= d.in_h as isize {
                    dst.fill(T::zero());
                    continue;
                }
                for kx in 0..f {
                    let ix = (ox * s + kx) as isize - p;
                    let cell = &mut dst[kx * c..][..c];
                    if ix < 0 || ix >= d.in_w as isize {
                        cell.fill(T::zero());
                    } else {
                        let src = (iy as usize * d.in_w + ix as usize) * c;
                        cell.copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(col: &[T], d: &ConvDims, dx: &mut [T]) {
    let g = &d.geom;
    let (f, c, s, p) = (g.kernel_size, g.in_channels, g.stride, g.padding as isize);
    let width = d.col_width();
    for oy in 0..d.out_h {
        for ox in 0..d.out_w {
            let row = &col[(oy * d.out_w + ox) * width..][..width];
            for ky in 0..f {
                let iy = (oy * s + ky) as isize - p;
                if iy < 0 || iy >= d.in_h as isize {
                    continue;
                }
                for kx in 0..f {
                    let ix = (ox * s + kx) as isize - p;
                    if ix < 0 || ix >= d.in_w as isize {
                        continue;
                    }
                    let dst = (iy as usize * d.in_w + ix as usize) * c;
                    let src = &row[(ky * f + kx) * c..][..c];
                    for (o, &v) in dx[dst..dst + c].iter_mut().zip(src) {
                        *o = *o + v;
                    }
                }
            }
        }
    }
}

/// Cross-correlation with zero padding. `kernel` is `[F, F, Cin, Cout]`.
pub fn conv2d_forward<T: Scalar>(x: &[T], kernel: &[T], bias: &[T], d: &ConvDims) -> Vec<T> {
    let cout = d.geom.out_channels;
    let rows = d.out_positions();
    let width = d.col_width();
    let mut out = vec![T::zero(); d.batch * d.out_len()];
    let mut col = if d.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * width] };
    for b in 0..d.batch {
        let xb = &x[b * d.in_len()..][..d.in_len()];
        let ob = &mut out[b * d.out_len()..][..d.out_len()];
        for r in ob.chunks_exact_mut(cout) {
            r.copy_from_slice(bias);
        }
        let lhs: &[T] = if d.is_pointwise() {
            xb
        } else {
            im2col(xb, d, &mut col);
            &col
        };
        gemm(rows, width, cout, (lhs, width, 1), (kernel, cout, 1), T::one(), ob);
    }
    out
}

/// Gradients of [`conv2d_forward`]. Each output is only computed when asked for.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    kernel: &[T],
    dout: &[T],
    d: &ConvDims,
    mut dx: Option<&mut [T]>,
    mut dkernel: Option<&mut [T]>,
    mut dbias: Option<&mut [T]>,
) {
    let cout = d.geom.out_channels;
    let rows = d.out_positions();
    let width = d.col_width();
    let mut col = if d.is_pointwise() || dkernel.is_none() { Vec::new() } else { vec![T::zero(); rows * width] };
    let mut dcol = if d.is_pointwise() || dx.is_none() { Vec::new() } else { vec![T::zero(); rows * width] };
    for b in 0..d.batch {
        let xb = &x[b * d.in_len()..][..d.in_len()];
        let gb = &dout[b * d.out_len()..][..d.out_len()];
        if let Some(db) = dbias.as_deref_mut() {
            for r in gb.chunks_exact(cout) {
                for (acc, &v) in db.iter_mut().zip(r) {
                    *acc = *acc + v;
                }
            }
        }
        if let Some(dk) = dkernel.as_deref_mut() {
            let lhs: &[T] = if d.is_pointwise() {
                xb
            } else {
                im2col(xb, d, &mut col);
                &col
            };
            // dK[width×cout] += colᵀ · dout_b
            gemm(width, rows, cout, (lhs, 1, width), (gb, cout, 1), T::one(), dk);
        }
        if let Some(dxs) = dx.as_deref_mut() {
            let dxb = &mut dxs[b * d.in_len()..][..d.in_len()];
            if d.is_pointwise() {
                gemm(rows, cout, width, (gb, cout, 1), (kernel, 1, cout), T::one(), dxb);
            } else {
                gemm(rows, cout, width, (gb, cout, 1), (kernel, 1, cout), T::zero(), &mut dcol);
                col2im_add(&dcol, d, dxb);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolDims {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub channels: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub window: usize,
    pub stride: usize,
}

/// Max pooling. Returns the pooled values and, per output, the flat input
/// index of the first maximum in row-major window order.
pub fn maxpool_forward<T: Scalar>(x: &[T], d: &PoolDims) -> (Vec<T>, Vec<u32>) {
    let c = d.channels;
    let n = d.batch * d.out_h * d.out_w * c;
    let mut out = Vec::with_capacity(n);
    let mut arg = Vec::with_capacity(n);
    for b in 0..d.batch {
        let base = b * d.in_h * d.in_w * c;
        for oy in 0..d.out_h {
            for ox in 0..d.out_w {
                for ch in 0..c {
                    let mut best_i = base + ((oy * d.stride) * d.in_w + ox * d.stride) * c + ch;
                    let mut best = x[best_i];
                    for ky in 0..d.window {
                        for kx in 0..d.window {
                            let i = base + ((oy * d.stride + ky) * d.in_w + ox * d.stride + kx) * c + ch;
                            if x[i] > best {
                                best = x[i];
                                best_i = i;
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_i as u32);
                }
            }
        }
    }
    (out, arg)
}

pub fn maxpool_backward<T: Scalar>(argmax: &[u32], dout: &[T], dx: &mut [T]) {
    for (&i, &g) in argmax.iter().zip(dout) {
        dx[i as usize] = dx[i as usize] + g;
    }
}

/// `x[B×N] · w[N×M] + b`.
pub fn dense_forward<T: Scalar>(x: &[T], w: &[T], bias: &[T], batch: usize, n: usize, m: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(batch * m);
    for _ in 0..batch {
        out.extend_from_slice(bias);
    }
    gemm(batch, n, m, (x, n, 1), (w, m, 1), T::one(), &mut out);
    out
}

#[allow(clippy::too_many_arguments)]
pub fn dense_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dout: &[T],
    batch: usize,
    n: usize,
    m: usize,
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    if let Some(dx) = dx {
        gemm(batch, m, n, (dout, m, 1), (w, 1, m), T::one(), dx);
    }
    if let Some(dw) = dw {
        gemm(n, batch, m, (x, 1, n), (dout, m, 1), T::one(), dw);
    }
    if let Some(db) = db {
        for r in dout.chunks_exact(m) {
            for (acc, &v) in db.iter_mut().zip(r) {
                *acc = *acc + v;
            }
        }
    }
}

/// Per-channel batch statistics over every leading position of a
/// channels-last buffer: returns `(mean, biased variance)`.
pub fn channel_moments<T: Scalar>(x: &[T], channels: usize) -> (Vec<T>, Vec<T>) {
    let count = x.len() / channels;
    let inv = T::one() / T::from_usize(count).unwrap();
    let mut mean = vec![T::zero(); channels];
    for row in x.chunks_exact(channels) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m = *m + v;
        }
    }
    mean.iter_mut().for_each(|m| *m = *m * inv);
    let mut var = vec![T::zero(); channels];
    for row in x.chunks_exact(channels) {
        for ((acc, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v - m;
            *acc = *acc + d * d;
        }
    }
    var.iter_mut().for_each(|v| *v = *v * inv);
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(h: usize, w: usize, g: ConvGeometry) -> ConvDims {
        ConvDims {
            batch: 1,
            in_h: h,
            in_w: w,
            out_h: g.output_dim(h).unwrap(),
            out_w: g.output_dim(w).unwrap(),
            geom: g,
        }
    }

    #[test]
    fn ones_kernel_sums_window() {
        let g = ConvGeometry::new(3, 0, 1, 1, 1).unwrap();
        let d = dims(5, 5, g);
        let out = conv2d_forward(&[1.0f32; 25], &[1.0; 9], &[0.0], &d);
        assert_eq!(out, vec![9.0; 9]);
    }

    #[test]
    fn padding_counts_only_real_pixels() {
        let g = ConvGeometry::new(3, 1, 1, 1, 1).unwrap();
        let d = dims(3, 3, g);
        let out = conv2d_forward(&[1.0f64; 9], &[1.0; 9], &[0.5], &d);
        assert_eq!(out, vec![4.5, 6.5, 4.5, 6.5, 9.5, 6.5, 4.5, 6.5, 4.5]);
    }

    #[test]
    fn maxpool_ties_pick_first() {
        let d = PoolDims { batch: 1, in_h: 2, in_w: 2, channels: 1, out_h: 1, out_w: 1, window: 2, stride: 2 };
        let (v, a) = maxpool_forward(&[3.0f32, 3.0, 1.0, 3.0], &d);
        assert_eq!(v, vec![3.0]);
        assert_eq!(a, vec![0]);
    }

    #[test]
    fn moments_of_constant_channel() {
        let (m, v) = channel_moments(&[2.0f64, 1.0, 2.0, 3.0, 2.0, 5.0], 2);
        assert_eq!(m, vec![2.0, 3.0]);
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 8.0 / 3.0).abs() < 1e-12);
    }
}
