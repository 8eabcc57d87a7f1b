//! Batched numeric kernels behind the tape operations.
//!
//! Layouts: images `N x C x H x W`, conv weights `F x C x K x K`, dense
//! weights `in x out`. All loops over samples go through [`crate::par`].

use super::layer::Padding;
use crate::error::{CignError, Result};
use crate::par;
use crate::scalar::Scalar;

/// Samples per work unit in convolution kernels.
const CONV_CHUNK: usize = 4;
/// Rows per work unit in dense kernels.
const ROW_CHUNK: usize = 16;
/// Input features per work unit when forming dense weight gradients.
const FEATURE_CHUNK: usize = 64;

pub fn conv_output_size(n: usize, kernel: usize, stride: usize, padding: Padding) -> Option<usize> {
    if stride == 0 || kernel == 0 {
        return None;
    }
    match padding {
        Padding::Same => Some(n.div_ceil(stride)),
        Padding::Valid => (n >= kernel).then(|| (n - kernel) / stride + 1),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let oh = conv_output_size(height, kernel, stride, padding);
        let ow = conv_output_size(width, kernel, stride, padding);
        let (Some(out_height), Some(out_width)) = (oh, ow) else {
            return Err(CignError::shape("conv2d", format!("spatial >= {kernel}"), format!("{height}x{width}")));
        };
        let pad = |n: usize, o: usize| match padding {
            Padding::Valid => 0,
            Padding::Same => ((o - 1) * stride + kernel).saturating_sub(n) / 2,
        };
        Ok(ConvGeometry {
            channels,
            height,
            width,
            filters,
            kernel,
            stride,
            pad_top: pad(height, out_height),
            pad_left: pad(width, out_width),
            out_height,
            out_width,
        })
    }

    pub fn in_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn out_plane(&self) -> usize {
        self.out_height * self.out_width
    }

    pub fn out_len(&self) -> usize {
        self.filters * self.out_plane()
    }

    /// Rows of the unfolded patch matrix, `C * K * K`.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn source(&self, o: usize, k: usize, pad: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + k).checked_sub(pad)?;
        (pos < limit).then_some(pos)
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let plane = self.out_plane();
        let k = self.kernel;
        for c in 0..self.channels {
            let xc = &x[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.out_height {
                        let sy = self.source(oy, ky, self.pad_top, self.height);
                        for ox in 0..self.out_width {
                            let v = match (sy, self.source(ox, kx, self.pad_left, self.width)) {
                                (Some(y), Some(xx)) => xc[y * self.width + xx],
                                _ => T::zero(),
                            };
                            dst[oy * self.out_width + ox] = v;
                        }
                    }
                }
            }
        }
    }

    fn col2im_add<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let plane = self.out_plane();
        let k = self.kernel;
        for c in 0..self.channels {
            let dxc = &mut dx[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.out_height {
                        let Some(y) = self.source(oy, ky, self.pad_top, self.height) else {
                            continue;
                        };
                        for ox in 0..self.out_width {
                            if let Some(xx) = self.source(ox, kx, self.pad_left, self.width) {
                                dxc[y * self.width + xx] += src[oy * self.out_width + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv_forward<T: Scalar>(g: &ConvGeometry, x: &[T], weight: &[T], bias: &[T], n: usize) -> Vec<T> {
    let (in_len, out_len, plane, patch) = (g.in_len(), g.out_len(), g.out_plane(), g.patch_len());
    let mut out = vec![T::zero(); n * out_len];
    par::for_each_chunk(&mut out, CONV_CHUNK * out_len, |ci, chunk| {
        let mut cols = vec![T::zero(); patch * plane];
        for (j, y) in chunk.chunks_mut(out_len).enumerate() {
            let s = ci * CONV_CHUNK + j;
            g.im2col(&x[s * in_len..(s + 1) * in_len], &mut cols);
            for (f, row) in y.chunks_mut(plane).enumerate() {
                row.iter_mut().for_each(|v| *v = bias[f]);
            }
            T::gemm(g.filters, patch, plane, T::one(), weight, patch, 1, &cols, plane, 1, T::one(), y, plane, 1);
        }
    });
    out
}

/// Returns `(dx, dweight, dbias)`; `dx` is only formed when `want_dx`.
pub fn conv_backward<T: Scalar>(
    g: &ConvGeometry,
    x: &[T],
    weight: &[T],
    dout: &[T],
    n: usize,
    want_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (in_len, out_len, plane, patch) = (g.in_len(), g.out_len(), g.out_plane(), g.patch_len());
    let mut dx = vec![T::zero(); if want_dx { n * in_len } else { 0 }];
    let work = |ci: usize, dx_chunk: Option<&mut [T]>| {
        let mut dw = vec![T::zero(); g.filters * patch];
        let mut db = vec![T::zero(); g.filters];
        let mut cols = vec![T::zero(); patch * plane];
        let mut dcols = vec![T::zero(); if want_dx { patch * plane } else { 0 }];
        let first = ci * CONV_CHUNK;
        let count = CONV_CHUNK.min(n - first);
        let mut dx_chunk = dx_chunk;
        for j in 0..count {
            let s = first + j;
            let dy = &dout[s * out_len..(s + 1) * out_len];
            g.im2col(&x[s * in_len..(s + 1) * in_len], &mut cols);
            T::gemm(g.filters, plane, patch, T::one(), dy, plane, 1, &cols, 1, plane, T::one(), &mut dw, patch, 1);
            for (f, row) in dy.chunks(plane).enumerate() {
                db[f] += row.iter().copied().sum::<T>();
            }
            if let Some(dxc) = dx_chunk.as_deref_mut() {
                T::gemm(
                    patch,
                    g.filters,
                    plane,
                    T::one(),
                    weight,
                    1,
                    patch,
                    dy,
                    plane,
                    1,
                    T::zero(),
                    &mut dcols,
                    plane,
                    1,
                );
                g.col2im_add(&dcols, &mut dxc[j * in_len..(j + 1) * in_len]);
            }
        }
        (dw, db)
    };
    let partials: Vec<(Vec<T>, Vec<T>)> = if want_dx {
        par::map_chunks(&mut dx, CONV_CHUNK * in_len, |ci, c| work(ci, Some(c)))
    } else {
        par::map_indices(n.div_ceil(CONV_CHUNK), |ci| work(ci, None))
    };
    let mut dw = vec![T::zero(); g.filters * patch];
    let mut db = vec![T::zero(); g.filters];
    for (pw, pb) in partials {
        dw.iter_mut().zip(&pw).for_each(|(a, &b)| *a += b);
        db.iter_mut().zip(&pb).for_each(|(a, &b)| *a += b);
    }
    (want_dx.then_some(dx), dw, db)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl PoolGeometry {
    pub fn new(channels: usize, height: usize, width: usize, kernel: usize, stride: usize) -> Result<Self> {
        if height < kernel || width < kernel || stride == 0 {
            return Err(CignError::shape("maxpool", format!("spatial >= {kernel}"), format!("{height}x{width}")));
        }
        Ok(PoolGeometry {
            channels,
            height,
            width,
            kernel,
            stride,
            out_height: (height - kernel) / stride + 1,
            out_width: (width - kernel) / stride + 1,
        })
    }

    pub fn in_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn out_len(&self) -> usize {
        self.channels * self.out_height * self.out_width
    }
}

/// Max pooling; the second vector holds, per output, the flat index of the
/// winning input within its sample (first maximum wins ties).
pub fn maxpool_forward<T: Scalar>(g: &PoolGeometry, x: &[T], n: usize) -> (Vec<T>, Vec<u32>) {
    let (in_len, out_len) = (g.in_len(), g.out_len());
    let mut out = vec![T::zero(); n * out_len];
    let mut arg = vec![0u32; n * out_len];
    let mut pairs: Vec<(&mut [T], &mut [u32])> = out.chunks_mut(out_len).zip(arg.chunks_mut(out_len)).collect();
    par::for_each_chunk(&mut pairs, CONV_CHUNK, |ci, chunk| {
        for (j, (y, a)) in chunk.iter_mut().enumerate() {
            let s = ci * CONV_CHUNK + j;
            let xs = &x[s * in_len..(s + 1) * in_len];
            let mut o = 0;
            for c in 0..g.channels {
                let base = c * g.height * g.width;
                for oy in 0..g.out_height {
                    for ox in 0..g.out_width {
                        let mut best = base + oy * g.stride * g.width + ox * g.stride;
                        for ky in 0..g.kernel {
                            for kx in 0..g.kernel {
                                let idx = base + (oy * g.stride + ky) * g.width + ox * g.stride + kx;
                                if xs[idx] > xs[best] {
                                    best = idx;
                                }
                            }
                        }
                        y[o] = xs[best];
                        a[o] = best as u32;
                        o += 1;
                    }
                }
            }
        }
    });
    drop(pairs);
    (out, arg)
}

pub fn maxpool_backward<T: Scalar>(g: &PoolGeometry, argmax: &[u32], dout: &[T], n: usize) -> Vec<T> {
    let (in_len, out_len) = (g.in_len(), g.out_len());
    let mut dx = vec![T::zero(); n * in_len];
    par::for_each_chunk(&mut dx, in_len, |s, dxs| {
        let a = &argmax[s * out_len..(s + 1) * out_len];
        let dy = &dout[s * out_len..(s + 1) * out_len];
        for (&i, &g) in a.iter().zip(dy) {
            dxs[i as usize] += g;
        }
    });
    dx
}

/// `y = x w + b` with `x: n x d`, `w: d x o`.
pub fn linear_forward<T: Scalar>(x: &[T], weight: &[T], bias: &[T], n: usize, d: usize, o: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * o];
    par::for_each_chunk(&mut out, ROW_CHUNK * o, |ci, y| {
        let rows = y.len() / o;
        let r0 = ci * ROW_CHUNK;
        for row in y.chunks_mut(o) {
            row.copy_from_slice(bias);
        }
        T::gemm(rows, d, o, T::one(), &x[r0 * d..(r0 + rows) * d], d, 1, weight, o, 1, T::one(), y, o, 1);
    });
    out
}

/// Returns `(dx, dweight, dbias)`; `dx` is only formed when `want_dx`.
pub fn linear_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    dout: &[T],
    n: usize,
    d: usize,
    o: usize,
    want_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let mut dw = vec![T::zero(); d * o];
    par::for_each_chunk(&mut dw, FEATURE_CHUNK * o, |ci, dwc| {
        let rows = dwc.len() / o;
        let f0 = ci * FEATURE_CHUNK;
        // x^T restricted to features f0..f0+rows: element (i, s) = x[s * d + f0 + i]
        T::gemm(rows, n, o, T::one(), &x[f0..], 1, d, dout, o, 1, T::zero(), dwc, o, 1);
    });
    let mut db = vec![T::zero(); o];
    for row in dout.chunks(o) {
        db.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
    }
    let dx = want_dx.then(|| {
        let mut dx = vec![T::zero(); n * d];
        par::for_each_chunk(&mut dx, ROW_CHUNK * d, |ci, dxc| {
            let rows = dxc.len() / d;
            let r0 = ci * ROW_CHUNK;
            T::gemm(rows, o, d, T::one(), &dout[r0 * o..(r0 + rows) * o], o, 1, weight, 1, o, T::zero(), dxc, d, 1);
        });
        dx
    });
    (dx, dw, db)
}
