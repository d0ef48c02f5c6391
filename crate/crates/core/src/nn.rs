//! Layer primitives for the channel-to-modem network.
//!
//! Feature maps are stored per sample as `channels x (side * side)` matrices.
//! Convolutions use same padding and stride one, lowered to a matrix product
//! through an im2col buffer whose rows are ordered `(channel, ky, kx)`.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, ArrayViewMut2, Axis};

use crate::scalar::Scalar;

/// `c = alpha * a * b + beta * c`.
#[inline]
pub(crate) fn gemm<T: Scalar>(alpha: T, a: &ArrayView2<T>, b: &ArrayView2<T>, beta: T, c: &mut ArrayViewMut2<T>) {
    general_mat_mul(alpha, a, b, beta, c);
}

/// Geometry of a square same-padded convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub side: usize,
    pub kernel: usize,
}

impl ConvGeom {
    pub fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn area(&self) -> usize {
        self.side * self.side
    }

    pub fn taps(&self) -> usize {
        self.kernel * self.kernel
    }

    /// For kernel offset `k`, the output coordinates whose input coordinate
    /// `o + k - pad` stays inside the map, as `(first_out, count)`.
    fn valid_span(&self, k: usize) -> (usize, usize) {
        let pad = self.pad() as isize;
        let shift = k as isize - pad;
        let lo = (-shift).max(0) as usize;
        let hi = (self.side as isize - shift).min(self.side as isize).max(0) as usize;
        (lo, hi.saturating_sub(lo))
    }
}

/// Writes the im2col rows of `input` (`channels x area`) into `col`, starting
/// at row `row0`.
pub(crate) fn im2col_into<T: Scalar>(geom: ConvGeom, input: &ArrayView2<T>, col: &mut ArrayViewMut2<T>, row0: usize) {
    let s = geom.side;
    let k = geom.kernel;
    let pad = geom.pad() as isize;
    for c in 0..input.nrows() {
        let plane = input.row(c);
        let plane = plane.as_slice().expect("contiguous feature map");
        for ky in 0..k {
            let (y0, ny) = geom.valid_span(ky);
            for kx in 0..k {
                let (x0, nx) = geom.valid_span(kx);
                let mut row = col.row_mut(row0 + (c * k + ky) * k + kx);
                let row = row.as_slice_mut().expect("contiguous im2col row");
                row.fill(T::zero());
                for y in y0..y0 + ny {
                    let iy = (y as isize + ky as isize - pad) as usize;
                    let ix0 = (x0 as isize + kx as isize - pad) as usize;
                    row[y * s + x0..y * s + x0 + nx].copy_from_slice(&plane[iy * s + ix0..iy * s + ix0 + nx]);
                }
            }
        }
    }
}

/// Scatters im2col gradients back onto a feature map, accumulating.
pub(crate) fn col2im_add<T: Scalar>(geom: ConvGeom, col: &ArrayView2<T>, row0: usize, grad: &mut ArrayViewMut2<T>) {
    let s = geom.side;
    let k = geom.kernel;
    let pad = geom.pad() as isize;
    for c in 0..grad.nrows() {
        let mut plane = grad.row_mut(c);
        let plane = plane.as_slice_mut().expect("contiguous gradient map");
        for ky in 0..k {
            let (y0, ny) = geom.valid_span(ky);
            for kx in 0..k {
                let (x0, nx) = geom.valid_span(kx);
                let row = col.row(row0 + (c * k + ky) * k + kx);
                let row = row.as_slice().expect("contiguous im2col row");
                for y in y0..y0 + ny {
                    let iy = (y as isize + ky as isize - pad) as usize;
                    let ix0 = (x0 as isize + kx as isize - pad) as usize;
                    let dst = &mut plane[iy * s + ix0..iy * s + ix0 + nx];
                    for (d, &v) in dst.iter_mut().zip(&row[y * s + x0..y * s + x0 + nx]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Builds the im2col buffer for the channel-wise concatenation of `blocks`.
pub(crate) fn im2col_concat<T: Scalar>(geom: ConvGeom, blocks: &[ArrayView2<T>]) -> Array2<T> {
    let channels: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut col = Array2::<T>::zeros((channels * geom.taps(), geom.area()));
    let mut row0 = 0;
    for b in blocks {
        im2col_into(geom, b, &mut col.view_mut(), row0);
        row0 += b.nrows() * geom.taps();
    }
    col
}

#[inline]
pub(crate) fn leaky<T: Scalar>(x: T, slope: T) -> T {
    if x > T::zero() {
        x
    } else {
        x * slope
    }
}

/// Derivative of the leaky rectifier, read off its output (same sign as input).
#[inline]
pub(crate) fn leaky_grad<T: Scalar>(out: T, slope: T) -> T {
    if out > T::zero() {
        T::one()
    } else {
        slope
    }
}

/// Per-channel statistics of a batch of feature maps.
pub(crate) struct BatchStats<T> {
    pub mean: Array1<T>,
    /// Biased variance.
    pub var: Array1<T>,
    pub count: usize,
}

pub(crate) fn batch_stats<T: Scalar>(maps: &[Array2<T>]) -> BatchStats<T> {
    let channels = maps[0].nrows();
    let count = maps.len() * maps[0].ncols();
    let n = T::count(count);
    // accumulate in f64 so 32-bit training does not lose the mean over
    // large batches
    let mut mean = Array1::<T>::zeros(channels);
    let mut var = Array1::<T>::zeros(channels);
    for c in 0..channels {
        let mut s = 0.0f64;
        for m in maps {
            s += m.row(c).iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let mu = s / count as f64;
        let mut q = 0.0f64;
        for m in maps {
            q += m.row(c).iter().map(|v| (v.as_f64() - mu).powi(2)).sum::<f64>();
        }
        mean[c] = T::lit(mu);
        var[c] = T::lit(q) / n;
    }
    BatchStats { mean, var, count }
}

/// `input Wᵀ + b` for a weight matrix stored as `out x in`.
pub(crate) fn dense_forward<T: Scalar>(input: &ArrayView2<T>, weight: &ArrayView2<T>, bias: &[T]) -> Array2<T> {
    let mut out = Array2::<T>::zeros((input.nrows(), weight.nrows()));
    for mut row in out.rows_mut() {
        row.as_slice_mut().unwrap().copy_from_slice(bias);
    }
    gemm(T::one(), input, &weight.t(), T::one(), &mut out.view_mut());
    out
}

/// Column sums, used for bias gradients.
pub(crate) fn column_sums<T: Scalar>(a: &Array2<T>) -> Array1<T> {
    a.sum_axis(Axis(0))
}
