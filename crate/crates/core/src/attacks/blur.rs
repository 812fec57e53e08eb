//! Gaussian blur as two 1-D passes. The 2-D kernel is the outer product of
//! the normalized 1-D kernel with itself, so the separable form is the same
//! operator as a direct 2-D convolution.

use crate::tensor::{Real, Tensor};

pub fn kernel_size(sigma: f64) -> usize {
    2 * (2.0 * sigma).ceil() as usize + 1
}

/// Normalized 1-D Gaussian taps, centred, `kernel_size(sigma)` long.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (kernel_size(sigma) / 2) as isize;
    let raw: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Mirror index without edge repetition (`… 2 1 | 0 1 2 … n-1 | n-2 …`),
/// valid for any offset.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Reflect-padded correlation along rows (`horizontal`) or columns.
fn pass<T: Real>(x: &Tensor<T>, taps: &[T], horizontal: bool) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let r = (taps.len() / 2) as isize;
    let mut out = Tensor::zeros(x.shape());
    let src = x.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..h {
            for xx in 0..w {
                let mut acc = T::zero();
                for (t, &k) in taps.iter().enumerate() {
                    let off = t as isize - r;
                    let idx = if horizontal {
                        y * w + reflect_index(xx as isize + off, w)
                    } else {
                        reflect_index(y as isize + off, h) * w + xx
                    };
                    acc += k * src[base + idx];
                }
                dst[base + y * w + xx] = acc;
            }
        }
    }
    out
}

/// Transpose of [`pass`]: scatters each output gradient back to the taps'
/// (reflected) source pixels.
fn pass_transpose<T: Real>(g: &Tensor<T>, taps: &[T], horizontal: bool) -> Tensor<T> {
    let (n, c, h, w) = g.dims4();
    let r = (taps.len() / 2) as isize;
    let mut out = Tensor::zeros(g.shape());
    let src = g.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..h {
            for xx in 0..w {
                let gv = src[base + y * w + xx];
                for (t, &k) in taps.iter().enumerate() {
                    let off = t as isize - r;
                    let idx = if horizontal {
                        y * w + reflect_index(xx as isize + off, w)
                    } else {
                        reflect_index(y as isize + off, h) * w + xx
                    };
                    dst[base + idx] += k * gv;
                }
            }
        }
    }
    out
}

fn taps<T: Real>(sigma: f64) -> Vec<T> {
    gaussian_kernel(sigma).into_iter().map(T::lit).collect()
}

pub(super) fn blur_forward<T: Real>(x: &Tensor<T>, sigma: f64) -> Tensor<T> {
    let k = taps::<T>(sigma);
    pass(&pass(x, &k, true), &k, false)
}

pub(super) fn blur_backward<T: Real>(g: &Tensor<T>, sigma: f64) -> Tensor<T> {
    let k = taps::<T>(sigma);
    pass_transpose(&pass_transpose(g, &k, false), &k, true)
}
