use crate::rng::RngState;
use crate::tensor::{gemm, MatRef, Real, Tensor};

use super::{NormMode, ParamId, ParamStore};

fn uniform_tensor<T: Real>(shape: &[usize], bound: f64, rng: &mut RngState) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.uniform_range(-bound, bound)))
}

/// Kernel initialisation gain.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Followed by a ReLU: uniform in ±√(6 / fan_in).
    Relu,
    /// Linear output: uniform in ±√(3 / fan_in).
    Linear,
}

impl Init {
    fn bound(self, fan_in: usize) -> f64 {
        let gain = match self {
            Init::Relu => 6.0,
            Init::Linear => 3.0,
        };
        (gain / fan_in as f64).sqrt()
    }
}

/// 2-D convolution with zero padding.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        init: Init,
        rng: &mut RngState,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            uniform_tensor(&[cout, cin, kernel, kernel], init.bound(fan_in), rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Conv2d {
            weight,
            bias,
            cin,
            cout,
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn param_count(cin: usize, cout: usize, kernel: usize) -> usize {
        cout * cin * kernel * kernel + cout
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn forward<T: Real>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
        let (n, c, h, w) = x.dims4();
        assert_eq!(c, self.cin, "conv input channels");
        let (ho, wo) = self.out_size(h, w);
        let rows = self.cin * self.kernel * self.kernel;
        let weight = p.get(self.weight).data();
        let bias = p.get(self.bias).data();
        let mut y = Tensor::zeros(&[n, self.cout, ho, wo]);
        let mut cols = vec![T::zero(); if self.is_pointwise() { 0 } else { rows * ho * wo }];
        let in_len = c * h * w;
        let out_len = self.cout * ho * wo;
        for i in 0..n {
            let xi = &x.data()[i * in_len..(i + 1) * in_len];
            let yi = &mut y.data_mut()[i * out_len..(i + 1) * out_len];
            for (co, row) in yi.chunks_mut(ho * wo).enumerate() {
                row.fill(bias[co]);
            }
            let src = if self.is_pointwise() {
                xi
            } else {
                im2col(xi, c, h, w, self.kernel, self.stride, self.pad, ho, wo, &mut cols);
                &cols
            };
            gemm(
                T::one(),
                MatRef::new(weight, self.cout, rows),
                MatRef::new(src, rows, ho * wo),
                T::one(),
                yi,
            );
        }
        y
    }

    /// Accumulates weight/bias gradients into `g`; returns the input
    /// gradient when `need_input_grad` is set.
    pub fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        g: &mut ParamStore<T>,
        x: &Tensor<T>,
        gy: &Tensor<T>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let (n, c, h, w) = x.dims4();
        let (ho, wo) = self.out_size(h, w);
        let rows = self.cin * self.kernel * self.kernel;
        let pix = ho * wo;
        let weight = p.get(self.weight).data();
        let mut gx = need_input_grad.then(|| Tensor::zeros(x.shape()));
        let mut cols = vec![T::zero(); if self.is_pointwise() { 0 } else { rows * pix }];
        let mut gcols = vec![T::zero(); if need_input_grad && !self.is_pointwise() { rows * pix } else { 0 }];
        let in_len = c * h * w;
        let out_len = self.cout * pix;
        for i in 0..n {
            let xi = &x.data()[i * in_len..(i + 1) * in_len];
            let gyi = &gy.data()[i * out_len..(i + 1) * out_len];
            {
                let gb = g.get_mut(self.bias).data_mut();
                for (co, row) in gyi.chunks(pix).enumerate() {
                    gb[co] += row.iter().copied().sum::<T>();
                }
            }
            let src = if self.is_pointwise() {
                xi
            } else {
                im2col(xi, c, h, w, self.kernel, self.stride, self.pad, ho, wo, &mut cols);
                &cols
            };
            gemm(
                T::one(),
                MatRef::new(gyi, self.cout, pix),
                MatRef::new(src, rows, pix).t(),
                T::one(),
                g.get_mut(self.weight).data_mut(),
            );
            if let Some(gx) = gx.as_mut() {
                let gxi = &mut gx.data_mut()[i * in_len..(i + 1) * in_len];
                if self.is_pointwise() {
                    gemm(
                        T::one(),
                        MatRef::new(weight, self.cout, rows).t(),
                        MatRef::new(gyi, self.cout, pix),
                        T::zero(),
                        gxi,
                    );
                } else {
                    gemm(
                        T::one(),
                        MatRef::new(weight, self.cout, rows).t(),
                        MatRef::new(gyi, self.cout, pix),
                        T::zero(),
                        &mut gcols,
                    );
                    col2im(&gcols, c, h, w, self.kernel, self.stride, self.pad, ho, wo, gxi);
                }
            }
        }
        gx
    }
}

/// Output columns `lo..hi` whose input column `ox·stride + kx − pad` lies
/// inside `0..w`.
fn valid_cols(w: usize, wo: usize, kx: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
    // largest ox with ox·stride + kx − pad ≤ w − 1
    let hi = if w + pad > kx { ((w + pad - kx - 1) / stride + 1).min(wo) } else { 0 };
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let mut r = 0;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let out = &mut cols[r * ho * wo..(r + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut out[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let (lo, hi) = valid_cols(w, wo, kx, stride, pad);
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    if stride == 1 {
                        let off = lo + kx - pad;
                        dst[lo..hi].copy_from_slice(&src[off..off + hi - lo]);
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate().take(hi).skip(lo) {
                            *d = src[ox * stride + kx - pad];
                        }
                    }
                }
                r += 1;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    gx: &mut [T],
) {
    let mut r = 0;
    for ci in 0..c {
        let plane = &mut gx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let src = &cols[r * ho * wo..(r + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let (lo, hi) = valid_cols(w, wo, kx, stride, pad);
                    let srow = &src[oy * wo..(oy + 1) * wo];
                    if stride == 1 {
                        let off = lo + kx - pad;
                        for (d, &v) in row[off..off + hi - lo].iter_mut().zip(&srow[lo..hi]) {
                            *d += v;
                        }
                    } else {
                        for ox in lo..hi {
                            row[ox * stride + kx - pad] += srow[ox];
                        }
                    }
                }
                r += 1;
            }
        }
    }
}

/// `Σ f(x)` in f64 with eight independent accumulators, so the loop
/// vectorizes instead of serializing on one running sum.
fn lane_sum<T: Real>(xs: &[T], f: impl Fn(T) -> f64) -> f64 {
    let mut acc = [0.0f64; 8];
    let chunks = xs.chunks_exact(8);
    let tail: f64 = chunks.remainder().iter().map(|&v| f(v)).sum();
    for ch in chunks {
        for (a, &v) in acc.iter_mut().zip(ch) {
            *a += f(v);
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// Per-channel batch normalization over `(batch, h, w)`.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Clone, Debug)]
pub struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    /// Batch statistics (only in [`NormMode::Batch`]): mean and unbiased variance.
    batch_stats: Option<(Vec<T>, Vec<T>)>,
}

impl BatchNorm2d {
    pub fn new<T: Real>(
        params: &mut ParamStore<T>,
        buffers: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        eps: f64,
        momentum: f64,
    ) -> Self {
        BatchNorm2d {
            gamma: params.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one())),
            beta: params.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: buffers.add(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: buffers.add(format!("{name}.running_var"), Tensor::full(&[channels], T::one())),
            channels,
            eps,
            momentum,
        }
    }

    pub fn forward<T: Real>(
        &self,
        p: &ParamStore<T>,
        buffers: &ParamStore<T>,
        x: &Tensor<T>,
        mode: NormMode,
    ) -> (Tensor<T>, BnCache<T>) {
        let (n, c, h, w) = x.dims4();
        assert_eq!(c, self.channels, "batchnorm channels");
        let hw = h * w;
        let count = n * hw;
        let eps = T::lit(self.eps);
        let (mean, var, batch_stats) = match mode {
            NormMode::Batch => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ci in 0..c {
                    let mut s = 0.0f64;
                    for i in 0..n {
                        let off = (i * c + ci) * hw;
                        s += lane_sum(&x.data()[off..off + hw], |v| v.as_f64());
                    }
                    let m = s / count as f64;
                    let mut sq = 0.0f64;
                    for i in 0..n {
                        let off = (i * c + ci) * hw;
                        sq += lane_sum(&x.data()[off..off + hw], |v| {
                            let d = v.as_f64() - m;
                            d * d
                        });
                    }
                    mean[ci] = T::lit(m);
                    var[ci] = T::lit(sq / count as f64);
                }
                let unbiased = if count > 1 {
                    let f = T::lit(count as f64 / (count - 1) as f64);
                    var.iter().map(|&v| v * f).collect()
                } else {
                    var.clone()
                };
                (mean.clone(), var, Some((mean, unbiased)))
            }
            NormMode::Running => (
                buffers.get(self.running_mean).data().to_vec(),
                buffers.get(self.running_var).data().to_vec(),
                None,
            ),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gamma = p.get(self.gamma).data();
        let beta = p.get(self.beta).data();
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        let planes = x
            .data()
            .chunks(hw)
            .zip(xhat.data_mut().chunks_mut(hw))
            .zip(y.data_mut().chunks_mut(hw));
        for (k, ((src, xh), dst)) in planes.enumerate() {
            let ci = k % c;
            let (m, s, ga, be) = (mean[ci], inv_std[ci], gamma[ci], beta[ci]);
            for ((&v, xh), d) in src.iter().zip(xh.iter_mut()).zip(dst.iter_mut()) {
                *xh = (v - m) * s;
                *d = ga * *xh + be;
            }
        }
        (
            y,
            BnCache {
                xhat,
                inv_std,
                batch_stats,
            },
        )
    }

    /// Folds this forward's batch statistics into the running averages.
    pub fn update_running<T: Real>(&self, buffers: &mut ParamStore<T>, cache: &BnCache<T>) {
        let Some((mean, var)) = &cache.batch_stats else {
            return;
        };
        let m = T::lit(self.momentum);
        let keep = T::one() - m;
        for (r, &b) in buffers.get_mut(self.running_mean).data_mut().iter_mut().zip(mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in buffers.get_mut(self.running_var).data_mut().iter_mut().zip(var) {
            *r = keep * *r + m * b;
        }
    }

    pub fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        g: &mut ParamStore<T>,
        cache: &BnCache<T>,
        gy: &Tensor<T>,
    ) -> Tensor<T> {
        let (n, c, h, w) = gy.dims4();
        let hw = h * w;
        let count = T::lit((n * hw) as f64);
        let gamma = p.get(self.gamma).data().to_vec();
        let xhat = cache.xhat.data();
        let mut sum_g = vec![0.0f64; c];
        let mut sum_gx = vec![0.0f64; c];
        for (k, (gp, xp)) in gy.data().chunks(hw).zip(xhat.chunks(hw)).enumerate() {
            let (mut a, mut b) = (T::zero(), T::zero());
            for (&gv, &xv) in gp.iter().zip(xp) {
                a += gv;
                b += gv * xv;
            }
            sum_g[k % c] += a.as_f64();
            sum_gx[k % c] += b.as_f64();
        }
        for ci in 0..c {
            g.get_mut(self.gamma).data_mut()[ci] += T::lit(sum_gx[ci]);
            g.get_mut(self.beta).data_mut()[ci] += T::lit(sum_g[ci]);
        }
        let mut gx = Tensor::zeros(gy.shape());
        let batch = cache.batch_stats.is_some();
        let planes = gx.data_mut().chunks_mut(hw).zip(gy.data().chunks(hw)).zip(xhat.chunks(hw));
        for (k, ((dst, gp), xp)) in planes.enumerate() {
            let ci = k % c;
            let scale = gamma[ci] * cache.inv_std[ci];
            if batch {
                let mg = T::lit(sum_g[ci]) / count;
                let mgx = T::lit(sum_gx[ci]) / count;
                for ((d, &gv), &xv) in dst.iter_mut().zip(gp).zip(xp) {
                    *d = scale * (gv - mg - xv * mgx);
                }
            } else {
                for (d, &gv) in dst.iter_mut().zip(gp) {
                    *d = scale * gv;
                }
            }
        }
        gx
    }
}

/// 3×3 convolution, batch norm and ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

#[derive(Clone, Debug)]
pub struct ConvBlockCache<T> {
    input: Tensor<T>,
    bn: BnCache<T>,
    output: Tensor<T>,
}

impl<T> ConvBlockCache<T> {
    pub fn output(&self) -> &Tensor<T> {
        &self.output
    }

    pub fn bn_cache(&self) -> &BnCache<T> {
        &self.bn
    }
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        params: &mut ParamStore<T>,
        buffers: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        eps: f64,
        momentum: f64,
        rng: &mut RngState,
    ) -> Self {
        ConvBlock {
            conv: Conv2d::new(params, &format!("{name}.conv"), cin, cout, 3, 1, 1, Init::Relu, rng),
            bn: BatchNorm2d::new(params, buffers, &format!("{name}.bn"), cout, eps, momentum),
        }
    }

    pub fn param_count(cin: usize, cout: usize) -> usize {
        Conv2d::param_count(cin, cout, 3) + 2 * cout
    }

    pub fn forward<T: Real>(
        &self,
        p: &ParamStore<T>,
        buffers: &ParamStore<T>,
        x: Tensor<T>,
        mode: NormMode,
    ) -> ConvBlockCache<T> {
        let z = self.conv.forward(p, &x);
        let (mut y, bn) = self.bn.forward(p, buffers, &z, mode);
        relu_in_place(&mut y);
        ConvBlockCache {
            input: x,
            bn,
            output: y,
        }
    }

    pub fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        g: &mut ParamStore<T>,
        cache: &ConvBlockCache<T>,
        mut gy: Tensor<T>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        relu_backward_in_place(&mut gy, &cache.output);
        let gz = self.bn.backward(p, g, &cache.bn, &gy);
        self.conv.backward(p, g, &cache.input, &gz, need_input_grad)
    }
}

pub fn relu_in_place<T: Real>(x: &mut Tensor<T>) {
    x.data_mut().iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero()
        }
    });
}

/// Zeroes `gy` wherever the ReLU output was not positive.
pub fn relu_backward_in_place<T: Real>(gy: &mut Tensor<T>, output: &Tensor<T>) {
    gy.data_mut()
        .iter_mut()
        .zip(output.data())
        .for_each(|(g, &y)| {
            if y <= T::zero() {
                *g = T::zero()
            }
        });
}

/// `(n, c, h, w) → (n, c)` spatial mean.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let inv = T::lit(1.0 / hw as f64);
    Tensor::from_fn(&[n, c], |i| {
        x.data()[i * hw..(i + 1) * hw].iter().copied().sum::<T>() * inv
    })
}

pub fn global_avg_pool_backward<T: Real>(gy: &Tensor<T>, input_shape: &[usize]) -> Tensor<T> {
    let hw = input_shape[2] * input_shape[3];
    let inv = T::lit(1.0 / hw as f64);
    Tensor::from_fn(input_shape, |j| gy.data()[j / hw] * inv)
}

/// Fully connected layer `y = x·Wᵀ + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, din: usize, dout: usize, rng: &mut RngState) -> Self {
        Linear {
            weight: store.add(
                format!("{name}.weight"),
                uniform_tensor(&[dout, din], Init::Linear.bound(din), rng),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dout])),
            din,
            dout,
        }
    }

    pub fn param_count(din: usize, dout: usize) -> usize {
        din * dout + dout
    }

    pub fn forward<T: Real>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
        let (n, d) = x.dims2();
        assert_eq!(d, self.din, "linear input width");
        let bias = p.get(self.bias).data();
        let mut y = Tensor::from_fn(&[n, self.dout], |i| bias[i % self.dout]);
        gemm(
            T::one(),
            MatRef::new(x.data(), n, d),
            MatRef::new(p.get(self.weight).data(), self.dout, d).t(),
            T::one(),
            y.data_mut(),
        );
        y
    }

    pub fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        g: &mut ParamStore<T>,
        x: &Tensor<T>,
        gy: &Tensor<T>,
    ) -> Tensor<T> {
        let (n, d) = x.dims2();
        {
            let gb = g.get_mut(self.bias).data_mut();
            for row in gy.data().chunks(self.dout) {
                for (b, &v) in gb.iter_mut().zip(row) {
                    *b += v;
                }
            }
        }
        gemm(
            T::one(),
            MatRef::new(gy.data(), n, self.dout).t(),
            MatRef::new(x.data(), n, d),
            T::one(),
            g.get_mut(self.weight).data_mut(),
        );
        let mut gx = Tensor::zeros(&[n, d]);
        gemm(
            T::one(),
            MatRef::new(gy.data(), n, self.dout),
            MatRef::new(p.get(self.weight).data(), self.dout, d),
            T::zero(),
            gx.data_mut(),
        );
        gx
    }
}

pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::make_rng;

    /// Direct-summation convolution used as an oracle for im2col + GEMM.
    fn conv_naive(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
        let (n, c, h, wd) = x.dims4();
        let (co, _, k, _) = w.dims4();
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut y = Tensor::zeros(&[n, co, ho, wo]);
        for i in 0..n {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = b[o];
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        s += x.data()[((i * c + ci) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((o * c + ci) * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                        y.data_mut()[((i * co + o) * ho + oy) * wo + ox] = s;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_summation() {
        let mut rng = make_rng(1);
        for &(k, stride, pad) in &[(3, 1, 1), (1, 1, 0), (3, 2, 1)] {
            let mut store = ParamStore::<f64>::new();
            let conv = Conv2d::new(&mut store, "c", 2, 3, k, stride, pad, Init::Relu, &mut rng);
            store.get_mut(conv.bias).data_mut().copy_from_slice(&[0.1, -0.2, 0.3]);
            let x = Tensor::from_fn(&[2, 2, 7, 6], |_| rng.uniform_range(-1.0, 1.0));
            let y = conv.forward(&store, &x);
            let want = conv_naive(&x, store.get(conv.weight), store.get(conv.bias).data(), stride, pad);
            assert_eq!(y.shape(), want.shape());
            for (a, b) in y.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batchnorm_normalizes_in_batch_mode() {
        let mut rng = make_rng(2);
        let mut p = ParamStore::<f64>::new();
        let mut b = ParamStore::<f64>::new();
        let bn = BatchNorm2d::new(&mut p, &mut b, "bn", 2, 1e-5, 0.1);
        let x = Tensor::from_fn(&[3, 2, 4, 4], |_| rng.uniform_range(2.0, 5.0));
        let (y, cache) = bn.forward(&p, &b, &x, NormMode::Batch);
        for ci in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|i| y.data()[(i * 2 + ci) * 16..(i * 2 + ci + 1) * 16].to_vec())
                .collect();
            let m: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-9);
        }
        bn.update_running(&mut b, &cache);
        assert!(b.get(bn.running_mean).data().iter().all(|&v| v > 0.2 && v < 0.5));
    }

    #[test]
    fn pool_and_linear_shapes() {
        let mut rng = make_rng(3);
        let mut p = ParamStore::<f32>::new();
        let lin = Linear::new(&mut p, "fc", 4, 30, &mut rng);
        let x = Tensor::<f32>::full(&[2, 4, 5, 5], 1.0);
        let pooled = global_avg_pool(&x);
        assert_eq!(pooled.shape(), &[2, 4]);
        assert!(pooled.data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
        assert_eq!(lin.forward(&p, &pooled).shape(), &[2, 30]);
    }

    #[test]
    fn sigmoid_is_stable_and_bounded() {
        assert!(sigmoid(800.0f64) <= 1.0);
        assert!(sigmoid(-800.0f64) >= 0.0);
        assert!((sigmoid(0.0f64) - 0.5).abs() < 1e-15);
    }
}
