use serde::{Deserialize, Serialize};

use super::gemm::{gemm, Mat};
use super::ops::split_axis;
use super::Tensor;
use crate::error::{Error, Result};

/// Output squashing applied to logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Softmax across the class axis (axis 1).
    Softmax,
    Sigmoid,
}

struct ConvGeometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    hout: usize,
    wout: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.hout * self.wout
    }

    /// Output columns `ox` whose input column `ox*stride + kj - pad` lies
    /// inside `[0, w)`.
    fn valid_cols(&self, kj: usize) -> std::ops::Range<usize> {
        let lo = self.pad.saturating_sub(kj).div_ceil(self.stride);
        let hi = if self.w + self.pad > kj { (self.w + self.pad - kj - 1) / self.stride + 1 } else { 0 };
        lo.min(self.wout)..hi.min(self.wout).max(lo.min(self.wout))
    }

    /// Unfolds sample `b` of `x` into columns `b*n .. (b+1)*n` of the
    /// `(cin*k*k) x (batch*n)` matrix `cols` (row stride `batch*n`), where
    /// `n = hout*wout`. Out-of-image taps stay zero, so `cols` must start zeroed.
    fn im2col(&self, x: &[f64], b: usize, cols: &mut [f64]) {
        let n = self.positions();
        let ld = self.batch * n;
        let plane = self.h * self.w;
        for ci in 0..self.cin {
            let src = &x[(b * self.cin + ci) * plane..(b * self.cin + ci + 1) * plane];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (ci * self.k + ki) * self.k + kj;
                    let dst = &mut cols[row * ld + b * n..row * ld + (b + 1) * n];
                    let xs = self.valid_cols(kj);
                    for oy in 0..self.hout {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let line = &mut dst[oy * self.wout..(oy + 1) * self.wout];
                        let first = xs.start * self.stride + kj - self.pad;
                        if self.stride == 1 {
                            line[xs.clone()].copy_from_slice(&src_row[first..first + xs.len()]);
                        } else {
                            for (i, ox) in xs.clone().enumerate() {
                                line[ox] = src_row[first + i * self.stride];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of `im2col`: scatters column gradients into sample `b` of `dx`.
    fn col2im(&self, cols: &[f64], b: usize, dx: &mut [f64]) {
        let n = self.positions();
        let ld = self.batch * n;
        let plane = self.h * self.w;
        for ci in 0..self.cin {
            let dst = &mut dx[(b * self.cin + ci) * plane..(b * self.cin + ci + 1) * plane];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (ci * self.k + ki) * self.k + kj;
                    let src = &cols[row * ld + b * n..row * ld + (b + 1) * n];
                    let xs = self.valid_cols(kj);
                    for oy in 0..self.hout {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let line = &src[oy * self.wout..(oy + 1) * self.wout];
                        let first = xs.start * self.stride + kj - self.pad;
                        for (i, ox) in xs.clone().enumerate() {
                            dst_row[first + i * self.stride] += line[ox];
                        }
                    }
                }
            }
        }
    }
}

impl Tensor {
    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a_shape, b_shape) = (self.shape(), other.shape());
        if a_shape.len() != 2 || b_shape.len() != 2 || a_shape[1] != b_shape[0] {
            return Err(Error::ShapeMismatch { lhs: a_shape.to_vec(), rhs: b_shape.to_vec() });
        }
        let (m, k, n) = (a_shape[0], a_shape[1], b_shape[1]);
        let mut data = vec![0.0; m * n];
        gemm(Mat::new(self.data(), m, k), Mat::new(other.data(), k, n), 0.0, &mut data);
        let (ta, tb) = (self.clone(), other.clone());
        let grad_fn = Box::new(move |g: &[f64]| {
            let gm = Mat::new(g, m, n);
            let ga = ta.requires_grad().then(|| {
                let mut ga = vec![0.0; m * k];
                gemm(gm, Mat::new(tb.data(), k, n).t(), 0.0, &mut ga);
                ga
            });
            let gb = tb.requires_grad().then(|| {
                let mut gb = vec![0.0; k * n];
                gemm(Mat::new(ta.data(), m, k).t(), gm, 0.0, &mut gb);
                gb
            });
            vec![ga, gb]
        });
        Ok(Tensor::from_op(data, vec![m, n], vec![self.clone(), other.clone()], grad_fn))
    }

    /// 2-D convolution of `[batch, cin, h, w]` with square kernels
    /// `[cout, cin, k, k]`; output side is `floor((in + 2*pad - k)/stride) + 1`.
    pub fn conv2d(&self, kernel: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
        let (xs, ks) = (self.shape(), kernel.shape());
        let mismatch = || Error::ShapeMismatch { lhs: xs.to_vec(), rhs: ks.to_vec() };
        if xs.len() != 4 || ks.len() != 4 || ks[1] != xs[1] || ks[2] != ks[3] || stride == 0 {
            return Err(mismatch());
        }
        let k = ks[2];
        if xs[2] + 2 * pad < k || xs[3] + 2 * pad < k {
            return Err(mismatch());
        }
        if let Some(b) = bias {
            if b.shape() != [ks[0]] {
                return Err(Error::ShapeMismatch { lhs: ks.to_vec(), rhs: b.shape().to_vec() });
            }
        }
        let geo = ConvGeometry {
            batch: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ks[0],
            k,
            stride,
            pad,
            hout: (xs[2] + 2 * pad - k) / stride + 1,
            wout: (xs[3] + 2 * pad - k) / stride + 1,
        };
        let (kk, n) = (geo.patch_len(), geo.positions());
        let bn = geo.batch * n;
        // One product over the whole batch: [cout, kk] x [kk, batch*n].
        let mut cols = vec![0.0; kk * bn];
        for b in 0..geo.batch {
            geo.im2col(self.data(), b, &mut cols);
        }
        let mut out = vec![0.0; geo.cout * bn];
        gemm(Mat::new(kernel.data(), geo.cout, kk), Mat::new(&cols, kk, bn), 0.0, &mut out);
        let mut data = vec![0.0; geo.batch * geo.cout * n];
        for co in 0..geo.cout {
            let bv = bias.map_or(0.0, |b| b.data()[co]);
            for b in 0..geo.batch {
                let src = &out[co * bn + b * n..co * bn + (b + 1) * n];
                let dst = &mut data[(b * geo.cout + co) * n..(b * geo.cout + co + 1) * n];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + bv;
                }
            }
        }
        let shape = vec![geo.batch, geo.cout, geo.hout, geo.wout];
        let mut parents = vec![self.clone(), kernel.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let (x, w) = (self.clone(), kernel.clone());
        let has_bias = bias.is_some();
        let bias_grad = bias.is_some_and(Tensor::requires_grad);
        let grad_fn = Box::new(move |g: &[f64]| {
            // [batch, cout, n] -> [cout, batch*n]
            let mut gm = vec![0.0; geo.cout * bn];
            for b in 0..geo.batch {
                for co in 0..geo.cout {
                    gm[co * bn + b * n..co * bn + (b + 1) * n]
                        .copy_from_slice(&g[(b * geo.cout + co) * n..(b * geo.cout + co + 1) * n]);
                }
            }
            let gmat = Mat::new(&gm, geo.cout, bn);
            let dw = w.requires_grad().then(|| {
                let mut dw = vec![0.0; w.numel()];
                gemm(gmat, Mat::new(&cols, kk, bn).t(), 0.0, &mut dw);
                dw
            });
            let dx = x.requires_grad().then(|| {
                let mut dcols = vec![0.0; kk * bn];
                gemm(Mat::new(w.data(), geo.cout, kk).t(), gmat, 0.0, &mut dcols);
                let mut dx = vec![0.0; x.numel()];
                for b in 0..geo.batch {
                    geo.col2im(&dcols, b, &mut dx);
                }
                dx
            });
            let mut grads = vec![dx, dw];
            if has_bias {
                grads.push(bias_grad.then(|| gm.chunks(bn).map(|row| row.iter().sum::<f64>()).collect()));
            }
            grads
        });
        Ok(Tensor::from_op(data, shape, parents, grad_fn))
    }

    fn expect_nchw(&self, op: &str) -> Result<(usize, usize, usize, usize)> {
        match *self.shape() {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(Error::InvalidArgument(format!("{op} expects [batch, channels, h, w], got {:?}", self.shape()))),
        }
    }

    /// Nearest-neighbour upsampling of the two spatial axes by `factor`.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Tensor> {
        let (b, c, h, w) = self.expect_nchw("upsample_nearest")?;
        if factor == 0 {
            return Err(Error::InvalidArgument("upsample factor 0".into()));
        }
        let (ho, wo) = (h * factor, w * factor);
        let x = self.data();
        let mut data = Vec::with_capacity(b * c * ho * wo);
        for plane in x.chunks(h * w) {
            for oy in 0..ho {
                let row = &plane[(oy / factor) * w..(oy / factor + 1) * w];
                for ox in 0..wo {
                    data.push(row[ox / factor]);
                }
            }
        }
        let grad_fn = Box::new(move |g: &[f64]| {
            let mut gx = vec![0.0; b * c * h * w];
            for (p, gplane) in g.chunks(ho * wo).enumerate() {
                let dst = &mut gx[p * h * w..(p + 1) * h * w];
                for oy in 0..ho {
                    for ox in 0..wo {
                        dst[(oy / factor) * w + ox / factor] += gplane[oy * wo + ox];
                    }
                }
            }
            vec![Some(gx)]
        });
        Ok(Tensor::from_op(data, vec![b, c, ho, wo], vec![self.clone()], grad_fn))
    }

    /// Mean over non-overlapping `factor x factor` blocks. Blocks are summed
    /// pairwise, so a block of identical values averages back exactly when
    /// `factor` is a power of two.
    pub fn avg_pool2d(&self, factor: usize) -> Result<Tensor> {
        let (b, c, h, w) = self.expect_nchw("avg_pool2d")?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::InvalidArgument(format!("pool factor {factor} does not divide {h}x{w}")));
        }
        let (ho, wo) = (h / factor, w / factor);
        let scale = 1.0 / (factor * factor) as f64;
        let x = self.data();
        let mut data = Vec::with_capacity(b * c * ho * wo);
        let mut block = Vec::with_capacity(factor * factor);
        for plane in x.chunks(h * w) {
            for oy in 0..ho {
                for ox in 0..wo {
                    block.clear();
                    for dy in 0..factor {
                        let row = (oy * factor + dy) * w + ox * factor;
                        block.extend_from_slice(&plane[row..row + factor]);
                    }
                    data.push(pairwise_sum(&mut block) * scale);
                }
            }
        }
        let grad_fn = Box::new(move |g: &[f64]| {
            let mut gx = vec![0.0; b * c * h * w];
            for (p, gplane) in g.chunks(ho * wo).enumerate() {
                let dst = &mut gx[p * h * w..(p + 1) * h * w];
                for y in 0..h {
                    for xi in 0..w {
                        dst[y * w + xi] = gplane[(y / factor) * wo + xi / factor] * scale;
                    }
                }
            }
            vec![Some(gx)]
        });
        Ok(Tensor::from_op(data, vec![b, c, ho, wo], vec![self.clone()], grad_fn))
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        self.check_axis(axis)?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let data = softmax_data(self.data(), outer, len, inner);
        let out = data.clone();
        let grad_fn = Box::new(move |g: &[f64]| {
            let mut gx = vec![0.0; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * len + k) * inner + i;
                    let dot: f64 = (0..len).map(|k| g[at(k)] * out[at(k)]).sum();
                    for k in 0..len {
                        gx[at(k)] = out[at(k)] * (g[at(k)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        });
        Ok(Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], grad_fn))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        self.check_axis(axis)?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut data = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|k| (x[at(k)] - max).exp()).sum::<f64>().ln();
                for k in 0..len {
                    data[at(k)] = x[at(k)] - lse;
                }
            }
        }
        let probs = softmax_data(x, outer, len, inner);
        let grad_fn = Box::new(move |g: &[f64]| {
            let mut gx = vec![0.0; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * len + k) * inner + i;
                    let total: f64 = (0..len).map(|k| g[at(k)]).sum();
                    for k in 0..len {
                        gx[at(k)] = g[at(k)] - probs[at(k)] * total;
                    }
                }
            }
            vec![Some(gx)]
        });
        Ok(Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], grad_fn))
    }

    /// Applies `act`; softmax runs over axis 1.
    pub fn activate(&self, act: Activation) -> Result<Tensor> {
        match act {
            Activation::Sigmoid => Ok(self.sigmoid()),
            Activation::Softmax => self.softmax(1),
        }
    }

    /// Mean squared error over all elements.
    pub fn mse(&self, target: &Tensor) -> Result<Tensor> {
        self.expect_same_shape(target)?;
        Ok(self.sub(target)?.square().mean())
    }

    /// Binary cross-entropy of probabilities against targets in `[0, 1]`,
    /// averaged over elements; `log` inputs are clamped.
    pub fn bce(&self, target: &Tensor) -> Result<Tensor> {
        self.expect_same_shape(target)?;
        let log_p = self.log()?;
        let log_q = self.neg().add_scalar(1.0).log()?;
        let positive = target.mul(&log_p)?;
        let negative = target.neg().add_scalar(1.0).mul(&log_q)?;
        Ok(positive.add(&negative)?.mean().neg())
    }

    /// `bce(act(self), target)` evaluated in log space, stable for large logits.
    pub fn bce_after(&self, target: &Tensor, act: Activation) -> Result<Tensor> {
        self.expect_same_shape(target)?;
        let (log_p, log_q) = match act {
            Activation::Sigmoid => (self.neg().softplus().neg(), self.softplus().neg()),
            Activation::Softmax => {
                let log_p = self.log_softmax(1)?;
                let log_q = log_p.log1mexp();
                (log_p, log_q)
            }
        };
        let positive = target.mul(&log_p)?;
        let negative = target.neg().add_scalar(1.0).mul(&log_q)?;
        Ok(positive.add(&negative)?.mean().neg())
    }

    /// Softmax cross-entropy against one-hot (or soft) targets on axis 1,
    /// averaged over all non-class positions.
    pub fn cross_entropy(&self, target: &Tensor) -> Result<Tensor> {
        self.expect_same_shape(target)?;
        let log_p = self.log_softmax(1)?;
        Ok(target.mul(&log_p)?.sum_axis(1, false)?.mean().neg())
    }
}

fn softmax_data(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let max = (0..len).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..len {
                let e = (x[at(k)] - max).exp();
                out[at(k)] = e;
                total += e;
            }
            for k in 0..len {
                out[at(k)] /= total;
            }
        }
    }
    out
}

fn pairwise_sum(values: &mut [f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n => {
            let (lo, hi) = values.split_at_mut(n / 2);
            pairwise_sum(lo) + pairwise_sum(hi)
        }
    }
}
