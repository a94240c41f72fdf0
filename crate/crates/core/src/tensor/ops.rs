use std::rc::Rc;

use super::broadcast::{broadcast_shape, reduce_to, source_index};
use super::{check_shape, Tensor, CLAMP_MIN};
use crate::error::{Error, Result};

fn clamp_positive(x: f64) -> (f64, bool) {
    if x < CLAMP_MIN {
        (CLAMP_MIN, true)
    } else {
        (x, false)
    }
}

/// Keeps the sign, lifts the magnitude to at least `CLAMP_MIN`.
fn clamp_denominator(x: f64) -> (f64, bool) {
    if x.abs() < CLAMP_MIN {
        (if x < 0.0 { -CLAMP_MIN } else { CLAMP_MIN }, true)
    } else {
        (x, false)
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tensor {
    fn binary(
        &self,
        other: &Tensor,
        forward: impl Fn(f64, f64) -> f64,
        partials: impl Fn(f64, f64) -> (f64, f64) + 'static,
    ) -> Result<Tensor> {
        let shape = broadcast_shape(self.shape(), other.shape())?;
        let ia = Rc::new(source_index(self.shape(), &shape));
        let ib = Rc::new(source_index(other.shape(), &shape));
        let (a, b) = (self.data(), other.data());
        let data: Vec<f64> = ia.iter().zip(ib.iter()).map(|(&i, &j)| forward(a[i], b[j])).collect();
        let (ta, tb) = (self.clone(), other.clone());
        let grad_fn = Box::new(move |g: &[f64]| {
            let (a, b) = (ta.data(), tb.data());
            let mut ga = Vec::with_capacity(g.len());
            let mut gb = Vec::with_capacity(g.len());
            for ((gi, &i), &j) in g.iter().zip(ia.iter()).zip(ib.iter()) {
                let (da, db) = partials(a[i], b[j]);
                ga.push(gi * da);
                gb.push(gi * db);
            }
            vec![
                ta.requires_grad().then(|| reduce_to(&ga, &ia, a.len())),
                tb.requires_grad().then(|| reduce_to(&gb, &ib, b.len())),
            ]
        });
        Ok(Tensor::from_op(data, shape, vec![self.clone(), other.clone()], grad_fn))
    }

    /// Elementwise map with derivative `df(x, y)` where `y = f(x)`.
    pub(crate) fn unary(
        &self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        let input = self.clone();
        let out = Rc::new(data.clone());
        let grad_fn = Box::new(move |g: &[f64]| {
            let gx = g
                .iter()
                .zip(input.data())
                .zip(out.iter())
                .map(|((gi, &x), &y)| gi * df(x, y))
                .collect();
            vec![Some(gx)]
        });
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], grad_fn)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, |a, b| a + b, |_, _| (1.0, 1.0))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, |a, b| a - b, |_, _| (1.0, -1.0))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, |a, b| a * b, |a, b| (b, a))
    }

    /// Elementwise quotient; denominators are lifted to magnitude `CLAMP_MIN`.
    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        if other.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Domain { op: "div", detail: "NaN denominator".into() });
        }
        self.binary(
            other,
            |a, b| a / clamp_denominator(b).0,
            |a, b| {
                let (bc, clamped) = clamp_denominator(b);
                let db = if clamped { 0.0 } else { -a / (bc * bc) };
                (1.0 / bc, db)
            },
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn neg(&self) -> Tensor {
        self.unary(|x| -x, |_, _| -1.0)
    }

    pub fn square(&self) -> Tensor {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    /// `x^p`. Negative bases need an integer exponent.
    pub fn pow(&self, p: f64) -> Result<Tensor> {
        let integer = p.fract() == 0.0;
        if !integer && self.data().iter().any(|&x| x < 0.0) {
            return Err(Error::Domain { op: "pow", detail: format!("negative base with exponent {p}") });
        }
        Ok(self.unary(move |x| x.powf(p), move |x, _| p * x.powf(p - 1.0)))
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, |_, y| y)
    }

    /// Natural log with inputs in `[0, CLAMP_MIN)` lifted to `CLAMP_MIN`.
    pub fn log(&self) -> Result<Tensor> {
        self.check_nonnegative("log")?;
        Ok(self.unary(
            |x| clamp_positive(x).0.ln(),
            |x, _| match clamp_positive(x) {
                (_, true) => 0.0,
                (xc, false) => 1.0 / xc,
            },
        ))
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        self.check_nonnegative("sqrt")?;
        Ok(self.unary(
            |x| clamp_positive(x).0.sqrt(),
            |x, y| if clamp_positive(x).1 { 0.0 } else { 0.5 / y },
        ))
    }

    fn check_nonnegative(&self, op: &'static str) -> Result<()> {
        match self.data().iter().find(|x| !(**x >= 0.0)) {
            Some(bad) => Err(Error::Domain { op, detail: format!("input {bad}") }),
            None => Ok(()),
        }
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&self) -> Tensor {
        self.unary(
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    /// `ln(1 + e^x)`, stable for large `|x|`.
    pub fn softplus(&self) -> Tensor {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    /// `ln(1 - e^x)` for `x < 0`; inputs above `-CLAMP_MIN` are clamped.
    pub fn log1mexp(&self) -> Tensor {
        self.unary(
            |x| log1mexp(x.min(-CLAMP_MIN)),
            |x, _| {
                if x > -CLAMP_MIN {
                    0.0
                } else {
                    -1.0 / (-x).exp_m1()
                }
            },
        )
    }

    pub fn sum(&self) -> Tensor {
        let total = self.data().iter().sum();
        let n = self.numel();
        let grad_fn = Box::new(move |g: &[f64]| vec![Some(vec![g[0]; n])]);
        Tensor::from_op(vec![total], Vec::new(), vec![self.clone()], grad_fn)
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        let total: f64 = self.data().iter().sum();
        let len = self.numel();
        let grad_fn = Box::new(move |g: &[f64]| vec![Some(vec![g[0] / n; len])]);
        Tensor::from_op(vec![total / n], Vec::new(), vec![self.clone()], grad_fn)
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        self.check_axis(axis)?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let row = &x[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (d, v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        let mut shape = self.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        let grad_fn = Box::new(move |g: &[f64]| {
            let mut gx = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for k in 0..len {
                    gx[(o * len + k) * inner..(o * len + k + 1) * inner]
                        .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gx)]
        });
        Ok(Tensor::from_op(data, shape, vec![self.clone()], grad_fn))
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        let len = self.shape().get(axis).copied().unwrap_or(1) as f64;
        Ok(self.sum_axis(axis, keepdim)?.mul_scalar(1.0 / len))
    }

    pub(crate) fn check_axis(&self, axis: usize) -> Result<()> {
        if axis >= self.ndim() {
            return Err(Error::InvalidArgument(format!(
                "axis {axis} out of range for shape {:?}",
                self.shape()
            )));
        }
        Ok(())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        check_shape(shape, self.numel())?;
        let grad_fn = Box::new(|g: &[f64]| vec![Some(g.to_vec())]);
        Ok(Tensor::from_op(self.to_vec(), shape.to_vec(), vec![self.clone()], grad_fn))
    }

    /// Joins tensors along `axis`; all other dimensions must agree.
    pub fn concat(tensors: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = tensors
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        first.check_axis(axis)?;
        for t in &tensors[1..] {
            let compatible = t.ndim() == first.ndim()
                && t.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch { lhs: first.shape().to_vec(), rhs: t.shape().to_vec() });
            }
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let lens: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (t, &len) in tensors.iter().zip(&lens) {
                data.extend_from_slice(&t.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let grad_fn = Box::new(move |g: &[f64]| {
            let mut parts: Vec<Vec<f64>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            let mut offset = 0;
            for _ in 0..outer {
                for (part, &len) in parts.iter_mut().zip(&lens) {
                    part.extend_from_slice(&g[offset..offset + len * inner]);
                    offset += len * inner;
                }
            }
            parts.into_iter().map(Some).collect()
        });
        Ok(Tensor::from_op(data, shape, tensors.to_vec(), grad_fn))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        self.check_axis(axis)?;
        let dim = self.shape()[axis];
        if len == 0 || start + len > dim {
            return Err(Error::InvalidArgument(format!(
                "narrow [{start}, {}) outside axis {axis} of size {dim}",
                start + len
            )));
        }
        let (outer, _, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let grad_fn = Box::new(move |g: &[f64]| {
            let mut gx = vec![0.0; outer * dim * inner];
            for o in 0..outer {
                let base = (o * dim + start) * inner;
                gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        });
        Ok(Tensor::from_op(data, shape, vec![self.clone()], grad_fn))
    }

    /// Same shape check used by the losses.
    pub(crate) fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch { lhs: self.shape().to_vec(), rhs: other.shape().to_vec() });
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn log1mexp(x: f64) -> f64 {
    if x > -std::f64::consts::LN_2 {
        (-x.exp_m1()).ln()
    } else {
        (-x.exp()).ln_1p()
    }
}
