//! Elementwise, shape, reduction and matrix ops.

use std::rc::Rc;

use super::gemm::{gemm, Mat};
use super::{Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    /// Unbiased variance (divisor `count - 1`).
    Var,
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }
}

/// Sums a full-size gradient down to one element when the operand was a
/// broadcast scalar.
fn fold(grad: Vec<f64>, scalar: bool, shape: &[usize]) -> Tensor {
    if scalar {
        Tensor::from_parts(shape.to_vec(), vec![grad.iter().sum()])
    } else {
        Tensor::from_parts(shape.to_vec(), grad)
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Calls `f(out_flat, in_offset)` for every element of `out_shape`, where the
/// input offset is `sum(index[i] * in_strides[i])`.
fn for_each_strided(out_shape: &[usize], in_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let numel: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let mut index = vec![0usize; rank];
    let mut offset = 0usize;
    for flat in 0..numel {
        f(flat, offset);
        for ax in (0..rank).rev() {
            index[ax] += 1;
            offset += in_strides[ax];
            if index[ax] < out_shape[ax] {
                break;
            }
            offset -= in_strides[ax] * out_shape[ax];
            index[ax] = 0;
        }
    }
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mapped: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = vec![0.0; data.len()];
    for_each_strided(&out_shape, &mapped, |o, i| out[o] = data[i]);
    (out, out_shape)
}

fn unary<'t>(
    x: Var<'t>,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64, f64) -> f64 + 'static,
) -> Var<'t> {
    let xv = x.value();
    let out = Rc::new(Tensor::from_parts(
        xv.shape().to_vec(),
        xv.data().iter().map(|&v| f(v)).collect(),
    ));
    let saved = Rc::clone(&out);
    x.tape.push(out, &[x], move |g, _| {
        let grad = g
            .data()
            .iter()
            .zip(xv.data())
            .zip(saved.data())
            .map(|((&g, &x), &y)| g * df(x, y))
            .collect();
        vec![Some(Tensor::from_parts(xv.shape().to_vec(), grad))]
    })
}

// Arithmetic returns `Result` (shape contracts), so it cannot use the `ops` traits.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    fn binary(self, other: Var<'t>, op: Binary) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let (shape, a_scalar, b_scalar) = if a.shape() == b.shape() {
            (a.shape().to_vec(), false, false)
        } else if b.numel() == 1 {
            (a.shape().to_vec(), false, true)
        } else if a.numel() == 1 {
            (b.shape().to_vec(), true, false)
        } else {
            return Err(Error::mismatch(op.name(), a.shape(), b.shape()));
        };
        let numel: usize = shape.iter().product();
        let ai = move |i: usize| if a_scalar { 0 } else { i };
        let bi = move |i: usize| if b_scalar { 0 } else { i };
        if let Binary::Div = op {
            if b.data().contains(&0.0) {
                return Err(Error::Domain {
                    op: "div",
                    detail: "division by zero".into(),
                });
            }
        }
        let (ad, bd) = (a.data(), b.data());
        let data: Vec<f64> = (0..numel)
            .map(|i| {
                let (x, y) = (ad[ai(i)], bd[bi(i)]);
                match op {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                }
            })
            .collect();
        let out = Rc::new(Tensor::from_parts(shape, data));
        Ok(self.tape.push(out, &[self, other], move |g, needs| {
            let g = g.data();
            let ga = needs[0].then(|| {
                let full: Vec<f64> = match op {
                    Binary::Add | Binary::Sub => g.to_vec(),
                    Binary::Mul => g
                        .iter()
                        .enumerate()
                        .map(|(i, g)| g * b.data()[bi(i)])
                        .collect(),
                    Binary::Div => g
                        .iter()
                        .enumerate()
                        .map(|(i, g)| g / b.data()[bi(i)])
                        .collect(),
                };
                fold(full, a_scalar, a.shape())
            });
            let gb = needs[1].then(|| {
                let full: Vec<f64> = match op {
                    Binary::Add => g.to_vec(),
                    Binary::Sub => g.iter().map(|g| -g).collect(),
                    Binary::Mul => g
                        .iter()
                        .enumerate()
                        .map(|(i, g)| g * a.data()[ai(i)])
                        .collect(),
                    Binary::Div => g
                        .iter()
                        .enumerate()
                        .map(|(i, g)| {
                            let y = b.data()[bi(i)];
                            -g * a.data()[ai(i)] / (y * y)
                        })
                        .collect(),
                };
                fold(full, b_scalar, b.shape())
            });
            vec![ga, gb]
        }))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Mul)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Div)
    }

    pub fn neg(self) -> Var<'t> {
        unary(self, |x| -x, |_, _| -1.0)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        unary(self, move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        unary(self, move |x| x + c, |_, _| 1.0)
    }

    pub fn exp(self) -> Var<'t> {
        unary(self, f64::exp, |_, y| y)
    }

    pub fn log(self) -> Result<Var<'t>> {
        if let Some(v) = self
            .value()
            .data()
            .iter()
            .find(|&&v| v <= 0.0 || v.is_nan())
        {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {v}"),
            });
        }
        Ok(unary(self, f64::ln, |x, _| 1.0 / x))
    }

    pub fn powf(self, p: f64) -> Result<Var<'t>> {
        let bad = self
            .value()
            .data()
            .iter()
            .copied()
            .find(|&x| !(x.powf(p).is_finite() && (p * x.powf(p - 1.0)).is_finite()));
        if let Some(x) = bad {
            return Err(Error::Domain {
                op: "pow",
                detail: format!("{x}^{p} or its derivative is not finite"),
            });
        }
        Ok(unary(
            self,
            move |x| x.powf(p),
            move |x, _| p * x.powf(p - 1.0),
        ))
    }

    pub fn sigmoid(self) -> Var<'t> {
        unary(self, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn relu(self) -> Var<'t> {
        unary(self, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        unary(
            self,
            move |x| x.clamp(lo, hi),
            move |x, _| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 },
        )
    }

    /// Identity forward, negated gradient backward. Exists so verification
    /// can plant a sign error and check that the gradient checks notice.
    pub fn negate_grad(self) -> Var<'t> {
        unary(self, |x| x, |_, _| -1.0)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let xv = self.value();
        let out = Rc::new(xv.reshape(shape)?);
        let in_shape = xv.shape().to_vec();
        Ok(self.tape.push(out, &[self], move |g, _| {
            vec![Some(Tensor::from_parts(
                in_shape.clone(),
                g.data().to_vec(),
            ))]
        }))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>> {
        let xv = self.value();
        let rank = xv.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank
            || axes
                .iter()
                .any(|&a| a >= rank || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::shape(
                "permute",
                xv.shape(),
                format!("bad axes {axes:?}"),
            ));
        }
        let (data, shape) = permute_data(xv.data(), xv.shape(), axes);
        let mut inverse = vec![0; rank];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(self.tape.push(
            Rc::new(Tensor::from_parts(shape, data)),
            &[self],
            move |g, _| {
                let (data, shape) = permute_data(g.data(), g.shape(), &inverse);
                vec![Some(Tensor::from_parts(shape, data))]
            },
        ))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        if self.value().rank() != 2 {
            return Err(Error::shape("transpose", &self.shape(), "expected rank 2"));
        }
        self.permute(&[1, 0])
    }

    /// Explicit broadcast of size-1 axes to `shape` (same rank).
    pub fn expand(self, shape: &[usize]) -> Result<Var<'t>> {
        let xv = self.value();
        let ok = xv.rank() == shape.len()
            && xv
                .shape()
                .iter()
                .zip(shape)
                .all(|(&s, &t)| s == t || s == 1)
            && shape.iter().all(|&t| t > 0);
        if !ok {
            return Err(Error::mismatch("expand", xv.shape(), shape));
        }
        let in_strides: Vec<usize> = strides(xv.shape())
            .into_iter()
            .zip(xv.shape())
            .map(|(st, &s)| if s == 1 { 0 } else { st })
            .collect();
        let out_shape = shape.to_vec();
        let mut data = vec![0.0; shape.iter().product()];
        for_each_strided(&out_shape, &in_strides, |o, i| data[o] = xv.data()[i]);
        let in_shape = xv.shape().to_vec();
        Ok(self.tape.push(
            Rc::new(Tensor::from_parts(out_shape.clone(), data)),
            &[self],
            move |g, _| {
                let mut grad = vec![0.0; in_shape.iter().product()];
                for_each_strided(&out_shape, &in_strides, |o, i| grad[i] += g.data()[o]);
                vec![Some(Tensor::from_parts(in_shape.clone(), grad))]
            },
        ))
    }

    /// Reduces over `axes`, removing them. An empty axis set is the identity.
    pub fn reduce(self, op: Reduce, axes: &[usize]) -> Result<Var<'t>> {
        let xv = self.value();
        let rank = xv.rank();
        if let Some(&a) = axes.iter().find(|&&a| a >= rank) {
            return Err(Error::shape(
                "reduce",
                xv.shape(),
                format!("axis {a} out of range"),
            ));
        }
        if axes.is_empty() {
            return Ok(self);
        }
        let reduced: Vec<bool> = (0..rank).map(|a| axes.contains(&a)).collect();
        let out_shape: Vec<usize> = (0..rank)
            .filter(|&a| !reduced[a])
            .map(|a| xv.shape()[a])
            .collect();
        let count: usize = (0..rank)
            .filter(|&a| reduced[a])
            .map(|a| xv.shape()[a])
            .product();
        if op == Reduce::Var && count < 2 {
            return Err(Error::DegenerateReduction { op: "var", count });
        }
        // Map every input element to its output slot.
        let out_strides = strides(&out_shape);
        let mut mapped = Vec::with_capacity(rank);
        let mut k = 0;
        for a in 0..rank {
            if reduced[a] {
                mapped.push(0);
            } else {
                mapped.push(out_strides[k]);
                k += 1;
            }
        }
        let mut slot = vec![0usize; xv.numel()];
        for_each_strided(xv.shape(), &mapped, |i, o| slot[i] = o);

        let out_len: usize = out_shape.iter().product();
        let mut sums = vec![0.0; out_len];
        for (x, &o) in xv.data().iter().zip(&slot) {
            sums[o] += x;
        }
        let n = count as f64;
        let means: Vec<f64> = sums.iter().map(|s| s / n).collect();
        let data = match op {
            Reduce::Sum => sums,
            Reduce::Mean => means.clone(),
            Reduce::Var => {
                let mut acc = vec![0.0; out_len];
                for (x, &o) in xv.data().iter().zip(&slot) {
                    let d = x - means[o];
                    acc[o] += d * d;
                }
                acc.into_iter().map(|s| s / (n - 1.0)).collect()
            }
        };
        let out = Rc::new(Tensor::from_parts(out_shape, data));
        Ok(self.tape.push(out, &[self], move |g, _| {
            let g = g.data();
            let grad = match op {
                Reduce::Sum => slot.iter().map(|&o| g[o]).collect(),
                Reduce::Mean => slot.iter().map(|&o| g[o] / n).collect(),
                Reduce::Var => xv
                    .data()
                    .iter()
                    .zip(&slot)
                    .map(|(x, &o)| g[o] * 2.0 * (x - means[o]) / (n - 1.0))
                    .collect(),
            };
            vec![Some(Tensor::from_parts(xv.shape().to_vec(), grad))]
        }))
    }

    pub fn sum(self, axes: &[usize]) -> Result<Var<'t>> {
        self.reduce(Reduce::Sum, axes)
    }

    pub fn mean(self, axes: &[usize]) -> Result<Var<'t>> {
        self.reduce(Reduce::Mean, axes)
    }

    pub fn var(self, axes: &[usize]) -> Result<Var<'t>> {
        self.reduce(Reduce::Var, axes)
    }

    pub fn sum_all(self) -> Var<'t> {
        let axes: Vec<usize> = (0..self.value().rank()).collect();
        self.reduce(Reduce::Sum, &axes).expect("valid axes")
    }

    pub fn mean_all(self) -> Var<'t> {
        let axes: Vec<usize> = (0..self.value().rank()).collect();
        self.reduce(Reduce::Mean, &axes).expect("valid axes")
    }

    /// Concatenates along `axis`; every other extent must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", &[], "no parts"))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape(
                "concat",
                &base,
                format!("axis {axis} out of range"),
            ));
        }
        for v in &values[1..] {
            let s = v.shape();
            let agree = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !agree {
                return Err(Error::mismatch("concat", &base, s));
            }
        }
        if parts.len() == 1 {
            return Ok(*first);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let blocks: Vec<usize> = values.iter().map(|v| v.shape()[axis] * inner).collect();
        let total: usize = blocks.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (v, &b) in values.iter().zip(&blocks) {
                data.extend_from_slice(&v.data()[o * b..(o + 1) * b]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = values.iter().map(|v| v.shape()[axis]).sum();
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        Ok(first.tape.push(
            Rc::new(Tensor::from_parts(shape, data)),
            parts,
            move |g, needs| {
                let mut offset = 0;
                let mut grads = Vec::with_capacity(blocks.len());
                for ((&b, shape), &need) in blocks.iter().zip(&shapes).zip(needs) {
                    let grad = need.then(|| {
                        let mut part = Vec::with_capacity(outer * b);
                        for o in 0..outer {
                            let start = o * total + offset;
                            part.extend_from_slice(&g.data()[start..start + b]);
                        }
                        Tensor::from_parts(shape.clone(), part)
                    });
                    grads.push(grad);
                    offset += b;
                }
                grads
            },
        ))
    }

    /// The slice `start..start + len` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                &shape,
                format!("cannot take {start}..{} on axis {axis}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis] * inner;
        let (from, block) = (start * inner, len * inner);
        let mut data = Vec::with_capacity(outer * block);
        for o in 0..outer {
            data.extend_from_slice(&xv.data()[o * full + from..o * full + from + block]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        Ok(self.tape.push(
            Rc::new(Tensor::from_parts(out_shape, data)),
            &[self],
            move |g, _| {
                let mut grad = vec![0.0; outer * full];
                for o in 0..outer {
                    grad[o * full + from..o * full + from + block]
                        .copy_from_slice(&g.data()[o * block..(o + 1) * block]);
                }
                vec![Some(Tensor::from_parts(shape.clone(), grad))]
            },
        ))
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(self, axis: usize, sizes: &[usize]) -> Result<Vec<Var<'t>>> {
        let extent = self.value().shape().get(axis).copied().unwrap_or(0);
        if sizes.iter().sum::<usize>() != extent {
            return Err(Error::shape(
                "split",
                &self.shape(),
                format!("sizes {sizes:?} on axis {axis}"),
            ));
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&len| {
                let piece = self.narrow(axis, start, len);
                start += len;
                piece
            })
            .collect()
    }

    /// `(m x k) · (k x n)`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::mismatch("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut data = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            Mat::row_major(a.data(), k),
            Mat::row_major(b.data(), n),
            0.0,
            &mut data,
        );
        let out = Rc::new(Tensor::from_parts(vec![m, n], data));
        Ok(self.tape.push(out, &[self, other], move |g, needs| {
            let ga = needs[0].then(|| {
                let mut d = vec![0.0; m * k];
                gemm(
                    m,
                    n,
                    k,
                    Mat::row_major(g.data(), n),
                    Mat::transposed(b.data(), n),
                    0.0,
                    &mut d,
                );
                Tensor::from_parts(vec![m, k], d)
            });
            let gb = needs[1].then(|| {
                let mut d = vec![0.0; k * n];
                gemm(
                    k,
                    m,
                    n,
                    Mat::transposed(a.data(), k),
                    Mat::row_major(g.data(), n),
                    0.0,
                    &mut d,
                );
                Tensor::from_parts(vec![k, n], d)
            });
            vec![ga, gb]
        }))
    }

    /// Adds `bias[c]` along axis 1 (the channel axis of NCHW, the feature
    /// axis of a row-major matrix).
    pub fn add_channel_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let xv = self.value();
        let bv = bias.value();
        if xv.rank() < 2 || bv.rank() != 1 || bv.numel() != xv.shape()[1] {
            return Err(Error::mismatch("add_channel_bias", xv.shape(), bv.shape()));
        }
        let channels = xv.shape()[1];
        let inner: usize = xv.shape()[2..].iter().product();
        let mut data = xv.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += bv.data()[(i / inner) % channels];
        }
        let shape = xv.shape().to_vec();
        Ok(self.tape.push(
            Rc::new(Tensor::from_parts(shape.clone(), data)),
            &[self, bias],
            move |g, needs| {
                let gb = needs[1].then(|| {
                    let mut acc = vec![0.0; channels];
                    for (i, v) in g.data().iter().enumerate() {
                        acc[(i / inner) % channels] += v;
                    }
                    Tensor::from_parts(vec![channels], acc)
                });
                vec![needs[0].then(|| g.clone()), gb]
            },
        ))
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tape};

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        assert_eq!(a.add(b).unwrap().value().data(), &[4.0, 6.0]);
        let z = tape.constant(t(&[2], &[0.0, 0.0]));
        let c = tape.constant(t(&[2], &[2.0, 3.0]));
        assert_eq!(c.mul(z).unwrap().value().data(), &[0.0, 0.0]);
        let zero = tape.constant(t(&[1], &[0.0]));
        assert_eq!(zero.sigmoid().value().data(), &[0.5]);
    }

    #[test]
    fn scalar_broadcast_only() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::ones(&[2, 3]));
        let s = tape.scalar(2.0);
        assert_eq!(a.mul(s).unwrap().value().data(), &[2.0; 6]);
        assert_eq!(s.sub(a).unwrap().shape(), vec![2, 3]);
        let row = tape.constant(Tensor::ones(&[3]));
        match a.add(row) {
            Err(Error::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![3]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn domain_errors() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(x.log(), Err(Error::Domain { op: "log", .. })));
        let y = tape.constant(t(&[2], &[1.0, 2.0]));
        assert!(matches!(y.div(x), Err(Error::Domain { .. })));
    }

    #[test]
    fn matmul_examples() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        assert_eq!(eye.matmul(b).unwrap().value().data(), b.value().data());
        // Hand arithmetic: [1*5+2*7, 1*6+2*8; 3*5+4*7, 3*6+4*8].
        assert_eq!(
            a.matmul(b).unwrap().value().data(),
            &[19.0, 22.0, 43.0, 50.0]
        );
        let z = tape.constant(Tensor::zeros(&[2, 3]));
        let any = tape.constant(Tensor::full(&[3, 4], 1.7));
        let out = z.matmul(any).unwrap();
        assert_eq!(out.shape(), vec![2, 4]);
        assert!(out.value().data().iter().all(|&v| v == 0.0));
        assert!(matches!(
            a.matmul(z.transpose().unwrap()),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn reduce_examples() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        assert_eq!(x.mean(&[0]).unwrap().item().unwrap(), 2.0);
        // Deviations -1, 0, 1 → squares sum 2, divisor 2.
        assert_eq!(x.var(&[0]).unwrap().item().unwrap(), 1.0);
        assert_eq!(x.sum(&[]).unwrap().value().data(), x.value().data());
        let single = tape.constant(Tensor::from_vec(vec![4.0]));
        assert!(matches!(
            single.var(&[0]),
            Err(Error::DegenerateReduction { count: 1, .. })
        ));

        let m = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        assert_eq!(m.sum(&[0]).unwrap().value().data(), &[5.0, 7.0, 9.0]);
        assert_eq!(m.sum(&[1]).unwrap().value().data(), &[6.0, 15.0]);
        assert_eq!(m.sum(&[0, 1]).unwrap().shape(), Vec::<usize>::new());
    }

    #[test]
    fn concat_and_split() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::full(&[1, 2, 4, 4], 1.0));
        let b = tape.constant(Tensor::full(&[1, 3, 4, 4], 2.0));
        let c = Var::concat(&[a, b], 1).unwrap();
        assert_eq!(c.shape(), vec![1, 5, 4, 4]);
        let parts = c.split(1, &[2, 3]).unwrap();
        assert_eq!(parts[0].value().data(), a.value().data());
        assert_eq!(parts[1].value().data(), b.value().data());
        let single = Var::concat(&[a], 1).unwrap();
        assert_eq!(single.value().as_ref(), a.value().as_ref());
        let bad = tape.constant(Tensor::zeros(&[1, 2, 4, 5]));
        assert!(matches!(
            Var::concat(&[a, bad], 1),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn permute_and_expand() {
        let tape = Tape::new();
        let m = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        assert_eq!(
            m.transpose().unwrap().value().data(),
            &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]
        );
        let col = tape.constant(t(&[2, 1], &[1.0, 2.0]));
        assert_eq!(
            col.expand(&[2, 3]).unwrap().value().data(),
            &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]
        );
        assert!(col.expand(&[3, 3]).is_err());
    }

    #[test]
    fn backward_examples() {
        let tape = Tape::new();
        let x = tape.param(&Tensor::zeros(&[2, 3]));
        let g = tape.backward(x.sum_all()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);

        let tape = Tape::new();
        let x = tape.param(&t(&[2], &[1.0, -2.0]));
        let g = x.mul(x).unwrap().sum_all().backward().unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0]);

        let tape = Tape::new();
        let x = tape.param(&t(&[3], &[0.3, 1.0, -4.0]));
        let g = x.add(x).unwrap().sum_all().backward().unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0; 3]);
    }

    #[test]
    fn backward_errors() {
        let tape = Tape::new();
        let x = tape.param(&Tensor::ones(&[2]));
        assert!(matches!(
            tape.backward(x.scale(2.0)),
            Err(Error::NonScalarLoss(_))
        ));
        let loss = x.sum_all();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::TapeConsumed)));
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let x = tape.param(&Tensor::ones(&[2]));
        let c = tape.constant(Tensor::full(&[2], 3.0));
        let g = x.mul(c).unwrap().sum_all().backward().unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn grad_check_linear_and_sigmoid() {
        let x = t(&[2, 2], &[0.1, -3.0, 2.5, 7.0]);
        let err = grad_check(|_, x| Ok(x.sum_all()), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
        let x = t(&[3, 3], &[-1.9, -1.2, -0.4, 0.0, 0.3, 0.8, 1.1, 1.6, 2.0]);
        let err = grad_check(|_, x| Ok(x.sigmoid().sum_all()), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
