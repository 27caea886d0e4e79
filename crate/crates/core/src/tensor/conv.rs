//! Spatial ops on NCHW tensors.

use std::rc::Rc;

use super::gemm::{gemm, Mat};
use super::ops::sigmoid;
use super::{Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn new(
        op: &'static str,
        input: &[usize],
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (h, w) = (input[2], input[3]);
        if stride == 0 {
            return Err(Error::shape(op, input, "stride must be positive"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(
                op,
                input,
                format!("{kh}x{kw} kernel with padding {pad} leaves no output"),
            ));
        }
        Ok(Self {
            channels: input[1],
            height: h,
            width: w,
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Source pixel for output position `o` and kernel offset `k` along one
    /// axis, or `None` inside the padding.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let cols = self.col_cols();
        for c in 0..self.channels {
            let plane = &x[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for oy in 0..self.out_h {
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        match self.source(oy, ky, self.height) {
                            None => line.fill(0.0),
                            Some(iy) => {
                                let src = &plane[iy * self.width..(iy + 1) * self.width];
                                for (ox, v) in line.iter_mut().enumerate() {
                                    *v = self.source(ox, kx, self.width).map_or(0.0, |ix| src[ix]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], dx: &mut [f64]) {
        let cols = self.col_cols();
        for c in 0..self.channels {
            let plane = &mut dx[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &col[row * cols..(row + 1) * cols];
                    for oy in 0..self.out_h {
                        let Some(iy) = self.source(oy, ky, self.height) else {
                            continue;
                        };
                        for ox in 0..self.out_w {
                            if let Some(ix) = self.source(ox, kx, self.width) {
                                plane[iy * self.width + ix] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_nchw(op: &'static str, shape: &[usize]) -> Result<()> {
    if shape.len() != 4 {
        return Err(Error::shape(op, shape, "expected an NCHW tensor"));
    }
    Ok(())
}

impl<'t> Var<'t> {
    /// Cross-correlation of an NCHW input with an OCKK kernel (no flip).
    pub fn conv2d(self, kernel: Var<'t>, stride: usize, padding: usize) -> Result<Var<'t>> {
        let xv = self.value();
        let wv = kernel.value();
        check_nchw("conv2d", xv.shape())?;
        if wv.rank() != 4 || wv.shape()[1] != xv.shape()[1] {
            return Err(Error::mismatch("conv2d", xv.shape(), wv.shape()));
        }
        let (batch, out_c) = (xv.shape()[0], wv.shape()[0]);
        let geom = ConvGeom::new(
            "conv2d",
            xv.shape(),
            wv.shape()[2],
            wv.shape()[3],
            stride,
            padding,
        )?;
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let in_len = geom.channels * geom.height * geom.width;
        let out_len = out_c * cols;

        let mut out = vec![0.0; batch * out_len];
        let mut col = if geom.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; rows * cols]
        };
        for n in 0..batch {
            let x = &xv.data()[n * in_len..(n + 1) * in_len];
            let b = if geom.is_pointwise() {
                x
            } else {
                geom.im2col(x, &mut col);
                &col
            };
            gemm(
                out_c,
                rows,
                cols,
                Mat::row_major(wv.data(), rows),
                Mat::row_major(b, cols),
                0.0,
                &mut out[n * out_len..(n + 1) * out_len],
            );
        }
        let shape = vec![batch, out_c, geom.out_h, geom.out_w];
        Ok(self.tape.push(
            Rc::new(Tensor::from_parts(shape, out)),
            &[self, kernel],
            move |g, needs| {
                let mut dx = needs[0].then(|| vec![0.0; batch * in_len]);
                let mut dw = needs[1].then(|| vec![0.0; out_c * rows]);
                let mut col = vec![0.0; if geom.is_pointwise() { 0 } else { rows * cols }];
                let mut dcol = vec![0.0; rows * cols];
                for n in 0..batch {
                    let gout = &g.data()[n * out_len..(n + 1) * out_len];
                    if let Some(dw) = dw.as_mut() {
                        let x = &xv.data()[n * in_len..(n + 1) * in_len];
                        let b: &[f64] = if geom.is_pointwise() {
                            x
                        } else {
                            geom.im2col(x, &mut col);
                            &col
                        };
                        gemm(
                            out_c,
                            cols,
                            rows,
                            Mat::row_major(gout, cols),
                            Mat::transposed(b, cols),
                            1.0,
                            dw,
                        );
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dst = &mut dx[n * in_len..(n + 1) * in_len];
                        if geom.is_pointwise() {
                            gemm(
                                rows,
                                out_c,
                                cols,
                                Mat::transposed(wv.data(), rows),
                                Mat::row_major(gout, cols),
                                0.0,
                                dst,
                            );
                        } else {
                            gemm(
                                rows,
                                out_c,
                                cols,
                                Mat::transposed(wv.data(), rows),
                                Mat::row_major(gout, cols),
                                0.0,
                                &mut dcol,
                            );
                            geom.col2im(&dcol, dst);
                        }
                    }
                }
                vec![
                    dx.map(|d| Tensor::from_parts(xv.shape().to_vec(), d)),
                    dw.map(|d| Tensor::from_parts(wv.shape().to_vec(), d)),
                ]
            },
        ))
    }

    /// Per-channel convolution with a `C x 1 x K x K` kernel.
    pub fn depthwise_conv2d(
        self,
        kernel: Var<'t>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t>> {
        let xv = self.value();
        let wv = kernel.value();
        check_nchw("depthwise_conv2d", xv.shape())?;
        if wv.rank() != 4 || wv.shape()[0] != xv.shape()[1] || wv.shape()[1] != 1 {
            return Err(Error::mismatch("depthwise_conv2d", xv.shape(), wv.shape()));
        }
        let geom = ConvGeom::new(
            "depthwise_conv2d",
            xv.shape(),
            wv.shape()[2],
            wv.shape()[3],
            stride,
            padding,
        )?;
        let batch = xv.shape()[0];
        let (h, w, kh, kw) = (geom.height, geom.width, geom.kh, geom.kw);
        let (oh, ow) = (geom.out_h, geom.out_w);
        let planes = batch * geom.channels;
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            let c = p % geom.channels;
            let x = &xv.data()[p * h * w..(p + 1) * h * w];
            let k = &wv.data()[c * kh * kw..(c + 1) * kh * kw];
            let o = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for oy in 0..oh {
                for ky in 0..kh {
                    let Some(iy) = geom.source(oy, ky, h) else {
                        continue;
                    };
                    for kx in 0..kw {
                        let kv = k[ky * kw + kx];
                        for ox in 0..ow {
                            if let Some(ix) = geom.source(ox, kx, w) {
                                o[oy * ow + ox] += kv * x[iy * w + ix];
                            }
                        }
                    }
                }
            }
        }
        let shape = vec![batch, geom.channels, oh, ow];
        Ok(self.tape.push(
            Rc::new(Tensor::from_parts(shape, out)),
            &[self, kernel],
            move |g, needs| {
                let mut dx = needs[0].then(|| vec![0.0; xv.numel()]);
                let mut dw = needs[1].then(|| vec![0.0; wv.numel()]);
                for p in 0..planes {
                    let c = p % geom.channels;
                    let go = &g.data()[p * oh * ow..(p + 1) * oh * ow];
                    let x = &xv.data()[p * h * w..(p + 1) * h * w];
                    let k = &wv.data()[c * kh * kw..(c + 1) * kh * kw];
                    for oy in 0..oh {
                        for ky in 0..kh {
                            let Some(iy) = geom.source(oy, ky, h) else {
                                continue;
                            };
                            for kx in 0..kw {
                                for ox in 0..ow {
                                    let Some(ix) = geom.source(ox, kx, w) else {
                                        continue;
                                    };
                                    let gv = go[oy * ow + ox];
                                    if let Some(dx) = dx.as_mut() {
                                        dx[p * h * w + iy * w + ix] += gv * k[ky * kw + kx];
                                    }
                                    if let Some(dw) = dw.as_mut() {
                                        dw[c * kh * kw + ky * kw + kx] += gv * x[iy * w + ix];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![
                    dx.map(|d| Tensor::from_parts(xv.shape().to_vec(), d)),
                    dw.map(|d| Tensor::from_parts(wv.shape().to_vec(), d)),
                ]
            },
        ))
    }

    /// Nearest-neighbour upsampling by an integer factor on H and W.
    pub fn upsample_nearest(self, factor: usize) -> Result<Var<'t>> {
        let xv = self.value();
        check_nchw("upsample_nearest", xv.shape())?;
        if factor == 0 {
            return Err(Error::shape(
                "upsample_nearest",
                xv.shape(),
                "factor must be positive",
            ));
        }
        let s = xv.shape();
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h * factor, w * factor);
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            for oy in 0..oh {
                for ox in 0..ow {
                    out[(p * oh + oy) * ow + ox] =
                        xv.data()[(p * h + oy / factor) * w + ox / factor];
                }
            }
        }
        let shape = vec![s[0], s[1], oh, ow];
        Ok(self.tape.push(
            Rc::new(Tensor::from_parts(shape, out)),
            &[self],
            move |g, _| {
                let mut dx = vec![0.0; xv.numel()];
                for p in 0..planes {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            dx[(p * h + oy / factor) * w + ox / factor] +=
                                g.data()[(p * oh + oy) * ow + ox];
                        }
                    }
                }
                vec![Some(Tensor::from_parts(xv.shape().to_vec(), dx))]
            },
        ))
    }

    /// Average pooling over non-overlapping `factor x factor` windows.
    pub fn avg_pool(self, factor: usize) -> Result<Var<'t>> {
        let xv = self.value();
        check_nchw("avg_pool", xv.shape())?;
        let s = xv.shape();
        if factor == 0 || !s[2].is_multiple_of(factor) || !s[3].is_multiple_of(factor) {
            return Err(Error::shape(
                "avg_pool",
                s,
                format!("extents not divisible by {factor}"),
            ));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / factor, w / factor);
        let area = (factor * factor) as f64;
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            for y in 0..h {
                for x in 0..w {
                    out[(p * oh + y / factor) * ow + x / factor] +=
                        xv.data()[(p * h + y) * w + x] / area;
                }
            }
        }
        let shape = vec![s[0], s[1], oh, ow];
        Ok(self.tape.push(
            Rc::new(Tensor::from_parts(shape, out)),
            &[self],
            move |g, _| {
                let mut dx = vec![0.0; planes * h * w];
                for p in 0..planes {
                    for y in 0..h {
                        for x in 0..w {
                            dx[(p * h + y) * w + x] =
                                g.data()[(p * oh + y / factor) * ow + x / factor] / area;
                        }
                    }
                }
                vec![Some(Tensor::from_parts(xv.shape().to_vec(), dx))]
            },
        ))
    }

    /// Zero padding of `pad` pixels on every spatial border.
    pub fn pad2d(self, pad: usize) -> Result<Var<'t>> {
        let xv = self.value();
        check_nchw("pad2d", xv.shape())?;
        let s = xv.shape().to_vec();
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let mut out = vec![0.0; planes * ph * pw];
        for p in 0..planes {
            for y in 0..h {
                let dst = (p * ph + y + pad) * pw + pad;
                out[dst..dst + w].copy_from_slice(&xv.data()[(p * h + y) * w..(p * h + y + 1) * w]);
            }
        }
        let shape = vec![s[0], s[1], ph, pw];
        Ok(self.tape.push(
            Rc::new(Tensor::from_parts(shape, out)),
            &[self],
            move |g, _| {
                let mut dx = vec![0.0; planes * h * w];
                for p in 0..planes {
                    for y in 0..h {
                        let src = (p * ph + y + pad) * pw + pad;
                        dx[(p * h + y) * w..(p * h + y + 1) * w]
                            .copy_from_slice(&g.data()[src..src + w]);
                    }
                }
                vec![Some(Tensor::from_parts(s.clone(), dx))]
            },
        ))
    }

    /// The `height x width` window whose top-left corner is `(top, left)`.
    pub fn crop2d(self, top: usize, left: usize, height: usize, width: usize) -> Result<Var<'t>> {
        check_nchw("crop2d", &self.shape())?;
        self.narrow(2, top, height)?.narrow(3, left, width)
    }

    /// Parameter-free attention: every activation is gated by
    /// `sigmoid(d / (4 (v + lambda)) + 0.5)` where `d` is its squared
    /// deviation from the channel mean and `v` the channel's spatial variance
    /// with divisor `HW - 1`.
    pub fn simam(self, lambda: f64) -> Result<Var<'t>> {
        let xv = self.value();
        check_nchw("simam", xv.shape())?;
        let s = xv.shape();
        let hw = s[2] * s[3];
        if hw < 2 {
            return Err(Error::DegenerateReduction {
                op: "simam",
                count: hw,
            });
        }
        let planes = s[0] * s[1];
        let denom = (hw - 1) as f64;
        let mut out = vec![0.0; xv.numel()];
        let mut gate = vec![0.0; xv.numel()];
        let mut means = vec![0.0; planes];
        let mut inv = vec![0.0; planes];
        for p in 0..planes {
            let x = &xv.data()[p * hw..(p + 1) * hw];
            let mu = x.iter().sum::<f64>() / hw as f64;
            let v = x.iter().map(|&t| (t - mu) * (t - mu)).sum::<f64>() / denom;
            let r = 1.0 / (4.0 * (v + lambda));
            for (i, &t) in x.iter().enumerate() {
                let a = sigmoid((t - mu) * (t - mu) * r + 0.5);
                gate[p * hw + i] = a;
                out[p * hw + i] = t * a;
            }
            means[p] = mu;
            inv[p] = r;
        }
        let shape = s.to_vec();
        Ok(self.tape.push(
            Rc::new(Tensor::from_parts(shape, out)),
            &[self],
            move |g, _| {
                let mut dx = vec![0.0; xv.numel()];
                for p in 0..planes {
                    let range = p * hw..(p + 1) * hw;
                    let (x, a, gp) = (
                        &xv.data()[range.clone()],
                        &gate[range.clone()],
                        &g.data()[range.clone()],
                    );
                    let (mu, r) = (means[p], inv[p]);
                    // energy e_t = d_t r + 1/2 with r = 1 / (4 (v + lambda)).
                    let de: Vec<f64> = (0..hw)
                        .map(|t| gp[t] * x[t] * a[t] * (1.0 - a[t]))
                        .collect();
                    let dv: f64 = (0..hw)
                        .map(|t| de[t] * (x[t] - mu) * (x[t] - mu))
                        .sum::<f64>()
                        * (-4.0 * r * r);
                    let dd: Vec<f64> = (0..hw).map(|t| de[t] * r + dv / denom).collect();
                    let dmu: f64 = (0..hw).map(|t| -2.0 * dd[t] * (x[t] - mu)).sum();
                    let out = &mut dx[range];
                    for t in 0..hw {
                        out[t] = gp[t] * a[t] + 2.0 * dd[t] * (x[t] - mu) + dmu / hw as f64;
                    }
                }
                vec![Some(Tensor::from_parts(xv.shape().to_vec(), dx))]
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, grad_check_many, Tape};

    fn ramp(shape: &[usize], scale: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|i| ((i * 7919) % 23) as f64 / 23.0 * scale - scale / 2.0)
            .collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn identity_kernel() {
        let tape = Tape::new();
        let x = tape.constant(ramp(&[2, 1, 5, 3], 2.0));
        let k = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
        let y = x.conv2d(k, 1, 0).unwrap();
        assert_eq!(y.value().as_ref(), x.value().as_ref());
    }

    #[test]
    fn all_ones_sum() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let k = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = x.conv2d(k, 1, 0).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 1, 1]);
        assert_eq!(y.item().unwrap(), 9.0);
    }

    #[test]
    fn stride_and_padding_shapes() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 4, 4]));
        let k = tape.constant(Tensor::ones(&[1, 1, 2, 2]));
        assert_eq!(x.conv2d(k, 2, 0).unwrap().shape(), vec![1, 1, 2, 2]);
        let k3 = tape.constant(Tensor::ones(&[3, 1, 3, 3]));
        assert_eq!(x.conv2d(k3, 2, 1).unwrap().shape(), vec![1, 3, 2, 2]);
        // Corner of a padded all-ones input sees 4 of the 9 taps.
        assert_eq!(x.conv2d(k3, 1, 1).unwrap().value().data()[0], 4.0);
    }

    #[test]
    fn conv_errors() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 2, 4, 4]));
        let k = tape.constant(Tensor::ones(&[1, 3, 3, 3]));
        assert!(matches!(
            x.conv2d(k, 1, 0),
            Err(Error::ShapeMismatch { .. })
        ));
        let big = tape.constant(Tensor::ones(&[1, 2, 5, 5]));
        assert!(matches!(
            x.conv2d(big, 1, 0),
            Err(Error::InvalidShape { .. })
        ));
    }

    #[test]
    fn conv_matches_direct_sum() {
        let x = ramp(&[2, 3, 5, 6], 3.0);
        let w = ramp(&[4, 3, 3, 3], 1.0);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
            let tape = Tape::new();
            let y = tape
                .constant(x.clone())
                .conv2d(tape.constant(w.clone()), stride, pad)
                .unwrap()
                .value();
            let (oh, ow) = (y.shape()[2], y.shape()[3]);
            for n in 0..2 {
                for o in 0..4 {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = 0.0;
                            for c in 0..3 {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if iy >= 0
                                            && ix >= 0
                                            && (iy as usize) < 5
                                            && (ix as usize) < 6
                                        {
                                            acc += w.at(&[o, c, ky, kx])
                                                * x.at(&[n, c, iy as usize, ix as usize]);
                                        }
                                    }
                                }
                            }
                            assert!((y.at(&[n, o, oy, ox]) - acc).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn conv_gradients() {
        for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0)] {
            let x = ramp(&[2, 2, 5, 4], 2.0);
            let w = ramp(&[3, 2, k, k], 1.0);
            let err = grad_check_many(
                |_, v| Ok(v[0].conv2d(v[1], stride, pad)?.powf(2.0)?.sum_all()),
                &[x, w],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "k={k} s={stride} p={pad}: {err}");
        }
    }

    #[test]
    fn depthwise_matches_grouped_dense() {
        // A depthwise kernel equals a dense kernel that is zero off the diagonal.
        let x = ramp(&[1, 3, 6, 6], 2.0);
        let dw = ramp(&[3, 1, 3, 3], 1.0);
        let mut dense = Tensor::zeros(&[3, 3, 3, 3]);
        for c in 0..3 {
            for t in 0..9 {
                dense.data_mut()[(c * 3 + c) * 9 + t] = dw.data()[c * 9 + t];
            }
        }
        for stride in [1, 2] {
            let tape = Tape::new();
            let a = tape
                .constant(x.clone())
                .depthwise_conv2d(tape.constant(dw.clone()), stride, 1)
                .unwrap();
            let b = tape
                .constant(x.clone())
                .conv2d(tape.constant(dense.clone()), stride, 1)
                .unwrap();
            for (p, q) in a.value().data().iter().zip(b.value().data()) {
                assert!((p - q).abs() < 1e-12);
            }
        }
        let err = grad_check_many(
            |_, v| Ok(v[0].depthwise_conv2d(v[1], 2, 1)?.powf(2.0)?.sum_all()),
            &[x, dw],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn nearest_upsample() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = x.upsample_nearest(2).unwrap();
        assert_eq!(
            y.value().data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        assert_eq!(y.avg_pool(2).unwrap().value().data(), x.value().data());
    }

    #[test]
    fn pad_crop_inverse() {
        let tape = Tape::new();
        let x = tape.constant(ramp(&[2, 3, 4, 5], 1.0));
        let y = x.pad2d(2).unwrap();
        assert_eq!(y.shape(), vec![2, 3, 8, 9]);
        assert_eq!(
            y.crop2d(2, 2, 4, 5).unwrap().value().as_ref(),
            x.value().as_ref()
        );
    }

    #[test]
    fn spatial_gradients() {
        let x = ramp(&[1, 2, 4, 4], 2.0);
        let err = grad_check(
            |_, v| Ok(v.upsample_nearest(2)?.powf(2.0)?.sum_all()),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6);
        let err = grad_check(|_, v| Ok(v.avg_pool(2)?.powf(2.0)?.sum_all()), &x, 1e-5).unwrap();
        assert!(err < 1e-6);
        let err = grad_check(|_, v| Ok(v.pad2d(1)?.sigmoid().sum_all()), &x, 1e-5).unwrap();
        assert!(err < 1e-6);
    }

    #[test]
    fn simam_constant_channel() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 2.5));
        let y = x.simam(1e-4).unwrap();
        let gate = 1.0 / (1.0 + (-0.5f64).exp());
        for v in y.value().data() {
            assert_eq!(*v, 2.5 * gate);
        }
        assert!((gate - 0.622459).abs() < 1e-6);
    }

    #[test]
    fn simam_hot_pixel() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 1, 2, 2], vec![10.0, 0.0, 0.0, 0.0]).unwrap());
        let y = x.simam(1e-4).unwrap();
        // Direct evaluation: mean 2.5, squared deviations (56.25, 6.25 x3),
        // variance 75 / 3 = 25.
        let lambda = 1e-4;
        let v = 75.0 / 3.0;
        let gate = |d: f64| 1.0 / (1.0 + (-(d / (4.0 * (v + lambda)) + 0.5)).exp());
        let (hot, cold) = (gate(56.25), gate(6.25));
        assert!(hot > cold);
        let expected = [10.0 * hot, 0.0, 0.0, 0.0];
        for (a, b) in y.value().data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn simam_degenerate_and_gradient() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 2, 1, 1]));
        assert!(matches!(
            x.simam(1e-4),
            Err(Error::DegenerateReduction { .. })
        ));
        let x = ramp(&[2, 3, 3, 4], 3.0);
        let err = grad_check(|_, v| Ok(v.simam(1e-4)?.powf(2.0)?.sum_all()), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
