use std::rc::Rc;

use super::{Tensor, Var};
use crate::error::{Error, Result};

/// Contiguous segments of `seg_len` elements are standardized independently;
/// the affine parameters are indexed by `(flat / inner) % channels`.
#[derive(Clone, Copy)]
struct Layout {
    seg_len: usize,
    inner: usize,
    channels: usize,
}

fn normalize<'t>(x: Var<'t>, gamma: Var<'t>, beta: Var<'t>, layout: Layout, eps: f64) -> Var<'t> {
    let xv = x.value();
    let gv = gamma.value();
    let bv = beta.value();
    let Layout {
        seg_len,
        inner,
        channels,
    } = layout;
    let segments = xv.numel() / seg_len;
    let chan = move |i: usize| (i / inner) % channels;

    let mut xhat = vec![0.0; xv.numel()];
    let mut rstd = vec![0.0; segments];
    for s in 0..segments {
        let seg = &xv.data()[s * seg_len..(s + 1) * seg_len];
        let mean = seg.iter().sum::<f64>() / seg_len as f64;
        let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / seg_len as f64;
        let r = 1.0 / (var + eps).sqrt();
        for (j, v) in seg.iter().enumerate() {
            xhat[s * seg_len + j] = (v - mean) * r;
        }
        rstd[s] = r;
    }
    let out: Vec<f64> = xhat
        .iter()
        .enumerate()
        .map(|(i, h)| h * gv.data()[chan(i)] + bv.data()[chan(i)])
        .collect();
    let shape = xv.shape().to_vec();
    x.tape.push(
        Rc::new(Tensor::from_parts(shape.clone(), out)),
        &[x, gamma, beta],
        move |g, needs| {
            let g = g.data();
            let mut dgamma = vec![0.0; channels];
            let mut dbeta = vec![0.0; channels];
            for (i, (&gi, &h)) in g.iter().zip(&xhat).enumerate() {
                dgamma[chan(i)] += gi * h;
                dbeta[chan(i)] += gi;
            }
            let dx = needs[0].then(|| {
                let mut dx = vec![0.0; g.len()];
                for s in 0..segments {
                    let range = s * seg_len..(s + 1) * seg_len;
                    let mut mean_d = 0.0;
                    let mut mean_dh = 0.0;
                    for i in range.clone() {
                        let d = g[i] * gv.data()[chan(i)];
                        mean_d += d;
                        mean_dh += d * xhat[i];
                    }
                    mean_d /= seg_len as f64;
                    mean_dh /= seg_len as f64;
                    for i in range {
                        let d = g[i] * gv.data()[chan(i)];
                        dx[i] = rstd[s] * (d - mean_d - xhat[i] * mean_dh);
                    }
                }
                Tensor::from_parts(shape.clone(), dx)
            });
            vec![
                dx,
                needs[1].then(|| Tensor::from_parts(vec![channels], dgamma)),
                needs[2].then(|| Tensor::from_parts(vec![channels], dbeta)),
            ]
        },
    )
}

impl<'t> Var<'t> {
    /// Group normalization over (channel-group, spatial) blocks of an
    /// `N x C x ...` tensor, followed by a per-channel affine map.
    pub fn group_norm(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        groups: usize,
        eps: f64,
    ) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() < 2 || groups == 0 || !shape[1].is_multiple_of(groups) {
            return Err(Error::shape(
                "group_norm",
                &shape,
                format!("{groups} groups"),
            ));
        }
        let channels = shape[1];
        if gamma.shape() != [channels] || beta.shape() != [channels] {
            return Err(Error::mismatch("group_norm", &shape, &gamma.shape()));
        }
        let inner: usize = shape[2..].iter().product();
        let layout = Layout {
            seg_len: channels / groups * inner,
            inner,
            channels,
        };
        Ok(normalize(self, gamma, beta, layout, eps))
    }

    /// Normalization over the last axis with a per-feature affine map.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let shape = self.shape();
        let features = *shape
            .last()
            .ok_or_else(|| Error::shape("layer_norm", &shape, "rank 0"))?;
        if gamma.shape() != [features] || beta.shape() != [features] {
            return Err(Error::mismatch("layer_norm", &shape, &gamma.shape()));
        }
        let layout = Layout {
            seg_len: features,
            inner: 1,
            channels: features,
        };
        Ok(normalize(self, gamma, beta, layout, eps))
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "softmax",
                &shape,
                format!("axis {axis} out of range"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let idx = move |o: usize, k: usize, i: usize| (o * len + k) * inner + i;
        let mut out = vec![0.0; xv.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let max = (0..len)
                    .map(|k| xv.data()[idx(o, k, i)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (xv.data()[idx(o, k, i)] - max).exp();
                    out[idx(o, k, i)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[idx(o, k, i)] /= total;
                }
            }
        }
        let y = Rc::new(Tensor::from_parts(shape.clone(), out));
        let saved = Rc::clone(&y);
        Ok(self.tape.push(y, &[self], move |g, _| {
            let (g, y) = (g.data(), saved.data());
            let mut dx = vec![0.0; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let dot: f64 = (0..len).map(|k| g[idx(o, k, i)] * y[idx(o, k, i)]).sum();
                    for k in 0..len {
                        let j = idx(o, k, i);
                        dx[j] = y[j] * (g[j] - dot);
                    }
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), dx))]
        }))
    }
}
