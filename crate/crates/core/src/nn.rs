//! Encoder and decoder building blocks: the stride-2 CNN branch, the MBConv
//! branch, SimAM, the patch transformer and the upsampling decoder stage.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

pub const NORM_EPS: f64 = 1e-5;
pub const MBCONV_EXPANSION: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimamConfig {
    pub lambda: f64,
}

impl Default for SimamConfig {
    fn default() -> Self {
        Self { lambda: 1e-4 }
    }
}

impl SimamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "simam lambda must be positive, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub patch: usize,
    pub heads: usize,
    pub layers: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            patch: 4,
            heads: 2,
            layers: 1,
        }
    }
}

/// Largest divisor of `channels` not above 8.
pub fn norm_groups(channels: usize) -> usize {
    (1..=channels.min(8))
        .rev()
        .find(|g| channels.is_multiple_of(*g))
        .unwrap_or(1)
}

/// Named parameter tensors of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    tensors: BTreeMap<String, Tensor>,
}

fn uniform(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("positive extents")
}

impl BlockParams {
    pub fn new(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            stride,
            tensors: BTreeMap::new(),
        }
    }

    /// Adds a trainable tensor.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors
            .insert(name.into(), tensor.with_requires_grad(true));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("block parameter `{name}` is missing")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    fn conv(&mut self, name: &str, out: usize, inp: usize, k: usize, bias: bool, rng: &mut Rng) {
        let fan_in = inp * k * k;
        self.insert(
            format!("{name}.weight"),
            uniform(rng, &[out, inp, k, k], fan_in),
        );
        if bias {
            self.insert(format!("{name}.bias"), uniform(rng, &[out], fan_in));
        }
    }

    fn norm(&mut self, name: &str, channels: usize) {
        self.insert(format!("{name}.weight"), Tensor::ones(&[channels]));
        self.insert(format!("{name}.bias"), Tensor::zeros(&[channels]));
    }

    fn linear(&mut self, name: &str, inp: usize, out: usize, rng: &mut Rng) {
        self.insert(format!("{name}.weight"), uniform(rng, &[inp, out], inp));
        self.insert(format!("{name}.bias"), uniform(rng, &[out], inp));
    }

    /// 3x3 stride-2 convolution with bias, group norm, ReLU.
    pub fn cnn_down(in_channels: usize, out_channels: usize, rng: &mut Rng) -> Self {
        let mut p = Self::new(in_channels, out_channels, 2);
        p.conv("conv", out_channels, in_channels, 3, true, rng);
        p.norm("norm", out_channels);
        p
    }

    /// 1x1 expansion, 3x3 depthwise, 1x1 linear projection.
    pub fn mbconv(in_channels: usize, out_channels: usize, stride: usize, rng: &mut Rng) -> Self {
        let hidden = in_channels * MBCONV_EXPANSION;
        let mut p = Self::new(in_channels, out_channels, stride);
        p.conv("expand", hidden, in_channels, 1, false, rng);
        p.norm("expand_norm", hidden);
        p.insert("depthwise.weight", uniform(rng, &[hidden, 1, 3, 3], 9));
        p.norm("depthwise_norm", hidden);
        p.conv("project", out_channels, hidden, 1, false, rng);
        p.norm("project_norm", out_channels);
        p
    }

    /// A bare convolution with bias (DAC fusion, merge and head layers).
    pub fn conv_layer(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut Rng,
    ) -> Self {
        let mut p = Self::new(in_channels, out_channels, 1);
        p.conv("conv", out_channels, in_channels, kernel, true, rng);
        p
    }

    /// Upsample, concatenate the skip, 3x3 conv, group norm, ReLU.
    pub fn decoder(
        in_channels: usize,
        skip_channels: usize,
        out_channels: usize,
        rng: &mut Rng,
    ) -> Self {
        let mut p = Self::new(in_channels, out_channels, 1);
        p.conv(
            "conv",
            out_channels,
            in_channels + skip_channels,
            3,
            true,
            rng,
        );
        p.norm("norm", out_channels);
        p
    }

    /// Patch transformer over `tokens` patches of a `channels`-wide map.
    pub fn transformer(
        channels: usize,
        tokens: usize,
        cfg: &TransformerConfig,
        rng: &mut Rng,
    ) -> Self {
        let d = channels;
        let mut p = Self::new(channels, channels, 1);
        p.insert("pos_embed", uniform(rng, &[tokens, d], d));
        for l in 0..cfg.layers {
            p.norm(&format!("layer{l}.ln1"), d);
            for proj in ["q", "k", "v", "o"] {
                p.linear(&format!("layer{l}.attn.{proj}"), d, d, rng);
            }
            p.norm(&format!("layer{l}.ln2"), d);
            p.linear(&format!("layer{l}.mlp.fc1"), d, 2 * d, rng);
            p.linear(&format!("layer{l}.mlp.fc2"), 2 * d, d, rng);
        }
        p
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundBlock<'t> {
        Binder::new(tape).block("", self)
    }
}

/// A block's parameters registered on a tape.
#[derive(Clone, Debug)]
pub struct BoundBlock<'t> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> BoundBlock<'t> {
    pub fn var(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("block parameter `{name}` is missing")))
    }

    /// The named parameter, required to have exactly `shape`.
    fn expect(&self, name: &str, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.var(name)?;
        let actual = v.shape();
        if actual != shape {
            return Err(Error::ShapeMismatch {
                op: "block parameter",
                left: actual,
                right: shape.to_vec(),
            });
        }
        Ok(v)
    }

    /// Substitutes the variable bound under `name`.
    pub fn replace(&mut self, name: &str, var: Var<'t>) {
        self.vars.insert(name.to_string(), var);
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, Var<'t>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Registers parameters on a tape under dotted names and remembers them so
/// gradients can be routed back by name.
pub struct Binder<'t> {
    tape: &'t Tape,
    bound: Vec<(String, Var<'t>)>,
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<'t> Binder<'t> {
    pub fn new(tape: &'t Tape) -> Self {
        Self {
            tape,
            bound: Vec::new(),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn tensor(&mut self, name: &str, t: &Tensor) -> Var<'t> {
        let v = self.tape.leaf(t);
        self.bound.push((name.to_string(), v));
        v
    }

    pub fn block(&mut self, prefix: &str, p: &BlockParams) -> BoundBlock<'t> {
        let vars = p
            .iter()
            .map(|(name, t)| (name.to_string(), self.tensor(&join(prefix, name), t)))
            .collect();
        BoundBlock {
            in_channels: p.in_channels,
            out_channels: p.out_channels,
            stride: p.stride,
            vars,
        }
    }

    pub fn finish(self) -> Vec<(String, Var<'t>)> {
        self.bound
    }
}

fn nchw(op: &'static str, x: Var<'_>) -> Result<[usize; 4]> {
    let s = x.shape();
    <[usize; 4]>::try_from(s.as_slice())
        .map_err(|_| Error::shape(op, &s, "expected an NCHW tensor"))
}

fn norm_relu<'t>(
    x: Var<'t>,
    p: &BoundBlock<'t>,
    name: &str,
    channels: usize,
    relu: bool,
) -> Result<Var<'t>> {
    let gamma = p.expect(&format!("{name}.weight"), &[channels])?;
    let beta = p.expect(&format!("{name}.bias"), &[channels])?;
    let y = x.group_norm(gamma, beta, norm_groups(channels), NORM_EPS)?;
    Ok(if relu { y.relu() } else { y })
}

pub fn simam<'t>(x: Var<'t>, cfg: &SimamConfig) -> Result<Var<'t>> {
    cfg.validate()?;
    x.simam(cfg.lambda)
}

pub fn cnn_down<'t>(x: Var<'t>, p: &BoundBlock<'t>) -> Result<Var<'t>> {
    let [_, c, h, w] = nchw("cnn_down", x)?;
    if h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "cnn_down",
            &x.shape(),
            "spatial extents must be even and at least 2",
        ));
    }
    let o = p.out_channels;
    let k = p.expect("conv.weight", &[o, c, 3, 3])?;
    let b = p.expect("conv.bias", &[o])?;
    let y = x.conv2d(k, 2, 1)?.add_channel_bias(b)?;
    norm_relu(y, p, "norm", o, true)
}

pub fn mbconv<'t>(x: Var<'t>, p: &BoundBlock<'t>, stride: usize) -> Result<Var<'t>> {
    let [_, c, _, _] = nchw("mbconv", x)?;
    if !matches!(stride, 1 | 2) {
        return Err(Error::Config(format!(
            "mbconv stride must be 1 or 2, got {stride}"
        )));
    }
    let hidden = c * MBCONV_EXPANSION;
    let o = p.out_channels;
    let expand = p.expect("expand.weight", &[hidden, c, 1, 1])?;
    let depthwise = p.expect("depthwise.weight", &[hidden, 1, 3, 3])?;
    let project = p.expect("project.weight", &[o, hidden, 1, 1])?;

    let h = norm_relu(x.conv2d(expand, 1, 0)?, p, "expand_norm", hidden, true)?;
    let h = norm_relu(
        h.depthwise_conv2d(depthwise, stride, 1)?,
        p,
        "depthwise_norm",
        hidden,
        true,
    )?;
    let y = norm_relu(h.conv2d(project, 1, 0)?, p, "project_norm", o, false)?;
    if stride == 1 && c == o {
        y.add(x)
    } else {
        Ok(y)
    }
}

fn linear<'t>(
    x: Var<'t>,
    p: &BoundBlock<'t>,
    name: &str,
    inp: usize,
    out: usize,
) -> Result<Var<'t>> {
    let w = p.expect(&format!("{name}.weight"), &[inp, out])?;
    let b = p.expect(&format!("{name}.bias"), &[out])?;
    x.matmul(w)?.add_channel_bias(b)
}

fn layer_norm<'t>(x: Var<'t>, p: &BoundBlock<'t>, name: &str, d: usize) -> Result<Var<'t>> {
    let gamma = p.expect(&format!("{name}.weight"), &[d])?;
    let beta = p.expect(&format!("{name}.bias"), &[d])?;
    x.layer_norm(gamma, beta, NORM_EPS)
}

/// One pre-norm encoder layer on `[tokens, d]`; attention maps of every head
/// are pushed to `attention`.
fn encoder_layer<'t>(
    z: Var<'t>,
    p: &BoundBlock<'t>,
    layer: usize,
    heads: usize,
    attention: &mut Vec<Tensor>,
) -> Result<Var<'t>> {
    let d = z.shape()[1];
    let dh = d / heads;
    let pre = format!("layer{layer}");
    let h = layer_norm(z, p, &format!("{pre}.ln1"), d)?;
    let q = linear(h, p, &format!("{pre}.attn.q"), d, d)?;
    let k = linear(h, p, &format!("{pre}.attn.k"), d, d)?;
    let v = linear(h, p, &format!("{pre}.attn.v"), d, d)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for head in 0..heads {
        let qh = q.narrow(1, head * dh, dh)?;
        let kh = k.narrow(1, head * dh, dh)?;
        let vh = v.narrow(1, head * dh, dh)?;
        let a = qh.matmul(kh.transpose()?)?.scale(scale).softmax(1)?;
        attention.push(a.value().as_ref().clone());
        outs.push(a.matmul(vh)?);
    }
    let attn = linear(Var::concat(&outs, 1)?, p, &format!("{pre}.attn.o"), d, d)?;
    let z = z.add(attn)?;
    let h = layer_norm(z, p, &format!("{pre}.ln2"), d)?;
    let h = linear(h, p, &format!("{pre}.mlp.fc1"), d, 2 * d)?.relu();
    let h = linear(h, p, &format!("{pre}.mlp.fc2"), 2 * d, d)?;
    z.add(h)
}

/// Patch transformer: average-pool `patch x patch` windows into tokens, add
/// the positional embedding, run the encoder layers, and add the token
/// update (upsampled back to pixel resolution) to the input.
pub fn transformer_block<'t>(
    x: Var<'t>,
    p: &BoundBlock<'t>,
    cfg: &TransformerConfig,
) -> Result<Var<'t>> {
    transformer_block_with_attention(x, p, cfg).map(|(y, _)| y)
}

/// [`transformer_block`] that also returns every attention matrix
/// (`[tokens, tokens]`, one per sample, layer and head).
pub fn transformer_block_with_attention<'t>(
    x: Var<'t>,
    p: &BoundBlock<'t>,
    cfg: &TransformerConfig,
) -> Result<(Var<'t>, Vec<Tensor>)> {
    let [n, c, h, w] = nchw("transformer_block", x)?;
    let patch = cfg.patch;
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(
            "transformer_block",
            &x.shape(),
            format!("extents not divisible by patch size {patch}"),
        ));
    }
    if cfg.heads == 0 || c % cfg.heads != 0 {
        return Err(Error::Config(format!(
            "{c} channels cannot be split into {} heads",
            cfg.heads
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let tokens = gh * gw;
    let pos = p.expect("pos_embed", &[tokens, c])?;
    let mut attention = Vec::new();
    let mut outputs = Vec::with_capacity(n);
    for i in 0..n {
        let xi = x.narrow(0, i, 1)?;
        let t = xi.avg_pool(patch)?.reshape(&[c, tokens])?.transpose()?;
        let z0 = t.add(pos)?;
        let mut z = z0;
        for layer in 0..cfg.layers {
            z = encoder_layer(z, p, layer, cfg.heads, &mut attention)?;
        }
        let update = z
            .sub(z0)?
            .transpose()?
            .reshape(&[1, c, gh, gw])?
            .upsample_nearest(patch)?;
        outputs.push(xi.add(update)?);
    }
    Ok((Var::concat(&outputs, 0)?, attention))
}

pub fn decoder_block<'t>(x: Var<'t>, skip: Var<'t>, p: &BoundBlock<'t>) -> Result<Var<'t>> {
    let up = x.upsample_nearest(2)?;
    let [n, c, h, w] = nchw("decoder_block", up)?;
    let [sn, sc, sh, sw] = nchw("decoder_block", skip)?;
    if (n, h, w) != (sn, sh, sw) {
        return Err(Error::mismatch("decoder_block", &up.shape(), &skip.shape()));
    }
    let o = p.out_channels;
    let k = p.expect("conv.weight", &[o, c + sc, 3, 3])?;
    let b = p.expect("conv.bias", &[o])?;
    let y = Var::concat(&[up, skip], 1)?
        .conv2d(k, 1, 1)?
        .add_channel_bias(b)?;
    norm_relu(y, p, "norm", o, true)
}

/// Convolution with bias using the block's `conv.*` parameters.
pub fn conv_layer<'t>(x: Var<'t>, p: &BoundBlock<'t>, padding: usize) -> Result<Var<'t>> {
    let k = p.var("conv.weight")?;
    let b = p.var("conv.bias")?;
    x.conv2d(k, 1, padding)?.add_channel_bias(b)
}
