//! The segmentation network: five stride-2 encoder levels, each fusing a
//! CNN branch and an MBConv branch, a patch transformer on the first CNN
//! level, and a skip-connected decoder ending in a two-class softmax.

use serde::{Deserialize, Serialize};

use crate::dac::{self, BoundDac, DacLayer};
use crate::error::{Error, Result};
use crate::nn::{self, Binder, BlockParams, BoundBlock, SimamConfig, TransformerConfig};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};

pub const NUM_CLASSES: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub num_levels: usize,
    pub channels_per_level: Vec<usize>,
    pub transformer: TransformerConfig,
    pub simam_lambda: f64,
    pub image_size: usize,
    /// When false, each level sums its two branches through a 1x1 conv.
    pub use_dac: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_channels: 3,
            num_levels: 5,
            channels_per_level: vec![16, 32, 64, 96, 128],
            transformer: TransformerConfig::default(),
            simam_lambda: SimamConfig::default().lambda,
            image_size: 64,
            use_dac: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config(msg));
        if self.num_levels != 5 || self.channels_per_level.len() != self.num_levels {
            return err(format!(
                "the encoder has exactly 5 levels, got num_levels {} with {} channel counts",
                self.num_levels,
                self.channels_per_level.len()
            ));
        }
        if self.input_channels == 0 || self.channels_per_level[0] == 0 {
            return err("channel counts must be positive".into());
        }
        if self.channels_per_level.windows(2).any(|w| w[0] >= w[1]) {
            return err(format!(
                "channels {:?} must be strictly increasing",
                self.channels_per_level
            ));
        }
        let stride = 1 << self.num_levels;
        if self.image_size == 0 || !self.image_size.is_multiple_of(stride) {
            return err(format!(
                "image size {} is not divisible by {stride}",
                self.image_size
            ));
        }
        if self.use_dac && self.image_size / stride < 2 {
            return err(format!(
                "image size {} leaves a 1x1 deepest map, too small for SimAM in the DAC",
                self.image_size
            ));
        }
        let t = &self.transformer;
        if t.patch == 0 || !(self.image_size / 2).is_multiple_of(t.patch) {
            return err(format!(
                "level-1 extent {} is not divisible by patch size {}",
                self.image_size / 2,
                t.patch
            ));
        }
        if t.heads == 0 || t.layers == 0 || !self.channels_per_level[0].is_multiple_of(t.heads) {
            return err(format!(
                "{} level-1 channels cannot be split into {} heads",
                self.channels_per_level[0], t.heads
            ));
        }
        SimamConfig {
            lambda: self.simam_lambda,
        }
        .validate()
    }

    fn tokens(&self) -> usize {
        (self.image_size / 2 / self.transformer.patch).pow(2)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Fusion {
    Dac(DacLayer),
    /// 1x1 convolution of the branch sum (DAC ablated).
    Sum(BlockParams),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Level {
    pub cnn: BlockParams,
    pub mbconv: BlockParams,
    pub fusion: Fusion,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub levels: Vec<Level>,
    pub transformer: BlockParams,
    /// Deepest first; the last stage restores the input resolution.
    pub decoders: Vec<BlockParams>,
    pub head: BlockParams,
}

pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let mut r = rng::stream(seed, 0x6d6f_64656c);
    let ch = &cfg.channels_per_level;
    let mut levels = Vec::with_capacity(ch.len());
    for (i, &c) in ch.iter().enumerate() {
        let inp = if i == 0 {
            cfg.input_channels
        } else {
            ch[i - 1]
        };
        let cnn = BlockParams::cnn_down(inp, c, &mut r);
        let mbconv = BlockParams::mbconv(inp, c, 2, &mut r);
        let fusion = if cfg.use_dac {
            Fusion::Dac(DacLayer::new(i + 1, c, c, c, &mut r))
        } else {
            Fusion::Sum(BlockParams::conv_layer(c, c, 1, &mut r))
        };
        levels.push(Level {
            cnn,
            mbconv,
            fusion,
        });
    }
    let transformer = BlockParams::transformer(ch[0], cfg.tokens(), &cfg.transformer, &mut r);
    let mut decoders = Vec::with_capacity(ch.len());
    for i in (0..ch.len() - 1).rev() {
        decoders.push(BlockParams::decoder(ch[i + 1], ch[i], ch[i], &mut r));
    }
    decoders.push(BlockParams::decoder(
        ch[0],
        cfg.input_channels,
        ch[0],
        &mut r,
    ));
    let head = BlockParams::conv_layer(ch[0], NUM_CLASSES, 1, &mut r);
    Ok(Model {
        cfg: cfg.clone(),
        levels,
        transformer,
        decoders,
        head,
    })
}

/// Named blocks in a fixed order, with the prefix of each parameter name.
fn blocks(model: &Model) -> Vec<(String, &BlockParams)> {
    let mut out = Vec::new();
    for (i, level) in model.levels.iter().enumerate() {
        let l = i + 1;
        out.push((format!("level{l}.cnn"), &level.cnn));
        out.push((format!("level{l}.mbconv"), &level.mbconv));
        match &level.fusion {
            Fusion::Dac(d) => out.push((format!("level{l}.dac.fuse"), &d.fuse)),
            Fusion::Sum(p) => out.push((format!("level{l}.merge"), p)),
        }
    }
    out.push(("transformer".into(), &model.transformer));
    for (j, d) in model.decoders.iter().enumerate() {
        out.push((format!("decoder{}", j + 1), d));
    }
    out.push(("head".into(), &model.head));
    out
}

impl Model {
    /// Every parameter with its dotted name.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, level) in self.levels.iter().enumerate() {
            if let Fusion::Dac(d) = &level.fusion {
                out.push((format!("level{}.dac.k1", i + 1), &d.k1));
                out.push((format!("level{}.dac.k2", i + 1), &d.k2));
            }
        }
        for (prefix, block) in blocks(self) {
            out.extend(block.iter().map(|(n, t)| (format!("{prefix}.{n}"), t)));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, level) in self.levels.iter_mut().enumerate() {
            let l = i + 1;
            out.extend(
                level
                    .cnn
                    .iter_mut()
                    .map(|(n, t)| (format!("level{l}.cnn.{n}"), t)),
            );
            out.extend(
                level
                    .mbconv
                    .iter_mut()
                    .map(|(n, t)| (format!("level{l}.mbconv.{n}"), t)),
            );
            match &mut level.fusion {
                Fusion::Dac(d) => {
                    out.push((format!("level{l}.dac.k1"), &mut d.k1));
                    out.push((format!("level{l}.dac.k2"), &mut d.k2));
                    out.extend(
                        d.fuse
                            .iter_mut()
                            .map(|(n, t)| (format!("level{l}.dac.fuse.{n}"), t)),
                    );
                }
                Fusion::Sum(p) => out.extend(
                    p.iter_mut()
                        .map(|(n, t)| (format!("level{l}.merge.{n}"), t)),
                ),
            }
        }
        out.extend(
            self.transformer
                .iter_mut()
                .map(|(n, t)| (format!("transformer.{n}"), t)),
        );
        for (j, d) in self.decoders.iter_mut().enumerate() {
            out.extend(
                d.iter_mut()
                    .map(|(n, t)| (format!("decoder{}.{n}", j + 1), t)),
            );
        }
        out.extend(self.head.iter_mut().map(|(n, t)| (format!("head.{n}"), t)));
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundModel<'t> {
        let mut b = Binder::new(tape);
        let mut levels = Vec::with_capacity(self.levels.len());
        for (i, level) in self.levels.iter().enumerate() {
            let l = i + 1;
            let fusion = match &level.fusion {
                Fusion::Dac(d) => BoundFusion::Dac(BoundDac {
                    k1: b.tensor(&format!("level{l}.dac.k1"), &d.k1),
                    k2: b.tensor(&format!("level{l}.dac.k2"), &d.k2),
                    fuse: b.block(&format!("level{l}.dac.fuse"), &d.fuse),
                }),
                Fusion::Sum(p) => BoundFusion::Sum(b.block(&format!("level{l}.merge"), p)),
            };
            levels.push(BoundLevel {
                cnn: b.block(&format!("level{l}.cnn"), &level.cnn),
                mbconv: b.block(&format!("level{l}.mbconv"), &level.mbconv),
                fusion,
            });
        }
        let transformer = b.block("transformer", &self.transformer);
        let decoders = self
            .decoders
            .iter()
            .enumerate()
            .map(|(j, d)| b.block(&format!("decoder{}", j + 1), d))
            .collect();
        let head = b.block("head", &self.head);
        BoundModel {
            cfg: self.cfg.clone(),
            levels,
            transformer,
            decoders,
            head,
            params: b.finish(),
        }
    }
}

pub enum BoundFusion<'t> {
    Dac(BoundDac<'t>),
    Sum(BoundBlock<'t>),
}

pub struct BoundLevel<'t> {
    pub cnn: BoundBlock<'t>,
    pub mbconv: BoundBlock<'t>,
    pub fusion: BoundFusion<'t>,
}

/// A model's parameters registered on one tape.
pub struct BoundModel<'t> {
    pub cfg: ModelConfig,
    pub levels: Vec<BoundLevel<'t>>,
    pub transformer: BoundBlock<'t>,
    pub decoders: Vec<BoundBlock<'t>>,
    pub head: BoundBlock<'t>,
    /// Every bound parameter by name, for routing gradients.
    pub params: Vec<(String, Var<'t>)>,
}

pub struct ForwardOutput<'t> {
    /// `N x 2 x S x S` class probabilities.
    pub probs: Var<'t>,
    /// Deepest fused encoder map, `N x C5 x S/32 x S/32`.
    pub f5: Var<'t>,
}

impl<'t> BoundModel<'t> {
    pub fn forward(&self, images: Var<'t>) -> Result<ForwardOutput<'t>> {
        let s = self.cfg.image_size;
        let expected = [self.cfg.input_channels, s, s];
        let shape = images.shape();
        if shape.len() != 4 || shape[1..] != expected {
            return Err(Error::mismatch("forward", &shape, &expected));
        }
        let simam = SimamConfig {
            lambda: self.cfg.simam_lambda,
        };
        let mut skips = Vec::with_capacity(self.levels.len());
        let mut x = images;
        for (i, level) in self.levels.iter().enumerate() {
            let mut f1 = nn::cnn_down(x, &level.cnn)?;
            if i == 0 {
                f1 = nn::transformer_block(f1, &self.transformer, &self.cfg.transformer)?;
            }
            let f2 = nn::mbconv(x, &level.mbconv, 2)?;
            x = match &level.fusion {
                BoundFusion::Dac(d) => dac::dac_fuse(f1, f2, d, &simam)?,
                BoundFusion::Sum(p) => dac::sum_merge(f1, f2, p)?,
            };
            skips.push(x);
        }
        let f5 = x;
        let mut d = f5;
        for (stage, skip) in self
            .decoders
            .iter()
            .zip(skips.iter().rev().skip(1).chain([&images]))
        {
            d = nn::decoder_block(d, *skip, stage)?;
        }
        let logits = nn::conv_layer(d, &self.head, 0)?;
        Ok(ForwardOutput {
            probs: logits.softmax(1)?,
            f5,
        })
    }
}

/// Class probabilities for `images` (`N x C x S x S`), evaluated without
/// recording gradients, `chunk` images at a time.
pub fn predict(model: &Model, images: &Tensor, chunk: usize) -> Result<Tensor> {
    let n = images.shape().first().copied().unwrap_or(0);
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let len = chunk.max(1).min(n - start);
        let tape = Tape::no_grad();
        let bound = model.bind(&tape);
        let x = tape.constant(images.detached()).narrow(0, start, len)?;
        parts.push(bound.forward(x)?.probs.value().as_ref().clone());
        start += len;
    }
    let tape = Tape::no_grad();
    let vars: Vec<Var<'_>> = parts.into_iter().map(|p| tape.constant(p)).collect();
    Ok(Var::concat(&vars, 0)?.value().as_ref().clone())
}
