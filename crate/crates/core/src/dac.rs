//! Diversified aggregation convolution: the CNN and MBConv branch outputs of
//! one encoder level are scaled by learned scalars, concatenated along the
//! channel axis, reweighted by SimAM and fused by a 3x3 convolution.

use crate::error::{Error, Result};
use crate::nn::{self, BlockParams, BoundBlock, SimamConfig};
use crate::rng::Rng;
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct DacLayer {
    pub k1: Tensor,
    pub k2: Tensor,
    pub fuse: BlockParams,
    pub level: usize,
}

impl DacLayer {
    pub fn new(level: usize, c1: usize, c2: usize, out_channels: usize, rng: &mut Rng) -> Self {
        Self {
            k1: Tensor::scalar(1.0).with_requires_grad(true),
            k2: Tensor::scalar(1.0).with_requires_grad(true),
            fuse: BlockParams::conv_layer(c1 + c2, out_channels, 3, rng),
            level,
        }
    }
}

/// A [`DacLayer`] registered on a tape.
#[derive(Clone, Debug)]
pub struct BoundDac<'t> {
    pub k1: Var<'t>,
    pub k2: Var<'t>,
    pub fuse: BoundBlock<'t>,
}

fn check_pair(op: &'static str, f1: Var<'_>, f2: Var<'_>) -> Result<()> {
    let (a, b) = (f1.shape(), f2.shape());
    if a.len() != 4 || b.len() != 4 || a[0] != b[0] || a[2..] != b[2..] {
        return Err(Error::mismatch(op, &a, &b));
    }
    Ok(())
}

/// `[k1 * f1, k2 * f2]` along the channel axis.
pub fn concat_stage<'t>(f1: Var<'t>, f2: Var<'t>, k1: Var<'t>, k2: Var<'t>) -> Result<Var<'t>> {
    check_pair("concat_stage", f1, f2)?;
    Var::concat(&[f1.mul(k1)?, f2.mul(k2)?], 1)
}

pub fn dac_fuse<'t>(
    f1: Var<'t>,
    f2: Var<'t>,
    layer: &BoundDac<'t>,
    simam: &SimamConfig,
) -> Result<Var<'t>> {
    check_pair("dac_fuse", f1, f2)?;
    let joined = concat_stage(f1, f2, layer.k1, layer.k2)?;
    let c = joined.shape()[1];
    let expected = [layer.fuse.out_channels, c, 3, 3];
    let w = layer.fuse.var("conv.weight")?;
    if w.shape() != expected {
        return Err(Error::mismatch("dac_fuse", &w.shape(), &expected));
    }
    nn::conv_layer(nn::simam(joined, simam)?, &layer.fuse, 1)
}

/// Fusion used when the DAC is ablated: a 1x1 convolution of the summed
/// branches, which therefore must agree in channel count.
pub fn sum_merge<'t>(f1: Var<'t>, f2: Var<'t>, merge: &BoundBlock<'t>) -> Result<Var<'t>> {
    if f1.shape() != f2.shape() {
        return Err(Error::mismatch("sum_merge", &f1.shape(), &f2.shape()));
    }
    nn::conv_layer(f1.add(f2)?, merge, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Binder;
    use crate::rng;
    use crate::tensor::{grad_check_many, Tape};
    use rand::Rng as _;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng::rng(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn bind<'t>(tape: &'t Tape, layer: &DacLayer) -> BoundDac<'t> {
        let mut b = Binder::new(tape);
        BoundDac {
            k1: b.tensor("k1", &layer.k1),
            k2: b.tensor("k2", &layer.k2),
            fuse: b.block("fuse", &layer.fuse),
        }
    }

    #[test]
    fn fresh_layer_has_unit_branch_weights() {
        let layer = DacLayer::new(1, 16, 24, 32, &mut rng::rng(0));
        assert_eq!(layer.k1.item().unwrap().to_bits(), 1.0f64.to_bits());
        assert_eq!(layer.k2.item().unwrap().to_bits(), 1.0f64.to_bits());
        assert!(layer.k1.requires_grad() && layer.k2.requires_grad());
    }

    #[test]
    fn fuse_shape_contract() {
        let layer = DacLayer::new(1, 16, 24, 32, &mut rng::rng(1));
        let tape = Tape::new();
        let f1 = tape.constant(random(&[1, 16, 32, 32], 2));
        let f2 = tape.constant(random(&[1, 24, 32, 32], 3));
        let y = dac_fuse(f1, f2, &bind(&tape, &layer), &SimamConfig::default()).unwrap();
        assert_eq!(y.shape(), vec![1, 32, 32, 32]);
        let bad = tape.constant(random(&[1, 24, 16, 16], 4));
        assert!(matches!(
            dac_fuse(f1, bad, &bind(&tape, &layer), &SimamConfig::default()),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn concat_stage_scaling() {
        let tape = Tape::new();
        let f1 = tape.constant(random(&[1, 2, 3, 3], 5));
        let f2 = tape.constant(random(&[1, 3, 3, 3], 6));
        let one = tape.scalar(1.0);
        let plain = concat_stage(f1, f2, one, one).unwrap().value();
        let n1 = f1.value().numel();
        assert_eq!(&plain.data()[..n1], f1.value().data());
        assert_eq!(&plain.data()[n1..], f2.value().data());

        let zeroed = concat_stage(f1, f2, one, tape.scalar(0.0)).unwrap().value();
        assert!(zeroed.data()[n1..].iter().all(|&v| v == 0.0));

        let doubled = concat_stage(f1, f2, tape.scalar(2.0), one).unwrap().value();
        for (d, p) in doubled.data()[..n1].iter().zip(&plain.data()[..n1]) {
            assert_eq!(*d, 2.0 * p);
        }
        assert_eq!(&doubled.data()[n1..], &plain.data()[n1..]);

        let same = concat_stage(f1, f1, tape.scalar(0.7), tape.scalar(0.7))
            .unwrap()
            .value();
        assert_eq!(&same.data()[..n1], &same.data()[n1..]);
    }

    #[test]
    fn concat_stage_moves_scale_between_feature_and_weight() {
        let tape = Tape::new();
        let f1 = random(&[1, 2, 3, 3], 7);
        let f2 = tape.constant(random(&[1, 2, 3, 3], 8));
        let alpha = 1.75;
        let scaled =
            Tensor::new(f1.shape(), f1.data().iter().map(|v| v * alpha).collect()).unwrap();
        let a = concat_stage(
            tape.constant(scaled),
            f2,
            tape.scalar(0.5),
            tape.scalar(1.3),
        )
        .unwrap();
        let b = concat_stage(
            tape.constant(f1),
            f2,
            tape.scalar(0.5 * alpha),
            tape.scalar(1.3),
        )
        .unwrap();
        assert_eq!(a.value().data(), b.value().data());
    }

    #[test]
    fn gradients_reach_branch_weights_and_features() {
        let layer = DacLayer::new(1, 2, 2, 3, &mut rng::rng(9));
        let probe = random(&[1, 3, 4, 4], 10);
        let fuse = layer.fuse.clone();
        let names: Vec<String> = fuse.iter().map(|(n, _)| n.to_string()).collect();
        let mut inputs = vec![
            random(&[1, 2, 4, 4], 11),
            random(&[1, 2, 4, 4], 12),
            Tensor::scalar(0.9),
            Tensor::scalar(1.2),
        ];
        inputs.extend(fuse.iter().map(|(_, t)| t.clone()));
        let err = grad_check_many(
            |tape, v| {
                let mut b = Binder::new(tape);
                let mut bound = b.block("fuse", &fuse);
                for (name, var) in names.iter().zip(&v[4..]) {
                    bound.replace(name, *var);
                }
                let dac = BoundDac {
                    k1: v[2],
                    k2: v[3],
                    fuse: bound,
                };
                dac_fuse(v[0], v[1], &dac, &SimamConfig::default())?
                    .mul(tape.constant(probe.clone()))
                    .map(|y| y.sum_all())
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");

        let tape = Tape::new();
        let dac = bind(&tape, &layer);
        let f1 = tape.leaf(&random(&[1, 2, 4, 4], 13));
        let f2 = tape.leaf(&random(&[1, 2, 4, 4], 14));
        let loss = dac_fuse(f1, f2, &dac, &SimamConfig::default())
            .unwrap()
            .mul(tape.constant(probe))
            .unwrap()
            .sum_all();
        let grads = tape.backward(loss).unwrap();
        assert_ne!(grads.get(dac.k1).unwrap().item().unwrap(), 0.0);
        assert_ne!(grads.get(dac.k2).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn sum_merge_requires_matching_branches() {
        let mut r = rng::rng(15);
        let merge = BlockParams::conv_layer(4, 8, 1, &mut r);
        let tape = Tape::new();
        let m = merge.bind(&tape);
        let f = tape.constant(random(&[2, 4, 4, 4], 16));
        assert_eq!(sum_merge(f, f, &m).unwrap().shape(), vec![2, 8, 4, 4]);
        let g = tape.constant(random(&[2, 5, 4, 4], 17));
        assert!(sum_merge(f, g, &m).is_err());
    }
}
