//! Property suite behind `cseg verify` and the acceptance tests. Every check
//! compares the implementation against an independent oracle (central
//! differences, double loops, exhaustive enumeration, hand-derived values)
//! and reports the measured quantity next to its threshold.

use std::fmt;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::cim::{
    self, independence_objective, learn_weights_detailed, partial_cross_cov,
    weighted_partial_cross_cov, CimConfig, FeatureMatrix, RffBank, SampleWeights, SIMPLEX_TOL,
};
use crate::config::{train_run, RunConfig};
use crate::dac::{dac_fuse, sum_merge, BoundDac, DacLayer};
use crate::error::Result;
use crate::losses::{self, dsc, miou, LossConfig, MaskMap};
use crate::model::{build_model, predict, ModelConfig};
use crate::nn::{self, Binder, BlockParams, BoundBlock, SimamConfig, TransformerConfig, NORM_EPS};
use crate::rng;
use crate::synth::{gen_dataset, AugmentConfig, Confound, SpuriousConfig, SyntheticConfig};
use crate::tensor::{grad_check_many, Tape, Tensor, Var};
use crate::train::{
    cosine_lr, fit, train_step, AdamW, Batch, EarlyStopping, StepContext, TrainConfig,
};

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_SEEDS: u64 = 5;
pub const REDUCTION_TOL: f64 = 1e-12;
pub const REDUCTION_INSTANCES: u64 = 100;
pub const GRID_STEP: f64 = 0.05;
pub const GRID_TOL: f64 = 1e-3;
pub const LEARNER_TRIALS: u64 = 1000;
pub const INDEPENDENCE_SEEDS: u64 = 20;
pub const INDEPENDENCE_SAMPLES: usize = 200;
/// Frozen from the oracle run: identical-feature objectives fell in
/// [0.614, 3.044], independent ones in [0.0004, 0.0724].
pub const INDEPENDENCE_THRESHOLD: f64 = 0.25;
pub const INDEPENDENCE_REQUIRED: usize = 19;
pub const POINT_TOL: f64 = 1e-6;
pub const OVERFIT_SAMPLES: usize = 16;
pub const OVERFIT_STEPS: usize = 300;
pub const OVERFIT_DSC: f64 = 85.0;
pub const ABLATION_SEEDS: u64 = 5;
pub const ABLATION_STRENGTH: f64 = 0.8;
pub const ABLATION_REQUIRED: usize = 3;

/// Deliberate defects used to show the suite catches them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Flips the sign of the focal loss gradient.
    FocalGradSign,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Outcome {
    pub name: &'static str,
    pub passed: bool,
    pub measured: String,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict}  {:<22} {}", self.name, self.measured)
    }
}

fn outcome(name: &'static str, result: Result<(bool, String)>) -> Outcome {
    match result {
        Ok((passed, measured)) => Outcome {
            name,
            passed,
            measured,
        },
        Err(e) => Outcome {
            name,
            passed: false,
            measured: format!("error: {e}"),
        },
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct VerifyOptions {
    /// Also run the training experiments (overfit, ablation, determinism).
    pub full: bool,
    pub fault: Option<Fault>,
}

/// Runs the suite, reporting each outcome as soon as it is known.
pub fn run_all(opts: VerifyOptions, mut report: impl FnMut(&Outcome)) -> Vec<Outcome> {
    let mut checks: Vec<Box<dyn Fn() -> Outcome>> = vec![
        Box::new(move || gradient_fidelity(opts.fault)),
        Box::new(unit_weight_reduction),
        Box::new(weight_learner),
        Box::new(independence_signal),
        Box::new(metric_exactness),
        Box::new(loss_point_values),
        Box::new(schedule_identities),
    ];
    if opts.full {
        checks.push(Box::new(overfit_smoke));
        checks.push(Box::new(directional_ablation));
        checks.push(Box::new(training_determinism));
    }
    checks
        .iter()
        .map(|check| {
            let o = check();
            report(&o);
            o
        })
        .collect()
}

fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut r = rng::rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(lo..hi)).collect()).expect("consistent shape")
}

fn normal(n: usize, r: &mut rng::Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(r)).collect()
}

/// Contracts `y` with a fixed random probe so every output element carries
/// a distinct weight in the checked scalar.
fn probe<'t>(y: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let p = uniform(&y.shape(), -1.0, 1.0, rng::derive(seed, 0x70726f6265));
    Ok(y.mul(y.tape().constant(p))?.sum_all())
}

type CheckFn = Box<dyn Fn(u64) -> Result<f64>>;

/// Elementwise or structural op on random inputs.
fn op_case(
    shapes: &'static [&'static [usize]],
    range: (f64, f64),
    f: impl for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>> + Clone + 'static,
) -> CheckFn {
    Box::new(move |seed| {
        let inputs: Vec<Tensor> = shapes
            .iter()
            .enumerate()
            .map(|(k, s)| uniform(s, range.0, range.1, rng::derive(seed, k as u64)))
            .collect();
        let f = f.clone();
        grad_check_many(move |_, v| probe(f(v)?, seed), &inputs, GRAD_EPS)
    })
}

/// A parameterized block, checked with respect to its inputs and every
/// parameter.
fn block_case(
    make: impl Fn(&mut rng::Rng) -> BlockParams + 'static,
    input_shapes: &'static [&'static [usize]],
    f: impl for<'t> Fn(&[Var<'t>], &BoundBlock<'t>) -> Result<Var<'t>> + Clone + 'static,
) -> CheckFn {
    Box::new(move |seed| {
        let params = make(&mut rng::rng(rng::derive(seed, 0x626c6f636b)));
        let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
        let mut all: Vec<Tensor> = input_shapes
            .iter()
            .enumerate()
            .map(|(k, s)| uniform(s, -1.0, 1.0, rng::derive(seed, k as u64)))
            .collect();
        let k = all.len();
        all.extend(params.iter().map(|(_, t)| t.detached()));
        let f = f.clone();
        grad_check_many(
            move |tape, v| {
                let mut bound = Binder::new(tape).block("block", &params);
                for (name, var) in names.iter().zip(&v[k..]) {
                    bound.replace(name, *var);
                }
                probe(f(&v[..k], &bound)?, seed)
            },
            &all,
            GRAD_EPS,
        )
    })
}

/// Probability maps kept away from the clipping boundary.
fn prob_map(n: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let fg = uniform(&[n, h, w], 0.1, 0.9, seed);
    let mut data = Vec::with_capacity(2 * fg.numel());
    for i in 0..n {
        let plane = &fg.data()[i * h * w..(i + 1) * h * w];
        data.extend(plane.iter().map(|p| 1.0 - p));
        data.extend_from_slice(plane);
    }
    Tensor::new(&[n, 2, h, w], data).expect("consistent shape")
}

fn random_mask(shape: [usize; 3], seed: u64) -> MaskMap {
    let mut r = rng::rng(seed);
    let n = shape.iter().product();
    MaskMap::new(
        shape,
        (0..n).map(|_| u8::from(r.random_bool(0.4))).collect(),
    )
    .expect("binary labels")
}

fn loss_case(
    fault: Option<Fault>,
    f: impl for<'t> Fn(Var<'t>, &MaskMap, Option<Fault>) -> Result<Var<'t>> + Clone + 'static,
) -> CheckFn {
    Box::new(move |seed| {
        let probs = prob_map(2, 3, 4, seed);
        let mask = random_mask([2, 3, 4], rng::derive(seed, 1));
        let f = f.clone();
        grad_check_many(
            move |_, v| probe(f(v[0], &mask, fault)?, seed),
            &[probs],
            GRAD_EPS,
        )
    })
}

/// Named gradient checks covering every differentiable op and block.
pub fn gradient_cases(fault: Option<Fault>) -> Vec<(&'static str, CheckFn)> {
    const X: &[&[usize]] = &[&[2, 3, 4]];
    const XY: &[&[usize]] = &[&[2, 3, 4], &[2, 3, 4]];
    const IMG: &[&[usize]] = &[&[2, 3, 6, 6]];
    let cfg = LossConfig::default();
    vec![
        ("add", op_case(XY, (-1.0, 1.0), |v| v[0].add(v[1]))),
        ("sub", op_case(XY, (-1.0, 1.0), |v| v[0].sub(v[1]))),
        ("mul", op_case(XY, (-1.0, 1.0), |v| v[0].mul(v[1]))),
        ("div", op_case(XY, (0.5, 1.5), |v| v[0].div(v[1]))),
        ("neg", op_case(X, (-1.0, 1.0), |v| Ok(v[0].neg()))),
        ("scale", op_case(X, (-1.0, 1.0), |v| Ok(v[0].scale(1.7)))),
        (
            "add_scalar",
            op_case(X, (-1.0, 1.0), |v| v[0].add_scalar(0.3).mul(v[0])),
        ),
        ("exp", op_case(X, (-1.0, 1.0), |v| Ok(v[0].exp()))),
        ("log", op_case(X, (0.5, 1.5), |v| v[0].log())),
        ("powf", op_case(X, (0.5, 1.5), |v| v[0].powf(2.5))),
        ("sigmoid", op_case(X, (-2.0, 2.0), |v| Ok(v[0].sigmoid()))),
        ("relu", op_case(X, (-1.0, 1.0), |v| Ok(v[0].relu()))),
        (
            "clamp",
            op_case(X, (-1.0, 1.0), |v| Ok(v[0].clamp(-0.5, 0.5))),
        ),
        (
            "reshape",
            op_case(X, (-1.0, 1.0), |v| v[0].reshape(&[4, 6])?.exp().pipe(Ok)),
        ),
        (
            "permute",
            op_case(X, (-1.0, 1.0), |v| v[0].permute(&[2, 0, 1])),
        ),
        (
            "transpose",
            op_case(&[&[3, 4]], (-1.0, 1.0), |v| v[0].transpose()),
        ),
        (
            "expand",
            op_case(&[&[3, 1]], (-1.0, 1.0), |v| v[0].expand(&[3, 4])),
        ),
        ("sum", op_case(X, (-1.0, 1.0), |v| v[0].sum(&[1]))),
        ("mean", op_case(X, (-1.0, 1.0), |v| v[0].mean(&[0, 2]))),
        ("var", op_case(X, (-1.0, 1.0), |v| v[0].var(&[2]))),
        (
            "sum_all",
            op_case(X, (-1.0, 1.0), |v| Ok(v[0].mul(v[0])?.sum_all())),
        ),
        (
            "mean_all",
            op_case(X, (-1.0, 1.0), |v| Ok(v[0].exp().mean_all())),
        ),
        (
            "concat",
            op_case(&[&[2, 3, 4], &[2, 2, 4]], (-1.0, 1.0), |v| {
                Var::concat(&[v[0], v[1]], 1)
            }),
        ),
        ("narrow", op_case(X, (-1.0, 1.0), |v| v[0].narrow(1, 1, 2))),
        (
            "split",
            op_case(X, (-1.0, 1.0), |v| {
                let parts = v[0].split(2, &[1, 3])?;
                parts[1].sum(&[2])?.mul(parts[0].reshape(&[2, 3])?)
            }),
        ),
        (
            "matmul",
            op_case(&[&[3, 4], &[4, 5]], (-1.0, 1.0), |v| v[0].matmul(v[1])),
        ),
        (
            "add_channel_bias",
            op_case(&[&[2, 3, 4, 4], &[3]], (-1.0, 1.0), |v| {
                v[0].add_channel_bias(v[1])
            }),
        ),
        (
            "conv2d",
            op_case(&[&[2, 3, 5, 5], &[4, 3, 3, 3]], (-1.0, 1.0), |v| {
                v[0].conv2d(v[1], 1, 1)
            }),
        ),
        (
            "conv2d stride 2",
            op_case(&[&[2, 3, 6, 6], &[4, 3, 3, 3]], (-1.0, 1.0), |v| {
                v[0].conv2d(v[1], 2, 1)
            }),
        ),
        (
            "depthwise_conv2d",
            op_case(&[&[2, 3, 6, 6], &[3, 1, 3, 3]], (-1.0, 1.0), |v| {
                v[0].depthwise_conv2d(v[1], 2, 1)
            }),
        ),
        (
            "upsample_nearest",
            op_case(IMG, (-1.0, 1.0), |v| v[0].upsample_nearest(2)),
        ),
        ("avg_pool", op_case(IMG, (-1.0, 1.0), |v| v[0].avg_pool(2))),
        ("pad2d", op_case(IMG, (-1.0, 1.0), |v| v[0].pad2d(1))),
        (
            "crop2d",
            op_case(IMG, (-1.0, 1.0), |v| v[0].crop2d(1, 2, 3, 4)),
        ),
        ("softmax", op_case(IMG, (-2.0, 2.0), |v| v[0].softmax(1))),
        (
            "group_norm",
            op_case(&[&[2, 4, 3, 3], &[4], &[4]], (-1.0, 1.0), |v| {
                v[0].group_norm(v[1], v[2], 2, NORM_EPS)
            }),
        ),
        (
            "layer_norm",
            op_case(&[&[5, 6], &[6], &[6]], (-1.0, 1.0), |v| {
                v[0].layer_norm(v[1], v[2], NORM_EPS)
            }),
        ),
        (
            "simam",
            op_case(IMG, (-1.0, 1.0), |v| {
                nn::simam(v[0], &SimamConfig::default())
            }),
        ),
        (
            "cnn_down",
            block_case(
                |r| BlockParams::cnn_down(3, 4, r),
                IMG,
                |v, p| nn::cnn_down(v[0], p),
            ),
        ),
        (
            "mbconv",
            block_case(
                |r| BlockParams::mbconv(3, 4, 2, r),
                IMG,
                |v, p| nn::mbconv(v[0], p, 2),
            ),
        ),
        (
            "conv_layer",
            block_case(
                |r| BlockParams::conv_layer(3, 4, 3, r),
                IMG,
                |v, p| nn::conv_layer(v[0], p, 1),
            ),
        ),
        (
            "decoder_block",
            block_case(
                |r| BlockParams::decoder(4, 3, 2, r),
                &[&[2, 4, 3, 3], &[2, 3, 6, 6]],
                |v, p| nn::decoder_block(v[0], v[1], p),
            ),
        ),
        (
            "transformer_block",
            block_case(
                |r| {
                    BlockParams::transformer(
                        4,
                        4,
                        &TransformerConfig {
                            patch: 2,
                            heads: 2,
                            layers: 1,
                        },
                        r,
                    )
                },
                &[&[2, 4, 4, 4]],
                |v, p| {
                    nn::transformer_block(
                        v[0],
                        p,
                        &TransformerConfig {
                            patch: 2,
                            heads: 2,
                            layers: 1,
                        },
                    )
                },
            ),
        ),
        ("dac_fuse", dac_case()),
        (
            "sum_merge",
            block_case(
                |r| BlockParams::conv_layer(3, 4, 1, r),
                &[&[2, 3, 4, 4], &[2, 3, 4, 4]],
                |v, p| sum_merge(v[0], v[1], p),
            ),
        ),
        (
            "ce_per_sample",
            loss_case(fault, |p, m, _| losses::ce_per_sample(p, m)),
        ),
        (
            "dice_loss",
            loss_case(fault, move |p, m, _| losses::dice_loss(p, m, &cfg)),
        ),
        (
            "focal_loss",
            loss_case(fault, move |p, m, fault| {
                let l = losses::focal_loss(p, m, &cfg)?;
                Ok(if fault == Some(Fault::FocalGradSign) {
                    l.negate_grad()
                } else {
                    l
                })
            }),
        ),
        (
            "total_loss",
            op_case(&[&[1], &[1], &[1]], (0.1, 1.0), move |v| {
                let (a, b, c) = (v[0].sum_all(), v[1].sum_all(), v[2].sum_all());
                losses::total_loss(a, b.exp(), c.mul(c)?, &cfg)
            }),
        ),
        (
            "cim_loss",
            Box::new(|seed| {
                let w = SampleWeights::new(vec![0.5, 1.25, 1.25, 1.0])?;
                let ce = uniform(&[4], 0.1, 2.0, seed);
                grad_check_many(move |_, v| cim::cim_loss(v[0].exp(), &w), &[ce], GRAD_EPS)
            }),
        ),
        ("weighted cross-cov", weighted_cov_case()),
    ]
}

fn dac_case() -> CheckFn {
    Box::new(|seed| {
        let layer = DacLayer::new(1, 3, 2, 4, &mut rng::rng(rng::derive(seed, 0x646163)));
        let names: Vec<String> = layer.fuse.iter().map(|(n, _)| n.to_string()).collect();
        let mut all = vec![
            uniform(&[2, 3, 4, 4], -1.0, 1.0, rng::derive(seed, 0)),
            uniform(&[2, 2, 4, 4], -1.0, 1.0, rng::derive(seed, 1)),
            uniform(&[1], 0.5, 1.5, rng::derive(seed, 2)),
            uniform(&[1], 0.5, 1.5, rng::derive(seed, 3)),
        ];
        all.extend(layer.fuse.iter().map(|(_, t)| t.detached()));
        grad_check_many(
            |tape, v| {
                let mut fuse = Binder::new(tape).block("fuse", &layer.fuse);
                for (name, var) in names.iter().zip(&v[4..]) {
                    fuse.replace(name, *var);
                }
                let bound = BoundDac {
                    k1: v[2].reshape(&[])?,
                    k2: v[3].reshape(&[])?,
                    fuse,
                };
                probe(dac_fuse(v[0], v[1], &bound, &SimamConfig::default())?, seed)
            },
            &all,
            GRAD_EPS,
        )
    })
}

/// The weighted independence objective as a function of the weights.
fn weighted_cov_case() -> CheckFn {
    Box::new(|seed| {
        let mut r = rng::rng(seed);
        let features = FeatureMatrix::new(6, 3, normal(18, &mut r))?;
        let banks = RffBank::for_features(3, 4, seed);
        let maps = (0..3)
            .map(|j| cim::rff_map(&features.column(j), &banks[j]))
            .collect::<Result<Vec<_>>>()?;
        let w = uniform(&[6], 0.5, 1.5, rng::derive(seed, 9));
        grad_check_many(
            move |_, v| cim::independence_objective_var(&maps, v[0]),
            &[w],
            GRAD_EPS,
        )
    })
}

trait Pipe: Sized {
    fn pipe<T>(self, f: impl FnOnce(Self) -> T) -> T {
        f(self)
    }
}
impl<T> Pipe for T {}

/// Every gradient case on `GRAD_SEEDS` seeds at relative error `GRAD_TOL`.
pub fn gradient_fidelity(fault: Option<Fault>) -> Outcome {
    let cases = gradient_cases(fault);
    let mut worst = (0.0f64, "");
    let mut failures = Vec::new();
    for (name, check) in &cases {
        for seed in 0..GRAD_SEEDS {
            match check(seed) {
                Ok(err) => {
                    if err > worst.0 || err.is_nan() {
                        worst = (err, name);
                    }
                    if err.is_nan() || err > GRAD_TOL {
                        failures.push(format!("{name} (seed {seed}, rel err {err:.2e})"));
                    }
                }
                Err(e) => failures.push(format!("{name} (seed {seed}): {e}")),
            }
        }
    }
    let measured = if failures.is_empty() {
        format!(
            "{} cases x {GRAD_SEEDS} seeds, max rel err {:.2e} ({}) <= {GRAD_TOL:e}",
            cases.len(),
            worst.0,
            worst.1
        )
    } else {
        failures.dedup_by(|a, b| a.split(' ').next() == b.split(' ').next());
        format!("failed: {}", failures.join(", "))
    };
    Outcome {
        name: "gradient fidelity",
        passed: failures.is_empty(),
        measured,
    }
}

/// Unit weights turn the weighted cross-covariance into the plain one.
pub fn unit_weight_reduction() -> Outcome {
    let run = || -> Result<(bool, String)> {
        let mut worst = 0.0f64;
        for seed in 0..REDUCTION_INSTANCES {
            let mut r = rng::rng(seed);
            let n = r.random_range(2..=24);
            let (a, b) = (r.random_range(1..=6), r.random_range(1..=6));
            let u = Tensor::new(&[n, a], normal(n * a, &mut r))?;
            let v = Tensor::new(&[n, b], normal(n * b, &mut r))?;
            let plain = partial_cross_cov(&u, &v)?;
            let weighted = weighted_partial_cross_cov(&u, &v, &SampleWeights::uniform(n))?;
            for (x, y) in plain.data().iter().zip(weighted.data()) {
                worst = worst.max((x - y).abs());
            }
        }
        Ok((
            worst <= REDUCTION_TOL,
            format!(
                "{REDUCTION_INSTANCES} instances, max abs diff {worst:.2e} <= {REDUCTION_TOL:e}"
            ),
        ))
    };
    outcome("unit-weight reduction", run())
}

/// Four samples, two feature variables: three identical rows and one
/// outlier, so down-weighting the outlier is rewarded.
pub fn constructed_instance() -> FeatureMatrix {
    FeatureMatrix::new(4, 2, vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]).expect("4 x 2")
}

/// Minimum of the independence objective over the simplex
/// `{w >= 0, sum w = n}` on a lattice of spacing `step` (weight units).
pub fn simplex_grid_minimum(
    features: &FeatureMatrix,
    banks: &[RffBank],
    step: f64,
) -> Result<(f64, Vec<f64>)> {
    let n = features.n;
    let units = (n as f64 / step).round() as usize;
    let maps = (0..features.m)
        .map(|j| cim::rff_map(&features.column(j), &banks[j]))
        .collect::<Result<Vec<_>>>()?;
    let mut best = (f64::INFINITY, vec![]);
    let mut counts = vec![0usize; n];
    // Enumerate compositions of `units` into n non-negative parts.
    fn visit(
        k: usize,
        left: usize,
        counts: &mut Vec<usize>,
        step: f64,
        maps: &[Tensor],
        best: &mut (f64, Vec<f64>),
    ) -> Result<()> {
        if k + 1 == counts.len() {
            counts[k] = left;
            let w: Vec<f64> = counts.iter().map(|&c| c as f64 * step).collect();
            let sw = SampleWeights::new(w.clone())?;
            let mut total = 0.0;
            for i in 0..maps.len() {
                for j in i + 1..maps.len() {
                    total += weighted_partial_cross_cov(&maps[i], &maps[j], &sw)?
                        .data()
                        .iter()
                        .map(|c| c * c)
                        .sum::<f64>();
                }
            }
            if total < best.0 {
                *best = (total, w);
            }
            return Ok(());
        }
        for c in 0..=left {
            counts[k] = c;
            visit(k + 1, left - c, counts, step, maps, best)?;
        }
        Ok(())
    }
    visit(0, units, &mut counts, step, &maps, &mut best)?;
    Ok(best)
}

/// Learner vs grid oracle on the constructed instance, then simplex and
/// non-worsening checks over random trials.
pub fn weight_learner() -> Outcome {
    let run = || -> Result<(bool, String)> {
        let cfg = CimConfig::default();
        let features = constructed_instance();
        let banks = RffBank::for_features(features.m, cfg.n_f, cfg.seed);
        let learned = learn_weights_detailed(&features, &cfg)?;
        let (grid, _) = simplex_grid_minimum(&features, &banks, GRID_STEP)?;
        let gap = (learned.objective - grid).abs();

        let mut simplex_err = 0.0f64;
        let mut worsened = 0usize;
        for trial in 0..LEARNER_TRIALS {
            let mut r = rng::rng(rng::derive(trial, 0x7472));
            let n = r.random_range(2..=12);
            let m = r.random_range(2..=5);
            let features = FeatureMatrix::new(n, m, normal(n * m, &mut r))?;
            let cfg = CimConfig {
                seed: trial,
                ..CimConfig::default()
            };
            let l = learn_weights_detailed(&features, &cfg)?;
            let w = l.weights.as_slice();
            let sum: f64 = w.iter().sum();
            simplex_err = simplex_err.max((sum - n as f64).abs());
            if w.iter().any(|v| *v < 0.0 || !v.is_finite()) {
                simplex_err = f64::INFINITY;
            }
            let banks = RffBank::for_features(m, cfg.n_f, cfg.seed);
            let recomputed = independence_objective(&features, &banks, &l.weights)?;
            let uniform = independence_objective(&features, &banks, &SampleWeights::uniform(n))?;
            if l.objective > l.uniform_objective || recomputed > uniform * (1.0 + 1e-12) + 1e-15 {
                worsened += 1;
            }
        }
        Ok((
            gap <= GRID_TOL && simplex_err <= SIMPLEX_TOL && worsened == 0,
            format!(
                "learner {:.6} vs grid {grid:.6} (gap {gap:.1e} <= {GRID_TOL:e}); {LEARNER_TRIALS} trials: max |sum w - n| {simplex_err:.1e}, worse than uniform {worsened}",
                learned.objective
            ),
        ))
    };
    outcome("weight learner", run())
}

/// Objectives of an identical-feature pair and an independent pair.
pub fn independence_pair(seed: u64) -> Result<(f64, f64)> {
    let n = INDEPENDENCE_SAMPLES;
    let mut r = rng::stream(seed, 0x696e6465);
    let x = normal(n, &mut r);
    let y = normal(n, &mut r);
    let interleave = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .flat_map(|(p, q)| [*p, *q])
            .collect::<Vec<_>>()
    };
    let banks = RffBank::for_features(2, CimConfig::default().n_f, seed);
    let w = SampleWeights::uniform(n);
    let same = independence_objective(&FeatureMatrix::new(n, 2, interleave(&x, &x))?, &banks, &w)?;
    let indep = independence_objective(&FeatureMatrix::new(n, 2, interleave(&x, &y))?, &banks, &w)?;
    Ok((same, indep))
}

pub fn independence_signal() -> Outcome {
    let run = || -> Result<(bool, String)> {
        let mut separated = 0;
        let (mut same_min, mut indep_max) = (f64::INFINITY, 0.0f64);
        for seed in 0..INDEPENDENCE_SEEDS {
            let (same, indep) = independence_pair(seed)?;
            same_min = same_min.min(same);
            indep_max = indep_max.max(indep);
            if same > INDEPENDENCE_THRESHOLD && indep < INDEPENDENCE_THRESHOLD {
                separated += 1;
            }
        }
        Ok((
            separated >= INDEPENDENCE_REQUIRED,
            format!(
                "{separated}/{INDEPENDENCE_SEEDS} seeds separated at {INDEPENDENCE_THRESHOLD} (identical min {same_min:.4}, independent max {indep_max:.4})"
            ),
        ))
    };
    outcome("independence signal", run())
}

/// All pairs of 3x3 binary masks against set-based counting.
pub fn metric_exactness() -> Outcome {
    let run = || -> Result<(bool, String)> {
        let set = |bits: u32| -> Vec<usize> { (0..9).filter(|i| bits >> i & 1 == 1).collect() };
        let complement =
            |s: &[usize]| -> Vec<usize> { (0..9).filter(|i| !s.contains(i)).collect() };
        let ratio = |a: &[usize], b: &[usize]| -> f64 {
            let inter = a.iter().filter(|x| b.contains(x)).count();
            let union = a.len() + b.iter().filter(|x| !a.contains(x)).count();
            if union == 0 {
                1.0
            } else {
                inter as f64 / union as f64
            }
        };
        let masks: Vec<MaskMap> = (0..512u32)
            .map(|bits| MaskMap::new([1, 3, 3], (0..9).map(|i| (bits >> i & 1) as u8).collect()))
            .collect::<Result<_>>()?;
        let mut mismatches = 0usize;
        let mut pairs = 0usize;
        for a in 0..512u32 {
            let (sa, ca) = (set(a), complement(&set(a)));
            for b in 0..512u32 {
                let (sb, cb) = (set(b), complement(&set(b)));
                let expected_miou = 50.0 * (ratio(&sa, &sb) + ratio(&ca, &cb));
                let inter = sa.iter().filter(|x| sb.contains(x)).count();
                let expected_dsc = if sa.len() + sb.len() == 0 {
                    100.0
                } else {
                    200.0 * inter as f64 / (sa.len() + sb.len()) as f64
                };
                let (pa, pb) = (&masks[a as usize], &masks[b as usize]);
                if miou(pa, pb)?.to_bits() != expected_miou.to_bits()
                    || dsc(pa, pb)?.to_bits() != expected_dsc.to_bits()
                {
                    mismatches += 1;
                }
                pairs += 1;
            }
        }
        Ok((
            mismatches == 0,
            format!("{pairs} pairs, {mismatches} mismatches"),
        ))
    };
    outcome("metric exactness", run())
}

fn eval_loss(f: impl for<'t> Fn(Var<'t>) -> Result<Var<'t>>, probs: Tensor) -> Result<f64> {
    let tape = Tape::no_grad();
    f(tape.constant(probs))?.item()
}

/// One-pixel probability map with nucleus probability `p`.
fn pixel(p: f64) -> Tensor {
    Tensor::new(&[1, 2, 1, 1], vec![1.0 - p, p]).expect("1x2x1x1")
}

pub fn loss_point_values() -> Outcome {
    let run = || -> Result<(bool, String)> {
        let cfg = LossConfig::default();
        let fg = MaskMap::new([1, 1, 1], vec![1])?;
        let focal_half = eval_loss(|p| losses::focal_loss(p, &fg, &cfg), pixel(0.5))?;
        let focal_high = eval_loss(|p| losses::focal_loss(p, &fg, &cfg), pixel(0.9))?;

        // 100 predicted and 100 true nucleus pixels sharing 50.
        let (h, w) = (10, 20);
        let gt = MaskMap::new([1, h, w], (0..h * w).map(|i| u8::from(i < 100)).collect())?;
        let pred: Vec<f64> = (0..h * w)
            .map(|i| if (50..150).contains(&i) { 1.0 } else { 0.0 })
            .collect();
        let mut data: Vec<f64> = pred.iter().map(|p| 1.0 - p).collect();
        data.extend(&pred);
        let dice = eval_loss(
            |p| losses::dice_loss(p, &gt, &cfg),
            Tensor::new(&[1, 2, h, w], data)?,
        )?;

        let tape = Tape::no_grad();
        let (a, b, c) = (0.731, 0.412, 0.093);
        let total =
            losses::total_loss(tape.scalar(a), tape.scalar(b), tape.scalar(c), &cfg)?.item()?;
        let total_exact = cfg.lambda == 0.5 && total == a + 0.5 * b + 0.5 * c;

        let ok = (focal_half - 0.138629).abs() <= POINT_TOL
            && (focal_high - 0.000843).abs() <= POINT_TOL
            && (dice - 0.5).abs() <= POINT_TOL
            && total_exact;
        Ok((
            ok,
            format!(
                "focal(0.5) {focal_half:.6}, focal(0.9) {focal_high:.6}, dice {dice:.6}, total at lambda {} exact: {total_exact}",
                cfg.lambda
            ),
        ))
    };
    outcome("loss point values", run())
}

pub fn schedule_identities() -> Outcome {
    let run = || -> Result<(bool, String)> {
        let (hi, lo) = (1e-3, 1e-5);
        let mut ok = true;
        for total in [2usize, 10, 300, 1000] {
            ok &= cosine_lr(0, total, hi, lo)? == hi;
            ok &= cosine_lr(total, total, hi, lo)? == lo;
            ok &= cosine_lr(total / 2, total, hi, lo)? == (hi + lo) / 2.0;
            let lrs = (0..=total)
                .map(|s| cosine_lr(s, total, hi, lo))
                .collect::<Result<Vec<_>>>()?;
            ok &= lrs.windows(2).all(|w| w[1] <= w[0]);
        }
        ok &= cosine_lr(11, 10, hi, lo).is_err() && cosine_lr(0, 0, hi, lo).is_err();

        // Scripted run: improvement at epoch 1 only, patience 1.
        let mut stop = EarlyStopping::new(1);
        let script = [70.0, 70.0, 69.0, 80.0];
        let stopped_at = script
            .iter()
            .position(|&dsc| stop.observe(dsc).stop)
            .map(|i| i + 1);
        ok &= stopped_at == Some(2);

        // The same through the training loop, with a vanishing learning rate.
        let samples = gen_dataset(&SyntheticConfig::default(), 6)?;
        let tiny = ModelConfig {
            channels_per_level: vec![4, 6, 8, 10, 12],
            transformer: TransformerConfig {
                patch: 8,
                heads: 2,
                layers: 1,
            },
            ..ModelConfig::default()
        };
        let ctx = StepContext {
            train: TrainConfig {
                lr_max: 1e-300,
                epochs: 10,
                batch_size: 4,
                early_stop_patience: 1,
                ..TrainConfig::default()
            },
            loss: LossConfig::default(),
            cim: CimConfig::default(),
        };
        let fitted = fit(
            build_model(&tiny, 0)?,
            &samples[..4],
            &samples[4..],
            &ctx,
            |_| (),
        )?;
        let fit_epochs = fitted.history.epochs.len();
        ok &= fit_epochs == 2 && fitted.history.best_epoch == 1;
        Ok((
            ok,
            format!(
                "boundary/midpoint/monotone exact; patience 1 stops at epoch {} (scripted), {fit_epochs} (fit)",
                stopped_at.map_or("never".to_string(), |e| e.to_string())
            ),
        ))
    };
    outcome("schedule identities", run())
}

/// Training DSC of the default-width model after `steps` full-batch steps
/// on a frozen synthetic set.
pub fn overfit_run(steps: usize) -> Result<f64> {
    let samples = gen_dataset(&SyntheticConfig::default(), OVERFIT_SAMPLES)?;
    let batches: Vec<Batch> = samples
        .chunks(8)
        .map(Batch::from_samples)
        .collect::<Result<_>>()?;
    let mut model = build_model(&ModelConfig::default(), 0)?;
    let ctx = StepContext {
        train: TrainConfig {
            augment: AugmentConfig::disabled(),
            ..TrainConfig::default()
        },
        loss: LossConfig::default(),
        cim: CimConfig::default(),
    };
    let mut opt = AdamW::new();
    for step in 0..steps {
        let lr = cosine_lr(step, steps, OVERFIT_LR, 0.0)?;
        train_step(
            &mut model,
            &batches[step % batches.len()],
            &ctx,
            &mut opt,
            lr,
        )?;
    }
    let all = Batch::from_samples(&samples)?;
    let probs = predict(&model, &all.images, 8)?;
    Ok(losses::summarize(&MaskMap::argmax(&probs)?, &all.masks)?
        .dsc
        .mean)
}

/// Peak rate of the overfit run.
pub const OVERFIT_LR: f64 = 1e-3;

pub fn overfit_smoke() -> Outcome {
    let run = || -> Result<(bool, String)> {
        let dsc = overfit_run(OVERFIT_STEPS)?;
        Ok((
            dsc >= OVERFIT_DSC,
            format!("training DSC {dsc:.2} after {OVERFIT_STEPS} steps (>= {OVERFIT_DSC})"),
        ))
    };
    outcome("overfit smoke", run())
}

/// Configuration of the directional ablation for one seed.
pub fn ablation_config(seed: u64, use_dac: bool, cim_enabled: bool) -> RunConfig {
    let mut cfg = RunConfig {
        name: "ablation".into(),
        seed,
        split: [0.8, 0.2, 0.0],
        model: ModelConfig {
            channels_per_level: vec![8, 12, 16, 24, 32],
            use_dac,
            ..ModelConfig::default()
        },
        train: TrainConfig {
            epochs: ABLATION_EPOCHS,
            early_stop_patience: ABLATION_EPOCHS,
            cim_enabled,
            ..TrainConfig::default()
        },
        synthetic: SyntheticConfig {
            spurious: Some(SpuriousConfig {
                confound: Confound::TintDensity,
                strength: ABLATION_STRENGTH,
            }),
            ..SyntheticConfig::default()
        },
        ..RunConfig::default()
    };
    cfg.derive_seeds();
    cfg
}

pub const ABLATION_EPOCHS: usize = 20;
pub const ABLATION_SAMPLES: usize = 144;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub seed: u64,
    pub backbone: f64,
    pub dac: f64,
    pub full: f64,
}

/// Test DSC of the backbone, DAC-only and DAC+reweighting configurations.
pub fn ablation_row(seed: u64) -> Result<AblationRow> {
    let data_cfg = ablation_config(seed, true, true);
    let dataset = gen_dataset(&data_cfg.synthetic, ABLATION_SAMPLES)?;
    let dsc = |use_dac, cim| -> Result<f64> {
        Ok(
            train_run(&ablation_config(seed, use_dac, cim), &dataset, |_| ())?
                .test
                .dsc
                .mean,
        )
    };
    Ok(AblationRow {
        seed,
        backbone: dsc(false, false)?,
        dac: dsc(true, false)?,
        full: dsc(true, true)?,
    })
}

pub fn directional_ablation() -> Outcome {
    let run = || -> Result<(bool, String)> {
        let rows = (0..ABLATION_SEEDS)
            .map(ablation_row)
            .collect::<Result<Vec<_>>>()?;
        let wins = rows.iter().filter(|r| r.full >= r.dac).count();
        let mean = |f: fn(&AblationRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
        let (full, backbone) = (mean(|r| r.full), mean(|r| r.backbone));
        Ok((
            wins >= ABLATION_REQUIRED && full >= backbone,
            format!(
                "reweighting >= none in {wins}/{ABLATION_SEEDS} seeds; mean test DSC full {full:.2} vs backbone {backbone:.2} (+DAC {:.2})",
                mean(|r| r.dac)
            ),
        ))
    };
    outcome("directional ablation", run())
}

/// Two identical in-process runs must agree on every recorded number and
/// every checkpoint byte.
pub fn training_determinism() -> Outcome {
    let run = || -> Result<(bool, String)> {
        let mut cfg = ablation_config(0, true, true);
        cfg.train.epochs = 2;
        let dataset = gen_dataset(&cfg.synthetic, 24)?;
        let once = || -> Result<(String, Vec<u8>)> {
            let out = train_run(&cfg, &dataset, |_| ())?;
            Ok((
                serde_json::to_string(&(&out.history, &out.test))?,
                crate::checkpoint::model_to_bytes(&out.model),
            ))
        };
        let (a, b) = (once()?, once()?);
        let same = a == b;
        Ok((
            same,
            format!(
                "history+metrics {} bytes, checkpoint {} bytes, identical: {same}",
                a.0.len(),
                a.1.len()
            ),
        ))
    };
    outcome("training determinism", run())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_enumerates_every_lattice_point() {
        // Compositions of 80 units into 4 parts.
        let features = constructed_instance();
        let banks = RffBank::for_features(2, 5, 0);
        let (value, w) = simplex_grid_minimum(&features, &banks, 1.0).unwrap();
        assert_eq!(w.iter().sum::<f64>(), 4.0);
        assert!(value.is_finite());
    }

    #[test]
    fn focal_fault_is_caught() {
        let cases = gradient_cases(Some(Fault::FocalGradSign));
        let (_, focal) = cases.iter().find(|(n, _)| *n == "focal_loss").unwrap();
        let err = focal(0).unwrap();
        assert!(err > 100.0 * GRAD_TOL, "{err}");
        let clean = gradient_cases(None);
        let (_, focal) = clean.iter().find(|(n, _)| *n == "focal_loss").unwrap();
        assert!(focal(0).unwrap() < GRAD_TOL);
    }

    #[test]
    fn outcome_lines_name_the_property() {
        let o = Outcome {
            name: "x",
            passed: false,
            measured: "1".into(),
        };
        assert!(o.to_string().starts_with("FAIL  x"));
    }
}
