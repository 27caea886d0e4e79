use proptest::prelude::*;

use cseg::cim::{
    extract_feature_vars, learn_weights, learn_weights_detailed, partial_cross_cov,
    select_channels, weighted_partial_cross_cov, CimConfig, FeatureMatrix, RffBank, SampleWeights,
    SIMPLEX_TOL,
};
use cseg::dac::{concat_stage, dac_fuse, DacLayer};
use cseg::losses::{
    ce_per_sample, dice_loss, dsc, focal_loss, miou, total_loss, LossConfig, MaskMap,
};
use cseg::model::{build_model, ModelConfig};
use cseg::nn::{self, Binder, BlockParams, SimamConfig, TransformerConfig};
use cseg::rng;
use cseg::synth::{augment, gen_sample, rasterize, AugmentOp, Ellipse, Sample, SyntheticConfig};
use cseg::{Tape, Tensor, Var};

fn tensor(shape: &[usize], values: &[f64]) -> Tensor {
    Tensor::new(
        shape,
        values
            .iter()
            .cycle()
            .take(shape.iter().product())
            .copied()
            .collect(),
    )
    .unwrap()
}

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

fn nchw() -> impl Strategy<Value = [usize; 4]> {
    (1usize..3, 1usize..4, 2usize..6, 2usize..6).prop_map(|(n, c, h, w)| [n, c, h, w])
}

fn probs_and_mask(n: usize, h: usize, w: usize, fg: &[f64], labels: &[u8]) -> (Tensor, MaskMap) {
    let mut data = Vec::with_capacity(2 * n * h * w);
    for i in 0..n {
        let plane = &fg[i * h * w..(i + 1) * h * w];
        data.extend(plane.iter().map(|p| 1.0 - p));
        data.extend_from_slice(plane);
    }
    (
        Tensor::new(&[n, 2, h, w], data).unwrap(),
        MaskMap::new([n, h, w], labels.to_vec()).unwrap(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn concat_then_split_is_identity(shape in nchw(), extra in 1usize..4, v in values(64)) {
        let tape = Tape::no_grad();
        let a = tape.constant(tensor(&shape, &v));
        let mut other = shape;
        other[1] = extra;
        let b = tape.constant(tensor(&other, &v[3..]));
        let joined = Var::concat(&[a, b], 1).unwrap();
        let parts = joined.split(1, &[shape[1], extra]).unwrap();
        prop_assert_eq!(parts[0].value(), a.value());
        prop_assert_eq!(parts[1].value(), b.value());
    }

    #[test]
    fn pad_then_crop_is_identity(shape in nchw(), pad in 0usize..3, v in values(64)) {
        let tape = Tape::no_grad();
        let x = tape.constant(tensor(&shape, &v));
        let back = x.pad2d(pad).unwrap().crop2d(pad, pad, shape[2], shape[3]).unwrap();
        prop_assert_eq!(back.value(), x.value());
    }

    #[test]
    fn mismatched_shapes_never_broadcast(a in nchw(), b in nchw(), v in values(64)) {
        prop_assume!(a != b);
        let tape = Tape::no_grad();
        let x = tape.constant(tensor(&a, &v));
        let y = tape.constant(tensor(&b, &v));
        prop_assert!(x.add(y).is_err());
        prop_assert!(x.mul(y).is_err());
        // A scalar operand is the only accepted broadcast.
        prop_assert!(x.mul(tape.scalar(2.0)).is_ok());
    }

    #[test]
    fn forward_is_bitwise_deterministic(shape in nchw(), v in values(64)) {
        let run = || {
            let tape = Tape::no_grad();
            let x = tape.constant(tensor(&shape, &v));
            let k = tape.constant(tensor(&[2, shape[1], 3, 3], &v[5..]));
            let y = nn::simam(x.conv2d(k, 1, 1).unwrap(), &SimamConfig::default()).unwrap();
            y.value().data().iter().map(|f| f.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn simam_coefficients_lie_in_open_unit_interval(shape in nchw(), v in values(64)) {
        let x = tensor(&shape, &v.iter().map(|t| t + 3.0).collect::<Vec<_>>());
        let tape = Tape::no_grad();
        let y = nn::simam(tape.constant(x.clone()), &SimamConfig::default()).unwrap();
        prop_assert_eq!(y.shape(), shape.to_vec());
        for (a, b) in x.data().iter().zip(y.value().data()) {
            let coeff = b / a;
            prop_assert!(coeff > 0.0 && coeff < 1.0, "{}", coeff);
        }
    }

    #[test]
    fn simam_constant_channel_gets_sigmoid_half(shape in nchw(), c in 0.1f64..3.0) {
        let tape = Tape::no_grad();
        let y = nn::simam(tape.constant(Tensor::full(&shape, c)), &SimamConfig::default()).unwrap();
        let expected = c / (1.0 + (-0.5f64).exp());
        for v in y.value().data() {
            prop_assert!((v - expected).abs() <= 1e-15 * c, "{} vs {}", v, expected);
        }
    }

    #[test]
    fn simam_argmax_survives_positive_channel_scaling(h in 2usize..6, w in 2usize..6, v in values(64), s in 0.1f64..10.0) {
        let shape = [1, 1, h, w];
        let x = tensor(&shape, &v);
        let coeffs = |x: &Tensor| {
            let tape = Tape::no_grad();
            let y = nn::simam(tape.constant(x.clone()), &SimamConfig::default()).unwrap();
            y.value().data().iter().zip(x.data()).map(|(y, x)| y / x).collect::<Vec<f64>>()
        };
        let argmax = |c: &[f64]| c.iter().enumerate().fold(0, |b, (i, &v)| if v > c[b] { i } else { b });
        let scaled = Tensor::new(&shape, x.data().iter().map(|v| v * s).collect()).unwrap();
        let (ca, cb) = (coeffs(&x), coeffs(&scaled));
        let (a, b) = (argmax(&ca), argmax(&cb));
        // The winning position depends only on the squared deviation, so
        // a different index is acceptable only for a tie in the original.
        let dev = |i: usize| (x.data()[i] - x.data().iter().sum::<f64>() / x.data().len() as f64).powi(2);
        prop_assert!(a == b || (dev(a) - dev(b)).abs() <= 1e-9 * dev(a).max(1.0), "{} vs {}", a, b);
    }

    #[test]
    fn block_shape_formulas(n in 1usize..3, cin in 1usize..4, cout in 1usize..5, half in 1usize..4, seed in 0u64..1000) {
        let s = 2 * half;
        let mut r = rng::rng(seed);
        let tape = Tape::no_grad();
        let x = tape.constant(Tensor::full(&[n, cin, s, s], 0.3));
        let mut b = Binder::new(&tape);
        let down = b.block("d", &BlockParams::cnn_down(cin, cout, &mut r));
        prop_assert_eq!(nn::cnn_down(x, &down).unwrap().shape(), vec![n, cout, half, half]);
        let mb = b.block("m", &BlockParams::mbconv(cin, cout, 2, &mut r));
        prop_assert_eq!(nn::mbconv(x, &mb, 2).unwrap().shape(), vec![n, cout, half, half]);
        let mb1 = b.block("m1", &BlockParams::mbconv(cin, cout, 1, &mut r));
        prop_assert_eq!(nn::mbconv(x, &mb1, 1).unwrap().shape(), vec![n, cout, s, s]);
        let low = tape.constant(Tensor::full(&[n, cout, half, half], 0.1));
        let dec = b.block("u", &BlockParams::decoder(cout, cin, 3, &mut r));
        prop_assert_eq!(nn::decoder_block(low, x, &dec).unwrap().shape(), vec![n, 3, s, s]);
    }

    #[test]
    fn attention_rows_are_stochastic(seed in 0u64..1000, v in values(64)) {
        let cfg = TransformerConfig { patch: 2, heads: 2, layers: 1 };
        let p = BlockParams::transformer(4, 4, &cfg, &mut rng::rng(seed));
        let tape = Tape::no_grad();
        let x = tape.constant(tensor(&[2, 4, 4, 4], &v));
        let (_, maps) = nn::transformer_block_with_attention(x, &p.bind(&tape), &cfg).unwrap();
        for m in maps {
            let t = m.shape()[1];
            for row in m.data().chunks(t) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn concat_stage_is_linear_in_the_branch_scale(shape in nchw(), v in values(64), alpha in -3.0f64..3.0, k in 0.1f64..2.0) {
        let tape = Tape::no_grad();
        let f1 = tensor(&shape, &v);
        let f2 = tensor(&shape, &v[7..]);
        let scaled = Tensor::new(&shape, f1.data().iter().map(|x| alpha * x).collect()).unwrap();
        let lhs = concat_stage(tape.constant(scaled), tape.constant(f2.clone()), tape.scalar(k), tape.scalar(1.0)).unwrap();
        let rhs = concat_stage(tape.constant(f1), tape.constant(f2), tape.scalar(alpha * k), tape.scalar(1.0)).unwrap();
        // alpha*x*k and x*(alpha*k) may round differently; equal to one ulp.
        for (a, b) in lhs.value().data().iter().zip(rhs.value().data()) {
            prop_assert!((a - b).abs() <= 2.0 * f64::EPSILON * a.abs().max(b.abs()));
        }
    }

    #[test]
    fn dac_fuse_keeps_batch_and_spatial_extents(shape in nchw(), c2 in 1usize..4, out in 1usize..5, seed in 0u64..1000) {
        prop_assume!(shape[2] * shape[3] >= 2);
        let layer = DacLayer::new(1, shape[1], c2, out, &mut rng::rng(seed));
        prop_assert_eq!(layer.k1.item().unwrap().to_bits(), 1.0f64.to_bits());
        prop_assert_eq!(layer.k2.item().unwrap().to_bits(), 1.0f64.to_bits());
        let tape = Tape::no_grad();
        let mut b = Binder::new(&tape);
        let bound = cseg::dac::BoundDac { k1: b.tensor("k1", &layer.k1), k2: b.tensor("k2", &layer.k2), fuse: b.block("f", &layer.fuse) };
        let f1 = tape.constant(Tensor::full(&shape, 0.5));
        let mut s2 = shape;
        s2[1] = c2;
        let f2 = tape.constant(tensor(&s2, &[0.1, -0.4, 0.9]));
        let y = dac_fuse(f1, f2, &bound, &SimamConfig::default()).unwrap();
        prop_assert_eq!(y.shape(), vec![shape[0], out, shape[2], shape[3]]);
    }

    #[test]
    fn unit_weights_reduce_and_norms_are_symmetric(n in 2usize..12, a in 1usize..5, b in 1usize..5, v in values(128)) {
        let u = tensor(&[n, a], &v);
        let w = tensor(&[n, b], &v[11..]);
        let plain = partial_cross_cov(&u, &w).unwrap();
        let unit = weighted_partial_cross_cov(&u, &w, &SampleWeights::uniform(n)).unwrap();
        for (x, y) in plain.data().iter().zip(unit.data()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        let norm = |t: &Tensor| t.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((norm(&plain) - norm(&partial_cross_cov(&w, &u).unwrap())).abs() <= 1e-12);
    }

    #[test]
    fn learner_stays_on_simplex_and_never_worsens(n in 2usize..10, m in 2usize..5, v in values(64), seed in 0u64..10_000) {
        let features = FeatureMatrix::new(n, m, v.iter().cycle().take(n * m).copied().collect()).unwrap();
        let cfg = CimConfig { seed, ..CimConfig::default() };
        let l = learn_weights_detailed(&features, &cfg).unwrap();
        let w = l.weights.as_slice();
        prop_assert!(w.iter().all(|x| *x >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - n as f64).abs() <= SIMPLEX_TOL);
        prop_assert!(l.objective <= l.uniform_objective);
        prop_assert_eq!(learn_weights(&features, &cfg).unwrap(), l.weights);
    }

    #[test]
    fn seeded_cim_pieces_are_deterministic(seed in 0u64..u64::MAX, c in 1usize..40, m in 1usize..20) {
        prop_assert_eq!(RffBank::for_features(3, 5, seed), RffBank::for_features(3, 5, seed));
        let picked = select_channels(c, m, seed);
        prop_assert_eq!(&picked, &select_channels(c, m, seed));
        prop_assert_eq!(picked.len(), m.min(c));
        prop_assert!(picked.windows(2).all(|p| p[0] < p[1]) && picked.iter().all(|&i| i < c));
    }

    #[test]
    fn loss_and_metric_ranges(n in 1usize..3, h in 1usize..5, w in 1usize..5, fg in prop::collection::vec(0.0f64..=1.0, 32), labels in prop::collection::vec(0u8..=1, 32), pred in prop::collection::vec(0u8..=1, 32)) {
        let k = n * h * w;
        let (probs, mask) = probs_and_mask(n, h, w, &fg[..k], &labels[..k]);
        let cfg = LossConfig::default();
        let tape = Tape::no_grad();
        let p = tape.constant(probs);
        prop_assert!(ce_per_sample(p, &mask).unwrap().value().data().iter().all(|v| *v >= 0.0));
        let d = dice_loss(p, &mask, &cfg).unwrap().item().unwrap();
        prop_assert!((0.0..1.0).contains(&d));
        prop_assert!(focal_loss(p, &mask, &cfg).unwrap().item().unwrap() >= 0.0);
        let pm = MaskMap::new([n, h, w], pred[..k].to_vec()).unwrap();
        for v in [miou(&pm, &mask).unwrap(), dsc(&pm, &mask).unwrap()] {
            prop_assert!((0.0..=100.0).contains(&v));
        }
    }

    #[test]
    fn focal_without_focusing_is_half_cross_entropy(fg in prop::collection::vec(0.01f64..0.99, 18), labels in prop::collection::vec(0u8..=1, 18)) {
        let (probs, mask) = probs_and_mask(2, 3, 3, &fg, &labels);
        let cfg = LossConfig { alpha_t: 0.5, gamma: 0.0, ..LossConfig::default() };
        let tape = Tape::no_grad();
        let p = tape.constant(probs);
        let fl = focal_loss(p, &mask, &cfg).unwrap().item().unwrap();
        let ce = ce_per_sample(p, &mask).unwrap().mean_all().item().unwrap();
        prop_assert!((fl - 0.5 * ce).abs() <= 1e-9);
    }

    #[test]
    fn total_loss_is_linear(a in 0.0f64..5.0, b in 0.0f64..5.0, c in 0.0f64..5.0, t in 0.0f64..3.0) {
        let cfg = LossConfig::default();
        let tape = Tape::no_grad();
        let total = |x: f64, y: f64, z: f64| total_loss(tape.scalar(x), tape.scalar(y), tape.scalar(z), &cfg).unwrap().item().unwrap();
        prop_assert_eq!(total(a, 0.0, 0.0), a);
        prop_assert_eq!(total(0.0, b, 0.0), cfg.lambda * b);
        prop_assert_eq!(total(0.0, 0.0, c), (1.0 - cfg.lambda) * c);
        let base = total(a, b, c);
        for shifted in [total(a + t, b, c) - t, total(a, b + t, c) - cfg.lambda * t, total(a, b, c + t) - (1.0 - cfg.lambda) * t] {
            prop_assert!((shifted - base).abs() <= 1e-12 * (1.0 + base.abs()));
        }
    }

    #[test]
    fn generated_samples_are_valid_and_seeded(id in 0usize..10_000, seed in 0u64..1000) {
        let cfg = SyntheticConfig { image_size: 32, radius_range: [2.0, 5.0], seed, ..SyntheticConfig::default() };
        let s = gen_sample(&cfg, id).unwrap();
        prop_assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(s.mask.labels().iter().all(|&l| l <= 1));
        prop_assert_eq!(s.domain_id, id % cfg.domains.len());
        prop_assert_eq!(gen_sample(&cfg, id).unwrap(), s);
    }

    #[test]
    fn flips_and_rotations_commute_with_rasterization(
        h in 4usize..14,
        w in 4usize..14,
        shapes in prop::collection::vec((0usize..14, 0usize..14, 1.0f64..5.0, 1.0f64..5.0), 1..4),
        turns in 0u8..4,
    ) {
        let ellipses: Vec<Ellipse> = shapes
            .iter()
            .map(|&(x, y, rx, ry)| Ellipse { cx: (x % w) as f64, cy: (y % h) as f64, rx, ry, angle: 0.0 })
            .collect();
        let sample = Sample {
            image: Tensor::zeros(&[3, h, w]),
            mask: MaskMap::new([1, h, w], rasterize(&ellipses, h, w)).unwrap(),
            domain_id: 0,
            sample_id: 0,
            meta: None,
        };
        let flipped: Vec<Ellipse> = ellipses.iter().map(|e| Ellipse { cx: (w - 1) as f64 - e.cx, ..*e }).collect();
        let out = augment(&sample, &[AugmentOp::HorizontalFlip], 0).unwrap();
        let expected = rasterize(&flipped, h, w);
        prop_assert_eq!(out.mask.labels(), expected.as_slice());

        // One counter-clockwise quarter turn maps (x, y) to (y, w - 1 - x).
        let mut rotated = ellipses.clone();
        let (mut rh, mut rw) = (h, w);
        for _ in 0..turns {
            rotated = rotated.iter().map(|e| Ellipse { cx: e.cy, cy: (rw - 1) as f64 - e.cx, rx: e.ry, ry: e.rx, angle: 0.0 }).collect();
            (rh, rw) = (rw, rh);
        }
        let out = augment(&sample, &[AugmentOp::Rotate { quarter_turns: turns }], 0).unwrap();
        prop_assert_eq!(out.mask.shape(), [1, rh, rw]);
        let expected = rasterize(&rotated, rh, rw);
        prop_assert_eq!(out.mask.labels(), expected.as_slice());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn model_outputs_a_per_pixel_simplex(seed in 0u64..1000, v in values(64)) {
        let cfg = ModelConfig {
            channels_per_level: vec![4, 6, 8, 10, 12],
            transformer: TransformerConfig { patch: 8, heads: 2, layers: 1 },
            ..ModelConfig::default()
        };
        let model = build_model(&cfg, seed).unwrap();
        let tape = Tape::no_grad();
        let images = tensor(&[2, 3, 64, 64], &v.iter().map(|x| (x + 2.0) / 4.0).collect::<Vec<_>>());
        let out = model.bind(&tape).forward(tape.constant(images)).unwrap();
        let probs = out.probs.value();
        let plane = 64 * 64;
        for i in 0..2 {
            for px in 0..plane {
                let sum = probs.data()[i * 2 * plane + px] + probs.data()[(i * 2 + 1) * plane + px];
                prop_assert!((sum - 1.0).abs() <= 1e-9);
            }
        }
        prop_assert_eq!(out.f5.shape(), vec![2, 12, 2, 2]);
        let features = extract_feature_vars(&out.f5.value(), &CimConfig::default(), seed).unwrap();
        prop_assert_eq!((features.n, features.m), (2, 12));
    }
}

proptest! {
    #[test]
    fn perfect_prediction_scores_one_hundred(labels in prop::collection::vec(0u8..=1, 2 * 5 * 4)) {
        let fg: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
        let (probs, mask) = probs_and_mask(2, 5, 4, &fg, &labels);
        let pred = MaskMap::argmax(&probs).unwrap();
        prop_assert_eq!(miou(&pred, &mask).unwrap(), 100.0);
        prop_assert_eq!(dsc(&pred, &mask).unwrap(), 100.0);
    }
}
