//! Segmentation losses over `N x 2 x H x W` class-probability maps and the
//! mIoU / DSC evaluation metrics over binary masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// Probability clip applied before every logarithm.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha_t: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub dice_smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha_t: 0.8,
            gamma: 2.0,
            lambda: 0.5,
            dice_smooth: 1e-6,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha_t > 0.0
            && self.alpha_t < 1.0
            && self.gamma >= 0.0
            && self.gamma.is_finite()
            && (0.0..=1.0).contains(&self.lambda)
            && self.dice_smooth > 0.0
            && self.dice_smooth.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid loss configuration {self:?}"
            )))
        }
    }
}

/// Binary label maps, `N x H x W`, 1 = nucleus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskMap {
    shape: [usize; 3],
    labels: Vec<u8>,
}

impl MaskMap {
    pub fn new(shape: [usize; 3], labels: Vec<u8>) -> Result<Self> {
        if shape.contains(&0) || shape.iter().product::<usize>() != labels.len() {
            return Err(Error::shape(
                "mask",
                &shape,
                format!("{} labels", labels.len()),
            ));
        }
        if let Some(v) = labels.iter().find(|&&v| v > 1) {
            return Err(Error::Domain {
                op: "mask",
                detail: format!("label {v} is not binary"),
            });
        }
        Ok(Self { shape, labels })
    }

    /// Masks from a tensor whose entries are exactly 0.0 or 1.0.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let shape: [usize; 3] = t
            .shape()
            .try_into()
            .map_err(|_| Error::shape("mask", t.shape(), "expected N x H x W"))?;
        let labels = t
            .data()
            .iter()
            .map(|&v| match v {
                0.0 => Ok(0),
                1.0 => Ok(1),
                _ => Err(Error::Domain {
                    op: "mask",
                    detail: format!("value {v} is not binary"),
                }),
            })
            .collect::<Result<_>>()?;
        Ok(Self { shape, labels })
    }

    /// Hard prediction from class probabilities: nucleus wherever its
    /// probability strictly exceeds the background's.
    pub fn argmax(probs: &Tensor) -> Result<Self> {
        let [n, c, h, w] = probs_shape(probs.shape())?;
        debug_assert_eq!(c, 2);
        let plane = h * w;
        let d = probs.data();
        let labels = (0..n * plane)
            .map(|i| {
                let (s, p) = (i / plane, i % plane);
                u8::from(d[(s * 2 + 1) * plane + p] > d[s * 2 * plane + p])
            })
            .collect();
        Ok(Self {
            shape: [n, h, w],
            labels,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.shape[0] == 0
    }

    pub fn image(&self, i: usize) -> MaskMap {
        let plane = self.shape[1] * self.shape[2];
        MaskMap {
            shape: [1, self.shape[1], self.shape[2]],
            labels: self.labels[i * plane..(i + 1) * plane].to_vec(),
        }
    }

    /// `N x 2 x H x W` one-hot encoding (background, nucleus).
    pub fn one_hot(&self) -> Tensor {
        let [n, h, w] = self.shape;
        let plane = h * w;
        let mut data = vec![0.0; n * 2 * plane];
        for (i, &l) in self.labels.iter().enumerate() {
            let (s, p) = (i / plane, i % plane);
            data[(s * 2 + usize::from(l)) * plane + p] = 1.0;
        }
        Tensor::new(&[n, 2, h, w], data).expect("valid mask shape")
    }

    /// `N x 1 x H x W` foreground indicator.
    pub fn foreground(&self) -> Tensor {
        let [n, h, w] = self.shape;
        Tensor::new(
            &[n, 1, h, w],
            self.labels.iter().map(|&l| f64::from(l)).collect(),
        )
        .expect("valid mask shape")
    }
}

fn probs_shape(shape: &[usize]) -> Result<[usize; 4]> {
    match shape {
        &[n, 2, h, w] => Ok([n, 2, h, w]),
        _ => Err(Error::shape(
            "probabilities",
            shape,
            "expected N x 2 x H x W",
        )),
    }
}

fn check_pair(op: &'static str, probs: Var<'_>, target: &MaskMap) -> Result<()> {
    let [n, _, h, w] = probs_shape(&probs.shape())?;
    if [n, h, w] != target.shape {
        return Err(Error::mismatch(op, &probs.shape(), &target.shape));
    }
    Ok(())
}

/// Probability of the true class per pixel, clipped to `[eps, 1 - eps]`, `N x H x W`.
fn true_class_prob<'t>(probs: Var<'t>, target: &MaskMap) -> Result<Var<'t>> {
    let onehot = probs.tape().constant(target.one_hot());
    Ok(probs
        .mul(onehot)?
        .sum(&[1])?
        .clamp(PROB_EPS, 1.0 - PROB_EPS))
}

/// Mean pixelwise cross-entropy of each sample, shape `[N]`.
pub fn ce_per_sample<'t>(probs: Var<'t>, target: &MaskMap) -> Result<Var<'t>> {
    check_pair("ce_per_sample", probs, target)?;
    true_class_prob(probs, target)?.log()?.neg().mean(&[1, 2])
}

/// Smoothed soft dice over the foreground channel, aggregated over the batch.
pub fn dice_loss<'t>(probs: Var<'t>, target: &MaskMap, cfg: &LossConfig) -> Result<Var<'t>> {
    check_pair("dice_loss", probs, target)?;
    let p = probs.narrow(1, 1, 1)?;
    let y = probs.tape().constant(target.foreground());
    let inter = p.mul(y)?.sum_all();
    let y_sum = target.labels.iter().map(|&l| f64::from(l)).sum::<f64>();
    let num = inter.scale(2.0).add_scalar(cfg.dice_smooth);
    let den = p.sum_all().add_scalar(y_sum + cfg.dice_smooth);
    Ok(num.div(den)?.neg().add_scalar(1.0))
}

/// Focal loss with `alpha_t` on nucleus pixels and `1 - alpha_t` on
/// background, averaged over every pixel of the batch.
pub fn focal_loss<'t>(probs: Var<'t>, target: &MaskMap, cfg: &LossConfig) -> Result<Var<'t>> {
    check_pair("focal_loss", probs, target)?;
    let pt = true_class_prob(probs, target)?;
    let alpha: Vec<f64> = target
        .labels
        .iter()
        .map(|&l| {
            if l == 1 {
                cfg.alpha_t
            } else {
                1.0 - cfg.alpha_t
            }
        })
        .collect();
    let alpha = probs.tape().constant(Tensor::new(&target.shape, alpha)?);
    let modulating = pt.neg().add_scalar(1.0).powf(cfg.gamma)?;
    Ok(alpha.mul(modulating)?.mul(pt.log()?)?.neg().mean_all())
}

/// `l_cim + lambda * l_dice + (1 - lambda) * l_fl`.
pub fn total_loss<'t>(
    l_cim: Var<'t>,
    l_dice: Var<'t>,
    l_fl: Var<'t>,
    cfg: &LossConfig,
) -> Result<Var<'t>> {
    for (name, v) in [("cim", l_cim), ("dice", l_dice), ("focal", l_fl)] {
        if !v.value().is_finite() {
            return Err(Error::NonFinite(format!(
                "{name} loss term is {}",
                v.value().data()[0]
            )));
        }
    }
    l_cim
        .add(l_dice.scale(cfg.lambda))?
        .add(l_fl.scale(1.0 - cfg.lambda))
}

fn check_masks(pred: &MaskMap, gt: &MaskMap) -> Result<()> {
    if pred.shape != gt.shape {
        return Err(Error::mismatch("metric", &pred.shape, &gt.shape));
    }
    Ok(())
}

/// (|P and G|, |P|, |G|) for the nucleus class.
fn fg_counts(pred: &MaskMap, gt: &MaskMap) -> (usize, usize, usize) {
    pred.labels
        .iter()
        .zip(&gt.labels)
        .fold((0, 0, 0), |(i, p, g), (&a, &b)| {
            (
                i + usize::from(a & b),
                p + usize::from(a),
                g + usize::from(b),
            )
        })
}

fn iou(inter: usize, union: usize) -> f64 {
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean of the background and nucleus IoU, in percent.
pub fn miou(pred: &MaskMap, gt: &MaskMap) -> Result<f64> {
    check_masks(pred, gt)?;
    let total = pred.labels.len();
    let (inter, p, g) = fg_counts(pred, gt);
    let fg = iou(inter, p + g - inter);
    // background: intersection = pixels in neither, union = pixels not in both.
    let bg_inter = total - (p + g - inter);
    let bg = iou(bg_inter, total - inter);
    Ok(50.0 * (fg + bg))
}

/// Nucleus-class Dice coefficient in percent; 100 when both masks are empty.
pub fn dsc(pred: &MaskMap, gt: &MaskMap) -> Result<f64> {
    check_masks(pred, gt)?;
    let (inter, p, g) = fg_counts(pred, gt);
    Ok(if p + g == 0 {
        100.0
    } else {
        200.0 * inter as f64 / (p + g) as f64
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (0 for a single value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub miou: MeanStd,
    pub dsc: MeanStd,
    pub per_image_miou: Vec<f64>,
    pub per_image_dsc: Vec<f64>,
}

/// Per-image mIoU and DSC with their mean and sample standard deviation.
pub fn summarize(pred: &MaskMap, gt: &MaskMap) -> Result<MetricSummary> {
    check_masks(pred, gt)?;
    let mut per_image_miou = Vec::with_capacity(pred.len());
    let mut per_image_dsc = Vec::with_capacity(pred.len());
    for i in 0..pred.len() {
        let (p, g) = (pred.image(i), gt.image(i));
        per_image_miou.push(miou(&p, &g)?);
        per_image_dsc.push(dsc(&p, &g)?);
    }
    Ok(MetricSummary {
        miou: MeanStd::of(&per_image_miou),
        dsc: MeanStd::of(&per_image_dsc),
        per_image_miou,
        per_image_dsc,
    })
}
