//! Sample reweighting for feature decorrelation.
//!
//! Scalar feature variables are pooled from the deepest encoder map, mapped
//! through random Fourier features, and compared pairwise with a weighted
//! partial cross-covariance. The weight learner searches the scaled simplex
//! `{w >= 0, sum w = n}` for weights that minimize the summed squared
//! Frobenius norms, and the network is then trained on the per-sample
//! cross-entropy reweighted by those (detached) weights.
//!
//! The objective exists twice: [`independence_objective`] evaluates each
//! feature pair directly in plain `f64`, while the tape version used for the
//! inner gradient descent forms one joint covariance of all features and
//! masks out the diagonal blocks. The two are tested to agree.

use std::f64::consts::{PI, SQRT_2};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};

/// Tolerance on `|sum w - n|`.
pub const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CimConfig {
    /// Fourier functions per feature variable.
    pub n_f: usize,
    /// Maximum number of pooled channels used as feature variables.
    pub m_features: usize,
    pub inner_steps: usize,
    pub inner_lr: f64,
    /// Derived from the run seed when loaded as part of a run configuration.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for CimConfig {
    fn default() -> Self {
        Self {
            n_f: 5,
            m_features: 16,
            inner_steps: 20,
            inner_lr: 0.05,
            seed: 0,
        }
    }
}

impl CimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_f == 0 || self.m_features == 0 || self.inner_steps == 0 {
            return Err(Error::Config("cim counts must be positive".into()));
        }
        if !(self.inner_lr > 0.0 && self.inner_lr.is_finite()) {
            return Err(Error::Config(format!(
                "cim inner_lr must be positive, got {}",
                self.inner_lr
            )));
        }
        Ok(())
    }
}

const CHANNEL_STREAM: u64 = 1;
const BANK_STREAM: u64 = 2;

/// Random Fourier features `sqrt(2) cos(omega_j x + phi_j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RffBank {
    pub omega: Vec<f64>,
    pub phi: Vec<f64>,
    pub seed: u64,
}

impl RffBank {
    pub fn new(n_f: usize, seed: u64) -> Self {
        let mut r = rng::rng(seed);
        let omega = (0..n_f).map(|_| StandardNormal.sample(&mut r)).collect();
        let phi = (0..n_f).map(|_| r.random_range(0.0..2.0 * PI)).collect();
        Self { omega, phi, seed }
    }

    /// One bank per feature slot, each from its own stream of `seed`.
    pub fn for_features(m: usize, n_f: usize, seed: u64) -> Vec<Self> {
        let base = rng::derive(seed, BANK_STREAM);
        (0..m)
            .map(|j| Self::new(n_f, rng::derive(base, j as u64)))
            .collect()
    }

    pub fn n_f(&self) -> usize {
        self.omega.len()
    }
}

/// `n x n_f` feature map of one column of samples.
pub fn rff_map(column: &[f64], bank: &RffBank) -> Result<Tensor> {
    if let Some(i) = column.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("rff input at sample {i}")));
    }
    if column.is_empty() {
        return Err(Error::DegenerateReduction {
            op: "rff_map",
            count: 0,
        });
    }
    let data = column
        .iter()
        .flat_map(|&x| {
            bank.omega
                .iter()
                .zip(&bank.phi)
                .map(move |(w, p)| SQRT_2 * (w * x + p).cos())
        })
        .collect();
    Tensor::new(&[column.len(), bank.n_f()], data)
}

/// Feature variables, `n` samples by `m` columns, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub n: usize,
    pub m: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(n: usize, m: usize, data: Vec<f64>) -> Result<Self> {
        if n * m != data.len() || n == 0 || m == 0 {
            return Err(Error::shape(
                "features",
                &[n, m],
                format!("{} values", data.len()),
            ));
        }
        Ok(Self { n, m, data })
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.data[i * self.m + j]).collect()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.m..(i + 1) * self.m]
    }
}

/// Channels used as feature variables: `min(m_features, channels)` indices
/// drawn from the seed, in increasing order.
pub fn select_channels(channels: usize, m_features: usize, seed: u64) -> Vec<usize> {
    let m = m_features.min(channels);
    let mut r = rng::stream(seed, CHANNEL_STREAM);
    let mut picked = rand::seq::index::sample(&mut r, channels, m).into_vec();
    picked.sort_unstable();
    picked
}

/// Global-average-pooled channels of an `N x C x H x W` map, restricted to
/// the seeded channel selection.
pub fn extract_feature_vars(f5: &Tensor, cfg: &CimConfig, seed: u64) -> Result<FeatureMatrix> {
    let [n, c, h, w] = <[usize; 4]>::try_from(f5.shape()).map_err(|_| {
        Error::shape(
            "extract_feature_vars",
            f5.shape(),
            "expected an NCHW tensor",
        )
    })?;
    if n < 2 {
        return Err(Error::DegenerateReduction {
            op: "extract_feature_vars",
            count: n,
        });
    }
    let plane = h * w;
    let channels = select_channels(c, cfg.m_features, seed);
    let mut data = Vec::with_capacity(n * channels.len());
    for i in 0..n {
        for &ch in &channels {
            let start = (i * c + ch) * plane;
            data.push(f5.data()[start..start + plane].iter().sum::<f64>() / plane as f64);
        }
    }
    FeatureMatrix::new(n, channels.len(), data)
}

/// Per-sample weights on `{w >= 0, sum w = n}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleWeights {
    w: Vec<f64>,
}

impl SampleWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        let n = w.len() as f64;
        let sum: f64 = w.iter().sum();
        if w.is_empty() || w.iter().any(|v| v.is_nan() || *v < 0.0) || (sum - n).abs() > SIMPLEX_TOL
        {
            return Err(Error::Constraint(format!(
                "sample weights must be non-negative and sum to {n}, got sum {sum}"
            )));
        }
        Ok(Self { w })
    }

    pub fn uniform(n: usize) -> Self {
        Self { w: vec![1.0; n] }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

fn matrix_dims(op: &'static str, u: &Tensor, v: &Tensor) -> Result<(usize, usize, usize)> {
    match (u.shape(), v.shape()) {
        (&[n, du], &[nv, dv]) if n == nv => {
            if n < 2 {
                Err(Error::DegenerateReduction { op, count: n })
            } else {
                Ok((n, du, dv))
            }
        }
        _ => Err(Error::mismatch(op, u.shape(), v.shape())),
    }
}

/// `1/(n-1) * sum_i (u_i - mean u)^T (v_i - mean v)`, `d_u x d_v`.
pub fn partial_cross_cov(u: &Tensor, v: &Tensor) -> Result<Tensor> {
    weighted_cov(u, v, None, "partial_cross_cov")
}

/// Partial cross-covariance of weighted rows: the centered terms are
/// `w_i u_i - (1/n) sum_j w_j u_j` (likewise for `v`).
pub fn weighted_partial_cross_cov(u: &Tensor, v: &Tensor, w: &SampleWeights) -> Result<Tensor> {
    weighted_cov(u, v, Some(w.as_slice()), "weighted_partial_cross_cov")
}

fn weighted_cov(u: &Tensor, v: &Tensor, w: Option<&[f64]>, op: &'static str) -> Result<Tensor> {
    let (n, du, dv) = matrix_dims(op, u, v)?;
    if let Some(w) = w {
        if w.len() != n {
            return Err(Error::mismatch(op, u.shape(), &[w.len()]));
        }
    }
    let weight = |i: usize| w.map_or(1.0, |w| w[i]);
    let centered = |t: &Tensor, d: usize| {
        let mut out: Vec<f64> = (0..n * d).map(|k| weight(k / d) * t.data()[k]).collect();
        for c in 0..d {
            let mean = (0..n).map(|i| out[i * d + c]).sum::<f64>() / n as f64;
            (0..n).for_each(|i| out[i * d + c] -= mean);
        }
        out
    };
    let (a, b) = (centered(u, du), centered(v, dv));
    let mut cov = vec![0.0; du * dv];
    for i in 0..n {
        for p in 0..du {
            for q in 0..dv {
                cov[p * dv + q] += a[i * du + p] * b[i * dv + q];
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= (n - 1) as f64);
    Tensor::new(&[du, dv], cov)
}

fn check_objective_inputs(features: &FeatureMatrix, banks: &[RffBank], n_w: usize) -> Result<()> {
    if features.m < 2 {
        return Err(Error::Config(format!(
            "need at least 2 feature variables, got {}",
            features.m
        )));
    }
    if banks.len() != features.m {
        return Err(Error::Config(format!(
            "{} feature variables but {} banks",
            features.m,
            banks.len()
        )));
    }
    if n_w != features.n {
        return Err(Error::mismatch(
            "independence_objective",
            &[features.n],
            &[n_w],
        ));
    }
    Ok(())
}

fn rff_maps(features: &FeatureMatrix, banks: &[RffBank]) -> Result<Vec<Tensor>> {
    (0..features.m)
        .map(|j| rff_map(&features.column(j), &banks[j]))
        .collect()
}

/// `sum_{i<j} ||weighted_partial_cross_cov(rff(A_i), rff(A_j), w)||_F^2`.
pub fn independence_objective(
    features: &FeatureMatrix,
    banks: &[RffBank],
    w: &SampleWeights,
) -> Result<f64> {
    check_objective_inputs(features, banks, w.len())?;
    let maps = rff_maps(features, banks)?;
    let mut total = 0.0;
    for i in 0..maps.len() {
        for j in i + 1..maps.len() {
            let cov = weighted_partial_cross_cov(&maps[i], &maps[j], w)?;
            total += cov.data().iter().map(|c| c * c).sum::<f64>();
        }
    }
    Ok(total)
}

/// Differentiable objective over precomputed RFF maps (`n x n_f` each) as a
/// function of the weight vector `w` (`[n]`).
pub fn independence_objective_var<'t>(maps: &[Tensor], w: Var<'t>) -> Result<Var<'t>> {
    let tape = w.tape();
    let joint = Tensor::new(
        &[maps[0].shape()[0], maps.iter().map(|m| m.shape()[1]).sum()],
        (0..maps[0].shape()[0])
            .flat_map(|i| {
                maps.iter().flat_map(move |m| {
                    m.data()[i * m.shape()[1]..(i + 1) * m.shape()[1]]
                        .iter()
                        .copied()
                })
            })
            .collect(),
    )?;
    let [n, d] = [joint.shape()[0], joint.shape()[1]];
    let phi = tape.constant(joint);
    let weighted = phi.mul(w.reshape(&[n, 1])?.expand(&[n, d])?)?;
    let centered = weighted.sub(weighted.mean(&[0])?.reshape(&[1, d])?.expand(&[n, d])?)?;
    let cov = centered
        .transpose()?
        .matmul(centered)?
        .scale(1.0 / (n - 1) as f64);

    // Each off-diagonal block appears twice in the symmetric joint covariance.
    let mut block = Vec::with_capacity(d);
    for (j, m) in maps.iter().enumerate() {
        block.extend(std::iter::repeat_n(j, m.shape()[1]));
    }
    let mask: Vec<f64> = (0..d * d)
        .map(|k| {
            if block[k / d] == block[k % d] {
                0.0
            } else {
                0.5
            }
        })
        .collect();
    Ok(cov
        .mul(cov)?
        .mul(tape.constant(Tensor::new(&[d, d], mask)?))?
        .sum_all())
}

fn softmax_weights(theta: &[f64]) -> Vec<f64> {
    let n = theta.len() as f64;
    let max = theta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = theta.iter().map(|t| (t - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.iter().map(|v| n * v / total).collect()
}

/// Projects rounding drift back onto the simplex.
fn renormalize(mut w: Vec<f64>) -> Vec<f64> {
    let n = w.len() as f64;
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v *= n / total);
    w
}

#[derive(Clone, Debug, PartialEq)]
pub struct LearnedWeights {
    pub weights: SampleWeights,
    pub objective: f64,
    pub uniform_objective: f64,
    /// Iterate the weights come from; 0 is the uniform start.
    pub best_iterate: usize,
}

/// Gradient descent on `theta` with `w = n softmax(theta)`, starting from
/// uniform weights; returns the best iterate seen, the start included.
pub fn learn_weights(features: &FeatureMatrix, cfg: &CimConfig) -> Result<SampleWeights> {
    learn_weights_detailed(features, cfg).map(|r| r.weights)
}

pub fn learn_weights_detailed(features: &FeatureMatrix, cfg: &CimConfig) -> Result<LearnedWeights> {
    cfg.validate()?;
    if features.n < 2 {
        return Err(Error::DegenerateReduction {
            op: "learn_weights",
            count: features.n,
        });
    }
    let banks = RffBank::for_features(features.m, cfg.n_f, cfg.seed);
    check_objective_inputs(features, &banks, features.n)?;
    let maps = rff_maps(features, &banks)?;
    let n = features.n;
    let mut theta = vec![0.0; n];
    let mut best: Option<(f64, Vec<f64>, usize)> = None;
    let mut uniform_objective = f64::NAN;
    for iterate in 0..=cfg.inner_steps {
        let tape = Tape::new();
        let th = tape.param(&Tensor::from_vec(theta.clone()));
        let w = th.softmax(0)?.scale(n as f64);
        let objective = independence_objective_var(&maps, w)?;
        let value = objective.item()?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "weight learner objective at iterate {iterate}"
            )));
        }
        if iterate == 0 {
            uniform_objective = value;
        }
        if best.as_ref().is_none_or(|(b, _, _)| value < *b) {
            best = Some((value, softmax_weights(&theta), iterate));
        }
        if iterate == cfg.inner_steps {
            break;
        }
        let grads = tape.backward(objective)?;
        let g = grads.get_or_zeros(th);
        if !g.is_finite() {
            return Err(Error::NonFinite(format!(
                "weight learner gradient at iterate {iterate}"
            )));
        }
        theta
            .iter_mut()
            .zip(g.data())
            .for_each(|(t, g)| *t -= cfg.inner_lr * g);
    }
    let (objective, w, best_iterate) = best.expect("at least one iterate");
    let weights = if best_iterate == 0 {
        SampleWeights::uniform(n)
    } else {
        SampleWeights::new(renormalize(w))?
    };
    Ok(LearnedWeights {
        weights,
        objective,
        uniform_objective,
        best_iterate,
    })
}

/// `(1/n) sum_i w_i ce_i`; the weights enter as constants.
pub fn cim_loss<'t>(ce_per_sample: Var<'t>, w: &SampleWeights) -> Result<Var<'t>> {
    if ce_per_sample.shape() != [w.len()] {
        return Err(Error::mismatch(
            "cim_loss",
            &ce_per_sample.shape(),
            &[w.len()],
        ));
    }
    let weights = ce_per_sample
        .tape()
        .constant(Tensor::from_vec(w.as_slice().to_vec()));
    Ok(ce_per_sample.mul(weights)?.mean_all())
}
