//! Synthetic nucleus images: tinted backgrounds with darker elliptical
//! nuclei, blurred edges, per-domain noise, and an optional planted
//! correlation between background tint and nucleus density. Also the
//! training-time augmentations, dataset splitting, and PPM/PGM storage.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::MaskMap;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    /// Per-channel multipliers applied to every pixel.
    pub tint: [f64; 3],
    pub noise_sigma: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Confound {
    TintDensity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpuriousConfig {
    pub confound: Confound,
    pub strength: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub image_size: usize,
    pub nuclei_count_range: [usize; 2],
    pub radius_range: [f64; 2],
    pub overlap_allowed: bool,
    pub blur_sigma: f64,
    pub domains: Vec<DomainSpec>,
    pub spurious: Option<SpuriousConfig>,
    /// Derived from the run seed when loaded as part of a run configuration.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            nuclei_count_range: [3, 10],
            radius_range: [3.0, 7.0],
            overlap_allowed: true,
            blur_sigma: 0.8,
            domains: vec![
                DomainSpec {
                    tint: [1.0, 1.0, 1.0],
                    noise_sigma: 0.03,
                },
                DomainSpec {
                    tint: [0.95, 0.9, 1.0],
                    noise_sigma: 0.04,
                },
                DomainSpec {
                    tint: [1.0, 0.92, 0.88],
                    noise_sigma: 0.05,
                },
            ],
            spurious: None,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.nuclei_count_range;
        let [rlo, rhi] = self.radius_range;
        if self.image_size < 2 || lo > hi || hi == 0 {
            return Err(Error::Config(format!(
                "invalid image size {} or nuclei count range [{lo}, {hi}]",
                self.image_size
            )));
        }
        if !(rlo > 0.0 && rlo <= rhi && rhi.is_finite()) {
            return Err(Error::Config(format!(
                "invalid radius range [{rlo}, {rhi}]"
            )));
        }
        if 2.0 * rhi > self.image_size as f64 - 1.0 {
            return Err(Error::Config(format!(
                "radius {rhi} does not fit in a {0}x{0} image",
                self.image_size
            )));
        }
        if !(self.blur_sigma >= 0.0 && self.blur_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "invalid blur sigma {}",
                self.blur_sigma
            )));
        }
        if self.domains.is_empty() {
            return Err(Error::Config("at least one domain is required".into()));
        }
        for d in &self.domains {
            if d.tint.iter().any(|t| !(*t >= 0.0 && t.is_finite()))
                || !(d.noise_sigma >= 0.0 && d.noise_sigma.is_finite())
            {
                return Err(Error::Config(format!("invalid domain {d:?}")));
            }
        }
        if let Some(s) = &self.spurious {
            if !(0.0..=1.0).contains(&s.strength) {
                return Err(Error::Config(format!(
                    "spurious strength {} outside [0, 1]",
                    s.strength
                )));
            }
        }
        Ok(())
    }

    /// Domain whose tint-density relation is reversed, when a planted
    /// correlation exists and there is more than one domain.
    pub fn heldout_domain(&self) -> Option<usize> {
        (self.spurious.is_some() && self.domains.len() > 1).then(|| self.domains.len() - 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub angle: f64,
}

impl Ellipse {
    /// Whether the pixel with integer coordinates `(x, y)` lies inside.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub ellipses: Vec<Ellipse>,
    /// Background tint level in [0, 1].
    pub tint: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `3 x H x W`, values in [0, 1].
    pub image: Tensor,
    /// `1 x H x W`.
    pub mask: MaskMap,
    pub domain_id: usize,
    pub sample_id: usize,
    pub meta: Option<SampleMeta>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

const BACKGROUND_LOW: [f64; 3] = [0.93, 0.80, 0.86];
const BACKGROUND_HIGH: [f64; 3] = [0.78, 0.62, 0.80];
const NUCLEUS_LOW: [f64; 3] = [0.42, 0.25, 0.55];
const NUCLEUS_HIGH: [f64; 3] = [0.30, 0.18, 0.48];

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * t)
}

/// Draws the tint level and nucleus count of one sample.
fn tint_and_count(cfg: &SyntheticConfig, domain: usize, r: &mut Rng) -> (f64, usize) {
    let [lo, hi] = cfg.nuclei_count_range;
    let z: f64 = r.random();
    let count = lo + (z * (hi - lo) as f64).round() as usize;
    let coupled: f64 = r.random();
    let free: f64 = r.random();
    let tint = match &cfg.spurious {
        Some(s) if coupled < s.strength => {
            if cfg.heldout_domain() == Some(domain) {
                1.0 - z
            } else {
                z
            }
        }
        _ => free,
    };
    (tint, count)
}

fn place_ellipses(cfg: &SyntheticConfig, count: usize, r: &mut Rng) -> Result<Vec<Ellipse>> {
    let s = cfg.image_size as f64;
    let [rlo, rhi] = cfg.radius_range;
    let mut out: Vec<Ellipse> = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        if attempts > 1000 * count.max(1) {
            return Err(Error::Config(format!(
                "could not place {count} non-overlapping nuclei in a {0}x{0} image",
                cfg.image_size
            )));
        }
        let e = Ellipse {
            cx: r.random_range(rhi..=s - 1.0 - rhi),
            cy: r.random_range(rhi..=s - 1.0 - rhi),
            rx: r.random_range(rlo..=rhi),
            ry: r.random_range(rlo..=rhi),
            angle: r.random_range(0.0..PI),
        };
        let clear = out.iter().all(|o| {
            let d = ((o.cx - e.cx).powi(2) + (o.cy - e.cy).powi(2)).sqrt();
            d > o.rx.max(o.ry) + e.rx.max(e.ry)
        });
        if cfg.overlap_allowed || clear {
            out.push(e);
        }
    }
    Ok(out)
}

/// Pixel-center membership rasterization of the union of `ellipses`.
pub fn rasterize(ellipses: &[Ellipse], height: usize, width: usize) -> Vec<u8> {
    let mut mask = vec![0u8; height * width];
    for e in ellipses {
        for y in 0..height {
            for x in 0..width {
                if e.contains(x as f64, y as f64) {
                    mask[y * width + x] = 1;
                }
            }
        }
    }
    mask
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period.max(1));
    (if m >= n { period - 1 - m } else { m }) as usize
}

/// Separable Gaussian blur of each `height x width` plane, reflecting at the
/// borders. `sigma == 0` is the identity.
pub fn gaussian_blur(data: &mut [f64], height: usize, width: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let k = gaussian_kernel(sigma);
    let radius = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; height * width];
    for plane in data.chunks_mut(height * width) {
        for y in 0..height {
            for x in 0..width {
                tmp[y * width + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| {
                        kv * plane[y * width + reflect(x as isize + j as isize - radius, width)]
                    })
                    .sum();
            }
        }
        for y in 0..height {
            for x in 0..width {
                plane[y * width + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| {
                        kv * tmp[reflect(y as isize + j as isize - radius, height) * width + x]
                    })
                    .sum();
            }
        }
    }
}

/// Generates sample `sample_id` of the dataset described by `cfg`.
pub fn gen_sample(cfg: &SyntheticConfig, sample_id: usize) -> Result<Sample> {
    let mut r = rng::stream(cfg.seed, sample_id as u64);
    let domain_id = sample_id % cfg.domains.len();
    let domain = &cfg.domains[domain_id];
    let (tint, count) = tint_and_count(cfg, domain_id, &mut r);
    let ellipses = place_ellipses(cfg, count, &mut r)?;
    let s = cfg.image_size;
    let plane = s * s;
    let mask = rasterize(&ellipses, s, s);

    let background = lerp3(BACKGROUND_LOW, BACKGROUND_HIGH, tint);
    let nucleus = lerp3(NUCLEUS_LOW, NUCLEUS_HIGH, tint);
    let shade: Vec<f64> = ellipses.iter().map(|_| r.random_range(0.9..1.1)).collect();
    let mut image = vec![0.0; 3 * plane];
    for c in 0..3 {
        image[c * plane..(c + 1) * plane].fill(background[c]);
    }
    for (e, shade) in ellipses.iter().zip(&shade) {
        for y in 0..s {
            for x in 0..s {
                if e.contains(x as f64, y as f64) {
                    for c in 0..3 {
                        image[c * plane + y * s + x] = nucleus[c] * shade;
                    }
                }
            }
        }
    }
    gaussian_blur(&mut image, s, s, cfg.blur_sigma);
    let noise = Normal::new(0.0, domain.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    for c in 0..3 {
        for v in &mut image[c * plane..(c + 1) * plane] {
            let n = if domain.noise_sigma > 0.0 {
                noise.sample(&mut r)
            } else {
                0.0
            };
            *v = (*v * domain.tint[c] + n).clamp(0.0, 1.0);
        }
    }
    Ok(Sample {
        image: Tensor::new(&[3, s, s], image)?,
        mask: MaskMap::new([1, s, s], mask)?,
        domain_id,
        sample_id,
        meta: Some(SampleMeta { ellipses, tint }),
    })
}

pub fn gen_dataset(cfg: &SyntheticConfig, count: usize) -> Result<Vec<Sample>> {
    cfg.validate()?;
    if count == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    (0..count).map(|i| gen_sample(cfg, i)).collect()
}

/// Pearson correlation of two equally long series (0 when either is constant).
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum AugmentOp {
    HorizontalFlip,
    /// Counter-clockwise rotation by `quarter_turns * 90` degrees.
    Rotate {
        quarter_turns: u8,
    },
    GaussianBlur {
        sigma: f64,
    },
    /// Per-channel multiplicative jitter drawn uniformly from `[low, high]`.
    Intensity {
        low: f64,
        high: f64,
    },
    /// Crop of `size x size` at a seeded offset.
    RandomCrop {
        size: usize,
    },
    /// Reflect-pad by `pad` and crop back to the original extents at a
    /// seeded offset (a translation that keeps the image size fixed).
    PadCrop {
        pad: usize,
    },
}

fn map_planes<T: Copy + Default>(
    data: &[T],
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
    src: impl Fn(usize, usize) -> (usize, usize),
) -> Vec<T> {
    let planes = data.len() / (h * w);
    let mut out = vec![T::default(); planes * out_h * out_w];
    for p in 0..planes {
        for y in 0..out_h {
            for x in 0..out_w {
                let (sy, sx) = src(y, x);
                out[(p * out_h + y) * out_w + x] = data[(p * h + sy) * w + sx];
            }
        }
    }
    out
}

/// Applies a geometric remap to image and mask alike.
fn remap(
    s: &Sample,
    out_h: usize,
    out_w: usize,
    src: impl Fn(usize, usize) -> (usize, usize),
) -> Result<Sample> {
    let (h, w) = (s.height(), s.width());
    let image = map_planes(s.image.data(), h, w, out_h, out_w, &src);
    let mask = map_planes(s.mask.labels(), h, w, out_h, out_w, &src);
    Ok(Sample {
        image: Tensor::new(&[3, out_h, out_w], image)?,
        mask: MaskMap::new([1, out_h, out_w], mask)?,
        meta: None,
        ..s.clone()
    })
}

pub fn augment(s: &Sample, ops: &[AugmentOp], seed: u64) -> Result<Sample> {
    let mut r = rng::rng(seed);
    let mut out = s.clone();
    for op in ops {
        let (h, w) = (out.height(), out.width());
        out = match *op {
            AugmentOp::HorizontalFlip => remap(&out, h, w, |y, x| (y, w - 1 - x))?,
            AugmentOp::Rotate { quarter_turns } => match quarter_turns % 4 {
                0 => out,
                1 => remap(&out, w, h, |y, x| (x, w - 1 - y))?,
                2 => remap(&out, h, w, |y, x| (h - 1 - y, w - 1 - x))?,
                _ => remap(&out, w, h, |y, x| (h - 1 - x, y))?,
            },
            AugmentOp::GaussianBlur { sigma } => {
                let mut data = out.image.into_data();
                gaussian_blur(&mut data, h, w, sigma);
                Sample {
                    image: Tensor::new(&[3, h, w], data)?,
                    meta: None,
                    ..out
                }
            }
            AugmentOp::Intensity { low, high } => {
                if !(0.0 < low && low <= high) {
                    return Err(Error::Config(format!(
                        "invalid intensity range [{low}, {high}]"
                    )));
                }
                let factors: [f64; 3] = std::array::from_fn(|_| r.random_range(low..=high));
                let plane = h * w;
                let data = out
                    .image
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| (v * factors[i / plane]).clamp(0.0, 1.0))
                    .collect();
                Sample {
                    image: Tensor::new(&[3, h, w], data)?,
                    ..out
                }
            }
            AugmentOp::RandomCrop { size } => {
                if size == 0 || size > h || size > w {
                    return Err(Error::shape(
                        "random_crop",
                        &[h, w],
                        format!("crop size {size}"),
                    ));
                }
                let top = r.random_range(0..=h - size);
                let left = r.random_range(0..=w - size);
                remap(&out, size, size, |y, x| (y + top, x + left))?
            }
            AugmentOp::PadCrop { pad } => {
                if pad >= h || pad >= w {
                    return Err(Error::shape("pad_crop", &[h, w], format!("padding {pad}")));
                }
                let dy = r.random_range(0..=2 * pad) as isize - pad as isize;
                let dx = r.random_range(0..=2 * pad) as isize - pad as isize;
                remap(&out, h, w, |y, x| {
                    (reflect(y as isize + dy, h), reflect(x as isize + dx, w))
                })?
            }
        };
    }
    Ok(out)
}

/// Random training-time augmentation policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub flip_prob: f64,
    pub rotate: bool,
    pub blur_prob: f64,
    pub blur_sigma: [f64; 2],
    pub intensity: [f64; 2],
    pub crop_pad: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            flip_prob: 0.5,
            rotate: true,
            blur_prob: 0.2,
            blur_sigma: [0.5, 1.0],
            intensity: [0.8, 1.2],
            crop_pad: 4,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    /// Draws the op list for one sample.
    pub fn sample_ops(&self, r: &mut Rng) -> Vec<AugmentOp> {
        if !self.enabled {
            return Vec::new();
        }
        let mut ops = Vec::new();
        if r.random::<f64>() < self.flip_prob {
            ops.push(AugmentOp::HorizontalFlip);
        }
        if self.rotate {
            ops.push(AugmentOp::Rotate {
                quarter_turns: r.random_range(0..4),
            });
        }
        if r.random::<f64>() < self.blur_prob {
            ops.push(AugmentOp::GaussianBlur {
                sigma: r.random_range(self.blur_sigma[0]..=self.blur_sigma[1]),
            });
        }
        ops.push(AugmentOp::Intensity {
            low: self.intensity[0],
            high: self.intensity[1],
        });
        if self.crop_pad > 0 {
            ops.push(AugmentOp::PadCrop { pad: self.crop_pad });
        }
        ops
    }
}

/// Sample indices of the train, validation and test partitions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle split by `fractions` (train, val, test). With a held-out
/// domain, the test partition is exactly that domain's samples and the
/// rest is divided between train and validation in the ratio of the first
/// two fractions.
pub fn split(
    dataset: &[Sample],
    fractions: [f64; 3],
    seed: u64,
    heldout: Option<usize>,
) -> Result<Split> {
    if fractions.iter().any(|f| f.is_nan() || *f < 0.0)
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must be non-negative and sum to 1"
        )));
    }
    let mut r = rng::rng(seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut r);
    match heldout {
        None => {
            let n = order.len() as f64;
            let n_train = (fractions[0] * n).round() as usize;
            let n_val = ((fractions[1] * n).round() as usize).min(order.len() - n_train);
            let test = order.split_off(n_train + n_val);
            let val = order.split_off(n_train);
            Ok(Split {
                train: order,
                val,
                test,
            })
        }
        Some(domain) => {
            let (test, mut rest): (Vec<usize>, Vec<usize>) = order
                .into_iter()
                .partition(|&i| dataset[i].domain_id == domain);
            let share = fractions[0] / (fractions[0] + fractions[1]);
            let n_train = (share * rest.len() as f64).round() as usize;
            let val = rest.split_off(n_train);
            Ok(Split {
                train: rest,
                val,
                test,
            })
        }
    }
}

fn format_err(kind: &'static str, path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        kind,
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp"));
    let result = fs::File::create(&tmp)
        .and_then(|mut f| {
            f.write_all(bytes)?;
            f.sync_all()
        })
        .and_then(|()| fs::rename(&tmp, path));
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(|e| Error::io(path, e))
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let [c, h, w] = <[usize; 3]>::try_from(image.shape())
        .map_err(|_| Error::shape("ppm", image.shape(), "expected 3 x H x W"))?;
    if c != 3 {
        return Err(Error::shape("ppm", image.shape(), "expected 3 channels"));
    }
    let plane = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for p in 0..plane {
        out.extend((0..3).map(|ch| to_byte(image.data()[ch * plane + p])));
    }
    Ok(out)
}

pub fn encode_pgm(mask: &MaskMap) -> Vec<u8> {
    let [_, h, w] = mask.shape();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(mask.labels().iter().map(|&l| if l == 1 { 255 } else { 0 }));
    out
}

/// Header fields (magic, width, height, maxval) and the payload offset.
fn parse_header<'a>(
    bytes: &'a [u8],
    path: &Path,
    kind: &'static str,
) -> Result<(&'a [u8], usize, usize)> {
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(format_err(kind, path, "truncated header"));
        }
        fields.push(
            std::str::from_utf8(&bytes[start..i])
                .map_err(|_| format_err(kind, path, "non-ASCII header"))?,
        );
    }
    let magic = if kind == "ppm" { "P6" } else { "P5" };
    if fields[0] != magic {
        return Err(format_err(
            kind,
            path,
            format!("expected magic {magic}, found {}", fields[0]),
        ));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| format_err(kind, path, format!("bad header field `{s}`")))
    };
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 || w == 0 || h == 0 {
        return Err(format_err(
            kind,
            path,
            "expected maxval 255 and positive extents",
        ));
    }
    Ok((&bytes[i + 1..], w, h))
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let (payload, w, h) = parse_header(bytes, path, "ppm")?;
    let plane = w * h;
    if payload.len() < 3 * plane {
        return Err(format_err("ppm", path, "truncated pixel data"));
    }
    let mut data = vec![0.0; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            data[c * plane + p] = f64::from(payload[p * 3 + c]) / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<MaskMap> {
    let (payload, w, h) = parse_header(bytes, path, "pgm")?;
    if payload.len() < w * h {
        return Err(format_err("pgm", path, "truncated pixel data"));
    }
    let labels = payload[..w * h]
        .iter()
        .map(|&v| match v {
            0 => Ok(0),
            255 => Ok(1),
            _ => Err(format_err(
                "pgm",
                path,
                format!("mask value {v} is neither 0 nor 255"),
            )),
        })
        .collect::<Result<_>>()?;
    MaskMap::new([1, h, w], labels)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub sample_id: usize,
    pub domain_id: usize,
    pub image_path: String,
    pub mask_path: String,
}

pub const MANIFEST: &str = "manifest.jsonl";

/// Writes every sample as `images/NNNNN.ppm` and `masks/NNNNN.pgm` under
/// `dir`, then the manifest (last, so a partial run has no manifest).
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    for sub in ["images", "masks"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let mut manifest = String::new();
    for s in samples {
        let entry = ManifestEntry {
            sample_id: s.sample_id,
            domain_id: s.domain_id,
            image_path: format!("images/{:05}.ppm", s.sample_id),
            mask_path: format!("masks/{:05}.pgm", s.sample_id),
        };
        write_atomic(&dir.join(&entry.image_path), &encode_ppm(&s.image)?)?;
        write_atomic(&dir.join(&entry.mask_path), &encode_pgm(&s.mask))?;
        manifest.push_str(&serde_json::to_string(&entry)?);
        manifest.push('\n');
    }
    write_atomic(&dir.join(MANIFEST), manifest.as_bytes())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST);
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut entries = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if !line.trim().is_empty() {
            entries.push(serde_json::from_str(&line)?);
        }
    }
    Ok(entries)
}

/// Loads every sample listed in `dir`'s manifest.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    read_manifest(dir)?
        .into_iter()
        .map(|e| {
            let image_path: PathBuf = dir.join(&e.image_path);
            let mask_path: PathBuf = dir.join(&e.mask_path);
            let image = decode_ppm(&read_file(&image_path)?, &image_path)?;
            let mask = decode_pgm(&read_file(&mask_path)?, &mask_path)?;
            if image.shape()[1..] != mask.shape()[1..] {
                return Err(format_err(
                    "pgm",
                    &mask_path,
                    "mask extents differ from the image",
                ));
            }
            Ok(Sample {
                image,
                mask,
                domain_id: e.domain_id,
                sample_id: e.sample_id,
                meta: None,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain_config() -> SyntheticConfig {
        SyntheticConfig {
            image_size: 32,
            nuclei_count_range: [3, 3],
            radius_range: [2.0, 4.0],
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn generator_contract() {
        let cfg = plain_config();
        let data = gen_dataset(&cfg, 6).unwrap();
        for s in &data {
            assert_eq!(s.meta.as_ref().unwrap().ellipses.len(), 3);
            assert!(s.mask.labels().contains(&1));
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(s.domain_id, s.sample_id % 3);
        }
        assert_eq!(data, gen_dataset(&cfg, 6).unwrap());
        assert!(gen_dataset(&cfg, 0).is_err());
    }

    #[test]
    fn oversized_radius_is_rejected() {
        let cfg = SyntheticConfig {
            radius_range: [2.0, 16.0],
            ..plain_config()
        };
        assert!(matches!(gen_dataset(&cfg, 1), Err(Error::Config(_))));
    }

    #[test]
    fn centered_disk_rasterization() {
        let disk = Ellipse {
            cx: 8.0,
            cy: 8.0,
            rx: 5.0,
            ry: 5.0,
            angle: 0.3,
        };
        let mask = rasterize(&[disk], 17, 17);
        for y in 0..17 {
            for x in 0..17 {
                let inside = ((x as f64 - 8.0).powi(2) + (y as f64 - 8.0).powi(2)).sqrt() <= 5.0;
                assert_eq!(mask[y * 17 + x] == 1, inside, "({x}, {y})");
            }
        }
    }

    #[test]
    fn unblurred_noiseless_mask_matches_image() {
        let cfg = SyntheticConfig {
            blur_sigma: 0.0,
            domains: vec![DomainSpec {
                tint: [1.0; 3],
                noise_sigma: 0.0,
            }],
            ..plain_config()
        };
        let s = gen_sample(&cfg, 0).unwrap();
        let plane = 32 * 32;
        let e = &s.meta.as_ref().unwrap().ellipses;
        assert_eq!(s.mask.labels(), rasterize(e, 32, 32).as_slice());
        for (p, &l) in s.mask.labels().iter().enumerate() {
            let dark = s.image.data()[p] < 0.6;
            assert_eq!(dark, l == 1);
        }
        assert_eq!(s.image.numel(), 3 * plane);
    }

    #[test]
    fn planted_correlation_strength() {
        let base = SyntheticConfig {
            image_size: 24,
            nuclei_count_range: [1, 9],
            radius_range: [1.5, 3.0],
            domains: vec![DomainSpec {
                tint: [1.0; 3],
                noise_sigma: 0.0,
            }],
            ..SyntheticConfig::default()
        };
        let corr = |strength: f64| {
            let cfg = SyntheticConfig {
                spurious: Some(SpuriousConfig {
                    confound: Confound::TintDensity,
                    strength,
                }),
                ..base.clone()
            };
            let data = gen_dataset(&cfg, 500).unwrap();
            let tint: Vec<f64> = data.iter().map(|s| s.meta.as_ref().unwrap().tint).collect();
            let count: Vec<f64> = data
                .iter()
                .map(|s| s.meta.as_ref().unwrap().ellipses.len() as f64)
                .collect();
            correlation(&tint, &count)
        };
        assert!(corr(0.0).abs() < 0.1);
        assert!(corr(1.0) > 0.8);
    }

    #[test]
    fn heldout_domain_is_anticorrelated() {
        let cfg = SyntheticConfig {
            image_size: 24,
            nuclei_count_range: [1, 9],
            radius_range: [1.5, 3.0],
            spurious: Some(SpuriousConfig {
                confound: Confound::TintDensity,
                strength: 1.0,
            }),
            ..SyntheticConfig::default()
        };
        assert_eq!(cfg.heldout_domain(), Some(2));
        let data = gen_dataset(&cfg, 300).unwrap();
        let held: Vec<&Sample> = data.iter().filter(|s| s.domain_id == 2).collect();
        let tint: Vec<f64> = held.iter().map(|s| s.meta.as_ref().unwrap().tint).collect();
        let count: Vec<f64> = held
            .iter()
            .map(|s| s.meta.as_ref().unwrap().ellipses.len() as f64)
            .collect();
        assert!(correlation(&tint, &count) < -0.8);
    }

    fn sample() -> Sample {
        gen_sample(&plain_config(), 1).unwrap()
    }

    #[test]
    fn geometric_augmentations() {
        let s = sample();
        let flip = [AugmentOp::HorizontalFlip, AugmentOp::HorizontalFlip];
        let twice = augment(&s, &flip, 0).unwrap();
        assert_eq!(
            (twice.image.data(), twice.mask.labels()),
            (s.image.data(), s.mask.labels())
        );
        let zero = augment(&s, &[AugmentOp::Rotate { quarter_turns: 0 }], 0).unwrap();
        assert_eq!(zero.image, s.image);
        let full = augment(&s, &[AugmentOp::Rotate { quarter_turns: 1 }; 4], 0).unwrap();
        assert_eq!(
            (full.image.data(), full.mask.labels()),
            (s.image.data(), s.mask.labels())
        );
        let crop = augment(&s, &[AugmentOp::RandomCrop { size: 16 }], 5).unwrap();
        assert_eq!(crop.image.shape(), &[3, 16, 16]);
        assert_eq!(crop.mask.shape(), [1, 16, 16]);
        assert!(augment(&s, &[AugmentOp::RandomCrop { size: 40 }], 5).is_err());
    }

    #[test]
    fn crop_offsets_match_between_image_and_mask() {
        // Encode each pixel's mask label into the image so a mismatch shows.
        let mut s = sample();
        let plane = 32 * 32;
        let labels = s.mask.labels().to_vec();
        for (p, &l) in labels.iter().enumerate() {
            s.image.data_mut()[p] = f64::from(l);
        }
        for seed in 0..10 {
            for ops in [
                vec![AugmentOp::RandomCrop { size: 20 }],
                vec![AugmentOp::PadCrop { pad: 4 }],
            ] {
                let a = augment(&s, &ops, seed).unwrap();
                let n = a.mask.labels().len();
                let first: Vec<u8> = a.image.data()[..n].iter().map(|&v| v as u8).collect();
                assert_eq!(first, a.mask.labels());
            }
        }
        assert_eq!(s.image.numel(), 3 * plane);
    }

    #[test]
    fn augmentation_commutes_with_rasterization() {
        let e = Ellipse {
            cx: 10.0,
            cy: 6.0,
            rx: 4.0,
            ry: 2.0,
            angle: 0.4,
        };
        let mask = MaskMap::new([1, 20, 20], rasterize(&[e], 20, 20)).unwrap();
        let s = Sample {
            image: Tensor::zeros(&[3, 20, 20]),
            mask,
            domain_id: 0,
            sample_id: 0,
            meta: None,
        };
        let flipped = augment(&s, &[AugmentOp::HorizontalFlip], 0).unwrap();
        let mirrored = Ellipse {
            cx: 19.0 - e.cx,
            angle: PI - e.angle,
            ..e
        };
        assert_eq!(
            flipped.mask.labels(),
            rasterize(&[mirrored], 20, 20).as_slice()
        );
        // One counter-clockwise quarter turn maps (x, y) to (y, W - 1 - x).
        let turned = augment(&s, &[AugmentOp::Rotate { quarter_turns: 1 }], 0).unwrap();
        let rotated = Ellipse {
            cx: e.cy,
            cy: 19.0 - e.cx,
            angle: e.angle - PI / 2.0,
            ..e
        };
        assert_eq!(
            turned.mask.labels(),
            rasterize(&[rotated], 20, 20).as_slice()
        );
    }

    #[test]
    fn photometric_ops_leave_mask_alone() {
        let s = sample();
        let ops = [
            AugmentOp::GaussianBlur { sigma: 1.0 },
            AugmentOp::Intensity {
                low: 0.8,
                high: 1.2,
            },
        ];
        let a = augment(&s, &ops, 3).unwrap();
        assert_eq!(a.mask, s.mask);
        assert_ne!(a.image, s.image);
        assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a, augment(&s, &ops, 3).unwrap());
    }

    #[test]
    fn split_partitions() {
        let data = gen_dataset(&plain_config(), 16).unwrap();
        let sp = split(&data, [0.5, 0.25, 0.25], 7, None).unwrap();
        assert_eq!((sp.train.len(), sp.val.len(), sp.test.len()), (8, 4, 4));
        let mut all: Vec<usize> = sp
            .train
            .iter()
            .chain(&sp.val)
            .chain(&sp.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..16).collect::<Vec<_>>());
        assert_eq!(sp, split(&data, [0.5, 0.25, 0.25], 7, None).unwrap());
        assert!(split(&data, [0.5, 0.25, 0.3], 7, None).is_err());

        let held = split(&data, [0.6, 0.2, 0.2], 7, Some(2)).unwrap();
        assert!(held.test.iter().all(|&i| data[i].domain_id == 2));
        assert!(held
            .train
            .iter()
            .chain(&held.val)
            .all(|&i| data[i].domain_id != 2));
        assert_eq!(held.train.len() + held.val.len() + held.test.len(), 16);
    }

    #[test]
    fn image_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = gen_dataset(&plain_config(), 3).unwrap();
        write_dataset(dir.path(), &data).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), 3);
        for (a, b) in data.iter().zip(&loaded) {
            assert_eq!(a.mask, b.mask);
            assert_eq!(a.domain_id, b.domain_id);
            for (x, y) in a.image.data().iter().zip(b.image.data()) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
        let bad = dir.path().join("bad.pgm");
        assert!(decode_pgm(b"P5\n2 1\n255\n\x00\x07", &bad).is_err());
        assert!(decode_ppm(b"P5\n1 1\n255\n\x00", &bad).is_err());
    }
}
