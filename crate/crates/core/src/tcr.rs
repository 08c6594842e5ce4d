//! Target-domain consistency regularization.
//!
//! Pseudo-labels come from the frozen previous-stage model on the clean target
//! image. Per-class thresholds `t_c = min(P_h, P_{s,c})` keep at least `p%` of
//! each class's pixels, and the prediction on a perturbed copy of the image is
//! pulled towards the valid pseudo-labels with a cross-entropy loss.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgio::{save_gray16_png, save_label_map, ImageRgb, LabelMap};
use crate::matrix::Matrix;
use crate::scalar::{clamp01, softmax_in_place, Scalar};

/// Per-pixel class distributions, pixel-major (`H·W × M_c`).
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap<T> {
    pub height: usize,
    pub width: usize,
    pub probs: Matrix<T>,
}

impl<T: Scalar> ProbabilityMap<T> {
    pub fn new(height: usize, width: usize, probs: Matrix<T>) -> Result<Self> {
        if probs.rows() != height * width || probs.cols() == 0 {
            return Err(Error::DimensionMismatch {
                expected: height * width,
                got: probs.rows(),
            });
        }
        let tol = T::lit(1e-6).max(T::epsilon() * T::lit(4.0 * probs.cols() as f64));
        for row in probs.iter_rows() {
            let s: T = row.iter().copied().sum();
            if row.iter().any(|&p| !(p >= T::zero())) || (s - T::one()).abs() > tol {
                return Err(Error::DegenerateData(format!("pixel distribution {row:?} is not normalized")));
            }
        }
        Ok(ProbabilityMap { height, width, probs })
    }

    /// Row-wise softmax of raw scores.
    pub fn from_logits(height: usize, width: usize, logits: &Matrix<T>) -> Result<Self> {
        let mut probs = logits.clone();
        for r in 0..probs.rows() {
            softmax_in_place(probs.row_mut(r));
        }
        Self::new(height, width, probs)
    }

    pub fn classes(&self) -> usize {
        self.probs.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelMap<T> {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
    /// Max class probability at each pixel.
    pub confidence: Vec<T>,
}

impl<T: Scalar> PseudoLabelMap<T> {
    pub fn label_map(&self) -> LabelMap {
        LabelMap {
            height: self.height,
            width: self.width,
            labels: self.labels.clone(),
        }
    }
}

/// Argmax label (lowest index on ties) and its probability.
pub fn pseudo_labels<T: Scalar>(pm: &ProbabilityMap<T>) -> PseudoLabelMap<T> {
    let (labels, confidence) = pm
        .probs
        .iter_rows()
        .map(|row| {
            let mut best = 0;
            for (c, &p) in row.iter().enumerate().skip(1) {
                if p > row[best] {
                    best = c;
                }
            }
            (best as u8, row[best])
        })
        .unzip();
    PseudoLabelMap {
        height: pm.height,
        width: pm.width,
        labels,
        confidence,
    }
}

/// Writes the labels as an 8-bit PNG and the confidences as a 16-bit PNG.
pub fn save_pseudo_labels<T: Scalar>(
    pl: &PseudoLabelMap<T>,
    label_path: impl AsRef<Path>,
    confidence_path: impl AsRef<Path>,
) -> Result<()> {
    save_label_map(&pl.label_map(), label_path)?;
    save_gray16_png(pl.height, pl.width, &pl.confidence, confidence_path)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdConfig {
    /// Global confidence cap `P_h`.
    pub p_h: f64,
    /// Percentage `p` of each class kept by the percentile rule.
    pub percent: f64,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        ThresholdConfig { p_h: 0.9, percent: 10.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct CategoryThresholds<T> {
    pub thresholds: Vec<T>,
    /// True where the percentile (not the cap) set the threshold.
    pub percentile_binds: Vec<bool>,
}

/// Per-class confidence thresholds.
///
/// `P_{s,c}` is the `k`-th largest confidence among class-`c` pixels with
/// `k = ⌈p·n_c/100⌉`, so at least `p%` of them reach it; `t_c = min(P_h, P_{s,c})`.
/// Classes without pixels get `P_h`.
pub fn category_thresholds<T: Scalar>(
    pl: &PseudoLabelMap<T>,
    cfg: &ThresholdConfig,
    class_count: usize,
) -> Result<CategoryThresholds<T>> {
    if !(0.0..=1.0).contains(&cfg.p_h) || !(cfg.percent > 0.0 && cfg.percent <= 100.0) {
        return Err(Error::InvalidConfig("thresholds need P_h in [0,1] and p in (0,100]".into()));
    }
    let mut per_class: Vec<Vec<T>> = vec![Vec::new(); class_count];
    for (&l, &c) in pl.labels.iter().zip(&pl.confidence) {
        let l = l as usize;
        if l >= class_count {
            return Err(Error::InvalidLabel { label: l as u8, class_count });
        }
        per_class[l].push(c);
    }
    let cap = T::lit(cfg.p_h);
    let mut thresholds = Vec::with_capacity(class_count);
    let mut binds = Vec::with_capacity(class_count);
    for mut confs in per_class {
        if confs.is_empty() {
            thresholds.push(cap);
            binds.push(false);
            continue;
        }
        confs.sort_by(|a, b| b.total_cmp(a));
        let n = confs.len();
        let k = ((cfg.percent * n as f64 / 100.0 - 1e-9).ceil() as usize).clamp(1, n);
        let ps = confs[k - 1];
        binds.push(ps <= cap);
        thresholds.push(ps.min(cap));
    }
    Ok(CategoryThresholds {
        thresholds,
        percentile_binds: binds,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JitterConfig {
    /// Multiplicative factors are drawn from `1 ± range`.
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElasticConfig {
    /// Control-point spacing in pixels.
    pub grid_spacing: usize,
    /// Std-dev of control-point displacements, in pixels.
    pub sigma: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbConfig {
    pub jitter: JitterConfig,
    /// Blur sigma drawn uniformly from this range.
    pub blur_sigma: (f64, f64),
    pub elastic: ElasticConfig,
    pub enable_jitter: bool,
    pub enable_elastic: bool,
    pub enable_blur: bool,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig {
            jitter: JitterConfig {
                brightness: 0.2,
                contrast: 0.2,
                saturation: 0.2,
            },
            blur_sigma: (0.0, 1.5),
            elastic: ElasticConfig {
                grid_spacing: 32,
                sigma: 4.0,
            },
            enable_jitter: true,
            enable_elastic: true,
            enable_blur: true,
        }
    }
}

impl PerturbConfig {
    /// Colour jitter only (the lighter perturbation).
    pub fn jitter_only() -> Self {
        PerturbConfig {
            enable_elastic: false,
            enable_blur: false,
            ..Default::default()
        }
    }

    pub fn disabled() -> Self {
        PerturbConfig {
            enable_jitter: false,
            enable_elastic: false,
            enable_blur: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let j = &self.jitter;
        let ranges = [j.brightness, j.contrast, j.saturation, self.blur_sigma.0, self.blur_sigma.1, self.elastic.sigma];
        if ranges.iter().any(|v| !(*v >= 0.0 && v.is_finite())) || self.blur_sigma.0 > self.blur_sigma.1 {
            return Err(Error::InvalidConfig("perturbation ranges must be finite and nonnegative".into()));
        }
        if self.enable_elastic && self.elastic.grid_spacing == 0 {
            return Err(Error::InvalidConfig("elastic grid spacing must be positive".into()));
        }
        Ok(())
    }
}

/// Dense backward displacement: output pixel `(y, x)` samples the input at
/// `(y + dy, x + dx)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisplacementField {
    pub height: usize,
    pub width: usize,
    pub dy: Vec<f64>,
    pub dx: Vec<f64>,
}

impl DisplacementField {
    pub fn zero(height: usize, width: usize) -> Self {
        DisplacementField {
            height,
            width,
            dy: vec![0.0; height * width],
            dx: vec![0.0; height * width],
        }
    }

    /// Source position for output pixel `(y, x)`, clamped inside the raster.
    #[inline]
    fn source(&self, y: usize, x: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (
            (y as f64 + self.dy[i]).clamp(0.0, (self.height - 1) as f64),
            (x as f64 + self.dx[i]).clamp(0.0, (self.width - 1) as f64),
        )
    }
}

#[derive(Clone, Debug)]
pub struct Perturbed<T> {
    pub image: ImageRgb<T>,
    /// Present when elastic deformation ran.
    pub warp: Option<DisplacementField>,
}

fn uniform_factor<R: Rng + ?Sized>(range: f64, rng: &mut R) -> f64 {
    1.0 + range * (2.0 * rng.random::<f64>() - 1.0)
}

fn color_jitter<R: Rng + ?Sized>(px: &mut [[f64; 3]], cfg: &JitterConfig, rng: &mut R) {
    let fb = uniform_factor(cfg.brightness, rng);
    let fc = uniform_factor(cfg.contrast, rng);
    let fs = uniform_factor(cfg.saturation, rng);
    let luma = |p: &[f64; 3]| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
    for p in px.iter_mut() {
        *p = p.map(|v| (v * fb).clamp(0.0, 1.0));
    }
    let mean = px.iter().map(luma).sum::<f64>() / px.len() as f64;
    for p in px.iter_mut() {
        *p = p.map(|v| ((v - mean) * fc + mean).clamp(0.0, 1.0));
    }
    for p in px.iter_mut() {
        let g = luma(p);
        *p = p.map(|v| (g + (v - g) * fs).clamp(0.0, 1.0));
    }
}

fn elastic_field<R: Rng + ?Sized>(h: usize, w: usize, cfg: &ElasticConfig, rng: &mut R) -> DisplacementField {
    let s = cfg.grid_spacing;
    let gh = (h - 1).div_ceil(s) + 1;
    let gw = (w - 1).div_ceil(s) + 1;
    let bound = s as f64;
    let mut draw = |n: usize| -> Vec<f64> {
        (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                (z * cfg.sigma).clamp(-bound, bound)
            })
            .collect()
    };
    let cy = draw(gh * gw);
    let cx = draw(gh * gw);
    let interp = |grid: &[f64], y: usize, x: usize| {
        let (fy, fx) = (y as f64 / s as f64, x as f64 / s as f64);
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(gh - 1), (x0 + 1).min(gw - 1));
        let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
        let g = |a: usize, b: usize| grid[a * gw + b];
        (1.0 - ty) * ((1.0 - tx) * g(y0, x0) + tx * g(y0, x1)) + ty * ((1.0 - tx) * g(y1, x0) + tx * g(y1, x1))
    };
    let mut field = DisplacementField::zero(h, w);
    for y in 0..h {
        for x in 0..w {
            field.dy[y * w + x] = interp(&cy, y, x);
            field.dx[y * w + x] = interp(&cx, y, x);
        }
    }
    field
}

fn bilinear(px: &[[f64; 3]], h: usize, w: usize, y: f64, x: f64) -> [f64; 3] {
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ty, tx) = (y - y0 as f64, x - x0 as f64);
    let g = |a: usize, b: usize| px[a * w + b];
    let (p00, p01, p10, p11) = (g(y0, x0), g(y0, x1), g(y1, x0), g(y1, x1));
    [0, 1, 2].map(|c| {
        (1.0 - ty) * ((1.0 - tx) * p00[c] + tx * p01[c]) + ty * ((1.0 - tx) * p10[c] + tx * p11[c])
    })
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let i = i.rem_euclid(period);
    (if i >= n as isize { period - i } else { i }) as usize
}

fn gaussian_blur(px: &[[f64; 3]], h: usize, w: usize, sigma: f64) -> Vec<[f64; 3]> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let mut tmp = vec![[0.0; 3]; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (j, kv) in k.iter().enumerate() {
                let xx = reflect(x as isize + j as isize - r, w);
                let p = px[y * w + xx];
                for c in 0..3 {
                    acc[c] += kv * p[c];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![[0.0; 3]; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (j, kv) in k.iter().enumerate() {
                let yy = reflect(y as isize + j as isize - r, h);
                let p = tmp[yy * w + x];
                for c in 0..3 {
                    acc[c] += kv * p[c];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Colour jitter → elastic deformation → Gaussian blur, each when enabled.
///
/// Draw order is fixed (3 jitter factors, then `2·G` control displacements,
/// then one blur sigma), so a seeded stream gives identical output everywhere.
pub fn perturb<T: Scalar, R: Rng + ?Sized>(
    img: &ImageRgb<T>,
    cfg: &PerturbConfig,
    rng: &mut R,
) -> Result<Perturbed<T>> {
    cfg.validate()?;
    let (h, w) = (img.height(), img.width());
    let mut px: Vec<[f64; 3]> = img.pixels().iter().map(|p| p.map(T::to_f64_lossy)).collect();
    if cfg.enable_jitter {
        color_jitter(&mut px, &cfg.jitter, &mut *rng);
    }
    let mut warp = None;
    if cfg.enable_elastic {
        let field = elastic_field(h, w, &cfg.elastic, &mut *rng);
        px = (0..h * w)
            .map(|i| {
                let (sy, sx) = field.source(i / w, i % w);
                bilinear(&px, h, w, sy, sx)
            })
            .collect();
        warp = Some(field);
    }
    if cfg.enable_blur {
        let (lo, hi) = cfg.blur_sigma;
        let sigma = lo + (hi - lo) * rng.random::<f64>();
        if sigma > 1e-3 {
            px = gaussian_blur(&px, h, w, sigma);
        }
    }
    let pixels = px.into_iter().map(|p| p.map(|v| clamp01(T::lit(v)))).collect();
    Ok(Perturbed {
        image: ImageRgb::new(h, w, pixels)?,
        warp,
    })
}

/// Carries labels and confidences through the same backward warp as the
/// image (nearest-neighbour sampling).
pub fn warp_pseudo_labels<T: Scalar>(pl: &PseudoLabelMap<T>, field: &DisplacementField) -> Result<PseudoLabelMap<T>> {
    if field.height != pl.height || field.width != pl.width {
        return Err(Error::WarpMismatch(format!(
            "field {}x{} vs labels {}x{}",
            field.height, field.width, pl.height, pl.width
        )));
    }
    let w = pl.width;
    let (labels, confidence) = (0..pl.height * w)
        .map(|i| {
            let (sy, sx) = field.source(i / w, i % w);
            let j = sy.round() as usize * w + sx.round() as usize;
            (pl.labels[j], pl.confidence[j])
        })
        .unzip();
    Ok(PseudoLabelMap {
        height: pl.height,
        width: pl.width,
        labels,
        confidence,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConsistencyLoss<T> {
    /// Sum of cross-entropies over valid pixels.
    pub loss: T,
    pub valid_count: usize,
}

fn aligned_labels<T: Scalar>(
    pl: &PseudoLabelMap<T>,
    thresholds: &CategoryThresholds<T>,
    height: usize,
    width: usize,
    warp: Option<&DisplacementField>,
) -> Result<PseudoLabelMap<T>> {
    if pl.height != height || pl.width != width {
        return Err(Error::WarpMismatch(format!(
            "prediction {height}x{width} vs pseudo-labels {}x{}",
            pl.height, pl.width
        )));
    }
    if let Some(&l) = pl.labels.iter().find(|&&l| l as usize >= thresholds.thresholds.len()) {
        return Err(Error::InvalidLabel {
            label: l,
            class_count: thresholds.thresholds.len(),
        });
    }
    match warp {
        Some(field) => warp_pseudo_labels(pl, field),
        None => Ok(pl.clone()),
    }
}

#[inline]
fn is_valid<T: Scalar>(pl: &PseudoLabelMap<T>, thresholds: &CategoryThresholds<T>, j: usize) -> bool {
    pl.confidence[j] >= thresholds.thresholds[pl.labels[j] as usize]
}

/// `Σ_j 1(conf_j ≥ t_{ŷ_j}) · CE(onehot(ŷ_j), P̃_j)`.
pub fn consistency_loss<T: Scalar>(
    pl: &PseudoLabelMap<T>,
    thresholds: &CategoryThresholds<T>,
    perturbed: &ProbabilityMap<T>,
    warp: Option<&DisplacementField>,
) -> Result<ConsistencyLoss<T>> {
    let pl = aligned_labels(pl, thresholds, perturbed.height, perturbed.width, warp)?;
    if perturbed.classes() < thresholds.thresholds.len() {
        return Err(Error::DimensionMismatch {
            expected: thresholds.thresholds.len(),
            got: perturbed.classes(),
        });
    }
    let mut loss = T::zero();
    let mut valid_count = 0;
    for (j, row) in perturbed.probs.iter_rows().enumerate() {
        if is_valid(&pl, thresholds, j) {
            loss -= row[pl.labels[j] as usize].max(T::min_positive_value()).ln();
            valid_count += 1;
        }
    }
    Ok(ConsistencyLoss { loss, valid_count })
}

/// Loss and gradient with respect to the perturbed logits:
/// `softmax − onehot` at valid pixels, zero elsewhere.
pub fn consistency_loss_grad<T: Scalar>(
    pl: &PseudoLabelMap<T>,
    thresholds: &CategoryThresholds<T>,
    perturbed_logits: &Matrix<T>,
    warp: Option<&DisplacementField>,
) -> Result<(ConsistencyLoss<T>, Matrix<T>)> {
    let probs = ProbabilityMap::from_logits(pl.height, pl.width, perturbed_logits)?;
    let value = consistency_loss(pl, thresholds, &probs, warp)?;
    let pl = aligned_labels(pl, thresholds, pl.height, pl.width, warp)?;
    let mut grad = Matrix::zeros(perturbed_logits.rows(), perturbed_logits.cols());
    for j in 0..grad.rows() {
        if is_valid(&pl, thresholds, j) {
            let g = grad.row_mut(j);
            g.copy_from_slice(probs.probs.row(j));
            g[pl.labels[j] as usize] -= T::one();
        }
    }
    Ok((value, grad))
}
