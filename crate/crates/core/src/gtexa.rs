//! Global texture alignment.
//!
//! Source images are bilaterally filtered with parameters picked by grid search
//! so that their corpus-summed Laplacian histogram is closest, in KL
//! divergence, to the reference corpus.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::colorspace::{Histogram, HISTOGRAM_BINS};
use crate::error::{Error, Result};
use crate::imgio::ImageRgb;
use crate::scalar::Scalar;

/// Per-bin additive smoothing applied before taking logs.
pub const KL_EPSILON: f64 = 1e-8;

/// Laplacian responses are clamped to `[-LAPLACIAN_RANGE, LAPLACIAN_RANGE]`.
pub const LAPLACIAN_RANGE: f64 = 255.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BilateralParams {
    /// Window diameter in pixels (odd).
    pub d: usize,
    /// Range sigma on the 0–255 intensity scale.
    pub sigma_c: f64,
    /// Spatial sigma in pixels.
    pub sigma_s: f64,
}

impl Default for BilateralParams {
    fn default() -> Self {
        BilateralParams {
            d: 5,
            sigma_c: 75.0,
            sigma_s: 25.0,
        }
    }
}

impl BilateralParams {
    /// A 1-pixel window: the filter returns its input unchanged.
    pub fn identity() -> Self {
        BilateralParams {
            d: 1,
            sigma_c: 1e-6,
            sigma_s: 1.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.d == 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!("bilateral d must be odd, got {}", self.d)));
        }
        if !(self.sigma_c > 0.0 && self.sigma_s > 0.0) {
            return Err(Error::InvalidConfig("bilateral sigmas must be positive".into()));
        }
        Ok(())
    }

    fn sort_key(&self) -> (usize, f64, f64) {
        (self.d, self.sigma_s, self.sigma_c)
    }
}

/// `d ∈ {3,5,7} × σ_c ∈ {10,25,50,75,100} × σ_s ∈ {10,25,50}` plus identity.
pub fn default_grid() -> Vec<BilateralParams> {
    let mut grid = vec![BilateralParams::identity()];
    for d in [3, 5, 7] {
        for sigma_c in [10.0, 25.0, 50.0, 75.0, 100.0] {
            for sigma_s in [10.0, 25.0, 50.0] {
                grid.push(BilateralParams { d, sigma_c, sigma_s });
            }
        }
    }
    grid
}

/// Reflect-101 border index (`dcb|abcd|cba`).
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut i = i.rem_euclid(period);
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}

/// Bilateral filter with a shared range weight on grey-level differences.
///
/// Every channel is averaged with weights
/// `exp(-|Δp|²/2σ_s²) · exp(-ΔI²/2σ_c²)` where `ΔI` is the luma difference on
/// the 0–255 scale; borders are reflected.
pub fn bilateral_filter<T: Scalar>(img: &ImageRgb<T>, p: &BilateralParams) -> Result<ImageRgb<T>> {
    p.validate()?;
    if p.is_identity() {
        return Ok(img.clone());
    }
    let (h, w) = (img.height(), img.width());
    let r = (p.d / 2) as isize;
    let gray: Vec<T> = img
        .to_gray()
        .data
        .into_iter()
        .map(|v| v * T::lit(255.0))
        .collect();
    let spatial: Vec<(isize, isize, T)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .map(|(dy, dx)| {
            let d2 = (dy * dy + dx * dx) as f64;
            (dy, dx, T::lit((-d2 / (2.0 * p.sigma_s * p.sigma_s)).exp()))
        })
        .collect();
    let range_coef = T::lit(-1.0 / (2.0 * p.sigma_c * p.sigma_c));
    let pixels = img.pixels();
    let out: Vec<[T; 3]> = (0..h)
        .into_par_iter()
        .flat_map_iter(|y| {
            let spatial = &spatial;
            let gray = &gray;
            (0..w).map(move |x| {
                let center = gray[y * w + x];
                let mut acc = [T::zero(); 3];
                let mut norm = T::zero();
                for &(dy, dx, ws) in spatial {
                    let yy = reflect(y as isize + dy, h);
                    let xx = reflect(x as isize + dx, w);
                    let diff = gray[yy * w + xx] - center;
                    let wt = ws * (range_coef * diff * diff).exp();
                    let q = pixels[yy * w + xx];
                    for c in 0..3 {
                        acc[c] += wt * q[c];
                    }
                    norm += wt;
                }
                // the center term has weight 1, so norm ≥ 1
                acc.map(|v| v / norm)
            })
        })
        .collect();
    ImageRgb::from_clamped(h, w, out)
}

/// Bin of a Laplacian response on `[-255, 255]` split into 256 equal bins.
#[inline]
pub fn laplacian_bin(response: f64) -> usize {
    let r = response.clamp(-LAPLACIAN_RANGE, LAPLACIAN_RANGE);
    let x = ((r + LAPLACIAN_RANGE) / (2.0 * LAPLACIAN_RANGE) * HISTOGRAM_BINS as f64).floor();
    (x as usize).min(HISTOGRAM_BINS - 1)
}

/// Histogram of 4-neighbour Laplacian responses of the luma image (0–255
/// scale) over interior pixels.
pub fn highfreq_histogram<T: Scalar>(img: &ImageRgb<T>) -> Result<Histogram> {
    let (h, w) = (img.height(), img.width());
    if h < 3 || w < 3 {
        return Err(Error::ImageTooSmall { height: h, width: w });
    }
    let g: Vec<f64> = img
        .to_gray()
        .data
        .iter()
        .map(|v| v.to_f64_lossy() * 255.0)
        .collect();
    let mut hist = Histogram::empty();
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let i = y * w + x;
            let lap = g[i - w] + g[i + w] + g[i - 1] + g[i + 1] - 4.0 * g[i];
            // rounding noise from the luma weights must not leave the zero bin
            let lap = if lap.abs() < 1e-9 { 0.0 } else { lap };
            hist.add_sample(laplacian_bin(lap));
        }
    }
    Ok(hist)
}

fn smoothed(h: &Histogram) -> Vec<f64> {
    let norm = 1.0 + KL_EPSILON * HISTOGRAM_BINS as f64;
    h.counts()
        .iter()
        .map(|c| (c / h.total() + KL_EPSILON) / norm)
        .collect()
}

/// `KL(p ‖ q)` between ε-smoothed, renormalized histograms.
pub fn kl_divergence(p: &Histogram, q: &Histogram) -> Result<f64> {
    if !(p.total() > 0.0 && q.total() > 0.0) {
        return Err(Error::DegenerateData("KL of an empty histogram".into()));
    }
    let (ps, qs) = (smoothed(p), smoothed(q));
    let kl = ps
        .iter()
        .zip(&qs)
        .map(|(&a, &b)| if a == b { 0.0 } else { a * (a / b).ln() })
        .sum::<f64>();
    Ok(kl.max(0.0))
}

/// Sum of per-image high-frequency histograms.
pub fn corpus_highfreq_histogram<T: Scalar>(imgs: &[ImageRgb<T>]) -> Result<Histogram> {
    let hists = imgs
        .par_iter()
        .map(highfreq_histogram)
        .collect::<Result<Vec<_>>>()?;
    let mut total = Histogram::empty();
    for h in &hists {
        total.merge(h);
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub params: BilateralParams,
    pub kl: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureAlignReport {
    pub params: BilateralParams,
    /// KL with unfiltered sources.
    pub kl_before: f64,
    /// KL at the selected parameters.
    pub kl_after: f64,
    pub grid_evaluated: usize,
    pub table: Vec<GridEntry>,
}

/// Grid search for the bilateral parameters minimizing
/// `KL(Σ_s h(H^s), Σ_u h(H^u))`.
///
/// Ties go to the lexicographically smallest `(d, σ_s, σ_c)`.
pub fn optimize_filter_params<T: Scalar>(
    src_imgs: &[ImageRgb<T>],
    ref_imgs: &[ImageRgb<T>],
    grid: &[BilateralParams],
) -> Result<TextureAlignReport> {
    if src_imgs.is_empty() || ref_imgs.is_empty() {
        return Err(Error::EmptyDataset("texture optimization needs images on both sides".into()));
    }
    if grid.is_empty() {
        return Err(Error::InvalidConfig("empty parameter grid".into()));
    }
    for p in grid {
        p.validate()?;
    }
    let reference = corpus_highfreq_histogram(ref_imgs)?;
    let kl_before = kl_divergence(&corpus_highfreq_histogram(src_imgs)?, &reference)?;
    let table = grid
        .par_iter()
        .map(|p| {
            let kl = if p.is_identity() {
                kl_before
            } else {
                let filtered = src_imgs
                    .iter()
                    .map(|img| bilateral_filter(img, p))
                    .collect::<Result<Vec<_>>>()?;
                kl_divergence(&corpus_highfreq_histogram(&filtered)?, &reference)?
            };
            Ok(GridEntry { params: *p, kl })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = table
        .iter()
        .min_by(|a, b| {
            a.kl.total_cmp(&b.kl).then_with(|| {
                let (ka, kb) = (a.params.sort_key(), b.params.sort_key());
                ka.0.cmp(&kb.0)
                    .then(ka.1.total_cmp(&kb.1))
                    .then(ka.2.total_cmp(&kb.2))
            })
        })
        .expect("grid is nonempty");
    Ok(TextureAlignReport {
        params: best.params,
        kl_before,
        kl_after: best.kl,
        grid_evaluated: table.len(),
        table: table.clone(),
    })
}

/// Filters `img` with probability `prob`, consuming exactly one uniform draw.
/// Returns the image and whether it was filtered.
pub fn maybe_texture_align<T: Scalar, R: Rng + ?Sized>(
    img: &ImageRgb<T>,
    p: &BilateralParams,
    prob: f64,
    rng: &mut R,
) -> Result<(ImageRgb<T>, bool)> {
    if !(0.0..=1.0).contains(&prob) {
        return Err(Error::InvalidConfig(format!("probability {prob} outside [0,1]")));
    }
    let u: f64 = rng.random();
    if u < prob {
        Ok((bilateral_filter(img, p)?, true))
    } else {
        Ok((img.clone(), false))
    }
}

/// Deterministic subset of at most `cap` indices out of `n`, in ascending order.
pub fn subsample_indices<R: Rng + ?Sized>(n: usize, cap: usize, rng: &mut R) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    let mut idx = rand::seq::index::sample(rng, n, cap).into_vec();
    idx.sort_unstable();
    idx
}
