//! Global photometric alignment.
//!
//! Chroma channels are transferred with classic CDF histogram matching; the
//! lightness channel gets a power-law correction `L^γ` whose exponent pulls the
//! source mean lightness onto the reference mean:
//!
//! ```text
//! γ* = argmin_γ ( Σ_b L_b^γ p_s(b) − Σ_b L_b p_u(b) )² + β (γ − 1)²
//! ```
//!
//! with `p_s`, `p_u` the normalized lightness histograms and `L_b` bin centers.

use serde::{Deserialize, Serialize};

use crate::colorspace::{
    bin_center, bin_index, channel_histogram, lab_to_rgb, rgb_to_lab, Histogram, ImageLab,
    HISTOGRAM_BINS,
};
use crate::error::{Error, Result};
use crate::imgio::{Channel, ImageRgb};
use crate::scalar::{clamp01, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GammaSolveConfig {
    /// Pull of γ towards 1.
    pub beta: f64,
    pub max_iters: usize,
    /// Damping applied to each curvature-scaled descent step.
    pub step_size: f64,
    /// Converged once a step moves γ by less than this.
    pub tolerance: f64,
    pub gamma_bounds: (f64, f64),
}

impl Default for GammaSolveConfig {
    fn default() -> Self {
        GammaSolveConfig {
            beta: 0.01,
            max_iters: 200,
            step_size: 1.0,
            tolerance: 1e-10,
            gamma_bounds: (0.2, 5.0),
        }
    }
}

impl GammaSolveConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.gamma_bounds;
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_owned()));
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be finite and nonnegative");
        }
        if !(lo > 0.0 && lo < 1.0 && 1.0 < hi && hi.is_finite()) {
            return bad("gamma_bounds must satisfy 0 < low < 1 < high");
        }
        if !(self.tolerance > 0.0) || !(self.step_size > 0.0) || self.max_iters == 0 {
            return bad("tolerance, step_size and max_iters must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaResult {
    pub gamma: f64,
    pub objective: f64,
    pub iterations: usize,
    /// Objective after each accepted iterate, starting at γ = 1.
    #[serde(skip)]
    pub trace: Vec<f64>,
}

/// For each source bin, the reference bin it is sent to: the smallest bin whose
/// reference CDF reaches the source CDF.
pub fn histogram_mapping(src: &Histogram, reference: &Histogram) -> Vec<usize> {
    let cs = src.cdf();
    let cr = reference.cdf();
    let mut j = 0;
    (0..HISTOGRAM_BINS)
        .map(|b| {
            // both CDFs are nondecreasing, so the search pointer only moves forward
            while j + 1 < HISTOGRAM_BINS && cr[j] < cs[b] - 1e-12 {
                j += 1;
            }
            j
        })
        .collect()
}

/// Classic CDF histogram matching of a `[0, 1]` channel onto `ref_hist`.
///
/// Each value is replaced by the center of the reference bin selected by
/// [`histogram_mapping`]. A constant source channel is a single point mass and
/// maps to one reference bin.
pub fn match_histogram<T: Scalar>(src: &Channel<T>, ref_hist: &Histogram) -> Result<Channel<T>> {
    if !(ref_hist.total() > 0.0) {
        return Err(Error::DegenerateData("reference histogram is empty".into()));
    }
    if src.data.is_empty() {
        return Err(Error::DegenerateData("source channel is empty".into()));
    }
    let map = histogram_mapping(&channel_histogram(src), ref_hist);
    let lut: Vec<T> = map.iter().map(|&j| T::lit(bin_center(j))).collect();
    let data = src.data.iter().map(|&v| lut[bin_index(v)]).collect();
    Channel::new(src.height, src.width, data)
}

struct GammaObjective {
    /// (ln L_b, p_s(b)) over occupied source bins.
    terms: Vec<(f64, f64)>,
    target_mean: f64,
    beta: f64,
}

impl GammaObjective {
    fn new(src: &Histogram, reference: &Histogram, beta: f64) -> Self {
        let terms = src
            .probabilities()
            .into_iter()
            .enumerate()
            .filter(|(_, p)| *p > 0.0)
            .map(|(b, p)| (bin_center(b).ln(), p))
            .collect();
        GammaObjective {
            terms,
            target_mean: reference.mean_bin_center(),
            beta,
        }
    }

    /// Source mean after correction, and its derivative in γ.
    fn corrected_mean(&self, gamma: f64) -> (f64, f64) {
        self.terms.iter().fold((0.0, 0.0), |(g, dg), &(ln_l, p)| {
            let v = (gamma * ln_l).exp() * p;
            (g + v, dg + v * ln_l)
        })
    }

    fn value(&self, gamma: f64) -> f64 {
        let r = self.corrected_mean(gamma).0 - self.target_mean;
        r * r + self.beta * (gamma - 1.0) * (gamma - 1.0)
    }

    /// (objective, derivative, Gauss–Newton curvature)
    fn eval(&self, gamma: f64) -> (f64, f64, f64) {
        let (g, dg) = self.corrected_mean(gamma);
        let r = g - self.target_mean;
        let value = r * r + self.beta * (gamma - 1.0) * (gamma - 1.0);
        let grad = 2.0 * r * dg + 2.0 * self.beta * (gamma - 1.0);
        let curvature = 2.0 * (dg * dg + self.beta);
        (value, grad, curvature)
    }
}

/// Solves the regularized mean-lightness constraint for γ.
///
/// Curvature-scaled gradient descent from γ = 1 with backtracking, so the
/// objective never increases between iterates; falls back to golden-section
/// search over the bounds if descent stalls without converging.
pub fn solve_gamma(
    src_l_hist: &Histogram,
    ref_l_hist: &Histogram,
    cfg: &GammaSolveConfig,
) -> Result<GammaResult> {
    cfg.validate()?;
    if !(src_l_hist.total() > 0.0) || !(ref_l_hist.total() > 0.0) {
        return Err(Error::DegenerateData("empty lightness histogram".into()));
    }
    if src_l_hist.counts()[0] >= src_l_hist.total() {
        return Err(Error::DegenerateSource);
    }
    let obj = GammaObjective::new(src_l_hist, ref_l_hist, cfg.beta);
    let (lo, hi) = cfg.gamma_bounds;

    let mut gamma = 1.0;
    let (mut value, _, _) = obj.eval(gamma);
    let mut trace = vec![value];
    let mut last_step = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        let (_, grad, curvature) = obj.eval(gamma);
        let step = -cfg.step_size * grad / curvature.max(1e-300);
        if !step.is_finite() {
            break;
        }
        let mut scale = 1.0;
        let mut candidate = (gamma + step).clamp(lo, hi);
        let mut cand_value = obj.value(candidate);
        let mut halvings = 0;
        while cand_value > value && halvings < 60 {
            scale *= 0.5;
            candidate = (gamma + scale * step).clamp(lo, hi);
            cand_value = obj.value(candidate);
            halvings += 1;
        }
        last_step = (candidate - gamma).abs();
        if cand_value > value || last_step < cfg.tolerance {
            converged = last_step < cfg.tolerance || grad.abs() < 1e-14;
            if cand_value <= value {
                gamma = candidate;
                value = cand_value;
                trace.push(value);
            }
            break;
        }
        gamma = candidate;
        value = cand_value;
        trace.push(value);
    }

    if !converged {
        let (g, v, its) = golden_section(&obj, lo, hi, cfg.tolerance, cfg.max_iters);
        if its >= cfg.max_iters {
            return Err(Error::NonConvergence {
                iterations: cfg.max_iters,
                last_step,
            });
        }
        if v < value {
            gamma = g;
            value = v;
            trace.push(value);
        }
        iterations += its;
    }
    Ok(GammaResult {
        gamma,
        objective: value,
        iterations,
        trace,
    })
}

fn golden_section(obj: &GammaObjective, mut a: f64, mut b: f64, tol: f64, max_iters: usize) -> (f64, f64, usize) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (obj.value(c), obj.value(d));
    let mut its = 0;
    while (b - a).abs() > tol && its < max_iters {
        its += 1;
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = obj.value(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = obj.value(d);
        }
    }
    let g = 0.5 * (a + b);
    (g, obj.value(g), its)
}

/// Pixel-wise `L^γ`.
pub fn apply_gamma<T: Scalar>(l: &Channel<T>, gamma: f64) -> Result<Channel<T>> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidConfig(format!("gamma must be positive, got {gamma}")));
    }
    let g = T::lit(gamma);
    let data = l.data.iter().map(|&v| clamp01(clamp01(v).powf(g))).collect();
    Channel::new(l.height, l.width, data)
}

/// Intermediate products of one photometric alignment.
#[derive(Clone, Debug)]
pub struct PhotometricAlignment<T> {
    pub image: ImageRgb<T>,
    pub lab: ImageLab<T>,
    pub gamma: GammaResult,
}

/// Gamma-corrects L and histogram-matches a/b of `src` against `reference`.
pub fn align_photometric<T: Scalar>(
    src: &ImageRgb<T>,
    reference: &ImageRgb<T>,
    cfg: &GammaSolveConfig,
) -> Result<ImageRgb<T>> {
    Ok(align_photometric_detailed(src, reference, cfg)?.image)
}

pub fn align_photometric_detailed<T: Scalar>(
    src: &ImageRgb<T>,
    reference: &ImageRgb<T>,
    cfg: &GammaSolveConfig,
) -> Result<PhotometricAlignment<T>> {
    let src_lab = rgb_to_lab(src);
    let ref_lab = rgb_to_lab(reference);
    let (l, a, b) = (src_lab.channel(0), src_lab.channel(1), src_lab.channel(2));
    let gamma = solve_gamma(
        &channel_histogram(&l),
        &channel_histogram(&ref_lab.channel(0)),
        cfg,
    )?;
    let l_out = apply_gamma(&l, gamma.gamma)?;
    let a_out = match_histogram(&a, &channel_histogram(&ref_lab.channel(1)))?;
    let b_out = match_histogram(&b, &channel_histogram(&ref_lab.channel(2)))?;
    let lab = ImageLab::from_channels(&l_out, &a_out, &b_out)?;
    Ok(PhotometricAlignment {
        image: lab_to_rgb(&lab),
        lab,
        gamma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hist(counts: &[(usize, f64)]) -> Histogram {
        let mut c = vec![0.0; HISTOGRAM_BINS];
        for &(b, v) in counts {
            c[b] = v;
        }
        Histogram::from_counts(c).unwrap()
    }

    #[test]
    fn identical_histograms_give_unit_gamma() {
        let h = hist(&[(10, 3.0), (100, 5.0), (200, 2.0)]);
        let cfg = GammaSolveConfig {
            beta: 0.0,
            ..Default::default()
        };
        let r = solve_gamma(&h, &h, &cfg).unwrap();
        assert_eq!(r.gamma, 1.0);
        assert_eq!(r.objective, 0.0);
    }

    #[test]
    fn matched_means_give_unit_gamma() {
        let src = Histogram::from_counts(vec![1.0; HISTOGRAM_BINS]).unwrap();
        // point mass at the source mean bin center: 0.5 is the boundary of bins 127/128
        let reference = hist(&[(127, 1.0), (128, 1.0)]);
        let cfg = GammaSolveConfig {
            beta: 0.0,
            ..Default::default()
        };
        let r = solve_gamma(&src, &reference, &cfg).unwrap();
        assert!((r.gamma - 1.0).abs() < 1e-6, "{}", r.gamma);
    }

    #[test]
    fn all_dark_source_is_degenerate() {
        let src = hist(&[(0, 4.0)]);
        let reference = hist(&[(50, 1.0)]);
        assert!(matches!(
            solve_gamma(&src, &reference, &GammaSolveConfig::default()),
            Err(Error::DegenerateSource)
        ));
    }

    #[test]
    fn unreachable_mean_pins_gamma_to_bound() {
        let src = hist(&[(128, 1.0)]);
        let reference = hist(&[(255, 1.0)]);
        let cfg = GammaSolveConfig {
            beta: 0.0,
            ..Default::default()
        };
        let r = solve_gamma(&src, &reference, &cfg).unwrap();
        assert_eq!(r.gamma, 0.2);
    }

    #[test]
    fn trace_never_increases() {
        let src = hist(&[(20, 1.0), (60, 2.0), (90, 1.0)]);
        let reference = hist(&[(200, 3.0), (230, 1.0)]);
        let r = solve_gamma(&src, &reference, &GammaSolveConfig::default()).unwrap();
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(r.objective <= r.trace[0]);
        assert!(r.gamma < 1.0);
    }

    #[test]
    fn invalid_configs_rejected() {
        let h = hist(&[(10, 1.0)]);
        for cfg in [
            GammaSolveConfig { beta: -1.0, ..Default::default() },
            GammaSolveConfig { gamma_bounds: (1.2, 5.0), ..Default::default() },
            GammaSolveConfig { tolerance: 0.0, ..Default::default() },
        ] {
            assert!(matches!(solve_gamma(&h, &h, &cfg), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn apply_gamma_examples() {
        let ch = Channel::new(1, 3, vec![0.0f64, 0.25, 1.0]).unwrap();
        assert_eq!(apply_gamma(&ch, 1.0).unwrap(), ch);
        let out = apply_gamma(&ch, 0.5).unwrap();
        assert!((out.data[1] - 0.5).abs() < 1e-15);
        assert_eq!(out.data[0], 0.0);
        assert!(apply_gamma(&ch, 0.0).is_err());
    }

    #[test]
    fn point_mass_transport() {
        let ch = Channel::new(2, 2, vec![0.5f64; 4]).unwrap();
        let out = match_histogram(&ch, &hist(&[(200, 7.0)])).unwrap();
        assert!(out.data.iter().all(|&v| v == bin_center(200)));
    }

    #[test]
    fn self_matching_is_identity_up_to_quantization() {
        let data: Vec<f64> = (0..400).map(|i| ((i * 37) % 400) as f64 / 399.0).collect();
        let ch = Channel::new(20, 20, data).unwrap();
        let out = match_histogram(&ch, &channel_histogram(&ch)).unwrap();
        for (a, b) in ch.data.iter().zip(&out.data) {
            assert!((a - b).abs() <= 1.0 / 256.0);
        }
    }

    #[test]
    fn empty_reference_rejected() {
        let ch = Channel::new(1, 1, vec![0.5f64]).unwrap();
        assert!(match_histogram(&ch, &Histogram::empty()).is_err());
    }
}
