//! sRGB (D65) ↔ CIELAB conversion and fixed 256-bin channel histograms.
//!
//! Lab channels are stored rescaled into `[0, 1]`: `L / 100` and
//! `(a + 128) / 255`, `(b + 128) / 255`.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgio::{Channel, ImageRgb};
use crate::scalar::{clamp01, Scalar};

pub const HISTOGRAM_BINS: usize = 256;

const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

const DELTA: f64 = 6.0 / 29.0;

struct Colorimetry {
    xyz_to_rgb: [[f64; 3]; 3],
    white: [f64; 3],
}

fn colorimetry() -> &'static Colorimetry {
    static CELL: OnceLock<Colorimetry> = OnceLock::new();
    CELL.get_or_init(|| {
        // white point = image of RGB (1,1,1), so neutral greys have a = b = 0 exactly
        let white = RGB_TO_XYZ.map(|r| r.iter().sum());
        Colorimetry {
            xyz_to_rgb: invert3(&RGB_TO_XYZ),
            white,
        }
    })
}

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut inv = [[0.0; 3]; 3];
    for (i, row) in inv.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (a0, a1) = ((j + 1) % 3, (j + 2) % 3);
            let (b0, b1) = ((i + 1) % 3, (i + 2) % 3);
            *v = (m[a0][b0] * m[a1][b1] - m[a0][b1] * m[a1][b0]) / det;
        }
    }
    inv
}

#[inline]
fn srgb_decode(c: f64) -> f64 {
    if c <= 0.040_45 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

#[inline]
fn srgb_encode(c: f64) -> f64 {
    if c <= 0.003_130_8 {
        c * 12.92
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

#[inline]
fn lab_f(t: f64) -> f64 {
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

#[inline]
fn lab_f_inv(t: f64) -> f64 {
    if t > DELTA {
        t * t * t
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

/// Native CIELAB `(L, a, b)` of one sRGB pixel in `[0, 1]³`.
pub fn srgb_to_lab_native(rgb: [f64; 3]) -> [f64; 3] {
    let c = colorimetry();
    let lin = rgb.map(srgb_decode);
    let xyz = RGB_TO_XYZ.map(|r| r[0] * lin[0] + r[1] * lin[1] + r[2] * lin[2]);
    let f = [0, 1, 2].map(|i| lab_f(xyz[i] / c.white[i]));
    [116.0 * f[1] - 16.0, 500.0 * (f[0] - f[1]), 200.0 * (f[1] - f[2])]
}

/// Inverse of [`srgb_to_lab_native`] with the result clamped into `[0, 1]³`.
pub fn lab_native_to_srgb(lab: [f64; 3]) -> [f64; 3] {
    let c = colorimetry();
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let xyz = [
        lab_f_inv(fx) * c.white[0],
        lab_f_inv(fy) * c.white[1],
        lab_f_inv(fz) * c.white[2],
    ];
    let m = &c.xyz_to_rgb;
    [0, 1, 2].map(|i| {
        let lin = m[i][0] * xyz[0] + m[i][1] * xyz[1] + m[i][2] * xyz[2];
        let v = srgb_encode(lin.max(0.0));
        if v.is_nan() {
            0.0
        } else {
            v.clamp(0.0, 1.0)
        }
    })
}

#[inline]
pub fn store_lab(lab: [f64; 3]) -> [f64; 3] {
    [lab[0] / 100.0, (lab[1] + 128.0) / 255.0, (lab[2] + 128.0) / 255.0].map(|v| v.clamp(0.0, 1.0))
}

#[inline]
pub fn unstore_lab(stored: [f64; 3]) -> [f64; 3] {
    [stored[0] * 100.0, stored[1] * 255.0 - 128.0, stored[2] * 255.0 - 128.0]
}

/// CIELAB raster with every channel stored in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageLab<T> {
    height: usize,
    width: usize,
    pixels: Vec<[T; 3]>,
}

impl<T: Scalar> ImageLab<T> {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[[T; 3]] {
        &self.pixels
    }

    /// Channel 0 = L, 1 = a, 2 = b (stored scale).
    pub fn channel(&self, c: usize) -> Channel<T> {
        Channel {
            height: self.height,
            width: self.width,
            data: self.pixels.iter().map(|p| p[c]).collect(),
        }
    }

    /// Reassembles an image from three stored-scale channels.
    pub fn from_channels(l: &Channel<T>, a: &Channel<T>, b: &Channel<T>) -> Result<Self> {
        let n = l.height * l.width;
        if n == 0 {
            return Err(Error::InvalidImage("empty Lab image".into()));
        }
        for ch in [a, b] {
            if ch.height != l.height || ch.width != l.width {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: ch.height * ch.width,
                });
            }
        }
        let pixels = (0..n)
            .map(|i| [clamp01(l.data[i]), clamp01(a.data[i]), clamp01(b.data[i])])
            .collect();
        Ok(ImageLab {
            height: l.height,
            width: l.width,
            pixels,
        })
    }
}

pub fn rgb_to_lab<T: Scalar>(img: &ImageRgb<T>) -> ImageLab<T> {
    let pixels = img
        .pixels()
        .iter()
        .map(|p| store_lab(srgb_to_lab_native(p.map(T::to_f64_lossy))).map(T::lit))
        .collect();
    ImageLab {
        height: img.height(),
        width: img.width(),
        pixels,
    }
}

pub fn lab_to_rgb<T: Scalar>(img: &ImageLab<T>) -> ImageRgb<T> {
    let pixels = img
        .pixels
        .iter()
        .map(|p| lab_native_to_srgb(unstore_lab(p.map(T::to_f64_lossy))).map(T::lit))
        .collect();
    ImageRgb::new(img.height, img.width, pixels).expect("clamped conversion stays in range")
}

/// Fixed 256-bin distribution of a scalar channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    counts: Vec<f64>,
    total: f64,
}

impl Default for Histogram {
    fn default() -> Self {
        Histogram::empty()
    }
}

impl Histogram {
    pub fn empty() -> Self {
        Histogram {
            counts: vec![0.0; HISTOGRAM_BINS],
            total: 0.0,
        }
    }

    pub fn from_counts(counts: Vec<f64>) -> Result<Self> {
        if counts.len() != HISTOGRAM_BINS {
            return Err(Error::DimensionMismatch {
                expected: HISTOGRAM_BINS,
                got: counts.len(),
            });
        }
        if counts.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::DegenerateData("histogram counts must be finite and nonnegative".into()));
        }
        let total = counts.iter().sum();
        Ok(Histogram { counts, total })
    }

    #[inline]
    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    #[inline]
    pub fn total(&self) -> f64 {
        self.total
    }

    #[inline]
    pub fn add_sample(&mut self, bin: usize) {
        self.counts[bin] += 1.0;
        self.total += 1.0;
    }

    /// Bin-wise sum; associative and commutative.
    pub fn merge(&mut self, other: &Histogram) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total += other.total;
    }

    /// Counts divided by the total.
    pub fn probabilities(&self) -> Vec<f64> {
        self.counts.iter().map(|c| c / self.total).collect()
    }

    /// Cumulative probability mass up to and including each bin.
    pub fn cdf(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.counts
            .iter()
            .map(|c| {
                acc += c;
                acc / self.total
            })
            .collect()
    }

    /// Largest single-bin probability mass.
    pub fn max_bin_mass(&self) -> f64 {
        self.counts.iter().copied().fold(0.0, f64::max) / self.total
    }

    /// Probability-weighted mean of bin centers `(b + 0.5) / 256`.
    pub fn mean_bin_center(&self) -> f64 {
        self.counts
            .iter()
            .enumerate()
            .map(|(b, c)| bin_center(b) * c)
            .sum::<f64>()
            / self.total
    }
}

/// Value at the middle of bin `b` on `[0, 1]`.
#[inline]
pub fn bin_center(b: usize) -> f64 {
    (b as f64 + 0.5) / HISTOGRAM_BINS as f64
}

/// `min(floor(v · 256), 255)` for `v ∈ [0, 1]`.
#[inline]
pub fn bin_index<T: Scalar>(v: T) -> usize {
    let x = (clamp01(v).to_f64_lossy() * HISTOGRAM_BINS as f64).floor();
    (x as usize).min(HISTOGRAM_BINS - 1)
}

pub fn channel_histogram<T: Scalar>(channel: &Channel<T>) -> Histogram {
    let mut h = Histogram::empty();
    for &v in &channel.data {
        h.add_sample(bin_index(v));
    }
    h
}

/// Largest absolute difference between two histograms' CDFs.
pub fn cdf_sup_distance(p: &Histogram, q: &Histogram) -> f64 {
    p.cdf()
        .iter()
        .zip(q.cdf())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}
