//! Two-layer linear-softmax pixel classifier over handcrafted descriptors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgio::{ImageRgb, LabelMap, IGNORE_LABEL};
use crate::matrix::Matrix;
use crate::scalar::{softmax_in_place, Scalar};
use crate::tcr::ProbabilityMap;

/// RGB, 3×3 neighbourhood mean and 3×3 neighbourhood standard deviation.
pub const DESCRIPTOR_DIM: usize = 9;

/// Colour terms are mapped from `[0, 1]` to `[-1, 1]`; deviations are scaled
/// by this factor so both groups have comparable spread.
const STD_SCALE: f64 = 4.0;

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let i = i.rem_euclid(period);
    (if i >= n as isize { period - i } else { i }) as usize
}

/// Per-pixel descriptors (`H·W × 9`), borders reflected.
pub fn pixel_descriptors<T: Scalar>(img: &ImageRgb<T>) -> Matrix<T> {
    let (h, w) = (img.height(), img.width());
    let px = img.pixels();
    let mut out = Matrix::zeros(h * w, DESCRIPTOR_DIM);
    let ninth = T::lit(1.0 / 9.0);
    let (one, two, std_scale) = (T::one(), T::lit(2.0), T::lit(STD_SCALE));
    for y in 0..h {
        for x in 0..w {
            let row = out.row_mut(y * w + x);
            let centre = px[y * w + x];
            let mut sum = [T::zero(); 3];
            let mut sq = [T::zero(); 3];
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let p = px[reflect(y as isize + dy, h) * w + reflect(x as isize + dx, w)];
                    for c in 0..3 {
                        sum[c] += p[c];
                        sq[c] += p[c] * p[c];
                    }
                }
            }
            for c in 0..3 {
                let mean = sum[c] * ninth;
                row[c] = two * centre[c] - one;
                row[3 + c] = two * mean - one;
                row[6 + c] = std_scale * (sq[c] * ninth - mean * mean).max(T::zero()).sqrt();
            }
        }
    }
    out
}

/// `x = A·[d; 1]`, `logits = W·[x; 1]`. `x` is the feature the alignment
/// losses act on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ToySegmenter<T> {
    /// `D_f × (D_in + 1)`
    pub feature: Matrix<T>,
    /// `M_c × (D_f + 1)`
    pub head: Matrix<T>,
}

#[derive(Clone, Debug)]
pub struct SegmenterOutput<T> {
    pub features: Matrix<T>,
    pub logits: Matrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmenterGrad<T> {
    pub feature: Matrix<T>,
    pub head: Matrix<T>,
}

fn affine<T: Scalar>(weights: &Matrix<T>, input: &Matrix<T>) -> Matrix<T> {
    let d = input.cols();
    let mut out = Matrix::zeros(input.rows(), weights.rows());
    for (r, x) in input.iter_rows().enumerate() {
        let o = out.row_mut(r);
        for (k, wk) in weights.iter_rows().enumerate() {
            let mut acc = wk[d];
            for i in 0..d {
                acc += wk[i] * x[i];
            }
            o[k] = acc;
        }
    }
    out
}

/// Accumulates `Σ_r g_r ⊗ [x_r; 1]` into `acc`.
fn outer_acc<T: Scalar>(acc: &mut Matrix<T>, grad: &Matrix<T>, input: &Matrix<T>) {
    let d = input.cols();
    for (g, x) in grad.iter_rows().zip(input.iter_rows()) {
        for (k, &gk) in g.iter().enumerate() {
            if gk == T::zero() {
                continue;
            }
            let row = acc.row_mut(k);
            for i in 0..d {
                row[i] += gk * x[i];
            }
            row[d] += gk;
        }
    }
}

impl<T: Scalar> ToySegmenter<T> {
    /// Weights uniform in `±1/√fan_in`.
    pub fn new<R: Rng + ?Sized>(
        descriptor_dim: usize,
        feature_dim: usize,
        class_count: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if descriptor_dim == 0 || feature_dim == 0 || class_count < 2 {
            return Err(Error::InvalidConfig("segmenter needs positive dims and at least 2 classes".into()));
        }
        let mut init = |rows: usize, cols: usize| {
            let s = 1.0 / (cols as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| T::lit(s * (2.0 * rng.random::<f64>() - 1.0)))
                .collect();
            Matrix::from_vec(rows, cols, data)
        };
        Ok(ToySegmenter {
            feature: init(feature_dim, descriptor_dim + 1)?,
            head: init(class_count, feature_dim + 1)?,
        })
    }

    pub fn descriptor_dim(&self) -> usize {
        self.feature.cols() - 1
    }

    pub fn feature_dim(&self) -> usize {
        self.feature.rows()
    }

    pub fn class_count(&self) -> usize {
        self.head.rows()
    }

    pub fn forward(&self, descriptors: &Matrix<T>) -> Result<SegmenterOutput<T>> {
        if descriptors.cols() != self.descriptor_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.descriptor_dim(),
                got: descriptors.cols(),
            });
        }
        let features = affine(&self.feature, descriptors);
        let logits = affine(&self.head, &features);
        Ok(SegmenterOutput { features, logits })
    }

    /// Back-propagates gradients on the logits and (optionally) directly on
    /// the features to both weight matrices.
    pub fn backward(
        &self,
        descriptors: &Matrix<T>,
        out: &SegmenterOutput<T>,
        grad_logits: Option<&Matrix<T>>,
        grad_features: Option<&Matrix<T>>,
    ) -> SegmenterGrad<T> {
        let (n, df) = (descriptors.rows(), self.feature_dim());
        let mut head = Matrix::zeros(self.head.rows(), self.head.cols());
        let mut gx = match grad_features {
            Some(g) => g.clone(),
            None => Matrix::zeros(n, df),
        };
        if let Some(gl) = grad_logits {
            outer_acc(&mut head, gl, &out.features);
            for (r, g) in gl.iter_rows().enumerate() {
                let row = gx.row_mut(r);
                for (k, &gk) in g.iter().enumerate() {
                    if gk == T::zero() {
                        continue;
                    }
                    let wk = self.head.row(k);
                    for i in 0..df {
                        row[i] += gk * wk[i];
                    }
                }
            }
        }
        let mut feature = Matrix::zeros(self.feature.rows(), self.feature.cols());
        outer_acc(&mut feature, &gx, descriptors);
        SegmenterGrad { feature, head }
    }

    /// Gradient step with separate rates for the feature layer and the head.
    pub fn step(&mut self, grad: &SegmenterGrad<T>, lr: T) {
        for (w, g) in self.feature.as_mut_slice().iter_mut().zip(grad.feature.as_slice()) {
            *w -= lr * *g;
        }
        for (w, g) in self.head.as_mut_slice().iter_mut().zip(grad.head.as_slice()) {
            *w -= lr * *g;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.feature.is_finite() && self.head.is_finite()
    }

    pub fn probabilities(&self, img: &ImageRgb<T>) -> Result<ProbabilityMap<T>> {
        let out = self.forward(&pixel_descriptors(img))?;
        ProbabilityMap::from_logits(img.height(), img.width(), &out.logits)
    }

    /// Argmax label per pixel, lowest index on ties.
    pub fn predict(&self, img: &ImageRgb<T>) -> Result<Vec<u8>> {
        let out = self.forward(&pixel_descriptors(img))?;
        Ok(out
            .logits
            .iter_rows()
            .map(|row| {
                let mut best = 0;
                for (c, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect())
    }
}

fn check_labels(rows: usize, classes: usize, labels: &LabelMap) -> Result<()> {
    if labels.labels.len() != rows {
        return Err(Error::DimensionMismatch {
            expected: rows,
            got: labels.labels.len(),
        });
    }
    labels.validate(classes)
}

/// Mean cross-entropy over non-ignored pixels; 0 when none remain.
pub fn cross_entropy_loss<T: Scalar>(probs: &ProbabilityMap<T>, labels: &LabelMap) -> Result<T> {
    check_labels(probs.probs.rows(), probs.classes(), labels)?;
    let mut sum = T::zero();
    let mut n = 0usize;
    for (row, &l) in probs.probs.iter_rows().zip(&labels.labels) {
        if l != IGNORE_LABEL {
            sum -= row[l as usize].max(T::min_positive_value()).ln();
            n += 1;
        }
    }
    Ok(if n == 0 { T::zero() } else { sum / T::lit(n as f64) })
}

/// Mean cross-entropy and its gradient with respect to the logits,
/// `(softmax − onehot) / n` on non-ignored rows.
pub fn cross_entropy_loss_grad<T: Scalar>(logits: &Matrix<T>, labels: &LabelMap) -> Result<(T, Matrix<T>)> {
    check_labels(logits.rows(), logits.cols(), labels)?;
    let n = labels.labels.iter().filter(|&&l| l != IGNORE_LABEL).count();
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    if n == 0 {
        return Ok((T::zero(), grad));
    }
    let inv = T::lit(1.0 / n as f64);
    let mut sum = T::zero();
    for (r, &l) in labels.labels.iter().enumerate() {
        if l == IGNORE_LABEL {
            continue;
        }
        let g = grad.row_mut(r);
        g.copy_from_slice(logits.row(r));
        softmax_in_place(g);
        sum -= g[l as usize].max(T::min_positive_value()).ln();
        g[l as usize] -= T::one();
        g.iter_mut().for_each(|v| *v *= inv);
    }
    Ok((sum * inv, grad))
}

/// Fraction of non-ignored pixels predicted correctly.
pub fn pixel_accuracy(pred: &[u8], labels: &[u8]) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for (&p, &l) in pred.iter().zip(labels) {
        if l != IGNORE_LABEL {
            n += 1;
            hit += (p == l) as usize;
        }
    }
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

/// Mean intersection-over-union over classes that occur in prediction or labels.
pub fn mean_iou(pred: &[u8], labels: &[u8], class_count: usize) -> f64 {
    let mut inter = vec![0usize; class_count];
    let mut union = vec![0usize; class_count];
    for (&p, &l) in pred.iter().zip(labels) {
        if l == IGNORE_LABEL {
            continue;
        }
        let (p, l) = (p as usize, l as usize);
        if p == l {
            inter[l] += 1;
            union[l] += 1;
        } else {
            if p < class_count {
                union[p] += 1;
            }
            if l < class_count {
                union[l] += 1;
            }
        }
    }
    let ious: Vec<f64> = inter
        .iter()
        .zip(&union)
        .filter(|(_, &u)| u > 0)
        .map(|(&i, &u)| i as f64 / u as f64)
        .collect();
    if ious.is_empty() {
        0.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    }
}
