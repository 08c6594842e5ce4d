//! Category centers and the category-oriented triplet loss.
//!
//! Each class center is the L2-normalized mean of its member features. The
//! loss asks every normalized source feature to sit at least `alpha` closer to
//! its own center than to the hardest other center:
//!
//! ```text
//! L = 1/N_s Σ_j max(‖G(x_j) − f_y‖ − min_{c≠y} ‖G(x_j) − f_c‖ + α, 0)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgio::IGNORE_LABEL;
use crate::matrix::{axpy, norm, Matrix};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct CategoryCenters<T> {
    /// `M_c × D_c`; rows of absent classes are zero.
    pub centers: Matrix<T>,
    pub present: Vec<bool>,
}

impl<T: Scalar> CategoryCenters<T> {
    pub fn class_count(&self) -> usize {
        self.present.len()
    }

    pub fn present_count(&self) -> usize {
        self.present.iter().filter(|&&p| p).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripletConfig {
    pub alpha: f64,
}

impl Default for TripletConfig {
    fn default() -> Self {
        TripletConfig { alpha: 0.2 }
    }
}

fn check_rows<T: Scalar>(feats: &Matrix<T>, labels: &[u8]) -> Result<()> {
    if feats.rows() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: feats.rows(),
            got: labels.len(),
        });
    }
    Ok(())
}

/// `f_c = G(mean of features labelled c)`; ignored pixels are skipped and
/// classes without members are marked absent.
pub fn compute_category_centers<T: Scalar>(
    feats: &Matrix<T>,
    labels: &[u8],
    class_count: usize,
) -> Result<CategoryCenters<T>> {
    check_rows(feats, labels)?;
    let d = feats.cols();
    let mut sums = Matrix::zeros(class_count, d);
    let mut counts = vec![0usize; class_count];
    for (row, &l) in feats.iter_rows().zip(labels) {
        if l == IGNORE_LABEL {
            continue;
        }
        let c = l as usize;
        if c >= class_count {
            return Err(Error::InvalidLabel { label: l, class_count });
        }
        axpy(T::one(), row, sums.row_mut(c));
        counts[c] += 1;
    }
    if counts.iter().all(|&c| c == 0) {
        return Err(Error::AllClassesAbsent);
    }
    let mut present = vec![false; class_count];
    for c in 0..class_count {
        if counts[c] == 0 {
            continue;
        }
        let inv = T::one() / T::lit(counts[c] as f64);
        let row = sums.row_mut(c);
        row.iter_mut().for_each(|v| *v *= inv);
        let n = norm(row);
        if !(n > T::zero()) {
            return Err(Error::DegenerateData(format!("class {c} has a zero mean feature")));
        }
        row.iter_mut().for_each(|v| *v /= n);
        present[c] = true;
    }
    Ok(CategoryCenters {
        centers: sums,
        present,
    })
}

fn normalized<T: Scalar>(x: &[T]) -> (Vec<T>, T) {
    let n = norm(x).max(T::min_positive_value());
    (x.iter().map(|&v| v / n).collect(), n)
}

fn dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    crate::matrix::sq_dist(a, b).sqrt()
}

/// Per-pixel hinge terms; `None` for ignored pixels.
struct PixelTerm<T> {
    g: Vec<T>,
    norm: T,
    label: usize,
    negative: usize,
    d_pos: T,
    d_neg: T,
    value: T,
}

fn pixel_terms<T: Scalar>(
    feats: &Matrix<T>,
    labels: &[u8],
    centers: &CategoryCenters<T>,
    cfg: &TripletConfig,
) -> Result<Vec<Option<PixelTerm<T>>>> {
    check_rows(feats, labels)?;
    if feats.cols() != centers.centers.cols() {
        return Err(Error::DimensionMismatch {
            expected: centers.centers.cols(),
            got: feats.cols(),
        });
    }
    if centers.present_count() < 2 {
        return Err(Error::SingleClass);
    }
    if cfg.alpha < 0.0 {
        return Err(Error::InvalidConfig("triplet margin must be nonnegative".into()));
    }
    let alpha = T::lit(cfg.alpha);
    feats
        .iter_rows()
        .zip(labels)
        .map(|(x, &l)| {
            if l == IGNORE_LABEL {
                return Ok(None);
            }
            let y = l as usize;
            if y >= centers.class_count() || !centers.present[y] {
                return Err(Error::ClassAbsent(y));
            }
            let (g, n) = normalized(x);
            let d_pos = dist(&g, centers.centers.row(y));
            let (negative, d_neg) = (0..centers.class_count())
                .filter(|&c| c != y && centers.present[c])
                .map(|c| (c, dist(&g, centers.centers.row(c))))
                // strict comparison keeps the lowest index on ties
                .fold((usize::MAX, T::infinity()), |best, cur| if cur.1 < best.1 { cur } else { best });
            let value = (d_pos - d_neg + alpha).max(T::zero());
            Ok(Some(PixelTerm {
                g,
                norm: n,
                label: y,
                negative,
                d_pos,
                d_neg,
                value,
            }))
        })
        .collect()
}

/// Mean hinge over non-ignored pixels (0 when every pixel is ignored).
pub fn triplet_loss<T: Scalar>(
    feats: &Matrix<T>,
    labels: &[u8],
    centers: &CategoryCenters<T>,
    cfg: &TripletConfig,
) -> Result<T> {
    let terms = pixel_terms(feats, labels, centers, cfg)?;
    let (sum, count) = terms
        .iter()
        .flatten()
        .fold((T::zero(), 0usize), |(s, n), t| (s + t.value, n + 1));
    Ok(if count == 0 { T::zero() } else { sum / T::lit(count as f64) })
}

/// Subgradient of [`triplet_loss`] with respect to each raw feature row,
/// through the normalization `G`. Centers are constants.
pub fn triplet_loss_grad<T: Scalar>(
    feats: &Matrix<T>,
    labels: &[u8],
    centers: &CategoryCenters<T>,
    cfg: &TripletConfig,
) -> Result<Matrix<T>> {
    let terms = pixel_terms(feats, labels, centers, cfg)?;
    let count = terms.iter().flatten().count();
    let mut grad = Matrix::zeros(feats.rows(), feats.cols());
    if count == 0 {
        return Ok(grad);
    }
    let inv_n = T::one() / T::lit(count as f64);
    for (j, t) in terms.iter().enumerate() {
        let Some(t) = t else { continue };
        if t.value <= T::zero() {
            continue;
        }
        // dL/dG = (G − f_y)/d_pos − (G − f_n)/d_neg
        let mut dg = vec![T::zero(); feats.cols()];
        if t.d_pos > T::zero() {
            let f = centers.centers.row(t.label);
            for (o, (&g, &c)) in dg.iter_mut().zip(t.g.iter().zip(f)) {
                *o += (g - c) / t.d_pos;
            }
        }
        if t.d_neg > T::zero() {
            let f = centers.centers.row(t.negative);
            for (o, (&g, &c)) in dg.iter_mut().zip(t.g.iter().zip(f)) {
                *o -= (g - c) / t.d_neg;
            }
        }
        // dG/dx = (I − G Gᵀ) / ‖x‖
        let proj = crate::matrix::dot(&dg, &t.g);
        let scale = inv_n / t.norm;
        for (o, (&v, &g)) in grad.row_mut(j).iter_mut().zip(dg.iter().zip(&t.g)) {
            *o = (v - proj * g) * scale;
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn centers2() -> CategoryCenters<f64> {
        CategoryCenters {
            centers: Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap(),
            present: vec![true, true],
        }
    }

    #[test]
    fn single_pixel_center() {
        let f = Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let c = compute_category_centers(&f, &[0], 2).unwrap();
        assert_eq!(c.centers.row(0), &[0.6, 0.8]);
        assert_eq!(c.present, vec![true, false]);
    }

    #[test]
    fn mean_then_normalize() {
        let f = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![9.0, 9.0]]).unwrap();
        let c = compute_category_centers(&f, &[1, 1, IGNORE_LABEL], 2).unwrap();
        let s = 1.0 / 2f64.sqrt();
        assert!((c.centers.get(1, 0) - s).abs() < 1e-15 && (c.centers.get(1, 1) - s).abs() < 1e-15);
    }

    #[test]
    fn all_ignored_is_error() {
        let f = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(matches!(compute_category_centers(&f, &[IGNORE_LABEL], 2), Err(Error::AllClassesAbsent)));
    }

    #[test]
    fn antipodal_centers_zero_loss() {
        let f = Matrix::from_rows(&[vec![2.0, 0.0]]).unwrap();
        let l = triplet_loss(&f, &[0], &centers2(), &TripletConfig::default()).unwrap();
        assert_eq!(l, 0.0);
        let g = triplet_loss_grad(&f, &[0], &centers2(), &TripletConfig::default()).unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn equidistant_feature_costs_alpha() {
        let f = Matrix::from_rows(&[vec![0.0, 5.0]]).unwrap();
        let l = triplet_loss(&f, &[0], &centers2(), &TripletConfig { alpha: 0.2 }).unwrap();
        assert!((l - 0.2).abs() < 1e-15);
    }

    #[test]
    fn one_present_class_is_error() {
        let mut c = centers2();
        c.present[1] = false;
        let f = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(matches!(triplet_loss(&f, &[0], &c, &TripletConfig::default()), Err(Error::SingleClass)));
    }

    #[test]
    fn absent_label_is_error() {
        let c = CategoryCenters {
            centers: Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap(),
            present: vec![true, true, false],
        };
        let f = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(matches!(triplet_loss(&f, &[2], &c, &TripletConfig::default()), Err(Error::ClassAbsent(2))));
    }
}
