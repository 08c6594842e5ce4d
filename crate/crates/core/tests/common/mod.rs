//! Random instances and naive reference implementations shared by the
//! integration tests.
#![allow(dead_code)]

use domalign::catreg::CategoryCenters;
use domalign::colorspace::{bin_center, Histogram, HISTOGRAM_BINS};
use domalign::gma::{AtomSet, ManifoldProjector, PcaModel};
use domalign::tcr::{CategoryThresholds, DisplacementField, PseudoLabelMap, ThresholdConfig};
use domalign::{ImageRgbF64, Matrix, IGNORE_LABEL};
use rand::Rng;

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Matrix<f64> {
    let data = (0..rows * cols).map(|_| scale * (2.0 * rng.random::<f64>() - 1.0)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// `k` orthonormal rows in `R^d` by Gram–Schmidt on Gaussian-ish rows.
pub fn orthonormal_rows<R: Rng>(rng: &mut R, k: usize, d: usize) -> Matrix<f64> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(k);
    while out.len() < k {
        let mut v: Vec<f64> = (0..d).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
        for u in &out {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-3 {
            out.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    Matrix::from_rows(&out).unwrap()
}

pub fn random_projector<R: Rng>(rng: &mut R, d: usize, dr: usize, nz: usize, nh: usize) -> ManifoldProjector<f64> {
    let pca = PcaModel {
        mean: (0..d).map(|_| rng.random::<f64>() - 0.5).collect(),
        components: orthonormal_rows(rng, dr, d),
        eigenvalues: vec![1.0; dr],
        explained_ratio: 1.0,
    };
    let atoms = AtomSet {
        atoms: random_matrix(rng, nz, dr, 1.0),
        inertia: 0.0,
        inertia_history: Vec::new(),
    };
    ManifoldProjector::from_parts(random_matrix(rng, nh, dr, 0.8), random_matrix(rng, nh, dr, 0.8), atoms, pca).unwrap()
}

pub fn random_centers<R: Rng>(rng: &mut R, classes: usize, d: usize) -> CategoryCenters<f64> {
    let mut centers = random_matrix(rng, classes, d, 1.0);
    for c in 0..classes {
        let row = centers.row_mut(c);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    CategoryCenters { centers, present: vec![true; classes] }
}

pub fn random_probs<R: Rng>(rng: &mut R, rows: usize, classes: usize) -> Matrix<f64> {
    let mut m = Matrix::zeros(rows, classes);
    for r in 0..rows {
        let w: Vec<f64> = (0..classes).map(|_| rng.random::<f64>().powi(3) + 1e-3).collect();
        let s: f64 = w.iter().sum();
        for c in 0..classes {
            m.set(r, c, w[c] / s);
        }
    }
    m
}

pub fn random_field<R: Rng>(rng: &mut R, h: usize, w: usize, amp: f64) -> DisplacementField {
    let mut f = DisplacementField::zero(h, w);
    for i in 0..h * w {
        f.dy[i] = amp * (2.0 * rng.random::<f64>() - 1.0);
        f.dx[i] = amp * (2.0 * rng.random::<f64>() - 1.0);
    }
    f
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Sum over rows of the squared reconstruction error, with every product
/// written as an explicit loop.
pub fn naive_manifold_loss(batch: &Matrix<f64>, p: &ManifoldProjector<f64>) -> f64 {
    let (d, dr) = (batch.cols(), p.pca.reduced_dim());
    let (nz, nh) = (p.atoms.atoms.rows(), p.w1.rows());
    let mut total = 0.0;
    for r in 0..batch.rows() {
        let x = batch.row(r);
        let mut red = vec![0.0; dr];
        for i in 0..dr {
            for j in 0..d {
                red[i] += p.pca.components.get(i, j) * (x[j] - p.pca.mean[j]);
            }
        }
        let mut q = vec![0.0; nh];
        for h in 0..nh {
            for i in 0..dr {
                q[h] += p.w1.get(h, i) * red[i];
            }
        }
        let mut scores = vec![0.0; nz];
        for k in 0..nz {
            for h in 0..nh {
                let mut key = 0.0;
                for i in 0..dr {
                    key += p.w2.get(h, i) * p.atoms.atoms.get(k, i);
                }
                scores[k] += q[h] * key;
            }
            scores[k] /= (nz as f64).sqrt();
        }
        let w = softmax(&scores);
        let mut proj = vec![0.0; dr];
        for k in 0..nz {
            for i in 0..dr {
                proj[i] += w[k] * p.atoms.atoms.get(k, i);
            }
        }
        for j in 0..d {
            let mut lifted = p.pca.mean[j];
            for i in 0..dr {
                lifted += p.pca.components.get(i, j) * proj[i];
            }
            total += (lifted - x[j]).powi(2);
        }
    }
    total
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn naive_triplet_loss(feats: &Matrix<f64>, labels: &[u8], centers: &CategoryCenters<f64>, alpha: f64) -> f64 {
    let mut sum = 0.0;
    let mut n = 0;
    for (r, &l) in labels.iter().enumerate() {
        if l == IGNORE_LABEL {
            continue;
        }
        let x = feats.row(r);
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let g: Vec<f64> = x.iter().map(|v| v / norm).collect();
        let pos = l2(&g, centers.centers.row(l as usize));
        let mut neg = f64::INFINITY;
        for c in 0..centers.present.len() {
            if c != l as usize && centers.present[c] {
                neg = neg.min(l2(&g, centers.centers.row(c)));
            }
        }
        sum += (pos - neg + alpha).max(0.0);
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn naive_centers(feats: &Matrix<f64>, labels: &[u8], classes: usize) -> CategoryCenters<f64> {
    let mut centers = Matrix::zeros(classes, feats.cols());
    let mut present = vec![false; classes];
    for c in 0..classes {
        let members: Vec<usize> = (0..labels.len()).filter(|&r| labels[r] as usize == c).collect();
        if members.is_empty() {
            continue;
        }
        present[c] = true;
        let mut mean = vec![0.0; feats.cols()];
        for &r in &members {
            for j in 0..feats.cols() {
                mean[j] += feats.get(r, j) / members.len() as f64;
            }
        }
        let n = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        for j in 0..feats.cols() {
            centers.set(c, j, mean[j] / n);
        }
    }
    CategoryCenters { centers, present }
}

pub fn naive_pseudo_labels(probs: &Matrix<f64>) -> (Vec<u8>, Vec<f64>) {
    let mut labels = Vec::new();
    let mut conf = Vec::new();
    for r in 0..probs.rows() {
        let mut best = 0;
        for c in 0..probs.cols() {
            if probs.get(r, c) > probs.get(r, best) {
                best = c;
            }
        }
        labels.push(best as u8);
        conf.push(probs.get(r, best));
    }
    (labels, conf)
}

/// Smallest confidence `t` such that at least `p%` of the class reaches it,
/// found by trying every candidate value.
pub fn naive_thresholds(labels: &[u8], conf: &[f64], cfg: &ThresholdConfig, classes: usize) -> Vec<f64> {
    (0..classes)
        .map(|c| {
            let mine: Vec<f64> = (0..labels.len()).filter(|&i| labels[i] as usize == c).map(|i| conf[i]).collect();
            if mine.is_empty() {
                return cfg.p_h;
            }
            let need = cfg.percent / 100.0 * mine.len() as f64;
            let best = mine
                .iter()
                .copied()
                .filter(|&t| mine.iter().filter(|&&v| v >= t).count() as f64 >= need - 1e-9)
                .fold(f64::NEG_INFINITY, f64::max);
            best.min(cfg.p_h)
        })
        .collect()
}

pub fn naive_consistency(
    pl: &PseudoLabelMap<f64>,
    t: &CategoryThresholds<f64>,
    probs: &Matrix<f64>,
    field: Option<&DisplacementField>,
) -> (f64, usize) {
    let (h, w) = (pl.height, pl.width);
    let mut loss = 0.0;
    let mut n = 0;
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = match field {
                Some(f) => {
                    let i = y * w + x;
                    (
                        (y as f64 + f.dy[i]).clamp(0.0, (h - 1) as f64).round() as usize,
                        (x as f64 + f.dx[i]).clamp(0.0, (w - 1) as f64).round() as usize,
                    )
                }
                None => (y, x),
            };
            let j = sy * w + sx;
            let (label, c) = (pl.labels[j] as usize, pl.confidence[j]);
            if c >= t.thresholds[label] {
                loss -= probs.get(y * w + x, label).ln();
                n += 1;
            }
        }
    }
    (loss, n)
}

/// Central differences of `f` at every entry of `x`.
/// Lightness histogram with `occupied` random non-zero bins.
pub fn random_hist<R: Rng>(rng: &mut R, occupied: usize) -> Histogram {
    let mut counts = vec![0.0; HISTOGRAM_BINS];
    for _ in 0..occupied {
        counts[rng.random_range(1..HISTOGRAM_BINS)] += rng.random_range(1..50) as f64;
    }
    Histogram::from_counts(counts).unwrap()
}

/// Gamma objective evaluated straight from its definition.
pub fn gamma_objective(src: &Histogram, reference: &Histogram, beta: f64, gamma: f64) -> f64 {
    let (ps, pr) = (src.probabilities(), reference.probabilities());
    let corrected: f64 = (0..HISTOGRAM_BINS)
        .filter(|&b| ps[b] > 0.0)
        .map(|b| bin_center(b).powf(gamma) * ps[b])
        .sum();
    let target: f64 = (0..HISTOGRAM_BINS).map(|b| bin_center(b) * pr[b]).sum();
    (corrected - target).powi(2) + beta * (gamma - 1.0).powi(2)
}

/// Minimizer of the gamma objective over `[0.2, 5]` at resolution `1e-4`.
pub fn grid_argmin(src: &Histogram, reference: &Histogram, beta: f64) -> f64 {
    (0..=48_000)
        .map(|i| 0.2 + i as f64 * 1e-4)
        .map(|g| (g, gamma_objective(src, reference, beta, g)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap()
        .0
}

/// Smooth shading and a few flat objects, with uniform per-pixel grain of
/// amplitude `grain`.
pub fn scene<R: Rng>(rng: &mut R, h: usize, w: usize, grain: f64) -> ImageRgbF64 {
    let base: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    let tilt: [f64; 2] = [rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4)];
    let objects: Vec<([f64; 3], f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                [rng.random(), rng.random(), rng.random()],
                rng.random_range(0.0..h as f64),
                rng.random_range(0.0..w as f64),
                rng.random_range(3.0..10.0),
            )
        })
        .collect();
    let mut pixels = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let shade = tilt[0] * (y as f64 / h as f64 - 0.5) + tilt[1] * (x as f64 / w as f64 - 0.5);
            let mut p = base.map(|v| v + shade);
            for (c, cy, cx, r) in &objects {
                if (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r {
                    p = *c;
                }
            }
            pixels.push(p.map(|v| (v + grain * (2.0 * rng.random::<f64>() - 1.0)).clamp(0.0, 1.0)));
        }
    }
    ImageRgbF64::new(h, w, pixels).unwrap()
}

/// Grainy source scenes against nearly clean reference scenes.
pub fn texture_mismatch_corpus<R: Rng>(rng: &mut R, n: usize, size: usize) -> (Vec<ImageRgbF64>, Vec<ImageRgbF64>) {
    let src = (0..n).map(|_| scene(rng, size, size, 0.12)).collect();
    let reference = (0..n).map(|_| scene(rng, size, size, 0.01)).collect();
    (src, reference)
}

/// Distance from a kink of the hinge: the margin itself and the gap between
/// the two nearest negatives.
pub fn kink_distance(feats: &Matrix<f64>, labels: &[u8], centers: &CategoryCenters<f64>, alpha: f64) -> f64 {
    let mut closest = f64::INFINITY;
    for (r, &l) in labels.iter().enumerate() {
        if l == IGNORE_LABEL {
            continue;
        }
        let x = feats.row(r);
        let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dist = |c: usize| {
            x.iter()
                .zip(centers.centers.row(c))
                .map(|(a, b)| (a / n - b).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let mut neg: Vec<f64> = (0..centers.present.len()).filter(|&c| c != l as usize).map(dist).collect();
        neg.sort_by(f64::total_cmp);
        closest = closest.min((dist(l as usize) - neg[0] + alpha).abs());
        if neg.len() > 1 {
            closest = closest.min(neg[1] - neg[0]);
        }
    }
    closest
}

pub fn numeric_grad(x: &Matrix<f64>, h: f64, mut f: impl FnMut(&Matrix<f64>) -> f64) -> Matrix<f64> {
    let mut g = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.as_slice().len() {
        let v = x.as_slice()[i];
        probe.as_mut_slice()[i] = v + h;
        let up = f(&probe);
        probe.as_mut_slice()[i] = v - h;
        let down = f(&probe);
        probe.as_mut_slice()[i] = v;
        g.as_mut_slice()[i] = (up - down) / (2.0 * h);
    }
    g
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute difference when both are tiny.
pub fn relative_error(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    let diff = l2(a.as_slice(), b.as_slice());
    let scale = l2(a.as_slice(), &vec![0.0; a.as_slice().len()]).max(l2(b.as_slice(), &vec![0.0; b.as_slice().len()]));
    if scale < 1e-8 {
        diff
    } else {
        diff / scale
    }
}
