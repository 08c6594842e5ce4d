//! Global manifold alignment.
//!
//! Correctly classified source features are reduced with PCA and summarized
//! by k-means atoms `z`. A feature `x` is projected onto the atoms through
//! attention weights
//!
//! ```text
//! w = softmax( (R(x) W1ᵀ)(W2 zᵀ) / √N_z ),   x̂' = wᵀ z
//! ```
//!
//! and penalized by `‖R⁻¹(x̂') − x‖²`. PCA and atoms are frozen per stage;
//! gradients flow to `x`, `W1` and `W2`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{axpy, dot, sq_dist, Matrix};
use crate::scalar::{softmax_in_place, Scalar};

pub type FeatureMatrix<T> = Matrix<T>;

/// Rows per parallel work unit; fixed so reductions do not depend on thread count.
const CHUNK_ROWS: usize = 64;

#[inline]
fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Uniformly samples `n` rows (without replacement) among pixels whose
/// argmax prediction equals their label.
pub fn sample_correct_features<T: Scalar, R: Rng + ?Sized>(
    feats: &Matrix<T>,
    probs: &Matrix<T>,
    labels: &[u8],
    n: usize,
    rng: &mut R,
) -> Result<FeatureMatrix<T>> {
    if feats.rows() != probs.rows() || feats.rows() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: feats.rows(),
            got: probs.rows().min(labels.len()),
        });
    }
    let correct: Vec<usize> = (0..feats.rows())
        .filter(|&i| argmax(probs.row(i)) == labels[i] as usize)
        .collect();
    if n > correct.len() || correct.is_empty() {
        return Err(Error::InsufficientCorrectPixels {
            requested: n,
            available: correct.len(),
        });
    }
    let picked: Vec<usize> = rand::seq::index::sample(rng, correct.len(), n)
        .into_iter()
        .map(|k| correct[k])
        .collect();
    Ok(feats.select_rows(&picked))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct PcaModel<T> {
    pub mean: Vec<T>,
    /// `D_c' × D_c`, orthonormal rows sorted by decreasing variance.
    pub components: Matrix<T>,
    /// Variance along each retained component.
    pub eigenvalues: Vec<T>,
    pub explained_ratio: T,
}

impl<T: Scalar> PcaModel<T> {
    pub fn input_dim(&self) -> usize {
        self.components.cols()
    }

    pub fn reduced_dim(&self) -> usize {
        self.components.rows()
    }

    pub fn reduce_matrix(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let mut data = Vec::with_capacity(x.rows() * self.reduced_dim());
        for row in x.iter_rows() {
            data.extend(pca_reduce(row, self)?);
        }
        Matrix::from_vec(x.rows(), self.reduced_dim(), data)
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues (descending) and matching unit eigenvectors as rows.
pub fn symmetric_eigen<T: Scalar>(a: &Matrix<T>) -> (Vec<T>, Matrix<T>) {
    let n = a.rows();
    let mut m = a.clone();
    let mut v = Matrix::zeros(n, n);
    for i in 0..n {
        v.set(i, i, T::one());
    }
    let scale: T = m.as_slice().iter().map(|x| *x * *x).sum::<T>().sqrt();
    let eps = T::epsilon() * T::lit(0.5);
    for _sweep in 0..100 {
        let off: T = (0..n)
            .flat_map(|p| ((p + 1)..n).map(move |q| (p, q)))
            .map(|(p, q)| m.get(p, q) * m.get(p, q))
            .sum::<T>()
            .sqrt();
        if off <= eps * scale || off == T::zero() {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq == T::zero() {
                    continue;
                }
                let (app, aqq) = (m.get(p, p), m.get(q, q));
                let theta = (aqq - app) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m.get(k, p), m.get(k, q));
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let (mpk, mqk) = (m.get(p, k), m.get(q, k));
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let (vkp, vkq) = (v.get(k, p), v.get(k, q));
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.get(j, j).total_cmp(&m.get(i, i)).then(i.cmp(&j)));
    let values = order.iter().map(|&i| m.get(i, i)).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (r, &i) in order.iter().enumerate() {
        for k in 0..n {
            vectors.set(r, k, v.get(k, i));
        }
    }
    (values, vectors)
}

/// PCA keeping the fewest components whose cumulative explained variance
/// reaches `target_energy`, or exactly `dim_override` components if given.
pub fn fit_pca<T: Scalar>(
    x: &FeatureMatrix<T>,
    target_energy: f64,
    dim_override: Option<usize>,
) -> Result<PcaModel<T>> {
    let (n, d) = (x.rows(), x.cols());
    if n < 2 || d == 0 {
        return Err(Error::DegenerateData(format!("PCA needs at least 2 rows, got {n}")));
    }
    if !(target_energy > 0.0 && target_energy <= 1.0) {
        return Err(Error::InvalidConfig(format!("target energy {target_energy} outside (0,1]")));
    }
    if let Some(k) = dim_override {
        if k == 0 || k > d {
            return Err(Error::InvalidConfig(format!("PCA dimension {k} outside 1..={d}")));
        }
    }
    let nt = T::lit(n as f64);
    let mut mean = vec![T::zero(); d];
    for row in x.iter_rows() {
        axpy(T::one(), row, &mut mean);
    }
    mean.iter_mut().for_each(|m| *m /= nt);
    let mut cov: Matrix<T> = Matrix::zeros(d, d);
    let mut centered = vec![T::zero(); d];
    for row in x.iter_rows() {
        for (c, (&v, &m)) in centered.iter_mut().zip(row.iter().zip(&mean)) {
            *c = v - m;
        }
        for i in 0..d {
            let ci = centered[i];
            let r = cov.row_mut(i);
            for j in i..d {
                r[j] += ci * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov.get(i, j) / nt;
            cov.set(i, j, v);
            cov.set(j, i, v);
        }
    }
    let (values, vectors) = symmetric_eigen(&cov);
    let values: Vec<T> = values.into_iter().map(|v| v.max(T::zero())).collect();
    let total: T = values.iter().copied().sum();
    let floor = T::epsilon() * T::lit(d as f64);
    if !(total > floor * mean.iter().map(|m| m.abs()).fold(T::one(), T::max)) {
        return Err(Error::DegenerateData("features have zero variance".into()));
    }
    let k = match dim_override {
        Some(k) => k,
        None => {
            let target = T::lit(target_energy);
            let slack = T::lit(1e-12);
            let mut acc = T::zero();
            let mut k = d;
            for (i, &v) in values.iter().enumerate() {
                acc += v;
                if acc / total >= target - slack {
                    k = i + 1;
                    break;
                }
            }
            k
        }
    };
    let kept: T = values[..k].iter().copied().sum();
    let components = Matrix::from_vec(k, d, vectors.as_slice()[..k * d].to_vec())?;
    Ok(PcaModel {
        mean,
        components,
        eigenvalues: values[..k].to_vec(),
        explained_ratio: (kept / total).min(T::one()),
    })
}

/// `components · (x − mean)`
pub fn pca_reduce<T: Scalar>(x: &[T], m: &PcaModel<T>) -> Result<Vec<T>> {
    if x.len() != m.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: m.input_dim(),
            got: x.len(),
        });
    }
    let centered: Vec<T> = x.iter().zip(&m.mean).map(|(&a, &b)| a - b).collect();
    Ok(m.components.mul_vec(&centered))
}

/// `componentsᵀ · x' + mean`
pub fn pca_reconstruct<T: Scalar>(x_reduced: &[T], m: &PcaModel<T>) -> Result<Vec<T>> {
    if x_reduced.len() != m.reduced_dim() {
        return Err(Error::DimensionMismatch {
            expected: m.reduced_dim(),
            got: x_reduced.len(),
        });
    }
    let mut out = m.components.tr_mul_vec(x_reduced);
    axpy(T::one(), &m.mean, &mut out);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct AtomSet<T> {
    /// `N_z × D_c'`
    pub atoms: Matrix<T>,
    pub inertia: T,
    /// Inertia after every assignment step.
    #[serde(default)]
    pub inertia_history: Vec<T>,
}

impl<T: Scalar> AtomSet<T> {
    pub fn len(&self) -> usize {
        self.atoms.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.rows() == 0
    }
}

fn nearest<T: Scalar>(x: &[T], centers: &Matrix<T>) -> (usize, T) {
    let mut best = (0, T::infinity());
    for (k, c) in centers.iter_rows().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations until the assignment stops
/// changing or `max_iters` is reached. Empty clusters are reseeded at the
/// point farthest from its current center.
pub fn kmeans_atoms<T: Scalar, R: Rng + ?Sized>(
    rx: &Matrix<T>,
    n_z: usize,
    rng: &mut R,
    max_iters: usize,
) -> Result<AtomSet<T>> {
    let n = rx.rows();
    if n_z == 0 || n < n_z {
        return Err(Error::DegenerateData(format!("k-means needs at least {n_z} rows, got {n}")));
    }
    let mut centers = Matrix::zeros(n_z, rx.cols());
    let first = rng.random_range(0..n);
    centers.row_mut(0).copy_from_slice(rx.row(first));
    let mut d2: Vec<T> = rx.iter_rows().map(|r| sq_dist(r, rx.row(first))).collect();
    for k in 1..n_z {
        let total: f64 = d2.iter().map(|v| v.to_f64_lossy()).sum();
        if !(total > 0.0) {
            return Err(Error::DegenerateData(format!(
                "fewer than {n_z} distinct points for k-means"
            )));
        }
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = n - 1;
        for (i, v) in d2.iter().enumerate() {
            acc += v.to_f64_lossy();
            if acc > target && *v > T::zero() {
                pick = i;
                break;
            }
        }
        if d2[pick] == T::zero() {
            pick = d2
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .expect("nonempty");
        }
        centers.row_mut(k).copy_from_slice(rx.row(pick));
        for (i, r) in rx.iter_rows().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, rx.row(pick)));
        }
    }

    let mut assignment = vec![usize::MAX; n];
    let mut history = Vec::new();
    let mut dists = vec![T::zero(); n];
    let mut fixpoint = false;
    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        let mut inertia = T::zero();
        for (i, r) in rx.iter_rows().enumerate() {
            let (k, d) = nearest(r, &centers);
            if assignment[i] != k {
                assignment[i] = k;
                changed = true;
            }
            dists[i] = d;
            inertia += d;
        }
        history.push(inertia);
        if !changed {
            fixpoint = true;
            break;
        }
        let mut sums = Matrix::zeros(n_z, rx.cols());
        let mut counts = vec![0usize; n_z];
        for (i, r) in rx.iter_rows().enumerate() {
            axpy(T::one(), r, sums.row_mut(assignment[i]));
            counts[assignment[i]] += 1;
        }
        for k in 0..n_z {
            if counts[k] > 0 {
                let inv = T::one() / T::lit(counts[k] as f64);
                for (c, s) in centers.row_mut(k).iter_mut().zip(sums.row(k)) {
                    *c = *s * inv;
                }
            }
        }
        for k in (0..n_z).filter(|&k| counts[k] == 0) {
            let far = dists
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .expect("nonempty");
            centers.row_mut(k).copy_from_slice(rx.row(far));
            dists[far] = T::zero();
        }
    }
    if !fixpoint {
        let inertia = rx.iter_rows().map(|r| nearest(r, &centers).1).sum();
        history.push(inertia);
    }
    Ok(AtomSet {
        atoms: centers,
        inertia: *history.last().expect("at least one iteration"),
        inertia_history: history,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ManifoldProjector<T> {
    /// `N_h × D_c'`
    pub w1: Matrix<T>,
    /// `N_h × D_c'`
    pub w2: Matrix<T>,
    pub atoms: AtomSet<T>,
    pub pca: PcaModel<T>,
}

impl<T: Scalar> ManifoldProjector<T> {
    /// Weights drawn from `U(-1/√D_c', 1/√D_c')`.
    pub fn new<R: Rng + ?Sized>(pca: PcaModel<T>, atoms: AtomSet<T>, n_h: usize, rng: &mut R) -> Result<Self> {
        let dr = pca.reduced_dim();
        let scale = 1.0 / (dr as f64).sqrt();
        let mut draw = |rows, cols| {
            let data = (0..rows * cols)
                .map(|_| T::lit(rng.random_range(-scale..=scale)))
                .collect();
            Matrix::from_vec(rows, cols, data)
        };
        let w1 = draw(n_h, dr)?;
        let w2 = draw(n_h, dr)?;
        Self::from_parts(w1, w2, atoms, pca)
    }

    pub fn from_parts(w1: Matrix<T>, w2: Matrix<T>, atoms: AtomSet<T>, pca: PcaModel<T>) -> Result<Self> {
        let dr = pca.reduced_dim();
        for m in [&w1, &w2] {
            if m.cols() != dr {
                return Err(Error::DimensionMismatch { expected: dr, got: m.cols() });
            }
        }
        if w1.rows() != w2.rows() {
            return Err(Error::DimensionMismatch { expected: w1.rows(), got: w2.rows() });
        }
        if atoms.atoms.cols() != dr || atoms.is_empty() {
            return Err(Error::DimensionMismatch { expected: dr, got: atoms.atoms.cols() });
        }
        if !(w1.is_finite() && w2.is_finite()) {
            return Err(Error::DegenerateData("projector weights must be finite".into()));
        }
        Ok(ManifoldProjector { w1, w2, atoms, pca })
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows()
    }

    /// Attention keys `W2 z_k` for every atom, `N_z × N_h`.
    fn keys(&self) -> Matrix<T> {
        let z = &self.atoms.atoms;
        let mut k = Matrix::zeros(z.rows(), self.w2.rows());
        for (a, zr) in z.iter_rows().enumerate() {
            k.row_mut(a).copy_from_slice(&self.w2.mul_vec(zr));
        }
        k
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.pca.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.pca.input_dim(),
                got: len,
            });
        }
        Ok(())
    }
}

struct Forward<T> {
    reduced: Vec<T>,
    query: Vec<T>,
    weights: Vec<T>,
    projected: Vec<T>,
    residual: Vec<T>,
}

fn forward<T: Scalar>(x: &[T], proj: &ManifoldProjector<T>, keys: &Matrix<T>) -> Forward<T> {
    let reduced = pca_reduce(x, &proj.pca).expect("checked dims");
    let query = proj.w1.mul_vec(&reduced);
    let inv_sqrt_nz = T::one() / T::lit(keys.rows() as f64).sqrt();
    let mut weights: Vec<T> = keys.iter_rows().map(|k| dot(&query, k) * inv_sqrt_nz).collect();
    softmax_in_place(&mut weights);
    let projected = proj.atoms.atoms.tr_mul_vec(&weights);
    let lifted = pca_reconstruct(&projected, &proj.pca).expect("checked dims");
    let residual = lifted.iter().zip(x).map(|(&a, &b)| a - b).collect();
    Forward {
        reduced,
        query,
        weights,
        projected,
        residual,
    }
}

/// Attention weights over atoms and the projected point `x̂' = wᵀz`.
pub fn manifold_project<T: Scalar>(x: &[T], proj: &ManifoldProjector<T>) -> Result<(Vec<T>, Vec<T>)> {
    proj.check_input(x.len())?;
    let f = forward(x, proj, &proj.keys());
    Ok((f.weights, f.projected))
}

/// `Σ_j ‖R⁻¹(x̂'_j) − x_j‖²` over the rows of `batch`.
pub fn manifold_loss<T: Scalar>(batch: &Matrix<T>, proj: &ManifoldProjector<T>) -> Result<T> {
    proj.check_input(batch.cols())?;
    let keys = proj.keys();
    let partial: Vec<T> = batch
        .as_slice()
        .par_chunks(CHUNK_ROWS * batch.cols())
        .map(|chunk| {
            chunk
                .chunks_exact(batch.cols())
                .map(|x| {
                    let f = forward(x, proj, &keys);
                    dot(&f.residual, &f.residual)
                })
                .fold(T::zero(), |a, b| a + b)
        })
        .collect();
    Ok(partial.into_iter().fold(T::zero(), |a, b| a + b))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifoldGrad<T> {
    pub loss: T,
    /// Same shape as the batch.
    pub grad_x: Matrix<T>,
    pub grad_w1: Matrix<T>,
    pub grad_w2: Matrix<T>,
}

/// Loss and exact gradients with respect to every batch row, `W1` and `W2`.
pub fn manifold_loss_grad<T: Scalar>(batch: &Matrix<T>, proj: &ManifoldProjector<T>) -> Result<ManifoldGrad<T>> {
    proj.check_input(batch.cols())?;
    let keys = proj.keys();
    let (d, nh, dr) = (batch.cols(), proj.hidden_dim(), proj.pca.reduced_dim());
    let z = &proj.atoms.atoms;
    let inv_sqrt_nz = T::one() / T::lit(z.rows() as f64).sqrt();
    let two = T::lit(2.0);

    // per chunk: loss, row gradients, and the two weight gradients
    type Partial<T> = (T, Vec<T>, Matrix<T>, Matrix<T>);
    let partial: Vec<Partial<T>> = batch
        .as_slice()
        .par_chunks(CHUNK_ROWS * d)
        .map(|chunk| {
            let mut loss = T::zero();
            let mut gx_all = Vec::with_capacity(chunk.len());
            let mut gw1 = Matrix::zeros(nh, dr);
            let mut gw2 = Matrix::zeros(nh, dr);
            for x in chunk.chunks_exact(d) {
                let f = forward(x, proj, &keys);
                loss += dot(&f.residual, &f.residual);
                // dL/dx̂' = 2 C e
                let g_proj: Vec<T> = proj
                    .pca
                    .components
                    .mul_vec(&f.residual)
                    .into_iter()
                    .map(|v| two * v)
                    .collect();
                let g_w: Vec<T> = z.iter_rows().map(|zk| dot(&g_proj, zk)).collect();
                let mean_gw = dot(&f.weights, &g_w);
                let g_logit: Vec<T> = f
                    .weights
                    .iter()
                    .zip(&g_w)
                    .map(|(&w, &g)| w * (g - mean_gw) * inv_sqrt_nz)
                    .collect();
                let g_query = keys.tr_mul_vec(&g_logit);
                let z_mix = z.tr_mul_vec(&g_logit);
                for h in 0..nh {
                    axpy(g_query[h], &f.reduced, gw1.row_mut(h));
                    axpy(f.query[h], &z_mix, gw2.row_mut(h));
                }
                let g_reduced = proj.w1.tr_mul_vec(&g_query);
                let mut gx = proj.pca.components.tr_mul_vec(&g_reduced);
                axpy(-two, &f.residual, &mut gx);
                gx_all.extend(gx);
            }
            (loss, gx_all, gw1, gw2)
        })
        .collect();

    let mut loss = T::zero();
    let mut gx = Vec::with_capacity(batch.rows() * d);
    let mut gw1 = Matrix::zeros(nh, dr);
    let mut gw2 = Matrix::zeros(nh, dr);
    for (l, g, a, b) in partial {
        loss += l;
        gx.extend(g);
        axpy(T::one(), a.as_slice(), gw1.as_mut_slice());
        axpy(T::one(), b.as_slice(), gw2.as_mut_slice());
    }
    Ok(ManifoldGrad {
        loss,
        grad_x: Matrix::from_vec(batch.rows(), d, gx)?,
        grad_w1: gw1,
        grad_w2: gw2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn identity_pca(d: usize) -> PcaModel<f64> {
        let mut c = Matrix::zeros(d, d);
        for i in 0..d {
            c.set(i, i, 1.0);
        }
        PcaModel {
            mean: vec![0.0; d],
            components: c,
            eigenvalues: vec![1.0; d],
            explained_ratio: 1.0,
        }
    }

    #[test]
    fn sampling_errors_when_nothing_is_correct() {
        let feats = Matrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let probs = Matrix::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        let err = sample_correct_features(&feats, &probs, &[1, 0], 1, &mut seeded(0));
        assert!(matches!(err, Err(Error::InsufficientCorrectPixels { available: 0, .. })));
    }

    #[test]
    fn sampling_everything_returns_each_row_once() {
        let feats = Matrix::from_rows(&(0..10).map(|i| vec![i as f64]).collect::<Vec<_>>()).unwrap();
        let probs = Matrix::from_rows(&vec![vec![1.0, 0.0]; 10]).unwrap();
        let out = sample_correct_features(&feats, &probs, &[0; 10], 10, &mut seeded(5)).unwrap();
        let mut v: Vec<f64> = out.as_slice().to_vec();
        v.sort_by(f64::total_cmp);
        assert_eq!(v, (0..10).map(|i| i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn jacobi_diagonalizes() {
        let a: Matrix<f64> = Matrix::from_rows(&[vec![4.0, 1.0, 0.5], vec![1.0, 3.0, 0.2], vec![0.5, 0.2, 1.0]]).unwrap();
        let (vals, vecs) = symmetric_eigen(&a);
        assert!(vals.windows(2).all(|w| w[0] >= w[1]));
        for (k, &l) in vals.iter().enumerate() {
            let v = vecs.row(k);
            let av = a.mul_vec(v);
            for i in 0..3 {
                assert!((av[i] - l * v[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reduce_of_mean_is_zero_and_dims_checked() {
        let x: Matrix<f64> = Matrix::from_rows(&[vec![1.0, 0.0, 2.0], vec![-1.0, 1.0, 0.0], vec![0.0, 2.0, 1.0], vec![3.0, 1.0, -1.0]]).unwrap();
        let m = fit_pca(&x, 0.9, None).unwrap();
        let r = pca_reduce(&m.mean, &m).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-12));
        assert!(pca_reduce(&[1.0], &m).is_err());
        assert!(pca_reconstruct(&[1.0; 7], &m).is_err());
    }

    #[test]
    fn zero_variance_rejected() {
        let x = Matrix::from_rows(&vec![vec![1.0, 2.0]; 5]).unwrap();
        assert!(matches!(fit_pca(&x, 0.9, None), Err(Error::DegenerateData(_))));
    }

    #[test]
    fn kmeans_distinct_points_are_recovered() {
        let pts = vec![vec![0.0, 0.0], vec![5.0, 0.0], vec![0.0, 5.0], vec![5.0, 0.0], vec![0.0, 0.0]];
        let m = Matrix::from_rows(&pts).unwrap();
        let atoms = kmeans_atoms(&m, 3, &mut seeded(2), 50).unwrap();
        assert_eq!(atoms.inertia, 0.0);
        let mut rows: Vec<Vec<f64>> = atoms.atoms.iter_rows().map(<[f64]>::to_vec).collect();
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(rows, vec![vec![0.0, 0.0], vec![0.0, 5.0], vec![5.0, 0.0]]);
    }

    #[test]
    fn kmeans_too_few_distinct_points() {
        let m = Matrix::from_rows(&vec![vec![1.0, 1.0]; 4]).unwrap();
        assert!(kmeans_atoms(&m, 2, &mut seeded(0), 10).is_err());
    }

    #[test]
    fn singleton_atom_projection() {
        let atoms = AtomSet {
            atoms: Matrix::from_rows(&[vec![0.3, -0.2]]).unwrap(),
            inertia: 0.0,
            inertia_history: vec![],
        };
        let proj = ManifoldProjector::new(identity_pca(2), atoms, 4, &mut seeded(1)).unwrap();
        let (w, xh) = manifold_project(&[10.0, 3.0], &proj).unwrap();
        assert_eq!(w, vec![1.0]);
        assert_eq!(xh, vec![0.3, -0.2]);
        let batch = Matrix::from_rows(&[vec![0.3, -0.2]]).unwrap();
        assert_eq!(manifold_loss(&batch, &proj).unwrap(), 0.0);
        let g = manifold_loss_grad(&batch, &proj).unwrap();
        assert!(g.grad_x.as_slice().iter().chain(g.grad_w1.as_slice()).chain(g.grad_w2.as_slice()).all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn zero_weights_give_uniform_attention() {
        let atoms = AtomSet {
            atoms: Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap(),
            inertia: 0.0,
            inertia_history: vec![],
        };
        let proj = ManifoldProjector::from_parts(Matrix::zeros(3, 2), Matrix::zeros(3, 2), atoms, identity_pca(2)).unwrap();
        let (w, xh) = manifold_project(&[0.7, -4.0], &proj).unwrap();
        for v in &w {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((xh[0] - 2.0 / 3.0).abs() < 1e-15 && (xh[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!(manifold_project(&[1.0], &proj).is_err());
    }
}
