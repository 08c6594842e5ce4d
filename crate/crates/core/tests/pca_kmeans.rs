//! PCA and k-means on planted fixtures.

mod common;

use common::*;
use domalign::gma::{fit_pca, kmeans_atoms, pca_reconstruct, pca_reduce, symmetric_eigen};
use domalign::rng::seeded;
use domalign::Matrix;
use proptest::prelude::*;
use rand::Rng;

/// `n` points on a rank-`r` affine subspace of `R^d`.
fn low_rank(seed: u64, n: usize, d: usize, r: usize) -> (Matrix<f64>, Matrix<f64>) {
    let mut rng = seeded(seed);
    let basis = orthonormal_rows(&mut rng, r, d);
    let offset: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let coef: Vec<f64> = (0..r).map(|i| rng.random_range(-1.0..1.0) * (r - i) as f64).collect();
        let mut x = offset.clone();
        for (i, c) in coef.iter().enumerate() {
            for j in 0..d {
                x[j] += c * basis.get(i, j);
            }
        }
        rows.push(x);
    }
    (Matrix::from_rows(&rows).unwrap(), basis)
}

#[test]
fn planted_low_rank_is_recovered() {
    for (seed, d, r) in [(1, 6, 2), (2, 8, 3), (3, 5, 1), (4, 12, 4)] {
        let (x, basis) = low_rank(seed, 200, d, r);
        let model = fit_pca(&x, 0.9999, None).unwrap();
        assert_eq!(model.reduced_dim(), r, "seed {seed}");
        assert!(model.explained_ratio > 1.0 - 1e-9);
        for row in x.iter_rows() {
            let back = pca_reconstruct(&pca_reduce(row, &model).unwrap(), &model).unwrap();
            for (a, b) in back.iter().zip(row) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        // every planted direction lies in the recovered span
        for i in 0..r {
            let v = basis.row(i);
            let coords = model.components.mul_vec(v);
            let norm2: f64 = coords.iter().map(|c| c * c).sum();
            assert!((norm2 - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn energy_rule_on_random_fixtures() {
    for seed in 0..30 {
        let mut rng = seeded(100 + seed);
        let d = rng.random_range(2..10);
        let scales: Vec<f64> = (0..d).map(|_| rng.random_range(0.01..3.0)).collect();
        let rows: Vec<Vec<f64>> = (0..100)
            .map(|_| scales.iter().map(|s| s * rng.random_range(-1.0..1.0)).collect())
            .collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let model = fit_pca(&x, 0.9, None).unwrap();
        assert!(model.explained_ratio >= 0.9, "seed {seed}: {}", model.explained_ratio);
        if model.reduced_dim() > 1 {
            let smaller = fit_pca(&x, 0.9, Some(model.reduced_dim() - 1)).unwrap();
            assert!(smaller.explained_ratio < 0.9);
        }
        assert!(model.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    }
}

#[test]
fn jacobi_matches_closed_form_2x2() {
    let mut rng = seeded(7);
    for _ in 0..100 {
        let (a, b, c): (f64, f64, f64) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let m = Matrix::from_rows(&[vec![a, b], vec![b, c]]).unwrap();
        let (values, vectors) = symmetric_eigen(&m);
        let mid = 0.5 * (a + c);
        let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
        assert!((values[0] - (mid + rad)).abs() < 1e-12);
        assert!((values[1] - (mid - rad)).abs() < 1e-12);
        for k in 0..2 {
            let v = vectors.row(k);
            let mv = m.mul_vec(v);
            assert!((mv[0] - values[k] * v[0]).abs() < 1e-10 && (mv[1] - values[k] * v[1]).abs() < 1e-10);
        }
    }
}

#[test]
fn two_blobs_are_recovered_exactly() {
    let mut rows = Vec::new();
    let blobs = [[0.0, 0.0, 0.0], [10.0, -5.0, 3.0]];
    let mut rng = seeded(3);
    for (i, c) in blobs.iter().enumerate() {
        for _ in 0..20 + 5 * i {
            rows.push(c.iter().map(|v| v + rng.random_range(-0.5..0.5)).collect::<Vec<f64>>());
        }
    }
    let x = Matrix::from_rows(&rows).unwrap();
    for seed in 0..10 {
        let atoms = kmeans_atoms(&x, 2, &mut seeded(seed), 100).unwrap();
        let (first, second) = (&rows[..20], &rows[20..]);
        let mean = |pts: &[Vec<f64>]| -> Vec<f64> {
            (0..3).map(|j| pts.iter().map(|p| p[j]).sum::<f64>() / pts.len() as f64).collect()
        };
        let (m0, m1) = (mean(first), mean(second));
        let found: Vec<&[f64]> = atoms.atoms.iter_rows().collect();
        let matches = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
        assert!(
            (matches(found[0], &m0) && matches(found[1], &m1)) || (matches(found[0], &m1) && matches(found[1], &m0)),
            "seed {seed}: {found:?}"
        );
    }
}

#[test]
fn planted_clusters_are_recovered() {
    let centers: [[f64; 2]; 4] = [[5.0, 0.0], [-5.0, 0.0], [0.0, 5.0], [0.0, -5.0]];
    let mut rows = Vec::new();
    let mut rng = seeded(4);
    for c in &centers {
        for _ in 0..25 {
            rows.push(vec![c[0] + rng.random_range(-0.3..0.3), c[1] + rng.random_range(-0.3..0.3)]);
        }
    }
    let x = Matrix::from_rows(&rows).unwrap();
    let atoms = kmeans_atoms(&x, 4, &mut seeded(0), 100).unwrap();
    for c in &centers {
        let nearest = atoms
            .atoms
            .iter_rows()
            .map(|a| (a[0] - c[0]).powi(2) + (a[1] - c[1]).powi(2))
            .fold(f64::INFINITY, f64::min);
        assert!(nearest < 0.1, "{c:?} not recovered: {:?}", atoms.atoms);
    }
}

#[test]
fn too_few_distinct_points_is_an_error() {
    let x = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
    assert!(kmeans_atoms(&x, 2, &mut seeded(0), 10).is_err());
}

proptest! {
    #[test]
    fn inertia_never_increases(seed in 0u64..5000, k in 1usize..6) {
        let mut rng = seeded(seed);
        let x = random_matrix(&mut rng, 40, 3, 1.0);
        let atoms = kmeans_atoms(&x, k, &mut rng, 50).unwrap();
        let monotone = atoms.inertia_history.windows(2).all(|w| w[1] <= w[0] + 1e-12);
        prop_assert!(monotone, "{:?}", atoms.inertia_history);
        prop_assert_eq!(atoms.len(), k);
    }

    #[test]
    fn pca_components_are_orthonormal(seed in 0u64..5000) {
        let mut rng = seeded(seed);
        let x = random_matrix(&mut rng, 30, 5, 1.0);
        let m = fit_pca(&x, 1.0, None).unwrap();
        for i in 0..m.reduced_dim() {
            for j in 0..m.reduced_dim() {
                let dot: f64 = m.components.row(i).iter().zip(m.components.row(j)).map(|(a, b)| a * b).sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                prop_assert!((dot - expected).abs() < 1e-10);
            }
        }
    }
}
