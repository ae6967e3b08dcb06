mod support;

use rand::Rng;
use stfv::gmm::{gmm_fit_em, GmmModel, GmmTrainConfig};
use stfv::preprocess::pca_fit;
use support::*;

fn clustered_points(seed: u64, n: usize, dim: usize, centres: usize) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    let mus: Vec<Vec<f64>> = (0..centres)
        .map(|_| (0..dim).map(|_| 4.0 * normal(&mut r)).collect())
        .collect();
    (0..n)
        .map(|i| mus[i % centres].iter().map(|m| m + normal(&mut r)).collect())
        .collect()
}

#[test]
fn em_log_likelihood_never_decreases() {
    for seed in 0..20u64 {
        let points = clustered_points(100 + seed, 600, 3, 4);
        let cfg = GmmTrainConfig { k: 5, max_iter: 60, seed, ..GmmTrainConfig::default() };
        let fit = gmm_fit_em(&points, &cfg).unwrap();
        for w in fit.log_likelihood.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "seed {seed}: {} -> {}", w[0], w[1]);
        }
    }
}

#[test]
fn em_is_deterministic_across_thread_counts() {
    let points = clustered_points(7, 20_000, 4, 6);
    let cfg = GmmTrainConfig { k: 8, max_iter: 15, seed: 3, ..GmmTrainConfig::default() };
    let fit_with = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| gmm_fit_em(&points, &cfg).unwrap())
    };
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.gmm"), dir.path().join("b.gmm"));
    fit_with(1).model.save(&a).unwrap();
    fit_with(4).model.save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let reloaded = GmmModel::load(&a).unwrap();
    assert_eq!(reloaded.k, 8);
}

fn random_correlated(seed: u64, n: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    let mix: Vec<f64> = (0..dim * dim).map(|_| r.random_range(-1.0..1.0)).collect();
    (0..n)
        .map(|_| {
            let z: Vec<f64> = (0..dim).map(|_| normal(&mut r)).collect();
            (0..dim)
                .map(|i| (0..dim).map(|j| mix[i * dim + j] * z[j]).sum::<f64>() + 3.0)
                .collect()
        })
        .collect()
}

#[test]
fn pca_basis_is_orthonormal() {
    for seed in 0..10 {
        let data = random_correlated(seed, 200, 6);
        let m = pca_fit(&data, 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let dot: f64 = m.basis_row(i).iter().zip(m.basis_row(j)).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() <= 1e-10);
            }
        }
    }
}

#[test]
fn pca_residual_energy_equals_discarded_variance() {
    for seed in 0..10 {
        let (n, dim, keep) = (300, 5, 2);
        let data = random_correlated(50 + seed, n, dim);
        let m = pca_fit(&data, keep).unwrap();
        // Total variance from the raw data, independent of the eigensolver.
        let mean: Vec<f64> = (0..dim).map(|d| data.iter().map(|x| x[d]).sum::<f64>() / n as f64).collect();
        let total: f64 = data
            .iter()
            .map(|x| x.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .sum::<f64>()
            / (n - 1) as f64;
        let discarded = total - m.eigenvalues.iter().sum::<f64>();
        let residual: f64 = data
            .iter()
            .map(|x| {
                let back = m.reconstruct(&m.transform(x).unwrap());
                x.iter().zip(&back).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            })
            .sum::<f64>()
            / (n - 1) as f64;
        assert!((residual - discarded).abs() <= 1e-6 * discarded);
    }
}
