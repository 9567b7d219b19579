use std::collections::HashMap;

use marketsift::gmm::{assign_clusters, fit_gmm, parameter_count, select_g_bic, GmmConfig};
use marketsift::seeding::rng_from;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian_rows(seed: u64, n: usize, d: usize, centres: &[f64]) -> Vec<Vec<f64>> {
    let mut rng = rng_from(seed);
    (0..n)
        .map(|_| {
            let c = centres[rng.random_range(0..centres.len())];
            (0..d)
                .map(|j| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z + if j == 0 { c } else { 0.0 }
                })
                .collect()
        })
        .collect()
}

fn cfg(seed: u64) -> GmmConfig {
    GmmConfig {
        seed,
        restarts: 4,
        ..GmmConfig::default()
    }
}

#[test]
fn em_log_likelihood_never_decreases() {
    for seed in 0..6 {
        let rows = gaussian_rows(seed, 300, 2, &[-3.0, 3.0]);
        for g in 1..=4 {
            let m = fit_gmm(&rows, g, &cfg(seed)).unwrap();
            for w in m.log_likelihood_trace.windows(2) {
                assert!(w[1] - w[0] >= -1e-9, "seed {seed} G {g}: {} -> {}", w[0], w[1]);
            }
        }
    }
}

#[test]
fn single_component_matches_closed_form() {
    let rows = gaussian_rows(3, 400, 3, &[1.5]);
    let c = cfg(0);
    let m = fit_gmm(&rows, 1, &c).unwrap();
    let n = rows.len() as f64;
    let d = 3;
    let x = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
    let mean: DVector<f64> = x.row_mean().transpose();
    let centred = DMatrix::from_fn(rows.len(), d, |i, j| x[(i, j)] - mean[j]);
    let scatter = centred.transpose() * &centred / n;
    let ridge = c.ridge * scatter.trace() / d as f64;
    let cov = &scatter + DMatrix::identity(d, d) * ridge;

    for j in 0..d {
        assert!((m.means[0][j] - mean[j]).abs() <= 1e-8);
        for k in 0..d {
            assert!((m.covariances[0][(j, k)] - cov[(j, k)]).abs() <= 1e-8);
        }
    }
    assert!((m.weights[0] - 1.0).abs() <= 1e-12);

    let inv = cov.clone().try_inverse().unwrap();
    let log_norm = -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + cov.determinant().ln());
    let ll: f64 = (0..rows.len())
        .map(|i| {
            let z = x.row(i).transpose() - &mean;
            log_norm - 0.5 * (z.transpose() * &inv * &z)[(0, 0)]
        })
        .sum();
    assert!((m.log_likelihood - ll).abs() <= 1e-8 * ll.abs(), "{} vs {ll}", m.log_likelihood);
}

#[test]
fn bic_recovers_the_true_component_count() {
    let mut two = 0;
    let mut one = 0;
    for seed in 0..10 {
        // Unit-variance blobs six standard deviations apart.
        let sep = gaussian_rows(seed, 400, 2, &[-3.0, 3.0]);
        two += usize::from(select_g_bic(&sep, &cfg(seed)).unwrap().best.components() == 2);
        let single = gaussian_rows(seed + 50, 400, 2, &[0.0]);
        one += usize::from(select_g_bic(&single, &cfg(seed)).unwrap().best.components() == 1);
    }
    assert!(two >= 9, "two-blob hits {two}/10");
    assert!(one >= 9, "single-blob hits {one}/10");
}

#[test]
fn partition_is_invariant_under_component_relabeling() {
    let rows = gaussian_rows(8, 300, 2, &[-4.0, 0.0, 4.0]);
    let m = fit_gmm(&rows, 3, &cfg(1)).unwrap();
    let base = assign_clusters(&m, &rows, 1).unwrap().hard_labels;
    for order in [[1, 2, 0], [2, 0, 1], [0, 2, 1]] {
        let p = assign_clusters(&m.permuted(&order), &rows, 1).unwrap().hard_labels;
        let mut map = HashMap::new();
        for (a, b) in base.iter().zip(&p) {
            assert_eq!(*map.entry(*a).or_insert(*b), *b, "order {order:?}");
        }
        assert_eq!(map.len(), 3);
    }
}

#[test]
fn parameter_count_closed_form() {
    for d in [1usize, 2, 8] {
        for g in 1..=4usize {
            assert_eq!(parameter_count(g, d), (g - 1) + g * d + g * d * (d + 1) / 2);
        }
    }
    assert_eq!(parameter_count(2, 8), 1 + 16 + 72);
}

#[test]
fn fits_are_bitwise_deterministic() {
    let rows = gaussian_rows(4, 250, 3, &[-3.0, 3.0]);
    let a = select_g_bic(&rows, &cfg(9)).unwrap();
    let b = select_g_bic(&rows, &cfg(9)).unwrap();
    assert_eq!(a.best, b.best);
    assert_eq!(a.table, b.table);
}
