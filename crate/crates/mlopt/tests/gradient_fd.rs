//! Hypergradients on random quadratic chains checked against central
//! differences of the exact reduced objective. The reduction is computed by
//! block elimination, so the reference is independent of every solver path
//! under test.

use mlopt::nlevel::{build_table, grad_full, TableConfig};
use mlopt::synthetic::QuadraticProblem;
use mlopt::trilevel::{grad_trilevel, TrilevelConfig};
use ndarray::Array1;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fd_reduced_grad(q: &QuadraticProblem, x0: &Array1<f64>, h: f64) -> Array1<f64> {
    let mut g = Array1::zeros(x0.len());
    for k in 0..x0.len() {
        let mut hi = x0.clone();
        hi[k] += h;
        let mut lo = x0.clone();
        lo[k] -= h;
        g[k] = (q.reduced_value(&hi).unwrap() - q.reduced_value(&lo).unwrap()) / (2.0 * h);
    }
    g
}

fn rel_dev(got: &Array1<f64>, want: &Array1<f64>) -> f64 {
    let diff = (got - want).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    diff / (1.0 + scale)
}

#[test]
fn trilevel_gradient_matches_fd_of_exact_reduction() {
    let cfg = TrilevelConfig::default();
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let dims: Vec<usize> = (0..3).map(|_| rng.random_range(1..=6)).collect();
        let q = QuadraticProblem::chain(seed, &dims).unwrap();
        let x0 = Array1::from_shape_fn(dims[0], |_| rng.random_range(-0.5..0.5));
        let point = q.respond(&x0).unwrap();

        let g = grad_trilevel(
            q.problem.objective(0),
            q.problem.objective(1),
            q.problem.objective(2),
            &point,
            &cfg,
        )
        .unwrap();
        let fd = fd_reduced_grad(&q, &x0, 1e-5);
        let dev = rel_dev(&g, &fd);
        assert!(dev <= 1e-5, "seed {seed} dims {dims:?}: relative deviation {dev:.3e}");
    }
}

#[test]
fn four_level_gradient_matches_fd_of_exact_reduction() {
    let cfg = TableConfig::default();
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let dims: Vec<usize> = (0..4).map(|_| rng.random_range(1..=5)).collect();
        let q = QuadraticProblem::chain(seed, &dims).unwrap();
        let x0 = Array1::from_shape_fn(dims[0], |_| rng.random_range(-0.5..0.5));
        let point = q.respond(&x0).unwrap();

        let table = build_table(&q.problem, &point, &cfg).unwrap();
        let g = grad_full(&q.problem, &point, &table).unwrap();
        let fd = fd_reduced_grad(&q, &x0, 1e-5);
        let dev = rel_dev(&g, &fd);
        assert!(dev <= 1e-5, "seed {seed} dims {dims:?}: relative deviation {dev:.3e}");
    }
}
