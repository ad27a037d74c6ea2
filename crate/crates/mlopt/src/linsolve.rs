//! Symmetric positive definite solves for the implicit-differentiation systems.
//!
//! Two routes: a direct Cholesky factorization, and a truncated conjugate
//! gradient run column by column. The truncated route mirrors the few-iteration
//! regime used by the experiment drivers (3 iterations by default), where the
//! solve is an approximation whose quality is part of the method being studied,
//! so the iteration cap and early-exit tolerance are explicit configuration.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolveKind {
    Direct,
    Cg,
}

/// How SPD systems are solved. `tikhonov` adds `shift * I` to the matrix
/// before solving; it defaults to 0 and is never applied implicitly.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SolveMode {
    pub kind: SolveKind,
    pub cg_iters: usize,
    pub cg_tol: f64,
    pub tikhonov: f64,
}

impl Default for SolveMode {
    fn default() -> Self {
        SolveMode::direct()
    }
}

impl SolveMode {
    pub fn direct() -> Self {
        SolveMode { kind: SolveKind::Direct, cg_iters: 3, cg_tol: 1e-10, tikhonov: 0.0 }
    }

    pub fn cg(iters: usize) -> Self {
        SolveMode { kind: SolveKind::Cg, cg_iters: iters, cg_tol: 1e-10, tikhonov: 0.0 }
    }

    pub fn with_tikhonov(mut self, shift: f64) -> Self {
        self.tikhonov = shift;
        self
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
/// Only the lower triangle of `a` is read. On failure the error carries the
/// index of the first non-positive pivot.
fn cholesky(a: &Array2<f64>, context: &str) -> Result<Array2<f64>> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut diag = a[[j, j]];
        for k in 0..j {
            diag -= l[[j, k]] * l[[j, k]];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(Error::SingularHessian { context: context.to_string(), pivot: j });
        }
        let dsqrt = diag.sqrt();
        l[[j, j]] = dsqrt;
        for i in (j + 1)..n {
            let mut v = a[[i, j]];
            for k in 0..j {
                v -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = v / dsqrt;
        }
    }
    Ok(l)
}

fn forward_sub(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut y = Array1::zeros(n);
    for i in 0..n {
        let mut v = b[i];
        for k in 0..i {
            v -= l[[i, k]] * y[k];
        }
        y[i] = v / l[[i, i]];
    }
    y
}

fn backward_sub(l: &Array2<f64>, y: &Array1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = Array1::zeros(n);
    for i in (0..n).rev() {
        let mut v = y[i];
        for k in (i + 1)..n {
            v -= l[[k, i]] * x[k];
        }
        x[i] = v / l[[i, i]];
    }
    x
}

/// Conjugate gradient from the zero start, capped at `min(iters, dim)` steps
/// with early exit once `||r||_2 <= tol * (1 + ||b||_2)`. No preconditioner.
fn cg_column(
    a: &Array2<f64>,
    b: &Array1<f64>,
    iters: usize,
    tol: f64,
    context: &str,
) -> Result<Array1<f64>> {
    let n = b.len();
    let mut x = Array1::<f64>::zeros(n);
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rr = r.dot(&r);
    let exit = tol * (1.0 + b.dot(b).sqrt());
    for it in 0..iters.min(n) {
        if rr.sqrt() <= exit {
            break;
        }
        let ap = a.dot(&p);
        let pap = p.dot(&ap);
        if !(pap > 0.0) || !pap.is_finite() {
            return Err(Error::SingularHessian { context: context.to_string(), pivot: it });
        }
        let alpha = rr / pap;
        x = &x + &(&p * alpha);
        r = &r - &(&ap * alpha);
        let rr_next = r.dot(&r);
        let beta = rr_next / rr;
        p = &r + &(&p * beta);
        rr = rr_next;
    }
    Ok(x)
}

fn checked_square(a: &Array2<f64>, context: &str) -> Result<usize> {
    let (n, m) = a.dim();
    if n != m {
        return Err(Error::shape(context, format!("square"), format!("{n}x{m}")));
    }
    if !a.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { context: context.to_string() });
    }
    Ok(n)
}

/// Solves `A X = B` for symmetric positive definite `A` (shape `d x d`) and
/// right-hand side `B` (shape `d x k`). Symmetry is the caller's contract;
/// definiteness is verified by the direct route and by the positivity of the
/// CG curvature terms.
pub fn solve_spd(a: &Array2<f64>, b: &Array2<f64>, mode: &SolveMode) -> Result<Array2<f64>> {
    solve_spd_ctx(a, b, mode, "solve_spd")
}

/// [`solve_spd`] with the caller's operation name woven into any error.
pub fn solve_spd_ctx(
    a: &Array2<f64>,
    b: &Array2<f64>,
    mode: &SolveMode,
    context: &str,
) -> Result<Array2<f64>> {
    let n = checked_square(a, context)?;
    if b.nrows() != n {
        return Err(Error::shape(context, format!("{n} rows"), format!("{} rows", b.nrows())));
    }
    let shifted;
    let a = if mode.tikhonov != 0.0 {
        shifted = a + &(Array2::<f64>::eye(n) * mode.tikhonov);
        &shifted
    } else {
        a
    };
    let mut x = Array2::<f64>::zeros(b.dim());
    match mode.kind {
        SolveKind::Direct => {
            let l = cholesky(a, context)?;
            for (j, col) in b.columns().into_iter().enumerate() {
                let y = forward_sub(&l, &col.to_owned());
                x.column_mut(j).assign(&backward_sub(&l, &y));
            }
        }
        SolveKind::Cg => {
            for (j, col) in b.columns().into_iter().enumerate() {
                let sol = cg_column(a, &col.to_owned(), mode.cg_iters, mode.cg_tol, context)?;
                x.column_mut(j).assign(&sol);
            }
        }
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { context: context.to_string() });
    }
    Ok(x)
}

/// Convenience single-column solve.
pub fn solve_spd_vec(a: &Array2<f64>, b: &Array1<f64>, mode: &SolveMode) -> Result<Array1<f64>> {
    let b2 = b.clone().insert_axis(ndarray::Axis(1));
    Ok(solve_spd(a, &b2, mode)?.column(0).to_owned())
}

/// Max-norm residual `||A X - B||_inf`, the quantity bounded by the direct
/// route's post-condition `<= 1e-8 * (1 + ||B||_inf)` on well-conditioned
/// systems.
pub fn residual_inf(a: &Array2<f64>, x: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let r = &a.dot(x) - b;
    r.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Whether `a` is symmetric within `1e-8 * (1 + max_abs)` and admits a
/// Cholesky factorization.
pub fn is_spd(a: &Array2<f64>) -> bool {
    let (n, m) = a.dim();
    if n != m || !a.iter().all(|v| v.is_finite()) {
        return false;
    }
    let scale = a.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let tol = 1e-8 * (1.0 + scale);
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[[i, j]] - a[[j, i]]).abs() > tol {
                return false;
            }
        }
    }
    cholesky(a, "is_spd").is_ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Array2::from_shape_fn((n, n), |_| rng.random_range(-1.0..1.0));
        g.t().dot(&g) + Array2::<f64>::eye(n)
    }

    #[test]
    fn identity_solved_in_one_cg_iteration() {
        let a = Array2::<f64>::eye(3);
        let b = array![[1.0], [2.0], [-3.0]];
        let x = solve_spd(&a, &b, &SolveMode::cg(1)).unwrap();
        assert_eq!(residual_inf(&a, &x, &b), 0.0);
    }

    #[test]
    fn two_distinct_eigenvalues_need_two_cg_iterations() {
        let a = array![[1.0, 0.0], [0.0, 2.0]];
        let b = array![[1.0], [1.0]];
        let x = solve_spd(&a, &b, &SolveMode::cg(2)).unwrap();
        assert!(residual_inf(&a, &x, &b) < 1e-12);
    }

    #[test]
    fn scalar_direct_and_cg_agree() {
        let a = array![[2.0]];
        let b = array![[1.0]];
        let xd = solve_spd(&a, &b, &SolveMode::direct()).unwrap();
        let xc = solve_spd(&a, &b, &SolveMode::cg(3)).unwrap();
        assert!((xd[[0, 0]] - 0.5).abs() < 1e-15);
        assert_eq!(xc[[0, 0]], 0.5);
    }

    #[test]
    fn direct_post_condition_on_random_spd() {
        for seed in 0..5 {
            let a = random_spd(6, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let b = Array2::from_shape_fn((6, 2), |_| rng.random_range(-2.0..2.0));
            let x = solve_spd(&a, &b, &SolveMode::direct()).unwrap();
            let scale = 1.0 + b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(residual_inf(&a, &x, &b) <= 1e-8 * scale);
        }
    }

    #[test]
    fn full_cg_matches_direct() {
        let a = random_spd(5, 7);
        let b = array![[1.0], [0.0], [-1.0], [2.0], [0.5]];
        let xd = solve_spd(&a, &b, &SolveMode::direct()).unwrap();
        let xc = solve_spd(&a, &b, &SolveMode::cg(5)).unwrap();
        let dev = (&xd - &xc).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(dev < 1e-7, "deviation {dev}");
    }

    #[test]
    fn cg_residual_never_increases_with_budget() {
        let a = random_spd(6, 11);
        let b = Array2::from_shape_fn((6, 1), |(i, _)| (i as f64) - 2.5);
        let mut prev = f64::INFINITY;
        for iters in 1..=6 {
            let x = solve_spd(&a, &b, &SolveMode::cg(iters)).unwrap();
            let r = residual_inf(&a, &x, &b);
            assert!(r <= prev + 1e-12, "iters {iters}: {r} > {prev}");
            prev = r;
        }
    }

    #[test]
    fn inverse_via_identity_rhs() {
        let a = random_spd(4, 3);
        let eye = Array2::<f64>::eye(4);
        let inv = solve_spd(&a, &eye, &SolveMode::direct()).unwrap();
        let dev = (&a.dot(&inv) - &eye).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(dev < 1e-8, "deviation {dev}");
    }

    #[test]
    fn non_pd_reports_failing_pivot() {
        let a = array![[1.0, 0.0], [0.0, -1.0]];
        let b = array![[1.0], [1.0]];
        match solve_spd(&a, &b, &SolveMode::direct()) {
            Err(Error::SingularHessian { pivot, .. }) => assert_eq!(pivot, 1),
            other => panic!("expected pivot failure, got {other:?}"),
        }
    }

    #[test]
    fn tikhonov_shift_rescues_singular_matrix() {
        let a = array![[1.0, 1.0], [1.0, 1.0]];
        let b = array![[1.0], [1.0]];
        assert!(solve_spd(&a, &b, &SolveMode::direct()).is_err());
        let x = solve_spd(&a, &b, &SolveMode::direct().with_tikhonov(1e-6)).unwrap();
        assert!(x.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn is_spd_examples() {
        assert!(is_spd(&array![[2.0, 0.0], [0.0, 3.0]]));
        assert!(!is_spd(&array![[0.0, 1.0], [1.0, 0.0]]));
        assert!(!is_spd(&array![[1.0, 2.0], [2.0, 1.0]]));
        assert!(!is_spd(&array![[1.0, 0.5], [0.0, 1.0]]));
    }

    #[test]
    fn shape_errors_are_structural() {
        let a = array![[1.0, 0.0]];
        let b = array![[1.0]];
        assert!(matches!(
            solve_spd(&a, &b, &SolveMode::direct()),
            Err(Error::Structure { .. })
        ));
    }
}
