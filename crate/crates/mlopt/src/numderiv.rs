//! Central finite differences over stacked points.
//!
//! These routines are deliberately independent of the implicit-differentiation
//! machinery: they only ever call objective *values* (or a user-supplied map)
//! and serve as the reference oracle in tests, plus as the fallback when
//! analytic higher-order derivatives are unavailable.
//!
//! Per-coordinate step: `h_k = step_abs + step_rel * |x_k|`, giving the usual
//! O(h^2) truncation error of the symmetric difference.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::model::{DerivativeOracle, PointStack};

#[derive(Clone, Copy, Debug)]
pub struct FdConfig {
    pub step_abs: f64,
    pub step_rel: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig { step_abs: 1e-5, step_rel: 1e-5 }
    }
}

impl FdConfig {
    pub fn with_step(step: f64) -> Self {
        FdConfig { step_abs: step, step_rel: step }
    }

    pub fn step_for(&self, coord: f64) -> f64 {
        self.step_abs + self.step_rel * coord.abs()
    }
}

/// Central-difference gradient of a scalar function of the stack with respect
/// to level `j`.
pub fn fd_grad_of<F>(f: F, point: &PointStack, j: usize, cfg: &FdConfig) -> Result<Array1<f64>>
where
    F: Fn(&PointStack) -> Result<f64>,
{
    let d = point.level(j).len();
    let mut grad = Array1::zeros(d);
    let mut work = point.clone();
    for k in 0..d {
        let base = point.level(j)[k];
        let h = cfg.step_for(base);
        let mut v = point.level(j).clone();
        v[k] = base + h;
        work.set_level(j, v.clone())?;
        let plus = f(&work)?;
        v[k] = base - h;
        work.set_level(j, v.clone())?;
        let minus = f(&work)?;
        v[k] = base;
        work.set_level(j, v)?;
        let g = (plus - minus) / (2.0 * h);
        if !g.is_finite() {
            return Err(Error::NonFinite { context: format!("fd_grad_of level {j} coord {k}") });
        }
        grad[k] = g;
    }
    Ok(grad)
}

/// Central-difference gradient of an oracle's value with respect to level `j`.
pub fn fd_grad_block(
    f: &dyn DerivativeOracle,
    point: &PointStack,
    j: usize,
    cfg: &FdConfig,
) -> Result<Array1<f64>> {
    fd_grad_of(|p| f.value(p), point, j, cfg)
}

/// Second-derivative block `d2 f / d(x_r) d(x_c)` of shape
/// `dims[r] x dims[c]`, built as nested central differences of the
/// finite-difference gradient. The symmetric pair is averaged when `r == c`.
pub fn fd_hess_block(
    f: &dyn DerivativeOracle,
    point: &PointStack,
    r: usize,
    c: usize,
    cfg: &FdConfig,
) -> Result<Array2<f64>> {
    fd_hess_of(|p| f.value(p), point, r, c, cfg)
}

/// Closure-based version of [`fd_hess_block`].
pub fn fd_hess_of<F>(
    f: F,
    point: &PointStack,
    r: usize,
    c: usize,
    cfg: &FdConfig,
) -> Result<Array2<f64>>
where
    F: Fn(&PointStack) -> Result<f64>,
{
    let dr = point.level(r).len();
    let dc = point.level(c).len();
    let mut hess = Array2::zeros((dr, dc));
    let mut work = point.clone();
    for b in 0..dc {
        let base = point.level(c)[b];
        let h = cfg.step_for(base);
        let mut v = point.level(c).clone();
        v[b] = base + h;
        work.set_level(c, v.clone())?;
        let g_plus = fd_grad_of(&f, &work, r, cfg)?;
        v[b] = base - h;
        work.set_level(c, v.clone())?;
        let g_minus = fd_grad_of(&f, &work, r, cfg)?;
        v[b] = base;
        work.set_level(c, v)?;
        let col = (&g_plus - &g_minus) / (2.0 * h);
        hess.column_mut(b).assign(&col);
    }
    if r == c {
        hess = (&hess + &hess.t()) / 2.0;
    }
    Ok(hess)
}

/// Jacobian of a vector-valued map by central differences: entry `[i, k]` is
/// `d m_i / d x_k`, so the result has shape `m(x).len() x x.len()`.
pub fn fd_jacobian_of_map<M>(map: M, x: &Array1<f64>, cfg: &FdConfig) -> Result<Array2<f64>>
where
    M: Fn(&Array1<f64>) -> Result<Array1<f64>>,
{
    let d_in = x.len();
    let mut cols: Vec<Array1<f64>> = Vec::with_capacity(d_in);
    for k in 0..d_in {
        let h = cfg.step_for(x[k]);
        let mut xp = x.clone();
        xp[k] += h;
        let plus = map(&xp)?;
        let mut xm = x.clone();
        xm[k] -= h;
        let minus = map(&xm)?;
        if plus.len() != minus.len() {
            return Err(Error::shape("fd_jacobian_of_map", plus.len(), minus.len()));
        }
        let col = (&plus - &minus) / (2.0 * h);
        if !col.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { context: format!("fd_jacobian_of_map coord {k}") });
        }
        cols.push(col);
    }
    let d_out = cols.first().map(|c| c.len()).unwrap_or(0);
    let mut jac = Array2::zeros((d_out, d_in));
    for (k, col) in cols.into_iter().enumerate() {
        if col.len() != d_out {
            return Err(Error::shape("fd_jacobian_of_map", d_out, col.len()));
        }
        jac.column_mut(k).assign(&col);
    }
    Ok(jac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn stack(xs: &[f64]) -> PointStack {
        PointStack::new(xs.iter().map(|&x| array![x]).collect())
    }

    #[test]
    fn quadratic_gradient_is_nearly_exact() {
        let pt = stack(&[3.0]);
        let g = fd_grad_of(|p| Ok(p.level(0)[0].powi(2)), &pt, 0, &FdConfig::default()).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8, "got {}", g[0]);
    }

    #[test]
    fn constant_gradient_is_zero() {
        let pt = stack(&[1.2, -0.5]);
        let g = fd_grad_of(|_| Ok(4.25), &pt, 1, &FdConfig::default()).unwrap();
        assert_eq!(g[0], 0.0);
    }

    #[test]
    fn bilinear_cross_hessian() {
        let pt = stack(&[0.7, -1.3]);
        let h = fd_hess_of(
            |p| Ok(p.level(0)[0] * p.level(1)[0]),
            &pt,
            0,
            1,
            &FdConfig::default(),
        )
        .unwrap();
        assert!((h[[0, 0]] - 1.0).abs() < 1e-6, "got {}", h[[0, 0]]);
    }

    #[test]
    fn quadratic_hessian_diagonal() {
        let pt = stack(&[3.0]);
        let h =
            fd_hess_of(|p| Ok(p.level(0)[0].powi(2)), &pt, 0, 0, &FdConfig::default()).unwrap();
        assert!((h[[0, 0]] - 2.0).abs() < 1e-6, "got {}", h[[0, 0]]);
    }

    #[test]
    fn cubic_hessian_within_fd_noise() {
        let pt = stack(&[2.0]);
        let h =
            fd_hess_of(|p| Ok(p.level(0)[0].powi(3)), &pt, 0, 0, &FdConfig::default()).unwrap();
        assert!((h[[0, 0]] - 12.0).abs() < 1e-4, "got {}", h[[0, 0]]);
    }

    #[test]
    fn identity_map_jacobian_nearly_exact() {
        let x = array![0.4, -2.0, 1.5];
        let j = fd_jacobian_of_map(|v| Ok(v.clone()), &x, &FdConfig::default()).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((j[[a, b]] - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sequential_game_responder_stack_jacobian() {
        // Backward-induction responses y*(x) = (1 - x)/2, z*(x) = (1 - x)/4
        // stacked into one map; its Jacobian column is (-1/2, -1/4).
        let m = |x: &Array1<f64>| Ok(array![(1.0 - x[0]) / 2.0, (1.0 - x[0]) / 4.0]);
        let j = fd_jacobian_of_map(m, &array![0.5], &FdConfig::default()).unwrap();
        assert!((j[[0, 0]] + 0.5).abs() < 1e-6);
        assert!((j[[1, 0]] + 0.25).abs() < 1e-6);
    }

    #[test]
    fn linear_map_jacobian_nearly_exact() {
        let m = array![[2.0, -1.0], [0.5, 3.0], [1.0, 1.0]];
        let x = array![0.3, -0.8];
        let j = {
            let m = m.clone();
            fd_jacobian_of_map(|v| Ok(m.dot(v)), &x, &FdConfig::default()).unwrap()
        };
        let dev = (&j - &m).iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        assert!(dev < 1e-9, "deviation {dev}");
    }

    #[test]
    fn symmetric_difference_is_second_order() {
        // f(x) = x^4 at x = 1: truncation error of the central difference is
        // f'''(x) h^2 / 6, so halving h should shrink it by about 4.
        let f = |p: &PointStack| Ok(p.level(0)[0].powi(4));
        let pt = stack(&[1.0]);
        let coarse = fd_grad_of(f, &pt, 0, &FdConfig { step_abs: 1e-3, step_rel: 0.0 }).unwrap();
        let fine = fd_grad_of(f, &pt, 0, &FdConfig { step_abs: 5e-4, step_rel: 0.0 }).unwrap();
        let e_coarse = (coarse[0] - 4.0).abs();
        let e_fine = (fine[0] - 4.0).abs();
        let ratio = e_coarse / e_fine;
        assert!((3.0..5.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn nested_hessian_matches_analytic_on_mixed_poly() {
        // f(x, y) = x^2 y + y^3 with d/dx d/dy = 2x.
        let f = |p: &PointStack| {
            let x = p.level(0)[0];
            let y = p.level(1)[0];
            Ok(x * x * y + y.powi(3))
        };
        let pt = stack(&[1.4, -0.6]);
        let h = fd_hess_of(f, &pt, 0, 1, &FdConfig::default()).unwrap();
        assert!((h[[0, 0]] - 2.8).abs() < 1e-5, "got {}", h[[0, 0]]);
    }
}
