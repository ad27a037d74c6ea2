//! General n-level implicit differentiation: the full table of solution-map
//! Jacobians and the chain-rule assembly of the top-level gradient.
//!
//! For levels `0..n` (0 outermost), level `i`'s solution map takes all upper
//! variables as arguments. The table holds, for every pair `j < i`,
//!
//! * `partial(i, j)`: the map's Jacobian in `x_j` with the other upper
//!   variables held fixed, and
//! * `total(i, j)`: the derivative along the nested equilibrium path, i.e.
//!   the path-sum `total(i, j) = sum_{k=j+1..=i} total(i, k) partial(k, j)`
//!   with `total(i, i) = I` (identity entries are implicit, never stored).
//!
//! Construction runs source-by-source from the deepest pair upward. For a
//! non-deepest level `t`, differentiating its reduced stationarity
//! `f_t' = sum_k total(k, t)^T grad_k f_t = 0` in `x_s` gives
//! `partial(t, s) = -(f_t'')^{-1} A` where `f_t''` is the reduced own Hessian
//! and `A` the reduced cross block. Entries already computed for deeper
//! windows are reused verbatim: a pair's Jacobian does not depend on which
//! shallower levels are frozen, which is what keeps the recursion polynomial.
//!
//! `f_t''` and `A` embed derivatives of the deeper Jacobian factors that the
//! closed-form recurrence leaves implicit; [`TableCurvature`] picks how they
//! are formed. `GaussNewton` differentiates only the gradient-block factors
//! (exact whenever deeper solution maps are affine, e.g. for every quadratic
//! instance). `ExactFd` central-differences the reduced gradient itself with
//! deeper levels re-solved by Newton; it is slower but exact up to fd error
//! and serves as ground truth in tests.

use std::collections::HashMap;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::linsolve::{residual_inf, solve_spd_ctx, solve_spd_vec, SolveMode};
use crate::model::{
    check_point_shape, max_abs, require_solved, DerivativeOracle, MultilevelProblem, PointStack,
};
use crate::numderiv::FdConfig;
use crate::trilevel::{grad_trilevel, CurvatureMode, TrilevelConfig};

/// How the reduced Hessian and cross blocks account for the dependence of
/// deeper Jacobian factors on the differentiation variable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TableCurvature {
    /// Differentiate only the gradient-block factors through Hessian blocks;
    /// exact for affine solution maps, an approximation otherwise.
    GaussNewton,
    /// Central-difference the reduced gradient with deeper levels re-solved.
    ExactFd,
}

/// Knobs for table construction.
#[derive(Clone, Debug)]
pub struct TableConfig {
    pub solve: SolveMode,
    pub curvature: TableCurvature,
    /// Maximum recorded residual accepted for levels below the window start;
    /// infinite disables the gate.
    pub stationarity_tol: f64,
    /// Step control for the `ExactFd` path.
    pub fd: FdConfig,
}

impl Default for TableConfig {
    fn default() -> Self {
        TableConfig {
            solve: SolveMode::direct(),
            curvature: TableCurvature::GaussNewton,
            stationarity_tol: 1e-6,
            fd: FdConfig::default(),
        }
    }
}

impl TableConfig {
    pub fn with_solve(mut self, solve: SolveMode) -> Self {
        self.solve = solve;
        self
    }

    pub fn with_curvature(mut self, curvature: TableCurvature) -> Self {
        self.curvature = curvature;
        self
    }

    pub fn with_stationarity_tol(mut self, tol: f64) -> Self {
        self.stationarity_tol = tol;
        self
    }
}

/// Total and partial solution-map Jacobians for every level pair in a window.
#[derive(Clone, Debug)]
pub struct JacobianTable {
    start: usize,
    dims: Vec<usize>,
    total: HashMap<(usize, usize), Array2<f64>>,
    partial: HashMap<(usize, usize), Array2<f64>>,
    max_solve_residual: f64,
}

impl JacobianTable {
    /// `d x_i / d x_j` along the nested equilibrium, shape `d_i x d_j`.
    pub fn total(&self, i: usize, j: usize) -> Option<&Array2<f64>> {
        self.total.get(&(i, j))
    }

    /// `p x_i / p x_j` of level `i`'s own solution map, shape `d_i x d_j`.
    pub fn partial(&self, i: usize, j: usize) -> Option<&Array2<f64>> {
        self.partial.get(&(i, j))
    }

    /// Number of levels the table spans (window start through the deepest).
    pub fn levels_resolved(&self) -> usize {
        self.dims.len() - self.start
    }

    /// Shallowest level covered by the window.
    pub fn start(&self) -> usize {
        self.start
    }

    /// `(total, partial)` entry counts; both are `m (m - 1) / 2` for a fully
    /// resolved window of `m` levels.
    pub fn entry_counts(&self) -> (usize, usize) {
        (self.total.len(), self.partial.len())
    }

    /// Worst `||A X - B||_inf` over all linear solves performed while
    /// building the table.
    pub fn max_solve_residual(&self) -> f64 {
        self.max_solve_residual
    }

    fn expect_total(&self, i: usize, j: usize, context: &str) -> Result<&Array2<f64>> {
        self.total.get(&(i, j)).ok_or_else(|| {
            Error::structure(context, format!("missing total({}, {}) entry", i + 1, j + 1))
        })
    }
}

/// Build the full table for all level pairs of `problem` at `point`.
pub fn build_table(
    problem: &MultilevelProblem,
    point: &PointStack,
    cfg: &TableConfig,
) -> Result<JacobianTable> {
    build_table_from(problem, point, 0, cfg)
}

/// Build the table for the window `start..n` (levels above `start` are
/// treated as frozen constants). Requires recorded residuals within
/// `stationarity_tol` for every level deeper than `start`.
pub fn build_table_from(
    problem: &MultilevelProblem,
    point: &PointStack,
    start: usize,
    cfg: &TableConfig,
) -> Result<JacobianTable> {
    check_point_shape(problem, point, "build_table")?;
    let n = problem.n_levels();
    if start >= n {
        return Err(Error::structure(
            "build_table",
            format!("window start {} out of range for {} levels", start + 1, n),
        ));
    }
    for level in start + 1..n {
        require_solved(point, level, cfg.stationarity_tol)?;
    }

    let mut table = JacobianTable {
        start,
        dims: problem.dims().to_vec(),
        total: HashMap::new(),
        partial: HashMap::new(),
        max_solve_residual: 0.0,
    };
    let mut worst = 0.0f64;
    let mut cache = GnCache::default();

    for s in (start..n - 1).rev() {
        // Deepest-first: partial(t, s) needs partial(j, s) for all j > t.
        for t in (s + 1..n).rev() {
            let block = compute_partial(problem, point, t, s, cfg, &table, &mut cache, &mut worst)?;
            if !block.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("build_table partial({}, {})", t + 1, s + 1),
                });
            }
            table.partial.insert((t, s), block);
        }
        for i in s + 1..n {
            let mut tot = table.partial[&(i, s)].clone();
            for j in s + 1..i {
                tot += &table.total[&(i, j)].dot(&table.partial[&(j, s)]);
            }
            table.total.insert((i, s), tot);
        }
    }
    table.max_solve_residual = worst;
    Ok(table)
}

/// Per-level reusable pieces of the Gauss-Newton assembly: `w[t][m - t - 1]`
/// holds `W_t(m) = sum_k total(k, t)^T hess(f_t; k, m)` for `m > t`, and
/// `fpp[t]` the reduced own Hessian of level `t` (mode-dependent).
#[derive(Default)]
struct GnCache {
    w: HashMap<usize, Vec<Array2<f64>>>,
    fpp: HashMap<usize, Array2<f64>>,
}

#[allow(clippy::too_many_arguments)]
fn compute_partial(
    problem: &MultilevelProblem,
    point: &PointStack,
    t: usize,
    s: usize,
    cfg: &TableConfig,
    table: &JacobianTable,
    cache: &mut GnCache,
    worst: &mut f64,
) -> Result<Array2<f64>> {
    let n = problem.n_levels();
    let f_t = problem.objective(t);
    let context = format!("build_table (level {} reduced Hessian)", t + 1);

    if t == n - 1 {
        // Deepest map: plain stationarity, no reduction involved.
        let htt = hess_checked(f_t, t, t, point)?;
        let hts = hess_checked(f_t, t, s, point)?;
        let sol = solve_spd_ctx(&htt, &hts, &cfg.solve, &context)?;
        *worst = worst.max(residual_inf(&htt, &sol, &hts));
        return Ok(-sol);
    }

    if !cache.fpp.contains_key(&t) {
        let (fpp, w) = match cfg.curvature {
            TableCurvature::GaussNewton => {
                let w: Vec<Array2<f64>> = (t + 1..n)
                    .map(|m| gn_w(problem, point, t, m, table))
                    .collect::<Result<_>>()?;
                let mut fpp = gn_w(problem, point, t, t, table)?;
                for m in t + 1..n {
                    fpp += &w[m - t - 1].dot(table.expect_total(m, t, "build_table")?);
                }
                (symmetrize(fpp), w)
            }
            TableCurvature::ExactFd => {
                let fpp = fd_reduced_cross(problem, point, t, t, cfg)?;
                (symmetrize(fpp), Vec::new())
            }
        };
        cache.fpp.insert(t, fpp);
        cache.w.insert(t, w);
    }

    let a = match cfg.curvature {
        TableCurvature::GaussNewton => {
            // A = W(s) + sum_{m > t} W(m) V(m, s), where V(m, s) is the
            // response of level m to x_s with x_{<= t} held fixed.
            let mut a = gn_w(problem, point, t, s, table)?;
            let w = &cache.w[&t];
            for m in t + 1..n {
                let mut v = table.partial[&(m, s)].clone();
                for j in t + 1..m {
                    v += &table.total[&(m, j)].dot(&table.partial[&(j, s)]);
                }
                a += &w[m - t - 1].dot(&v);
            }
            a
        }
        TableCurvature::ExactFd => fd_reduced_cross(problem, point, t, s, cfg)?,
    };

    let fpp = &cache.fpp[&t];
    let sol = solve_spd_ctx(fpp, &a, &cfg.solve, &context)?;
    *worst = worst.max(residual_inf(fpp, &sol, &a));
    Ok(-sol)
}

/// Gauss-Newton reduced own Hessian of level `t`'s subproblem, given a window
/// table covering `t..n`; used as the Newton preconditioner.
fn gn_reduced_hessian(
    problem: &MultilevelProblem,
    point: &PointStack,
    t: usize,
    table: &JacobianTable,
) -> Result<Array2<f64>> {
    let n = problem.n_levels();
    let mut fpp = gn_w(problem, point, t, t, table)?;
    for m in t + 1..n {
        let w_m = gn_w(problem, point, t, m, table)?;
        fpp += &w_m.dot(table.expect_total(m, t, "reduced Hessian")?);
    }
    Ok(symmetrize(fpp))
}

/// `W_t(i) = sum_{k = t..n} total(k, t)^T hess(f_t; k, i)` with
/// `total(t, t) = I`: the derivative of the reduced gradient `f_t'` in `x_i`
/// with the Jacobian factors frozen.
fn gn_w(
    problem: &MultilevelProblem,
    point: &PointStack,
    t: usize,
    i: usize,
    table: &JacobianTable,
) -> Result<Array2<f64>> {
    let n = problem.n_levels();
    let f_t = problem.objective(t);
    let mut w = hess_checked(f_t, t, i, point)?;
    for k in t + 1..n {
        let t_kt = table.expect_total(k, t, "build_table")?;
        w += &t_kt.t().dot(&hess_checked(f_t, k, i, point)?);
    }
    Ok(w)
}

/// Central difference of the reduced gradient `f_t'` along `x_i`, with levels
/// deeper than `t` re-solved by Newton at each probe. Shape `d_t x d_i`.
fn fd_reduced_cross(
    problem: &MultilevelProblem,
    point: &PointStack,
    t: usize,
    i: usize,
    cfg: &TableConfig,
) -> Result<Array2<f64>> {
    let dims = problem.dims();
    let mut out = Array2::zeros((dims[t], dims[i]));
    for b in 0..dims[i] {
        let step = cfg.fd.step_for(point.level(i)[b]);
        let mut sides = Vec::with_capacity(2);
        for sign in [1.0, -1.0] {
            let mut probe = point.clone();
            let mut value = probe.level(i).to_owned();
            value[b] += sign * step;
            probe.set_level(i, value)?;
            newton_resolve_window(problem, &mut probe, t + 1, cfg, 1e-11, 64)?;
            sides.push(reduced_gradient(problem, &probe, t, cfg)?);
        }
        let col = (&sides[0] - &sides[1]) / (2.0 * step);
        out.column_mut(b).assign(&col);
    }
    Ok(out)
}

/// Reduced gradient of level `t`'s subproblem:
/// `f_t' = grad_t f_t + sum_{k > t} total(k, t)^T grad_k f_t`.
///
/// Builds the window table below `t` on the fly; for the deepest level this
/// is the plain gradient.
pub fn reduced_gradient(
    problem: &MultilevelProblem,
    point: &PointStack,
    t: usize,
    cfg: &TableConfig,
) -> Result<Array1<f64>> {
    if t + 1 == problem.n_levels() {
        return problem.objective(t).grad_block(t, point);
    }
    let table = build_table_from(problem, point, t, cfg)?;
    reduced_gradient_with_table(problem, point, t, &table)
}

/// [`reduced_gradient`] with a prebuilt window table.
pub fn reduced_gradient_with_table(
    problem: &MultilevelProblem,
    point: &PointStack,
    t: usize,
    table: &JacobianTable,
) -> Result<Array1<f64>> {
    let f_t = problem.objective(t);
    let mut g = f_t.grad_block(t, point)?;
    for k in t + 1..problem.n_levels() {
        let t_kt = table.expect_total(k, t, "reduced_gradient")?;
        g += &t_kt.t().dot(&f_t.grad_block(k, point)?);
    }
    Ok(g)
}

/// Drive levels `start..n` to the nested equilibrium by Newton steps on each
/// level's reduced stationarity, deepest levels re-solved before every
/// gradient evaluation. Records reduced-gradient norms as residuals.
///
/// The Newton preconditioner always uses the Gauss-Newton reduced Hessian
/// (convergence is judged on the exact reduced gradient, so the approximation
/// only affects the step count, and it is exact on quadratic instances).
pub fn newton_resolve_window(
    problem: &MultilevelProblem,
    point: &mut PointStack,
    start: usize,
    cfg: &TableConfig,
    tol: f64,
    budget: usize,
) -> Result<()> {
    let n = problem.n_levels();
    if start >= n {
        return Ok(());
    }
    let gn_cfg = cfg
        .clone()
        .with_curvature(TableCurvature::GaussNewton)
        .with_stationarity_tol(f64::INFINITY);
    // Residual, gradient, and Newton matrix of the start level at the current
    // iterate, with the deeper window re-resolved first.
    let measure = |point: &mut PointStack| -> Result<(f64, Array1<f64>, Array2<f64>)> {
        newton_resolve_window(problem, point, start + 1, cfg, tol, budget)?;
        let (g, h) = if start == n - 1 {
            let g = problem.objective(start).grad_block(start, point)?;
            let h = hess_checked(problem.objective(start), start, start, point)?;
            (g, h)
        } else {
            let table = build_table_from(problem, point, start, &gn_cfg)?;
            let g = reduced_gradient_with_table(problem, point, start, &table)?;
            let h = gn_reduced_hessian(problem, point, start, &table)?;
            (g, h)
        };
        let norm = g.dot(&g).sqrt();
        Ok((norm, g, h))
    };

    let mut entry = f64::NAN;
    let mut history = Vec::new();
    let (mut norm, mut g, mut h) = measure(point)?;
    loop {
        point.set_residual(start, norm);
        history.push(norm);
        if entry.is_nan() {
            entry = norm;
        }
        if norm <= tol {
            return Ok(());
        }
        if !norm.is_finite() || norm > 1e6 * (1.0 + entry) {
            return Err(Error::DivergedLowerLevel { level: start + 1, entry, current: norm });
        }
        if history.len() > budget {
            return Err(Error::ConvergenceBudget { budget, residuals: history });
        }
        let step = solve_spd_vec(&h, &g, &cfg.solve)?;
        let base = point.level(start).clone();
        // Backtrack until the residual drops: a full step across a
        // high-curvature crease (a stiff smoothed penalty near its kink) can
        // cycle, and the candidate residual is exactly the next iteration's
        // measurement, so acceptance at t = 1 costs nothing extra.
        let mut t = 1.0f64;
        loop {
            point.set_level(start, &base - &step.mapv(|v| v * t))?;
            let cand = measure(point)?;
            if cand.0 <= norm * (1.0 - 1e-4 * t) || t <= 1.0 / 4096.0 {
                (norm, g, h) = cand;
                break;
            }
            t *= 0.5;
        }
    }
}

/// Chain-rule assembly of the top-level gradient from a full table:
/// `grad = grad_0 f_0 + sum_{j >= 1} total(j, 0)^T grad_j f_0`.
pub fn grad_full(
    problem: &MultilevelProblem,
    point: &PointStack,
    table: &JacobianTable,
) -> Result<Array1<f64>> {
    check_point_shape(problem, point, "grad_full")?;
    if table.start() != 0 {
        return Err(Error::structure(
            "grad_full",
            format!("table window starts at level {}, need the full table", table.start() + 1),
        ));
    }
    let f0 = problem.objective(0);
    let mut g = f0.grad_block(0, point)?;
    for j in 1..problem.n_levels() {
        let t_j0 = table.expect_total(j, 0, "grad_full")?;
        g += &t_j0.t().dot(&f0.grad_block(j, point)?);
    }
    if !g.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { context: "grad_full".into() });
    }
    Ok(g)
}

/// Max-norm disagreement between the recursive table gradient and the
/// three-level closed form at the same point; a cross-validation diagnostic.
pub fn trilevel_consistency(
    problem: &MultilevelProblem,
    point: &PointStack,
    cfg: &TableConfig,
) -> Result<f64> {
    if problem.n_levels() != 3 {
        return Err(Error::structure(
            "trilevel_consistency",
            format!("expected 3 levels, got {}", problem.n_levels()),
        ));
    }
    let table = build_table(problem, point, cfg)?;
    let via_table = grad_full(problem, point, &table)?;
    let tri_cfg = TrilevelConfig {
        solve: cfg.solve.clone(),
        curvature: CurvatureMode::Auto,
        stationarity_tol: cfg.stationarity_tol,
        fd: cfg.fd.clone(),
    };
    let via_closed_form = grad_trilevel(
        problem.objective(0),
        problem.objective(1),
        problem.objective(2),
        point,
        &tri_cfg,
    )?;
    Ok(max_abs(&(&via_table - &via_closed_form)))
}

fn symmetrize(m: Array2<f64>) -> Array2<f64> {
    let mt = m.t().to_owned();
    (m + mt) * 0.5
}

fn hess_checked(
    oracle: &dyn DerivativeOracle,
    r: usize,
    c: usize,
    point: &PointStack,
) -> Result<Array2<f64>> {
    let m = oracle.hess_block(r, c, point)?;
    let dims = point.dims();
    if m.dim() != (dims[r], dims[c]) {
        return Err(Error::shape(
            "hess_block",
            format!("{}x{}", dims[r], dims[c]),
            format!("{}x{}", m.dim().0, m.dim().1),
        ));
    }
    Ok(m)
}
