//! Closed-form implicit differentiation for three-level nests.
//!
//! With levels `x` (top), `y` (middle), `z` (deepest), the deepest solution
//! map `z = g(x, y)` comes from the stationarity of the third objective and
//! the middle map `y = h(x)` from stationarity of the second objective with
//! `g` substituted. Differentiating those identities yields linear systems in
//! the respective own-variable Hessians; [`grad_trilevel`] chains the solved
//! Jacobians into the top-level gradient
//!
//! ```text
//! df1/dx = pf1/px + (dh/dx)^T pf1/py + (dg/dx + dg/dy dh/dx)^T pf1/pz.
//! ```
//!
//! Differentiating the map `dg/dy` once more (needed inside the middle-level
//! reduced Hessian) is the only place third derivatives of the deepest
//! objective enter; [`solution_curvature`] offers an analytic path when the
//! oracle carries third-order slices and a finite-difference path with a
//! Newton re-solve of the deepest level otherwise.
//!
//! Every entry point gates on the residuals recorded in the [`PointStack`]:
//! derivatives taken at an under-solved point are wrong in proportion to the
//! residual, so beyond `stationarity_tol` they are refused as [`Error::StalePoint`].

use ndarray::{Array1, Array2, Array3, Axis};

use crate::error::{Error, Result};
use crate::linsolve::{solve_spd_ctx, solve_spd_vec, SolveMode};
use crate::model::{require_solved, DerivativeOracle, PointStack};
use crate::numderiv::FdConfig;

/// Level indices of the three variables in a trilevel stack.
const TOP: usize = 0;
const MID: usize = 1;
const DEEP: usize = 2;

/// Which upper variable a solution-map derivative is taken with respect to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Wrt {
    /// The top-level variable (level 1 of 3).
    Top,
    /// The middle variable (level 2 of 3).
    Middle,
}

impl Wrt {
    fn index(self) -> usize {
        match self {
            Wrt::Top => TOP,
            Wrt::Middle => MID,
        }
    }
}

/// How the derivative of `dg/dy` is obtained.
///
/// `Auto` picks `Analytic` when the deepest oracle advertises third-order
/// slices and `Fd` otherwise; the resolved choice is recorded in
/// [`TrilevelJacobians::curvature_mode`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurvatureMode {
    Auto,
    Analytic,
    Fd,
}

impl CurvatureMode {
    /// Resolve `Auto` against the deepest oracle's capabilities.
    pub fn resolve(self, f3: &dyn DerivativeOracle) -> CurvatureMode {
        match self {
            CurvatureMode::Auto => {
                if f3.has_third_order() {
                    CurvatureMode::Analytic
                } else {
                    CurvatureMode::Fd
                }
            }
            other => other,
        }
    }
}

/// Knobs shared by the trilevel derivative operations.
#[derive(Clone, Debug)]
pub struct TrilevelConfig {
    /// Linear-solve strategy for every own-Hessian system.
    pub solve: SolveMode,
    /// Curvature path selection; `Auto` by default.
    pub curvature: CurvatureMode,
    /// Maximum recorded lower-level residual accepted at entry. Infinite
    /// disables the gate (callers that track residuals in traces instead).
    pub stationarity_tol: f64,
    /// Step control for the finite-difference curvature path.
    pub fd: FdConfig,
}

impl Default for TrilevelConfig {
    fn default() -> Self {
        TrilevelConfig {
            solve: SolveMode::direct(),
            curvature: CurvatureMode::Auto,
            stationarity_tol: 1e-6,
            fd: FdConfig::default(),
        }
    }
}

impl TrilevelConfig {
    pub fn with_solve(mut self, solve: SolveMode) -> Self {
        self.solve = solve;
        self
    }

    pub fn with_curvature(mut self, mode: CurvatureMode) -> Self {
        self.curvature = mode;
        self
    }

    pub fn with_stationarity_tol(mut self, tol: f64) -> Self {
        self.stationarity_tol = tol;
        self
    }
}

/// Solution-map Jacobians of a trilevel stack at one point.
#[derive(Clone, Debug)]
pub struct TrilevelJacobians {
    /// `dg/dx`, shape `d3 x d1`.
    pub dg_dx: Array2<f64>,
    /// `dg/dy`, shape `d3 x d2`.
    pub dg_dy: Array2<f64>,
    /// `dh/dx`, shape `d2 x d1`.
    pub dh_dx: Array2<f64>,
    /// Curvature path actually used (never `Auto`).
    pub curvature_mode: CurvatureMode,
    /// Worst `||A X - B||_inf` over the three implicit-function solves; the
    /// honest quality measure when truncated CG is in play.
    pub solve_residual: f64,
}

impl TrilevelJacobians {
    /// Solve for all three Jacobians at `point`.
    pub fn compute(
        f2: &dyn DerivativeOracle,
        f3: &dyn DerivativeOracle,
        point: &PointStack,
        cfg: &TrilevelConfig,
    ) -> Result<Self> {
        let (dg_dx, dg_dy) = jac_g(f3, point, cfg)?;
        let hzz = hess(f3, DEEP, DEEP, point, "jac_g deepest own Hessian")?;
        let hzx = hess(f3, DEEP, TOP, point, "jac_g deepest cross block")?;
        let hzy = hess(f3, DEEP, MID, point, "jac_g deepest cross block")?;
        let res_gx = crate::linsolve::residual_inf(&hzz, &dg_dx, &(-hzx));
        let res_gy = crate::linsolve::residual_inf(&hzz, &dg_dy, &(-hzy));
        let (dh_dx, res_h) = jac_h_impl(f2, f3, point, &dg_dx, &dg_dy, cfg)?;
        Ok(TrilevelJacobians {
            dg_dx,
            dg_dy,
            dh_dx,
            curvature_mode: cfg.curvature.resolve(f3),
            solve_residual: res_gx.max(res_gy).max(res_h),
        })
    }

    /// Total derivative of the deepest variable along the top one:
    /// `dz/dx = dg/dx + dg/dy dh/dx`, shape `d3 x d1`.
    pub fn total_deep_dx(&self) -> Array2<f64> {
        &self.dg_dx + &self.dg_dy.dot(&self.dh_dx)
    }
}

/// Jacobians of the deepest solution map: `dg/dx = -Hzz^-1 Hzx` and
/// `dg/dy = -Hzz^-1 Hzy`, with all blocks from the deepest objective.
///
/// Requires the recorded deepest residual to satisfy `stationarity_tol`.
pub fn jac_g(
    f3: &dyn DerivativeOracle,
    point: &PointStack,
    cfg: &TrilevelConfig,
) -> Result<(Array2<f64>, Array2<f64>)> {
    ensure_trilevel(point, "jac_g")?;
    require_solved(point, DEEP, cfg.stationarity_tol)?;
    let hzz = hess(f3, DEEP, DEEP, point, "jac_g deepest own Hessian")?;
    let hzx = hess(f3, DEEP, TOP, point, "jac_g deepest cross block")?;
    let hzy = hess(f3, DEEP, MID, point, "jac_g deepest cross block")?;
    let dg_dx = -solve_spd_ctx(&hzz, &hzx, &cfg.solve, "jac_g (level-3 own Hessian)")?;
    let dg_dy = -solve_spd_ctx(&hzz, &hzy, &cfg.solve, "jac_g (level-3 own Hessian)")?;
    Ok((dg_dx, dg_dy))
}

/// Derivative of the map `dg/dy` with respect to `wrt`, shape `d3 x d2 x d_wrt`:
/// `out[i, a, b] = d/d(wrt_b) (dg/dy)[i, a]` along the solution path
/// `z = g(x, y)`.
///
/// The analytic path differentiates the stationarity identity
/// `Hzz dg/dy + Hzy = 0` once more: for each `wrt` coordinate `b`,
///
/// ```text
/// Hzz C[:, :, b] = -[ (dHzz/dwrt_b + sum_c dHzz/dz_c (dg/dwrt)[c, b]) dg/dy
///                     + dHzy/dwrt_b + sum_c dHzy/dz_c (dg/dwrt)[c, b] ]
/// ```
///
/// where the bracketed derivatives are third-order slices of the deepest
/// objective. The fd path central-differences `wrt_b -> jac_g(..).dg_dy`,
/// re-solving the deepest level by Newton after each perturbation.
pub fn solution_curvature(
    f3: &dyn DerivativeOracle,
    point: &PointStack,
    dg_dy: &Array2<f64>,
    dg_dx: &Array2<f64>,
    wrt: Wrt,
    cfg: &TrilevelConfig,
) -> Result<Array3<f64>> {
    ensure_trilevel(point, "solution_curvature")?;
    match cfg.curvature.resolve(f3) {
        CurvatureMode::Analytic => curvature_analytic(f3, point, dg_dy, dg_dx, wrt, cfg),
        CurvatureMode::Fd => curvature_fd(f3, point, wrt, cfg),
        CurvatureMode::Auto => unreachable!("resolve never returns Auto"),
    }
}

fn curvature_analytic(
    f3: &dyn DerivativeOracle,
    point: &PointStack,
    dg_dy: &Array2<f64>,
    dg_dx: &Array2<f64>,
    wrt: Wrt,
    cfg: &TrilevelConfig,
) -> Result<Array3<f64>> {
    if !f3.has_third_order() {
        return Err(Error::MissingThirdOrder {
            level: DEEP + 1,
            context: "solution_curvature analytic mode".into(),
        });
    }
    let dims = point.dims();
    let (d2, d3) = (dims[MID], dims[DEEP]);
    let w = wrt.index();
    let dw = dims[w];
    let dg_dw = match wrt {
        Wrt::Top => dg_dx,
        Wrt::Middle => dg_dy,
    };
    let hzz = hess(f3, DEEP, DEEP, point, "solution_curvature deepest own Hessian")?;
    let t_zzw = third(f3, DEEP, DEEP, w, point)?;
    let t_zzz = third(f3, DEEP, DEEP, DEEP, point)?;
    let t_zyw = third(f3, DEEP, MID, w, point)?;
    let t_zyz = third(f3, DEEP, MID, DEEP, point)?;

    let mut out = Array3::zeros((d3, d2, dw));
    for b in 0..dw {
        // Total wrt_b-derivatives of Hzz and Hzy along z = g(x, y).
        let mut dhzz = t_zzw.index_axis(Axis(2), b).to_owned();
        let mut dhzy = t_zyw.index_axis(Axis(2), b).to_owned();
        for c in 0..d3 {
            let scale = dg_dw[(c, b)];
            if scale != 0.0 {
                dhzz.scaled_add(scale, &t_zzz.index_axis(Axis(2), c));
                dhzy.scaled_add(scale, &t_zyz.index_axis(Axis(2), c));
            }
        }
        let rhs = -(dhzz.dot(dg_dy) + dhzy);
        if rhs.iter().all(|v| *v == 0.0) {
            continue;
        }
        let slice = solve_spd_ctx(&hzz, &rhs, &cfg.solve, "solution_curvature (analytic)")?;
        out.index_axis_mut(Axis(2), b).assign(&slice);
    }
    Ok(out)
}

fn curvature_fd(
    f3: &dyn DerivativeOracle,
    point: &PointStack,
    wrt: Wrt,
    cfg: &TrilevelConfig,
) -> Result<Array3<f64>> {
    let dims = point.dims();
    let (d2, d3) = (dims[MID], dims[DEEP]);
    let w = wrt.index();
    let dw = dims[w];
    // The probe re-solves the deepest level itself, so its residual gate
    // reflects the Newton solve rather than the caller's entry point.
    let probe_cfg = cfg.clone().with_stationarity_tol(f64::INFINITY);

    let mut out = Array3::zeros((d3, d2, dw));
    for b in 0..dw {
        let step = cfg.fd.step_for(point.level(w)[b]);
        let mut sides = Vec::with_capacity(2);
        for sign in [1.0, -1.0] {
            let mut probe = point.clone();
            let mut value = probe.level(w).to_owned();
            value[b] += sign * step;
            probe.set_level(w, value)?;
            newton_resolve_deepest(f3, &mut probe, &cfg.solve)?;
            let (_, dg_dy_side) = jac_g(f3, &probe, &probe_cfg)?;
            sides.push(dg_dy_side);
        }
        let slice = (&sides[0] - &sides[1]) / (2.0 * step);
        out.index_axis_mut(Axis(2), b).assign(&slice);
    }
    Ok(out)
}

/// Newton iteration on the deepest level's own stationarity, recording the
/// final residual in the stack. Converges in one step for quadratic
/// objectives; the budget covers the mildly nonlinear oracles used in tests.
fn newton_resolve_deepest(
    f3: &dyn DerivativeOracle,
    point: &mut PointStack,
    solve: &SolveMode,
) -> Result<()> {
    const BUDGET: usize = 64;
    let entry = grad_norm(f3, DEEP, point)?;
    let tol = 1e-12 * (1.0 + entry);
    let mut current = entry;
    for _ in 0..BUDGET {
        if current <= tol {
            point.set_residual(DEEP, current);
            return Ok(());
        }
        if !current.is_finite() || current > 1e6 * (1.0 + entry) {
            return Err(Error::DivergedLowerLevel { level: DEEP + 1, entry, current });
        }
        let g = f3.grad_block(DEEP, point)?;
        let h = hess(f3, DEEP, DEEP, point, "curvature re-solve Hessian")?;
        let step = solve_spd_vec(&h, &g, solve)?;
        point.set_level(DEEP, point.level(DEEP) - &step)?;
        current = grad_norm(f3, DEEP, point)?;
    }
    if current <= 1e-8 * (1.0 + entry) {
        // Near-flat progress floor: accept and record honestly.
        point.set_residual(DEEP, current);
        return Ok(());
    }
    Err(Error::ConvergenceBudget { budget: BUDGET, residuals: vec![current] })
}

/// Jacobian of the middle solution map: `dh/dx = -D^-1 R`, where `D` is the
/// reduced middle-level Hessian and `R` the reduced cross block, both
/// assembled from middle-objective blocks and the deepest solution map:
///
/// ```text
/// D = Hyy + Hyz dg/dy + (dg/dy)^T Hzy + (dg/dy)^T Hzz dg/dy
///     + sum_i (pf2/pz)_i d/dy (dg/dy)_i
/// R = Hyx + Hyz dg/dx + (dg/dy)^T Hzx + (dg/dy)^T Hzz dg/dx
///     + sum_i (pf2/pz)_i d/dx (dg/dy)_i
/// ```
///
/// The two first-order cross terms are kept as the transpose pair shown so
/// `D` is symmetric by construction (it equals the Hessian of the reduced
/// middle objective); the curvature term is symmetrized likewise to absorb
/// fd-path noise.
pub fn jac_h(
    f2: &dyn DerivativeOracle,
    f3: &dyn DerivativeOracle,
    point: &PointStack,
    dg_dx: &Array2<f64>,
    dg_dy: &Array2<f64>,
    cfg: &TrilevelConfig,
) -> Result<Array2<f64>> {
    Ok(jac_h_impl(f2, f3, point, dg_dx, dg_dy, cfg)?.0)
}

fn jac_h_impl(
    f2: &dyn DerivativeOracle,
    f3: &dyn DerivativeOracle,
    point: &PointStack,
    dg_dx: &Array2<f64>,
    dg_dy: &Array2<f64>,
    cfg: &TrilevelConfig,
) -> Result<(Array2<f64>, f64)> {
    ensure_trilevel(point, "jac_h")?;
    require_solved(point, MID, cfg.stationarity_tol)?;
    let dims = point.dims();
    let (d1, d2, d3) = (dims[TOP], dims[MID], dims[DEEP]);

    let hyy = hess(f2, MID, MID, point, "jac_h middle own Hessian")?;
    let hyz = hess(f2, MID, DEEP, point, "jac_h middle cross block")?;
    let hzy = hess(f2, DEEP, MID, point, "jac_h middle cross block")?;
    let hzz = hess(f2, DEEP, DEEP, point, "jac_h middle deep block")?;
    let hyx = hess(f2, MID, TOP, point, "jac_h middle cross block")?;
    let hzx = hess(f2, DEEP, TOP, point, "jac_h middle deep block")?;
    let gz = f2.grad_block(DEEP, point)?;

    let hzz_dgdy = hzz.dot(dg_dy);
    let mut d = hyy + hyz.dot(dg_dy) + dg_dy.t().dot(&hzy) + dg_dy.t().dot(&hzz_dgdy);
    let mut r = hyx + hyz.dot(dg_dx) + dg_dy.t().dot(&hzx) + hzz_dgdy.t().dot(dg_dx);

    // The curvature contribution vanishes when the middle objective ignores
    // the deepest variable; skip the (possibly fd) work entirely then.
    if gz.iter().any(|v| *v != 0.0) {
        let cy = solution_curvature(f3, point, dg_dy, dg_dx, Wrt::Middle, cfg)?;
        let cx = solution_curvature(f3, point, dg_dy, dg_dx, Wrt::Top, cfg)?;
        let mut curv_d = Array2::zeros((d2, d2));
        let mut curv_r = Array2::zeros((d2, d1));
        for i in 0..d3 {
            curv_d.scaled_add(gz[i], &cy.index_axis(Axis(0), i));
            curv_r.scaled_add(gz[i], &cx.index_axis(Axis(0), i));
        }
        d += &((&curv_d + &curv_d.t()) * 0.5);
        r += &curv_r;
    }

    let dh_dx = -solve_spd_ctx(&d, &r, &cfg.solve, "jac_h (reduced middle Hessian)")?;
    let res = crate::linsolve::residual_inf(&d, &dh_dx, &(-r));
    Ok((dh_dx, res))
}

/// Full top-level gradient: chains the top objective's partial gradients
/// through the middle and deepest solution-map Jacobians.
pub fn grad_trilevel(
    f1: &dyn DerivativeOracle,
    f2: &dyn DerivativeOracle,
    f3: &dyn DerivativeOracle,
    point: &PointStack,
    cfg: &TrilevelConfig,
) -> Result<Array1<f64>> {
    let jacs = TrilevelJacobians::compute(f2, f3, point, cfg)?;
    grad_with_jacobians(f1, point, &jacs)
}

/// [`grad_trilevel`] with the solution-map Jacobians already in hand.
pub fn grad_with_jacobians(
    f1: &dyn DerivativeOracle,
    point: &PointStack,
    jacs: &TrilevelJacobians,
) -> Result<Array1<f64>> {
    ensure_trilevel(point, "grad_with_jacobians")?;
    let g1x = f1.grad_block(TOP, point)?;
    let g1y = f1.grad_block(MID, point)?;
    let g1z = f1.grad_block(DEEP, point)?;
    let total_deep = jacs.total_deep_dx();
    let grad = g1x + jacs.dh_dx.t().dot(&g1y) + total_deep.t().dot(&g1z);
    if !grad.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { context: "grad_trilevel".into() });
    }
    Ok(grad)
}

fn ensure_trilevel(point: &PointStack, context: &str) -> Result<()> {
    if point.n_levels() != 3 {
        return Err(Error::structure(
            context,
            format!("expected a 3-level stack, got {} levels", point.n_levels()),
        ));
    }
    Ok(())
}

/// Shape-checked Hessian block fetch.
fn hess(
    oracle: &dyn DerivativeOracle,
    r: usize,
    c: usize,
    point: &PointStack,
    context: &str,
) -> Result<Array2<f64>> {
    let m = oracle.hess_block(r, c, point)?;
    let dims = point.dims();
    if m.dim() != (dims[r], dims[c]) {
        return Err(Error::shape(
            context,
            format!("{}x{}", dims[r], dims[c]),
            format!("{}x{}", m.dim().0, m.dim().1),
        ));
    }
    Ok(m)
}

/// Shape-checked third-order slice fetch.
fn third(
    oracle: &dyn DerivativeOracle,
    r: usize,
    c: usize,
    s: usize,
    point: &PointStack,
) -> Result<Array3<f64>> {
    let t = oracle.third_slice(r, c, s, point)?;
    let dims = point.dims();
    if t.dim() != (dims[r], dims[c], dims[s]) {
        return Err(Error::shape(
            "third_slice",
            format!("{}x{}x{}", dims[r], dims[c], dims[s]),
            format!("{}x{}x{}", t.dim().0, t.dim().1, t.dim().2),
        ));
    }
    Ok(t)
}

fn grad_norm(oracle: &dyn DerivativeOracle, level: usize, point: &PointStack) -> Result<f64> {
    let g = oracle.grad_block(level, point)?;
    Ok(g.dot(&g).sqrt())
}
