//! First-order driver: truncated nested descent on the lower levels, Adam on
//! the top level, and a per-step trace of the quantities experiments plot.
//!
//! The inner solver is deliberately inexact (fixed small budgets, plain
//! gradient steps) to mirror how the method is run in practice; hypergradient
//! quality under that truncation is exactly what the baselines are compared
//! on. Middle levels descend their own reduced gradient, i.e. the gradient of
//! their objective along the still-deeper solution maps, so that every level
//! plays its subgame rather than a simultaneous-move approximation; the
//! deepest level uses its plain gradient. `theorem4_check` instead solves the
//! lower levels essentially exactly (Newton) to test the descent guarantee in
//! the regime where it is stated.

use std::time::Instant;

use ndarray::Array1;

use crate::baselines::{fd_hypergradient, vgd_gradient, FdHyperConfig};
use crate::error::{Error, Result};
use crate::experiments::mse_to_reference;
use crate::linsolve::{SolveKind, SolveMode};
use crate::model::{check_point_shape, evaluate, MultilevelProblem, PointStack};
use crate::nlevel::{
    build_table, grad_full, newton_resolve_window, reduced_gradient, TableConfig, TableCurvature,
};
use crate::numderiv::FdConfig;
use crate::trilevel::{grad_with_jacobians, CurvatureMode, TrilevelConfig, TrilevelJacobians};

/// Which top-level gradient estimator the driver uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientMethod {
    /// Implicit differentiation through the stationarity systems.
    Id,
    /// Finite differences of the truncated reduced objective.
    Fd,
    /// Top-level partial gradient only.
    Vgd,
}

impl std::str::FromStr for GradientMethod {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "id" => Ok(GradientMethod::Id),
            "fd" => Ok(GradientMethod::Fd),
            "vgd" => Ok(GradientMethod::Vgd),
            other => Err(format!("unknown gradient method '{other}' (expected id, fd, or vgd)")),
        }
    }
}

impl std::fmt::Display for GradientMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            GradientMethod::Id => "id",
            GradientMethod::Fd => "fd",
            GradientMethod::Vgd => "vgd",
        };
        f.write_str(s)
    }
}

/// Adam moment decay and damping constants.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam first and second moment accumulators.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Array1<f64>,
    pub v: Array1<f64>,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        AdamState { m: Array1::zeros(dim), v: Array1::zeros(dim) }
    }
}

/// Full driver configuration; every field has a default so partial
/// configuration files deserialize cleanly.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Number of top-level Adam updates.
    pub outer_steps: usize,
    /// `inner_schedule[0]` is the number of level-1 update rounds per outer
    /// step; `inner_schedule[j]` the number of level-`j+1` updates performed
    /// before each level-`j` update. Length must be `n_levels - 1`.
    pub inner_schedule: Vec<usize>,
    /// Step size for every lower-level gradient update.
    pub lr_inner: f64,
    /// Top-level learning rate at step 0 and its per-step decay factor.
    pub lr_outer0: f64,
    pub lr_outer_decay: f64,
    pub adam: AdamConfig,
    /// Seed callers use to draw initial points and data splits; the driver
    /// itself is deterministic given the initial stack.
    pub seed: u64,
    pub method: GradientMethod,
    pub solve: SolveMode,
    /// Gate for derivative evaluations against recorded lower residuals.
    /// Infinite (the default) records residuals in the trace instead of
    /// refusing points, which is the only workable choice under truncation.
    pub stationarity_tol: f64,
    pub fd_hyper: FdHyperConfig,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            outer_steps: 200,
            inner_schedule: vec![30, 3],
            lr_inner: 1e-2,
            lr_outer0: 0.1,
            lr_outer_decay: 0.99,
            adam: AdamConfig::default(),
            seed: 0,
            method: GradientMethod::Id,
            solve: SolveMode::direct(),
            stationarity_tol: f64::INFINITY,
            fd_hyper: FdHyperConfig::default(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inner_schedule.is_empty() {
            return Err(Error::Config("inner_schedule must have one entry per lower level".into()));
        }
        if self.inner_schedule.iter().any(|&k| k == 0) {
            return Err(Error::Config("inner_schedule entries must be >= 1".into()));
        }
        for (name, v) in [
            ("lr_inner", self.lr_inner),
            ("lr_outer0", self.lr_outer0),
            ("lr_outer_decay", self.lr_outer_decay),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if self.lr_outer_decay > 1.0 {
            return Err(Error::Config(format!(
                "lr_outer_decay must be in (0, 1], got {}",
                self.lr_outer_decay
            )));
        }
        for (name, b) in [("adam.beta1", self.adam.beta1), ("adam.beta2", self.adam.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.adam.eps > 0.0) {
            return Err(Error::Config(format!("adam.eps must be positive, got {}", self.adam.eps)));
        }
        if !(self.stationarity_tol > 0.0) {
            return Err(Error::Config(format!(
                "stationarity_tol must be positive (may be inf), got {}",
                self.stationarity_tol
            )));
        }
        if !(self.fd_hyper.step > 0.0 && self.fd_hyper.step.is_finite()) {
            return Err(Error::Config(format!(
                "fd_hyper.step must be positive and finite, got {}",
                self.fd_hyper.step
            )));
        }
        Ok(())
    }

    /// Table-construction knobs matching this driver configuration.
    pub(crate) fn table_config(&self) -> TableConfig {
        TableConfig::default()
            .with_solve(self.solve)
            .with_curvature(TableCurvature::GaussNewton)
            .with_stationarity_tol(self.stationarity_tol)
    }
}

/// Top-level learning rate at 0-based outer step `t`.
pub fn lr_outer_at(cfg: &SolverConfig, step: usize) -> f64 {
    cfg.lr_outer0 * cfg.lr_outer_decay.powi(step as i32)
}

/// One plain gradient step `x - lr * grad`, with shape and finiteness checks.
pub fn gd_step(x: &Array1<f64>, grad: &Array1<f64>, lr: f64) -> Result<Array1<f64>> {
    if x.len() != grad.len() {
        return Err(Error::shape("gd_step", x.len(), grad.len()));
    }
    let next = x - &(grad * lr);
    if !next.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { context: "gd_step".into() });
    }
    Ok(next)
}

/// One Adam update with bias correction; `t` is the 1-based step index.
/// Returns the advanced state and the new iterate.
pub fn adam_step(
    state: &AdamState,
    x: &Array1<f64>,
    grad: &Array1<f64>,
    t: usize,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<(AdamState, Array1<f64>)> {
    if t == 0 {
        return Err(Error::Config("adam step index is 1-based; got 0".into()));
    }
    if x.len() != grad.len() || state.m.len() != x.len() || state.v.len() != x.len() {
        return Err(Error::shape("adam_step", x.len(), grad.len()));
    }
    let m = &state.m * cfg.beta1 + &(grad * (1.0 - cfg.beta1));
    let v = &state.v * cfg.beta2 + &(grad.mapv(|g| g * g) * (1.0 - cfg.beta2));
    let m_hat = &m / (1.0 - cfg.beta1.powi(t as i32));
    let v_hat = &v / (1.0 - cfg.beta2.powi(t as i32));
    let next = x - &(m_hat / (v_hat.mapv(f64::sqrt) + cfg.eps) * lr);
    if !next.iter().all(|f| f.is_finite()) {
        return Err(Error::NonFinite { context: "adam_step".into() });
    }
    Ok((AdamState { m, v }, next))
}

/// Truncated nested descent on all lower levels with the top level pinned at
/// `x1`. `warm`'s lower values seed the iteration (its top entry is ignored).
///
/// Update pattern: `inner_schedule[0]` rounds of level-1 updates, each
/// preceded (for every level `j`) by `inner_schedule[j]` updates of level
/// `j+1`, recursively. Middle levels step on their reduced gradient, the
/// deepest on its plain gradient. The returned stack carries those gradient
/// norms, measured once at the final iterate, as its residuals.
pub fn nested_lower_solve(
    problem: &MultilevelProblem,
    x1: &Array1<f64>,
    warm: &PointStack,
    cfg: &SolverConfig,
) -> Result<PointStack> {
    let lrs = vec![cfg.lr_inner; problem.n_levels()];
    nested_lower_solve_with_steps(problem, x1, warm, cfg, &lrs)
}

/// [`nested_lower_solve`] with an explicit step size per level (entry 0 is
/// ignored). The inference protocol uses this to cap stiff levels below the
/// configured rate; training always runs the uniform-rate wrapper.
pub fn nested_lower_solve_with_steps(
    problem: &MultilevelProblem,
    x1: &Array1<f64>,
    warm: &PointStack,
    cfg: &SolverConfig,
    lrs: &[f64],
) -> Result<PointStack> {
    cfg.validate()?;
    check_point_shape(problem, warm, "nested_lower_solve")?;
    let n = problem.n_levels();
    if lrs.len() != n {
        return Err(Error::Config(format!(
            "{} per-level step sizes for {n} levels",
            lrs.len()
        )));
    }
    if lrs[1..].iter().any(|lr| !(lr.is_finite() && *lr > 0.0)) {
        return Err(Error::Config(format!("lower-level step sizes must be positive, got {lrs:?}")));
    }
    if cfg.inner_schedule.len() != n - 1 {
        return Err(Error::Config(format!(
            "inner_schedule has {} entries but the problem has {} lower levels",
            cfg.inner_schedule.len(),
            n - 1
        )));
    }
    if x1.len() != problem.dim(0) {
        return Err(Error::shape("nested_lower_solve", problem.dim(0), x1.len()));
    }

    let mut point = warm.clone();
    point.set_level(0, x1.clone())?;
    point.clear_residuals();
    if n == 1 {
        return Ok(point);
    }

    // Never gate inside the loop: iterates are unconverged by construction.
    let table_cfg = cfg.table_config().with_stationarity_tol(f64::INFINITY);
    let mut entries: Vec<Option<f64>> = vec![None; n];
    for _ in 0..cfg.inner_schedule[0] {
        update_level(problem, &mut point, 1, cfg, &table_cfg, lrs, &mut entries)?;
    }
    for j in 1..n {
        let g = inner_gradient(problem, &point, j, &table_cfg)?;
        point.set_residual(j, g.dot(&g).sqrt());
    }
    Ok(point)
}

/// Reduced gradient for middle levels, plain gradient for the deepest.
fn inner_gradient(
    problem: &MultilevelProblem,
    point: &PointStack,
    j: usize,
    table_cfg: &TableConfig,
) -> Result<Array1<f64>> {
    if j + 1 == problem.n_levels() {
        problem.objective(j).grad_block(j, point)
    } else {
        reduced_gradient(problem, point, j, table_cfg)
    }
}

fn update_level(
    problem: &MultilevelProblem,
    point: &mut PointStack,
    j: usize,
    cfg: &SolverConfig,
    table_cfg: &TableConfig,
    lrs: &[f64],
    entries: &mut [Option<f64>],
) -> Result<()> {
    if j + 1 < problem.n_levels() {
        for _ in 0..cfg.inner_schedule[j] {
            update_level(problem, point, j + 1, cfg, table_cfg, lrs, entries)?;
        }
    }
    let g = inner_gradient(problem, point, j, table_cfg)?;
    let norm = g.dot(&g).sqrt();
    let entry = *entries[j].get_or_insert(norm);
    if !norm.is_finite() || norm > 1e6 * (1.0 + entry) {
        return Err(Error::DivergedLowerLevel { level: j + 1, entry, current: norm });
    }
    let stepped = gd_step(point.level(j), &g, lrs[j])?;
    point.set_level(j, stepped)
}

/// One row of the optimization trace. `f1` and `grad_norm_sq` describe the
/// solved stack before the step's top-level update; `mse` the top iterate
/// after it. `cg_residual` is populated only under the iterative solver.
#[derive(Clone, Debug, serde::Serialize)]
pub struct TraceRecord {
    pub step: usize,
    pub f1: f64,
    pub grad_norm_sq: f64,
    pub cum_avg_grad_sq: f64,
    pub mse: Option<f64>,
    pub wall_micros: u64,
    pub cg_residual: Option<f64>,
}

/// Run the full driver loop from `init` (its top entry is the starting
/// iterate, its lower entries the first warm start). `reference`, when given,
/// is the comparison point for the trace's `mse` column. Step failures are
/// wrapped in [`Error::AtStep`] with the offending outer step.
pub fn run(
    problem: &MultilevelProblem,
    reference: Option<&Array1<f64>>,
    init: &PointStack,
    cfg: &SolverConfig,
) -> Result<Vec<TraceRecord>> {
    run_observed(problem, reference, init, cfg, |_, _| Ok(()))
}

/// [`run`] with a per-step observer invoked after each outer update with the
/// post-update stack (top level moved, lower levels still at their last
/// solved values). Observer failures abort the run like any other step error.
pub fn run_observed(
    problem: &MultilevelProblem,
    reference: Option<&Array1<f64>>,
    init: &PointStack,
    cfg: &SolverConfig,
    mut observe: impl FnMut(usize, &PointStack) -> Result<()>,
) -> Result<Vec<TraceRecord>> {
    cfg.validate()?;
    check_point_shape(problem, init, "run")?;
    if let Some(r) = reference {
        if r.len() != problem.dim(0) {
            return Err(Error::shape("run reference", problem.dim(0), r.len()));
        }
    }

    let mut x1 = init.level(0).clone();
    let mut warm = init.clone();
    let mut adam = AdamState::new(problem.dim(0));
    let mut records = Vec::with_capacity(cfg.outer_steps);
    let mut cum = 0.0f64;

    for step in 0..cfg.outer_steps {
        let t0 = Instant::now();
        let outcome: Result<()> = (|| {
            let stack = nested_lower_solve(problem, &x1, &warm, cfg)?;
            let (grad, cg_residual) = hypergradient(problem, &stack, cfg)?;
            let f1 = evaluate(problem, 0, &stack)?;
            let gsq = grad.dot(&grad);
            if !gsq.is_finite() {
                return Err(Error::NonFinite { context: "hypergradient norm".into() });
            }
            cum += gsq;
            let lr = lr_outer_at(cfg, step);
            let (next_adam, next_x) = adam_step(&adam, &x1, &grad, step + 1, lr, &cfg.adam)?;
            adam = next_adam;
            x1 = next_x;
            let mse = reference.map(|r| mse_to_reference(&x1, r));
            records.push(TraceRecord {
                step,
                f1,
                grad_norm_sq: gsq,
                cum_avg_grad_sq: cum / (step as f64 + 1.0),
                mse,
                wall_micros: t0.elapsed().as_micros() as u64,
                cg_residual,
            });
            warm = stack;
            // The post-update top value with the pre-update lower solution is
            // exactly the warm start the next step (or an observer's
            // inference pass) begins from.
            let mut observed = warm.clone();
            observed.set_level(0, x1.clone())?;
            observe(step, &observed)?;
            Ok(())
        })();
        if let Err(source) = outcome {
            return Err(Error::AtStep { step, source: Box::new(source) });
        }
    }
    Ok(records)
}

/// Dispatch the configured gradient estimator at a solved stack. Also returns
/// the worst linear-solve residual when the iterative solver is active.
pub(crate) fn hypergradient(
    problem: &MultilevelProblem,
    stack: &PointStack,
    cfg: &SolverConfig,
) -> Result<(Array1<f64>, Option<f64>)> {
    match cfg.method {
        GradientMethod::Vgd => Ok((vgd_gradient(problem.objective(0), stack)?, None)),
        GradientMethod::Fd => Ok((fd_hypergradient(problem, stack.level(0), stack, cfg)?, None)),
        GradientMethod::Id => {
            let is_cg = cfg.solve.kind == SolveKind::Cg;
            if problem.n_levels() == 3 {
                let tri_cfg = TrilevelConfig {
                    solve: cfg.solve,
                    curvature: CurvatureMode::Auto,
                    stationarity_tol: cfg.stationarity_tol,
                    fd: FdConfig::default(),
                };
                let jacs = TrilevelJacobians::compute(
                    problem.objective(1),
                    problem.objective(2),
                    stack,
                    &tri_cfg,
                )?;
                let grad = grad_with_jacobians(problem.objective(0), stack, &jacs)?;
                Ok((grad, is_cg.then_some(jacs.solve_residual)))
            } else {
                let table = build_table(problem, stack, &cfg.table_config())?;
                let grad = grad_full(problem, stack, &table)?;
                Ok((grad, is_cg.then(|| table.max_solve_residual())))
            }
        }
    }
}

/// Descent-guarantee probe configuration: number of exact-solve gradient
/// steps and an optional explicit step size (defaults to `1 / lambda_max`).
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct Theorem4Config {
    pub steps: usize,
    pub beta: Option<f64>,
}

impl Default for Theorem4Config {
    fn default() -> Self {
        Theorem4Config { steps: 100, beta: None }
    }
}

/// Outcome of [`theorem4_check`]: `lhs` is the summed squared gradient norm
/// over the run, `rhs` the bound `F(x0) / (beta - beta^2 lambda_max / 2)`.
#[derive(Clone, Debug, serde::Serialize)]
pub struct Theorem4Report {
    pub steps: usize,
    pub beta: f64,
    pub lambda_max: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
    pub f_initial: f64,
    pub f_final: f64,
    pub grad_sq: Vec<f64>,
}

/// Check the descent guarantee for gradient descent on the reduced top
/// objective with exactly solved lower levels: with step `beta <= 1 /
/// lambda_max` and a nonnegative reduced objective,
/// `sum_t ||grad F(x_t)||^2 <= F(x0) / (beta - beta^2 lambda_max / 2)`.
///
/// `lambda_max` must dominate the reduced Hessian's spectrum; the bound's
/// derivation also assumes `inf F >= 0`, which the caller guarantees.
pub fn theorem4_check(
    problem: &MultilevelProblem,
    x0: &Array1<f64>,
    lambda_max: f64,
    cfg: &Theorem4Config,
) -> Result<Theorem4Report> {
    if !(lambda_max > 0.0 && lambda_max.is_finite()) {
        return Err(Error::Config(format!(
            "lambda_max must be positive and finite, got {lambda_max}"
        )));
    }
    if cfg.steps == 0 {
        return Err(Error::Config("theorem4_check needs at least one step".into()));
    }
    let beta = cfg.beta.unwrap_or(1.0 / lambda_max);
    if !(beta > 0.0) || beta > 1.0 / lambda_max {
        return Err(Error::Config(format!(
            "beta must lie in (0, 1/lambda_max] = (0, {:.6e}], got {beta}",
            1.0 / lambda_max
        )));
    }
    if x0.len() != problem.dim(0) {
        return Err(Error::shape("theorem4_check", problem.dim(0), x0.len()));
    }

    let table_cfg = TableConfig::default();
    let mut point = problem.zero_point();
    point.set_level(0, x0.clone())?;
    newton_resolve_window(problem, &mut point, 1, &table_cfg, 1e-11, 128)?;
    let f_initial = evaluate(problem, 0, &point)?;

    let mut grad_sq = Vec::with_capacity(cfg.steps);
    let mut lhs = 0.0;
    for _ in 0..cfg.steps {
        let table = build_table(problem, &point, &table_cfg)?;
        let g = grad_full(problem, &point, &table)?;
        let gsq = g.dot(&g);
        lhs += gsq;
        grad_sq.push(gsq);
        let next = gd_step(point.level(0), &g, beta)?;
        point.set_level(0, next)?;
        newton_resolve_window(problem, &mut point, 1, &table_cfg, 1e-11, 128)?;
    }
    let f_final = evaluate(problem, 0, &point)?;
    let rhs = f_initial / (beta - beta * beta * lambda_max / 2.0);
    let pass = lhs <= rhs + 1e-9 * (1.0 + rhs.abs());
    Ok(Theorem4Report {
        steps: cfg.steps,
        beta,
        lambda_max,
        lhs,
        rhs,
        pass,
        f_initial,
        f_final,
        grad_sq,
    })
}
