//! Baseline top-level gradient estimators the implicit method is compared
//! against: the plain top-level partial gradient, and central finite
//! differences of the truncated reduced objective.
//!
//! Both run under the same inner-solve budget as the main driver so that
//! comparisons isolate gradient quality, not solve effort. The partial
//! gradient ignores how lower levels respond entirely; on problems where the
//! response matters it converges to the wrong point, which is precisely what
//! the experiments exhibit.

use ndarray::Array1;

use crate::error::{Error, Result};
use crate::model::{evaluate, DerivativeOracle, MultilevelProblem, PointStack};
use crate::optim::{nested_lower_solve, SolverConfig};

/// Step control for [`fd_hypergradient`]; the probe step for coordinate `k`
/// is `step * (1 + |x_k|)`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FdHyperConfig {
    pub step: f64,
}

impl Default for FdHyperConfig {
    fn default() -> Self {
        FdHyperConfig { step: 1e-3 }
    }
}

impl FdHyperConfig {
    pub fn with_step(step: f64) -> Self {
        FdHyperConfig { step }
    }
}

/// Top-level partial gradient at a solved stack: the response of every lower
/// level is ignored. Never evaluates any lower level's oracle.
pub fn vgd_gradient(f1: &dyn DerivativeOracle, point: &PointStack) -> Result<Array1<f64>> {
    let g = f1.grad_block(0, point)?;
    if !g.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { context: "vgd_gradient".into() });
    }
    Ok(g)
}

/// Central finite differences of the truncated reduced objective: each of the
/// `2 d` probes re-runs the budgeted nested solve warm-started from `warm`
/// (normally the unperturbed solved stack) and evaluates the top objective.
///
/// With an exact inner budget this converges to the true hypergradient at
/// rate `O(step^2)`; under truncation it inherits the inner solve's bias.
pub fn fd_hypergradient(
    problem: &MultilevelProblem,
    x1: &Array1<f64>,
    warm: &PointStack,
    cfg: &SolverConfig,
) -> Result<Array1<f64>> {
    let d = problem.dim(0);
    if x1.len() != d {
        return Err(Error::shape("fd_hypergradient", d, x1.len()));
    }
    let mut grad = Array1::zeros(d);
    for k in 0..d {
        let h = cfg.fd_hyper.step * (1.0 + x1[k].abs());
        let mut sides = [0.0f64; 2];
        for (slot, sign) in [1.0f64, -1.0].into_iter().enumerate() {
            let mut probe = x1.clone();
            probe[k] += sign * h;
            let stack = nested_lower_solve(problem, &probe, warm, cfg)?;
            sides[slot] = evaluate(problem, 0, &stack)?;
        }
        grad[k] = (sides[0] - sides[1]) / (2.0 * h);
    }
    if !grad.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { context: "fd_hypergradient".into() });
    }
    Ok(grad)
}
