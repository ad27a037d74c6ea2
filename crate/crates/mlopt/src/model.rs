//! Core data model for nested multilevel problems.
//!
//! A problem with `n` levels optimizes variables `x_0, ..., x_{n-1}` where
//! level 0 is the outermost decision and each deeper level minimizes its own
//! objective given everything above it. Level `i`'s objective is a
//! [`DerivativeOracle`] supplying values and derivative blocks at a full
//! variable stack. Internally levels are 0-based; log output uses 1-based
//! labels.
//!
//! Index convention for blocks: `hess_block(r, c)[a, b] = d2 f / d(x_r)_a d(x_c)_b`,
//! so the block has shape `dims[r] x dims[c]` and `hess_block(r, c)` equals
//! `hess_block(c, r)` transposed for twice continuously differentiable
//! objectives.

use std::sync::Arc;

use ndarray::{Array1, Array2, Array3};

use crate::error::{Error, Result};

/// Derivative information for one level's objective at a full variable stack.
///
/// Implementations must be deterministic: identical points yield bitwise
/// identical outputs. Third-order slices are optional; `has_third_order`
/// advertises them and the default `third_slice` reports the capability gap.
pub trait DerivativeOracle: Send + Sync {
    /// Objective value at the stacked point.
    fn value(&self, point: &PointStack) -> Result<f64>;

    /// Gradient with respect to level `j`, length `dims[j]`.
    fn grad_block(&self, j: usize, point: &PointStack) -> Result<Array1<f64>>;

    /// Second-derivative block of shape `dims[r] x dims[c]`.
    fn hess_block(&self, r: usize, c: usize, point: &PointStack) -> Result<Array2<f64>>;

    /// Third-derivative slice `T[a, b, s] = d3 f / d(x_r)_a d(x_c)_b d(x_s)_s`
    /// of shape `dims[r] x dims[c] x dims[s]`.
    fn third_slice(
        &self,
        r: usize,
        c: usize,
        s: usize,
        point: &PointStack,
    ) -> Result<Array3<f64>> {
        let _ = (r, c, s, point);
        Err(Error::MissingThirdOrder { level: usize::MAX, context: "third_slice".into() })
    }

    /// Whether `third_slice` is implemented.
    fn has_third_order(&self) -> bool {
        false
    }
}

/// Shared handle to an oracle; problems are immutable once built and safe to
/// read from multiple threads.
pub type OracleHandle = Arc<dyn DerivativeOracle>;

/// A full variable stack plus the stationarity residuals recorded by the last
/// lower-level solve. `residual(i)` is the reduced-gradient norm of level `i`'s
/// subproblem at the time it was last solved; `None` means never solved.
#[derive(Clone, Debug)]
pub struct PointStack {
    values: Vec<Array1<f64>>,
    residuals: Vec<Option<f64>>,
}

impl PointStack {
    /// Builds a stack from per-level values with no recorded residuals.
    pub fn new(values: Vec<Array1<f64>>) -> Self {
        let n = values.len();
        PointStack { values, residuals: vec![None; n] }
    }

    pub fn n_levels(&self) -> usize {
        self.values.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.values.iter().map(|v| v.len()).collect()
    }

    pub fn level(&self, i: usize) -> &Array1<f64> {
        &self.values[i]
    }

    /// Replaces level `i`. Fails on shape change or non-finite entries; the
    /// stack must stay finite after every solver step.
    pub fn set_level(&mut self, i: usize, value: Array1<f64>) -> Result<()> {
        if value.len() != self.values[i].len() {
            return Err(Error::shape(
                format!("PointStack::set_level({i})"),
                self.values[i].len(),
                value.len(),
            ));
        }
        if !value.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { context: format!("PointStack::set_level({i})") });
        }
        self.values[i] = value;
        Ok(())
    }

    pub fn residual(&self, i: usize) -> Option<f64> {
        self.residuals[i]
    }

    pub fn set_residual(&mut self, i: usize, residual: f64) {
        self.residuals[i] = Some(residual);
    }

    pub fn clear_residuals(&mut self) {
        for r in &mut self.residuals {
            *r = None;
        }
    }

    /// Largest recorded residual over levels `1..n`, or `None` if any of them
    /// was never solved.
    pub fn worst_lower_residual(&self) -> Option<f64> {
        let mut worst = 0.0f64;
        for i in 1..self.n_levels() {
            worst = worst.max(self.residuals[i]?);
        }
        Some(worst)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// An `n`-level nested problem: dimensions, one oracle per level, and a name
/// used in reports.
#[derive(Clone)]
pub struct MultilevelProblem {
    name: String,
    dims: Vec<usize>,
    objectives: Vec<OracleHandle>,
}

impl std::fmt::Debug for MultilevelProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MultilevelProblem")
            .field("name", &self.name)
            .field("dims", &self.dims)
            .finish()
    }
}

impl MultilevelProblem {
    pub fn new(
        name: impl Into<String>,
        dims: Vec<usize>,
        objectives: Vec<OracleHandle>,
    ) -> Result<Self> {
        let name = name.into();
        if dims.len() < 2 {
            return Err(Error::structure(
                format!("problem `{name}`"),
                format!("needs at least 2 levels, got {}", dims.len()),
            ));
        }
        if objectives.len() != dims.len() {
            return Err(Error::structure(
                format!("problem `{name}`"),
                format!("{} levels but {} objectives", dims.len(), objectives.len()),
            ));
        }
        if let Some(i) = dims.iter().position(|&d| d == 0) {
            return Err(Error::structure(
                format!("problem `{name}`"),
                format!("level {} has dimension 0", i + 1),
            ));
        }
        Ok(MultilevelProblem { name, dims, objectives })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n_levels(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn dim(&self, i: usize) -> usize {
        self.dims[i]
    }

    pub fn objective(&self, i: usize) -> &dyn DerivativeOracle {
        self.objectives[i].as_ref()
    }

    pub fn objective_handle(&self, i: usize) -> OracleHandle {
        Arc::clone(&self.objectives[i])
    }

    /// All-zero stack with this problem's shape.
    pub fn zero_point(&self) -> PointStack {
        PointStack::new(self.dims.iter().map(|&d| Array1::zeros(d)).collect())
    }

    /// Stack from explicit values, shape-checked against the problem.
    pub fn point(&self, values: Vec<Array1<f64>>) -> Result<PointStack> {
        if values.len() != self.dims.len() {
            return Err(Error::shape(
                format!("problem `{}` point", self.name),
                self.dims.len(),
                values.len(),
            ));
        }
        for (i, v) in values.iter().enumerate() {
            if v.len() != self.dims[i] {
                return Err(Error::shape(
                    format!("problem `{}` point level {}", self.name, i + 1),
                    self.dims[i],
                    v.len(),
                ));
            }
        }
        Ok(PointStack::new(values))
    }
}

/// Evaluates level `level`'s objective, rejecting non-finite results.
pub fn evaluate(problem: &MultilevelProblem, level: usize, point: &PointStack) -> Result<f64> {
    check_point_shape(problem, point, "evaluate")?;
    let v = problem.objective(level).value(point)?;
    if !v.is_finite() {
        return Err(Error::NonFinite {
            context: format!("evaluate(level {}) on `{}`", level + 1, problem.name()),
        });
    }
    Ok(v)
}

/// One consistency check from [`validate`].
#[derive(Clone, Debug)]
pub struct SymmetryCheck {
    /// 1-based level label of the objective checked.
    pub level: usize,
    pub description: String,
    pub deviation: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Outcome of a [`validate`] run: hard structural failures surface as errors,
/// soft symmetry deviations are listed per block pair.
#[derive(Clone, Debug, Default)]
pub struct ValidationReport {
    pub checks: Vec<SymmetryCheck>,
}

impl ValidationReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn worst(&self) -> Option<&SymmetryCheck> {
        self.checks
            .iter()
            .max_by(|a, b| (a.deviation / a.tol).total_cmp(&(b.deviation / b.tol)))
    }
}

/// Checks every oracle at a probe point: block shapes (hard error), the
/// transpose law `hess_block(r, c) == hess_block(c, r)^T` within
/// `1e-8 * (1 + max_abs)`, and permutation symmetry of same-variable
/// third-order slices where available.
pub fn validate(problem: &MultilevelProblem, probe: &PointStack) -> Result<ValidationReport> {
    check_point_shape(problem, probe, "validate")?;
    let n = problem.n_levels();
    let mut report = ValidationReport::default();

    for level in 0..n {
        let f = problem.objective(level);
        let label = level + 1;

        let v = f.value(probe)?;
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: format!("validate: value of level {label} objective"),
            });
        }

        for j in 0..n {
            let g = f.grad_block(j, probe)?;
            if g.len() != problem.dim(j) {
                return Err(Error::shape(
                    format!("validate: grad_block({j}) of level {label} objective"),
                    problem.dim(j),
                    g.len(),
                ));
            }
        }

        for r in 0..n {
            for c in r..n {
                let h_rc = f.hess_block(r, c, probe)?;
                if h_rc.dim() != (problem.dim(r), problem.dim(c)) {
                    return Err(Error::shape(
                        format!("validate: hess_block({r}, {c}) of level {label} objective"),
                        format!("{}x{}", problem.dim(r), problem.dim(c)),
                        format!("{}x{}", h_rc.dim().0, h_rc.dim().1),
                    ));
                }
                let h_cr = f.hess_block(c, r, probe)?;
                if h_cr.dim() != (problem.dim(c), problem.dim(r)) {
                    return Err(Error::shape(
                        format!("validate: hess_block({c}, {r}) of level {label} objective"),
                        format!("{}x{}", problem.dim(c), problem.dim(r)),
                        format!("{}x{}", h_cr.dim().0, h_cr.dim().1),
                    ));
                }
                let dev = max_abs(&(&h_rc - &h_cr.t()));
                let scale = max_abs(&h_rc).max(max_abs(&h_cr));
                let tol = 1e-8 * (1.0 + scale);
                report.checks.push(SymmetryCheck {
                    level: label,
                    description: format!("hess_block({r},{c}) vs hess_block({c},{r})^T"),
                    deviation: dev,
                    tol,
                    pass: dev <= tol,
                });
            }
        }

        if f.has_third_order() {
            for v_idx in 0..n {
                let t = f.third_slice(v_idx, v_idx, v_idx, probe)?;
                let d = problem.dim(v_idx);
                if t.dim() != (d, d, d) {
                    return Err(Error::shape(
                        format!(
                            "validate: third_slice({v_idx},{v_idx},{v_idx}) of level {label} objective"
                        ),
                        format!("{d}x{d}x{d}"),
                        format!("{:?}", t.dim()),
                    ));
                }
                let mut dev = 0.0f64;
                let mut scale = 0.0f64;
                for a in 0..d {
                    for b in 0..d {
                        for s in 0..d {
                            let x = t[[a, b, s]];
                            scale = scale.max(x.abs());
                            for &(p, q, u) in
                                &[(a, s, b), (b, a, s), (b, s, a), (s, a, b), (s, b, a)]
                            {
                                dev = dev.max((x - t[[p, q, u]]).abs());
                            }
                        }
                    }
                }
                let tol = 1e-8 * (1.0 + scale);
                report.checks.push(SymmetryCheck {
                    level: label,
                    description: format!("third_slice({v_idx},{v_idx},{v_idx}) permutation symmetry"),
                    deviation: dev,
                    tol,
                    pass: dev <= tol,
                });
            }
        }
    }
    Ok(report)
}

pub(crate) fn check_point_shape(
    problem: &MultilevelProblem,
    point: &PointStack,
    context: &str,
) -> Result<()> {
    if point.n_levels() != problem.n_levels() || point.dims() != problem.dims() {
        return Err(Error::shape(
            format!("{context} on `{}`", problem.name()),
            format!("{:?}", problem.dims()),
            format!("{:?}", point.dims()),
        ));
    }
    Ok(())
}

pub(crate) fn max_abs<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Reject points whose recorded residual at `level` (0-based) exceeds `tol`;
/// an infinite `tol` disables the gate. Error labels are 1-based.
pub(crate) fn require_solved(point: &PointStack, level: usize, tol: f64) -> Result<()> {
    if tol.is_infinite() {
        return Ok(());
    }
    match point.residual(level) {
        None => Err(Error::UnsolvedPoint { level: level + 1, tol }),
        // Negated comparison also trips on NaN residuals.
        Some(r) if !(r <= tol) => Err(Error::StalePoint { level: level + 1, residual: r, tol }),
        Some(_) => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// f(x, y) = x * y on two scalar levels, with an optional deliberate
    /// asymmetry in the cross blocks for negative-control tests.
    struct Bilinear {
        skew: f64,
    }

    impl DerivativeOracle for Bilinear {
        fn value(&self, p: &PointStack) -> Result<f64> {
            Ok(p.level(0)[0] * p.level(1)[0])
        }

        fn grad_block(&self, j: usize, p: &PointStack) -> Result<Array1<f64>> {
            Ok(match j {
                0 => array![p.level(1)[0]],
                _ => array![p.level(0)[0]],
            })
        }

        fn hess_block(&self, r: usize, c: usize, _p: &PointStack) -> Result<Array2<f64>> {
            Ok(match (r, c) {
                (0, 1) => array![[1.0 + self.skew]],
                (1, 0) => array![[1.0]],
                _ => array![[0.0]],
            })
        }
    }

    fn bilinear_problem(skew: f64) -> MultilevelProblem {
        MultilevelProblem::new(
            "bilinear",
            vec![1, 1],
            vec![Arc::new(Bilinear { skew: 0.0 }), Arc::new(Bilinear { skew })],
        )
        .unwrap()
    }

    #[test]
    fn rejects_single_level() {
        let err = MultilevelProblem::new("bad", vec![3], vec![Arc::new(Bilinear { skew: 0.0 })])
            .unwrap_err();
        assert!(matches!(err, Error::Structure { .. }), "got {err}");
    }

    #[test]
    fn rejects_zero_dimension() {
        let oracles: Vec<OracleHandle> =
            vec![Arc::new(Bilinear { skew: 0.0 }), Arc::new(Bilinear { skew: 0.0 })];
        let err = MultilevelProblem::new("bad", vec![1, 0], oracles).unwrap_err();
        assert!(err.to_string().contains("dimension 0"), "got {err}");
    }

    #[test]
    fn point_shape_checked() {
        let p = bilinear_problem(0.0);
        assert!(p.point(vec![array![1.0], array![2.0]]).is_ok());
        assert!(p.point(vec![array![1.0, 2.0], array![2.0]]).is_err());
        assert!(p.point(vec![array![1.0]]).is_err());
    }

    #[test]
    fn evaluate_is_deterministic() {
        let p = bilinear_problem(0.0);
        let pt = p.point(vec![array![3.0], array![-2.0]]).unwrap();
        let a = evaluate(&p, 0, &pt).unwrap();
        let b = evaluate(&p, 0, &pt).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(a, -6.0);
    }

    #[test]
    fn validate_passes_symmetric_bilinear() {
        let p = bilinear_problem(0.0);
        let probe = p.point(vec![array![0.3], array![-0.7]]).unwrap();
        let report = validate(&p, &probe).unwrap();
        assert!(report.pass());
        let worst = report.worst().unwrap();
        assert_eq!(worst.deviation, 0.0);
    }

    #[test]
    fn validate_flags_asymmetric_cross_block() {
        let p = bilinear_problem(1e-3);
        let probe = p.point(vec![array![0.3], array![-0.7]]).unwrap();
        let report = validate(&p, &probe).unwrap();
        assert!(!report.pass());
        let bad = report.checks.iter().find(|c| !c.pass).unwrap();
        assert_eq!(bad.level, 2);
        assert!((bad.deviation - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn set_level_rejects_non_finite() {
        let p = bilinear_problem(0.0);
        let mut pt = p.zero_point();
        assert!(pt.set_level(0, array![f64::NAN]).is_err());
        assert!(pt.set_level(0, array![1.0, 2.0]).is_err());
        assert!(pt.set_level(0, array![1.0]).is_ok());
    }

    #[test]
    fn residual_bookkeeping() {
        let p = bilinear_problem(0.0);
        let mut pt = p.zero_point();
        assert_eq!(pt.worst_lower_residual(), None);
        pt.set_residual(1, 1e-9);
        assert_eq!(pt.worst_lower_residual(), Some(1e-9));
        pt.clear_residuals();
        assert_eq!(pt.residual(1), None);
    }
}
