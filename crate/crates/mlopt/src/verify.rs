//! Self-contained verification suites: closed-form values on the market
//! game, agreement between the recursive table and exact elimination on
//! random quadratic chains, and the descent-guarantee probe. The command-line
//! `verify` subcommand prints one line per check; tests reuse the same rows.

use ndarray::Array1;

use crate::error::Result;
use crate::experiments::stackelberg::{build_stackelberg, equilibrium_stack, StackelbergSpec};
use crate::model::max_abs;
use crate::nlevel::{build_table, grad_full, trilevel_consistency, TableConfig};
use crate::optim::{theorem4_check, Theorem4Config};
use crate::synthetic::QuadraticProblem;
use crate::trilevel::{grad_trilevel, TrilevelConfig};

/// Which checks to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Quadratic,
    Stackelberg,
    Theorem4,
    All,
}

impl std::str::FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "quadratic" => Ok(Suite::Quadratic),
            "stackelberg" => Ok(Suite::Stackelberg),
            "theorem4" => Ok(Suite::Theorem4),
            "all" => Ok(Suite::All),
            other => Err(format!(
                "unknown suite '{other}' (expected quadratic, stackelberg, theorem4, or all)"
            )),
        }
    }
}

impl std::fmt::Display for Suite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Suite::Quadratic => "quadratic",
            Suite::Stackelberg => "stackelberg",
            Suite::Theorem4 => "theorem4",
            Suite::All => "all",
        };
        f.write_str(s)
    }
}

/// One named check with its measured evidence.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

fn check(name: impl Into<String>, pass: bool, detail: String) -> CheckResult {
    CheckResult { name: name.into(), pass, detail }
}

/// Run a suite and return its rows; `pass` must hold on every row for the
/// suite to count as clean.
pub fn run_suite(suite: Suite) -> Result<Vec<CheckResult>> {
    match suite {
        Suite::Quadratic => quadratic_suite(),
        Suite::Stackelberg => stackelberg_suite(),
        Suite::Theorem4 => theorem4_suite(),
        Suite::All => {
            let mut rows = stackelberg_suite()?;
            rows.extend(quadratic_suite()?);
            rows.extend(theorem4_suite()?);
            Ok(rows)
        }
    }
}

fn stackelberg_suite() -> Result<Vec<CheckResult>> {
    let mut rows = Vec::new();
    let cfg = TrilevelConfig::default();
    for dim in [1usize, 5] {
        let p = build_stackelberg(&StackelbergSpec { dim })?;
        let (f1, f2, f3) = (p.objective(0), p.objective(1), p.objective(2));

        let origin = equilibrium_stack(&Array1::zeros(dim));
        let g0 = grad_trilevel(f1, f2, f3, &origin, &cfg)?;
        let dev0 = max_abs(&(&g0 + 0.25));
        rows.push(check(
            format!("stackelberg d={dim}: gradient at x=0 is -1/4"),
            dev0 <= 1e-10,
            format!("max deviation {dev0:.3e}"),
        ));

        let opt = equilibrium_stack(&Array1::from_elem(dim, 0.5));
        let gopt = grad_trilevel(f1, f2, f3, &opt, &cfg)?;
        let devo = max_abs(&gopt);
        rows.push(check(
            format!("stackelberg d={dim}: gradient vanishes at x=1/2"),
            devo <= 1e-10,
            format!("max |grad| {devo:.3e}"),
        ));
    }

    let p = build_stackelberg(&StackelbergSpec { dim: 1 })?;
    let point = equilibrium_stack(&Array1::from_elem(1, 0.2));
    let table = build_table(&p, &point, &TableConfig::default())?;
    let entries = [
        ("total(2,1)", table.total(1, 0).unwrap()[(0, 0)], -0.5),
        ("total(3,2)", table.total(2, 1).unwrap()[(0, 0)], -0.5),
        ("total(3,1)", table.total(2, 0).unwrap()[(0, 0)], -0.25),
        ("partial(3,1)", table.partial(2, 0).unwrap()[(0, 0)], -0.5),
    ];
    let worst = entries.iter().map(|(_, got, want)| (got - want).abs()).fold(0.0, f64::max);
    rows.push(check(
        "stackelberg d=1: solution-map table entries",
        worst <= 1e-10,
        format!("worst entry deviation {worst:.3e}"),
    ));
    Ok(rows)
}

fn quadratic_suite() -> Result<Vec<CheckResult>> {
    let mut rows = Vec::new();
    let cfg = TableConfig::default();

    // Three-level chains: recursive table vs closed form vs exact reduction.
    let mut worst_consistency = 0.0f64;
    let mut worst_grad = 0.0f64;
    for seed in 0..8u64 {
        let q = QuadraticProblem::chain(seed, &[2, 3, 2])?;
        let x0 = Array1::from_vec(vec![0.4 + 0.05 * seed as f64, -0.3]);
        let point = q.respond(&x0)?;
        worst_consistency = worst_consistency.max(trilevel_consistency(&q.problem, &point, &cfg)?);

        let table = build_table(&q.problem, &point, &cfg)?;
        let g = grad_full(&q.problem, &point, &table)?;
        let want = q.reduced_grad(&x0);
        let rel = max_abs(&(&g - &want)) / (1.0 + max_abs(&want));
        worst_grad = worst_grad.max(rel);
    }
    rows.push(check(
        "quadratic 3-level: table gradient matches closed form",
        worst_consistency <= 1e-8,
        format!("worst disagreement {worst_consistency:.3e} over 8 seeds"),
    ));
    rows.push(check(
        "quadratic 3-level: gradient matches exact reduction",
        worst_grad <= 1e-8,
        format!("worst relative deviation {worst_grad:.3e}"),
    ));

    // Four-level chains: every table entry against exact elimination, and
    // the path-sum decomposition of the deepest total derivative.
    let mut worst_entry = 0.0f64;
    let mut worst_path = 0.0f64;
    for seed in 0..4u64 {
        let q = QuadraticProblem::chain(100 + seed, &[2, 2, 3, 2])?;
        let x0 = Array1::from_vec(vec![0.3, 0.1 * seed as f64 - 0.2]);
        let point = q.respond(&x0)?;
        let table = build_table(&q.problem, &point, &cfg)?;
        for i in 1..4 {
            for j in 0..i {
                let dev = max_abs(&(table.total(i, j).unwrap() - q.exact_total(i, j)));
                worst_entry = worst_entry.max(dev);
            }
        }
        // total(3,0) decomposed over all monotone paths through the levels.
        let p = |i: usize, j: usize| table.partial(i, j).unwrap();
        let path_sum = p(3, 0)
            + &p(3, 1).dot(p(1, 0))
            + &p(3, 2).dot(p(2, 0))
            + &p(3, 2).dot(&p(2, 1).dot(p(1, 0)));
        worst_path = worst_path.max(max_abs(&(&path_sum - table.total(3, 0).unwrap())));
    }
    rows.push(check(
        "quadratic 4-level: table matches exact elimination",
        worst_entry <= 1e-9,
        format!("worst entry deviation {worst_entry:.3e} over 4 seeds"),
    ));
    rows.push(check(
        "quadratic 4-level: path-sum identity",
        worst_path <= 1e-9,
        format!("worst deviation {worst_path:.3e}"),
    ));
    Ok(rows)
}

fn theorem4_suite() -> Result<Vec<CheckResult>> {
    let cfg = Theorem4Config::default();
    let mut failures = Vec::new();
    let mut worst_margin = f64::NEG_INFINITY;
    for seed in 0..20u64 {
        let q = QuadraticProblem::nonneg(seed, &[3, 2, 2])?;
        let x0 = Array1::from_elem(3, 0.7);
        let report = theorem4_check(&q.problem, &x0, q.lambda_max(), &cfg)?;
        let margin = (report.lhs - report.rhs) / (1.0 + report.rhs.abs());
        worst_margin = worst_margin.max(margin);
        if !report.pass {
            failures.push(seed);
        }
    }
    Ok(vec![check(
        "descent guarantee over 20 random nonnegative chains",
        failures.is_empty(),
        if failures.is_empty() {
            format!("worst normalized slack {worst_margin:.3e} (<= 0 means bound held)")
        } else {
            format!("failing seeds: {failures:?}")
        },
    )])
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::str::FromStr;

    #[test]
    fn suites_parse_and_pass() {
        for name in ["quadratic", "stackelberg", "theorem4"] {
            let suite = Suite::from_str(name).unwrap();
            let rows = run_suite(suite).unwrap();
            assert!(!rows.is_empty());
            for row in &rows {
                assert!(row.pass, "{}: {}", row.name, row.detail);
            }
        }
        assert!(Suite::from_str("bogus").is_err());
    }

    #[test]
    fn all_is_the_union() {
        let all = run_suite(Suite::All).unwrap();
        let parts = run_suite(Suite::Stackelberg).unwrap().len()
            + run_suite(Suite::Quadratic).unwrap().len()
            + run_suite(Suite::Theorem4).unwrap().len();
        assert_eq!(all.len(), parts);
    }
}
