//! A scalar three-level chain with a genuinely curved deepest solution map:
//! the deepest objective has a cubic term, so its solution map has nonzero
//! second derivative and the middle level's stationarity weight on it does
//! not vanish at equilibrium. Four independent gradient routes must agree
//! (analytic curvature, differenced curvature, the recursive table with
//! re-solved finite differences, and an outer difference of the exact
//! reduction), while the Gauss-Newton table must visibly disagree, proving
//! the curvature terms are load-bearing on this instance.

use std::sync::Arc;

use mlopt::model::{DerivativeOracle, MultilevelProblem, PointStack};
use mlopt::nlevel::{build_table, grad_full, newton_resolve_window, TableConfig, TableCurvature};
use mlopt::trilevel::{grad_trilevel, CurvatureMode, TrilevelConfig};
use mlopt::Result;
use ndarray::{Array1, Array2, Array3};

const ALPHA: f64 = 0.4;

/// f0 = x^2/2 + x z + y z.
struct Top;

impl DerivativeOracle for Top {
    fn value(&self, p: &PointStack) -> Result<f64> {
        let (x, y, z) = scalars(p);
        Ok(0.5 * x * x + x * z + y * z)
    }

    fn grad_block(&self, j: usize, p: &PointStack) -> Result<Array1<f64>> {
        let (x, y, z) = scalars(p);
        Ok(Array1::from_elem(
            1,
            match j {
                0 => x + z,
                1 => z,
                _ => x + y,
            },
        ))
    }

    fn hess_block(&self, r: usize, c: usize, _p: &PointStack) -> Result<Array2<f64>> {
        let v = match (r, c) {
            (0, 0) | (0, 2) | (2, 0) | (1, 2) | (2, 1) => 1.0,
            _ => 0.0,
        };
        Ok(Array2::from_elem((1, 1), v))
    }
}

/// f1 = y^2/2 + 0.7 x y + 0.3 y z - 0.6 z. The linear z term keeps the
/// stationarity weight on the deep solution map away from zero; the modest
/// y-z coupling keeps the reduced problem a strict minimum in y.
struct Middle;

impl DerivativeOracle for Middle {
    fn value(&self, p: &PointStack) -> Result<f64> {
        let (x, y, z) = scalars(p);
        Ok(0.5 * y * y + 0.7 * x * y + 0.3 * y * z - 0.6 * z)
    }

    fn grad_block(&self, j: usize, p: &PointStack) -> Result<Array1<f64>> {
        let (x, y, z) = scalars(p);
        Ok(Array1::from_elem(
            1,
            match j {
                0 => 0.7 * y,
                1 => y + 0.7 * x + 0.3 * z,
                _ => 0.3 * y - 0.6,
            },
        ))
    }

    fn hess_block(&self, r: usize, c: usize, _p: &PointStack) -> Result<Array2<f64>> {
        let v = match (r, c) {
            (1, 1) => 1.0,
            (0, 1) | (1, 0) => 0.7,
            (1, 2) | (2, 1) => 0.3,
            _ => 0.0,
        };
        Ok(Array2::from_elem((1, 1), v))
    }

    fn third_slice(&self, _r: usize, _c: usize, _s: usize, _p: &PointStack) -> Result<Array3<f64>> {
        Ok(Array3::zeros((1, 1, 1)))
    }

    fn has_third_order(&self) -> bool {
        true
    }
}

/// f2 = z^2/2 + (x + 0.4 y) z + alpha z^3 / 3; the cubic term curves the
/// solution map z(x, y).
struct Deep;

impl DerivativeOracle for Deep {
    fn value(&self, p: &PointStack) -> Result<f64> {
        let (x, y, z) = scalars(p);
        Ok(0.5 * z * z + (x + 0.4 * y) * z + ALPHA * z * z * z / 3.0)
    }

    fn grad_block(&self, j: usize, p: &PointStack) -> Result<Array1<f64>> {
        let (x, y, z) = scalars(p);
        Ok(Array1::from_elem(
            1,
            match j {
                0 => z,
                1 => 0.4 * z,
                _ => z + x + 0.4 * y + ALPHA * z * z,
            },
        ))
    }

    fn hess_block(&self, r: usize, c: usize, p: &PointStack) -> Result<Array2<f64>> {
        let (_, _, z) = scalars(p);
        let v = match (r, c) {
            (2, 2) => 1.0 + 2.0 * ALPHA * z,
            (0, 2) | (2, 0) => 1.0,
            (1, 2) | (2, 1) => 0.4,
            _ => 0.0,
        };
        Ok(Array2::from_elem((1, 1), v))
    }

    fn third_slice(&self, r: usize, c: usize, s: usize, _p: &PointStack) -> Result<Array3<f64>> {
        let v = if (r, c, s) == (2, 2, 2) { 2.0 * ALPHA } else { 0.0 };
        Ok(Array3::from_elem((1, 1, 1), v))
    }

    fn has_third_order(&self) -> bool {
        true
    }
}

fn scalars(p: &PointStack) -> (f64, f64, f64) {
    (p.level(0)[0], p.level(1)[0], p.level(2)[0])
}

fn problem() -> MultilevelProblem {
    MultilevelProblem::new(
        "cubic-chain",
        vec![1, 1, 1],
        vec![Arc::new(Top), Arc::new(Middle), Arc::new(Deep)],
    )
    .unwrap()
}

fn equilibrium(problem: &MultilevelProblem, x: f64) -> PointStack {
    let mut point = PointStack::new(vec![
        Array1::from_elem(1, x),
        Array1::from_elem(1, 0.2),
        Array1::from_elem(1, -0.3),
    ]);
    newton_resolve_window(problem, &mut point, 1, &TableConfig::default(), 1e-12, 60).unwrap();
    point
}

#[test]
fn all_exact_gradient_routes_agree_and_gauss_newton_does_not() {
    let p = problem();
    let x = 0.3;
    let point = equilibrium(&p, x);
    assert!(point.worst_lower_residual().unwrap() <= 1e-12);

    let (f0, f1, f2) = (p.objective(0), p.objective(1), p.objective(2));
    let analytic = grad_trilevel(
        f0,
        f1,
        f2,
        &point,
        &TrilevelConfig { curvature: CurvatureMode::Analytic, ..TrilevelConfig::default() },
    )
    .unwrap()[0];
    let differenced = grad_trilevel(
        f0,
        f1,
        f2,
        &point,
        &TrilevelConfig { curvature: CurvatureMode::Fd, ..TrilevelConfig::default() },
    )
    .unwrap()[0];

    let exact_fd_cfg = TableConfig::default().with_curvature(TableCurvature::ExactFd);
    let table = build_table(&p, &point, &exact_fd_cfg).unwrap();
    let tabled = grad_full(&p, &point, &table).unwrap()[0];

    // Outer central difference of the exact reduction, each probe re-solved
    // to machine-level stationarity.
    let h = 1e-5;
    let reduced = |x: f64| {
        let probe = equilibrium(&p, x);
        p.objective(0).value(&probe).unwrap()
    };
    let outer = (reduced(x + h) - reduced(x - h)) / (2.0 * h);

    // Frozen value from an independent bisection-plus-difference computation
    // of the exact reduction performed outside this codebase.
    let frozen = 0.43280869548;
    for (name, got) in [
        ("differenced", differenced),
        ("table", tabled),
        ("outer", outer),
        ("frozen", frozen),
    ] {
        let dev = (got - analytic).abs();
        assert!(dev <= 1e-6, "{name} route deviates from analytic by {dev:.3e}");
    }

    let gn_table = build_table(&p, &point, &TableConfig::default()).unwrap();
    let gn = grad_full(&p, &point, &gn_table).unwrap()[0];
    let gn_dev = (gn - analytic).abs();
    assert!(
        gn_dev > 1e-4,
        "Gauss-Newton should be visibly biased on this curved instance, got {gn_dev:.3e}"
    );
}
