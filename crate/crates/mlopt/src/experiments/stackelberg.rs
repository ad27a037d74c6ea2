//! Three-player sequential market game with a closed-form equilibrium.
//!
//! Players choose quantities `x`, `y`, `z` (each in `R^d`); the unit price is
//! `1 - x - y - z` coordinatewise and player `k`'s loss is the negated profit
//! `-v_k . (1 - x - y - z)` where `v_k` is its own quantity. Backward
//! induction gives `z*(x, y) = (1 - x - y) / 2`, `y*(x) = (1 - x) / 2` against
//! the responding third player, and the top player's reduced loss
//! `-x (1 - x) / 4` with optimum `x* = 1/2` per coordinate. Every loss is
//! quadratic, so all oracles are exact and third-order slices vanish.

use std::sync::Arc;

use ndarray::{Array1, Array2, Array3};

use crate::error::Result;
use crate::model::{DerivativeOracle, MultilevelProblem, PointStack};

/// Problem-size knob: all three players share one dimension `d >= 1`.
#[derive(Clone, Copy, Debug)]
pub struct StackelbergSpec {
    pub dim: usize,
}

impl Default for StackelbergSpec {
    fn default() -> Self {
        StackelbergSpec { dim: 1 }
    }
}

/// Negated profit of one player; the game is symmetric in structure, so a
/// single oracle parameterized by the owning level serves all three.
struct PlayerLoss {
    level: usize,
    dim: usize,
}

impl PlayerLoss {
    /// `1 - x - y - z`, the coordinatewise unit price.
    fn price(&self, point: &PointStack) -> Array1<f64> {
        let mut p = Array1::from_elem(self.dim, 1.0);
        for j in 0..3 {
            p -= point.level(j);
        }
        p
    }
}

impl DerivativeOracle for PlayerLoss {
    fn value(&self, point: &PointStack) -> Result<f64> {
        Ok(-point.level(self.level).dot(&self.price(point)))
    }

    fn grad_block(&self, j: usize, point: &PointStack) -> Result<Array1<f64>> {
        let own = point.level(self.level);
        if j == self.level {
            // d/d(own): -(price) + own, since own also enters the price.
            Ok(own - self.price(point))
        } else {
            Ok(own.to_owned())
        }
    }

    fn hess_block(&self, r: usize, c: usize, _point: &PointStack) -> Result<Array2<f64>> {
        let eye = Array2::eye(self.dim);
        if r == self.level && c == self.level {
            Ok(eye * 2.0)
        } else if r == self.level || c == self.level {
            Ok(eye)
        } else {
            Ok(Array2::zeros((self.dim, self.dim)))
        }
    }

    fn third_slice(
        &self,
        _r: usize,
        _c: usize,
        _s: usize,
        _point: &PointStack,
    ) -> Result<Array3<f64>> {
        Ok(Array3::zeros((self.dim, self.dim, self.dim)))
    }

    fn has_third_order(&self) -> bool {
        true
    }
}

/// Assemble the three-level game as a [`MultilevelProblem`].
pub fn build_stackelberg(spec: &StackelbergSpec) -> Result<MultilevelProblem> {
    let d = spec.dim;
    MultilevelProblem::new(
        "stackelberg",
        vec![d; 3],
        (0..3)
            .map(|level| Arc::new(PlayerLoss { level, dim: d }) as Arc<dyn DerivativeOracle>)
            .collect(),
    )
}

/// The known optimum `x* = 1/2` per coordinate.
pub fn reference_optimum(dim: usize) -> Array1<f64> {
    Array1::from_elem(dim, 0.5)
}

/// Exact lower-level equilibrium for a given top choice: `y = (1 - x) / 2`,
/// `z = (1 - x) / 4`, with zero residuals recorded.
pub fn equilibrium_stack(x: &Array1<f64>) -> PointStack {
    let y = x.mapv(|v| (1.0 - v) / 2.0);
    let z = x.mapv(|v| (1.0 - v) / 4.0);
    let mut point = PointStack::new(vec![x.to_owned(), y, z]);
    point.set_residual(1, 0.0);
    point.set_residual(2, 0.0);
    point
}
