//! Regularization tuning under training-data poisoning, as a three-level
//! game on a linear regression task.
//!
//! Levels, outermost first:
//!
//! 0. scalar log-weight `lambda`, minimizing validation error
//!    `f1 = (1/m) ||y_v - X_v theta||^2`;
//! 1. perturbation `P` of the training features (stored flattened
//!    row-major, `n x d`), minimizing
//!    `f2 = -(1/n) ||y_t - (X_t + P) theta||^2 + c/(n d) ||P||_F^2`,
//!    i.e. maximizing training error subject to a ridge penalty;
//! 2. weights `theta`, minimizing the poisoned training loss
//!    `f3 = (1/n) ||y_t - (X_t + P) theta||^2
//!          + (e^lambda / d) sum_j sqrt(theta_j^2 + delta)`.
//!
//! The smooth-L1 regularizer keeps `f3` twice differentiable with explicit
//! third-order slices, so the implicit curvature path stays analytic. The
//! data-fit blocks of `f2` and `f3` are exact negatives; only the two
//! regularizers break the zero-sum structure.
//!
//! A caution on scale: `third_slice` materializes whatever block is asked
//! for, so probing the all-`P` slice on real data would allocate
//! `(nd)^3` entries. The derivative paths used here only ever request
//! slices with at least one `theta` axis.

use std::sync::Arc;

use ndarray::{Array1, Array2, Array3};

use crate::error::{Error, Result};
use crate::model::{DerivativeOracle, MultilevelProblem, OracleHandle, PointStack};

use super::data::Split;

const LAMBDA: usize = 0;
const POISON: usize = 1;
const THETA: usize = 2;

/// Game constants: ridge weight on the perturbation and the smooth-L1 floor.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct HyperoptSpec {
    pub c: f64,
    pub delta: f64,
}

impl Default for HyperoptSpec {
    fn default() -> Self {
        HyperoptSpec { c: 100.0, delta: 1e-6 }
    }
}

struct Shared {
    xv: Array2<f64>,
    yv: Array1<f64>,
    xt: Array2<f64>,
    yt: Array1<f64>,
    c: f64,
    delta: f64,
}

impl Shared {
    fn n(&self) -> usize {
        self.xt.nrows()
    }

    fn d(&self) -> usize {
        self.xt.ncols()
    }

    fn m(&self) -> usize {
        self.xv.nrows()
    }

    fn poison(&self, point: &PointStack) -> Array2<f64> {
        Array2::from_shape_vec((self.n(), self.d()), point.level(POISON).to_vec())
            .expect("poison block length is n*d by construction")
    }

    /// Corrupted design matrix `A = X_t + P` and residual `A theta - y_t`.
    fn corrupted(&self, point: &PointStack) -> (Array2<f64>, Array1<f64>) {
        let a = &self.xt + &self.poison(point);
        let r = a.dot(point.level(THETA)) - &self.yt;
        (a, r)
    }

    /// `e^lambda / d`.
    fn reg_weight(&self, point: &PointStack) -> f64 {
        point.level(LAMBDA)[0].exp() / self.d() as f64
    }

    /// `(s, s', s'', s''')` of `s(u) = sqrt(u^2 + delta)` at each weight.
    fn smooth_l1(&self, theta: &Array1<f64>) -> [Array1<f64>; 4] {
        let s = theta.mapv(|u| (u * u + self.delta).sqrt());
        let s1 = theta.iter().zip(&s).map(|(&u, &s)| u / s).collect::<Array1<f64>>();
        let s2 = s.mapv(|s| self.delta / (s * s * s));
        let s3 = theta
            .iter()
            .zip(&s)
            .map(|(&u, &s)| -3.0 * self.delta * u / s.powi(5))
            .collect::<Array1<f64>>();
        [s, s1, s2, s3]
    }

    /// Row-major block-diagonal `I_n (x) block` over the flattened `P` axis.
    fn p_block_diag(&self, block: &Array2<f64>) -> Array2<f64> {
        let (n, d) = (self.n(), self.d());
        let mut out = Array2::zeros((n * d, n * d));
        for k in 0..n {
            out.slice_mut(ndarray::s![k * d..(k + 1) * d, k * d..(k + 1) * d]).assign(block);
        }
        out
    }

    /// Mixed data-fit block `d^2 fit / d theta d P`, shape `d x (n d)`:
    /// `[j, (k, l)] = (2/n) (delta_jl r_k + A_kj theta_l)`.
    fn fit_theta_poison(&self, point: &PointStack) -> Array2<f64> {
        let (n, d) = (self.n(), self.d());
        let (a, r) = self.corrupted(point);
        let theta = point.level(THETA);
        let scale = 2.0 / n as f64;
        let mut out = Array2::zeros((d, n * d));
        for j in 0..d {
            for k in 0..n {
                for l in 0..d {
                    let mut v = a[[k, j]] * theta[l];
                    if j == l {
                        v += r[k];
                    }
                    out[[j, k * d + l]] = scale * v;
                }
            }
        }
        out
    }

    fn zeros_block(&self, r: usize, c: usize) -> Array2<f64> {
        let dims = [1, self.n() * self.d(), self.d()];
        Array2::zeros((dims[r], dims[c]))
    }

    fn dim_of(&self, i: usize) -> usize {
        [1, self.n() * self.d(), self.d()][i]
    }
}

/// `f1`: validation mean squared error; depends on `theta` only.
struct ValidationLoss {
    data: Arc<Shared>,
}

impl DerivativeOracle for ValidationLoss {
    fn value(&self, point: &PointStack) -> Result<f64> {
        let r = self.data.xv.dot(point.level(THETA)) - &self.data.yv;
        Ok(r.dot(&r) / self.data.m() as f64)
    }

    fn grad_block(&self, j: usize, point: &PointStack) -> Result<Array1<f64>> {
        if j == THETA {
            let r = self.data.xv.dot(point.level(THETA)) - &self.data.yv;
            Ok(self.data.xv.t().dot(&r) * (2.0 / self.data.m() as f64))
        } else {
            Ok(Array1::zeros(self.data.dim_of(j)))
        }
    }

    fn hess_block(&self, r: usize, c: usize, _point: &PointStack) -> Result<Array2<f64>> {
        if (r, c) == (THETA, THETA) {
            Ok(self.data.xv.t().dot(&self.data.xv) * (2.0 / self.data.m() as f64))
        } else {
            Ok(self.data.zeros_block(r, c))
        }
    }
}

/// `f2`: negated poisoned training error plus a ridge penalty on `P`;
/// independent of `lambda`.
struct AttackObjective {
    data: Arc<Shared>,
}

impl AttackObjective {
    fn ridge(&self) -> f64 {
        let n = self.data.n() as f64;
        let d = self.data.d() as f64;
        2.0 * self.data.c / (n * d)
    }
}

impl DerivativeOracle for AttackObjective {
    fn value(&self, point: &PointStack) -> Result<f64> {
        let (_, r) = self.data.corrupted(point);
        let p = point.level(POISON);
        let n = self.data.n() as f64;
        Ok(-r.dot(&r) / n + 0.5 * self.ridge() * p.dot(p))
    }

    fn grad_block(&self, j: usize, point: &PointStack) -> Result<Array1<f64>> {
        let (n, d) = (self.data.n(), self.data.d());
        let scale = 2.0 / n as f64;
        match j {
            POISON => {
                let (_, r) = self.data.corrupted(point);
                let theta = point.level(THETA);
                let mut out = Array1::zeros(n * d);
                for k in 0..n {
                    for l in 0..d {
                        out[k * d + l] = -scale * r[k] * theta[l];
                    }
                }
                out += &(point.level(POISON) * self.ridge());
                Ok(out)
            }
            THETA => {
                let (a, r) = self.data.corrupted(point);
                Ok(a.t().dot(&r) * -scale)
            }
            _ => Ok(Array1::zeros(self.data.dim_of(j))),
        }
    }

    fn hess_block(&self, r: usize, c: usize, point: &PointStack) -> Result<Array2<f64>> {
        let n = self.data.n() as f64;
        let scale = 2.0 / n;
        match (r, c) {
            (POISON, POISON) => {
                let theta = point.level(THETA);
                let outer = theta
                    .view()
                    .insert_axis(ndarray::Axis(1))
                    .dot(&theta.view().insert_axis(ndarray::Axis(0)));
                let mut block = outer * -scale;
                block += &(Array2::eye(self.data.d()) * self.ridge());
                Ok(self.data.p_block_diag(&block))
            }
            (THETA, POISON) => Ok(self.data.fit_theta_poison(point) * -1.0),
            (POISON, THETA) => Ok(self.data.fit_theta_poison(point).t().to_owned() * -1.0),
            (THETA, THETA) => {
                let (a, _) = self.data.corrupted(point);
                Ok(a.t().dot(&a) * -scale)
            }
            _ => Ok(self.data.zeros_block(r, c)),
        }
    }
}

/// `f3`: poisoned training error plus the `lambda`-weighted smooth-L1
/// regularizer; carries the full third-order structure.
struct TrainingLoss {
    data: Arc<Shared>,
}

impl DerivativeOracle for TrainingLoss {
    fn value(&self, point: &PointStack) -> Result<f64> {
        let (_, r) = self.data.corrupted(point);
        let [s, ..] = self.data.smooth_l1(point.level(THETA));
        Ok(r.dot(&r) / self.data.n() as f64 + self.data.reg_weight(point) * s.sum())
    }

    fn grad_block(&self, j: usize, point: &PointStack) -> Result<Array1<f64>> {
        let (n, d) = (self.data.n(), self.data.d());
        let scale = 2.0 / n as f64;
        let w = self.data.reg_weight(point);
        match j {
            LAMBDA => {
                let [s, ..] = self.data.smooth_l1(point.level(THETA));
                Ok(ndarray::array![w * s.sum()])
            }
            POISON => {
                let (_, r) = self.data.corrupted(point);
                let theta = point.level(THETA);
                let mut out = Array1::zeros(n * d);
                for k in 0..n {
                    for l in 0..d {
                        out[k * d + l] = scale * r[k] * theta[l];
                    }
                }
                Ok(out)
            }
            THETA => {
                let (a, r) = self.data.corrupted(point);
                let [_, s1, ..] = self.data.smooth_l1(point.level(THETA));
                Ok(a.t().dot(&r) * scale + &(s1 * w))
            }
            _ => unreachable!("three levels"),
        }
    }

    fn hess_block(&self, r: usize, c: usize, point: &PointStack) -> Result<Array2<f64>> {
        let n = self.data.n() as f64;
        let scale = 2.0 / n;
        let w = self.data.reg_weight(point);
        let theta = point.level(THETA);
        match (r, c) {
            (LAMBDA, LAMBDA) => {
                let [s, ..] = self.data.smooth_l1(theta);
                Ok(ndarray::array![[w * s.sum()]])
            }
            (LAMBDA, THETA) => {
                let [_, s1, ..] = self.data.smooth_l1(theta);
                Ok((s1 * w).insert_axis(ndarray::Axis(0)))
            }
            (THETA, LAMBDA) => {
                let [_, s1, ..] = self.data.smooth_l1(theta);
                Ok((s1 * w).insert_axis(ndarray::Axis(1)))
            }
            (POISON, POISON) => {
                let outer = theta
                    .view()
                    .insert_axis(ndarray::Axis(1))
                    .dot(&theta.view().insert_axis(ndarray::Axis(0)));
                Ok(self.data.p_block_diag(&(outer * scale)))
            }
            (THETA, POISON) => Ok(self.data.fit_theta_poison(point)),
            (POISON, THETA) => Ok(self.data.fit_theta_poison(point).t().to_owned()),
            (THETA, THETA) => {
                let (a, _) = self.data.corrupted(point);
                let [_, _, s2, _] = self.data.smooth_l1(theta);
                Ok(a.t().dot(&a) * scale + &Array2::from_diag(&(s2 * w)))
            }
            _ => Ok(self.data.zeros_block(r, c)),
        }
    }

    fn third_slice(&self, r: usize, c: usize, s: usize, point: &PointStack) -> Result<Array3<f64>> {
        let dims = [1usize, self.data.n() * self.data.d(), self.data.d()];
        let w = self.data.reg_weight(point);
        let theta = point.level(THETA);
        let [sm, s1, s2, s3] = self.data.smooth_l1(theta);
        let d = self.data.d();

        // Regularizer contributions involve only lambda and theta axes; the
        // data fit contributes only to slices with one or two poison axes and
        // at least one theta axis.
        let slice = match (r, c, s) {
            (LAMBDA, LAMBDA, LAMBDA) => Array3::from_elem((1, 1, 1), w * sm.sum()),
            (LAMBDA, LAMBDA, THETA) | (LAMBDA, THETA, LAMBDA) | (THETA, LAMBDA, LAMBDA) => {
                let mut out = Array3::zeros((dims[r], dims[c], dims[s]));
                for (j, &v) in s1.iter().enumerate() {
                    let idx = [[j, 0, 0], [0, j, 0], [0, 0, j]][theta_position(r, c, s)];
                    out[idx] = w * v;
                }
                out
            }
            (LAMBDA, THETA, THETA) | (THETA, LAMBDA, THETA) | (THETA, THETA, LAMBDA) => {
                let mut out = Array3::zeros((dims[r], dims[c], dims[s]));
                for (j, &v) in s2.iter().enumerate() {
                    let idx = match lambda_position(r, c, s) {
                        0 => [0, j, j],
                        1 => [j, 0, j],
                        _ => [j, j, 0],
                    };
                    out[idx] = w * v;
                }
                out
            }
            (THETA, THETA, THETA) => {
                let mut out = Array3::zeros((d, d, d));
                for (j, &v) in s3.iter().enumerate() {
                    out[[j, j, j]] = w * v;
                }
                out
            }
            (THETA, THETA, POISON) => self.fit_ttp(point),
            (THETA, POISON, THETA) => self.fit_ttp(point).permuted_axes([0, 2, 1]),
            (POISON, THETA, THETA) => self.fit_ttp(point).permuted_axes([2, 0, 1]),
            (THETA, POISON, POISON) => self.fit_tpp(point),
            (POISON, THETA, POISON) => self.fit_tpp(point).permuted_axes([1, 0, 2]),
            (POISON, POISON, THETA) => self.fit_tpp(point).permuted_axes([1, 2, 0]),
            // Everything else (any poison with lambda, all-poison) vanishes.
            _ => Array3::zeros((dims[r], dims[c], dims[s])),
        };
        Ok(slice)
    }

    fn has_third_order(&self) -> bool {
        true
    }
}

impl TrainingLoss {
    /// `d^3 fit / d theta d theta d P`, canonical axes `(theta, theta, P)`:
    /// `[p, q, (k, l)] = (2/n) (delta_pl A_kq + A_kp delta_ql)`.
    fn fit_ttp(&self, point: &PointStack) -> Array3<f64> {
        let (n, d) = (self.data.n(), self.data.d());
        let (a, _) = self.data.corrupted(point);
        let scale = 2.0 / n as f64;
        let mut out = Array3::zeros((d, d, n * d));
        for p in 0..d {
            for q in 0..d {
                for k in 0..n {
                    out[[p, q, k * d + p]] += scale * a[[k, q]];
                    out[[p, q, k * d + q]] += scale * a[[k, p]];
                }
            }
        }
        out
    }

    /// `d^3 fit / d theta d P d P`, canonical axes `(theta, P, P)`:
    /// `[j, (k, l), (u, v)] = (2/n) delta_ku (delta_jl theta_v
    ///                        + delta_jv theta_l)`.
    fn fit_tpp(&self, point: &PointStack) -> Array3<f64> {
        let (n, d) = (self.data.n(), self.data.d());
        let theta = point.level(THETA);
        let scale = 2.0 / n as f64;
        let mut out = Array3::zeros((d, n * d, n * d));
        for j in 0..d {
            for k in 0..n {
                for v in 0..d {
                    out[[j, k * d + j, k * d + v]] += scale * theta[v];
                }
                for l in 0..d {
                    out[[j, k * d + l, k * d + j]] += scale * theta[l];
                }
            }
        }
        out
    }
}

fn theta_position(r: usize, c: usize, s: usize) -> usize {
    [r, c, s].iter().position(|&i| i == THETA).expect("one theta axis")
}

fn lambda_position(r: usize, c: usize, s: usize) -> usize {
    [r, c, s].iter().position(|&i| i == LAMBDA).expect("one lambda axis")
}

/// Assemble the three-level problem over a data split.
pub fn build_hyperopt(split: &Split, spec: &HyperoptSpec) -> Result<MultilevelProblem> {
    if !(spec.c > 0.0 && spec.c.is_finite()) {
        return Err(Error::Config(format!("ridge constant c must be positive, got {}", spec.c)));
    }
    if !(spec.delta > 0.0 && spec.delta.is_finite()) {
        return Err(Error::Config(format!(
            "smoothing delta must be positive, got {}",
            spec.delta
        )));
    }
    let n = split.train_x.nrows();
    let d = split.train_x.ncols();
    let m = split.valid_x.nrows();
    if n == 0 || d == 0 || m == 0 {
        return Err(Error::structure("build_hyperopt", "empty split"));
    }
    if split.valid_x.ncols() != d || split.train_y.len() != n || split.valid_y.len() != m {
        return Err(Error::structure(
            "build_hyperopt",
            "split blocks disagree on row or column counts",
        ));
    }

    let shared = Arc::new(Shared {
        xv: split.valid_x.clone(),
        yv: split.valid_y.clone(),
        xt: split.train_x.clone(),
        yt: split.train_y.clone(),
        c: spec.c,
        delta: spec.delta,
    });
    let oracles: Vec<OracleHandle> = vec![
        Arc::new(ValidationLoss { data: shared.clone() }),
        Arc::new(AttackObjective { data: shared.clone() }),
        Arc::new(TrainingLoss { data: shared }),
    ];
    MultilevelProblem::new("hyperopt", vec![1, n * d, d], oracles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linsolve::is_spd;
    use crate::model::{max_abs, validate};
    use crate::numderiv::{fd_grad_block, fd_hess_block, FdConfig};
    use ndarray::array;

    /// 3 training rows, 4 validation rows, 2 features: poison block is 6-dim
    /// so every third-order slice stays tiny.
    fn tiny_split() -> Split {
        Split {
            train_x: array![[0.6, -0.4], [-0.2, 0.9], [0.3, 0.5]],
            train_y: array![0.5, -0.3, 0.2],
            valid_x: array![[0.8, 0.1], [-0.5, 0.7], [0.2, -0.6], [0.4, 0.3]],
            valid_y: array![0.4, 0.1, -0.2, 0.3],
            valid_indices: vec![0, 1, 2, 3],
            train_indices: vec![4, 5, 6],
        }
    }

    fn probe_point(problem: &MultilevelProblem) -> PointStack {
        problem
            .point(vec![
                array![0.3],
                array![0.05, -0.08, 0.02, 0.06, -0.03, 0.04],
                array![0.4, -0.3],
            ])
            .unwrap()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let p = build_hyperopt(&tiny_split(), &HyperoptSpec::default()).unwrap();
        let point = probe_point(&p);
        let cfg = FdConfig::default();
        for level in 0..3 {
            let oracle = p.objective(level);
            for j in 0..3 {
                let got = oracle.grad_block(j, &point).unwrap();
                let want = fd_grad_block(oracle, &point, j, &cfg).unwrap();
                let dev = max_abs(&(&got - &want));
                assert!(dev < 1e-6, "f{} grad block {j}: dev {dev}", level + 1);
            }
        }
    }

    #[test]
    fn hessians_match_finite_differences() {
        let p = build_hyperopt(&tiny_split(), &HyperoptSpec::default()).unwrap();
        let point = probe_point(&p);
        let cfg = FdConfig::default();
        for level in 0..3 {
            let oracle = p.objective(level);
            for r in 0..3 {
                for c in 0..3 {
                    let got = oracle.hess_block(r, c, &point).unwrap();
                    let want = fd_hess_block(oracle, &point, r, c, &cfg).unwrap();
                    let dev = max_abs(&(&got - &want));
                    assert!(dev < 1e-4, "f{} hess ({r},{c}): dev {dev}", level + 1);
                }
            }
        }
    }

    #[test]
    fn problem_passes_symmetry_validation() {
        let p = build_hyperopt(&tiny_split(), &HyperoptSpec::default()).unwrap();
        let report = validate(&p, &probe_point(&p)).unwrap();
        assert!(report.pass(), "worst: {:?}", report.worst());
    }

    #[test]
    fn attack_and_fit_blocks_are_negatives_up_to_regularizers() {
        let p = build_hyperopt(&tiny_split(), &HyperoptSpec::default()).unwrap();
        let point = probe_point(&p);
        let f2 = p.objective(1);
        let f3 = p.objective(2);

        // theta-poison coupling has no regularizer: exact negation.
        let sum_tp = f2.hess_block(2, 1, &point).unwrap() + &f3.hess_block(2, 1, &point).unwrap();
        assert!(max_abs(&sum_tp) < 1e-12);

        // theta-theta blocks differ by the smooth-L1 curvature only.
        let sum_tt = f2.hess_block(2, 2, &point).unwrap() + &f3.hess_block(2, 2, &point).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                if i != j {
                    assert!(sum_tt[[i, j]].abs() < 1e-12);
                } else {
                    assert!(sum_tt[[i, j]] > 0.0);
                }
            }
        }

        // poison-poison blocks differ by the ridge diagonal 2c/(nd).
        let sum_pp = f2.hess_block(1, 1, &point).unwrap() + &f3.hess_block(1, 1, &point).unwrap();
        let ridge = 2.0 * 100.0 / (3.0 * 2.0);
        let eye: Array2<f64> = Array2::eye(6);
        let dev = max_abs(&(&sum_pp - &(eye * ridge)));
        assert!(dev < 1e-12, "{dev}");

        // Same story for the poison gradients.
        let gp = f2.grad_block(1, &point).unwrap() + &f3.grad_block(1, &point).unwrap();
        let want = point.level(1) * ridge;
        assert!(max_abs(&(&gp - &want)) < 1e-12);
    }

    #[test]
    fn third_slices_match_differenced_hessians() {
        let p = build_hyperopt(&tiny_split(), &HyperoptSpec::default()).unwrap();
        let point = probe_point(&p);
        let f3 = p.objective(2);

        // (r, c, s): differentiate hess_block(r, c) along coordinate b of
        // level s and compare with the stored slice.
        for (r, c, s) in [(2, 2, 0), (2, 2, 1), (2, 1, 1), (2, 2, 2), (2, 1, 0)] {
            let slice = f3.third_slice(r, c, s, &point).unwrap();
            for b in 0..point.dims()[s] {
                let h = 1e-5 * (1.0 + point.level(s)[b].abs());
                let mut up = point.clone();
                let mut value = up.level(s).to_owned();
                value[b] += h;
                up.set_level(s, value).unwrap();
                let mut down = point.clone();
                let mut value = down.level(s).to_owned();
                value[b] -= h;
                down.set_level(s, value).unwrap();
                let diff = (f3.hess_block(r, c, &up).unwrap()
                    - f3.hess_block(r, c, &down).unwrap())
                    / (2.0 * h);
                let stored = slice.index_axis(ndarray::Axis(2), b).to_owned();
                let dev = max_abs(&(&stored - &diff));
                assert!(dev < 1e-5, "slice ({r},{c},{s}) coord {b}: dev {dev}");
            }
        }
    }

    #[test]
    fn poison_only_and_mixed_lambda_slices_vanish() {
        let p = build_hyperopt(&tiny_split(), &HyperoptSpec::default()).unwrap();
        let point = probe_point(&p);
        let f3 = p.objective(2);
        for (r, c, s) in [(1, 1, 1), (0, 1, 1), (1, 0, 2), (0, 0, 1)] {
            let slice = f3.third_slice(r, c, s, &point).unwrap();
            assert!(max_abs(&slice) == 0.0, "slice ({r},{c},{s}) not zero");
        }
    }

    #[test]
    fn training_hessian_is_positive_definite() {
        let p = build_hyperopt(&tiny_split(), &HyperoptSpec::default()).unwrap();
        let point = probe_point(&p);
        let h = p.objective(2).hess_block(2, 2, &point).unwrap();
        assert!(is_spd(&h));
    }

    #[test]
    fn spec_is_validated() {
        assert!(matches!(
            build_hyperopt(&tiny_split(), &HyperoptSpec { c: 0.0, delta: 1e-6 }),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            build_hyperopt(&tiny_split(), &HyperoptSpec { c: 1.0, delta: -1.0 }),
            Err(Error::Config(_))
        ));
    }
}
