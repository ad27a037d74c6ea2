//! Seeded quadratic problem families with exact algebraic reductions.
//!
//! Every family here is a nested problem whose lower-level responses are
//! affine, so the whole hierarchy can be reduced exactly by backward
//! elimination: substitute the deepest minimizer, minimize the next level's
//! substituted objective, and so on. The elimination is plain dense linear
//! algebra (own Gauss solve, own Jacobi eigenvalues) and never touches the
//! implicit-differentiation code paths, which makes it an independent oracle
//! for them: it yields exact response maps, exact total and partial solution
//! Jacobians, and the exact reduced top-level quadratic.
//!
//! Conventions match [`crate::model`]: level 0 is the top; deeper levels
//! minimize their own objective given everything shallower.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{s, Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{DerivativeOracle, MultilevelProblem, PointStack};

/// f(u) = 1/2 u^T H u + g^T u + c over the concatenated stack `u`.
#[derive(Clone, Debug)]
pub struct StackedQuadratic {
    pub h: Array2<f64>,
    pub g: Array1<f64>,
    pub c: f64,
}

/// Oracle view of a [`StackedQuadratic`]; third-order slices are analytic
/// zeros.
struct QuadraticOracle {
    dims: Vec<usize>,
    offsets: Vec<usize>,
    q: StackedQuadratic,
}

impl QuadraticOracle {
    fn stack(&self, point: &PointStack) -> Array1<f64> {
        let total: usize = self.dims.iter().sum();
        let mut u = Array1::zeros(total);
        for (i, &off) in self.offsets.iter().enumerate() {
            u.slice_mut(s![off..off + self.dims[i]]).assign(point.level(i));
        }
        u
    }

    fn block(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i] + self.dims[i]
    }
}

impl DerivativeOracle for QuadraticOracle {
    fn value(&self, point: &PointStack) -> Result<f64> {
        let u = self.stack(point);
        Ok(0.5 * u.dot(&self.q.h.dot(&u)) + self.q.g.dot(&u) + self.q.c)
    }

    fn grad_block(&self, j: usize, point: &PointStack) -> Result<Array1<f64>> {
        let u = self.stack(point);
        let full = &self.q.h.dot(&u) + &self.q.g;
        Ok(full.slice(s![self.block(j)]).to_owned())
    }

    fn hess_block(&self, r: usize, c: usize, _point: &PointStack) -> Result<Array2<f64>> {
        Ok(self.q.h.slice(s![self.block(r), self.block(c)]).to_owned())
    }

    fn third_slice(
        &self,
        r: usize,
        c: usize,
        sl: usize,
        _point: &PointStack,
    ) -> Result<Array3<f64>> {
        Ok(Array3::zeros((self.dims[r], self.dims[c], self.dims[sl])))
    }

    fn has_third_order(&self) -> bool {
        true
    }
}

/// Affine map `x = sum_j coef[j] * x_j + konst` over argument levels `0..s`.
#[derive(Clone, Debug)]
pub struct AffineMap {
    pub coef: Vec<Array2<f64>>,
    pub konst: Array1<f64>,
}

impl AffineMap {
    pub fn apply(&self, args: &[Array1<f64>]) -> Array1<f64> {
        let mut out = self.konst.clone();
        for (c, a) in self.coef.iter().zip(args) {
            out = out + c.dot(a);
        }
        out
    }
}

/// Exact reduction of a quadratic family from level `start` downward.
#[derive(Clone, Debug)]
pub struct Reduction {
    /// First active level; levels `0..start` are free arguments.
    pub start: usize,
    /// `maps[k - start]` expresses level `k`'s response over levels `0..start`.
    pub maps: Vec<AffineMap>,
    /// Exact total solution Jacobians `d x_i / d x_j` for `start <= j < i`.
    pub totals: HashMap<(usize, usize), Array2<f64>>,
    /// Exact partial solution Jacobians holding other shallower levels fixed.
    pub partials: HashMap<(usize, usize), Array2<f64>>,
    /// Reduced Hessians of each eliminated level's subproblem.
    pub reduced_hessians: HashMap<usize, Array2<f64>>,
}

/// A seeded quadratic multilevel instance plus its cached exact reduction.
pub struct QuadraticProblem {
    pub problem: MultilevelProblem,
    levels: Vec<StackedQuadratic>,
    dims: Vec<usize>,
    offsets: Vec<usize>,
    base: Reduction,
    /// Reduced top objective over level 0: (Hessian, gradient at 0, constant).
    reduced_top: (Array2<f64>, Array1<f64>, f64),
}

impl QuadraticProblem {
    /// Random coupled quadratic chain with guaranteed SPD reduced Hessians.
    /// Deterministic in `(seed, dims)`; internally retries derived seeds until
    /// the elimination certifies definiteness.
    pub fn chain(seed: u64, dims: &[usize]) -> Result<Self> {
        Self::build(seed, dims, false)
    }

    /// Same lower levels as [`QuadraticProblem::chain`] but a top objective of
    /// the form `1/2 ||L u - a||^2`, so the exact reduced objective is
    /// nonnegative everywhere with positive definite curvature.
    pub fn nonneg(seed: u64, dims: &[usize]) -> Result<Self> {
        Self::build(seed, dims, true)
    }

    fn build(seed: u64, dims: &[usize], nonneg_top: bool) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::structure("QuadraticProblem", "needs at least 2 levels"));
        }
        let mut attempt_seed = seed;
        for _ in 0..32 {
            if let Some(built) = Self::try_build(attempt_seed, dims, nonneg_top)? {
                return Ok(built);
            }
            attempt_seed = attempt_seed.wrapping_mul(6364136223846793005).wrapping_add(97);
        }
        Err(Error::structure(
            "QuadraticProblem",
            format!("no definite instance found for seed {seed}, dims {dims:?}"),
        ))
    }

    fn try_build(seed: u64, dims: &[usize], nonneg_top: bool) -> Result<Option<Self>> {
        let n = dims.len();
        let total: usize = dims.iter().sum();
        let offsets: Vec<usize> = dims
            .iter()
            .scan(0usize, |acc, &d| {
                let o = *acc;
                *acc += d;
                Some(o)
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coupling = 0.3 / (n as f64 - 1.0);

        let mut levels = Vec::with_capacity(n);
        let top = if nonneg_top {
            // f_0(u) = 1/2 ||L u - a||^2 with L = [I | small blocks].
            let mut l = Array2::<f64>::zeros((dims[0], total));
            for r in 0..dims[0] {
                l[[r, r]] = 1.0;
            }
            for k in 1..n {
                for r in 0..dims[0] {
                    for c in 0..dims[k] {
                        l[[r, offsets[k] + c]] = rng.random_range(-0.4..0.4);
                    }
                }
            }
            let a = Array1::from_shape_fn(dims[0], |_| rng.random_range(-1.0..1.0));
            StackedQuadratic { h: l.t().dot(&l), g: -l.t().dot(&a), c: 0.5 * a.dot(&a) }
        } else {
            let raw = Array2::from_shape_fn((total, total), |_| rng.random_range(-0.5..0.5));
            let h = (&raw + &raw.t()) * 0.5;
            let g = Array1::from_shape_fn(total, |_| rng.random_range(-1.0..1.0));
            StackedQuadratic { h, g, c: 0.0 }
        };
        levels.push(top);

        for i in 1..n {
            let mut h = Array2::<f64>::zeros((total, total));
            let gmat = Array2::from_shape_fn((dims[i], dims[i]), |_| rng.random_range(-1.0..1.0));
            let own = gmat.t().dot(&gmat) / dims[i] as f64
                + Array2::<f64>::eye(dims[i]) * (1.0 + rng.random_range(0.0..0.5));
            h.slice_mut(s![offsets[i]..offsets[i] + dims[i], offsets[i]..offsets[i] + dims[i]])
                .assign(&own);
            for j in 0..n {
                if j == i {
                    continue;
                }
                let r =
                    Array2::from_shape_fn((dims[i], dims[j]), |_| {
                        rng.random_range(-coupling..coupling)
                    });
                h.slice_mut(s![offsets[i]..offsets[i] + dims[i], offsets[j]..offsets[j] + dims[j]])
                    .assign(&r);
                h.slice_mut(s![offsets[j]..offsets[j] + dims[j], offsets[i]..offsets[i] + dims[i]])
                    .assign(&r.t());
            }
            let g = Array1::from_shape_fn(total, |idx| {
                if (offsets[i]..offsets[i] + dims[i]).contains(&idx) {
                    rng.random_range(-1.0..1.0)
                } else {
                    0.0
                }
            });
            levels.push(StackedQuadratic { h, g, c: 0.0 });
        }

        let dims_v = dims.to_vec();
        match eliminate(&levels, &dims_v, &offsets, 1)? {
            None => Ok(None),
            Some(base) => {
                let reduced_top = reduce_top(&levels[0], &dims_v, &offsets, &base);
                if sym_eigenvalues(&reduced_top.0).into_iter().any(|e| !e.is_finite()) {
                    return Ok(None);
                }
                let objectives = levels
                    .iter()
                    .map(|q| {
                        Arc::new(QuadraticOracle {
                            dims: dims_v.clone(),
                            offsets: offsets.clone(),
                            q: q.clone(),
                        }) as Arc<dyn DerivativeOracle>
                    })
                    .collect();
                let name = if nonneg_top { "quadratic-nonneg" } else { "quadratic-chain" };
                let problem = MultilevelProblem::new(
                    format!("{name}-{seed}-{n}lvl"),
                    dims_v.clone(),
                    objectives,
                )?;
                Ok(Some(QuadraticProblem {
                    problem,
                    levels,
                    dims: dims_v,
                    offsets,
                    base,
                    reduced_top,
                }))
            }
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Exact responses and Jacobians with every level below 0 responding.
    pub fn reduction(&self) -> &Reduction {
        &self.base
    }

    /// Exact reduction treating levels `0..start` as frozen arguments.
    pub fn reduction_from(&self, start: usize) -> Result<Reduction> {
        eliminate(&self.levels, &self.dims, &self.offsets, start)?.ok_or_else(|| {
            Error::structure("QuadraticProblem::reduction_from", "indefinite reduced Hessian")
        })
    }

    /// Exact nested solution for a top value: all lower levels at their
    /// (algebraically solved) responses, residuals recorded as 0.
    pub fn respond(&self, x0: &Array1<f64>) -> Result<PointStack> {
        let mut values = vec![x0.clone()];
        let args = [x0.clone()];
        for map in &self.base.maps {
            values.push(map.apply(&args));
        }
        let mut point = self.problem.point(values)?;
        for i in 1..self.dims.len() {
            point.set_residual(i, 0.0);
        }
        Ok(point)
    }

    /// Reduced top objective evaluated by composing exact responses.
    pub fn reduced_value(&self, x0: &Array1<f64>) -> Result<f64> {
        let point = self.respond(x0)?;
        self.problem.objective(0).value(&point)
    }

    /// Exact gradient of the reduced top objective.
    pub fn reduced_grad(&self, x0: &Array1<f64>) -> Array1<f64> {
        let (h, g, _) = &self.reduced_top;
        h.dot(x0) + g
    }

    /// Hessian of the exact reduced top objective.
    pub fn reduced_hessian(&self) -> &Array2<f64> {
        &self.reduced_top.0
    }

    /// Largest eigenvalue of the reduced top Hessian.
    pub fn lambda_max(&self) -> f64 {
        sym_eigenvalues(&self.reduced_top.0).into_iter().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn exact_total(&self, i: usize, j: usize) -> &Array2<f64> {
        &self.base.totals[&(i, j)]
    }

    pub fn exact_partial(&self, i: usize, j: usize) -> &Array2<f64> {
        &self.base.partials[&(i, j)]
    }
}

/// Backward elimination from the deepest level up to (and excluding) `start`.
/// Returns `None` when some reduced Hessian is not positive definite.
fn eliminate(
    levels: &[StackedQuadratic],
    dims: &[usize],
    offsets: &[usize],
    start: usize,
) -> Result<Option<Reduction>> {
    let n = dims.len();
    let mut maps: HashMap<usize, AffineMap> = HashMap::new();
    let mut totals = HashMap::new();
    let mut partials = HashMap::new();
    let mut reduced_hessians = HashMap::new();

    for i in (start..n).rev() {
        // Arguments of this round: levels 0..=i, with deeper maps over them.
        let width: usize = dims[..=i].iter().sum();
        for (&k, map) in &maps {
            totals.insert((k, i), map.coef[i].clone());
        }
        // Substitution u = T w + t over w = (x_0..x_i).
        let total: usize = dims.iter().sum();
        let mut t_mat = Array2::<f64>::zeros((total, width));
        let mut t_vec = Array1::<f64>::zeros(total);
        for j in 0..=i {
            for r in 0..dims[j] {
                t_mat[[offsets[j] + r, offsets[j] + r]] = 1.0;
            }
        }
        for (&k, map) in &maps {
            for j in 0..=i {
                t_mat
                    .slice_mut(s![offsets[k]..offsets[k] + dims[k], offsets[j]..offsets[j] + dims[j]])
                    .assign(&map.coef[j]);
            }
            t_vec.slice_mut(s![offsets[k]..offsets[k] + dims[k]]).assign(&map.konst);
        }
        let f = &levels[i];
        let hw = t_mat.t().dot(&f.h).dot(&t_mat);
        let gw = t_mat.t().dot(&(&f.g + &f.h.dot(&t_vec)));

        let own = offsets[i]..offsets[i] + dims[i];
        let a = hw.slice(s![own.clone(), own.clone()]).to_owned();
        let a = (&a + &a.t()) * 0.5;
        let eigs = sym_eigenvalues(&a);
        if eigs.iter().any(|&e| e <= 1e-6 || !e.is_finite()) {
            return Ok(None);
        }
        reduced_hessians.insert(i, a.clone());
        let head = offsets[i];
        let b_mat = hw.slice(s![own.clone(), 0..head]).to_owned();
        let g_i = gw.slice(s![own]).to_owned();
        let mut rhs = Array2::<f64>::zeros((dims[i], head + 1));
        rhs.slice_mut(s![.., 0..head]).assign(&b_mat);
        rhs.column_mut(head).assign(&g_i);
        let sol = solve_dense(&a, &rhs)?;
        let m_full = -&sol.slice(s![.., 0..head]);
        let b_i = -&sol.column(head);

        let mut coef = Vec::with_capacity(i);
        for j in 0..i {
            let block = m_full.slice(s![.., offsets[j]..offsets[j] + dims[j]]).to_owned();
            partials.insert((i, j), block.clone());
            coef.push(block);
        }
        let new_map = AffineMap { coef, konst: b_i.to_owned() };

        // Substitute x_i's map into the deeper responses.
        for (_, map) in maps.iter_mut() {
            let ci = map.coef.pop().expect("deeper map has x_i column");
            for j in 0..i {
                map.coef[j] = &map.coef[j] + &ci.dot(&new_map.coef[j]);
            }
            map.konst = &map.konst + &ci.dot(&new_map.konst);
        }
        maps.insert(i, new_map);
    }

    for (&k, map) in &maps {
        for j in 0..start {
            totals.insert((k, j), map.coef[j].clone());
        }
    }
    let mut ordered = Vec::with_capacity(n - start);
    for k in start..n {
        ordered.push(maps.remove(&k).expect("map for every eliminated level"));
    }
    Ok(Some(Reduction { start, maps: ordered, totals, partials, reduced_hessians }))
}

/// Substitutes the base reduction into the top objective, producing the exact
/// reduced quadratic over level 0.
fn reduce_top(
    top: &StackedQuadratic,
    dims: &[usize],
    offsets: &[usize],
    base: &Reduction,
) -> (Array2<f64>, Array1<f64>, f64) {
    let total: usize = dims.iter().sum();
    let d0 = dims[0];
    let mut t_mat = Array2::<f64>::zeros((total, d0));
    let mut t_vec = Array1::<f64>::zeros(total);
    for r in 0..d0 {
        t_mat[[r, r]] = 1.0;
    }
    for (k, map) in base.maps.iter().enumerate() {
        let level = base.start + k;
        t_mat
            .slice_mut(s![offsets[level]..offsets[level] + dims[level], ..])
            .assign(&map.coef[0]);
        t_vec.slice_mut(s![offsets[level]..offsets[level] + dims[level]]).assign(&map.konst);
    }
    let h = t_mat.t().dot(&top.h).dot(&t_mat);
    let h = (&h + &h.t()) * 0.5;
    let g = t_mat.t().dot(&(&top.g + &top.h.dot(&t_vec)));
    let c = 0.5 * t_vec.dot(&top.h.dot(&t_vec)) + top.g.dot(&t_vec) + top.c;
    (h, g, c)
}

/// Dense Gauss elimination with partial pivoting; independent of the SPD
/// solver so the synthetic oracle shares no code with the path under test.
pub fn solve_dense(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n {
        return Err(Error::shape("solve_dense", format!("{n}x{n}"), format!("{:?}", a.dim())));
    }
    let mut m = a.clone();
    let mut x = b.clone();
    for col in 0..n {
        let mut piv = col;
        for r in (col + 1)..n {
            if m[[r, col]].abs() > m[[piv, col]].abs() {
                piv = r;
            }
        }
        if m[[piv, col]].abs() < 1e-14 {
            return Err(Error::SingularHessian { context: "solve_dense".into(), pivot: col });
        }
        if piv != col {
            for c in 0..n {
                m.swap([piv, c], [col, c]);
            }
            for c in 0..x.ncols() {
                x.swap([piv, c], [col, c]);
            }
        }
        let d = m[[col, col]];
        for r in (col + 1)..n {
            let factor = m[[r, col]] / d;
            if factor == 0.0 {
                continue;
            }
            for c in col..n {
                m[[r, c]] -= factor * m[[col, c]];
            }
            for c in 0..x.ncols() {
                x[[r, c]] -= factor * x[[col, c]];
            }
        }
    }
    for col in (0..n).rev() {
        for c in 0..x.ncols() {
            let mut v = x[[col, c]];
            for k in (col + 1)..n {
                v -= m[[col, k]] * x[[k, c]];
            }
            x[[col, c]] = v / m[[col, col]];
        }
    }
    Ok(x)
}

/// All eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn sym_eigenvalues(a: &Array2<f64>) -> Vec<f64> {
    let n = a.nrows();
    let mut m = a.clone();
    let scale = 1.0 + m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    for _ in 0..100 {
        let mut off = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                off = off.max(m[[i, j]].abs());
            }
        }
        if off < 1e-13 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() < 1e-15 * scale {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s_ = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s_ * mkq;
                    m[[k, q]] = s_ * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s_ * mqk;
                    m[[q, k]] = s_ * mpk + c * mqk;
                }
            }
        }
    }
    (0..n).map(|i| m[[i, i]]).collect()
}
