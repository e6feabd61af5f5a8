//! Accelerated projected-gradient solver for the balancing quadratic program
//!
//! ```text
//! minimize    ‖M γ − t‖² + γᵀ P γ
//! subject to  Σ_{i∈R} a_i γ_i = s_R   for each constrained range R
//!             L ≤ γ_i ≤ U
//! ```
//!
//! where `P = blockdiag(scale_diag·I + scale_ones·11ᵀ)`. The block structure
//! makes `P γ` an O(k) operation and the feasible set has an exact
//! projection (a clipped scalar shift per range), so each iteration costs
//! two matrix-vector products with `M`.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const POWER_ITERATION_SEED: u64 = 0x5eed_ba1a;
const POLISH_EVERY: usize = 50;
/// Objective increases below this relative size are treated as rounding.
const ROUNDING: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyBlock {
    pub range: Range<usize>,
    pub scale_diag: f64,
    pub scale_ones: f64,
}

/// Block-diagonal penalty; block `b` contributes
/// `scale_diag·Σγᵢ² + scale_ones·(Σγᵢ)²` over its range.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PenaltyStructure {
    pub blocks: Vec<PenaltyBlock>,
}

impl PenaltyStructure {
    /// `ρ`-mixture blocks `scale·[(1−ρ)Σγ² + ρ(Σγ)²]`.
    pub fn mixture(ranges: impl IntoIterator<Item = (Range<usize>, f64)>, rho: f64) -> Self {
        Self {
            blocks: ranges
                .into_iter()
                .map(|(range, scale)| PenaltyBlock {
                    range,
                    scale_diag: scale * (1.0 - rho),
                    scale_ones: scale * rho,
                })
                .collect(),
        }
    }

    pub fn value(&self, gamma: &[f64]) -> f64 {
        self.blocks
            .iter()
            .map(|b| {
                let g = &gamma[b.range.clone()];
                let sq: f64 = g.iter().map(|x| x * x).sum();
                let s: f64 = g.iter().sum();
                b.scale_diag * sq + b.scale_ones * s * s
            })
            .sum()
    }

    /// `out += P γ`.
    fn apply_add(&self, gamma: &[f64], out: &mut [f64]) {
        for b in &self.blocks {
            let g = &gamma[b.range.clone()];
            let s: f64 = g.iter().sum();
            let shift = b.scale_ones * s;
            for (o, &x) in out[b.range.clone()].iter_mut().zip(g) {
                *o += b.scale_diag * x + shift;
            }
        }
    }

    fn max_eigenvalue(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| b.scale_diag + b.scale_ones * b.range.len() as f64)
            .fold(0.0, f64::max)
    }

    /// Explicit `k x k` matrix.
    pub fn dense(&self, k: usize) -> DMatrix<f64> {
        let mut p = DMatrix::zeros(k, k);
        for b in &self.blocks {
            for i in b.range.clone() {
                for j in b.range.clone() {
                    p[(i, j)] = b.scale_ones + if i == j { b.scale_diag } else { 0.0 };
                }
            }
        }
        p
    }

    fn validate(&self, k: usize) -> Result<()> {
        let mut covered = vec![false; k];
        for b in &self.blocks {
            if !(b.scale_diag >= 0.0 && b.scale_ones >= 0.0) {
                return Err(Error::Config("penalty scales must be nonnegative".into()));
            }
            if b.range.end > k {
                return Err(Error::DimensionMismatch {
                    expected: k,
                    actual: b.range.end,
                });
            }
            for c in &mut covered[b.range.clone()] {
                if *c {
                    return Err(Error::Config("penalty blocks overlap".into()));
                }
                *c = true;
            }
        }
        Ok(())
    }
}

pub fn penalty_value(gamma: &[f64], penalty: &PenaltyStructure) -> f64 {
    penalty.value(gamma)
}

/// `Σ_{i∈range} a_i γ_i = sum`, with `a ≡ 1` when `multipliers` is `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct SumConstraint {
    pub range: Range<usize>,
    pub sum: f64,
    pub multipliers: Option<Vec<f64>>,
}

impl SumConstraint {
    pub fn new(range: Range<usize>, sum: f64) -> Self {
        Self {
            range,
            sum,
            multipliers: None,
        }
    }

    pub fn weighted(range: Range<usize>, sum: f64, multipliers: Vec<f64>) -> Self {
        Self {
            range,
            sum,
            multipliers: Some(multipliers),
        }
    }

    fn multiplier(&self, j: usize) -> f64 {
        self.multipliers.as_ref().map_or(1.0, |a| a[j])
    }

    fn check(&self, lower: f64, upper: f64) -> Result<()> {
        let k = self.range.len();
        if let Some(a) = &self.multipliers {
            if a.len() != k {
                return Err(Error::DimensionMismatch {
                    expected: k,
                    actual: a.len(),
                });
            }
            if a.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
                return Err(Error::Config("sum multipliers must be positive".into()));
            }
        }
        let total: f64 = (0..k).map(|j| self.multiplier(j)).sum();
        let slack = 1e-12 * self.sum.abs().max(1.0);
        let min = if lower == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            total * lower
        };
        let max = if upper == f64::INFINITY {
            f64::INFINITY
        } else {
            total * upper
        };
        if k == 0 || self.sum < min - slack || self.sum > max + slack {
            return Err(Error::InfeasibleConstraint(format!(
                "required sum {} outside [{min}, {max}] for range {:?}",
                self.sum, self.range
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct QpProblem {
    /// `d x k` design.
    pub m: DMatrix<f64>,
    pub t: DVector<f64>,
    pub penalty: PenaltyStructure,
    pub sum_constraints: Vec<SumConstraint>,
    pub lower: f64,
    pub upper: f64,
}

impl QpProblem {
    pub fn dim(&self) -> usize {
        self.m.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.dim();
        if self.t.len() != self.m.nrows() {
            return Err(Error::DimensionMismatch {
                expected: self.m.nrows(),
                actual: self.t.len(),
            });
        }
        if self.lower.is_nan() || self.upper.is_nan() || self.lower > self.upper {
            return Err(Error::InfeasibleConstraint(format!(
                "lower bound {} exceeds upper bound {}",
                self.lower, self.upper
            )));
        }
        self.penalty.validate(k)?;
        let mut covered = vec![false; k];
        for c in &self.sum_constraints {
            if c.range.end > k {
                return Err(Error::DimensionMismatch {
                    expected: k,
                    actual: c.range.end,
                });
            }
            for x in &mut covered[c.range.clone()] {
                if *x {
                    return Err(Error::Config("sum constraint ranges overlap".into()));
                }
                *x = true;
            }
            c.check(self.lower, self.upper)?;
        }
        Ok(())
    }

    /// `(‖Mγ − t‖², γᵀPγ)`.
    pub fn objective_parts(&self, gamma: &[f64]) -> (f64, f64) {
        let g = DVector::from_column_slice(gamma);
        let r = &self.m * g - &self.t;
        (r.norm_squared(), self.penalty.value(gamma))
    }

    pub fn objective(&self, gamma: &[f64]) -> f64 {
        let (b, p) = self.objective_parts(gamma);
        b + p
    }
}

/// Finds the shift `λ` with `Σ a_i clip(v_i + λ a_i, L, U) = s` by a
/// bracketed Newton iteration on the piecewise-linear sum (falling back to
/// bisection), then writes the projected coordinates into `out`.
fn project_range(
    v: &[f64],
    c: &SumConstraint,
    lower: f64,
    upper: f64,
    lambda0: f64,
    out: &mut [f64],
) -> Result<f64> {
    let s = c.sum;
    let eval = |lambda: f64| {
        let mut sum = 0.0;
        let mut slope = 0.0;
        for (j, &vj) in v.iter().enumerate() {
            let a = c.multiplier(j);
            let x = vj + lambda * a;
            if x <= lower {
                sum += a * lower;
            } else if x >= upper {
                sum += a * upper;
            } else {
                sum += a * x;
                slope += a * a;
            }
        }
        (sum, slope)
    };
    let tol = 1e-12 * s.abs().max(1.0);
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut span = 1.0;
    let mut lambda = lambda0;
    let mut found = false;
    for _ in 0..400 {
        let (g, slope) = eval(lambda);
        let r = s - g;
        if r.abs() <= tol {
            // one more Newton step on the current free set sharpens the sum
            if slope > 0.0 {
                let cand = lambda + r / slope;
                if (s - eval(cand).0).abs() <= r.abs() {
                    lambda = cand;
                }
            }
            found = true;
            break;
        }
        if r > 0.0 {
            lo = lo.max(lambda);
        } else {
            hi = hi.min(lambda);
        }
        let newton = if slope > 0.0 {
            lambda + r / slope
        } else {
            f64::NAN
        };
        lambda = if newton > lo && newton < hi {
            newton
        } else if lo.is_finite() && hi.is_finite() {
            0.5 * (lo + hi)
        } else if hi.is_infinite() {
            span *= 2.0;
            lo + span
        } else {
            span *= 2.0;
            hi - span
        };
        if lo.is_finite() && hi.is_finite() && hi - lo <= f64::EPSILON * lo.abs().max(hi.abs()) {
            found = (s - eval(lambda).0).abs() <= tol.max(1e-9 * s.abs().max(1.0));
            break;
        }
    }
    if !found {
        return Err(Error::InfeasibleConstraint(format!(
            "projection onto sum {} did not converge",
            s
        )));
    }
    for (j, (o, &vj)) in out.iter_mut().zip(v).enumerate() {
        *o = (vj + lambda * c.multiplier(j)).clamp(lower, upper);
    }
    Ok(lambda)
}

fn project_with(
    v: &[f64],
    sum_constraints: &[SumConstraint],
    lower: f64,
    upper: f64,
    lambdas: &mut [f64],
    out: &mut [f64],
) -> Result<()> {
    for (o, &x) in out.iter_mut().zip(v) {
        *o = x.clamp(lower, upper);
    }
    for (c, lam) in sum_constraints.iter().zip(lambdas.iter_mut()) {
        let r = c.range.clone();
        *lam = project_range(&v[r.clone()], c, lower, upper, *lam, &mut out[r])?;
    }
    Ok(())
}

/// Euclidean projection of `v` onto `{γ : per-range weighted sums, L ≤ γ ≤ U}`.
pub fn project_feasible(
    v: &[f64],
    sum_constraints: &[SumConstraint],
    lower: f64,
    upper: f64,
) -> Result<Vec<f64>> {
    if lower.is_nan() || upper.is_nan() || lower > upper {
        return Err(Error::InfeasibleConstraint(format!(
            "lower bound {lower} exceeds upper bound {upper}"
        )));
    }
    for c in sum_constraints {
        if c.range.end > v.len() {
            return Err(Error::DimensionMismatch {
                expected: v.len(),
                actual: c.range.end,
            });
        }
        c.check(lower, upper)?;
    }
    let mut out = vec![0.0; v.len()];
    let mut lambdas = vec![0.0; sum_constraints.len()];
    project_with(v, sum_constraints, lower, upper, &mut lambdas, &mut out)?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iter: 10_000,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpSolution {
    pub gamma: Vec<f64>,
    /// `‖γ − Π(γ − ∇f(γ))‖∞` at the returned point.
    pub kkt_residual: f64,
    pub iterations: usize,
    pub objective_balance: f64,
    pub objective_penalty: f64,
    pub converged: bool,
    /// Objective value at every momentum restart.
    pub restart_objectives: Vec<f64>,
}

struct Workspace<'a> {
    p: &'a QpProblem,
    resid: DVector<f64>,
    gvec: DVector<f64>,
}

impl<'a> Workspace<'a> {
    fn new(p: &'a QpProblem) -> Self {
        Self {
            p,
            resid: DVector::zeros(p.m.nrows()),
            gvec: DVector::zeros(p.dim()),
        }
    }

    /// Returns `f(γ)` and writes `∇f(γ)` into `grad`.
    fn value_grad(&mut self, gamma: &[f64], grad: &mut [f64]) -> f64 {
        let g = nalgebra::DVectorView::from_slice(gamma, gamma.len());
        self.p.m.mul_to(&g, &mut self.resid);
        self.resid -= &self.p.t;
        self.p.m.tr_mul_to(&self.resid, &mut self.gvec);
        for (o, &x) in grad.iter_mut().zip(self.gvec.iter()) {
            *o = 2.0 * x;
        }
        let mut pg = vec![0.0; gamma.len()];
        self.p.penalty.apply_add(gamma, &mut pg);
        let mut quad = 0.0;
        for ((o, &x), &q) in grad.iter_mut().zip(gamma).zip(&pg) {
            *o += 2.0 * q;
            quad += x * q;
        }
        self.resid.norm_squared() + quad
    }

    fn value(&mut self, gamma: &[f64]) -> f64 {
        let g = nalgebra::DVectorView::from_slice(gamma, gamma.len());
        self.p.m.mul_to(&g, &mut self.resid);
        self.resid -= &self.p.t;
        self.resid.norm_squared() + self.p.penalty.value(gamma)
    }
}

/// Largest eigenvalue of `2(MᵀM + P)`, estimated by power iteration from a
/// fixed pseudo-random start and capped by a Gershgorin-style bound.
fn lipschitz(p: &QpProblem) -> f64 {
    let k = p.dim();
    let bound = 2.0 * (p.m.norm_squared() + p.penalty.max_eigenvalue());
    if k == 0 || bound == 0.0 {
        return bound.max(f64::MIN_POSITIVE);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_ITERATION_SEED);
    let mut v = DVector::from_fn(k, |_, _| rng.random::<f64>() + 0.5);
    v /= v.norm();
    let mut mv = DVector::zeros(p.m.nrows());
    let mut hv = DVector::zeros(k);
    let mut est = 0.0;
    for _ in 0..100 {
        p.m.mul_to(&v, &mut mv);
        p.m.tr_mul_to(&mv, &mut hv);
        p.penalty.apply_add(v.as_slice(), hv.as_mut_slice());
        let next = hv.norm();
        if next == 0.0 {
            break;
        }
        let done = (next - est).abs() <= 1e-6 * next;
        est = next;
        v.copy_from(&hv);
        v /= next;
        if done {
            break;
        }
    }
    (2.0 * est * 1.01).min(bound).max(f64::MIN_POSITIVE)
}

fn inf_norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

const DENSE_POLISH_LIMIT: usize = 600;

/// Newton direction `δ` on the free coordinates `free` that minimizes the
/// quadratic with the other coordinates held fixed and the sum constraints
/// kept satisfied. `half_grad` is `∇f/2` at the current point.
fn newton_direction(p: &QpProblem, free: &[usize], half_grad: &[f64]) -> Option<Vec<f64>> {
    let nf = free.len();
    let mf = p.m.select_columns(free);
    let g = DVector::from_iterator(nf, free.iter().map(|&i| -half_grad[i]));

    // constraint rows restricted to the free set
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for c in &p.sum_constraints {
        let row: Vec<f64> = free
            .iter()
            .map(|&i| {
                if c.range.contains(&i) {
                    c.multiplier(i - c.range.start)
                } else {
                    0.0
                }
            })
            .collect();
        if row.iter().any(|&a| a != 0.0) {
            rows.push(row);
        }
    }
    let q = rows.len();

    // free positions grouped by penalty block
    let mut segs: Vec<(Range<usize>, f64, f64)> = Vec::new();
    let mut in_block = 0;
    for b in &p.penalty.blocks {
        let lo = free.partition_point(|&i| i < b.range.start);
        let hi = free.partition_point(|&i| i < b.range.end);
        if hi > lo {
            in_block += hi - lo;
            segs.push((lo..hi, b.scale_diag, b.scale_ones));
        }
    }

    if nf <= DENSE_POLISH_LIMIT {
        let mut h = mf.tr_mul(&mf);
        for (r, d, o) in &segs {
            for i in r.clone() {
                for j in r.clone() {
                    h[(i, j)] += o + if i == j { *d } else { 0.0 };
                }
            }
        }
        let dim = nf + q;
        let mut kkt = DMatrix::zeros(dim, dim);
        kkt.view_mut((0, 0), (nf, nf)).copy_from(&h);
        for (r, row) in rows.iter().enumerate() {
            for (j, &a) in row.iter().enumerate() {
                kkt[(nf + r, j)] = a;
                kkt[(j, nf + r)] = a;
            }
        }
        let mut rhs = DVector::zeros(dim);
        rhs.rows_mut(0, nf).copy_from(&g);
        let scale = h.diagonal().amax().max(f64::MIN_POSITIVE);
        for reg in [0.0, 1e-13, 1e-10] {
            let mut a = kkt.clone();
            for i in 0..nf {
                a[(i, i)] += reg * scale;
            }
            if let Some(sol) = a.lu().solve(&rhs) {
                if sol.iter().all(|x| x.is_finite()) {
                    return Some(sol.rows(0, nf).iter().copied().collect());
                }
            }
        }
        return None;
    }

    if in_block != nf || segs.iter().any(|s| s.1 <= 0.0) {
        return None;
    }
    let kinv = |v: &mut [f64]| {
        for (r, c, o) in &segs {
            let s: f64 = v[r.clone()].iter().sum();
            let shift = o / (c + o * r.len() as f64) * s;
            for x in &mut v[r.clone()] {
                *x = (*x - shift) / c;
            }
        }
    };
    let d = mf.nrows();
    let mut w = mf.transpose();
    for j in 0..d {
        kinv(w.column_mut(j).as_mut_slice());
    }
    let s = DMatrix::identity(d, d) + &mf * &w;
    let chol = s.cholesky()?;
    let ginv = |v: &DVector<f64>| -> DVector<f64> {
        let mut u = v.clone();
        kinv(u.as_mut_slice());
        let corr = chol.solve(&(&mf * &u));
        u - &w * corr
    };
    let h = ginv(&g);
    if q == 0 {
        return Some(h.iter().copied().collect());
    }
    let ys: Vec<DVector<f64>> = rows
        .iter()
        .map(|r| ginv(&DVector::from_column_slice(r)))
        .collect();
    let cy = DMatrix::<f64>::from_fn(q, q, |i, j| {
        rows[i].iter().zip(ys[j].iter()).map(|(a, b)| a * b).sum()
    });
    let ch = DVector::<f64>::from_fn(q, |i, _| rows[i].iter().zip(h.iter()).map(|(a, b)| a * b).sum());
    let nu = cy.lu().solve(&ch)?;
    let mut delta = h;
    for (y, &v) in ys.iter().zip(nu.iter()) {
        delta -= y * v;
    }
    delta.iter().all(|x| x.is_finite()).then(|| delta.iter().copied().collect())
}

/// Primal active-set refinement: repeated Newton steps on the free
/// coordinates, each truncated at the first bound it would cross.
/// Returns the improved point and its objective when it beats `fx`.
fn polish(p: &QpProblem, ws: &mut Workspace, x: &[f64], fx: f64) -> Option<(Vec<f64>, f64)> {
    let (lower, upper) = (p.lower, p.upper);
    let mut z = x.to_vec();
    let mut grad = vec![0.0; z.len()];
    for _ in 0..20 {
        ws.value_grad(&z, &mut grad);
        for g in grad.iter_mut() {
            *g *= 0.5;
        }
        let free: Vec<usize> = (0..z.len()).filter(|&i| z[i] > lower && z[i] < upper).collect();
        if free.is_empty() {
            break;
        }
        let delta = newton_direction(p, &free, &grad)?;
        let mut alpha = 1.0_f64;
        let mut blocking = None;
        for (&i, &dl) in free.iter().zip(&delta) {
            let room = if dl < 0.0 {
                (lower - z[i]) / dl
            } else if dl > 0.0 {
                (upper - z[i]) / dl
            } else {
                f64::INFINITY
            };
            if room < alpha {
                alpha = room;
                blocking = Some((i, if dl < 0.0 { lower } else { upper }));
            }
        }
        for (&i, &dl) in free.iter().zip(&delta) {
            z[i] = (z[i] + alpha * dl).clamp(lower, upper);
        }
        match blocking {
            Some((i, bound)) => z[i] = bound,
            None => break,
        }
    }
    let fz = ws.value(&z);
    (fz.is_finite() && fz <= fx + ROUNDING * fx.abs()).then_some((z, fz))
}

/// Minimizes the problem with FISTA momentum and function-value restarts.
/// The iterate sequence is monotone: a step that would increase the
/// objective is discarded and the momentum reset.
pub fn solve(problem: &QpProblem, opts: &SolverOptions) -> Result<QpSolution> {
    problem.validate()?;
    let k = problem.dim();
    let cons = &problem.sum_constraints;
    let (lo_b, hi_b) = (problem.lower, problem.upper);

    let mut lambdas = vec![0.0; cons.len()];
    let mut x = vec![0.0; k];
    project_with(&vec![0.0; k], cons, lo_b, hi_b, &mut lambdas, &mut x)?;

    let mut lip = lipschitz(problem);
    let mut ws = Workspace::new(problem);
    let mut grad = vec![0.0; k];
    let mut trial = vec![0.0; k];
    let mut x_new = vec![0.0; k];
    let mut y = x.clone();
    let mut fx = ws.value(&x);
    if !fx.is_finite() {
        return Err(Error::NonFiniteObjective(0));
    }
    let mut momentum = 1.0_f64;
    let mut restart_objectives = Vec::new();

    let kkt = |ws: &mut Workspace, x: &[f64], grad: &mut [f64], lambdas: &mut [f64]| -> Result<f64> {
        ws.value_grad(x, grad);
        let step: Vec<f64> = x.iter().zip(grad.iter()).map(|(a, g)| a - g).collect();
        let mut proj = vec![0.0; x.len()];
        project_with(&step, cons, lo_b, hi_b, lambdas, &mut proj)?;
        Ok(inf_norm_diff(x, &proj))
    };
    let mut kkt_lambdas = lambdas.clone();

    let mut residual = kkt(&mut ws, &x, &mut grad, &mut kkt_lambdas)?;
    let mut iterations = 0;
    let mut converged = residual < opts.tol;
    while !converged && iterations < opts.max_iter {
        iterations += 1;
        ws.value_grad(&y, &mut grad);
        let step = 1.0 / lip;
        for ((t, &yy), &g) in trial.iter_mut().zip(&y).zip(&grad) {
            *t = yy - step * g;
        }
        project_with(&trial, cons, lo_b, hi_b, &mut lambdas, &mut x_new)?;
        let f_new = ws.value(&x_new);
        if !f_new.is_finite() {
            return Err(Error::NonFiniteObjective(iterations));
        }
        if f_new > fx + ROUNDING * fx.abs() {
            if momentum == 1.0 {
                // plain gradient step failed to descend: step was too long
                lip *= 2.0;
            } else {
                restart_objectives.push(fx);
            }
            momentum = 1.0;
            y.copy_from_slice(&x);
            continue;
        }
        let next = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
        let beta = (momentum - 1.0) / next;
        for ((yy, &xn), &xo) in y.iter_mut().zip(&x_new).zip(&x) {
            *yy = xn + beta * (xn - xo);
        }
        momentum = next;
        std::mem::swap(&mut x, &mut x_new);
        fx = f_new;
        if iterations % 10 == 0 || iterations == opts.max_iter {
            residual = kkt(&mut ws, &x, &mut grad, &mut kkt_lambdas)?;
            converged = residual < opts.tol;
        }
        if !converged && iterations % POLISH_EVERY == 0 {
            if let Some((z, fz)) = polish(problem, &mut ws, &x, fx) {
                x = z;
                fx = fz;
                restart_objectives.push(fx);
                momentum = 1.0;
                y.copy_from_slice(&x);
                residual = kkt(&mut ws, &x, &mut grad, &mut kkt_lambdas)?;
                converged = residual < opts.tol;
            }
        }
    }
    if !converged {
        if let Some((z, _)) = polish(problem, &mut ws, &x, fx) {
            x = z;
        }
        residual = kkt(&mut ws, &x, &mut grad, &mut kkt_lambdas)?;
        converged = residual < opts.tol;
    }
    let (objective_balance, objective_penalty) = problem.objective_parts(&x);
    Ok(QpSolution {
        gamma: x,
        kkt_residual: residual,
        iterations,
        objective_balance,
        objective_penalty,
        converged,
        restart_objectives,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn block(range: Range<usize>, d: f64, o: f64) -> PenaltyBlock {
        PenaltyBlock {
            range,
            scale_diag: d,
            scale_ones: o,
        }
    }

    #[test]
    fn penalty_value_examples() {
        let p = PenaltyStructure {
            blocks: vec![block(0..2, 1.0, 0.0)],
        };
        assert_eq!(penalty_value(&[1.0, 1.0], &p), 2.0);
        let p = PenaltyStructure {
            blocks: vec![block(0..2, 0.0, 1.0)],
        };
        assert_eq!(penalty_value(&[1.0, 1.0], &p), 4.0);
        let p = PenaltyStructure::mixture([(0..2, 1.0), (2..3, 1.0)], 0.5);
        assert_eq!(penalty_value(&[1.0, 3.0, 2.0], &p), 17.0);
    }

    #[test]
    fn projection_examples() {
        let c = [SumConstraint::new(0..2, 2.0)];
        let inf = f64::INFINITY;
        assert_eq!(project_feasible(&[0.5, 1.5], &c, 0.0, inf).unwrap(), [0.5, 1.5]);
        assert_eq!(project_feasible(&[0.0, 0.0], &c, 0.0, inf).unwrap(), [1.0, 1.0]);
        assert_eq!(project_feasible(&[-5.0, 1.0], &c, 0.0, 1.0).unwrap(), [1.0, 1.0]);
    }

    #[test]
    fn infeasible_projection() {
        let c = [SumConstraint::new(0..2, 3.0)];
        assert!(matches!(
            project_feasible(&[0.0, 0.0], &c, 0.0, 1.0),
            Err(Error::InfeasibleConstraint(_))
        ));
        assert!(project_feasible(&[0.0], &[], 1.0, 0.0).is_err());
    }

    #[test]
    fn weighted_projection_hits_sum() {
        let c = [SumConstraint::weighted(0..3, 10.0, vec![1.0, 2.0, 5.0])];
        let g = project_feasible(&[3.0, -1.0, 0.2], &c, 0.0, f64::INFINITY).unwrap();
        let s = g[0] + 2.0 * g[1] + 5.0 * g[2];
        assert!((s - 10.0).abs() < 1e-12);
        assert!(g.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn uniform_solution_without_features() {
        let k = 5;
        let p = QpProblem {
            m: DMatrix::zeros(0, k),
            t: DVector::zeros(0),
            penalty: PenaltyStructure::mixture([(0..k, 1.0)], 0.0),
            sum_constraints: vec![SumConstraint::new(0..k, 7.0)],
            lower: 0.0,
            upper: f64::INFINITY,
        };
        let sol = solve(&p, &SolverOptions::default()).unwrap();
        assert!(sol.converged);
        for g in sol.gamma {
            assert!((g - 7.0 / 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_target_reached_without_penalty() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = 8;
        let m = DMatrix::from_fn(2, k, |_, _| rng.random::<f64>() - 0.5);
        let star: Vec<f64> = (0..k).map(|_| rng.random::<f64>() * 2.0).collect();
        let total: f64 = star.iter().sum();
        let t = &m * DVector::from_column_slice(&star);
        let p = QpProblem {
            m,
            t,
            penalty: PenaltyStructure::default(),
            sum_constraints: vec![SumConstraint::new(0..k, total)],
            lower: 0.0,
            upper: f64::INFINITY,
        };
        let sol = solve(
            &p,
            &SolverOptions {
                max_iter: 100_000,
                tol: 1e-10,
            },
        )
        .unwrap();
        assert!(sol.objective_balance < 1e-12, "{}", sol.objective_balance);
    }

    #[test]
    fn implicit_penalty_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = PenaltyStructure {
            blocks: vec![block(0..3, 0.7, 0.2), block(3..4, 1.5, 0.0), block(4..7, 0.0, 0.9)],
        };
        let dense = p.dense(7);
        for _ in 0..50 {
            let g = DVector::from_fn(7, |_, _| rng.random::<f64>() * 4.0 - 2.0);
            let explicit = (g.transpose() * &dense * &g)[0];
            let implicit = p.value(g.as_slice());
            assert!((explicit - implicit).abs() <= 1e-12 * explicit.abs().max(1.0));
        }
    }

    #[test]
    fn three_unit_problem_matches_grid_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..3 {
            let m = DMatrix::from_fn(2, 3, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let t = DVector::from_fn(2, |_, _| rng.random::<f64>() - 0.5);
            let p = QpProblem {
                m,
                t,
                penalty: PenaltyStructure::mixture([(0..2, 0.1), (2..3, 0.1)], 0.4),
                sum_constraints: vec![SumConstraint::new(0..3, 1.0)],
                lower: 0.0,
                upper: f64::INFINITY,
            };
            let sol = solve(&p, &SolverOptions::default()).unwrap();
            let mut best = f64::INFINITY;
            for i in 0..=1000 {
                for j in 0..=(1000 - i) {
                    let g = [i as f64 * 1e-3, j as f64 * 1e-3, (1000 - i - j) as f64 * 1e-3];
                    best = best.min(p.objective(&g));
                }
            }
            let f = p.objective(&sol.gamma);
            assert!(f <= best + 1e-12 && best - f < 1e-3, "{f} vs grid {best}");
        }
    }

    fn random_problem(seed: u64) -> QpProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = 6;
        let m = DMatrix::from_fn(2, k, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let t = DVector::from_fn(2, |_, _| rng.random::<f64>() - 0.5);
        let rho = rng.random::<f64>();
        QpProblem {
            m,
            t,
            penalty: PenaltyStructure::mixture([(0..2, 0.3), (2..6, 0.3)], rho),
            sum_constraints: vec![SumConstraint::new(0..k, 4.0)],
            lower: 0.0,
            upper: f64::INFINITY,
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn solution_feasible_and_no_worse_than_random_feasible_points(seed in 0u64..10_000) {
            let p = random_problem(seed);
            let sol = solve(&p, &SolverOptions::default()).unwrap();
            prop_assert!(sol.converged);
            prop_assert!(sol.gamma.iter().all(|&g| g >= 0.0));
            prop_assert!((sol.gamma.iter().sum::<f64>() - 4.0).abs() < 1e-9);
            let best = p.objective(&sol.gamma);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            for _ in 0..100 {
                let v: Vec<f64> = (0..6).map(|_| rng.random::<f64>() * 6.0 - 2.0).collect();
                let q = project_feasible(&v, &p.sum_constraints, 0.0, f64::INFINITY).unwrap();
                prop_assert!(best <= p.objective(&q) + 1e-12);
            }
            for w in sol.restart_objectives.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-12));
            }
        }

        #[test]
        fn permutation_within_block_invariance(seed in 0u64..10_000) {
            let p = random_problem(seed);
            // swap columns 2 and 5 (same block)
            let mut q = p.clone();
            q.m.swap_columns(2, 5);
            let a = solve(&p, &SolverOptions::default()).unwrap();
            let b = solve(&q, &SolverOptions::default()).unwrap();
            let mut bg = b.gamma.clone();
            bg.swap(2, 5);
            for (x, y) in a.gamma.iter().zip(&bg) {
                prop_assert!((x - y).abs() < 1e-6, "{:?} vs {:?}", a.gamma, bg);
            }
        }
    }
}
