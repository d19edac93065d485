//! Direct-transcription reference solver.
//!
//! Control is piecewise linear on a uniform grid, so the trapezoidal velocity
//! update and the matching position update are exact and the energy integral is
//! a tridiagonal quadratic form. The resulting QP is solved with a dense dual
//! active-set method (Goldfarb–Idnani).

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::lowlevel::BoundaryData;
use crate::trajectory::Obstacle;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("grid too coarse: N = {0} (need at least 50)")]
    GridTooCoarse(usize),
    #[error("quadratic term is not positive definite")]
    NotPositiveDefinite,
    #[error("constraints are infeasible")]
    Infeasible,
    #[error("iteration cap of {0} exceeded")]
    IterationCap(usize),
}

/// Dense convex QP: minimize `½ xᵀHx + fᵀx` subject to `A_eq x = b_eq` and
/// `A_in x ≤ b_in`.
#[derive(Clone, Debug)]
pub struct QuadraticProgram {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    /// Multipliers, equalities first, then inequalities (all ≥ 0).
    pub lambda_eq: DVector<f64>,
    pub lambda_in: DVector<f64>,
    pub active: Vec<usize>,
    pub iterations: usize,
}

/// Givens rotation zeroing `b` in `(a, b)`; returns `(c, s, r)`.
fn givens(a: f64, b: f64) -> (f64, f64, f64) {
    if b == 0.0 {
        return (1.0, 0.0, a);
    }
    let r = a.hypot(b);
    (a / r, b / r, r)
}

struct ActiveSet {
    /// `J = L⁻ᵀ Q`, updated so that its first `q` columns span the active normals.
    j: DMatrix<f64>,
    /// Upper-triangular `q × q` factor, stored in an `n × n` buffer.
    r: DMatrix<f64>,
    q: usize,
    /// Constraint index for each active slot.
    idx: Vec<usize>,
    /// Multiplier per active slot.
    u: Vec<f64>,
}

impl ActiveSet {
    /// Adds normal with `d = Jᵀ n`; false when it is linearly dependent.
    fn insert(&mut self, d: &mut DVector<f64>) -> bool {
        let n = d.len();
        for k in (self.q + 1..n).rev() {
            let (c, s, rr) = givens(d[k - 1], d[k]);
            if s == 0.0 {
                continue;
            }
            d[k - 1] = rr;
            d[k] = 0.0;
            for row in 0..n {
                let a = self.j[(row, k - 1)];
                let b = self.j[(row, k)];
                self.j[(row, k - 1)] = c * a + s * b;
                self.j[(row, k)] = -s * a + c * b;
            }
        }
        if d[self.q].abs() <= f64::EPSILON * d.amax().max(1.0) * n as f64 {
            return false;
        }
        for i in 0..=self.q {
            self.r[(i, self.q)] = d[i];
        }
        self.q += 1;
        true
    }

    /// Drops active slot `l`, restoring the triangular form.
    fn delete(&mut self, l: usize) {
        let n = self.j.nrows();
        for col in l..self.q - 1 {
            for row in 0..n {
                self.r[(row, col)] = self.r[(row, col + 1)];
            }
            self.idx[col] = self.idx[col + 1];
            self.u[col] = self.u[col + 1];
        }
        self.idx.truncate(self.q - 1);
        self.u.truncate(self.q - 1);
        for row in 0..n {
            self.r[(row, self.q - 1)] = 0.0;
        }
        self.q -= 1;
        for k in l..self.q {
            let (c, s, rr) = givens(self.r[(k, k)], self.r[(k + 1, k)]);
            if s == 0.0 {
                continue;
            }
            self.r[(k, k)] = rr;
            self.r[(k + 1, k)] = 0.0;
            for col in k + 1..self.q {
                let a = self.r[(k, col)];
                let b = self.r[(k + 1, col)];
                self.r[(k, col)] = c * a + s * b;
                self.r[(k + 1, col)] = -s * a + c * b;
            }
            for row in 0..n {
                let a = self.j[(row, k)];
                let b = self.j[(row, k + 1)];
                self.j[(row, k)] = c * a + s * b;
                self.j[(row, k + 1)] = -s * a + c * b;
            }
        }
    }

    /// Solves `R r = d[..q]`.
    fn back_substitute(&self, d: &DVector<f64>) -> Vec<f64> {
        let mut out = vec![0.0; self.q];
        for i in (0..self.q).rev() {
            let mut s = d[i];
            for k in i + 1..self.q {
                s -= self.r[(i, k)] * out[k];
            }
            out[i] = s / self.r[(i, i)];
        }
        out
    }
}

impl QuadraticProgram {
    pub fn dim(&self) -> usize {
        self.h.nrows()
    }

    /// Normal `c` and right-hand side `b` of constraint `i` in `cᵀx ≥ b` form.
    fn constraint(&self, i: usize) -> (DVector<f64>, f64) {
        let me = self.a_eq.nrows();
        if i < me {
            (self.a_eq.row(i).transpose(), self.b_eq[i])
        } else {
            let k = i - me;
            (-self.a_in.row(k).transpose(), -self.b_in[k])
        }
    }

    pub fn solve(&self) -> Result<QpSolution, OracleError> {
        let n = self.dim();
        let me = self.a_eq.nrows();
        let mi = self.a_in.nrows();
        let chol = self
            .h
            .clone()
            .cholesky()
            .ok_or(OracleError::NotPositiveDefinite)?;
        let l = chol.l();
        let linv = l
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .ok_or(OracleError::NotPositiveDefinite)?;
        let mut set = ActiveSet {
            j: linv.transpose(),
            r: DMatrix::zeros(n, n),
            q: 0,
            idx: Vec::new(),
            u: Vec::new(),
        };
        let mut x = -chol.solve(&self.f);
        let normals: Vec<(DVector<f64>, f64)> = (0..me + mi).map(|i| self.constraint(i)).collect();
        let scale: Vec<f64> = normals.iter().map(|(c, _)| c.norm().max(1e-300)).collect();
        let cap = 50 * (n + me + mi) + 100;
        let mut iterations = 0;
        // Equality constraints enter first; their sign is chosen so the
        // violation is negative.
        let mut eq_sign = vec![1.0; me];
        loop {
            iterations += 1;
            if iterations > cap {
                return Err(OracleError::IterationCap(cap));
            }
            // Pick the next violated constraint.
            let mut pick: Option<(usize, f64)> = None;
            for i in 0..me {
                if set.idx.contains(&i) {
                    continue;
                }
                let (c, b) = &normals[i];
                let s = c.dot(&x) - b;
                eq_sign[i] = if s > 0.0 { -1.0 } else { 1.0 };
                pick = Some((i, -s.abs()));
                break;
            }
            if pick.is_none() {
                let mut worst = 0.0;
                for i in me..me + mi {
                    let (c, b) = &normals[i];
                    let s = (c.dot(&x) - b) / scale[i];
                    if s < worst - 1e-12 && !set.idx.contains(&i) {
                        worst = s;
                        pick = Some((i, c.dot(&x) - b));
                    }
                }
            }
            let Some((p, _)) = pick else {
                break;
            };
            let sign = if p < me { eq_sign[p] } else { 1.0 };
            let np = &normals[p].0 * sign;
            let bp = normals[p].1 * sign;
            let mut u_new = 0.0;
            // Partial steps until `p` becomes active.
            loop {
                iterations += 1;
                if iterations > cap {
                    return Err(OracleError::IterationCap(cap));
                }
                let mut d = set.j.transpose() * &np;
                let mut z = DVector::zeros(n);
                for col in set.q..n {
                    z.axpy(d[col], &set.j.column(col), 1.0);
                }
                let r = set.back_substitute(&d);
                // Dual step: largest step keeping inequality multipliers ≥ 0.
                let mut t1 = f64::INFINITY;
                let mut drop = None;
                for (k, rk) in r.iter().enumerate() {
                    if set.idx[k] >= me && *rk > 0.0 {
                        let ratio = set.u[k] / rk;
                        if ratio < t1 {
                            t1 = ratio;
                            drop = Some(k);
                        }
                    }
                }
                let zn = z.dot(&np);
                let slack = np.dot(&x) - bp;
                let t2 = if zn.abs() > 1e-14 * np.norm_squared().max(1e-300) {
                    -slack / zn
                } else {
                    f64::INFINITY
                };
                let t = t1.min(t2);
                if !t.is_finite() {
                    return Err(OracleError::Infeasible);
                }
                if t2.is_infinite() {
                    // Dependent normal: move the multipliers only.
                    for (k, rk) in r.iter().enumerate() {
                        set.u[k] -= t * rk;
                    }
                    u_new += t;
                    set.delete(drop.expect("finite dual step has a blocking constraint"));
                    continue;
                }
                x.axpy(t, &z, 1.0);
                for (k, rk) in r.iter().enumerate() {
                    set.u[k] -= t * rk;
                }
                u_new += t;
                if t == t2 {
                    if !set.insert(&mut d) {
                        return Err(OracleError::Infeasible);
                    }
                    set.idx.push(p);
                    set.u.push(u_new);
                    break;
                }
                set.delete(drop.expect("dual step chosen from a blocking constraint"));
            }
        }
        let objective = 0.5 * x.dot(&(&self.h * &x)) + self.f.dot(&x);
        let mut lambda_eq = DVector::zeros(me);
        let mut lambda_in = DVector::zeros(mi);
        let mut active = Vec::new();
        for (k, &i) in set.idx.iter().enumerate() {
            if i < me {
                lambda_eq[i] = set.u[k] * eq_sign[i];
            } else {
                lambda_in[i - me] = set.u[k];
                active.push(i - me);
            }
        }
        active.sort_unstable();
        Ok(QpSolution {
            x,
            objective,
            lambda_eq,
            lambda_in,
            active,
            iterations,
        })
    }

    /// Largest violation of `A_eq x = b_eq` and `A_in x ≤ b_in`.
    pub fn primal_residual(&self, x: &DVector<f64>) -> f64 {
        let eq = (&self.a_eq * x - &self.b_eq).amax();
        let ineq = (&self.a_in * x - &self.b_in).max().max(0.0);
        if self.a_in.nrows() == 0 {
            return eq;
        }
        eq.max(ineq)
    }

    /// Norm of `Hx + f − A_eqᵀλ_eq + A_inᵀλ_in` (λ_in ≥ 0 on `A_in x ≤ b_in`).
    pub fn stationarity(&self, sol: &QpSolution) -> f64 {
        let g = &self.h * &sol.x + &self.f - self.a_eq.transpose() * &sol.lambda_eq
            + self.a_in.transpose() * &sol.lambda_in;
        g.amax()
    }
}

/// Meaning of an inequality row of a transcribed problem.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RowKind {
    UMax,
    UMin,
    VMax,
    VMin,
    Gap,
}

#[derive(Clone, Debug)]
pub struct DiscretizedProblem {
    pub n: usize,
    pub dt: f64,
    pub t0: f64,
    pub p0: f64,
    pub v0: f64,
    pub qp: QuadraticProgram,
    /// Affine maps from controls at the `N + 1` nodes to node speeds and positions.
    pub v_map: DMatrix<f64>,
    pub p_map: DMatrix<f64>,
    pub rows: Vec<(RowKind, usize)>,
}

#[derive(Clone, Debug)]
pub struct OracleSolution {
    pub t: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub p: Vec<f64>,
    pub cost: f64,
    /// Active inequality rows.
    pub active: Vec<(RowKind, usize)>,
    pub primal_residual: f64,
    pub stationarity: f64,
}

impl OracleSolution {
    pub fn active_kinds(&self) -> Vec<RowKind> {
        let mut kinds: Vec<RowKind> = self.active.iter().map(|r| r.0).collect();
        kinds.sort_unstable();
        kinds.dedup();
        kinds
    }
}

/// Builds the QP over node controls `u_0..u_N` on a uniform grid of `N`
/// intervals, with exact state recurrences for piecewise-linear control.
pub fn transcribe(
    bd: &BoundaryData,
    predecessors: &[Obstacle],
    n: usize,
) -> Result<DiscretizedProblem, OracleError> {
    if n < 50 {
        return Err(OracleError::GridTooCoarse(n));
    }
    let m = n + 1;
    let dt = (bd.tf - bd.t0) / n as f64;
    let mut h = DMatrix::zeros(m, m);
    for k in 0..n {
        h[(k, k)] += dt / 3.0;
        h[(k + 1, k + 1)] += dt / 3.0;
        h[(k, k + 1)] += dt / 6.0;
        h[(k + 1, k)] += dt / 6.0;
    }
    // v_k = v0 + Σ dt (u_j + u_{j+1}) / 2,
    // p_{k+1} = p_k + v_k dt + dt² (2 u_k + u_{k+1}) / 6.
    let mut v_map = DMatrix::zeros(m, m);
    let mut p_map = DMatrix::zeros(m, m);
    for k in 0..n {
        let (vk, pk) = (v_map.row(k).clone_owned(), p_map.row(k).clone_owned());
        let mut vn = vk.clone();
        vn[k] += dt / 2.0;
        vn[k + 1] += dt / 2.0;
        let mut pn = pk + vk * dt;
        pn[k] += dt * dt / 3.0;
        pn[k + 1] += dt * dt / 6.0;
        v_map.set_row(k + 1, &vn);
        p_map.set_row(k + 1, &pn);
    }
    let p_off = |k: usize| bd.p0 + bd.v0 * dt * k as f64;

    let l = &bd.limits;
    let s = &bd.safety;
    let mut rows_a: Vec<DVector<f64>> = Vec::new();
    let mut rows_b = Vec::new();
    let mut kinds = Vec::new();
    let unit = |k: usize, sign: f64| {
        let mut r = DVector::zeros(m);
        r[k] = sign;
        r
    };
    for k in 0..m {
        rows_a.push(unit(k, 1.0));
        rows_b.push(l.u_max);
        kinds.push((RowKind::UMax, k));
        rows_a.push(unit(k, -1.0));
        rows_b.push(-l.u_min);
        kinds.push((RowKind::UMin, k));
    }
    for k in 1..m {
        let vr = v_map.row(k).transpose();
        rows_a.push(vr.clone());
        rows_b.push(l.v_max - bd.v0);
        kinds.push((RowKind::VMax, k));
        rows_a.push(-vr);
        rows_b.push(bd.v0 - l.v_min);
        kinds.push((RowKind::VMin, k));
    }
    for obs in predecessors {
        for k in 1..m {
            let t = bd.t0 + dt * k as f64;
            if t < obs.window.0 - 1e-12 || t > obs.window.1 + 1e-12 {
                continue;
            }
            // ξ p_k + ρ v_k ≤ ξ L_k − δ̄.
            let lk = obs.state(t).p;
            let row = p_map.row(k).transpose() * s.xi + v_map.row(k).transpose() * s.rho;
            let rhs = s.xi * lk - s.dbar - s.xi * p_off(k) - s.rho * bd.v0;
            rows_a.push(row);
            rows_b.push(rhs);
            kinds.push((RowKind::Gap, k));
        }
    }
    let a_in = DMatrix::from_fn(rows_a.len(), m, |i, j| rows_a[i][j]);
    let b_in = DVector::from_vec(rows_b);
    let a_eq = DMatrix::from_fn(1, m, |_, j| p_map[(n, j)]);
    let b_eq = DVector::from_element(1, bd.pf - p_off(n));
    Ok(DiscretizedProblem {
        n,
        dt,
        t0: bd.t0,
        p0: bd.p0,
        v0: bd.v0,
        qp: QuadraticProgram {
            h,
            f: DVector::zeros(m),
            a_eq,
            b_eq,
            a_in,
            b_in,
        },
        v_map,
        p_map,
        rows: kinds,
    })
}

pub fn solve_qp(problem: &DiscretizedProblem) -> Result<OracleSolution, OracleError> {
    let sol = problem.qp.solve()?;
    let m = problem.n + 1;
    let dt = problem.dt;
    let v = &problem.v_map * &sol.x;
    let p = &problem.p_map * &sol.x;
    let t: Vec<f64> = (0..m).map(|k| problem.t0 + dt * k as f64).collect();
    let primal_residual = problem.qp.primal_residual(&sol.x);
    let stationarity = problem.qp.stationarity(&sol);
    // Rows binding at the solution, including degenerate ones with zero multiplier.
    let resid = &problem.qp.a_in * &sol.x - &problem.qp.b_in;
    let active = (0..problem.rows.len())
        .filter(|&i| resid[i] > -1e-7)
        .map(|i| problem.rows[i])
        .collect();
    Ok(OracleSolution {
        u: sol.x.iter().copied().collect(),
        v: (0..m).map(|k| problem.v0 + v[k]).collect(),
        p: (0..m)
            .map(|k| problem.p0 + problem.v0 * dt * k as f64 + p[k])
            .collect(),
        t,
        cost: sol.objective,
        active,
        primal_residual,
        stationarity,
    })
}

/// Transcribes and solves in one step.
pub fn solve(
    bd: &BoundaryData,
    predecessors: &[Obstacle],
    n: usize,
) -> Result<OracleSolution, OracleError> {
    solve_qp(&transcribe(bd, predecessors, n)?)
}
