//! Dense convex QP solver: `min ½ yᵀPy + qᵀy + c0` subject to
//! `A_eq y = b_eq` and `A_in y ≤ b_in`.
//!
//! Operator splitting in the OSQP style with over-relaxation, a fixed step
//! size, Ruiz equilibration, infeasibility certificates and an active-set
//! polish step.

use std::collections::HashMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("cost matrix is not positive semidefinite (smallest eigenvalue {0:e})")]
    NotConvex(f64),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("inconsistent dimensions: {0}")]
    Shape(String),
    #[error("KKT factorization failed")]
    Factorization,
}

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub constant: f64,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
    pub names: Vec<String>,
}

impl QpProblem {
    pub fn new(p: DMatrix<f64>, q: DVector<f64>) -> Self {
        let n = q.len();
        Self {
            p,
            q,
            constant: 0.0,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            a_in: DMatrix::zeros(0, n),
            b_in: DVector::zeros(0),
            names: (0..n).map(|i| format!("y{i}")).collect(),
        }
    }

    pub fn num_vars(&self) -> usize {
        self.q.len()
    }

    pub fn with_eq(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_eq = a;
        self.b_eq = b;
        self
    }

    pub fn with_ineq(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_in = a;
        self.b_in = b;
        self
    }

    pub fn objective(&self, y: &DVector<f64>) -> f64 {
        0.5 * y.dot(&(&self.p * y)) + self.q.dot(y) + self.constant
    }

    /// Largest equality or inequality violation.
    pub fn primal_residual(&self, y: &DVector<f64>) -> f64 {
        let eq = (&self.a_eq * y - &self.b_eq).amax();
        let ineq = (&self.a_in * y - &self.b_in).iter().fold(0.0f64, |m, v| m.max(*v));
        if self.a_eq.nrows() == 0 {
            ineq
        } else {
            eq.max(ineq)
        }
    }

    fn validate(&self) -> Result<(), QpError> {
        let n = self.num_vars();
        if self.p.shape() != (n, n) {
            return Err(QpError::Shape(format!("P is {:?}, expected {n}x{n}", self.p.shape())));
        }
        if self.a_eq.ncols() != n || self.a_eq.nrows() != self.b_eq.len() {
            return Err(QpError::Shape("equality block".into()));
        }
        if self.a_in.ncols() != n || self.a_in.nrows() != self.b_in.len() {
            return Err(QpError::Shape("inequality block".into()));
        }
        let finite = |m: &DMatrix<f64>| m.iter().all(|v| v.is_finite());
        if !finite(&self.p) {
            return Err(QpError::NonFinite("P"));
        }
        if !self.q.iter().all(|v| v.is_finite()) || !self.constant.is_finite() {
            return Err(QpError::NonFinite("q"));
        }
        if !finite(&self.a_eq) || !self.b_eq.iter().all(|v| v.is_finite()) {
            return Err(QpError::NonFinite("equality constraints"));
        }
        // +inf on an inequality right-hand side is an absent constraint
        if !finite(&self.a_in) || self.b_in.iter().any(|v| v.is_nan() || *v == f64::NEG_INFINITY) {
            return Err(QpError::NonFinite("inequality constraints"));
        }
        Ok(())
    }

    /// Plain-text dump: one `name rows cols` header per block followed by
    /// whitespace-separated rows.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let mut block = |name: &str, m: &DMatrix<f64>| {
            let _ = writeln!(s, "{name} {} {}", m.nrows(), m.ncols());
            for r in m.row_iter() {
                let row: Vec<String> = r.iter().map(|v| format!("{v:e}")).collect();
                let _ = writeln!(s, "{}", row.join(" "));
            }
        };
        block("P", &self.p);
        block("q", &DMatrix::from_column_slice(self.q.len(), 1, self.q.as_slice()));
        block("A_eq", &self.a_eq);
        block("b_eq", &DMatrix::from_column_slice(self.b_eq.len(), 1, self.b_eq.as_slice()));
        block("A_in", &self.a_in);
        block("b_in", &DMatrix::from_column_slice(self.b_in.len(), 1, self.b_in.as_slice()));
        let _ = writeln!(s, "constant {:e}", self.constant);
        let _ = writeln!(s, "names {}", self.names.join(" "));
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Certificate {
    /// No point satisfies the constraints.
    Primal,
    /// The objective is unbounded below on the feasible set.
    Dual,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub y: DVector<f64>,
    /// Multipliers for the stacked `[eq; in]` rows.
    pub multipliers: DVector<f64>,
    pub status: QpStatus,
    pub certificate: Option<Certificate>,
    pub objective: f64,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub polished: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct QpSettings {
    pub tol_feas: f64,
    pub tol_opt: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub scaling_iters: usize,
    pub check_every: usize,
    pub polish: bool,
    pub infeas_tol: f64,
    /// Rebalance the step size from the primal and dual residual ratio.
    pub adaptive_rho: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tol_feas: 1e-6,
            tol_opt: 1e-6,
            max_iter: 10_000,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            scaling_iters: 10,
            check_every: 10,
            polish: true,
            infeas_tol: 1e-5,
            adaptive_rho: true,
        }
    }
}

const EQ_RHO_SCALE: f64 = 1e3;
const ADAPT_EVERY: usize = 50;
const ADAPT_RATIO: f64 = 5.0;
const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const INF: f64 = 1e20;

pub fn solve_qp(p: &QpProblem, settings: &QpSettings) -> Result<QpSolution, QpError> {
    solve_qp_from(p, settings, None)
}

/// Solve with an optional primal starting point.
pub fn solve_qp_from(
    prob: &QpProblem,
    st: &QpSettings,
    y0: Option<&DVector<f64>>,
) -> Result<QpSolution, QpError> {
    prob.validate()?;
    let n = prob.num_vars();
    let p_sym = (&prob.p + prob.p.transpose()) * 0.5;
    if n > 0 {
        let min_eig = SymmetricEigen::new(p_sym.clone()).eigenvalues.min();
        if min_eig < -1e-9 {
            return Err(QpError::NotConvex(min_eig));
        }
    }

    // Stack as l ≤ A y ≤ u, merging mirrored inequality pairs into ranges.
    let me = prob.a_eq.nrows();
    let rows = stack_rows(prob);
    let m = rows.len();
    let mut a = DMatrix::zeros(m, n);
    let mut l = DVector::from_element(m, -INF);
    let mut u = DVector::from_element(m, INF);
    for (r, src) in rows.iter().enumerate() {
        match *src {
            RowSrc::Eq(i) => {
                a.row_mut(r).copy_from(&prob.a_eq.row(i));
                l[r] = prob.b_eq[i];
                u[r] = prob.b_eq[i];
            }
            RowSrc::In(i) => {
                a.row_mut(r).copy_from(&prob.a_in.row(i));
                u[r] = prob.b_in[i].min(INF);
            }
            RowSrc::Range(i, j) => {
                a.row_mut(r).copy_from(&prob.a_in.row(i));
                u[r] = prob.b_in[i].min(INF);
                l[r] = (-prob.b_in[j]).max(-INF);
            }
        }
    }

    // Crossed ranges need no iterations.
    if (0..m).any(|r| l[r] > u[r] + st.tol_feas * (1.0 + u[r].abs())) {
        let y = y0.filter(|g| g.len() == n).cloned().unwrap_or_else(|| DVector::zeros(n));
        let prim = unscaled_primal(&a, &l, &u, &y);
        return Ok(finish(prob, &rows, y, DVector::zeros(m), QpStatus::Infeasible, Some(Certificate::Primal), 0, prim, 0.0, false));
    }

    let scaling = Scaling::ruiz(&p_sym, &prob.q, &a, st.scaling_iters);
    let ps = scaling.scale_p(&p_sym);
    let qs = scaling.scale_q(&prob.q);
    let as_ = scaling.scale_a(&a);
    let ls = scaling.scale_bounds(&l);
    let us = scaling.scale_bounds(&u);

    let eq_row: Vec<bool> = (0..m).map(|i| i < me || u[i] - l[i] <= 1e-9 * (1.0 + u[i].abs())).collect();
    let rho_vec = |r: f64| DVector::from_fn(m, |i, _| if eq_row[i] { r * EQ_RHO_SCALE } else { r });
    let factor = |rho: &DVector<f64>| {
        let mut kkt = ps.clone();
        for i in 0..n {
            kkt[(i, i)] += st.sigma;
        }
        let art_rho = DMatrix::from_fn(n, m, |i, j| as_[(j, i)] * rho[j]);
        kkt += &art_rho * &as_;
        kkt.cholesky().ok_or(QpError::Factorization)
    };
    let mut rho_s = st.rho;
    let mut rho = rho_vec(rho_s);
    let mut chol = factor(&rho)?;
    let mut x = match y0 {
        Some(g) if g.len() == n && g.iter().all(|v| v.is_finite()) => scaling.unscale_to_scaled_x(g),
        _ => DVector::zeros(n),
    };
    let mut z = project(&(&as_ * &x), &ls, &us);
    let mut yd = DVector::zeros(m);
    let mut iters = 0;
    let mut status = QpStatus::MaxIter;
    let mut certificate = None;

    while iters < st.max_iter {
        iters += 1;
        let x_prev = x.clone();
        let y_prev = yd.clone();
        let rz = rho.component_mul(&z) - &yd;
        let rhs = &x * st.sigma - &qs + as_.transpose() * rz;
        let xt = chol.solve(&rhs);
        let zt = &as_ * &xt;
        x = &xt * st.alpha + &x_prev * (1.0 - st.alpha);
        let zr = &zt * st.alpha + &z * (1.0 - st.alpha);
        let z_new = project(&(&zr + yd.component_div(&rho)), &ls, &us);
        yd += rho.component_mul(&(&zr - &z_new));
        z = z_new;

        if iters % st.check_every != 0 && iters != st.max_iter {
            continue;
        }
        if !x.iter().chain(yd.iter()).all(|v| v.is_finite()) {
            return Err(QpError::NonFinite("iterate"));
        }
        let (xo, yo) = (scaling.unscale_x(&x), scaling.unscale_y(&yd));
        let prim = unscaled_primal(&a, &l, &u, &xo);
        let dual = (&p_sym * &xo + &prob.q + a.transpose() * &yo).amax();
        if prim <= st.tol_feas && dual <= st.tol_opt {
            status = QpStatus::Optimal;
            break;
        }
        let dy = &yd - &y_prev;
        if primal_infeasible(&as_, &ls, &us, &dy, st.infeas_tol) {
            status = QpStatus::Infeasible;
            certificate = Some(Certificate::Primal);
            break;
        }
        let dx = &x - &x_prev;
        if dual_infeasible(&ps, &qs, &as_, &ls, &us, &dx, st.infeas_tol) {
            status = QpStatus::Infeasible;
            certificate = Some(Certificate::Dual);
            break;
        }
        if st.adaptive_rho && iters % ADAPT_EVERY == 0 {
            let ax = &as_ * &x;
            let prim_s = (&ax - &z).amax() / ax.amax().max(z.amax()).max(1e-12);
            let px = &ps * &x;
            let aty = as_.transpose() * &yd;
            let dual_s = (&px + &qs + &aty).amax() / px.amax().max(aty.amax()).max(qs.amax()).max(1e-12);
            let next = (rho_s * (prim_s / dual_s.max(1e-12)).sqrt()).clamp(RHO_MIN, RHO_MAX);
            if next > ADAPT_RATIO * rho_s || next < rho_s / ADAPT_RATIO {
                rho_s = next;
                rho = rho_vec(rho_s);
                chol = factor(&rho)?;
            }
        }
        // Early polish attempt once the iterate is near-converged.
        if st.polish && prim <= 1e3 * st.tol_feas.max(1e-9) && dual <= 1e3 * st.tol_opt.max(1e-9) {
            if let Some((px, py)) = polish(&p_sym, &prob.q, &a, &l, &u, &xo, &yo) {
                let pp = unscaled_primal(&a, &l, &u, &px);
                let pd = (&p_sym * &px + &prob.q + a.transpose() * &py).amax();
                if pp <= st.tol_feas && pd <= st.tol_opt {
                    return Ok(finish(prob, &rows, px, py, QpStatus::Optimal, None, iters, pp, pd, true));
                }
            }
        }
    }

    let xo = scaling.unscale_x(&x);
    let yo = scaling.unscale_y(&yd);
    let mut prim = unscaled_primal(&a, &l, &u, &xo);
    let mut dual = (&p_sym * &xo + &prob.q + a.transpose() * &yo).amax();
    let (mut xf, mut yf, mut polished) = (xo, yo, false);
    if st.polish && status == QpStatus::Optimal {
        if let Some((px, py)) = polish(&p_sym, &prob.q, &a, &l, &u, &xf, &yf) {
            let pp = unscaled_primal(&a, &l, &u, &px);
            let pd = (&p_sym * &px + &prob.q + a.transpose() * &py).amax();
            if pp <= prim.max(st.tol_feas) && pd <= dual.max(st.tol_opt) {
                xf = px;
                yf = py;
                prim = pp;
                dual = pd;
                polished = true;
            }
        }
    }
    Ok(finish(prob, &rows, xf, yf, status, certificate, iters, prim, dual, polished))
}

#[allow(clippy::too_many_arguments)]
fn finish(
    prob: &QpProblem,
    rows: &[RowSrc],
    y: DVector<f64>,
    stacked: DVector<f64>,
    status: QpStatus,
    certificate: Option<Certificate>,
    iterations: usize,
    primal_residual: f64,
    dual_residual: f64,
    polished: bool,
) -> QpSolution {
    let me = prob.a_eq.nrows();
    let mut mult = DVector::zeros(me + prob.a_in.nrows());
    for (r, src) in rows.iter().enumerate() {
        match *src {
            RowSrc::Eq(i) => mult[i] = stacked[r],
            RowSrc::In(i) => mult[me + i] = stacked[r],
            RowSrc::Range(i, j) => {
                if stacked[r] >= 0.0 {
                    mult[me + i] = stacked[r];
                } else {
                    mult[me + j] = -stacked[r];
                }
            }
        }
    }
    QpSolution {
        objective: prob.objective(&y),
        y,
        multipliers: mult,
        status,
        certificate,
        iterations,
        primal_residual,
        dual_residual,
        polished,
    }
}

#[derive(Debug, Clone, Copy)]
enum RowSrc {
    Eq(usize),
    In(usize),
    /// `a_i·y ≤ b_i` together with `a_j = −a_i`.
    Range(usize, usize),
}

fn stack_rows(prob: &QpProblem) -> Vec<RowSrc> {
    let key = |sign: f64, i: usize| -> Vec<u64> {
        prob.a_in
            .row(i)
            .iter()
            .map(|v| {
                let x = sign * v;
                if x == 0.0 {
                    0
                } else {
                    x.to_bits()
                }
            })
            .collect()
    };
    let mi = prob.a_in.nrows();
    let mut open: HashMap<Vec<u64>, Vec<usize>> = HashMap::new();
    let mut partner = vec![None; mi];
    for i in 0..mi {
        if let Some(j) = open.get_mut(&key(-1.0, i)).and_then(|v| v.pop()) {
            partner[j] = Some(i);
            partner[i] = Some(usize::MAX);
        } else {
            open.entry(key(1.0, i)).or_default().push(i);
        }
    }
    let mut rows: Vec<RowSrc> = (0..prob.a_eq.nrows()).map(RowSrc::Eq).collect();
    for (i, p) in partner.iter().enumerate() {
        match *p {
            None => rows.push(RowSrc::In(i)),
            Some(usize::MAX) => {}
            Some(j) => rows.push(RowSrc::Range(i, j)),
        }
    }
    rows
}

fn project(v: &DVector<f64>, l: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(v.len(), |i, _| v[i].max(l[i]).min(u[i]))
}

fn unscaled_primal(a: &DMatrix<f64>, l: &DVector<f64>, u: &DVector<f64>, x: &DVector<f64>) -> f64 {
    let ax = a * x;
    let mut r = 0.0f64;
    for i in 0..ax.len() {
        r = r.max(l[i] - ax[i]).max(ax[i] - u[i]);
    }
    r
}

fn primal_infeasible(a: &DMatrix<f64>, l: &DVector<f64>, u: &DVector<f64>, dy: &DVector<f64>, tol: f64) -> bool {
    let norm = dy.amax();
    if norm < 1e-12 {
        return false;
    }
    if (a.transpose() * dy).amax() > tol * norm {
        return false;
    }
    let mut s = 0.0;
    for i in 0..dy.len() {
        if dy[i] > 0.0 {
            if u[i] >= INF * 0.5 {
                if dy[i] > tol * norm {
                    return false;
                }
                continue;
            }
            s += u[i] * dy[i];
        } else if dy[i] < 0.0 {
            if l[i] <= -INF * 0.5 {
                if -dy[i] > tol * norm {
                    return false;
                }
                continue;
            }
            s += l[i] * dy[i];
        }
    }
    s < -tol * norm
}

fn dual_infeasible(
    p: &DMatrix<f64>,
    q: &DVector<f64>,
    a: &DMatrix<f64>,
    l: &DVector<f64>,
    u: &DVector<f64>,
    dx: &DVector<f64>,
    tol: f64,
) -> bool {
    let norm = dx.amax();
    if norm < 1e-12 {
        return false;
    }
    if (p * dx).amax() > tol * norm || q.dot(dx) > -tol * norm {
        return false;
    }
    let adx = a * dx;
    (0..adx.len()).all(|i| {
        let lo_ok = l[i] <= -INF * 0.5 || adx[i] >= -tol * norm;
        let hi_ok = u[i] >= INF * 0.5 || adx[i] <= tol * norm;
        lo_ok && hi_ok
    })
}

/// Solve the equality-constrained problem on the guessed active set.
fn polish(
    p: &DMatrix<f64>,
    q: &DVector<f64>,
    a: &DMatrix<f64>,
    l: &DVector<f64>,
    u: &DVector<f64>,
    x: &DVector<f64>,
    y: &DVector<f64>,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = x.len();
    let ax = a * x;
    let mut active: Vec<(usize, f64)> = Vec::new();
    for i in 0..a.nrows() {
        if l[i] == u[i] {
            active.push((i, l[i]));
        } else if u[i] < INF * 0.5 && (u[i] - ax[i] < y[i] || y[i] > 0.0 && (u[i] - ax[i]).abs() < 1e-7) {
            active.push((i, u[i]));
        } else if l[i] > -INF * 0.5 && (ax[i] - l[i] < -y[i] || y[i] < 0.0 && (ax[i] - l[i]).abs() < 1e-7) {
            active.push((i, l[i]));
        }
    }
    let k = active.len();
    let delta = 1e-9;
    let mut kkt = DMatrix::zeros(n + k, n + k);
    kkt.view_mut((0, 0), (n, n)).copy_from(p);
    for i in 0..n {
        kkt[(i, i)] += delta;
    }
    let mut rhs = DVector::zeros(n + k);
    rhs.rows_mut(0, n).copy_from(&(-q));
    for (r, (i, b)) in active.iter().enumerate() {
        for j in 0..n {
            kkt[(n + r, j)] = a[(*i, j)];
            kkt[(j, n + r)] = a[(*i, j)];
        }
        kkt[(n + r, n + r)] = -delta;
        rhs[n + r] = *b;
    }
    let lu = kkt.clone().lu();
    let mut sol = lu.solve(&rhs)?;
    // iterative refinement against the unregularized system
    let mut exact = kkt;
    for i in 0..n {
        exact[(i, i)] -= delta;
    }
    for r in 0..k {
        exact[(n + r, n + r)] = 0.0;
    }
    for _ in 0..5 {
        let res = &rhs - &exact * &sol;
        sol += lu.solve(&res)?;
    }
    if !sol.iter().all(|v| v.is_finite()) {
        return None;
    }
    let px = sol.rows(0, n).into_owned();
    let mut py = DVector::zeros(a.nrows());
    for (r, (i, b)) in active.iter().enumerate() {
        let v = sol[n + r];
        // sign must match the side of the bound that is active
        if l[*i] != u[*i] {
            let upper = (*b - u[*i]).abs() < f64::EPSILON * (1.0 + b.abs());
            if (upper && v < -1e-9) || (!upper && v > 1e-9) {
                return None;
            }
        }
        py[*i] = v;
    }
    Some((px, py))
}

/// Ruiz equilibration state: `ȳ = D⁻¹y`, constraints scaled by `E`, cost by `c`.
struct Scaling {
    d: DVector<f64>,
    e: DVector<f64>,
    c: f64,
}

impl Scaling {
    fn ruiz(p: &DMatrix<f64>, q: &DVector<f64>, a: &DMatrix<f64>, iters: usize) -> Self {
        let (n, m) = (p.nrows(), a.nrows());
        let mut d = DVector::from_element(n, 1.0);
        let mut e = DVector::from_element(m, 1.0);
        let mut ps = p.clone();
        let mut as_ = a.clone();
        let clamp = |v: f64| if v < 1e-4 { 1.0 } else { v.min(1e4) };
        for _ in 0..iters {
            let mut dd = DVector::from_element(n, 0.0);
            for j in 0..n {
                let mut mx = 0.0f64;
                for i in 0..n {
                    mx = mx.max(ps[(i, j)].abs());
                }
                for i in 0..m {
                    mx = mx.max(as_[(i, j)].abs());
                }
                dd[j] = 1.0 / clamp(mx).sqrt();
            }
            let mut ee = DVector::from_element(m, 0.0);
            for i in 0..m {
                let mx = as_.row(i).amax();
                ee[i] = 1.0 / clamp(mx).sqrt();
            }
            for i in 0..n {
                for j in 0..n {
                    ps[(i, j)] *= dd[i] * dd[j];
                }
            }
            for i in 0..m {
                for j in 0..n {
                    as_[(i, j)] *= ee[i] * dd[j];
                }
            }
            d.component_mul_assign(&dd);
            e.component_mul_assign(&ee);
        }
        let mean_col = if n > 0 {
            (0..n).map(|j| ps.column(j).amax()).sum::<f64>() / n as f64
        } else {
            1.0
        };
        let qn = q.component_mul(&d).amax();
        let c = 1.0 / clamp(mean_col.max(qn));
        Self { d, e, c }
    }

    fn scale_p(&self, p: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(p.nrows(), p.ncols(), |i, j| self.c * self.d[i] * p[(i, j)] * self.d[j])
    }

    fn scale_q(&self, q: &DVector<f64>) -> DVector<f64> {
        q.component_mul(&self.d) * self.c
    }

    fn scale_a(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| self.e[i] * a[(i, j)] * self.d[j])
    }

    fn scale_bounds(&self, b: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(b.len(), |i, _| {
            if b[i].abs() >= INF * 0.5 {
                b[i]
            } else {
                b[i] * self.e[i]
            }
        })
    }

    fn unscale_x(&self, x: &DVector<f64>) -> DVector<f64> {
        x.component_mul(&self.d)
    }

    fn unscale_to_scaled_x(&self, x: &DVector<f64>) -> DVector<f64> {
        x.component_div(&self.d)
    }

    fn unscale_y(&self, y: &DVector<f64>) -> DVector<f64> {
        y.component_mul(&self.e) / self.c
    }
}
