//! Dense primal-dual interior-point solver for small concave QPs.
//!
//! Problems are stated as maximization:
//!
//! ```text
//! maximize   ½ xᵀQx + cᵀx
//! subject to A x = b        (λ, free)
//!            G x ≤ h        (μ ≥ 0)
//!            l ≤ x ≤ u      (ν_lo, ν_up ≥ 0)
//! ```
//!
//! with stationarity `Qx + c − Aᵀλ − Gᵀμ + ν_lo − ν_up = 0`. After the
//! Mehrotra iterations converge, the active set is read off the iterate and
//! the equality-constrained KKT system on that set is re-solved (as a
//! least-squares correction) to bring complementarity to machine precision.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("malformed program: {0}")]
    Malformed(String),
    #[error("objective is not concave (largest Hessian eigenvalue {0})")]
    NotConcave(f64),
    #[error("problem is infeasible (primal residual {residual:.3e})")]
    Infeasible { residual: f64 },
    #[error("problem is unbounded")]
    Unbounded,
    #[error(
        "no convergence after {iterations} iterations (primal {primal:.3e}, dual {dual:.3e}, gap {gap:.3e})"
    )]
    MaxIterations {
        iterations: usize,
        primal: f64,
        dual: f64,
        gap: f64,
    },
    #[error("numerical failure: {0}")]
    Numerical(String),
}

/// Tolerances and limits for [`solve_qp`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSettings {
    /// Primal feasibility, relative to 1 + largest right-hand side.
    pub feasibility_tolerance: f64,
    /// Stationarity and complementarity, relative to 1 + largest cost coefficient.
    pub complementarity_tolerance: f64,
    /// Relative duality gap sᵀz / (1 + |objective|).
    pub duality_gap_tolerance: f64,
    pub max_iterations: usize,
    /// Diagonal shift on the KKT matrix.
    pub regularization: f64,
    /// Start every slack and inequality multiplier at this value instead of
    /// the least-squares initial point.
    #[serde(default)]
    pub initial_slack: Option<f64>,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            feasibility_tolerance: 1e-9,
            complementarity_tolerance: 1e-9,
            duality_gap_tolerance: 1e-10,
            max_iterations: 200,
            regularization: 1e-10,
            initial_slack: None,
        }
    }
}

impl SolverSettings {
    pub fn with_tolerance(tol: f64) -> Self {
        Self {
            feasibility_tolerance: tol,
            complementarity_tolerance: tol,
            duality_gap_tolerance: tol * 0.1,
            ..Self::default()
        }
    }

    fn check(&self) -> Result<(), QpError> {
        let positive = [
            self.feasibility_tolerance,
            self.complementarity_tolerance,
            self.duality_gap_tolerance,
        ];
        if positive.iter().any(|t| !(*t > 0.0)) || self.regularization < 0.0 {
            return Err(QpError::Malformed("tolerances must be positive".into()));
        }
        if let Some(v) = self.initial_slack {
            if !(v > 0.0) {
                return Err(QpError::Malformed("initial_slack must be positive".into()));
            }
        }
        Ok(())
    }
}

/// A concave quadratic program in maximization form.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProgram {
    /// Variable names in layout order.
    pub names: Vec<String>,
    pub quadratic: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub eq_matrix: DMatrix<f64>,
    pub eq_rhs: DVector<f64>,
    pub ineq_matrix: DMatrix<f64>,
    pub ineq_rhs: DVector<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl QuadraticProgram {
    /// Free variables, zero objective, no constraints.
    pub fn new(names: Vec<String>) -> Self {
        let n = names.len();
        Self {
            names,
            quadratic: DMatrix::zeros(n, n),
            linear: DVector::zeros(n),
            eq_matrix: DMatrix::zeros(0, n),
            eq_rhs: DVector::zeros(0),
            ineq_matrix: DMatrix::zeros(0, n),
            ineq_rhs: DVector::zeros(0),
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    pub fn num_vars(&self) -> usize {
        self.names.len()
    }

    pub fn num_equalities(&self) -> usize {
        self.eq_matrix.nrows()
    }

    pub fn num_inequalities(&self) -> usize {
        self.ineq_matrix.nrows()
    }

    /// Number of finite bounds.
    pub fn num_bounds(&self) -> usize {
        self.lower.iter().filter(|v| v.is_finite()).count()
            + self.upper.iter().filter(|v| v.is_finite()).count()
    }

    /// Append `Σ coef·x = rhs`; returns the row index.
    pub fn add_equality(&mut self, terms: &[(usize, f64)], rhs: f64) -> usize {
        let row = self.eq_matrix.nrows();
        self.eq_matrix = append_row(&self.eq_matrix, terms);
        self.eq_rhs = self.eq_rhs.push(rhs);
        row
    }

    /// Append `Σ coef·x ≤ rhs`; returns the row index.
    pub fn add_inequality(&mut self, terms: &[(usize, f64)], rhs: f64) -> usize {
        let row = self.ineq_matrix.nrows();
        self.ineq_matrix = append_row(&self.ineq_matrix, terms);
        self.ineq_rhs = self.ineq_rhs.push(rhs);
        row
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.quadratic * x)) + self.linear.dot(x)
    }

    pub fn check(&self) -> Result<(), QpError> {
        let n = self.num_vars();
        let shape_ok = self.quadratic.shape() == (n, n)
            && self.linear.len() == n
            && self.eq_matrix.ncols() == n
            && self.eq_rhs.len() == self.eq_matrix.nrows()
            && self.ineq_matrix.ncols() == n
            && self.ineq_rhs.len() == self.ineq_matrix.nrows()
            && self.lower.len() == n
            && self.upper.len() == n;
        if !shape_ok {
            return Err(QpError::Malformed("inconsistent dimensions".into()));
        }
        let finite = self.quadratic.iter().all(|v| v.is_finite())
            && self.linear.iter().all(|v| v.is_finite())
            && self.eq_matrix.iter().all(|v| v.is_finite())
            && self.eq_rhs.iter().all(|v| v.is_finite())
            && self.ineq_matrix.iter().all(|v| v.is_finite())
            && self.ineq_rhs.iter().all(|v| v.is_finite());
        if !finite {
            return Err(QpError::Malformed("non-finite coefficient".into()));
        }
        for j in 0..n {
            if self.lower[j].is_nan() || self.upper[j].is_nan() || self.lower[j] > self.upper[j] {
                return Err(QpError::Malformed(format!(
                    "bounds of {} are inconsistent",
                    self.names[j]
                )));
            }
        }
        if n > 0 {
            let sym = (&self.quadratic + self.quadratic.transpose()) * 0.5;
            let scale = 1.0 + sym.amax();
            let largest = sym.symmetric_eigenvalues().max();
            if largest > 1e-9 * scale {
                return Err(QpError::NotConcave(largest));
            }
        }
        Ok(())
    }
}

fn append_row(m: &DMatrix<f64>, terms: &[(usize, f64)]) -> DMatrix<f64> {
    let (rows, cols) = m.shape();
    let mut out = m.clone().insert_row(rows, 0.0);
    for &(j, v) in terms {
        assert!(j < cols, "variable index {j} out of range");
        out[(rows, j)] += v;
    }
    out
}

/// Residual norms of a primal-dual point.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct QpResiduals {
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
    pub gap: f64,
}

/// Primal values and one multiplier per constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub eq_duals: DVector<f64>,
    pub ineq_duals: DVector<f64>,
    pub lower_duals: DVector<f64>,
    pub upper_duals: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub polished: bool,
    pub residuals: QpResiduals,
}

enum RowKind {
    General(usize),
    Lower(usize),
    Upper(usize),
}

/// Minimization standard form: min ½xᵀHx + cᵀx, Ax = b, Gx ≤ h.
struct StandardForm {
    h_mat: DMatrix<f64>,
    c: DVector<f64>,
    a: DMatrix<f64>,
    b: DVector<f64>,
    g: DMatrix<f64>,
    h: DVector<f64>,
    rows: Vec<RowKind>,
    /// (variable, equality row) for variables fixed by equal bounds.
    fixed: Vec<(usize, usize)>,
    pscale: f64,
    dscale: f64,
}

impl StandardForm {
    fn build(qp: &QuadraticProgram) -> Self {
        let n = qp.num_vars();
        let mut a_rows: Vec<DVector<f64>> = (0..qp.num_equalities())
            .map(|r| qp.eq_matrix.row(r).transpose())
            .collect();
        let mut b: Vec<f64> = qp.eq_rhs.iter().copied().collect();
        let mut g_rows: Vec<DVector<f64>> = Vec::new();
        let mut h = Vec::new();
        let mut rows = Vec::new();
        let mut fixed = Vec::new();
        for r in 0..qp.num_inequalities() {
            g_rows.push(qp.ineq_matrix.row(r).transpose());
            h.push(qp.ineq_rhs[r]);
            rows.push(RowKind::General(r));
        }
        for j in 0..n {
            let (lo, up) = (qp.lower[j], qp.upper[j]);
            if lo.is_finite() && up.is_finite() && lo == up {
                let mut e = DVector::zeros(n);
                e[j] = 1.0;
                fixed.push((j, a_rows.len()));
                a_rows.push(e);
                b.push(lo);
                continue;
            }
            if lo.is_finite() {
                let mut e = DVector::zeros(n);
                e[j] = -1.0;
                g_rows.push(e);
                h.push(-lo);
                rows.push(RowKind::Lower(j));
            }
            if up.is_finite() {
                let mut e = DVector::zeros(n);
                e[j] = 1.0;
                g_rows.push(e);
                h.push(up);
                rows.push(RowKind::Upper(j));
            }
        }
        let a = stack_rows(&a_rows, n);
        let g = stack_rows(&g_rows, n);
        let b = DVector::from_vec(b);
        let h = DVector::from_vec(h);
        let pscale = 1.0 + b.amax().max(h.amax());
        let c = -&qp.linear;
        let dscale = 1.0 + c.amax();
        Self {
            h_mat: -&qp.quadratic,
            c,
            a,
            b,
            g,
            h,
            rows,
            fixed,
            pscale,
            dscale,
        }
    }

    fn n(&self) -> usize {
        self.c.len()
    }
    fn me(&self) -> usize {
        self.b.len()
    }
    fn mi(&self) -> usize {
        self.h.len()
    }

    fn min_objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h_mat * x)) + self.c.dot(x)
    }

    fn residuals(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        z: &DVector<f64>,
        s: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let rd = &self.h_mat * x + &self.c + self.a.tr_mul(y) + self.g.tr_mul(z);
        let rp = &self.a * x - &self.b;
        let rg = &self.g * x + s - &self.h;
        (rd, rp, rg)
    }
}

fn stack_rows(rows: &[DVector<f64>], n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows.len(), n);
    for (r, v) in rows.iter().enumerate() {
        m.set_row(r, &v.transpose());
    }
    m
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.amax()
    }
}

/// Largest step in (0, 1] keeping `v + t·dv ≥ 0`.
fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    let mut t: f64 = 1.0;
    for (vi, di) in v.iter().zip(dv.iter()) {
        if *di < 0.0 {
            t = t.min(-vi / di);
        }
    }
    t
}

struct Newton {
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    w: DVector<f64>,
}

impl Newton {
    fn factor(
        sf: &StandardForm,
        s: &DVector<f64>,
        z: &DVector<f64>,
        reg: f64,
    ) -> Result<Self, QpError> {
        let (n, me) = (sf.n(), sf.me());
        let w = z.component_div(s);
        let mut k = DMatrix::zeros(n + me, n + me);
        let mut top = sf.h_mat.clone();
        if sf.mi() > 0 {
            let mut wg = sf.g.clone();
            for (r, wr) in w.iter().enumerate() {
                wg.row_mut(r).scale_mut(*wr);
            }
            top += sf.g.tr_mul(&wg);
        }
        for i in 0..n {
            top[(i, i)] += reg;
        }
        k.view_mut((0, 0), (n, n)).copy_from(&top);
        k.view_mut((0, n), (n, me)).copy_from(&sf.a.transpose());
        k.view_mut((n, 0), (me, n)).copy_from(&sf.a);
        for i in 0..me {
            k[(n + i, n + i)] = -reg;
        }
        let lu = k.lu();
        if !lu.is_invertible() {
            return Err(QpError::Numerical("singular KKT matrix".into()));
        }
        Ok(Self { lu, w })
    }

    /// Solve for (dx, dy, dz, ds) given residuals and complementarity target `rsz`.
    #[allow(clippy::type_complexity, clippy::too_many_arguments)]
    fn solve(
        &self,
        sf: &StandardForm,
        s: &DVector<f64>,
        z: &DVector<f64>,
        rd: &DVector<f64>,
        rp: &DVector<f64>,
        rg: &DVector<f64>,
        rsz: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>), QpError> {
        let (n, me) = (sf.n(), sf.me());
        let v = (-rsz + z.component_mul(rg)).component_div(s);
        let mut rhs = DVector::zeros(n + me);
        rhs.rows_mut(0, n).copy_from(&(-rd - sf.g.tr_mul(&v)));
        rhs.rows_mut(n, me).copy_from(&(-rp));
        let sol = self
            .lu
            .solve(&rhs)
            .ok_or_else(|| QpError::Numerical("KKT solve failed".into()))?;
        let dx = sol.rows(0, n).into_owned();
        let dy = sol.rows(n, me).into_owned();
        let gdx = &sf.g * &dx;
        let dz = v + self.w.component_mul(&gdx);
        let ds = -rg - gdx;
        if dx.iter().chain(dz.iter()).any(|t| !t.is_finite()) {
            return Err(QpError::Numerical("non-finite Newton direction".into()));
        }
        Ok((dx, dy, dz, ds))
    }
}

/// Solve a concave QP. Returns primal values and all multipliers.
pub fn solve_qp(qp: &QuadraticProgram, settings: &SolverSettings) -> Result<QpSolution, QpError> {
    settings.check()?;
    qp.check()?;
    let sf = StandardForm::build(qp);
    let (n, me, mi) = (sf.n(), sf.me(), sf.mi());
    let reg = settings.regularization;

    // initial point: least-squares fit of Gx ≈ h subject to Ax = b
    let ones = DVector::from_element(mi, 1.0);
    let init = Newton::factor(&sf, &ones, &ones, reg.max(1e-12))?;
    let zero_s = DVector::zeros(mi);
    let rd0 = sf.c.clone();
    let rp0 = -&sf.b;
    let rg0 = -&sf.h;
    // with s = z = 1, rsz = 0 this solves (H + GᵀG)x + Aᵀy = −c + Gᵀh, Ax = b
    let (mut x, mut y, _, _) = init.solve(&sf, &ones, &ones, &rd0, &rp0, &rg0, &zero_s)?;
    let mut s;
    let mut z;
    match settings.initial_slack {
        Some(v) => {
            s = DVector::from_element(mi, v);
            z = DVector::from_element(mi, v);
        }
        None => {
            let s0 = &sf.h - &sf.g * &x;
            let z0 = -&s0;
            let shift = |v: DVector<f64>| {
                let worst = v.iter().fold(f64::NEG_INFINITY, |m, t| m.max(-t));
                if worst < 0.0 {
                    v
                } else {
                    v.add_scalar(1.0 + worst)
                }
            };
            s = shift(s0);
            z = shift(z0);
        }
    }

    let mut iterations = 0;
    let mut converged = false;
    let mut last = QpResiduals::default();
    let mut stalls = 0;
    while iterations < settings.max_iterations {
        let (rd, rp, rg) = sf.residuals(&x, &y, &z, &s);
        let gap = s.dot(&z);
        let pobj = sf.min_objective(&x);
        last = QpResiduals {
            primal: inf_norm(&rp).max(inf_norm(&rg)) / sf.pscale,
            dual: inf_norm(&rd) / sf.dscale,
            complementarity: if mi > 0 { s.component_mul(&z).amax() } else { 0.0 },
            gap: gap / (1.0 + pobj.abs()),
        };
        if last.primal <= settings.feasibility_tolerance
            && last.dual <= settings.complementarity_tolerance
            && last.gap <= settings.duality_gap_tolerance
        {
            converged = true;
            break;
        }
        if !x.iter().all(|v| v.is_finite()) || x.amax() > 1e15 {
            return Err(QpError::Unbounded);
        }
        if mi > 0 && z.amax() > 1e14 {
            // dual ray: Aᵀy + Gᵀz ≈ 0 with bᵀy + hᵀz < 0 certifies infeasibility
            let ray = (sf.a.tr_mul(&y) + sf.g.tr_mul(&z)).amax();
            if sf.b.dot(&y) + sf.h.dot(&z) < 0.0 && ray <= 1e-6 * z.amax() {
                return Err(QpError::Infeasible {
                    residual: last.primal,
                });
            }
        }
        iterations += 1;

        let mu = if mi > 0 { gap / mi as f64 } else { 0.0 };
        let newton = Newton::factor(&sf, &s, &z, reg)?;
        let rsz_aff = s.component_mul(&z);
        let (dx_a, _, dz_a, ds_a) = newton.solve(&sf, &s, &z, &rd, &rp, &rg, &rsz_aff)?;
        let alpha_aff = max_step(&s, &ds_a).min(max_step(&z, &dz_a));
        let sigma = if mi > 0 && mu > 0.0 {
            let s_aff = &s + &ds_a * alpha_aff;
            let z_aff = &z + &dz_a * alpha_aff;
            let mu_aff = s_aff.dot(&z_aff) / mi as f64;
            (mu_aff / mu).powi(3).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let rsz = &rsz_aff + ds_a.component_mul(&dz_a) - DVector::from_element(mi, sigma * mu);
        let (dx, dy, dz, ds) = newton.solve(&sf, &s, &z, &rd, &rp, &rg, &rsz)?;
        let _ = dx_a;
        let alpha = (0.99 * max_step(&s, &ds).min(max_step(&z, &dz))).min(1.0);
        if alpha < 1e-12 {
            stalls += 1;
            if stalls > 3 {
                break;
            }
        }
        x += &dx * alpha;
        y += &dy * alpha;
        z += &dz * alpha;
        s += &ds * alpha;
    }

    let polished = polish(&sf, &x, &y, &z, &s, settings);
    let (mut x, y, z, polished_ok) = match polished {
        Some((px, py, pz)) => (px, py, pz, true),
        None => {
            if !converged {
                if last.primal > 1e3 * settings.feasibility_tolerance.max(1e-6) {
                    return Err(QpError::Infeasible {
                        residual: last.primal,
                    });
                }
                return Err(QpError::MaxIterations {
                    iterations,
                    primal: last.primal,
                    dual: last.dual,
                    gap: last.gap,
                });
            }
            (x, y, z, false)
        }
    };
    for &(j, _) in &sf.fixed {
        x[j] = qp.lower[j];
    }
    let s = (&sf.h - &sf.g * &x).map(|v| v.max(0.0));
    let (rd, rp, rg) = sf.residuals(&x, &y, &z, &s);
    let pobj = sf.min_objective(&x);
    let residuals = QpResiduals {
        primal: inf_norm(&rp).max(inf_norm(&rg)),
        dual: inf_norm(&rd),
        complementarity: if mi > 0 { s.component_mul(&z).amax() } else { 0.0 },
        gap: s.dot(&z) / (1.0 + pobj.abs()),
    };

    let mut eq_duals = DVector::zeros(qp.num_equalities());
    eq_duals.copy_from(&y.rows(0, qp.num_equalities()));
    let mut ineq_duals = DVector::zeros(qp.num_inequalities());
    let mut lower_duals = DVector::zeros(n);
    let mut upper_duals = DVector::zeros(n);
    for (r, kind) in sf.rows.iter().enumerate() {
        match *kind {
            RowKind::General(i) => ineq_duals[i] = z[r],
            RowKind::Lower(j) => lower_duals[j] = z[r],
            RowKind::Upper(j) => upper_duals[j] = z[r],
        }
    }
    for &(j, row) in &sf.fixed {
        let v = y[row];
        if v >= 0.0 {
            upper_duals[j] = v;
        } else {
            lower_duals[j] = -v;
        }
    }
    let _ = me;
    Ok(QpSolution {
        objective: qp.objective(&x),
        x,
        eq_duals,
        ineq_duals,
        lower_duals,
        upper_duals,
        iterations,
        polished: polished_ok,
        residuals,
    })
}

/// Re-solve the KKT system on the active set guessed from (s, z).
fn polish(
    sf: &StandardForm,
    x: &DVector<f64>,
    y: &DVector<f64>,
    z: &DVector<f64>,
    s: &DVector<f64>,
    settings: &SolverSettings,
) -> Option<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    if !x.iter().chain(y.iter()).chain(z.iter()).all(|v| v.is_finite()) {
        return None;
    }
    let (n, me, mi) = (sf.n(), sf.me(), sf.mi());
    let active: Vec<usize> = (0..mi).filter(|&r| s[r] < z[r]).collect();
    let na = active.len();
    let dim = n + me + na;
    let mut k = DMatrix::zeros(dim, dim);
    k.view_mut((0, 0), (n, n)).copy_from(&sf.h_mat);
    k.view_mut((0, n), (n, me)).copy_from(&sf.a.transpose());
    k.view_mut((n, 0), (me, n)).copy_from(&sf.a);
    let mut rhs = DVector::zeros(dim);
    rhs.rows_mut(0, n).copy_from(&(-&sf.c));
    rhs.rows_mut(n, me).copy_from(&sf.b);
    let mut v = DVector::zeros(dim);
    v.rows_mut(0, n).copy_from(x);
    v.rows_mut(n, me).copy_from(y);
    for (k_idx, &r) in active.iter().enumerate() {
        let row = sf.g.row(r);
        k.view_mut((n + me + k_idx, 0), (1, n)).copy_from(&row);
        k.view_mut((0, n + me + k_idx), (n, 1))
            .copy_from(&row.transpose());
        rhs[n + me + k_idx] = sf.h[r];
        v[n + me + k_idx] = z[r];
    }
    let svd = k.clone().svd(true, true);
    let cutoff = 1e-13 * svd.singular_values.max().max(1.0);
    for _ in 0..3 {
        let r = &rhs - &k * &v;
        let delta = svd.solve(&r, cutoff).ok()?;
        v += delta;
    }
    if !v.iter().all(|t| t.is_finite()) {
        return None;
    }
    let px = v.rows(0, n).into_owned();
    let py = v.rows(n, me).into_owned();
    let mut pz = DVector::zeros(mi);
    let dual_tol = settings.complementarity_tolerance * sf.dscale;
    for (k_idx, &r) in active.iter().enumerate() {
        let val = v[n + me + k_idx];
        if val < -dual_tol {
            return None;
        }
        pz[r] = val.max(0.0);
    }
    let primal_tol = settings.feasibility_tolerance * sf.pscale;
    let slack = &sf.h - &sf.g * &px;
    if slack.iter().any(|t| *t < -primal_tol) {
        return None;
    }
    let (rd, rp, _) = sf.residuals(&px, &py, &pz, &slack.map(|t| t.max(0.0)));
    if inf_norm(&rp) > primal_tol || inf_norm(&rd) > dual_tol {
        return None;
    }
    Some((px, py, pz))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn one_dim(lower: f64, upper: f64) -> QuadraticProgram {
        // maximize −(x−1)² = −x² + 2x − 1 (constant dropped)
        let mut qp = QuadraticProgram::new(vec!["x".into()]);
        qp.quadratic[(0, 0)] = -2.0;
        qp.linear[0] = 2.0;
        qp.lower[0] = lower;
        qp.upper[0] = upper;
        qp
    }

    #[test]
    fn unconstrained_interior_optimum() {
        let sol = solve_qp(&one_dim(0.0, f64::INFINITY), &SolverSettings::default()).unwrap();
        assert_relative_eq!(sol.x[0], 1.0, epsilon = 1e-10);
        assert!(sol.lower_duals[0].abs() < 1e-10);
    }

    #[test]
    fn upper_bound_multiplier_by_hand() {
        let sol = solve_qp(&one_dim(f64::NEG_INFINITY, 0.0), &SolverSettings::default()).unwrap();
        assert!(sol.x[0].abs() < 1e-10);
        assert_relative_eq!(sol.upper_duals[0], 2.0, epsilon = 1e-9);
    }

    #[test]
    fn general_inequality_multiplier() {
        let mut qp = one_dim(f64::NEG_INFINITY, f64::INFINITY);
        qp.add_inequality(&[(0, 1.0)], 0.0);
        let sol = solve_qp(&qp, &SolverSettings::default()).unwrap();
        assert!(sol.x[0].abs() < 1e-10);
        assert_relative_eq!(sol.ineq_duals[0], 2.0, epsilon = 1e-9);
        assert!(sol.polished);
    }

    #[test]
    fn fixed_variable_reports_bound_dual() {
        let sol = solve_qp(&one_dim(0.0, 0.0), &SolverSettings::default()).unwrap();
        assert_eq!(sol.x[0], 0.0);
        assert_relative_eq!(sol.upper_duals[0], 2.0, epsilon = 1e-9);
        assert_eq!(sol.lower_duals[0], 0.0);
    }

    #[test]
    fn equality_constrained_projection() {
        // maximize −x² − y² s.t. x + y = 2 → (1, 1), λ = −2
        let mut qp = QuadraticProgram::new(vec!["x".into(), "y".into()]);
        qp.quadratic[(0, 0)] = -2.0;
        qp.quadratic[(1, 1)] = -2.0;
        qp.add_equality(&[(0, 1.0), (1, 1.0)], 2.0);
        let sol = solve_qp(&qp, &SolverSettings::default()).unwrap();
        assert_relative_eq!(sol.x[0], 1.0, epsilon = 1e-10);
        assert_relative_eq!(sol.x[1], 1.0, epsilon = 1e-10);
        // stationarity: −2x − λ = 0
        assert_relative_eq!(sol.eq_duals[0], -2.0, epsilon = 1e-9);
    }

    #[test]
    fn infeasible_program_reported() {
        let mut qp = one_dim(0.0, f64::INFINITY);
        qp.add_inequality(&[(0, 1.0)], -1.0);
        let err = solve_qp(&qp, &SolverSettings::default()).unwrap_err();
        assert!(matches!(err, QpError::Infeasible { .. }), "{err}");
    }

    #[test]
    fn unbounded_linear_program_reported() {
        let mut qp = QuadraticProgram::new(vec!["x".into()]);
        qp.linear[0] = 1.0;
        qp.lower[0] = 0.0;
        let err = solve_qp(&qp, &SolverSettings::default()).unwrap_err();
        assert!(
            matches!(err, QpError::Unbounded | QpError::MaxIterations { .. }),
            "{err}"
        );
    }

    #[test]
    fn convex_objective_rejected() {
        let mut qp = one_dim(0.0, 1.0);
        qp.quadratic[(0, 0)] = 1.0;
        assert!(matches!(
            solve_qp(&qp, &SolverSettings::default()),
            Err(QpError::NotConcave(_))
        ));
    }

    #[test]
    fn bad_settings_rejected() {
        let settings = SolverSettings {
            feasibility_tolerance: 0.0,
            ..SolverSettings::default()
        };
        assert!(matches!(
            solve_qp(&one_dim(0.0, 1.0), &settings),
            Err(QpError::Malformed(_))
        ));
    }

    #[test]
    fn explicit_initial_slack_converges_to_same_point() {
        let mut qp = QuadraticProgram::new(vec!["a".into(), "b".into()]);
        qp.quadratic[(0, 0)] = -1.0;
        qp.quadratic[(1, 1)] = -3.0;
        qp.quadratic[(0, 1)] = -0.5;
        qp.quadratic[(1, 0)] = -0.5;
        qp.linear[0] = 4.0;
        qp.linear[1] = 1.0;
        qp.lower = vec![0.0, 0.0];
        qp.add_inequality(&[(0, 1.0), (1, 2.0)], 2.5);
        let a = solve_qp(&qp, &SolverSettings::default()).unwrap();
        let settings = SolverSettings {
            initial_slack: Some(50.0),
            ..SolverSettings::default()
        };
        let b = solve_qp(&qp, &settings).unwrap();
        assert!((&a.x - &b.x).amax() < 1e-9);
        assert_relative_eq!(a.objective, b.objective, epsilon = 1e-10);
    }
}
