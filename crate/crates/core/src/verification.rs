//! Brute-force oracles: active-set enumeration, the closed-form single-node
//! market, a convexity probe for sampled value functions, and a random
//! instance generator.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::equilibrium::{
    assemble_welfare_program, extract_solution, EquilibriumError, EquilibriumSolution,
    VolumetricCharges,
};
use crate::model::{
    ConsumerGroup, GenUnit, MarketInstance, Network, Node, ProsumerGroup,
    DEFAULT_EQUITY_WEIGHT_FACTOR,
};
use crate::qp::{QpResiduals, QpSolution, QuadraticProgram};

/// Hard ceiling on enumerated inequalities.
pub const MAX_ENUMERATED: usize = 25;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("{count} inequalities exceed the enumeration budget of {limit}")]
    BudgetExceeded { count: usize, limit: usize },
    #[error("invalid budget: {0}")]
    InvalidBudget(String),
    #[error("no active set yields a feasible KKT point")]
    NoCandidate,
    #[error("no three collinear samples to probe")]
    NoCollinearTriple,
    #[error(transparent)]
    Equilibrium(#[from] EquilibriumError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleBudget {
    pub max_inequalities: usize,
    pub tolerance: f64,
}

impl Default for OracleBudget {
    fn default() -> Self {
        Self {
            max_inequalities: 16,
            tolerance: 1e-6,
        }
    }
}

impl OracleBudget {
    fn check(&self) -> Result<(), OracleError> {
        if self.max_inequalities > MAX_ENUMERATED {
            return Err(OracleError::InvalidBudget(format!(
                "max_inequalities must be <= {MAX_ENUMERATED}"
            )));
        }
        if !(self.tolerance > 0.0) {
            return Err(OracleError::InvalidBudget("tolerance must be > 0".into()));
        }
        Ok(())
    }
}

/// One row `gᵀx ≤ h` in the oracle's view of the program.
enum Row {
    General(usize),
    Lower(usize),
    Upper(usize),
}

struct Enumeration<'a> {
    qp: &'a QuadraticProgram,
    /// Equality rows including variables pinned by equal bounds.
    eq: Vec<(DVector<f64>, f64)>,
    pinned: Vec<(usize, usize)>,
    ineq: Vec<(DVector<f64>, f64, Row)>,
}

impl<'a> Enumeration<'a> {
    fn new(qp: &'a QuadraticProgram) -> Self {
        let n = qp.num_vars();
        let unit = |j: usize, s: f64| {
            let mut e = DVector::zeros(n);
            e[j] = s;
            e
        };
        let mut eq: Vec<(DVector<f64>, f64)> = (0..qp.num_equalities())
            .map(|r| (qp.eq_matrix.row(r).transpose(), qp.eq_rhs[r]))
            .collect();
        let mut pinned = Vec::new();
        let mut ineq: Vec<(DVector<f64>, f64, Row)> = (0..qp.num_inequalities())
            .map(|r| (qp.ineq_matrix.row(r).transpose(), qp.ineq_rhs[r], Row::General(r)))
            .collect();
        for j in 0..n {
            let (lo, up) = (qp.lower[j], qp.upper[j]);
            if lo.is_finite() && lo == up {
                pinned.push((j, eq.len()));
                eq.push((unit(j, 1.0), lo));
                continue;
            }
            if lo.is_finite() {
                ineq.push((unit(j, -1.0), -lo, Row::Lower(j)));
            }
            if up.is_finite() {
                ineq.push((unit(j, 1.0), up, Row::Upper(j)));
            }
        }
        Self {
            qp,
            eq,
            pinned,
            ineq,
        }
    }

    /// Solve the KKT system with the rows in `mask` held tight. Returns the
    /// (minimization-sign) primal, equality and inequality multipliers when
    /// the point is feasible with sign-correct multipliers.
    fn candidate(&self, mask: u32, tol: f64) -> Option<(DVector<f64>, DVector<f64>, DVector<f64>)> {
        let qp = self.qp;
        let n = qp.num_vars();
        let me = self.eq.len();
        let active: Vec<usize> = (0..self.ineq.len()).filter(|r| mask >> r & 1 == 1).collect();
        let dim = n + me + active.len();
        let mut k = DMatrix::zeros(dim, dim);
        let mut rhs = DVector::zeros(dim);
        k.view_mut((0, 0), (n, n)).copy_from(&(-&qp.quadratic));
        rhs.rows_mut(0, n).copy_from(&qp.linear);
        let rows = self
            .eq
            .iter()
            .map(|(g, h)| (g, *h))
            .chain(active.iter().map(|&r| (&self.ineq[r].0, self.ineq[r].1)));
        for (off, (g, h)) in rows.enumerate() {
            let r = n + off;
            for j in 0..n {
                k[(r, j)] = g[j];
                k[(j, r)] = g[j];
            }
            rhs[r] = h;
        }
        let svd = k.clone().svd(true, true);
        let cutoff = 1e-12 * svd.singular_values.max().max(1.0);
        let sol = svd.solve(&rhs, cutoff).ok()?;
        let scale = 1.0 + rhs.amax();
        if (&k * &sol - &rhs).amax() > 1e-8 * scale {
            return None;
        }
        let x = sol.rows(0, n).into_owned();
        let dual_scale = 1.0 + qp.linear.amax();
        let mut z = DVector::zeros(self.ineq.len());
        for (off, &r) in active.iter().enumerate() {
            let v = sol[n + me + off];
            if v < -1e-9 * dual_scale {
                return None;
            }
            z[r] = v.max(0.0);
        }
        for (g, h, _) in &self.ineq {
            if g.dot(&x) > h + tol * (1.0 + h.abs()) {
                return None;
            }
        }
        let y = sol.rows(n, me).into_owned();
        Some((x, y, z))
    }

    fn to_solution(&self, x: DVector<f64>, y: DVector<f64>, z: DVector<f64>) -> QpSolution {
        let qp = self.qp;
        let n = qp.num_vars();
        let mut ineq_duals = DVector::zeros(qp.num_inequalities());
        let mut lower_duals = DVector::zeros(n);
        let mut upper_duals = DVector::zeros(n);
        for (r, (_, _, kind)) in self.ineq.iter().enumerate() {
            match *kind {
                Row::General(i) => ineq_duals[i] = z[r],
                Row::Lower(j) => lower_duals[j] = z[r],
                Row::Upper(j) => upper_duals[j] = z[r],
            }
        }
        for &(j, row) in &self.pinned {
            if y[row] >= 0.0 {
                upper_duals[j] = y[row];
            } else {
                lower_duals[j] = -y[row];
            }
        }
        QpSolution {
            objective: qp.objective(&x),
            eq_duals: y.rows(0, qp.num_equalities()).into_owned(),
            x,
            ineq_duals,
            lower_duals,
            upper_duals,
            iterations: 0,
            polished: false,
            residuals: QpResiduals::default(),
        }
    }
}

/// Number of inequality rows (general rows plus finite, non-pinned bounds)
/// the oracle would enumerate over.
pub fn enumerated_rows(qp: &QuadraticProgram) -> usize {
    Enumeration::new(qp).ineq.len()
}

/// Solve a concave QP by trying every active set. The best objective wins;
/// ties go to the lowest subset index.
pub fn enumerate_qp(qp: &QuadraticProgram, budget: &OracleBudget) -> Result<QpSolution, OracleError> {
    budget.check()?;
    let en = Enumeration::new(qp);
    let m = en.ineq.len();
    if m > budget.max_inequalities {
        return Err(OracleError::BudgetExceeded {
            count: m,
            limit: budget.max_inequalities,
        });
    }
    let feas_tol = 1e-9;
    let found: Vec<(u32, f64)> = (0..1u32 << m)
        .into_par_iter()
        .filter_map(|mask| {
            en.candidate(mask, feas_tol)
                .map(|(x, _, _)| (mask, qp.objective(&x)))
        })
        .collect();
    let best = found
        .iter()
        .map(|&(_, v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let tie = 1e-12 * (1.0 + best.abs());
    let mask = found
        .iter()
        .filter(|&&(_, v)| v >= best - tie)
        .map(|&(mask, _)| mask)
        .min()
        .ok_or(OracleError::NoCandidate)?;
    let (x, y, z) = en.candidate(mask, feas_tol).expect("candidate is reproducible");
    Ok(en.to_solution(x, y, z))
}

/// Market solution by active-set enumeration on the welfare program.
pub fn enumerate_active_sets(
    instance: &MarketInstance,
    tau: &VolumetricCharges,
    budget: &OracleBudget,
) -> Result<EquilibriumSolution, OracleError> {
    let program = assemble_welfare_program(instance, tau)?;
    let sol = enumerate_qp(&program.qp, budget)?;
    Ok(extract_solution(instance, &program, &sol))
}

/// Closed-form clearing of one consumer-only node with one unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SingleNodeClearing {
    pub demand: f64,
    /// Wholesale price.
    pub price: f64,
    pub generation: f64,
    /// Capacity multiplier of the unit.
    pub capacity_rent: f64,
}

/// Clear `p(d) = P0 − (P0/Q0)·d` against a unit with cost `a·g + ½A·g²` and
/// capacity `G`, with a purchase charge `τb` between wholesale and retail.
/// When nothing trades the price reported is the unit's marginal cost at 0.
pub fn closed_form_single_node(
    p0: f64,
    q0: f64,
    a: f64,
    big_a: f64,
    capacity: f64,
    tau_buy: f64,
) -> SingleNodeClearing {
    let slope = p0 / q0;
    if p0 <= a + tau_buy {
        return SingleNodeClearing {
            demand: 0.0,
            price: a,
            generation: 0.0,
            capacity_rent: 0.0,
        };
    }
    let interior = (p0 - a - tau_buy) / (slope + big_a);
    if interior <= capacity {
        return SingleNodeClearing {
            demand: interior,
            price: a + big_a * interior,
            generation: interior,
            capacity_rent: 0.0,
        };
    }
    let price = p0 - slope * capacity - tau_buy;
    SingleNodeClearing {
        demand: capacity,
        price,
        generation: capacity,
        capacity_rent: price - (a + big_a * capacity),
    }
}

/// Worst midpoint-convexity violation over collinear sample triples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexityReport {
    /// Largest `V(mid) − interpolation`; non-positive for convex samples.
    pub worst_violation: f64,
    /// Sample indices (end, middle, end) attaining it.
    pub worst_triple: (usize, usize, usize),
    pub triples_checked: usize,
}

/// Check every triple of samples where one point lies strictly between the
/// other two on a line.
pub fn convexity_probe(samples: &[((f64, f64), f64)]) -> Result<ConvexityReport, OracleError> {
    let span = samples
        .iter()
        .flat_map(|((a, b), _)| [a.abs(), b.abs()])
        .fold(1.0, f64::max);
    let mut report: Option<ConvexityReport> = None;
    let mut checked = 0;
    for (i, &((ax, ay), va)) in samples.iter().enumerate() {
        for (k, &((cx, cy), vc)) in samples.iter().enumerate().skip(i + 1) {
            let (dx, dy) = (cx - ax, cy - ay);
            let len2 = dx * dx + dy * dy;
            if len2 == 0.0 {
                continue;
            }
            for (j, &((bx, by), vb)) in samples.iter().enumerate() {
                if j == i || j == k {
                    continue;
                }
                let (ex, ey) = (bx - ax, by - ay);
                let cross = dx * ey - dy * ex;
                if cross.abs() > 1e-9 * span * span {
                    continue;
                }
                let t = (dx * ex + dy * ey) / len2;
                if !(t > 1e-12 && t < 1.0 - 1e-12) {
                    continue;
                }
                checked += 1;
                let violation = vb - ((1.0 - t) * va + t * vc);
                if report.as_ref().is_none_or(|r| violation > r.worst_violation) {
                    report = Some(ConvexityReport {
                        worst_violation: violation,
                        worst_triple: (i, j, k),
                        triples_checked: 0,
                    });
                }
            }
        }
    }
    let mut report = report.ok_or(OracleError::NoCollinearTriple)?;
    report.triples_checked = checked;
    Ok(report)
}

/// Shape of random instances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomInstanceSpec {
    pub max_nodes: usize,
    pub max_units: usize,
    /// Chance that a node hosts prosumers.
    pub prosumer_probability: f64,
}

impl Default for RandomInstanceSpec {
    fn default() -> Self {
        Self {
            max_nodes: 3,
            max_units: 4,
            prosumer_probability: 0.5,
        }
    }
}

/// Draw a valid instance. Every instance is feasible: prosumers can consume
/// their own output with everything else at zero.
pub fn random_instance<R: Rng>(rng: &mut R, spec: &RandomInstanceSpec) -> MarketInstance {
    let n = rng.random_range(1..=spec.max_nodes.max(1));
    let mut nodes = Vec::with_capacity(n);
    let mut consumers = Vec::new();
    let mut prosumers = Vec::new();
    for i in 0..n {
        let alpha = if rng.random_bool(spec.prosumer_probability) {
            rng.random_range(0.1..0.6)
        } else {
            0.0
        };
        nodes.push(Node::new(
            i,
            rng.random_range(60.0..200.0),
            rng.random_range(200.0..1000.0),
            alpha,
        ));
        consumers.push(ConsumerGroup {
            node: i,
            households: rng.random_range(500.0..5000.0_f64).round(),
            income: rng.random_range(50.0..300.0),
        });
        if alpha > 0.0 {
            prosumers.push(ProsumerGroup {
                node: i,
                households: rng.random_range(100.0..1000.0_f64).round(),
                income: rng.random_range(100.0..400.0),
                renewable_output: rng.random_range(0.0..150.0),
                backup_capacity: if rng.random_bool(0.8) {
                    rng.random_range(1.0..50.0)
                } else {
                    0.0
                },
                backup_cost_linear: rng.random_range(5.0..40.0),
                backup_cost_quadratic: rng.random_range(0.05..0.5),
                sunk_cost: rng.random_range(0.0..5.0),
            });
        }
    }
    let unit_count = rng.random_range(1..=spec.max_units.max(1));
    let mut per_node = vec![0usize; n];
    let units = (0..unit_count)
        .map(|_| {
            let node = rng.random_range(0..n);
            let id = per_node[node];
            per_node[node] += 1;
            GenUnit::new(
                node,
                id,
                rng.random_range(5.0..50.0),
                rng.random_range(0.01..0.2),
                rng.random_range(50.0..600.0),
            )
        })
        .collect();
    let lines = match n {
        1 => 0,
        2 => 1,
        _ => 3,
    };
    let network = Network {
        lines,
        ptdf: (0..lines * n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        limits: (0..lines).map(|_| rng.random_range(20.0..300.0)).collect(),
    };
    let fixed_cost_target: f64 = rng.random_range(1000.0..50000.0);
    MarketInstance {
        nodes,
        consumers,
        prosumers,
        units,
        network,
        fixed_cost_target,
        equity_weight: DEFAULT_EQUITY_WEIGHT_FACTOR * fixed_cost_target,
    }
}

/// A random admissible (τb, τs) pair for `instance`.
pub fn random_charges<R: Rng>(rng: &mut R, instance: &MarketInstance) -> VolumetricCharges {
    let mut tau = VolumetricCharges::zero(instance);
    let top = 0.5 * tau.bounds.tau_buy_max;
    tau.tau_buy = rng.random_range(0.0..top);
    tau.tau_sell = rng.random_range(-top..=tau.tau_buy);
    tau
}

/// Differences between two market solutions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolutionGap {
    pub objective: f64,
    /// Largest difference over demands, prosumer consumption, net sales,
    /// backup and unit outputs, and injections.
    pub primal: f64,
}

impl SolutionGap {
    pub fn within(&self, objective_tolerance: f64, primal_tolerance: f64) -> bool {
        self.objective <= objective_tolerance && self.primal <= primal_tolerance
    }
}

/// Compare the uniquely determined parts of two solutions. A shape mismatch
/// counts as an infinite gap.
pub fn compare_solutions(a: &EquilibriumSolution, b: &EquilibriumSolution) -> SolutionGap {
    let net = |s: &EquilibriumSolution| -> Vec<f64> {
        s.z_sell.iter().zip(&s.z_buy).map(|(zs, zb)| zs - zb).collect()
    };
    let pairs = [
        (a.d.clone(), b.d.clone()),
        (a.l.clone(), b.l.clone()),
        (net(a), net(b)),
        (a.g_backup.clone(), b.g_backup.clone()),
        (a.g_units.clone(), b.g_units.clone()),
        (a.y.clone(), b.y.clone()),
    ];
    let mut primal: f64 = 0.0;
    for (u, v) in &pairs {
        if u.len() != v.len() {
            primal = f64::INFINITY;
            continue;
        }
        for (x, y) in u.iter().zip(v) {
            primal = primal.max((x - y).abs());
        }
    }
    let objective = (a.objective - b.objective).abs();
    SolutionGap {
        objective: if objective.is_nan() { f64::INFINITY } else { objective },
        primal: if primal.is_nan() { f64::INFINITY } else { primal },
    }
}
