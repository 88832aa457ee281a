//! Lower-level market: the welfare-maximization program, its solution with
//! nodal prices, KKT verification and surplus accounting.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{generation_cost, gross_benefit, marginal_generation_cost, MarketInstance};
use crate::qp::{solve_qp, QpError, QpSolution, QuadraticProgram};

pub use crate::qp::SolverSettings;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EquilibriumError {
    #[error("volumetric charges (τb={tau_buy}, τs={tau_sell}) lie outside the admissible box: {reason}")]
    OutOfBox {
        tau_buy: f64,
        tau_sell: f64,
        reason: String,
    },
    #[error("invalid instance:\n{0}")]
    InvalidInstance(crate::model::ValidationReport),
    #[error("solution does not match the instance: {0}")]
    Shape(String),
    #[error(transparent)]
    Solver(#[from] QpError),
}

/// Bounds of the admissible volumetric-charge set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TariffBox {
    /// Upper bound on τb.
    pub tau_buy_max: f64,
    /// Lower bound on τs.
    pub tau_sell_min: f64,
}

impl TariffBox {
    /// `τb ≤ max P0` and `τs ≥ −max P0`.
    pub fn for_instance(instance: &MarketInstance) -> Self {
        let top = instance.max_willingness_to_pay();
        Self {
            tau_buy_max: top,
            tau_sell_min: -top,
        }
    }

    pub fn contains(&self, tau_buy: f64, tau_sell: f64) -> Result<(), String> {
        if !(tau_buy.is_finite() && tau_sell.is_finite()) {
            return Err("charges must be finite".into());
        }
        if tau_buy < 0.0 {
            return Err("τb must be >= 0".into());
        }
        if tau_buy > self.tau_buy_max {
            return Err(format!("τb exceeds its bound {}", self.tau_buy_max));
        }
        if tau_sell < self.tau_sell_min {
            return Err(format!("τs is below its bound {}", self.tau_sell_min));
        }
        if tau_sell > tau_buy {
            return Err("τs > τb allows arbitrage".into());
        }
        Ok(())
    }

    /// The four vertices of the admissible triangle-with-corner region,
    /// (0,0), (τ̂b, τ̂b), (τ̂b, τ̲s), (0, τ̲s).
    pub fn extreme_points(&self) -> [(f64, f64); 4] {
        [
            (0.0, 0.0),
            (self.tau_buy_max, self.tau_buy_max),
            (self.tau_buy_max, self.tau_sell_min),
            (0.0, self.tau_sell_min),
        ]
    }

    /// Grid over the admissible set with `n` values of τb and `n` values of τs
    /// per τb, each τs row spanning `[τ̲s, τb]`. Contains (0, 0) and the
    /// extreme points.
    pub fn grid(&self, n: usize) -> Vec<(f64, f64)> {
        assert!(n >= 2, "grid needs at least two points per axis");
        let step = |lo: f64, hi: f64, k: usize| lo + (hi - lo) * k as f64 / (n - 1) as f64;
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            let tb = step(0.0, self.tau_buy_max, i);
            for j in 0..n {
                let ts = if j == n - 1 {
                    tb
                } else {
                    step(self.tau_sell_min, tb, j)
                };
                out.push((tb, ts));
            }
        }
        out
    }
}

/// Uniform volumetric charges on retail purchases and sales.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumetricCharges {
    pub tau_buy: f64,
    pub tau_sell: f64,
    pub bounds: TariffBox,
}

impl VolumetricCharges {
    pub fn new(tau_buy: f64, tau_sell: f64, bounds: TariffBox) -> Result<Self, EquilibriumError> {
        let tau = Self {
            tau_buy,
            tau_sell,
            bounds,
        };
        tau.check()?;
        Ok(tau)
    }

    pub fn zero(instance: &MarketInstance) -> Self {
        Self {
            tau_buy: 0.0,
            tau_sell: 0.0,
            bounds: TariffBox::for_instance(instance),
        }
    }

    pub fn check(&self) -> Result<(), EquilibriumError> {
        self.bounds
            .contains(self.tau_buy, self.tau_sell)
            .map_err(|reason| EquilibriumError::OutOfBox {
                tau_buy: self.tau_buy,
                tau_sell: self.tau_sell,
                reason,
            })
    }
}

/// Where each market quantity lives in the program.
#[derive(Debug, Clone, PartialEq)]
pub struct WelfareLayout {
    pub demand: Vec<Option<usize>>,
    pub consumption: Vec<Option<usize>>,
    pub sell: Vec<Option<usize>>,
    pub buy: Vec<Option<usize>>,
    pub backup: Vec<Option<usize>>,
    pub units: Vec<usize>,
    pub hub: Vec<usize>,
    pub prosumer_balance: Vec<Option<usize>>,
    pub system_balance: usize,
    pub nodal_balance: Vec<usize>,
    pub line_upper: Vec<usize>,
    pub line_lower: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WelfareProgram {
    pub qp: QuadraticProgram,
    pub layout: WelfareLayout,
}

/// Build the welfare program for the given charges. Groups whose share of
/// demand is zero get no variables.
pub fn assemble_welfare_program(
    instance: &MarketInstance,
    tau: &VolumetricCharges,
) -> Result<WelfareProgram, EquilibriumError> {
    tau.check()?;
    let n = instance.node_count();
    let mut names = Vec::new();
    let mut push = |name: String| {
        names.push(name);
        names.len() - 1
    };
    let demand: Vec<Option<usize>> = instance
        .nodes
        .iter()
        .map(|nd| nd.has_consumers().then(|| push(format!("d[{}]", nd.id))))
        .collect();
    let mut pro_var = |prefix: &str| -> Vec<Option<usize>> {
        instance
            .nodes
            .iter()
            .map(|nd| nd.has_prosumers().then(|| push(format!("{prefix}[{}]", nd.id))))
            .collect()
    };
    let consumption = pro_var("l");
    let sell = pro_var("zs");
    let buy = pro_var("zb");
    let backup = pro_var("g");
    let units: Vec<usize> = instance
        .units
        .iter()
        .map(|u| push(format!("g[{},{}]", u.node, u.id)))
        .collect();
    let hub: Vec<usize> = (0..n).map(|i| push(format!("y[{i}]"))).collect();

    let mut qp = QuadraticProgram::new(names);
    for (i, node) in instance.nodes.iter().enumerate() {
        let p0 = node.demand_vertical_intercept;
        if let Some(v) = demand[i] {
            qp.quadratic[(v, v)] = -node.consumer_slope().expect("consumers present");
            qp.linear[v] = p0 - tau.tau_buy;
            qp.lower[v] = 0.0;
        }
        if let (Some(l), Some(zs), Some(zb), Some(g)) = (consumption[i], sell[i], buy[i], backup[i]) {
            let pro = instance
                .prosumer_at(i)
                .expect("validated instance has a prosumer group");
            qp.quadratic[(l, l)] = -node.prosumer_slope().expect("prosumers present");
            qp.linear[l] = p0;
            qp.linear[zs] = tau.tau_sell;
            qp.linear[zb] = -tau.tau_buy;
            qp.quadratic[(g, g)] = -pro.backup_cost_quadratic;
            qp.linear[g] = -pro.backup_cost_linear;
            for v in [l, zs, zb, g] {
                qp.lower[v] = 0.0;
            }
            qp.upper[g] = pro.backup_capacity;
        }
    }
    for (u, unit) in instance.units.iter().enumerate() {
        let v = units[u];
        qp.quadratic[(v, v)] = -unit.cost_quadratic;
        qp.linear[v] = -unit.cost_linear;
        qp.lower[v] = 0.0;
        qp.upper[v] = unit.capacity;
    }

    let prosumer_balance = (0..n)
        .map(|i| match (consumption[i], sell[i], buy[i], backup[i]) {
            (Some(l), Some(zs), Some(zb), Some(g)) => {
                let r = instance.prosumer_at(i).map_or(0.0, |p| p.renewable_output);
                Some(qp.add_equality(&[(l, 1.0), (zs, 1.0), (zb, -1.0), (g, -1.0)], r))
            }
            _ => None,
        })
        .collect();
    let all_hub: Vec<(usize, f64)> = hub.iter().map(|&v| (v, 1.0)).collect();
    let system_balance = qp.add_equality(&all_hub, 0.0);
    let nodal_balance = (0..n)
        .map(|i| {
            let mut terms = vec![(hub[i], 1.0)];
            for (u, unit) in instance.units.iter().enumerate() {
                if unit.node == i {
                    terms.push((units[u], -1.0));
                }
            }
            if let (Some(zs), Some(zb)) = (sell[i], buy[i]) {
                terms.push((zs, -1.0));
                terms.push((zb, 1.0));
            }
            if let Some(d) = demand[i] {
                terms.push((d, 1.0));
            }
            qp.add_equality(&terms, 0.0)
        })
        .collect();
    let net = &instance.network;
    let mut line_upper = Vec::with_capacity(net.lines);
    let mut line_lower = Vec::with_capacity(net.lines);
    for k in 0..net.lines {
        let row: Vec<(usize, f64)> = (0..n).map(|i| (hub[i], net.factor(k, i, n))).collect();
        let neg: Vec<(usize, f64)> = row.iter().map(|&(v, c)| (v, -c)).collect();
        line_upper.push(qp.add_inequality(&row, net.limits[k]));
        line_lower.push(qp.add_inequality(&neg, net.limits[k]));
    }
    Ok(WelfareProgram {
        qp,
        layout: WelfareLayout {
            demand,
            consumption,
            sell,
            buy,
            backup,
            units,
            hub,
            prosumer_balance,
            system_balance,
            nodal_balance,
            line_upper,
            line_lower,
        },
    })
}

/// Solver-side facts about a solution that do not affect its values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub iterations: usize,
    pub polished: bool,
    /// Equalities plus inequalities and bounds judged tight.
    pub active_constraints: usize,
    /// Rank of the gradients of the active constraints.
    pub active_rank: usize,
    /// Active gradients are linearly dependent, so the multipliers (and the
    /// nodal prices among them) need not be unique.
    pub degenerate_prices: bool,
}

/// Primal quantities per node or unit and all multipliers. Entries for
/// omitted groups are zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumSolution {
    pub d: Vec<f64>,
    pub l: Vec<f64>,
    pub z_sell: Vec<f64>,
    pub z_buy: Vec<f64>,
    pub g_backup: Vec<f64>,
    pub g_units: Vec<f64>,
    pub y: Vec<f64>,
    pub p: Vec<f64>,
    pub delta: Vec<f64>,
    pub kappa: Vec<f64>,
    pub rho: Vec<f64>,
    pub theta: f64,
    pub lambda_plus: Vec<f64>,
    pub lambda_minus: Vec<f64>,
    pub objective: f64,
    #[serde(default)]
    pub diagnostics: Diagnostics,
}

impl EquilibriumSolution {
    /// Net sale to the grid per node, `z_sell − z_buy`.
    pub fn net_sale(&self, node: usize) -> f64 {
        self.z_sell[node] - self.z_buy[node]
    }

    pub fn total_unit_output(&self) -> f64 {
        self.g_units.iter().sum()
    }

    fn check_shape(&self, instance: &MarketInstance) -> Result<(), EquilibriumError> {
        let n = instance.node_count();
        let per_node = [
            ("d", &self.d),
            ("l", &self.l),
            ("z_sell", &self.z_sell),
            ("z_buy", &self.z_buy),
            ("g_backup", &self.g_backup),
            ("y", &self.y),
            ("p", &self.p),
            ("delta", &self.delta),
            ("kappa", &self.kappa),
        ];
        for (name, v) in per_node {
            if v.len() != n {
                return Err(EquilibriumError::Shape(format!(
                    "{name} has {} entries, expected {n}",
                    v.len()
                )));
            }
        }
        if self.g_units.len() != instance.units.len() || self.rho.len() != instance.units.len() {
            return Err(EquilibriumError::Shape("unit vectors have the wrong length".into()));
        }
        let k = instance.network.lines;
        if self.lambda_plus.len() != k || self.lambda_minus.len() != k {
            return Err(EquilibriumError::Shape("line duals have the wrong length".into()));
        }
        Ok(())
    }
}

/// Solve the market at the given charges.
pub fn solve_equilibrium(
    instance: &MarketInstance,
    tau: &VolumetricCharges,
    settings: &SolverSettings,
) -> Result<EquilibriumSolution, EquilibriumError> {
    let report = instance.validate();
    if !report.is_valid() {
        return Err(EquilibriumError::InvalidInstance(report));
    }
    let program = assemble_welfare_program(instance, tau)?;
    let sol = solve_qp(&program.qp, settings)?;
    let mut out = extract_solution(instance, &program, &sol);
    out.diagnostics = diagnose(&program.qp, &sol);
    Ok(out)
}

/// Map a program solution back to market quantities and prices.
pub fn extract_solution(
    instance: &MarketInstance,
    program: &WelfareProgram,
    sol: &QpSolution,
) -> EquilibriumSolution {
    let lay = &program.layout;
    let n = instance.node_count();
    let pick = |idx: &[Option<usize>]| -> Vec<f64> {
        idx.iter().map(|v| v.map_or(0.0, |j| sol.x[j])).collect()
    };
    let kappa = lay
        .backup
        .iter()
        .map(|v| v.map_or(0.0, |j| sol.upper_duals[j]))
        .collect();
    EquilibriumSolution {
        d: pick(&lay.demand),
        l: pick(&lay.consumption),
        z_sell: pick(&lay.sell),
        z_buy: pick(&lay.buy),
        g_backup: pick(&lay.backup),
        g_units: lay.units.iter().map(|&j| sol.x[j]).collect(),
        y: lay.hub.iter().map(|&j| sol.x[j]).collect(),
        p: (0..n).map(|i| sol.eq_duals[lay.nodal_balance[i]]).collect(),
        delta: lay
            .prosumer_balance
            .iter()
            .map(|r| r.map_or(0.0, |r| sol.eq_duals[r]))
            .collect(),
        kappa,
        rho: lay.units.iter().map(|&j| sol.upper_duals[j]).collect(),
        theta: sol.eq_duals[lay.system_balance],
        lambda_plus: lay.line_upper.iter().map(|&r| sol.ineq_duals[r]).collect(),
        lambda_minus: lay.line_lower.iter().map(|&r| sol.ineq_duals[r]).collect(),
        objective: sol.objective,
        diagnostics: Diagnostics::default(),
    }
}

/// Rank of the active constraint gradients at a program solution.
fn diagnose(qp: &QuadraticProgram, sol: &QpSolution) -> Diagnostics {
    let n = qp.num_vars();
    let mut rows: Vec<Vec<f64>> = (0..qp.num_equalities())
        .map(|r| qp.eq_matrix.row(r).iter().copied().collect())
        .collect();
    let tight = |slack: f64, rhs: f64| slack <= 1e-7 * (1.0 + rhs.abs());
    for r in 0..qp.num_inequalities() {
        let lhs = qp.ineq_matrix.row(r).dot(&sol.x.transpose());
        if tight(qp.ineq_rhs[r] - lhs, qp.ineq_rhs[r]) {
            rows.push(qp.ineq_matrix.row(r).iter().copied().collect());
        }
    }
    for j in 0..n {
        let unit = |j: usize| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        };
        let (lo, up) = (qp.lower[j], qp.upper[j]);
        if lo.is_finite() && tight(sol.x[j] - lo, lo) {
            rows.push(unit(j));
        }
        if up.is_finite() && lo != up && tight(up - sol.x[j], up) {
            rows.push(unit(j));
        }
    }
    let active = rows.len();
    let rank = if active == 0 {
        0
    } else {
        let m = DMatrix::from_fn(active, n, |r, c| rows[r][c]);
        m.rank(1e-9 * m.amax().max(1.0))
    };
    Diagnostics {
        iterations: sol.iterations,
        polished: sol.polished,
        active_constraints: active,
        active_rank: rank,
        degenerate_prices: rank < active,
    }
}

/// Residuals of one participant's KKT system.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BlockResiduals {
    pub primal: f64,
    pub dual_sign: f64,
    pub stationarity: f64,
    pub complementarity: f64,
}

impl BlockResiduals {
    pub fn max(&self) -> f64 {
        self.primal
            .max(self.dual_sign)
            .max(self.stationarity)
            .max(self.complementarity)
    }

    /// Record `0 ≤ x ⊥ grad ≤ 0` for a nonnegative variable.
    fn nonneg(&mut self, x: f64, grad: f64) {
        self.primal = self.primal.max(-x);
        self.stationarity = self.stationarity.max(x.min(-grad).abs());
        self.complementarity = self.complementarity.max((x * grad).abs());
    }

    /// Record `0 ≤ mult ⊥ slack ≥ 0`.
    fn capacity(&mut self, mult: f64, slack: f64) {
        self.primal = self.primal.max(-slack);
        self.dual_sign = self.dual_sign.max(-mult);
        self.complementarity = self.complementarity.max((mult * slack).abs());
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    pub consumer: BlockResiduals,
    pub prosumer: BlockResiduals,
    pub iso: BlockResiduals,
}

impl KktReport {
    pub fn max(&self) -> f64 {
        self.consumer.max().max(self.prosumer.max()).max(self.iso.max())
    }
}

/// Check the consumer, prosumer and system-operator KKT systems at `sol`.
pub fn kkt_residuals(
    instance: &MarketInstance,
    tau: &VolumetricCharges,
    sol: &EquilibriumSolution,
) -> Result<KktReport, EquilibriumError> {
    sol.check_shape(instance)?;
    let n = instance.node_count();
    let mut rep = KktReport::default();
    for (i, node) in instance.nodes.iter().enumerate() {
        let p0 = node.demand_vertical_intercept;
        if let Ok(slope) = node.consumer_slope() {
            let grad = p0 - slope * sol.d[i] - tau.tau_buy - sol.p[i];
            rep.consumer.nonneg(sol.d[i], grad);
        }
        if let (Ok(slope), Some(pro)) = (node.prosumer_slope(), instance.prosumer_at(i)) {
            let b = &mut rep.prosumer;
            let delta = sol.delta[i];
            b.nonneg(sol.l[i], p0 - slope * sol.l[i] - delta);
            b.nonneg(sol.z_sell[i], sol.p[i] + tau.tau_sell - delta);
            b.nonneg(sol.z_buy[i], -(sol.p[i] + tau.tau_buy) + delta);
            b.nonneg(
                sol.g_backup[i],
                -pro.backup_marginal_cost(sol.g_backup[i]) + delta - sol.kappa[i],
            );
            b.capacity(sol.kappa[i], pro.backup_capacity - sol.g_backup[i]);
            let balance =
                sol.l[i] + sol.z_sell[i] - sol.z_buy[i] - sol.g_backup[i] - pro.renewable_output;
            b.primal = b.primal.max(balance.abs());
        }
    }

    let iso = &mut rep.iso;
    for (u, unit) in instance.units.iter().enumerate() {
        let g = sol.g_units[u];
        let grad = -marginal_generation_cost(unit, g) - sol.rho[u] + sol.p[unit.node];
        iso.nonneg(g, grad);
        iso.capacity(sol.rho[u], unit.capacity - g);
    }
    let net = &instance.network;
    for i in 0..n {
        let mut grad = -sol.theta - sol.p[i];
        for k in 0..net.lines {
            grad += net.factor(k, i, n) * (sol.lambda_minus[k] - sol.lambda_plus[k]);
        }
        iso.stationarity = iso.stationarity.max(grad.abs());
        let generation: f64 = instance
            .units
            .iter()
            .zip(&sol.g_units)
            .filter(|(u, _)| u.node == i)
            .map(|(_, g)| g)
            .sum();
        let balance = sol.y[i] - generation - sol.z_sell[i] + sol.z_buy[i] + sol.d[i];
        iso.primal = iso.primal.max(balance.abs());
    }
    iso.primal = iso.primal.max(sol.y.iter().sum::<f64>().abs());
    for k in 0..net.lines {
        let flow = net.flow(k, &sol.y);
        iso.capacity(sol.lambda_plus[k], net.limits[k] - flow);
        iso.capacity(sol.lambda_minus[k], net.limits[k] + flow);
    }
    Ok(rep)
}

/// Net out simultaneous sales and purchases: at most one side stays positive.
pub fn canonicalize_net_position(z_sell: f64, z_buy: f64) -> (f64, f64) {
    ((z_sell - z_buy).max(0.0), (z_buy - z_sell).max(0.0))
}

/// Copy of `sol` with every node's sales and purchases netted.
pub fn canonical(sol: &EquilibriumSolution) -> EquilibriumSolution {
    let mut out = sol.clone();
    for i in 0..sol.z_sell.len() {
        let (s, b) = canonicalize_net_position(sol.z_sell[i], sol.z_buy[i]);
        out.z_sell[i] = s;
        out.z_buy[i] = b;
    }
    out
}

/// Who gains what at an equilibrium, before fixed charges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurplusReport {
    /// Per node: benefit of consumption minus retail payments.
    pub consumer: Vec<f64>,
    /// Per node: sales income minus purchases plus benefit minus backup cost.
    pub prosumer: Vec<f64>,
    /// Per node: wholesale revenue minus generation cost over local units.
    pub producer: Vec<f64>,
    /// Congestion rent collected by the system operator, `−Σ p·y`.
    pub iso_revenue: f64,
    /// Volumetric charges collected by the utility.
    pub volumetric_revenue: f64,
    /// Welfare program value.
    pub welfare: f64,
    /// Welfare including volumetric revenue.
    pub gross_welfare: f64,
    /// Sum of participant surpluses minus the welfare value.
    pub identity_residual: f64,
}

impl SurplusReport {
    pub fn total_consumer(&self) -> f64 {
        self.consumer.iter().sum()
    }
    pub fn total_prosumer(&self) -> f64 {
        self.prosumer.iter().sum()
    }
    pub fn total_producer(&self) -> f64 {
        self.producer.iter().sum()
    }
}

/// Volumetric revenue `Σ τb·(d + zb) − τs·zs` using the netted trades.
pub fn volumetric_revenue(tau: &VolumetricCharges, sol: &EquilibriumSolution) -> f64 {
    let mut total = 0.0;
    for i in 0..sol.d.len() {
        let (zs, zb) = canonicalize_net_position(sol.z_sell[i], sol.z_buy[i]);
        total += tau.tau_buy * (sol.d[i] + zb) - tau.tau_sell * zs;
    }
    total
}

pub fn surplus_decomposition(
    instance: &MarketInstance,
    tau: &VolumetricCharges,
    sol: &EquilibriumSolution,
) -> Result<SurplusReport, EquilibriumError> {
    sol.check_shape(instance)?;
    let n = instance.node_count();
    let mut consumer = vec![0.0; n];
    let mut prosumer = vec![0.0; n];
    let mut producer = vec![0.0; n];
    let mut welfare = 0.0;
    for (i, node) in instance.nodes.iter().enumerate() {
        let p0 = node.demand_vertical_intercept;
        let retail_buy = sol.p[i] + tau.tau_buy;
        if let Ok(slope) = node.consumer_slope() {
            let benefit = gross_benefit(p0, slope, sol.d[i]);
            consumer[i] = benefit - retail_buy * sol.d[i];
            welfare += benefit - tau.tau_buy * sol.d[i];
        }
        if let (Ok(slope), Some(pro)) = (node.prosumer_slope(), instance.prosumer_at(i)) {
            let (zs, zb) = canonicalize_net_position(sol.z_sell[i], sol.z_buy[i]);
            let own = gross_benefit(p0, slope, sol.l[i]) - pro.backup_cost(sol.g_backup[i]);
            prosumer[i] = (sol.p[i] + tau.tau_sell) * zs - retail_buy * zb + own;
            welfare += tau.tau_sell * zs - tau.tau_buy * zb + own;
        }
    }
    for (u, unit) in instance.units.iter().enumerate() {
        let g = sol.g_units[u];
        let cost = generation_cost(unit, g);
        producer[unit.node] += sol.p[unit.node] * g - cost;
        welfare -= cost;
    }
    let iso_revenue = -sol.p.iter().zip(&sol.y).map(|(p, y)| p * y).sum::<f64>();
    let volumetric_revenue = volumetric_revenue(tau, sol);
    let parts: f64 = consumer.iter().chain(&prosumer).chain(&producer).sum::<f64>() + iso_revenue;
    Ok(SurplusReport {
        identity_residual: parts - welfare,
        consumer,
        prosumer,
        producer,
        iso_revenue,
        volumetric_revenue,
        gross_welfare: welfare + volumetric_revenue,
        welfare,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::{single_node, three_node_mixed};
    use approx::assert_relative_eq;

    fn zero(inst: &MarketInstance) -> VolumetricCharges {
        VolumetricCharges::zero(inst)
    }

    fn solve(inst: &MarketInstance, tb: f64, ts: f64) -> EquilibriumSolution {
        let tau = VolumetricCharges::new(tb, ts, TariffBox::for_instance(inst)).unwrap();
        solve_equilibrium(inst, &tau, &SolverSettings::default()).unwrap()
    }

    #[test]
    fn single_node_layout_counts() {
        let inst = single_node(1000.0);
        let prog = assemble_welfare_program(&inst, &zero(&inst)).unwrap();
        assert_eq!(prog.qp.num_vars(), 3);
        assert_eq!(prog.qp.num_equalities(), 2);
    }

    #[test]
    fn mixed_layout_counts() {
        let inst = three_node_mixed();
        let prog = assemble_welfare_program(&inst, &zero(&inst)).unwrap();
        let n = inst.node_count();
        assert_eq!(prog.qp.num_vars(), 5 * n + inst.units.len() + n);
    }

    #[test]
    fn zero_fraction_node_has_no_prosumer_variables() {
        let mut inst = three_node_mixed();
        inst.nodes[1].prosumer_fraction = 0.0;
        inst.prosumers.retain(|p| p.node != 1);
        let prog = assemble_welfare_program(&inst, &zero(&inst)).unwrap();
        let lay = &prog.layout;
        assert!(lay.consumption[1].is_none() && lay.sell[1].is_none());
        assert!(lay.buy[1].is_none() && lay.backup[1].is_none());
        assert!(lay.prosumer_balance[1].is_none());
        assert_eq!(prog.qp.num_vars(), 5 * 3 - 4 + inst.units.len() + 3);
    }

    #[test]
    fn charges_outside_box_rejected() {
        let inst = single_node(1000.0);
        let bounds = TariffBox::for_instance(&inst);
        assert!(VolumetricCharges::new(-1.0, -2.0, bounds).is_err());
        assert!(VolumetricCharges::new(5.0, 6.0, bounds).is_err());
        assert!(VolumetricCharges::new(101.0, 0.0, bounds).is_err());
        assert!(VolumetricCharges::new(5.0, -101.0, bounds).is_err());
        let bad = VolumetricCharges {
            tau_buy: 1.0,
            tau_sell: 2.0,
            bounds,
        };
        assert!(matches!(
            assemble_welfare_program(&inst, &bad),
            Err(EquilibriumError::OutOfBox { .. })
        ));
    }

    #[test]
    fn single_node_clearing() {
        let sol = solve(&single_node(1000.0), 0.0, 0.0);
        assert_relative_eq!(sol.d[0], 600.0, epsilon = 1e-7);
        assert_relative_eq!(sol.p[0], 40.0, epsilon = 1e-8);
        assert!(sol.rho[0].abs() < 1e-9);
    }

    #[test]
    fn single_node_with_purchase_charge() {
        let sol = solve(&single_node(1000.0), 15.0, 0.0);
        assert_relative_eq!(sol.d[0], 500.0, epsilon = 1e-7);
        assert_relative_eq!(sol.p[0], 35.0, epsilon = 1e-8);
    }

    #[test]
    fn single_node_capacity_binding() {
        let sol = solve(&single_node(100.0), 0.0, 0.0);
        assert_relative_eq!(sol.g_units[0], 100.0, epsilon = 1e-8);
        assert_relative_eq!(sol.p[0], 90.0, epsilon = 1e-8);
        assert_relative_eq!(sol.rho[0], 75.0, epsilon = 1e-8);
    }

    #[test]
    fn exact_solution_has_zero_residuals() {
        let inst = single_node(1000.0);
        let tau = zero(&inst);
        let mut sol = solve(&inst, 0.0, 0.0);
        sol.d[0] = 600.0;
        sol.g_units[0] = 600.0;
        sol.y[0] = 0.0;
        sol.p[0] = 40.0;
        sol.theta = -40.0;
        sol.rho[0] = 0.0;
        let rep = kkt_residuals(&inst, &tau, &sol).unwrap();
        assert!(rep.max() < 1e-12, "{rep:?}");
    }

    #[test]
    fn demand_perturbation_shows_in_consumer_stationarity() {
        let inst = single_node(1000.0);
        let tau = zero(&inst);
        let mut sol = solve(&inst, 0.0, 0.0);
        sol.d[0] += 1.0;
        let rep = kkt_residuals(&inst, &tau, &sol).unwrap();
        assert_relative_eq!(rep.consumer.stationarity, 0.1, epsilon = 1e-8);
    }

    #[test]
    fn mixed_instance_satisfies_kkt() {
        let inst = three_node_mixed();
        for (tb, ts) in [(0.0, 0.0), (20.0, 5.0), (40.0, -30.0), (10.0, 10.0)] {
            let sol = solve(&inst, tb, ts);
            let tau = VolumetricCharges::new(tb, ts, TariffBox::for_instance(&inst)).unwrap();
            let rep = kkt_residuals(&inst, &tau, &sol).unwrap();
            assert!(rep.max() <= 1e-7, "τ=({tb},{ts}): {rep:?}");
            let s = surplus_decomposition(&inst, &tau, &sol).unwrap();
            assert!(s.identity_residual.abs() <= 1e-6, "{s:?}");
            assert_relative_eq!(s.welfare, sol.objective, epsilon = 1e-6, max_relative = 1e-9);
        }
    }

    #[test]
    fn congestion_rent_equals_line_duals_times_limits() {
        let inst = three_node_mixed();
        let sol = solve(&inst, 0.0, 0.0);
        let s = surplus_decomposition(&inst, &zero(&inst), &sol).unwrap();
        let rent: f64 = (0..inst.network.lines)
            .map(|k| (sol.lambda_plus[k] + sol.lambda_minus[k]) * inst.network.limits[k])
            .sum();
        assert_relative_eq!(s.iso_revenue, rent, epsilon = 1e-6);
    }

    #[test]
    fn canonical_net_positions() {
        assert_eq!(canonicalize_net_position(5.0, 3.0), (2.0, 0.0));
        assert_eq!(canonicalize_net_position(0.0, 0.0), (0.0, 0.0));
        assert_eq!(canonicalize_net_position(3.0, 7.0), (0.0, 4.0));
    }

    #[test]
    fn single_node_surplus_by_hand() {
        let inst = single_node(1000.0);
        let sol = solve(&inst, 0.0, 0.0);
        let s = surplus_decomposition(&inst, &zero(&inst), &sol).unwrap();
        assert_relative_eq!(s.consumer[0], 0.5 * 0.1 * 600.0 * 600.0, epsilon = 1e-5);
        assert_relative_eq!(s.producer[0], 0.5 * 0.05 * 600.0 * 600.0, epsilon = 1e-5);
        assert!(s.iso_revenue.abs() < 1e-8);

        let inst = single_node(100.0);
        let sol = solve(&inst, 0.0, 0.0);
        let s = surplus_decomposition(&inst, &zero(&inst), &sol).unwrap();
        assert_relative_eq!(s.producer[0], 0.5 * 0.05 * 100.0 * 100.0 + 75.0 * 100.0, epsilon = 1e-5);
    }

    #[test]
    fn no_trade_when_demand_below_cost() {
        let mut inst = single_node(1000.0);
        inst.nodes[0].demand_vertical_intercept = 5.0;
        let sol = solve(&inst, 0.0, 0.0);
        let s = surplus_decomposition(&inst, &zero(&inst), &sol).unwrap();
        assert!(sol.d[0].abs() < 1e-8);
        for v in [s.consumer[0], s.producer[0], s.iso_revenue, s.welfare] {
            assert!(v.abs() < 1e-7, "{s:?}");
        }
    }

    #[test]
    fn no_simultaneous_trade_with_spread() {
        let inst = three_node_mixed();
        let sol = solve(&inst, 25.0, -5.0);
        for i in 0..3 {
            assert!(sol.z_sell[i] * sol.z_buy[i] <= 1e-8);
        }
    }

    #[test]
    fn solution_round_trips_through_json() {
        let inst = three_node_mixed();
        let tau = zero(&inst);
        let sol = solve(&inst, 0.0, 0.0);
        let text = serde_json::to_string(&sol).unwrap();
        let back: EquilibriumSolution = serde_json::from_str(&text).unwrap();
        assert_eq!(
            kkt_residuals(&inst, &tau, &sol).unwrap(),
            kkt_residuals(&inst, &tau, &back).unwrap()
        );
    }

    #[test]
    fn grid_contains_origin_and_vertices() {
        let b = TariffBox {
            tau_buy_max: 10.0,
            tau_sell_min: -10.0,
        };
        let grid = b.grid(11);
        assert_eq!(grid.len(), 121);
        for v in b.extreme_points() {
            assert!(grid.contains(&v), "{v:?}");
        }
        for &(tb, ts) in &grid {
            assert!(b.contains(tb, ts).is_ok());
        }
    }
}
