//! Retail tariff design: expenditure incidence, the equity gap, revenue
//! adequacy, fixed-charge allocation, and the search over volumetric charges.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::equilibrium::{
    canonicalize_net_position, solve_equilibrium, surplus_decomposition, volumetric_revenue,
    EquilibriumError, EquilibriumSolution, SolverSettings, SurplusReport, TariffBox,
    VolumetricCharges,
};
use crate::format::sig9;
use crate::model::MarketInstance;
use crate::qp::{solve_qp, QpError, QuadraticProgram};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TariffError {
    #[error("fixed-charge budget must be >= 0, got {0}")]
    NegativeBudget(f64),
    #[error("no fixed charge given for the {group} group at node {node}")]
    MissingCharge { group: GroupKind, node: usize },
    #[error("fraction must lie in [0, 1], got {0}")]
    InvalidFraction(f64),
    #[error(
        "fraction {fraction} needs volumetric revenue {required}, but at most {max_attainable} is attainable"
    )]
    FractionUnattainable {
        fraction: f64,
        required: f64,
        max_attainable: f64,
    },
    #[error("allocation failed: {0}")]
    Allocation(#[from] QpError),
    #[error(transparent)]
    Equilibrium(#[from] EquilibriumError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupKind {
    #[serde(rename = "con")]
    Consumer,
    #[serde(rename = "pro")]
    Prosumer,
}

impl GroupKind {
    pub fn tag(self) -> &'static str {
        match self {
            GroupKind::Consumer => "con",
            GroupKind::Prosumer => "pro",
        }
    }
}

impl std::fmt::Display for GroupKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GroupKind::Consumer => "consumer",
            GroupKind::Prosumer => "prosumer",
        })
    }
}

/// A household group: its kind and node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupKey {
    pub kind: GroupKind,
    pub node: usize,
}

/// Groups that pay fixed charges: present at their node with households.
/// Consumers by node first, then prosumers by node.
pub fn populated_groups(instance: &MarketInstance) -> Vec<GroupKey> {
    let mut out = Vec::new();
    for (i, node) in instance.nodes.iter().enumerate() {
        if node.has_consumers() && instance.consumer_at(i).is_some_and(|c| c.households > 0.0) {
            out.push(GroupKey {
                kind: GroupKind::Consumer,
                node: i,
            });
        }
    }
    for (i, node) in instance.nodes.iter().enumerate() {
        if node.has_prosumers() && instance.prosumer_at(i).is_some_and(|p| p.households > 0.0) {
            out.push(GroupKey {
                kind: GroupKind::Prosumer,
                node: i,
            });
        }
    }
    out
}

/// Per-household fixed charges by node; `None` for groups that do not pay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedCharges {
    pub phi_con: Vec<Option<f64>>,
    pub phi_pro: Vec<Option<f64>>,
}

impl FixedCharges {
    /// Zero for every populated group.
    pub fn zero(instance: &MarketInstance) -> Self {
        let mut out = Self {
            phi_con: vec![None; instance.node_count()],
            phi_pro: vec![None; instance.node_count()],
        };
        for key in populated_groups(instance) {
            out.set(key, 0.0);
        }
        out
    }

    pub fn get(&self, key: GroupKey) -> Option<f64> {
        match key.kind {
            GroupKind::Consumer => self.phi_con.get(key.node).copied().flatten(),
            GroupKind::Prosumer => self.phi_pro.get(key.node).copied().flatten(),
        }
    }

    pub fn set(&mut self, key: GroupKey, value: f64) {
        match key.kind {
            GroupKind::Consumer => self.phi_con[key.node] = Some(value),
            GroupKind::Prosumer => self.phi_pro[key.node] = Some(value),
        }
    }

    fn require(&self, key: GroupKey) -> Result<f64, TariffError> {
        self.get(key).ok_or(TariffError::MissingCharge {
            group: key.kind,
            node: key.node,
        })
    }
}

/// What one group spends apart from its fixed charge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupSpend {
    pub households: f64,
    /// Income per household.
    pub income: f64,
    /// Spend per household excluding the fixed charge.
    pub base_spend: f64,
}

impl GroupSpend {
    pub fn incidence(&self, phi: f64) -> f64 {
        (self.base_spend + phi) / self.income
    }
}

/// Per-household spend of every populated group at an equilibrium.
/// Prosumer purchases are netted against sales first; sales income is not
/// credited against spend.
pub fn group_spends(
    instance: &MarketInstance,
    tau: &VolumetricCharges,
    sol: &EquilibriumSolution,
) -> Vec<(GroupKey, GroupSpend)> {
    populated_groups(instance)
        .into_iter()
        .map(|key| {
            let i = key.node;
            let retail = sol.p[i] + tau.tau_buy;
            let spend = match key.kind {
                GroupKind::Consumer => {
                    let c = instance.consumer_at(i).expect("populated");
                    GroupSpend {
                        households: c.households,
                        income: c.income,
                        base_spend: retail * sol.d[i] / c.households,
                    }
                }
                GroupKind::Prosumer => {
                    let p = instance.prosumer_at(i).expect("populated");
                    let (_, zb) = canonicalize_net_position(sol.z_sell[i], sol.z_buy[i]);
                    GroupSpend {
                        households: p.households,
                        income: p.income,
                        base_spend: (retail * zb + p.backup_cost(sol.g_backup[i])) / p.households
                            + p.sunk_cost,
                    }
                }
            };
            (key, spend)
        })
        .collect()
}

/// Which incidence differences the equity gap penalizes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EquityMeasure {
    /// Squared deviation from the mean over every populated group.
    #[default]
    AllGroups,
    /// Squared consumer-minus-prosumer difference at each node hosting both.
    PerNode,
}

/// Squared deviation of `values` from their mean.
pub fn equity_gap_b(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.iter().map(|v| (v - mean).powi(2)).sum()
}

/// Consumer-minus-prosumer squared differences summed over nodes.
pub fn per_node_gap(report: &IncidenceReport) -> f64 {
    report
        .inc_con
        .iter()
        .zip(&report.inc_pro)
        .filter_map(|(c, p)| Some((c.as_ref()? - p.as_ref()?).powi(2)))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncidenceReport {
    pub inc_con: Vec<Option<f64>>,
    pub inc_pro: Vec<Option<f64>>,
    pub gap_b: f64,
}

impl IncidenceReport {
    pub fn get(&self, key: GroupKey) -> Option<f64> {
        match key.kind {
            GroupKind::Consumer => self.inc_con[key.node],
            GroupKind::Prosumer => self.inc_pro[key.node],
        }
    }

    /// Incidences of all populated groups.
    pub fn values(&self) -> Vec<f64> {
        self.inc_con.iter().chain(&self.inc_pro).flatten().copied().collect()
    }

    /// Largest pairwise difference relative to the largest incidence.
    pub fn relative_spread(&self) -> f64 {
        let v = self.values();
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        if v.is_empty() || hi == 0.0 {
            0.0
        } else {
            (hi - lo) / hi.abs()
        }
    }
}

/// Energy expenditure incidence of each populated group; `gap_b` uses the
/// all-groups measure.
pub fn incidence(
    instance: &MarketInstance,
    tau: &VolumetricCharges,
    phi: &FixedCharges,
    sol: &EquilibriumSolution,
) -> Result<IncidenceReport, TariffError> {
    let n = instance.node_count();
    let mut report = IncidenceReport {
        inc_con: vec![None; n],
        inc_pro: vec![None; n],
        gap_b: 0.0,
    };
    for (key, spend) in group_spends(instance, tau, sol) {
        let inc = spend.incidence(phi.require(key)?);
        match key.kind {
            GroupKind::Consumer => report.inc_con[key.node] = Some(inc),
            GroupKind::Prosumer => report.inc_pro[key.node] = Some(inc),
        }
    }
    report.gap_b = equity_gap_b(&report.values());
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RevenueReport {
    pub volumetric_revenue: f64,
    pub fixed_revenue: f64,
    pub target: f64,
    /// Total collected minus the target.
    pub residual: f64,
}

impl RevenueReport {
    pub fn total(&self) -> f64 {
        self.volumetric_revenue + self.fixed_revenue
    }

    pub fn is_adequate(&self, tolerance: f64) -> bool {
        self.residual.abs() <= tolerance
    }
}

pub fn revenue(
    instance: &MarketInstance,
    tau: &VolumetricCharges,
    phi: &FixedCharges,
    sol: &EquilibriumSolution,
) -> RevenueReport {
    let volumetric = volumetric_revenue(tau, sol);
    let fixed: f64 = populated_groups(instance)
        .into_iter()
        .map(|key| {
            let n = match key.kind {
                GroupKind::Consumer => instance.consumer_at(key.node).map_or(0.0, |c| c.households),
                GroupKind::Prosumer => instance.prosumer_at(key.node).map_or(0.0, |p| p.households),
            };
            n * phi.get(key).unwrap_or(0.0)
        })
        .sum();
    RevenueReport {
        volumetric_revenue: volumetric,
        fixed_revenue: fixed,
        target: instance.fixed_cost_target,
        residual: volumetric + fixed - instance.fixed_cost_target,
    }
}

/// Rows `L` and offsets `r` with gap `‖Lφ + r‖²`, in incidence units.
fn gap_system(groups: &[(GroupKey, GroupSpend)], measure: EquityMeasure) -> (DMatrix<f64>, DVector<f64>) {
    let g = groups.len();
    match measure {
        EquityMeasure::AllGroups => {
            let base: Vec<f64> = groups.iter().map(|(_, s)| s.base_spend / s.income).collect();
            let mean = base.iter().sum::<f64>() / g.max(1) as f64;
            let l = DMatrix::from_fn(g, g, |r, c| {
                let centered = if r == c { 1.0 } else { 0.0 } - 1.0 / g as f64;
                centered / groups[c].1.income
            });
            let r = DVector::from_fn(g, |k, _| base[k] - mean);
            (l, r)
        }
        EquityMeasure::PerNode => {
            let mut rows: Vec<(usize, usize)> = Vec::new();
            for (a, (ka, _)) in groups.iter().enumerate() {
                if ka.kind != GroupKind::Consumer {
                    continue;
                }
                if let Some(b) = groups
                    .iter()
                    .position(|(kb, _)| kb.kind == GroupKind::Prosumer && kb.node == ka.node)
                {
                    rows.push((a, b));
                }
            }
            let mut l = DMatrix::zeros(rows.len(), g);
            let mut r = DVector::zeros(rows.len());
            for (k, &(a, b)) in rows.iter().enumerate() {
                let (sa, sb) = (groups[a].1, groups[b].1);
                l[(k, a)] = 1.0 / sa.income;
                l[(k, b)] = -1.0 / sb.income;
                r[k] = sa.base_spend / sa.income - sb.base_spend / sb.income;
            }
            (l, r)
        }
    }
}

/// Allocation tolerances use the tight solver defaults.
fn allocation_settings() -> SolverSettings {
    SolverSettings::default()
}

/// Split `budget` into nonnegative per-household charges. First minimize the
/// equity gap subject to `Σ n·φ = budget`; then, among all minimizers, take
/// the one with the smallest Euclidean norm.
pub fn allocate_for_groups(
    groups: &[(GroupKey, GroupSpend)],
    budget: f64,
    measure: EquityMeasure,
) -> Result<Vec<f64>, TariffError> {
    if !(budget >= 0.0) {
        return Err(TariffError::NegativeBudget(budget));
    }
    let g = groups.len();
    if g == 0 || budget == 0.0 {
        return Ok(vec![0.0; g]);
    }
    // work in dollars: scale incidence rows by the mean income
    let scale = groups.iter().map(|(_, s)| s.income).sum::<f64>() / g as f64;
    let (l, r) = gap_system(groups, measure);
    let l = l * scale;
    let r = r * scale;
    let n_max = groups.iter().map(|(_, s)| s.households).fold(0.0, f64::max);
    let budget_row: Vec<(usize, f64)> = groups
        .iter()
        .enumerate()
        .map(|(k, (_, s))| (k, s.households / n_max))
        .collect();
    let names: Vec<String> = groups
        .iter()
        .map(|(k, _)| format!("phi_{}_{}", k.kind.tag(), k.node))
        .collect();
    let settings = allocation_settings();

    let mut stage1 = QuadraticProgram::new(names.clone());
    stage1.quadratic = -(l.transpose() * &l) * 2.0;
    stage1.linear = -(l.transpose() * &r) * 2.0;
    stage1.lower = vec![0.0; g];
    stage1.add_equality(&budget_row, budget / n_max);
    let first = solve_qp(&stage1, &settings)?;
    let phi_star = first.x.map(|v| v.max(0.0));

    // the optimal set of a least-squares objective is {φ feasible : Lφ = Lφ*}
    let mut rows = l.clone().insert_row(l.nrows(), 0.0);
    for &(k, v) in &budget_row {
        rows[(l.nrows(), k)] = v;
    }
    let svd = rows.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested");
    let top = svd.singular_values.max();
    let mut stage2 = QuadraticProgram::new(names);
    stage2.quadratic = -DMatrix::identity(g, g);
    stage2.lower = vec![0.0; g];
    for (k, sigma) in svd.singular_values.iter().enumerate() {
        if *sigma > 1e-10 * top {
            let dir = v_t.row(k);
            let terms: Vec<(usize, f64)> = (0..g).map(|j| (j, dir[j])).collect();
            stage2.add_equality(&terms, dir.dot(&phi_star.transpose()));
        }
    }
    let second = solve_qp(&stage2, &settings)?;
    Ok(second.x.iter().map(|v| v.max(0.0)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquityAllocation {
    pub charges: FixedCharges,
    pub incidence: IncidenceReport,
}

pub fn allocate_fixed_charges(
    instance: &MarketInstance,
    tau: &VolumetricCharges,
    sol: &EquilibriumSolution,
    fixed_budget: f64,
) -> Result<EquityAllocation, TariffError> {
    allocate_fixed_charges_with(instance, tau, sol, fixed_budget, EquityMeasure::AllGroups)
}

pub fn allocate_fixed_charges_with(
    instance: &MarketInstance,
    tau: &VolumetricCharges,
    sol: &EquilibriumSolution,
    fixed_budget: f64,
    measure: EquityMeasure,
) -> Result<EquityAllocation, TariffError> {
    let groups = group_spends(instance, tau, sol);
    let phi = allocate_for_groups(&groups, fixed_budget, measure)?;
    let mut charges = FixedCharges::zero(instance);
    for ((key, _), v) in groups.iter().zip(phi) {
        charges.set(*key, v);
    }
    let incidence = incidence(instance, tau, &charges, sol)?;
    Ok(EquityAllocation { charges, incidence })
}

/// Share of the fixed-cost target recovered through volumetric charges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FractionPolicy {
    pub fraction: f64,
    pub equity_weight: f64,
}

impl FractionPolicy {
    pub fn new(fraction: f64, instance: &MarketInstance) -> Self {
        Self {
            fraction,
            equity_weight: instance.equity_weight,
        }
    }
}

/// Everything known about one tariff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TariffOutcome {
    pub fraction: f64,
    pub tau: VolumetricCharges,
    pub charges: FixedCharges,
    pub solution: EquilibriumSolution,
    pub surplus: SurplusReport,
    pub incidence: IncidenceReport,
    pub revenue: RevenueReport,
    /// Gross welfare minus the weighted equity gap.
    pub objective: f64,
}

impl TariffOutcome {
    /// Participant surpluses net of fixed charges.
    pub fn net_surplus(&self, instance: &MarketInstance) -> NetSurplus {
        let mut fixed_con = 0.0;
        let mut fixed_pro = 0.0;
        for key in populated_groups(instance) {
            let phi = self.charges.get(key).unwrap_or(0.0);
            match key.kind {
                GroupKind::Consumer => {
                    fixed_con += phi * instance.consumer_at(key.node).map_or(0.0, |c| c.households)
                }
                GroupKind::Prosumer => {
                    fixed_pro += phi * instance.prosumer_at(key.node).map_or(0.0, |p| p.households)
                }
            }
        }
        let consumer = self.surplus.total_consumer() - fixed_con;
        let prosumer = self.surplus.total_prosumer() - fixed_pro;
        let producer = self.surplus.total_producer();
        let wholesale = consumer + producer + self.surplus.iso_revenue;
        NetSurplus {
            consumer,
            prosumer,
            producer,
            iso: self.surplus.iso_revenue,
            wholesale,
            total: wholesale + prosumer,
        }
    }
}

/// Surplus split after fixed charges. `total` equals gross welfare minus the
/// fixed-cost target whenever revenue is adequate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetSurplus {
    pub consumer: f64,
    pub prosumer: f64,
    pub producer: f64,
    pub iso: f64,
    pub wholesale: f64,
    pub total: f64,
}

fn evaluate(
    instance: &MarketInstance,
    tau: VolumetricCharges,
    solution: EquilibriumSolution,
    fraction: f64,
    equity_weight: f64,
) -> Result<TariffOutcome, TariffError> {
    let surplus = surplus_decomposition(instance, &tau, &solution)?;
    let fixed_budget = (instance.fixed_cost_target - surplus.volumetric_revenue).max(0.0);
    let alloc = allocate_fixed_charges(instance, &tau, &solution, fixed_budget)?;
    let revenue = revenue(instance, &tau, &alloc.charges, &solution);
    let objective = surplus.gross_welfare - equity_weight * alloc.incidence.gap_b;
    Ok(TariffOutcome {
        fraction,
        tau,
        charges: alloc.charges,
        solution,
        surplus,
        incidence: alloc.incidence,
        revenue,
        objective,
    })
}

/// Zero volumetric charges with the whole target recovered by fixed charges.
pub fn optimal_tariff(
    instance: &MarketInstance,
    settings: &SolverSettings,
) -> Result<TariffOutcome, TariffError> {
    let tau = VolumetricCharges::zero(instance);
    let sol = solve_equilibrium(instance, &tau, settings)?;
    evaluate(instance, tau, sol, 0.0, instance.equity_weight)
}

/// Knobs of the volumetric-charge search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchSettings {
    /// Evenly spaced τs candidates over `[τ̲s, τ̂b]`.
    pub outer_points: usize,
    /// Golden-section steps around the best candidate.
    pub refine_iterations: usize,
    /// τb samples used to bracket the revenue root.
    pub scan_points: usize,
    /// Root accuracy relative to the fixed-cost target.
    pub revenue_tolerance: f64,
    pub bounds: Option<TariffBox>,
}

impl Default for SearchSettings {
    fn default() -> Self {
        Self {
            outer_points: 21,
            refine_iterations: 30,
            scan_points: 16,
            revenue_tolerance: 1e-9,
            bounds: None,
        }
    }
}

struct RevenueRoot {
    tau: VolumetricCharges,
    solution: EquilibriumSolution,
}

struct RootSearch<'a> {
    instance: &'a MarketInstance,
    settings: &'a SolverSettings,
    search: &'a SearchSettings,
    bounds: TariffBox,
    target: f64,
}

impl RootSearch<'_> {
    fn solve_at(&self, tau_buy: f64, tau_sell: f64) -> Result<(f64, RevenueRoot), TariffError> {
        let tau = VolumetricCharges::new(tau_buy, tau_sell, self.bounds)?;
        let solution = solve_equilibrium(self.instance, &tau, self.settings)?;
        let vr = volumetric_revenue(&tau, &solution);
        Ok((vr, RevenueRoot { tau, solution }))
    }

    /// Smallest τb with volumetric revenue equal to the target at this τs.
    /// `Ok(Err(best))` reports the largest revenue seen when there is no root.
    fn smallest_root(&self, tau_sell: f64) -> Result<Result<RevenueRoot, f64>, TariffError> {
        let lo = tau_sell.max(0.0);
        let hi = self.bounds.tau_buy_max;
        let tol = self.search.revenue_tolerance * self.instance.fixed_cost_target.max(1.0);
        let pts = self.search.scan_points.max(2);
        let mut best_seen = f64::NEG_INFINITY;
        let (mut vr_prev, mut prev) = self.solve_at(lo, tau_sell)?;
        best_seen = best_seen.max(vr_prev);
        let mut t_prev = lo;
        if (vr_prev - self.target).abs() <= tol {
            return Ok(Ok(prev));
        }
        for k in 1..pts {
            let t = lo + (hi - lo) * k as f64 / (pts - 1) as f64;
            let (vr, cur) = self.solve_at(t, tau_sell)?;
            best_seen = best_seen.max(vr);
            let (f_prev, f_cur) = (vr_prev - self.target, vr - self.target);
            if f_cur.abs() <= tol {
                return Ok(Ok(cur));
            }
            if f_prev.signum() != f_cur.signum() {
                return self.refine(tau_sell, (t_prev, f_prev, prev), (t, f_cur, cur), tol).map(Ok);
            }
            vr_prev = vr;
            prev = cur;
            t_prev = t;
        }
        Ok(Err(best_seen))
    }

    /// Illinois-modified regula falsi on a sign-changing bracket.
    fn refine(
        &self,
        tau_sell: f64,
        a: (f64, f64, RevenueRoot),
        b: (f64, f64, RevenueRoot),
        tol: f64,
    ) -> Result<RevenueRoot, TariffError> {
        let (mut ta, mut fa, mut ra) = a;
        let (mut tb, mut fb, mut rb) = b;
        let mut side = 0i8;
        for _ in 0..200 {
            let t = if (tb - ta).abs() < 1e-13 * (1.0 + tb.abs()) {
                0.5 * (ta + tb)
            } else {
                (ta * fb - tb * fa) / (fb - fa)
            };
            let t = t.clamp(ta.min(tb), ta.max(tb));
            let (vr, cur) = self.solve_at(t, tau_sell)?;
            let f = vr - self.target;
            if f.abs() <= tol || (tb - ta).abs() <= 1e-14 * (1.0 + tb.abs()) {
                return Ok(cur);
            }
            if f.signum() == fb.signum() {
                tb = t;
                fb = f;
                rb = cur;
                if side == 1 {
                    fa *= 0.5;
                }
                side = 1;
            } else {
                ta = t;
                fa = f;
                ra = cur;
                if side == -1 {
                    fb *= 0.5;
                }
                side = -1;
            }
        }
        // bracket exhausted: return the closer end
        Ok(if fa.abs() <= fb.abs() { ra } else { rb })
    }
}

/// Best tariff recovering `fraction` of the target volumetrically and the
/// rest through fixed charges.
pub fn constrained_tariff(
    instance: &MarketInstance,
    policy: &FractionPolicy,
    settings: &SolverSettings,
) -> Result<TariffOutcome, TariffError> {
    constrained_tariff_with(instance, policy, settings, &SearchSettings::default())
}

pub fn constrained_tariff_with(
    instance: &MarketInstance,
    policy: &FractionPolicy,
    settings: &SolverSettings,
    search: &SearchSettings,
) -> Result<TariffOutcome, TariffError> {
    let f = policy.fraction;
    if !(0.0..=1.0).contains(&f) {
        return Err(TariffError::InvalidFraction(f));
    }
    if f == 0.0 {
        let tau = VolumetricCharges::zero(instance);
        let sol = solve_equilibrium(instance, &tau, settings)?;
        return evaluate(instance, tau, sol, 0.0, policy.equity_weight);
    }
    let bounds = search.bounds.unwrap_or_else(|| TariffBox::for_instance(instance));
    let roots = RootSearch {
        instance,
        settings,
        search,
        bounds,
        target: f * instance.fixed_cost_target,
    };
    let candidate = |tau_sell: f64| -> Result<Result<TariffOutcome, f64>, TariffError> {
        match roots.smallest_root(tau_sell)? {
            Ok(root) => {
                evaluate(instance, root.tau, root.solution, f, policy.equity_weight).map(Ok)
            }
            Err(best) => Ok(Err(best)),
        }
    };

    // candidates ordered outward from τs = 0, so ties favour small |τs|
    let pts = search.outer_points.max(2);
    let mut grid: Vec<f64> = (0..pts)
        .map(|j| bounds.tau_sell_min + (bounds.tau_buy_max - bounds.tau_sell_min) * j as f64 / (pts - 1) as f64)
        .collect();
    grid.sort_by(|a, b| a.abs().total_cmp(&b.abs()).then(b.total_cmp(a)));
    let evaluated: Vec<Result<Result<TariffOutcome, f64>, TariffError>> =
        grid.par_iter().map(|&ts| candidate(ts)).collect();

    let mut best: Option<TariffOutcome> = None;
    let mut max_attainable = f64::NEG_INFINITY;
    let better = |cand: &TariffOutcome, incumbent: &Option<TariffOutcome>| match incumbent {
        None => true,
        Some(b) => cand.objective > b.objective + 1e-9 * b.objective.abs().max(1.0),
    };
    for res in evaluated {
        match res? {
            Ok(out) => {
                if better(&out, &best) {
                    best = Some(out);
                }
            }
            Err(vr) => max_attainable = max_attainable.max(vr),
        }
    }
    let Some(mut best) = best else {
        return Err(TariffError::FractionUnattainable {
            fraction: f,
            required: roots.target,
            max_attainable,
        });
    };

    // golden-section refinement between the neighbours of the best τs
    let step = (bounds.tau_buy_max - bounds.tau_sell_min) / (pts - 1) as f64;
    let centre = best.tau.tau_sell;
    let mut lo = (centre - step).max(bounds.tau_sell_min);
    let mut hi = (centre + step).min(bounds.tau_buy_max);
    let ratio = 0.5 * (5f64.sqrt() - 1.0);
    let score = |r: &Result<Result<TariffOutcome, f64>, TariffError>| match r {
        Ok(Ok(o)) => o.objective,
        _ => f64::NEG_INFINITY,
    };
    let mut x1 = hi - ratio * (hi - lo);
    let mut x2 = lo + ratio * (hi - lo);
    let mut r1 = candidate(x1);
    let mut r2 = candidate(x2);
    for _ in 0..search.refine_iterations {
        if score(&r1) >= score(&r2) {
            hi = x2;
            x2 = x1;
            r2 = r1;
            x1 = hi - ratio * (hi - lo);
            r1 = candidate(x1);
        } else {
            lo = x1;
            x1 = x2;
            r1 = r2;
            x2 = lo + ratio * (hi - lo);
            r2 = candidate(x2);
        }
    }
    for r in [r1, r2] {
        if let Ok(Ok(out)) = r {
            if better(&out, &Some(best.clone())) {
                best = out;
            }
        }
    }
    Ok(best)
}

/// One sweep point; failures are kept as messages.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub fraction: f64,
    pub outcome: Result<TariffOutcome, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

/// Run the constrained search at each fraction, in grid order.
pub fn sweep_fraction(
    instance: &MarketInstance,
    fractions: &[f64],
    settings: &SolverSettings,
) -> SweepTable {
    let rows = fractions
        .par_iter()
        .map(|&f| SweepRow {
            fraction: f,
            outcome: constrained_tariff(instance, &FractionPolicy::new(f, instance), settings)
                .map_err(|e| e.to_string()),
        })
        .collect();
    SweepTable { rows }
}

impl SweepTable {
    pub fn header(instance: &MarketInstance) -> Vec<String> {
        let groups = populated_groups(instance);
        let name = |i: usize| instance.nodes[i].name();
        let mut h = vec!["fraction".to_string(), "tau_buy".into(), "tau_sell".into()];
        h.extend(groups.iter().map(|k| format!("phi_{}_{}", k.kind.tag(), name(k.node))));
        h.extend((0..instance.node_count()).map(|i| format!("lmp_{}", name(i))));
        h.extend((0..instance.node_count()).map(|i| format!("demand_{}", name(i))));
        for col in [
            "prosumer_net_sale",
            "backup_generation",
            "surplus_consumer",
            "surplus_prosumer",
            "surplus_producer",
            "iso_revenue",
            "wholesale_surplus",
            "total_surplus",
        ] {
            h.push(col.into());
        }
        h.extend(groups.iter().map(|k| format!("incidence_{}_{}", k.kind.tag(), name(k.node))));
        h.push("equity_gap_B".into());
        h.push("status".into());
        h
    }

    pub fn record(instance: &MarketInstance, row: &SweepRow) -> Vec<String> {
        let groups = populated_groups(instance);
        let width = Self::header(instance).len();
        let mut rec = vec![sig9(row.fraction)];
        match &row.outcome {
            Ok(out) => {
                let sol = &out.solution;
                rec.push(sig9(out.tau.tau_buy));
                rec.push(sig9(out.tau.tau_sell));
                rec.extend(groups.iter().map(|&k| sig9(out.charges.get(k).unwrap_or(0.0))));
                rec.extend(sol.p.iter().map(|&v| sig9(v)));
                rec.extend(sol.d.iter().map(|&v| sig9(v)));
                let net_sale: f64 = (0..instance.node_count()).map(|i| sol.net_sale(i)).sum();
                let backup: f64 = sol.g_backup.iter().sum();
                let s = out.net_surplus(instance);
                for v in [
                    net_sale,
                    backup,
                    s.consumer,
                    s.prosumer,
                    s.producer,
                    s.iso,
                    s.wholesale,
                    s.total,
                ] {
                    rec.push(sig9(v));
                }
                rec.extend(groups.iter().map(|&k| sig9(out.incidence.get(k).unwrap_or(0.0))));
                rec.push(sig9(out.incidence.gap_b));
                rec.push("ok".into());
            }
            Err(msg) => {
                rec.resize(width - 1, String::new());
                rec.push(format!("error: {msg}"));
            }
        }
        rec
    }

    pub fn to_csv(&self, instance: &MarketInstance) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(Self::header(instance)).expect("in-memory write");
        for row in &self.rows {
            w.write_record(Self::record(instance, row)).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::three_node_example;
    use crate::model::fixtures::{single_node, three_node_mixed};
    use crate::model::{ConsumerGroup, GenUnit, Network, Node, ProsumerGroup};
    use crate::verification::closed_form_single_node;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn key(kind: GroupKind, node: usize) -> GroupKey {
        GroupKey { kind, node }
    }

    fn two_groups(spend: (f64, f64), income: (f64, f64)) -> Vec<(GroupKey, GroupSpend)> {
        vec![
            (
                key(GroupKind::Consumer, 0),
                GroupSpend {
                    households: 1.0,
                    income: income.0,
                    base_spend: spend.0,
                },
            ),
            (
                key(GroupKind::Prosumer, 0),
                GroupSpend {
                    households: 1.0,
                    income: income.1,
                    base_spend: spend.1,
                },
            ),
        ]
    }

    #[test]
    fn hand_solved_two_group_allocation() {
        let groups = two_groups((1.0, 1.0), (100.0, 200.0));
        let phi = allocate_for_groups(&groups, 3.0, EquityMeasure::AllGroups).unwrap();
        assert_relative_eq!(phi[0], 2.0 / 3.0, epsilon = 1e-9);
        assert_relative_eq!(phi[1], 7.0 / 3.0, epsilon = 1e-9);
        assert_relative_eq!(groups[0].1.incidence(phi[0]), 1.0 / 60.0, epsilon = 1e-9);
    }

    #[test]
    fn identical_groups_split_evenly() {
        let mut groups = two_groups((2.0, 2.0), (150.0, 150.0));
        groups[1].1.households = 3.0;
        let phi = allocate_for_groups(&groups, 8.0, EquityMeasure::AllGroups).unwrap();
        assert_relative_eq!(phi[0], 2.0, epsilon = 1e-9);
        assert_relative_eq!(phi[1], 2.0, epsilon = 1e-9);
    }

    #[test]
    fn zero_budget_gives_zero_charges() {
        let groups = two_groups((1.0, 3.0), (100.0, 100.0));
        let phi = allocate_for_groups(&groups, 0.0, EquityMeasure::AllGroups).unwrap();
        assert_eq!(phi, vec![0.0, 0.0]);
        let inc: Vec<f64> = groups.iter().zip(&phi).map(|((_, s), p)| s.incidence(*p)).collect();
        assert!(equity_gap_b(&inc) > 0.0);
    }

    #[test]
    fn negative_budget_rejected() {
        let groups = two_groups((1.0, 1.0), (100.0, 100.0));
        assert_eq!(
            allocate_for_groups(&groups, -1.0, EquityMeasure::AllGroups),
            Err(TariffError::NegativeBudget(-1.0))
        );
    }

    #[test]
    fn infeasible_equity_keeps_charges_nonnegative() {
        // the second group already spends far more than the first could be charged
        let groups = two_groups((1.0, 50.0), (100.0, 100.0));
        let phi = allocate_for_groups(&groups, 10.0, EquityMeasure::AllGroups).unwrap();
        assert_relative_eq!(phi[0], 10.0, epsilon = 1e-8);
        assert!(phi[1].abs() < 1e-8);
    }

    #[test]
    fn gap_examples() {
        assert_eq!(equity_gap_b(&[0.02, 0.02, 0.02]), 0.0);
        assert_relative_eq!(equity_gap_b(&[0.01, 0.03]), 2e-4, epsilon = 1e-18);
    }

    #[test]
    fn incidence_needs_every_charge() {
        let inst = single_node(1000.0);
        let tau = VolumetricCharges::zero(&inst);
        let sol = solve_equilibrium(&inst, &tau, &SolverSettings::default()).unwrap();
        let mut phi = FixedCharges::zero(&inst);
        phi.phi_con[0] = None;
        assert!(matches!(
            incidence(&inst, &tau, &phi, &sol),
            Err(TariffError::MissingCharge { .. })
        ));
    }

    #[test]
    fn zero_consumption_has_zero_incidence() {
        let mut inst = single_node(1000.0);
        inst.nodes[0].demand_vertical_intercept = 5.0;
        let tau = VolumetricCharges::zero(&inst);
        let sol = solve_equilibrium(&inst, &tau, &SolverSettings::default()).unwrap();
        let rep = incidence(&inst, &tau, &FixedCharges::zero(&inst), &sol).unwrap();
        assert!(rep.inc_con[0].unwrap().abs() < 1e-9);
    }

    #[test]
    fn revenue_without_charges_misses_target() {
        let inst = three_node_mixed();
        let tau = VolumetricCharges::zero(&inst);
        let sol = solve_equilibrium(&inst, &tau, &SolverSettings::default()).unwrap();
        let rep = revenue(&inst, &tau, &FixedCharges::zero(&inst), &sol);
        assert_eq!(rep.total(), 0.0);
        assert_eq!(rep.residual, -inst.fixed_cost_target);
    }

    #[test]
    fn optimal_tariff_closes_budget_with_equity() {
        let inst = three_node_example(25.0);
        let out = optimal_tariff(&inst, &SolverSettings::default()).unwrap();
        assert_eq!((out.tau.tau_buy, out.tau.tau_sell), (0.0, 0.0));
        assert!(out.revenue.is_adequate(1e-6 * inst.fixed_cost_target), "{:?}", out.revenue);
        assert!(out.incidence.gap_b <= 1e-10, "{:?}", out.incidence);
        assert!(out.incidence.relative_spread() <= 1e-5);
    }

    #[test]
    fn constrained_zero_fraction_is_optimal_tariff() {
        let inst = three_node_mixed();
        let s = SolverSettings::default();
        let a = optimal_tariff(&inst, &s).unwrap();
        let b = constrained_tariff(&inst, &FractionPolicy::new(0.0, &inst), &s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_node_root_matches_closed_form() {
        let inst = single_node(1000.0);
        let f = 0.5;
        let out = constrained_tariff(&inst, &FractionPolicy::new(f, &inst), &SolverSettings::default())
            .unwrap();
        let target = f * inst.fixed_cost_target;
        // smallest root of τ·d(τ) = target by bisection on the closed form
        let rev = |t: f64| t * closed_form_single_node(100.0, 1000.0, 10.0, 0.05, 1000.0, t).demand;
        let (mut lo, mut hi) = (0.0, 1.0);
        while rev(hi) < target {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if rev(mid) < target {
                lo = mid
            } else {
                hi = mid
            }
        }
        assert_relative_eq!(out.tau.tau_buy, lo, epsilon = 1e-7);
        assert!(out.revenue.is_adequate(1e-6 * inst.fixed_cost_target));
    }

    #[test]
    fn unattainable_fraction_reports_ceiling() {
        let mut inst = single_node(1000.0);
        inst.fixed_cost_target = 1e9;
        let err = constrained_tariff(&inst, &FractionPolicy::new(1.0, &inst), &SolverSettings::default())
            .unwrap_err();
        match err {
            TariffError::FractionUnattainable { max_attainable, .. } => {
                // the revenue peak of τ·d(τ) is well below the requirement
                assert!(max_attainable > 0.0 && max_attainable < 1e9);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn invalid_fraction_rejected() {
        let inst = single_node(1000.0);
        assert_eq!(
            constrained_tariff(&inst, &FractionPolicy::new(1.5, &inst), &SolverSettings::default()),
            Err(TariffError::InvalidFraction(1.5))
        );
    }

    /// Nodes hosting both groups, so equal per-node incidence leaves a whole
    /// affine family of charges.
    fn two_mixed_nodes() -> MarketInstance {
        MarketInstance {
            nodes: vec![Node::new(0, 150.0, 600.0, 0.3), Node::new(1, 120.0, 500.0, 0.4)],
            consumers: (0..2)
                .map(|i| ConsumerGroup {
                    node: i,
                    households: 3000.0 + 500.0 * i as f64,
                    income: 120.0 + 40.0 * i as f64,
                })
                .collect(),
            prosumers: (0..2)
                .map(|i| ProsumerGroup {
                    node: i,
                    households: 800.0,
                    income: 250.0,
                    renewable_output: 30.0,
                    backup_capacity: 10.0,
                    backup_cost_linear: 25.0,
                    backup_cost_quadratic: 0.3,
                    sunk_cost: 2.0,
                })
                .collect(),
            units: vec![GenUnit::new(0, 0, 30.0, 0.05, 800.0), GenUnit::new(1, 0, 20.0, 0.04, 800.0)],
            network: Network {
                lines: 1,
                ptdf: vec![0.5, -0.5],
                limits: vec![500.0],
            },
            fixed_cost_target: 20000.0,
            equity_weight: 2e10,
        }
    }

    #[test]
    fn per_node_measure_returns_least_norm_charges() {
        let inst = two_mixed_nodes();
        let tau = VolumetricCharges::zero(&inst);
        let sol = solve_equilibrium(&inst, &tau, &SolverSettings::default()).unwrap();
        let budget = inst.fixed_cost_target;
        let alloc =
            allocate_fixed_charges_with(&inst, &tau, &sol, budget, EquityMeasure::PerNode).unwrap();
        assert!(per_node_gap(&alloc.incidence) <= 1e-12);

        // direct least-norm solve of the equal-incidence system
        let groups = group_spends(&inst, &tau, &sol);
        let (l, r) = gap_system(&groups, EquityMeasure::PerNode);
        let mut a = l.clone().insert_row(l.nrows(), 0.0);
        let mut b = (-r).insert_row(l.nrows(), budget);
        for (k, (_, s)) in groups.iter().enumerate() {
            a[(l.nrows(), k)] = s.households;
        }
        let scale = a.amax();
        a /= scale;
        b /= scale;
        let direct = a.clone().svd(true, true).solve(&b, 1e-14).unwrap();
        assert!(direct.iter().all(|v| *v >= 0.0), "least-norm point should be interior");
        for (k, (key, _)) in groups.iter().enumerate() {
            let got = alloc.charges.get(*key).unwrap();
            assert_relative_eq!(got, direct[k], epsilon = 1e-7, max_relative = 1e-8);
        }
    }

    #[test]
    fn sweep_rows_follow_grid_and_schema() {
        let inst = single_node(1000.0);
        let table = sweep_fraction(&inst, &[0.0, 0.25, 2.0], &SolverSettings::default());
        let csv = table.to_csv(&inst);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "fraction,tau_buy,tau_sell,phi_con_0,lmp_0,demand_0,prosumer_net_sale,backup_generation,\
             surplus_consumer,surplus_prosumer,surplus_producer,iso_revenue,wholesale_surplus,\
             total_surplus,incidence_con_0,equity_gap_B,status"
        );
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), 3);
        assert!(rows[0].starts_with("0,0,0,1,40,600,"));
        assert!(rows[0].ends_with(",ok"));
        assert!(rows[2].contains("error: fraction must lie in [0, 1]"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn zero_gap_means_equal_incidence(
            spends in prop::collection::vec(0.0f64..5.0, 2..5),
            incomes in prop::collection::vec(50.0f64..400.0, 4),
            budget in 1.0f64..1e4,
        ) {
            let groups: Vec<(GroupKey, GroupSpend)> = spends
                .iter()
                .enumerate()
                .map(|(k, s)| (key(GroupKind::Consumer, k), GroupSpend {
                    households: 100.0 + 50.0 * k as f64,
                    income: incomes[k % incomes.len()],
                    base_spend: *s,
                }))
                .collect();
            let phi = allocate_for_groups(&groups, budget, EquityMeasure::AllGroups).unwrap();
            prop_assert!(phi.iter().all(|v| *v >= 0.0));
            let paid: f64 = groups.iter().zip(&phi).map(|((_, s), p)| s.households * p).sum();
            prop_assert!((paid - budget).abs() <= 1e-6 * budget);
            let inc: Vec<f64> = groups.iter().zip(&phi).map(|((_, s), p)| s.incidence(*p)).collect();
            if equity_gap_b(&inc) <= 1e-10 {
                let hi = inc.iter().copied().fold(f64::MIN, f64::max);
                let lo = inc.iter().copied().fold(f64::MAX, f64::min);
                prop_assert!((hi - lo) <= 1e-5 * hi);
            }
        }
    }
}
