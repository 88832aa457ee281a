//! Finite-scenario evaluation: expected welfare over scenarios, the
//! zero-charge optimality check under uncertainty, and chance-constrained revenue.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{read, ConfigError};
use crate::equilibrium::{
    solve_equilibrium, volumetric_revenue, EquilibriumError, EquilibriumSolution, SolverSettings,
    TariffBox, VolumetricCharges,
};
use crate::model::{MarketInstance, ValidationReport};
use crate::tariff::{
    allocate_for_groups, equity_gap_b, group_spends, revenue, EquityMeasure, FixedCharges,
    GroupKey, GroupSpend, TariffError,
};

/// Probabilities must sum to one within this tolerance.
pub const PROBABILITY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum StochasticError {
    #[error("scenario set is empty")]
    Empty,
    #[error("scenario {index}: probability must be > 0, got {probability}")]
    Probability { index: usize, probability: f64 },
    #[error("scenario probabilities sum to {0}, not 1")]
    ProbabilitySum(f64),
    #[error("scenario {index}: node {node} has no prosumers to override")]
    UnknownNode { index: usize, node: usize },
    #[error("scenario {index}: there is no unit {unit}")]
    UnknownUnit { index: usize, unit: usize },
    #[error("scenario {index} is invalid:\n{report}")]
    Invalid {
        index: usize,
        report: ValidationReport,
    },
    #[error("scenario {index}: {source}")]
    Scenario {
        index: usize,
        #[source]
        source: EquilibriumError,
    },
    #[error("the grid must contain (0, 0)")]
    MissingOrigin,
    #[error("epsilon must lie in (0, 1), got {0}")]
    Epsilon(f64),
    #[error(transparent)]
    Tariff(#[from] TariffError),
    #[error(transparent)]
    Equilibrium(#[from] EquilibriumError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Field replacements applied to the base instance in one scenario.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioOverrides {
    /// Aggregate renewable output by node index.
    #[serde(default)]
    pub renewable_output: BTreeMap<usize, f64>,
    /// Capacity by position in the unit list.
    #[serde(default)]
    pub unit_capacities: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub probability: f64,
    #[serde(default)]
    pub overrides: ScenarioOverrides,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSet {
    pub scenarios: Vec<Scenario>,
}

impl ScenarioSet {
    /// The base instance as the only scenario.
    pub fn deterministic() -> Self {
        Self::equally_likely(vec![ScenarioOverrides::default()])
    }

    pub fn equally_likely(overrides: Vec<ScenarioOverrides>) -> Self {
        let p = 1.0 / overrides.len() as f64;
        Self {
            scenarios: overrides
                .into_iter()
                .map(|overrides| Scenario {
                    probability: p,
                    overrides,
                })
                .collect(),
        }
    }

    /// Equally likely scenarios differing only in the renewable output of
    /// every prosumer group.
    pub fn renewable_levels(instance: &MarketInstance, levels: &[f64]) -> Self {
        Self::equally_likely(
            levels
                .iter()
                .map(|&r| ScenarioOverrides {
                    renewable_output: instance.prosumers.iter().map(|p| (p.node, r)).collect(),
                    unit_capacities: BTreeMap::new(),
                })
                .collect(),
        )
    }

    pub fn parse(text: &str) -> Result<Self, StochasticError> {
        serde_json::from_str(text).map_err(|e| StochasticError::Config(ConfigError::Parse(e)))
    }

    pub fn load(path: &Path) -> Result<Self, StochasticError> {
        Self::parse(&read(path)?)
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.scenarios.iter().map(|s| s.probability).collect()
    }

    /// Check the probabilities and build every scenario instance.
    pub fn instances(&self, base: &MarketInstance) -> Result<Vec<MarketInstance>, StochasticError> {
        if self.scenarios.is_empty() {
            return Err(StochasticError::Empty);
        }
        for (index, s) in self.scenarios.iter().enumerate() {
            if !(s.probability > 0.0 && s.probability.is_finite()) {
                return Err(StochasticError::Probability {
                    index,
                    probability: s.probability,
                });
            }
        }
        let total: f64 = self.scenarios.iter().map(|s| s.probability).sum();
        if (total - 1.0).abs() > PROBABILITY_TOLERANCE {
            return Err(StochasticError::ProbabilitySum(total));
        }
        self.scenarios
            .iter()
            .enumerate()
            .map(|(index, s)| {
                let mut inst = base.clone();
                for (&node, &r) in &s.overrides.renewable_output {
                    inst.prosumer_at_mut(node)
                        .ok_or(StochasticError::UnknownNode { index, node })?
                        .renewable_output = r;
                }
                for (&unit, &cap) in &s.overrides.unit_capacities {
                    inst.units
                        .get_mut(unit)
                        .ok_or(StochasticError::UnknownUnit { index, unit })?
                        .capacity = cap;
                }
                let report = inst.validate();
                if !report.is_valid() {
                    return Err(StochasticError::Invalid { index, report });
                }
                Ok(inst)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChanceSettings {
    /// Allowed probability of missing the revenue target.
    pub epsilon: f64,
    /// Slack in $ when comparing revenue with the target.
    pub tolerance: f64,
}

impl ChanceSettings {
    pub fn new(epsilon: f64) -> Result<Self, StochasticError> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(StochasticError::Epsilon(epsilon));
        }
        Ok(Self {
            epsilon,
            tolerance: 1e-6,
        })
    }
}

/// Equilibria of every scenario at one tariff, in scenario order.
fn solve_scenarios(
    instances: &[MarketInstance],
    tau: &VolumetricCharges,
    settings: &SolverSettings,
) -> Result<Vec<EquilibriumSolution>, StochasticError> {
    instances
        .par_iter()
        .enumerate()
        .map(|(index, inst)| {
            solve_equilibrium(inst, tau, settings)
                .map_err(|source| StochasticError::Scenario { index, source })
        })
        .collect()
}

/// Probability-weighted sum in scenario order.
fn weighted_sum(probabilities: &[f64], values: impl IntoIterator<Item = f64>) -> f64 {
    probabilities.iter().zip(values).map(|(p, v)| p * v).sum()
}

/// Optimal welfare value of every scenario at `tau`.
pub fn scenario_values(
    base: &MarketInstance,
    set: &ScenarioSet,
    tau: &VolumetricCharges,
    settings: &SolverSettings,
) -> Result<Vec<f64>, StochasticError> {
    let instances = set.instances(base)?;
    Ok(solve_scenarios(&instances, tau, settings)?
        .iter()
        .map(|s| s.objective)
        .collect())
}

/// Expected optimal welfare value at `tau`.
pub fn ev_estimate(
    base: &MarketInstance,
    set: &ScenarioSet,
    tau: &VolumetricCharges,
    settings: &SolverSettings,
) -> Result<f64, StochasticError> {
    let values = scenario_values(base, set, tau, settings)?;
    Ok(weighted_sum(&set.probabilities(), values))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRevenue {
    pub probability: f64,
    pub total_revenue: f64,
    pub adequate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChanceReport {
    pub tau: VolumetricCharges,
    pub charges: FixedCharges,
    pub scenarios: Vec<ScenarioRevenue>,
    /// Probability that revenue meets the target.
    pub probability: f64,
    pub epsilon: f64,
    pub satisfied: bool,
}

/// Revenue adequacy of a tariff in every scenario.
pub fn chance_report(
    base: &MarketInstance,
    set: &ScenarioSet,
    tau: &VolumetricCharges,
    phi: &FixedCharges,
    chance: &ChanceSettings,
    settings: &SolverSettings,
) -> Result<ChanceReport, StochasticError> {
    let instances = set.instances(base)?;
    let solutions = solve_scenarios(&instances, tau, settings)?;
    Ok(assess_revenue(&instances, set, tau, phi, &solutions, chance))
}

fn assess_revenue(
    instances: &[MarketInstance],
    set: &ScenarioSet,
    tau: &VolumetricCharges,
    phi: &FixedCharges,
    solutions: &[EquilibriumSolution],
    chance: &ChanceSettings,
) -> ChanceReport {
    let scenarios: Vec<ScenarioRevenue> = instances
        .iter()
        .zip(solutions)
        .zip(&set.scenarios)
        .map(|((inst, sol), s)| {
            let rev = revenue(inst, tau, phi, sol);
            ScenarioRevenue {
                probability: s.probability,
                total_revenue: rev.total(),
                adequate: rev.total() >= rev.target - chance.tolerance,
            }
        })
        .collect();
    let probability = scenarios
        .iter()
        .filter(|s| s.adequate)
        .map(|s| s.probability)
        .sum::<f64>()
        .min(1.0);
    ChanceReport {
        tau: *tau,
        charges: phi.clone(),
        probability,
        epsilon: chance.epsilon,
        satisfied: probability >= 1.0 - chance.epsilon - PROBABILITY_TOLERANCE,
        scenarios,
    }
}

/// Probability that volumetric plus fixed revenue meets the target.
pub fn chance_revenue_probability(
    base: &MarketInstance,
    set: &ScenarioSet,
    tau: &VolumetricCharges,
    phi: &FixedCharges,
    chance: &ChanceSettings,
    settings: &SolverSettings,
) -> Result<f64, StochasticError> {
    Ok(chance_report(base, set, tau, phi, chance, settings)?.probability)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalityReport {
    /// Expected value at every grid point, in grid order.
    pub values: Vec<((f64, f64), f64)>,
    pub argmax: (f64, f64),
    /// EV(0,0) minus the best value over the other grid points.
    pub margin: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Evaluate the expected value on `grid` and check that zero charges are best.
pub fn stochastic_optimal_check(
    base: &MarketInstance,
    set: &ScenarioSet,
    grid: &[(f64, f64)],
    settings: &SolverSettings,
    tolerance: f64,
) -> Result<OptimalityReport, StochasticError> {
    if !grid.contains(&(0.0, 0.0)) {
        return Err(StochasticError::MissingOrigin);
    }
    let instances = set.instances(base)?;
    let bounds = TariffBox::for_instance(base);
    let probabilities = set.probabilities();
    let values: Vec<((f64, f64), f64)> = grid
        .par_iter()
        .map(|&(tb, ts)| {
            let tau = VolumetricCharges::new(tb, ts, bounds)?;
            let sols = solve_scenarios(&instances, &tau, settings)?;
            Ok(((tb, ts), weighted_sum(&probabilities, sols.iter().map(|s| s.objective))))
        })
        .collect::<Result<_, StochasticError>>()?;
    let origin = values
        .iter()
        .find(|(t, _)| *t == (0.0, 0.0))
        .map(|(_, v)| *v)
        .expect("checked above");
    // ties go to the origin
    let mut argmax = ((0.0, 0.0), origin);
    for &entry in &values {
        if entry.1 > argmax.1 {
            argmax = entry;
        }
    }
    let best_other = values
        .iter()
        .filter(|(t, _)| *t != (0.0, 0.0))
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let margin = origin - best_other;
    Ok(OptimalityReport {
        pass: margin >= -tolerance,
        argmax: argmax.0,
        values,
        margin,
        tolerance,
    })
}

/// One tariff evaluated under uncertainty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChanceCandidate {
    pub tau: VolumetricCharges,
    pub expected_value: f64,
    pub expected_volumetric_revenue: f64,
    /// Equity gap of the expected incidences.
    pub expected_gap_b: f64,
    pub report: ChanceReport,
    /// Expected value minus the weighted equity gap.
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChanceSearch {
    pub candidates: Vec<ChanceCandidate>,
    /// Index of the best candidate meeting the chance constraint.
    pub best: Option<usize>,
}

impl ChanceSearch {
    pub fn best(&self) -> Option<&ChanceCandidate> {
        self.best.map(|k| &self.candidates[k])
    }
}

/// Fixed charges for the expected quantities: the budget is the target minus
/// expected volumetric revenue and incidences use expected spend.
fn expected_allocation(
    instances: &[MarketInstance],
    probabilities: &[f64],
    tau: &VolumetricCharges,
    solutions: &[EquilibriumSolution],
) -> Result<(FixedCharges, f64, f64), StochasticError> {
    let per_scenario: Vec<Vec<(GroupKey, GroupSpend)>> = instances
        .iter()
        .zip(solutions)
        .map(|(inst, sol)| group_spends(inst, tau, sol))
        .collect();
    let mut expected = per_scenario[0].clone();
    for (k, (_, spend)) in expected.iter_mut().enumerate() {
        spend.base_spend =
            weighted_sum(probabilities, per_scenario.iter().map(|groups| groups[k].1.base_spend));
    }
    let vr = weighted_sum(probabilities, solutions.iter().map(|s| volumetric_revenue(tau, s)));
    let budget = (instances[0].fixed_cost_target - vr).max(0.0);
    let phi = allocate_for_groups(&expected, budget, EquityMeasure::AllGroups)?;
    let mut charges = FixedCharges::zero(&instances[0]);
    for ((key, _), v) in expected.iter().zip(&phi) {
        charges.set(*key, *v);
    }
    let incidences: Vec<f64> = expected
        .iter()
        .zip(&phi)
        .map(|((_, s), p)| s.incidence(*p))
        .collect();
    Ok((charges, vr, equity_gap_b(&incidences)))
}

/// Evaluate a tariff under uncertainty with expected-quantity fixed charges.
pub fn evaluate_chance_candidate(
    base: &MarketInstance,
    set: &ScenarioSet,
    tau: &VolumetricCharges,
    chance: &ChanceSettings,
    settings: &SolverSettings,
) -> Result<ChanceCandidate, StochasticError> {
    let instances = set.instances(base)?;
    candidate(&instances, set, tau, chance, settings)
}

fn candidate(
    instances: &[MarketInstance],
    set: &ScenarioSet,
    tau: &VolumetricCharges,
    chance: &ChanceSettings,
    settings: &SolverSettings,
) -> Result<ChanceCandidate, StochasticError> {
    let probabilities = set.probabilities();
    let solutions = solve_scenarios(instances, tau, settings)?;
    let (charges, vr, gap) = expected_allocation(instances, &probabilities, tau, &solutions)?;
    let report = assess_revenue(instances, set, tau, &charges, &solutions, chance);
    let expected_value = weighted_sum(&probabilities, solutions.iter().map(|s| s.objective));
    Ok(ChanceCandidate {
        tau: *tau,
        expected_value,
        expected_volumetric_revenue: vr,
        expected_gap_b: gap,
        objective: expected_value + vr - instances[0].equity_weight * gap,
        report,
    })
}

fn magnitude(c: &ChanceCandidate) -> f64 {
    c.tau.tau_buy.hypot(c.tau.tau_sell)
}

/// Grid search over volumetric charges subject to the chance constraint.
/// Ties go to the smaller charges, then to the earlier grid point.
pub fn chance_grid_search(
    base: &MarketInstance,
    set: &ScenarioSet,
    grid: &[(f64, f64)],
    chance: &ChanceSettings,
    settings: &SolverSettings,
) -> Result<ChanceSearch, StochasticError> {
    let instances = set.instances(base)?;
    let bounds = TariffBox::for_instance(base);
    let candidates: Vec<ChanceCandidate> = grid
        .par_iter()
        .map(|&(tb, ts)| {
            let tau = VolumetricCharges::new(tb, ts, bounds)?;
            candidate(&instances, set, &tau, chance, settings)
        })
        .collect::<Result<_, StochasticError>>()?;
    let mut best: Option<usize> = None;
    for (k, c) in candidates.iter().enumerate() {
        if !c.report.satisfied {
            continue;
        }
        let improves = best.is_none_or(|b| {
            let inc = &candidates[b];
            let slack = 1e-9 * inc.objective.abs().max(1.0);
            c.objective > inc.objective + slack
                || (c.objective >= inc.objective - slack && magnitude(c) < magnitude(inc))
        });
        if improves {
            best = Some(k);
        }
    }
    Ok(ChanceSearch { candidates, best })
}
