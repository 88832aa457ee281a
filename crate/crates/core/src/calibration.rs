//! Build a market instance from household-level survey figures.
//!
//! Each node hosts one income tier. Per-household baseline demand is the
//! low-income baseline times the tier's scaling; the node's linear demand
//! curve passes through (reference price, baseline aggregate demand) with the
//! requested point elasticity there. Incomes are set so that the baseline
//! spend is the given share of income. Prosumers are a fraction of the
//! households at one designated node.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    ConsumerGroup, GenUnit, MarketInstance, Network, Node, ProsumerGroup,
    DEFAULT_EQUITY_WEIGHT_FACTOR,
};

#[derive(Debug, Error, PartialEq)]
pub enum CalibrationError {
    #[error("invalid calibration: {0}")]
    InvalidSpec(String),
    #[error(
        "node {node}: cannot anchor linear demand (P0 = {p0}, Q0 = {q0}, baseline demand {baseline})"
    )]
    InfeasibleAnchor {
        node: usize,
        p0: f64,
        q0: f64,
        baseline: f64,
    },
}

/// Calibration recipe. Energies in MWh, money in $, per day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSpec {
    /// Daily demand of a low-income household (MWh/household/day).
    pub baseline_demand_low: f64,
    /// Per-node multiplier on the low-income baseline.
    pub group_scalings: Vec<f64>,
    pub households_per_group: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_labels: Option<Vec<String>>,
    /// Fraction of income spent on electricity at the reference price.
    pub expenditure_share: f64,
    /// Retail price ($/MWh) at which baseline demand is observed.
    pub reference_retail_price: f64,
    pub demand_price_elasticity_at_reference: f64,
    /// Node whose households own DER.
    pub solar_node: usize,
    pub solar_penetration: f64,
    /// Installed DER per prosumer household (kW).
    pub solar_capacity_per_household: f64,
    /// Equivalent full-load hours per day used to turn capacity into energy.
    pub solar_full_load_hours: f64,
    /// Overrides the capacity-derived daily renewable output (MWh/day).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub renewable_output: Option<f64>,
    /// Aggregate prosumer backup (MWh/day).
    pub backup_capacity: f64,
    pub backup_cost_linear: f64,
    pub backup_cost_quadratic: f64,
    /// Sunk DER cost per prosumer household ($/day).
    pub sunk_cost: f64,
    pub units: Vec<GenUnit>,
    pub network: Network,
    pub fixed_cost_target: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub equity_weight: Option<f64>,
}

impl CalibrationSpec {
    fn check(&self) -> Result<(), CalibrationError> {
        let bad = |m: String| Err(CalibrationError::InvalidSpec(m));
        let n = self.group_scalings.len();
        if n == 0 {
            return bad("at least one income group is required".into());
        }
        if self.households_per_group.len() != n {
            return bad(format!(
                "households_per_group has {} entries, expected {n}",
                self.households_per_group.len()
            ));
        }
        if let Some(labels) = &self.node_labels {
            if labels.len() != n {
                return bad(format!("node_labels has {} entries, expected {n}", labels.len()));
            }
        }
        let positives = [
            ("baseline_demand_low", self.baseline_demand_low),
            ("reference_retail_price", self.reference_retail_price),
            ("solar_penetration", self.solar_penetration),
            ("solar_capacity_per_household", self.solar_capacity_per_household),
            ("solar_full_load_hours", self.solar_full_load_hours),
        ];
        for (name, v) in positives {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (i, (&s, &h)) in self
            .group_scalings
            .iter()
            .zip(&self.households_per_group)
            .enumerate()
        {
            if !(s.is_finite() && s > 0.0) {
                return bad(format!("group_scalings[{i}] must be positive"));
            }
            if !(h.is_finite() && h > 0.0) {
                return bad(format!("households_per_group[{i}] must be positive"));
            }
        }
        if !(self.expenditure_share > 0.0 && self.expenditure_share < 1.0) {
            return bad("expenditure_share must lie in (0, 1)".into());
        }
        if !(self.demand_price_elasticity_at_reference < 0.0) {
            return bad("demand_price_elasticity_at_reference must be negative".into());
        }
        if self.solar_node >= n {
            return bad(format!("solar_node {} out of range", self.solar_node));
        }
        if self.solar_penetration > 1.0 {
            return bad("solar_penetration must not exceed 1".into());
        }
        for (name, v) in [
            ("backup_capacity", self.backup_capacity),
            ("backup_cost_linear", self.backup_cost_linear),
            ("backup_cost_quadratic", self.backup_cost_quadratic),
            ("sunk_cost", self.sunk_cost),
            ("fixed_cost_target", self.fixed_cost_target),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be non-negative"));
            }
        }
        if let Some(r) = self.renewable_output {
            if !(r.is_finite() && r >= 0.0) {
                return bad("renewable_output must be non-negative".into());
            }
        }
        Ok(())
    }

    /// Per-household baseline demand of tier `i`.
    pub fn household_demand(&self, i: usize) -> f64 {
        self.baseline_demand_low * self.group_scalings[i]
    }

    /// Prosumer DER output implied by capacity and full-load hours, unless overridden.
    pub fn daily_renewable_output(&self) -> f64 {
        self.renewable_output.unwrap_or_else(|| {
            let households = self.solar_penetration * self.households_per_group[self.solar_node];
            households * self.solar_capacity_per_household / 1000.0 * self.solar_full_load_hours
        })
    }
}

/// Intercepts (P0, Q0) of the line through (price, quantity) with the given
/// point elasticity at that point.
pub fn anchor_linear_demand(price: f64, quantity: f64, elasticity: f64) -> (f64, f64) {
    let e = -elasticity;
    let ratio = e / (1.0 + e);
    (price / ratio, quantity / (1.0 - ratio))
}

pub fn calibrate(spec: &CalibrationSpec) -> Result<MarketInstance, CalibrationError> {
    spec.check()?;
    let n = spec.group_scalings.len();
    let price = spec.reference_retail_price;
    let share = spec.expenditure_share;

    let mut nodes = Vec::with_capacity(n);
    let mut consumers = Vec::with_capacity(n);
    let mut prosumers = Vec::new();
    for i in 0..n {
        let per_household = spec.household_demand(i);
        let households = spec.households_per_group[i];
        let baseline = households * per_household;
        let (p0, q0) =
            anchor_linear_demand(price, baseline, spec.demand_price_elasticity_at_reference);
        if !(p0.is_finite() && q0.is_finite() && p0 > price && q0 > baseline) {
            return Err(CalibrationError::InfeasibleAnchor {
                node: i,
                p0,
                q0,
                baseline,
            });
        }
        let alpha = if i == spec.solar_node {
            spec.solar_penetration
        } else {
            0.0
        };
        nodes.push(Node {
            id: i,
            label: spec.node_labels.as_ref().map(|l| l[i].clone()),
            demand_vertical_intercept: p0,
            demand_horizontal_intercept: q0,
            prosumer_fraction: alpha,
        });
        let reference_spend = price * per_household;
        if alpha < 1.0 {
            consumers.push(ConsumerGroup {
                node: i,
                households: (1.0 - alpha) * households,
                income: reference_spend / share,
            });
        }
        if alpha > 0.0 {
            prosumers.push(ProsumerGroup {
                node: i,
                households: alpha * households,
                income: (reference_spend + spec.sunk_cost) / share,
                renewable_output: spec.daily_renewable_output(),
                backup_capacity: spec.backup_capacity,
                backup_cost_linear: spec.backup_cost_linear,
                backup_cost_quadratic: spec.backup_cost_quadratic,
                sunk_cost: spec.sunk_cost,
            });
        }
    }

    Ok(MarketInstance {
        nodes,
        consumers,
        prosumers,
        units: spec.units.clone(),
        network: spec.network.clone(),
        fixed_cost_target: spec.fixed_cost_target,
        equity_weight: spec
            .equity_weight
            .unwrap_or(DEFAULT_EQUITY_WEIGHT_FACTOR * spec.fixed_cost_target),
    })
}

/// The bundled three-node recipe: high/medium/low income tiers at nodes
/// A/B/C, DER owned by 20% of the high-income households.
///
/// Supply-side data (units, PTDF, limits) is a plausible reconstruction.
pub fn three_node_spec(renewable_output: f64) -> CalibrationSpec {
    serde_json::from_str::<CalibrationDocumentRef>(THREE_NODE_CALIBRATION)
        .map(|d| {
            let mut spec = d.calibration;
            spec.renewable_output = Some(renewable_output);
            spec
        })
        .expect("bundled calibration parses")
}

/// Calibrated three-node example instance.
pub fn three_node_example(renewable_output: f64) -> MarketInstance {
    calibrate(&three_node_spec(renewable_output)).expect("bundled calibration is feasible")
}

#[derive(Deserialize)]
struct CalibrationDocumentRef {
    calibration: CalibrationSpec,
}

/// Calibration document for the bundled three-node example.
pub const THREE_NODE_CALIBRATION: &str = include_str!("../data/three_node_calibration.json");

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn anchor_reproduces_point_and_elasticity() {
        let (p0, q0) = anchor_linear_demand(110.0, 460.0, -0.1);
        let q = q0 * (1.0 - 110.0 / p0);
        assert_relative_eq!(q, 460.0, max_relative = 1e-12);
        let elasticity = -(q0 / p0) * 110.0 / q;
        assert_relative_eq!(elasticity, -0.1, max_relative = 1e-12);
    }

    #[test]
    fn bundled_recipe_matches_survey_figures() {
        let spec = three_node_spec(25.0);
        // 20 kWh low-income baseline; medium and high are 25% and 50% larger
        assert_relative_eq!(spec.household_demand(2), 0.020);
        assert_relative_eq!(spec.household_demand(1), 0.025);
        assert_relative_eq!(spec.household_demand(0), 0.030);

        let inst = calibrate(&spec).unwrap();
        assert!(inst.validate().is_valid(), "{}", inst.validate());
        let pro = &inst.prosumers[0];
        assert_relative_eq!(pro.households, 3067.0);
        // 8 kW per household, about 25 MW in total
        let mw = pro.households * spec.solar_capacity_per_household / 1000.0;
        assert!((mw - 25.0).abs() < 0.5, "{mw}");
        assert_eq!(inst.fixed_cost_target, 80_000.0);

        let low = inst.consumer_at(2).unwrap();
        let spend = spec.reference_retail_price * spec.household_demand(2);
        assert_relative_eq!(low.income, spend / 0.015, max_relative = 1e-12);
    }

    #[test]
    fn alpha_only_at_solar_node() {
        let inst = three_node_example(150.0);
        assert_relative_eq!(inst.nodes[0].prosumer_fraction, 0.2);
        assert_eq!(inst.nodes[1].prosumer_fraction, 0.0);
        assert_eq!(inst.nodes[2].prosumer_fraction, 0.0);
        assert_eq!(inst.prosumers[0].renewable_output, 150.0);
        assert_eq!(inst.prosumers[0].backup_capacity, 25.0);
    }

    #[test]
    fn renewable_output_from_capacity() {
        let mut spec = three_node_spec(25.0);
        spec.renewable_output = None;
        spec.solar_full_load_hours = 6.0;
        let r = spec.daily_renewable_output();
        assert_relative_eq!(r, 3067.0 * 8.0 / 1000.0 * 6.0, max_relative = 1e-12);
    }

    #[test]
    fn aggregate_baseline_equals_households_times_demand() {
        let spec = three_node_spec(25.0);
        let inst = calibrate(&spec).unwrap();
        for (i, node) in inst.nodes.iter().enumerate() {
            let q = node.aggregate_quantity(spec.reference_retail_price);
            let expected = spec.households_per_group[i] * spec.household_demand(i);
            assert_relative_eq!(q, expected, max_relative = 1e-12);
        }
    }

    #[test]
    fn infeasible_anchor_names_node() {
        let mut spec = three_node_spec(25.0);
        spec.demand_price_elasticity_at_reference = -1e-320;
        match calibrate(&spec) {
            Err(CalibrationError::InfeasibleAnchor { node, .. }) => assert_eq!(node, 0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = three_node_spec(25.0);
        spec.expenditure_share = 1.5;
        assert!(matches!(calibrate(&spec), Err(CalibrationError::InvalidSpec(_))));
        let mut spec = three_node_spec(25.0);
        spec.demand_price_elasticity_at_reference = 0.3;
        assert!(matches!(calibrate(&spec), Err(CalibrationError::InvalidSpec(_))));
    }

    proptest! {
        #[test]
        fn calibrate_then_validate_is_clean(
            low in 0.005f64..0.05,
            share in 0.005f64..0.2,
            price in 20.0f64..300.0,
            elasticity in -2.0f64..-0.01,
            penetration in 0.01f64..1.0,
            scalings in proptest::collection::vec(0.5f64..3.0, 1..4),
            node_pick in 0usize..3,
        ) {
            let mut spec = three_node_spec(25.0);
            let n = scalings.len();
            spec.baseline_demand_low = low;
            spec.expenditure_share = share;
            spec.reference_retail_price = price;
            spec.demand_price_elasticity_at_reference = elasticity;
            spec.solar_penetration = penetration;
            spec.households_per_group = (0..n).map(|i| 1000.0 * (i + 1) as f64).collect();
            spec.group_scalings = scalings;
            spec.node_labels = None;
            spec.solar_node = node_pick % n;
            spec.units.iter_mut().for_each(|u| u.node %= n);
            spec.network = Network::empty();
            let inst = calibrate(&spec).unwrap();
            let report = inst.validate();
            prop_assert!(report.is_valid(), "{}", report);
        }
    }
}
