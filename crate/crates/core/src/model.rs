//! Market domain types, demand and cost primitives, and instance validation.
//!
//! All energies are MWh/day, prices $/MWh and money $/day. Model variables
//! (demand, generation, trades) are group aggregates; incomes, fixed charges
//! and sunk costs are per household.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised by the demand and cost primitives.
#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("node {node}: consumer demand is undefined when the prosumer fraction is 1")]
    NoConsumerDemand { node: usize },
    #[error("node {node}: prosumer demand is undefined when the prosumer fraction is 0")]
    NoProsumerDemand { node: usize },
    #[error("negative quantity {0}")]
    NegativeQuantity(f64),
}

/// A network node with its horizontally aggregated linear retail demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Node {
    pub id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// Vertical intercept P0 ($/MWh).
    pub demand_vertical_intercept: f64,
    /// Horizontal intercept Q0 (MWh/day).
    pub demand_horizontal_intercept: f64,
    /// Fraction of the aggregate demand belonging to prosumers.
    pub prosumer_fraction: f64,
}

impl Node {
    pub fn new(id: usize, p0: f64, q0: f64, alpha: f64) -> Self {
        Self {
            id,
            label: None,
            demand_vertical_intercept: p0,
            demand_horizontal_intercept: q0,
            prosumer_fraction: alpha,
        }
    }

    /// Display name used in table columns.
    pub fn name(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.id.to_string())
    }

    pub fn has_consumers(&self) -> bool {
        self.prosumer_fraction < 1.0
    }

    pub fn has_prosumers(&self) -> bool {
        self.prosumer_fraction > 0.0
    }

    /// Slope of the conventional consumers' inverse demand.
    pub fn consumer_slope(&self) -> Result<f64, ModelError> {
        if !self.has_consumers() {
            return Err(ModelError::NoConsumerDemand { node: self.id });
        }
        Ok(self.demand_vertical_intercept
            / ((1.0 - self.prosumer_fraction) * self.demand_horizontal_intercept))
    }

    /// Slope of the prosumers' inverse demand.
    pub fn prosumer_slope(&self) -> Result<f64, ModelError> {
        if !self.has_prosumers() {
            return Err(ModelError::NoProsumerDemand { node: self.id });
        }
        Ok(self.demand_vertical_intercept
            / (self.prosumer_fraction * self.demand_horizontal_intercept))
    }

    /// Aggregate quantity demanded by both groups at retail price `price`.
    pub fn aggregate_quantity(&self, price: f64) -> f64 {
        self.demand_horizontal_intercept * (1.0 - price / self.demand_vertical_intercept)
    }
}

/// Conventional (non-DER) households at a node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsumerGroup {
    pub node: usize,
    pub households: f64,
    /// Income per household ($/household/day).
    pub income: f64,
}

/// Prosumer households at a node, aggregated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProsumerGroup {
    pub node: usize,
    pub households: f64,
    pub income: f64,
    /// Aggregate renewable output R (MWh/day).
    pub renewable_output: f64,
    /// Aggregate backup capacity G (MWh/day).
    pub backup_capacity: f64,
    pub backup_cost_linear: f64,
    pub backup_cost_quadratic: f64,
    /// Sunk DER cost per household ($/household/day).
    pub sunk_cost: f64,
}

impl ProsumerGroup {
    /// Backup generation cost c1·g + ½·c2·g².
    pub fn backup_cost(&self, g: f64) -> f64 {
        self.backup_cost_linear * g + 0.5 * self.backup_cost_quadratic * g * g
    }

    pub fn backup_marginal_cost(&self, g: f64) -> f64 {
        self.backup_cost_linear + self.backup_cost_quadratic * g
    }
}

/// A wholesale generating unit with quadratic cost a·g + ½·A·g².
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenUnit {
    pub node: usize,
    pub id: usize,
    pub cost_linear: f64,
    pub cost_quadratic: f64,
    pub capacity: f64,
}

impl GenUnit {
    pub fn new(node: usize, id: usize, a: f64, big_a: f64, capacity: f64) -> Self {
        Self {
            node,
            id,
            cost_linear: a,
            cost_quadratic: big_a,
            capacity,
        }
    }
}

/// Transmission network in PTDF form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Network {
    pub lines: usize,
    /// Row-major K×N distribution factors.
    pub ptdf: Vec<f64>,
    /// Thermal limits T_k (MWh/day).
    pub limits: Vec<f64>,
}

impl Network {
    pub fn empty() -> Self {
        Self {
            lines: 0,
            ptdf: Vec::new(),
            limits: Vec::new(),
        }
    }

    pub fn factor(&self, line: usize, node: usize, nodes: usize) -> f64 {
        self.ptdf[line * nodes + node]
    }

    /// Flow on `line` induced by the hub injections `y`.
    pub fn flow(&self, line: usize, y: &[f64]) -> f64 {
        let n = y.len();
        (0..n).map(|i| self.factor(line, i, n) * y[i]).sum()
    }
}

/// Full static description of a market.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketInstance {
    pub nodes: Vec<Node>,
    pub consumers: Vec<ConsumerGroup>,
    pub prosumers: Vec<ProsumerGroup>,
    pub units: Vec<GenUnit>,
    pub network: Network,
    /// Utility fixed cost to recover ($/day).
    pub fixed_cost_target: f64,
    /// Weight on the equity gap in the upper-level objective.
    pub equity_weight: f64,
}

/// Default equity weight relative to the fixed-cost target.
pub const DEFAULT_EQUITY_WEIGHT_FACTOR: f64 = 1e6;

impl MarketInstance {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn consumer_at(&self, node: usize) -> Option<&ConsumerGroup> {
        self.consumers.iter().find(|c| c.node == node)
    }

    pub fn prosumer_at(&self, node: usize) -> Option<&ProsumerGroup> {
        self.prosumers.iter().find(|p| p.node == node)
    }

    pub fn prosumer_at_mut(&mut self, node: usize) -> Option<&mut ProsumerGroup> {
        self.prosumers.iter_mut().find(|p| p.node == node)
    }

    /// Largest vertical demand intercept, the default upper bound on τ^b.
    pub fn max_willingness_to_pay(&self) -> f64 {
        self.nodes
            .iter()
            .map(|n| n.demand_vertical_intercept)
            .fold(0.0, f64::max)
    }

    pub fn validate(&self) -> ValidationReport {
        validate(self)
    }
}

/// Inverse demand of conventional consumers at `node` for aggregate demand `d`.
pub fn inverse_demand_consumer(node: &Node, d: f64) -> Result<f64, ModelError> {
    if d < 0.0 {
        return Err(ModelError::NegativeQuantity(d));
    }
    let slope = node.consumer_slope()?;
    Ok(node.demand_vertical_intercept - slope * d)
}

/// Inverse demand of prosumers at `node` for aggregate consumption `l`.
pub fn inverse_demand_prosumer(node: &Node, l: f64) -> Result<f64, ModelError> {
    if l < 0.0 {
        return Err(ModelError::NegativeQuantity(l));
    }
    let slope = node.prosumer_slope()?;
    Ok(node.demand_vertical_intercept - slope * l)
}

/// Area under a linear inverse demand `p0 - slope·m` from 0 to `q`.
pub fn gross_benefit(p0: f64, slope: f64, q: f64) -> f64 {
    p0 * q - 0.5 * slope * q * q
}

pub fn generation_cost(unit: &GenUnit, g: f64) -> f64 {
    unit.cost_linear * g + 0.5 * unit.cost_quadratic * g * g
}

pub fn marginal_generation_cost(unit: &GenUnit, g: f64) -> f64 {
    unit.cost_linear + unit.cost_quadratic * g
}

/// Quantity a group with inverse demand `p0 - slope·q` demands at `price`.
pub fn quantity_at_price(p0: f64, slope: f64, price: f64) -> f64 {
    ((p0 - price) / slope).max(0.0)
}

/// One failed instance invariant.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, field: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation {
            field: field.into(),
            message: message.into(),
        });
    }

    pub fn mentions(&self, field: &str) -> bool {
        self.violations.iter().any(|v| v.field.contains(field))
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for v in &self.violations {
            writeln!(f, "{}: {}", v.field, v.message)?;
        }
        Ok(())
    }
}

fn check_finite(report: &mut ValidationReport, field: String, value: f64) -> bool {
    if !value.is_finite() {
        report.push(field, format!("must be finite, got {value}"));
        return false;
    }
    true
}

/// Check every instance invariant and collect the violations.
pub fn validate(instance: &MarketInstance) -> ValidationReport {
    let mut report = ValidationReport::default();
    let n = instance.nodes.len();
    if n == 0 {
        report.push("nodes", "at least one node is required");
    }

    for (i, node) in instance.nodes.iter().enumerate() {
        let f = format!("nodes[{i}]");
        if node.id != i {
            report.push(format!("{f}.id"), format!("expected {i}, got {}", node.id));
        }
        let p0 = node.demand_vertical_intercept;
        let q0 = node.demand_horizontal_intercept;
        let alpha = node.prosumer_fraction;
        if check_finite(&mut report, format!("{f}.demand_vertical_intercept"), p0) && p0 <= 0.0 {
            report.push(format!("{f}.demand_vertical_intercept"), "must be > 0");
        }
        if check_finite(&mut report, format!("{f}.demand_horizontal_intercept"), q0) && q0 <= 0.0
        {
            report.push(format!("{f}.demand_horizontal_intercept"), "must be > 0");
        }
        if check_finite(&mut report, format!("{f}.prosumer_fraction"), alpha)
            && !(0.0..=1.0).contains(&alpha)
        {
            report.push(format!("{f}.prosumer_fraction"), "must lie in [0, 1]");
        }
    }

    for (j, c) in instance.consumers.iter().enumerate() {
        let f = format!("consumers[{j}]");
        if c.node >= n {
            report.push(format!("{f}.node"), format!("node {} does not exist", c.node));
            continue;
        }
        if check_finite(&mut report, format!("{f}.households"), c.households) && c.households < 0.0
        {
            report.push(format!("{f}.households"), "must be >= 0");
        }
        if check_finite(&mut report, format!("{f}.income"), c.income)
            && c.households > 0.0
            && c.income <= 0.0
        {
            report.push(format!("{f}.income"), "must be > 0 for a populated group");
        }
        if !instance.nodes[c.node].has_consumers() && c.households > 0.0 {
            report.push(
                format!("{f}.node"),
                format!("prosumer_fraction is 1 at node {} so consumers cannot exist", c.node),
            );
        }
    }

    for (j, p) in instance.prosumers.iter().enumerate() {
        let f = format!("prosumers[{j}]");
        if p.node >= n {
            report.push(format!("{f}.node"), format!("node {} does not exist", p.node));
            continue;
        }
        for (name, value) in [
            ("households", p.households),
            ("renewable_output", p.renewable_output),
            ("backup_capacity", p.backup_capacity),
            ("backup_cost_linear", p.backup_cost_linear),
            ("backup_cost_quadratic", p.backup_cost_quadratic),
            ("sunk_cost", p.sunk_cost),
        ] {
            if check_finite(&mut report, format!("{f}.{name}"), value) && value < 0.0 {
                report.push(format!("{f}.{name}"), "must be >= 0");
            }
        }
        if check_finite(&mut report, format!("{f}.income"), p.income)
            && p.households > 0.0
            && p.income <= 0.0
        {
            report.push(format!("{f}.income"), "must be > 0 for a populated group");
        }
        if p.backup_capacity > 0.0 && p.backup_cost_quadratic <= 0.0 {
            report.push(
                format!("{f}.backup_cost_quadratic"),
                "must be > 0 when backup capacity is positive",
            );
        }
        if !instance.nodes[p.node].has_prosumers() && p.households > 0.0 {
            report.push(
                format!("{f}.node"),
                format!("prosumer_fraction is 0 at node {} so prosumers cannot exist", p.node),
            );
        }
    }

    for (i, node) in instance.nodes.iter().enumerate() {
        let cons = instance.consumers.iter().filter(|c| c.node == i).count();
        let pros = instance.prosumers.iter().filter(|p| p.node == i).count();
        if node.has_consumers() && cons != 1 {
            report.push(
                format!("nodes[{i}].consumers"),
                format!("expected exactly one consumer group, found {cons}"),
            );
        }
        if node.has_prosumers() && pros != 1 {
            report.push(
                format!("nodes[{i}].prosumers"),
                format!("expected exactly one prosumer group, found {pros}"),
            );
        }
        let populated_con = node.has_consumers()
            && instance.consumer_at(i).is_some_and(|c| c.households > 0.0);
        let populated_pro = node.has_prosumers()
            && instance.prosumer_at(i).is_some_and(|p| p.households > 0.0);
        if !populated_con && !populated_pro {
            report.push(
                format!("nodes[{i}]"),
                "neither consumer nor prosumer group is populated",
            );
        }
    }

    for (j, u) in instance.units.iter().enumerate() {
        let f = format!("units[{j}]");
        if u.node >= n {
            report.push(format!("{f}.node"), format!("node {} does not exist", u.node));
        }
        if check_finite(&mut report, format!("{f}.cost_linear"), u.cost_linear)
            && u.cost_linear <= 0.0
        {
            report.push(format!("{f}.cost_linear"), "must be > 0");
        }
        if check_finite(&mut report, format!("{f}.cost_quadratic"), u.cost_quadratic)
            && u.cost_quadratic <= 0.0
        {
            report.push(format!("{f}.cost_quadratic"), "must be > 0");
        }
        if check_finite(&mut report, format!("{f}.capacity"), u.capacity) && u.capacity < 0.0 {
            report.push(format!("{f}.capacity"), "must be >= 0");
        }
    }

    let net = &instance.network;
    if net.ptdf.len() != net.lines * n {
        report.push(
            "network.ptdf",
            format!("expected {} entries (K×N), found {}", net.lines * n, net.ptdf.len()),
        );
    }
    if net.limits.len() != net.lines {
        report.push(
            "network.limits",
            format!("expected {} entries, found {}", net.lines, net.limits.len()),
        );
    }
    for (k, &t) in net.limits.iter().enumerate() {
        if check_finite(&mut report, format!("network.limits[{k}]"), t) && t < 0.0 {
            report.push(format!("network.limits[{k}]"), "must be >= 0");
        }
    }
    for (k, &v) in net.ptdf.iter().enumerate() {
        check_finite(&mut report, format!("network.ptdf[{k}]"), v);
    }

    if check_finite(&mut report, "fixed_cost_target".into(), instance.fixed_cost_target)
        && instance.fixed_cost_target < 0.0
    {
        report.push("fixed_cost_target", "must be >= 0");
    }
    if check_finite(&mut report, "equity_weight".into(), instance.equity_weight)
        && instance.equity_weight < 0.0
    {
        report.push("equity_weight", "must be >= 0");
    }
    report
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// One node, consumers only, demand 100 − 0.1·d, one unit (10, 0.05, cap).
    pub fn single_node(capacity: f64) -> MarketInstance {
        MarketInstance {
            nodes: vec![Node::new(0, 100.0, 1000.0, 0.0)],
            consumers: vec![ConsumerGroup {
                node: 0,
                households: 1000.0,
                income: 100.0,
            }],
            prosumers: vec![],
            units: vec![GenUnit::new(0, 0, 10.0, 0.05, capacity)],
            network: Network::empty(),
            fixed_cost_target: 1000.0,
            equity_weight: 1e9,
        }
    }

    /// Three nodes that all host both groups; a triangle network.
    pub fn three_node_mixed() -> MarketInstance {
        let nodes = vec![
            Node::new(0, 300.0, 500.0, 0.3),
            Node::new(1, 250.0, 600.0, 0.2),
            Node::new(2, 200.0, 500.0, 0.1),
        ];
        let consumers = (0..3)
            .map(|i| ConsumerGroup {
                node: i,
                households: 10000.0 + 1000.0 * i as f64,
                income: 200.0 - 30.0 * i as f64,
            })
            .collect();
        let prosumers = (0..3)
            .map(|i| ProsumerGroup {
                node: i,
                households: 2000.0,
                income: 400.0,
                renewable_output: 40.0 + 20.0 * i as f64,
                backup_capacity: 10.0,
                backup_cost_linear: 30.0,
                backup_cost_quadratic: 0.5,
                sunk_cost: 3.0,
            })
            .collect();
        let units = vec![
            GenUnit::new(0, 0, 50.0, 0.1, 200.0),
            GenUnit::new(1, 0, 30.0, 0.05, 300.0),
            GenUnit::new(2, 0, 15.0, 0.02, 400.0),
            GenUnit::new(2, 1, 20.0, 0.04, 300.0),
        ];
        let third = 1.0 / 3.0;
        let network = Network {
            lines: 3,
            ptdf: vec![
                third, -third, 0.0, //
                third, 2.0 * third, 0.0, //
                2.0 * third, third, 0.0,
            ],
            limits: vec![150.0, 200.0, 120.0],
        };
        MarketInstance {
            nodes,
            consumers,
            prosumers,
            units,
            network,
            fixed_cost_target: 20000.0,
            equity_weight: 2e10,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn consumer_inverse_demand_intercepts() {
        let node = Node::new(0, 20.0, 20.0, 0.25);
        assert_eq!(inverse_demand_consumer(&node, 0.0).unwrap(), 20.0);
        assert_relative_eq!(inverse_demand_consumer(&node, 15.0).unwrap(), 0.0, epsilon = 1e-12);
        let node = Node::new(0, 100.0, 50.0, 0.5);
        assert_relative_eq!(inverse_demand_consumer(&node, 12.5).unwrap(), 50.0);
    }

    #[test]
    fn prosumer_inverse_demand_intercepts() {
        let node = Node::new(0, 20.0, 20.0, 0.25);
        assert_eq!(inverse_demand_prosumer(&node, 0.0).unwrap(), 20.0);
        assert_relative_eq!(inverse_demand_prosumer(&node, 5.0).unwrap(), 0.0, epsilon = 1e-12);
        let node = Node::new(0, 80.0, 40.0, 0.5);
        assert_relative_eq!(inverse_demand_prosumer(&node, 10.0).unwrap(), 40.0);
    }

    #[test]
    fn degenerate_fractions_rejected() {
        let all_pro = Node::new(3, 20.0, 20.0, 1.0);
        assert_eq!(
            inverse_demand_consumer(&all_pro, 1.0),
            Err(ModelError::NoConsumerDemand { node: 3 })
        );
        let no_pro = Node::new(1, 20.0, 20.0, 0.0);
        assert_eq!(
            inverse_demand_prosumer(&no_pro, 1.0),
            Err(ModelError::NoProsumerDemand { node: 1 })
        );
    }

    #[test]
    fn gross_benefit_closed_form() {
        assert_eq!(gross_benefit(20.0, 1.0, 0.0), 0.0);
        assert_eq!(gross_benefit(20.0, 1.0, 10.0), 150.0);
        assert_eq!(gross_benefit(100.0, 2.0, 25.0), 1875.0);
    }

    #[test]
    fn generation_cost_values() {
        let u = GenUnit::new(0, 0, 10.0, 0.05, 1000.0);
        assert_eq!(generation_cost(&u, 0.0), 0.0);
        assert_relative_eq!(generation_cost(&u, 100.0), 1250.0);
        assert_relative_eq!(marginal_generation_cost(&u, 600.0), 40.0);
    }

    #[test]
    fn fixtures_validate() {
        assert!(single_node(1000.0).validate().is_valid());
        let r = three_node_mixed().validate();
        assert!(r.is_valid(), "{r}");
    }

    #[test]
    fn full_prosumer_node_with_consumers_is_flagged() {
        let mut inst = three_node_mixed();
        inst.nodes[1].prosumer_fraction = 1.0;
        let r = inst.validate();
        assert!(r.mentions("consumers[1].node"), "{r}");
    }

    #[test]
    fn negative_line_limit_is_flagged() {
        let mut inst = three_node_mixed();
        inst.network.limits[2] = -1.0;
        assert!(inst.validate().mentions("network.limits[2]"));
    }

    #[test]
    fn ptdf_shape_is_checked() {
        let mut inst = three_node_mixed();
        inst.network.ptdf.pop();
        assert!(inst.validate().mentions("network.ptdf"));
    }

    #[test]
    fn empty_node_is_flagged() {
        let mut inst = single_node(10.0);
        inst.consumers[0].households = 0.0;
        assert!(inst.validate().mentions("nodes[0]"));
    }

    proptest! {
        #[test]
        fn intercepts_hold_for_valid_nodes(p0 in 0.1f64..1e4, q0 in 0.1f64..1e4, alpha in 0.0f64..0.99) {
            let node = Node::new(0, p0, q0, alpha);
            prop_assert!((inverse_demand_consumer(&node, 0.0).unwrap() - p0).abs() < 1e-12);
            let p = inverse_demand_consumer(&node, (1.0 - alpha) * q0).unwrap();
            prop_assert!(p.abs() < 1e-9 * p0);
        }

        #[test]
        fn gross_benefit_is_concave(p0 in 0.1f64..1e3, slope in 1e-4f64..10.0, q1 in 0.0f64..1e3, q2 in 0.0f64..1e3) {
            let mid = gross_benefit(p0, slope, 0.5 * (q1 + q2));
            let avg = 0.5 * (gross_benefit(p0, slope, q1) + gross_benefit(p0, slope, q2));
            prop_assert!(mid >= avg - 1e-9 * (1.0 + avg.abs()));
        }

        #[test]
        fn generation_cost_convex_increasing(a in 0.01f64..100.0, big_a in 1e-4f64..1.0, g1 in 0.0f64..1e3, dg in 1e-3f64..1e2) {
            let u = GenUnit::new(0, 0, a, big_a, 1e4);
            let g2 = g1 + dg;
            prop_assert!(generation_cost(&u, g2) > generation_cost(&u, g1));
            let mid = generation_cost(&u, 0.5 * (g1 + g2));
            prop_assert!(mid <= 0.5 * (generation_cost(&u, g1) + generation_cost(&u, g2)) + 1e-9);
        }

        #[test]
        fn horizontal_aggregation(p0 in 1.0f64..1e3, q0 in 1.0f64..1e3, alpha in 0.01f64..0.99, t in 0.0f64..1.0) {
            let node = Node::new(0, p0, q0, alpha);
            let price = t * p0;
            let qc = quantity_at_price(p0, node.consumer_slope().unwrap(), price);
            let qp = quantity_at_price(p0, node.prosumer_slope().unwrap(), price);
            let agg = node.aggregate_quantity(price);
            prop_assert!((qc + qp - agg).abs() <= 1e-9 * q0);
        }
    }
}
