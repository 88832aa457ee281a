//! JSON instance documents and unit conversion.
//!
//! An instance document carries the market data plus a `units_of_measure`
//! block. Values are converted to MWh, $ and days on load; unknown keys are
//! rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{calibrate, CalibrationError, CalibrationSpec};
use crate::model::{
    ConsumerGroup, GenUnit, MarketInstance, Network, Node, ProsumerGroup, ValidationReport,
    DEFAULT_EQUITY_WEIGHT_FACTOR,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed document: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported unit {0:?}")]
    Unit(String),
    #[error("invalid instance:\n{0}")]
    Invalid(ValidationReport),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
}

/// Units the numeric fields of a document are expressed in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnitsOfMeasure {
    pub energy: String,
    pub money: String,
    pub period: String,
}

impl Default for UnitsOfMeasure {
    fn default() -> Self {
        Self {
            energy: "MWh".into(),
            money: "$".into(),
            period: "day".into(),
        }
    }
}

impl UnitsOfMeasure {
    /// Multipliers converting (energy, money) to (MWh, $).
    fn factors(&self) -> Result<(f64, f64), ConfigError> {
        let energy = match self.energy.as_str() {
            "MWh" => 1.0,
            "kWh" => 1e-3,
            "GWh" => 1e3,
            other => return Err(ConfigError::Unit(other.into())),
        };
        let money = match self.money.as_str() {
            "$" | "USD" => 1.0,
            "k$" | "kUSD" => 1e3,
            other => return Err(ConfigError::Unit(other.into())),
        };
        if self.period != "day" {
            return Err(ConfigError::Unit(self.period.clone()));
        }
        Ok((energy, money))
    }
}

/// On-disk form of a [`MarketInstance`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceDocument {
    #[serde(default)]
    pub units_of_measure: UnitsOfMeasure,
    pub nodes: Vec<Node>,
    pub consumers: Vec<ConsumerGroup>,
    pub prosumers: Vec<ProsumerGroup>,
    pub units: Vec<GenUnit>,
    pub network: Network,
    pub fixed_cost_target: f64,
    #[serde(default)]
    pub equity_weight: Option<f64>,
}

impl InstanceDocument {
    /// Convert to canonical units. Does not validate.
    pub fn into_instance(self) -> Result<MarketInstance, ConfigError> {
        let (e, m) = self.units_of_measure.factors()?;
        let price = m / e;
        let curvature = m / (e * e);
        let nodes = self
            .nodes
            .into_iter()
            .map(|mut n| {
                n.demand_vertical_intercept *= price;
                n.demand_horizontal_intercept *= e;
                n
            })
            .collect();
        let consumers = self
            .consumers
            .into_iter()
            .map(|mut c| {
                c.income *= m;
                c
            })
            .collect();
        let prosumers = self
            .prosumers
            .into_iter()
            .map(|mut p| {
                p.income *= m;
                p.renewable_output *= e;
                p.backup_capacity *= e;
                p.backup_cost_linear *= price;
                p.backup_cost_quadratic *= curvature;
                p.sunk_cost *= m;
                p
            })
            .collect();
        let units = self
            .units
            .into_iter()
            .map(|mut u| {
                u.cost_linear *= price;
                u.cost_quadratic *= curvature;
                u.capacity *= e;
                u
            })
            .collect();
        let mut network = self.network;
        network.limits.iter_mut().for_each(|t| *t *= e);
        let fixed_cost_target = self.fixed_cost_target * m;
        let equity_weight = self
            .equity_weight
            .unwrap_or(DEFAULT_EQUITY_WEIGHT_FACTOR * fixed_cost_target);
        Ok(MarketInstance {
            nodes,
            consumers,
            prosumers,
            units,
            network,
            fixed_cost_target,
            equity_weight,
        })
    }

    pub fn from_instance(instance: &MarketInstance) -> Self {
        Self {
            units_of_measure: UnitsOfMeasure::default(),
            nodes: instance.nodes.clone(),
            consumers: instance.consumers.clone(),
            prosumers: instance.prosumers.clone(),
            units: instance.units.clone(),
            network: instance.network.clone(),
            fixed_cost_target: instance.fixed_cost_target,
            equity_weight: Some(instance.equity_weight),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CalibrationDocument {
    calibration: CalibrationSpec,
}

/// Parse an instance document, or a calibration document (a single
/// top-level `calibration` key) which is calibrated into an instance.
/// The result is validated.
pub fn parse_instance(text: &str) -> Result<MarketInstance, ConfigError> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    let instance = if value.get("calibration").is_some() {
        let doc: CalibrationDocument = serde_json::from_value(value)?;
        calibrate(&doc.calibration)?
    } else {
        let doc: InstanceDocument = serde_json::from_value(value)?;
        doc.into_instance()?
    };
    let report = instance.validate();
    if !report.is_valid() {
        return Err(ConfigError::Invalid(report));
    }
    Ok(instance)
}

pub fn load_instance(path: &Path) -> Result<MarketInstance, ConfigError> {
    let text = read(path)?;
    parse_instance(&text)
}

pub(crate) fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn instance_to_json(instance: &MarketInstance) -> String {
    serde_json::to_string_pretty(&InstanceDocument::from_instance(instance))
        .expect("instance serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::three_node_mixed;

    #[test]
    fn round_trip_through_json() {
        let inst = three_node_mixed();
        let text = instance_to_json(&inst);
        let back = parse_instance(&text).unwrap();
        assert_eq!(inst, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let inst = three_node_mixed();
        let mut value: serde_json::Value =
            serde_json::from_str(&instance_to_json(&inst)).unwrap();
        value["surprise"] = serde_json::json!(1);
        let err = parse_instance(&value.to_string()).unwrap_err();
        assert!(matches!(err, ConfigError::Parse(_)), "{err}");

        let mut value: serde_json::Value =
            serde_json::from_str(&instance_to_json(&inst)).unwrap();
        value["nodes"][0]["colour"] = serde_json::json!("red");
        assert!(parse_instance(&value.to_string()).is_err());
    }

    #[test]
    fn kwh_documents_are_converted() {
        let inst = three_node_mixed();
        let mut doc = InstanceDocument::from_instance(&inst);
        doc.units_of_measure.energy = "kWh".into();
        for n in &mut doc.nodes {
            n.demand_vertical_intercept /= 1000.0;
            n.demand_horizontal_intercept *= 1000.0;
        }
        for u in &mut doc.units {
            u.cost_linear /= 1000.0;
            u.cost_quadratic /= 1e6;
            u.capacity *= 1000.0;
        }
        for p in &mut doc.prosumers {
            p.renewable_output *= 1000.0;
            p.backup_capacity *= 1000.0;
            p.backup_cost_linear /= 1000.0;
            p.backup_cost_quadratic /= 1e6;
        }
        doc.network.limits.iter_mut().for_each(|t| *t *= 1000.0);
        let back = doc.into_instance().unwrap();
        for (a, b) in back.units.iter().zip(&inst.units) {
            assert!((a.cost_quadratic - b.cost_quadratic).abs() < 1e-12);
            assert!((a.capacity - b.capacity).abs() < 1e-9);
        }
        assert!((back.nodes[0].demand_vertical_intercept - 300.0).abs() < 1e-9);
        assert!((back.network.limits[2] - 120.0).abs() < 1e-9);
    }

    #[test]
    fn bad_unit_rejected() {
        let mut doc = InstanceDocument::from_instance(&three_node_mixed());
        doc.units_of_measure.period = "hour".into();
        assert!(matches!(doc.into_instance(), Err(ConfigError::Unit(_))));
    }

    #[test]
    fn invalid_instance_reports_violations() {
        let mut inst = three_node_mixed();
        inst.network.limits[0] = -5.0;
        let err = parse_instance(&instance_to_json(&inst)).unwrap_err();
        match err {
            ConfigError::Invalid(r) => assert!(r.mentions("network.limits[0]")),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn missing_equity_weight_uses_default() {
        let inst = three_node_mixed();
        let mut value: serde_json::Value =
            serde_json::from_str(&instance_to_json(&inst)).unwrap();
        value.as_object_mut().unwrap().remove("equity_weight");
        let back = parse_instance(&value.to_string()).unwrap();
        assert_eq!(back.equity_weight, 1e6 * inst.fixed_cost_target);
    }
}
