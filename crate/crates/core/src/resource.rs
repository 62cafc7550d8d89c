//! Resource cost tables and the resource-constraint penalty.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::space::{Architecture, GateVector};

#[derive(Debug, Error, PartialEq)]
pub enum ResourceError {
    #[error("no cost entry for layer {layer} slot {slot}")]
    MissingCost { layer: usize, slot: usize },
    #[error("probability pair ({0}, {1}) does not sum to 1")]
    Unnormalized(f64, f64),
    #[error("invalid cost table: {0}")]
    InvalidTable(String),
    #[error("invalid constraint: {0}")]
    InvalidConstraint(String),
}

/// Per-operation resource cost in abstract units. Identity costs nothing.
#[derive(Clone, Debug, PartialEq)]
pub struct CostTable {
    pub unit: String,
    pub fixed_overhead: f64,
    cost: BTreeMap<(usize, usize), f64>,
}

impl CostTable {
    pub fn new(unit: impl Into<String>, fixed_overhead: f64) -> Self {
        Self { unit: unit.into(), fixed_overhead, cost: BTreeMap::new() }
    }

    pub fn insert(&mut self, layer: usize, slot: usize, cost: f64) -> Result<(), ResourceError> {
        if !(cost.is_finite() && cost >= 0.0) {
            return Err(ResourceError::InvalidTable(format!("cost of {layer}.{slot} is {cost}")));
        }
        self.cost.insert((layer, slot), cost);
        Ok(())
    }

    pub fn get(&self, layer: usize, slot: usize) -> Result<f64, ResourceError> {
        self.cost.get(&(layer, slot)).copied().ok_or(ResourceError::MissingCost { layer, slot })
    }

    pub fn len(&self) -> usize {
        self.cost.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cost.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.cost.iter().map(|(&(l, s), &c)| (l, s, c))
    }

    /// `{"unit": "...", "_overhead": x, "layer.slot": cost, ...}`
    pub fn to_json(&self) -> Value {
        let mut map = Map::new();
        map.insert("unit".into(), Value::from(self.unit.clone()));
        map.insert("_overhead".into(), Value::from(self.fixed_overhead));
        for (&(l, s), &c) in &self.cost {
            map.insert(format!("{l}.{s}"), Value::from(c));
        }
        Value::Object(map)
    }

    pub fn from_json(value: &Value) -> Result<Self, ResourceError> {
        let map = value.as_object().ok_or_else(|| ResourceError::InvalidTable("expected a JSON object".into()))?;
        let unit = match map.get("unit") {
            Some(Value::String(s)) => s.clone(),
            Some(_) => return Err(ResourceError::InvalidTable("`unit` must be a string".into())),
            None => String::new(),
        };
        let overhead = match map.get("_overhead") {
            Some(v) => v.as_f64().ok_or_else(|| ResourceError::InvalidTable("`_overhead` must be a number".into()))?,
            None => 0.0,
        };
        if !(overhead.is_finite() && overhead >= 0.0) {
            return Err(ResourceError::InvalidTable(format!("overhead {overhead} is invalid")));
        }
        let mut table = CostTable::new(unit, overhead);
        for (key, v) in map {
            if key == "unit" || key == "_overhead" {
                continue;
            }
            let (l, s) = key
                .split_once('.')
                .and_then(|(l, s)| Some((l.parse::<usize>().ok()?, s.parse::<usize>().ok()?)))
                .ok_or_else(|| ResourceError::InvalidTable(format!("bad key `{key}`")))?;
            let c = v.as_f64().ok_or_else(|| ResourceError::InvalidTable(format!("cost of `{key}` is not a number")))?;
            table.insert(l, s, c)?;
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self, ResourceError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ResourceError::InvalidTable(format!("{}: {e}", path.display())))?;
        let value: Value =
            serde_json::from_str(&text).map_err(|e| ResourceError::InvalidTable(format!("{}: {e}", path.display())))?;
        Self::from_json(&value)
    }
}

/// Cost of one layer's selection: the sum of its branch costs.
pub fn layer_cost(gates: &GateVector, table: &CostTable) -> Result<f64, ResourceError> {
    gates.selected.iter().map(|&s| table.get(gates.layer_index, s)).sum()
}

pub fn architecture_cost(arch: &Architecture, table: &CostTable) -> Result<f64, ResourceError> {
    let mut total = table.fixed_overhead;
    for g in &arch.layers {
        total += layer_cost(g, table)?;
    }
    Ok(total)
}

/// `p_a * C(g_a) + p_b * C(g_b)` for one layer.
pub fn expected_pair_cost(
    config_a: &GateVector,
    config_b: &GateVector,
    p_a: f64,
    p_b: f64,
    table: &CostTable,
) -> Result<f64, ResourceError> {
    if (p_a + p_b - 1.0).abs() > 1e-9 {
        return Err(ResourceError::Unnormalized(p_a, p_b));
    }
    Ok(p_a * layer_cost(config_a, table)? + p_b * layer_cost(config_b, table)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintConfig {
    /// Target demand, in cost-table units.
    #[serde(default = "defaults::tau")]
    pub tau: f64,
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    #[serde(default = "defaults::beta")]
    pub beta: f64,
    /// Hard cutoff used when sampling the front; `None` means `tau`.
    #[serde(default)]
    pub upper_bound: Option<f64>,
    /// Relative width of the beyond-boundary band used against the edging effect.
    #[serde(default = "defaults::edging_margin")]
    pub edging_margin: f64,
    /// Penalize only demand above `tau`.
    #[serde(default)]
    pub hinge: bool,
}

mod defaults {
    pub fn tau() -> f64 {
        300.0
    }
    pub fn alpha() -> f64 {
        1e-5
    }
    pub fn beta() -> f64 {
        2.0
    }
    pub fn edging_margin() -> f64 {
        0.1
    }
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        Self {
            tau: defaults::tau(),
            alpha: defaults::alpha(),
            beta: defaults::beta(),
            upper_bound: None,
            edging_margin: defaults::edging_margin(),
            hinge: false,
        }
    }
}

impl ConstraintConfig {
    pub fn validate(&self) -> Result<(), ResourceError> {
        if !self.tau.is_finite() || !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(ResourceError::InvalidConstraint("tau and alpha must be finite, alpha >= 0".into()));
        }
        if !(self.beta.is_finite() && self.beta >= 1.0) {
            return Err(ResourceError::InvalidConstraint(format!("beta must be >= 1, got {}", self.beta)));
        }
        if !(self.edging_margin.is_finite() && self.edging_margin >= 0.0) {
            return Err(ResourceError::InvalidConstraint("edging margin must be >= 0".into()));
        }
        if let Some(u) = self.upper_bound {
            if !u.is_finite() {
                return Err(ResourceError::InvalidConstraint("upper bound must be finite".into()));
            }
        }
        Ok(())
    }

    pub fn upper(&self) -> f64 {
        self.upper_bound.unwrap_or(self.tau)
    }

    fn effective(&self, r: f64) -> f64 {
        if self.hinge {
            r.max(0.0)
        } else {
            r
        }
    }
}

/// `alpha * |R|^beta`; equals `alpha * R^beta` for even `beta`.
pub fn penalty(r: f64, cfg: &ConstraintConfig) -> f64 {
    let r = cfg.effective(r);
    cfg.alpha * r.abs().powf(cfg.beta)
}

pub fn penalty_gradient_wrt_r(r: f64, cfg: &ConstraintConfig) -> f64 {
    let r = cfg.effective(r);
    if r == 0.0 {
        return 0.0;
    }
    cfg.alpha * cfg.beta * r.abs().powf(cfg.beta - 1.0) * r.signum()
}
