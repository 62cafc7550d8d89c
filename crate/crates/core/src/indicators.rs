//! Fitness indicators: one learnable logit per active operation, whose sigmoid
//! is the Bernoulli probability of that operation's gate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Adam;
use crate::resource::{layer_cost, penalty, penalty_gradient_wrt_r, ConstraintConfig, CostTable};
use crate::seed::Rng;
use crate::space::{sample_gates, Architecture, GateVector, LayerRole, SubsetLayer, SubsetState};
use crate::supernet::{Batch, LayerSignal, SharedWeights};

pub const DEFAULT_PRUNE_THRESHOLD: f64 = -2.0;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitnessIndicators {
    theta: BTreeMap<(usize, usize), f64>,
}

impl FitnessIndicators {
    /// Zero logit for every active operation of the subset.
    pub fn new(subset: &SubsetState) -> Self {
        Self { theta: subset.active_ops().map(|k| (k, 0.0)).collect() }
    }

    pub fn get(&self, layer: usize, slot: usize) -> Option<f64> {
        self.theta.get(&(layer, slot)).copied()
    }

    pub fn set(&mut self, layer: usize, slot: usize, value: f64) {
        self.theta.insert((layer, slot), value);
    }

    pub fn remove(&mut self, layer: usize, slot: usize) -> Option<f64> {
        self.theta.remove(&(layer, slot))
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), f64)> + '_ {
        self.theta.iter().map(|(&k, &v)| (k, v))
    }

    /// Logits of `slots` in layer `layer`; missing entries read as 0.
    pub fn layer_thetas(&self, layer: usize, slots: &[usize]) -> Vec<f64> {
        slots.iter().map(|&s| self.get(layer, s).unwrap_or(0.0)).collect()
    }

    /// JSON snapshot keyed `"layer.slot"`.
    pub fn to_json(&self) -> serde_json::Value {
        let map: serde_json::Map<String, serde_json::Value> =
            self.theta.iter().map(|((l, s), v)| (format!("{l}.{s}"), (*v).into())).collect();
        serde_json::Value::Object(map)
    }
}

pub fn op_probability(theta: f64) -> f64 {
    if theta >= 0.0 {
        1.0 / (1.0 + (-theta).exp())
    } else {
        let e = theta.exp();
        e / (1.0 + e)
    }
}

/// Joint probability of a layer configuration: `prod g p + (1 - g)(1 - p)`
/// over `slots`. The identity gate is fixed and contributes 1.
pub fn config_probability(gates: &GateVector, slots: &[usize], thetas: &[f64]) -> f64 {
    slots
        .iter()
        .zip(thetas)
        .map(|(&s, &t)| if gates.is_selected(s) { op_probability(t) } else { op_probability(-t) })
        .product()
}

/// `d p_hat / d theta_n = p_hat * (g_n - p_n)` for every slot.
pub fn config_probability_gradient(gates: &GateVector, slots: &[usize], thetas: &[f64]) -> Vec<f64> {
    let p_hat = config_probability(gates, slots, thetas);
    slots
        .iter()
        .zip(thetas)
        .map(|(&s, &t)| p_hat * (f64::from(u8::from(gates.is_selected(s))) - op_probability(t)))
        .collect()
}

/// Proportional renormalization of two probabilities to sum 1.
pub fn rescale_pair(p_a: f64, p_b: f64) -> Result<(f64, f64)> {
    let total = p_a + p_b;
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::NonFinite("rescale of a zero-probability pair"));
    }
    Ok((p_a / total, p_b / total))
}

/// Derivative of the rescaled `p_tilde_a` given derivatives of both raw
/// probabilities; `d p_tilde_b = -d p_tilde_a`.
pub fn rescale_pair_gradient(p_a: f64, p_b: f64, dp_a: &[f64], dp_b: &[f64]) -> Vec<f64> {
    let denom = (p_a + p_b) * (p_a + p_b);
    dp_a.iter().zip(dp_b).map(|(da, db)| (da * p_b - p_a * db) / denom).collect()
}

pub fn sample_config(indicators: &FitnessIndicators, layer: &SubsetLayer, rng: &mut Rng) -> GateVector {
    let slots = layer.active_slots();
    let probs: Vec<f64> = indicators.layer_thetas(layer.layer_index, &slots).into_iter().map(op_probability).collect();
    let selected = sample_gates(&slots, &probs, !layer.has_identity(), rng);
    GateVector::new(layer.layer_index, layer.has_identity(), selected)
}

pub fn sample_architecture(indicators: &FitnessIndicators, subset: &SubsetState, rng: &mut Rng) -> Architecture {
    Architecture { layers: subset.layers.iter().map(|l| sample_config(indicators, l, rng)).collect() }
}

/// Both sampled configurations of one layer and their probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigPair {
    pub a: GateVector,
    pub b: GateVector,
    pub p_hat: (f64, f64),
    pub p_tilde: (f64, f64),
    /// `d p_tilde_a / d theta_n` over the layer's active slots.
    pub dp_tilde_a: Vec<f64>,
    pub slots: Vec<usize>,
}

impl ConfigPair {
    pub fn new(indicators: &FitnessIndicators, layer: &SubsetLayer, a: GateVector, b: GateVector) -> Result<Self> {
        let slots = layer.active_slots();
        let thetas = indicators.layer_thetas(layer.layer_index, &slots);
        let p_a = config_probability(&a, &slots, &thetas);
        let p_b = config_probability(&b, &slots, &thetas);
        let p_tilde = rescale_pair(p_a, p_b)?;
        let dp_tilde_a = if a == b {
            vec![0.0; slots.len()]
        } else {
            let da = config_probability_gradient(&a, &slots, &thetas);
            let db = config_probability_gradient(&b, &slots, &thetas);
            rescale_pair_gradient(p_a, p_b, &da, &db)
        };
        Ok(Self { a, b, p_hat: (p_a, p_b), p_tilde, dp_tilde_a, slots })
    }
}

pub fn config_pairs(
    indicators: &FitnessIndicators,
    subset: &SubsetState,
    arch_a: &Architecture,
    arch_b: &Architecture,
) -> Result<Vec<ConfigPair>> {
    subset
        .layers
        .iter()
        .zip(arch_a.layers.iter().zip(&arch_b.layers))
        .map(|(layer, (a, b))| ConfigPair::new(indicators, layer, a.clone(), b.clone()))
        .collect()
}

/// Expected resource excess `R = overhead + sum_l (p_a C_a + p_b C_b) - tau`.
pub fn expected_excess(pairs: &[ConfigPair], costs: &CostTable, constraint: &ConstraintConfig) -> Result<f64> {
    let mut total = costs.fixed_overhead - constraint.tau;
    for p in pairs {
        total += p.p_tilde.0 * layer_cost(&p.a, costs)? + p.p_tilde.1 * layer_cost(&p.b, costs)?;
    }
    Ok(total)
}

/// Regularization term of the pair objective as a function of the logits.
pub fn pair_penalty(pairs: &[ConfigPair], costs: &CostTable, constraint: &ConstraintConfig) -> Result<f64> {
    Ok(penalty(expected_excess(pairs, costs, constraint)?, constraint))
}

/// Simulated gradient of the regularized validation loss for every logit.
/// `signals[l]` holds the two inner products of layer `l`; pass zeros to keep
/// only the penalty path.
pub fn simulated_gradient(
    pairs: &[ConfigPair],
    signals: &[LayerSignal],
    costs: &CostTable,
    constraint: &ConstraintConfig,
) -> Result<BTreeMap<(usize, usize), f64>> {
    let r = expected_excess(pairs, costs, constraint)?;
    let dpen = penalty_gradient_wrt_r(r, constraint);
    let mut grad = BTreeMap::new();
    for (pair, sig) in pairs.iter().zip(signals) {
        let dc = layer_cost(&pair.a, costs)? - layer_cost(&pair.b, costs)?;
        let ds = sig.s_a - sig.s_b;
        for (&slot, &d) in pair.slots.iter().zip(&pair.dp_tilde_a) {
            let g = d * ds + dpen * d * dc;
            if !g.is_finite() {
                return Err(Error::NonFinite("indicator gradient"));
            }
            grad.insert((pair.a.layer_index, slot), g);
        }
    }
    Ok(grad)
}

/// Exhaustive form of the cross-entropy gradient on one layer:
/// `sum_g dP(g)/dtheta_n * score(g)` over every valid configuration, where
/// `P` is the sampling law (conditioned on nonempty for reduction layers).
pub fn exhaustive_gradient(layer: &SubsetLayer, thetas: &[f64], score: impl Fn(&GateVector) -> f64) -> Vec<f64> {
    let slots = layer.active_slots();
    let k = slots.len();
    let reduction = !layer.has_identity();
    let configs: Vec<GateVector> = (0u64..1 << k)
        .filter(|m| !(reduction && *m == 0))
        .map(|m| {
            let sel = (0..k).filter(|i| m >> i & 1 == 1).map(|i| slots[i]).collect();
            GateVector::new(layer.layer_index, layer.has_identity(), sel)
        })
        .collect();
    let p: Vec<f64> = configs.iter().map(|g| config_probability(g, &slots, thetas)).collect();
    let dp: Vec<Vec<f64>> = configs.iter().map(|g| config_probability_gradient(g, &slots, thetas)).collect();
    let z: f64 = p.iter().sum();
    let dz: Vec<f64> = (0..k).map(|n| dp.iter().map(|d| d[n]).sum()).collect();
    let scores: Vec<f64> = configs.iter().map(&score).collect();
    (0..k)
        .map(|n| {
            configs
                .iter()
                .enumerate()
                .map(|(i, _)| (dp[i][n] * z - p[i] * dz[n]) / (z * z) * scores[i])
                .sum()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndicatorStepReport {
    pub loss: f64,
    pub excess: f64,
    pub penalty: f64,
}

/// Adam step on the logits from a precomputed gradient.
pub fn apply_gradient(
    indicators: &mut FitnessIndicators,
    grad: &BTreeMap<(usize, usize), f64>,
    optimizer: &mut Adam<(usize, usize)>,
) -> Result<()> {
    for (key, g) in grad {
        if let Some(t) = indicators.theta.get_mut(key) {
            let mut v = [*t];
            optimizer.step(key, &mut v, &[*g])?;
            *t = v[0];
        }
    }
    Ok(())
}

/// One simulated-gradient update of the logits on a validation batch. The
/// weights are read only.
#[allow(clippy::too_many_arguments)]
pub fn indicator_update_step(
    indicators: &mut FitnessIndicators,
    weights: &SharedWeights,
    subset: &SubsetState,
    batch: &Batch,
    costs: &CostTable,
    constraint: &ConstraintConfig,
    optimizer: &mut Adam<(usize, usize)>,
    rng: &mut Rng,
) -> Result<IndicatorStepReport> {
    let arch_a = sample_architecture(indicators, subset, rng);
    let arch_b = sample_architecture(indicators, subset, rng);
    let (loss, signals) = weights.layer_signals(&arch_a, &arch_b, batch)?;
    let pairs = config_pairs(indicators, subset, &arch_a, &arch_b)?;
    let grad = simulated_gradient(&pairs, &signals, costs, constraint)?;
    apply_gradient(indicators, &grad, optimizer)?;
    let excess = expected_excess(&pairs, costs, constraint)?;
    Ok(IndicatorStepReport { loss, excess, penalty: penalty(excess, constraint) })
}

/// Deactivates operations whose logit fell below `threshold`. With `lock`,
/// inherited operations are exempt. A reduction layer always keeps its
/// highest-logit operation. Returns the dropped `(layer, slot)` pairs.
pub fn prune(
    indicators: &mut FitnessIndicators,
    subset: &mut SubsetState,
    threshold: f64,
    lock: bool,
) -> Vec<(usize, usize)> {
    let mut dropped = Vec::new();
    for li in 0..subset.layers.len() {
        let layer = &subset.layers[li];
        let l = layer.layer_index;
        let mut candidates: Vec<(f64, usize)> = layer
            .entries
            .iter()
            .filter(|e| e.active && !(lock && e.origin == crate::space::Origin::Inherited))
            .filter_map(|e| indicators.get(l, e.slot).filter(|t| *t < threshold).map(|t| (t, e.slot)))
            .collect();
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut remaining = layer.active_count();
        let reduction = layer.role == LayerRole::Reduction;
        for (_, slot) in candidates {
            if reduction && remaining <= 1 {
                break;
            }
            subset.deactivate(li, slot);
            indicators.remove(l, slot);
            remaining -= 1;
            dropped.push((l, slot));
        }
    }
    dropped
}
