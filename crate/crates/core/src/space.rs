//! Operation pool, search-space subsets, architectures and the combinatorics
//! over them.
//!
//! A layer's identity path is structural: it lives on [`LayerSpec`] (normal
//! layers only) and never appears as a pool entry, so it cannot be pruned,
//! counted, traversed or aggregated.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use num_bigint::BigUint;
use num_traits::{One, Zero};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::{derive_seed, rng_from_seed, Rng};

#[derive(Debug, Error, PartialEq)]
pub enum SpaceError {
    #[error("layer {0} declares no operations")]
    EmptyLayer(usize),
    #[error("layer {0} has no untraversed operations left")]
    Exhausted(usize),
    #[error("subset capacity must be at least 1")]
    ZeroCapacity,
    #[error("operation parameter `{name}` of layer {layer} is not finite")]
    NonFiniteParam { layer: usize, name: String },
    #[error("architecture has {got} layers, subset has {expected}")]
    LayerCount { expected: usize, got: usize },
    #[error("layer {layer}: slot {slot} is not an active operation")]
    InactiveSlot { layer: usize, slot: usize },
    #[error("reduction layer {0} selects no operation")]
    EmptyReduction(usize),
    #[error("layer {0}: gate vector has wrong identity flag")]
    IdentityMismatch(usize),
    #[error("no architectures to aggregate")]
    EmptyAggregation,
    #[error("inconsistent pool: {0}")]
    InvalidPool(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerRole {
    Normal,
    Reduction,
}

impl LayerRole {
    pub fn has_identity(self) -> bool {
        self == LayerRole::Normal
    }
}

/// An operation as declared by the user, before it is placed in a pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperationDecl {
    pub kind: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default = "default_true")]
    pub trainable: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDecl {
    pub role: LayerRole,
    pub ops: Vec<OperationDecl>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperationDescriptor {
    pub layer_index: usize,
    pub slot_index: usize,
    pub kind: String,
    pub params: BTreeMap<String, f64>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub layer_index: usize,
    pub role: LayerRole,
    pub has_identity: bool,
    pub pool: Vec<OperationDescriptor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpacePool {
    pub layers: Vec<LayerSpec>,
    pub shuffle_seed: u64,
}

impl SearchSpacePool {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn pool_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.pool.len()).collect()
    }

    pub fn roles(&self) -> Vec<LayerRole> {
        self.layers.iter().map(|l| l.role).collect()
    }

    pub fn descriptor(&self, layer: usize, slot: usize) -> Option<&OperationDescriptor> {
        self.layers.get(layer)?.pool.get(slot)
    }

    /// Checks the structural invariants of a deserialized pool.
    pub fn validate(&self) -> Result<(), SpaceError> {
        if self.layers.is_empty() {
            return Err(SpaceError::InvalidPool("pool has no layers".into()));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.layer_index != l {
                return Err(SpaceError::InvalidPool(format!("layer {l} carries index {}", layer.layer_index)));
            }
            if layer.has_identity != layer.role.has_identity() {
                return Err(SpaceError::InvalidPool(format!("layer {l}: identity flag disagrees with role")));
            }
            if layer.pool.is_empty() {
                return Err(SpaceError::EmptyLayer(l));
            }
            for (s, op) in layer.pool.iter().enumerate() {
                if op.layer_index != l || op.slot_index != s {
                    return Err(SpaceError::InvalidPool(format!("layer {l} slot {s} mislabelled")));
                }
                if let Some((name, _)) = op.params.iter().find(|(_, v)| !v.is_finite()) {
                    return Err(SpaceError::NonFiniteParam { layer: l, name: name.clone() });
                }
            }
        }
        Ok(())
    }
}

/// Builds a pool whose per-layer order is an independent seeded permutation of
/// the declared operations. Slot indices refer to positions after shuffling.
pub fn shuffle_pool(declared: &[LayerDecl], seed: u64) -> Result<SearchSpacePool, SpaceError> {
    if declared.is_empty() {
        return Err(SpaceError::InvalidPool("pool has no layers".into()));
    }
    let mut layers = Vec::with_capacity(declared.len());
    for (l, decl) in declared.iter().enumerate() {
        if decl.ops.is_empty() {
            return Err(SpaceError::EmptyLayer(l));
        }
        for op in &decl.ops {
            if let Some((name, _)) = op.params.iter().find(|(_, v)| !v.is_finite()) {
                return Err(SpaceError::NonFiniteParam { layer: l, name: name.clone() });
            }
        }
        let mut order: Vec<usize> = (0..decl.ops.len()).collect();
        let mut rng = rng_from_seed(derive_seed(seed, &[l as u64]));
        order.shuffle(&mut rng);
        let pool = order
            .into_iter()
            .enumerate()
            .map(|(slot, i)| {
                let op = &decl.ops[i];
                OperationDescriptor {
                    layer_index: l,
                    slot_index: slot,
                    kind: op.kind.clone(),
                    params: op.params.clone(),
                    trainable: op.trainable,
                }
            })
            .collect();
        layers.push(LayerSpec { layer_index: l, role: decl.role, has_identity: decl.role.has_identity(), pool });
    }
    Ok(SearchSpacePool { layers, shuffle_seed: seed })
}

/// Every `(layer, slot)` that has ever been part of a subset.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraversalLedger {
    traversed: BTreeSet<(usize, usize)>,
}

impl TraversalLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn contains(&self, layer: usize, slot: usize) -> bool {
        self.traversed.contains(&(layer, slot))
    }

    pub fn insert(&mut self, layer: usize, slot: usize) -> bool {
        self.traversed.insert((layer, slot))
    }

    pub fn len(&self) -> usize {
        self.traversed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traversed.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(usize, usize)> {
        self.traversed.iter()
    }

    pub fn untraversed(&self, pool: &SearchSpacePool, layer: usize) -> Vec<usize> {
        (0..pool.layers[layer].pool.len()).filter(|&s| !self.contains(layer, s)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Fresh,
    Inherited,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetEntry {
    pub slot: usize,
    pub origin: Origin,
    pub active: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetLayer {
    pub layer_index: usize,
    pub role: LayerRole,
    /// Sorted by slot.
    pub entries: Vec<SubsetEntry>,
}

impl SubsetLayer {
    pub fn has_identity(&self) -> bool {
        self.role.has_identity()
    }

    pub fn active_slots(&self) -> Vec<usize> {
        self.entries.iter().filter(|e| e.active).map(|e| e.slot).collect()
    }

    pub fn active_count(&self) -> usize {
        self.entries.iter().filter(|e| e.active).count()
    }

    pub fn entry(&self, slot: usize) -> Option<&SubsetEntry> {
        self.entries.iter().find(|e| e.slot == slot)
    }

    pub fn is_active(&self, slot: usize) -> bool {
        self.entry(slot).is_some_and(|e| e.active)
    }

    /// Number of valid gate configurations over the active operations.
    pub fn config_count(&self) -> u128 {
        let n = self.active_count() as u32;
        let all = 1u128 << n;
        if self.has_identity() {
            all
        } else {
            all - 1
        }
    }
}

/// The working subset of one round.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetState {
    pub capacity: usize,
    pub layers: Vec<SubsetLayer>,
    /// Some layer could not be refilled to capacity because its pool is used up.
    pub shortage: bool,
}

impl SubsetState {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Number of valid architectures, saturating at `u128::MAX`.
    pub fn architecture_count(&self) -> u128 {
        self.layers.iter().fold(1u128, |acc, l| acc.saturating_mul(l.config_count()))
    }

    pub fn active_ops(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.entries.iter().filter(|e| e.active).map(move |e| (l.layer_index, e.slot)))
    }

    pub fn deactivate(&mut self, layer: usize, slot: usize) {
        if let Some(e) = self.layers[layer].entries.iter_mut().find(|e| e.slot == slot) {
            e.active = false;
        }
    }
}

/// Per-layer selection: the set of active slots whose gate is 1. The identity
/// gate of a normal layer is implicit and always 1.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GateVector {
    pub layer_index: usize,
    pub identity: bool,
    pub selected: Vec<usize>,
}

impl GateVector {
    pub fn new(layer_index: usize, identity: bool, mut selected: Vec<usize>) -> Self {
        selected.sort_unstable();
        selected.dedup();
        Self { layer_index, identity, selected }
    }

    pub fn is_selected(&self, slot: usize) -> bool {
        self.selected.binary_search(&slot).is_ok()
    }

    /// Bit view `g_n` over the given active slots.
    pub fn gates_over(&self, active: &[usize]) -> Vec<bool> {
        active.iter().map(|&s| self.is_selected(s)).collect()
    }

    /// Number of branches averaged by the layer, identity included.
    pub fn branch_count(&self) -> usize {
        self.selected.len() + usize::from(self.identity)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Architecture {
    pub layers: Vec<GateVector>,
}

impl Architecture {
    pub fn validate(&self, subset: &SubsetState) -> Result<(), SpaceError> {
        if self.layers.len() != subset.layers.len() {
            return Err(SpaceError::LayerCount { expected: subset.layers.len(), got: self.layers.len() });
        }
        for (gv, layer) in self.layers.iter().zip(&subset.layers) {
            let l = layer.layer_index;
            if gv.identity != layer.has_identity() {
                return Err(SpaceError::IdentityMismatch(l));
            }
            if let Some(&slot) = gv.selected.iter().find(|&&s| !layer.is_active(s)) {
                return Err(SpaceError::InactiveSlot { layer: l, slot });
            }
            if !layer.has_identity() && gv.selected.is_empty() {
                return Err(SpaceError::EmptyReduction(l));
            }
        }
        Ok(())
    }

    /// All selected `(layer, slot)` pairs.
    pub fn selected_ops(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.layers.iter().flat_map(|g| g.selected.iter().map(move |&s| (g.layer_index, s)))
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, g) in self.layers.iter().enumerate() {
            if i > 0 {
                f.write_str("|")?;
            }
            if g.selected.is_empty() {
                f.write_str("-")?;
            } else {
                let parts: Vec<String> = g.selected.iter().map(|s| s.to_string()).collect();
                f.write_str(&parts.join(","))?;
            }
        }
        Ok(())
    }
}

/// Samples one layer's gates with independent `Bernoulli(p_n)` draws. With
/// `require_nonempty`, the draw is conditioned on at least one gate being set;
/// this has the same law as redrawing all-zero vectors but always terminates.
pub fn sample_gates(slots: &[usize], probs: &[f64], require_nonempty: bool, rng: &mut Rng) -> Vec<usize> {
    debug_assert_eq!(slots.len(), probs.len());
    let mut selected = Vec::new();
    if !require_nonempty || slots.is_empty() {
        for (&s, &p) in slots.iter().zip(probs) {
            if rng.random::<f64>() < p {
                selected.push(s);
            }
        }
        return selected;
    }
    // log-probability that every gate from i onwards is zero
    let mut log_zero_suffix = vec![0.0; slots.len() + 1];
    for i in (0..slots.len()).rev() {
        log_zero_suffix[i] = log_zero_suffix[i + 1] + (-probs[i]).ln_1p();
    }
    for (i, (&s, &p)) in slots.iter().zip(probs).enumerate() {
        let p_cond = if selected.is_empty() {
            let any_from_here = -log_zero_suffix[i].exp_m1();
            if any_from_here > 0.0 {
                (p / any_from_here).min(1.0)
            } else {
                // all remaining probabilities underflow; force the last one
                if i + 1 == slots.len() {
                    1.0
                } else {
                    p
                }
            }
        } else {
            p
        };
        if rng.random::<f64>() < p_cond {
            selected.push(s);
        }
    }
    if selected.is_empty() {
        // only reachable through floating-point underflow
        let best = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        selected.push(slots[best]);
    }
    selected
}

/// Uniform architecture: each active gate is `Bernoulli(0.5)`; reduction
/// layers are conditioned on a nonempty selection.
pub fn sample_uniform_architecture(subset: &SubsetState, rng: &mut Rng) -> Architecture {
    let layers = subset
        .layers
        .iter()
        .map(|layer| {
            let active = layer.active_slots();
            let probs = vec![0.5; active.len()];
            let selected = sample_gates(&active, &probs, !layer.has_identity(), rng);
            GateVector::new(layer.layer_index, layer.has_identity(), selected)
        })
        .collect();
    Architecture { layers }
}

/// Samples `min(K, untraversed)` fresh operations per layer and records them.
pub fn init_subset(
    pool: &SearchSpacePool,
    capacity: usize,
    rng: &mut Rng,
    ledger: &mut TraversalLedger,
) -> Result<SubsetState, SpaceError> {
    if capacity == 0 {
        return Err(SpaceError::ZeroCapacity);
    }
    for l in 0..pool.num_layers() {
        if ledger.untraversed(pool, l).is_empty() {
            return Err(SpaceError::Exhausted(l));
        }
    }
    let empty = vec![BTreeSet::new(); pool.num_layers()];
    Ok(replenish(&empty, pool, ledger, capacity, rng))
}

/// Per-layer union of operations selected by the given architectures.
pub fn aggregate(architectures: &[Architecture], subset: &SubsetState) -> Result<Vec<BTreeSet<usize>>, SpaceError> {
    if architectures.is_empty() {
        return Err(SpaceError::EmptyAggregation);
    }
    let mut union = vec![BTreeSet::new(); subset.num_layers()];
    for arch in architectures {
        arch.validate(subset)?;
        for (l, g) in arch.layers.iter().enumerate() {
            union[l].extend(g.selected.iter().copied());
        }
    }
    Ok(union)
}

/// Rebuilds a subset: the union becomes inherited, the rest of each layer is
/// filled with fresh untraversed operations, and the ledger records them.
pub fn replenish(
    union: &[BTreeSet<usize>],
    pool: &SearchSpacePool,
    ledger: &mut TraversalLedger,
    capacity: usize,
    rng: &mut Rng,
) -> SubsetState {
    let mut shortage = false;
    let mut layers = Vec::with_capacity(pool.num_layers());
    for (l, spec) in pool.layers.iter().enumerate() {
        let inherited = union.get(l).cloned().unwrap_or_default();
        let mut entries: Vec<SubsetEntry> =
            inherited.iter().map(|&slot| SubsetEntry { slot, origin: Origin::Inherited, active: true }).collect();
        for &slot in &inherited {
            ledger.insert(l, slot);
        }
        let need = capacity.saturating_sub(entries.len());
        if need > 0 {
            let candidates = ledger.untraversed(pool, l);
            let take = need.min(candidates.len());
            let picked: Vec<usize> = rand::seq::index::sample(rng, candidates.len(), take)
                .into_iter()
                .map(|i| candidates[i])
                .collect();
            for slot in picked {
                ledger.insert(l, slot);
                entries.push(SubsetEntry { slot, origin: Origin::Fresh, active: true });
            }
            if entries.len() < capacity && ledger.untraversed(pool, l).is_empty() {
                shortage = true;
            }
        }
        entries.sort_by_key(|e| e.slot);
        layers.push(SubsetLayer { layer_index: l, role: spec.role, entries });
    }
    SubsetState { capacity, layers, shortage }
}

/// `prod_l sum_{k=low..min(K,N_l)} C(N_l, k)` with `low = 0` for normal
/// layers (identity makes the empty selection valid) and 1 for reduction.
pub fn count_architectures(pool_sizes: &[usize], capacity: usize, roles: &[LayerRole]) -> BigUint {
    pool_sizes
        .iter()
        .zip(roles)
        .map(|(&n, &role)| {
            let low = if role.has_identity() { 0 } else { 1 };
            let mut sum = BigUint::zero();
            let mut binom = BigUint::one();
            for k in 0..=capacity.min(n) {
                if k > 0 {
                    binom = binom * BigUint::from(n - k + 1) / BigUint::from(k);
                }
                if k >= low {
                    sum += &binom;
                }
            }
            sum
        })
        .fold(BigUint::one(), |acc, x| acc * x)
}

/// Scientific rendering such as `1.4e110`.
pub fn format_scientific(value: &BigUint, mantissa_digits: usize) -> String {
    let digits = value.to_str_radix(10);
    if digits.len() <= mantissa_digits + 1 {
        return digits;
    }
    let keep = mantissa_digits + 1;
    let mut head: Vec<u8> = digits.as_bytes()[..keep].iter().map(|b| b - b'0').collect();
    let mut exponent = digits.len() - 1;
    if digits.as_bytes()[keep] >= b'5' {
        let mut i = keep;
        loop {
            if i == 0 {
                head.insert(0, 1);
                head.pop();
                exponent += 1;
                break;
            }
            i -= 1;
            if head[i] == 9 {
                head[i] = 0;
            } else {
                head[i] += 1;
                break;
            }
        }
    }
    let mut s = head[0].to_string();
    if head.len() > 1 {
        s.push('.');
        s.extend(head[1..].iter().map(|d| char::from(b'0' + d)));
    }
    format!("{s}e{exponent}")
}

/// All valid architectures of a subset, in lexicographic gate order.
pub fn enumerate_architectures(subset: &SubsetState) -> Vec<Architecture> {
    let per_layer: Vec<Vec<GateVector>> = subset
        .layers
        .iter()
        .map(|layer| {
            let active = layer.active_slots();
            (0u64..(1u64 << active.len()))
                .filter(|&mask| layer.has_identity() || mask != 0)
                .map(|mask| {
                    let selected = active
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| mask >> i & 1 == 1)
                        .map(|(_, &s)| s)
                        .collect();
                    GateVector::new(layer.layer_index, layer.has_identity(), selected)
                })
                .collect()
        })
        .collect();
    let mut out = vec![Architecture { layers: Vec::new() }];
    for options in per_layer {
        let mut next = Vec::with_capacity(out.len() * options.len());
        for prefix in &out {
            for g in &options {
                let mut layers = prefix.layers.clone();
                layers.push(g.clone());
                next.push(Architecture { layers });
            }
        }
        out = next;
    }
    out.sort();
    out
}
