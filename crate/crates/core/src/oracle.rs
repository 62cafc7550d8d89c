//! Synthetic tabular benchmark with closed-form scores, and brute-force
//! Pareto ground truth for small spaces.

use std::collections::BTreeMap;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pareto::{pareto_front, EvaluationRecord};
use crate::resource::{architecture_cost, CostTable};
use crate::seed::{derive_seed, rng_from_seed};
use crate::space::{count_architectures, enumerate_architectures, Architecture, LayerRole, SearchSpacePool, SubsetState};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub cost: f64,
}

/// Scores architectures. Implementations are deterministic and safe to call
/// from several threads.
pub trait Evaluator: Sync {
    fn evaluate(&self, arch: &Architecture) -> Result<Evaluation>;
}

pub const DEFAULT_ENUMERATION_CAP: u128 = 1 << 21;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "bench_defaults::cost_range")]
    pub cost_range: (f64, f64),
    /// Weight of an operation's utility in its cost draw, in [0, 1].
    #[serde(default = "bench_defaults::cost_correlation")]
    pub cost_correlation: f64,
    #[serde(default)]
    pub overhead: f64,
    #[serde(default = "bench_defaults::synergy")]
    pub synergy: f64,
    /// Accuracy of the all-identity architecture.
    #[serde(default = "bench_defaults::floor")]
    pub floor: f64,
    /// Accuracy when every layer scores 1.
    #[serde(default = "bench_defaults::ceiling")]
    pub ceiling: f64,
}

mod bench_defaults {
    pub fn cost_range() -> (f64, f64) {
        (10.0, 100.0)
    }
    pub fn cost_correlation() -> f64 {
        0.5
    }
    pub fn synergy() -> f64 {
        0.1
    }
    pub fn floor() -> f64 {
        0.3
    }
    pub fn ceiling() -> f64 {
        0.95
    }
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            cost_range: bench_defaults::cost_range(),
            cost_correlation: bench_defaults::cost_correlation(),
            overhead: 0.0,
            synergy: bench_defaults::synergy(),
            floor: bench_defaults::floor(),
            ceiling: bench_defaults::ceiling(),
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.cost_range;
        let ok = lo.is_finite()
            && hi.is_finite()
            && 0.0 <= lo
            && lo <= hi
            && (0.0..=1.0).contains(&self.cost_correlation)
            && self.overhead >= 0.0
            && self.synergy >= 0.0
            && 0.0 < self.floor
            && self.floor < self.ceiling
            && self.ceiling < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("invalid benchmark parameters".into()))
        }
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Concave saturating curve, `x / (1 + x)` on `x >= 0`, odd-extended below 0.
pub fn saturate(x: f64) -> f64 {
    x / (1.0 + x.abs())
}

/// Per-operation utilities, pairwise synergies, and costs, all drawn from
/// streams keyed by `(seed, layer, slot)` so adding operations never
/// changes existing values.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticBenchmark {
    pub config: BenchmarkConfig,
    pub utility: BTreeMap<(usize, usize), f64>,
    /// Keyed `(layer, i, j)` with `i < j`.
    pub synergy: BTreeMap<(usize, usize, usize), f64>,
    pub costs: CostTable,
    pub intercept: f64,
    pub slope: f64,
}

impl SyntheticBenchmark {
    pub fn generate(pool: &SearchSpacePool, config: &BenchmarkConfig) -> Result<Self> {
        config.validate()?;
        let (lo, hi) = config.cost_range;
        let rho = config.cost_correlation;
        let mut utility = BTreeMap::new();
        let mut synergy = BTreeMap::new();
        let mut costs = CostTable::new("units", config.overhead);
        for (l, layer) in pool.layers.iter().enumerate() {
            let n = layer.pool.len();
            for s in 0..n {
                let mut rng = rng_from_seed(derive_seed(config.seed, &[0, l as u64, s as u64]));
                let u: f64 = rng.random();
                let v: f64 = rng.random();
                utility.insert((l, s), u);
                costs.insert(l, s, lo + (hi - lo) * (rho * u + (1.0 - rho) * v))?;
                for t in (s + 1)..n {
                    let mut rng = rng_from_seed(derive_seed(config.seed, &[1, l as u64, s as u64, t as u64]));
                    synergy.insert((l, s, t), rng.random_range(-config.synergy..=config.synergy));
                }
            }
        }
        let layers = pool.num_layers().max(1) as f64;
        let intercept = logit(config.floor);
        let slope = (logit(config.ceiling) - intercept) / (layers * saturate(1.0));
        Ok(Self { config: config.clone(), utility, synergy, costs, intercept, slope })
    }

    /// Mean utility of the selected ops plus their pairwise synergies divided
    /// by the selection size; 0 for an empty selection.
    pub fn layer_score(&self, layer: usize, selected: &[usize]) -> f64 {
        if selected.is_empty() {
            return 0.0;
        }
        let k = selected.len() as f64;
        let mut total: f64 = selected.iter().map(|&s| self.utility[&(layer, s)]).sum::<f64>() / k;
        for (i, &a) in selected.iter().enumerate() {
            for &b in &selected[i + 1..] {
                let key = if a < b { (layer, a, b) } else { (layer, b, a) };
                total += self.synergy[&key] / k;
            }
        }
        total
    }

    /// Accuracy from the sum over layers of saturated layer scores.
    pub fn accuracy_from_total(&self, total: f64) -> f64 {
        sigmoid(self.intercept + self.slope * total)
    }

    pub fn oracle_score(&self, arch: &Architecture) -> Result<Evaluation> {
        let total: f64 = arch.layers.iter().map(|g| saturate(self.layer_score(g.layer_index, &g.selected))).sum();
        Ok(Evaluation { accuracy: self.accuracy_from_total(total), cost: architecture_cost(arch, &self.costs)? })
    }

    /// Full table for manual inspection.
    pub fn to_json(&self) -> serde_json::Value {
        let utility: serde_json::Map<String, serde_json::Value> =
            self.utility.iter().map(|((l, s), u)| (format!("{l}.{s}"), (*u).into())).collect();
        let synergy: serde_json::Map<String, serde_json::Value> =
            self.synergy.iter().map(|((l, a, b), s)| (format!("{l}.{a}.{b}"), (*s).into())).collect();
        serde_json::json!({
            "config": self.config,
            "intercept": self.intercept,
            "slope": self.slope,
            "utility": utility,
            "synergy": synergy,
            "cost": self.costs.to_json(),
        })
    }
}

impl Evaluator for SyntheticBenchmark {
    fn evaluate(&self, arch: &Architecture) -> Result<Evaluation> {
        self.oracle_score(arch)
    }
}

/// Exact constrained Pareto front of a subset by full enumeration.
pub fn brute_force_pareto(
    subset: &SubsetState,
    evaluator: &dyn Evaluator,
    constraint_upper: f64,
    cap: u128,
) -> Result<Vec<EvaluationRecord>> {
    let count = subset.architecture_count();
    if count > cap {
        return Err(Error::EnumerationCap { count, cap });
    }
    let records = enumerate_architectures(subset)
        .into_par_iter()
        .map(|a| evaluator.evaluate(&a).map(|e| EvaluationRecord { architecture: a, accuracy: e.accuracy, cost: e.cost }))
        .collect::<Result<Vec<_>>>()?;
    let feasible: Vec<EvaluationRecord> = records.into_iter().filter(|r| r.cost <= constraint_upper).collect();
    Ok(pareto_front(&feasible))
}

/// Best accuracy reachable on the whole pool with at most `capacity`
/// operations per layer and cost within `constraint_upper`.
///
/// Cost is additive over layers and accuracy is monotone in the sum of
/// per-layer terms, so per-layer (cost, term) fronts merge exactly.
pub fn constrained_optimum(
    bench: &SyntheticBenchmark,
    pool: &SearchSpacePool,
    capacity: usize,
    constraint_upper: f64,
) -> Result<Option<(f64, f64)>> {
    // (cost, term) pairs, cost ascending, term strictly increasing
    let mut acc: Vec<(f64, f64)> = vec![(bench.costs.fixed_overhead, 0.0)];
    for (l, layer) in pool.layers.iter().enumerate() {
        let n = layer.pool.len();
        let low = usize::from(layer.role == LayerRole::Reduction);
        let mut options = Vec::new();
        let mut selection = Vec::new();
        subsets_up_to(n, capacity.min(n), 0, &mut selection, &mut |sel| {
            if sel.len() >= low {
                let cost: f64 = sel.iter().map(|&s| bench.costs.get(l, s).unwrap_or(f64::INFINITY)).sum();
                options.push((cost, saturate(bench.layer_score(l, sel))));
            }
        });
        let options = front_of(options);
        let mut merged = Vec::with_capacity(acc.len() * options.len());
        for &(c1, t1) in &acc {
            for &(c2, t2) in &options {
                if c1 + c2 <= constraint_upper {
                    merged.push((c1 + c2, t1 + t2));
                }
            }
        }
        acc = front_of(merged);
    }
    Ok(acc.last().map(|&(c, t)| (bench.accuracy_from_total(t), c)))
}

fn front_of(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    let mut out: Vec<(f64, f64)> = Vec::new();
    for p in pts {
        if out.last().map_or(true, |q| p.1 > q.1) {
            out.push(p);
        }
    }
    out
}

fn subsets_up_to(n: usize, max: usize, start: usize, sel: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
    f(sel);
    if sel.len() == max {
        return;
    }
    for i in start..n {
        sel.push(i);
        subsets_up_to(n, max, i + 1, sel, f);
        sel.pop();
    }
}

/// Number of architectures of the whole pool, capped at `capacity` per layer.
pub fn pool_architecture_count(pool: &SearchSpacePool, capacity: usize) -> num_bigint::BigUint {
    count_architectures(&pool.pool_sizes(), capacity, &pool.roles())
}
