//! The evolution loop: train and simplify, retrieve the Pareto front,
//! aggregate, replenish, repeat.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::indicators::{
    indicator_update_step, prune, sample_architecture, FitnessIndicators, DEFAULT_PRUNE_THRESHOLD,
};
use crate::nn::Adam;
use crate::oracle::{Evaluator, SyntheticBenchmark};
use crate::pareto::{edging_correction, pareto_front, EvaluationRecord};
use crate::resource::{architecture_cost, ConstraintConfig, CostTable};
use crate::seed::{derive_seed, round_rng, Purpose, Rng};
use crate::space::{
    aggregate, enumerate_architectures, init_subset, replenish, sample_uniform_architecture, shuffle_pool,
    Architecture, LayerDecl, Origin, SearchSpacePool, SubsetState, TraversalLedger,
};
use crate::supernet::{
    NetworkSpec, ParamKey, RecalibrationConfig, SharedWeights, SupernetEvaluator, ToyDataset, TrainingConfig,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalConfig {
    /// Distinct in-constraint architectures to evaluate.
    #[serde(default = "retrieval_defaults::samples")]
    pub samples: usize,
    /// Distinct architectures just beyond the boundary.
    #[serde(default = "retrieval_defaults::auxiliary")]
    pub auxiliary: usize,
    /// Draw budget per requested in-constraint sample before giving up.
    #[serde(default = "retrieval_defaults::stall_factor")]
    pub stall_factor: usize,
    /// Evaluate every architecture of the subset instead of sampling.
    #[serde(default)]
    pub exhaustive: bool,
}

mod retrieval_defaults {
    pub fn samples() -> usize {
        2000
    }
    pub fn auxiliary() -> usize {
        100
    }
    pub fn stall_factor() -> usize {
        100
    }
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            samples: retrieval_defaults::samples(),
            auxiliary: retrieval_defaults::auxiliary(),
            stall_factor: retrieval_defaults::stall_factor(),
            exhaustive: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvolutionConfig {
    /// Operations per layer in a subset.
    #[serde(default = "evolution_defaults::capacity")]
    pub capacity: usize,
    /// Stop after this many rounds even without a shortage.
    #[serde(default)]
    pub max_rounds: Option<usize>,
    #[serde(default = "evolution_defaults::prune_threshold")]
    pub prune_threshold: f64,
    /// Lock inherited operations against pruning and rehearse the previous front.
    #[serde(default = "evolution_defaults::yes")]
    pub lock_and_rehearse: bool,
    /// Learn indicators and prune during supernet training.
    #[serde(default = "evolution_defaults::yes")]
    pub simplify: bool,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    #[serde(default)]
    pub constraint: ConstraintConfig,
}

mod evolution_defaults {
    pub fn capacity() -> usize {
        5
    }
    pub fn prune_threshold() -> f64 {
        super::DEFAULT_PRUNE_THRESHOLD
    }
    pub fn yes() -> bool {
        true
    }
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        Self {
            capacity: evolution_defaults::capacity(),
            max_rounds: None,
            prune_threshold: DEFAULT_PRUNE_THRESHOLD,
            lock_and_rehearse: true,
            simplify: true,
            retrieval: RetrievalConfig::default(),
            constraint: ConstraintConfig::default(),
        }
    }
}

impl EvolutionConfig {
    pub fn validate(&self) -> Result<()> {
        self.constraint.validate()?;
        if self.capacity == 0 {
            return Err(Error::Config("capacity must be >= 1".into()));
        }
        if self.retrieval.samples == 0 {
            return Err(Error::Config("retrieval needs at least one sample".into()));
        }
        if !self.prune_threshold.is_finite() {
            return Err(Error::Config("pruning threshold must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvolutionState {
    /// 1-based index of the next round to run.
    pub round: usize,
    pub master_seed: u64,
    pub subset: SubsetState,
    pub ledger: TraversalLedger,
    pub previous_front: Vec<EvaluationRecord>,
    /// Best in-constraint record of every finished round.
    pub best_archive: Vec<EvaluationRecord>,
    /// A replenishment ran out of untraversed operations.
    pub finished: bool,
}

impl EvolutionState {
    pub fn new(pool: &SearchSpacePool, capacity: usize, master_seed: u64) -> Result<Self> {
        let mut ledger = TraversalLedger::new();
        let subset = init_subset(pool, capacity, &mut round_rng(master_seed, 0, Purpose::Subset), &mut ledger)?;
        Ok(Self {
            round: 1,
            master_seed,
            subset,
            ledger,
            previous_front: Vec::new(),
            best_archive: Vec::new(),
            finished: false,
        })
    }

    fn rng(&self, purpose: Purpose) -> Rng {
        round_rng(self.master_seed, self.round as u64, purpose)
    }

    /// Moves the search onto `extended`, whose leading slots per layer are the
    /// current pool: everything of the old pool counts as traversed, the
    /// inherited operations stay, and the rest is refilled from the new ops.
    pub fn attach_pool(&mut self, old: &SearchSpacePool, extended: &SearchSpacePool) {
        for (l, layer) in old.layers.iter().enumerate() {
            for s in 0..layer.pool.len() {
                self.ledger.insert(l, s);
            }
        }
        let union: Vec<BTreeSet<usize>> = self
            .subset
            .layers
            .iter()
            .map(|layer| layer.entries.iter().filter(|e| e.origin == Origin::Inherited).map(|e| e.slot).collect())
            .collect();
        let mut rng = self.rng(Purpose::Subset);
        self.subset = replenish(&union, extended, &mut self.ledger, self.subset.capacity, &mut rng);
        self.finished = self.subset.shortage;
    }
}

/// Appends `extra` operations (shuffled with `seed`) after each layer's
/// existing slots.
pub fn extend_pool(pool: &SearchSpacePool, extra: &[LayerDecl], seed: u64) -> Result<SearchSpacePool> {
    if extra.len() != pool.num_layers() {
        return Err(Error::Config(format!("continuation has {} layers, pool {}", extra.len(), pool.num_layers())));
    }
    let added = shuffle_pool(extra, seed)?;
    let mut out = pool.clone();
    for (layer, new) in out.layers.iter_mut().zip(added.layers) {
        if new.role != layer.role {
            return Err(Error::Config(format!("continuation changes the role of layer {}", layer.layer_index)));
        }
        let offset = layer.pool.len();
        layer.pool.extend(new.pool.into_iter().map(|mut op| {
            op.slot_index += offset;
            op
        }));
    }
    Ok(out)
}

/// Everything retrieval produced in one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    /// Front after edging correction, used for aggregation.
    pub front: Vec<EvaluationRecord>,
    pub raw_front: Vec<EvaluationRecord>,
    pub in_constraint: Vec<EvaluationRecord>,
    pub auxiliary: Vec<EvaluationRecord>,
    pub rehearsed: Vec<EvaluationRecord>,
    pub draws: usize,
    /// The sampler ran out of draws before filling both quotas.
    pub stalled: bool,
}

pub fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn evaluate_all(
    archs: Vec<Architecture>,
    evaluator: &dyn Evaluator,
    threads: &rayon::ThreadPool,
) -> Result<Vec<EvaluationRecord>> {
    threads.install(|| {
        archs
            .into_par_iter()
            .map(|a| {
                let e = evaluator.evaluate(&a)?;
                if !e.accuracy.is_finite() || !e.cost.is_finite() {
                    return Err(Error::NonFinite("evaluation"));
                }
                Ok(EvaluationRecord { architecture: a, accuracy: e.accuracy, cost: e.cost })
            })
            .collect()
    })
}

/// Samples distinct architectures until the in-constraint and beyond-boundary
/// quotas are met, evaluates them together with the rehearsed architectures,
/// and returns the constrained front over the pooled set.
#[allow(clippy::too_many_arguments)]
pub fn retrieve_pareto(
    subset: &SubsetState,
    rehearse: &[Architecture],
    evaluator: &dyn Evaluator,
    costs: &CostTable,
    sampler: &mut dyn FnMut(&mut Rng) -> Architecture,
    retrieval: &RetrievalConfig,
    constraint: &ConstraintConfig,
    rng: &mut Rng,
    threads: &rayon::ThreadPool,
) -> Result<Retrieval> {
    let boundary = constraint.upper();
    let band_top = boundary + constraint.edging_margin * boundary.abs();
    let mut inside = Vec::new();
    let mut beyond = Vec::new();
    let mut draws = 0usize;
    let mut stalled = false;
    if retrieval.exhaustive {
        for a in enumerate_architectures(subset) {
            let c = architecture_cost(&a, costs)?;
            if c <= boundary {
                inside.push(a);
            } else if c <= band_top {
                beyond.push(a);
            }
        }
        draws = inside.len() + beyond.len();
    } else {
        let mut seen = BTreeSet::new();
        let budget = retrieval.stall_factor.max(1).saturating_mul(retrieval.samples);
        while inside.len() < retrieval.samples || beyond.len() < retrieval.auxiliary {
            if draws >= budget {
                stalled = true;
                break;
            }
            draws += 1;
            let a = sampler(rng);
            if seen.contains(&a) {
                continue;
            }
            let c = architecture_cost(&a, costs)?;
            if c <= boundary {
                if inside.len() < retrieval.samples {
                    seen.insert(a.clone());
                    inside.push(a);
                }
            } else if c <= band_top && beyond.len() < retrieval.auxiliary {
                seen.insert(a.clone());
                beyond.push(a);
            }
        }
    }
    let seen: BTreeSet<&Architecture> = inside.iter().chain(&beyond).collect();
    let rehearse: Vec<Architecture> = rehearse.iter().filter(|a| !seen.contains(a)).cloned().collect();
    let in_constraint = evaluate_all(inside, evaluator, threads)?;
    let auxiliary = evaluate_all(beyond, evaluator, threads)?;
    let rehearsed = evaluate_all(rehearse, evaluator, threads)?;
    let pooled: Vec<EvaluationRecord> =
        in_constraint.iter().chain(&rehearsed).chain(&auxiliary).filter(|r| r.cost <= boundary).cloned().collect();
    let raw_front = pareto_front(&pooled);
    let mut front = edging_correction(&raw_front, &auxiliary, boundary, constraint.edging_margin);
    if front.is_empty() {
        front = raw_front.clone();
    }
    Ok(Retrieval { front, raw_front, in_constraint, auxiliary, rehearsed, draws, stalled })
}

/// Aggregates the front into the next subset and advances the round.
pub fn step_aggregate_replenish(
    state: &mut EvolutionState,
    front: &[EvaluationRecord],
    pool: &SearchSpacePool,
) -> Result<()> {
    if front.is_empty() {
        return Err(Error::EmptyFront);
    }
    let archs: Vec<Architecture> = front.iter().map(|r| r.architecture.clone()).collect();
    let union = aggregate(&archs, &state.subset)?;
    let mut rng = state.rng(Purpose::Subset);
    state.subset = replenish(&union, pool, &mut state.ledger, state.subset.capacity, &mut rng);
    state.previous_front = front.to_vec();
    state.finished = state.subset.shortage;
    state.round += 1;
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub steps: usize,
    pub indicator_steps: usize,
    pub final_loss: f64,
    pub pruned: Vec<(usize, usize)>,
    pub weights_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundOutcome {
    pub round: usize,
    /// The subset searched this round, after pruning.
    pub subset: SubsetState,
    pub retrieval: Retrieval,
    pub best: Option<EvaluationRecord>,
    pub indicators: Option<FitnessIndicators>,
    pub training: Option<TrainingReport>,
}

/// How a round scores architectures.
pub enum Backend<'a> {
    /// Deterministic benchmark; rounds sample uniformly.
    Oracle(&'a SyntheticBenchmark),
    Supernet(SupernetBackend<'a>),
}

pub struct SupernetBackend<'a> {
    pub spec: NetworkSpec,
    pub data: &'a ToyDataset,
    pub costs: CostTable,
    pub training: TrainingConfig,
    pub recal: RecalibrationConfig,
}

pub struct Engine<'a> {
    pub pool: SearchSpacePool,
    pub config: EvolutionConfig,
    pub backend: Backend<'a>,
    threads: rayon::ThreadPool,
}

impl<'a> Engine<'a> {
    /// `workers == 0` uses every available core.
    pub fn new(pool: SearchSpacePool, config: EvolutionConfig, backend: Backend<'a>, workers: usize) -> Result<Self> {
        config.validate()?;
        pool.validate()?;
        Ok(Self { pool, config, backend, threads: thread_pool(workers)? })
    }

    pub fn costs(&self) -> &CostTable {
        match &self.backend {
            Backend::Oracle(b) => &b.costs,
            Backend::Supernet(s) => &s.costs,
        }
    }

    pub fn initial_state(&self, master_seed: u64) -> Result<EvolutionState> {
        EvolutionState::new(&self.pool, self.config.capacity, master_seed)
    }

    fn rehearsal(&self, state: &EvolutionState) -> Vec<Architecture> {
        if self.config.lock_and_rehearse {
            state.previous_front.iter().map(|r| r.architecture.clone()).collect()
        } else {
            Vec::new()
        }
    }

    /// Runs one round on `state.subset` and records its best in-constraint
    /// record. The subset in `state` is replaced by its pruned version; call
    /// [`step_aggregate_replenish`] to advance.
    pub fn run_round(&self, state: &mut EvolutionState) -> Result<RoundOutcome> {
        let rehearse = self.rehearsal(state);
        let mut retrieval_rng = state.rng(Purpose::Retrieval);
        let (retrieval, indicators, training) = match &self.backend {
            Backend::Oracle(bench) => {
                let mut sampler = |rng: &mut Rng| sample_uniform_architecture(&state.subset, rng);
                let r = retrieve_pareto(
                    &state.subset,
                    &rehearse,
                    *bench,
                    &bench.costs,
                    &mut sampler,
                    &self.config.retrieval,
                    &self.config.constraint,
                    &mut retrieval_rng,
                    &self.threads,
                )?;
                (r, None, None)
            }
            Backend::Supernet(sn) => {
                let (weights, indicators, report) = self.train_supernet(sn, state)?;
                let recal = RecalibrationConfig {
                    seed: derive_seed(state.master_seed, &[state.round as u64, Purpose::Recalibration as u64]),
                    ..sn.recal.clone()
                };
                let evaluator = SupernetEvaluator { weights: &weights, data: sn.data, costs: &sn.costs, recal };
                let subset = &state.subset;
                let ind = &indicators;
                let mut sampler = |rng: &mut Rng| match ind {
                    Some(i) => sample_architecture(i, subset, rng),
                    None => sample_uniform_architecture(subset, rng),
                };
                let r = retrieve_pareto(
                    subset,
                    &rehearse,
                    &evaluator,
                    &sn.costs,
                    &mut sampler,
                    &self.config.retrieval,
                    &self.config.constraint,
                    &mut retrieval_rng,
                    &self.threads,
                )?;
                (r, indicators, Some(report))
            }
        };
        if retrieval.raw_front.is_empty() {
            return Err(Error::EmptyFront);
        }
        let best = retrieval.raw_front.last().cloned();
        if let Some(b) = &best {
            state.best_archive.push(b.clone());
        }
        Ok(RoundOutcome { round: state.round, subset: state.subset.clone(), retrieval, best, indicators, training })
    }

    fn train_supernet(
        &self,
        sn: &SupernetBackend<'_>,
        state: &mut EvolutionState,
    ) -> Result<(SharedWeights, Option<FitnessIndicators>, TrainingReport)> {
        let seed = derive_seed(state.master_seed, &[state.round as u64, Purpose::Weights as u64]);
        let mut weights = SharedWeights::for_subset(&self.pool, &state.subset, &sn.spec, seed)?;
        let mut indicators = FitnessIndicators::new(&state.subset);
        let mut sgd = sn.training.sgd()?;
        let mut adam: Adam<(usize, usize)> = Adam::new(sn.training.indicator_lr, (0.9, 0.999), 1e-8)?;
        let mut arch_rng = state.rng(Purpose::SupernetSampling);
        let mut ind_rng = state.rng(Purpose::IndicatorSampling);
        let mut batch_rng = state.rng(Purpose::Batches);
        let mut report = TrainingReport::default();
        for step in 0..sn.training.steps {
            sgd.set_lr(sn.training.lr_at(step))?;
            let batch = sn.data.train_batch(sn.training.batch_size, &mut batch_rng);
            report.final_loss = weights.train_step(&state.subset, &batch, &mut arch_rng, &mut sgd)?;
            report.steps += 1;
            if self.config.simplify && step % 2 == 1 {
                let val = sn.data.val_batch(sn.training.indicator_batch_size, &mut batch_rng);
                indicator_update_step(
                    &mut indicators,
                    &weights,
                    &state.subset,
                    &val,
                    &sn.costs,
                    &self.config.constraint,
                    &mut adam,
                    &mut ind_rng,
                )?;
                report.indicator_steps += 1;
                let dropped =
                    prune(&mut indicators, &mut state.subset, self.config.prune_threshold, self.config.lock_and_rehearse);
                if !dropped.is_empty() {
                    let subset = &state.subset;
                    sgd.retain(|k| match k {
                        ParamKey::Branch { layer, slot, .. } => subset.layers[*layer].is_active(*slot),
                        _ => true,
                    });
                    for d in &dropped {
                        adam.forget(d);
                    }
                    report.pruned.extend(dropped);
                }
            }
        }
        report.weights_hash = weights.checkpoint_hash();
        let indicators = self.config.simplify.then_some(indicators);
        Ok((weights, indicators, report))
    }

    /// Runs rounds until a shortage or the round cap, calling `observe` after
    /// each round has been aggregated.
    pub fn run(
        &self,
        state: &mut EvolutionState,
        rounds: Option<usize>,
        observe: &mut dyn FnMut(&RoundOutcome, &EvolutionState) -> Result<()>,
    ) -> Result<()> {
        let cap = rounds.or(self.config.max_rounds);
        let mut done = 0usize;
        while !state.finished && cap.map_or(true, |c| done < c) {
            let outcome = self.run_round(state)?;
            step_aggregate_replenish(state, &outcome.retrieval.front, &self.pool)?;
            observe(&outcome, state)?;
            done += 1;
        }
        Ok(())
    }
}

/// Rejection-samples `n` uniform architectures whose cost lies in `band`
/// and evaluates them.
pub fn distribution_estimate(
    subset: &SubsetState,
    evaluator: &dyn Evaluator,
    costs: &CostTable,
    band: (f64, f64),
    n: usize,
    rng: &mut Rng,
    threads: &rayon::ThreadPool,
) -> Result<Vec<EvaluationRecord>> {
    let (lo, hi) = band;
    if !(lo <= hi) {
        return Err(Error::Config(format!("empty cost band [{lo}, {hi}]")));
    }
    let budget = n.saturating_mul(1000);
    let mut picked = Vec::with_capacity(n);
    let mut draws = 0usize;
    while picked.len() < n {
        if draws >= budget {
            return Err(Error::BandUnreachable { lo, hi, draws });
        }
        draws += 1;
        let a = sample_uniform_architecture(subset, rng);
        let c = architecture_cost(&a, costs)?;
        if lo <= c && c <= hi {
            picked.push(a);
        }
    }
    evaluate_all(picked, evaluator, threads)
}
