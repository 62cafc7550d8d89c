use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;

use nse_core::engine::{
    distribution_estimate, extend_pool, thread_pool, Backend, Engine, EvolutionState, SupernetBackend,
};
use nse_core::oracle::{pool_architecture_count, Evaluator, SyntheticBenchmark};
use nse_core::resource::CostTable;
use nse_core::seed::{derive_seed, round_rng, Purpose};
use nse_core::space::{format_scientific, init_subset, Origin, SearchSpacePool, TraversalLedger};
use nse_core::supernet::{cost_table, SharedWeights, SupernetEvaluator, ToyDataset};

use crate::artifacts::{self, read_json, round_dir, write_json};
use crate::config::{EvaluatorConfig, RunConfig};
use crate::CliError;

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub rounds: usize,
    pub config_hash: String,
    pub best_accuracy: Option<f64>,
}

/// Inputs that outlive the engine borrowing them.
enum Resources {
    Oracle(SyntheticBenchmark),
    Supernet { data: ToyDataset, costs: CostTable },
}

fn resources(cfg: &RunConfig, pool: &SearchSpacePool, base: Option<&Path>) -> Result<Resources, CliError> {
    match &cfg.evaluator {
        EvaluatorConfig::Oracle { benchmark } => Ok(Resources::Oracle(SyntheticBenchmark::generate(pool, benchmark)?)),
        EvaluatorConfig::Supernet { network, dataset, cost_model, cost_table: table, .. } => {
            let costs = match table {
                Some(path) => {
                    let path = match base {
                        Some(b) if path.is_relative() => b.join(path),
                        _ => path.clone(),
                    };
                    let t = CostTable::load(&path).map_err(|e| CliError::Config(e.to_string()))?;
                    for layer in &pool.layers {
                        for op in &layer.pool {
                            t.get(op.layer_index, op.slot_index).map_err(|e| CliError::Config(e.to_string()))?;
                        }
                    }
                    t
                }
                None => cost_table(pool, network, *cost_model)?,
            };
            Ok(Resources::Supernet { data: ToyDataset::generate(dataset)?, costs })
        }
    }
}

fn backend<'a>(cfg: &RunConfig, res: &'a Resources) -> Backend<'a> {
    match (res, &cfg.evaluator) {
        (Resources::Oracle(b), _) => Backend::Oracle(b),
        (Resources::Supernet { data, costs }, EvaluatorConfig::Supernet { network, training, recalibration, .. }) => {
            Backend::Supernet(SupernetBackend {
                spec: network.clone(),
                data,
                costs: costs.clone(),
                training: training.clone(),
                recal: recalibration.clone(),
            })
        }
        _ => unreachable!("resources follow the evaluator"),
    }
}

/// Runs the search and writes every artifact under the output directory.
pub fn cmd_run(config_path: &Path, out: Option<&Path>) -> Result<RunSummary, CliError> {
    let cfg = RunConfig::load(config_path)?;
    let hash = cfg.hash();
    let run_dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.clone());
    std::fs::create_dir_all(&run_dir)?;
    write_json(&run_dir.join("config.json"), &serde_json::to_value(&cfg).expect("config serializes"))?;
    let base = config_path.parent();
    let pool = cfg.pool()?;
    let res = resources(&cfg, &pool, base)?;
    let engine = Engine::new(pool.clone(), cfg.evolution.clone(), backend(&cfg, &res), cfg.workers)?;
    let mut state = engine.initial_state(cfg.master_seed)?;
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let mut observe = |pool: &SearchSpacePool, o: &nse_core::engine::RoundOutcome, s: &EvolutionState| {
        let ms = clock.elapsed().as_millis();
        timings.push(json!({ "round": o.round, "elapsed_ms": ms as u64 }));
        artifacts::write_round(&run_dir, &hash, o, s, pool, ms)?;
        clock = Instant::now();
        Ok::<(), CliError>(())
    };
    let mut failure = None;
    let result = engine.run(&mut state, None, &mut |o, s| {
        observe(&engine.pool, o, s).map_err(|e| {
            failure = Some(e);
            nse_core::Error::Config("artifact write failed".into())
        })
    });
    if let Some(e) = failure {
        return Err(e);
    }
    result?;
    if let Some(cont) = &cfg.continuation {
        let extended = extend_pool(&pool, &cont.pool.decls(), derive_seed(cfg.shuffle_seed(), &[1]))?;
        let res2 = resources(&cfg, &extended, base)?;
        let engine2 = Engine::new(extended.clone(), cfg.evolution.clone(), backend(&cfg, &res2), cfg.workers)?;
        state.attach_pool(&pool, &extended);
        let mut failure = None;
        let result = engine2.run(&mut state, Some(cont.rounds), &mut |o, s| {
            observe(&engine2.pool, o, s).map_err(|e| {
                failure = Some(e);
                nse_core::Error::Config("artifact write failed".into())
            })
        });
        if let Some(e) = failure {
            return Err(e);
        }
        result?;
    }
    write_json(&run_dir.join("final_front.json"), &artifacts::front_json(&hash, &state.previous_front))?;
    let rounds = state.round - 1;
    let mut manifest = json!({
        "config_hash": hash,
        "master_seed": cfg.master_seed,
        "shuffle_seed": cfg.shuffle_seed(),
        "rounds": rounds,
        "ended_by_shortage": state.finished,
        "best_per_round": state.best_archive.iter().map(|r| json!({"accuracy": r.accuracy, "cost": r.cost})).collect::<Vec<_>>(),
        "timings": timings,
    });
    if let Resources::Oracle(b) = &res {
        manifest["benchmark"] = json!({ "intercept": b.intercept, "slope": b.slope });
    }
    write_json(&run_dir.join("manifest.json"), &manifest)?;
    Ok(RunSummary {
        run_dir,
        rounds,
        config_hash: hash,
        best_accuracy: state.best_archive.iter().map(|r| r.accuracy).reduce(f64::max),
    })
}

/// Exact architecture count of the configured pool and its short form.
pub fn cmd_count(config_path: &Path) -> Result<(String, String), CliError> {
    let cfg = RunConfig::load(config_path)?;
    let count = pool_architecture_count(&cfg.pool()?, cfg.evolution.capacity);
    Ok((count.to_string(), format!("≈{}", format_scientific(&count, 1))))
}

/// CSV `arch_id,cost,accuracy` of `n` uniform architectures of the whole pool
/// with cost in `[lo, hi]`.
pub fn cmd_distribution(config_path: &Path, lo: f64, hi: f64, n: usize) -> Result<String, CliError> {
    let cfg = RunConfig::load(config_path)?;
    let pool = cfg.pool()?;
    let res = resources(&cfg, &pool, config_path.parent())?;
    let full = pool.pool_sizes().into_iter().max().unwrap_or(1);
    let mut ledger = TraversalLedger::new();
    let subset = init_subset(&pool, full, &mut round_rng(cfg.master_seed, 0, Purpose::Subset), &mut ledger).map_err(nse_core::Error::from)?;
    let threads = thread_pool(cfg.workers)?;
    let mut rng = round_rng(cfg.master_seed, 0, Purpose::Distribution);
    let records = match (&res, &cfg.evaluator) {
        (Resources::Oracle(b), _) => distribution_estimate(&subset, b, &b.costs, (lo, hi), n, &mut rng, &threads)?,
        (Resources::Supernet { data, costs }, EvaluatorConfig::Supernet { network, training, recalibration, .. }) => {
            let seed = derive_seed(cfg.master_seed, &[0, Purpose::Weights as u64]);
            let mut weights = SharedWeights::for_subset(&pool, &subset, network, seed)?;
            let mut sgd = training.sgd()?;
            let mut arch_rng = round_rng(cfg.master_seed, 0, Purpose::SupernetSampling);
            let mut batch_rng = round_rng(cfg.master_seed, 0, Purpose::Batches);
            for step in 0..training.steps {
                sgd.set_lr(training.lr_at(step)).map_err(nse_core::Error::from)?;
                let batch = data.train_batch(training.batch_size, &mut batch_rng);
                weights.train_step(&subset, &batch, &mut arch_rng, &mut sgd)?;
            }
            let evaluator: &dyn Evaluator =
                &SupernetEvaluator { weights: &weights, data, costs, recal: recalibration.clone() };
            distribution_estimate(&subset, evaluator, costs, (lo, hi), n, &mut rng, &threads)?
        }
        _ => unreachable!("resources follow the evaluator"),
    };
    let mut csv = String::from("arch_id,cost,accuracy\n");
    for r in records {
        writeln!(csv, "\"{}\",{},{}", r.architecture, r.cost, r.accuracy).expect("string write");
    }
    Ok(csv)
}

pub fn cmd_dump_benchmark(config_path: &Path) -> Result<serde_json::Value, CliError> {
    let cfg = RunConfig::load(config_path)?;
    match &cfg.evaluator {
        EvaluatorConfig::Oracle { benchmark } => Ok(SyntheticBenchmark::generate(&cfg.pool()?, benchmark)?.to_json()),
        EvaluatorConfig::Supernet { .. } => Err(CliError::Config("dump-benchmark needs an oracle evaluator".into())),
    }
}

fn check_hash(path: &Path, expected: &str) -> Result<serde_json::Value, CliError> {
    let v = read_json(path)?;
    match v.get("config_hash").and_then(|h| h.as_str()) {
        Some(h) if h == expected => Ok(v),
        Some(h) => Err(CliError::Runtime(format!(
            "{} was written by config {h}, run config is {expected}",
            path.display()
        ))),
        None => Err(CliError::Runtime(format!("{} has no config_hash", path.display()))),
    }
}

/// Human-readable subset and front summary of one round (the last by default).
pub fn cmd_inspect(run_dir: &Path, round: Option<usize>) -> Result<String, CliError> {
    if !run_dir.is_dir() {
        return Err(CliError::Config(format!("no run directory at {}", run_dir.display())));
    }
    let cfg: RunConfig = serde_json::from_value(read_json(&run_dir.join("config.json"))?)
        .map_err(|e| CliError::Runtime(format!("config.json: {e}")))?;
    let hash = cfg.hash();
    let manifest = check_hash(&run_dir.join("manifest.json"), &hash)?;
    let last = manifest.get("rounds").and_then(|r| r.as_u64()).unwrap_or(0) as usize;
    let round = round.unwrap_or(last);
    let dir = round_dir(run_dir, round);
    if round == 0 || !dir.is_dir() {
        return Err(CliError::Config(format!("run has no round {round}")));
    }
    let subset = check_hash(&dir.join("subset.json"), &hash)?;
    let pareto = check_hash(&dir.join("pareto.json"), &hash)?;
    for f in ["ledger.json", "theta.json", "manifest.json"] {
        check_hash(&dir.join(f), &hash)?;
    }
    let mut out = String::new();
    writeln!(out, "round {round} of {last}  config {}", &hash[..12]).unwrap();
    let origin_name = |o: &serde_json::Value| -> String {
        serde_json::from_value::<Origin>(o.clone()).map(|o| format!("{o:?}").to_lowercase()).unwrap_or_default()
    };
    for layer in subset["searched"]["layers"].as_array().into_iter().flatten() {
        writeln!(out, "layer {} ({})", layer["layer"], layer["role"].as_str().unwrap_or("?")).unwrap();
        for group in ["inherited", "fresh"] {
            let ops: Vec<String> = layer["ops"]
                .as_array()
                .into_iter()
                .flatten()
                .filter(|op| origin_name(&op["origin"]) == group)
                .map(|op| {
                    let params = op["params"]
                        .as_object()
                        .map(|m| m.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(","))
                        .unwrap_or_default();
                    let pruned = if op["active"].as_bool() == Some(false) { " pruned" } else { "" };
                    format!("{}:{}[{}]{}", op["slot"], op["kind"].as_str().unwrap_or("?"), params, pruned)
                })
                .collect();
            writeln!(out, "  {group:<9} {}", if ops.is_empty() { "-".to_string() } else { ops.join("  ") }).unwrap();
        }
    }
    for (label, key) in [("front", "front"), ("raw front", "raw_front")] {
        let pts = pareto[key].as_array().cloned().unwrap_or_default();
        writeln!(out, "{label} ({} points)", pts.len()).unwrap();
        if key == "front" {
            for p in &pts {
                writeln!(
                    out,
                    "  acc {:.4}  cost {:>10.3}  {}",
                    p["accuracy"].as_f64().unwrap_or(f64::NAN),
                    p["cost"].as_f64().unwrap_or(f64::NAN),
                    p["architecture"].as_str().unwrap_or("?")
                )
                .unwrap();
            }
        }
    }
    Ok(out)
}
