//! On-disk layout of a run directory:
//!
//! ```text
//! config.json            resolved configuration
//! manifest.json          config hash, seeds, per-round timings
//! final_front.json
//! round_<n>/pareto.json  corrected and raw fronts
//! round_<n>/subset.json  searched subset and the next one
//! round_<n>/ledger.json  traversed operations after replenishment
//! round_<n>/theta.json   indicator snapshot (null on oracle runs)
//! round_<n>/manifest.json
//! ```
//!
//! Every file carries `config_hash`.

use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use nse_core::engine::{EvolutionState, RoundOutcome};
use nse_core::pareto::EvaluationRecord;
use nse_core::space::{SearchSpacePool, SubsetState};

use crate::CliError;

pub fn round_dir(run_dir: &Path, round: usize) -> PathBuf {
    run_dir.join(format!("round_{round}"))
}

pub fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))
}

pub fn read_json(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

pub fn subset_json(subset: &SubsetState, pool: &SearchSpacePool) -> Value {
    let layers: Vec<Value> = subset
        .layers
        .iter()
        .map(|layer| {
            let ops: Vec<Value> = layer
                .entries
                .iter()
                .map(|e| {
                    let op = pool.descriptor(layer.layer_index, e.slot);
                    json!({
                        "slot": e.slot,
                        "kind": op.map(|o| o.kind.clone()),
                        "params": op.map(|o| o.params.clone()),
                        "origin": e.origin,
                        "active": e.active,
                    })
                })
                .collect();
            json!({ "layer": layer.layer_index, "role": layer.role, "ops": ops })
        })
        .collect();
    json!({ "capacity": subset.capacity, "shortage": subset.shortage, "layers": layers })
}

fn records(rs: &[EvaluationRecord]) -> Value {
    Value::Array(
        rs.iter()
            .map(|r| {
                json!({
                    "architecture": r.architecture.to_string(),
                    "gates": r.architecture,
                    "accuracy": r.accuracy,
                    "cost": r.cost,
                })
            })
            .collect(),
    )
}

pub fn front_json(hash: &str, front: &[EvaluationRecord]) -> Value {
    json!({ "config_hash": hash, "front": records(front) })
}

/// Writes every per-round file; `elapsed_ms` lands only in the round manifest.
pub fn write_round(
    run_dir: &Path,
    hash: &str,
    outcome: &RoundOutcome,
    state: &EvolutionState,
    pool: &SearchSpacePool,
    elapsed_ms: u128,
) -> Result<(), CliError> {
    let dir = round_dir(run_dir, outcome.round);
    std::fs::create_dir_all(&dir)?;
    let r = &outcome.retrieval;
    write_json(
        &dir.join("pareto.json"),
        &json!({
            "config_hash": hash,
            "round": outcome.round,
            "front": records(&r.front),
            "raw_front": records(&r.raw_front),
            "best": outcome.best.as_ref().map(|b| records(std::slice::from_ref(b))[0].clone()),
            "in_constraint_evaluated": r.in_constraint.len(),
            "auxiliary_evaluated": r.auxiliary.len(),
            "rehearsed": records(&r.rehearsed),
            "draws": r.draws,
            "stalled": r.stalled,
        }),
    )?;
    write_json(
        &dir.join("subset.json"),
        &json!({
            "config_hash": hash,
            "round": outcome.round,
            "searched": subset_json(&outcome.subset, pool),
            "next": subset_json(&state.subset, pool),
        }),
    )?;
    let traversed: Vec<(usize, usize)> = state.ledger.iter().copied().collect();
    write_json(
        &dir.join("ledger.json"),
        &json!({ "config_hash": hash, "round": outcome.round, "traversed": traversed }),
    )?;
    write_json(
        &dir.join("theta.json"),
        &json!({
            "config_hash": hash,
            "round": outcome.round,
            "theta": outcome.indicators.as_ref().map(|i| i.to_json()),
        }),
    )?;
    let seed = state.master_seed;
    write_json(
        &dir.join("manifest.json"),
        &json!({
            "config_hash": hash,
            "round": outcome.round,
            "master_seed": seed,
            "elapsed_ms": elapsed_ms as u64,
            "training": outcome.training,
            "finished": state.finished,
        }),
    )
}
