//! Two-objective Pareto fronts over (accuracy up, cost down).

use serde::{Deserialize, Serialize};

use crate::space::Architecture;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub architecture: Architecture,
    pub accuracy: f64,
    pub cost: f64,
}

/// `a` dominates `b`: no worse in both objectives and strictly better in one.
pub fn dominates(a: &EvaluationRecord, b: &EvaluationRecord) -> bool {
    a.accuracy >= b.accuracy && a.cost <= b.cost && (a.accuracy > b.accuracy || a.cost < b.cost)
}

/// Non-dominated subset, sorted by ascending cost. Records with identical
/// (accuracy, cost) collapse to the one with the smallest architecture.
pub fn pareto_front(records: &[EvaluationRecord]) -> Vec<EvaluationRecord> {
    let mut sorted: Vec<&EvaluationRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        a.cost
            .total_cmp(&b.cost)
            .then(b.accuracy.total_cmp(&a.accuracy))
            .then_with(|| a.architecture.cmp(&b.architecture))
    });
    let mut front: Vec<EvaluationRecord> = Vec::new();
    let mut best = f64::NEG_INFINITY;
    for r in sorted {
        if r.accuracy > best {
            best = r.accuracy;
            front.push(r.clone());
        }
    }
    front
}

/// Removes front points within `margin * tau` of the boundary that some
/// auxiliary beyond-boundary sample beats in accuracy. The highest-accuracy
/// point of the front is always kept.
pub fn edging_correction(
    front: &[EvaluationRecord],
    auxiliary: &[EvaluationRecord],
    boundary: f64,
    margin: f64,
) -> Vec<EvaluationRecord> {
    let band = margin * boundary.abs();
    let top = front.iter().map(|r| r.accuracy).fold(f64::NEG_INFINITY, f64::max);
    let mut kept_top = false;
    front
        .iter()
        .filter(|q| {
            if q.accuracy == top && !kept_top {
                kept_top = true;
                return true;
            }
            let near = boundary - q.cost <= band;
            !(near && auxiliary.iter().any(|r| r.cost > boundary && r.accuracy > q.accuracy))
        })
        .cloned()
        .collect()
}
