//! Paired strategy comparisons and convergence ratios.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{wilcoxon_signed_rank, DiceResult, EvalError, Result, TestMethod, ZeroMethod};
use crate::dataset::Structure;
use crate::prompt::PromptLevel;
use crate::train::TrainingHistory;

/// Unit on which two result sets are paired.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PairKey {
    pub model: String,
    pub sample_id: String,
    pub structure: Structure,
    pub level: PromptLevel,
}

impl PairKey {
    fn of(r: &DiceResult) -> Self {
        PairKey {
            model: r.model.clone(),
            sample_id: r.sample_id.clone(),
            structure: r.structure,
            level: r.level,
        }
    }

    fn label(&self) -> String {
        format!("{}/{}/{}/{}", self.model, self.sample_id, self.structure, self.level)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub reference: String,
    pub candidate: String,
    pub pairing: String,
    pub levels: Vec<PromptLevel>,
    pub n_pairs: usize,
    /// Mean of candidate minus reference dice.
    pub mean_diff: f64,
    pub statistic: f64,
    pub p_value: f64,
    pub method: TestMethod,
}

fn index(results: &[DiceResult]) -> Result<BTreeMap<PairKey, f64>> {
    let mut map = BTreeMap::new();
    for r in results {
        let key = PairKey::of(r);
        if map.insert(key.clone(), r.dice).is_some() {
            return Err(EvalError::DuplicateResult(key.label()));
        }
    }
    Ok(map)
}

/// Pairs `candidate` with `reference` on (model, sample, structure, level)
/// and tests the differences candidate − reference.
pub fn compare_strategies(
    reference_label: &str,
    reference: &[DiceResult],
    candidate_label: &str,
    candidate: &[DiceResult],
    zero: ZeroMethod,
) -> Result<ComparisonResult> {
    let a = index(reference)?;
    let b = index(candidate)?;
    let unmatched: Vec<String> = a
        .keys()
        .filter(|k| !b.contains_key(*k))
        .chain(b.keys().filter(|k| !a.contains_key(*k)))
        .map(PairKey::label)
        .collect();
    if !unmatched.is_empty() {
        return Err(EvalError::Unpaired(unmatched));
    }
    let diffs: Vec<f64> = a.iter().map(|(k, va)| b[k] - va).collect();
    let test = wilcoxon_signed_rank(&diffs, zero)?;
    let levels: BTreeSet<PromptLevel> = a.keys().map(|k| k.level).collect();
    Ok(ComparisonResult {
        reference: reference_label.to_string(),
        candidate: candidate_label.to_string(),
        pairing: "model,sample,structure,level".into(),
        levels: levels.into_iter().collect(),
        n_pairs: diffs.len(),
        mean_diff: diffs.iter().sum::<f64>() / diffs.len() as f64,
        statistic: test.statistic,
        p_value: test.p_value,
        method: test.method,
    })
}

/// Ratio of epochs-to-best of `a` over `b` (1-indexed first-best epochs).
pub fn convergence_ratio(a: &TrainingHistory, b: &TrainingHistory) -> f64 {
    a.best_epoch as f64 / b.best_epoch as f64
}

pub fn mean_convergence_ratio(pairs: &[(&TrainingHistory, &TrainingHistory)]) -> f64 {
    pairs.iter().map(|(a, b)| convergence_ratio(a, b)).sum::<f64>() / pairs.len() as f64
}
