//! Test-set scoring, paired statistics and report generation.

mod compare;
mod report;
mod stats;

use std::io::{BufRead, Write};
use std::path::PathBuf;

use ndarray::{Array2, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetError, SplitName, Source, Structure};
use crate::loader::SampleLoader;
use crate::model::{preprocess, resize_bilinear, resize_nearest, ModelError, VlsmHandle};
use crate::prompt::{PromptLevel, TripletEntry};

pub use compare::{
    compare_strategies, convergence_ratio, mean_convergence_ratio, ComparisonResult, PairKey,
};
pub use report::{
    make_report, render_report, CellKey, CellStats, ComparisonRow, ConvergenceRow, DiffPoint, EvaluationReport,
    FreezeDiffPoint, ReportInputs, Summary,
};
pub use stats::{
    wilcoxon_exact, wilcoxon_normal, wilcoxon_signed_rank, TestMethod, WilcoxonResult, ZeroMethod,
    EXACT_MAX_N,
};

/// Binarization threshold applied to resampled probabilities.
pub const THRESHOLD: f64 = 0.5;
/// Side length at which test dice is computed.
pub const EVAL_SIZE: usize = 512;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction is {prediction:?} but ground truth is {truth:?}")]
    ShapeMismatch {
        prediction: (usize, usize),
        truth: (usize, usize),
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DatasetError),
    #[error("triplet {sample} is not from the real test split")]
    NotTestTriplet { sample: String },
    #[error("triplet {sample} has level {found}, run uses {expected}")]
    LevelMismatch {
        sample: String,
        expected: PromptLevel,
        found: PromptLevel,
    },
    #[error("no paired differences")]
    Empty,
    #[error("unpaired results: {}", .0.join(", "))]
    Unpaired(Vec<String>),
    #[error("duplicate result for {0}")]
    DuplicateResult(String),
    #[error("report matrix cell without results: {0}")]
    MissingCell(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed result line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Dice of two binary masks of equal shape; 1.0 when both are empty.
pub fn dice_binary(pred: &Array2<u8>, truth: &Array2<u8>) -> Result<f64> {
    if pred.dim() != truth.dim() {
        return Err(EvalError::ShapeMismatch {
            prediction: pred.dim(),
            truth: truth.dim(),
        });
    }
    let (mut inter, mut p, mut t) = (0u64, 0u64, 0u64);
    Zip::from(pred).and(truth).for_each(|&a, &b| {
        let (a, b) = (a != 0, b != 0);
        inter += u64::from(a && b);
        p += u64::from(a);
        t += u64::from(b);
    });
    if p + t == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + t) as f64)
}

/// Dice at `size`×`size`: the probability map is resampled bilinearly and
/// thresholded, the ground truth is resampled by nearest neighbour.
pub fn dice_score(prob: &Array2<f64>, truth: &Array2<u8>, size: usize) -> Result<f64> {
    let pred = resize_bilinear(prob, size, size).mapv(|v| u8::from(v > THRESHOLD));
    let truth = resize_nearest(truth, size, size);
    dice_binary(&pred, &truth)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceResult {
    pub run_id: String,
    pub model: String,
    pub sample_id: String,
    pub structure: Structure,
    pub level: PromptLevel,
    pub dice: f64,
}

/// Scores every test triplet with the run's model at `level`. Results follow
/// the order of `triplets`; any failure aborts the whole evaluation.
pub fn evaluate(
    handle: &VlsmHandle,
    run_id: &str,
    model: &str,
    level: PromptLevel,
    triplets: &[&TripletEntry],
    loader: &SampleLoader,
) -> Result<Vec<DiceResult>> {
    for t in triplets {
        if t.split != SplitName::Test || t.source != Source::Real {
            return Err(EvalError::NotTestTriplet {
                sample: t.sample_id.clone(),
            });
        }
        if t.level != level {
            return Err(EvalError::LevelMismatch {
                sample: t.sample_id.clone(),
                expected: level,
                found: t.level,
            });
        }
    }
    triplets
        .par_iter()
        .map(|t| {
            let sample = loader.load(t)?;
            let input = preprocess(&sample.image, handle.spec())?;
            let prob = handle.forward(&input, &t.prompt)?;
            Ok(DiceResult {
                run_id: run_id.to_string(),
                model: model.to_string(),
                sample_id: t.sample_id.clone(),
                structure: t.structure,
                level,
                dice: dice_score(&prob, &sample.mask, EVAL_SIZE)?,
            })
        })
        .collect()
}

pub fn write_results<W: Write>(results: &[DiceResult], mut out: W) -> std::io::Result<()> {
    for r in results {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_results<R: BufRead>(input: R) -> Result<Vec<DiceResult>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| EvalError::Malformed {
            line: i + 1,
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| EvalError::Malformed {
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
