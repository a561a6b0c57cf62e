//! Aggregated grids, difference series and comparison tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{compare_strategies, convergence_ratio, mean_std, ComparisonResult, DiceResult, EvalError, Result, ZeroMethod};
use crate::dataset::{Source, Structure};
use crate::prompt::PromptLevel;
use crate::train::{Strategy, TrainingHistory};

/// One cell of the experiment matrix.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub model: String,
    pub strategy: Strategy,
    pub level: PromptLevel,
    pub encoder_trainable: bool,
}

impl CellKey {
    pub fn name(&self) -> String {
        format!("{}/{}/{}/{}", self.model, self.strategy, self.level, freeze_label(self.encoder_trainable))
    }
}

fn freeze_label(trainable: bool) -> &'static str {
    if trainable {
        "unfrozen"
    } else {
        "frozen"
    }
}

pub struct ReportInputs {
    /// Cells the report must cover.
    pub matrix: Vec<CellKey>,
    pub results: BTreeMap<CellKey, Vec<DiceResult>>,
    /// Training histories, used for convergence ratios when present.
    pub histories: BTreeMap<CellKey, TrainingHistory>,
    pub config_hash: String,
    pub code_version: String,
    pub zero_method: ZeroMethod,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Summary { n: values.len(), mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub key: CellKey,
    /// All structures together.
    pub pooled: Summary,
    pub per_structure: Vec<(Structure, Summary)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffPoint {
    pub model: String,
    pub encoder_trainable: bool,
    pub strategy: Strategy,
    pub level: PromptLevel,
    /// Mean dice of the strategy minus mean dice of the real-only run, in
    /// percentage points.
    pub diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreezeDiffPoint {
    pub model: String,
    pub strategy: Strategy,
    pub level: PromptLevel,
    /// Unfrozen minus frozen mean dice, in percentage points.
    pub diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    /// Model name, or "all" when pooled over models.
    pub model: String,
    pub encoder_trainable: bool,
    /// "pooled" (levels P1 to P6 present in both) or a single level.
    pub scope: String,
    pub result: ComparisonResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub model: String,
    pub encoder_trainable: bool,
    pub level: PromptLevel,
    pub real_best_epoch: usize,
    pub finetune_best_epoch: usize,
    /// Real-only epochs-to-best over finetuning epochs-to-best.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub config_hash: String,
    pub code_version: String,
    pub cells: Vec<CellStats>,
    pub diff_vs_real: Vec<DiffPoint>,
    pub freeze_diff: Vec<FreezeDiffPoint>,
    pub comparisons: Vec<ComparisonRow>,
    pub convergence: Vec<ConvergenceRow>,
    /// Mean convergence ratio per model.
    pub convergence_by_model: Vec<(String, f64)>,
}

impl EvaluationReport {
    pub fn cell(&self, key: &CellKey) -> Option<&CellStats> {
        self.cells.iter().find(|c| &c.key == key)
    }
}

/// Levels at which pooled strategy comparisons are made.
fn pooled_level(level: PromptLevel) -> bool {
    (1..=6).contains(&level.get())
}

pub fn make_report(inputs: &ReportInputs) -> Result<EvaluationReport> {
    let matrix: BTreeSet<&CellKey> = inputs.matrix.iter().collect();
    let mut cells = Vec::new();
    for key in &matrix {
        let results = inputs
            .results
            .get(*key)
            .filter(|r| !r.is_empty())
            .ok_or_else(|| EvalError::MissingCell(key.name()))?;
        let all: Vec<f64> = results.iter().map(|r| r.dice).collect();
        let per_structure = Structure::ALL
            .iter()
            .filter_map(|s| {
                let v: Vec<f64> = results.iter().filter(|r| r.structure == *s).map(|r| r.dice).collect();
                (!v.is_empty()).then(|| (*s, Summary::of(&v)))
            })
            .collect();
        cells.push(CellStats {
            key: (*key).clone(),
            pooled: Summary::of(&all),
            per_structure,
        });
    }
    let mean_of = |k: &CellKey| cells.iter().find(|c| &c.key == k).map(|c| c.pooled.mean);

    let mut diff_vs_real = Vec::new();
    let mut freeze_diff = Vec::new();
    for c in &cells {
        let k = &c.key;
        if k.strategy != Strategy::Real {
            let real = CellKey { strategy: Strategy::Real, ..k.clone() };
            if let Some(r) = mean_of(&real) {
                diff_vs_real.push(DiffPoint {
                    model: k.model.clone(),
                    encoder_trainable: k.encoder_trainable,
                    strategy: k.strategy,
                    level: k.level,
                    diff: 100.0 * (c.pooled.mean - r),
                });
            }
        }
        if k.encoder_trainable {
            let frozen = CellKey { encoder_trainable: false, ..k.clone() };
            if let Some(f) = mean_of(&frozen) {
                freeze_diff.push(FreezeDiffPoint {
                    model: k.model.clone(),
                    strategy: k.strategy,
                    level: k.level,
                    diff: 100.0 * (c.pooled.mean - f),
                });
            }
        }
    }

    let comparisons = comparisons(inputs, &matrix)?;

    let mut convergence = Vec::new();
    for (key, ft) in &inputs.histories {
        if key.strategy != Strategy::SynthPtRealFt || !matrix.contains(key) {
            continue;
        }
        let real_key = CellKey { strategy: Strategy::Real, ..key.clone() };
        if let Some(real) = inputs.histories.get(&real_key) {
            convergence.push(ConvergenceRow {
                model: key.model.clone(),
                encoder_trainable: key.encoder_trainable,
                level: key.level,
                real_best_epoch: real.best_epoch,
                finetune_best_epoch: ft.best_epoch,
                ratio: convergence_ratio(real, ft),
            });
        }
    }
    let mut by_model: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for row in &convergence {
        by_model.entry(&row.model).or_default().push(row.ratio);
    }
    let convergence_by_model = by_model
        .into_iter()
        .map(|(m, v)| (m.to_string(), v.iter().sum::<f64>() / v.len() as f64))
        .collect();

    Ok(EvaluationReport {
        config_hash: inputs.config_hash.clone(),
        code_version: inputs.code_version.clone(),
        cells,
        diff_vs_real,
        freeze_diff,
        comparisons,
        convergence,
        convergence_by_model,
    })
}

fn comparisons(inputs: &ReportInputs, matrix: &BTreeSet<&CellKey>) -> Result<Vec<ComparisonRow>> {
    let models: BTreeSet<&str> = matrix.iter().map(|k| k.model.as_str()).collect();
    let flags: BTreeSet<bool> = matrix.iter().map(|k| k.encoder_trainable).collect();
    let levels: BTreeSet<PromptLevel> = matrix.iter().map(|k| k.level).collect();
    let mut rows = Vec::new();
    for &flag in &flags {
        for candidate in [Strategy::Synthetic, Strategy::SynthPtRealFt] {
            let label = |s: Strategy| format!("{s}/{}", freeze_label(flag));
            let mut all_ref = Vec::new();
            let mut all_cand = Vec::new();
            for &model in &models {
                let mut pooled_ref = Vec::new();
                let mut pooled_cand = Vec::new();
                for &level in &levels {
                    let key = |strategy| CellKey {
                        model: model.to_string(),
                        strategy,
                        level,
                        encoder_trainable: flag,
                    };
                    let (rk, ck) = (key(Strategy::Real), key(candidate));
                    if !matrix.contains(&rk) || !matrix.contains(&ck) {
                        continue;
                    }
                    let (r, c) = (&inputs.results[&rk], &inputs.results[&ck]);
                    rows.push(ComparisonRow {
                        model: model.to_string(),
                        encoder_trainable: flag,
                        scope: level.to_string(),
                        result: compare_strategies(&label(Strategy::Real), r, &label(candidate), c, inputs.zero_method)?,
                    });
                    if pooled_level(level) {
                        pooled_ref.extend(r.iter().cloned());
                        pooled_cand.extend(c.iter().cloned());
                    }
                }
                if !pooled_ref.is_empty() {
                    rows.push(ComparisonRow {
                        model: model.to_string(),
                        encoder_trainable: flag,
                        scope: "pooled".into(),
                        result: compare_strategies(
                            &label(Strategy::Real),
                            &pooled_ref,
                            &label(candidate),
                            &pooled_cand,
                            inputs.zero_method,
                        )?,
                    });
                    all_ref.extend(pooled_ref);
                    all_cand.extend(pooled_cand);
                }
            }
            if models.len() > 1 && !all_ref.is_empty() {
                rows.push(ComparisonRow {
                    model: "all".into(),
                    encoder_trainable: flag,
                    scope: "pooled".into(),
                    result: compare_strategies(
                        &label(Strategy::Real),
                        &all_ref,
                        &label(candidate),
                        &all_cand,
                        inputs.zero_method,
                    )?,
                });
            }
        }
    }
    Ok(rows)
}

fn header(report: &EvaluationReport) -> String {
    format!("# config_hash={} code_version={}\n", report.config_hash, report.code_version)
}

fn grid(report: &EvaluationReport, trainable: bool) -> Option<String> {
    let cells: Vec<&CellStats> = report.cells.iter().filter(|c| c.key.encoder_trainable == trainable).collect();
    if cells.is_empty() {
        return None;
    }
    let levels: BTreeSet<PromptLevel> = cells.iter().map(|c| c.key.level).collect();
    let rows: BTreeSet<(Strategy, &str)> = cells.iter().map(|c| (c.key.strategy, c.key.model.as_str())).collect();
    let mut out = header(report);
    out.push_str("strategy,model");
    for l in &levels {
        write!(out, ",{l}").unwrap();
    }
    out.push('\n');
    for (strategy, model) in rows {
        write!(out, "{strategy},{model}").unwrap();
        for &level in &levels {
            let key = CellKey {
                model: model.to_string(),
                strategy,
                level,
                encoder_trainable: trainable,
            };
            let cell = match report.cell(&key) {
                Some(c) => format!("{:.2} ± {:.1}", 100.0 * c.pooled.mean, 100.0 * c.pooled.std),
                None if strategy == Strategy::Synthetic && !level.available_for(Source::Synthetic) => "N/A".into(),
                None => "-".into(),
            };
            write!(out, ",{cell}").unwrap();
        }
        out.push('\n');
    }
    Some(out)
}

fn cells_table(report: &EvaluationReport) -> String {
    let mut out = header(report);
    out.push_str("model,encoders,strategy,level,structure,n,mean,std\n");
    for c in &report.cells {
        let k = &c.key;
        let rows = std::iter::once(("all".to_string(), c.pooled))
            .chain(c.per_structure.iter().map(|(s, sum)| (s.to_string(), *sum)));
        for (structure, s) in rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                k.model,
                freeze_label(k.encoder_trainable),
                k.strategy,
                k.level,
                structure,
                s.n,
                s.mean,
                s.std
            )
            .unwrap();
        }
    }
    out
}

/// Writes the report artifacts into `dir`. Output depends only on the
/// report, so re-rendering is byte-identical.
pub fn render_report(report: &EvaluationReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| EvalError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut files: Vec<(&str, String)> = Vec::new();
    if let Some(g) = grid(report, true) {
        files.push(("grid_unfrozen.csv", g));
    }
    if let Some(g) = grid(report, false) {
        files.push(("grid_frozen.csv", g));
    }
    files.push(("cells.csv", cells_table(report)));

    let mut diff = header(report);
    diff.push_str("model,encoders,strategy,level,diff_vs_real\n");
    for d in &report.diff_vs_real {
        writeln!(diff, "{},{},{},{},{}", d.model, freeze_label(d.encoder_trainable), d.strategy, d.level, d.diff).unwrap();
    }
    files.push(("diff_vs_real.csv", diff));

    let mut freeze = header(report);
    freeze.push_str("model,strategy,level,unfrozen_minus_frozen\n");
    for d in &report.freeze_diff {
        writeln!(freeze, "{},{},{},{}", d.model, d.strategy, d.level, d.diff).unwrap();
    }
    files.push(("freeze_diff.csv", freeze));

    let mut cmp = header(report);
    cmp.push_str("model,encoders,scope,reference,candidate,n_pairs,mean_diff,statistic,p_value,method\n");
    for c in &report.comparisons {
        let r = &c.result;
        writeln!(
            cmp,
            "{},{},{},{},{},{},{},{},{},{}",
            c.model,
            freeze_label(c.encoder_trainable),
            c.scope,
            r.reference,
            r.candidate,
            r.n_pairs,
            r.mean_diff,
            r.statistic,
            r.p_value,
            serde_json::to_value(r.method).unwrap().as_str().unwrap()
        )
        .unwrap();
    }
    files.push(("comparisons.csv", cmp));

    let mut conv = header(report);
    conv.push_str("model,encoders,level,real_best_epoch,finetune_best_epoch,ratio\n");
    for c in &report.convergence {
        writeln!(
            conv,
            "{},{},{},{},{},{}",
            c.model,
            freeze_label(c.encoder_trainable),
            c.level,
            c.real_best_epoch,
            c.finetune_best_epoch,
            c.ratio
        )
        .unwrap();
    }
    for (model, ratio) in &report.convergence_by_model {
        writeln!(conv, "{model},mean,all,,,{ratio}").unwrap();
    }
    files.push(("convergence.csv", conv));

    let mut json = serde_json::to_string_pretty(report).expect("report serializes");
    json.push('\n');
    files.push(("report.json", json));

    let mut written = Vec::new();
    for (name, body) in files {
        let path = dir.join(name);
        fs::write(&path, body).map_err(io(&path))?;
        written.push(path);
    }
    Ok(written)
}
