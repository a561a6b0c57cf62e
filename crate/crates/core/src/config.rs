//! Pipeline configuration file.
//!
//! A TOML document; relative paths resolve against the file's directory and
//! the dataset roots may be overridden with `ECHOSEG_CAMUS_ROOT` and
//! `ECHOSEG_SDM_ROOT`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{parse_patient_list, LabelMap, Source};
use crate::eval::ZeroMethod;
use crate::model::{ModelKind, ModelSpec, Normalization, StubArch};
use crate::prompt::PromptLevel;
use crate::train::{ExperimentConfig, LossWeights, Precision, Strategy};
use crate::vqa::VqaClientSpec;

pub const CAMUS_ROOT_ENV: &str = "ECHOSEG_CAMUS_ROOT";
pub const SDM_ROOT_ENV: &str = "ECHOSEG_SDM_ROOT";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub camus_root: PathBuf,
    pub sdm_root: Option<PathBuf>,
    #[serde(default)]
    pub test_patients: Vec<String>,
    pub test_patients_file: Option<PathBuf>,
    #[serde(default = "default_val_patients")]
    pub val_patients: usize,
    /// Expected synthetic (train, val) counts; a mismatch is a warning.
    pub sdm_expected: Option<(usize, usize)>,
    #[serde(default)]
    pub labels: LabelMap,
}

fn default_val_patients() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub name: String,
    pub kind: ModelKind,
    pub input_size: Option<usize>,
    pub mean: Option<[f64; 3]>,
    pub std: Option<[f64; 3]>,
    pub weights: Option<PathBuf>,
    pub hidden: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
}

impl ModelEntry {
    pub fn spec(&self) -> Result<ModelSpec, ConfigError> {
        let input_size = self
            .input_size
            .or(self.kind.required_input_size())
            .ok_or_else(|| ConfigError::Invalid(format!("model {}: input_size is required", self.name)))?;
        let normalization = match (self.mean, self.std, self.kind) {
            (Some(mean), Some(std), _) => Normalization { mean, std },
            (None, None, ModelKind::Stub) => Normalization {
                mean: [0.5; 3],
                std: [0.5; 3],
            },
            _ => {
                return Err(ConfigError::Invalid(format!(
                    "model {}: normalization mean and std must both be given",
                    self.name
                )))
            }
        };
        let spec = ModelSpec {
            kind: self.kind,
            input_size,
            normalization,
            weights_ref: self.weights.clone(),
            stub: StubArch {
                hidden: self.hidden.unwrap_or(StubArch::default().hidden),
            },
        };
        spec.validate().map_err(|e| ConfigError::Invalid(format!("model {}: {e}", self.name)))?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixSection {
    /// Model names; empty means every configured model.
    #[serde(default)]
    pub models: Vec<String>,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<Strategy>,
    #[serde(default = "default_levels")]
    pub levels: Vec<PromptLevel>,
    #[serde(default = "default_freeze")]
    pub encoder_trainable: Vec<bool>,
}

fn default_strategies() -> Vec<Strategy> {
    Strategy::ALL.to_vec()
}

fn default_levels() -> Vec<PromptLevel> {
    PromptLevel::all().collect()
}

fn default_freeze() -> Vec<bool> {
    vec![false, true]
}

impl Default for MatrixSection {
    fn default() -> Self {
        MatrixSection {
            models: Vec::new(),
            strategies: default_strategies(),
            levels: default_levels(),
            encoder_trainable: default_freeze(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub max_epochs: usize,
    pub weight_decay: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub early_stop_epochs: Option<usize>,
    pub loss: LossWeights,
    pub eval_size: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            max_epochs: 100,
            weight_decay: 1e-3,
            plateau_patience: 5,
            plateau_factor: 10.0,
            early_stop_epochs: None,
            loss: LossWeights::default(),
            eval_size: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    /// Concurrent training or evaluation runs.
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    pub dataset: DatasetSection,
    pub vqa: VqaClientSpec,
    pub models: Vec<ModelEntry>,
    #[serde(default)]
    pub matrix: MatrixSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub zero_method: ZeroMethod,
}

fn default_jobs() -> usize {
    1
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base, path)
    }

    /// Parses config text; `base` anchors relative paths.
    pub fn parse(text: &str, base: &Path, origin: &Path) -> Result<Self, ConfigError> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        if let Ok(root) = std::env::var(CAMUS_ROOT_ENV) {
            cfg.dataset.camus_root = PathBuf::from(root);
        }
        if let Ok(root) = std::env::var(SDM_ROOT_ENV) {
            cfg.dataset.sdm_root = Some(PathBuf::from(root));
        }
        resolve(base, &mut cfg.output_dir);
        resolve(base, &mut cfg.dataset.camus_root);
        if let Some(p) = cfg.dataset.sdm_root.as_mut() {
            resolve(base, p);
        }
        if let Some(p) = cfg.dataset.test_patients_file.as_mut() {
            resolve(base, p);
        }
        for m in &mut cfg.models {
            if let Some(w) = m.weights.as_mut() {
                resolve(base, w);
            }
        }
        Ok(cfg)
    }

    /// Canonical digest of the parsed configuration.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !self.dataset.camus_root.is_dir() {
            return bad(format!("real dataset root {} does not exist", self.dataset.camus_root.display()));
        }
        let needs_synthetic = self.matrix.strategies.iter().any(|s| *s != Strategy::Real);
        match &self.dataset.sdm_root {
            Some(root) if !root.is_dir() => {
                return bad(format!("synthetic dataset root {} does not exist", root.display()))
            }
            None if needs_synthetic => return bad("synthetic strategies need dataset.sdm_root".into()),
            _ => {}
        }
        self.dataset
            .labels
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.vqa.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.jobs == 0 {
            return bad("jobs must be at least 1".into());
        }
        let mut names = BTreeSet::new();
        for m in &self.models {
            if !names.insert(m.name.as_str()) {
                return bad(format!("duplicate model name {}", m.name));
            }
            m.spec()?;
        }
        for name in &self.matrix.models {
            if !names.contains(name.as_str()) {
                return bad(format!("matrix names unknown model {name}"));
            }
        }
        if self.test_patients()?.is_empty() {
            return bad("no official test patients configured".into());
        }
        let runs = self.experiments()?;
        if runs.is_empty() {
            return bad("experiment matrix is empty".into());
        }
        for r in &runs {
            r.validate().map_err(|e| ConfigError::Invalid(format!("{}: {e}", r.run_id())))?;
        }
        Ok(())
    }

    pub fn test_patients(&self) -> Result<BTreeSet<String>, ConfigError> {
        let mut set: BTreeSet<String> = self.dataset.test_patients.iter().cloned().collect();
        if let Some(path) = &self.dataset.test_patients_file {
            let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
                path: path.clone(),
                source,
            })?;
            set.extend(parse_patient_list(&text));
        }
        Ok(set)
    }

    fn selected_models(&self) -> Vec<&ModelEntry> {
        self.models
            .iter()
            .filter(|m| self.matrix.models.is_empty() || self.matrix.models.contains(&m.name))
            .collect()
    }

    /// Every run of the matrix. Synthetic-only runs are skipped at levels the
    /// synthetic prompt schema does not define.
    pub fn experiments(&self) -> Result<Vec<ExperimentConfig>, ConfigError> {
        let mut out = Vec::new();
        for m in self.selected_models() {
            let spec = m.spec()?;
            for &strategy in &self.matrix.strategies {
                for &level in &self.matrix.levels {
                    if strategy == Strategy::Synthetic && !level.available_for(Source::Synthetic) {
                        continue;
                    }
                    for &trainable in &self.matrix.encoder_trainable {
                        let mut c = ExperimentConfig::new(&m.name, spec.clone(), strategy, level, trainable, self.seed);
                        let t = &self.training;
                        c.batch_size = m.batch_size.unwrap_or(c.batch_size);
                        c.learning_rate = m.learning_rate.unwrap_or(c.learning_rate);
                        c.weight_decay = t.weight_decay;
                        c.plateau_patience = t.plateau_patience;
                        c.plateau_factor = t.plateau_factor;
                        c.early_stop_epochs = t.early_stop_epochs.unwrap_or(2 * t.plateau_patience);
                        c.loss = t.loss;
                        c.max_epochs = t.max_epochs;
                        c.precision = self.precision;
                        c.eval_size = t.eval_size;
                        out.push(c);
                    }
                }
            }
        }
        let mut seen = BTreeSet::new();
        out.retain(|c| seen.insert(c.run_id()));
        Ok(out)
    }

    /// Matrix runs plus the synthetic runs that finetuning runs start from.
    pub fn training_runs(&self) -> Result<Vec<ExperimentConfig>, ConfigError> {
        let mut runs = self.experiments()?;
        let mut seen: BTreeSet<String> = runs.iter().map(|r| r.run_id()).collect();
        let upstream: Vec<ExperimentConfig> = runs.iter().filter_map(|r| r.upstream_config()).collect();
        for up in upstream {
            if seen.insert(up.run_id()) {
                runs.push(up);
            }
        }
        Ok(runs)
    }

    /// Levels needed for each data source by the matrix.
    pub fn levels_for(&self, source: Source) -> Vec<PromptLevel> {
        let mut set = BTreeSet::new();
        for &level in &self.matrix.levels {
            for &s in &self.matrix.strategies {
                let trains_on = if s.trains_on_synthetic() { Source::Synthetic } else { Source::Real };
                match source {
                    // Every run is evaluated on real test data at its level.
                    Source::Real => {
                        set.insert(level);
                    }
                    Source::Synthetic if trains_on == Source::Synthetic || s == Strategy::SynthPtRealFt => {
                        let l = PromptLevel::new(level.get().min(6)).expect("valid level");
                        if l.available_for(Source::Synthetic) {
                            set.insert(l);
                        }
                    }
                    Source::Synthetic => {}
                }
            }
        }
        set.into_iter().collect()
    }
}
