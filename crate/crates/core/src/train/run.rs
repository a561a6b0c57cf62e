//! Run directories and strategy execution.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{train, ExperimentConfig, Result, Strategy, TrainData, TrainError, TrainHooks, TrainingHistory};
use crate::dataset::{LabelMap, SplitName};
use crate::loader::SampleLoader;
use crate::model::{load_checkpoint, save_checkpoint, CheckpointMeta, VlsmHandle};
use crate::prompt::{PromptLevel, TripletManifest};

pub const CONFIG_FILE: &str = "config.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const PROVENANCE_FILE: &str = "provenance.json";
pub const ACCESS_LOG_FILE: &str = "accessed_samples.tsv";

/// Digest of a parameter vector's bit patterns.
pub fn params_sha256(params: &[f64]) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update(p.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpstreamRef {
    pub run_id: String,
    pub checkpoint: PathBuf,
    pub checkpoint_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunProvenance {
    pub run_id: String,
    pub status: String,
    pub code_version: String,
    pub config_hash: String,
    /// Digest of the triplet data the run trained on.
    pub data_hash: String,
    pub upstream: Option<UpstreamRef>,
    pub initial_params_sha256: String,
    pub best_params_sha256: String,
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub epochs_trained: usize,
    pub stopped_early: bool,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub run_dir: PathBuf,
    pub provenance: RunProvenance,
    pub history: TrainingHistory,
    /// True when a completed run was found and nothing was trained.
    pub skipped: bool,
}

pub fn read_provenance(run_dir: &Path) -> Result<Option<RunProvenance>> {
    let path = run_dir.join(PROVENANCE_FILE);
    if !path.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|source| TrainError::Io { path: path.clone(), source })?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| TrainError::History(format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn load_history(run_dir: &Path) -> Result<TrainingHistory> {
    let path = run_dir.join(HISTORY_FILE);
    let text = fs::read_to_string(&path).map_err(|source| TrainError::Io { path, source })?;
    TrainingHistory::from_csv(&text)
}

/// Trains one run into `run_dir`. A run whose provenance records the same
/// config and data digests is skipped; a provenance with different digests
/// is an error unless `force` is set.
#[allow(clippy::too_many_arguments)]
pub fn execute_run(
    config: &ExperimentConfig,
    data: &TrainData<'_>,
    data_hash: &str,
    labels: LabelMap,
    upstream: Option<(&str, &Path)>,
    run_dir: &Path,
    force: bool,
    hooks: &TrainHooks,
) -> Result<RunArtifacts> {
    let run_id = config.run_id();
    let config_hash = config.hash();
    if let Some(prev) = read_provenance(run_dir)? {
        let fresh = prev.status == "complete" && prev.config_hash == config_hash && prev.data_hash == data_hash;
        if fresh && !force {
            info!("{run_id}: already complete, skipping");
            return Ok(RunArtifacts {
                run_dir: run_dir.to_path_buf(),
                history: load_history(run_dir)?,
                provenance: prev,
                skipped: true,
            });
        }
        if !fresh && !force {
            return Err(TrainError::Stale(format!(
                "{run_id}: existing run in {} was produced from different inputs; rerun with --force",
                run_dir.display()
            )));
        }
    }

    let (handle, upstream_ref) = match (config.strategy, upstream) {
        (Strategy::SynthPtRealFt, Some((up_id, path))) => {
            if !path.is_file() {
                return Err(TrainError::MissingUpstream {
                    run: run_id,
                    reason: format!("{} does not exist", path.display()),
                });
            }
            let (handle, _) = load_checkpoint(&config.model, path)?;
            let sha = file_sha256(path)?;
            (
                handle,
                Some(UpstreamRef {
                    run_id: up_id.to_string(),
                    checkpoint: path.to_path_buf(),
                    checkpoint_sha256: sha,
                }),
            )
        }
        (Strategy::SynthPtRealFt, None) => {
            return Err(TrainError::MissingUpstream {
                run: run_id,
                reason: "no synthetic checkpoint given".into(),
            })
        }
        (_, _) => (VlsmHandle::load(&config.model, config.seed)?, None),
    };

    fs::create_dir_all(run_dir).map_err(|source| TrainError::Io {
        path: run_dir.to_path_buf(),
        source,
    })?;
    let _ = fs::remove_file(run_dir.join(PROVENANCE_FILE));
    info!("{run_id}: training on {} train / {} val triplets", data.train.len(), data.val.len());
    let loader = SampleLoader::new(labels);
    let outcome = train(config, data, handle, &loader, hooks)?;

    let config_json = serde_json::to_string_pretty(config).expect("config serializes");
    write(&run_dir.join(CONFIG_FILE), config_json.as_bytes())?;
    write(&run_dir.join(HISTORY_FILE), outcome.history.to_csv().as_bytes())?;
    let meta = CheckpointMeta {
        run_id: run_id.clone(),
        strategy: config.strategy.name().to_string(),
        epoch: outcome.history.best_epoch,
        val_dice: outcome.history.best_val_dice,
        config: serde_json::to_value(config).expect("config serializes"),
    };
    save_checkpoint(&outcome.best, &meta, &run_dir.join(CHECKPOINT_FILE))?;
    let mut access = String::new();
    for a in loader.accessed() {
        access.push_str(&format!("{}\t{}\n", a.source, a.sample_id));
    }
    write(&run_dir.join(ACCESS_LOG_FILE), access.as_bytes())?;

    let provenance = RunProvenance {
        run_id,
        status: "complete".into(),
        code_version: env!("CARGO_PKG_VERSION").into(),
        config_hash,
        data_hash: data_hash.to_string(),
        upstream: upstream_ref,
        initial_params_sha256: outcome.initial_params_sha256,
        best_params_sha256: params_sha256(outcome.best.params()),
        best_epoch: outcome.history.best_epoch,
        best_val_dice: outcome.history.best_val_dice,
        epochs_trained: outcome.history.epochs.len(),
        stopped_early: outcome.stopped_early,
    };
    let json = serde_json::to_string_pretty(&provenance).expect("provenance serializes");
    write(&run_dir.join(PROVENANCE_FILE), json.as_bytes())?;
    Ok(RunArtifacts {
        run_dir: run_dir.to_path_buf(),
        provenance,
        history: outcome.history,
        skipped: false,
    })
}

/// Triplet manifests available to the strategies.
pub struct StrategyData<'a> {
    pub real: &'a TripletManifest,
    pub synthetic: &'a TripletManifest,
    pub labels: LabelMap,
}

/// Digest of the triplets a run reads.
pub fn triplets_sha256(data: &TrainData<'_>) -> String {
    let mut h = Sha256::new();
    for (tag, entries) in [("train", &data.train), ("val", &data.val)] {
        h.update(tag.as_bytes());
        for e in entries.iter() {
            h.update(serde_json::to_vec(e).expect("triplet serializes"));
            h.update(b"\n");
        }
    }
    hex::encode(h.finalize())
}

impl ExperimentConfig {
    /// Synthetic-pretraining run a finetuning run starts from. The synthetic
    /// prompt schema stops at P6, so P7 finetuning starts from the P6 run.
    pub fn upstream_config(&self) -> Option<ExperimentConfig> {
        if self.strategy != Strategy::SynthPtRealFt {
            return None;
        }
        let mut up = self.clone();
        up.strategy = Strategy::Synthetic;
        up.level = PromptLevel::new(self.level.get().min(6)).expect("valid level");
        Some(up)
    }
}

/// Executes every config of `strategy` in parallel, each into
/// `runs_root/<run id>`. Finetuning runs require the matching synthetic
/// run to have completed.
pub fn run_strategy(
    strategy: Strategy,
    configs: &[ExperimentConfig],
    data: &StrategyData<'_>,
    runs_root: &Path,
    force: bool,
) -> Result<Vec<RunArtifacts>> {
    configs
        .par_iter()
        .filter(|c| c.strategy == strategy)
        .map(|config| {
            let manifest = if strategy.trains_on_synthetic() {
                data.synthetic
            } else {
                data.real
            };
            let pick = |split: SplitName| {
                manifest
                    .entries
                    .iter()
                    .filter(|e| e.split == split && e.level == config.level)
                    .collect::<Vec<_>>()
            };
            let train_data = TrainData {
                train: pick(SplitName::Train),
                val: pick(SplitName::Val),
            };
            let upstream = match config.upstream_config() {
                Some(up) => {
                    let up_id = up.run_id();
                    let up_dir = runs_root.join(&up_id);
                    match read_provenance(&up_dir)? {
                        Some(p) if p.status == "complete" => {}
                        _ => {
                            return Err(TrainError::MissingUpstream {
                                run: config.run_id(),
                                reason: format!("synthetic run {up_id} has not completed"),
                            })
                        }
                    }
                    Some((up_id, up_dir.join(CHECKPOINT_FILE)))
                }
                None => None,
            };
            let base_hash = triplets_sha256(&train_data);
            let data_hash = match &upstream {
                Some((_, ckpt)) => {
                    hex::encode(Sha256::digest(format!("{base_hash}:{}", file_sha256(ckpt)?)))
                }
                None => base_hash.to_string(),
            };
            execute_run(
                config,
                &train_data,
                &data_hash,
                data.labels,
                upstream.as_ref().map(|(id, p)| (id.as_str(), p.as_path())),
                &runs_root.join(config.run_id()),
                force,
                &TrainHooks::default(),
            )
        })
        .collect()
}
