//! Training of segmentation models on triplet splits.

mod loss;
mod optim;
mod run;

use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use log::{debug, info, warn};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::DatasetError;
use crate::eval::dice_score;
use crate::loader::SampleLoader;
use crate::model::{preprocess, resize_nearest, ModelError, ModelKind, ModelSpec, VlsmHandle};
use crate::prompt::{PromptLevel, TripletEntry};

pub use loss::{
    bce_loss, combined_loss, combined_loss_grad, soft_dice_loss, LossWeights, BCE_CLAMP, DICE_EPS,
};
pub use optim::{AdamW, PlateauScheduler};
pub use run::{
    execute_run, params_sha256, read_provenance, run_strategy, triplets_sha256, RunArtifacts, RunProvenance, StrategyData,
    UpstreamRef, ACCESS_LOG_FILE, CHECKPOINT_FILE, CONFIG_FILE, HISTORY_FILE, PROVENANCE_FILE,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("prediction is {prediction:?} but target is {target:?}")]
    ShapeMismatch {
        prediction: (usize, usize),
        target: (usize, usize),
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DatasetError),
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("triplet {sample} has prompt level {found}, run expects {expected}")]
    LevelMismatch {
        sample: String,
        expected: PromptLevel,
        found: PromptLevel,
    },
    #[error("model handle is {found}, config expects {expected}")]
    HandleMismatch { expected: ModelKind, found: ModelKind },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error("missing upstream checkpoint for {run}: {reason}")]
    MissingUpstream { run: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("stale run: {0}")]
    Stale(String),
    #[error("malformed history: {0}")]
    History(String),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "real")]
    Real,
    #[serde(rename = "synthetic")]
    Synthetic,
    #[serde(rename = "synth-PT:real-FT", alias = "synth-pt-real-ft")]
    SynthPtRealFt,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Real, Strategy::Synthetic, Strategy::SynthPtRealFt];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Real => "real",
            Strategy::Synthetic => "synthetic",
            Strategy::SynthPtRealFt => "synth-PT:real-FT",
        }
    }

    /// File-system safe form used in run identifiers.
    pub fn slug(self) -> &'static str {
        match self {
            Strategy::Real => "real",
            Strategy::Synthetic => "synthetic",
            Strategy::SynthPtRealFt => "synth-pt-real-ft",
        }
    }

    /// Whether the run trains on the synthetic dataset.
    pub fn trains_on_synthetic(self) -> bool {
        self == Strategy::Synthetic
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name().eq_ignore_ascii_case(s) || st.slug() == s)
            .ok_or_else(|| format!("unknown strategy {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Fp32,
    Fp16,
    Bf16,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model_name: String,
    pub model: ModelSpec,
    pub strategy: Strategy,
    pub level: PromptLevel,
    pub encoder_trainable: bool,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    /// Consecutive non-improving validation epochs before stopping.
    pub early_stop_epochs: usize,
    pub loss: LossWeights,
    pub seed: u64,
    pub max_epochs: usize,
    pub precision: Precision,
    /// Side length at which validation dice is computed.
    pub eval_size: usize,
}

impl ExperimentConfig {
    /// Config with the per-architecture defaults.
    pub fn new(
        model_name: &str,
        model: ModelSpec,
        strategy: Strategy,
        level: PromptLevel,
        encoder_trainable: bool,
        seed: u64,
    ) -> Self {
        let kind = model.kind;
        ExperimentConfig {
            model_name: model_name.to_string(),
            model,
            strategy,
            level,
            encoder_trainable,
            batch_size: kind.default_batch_size(),
            learning_rate: kind.default_learning_rate(),
            weight_decay: 1e-3,
            plateau_patience: 5,
            plateau_factor: 10.0,
            early_stop_epochs: 10,
            loss: LossWeights::default(),
            seed,
            max_epochs: 100,
            precision: Precision::Fp32,
            eval_size: 512,
        }
    }

    pub fn run_id(&self) -> String {
        format!(
            "{}__{}__{}__{}__seed{}",
            self.model_name,
            self.strategy.slug(),
            self.level,
            if self.encoder_trainable { "unfrozen" } else { "frozen" },
            self.seed
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.loss.dice > 0.0 && self.loss.bce >= 0.0) {
            return bad(format!("loss weights must be positive, got {:?}", self.loss));
        }
        if self.plateau_patience == 0 {
            return bad("plateau patience must be at least 1".into());
        }
        if !(self.plateau_factor > 1.0) {
            return bad(format!("plateau factor must exceed 1, got {}", self.plateau_factor));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.early_stop_epochs == 0 {
            return bad("batch size, max epochs and early-stop epochs must be positive".into());
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning rate must be positive and weight decay non-negative".into());
        }
        if self.model_name.is_empty() || self.model_name.contains("__") || self.model_name.contains('/') {
            return bad(format!("model name {:?} is not usable in a run id", self.model_name));
        }
        if !self.level.available_for(self.training_source()) {
            return bad(format!("{} is not defined for {} data", self.level, self.strategy));
        }
        self.model.validate()?;
        Ok(())
    }

    pub fn training_source(&self) -> crate::dataset::Source {
        if self.strategy.trains_on_synthetic() {
            crate::dataset::Source::Synthetic
        } else {
            crate::dataset::Source::Real
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-indexed.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dice: f64,
    /// Rate used during this epoch.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    /// Validation dice of the initial weights, before any update.
    pub initial_val_dice: f64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_dice: f64,
}

impl TrainingHistory {
    fn from_epochs(initial_val_dice: f64, epochs: Vec<EpochRecord>) -> Self {
        let mut best_epoch = 0;
        let mut best_val_dice = f64::NEG_INFINITY;
        for e in &epochs {
            if e.val_dice > best_val_dice {
                best_val_dice = e.val_dice;
                best_epoch = e.epoch;
            }
        }
        TrainingHistory {
            initial_val_dice,
            epochs,
            best_epoch,
            best_val_dice,
        }
    }

    const CSV_HEADER: &'static str = "epoch,train_loss,val_loss,val_dice,lr";

    pub fn to_csv(&self) -> String {
        let mut out = format!("# initial_val_dice={}\n{}\n", self.initial_val_dice, Self::CSV_HEADER);
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch, e.train_loss, e.val_loss, e.val_dice, e.lr
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let err = |m: String| TrainError::History(m);
        let mut initial = None;
        let mut epochs = Vec::new();
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix("# initial_val_dice=") {
                initial = Some(rest.parse().map_err(|_| err(format!("bad initial dice {rest:?}")))?);
                continue;
            }
            if line.is_empty() || line.starts_with('#') || line == Self::CSV_HEADER {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(err(format!("expected 5 fields in {line:?}")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| err(format!("bad number {s:?}")));
            epochs.push(EpochRecord {
                epoch: f[0].parse().map_err(|_| err(format!("bad epoch {:?}", f[0])))?,
                train_loss: num(f[1])?,
                val_loss: num(f[2])?,
                val_dice: num(f[3])?,
                lr: num(f[4])?,
            });
        }
        if epochs.is_empty() {
            return Err(err("no epochs".into()));
        }
        Ok(Self::from_epochs(initial.unwrap_or(f64::NAN), epochs))
    }
}

/// Test and diagnostic overrides.
#[derive(Debug, Clone, Default)]
pub struct TrainHooks {
    /// Replaces the measured validation loss of epoch `i + 1` with element
    /// `i`; the schedule and early stop follow the injected values.
    pub val_loss_override: Option<Vec<f64>>,
}

pub struct TrainData<'a> {
    pub train: Vec<&'a TripletEntry>,
    pub val: Vec<&'a TripletEntry>,
}

pub struct TrainOutcome {
    pub history: TrainingHistory,
    /// Weights of the best validation-dice epoch.
    pub best: VlsmHandle,
    /// Digest of the weights training started from.
    pub initial_params_sha256: String,
    pub stopped_early: bool,
}

struct Prepared {
    input: Arc<Array3<f64>>,
    prompt: String,
    /// Indicator mask at the model's resolution.
    target: Array2<f64>,
    /// Indicator mask at the stored resolution.
    mask: Arc<Array2<u8>>,
}

fn prepare(
    entries: &[&TripletEntry],
    spec: &ModelSpec,
    loader: &SampleLoader,
) -> Result<Vec<Prepared>> {
    let mut inputs: HashMap<PathBuf, Arc<Array3<f64>>> = HashMap::new();
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let sample = loader.load(e)?;
        let input = match inputs.get(&e.image_ref) {
            Some(x) => x.clone(),
            None => {
                let x = Arc::new(preprocess(&sample.image, spec)?);
                inputs.insert(e.image_ref.clone(), x.clone());
                x
            }
        };
        let s = spec.input_size;
        out.push(Prepared {
            input,
            prompt: e.prompt.clone(),
            target: resize_nearest(&sample.mask, s, s).mapv(f64::from),
            mask: sample.mask,
        });
    }
    Ok(out)
}

fn validate_split(samples: &[Prepared], handle: &VlsmHandle, config: &ExperimentConfig) -> Result<(f64, f64)> {
    let scores = samples
        .par_iter()
        .map(|s| -> Result<(f64, f64)> {
            let p = handle.forward(&s.input, &s.prompt)?;
            let loss = combined_loss(&p, &s.target, config.loss)?;
            let dice = dice_score(&p, &s.mask, config.eval_size)
                .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
            Ok((loss, dice))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = scores.len() as f64;
    let loss = scores.iter().map(|s| s.0).sum::<f64>() / n;
    let dice = scores.iter().map(|s| s.1).sum::<f64>() / n;
    Ok((loss, dice))
}

/// Trains `handle` on the triplet splits and returns the best-validation
/// weights together with the per-epoch history. Deterministic for a fixed
/// config and data.
pub fn train(
    config: &ExperimentConfig,
    data: &TrainData<'_>,
    mut handle: VlsmHandle,
    loader: &SampleLoader,
    hooks: &TrainHooks,
) -> Result<TrainOutcome> {
    config.validate()?;
    if handle.kind() != config.model.kind || handle.spec().input_size != config.model.input_size {
        return Err(TrainError::HandleMismatch {
            expected: config.model.kind,
            found: handle.kind(),
        });
    }
    if data.train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if data.val.is_empty() {
        return Err(TrainError::EmptySplit("val"));
    }
    for e in data.train.iter().chain(&data.val) {
        if e.level != config.level {
            return Err(TrainError::LevelMismatch {
                sample: e.sample_id.clone(),
                expected: config.level,
                found: e.level,
            });
        }
    }
    if config.precision != Precision::Fp32 && handle.kind() == ModelKind::Stub {
        warn!("{:?} requested; the stub model always computes in double precision", config.precision);
    }
    handle.set_encoder_trainable(config.encoder_trainable);
    let initial_params_sha256 = params_sha256(handle.params());

    let train_set = prepare(&data.train, &config.model, loader)?;
    let val_set = prepare(&data.val, &config.model, loader)?;
    let trainable = handle.trainable_mask();
    let mut optimizer = AdamW::new(handle.params().len(), config.weight_decay);
    let mut scheduler = PlateauScheduler::new(config.learning_rate, config.plateau_factor, config.plateau_patience);

    let (_, initial_val_dice) = validate_split(&val_set, &handle, config)?;
    let mut best = handle.clone();
    let mut best_dice = f64::NEG_INFINITY;
    let mut best_loss = f64::INFINITY;
    let mut stall = 0;
    let mut stopped_early = false;
    let mut epochs = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=config.max_epochs {
        let lr = scheduler.lr;
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64)));
        let mut loss_sum = 0.0;
        for (batch, chunk) in order.chunks(config.batch_size).enumerate() {
            let per_sample = chunk
                .par_iter()
                .map(|&i| -> Result<(f64, Vec<f64>)> {
                    let s = &train_set[i];
                    let p = handle.forward(&s.input, &s.prompt)?;
                    let loss = combined_loss(&p, &s.target, config.loss)?;
                    let dp = combined_loss_grad(&p, &s.target, config.loss)?;
                    let dz = dp * &p.mapv(|v| v * (1.0 - v));
                    Ok((loss, handle.backward(&s.input, &s.prompt, &dz)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grads = vec![0.0; handle.params().len()];
            let mut batch_loss = 0.0;
            for (loss, g) in &per_sample {
                batch_loss += loss;
                grads.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            if !batch_loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFinite { epoch, batch: batch + 1 });
            }
            let n = chunk.len() as f64;
            grads.iter_mut().for_each(|g| *g /= n);
            optimizer.step(handle.params_mut(), &grads, &trainable, lr);
            loss_sum += batch_loss;
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let (measured_loss, val_dice) = validate_split(&val_set, &handle, config)?;
        let val_loss = hooks
            .val_loss_override
            .as_ref()
            .and_then(|t| t.get(epoch - 1).copied())
            .unwrap_or(measured_loss);
        if !val_loss.is_finite() {
            return Err(TrainError::NonFinite { epoch, batch: 0 });
        }
        debug!("{} epoch {epoch}: train {train_loss:.5} val {val_loss:.5} dice {val_dice:.4} lr {lr:e}", config.run_id());
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_dice,
            lr,
        });
        if val_dice > best_dice {
            best_dice = val_dice;
            best = handle.clone();
        }
        if val_loss < best_loss {
            best_loss = val_loss;
            stall = 0;
        } else {
            stall += 1;
        }
        if scheduler.step(val_loss) {
            info!("{}: learning rate reduced to {:e} after epoch {epoch}", config.run_id(), scheduler.lr);
        }
        if stall >= config.early_stop_epochs {
            info!("{}: stopping after epoch {epoch}", config.run_id());
            stopped_early = true;
            break;
        }
    }
    let history = TrainingHistory::from_epochs(initial_val_dice, epochs);
    Ok(TrainOutcome {
        history,
        best,
        initial_params_sha256,
        stopped_early,
    })
}
