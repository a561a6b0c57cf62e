//! Stage commands: ingest, prompts, train, evaluate, compare, report,
//! validate. Each stage writes a stamp naming the digests of its inputs and
//! outputs; downstream stages refuse stale inputs unless forced.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, PipelineConfig};
use crate::dataset::{
    read_record_manifest, scan_camus, scan_sdm, split_official, write_record_manifest, DatasetError,
    PatientMetadata, SampleRecord, Source, SplitName, Structure,
};
use crate::eval::{
    evaluate, make_report, read_results, render_report, write_results, CellKey, ComparisonRow, DiceResult,
    EvalError, EvaluationReport, ReportInputs,
};
use crate::loader::SampleLoader;
use crate::model::{load_checkpoint, ModelError};
use crate::prompt::{attributes_at, emit_triplets, Attribute, AttributeResolver, PromptError, TripletManifest};
use crate::train::{
    read_provenance, run_strategy, ExperimentConfig, Strategy, StrategyData, TrainError, TrainingHistory,
    CHECKPOINT_FILE, HISTORY_FILE,
};
use crate::vqa::{resolve_shapes, ShapeCache, VqaError};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Validation(String),
    #[error("stale {artifact}: {reason}; regenerate it or pass --force")]
    Stale { artifact: String, reason: String },
    #[error("incomplete matrix: {0}")]
    Incomplete(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Vqa(#[from] VqaError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    /// 1 validation error, 2 runtime failure, 3 incomplete matrix.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Validation(_) | PipelineError::Stale { .. } => 1,
            PipelineError::Train(TrainError::Stale(_) | TrainError::InvalidConfig(_)) => 1,
            PipelineError::Incomplete(_) | PipelineError::Eval(EvalError::MissingCell(_)) => 3,
            PipelineError::Train(TrainError::MissingUpstream { .. }) => 3,
            _ => 2,
        }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path).map_err(io(path))?)))
}

fn sha256_json<T: Serialize>(value: &T) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(value).expect("value serializes")))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    fs::write(path, bytes).map_err(io(path))
}

/// Record of one stage execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub stage: String,
    pub config_hash: String,
    pub code_version: String,
    /// Digests of what the stage consumed.
    pub inputs: BTreeMap<String, String>,
    /// Digests of the files the stage wrote, keyed by file name.
    pub outputs: BTreeMap<String, String>,
    #[serde(default)]
    pub details: serde_json::Value,
}

/// Options shared by all commands.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub force: bool,
    /// Comma-separated run-id patterns; `*` matches any substring.
    pub selector: Option<String>,
    /// Overrides the configured parallelism.
    pub jobs: Option<usize>,
}

fn wildcard(pattern: &str, text: &str) -> bool {
    let parts: Vec<&str> = pattern.split('*').collect();
    if parts.len() == 1 {
        return pattern == text;
    }
    let mut rest = text;
    for (i, part) in parts.iter().enumerate() {
        if i == 0 {
            match rest.strip_prefix(part) {
                Some(r) => rest = r,
                None => return false,
            }
        } else if i == parts.len() - 1 {
            return rest.ends_with(part);
        } else {
            match rest.find(part) {
                Some(pos) => rest = &rest[pos + part.len()..],
                None => return false,
            }
        }
    }
    true
}

pub fn selector_matches(selector: Option<&str>, run_id: &str) -> bool {
    match selector {
        None => true,
        Some(s) => s.split(',').map(str::trim).any(|p| wildcard(p, run_id)),
    }
}

/// File layout below the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn manifests(&self) -> PathBuf {
        self.root.join("manifests")
    }
    pub fn real_records(&self) -> PathBuf {
        self.manifests().join("records_real.jsonl")
    }
    pub fn synthetic_records(&self) -> PathBuf {
        self.manifests().join("records_synthetic.jsonl")
    }
    pub fn metadata(&self) -> PathBuf {
        self.manifests().join("metadata.json")
    }
    pub fn ingest_stamp(&self) -> PathBuf {
        self.manifests().join("ingest.json")
    }
    pub fn real_triplets(&self) -> PathBuf {
        self.manifests().join("triplets_real.jsonl")
    }
    pub fn synthetic_triplets(&self) -> PathBuf {
        self.manifests().join("triplets_synthetic.jsonl")
    }
    pub fn prompts_stamp(&self) -> PathBuf {
        self.manifests().join("prompts.json")
    }
    pub fn shape_cache(&self) -> PathBuf {
        self.root.join("vqa").join("shape_cache.jsonl")
    }
    pub fn runs(&self) -> PathBuf {
        self.root.join("runs")
    }
    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.runs().join(run_id)
    }
    pub fn results(&self, run_id: &str) -> PathBuf {
        self.run_dir(run_id).join("test_results.jsonl")
    }
    pub fn evaluation_stamp(&self, run_id: &str) -> PathBuf {
        self.run_dir(run_id).join("evaluation.json")
    }
    pub fn comparisons(&self) -> PathBuf {
        self.root.join("comparisons.json")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub config_hash: String,
    pub layout: Layout,
    pub options: RunOptions,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub real: BTreeMap<String, usize>,
    pub synthetic: BTreeMap<String, usize>,
    pub diagnostics: Vec<String>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSummary {
    pub real_triplets: usize,
    pub synthetic_triplets: usize,
    pub excluded: usize,
    pub vqa_queries: usize,
    pub unresolved: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StageCount {
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, options: RunOptions) -> Self {
        let config_hash = config.hash();
        let layout = Layout {
            root: config.output_dir.clone(),
        };
        Pipeline {
            config,
            config_hash,
            layout,
            options,
        }
    }

    pub fn load(path: &Path, options: RunOptions) -> Result<Self> {
        Ok(Self::new(PipelineConfig::load(path)?, options))
    }

    fn header(&self) -> String {
        format!("# config_hash={} code_version={CODE_VERSION}\n", self.config_hash)
    }

    fn jobs(&self) -> usize {
        self.options.jobs.unwrap_or(self.config.jobs).max(1)
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs())
            .build()
            .map_err(|e| PipelineError::Validation(e.to_string()))
    }

    fn stamp(&self, stage: &str, inputs: BTreeMap<String, String>, outputs: &[PathBuf], details: serde_json::Value) -> Result<Stamp> {
        let mut out = BTreeMap::new();
        for p in outputs {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            out.insert(name, sha256_file(p)?);
        }
        Ok(Stamp {
            stage: stage.into(),
            config_hash: self.config_hash.clone(),
            code_version: CODE_VERSION.into(),
            inputs,
            outputs: out,
            details,
        })
    }

    fn read_stamp(&self, path: &Path, stage: &str) -> Result<Stamp> {
        let text = fs::read_to_string(path).map_err(|_| PipelineError::Stale {
            artifact: stage.into(),
            reason: format!("{} is missing; run the {stage} stage first", path.display()),
        })?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Stale {
            artifact: stage.into(),
            reason: format!("{}: {e}", path.display()),
        })
    }

    /// Confirms that the files a stamp lists are unchanged.
    fn check_outputs(&self, stamp: &Stamp, dir: &Path) -> Result<()> {
        for (name, sha) in &stamp.outputs {
            let path = dir.join(name);
            let current = if path.is_file() { sha256_file(&path)? } else { String::new() };
            if &current != sha && !self.options.force {
                return Err(PipelineError::Stale {
                    artifact: name.clone(),
                    reason: format!("{} no longer matches the {} stamp", path.display(), stamp.stage),
                });
            }
        }
        Ok(())
    }

    fn dataset_hash(&self) -> String {
        sha256_json(&self.config.dataset)
    }

    /// Scans both datasets without writing anything.
    fn scan(&self) -> Result<(crate::dataset::DatasetSplit, BTreeMap<String, PatientMetadata>, Option<crate::dataset::SdmDataset>)> {
        let camus = scan_camus(&self.config.dataset.camus_root)?;
        let test = self.config.test_patients()?;
        let split = split_official(&camus.records, &test, self.config.dataset.val_patients)?;
        let sdm = match &self.config.dataset.sdm_root {
            Some(root) => Some(scan_sdm(root, self.config.dataset.sdm_expected)?),
            None => None,
        };
        Ok((split, camus.metadata, sdm))
    }

    fn summarize(
        split: &crate::dataset::DatasetSplit,
        sdm: Option<&crate::dataset::SdmDataset>,
        test: &BTreeSet<String>,
    ) -> IngestSummary {
        let mut real = BTreeMap::new();
        for s in [SplitName::Train, SplitName::Val, SplitName::Test] {
            real.insert(s.to_string(), split.get(s).len());
        }
        let mut synthetic = BTreeMap::new();
        let mut warnings = Vec::new();
        if let Some(sdm) = sdm {
            synthetic.insert("train".into(), sdm.train.len());
            synthetic.insert("val".into(), sdm.val.len());
            warnings.extend(sdm.warnings.iter().cloned());
            let leaked: BTreeSet<&str> = sdm
                .train
                .iter()
                .chain(&sdm.val)
                .map(|r| r.patient_id.as_str())
                .filter(|p| test.contains(*p))
                .collect();
            if !leaked.is_empty() {
                warnings.push(format!(
                    "synthetic images originate from official test patients: {}",
                    leaked.into_iter().collect::<Vec<_>>().join(", ")
                ));
            }
        }
        IngestSummary {
            real,
            synthetic,
            diagnostics: split.diagnostics(),
            warnings,
        }
    }

    pub fn cmd_validate(&self) -> Result<IngestSummary> {
        self.config.validate()?;
        let (split, _, sdm) = self.scan()?;
        let summary = Self::summarize(&split, sdm.as_ref(), &self.config.test_patients()?);
        for w in &summary.warnings {
            warn!("{w}");
        }
        Ok(summary)
    }

    pub fn cmd_ingest(&self) -> Result<IngestSummary> {
        self.config.validate()?;
        let l = &self.layout;
        let dataset_hash = self.dataset_hash();
        if !self.options.force {
            if let Ok(prev) = self.read_stamp(&l.ingest_stamp(), "ingest") {
                if prev.inputs.get("dataset") == Some(&dataset_hash) && self.check_outputs(&prev, &l.manifests()).is_ok() {
                    info!("ingest: manifests are current");
                    return serde_json::from_value(prev.details).map_err(|e| PipelineError::Validation(e.to_string()));
                }
            }
        }
        let (split, metadata, sdm) = self.scan()?;
        let summary = Self::summarize(&split, sdm.as_ref(), &self.config.test_patients()?);
        for w in &summary.warnings {
            warn!("{w}");
        }
        let mut buf = self.header().into_bytes();
        let rows = [SplitName::Train, SplitName::Val, SplitName::Test]
            .into_iter()
            .flat_map(|s| split.get(s).iter().map(move |r| (s, r.clone())));
        write_record_manifest(&mut buf, rows).map_err(io(&l.real_records()))?;
        write_file(&l.real_records(), &buf)?;

        let mut buf = self.header().into_bytes();
        if let Some(sdm) = &sdm {
            let rows = sdm
                .train
                .iter()
                .map(|r| (SplitName::Train, r.clone()))
                .chain(sdm.val.iter().map(|r| (SplitName::Val, r.clone())));
            write_record_manifest(&mut buf, rows).map_err(io(&l.synthetic_records()))?;
        }
        write_file(&l.synthetic_records(), &buf)?;
        let meta = serde_json::to_string_pretty(&metadata).expect("metadata serializes");
        write_file(&l.metadata(), meta.as_bytes())?;

        let stamp = self.stamp(
            "ingest",
            BTreeMap::from([("dataset".to_string(), dataset_hash)]),
            &[l.real_records(), l.synthetic_records(), l.metadata()],
            serde_json::to_value(&summary).expect("summary serializes"),
        )?;
        write_file(&l.ingest_stamp(), serde_json::to_string_pretty(&stamp).expect("stamp").as_bytes())?;
        Ok(summary)
    }

    fn ingest_inputs(&self) -> Result<Stamp> {
        let l = &self.layout;
        let stamp = self.read_stamp(&l.ingest_stamp(), "ingest")?;
        if stamp.inputs.get("dataset") != Some(&self.dataset_hash()) && !self.options.force {
            return Err(PipelineError::Stale {
                artifact: "record manifests".into(),
                reason: "dataset settings changed since ingest".into(),
            });
        }
        self.check_outputs(&stamp, &l.manifests())?;
        Ok(stamp)
    }

    fn read_records(path: &Path) -> Result<Vec<(SplitName, SampleRecord)>> {
        let file = fs::File::open(path).map_err(io(path))?;
        Ok(read_record_manifest(BufReader::new(file))?
            .into_iter()
            .map(|l| (l.split, l.record))
            .collect())
    }

    pub fn cmd_prompts(&self) -> Result<PromptSummary> {
        let l = &self.layout;
        let ingest = self.ingest_inputs()?;
        let mut inputs = ingest.outputs.clone();
        inputs.insert("vqa".into(), sha256_json(&self.config.vqa));
        inputs.insert("levels".into(), sha256_json(&self.config.matrix.levels));
        if !self.options.force {
            if let Ok(prev) = self.read_stamp(&l.prompts_stamp(), "prompts") {
                if prev.inputs == inputs && self.check_outputs(&prev, &l.manifests()).is_ok() {
                    info!("prompts: triplet manifests are current");
                    return serde_json::from_value(prev.details).map_err(|e| PipelineError::Validation(e.to_string()));
                }
            }
        }
        let real = Self::read_records(&l.real_records())?;
        let synthetic = Self::read_records(&l.synthetic_records())?;
        let meta_text = fs::read_to_string(l.metadata()).map_err(io(&l.metadata()))?;
        let metadata: BTreeMap<String, PatientMetadata> =
            serde_json::from_str(&meta_text).map_err(|e| PipelineError::Validation(e.to_string()))?;

        let real_levels = self.config.levels_for(Source::Real);
        let synth_levels = self.config.levels_for(Source::Synthetic);
        let needs_shape = |source: Source, levels: &[crate::prompt::PromptLevel]| {
            levels
                .iter()
                .any(|&lv| attributes_at(source, lv).map(|a| a.contains(&Attribute::Shape)).unwrap_or(false))
        };
        let mut query: Vec<SampleRecord> = Vec::new();
        if needs_shape(Source::Real, &real_levels) {
            query.extend(real.iter().map(|(_, r)| r.clone()));
        }
        if needs_shape(Source::Synthetic, &synth_levels) {
            query.extend(synthetic.iter().map(|(_, r)| r.clone()));
        }
        let mut shapes = BTreeMap::new();
        let mut unresolved = Vec::new();
        let mut queries = 0;
        if !query.is_empty() {
            let client = self.config.vqa.build()?;
            let cache_dir = l.root.join("vqa");
            fs::create_dir_all(&cache_dir).map_err(io(&cache_dir))?;
            let cache = ShapeCache::open(&l.shape_cache())?;
            let res = resolve_shapes(&query, Structure::ALL, &self.config.dataset.labels, client.as_ref(), &cache, &self.config.vqa)?;
            shapes = res.shapes;
            queries = res.queries;
            unresolved = res
                .unresolved
                .iter()
                .map(|(s, st, why)| format!("{s}/{st}: {why}"))
                .collect();
        }
        let resolver = AttributeResolver {
            metadata: &metadata,
            shapes: &shapes,
        };
        let real_manifest = emit_triplets(&real, Structure::ALL, &real_levels, &resolver)?;
        let synth_manifest = emit_triplets(&synthetic, Structure::ALL, &synth_levels, &resolver)?;
        for (m, path) in [(&real_manifest, l.real_triplets()), (&synth_manifest, l.synthetic_triplets())] {
            let mut buf = self.header().into_bytes();
            m.write_jsonl(&mut buf).map_err(io(&path))?;
            write_file(&path, &buf)?;
        }
        let summary = PromptSummary {
            real_triplets: real_manifest.entries.len(),
            synthetic_triplets: synth_manifest.entries.len(),
            excluded: real_manifest.excluded.len() + synth_manifest.excluded.len(),
            vqa_queries: queries,
            unresolved,
        };
        let stamp = self.stamp(
            "prompts",
            inputs,
            &[l.real_triplets(), l.synthetic_triplets()],
            serde_json::to_value(&summary).expect("summary serializes"),
        )?;
        write_file(&l.prompts_stamp(), serde_json::to_string_pretty(&stamp).expect("stamp").as_bytes())?;
        Ok(summary)
    }

    fn load_triplets(&self) -> Result<(TripletManifest, TripletManifest)> {
        let l = &self.layout;
        let ingest = self.ingest_inputs()?;
        let stamp = self.read_stamp(&l.prompts_stamp(), "prompts")?;
        for (k, v) in &ingest.outputs {
            if stamp.inputs.get(k) != Some(v) && !self.options.force {
                return Err(PipelineError::Stale {
                    artifact: "triplet manifests".into(),
                    reason: format!("{k} changed since prompts were generated"),
                });
            }
        }
        self.check_outputs(&stamp, &l.manifests())?;
        let read = |p: PathBuf| -> Result<TripletManifest> {
            let f = fs::File::open(&p).map_err(io(&p))?;
            let m = TripletManifest::read_jsonl(BufReader::new(f))?;
            m.validate()?;
            Ok(m)
        };
        Ok((read(l.real_triplets())?, read(l.synthetic_triplets())?))
    }

    /// Runs selected by the run selector, plus the synthetic runs selected
    /// finetuning runs depend on.
    pub fn selected_training_runs(&self) -> Result<Vec<ExperimentConfig>> {
        let all = self.config.training_runs()?;
        let sel = self.options.selector.as_deref();
        let mut wanted: BTreeSet<String> = all
            .iter()
            .filter(|r| selector_matches(sel, &r.run_id()))
            .map(|r| r.run_id())
            .collect();
        for r in &all {
            if wanted.contains(&r.run_id()) {
                if let Some(up) = r.upstream_config() {
                    wanted.insert(up.run_id());
                }
            }
        }
        Ok(all.into_iter().filter(|r| wanted.contains(&r.run_id())).collect())
    }

    pub fn cmd_train(&self) -> Result<StageCount> {
        self.config.validate()?;
        let (real, synthetic) = self.load_triplets()?;
        let runs = self.selected_training_runs()?;
        let data = StrategyData {
            real: &real,
            synthetic: &synthetic,
            labels: self.config.dataset.labels,
        };
        let runs_root = self.layout.runs();
        fs::create_dir_all(&runs_root).map_err(io(&runs_root))?;
        let pool = self.pool()?;
        let mut count = StageCount::default();
        // Finetuning waits for the synthetic runs it starts from.
        for phase in [&[Strategy::Real, Strategy::Synthetic][..], &[Strategy::SynthPtRealFt][..]] {
            let outcomes: Vec<_> = pool.install(|| {
                phase
                    .par_iter()
                    .map(|&s| run_strategy(s, &runs, &data, &runs_root, self.options.force))
                    .collect::<Vec<_>>()
            });
            for o in outcomes {
                for a in o? {
                    if a.skipped {
                        count.skipped.push(a.provenance.run_id);
                    } else {
                        count.executed.push(a.provenance.run_id);
                    }
                }
            }
        }
        count.executed.sort();
        count.skipped.sort();
        Ok(count)
    }

    fn matrix_runs(&self) -> Result<Vec<ExperimentConfig>> {
        let sel = self.options.selector.as_deref();
        Ok(self
            .config
            .experiments()?
            .into_iter()
            .filter(|r| selector_matches(sel, &r.run_id()))
            .collect())
    }

    pub fn cmd_evaluate(&self) -> Result<StageCount> {
        self.config.validate()?;
        let (real, _) = self.load_triplets()?;
        let runs = self.matrix_runs()?;
        let pool = self.pool()?;
        let outcomes: Vec<Result<(String, bool)>> =
            pool.install(|| runs.par_iter().map(|r| self.evaluate_run(r, &real)).collect());
        let mut count = StageCount::default();
        for o in outcomes {
            let (id, ran) = o?;
            if ran {
                count.executed.push(id);
            } else {
                count.skipped.push(id);
            }
        }
        count.executed.sort();
        count.skipped.sort();
        Ok(count)
    }

    fn evaluate_run(&self, run: &ExperimentConfig, real: &TripletManifest) -> Result<(String, bool)> {
        let id = run.run_id();
        let dir = self.layout.run_dir(&id);
        match read_provenance(&dir)? {
            Some(p) if p.status == "complete" => {}
            _ => return Err(PipelineError::Incomplete(format!("run {id} has not been trained"))),
        }
        let checkpoint = dir.join(CHECKPOINT_FILE);
        let test: Vec<_> = real
            .entries
            .iter()
            .filter(|e| e.split == SplitName::Test && e.level == run.level)
            .collect();
        if test.is_empty() {
            return Err(PipelineError::Incomplete(format!("no test triplets at {} for {id}", run.level)));
        }
        let inputs = BTreeMap::from([
            ("checkpoint".to_string(), sha256_file(&checkpoint)?),
            ("test_triplets".to_string(), sha256_json(&test)),
        ]);
        let stamp_path = self.layout.evaluation_stamp(&id);
        let results_path = self.layout.results(&id);
        if !self.options.force {
            if let Ok(prev) = self.read_stamp(&stamp_path, "evaluate") {
                if prev.inputs == inputs && self.check_outputs(&prev, &dir).is_ok() {
                    return Ok((id, false));
                }
            }
        }
        let (handle, _) = load_checkpoint(&run.model, &checkpoint)?;
        let loader = SampleLoader::new(self.config.dataset.labels);
        let results = evaluate(&handle, &id, &run.model_name, run.level, &test, &loader)?;
        let mut buf = self.header().into_bytes();
        write_results(&results, &mut buf).map_err(io(&results_path))?;
        write_file(&results_path, &buf)?;
        let stamp = self.stamp("evaluate", inputs, &[results_path], serde_json::json!({ "n": results.len() }))?;
        write_file(&stamp_path, serde_json::to_string_pretty(&stamp).expect("stamp").as_bytes())?;
        Ok((id, true))
    }

    fn cell_key(run: &ExperimentConfig) -> CellKey {
        CellKey {
            model: run.model_name.clone(),
            strategy: run.strategy,
            level: run.level,
            encoder_trainable: run.encoder_trainable,
        }
    }

    /// Gathers persisted results and histories for every matrix cell.
    pub fn report_inputs(&self) -> Result<ReportInputs> {
        let runs = self.config.experiments()?;
        let mut results = BTreeMap::new();
        let mut histories = BTreeMap::new();
        let mut missing = Vec::new();
        for run in &runs {
            let id = run.run_id();
            let key = Self::cell_key(run);
            let path = self.layout.results(&id);
            match fs::File::open(&path) {
                Ok(f) => {
                    results.insert(key.clone(), read_results(BufReader::new(f))?);
                }
                Err(_) => missing.push(id.clone()),
            }
            let hist = self.layout.run_dir(&id).join(HISTORY_FILE);
            if let Ok(text) = fs::read_to_string(&hist) {
                histories.insert(key, TrainingHistory::from_csv(&text)?);
            }
        }
        if !missing.is_empty() {
            return Err(PipelineError::Incomplete(format!("no test results for {}", missing.join(", "))));
        }
        Ok(ReportInputs {
            matrix: runs.iter().map(Self::cell_key).collect(),
            results,
            histories,
            config_hash: self.config_hash.clone(),
            code_version: CODE_VERSION.into(),
            zero_method: self.config.zero_method,
        })
    }

    pub fn cmd_compare(&self) -> Result<Vec<ComparisonRow>> {
        let report = make_report(&self.report_inputs()?)?;
        let json = serde_json::to_string_pretty(&report.comparisons).expect("comparisons serialize");
        write_file(&self.layout.comparisons(), json.as_bytes())?;
        Ok(report.comparisons)
    }

    pub fn cmd_report(&self) -> Result<(EvaluationReport, Vec<PathBuf>)> {
        let report = make_report(&self.report_inputs()?)?;
        let files = render_report(&report, &self.layout.report())?;
        Ok((report, files))
    }

    /// Reads one run's persisted test results.
    pub fn results_of(&self, run_id: &str) -> Result<Vec<DiceResult>> {
        let path = self.layout.results(run_id);
        let f = fs::File::open(&path).map_err(io(&path))?;
        Ok(read_results(BufReader::new(f))?)
    }
}
