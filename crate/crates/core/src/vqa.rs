//! Shape attribute via an external visual-question-answering model.
//!
//! The target structure is outlined with a green bounding box and the model is
//! asked what shape the structure inside the box has. Answers are cached per
//! (sample, structure) so that re-running prompt synthesis never repeats a
//! query.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use log::{debug, warn};
use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{binarize_mask, LabelMap, SampleRecord, Structure};
use crate::imageio;
use crate::prompt::Shape;

#[derive(Debug, Error)]
pub enum VqaError {
    #[error("mask is empty, no bounding box can be derived")]
    EmptyMask,
    #[error("image is {image:?} but mask is {mask:?}")]
    ShapeMismatch {
        image: (usize, usize),
        mask: (usize, usize),
    },
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("no answer within {0:?}")]
    Timeout(Duration),
    #[error("{sample}/{structure}: VQA query failed after {attempts} attempt(s): {last}")]
    QueryFailed {
        sample: String,
        structure: Structure,
        attempts: u32,
        last: Box<VqaError>,
    },
    #[error("answer {0:?} does not name a known shape")]
    Unmatched(String),
    #[error("invalid VQA client configuration: {0}")]
    Config(String),
    #[error("shape cache {path}: {reason}")]
    Cache { path: PathBuf, reason: String },
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
    #[error(transparent)]
    Image(#[from] crate::imageio::ImageIoError),
}

pub type Result<T, E = VqaError> = std::result::Result<T, E>;

/// Question posed for one structure.
pub fn shape_question(structure: Structure) -> String {
    format!("What is the shape of the {} in the green box?", structure.name())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoxStyle {
    /// Stroke width in pixels, drawn inward from the box edge.
    pub stroke: usize,
    pub color: [u8; 3],
}

impl Default for BoxStyle {
    fn default() -> Self {
        BoxStyle {
            stroke: 2,
            color: [0, 255, 0],
        }
    }
}

/// Inclusive pixel bounds of a rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl BoundingBox {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.top..=self.bottom).contains(&r) && (self.left..=self.right).contains(&c)
    }

    /// Whether (r, c) lies on a border of the given stroke width.
    pub fn on_border(&self, r: usize, c: usize, stroke: usize) -> bool {
        self.contains(r, c)
            && (r < self.top + stroke
                || r + stroke > self.bottom
                || c < self.left + stroke
                || c + stroke > self.right)
    }
}

/// Tight axis-aligned box around the nonzero pixels of `mask`.
pub fn bounding_box(mask: &Array2<u8>) -> Option<BoundingBox> {
    let mut bbox: Option<BoundingBox> = None;
    for ((r, c), &v) in mask.indexed_iter() {
        if v == 0 {
            continue;
        }
        bbox = Some(match bbox {
            None => BoundingBox {
                top: r,
                left: c,
                bottom: r,
                right: c,
            },
            Some(b) => BoundingBox {
                top: b.top.min(r),
                left: b.left.min(c),
                bottom: b.bottom.max(r),
                right: b.right.max(c),
            },
        });
    }
    bbox
}

/// Scales an intensity image into 8 bits; images already within 0..=255 are
/// only clamped.
pub fn to_u8(image: &Array2<f32>) -> Array2<u8> {
    let max = image.iter().copied().fold(0.0f32, f32::max);
    let scale = if max > 255.0 { 255.0 / max } else { 1.0 };
    image.mapv(|v| (v * scale).round().clamp(0.0, 255.0) as u8)
}

/// Renders the bounding box of `mask` onto an RGB copy of `image`.
pub fn draw_green_box(
    image: &Array2<f32>,
    mask: &Array2<u8>,
    style: BoxStyle,
) -> Result<(Array3<u8>, BoundingBox)> {
    if image.dim() != mask.dim() {
        return Err(VqaError::ShapeMismatch {
            image: image.dim(),
            mask: mask.dim(),
        });
    }
    let bbox = bounding_box(mask).ok_or(VqaError::EmptyMask)?;
    let gray = to_u8(image);
    let (h, w) = gray.dim();
    let mut rgb = Array3::<u8>::zeros((h, w, 3));
    for ((r, c), &v) in gray.indexed_iter() {
        let px = if bbox.on_border(r, c, style.stroke) {
            style.color
        } else {
            [v, v, v]
        };
        for ch in 0..3 {
            rgb[[r, c, ch]] = px[ch];
        }
    }
    Ok((rgb, bbox))
}

#[derive(Debug, Clone)]
pub struct ShapeQuery {
    pub boxed_image: Array3<u8>,
    pub question: String,
    pub structure: Structure,
}

impl ShapeQuery {
    pub fn new(boxed_image: Array3<u8>, structure: Structure) -> Self {
        ShapeQuery {
            boxed_image,
            question: shape_question(structure),
            structure,
        }
    }
}

/// Request/response contract with a VQA model: PNG bytes and a question in,
/// free-text answer out. One call is one attempt; retries live in
/// [`query_shape`].
pub trait VqaClient: Send + Sync {
    fn ask(&self, image_png: &[u8], question: &str) -> Result<String>;
}

/// Deterministic client for tests and dry runs.
#[derive(Debug, Default)]
pub struct StubVqaClient {
    answers: BTreeMap<String, String>,
    default_answer: Option<String>,
    calls: AtomicUsize,
}

impl StubVqaClient {
    /// Answers every question with `answer`.
    pub fn fixed(answer: &str) -> Self {
        StubVqaClient {
            default_answer: Some(answer.to_string()),
            ..Default::default()
        }
    }

    /// Answers per question; unknown questions fail with a transport error.
    pub fn by_question(answers: BTreeMap<String, String>) -> Self {
        StubVqaClient {
            answers,
            ..Default::default()
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl VqaClient for StubVqaClient {
    fn ask(&self, _image_png: &[u8], question: &str) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.answers
            .get(question)
            .or(self.default_answer.as_ref())
            .cloned()
            .ok_or_else(|| VqaError::Transport(format!("stub has no answer for {question:?}")))
    }
}

/// Runs an external program once per query as
/// `program [args..] <image.png> <question>` and reads the answer from stdout.
#[derive(Debug, Clone)]
pub struct CommandVqaClient {
    pub program: String,
    pub args: Vec<String>,
    pub timeout: Duration,
    scratch: PathBuf,
}

static SCRATCH_COUNTER: AtomicUsize = AtomicUsize::new(0);

impl CommandVqaClient {
    pub fn new(program: &str, args: Vec<String>, timeout: Duration) -> Self {
        CommandVqaClient {
            program: program.to_string(),
            args,
            timeout,
            scratch: std::env::temp_dir(),
        }
    }
}

impl VqaClient for CommandVqaClient {
    fn ask(&self, image_png: &[u8], question: &str) -> Result<String> {
        let n = SCRATCH_COUNTER.fetch_add(1, Ordering::SeqCst);
        let image_path = self
            .scratch
            .join(format!("echoseg-vqa-{}-{n}.png", std::process::id()));
        fs::write(&image_path, image_png).map_err(|e| VqaError::Transport(e.to_string()))?;
        let result = run_with_timeout(
            Command::new(&self.program)
                .args(&self.args)
                .arg(&image_path)
                .arg(question),
            self.timeout,
        );
        let _ = fs::remove_file(&image_path);
        result
    }
}

fn run_with_timeout(cmd: &mut Command, timeout: Duration) -> Result<String> {
    let mut child = cmd
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| VqaError::Transport(e.to_string()))?;
    let start = Instant::now();
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break status,
            Ok(None) if start.elapsed() >= timeout => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(VqaError::Timeout(timeout));
            }
            Ok(None) => std::thread::sleep(Duration::from_millis(5)),
            Err(e) => return Err(VqaError::Transport(e.to_string())),
        }
    };
    let mut stdout = String::new();
    if let Some(mut out) = child.stdout.take() {
        out.read_to_string(&mut stdout)
            .map_err(|e| VqaError::Transport(e.to_string()))?;
    }
    if !status.success() {
        let mut stderr = String::new();
        if let Some(mut err) = child.stderr.take() {
            let _ = err.read_to_string(&mut stderr);
        }
        return Err(VqaError::Transport(format!(
            "exit status {status}: {}",
            stderr.trim()
        )));
    }
    Ok(stdout.trim().to_string())
}

/// Connection and scheduling settings for the VQA dependency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaClientSpec {
    #[serde(flatten)]
    pub backend: VqaBackend,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub box_style: BoxStyle,
}

fn default_timeout() -> f64 {
    60.0
}
fn default_retries() -> u32 {
    2
}
fn default_in_flight() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "lowercase")]
pub enum VqaBackend {
    Stub { answer: String },
    Command { program: String, #[serde(default)] args: Vec<String> },
}

impl VqaClientSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.timeout_secs > 0.0) {
            return Err(VqaError::Config("timeout must be positive".into()));
        }
        if self.max_in_flight == 0 {
            return Err(VqaError::Config("max_in_flight must be at least 1".into()));
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }

    pub fn build(&self) -> Result<Box<dyn VqaClient>> {
        self.validate()?;
        Ok(match &self.backend {
            VqaBackend::Stub { answer } => Box::new(StubVqaClient::fixed(answer)),
            VqaBackend::Command { program, args } => {
                Box::new(CommandVqaClient::new(program, args.clone(), self.timeout()))
            }
        })
    }
}

/// Asks the shape question, retrying transient failures up to `retries`
/// additional times.
pub fn query_shape(
    client: &dyn VqaClient,
    query: &ShapeQuery,
    sample: &str,
    retries: u32,
) -> Result<String> {
    let png = imageio::encode_rgb_png(&query.boxed_image);
    let mut attempts = 0;
    loop {
        attempts += 1;
        match client.ask(&png, &query.question) {
            Ok(answer) => return Ok(answer),
            Err(e) if attempts > retries => {
                return Err(VqaError::QueryFailed {
                    sample: sample.to_string(),
                    structure: query.structure,
                    attempts,
                    last: Box::new(e),
                })
            }
            Err(e) => {
                debug!("{sample}/{}: attempt {attempts} failed: {e}", query.structure);
                std::thread::sleep(Duration::from_millis(10 * attempts as u64));
            }
        }
    }
}

/// Maps a free-text answer onto one of the five shapes, ignoring case,
/// punctuation, articles and a trailing "shape"/"shaped".
pub fn normalize_shape_answer(raw: &str) -> Result<Shape> {
    let cleaned: String = raw
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c.to_ascii_lowercase() } else { ' ' })
        .collect();
    let words: Vec<&str> = cleaned
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the" | "shape" | "shaped" | "like"))
        .collect();
    match words.as_slice() {
        [word] => Shape::ALL
            .iter()
            .copied()
            .find(|s| s.word() == *word)
            .ok_or_else(|| VqaError::Unmatched(raw.to_string())),
        _ => Err(VqaError::Unmatched(raw.to_string())),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub sample_key: String,
    pub structure: Structure,
    pub raw_answer: String,
    pub normalized: Option<Shape>,
}

/// Answer cache backed by a line-delimited sidecar file. Safe for concurrent
/// use; a repeated key overwrites the in-memory entry (last write wins).
#[derive(Debug)]
pub struct ShapeCache {
    path: Option<PathBuf>,
    entries: Mutex<BTreeMap<(String, Structure), CacheRecord>>,
}

impl ShapeCache {
    pub fn in_memory() -> Self {
        ShapeCache {
            path: None,
            entries: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn open(path: &Path) -> Result<Self> {
        let cache_err = |reason: String| VqaError::Cache {
            path: path.to_path_buf(),
            reason,
        };
        let mut entries = BTreeMap::new();
        if path.exists() {
            let file = fs::File::open(path).map_err(|e| cache_err(e.to_string()))?;
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| cache_err(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: CacheRecord = serde_json::from_str(&line)
                    .map_err(|e| cache_err(format!("line {}: {e}", i + 1)))?;
                entries.insert((rec.sample_key.clone(), rec.structure), rec);
            }
        }
        Ok(ShapeCache {
            path: Some(path.to_path_buf()),
            entries: Mutex::new(entries),
        })
    }

    pub fn get(&self, sample_key: &str, structure: Structure) -> Option<CacheRecord> {
        self.entries
            .lock()
            .expect("cache lock")
            .get(&(sample_key.to_string(), structure))
            .cloned()
    }

    pub fn insert(&self, record: CacheRecord) -> Result<()> {
        let mut entries = self.entries.lock().expect("cache lock");
        if let Some(path) = &self.path {
            let mut file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| VqaError::Cache {
                    path: path.clone(),
                    reason: e.to_string(),
                })?;
            let mut line = serde_json::to_string(&record).expect("serializable");
            line.push('\n');
            file.write_all(line.as_bytes()).map_err(|e| VqaError::Cache {
                path: path.clone(),
                reason: e.to_string(),
            })?;
        }
        entries.insert((record.sample_key.clone(), record.structure), record);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Outcome of shape resolution over a set of samples.
#[derive(Debug, Default)]
pub struct ShapeResolution {
    pub shapes: BTreeMap<(String, Structure), Shape>,
    /// (sample, structure, reason) for pairs without a usable shape.
    pub unresolved: Vec<(String, Structure, String)>,
    /// Number of VQA requests issued (cache misses).
    pub queries: usize,
}

/// Resolves the shape attribute for every (record, structure) pair, using the
/// cache first and querying at most `spec.max_in_flight` at a time.
///
/// Empty masks and unmatchable answers are reported in `unresolved`;
/// transport failures after retries abort.
pub fn resolve_shapes(
    records: &[SampleRecord],
    structures: &[Structure],
    labels: &LabelMap,
    client: &dyn VqaClient,
    cache: &ShapeCache,
    spec: &VqaClientSpec,
) -> Result<ShapeResolution> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.max_in_flight)
        .build()
        .map_err(|e| VqaError::Config(e.to_string()))?;
    let queries = AtomicUsize::new(0);

    let outcomes: Vec<Vec<(String, Structure, std::result::Result<Shape, String>)>> =
        pool.install(|| {
            records
                .par_iter()
                .map(|record| {
                    let key = record.sample_id();
                    let mut out = Vec::new();
                    let mut loaded: Option<(Array2<f32>, Array2<u8>)> = None;
                    for &structure in structures {
                        if let Some(hit) = cache.get(&key, structure) {
                            let shape = hit.normalized.ok_or(hit.raw_answer);
                            out.push((key.clone(), structure, shape));
                            continue;
                        }
                        if loaded.is_none() {
                            loaded = Some((
                                imageio::read_intensity(&record.image_ref)?,
                                imageio::read_labels(&record.mask_ref)?,
                            ));
                        }
                        let (image, mask) = loaded.as_ref().expect("loaded above");
                        let binary = binarize_mask(mask, labels.target(structure), labels)?;
                        let boxed = match draw_green_box(image, &binary, spec.box_style) {
                            Ok((rgb, _)) => rgb,
                            Err(VqaError::EmptyMask) => {
                                out.push((key.clone(), structure, Err("empty mask".to_string())));
                                continue;
                            }
                            Err(e) => return Err(e),
                        };
                        queries.fetch_add(1, Ordering::SeqCst);
                        let raw = query_shape(
                            client,
                            &ShapeQuery::new(boxed, structure),
                            &key,
                            spec.retries,
                        )?;
                        let normalized = normalize_shape_answer(&raw).ok();
                        cache.insert(CacheRecord {
                            sample_key: key.clone(),
                            structure,
                            raw_answer: raw.clone(),
                            normalized,
                        })?;
                        out.push((key.clone(), structure, normalized.ok_or(raw)));
                    }
                    Ok(out)
                })
                .collect::<Result<_>>()
        })?;

    let mut resolution = ShapeResolution {
        queries: queries.load(Ordering::SeqCst),
        ..Default::default()
    };
    for (key, structure, outcome) in outcomes.into_iter().flatten() {
        match outcome {
            Ok(shape) => {
                resolution.shapes.insert((key, structure), shape);
            }
            Err(raw) => {
                warn!("{key}/{structure}: no usable shape ({raw:?}); shape-level prompts skipped");
                resolution.unresolved.push((key, structure, raw));
            }
        }
    }
    Ok(resolution)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn question_template() {
        assert_eq!(
            shape_question(Structure::Myocardium),
            "What is the shape of the myocardium in the green box?"
        );
        assert_eq!(
            shape_question(Structure::LvCavity),
            "What is the shape of the left ventricular cavity in the green box?"
        );
    }

    #[test]
    fn box_matches_min_max_oracle() {
        let mut mask = Array2::<u8>::zeros((10, 12));
        for r in 2..=5 {
            for c in 3..=7 {
                if (r + c) % 3 != 0 || r == 2 || c == 7 {
                    mask[[r, c]] = 1;
                }
            }
        }
        mask[[5, 3]] = 1;
        let fg: Vec<(usize, usize)> = mask
            .indexed_iter()
            .filter(|(_, &v)| v != 0)
            .map(|(i, _)| i)
            .collect();
        let oracle = (
            fg.iter().map(|p| p.0).min().unwrap(),
            fg.iter().map(|p| p.1).min().unwrap(),
            fg.iter().map(|p| p.0).max().unwrap(),
            fg.iter().map(|p| p.1).max().unwrap(),
        );
        assert_eq!(oracle, (2, 3, 5, 7));
        let b = bounding_box(&mask).unwrap();
        assert_eq!((b.top, b.left, b.bottom, b.right), oracle);
    }

    #[test]
    fn full_mask_box_is_outer_ring() {
        let image = Array2::<f32>::from_elem((6, 5), 100.0);
        let mask = Array2::<u8>::ones((6, 5));
        let style = BoxStyle {
            stroke: 1,
            ..Default::default()
        };
        let (rgb, b) = draw_green_box(&image, &mask, style).unwrap();
        assert_eq!((b.top, b.left, b.bottom, b.right), (0, 0, 5, 4));
        for r in 0..6 {
            for c in 0..5 {
                let ring = r == 0 || r == 5 || c == 0 || c == 4;
                let px = [rgb[[r, c, 0]], rgb[[r, c, 1]], rgb[[r, c, 2]]];
                assert_eq!(px, if ring { [0, 255, 0] } else { [100, 100, 100] });
            }
        }
    }

    #[test]
    fn box_leaves_inside_and_outside_untouched() {
        let image = Array2::from_shape_fn((16, 16), |(r, c)| (r * 16 + c) as f32);
        let mut mask = Array2::<u8>::zeros((16, 16));
        mask[[3, 4]] = 1;
        mask[[11, 12]] = 1;
        let (rgb, b) = draw_green_box(&image, &mask, BoxStyle::default()).unwrap();
        for r in 0..16 {
            for c in 0..16 {
                let px = [rgb[[r, c, 0]], rgb[[r, c, 1]], rgb[[r, c, 2]]];
                if b.on_border(r, c, 2) {
                    assert_eq!(px, [0, 255, 0]);
                } else {
                    let v = image[[r, c]] as u8;
                    assert_eq!(px, [v, v, v], "pixel ({r},{c})");
                }
            }
        }
        assert!(b.on_border(4, 4, 2) && !b.on_border(5, 6, 2));
    }

    #[test]
    fn empty_mask_is_an_error() {
        let image = Array2::<f32>::zeros((4, 4));
        let mask = Array2::<u8>::zeros((4, 4));
        assert!(matches!(
            draw_green_box(&image, &mask, BoxStyle::default()),
            Err(VqaError::EmptyMask)
        ));
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_shape_answer("An oval.").unwrap(), Shape::Oval);
        assert_eq!(normalize_shape_answer("OVAL").unwrap(), Shape::Oval);
        assert_eq!(normalize_shape_answer(" the Triangle shape ").unwrap(), Shape::Triangle);
        assert!(matches!(
            normalize_shape_answer("elongated blob"),
            Err(VqaError::Unmatched(raw)) if raw == "elongated blob"
        ));
        assert!(normalize_shape_answer("").is_err());
    }

    fn query() -> ShapeQuery {
        ShapeQuery::new(Array3::<u8>::zeros((4, 4, 3)), Structure::LvCavity)
    }

    #[test]
    fn stub_answers() {
        let client = StubVqaClient::fixed("oval");
        assert_eq!(query_shape(&client, &query(), "s", 0).unwrap(), "oval");
        let mut map = BTreeMap::new();
        for (s, a) in [
            (Structure::LvCavity, "oval"),
            (Structure::Myocardium, "circle"),
            (Structure::LaCavity, "square"),
        ] {
            map.insert(shape_question(s), a.to_string());
        }
        let client = StubVqaClient::by_question(map);
        let answers: Vec<String> = [Structure::LvCavity, Structure::Myocardium, Structure::LaCavity]
            .iter()
            .map(|&s| {
                let q = ShapeQuery::new(Array3::<u8>::zeros((2, 2, 3)), s);
                query_shape(&client, &q, "s", 0).unwrap()
            })
            .collect();
        assert_eq!(answers, ["oval", "circle", "square"]);
    }

    #[test]
    fn unreachable_program_fails_after_retries() {
        let client = CommandVqaClient::new(
            "/nonexistent/echoseg-vqa-binary",
            vec![],
            Duration::from_secs(1),
        );
        match query_shape(&client, &query(), "patient0001_2CH_ED", 2) {
            Err(VqaError::QueryFailed {
                attempts, sample, ..
            }) => {
                assert_eq!(attempts, 3);
                assert_eq!(sample, "patient0001_2CH_ED");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[cfg(unix)]
    #[test]
    fn command_client_reads_stdout_and_times_out() {
        let client = CommandVqaClient::new(
            "sh",
            vec!["-c".into(), "echo 'A circle.'".into(), "vqa".into()],
            Duration::from_secs(5),
        );
        let raw = query_shape(&client, &query(), "s", 0).unwrap();
        assert_eq!(normalize_shape_answer(&raw).unwrap(), Shape::Circle);

        let slow = CommandVqaClient::new(
            "sh",
            vec!["-c".into(), "sleep 5".into(), "vqa".into()],
            Duration::from_millis(100),
        );
        let err = query_shape(&slow, &query(), "s", 0).unwrap_err();
        assert!(matches!(err, VqaError::QueryFailed { last, .. } if matches!(*last, VqaError::Timeout(_))));
    }

    #[test]
    fn cache_persists_and_last_write_wins() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("shapes.jsonl");
        let cache = ShapeCache::open(&path).unwrap();
        for raw in ["circle", "An oval."] {
            cache
                .insert(CacheRecord {
                    sample_key: "k".into(),
                    structure: Structure::LaCavity,
                    raw_answer: raw.into(),
                    normalized: normalize_shape_answer(raw).ok(),
                })
                .unwrap();
        }
        let reopened = ShapeCache::open(&path).unwrap();
        assert_eq!(reopened.len(), 1);
        assert_eq!(
            reopened.get("k", Structure::LaCavity).unwrap().normalized,
            Some(Shape::Oval)
        );
    }

    #[test]
    fn spec_validation() {
        let spec: VqaClientSpec = toml::from_str("backend = \"stub\"\nanswer = \"oval\"\n").unwrap();
        assert_eq!(spec.retries, 2);
        spec.validate().unwrap();
        let bad = VqaClientSpec {
            timeout_secs: 0.0,
            ..spec
        };
        assert!(bad.validate().is_err());
    }
}
