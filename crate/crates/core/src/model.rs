//! Uniform handle over vision-language segmentation models.
//!
//! A handle maps a preprocessed image and a prompt to a per-pixel probability
//! map at the model's native resolution. Published architectures (CLIPSeg-
//! and CRIS-style) are served by an external inference backend and are not
//! bundled; the in-tree [`ModelKind::Stub`] network honours the same contract
//! with an image encoder, a bag-of-characters text encoder and a small
//! vision-language decoder, and is fully trainable on the CPU.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("image has non-positive dimensions {0:?}")]
    EmptyImage((usize, usize)),
    #[error("{kind} expects input size {expected}, spec says {found}")]
    InputSize {
        kind: ModelKind,
        expected: usize,
        found: usize,
    },
    #[error("invalid normalization: {0}")]
    Normalization(String),
    #[error("{0} weights are served by an external backend that is not available in this build")]
    BackendUnavailable(ModelKind),
    #[error("checkpoint holds a {found} model but a {expected} model was requested")]
    KindMismatch { expected: ModelKind, found: ModelKind },
    #[error("checkpoint layout does not match the model: {0}")]
    LayoutMismatch(String),
    #[error("input is {found:?}, model expects {expected:?}")]
    InputShape {
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },
    #[error("{path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "clipseg-like")]
    ClipsegLike,
    #[serde(rename = "cris-like")]
    CrisLike,
    #[serde(rename = "stub")]
    Stub,
}

impl ModelKind {
    pub fn slug(self) -> &'static str {
        match self {
            ModelKind::ClipsegLike => "clipseg-like",
            ModelKind::CrisLike => "cris-like",
            ModelKind::Stub => "stub",
        }
    }

    /// Fixed square input resolution of the published architectures.
    pub fn required_input_size(self) -> Option<usize> {
        match self {
            ModelKind::ClipsegLike => Some(416),
            ModelKind::CrisLike => Some(352),
            ModelKind::Stub => None,
        }
    }

    pub fn default_batch_size(self) -> usize {
        match self {
            ModelKind::ClipsegLike => 128,
            ModelKind::CrisLike => 32,
            ModelKind::Stub => 4,
        }
    }

    pub fn default_learning_rate(self) -> f64 {
        match self {
            ModelKind::ClipsegLike => 2e-3,
            ModelKind::CrisLike => 2e-5,
            ModelKind::Stub => 1e-2,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(ModelError::Normalization(format!(
                "standard deviations must be positive, got {:?}",
                self.std
            )));
        }
        if self.mean.iter().any(|m| !m.is_finite()) {
            return Err(ModelError::Normalization("non-finite mean".into()));
        }
        Ok(())
    }
}

/// Hyperparameters of the stub network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StubArch {
    pub hidden: usize,
}

impl Default for StubArch {
    fn default() -> Self {
        StubArch { hidden: 12 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_size: usize,
    /// Per-channel constants published with the model family; applied to
    /// intensities scaled to [0, 1].
    pub normalization: Normalization,
    #[serde(default)]
    pub weights_ref: Option<PathBuf>,
    #[serde(default)]
    pub stub: StubArch,
}

impl ModelSpec {
    pub fn stub(input_size: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Stub,
            input_size,
            normalization: Normalization {
                mean: [0.5; 3],
                std: [0.5; 3],
            },
            weights_ref: None,
            stub: StubArch::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(expected) = self.kind.required_input_size() {
            if expected != self.input_size {
                return Err(ModelError::InputSize {
                    kind: self.kind,
                    expected,
                    found: self.input_size,
                });
            }
        }
        if self.input_size == 0 {
            return Err(ModelError::EmptyImage((0, 0)));
        }
        self.normalization.validate()
    }
}

/// Bilinear resampling with half-pixel centres and edge clamping; resizing to
/// the same size is the identity.
pub fn resize_bilinear(src: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    if (h, w) == (out_h, out_w) {
        return src.clone();
    }
    let coords = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let x = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let x0 = (x.floor() as usize).min(inp - 1);
                let x1 = (x0 + 1).min(inp - 1);
                (x0, x1, x - x0 as f64)
            })
            .collect()
    };
    let rows = coords(out_h, h);
    let cols = coords(out_w, w);
    Array2::from_shape_fn((out_h, out_w), |(r, c)| {
        let (r0, r1, fr) = rows[r];
        let (c0, c1, fc) = cols[c];
        let top = src[[r0, c0]] * (1.0 - fc) + src[[r0, c1]] * fc;
        let bottom = src[[r1, c0]] * (1.0 - fc) + src[[r1, c1]] * fc;
        top * (1.0 - fr) + bottom * fr
    })
}

/// Nearest-neighbour resampling of a label mask (no new values introduced).
pub fn resize_nearest(src: &Array2<u8>, out_h: usize, out_w: usize) -> Array2<u8> {
    let (h, w) = src.dim();
    if (h, w) == (out_h, out_w) {
        return src.clone();
    }
    let index = |o: usize, out: usize, inp: usize| -> usize {
        (((o as f64 + 0.5) * inp as f64 / out as f64).floor() as usize).min(inp - 1)
    };
    Array2::from_shape_fn((out_h, out_w), |(r, c)| {
        src[[index(r, out_h, h), index(c, out_w, w)]]
    })
}

/// Resizes to the model's input size, replicates to three channels and
/// normalizes per channel. Intensities are taken as 8-bit values.
pub fn preprocess(image: &Array2<f32>, spec: &ModelSpec) -> Result<Array3<f64>> {
    let (h, w) = image.dim();
    if h == 0 || w == 0 {
        return Err(ModelError::EmptyImage((h, w)));
    }
    let s = spec.input_size;
    let resized = resize_bilinear(&image.mapv(|v| v as f64 / 255.0), s, s);
    let norm = spec.normalization;
    Ok(Array3::from_shape_fn((3, s, s), |(ch, r, c)| {
        (resized[[r, c]] - norm.mean[ch]) / norm.std[ch]
    }))
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

const TEXT_BUCKETS: usize = 32;
const PATCH_INPUTS: usize = 3 * 9 + 2;

fn char_bucket(ch: char) -> usize {
    match ch.to_ascii_lowercase() {
        c @ 'a'..='z' => c as usize - 'a' as usize,
        '0'..='9' => 26,
        '-' => 27,
        ' ' => 28,
        '.' => 29,
        _ => 30,
    }
}

/// Unit-norm character histogram of the prompt; zero for the empty prompt.
fn bag_of_characters(prompt: &str) -> [f64; TEXT_BUCKETS] {
    let mut bag = [0.0; TEXT_BUCKETS];
    for ch in prompt.chars() {
        bag[char_bucket(ch)] += 1.0;
    }
    bag[31] = prompt.split_whitespace().count() as f64;
    let norm = bag.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        bag.iter_mut().for_each(|v| *v /= norm);
    }
    bag
}

/// Named slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub encoder: bool,
}

impl Segment {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub segments: Vec<Segment>,
}

impl ParamLayout {
    fn build(parts: &[(&str, usize, bool)]) -> Self {
        let mut offset = 0;
        let segments = parts
            .iter()
            .map(|&(name, len, encoder)| {
                let s = Segment {
                    name: name.to_string(),
                    offset,
                    len,
                    encoder,
                };
                offset += len;
                s
            })
            .collect();
        ParamLayout { segments }
    }

    pub fn total(&self) -> usize {
        self.segments.last().map_or(0, |s| s.offset + s.len)
    }

    pub fn get(&self, name: &str) -> &Segment {
        self.segments
            .iter()
            .find(|s| s.name == name)
            .unwrap_or_else(|| panic!("no parameter segment {name}"))
    }
}

/// Offsets of the stub network's parameter blocks.
#[derive(Debug, Clone)]
struct StubOffsets {
    hidden: usize,
    img_w: usize,
    img_b: usize,
    txt_w: usize,
    txt_b: usize,
    dec_w: usize,
    dec_b: usize,
    out_w: usize,
    out_b: usize,
}

fn stub_layout(arch: StubArch) -> (ParamLayout, StubOffsets) {
    let h = arch.hidden;
    let layout = ParamLayout::build(&[
        ("image_encoder.weight", h * PATCH_INPUTS, true),
        ("image_encoder.bias", h, true),
        ("text_encoder.weight", h * TEXT_BUCKETS, true),
        ("text_encoder.bias", h, true),
        ("decoder.hidden.weight", h * 2 * h, false),
        ("decoder.hidden.bias", h, false),
        ("decoder.out.weight", h, false),
        ("decoder.out.bias", 1, false),
    ]);
    let off = |n: &str| layout.get(n).offset;
    let offsets = StubOffsets {
        hidden: h,
        img_w: off("image_encoder.weight"),
        img_b: off("image_encoder.bias"),
        txt_w: off("text_encoder.weight"),
        txt_b: off("text_encoder.bias"),
        dec_w: off("decoder.hidden.weight"),
        dec_b: off("decoder.hidden.bias"),
        out_w: off("decoder.out.weight"),
        out_b: off("decoder.out.bias"),
    };
    (layout, offsets)
}

/// Provenance stored alongside checkpoint parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub run_id: String,
    pub strategy: String,
    pub epoch: usize,
    pub val_dice: f64,
    /// Snapshot of the experiment configuration that produced the weights.
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointManifest {
    format: u32,
    spec: ModelSpec,
    layout: ParamLayout,
    meta: CheckpointMeta,
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"ECHOCKPT";
const CHECKPOINT_FORMAT: u32 = 1;

/// Loaded model with its parameters and trainability state.
#[derive(Debug, Clone)]
pub struct VlsmHandle {
    spec: ModelSpec,
    layout: ParamLayout,
    offsets: StubOffsets,
    params: Vec<f64>,
    encoder_trainable: bool,
}

impl VlsmHandle {
    /// Loads the model described by `spec`. Stub models are freshly
    /// initialized from `seed` unless `spec.weights_ref` names a checkpoint.
    pub fn load(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        match (spec.kind, &spec.weights_ref) {
            (ModelKind::Stub, None) => Ok(Self::init_stub(spec, seed)),
            (ModelKind::Stub, Some(path)) => Ok(load_checkpoint(spec, path)?.0),
            (kind, _) => Err(ModelError::BackendUnavailable(kind)),
        }
    }

    fn init_stub(spec: &ModelSpec, seed: u64) -> Self {
        let (layout, offsets) = stub_layout(spec.stub);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; layout.total()];
        for seg in &layout.segments {
            if seg.name.ends_with(".bias") {
                continue;
            }
            let fan_in = match seg.name.as_str() {
                "image_encoder.weight" => PATCH_INPUTS,
                "text_encoder.weight" => 1,
                "decoder.hidden.weight" => 2 * offsets.hidden,
                _ => offsets.hidden,
            };
            let bound = (3.0 / fan_in as f64).sqrt();
            for p in &mut params[seg.range()] {
                *p = rng.random_range(-bound..bound);
            }
        }
        VlsmHandle {
            spec: spec.clone(),
            layout,
            offsets,
            params,
            encoder_trainable: true,
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn kind(&self) -> ModelKind {
        self.spec.kind
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn encoder_trainable(&self) -> bool {
        self.encoder_trainable
    }

    pub fn set_encoder_trainable(&mut self, flag: bool) -> &mut Self {
        self.encoder_trainable = flag;
        self
    }

    /// Per-parameter trainability under the current freeze setting.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut mask = vec![true; self.params.len()];
        if !self.encoder_trainable {
            for seg in self.layout.segments.iter().filter(|s| s.encoder) {
                mask[seg.range()].iter_mut().for_each(|m| *m = false);
            }
        }
        mask
    }

    pub fn encoder_params(&self) -> Vec<f64> {
        self.layout
            .segments
            .iter()
            .filter(|s| s.encoder)
            .flat_map(|s| self.params[s.range()].iter().copied())
            .collect()
    }

    /// SHA-256 over the encoder parameters' bit patterns.
    pub fn encoder_checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for v in self.encoder_params() {
            hasher.update(v.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }

    pub fn output_size(&self) -> (usize, usize) {
        (self.spec.input_size, self.spec.input_size)
    }

    fn check_input(&self, input: &Array3<f64>) -> Result<()> {
        let s = self.spec.input_size;
        if input.dim() != (3, s, s) {
            return Err(ModelError::InputShape {
                expected: (3, s, s),
                found: input.dim(),
            });
        }
        Ok(())
    }

    fn text_features(&self, prompt: &str) -> (Vec<f64>, [f64; TEXT_BUCKETS]) {
        let o = &self.offsets;
        let p = &self.params;
        let bag = bag_of_characters(prompt);
        let t = (0..o.hidden)
            .map(|j| {
                let row = &p[o.txt_w + j * TEXT_BUCKETS..o.txt_w + (j + 1) * TEXT_BUCKETS];
                let pre: f64 = row.iter().zip(&bag).map(|(w, b)| w * b).sum::<f64>() + p[o.txt_b + j];
                pre.tanh()
            })
            .collect();
        (t, bag)
    }

    fn patch(input: &Array3<f64>, r: usize, c: usize, out: &mut [f64; PATCH_INPUTS]) {
        let (_, h, w) = input.dim();
        let mut k = 0;
        for ch in 0..3 {
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                    out[k] = if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                        input[[ch, rr as usize, cc as usize]]
                    } else {
                        0.0
                    };
                    k += 1;
                }
            }
        }
        out[27] = 2.0 * (r as f64 + 0.5) / h as f64 - 1.0;
        out[28] = 2.0 * (c as f64 + 0.5) / w as f64 - 1.0;
    }

    /// Runs one pixel through the network, filling the hidden activations.
    fn pixel(&self, u: &[f64; PATCH_INPUTS], t: &[f64], f: &mut [f64], g: &mut [f64]) -> f64 {
        let o = &self.offsets;
        let p = &self.params;
        let h = o.hidden;
        for j in 0..h {
            let row = &p[o.img_w + j * PATCH_INPUTS..o.img_w + (j + 1) * PATCH_INPUTS];
            let pre: f64 = row.iter().zip(u).map(|(w, x)| w * x).sum::<f64>() + p[o.img_b + j];
            f[j] = pre.tanh();
        }
        let mut z = p[o.out_b];
        for k in 0..h {
            let row = &p[o.dec_w + k * 2 * h..o.dec_w + (k + 1) * 2 * h];
            let mut pre = p[o.dec_b + k];
            for j in 0..h {
                pre += row[j] * f[j] * t[j] + row[h + j] * f[j];
            }
            g[k] = pre.tanh();
            z += p[o.out_w + k] * g[k];
        }
        z
    }

    /// Pre-nonlinearity output map.
    pub fn forward_logits(&self, input: &Array3<f64>, prompt: &str) -> Result<Array2<f64>> {
        self.check_input(input)?;
        let (_, s, _) = input.dim();
        let (t, _) = self.text_features(prompt);
        let h = self.offsets.hidden;
        let (mut f, mut g) = (vec![0.0; h], vec![0.0; h]);
        let mut u = [0.0; PATCH_INPUTS];
        let mut out = Array2::zeros((s, s));
        for r in 0..s {
            for c in 0..s {
                Self::patch(input, r, c, &mut u);
                out[[r, c]] = self.pixel(&u, &t, &mut f, &mut g);
            }
        }
        Ok(out)
    }

    /// Probability map at native resolution.
    pub fn forward(&self, input: &Array3<f64>, prompt: &str) -> Result<Array2<f64>> {
        Ok(self.forward_logits(input, prompt)?.mapv(sigmoid))
    }

    /// Gradient of a loss with respect to all parameters, given the loss
    /// gradient with respect to the output logits.
    pub fn backward(&self, input: &Array3<f64>, prompt: &str, grad_logits: &Array2<f64>) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let o = &self.offsets;
        let p = &self.params;
        let h = o.hidden;
        let (_, s, _) = input.dim();
        let (t, bag) = self.text_features(prompt);
        let mut grads = vec![0.0; p.len()];
        let mut dt = vec![0.0; h];
        let (mut f, mut g) = (vec![0.0; h], vec![0.0; h]);
        let mut dpre_g = vec![0.0; h];
        let mut u = [0.0; PATCH_INPUTS];
        for r in 0..s {
            for c in 0..s {
                let dz = grad_logits[[r, c]];
                if dz == 0.0 {
                    continue;
                }
                Self::patch(input, r, c, &mut u);
                self.pixel(&u, &t, &mut f, &mut g);
                grads[o.out_b] += dz;
                for k in 0..h {
                    grads[o.out_w + k] += dz * g[k];
                    dpre_g[k] = dz * p[o.out_w + k] * (1.0 - g[k] * g[k]);
                    grads[o.dec_b + k] += dpre_g[k];
                }
                for j in 0..h {
                    let mut d_ft = 0.0;
                    let mut d_f = 0.0;
                    for k in 0..h {
                        let base = o.dec_w + k * 2 * h;
                        grads[base + j] += dpre_g[k] * f[j] * t[j];
                        grads[base + h + j] += dpre_g[k] * f[j];
                        d_ft += dpre_g[k] * p[base + j];
                        d_f += dpre_g[k] * p[base + h + j];
                    }
                    dt[j] += d_ft * f[j];
                    let df = d_ft * t[j] + d_f;
                    let dpre_f = df * (1.0 - f[j] * f[j]);
                    grads[o.img_b + j] += dpre_f;
                    let row = o.img_w + j * PATCH_INPUTS;
                    for (i, x) in u.iter().enumerate() {
                        grads[row + i] += dpre_f * x;
                    }
                }
            }
        }
        for j in 0..h {
            let dpre_t = dt[j] * (1.0 - t[j] * t[j]);
            grads[o.txt_b + j] += dpre_t;
            let row = o.txt_w + j * TEXT_BUCKETS;
            for (i, b) in bag.iter().enumerate() {
                grads[row + i] += dpre_t * b;
            }
        }
        Ok(grads)
    }
}

/// Writes parameters and provenance to a single-file checkpoint: an 8-byte
/// magic, a little-endian u64 manifest length, the JSON manifest, then the
/// parameters as little-endian f64.
pub fn save_checkpoint(handle: &VlsmHandle, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let ckpt_err = |reason: String| ModelError::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let mut spec = handle.spec.clone();
    spec.weights_ref = None;
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT,
        spec,
        layout: handle.layout.clone(),
        meta: meta.clone(),
    };
    let manifest = serde_json::to_vec(&manifest).map_err(|e| ckpt_err(e.to_string()))?;
    let mut bytes = Vec::with_capacity(16 + manifest.len() + 8 * handle.params.len());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&manifest);
    for v in &handle.params {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let tmp = path.with_extension("tmp");
    let mut file = fs::File::create(&tmp).map_err(|e| ckpt_err(e.to_string()))?;
    file.write_all(&bytes).map_err(|e| ckpt_err(e.to_string()))?;
    file.sync_all().map_err(|e| ckpt_err(e.to_string()))?;
    fs::rename(&tmp, path).map_err(|e| ckpt_err(e.to_string()))
}

/// Reads a checkpoint written by [`save_checkpoint`] and checks it against
/// `spec`. The returned handle has trainable encoders.
pub fn load_checkpoint(spec: &ModelSpec, path: &Path) -> Result<(VlsmHandle, CheckpointMeta)> {
    let ckpt_err = |reason: String| ModelError::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| ckpt_err(e.to_string()))?;
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(ckpt_err("not a checkpoint file".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + len)
        .ok_or_else(|| ckpt_err("truncated manifest".into()))?;
    let manifest: CheckpointManifest =
        serde_json::from_slice(body).map_err(|e| ckpt_err(e.to_string()))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(ckpt_err(format!("unsupported format {}", manifest.format)));
    }
    if manifest.spec.kind != spec.kind {
        return Err(ModelError::KindMismatch {
            expected: spec.kind,
            found: manifest.spec.kind,
        });
    }
    if manifest.spec.input_size != spec.input_size || manifest.spec.stub != spec.stub {
        return Err(ModelError::LayoutMismatch(format!(
            "checkpoint input size {} / {:?}, spec {} / {:?}",
            manifest.spec.input_size, manifest.spec.stub, spec.input_size, spec.stub
        )));
    }
    let (layout, offsets) = stub_layout(spec.stub);
    if layout != manifest.layout {
        return Err(ModelError::LayoutMismatch("parameter segments differ".into()));
    }
    let blob = &bytes[16 + len..];
    if blob.len() != 8 * layout.total() {
        return Err(ModelError::LayoutMismatch(format!(
            "{} parameter bytes, expected {}",
            blob.len(),
            8 * layout.total()
        )));
    }
    let params = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut spec = spec.clone();
    spec.weights_ref = None;
    Ok((
        VlsmHandle {
            spec,
            layout,
            offsets,
            params,
            encoder_trainable: true,
        },
        manifest.meta,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> Array2<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((h, w), |_| rng.random_range(0.0..255.0))
    }

    fn cris_spec() -> ModelSpec {
        ModelSpec {
            kind: ModelKind::CrisLike,
            input_size: 352,
            normalization: Normalization {
                mean: [0.4, 0.45, 0.5],
                std: [0.25, 0.26, 0.27],
            },
            weights_ref: None,
            stub: StubArch::default(),
        }
    }

    #[test]
    fn preprocess_cris_shape() {
        let img = random_image(1, 512, 512);
        let out = preprocess(&img, &cris_spec()).unwrap();
        assert_eq!(out.dim(), (3, 352, 352));
    }

    #[test]
    fn preprocess_constant_zero_is_affine() {
        let spec = cris_spec();
        let out = preprocess(&Array2::zeros((40, 30)), &spec).unwrap();
        for ch in 0..3 {
            let expected = -spec.normalization.mean[ch] / spec.normalization.std[ch];
            assert!(out.index_axis(ndarray::Axis(0), ch).iter().all(|&v| v == expected));
        }
    }

    #[test]
    fn preprocess_is_idempotent_on_resized_input() {
        let spec = ModelSpec::stub(24);
        let img = random_image(2, 61, 47);
        let once = preprocess(&img, &spec).unwrap();
        let resized = resize_bilinear(&img.mapv(|v| v as f64), 24, 24).mapv(|v| v as f32);
        let twice = preprocess(&resized, &spec).unwrap();
        let max_diff = once
            .iter()
            .zip(twice.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_diff <= 1e-5, "max diff {max_diff}");
    }

    #[test]
    fn preprocess_rejects_empty() {
        assert!(matches!(
            preprocess(&Array2::zeros((0, 4)), &ModelSpec::stub(8)),
            Err(ModelError::EmptyImage(_))
        ));
    }

    #[test]
    fn spec_input_size_must_match_kind() {
        let mut spec = cris_spec();
        spec.validate().unwrap();
        spec.input_size = 416;
        assert!(matches!(spec.validate(), Err(ModelError::InputSize { .. })));
        spec.kind = ModelKind::ClipsegLike;
        spec.validate().unwrap();
    }

    #[test]
    fn published_architectures_need_external_backend() {
        assert!(matches!(
            VlsmHandle::load(&cris_spec(), 0),
            Err(ModelError::BackendUnavailable(ModelKind::CrisLike))
        ));
    }

    #[test]
    fn bilinear_identity_and_range() {
        let src = Array2::from_shape_fn((5, 7), |(r, c)| ((r * 7 + c) % 3) as f64 / 2.0);
        assert_eq!(resize_bilinear(&src, 5, 7), src);
        let up = resize_bilinear(&src, 512, 512);
        assert!(up.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn nearest_keeps_label_set() {
        let src = Array2::from_shape_fn((3, 5), |(r, c)| ((r + c) % 4) as u8);
        let out = resize_nearest(&src, 512, 512);
        assert!(out.iter().all(|v| *v < 4));
        assert_eq!(out[[0, 0]], src[[0, 0]]);
        assert_eq!(out[[511, 511]], src[[2, 4]]);
    }

    #[test]
    fn forward_is_deterministic_and_bounded() {
        let spec = ModelSpec::stub(16);
        let handle = VlsmHandle::load(&spec, 7).unwrap();
        let input = preprocess(&random_image(3, 20, 20), &spec).unwrap();
        let a = handle.forward(&input, "Myocardium.").unwrap();
        let b = handle.forward(&input, "Myocardium.").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), (16, 16));
        assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let empty = handle.forward(&input, "").unwrap();
        assert!(empty.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn same_seed_same_weights() {
        let spec = ModelSpec::stub(8);
        let a = VlsmHandle::load(&spec, 11).unwrap();
        let b = VlsmHandle::load(&spec, 11).unwrap();
        let c = VlsmHandle::load(&spec, 12).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let spec = ModelSpec {
            stub: StubArch { hidden: 4 },
            ..ModelSpec::stub(6)
        };
        let mut handle = VlsmHandle::load(&spec, 5).unwrap();
        let input = preprocess(&random_image(9, 6, 6), &spec).unwrap();
        let prompt = "Left atrium cavity in four-chamber view.";
        let weights = Array2::from_shape_fn((6, 6), |(r, c)| ((r * 6 + c) as f64 * 0.37).sin());
        // Linear functional of the logits: L = sum(weights * z).
        let loss = |h: &VlsmHandle| (h.forward_logits(&input, prompt).unwrap() * &weights).sum();
        let grads = handle.backward(&input, prompt, &weights).unwrap();
        let eps = 1e-6;
        for i in (0..handle.params().len()).step_by(7) {
            let orig = handle.params()[i];
            handle.params_mut()[i] = orig + eps;
            let plus = loss(&handle);
            handle.params_mut()[i] = orig - eps;
            let minus = loss(&handle);
            handle.params_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            let err = (fd - grads[i]).abs() / fd.abs().max(grads[i].abs()).max(1e-6);
            assert!(err < 1e-4, "param {i}: fd {fd} analytic {}", grads[i]);
        }
    }

    #[test]
    fn freeze_mask_covers_encoders_only() {
        let mut handle = VlsmHandle::load(&ModelSpec::stub(8), 0).unwrap();
        assert!(handle.trainable_mask().iter().all(|&m| m));
        handle.set_encoder_trainable(false);
        let mask = handle.trainable_mask();
        for seg in &handle.layout().segments {
            assert!(mask[seg.range()].iter().all(|&m| m != seg.encoder), "{}", seg.name);
        }
        handle.set_encoder_trainable(false).set_encoder_trainable(true);
        assert!(handle.trainable_mask().iter().all(|&m| m));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("best.ckpt");
        let spec = ModelSpec::stub(12);
        let handle = VlsmHandle::load(&spec, 3).unwrap();
        let meta = CheckpointMeta {
            run_id: "stub__synthetic__P1__unfrozen__seed3".into(),
            strategy: "synthetic".into(),
            epoch: 4,
            val_dice: 0.5,
            config: serde_json::json!({"lr": 0.01}),
        };
        save_checkpoint(&handle, &meta, &path).unwrap();
        let (loaded, back) = load_checkpoint(&spec, &path).unwrap();
        assert_eq!(back, meta);
        assert_eq!(back.strategy, "synthetic");
        assert!(loaded
            .params()
            .iter()
            .zip(handle.params())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        let input = preprocess(&random_image(4, 12, 12), &spec).unwrap();
        assert_eq!(
            loaded.forward(&input, "Myocardium.").unwrap(),
            handle.forward(&input, "Myocardium.").unwrap()
        );

        let mut clipseg = spec.clone();
        clipseg.kind = ModelKind::ClipsegLike;
        clipseg.input_size = 416;
        let mut other = clipseg.clone();
        other.kind = ModelKind::CrisLike;
        other.input_size = 352;
        assert!(matches!(
            load_checkpoint(&other, &path),
            Err(ModelError::KindMismatch { .. })
        ));
        assert!(matches!(
            load_checkpoint(&ModelSpec::stub(16), &path),
            Err(ModelError::LayoutMismatch(_))
        ));
    }
}
