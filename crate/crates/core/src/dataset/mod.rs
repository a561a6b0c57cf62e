//! Discovery, parsing and splitting of the real (CAMUS) and synthetic (SDM)
//! echocardiography datasets.

mod camus;
mod metadata;
mod sdm;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imageio::ImageIoError;

pub use camus::{scan_camus, CamusDataset};
pub use metadata::{parse_metadata, InfoFile, PatientMetadata};
pub use sdm::{scan_sdm, SdmDataset, SDM_TRAIN_COUNT, SDM_VAL_COUNT};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Image(#[from] ImageIoError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing mask for {0}")]
    MissingMask(String),
    #[error("{sample}: image is {image:?} but mask is {mask:?}")]
    ShapeMismatch {
        sample: String,
        image: (usize, usize),
        mask: (usize, usize),
    },
    #[error("duplicate sample {0}")]
    DuplicateSample(String),
    #[error("{path}: metadata is missing key(s) {}", .missing.join(", "))]
    MissingMetadataKeys { path: String, missing: Vec<String> },
    #[error("{path}: invalid metadata value for {key}: {value:?}")]
    InvalidMetadata {
        path: String,
        key: String,
        value: String,
    },
    #[error("{0}: missing metadata file")]
    MissingMetadata(String),
    #[error("{patient}: metadata files disagree on {field}")]
    InconsistentMetadata { patient: String, field: String },
    #[error("unrecognized sample file name {0:?}")]
    UnparsableName(String),
    #[error("mask contains values outside the label set: {0:?}")]
    UnknownLabels(Vec<u8>),
    #[error("invalid label map: {0}")]
    InvalidLabelMap(String),
    #[error("official test patient(s) without records: {}", .0.join(", "))]
    MissingTestPatients(Vec<String>),
    #[error("synthetic record {0} cannot be placed in the real split")]
    SyntheticInRealSplit(String),
    #[error("malformed manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

macro_rules! token_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $token:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $token)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn token(self) -> &'static str {
                match self { $($name::$variant => $token),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.token())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
                match s {
                    $($token => Ok($name::$variant),)+
                    other => Err(format!(concat!("unknown ", stringify!($name), " {:?}"), other)),
                }
            }
        }
    };
}

token_enum! {
    /// Apical imaging plane.
    View { TwoChamber => "2CH", FourChamber => "4CH" }
}

token_enum! {
    /// Cardiac-cycle phase at which the frame was annotated.
    Phase { EndDiastole => "ED", EndSystole => "ES" }
}

token_enum! {
    Source { Real => "real", Synthetic => "synthetic" }
}

token_enum! {
    Sex { Male => "male", Female => "female" }
}

token_enum! {
    ImageQuality { Good => "good", Medium => "medium", Poor => "poor" }
}

token_enum! {
    /// Foreground structure segmented for one prompt.
    Structure {
        LvCavity => "lv-cavity",
        Myocardium => "myocardium",
        LaCavity => "la-cavity",
    }
}

impl Structure {
    /// Lowercase anatomical name used in prompts and VQA questions.
    pub fn name(self) -> &'static str {
        match self {
            Structure::LvCavity => "left ventricular cavity",
            Structure::Myocardium => "myocardium",
            Structure::LaCavity => "left atrium cavity",
        }
    }
}

/// Numeric encoding of the three structures in multiclass masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub lv_cavity: u8,
    pub myocardium: u8,
    pub la_cavity: u8,
}

impl Default for LabelMap {
    fn default() -> Self {
        LabelMap {
            lv_cavity: 1,
            myocardium: 2,
            la_cavity: 3,
        }
    }
}

impl LabelMap {
    pub fn validate(&self) -> Result<()> {
        let values = [self.lv_cavity, self.myocardium, self.la_cavity];
        if values.contains(&0) {
            return Err(DatasetError::InvalidLabelMap(
                "label 0 is reserved for background".into(),
            ));
        }
        let distinct: BTreeSet<u8> = values.iter().copied().collect();
        if distinct.len() != 3 {
            return Err(DatasetError::InvalidLabelMap(format!(
                "labels {values:?} are not distinct"
            )));
        }
        Ok(())
    }

    pub fn target(&self, structure: Structure) -> SegmentationTarget {
        let label_value = match structure {
            Structure::LvCavity => self.lv_cavity,
            Structure::Myocardium => self.myocardium,
            Structure::LaCavity => self.la_cavity,
        };
        SegmentationTarget {
            structure,
            label_value,
        }
    }

    pub fn targets(&self) -> Vec<SegmentationTarget> {
        Structure::ALL.iter().map(|&s| self.target(s)).collect()
    }

    fn known(&self, value: u8) -> bool {
        value == 0 || value == self.lv_cavity || value == self.myocardium || value == self.la_cavity
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentationTarget {
    pub structure: Structure,
    pub label_value: u8,
}

/// One image/mask pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub patient_id: String,
    pub view: View,
    pub phase: Phase,
    pub source: Source,
    /// Distinguishes several synthetic images generated from the same
    /// originating real frame; always `None` for real records.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<u32>,
    pub image_ref: PathBuf,
    pub mask_ref: PathBuf,
}

impl SampleRecord {
    /// Stable identity used for pairing, caching and access logs.
    pub fn sample_id(&self) -> String {
        let base = format!("{}_{}_{}", self.patient_id, self.view, self.phase);
        match (self.source, self.variant) {
            (Source::Real, _) => base,
            (Source::Synthetic, Some(v)) => format!("syn:{base}_{v}"),
            (Source::Synthetic, None) => format!("syn:{base}"),
        }
    }

    fn sort_key(&self) -> (&str, View, Phase, Option<u32>) {
        (&self.patient_id, self.view, self.phase, self.variant)
    }
}

pub(crate) fn sort_records(records: &mut [SampleRecord]) {
    records.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
}

pub(crate) fn check_unique(records: &[SampleRecord]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for r in records {
        if !seen.insert(r.sample_id()) {
            return Err(DatasetError::DuplicateSample(r.sample_id()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        })
    }
}

/// Image counts for the real dataset as commonly reported for this split
/// (train/val/test). The validation figure cannot be reached with 50
/// patients of four annotated frames each; see [`DatasetSplit::diagnostics`].
pub const REFERENCE_SPLIT_IMAGES: (usize, usize, usize) = (1600, 400, 200);

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<SampleRecord>,
    pub val: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
}

impl DatasetSplit {
    pub fn get(&self, split: SplitName) -> &[SampleRecord] {
        match split {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    pub fn patients(&self, split: SplitName) -> BTreeSet<&str> {
        self.get(split)
            .iter()
            .map(|r| r.patient_id.as_str())
            .collect()
    }

    /// Human-readable count summary, including any deviation from the
    /// reference image counts.
    pub fn diagnostics(&self) -> Vec<String> {
        let mut lines = Vec::new();
        let (ref_train, ref_val, ref_test) = REFERENCE_SPLIT_IMAGES;
        for (name, records, reference) in [
            (SplitName::Train, &self.train, ref_train),
            (SplitName::Val, &self.val, ref_val),
            (SplitName::Test, &self.test, ref_test),
        ] {
            let patients = self.patients(name).len();
            let mut line = format!("{name}: {patients} patients, {} images", records.len());
            if records.len() != reference {
                line.push_str(&format!(
                    " (reference count {reference}; {patients} patients x {} annotated frames = {})",
                    if patients == 0 { 0 } else { records.len() / patients },
                    records.len()
                ));
            }
            lines.push(line);
        }
        lines
    }
}

/// Splits real records into the official test patients, the first
/// `val_patients` remaining patients (ascending id) for validation and the
/// rest for training.
pub fn split_official(
    records: &[SampleRecord],
    test_patients: &BTreeSet<String>,
    val_patients: usize,
) -> Result<DatasetSplit> {
    if let Some(r) = records.iter().find(|r| r.source == Source::Synthetic) {
        return Err(DatasetError::SyntheticInRealSplit(r.sample_id()));
    }
    let present: BTreeSet<&str> = records.iter().map(|r| r.patient_id.as_str()).collect();
    let missing: Vec<String> = test_patients
        .iter()
        .filter(|p| !present.contains(p.as_str()))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(DatasetError::MissingTestPatients(missing));
    }
    let val_ids: BTreeSet<&str> = present
        .iter()
        .copied()
        .filter(|p| !test_patients.contains(*p))
        .take(val_patients)
        .collect();

    let mut split = DatasetSplit::default();
    for r in records {
        let bucket = if test_patients.contains(&r.patient_id) {
            &mut split.test
        } else if val_ids.contains(r.patient_id.as_str()) {
            &mut split.val
        } else {
            &mut split.train
        };
        bucket.push(r.clone());
    }
    for bucket in [&mut split.train, &mut split.val, &mut split.test] {
        sort_records(bucket);
    }
    Ok(split)
}

/// Reads an official test-patient list: one patient id per line, blank lines
/// and `#` comments ignored.
pub fn parse_patient_list(text: &str) -> BTreeSet<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

/// Indicator mask of one structure.
pub fn binarize_mask(
    mask: &Array2<u8>,
    target: SegmentationTarget,
    labels: &LabelMap,
) -> Result<Array2<u8>> {
    let unknown: BTreeSet<u8> = mask.iter().copied().filter(|&v| !labels.known(v)).collect();
    if !unknown.is_empty() {
        return Err(DatasetError::UnknownLabels(unknown.into_iter().collect()));
    }
    Ok(mask.mapv(|v| u8::from(v == target.label_value)))
}

/// Line-delimited manifest row for one scanned record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordManifestLine {
    pub sample_id: String,
    #[serde(flatten)]
    pub record: SampleRecord,
    pub split: SplitName,
}

pub fn write_record_manifest<W: Write>(
    mut out: W,
    rows: impl IntoIterator<Item = (SplitName, SampleRecord)>,
) -> std::io::Result<()> {
    for (split, record) in rows {
        let line = RecordManifestLine {
            sample_id: record.sample_id(),
            record,
            split,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_record_manifest<R: BufRead>(input: R) -> Result<Vec<RecordManifestLine>> {
    let mut rows = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| DatasetError::Manifest {
            line: i + 1,
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        rows.push(
            serde_json::from_str(&line).map_err(|e| DatasetError::Manifest {
                line: i + 1,
                reason: e.to_string(),
            })?,
        );
    }
    Ok(rows)
}

/// Groups records by patient, preserving record order within each patient.
pub fn by_patient(records: &[SampleRecord]) -> BTreeMap<&str, Vec<&SampleRecord>> {
    let mut out: BTreeMap<&str, Vec<&SampleRecord>> = BTreeMap::new();
    for r in records {
        out.entry(r.patient_id.as_str()).or_default().push(r);
    }
    out
}

/// Parses `patientNNNN_<view>_<phase>` with an optional trailing
/// `_<variant>` and returns the pieces.
pub fn parse_sample_stem(stem: &str) -> Option<(String, View, Phase, Option<u32>)> {
    let parts: Vec<&str> = stem.split('_').collect();
    let (patient, view, phase, variant) = match parts.as_slice() {
        [p, v, ph] => (*p, *v, *ph, None),
        [p, v, ph, var] => (*p, *v, *ph, Some(var.parse::<u32>().ok()?)),
        _ => return None,
    };
    let digits = patient.strip_prefix("patient")?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    Some((patient.to_string(), view.parse().ok()?, phase.parse().ok()?, variant))
}

pub(crate) fn list_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|source| DatasetError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|source| DatasetError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        out.push(entry.path());
    }
    out.sort();
    Ok(out)
}

pub(crate) fn absolute(path: &Path) -> Result<PathBuf> {
    std::fs::canonicalize(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn record(pid: &str, view: View, phase: Phase) -> SampleRecord {
        SampleRecord {
            patient_id: pid.into(),
            view,
            phase,
            source: Source::Real,
            variant: None,
            image_ref: PathBuf::from("img"),
            mask_ref: PathBuf::from("mask"),
        }
    }

    #[test]
    fn default_label_map_is_valid() {
        LabelMap::default().validate().unwrap();
        let bad = LabelMap {
            lv_cavity: 1,
            myocardium: 1,
            la_cavity: 3,
        };
        assert!(bad.validate().is_err());
        let zero = LabelMap {
            lv_cavity: 0,
            myocardium: 2,
            la_cavity: 3,
        };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn binarize_all_zero() {
        let labels = LabelMap::default();
        let mask = Array2::<u8>::zeros((5, 3));
        for t in labels.targets() {
            assert_eq!(binarize_mask(&mask, t, &labels).unwrap(), mask);
        }
    }

    #[test]
    fn binarize_matches_pixel_loop() {
        let labels = LabelMap::default();
        let mask = array![[0u8, 1, 2, 3], [3, 2, 1, 0], [2, 2, 0, 1], [1, 3, 3, 2]];
        let target = labels.target(Structure::Myocardium);
        let got = binarize_mask(&mask, target, &labels).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let expected = if mask[[r, c]] == 2 { 1 } else { 0 };
                assert_eq!(got[[r, c]], expected, "pixel ({r},{c})");
            }
        }
    }

    #[test]
    fn binarize_rejects_unknown_labels() {
        let labels = LabelMap::default();
        let mask = array![[0u8, 7], [4, 1]];
        match binarize_mask(&mask, labels.target(Structure::LvCavity), &labels) {
            Err(DatasetError::UnknownLabels(v)) => assert_eq!(v, vec![4, 7]),
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn binarizations_partition_pixels(values in proptest::collection::vec(0u8..4, 1..64)) {
            let labels = LabelMap::default();
            let mask = Array2::from_shape_vec((1, values.len()), values).unwrap();
            let mut total = mask.mapv(|v| u32::from(v == 0));
            for t in labels.targets() {
                total = total + binarize_mask(&mask, t, &labels).unwrap().mapv(u32::from);
            }
            prop_assert!(total.iter().all(|&v| v == 1));
        }
    }

    #[test]
    fn split_puts_first_non_test_patients_in_val() {
        let mut records = Vec::new();
        for i in 1..=6 {
            records.push(record(&format!("patient{i:04}"), View::TwoChamber, Phase::EndDiastole));
        }
        let test: BTreeSet<String> = ["patient0002".to_string()].into();
        let split = split_official(&records, &test, 2).unwrap();
        let val: Vec<&str> = split.val.iter().map(|r| r.patient_id.as_str()).collect();
        assert_eq!(val, ["patient0001", "patient0003"]);
        assert_eq!(split.patients(SplitName::Train).len(), 3);
        assert!(split.patients(SplitName::Train).contains("patient0004"));
        assert_eq!(split.test.len(), 1);
    }

    #[test]
    fn split_rejects_absent_test_patient_and_synthetic() {
        let records = vec![record("patient0001", View::TwoChamber, Phase::EndSystole)];
        let test: BTreeSet<String> = ["patient0009".to_string()].into();
        assert!(matches!(
            split_official(&records, &test, 1),
            Err(DatasetError::MissingTestPatients(_))
        ));
        let mut syn = records[0].clone();
        syn.source = Source::Synthetic;
        assert!(matches!(
            split_official(&[syn], &BTreeSet::new(), 1),
            Err(DatasetError::SyntheticInRealSplit(_))
        ));
    }

    #[test]
    fn sample_stem_parsing() {
        assert_eq!(
            parse_sample_stem("patient0441_4CH_ES"),
            Some(("patient0441".into(), View::FourChamber, Phase::EndSystole, None))
        );
        assert_eq!(
            parse_sample_stem("patient0003_2CH_ED_12"),
            Some(("patient0003".into(), View::TwoChamber, Phase::EndDiastole, Some(12)))
        );
        assert_eq!(parse_sample_stem("notes"), None);
        assert_eq!(parse_sample_stem("patient0001_3CH_ED"), None);
        assert_eq!(parse_sample_stem("patientX_2CH_ED"), None);
    }

    #[test]
    fn manifest_round_trip() {
        let rows = vec![
            (SplitName::Train, record("patient0003", View::TwoChamber, Phase::EndDiastole)),
            (SplitName::Test, record("patient0001", View::FourChamber, Phase::EndSystole)),
        ];
        let mut buf = Vec::new();
        write_record_manifest(&mut buf, rows.clone()).unwrap();
        let back = read_record_manifest(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].split, SplitName::Test);
        assert_eq!(back[1].record, rows[1].1);
        assert_eq!(back[0].sample_id, "patient0003_2CH_ED");
    }
}
