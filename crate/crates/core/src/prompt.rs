//! Attribute extraction and rendering of the incremental prompt levels.
//!
//! Attributes are introduced one per level in a fixed order (structure, view,
//! cardiac cycle, sex, age, image quality, shape). Synthetic samples carry no
//! quality annotation, so for them shape is introduced at level 6 and level 7
//! does not exist. The sentence itself always places the clauses in the same
//! order regardless of which level introduced them:
//!
//! ```text
//! <Structure>[ of <shape> shape][ in <view> view in the cardiac ultrasound]
//!     [ at the end of the <cycle> cycle][ of a [<age>-year-old ]<sex>]
//!     [ with <quality> image quality].
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    parse_sample_stem, ImageQuality, PatientMetadata, Phase, SampleRecord, Sex, Source, SplitName,
    Structure, View,
};

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("prompt level {0} is outside 0..=7")]
    InvalidLevel(u8),
    #[error("level {level} does not exist for {origin} samples")]
    LevelUnavailable { level: u8, origin: Source },
    #[error("unrecognized file name {0:?}")]
    UnparsableFilename(String),
    #[error("conflicting values for {field}: {first} vs {second}")]
    Conflict {
        field: Attribute,
        first: String,
        second: String,
    },
    #[error("level {level} requires attribute {field}, which is missing")]
    MissingAttribute { field: Attribute, level: u8 },
    #[error("synthetic samples carry no image quality annotation")]
    QualityOnSynthetic,
    #[error("no metadata for patient {0}")]
    MissingMetadata(String),
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("manifest entry {index}: stored prompt {stored:?} does not re-render (got {rendered:?})")]
    StalePrompt {
        index: usize,
        stored: String,
        rendered: String,
    },
}

pub type Result<T, E = PromptError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Triangle,
    Oval,
    Square,
    Rectangle,
}

impl Shape {
    pub const ALL: [Shape; 5] = [
        Shape::Circle,
        Shape::Triangle,
        Shape::Oval,
        Shape::Square,
        Shape::Rectangle,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
            Shape::Oval => "oval",
            Shape::Square => "square",
            Shape::Rectangle => "rectangle",
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Attribute {
    Structure,
    View,
    Cycle,
    Sex,
    Age,
    ImageQuality,
    Shape,
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Attribute::Structure => "structure",
            Attribute::View => "view",
            Attribute::Cycle => "cardiac cycle",
            Attribute::Sex => "sex",
            Attribute::Age => "age",
            Attribute::ImageQuality => "image quality",
            Attribute::Shape => "shape",
        })
    }
}

const REAL_ORDER: [Attribute; 7] = [
    Attribute::Structure,
    Attribute::View,
    Attribute::Cycle,
    Attribute::Sex,
    Attribute::Age,
    Attribute::ImageQuality,
    Attribute::Shape,
];

const SYNTHETIC_ORDER: [Attribute; 6] = [
    Attribute::Structure,
    Attribute::View,
    Attribute::Cycle,
    Attribute::Sex,
    Attribute::Age,
    Attribute::Shape,
];

/// Prompt level `P0`..`P7`; the level equals the number of attributes used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct PromptLevel(u8);

impl PromptLevel {
    pub const MAX: u8 = 7;

    pub fn new(level: u8) -> Result<Self> {
        if level > Self::MAX {
            return Err(PromptError::InvalidLevel(level));
        }
        Ok(PromptLevel(level))
    }

    pub fn get(self) -> u8 {
        self.0
    }

    pub fn all() -> impl Iterator<Item = PromptLevel> {
        (0..=Self::MAX).map(PromptLevel)
    }

    /// Highest level available for samples of `source`.
    pub fn max_for(source: Source) -> PromptLevel {
        PromptLevel(introduction_order(source).len() as u8)
    }

    pub fn available_for(self, source: Source) -> bool {
        self <= Self::max_for(source)
    }
}

impl TryFrom<u8> for PromptLevel {
    type Error = PromptError;

    fn try_from(value: u8) -> Result<Self> {
        PromptLevel::new(value)
    }
}

impl From<PromptLevel> for u8 {
    fn from(level: PromptLevel) -> u8 {
        level.0
    }
}

impl fmt::Display for PromptLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P{}", self.0)
    }
}

/// Order in which attributes are introduced, one per level.
pub fn introduction_order(source: Source) -> &'static [Attribute] {
    match source {
        Source::Real => &REAL_ORDER,
        Source::Synthetic => &SYNTHETIC_ORDER,
    }
}

/// Attributes consumed by a prompt at `level`.
pub fn attributes_at(source: Source, level: PromptLevel) -> Result<&'static [Attribute]> {
    if !level.available_for(source) {
        return Err(PromptError::LevelUnavailable {
            level: level.get(),
            origin: source,
        });
    }
    Ok(&introduction_order(source)[..level.get() as usize])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSet {
    pub source: Source,
    pub structure: Structure,
    pub view: Option<View>,
    pub phase: Option<Phase>,
    pub sex: Option<Sex>,
    pub age: Option<u32>,
    pub image_quality: Option<ImageQuality>,
    pub shape: Option<Shape>,
}

impl AttributeSet {
    fn has(&self, attr: Attribute) -> bool {
        match attr {
            Attribute::Structure => true,
            Attribute::View => self.view.is_some(),
            Attribute::Cycle => self.phase.is_some(),
            Attribute::Sex => self.sex.is_some(),
            Attribute::Age => self.age.is_some(),
            Attribute::ImageQuality => self.image_quality.is_some(),
            Attribute::Shape => self.shape.is_some(),
        }
    }

    /// Checks that every attribute needed at `level` is present.
    pub fn check_level(&self, level: PromptLevel) -> Result<()> {
        if self.source == Source::Synthetic && self.image_quality.is_some() {
            return Err(PromptError::QualityOnSynthetic);
        }
        for &attr in attributes_at(self.source, level)? {
            if !self.has(attr) {
                return Err(PromptError::MissingAttribute {
                    field: attr,
                    level: level.get(),
                });
            }
        }
        Ok(())
    }
}

/// Attributes contributed by one source of information (file name, metadata
/// or the VQA model).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PartialAttributes {
    pub view: Option<View>,
    pub phase: Option<Phase>,
    pub sex: Option<Sex>,
    pub age: Option<u32>,
    pub image_quality: Option<ImageQuality>,
    pub shape: Option<Shape>,
}

/// View and cardiac phase encoded in a CAMUS-style file name such as
/// `patient0001_2CH_ED.mhd` or `patient0001_2CH_ED_gt.png`.
pub fn attributes_from_filename(name: &str) -> Result<PartialAttributes> {
    let file = Path::new(name)
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or(name);
    let stem = file.split('.').next().unwrap_or(file);
    let stem = stem.strip_suffix("_gt").unwrap_or(stem);
    let (_, view, phase, _) =
        parse_sample_stem(stem).ok_or_else(|| PromptError::UnparsableFilename(name.to_string()))?;
    Ok(PartialAttributes {
        view: Some(view),
        phase: Some(phase),
        ..Default::default()
    })
}

/// Demographic attributes, plus the per-view image quality for real samples.
pub fn attributes_from_metadata(meta: &PatientMetadata, view: View, source: Source) -> PartialAttributes {
    PartialAttributes {
        sex: Some(meta.sex),
        age: Some(meta.age),
        image_quality: match source {
            Source::Real => meta.image_quality.get(&view).copied(),
            Source::Synthetic => None,
        },
        ..Default::default()
    }
}

fn merge_field<T: Copy + PartialEq + fmt::Debug>(
    slot: &mut Option<T>,
    value: Option<T>,
    field: Attribute,
) -> Result<()> {
    match (*slot, value) {
        (Some(a), Some(b)) if a != b => Err(PromptError::Conflict {
            field,
            first: format!("{a:?}"),
            second: format!("{b:?}"),
        }),
        (None, Some(b)) => {
            *slot = Some(b);
            Ok(())
        }
        _ => Ok(()),
    }
}

/// Unions attribute parts for one (sample, structure) pair and checks the
/// result against `level`.
pub fn merge_attributes(
    parts: &[PartialAttributes],
    structure: Structure,
    source: Source,
    level: PromptLevel,
) -> Result<AttributeSet> {
    let mut attrs = AttributeSet {
        source,
        structure,
        view: None,
        phase: None,
        sex: None,
        age: None,
        image_quality: None,
        shape: None,
    };
    for part in parts {
        merge_field(&mut attrs.view, part.view, Attribute::View)?;
        merge_field(&mut attrs.phase, part.phase, Attribute::Cycle)?;
        merge_field(&mut attrs.sex, part.sex, Attribute::Sex)?;
        merge_field(&mut attrs.age, part.age, Attribute::Age)?;
        merge_field(&mut attrs.image_quality, part.image_quality, Attribute::ImageQuality)?;
        merge_field(&mut attrs.shape, part.shape, Attribute::Shape)?;
    }
    attrs.check_level(level)?;
    Ok(attrs)
}

fn capitalized(text: &str) -> String {
    let mut chars = text.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Renders the prompt sentence for `attrs` at `level`. Level 0 is the empty
/// string.
pub fn render_prompt(attrs: &AttributeSet, level: PromptLevel) -> Result<String> {
    attrs.check_level(level)?;
    let active: BTreeSet<Attribute> = attributes_at(attrs.source, level)?.iter().copied().collect();
    if active.is_empty() {
        return Ok(String::new());
    }
    let on = |a: Attribute| active.contains(&a);

    let mut s = capitalized(attrs.structure.name());
    if on(Attribute::Shape) {
        s.push_str(&format!(" of {} shape", attrs.shape.expect("checked")));
    }
    if on(Attribute::View) {
        let view = match attrs.view.expect("checked") {
            View::TwoChamber => "two-chamber",
            View::FourChamber => "four-chamber",
        };
        s.push_str(&format!(" in {view} view in the cardiac ultrasound"));
    }
    if on(Attribute::Cycle) {
        let cycle = match attrs.phase.expect("checked") {
            Phase::EndDiastole => "diastole",
            Phase::EndSystole => "systole",
        };
        s.push_str(&format!(" at the end of the {cycle} cycle"));
    }
    if on(Attribute::Sex) {
        let sex = attrs.sex.expect("checked");
        if on(Attribute::Age) {
            s.push_str(&format!(" of a {}-year-old {sex}", attrs.age.expect("checked")));
        } else {
            s.push_str(&format!(" of a {sex}"));
        }
    }
    if on(Attribute::ImageQuality) {
        s.push_str(&format!(
            " with {} image quality",
            attrs.image_quality.expect("checked")
        ));
    }
    s.push('.');
    Ok(s)
}

/// One (image, mask, prompt) unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletEntry {
    pub sample_id: String,
    pub image_ref: PathBuf,
    /// Multiclass mask; the entry's `structure` selects the foreground.
    pub mask_ref: PathBuf,
    pub prompt: String,
    pub level: PromptLevel,
    pub structure: Structure,
    pub split: SplitName,
    pub source: Source,
    pub attributes: AttributeSet,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletManifest {
    pub entries: Vec<TripletEntry>,
    /// (sample id, structure, level) combinations skipped because the shape
    /// attribute could not be determined.
    pub excluded: Vec<(String, Structure, PromptLevel)>,
}

impl TripletManifest {
    /// Confirms that every stored prompt re-renders from its attributes.
    pub fn validate(&self) -> Result<()> {
        for (index, e) in self.entries.iter().enumerate() {
            let rendered = render_prompt(&e.attributes, e.level)?;
            if rendered != e.prompt {
                return Err(PromptError::StalePrompt {
                    index,
                    stored: e.prompt.clone(),
                    rendered,
                });
            }
        }
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line.map_err(|e| PromptError::Manifest {
                line: i + 1,
                reason: e.to_string(),
            })?;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            entries.push(serde_json::from_str(&line).map_err(|e| PromptError::Manifest {
                line: i + 1,
                reason: e.to_string(),
            })?);
        }
        Ok(TripletManifest {
            entries,
            excluded: Vec::new(),
        })
    }

    pub fn split(&self, split: SplitName) -> Vec<&TripletEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }
}

/// Supplies the non-filename attributes for each record.
pub struct AttributeResolver<'a> {
    /// Real-patient metadata; synthetic records use their originating
    /// patient's entry.
    pub metadata: &'a BTreeMap<String, PatientMetadata>,
    /// Normalized shape answers keyed by (sample id, structure).
    pub shapes: &'a BTreeMap<(String, Structure), Shape>,
}

impl AttributeResolver<'_> {
    fn parts(&self, record: &SampleRecord, structure: Structure) -> Result<Vec<PartialAttributes>> {
        let file_name = record
            .image_ref
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default();
        let from_name = attributes_from_filename(file_name)?;
        let meta = self
            .metadata
            .get(&record.patient_id)
            .ok_or_else(|| PromptError::MissingMetadata(record.patient_id.clone()))?;
        let from_meta = attributes_from_metadata(meta, record.view, record.source);
        let from_vqa = PartialAttributes {
            shape: self.shapes.get(&(record.sample_id(), structure)).copied(),
            ..Default::default()
        };
        Ok(vec![from_name, from_meta, from_vqa])
    }
}

/// Builds triplets for every (level, record, structure) combination, in that
/// nesting order. Combinations whose level needs a shape that could not be
/// determined are recorded in `excluded` instead.
pub fn emit_triplets(
    records: &[(SplitName, SampleRecord)],
    structures: &[Structure],
    levels: &[PromptLevel],
    resolver: &AttributeResolver<'_>,
) -> Result<TripletManifest> {
    let mut manifest = TripletManifest::default();
    for &level in levels {
        for (split, record) in records {
            for &structure in structures {
                let parts = resolver.parts(record, structure)?;
                let attrs = match merge_attributes(&parts, structure, record.source, level) {
                    Err(PromptError::MissingAttribute {
                        field: Attribute::Shape,
                        ..
                    }) => {
                        manifest
                            .excluded
                            .push((record.sample_id(), structure, level));
                        continue;
                    }
                    other => other?,
                };
                manifest.entries.push(TripletEntry {
                    sample_id: record.sample_id(),
                    image_ref: record.image_ref.clone(),
                    mask_ref: record.mask_ref.clone(),
                    prompt: render_prompt(&attrs, level)?,
                    level,
                    structure,
                    split: *split,
                    source: record.source,
                    attributes: attrs,
                });
            }
        }
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lv_attrs(source: Source) -> AttributeSet {
        AttributeSet {
            source,
            structure: Structure::LvCavity,
            view: Some(View::TwoChamber),
            phase: Some(Phase::EndDiastole),
            sex: Some(Sex::Female),
            age: Some(40),
            image_quality: match source {
                Source::Real => Some(ImageQuality::Poor),
                Source::Synthetic => None,
            },
            shape: Some(Shape::Oval),
        }
    }

    fn level(l: u8) -> PromptLevel {
        PromptLevel::new(l).unwrap()
    }

    #[test]
    fn real_level_seven_full_sentence() {
        assert_eq!(
            render_prompt(&lv_attrs(Source::Real), level(7)).unwrap(),
            "Left ventricular cavity of oval shape in two-chamber view in the cardiac ultrasound \
             at the end of the diastole cycle of a 40-year-old female with poor image quality."
        );
    }

    #[test]
    fn synthetic_level_six_full_sentence() {
        assert_eq!(
            render_prompt(&lv_attrs(Source::Synthetic), level(6)).unwrap(),
            "Left ventricular cavity of oval shape in two-chamber view in the cardiac ultrasound \
             at the end of the diastole cycle of a 40-year-old female."
        );
    }

    #[test]
    fn level_zero_is_empty() {
        assert_eq!(render_prompt(&lv_attrs(Source::Real), level(0)).unwrap(), "");
    }

    #[test]
    fn synthetic_has_no_level_seven() {
        assert_eq!(
            render_prompt(&lv_attrs(Source::Synthetic), level(7)),
            Err(PromptError::LevelUnavailable {
                level: 7,
                origin: Source::Synthetic
            })
        );
        assert!(PromptLevel::new(8).is_err());
    }

    #[test]
    fn missing_attribute_names_field_and_level() {
        let mut attrs = lv_attrs(Source::Real);
        attrs.sex = None;
        assert_eq!(
            render_prompt(&attrs, level(4)),
            Err(PromptError::MissingAttribute {
                field: Attribute::Sex,
                level: 4
            })
        );
        assert!(render_prompt(&attrs, level(3)).is_ok());
    }

    #[test]
    fn filename_attributes() {
        let a = attributes_from_filename("patient0001_2CH_ED.mhd").unwrap();
        assert_eq!((a.view, a.phase), (Some(View::TwoChamber), Some(Phase::EndDiastole)));
        let b = attributes_from_filename("patient0441_4CH_ES.png").unwrap();
        assert_eq!((b.view, b.phase), (Some(View::FourChamber), Some(Phase::EndSystole)));
        let gt = attributes_from_filename("patient0441_4CH_ES_gt.nii.gz").unwrap();
        assert_eq!(gt.view, Some(View::FourChamber));
        assert_eq!(
            attributes_from_filename("notes.txt"),
            Err(PromptError::UnparsableFilename("notes.txt".into()))
        );
    }

    #[test]
    fn merge_unions_consistent_parts() {
        let parts = [
            attributes_from_filename("patient0001_2CH_ED.mhd").unwrap(),
            PartialAttributes {
                sex: Some(Sex::Male),
                age: Some(63),
                image_quality: Some(ImageQuality::Good),
                ..Default::default()
            },
            PartialAttributes {
                shape: Some(Shape::Triangle),
                ..Default::default()
            },
        ];
        let attrs = merge_attributes(&parts, Structure::Myocardium, Source::Real, level(7)).unwrap();
        assert_eq!(attrs.age, Some(63));
        assert_eq!(attrs.shape, Some(Shape::Triangle));
        assert_eq!(attrs.view, Some(View::TwoChamber));
    }

    #[test]
    fn merge_detects_conflicts() {
        let parts = [
            attributes_from_filename("patient0001_2CH_ED.mhd").unwrap(),
            PartialAttributes {
                view: Some(View::FourChamber),
                ..Default::default()
            },
        ];
        assert!(matches!(
            merge_attributes(&parts, Structure::LvCavity, Source::Real, level(2)),
            Err(PromptError::Conflict {
                field: Attribute::View,
                ..
            })
        ));
    }

    #[test]
    fn synthetic_level_six_needs_no_quality() {
        let parts = [
            attributes_from_filename("patient0001_2CH_ED_3.png").unwrap(),
            PartialAttributes {
                sex: Some(Sex::Female),
                age: Some(40),
                shape: Some(Shape::Oval),
                ..Default::default()
            },
        ];
        let attrs = merge_attributes(&parts, Structure::LvCavity, Source::Synthetic, level(6)).unwrap();
        assert_eq!(attrs.image_quality, None);
        let with_quality = [
            parts[0].clone(),
            PartialAttributes {
                image_quality: Some(ImageQuality::Good),
                ..parts[1].clone()
            },
        ];
        assert_eq!(
            merge_attributes(&with_quality, Structure::LvCavity, Source::Synthetic, level(1)),
            Err(PromptError::QualityOnSynthetic)
        );
    }

    #[test]
    fn attribute_sets_grow_strictly() {
        for source in [Source::Real, Source::Synthetic] {
            let max = PromptLevel::max_for(source).get();
            for k in 0..max {
                let lo: BTreeSet<_> = attributes_at(source, level(k)).unwrap().iter().collect();
                let hi: BTreeSet<_> = attributes_at(source, level(k + 1)).unwrap().iter().collect();
                assert!(lo.is_subset(&hi) && lo.len() + 1 == hi.len());
            }
        }
    }

    fn arb_attrs() -> impl Strategy<Value = (AttributeSet, u8)> {
        (
            prop::sample::select(Structure::ALL.to_vec()),
            prop::sample::select(View::ALL.to_vec()),
            prop::sample::select(Phase::ALL.to_vec()),
            prop::sample::select(Sex::ALL.to_vec()),
            18u32..95,
            prop::sample::select(ImageQuality::ALL.to_vec()),
            prop::sample::select(Shape::ALL.to_vec()),
            any::<bool>(),
            0u8..=7,
        )
            .prop_map(|(structure, view, phase, sex, age, q, shape, synthetic, lvl)| {
                let source = if synthetic { Source::Synthetic } else { Source::Real };
                let attrs = AttributeSet {
                    source,
                    structure,
                    view: Some(view),
                    phase: Some(phase),
                    sex: Some(sex),
                    age: Some(age),
                    image_quality: (!synthetic).then_some(q),
                    shape: Some(shape),
                };
                let max = PromptLevel::max_for(source).get();
                (attrs, lvl.min(max))
            })
    }

    proptest! {
        #[test]
        fn rendered_prompts_are_well_formed((attrs, lvl) in arb_attrs()) {
            let level = PromptLevel::new(lvl).unwrap();
            let a = render_prompt(&attrs, level).unwrap();
            let b = render_prompt(&attrs, level).unwrap();
            prop_assert_eq!(&a, &b);
            if lvl == 0 {
                prop_assert!(a.is_empty());
            } else {
                prop_assert!(a.starts_with(&capitalized(attrs.structure.name())));
                prop_assert!(a.ends_with('.'));
                prop_assert_eq!(a.matches('.').count(), 1);
            }
        }
    }
}
