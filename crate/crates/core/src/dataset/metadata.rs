use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{DatasetError, ImageQuality, Result, Sex, View};

/// Contents of one `Info_<view>.cfg` file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfoFile {
    pub sex: Sex,
    pub age: u32,
    pub image_quality: ImageQuality,
    pub ed_frame: Option<u32>,
    pub es_frame: Option<u32>,
    pub frame_count: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientMetadata {
    pub patient_id: String,
    pub sex: Sex,
    pub age: u32,
    pub image_quality: BTreeMap<View, ImageQuality>,
    /// (ED, ES) frame indices per view, where the info file provides them.
    pub frames: BTreeMap<View, (u32, u32)>,
}

impl PatientMetadata {
    /// Combines the per-view info files of one patient; sex and age must agree
    /// across views.
    pub fn from_views(patient_id: &str, views: &[(View, InfoFile)]) -> Result<Self> {
        let (_, first) = views
            .first()
            .ok_or_else(|| DatasetError::MissingMetadata(patient_id.to_string()))?;
        let mut meta = PatientMetadata {
            patient_id: patient_id.to_string(),
            sex: first.sex,
            age: first.age,
            image_quality: BTreeMap::new(),
            frames: BTreeMap::new(),
        };
        for (view, info) in views {
            if info.sex != meta.sex {
                return Err(DatasetError::InconsistentMetadata {
                    patient: patient_id.into(),
                    field: "Sex".into(),
                });
            }
            if info.age != meta.age {
                return Err(DatasetError::InconsistentMetadata {
                    patient: patient_id.into(),
                    field: "Age".into(),
                });
            }
            meta.image_quality.insert(*view, info.image_quality);
            if let (Some(ed), Some(es)) = (info.ed_frame, info.es_frame) {
                meta.frames.insert(*view, (ed, es));
            }
        }
        Ok(meta)
    }
}

/// Parses the `Key: value` (or `Key = value`) lines of an info file.
/// Unknown keys are ignored. `origin` only labels error messages.
pub fn parse_metadata(cfg_text: &str, origin: &str) -> Result<InfoFile> {
    let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
    for line in cfg_text.lines() {
        let Some(idx) = line.find([':', '=']) else {
            continue;
        };
        let (key, value) = (line[..idx].trim(), line[idx + 1..].trim());
        if !key.is_empty() {
            fields.insert(key, value);
        }
    }

    let missing: Vec<String> = ["Sex", "Age", "ImageQuality"]
        .iter()
        .filter(|k| !fields.contains_key(*k))
        .map(|k| k.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(DatasetError::MissingMetadataKeys {
            path: origin.to_string(),
            missing,
        });
    }

    let invalid = |key: &str, value: &str| DatasetError::InvalidMetadata {
        path: origin.to_string(),
        key: key.to_string(),
        value: value.to_string(),
    };
    let sex = match fields["Sex"].to_ascii_uppercase().as_str() {
        "F" | "FEMALE" => Sex::Female,
        "M" | "MALE" => Sex::Male,
        _ => return Err(invalid("Sex", fields["Sex"])),
    };
    let age: u32 = fields["Age"]
        .parse()
        .map_err(|_| invalid("Age", fields["Age"]))?;
    if age == 0 {
        return Err(invalid("Age", fields["Age"]));
    }
    let image_quality = match fields["ImageQuality"].to_ascii_lowercase().as_str() {
        "good" => ImageQuality::Good,
        "medium" => ImageQuality::Medium,
        "poor" => ImageQuality::Poor,
        _ => return Err(invalid("ImageQuality", fields["ImageQuality"])),
    };
    let optional = |key: &str| -> Result<Option<u32>> {
        fields
            .get(key)
            .map(|v| v.parse().map_err(|_| invalid(key, v)))
            .transpose()
    };
    Ok(InfoFile {
        sex,
        age,
        image_quality,
        ed_frame: optional("ED")?,
        es_frame: optional("ES")?,
        frame_count: optional("NbFrame")?,
    })
}
