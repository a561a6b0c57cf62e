use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::metadata::{parse_metadata, PatientMetadata};
use super::{
    absolute, check_unique, list_dir, parse_sample_stem, sort_records, DatasetError, Result, SampleRecord,
    Source, View,
};
use crate::imageio;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CamusDataset {
    /// Sorted by (patient, view, phase).
    pub records: Vec<SampleRecord>,
    pub metadata: BTreeMap<String, PatientMetadata>,
}

fn file_stem(path: &Path) -> Option<&str> {
    path.file_stem().and_then(|s| s.to_str())
}

/// Scans a CAMUS tree: `root/patientNNNN/patientNNNN_<2CH|4CH>_<ED|ES>.<ext>`
/// images, `..._gt.<ext>` masks and `Info_<2CH|4CH>.cfg` metadata.
pub fn scan_camus(root: &Path) -> Result<CamusDataset> {
    let root = absolute(root)?;
    let patient_dirs: Vec<PathBuf> = list_dir(&root)?
        .into_iter()
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("patient"))
        })
        .collect();

    let scanned: Vec<(Vec<SampleRecord>, Option<PatientMetadata>)> = patient_dirs
        .par_iter()
        .map(|dir| scan_patient(dir))
        .collect::<Result<_>>()?;

    let mut records = Vec::new();
    let mut metadata = BTreeMap::new();
    for (recs, meta) in scanned {
        if let Some(meta) = meta {
            metadata.insert(meta.patient_id.clone(), meta);
        }
        records.extend(recs);
    }
    sort_records(&mut records);
    check_unique(&records)?;
    Ok(CamusDataset { records, metadata })
}

fn scan_patient(dir: &Path) -> Result<(Vec<SampleRecord>, Option<PatientMetadata>)> {
    let patient_id = dir
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default()
        .to_string();
    let files = list_dir(dir)?;
    let supported: Vec<&PathBuf> = files.iter().filter(|p| imageio::is_supported(p)).collect();

    let mut records = Vec::new();
    for image in &supported {
        let Some(stem) = file_stem(image) else { continue };
        if stem.ends_with("_gt") || stem.contains("_sequence") {
            continue;
        }
        let Some((pid, view, phase, None)) = parse_sample_stem(stem) else {
            continue;
        };
        if pid != patient_id {
            continue;
        }
        let mask_stem = format!("{stem}_gt");
        let mask = supported
            .iter()
            .filter(|p| file_stem(p) == Some(mask_stem.as_str()))
            .min_by_key(|p| p.extension() != image.extension())
            .ok_or_else(|| DatasetError::MissingMask(format!("{pid}/{view}/{phase}")))?;

        let image_dims = imageio::dimensions(image)?;
        let mask_dims = imageio::dimensions(mask)?;
        if image_dims != mask_dims {
            return Err(DatasetError::ShapeMismatch {
                sample: format!("{pid}/{view}/{phase}"),
                image: image_dims,
                mask: mask_dims,
            });
        }
        records.push(SampleRecord {
            patient_id: pid,
            view,
            phase,
            source: Source::Real,
            variant: None,
            image_ref: (*image).clone(),
            mask_ref: (*mask).clone(),
        });
    }
    if records.is_empty() {
        return Ok((records, None));
    }

    let views: BTreeSet<View> = records.iter().map(|r| r.view).collect();
    let mut infos = Vec::new();
    for view in views {
        let path = dir.join(format!("Info_{view}.cfg"));
        let text = fs::read_to_string(&path).map_err(|source| DatasetError::Io {
            path: path.clone(),
            source,
        })?;
        infos.push((view, parse_metadata(&text, &path.display().to_string())?));
    }
    let meta = PatientMetadata::from_views(&patient_id, &infos)?;
    Ok((records, Some(meta)))
}
