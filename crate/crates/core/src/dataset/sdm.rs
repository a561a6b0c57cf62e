use std::path::Path;

use log::warn;

use super::{
    absolute, check_unique, list_dir, parse_sample_stem, sort_records, DatasetError, Result, SampleRecord,
    Source,
};
use crate::imageio;

/// Published size of the synthetic training split.
pub const SDM_TRAIN_COUNT: usize = 8000;
/// Published size of the synthetic validation split.
pub const SDM_VAL_COUNT: usize = 1000;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SdmDataset {
    pub train: Vec<SampleRecord>,
    pub val: Vec<SampleRecord>,
    /// Non-fatal findings such as count mismatches.
    pub warnings: Vec<String>,
}

/// Scans a synthetic tree laid out as `root/<train|val>/images/<stem>.<ext>`
/// with the conditioning mask at `root/<train|val>/masks/<stem>.<ext>`.
///
/// `<stem>` is `patientNNNN_<view>_<phase>[_<k>]`, naming the real frame the
/// synthetic image was generated from.
pub fn scan_sdm(root: &Path, expected: Option<(usize, usize)>) -> Result<SdmDataset> {
    let root = absolute(root)?;
    let mut out = SdmDataset {
        train: scan_split(&root.join("train"))?,
        val: scan_split(&root.join("val"))?,
        warnings: Vec::new(),
    };
    let (n_train, n_val) = (out.train.len(), out.val.len());
    if n_train + n_val == 0 {
        out.warnings
            .push(format!("no synthetic samples found under {}", root.display()));
    }
    if let Some((e_train, e_val)) = expected {
        if (n_train, n_val) != (e_train, e_val) {
            out.warnings.push(format!(
                "synthetic split sizes {n_train}/{n_val} differ from expected {e_train}/{e_val}"
            ));
        }
    }
    for w in &out.warnings {
        warn!("{w}");
    }
    Ok(out)
}

fn scan_split(dir: &Path) -> Result<Vec<SampleRecord>> {
    let images_dir = dir.join("images");
    if !images_dir.is_dir() {
        return Ok(Vec::new());
    }
    let masks_dir = dir.join("masks");
    let mut records = Vec::new();
    for image in list_dir(&images_dir)? {
        if !image.is_file() || !imageio::is_supported(&image) {
            continue;
        }
        let name = image
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        let stem = image
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default();
        let (patient_id, view, phase, variant) =
            parse_sample_stem(stem).ok_or_else(|| DatasetError::UnparsableName(name.clone()))?;
        let mask = masks_dir.join(&name);
        if !mask.is_file() {
            return Err(DatasetError::MissingMask(format!(
                "synthetic {}",
                image.display()
            )));
        }
        let image_dims = imageio::dimensions(&image)?;
        let mask_dims = imageio::dimensions(&mask)?;
        if image_dims != mask_dims {
            return Err(DatasetError::ShapeMismatch {
                sample: name,
                image: image_dims,
                mask: mask_dims,
            });
        }
        records.push(SampleRecord {
            patient_id,
            view,
            phase,
            source: Source::Synthetic,
            variant: Some(variant.unwrap_or(0)),
            image_ref: image,
            mask_ref: mask,
        });
    }
    sort_records(&mut records);
    check_unique(&records)?;
    Ok(records)
}
