//! Cached loading of triplet images and masks, with an access log of every
//! sample identity read.

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use ndarray::Array2;

use crate::dataset::{binarize_mask, DatasetError, LabelMap, Source, Structure};
use crate::imageio;
use crate::prompt::TripletEntry;

/// Image and single-structure indicator mask of one triplet, at the stored
/// resolution.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub image: Arc<Array2<f32>>,
    pub mask: Arc<Array2<u8>>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct AccessEntry {
    pub source: Source,
    pub sample_id: String,
}

pub struct SampleLoader {
    labels: LabelMap,
    images: Mutex<HashMap<PathBuf, Arc<Array2<f32>>>>,
    masks: Mutex<HashMap<(PathBuf, Structure), Arc<Array2<u8>>>>,
    accessed: Mutex<BTreeSet<AccessEntry>>,
}

impl SampleLoader {
    pub fn new(labels: LabelMap) -> Self {
        SampleLoader {
            labels,
            images: Mutex::default(),
            masks: Mutex::default(),
            accessed: Mutex::default(),
        }
    }

    pub fn load(&self, entry: &TripletEntry) -> Result<LoadedSample, DatasetError> {
        self.accessed.lock().expect("access log poisoned").insert(AccessEntry {
            source: entry.source,
            sample_id: entry.sample_id.clone(),
        });
        let image = self.image(&entry.image_ref)?;
        let mask = self.mask(&entry.mask_ref, entry.structure)?;
        if image.dim() != mask.dim() {
            return Err(DatasetError::ShapeMismatch {
                sample: entry.sample_id.clone(),
                image: image.dim(),
                mask: mask.dim(),
            });
        }
        Ok(LoadedSample { image, mask })
    }

    fn image(&self, path: &Path) -> Result<Arc<Array2<f32>>, DatasetError> {
        if let Some(img) = self.images.lock().expect("cache poisoned").get(path) {
            return Ok(img.clone());
        }
        let img = Arc::new(imageio::read_intensity(path)?);
        self.images
            .lock()
            .expect("cache poisoned")
            .insert(path.to_path_buf(), img.clone());
        Ok(img)
    }

    fn mask(&self, path: &Path, structure: Structure) -> Result<Arc<Array2<u8>>, DatasetError> {
        let key = (path.to_path_buf(), structure);
        if let Some(m) = self.masks.lock().expect("cache poisoned").get(&key) {
            return Ok(m.clone());
        }
        let labels = imageio::read_labels(path)?;
        let m = Arc::new(binarize_mask(&labels, self.labels.target(structure), &self.labels)?);
        self.masks.lock().expect("cache poisoned").insert(key, m.clone());
        Ok(m)
    }

    /// Every sample identity loaded so far, in sorted order.
    pub fn accessed(&self) -> Vec<AccessEntry> {
        self.accessed
            .lock()
            .expect("access log poisoned")
            .iter()
            .cloned()
            .collect()
    }
}
