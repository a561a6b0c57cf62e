//! Deterministic echo-like dataset trees for tests and demonstrations.
//!
//! Images show a dark left-ventricular cavity inside a bright myocardial
//! ring, with a dark atrium below, over speckle. Geometry varies by patient,
//! view, phase and variant.

use std::fs;
use std::io;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Phase, View};
use crate::imageio::{self, ImageIoError};

#[derive(Debug, Clone, Copy)]
pub struct FixtureSpec {
    pub size: usize,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec { size: 48, seed: 7 }
    }
}

fn inside(y: f64, x: f64, cy: f64, cx: f64, ry: f64, rx: f64) -> bool {
    ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0
}

/// Image and label mask (1 LV cavity, 2 myocardium, 3 LA cavity).
pub fn echo_frame(spec: FixtureSpec, patient: u32, view: View, phase: Phase, variant: u32) -> (Array2<u8>, Array2<u8>) {
    let key = spec.seed
        ^ (u64::from(patient) << 20)
        ^ (u64::from(view == View::FourChamber) << 8)
        ^ (u64::from(phase == Phase::EndSystole) << 9)
        ^ (u64::from(variant) << 40);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    let shrink: f64 = if phase == Phase::EndSystole { 0.85 } else { 1.0 };
    let cy = 0.40 + rng.random_range(-0.04..0.04);
    let cx = 0.50 + rng.random_range(-0.06..0.06);
    let ry = (0.20 + rng.random_range(-0.02..0.02)) * shrink;
    let rx = (0.10 + rng.random_range(-0.015..0.015)) * shrink;
    let wall = 0.05;
    let la_cy = cy + ry + wall + 0.13;
    let la_r = 0.09 / shrink.sqrt();
    let s = spec.size;
    let mut labels = Array2::zeros((s, s));
    let mut image = Array2::zeros((s, s));
    for r in 0..s {
        for c in 0..s {
            let y = (r as f64 + 0.5) / s as f64;
            let x = (c as f64 + 0.5) / s as f64;
            let (label, base) = if inside(y, x, cy, cx, ry, rx) {
                (1, 20.0)
            } else if inside(y, x, cy, cx, ry + wall, rx + wall) {
                (2, 170.0)
            } else if inside(y, x, la_cy, cx, la_r, la_r * 1.1) {
                (3, 30.0)
            } else {
                (0, 75.0)
            };
            labels[[r, c]] = label;
            let noise: f64 = rng.random_range(-18.0..18.0);
            image[[r, c]] = (base + noise).clamp(0.0, 255.0) as u8;
        }
    }
    (image, labels)
}

fn patient_id(n: u32) -> String {
    format!("patient{n:04}")
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ImageIoError + '_ {
    move |source| ImageIoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes a real-dataset tree with `patientNNNN/patientNNNN_<view>_<phase>`
/// images, `_gt` masks and per-view `Info_<view>.cfg` files.
pub fn write_camus_tree(
    root: &Path,
    patients: &[u32],
    views: &[View],
    spec: FixtureSpec,
) -> Result<(), ImageIoError> {
    for &p in patients {
        let pid = patient_id(p);
        let dir = root.join(&pid);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let sex = if p % 2 == 0 { "M" } else { "F" };
        let age = 30 + (p * 7) % 50;
        let quality = ["Good", "Medium", "Poor"][(p % 3) as usize];
        for &view in views {
            for phase in [Phase::EndDiastole, Phase::EndSystole] {
                let (image, labels) = echo_frame(spec, p, view, phase, 0);
                imageio::write_gray_png(&dir.join(format!("{pid}_{view}_{phase}.png")), &image)?;
                imageio::write_gray_png(&dir.join(format!("{pid}_{view}_{phase}_gt.png")), &labels)?;
            }
            let cfg = dir.join(format!("Info_{view}.cfg"));
            let text = format!("ED: 1\nES: 12\nNbFrame: 18\nSex: {sex}\nAge: {age}\nImageQuality: {quality}\n");
            fs::write(&cfg, text).map_err(io_err(&cfg))?;
        }
    }
    Ok(())
}

/// One synthetic image: originating patient, view, phase and variant index.
pub type SyntheticItem = (u32, View, Phase, u32);

/// Writes a synthetic tree `root/<train|val>/{images,masks}/<stem>.png`.
pub fn write_sdm_tree(
    root: &Path,
    train: &[SyntheticItem],
    val: &[SyntheticItem],
    spec: FixtureSpec,
) -> Result<(), ImageIoError> {
    let synth_spec = FixtureSpec {
        seed: spec.seed.wrapping_mul(31).wrapping_add(1),
        ..spec
    };
    for (split, items) in [("train", train), ("val", val)] {
        let images = root.join(split).join("images");
        let masks = root.join(split).join("masks");
        fs::create_dir_all(&images).map_err(io_err(&images))?;
        fs::create_dir_all(&masks).map_err(io_err(&masks))?;
        for &(p, view, phase, k) in items {
            let (image, labels) = echo_frame(synth_spec, p, view, phase, k + 1);
            let name = format!("{}_{view}_{phase}_{k}.png", patient_id(p));
            imageio::write_gray_png(&images.join(&name), &image)?;
            imageio::write_gray_png(&masks.join(&name), &labels)?;
        }
    }
    Ok(())
}
