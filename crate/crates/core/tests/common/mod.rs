#![allow(dead_code)]

use std::path::{Path, PathBuf};

use echoseg::config::PipelineConfig;
use echoseg::dataset::{Phase, View};
use echoseg::fixtures::{write_camus_tree, write_sdm_tree, FixtureSpec, SyntheticItem};
use echoseg::pipeline::{Pipeline, RunOptions};
use tempfile::TempDir;

pub const FIXTURE: FixtureSpec = FixtureSpec { size: 48, seed: 7 };

/// Synthetic items drawn from the non-test fixture patients.
pub fn synthetic_items() -> (Vec<SyntheticItem>, Vec<SyntheticItem>) {
    let mut train = Vec::new();
    for p in [3, 4] {
        for phase in [Phase::EndDiastole, Phase::EndSystole] {
            for k in 0..1 {
                train.push((p, View::TwoChamber, phase, k));
            }
        }
    }
    train.push((3, View::TwoChamber, Phase::EndDiastole, 1));
    train.push((4, View::TwoChamber, Phase::EndSystole, 1));
    let val = vec![
        (2, View::TwoChamber, Phase::EndDiastole, 0),
        (2, View::TwoChamber, Phase::EndSystole, 0),
    ];
    (train, val)
}

/// Eight real samples (patients 1-4, two-chamber ED/ES) and eight synthetic
/// ones, with a configuration for the stub model at two prompt levels.
pub struct Workspace {
    pub dir: TempDir,
    pub config_path: PathBuf,
}

impl Workspace {
    pub fn new(max_epochs: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        write_camus_tree(&dir.path().join("camus"), &[1, 2, 3, 4], &[View::TwoChamber], FIXTURE).unwrap();
        let (train, val) = synthetic_items();
        write_sdm_tree(&dir.path().join("sdm"), &train, &val, FIXTURE).unwrap();
        let text = format!(
            r#"output_dir = "out"
seed = 1
jobs = 2

[dataset]
camus_root = "camus"
sdm_root = "sdm"
test_patients = ["patient0001"]
val_patients = 1

[vqa]
backend = "stub"
answer = "oval"

[[models]]
name = "stub"
kind = "stub"
input_size = 16
hidden = 8

[matrix]
levels = [3, 7]

[training]
max_epochs = {max_epochs}
eval_size = 64
"#
        );
        let config_path = dir.path().join("echoseg.toml");
        std::fs::write(&config_path, text).unwrap();
        Workspace { dir, config_path }
    }

    pub fn root(&self) -> &Path {
        self.dir.path()
    }

    pub fn out(&self) -> PathBuf {
        self.root().join("out")
    }

    pub fn config(&self) -> PipelineConfig {
        PipelineConfig::load(&self.config_path).unwrap()
    }

    pub fn pipeline(&self, options: RunOptions) -> Pipeline {
        Pipeline::new(self.config(), options)
    }

    /// Ingest and prompt generation.
    pub fn prepare(&self) -> Pipeline {
        let p = self.pipeline(RunOptions::default());
        p.cmd_ingest().unwrap();
        p.cmd_prompts().unwrap();
        p
    }
}

/// Reads every regular file below `dir` as (relative path, bytes).
pub fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Parses a golden file of `P<n>\t<sentence>` lines.
pub fn read_golden(path: &Path) -> Vec<(u8, String)> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let (level, text) = l.split_once('\t').expect("tab-separated golden line");
            (level.trim_start_matches('P').parse().unwrap(), text.to_string())
        })
        .collect()
}

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("golden")
}
