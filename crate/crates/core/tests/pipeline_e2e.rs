mod common;

use std::collections::BTreeSet;
use std::fs;
use std::process::Command;

use common::{snapshot, Workspace};
use echoseg::eval::CellKey;
use echoseg::pipeline::{PipelineError, RunOptions};
use echoseg::prompt::PromptLevel;
use echoseg::train::Strategy;

#[test]
fn fixture_pipeline_end_to_end() {
    let ws = Workspace::new(6);
    let p = ws.pipeline(RunOptions::default());
    let summary = p.cmd_ingest().unwrap();
    assert_eq!(summary.real["train"], 4);
    assert_eq!(summary.real["val"], 2);
    assert_eq!(summary.real["test"], 2);
    assert_eq!(summary.synthetic["train"] + summary.synthetic["val"], 8);

    let prompts = p.cmd_prompts().unwrap();
    assert!(prompts.vqa_queries > 0);
    assert!(prompts.unresolved.is_empty());

    // Evaluating before training reports an incomplete matrix.
    let err = p.cmd_evaluate().unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");

    let trained = p.cmd_train().unwrap();
    // 4 real + 2 synthetic (P3 only) + 4 finetune + 2 synthetic P6 upstream.
    assert_eq!(trained.executed.len(), 12, "{:?}", trained.executed);
    let evaluated = p.cmd_evaluate().unwrap();
    assert_eq!(evaluated.executed.len(), 10);

    let (report, files) = p.cmd_report().unwrap();
    // Every matrix cell has per-sample results: one test patient, two
    // phases, three structures.
    for run in ws.config().experiments().unwrap() {
        let results = p.results_of(&run.run_id()).unwrap();
        assert_eq!(results.len(), 6, "{}", run.run_id());
        assert!(results.iter().all(|r| (0.0..=1.0).contains(&r.dice)));
    }
    let p3 = PromptLevel::new(3).unwrap();
    let p7 = PromptLevel::new(7).unwrap();
    for trainable in [false, true] {
        for (s, l) in [
            (Strategy::Real, p3),
            (Strategy::Real, p7),
            (Strategy::Synthetic, p3),
            (Strategy::SynthPtRealFt, p3),
            (Strategy::SynthPtRealFt, p7),
        ] {
            let key = CellKey {
                model: "stub".into(),
                strategy: s,
                level: l,
                encoder_trainable: trainable,
            };
            assert!(report.cell(&key).is_some(), "missing cell {}", key.name());
        }
    }
    let names: Vec<String> = files
        .iter()
        .map(|f| f.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    for expected in ["cells.csv", "diff_vs_real.csv", "freeze_diff.csv", "comparisons.csv", "convergence.csv", "report.json"] {
        assert!(names.iter().any(|n| n == expected), "{expected} not in {names:?}");
    }
    let diff = fs::read_to_string(ws.out().join("report").join("diff_vs_real.csv")).unwrap();
    assert!(diff.starts_with("# config_hash="));
    assert!(diff.lines().count() > 2);
    let grid = fs::read_to_string(ws.out().join("report").join("grid_frozen.csv")).unwrap();
    assert!(grid.contains("N/A"), "synthetic P7 cell should read N/A:\n{grid}");

    // Rerunning every stage changes nothing on disk.
    let before = snapshot(&ws.out());
    let again = ws.pipeline(RunOptions::default());
    again.cmd_ingest().unwrap();
    again.cmd_prompts().unwrap();
    let t = again.cmd_train().unwrap();
    assert!(t.executed.is_empty(), "{:?}", t.executed);
    let e = again.cmd_evaluate().unwrap();
    assert!(e.executed.is_empty(), "{:?}", e.executed);
    again.cmd_report().unwrap();
    assert_eq!(before, snapshot(&ws.out()), "rerun modified outputs");

    // A re-render into a fresh directory is byte-identical.
    let first = snapshot(&ws.out().join("report"));
    fs::remove_dir_all(ws.out().join("report")).unwrap();
    again.cmd_report().unwrap();
    assert_eq!(first, snapshot(&ws.out().join("report")));

    // Editing a triplet manifest makes training inputs stale.
    let path = ws.out().join("manifests").join("triplets_real.jsonl");
    let mut text = fs::read_to_string(&path).unwrap();
    text.push('\n');
    fs::write(&path, text).unwrap();
    match again.cmd_train() {
        Err(e @ PipelineError::Stale { .. }) => assert_eq!(e.exit_code(), 1),
        other => panic!("expected stale error, got {other:?}"),
    }
}

#[test]
fn selector_pulls_in_upstream_runs() {
    let ws = Workspace::new(2);
    let p = ws.prepare();
    let selected = ws
        .pipeline(RunOptions {
            selector: Some("*synth-pt-real-ft__P7__frozen*".into()),
            ..Default::default()
        })
        .selected_training_runs()
        .unwrap();
    let ids: BTreeSet<String> = selected.iter().map(|r| r.run_id()).collect();
    let expected: BTreeSet<String> = [
        "stub__synthetic__P6__frozen__seed1",
        "stub__synth-pt-real-ft__P7__frozen__seed1",
    ]
    .map(String::from)
    .into();
    assert_eq!(ids, expected);
    drop(p);
}

#[test]
fn cli_validate_and_exit_codes() {
    let ws = Workspace::new(2);
    let bin = env!("CARGO_BIN_EXE_echoseg");
    let out = Command::new(bin)
        .args(["validate", "--config"])
        .arg(&ws.config_path)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.starts_with("OK"), "{stdout}");
    assert!(!ws.out().exists(), "validate must not write outputs");

    // Stage order is enforced: prompts need ingest.
    let out = Command::new(bin)
        .args(["prompts", "--config"])
        .arg(&ws.config_path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    let bad = ws.root().join("bad.toml");
    fs::write(&bad, "output_dir = 3\n").unwrap();
    let out = Command::new(bin).args(["validate", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    // Reporting on an untrained matrix is an incomplete-matrix error.
    for stage in ["ingest", "prompts"] {
        let out = Command::new(bin).args([stage, "--config"]).arg(&ws.config_path).output().unwrap();
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = Command::new(bin).args(["report", "--config"]).arg(&ws.config_path).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
}
