mod common;

use std::fs;

use common::Workspace;
use echoseg::pipeline::{PipelineError, RunOptions};
use echoseg::train::{read_provenance, run_strategy, Strategy, StrategyData, TrainError, TrainingHistory, HISTORY_FILE};

const REAL_P3: &str = "stub__real__P3__frozen__seed1";

fn only(selector: &str) -> RunOptions {
    RunOptions {
        selector: Some(selector.into()),
        ..Default::default()
    }
}

#[test]
fn changed_settings_make_a_run_stale_until_forced() {
    let ws = Workspace::new(2);
    ws.prepare();
    let done = ws.pipeline(only(REAL_P3)).cmd_train().unwrap();
    assert_eq!(done.executed, vec![REAL_P3.to_string()]);
    let dir = ws.out().join("runs").join(REAL_P3);
    let history = TrainingHistory::from_csv(&fs::read_to_string(dir.join(HISTORY_FILE)).unwrap()).unwrap();
    assert_eq!(history.epochs.len(), 2);
    assert!(history.initial_val_dice.is_finite());

    let mut cfg = ws.config();
    cfg.training.max_epochs = 3;
    let changed = echoseg::pipeline::Pipeline::new(cfg.clone(), only(REAL_P3));
    match changed.cmd_train() {
        Err(e @ PipelineError::Train(TrainError::Stale(_))) => assert_eq!(e.exit_code(), 1),
        other => panic!("expected a stale run, got {other:?}"),
    }
    let forced = echoseg::pipeline::Pipeline::new(
        cfg,
        RunOptions {
            force: true,
            ..only(REAL_P3)
        },
    );
    assert_eq!(forced.cmd_train().unwrap().executed, vec![REAL_P3.to_string()]);
    let prov = read_provenance(&dir).unwrap().unwrap();
    assert_eq!((prov.status.as_str(), prov.epochs_trained), ("complete", 3));
}

#[test]
fn finetuning_needs_a_completed_upstream() {
    let ws = Workspace::new(1);
    let p = ws.prepare();
    let runs = p.selected_training_runs().unwrap();
    let read = |name: &str| {
        let text = fs::read_to_string(ws.out().join("manifests").join(name)).unwrap();
        echoseg::prompt::TripletManifest::read_jsonl(text.as_bytes()).unwrap()
    };
    let (real, synthetic) = (read("triplets_real.jsonl"), read("triplets_synthetic.jsonl"));
    let data = StrategyData {
        real: &real,
        synthetic: &synthetic,
        labels: p.config.dataset.labels,
    };
    let err = run_strategy(Strategy::SynthPtRealFt, &runs, &data, &ws.out().join("runs"), false).unwrap_err();
    assert!(matches!(err, TrainError::MissingUpstream { .. }), "{err}");
}

#[test]
fn identical_seeds_give_identical_runs() {
    let a = Workspace::new(2);
    let b = Workspace::new(2);
    for ws in [&a, &b] {
        ws.prepare();
        ws.pipeline(only(REAL_P3)).cmd_train().unwrap();
    }
    let prov = |ws: &Workspace| read_provenance(&ws.out().join("runs").join(REAL_P3)).unwrap().unwrap();
    assert_eq!(prov(&a).best_params_sha256, prov(&b).best_params_sha256);
}

#[test]
fn example_configuration_parses() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("echoseg.example.toml");
    let cfg = echoseg::config::PipelineConfig::load(&path).unwrap();
    assert_eq!(cfg.experiments().unwrap().len(), 92);
    assert!(cfg.models.iter().all(|m| m.spec().is_ok()));
}
