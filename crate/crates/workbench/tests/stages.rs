use std::fs;

use rkld::unlearn::{Method, RetainMode, UnlearnSpec};
use rkld_workbench::config::{CorpusParams, Schedule};
use rkld_workbench::pipeline::{cmd_synth, cmd_train, cmd_unlearn, epochs_of};
use rkld_workbench::report::{to_csv, CSV_HEADER};
use rkld_workbench::{run_all, select_peak, Error, ExperimentConfig, RunDir, TrainStage};

fn small() -> ExperimentConfig {
    let sched = |epochs| Schedule {
        lr: 5e-3,
        weight_decay: 0.01,
        batch_size: 16,
        epochs,
        grad_clip: None,
    };
    let mut ta = UnlearnSpec::new(Method::Ta);
    ta.epochs = 4;
    let mut ga = UnlearnSpec::new(Method::Ga).with_retain(RetainMode::Rt);
    ga.epochs = 2;
    ExperimentConfig {
        name: "small".into(),
        seeds: vec![1, 2],
        corpus: CorpusParams {
            n_persons: 10,
            qa_per_person: 4,
            forget_pct: 10,
        },
        finetune: sched(3),
        strengthen: sched(1),
        unlearn: sched(1),
        methods: vec![ga, ta],
        retain_eval_limit: Some(8),
        ..Default::default()
    }
}

#[test]
fn select_peak_examples() {
    assert_eq!(select_peak(&[0.1, 0.5, 0.3]), 2);
    assert_eq!(select_peak(&[0.4, 0.4, 0.2]), 1);
    assert_eq!(select_peak(&[0.0]), 1);
    assert_eq!(select_peak(&[0.1, 0.2, 0.9, 0.9]), 3);
}

#[test]
fn config_validation() {
    assert!(ExperimentConfig::default().validate().is_ok());
    let check = |f: fn(&mut ExperimentConfig)| {
        let mut c = ExperimentConfig::default();
        f(&mut c);
        c.validate().unwrap_err()
    };
    assert!(matches!(check(|c| c.seeds.clear()), Error::Config(_)));
    assert!(matches!(check(|c| c.seeds = vec![1, 1]), Error::Config(_)));
    assert!(matches!(check(|c| c.name = "a/b".into()), Error::Config(_)));
    assert!(matches!(check(|c| c.leakage_top_k = 0), Error::Config(_)));
    assert!(matches!(
        check(|c| c.methods.push(UnlearnSpec::new(Method::Ga))),
        Error::Config(_)
    ));
    assert!(matches!(check(|c| c.corpus.forget_pct = 3), Error::Core(_)));
    assert!(matches!(check(|c| c.model.n_heads = 5), Error::Core(_)));
    assert!(matches!(check(|c| c.finetune.lr = -1.0), Error::Core(_)));
}

#[test]
fn config_files_round_trip_and_reject_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    let cfg = small();
    fs::write(&path, cfg.to_json()).unwrap();
    assert_eq!(ExperimentConfig::load(&path).unwrap(), cfg);

    fs::write(&path, r#"{"name": "x", "seedz": [1]}"#).unwrap();
    assert!(matches!(
        ExperimentConfig::load(&path),
        Err(Error::Json { .. })
    ));
    fs::write(&path, r#"{"name": "partial", "seeds": [9]}"#).unwrap();
    let partial = ExperimentConfig::load(&path).unwrap();
    assert_eq!(partial.seeds, vec![9]);
    assert_eq!(partial.finetune, ExperimentConfig::default().finetune);
}

#[test]
fn stages_refuse_to_run_without_their_inputs() {
    let out = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.seeds = vec![4];
    cfg.methods = vec![UnlearnSpec::new(Method::Rkld)];
    let dir = RunDir::new(out.path(), &cfg);
    assert!(matches!(
        cmd_train(&cfg, &dir, TrainStage::All),
        Err(Error::MissingArtifact { stage: "train", .. })
    ));
    cmd_synth(&cfg, &dir).unwrap();
    cmd_train(&cfg, &dir, TrainStage::Finetune).unwrap();
    match cmd_unlearn(&cfg, &dir) {
        Err(Error::MissingArtifact { stage, artifact }) => {
            assert_eq!(stage, "unlearn");
            assert!(artifact.ends_with("strengthened.ckpt"));
        }
        other => panic!("{other:?}"),
    }
    // Strengthening needs the saved optimizer state from finetuning.
    fs::remove_file(dir.optimizer(4)).unwrap();
    assert!(matches!(
        cmd_train(&cfg, &dir, TrainStage::Strengthen),
        Err(Error::MissingArtifact { .. })
    ));

    let mut changed = cfg.clone();
    changed.leakage_top_k = 2;
    assert!(matches!(
        cmd_synth(&changed, &dir),
        Err(Error::Stage { .. })
    ));
}

#[test]
fn small_run_writes_every_artifact() {
    let out = tempfile::tempdir().unwrap();
    let cfg = small();
    let dir = RunDir::new(out.path(), &cfg);
    let report = run_all(&cfg, &dir).unwrap();

    for &seed in &cfg.seeds {
        for name in ["original", "retrain", "strengthened"] {
            assert!(dir.ckpt(seed, name).exists());
        }
        for spec in &cfg.methods {
            for e in 1..=epochs_of(spec) {
                assert!(dir.epoch_ckpt(seed, &spec.label(), e).exists());
                assert!(dir.epoch_eval(seed, &spec.label(), e).exists());
            }
        }
    }
    assert!(!dir.epoch_ckpt(1, "TA", 2).exists());

    let csv = fs::read_to_string(dir.report_csv()).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), CSV_HEADER.join(","));
    // Two baselines and two methods per seed.
    assert_eq!(lines.count(), 8);
    assert_eq!(csv, to_csv(&report).unwrap());
    assert!(dir.report_json().exists());

    let ga = report.method("GA+RT").unwrap();
    assert_eq!(ga.retain_mode, "RT");
    assert_eq!(ga.forget_quality_curve.len(), 2);
    assert_eq!(report.method("TA").unwrap().forget_quality_curve.len(), 1);
    assert_eq!(report.baseline("retrain").unwrap().forget_quality, 1.0);
    for row in &report.peaks {
        assert!(row.peak_epoch >= 1 && row.peak_epoch <= 2);
    }

    // A second run finds everything current and leaves the files alone.
    let before = fs::metadata(dir.epoch_ckpt(1, "GA+RT", 1))
        .unwrap()
        .modified()
        .unwrap();
    let again = run_all(&cfg, &dir).unwrap();
    assert_eq!(again, report);
    let after = fs::metadata(dir.epoch_ckpt(1, "GA+RT", 1))
        .unwrap()
        .modified()
        .unwrap();
    assert_eq!(before, after);
}
