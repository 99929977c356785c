use std::path::Path;

use vqmir_core::datalab::SynthCorpusSpec;
use vqmir_core::evalkit::read_report;
use vqmir_core::pipeline::*;
use vqmir_core::Error;

/// Seconds-scale configuration: short low-rate clips and tiny networks.
fn tiny(out: &Path, variant: VariantKind) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        name: "tiny".into(),
        out_dir: out.to_path_buf(),
        variant,
        chance_trials: 1000,
        ..ExperimentConfig::default()
    };
    c.data.source = DataSource::Synthetic(SynthCorpusSpec {
        n_genres: 3,
        tracks_per_genre: 16,
        clip_seconds: 0.4,
        sample_rate: 8000,
        ..SynthCorpusSpec::default()
    });
    c.spectrogram.n_mels = 12;
    c.vqvae.vocab_size = 16;
    c.vqvae.code_dim = 4;
    c.vqvae.channels = 4;
    c.vq_train.steps = 4;
    c.vq_train.batch = 2;
    c.vq_train.window = 1024;
    c.model.d_model = 8;
    c.model.n_heads = 2;
    c.model.n_layers = 1;
    c.model.max_seq_len = 16;
    c.pretraining.epochs = 2;
    c.pretraining.mask.spectro_span_len = 2;
    c.finetune.epochs = 2;
    c.finetune.lr = 1e-3;
    c
}

fn dirs(m: &RunManifest) -> Vec<Option<std::path::PathBuf>> {
    m.stages.iter().map(|r| r.dir.clone()).collect()
}

#[test]
fn full_run_writes_every_stage_and_a_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path(), VariantKind::Token);
    let m = run_pipeline(&cfg, &RunOptions::default()).unwrap();
    for stage in Stage::ALL {
        assert!(m.is_complete(stage), "{stage} not complete");
        assert!(m.stage_dir(stage).unwrap().join("stage.json").exists());
    }
    let data = m.stage_dir(Stage::Data).unwrap();
    for f in [
        "metadata.csv",
        "taxonomy.csv",
        "split.json",
        "split_report.json",
    ] {
        assert!(data.join(f).exists(), "{f}");
    }
    let vq = m.stage_dir(Stage::TrainVqvae).unwrap();
    assert!(vq.join("vqvae.bin").exists() && vq.join("codebook.bin").exists());
    let eval = m.stage_dir(Stage::Evaluate).unwrap();
    assert!(eval.join("confusion.txt").exists());
    let report = read_report(&m.report_path().unwrap()).unwrap();
    assert_eq!(report.run, "tiny");
    assert_eq!(report.history.len(), 2);
    assert_eq!(report.pretrain_history.len(), 2);
    assert_eq!(report.confusion.k(), 3);
    assert!(report.test_macro_f1.is_some());
    assert_eq!(report.chance.trials, 1000);
    let saved = RunManifest::load(&tmp.path().join("runs/tiny/manifest.json")).unwrap();
    assert_eq!(saved, m);
}

#[test]
fn spectro_run_skips_the_codec_and_reruns_are_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path(), VariantKind::Spectro);
    let first = run_pipeline(&cfg, &RunOptions::default()).unwrap();
    assert_eq!(
        first.record(Stage::TrainVqvae).unwrap().status,
        StageStatus::NotNeeded
    );
    let report = std::fs::read(first.report_path().unwrap()).unwrap();
    let marker = first.stage_dir(Stage::Finetune).unwrap().join("stage.json");
    let modified = std::fs::metadata(&marker).unwrap().modified().unwrap();

    let second = run_pipeline(&cfg, &RunOptions::default()).unwrap();
    assert_eq!(first, second);
    assert_eq!(
        std::fs::metadata(&marker).unwrap().modified().unwrap(),
        modified
    );
    assert_eq!(
        std::fs::read(second.report_path().unwrap()).unwrap(),
        report
    );
}

#[test]
fn identical_seeds_give_byte_identical_reports() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run_pipeline(
        &tiny(a.path(), VariantKind::Codebook),
        &RunOptions::default(),
    )
    .unwrap();
    let rb = run_pipeline(
        &tiny(b.path(), VariantKind::Codebook),
        &RunOptions::default(),
    )
    .unwrap();
    assert_eq!(
        std::fs::read(ra.report_path().unwrap()).unwrap(),
        std::fs::read(rb.report_path().unwrap()).unwrap()
    );
    assert_eq!(ra.config_fingerprint, rb.config_fingerprint);

    let c = tempfile::tempdir().unwrap();
    let mut other = tiny(c.path(), VariantKind::Codebook);
    other.seed = 1;
    let rc = run_pipeline(&other, &RunOptions::default()).unwrap();
    assert_ne!(ra.config_fingerprint, rc.config_fingerprint);
}

#[test]
fn edited_mask_is_refused_then_rebuilt_downstream_only() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path(), VariantKind::Spectro);
    let first = run_pipeline(&cfg, &RunOptions::default()).unwrap();

    let mut edited = cfg.clone();
    edited.pretraining.mask.spectro_span_len = 3;
    let err = run_pipeline(&edited, &RunOptions::default()).unwrap_err();
    match err {
        Error::StaleFingerprint { stage, changed } => {
            assert_eq!(stage, "pretrain");
            assert_eq!(
                changed,
                vec!["pretraining.mask.spectro_span_len: 2 -> 3".to_string()]
            );
        }
        other => panic!("expected a stale fingerprint, got {other}"),
    }

    let rebuilt = run_pipeline(
        &edited,
        &RunOptions {
            rebuild: true,
            ..RunOptions::default()
        },
    )
    .unwrap();
    let (old, new) = (dirs(&first), dirs(&rebuilt));
    for (i, stage) in Stage::ALL.iter().enumerate() {
        match stage {
            Stage::Data | Stage::Preprocess | Stage::TrainVqvae => {
                assert_eq!(old[i], new[i], "{stage}")
            }
            _ => assert_ne!(old[i], new[i], "{stage}"),
        }
    }
    // The earlier outputs are left in place.
    assert!(first.report_path().unwrap().exists());
}

#[test]
fn requested_stages_need_their_upstream() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path(), VariantKind::Spectro);
    let only = |stages: Vec<Stage>| RunOptions {
        stages: Some(stages),
        rebuild: false,
    };
    let err = run_pipeline(&cfg, &only(vec![Stage::Finetune])).unwrap_err();
    assert!(
        matches!(err, Error::MissingArtifact(ref m) if m.contains("finetune")),
        "{err}"
    );

    let m = run_pipeline(&cfg, &only(vec![Stage::Data, Stage::Preprocess])).unwrap();
    assert!(m.is_complete(Stage::Preprocess));
    assert_eq!(
        m.record(Stage::Pretrain).unwrap().status,
        StageStatus::Pending
    );
    assert!(matches!(m.report_path(), Err(Error::MissingArtifact(_))));

    let full = run_pipeline(&cfg, &RunOptions::default()).unwrap();
    assert_eq!(
        full.stage_dir(Stage::Preprocess).unwrap(),
        m.stage_dir(Stage::Preprocess).unwrap()
    );
    assert!(full.is_complete(Stage::Evaluate));
}

#[test]
fn interrupted_stage_is_rerun() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path(), VariantKind::Spectro);
    let m = run_pipeline(&cfg, &RunOptions::default()).unwrap();
    let report = std::fs::read(m.report_path().unwrap()).unwrap();
    let eval_dir = m.stage_dir(Stage::Evaluate).unwrap().to_path_buf();
    std::fs::remove_file(eval_dir.join("stage.json")).unwrap();
    std::fs::remove_file(eval_dir.join("report.json")).unwrap();
    let again = run_pipeline(&cfg, &RunOptions::default()).unwrap();
    assert_eq!(std::fs::read(again.report_path().unwrap()).unwrap(), report);
}

#[test]
fn manifest_version_is_checked() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("manifest.json");
    let m = RunManifest {
        schema_version: MANIFEST_SCHEMA_VERSION + 1,
        name: "x".into(),
        config_fingerprint: "f".into(),
        stages: Vec::new(),
    };
    m.save(&path).unwrap();
    assert!(matches!(
        RunManifest::load(&path),
        Err(Error::VersionMismatch { .. })
    ));
}

#[test]
fn config_toml_round_trip_and_validation() {
    let cfg = tiny(Path::new("out"), VariantKind::Codebook);
    let text = cfg.to_toml_string().unwrap();
    assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);

    let partial = ExperimentConfig::from_toml_str(
        "name = \"x\"\nvariant = \"token\"\n[finetune]\nlr = 5e-5\n",
    )
    .unwrap();
    assert_eq!(partial.variant, VariantKind::Token);
    assert_eq!(partial.finetune.lr, 5e-5);
    assert_eq!(partial.finetune.batch_size, 16);
    assert!(ExperimentConfig::from_toml_str("variant = \"wave\"").is_err());

    let mut bad = cfg.clone();
    bad.data.split_ratios = [0.9, 0.0, 0.1];
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let mut bad = cfg;
    bad.name = "a/b".into();
    assert!(bad.validate().is_err());

    assert_eq!("synth-data".parse::<Stage>().unwrap(), Stage::Data);
    assert_eq!("train-vqvae".parse::<Stage>().unwrap(), Stage::TrainVqvae);
    assert!("train".parse::<Stage>().is_err());
}

#[test]
fn grid_runs_six_configurations_and_compares_them() {
    let tmp = tempfile::tempdir().unwrap();
    let base = tiny(tmp.path(), VariantKind::Spectro);
    let names: Vec<String> = base.grid().iter().map(|c| c.name.clone()).collect();
    assert_eq!(
        names,
        [
            "spectro-pretrained",
            "spectro-scratch",
            "token-pretrained",
            "token-scratch",
            "codebook-pretrained",
            "codebook-scratch"
        ]
    );
    let table = run_grid(&base, &RunOptions::default()).unwrap();
    assert_eq!(table.rows.len(), 6);
    let reps: Vec<&str> = table
        .pretraining_deltas
        .iter()
        .map(|(r, _)| r.as_str())
        .collect();
    assert_eq!(reps, ["spectro", "token", "codebook"]);
    for (rep, d) in &table.pretraining_deltas {
        let pre = table.row(&format!("{rep}-pretrained")).unwrap().macro_f1;
        let scratch = table.row(&format!("{rep}-scratch")).unwrap().macro_f1;
        assert_eq!(*d, pre - scratch);
    }
    let text = std::fs::read_to_string(tmp.path().join("comparison.txt")).unwrap();
    assert!(
        text.contains("chance") && text.contains("reference 0.11"),
        "{text}"
    );
    assert!(tmp.path().join("comparison.json").exists());
    // One data stage and one codec shared by all six runs.
    let stages: Vec<String> = std::fs::read_dir(tmp.path().join("stages"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(stages.iter().filter(|s| s.starts_with("data-")).count(), 1);
    assert_eq!(
        stages
            .iter()
            .filter(|s| s.starts_with("train-vqvae-"))
            .count(),
        1
    );
    assert_eq!(
        stages.iter().filter(|s| s.starts_with("finetune-")).count(),
        6
    );
}

#[test]
fn reports_on_different_data_are_not_compared() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ca = tiny(a.path(), VariantKind::Spectro);
    let mut cb = tiny(b.path(), VariantKind::Spectro);
    cb.seed = 9;
    let ra = read_report(
        &run_pipeline(&ca, &RunOptions::default())
            .unwrap()
            .report_path()
            .unwrap(),
    )
    .unwrap();
    let rb = read_report(
        &run_pipeline(&cb, &RunOptions::default())
            .unwrap()
            .report_path()
            .unwrap(),
    )
    .unwrap();
    let err = compare_reports(&[("run-a".into(), ra.clone()), ("run-b".into(), rb)]).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("run-a") && msg.contains("run-b"), "{msg}");
    assert!(compare_reports(&[("run-a".into(), ra.clone()), ("again".into(), ra)]).is_ok());
    assert!(compare_reports(&[]).is_err());
}

#[test]
fn native_files_source_matches_the_generated_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = SynthCorpusSpec {
        n_genres: 3,
        tracks_per_genre: 16,
        clip_seconds: 0.4,
        sample_rate: 8000,
        ..SynthCorpusSpec::default()
    };
    let corpus =
        vqmir_core::datalab::generate_synthetic_corpus(&spec, &tmp.path().join("corpus")).unwrap();
    let mut cfg = tiny(&tmp.path().join("out"), VariantKind::Spectro);
    cfg.pretrain = false;
    cfg.data.source = DataSource::Files {
        metadata: corpus.metadata_path.clone(),
        taxonomy: corpus.taxonomy_path.clone(),
    };
    let m = run_pipeline(&cfg, &RunOptions::default()).unwrap();
    assert_eq!(
        m.record(Stage::Pretrain).unwrap().status,
        StageStatus::NotNeeded
    );
    let report = read_report(&m.report_path().unwrap()).unwrap();
    assert!(report.pretrain_history.is_empty());
    assert_eq!(report.confusion.k(), 3);
}
