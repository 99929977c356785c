use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{DataSource, ExperimentConfig};
use super::features::{load_examples, mel_path, token_path, DataContext};
use super::manifest::{
    changed_keys, flatten, RunManifest, Stage, StageRecord, StageStatus, MANIFEST_SCHEMA_VERSION,
};
use crate::datalab::{
    generate_synthetic_corpus, import_fma, make_split, parse_taxonomy, parse_track_metadata,
    resolve_labels, verify_split, write_taxonomy, write_track_metadata, Segment,
};
use crate::dsp::{mel_spectrogram, read_wav, write_mel_cache};
use crate::error::{Error, Result};
use crate::evalkit::{
    chance_baseline, fingerprint, metrics_report, write_report, EpochRecord, ReportInputs,
};
use crate::io_util::{read_bytes, write_atomic};
use crate::models::TransformerModel;
use crate::training::{
    evaluate, load_checkpoint, run_finetune, run_pretraining, save_checkpoint, BestRecord,
    TrainState,
};
use crate::vqcodec::{codebook_stats, train_vqvae, write_codebook, write_token_cache};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOptions {
    /// Stages to execute; `None` runs all of them. Unrequested stages are
    /// reported as complete only if their outputs already exist.
    pub stages: Option<Vec<Stage>>,
    /// Re-run stages whose fingerprint changed instead of refusing.
    pub rebuild: bool,
}

/// Completion marker written last into a stage directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StageMarker {
    stage: Stage,
    fingerprint: String,
    inputs: BTreeMap<String, String>,
}

const MARKER: &str = "stage.json";

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

fn features_stage(cfg: &ExperimentConfig) -> Stage {
    if cfg.variant.needs_codec() {
        Stage::TrainVqvae
    } else {
        Stage::Preprocess
    }
}

fn upstream(cfg: &ExperimentConfig, stage: Stage) -> Vec<Stage> {
    match stage {
        Stage::Data => vec![],
        Stage::Preprocess | Stage::TrainVqvae => vec![Stage::Data],
        Stage::Pretrain => vec![Stage::Data, features_stage(cfg)],
        Stage::Finetune => {
            let mut s = vec![Stage::Data, features_stage(cfg)];
            if cfg.pretrain {
                s.push(Stage::Pretrain);
            }
            s
        }
        Stage::Evaluate => {
            let mut s = upstream(cfg, Stage::Finetune);
            s.push(Stage::Finetune);
            s
        }
    }
}

fn needed(cfg: &ExperimentConfig, stage: Stage) -> bool {
    match stage {
        Stage::TrainVqvae => cfg.variant.needs_codec(),
        Stage::Pretrain => cfg.pretrain,
        _ => true,
    }
}

/// Configuration keys a stage depends on, plus its upstream fingerprints.
fn stage_inputs(
    cfg: &ExperimentConfig,
    stage: Stage,
    fps: &BTreeMap<Stage, String>,
) -> Result<BTreeMap<String, String>> {
    let v = serde_json::to_value(cfg)?;
    let mut out = BTreeMap::new();
    let sections: &[&str] = match stage {
        Stage::Data => &["data", "seed"],
        Stage::Preprocess => &["spectrogram"],
        Stage::TrainVqvae => &["vqvae", "vq_train"],
        Stage::Pretrain => &["model", "variant", "pretraining"],
        Stage::Finetune => &["model", "variant", "pretrain", "finetune"],
        Stage::Evaluate => &["chance_trials"],
    };
    for s in sections {
        flatten(s, &v[*s], &mut out);
    }
    for up in upstream(cfg, stage) {
        out.insert(format!("upstream.{up}"), fps[&up].clone());
    }
    Ok(out)
}

/// Runs (or reuses) every needed stage in order and writes the manifest.
pub fn run_pipeline(config: &ExperimentConfig, opts: &RunOptions) -> Result<RunManifest> {
    let cfg = config.resolved();
    cfg.validate()?;
    let run_dir = cfg.out_dir.join("runs").join(&cfg.name);
    let manifest_path = run_dir.join("manifest.json");
    let previous = if manifest_path.exists() {
        Some(RunManifest::load(&manifest_path)?)
    } else {
        None
    };
    let mut config_for_fp = cfg.clone();
    config_for_fp.out_dir = PathBuf::new();
    let mut manifest = RunManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        name: cfg.name.clone(),
        config_fingerprint: fingerprint(&config_for_fp)?,
        stages: Vec::new(),
    };
    let mut fps = BTreeMap::new();
    for stage in Stage::ALL {
        let inputs = stage_inputs(&cfg, stage, &fps)?;
        let fp = fingerprint(&inputs)?;
        fps.insert(stage, fp.clone());
        let mut record = StageRecord {
            stage,
            status: StageStatus::Pending,
            fingerprint: fp.clone(),
            inputs,
            dir: None,
            started: None,
            finished: None,
        };
        if !needed(&cfg, stage) {
            record.status = StageStatus::NotNeeded;
            manifest.stages.push(record);
            continue;
        }
        if let Some(old) = previous.as_ref().and_then(|m| m.record(stage)) {
            if old.status == StageStatus::Complete && old.fingerprint != fp && !opts.rebuild {
                return Err(Error::StaleFingerprint {
                    stage: stage.to_string(),
                    changed: changed_keys(&old.inputs, &record.inputs),
                });
            }
        }
        let dir = cfg
            .out_dir
            .join("stages")
            .join(format!("{stage}-{}", &fp[..16]));
        let marker = dir.join(MARKER);
        let done =
            marker.exists() && read_json::<StageMarker>(&marker).is_ok_and(|m| m.fingerprint == fp);
        let requested = opts.stages.as_ref().map_or(true, |s| s.contains(&stage));
        if done {
            log::info!("{}: {stage} is up to date", cfg.name);
            record.status = StageStatus::Complete;
            record.dir = Some(dir);
            if let Some(old) = previous
                .as_ref()
                .and_then(|m| m.record(stage))
                .filter(|o| o.fingerprint == fp)
            {
                record.started = old.started;
                record.finished = old.finished;
            }
        } else if requested {
            for up in upstream(&cfg, stage) {
                if !manifest.is_complete(up) {
                    return Err(Error::MissingArtifact(format!(
                        "stage {stage} needs stage {up}, which has not completed for run {}",
                        cfg.name
                    )));
                }
            }
            log::info!("{}: running {stage} in {}", cfg.name, dir.display());
            record.started = Some(now());
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            execute(&cfg, stage, &dir, &manifest)?;
            write_json(
                &marker,
                &StageMarker {
                    stage,
                    fingerprint: fp.clone(),
                    inputs: record.inputs.clone(),
                },
            )?;
            record.finished = Some(now());
            record.status = StageStatus::Complete;
            record.dir = Some(dir);
        }
        manifest.stages.push(record);
        manifest.save(&manifest_path)?;
    }
    manifest.save(&manifest_path)?;
    Ok(manifest)
}

fn execute(cfg: &ExperimentConfig, stage: Stage, dir: &Path, m: &RunManifest) -> Result<()> {
    match stage {
        Stage::Data => stage_data(cfg, dir),
        Stage::Preprocess => stage_preprocess(cfg, dir, m),
        Stage::TrainVqvae => stage_vqvae(cfg, dir, m),
        Stage::Pretrain => stage_pretrain(cfg, dir, m),
        Stage::Finetune => stage_finetune(cfg, dir, m),
        Stage::Evaluate => stage_evaluate(cfg, dir, m),
    }
}

fn data_context(cfg: &ExperimentConfig, m: &RunManifest) -> Result<DataContext> {
    DataContext::load(m.stage_dir(Stage::Data)?, cfg.data.multi_root)
}

fn stage_data(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    match &cfg.data.source {
        DataSource::Synthetic(spec) => {
            generate_synthetic_corpus(spec, dir)?;
        }
        DataSource::Fma {
            tracks_csv,
            genres_csv,
            audio_root,
            subset,
        } => {
            let root = std::path::absolute(audio_root).map_err(|e| Error::io(audio_root, e))?;
            let imp = import_fma(tracks_csv, genres_csv, &root, subset.as_deref(), dir)?;
            write_json(&dir.join("import_skipped.json"), &imp.skipped)?;
        }
        DataSource::Files { metadata, taxonomy } => {
            let tax = parse_taxonomy(taxonomy)?;
            let base = metadata.parent().unwrap_or(Path::new(""));
            let mut tracks = parse_track_metadata(metadata, &tax)?;
            for t in &mut tracks {
                if t.path.is_relative() {
                    t.path = std::path::absolute(base.join(&t.path))
                        .map_err(|e| Error::io(&t.path, e))?;
                }
            }
            write_taxonomy(&dir.join("taxonomy.csv"), &tax)?;
            write_track_metadata(&dir.join("metadata.csv"), &tracks)?;
        }
    }
    let tax = parse_taxonomy(&dir.join("taxonomy.csv"))?;
    let tracks = parse_track_metadata(&dir.join("metadata.csv"), &tax)?;
    let (labeled, rejected) = resolve_labels(&tracks, &tax, cfg.data.multi_root)?;
    write_json(&dir.join("rejected.json"), &rejected)?;
    let split = make_split(&labeled, cfg.data.split_ratios, cfg.seed)?;
    let report = verify_split(&split, &labeled);
    write_json(&dir.join("split_report.json"), &report)?;
    let sizes: Vec<usize> = report.counts.iter().map(|r| r.iter().sum()).collect();
    log::info!(
        "split sizes train/validation/test = {:?} ({} tracks, {} rejected)",
        sizes,
        labeled.len(),
        rejected.len()
    );
    if !report.hard_pass() {
        return Err(Error::Verification(format!(
            "split checks failed:\n{report}"
        )));
    }
    if !report.soft_pass() {
        log::warn!("split tolerances not met:\n{report}");
    }
    write_json(&dir.join("split.json"), &split)
}

fn stage_preprocess(cfg: &ExperimentConfig, dir: &Path, m: &RunManifest) -> Result<()> {
    let ctx = data_context(cfg, m)?;
    for t in &ctx.tracks {
        let clip = read_wav(&ctx.audio_path(t), t.meta.track_id.clone())?;
        let mel = mel_spectrogram(&clip, &cfg.spectrogram)?;
        write_mel_cache(&mel_path(dir, &t.meta.track_id)?, &mel)?;
    }
    Ok(())
}

fn stage_vqvae(cfg: &ExperimentConfig, dir: &Path, m: &RunManifest) -> Result<()> {
    let ctx = data_context(cfg, m)?;
    let train: Vec<_> = ctx
        .segment(Segment::Train)
        .into_iter()
        .map(|t| read_wav(&ctx.audio_path(t), t.meta.track_id.clone()))
        .collect::<Result<_>>()?;
    let (vq, report) = train_vqvae(&train, cfg.vqvae.clone(), &cfg.vq_train)?;
    vq.save(&dir.join("vqvae.bin"), cfg.precision)?;
    write_codebook(&dir.join("codebook.bin"), vq.codebook())?;
    let mut seqs = Vec::with_capacity(ctx.tracks.len());
    for t in &ctx.tracks {
        let clip = read_wav(&ctx.audio_path(t), t.meta.track_id.clone())?;
        let (seq, _) = vq.tokenize(&clip)?;
        write_token_cache(
            &token_path(dir, &t.meta.track_id)?,
            &seq,
            cfg.vqvae.vocab_size,
        )?;
        seqs.push(seq);
    }
    let stats = codebook_stats(&seqs, cfg.vqvae.vocab_size)?;
    log::info!(
        "codec: utilization {:.3}, perplexity {:.2}, {} codes reset",
        stats.utilization,
        stats.perplexity,
        report.codes_reset
    );
    write_json(
        &dir.join("codec_stats.json"),
        &serde_json::json!({
            "utilization": stats.utilization,
            "perplexity": stats.perplexity,
            "codes_reset": report.codes_reset,
            "history": report.history,
        }),
    )
}

fn examples(
    cfg: &ExperimentConfig,
    m: &RunManifest,
    ctx: &DataContext,
    seg: Segment,
) -> Result<Vec<crate::training::Example>> {
    let features = m.stage_dir(features_stage(cfg))?;
    load_examples(
        cfg.variant,
        features,
        cfg.spectrogram.db_floor,
        &ctx.segment(seg),
    )
}

fn new_model(cfg: &ExperimentConfig, ctx: &DataContext) -> Result<TransformerModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    TransformerModel::new(
        cfg.model.clone(),
        cfg.model_variant(),
        ctx.n_classes(),
        &mut rng,
    )
}

/// Loads `partial.ckpt` when an earlier attempt was interrupted.
fn resume_or(
    dir: &Path,
    fresh: impl FnOnce() -> Result<(TransformerModel, TrainState)>,
) -> Result<(TransformerModel, TrainState)> {
    let partial = dir.join("partial.ckpt");
    if partial.exists() {
        log::info!("resuming from {}", partial.display());
        load_checkpoint(&partial)
    } else {
        fresh()
    }
}

fn stage_pretrain(cfg: &ExperimentConfig, dir: &Path, m: &RunManifest) -> Result<()> {
    let ctx = data_context(cfg, m)?;
    let train = examples(cfg, m, &ctx, Segment::Train)?;
    let val = examples(cfg, m, &ctx, Segment::Validation)?;
    let (mut model, mut state) = resume_or(dir, || {
        Ok((new_model(cfg, &ctx)?, TrainState::new(cfg.seed)))
    })?;
    let mut pc = cfg.pretraining.clone();
    pc.checkpoint = Some(dir.join("partial.ckpt"));
    run_pretraining(&mut model, &mut state, &train, &val, &pc)?;
    save_checkpoint(&dir.join("model.ckpt"), &model, &state, cfg.precision)?;
    write_atomic(&dir.join("history.jsonl"), state.to_jsonl()?.as_bytes())
}

fn stage_finetune(cfg: &ExperimentConfig, dir: &Path, m: &RunManifest) -> Result<()> {
    let ctx = data_context(cfg, m)?;
    let train = examples(cfg, m, &ctx, Segment::Train)?;
    let val = examples(cfg, m, &ctx, Segment::Validation)?;
    let (mut model, mut state) = resume_or(dir, || {
        let model = if cfg.pretrain {
            load_checkpoint(&m.stage_dir(Stage::Pretrain)?.join("model.ckpt"))?.0
        } else {
            new_model(cfg, &ctx)?
        };
        Ok((model, TrainState::new(cfg.seed)))
    })?;
    let mut fc = cfg.finetune.clone();
    fc.checkpoint = Some(dir.join("partial.ckpt"));
    let outcome = run_finetune(&mut model, &mut state, &train, &val, &fc)?;
    save_checkpoint(&dir.join("model.ckpt"), &model, &state, cfg.precision)?;
    write_atomic(&dir.join("history.jsonl"), state.to_jsonl()?.as_bytes())?;
    write_json(&dir.join("best.json"), &outcome.best)
}

fn stage_evaluate(cfg: &ExperimentConfig, dir: &Path, m: &RunManifest) -> Result<()> {
    let ctx = data_context(cfg, m)?;
    let val = examples(cfg, m, &ctx, Segment::Validation)?;
    let test = examples(cfg, m, &ctx, Segment::Test)?;
    let (model, state) = load_checkpoint(&m.stage_dir(Stage::Finetune)?.join("model.ckpt"))?;
    let k = ctx.n_classes();
    let mut counts = vec![0usize; k];
    let mut val_counts = vec![0u64; k];
    ctx.segment(Segment::Train)
        .iter()
        .for_each(|t| counts[t.label] += 1);
    val.iter().for_each(|e| val_counts[e.label] += 1);
    let weights = if cfg.finetune.class_weighting {
        crate::training::compute_class_weights(&counts)?.weights
    } else {
        vec![1.0; k]
    };
    let eval = evaluate(&model, &val, &weights)?;
    let test_macro_f1 = if test.is_empty() {
        None
    } else {
        Some(evaluate(&model, &test, &weights)?.macro_f1)
    };
    let losses = |split: &str| state.curve(split, "loss");
    let (tl, vl, vf) = (
        losses("train"),
        losses("validation"),
        state.curve("validation", "macro_f1"),
    );
    let history: Vec<EpochRecord> = (0..tl.len().min(vl.len()).min(vf.len()))
        .map(|e| EpochRecord {
            epoch: e,
            train_loss: tl[e],
            val_loss: vl[e],
            val_macro_f1: vf[e],
        })
        .collect();
    let pretrain_history: Vec<(f64, f64)> = if cfg.pretrain {
        let (_, ps) = load_checkpoint(&m.stage_dir(Stage::Pretrain)?.join("model.ckpt"))?;
        let (t, v) = (
            ps.curve("train", "pretrain_loss"),
            ps.curve("validation", "pretrain_loss"),
        );
        t.into_iter().zip(v).collect()
    } else {
        Vec::new()
    };
    let best: BestRecord = state
        .best
        .ok_or_else(|| Error::MissingArtifact("finetune checkpoint has no best epoch".into()))?;
    let mut config_for_fp = cfg.clone();
    config_for_fp.out_dir = PathBuf::new();
    let report = metrics_report(ReportInputs {
        run: &cfg.name,
        confusion: eval.confusion.with_names(ctx.class_names())?,
        history: &history,
        best_epoch: best.epoch,
        pretrain_history: &pretrain_history,
        chance: chance_baseline(&val_counts, cfg.chance_trials, cfg.seed)?,
        test_macro_f1,
        config_fingerprint: fingerprint(&config_for_fp)?,
        dataset_fingerprint: m
            .record(Stage::Data)
            .map(|r| r.fingerprint.clone())
            .unwrap_or_default(),
        split_fingerprint: ctx.split_fingerprint()?,
    })?;
    if (report.macro_f1 - best.macro_f1).abs() > 1e-12 {
        log::warn!(
            "re-evaluated macro-F1 {} differs from the recorded best {}",
            report.macro_f1,
            best.macro_f1
        );
    }
    write_report(&dir.join("report.json"), &report)?;
    write_atomic(
        &dir.join("confusion.txt"),
        report.confusion.to_string().as_bytes(),
    )?;
    log::info!(
        "{}: validation macro-F1 {:.4} (best epoch {})",
        cfg.name,
        report.macro_f1,
        report.best_epoch
    );
    Ok(())
}
