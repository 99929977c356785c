use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::save_checkpoint;
use super::schedule::LrSchedule;
use super::weights::{compute_class_weights, ClassWeights};
use super::{BestRecord, TrainState};
use crate::error::{Error, Result};
use crate::evalkit::{confusion_matrix, macro_f1, ConfusionMatrix};
use crate::models::{
    apply_pretrain_mask, crop, CropMode, MaskConfig, MaskedSample, Sample, SeqInput,
    TransformerModel,
};
use crate::numerics::{Adam, AdamConfig, Graph, Precision};

/// Finetuning search grid.
pub const FINETUNE_LR_GRID: [f64; 3] = [1e-5, 2e-5, 5e-5];
pub const FINETUNE_BATCH_GRID: [usize; 2] = [8, 16];

/// One track's representation with its class index.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub sample: Sample,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    /// Fraction of all steps used for linear warmup.
    pub warmup_frac: f64,
    pub seed: u64,
    pub mask: MaskConfig,
    pub adam: AdamConfig,
    pub precision: Precision,
    /// Stop (resumably) once this many optimizer steps have been taken.
    #[serde(skip)]
    pub stop_after_steps: Option<u64>,
    /// Rewritten at the end of every epoch.
    #[serde(skip)]
    pub checkpoint: Option<PathBuf>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 20,
            batch_size: 8,
            peak_lr: 5e-4,
            warmup_frac: 0.1,
            seed: 0,
            mask: MaskConfig::default(),
            adam: AdamConfig::default(),
            precision: Precision::F64,
            stop_after_steps: None,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Inverse-frequency weighting from training-label counts.
    pub class_weighting: bool,
    pub adam: AdamConfig,
    pub precision: Precision,
    /// Stop after this many epochs without a better validation macro-F1.
    pub patience: Option<usize>,
    #[serde(skip)]
    pub stop_after_steps: Option<u64>,
    #[serde(skip)]
    pub checkpoint: Option<PathBuf>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 100,
            batch_size: 16,
            lr: LrSchedule::DEFAULT_FINETUNE_LR,
            seed: 0,
            class_weighting: true,
            adam: AdamConfig::default(),
            precision: Precision::F64,
            patience: None,
            stop_after_steps: None,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutcome {
    pub train_curve: Vec<f64>,
    pub val_curve: Vec<f64>,
    /// False when stopped early by `stop_after_steps`.
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOutcome {
    /// None only when stopped before the first epoch completed.
    pub best: Option<BestRecord>,
    pub finished: bool,
}

/// Model scores on a labelled set.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub confusion: ConfusionMatrix,
    pub macro_f1: f64,
    pub predictions: Vec<usize>,
}

const EVAL_BATCH: usize = 32;
const VAL_MASK_SALT: u64 = 0x7661_6c5f_6d61_736b;

fn batch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    idx.shuffle(&mut rng);
    idx
}

fn step_rng(seed: u64, epoch: usize, batch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    rng.set_stream(((epoch as u64) << 32) | batch as u64);
    rng
}

fn n_batches(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

fn epoch_checkpoint(
    model: &TransformerModel,
    state: &mut TrainState,
    adam: Adam,
    path: Option<&Path>,
    precision: Precision,
) -> Result<Adam> {
    let Some(path) = path else { return Ok(adam) };
    state.adam = Some(adam);
    let saved = save_checkpoint(path, model, state, precision);
    let adam = state.adam.take().expect("just set");
    saved.map(|_| adam)
}

fn check_batch_size(b: usize) -> Result<()> {
    if b == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    Ok(())
}

fn take_adam(state: &mut TrainState, cfg: AdamConfig, model: &TransformerModel) -> Adam {
    state
        .adam
        .take()
        .unwrap_or_else(|| Adam::new(cfg, &model.params))
}

fn mask_batch(
    model: &TransformerModel,
    samples: Vec<Sample>,
    mask: &MaskConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<MaskedSample>> {
    let pct = match mask.spectro_mask_pcts.as_slice() {
        [] => None,
        pcts => Some(pcts[rng.gen_range(0..pcts.len())]),
    };
    samples
        .iter()
        .map(|s| apply_pretrain_mask(&model.net.variant, s, rng, mask, pct))
        .collect()
}

/// Validation pretraining loss with masks that are fixed per sample index, so
/// the values are comparable across epochs.
pub fn pretrain_eval_loss(
    model: &TransformerModel,
    samples: &[&Sample],
    cfg: &PretrainConfig,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no validation samples".into()));
    }
    let max_len = model.net.config.max_seq_len;
    let mut total = 0.0;
    for (b, chunk) in samples.chunks(EVAL_BATCH).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ VAL_MASK_SALT);
        rng.set_stream(b as u64);
        let cropped = chunk
            .iter()
            .map(|s| crop(s, max_len, CropMode::Center, &mut rng))
            .collect();
        let masked = mask_batch(model, cropped, &cfg.mask, &mut rng)?;
        total += model.pretrain_loss_value(&masked, cfg.mask.huber_delta)? * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Masked-prediction pretraining. Labels are never read. Continues from
/// `state` (epoch, batch, optimizer moments) so an interrupted run resumes
/// exactly; records per-epoch "pretrain_loss" for train and validation.
pub fn run_pretraining(
    model: &mut TransformerModel,
    state: &mut TrainState,
    train: &[Example],
    val: &[Example],
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    check_batch_size(cfg.batch_size)?;
    cfg.mask.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument(
            "pretraining needs train and validation examples".into(),
        ));
    }
    let train: Vec<&Sample> = train.iter().map(|e| &e.sample).collect();
    let val: Vec<&Sample> = val.iter().map(|e| &e.sample).collect();
    let per_epoch = n_batches(train.len(), cfg.batch_size);
    let total = (per_epoch * cfg.epochs) as u64;
    let schedule = LrSchedule {
        warmup_steps: (cfg.warmup_frac * total as f64).round() as u64,
        ..LrSchedule::pretrain(cfg.peak_lr, total)
    };
    let max_len = model.net.config.max_seq_len;
    let mut adam = take_adam(state, cfg.adam, model);
    let mut finished = true;
    'epochs: while state.epoch < cfg.epochs {
        let order = batch_order(state.seed, state.epoch, train.len());
        while state.batch < per_epoch {
            if cfg.stop_after_steps.is_some_and(|s| state.step >= s) {
                finished = false;
                break 'epochs;
            }
            let mut rng = step_rng(state.seed, state.epoch, state.batch);
            let idx = &order[state.batch * cfg.batch_size
                ..((state.batch + 1) * cfg.batch_size).min(train.len())];
            let cropped: Vec<Sample> = idx
                .iter()
                .map(|&i| crop(train[i], max_len, CropMode::Random, &mut rng))
                .collect();
            let masked = mask_batch(model, cropped, &cfg.mask, &mut rng)?;
            let inputs: Vec<SeqInput> = masked.iter().map(|m| m.input.clone()).collect();
            let mut g = Graph::new();
            let enc = model
                .net
                .encode(&mut g, &model.params, &inputs, Some(&mut rng))?;
            let loss = model.net.pretrain_loss(
                &mut g,
                &model.params,
                &enc,
                &masked,
                cfg.mask.huber_delta,
            )?;
            state.epoch_loss_sum += g.scalar(loss);
            state.epoch_batches += 1;
            model.params.zero_grad();
            g.backward_into(loss, &mut model.params)?;
            adam.step(&mut model.params, schedule.lr_at_step(state.step))?;
            if cfg.precision == Precision::F32 {
                model.params.round_to_f32();
            }
            state.step += 1;
            state.batch += 1;
        }
        let train_loss = state.epoch_loss_sum / state.epoch_batches.max(1) as f64;
        let val_loss = pretrain_eval_loss(model, &val, cfg)?;
        let epoch = state.epoch;
        state.record(epoch, "train", "pretrain_loss", train_loss);
        state.record(epoch, "validation", "pretrain_loss", val_loss);
        log::info!("pretrain epoch {epoch}: train {train_loss:.5} validation {val_loss:.5}");
        state.epoch += 1;
        state.batch = 0;
        state.epoch_loss_sum = 0.0;
        state.epoch_batches = 0;
        adam = epoch_checkpoint(model, state, adam, cfg.checkpoint.as_deref(), cfg.precision)?;
    }
    state.adam = Some(adam);
    Ok(PretrainOutcome {
        train_curve: state.curve("train", "pretrain_loss"),
        val_curve: state.curve("validation", "pretrain_loss"),
        finished,
    })
}

fn check_labels(examples: &[Example], k: usize) -> Result<()> {
    match examples.iter().find(|e| e.label >= k) {
        Some(e) => Err(Error::InvalidArgument(format!(
            "track {} has label {} outside [0, {k})",
            e.id, e.label
        ))),
        None => Ok(()),
    }
}

/// Centre-cropped, dropout-free class-weighted loss, confusion matrix and
/// macro-F1.
pub fn evaluate(
    model: &TransformerModel,
    examples: &[Example],
    weights: &[f64],
) -> Result<Evaluation> {
    let k = model.net.n_classes;
    check_labels(examples, k)?;
    if examples.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    let max_len = model.net.config.max_seq_len;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut loss_sum, mut predictions) = (0.0, Vec::with_capacity(examples.len()));
    for chunk in examples.chunks(EVAL_BATCH) {
        let inputs: Vec<SeqInput> = chunk
            .iter()
            .map(|e| crop(&e.sample, max_len, CropMode::Center, &mut rng).input())
            .collect();
        let labels: Vec<usize> = chunk.iter().map(|e| e.label).collect();
        let mut g = Graph::new();
        let enc = model.net.encode(&mut g, &model.params, &inputs, None)?;
        let logits = model.net.classify(&mut g, &model.params, &enc)?;
        let loss = g.cross_entropy(logits, &labels, &vec![true; chunk.len()], Some(weights))?;
        loss_sum += g.scalar(loss) * chunk.len() as f64;
        let lv = g.value(logits);
        predictions.extend((0..lv.rows()).map(|i| {
            let row = lv.row(i);
            (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
        }));
    }
    let truths: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let confusion = confusion_matrix(&truths, &predictions, k)?;
    Ok(Evaluation {
        loss: loss_sum / examples.len() as f64,
        macro_f1: macro_f1(&confusion),
        confusion,
        predictions,
    })
}

/// Class-weighted cross-entropy finetuning at a constant learning rate.
/// Records per-epoch train and validation "loss" and validation "macro_f1";
/// keeps the weights of the best validation epoch (earliest on ties) in
/// `state.best_params` and copies them into `model` when finished.
pub fn run_finetune(
    model: &mut TransformerModel,
    state: &mut TrainState,
    train: &[Example],
    val: &[Example],
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    check_batch_size(cfg.batch_size)?;
    let k = model.net.n_classes;
    check_labels(train, k)?;
    check_labels(val, k)?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument(
            "finetuning needs train and validation examples".into(),
        ));
    }
    let weights = if cfg.class_weighting {
        let mut counts = vec![0; k];
        train.iter().for_each(|e| counts[e.label] += 1);
        compute_class_weights(&counts)?
    } else {
        ClassWeights::uniform(k)
    };
    let schedule = LrSchedule::constant(cfg.lr);
    let per_epoch = n_batches(train.len(), cfg.batch_size);
    let max_len = model.net.config.max_seq_len;
    let mut adam = take_adam(state, cfg.adam, model);
    let mut finished = true;
    'epochs: while state.epoch < cfg.epochs {
        if cfg.patience.is_some_and(|p| state.stale_epochs >= p) {
            break;
        }
        let order = batch_order(state.seed, state.epoch, train.len());
        while state.batch < per_epoch {
            if cfg.stop_after_steps.is_some_and(|s| state.step >= s) {
                finished = false;
                break 'epochs;
            }
            let mut rng = step_rng(state.seed, state.epoch, state.batch);
            let idx = &order[state.batch * cfg.batch_size
                ..((state.batch + 1) * cfg.batch_size).min(train.len())];
            let inputs: Vec<SeqInput> = idx
                .iter()
                .map(|&i| crop(&train[i].sample, max_len, CropMode::Random, &mut rng).input())
                .collect();
            let labels: Vec<usize> = idx.iter().map(|&i| train[i].label).collect();
            let mut g = Graph::new();
            let enc = model
                .net
                .encode(&mut g, &model.params, &inputs, Some(&mut rng))?;
            let logits = model.net.classify(&mut g, &model.params, &enc)?;
            let loss = g.cross_entropy(
                logits,
                &labels,
                &vec![true; labels.len()],
                Some(&weights.weights),
            )?;
            state.epoch_loss_sum += g.scalar(loss);
            state.epoch_batches += 1;
            model.params.zero_grad();
            g.backward_into(loss, &mut model.params)?;
            adam.step(&mut model.params, schedule.lr_at_step(state.step))?;
            if cfg.precision == Precision::F32 {
                model.params.round_to_f32();
            }
            state.step += 1;
            state.batch += 1;
        }
        let train_loss = state.epoch_loss_sum / state.epoch_batches.max(1) as f64;
        let eval = evaluate(model, val, &weights.weights)?;
        let epoch = state.epoch;
        state.record(epoch, "train", "loss", train_loss);
        state.record(epoch, "validation", "loss", eval.loss);
        state.record(epoch, "validation", "macro_f1", eval.macro_f1);
        log::info!(
            "finetune epoch {epoch}: train loss {train_loss:.5} validation loss {:.5} macro-F1 {:.4}",
            eval.loss,
            eval.macro_f1
        );
        if state.best.map_or(true, |b| eval.macro_f1 > b.macro_f1) {
            state.best = Some(BestRecord {
                epoch,
                macro_f1: eval.macro_f1,
            });
            state.best_params = Some(model.params.clone());
            state.stale_epochs = 0;
        } else {
            state.stale_epochs += 1;
        }
        state.epoch += 1;
        state.batch = 0;
        state.epoch_loss_sum = 0.0;
        state.epoch_batches = 0;
        adam = epoch_checkpoint(model, state, adam, cfg.checkpoint.as_deref(), cfg.precision)?;
    }
    state.adam = Some(adam);
    if finished {
        if let Some(p) = &state.best_params {
            model.params.load_matching(p);
        }
    }
    Ok(FinetuneOutcome {
        best: state.best,
        finished,
    })
}
