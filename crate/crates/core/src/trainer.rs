//! Optimization of the prompt network through the frozen segmenter, with early stopping
//! on validation Dice.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_tensors, CheckpointMeta};
use crate::config::TrainConfig;
use crate::data::VolumeRecord;
use crate::error::{Error, Result};
use crate::eval::{batch_tensors, model_inputs, predict_logits};
use crate::losses::{composite_loss, composite_loss_with_grad, LossBreakdown, LossConfig, PixelBatch};
use crate::metrics::{score_slices, volume_score};
use crate::pipeline::Pipeline;
use crate::raster::{GrayImage, Mask, Raster};

pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const DIVERGED_CHECKPOINT: &str = "last_finite.safetensors";
pub const STEP_LOG: &str = "steps.csv";
pub const EPOCH_LOG: &str = "epochs.csv";

/// Loss terms of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub focal: f64,
    pub dice: f64,
    pub log_cosh_dice: f64,
    pub total: f64,
}

/// Mean training and validation loss terms of one epoch plus validation Dice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val: LossBreakdown,
    pub val_dice: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochLog>,
    /// 1-based epoch with the highest validation Dice; its weights are loaded on return.
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub steps: usize,
    pub stopped_early: bool,
    pub backend_checksum: Option<String>,
    pub net_checksum_before: String,
    /// Prompt network after the last optimizer step, before the best weights are restored.
    pub net_checksum_after: String,
    pub checkpoint: Option<PathBuf>,
}

/// Where the trainer writes logs and checkpoints.
pub struct TrainOutput<'a> {
    pub dir: &'a Path,
    pub meta: CheckpointMeta,
}

struct Sample<'a> {
    input: Raster<f32>,
    image: &'a GrayImage,
    mask: &'a Mask,
}

fn samples<'a>(pipeline: &Pipeline, volumes: &'a [VolumeRecord]) -> Result<Vec<Sample<'a>>> {
    let mut out = Vec::new();
    for v in volumes {
        for ((input, image), mask) in model_inputs(pipeline, v)?.into_iter().zip(&v.slices).zip(&v.masks) {
            out.push(Sample { input, image, mask });
        }
    }
    Ok(out)
}

fn flat_labels(masks: &[&Mask]) -> Vec<u8> {
    masks.iter().flat_map(|m| m.data().iter().copied()).collect()
}

fn snapshot(pipeline: &Pipeline) -> Result<HashMap<String, Tensor>> {
    pipeline
        .net()
        .store()
        .named_tensors()
        .into_iter()
        .map(|(k, t)| Ok((k, t.copy()?)))
        .collect()
}

fn to_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?)
}

fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len().max(1) as f64;
    let sum = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
    LossBreakdown {
        focal: sum(|b| b.focal),
        dice: sum(|b| b.dice),
        log_cosh_dice: sum(|b| b.log_cosh_dice),
        total: sum(|b| b.total),
    }
}

struct Logs {
    steps: csv::Writer<std::fs::File>,
    epochs: csv::Writer<std::fs::File>,
}

impl Logs {
    fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut steps = csv::Writer::from_path(dir.join(STEP_LOG))?;
        steps.write_record(["epoch", "step", "L_F", "L_D", "L_LCD", "total"])?;
        let mut epochs = csv::Writer::from_path(dir.join(EPOCH_LOG))?;
        epochs.write_record([
            "epoch",
            "train_L_F",
            "train_L_D",
            "train_L_LCD",
            "train_total",
            "val_L_F",
            "val_L_D",
            "val_L_LCD",
            "val_total",
            "val_dice",
            "seconds",
        ])?;
        Ok(Self { steps, epochs })
    }

    fn step(&mut self, s: &StepLog) -> Result<()> {
        self.steps.write_record([
            s.epoch.to_string(),
            s.step.to_string(),
            format!("{:.8}", s.focal),
            format!("{:.8}", s.dice),
            format!("{:.8}", s.log_cosh_dice),
            format!("{:.8}", s.total),
        ])?;
        self.steps.flush().map_err(|e| Error::io(STEP_LOG, e))
    }

    fn epoch(&mut self, e: &EpochLog) -> Result<()> {
        let b = |x: f64| format!("{x:.8}");
        self.epochs.write_record([
            e.epoch.to_string(),
            b(e.train.focal),
            b(e.train.dice),
            b(e.train.log_cosh_dice),
            b(e.train.total),
            b(e.val.focal),
            b(e.val.dice),
            b(e.val.log_cosh_dice),
            b(e.val.total),
            b(e.val_dice),
            format!("{:.3}", e.seconds),
        ])?;
        self.epochs.flush().map_err(|e| Error::io(EPOCH_LOG, e))
    }
}

/// Validation loss and mean per-volume Dice in eval mode.
fn validate(
    pipeline: &Pipeline,
    volumes: &[VolumeRecord],
    inputs: &[Vec<Raster<f32>>],
    loss: &LossConfig,
    batch_size: usize,
) -> Result<(LossBreakdown, f64)> {
    let mut losses = Vec::new();
    let mut dices = Vec::new();
    for (v, xs) in volumes.iter().zip(inputs) {
        let logits = predict_logits(pipeline, xs, &v.slices, batch_size)?;
        for (ls, ms) in logits.chunks(batch_size).zip(v.masks.chunks(batch_size)) {
            let z: Vec<f64> = ls.iter().flat_map(|l| l.data().iter().map(|&x| f64::from(x))).collect();
            let m = flat_labels(&ms.iter().collect::<Vec<_>>());
            let px = ls[0].data().len();
            losses.push(composite_loss(&PixelBatch::with_images(&z, &m, px)?, loss)?);
        }
        let preds: Vec<Mask> = logits.iter().map(|l| l.map(|x| u8::from(x >= 0.0))).collect();
        if let Some(s) = volume_score(&v.volume_id, &score_slices(&v.volume_id, &preds, &v.masks)?) {
            dices.push(s.dice);
        }
    }
    // Nothing scored means empty truth and empty prediction everywhere.
    let dice = if dices.is_empty() { 1.0 } else { dices.iter().sum::<f64>() / dices.len() as f64 };
    Ok((mean_breakdown(&losses), dice))
}

/// Trains the prompt network of `pipeline` on `train`, monitoring Dice on `val`.
///
/// Only prompt-network parameters are updated. On return the network holds the weights of
/// the best validation epoch; with `out`, those are also written to `best.safetensors`
/// next to the step and epoch CSV logs. A non-finite loss aborts with
/// [`Error::Diverged`] after saving the best weights seen so far (or the initial ones).
pub fn train(
    pipeline: &Pipeline,
    train: &[VolumeRecord],
    val: &[VolumeRecord],
    cfg: &TrainConfig,
    loss: &LossConfig,
    out: Option<TrainOutput>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    loss.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("training and validation sets must be non-empty".into()));
    }
    let store = pipeline.net().store();
    let mut logs = out.as_ref().map(|o| Logs::create(o.dir)).transpose()?;
    let backend_checksum = pipeline.backend().map(|b| b.checksum()).transpose()?;
    let net_checksum_before = store.checksum()?;

    let samples = samples(pipeline, train)?;
    let val_inputs: Vec<Vec<Raster<f32>>> = val.iter().map(|v| model_inputs(pipeline, v)).collect::<Result<_>>()?;
    let mut opt = AdamW::new(
        store.trainable(),
        ParamsAdamW {
            lr: cfg.learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();

    let mut best = snapshot(pipeline)?;
    let mut best_epoch = 0;
    let mut best_val_dice = f64::NEG_INFINITY;
    let mut since_best = 0;
    let mut epochs = Vec::new();
    let mut step = 0;
    let mut stopped_early = false;
    let save = |tensors: &HashMap<String, Tensor>, name: &str, epoch: usize| -> Result<Option<PathBuf>> {
        let Some(o) = &out else { return Ok(None) };
        let mut named: Vec<(String, Tensor)> = tensors.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        named.sort_by(|a, b| a.0.cmp(&b.0));
        let path = o.dir.join(name);
        save_tensors(&path, &named, &CheckpointMeta { epoch, ..o.meta.clone() })?;
        Ok(Some(path))
    };

    'epochs: for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut train_losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                stopped_early = true;
                break 'epochs;
            }
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let inputs: Vec<&Raster<f32>> = batch.iter().map(|s| &s.input).collect();
            let images: Vec<&GrayImage> = batch.iter().map(|s| s.image).collect();
            let labels = flat_labels(&batch.iter().map(|s| s.mask).collect::<Vec<_>>());
            let (x, imgs) = batch_tensors(pipeline, &inputs, &images)?;

            let prompt_logits = pipeline.prompt_t(&x, true)?;
            let prompt_z = to_f64(&prompt_logits)?;
            if prompt_z.iter().any(|v| !v.is_finite()) {
                save(&best, DIVERGED_CHECKPOINT, best_epoch)?;
                return Err(Error::Diverged { epoch, step });
            }
            let logits = pipeline.finish_t(&prompt_logits, &imgs)?;
            let z = to_f64(&logits)?;
            let px = z.len() / batch.len();
            let (terms, grad) = composite_loss_with_grad(&PixelBatch::with_images(&z, &labels, px)?, loss)?;
            if !terms.is_finite() || z.iter().any(|v| !v.is_finite()) {
                save(&best, DIVERGED_CHECKPOINT, best_epoch)?;
                return Err(Error::Diverged { epoch, step });
            }
            let g = Tensor::from_vec(grad, logits.shape(), logits.device())?.to_dtype(logits.dtype())?;
            let mut surrogate = (&logits * &g)?.sum_all()?;
            if loss.prompt_aux_weight > 0.0 && pipeline.kind().uses_backend() {
                let (_, aux) = composite_loss_with_grad(&PixelBatch::with_images(&prompt_z, &labels, px)?, loss)?;
                let aux: Vec<f64> = aux.into_iter().map(|v| v * loss.prompt_aux_weight).collect();
                let ga = Tensor::from_vec(aux, prompt_logits.shape(), prompt_logits.device())?
                    .to_dtype(prompt_logits.dtype())?;
                surrogate = (surrogate + (&prompt_logits * &ga)?.sum_all()?)?;
            }
            opt.step(&surrogate.backward()?)?;
            step += 1;

            let entry = StepLog {
                epoch,
                step,
                focal: terms.focal,
                dice: terms.dice,
                log_cosh_dice: terms.log_cosh_dice,
                total: terms.total,
            };
            if let Some(l) = logs.as_mut() {
                l.step(&entry)?;
            }
            train_losses.push(terms);

            if let (Some(expected), Some(b)) = (&backend_checksum, pipeline.backend()) {
                if step % cfg.frozen_check_interval == 0 && &b.checksum()? != expected {
                    return Err(Error::Backend(format!("backend parameters changed at step {step}")));
                }
            }
        }

        let (val_loss, val_dice) = validate(pipeline, val, &val_inputs, loss, cfg.batch_size)?;
        if !val_loss.is_finite() {
            save(&best, DIVERGED_CHECKPOINT, best_epoch)?;
            return Err(Error::Diverged { epoch, step });
        }
        let entry = EpochLog {
            epoch,
            train: mean_breakdown(&train_losses),
            val: val_loss,
            val_dice,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train loss {:.4}, val loss {:.4}, val dice {:.4}",
            entry.train.total,
            entry.val.total,
            val_dice
        );
        if let Some(l) = logs.as_mut() {
            l.epoch(&entry)?;
        }
        epochs.push(entry);

        if val_dice > best_val_dice {
            best_val_dice = val_dice;
            best_epoch = epoch;
            best = snapshot(pipeline)?;
            since_best = 0;
        } else {
            since_best += 1;
        }
        if cfg.target_dice.is_some_and(|t| val_dice >= t) {
            stopped_early = epoch < cfg.epochs;
            break;
        }
        if since_best >= cfg.patience {
            log::info!("no validation improvement for {since_best} epochs, stopping");
            stopped_early = epoch < cfg.epochs;
            break;
        }
    }

    if let (Some(expected), Some(b)) = (&backend_checksum, pipeline.backend()) {
        if &b.checksum()? != expected {
            return Err(Error::Backend("backend parameters changed during training".into()));
        }
    }
    // The returned pipeline always holds the checkpointed weights, which are the initial ones
    // when no epoch finished.
    let net_checksum_after = store.checksum()?;
    store.load(&best)?;
    let checkpoint = save(&best, BEST_CHECKPOINT, best_epoch)?;
    Ok(TrainOutcome {
        epochs,
        best_epoch,
        best_val_dice: if best_epoch > 0 { best_val_dice } else { f64::NAN },
        steps: step,
        stopped_early,
        backend_checksum,
        net_checksum_before,
        net_checksum_after,
        checkpoint,
    })
}
