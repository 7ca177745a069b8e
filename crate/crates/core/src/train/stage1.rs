use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{argmax_rows, count_correct, snapshot, stack, EpochObserver, EpochRecord, Stage, TrainConfig, TrainOutcome, TrainReport};
use crate::data::LoadedSequence;
use crate::error::{Error, Result};
use crate::model::{GarmentNet, Head};
use crate::tensor::{cross_entropy, no_grad, Optimizer, Tensor};

/// (sequence, frame) pairs used for single-frame training. Frames whose
/// mask came out empty are skipped.
fn frame_samples(sequences: &[LoadedSequence], stride: usize) -> Vec<(usize, usize)> {
    sequences
        .iter()
        .enumerate()
        .flat_map(|(s, seq)| {
            (0..seq.frames.len())
                .step_by(stride)
                .filter(move |&f| !seq.empty_mask.get(f).copied().unwrap_or(false))
                .map(move |f| (s, f))
        })
        .collect()
}

/// Shape and weight accuracy of single-frame predictions.
pub(crate) fn frame_accuracy(model: &GarmentNet, sequences: &[LoadedSequence], stride: usize, batch: usize) -> Result<(f64, f64)> {
    let samples = frame_samples(sequences, stride);
    if samples.is_empty() {
        return Ok((0.0, 0.0));
    }
    let (mut shape_ok, mut weight_ok) = (0, 0);
    no_grad(|| -> Result<()> {
        for chunk in samples.chunks(batch.max(1)) {
            let frames: Vec<&Tensor> = chunk.iter().map(|&(s, f)| &sequences[s].frames[f]).collect();
            let latent = model.extractor.forward(&stack(&frames)?)?;
            let shapes: Vec<usize> = chunk.iter().map(|&(s, _)| sequences[s].labels.shape.index()).collect();
            let weights: Vec<usize> = chunk.iter().map(|&(s, _)| sequences[s].labels.weight.index()).collect();
            shape_ok += count_correct(&argmax_rows(&model.classify(&latent, Head::Shape)?), &shapes);
            weight_ok += count_correct(&argmax_rows(&model.classify(&latent, Head::Weight)?), &weights);
        }
        Ok(())
    })?;
    let n = samples.len() as f64;
    Ok((shape_ok as f64 / n, weight_ok as f64 / n))
}

/// Trains the extractor and both heads on single frames with the unit-weight
/// sum of the two cross-entropies. `val` may be empty; the best epoch is then
/// the one with the lowest training loss.
pub fn train_stage1(
    model: &GarmentNet,
    train: &[LoadedSequence],
    val: &[LoadedSequence],
    cfg: &TrainConfig,
    observer: EpochObserver<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.stage != Stage::Stage1 {
        return Err(Error::Usage("train_stage1 needs a stage-1 config".into()));
    }
    let samples = frame_samples(train, cfg.frame_stride);
    if samples.is_empty() {
        return Err(Error::Usage("stage 1 has no training frames".into()));
    }
    let started = Instant::now();
    model.set_perception_trainable(true);
    model.set_dynamics_trainable(false);
    let params = model.perception_parameters();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.schedule.lr_at(0), params.iter().map(|(_, t)| t.clone()).collect());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = samples.clone();
    let mut records = Vec::new();
    let mut best: Option<(f64, usize, Vec<(String, Tensor)>)> = None;

    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr_at(epoch);
        opt.set_lr(lr);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut ce_s_sum, mut ce_w_sum) = (0.0, 0.0, 0.0);
        let (mut shape_ok, mut weight_ok) = (0, 0);
        for (batch_index, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let frames: Vec<&Tensor> = chunk.iter().map(|&(s, f)| &train[s].frames[f]).collect();
            let shapes: Vec<usize> = chunk.iter().map(|&(s, _)| train[s].labels.shape.index()).collect();
            let weights: Vec<usize> = chunk.iter().map(|&(s, _)| train[s].labels.weight.index()).collect();
            let latent = model.extractor.forward(&stack(&frames)?)?;
            let shape_logits = model.classify(&latent, Head::Shape)?;
            let weight_logits = model.classify(&latent, Head::Weight)?;
            let ce_s = cross_entropy(&shape_logits, &shapes)?;
            let ce_w = cross_entropy(&weight_logits, &weights)?;
            let loss = ce_s.add(&ce_w)?;
            let value = loss.item()?;
            let diag = |what: &str| {
                Error::NonFinite(format!(
                    "stage 1 {what} at epoch {epoch}, batch {batch_index} (lr {lr}); try a lower learning rate"
                ))
            };
            if !value.is_finite() {
                return Err(diag(&format!("loss is {value}")));
            }
            opt.zero_grad();
            loss.backward().map_err(|e| match e {
                Error::NonFinite(m) => diag(&m),
                other => other,
            })?;
            opt.step()?;
            let n = chunk.len() as f64;
            loss_sum += value * n;
            ce_s_sum += ce_s.item()? * n;
            ce_w_sum += ce_w.item()? * n;
            shape_ok += count_correct(&argmax_rows(&shape_logits), &shapes);
            weight_ok += count_correct(&argmax_rows(&weight_logits), &weights);
        }
        let n = order.len() as f64;
        let (val_shape, val_weight) = if val.is_empty() {
            (None, None)
        } else {
            let (s, w) = frame_accuracy(model, val, cfg.frame_stride, cfg.batch_size)?;
            (Some(s), Some(w))
        };
        let record = EpochRecord {
            stage: Stage::Stage1,
            epoch,
            lr,
            samples: order.len(),
            loss: loss_sum / n,
            ce_shape: ce_s_sum / n,
            ce_weight: Some(ce_w_sum / n),
            sum_mse: None,
            mean_mse: None,
            train_shape_acc: shape_ok as f64 / n,
            train_weight_acc: Some(weight_ok as f64 / n),
            val_shape_acc: val_shape,
            val_weight_acc: val_weight,
            val_mean_mse: None,
            frozen_checksum: None,
        };
        // higher is better: summed validation accuracy of both heads, else
        // negated loss
        let score = match (val_shape, val_weight) {
            (Some(s), Some(w)) => s + w,
            _ => -record.loss,
        };
        if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            best = Some((score, epoch, snapshot(&model.named_parameters())));
        }
        let flow = observer(&record);
        records.push(record);
        if flow.is_break() {
            break;
        }
    }
    let (_, best_epoch, best_parameters) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        report: TrainReport {
            stage: Stage::Stage1,
            epochs: records,
            best_epoch,
            wall_time_s: started.elapsed().as_secs_f64(),
        },
        best_parameters,
    })
}
