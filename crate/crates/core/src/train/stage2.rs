use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    argmax_rows, checksum_hex, combined_loss, count_correct, snapshot, stack, EpochObserver, EpochRecord, Stage,
    TrainConfig, TrainOutcome, TrainReport,
};
use crate::data::LoadedSequence;
use crate::error::{Error, Result};
use crate::model::{GarmentNet, Head};
use crate::tensor::{mse, no_grad, Optimizer, Reduction, Tensor};

const EXTRACT_CHUNK: usize = 32;

/// Latent maps of a run of frames, each `[1,C,h,w]`, computed without
/// recording a graph.
pub fn window_latents(model: &GarmentNet, frames: &[&Tensor]) -> Result<Vec<Tensor>> {
    let [c, h, w] = model.preset().latent_shape;
    let per = c * h * w;
    no_grad(|| {
        let mut out = Vec::with_capacity(frames.len());
        for chunk in frames.chunks(EXTRACT_CHUNK) {
            let latent = model.extractor.forward(&stack(chunk)?)?;
            let data = latent.data();
            for i in 0..chunk.len() {
                out.push(Tensor::new(&[1, c, h, w], data[i * per..(i + 1) * per].to_vec())?);
            }
        }
        Ok(out)
    })
}

/// (sequence, start) of every 4-frame window that avoids empty-mask frames.
fn window_samples(sequences: &[LoadedSequence]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (s, seq) in sequences.iter().enumerate() {
        let empty = |f: usize| seq.empty_mask.get(f).copied().unwrap_or(false);
        for t in 0..seq.frames.len().saturating_sub(3) {
            if !(t..t + 4).any(empty) {
                out.push((s, t));
            }
        }
    }
    out
}

struct LatentSource<'a> {
    model: &'a GarmentNet,
    sequences: &'a [LoadedSequence],
    cache: Option<Vec<Vec<Tensor>>>,
}

impl<'a> LatentSource<'a> {
    fn new(model: &'a GarmentNet, sequences: &'a [LoadedSequence], cache: bool) -> Result<Self> {
        let cache = if cache {
            Some(
                sequences
                    .iter()
                    .map(|s| window_latents(model, &s.frames.iter().collect::<Vec<_>>()))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Ok(Self { model, sequences, cache })
    }

    /// Four `[B,C,h,w]` batches: the three inputs and the target.
    fn batch(&self, windows: &[(usize, usize)]) -> Result<[Tensor; 4]> {
        let latents: Vec<Vec<Tensor>> = match &self.cache {
            Some(cache) => windows.iter().map(|&(s, t)| cache[s][t..t + 4].to_vec()).collect(),
            None => {
                let frames: Vec<&Tensor> = windows
                    .iter()
                    .flat_map(|&(s, t)| self.sequences[s].frames[t..t + 4].iter())
                    .collect();
                window_latents(self.model, &frames)?.chunks(4).map(|c| c.to_vec()).collect()
            }
        };
        let pick = |k: usize| stack(&latents.iter().map(|l| &l[k]).collect::<Vec<_>>());
        Ok([pick(0)?, pick(1)?, pick(2)?, pick(3)?])
    }
}

/// Trains the latent predictor with the extractor and heads frozen. The
/// frozen parameters are checksummed after every epoch and any change is
/// reported as an invariant violation.
pub fn train_stage2(
    model: &GarmentNet,
    train: &[LoadedSequence],
    val: &[LoadedSequence],
    cfg: &TrainConfig,
    observer: EpochObserver<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.stage != Stage::Stage2 {
        return Err(Error::Usage("train_stage2 needs a stage-2 config".into()));
    }
    let samples = window_samples(train);
    if samples.is_empty() {
        return Err(Error::Usage("stage 2 has no training windows (sequences need 4+ frames)".into()));
    }
    let started = Instant::now();
    model.set_perception_trainable(false);
    model.set_dynamics_trainable(true);
    let frozen = model.perception_parameters();
    let frozen_before = checksum_hex(&frozen);
    let latent_numel = model.preset().latent_numel() as f64;
    let params = model.dynamics_parameters();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.schedule.lr_at(0), params.iter().map(|(_, t)| t.clone()).collect());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let source = LatentSource::new(model, train, cfg.cache_latents)?;
    let val_samples = window_samples(val);
    let val_source = LatentSource::new(model, val, cfg.cache_latents)?;

    let mut order = samples.clone();
    let mut records = Vec::new();
    let mut best: Option<(f64, usize, Vec<(String, Tensor)>)> = None;
    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr_at(epoch);
        opt.set_lr(lr);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut ce_sum, mut sq_sum) = (0.0, 0.0, 0.0);
        let (mut shape_ok, mut weight_ok) = (0, 0);
        for (batch_index, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let [x0, x1, x2, target] = source.batch(chunk)?;
            let shapes: Vec<usize> = chunk.iter().map(|&(s, _)| train[s].labels.shape.index()).collect();
            let weights: Vec<usize> = chunk.iter().map(|&(s, _)| train[s].labels.weight.index()).collect();
            let pred = model.dynamics.forward([&x0, &x1, &x2])?;
            let logits = model.classify(&pred, Head::Shape)?;
            let parts = combined_loss(&pred, &target, &logits, &shapes, cfg.ce_weight)?;
            let value = parts.total.item()?;
            let diag = |what: &str| {
                Error::NonFinite(format!(
                    "stage 2 {what} at epoch {epoch}, batch {batch_index} (lr {lr}); try a lower learning rate"
                ))
            };
            if !value.is_finite() {
                return Err(diag(&format!("loss is {value}")));
            }
            opt.zero_grad();
            parts.total.backward().map_err(|e| match e {
                Error::NonFinite(m) => diag(&m),
                other => other,
            })?;
            opt.step()?;
            let n = chunk.len() as f64;
            loss_sum += value * n;
            ce_sum += parts.ce * n;
            sq_sum += parts.sum_mse * n;
            shape_ok += count_correct(&argmax_rows(&logits), &shapes);
            let weight_logits = no_grad(|| model.classify(&pred.detach(), Head::Weight))?;
            weight_ok += count_correct(&argmax_rows(&weight_logits), &weights);
        }
        let frozen_now = checksum_hex(&frozen);
        if frozen_now != frozen_before {
            return Err(Error::Invariant(format!(
                "stage 2 changed frozen parameters during epoch {epoch} (checksum {frozen_before} -> {frozen_now})"
            )));
        }
        let (val_shape, val_weight, val_mse) = if val_samples.is_empty() {
            (None, None, None)
        } else {
            let (s, w, m) = evaluate_windows(model, &val_source, val, &val_samples, cfg.batch_size, latent_numel)?;
            (Some(s), Some(w), Some(m))
        };
        let n = order.len() as f64;
        let sum_mse = sq_sum / n;
        let record = EpochRecord {
            stage: Stage::Stage2,
            epoch,
            lr,
            samples: order.len(),
            loss: loss_sum / n,
            ce_shape: ce_sum / n,
            ce_weight: None,
            sum_mse: Some(sum_mse),
            mean_mse: Some(sum_mse / latent_numel),
            train_shape_acc: shape_ok as f64 / n,
            train_weight_acc: Some(weight_ok as f64 / n),
            val_shape_acc: val_shape,
            val_weight_acc: val_weight,
            val_mean_mse: val_mse,
            frozen_checksum: Some(frozen_now),
        };
        let score = -val_mse.unwrap_or(record.loss);
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
            stage: Stage::Stage2,
            epochs: records,
            best_epoch,
            wall_time_s: started.elapsed().as_secs_f64(),
        },
        best_parameters,
    })
}

/// (shape accuracy, weight accuracy, mean-per-element MSE) over windows.
fn evaluate_windows(
    model: &GarmentNet,
    source: &LatentSource<'_>,
    sequences: &[LoadedSequence],
    windows: &[(usize, usize)],
    batch: usize,
    latent_numel: f64,
) -> Result<(f64, f64, f64)> {
    let (mut shape_ok, mut weight_ok, mut sq) = (0, 0, 0.0);
    no_grad(|| -> Result<()> {
        for chunk in windows.chunks(batch) {
            let [x0, x1, x2, target] = source.batch(chunk)?;
            let pred = model.dynamics.forward([&x0, &x1, &x2])?;
            let shapes: Vec<usize> = chunk.iter().map(|&(s, _)| sequences[s].labels.shape.index()).collect();
            let weights: Vec<usize> = chunk.iter().map(|&(s, _)| sequences[s].labels.weight.index()).collect();
            shape_ok += count_correct(&argmax_rows(&model.classify(&pred, Head::Shape)?), &shapes);
            weight_ok += count_correct(&argmax_rows(&model.classify(&pred, Head::Weight)?), &weights);
            sq += mse(&pred, &target, Reduction::Sum)?.item()?;
        }
        Ok(())
    })?;
    let n = windows.len() as f64;
    Ok((shape_ok as f64 / n, weight_ok as f64 / n, sq / n / latent_numel))
}
