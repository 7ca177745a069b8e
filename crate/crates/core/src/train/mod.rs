//! Two-stage training: single-frame perception first, then the latent
//! predictor on top of the frozen perception network.

mod loss;
mod stage1;
mod stage2;

use std::ops::ControlFlow;

use serde::{Deserialize, Serialize};

pub use loss::{combined_loss, LossParts};
pub use stage1::train_stage1;
pub use stage2::{train_stage2, window_latents};

use crate::data::LoadedSequence;
use crate::error::{Error, Result};
use crate::tensor::{LrSchedule, OptimKind, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Stage1,
    Stage2,
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" | "stage1" => Ok(Stage::Stage1),
            "2" | "stage2" => Ok(Stage::Stage2),
            other => Err(Error::Usage(format!("unknown stage '{other}' (expected 1 or 2)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimKind,
    pub schedule: LrSchedule,
    /// Weight of the shape cross-entropy in the stage-2 loss.
    pub ce_weight: f64,
    pub seed: u64,
    /// Stage 1 trains on every `frame_stride`-th frame of each sequence.
    pub frame_stride: usize,
    /// Stage 2: extract every latent once up front instead of per batch.
    /// The extractor is frozen, so both give the same numbers.
    pub cache_latents: bool,
    /// Sequences of each training garment held out for validation.
    pub validation_sequences: usize,
}

impl TrainConfig {
    /// SGD with momentum 0.9 at a constant 1e-3.
    pub fn stage1(seed: u64) -> Self {
        Self {
            stage: Stage::Stage1,
            epochs: 35,
            batch_size: 16,
            optimizer: OptimKind::sgd(0.9),
            schedule: LrSchedule::constant(1e-3),
            ce_weight: 1000.0,
            seed,
            frame_stride: 1,
            cache_latents: false,
            validation_sequences: 1,
        }
    }

    /// Adam at 1e-4, divided by 10 every 15 epochs.
    pub fn stage2(seed: u64) -> Self {
        Self {
            stage: Stage::Stage2,
            optimizer: OptimKind::adam(),
            schedule: LrSchedule {
                base_lr: 1e-4,
                step_size: 15,
                decay: 0.1,
            },
            ..Self::stage1(seed)
        }
    }

    pub fn for_stage(stage: Stage, seed: u64) -> Self {
        match stage {
            Stage::Stage1 => Self::stage1(seed),
            Stage::Stage2 => Self::stage2(seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.frame_stride == 0 {
            return Err(Error::Config("epochs, batch_size and frame_stride must be positive".into()));
        }
        if !(self.ce_weight > 0.0) {
            return Err(Error::Config(format!("ce_weight must be positive, got {}", self.ce_weight)));
        }
        LrSchedule::new(self.schedule.base_lr, self.schedule.step_size, self.schedule.decay)?;
        if !(self.schedule.base_lr >= 0.0) {
            return Err(Error::Config("learning rate must be non-negative".into()));
        }
        Ok(())
    }

    /// Applies a `key=value` override. Keys are the field names; the
    /// optimizer takes `sgd`/`adam` and `momentum`, the schedule `lr`,
    /// `lr_step` and `lr_decay`.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Config(format!("train.{key}: cannot parse '{value}'"));
        let v = value.trim();
        match key {
            "epochs" => self.epochs = v.parse().map_err(|_| bad())?,
            "batch_size" => self.batch_size = v.parse().map_err(|_| bad())?,
            "ce_weight" => self.ce_weight = v.parse().map_err(|_| bad())?,
            "seed" => self.seed = v.parse().map_err(|_| bad())?,
            "frame_stride" => self.frame_stride = v.parse().map_err(|_| bad())?,
            "cache_latents" => self.cache_latents = v.parse().map_err(|_| bad())?,
            "validation_sequences" => self.validation_sequences = v.parse().map_err(|_| bad())?,
            "lr" => self.schedule.base_lr = v.parse().map_err(|_| bad())?,
            "lr_step" => self.schedule.step_size = v.parse().map_err(|_| bad())?,
            "lr_decay" => self.schedule.decay = v.parse().map_err(|_| bad())?,
            "optimizer" => {
                self.optimizer = match v {
                    "sgd" => OptimKind::sgd(0.9),
                    "adam" => OptimKind::adam(),
                    _ => return Err(bad()),
                }
            }
            "momentum" => match &mut self.optimizer {
                OptimKind::SgdMomentum { momentum } => *momentum = v.parse().map_err(|_| bad())?,
                OptimKind::Adam { .. } => return Err(Error::Config("momentum applies to sgd only".into())),
            },
            _ => return Err(Error::Config(format!("unknown training key '{key}'"))),
        }
        self.validate()
    }
}

/// One epoch's numbers. Accuracies on the training set are running values
/// over the epoch's batches, taken before each optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub lr: f64,
    pub samples: usize,
    pub loss: f64,
    pub ce_shape: f64,
    /// Stage 1 only; stage 2 has no weight term.
    pub ce_weight: Option<f64>,
    /// Squared error summed over latent elements, averaged over windows.
    pub sum_mse: Option<f64>,
    /// `sum_mse` divided by the latent element count.
    pub mean_mse: Option<f64>,
    pub train_shape_acc: f64,
    pub train_weight_acc: Option<f64>,
    pub val_shape_acc: Option<f64>,
    pub val_weight_acc: Option<f64>,
    pub val_mean_mse: Option<f64>,
    /// Stage 2: checksum of the frozen parameters after the epoch, hex.
    pub frozen_checksum: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: Stage,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub wall_time_s: f64,
}

impl TrainReport {
    /// One JSON object per epoch. Wall time is left out so that identical
    /// runs give identical files.
    pub fn to_json_lines(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("epoch record serializes") + "\n")
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    /// Copies of every model parameter at the best epoch.
    pub best_parameters: Vec<(String, Tensor)>,
}

/// Called after each epoch; `Break` ends training early.
pub type EpochObserver<'a> = &'a mut dyn FnMut(&EpochRecord) -> ControlFlow<()>;

/// Holds out the last `per_garment` sequences of each garment, keeping at
/// least one sequence per garment for training.
pub fn split_validation(sequences: &[LoadedSequence], per_garment: usize) -> (Vec<LoadedSequence>, Vec<LoadedSequence>) {
    let mut counts = std::collections::HashMap::new();
    for s in sequences {
        *counts.entry(s.garment_id.as_str()).or_insert(0usize) += 1;
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for s in sequences {
        let n = counts[s.garment_id.as_str()];
        let held = per_garment.min(n.saturating_sub(1));
        if s.sequence_index + held >= n {
            val.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    (train, val)
}

pub(crate) fn stack(frames: &[&Tensor]) -> Result<Tensor> {
    let mut shape = frames[0].shape().to_vec();
    shape[0] = frames.len();
    let mut data = Vec::with_capacity(frames.len() * frames[0].numel());
    for f in frames {
        data.extend_from_slice(&f.data());
    }
    Tensor::new(&shape, data)
}

pub(crate) fn stack_latents(latents: &[Tensor]) -> Result<Tensor> {
    stack(&latents.iter().collect::<Vec<_>>())
}

pub(crate) fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

pub(crate) fn count_correct(pred: &[usize], truth: &[usize]) -> usize {
    pred.iter().zip(truth).filter(|(a, b)| a == b).count()
}

pub(crate) fn checksum_hex(params: &[(String, Tensor)]) -> String {
    let tensors: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    format!("{:016x}", crate::tensor::checksum(&tensors))
}

pub(crate) fn snapshot(params: &[(String, Tensor)]) -> Vec<(String, Tensor)> {
    params.iter().map(|(n, t)| (n.clone(), t.deep_clone())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Labels, ShapeClass, WeightClass};

    #[test]
    fn defaults_follow_the_protocol() {
        let s1 = TrainConfig::stage1(0);
        assert_eq!(s1.optimizer, OptimKind::sgd(0.9));
        assert_eq!(s1.schedule.lr_at(34), 1e-3);
        let s2 = TrainConfig::stage2(0);
        assert_eq!(s2.epochs, 35);
        assert_eq!(s2.ce_weight, 1000.0);
        let lrs: Vec<f64> = (0..35).map(|e| s2.schedule.lr_at(e)).collect();
        assert!(lrs[..15].iter().all(|&l| l == 1e-4));
        assert!(lrs[15..30].iter().all(|&l| l == 1e-5));
        assert!(lrs[30..].iter().all(|&l| l == 1e-6));
    }

    #[test]
    fn overrides_and_validation() {
        let mut c = TrainConfig::stage1(0);
        c.apply_override("epochs", "3").unwrap();
        c.apply_override("lr", "0.01").unwrap();
        assert_eq!((c.epochs, c.schedule.base_lr), (3, 0.01));
        assert!(c.apply_override("epochs", "0").is_err());
        assert!(TrainConfig::stage1(0).apply_override("ce_weight", "0").is_err());
        assert!(TrainConfig::stage1(0).apply_override("nope", "1").is_err());
    }

    #[test]
    fn validation_split_holds_out_last_sequences() {
        let labels = Labels {
            shape: ShapeClass::Towel,
            weight: WeightClass::Light,
        };
        let seq = |g: &str, i| LoadedSequence {
            garment_id: g.into(),
            sequence_index: i,
            labels,
            frames: vec![],
            empty_mask: vec![],
        };
        let all = vec![seq("a", 0), seq("a", 1), seq("a", 2), seq("b", 0)];
        let (train, val) = split_validation(&all, 1);
        assert_eq!(val.len(), 1);
        assert_eq!((val[0].garment_id.as_str(), val[0].sequence_index), ("a", 2));
        assert_eq!(train.len(), 3);
    }
}
