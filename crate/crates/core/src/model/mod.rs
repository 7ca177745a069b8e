//! Extractor, linear classifier heads and the LSTM latent predictor.

mod preset;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use preset::{ConvLayer, ModelPreset, ShapeTrace, SHAPE_CLASSES, WEIGHT_CLASSES};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{
    adaptive_avg_pool2d, conv2d, dense, load_checkpoint, lstm_cell, max_pool2d, save_checkpoint, LstmParams,
    Tensor,
};

/// Feature map of one frame, `[channels, h, w]`.
#[derive(Debug, Clone)]
pub struct LatentMap {
    pub values: Tensor,
    pub frame_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Shape,
    Weight,
}

impl Head {
    pub fn classes(self) -> usize {
        match self {
            Head::Shape => SHAPE_CLASSES,
            Head::Weight => WEIGHT_CLASSES,
        }
    }
}

impl std::str::FromStr for Head {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shape" => Ok(Head::Shape),
            "weight" => Ok(Head::Weight),
            other => Err(Error::Usage(format!("unknown classifier head '{other}'"))),
        }
    }
}

fn kaiming_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor {
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng).requires_grad_(true)
}

fn bias_init<R: Rng + ?Sized>(n: usize, fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(&[n], -bound, bound, rng).requires_grad_(true)
}

#[derive(Debug, Clone)]
enum Stage {
    Conv {
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
}

/// Convolutional stack mapping `[B,Cin,H,W]` frames to `[B,C,h,w]` latents.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    stages: Vec<Stage>,
    input: [usize; 3],
    latent: [usize; 3],
}

impl FeatureExtractor {
    pub fn new<R: Rng + ?Sized>(preset: &ModelPreset, rng: &mut R) -> Result<Self> {
        preset.trace()?;
        let mut channels = preset.input_channels;
        let mut stages = Vec::new();
        for layer in &preset.conv_stack {
            match *layer {
                ConvLayer::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let fan_in = channels * kernel * kernel;
                    stages.push(Stage::Conv {
                        weight: kaiming_uniform(&[out_channels, channels, kernel, kernel], fan_in, 2f64.sqrt(), rng),
                        bias: bias_init(out_channels, fan_in, rng),
                        stride,
                        padding,
                    });
                    channels = out_channels;
                }
                ConvLayer::MaxPool { kernel, stride } => stages.push(Stage::MaxPool { kernel, stride }),
            }
        }
        let (h, w) = preset.input_size;
        Ok(Self {
            stages,
            input: [preset.input_channels, h, w],
            latent: preset.latent_shape,
        })
    }

    pub fn forward(&self, frames: &Tensor) -> Result<Tensor> {
        if frames.rank() != 4 || frames.shape()[1..] != self.input {
            return Err(dim_err!("extractor expects [B, {:?}], got {:?}", self.input, frames.shape()));
        }
        let mut x = frames.clone();
        for stage in &self.stages {
            x = match stage {
                Stage::Conv {
                    weight,
                    bias,
                    stride,
                    padding,
                } => conv2d(&x, weight, bias, *stride, *padding)?.relu(),
                Stage::MaxPool { kernel, stride } => max_pool2d(&x, *kernel, *stride)?,
            };
        }
        debug_assert_eq!(x.shape()[1..], self.latent);
        Ok(x)
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            if let Stage::Conv { weight, bias, .. } = stage {
                out.push((format!("extractor.{i}.weight"), weight.clone()));
                out.push((format!("extractor.{i}.bias"), bias.clone()));
            }
        }
        out
    }
}

/// Average pool, flatten, then purely linear blocks. No activation or
/// dropout sits between the blocks.
#[derive(Debug, Clone)]
pub struct LinearHead {
    head: Head,
    pool_target: (usize, usize),
    layers: Vec<(Tensor, Tensor)>,
}

impl LinearHead {
    pub fn new<R: Rng + ?Sized>(preset: &ModelPreset, head: Head, rng: &mut R) -> Self {
        let widths = preset.classifier_widths(head.classes());
        let layers = widths
            .windows(2)
            .map(|p| {
                let (fan_in, fan_out) = (p[0], p[1]);
                (kaiming_uniform(&[fan_out, fan_in], fan_in, 1.0, rng), bias_init(fan_out, fan_in, rng))
            })
            .collect();
        Self {
            head,
            pool_target: preset.pool_target,
            layers,
        }
    }

    /// Ordered op names, for structural assertions.
    pub fn describe(&self) -> Vec<String> {
        let mut ops = vec![
            format!("avg_pool({}x{})", self.pool_target.0, self.pool_target.1),
            "flatten".to_string(),
        ];
        ops.extend(self.layers.iter().map(|(w, _)| format!("linear({}->{})", w.shape()[1], w.shape()[0])));
        ops
    }

    /// `[B,C,h,w]` latents to `[B,K]` logits.
    pub fn forward(&self, latent: &Tensor) -> Result<Tensor> {
        let pooled = adaptive_avg_pool2d(latent, self.pool_target)?;
        let mut x = pooled.flatten_batch()?;
        for (w, b) in &self.layers {
            x = dense(&x, w, b)?;
        }
        Ok(x)
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let prefix = match self.head {
            Head::Shape => "shape_head",
            Head::Weight => "weight_head",
        };
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, (w, b))| [(format!("{prefix}.{i}.weight"), w.clone()), (format!("{prefix}.{i}.bias"), b.clone())])
            .collect()
    }
}

/// LSTM over the three flattened latents followed by a linear projection
/// back to the latent element count.
#[derive(Debug, Clone)]
pub struct LatentPredictor {
    lstm: LstmParams,
    proj_weight: Tensor,
    proj_bias: Tensor,
    latent: [usize; 3],
}

impl LatentPredictor {
    pub fn new<R: Rng + ?Sized>(preset: &ModelPreset, rng: &mut R) -> Self {
        let n = preset.latent_numel();
        let h = preset.lstm_hidden;
        Self {
            lstm: LstmParams::init(n, h, rng),
            proj_weight: kaiming_uniform(&[n, h], h, 1.0, rng),
            proj_bias: bias_init(n, h, rng),
            latent: preset.latent_shape,
        }
    }

    /// Predicts the latent three steps after `latents[0]` for a batch.
    /// Each input is `[B,C,h,w]`; the output has the same shape.
    pub fn forward(&self, latents: [&Tensor; 3]) -> Result<Tensor> {
        let first = latents[0].shape();
        if latents.iter().any(|l| l.shape() != first) {
            return Err(dim_err!(
                "latent sequence shapes differ: {:?}",
                latents.iter().map(|l| l.shape().to_vec()).collect::<Vec<_>>()
            ));
        }
        if first.len() != 4 || first[1..] != self.latent {
            return Err(dim_err!("predictor expects [B, {:?}] latents, got {first:?}", self.latent));
        }
        let batch = first[0];
        let hidden = self.lstm.hidden();
        let mut h = Tensor::zeros(&[batch, hidden]);
        let mut c = Tensor::zeros(&[batch, hidden]);
        for latent in latents {
            (h, c) = lstm_cell(&latent.flatten_batch()?, &h, &c, &self.lstm)?;
        }
        let [ch, lh, lw] = self.latent;
        dense(&h, &self.proj_weight, &self.proj_bias)?.reshape(&[batch, ch, lh, lw])
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        vec![
            ("dynamics.lstm.w_ih".into(), self.lstm.w_ih.clone()),
            ("dynamics.lstm.w_hh".into(), self.lstm.w_hh.clone()),
            ("dynamics.lstm.bias".into(), self.lstm.bias.clone()),
            ("dynamics.proj.weight".into(), self.proj_weight.clone()),
            ("dynamics.proj.bias".into(), self.proj_bias.clone()),
        ]
    }
}

/// The full network: extractor, two linear heads, latent predictor.
#[derive(Debug, Clone)]
pub struct GarmentNet {
    preset: ModelPreset,
    pub extractor: FeatureExtractor,
    pub shape_head: LinearHead,
    pub weight_head: LinearHead,
    pub dynamics: LatentPredictor,
}

impl GarmentNet {
    pub fn new(preset: &ModelPreset, seed: u64) -> Result<Self> {
        let trace = preset.trace()?;
        if trace.parameter_count > preset.max_parameters {
            return Err(Error::Config(format!(
                "preset '{}' needs {} parameters, over the max_parameters limit of {}",
                preset.name, trace.parameter_count, preset.max_parameters
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            preset: preset.clone(),
            extractor: FeatureExtractor::new(preset, &mut rng)?,
            shape_head: LinearHead::new(preset, Head::Shape, &mut rng),
            weight_head: LinearHead::new(preset, Head::Weight, &mut rng),
            dynamics: LatentPredictor::new(preset, &mut rng),
        })
    }

    pub fn preset(&self) -> &ModelPreset {
        &self.preset
    }

    /// Latent map of a single `[1,Cin,H,W]` frame.
    pub fn extract_features(&self, frame: &Tensor, frame_index: usize) -> Result<LatentMap> {
        if frame.rank() != 4 || frame.shape()[0] != 1 {
            return Err(dim_err!("extract_features expects one [1,Cin,H,W] frame, got {:?}", frame.shape()));
        }
        let out = self.extractor.forward(frame)?;
        let [c, h, w] = self.preset.latent_shape;
        Ok(LatentMap {
            values: out.reshape(&[c, h, w])?,
            frame_index,
        })
    }

    pub fn head(&self, head: Head) -> &LinearHead {
        match head {
            Head::Shape => &self.shape_head,
            Head::Weight => &self.weight_head,
        }
    }

    /// Logits for a batch of latents `[B,C,h,w]`.
    pub fn classify(&self, latent: &Tensor, head: Head) -> Result<Tensor> {
        self.head(head).forward(latent)
    }

    /// Ĉ_{t+3} from three consecutive latent maps.
    pub fn predict_next_latent(&self, maps: [&LatentMap; 3]) -> Result<LatentMap> {
        let [c, h, w] = self.preset.latent_shape;
        let batched = maps
            .iter()
            .map(|m| {
                if m.values.shape() != [c, h, w] {
                    return Err(dim_err!("latent {:?} does not match preset {:?}", m.values.shape(), [c, h, w]));
                }
                m.values.reshape(&[1, c, h, w])
            })
            .collect::<Result<Vec<_>>>()?;
        let pred = self.dynamics.forward([&batched[0], &batched[1], &batched[2]])?;
        Ok(LatentMap {
            values: pred.reshape(&[c, h, w])?,
            frame_index: maps[2].frame_index + 1,
        })
    }

    /// Extractor and both heads: the stage-1 parameter set.
    pub fn perception_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = self.extractor.named_parameters();
        out.extend(self.shape_head.named_parameters());
        out.extend(self.weight_head.named_parameters());
        out
    }

    pub fn dynamics_parameters(&self) -> Vec<(String, Tensor)> {
        self.dynamics.named_parameters()
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = self.perception_parameters();
        out.extend(self.dynamics_parameters());
        out
    }

    /// Toggles `requires_grad` on the extractor and heads.
    pub fn set_perception_trainable(&self, trainable: bool) {
        for (_, t) in self.perception_parameters() {
            t.set_requires_grad(trainable);
        }
    }

    pub fn set_dynamics_trainable(&self, trainable: bool) {
        for (_, t) in self.dynamics_parameters() {
            t.set_requires_grad(trainable);
        }
    }

    /// Independent copy of every parameter, for concurrent inference.
    pub fn deep_clone(&self) -> Self {
        let mut fresh = self.clone();
        fresh.replace_parameters(Tensor::deep_clone);
        fresh
    }

    fn replace_parameters(&mut self, f: impl Fn(&Tensor) -> Tensor) {
        for stage in &mut self.extractor.stages {
            if let Stage::Conv { weight, bias, .. } = stage {
                *weight = f(weight);
                *bias = f(bias);
            }
        }
        for head in [&mut self.shape_head, &mut self.weight_head] {
            for (w, b) in &mut head.layers {
                *w = f(w);
                *b = f(b);
            }
        }
        let d = &mut self.dynamics;
        d.lstm.w_ih = f(&d.lstm.w_ih);
        d.lstm.w_hh = f(&d.lstm.w_hh);
        d.lstm.bias = f(&d.lstm.bias);
        d.proj_weight = f(&d.proj_weight);
        d.proj_bias = f(&d.proj_bias);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.named_parameters())
    }

    /// Loads values into this model. Names and shapes must match exactly.
    pub fn load_parameters(&self, entries: &[(String, Tensor)]) -> Result<()> {
        let params = self.named_parameters();
        if entries.len() != params.len() {
            return Err(Error::Usage(format!(
                "checkpoint holds {} tensors, preset '{}' expects {} (preset mismatch?)",
                entries.len(),
                self.preset.name,
                params.len()
            )));
        }
        for ((name, dst), (src_name, src)) in params.iter().zip(entries) {
            if name != src_name || dst.shape() != src.shape() {
                return Err(Error::Usage(format!(
                    "checkpoint entry {src_name} {:?} does not match {name} {:?} (preset mismatch?)",
                    src.shape(),
                    dst.shape()
                )));
            }
        }
        for ((_, dst), (_, src)) in params.iter().zip(entries) {
            dst.set_data(src.to_vec())?;
        }
        Ok(())
    }

    pub fn load(preset: &ModelPreset, path: &Path) -> Result<Self> {
        let entries = load_checkpoint(path)?;
        let model = Self::new(preset, 0)?;
        model.load_parameters(&entries)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{checksum, no_grad};

    fn tensors(params: &[(String, Tensor)]) -> Vec<Tensor> {
        params.iter().map(|(_, t)| t.clone()).collect()
    }

    #[test]
    fn toy_latent_and_logits() {
        let model = GarmentNet::new(&ModelPreset::toy(), 1).unwrap();
        let frame = Tensor::full(&[1, 1, 64, 64], 0.5);
        let latent = model.extract_features(&frame, 0).unwrap();
        assert_eq!(latent.values.shape(), &[32, 6, 6]);
        let batched = latent.values.reshape(&[1, 32, 6, 6]).unwrap();
        assert_eq!(model.classify(&batched, Head::Shape).unwrap().shape(), &[1, 5]);
        assert_eq!(model.classify(&batched, Head::Weight).unwrap().shape(), &[1, 3]);
    }

    #[test]
    fn zero_frame_gives_finite_latent() {
        let model = GarmentNet::new(&ModelPreset::toy(), 2).unwrap();
        let latent = model.extract_features(&Tensor::zeros(&[1, 1, 64, 64]), 0).unwrap();
        assert!(latent.values.is_finite());
    }

    #[test]
    fn wrong_frame_size_is_rejected() {
        let model = GarmentNet::new(&ModelPreset::toy(), 2).unwrap();
        assert!(model.extract_features(&Tensor::zeros(&[1, 1, 32, 32]), 0).is_err());
        assert!(model.extract_features(&Tensor::zeros(&[1, 3, 64, 64]), 0).is_err());
    }

    #[test]
    fn prediction_keeps_latent_shape() {
        let model = GarmentNet::new(&ModelPreset::toy(), 3).unwrap();
        let maps: Vec<LatentMap> = (0..3)
            .map(|i| model.extract_features(&Tensor::full(&[1, 1, 64, 64], 0.1 * i as f64), i).unwrap())
            .collect();
        let pred = model.predict_next_latent([&maps[0], &maps[1], &maps[2]]).unwrap();
        assert_eq!(pred.values.shape(), &[32, 6, 6]);
        assert_eq!(pred.frame_index, 3);
    }

    #[test]
    fn zero_dynamics_predict_zero() {
        let model = GarmentNet::new(&ModelPreset::toy(), 3).unwrap();
        for (_, t) in model.dynamics_parameters() {
            t.set_data(vec![0.0; t.numel()]).unwrap();
        }
        let map = LatentMap {
            values: Tensor::full(&[32, 6, 6], 0.3),
            frame_index: 0,
        };
        let pred = model.predict_next_latent([&map, &map, &map]).unwrap();
        assert!(pred.values.to_vec().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn mismatched_latents_are_rejected() {
        let model = GarmentNet::new(&ModelPreset::toy(), 3).unwrap();
        let a = LatentMap {
            values: Tensor::zeros(&[32, 6, 6]),
            frame_index: 0,
        };
        let b = LatentMap {
            values: Tensor::zeros(&[16, 6, 6]),
            frame_index: 1,
        };
        assert!(model.predict_next_latent([&a, &b, &a]).is_err());
    }

    #[test]
    fn heads_are_purely_linear() {
        let model = GarmentNet::new(&ModelPreset::toy(), 3).unwrap();
        assert_eq!(
            model.shape_head.describe(),
            vec!["avg_pool(6x6)", "flatten", "linear(1152->1152)", "linear(1152->256)", "linear(256->5)"]
        );
        assert!(model
            .weight_head
            .describe()
            .iter()
            .all(|op| !op.contains("relu") && !op.contains("dropout")));
    }

    #[test]
    fn paper_preset_is_too_big_to_allocate_by_default() {
        assert!(matches!(GarmentNet::new(&ModelPreset::paper(), 0), Err(Error::Config(_))));
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dptc");
        let model = GarmentNet::new(&ModelPreset::toy(), 4).unwrap();
        model.save(&path).unwrap();
        let back = GarmentNet::load(&ModelPreset::toy(), &path).unwrap();
        assert_eq!(checksum(&tensors(&back.named_parameters())), checksum(&tensors(&model.named_parameters())));
        let mut other = ModelPreset::toy();
        other.lstm_hidden = 64;
        assert!(matches!(GarmentNet::load(&other, &path), Err(Error::Usage(_))));
    }

    #[test]
    fn deep_clone_is_independent() {
        let model = GarmentNet::new(&ModelPreset::toy(), 5).unwrap();
        let copy = model.deep_clone();
        let (_, t) = &copy.named_parameters()[0];
        t.set_data(vec![0.0; t.numel()]).unwrap();
        assert_ne!(
            checksum(&tensors(&copy.named_parameters())),
            checksum(&tensors(&model.named_parameters()))
        );
        let frame = Tensor::full(&[1, 1, 64, 64], 0.2);
        let a = no_grad(|| model.extract_features(&frame, 0)).unwrap();
        assert!(a.values.is_finite());
    }
}
