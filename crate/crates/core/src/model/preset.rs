use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{conv_out_size, pool_out_size};

pub const SHAPE_CLASSES: usize = 5;
pub const WEIGHT_CLASSES: usize = 3;

/// One stage of the convolutional extractor. Every `Conv` is followed by a ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ConvLayer {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelPreset {
    pub name: String,
    /// (height, width)
    pub input_size: (usize, usize),
    /// 1 for depth, 3 for RGB.
    pub input_channels: usize,
    pub conv_stack: Vec<ConvLayer>,
    /// `[channels, h, w]` the conv stack must end on.
    pub latent_shape: [usize; 3],
    pub pool_target: (usize, usize),
    pub lstm_hidden: usize,
    /// Width of the middle classifier block (512 in the large preset).
    pub classifier_hidden: usize,
    /// Refuse to allocate models with more parameters than this.
    pub max_parameters: usize,
}

/// Layer-by-layer shape record produced by [`ModelPreset::trace`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShapeTrace {
    pub input: [usize; 4],
    pub stages: Vec<(String, [usize; 4])>,
    pub latent: [usize; 4],
    pub pooled: [usize; 4],
    pub flatten: usize,
    pub shape_head: Vec<usize>,
    pub weight_head: Vec<usize>,
    pub lstm_input: usize,
    pub lstm_hidden: usize,
    pub projection: (usize, usize),
    pub parameter_count: usize,
}

const fn conv(out_channels: usize, kernel: usize, stride: usize, padding: usize) -> ConvLayer {
    ConvLayer::Conv {
        out_channels,
        kernel,
        stride,
        padding,
    }
}

const fn pool(kernel: usize, stride: usize) -> ConvLayer {
    ConvLayer::MaxPool { kernel, stride }
}

impl ModelPreset {
    /// AlexNet feature layers with a single depth channel, stopped before the
    /// last max-pool so a 256x256 frame lands on a 256x15x15 latent.
    pub fn paper() -> Self {
        Self {
            name: "paper".into(),
            input_size: (256, 256),
            input_channels: 1,
            conv_stack: vec![
                conv(64, 11, 4, 2),
                pool(3, 2),
                conv(192, 5, 1, 2),
                pool(3, 2),
                conv(384, 3, 1, 1),
                conv(256, 3, 1, 1),
                conv(256, 3, 1, 1),
            ],
            latent_shape: [256, 15, 15],
            pool_target: (6, 6),
            lstm_hidden: 1024,
            classifier_hidden: 512,
            max_parameters: 64_000_000,
        }
    }

    /// Desk-scale network: 64x64 input, three convolutions, 32x6x6 latent.
    pub fn toy() -> Self {
        Self {
            name: "toy".into(),
            input_size: (64, 64),
            input_channels: 1,
            conv_stack: vec![conv(16, 5, 2, 2), pool(3, 2), conv(32, 3, 1, 1), pool(3, 2), conv(32, 2, 1, 0)],
            latent_shape: [32, 6, 6],
            pool_target: (6, 6),
            lstm_hidden: 128,
            classifier_hidden: 256,
            max_parameters: 64_000_000,
        }
    }

    /// `paper`, `toy`, or either with an `-rgb` suffix for 3-channel input.
    pub fn by_name(name: &str) -> Result<Self> {
        let (base, rgb) = match name.strip_suffix("-rgb") {
            Some(base) => (base, true),
            None => (name, false),
        };
        let mut preset = match base {
            "paper" => Self::paper(),
            "toy" => Self::toy(),
            other => return Err(Error::Config(format!("unknown preset '{other}' (expected paper or toy)"))),
        };
        if rgb {
            preset.input_channels = 3;
            preset.name = name.to_string();
        }
        Ok(preset)
    }

    /// Applies `key = value` overrides. Known keys: `input_channels`,
    /// `input_size` (square side; the latent shape follows),
    /// `lstm_hidden`, `classifier_hidden`, `max_parameters`.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        let parse = |v: &str| -> Result<usize> {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("model.{key}: '{v}' is not a positive integer")))
                .and_then(|n| {
                    if n == 0 {
                        Err(Error::Config(format!("model.{key} must be positive")))
                    } else {
                        Ok(n)
                    }
                })
        };
        match key {
            "input_channels" => {
                let c = parse(value)?;
                if c != 1 && c != 3 {
                    return Err(Error::Config(format!("input_channels must be 1 or 3, got {c}")));
                }
                self.input_channels = c;
            }
            "input_size" => {
                let n = parse(value)?;
                self.input_size = (n, n);
                self.latent_shape = self.stack_output()?;
            }
            "lstm_hidden" => self.lstm_hidden = parse(value)?,
            "classifier_hidden" => self.classifier_hidden = parse(value)?,
            "max_parameters" => self.max_parameters = parse(value)?,
            other => return Err(Error::Config(format!("unknown model override '{other}'"))),
        }
        Ok(())
    }

    /// Reads a preset file:
    ///
    /// ```toml
    /// preset = "toy"        # base preset, required
    /// lstm_hidden = 64      # any key accepted by apply_override
    /// ```
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: BTreeMap<String, toml::Value> =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = table
            .get("preset")
            .and_then(toml::Value::as_str)
            .ok_or_else(|| Error::Config(format!("{}: missing string key 'preset'", path.display())))?;
        let mut preset = Self::by_name(base)?;
        for (k, v) in &table {
            if k == "preset" {
                continue;
            }
            let value = match v {
                toml::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            preset.apply_override(k, &value)?;
        }
        Ok(preset)
    }

    /// `[C,h,w]` at the end of the conv stack for the declared input size.
    fn stack_output(&self) -> Result<[usize; 3]> {
        let (mut c, (mut h, mut w)) = (self.input_channels, self.input_size);
        for layer in &self.conv_stack {
            match *layer {
                ConvLayer::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    c = out_channels;
                    h = conv_out_size(h, kernel, stride, padding)?;
                    w = conv_out_size(w, kernel, stride, padding)?;
                }
                ConvLayer::MaxPool { kernel, stride } => {
                    h = pool_out_size(h, kernel, stride)?;
                    w = pool_out_size(w, kernel, stride)?;
                }
            }
        }
        Ok([c, h, w])
    }

    pub fn latent_numel(&self) -> usize {
        self.latent_shape.iter().product()
    }

    pub fn flatten_len(&self) -> usize {
        self.latent_shape[0] * self.pool_target.0 * self.pool_target.1
    }

    /// Widths of the linear blocks: features stay, then shrink, then classify.
    pub fn classifier_widths(&self, classes: usize) -> Vec<usize> {
        let f = self.flatten_len();
        vec![f, f, self.classifier_hidden, classes]
    }

    /// Walks the conv stack on the declared input size and checks every
    /// downstream width. Fails if the stack does not end on `latent_shape`.
    pub fn trace(&self) -> Result<ShapeTrace> {
        let (h, w) = self.input_size;
        let mut shape = [1, self.input_channels, h, w];
        let input = shape;
        let mut stages = Vec::new();
        let mut params = 0usize;
        for (i, layer) in self.conv_stack.iter().enumerate() {
            match *layer {
                ConvLayer::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    params += out_channels * shape[1] * kernel * kernel + out_channels;
                    shape = [
                        1,
                        out_channels,
                        conv_out_size(shape[2], kernel, stride, padding)?,
                        conv_out_size(shape[3], kernel, stride, padding)?,
                    ];
                    stages.push((format!("conv{i}({kernel}/{stride}/{padding})+relu"), shape));
                }
                ConvLayer::MaxPool { kernel, stride } => {
                    shape = [1, shape[1], pool_out_size(shape[2], kernel, stride)?, pool_out_size(shape[3], kernel, stride)?];
                    stages.push((format!("maxpool{i}({kernel}/{stride})"), shape));
                }
            }
        }
        let latent = shape;
        if latent[1..] != self.latent_shape {
            return Err(Error::Config(format!(
                "preset '{}': conv stack ends at {:?}, declared latent {:?}",
                self.name,
                &latent[1..],
                self.latent_shape
            )));
        }
        let (ph, pw) = self.pool_target;
        if ph > latent[2] || pw > latent[3] {
            return Err(Error::Config(format!("pool target {ph}x{pw} larger than latent")));
        }
        let pooled = [1, latent[1], ph, pw];
        let flatten = self.flatten_len();
        let shape_head = self.classifier_widths(SHAPE_CLASSES);
        let weight_head = self.classifier_widths(WEIGHT_CLASSES);
        for head in [&shape_head, &weight_head] {
            params += head.windows(2).map(|p| p[0] * p[1] + p[1]).sum::<usize>();
        }
        let n = self.latent_numel();
        let hdim = self.lstm_hidden;
        params += 4 * hdim * (n + hdim) + 4 * hdim + n * hdim + n;
        Ok(ShapeTrace {
            input,
            stages,
            latent,
            pooled,
            flatten,
            shape_head,
            weight_head,
            lstm_input: n,
            lstm_hidden: hdim,
            projection: (hdim, n),
            parameter_count: params,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_dimension_chain() {
        let t = ModelPreset::paper().trace().unwrap();
        let spatial: Vec<usize> = t.stages.iter().map(|(_, s)| s[2]).collect();
        assert_eq!(spatial, vec![63, 31, 31, 15, 15, 15, 15]);
        assert_eq!(t.latent, [1, 256, 15, 15]);
        assert_eq!(t.pooled, [1, 256, 6, 6]);
        assert_eq!(t.flatten, 9216);
        assert_eq!(t.shape_head, vec![9216, 9216, 512, 5]);
        assert_eq!(t.weight_head, vec![9216, 9216, 512, 3]);
        assert_eq!(t.projection, (1024, 57600));
    }

    #[test]
    fn toy_dimension_chain() {
        let t = ModelPreset::toy().trace().unwrap();
        assert_eq!(t.latent, [1, 32, 6, 6]);
        assert_eq!(t.flatten, 1152);
        assert_eq!(t.shape_head, vec![1152, 1152, 256, 5]);
        assert!(t.parameter_count < 5_000_000);
    }

    #[test]
    fn inconsistent_stack_is_rejected() {
        let mut p = ModelPreset::toy();
        p.latent_shape = [32, 7, 7];
        assert!(p.trace().is_err());
    }

    #[test]
    fn rgb_variant_and_overrides() {
        let mut p = ModelPreset::by_name("toy-rgb").unwrap();
        assert_eq!(p.input_channels, 3);
        p.apply_override("lstm_hidden", "64").unwrap();
        assert_eq!(p.lstm_hidden, 64);
        assert!(p.apply_override("lstm_hidden", "0").is_err());
        assert!(p.apply_override("bogus", "1").is_err());
        assert!(ModelPreset::by_name("vgg16").is_err());
    }

    #[test]
    fn preset_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.toml");
        std::fs::write(&path, "preset = \"toy\"\nlstm_hidden = 32\ninput_channels = 3\n").unwrap();
        let p = ModelPreset::from_file(&path).unwrap();
        assert_eq!((p.lstm_hidden, p.input_channels), (32, 3));
    }
}
