use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Dense { inputs: usize, outputs: usize },
    /// Stride 1, zero padding `kernel / 2` on every side.
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize },
    BatchNorm { channels: usize },
    Relu,
    AvgPool2d { kernel: usize },
    Flatten,
    /// Marks the output as `classes` logits.
    SoftmaxHead { classes: usize },
}

/// Sequential architecture over samples of `input_shape` (batch dimension excluded).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
}

impl ModelSpec {
    /// `[BatchNorm(d)] -> (Dense -> BatchNorm -> Relu)* -> Dense -> SoftmaxHead`.
    pub fn mlp(input_dim: usize, hidden: &[usize], classes: usize, input_norm: bool) -> Self {
        let mut layers = Vec::new();
        if input_norm {
            layers.push(Layer::BatchNorm { channels: input_dim });
        }
        let mut width = input_dim;
        for &h in hidden {
            layers.push(Layer::Dense { inputs: width, outputs: h });
            layers.push(Layer::BatchNorm { channels: h });
            layers.push(Layer::Relu);
            width = h;
        }
        layers.push(Layer::Dense { inputs: width, outputs: classes });
        layers.push(Layer::SoftmaxHead { classes });
        Self { input_shape: vec![input_dim], layers }
    }

    /// `Conv -> BatchNorm -> Relu -> AvgPool(2)` per entry of `conv_channels`,
    /// then `Flatten -> Dense -> SoftmaxHead`.
    pub fn cnn(channels: usize, height: usize, width: usize, conv_channels: &[usize], classes: usize) -> Self {
        let mut layers = Vec::new();
        let (mut c, mut h, mut w) = (channels, height, width);
        for &out in conv_channels {
            layers.push(Layer::Conv2d { in_channels: c, out_channels: out, kernel: 3 });
            layers.push(Layer::BatchNorm { channels: out });
            layers.push(Layer::Relu);
            layers.push(Layer::AvgPool2d { kernel: 2 });
            c = out;
            h /= 2;
            w /= 2;
        }
        layers.push(Layer::Flatten);
        layers.push(Layer::Dense { inputs: c * h * w, outputs: classes });
        layers.push(Layer::SoftmaxHead { classes });
        Self { input_shape: vec![channels, height, width], layers }
    }

    /// Propagates shapes through every layer; returns the per-sample output shape.
    pub fn validate(&self) -> Result<Vec<usize>> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Spec(format!("invalid input shape {:?}", self.input_shape)));
        }
        let mut shape = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |why: String| Error::Spec(format!("layer {i} ({layer:?}): {why}"));
            shape = match *layer {
                Layer::Dense { inputs, outputs } => {
                    if shape != [inputs] {
                        return Err(bad(format!("expects [{inputs}], got {shape:?}")));
                    }
                    vec![outputs]
                }
                Layer::Conv2d { in_channels, out_channels, kernel } => {
                    if shape.len() != 3 || shape[0] != in_channels {
                        return Err(bad(format!("expects [{in_channels}, H, W], got {shape:?}")));
                    }
                    if kernel % 2 == 0 {
                        return Err(bad("kernel must be odd for symmetric padding".into()));
                    }
                    vec![out_channels, shape[1], shape[2]]
                }
                Layer::BatchNorm { channels } => {
                    if shape[0] != channels {
                        return Err(bad(format!("expects {channels} channels, got {shape:?}")));
                    }
                    shape
                }
                Layer::Relu => shape,
                Layer::AvgPool2d { kernel } => {
                    if shape.len() != 3 || kernel == 0 || shape[1] < kernel || shape[2] < kernel {
                        return Err(bad(format!("window {kernel} does not fit {shape:?}")));
                    }
                    vec![shape[0], shape[1] / kernel, shape[2] / kernel]
                }
                Layer::Flatten => vec![shape.iter().product()],
                Layer::SoftmaxHead { classes } => {
                    if shape != [classes] {
                        return Err(bad(format!("expects [{classes}] logits, got {shape:?}")));
                    }
                    if i + 1 != self.layers.len() {
                        return Err(bad("softmax head must be the last layer".into()));
                    }
                    shape
                }
            };
        }
        Ok(shape)
    }

    pub fn classes(&self) -> Option<usize> {
        match self.layers.last() {
            Some(Layer::SoftmaxHead { classes }) => Some(*classes),
            _ => None,
        }
    }

    /// Indices of batch-norm layers.
    pub fn batchnorm_layers(&self) -> Vec<usize> {
        self.layers.iter().enumerate().filter(|(_, l)| matches!(l, Layer::BatchNorm { .. })).map(|(i, _)| i).collect()
    }

    /// Pipeline-time requirement for merging and inversion.
    pub fn require_batchnorm(&self) -> Result<()> {
        if self.batchnorm_layers().is_empty() {
            return Err(Error::Spec("model has no batch-norm layer; buffers cannot be merged or inverted".into()));
        }
        Ok(())
    }

    /// `(name, shape)` for each trainable parameter.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                Layer::Dense { inputs, outputs } => {
                    out.push((param_name(i, "weight"), vec![inputs, outputs]));
                    out.push((param_name(i, "bias"), vec![outputs]));
                }
                Layer::Conv2d { in_channels, out_channels, kernel } => {
                    out.push((param_name(i, "weight"), vec![out_channels, in_channels, kernel, kernel]));
                    out.push((param_name(i, "bias"), vec![out_channels]));
                }
                Layer::BatchNorm { channels } => {
                    out.push((param_name(i, "gamma"), vec![channels]));
                    out.push((param_name(i, "beta"), vec![channels]));
                }
                _ => {}
            }
        }
        out
    }
}

pub fn param_name(layer: usize, what: &str) -> String {
    format!("layer{layer:02}.{what}")
}
