//! Layer stacks, the model descriptor, and the recording forward pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{self, PoolSwitches};
use crate::tensor::Tensor;

/// Shape-only description of one layer, as written to model headers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        in_channels: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    MaxPool {
        window: usize,
        stride: usize,
    },
    Flatten,
    Dense {
        out_dim: usize,
        in_dim: usize,
    },
    Softmax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// `(out, in, kh, kw)`
    pub weight: Tensor,
    pub bias: Vec<f32>,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `(out, in)`
    pub weight: Tensor,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(ConvLayer),
    Relu,
    MaxPool { window: usize, stride: usize },
    Flatten,
    Dense(DenseLayer),
    Softmax,
}

impl Layer {
    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Conv(c) => {
                let s = c.weight.shape();
                LayerSpec::Conv {
                    out_channels: s[0],
                    in_channels: s[1],
                    kh: s[2],
                    kw: s[3],
                    stride: c.stride,
                    pad: c.pad,
                }
            }
            Layer::Relu => LayerSpec::Relu,
            Layer::MaxPool { window, stride } => LayerSpec::MaxPool {
                window: *window,
                stride: *stride,
            },
            Layer::Flatten => LayerSpec::Flatten,
            Layer::Dense(d) => LayerSpec::Dense {
                out_dim: d.weight.shape()[0],
                in_dim: d.weight.shape()[1],
            },
            Layer::Softmax => LayerSpec::Softmax,
        }
    }

    /// Zero-weight layer of the given shape.
    pub fn from_spec(spec: LayerSpec) -> Result<Self> {
        Ok(match spec {
            LayerSpec::Conv {
                out_channels,
                in_channels,
                kh,
                kw,
                stride,
                pad,
            } => Layer::Conv(ConvLayer {
                weight: Tensor::new(
                    vec![out_channels, in_channels, kh, kw],
                    vec![0.0; out_channels * in_channels * kh * kw],
                )?,
                bias: vec![0.0; out_channels],
                stride,
                pad,
            }),
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::MaxPool { window, stride } => Layer::MaxPool { window, stride },
            LayerSpec::Flatten => Layer::Flatten,
            LayerSpec::Dense { out_dim, in_dim } => Layer::Dense(DenseLayer {
                weight: Tensor::new(vec![out_dim, in_dim], vec![0.0; out_dim * in_dim])?,
                bias: vec![0.0; out_dim],
            }),
            LayerSpec::Softmax => Layer::Softmax,
        })
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, Layer::Conv(_))
    }

    /// `(weight, bias)` for parameterized layers.
    pub fn params(&self) -> Option<(&Tensor, &[f32])> {
        match self {
            Layer::Conv(c) => Some((&c.weight, &c.bias)),
            Layer::Dense(d) => Some((&d.weight, &d.bias)),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<(&mut Tensor, &mut Vec<f32>)> {
        match self {
            Layer::Conv(c) => Some((&mut c.weight, &mut c.bias)),
            Layer::Dense(d) => Some((&mut d.weight, &mut d.bias)),
            _ => None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().map_or(0, |(w, b)| w.len() + b.len())
    }

    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::Relu => "relu",
            Layer::MaxPool { .. } => "maxpool",
            Layer::Flatten => "flatten",
            Layer::Dense(_) => "dense",
            Layer::Softmax => "softmax",
        }
    }

    /// Output shape for a given input shape, or a description of the break.
    pub(crate) fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        let chw = |s: &[usize]| match *s {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(format!("expected a (C,H,W) input, got {s:?}")),
        };
        match self {
            Layer::Conv(c) => {
                let (ic, h, w) = chw(input)?;
                let s = c.weight.shape();
                if s[1] != ic {
                    return Err(format!("conv expects {} input channels, receives {ic}", s[1]));
                }
                if c.bias.len() != s[0] {
                    return Err(format!("conv bias has {} entries for {} filters", c.bias.len(), s[0]));
                }
                let oh = ops::conv_output_extent(h, s[2], c.stride, c.pad).map_err(|e| e.to_string())?;
                let ow = ops::conv_output_extent(w, s[3], c.stride, c.pad).map_err(|e| e.to_string())?;
                Ok(vec![s[0], oh, ow])
            }
            Layer::MaxPool { window, stride } => {
                let (c, h, w) = chw(input)?;
                if *window == 0 || *stride == 0 || *window > h || *window > w {
                    return Err(format!("pool window {window}/stride {stride} invalid for {h}x{w}"));
                }
                Ok(vec![c, (h - window) / stride + 1, (w - window) / stride + 1])
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Dense(d) => {
                let s = d.weight.shape();
                if input.len() != 1 || input[0] != s[1] {
                    return Err(format!("dense expects [{}] input, receives {input:?}", s[1]));
                }
                if d.bias.len() != s[0] {
                    return Err(format!("dense bias has {} entries for {} outputs", d.bias.len(), s[0]));
                }
                Ok(vec![s[0]])
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::Softmax => {
                if input.len() != 1 {
                    return Err(format!("softmax expects a vector, receives {input:?}"));
                }
                Ok(input.to_vec())
            }
        }
    }
}

/// Opaque auxiliary payload carried inside a model file (classifier heads).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxSection {
    pub kind: String,
    pub meta: serde_json::Value,
    #[serde(skip)]
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelDescriptor {
    /// `(channels, height, width)` of the input image.
    pub input_shape: [usize; 3],
    pub layers: Vec<Layer>,
    pub provenance: Option<String>,
    pub aux: Vec<AuxSection>,
}

impl ModelDescriptor {
    pub fn new(input_shape: [usize; 3], layers: Vec<Layer>) -> Result<Self> {
        let m = Self {
            input_shape,
            layers,
            provenance: None,
            aux: Vec::new(),
        };
        m.validate()?;
        Ok(m)
    }

    /// Zero-initialized model from layer specs.
    pub fn from_specs(input_shape: [usize; 3], specs: &[LayerSpec]) -> Result<Self> {
        let layers = specs.iter().map(|&s| Layer::from_spec(s)).collect::<Result<_>>()?;
        Self::new(input_shape, layers)
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    /// Output shape of every layer, in order.
    pub fn output_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.layers.is_empty() {
            return Err(Error::ShapeChain("model has no layers".into()));
        }
        if self.input_shape.contains(&0) {
            return Err(Error::ShapeChain(format!("input shape {:?} has a zero extent", self.input_shape)));
        }
        let mut shape = self.input_shape.to_vec();
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer
                .output_shape(&shape)
                .map_err(|msg| Error::ShapeChain(format!("layer {i} ({}): {msg}", layer.name())))?;
            shapes.push(shape.clone());
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        self.output_shapes().map(|_| ())
    }

    pub fn conv_indices(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].is_conv()).collect()
    }

    pub fn last_conv_index(&self) -> Option<usize> {
        self.layers.iter().rposition(Layer::is_conv)
    }

    pub fn conv(&self, index: usize) -> Result<&ConvLayer> {
        match self.layers.get(index) {
            Some(Layer::Conv(c)) => Ok(c),
            _ => Err(Error::InvalidArgument(format!("layer {index} is not a conv layer"))),
        }
    }

    pub fn num_classes(&self) -> Result<usize> {
        Ok(self.output_shapes()?.last().expect("validated model has layers").iter().product())
    }
}

/// Every intermediate produced by one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardRecord {
    pub input: Tensor,
    /// Output of each layer, aligned with `model.layers`.
    pub outputs: Vec<Tensor>,
    /// Switches for each max-pool layer, `None` elsewhere.
    pub switches: Vec<Option<PoolSwitches>>,
    /// Whether the last layer is a softmax.
    pub softmax_tail: bool,
}

impl ForwardRecord {
    /// Output of the final layer (probabilities when the model ends in softmax).
    pub fn scores(&self) -> &[f32] {
        self.outputs.last().expect("record has outputs").data()
    }

    /// Pre-softmax class scores.
    pub fn logits(&self) -> &[f32] {
        let n = self.outputs.len();
        if self.softmax_tail && n >= 2 {
            self.outputs[n - 2].data()
        } else {
            self.scores()
        }
    }

    /// Index of the largest score, lowest index on ties.
    pub fn predicted_class(&self) -> usize {
        argmax(self.logits())
    }
}

pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Runs `image` through `model`, keeping every layer output.
pub fn forward_pass(model: &ModelDescriptor, image: &Tensor) -> Result<ForwardRecord> {
    forward_with_mask(model, image, None)
}

/// Forward pass that zeroes conv output channels whose `keep` flag is false.
pub(crate) fn forward_with_mask(
    model: &ModelDescriptor,
    image: &Tensor,
    keep: Option<&[Option<Vec<bool>>]>,
) -> Result<ForwardRecord> {
    if image.shape() != model.input_shape {
        return Err(Error::Shape(format!(
            "image shape {:?} does not match model input {:?}",
            image.shape(),
            model.input_shape
        )));
    }
    let n = model.layers.len();
    let mut outputs: Vec<Tensor> = Vec::with_capacity(n);
    let mut switches = Vec::with_capacity(n);
    for (i, layer) in model.layers.iter().enumerate() {
        let x = outputs.last().unwrap_or(image);
        let (mut y, sw) = apply_layer(layer, x).map_err(|e| e.at_layer(i))?;
        if let Some(Some(flags)) = keep.and_then(|k| k.get(i)) {
            let plane = y.len() / flags.len();
            for (c, &k) in flags.iter().enumerate() {
                if !k {
                    y.data_mut()[c * plane..(c + 1) * plane].fill(0.0);
                }
            }
        }
        outputs.push(y);
        switches.push(sw);
    }
    Ok(ForwardRecord {
        input: image.clone(),
        outputs,
        switches,
        softmax_tail: matches!(model.layers.last(), Some(Layer::Softmax)),
    })
}

pub(crate) fn apply_layer(layer: &Layer, x: &Tensor) -> Result<(Tensor, Option<PoolSwitches>)> {
    Ok(match layer {
        Layer::Conv(c) => (ops::conv2d_forward(x, &c.weight, &c.bias, c.stride, c.pad)?, None),
        Layer::Relu => (ops::relu_forward(x), None),
        Layer::MaxPool { window, stride } => {
            let (y, s) = ops::maxpool_forward(x, *window, *stride)?;
            (y, Some(s))
        }
        Layer::Flatten => (x.clone().reshape(vec![x.len()])?, None),
        Layer::Dense(d) => (Tensor::from_vec(ops::dense_forward(x.data(), &d.weight, &d.bias)?), None),
        Layer::Softmax => {
            if x.shape().len() != 1 {
                return Err(Error::Shape(format!("softmax expects a vector, got {:?}", x.shape())));
            }
            (Tensor::from_vec(ops::softmax(x.data())?), None)
        }
    })
}
