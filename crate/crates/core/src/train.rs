//! Backpropagation and momentum SGD.
//!
//! The same loop trains a fresh model and retrains a pruned one; retraining
//! simply starts from the surviving weights.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::LabeledImage;
use crate::deconv::transposed_conv;
use crate::error::{Error, Result};
use crate::model::{argmax, forward_pass, ForwardRecord, Layer, LayerSpec, ModelDescriptor};
use crate::ops::{self, kernel_dims, valid_range};
use crate::tensor::Tensor;

pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub weight: Tensor,
    pub bias: Vec<f32>,
}

/// Per-layer gradients (or velocities), shaped like the model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Option<ParamGrad>>,
}

impl Gradients {
    pub fn zeros_like(model: &ModelDescriptor) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| {
                    l.params().map(|(w, b)| ParamGrad {
                        weight: Tensor::zeros(w.shape()),
                        bias: vec![0.0; b.len()],
                    })
                })
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .flatten()
            .all(|g| g.weight.is_finite() && g.bias.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 16,
            epochs: 20,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be non-negative", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }

    /// Fine-tuning settings: same shape, a tenth of the learning rate.
    pub fn for_retraining(&self) -> Self {
        Self {
            learning_rate: self.learning_rate * 0.1,
            ..*self
        }
    }
}

pub fn cross_entropy_loss(probs: &[f32], label: usize) -> Result<f64> {
    let p = probs.get(label).ok_or_else(|| {
        Error::InvalidArgument(format!("label {label} out of range for {} classes", probs.len()))
    })?;
    Ok(-(*p as f64).max(PROB_FLOOR).ln())
}

/// Class probabilities for a record, applying softmax if the model lacks one.
pub(crate) fn record_probs(record: &ForwardRecord) -> Result<Vec<f32>> {
    if record.softmax_tail {
        Ok(record.scores().to_vec())
    } else {
        ops::softmax(record.scores())
    }
}

/// `f64` accumulator for summing per-sample gradients in a fixed order.
#[derive(Debug, Clone)]
pub(crate) struct GradAccum {
    layers: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl GradAccum {
    pub(crate) fn new(model: &ModelDescriptor) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| l.params().map(|(w, b)| (vec![0.0; w.len()], vec![0.0; b.len()])))
                .collect(),
        }
    }

    fn reset(&mut self) {
        for (w, b) in self.layers.iter_mut().flatten() {
            w.fill(0.0);
            b.fill(0.0);
        }
    }

    fn to_gradients(&self, model: &ModelDescriptor, scale: f64) -> Gradients {
        Gradients {
            layers: self
                .layers
                .iter()
                .zip(&model.layers)
                .map(|(acc, layer)| {
                    acc.as_ref().map(|(w, b)| ParamGrad {
                        weight: Tensor::new(
                            layer.params().expect("parameterized").0.shape().to_vec(),
                            w.iter().map(|&v| (v * scale) as f32).collect(),
                        )
                        .expect("shape from model"),
                        bias: b.iter().map(|&v| (v * scale) as f32).collect(),
                    })
                })
                .collect(),
        }
    }
}

/// Exact gradients of the cross-entropy loss for one forward record.
pub fn backward_pass(model: &ModelDescriptor, record: &ForwardRecord, label: usize) -> Result<Gradients> {
    let mut acc = GradAccum::new(model);
    backward_into(model, record, label, &mut acc)?;
    Ok(acc.to_gradients(model, 1.0))
}

pub(crate) fn backward_into(
    model: &ModelDescriptor,
    record: &ForwardRecord,
    label: usize,
    acc: &mut GradAccum,
) -> Result<()> {
    let n = model.layers.len();
    if record.outputs.len() != n {
        return Err(Error::Shape(format!(
            "record has {} layer outputs, model has {n} layers",
            record.outputs.len()
        )));
    }
    for (i, (out, layer)) in record.outputs.iter().zip(&model.layers).enumerate() {
        let input = if i == 0 { &record.input } else { &record.outputs[i - 1] };
        let want = layer.output_shape(input.shape()).map_err(Error::Shape)?;
        if out.shape() != want.as_slice() {
            return Err(Error::Shape(format!("record output {i} does not match the model")));
        }
    }
    let probs = record_probs(record)?;
    if label >= probs.len() {
        return Err(Error::InvalidArgument(format!("label {label} out of range for {} classes", probs.len())));
    }
    // d loss / d logits = p - onehot
    let mut grad: Vec<f64> = probs.iter().map(|&p| p as f64).collect();
    grad[label] -= 1.0;
    let top = if record.softmax_tail { n - 1 } else { n };

    for i in (0..top).rev() {
        let input = if i == 0 { &record.input } else { &record.outputs[i - 1] };
        let need_input_grad = i > 0;
        grad = match &model.layers[i] {
            Layer::Dense(d) => {
                let (m, k) = (d.weight.shape()[0], d.weight.shape()[1]);
                let x = input.data();
                let (gw, gb) = acc.layers[i].as_mut().expect("dense has params");
                for r in 0..m {
                    let g = grad[r];
                    gb[r] += g;
                    if g != 0.0 {
                        for (a, &xv) in gw[r * k..(r + 1) * k].iter_mut().zip(x) {
                            *a += g * xv as f64;
                        }
                    }
                }
                if need_input_grad {
                    let mut gx = vec![0f64; k];
                    for (r, row) in d.weight.data().chunks_exact(k).enumerate() {
                        let g = grad[r];
                        for (a, &wv) in gx.iter_mut().zip(row) {
                            *a += g * wv as f64;
                        }
                    }
                    gx
                } else {
                    Vec::new()
                }
            }
            Layer::Flatten => grad,
            Layer::Relu => grad
                .iter()
                .zip(input.data())
                .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                .collect(),
            Layer::MaxPool { .. } => {
                let sw = record.switches[i]
                    .as_ref()
                    .ok_or_else(|| Error::Shape(format!("no switches recorded for layer {i}")))?;
                let mut gx = vec![0f64; input.len()];
                for (&g, &idx) in grad.iter().zip(&sw.indices) {
                    gx[idx] += g;
                }
                gx
            }
            Layer::Conv(c) => {
                let (gw, gb) = acc.layers[i].as_mut().expect("conv has params");
                let out_shape = record.outputs[i].shape();
                conv_param_grads(input, &grad, out_shape, &c.weight, c.stride, c.pad, gw, gb)?;
                if need_input_grad {
                    let g32 = Tensor::new(out_shape.to_vec(), grad.iter().map(|&v| v as f32).collect())?;
                    let (_, h, w) = input.chw()?;
                    transposed_conv(&g32, &c.weight, c.stride, c.pad, (h, w))?
                        .data()
                        .iter()
                        .map(|&v| v as f64)
                        .collect()
                } else {
                    Vec::new()
                }
            }
            Layer::Softmax => {
                return Err(Error::InvalidArgument(format!(
                    "softmax at layer {i} is only supported as the final layer"
                )))
            }
        };
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn conv_param_grads(
    input: &Tensor,
    grad: &[f64],
    out_shape: &[usize],
    kernel: &Tensor,
    stride: usize,
    pad: usize,
    gw: &mut [f64],
    gb: &mut [f64],
) -> Result<()> {
    let (c, h, w) = input.chw()?;
    let (o, _, kh, kw) = kernel_dims(kernel)?;
    let (oh, ow) = (out_shape[1], out_shape[2]);
    for oc in 0..o {
        let g = &grad[oc * oh * ow..(oc + 1) * oh * ow];
        gb[oc] += g.iter().sum::<f64>();
        for ic in 0..c {
            let plane = input.channel(ic);
            for i in 0..kh {
                let (y0, y1) = valid_range(oh, h, i, stride, pad);
                for j in 0..kw {
                    let (x0, x1) = valid_range(ow, w, j, stride, pad);
                    if x0 >= x1 {
                        continue;
                    }
                    let mut s = 0f64;
                    for oy in y0..y1 {
                        let iy = oy * stride + i - pad;
                        let ix0 = x0 * stride + j - pad;
                        let grow = &g[oy * ow + x0..oy * ow + x1];
                        let row = &plane[iy * w..(iy + 1) * w];
                        if stride == 1 {
                            s += grow.iter().zip(&row[ix0..]).map(|(&a, &b)| a * b as f64).sum::<f64>();
                        } else {
                            s += grow
                                .iter()
                                .zip(row[ix0..].iter().step_by(stride))
                                .map(|(&a, &b)| a * b as f64)
                                .sum::<f64>();
                        }
                    }
                    gw[((oc * c + ic) * kh + i) * kw + j] += s;
                }
            }
        }
    }
    Ok(())
}

/// `v ← μ·v − lr·(g + wd·w); w ← w + v`
pub fn sgd_step(
    model: &mut ModelDescriptor,
    grads: &Gradients,
    velocity: &mut Gradients,
    config: &TrainConfig,
) -> Result<()> {
    if grads.layers.len() != model.layers.len() || velocity.layers.len() != model.layers.len() {
        return Err(Error::Shape("gradient/velocity layer count does not match model".into()));
    }
    let lr = config.learning_rate as f64;
    let mu = config.momentum as f64;
    let wd = config.weight_decay as f64;
    let update = |w: &mut [f32], g: &[f32], v: &mut [f32]| {
        for ((w, &g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
            let nv = mu * *v as f64 - lr * (g as f64 + wd * *w as f64);
            *v = nv as f32;
            *w = (*w as f64 + nv) as f32;
        }
    };
    for (i, layer) in model.layers.iter_mut().enumerate() {
        match (layer.params_mut(), &grads.layers[i], &mut velocity.layers[i]) {
            (None, None, None) => {}
            (Some((w, b)), Some(g), Some(v)) => {
                if w.shape() != g.weight.shape()
                    || v.weight.shape() != w.shape()
                    || b.len() != g.bias.len()
                    || b.len() != v.bias.len()
                {
                    return Err(Error::Shape(format!("gradient shape mismatch at layer {i}")));
                }
                update(w.data_mut(), g.weight.data(), v.weight.data_mut());
                update(b, &g.bias, &mut v.bias);
            }
            _ => return Err(Error::Shape(format!("gradient presence mismatch at layer {i}"))),
        }
    }
    Ok(())
}

/// Kaiming-uniform weights (bound `sqrt(6 / fan_in)`), zero biases.
pub fn init_model(input_shape: [usize; 3], specs: &[LayerSpec], seed: u64) -> Result<ModelDescriptor> {
    let mut model = ModelDescriptor::from_specs(input_shape, specs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in &mut model.layers {
        if let Some((w, _)) = layer.params_mut() {
            let fan_in: usize = w.shape()[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt() as f32;
            *w = Tensor::random_uniform(w.shape(), bound, &mut rng);
        }
    }
    Ok(model)
}

/// Conv weights pinned at zero during training (`true` = frozen).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMask {
    pub layers: Vec<Option<Vec<bool>>>,
}

impl WeightMask {
    pub fn frozen_count(&self) -> usize {
        self.layers.iter().flatten().map(|m| m.iter().filter(|&&f| f).count()).sum()
    }

    pub(crate) fn apply(&self, model: &mut ModelDescriptor, velocity: Option<&mut Gradients>) {
        for (i, mask) in self.layers.iter().enumerate() {
            let Some(mask) = mask else { continue };
            if let Some((w, _)) = model.layers[i].params_mut() {
                for (v, &f) in w.data_mut().iter_mut().zip(mask) {
                    if f {
                        *v = 0.0;
                    }
                }
            }
        }
        if let Some(vel) = velocity {
            for (mask, g) in self.layers.iter().zip(&mut vel.layers) {
                if let (Some(mask), Some(g)) = (mask, g) {
                    for (v, &f) in g.weight.data_mut().iter_mut().zip(mask) {
                        if f {
                            *v = 0.0;
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub eval_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

impl TrainLog {
    /// CSV with columns `epoch,loss,train_acc,eval_acc` (eval column empty when absent).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,train_acc,eval_acc\n");
        for e in &self.epochs {
            let eval = e.eval_acc.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{},{}\n", e.epoch, e.loss, e.train_acc, eval));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut epochs = Vec::new();
        for (n, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Format(format!("training log line {}: {line:?}", n + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            epochs.push(EpochStats {
                epoch: f[0].parse().map_err(|_| bad())?,
                loss: f[1].parse().map_err(|_| bad())?,
                train_acc: f[2].parse().map_err(|_| bad())?,
                eval_acc: if f[3].is_empty() { None } else { Some(f[3].parse().map_err(|_| bad())?) },
            });
        }
        Ok(Self { epochs })
    }
}

/// Fraction of samples whose highest-scoring class equals the label.
pub fn accuracy(model: &ModelDescriptor, data: &[LabeledImage]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("no samples to score".into()));
    }
    let mut correct = 0;
    for s in data {
        if forward_pass(model, &s.image)?.predicted_class() == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

pub fn train(
    model: &ModelDescriptor,
    data: &[LabeledImage],
    eval: Option<&[LabeledImage]>,
    config: &TrainConfig,
) -> Result<(ModelDescriptor, TrainLog)> {
    train_masked(model, data, eval, config, None)
}

/// Mini-batch SGD with a seeded shuffle per epoch. Masked weights stay zero.
pub fn train_masked(
    model: &ModelDescriptor,
    data: &[LabeledImage],
    eval: Option<&[LabeledImage]>,
    config: &TrainConfig,
    mask: Option<&WeightMask>,
) -> Result<(ModelDescriptor, TrainLog)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set is empty".into()));
    }
    let classes = model.num_classes()?;
    if let Some(s) = data.iter().find(|s| s.label >= classes) {
        return Err(Error::InvalidArgument(format!("sample {} has label {} >= {classes}", s.id, s.label)));
    }
    let mut model = model.clone();
    let mut velocity = Gradients::zeros_like(&model);
    if let Some(m) = mask {
        m.apply(&mut model, None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut acc = GradAccum::new(&model);
    let mut log = TrainLog::default();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0f64;
        let mut correct = 0usize;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            acc.reset();
            for &k in batch {
                let s = &data[k];
                let record = forward_pass(&model, &s.image)?;
                let probs = record_probs(&record)?;
                let loss = cross_entropy_loss(&probs, s.label)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss {loss} at epoch {epoch}, batch {b}, sample {}",
                        s.id
                    )));
                }
                loss_sum += loss;
                if argmax(record.logits()) == s.label {
                    correct += 1;
                }
                backward_into(&model, &record, s.label, &mut acc)?;
            }
            let grads = acc.to_gradients(&model, 1.0 / batch.len() as f64);
            if !grads.is_finite() {
                return Err(Error::NonFinite(format!("gradient at epoch {epoch}, batch {b}")));
            }
            sgd_step(&mut model, &grads, &mut velocity, config)?;
            if let Some(m) = mask {
                m.apply(&mut model, Some(&mut velocity));
            }
        }
        let eval_acc = match eval {
            Some(e) if !e.is_empty() => Some(accuracy(&model, e)?),
            _ => None,
        };
        log.epochs.push(EpochStats {
            epoch,
            loss: loss_sum / data.len() as f64,
            train_acc: correct as f64 / data.len() as f64,
            eval_acc,
        });
    }
    Ok((model, log))
}
