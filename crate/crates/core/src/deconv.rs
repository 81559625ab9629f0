//! Deconvolution: projecting one last-conv activation back down the stack.
//!
//! Each layer is mirrored in reverse: max-pool becomes unpooling through the
//! recorded switches, ReLU becomes rectification, and convolution becomes
//! convolution with the transposed kernel. The per-filter energy of the
//! projected maps, pooled over training images, is the dependency score that
//! drives filter pruning.

use crate::error::{Error, Result};
use crate::model::{forward_pass, Layer, ModelDescriptor};
use crate::ops::{self, kernel_dims, valid_range, PoolSwitches};
use crate::tensor::Tensor;

/// Places each pooled value at its switch location; every other cell is zero.
pub fn unpool(pooled: &Tensor, switches: &PoolSwitches, target_shape: &[usize]) -> Result<Tensor> {
    if pooled.len() != switches.indices.len() {
        return Err(Error::Shape(format!(
            "{} pooled values but {} switches",
            pooled.len(),
            switches.indices.len()
        )));
    }
    let mut out = Tensor::zeros(target_shape);
    let n = out.len();
    for (&v, &idx) in pooled.data().iter().zip(&switches.indices) {
        if idx >= n {
            return Err(Error::Shape(format!("switch {idx} outside target of {n} cells")));
        }
        out.data_mut()[idx] = v;
    }
    Ok(out)
}

pub fn deconv_rectify(t: &Tensor) -> Tensor {
    ops::relu_forward(t)
}

/// Adjoint of bias-free [`ops::conv2d_forward`]: maps an `(O, H', W')` signal
/// back to the `(C, in_hw.0, in_hw.1)` input space of the forward conv.
pub fn transposed_conv(
    signal: &Tensor,
    kernel: &Tensor,
    stride: usize,
    pad: usize,
    in_hw: (usize, usize),
) -> Result<Tensor> {
    let (o, oh, ow) = signal.chw()?;
    let (ko, c, kh, kw) = kernel_dims(kernel)?;
    let (h, w) = in_hw;
    if ko != o {
        return Err(Error::Shape(format!("signal has {o} channels, kernel has {ko} filters")));
    }
    if ops::conv_output_extent(h, kh, stride, pad)? != oh || ops::conv_output_extent(w, kw, stride, pad)? != ow {
        return Err(Error::Shape(format!(
            "signal extent {oh}x{ow} does not come from a {h}x{w} input"
        )));
    }
    let k = kernel.data();
    let mut acc = vec![0f64; c * h * w];
    for oc in 0..o {
        let sig = signal.channel(oc);
        for ic in 0..c {
            let plane = &mut acc[ic * h * w..(ic + 1) * h * w];
            for i in 0..kh {
                let (y0, y1) = valid_range(oh, h, i, stride, pad);
                for j in 0..kw {
                    let wv = k[((oc * c + ic) * kh + i) * kw + j] as f64;
                    let (x0, x1) = valid_range(ow, w, j, stride, pad);
                    if x0 >= x1 {
                        continue;
                    }
                    for oy in y0..y1 {
                        let iy = oy * stride + i - pad;
                        let ix0 = x0 * stride + j - pad;
                        let srow = &sig[oy * ow + x0..oy * ow + x1];
                        let prow = &mut plane[iy * w..(iy + 1) * w];
                        if stride == 1 {
                            for (p, &s) in prow[ix0..].iter_mut().zip(srow) {
                                *p += wv * s as f64;
                            }
                        } else {
                            for (p, &s) in prow[ix0..].iter_mut().step_by(stride).zip(srow) {
                                *p += wv * s as f64;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, h, w], acc.into_iter().map(|v| v as f32).collect())
}

/// Reconstructed signals for one neuron's projection.
#[derive(Debug, Clone, PartialEq)]
pub struct DeconvMap {
    /// `maps[i]` is the signal at the output of layer `i`, for every layer up
    /// to and including the starting activation.
    pub maps: Vec<Tensor>,
    /// Signal at the model input (pixel level).
    pub pixels: Tensor,
    /// The neuron never fired on this image; every map is zero.
    pub dead: bool,
}

/// Index of the layer whose output holds the last conv's post-ReLU activations.
pub(crate) fn firing_layer(model: &ModelDescriptor) -> Result<usize> {
    let lc = model
        .last_conv_index()
        .ok_or_else(|| Error::InvalidArgument("model has no conv layer".into()))?;
    Ok(match model.layers.get(lc + 1) {
        Some(Layer::Relu) => lc + 1,
        _ => lc,
    })
}

/// Projects the spatial maximum of last-conv filter `neuron` down to the pixels.
pub fn deconv_from_neuron(
    model: &ModelDescriptor,
    record: &crate::model::ForwardRecord,
    neuron: usize,
) -> Result<DeconvMap> {
    let start = firing_layer(model)?;
    if record.outputs.len() != model.layers.len() {
        return Err(Error::Shape("forward record does not match model".into()));
    }
    let act = &record.outputs[start];
    let (c, _, _) = act.chw()?;
    if neuron >= c {
        return Err(Error::InvalidArgument(format!(
            "neuron {neuron} out of range for {c} last-conv filters"
        )));
    }
    let channel = act.channel(neuron);
    let mut arg = 0;
    for (i, &v) in channel.iter().enumerate() {
        if v > channel[arg] {
            arg = i;
        }
    }
    let peak = channel[arg];

    let input_shape = |i: usize| -> &Tensor {
        if i == 0 {
            &record.input
        } else {
            &record.outputs[i - 1]
        }
    };

    if peak <= 0.0 {
        return Ok(DeconvMap {
            maps: (0..=start).map(|i| Tensor::zeros(record.outputs[i].shape())).collect(),
            pixels: Tensor::zeros(record.input.shape()),
            dead: true,
        });
    }

    let mut start_map = Tensor::zeros(act.shape());
    start_map.data_mut()[neuron * channel.len() + arg] = peak;

    let mut maps = vec![start_map];
    for i in (0..=start).rev() {
        let signal = maps.last().expect("non-empty");
        let below = input_shape(i);
        let projected = match &model.layers[i] {
            Layer::Relu => deconv_rectify(signal),
            Layer::MaxPool { .. } => {
                let sw = record.switches[i]
                    .as_ref()
                    .ok_or_else(|| Error::Shape(format!("no switches recorded for layer {i}")))?;
                unpool(signal, sw, below.shape()).map_err(|e| e.at_layer(i))?
            }
            Layer::Conv(conv) => {
                let (_, h, w) = below.chw()?;
                transposed_conv(signal, &conv.weight, conv.stride, conv.pad, (h, w))
                    .map_err(|e| e.at_layer(i))?
            }
            other => {
                return Err(Error::InvalidArgument(format!(
                    "cannot deconvolve through a {} layer below the last conv",
                    other.name()
                ))
                .at_layer(i))
            }
        };
        maps.push(projected);
    }
    let pixels = maps.pop().expect("pixel map");
    maps.reverse();
    Ok(DeconvMap {
        maps,
        pixels,
        dead: false,
    })
}

/// Pooled dependency of each conv filter on the selected last-conv neurons.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDependency {
    /// Index into `model.layers`.
    pub layer: usize,
    /// One score in `[0, 1]` per filter.
    pub scores: Vec<f64>,
    /// No selected neuron reached this layer on any image.
    pub dead: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DependencyTable {
    /// One entry per conv layer, bottom to top.
    pub layers: Vec<LayerDependency>,
    pub samples: usize,
    pub selected: Vec<usize>,
}

impl DependencyTable {
    pub fn layer(&self, layer: usize) -> Option<&LayerDependency> {
        self.layers.iter().find(|d| d.layer == layer)
    }

    /// CSV with columns `layer,filter,score`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,filter,score\n");
        for d in &self.layers {
            for (f, v) in d.scores.iter().enumerate() {
                s.push_str(&format!("{},{},{}\n", d.layer, f, v));
            }
        }
        s
    }

    /// Inverse of [`to_csv`](Self::to_csv); sample count and selection are not
    /// part of the CSV and must be supplied.
    pub fn from_csv(text: &str, samples: usize, selected: Vec<usize>) -> Result<Self> {
        let mut layers: Vec<LayerDependency> = Vec::new();
        for (n, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Format(format!("dependencies line {}: {line:?}", n + 1));
            let mut parts = line.split(',');
            let layer: usize = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            let filter: usize = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            let score: f64 = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            if layers.last().map(|d| d.layer) != Some(layer) {
                layers.push(LayerDependency {
                    layer,
                    scores: Vec::new(),
                    dead: false,
                });
            }
            let d = layers.last_mut().expect("pushed");
            if filter != d.scores.len() {
                return Err(bad());
            }
            d.scores.push(score);
        }
        for d in &mut layers {
            d.dead = d.scores.iter().all(|&v| v == 0.0);
        }
        Ok(Self {
            layers,
            samples,
            selected,
        })
    }
}

/// Per-filter L1 norms of one map, scaled so the strongest filter is 1.
pub(crate) fn normalized_channel_energy(map: &Tensor) -> Vec<f64> {
    let c = map.shape()[0];
    let norms: Vec<f64> = (0..c)
        .map(|f| map.channel(f).iter().map(|&v| (v as f64).abs()).sum())
        .collect();
    let max = norms.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        norms.iter().map(|n| n / max).collect()
    } else {
        vec![0.0; c]
    }
}

/// Mean over images of each filter's normalized deconv energy, then the max
/// of those means over the selected neurons.
pub fn dependency_scores(
    model: &ModelDescriptor,
    images: &[Tensor],
    selected: &[usize],
) -> Result<DependencyTable> {
    if images.is_empty() {
        return Err(Error::Empty("no images for dependency pooling".into()));
    }
    if selected.is_empty() {
        return Err(Error::Empty("no selected neurons".into()));
    }
    let start = firing_layer(model)?;
    let conv_layers: Vec<usize> = model.conv_indices().into_iter().filter(|&i| i <= start).collect();
    let shapes = model.output_shapes()?;

    // sums[neuron][conv layer][filter]
    let mut sums: Vec<Vec<Vec<f64>>> = selected
        .iter()
        .map(|_| conv_layers.iter().map(|&l| vec![0.0; shapes[l][0]]).collect())
        .collect();
    for image in images {
        let record = forward_pass(model, image)?;
        for (ni, &neuron) in selected.iter().enumerate() {
            let dm = deconv_from_neuron(model, &record, neuron)?;
            if dm.dead {
                continue;
            }
            for (li, &l) in conv_layers.iter().enumerate() {
                for (acc, v) in sums[ni][li].iter_mut().zip(normalized_channel_energy(&dm.maps[l])) {
                    *acc += v;
                }
            }
        }
    }
    let n = images.len() as f64;
    let layers = conv_layers
        .iter()
        .enumerate()
        .map(|(li, &l)| {
            let scores: Vec<f64> = (0..shapes[l][0])
                .map(|f| sums.iter().map(|s| s[li][f] / n).fold(0.0, f64::max))
                .collect();
            LayerDependency {
                layer: l,
                dead: scores.iter().all(|&v| v == 0.0),
                scores,
            }
        })
        .collect();
    Ok(DependencyTable {
        layers,
        samples: images.len(),
        selected: selected.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ConvLayer;
    use crate::ops::{conv2d_forward, maxpool_forward};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unpool_places_at_switch() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (p, s) = maxpool_forward(&x, 2, 2).unwrap();
        let u = unpool(&p, &s, x.shape()).unwrap();
        assert_eq!(u.data(), &[0.0, 0.0, 0.0, 4.0]);
        let (again, _) = maxpool_forward(&u, 2, 2).unwrap();
        assert_eq!(again, p);
    }

    #[test]
    fn unpool_nonzero_count_equals_window_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::random_uniform(&[3, 8, 8], 1.0, &mut rng).map(|v| v + 1.5);
        let (p, s) = maxpool_forward(&x, 2, 2).unwrap();
        let u = unpool(&p, &s, x.shape()).unwrap();
        assert_eq!(u.data().iter().filter(|&&v| v != 0.0).count(), 3 * 4 * 4);
    }

    #[test]
    fn unpool_rejects_out_of_bounds_switch() {
        let p = Tensor::filled(&[1, 1, 1], 1.0);
        let s = PoolSwitches {
            input_shape: vec![1, 2, 2],
            window: 2,
            stride: 2,
            indices: vec![7],
        };
        assert!(unpool(&p, &s, &[1, 2, 2]).is_err());
    }

    #[test]
    fn rectify_cases() {
        assert_eq!(deconv_rectify(&Tensor::from_vec(vec![-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn transposed_one_hot_is_kernel_slice() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k = Tensor::random_uniform(&[2, 3, 3, 3], 1.0, &mut rng);
        let mut sig = Tensor::zeros(&[2, 3, 3]);
        sig.data_mut()[9] = 1.0; // channel 1, cell (0,0)
        let out = transposed_conv(&sig, &k, 1, 0, (5, 5)).unwrap();
        for c in 0..3 {
            for i in 0..5 {
                for j in 0..5 {
                    let want = if i < 3 && j < 3 { k.data()[((3 + c) * 3 + i) * 3 + j] } else { 0.0 };
                    assert_eq!(out.data()[(c * 5 + i) * 5 + j], want);
                }
            }
        }
        let zero = transposed_conv(&Tensor::zeros(&[2, 3, 3]), &k, 1, 0, (5, 5)).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn transposed_conv_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for &(stride, pad, h) in &[(1, 1, 6), (2, 1, 7), (1, 0, 5), (2, 2, 6)] {
            let x = Tensor::random_uniform(&[3, h, h], 1.0, &mut rng);
            let k = Tensor::random_uniform(&[4, 3, 3, 3], 1.0, &mut rng);
            let cx = conv2d_forward(&x, &k, &[0.0; 4], stride, pad).unwrap();
            let y = Tensor::random_uniform(cx.shape(), 1.0, &mut rng);
            let lhs = cx.dot(&y);
            let rhs = x.dot(&transposed_conv(&y, &k, stride, pad, (h, h)).unwrap());
            assert!((lhs - rhs).abs() <= 1e-4 * lhs.abs().max(rhs.abs()).max(1e-6), "{lhs} vs {rhs}");
        }
    }

    fn one_conv_model(weight: Tensor) -> ModelDescriptor {
        let o = weight.shape()[0];
        let c = weight.shape()[1];
        ModelDescriptor::new(
            [c, 5, 5],
            vec![
                Layer::Conv(ConvLayer {
                    weight,
                    bias: vec![0.0; o],
                    stride: 1,
                    pad: 1,
                }),
                Layer::Relu,
            ],
        )
        .unwrap()
    }

    #[test]
    fn single_conv_deconv_is_transposed_one_hot() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = one_conv_model(Tensor::random_uniform(&[3, 2, 3, 3], 1.0, &mut rng));
        let img = Tensor::random_uniform(&[2, 5, 5], 1.0, &mut rng).map(|v| v.abs());
        let rec = forward_pass(&m, &img).unwrap();
        let neuron = (0..3)
            .find(|&n| rec.outputs[1].channel(n).iter().any(|&v| v > 0.0))
            .unwrap();
        let dm = deconv_from_neuron(&m, &rec, neuron).unwrap();
        assert!(!dm.dead);
        let start = &dm.maps[1];
        assert_eq!(start.data().iter().filter(|&&v| v != 0.0).count(), 1);
        let want = transposed_conv(start, &m.conv(0).unwrap().weight, 1, 1, (5, 5)).unwrap();
        assert_eq!(dm.pixels, want);
    }

    #[test]
    fn dead_neuron_gives_zero_maps() {
        let m = one_conv_model(Tensor::filled(&[1, 1, 3, 3], -1.0));
        let img = Tensor::filled(&[1, 5, 5], 1.0);
        let rec = forward_pass(&m, &img).unwrap();
        let dm = deconv_from_neuron(&m, &rec, 0).unwrap();
        assert!(dm.dead);
        assert!(dm.maps.iter().chain([&dm.pixels]).all(|t| t.data().iter().all(|&v| v == 0.0)));
        assert!(deconv_from_neuron(&m, &rec, 1).is_err());

        let table = dependency_scores(&m, &[img], &[0]).unwrap();
        assert!(table.layers.iter().all(|d| d.dead));
    }

    #[test]
    fn constructed_connectivity_is_one_hot() {
        // conv0: 1 -> 5 filters, all positive; conv1: neuron 0 reads only filter 3.
        let w0 = Tensor::filled(&[5, 1, 3, 3], 0.1);
        let mut w1 = Tensor::zeros(&[2, 5, 3, 3]);
        for t in 0..9 {
            w1.data_mut()[3 * 9 + t] = 0.5;
            w1.data_mut()[45 + t] = 0.2; // neuron 1 reads filter 0
        }
        let m = ModelDescriptor::new(
            [1, 6, 6],
            vec![
                Layer::Conv(ConvLayer { weight: w0, bias: vec![0.0; 5], stride: 1, pad: 1 }),
                Layer::Relu,
                Layer::Conv(ConvLayer { weight: w1, bias: vec![0.0; 2], stride: 1, pad: 1 }),
                Layer::Relu,
            ],
        )
        .unwrap();
        let img = Tensor::filled(&[1, 6, 6], 1.0);
        let table = dependency_scores(&m, &[img], &[0]).unwrap();
        assert_eq!(table.layers[0].scores, vec![0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(table.layers[1].scores, vec![1.0, 0.0]);
        let csv = table.to_csv();
        assert_eq!(DependencyTable::from_csv(&csv, 1, vec![0]).unwrap(), table);
    }
}
