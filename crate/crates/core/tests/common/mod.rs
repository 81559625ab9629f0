//! Slow `f64` reference implementations written from the layer definitions,
//! independent of the library's kernels. Shared by the integration tests and
//! the CLI acceptance harness.
#![allow(dead_code)]

use ldaprune::model::{forward_pass, Layer, LayerSpec, ModelDescriptor};
use ldaprune::tensor::Tensor;
use ldaprune::train::{backward_pass, init_model};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub enum OLayer {
    Conv { w: Vec<f64>, b: Vec<f64>, o: usize, c: usize, k: (usize, usize), stride: usize, pad: usize },
    Relu,
    Pool { window: usize, stride: usize },
    Flatten,
    Dense { w: Vec<f64>, b: Vec<f64>, o: usize, i: usize },
    Softmax,
}

#[derive(Debug, Clone)]
pub struct OracleNet {
    pub input: [usize; 3],
    pub layers: Vec<OLayer>,
}

/// A value with its `(C, H, W)` shape; dense vectors are `(n, 1, 1)`.
#[derive(Debug, Clone)]
pub struct Act {
    pub shape: [usize; 3],
    pub data: Vec<f64>,
}

impl OracleNet {
    pub fn from_model(m: &ModelDescriptor) -> Self {
        let f = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
        let layers = m
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv(cv) => {
                    let s = cv.weight.shape();
                    OLayer::Conv {
                        w: f(cv.weight.data()),
                        b: f(&cv.bias),
                        o: s[0],
                        c: s[1],
                        k: (s[2], s[3]),
                        stride: cv.stride,
                        pad: cv.pad,
                    }
                }
                Layer::Relu => OLayer::Relu,
                Layer::MaxPool { window, stride } => OLayer::Pool { window: *window, stride: *stride },
                Layer::Flatten => OLayer::Flatten,
                Layer::Dense(d) => {
                    let s = d.weight.shape();
                    OLayer::Dense { w: f(d.weight.data()), b: f(&d.bias), o: s[0], i: s[1] }
                }
                Layer::Softmax => OLayer::Softmax,
            })
            .collect();
        Self { input: m.input_shape, layers }
    }

    /// Every trainable scalar, layer by layer, weights before biases.
    pub fn params_mut(&mut self) -> Vec<&mut f64> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                OLayer::Conv { w, b, .. } | OLayer::Dense { w, b, .. } => {
                    out.extend(w.iter_mut());
                    out.extend(b.iter_mut());
                }
                _ => {}
            }
        }
        out
    }

    /// Outputs of every layer.
    pub fn forward(&self, image: &[f64]) -> Vec<Act> {
        let mut x = Act { shape: self.input, data: image.to_vec() };
        let mut outs = Vec::new();
        for l in &self.layers {
            x = apply(l, &x);
            outs.push(x.clone());
        }
        outs
    }

    /// Cross-entropy of the final probabilities (softmax applied if missing).
    pub fn loss(&self, image: &[f64], label: usize) -> f64 {
        let outs = self.forward(image);
        let last = outs.last().unwrap();
        let probs = if matches!(self.layers.last(), Some(OLayer::Softmax)) {
            last.data.clone()
        } else {
            softmax(&last.data)
        };
        -probs[label].ln()
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn conv(x: &Act, w: &[f64], b: &[f64], o: usize, k: (usize, usize), stride: usize, pad: usize) -> Act {
    let [c, h, wd] = x.shape;
    let oh = (h + 2 * pad - k.0) / stride + 1;
    let ow = (wd + 2 * pad - k.1) / stride + 1;
    let mut y = vec![0.0; o * oh * ow];
    for f in 0..o {
        for i in 0..oh {
            for j in 0..ow {
                let mut s = b.get(f).copied().unwrap_or(0.0);
                for ch in 0..c {
                    for u in 0..k.0 {
                        for v in 0..k.1 {
                            let r = (i * stride + u) as isize - pad as isize;
                            let q = (j * stride + v) as isize - pad as isize;
                            if r < 0 || q < 0 || r >= h as isize || q >= wd as isize {
                                continue;
                            }
                            s += w[((f * c + ch) * k.0 + u) * k.1 + v] * x.data[(ch * h + r as usize) * wd + q as usize];
                        }
                    }
                }
                y[(f * oh + i) * ow + j] = s;
            }
        }
    }
    Act { shape: [o, oh, ow], data: y }
}

/// Scatter form of the conv adjoint: each output cell spreads its value back
/// over the input window it read.
pub fn conv_adjoint(y: &Act, w: &[f64], c: usize, k: (usize, usize), stride: usize, pad: usize, hw: (usize, usize)) -> Act {
    let [o, oh, ow] = y.shape;
    let (h, wd) = hw;
    let mut x = vec![0.0; c * h * wd];
    for f in 0..o {
        for i in 0..oh {
            for j in 0..ow {
                let g = y.data[(f * oh + i) * ow + j];
                for ch in 0..c {
                    for u in 0..k.0 {
                        for v in 0..k.1 {
                            let r = (i * stride + u) as isize - pad as isize;
                            let q = (j * stride + v) as isize - pad as isize;
                            if r < 0 || q < 0 || r >= h as isize || q >= wd as isize {
                                continue;
                            }
                            x[(ch * h + r as usize) * wd + q as usize] += w[((f * c + ch) * k.0 + u) * k.1 + v] * g;
                        }
                    }
                }
            }
        }
    }
    Act { shape: [c, h, wd], data: x }
}

/// Max pooling; the first maximum in row-major window order wins.
pub fn pool(x: &Act, window: usize, stride: usize) -> (Act, Vec<usize>) {
    let [c, h, w] = x.shape;
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut y = Vec::with_capacity(c * oh * ow);
    let mut sw = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = (f64::NEG_INFINITY, 0);
                for u in 0..window {
                    for v in 0..window {
                        let idx = (ch * h + i * stride + u) * w + j * stride + v;
                        if x.data[idx] > best.0 {
                            best = (x.data[idx], idx);
                        }
                    }
                }
                y.push(best.0);
                sw.push(best.1);
            }
        }
    }
    (Act { shape: [c, oh, ow], data: y }, sw)
}

fn apply(l: &OLayer, x: &Act) -> Act {
    match l {
        OLayer::Conv { w, b, o, k, stride, pad, .. } => conv(x, w, b, *o, *k, *stride, *pad),
        OLayer::Relu => Act { shape: x.shape, data: x.data.iter().map(|v| v.max(0.0)).collect() },
        OLayer::Pool { window, stride } => pool(x, *window, *stride).0,
        OLayer::Flatten => Act { shape: [x.data.len(), 1, 1], data: x.data.clone() },
        OLayer::Dense { w, b, o, i } => {
            let y = (0..*o)
                .map(|r| b[r] + (0..*i).map(|c| w[r * i + c] * x.data[c]).sum::<f64>())
                .collect();
            Act { shape: [*o, 1, 1], data: y }
        }
        OLayer::Softmax => Act { shape: x.shape, data: softmax(&x.data) },
    }
}

/// Central differences of the oracle loss, in [`OracleNet::params_mut`] order.
pub fn numeric_gradient(net: &OracleNet, image: &[f64], label: usize, h: f64) -> Vec<f64> {
    let n = net.clone().params_mut().len();
    numeric_gradient_at(net, image, label, h, &(0..n).collect::<Vec<_>>())
}

/// Central differences for the listed parameter positions only.
pub fn numeric_gradient_at(net: &OracleNet, image: &[f64], label: usize, h: f64, positions: &[usize]) -> Vec<f64> {
    positions
        .iter()
        .map(|&p| {
            let mut plus = net.clone();
            *plus.params_mut()[p] += h;
            let mut minus = net.clone();
            *minus.params_mut()[p] -= h;
            (plus.loss(image, label) - minus.loss(image, label)) / (2.0 * h)
        })
        .collect()
}

/// Library gradients flattened in [`OracleNet::params_mut`] order.
pub fn flatten_grads(g: &ldaprune::train::Gradients) -> Vec<f64> {
    g.layers
        .iter()
        .flatten()
        .flat_map(|p| p.weight.data().iter().chain(&p.bias).map(|&v| v as f64).collect::<Vec<_>>())
        .collect()
}

/// Worst `|a - n| / max(|a|, |n|, floor)` over all parameters.
pub fn max_relative_error(a: &[f64], n: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), n.len());
    a.iter()
        .zip(n)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Dependency scores by the definition: project each selected neuron's peak
/// down through the recorded switches with the scatter-form adjoint, take
/// per-filter L1 energy normalized by the layer's strongest filter, average
/// over images, then take the max over neurons.
pub fn dependency_oracle(m: &ModelDescriptor, images: &[Tensor], selected: &[usize]) -> Vec<(usize, Vec<f64>)> {
    let net = OracleNet::from_model(m);
    let last = m.last_conv_index().unwrap();
    let top = if matches!(m.layers.get(last + 1), Some(Layer::Relu)) { last + 1 } else { last };
    let convs: Vec<usize> = m.conv_indices().into_iter().filter(|&i| i <= top).collect();
    let mut sums: Vec<Vec<Vec<f64>>> = vec![Vec::new(); selected.len()];
    for image in images {
        // Record with the library's f32 pass so pooling switches agree.
        let rec = forward_pass(m, image).unwrap();
        let shape_of = |t: &Tensor| {
            let s = t.shape();
            [s[0], s[1], s[2]]
        };
        for (ni, &neuron) in selected.iter().enumerate() {
            let act = &rec.outputs[top];
            let plane = act.len() / act.shape()[0];
            let ch = &act.data()[neuron * plane..(neuron + 1) * plane];
            let mut arg = 0;
            for (i, &v) in ch.iter().enumerate() {
                if v > ch[arg] {
                    arg = i;
                }
            }
            let mut maps: Vec<Option<Act>> = vec![None; top + 1];
            if ch[arg] > 0.0 {
                let mut sig = Act { shape: shape_of(act), data: vec![0.0; act.len()] };
                sig.data[neuron * plane + arg] = ch[arg] as f64;
                for i in (0..=top).rev() {
                    maps[i] = Some(sig.clone());
                    let below = if i == 0 { image } else { &rec.outputs[i - 1] };
                    let bs = shape_of(below);
                    sig = match &net.layers[i] {
                        OLayer::Relu => Act { shape: sig.shape, data: sig.data.iter().map(|v| v.max(0.0)).collect() },
                        OLayer::Pool { window, stride } => {
                            let b64 = Act { shape: bs, data: below.data().iter().map(|&v| v as f64).collect() };
                            let (_, sw) = pool(&b64, *window, *stride);
                            let mut up = vec![0.0; bs.iter().product()];
                            for (v, &s) in sig.data.iter().zip(&sw) {
                                up[s] = *v;
                            }
                            Act { shape: bs, data: up }
                        }
                        OLayer::Conv { w, c, k, stride, pad, .. } => conv_adjoint(&sig, w, *c, *k, *stride, *pad, (bs[1], bs[2])),
                        _ => unreachable!(),
                    };
                }
            }
            let per_layer: Vec<Vec<f64>> = convs
                .iter()
                .map(|&l| {
                    let c = rec.outputs[l].shape()[0];
                    match &maps[l] {
                        None => vec![0.0; c],
                        Some(a) => {
                            let p = a.data.len() / c;
                            let e: Vec<f64> = (0..c).map(|f| a.data[f * p..(f + 1) * p].iter().map(|v| v.abs()).sum()).collect();
                            let mx = e.iter().cloned().fold(0.0, f64::max);
                            if mx > 0.0 {
                                e.iter().map(|v| v / mx).collect()
                            } else {
                                e
                            }
                        }
                    }
                })
                .collect();
            if sums[ni].is_empty() {
                sums[ni] = per_layer;
            } else {
                for (acc, v) in sums[ni].iter_mut().zip(per_layer) {
                    for (a, b) in acc.iter_mut().zip(v) {
                        *a += b;
                    }
                }
            }
        }
    }
    let n = images.len() as f64;
    convs
        .iter()
        .enumerate()
        .map(|(li, &l)| {
            let c = sums[0][li].len();
            (l, (0..c).map(|f| sums.iter().map(|s| s[li][f] / n).fold(0.0, f64::max)).collect())
        })
        .collect()
}

pub fn random_tensor<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

/// Per-column two-pass variance decomposition: `(s2w, s2b)` for each column.
pub fn two_pass_variances(rows: &[Vec<f64>], labels: &[usize]) -> Vec<(f64, f64)> {
    let d = rows[0].len();
    let classes = labels.iter().max().unwrap() + 1;
    (0..d)
        .map(|j| {
            let n = rows.len() as f64;
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            let mut s2w = 0.0;
            let mut s2b = 0.0;
            for c in 0..classes {
                let vals: Vec<f64> = rows.iter().zip(labels).filter(|(_, &l)| l == c).map(|(r, _)| r[j]).collect();
                if vals.is_empty() {
                    continue;
                }
                let mc = vals.iter().sum::<f64>() / vals.len() as f64;
                s2w += vals.iter().map(|v| (v - mc) * (v - mc)).sum::<f64>();
                s2b += vals.len() as f64 * (mc - mean) * (mc - mean);
            }
            (s2w, s2b)
        })
        .collect()
}

fn conv_spec(o: usize, c: usize, k: usize, stride: usize, pad: usize) -> LayerSpec {
    LayerSpec::Conv { out_channels: o, in_channels: c, kh: k, kw: k, stride, pad }
}

/// Small nets that between them exercise every layer kind, padding and
/// stride settings, overlapping pools, and a missing softmax tail. Biases
/// are randomized so their gradients are not trivially equal.
pub fn gradient_fixtures(seed: u64) -> Vec<(&'static str, ModelDescriptor, Tensor, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nets: [(&str, [usize; 3], Vec<LayerSpec>); 2] = [
        (
            "conv-pool-conv-dense-softmax",
            [1, 10, 10],
            vec![
                conv_spec(2, 1, 3, 1, 1),
                LayerSpec::Relu,
                LayerSpec::MaxPool { window: 2, stride: 2 },
                conv_spec(3, 2, 3, 2, 0),
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense { out_dim: 2, in_dim: 12 },
                LayerSpec::Softmax,
            ],
        ),
        (
            "strided-padded-overlapping-pool-mlp",
            [2, 7, 7],
            vec![
                conv_spec(3, 2, 3, 2, 1),
                LayerSpec::Relu,
                LayerSpec::MaxPool { window: 3, stride: 1 },
                LayerSpec::Flatten,
                LayerSpec::Dense { out_dim: 5, in_dim: 12 },
                LayerSpec::Relu,
                LayerSpec::Dense { out_dim: 2, in_dim: 5 },
            ],
        ),
    ];
    nets.into_iter()
        .enumerate()
        .map(|(i, (name, shape, specs))| {
            let mut m = init_model(shape, &specs, seed + i as u64).unwrap();
            for l in &mut m.layers {
                if let Some((_, b)) = l.params_mut() {
                    for v in b.iter_mut() {
                        *v = rng.random_range(-0.1f32..0.1);
                    }
                }
            }
            let image = random_tensor(&shape, &mut rng);
            (name, m, image, i % 2)
        })
        .collect()
}

/// Worst relative disagreement between the library's backward pass and
/// central differences of the `f64` oracle, over every parameter.
pub fn gradient_error(m: &ModelDescriptor, image: &Tensor, label: usize, h: f64, floor: f64) -> f64 {
    let rec = forward_pass(m, image).unwrap();
    let analytic = flatten_grads(&backward_pass(m, &rec, label).unwrap());
    let x: Vec<f64> = image.data().iter().map(|&v| v as f64).collect();
    let numeric = numeric_gradient(&OracleNet::from_model(m), &x, label, h);
    max_relative_error(&analytic, &numeric, floor)
}

/// A plan keeping a random non-empty subset of every conv layer's filters.
pub fn random_plan<R: Rng>(m: &ModelDescriptor, rng: &mut R) -> ldaprune::prune::PrunePlan {
    let keep = m
        .conv_indices()
        .into_iter()
        .map(|l| {
            let n = m.conv(l).unwrap().weight.shape()[0];
            let count = rng.random_range(1..=n);
            let mut k = rand::seq::index::sample(rng, n, count).into_vec();
            k.sort_unstable();
            k
        })
        .collect();
    ldaprune::prune::PrunePlan::from_keep_lists(m, keep, 0.5).unwrap()
}
