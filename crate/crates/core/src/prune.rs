//! Filter-level pruning driven by deconv dependency scores.
//!
//! A [`PrunePlan`] lists the surviving filters of every conv layer. Applying it
//! removes the dropped filters' kernels and biases, slices the next conv
//! layer's kernels down to the surviving input channels, and slices the first
//! dense layer's columns to the surviving last-conv channels. Surviving
//! weights are copied untouched, so the pruned net computes exactly what the
//! original computes with the dropped filters zeroed ([`masked_forward`]).

use crate::dataset::{DatasetSplit, LabeledImage};
use crate::deconv::DependencyTable;
use crate::error::{Error, Result};
use crate::io::model_param_count;
use crate::model::{forward_with_mask, ConvLayer, DenseLayer, ForwardRecord, Layer, ModelDescriptor};
use crate::tensor::Tensor;
use crate::train::{accuracy, train, train_masked, TrainConfig, WeightMask};

/// Default plateau tolerance on test accuracy.
pub const DEFAULT_EPS_ACC: f64 = 0.02;
/// Retraining epochs per grid point during the threshold search.
pub const SEARCH_RETRAIN_EPOCHS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerPlan {
    /// Index into `model.layers`.
    pub layer: usize,
    /// Filter count before pruning.
    pub filters: usize,
    /// Surviving filters, ascending.
    pub keep: Vec<usize>,
    /// Surviving input channels, ascending.
    pub in_keep: Vec<usize>,
    pub params_before: usize,
    pub params_after: usize,
    /// The empty-layer guard kept this layer's best filter.
    pub forced: bool,
}

/// Column slice of the dense layer that reads the last conv block.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadSlice {
    pub layer: usize,
    pub columns: Vec<usize>,
    pub params_before: usize,
    pub params_after: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrunePlan {
    pub threshold: f64,
    /// Conv layers, bottom to top.
    pub layers: Vec<LayerPlan>,
    pub head: Option<HeadSlice>,
    /// Some layer was emptied and either rescued or left empty.
    pub flagged: bool,
}

impl PrunePlan {
    /// Derives slice maps and parameter counts from per-conv-layer keep lists.
    /// Empty lists are accepted (the plan is flagged) but cannot be applied.
    pub fn from_keep_lists(model: &ModelDescriptor, keep: Vec<Vec<usize>>, threshold: f64) -> Result<Self> {
        let convs = model.conv_indices();
        if keep.len() != convs.len() {
            return Err(Error::InvalidArgument(format!(
                "{} keep lists for {} conv layers",
                keep.len(),
                convs.len()
            )));
        }
        let shapes = model.output_shapes()?;
        let mut layers = Vec::with_capacity(convs.len());
        let mut flagged = false;
        let mut in_keep: Vec<usize> = (0..model.input_shape[0]).collect();
        for (&l, mut kept) in convs.iter().zip(keep) {
            let conv = model.conv(l)?;
            let s = conv.weight.shape();
            kept.sort_unstable();
            kept.dedup();
            if let Some(&bad) = kept.iter().find(|&&f| f >= s[0]) {
                return Err(Error::InvalidArgument(format!("filter {bad} out of range for layer {l} with {}", s[0])));
            }
            if in_keep.len() > s[1] {
                return Err(Error::InvalidArgument(format!("layer {l} reads {} channels, plan has {}", s[1], in_keep.len())));
            }
            flagged |= kept.is_empty();
            layers.push(LayerPlan {
                layer: l,
                filters: s[0],
                params_before: conv.weight.len() + conv.bias.len(),
                params_after: kept.len() * (in_keep.len() * s[2] * s[3] + 1),
                in_keep: std::mem::replace(&mut in_keep, kept.clone()),
                keep: kept,
                forced: false,
            });
        }
        let head = match convs.last() {
            Some(&last) => head_slice(model, last, &shapes, &in_keep)?,
            None => None,
        };
        Ok(Self {
            threshold,
            layers,
            head,
            flagged,
        })
    }

    pub fn layer(&self, layer: usize) -> Option<&LayerPlan> {
        self.layers.iter().find(|p| p.layer == layer)
    }

    pub fn conv_params_before(&self) -> usize {
        self.layers.iter().map(|p| p.params_before).sum()
    }

    pub fn conv_params_after(&self) -> usize {
        self.layers.iter().map(|p| p.params_after).sum()
    }

    /// Fraction of conv parameters removed.
    pub fn conv_pruning_rate(&self) -> f64 {
        let before = self.conv_params_before();
        if before == 0 {
            return 0.0;
        }
        1.0 - self.conv_params_after() as f64 / before as f64
    }

    /// Total parameter count the pruned model will have.
    pub fn predicted_params(&self, model: &ModelDescriptor) -> usize {
        let removed: usize = self.layers.iter().map(|p| p.params_before - p.params_after).sum::<usize>()
            + self.head.as_ref().map_or(0, |h| h.params_before - h.params_after);
        model_param_count(model).total - removed
    }

    /// Per-layer output keep flags for [`forward_with_mask`].
    fn keep_flags(&self, n_layers: usize) -> Vec<Option<Vec<bool>>> {
        let mut flags = vec![None; n_layers];
        for p in &self.layers {
            let mut f = vec![false; p.filters];
            for &k in &p.keep {
                f[k] = true;
            }
            flags[p.layer] = Some(f);
        }
        flags
    }
}

/// Finds the dense layer fed by the last conv block and maps surviving
/// channels to its input columns.
fn head_slice(model: &ModelDescriptor, last: usize, shapes: &[Vec<usize>], kept: &[usize]) -> Result<Option<HeadSlice>> {
    let mut plane = None;
    for i in last + 1..model.layers.len() {
        match &model.layers[i] {
            Layer::Relu | Layer::MaxPool { .. } => {}
            Layer::Flatten => {
                let s = &shapes[i - 1];
                plane = Some(s[1] * s[2]);
            }
            Layer::Dense(d) => {
                let Some(hw) = plane else {
                    return Err(Error::InvalidArgument(format!("dense layer {i} reads conv output without a flatten")));
                };
                let columns = kept.iter().flat_map(|&c| c * hw..(c + 1) * hw).collect::<Vec<_>>();
                let out = d.weight.shape()[0];
                return Ok(Some(HeadSlice {
                    layer: i,
                    params_before: d.weight.len() + d.bias.len(),
                    params_after: out * columns.len() + out,
                    columns,
                }));
            }
            other => {
                return Err(Error::InvalidArgument(format!(
                    "layer {i} ({}) between the last conv and the head is not channel-preserving",
                    other.name()
                )))
            }
        }
    }
    Ok(None)
}

/// Keeps filters whose dependency score reaches `threshold`; the last conv
/// layer keeps exactly `selected`.
pub fn build_prune_plan(
    model: &ModelDescriptor,
    table: &DependencyTable,
    selected: &[usize],
    threshold: f64,
) -> Result<PrunePlan> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} outside [0, 1]")));
    }
    let convs = model.conv_indices();
    let Some(&last) = convs.last() else {
        return Err(Error::InvalidArgument("model has no conv layers".into()));
    };
    if selected.is_empty() {
        return Err(Error::Empty("no selected neurons".into()));
    }
    let mut forced = Vec::new();
    let mut keep = Vec::with_capacity(convs.len());
    for &l in &convs {
        let filters = model.conv(l)?.weight.shape()[0];
        if l == last {
            keep.push(selected.to_vec());
            continue;
        }
        let dep = table
            .layer(l)
            .ok_or_else(|| Error::InvalidArgument(format!("dependency table has no entry for conv layer {l}")))?;
        if dep.scores.len() != filters {
            return Err(Error::InvalidArgument(format!(
                "dependency table lists {} filters for layer {l} with {filters}",
                dep.scores.len()
            )));
        }
        let mut kept: Vec<usize> = (0..filters).filter(|&f| dep.scores[f] >= threshold).collect();
        if kept.is_empty() {
            let best = (0..filters).fold(0, |b, f| if dep.scores[f] > dep.scores[b] { f } else { b });
            kept.push(best);
            forced.push(l);
        }
        keep.push(kept);
    }
    let mut plan = PrunePlan::from_keep_lists(model, keep, threshold)?;
    for p in &mut plan.layers {
        p.forced = forced.contains(&p.layer);
    }
    plan.flagged |= !forced.is_empty();
    Ok(plan)
}

/// Rows `rows` and columns `cols` of a `(O, C, ...)` tensor, copied verbatim.
fn slice_kernel(t: &Tensor, rows: &[usize], cols: &[usize]) -> Result<Tensor> {
    let s = t.shape();
    let inner: usize = s[2..].iter().product();
    let mut data = Vec::with_capacity(rows.len() * cols.len() * inner);
    for &o in rows {
        for &c in cols {
            let at = (o * s[1] + c) * inner;
            data.extend_from_slice(&t.data()[at..at + inner]);
        }
    }
    let mut shape = vec![rows.len(), cols.len()];
    shape.extend_from_slice(&s[2..]);
    Tensor::new(shape, data)
}

fn check_plan(model: &ModelDescriptor, plan: &PrunePlan) -> Result<()> {
    let convs = model.conv_indices();
    let mismatch = |msg: String| Err(Error::InvalidArgument(format!("plan does not fit model: {msg}")));
    if convs.len() != plan.layers.len() {
        return mismatch(format!("{} conv layers, plan has {}", convs.len(), plan.layers.len()));
    }
    let mut channels = model.input_shape[0];
    for (&l, p) in convs.iter().zip(&plan.layers) {
        let s = model.conv(l)?.weight.shape();
        if p.layer != l || p.filters != s[0] || s[1] != channels {
            return mismatch(format!("layer {l} has shape {s:?}"));
        }
        if p.in_keep.iter().any(|&c| c >= s[1]) || p.keep.iter().any(|&f| f >= s[0]) {
            return mismatch(format!("index out of range at layer {l}"));
        }
        channels = s[0];
    }
    if let Some(h) = &plan.head {
        match model.layers.get(h.layer) {
            Some(Layer::Dense(d)) if h.columns.iter().all(|&c| c < d.weight.shape()[1]) => {}
            _ => return mismatch(format!("head layer {} is not a matching dense layer", h.layer)),
        }
    }
    Ok(())
}

/// Physically removes pruned filters and slices their consumers.
pub fn apply_prune(model: &ModelDescriptor, plan: &PrunePlan) -> Result<ModelDescriptor> {
    check_plan(model, plan)?;
    if let Some(p) = plan.layers.iter().find(|p| p.keep.is_empty()) {
        return Err(Error::InvalidArgument(format!("plan removes every filter of layer {}", p.layer)));
    }
    let mut out = model.clone();
    for p in &plan.layers {
        let conv = model.conv(p.layer)?;
        out.layers[p.layer] = Layer::Conv(ConvLayer {
            weight: slice_kernel(&conv.weight, &p.keep, &p.in_keep)?,
            bias: p.keep.iter().map(|&f| conv.bias[f]).collect(),
            stride: conv.stride,
            pad: conv.pad,
        });
    }
    if let Some(h) = &plan.head {
        let Layer::Dense(d) = &model.layers[h.layer] else { unreachable!("checked above") };
        let (rows, cols) = (d.weight.shape()[0], d.weight.shape()[1]);
        let mut data = Vec::with_capacity(rows * h.columns.len());
        for r in 0..rows {
            let row = &d.weight.data()[r * cols..(r + 1) * cols];
            data.extend(h.columns.iter().map(|&c| row[c]));
        }
        out.layers[h.layer] = Layer::Dense(DenseLayer {
            weight: Tensor::new(vec![rows, h.columns.len()], data)?,
            bias: d.bias.clone(),
        });
    }
    let before = model_param_count(model).conv;
    let after = model_param_count(&out).conv;
    out.provenance = Some(format!(
        "pruned at threshold {}: conv params {before} -> {after}{}",
        plan.threshold,
        if plan.flagged { " (empty-layer guard fired)" } else { "" }
    ));
    out.validate()?;
    Ok(out)
}

/// Forward pass of the unpruned model with the plan's dropped filters zeroed.
pub fn masked_forward(model: &ModelDescriptor, plan: &PrunePlan, image: &Tensor) -> Result<ForwardRecord> {
    check_plan(model, plan)?;
    forward_with_mask(model, image, Some(&plan.keep_flags(model.layers.len())))
}

/// Largest `|pruned − masked| / (|masked| + 1e-6)` over images and logits.
pub fn equivalence_check(model: &ModelDescriptor, plan: &PrunePlan, images: &[Tensor]) -> Result<f64> {
    let pruned = apply_prune(model, plan)?;
    let mut worst = 0f64;
    for image in images {
        let m = masked_forward(model, plan, image)?;
        let p = forward_with_mask(&pruned, image, None)?;
        for (&a, &b) in p.logits().iter().zip(m.logits()) {
            worst = worst.max((a as f64 - b as f64).abs() / ((b as f64).abs() + 1e-6));
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerReduction {
    pub layer: usize,
    pub kind: &'static str,
    pub params_before: usize,
    pub params_after: usize,
}

impl LayerReduction {
    pub fn rate(&self) -> f64 {
        if self.params_before == 0 {
            0.0
        } else {
            1.0 - self.params_after as f64 / self.params_before as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneReport {
    pub threshold: f64,
    pub conv_rate: f64,
    /// Every parameterized layer of the model, in order.
    pub layers: Vec<LayerReduction>,
    pub accuracy_before_retrain: f64,
    pub accuracy_after_retrain: f64,
    pub flagged: bool,
    /// Median per-layer milliseconds `(original, pruned)`, when benchmarked.
    pub timings: Vec<(f64, f64)>,
}

impl PruneReport {
    pub fn new(model: &ModelDescriptor, plan: &PrunePlan, accuracy_before_retrain: f64, accuracy_after_retrain: f64) -> Self {
        let layers = model
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.params().is_some())
            .map(|(i, l)| {
                let before = l.param_count();
                let after = match (plan.layer(i), &plan.head) {
                    (Some(p), _) => p.params_after,
                    (None, Some(h)) if h.layer == i => h.params_after,
                    _ => before,
                };
                LayerReduction {
                    layer: i,
                    kind: l.name(),
                    params_before: before,
                    params_after: after,
                }
            })
            .collect();
        Self {
            threshold: plan.threshold,
            conv_rate: plan.conv_pruning_rate(),
            layers,
            accuracy_before_retrain,
            accuracy_after_retrain,
            flagged: plan.flagged,
            timings: Vec::new(),
        }
    }

    /// CSV with columns `layer,kind,params_before,params_after,reduction`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,kind,params_before,params_after,reduction\n");
        for l in &self.layers {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                l.layer,
                l.kind,
                l.params_before,
                l.params_after,
                l.rate()
            ));
        }
        s
    }
}

/// Outcome of [`plateau_threshold_search`].
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauSearch {
    pub t0: f64,
    /// Index of `t0` in the grid.
    pub chosen: usize,
    /// One report per grid point, in grid order.
    pub reports: Vec<PruneReport>,
    /// Retrained model per grid point.
    pub models: Vec<ModelDescriptor>,
}

/// Picks the largest threshold whose accuracy is within `eps_acc` of the best.
pub fn plateau_choice(thresholds: &[f64], accuracies: &[f64], eps_acc: f64) -> Result<usize> {
    if thresholds.is_empty() || thresholds.len() != accuracies.len() {
        return Err(Error::Empty("empty threshold grid".into()));
    }
    let best = accuracies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok((0..thresholds.len())
        .filter(|&i| accuracies[i] >= best - eps_acc)
        .max_by(|&a, &b| thresholds[a].total_cmp(&thresholds[b]))
        .expect("the best point qualifies"))
}

/// Prunes and retrains at every grid threshold, then picks the plateau edge.
pub fn plateau_threshold_search(
    model: &ModelDescriptor,
    table: &DependencyTable,
    selected: &[usize],
    data: &DatasetSplit,
    grid: &[f64],
    eps_acc: f64,
    retrain: &TrainConfig,
) -> Result<PlateauSearch> {
    if grid.is_empty() {
        return Err(Error::Empty("empty threshold grid".into()));
    }
    if grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidArgument("threshold grid must be ascending".into()));
    }
    if !(eps_acc > 0.0) {
        return Err(Error::InvalidArgument(format!("eps_acc must be positive, got {eps_acc}")));
    }
    let mut reports = Vec::with_capacity(grid.len());
    let mut models = Vec::with_capacity(grid.len());
    for &t in grid {
        let (report, retrained) = prune_and_retrain(model, table, selected, data, t, retrain)?;
        reports.push(report);
        models.push(retrained);
    }
    let accs: Vec<f64> = reports.iter().map(|r| r.accuracy_after_retrain).collect();
    let chosen = plateau_choice(grid, &accs, eps_acc)?;
    Ok(PlateauSearch {
        t0: grid[chosen],
        chosen,
        reports,
        models,
    })
}

/// One grid point: plan, prune, retrain, and score on the test split.
pub fn prune_and_retrain(
    model: &ModelDescriptor,
    table: &DependencyTable,
    selected: &[usize],
    data: &DatasetSplit,
    threshold: f64,
    retrain: &TrainConfig,
) -> Result<(PruneReport, ModelDescriptor)> {
    let plan = build_prune_plan(model, table, selected, threshold)?;
    let pruned = apply_prune(model, &plan)?;
    let before = accuracy(&pruned, &data.test)?;
    let (retrained, _) = train(&pruned, &data.train, None, retrain)?;
    let after = accuracy(&retrained, &data.test)?;
    Ok((PruneReport::new(model, &plan, before, after), retrained))
}

/// Freezes the `ceil(rate · n)` smallest-magnitude conv weights (biases are
/// left alone). Ties go to the earlier weight in layer order.
pub fn magnitude_baseline_mask(model: &ModelDescriptor, rate: f64) -> Result<WeightMask> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("pruning rate {rate} outside [0, 1)")));
    }
    let mut all: Vec<(f32, usize, usize)> = Vec::new();
    for l in model.conv_indices() {
        for (i, &w) in model.conv(l)?.weight.data().iter().enumerate() {
            all.push((w.abs(), l, i));
        }
    }
    let n = (rate * all.len() as f64).ceil() as usize;
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut layers: Vec<Option<Vec<bool>>> = model
        .layers
        .iter()
        .map(|l| match l {
            Layer::Conv(c) => Some(vec![false; c.weight.len()]),
            _ => None,
        })
        .collect();
    for &(_, l, i) in &all[..n] {
        layers[l].as_mut().expect("conv layer")[i] = true;
    }
    Ok(WeightMask { layers })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MagnitudeResult {
    pub mask: WeightMask,
    pub model: ModelDescriptor,
    /// Frozen weights over all conv parameters.
    pub conv_rate: f64,
    pub accuracy: f64,
}

/// Masks the smallest conv weights, retrains with the mask held, and scores on the test split.
pub fn magnitude_baseline(
    model: &ModelDescriptor,
    rate: f64,
    data: &DatasetSplit,
    retrain: &TrainConfig,
) -> Result<MagnitudeResult> {
    let mask = magnitude_baseline_mask(model, rate)?;
    let (trained, _) = train_masked(model, &data.train, None, retrain, Some(&mask))?;
    let acc = accuracy(&trained, &data.test)?;
    Ok(MagnitudeResult {
        conv_rate: mask.frozen_count() as f64 / model_param_count(model).conv as f64,
        mask,
        model: trained,
        accuracy: acc,
    })
}

/// Weight-only rate that freezes `conv_rate` of all conv parameters, capped below 1.
pub fn magnitude_rate_for(model: &ModelDescriptor, conv_rate: f64) -> f64 {
    let params = model_param_count(model).conv as f64;
    let weights: usize = model
        .layers
        .iter()
        .filter_map(|l| match l {
            Layer::Conv(c) => Some(c.weight.len()),
            _ => None,
        })
        .sum();
    (conv_rate * params / weights as f64).clamp(0.0, 1.0 - 1e-9)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepMethod {
    Lda,
    Magnitude,
}

impl SweepMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepMethod::Lda => "lda",
            SweepMethod::Magnitude => "magnitude",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub pruning_rate: f64,
    pub accuracy_delta: f64,
    pub method: SweepMethod,
}

/// CSV with columns `pruning_rate,accuracy_delta,method`.
pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("pruning_rate,accuracy_delta,method\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.pruning_rate, r.accuracy_delta, r.method.as_str()));
    }
    s
}

pub fn sweep_from_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Format(format!("sweep line {}: {line:?}", n + 1));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(bad());
        }
        rows.push(SweepRow {
            pruning_rate: f[0].parse().map_err(|_| bad())?,
            accuracy_delta: f[1].parse().map_err(|_| bad())?,
            method: match f[2] {
                "lda" => SweepMethod::Lda,
                "magnitude" => SweepMethod::Magnitude,
                _ => return Err(bad()),
            },
        });
    }
    Ok(rows)
}

/// Bare images of a sample list.
pub fn images(samples: &[LabeledImage]) -> Vec<Tensor> {
    samples.iter().map(|s| s.image.clone()).collect()
}
