//! Per-layer inference timing with median statistics.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::model::{apply_layer, ModelDescriptor};
use crate::tensor::Tensor;

pub const WARMUP_RUNS: usize = 5;
pub const MIN_TIMED_RUNS: usize = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTiming {
    pub layer: usize,
    pub kind: &'static str,
    /// Median milliseconds per image.
    pub median_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub layers: Vec<LayerTiming>,
    /// Median of whole-forward times per image, in milliseconds.
    pub total_ms: f64,
    pub runs: usize,
    pub images: usize,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times `runs` sequential passes over `images` after `warmup` untimed passes.
/// Every (run, image) pair contributes one sample to each median.
pub fn time_forward(model: &ModelDescriptor, images: &[Tensor], warmup: usize, runs: usize) -> Result<BenchResult> {
    if images.is_empty() {
        return Err(Error::Empty("no images to time".into()));
    }
    if runs < MIN_TIMED_RUNS {
        return Err(Error::InvalidArgument(format!("need at least {MIN_TIMED_RUNS} timed runs, got {runs}")));
    }
    let n = model.layers.len();
    let mut per_layer: Vec<Vec<f64>> = vec![Vec::with_capacity(runs * images.len()); n];
    let mut totals = Vec::with_capacity(runs * images.len());
    for run in 0..warmup + runs {
        for image in images {
            let start = Instant::now();
            let mut x = image.clone();
            let mut spans = Vec::with_capacity(n);
            for (i, layer) in model.layers.iter().enumerate() {
                let t = Instant::now();
                x = apply_layer(layer, &x).map_err(|e| e.at_layer(i))?.0;
                spans.push(t.elapsed().as_secs_f64() * 1e3);
            }
            let total = start.elapsed().as_secs_f64() * 1e3;
            std::hint::black_box(&x);
            if run >= warmup {
                for (acc, s) in per_layer.iter_mut().zip(spans) {
                    acc.push(s);
                }
                totals.push(total);
            }
        }
    }
    Ok(BenchResult {
        layers: per_layer
            .iter_mut()
            .enumerate()
            .map(|(i, v)| LayerTiming {
                layer: i,
                kind: model.layers[i].name(),
                median_ms: median(v),
            })
            .collect(),
        total_ms: median(&mut totals),
        runs,
        images: images.len(),
    })
}

/// CSV with columns `layer,kind,original_ms,pruned_ms,speedup`, closed by a `total` row.
pub fn comparison_csv(original: &BenchResult, pruned: &BenchResult) -> Result<String> {
    if original.layers.len() != pruned.layers.len() {
        return Err(Error::Shape(format!(
            "{} timed layers vs {}",
            original.layers.len(),
            pruned.layers.len()
        )));
    }
    let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { f64::INFINITY };
    let mut s = String::from("layer,kind,original_ms,pruned_ms,speedup\n");
    for (a, b) in original.layers.iter().zip(&pruned.layers) {
        s.push_str(&format!(
            "{},{},{:.6},{:.6},{:.4}\n",
            a.layer,
            a.kind,
            a.median_ms,
            b.median_ms,
            ratio(a.median_ms, b.median_ms)
        ));
    }
    s.push_str(&format!(
        "total,all,{:.6},{:.6},{:.4}\n",
        original.total_ms,
        pruned.total_ms,
        ratio(original.total_ms, pruned.total_ms)
    ));
    Ok(s)
}
