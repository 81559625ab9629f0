//! Pipeline stages shared by the individual commands and `pipeline`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use ldaprune::arch::{toy_input_shape, toy_specs};
use ldaprune::bench::{comparison_csv, time_forward, WARMUP_RUNS};
use ldaprune::classify::{
    evaluate_accuracy, feature_rows, linear_svm_fit, qda_fit, rbf_svm_fit, signed_labels, Evaluation, FeatureTransform,
};
use ldaprune::dataset::{DatasetSplit, LabeledImage};
use ldaprune::deconv::{dependency_scores, DependencyTable};
use ldaprune::io::{load_model, model_param_count, save_model, to_bytes};
use ldaprune::lda::{
    column_stats, diagonal_dominance, extract_firing_matrix, full_lda_directions, icc_scores, rank_and_select,
    scatter_matrices, standardize, variance_ranking_baseline, FiringMatrix, NeuronRanking, ScatterPair,
};
use ldaprune::model::{forward_pass, ModelDescriptor};
use ldaprune::prune::{
    build_prune_plan, magnitude_baseline, magnitude_rate_for, plateau_threshold_search, prune_and_retrain,
    sweep_to_csv, PlateauSearch, PruneReport, SweepMethod, SweepRow,
};
use ldaprune::train::{accuracy, init_model, train};

use crate::config::{ClassifierKind, RunConfig, MANIFEST_FILE};

/// Output directory plus the `report.txt` lines collected so far.
pub struct Artifacts {
    dir: PathBuf,
    report: Vec<String>,
}

impl Artifacts {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            report: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))
    }

    pub fn save_model(&self, name: &str, model: &ModelDescriptor) -> Result<()> {
        save_model(model, self.path(name)).with_context(|| format!("writing {name}"))
    }

    pub fn line(&mut self, key: &str, value: impl std::fmt::Display) {
        self.report.push(format!("{key}: {value}"));
    }

    pub fn section(&mut self, title: &str) {
        if !self.report.is_empty() {
            self.report.push(String::new());
        }
        self.report.push(format!("[{title}]"));
    }

    pub fn finish(self, config: &RunConfig) -> Result<()> {
        self.write(MANIFEST_FILE, config.to_manifest())?;
        self.write("report.txt", self.report.join("\n") + "\n")
    }
}

pub fn load(path: &Option<PathBuf>, flag: &str) -> Result<ModelDescriptor> {
    let Some(p) = path else { bail!("missing --{flag}") };
    load_model(p).with_context(|| format!("loading {}", p.display()))
}

fn last_conv(model: &ModelDescriptor) -> Result<usize> {
    model.last_conv_index().context("model has no conv layers")
}

pub fn stage_train(cfg: &RunConfig, data: &DatasetSplit, art: &mut Artifacts) -> Result<(ModelDescriptor, f64)> {
    let init = init_model(toy_input_shape(), &toy_specs(), cfg.seed)?;
    let (mut model, log) = train(&init, &data.train, Some(&data.test), &cfg.train_config())?;
    model.provenance = Some(format!(
        "trained: seed {}, {} epochs, lr {}",
        cfg.seed, cfg.epochs, cfg.lr
    ));
    let acc = accuracy(&model, &data.test)?;
    art.save_model("model.ldap", &model)?;
    art.write("train_log.csv", log.to_csv())?;
    let p = model_param_count(&model);
    art.section("train");
    art.line("train_samples", data.train.len());
    art.line("test_samples", data.test.len());
    art.line("test_accuracy", acc);
    art.line("params_conv", p.conv);
    art.line("params_fc", p.fc);
    Ok((model, acc))
}

pub fn firing_csv(x: &FiringMatrix, samples: &[LabeledImage]) -> String {
    let mut s = String::from("sample,label");
    for c in 0..x.cols() {
        s.push_str(&format!(",n{c}"));
    }
    s.push('\n');
    for (r, sample) in samples.iter().enumerate() {
        s.push_str(&format!("{},{}", sample.id, x.labels[r]));
        for v in x.row(r) {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    s
}

pub fn stage_extract(model: &ModelDescriptor, data: &DatasetSplit, art: &mut Artifacts) -> Result<FiringMatrix> {
    let layer = last_conv(model)?;
    let x = extract_firing_matrix(model, &data.train, layer)?;
    art.write("firing.csv", firing_csv(&x, &data.train))?;
    art.section("extract");
    art.line("layer", layer);
    art.line("images", x.rows());
    art.line("neurons", x.cols());
    Ok(x)
}

pub struct Analysis {
    pub layer: usize,
    pub ranking: NeuronRanking,
    pub scatter: ScatterPair,
    pub table: DependencyTable,
}

pub fn stage_analyze(cfg: &RunConfig, model: &ModelDescriptor, data: &DatasetSplit, art: &mut Artifacts) -> Result<Analysis> {
    let layer = last_conv(model)?;
    let raw = extract_firing_matrix(model, &data.train, layer)?;
    if cfg.k > raw.cols() {
        bail!("--k {} exceeds the {} neurons of layer {layer}", cfg.k, raw.cols());
    }
    let x = standardize(&raw)?;
    let scatter = scatter_matrices(&x)?;
    let ranking = rank_and_select(&icc_scores(&scatter), cfg.k)?;
    let variance = variance_ranking_baseline(&x, cfg.k)?;
    let dominance = diagonal_dominance(&scatter.within)?;
    let images: Vec<_> = data.train.iter().map(|s| s.image.clone()).collect();
    let table = dependency_scores(model, &images, &ranking.selected)?;

    art.write("ranking.csv", ranking.to_csv())?;
    art.write("variance_ranking.csv", variance.to_csv())?;
    art.write("scatter_within.csv", scatter.within.to_csv())?;
    art.write("scatter_between.csv", scatter.between.to_csv())?;
    art.write("dependencies.csv", table.to_csv())?;

    art.section("analyze");
    art.line("layer", layer);
    art.line("k", cfg.k);
    art.line("selected", format!("{:?}", ranking.selected));
    art.line("variance_selected", format!("{:?}", variance.selected));
    art.line("diagonal_dominance_sw", format!("{dominance:.6}"));
    if raw.cols() <= ldaprune::lda::MAX_LDA_DIM {
        let lda = full_lda_directions(&scatter, 1)?;
        let v = lda.vectors.column(0);
        let total: f64 = v.iter().map(|a| a * a).sum();
        let on_selected: f64 = ranking.selected.iter().map(|&j| v[j] * v[j]).sum();
        art.line("lda_top_eigenvalue", format!("{:.6}", lda.values[0]));
        art.line("lda_top_direction_mass_on_selected", format!("{:.6}", on_selected / total));
    }
    for d in &table.layers {
        let alive = d.scores.iter().filter(|&&s| s > 0.0).count();
        art.line(&format!("dependency_layer_{}", d.layer), format!("{alive}/{} filters reached", d.scores.len()));
    }
    Ok(Analysis {
        layer,
        ranking,
        scatter,
        table,
    })
}

pub struct PruneOutcome {
    pub search: Option<PlateauSearch>,
    pub threshold: f64,
    pub report: PruneReport,
    pub model: ModelDescriptor,
    pub accuracy: f64,
}

fn plateau_csv(search: &PlateauSearch) -> String {
    let mut s = String::from("threshold,conv_rate,accuracy_before_retrain,accuracy_after_retrain,flagged,chosen\n");
    for (i, r) in search.reports.iter().enumerate() {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.threshold,
            r.conv_rate,
            r.accuracy_before_retrain,
            r.accuracy_after_retrain,
            r.flagged,
            i == search.chosen
        ));
    }
    s
}

/// Fixed threshold when given, otherwise the plateau search over the grid.
pub fn stage_prune(
    cfg: &RunConfig,
    model: &ModelDescriptor,
    analysis: &Analysis,
    data: &DatasetSplit,
    art: &mut Artifacts,
) -> Result<PruneOutcome> {
    let selected = &analysis.ranking.selected;
    let (search, threshold) = match cfg.threshold {
        Some(t) => (None, t),
        None => {
            let s = plateau_threshold_search(
                model,
                &analysis.table,
                selected,
                data,
                &cfg.grid.values(),
                cfg.eps_acc,
                &cfg.retrain_config(cfg.search_epochs),
            )?;
            art.write("plateau.csv", plateau_csv(&s))?;
            let t = s.t0;
            (Some(s), t)
        }
    };
    let (report, mut pruned) =
        prune_and_retrain(model, &analysis.table, selected, data, threshold, &cfg.retrain_config(cfg.retrain_epochs))?;
    let plan = build_prune_plan(model, &analysis.table, selected, threshold)?;
    if let Some(p) = &mut pruned.provenance {
        p.push_str(&format!("; retrained {} epochs", cfg.retrain_epochs));
    }
    let acc = report.accuracy_after_retrain;
    art.save_model("pruned.ldap", &pruned)?;
    art.write("prune_report.csv", report.to_csv())?;

    let before = model_param_count(model);
    let after = model_param_count(&pruned);
    art.section("prune");
    art.line("threshold", threshold);
    art.line("flagged", report.flagged);
    for p in &plan.layers {
        art.line(&format!("layer_{}_filters", p.layer), format!("{}/{}", p.keep.len(), p.filters));
    }
    art.line("conv_params", format!("{} -> {}", before.conv, after.conv));
    art.line("fc_params", format!("{} -> {}", before.fc, after.fc));
    art.line("conv_pruning_rate", format!("{:.6}", report.conv_rate));
    art.line("accuracy_before_retrain", report.accuracy_before_retrain);
    art.line("accuracy_after_retrain", acc);
    Ok(PruneOutcome {
        search,
        threshold,
        report,
        model: pruned,
        accuracy: acc,
    })
}

/// LDA points from the search plus magnitude masking at the same conv rates.
pub fn stage_sweep(
    cfg: &RunConfig,
    model: &ModelDescriptor,
    base_accuracy: f64,
    search: &PlateauSearch,
    data: &DatasetSplit,
    art: &mut Artifacts,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    let mut rates: Vec<f64> = Vec::new();
    for r in &search.reports {
        rows.push(SweepRow {
            pruning_rate: r.conv_rate,
            accuracy_delta: r.accuracy_after_retrain - base_accuracy,
            method: SweepMethod::Lda,
        });
        if !rates.contains(&r.conv_rate) {
            rates.push(r.conv_rate);
        }
    }
    for &rate in &rates {
        let m = magnitude_baseline(
            model,
            magnitude_rate_for(model, rate),
            data,
            &cfg.retrain_config(cfg.search_epochs),
        )?;
        rows.push(SweepRow {
            pruning_rate: m.conv_rate,
            accuracy_delta: m.accuracy - base_accuracy,
            method: SweepMethod::Magnitude,
        });
    }
    art.write("sweep.csv", sweep_to_csv(&rows))?;
    art.section("sweep");
    art.line("base_accuracy", base_accuracy);
    art.line("points", rows.len());
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct HeadResult {
    pub classifier: &'static str,
    pub accuracy: f64,
    pub confusion: [[usize; 2]; 2],
}

/// Fits the chosen head on the model's last-conv firing scores (top-k by ICC
/// when the layer is wider than k) and scores it on the test split.
pub fn stage_eval(
    cfg: &RunConfig,
    model: &ModelDescriptor,
    data: &DatasetSplit,
    kind: ClassifierKind,
    art: &mut Artifacts,
) -> Result<HeadResult> {
    let ids: Vec<String> = data.test.iter().map(|s| s.id.clone()).collect();
    let labels: Vec<usize> = data.test.iter().map(|s| s.label).collect();
    let name = kind.as_str();
    let eval = if kind == ClassifierKind::Fc {
        let preds = data
            .test
            .iter()
            .map(|s| Ok(forward_pass(model, &s.image)?.predicted_class()))
            .collect::<Result<Vec<_>>>()?;
        Evaluation::from_predictions(&labels, preds)?
    } else {
        let layer = last_conv(model)?;
        let train_raw = extract_firing_matrix(model, &data.train, layer)?;
        let test_raw = extract_firing_matrix(model, &data.test, layer)?;
        let neurons = if train_raw.cols() > cfg.k {
            let s = standardize(&train_raw)?;
            rank_and_select(&icc_scores(&scatter_matrices(&s)?), cfg.k)?.selected
        } else {
            (0..train_raw.cols()).collect()
        };
        let stats = column_stats(&train_raw.select_columns(&neurons)?)?;
        let transform = FeatureTransform { layer, neurons, stats };
        let x_train = transform.apply(&train_raw)?;
        let x_test = transform.apply(&test_raw)?;
        let d = x_train.cols();
        let (head_aux, eval) = match kind {
            ClassifierKind::Qda => {
                let q = qda_fit(&x_train, cfg.qda_lambda)?;
                (q.to_aux(), evaluate_accuracy(&q, &x_test)?)
            }
            ClassifierKind::Svml => {
                let m = linear_svm_fit(&feature_rows(&x_train), &signed_labels(&x_train.labels), cfg.svm_c, cfg.svm_epochs, cfg.seed)?;
                (m.to_aux(), evaluate_accuracy(&m, &x_test)?)
            }
            ClassifierKind::Svmr => {
                let gamma = cfg.svm_gamma.unwrap_or(1.0 / d as f64);
                let m = rbf_svm_fit(&feature_rows(&x_train), &signed_labels(&x_train.labels), cfg.svm_c, gamma, 1e-3)?;
                if !m.converged {
                    art.line(&format!("{name}_warning"), "SMO stopped at its iteration cap");
                }
                (m.to_aux(), evaluate_accuracy(&m, &x_test)?)
            }
            ClassifierKind::Fc => unreachable!(),
        };
        let mut with_head = model.clone();
        with_head.aux = vec![transform.to_aux(), head_aux];
        art.save_model(&format!("head_{name}.ldap"), &with_head)?;
        eval
    };
    art.write(&format!("predictions_{name}.csv"), eval.predictions_csv(&ids))?;
    art.line(&format!("{name}_accuracy"), eval.accuracy);
    art.line(&format!("{name}_confusion"), format!("{:?}", eval.confusion));
    Ok(HeadResult {
        classifier: name,
        accuracy: eval.accuracy,
        confusion: eval.confusion,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SizeSummary {
    pub original_bytes: usize,
    pub pruned_bytes: usize,
    pub original_params: usize,
    pub pruned_params: usize,
}

impl SizeSummary {
    pub fn byte_ratio(&self) -> f64 {
        self.original_bytes as f64 / self.pruned_bytes as f64
    }

    pub fn param_ratio(&self) -> f64 {
        self.original_params as f64 / self.pruned_params as f64
    }
}

#[derive(Debug, Clone)]
pub struct BenchSummary {
    pub sizes: SizeSummary,
    pub original_ms: f64,
    pub pruned_ms: f64,
}

impl BenchSummary {
    pub fn speedup(&self) -> f64 {
        self.original_ms / self.pruned_ms
    }
}

pub fn sizes(original: &ModelDescriptor, pruned: &ModelDescriptor) -> Result<SizeSummary> {
    Ok(SizeSummary {
        original_bytes: to_bytes(original)?.len(),
        pruned_bytes: to_bytes(pruned)?.len(),
        original_params: model_param_count(original).total,
        pruned_params: model_param_count(pruned).total,
    })
}

/// Writes `bench.csv`; timings stay out of `report.txt` so the report is reproducible.
pub fn stage_bench(
    cfg: &RunConfig,
    original: &ModelDescriptor,
    pruned: &ModelDescriptor,
    data: &DatasetSplit,
    art: &mut Artifacts,
) -> Result<BenchSummary> {
    let images: Vec<_> = data.test.iter().take(cfg.bench_images.max(1)).map(|s| s.image.clone()).collect();
    let a = time_forward(original, &images, WARMUP_RUNS, cfg.bench_runs)?;
    let b = time_forward(pruned, &images, WARMUP_RUNS, cfg.bench_runs)?;
    art.write("bench.csv", comparison_csv(&a, &b)?)?;
    let s = sizes(original, pruned)?;
    art.section("bench");
    art.line("timed_runs", cfg.bench_runs);
    art.line("warmup_runs", WARMUP_RUNS);
    art.line("model_bytes", format!("{} -> {}", s.original_bytes, s.pruned_bytes));
    art.line("model_params", format!("{} -> {}", s.original_params, s.pruned_params));
    art.line("byte_ratio", format!("{:.4}", s.byte_ratio()));
    art.line("param_ratio", format!("{:.4}", s.param_ratio()));
    Ok(BenchSummary {
        sizes: s,
        original_ms: a.total_ms,
        pruned_ms: b.total_ms,
    })
}

/// Reproducible outcome of a full run, also written as `summary.json`.
#[derive(Debug, Clone, Serialize)]
pub struct PipelineSummary {
    pub base_accuracy: f64,
    pub selected: Vec<usize>,
    pub t0: f64,
    pub pruned_accuracy: f64,
    pub conv_params_before: usize,
    pub conv_params_after: usize,
    pub conv_pruning_rate: f64,
    pub sizes: SizeSummary,
    pub sweep: Vec<(f64, f64, &'static str)>,
    pub heads: Vec<HeadResult>,
}

pub struct PipelineRun {
    pub summary: PipelineSummary,
    pub bench: BenchSummary,
}

pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineRun> {
    let data = cfg.load_dataset()?;
    let mut art = Artifacts::create(&cfg.out)?;
    let (model, base_acc) = stage_train(cfg, &data, &mut art)?;
    let analysis = stage_analyze(cfg, &model, &data, &mut art)?;
    let mut search_cfg = cfg.clone();
    search_cfg.threshold = None;
    let pruned = stage_prune(&search_cfg, &model, &analysis, &data, &mut art)?;
    let search = pruned.search.as_ref().expect("grid search ran");
    let sweep = stage_sweep(cfg, &model, base_acc, search, &data, &mut art)?;
    art.section("eval");
    let heads = ClassifierKind::ALL
        .iter()
        .map(|&k| stage_eval(cfg, &pruned.model, &data, k, &mut art))
        .collect::<Result<Vec<_>>>()?;
    let bench = stage_bench(cfg, &model, &pruned.model, &data, &mut art)?;
    let summary = PipelineSummary {
        base_accuracy: base_acc,
        selected: analysis.ranking.selected.clone(),
        t0: pruned.threshold,
        pruned_accuracy: pruned.accuracy,
        conv_params_before: model_param_count(&model).conv,
        conv_params_after: model_param_count(&pruned.model).conv,
        conv_pruning_rate: pruned.report.conv_rate,
        sizes: bench.sizes.clone(),
        sweep: sweep.iter().map(|r| (r.pruning_rate, r.accuracy_delta, r.method.as_str())).collect(),
        heads,
    };
    art.write("summary.json", serde_json::to_string_pretty(&summary)? + "\n")?;
    art.finish(cfg)?;
    Ok(PipelineRun { summary, bench })
}
