//! Small classifier heads on reduced firing features: Gaussian QDA, a linear
//! SVM trained by primal subgradient descent, and a kernel SVM trained by SMO.

use serde_json::json;

use crate::error::{Error, Result};
use crate::lda::{ColumnStats, FiringMatrix};
use crate::linalg::{cholesky, log_det_from_cholesky, solve_lower, Mat};
use crate::model::AuxSection;

/// Largest training set accepted by [`rbf_svm_fit`] (the kernel is precomputed).
pub const MAX_RBF_SAMPLES: usize = 5000;

/// Anything that maps a feature vector to a class index.
pub trait Predictor {
    fn predict_class(&self, x: &[f64]) -> Result<usize>;
}

fn check_dim(want: usize, got: usize) -> Result<()> {
    if want != got {
        return Err(Error::Shape(format!("expected {want} features, got {got}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct QdaClass {
    pub mean: Vec<f64>,
    pub cov: Mat,
    pub chol: Mat,
    pub log_det: f64,
    pub log_prior: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QdaModel {
    pub dim: usize,
    pub lambda: f64,
    pub classes: Vec<QdaClass>,
}

impl QdaClass {
    fn new(mean: Vec<f64>, cov: Mat, log_prior: f64) -> Result<Self> {
        let chol = cholesky(&cov)?;
        Ok(Self {
            log_det: log_det_from_cholesky(&chol),
            mean,
            cov,
            chol,
            log_prior,
        })
    }
}

/// Fits one Gaussian per class with covariance `Gram / (N − 1) + λI`.
pub fn qda_fit(x: &FiringMatrix, lambda: f64) -> Result<QdaModel> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be non-negative, got {lambda}")));
    }
    let d = x.cols();
    let n_classes = x.labels.iter().max().map_or(0, |&m| m + 1).max(2);
    let mut classes = Vec::with_capacity(n_classes);
    for class in 0..n_classes {
        let rows: Vec<&[f64]> = (0..x.rows()).filter(|&r| x.labels[r] == class).map(|r| x.row(r)).collect();
        let n = rows.len();
        if n == 0 {
            return Err(Error::ClassAbsent(class));
        }
        if n <= d {
            return Err(Error::Dimensionality(format!(
                "class {class} has {n} samples for {d} features; QDA needs more samples than features (lower k or gather more data)"
            )));
        }
        let mut mean = vec![0.0; d];
        for row in &rows {
            for (m, v) in mean.iter_mut().zip(row.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = Mat::zeros(d, d);
        for row in &rows {
            for i in 0..d {
                let di = row[i] - mean[i];
                for j in 0..d {
                    cov[(i, j)] += di * (row[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] /= (n - 1) as f64;
            }
            cov[(i, i)] += lambda;
        }
        let log_prior = (n as f64 / x.rows() as f64).ln();
        classes.push(QdaClass::new(mean, cov, log_prior).map_err(|e| match e {
            Error::NotPositiveDefinite(m) => {
                Error::NotPositiveDefinite(format!("class {class} covariance after regularization: {m}"))
            }
            other => other,
        })?);
    }
    Ok(QdaModel { dim: d, lambda, classes })
}

impl QdaModel {
    /// Most probable class (lowest index on ties) and normalized log-posteriors.
    pub fn predict(&self, x: &[f64]) -> Result<(usize, Vec<f64>)> {
        check_dim(self.dim, x.len())?;
        let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let joint: Vec<f64> = self
            .classes
            .iter()
            .map(|c| {
                let diff: Vec<f64> = x.iter().zip(&c.mean).map(|(a, b)| a - b).collect();
                let z = solve_lower(&c.chol, &diff);
                let maha: f64 = z.iter().map(|v| v * v).sum();
                c.log_prior - 0.5 * c.log_det - 0.5 * maha - self.dim as f64 * half_log_2pi
            })
            .collect();
        let max = joint.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + joint.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let post: Vec<f64> = joint.iter().map(|v| v - lse).collect();
        let label = (0..post.len()).fold(0, |b, i| if post[i] > post[b] { i } else { b });
        Ok((label, post))
    }

    pub fn to_aux(&self) -> AuxSection {
        let mut values = Vec::new();
        for c in &self.classes {
            values.extend_from_slice(&c.mean);
            values.extend_from_slice(c.cov.data());
            values.push(c.log_prior);
        }
        AuxSection {
            kind: "qda".into(),
            meta: json!({ "dim": self.dim, "lambda": self.lambda, "classes": self.classes.len() }),
            values,
        }
    }

    pub fn from_aux(aux: &AuxSection) -> Result<Self> {
        if aux.kind != "qda" {
            return Err(Error::Format(format!("aux section {:?} is not a QDA head", aux.kind)));
        }
        let dim = meta_usize(aux, "dim")?;
        let n = meta_usize(aux, "classes")?;
        let lambda = meta_f64(aux, "lambda")?;
        let per = dim + dim * dim + 1;
        if aux.values.len() != n * per {
            return Err(Error::Format(format!("QDA head holds {} values, expected {}", aux.values.len(), n * per)));
        }
        let classes = aux
            .values
            .chunks_exact(per)
            .map(|v| {
                let cov = Mat::from_rows(dim, dim, v[dim..dim + dim * dim].to_vec())?;
                QdaClass::new(v[..dim].to_vec(), cov, v[per - 1])
            })
            .collect::<Result<_>>()?;
        Ok(Self { dim, lambda, classes })
    }
}

impl Predictor for QdaModel {
    fn predict_class(&self, x: &[f64]) -> Result<usize> {
        Ok(self.predict(x)?.0)
    }
}

fn meta_usize(aux: &AuxSection, key: &str) -> Result<usize> {
    aux.meta
        .get(key)
        .and_then(|v| v.as_u64())
        .map(|v| v as usize)
        .ok_or_else(|| Error::Format(format!("aux section {:?} lacks integer {key:?}", aux.kind)))
}

fn meta_f64(aux: &AuxSection, key: &str) -> Result<f64> {
    aux.meta
        .get(key)
        .and_then(|v| v.as_f64())
        .ok_or_else(|| Error::Format(format!("aux section {:?} lacks number {key:?}", aux.kind)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kernel {
    Linear,
    Rbf { gamma: f64 },
}

impl Kernel {
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            Kernel::Linear => a.iter().zip(b).map(|(x, y)| x * y).sum(),
            Kernel::Rbf { gamma } => (-gamma * a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>()).exp(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    pub kernel: Kernel,
    pub dim: usize,
    /// Primal weights (linear kernel only).
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Support vectors and their `α_i y_i` (RBF kernel only).
    pub support: Vec<Vec<f64>>,
    pub coef: Vec<f64>,
    pub c: f64,
    pub iterations: usize,
    pub seed: u64,
    /// False when the solver hit its iteration cap.
    pub converged: bool,
    /// Final primal objective (linear) or dual objective (RBF).
    pub objective: f64,
}

/// `+1` for class 1, `-1` for class 0.
pub fn signed_labels(labels: &[usize]) -> Vec<f64> {
    labels.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect()
}

fn check_svm_data(features: &[Vec<f64>], labels: &[f64]) -> Result<usize> {
    if features.is_empty() {
        return Err(Error::Empty("no training samples".into()));
    }
    if features.len() != labels.len() {
        return Err(Error::Shape(format!("{} samples, {} labels", features.len(), labels.len())));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::Shape("ragged feature rows".into()));
    }
    if let Some(l) = labels.iter().find(|&&l| l != 1.0 && l != -1.0) {
        return Err(Error::InvalidArgument(format!("SVM label {l} is not ±1")));
    }
    for (class, want) in [(0, -1.0), (1, 1.0)] {
        if !labels.contains(&want) {
            return Err(Error::ClassAbsent(class));
        }
    }
    Ok(d)
}

/// `½‖w‖² + C Σ max(0, 1 − y(w·x + b))`.
pub fn linear_svm_objective(w: &[f64], b: f64, c: f64, features: &[Vec<f64>], labels: &[f64]) -> f64 {
    let hinge: f64 = features
        .iter()
        .zip(labels)
        .map(|(x, &y)| (1.0 - y * (dot(w, x) + b)).max(0.0))
        .sum();
    0.5 * dot(w, w) + c * hinge
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Full-batch subgradient descent with step `1/t` on the primal objective.
/// Keeps whichever of the current iterate and the average of the second half
/// of the iterates reached the lowest objective.
pub fn linear_svm_fit(features: &[Vec<f64>], labels: &[f64], c: f64, epochs: usize, seed: u64) -> Result<SvmModel> {
    let d = check_svm_data(features, labels)?;
    if !(c > 0.0) || epochs == 0 {
        return Err(Error::InvalidArgument(format!("need C > 0 and epochs > 0, got C = {c}, epochs = {epochs}")));
    }
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut avg_w = vec![0.0; d];
    let mut avg_b = 0.0;
    let mut averaged = 0usize;
    let mut best = (linear_svm_objective(&w, b, c, features, labels), w.clone(), b);
    let mut consider = |w: &[f64], b: f64| {
        let obj = linear_svm_objective(w, b, c, features, labels);
        if obj < best.0 {
            best = (obj, w.to_vec(), b);
        }
    };
    for t in 1..=epochs {
        let mut gw = w.clone();
        let mut gb = 0.0;
        for (x, &y) in features.iter().zip(labels) {
            if y * (dot(&w, x) + b) < 1.0 {
                for (g, v) in gw.iter_mut().zip(x) {
                    *g -= c * y * v;
                }
                gb -= c * y;
            }
        }
        let eta = 1.0 / t as f64;
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= eta * g;
        }
        b -= eta * gb;
        consider(&w, b);
        if 2 * t > epochs {
            averaged += 1;
            let k = averaged as f64;
            for (a, wi) in avg_w.iter_mut().zip(&w) {
                *a += (wi - *a) / k;
            }
            avg_b += (b - avg_b) / k;
            consider(&avg_w, avg_b);
        }
    }
    Ok(SvmModel {
        kernel: Kernel::Linear,
        dim: d,
        weights: best.1,
        bias: best.2,
        support: Vec::new(),
        coef: Vec::new(),
        c,
        iterations: epochs,
        seed,
        converged: true,
        objective: best.0,
    })
}

/// SMO on the dual with maximal-violating-pair selection, stopping when the
/// KKT gap drops below `tol`.
pub fn rbf_svm_fit(features: &[Vec<f64>], labels: &[f64], c: f64, gamma: f64, tol: f64) -> Result<SvmModel> {
    let d = check_svm_data(features, labels)?;
    let n = features.len();
    if n > MAX_RBF_SAMPLES {
        return Err(Error::InvalidArgument(format!("{n} samples exceeds the kernel SVM limit {MAX_RBF_SAMPLES}")));
    }
    if !(c > 0.0 && gamma > 0.0 && tol > 0.0) {
        return Err(Error::InvalidArgument(format!("need C, gamma, tol > 0; got {c}, {gamma}, {tol}")));
    }
    let kernel = Kernel::Rbf { gamma };
    let y = labels;
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v = kernel.eval(&features[i], &features[j]);
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    let q = |i: usize, j: usize| y[i] * y[j] * k[i * n + j];
    let mut alpha = vec![0.0; n];
    // Gradient of ½αᵀQα − Σα.
    let mut grad = vec![-1.0; n];
    let max_iter = 100_000.max(100 * n);
    let mut iterations = 0;
    let mut converged = false;
    const TAU: f64 = 1e-12;
    while iterations < max_iter {
        let up = |t: usize| (y[t] > 0.0 && alpha[t] < c) || (y[t] < 0.0 && alpha[t] > 0.0);
        let low = |t: usize| (y[t] > 0.0 && alpha[t] > 0.0) || (y[t] < 0.0 && alpha[t] < c);
        let mut i = usize::MAX;
        let mut j = usize::MAX;
        let (mut m_up, mut m_low) = (f64::NEG_INFINITY, f64::INFINITY);
        for t in 0..n {
            let v = -y[t] * grad[t];
            if up(t) && v > m_up {
                m_up = v;
                i = t;
            }
            if low(t) && v < m_low {
                m_low = v;
                j = t;
            }
        }
        if i == usize::MAX || j == usize::MAX || m_up - m_low < tol {
            converged = true;
            break;
        }
        iterations += 1;
        let (old_i, old_j) = (alpha[i], alpha[j]);
        if y[i] != y[j] {
            let quad = (q(i, i) + q(j, j) + 2.0 * q(i, j)).max(TAU);
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let quad = (q(i, i) + q(j, j) - 2.0 * q(i, j)).max(TAU);
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for t in 0..n {
            grad[t] += q(t, i) * di + q(t, j) * dj;
        }
    }

    // Offset from free vectors, or the midpoint of the feasible interval.
    let (mut sum, mut free) = (0.0, 0usize);
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    for t in 0..n {
        let yg = y[t] * grad[t];
        if alpha[t] > 0.0 && alpha[t] < c {
            sum += yg;
            free += 1;
        } else if (alpha[t] >= c && y[t] < 0.0) || (alpha[t] <= 0.0 && y[t] > 0.0) {
            ub = ub.min(yg);
        } else {
            lb = lb.max(yg);
        }
    }
    let rho = if free > 0 { sum / free as f64 } else { (ub + lb) / 2.0 };
    let objective = 0.5 * (0..n).map(|t| alpha[t] * (grad[t] - 1.0)).sum::<f64>();
    let (support, coef): (Vec<Vec<f64>>, Vec<f64>) = (0..n)
        .filter(|&t| alpha[t] > 0.0)
        .map(|t| (features[t].clone(), alpha[t] * y[t]))
        .unzip();
    if support.is_empty() {
        return Err(Error::NoConvergence("SMO finished without support vectors".into()));
    }
    Ok(SvmModel {
        kernel,
        dim: d,
        weights: Vec::new(),
        bias: -rho,
        support,
        coef,
        c,
        iterations,
        seed: 0,
        converged,
        objective,
    })
}

impl SvmModel {
    pub fn decision(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        Ok(match self.kernel {
            Kernel::Linear => dot(&self.weights, x) + self.bias,
            Kernel::Rbf { .. } => {
                self.support.iter().zip(&self.coef).map(|(s, a)| a * self.kernel.eval(s, x)).sum::<f64>() + self.bias
            }
        })
    }

    /// Dual coefficients `α_i` recovered from the stored `α_i y_i`.
    pub fn alphas(&self) -> Vec<f64> {
        self.coef.iter().map(|a| a.abs()).collect()
    }

    pub fn to_aux(&self) -> AuxSection {
        let (kind, gamma) = match self.kernel {
            Kernel::Linear => ("svm_linear", 0.0),
            Kernel::Rbf { gamma } => ("svm_rbf", gamma),
        };
        let mut values = vec![self.bias];
        values.extend_from_slice(&self.weights);
        values.extend_from_slice(&self.coef);
        for s in &self.support {
            values.extend_from_slice(s);
        }
        AuxSection {
            kind: kind.into(),
            meta: json!({
                "dim": self.dim,
                "c": self.c,
                "gamma": gamma,
                "support": self.support.len(),
                "iterations": self.iterations,
                "seed": self.seed,
                "converged": self.converged,
                "objective": self.objective,
            }),
            values,
        }
    }

    pub fn from_aux(aux: &AuxSection) -> Result<Self> {
        let linear = match aux.kind.as_str() {
            "svm_linear" => true,
            "svm_rbf" => false,
            other => return Err(Error::Format(format!("aux section {other:?} is not an SVM head"))),
        };
        let dim = meta_usize(aux, "dim")?;
        let n_sv = meta_usize(aux, "support")?;
        let want = 1 + if linear { dim } else { n_sv * (dim + 1) };
        if aux.values.len() != want {
            return Err(Error::Format(format!("SVM head holds {} values, expected {want}", aux.values.len())));
        }
        let v = &aux.values;
        let (weights, coef, support) = if linear {
            (v[1..].to_vec(), Vec::new(), Vec::new())
        } else {
            let coef = v[1..1 + n_sv].to_vec();
            let support = v[1 + n_sv..].chunks_exact(dim).map(<[f64]>::to_vec).collect();
            (Vec::new(), coef, support)
        };
        Ok(Self {
            kernel: if linear { Kernel::Linear } else { Kernel::Rbf { gamma: meta_f64(aux, "gamma")? } },
            dim,
            weights,
            bias: v[0],
            support,
            coef,
            c: meta_f64(aux, "c")?,
            iterations: meta_usize(aux, "iterations")?,
            seed: aux.meta.get("seed").and_then(|s| s.as_u64()).unwrap_or(0),
            converged: aux.meta.get("converged").and_then(|s| s.as_bool()).unwrap_or(false),
            objective: meta_f64(aux, "objective")?,
        })
    }
}

/// `+1` when the decision value is non-negative.
pub fn svm_predict(model: &SvmModel, x: &[f64]) -> Result<i32> {
    Ok(if model.decision(x)? >= 0.0 { 1 } else { -1 })
}

impl Predictor for SvmModel {
    fn predict_class(&self, x: &[f64]) -> Result<usize> {
        Ok(usize::from(svm_predict(self, x)? > 0))
    }
}

/// Column standardization and neuron selection applied before a head.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTransform {
    /// Conv layer whose firing scores feed the head.
    pub layer: usize,
    /// Columns of the full firing matrix, in head order.
    pub neurons: Vec<usize>,
    /// Statistics for the selected columns.
    pub stats: Vec<ColumnStats>,
}

impl FeatureTransform {
    pub fn apply(&self, full: &FiringMatrix) -> Result<FiringMatrix> {
        full.select_columns(&self.neurons)?.apply_standardization(&self.stats)
    }

    pub fn to_aux(&self) -> AuxSection {
        let mut values: Vec<f64> = self.stats.iter().map(|s| s.mean).collect();
        values.extend(self.stats.iter().map(|s| s.std));
        AuxSection {
            kind: "features".into(),
            meta: json!({
                "layer": self.layer,
                "neurons": self.neurons,
                "constant": self.stats.iter().map(|s| s.constant).collect::<Vec<_>>(),
            }),
            values,
        }
    }

    pub fn from_aux(aux: &AuxSection) -> Result<Self> {
        if aux.kind != "features" {
            return Err(Error::Format(format!("aux section {:?} is not a feature transform", aux.kind)));
        }
        let bad = || Error::Format("malformed feature transform".into());
        let neurons: Vec<usize> = serde_json::from_value(aux.meta.get("neurons").cloned().ok_or_else(bad)?)
            .map_err(|_| bad())?;
        let constant: Vec<bool> = serde_json::from_value(aux.meta.get("constant").cloned().ok_or_else(bad)?)
            .map_err(|_| bad())?;
        let k = neurons.len();
        if constant.len() != k || aux.values.len() != 2 * k {
            return Err(bad());
        }
        Ok(Self {
            layer: meta_usize(aux, "layer")?,
            stats: (0..k)
                .map(|i| ColumnStats {
                    mean: aux.values[i],
                    std: aux.values[k + i],
                    constant: constant[i],
                })
                .collect(),
            neurons,
        })
    }
}

/// Exact counts of a two-class evaluation; `confusion[label][predicted]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub confusion: [[usize; 2]; 2],
    pub labels: Vec<usize>,
    pub predictions: Vec<usize>,
}

impl Evaluation {
    pub fn from_predictions(labels: &[usize], predictions: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty("nothing to evaluate".into()));
        }
        if labels.len() != predictions.len() {
            return Err(Error::Shape(format!("{} labels, {} predictions", labels.len(), predictions.len())));
        }
        let mut confusion = [[0; 2]; 2];
        for (&l, &p) in labels.iter().zip(&predictions) {
            if l > 1 || p > 1 {
                return Err(Error::InvalidArgument(format!("class pair ({l}, {p}) is not binary")));
            }
            confusion[l][p] += 1;
        }
        let correct = confusion[0][0] + confusion[1][1];
        Ok(Self {
            accuracy: correct as f64 / labels.len() as f64,
            correct,
            total: labels.len(),
            confusion,
            labels: labels.to_vec(),
            predictions,
        })
    }

    /// CSV with columns `sample,label,predicted`.
    pub fn predictions_csv(&self, ids: &[String]) -> String {
        let mut s = String::from("sample,label,predicted\n");
        for (i, (l, p)) in self.labels.iter().zip(&self.predictions).enumerate() {
            let id = ids.get(i).cloned().unwrap_or_else(|| i.to_string());
            s.push_str(&format!("{id},{l},{p}\n"));
        }
        s
    }

    /// Recounts an evaluation from a predictions CSV.
    pub fn from_predictions_csv(text: &str) -> Result<Self> {
        let mut labels = Vec::new();
        let mut preds = Vec::new();
        for (n, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Format(format!("predictions line {}: {line:?}", n + 1));
            let f: Vec<&str> = line.rsplitn(3, ',').collect();
            if f.len() != 3 {
                return Err(bad());
            }
            preds.push(f[0].parse().map_err(|_| bad())?);
            labels.push(f[1].parse().map_err(|_| bad())?);
        }
        Self::from_predictions(&labels, preds)
    }
}

pub fn evaluate_accuracy<P: Predictor + ?Sized>(classifier: &P, features: &FiringMatrix) -> Result<Evaluation> {
    let preds = (0..features.rows())
        .map(|r| classifier.predict_class(features.row(r)))
        .collect::<Result<Vec<_>>>()?;
    Evaluation::from_predictions(&features.labels, preds)
}

/// Rows of a firing matrix as owned vectors.
pub fn feature_rows(x: &FiringMatrix) -> Vec<Vec<f64>> {
    (0..x.rows()).map(|r| x.row(r).to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn gaussian_blobs(n: usize, centers: [[f64; 2]; 2], sigma: f64, seed: u64) -> FiringMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sigma).unwrap();
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for i in 0..2 * n {
            let class = i % 2;
            values.push(centers[class][0] + noise.sample(&mut rng));
            values.push(centers[class][1] + noise.sample(&mut rng));
            labels.push(class);
        }
        FiringMatrix::new(2 * n, 2, values, labels).unwrap()
    }

    fn xor() -> (Vec<Vec<f64>>, Vec<f64>) {
        (
            vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0], vec![1.0, 0.0]],
            vec![-1.0, -1.0, 1.0, 1.0],
        )
    }

    #[test]
    fn qda_separated_clouds() {
        let train = gaussian_blobs(200, [[-3.0, 0.0], [3.0, 0.0]], 1.0, 1);
        let test = gaussian_blobs(200, [[-3.0, 0.0], [3.0, 0.0]], 1.0, 2);
        let q = qda_fit(&train, 1e-6).unwrap();
        assert!(evaluate_accuracy(&q, &test).unwrap().accuracy >= 0.98);
        let priors: f64 = q.classes.iter().map(|c| c.log_prior.exp()).sum();
        assert!((priors - 1.0).abs() < 1e-12);
    }

    #[test]
    fn qda_identical_distributions_is_chance() {
        let train = gaussian_blobs(200, [[0.0, 0.0], [0.0, 0.0]], 1.0, 3);
        let test = gaussian_blobs(500, [[0.0, 0.0], [0.0, 0.0]], 1.0, 4);
        let acc = evaluate_accuracy(&qda_fit(&train, 1e-3).unwrap(), &test).unwrap().accuracy;
        assert!((acc - 0.5).abs() <= 0.05, "{acc}");
    }

    #[test]
    fn qda_requires_more_samples_than_features() {
        let x = FiringMatrix::new(2, 1, vec![0.0, 1.0], vec![0, 1]).unwrap();
        assert!(matches!(qda_fit(&x, 1.0), Err(Error::Dimensionality(_))));
        let x = FiringMatrix::new(3, 1, vec![0.0, 1.0, 2.0], vec![0, 0, 0]).unwrap();
        assert!(matches!(qda_fit(&x, 1.0), Err(Error::ClassAbsent(1))));
    }

    fn hand_qda(means: [Vec<f64>; 2], covs: [Mat; 2]) -> QdaModel {
        QdaModel {
            dim: means[0].len(),
            lambda: 0.0,
            classes: means
                .into_iter()
                .zip(covs)
                .map(|(m, c)| QdaClass::new(m, c, 0.5f64.ln()).unwrap())
                .collect(),
        }
    }

    #[test]
    fn qda_closed_forms() {
        let q = hand_qda([vec![0.0, 0.0], vec![2.0, 0.0]], [Mat::identity(2), Mat::identity(2)]);
        assert_eq!(q.predict(&[0.0, 0.0]).unwrap().0, 0);
        let q = hand_qda([vec![0.0], vec![0.0]], [Mat::identity(1), Mat::from_diag(&[4.0])]);
        let (label, post) = q.predict(&[0.0]).unwrap();
        assert_eq!(label, 0);
        // p0/p1 = sqrt(4)/sqrt(1) at the shared mean.
        assert!((post[0] - post[1] - 2f64.ln()).abs() < 1e-12);
        assert!(q.predict(&[0.0, 1.0]).is_err());
    }

    #[test]
    fn qda_matches_quadratic_form_oracle() {
        let train = gaussian_blobs(40, [[-1.0, 0.5], [1.0, -0.5]], 0.8, 5);
        let q = qda_fit(&train, 0.1).unwrap();
        for x in [[0.3, -0.2], [2.0, 1.0], [-4.0, 3.0]] {
            let (_, post) = q.predict(&x).unwrap();
            // Oracle: explicit 2×2 inverse and determinant.
            let joint: Vec<f64> = q
                .classes
                .iter()
                .map(|c| {
                    let (a, b, d) = (c.cov[(0, 0)], c.cov[(0, 1)], c.cov[(1, 1)]);
                    let det = a * d - b * b;
                    let (u, v) = (x[0] - c.mean[0], x[1] - c.mean[1]);
                    let maha = (d * u * u - 2.0 * b * u * v + a * v * v) / det;
                    c.log_prior - 0.5 * det.ln() - 0.5 * maha
                })
                .collect();
            let lse = (joint[0].exp() + joint[1].exp()).ln();
            for k in 0..2 {
                assert!((post[k] - (joint[k] - lse)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn qda_aux_round_trip() {
        let q = qda_fit(&gaussian_blobs(20, [[-1.0, 0.0], [1.0, 0.0]], 1.0, 6), 0.01).unwrap();
        assert_eq!(QdaModel::from_aux(&q.to_aux()).unwrap(), q);
    }

    #[test]
    fn linear_svm_one_dimensional() {
        let x = vec![vec![-2.0], vec![2.0]];
        let y = vec![-1.0, 1.0];
        let m = linear_svm_fit(&x, &y, 1.0, 500, 1).unwrap();
        assert!(m.weights[0] > 0.0);
        assert_eq!(svm_predict(&m, &[-2.0]).unwrap(), -1);
        assert_eq!(svm_predict(&m, &[2.0]).unwrap(), 1);
        assert!(linear_svm_fit(&x, &[1.0, 1.0], 1.0, 10, 1).is_err());
    }

    #[test]
    fn linear_svm_near_lattice_optimum() {
        let blobs = gaussian_blobs(30, [[-1.5, -1.0], [1.5, 1.0]], 0.7, 7);
        let x = feature_rows(&blobs);
        let y = signed_labels(&blobs.labels);
        let m = linear_svm_fit(&x, &y, 1.0, 3000, 7).unwrap();
        let mut best = f64::INFINITY;
        let lattice: Vec<f64> = (-40..=40).map(|i| i as f64 * 0.05).collect();
        for &w0 in &lattice {
            for &w1 in &lattice {
                for &b in &lattice {
                    best = best.min(linear_svm_objective(&[w0, w1], b, 1.0, &x, &y));
                }
            }
        }
        assert!(m.objective <= best * 1.05, "{} vs lattice {best}", m.objective);
        assert_eq!(m.objective, linear_svm_objective(&m.weights, m.bias, 1.0, &x, &y));
        assert_eq!(m, linear_svm_fit(&x, &y, 1.0, 3000, 7).unwrap());
    }

    #[test]
    fn svm_predict_cases() {
        let m = SvmModel {
            kernel: Kernel::Linear,
            dim: 2,
            weights: vec![1.0, 0.0],
            bias: 0.0,
            support: vec![],
            coef: vec![],
            c: 1.0,
            iterations: 0,
            seed: 0,
            converged: true,
            objective: 0.0,
        };
        assert_eq!(svm_predict(&m, &[3.0, -1.0]).unwrap(), 1);
        assert_eq!(svm_predict(&m, &[0.0, 5.0]).unwrap(), 1);
        assert_eq!(svm_predict(&m, &[-0.1, 5.0]).unwrap(), -1);
        assert!(svm_predict(&m, &[1.0]).is_err());
    }

    #[test]
    fn rbf_solves_xor() {
        let (x, y) = xor();
        let m = rbf_svm_fit(&x, &y, 10.0, 1.0, 1e-6).unwrap();
        assert!(m.converged);
        for (xi, &yi) in x.iter().zip(&y) {
            assert_eq!(svm_predict(&m, xi).unwrap() as f64, yi);
        }
        assert_eq!(SvmModel::from_aux(&m.to_aux()).unwrap(), m);
    }

    #[test]
    fn rbf_dual_feasibility() {
        let blobs = gaussian_blobs(40, [[-1.0, 0.0], [1.0, 0.0]], 1.0, 8);
        let x = feature_rows(&blobs);
        let y = signed_labels(&blobs.labels);
        let tol = 1e-5;
        let m = rbf_svm_fit(&x, &y, 1.0, 0.5, tol).unwrap();
        assert!(m.converged);
        assert!(m.alphas().iter().all(|&a| a > 0.0 && a <= m.c));
        assert!(m.coef.iter().sum::<f64>().abs() < tol);
    }

    #[test]
    fn small_gamma_agrees_with_linear() {
        let train = gaussian_blobs(50, [[-2.0, -1.0], [2.0, 1.0]], 0.8, 9);
        let test = gaussian_blobs(100, [[-2.0, -1.0], [2.0, 1.0]], 0.8, 10);
        let (x, y) = (feature_rows(&train), signed_labels(&train.labels));
        let lin = linear_svm_fit(&x, &y, 1.0, 2000, 9).unwrap();
        let rbf = rbf_svm_fit(&x, &y, 10.0, 0.01, 1e-4).unwrap();
        let agree = (0..test.rows())
            .filter(|&r| svm_predict(&lin, test.row(r)).unwrap() == svm_predict(&rbf, test.row(r)).unwrap())
            .count();
        assert!(agree as f64 / test.rows() as f64 >= 0.95, "{agree}");
    }

    #[test]
    fn evaluation_counts() {
        let e = Evaluation::from_predictions(&[0, 1, 1, 0], vec![0, 1, 1, 0]).unwrap();
        assert_eq!(e.accuracy, 1.0);
        let e = Evaluation::from_predictions(&[0, 1, 1, 0], vec![1; 4]).unwrap();
        assert_eq!(e.accuracy, 0.5);
        assert_eq!(e.confusion, [[0, 2], [0, 2]]);
        let ids: Vec<String> = (0..4).map(|i| format!("img,{i}")).collect();
        assert_eq!(Evaluation::from_predictions_csv(&e.predictions_csv(&ids)).unwrap(), e);
        assert!(Evaluation::from_predictions(&[], vec![]).is_err());
    }

    #[test]
    fn feature_transform_round_trip() {
        let t = FeatureTransform {
            layer: 3,
            neurons: vec![4, 1],
            stats: vec![
                ColumnStats { mean: 1.0, std: 2.0, constant: false },
                ColumnStats { mean: 0.5, std: 0.0, constant: true },
            ],
        };
        assert_eq!(FeatureTransform::from_aux(&t.to_aux()).unwrap(), t);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn qda_posteriors_finite(seed in 0u64..1000, px in -1e3f64..1e3, py in -1e3f64..1e3) {
                let q = qda_fit(&gaussian_blobs(10, [[-1.0, 0.0], [1.0, 0.0]], 1.0, seed), 0.1).unwrap();
                let (_, post) = q.predict(&[px, py]).unwrap();
                prop_assert!(post.iter().all(|v| v.is_finite()));
            }

            #[test]
            fn qda_argmax_affine_invariant(seed in 0u64..1000, scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
                let train = gaussian_blobs(20, [[-1.0, 0.0], [1.0, 0.5]], 1.0, seed);
                let test = gaussian_blobs(20, [[-1.0, 0.0], [1.0, 0.5]], 1.0, seed + 1);
                let tf = |m: &FiringMatrix| FiringMatrix::new(m.rows(), 2, m.values().iter().map(|v| v * scale + shift).collect(), m.labels.clone()).unwrap();
                // λ = 0 keeps the problem exactly affine-equivariant.
                let a = evaluate_accuracy(&qda_fit(&train, 0.0).unwrap(), &test).unwrap();
                let b = evaluate_accuracy(&qda_fit(&tf(&train), 0.0).unwrap(), &tf(&test)).unwrap();
                prop_assert_eq!(a.predictions, b.predictions);
            }
        }
    }
}
