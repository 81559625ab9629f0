//! Fisher-LDA analysis of last-conv firing scores.
//!
//! A neuron's firing score on an image is the spatial maximum of its post-ReLU
//! feature map. Stacking one firing vector per image gives the firing matrix.
//! From it we build the within-class and between-class scatter matrices
//!
//! ```text
//! S_w = Σ_i Σ_{x ∈ class i} (x − μ_i)(x − μ_i)ᵀ
//! S_b = Σ_i N_i (μ_i − μ)(μ_i − μ)ᵀ
//! ```
//!
//! and score each neuron by its intra-class correlation
//! `ICC = s²(b) / (s²(b) + s²(w))`, where `s²(w)` and `s²(b)` are the
//! neuron's diagonal entries of `S_w` and `S_b`. When `S_w` is (nearly)
//! diagonal, keeping the top-ICC neurons is the same as keeping the leading
//! full-LDA directions, which [`full_lda_directions`] lets you check.

use crate::dataset::LabeledImage;
use crate::error::{Error, Result};
use crate::linalg::{cholesky, jacobi_eigen, solve_lower, solve_lower_transpose, Mat};
use crate::model::{forward_pass, Layer, ModelDescriptor};

/// Columns with a population standard deviation below this are treated as constant.
pub const CONSTANT_STD: f64 = 1e-8;
/// Largest dimension accepted by the generalized eigensolver.
pub const MAX_LDA_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColumnStats {
    pub mean: f64,
    pub std: f64,
    pub constant: bool,
}

/// Images × neurons firing scores with per-row class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FiringMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    pub labels: Vec<usize>,
    /// Set once the matrix has been standardized.
    pub standardization: Option<Vec<ColumnStats>>,
}

impl FiringMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if values.len() != rows * cols || labels.len() != rows {
            return Err(Error::Shape(format!(
                "{rows}x{cols} firing matrix from {} values and {} labels",
                values.len(),
                labels.len()
            )));
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("NaN in firing matrix".into()));
        }
        Ok(Self {
            rows,
            cols,
            values,
            labels,
            standardization: None,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    /// Keeps only the listed neuron columns, in the given order.
    pub fn select_columns(&self, columns: &[usize]) -> Result<Self> {
        if let Some(&bad) = columns.iter().find(|&&c| c >= self.cols) {
            return Err(Error::InvalidArgument(format!("column {bad} out of range for {}", self.cols)));
        }
        let values = (0..self.rows)
            .flat_map(|r| columns.iter().map(move |&c| (r, c)))
            .map(|(r, c)| self.get(r, c))
            .collect();
        Ok(Self {
            rows: self.rows,
            cols: columns.len(),
            values,
            labels: self.labels.clone(),
            standardization: self
                .standardization
                .as_ref()
                .map(|s| columns.iter().map(|&c| s[c]).collect()),
        })
    }

    /// Applies previously fitted column statistics (e.g. training-set ones to a test set).
    pub fn apply_standardization(&self, stats: &[ColumnStats]) -> Result<Self> {
        if stats.len() != self.cols {
            return Err(Error::Shape(format!("{} column stats for {} columns", stats.len(), self.cols)));
        }
        let values = self
            .values
            .chunks_exact(self.cols)
            .flat_map(|row| row.iter().zip(stats).map(|(&v, s)| scale_value(v, s)))
            .collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            values,
            labels: self.labels.clone(),
            standardization: Some(stats.to_vec()),
        })
    }

    fn class_rows(&self, class: usize) -> impl Iterator<Item = &[f64]> {
        (0..self.rows).filter(move |&r| self.labels[r] == class).map(|r| self.row(r))
    }
}

fn scale_value(v: f64, s: &ColumnStats) -> f64 {
    if s.constant {
        v - s.mean
    } else {
        (v - s.mean) / s.std
    }
}

/// Firing scores of conv layer `layer` (which must feed a ReLU) on every image.
pub fn extract_firing_matrix(
    model: &ModelDescriptor,
    images: &[LabeledImage],
    layer: usize,
) -> Result<FiringMatrix> {
    match (model.layers.get(layer), model.layers.get(layer + 1)) {
        (Some(Layer::Conv(_)), Some(Layer::Relu)) => {}
        (Some(Layer::Conv(_)), _) => {
            return Err(Error::InvalidArgument(format!("conv layer {layer} is not followed by a ReLU")))
        }
        _ => return Err(Error::InvalidArgument(format!("layer {layer} is not a conv layer"))),
    }
    let cols = model.output_shapes()?[layer][0];
    let mut values = Vec::with_capacity(images.len() * cols);
    for s in images {
        let rec = forward_pass(model, &s.image)?;
        let act = &rec.outputs[layer + 1];
        for c in 0..cols {
            values.push(act.channel(c).iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64);
        }
    }
    FiringMatrix::new(images.len(), cols, values, images.iter().map(|s| s.label).collect())
}

/// Fitted statistics: mean and population standard deviation of every column.
pub fn column_stats(x: &FiringMatrix) -> Result<Vec<ColumnStats>> {
    if x.rows < 2 {
        return Err(Error::Empty(format!("standardization needs 2 rows, got {}", x.rows)));
    }
    let n = x.rows as f64;
    Ok((0..x.cols)
        .map(|c| {
            let mean = (0..x.rows).map(|r| x.get(r, c)).sum::<f64>() / n;
            let var = (0..x.rows).map(|r| (x.get(r, c) - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            ColumnStats {
                mean,
                std,
                constant: std < CONSTANT_STD,
            }
        })
        .collect())
}

/// Per-column z-score. Constant columns are centered but left unscaled.
pub fn standardize(x: &FiringMatrix) -> Result<FiringMatrix> {
    x.apply_standardization(&column_stats(x)?)
}

/// Within/between-class scatter of a two-class firing matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ScatterPair {
    pub within: Mat,
    pub between: Mat,
    pub class_means: [Vec<f64>; 2],
    pub mean: Vec<f64>,
    pub counts: [usize; 2],
}

pub fn scatter_matrices(x: &FiringMatrix) -> Result<ScatterPair> {
    let d = x.cols;
    let mut counts = [0usize; 2];
    for &l in &x.labels {
        if l > 1 {
            return Err(Error::InvalidArgument(format!("label {l} is not a binary class")));
        }
        counts[l] += 1;
    }
    for (class, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(Error::ClassAbsent(class));
        }
    }
    let mean_of = |rows: &mut dyn Iterator<Item = &[f64]>, n: usize| {
        let mut m = vec![0.0; d];
        for row in rows {
            for (a, v) in m.iter_mut().zip(row) {
                *a += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= n as f64);
        m
    };
    let class_means = [
        mean_of(&mut x.class_rows(0), counts[0]),
        mean_of(&mut x.class_rows(1), counts[1]),
    ];
    let mean = mean_of(&mut (0..x.rows).map(|r| x.row(r)), x.rows);

    let mut within = Mat::zeros(d, d);
    for class in 0..2 {
        let mu = &class_means[class];
        for row in x.class_rows(class) {
            let dev: Vec<f64> = row.iter().zip(mu).map(|(a, b)| a - b).collect();
            add_outer(&mut within, &dev, 1.0);
        }
    }
    let mut between = Mat::zeros(d, d);
    for class in 0..2 {
        let dev: Vec<f64> = class_means[class].iter().zip(&mean).map(|(a, b)| a - b).collect();
        add_outer(&mut between, &dev, counts[class] as f64);
    }
    Ok(ScatterPair {
        within,
        between,
        class_means,
        mean,
        counts,
    })
}

fn add_outer(m: &mut Mat, v: &[f64], scale: f64) {
    for (i, &a) in v.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        for (j, &b) in v.iter().enumerate() {
            m[(i, j)] += scale * a * b;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeuronScore {
    pub neuron: usize,
    pub s2w: f64,
    pub s2b: f64,
    pub icc: f64,
}

/// ICC per neuron from the scatter diagonals; `0` when both variances vanish.
pub fn icc_scores(s: &ScatterPair) -> Vec<NeuronScore> {
    s.within
        .diag()
        .into_iter()
        .zip(s.between.diag())
        .enumerate()
        .map(|(neuron, (s2w, s2b))| NeuronScore {
            neuron,
            s2w,
            s2b,
            icc: icc(s2b, s2w),
        })
        .collect()
}

pub fn icc(s2b: f64, s2w: f64) -> f64 {
    let total = s2b + s2w;
    if total > 0.0 {
        (s2b / total).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankCriterion {
    Icc,
    /// Total variance `s²(w) + s²(b)`, the unsupervised baseline.
    TotalVariance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuronRanking {
    pub criterion: RankCriterion,
    /// Indexed by neuron.
    pub scores: Vec<NeuronScore>,
    /// Ranking key per neuron (ICC or total variance).
    pub keys: Vec<f64>,
    /// Neurons from best to worst.
    pub order: Vec<usize>,
    /// The top-k neurons, ascending by index.
    pub selected: Vec<usize>,
}

impl NeuronRanking {
    /// 1-based rank of every neuron.
    pub fn ranks(&self) -> Vec<usize> {
        let mut r = vec![0; self.order.len()];
        for (pos, &n) in self.order.iter().enumerate() {
            r[n] = pos + 1;
        }
        r
    }

    /// CSV with columns `neuron,s2w,s2b,icc,rank`.
    pub fn to_csv(&self) -> String {
        let ranks = self.ranks();
        let mut s = String::from("neuron,s2w,s2b,icc,rank\n");
        for sc in &self.scores {
            s.push_str(&format!("{},{},{},{},{}\n", sc.neuron, sc.s2w, sc.s2b, sc.icc, ranks[sc.neuron]));
        }
        s
    }

    /// Reads a ranking CSV back; `k` picks the selected set from the stored ranks.
    pub fn from_csv(text: &str, k: usize) -> Result<Self> {
        let mut scores = Vec::new();
        let mut ranks = Vec::new();
        for (n, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Format(format!("ranking line {}: {line:?}", n + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            scores.push(NeuronScore {
                neuron: f[0].parse().map_err(|_| bad())?,
                s2w: f[1].parse().map_err(|_| bad())?,
                s2b: f[2].parse().map_err(|_| bad())?,
                icc: f[3].parse().map_err(|_| bad())?,
            });
            ranks.push(f[4].parse::<usize>().map_err(|_| bad())?);
        }
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by_key(|&i| ranks[i]);
        let order: Vec<usize> = order.into_iter().map(|i| scores[i].neuron).collect();
        if k == 0 || k > order.len() {
            return Err(Error::InvalidArgument(format!("k = {k} out of range 1..={}", order.len())));
        }
        let mut selected = order[..k].to_vec();
        selected.sort_unstable();
        Ok(Self {
            criterion: RankCriterion::Icc,
            keys: scores.iter().map(|s| s.icc).collect(),
            scores,
            order,
            selected,
        })
    }
}

fn rank_by(scores: &[NeuronScore], keys: Vec<f64>, k: usize, criterion: RankCriterion) -> Result<NeuronRanking> {
    let d = scores.len();
    if k == 0 || k > d {
        return Err(Error::InvalidArgument(format!("k = {k} out of range 1..={d}")));
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        keys[b]
            .total_cmp(&keys[a])
            .then(scores[b].s2b.total_cmp(&scores[a].s2b))
            .then(a.cmp(&b))
    });
    let mut selected = order[..k].to_vec();
    selected.sort_unstable();
    Ok(NeuronRanking {
        criterion,
        scores: scores.to_vec(),
        keys,
        order,
        selected,
    })
}

/// Descending ICC; ties go to the larger `s²(b)`, then the smaller index.
pub fn rank_and_select(scores: &[NeuronScore], k: usize) -> Result<NeuronRanking> {
    rank_by(scores, scores.iter().map(|s| s.icc).collect(), k, RankCriterion::Icc)
}

/// Ranks neurons by total variance alone, ignoring the labels' structure.
pub fn variance_ranking_baseline(x: &FiringMatrix, k: usize) -> Result<NeuronRanking> {
    let s = scatter_matrices(x)?;
    let scores = icc_scores(&s);
    let keys = (0..x.cols)
        .map(|c| (0..x.rows).map(|r| (x.get(r, c) - s.mean[c]).powi(2)).sum())
        .collect();
    rank_by(&scores, keys, k, RankCriterion::TotalVariance)
}

/// Diagonal share of the absolute mass of a matrix; `1` for an all-zero matrix.
pub fn diagonal_dominance(m: &Mat) -> Result<f64> {
    if !m.is_square() {
        return Err(Error::Shape(format!("{}x{} matrix is not square", m.rows(), m.cols())));
    }
    let total: f64 = m.data().iter().map(|v| v.abs()).sum();
    if total == 0.0 {
        return Ok(1.0);
    }
    Ok(m.diag().iter().map(|v| v.abs()).sum::<f64>() / total)
}

/// Leading generalized eigenpairs of `S_b v = λ (S_w + εI) v`.
#[derive(Debug, Clone, PartialEq)]
pub struct LdaDirections {
    /// Descending.
    pub values: Vec<f64>,
    /// `d × m`, columns unit-norm in the `(S_w + εI)` metric.
    pub vectors: Mat,
    pub epsilon: f64,
}

pub fn full_lda_directions(s: &ScatterPair, m: usize) -> Result<LdaDirections> {
    let d = s.within.rows();
    if d > MAX_LDA_DIM {
        return Err(Error::InvalidArgument(format!("dimension {d} exceeds the eigensolver limit {MAX_LDA_DIM}")));
    }
    if m == 0 || m > d {
        return Err(Error::InvalidArgument(format!("m = {m} out of range 1..={d}")));
    }
    let trace = s.within.trace();
    let epsilon = if trace > 0.0 { 1e-6 * trace / d as f64 } else { 1e-6 };
    let regularized = s.within.add(&Mat::from_diag(&vec![epsilon; d]));
    let l = cholesky(&regularized)?;

    // C = L⁻¹ S_b L⁻ᵀ, built column by column.
    let mut half = Mat::zeros(d, d); // L⁻¹ S_b
    for c in 0..d {
        let col = solve_lower(&l, &s.between.column(c));
        for r in 0..d {
            half[(r, c)] = col[r];
        }
    }
    let mut reduced = Mat::zeros(d, d);
    for r in 0..d {
        let row = solve_lower(&l, half.row(r));
        for c in 0..d {
            reduced[(r, c)] = row[c];
        }
    }
    // Symmetrize away rounding.
    let reduced = {
        let t = reduced.transpose();
        let mut sym = reduced.add(&t);
        for v in 0..d * d {
            let (r, c) = (v / d, v % d);
            sym[(r, c)] *= 0.5;
        }
        sym
    };
    let eig = jacobi_eigen(&reduced)?;
    let mut vectors = Mat::zeros(d, m);
    for k in 0..m {
        let v = solve_lower_transpose(&l, &eig.vectors.column(k));
        for r in 0..d {
            vectors[(r, k)] = v[r];
        }
    }
    Ok(LdaDirections {
        values: eig.values[..m].to_vec(),
        vectors,
        epsilon,
    })
}
