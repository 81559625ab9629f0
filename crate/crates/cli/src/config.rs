//! Run configuration: every flag of a command, serializable as a manifest.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use ldaprune::arch::TOY_SIZE;
use ldaprune::dataset::{generate_synthetic, load_pgm_dir, DatasetSplit};
use ldaprune::train::TrainConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic,
    Dir(PathBuf),
}

impl FromStr for DatasetSource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "synthetic" => Ok(Self::Synthetic),
            _ => match s.strip_prefix("dir:") {
                Some(p) if !p.is_empty() => Ok(Self::Dir(PathBuf::from(p))),
                _ => Err(format!("dataset must be `synthetic` or `dir:PATH`, got {s:?}")),
            },
        }
    }
}

impl fmt::Display for DatasetSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Synthetic => f.write_str("synthetic"),
            Self::Dir(p) => write!(f, "dir:{}", p.display()),
        }
    }
}

/// Inclusive `lo:hi:step` threshold grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Grid {
    pub fn values(&self) -> Vec<f64> {
        let n = ((self.hi - self.lo) / self.step + 1e-9).floor() as usize;
        // Rounded so 0.1 steps print as 0.3, not 0.30000000000000004.
        (0..=n).map(|i| ((self.lo + i as f64 * self.step) * 1e9).round() / 1e9).collect()
    }
}

impl FromStr for Grid {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || format!("grid must be lo:hi:step, got {s:?}");
        let [lo, hi, step] = parts[..] else { return Err(bad()) };
        let g = Grid {
            lo: lo.parse().map_err(|_| bad())?,
            hi: hi.parse().map_err(|_| bad())?,
            step: step.parse().map_err(|_| bad())?,
        };
        if !(g.step > 0.0) || !(g.lo <= g.hi) || !(0.0..=1.0).contains(&g.lo) || !(0.0..=1.0).contains(&g.hi) {
            return Err(format!("grid {s:?} needs 0 <= lo <= hi <= 1 and step > 0"));
        }
        Ok(g)
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.lo, self.hi, self.step)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    Fc,
    Qda,
    Svml,
    Svmr,
}

impl ClassifierKind {
    pub const ALL: [ClassifierKind; 4] = [Self::Fc, Self::Qda, Self::Svml, Self::Svmr];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Fc => "fc",
            Self::Qda => "qda",
            Self::Svml => "svml",
            Self::Svmr => "svmr",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Train,
    Extract,
    Analyze,
    Prune,
    Sweep,
    Eval,
    Bench,
    Pipeline,
}

/// Every setting a command reads. Unused fields keep their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: Command,
    pub dataset: DatasetSource,
    pub seed: u64,
    /// Synthetic images per class.
    pub per_class: usize,
    pub k: usize,
    pub threshold: Option<f64>,
    pub grid: Grid,
    pub eps_acc: f64,
    pub classifier: ClassifierKind,
    pub epochs: usize,
    pub lr: f32,
    pub retrain_epochs: usize,
    pub search_epochs: usize,
    pub retrain_lr: f32,
    pub qda_lambda: f64,
    pub svm_c: f64,
    /// `None` means `1 / k`.
    pub svm_gamma: Option<f64>,
    pub svm_epochs: usize,
    pub bench_runs: usize,
    pub bench_images: usize,
    pub model: Option<PathBuf>,
    pub pruned: Option<PathBuf>,
    /// Not recorded, so a manifest replays into any directory.
    #[serde(skip)]
    pub out: PathBuf,
}

impl RunConfig {
    pub fn new(command: Command, out: impl Into<PathBuf>) -> Self {
        Self {
            command,
            dataset: DatasetSource::Synthetic,
            seed: 7,
            per_class: 200,
            k: 4,
            threshold: None,
            grid: Grid { lo: 0.0, hi: 0.9, step: 0.1 },
            eps_acc: ldaprune::prune::DEFAULT_EPS_ACC,
            classifier: ClassifierKind::Fc,
            epochs: 20,
            lr: 0.01,
            retrain_epochs: 20,
            search_epochs: ldaprune::prune::SEARCH_RETRAIN_EPOCHS,
            retrain_lr: 0.01,
            qda_lambda: 1e-3,
            svm_c: 1.0,
            svm_gamma: None,
            svm_epochs: 1000,
            bench_runs: 30,
            bench_images: 4,
            model: None,
            pruned: None,
            out: out.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            bail!("--k must be at least 1");
        }
        if let Some(t) = self.threshold {
            if !(0.0..=1.0).contains(&t) {
                bail!("--threshold {t} outside [0, 1]");
            }
        }
        if !(self.eps_acc > 0.0) {
            bail!("--eps-acc must be positive");
        }
        if self.epochs == 0 || self.retrain_epochs == 0 || self.search_epochs == 0 {
            bail!("epoch counts must be at least 1");
        }
        if self.bench_runs < ldaprune::bench::MIN_TIMED_RUNS {
            bail!("--bench-runs must be at least {}", ldaprune::bench::MIN_TIMED_RUNS);
        }
        let needs_model = matches!(
            self.command,
            Command::Extract | Command::Analyze | Command::Prune | Command::Sweep | Command::Eval | Command::Bench
        );
        if needs_model && self.model.is_none() {
            bail!("{:?} needs --model", self.command);
        }
        if self.command == Command::Bench && self.pruned.is_none() {
            bail!("bench needs --pruned");
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            epochs: self.epochs,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    pub fn retrain_config(&self, epochs: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: self.retrain_lr,
            epochs,
            seed: self.seed.wrapping_add(1),
            ..TrainConfig::default()
        }
    }

    pub fn load_dataset(&self) -> Result<DatasetSplit> {
        Ok(match &self.dataset {
            DatasetSource::Synthetic => generate_synthetic(self.per_class, TOY_SIZE, self.seed)?,
            DatasetSource::Dir(p) => load_pgm_dir(p, TOY_SIZE, TOY_SIZE)
                .with_context(|| format!("loading dataset from {}", p.display()))?,
        })
    }

    pub fn to_manifest(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn from_manifest(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_values() {
        let g: Grid = "0:0.9:0.1".parse().unwrap();
        assert_eq!(g.values(), vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]);
        assert_eq!("0.5:0.5:0.1".parse::<Grid>().unwrap().values(), vec![0.5]);
        assert!("0:1".parse::<Grid>().is_err());
        assert!("0:2:0.1".parse::<Grid>().is_err());
        assert!("0:1:0".parse::<Grid>().is_err());
    }

    #[test]
    fn dataset_source_parsing() {
        assert_eq!("synthetic".parse::<DatasetSource>().unwrap(), DatasetSource::Synthetic);
        assert_eq!("dir:/a/b".parse::<DatasetSource>().unwrap(), DatasetSource::Dir("/a/b".into()));
        assert!("dir:".parse::<DatasetSource>().is_err());
        assert!("lfw".parse::<DatasetSource>().is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let mut c = RunConfig::new(Command::Pipeline, "/tmp/x");
        c.threshold = Some(0.3);
        c.dataset = DatasetSource::Dir("/data".into());
        let text = c.to_manifest();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, RunConfig { out: PathBuf::new(), ..c });
    }

    #[test]
    fn missing_model_rejected() {
        assert!(RunConfig::new(Command::Analyze, "/tmp/x").validate().is_err());
        assert!(RunConfig::new(Command::Train, "/tmp/x").validate().is_ok());
    }
}
