//! Command-line driver: one subcommand per pipeline stage plus `pipeline`,
//! which runs them all and records a manifest that `replay` can rerun.

pub mod config;
pub mod pipeline;

use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};

use config::{ClassifierKind, Command, DatasetSource, Grid, RunConfig};
use pipeline::{
    load, run_pipeline, stage_analyze, stage_bench, stage_eval, stage_extract, stage_prune, stage_sweep, stage_train,
    Artifacts,
};

#[derive(Debug, Parser)]
#[command(name = "ldaprune", version, about = "Fisher-LDA guided filter pruning for small CNNs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Train the toy network.
    Train(Flags),
    /// Write the last-conv firing matrix of a model.
    Extract(Flags),
    /// Rank last-conv neurons by ICC and trace deconv dependencies.
    Analyze(Flags),
    /// Prune at --threshold, or at the plateau of --grid, then retrain.
    Prune(Flags),
    /// Accuracy change vs conv pruning rate for LDA pruning and magnitude masking.
    Sweep(Flags),
    /// Fit and score a classifier head.
    Eval(Flags),
    /// Time per-layer inference of --model against --pruned.
    Bench(Flags),
    /// Train, analyze, prune, sweep, evaluate every head, and bench.
    Pipeline(Flags),
    /// Rerun a recorded manifest into a new output directory.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Args)]
pub struct Flags {
    /// `synthetic` or `dir:PATH` (PATH/0 and PATH/1 hold P5 PGM files).
    #[arg(long, default_value = "synthetic")]
    pub dataset: DatasetSource,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Synthetic images per class.
    #[arg(long, default_value_t = 200)]
    pub per_class: usize,
    /// Last-conv neurons to keep.
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Threshold grid `lo:hi:step`.
    #[arg(long, default_value = "0:0.9:0.1")]
    pub grid: Grid,
    #[arg(long, default_value_t = ldaprune::prune::DEFAULT_EPS_ACC)]
    pub eps_acc: f64,
    #[arg(long, value_enum, default_value = "fc")]
    pub classifier: ClassifierKind,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f32,
    #[arg(long, default_value_t = 20)]
    pub retrain_epochs: usize,
    #[arg(long, default_value_t = ldaprune::prune::SEARCH_RETRAIN_EPOCHS)]
    pub search_epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    pub retrain_lr: f32,
    #[arg(long, default_value_t = 30)]
    pub bench_runs: usize,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub pruned: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

impl Flags {
    pub fn into_config(self, command: Command) -> RunConfig {
        RunConfig {
            dataset: self.dataset,
            seed: self.seed,
            per_class: self.per_class,
            k: self.k,
            threshold: self.threshold,
            grid: self.grid,
            eps_acc: self.eps_acc,
            classifier: self.classifier,
            epochs: self.epochs,
            lr: self.lr,
            retrain_epochs: self.retrain_epochs,
            search_epochs: self.search_epochs,
            retrain_lr: self.retrain_lr,
            bench_runs: self.bench_runs,
            model: self.model,
            pruned: self.pruned,
            ..RunConfig::new(command, self.out)
        }
    }
}

pub fn config_from_cli(cli: Cli) -> Result<RunConfig> {
    Ok(match cli.command {
        Cmd::Train(f) => f.into_config(Command::Train),
        Cmd::Extract(f) => f.into_config(Command::Extract),
        Cmd::Analyze(f) => f.into_config(Command::Analyze),
        Cmd::Prune(f) => f.into_config(Command::Prune),
        Cmd::Sweep(f) => f.into_config(Command::Sweep),
        Cmd::Eval(f) => f.into_config(Command::Eval),
        Cmd::Bench(f) => f.into_config(Command::Bench),
        Cmd::Pipeline(f) => f.into_config(Command::Pipeline),
        Cmd::Replay { manifest, out } => RunConfig {
            out,
            ..RunConfig::from_manifest(&manifest)?
        },
    })
}

/// Runs one configured command, writing its artifacts under `config.out`.
pub fn execute(config: &RunConfig) -> Result<()> {
    config.validate()?;
    if config.command == Command::Pipeline {
        run_pipeline(config)?;
        return Ok(());
    }
    let data = config.load_dataset()?;
    let mut art = Artifacts::create(&config.out)?;
    match config.command {
        Command::Train => {
            stage_train(config, &data, &mut art)?;
        }
        Command::Extract => {
            stage_extract(&load(&config.model, "model")?, &data, &mut art)?;
        }
        Command::Analyze => {
            stage_analyze(config, &load(&config.model, "model")?, &data, &mut art)?;
        }
        Command::Prune => {
            let model = load(&config.model, "model")?;
            let analysis = stage_analyze(config, &model, &data, &mut art)?;
            stage_prune(config, &model, &analysis, &data, &mut art)?;
        }
        Command::Sweep => {
            let model = load(&config.model, "model")?;
            let base = ldaprune::train::accuracy(&model, &data.test)?;
            let analysis = stage_analyze(config, &model, &data, &mut art)?;
            let mut search_cfg = config.clone();
            search_cfg.threshold = None;
            let outcome = stage_prune(&search_cfg, &model, &analysis, &data, &mut art)?;
            let Some(search) = outcome.search else { bail!("sweep needs a threshold grid") };
            stage_sweep(config, &model, base, &search, &data, &mut art)?;
        }
        Command::Eval => {
            art.section("eval");
            stage_eval(config, &load(&config.model, "model")?, &data, config.classifier, &mut art)?;
        }
        Command::Bench => {
            let a = load(&config.model, "model")?;
            let b = load(&config.pruned, "pruned")?;
            let s = stage_bench(config, &a, &b, &data, &mut art)?;
            println!("speedup {:.3} ({:.4} ms -> {:.4} ms)", s.speedup(), s.original_ms, s.pruned_ms);
        }
        Command::Pipeline => unreachable!(),
    }
    art.finish(config)
}

/// One-line JSON description of a failure, for stderr.
pub fn error_json(err: &anyhow::Error) -> String {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<ldaprune::Error>())
        .map_or("usage", |e| e.kind());
    let message = err.chain().map(ToString::to_string).collect::<Vec<_>>().join(": ");
    serde_json::json!({ "error": { "kind": kind, "message": message } }).to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_line_names_library_kind() {
        let e = anyhow::Error::new(ldaprune::Error::BadMagic).context("loading m.ldap");
        let v: serde_json::Value = serde_json::from_str(&error_json(&e)).unwrap();
        assert_eq!(v["error"]["kind"], "bad_magic");
        assert!(v["error"]["message"].as_str().unwrap().starts_with("loading m.ldap"));
        let e = anyhow::anyhow!("bench needs --pruned");
        assert!(error_json(&e).contains("\"usage\""));
    }

    #[test]
    fn flags_parse_into_config() {
        let cli = Cli::try_parse_from([
            "ldaprune", "prune", "--model", "m.ldap", "--k", "3", "--grid", "0:0.5:0.25", "--out", "o",
        ])
        .unwrap();
        let c = config_from_cli(cli).unwrap();
        assert_eq!(c.command, Command::Prune);
        assert_eq!(c.k, 3);
        assert_eq!(c.grid.values(), vec![0.0, 0.25, 0.5]);
        assert!(Cli::try_parse_from(["ldaprune", "eval", "--classifier", "knn", "--out", "o"]).is_err());
    }
}
