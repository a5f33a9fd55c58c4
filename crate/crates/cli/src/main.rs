//! `contiseg`: generate synthetic datasets, train continual segmentation
//! runs, sweep ablations and draw the result figures.

mod experiment;
mod plot;
mod report;
mod runner;

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use contiseg::data::Mode;
use contiseg::trainer::Ablation;
use log::info;

use experiment::{ExperimentSpec, Layout};
use runner::{parallel, RunMetrics};

#[derive(Parser)]
#[command(name = "contiseg", version, about = "Continual semantic segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train and test datasets of an experiment.
    Generate(Common),
    /// Train one ablation for every seed, resuming finished steps.
    Train(RunArgs),
    /// Re-score stored checkpoints on the test split.
    Eval(RunArgs),
    /// Train every ablation of the sweep for every seed.
    Ablate(AblateArgs),
    /// Draw figures from the metrics of an experiment directory.
    Plot {
        /// Experiment directory.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment spec (TOML). Defaults to `<out>/experiment.toml`.
    #[arg(long, conflicts_with = "preset")]
    spec: Option<PathBuf>,
    /// Built-in experiment instead of a spec file (`biased-context`).
    #[arg(long)]
    preset: Option<String>,
    /// Experiment directory.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated seeds, overriding the spec.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Protocol such as `15-1`, overriding the spec.
    #[arg(long)]
    protocol: Option<String>,
    /// `disjoint` or `overlapped`, overriding the spec.
    #[arg(long)]
    mode: Option<Mode>,
    /// Seeds trained in parallel.
    #[arg(long, env = "CONTISEG_WORKERS", default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Ablation variant, overriding the spec's `train.ablation`.
    #[arg(long)]
    ablation: Option<Ablation>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated variants, overriding the spec's `ablations`.
    #[arg(long, value_delimiter = ',')]
    ablation: Option<Vec<Ablation>>,
}

impl Common {
    fn resolve(&self) -> Result<(ExperimentSpec, Layout)> {
        let layout = Layout::new(&self.out);
        let mut spec = match (&self.preset, &self.spec) {
            (Some(name), _) => ExperimentSpec::preset(name)?,
            (None, Some(path)) => ExperimentSpec::load(path)?,
            (None, None) => {
                let path = layout.spec_file();
                if !path.exists() {
                    bail!("no --spec or --preset given and {} does not exist", path.display());
                }
                ExperimentSpec::load(&path)?
            }
        };
        if let Some(seeds) = &self.seeds {
            spec.seeds = seeds.clone();
        }
        if let Some(p) = &self.protocol {
            spec.train.protocol = p.clone();
        }
        if let Some(m) = self.mode {
            spec.train.mode = m;
        }
        spec.validate().context("invalid experiment")?;
        Ok((spec, layout))
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(c) => {
            let (spec, layout) = c.resolve()?;
            let (n_train, n_test) = experiment::generate(&spec, &layout)?;
            println!("wrote {n_train} train and {n_test} test images to {}", layout.root.join("datasets").display());
        }
        Command::Train(a) => {
            let (mut spec, layout) = a.common.resolve()?;
            if let Some(abl) = a.ablation {
                spec.train.ablation = abl;
            }
            let runs = sweep(&spec, &layout, &[spec.train.ablation], a.common.workers, false)?;
            finish(&layout, &runs)?;
        }
        Command::Eval(a) => {
            let (mut spec, layout) = a.common.resolve()?;
            if let Some(abl) = a.ablation {
                spec.train.ablation = abl;
            }
            let runs = sweep(&spec, &layout, &[spec.train.ablation], a.common.workers, true)?;
            finish(&layout, &runs)?;
        }
        Command::Ablate(a) => {
            let (spec, layout) = a.common.resolve()?;
            let ablations = a.ablation.clone().unwrap_or_else(|| spec.ablation_list());
            let runs = sweep(&spec, &layout, &ablations, a.common.workers, false)?;
            finish(&layout, &runs)?;
        }
        Command::Plot { out } => {
            let layout = Layout::new(out);
            for p in plot::plot_all(&layout.metrics_dir(), &layout.figures_dir())? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

/// Runs (or, with `eval_only`, re-scores) every `(seed, ablation)` pair. One
/// job per seed so the shared first step is trained once.
fn sweep(spec: &ExperimentSpec, layout: &Layout, ablations: &[Ablation], workers: usize, eval_only: bool) -> Result<Vec<RunMetrics>> {
    layout.create()?;
    spec.save(&layout.spec_file())?;
    let (train, test) = experiment::datasets(spec, layout)?;
    info!("{} train / {} test images, seeds {:?}", train.len(), test.len(), spec.seeds);
    let results = parallel(spec.seeds.clone(), workers, |seed| {
        ablations
            .iter()
            .map(|&ablation| {
                info!("{} seed {seed}", ablation.name());
                if eval_only {
                    runner::evaluate_run(spec, layout, &test, seed, ablation)
                } else {
                    runner::run_one(spec, layout, &train, &test, seed, ablation)
                }
            })
            .collect::<Result<Vec<_>>>()
    });
    let mut runs = Vec::new();
    for r in results {
        runs.extend(r?);
    }
    Ok(runs)
}

fn finish(layout: &Layout, runs: &[RunMetrics]) -> Result<()> {
    // Summaries cover every run recorded in the directory, not only this call's.
    let all = report::collect_runs(&layout.metrics_dir())?;
    let summary = report::summarize(&all)?;
    report::write_summary(&summary, &layout.metrics_dir())?;
    println!("{:<12} {:>9} {:>12} {:>9}", "ablation", "initial", "incremented", "all");
    for row in &summary.rows {
        let cell = |g: report::Group| row.groups.get(&g).map_or("-".to_string(), |s| format!("{:.4}", s.mean));
        println!(
            "{:<12} {:>9} {:>12} {:>9}",
            row.ablation.name(),
            cell(report::Group::Initial),
            cell(report::Group::Incremented),
            cell(report::Group::All)
        );
    }
    info!("{} runs finished, metrics in {}", runs.len(), layout.metrics_dir().display());
    Ok(())
}
