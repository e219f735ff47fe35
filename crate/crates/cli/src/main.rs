use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hyperpop::harness::{self, ExperimentConfig, Figure, Mode};
use hyperpop::heads::LikelihoodKind;
use hyperpop::io::DataFormat;
use hyperpop::Error;

/// Population-size estimation from under-sampled count data.
#[derive(Debug, Parser)]
#[command(name = "hyperpop", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw a synthetic count matrix with labels and ground truth.
    Simulate(Common),
    /// Exhaustive two-category NLL grid.
    Landscape(Common),
    /// Direct gradient-descent fit, optionally over a scaling sweep.
    FitMle(Common),
    /// Train the latent model once per selected likelihood.
    FitVae(Common),
    /// Cluster latent means and score estimates of trained models.
    Evaluate(Common),
    /// Likelihood comparison over configured scenarios and seeds.
    Benchmark(Common),
    /// Write plot-ready CSVs from an existing run directory.
    EmitFigure {
        /// landscape, scaling, trajectory or histograms
        figure: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// JSON experiment config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Restrict to one likelihood: hg, mn or poisson.
    #[arg(long)]
    likelihood: Option<String>,
    /// dense-csv or sparse-triplet
    #[arg(long)]
    format: Option<String>,
    /// Count matrix to use instead of simulating.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Model checkpoint for evaluate.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> hyperpop::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.set_seed(s);
        }
        if let Some(o) = &self.out {
            cfg.out = Some(o.clone());
        }
        if let Some(l) = &self.likelihood {
            let kind: LikelihoodKind = l.parse()?;
            cfg.likelihoods = vec![kind];
        }
        if let Some(f) = &self.format {
            cfg.format = f.parse::<DataFormat>()?;
        }
        if let Some(i) = &self.input {
            cfg.input = Some(i.clone());
        }
        if let Some(c) = &self.checkpoint {
            cfg.checkpoint = Some(c.clone());
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> hyperpop::Result<Vec<PathBuf>> {
    let (mode, common) = match &cli.command {
        Command::EmitFigure { figure, out } => {
            let fig: Figure = figure.parse()?;
            return harness::emit_figure_data(out, fig);
        }
        Command::Simulate(c) => (Mode::Simulate, c),
        Command::Landscape(c) => (Mode::Landscape, c),
        Command::FitMle(c) => (Mode::FitMle, c),
        Command::FitVae(c) => (Mode::FitVae, c),
        Command::Evaluate(c) => (Mode::Evaluate, c),
        Command::Benchmark(c) => (Mode::Benchmark, c),
    };
    let cfg = common.resolve()?;
    if let Some(m) = cfg.mode {
        if m != mode {
            return Err(Error::Validation(format!(
                "config is for `{}` but `{}` was requested",
                m.name(),
                mode.name()
            )));
        }
    }
    let path = match mode {
        Mode::Simulate => harness::run_simulate(&cfg)?,
        Mode::Landscape => harness::run_landscape(&cfg)?,
        Mode::FitMle => harness::run_fit_mle(&cfg)?,
        Mode::FitVae => harness::run_fit_vae(&cfg)?,
        Mode::Evaluate => harness::run_evaluate(&cfg)?,
        Mode::Benchmark => harness::run_benchmark_mode(&cfg)?,
    };
    Ok(vec![path])
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
