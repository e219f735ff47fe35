//! Experiment orchestration: resolved configs, run directories, the
//! likelihood benchmark and plot-ready CSV exports.
//!
//! Run directory layout (every mode writes `config.resolved.json`):
//!
//! | mode        | artifacts                                                        |
//! |-------------|------------------------------------------------------------------|
//! | simulate    | `counts.csv` + `counts.csv.manifest.json`                        |
//! | landscape   | `landscape.json`                                                 |
//! | fit-mle     | `mle_runs.json`                                                  |
//! | fit-vae     | data copy, `model_<kind>.json`, `training_<kind>.csv`, `estimates_<kind>.csv`, `totals_<kind>.csv`, `vae_runs.json` |
//! | evaluate    | `metrics.json`, `metrics.csv`                                    |
//! | benchmark   | `benchmark.json`, `benchmark.csv`                                |
//!
//! `emit_figure_data` turns these into `figures/*.csv`:
//! landscape `n1,n2,nll`; scaling `trials,f_max,seed,error`; trajectory
//! `trials,f_max,seed,epoch,nll,error`; histograms
//! `observation,distribution_label,measured_total,estimated_total`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::CountMatrix;
use crate::error::{Error, Result};
use crate::heads::LikelihoodKind;
use crate::io::{ingest_counts, write_counts, write_manifest, DataFormat, Manifest};
use crate::metrics::{adjusted_rand_index, kmeans, mae, manhattan_error, mpe, MetricReport};
use crate::mle::{fit_single, nll_landscape, OptimizerConfig};
use crate::simulate::{rng_stream, simulate_dataset, SimulationConfig};
use crate::vae::{
    infer_estimates, latent_means, load_checkpoint, save_checkpoint, train_with_observer, Activation,
    NetworkParams, NetworkSpec, TrainConfig, TrainHistory,
};

const KMEANS_STREAM: u64 = 300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Simulate,
    FitMle,
    Landscape,
    FitVae,
    Evaluate,
    Benchmark,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Simulate => "simulate",
            Mode::FitMle => "fit-mle",
            Mode::Landscape => "landscape",
            Mode::FitVae => "fit-vae",
            Mode::Evaluate => "evaluate",
            Mode::Benchmark => "benchmark",
        }
    }
}

/// Architecture knobs; the input width and head come from the data and the
/// likelihood being trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub latent_dim: usize,
    pub hidden_activation: Activation,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let s = NetworkSpec::new(2, LikelihoodKind::Hypergeometric);
        Self {
            encoder_hidden: s.encoder_hidden,
            decoder_hidden: s.decoder_hidden,
            latent_dim: s.latent_dim,
            hidden_activation: s.hidden_activation,
        }
    }
}

impl NetworkConfig {
    pub fn spec(&self, input_dim: usize, kind: LikelihoodKind) -> NetworkSpec {
        NetworkSpec {
            input_dim,
            encoder_hidden: self.encoder_hidden.clone(),
            decoder_hidden: self.decoder_hidden.clone(),
            latent_dim: self.latent_dim,
            hidden_activation: self.hidden_activation,
            output_head: kind,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LandscapeConfig {
    /// Upper end of both grid axes; the lower end is the column maximum.
    pub grid_max: u64,
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        Self { grid_max: 120 }
    }
}

/// Sweep for `fit-mle`: every trials x f_max x seed combination. Empty
/// lists mean a single fit of the configured dataset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalingConfig {
    pub trials: Vec<usize>,
    pub f_max: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub simulation: SimulationConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub mode: Option<Mode>,
    /// Count matrix to read instead of simulating.
    pub input: Option<PathBuf>,
    pub format: DataFormat,
    /// Run directory.
    pub out: Option<PathBuf>,
    /// Checkpoint for `evaluate` when not taken from the run directory.
    pub checkpoint: Option<PathBuf>,
    pub simulation: SimulationConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub optimizer: OptimizerConfig,
    pub seeds: Vec<u64>,
    pub likelihoods: Vec<LikelihoodKind>,
    pub landscape: LandscapeConfig,
    pub scaling: ScalingConfig,
    pub scenarios: Vec<Scenario>,
    pub kmeans_restarts: usize,
    /// Epoch stride of recorded trajectories.
    pub log_every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: None,
            input: None,
            format: DataFormat::DenseCsv,
            out: None,
            checkpoint: None,
            simulation: SimulationConfig::single(vec![70, 30], 10_000, 0.4, 0),
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            optimizer: OptimizerConfig::default(),
            seeds: vec![0],
            likelihoods: LikelihoodKind::ALL.to_vec(),
            landscape: LandscapeConfig::default(),
            scaling: ScalingConfig::default(),
            scenarios: Vec::new(),
            kmeans_restarts: 10,
            log_every: 10,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Validation(format!("config: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Point every seeded component at `seed`.
    pub fn set_seed(&mut self, seed: u64) {
        self.seeds = vec![seed];
        self.simulation.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self, mode: Mode) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Validation("seeds must not be empty".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Validation("log_every must be at least 1".into()));
        }
        if let Some(p) = &self.input {
            if !p.exists() {
                return Err(Error::Validation(format!("input {} does not exist", p.display())));
            }
        }
        if let Some(p) = &self.checkpoint {
            if !p.exists() {
                return Err(Error::Validation(format!("checkpoint {} does not exist", p.display())));
            }
        }
        match mode {
            Mode::FitVae | Mode::Benchmark if self.likelihoods.is_empty() => {
                return Err(Error::Validation("no likelihood kinds selected".into()));
            }
            Mode::Benchmark if self.scenarios.is_empty() => {
                return Err(Error::Validation("benchmark needs at least one scenario".into()));
            }
            Mode::Evaluate if self.out.is_none() && self.checkpoint.is_none() => {
                return Err(Error::Validation("evaluate needs a run directory or a checkpoint".into()));
            }
            _ => {}
        }
        if self.input.is_none() && mode != Mode::Benchmark && mode != Mode::Evaluate {
            self.simulation.validate()?;
        }
        for s in &self.scenarios {
            s.simulation.validate()?;
        }
        self.train.validate()?;
        self.optimizer.validate()
    }

    fn out_dir(&self) -> Result<PathBuf> {
        self.out
            .clone()
            .ok_or_else(|| Error::Validation("an output directory is required (--out)".into()))
    }

    /// Create the run directory and record the resolved config in it.
    pub fn prepare_run(&self, mode: Mode) -> Result<PathBuf> {
        self.validate(mode)?;
        let dir = self.out_dir()?;
        fs::create_dir_all(&dir)?;
        let mut resolved = self.clone();
        resolved.mode = Some(mode);
        fs::write(dir.join("config.resolved.json"), resolved.to_json()?)?;
        Ok(dir)
    }
}

/// Observation matrix with whatever labels and truth are known.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedData {
    pub counts: CountMatrix,
    pub manifest: Manifest,
}

impl LoadedData {
    pub fn truth_per_row(&self) -> Option<Vec<Vec<f64>>> {
        self.manifest.truth_per_row(self.counts.n_rows())
    }
}

fn simulate_for(sim: &SimulationConfig, seed: u64) -> Result<LoadedData> {
    let mut sim = sim.clone();
    sim.seed = seed;
    let ds = simulate_dataset(&sim)?;
    Ok(LoadedData {
        counts: ds.counts,
        manifest: Manifest {
            labels: Some(ds.labels),
            ground_truth: Some(ds.ground_truth),
        },
    })
}

/// The configured input file, or a simulated dataset for `seed`.
pub fn load_data(cfg: &ExperimentConfig, seed: u64) -> Result<LoadedData> {
    match &cfg.input {
        Some(p) => {
            let (counts, manifest) = ingest_counts(p, cfg.format)?;
            Ok(LoadedData {
                counts,
                manifest: manifest.unwrap_or_default(),
            })
        }
        None => simulate_for(&cfg.simulation, seed),
    }
}

fn data_file_name(format: DataFormat) -> &'static str {
    match format {
        DataFormat::DenseCsv => "counts.csv",
        DataFormat::SparseTriplet => "counts.triplet.csv",
    }
}

fn save_data(dir: &Path, data: &LoadedData, format: DataFormat) -> Result<PathBuf> {
    let p = dir.join(data_file_name(format));
    write_counts(&p, &data.counts, format)?;
    write_manifest(&p, &data.manifest)?;
    Ok(p)
}

pub fn run_simulate(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.prepare_run(Mode::Simulate)?;
    let data = simulate_for(&cfg.simulation, cfg.seeds[0])?;
    save_data(&dir, &data, cfg.format)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeRun {
    pub seed: u64,
    pub truth: Option<Vec<u64>>,
    pub argmin: Option<(u64, u64)>,
    pub n1: Vec<u64>,
    pub n2: Vec<u64>,
    /// Row-major over (n1, n2).
    pub nll: Vec<f64>,
}

pub fn landscape_for(data: &LoadedData, grid_max: u64, seed: u64) -> Result<LandscapeRun> {
    let cmax = data.counts.column_max();
    if cmax.len() != 2 {
        return Err(Error::Unsupported(format!(
            "the landscape needs exactly 2 categories, got {}",
            cmax.len()
        )));
    }
    let lo1 = cmax[0] as u64;
    let lo2 = cmax[1] as u64;
    if grid_max < lo1.max(lo2) {
        return Err(Error::Validation(format!("grid_max {grid_max} is below the observed maximum")));
    }
    let land = nll_landscape(&data.counts, lo1..=grid_max, lo2..=grid_max)?;
    let truth = data.manifest.ground_truth.as_ref().and_then(|g| (g.len() == 1).then(|| g[0].clone()));
    Ok(LandscapeRun {
        seed,
        truth,
        argmin: land.argmin(),
        n1: land.n1,
        n2: land.n2,
        nll: land.nll,
    })
}

pub fn run_landscape(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.prepare_run(Mode::Landscape)?;
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        runs.push(landscape_for(&load_data(cfg, seed)?, cfg.landscape.grid_max, seed)?);
    }
    let p = dir.join("landscape.json");
    fs::write(&p, serde_json::to_vec(&runs)?)?;
    Ok(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MleRun {
    pub trials: usize,
    pub f_max: Option<f64>,
    pub seed: u64,
    pub truth: Option<Vec<u64>>,
    pub estimate: Vec<f64>,
    pub final_error: Option<f64>,
    pub epochs: usize,
    /// Sampled every `log_every` epochs, plus the last one.
    pub epoch: Vec<usize>,
    pub nll: Vec<f64>,
    pub error: Vec<f64>,
}

fn mle_run(data: &LoadedData, opt: &OptimizerConfig, f_max: Option<f64>, seed: u64, stride: usize) -> Result<MleRun> {
    let truth = data.manifest.ground_truth.as_ref().and_then(|g| (g.len() == 1).then(|| g[0].clone()));
    let (est, traj) = fit_single(&data.counts, opt, truth.as_deref())?;
    let n = traj.epochs();
    let keep: Vec<usize> = (0..n).filter(|e| e % stride == 0 || e + 1 == n).collect();
    Ok(MleRun {
        trials: data.counts.n_rows(),
        f_max,
        seed,
        final_error: traj.error.last().copied(),
        estimate: est.to_vec(),
        epochs: n,
        nll: keep.iter().map(|&e| traj.nll[e]).collect(),
        error: if traj.error.is_empty() {
            Vec::new()
        } else {
            keep.iter().map(|&e| traj.error[e]).collect()
        },
        epoch: keep,
        truth,
    })
}

/// Direct fits over the configured sweep (or the single configured dataset).
pub fn mle_runs(cfg: &ExperimentConfig) -> Result<Vec<MleRun>> {
    let mut runs = Vec::new();
    if cfg.scaling.trials.is_empty() && cfg.scaling.f_max.is_empty() {
        let f = cfg.input.is_none().then_some(cfg.simulation.sample_fraction_max);
        for &seed in &cfg.seeds {
            runs.push(mle_run(&load_data(cfg, seed)?, &cfg.optimizer, f, seed, cfg.log_every)?);
        }
        return Ok(runs);
    }
    if cfg.input.is_some() {
        return Err(Error::Validation("a scaling sweep simulates its data; drop the input file".into()));
    }
    let trials = if cfg.scaling.trials.is_empty() {
        vec![cfg.simulation.trials_per_distribution]
    } else {
        cfg.scaling.trials.clone()
    };
    let fs = if cfg.scaling.f_max.is_empty() {
        vec![cfg.simulation.sample_fraction_max]
    } else {
        cfg.scaling.f_max.clone()
    };
    for &f in &fs {
        for &t in &trials {
            for &seed in &cfg.seeds {
                let mut sim = cfg.simulation.clone();
                sim.trials_per_distribution = t;
                sim.sample_fraction_max = f;
                sim.validate()?;
                runs.push(mle_run(&simulate_for(&sim, seed)?, &cfg.optimizer, Some(f), seed, cfg.log_every)?);
            }
        }
    }
    Ok(runs)
}

pub fn run_fit_mle(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.prepare_run(Mode::FitMle)?;
    let runs = mle_runs(cfg)?;
    let p = dir.join("mle_runs.json");
    fs::write(&p, serde_json::to_vec(&runs)?)?;
    Ok(p)
}

/// Result of training one likelihood on one dataset.
#[derive(Debug, Clone)]
pub struct VaeFit {
    pub params: NetworkParams,
    pub history: TrainHistory,
    /// `(epoch, per-observation estimated totals)` every `log_every` epochs.
    pub totals: Vec<(usize, Vec<f64>)>,
}

pub fn fit_vae(data: &CountMatrix, spec: &NetworkSpec, train: &TrainConfig, log_every: usize) -> Result<VaeFit> {
    let mut totals = Vec::new();
    let last = train.max_epochs.saturating_sub(1);
    let (params, history) = train_with_observer(data, spec, train, |epoch, p| {
        if epoch % log_every.max(1) == 0 || epoch == last {
            let est = infer_estimates(data, p)?;
            totals.push((epoch, est.iter().map(|r| r.iter().sum()).collect()));
        }
        Ok(())
    })?;
    Ok(VaeFit {
        params,
        history,
        totals,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeRunRecord {
    pub kind: LikelihoodKind,
    pub checkpoint: String,
    pub estimates: String,
    pub epochs: usize,
    pub final_loss: f64,
}

fn history_csv(h: &TrainHistory) -> String {
    let mut s = String::from("epoch,loss,kl,nll,penalty,penalty_weight,violation_fraction\n");
    for e in 0..h.loss.len() {
        let _ = writeln!(
            s,
            "{e},{},{},{},{},{},{}",
            h.loss[e], h.kl[e], h.nll[e], h.penalty[e], h.penalty_weight[e], h.violation_fraction[e]
        );
    }
    s
}

fn matrix_csv(rows: &[Vec<f64>]) -> String {
    let k = rows.first().map_or(0, Vec::len);
    let mut s = (0..k).map(|j| format!("cat_{j}")).collect::<Vec<_>>().join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&r.iter().map(f64::to_string).collect::<Vec<_>>().join(","));
        s.push('\n');
    }
    s
}

fn parse_matrix_csv(text: &str, path: &Path) -> Result<Vec<Vec<f64>>> {
    text.lines()
        .skip(1)
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.split(',')
                .map(|t| {
                    t.trim().parse::<f64>().map_err(|_| Error::Parse {
                        line: i + 2,
                        msg: format!("bad value `{t}` in {}", path.display()),
                    })
                })
                .collect()
        })
        .collect()
}

pub fn run_fit_vae(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.prepare_run(Mode::FitVae)?;
    let seed = cfg.seeds[0];
    let data = load_data(cfg, seed)?;
    save_data(&dir, &data, cfg.format)?;
    let mut train = cfg.train.clone();
    train.seed = seed;
    let mut records = Vec::new();
    for &kind in &cfg.likelihoods {
        let spec = cfg.network.spec(data.counts.n_cols(), kind);
        let fit = fit_vae(&data.counts, &spec, &train, cfg.log_every)?;
        let name = kind.short_name();
        let ck = format!("model_{name}.json");
        save_checkpoint(&fit.params, &dir.join(&ck))?;
        fs::write(dir.join(format!("training_{name}.csv")), history_csv(&fit.history))?;
        let est = infer_estimates(&data.counts, &fit.params)?;
        let est_file = format!("estimates_{name}.csv");
        fs::write(dir.join(&est_file), matrix_csv(&est))?;
        let mut totals = String::from("epoch,observation,distribution_label,estimated_total\n");
        for (epoch, t) in &fit.totals {
            for (i, v) in t.iter().enumerate() {
                let label = data.manifest.labels.as_ref().map_or(String::new(), |l| l[i].to_string());
                let _ = writeln!(totals, "{epoch},{i},{label},{v}");
            }
        }
        fs::write(dir.join(format!("totals_{name}.csv")), totals)?;
        records.push(VaeRunRecord {
            kind,
            checkpoint: ck,
            estimates: est_file,
            epochs: fit.history.loss.len(),
            final_loss: fit.history.loss.last().copied().unwrap_or(f64::NAN),
        });
    }
    let p = dir.join("vae_runs.json");
    fs::write(&p, serde_json::to_vec_pretty(&records)?)?;
    Ok(p)
}

/// Clustering and estimation quality of one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindMetrics {
    pub kind: LikelihoodKind,
    pub ari: Option<f64>,
    /// Count-scale error metrics; absent for the multinomial head, whose
    /// output is a probability vector.
    pub report: Option<MetricReport>,
}

pub fn evaluate_model(
    counts: &CountMatrix,
    manifest: &Manifest,
    params: &NetworkParams,
    restarts: usize,
    seed: u64,
) -> Result<KindMetrics> {
    let kind = params.spec.output_head;
    let ari = match &manifest.labels {
        Some(labels) => {
            let mut groups = labels.clone();
            groups.sort_unstable();
            groups.dedup();
            let z = latent_means(counts, params)?;
            let km = kmeans(&z, groups.len(), restarts, &mut rng_stream(seed, KMEANS_STREAM), Some(labels))?;
            Some(adjusted_rand_index(labels, &km.labels)?)
        }
        None => None,
    };
    let report = match (kind, manifest.truth_per_row(counts.n_rows())) {
        (LikelihoodKind::Multinomial, _) | (_, None) => None,
        (_, Some(truth)) => {
            let est = infer_estimates(counts, params)?;
            let labels = manifest.labels.clone().unwrap_or_else(|| vec![0; counts.n_rows()]);
            Some(MetricReport::from_estimates(&est, &truth, &labels, ari)?)
        }
    };
    Ok(KindMetrics { kind, ari, report })
}

pub fn run_evaluate(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.prepare_run(Mode::Evaluate)?;
    let checkpoints: Vec<PathBuf> = match &cfg.checkpoint {
        Some(p) => vec![p.clone()],
        None => {
            let runs = dir.join("vae_runs.json");
            if !runs.exists() {
                return Err(Error::MissingArtifact {
                    path: runs.display().to_string(),
                    mode: Mode::FitVae.name().into(),
                });
            }
            let recs: Vec<VaeRunRecord> = serde_json::from_slice(&fs::read(&runs)?)?;
            recs.iter().map(|r| dir.join(&r.checkpoint)).collect()
        }
    };
    let data = match &cfg.input {
        Some(_) => load_data(cfg, cfg.seeds[0])?,
        None => {
            let p = dir.join(data_file_name(cfg.format));
            if !p.exists() {
                return Err(Error::MissingArtifact {
                    path: p.display().to_string(),
                    mode: Mode::FitVae.name().into(),
                });
            }
            let (counts, manifest) = ingest_counts(&p, cfg.format)?;
            LoadedData {
                counts,
                manifest: manifest.unwrap_or_default(),
            }
        }
    };
    let mut all = Vec::new();
    let mut csv = format!("kind,{}\n", MetricReport::CSV_HEADER);
    for ck in checkpoints {
        let params = load_checkpoint(&ck)?;
        let m = evaluate_model(&data.counts, &data.manifest, &params, cfg.kmeans_restarts, cfg.seeds[0])?;
        let row = match &m.report {
            Some(r) => r.csv_row(),
            None => format!("{},,,", m.ari.map_or_else(String::new, |a| a.to_string())),
        };
        let _ = writeln!(csv, "{},{row}", m.kind);
        all.push(m);
    }
    fs::write(dir.join("metrics.csv"), csv)?;
    let p = dir.join("metrics.json");
    fs::write(&p, serde_json::to_vec_pretty(&all)?)?;
    Ok(p)
}

/// Mean and sample standard deviation over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std, n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioDescriptor {
    pub name: String,
    pub distributions: usize,
    pub categories: usize,
    pub trials: usize,
    pub totals: Vec<u64>,
    /// Distinct probability vectors among the distributions.
    pub unique: usize,
}

impl ScenarioDescriptor {
    fn of(s: &Scenario) -> Self {
        let sim = &s.simulation;
        let shared: usize = sim.shared_prob_groups.iter().map(|g| g.len().saturating_sub(1)).sum();
        Self {
            name: s.name.clone(),
            distributions: sim.num_distributions,
            categories: sim.num_categories,
            trials: sim.trials_per_distribution,
            totals: sim.total_counts.clone(),
            unique: sim.num_distributions - shared,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedCell {
    pub seed: u64,
    pub kind: LikelihoodKind,
    pub ari: Option<f64>,
    pub mpe: Option<f64>,
    pub mae: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindSummary {
    pub kind: LikelihoodKind,
    pub ari: Option<Stat>,
    pub mpe: Option<Stat>,
    pub mae: Option<Stat>,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub scenario: ScenarioDescriptor,
    pub kinds: Vec<KindSummary>,
    pub cells: Vec<SeedCell>,
}

impl BenchmarkRow {
    pub fn kind(&self, kind: LikelihoodKind) -> Option<&KindSummary> {
        self.kinds.iter().find(|k| k.kind == kind)
    }
}

fn bench_cell(cfg: &ExperimentConfig, data: &LoadedData, kind: LikelihoodKind, seed: u64) -> Result<KindMetrics> {
    let spec = cfg.network.spec(data.counts.n_cols(), kind);
    let mut train = cfg.train.clone();
    train.seed = seed;
    let (params, _) = train_with_observer(&data.counts, &spec, &train, |_, _| Ok(()))?;
    evaluate_model(&data.counts, &data.manifest, &params, cfg.kmeans_restarts, seed)
}

/// Every scenario x seed x likelihood: simulate, train with identical
/// architecture and seed streams, evaluate. A failing cell is recorded and
/// the run goes on.
pub fn run_benchmark(cfg: &ExperimentConfig) -> Result<Vec<BenchmarkRow>> {
    cfg.validate(Mode::Benchmark)?;
    let mut rows = Vec::new();
    for scenario in &cfg.scenarios {
        let mut cells = Vec::new();
        for &seed in &cfg.seeds {
            let data = simulate_for(&scenario.simulation, seed);
            for &kind in &cfg.likelihoods {
                let res = data.as_ref().map_err(|e| Error::Validation(e.to_string())).and_then(|d| bench_cell(cfg, d, kind, seed));
                cells.push(match res {
                    Ok(m) => SeedCell {
                        seed,
                        kind,
                        ari: m.ari,
                        mpe: m.report.as_ref().map(|r| r.mpe),
                        mae: m.report.as_ref().map(|r| r.mae),
                        error: None,
                    },
                    Err(e) => SeedCell {
                        seed,
                        kind,
                        ari: None,
                        mpe: None,
                        mae: None,
                        error: Some(e.to_string()),
                    },
                });
            }
        }
        let kinds = cfg
            .likelihoods
            .iter()
            .map(|&kind| {
                let mine: Vec<&SeedCell> = cells.iter().filter(|c| c.kind == kind).collect();
                let pick = |f: fn(&SeedCell) -> Option<f64>| Stat::of(&mine.iter().filter_map(|c| f(c)).collect::<Vec<_>>());
                KindSummary {
                    kind,
                    ari: pick(|c| c.ari),
                    mpe: pick(|c| c.mpe),
                    mae: pick(|c| c.mae),
                    failures: mine.iter().filter(|c| c.error.is_some()).count(),
                }
            })
            .collect();
        rows.push(BenchmarkRow {
            scenario: ScenarioDescriptor::of(scenario),
            kinds,
            cells,
        });
    }
    Ok(rows)
}

pub fn benchmark_csv(rows: &[BenchmarkRow]) -> String {
    let mut s = String::from("scenario,distributions,categories,trials,unique,kind,metric,mean,std,n\n");
    for r in rows {
        let d = &r.scenario;
        for k in &r.kinds {
            for (metric, stat) in [("ari", k.ari), ("mpe", k.mpe), ("mae", k.mae)] {
                if let Some(st) = stat {
                    let _ = writeln!(
                        s,
                        "{},{},{},{},{},{},{metric},{},{},{}",
                        d.name, d.distributions, d.categories, d.trials, d.unique, k.kind, st.mean, st.std, st.n
                    );
                }
            }
        }
    }
    s
}

pub fn run_benchmark_mode(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.prepare_run(Mode::Benchmark)?;
    let rows = run_benchmark(cfg)?;
    fs::write(dir.join("benchmark.csv"), benchmark_csv(&rows))?;
    let p = dir.join("benchmark.json");
    fs::write(&p, serde_json::to_vec_pretty(&rows)?)?;
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Figure {
    Landscape,
    Scaling,
    Trajectory,
    Histograms,
}

impl std::str::FromStr for Figure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "landscape" => Ok(Figure::Landscape),
            "scaling" => Ok(Figure::Scaling),
            "trajectory" => Ok(Figure::Trajectory),
            "histograms" => Ok(Figure::Histograms),
            other => Err(Error::Validation(format!("unknown figure `{other}`"))),
        }
    }
}

fn artifact(dir: &Path, name: &str, mode: Mode) -> Result<Vec<u8>> {
    let p = dir.join(name);
    if !p.exists() {
        return Err(Error::MissingArtifact {
            path: p.display().to_string(),
            mode: mode.name().into(),
        });
    }
    Ok(fs::read(p)?)
}

fn opt_num(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Long-form CSVs for one figure from the artifacts in `run_dir`.
pub fn emit_figure_data(run_dir: &Path, figure: Figure) -> Result<Vec<PathBuf>> {
    let fig_dir = run_dir.join("figures");
    let mut written = Vec::new();
    let mut emit = |name: String, body: String| -> Result<()> {
        fs::create_dir_all(&fig_dir)?;
        let p = fig_dir.join(name);
        fs::write(&p, body)?;
        written.push(p);
        Ok(())
    };
    match figure {
        Figure::Landscape => {
            let runs: Vec<LandscapeRun> = serde_json::from_slice(&artifact(run_dir, "landscape.json", Mode::Landscape)?)?;
            for (i, r) in runs.iter().enumerate() {
                let mut s = String::from("n1,n2,nll\n");
                for (a, &x) in r.n1.iter().enumerate() {
                    for (b, &y) in r.n2.iter().enumerate() {
                        let _ = writeln!(s, "{x},{y},{}", r.nll[a * r.n2.len() + b]);
                    }
                }
                let name = if i == 0 {
                    "landscape.csv".to_string()
                } else {
                    format!("landscape_seed{}.csv", r.seed)
                };
                emit(name, s)?;
            }
        }
        Figure::Scaling => {
            let runs: Vec<MleRun> = serde_json::from_slice(&artifact(run_dir, "mle_runs.json", Mode::FitMle)?)?;
            let mut s = String::from("trials,f_max,seed,error\n");
            for r in &runs {
                let _ = writeln!(s, "{},{},{},{}", r.trials, opt_num(r.f_max), r.seed, opt_num(r.final_error));
            }
            emit("scaling.csv".into(), s)?;
        }
        Figure::Trajectory => {
            let runs: Vec<MleRun> = serde_json::from_slice(&artifact(run_dir, "mle_runs.json", Mode::FitMle)?)?;
            let mut s = String::from("trials,f_max,seed,epoch,nll,error\n");
            for r in &runs {
                for (i, &e) in r.epoch.iter().enumerate() {
                    let _ = writeln!(
                        s,
                        "{},{},{},{e},{},{}",
                        r.trials,
                        opt_num(r.f_max),
                        r.seed,
                        r.nll[i],
                        opt_num(r.error.get(i).copied())
                    );
                }
            }
            emit("trajectory.csv".into(), s)?;
        }
        Figure::Histograms => {
            let recs: Vec<VaeRunRecord> = serde_json::from_slice(&artifact(run_dir, "vae_runs.json", Mode::FitVae)?)?;
            let cfg: ExperimentConfig =
                serde_json::from_slice(&artifact(run_dir, "config.resolved.json", Mode::FitVae)?)?;
            let data_path = run_dir.join(data_file_name(cfg.format));
            let _ = artifact(run_dir, data_file_name(cfg.format), Mode::FitVae)?;
            let (counts, manifest) = ingest_counts(&data_path, cfg.format)?;
            let labels = manifest.and_then(|m| m.labels);
            for rec in recs {
                let est_path = run_dir.join(&rec.estimates);
                let text = String::from_utf8_lossy(&artifact(run_dir, &rec.estimates, Mode::FitVae)?).into_owned();
                let est = parse_matrix_csv(&text, &est_path)?;
                let mut s = String::from("observation,distribution_label,measured_total,estimated_total\n");
                for (i, e) in est.iter().enumerate() {
                    let label = labels.as_ref().map_or(String::new(), |l| l[i].to_string());
                    let _ = writeln!(s, "{i},{label},{},{}", counts.row_total(i), e.iter().sum::<f64>());
                }
                emit(format!("histograms_{}.csv", rec.kind.short_name()), s)?;
            }
        }
    }
    Ok(written)
}

/// Per-row Manhattan errors of estimates against truth.
pub fn row_errors(est: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<Vec<f64>> {
    est.iter().zip(truth).map(|(e, t)| manhattan_error(e, t)).collect()
}

/// Pooled MPE and MAE, for quick summaries.
pub fn pooled_errors(est: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<(f64, f64)> {
    Ok((mpe(est, truth)?, mae(est, truth)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(dir: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            out: Some(dir.to_path_buf()),
            simulation: SimulationConfig::mixture(2, 4, 30, vec![20, 60], 0.2, 0.6, 0),
            network: NetworkConfig {
                encoder_hidden: vec![8],
                decoder_hidden: vec![8],
                latent_dim: 2,
                hidden_activation: Activation::Relu,
            },
            log_every: 2,
            kmeans_restarts: 2,
            ..Default::default()
        };
        cfg.train.max_epochs = 4;
        cfg.train.batch_size = 16;
        cfg
    }

    #[test]
    fn config_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        cfg.scenarios.push(Scenario {
            name: "s".into(),
            simulation: cfg.simulation.clone(),
        });
        cfg.scaling.f_max = vec![0.2, 0.4];
        let text = cfg.to_json().unwrap();
        let back = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_json().unwrap(), text);
        assert_eq!(ExperimentConfig::from_json("{}").unwrap(), ExperimentConfig::default());
        assert!(ExperimentConfig::from_json("{\"bogus\": 1}").is_err());
    }

    #[test]
    fn stat_uses_sample_deviation() {
        let s = Stat::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.mean, 2.5);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(Stat::of(&[7.0]).unwrap().std, 0.0);
        assert!(Stat::of(&[]).is_none());
    }

    #[test]
    fn missing_artifacts_name_the_mode() {
        let dir = tempfile::tempdir().unwrap();
        for (fig, mode) in [
            (Figure::Landscape, "landscape"),
            (Figure::Scaling, "fit-mle"),
            (Figure::Trajectory, "fit-mle"),
            (Figure::Histograms, "fit-vae"),
        ] {
            match emit_figure_data(dir.path(), fig) {
                Err(Error::MissingArtifact { mode: m, .. }) => assert_eq!(m, mode),
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn landscape_and_scaling_figures() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        cfg.simulation = SimulationConfig::single(vec![14, 6], 200, 0.4, 0);
        cfg.landscape.grid_max = 25;
        cfg.seeds = vec![0, 1];
        run_landscape(&cfg).unwrap();
        let files = emit_figure_data(dir.path(), Figure::Landscape).unwrap();
        assert_eq!(files.len(), 2);
        let text = fs::read_to_string(&files[0]).unwrap();
        assert!(text.starts_with("n1,n2,nll\n"));

        cfg.scaling = ScalingConfig {
            trials: vec![50, 100],
            f_max: vec![0.4],
        };
        cfg.optimizer.max_epochs = 200;
        run_fit_mle(&cfg).unwrap();
        let s = fs::read_to_string(&emit_figure_data(dir.path(), Figure::Scaling).unwrap()[0]).unwrap();
        assert!(s.starts_with("trials,f_max,seed,error\n"));
        assert_eq!(s.lines().count(), 1 + 4);
        let t = fs::read_to_string(&emit_figure_data(dir.path(), Figure::Trajectory).unwrap()[0]).unwrap();
        assert!(t.starts_with("trials,f_max,seed,epoch,nll,error\n"));
        assert!(dir.path().join("config.resolved.json").exists());
    }

    #[test]
    fn vae_pipeline_and_histograms() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        run_fit_vae(&cfg).unwrap();
        let files = emit_figure_data(dir.path(), Figure::Histograms).unwrap();
        assert_eq!(files.len(), 3);
        let text = fs::read_to_string(&files[0]).unwrap();
        assert!(text.starts_with("observation,distribution_label,measured_total,estimated_total\n"));
        assert_eq!(text.lines().count(), 1 + 60);

        run_evaluate(&cfg).unwrap();
        let m: Vec<KindMetrics> = serde_json::from_slice(&fs::read(dir.path().join("metrics.json")).unwrap()).unwrap();
        assert_eq!(m.len(), 3);
        assert!(m.iter().all(|k| k.ari.is_some()));
        assert!(m.iter().find(|k| k.kind == LikelihoodKind::Multinomial).unwrap().report.is_none());
        assert!(m.iter().find(|k| k.kind == LikelihoodKind::Poisson).unwrap().report.is_some());
    }

    #[test]
    fn benchmark_is_deterministic_and_records_failures() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        cfg.likelihoods = vec![LikelihoodKind::Hypergeometric];
        cfg.scenarios = vec![Scenario {
            name: "tiny".into(),
            simulation: cfg.simulation.clone(),
        }];
        let a = run_benchmark(&cfg).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].cells.len(), 1);
        let b = run_benchmark(&cfg).unwrap();
        assert_eq!(benchmark_csv(&a), benchmark_csv(&b));

        // a network that cannot be built fails its cells but not the run
        cfg.network.latent_dim = 0;
        cfg.seeds = vec![0, 1];
        let c = run_benchmark(&cfg).unwrap();
        assert_eq!(c[0].kinds[0].failures, 2);
        assert!(c[0].kinds[0].ari.is_none());
    }

    #[test]
    fn evaluate_without_fit_reports_missing_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        assert!(matches!(run_evaluate(&cfg), Err(Error::MissingArtifact { .. })));
    }
}
