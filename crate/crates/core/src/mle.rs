//! Maximum-likelihood estimation of one ground-truth population: exhaustive
//! NLL landscapes for two categories and Adam on the penalized relaxed NLL.

use serde::{Deserialize, Serialize};

use crate::data::{CountMatrix, PopulationEstimate};
use crate::error::{Error, Result};
use crate::likelihood::{threshold_estimates, violation_penalty, BatchStats, PenaltyConfig};
use crate::metrics::manhattan_error;
use crate::optim::{AdamConfig, AdamState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Zeros,
    Custom(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub adam: AdamConfig,
    pub max_epochs: usize,
    /// Stop once the loss has not improved by `tolerance` for this many epochs.
    pub patience: usize,
    pub tolerance: f64,
    pub init: Init,
    pub penalty: PenaltyConfig,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::with_lr(0.1),
            max_epochs: 10_000,
            patience: 20,
            tolerance: 1e-9,
            init: Init::Zeros,
            penalty: PenaltyConfig::constant(1.0),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.adam.is_valid() {
            return Err(Error::Validation(format!("invalid Adam settings {:?}", self.adam)));
        }
        self.penalty.validate()
    }
}

/// Per-epoch record of a direct fit.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitTrajectory {
    /// Thresholded estimate evaluated at each epoch.
    pub estimates: Vec<Vec<f64>>,
    pub nll: Vec<f64>,
    /// NLL plus weighted penalty, the minimized objective.
    pub loss: Vec<f64>,
    /// Manhattan error of the rounded estimate; empty without ground truth.
    pub error: Vec<f64>,
}

impl FitTrajectory {
    pub fn epochs(&self) -> usize {
        self.nll.len()
    }
}

/// Fit one shared population estimate to every row of `batch`.
///
/// The constraint vector is the elementwise maximum count over the batch:
/// one estimate has to dominate every observation. The raw parameters start
/// at `config.init`; the likelihood sees them thresholded at the constraint
/// and the violation penalty acts on the raw values.
pub fn fit_single(
    batch: &CountMatrix,
    config: &OptimizerConfig,
    ground_truth: Option<&[u64]>,
) -> Result<(PopulationEstimate, FitTrajectory)> {
    config.validate()?;
    if batch.is_empty() {
        return Err(Error::Validation("cannot fit an empty batch".into()));
    }
    let k = batch.n_cols();
    if let Some(gt) = ground_truth {
        if gt.len() != k {
            return Err(Error::Shape(format!("ground truth has {} categories, batch {k}", gt.len())));
        }
    }
    let stats = BatchStats::from_matrix(batch);
    let bound = stats.column_max().to_vec();
    let mut raw = match &config.init {
        Init::Zeros => vec![0.0; k],
        Init::Custom(v) if v.len() == k => v.clone(),
        Init::Custom(v) => {
            return Err(Error::Shape(format!("init has {} entries, batch {k}", v.len())));
        }
    };
    let truth: Option<Vec<f64>> = ground_truth.map(|g| g.iter().map(|&x| x as f64).collect());
    let mut adam = AdamState::new(k);
    let mut traj = FitTrajectory::default();
    let mut best = f64::INFINITY;
    let mut stall = 0;
    let mut est = threshold_estimates(&bound, &raw);

    for epoch in 0..config.max_epochs {
        let weight = config.penalty.weight_at(epoch);
        est = threshold_estimates(&bound, &raw);
        let nll = stats.nll_unchecked(&est);
        let violation = violation_penalty(&bound, &raw);
        let loss = nll + weight * violation;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                epoch,
                detail: format!("loss {loss} at estimate {est:?}"),
            });
        }
        traj.estimates.push(est.clone());
        traj.nll.push(nll);
        traj.loss.push(loss);
        if let Some(t) = &truth {
            let rounded: Vec<f64> = est.iter().map(|x| x.round()).collect();
            traj.error.push(manhattan_error(&rounded, t)?);
        }

        // While raw values sit under the bound the estimate is pinned to it,
        // so a flat loss there says nothing about convergence.
        if loss < best - config.tolerance || violation > 0.0 {
            best = best.min(loss);
            stall = 0;
        } else {
            stall += 1;
            if stall >= config.patience {
                break;
            }
        }

        let lik_grad = stats.grad_unchecked(&est);
        // Subgradient at the clamp kink is zero from both sides.
        let grad: Vec<f64> = raw
            .iter()
            .zip(&bound)
            .zip(&lik_grad)
            .map(|((&r, &b), &g)| {
                let b = b as f64;
                if r > b {
                    g
                } else if r < b {
                    -weight
                } else {
                    0.0
                }
            })
            .collect();
        adam.apply(&mut raw, &grad, &config.adam);
    }
    Ok((PopulationEstimate::new(est)?, traj))
}

/// NLL evaluated on an integer grid of two-category estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Landscape {
    pub n1: Vec<u64>,
    pub n2: Vec<u64>,
    /// Row-major over (n1, n2); infeasible cells hold `f64::INFINITY`.
    pub nll: Vec<f64>,
}

impl Landscape {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.nll[i * self.n2.len() + j]
    }

    /// Grid point with the smallest NLL (first one on ties).
    pub fn argmin(&self) -> Option<(u64, u64)> {
        let mut best: Option<(usize, f64)> = None;
        for (idx, &v) in self.nll.iter().enumerate() {
            if v.is_finite() && best.is_none_or(|(_, b)| v < b) {
                best = Some((idx, v));
            }
        }
        best.map(|(idx, _)| (self.n1[idx / self.n2.len()], self.n2[idx % self.n2.len()]))
    }

    /// Long-form `(n1, n2, nll)` cells in grid order.
    pub fn cells(&self) -> impl Iterator<Item = (u64, u64, f64)> + '_ {
        self.n1
            .iter()
            .flat_map(move |&a| self.n2.iter().map(move |&b| (a, b)))
            .zip(&self.nll)
            .map(|((a, b), &v)| (a, b, v))
    }

    /// Feasible cells ordered by NLL, best first.
    pub fn ranked(&self) -> Vec<(u64, u64, f64)> {
        let mut cells: Vec<_> = self.cells().filter(|c| c.2.is_finite()).collect();
        cells.sort_by(|a, b| a.2.total_cmp(&b.2));
        cells
    }
}

/// Exhaustive NLL over integer estimates in the two inclusive ranges.
pub fn nll_landscape(
    batch: &CountMatrix,
    n1_range: std::ops::RangeInclusive<u64>,
    n2_range: std::ops::RangeInclusive<u64>,
) -> Result<Landscape> {
    if batch.n_cols() != 2 {
        return Err(Error::Unsupported(format!(
            "the landscape needs exactly 2 categories, got {}",
            batch.n_cols()
        )));
    }
    let stats = BatchStats::from_matrix(batch);
    let bound = stats.column_max();
    let n1: Vec<u64> = n1_range.collect();
    let n2: Vec<u64> = n2_range.collect();
    let mut nll = Vec::with_capacity(n1.len() * n2.len());
    for &a in &n1 {
        for &b in &n2 {
            if a < bound[0] as u64 || b < bound[1] as u64 {
                nll.push(f64::INFINITY);
            } else {
                nll.push(stats.nll_unchecked(&[a as f64, b as f64]));
            }
        }
    }
    Ok(Landscape { n1, n2, nll })
}
