//! Ground-truth populations and under-sampled observation matrices.
//!
//! For every distribution a probability vector is drawn from a symmetric
//! Dirichlet, scaled by the distribution's total and rounded to integer
//! category sizes. Each observation then draws a depth `n` uniformly between
//! `f_min * N` and `f_max * N` and samples `n` elements from that urn without
//! replacement.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Hypergeometric};
use serde::{Deserialize, Serialize};

use crate::data::CountMatrix;
use crate::error::{Error, Result};
use crate::likelihood::lbinom;

/// Seeded generator used throughout the crate.
pub type SimRng = ChaCha8Rng;

/// Independent stream `stream` derived from `seed`.
pub fn rng_stream(seed: u64, stream: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn default_alpha() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub num_distributions: usize,
    pub num_categories: usize,
    pub trials_per_distribution: usize,
    /// One total per distribution, or a single value shared by all.
    pub total_counts: Vec<u64>,
    pub sample_fraction_min: f64,
    pub sample_fraction_max: f64,
    /// Groups of distribution indices that reuse one probability vector.
    #[serde(default)]
    pub shared_prob_groups: Vec<Vec<usize>>,
    #[serde(default = "default_alpha")]
    pub dirichlet_alpha: f64,
    /// When set, every distribution draws depths as fractions of this total
    /// instead of its own, so all distributions share one depth range.
    #[serde(default)]
    pub depth_reference_total: Option<u64>,
    /// Explicit category sizes per distribution; skips the Dirichlet draw.
    #[serde(default)]
    pub ground_truth: Option<Vec<Vec<u64>>>,
    #[serde(default)]
    pub seed: u64,
}

impl SimulationConfig {
    /// A single known population, as used by the direct estimation experiments.
    pub fn single(population: Vec<u64>, trials: usize, f_max: f64, seed: u64) -> Self {
        let k = population.len();
        Self {
            num_distributions: 1,
            num_categories: k,
            trials_per_distribution: trials,
            total_counts: vec![population.iter().sum()],
            sample_fraction_min: 0.0,
            sample_fraction_max: f_max,
            shared_prob_groups: Vec::new(),
            dirichlet_alpha: 1.0,
            depth_reference_total: None,
            ground_truth: Some(vec![population]),
            seed,
        }
    }

    /// `num_distributions` Dirichlet draws over `num_categories`, each
    /// observation depth uniform between `f_min` and `f_max` of its total.
    pub fn mixture(
        num_distributions: usize,
        num_categories: usize,
        trials: usize,
        total_counts: Vec<u64>,
        f_min: f64,
        f_max: f64,
        seed: u64,
    ) -> Self {
        Self {
            num_distributions,
            num_categories,
            trials_per_distribution: trials,
            total_counts,
            sample_fraction_min: f_min,
            sample_fraction_max: f_max,
            shared_prob_groups: Vec::new(),
            dirichlet_alpha: 1.0,
            depth_reference_total: None,
            ground_truth: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.num_distributions;
        let bad = |msg: String| Err(Error::Validation(msg));
        if m < 1 {
            return bad("need at least one distribution".into());
        }
        if self.num_categories < 2 {
            return bad(format!("need at least 2 categories, got {}", self.num_categories));
        }
        if self.trials_per_distribution < 1 {
            return bad("need at least one trial per distribution".into());
        }
        if self.total_counts.len() != 1 && self.total_counts.len() != m {
            return bad(format!(
                "total_counts has {} entries for {m} distributions",
                self.total_counts.len()
            ));
        }
        if self.total_counts.iter().any(|&n| n < 1) {
            return bad("totals must be at least 1".into());
        }
        let (lo, hi) = (self.sample_fraction_min, self.sample_fraction_max);
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return bad(format!("need 0 <= f_min < f_max <= 1, got {lo}, {hi}"));
        }
        if !(self.dirichlet_alpha > 0.0 && self.dirichlet_alpha.is_finite()) {
            return bad(format!("dirichlet_alpha must be positive, got {}", self.dirichlet_alpha));
        }
        let mut seen = vec![false; m];
        for g in &self.shared_prob_groups {
            for &i in g {
                if i >= m {
                    return bad(format!("shared group index {i} out of range"));
                }
                if seen[i] {
                    return bad(format!("distribution {i} appears in two shared groups"));
                }
                seen[i] = true;
            }
        }
        if let Some(gt) = &self.ground_truth {
            if gt.len() != m || gt.iter().any(|p| p.len() != self.num_categories) {
                return bad("ground_truth must be num_distributions x num_categories".into());
            }
            if gt.iter().any(|p| p.iter().sum::<u64>() == 0) {
                return bad("ground_truth rows must not be all zero".into());
            }
        }
        Ok(())
    }

    pub fn total_for(&self, m: usize) -> u64 {
        if self.total_counts.len() == 1 {
            self.total_counts[0]
        } else {
            self.total_counts[m]
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedDataset {
    pub counts: CountMatrix,
    /// Distribution index of every row.
    pub labels: Vec<usize>,
    /// Category sizes per distribution.
    pub ground_truth: Vec<Vec<u64>>,
}

impl SimulatedDataset {
    /// Ground truth of every row, as a rows x K matrix of reals.
    pub fn truth_per_row(&self) -> Vec<Vec<f64>> {
        self.labels
            .iter()
            .map(|&l| self.ground_truth[l].iter().map(|&x| x as f64).collect())
            .collect()
    }

    /// Effective (post-rounding) total of each distribution.
    pub fn totals(&self) -> Vec<u64> {
        self.ground_truth.iter().map(|p| p.iter().sum()).collect()
    }
}

/// Symmetric Dirichlet draw by normalizing independent gamma variates.
pub fn dirichlet_sample<R: Rng + ?Sized>(alpha: f64, k: usize, rng: &mut R) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha.is_finite()) || k < 2 {
        return Err(Error::Domain(format!("dirichlet needs alpha > 0 and k >= 2, got {alpha}, {k}")));
    }
    let g = Gamma::new(alpha, 1.0).map_err(|e| Error::Domain(e.to_string()))?;
    loop {
        let mut p: Vec<f64> = (0..k).map(|_| g.sample(rng)).collect();
        let s: f64 = p.iter().sum();
        // tiny alpha can underflow every component
        if s > 0.0 && s.is_finite() {
            p.iter_mut().for_each(|x| *x /= s);
            return Ok(p);
        }
    }
}

/// Round `p_i * total` to the nearest integer (halves up).
pub fn ground_truth_counts(probs: &[f64], total: u64) -> Result<Vec<u64>> {
    if total < 1 {
        return Err(Error::Domain("total must be at least 1".into()));
    }
    let out: Vec<u64> = probs.iter().map(|&p| (p * total as f64).round() as u64).collect();
    if out.iter().all(|&x| x == 0) {
        return Err(Error::Degenerate(format!(
            "every category rounds to zero at total {total}"
        )));
    }
    Ok(out)
}

/// Multivariate hypergeometric draw of `n` elements without replacement,
/// one conditional univariate draw per category.
pub fn mvhg_sample<R: Rng + ?Sized>(population: &[u64], n: u64, rng: &mut R) -> Result<Vec<u32>> {
    let mut remaining: u64 = population.iter().sum();
    if n > remaining {
        return Err(Error::Domain(format!(
            "cannot draw {n} elements from a population of {remaining}"
        )));
    }
    let mut left = n;
    let mut out = vec![0u32; population.len()];
    let last = population.len().saturating_sub(1);
    for (i, &size) in population.iter().enumerate() {
        if left == 0 {
            break;
        }
        let c = if i == last || left == remaining {
            left.min(size)
        } else {
            match Hypergeometric::new(remaining, size, left) {
                Ok(d) => d.sample(rng),
                // rand_distr rejects some small-mode cases whose starting
                // probability it cannot represent
                Err(_) => hypergeom_inversion(remaining, size, left, rng),
            }
        };
        out[i] = c as u32;
        left -= c;
        remaining -= size;
    }
    Ok(out)
}

/// Univariate hypergeometric draw by sequential inversion from the lowest
/// feasible value, with the starting probability taken in log space.
pub fn hypergeom_inversion<R: Rng + ?Sized>(total: u64, feature: u64, n: u64, rng: &mut R) -> u64 {
    let other = total - feature;
    let lo = n.saturating_sub(other);
    let hi = n.min(feature);
    let (f, o, nf, t) = (feature as f64, other as f64, n as f64, total as f64);
    let mut p = (lbinom(f, lo as f64) + lbinom(o, nf - lo as f64) - lbinom(t, nf)).exp();
    let mut u: f64 = rng.random();
    let mut x = lo;
    while x < hi && u > p {
        u -= p;
        let xf = x as f64;
        p *= (f - xf) * (nf - xf) / ((xf + 1.0) * (o - nf + xf + 1.0));
        x += 1;
    }
    x
}

/// Inclusive depth range for a distribution of `total` elements.
pub fn depth_range(total: u64, f_min: f64, f_max: f64) -> (u64, u64) {
    let hi = ((f_max * total as f64).floor() as u64).min(total);
    let lo = ((f_min * total as f64).ceil() as u64).max(2).min(hi);
    (lo, hi)
}

pub fn simulate_dataset(config: &SimulationConfig) -> Result<SimulatedDataset> {
    config.validate()?;
    let m = config.num_distributions;
    let k = config.num_categories;
    let mut prob_rng = rng_stream(config.seed, 0);
    let mut sample_rng = rng_stream(config.seed, 1);

    let ground_truth: Vec<Vec<u64>> = match &config.ground_truth {
        Some(gt) => gt.clone(),
        None => {
            let mut probs: Vec<Option<Vec<f64>>> = vec![None; m];
            let group_of = |i: usize| config.shared_prob_groups.iter().find(|g| g.contains(&i));
            for i in 0..m {
                if probs[i].is_some() {
                    continue;
                }
                let p = dirichlet_sample(config.dirichlet_alpha, k, &mut prob_rng)?;
                match group_of(i) {
                    Some(g) => g.iter().for_each(|&j| probs[j] = Some(p.clone())),
                    None => probs[i] = Some(p),
                }
            }
            probs
                .into_iter()
                .enumerate()
                .map(|(i, p)| ground_truth_counts(&p.expect("drawn above"), config.total_for(i)))
                .collect::<Result<_>>()?
        }
    };

    let t = config.trials_per_distribution;
    let mut counts = CountMatrix::zeros(m * t, k);
    let mut labels = Vec::with_capacity(m * t);
    for (d, pop) in ground_truth.iter().enumerate() {
        let effective: u64 = pop.iter().sum();
        let reference = config.depth_reference_total.unwrap_or(effective);
        let (lo, hi) = depth_range(reference, config.sample_fraction_min, config.sample_fraction_max);
        let (lo, hi) = (lo.min(effective), hi.min(effective));
        for r in 0..t {
            let n = sample_rng.random_range(lo..=hi);
            let row = mvhg_sample(pop, n, &mut sample_rng)?;
            counts.row_mut(d * t + r).copy_from_slice(&row);
            labels.push(d);
        }
    }
    Ok(SimulatedDataset {
        counts,
        labels,
        ground_truth,
    })
}
