//! Exact and relaxed hypergeometric likelihoods, the baseline count
//! likelihoods, and the feasibility penalty.
//!
//! The hypergeometric log-pmf of a draw `c` from an urn holding `N_i` balls of
//! colour `i` is
//!
//! ```text
//! log P(c | N) = sum_i log C(N_i, c_i) - log C(sum_i N_i, sum_i c_i)
//! ```
//!
//! With the factorials in the binomial coefficient replaced by gamma
//! functions the expression is defined for real `N_i >= c_i` and
//! differentiable, so `N` can be fitted by gradient descent. Estimates below
//! an observed count are infeasible; they are clamped up to the count before
//! the likelihood is evaluated and a hinge penalty on the raw values supplies
//! the gradient that the clamp removes.

use statrs::function::gamma;

use crate::data::{CountMatrix, WeightedRows};
use crate::error::{Error, Result};

/// Multiplier on the violation penalty, optionally ramped during training.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltyConfig {
    pub weight: f64,
    #[serde(default = "one")]
    pub weight_min: f64,
    #[serde(default = "one")]
    pub weight_max: f64,
    #[serde(default)]
    pub ramp_epochs: usize,
}

fn one() -> f64 {
    1.0
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self::constant(1.0)
    }
}

impl PenaltyConfig {
    pub fn constant(weight: f64) -> Self {
        Self {
            weight,
            weight_min: weight,
            weight_max: weight,
            ramp_epochs: 0,
        }
    }

    /// Linear ramp from `min` to `max` over `ramp_epochs`, flat afterwards.
    pub fn ramp(min: f64, max: f64, ramp_epochs: usize) -> Self {
        Self {
            weight: max,
            weight_min: min,
            weight_max: max,
            ramp_epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.weight >= 0.0
            && self.weight_min >= 0.0
            && self.weight_min <= self.weight_max
            && self.weight_max.is_finite();
        if !ok {
            return Err(Error::Validation(format!(
                "penalty needs 0 <= weight_min <= weight_max and weight >= 0, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Weight in effect at `epoch` (0-based).
    pub fn weight_at(&self, epoch: usize) -> f64 {
        if self.ramp_epochs == 0 {
            return self.weight;
        }
        let t = (epoch as f64 / self.ramp_epochs as f64).min(1.0);
        self.weight_min + t * (self.weight_max - self.weight_min)
    }
}

fn check_positive(x: f64, what: &str) -> Result<()> {
    if !(x.is_finite() && x > 0.0) {
        return Err(Error::Domain(format!("{what} needs a positive finite argument, got {x}")));
    }
    Ok(())
}

/// `log Γ(x)` for `x > 0`.
pub fn log_gamma(x: f64) -> Result<f64> {
    check_positive(x, "log_gamma")?;
    Ok(gamma::ln_gamma(x))
}

/// `ψ(x) = d/dx log Γ(x)` for `x > 0`.
pub fn digamma(x: f64) -> Result<f64> {
    check_positive(x, "digamma")?;
    Ok(gamma::digamma(x))
}

/// `log C(a, b)` with factorials replaced by gamma functions.
pub fn log_binomial_relaxed(a: f64, b: f64) -> Result<f64> {
    if !(a >= 0.0 && b >= 0.0) || !a.is_finite() || !b.is_finite() {
        return Err(Error::Domain(format!(
            "log_binomial_relaxed needs finite non-negative arguments, got ({a}, {b})"
        )));
    }
    if b > a {
        return Err(Error::Domain(format!(
            "log_binomial_relaxed needs a >= b, got ({a}, {b})"
        )));
    }
    Ok(lbinom(a, b))
}

#[inline]
pub(crate) fn lbinom(a: f64, b: f64) -> f64 {
    gamma::ln_gamma(a + 1.0) - gamma::ln_gamma(b + 1.0) - gamma::ln_gamma(a - b + 1.0)
}

fn check_feasible(c: &[u32], est: &[f64]) -> Result<()> {
    if c.len() != est.len() {
        return Err(Error::Shape(format!(
            "{} counts against {} estimates",
            c.len(),
            est.len()
        )));
    }
    for (i, (&ci, &ni)) in c.iter().zip(est).enumerate() {
        if !ni.is_finite() || ni < 0.0 {
            return Err(Error::Domain(format!("estimate {i} is {ni}")));
        }
        if (ci as f64) > ni {
            return Err(Error::Precondition(format!(
                "count {ci} exceeds estimate {ni} in category {i}; threshold estimates first"
            )));
        }
    }
    Ok(())
}

/// Relaxed hypergeometric log-pmf of one observation.
pub fn hypergeom_log_pmf(c: &[u32], est: &[f64]) -> Result<f64> {
    check_feasible(c, est)?;
    let n: u64 = c.iter().map(|&x| x as u64).sum();
    Ok(-row_nll(c, n, est, est.iter().sum()))
}

/// Negative log-likelihood of one feasible row, no checks.
#[inline]
pub(crate) fn row_nll(c: &[u32], n: u64, est: &[f64], est_total: f64) -> f64 {
    let mut ll = -lbinom(est_total, n as f64);
    for (&ci, &ni) in c.iter().zip(est) {
        ll += lbinom(ni, ci as f64);
    }
    -ll
}

/// Adds `scale * d(row_nll)/d(est)` into `grad`, no checks.
#[inline]
pub(crate) fn row_nll_grad(c: &[u32], n: u64, est: &[f64], est_total: f64, scale: f64, grad: &mut [f64]) {
    let shared = gamma::digamma(est_total + 1.0) - gamma::digamma(est_total - n as f64 + 1.0);
    for ((g, &ci), &ni) in grad.iter_mut().zip(c).zip(est) {
        let own = gamma::digamma(ni - ci as f64 + 1.0) - gamma::digamma(ni + 1.0);
        *g += scale * (shared + own);
    }
}

fn check_batch(batch: &CountMatrix, est: &[f64]) -> Result<()> {
    if batch.n_cols() != est.len() {
        return Err(Error::Shape(format!(
            "batch has {} categories, estimate has {}",
            batch.n_cols(),
            est.len()
        )));
    }
    check_feasible(&batch.column_max(), est)
}

/// Negative hypergeometric log-likelihood of a batch sharing one estimate.
pub fn hypergeom_nll(batch: &CountMatrix, est: &[f64]) -> Result<f64> {
    check_batch(batch, est)?;
    let total: f64 = est.iter().sum();
    Ok((0..batch.n_rows())
        .map(|t| row_nll(batch.row(t), batch.row_total(t), est, total))
        .sum())
}

/// Gradient of [`hypergeom_nll`] with respect to the estimate.
pub fn hypergeom_nll_grad(batch: &CountMatrix, est: &[f64]) -> Result<Vec<f64>> {
    check_batch(batch, est)?;
    let total: f64 = est.iter().sum();
    let mut grad = vec![0.0; est.len()];
    for t in 0..batch.n_rows() {
        row_nll_grad(batch.row(t), batch.row_total(t), est, total, 1.0, &mut grad);
    }
    Ok(grad)
}

impl WeightedRows {
    /// Same value as [`hypergeom_nll`] on the uncollapsed matrix.
    pub fn hypergeom_nll(&self, est: &[f64]) -> Result<f64> {
        check_feasible(&self.column_max(), est)?;
        Ok(self.nll_unchecked(est))
    }

    pub(crate) fn nll_unchecked(&self, est: &[f64]) -> f64 {
        let total: f64 = est.iter().sum();
        self.iter().map(|(c, n, w)| w * row_nll(c, n, est, total)).sum()
    }

    pub fn hypergeom_nll_grad(&self, est: &[f64]) -> Result<Vec<f64>> {
        check_feasible(&self.column_max(), est)?;
        let total: f64 = est.iter().sum();
        let mut grad = vec![0.0; est.len()];
        for (c, n, w) in self.iter() {
            row_nll_grad(c, n, est, total, w, &mut grad);
        }
        Ok(grad)
    }
}

/// Sufficient statistics of a batch for estimates shared by every row.
///
/// With one estimate for all rows, each term of the summed log-likelihood
/// depends on a row only through a single count `c_{t,i}` or the depth
/// `n_t`, so per-category count histograms and a depth histogram give the
/// exact batch value at a cost proportional to the largest count.
#[derive(Debug, Clone)]
pub struct BatchStats {
    rows: f64,
    /// `per_category[i][v]` = number of rows with `c_{t,i} = v`.
    per_category: Vec<Vec<f64>>,
    /// `depths[n]` = number of rows of depth `n`.
    depths: Vec<f64>,
    column_max: Vec<u32>,
    /// `sum_t [sum_i log c_{t,i}! - log n_t!]`, independent of the estimate.
    constant: f64,
}

impl BatchStats {
    pub fn from_matrix(batch: &CountMatrix) -> Self {
        let k = batch.n_cols();
        let column_max = batch.column_max();
        let mut per_category: Vec<Vec<f64>> =
            column_max.iter().map(|&m| vec![0.0; m as usize + 1]).collect();
        let max_depth = (0..batch.n_rows()).map(|t| batch.row_total(t)).max().unwrap_or(0);
        let mut depths = vec![0.0; max_depth as usize + 1];
        for t in 0..batch.n_rows() {
            let row = batch.row(t);
            for i in 0..k {
                per_category[i][row[i] as usize] += 1.0;
            }
            depths[batch.row_total(t) as usize] += 1.0;
        }
        let mut constant = 0.0;
        for hist in &per_category {
            for (v, &h) in hist.iter().enumerate() {
                if h > 0.0 {
                    constant += h * gamma::ln_gamma(v as f64 + 1.0);
                }
            }
        }
        for (n, &h) in depths.iter().enumerate() {
            if h > 0.0 {
                constant -= h * gamma::ln_gamma(n as f64 + 1.0);
            }
        }
        Self {
            rows: batch.n_rows() as f64,
            per_category,
            depths,
            column_max,
            constant,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.rows as usize
    }

    pub fn n_cols(&self) -> usize {
        self.column_max.len()
    }

    pub fn column_max(&self) -> &[u32] {
        &self.column_max
    }

    pub fn nll(&self, est: &[f64]) -> Result<f64> {
        check_feasible(&self.column_max, est)?;
        Ok(self.nll_unchecked(est))
    }

    pub(crate) fn nll_unchecked(&self, est: &[f64]) -> f64 {
        if self.rows == 0.0 {
            return 0.0;
        }
        let lg = gamma::ln_gamma;
        let total: f64 = est.iter().sum();
        let mut nll = self.constant + self.rows * lg(total + 1.0);
        for (n, &h) in self.depths.iter().enumerate() {
            if h > 0.0 {
                nll -= h * lg(total - n as f64 + 1.0);
            }
        }
        for (hist, &ni) in self.per_category.iter().zip(est) {
            nll -= self.rows * lg(ni + 1.0);
            for (v, &h) in hist.iter().enumerate() {
                if h > 0.0 {
                    nll += h * lg(ni - v as f64 + 1.0);
                }
            }
        }
        nll
    }

    pub fn grad(&self, est: &[f64]) -> Result<Vec<f64>> {
        check_feasible(&self.column_max, est)?;
        Ok(self.grad_unchecked(est))
    }

    pub(crate) fn grad_unchecked(&self, est: &[f64]) -> Vec<f64> {
        if self.rows == 0.0 {
            return vec![0.0; est.len()];
        }
        let dg = gamma::digamma;
        let total: f64 = est.iter().sum();
        let mut shared = self.rows * dg(total + 1.0);
        for (n, &h) in self.depths.iter().enumerate() {
            if h > 0.0 {
                shared -= h * dg(total - n as f64 + 1.0);
            }
        }
        self.per_category
            .iter()
            .zip(est)
            .map(|(hist, &ni)| {
                let mut g = shared - self.rows * dg(ni + 1.0);
                for (v, &h) in hist.iter().enumerate() {
                    if h > 0.0 {
                        g += h * dg(ni - v as f64 + 1.0);
                    }
                }
                g
            })
            .collect()
    }
}

/// `sum_i max(0, c_i - raw_i)`; zero exactly when `raw` dominates `c`.
pub fn violation_penalty(c: &[u32], raw: &[f64]) -> f64 {
    c.iter()
        .zip(raw)
        .map(|(&ci, &ri)| (ci as f64 - ri).max(0.0))
        .sum()
}

/// Clamp every estimate up to its observed count.
pub fn threshold_estimates(c: &[u32], raw: &[f64]) -> Vec<f64> {
    c.iter().zip(raw).map(|(&ci, &ri)| ri.max(ci as f64)).collect()
}

/// `sum_i c_i log p_i`. The multinomial coefficient is left out: it does not
/// depend on `p`.
pub fn multinomial_log_lik(c: &[u32], probs: &[f64]) -> Result<f64> {
    if c.len() != probs.len() {
        return Err(Error::Shape(format!("{} counts against {} probabilities", c.len(), probs.len())));
    }
    if probs.iter().any(|p| !(*p >= 0.0)) {
        return Err(Error::Domain("probabilities must be non-negative".into()));
    }
    let s: f64 = probs.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!("probabilities sum to {s}, not 1")));
    }
    let mut ll = 0.0;
    for (&ci, &p) in c.iter().zip(probs) {
        if ci == 0 {
            continue;
        }
        if p == 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        ll += ci as f64 * p.ln();
    }
    Ok(ll)
}

/// Independent Poisson log-likelihood, `sum_i c_i log λ_i - λ_i - log c_i!`.
pub fn poisson_log_lik(c: &[u32], rates: &[f64]) -> Result<f64> {
    if c.len() != rates.len() {
        return Err(Error::Shape(format!("{} counts against {} rates", c.len(), rates.len())));
    }
    let mut ll = 0.0;
    for (&ci, &lam) in c.iter().zip(rates) {
        check_positive(lam, "poisson rate")?;
        let k = ci as f64;
        ll += k * lam.ln() - lam - gamma::ln_gamma(k + 1.0);
    }
    Ok(ll)
}

/// KL divergence of `N(mean, exp(log_var))` (diagonal) from `N(0, I)`.
pub fn kl_diag_gaussian(mean: &[f64], log_var: &[f64]) -> f64 {
    0.5 * mean
        .iter()
        .zip(log_var)
        .map(|(&m, &lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const EULER: f64 = 0.577_215_664_901_532_9;

    fn ln_factorial(n: u64) -> f64 {
        (1..=n).map(|k| (k as f64).ln()).sum()
    }

    // Exact binomial in integer arithmetic (fits u128 for a <= 100).
    fn binom_exact(a: u64, b: u64) -> u128 {
        let b = b.min(a - b);
        let mut r: u128 = 1;
        for i in 0..b {
            r = r * (a - i) as u128 / (i + 1) as u128;
        }
        r
    }

    #[test]
    fn log_gamma_identities() {
        assert!(log_gamma(1.0).unwrap().abs() < 1e-12);
        assert!(log_gamma(2.0).unwrap().abs() < 1e-12);
        let half = 0.5 * std::f64::consts::PI.ln();
        assert!((log_gamma(0.5).unwrap() - half).abs() < 1e-10);
        assert!((log_gamma(0.5).unwrap() - 0.572_364_942_9).abs() < 1e-10);
    }

    #[test]
    fn log_gamma_against_log_factorials() {
        // absolute tolerance where the value is small, relative where an ulp exceeds it
        for n in [1u64, 2, 5, 10, 50, 100, 1000, 100_000, 9_999_999] {
            let exact = ln_factorial(n - 1);
            let got = log_gamma(n as f64).unwrap();
            let tol = if exact.abs() <= 100.0 { 1e-10 } else { 1e-13 * exact.abs() };
            assert!((got - exact).abs() <= tol, "n={n}: {got} vs {exact}");
        }
        // Γ(x+1) = x Γ(x) near the small end of the range
        for x in [1e-3, 0.01, 0.3, 0.77] {
            let lhs = log_gamma(x + 1.0).unwrap();
            let rhs = x.ln() + log_gamma(x).unwrap();
            assert!((lhs - rhs).abs() < 1e-10, "x={x}");
        }
    }

    #[test]
    fn special_function_domains() {
        assert!(matches!(log_gamma(0.0), Err(Error::Domain(_))));
        assert!(matches!(log_gamma(-1.5), Err(Error::Domain(_))));
        assert!(matches!(log_gamma(f64::NAN), Err(Error::Domain(_))));
        assert!(matches!(log_gamma(f64::INFINITY), Err(Error::Domain(_))));
        assert!(matches!(digamma(0.0), Err(Error::Domain(_))));
        assert!(matches!(digamma(-2.0), Err(Error::Domain(_))));
    }

    #[test]
    fn digamma_values() {
        assert!((digamma(1.0).unwrap() + EULER).abs() < 1e-8);
        assert!((digamma(2.0).unwrap() - (1.0 - EULER)).abs() < 1e-8);
        let h = 1e-5;
        let fd = (log_gamma(10.0 + h).unwrap() - log_gamma(10.0 - h).unwrap()) / (2.0 * h);
        assert!((digamma(10.0).unwrap() - fd).abs() < 1e-6);
        // recurrence across the whole range
        for x in [1e-3, 0.2, 3.7, 42.0, 1e4, 1e7] {
            let lhs = digamma(x + 1.0).unwrap();
            let rhs = digamma(x).unwrap() + 1.0 / x;
            assert!((lhs - rhs).abs() <= 1e-8 * rhs.abs().max(1.0), "x={x}");
        }
    }

    #[test]
    fn log_binomial_examples() {
        assert!((log_binomial_relaxed(5.0, 2.0).unwrap() - 10f64.ln()).abs() < 1e-12);
        for a in [0.0, 0.3, 7.0, 1234.5] {
            assert!(log_binomial_relaxed(a, 0.0).unwrap().abs() < 1e-9);
        }
        assert!((log_binomial_relaxed(2.5, 1.0).unwrap() - 2.5f64.ln()).abs() < 1e-12);
        assert!(matches!(log_binomial_relaxed(2.0, 3.0), Err(Error::Domain(_))));
        assert!(matches!(log_binomial_relaxed(-1.0, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn relaxed_binomial_matches_exact_integers() {
        for a in 0..=100u64 {
            for b in 0..=a {
                let exact = (binom_exact(a, b) as f64).ln();
                let got = log_binomial_relaxed(a as f64, b as f64).unwrap();
                assert!((got - exact).abs() < 1e-9, "C({a},{b}): {got} vs {exact}");
            }
        }
    }

    #[test]
    fn log_pmf_examples() {
        // C(7,2) C(3,1) / C(10,3) = 21 * 3 / 120
        let exact = (21.0f64 * 3.0 / 120.0).ln();
        let got = hypergeom_log_pmf(&[2, 1], &[7.0, 3.0]).unwrap();
        assert!((got - exact).abs() < 1e-12);
        assert!((got + 0.644_357).abs() < 1e-6);
        assert!(hypergeom_log_pmf(&[0, 0], &[4.2, 9.1]).unwrap().abs() < 1e-12);
        assert!(hypergeom_log_pmf(&[7, 3], &[7.0, 3.0]).unwrap().abs() < 1e-12);
        assert!(matches!(
            hypergeom_log_pmf(&[3, 1], &[2.0, 5.0]),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn pmf_normalizes_by_enumeration() {
        for n1 in 0..=12u32 {
            for n2 in 0..=(12 - n1) {
                let est = [n1 as f64, n2 as f64];
                for n in 0..=(n1 + n2) {
                    let mut total = 0.0;
                    for c1 in 0..=n.min(n1) {
                        let c2 = n - c1;
                        if c2 > n2 {
                            continue;
                        }
                        let lp = hypergeom_log_pmf(&[c1, c2], &est).unwrap();
                        assert!(lp <= 1e-12);
                        total += lp.exp();
                    }
                    assert!((total - 1.0).abs() < 1e-9, "N=({n1},{n2}) n={n}: {total}");
                }
            }
        }
    }

    #[test]
    fn nll_reductions() {
        let one = CountMatrix::from_rows(&[vec![2, 1]]).unwrap();
        let two = CountMatrix::from_rows(&[vec![2, 1], vec![2, 1]]).unwrap();
        let est = [7.0, 3.0];
        let lp = hypergeom_log_pmf(&[2, 1], &est).unwrap();
        assert!((hypergeom_nll(&one, &est).unwrap() + lp).abs() < 1e-12);
        assert!((hypergeom_nll(&two, &est).unwrap() - 2.0 * hypergeom_nll(&one, &est).unwrap()).abs() < 1e-12);
        let collapsed = two.collapse();
        assert!((collapsed.hypergeom_nll(&est).unwrap() - hypergeom_nll(&two, &est).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn batch_stats_agree_with_row_sums() {
        let batch = CountMatrix::from_rows(&[
            vec![3, 0, 5],
            vec![1, 2, 2],
            vec![3, 0, 5],
            vec![0, 4, 1],
        ])
        .unwrap();
        let stats = BatchStats::from_matrix(&batch);
        for est in [[3.0, 4.0, 5.0], [7.5, 4.25, 19.0], [300.0, 41.0, 12.5]] {
            let a = hypergeom_nll(&batch, &est).unwrap();
            let b = stats.nll(&est).unwrap();
            assert!((a - b).abs() < 1e-9 * a.abs().max(1.0), "{a} vs {b}");
            let ga = hypergeom_nll_grad(&batch, &est).unwrap();
            let gb = stats.grad(&est).unwrap();
            for (x, y) in ga.iter().zip(&gb) {
                assert!((x - y).abs() < 1e-9 * x.abs().max(1.0));
            }
        }
        assert!(matches!(stats.nll(&[2.0, 4.0, 5.0]), Err(Error::Precondition(_))));
        let empty = BatchStats::from_matrix(&CountMatrix::zeros(0, 2));
        assert_eq!(empty.nll(&[1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(empty.grad(&[1.0, 1.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn grad_edge_cases() {
        let empty = CountMatrix::zeros(0, 3);
        assert_eq!(hypergeom_nll_grad(&empty, &[1.0, 2.0, 3.0]).unwrap(), vec![0.0; 3]);
        let sym = CountMatrix::from_rows(&[vec![1, 1], vec![1, 1], vec![1, 1]]).unwrap();
        let g = hypergeom_nll_grad(&sym, &[4.5, 4.5]).unwrap();
        assert!((g[0] - g[1]).abs() < 1e-14);
    }

    fn finite_diff(batch: &CountMatrix, est: &[f64], i: usize, h: f64) -> f64 {
        let mut up = est.to_vec();
        let mut dn = est.to_vec();
        up[i] += h;
        dn[i] -= h;
        (hypergeom_nll(batch, &up).unwrap() - hypergeom_nll(batch, &dn).unwrap()) / (2.0 * h)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn grad_matches_finite_differences(
            rows in prop::collection::vec(prop::collection::vec(0u32..20, 3), 1..6),
            slack in prop::collection::vec(0.5f64..40.0, 3),
        ) {
            let batch = CountMatrix::from_rows(&rows).unwrap();
            let cmax = batch.column_max();
            let est: Vec<f64> = cmax.iter().zip(&slack).map(|(&c, s)| c as f64 + s).collect();
            let grad = hypergeom_nll_grad(&batch, &est).unwrap();
            for i in 0..est.len() {
                let fd = finite_diff(&batch, &est, i, 1e-4);
                let denom = fd.abs().max(grad[i].abs()).max(1e-3);
                prop_assert!((grad[i] - fd).abs() / denom < 1e-4, "i={} grad={} fd={}", i, grad[i], fd);
            }
        }

        #[test]
        fn permutation_equivariance(
            rows in prop::collection::vec(prop::collection::vec(0u32..15, 4), 1..5),
            slack in prop::collection::vec(0.0f64..30.0, 4),
            perm in Just(vec![2usize, 0, 3, 1]).prop_shuffle(),
        ) {
            let batch = CountMatrix::from_rows(&rows).unwrap();
            let est: Vec<f64> = batch.column_max().iter().zip(&slack).map(|(&c, s)| c as f64 + s).collect();
            let prow: Vec<Vec<u32>> = rows.iter().map(|r| perm.iter().map(|&j| r[j]).collect()).collect();
            let pbatch = CountMatrix::from_rows(&prow).unwrap();
            let pest: Vec<f64> = perm.iter().map(|&j| est[j]).collect();
            let a = hypergeom_nll(&batch, &est).unwrap();
            let b = hypergeom_nll(&pbatch, &pest).unwrap();
            prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
            let g = hypergeom_nll_grad(&batch, &est).unwrap();
            let pg = hypergeom_nll_grad(&pbatch, &pest).unwrap();
            for (k, &j) in perm.iter().enumerate() {
                prop_assert!((pg[k] - g[j]).abs() <= 1e-10 * g[j].abs().max(1.0));
            }
        }

        #[test]
        fn threshold_clears_penalty(
            c in prop::collection::vec(0u32..100, 2..8),
            raw in prop::collection::vec(-50.0f64..150.0, 8),
        ) {
            let raw = &raw[..c.len()];
            let th = threshold_estimates(&c, raw);
            prop_assert_eq!(violation_penalty(&c, &th), 0.0);
            prop_assert!(violation_penalty(&c, raw) >= 0.0);
            prop_assert!(hypergeom_log_pmf(&c, &th).is_ok());
            prop_assert_eq!(threshold_estimates(&c, &th), th.clone());
        }

        #[test]
        fn kl_is_non_negative(
            mean in prop::collection::vec(-5.0f64..5.0, 1..6),
            lv in prop::collection::vec(-5.0f64..5.0, 6),
        ) {
            let lv = &lv[..mean.len()];
            let kl = kl_diag_gaussian(&mean, lv);
            prop_assert!(kl >= 0.0);
            if mean.iter().chain(lv).any(|x| x.abs() > 1e-3) {
                prop_assert!(kl > 0.0);
            }
        }
    }

    #[test]
    fn penalty_and_threshold_examples() {
        assert_eq!(violation_penalty(&[5, 2], &[3.0, 10.0]), 2.0);
        assert_eq!(violation_penalty(&[5, 2], &[5.0, 2.0]), 0.0);
        assert_eq!(violation_penalty(&[5, 2], &[3.0, 1.0]), 3.0);
        assert_eq!(threshold_estimates(&[5, 2], &[3.0, 10.0]), vec![5.0, 10.0]);
        assert_eq!(threshold_estimates(&[5, 2], &[6.0, 10.0]), vec![6.0, 10.0]);
        assert_eq!(threshold_estimates(&[4, 1], &[0.0, 0.0]), vec![4.0, 1.0]);
    }

    #[test]
    fn multinomial_examples() {
        let v = multinomial_log_lik(&[1, 0], &[0.5, 0.5]).unwrap();
        assert!((v + std::f64::consts::LN_2).abs() < 1e-6);
        assert_eq!(multinomial_log_lik(&[0, 0], &[0.5, 0.5]).unwrap(), 0.0);
        let v = multinomial_log_lik(&[2, 3], &[0.4, 0.6]).unwrap();
        assert!((v - (2.0 * 0.4f64.ln() + 3.0 * 0.6f64.ln())).abs() < 1e-12);
        assert_eq!(multinomial_log_lik(&[0, 3], &[0.0, 1.0]).unwrap(), 3.0 * 1f64.ln());
        assert_eq!(multinomial_log_lik(&[1, 3], &[0.0, 1.0]).unwrap(), f64::NEG_INFINITY);
        assert!(multinomial_log_lik(&[1, 3], &[0.3, 0.3]).is_err());
    }

    #[test]
    fn poisson_examples() {
        assert!((poisson_log_lik(&[0], &[1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!((poisson_log_lik(&[1], &[1.0]).unwrap() + 1.0).abs() < 1e-12);
        let exact = 2.0 * 3f64.ln() - 3.0 - 2f64.ln();
        let got = poisson_log_lik(&[2], &[3.0]).unwrap();
        assert!((got - exact).abs() < 1e-12);
        assert!((got + 1.495_922).abs() < 1e-6);
        assert!(matches!(poisson_log_lik(&[2], &[0.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_diag_gaussian(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((kl_diag_gaussian(&[1.0], &[0.0]) - 0.5).abs() < 1e-15);
        let e = std::f64::consts::E;
        assert!((kl_diag_gaussian(&[0.0], &[1.0]) - (e - 2.0) / 2.0).abs() < 1e-12);
        assert!((kl_diag_gaussian(&[0.0], &[1.0]) - 0.359_141).abs() < 1e-6);
    }

    #[test]
    fn penalty_ramp() {
        let p = PenaltyConfig::ramp(1.0, 100.0, 10);
        assert_eq!(p.weight_at(0), 1.0);
        assert!((p.weight_at(5) - 50.5).abs() < 1e-12);
        assert_eq!(p.weight_at(10), 100.0);
        assert_eq!(p.weight_at(500), 100.0);
        assert_eq!(PenaltyConfig::constant(2.0).weight_at(7), 2.0);
        assert!(PenaltyConfig::ramp(3.0, 1.0, 5).validate().is_err());
    }
}
