//! Estimation error metrics, k-means on latent codes, and partition agreement.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `sum_i |est_i - truth_i|`.
pub fn manhattan_error(est: &[f64], truth: &[f64]) -> Result<f64> {
    if est.len() != truth.len() {
        return Err(Error::Shape(format!("{} estimates against {} truths", est.len(), truth.len())));
    }
    Ok(est.iter().zip(truth).map(|(a, b)| (a - b).abs()).sum())
}

fn check_shapes(est: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<()> {
    if est.len() != truth.len() {
        return Err(Error::Shape(format!("{} estimate rows against {} truth rows", est.len(), truth.len())));
    }
    for (i, (e, t)) in est.iter().zip(truth).enumerate() {
        if e.len() != t.len() {
            return Err(Error::Shape(format!("row {i}: {} estimates against {} truths", e.len(), t.len())));
        }
    }
    Ok(())
}

/// Mean absolute error over every entry.
pub fn mae(est: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<f64> {
    check_shapes(est, truth)?;
    let n: usize = truth.iter().map(Vec::len).sum();
    if n == 0 {
        return Err(Error::UndefinedMetric("MAE of an empty matrix".into()));
    }
    let s: f64 = est
        .iter()
        .zip(truth)
        .flat_map(|(e, t)| e.iter().zip(t).map(|(a, b)| (a - b).abs()))
        .sum();
    Ok(s / n as f64)
}

/// Median absolute percentage error over entries whose truth is positive.
pub fn mpe(est: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<f64> {
    check_shapes(est, truth)?;
    let mut pct: Vec<f64> = est
        .iter()
        .zip(truth)
        .flat_map(|(e, t)| e.iter().zip(t))
        .filter(|(_, &b)| b > 0.0)
        .map(|(a, b)| 100.0 * (a - b).abs() / b)
        .collect();
    if pct.is_empty() {
        return Err(Error::UndefinedMetric("MPE needs at least one positive truth entry".into()));
    }
    Ok(median(&mut pct))
}

pub(crate) fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Chance-corrected agreement between two partitions.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("labelings of length {} and {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::UndefinedMetric("ARI needs at least two items".into()));
    }
    let pairs = |x: f64| x * (x - 1.0) / 2.0;
    let mut joint: HashMap<(usize, usize), f64> = HashMap::new();
    let mut rows: HashMap<usize, f64> = HashMap::new();
    let mut cols: HashMap<usize, f64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1.0;
        *rows.entry(x).or_default() += 1.0;
        *cols.entry(y).or_default() += 1.0;
    }
    let index: f64 = joint.values().map(|&v| pairs(v)).sum();
    let sa: f64 = rows.values().map(|&v| pairs(v)).sum();
    let sb: f64 = cols.values().map(|&v| pairs(v)).sum();
    let expected = sa * sb / pairs(a.len() as f64);
    let max = 0.5 * (sa + sb);
    if (max - expected).abs() < 1e-12 {
        // both partitions trivial in the same way
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Sample Pearson correlation.
pub fn pearson_correlation(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("vectors of length {} and {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::UndefinedMetric("correlation needs at least two points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedMetric("correlation with a constant vector".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Per-row `(t_total, t_unique)`: the row sum and the number of entries that
/// round to a nonzero integer.
pub fn estimate_summary(est: &[Vec<f64>]) -> Vec<(f64, usize)> {
    est.iter()
        .map(|r| (r.iter().sum(), r.iter().filter(|&&x| x > 0.5).count()))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// ARI against the reference labels, when they were supplied.
    pub ari: Option<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding: the first centroid is a uniform data point, each next
/// one a data point drawn with probability proportional to its squared
/// distance from the nearest centroid chosen so far.
fn seed_centroids<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            // every point coincides with a centroid
            rng.random_range(0..points.len())
        };
        centroids.push(points[next].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

fn lloyd<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, rng: &mut R, max_iter: usize) -> KMeansResult {
    let dim = points[0].len();
    let mut centroids = seed_centroids(points, k, rng);
    let mut labels = vec![usize::MAX; points.len()];
    for _ in 0..max_iter {
        let mut changed = false;
        for (p, l) in points.iter().zip(labels.iter_mut()) {
            let best = (0..k)
                .min_by(|&a, &b| sq_dist(p, &centroids[a]).total_cmp(&sq_dist(p, &centroids[b])))
                .expect("k >= 1");
            if *l != best {
                *l = best;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut sizes = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            sizes[l] += 1;
            sums[l].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        for c in 0..k {
            if sizes[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / sizes[c] as f64).collect();
            }
        }
        // Empty clusters take the point farthest from its own centroid.
        for c in 0..k {
            if sizes[c] == 0 {
                let far = (0..points.len())
                    .filter(|&i| sizes[labels[i]] > 1)
                    .max_by(|&a, &b| {
                        sq_dist(&points[a], &centroids[labels[a]])
                            .total_cmp(&sq_dist(&points[b], &centroids[labels[b]]))
                    });
                if let Some(i) = far {
                    sizes[labels[i]] -= 1;
                    labels[i] = c;
                    sizes[c] = 1;
                    centroids[c] = points[i].clone();
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let inertia = points
        .iter()
        .zip(&labels)
        .map(|(p, &l)| sq_dist(p, &centroids[l]))
        .sum();
    KMeansResult {
        labels,
        centroids,
        inertia,
        ari: None,
    }
}

/// Lloyd's k-means from `restarts` random k-means++ point initializations;
/// the restart with the lowest inertia is kept. With `reference` labels its
/// ARI against them is filled in.
pub fn kmeans<R: Rng + ?Sized>(
    points: &[Vec<f64>],
    k: usize,
    restarts: usize,
    rng: &mut R,
    reference: Option<&[usize]>,
) -> Result<KMeansResult> {
    if k == 0 || k > points.len() {
        return Err(Error::Validation(format!("k = {k} with {} points", points.len())));
    }
    if let Some(r) = reference {
        if r.len() != points.len() {
            return Err(Error::Shape("reference labels do not match the points".into()));
        }
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Shape("points have different dimensions".into()));
    }
    let mut best: Option<KMeansResult> = None;
    for _ in 0..restarts.max(1) {
        let run = lloyd(points, k, rng, 300);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    let mut best = best.expect("at least one restart");
    if let Some(r) = reference {
        best.ari = Some(adjusted_rand_index(r, &best.labels)?);
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionMetrics {
    pub label: usize,
    pub rows: usize,
    pub mpe: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ari: Option<f64>,
    pub mpe: f64,
    pub mae: f64,
    /// Mean over rows of the per-row Manhattan error.
    pub manhattan: f64,
    pub per_distribution: Vec<DistributionMetrics>,
}

impl MetricReport {
    /// Pooled MPE/MAE/Manhattan plus a breakdown per label.
    pub fn from_estimates(
        est: &[Vec<f64>],
        truth: &[Vec<f64>],
        labels: &[usize],
        ari: Option<f64>,
    ) -> Result<Self> {
        check_shapes(est, truth)?;
        if labels.len() != est.len() {
            return Err(Error::Shape("labels do not match the estimate rows".into()));
        }
        let manhattan = est
            .iter()
            .zip(truth)
            .map(|(e, t)| manhattan_error(e, t))
            .sum::<Result<f64>>()?
            / est.len().max(1) as f64;
        let mut groups: Vec<usize> = labels.to_vec();
        groups.sort_unstable();
        groups.dedup();
        let mut per_distribution = Vec::with_capacity(groups.len());
        for g in groups {
            let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == g).collect();
            let e: Vec<Vec<f64>> = idx.iter().map(|&i| est[i].clone()).collect();
            let t: Vec<Vec<f64>> = idx.iter().map(|&i| truth[i].clone()).collect();
            per_distribution.push(DistributionMetrics {
                label: g,
                rows: idx.len(),
                mpe: mpe(&e, &t)?,
                mae: mae(&e, &t)?,
            });
        }
        Ok(Self {
            ari,
            mpe: mpe(est, truth)?,
            mae: mae(est, truth)?,
            manhattan,
            per_distribution,
        })
    }

    pub const CSV_HEADER: &'static str = "ari,mpe,mae,manhattan";

    pub fn csv_row(&self) -> String {
        let ari = self.ari.map_or_else(String::new, |a| a.to_string());
        format!("{ari},{},{},{}", self.mpe, self.mae, self.manhattan)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::rng_stream;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn manhattan_examples() {
        assert_eq!(manhattan_error(&[70.0, 30.0], &[70.0, 30.0]).unwrap(), 0.0);
        assert_eq!(manhattan_error(&[68.0, 33.0], &[70.0, 30.0]).unwrap(), 5.0);
        assert_eq!(
            manhattan_error(&[1.0, 9.0], &[4.0, 2.0]).unwrap(),
            manhattan_error(&[4.0, 2.0], &[1.0, 9.0]).unwrap()
        );
        assert!(manhattan_error(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mae_examples() {
        let t = vec![vec![1.0, 2.0, 3.0]];
        assert_eq!(mae(&t, &t).unwrap(), 0.0);
        assert_eq!(mae(&[vec![1.0, 5.0, 3.0]], &t).unwrap(), 1.0);
        // by hand: |2-1| + |0-4| + |7-7| + |1.5-3| = 6.5 over 4 entries
        let e = vec![vec![2.0, 0.0], vec![7.0, 1.5]];
        let t = vec![vec![1.0, 4.0], vec![7.0, 3.0]];
        assert!((mae(&e, &t).unwrap() - 1.625).abs() < 1e-15);
        assert!(mae(&e, &t[..1]).is_err());
    }

    #[test]
    fn mpe_examples() {
        let t = vec![vec![10.0, 100.0]];
        assert_eq!(mpe(&t, &t).unwrap(), 0.0);
        assert!((mpe(&[vec![11.0, 100.0]], &t).unwrap() - 5.0).abs() < 1e-12);
        // zero truths are skipped; percentages {50, 10, 25} -> median 25
        let e = vec![vec![3.0, 5.0, 9.0], vec![12.5, 1.0, 0.0]];
        let t = vec![vec![2.0, 0.0, 10.0], vec![10.0, 0.0, 0.0]];
        assert!((mpe(&e, &t).unwrap() - 25.0).abs() < 1e-12);
        assert!(matches!(mpe(&[vec![1.0]], &[vec![0.0]]), Err(Error::UndefinedMetric(_))));
    }

    proptest! {
        #[test]
        fn mpe_is_brute_force_median(
            pairs in prop::collection::vec((0.0f64..50.0, 0.0f64..50.0), 1..40)
        ) {
            let est: Vec<Vec<f64>> = pairs.iter().map(|p| vec![p.0]).collect();
            let truth: Vec<Vec<f64>> = pairs.iter().map(|p| vec![p.1.floor()]).collect();
            let pct: Vec<f64> = pairs.iter().filter(|p| p.1.floor() > 0.0)
                .map(|p| 100.0 * (p.0 - p.1.floor()).abs() / p.1.floor()).collect();
            match mpe(&est, &truth) {
                Err(_) => prop_assert!(pct.is_empty()),
                Ok(m) => {
                    // a median has at least half the values on each side
                    let below = pct.iter().filter(|&&x| x <= m + 1e-9).count();
                    let above = pct.iter().filter(|&&x| x >= m - 1e-9).count();
                    prop_assert!(2 * below >= pct.len() && 2 * above >= pct.len());
                }
            }
        }

        #[test]
        fn ari_symmetric_and_relabel_invariant(
            a in prop::collection::vec(0usize..4, 2..30),
            seed in 0usize..1000,
        ) {
            let b: Vec<usize> = a.iter().enumerate().map(|(i, &x)| (x + i * seed) % 3).collect();
            let ab = adjusted_rand_index(&a, &b).unwrap();
            let ba = adjusted_rand_index(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            let relabeled: Vec<usize> = a.iter().map(|&x| 10 + 3 * (3 - x)).collect();
            prop_assert!((adjusted_rand_index(&relabeled, &b).unwrap() - ab).abs() < 1e-12);
            prop_assert!(ab <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn ari_examples() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(adjusted_rand_index(&[2, 0, 1, 1, 2], &[2, 0, 1, 1, 2]).unwrap(), 1.0);
        // contingency all ones: index 0, expected 2*2/6, max 2 -> (0 - 2/3) / (2 - 2/3)
        let v = adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap();
        assert!((v + 0.5).abs() < 1e-12, "{v}");
        assert!(adjusted_rand_index(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn pearson_examples() {
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((pearson_correlation(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        let y: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson_correlation(&x, &y).unwrap() + 1.0).abs() < 1e-12);
        // computed by hand (two-pass sums) for this pair
        let a = [1.0, 2.0, 4.0, 7.0];
        let b = [2.0, 1.0, 5.0, 6.0];
        // means 3.5 and 3.5; sxy = 3.75+3.75+0.75+8.75 = 17; sxx = 21; syy = 17
        let expected = 17.0 / (21.0f64 * 17.0).sqrt();
        assert!((pearson_correlation(&a, &b).unwrap() - expected).abs() < 1e-12);
        assert!(matches!(
            pearson_correlation(&[1.0, 1.0], &[1.0, 2.0]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn summary_examples() {
        let s = estimate_summary(&[vec![2.4, 0.1, 3.0], vec![0.0, 0.0, 0.0], vec![1.0, 0.0, 5.0]]);
        assert!((s[0].0 - 5.5).abs() < 1e-12);
        assert_eq!(s[0].1, 2);
        assert_eq!(s[1], (0.0, 0));
        assert_eq!(s[2], (6.0, 2));
    }

    fn two_clouds() -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = rng_stream(7, 0);
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for i in 0..60 {
            let c = if i % 2 == 0 { 0.0 } else { 50.0 };
            pts.push(vec![c + rng.random::<f64>(), c - rng.random::<f64>()]);
            labels.push(i % 2);
        }
        (pts, labels)
    }

    #[test]
    fn kmeans_separates_clouds() {
        let (pts, labels) = two_clouds();
        let res = kmeans(&pts, 2, 1, &mut rng_stream(1, 0), None).unwrap();
        assert_eq!(adjusted_rand_index(&labels, &res.labels).unwrap(), 1.0);
    }

    #[test]
    fn kmeans_one_cluster_per_point() {
        let pts: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let res = kmeans(&pts, 6, 1, &mut rng_stream(2, 0), None).unwrap();
        assert_eq!(res.inertia, 0.0);
        let mut l = res.labels.clone();
        l.sort_unstable();
        assert_eq!(l, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn kmeans_restarts_never_hurt() {
        let mut rng = rng_stream(3, 0);
        let pts: Vec<Vec<f64>> = (0..90).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
        let truth: Vec<usize> = pts.iter().map(|p| (p[0] * 3.0) as usize).collect();
        let one = kmeans(&pts, 3, 1, &mut rng_stream(9, 0), Some(&truth)).unwrap();
        let ten = kmeans(&pts, 3, 10, &mut rng_stream(9, 0), Some(&truth)).unwrap();
        assert!(ten.inertia <= one.inertia);
        assert!(ten.ari.is_some());
        let again = kmeans(&pts, 3, 10, &mut rng_stream(9, 0), Some(&truth)).unwrap();
        assert_eq!(ten, again);
    }

    #[test]
    fn kmeans_errors() {
        let pts = vec![vec![0.0], vec![1.0]];
        assert!(kmeans(&pts, 3, 1, &mut rng_stream(0, 0), None).is_err());
        assert!(kmeans(&pts, 0, 1, &mut rng_stream(0, 0), None).is_err());
    }

    #[test]
    fn report_breakdown() {
        let est = vec![vec![11.0, 100.0], vec![10.0, 90.0], vec![5.0, 5.0]];
        let truth = vec![vec![10.0, 100.0], vec![10.0, 100.0], vec![5.0, 10.0]];
        let r = MetricReport::from_estimates(&est, &truth, &[0, 0, 1], Some(0.5)).unwrap();
        assert_eq!(r.per_distribution.len(), 2);
        assert_eq!(r.per_distribution[1].rows, 1);
        assert!((r.manhattan - (1.0 + 10.0 + 5.0) / 3.0).abs() < 1e-12);
        assert!(r.csv_row().starts_with("0.5,"));
        let json = serde_json::to_string(&r).unwrap();
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }
}
