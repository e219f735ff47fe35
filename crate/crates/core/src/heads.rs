//! Decoder output heads: how the last linear layer becomes a likelihood.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::likelihood::{row_nll, row_nll_grad};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LikelihoodKind {
    Hypergeometric,
    Multinomial,
    Poisson,
}

impl LikelihoodKind {
    pub const ALL: [LikelihoodKind; 3] = [Self::Hypergeometric, Self::Multinomial, Self::Poisson];

    pub fn name(self) -> &'static str {
        match self {
            Self::Hypergeometric => "hypergeometric",
            Self::Multinomial => "multinomial",
            Self::Poisson => "poisson",
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Self::Hypergeometric => "hg",
            Self::Multinomial => "mn",
            Self::Poisson => "poisson",
        }
    }

    pub fn head(self) -> Arc<dyn LikelihoodHead> {
        match self {
            Self::Hypergeometric => Arc::new(HypergeometricHead),
            Self::Multinomial => Arc::new(MultinomialHead),
            Self::Poisson => Arc::new(PoissonHead),
        }
    }
}

impl fmt::Display for LikelihoodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LikelihoodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HeadRegistry::default().get(s).map(|h| h.kind())
    }
}

/// Per-row loss terms reported by a head.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct HeadLoss {
    pub nll: f64,
    pub penalty: f64,
}

pub trait LikelihoodHead: Send + Sync + fmt::Debug {
    fn kind(&self) -> LikelihoodKind;

    /// Head output (estimates, probabilities or rates) from the decoder's
    /// last pre-activation.
    fn activate(&self, pre: &[f64], out: &mut [f64]);

    /// Negative log-likelihood and violation penalty of `c` under `pre`.
    /// When `grad` is given, `scale * d(nll + weight * penalty)/d pre` is
    /// added to it.
    fn loss(&self, c: &[u32], pre: &[f64], weight: f64, scale: f64, grad: Option<&mut [f64]>) -> HeadLoss;

    /// Inference output for observation `c`.
    fn estimate(&self, c: &[u32], pre: &[f64]) -> Vec<f64> {
        let _ = c;
        let mut out = vec![0.0; pre.len()];
        self.activate(pre, &mut out);
        out
    }
}

/// Rectified estimates, thresholded at the row before the likelihood.
#[derive(Debug, Clone, Copy)]
pub struct HypergeometricHead;

impl LikelihoodHead for HypergeometricHead {
    fn kind(&self) -> LikelihoodKind {
        LikelihoodKind::Hypergeometric
    }

    fn activate(&self, pre: &[f64], out: &mut [f64]) {
        for (o, &p) in out.iter_mut().zip(pre) {
            *o = p.max(0.0);
        }
    }

    // The penalty is taken on the pre-rectifier value for categories with a
    // positive count. It equals the penalty on the rectified output whenever
    // the unit is active, and keeps a gradient when the unit is dead.
    fn loss(&self, c: &[u32], pre: &[f64], weight: f64, scale: f64, grad: Option<&mut [f64]>) -> HeadLoss {
        let est = self.estimate(c, pre);
        let n: u64 = c.iter().map(|&x| x as u64).sum();
        let total: f64 = est.iter().sum();
        let nll = row_nll(c, n, &est, total);
        let penalty: f64 = c
            .iter()
            .zip(pre)
            .filter(|(&ci, _)| ci > 0)
            .map(|(&ci, &p)| (ci as f64 - p).max(0.0))
            .sum();
        if let Some(grad) = grad {
            let mut g = vec![0.0; c.len()];
            row_nll_grad(c, n, &est, total, 1.0, &mut g);
            for ((gi, &ci), (&p, &lg)) in grad.iter_mut().zip(c).zip(pre.iter().zip(&g)) {
                let ci = ci as f64;
                if p > ci {
                    *gi += scale * lg;
                } else if p < ci && ci > 0.0 {
                    *gi -= scale * weight;
                }
            }
        }
        HeadLoss { nll, penalty }
    }

    fn estimate(&self, c: &[u32], pre: &[f64]) -> Vec<f64> {
        c.iter().zip(pre).map(|(&ci, &p)| p.max(0.0).max(ci as f64)).collect()
    }
}

/// Softmax probabilities; the multinomial coefficient is constant in the
/// parameters and left out.
#[derive(Debug, Clone, Copy)]
pub struct MultinomialHead;

impl LikelihoodHead for MultinomialHead {
    fn kind(&self) -> LikelihoodKind {
        LikelihoodKind::Multinomial
    }

    fn activate(&self, pre: &[f64], out: &mut [f64]) {
        let m = pre.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (o, &p) in out.iter_mut().zip(pre) {
            *o = (p - m).exp();
            s += *o;
        }
        out.iter_mut().for_each(|o| *o /= s);
    }

    fn loss(&self, c: &[u32], pre: &[f64], _weight: f64, scale: f64, grad: Option<&mut [f64]>) -> HeadLoss {
        let m = pre.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + pre.iter().map(|&p| (p - m).exp()).sum::<f64>().ln();
        let mut nll = 0.0;
        let mut n = 0.0;
        for (&ci, &p) in c.iter().zip(pre) {
            if ci > 0 {
                nll -= ci as f64 * (p - lse);
                n += ci as f64;
            }
        }
        if let Some(grad) = grad {
            for ((g, &ci), &p) in grad.iter_mut().zip(c).zip(pre) {
                *g += scale * (n * (p - lse).exp() - ci as f64);
            }
        }
        HeadLoss { nll, penalty: 0.0 }
    }
}

/// Independent Poisson rates through a softplus.
#[derive(Debug, Clone, Copy)]
pub struct PoissonHead;

pub(crate) const MIN_RATE: f64 = 1e-12;

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl LikelihoodHead for PoissonHead {
    fn kind(&self) -> LikelihoodKind {
        LikelihoodKind::Poisson
    }

    fn activate(&self, pre: &[f64], out: &mut [f64]) {
        for (o, &p) in out.iter_mut().zip(pre) {
            *o = softplus(p).max(MIN_RATE);
        }
    }

    fn loss(&self, c: &[u32], pre: &[f64], _weight: f64, scale: f64, grad: Option<&mut [f64]>) -> HeadLoss {
        let mut nll = 0.0;
        let mut grad = grad;
        for (i, (&ci, &p)) in c.iter().zip(pre).enumerate() {
            let sp = softplus(p);
            let rate = sp.max(MIN_RATE);
            let ci = ci as f64;
            nll += rate - ci * rate.ln() + ln_gamma(ci + 1.0);
            if let Some(g) = grad.as_deref_mut() {
                if sp > MIN_RATE {
                    g[i] += scale * (1.0 - ci / rate) * sigmoid(p);
                }
            }
        }
        HeadLoss { nll, penalty: 0.0 }
    }
}

/// Heads addressable by name, so the likelihood is picked at runtime.
#[derive(Debug, Clone)]
pub struct HeadRegistry {
    heads: BTreeMap<String, Arc<dyn LikelihoodHead>>,
}

impl HeadRegistry {
    pub fn empty() -> Self {
        Self { heads: BTreeMap::new() }
    }

    pub fn register(&mut self, name: &str, head: Arc<dyn LikelihoodHead>) {
        self.heads.insert(name.to_ascii_lowercase(), head);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn LikelihoodHead>> {
        self.heads
            .get(&name.to_ascii_lowercase())
            .cloned()
            .ok_or_else(|| Error::UnknownHead(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.heads.keys().map(String::as_str)
    }
}

impl Default for HeadRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        for kind in LikelihoodKind::ALL {
            r.register(kind.name(), kind.head());
            r.register(kind.short_name(), kind.head());
        }
        r.register("p", LikelihoodKind::Poisson.head());
        r
    }
}
