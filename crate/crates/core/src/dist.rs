//! Finite configuration domains, exact probability vectors and the
//! uncertainty functions defined on them.
//!
//! Every [`Dist`] carries both `p` and `log p`. Scores coming out of
//! experience functions routinely contain `-inf`, so normalization always
//! goes through a max-shifted log-sum-exp.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `|sum(p) - 1|` accepted by [`Dist::from_probs`].
pub const SUM_TOL: f64 = 1e-9;

/// A finite set of configurations, optionally a product `X x Y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    labels: Vec<String>,
    factors: Option<(usize, usize)>,
}

impl Domain {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidDomain("domain must be non-empty".into()));
        }
        let mut seen = HashSet::new();
        for l in &labels {
            if !seen.insert(l.as_str()) {
                return Err(Error::InvalidDomain(format!("duplicate label `{l}`")));
            }
        }
        Ok(Self { labels, factors: None })
    }

    /// Domain of size `n` labelled `"0"..."n-1"`.
    pub fn indexed(n: usize) -> Result<Self> {
        Self::new((0..n).map(|i| i.to_string()).collect())
    }

    /// Product domain with pair index `t = x * |Y| + y`.
    pub fn product(x_labels: &[String], y_labels: &[String]) -> Result<Self> {
        if x_labels.is_empty() || y_labels.is_empty() {
            return Err(Error::InvalidDomain("product factors must be non-empty".into()));
        }
        let labels = x_labels.iter().flat_map(|x| y_labels.iter().map(move |y| format!("{x}|{y}"))).collect();
        let mut d = Self::new(labels)?;
        d.factors = Some((x_labels.len(), y_labels.len()));
        Ok(d)
    }

    pub fn product_indexed(nx: usize, ny: usize) -> Result<Self> {
        let xs: Vec<String> = (0..nx).map(|i| i.to_string()).collect();
        let ys: Vec<String> = (0..ny).map(|i| i.to_string()).collect();
        Self::product(&xs, &ys)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn factors(&self) -> Option<(usize, usize)> {
        self.factors
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn pair(&self, x: usize, y: usize) -> Result<usize> {
        let (nx, ny) = self.require_product()?;
        if x >= nx {
            return Err(Error::IndexOutOfRange { index: x, size: nx });
        }
        if y >= ny {
            return Err(Error::IndexOutOfRange { index: y, size: ny });
        }
        Ok(x * ny + y)
    }

    pub fn unpair(&self, t: usize) -> Result<(usize, usize)> {
        let (_, ny) = self.require_product()?;
        if t >= self.len() {
            return Err(Error::IndexOutOfRange { index: t, size: self.len() });
        }
        Ok((t / ny, t % ny))
    }

    fn require_product(&self) -> Result<(usize, usize)> {
        self.factors.ok_or_else(|| Error::InvalidDomain("domain has no product structure".into()))
    }
}

/// Max-shifted log-sum-exp. Returns `-inf` when every entry is `-inf`.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// `sum_i p_i * v_i` with the convention `0 * (+-inf) = 0`.
pub fn expectation(p: &[f64], v: &[f64]) -> f64 {
    p.iter().zip(v).filter(|(&pi, _)| pi > 0.0).map(|(&pi, &vi)| pi * vi).sum()
}

/// An exact probability vector over a finite domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Dist {
    p: Vec<f64>,
    logp: Vec<f64>,
}

impl Dist {
    /// Validates a probability vector; the sum must be within [`SUM_TOL`] of one.
    pub fn from_probs(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::InvalidDistribution("empty vector".into()));
        }
        if let Some((i, v)) = p.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidDistribution(format!("p[{i}] = {v}")));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > SUM_TOL {
            return Err(Error::InvalidDistribution(format!("sum = {s}")));
        }
        let logp = p.iter().map(|&v| if v > 0.0 { v.ln() } else { f64::NEG_INFINITY }).collect();
        Ok(Self { p, logp })
    }

    /// Normalizes non-negative weights.
    pub fn from_weights(w: &[f64]) -> Result<Self> {
        if let Some((i, v)) = w.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidDistribution(format!("weight[{i}] = {v}")));
        }
        let logs: Vec<f64> = w.iter().map(|&v| v.ln()).collect();
        normalize_log(&logs)
    }

    pub fn uniform(n: usize) -> Self {
        assert!(n > 0, "uniform distribution needs n >= 1");
        normalize_log(&vec![0.0; n]).expect("finite scores")
    }

    pub fn point_mass(n: usize, i: usize) -> Self {
        assert!(i < n, "point mass index out of range");
        let mut s = vec![f64::NEG_INFINITY; n];
        s[i] = 0.0;
        normalize_log(&s).expect("one finite score")
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.p
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.logp
    }

    pub fn prob(&self, i: usize) -> f64 {
        self.p[i]
    }

    /// `E_p[v]`, skipping zero-mass entries.
    pub fn expect(&self, v: &[f64]) -> f64 {
        expectation(&self.p, v)
    }

    /// Total-variation distance.
    pub fn tv(&self, other: &Dist) -> f64 {
        0.5 * self.p.iter().zip(&other.p).map(|(a, b)| (a - b).abs()).sum::<f64>()
    }

    pub fn is_interior(&self) -> bool {
        self.p.iter().all(|&v| v > 0.0)
    }
}

impl TryFrom<Vec<f64>> for Dist {
    type Error = Error;
    fn try_from(p: Vec<f64>) -> Result<Self> {
        Dist::from_probs(p)
    }
}

impl From<Dist> for Vec<f64> {
    fn from(d: Dist) -> Self {
        d.p
    }
}

/// `logp_i = s_i - logsumexp(s)`.
pub fn normalize_log(scores: &[f64]) -> Result<Dist> {
    if scores.is_empty() {
        return Err(Error::InvalidDistribution("empty score vector".into()));
    }
    if scores.iter().any(|s| s.is_nan() || *s == f64::INFINITY) {
        return Err(Error::InvalidDistribution("scores must be finite or -inf".into()));
    }
    let lz = logsumexp(scores);
    if lz == f64::NEG_INFINITY {
        return Err(Error::AllNegInfinity);
    }
    let logp: Vec<f64> = scores.iter().map(|&s| s - lz).collect();
    let p = logp.iter().map(|&l| l.exp()).collect();
    Ok(Dist { p, logp })
}

/// Entropy-like uncertainty measure on `q`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum UncertaintyFn {
    #[default]
    Shannon,
    /// Entropic index `k > 0`, `k != 1`.
    Tsallis { k: f64 },
}

impl UncertaintyFn {
    pub fn validate(&self) -> Result<()> {
        match *self {
            UncertaintyFn::Shannon => Ok(()),
            UncertaintyFn::Tsallis { k } if k > 0.0 && k != 1.0 && k.is_finite() => Ok(()),
            UncertaintyFn::Tsallis { k } => {
                Err(Error::InvalidConfig(format!("Tsallis index must be > 0 and != 1, got {k}")))
            }
        }
    }
}

pub fn entropy(q: &Dist, h: UncertaintyFn) -> f64 {
    entropy_raw(q.probs(), h)
}

/// Entropy evaluated on an arbitrary non-negative vector (no normalization).
pub fn entropy_raw(q: &[f64], h: UncertaintyFn) -> f64 {
    match h {
        UncertaintyFn::Shannon => -q.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>(),
        UncertaintyFn::Tsallis { k } => {
            (1.0 - q.iter().filter(|&&v| v > 0.0).map(|&v| v.powf(k)).sum::<f64>()) / (k - 1.0)
        }
    }
}

/// Gradient of the uncertainty function, defined on the interior only.
pub fn entropy_grad(q: &Dist, h: UncertaintyFn) -> Result<Vec<f64>> {
    if let Some(index) = q.probs().iter().position(|&v| v <= 0.0) {
        return Err(Error::BoundaryPoint { index });
    }
    Ok(match h {
        UncertaintyFn::Shannon => q.log_probs().iter().map(|&l| -l - 1.0).collect(),
        UncertaintyFn::Tsallis { k } => q.probs().iter().map(|&v| -k * v.powf(k - 1.0) / (k - 1.0)).collect(),
    })
}
