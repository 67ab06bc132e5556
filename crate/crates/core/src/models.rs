//! Tabular softmax target models: joint, conditional and latent-variable.
//!
//! Every model exposes its joint distribution over a finite domain, so the
//! student step can be written once against [`TargetModel`].

use serde::{Deserialize, Serialize};

use crate::dist::{expectation, logsumexp, normalize_log, Dist};
use crate::error::{Error, Result};
use crate::extf64;
use crate::rng;

/// Maximum number of step halvings in the backtracking student step.
pub const MAX_HALVINGS: usize = 30;

fn check_index(i: usize, n: usize) -> Result<()> {
    if i < n {
        Ok(())
    } else {
        Err(Error::IndexOutOfRange { index: i, size: n })
    }
}

/// Row-wise log-softmax of a logit slice.
fn log_softmax(theta: &[f64]) -> Vec<f64> {
    let lz = logsumexp(theta);
    theta.iter().map(|&v| v - lz).collect()
}

/// Softmax over the whole domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxModel {
    #[serde(with = "extf64::vec")]
    pub theta: Vec<f64>,
}

impl SoftmaxModel {
    pub fn zeros(n: usize) -> Self {
        Self { theta: vec![0.0; n] }
    }

    pub fn from_dist(q: &Dist) -> Self {
        Self { theta: q.log_probs().to_vec() }
    }

    pub fn dist(&self) -> Result<Dist> {
        normalize_log(&self.theta)
    }

    pub fn log_prob(&self, t: usize) -> Result<f64> {
        check_index(t, self.theta.len())?;
        Ok(self.theta[t] - logsumexp(&self.theta))
    }

    pub fn prob(&self, t: usize) -> Result<f64> {
        Ok(self.log_prob(t)?.exp())
    }
}

/// Row-wise softmax `p(y|x)` stored as an `|X| x |Y|` row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalSoftmaxModel {
    pub nx: usize,
    pub ny: usize,
    #[serde(with = "extf64::vec")]
    pub theta: Vec<f64>,
}

impl ConditionalSoftmaxModel {
    pub fn zeros(nx: usize, ny: usize) -> Self {
        Self { nx, ny, theta: vec![0.0; nx * ny] }
    }

    pub fn from_logits(nx: usize, ny: usize, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != nx * ny {
            return Err(Error::ShapeMismatch { expected: nx * ny, got: theta.len() });
        }
        Ok(Self { nx, ny, theta })
    }

    /// Builds a model whose rows equal the given conditionals.
    pub fn from_rows(rows: &[Dist]) -> Result<Self> {
        let ny = rows.first().map(Dist::len).ok_or(Error::EmptyDataset)?;
        let mut theta = Vec::with_capacity(rows.len() * ny);
        for r in rows {
            if r.len() != ny {
                return Err(Error::ShapeMismatch { expected: ny, got: r.len() });
            }
            theta.extend_from_slice(r.log_probs());
        }
        Ok(Self { nx: rows.len(), ny, theta })
    }

    pub fn row_logits(&self, x: usize) -> &[f64] {
        &self.theta[x * self.ny..(x + 1) * self.ny]
    }

    pub fn row(&self, x: usize) -> Result<Dist> {
        check_index(x, self.nx)?;
        normalize_log(self.row_logits(x))
    }

    /// All conditional log-probabilities, row-major.
    pub fn log_probs(&self) -> Vec<f64> {
        (0..self.nx).flat_map(|x| log_softmax(self.row_logits(x))).collect()
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs().into_iter().map(f64::exp).collect()
    }

    pub fn log_prob(&self, x: usize, y: usize) -> Result<f64> {
        check_index(x, self.nx)?;
        check_index(y, self.ny)?;
        let row = self.row_logits(x);
        Ok(row[y] - logsumexp(row))
    }
}

/// Latent-variable model `p(x, y) = pi_y * phi_y(x)` over `X x Y`, `Y` the components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureModel {
    pub k: usize,
    pub nx: usize,
    #[serde(with = "extf64::vec")]
    pub mix: Vec<f64>,
    /// Component logits, `k x nx` row-major.
    #[serde(with = "extf64::vec")]
    pub comp: Vec<f64>,
}

impl MixtureModel {
    pub fn zeros(k: usize, nx: usize) -> Self {
        Self { k, nx, mix: vec![0.0; k], comp: vec![0.0; k * nx] }
    }

    pub fn new(k: usize, nx: usize, mix: Vec<f64>, comp: Vec<f64>) -> Result<Self> {
        if mix.len() != k {
            return Err(Error::ShapeMismatch { expected: k, got: mix.len() });
        }
        if comp.len() != k * nx {
            return Err(Error::ShapeMismatch { expected: k * nx, got: comp.len() });
        }
        Ok(Self { k, nx, mix, comp })
    }

    fn comp_logits(&self, y: usize) -> &[f64] {
        &self.comp[y * self.nx..(y + 1) * self.nx]
    }

    /// Joint log-probabilities indexed `t = x * k + y`.
    pub fn log_joint(&self) -> Vec<f64> {
        let lm = log_softmax(&self.mix);
        let lc: Vec<Vec<f64>> = (0..self.k).map(|y| log_softmax(self.comp_logits(y))).collect();
        let mut out = vec![0.0; self.nx * self.k];
        for x in 0..self.nx {
            for y in 0..self.k {
                out[x * self.k + y] = lm[y] + lc[y][x];
            }
        }
        out
    }

    pub fn log_prob(&self, x: usize, y: usize) -> Result<f64> {
        check_index(x, self.nx)?;
        check_index(y, self.k)?;
        Ok(self.log_joint()[x * self.k + y])
    }

    /// Log marginal `log p(x)` for every `x`.
    pub fn log_marginal(&self) -> Vec<f64> {
        let lj = self.log_joint();
        (0..self.nx).map(|x| logsumexp(&lj[x * self.k..(x + 1) * self.k])).collect()
    }

    pub fn marginal(&self) -> Result<Dist> {
        normalize_log(&self.log_marginal())
    }

    /// Exact posterior over components.
    pub fn posterior(&self, x: usize) -> Result<Dist> {
        check_index(x, self.nx)?;
        let lj = self.log_joint();
        normalize_log(&lj[x * self.k..(x + 1) * self.k]).map_err(|_| Error::ZeroMarginal { x })
    }

    /// `sum_x counts(x) log p(x)`; the quantity EM ascends.
    pub fn log_likelihood(&self, counts: &[f64]) -> f64 {
        expectation(counts, &self.log_marginal())
    }
}

/// The target model family trained by the student step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetModel {
    Softmax(SoftmaxModel),
    /// Joint `marginal(x) * policy(y|x)` with the marginal held fixed.
    Conditional {
        policy: ConditionalSoftmaxModel,
        marginal: Dist,
    },
    Mixture(MixtureModel),
}

impl TargetModel {
    pub fn conditional(policy: ConditionalSoftmaxModel, marginal: Dist) -> Result<Self> {
        if marginal.len() != policy.nx {
            return Err(Error::ShapeMismatch { expected: policy.nx, got: marginal.len() });
        }
        Ok(Self::Conditional { policy, marginal })
    }

    /// Size of the joint domain.
    pub fn size(&self) -> usize {
        match self {
            Self::Softmax(m) => m.theta.len(),
            Self::Conditional { policy, .. } => policy.nx * policy.ny,
            Self::Mixture(m) => m.nx * m.k,
        }
    }

    /// Product factors `(|X|, |Y|)`, if any.
    pub fn factors(&self) -> Option<(usize, usize)> {
        match self {
            Self::Softmax(_) => None,
            Self::Conditional { policy, .. } => Some((policy.nx, policy.ny)),
            Self::Mixture(m) => Some((m.nx, m.k)),
        }
    }

    pub fn log_joint(&self) -> Vec<f64> {
        match self {
            Self::Softmax(m) => log_softmax(&m.theta),
            Self::Conditional { policy, marginal } => {
                let lp = policy.log_probs();
                let ny = policy.ny;
                lp.iter()
                    .enumerate()
                    .map(|(t, &l)| {
                        let lm = marginal.log_probs()[t / ny];
                        if lm == f64::NEG_INFINITY {
                            lm
                        } else {
                            lm + l
                        }
                    })
                    .collect()
            }
            Self::Mixture(m) => m.log_joint(),
        }
    }

    pub fn joint(&self) -> Result<Dist> {
        normalize_log(&self.log_joint())
    }

    pub fn log_prob(&self, t: usize) -> Result<f64> {
        check_index(t, self.size())?;
        Ok(self.log_joint()[t])
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            Self::Softmax(m) => m.theta.clone(),
            Self::Conditional { policy, .. } => policy.theta.clone(),
            Self::Mixture(m) => m.mix.iter().chain(&m.comp).copied().collect(),
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            Self::Softmax(m) => m.theta.len(),
            Self::Conditional { policy, .. } => policy.theta.len(),
            Self::Mixture(m) => m.k + m.k * m.nx,
        }
    }

    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        if params.len() != self.n_params() {
            return Err(Error::ShapeMismatch { expected: self.n_params(), got: params.len() });
        }
        let mut out = self.clone();
        match &mut out {
            Self::Softmax(m) => m.theta.copy_from_slice(params),
            Self::Conditional { policy, .. } => policy.theta.copy_from_slice(params),
            Self::Mixture(m) => {
                let k = m.k;
                m.mix.copy_from_slice(&params[..k]);
                m.comp.copy_from_slice(&params[k..]);
            }
        }
        Ok(out)
    }

    /// Adds uniform noise in `[-scale, scale]` to every logit.
    pub fn randomized(&self, seed: u64, scale: f64) -> Result<Self> {
        let mut r = rng::seeded(seed);
        let p: Vec<f64> = self.params().iter().map(|&v| v + scale * (2.0 * rng::uniform(&mut r) - 1.0)).collect();
        self.with_params(&p)
    }

    fn check_q(&self, q: &Dist) -> Result<()> {
        if q.len() != self.size() {
            return Err(Error::ShapeMismatch { expected: self.size(), got: q.len() });
        }
        Ok(())
    }

    /// `E_q[log p_theta]` with `0 * log 0 = 0`.
    pub fn expected_log_prob(&self, q: &Dist) -> Result<f64> {
        self.check_q(q)?;
        Ok(q.expect(&self.log_joint()))
    }

    /// Gradient of `E_q[log p_theta]` with respect to [`Self::params`].
    pub fn grad_expected_log_prob(&self, q: &Dist) -> Result<Vec<f64>> {
        self.check_q(q)?;
        let qp = q.probs();
        match self {
            Self::Softmax(m) => {
                let p = m.dist()?;
                Ok(qp.iter().zip(p.probs()).map(|(a, b)| a - b).collect())
            }
            Self::Conditional { policy, .. } => {
                let pi = policy.probs();
                let ny = policy.ny;
                let mut g = vec![0.0; qp.len()];
                for x in 0..policy.nx {
                    let qx: f64 = qp[x * ny..(x + 1) * ny].iter().sum();
                    for y in 0..ny {
                        let t = x * ny + y;
                        g[t] = qp[t] - qx * pi[t];
                    }
                }
                Ok(g)
            }
            Self::Mixture(m) => {
                let (k, nx) = (m.k, m.nx);
                let pi = normalize_log(&m.mix)?;
                let mut qy = vec![0.0; k];
                for x in 0..nx {
                    for y in 0..k {
                        qy[y] += qp[x * k + y];
                    }
                }
                let mut g = vec![0.0; k + k * nx];
                for y in 0..k {
                    g[y] = qy[y] - pi.prob(y);
                    let phi = normalize_log(m.comp_logits(y))?;
                    for x in 0..nx {
                        g[k + y * nx + x] = qp[x * k + y] - qy[y] * phi.prob(x);
                    }
                }
                Ok(g)
            }
        }
    }

    /// Exact maximizer of `E_q[log p_theta]`.
    ///
    /// Each family is fully expressive on its joint (given the fixed
    /// marginal for conditionals), so the maximizer is read off `q`.
    /// Blocks that receive no mass keep their previous logits.
    pub fn project(&self, q: &Dist) -> Result<Self> {
        self.check_q(q)?;
        let qp = q.probs();
        let mut out = self.clone();
        match &mut out {
            Self::Softmax(m) => m.theta = q.log_probs().to_vec(),
            Self::Conditional { policy, .. } => {
                let ny = policy.ny;
                for x in 0..policy.nx {
                    let row = &qp[x * ny..(x + 1) * ny];
                    let s: f64 = row.iter().sum();
                    if s > 0.0 {
                        let lr: Vec<f64> = row.iter().map(|v| (v / s).ln()).collect();
                        policy.theta[x * ny..(x + 1) * ny].copy_from_slice(&lr);
                    }
                }
            }
            Self::Mixture(m) => {
                let (k, nx) = (m.k, m.nx);
                let mut qy = vec![0.0; k];
                for x in 0..nx {
                    for y in 0..k {
                        qy[y] += qp[x * k + y];
                    }
                }
                for y in 0..k {
                    m.mix[y] = qy[y].ln();
                    if qy[y] > 0.0 {
                        for x in 0..nx {
                            m.comp[y * nx + x] = (qp[x * k + y] / qy[y]).ln();
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Student fit. Softmax models receive the exact projection; the others
    /// run gradient ascent with backtracking so the objective never drops.
    pub fn fit_to(&self, q: &Dist, steps: usize, step_size: f64) -> Result<Self> {
        if !(step_size > 0.0) {
            return Err(Error::InvalidConfig(format!("step_size must be > 0, got {step_size}")));
        }
        if let Self::Softmax(_) = self {
            return self.project(q);
        }
        let mut cur = self.clone();
        let mut obj = cur.expected_log_prob(q)?;
        for _ in 0..steps {
            let g = cur.grad_expected_log_prob(q)?;
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient);
            }
            let base = cur.params();
            let mut eta = step_size;
            let mut accepted = false;
            for _ in 0..=MAX_HALVINGS {
                let trial: Vec<f64> = base.iter().zip(&g).map(|(t, d)| t + eta * d).collect();
                let cand = cur.with_params(&trial)?;
                let o = cand.expected_log_prob(q)?;
                if o >= obj {
                    cur = cand;
                    obj = o;
                    accepted = true;
                    break;
                }
                eta *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        Ok(cur)
    }
}
