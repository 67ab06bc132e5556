//! Learnable tabular discriminators trained jointly with the target model.
//!
//! Expectations are exact sums over the domain, so adversarial runs are
//! deterministic.

use serde::{Deserialize, Serialize};

use crate::dist::{normalize_log, Dist};
use crate::divergence::{divergence, divergence_grad_q, DivergenceFn};
use crate::error::{Error, Result};
use crate::models::{TargetModel, MAX_HALVINGS};
use crate::solver::{ObjectiveTerms, RunStatus, SEConfig, Trace, TraceRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DiscriminatorMode {
    /// `f(t) = log sigmoid(phi_t)`, the log probability that `t` is real.
    /// Trained on the binary cross-entropy objective.
    Classifier,
    /// `f(t) = phi_t` with no constraint.
    Critic,
    /// `f(t) = phi_t` with `|phi_{i+1} - phi_i| <= clip * (x_{i+1} - x_i)`
    /// on an ordered 1-D domain.
    LipschitzCritic {
        #[serde(default = "default_clip")]
        clip: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        coords: Option<Vec<f64>>,
    },
}

fn default_clip() -> f64 {
    1.0
}

/// `log sigmoid(x)` without overflow.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Discriminator {
    pub phi: Vec<f64>,
    pub mode: DiscriminatorMode,
}

impl Discriminator {
    /// The uninformative discriminator (`sigmoid = 1/2`, or a flat critic).
    pub fn new(n: usize, mode: DiscriminatorMode) -> Result<Self> {
        let d = Self { phi: vec![0.0; n], mode };
        d.gaps()?;
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.is_empty()
    }

    fn gaps(&self) -> Result<Vec<f64>> {
        let n = self.phi.len();
        match &self.mode {
            DiscriminatorMode::LipschitzCritic { clip, coords } => {
                if !(*clip > 0.0 && clip.is_finite()) {
                    return Err(Error::InvalidConfig(format!("clip bound must be > 0, got {clip}")));
                }
                DivergenceFn::W1 { coords: coords.clone() }.gap_widths(n)
            }
            _ => Ok(Vec::new()),
        }
    }

    /// The experience values `f_phi(t)`.
    pub fn values(&self) -> Vec<f64> {
        match self.mode {
            DiscriminatorMode::Classifier => self.phi.iter().map(|&v| log_sigmoid(v)).collect(),
            _ => self.phi.clone(),
        }
    }

    fn check(&self, q: &Dist, p_data: &Dist) -> Result<()> {
        for d in [q, p_data] {
            if d.len() != self.len() {
                return Err(Error::ShapeMismatch { expected: self.len(), got: d.len() });
            }
        }
        Ok(())
    }

    /// Objective the discriminator ascends against the generated `q`.
    /// Classifier: `E_data[log s] + E_q[log(1 - s)]`; critics: `E_data[phi] - E_q[phi]`.
    pub fn objective(&self, q: &Dist, p_data: &Dist) -> Result<f64> {
        self.check(q, p_data)?;
        Ok(self.objective_weighted(q.probs(), p_data))
    }

    fn objective_weighted(&self, w: &[f64], p_data: &Dist) -> f64 {
        let mut s = 0.0;
        for (t, &phi) in self.phi.iter().enumerate() {
            let (pd, qt) = (p_data.prob(t), w[t]);
            match self.mode {
                DiscriminatorMode::Classifier => {
                    if pd > 0.0 {
                        s += pd * log_sigmoid(phi);
                    }
                    if qt > 0.0 {
                        s += qt * log_sigmoid(-phi);
                    }
                }
                _ => s += (pd - qt) * phi,
            }
        }
        s
    }

    /// Gradient of [`Discriminator::objective`] in `phi`.
    pub fn gradient(&self, q: &Dist, p_data: &Dist) -> Result<Vec<f64>> {
        self.check(q, p_data)?;
        Ok(self.gradient_weighted(q.probs(), p_data))
    }

    fn gradient_weighted(&self, w: &[f64], p_data: &Dist) -> Vec<f64> {
        self.phi
            .iter()
            .enumerate()
            .map(|(t, &phi)| match self.mode {
                DiscriminatorMode::Classifier => {
                    let s = sigmoid(phi);
                    p_data.prob(t) * (1.0 - s) - w[t] * s
                }
                _ => p_data.prob(t) - w[t],
            })
            .collect()
    }

    /// Clips successive differences into the Lipschitz band, keeping `phi_0`.
    /// A no-op outside Lipschitz mode; idempotent.
    pub fn project(&self) -> Result<Self> {
        let DiscriminatorMode::LipschitzCritic { clip, .. } = &self.mode else {
            return Ok(self.clone());
        };
        let gaps = self.gaps()?;
        let mut phi = self.phi.clone();
        for i in 0..gaps.len() {
            let b = clip * gaps[i];
            let d = (self.phi[i + 1] - self.phi[i]).clamp(-b, b);
            phi[i + 1] = phi[i] + d;
        }
        Ok(Self { phi, mode: self.mode.clone() })
    }

    /// One ascent proposal of length `eta` along `grad`. Lipschitz critics
    /// step in successive-difference coordinates and clip each difference,
    /// which is the exact projection in those coordinates.
    fn propose(&self, grad: &[f64], eta: f64) -> Result<Self> {
        match &self.mode {
            DiscriminatorMode::LipschitzCritic { clip, .. } => {
                let gaps = self.gaps()?;
                let n = self.len();
                // d J / d (phi_{i+1} - phi_i) = sum of grad over t > i.
                let mut tail = vec![0.0; n];
                let mut acc = 0.0;
                for t in (1..n).rev() {
                    acc += grad[t];
                    tail[t - 1] = acc;
                }
                let mut phi = self.phi.clone();
                phi[0] += eta * grad.iter().sum::<f64>();
                for i in 0..n.saturating_sub(1) {
                    let b = clip * gaps[i];
                    let d = (self.phi[i + 1] - self.phi[i] + eta * tail[i]).clamp(-b, b);
                    phi[i + 1] = phi[i] + d;
                }
                Ok(Self { phi, mode: self.mode.clone() })
            }
            _ => {
                Ok(Self { phi: self.phi.iter().zip(grad).map(|(p, g)| p + eta * g).collect(), mode: self.mode.clone() })
            }
        }
    }

    fn ascend(&self, w: &[f64], p_data: &Dist, steps: usize, step_size: f64) -> Result<Self> {
        if !(step_size > 0.0) {
            return Err(Error::InvalidConfig(format!("step size must be > 0, got {step_size}")));
        }
        let mut cur = self.project()?;
        let mut obj = cur.objective_weighted(w, p_data);
        for _ in 0..steps {
            let g = cur.gradient_weighted(w, p_data);
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient);
            }
            let mut eta = step_size;
            let mut next = None;
            for _ in 0..=MAX_HALVINGS {
                let cand = cur.propose(&g, eta)?;
                let o = cand.objective_weighted(w, p_data);
                if o >= obj {
                    next = Some((cand, o));
                    break;
                }
                eta *= 0.5;
            }
            let Some((c, o)) = next else { break };
            cur = c;
            obj = o;
        }
        Ok(cur)
    }
}

/// Gradient ascent of the discriminator against the generated distribution `q`.
pub fn discriminator_update(
    disc: &Discriminator,
    q: &Dist,
    p_data: &Dist,
    steps: usize,
    step_size: f64,
) -> Result<Discriminator> {
    disc.check(q, p_data)?;
    disc.ascend(q.probs(), p_data, steps, step_size)
}

/// Importance weights `p_theta(t) exp(f(t)) / Z` with `f` the current
/// discriminator's values, computed from samples of the model alone.
pub fn importance_weights(disc: &Discriminator, p_theta: &Dist) -> Result<Vec<f64>> {
    let f = disc.values();
    let raw: Vec<f64> = p_theta.probs().iter().zip(&f).map(|(p, v)| p * v.exp()).collect();
    let z: f64 = raw.iter().sum();
    if !(z > 0.0 && z.is_finite()) {
        return Err(Error::AllZeroWeights);
    }
    Ok(raw.into_iter().map(|r| r / z).collect())
}

/// Gradient of the reweighted objective, where the generated term is an
/// expectation under `p_theta` weighted by `exp(f_phi) / Z`.
pub fn reweighted_gradient(disc: &Discriminator, p_theta: &Dist, p_data: &Dist) -> Result<Vec<f64>> {
    disc.check(p_theta, p_data)?;
    Ok(disc.gradient_weighted(&importance_weights(disc, p_theta)?, p_data))
}

/// Discriminator ascent where the generated side is `p_theta` reweighted by
/// the discriminator at the start of the update. The weights stay frozen
/// across the inner steps.
pub fn reweighted_discriminator_update(
    disc: &Discriminator,
    p_theta: &Dist,
    p_data: &Dist,
    steps: usize,
    step_size: f64,
) -> Result<Discriminator> {
    disc.check(p_theta, p_data)?;
    let w = importance_weights(disc, p_theta)?;
    disc.ascend(&w, p_data, steps, step_size)
}

/// One exponentiated-gradient step from `q = p` on
/// `beta D(q, p) - E_q[f]`, the alpha = 0 teacher objective.
pub fn generator_step(p: &Dist, f: &[f64], beta: f64, divergence: &DivergenceFn, step_size: f64) -> Result<Dist> {
    if f.len() != p.len() {
        return Err(Error::ShapeMismatch { expected: p.len(), got: f.len() });
    }
    let gd = divergence_grad_q(divergence, p, p)?;
    let s: Vec<f64> =
        p.log_probs().iter().zip(gd.iter().zip(f)).map(|(lp, (g, v))| lp - step_size * (beta * g - v)).collect();
    normalize_log(&s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversarialConfig {
    pub se: SEConfig,
    pub mode: DiscriminatorMode,
    #[serde(default = "default_disc_steps")]
    pub disc_steps: usize,
    #[serde(default = "default_disc_step")]
    pub disc_step_size: f64,
    #[serde(default = "default_gen_step")]
    pub gen_step_size: f64,
    pub outer_iters: usize,
    /// Train the discriminator with importance reweighting instead of
    /// against `p_theta` directly.
    #[serde(default)]
    pub reweighted: bool,
}

fn default_disc_steps() -> usize {
    5
}
fn default_disc_step() -> f64 {
    10.0
}
fn default_gen_step() -> f64 {
    1.0
}

#[derive(Debug, Clone)]
pub struct AdversarialOutput {
    pub model: TargetModel,
    pub discriminator: Discriminator,
    pub trace: Trace,
}

/// Alternates `disc_steps` discriminator updates with one generator step
/// followed by an exact student step. Each record carries the divergence of
/// the model to the data under the configured divergence (`extra`), the
/// discriminator objective, and the TV to the data as `tv_to_ref`.
pub fn adversarial_run(
    config: &AdversarialConfig,
    model: &TargetModel,
    p_data: &Dist,
    disc: Option<Discriminator>,
) -> Result<AdversarialOutput> {
    let se = &config.se;
    if se.alpha != 0.0 {
        return Err(Error::InvalidConfig(format!("adversarial runs need alpha = 0, got {}", se.alpha)));
    }
    if !(se.beta >= 0.0 && se.beta.is_finite()) {
        return Err(Error::InvalidConfig(format!("beta must be finite and >= 0, got {}", se.beta)));
    }
    if matches!(se.divergence, DivergenceFn::CrossEntropy) {
        return Err(Error::ModeUnsupported("adversarial runs with cross entropy".into()));
    }
    if model.size() != p_data.len() {
        return Err(Error::DomainMismatch(format!("model has size {}, data has size {}", model.size(), p_data.len())));
    }
    let mut disc = match disc {
        Some(d) => d,
        None => Discriminator::new(p_data.len(), config.mode.clone())?,
    };
    let mut cur = model.clone();
    let mut trace = Trace::default();
    for iter in 0..config.outer_iters {
        let p = cur.joint()?;
        disc = if config.reweighted {
            reweighted_discriminator_update(&disc, &p, p_data, config.disc_steps, config.disc_step_size)?
        } else {
            discriminator_update(&disc, &p, p_data, config.disc_steps, config.disc_step_size)?
        };
        let f = disc.values();
        let q = generator_step(&p, &f, se.beta, &se.divergence, config.gen_step_size)?;
        cur = cur.project(&q)?;
        let pn = cur.joint()?;
        let terms = ObjectiveTerms {
            neg_alpha_h: 0.0,
            beta_d: if se.beta == 0.0 { 0.0 } else { se.beta * divergence(&se.divergence, &q, &pn)? },
            neg_eqf: -q.expect(&f),
        };
        let mut rec = TraceRecord::new(iter, terms);
        rec.tv_to_ref = Some(pn.tv(p_data));
        rec.extra.insert(se.divergence.name().into(), divergence(&se.divergence, &pn, p_data)?);
        rec.extra.insert("disc_objective".into(), disc.objective(&pn, p_data)?);
        trace.records.push(rec);
    }
    trace.status = RunStatus::Completed;
    Ok(AdversarialOutput { model: cur, discriminator: disc, trace })
}
