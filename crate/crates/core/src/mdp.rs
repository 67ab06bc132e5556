//! Exact tabular MDP machinery: action values, discounted visitation,
//! the policy gradient, and reward-based experience functions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dist::Dist;
use crate::error::{Error, Result};
use crate::experience::ExperienceFn;
use crate::models::{ConditionalSoftmaxModel, TargetModel};
use crate::rng;

/// Above this many state-action pairs, policy evaluation falls back to
/// iterative sweeps instead of a dense solve.
pub const DENSE_LIMIT: usize = 4000;
const ITER_TOL: f64 = 1e-10;

/// Finite MDP with known dynamics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpFile", into = "MdpFile")]
pub struct TabularMDP {
    n_states: usize,
    n_actions: usize,
    /// `P(s'|s,a)` at `(s * A + a) * S + s'`.
    p: Vec<f64>,
    /// `r(s,a)` at `s * A + a`.
    r: Vec<f64>,
    gamma: f64,
    p0: Dist,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum Names {
    Count(usize),
    Labels(Vec<String>),
}

impl Names {
    fn len(&self) -> usize {
        match self {
            Names::Count(n) => *n,
            Names::Labels(v) => v.len(),
        }
    }
}

/// JSON layout: transitions are `(s, a, s', prob)` triples plus probability.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MdpFile {
    states: Names,
    actions: Names,
    transitions: Vec<(usize, usize, usize, f64)>,
    rewards: Vec<Vec<f64>>,
    gamma: f64,
    p0: Vec<f64>,
}

impl TryFrom<MdpFile> for TabularMDP {
    type Error = Error;
    fn try_from(f: MdpFile) -> Result<Self> {
        let (s, a) = (f.states.len(), f.actions.len());
        let mut p = vec![0.0; s * a * s];
        for &(si, ai, sj, pr) in &f.transitions {
            if si >= s || sj >= s {
                return Err(Error::IndexOutOfRange { index: si.max(sj), size: s });
            }
            if ai >= a {
                return Err(Error::IndexOutOfRange { index: ai, size: a });
            }
            p[(si * a + ai) * s + sj] += pr;
        }
        if f.rewards.len() != s {
            return Err(Error::ShapeMismatch { expected: s, got: f.rewards.len() });
        }
        let mut r = Vec::with_capacity(s * a);
        for row in &f.rewards {
            if row.len() != a {
                return Err(Error::ShapeMismatch { expected: a, got: row.len() });
            }
            r.extend_from_slice(row);
        }
        TabularMDP::new(s, a, p, r, f.gamma, Dist::from_probs(f.p0)?)
    }
}

impl From<TabularMDP> for MdpFile {
    fn from(m: TabularMDP) -> Self {
        let (s, a) = (m.n_states, m.n_actions);
        let mut transitions = Vec::new();
        for si in 0..s {
            for ai in 0..a {
                for sj in 0..s {
                    let pr = m.p[(si * a + ai) * s + sj];
                    if pr > 0.0 {
                        transitions.push((si, ai, sj, pr));
                    }
                }
            }
        }
        MdpFile {
            states: Names::Count(s),
            actions: Names::Count(a),
            transitions,
            rewards: m.r.chunks(a).map(<[f64]>::to_vec).collect(),
            gamma: m.gamma,
            p0: m.p0.probs().to_vec(),
        }
    }
}

impl TabularMDP {
    pub fn new(n_states: usize, n_actions: usize, p: Vec<f64>, r: Vec<f64>, gamma: f64, p0: Dist) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidDomain("MDP needs at least one state and action".into()));
        }
        let (s, a) = (n_states, n_actions);
        if p.len() != s * a * s {
            return Err(Error::ShapeMismatch { expected: s * a * s, got: p.len() });
        }
        if r.len() != s * a {
            return Err(Error::ShapeMismatch { expected: s * a, got: r.len() });
        }
        if p0.len() != s {
            return Err(Error::ShapeMismatch { expected: s, got: p0.len() });
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::InvalidConfig(format!("gamma must lie in [0, 1), got {gamma}")));
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("rewards must be finite".into()));
        }
        for sa in 0..s * a {
            Dist::from_probs(p[sa * s..(sa + 1) * s].to_vec())
                .map_err(|e| Error::InvalidDistribution(format!("P(.|s={}, a={}): {e}", sa / a, sa % a)))?;
        }
        Ok(Self { n_states, n_actions, p, r, gamma, p0 })
    }

    /// Random dynamics and rewards in `[0, 1)`, reproducible from `seed`.
    pub fn random(seed: u64, n_states: usize, n_actions: usize, gamma: f64) -> Result<Self> {
        let mut g = rng::seeded(seed);
        let (s, a) = (n_states, n_actions);
        let mut p = Vec::with_capacity(s * a * s);
        for _ in 0..s * a {
            let w: Vec<f64> = (0..s).map(|_| rng::uniform(&mut g) + 0.05).collect();
            p.extend(Dist::from_weights(&w)?.probs());
        }
        let r = (0..s * a).map(|_| rng::uniform(&mut g)).collect();
        let w: Vec<f64> = (0..s).map(|_| rng::uniform(&mut g) + 0.05).collect();
        Self::new(s, a, p, r, gamma, Dist::from_weights(&w)?)
    }

    /// `rows x cols` grid, actions up/down/left/right, reward 1 for any action
    /// taken in the bottom-right cell, which teleports back to the start.
    /// Moves succeed with probability `1 - slip` and stay put otherwise.
    pub fn gridworld(rows: usize, cols: usize, gamma: f64, slip: f64) -> Result<Self> {
        let s = rows * cols;
        let a = 4;
        let goal = s - 1;
        let mut p = vec![0.0; s * a * s];
        let mut r = vec![0.0; s * a];
        for st in 0..s {
            let (i, j) = (st / cols, st % cols);
            for act in 0..a {
                let base = (st * a + act) * s;
                if st == goal {
                    p[base] = 1.0;
                    r[st * a + act] = 1.0;
                    continue;
                }
                let (ni, nj) = match act {
                    0 => (i.saturating_sub(1), j),
                    1 => ((i + 1).min(rows - 1), j),
                    2 => (i, j.saturating_sub(1)),
                    _ => (i, (j + 1).min(cols - 1)),
                };
                p[base + ni * cols + nj] += 1.0 - slip;
                p[base + st] += slip;
            }
        }
        Self::new(s, a, p, r, gamma, Dist::point_mass(s, 0))
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn p0(&self) -> &Dist {
        &self.p0
    }

    pub fn rewards(&self) -> &[f64] {
        &self.r
    }

    pub fn transition(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.p[(s * self.n_actions + a) * self.n_states + s2]
    }

    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let base = (s * self.n_actions + a) * self.n_states;
        &self.p[base..base + self.n_states]
    }

    /// Same dynamics with different rewards.
    pub fn with_rewards(&self, r: Vec<f64>) -> Result<Self> {
        Self::new(self.n_states, self.n_actions, self.p.clone(), r, self.gamma, self.p0.clone())
    }

    /// The policy model whose joint is `p0(s) * pi(a|s)`.
    pub fn policy_model(&self, policy: ConditionalSoftmaxModel) -> Result<TargetModel> {
        self.check_policy(&policy)?;
        TargetModel::conditional(policy, self.p0.clone())
    }

    fn check_policy(&self, pi: &ConditionalSoftmaxModel) -> Result<()> {
        if pi.nx != self.n_states || pi.ny != self.n_actions {
            return Err(Error::ShapeMismatch { expected: self.n_states * self.n_actions, got: pi.nx * pi.ny });
        }
        Ok(())
    }

    /// `I - gamma * P Pi` over state-action pairs.
    fn sa_system(&self, pi: &[f64]) -> DMatrix<f64> {
        let (s, a) = (self.n_states, self.n_actions);
        let n = s * a;
        let mut m = DMatrix::<f64>::identity(n, n);
        for sa in 0..n {
            let row = &self.p[sa * s..(sa + 1) * s];
            for (s2, &pr) in row.iter().enumerate() {
                if pr == 0.0 {
                    continue;
                }
                for a2 in 0..a {
                    m[(sa, s2 * a + a2)] -= self.gamma * pr * pi[s2 * a + a2];
                }
            }
        }
        m
    }

    /// `P_pi(s'|s) = sum_a pi(a|s) P(s'|s,a)`.
    fn state_kernel(&self, pi: &[f64]) -> Vec<f64> {
        let (s, a) = (self.n_states, self.n_actions);
        let mut k = vec![0.0; s * s];
        for si in 0..s {
            for ai in 0..a {
                let w = pi[si * a + ai];
                for (s2, pr) in self.transition_row(si, ai).iter().enumerate() {
                    k[si * s + s2] += w * pr;
                }
            }
        }
        k
    }

    fn q_iterative(&self, pi: &[f64], r: &[f64]) -> Vec<f64> {
        let (s, a) = (self.n_states, self.n_actions);
        let mut q = vec![0.0; s * a];
        loop {
            let v: Vec<f64> = (0..s).map(|si| (0..a).map(|ai| pi[si * a + ai] * q[si * a + ai]).sum()).collect();
            let mut delta: f64 = 0.0;
            for sa in 0..s * a {
                let nq =
                    r[sa] + self.gamma * self.p[sa * s..(sa + 1) * s].iter().zip(&v).map(|(p, v)| p * v).sum::<f64>();
                delta = delta.max((nq - q[sa]).abs());
                q[sa] = nq;
            }
            if delta * self.gamma <= ITER_TOL * (1.0 - self.gamma) {
                return q;
            }
        }
    }

    fn solve_q(&self, pi: &[f64], r: &[f64]) -> Result<Vec<f64>> {
        let n = self.n_states * self.n_actions;
        if n > DENSE_LIMIT {
            return Ok(self.q_iterative(pi, r));
        }
        let lu = self.sa_system(pi).lu();
        let sol = lu.solve(&DVector::from_column_slice(r)).ok_or(Error::SingularSystem)?;
        Ok(sol.iter().copied().collect())
    }
}

/// Action values of a policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    pub n_states: usize,
    pub n_actions: usize,
    pub q: Vec<f64>,
}

impl QTable {
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.q[s * self.n_actions + a]
    }

    /// `V(s) = sum_a pi(a|s) Q(s,a)`.
    pub fn values(&self, policy: &ConditionalSoftmaxModel) -> Vec<f64> {
        let pi = policy.probs();
        let a = self.n_actions;
        (0..self.n_states).map(|s| (0..a).map(|b| pi[s * a + b] * self.q[s * a + b]).sum()).collect()
    }
}

fn q_for_rewards(mdp: &TabularMDP, policy: &ConditionalSoftmaxModel, r: &[f64]) -> Result<QTable> {
    mdp.check_policy(policy)?;
    let q = mdp.solve_q(&policy.probs(), r)?;
    Ok(QTable { n_states: mdp.n_states, n_actions: mdp.n_actions, q })
}

/// Solves the Bellman equation for `Q^pi` exactly.
pub fn q_function(mdp: &TabularMDP, policy: &ConditionalSoftmaxModel) -> Result<QTable> {
    q_for_rewards(mdp, policy, &mdp.r)
}

/// `max |Q - r - gamma P Pi Q|`.
pub fn bellman_residual(mdp: &TabularMDP, policy: &ConditionalSoftmaxModel, q: &QTable) -> f64 {
    let (s, a) = (mdp.n_states, mdp.n_actions);
    let v = q.values(policy);
    (0..s * a)
        .map(|sa| {
            let back: f64 = mdp.p[sa * s..(sa + 1) * s].iter().zip(&v).map(|(p, v)| p * v).sum();
            (q.q[sa] - mdp.r[sa] - mdp.gamma * back).abs()
        })
        .fold(0.0, f64::max)
}

/// Discounted state visitation `mu = p0 + gamma P_pi^T mu`.
pub fn visitation(mdp: &TabularMDP, policy: &ConditionalSoftmaxModel) -> Result<Vec<f64>> {
    mdp.check_policy(policy)?;
    let s = mdp.n_states;
    let k = mdp.state_kernel(&policy.probs());
    if s * mdp.n_actions > DENSE_LIMIT {
        let mut mu = mdp.p0.probs().to_vec();
        loop {
            let mut next = mdp.p0.probs().to_vec();
            for si in 0..s {
                for s2 in 0..s {
                    next[s2] += mdp.gamma * k[si * s + s2] * mu[si];
                }
            }
            let d = next.iter().zip(&mu).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            mu = next;
            if d <= ITER_TOL * (1.0 - mdp.gamma) {
                return Ok(mu);
            }
        }
    }
    let mut m = DMatrix::<f64>::identity(s, s);
    for si in 0..s {
        for s2 in 0..s {
            m[(s2, si)] -= mdp.gamma * k[si * s + s2];
        }
    }
    let sol = m.lu().solve(&DVector::from_column_slice(mdp.p0.probs())).ok_or(Error::SingularSystem)?;
    Ok(sol.iter().copied().collect())
}

/// `J(theta) = sum_s p0(s) sum_a pi(a|s) Q(s,a)`.
pub fn expected_return(mdp: &TabularMDP, policy: &ConditionalSoftmaxModel) -> Result<f64> {
    let q = q_function(mdp, policy)?;
    Ok(mdp.p0.expect(&q.values(policy)))
}

/// Exact policy gradient over the softmax logits,
/// `mu(s) pi(a|s) (Q(s,a) - V(s))`.
pub fn exact_policy_gradient(mdp: &TabularMDP, policy: &ConditionalSoftmaxModel) -> Result<Vec<f64>> {
    let q = q_function(mdp, policy)?;
    let mu = visitation(mdp, policy)?;
    let v = q.values(policy);
    let pi = policy.probs();
    let a = mdp.n_actions;
    Ok((0..mdp.n_states * a).map(|sa| mu[sa / a] * pi[sa] * (q.q[sa] - v[sa / a])).collect())
}

/// Gradient of `sum_{s,a} w(s,a) Q(s,a)` in the policy logits, with `w`
/// fixed. Uses one transposed solve.
fn grad_weighted_q(mdp: &TabularMDP, policy: &ConditionalSoftmaxModel, q: &QTable, w: &[f64]) -> Result<Vec<f64>> {
    let (s, a) = (mdp.n_states, mdp.n_actions);
    let pi = policy.probs();
    let z: Vec<f64> = if s * a > DENSE_LIMIT {
        // z = w + gamma (P Pi)^T z, iterated.
        let mut z = w.to_vec();
        loop {
            let mut next = w.to_vec();
            for sa in 0..s * a {
                for (s2, pr) in mdp.p[sa * s..(sa + 1) * s].iter().enumerate() {
                    for a2 in 0..a {
                        next[s2 * a + a2] += mdp.gamma * pr * pi[s2 * a + a2] * z[sa];
                    }
                }
            }
            let d = next.iter().zip(&z).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            z = next;
            if d <= ITER_TOL * (1.0 - mdp.gamma) {
                break z;
            }
        }
    } else {
        let m = mdp.sa_system(&pi).transpose();
        let sol = m.lu().solve(&DVector::from_column_slice(w)).ok_or(Error::SingularSystem)?;
        sol.iter().copied().collect()
    };
    let mut u = vec![0.0; s];
    for sa in 0..s * a {
        for (s2, pr) in mdp.p[sa * s..(sa + 1) * s].iter().enumerate() {
            u[s2] += mdp.gamma * z[sa] * pr;
        }
    }
    let v = q.values(policy);
    Ok((0..s * a).map(|sa| u[sa / a] * pi[sa] * (q.q[sa] - v[sa / a])).collect())
}

/// How rewards become experience.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// `f = log Q`.
    #[default]
    LogQ,
    /// `f = Q / rho`.
    Q,
    /// `f = log(Q + Q_in)`.
    LogQIntrinsic,
    /// `f = (Q + Q_in) / rho`.
    QIntrinsic,
}

/// Shift applied to rewards so that `log Q` is defined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RewardOffset {
    /// Shift by `1 - min r` when some reward is non-positive, which keeps
    /// `Q >= 1` under every policy.
    #[default]
    Auto,
    Fixed(f64),
    /// No shift; non-positive `Q` is an error.
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSpec {
    #[serde(default)]
    pub mode: RewardMode,
    /// Intrinsic rewards, `S x A` row-major.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intrinsic: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default)]
    pub offset: RewardOffset,
}

impl RewardSpec {
    pub fn mode(mode: RewardMode) -> Self {
        Self { mode, intrinsic: None, rho: None, offset: RewardOffset::Auto }
    }
}

/// A reward experience plus the offset that was applied to the rewards.
#[derive(Debug, Clone)]
pub struct RewardExperience {
    pub experience: ExperienceFn,
    pub offset: f64,
}

/// Experience recomputed from `Q^theta` on every evaluation. The model
/// passed at evaluation time must be the conditional policy of this MDP.
/// The attached gradient differentiates `E_q[f]` through `Q^theta`.
pub fn f_reward(mdp: &TabularMDP, spec: &RewardSpec) -> Result<RewardExperience> {
    let (s, a) = (mdp.n_states, mdp.n_actions);
    let intrinsic = matches!(spec.mode, RewardMode::LogQIntrinsic | RewardMode::QIntrinsic);
    let r_in = match (&spec.intrinsic, intrinsic) {
        (Some(v), true) => {
            if v.len() != s * a {
                return Err(Error::ShapeMismatch { expected: s * a, got: v.len() });
            }
            v.clone()
        }
        (None, true) => vec![0.0; s * a],
        (_, false) => vec![0.0; s * a],
    };
    let log_mode = matches!(spec.mode, RewardMode::LogQ | RewardMode::LogQIntrinsic);
    let rho = spec.rho.unwrap_or(1.0);
    if !(rho > 0.0) {
        return Err(Error::InvalidConfig(format!("rho must be > 0, got {rho}")));
    }
    // The combined reward drives a single Q because Q is linear in r.
    let combined: Vec<f64> = mdp.r.iter().zip(&r_in).map(|(x, y)| x + y).collect();
    let offset = if !log_mode {
        0.0
    } else {
        match spec.offset {
            RewardOffset::Off => 0.0,
            RewardOffset::Fixed(c) => c,
            RewardOffset::Auto => {
                let m = combined.iter().copied().fold(f64::INFINITY, f64::min);
                if m > 0.0 {
                    0.0
                } else {
                    1.0 - m
                }
            }
        }
    };
    let shifted = mdp.with_rewards(combined.iter().map(|v| v + offset).collect())?;
    let label = format!("reward:{:?}", spec.mode);
    let policy_of = |m: Option<&TargetModel>| -> Result<ConditionalSoftmaxModel> {
        match m {
            Some(TargetModel::Conditional { policy, .. }) => Ok(policy.clone()),
            Some(_) => Err(Error::ModeUnsupported("reward experience needs a conditional policy".into())),
            None => Err(Error::ThetaRequired),
        }
    };
    let m_eval = shifted.clone();
    let exp = ExperienceFn::dynamic(label, s * a, move |m| {
        let pi = policy_of(m)?;
        let q = q_function(&m_eval, &pi)?;
        if log_mode {
            q.q.iter()
                .enumerate()
                .map(|(sa, &v)| {
                    if v > 0.0 {
                        Ok(v.ln())
                    } else {
                        Err(Error::NonPositiveQ { state: sa / a, action: sa % a, value: v })
                    }
                })
                .collect()
        } else {
            Ok(q.q.iter().map(|v| v / rho).collect())
        }
    })
    .with_grad(move |m, qd| {
        let pi = policy_of(Some(m))?;
        let q = q_function(&shifted, &pi)?;
        let w: Vec<f64> = if log_mode {
            qd.probs().iter().zip(&q.q).map(|(p, v)| p / v).collect()
        } else {
            qd.probs().iter().map(|p| p / rho).collect()
        };
        grad_weighted_q(&shifted, &pi, &q, &w)
    });
    Ok(RewardExperience { experience: exp, offset })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::normalize_log;

    fn random_policy(seed: u64, s: usize, a: usize) -> ConditionalSoftmaxModel {
        let mut g = rng::seeded(seed);
        ConditionalSoftmaxModel::from_logits(s, a, (0..s * a).map(|_| 2.0 * rng::uniform(&mut g) - 1.0).collect())
            .unwrap()
    }

    #[test]
    fn single_state_geometric_series() {
        let m = TabularMDP::new(1, 1, vec![1.0], vec![1.0], 0.5, Dist::uniform(1)).unwrap();
        let pi = ConditionalSoftmaxModel::zeros(1, 1);
        assert!((q_function(&m, &pi).unwrap().q[0] - 2.0).abs() < 1e-14);
        let mu = visitation(&m, &pi).unwrap();
        assert!((mu[0] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn zero_reward_gives_zero_q_and_gradient() {
        let m = TabularMDP::random(3, 4, 2, 0.9).unwrap().with_rewards(vec![0.0; 8]).unwrap();
        let pi = random_policy(1, 4, 2);
        assert!(q_function(&m, &pi).unwrap().q.iter().all(|v| v.abs() < 1e-15));
        assert!(exact_policy_gradient(&m, &pi).unwrap().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn bellman_residual_and_visitation_mass() {
        for seed in 0..10 {
            let m = TabularMDP::random(seed, 5, 3, 0.9).unwrap();
            let pi = random_policy(seed + 7, 5, 3);
            let q = q_function(&m, &pi).unwrap();
            assert!(bellman_residual(&m, &pi, &q) <= 1e-8);
            let mu = visitation(&m, &pi).unwrap();
            assert!((mu.iter().sum::<f64>() - 10.0).abs() < 1e-8);
        }
        let m = TabularMDP::random(1, 3, 2, 0.0).unwrap();
        let mu = visitation(&m, &random_policy(2, 3, 2)).unwrap();
        for (a, b) in mu.iter().zip(m.p0().probs()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn visitation_matches_power_series() {
        let m = TabularMDP::random(11, 3, 2, 0.8).unwrap();
        let pi = random_policy(12, 3, 2);
        let k = m.state_kernel(&pi.probs());
        let mut d = m.p0().probs().to_vec();
        let mut acc = d.clone();
        let mut g = 1.0;
        while g > 1e-14 {
            let mut nd = vec![0.0; 3];
            for s in 0..3 {
                for s2 in 0..3 {
                    nd[s2] += d[s] * k[s * 3 + s2];
                }
            }
            d = nd;
            g *= 0.8;
            for s in 0..3 {
                acc[s] += g * d[s];
            }
        }
        let mu = visitation(&m, &pi).unwrap();
        for (a, b) in mu.iter().zip(&acc) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn q_matches_monte_carlo() {
        // State 0 is transient, state 1 absorbs with zero reward.
        let p = vec![0.5, 0.5, 0.2, 0.8, 0.0, 1.0, 0.0, 1.0];
        let r = vec![1.0, 2.0, 0.0, 0.0];
        let m = TabularMDP::new(2, 2, p, r, 0.9, Dist::point_mass(2, 0)).unwrap();
        let pi = ConditionalSoftmaxModel::from_logits(2, 2, vec![0.3, -0.2, 0.0, 0.0]).unwrap();
        let q = q_function(&m, &pi).unwrap();
        let probs = pi.probs();
        let mut g = rng::seeded(99);
        let n = 10_000;
        let mut rets = Vec::with_capacity(n);
        for _ in 0..n {
            let (mut s, mut a, mut disc, mut ret) = (0usize, 0usize, 1.0, 0.0);
            for _ in 0..400 {
                ret += disc * m.rewards()[s * 2 + a];
                disc *= 0.9;
                s = rng::sample_index(&mut g, m.transition_row(s, a));
                a = rng::sample_index(&mut g, &probs[s * 2..s * 2 + 2]);
            }
            rets.push(ret);
        }
        let mean = rets.iter().sum::<f64>() / n as f64;
        let var = rets.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - q.get(0, 0)).abs() <= 3.0 * se, "mc {mean} exact {} se {se}", q.get(0, 0));
    }

    #[test]
    fn policy_gradient_matches_finite_differences() {
        let m = TabularMDP::gridworld(2, 2, 0.9, 0.1).unwrap();
        let pi = random_policy(5, 4, 4);
        let g = exact_policy_gradient(&m, &pi).unwrap();
        let h = 1e-6;
        for i in 0..16 {
            let mut a = pi.clone();
            let mut b = pi.clone();
            a.theta[i] += h;
            b.theta[i] -= h;
            let fd = (expected_return(&m, &a).unwrap() - expected_return(&m, &b).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-4 * g[i].abs().max(1e-3), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn ascent_step_does_not_lower_return_near_optimum() {
        let m = TabularMDP::gridworld(2, 2, 0.9, 0.0).unwrap();
        // Near-deterministic policy heading right then down.
        let mut theta = vec![0.0; 16];
        theta[3] = 12.0;
        theta[4 + 1] = 12.0;
        theta[8 + 3] = 12.0;
        let pi = ConditionalSoftmaxModel::from_logits(4, 4, theta).unwrap();
        let g = exact_policy_gradient(&m, &pi).unwrap();
        let mut step = pi.clone();
        for (t, d) in step.theta.iter_mut().zip(&g) {
            *t += 1e-2 * d;
        }
        assert!(expected_return(&m, &step).unwrap() >= expected_return(&m, &pi).unwrap());
    }

    #[test]
    fn log_q_student_gradient_is_scaled_policy_gradient() {
        for seed in 0..5 {
            let m = TabularMDP::random(seed, 4, 2, 0.9).unwrap();
            let pi = random_policy(seed + 3, 4, 2);
            let model = m.policy_model(pi.clone()).unwrap();
            let rx = f_reward(&m, &RewardSpec::mode(RewardMode::LogQ)).unwrap();
            assert_eq!(rx.offset, 0.0);
            let f = rx.experience.eval(Some(&model)).unwrap();
            let lp = model.log_joint();
            let q = normalize_log(&lp.iter().zip(&f).map(|(a, b)| a + b).collect::<Vec<_>>()).unwrap();
            let mut g = model.grad_expected_log_prob(&q).unwrap();
            let gf = rx.experience.grad_expectation(&model, &q).unwrap().unwrap();
            for (a, b) in g.iter_mut().zip(gf) {
                *a += b;
            }
            let pg = exact_policy_gradient(&m, &pi).unwrap();
            let z = expected_return(&m, &pi).unwrap();
            for (a, b) in g.iter().zip(&pg) {
                assert!((a - b / z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reward_experience_examples() {
        let m = TabularMDP::random(2, 3, 2, 0.8).unwrap();
        let pi = random_policy(4, 3, 2);
        let model = m.policy_model(pi.clone()).unwrap();
        let q_only = f_reward(&m, &RewardSpec::mode(RewardMode::Q)).unwrap().experience.eval(Some(&model)).unwrap();
        let spec = RewardSpec { intrinsic: Some(vec![0.0; 6]), ..RewardSpec::mode(RewardMode::QIntrinsic) };
        assert_eq!(f_reward(&m, &spec).unwrap().experience.eval(Some(&model)).unwrap(), q_only);

        let c = m.with_rewards(vec![0.7; 6]).unwrap();
        let f = f_reward(&c, &RewardSpec::mode(RewardMode::LogQ)).unwrap().experience.eval(Some(&model)).unwrap();
        assert!(f.iter().all(|v| (v - (0.7f64 / 0.2).ln()).abs() < 1e-12));

        let neg = m.with_rewards(vec![-1.0, 0.5, 0.2, 0.1, 0.0, 0.3]).unwrap();
        let rx = f_reward(&neg, &RewardSpec::mode(RewardMode::LogQ)).unwrap();
        assert_eq!(rx.offset, 2.0);
        assert!(rx.experience.eval(Some(&model)).unwrap().iter().all(|v| v.is_finite()));
        let off = RewardSpec { offset: RewardOffset::Off, ..RewardSpec::mode(RewardMode::LogQ) };
        let all_neg = m.with_rewards(vec![-1.0; 6]).unwrap();
        assert!(matches!(
            f_reward(&all_neg, &off).unwrap().experience.eval(Some(&model)),
            Err(Error::NonPositiveQ { .. })
        ));
    }

    #[test]
    fn q_mode_gradient_matches_finite_differences() {
        let m = TabularMDP::random(8, 3, 2, 0.7).unwrap();
        let pi = random_policy(9, 3, 2);
        let model = m.policy_model(pi.clone()).unwrap();
        let rx = f_reward(&m, &RewardSpec::mode(RewardMode::Q)).unwrap().experience;
        let qd = normalize_log(&[0.1, 0.4, -0.3, 0.2, 0.0, 0.5]).unwrap();
        let g = rx.grad_expectation(&model, &qd).unwrap().unwrap();
        let h = 1e-6;
        for i in 0..6 {
            let mut a = pi.clone();
            let mut b = pi.clone();
            a.theta[i] += h;
            b.theta[i] -= h;
            let fa = qd.expect(&rx.eval(Some(&m.policy_model(a).unwrap())).unwrap());
            let fb = qd.expect(&rx.eval(Some(&m.policy_model(b).unwrap())).unwrap());
            assert!(((fa - fb) / (2.0 * h) - g[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn json_roundtrip() {
        let text = r#"{"states": ["a", "b"], "actions": 1,
            "transitions": [[0, 0, 1, 1.0], [1, 0, 1, 1.0]],
            "rewards": [[1.0], [0.0]], "gamma": 0.5, "p0": [1.0, 0.0]}"#;
        let m: TabularMDP = serde_json::from_str(text).unwrap();
        assert_eq!(m.transition(0, 0, 1), 1.0);
        let back: TabularMDP = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
        let bad = text.replace("[0, 0, 1, 1.0]", "[0, 0, 1, 0.5]");
        assert!(serde_json::from_str::<TabularMDP>(&bad).is_err());
    }
}
