//! Reference implementations of the classical algorithms, written directly in
//! probability space on plain vectors. Nothing here calls into the solver,
//! experience, model or MDP modules, so agreement with a recipe is evidence
//! rather than tautology.

/// One EM iteration's output: the E-step posterior table over `(x, y)` at
/// `x * k + y` weighted by the data frequency, and the M-step parameters.
#[derive(Debug, Clone)]
pub struct EmStep {
    pub q: Vec<f64>,
    pub pi: Vec<f64>,
    pub phi: Vec<Vec<f64>>,
    /// Negative marginal log-likelihood per observation before this step.
    pub nll: f64,
}

/// Mixture-of-categoricals EM from `(pi, phi)` on frequency `data` over `x`.
pub fn em(data: &[f64], pi: &[f64], phi: &[Vec<f64>], iterations: usize) -> Vec<EmStep> {
    let k = pi.len();
    let nx = data.len();
    let total: f64 = data.iter().sum();
    let freq: Vec<f64> = data.iter().map(|c| c / total).collect();
    let mut pi = pi.to_vec();
    let mut phi = phi.to_vec();
    let mut out = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let mut q = vec![0.0; nx * k];
        let mut nll = 0.0;
        for x in 0..nx {
            if freq[x] == 0.0 {
                continue;
            }
            let joint: Vec<f64> = (0..k).map(|y| pi[y] * phi[y][x]).collect();
            let px: f64 = joint.iter().sum();
            nll -= freq[x] * px.ln();
            for y in 0..k {
                q[x * k + y] = freq[x] * joint[y] / px;
            }
        }
        let mut new_pi = vec![0.0; k];
        let mut new_phi = phi.clone();
        for y in 0..k {
            new_pi[y] = (0..nx).map(|x| q[x * k + y]).sum();
            if new_pi[y] > 0.0 {
                for x in 0..nx {
                    new_phi[y][x] = q[x * k + y] / new_pi[y];
                }
            }
        }
        pi = new_pi;
        phi = new_phi;
        out.push(EmStep { q, pi: pi.clone(), phi: phi.clone(), nll });
    }
    out
}

/// Hedge with learning rate `eta`: weights before round 1, then after every round.
pub fn hedge(initial: &[f64], rewards: &[Vec<f64>], eta: f64) -> Vec<Vec<f64>> {
    let mut w = initial.to_vec();
    let mut out = vec![w.clone()];
    for r in rewards {
        for (wi, ri) in w.iter_mut().zip(r) {
            *wi *= (eta * ri).exp();
        }
        let z: f64 = w.iter().sum();
        for wi in w.iter_mut() {
            *wi /= z;
        }
        out.push(w.clone());
    }
    out
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
pub fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))?;
        if a[piv][c].abs() < 1e-300 {
            return None;
        }
        a.swap(c, piv);
        b.swap(c, piv);
        for r in c + 1..n {
            let m = a[r][c] / a[c][c];
            if m != 0.0 {
                for j in c..n {
                    a[r][j] -= m * a[c][j];
                }
                b[r] -= m * b[c];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|j| a[r][j] * x[j]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

/// A finite MDP as plain arrays: `trans[s][a][s']`, `reward[s][a]`.
#[derive(Debug, Clone)]
pub struct PlainMdp {
    pub trans: Vec<Vec<Vec<f64>>>,
    pub reward: Vec<Vec<f64>>,
    pub gamma: f64,
    pub p0: Vec<f64>,
}

impl PlainMdp {
    fn dims(&self) -> (usize, usize) {
        (self.reward.len(), self.reward[0].len())
    }

    /// `V^pi` from the state-level Bellman system `(I - gamma P_pi) V = r_pi`.
    pub fn values(&self, pi: &[Vec<f64>]) -> Option<Vec<f64>> {
        let (ns, na) = self.dims();
        let mut a = vec![vec![0.0; ns]; ns];
        let mut b = vec![0.0; ns];
        for s in 0..ns {
            a[s][s] += 1.0;
            for act in 0..na {
                b[s] += pi[s][act] * self.reward[s][act];
                for s2 in 0..ns {
                    a[s][s2] -= self.gamma * pi[s][act] * self.trans[s][act][s2];
                }
            }
        }
        solve(a, b)
    }

    /// `Q^pi(s, a) = r(s, a) + gamma sum_s' P(s'|s,a) V(s')`.
    pub fn q_values(&self, pi: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
        let v = self.values(pi)?;
        let (ns, na) = self.dims();
        Some(
            (0..ns)
                .map(|s| {
                    (0..na)
                        .map(|a| {
                            self.reward[s][a] + self.gamma * (0..ns).map(|s2| self.trans[s][a][s2] * v[s2]).sum::<f64>()
                        })
                        .collect()
                })
                .collect(),
        )
    }

    /// Discounted occupancy `mu = p0^T (I - gamma P_pi)^{-1}`.
    pub fn occupancy(&self, pi: &[Vec<f64>]) -> Option<Vec<f64>> {
        let (ns, na) = self.dims();
        let mut a = vec![vec![0.0; ns]; ns];
        for s in 0..ns {
            a[s][s] += 1.0;
            for s2 in 0..ns {
                let m: f64 = (0..na).map(|act| pi[s2][act] * self.trans[s2][act][s]).sum();
                a[s][s2] -= self.gamma * m;
            }
        }
        solve(a, self.p0.clone())
    }

    /// Exact softmax policy gradient `mu(s) pi(a|s) (Q(s,a) - V(s))`,
    /// flattened at `s * A + a`.
    pub fn policy_gradient(&self, pi: &[Vec<f64>]) -> Option<Vec<f64>> {
        let q = self.q_values(pi)?;
        let mu = self.occupancy(pi)?;
        let (ns, na) = self.dims();
        let mut g = Vec::with_capacity(ns * na);
        for s in 0..ns {
            let v: f64 = (0..na).map(|a| pi[s][a] * q[s][a]).sum();
            for a in 0..na {
                g.push(mu[s] * pi[s][a] * (q[s][a] - v));
            }
        }
        Some(g)
    }

    /// `J = sum_s p0(s) V(s)`.
    pub fn expected_return(&self, pi: &[Vec<f64>]) -> Option<f64> {
        let v = self.values(pi)?;
        Some(self.p0.iter().zip(&v).map(|(a, b)| a * b).sum())
    }

    /// Rewards shifted so every reward is at least 1 when some reward is
    /// non-positive.
    pub fn shifted_for_log(&self) -> (PlainMdp, f64) {
        let m = self.reward.iter().flatten().copied().fold(f64::INFINITY, f64::min);
        let c = if m > 0.0 { 0.0 } else { 1.0 - m };
        let mut out = self.clone();
        for row in out.reward.iter_mut() {
            for v in row.iter_mut() {
                *v += c;
            }
        }
        (out, c)
    }
}

/// `p(t) exp(f(t) / temp) / Z`, computed in probability space.
pub fn tilt(p: &[f64], f: &[f64], temp: f64) -> Vec<f64> {
    let m = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = p.iter().zip(f).map(|(a, b)| a * ((b - m) / temp).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|v| v / z).collect()
}

/// Empirical frequencies `m(t) w(t) / sum`.
pub fn weighted_frequencies(counts: &[f64], w: &[f64]) -> Vec<f64> {
    let v: Vec<f64> = counts.iter().zip(w).map(|(a, b)| a * b).collect();
    let z: f64 = v.iter().sum();
    v.into_iter().map(|x| x / z).collect()
}

/// Exponentiated-payoff distribution `sum_{t*} p_data(t*) exp(R(t, t*) / temp) / Z(t*)`,
/// where `payoff[t*][t] = R(t, t*)`.
pub fn exponentiated_payoff(data: &[f64], payoff: &[Vec<f64>], temp: f64) -> Vec<f64> {
    let total: f64 = data.iter().sum();
    let n = data.len();
    let mut out = vec![0.0; n];
    for (ts, row) in payoff.iter().enumerate() {
        if data[ts] == 0.0 {
            continue;
        }
        let e: Vec<f64> = row.iter().map(|r| (r / temp).exp()).collect();
        let z: f64 = e.iter().sum();
        for t in 0..n {
            out[t] += data[ts] / total * e[t] / z;
        }
    }
    out
}

/// Optimal classifier `p_data / (p_data + p)`.
pub fn gan_optimum(p_data: &[f64], p: &[f64]) -> Vec<f64> {
    p_data.iter().zip(p).map(|(d, g)| if d + g > 0.0 { d / (d + g) } else { 0.5 }).collect()
}

/// `W1` between two distributions on unit-spaced ordered points, from CDFs.
pub fn w1_cdf(a: &[f64], b: &[f64]) -> f64 {
    let mut ca = 0.0;
    let mut cb = 0.0;
    let mut s = 0.0;
    for i in 0..a.len().saturating_sub(1) {
        ca += a[i];
        cb += b[i];
        s += (ca - cb).abs();
    }
    s
}
