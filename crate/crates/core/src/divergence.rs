//! Divergences between a teacher `q` and a model `p`, their gradients in `q`,
//! and the influence-function machinery behind functional descent.

use serde::{Deserialize, Serialize};

use crate::dist::{normalize_log, Dist};
use crate::error::{Error, Result};

/// Which divergence the objective uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DivergenceFn {
    #[default]
    CrossEntropy,
    Kl,
    Js,
    /// 1-D Wasserstein distance. `coords` are the ordered ground positions;
    /// index positions are used when absent.
    W1 {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        coords: Option<Vec<f64>>,
    },
}

impl DivergenceFn {
    pub fn w1() -> Self {
        DivergenceFn::W1 { coords: None }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DivergenceFn::CrossEntropy => "cross_entropy",
            DivergenceFn::Kl => "kl",
            DivergenceFn::Js => "js",
            DivergenceFn::W1 { .. } => "w1",
        }
    }

    /// Widths between successive W1 ground positions.
    pub fn gap_widths(&self, n: usize) -> Result<Vec<f64>> {
        self.gaps(n)
    }

    fn gaps(&self, n: usize) -> Result<Vec<f64>> {
        let DivergenceFn::W1 { coords } = self else {
            return Err(Error::InvalidConfig(format!("{} has no ground positions", self.name())));
        };
        match coords {
            None => Ok(vec![1.0; n.saturating_sub(1)]),
            Some(c) => {
                if c.len() != n {
                    return Err(Error::ShapeMismatch { expected: n, got: c.len() });
                }
                let g: Vec<f64> = c.windows(2).map(|w| w[1] - w[0]).collect();
                if g.iter().any(|d| !(*d > 0.0)) {
                    return Err(Error::InvalidConfig("W1 coordinates must be increasing".into()));
                }
                Ok(g)
            }
        }
    }
}

fn check_len(q: &[f64], p: &[f64]) -> Result<()> {
    if q.len() != p.len() {
        return Err(Error::ShapeMismatch { expected: p.len(), got: q.len() });
    }
    Ok(())
}

fn kl_raw(q: &[f64], p: &[f64]) -> Result<f64> {
    let mut s = 0.0;
    for (i, (&a, &b)) in q.iter().zip(p).enumerate() {
        if a > 0.0 {
            if b <= 0.0 {
                return Err(Error::SupportViolation { index: i });
            }
            s += a * (a / b).ln();
        }
    }
    Ok(s)
}

/// Divergence evaluated on raw vectors, without simplex validation.
/// Useful for finite differences off the simplex.
pub fn divergence_raw(kind: &DivergenceFn, q: &[f64], p: &[f64]) -> Result<f64> {
    check_len(q, p)?;
    match kind {
        DivergenceFn::CrossEntropy => {
            let mut s = 0.0;
            for (i, (&a, &b)) in q.iter().zip(p).enumerate() {
                if a > 0.0 {
                    if b <= 0.0 {
                        return Err(Error::SupportViolation { index: i });
                    }
                    s -= a * b.ln();
                }
            }
            Ok(s)
        }
        DivergenceFn::Kl => kl_raw(q, p),
        DivergenceFn::Js => {
            let h: Vec<f64> = q.iter().zip(p).map(|(a, b)| 0.5 * (a + b)).collect();
            Ok(0.5 * kl_raw(q, &h)? + 0.5 * kl_raw(p, &h)?)
        }
        DivergenceFn::W1 { .. } => {
            let gaps = kind.gaps(q.len())?;
            let (mut cq, mut cp, mut s) = (0.0, 0.0, 0.0);
            for (i, g) in gaps.iter().enumerate() {
                cq += q[i];
                cp += p[i];
                s += (cq - cp).abs() * g;
            }
            Ok(s)
        }
    }
}

/// Exact divergence. Support violations for CE/KL surface as
/// [`Error::SupportViolation`]; see [`divergence_or_inf`].
pub fn divergence(kind: &DivergenceFn, q: &Dist, p: &Dist) -> Result<f64> {
    divergence_raw(kind, q.probs(), p.probs())
}

/// Like [`divergence`] but maps a support violation to `+inf`.
pub fn divergence_or_inf(kind: &DivergenceFn, q: &Dist, p: &Dist) -> Result<f64> {
    match divergence(kind, q, p) {
        Err(Error::SupportViolation { .. }) => Ok(f64::INFINITY),
        r => r,
    }
}

/// Gradient in `q` on raw vectors.
pub fn divergence_grad_raw(kind: &DivergenceFn, q: &[f64], p: &[f64]) -> Result<Vec<f64>> {
    check_len(q, p)?;
    let needs_interior = matches!(kind, DivergenceFn::Kl | DivergenceFn::Js);
    if needs_interior {
        if let Some(index) = q.iter().position(|&v| v <= 0.0) {
            return Err(Error::BoundaryPoint { index });
        }
    }
    match kind {
        DivergenceFn::CrossEntropy | DivergenceFn::Kl => {
            if let Some(index) = p.iter().position(|&v| v <= 0.0) {
                return Err(Error::SupportViolation { index });
            }
            Ok(q.iter()
                .zip(p)
                .map(|(&a, &b)| match kind {
                    DivergenceFn::Kl => a.ln() - b.ln() + 1.0,
                    _ => -b.ln(),
                })
                .collect())
        }
        DivergenceFn::Js => Ok(q.iter().zip(p).map(|(&a, &b)| 0.5 * (2.0 * a / (a + b)).ln()).collect()),
        DivergenceFn::W1 { .. } => {
            let n = q.len();
            let gaps = kind.gaps(n)?;
            let (mut cq, mut cp) = (0.0, 0.0);
            let signs: Vec<f64> = gaps
                .iter()
                .enumerate()
                .map(|(i, g)| {
                    cq += q[i];
                    cp += p[i];
                    let d = cq - cp;
                    if d > 0.0 {
                        *g
                    } else if d < 0.0 {
                        -*g
                    } else {
                        0.0
                    }
                })
                .collect();
            let mut out = vec![0.0; n];
            let mut acc = 0.0;
            for i in (0..n).rev() {
                if i < n - 1 {
                    acc += signs[i];
                }
                out[i] = acc;
            }
            Ok(out)
        }
    }
}

/// `dD/dq_i`. KL and JS need an interior `q`.
pub fn divergence_grad_q(kind: &DivergenceFn, q: &Dist, p: &Dist) -> Result<Vec<f64>> {
    divergence_grad_raw(kind, q.probs(), p.probs())
}

/// A convex functional `J(q) = D(q, p_d)` against a fixed reference.
#[derive(Debug, Clone, PartialEq)]
pub struct Functional {
    pub kind: DivergenceFn,
    pub p_d: Dist,
}

/// Mean-centered influence function together with solver diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceFn {
    pub psi: Vec<f64>,
    pub iterations: usize,
    /// Largest preconditioned residual `|q_i - h_i| / (dh_i/dphi_i)` at exit.
    pub stationarity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InfluenceOptions {
    pub step: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for InfluenceOptions {
    fn default() -> Self {
        Self { step: 0.1, max_iter: 2000, tol: 1e-6 }
    }
}

pub fn center(v: &[f64]) -> Vec<f64> {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - m).collect()
}

/// Maximizer of `<phi, h> - JS(h, p)` over the simplex. `p` must be interior.
fn js_conjugate_argmax(phi: &[f64], p: &[f64]) -> Vec<f64> {
    let h_of = |nu: f64| -> Vec<f64> {
        phi.iter()
            .zip(p)
            .map(|(&f, &pi)| {
                let c = (2.0 * (f - nu)).exp();
                c * pi / (2.0 - c)
            })
            .collect()
    };
    // Mass is decreasing in nu and must stay below c_i = 2.
    let fmax = phi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut lo = fmax - 0.5 * 2f64.ln();
    let mut step = 1.0;
    let mut hi = lo + step;
    while h_of(hi).iter().sum::<f64>() > 1.0 {
        step *= 2.0;
        hi = lo + step;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if h_of(mid).iter().sum::<f64>() > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let h = h_of(hi);
    let s: f64 = h.iter().sum();
    h.into_iter().map(|v| v / s).collect()
}

/// Numerically recovers the influence function of `J` at `q` by ascending
/// `E_q[phi] - J*(phi)` over tabular `phi`.
///
/// The ascent direction is `q - h*(phi)` scaled by the inverse diagonal of
/// `dh*/dphi`, which makes the fixed step size scale-free across entries.
pub fn influence_function(j: &Functional, q: &Dist, opts: InfluenceOptions) -> Result<InfluenceFn> {
    let n = q.len();
    if j.p_d.len() != n {
        return Err(Error::ShapeMismatch { expected: n, got: j.p_d.len() });
    }
    let p = j.p_d.probs();
    if let DivergenceFn::CrossEntropy = j.kind {
        if let Some(index) = p.iter().position(|&v| v <= 0.0) {
            return Err(Error::SupportViolation { index });
        }
        let psi: Vec<f64> = p.iter().map(|v| -v.ln()).collect();
        return Ok(InfluenceFn { psi: center(&psi), iterations: 0, stationarity: 0.0 });
    }
    if !matches!(j.kind, DivergenceFn::Kl | DivergenceFn::Js) {
        return Err(Error::ModeUnsupported(format!("influence function for {} divergence", j.kind.name())));
    }
    if let Some(index) = q.probs().iter().position(|&v| v <= 0.0) {
        return Err(Error::BoundaryPoint { index });
    }
    if let Some(index) = p.iter().position(|&v| v <= 0.0) {
        return Err(Error::SupportViolation { index });
    }
    let qp = q.probs();
    let mut phi = vec![0.0; n];
    let mut resid = f64::INFINITY;
    for it in 0..opts.max_iter {
        let (h, diag): (Vec<f64>, Vec<f64>) = match j.kind {
            DivergenceFn::Kl => {
                let s: Vec<f64> = phi.iter().zip(p).map(|(f, pi)| f + pi.ln()).collect();
                let h = normalize_log(&s)?.probs().to_vec();
                let d = h.clone();
                (h, d)
            }
            _ => {
                let h = js_conjugate_argmax(&phi, p);
                let d = h.iter().zip(p).map(|(hi, pi)| 2.0 * hi * (hi + pi) / pi).collect();
                (h, d)
            }
        };
        let dir: Vec<f64> = qp.iter().zip(&h).zip(&diag).map(|((a, b), d)| (a - b) / d).collect();
        if dir.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        resid = dir.iter().fold(0.0, |m: f64, v| m.max(v.abs()));
        if resid <= opts.tol {
            return Ok(InfluenceFn { psi: center(&phi), iterations: it, stationarity: resid });
        }
        for (f, d) in phi.iter_mut().zip(&dir) {
            *f += opts.step * d;
        }
    }
    Err(Error::NonConvergence {
        iterations: opts.max_iter,
        detail: format!("influence ascent stationarity residual {resid:.3e}"),
    })
}

/// One functional-descent step `q' ∝ q * exp(-step * psi)`.
pub fn pfd_step(q: &Dist, psi: &InfluenceFn, step: f64) -> Result<Dist> {
    if psi.psi.len() != q.len() {
        return Err(Error::ShapeMismatch { expected: q.len(), got: psi.psi.len() });
    }
    let s: Vec<f64> = q.log_probs().iter().zip(&psi.psi).map(|(l, v)| l - step * v).collect();
    normalize_log(&s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::{entropy, UncertaintyFn};
    use crate::rng;
    use proptest::prelude::*;

    fn rand_dist(seed: u64, n: usize, spread: f64) -> Dist {
        let mut r = rng::seeded(seed);
        let s: Vec<f64> = (0..n).map(|_| spread * rng::uniform(&mut r)).collect();
        normalize_log(&s).unwrap()
    }

    fn fd(kind: &DivergenceFn, q: &[f64], p: &[f64]) -> Vec<f64> {
        (0..q.len())
            .map(|i| {
                let h = 1e-6;
                let mut a = q.to_vec();
                let mut b = q.to_vec();
                a[i] += h;
                b[i] -= h;
                (divergence_raw(kind, &a, p).unwrap() - divergence_raw(kind, &b, p).unwrap()) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn self_divergence() {
        let q = rand_dist(1, 6, 2.0);
        for k in [DivergenceFn::Kl, DivergenceFn::Js, DivergenceFn::w1()] {
            assert!(divergence(&k, &q, &q).unwrap().abs() < 1e-15);
        }
        let ce = divergence(&DivergenceFn::CrossEntropy, &q, &q).unwrap();
        assert!((ce - entropy(&q, UncertaintyFn::Shannon)).abs() < 1e-14);
    }

    #[test]
    fn closed_form_values() {
        let a = Dist::point_mass(2, 0);
        let b = Dist::point_mass(2, 1);
        assert!((divergence(&DivergenceFn::Js, &a, &b).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(divergence(&DivergenceFn::w1(), &a, &b).unwrap(), 1.0);
        let w = DivergenceFn::W1 { coords: Some(vec![0.0, 2.5]) };
        assert_eq!(divergence(&w, &a, &b).unwrap(), 2.5);
    }

    #[test]
    fn support_violation_is_tagged() {
        let q = Dist::uniform(2);
        let p = Dist::point_mass(2, 0);
        assert_eq!(divergence(&DivergenceFn::Kl, &q, &p).unwrap_err(), Error::SupportViolation { index: 1 });
        assert_eq!(divergence_or_inf(&DivergenceFn::CrossEntropy, &q, &p).unwrap(), f64::INFINITY);
        assert!(divergence(&DivergenceFn::Js, &q, &p).unwrap().is_finite());
    }

    #[test]
    fn gradient_examples() {
        let q = rand_dist(3, 5, 2.0);
        let p = rand_dist(4, 5, 2.0);
        let g = divergence_grad_q(&DivergenceFn::CrossEntropy, &q, &p).unwrap();
        for (gi, pi) in g.iter().zip(p.probs()) {
            assert_eq!(*gi, -pi.ln());
        }
        let g = divergence_grad_q(&DivergenceFn::Kl, &q, &q).unwrap();
        assert!(g.iter().all(|v| (v - g[0]).abs() < 1e-15));
        let g = divergence_grad_q(&DivergenceFn::Js, &q, &p).unwrap();
        let f = fd(&DivergenceFn::Js, q.probs(), p.probs());
        for (a, b) in g.iter().zip(&f) {
            assert!((a - b).abs() <= 1e-5 * a.abs().max(1e-2));
        }
        assert_eq!(
            divergence_grad_q(&DivergenceFn::Kl, &Dist::point_mass(2, 0), &Dist::uniform(2)).unwrap_err(),
            Error::BoundaryPoint { index: 1 }
        );
    }

    #[test]
    fn w1_subgradient_matches_fd_off_kinks() {
        let q = rand_dist(8, 7, 2.0);
        let p = rand_dist(9, 7, 2.0);
        let g = divergence_grad_q(&DivergenceFn::w1(), &q, &p).unwrap();
        let f = fd(&DivergenceFn::w1(), q.probs(), p.probs());
        for (a, b) in g.iter().zip(&f) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn kl_rearrangement_identity() {
        for seed in 0..20 {
            let q = rand_dist(seed, 6, 3.0);
            let p = rand_dist(seed + 100, 6, 3.0);
            let (a0, b0) = (0.7 + seed as f64 * 0.1, 1.3);
            let ce = divergence(&DivergenceFn::CrossEntropy, &q, &p).unwrap();
            let kl = divergence(&DivergenceFn::Kl, &q, &p).unwrap();
            let lhs = -a0 * entropy(&q, UncertaintyFn::Shannon) + b0 * ce;
            let rhs = (b0 - a0) * ce + a0 * kl;
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn influence_kl_matches_analytic() {
        let q = rand_dist(5, 8, 3.0);
        let pd = rand_dist(6, 8, 3.0);
        let j = Functional { kind: DivergenceFn::Kl, p_d: pd.clone() };
        let inf = influence_function(&j, &q, InfluenceOptions::default()).unwrap();
        let want: Vec<f64> = q.probs().iter().zip(pd.probs()).map(|(a, b)| (a / b).ln() + 1.0).collect();
        for (a, b) in inf.psi.iter().zip(center(&want)) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn influence_js_matches_analytic() {
        let q = rand_dist(15, 8, 3.0);
        let pd = rand_dist(16, 8, 3.0);
        let j = Functional { kind: DivergenceFn::Js, p_d: pd.clone() };
        let inf = influence_function(&j, &q, InfluenceOptions::default()).unwrap();
        let want: Vec<f64> = q.probs().iter().zip(pd.probs()).map(|(a, b)| 0.5 * (2.0 * a / (a + b)).ln()).collect();
        for (a, b) in inf.psi.iter().zip(center(&want)) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }

        let same =
            influence_function(&Functional { kind: DivergenceFn::Js, p_d: q.clone() }, &q, InfluenceOptions::default())
                .unwrap();
        assert!(same.psi.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn influence_nonconvergence_is_reported() {
        let q = rand_dist(1, 4, 3.0);
        let j = Functional { kind: DivergenceFn::Kl, p_d: Dist::uniform(4) };
        let opts = InfluenceOptions { max_iter: 3, ..Default::default() };
        assert!(matches!(influence_function(&j, &q, opts), Err(Error::NonConvergence { .. })));
    }

    #[test]
    fn pfd_examples() {
        let q = rand_dist(2, 10, 3.0);
        let flat = InfluenceFn { psi: vec![0.3; 10], iterations: 0, stationarity: 0.0 };
        assert!(pfd_step(&q, &flat, 0.7).unwrap().tv(&q) < 1e-15);

        let pd = rand_dist(3, 10, 3.0);
        let j = Functional { kind: DivergenceFn::Kl, p_d: pd.clone() };
        let opts = InfluenceOptions { tol: 1e-12, ..Default::default() };
        let mut cur = q.clone();
        let mut steps = 0;
        while cur.tv(&pd) > 1e-6 && steps < 500 {
            let psi = influence_function(&j, &cur, opts).unwrap();
            cur = pfd_step(&cur, &psi, 0.5).unwrap();
            steps += 1;
        }
        assert!(cur.tv(&pd) <= 1e-6, "tv {} after {steps}", cur.tv(&pd));

        for seed in 0..10 {
            let q = rand_dist(seed, 6, 3.0);
            let pd = rand_dist(seed + 50, 6, 3.0);
            for kind in [DivergenceFn::Kl, DivergenceFn::Js] {
                let j = Functional { kind: kind.clone(), p_d: pd.clone() };
                let psi = influence_function(&j, &q, InfluenceOptions::default()).unwrap();
                let next = pfd_step(&q, &psi, 1e-2).unwrap();
                assert!(next.expect(&psi.psi) <= q.expect(&psi.psi));
                assert!(divergence(&kind, &next, &pd).unwrap() < divergence(&kind, &q, &pd).unwrap());
            }
        }
    }

    fn arb_dist(n: usize) -> impl Strategy<Value = Dist> {
        prop::collection::vec(-4.0..4.0f64, n).prop_map(|s| normalize_log(&s).unwrap())
    }

    fn interior(n: usize) -> impl Strategy<Value = Dist> {
        prop::collection::vec(-2.0..2.0f64, n).prop_map(|s| normalize_log(&s).unwrap())
    }

    proptest! {
        #[test]
        fn nonnegativity_and_identity(q in arb_dist(6), p in arb_dist(6)) {
            for k in [DivergenceFn::Kl, DivergenceFn::Js, DivergenceFn::w1()] {
                let d = divergence(&k, &q, &p).unwrap();
                prop_assert!(d >= -1e-9);
                prop_assert!(divergence(&k, &q, &q).unwrap().abs() <= 1e-9);
            }
            let ce = divergence(&DivergenceFn::CrossEntropy, &q, &p).unwrap();
            prop_assert!(ce >= entropy(&q, UncertaintyFn::Shannon) - 1e-12);
        }

        #[test]
        fn js_symmetric(q in arb_dist(5), p in arb_dist(5)) {
            prop_assert_eq!(
                divergence(&DivergenceFn::Js, &q, &p).unwrap(),
                divergence(&DivergenceFn::Js, &p, &q).unwrap()
            );
        }

        #[test]
        fn w1_metric(a in arb_dist(16), b in arb_dist(16), c in arb_dist(16)) {
            let w = DivergenceFn::w1();
            let d = |x: &Dist, y: &Dist| divergence(&w, x, y).unwrap();
            prop_assert!((d(&a, &b) - d(&b, &a)).abs() <= 1e-9);
            prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-9);
        }

        #[test]
        fn kl_js_gradients_match_fd(q in interior(5), p in interior(5)) {
            for k in [DivergenceFn::Kl, DivergenceFn::Js, DivergenceFn::CrossEntropy] {
                let g = divergence_grad_q(&k, &q, &p).unwrap();
                let f = fd(&k, q.probs(), p.probs());
                for (a, b) in g.iter().zip(&f) {
                    prop_assert!((a - b).abs() <= 1e-5 * a.abs().max(1e-2));
                }
            }
        }
    }
}
