//! Experience functions: scoring rules `f(t)` over a finite domain.
//!
//! Scores live in the extended reals. `-inf` vetoes a configuration, `+inf`
//! and NaN are rejected at evaluation time.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dist::{normalize_log, Dist};
use crate::error::{Error, Result};
use crate::models::{ConditionalSoftmaxModel, TargetModel};
use crate::rng::{self, Rng};

pub type Evaluator = Arc<dyn Fn(Option<&TargetModel>) -> Result<Vec<f64>> + Send + Sync>;

/// Gradient, in model parameters, of `E_q[f_theta]` with `q` held fixed.
pub type GradExpectation = Arc<dyn Fn(&TargetModel, &Dist) -> Result<Vec<f64>> + Send + Sync>;

/// A scoring rule over a finite domain, optionally depending on the model.
#[derive(Clone)]
pub struct ExperienceFn {
    size: usize,
    label: String,
    theta_dependent: bool,
    eval: Evaluator,
    grad: Option<GradExpectation>,
}

impl fmt::Debug for ExperienceFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExperienceFn")
            .field("label", &self.label)
            .field("size", &self.size)
            .field("theta_dependent", &self.theta_dependent)
            .finish()
    }
}

fn check_values(v: &[f64]) -> Result<()> {
    if let Some((i, x)) = v.iter().enumerate().find(|(_, x)| x.is_nan() || **x == f64::INFINITY) {
        return Err(Error::InvalidConfig(format!("experience value f[{i}] = {x}")));
    }
    Ok(())
}

impl ExperienceFn {
    /// A θ-independent experience given by its table of values.
    pub fn fixed(label: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        check_values(&values)?;
        if values.is_empty() {
            return Err(Error::InvalidDomain("experience over an empty domain".into()));
        }
        let size = values.len();
        let v = Arc::new(values);
        Ok(Self {
            size,
            label: label.into(),
            theta_dependent: false,
            eval: Arc::new(move |_| Ok(v.as_ref().clone())),
            grad: None,
        })
    }

    pub fn constant(size: usize, c: f64) -> Result<Self> {
        Self::fixed(format!("const({c})"), vec![c; size])
    }

    /// An experience recomputed from the current model on every evaluation.
    pub fn dynamic(
        label: impl Into<String>,
        size: usize,
        eval: impl Fn(Option<&TargetModel>) -> Result<Vec<f64>> + Send + Sync + 'static,
    ) -> Self {
        Self { size, label: label.into(), theta_dependent: true, eval: Arc::new(eval), grad: None }
    }

    /// Attaches the gradient of `E_q[f_theta]`, letting the student
    /// differentiate through the experience.
    pub fn with_grad(mut self, grad: impl Fn(&TargetModel, &Dist) -> Result<Vec<f64>> + Send + Sync + 'static) -> Self {
        self.grad = Some(Arc::new(grad));
        self
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn theta_dependent(&self) -> bool {
        self.theta_dependent
    }

    pub fn has_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn eval(&self, model: Option<&TargetModel>) -> Result<Vec<f64>> {
        if self.theta_dependent && model.is_none() {
            return Err(Error::ThetaRequired);
        }
        let v = (self.eval)(model)?;
        if v.len() != self.size {
            return Err(Error::ShapeMismatch { expected: self.size, got: v.len() });
        }
        check_values(&v)?;
        Ok(v)
    }

    pub fn eval_at(&self, t: usize, model: Option<&TargetModel>) -> Result<f64> {
        if t >= self.size {
            return Err(Error::IndexOutOfRange { index: t, size: self.size });
        }
        Ok(self.eval(model)?[t])
    }

    /// `d/dtheta E_q[f_theta]`, when the experience supplies it.
    pub fn grad_expectation(&self, model: &TargetModel, q: &Dist) -> Option<Result<Vec<f64>>> {
        if !self.theta_dependent {
            return Some(Ok(vec![0.0; model.n_params()]));
        }
        self.grad.as_ref().map(|g| g(model, q))
    }
}

/// Observation counts over a finite domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    counts: Vec<u64>,
}

impl Dataset {
    pub fn from_counts(counts: Vec<u64>) -> Result<Self> {
        if counts.iter().sum::<u64>() == 0 {
            return Err(Error::EmptyDataset);
        }
        Ok(Self { counts })
    }

    pub fn from_observations(size: usize, obs: &[usize]) -> Result<Self> {
        let mut counts = vec![0u64; size];
        for &t in obs {
            if t >= size {
                return Err(Error::IndexOutOfRange { index: t, size });
            }
            counts[t] += 1;
        }
        Self::from_counts(counts)
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn empirical(&self) -> Dist {
        let n = self.total() as f64;
        Dist::from_weights(&self.counts.iter().map(|&c| c as f64 / n).collect::<Vec<_>>()).expect("non-empty dataset")
    }

    /// Observations expanded in index order.
    pub fn observations(&self) -> Vec<usize> {
        self.counts.iter().enumerate().flat_map(|(t, &c)| std::iter::repeat_n(t, c as usize)).collect()
    }

    fn log_freq(&self) -> Vec<f64> {
        let n = self.total() as f64;
        self.counts.iter().map(|&c| (c as f64 / n).ln()).collect()
    }
}

/// `f(t) = log(m(t) / N)`.
pub fn f_data(dataset: &Dataset) -> Result<ExperienceFn> {
    if dataset.total() == 0 {
        return Err(Error::EmptyDataset);
    }
    ExperienceFn::fixed("data", dataset.log_freq())
}

/// Data experience on a product domain built by splitting every observation
/// into `(x, y)`. The split receives a generator seeded by `seed`, so
/// stochastic splits are reproducible.
pub fn f_data_self(
    dataset: &Dataset,
    nx: usize,
    ny: usize,
    seed: u64,
    split: impl Fn(usize, &mut Rng) -> (usize, usize),
) -> Result<ExperienceFn> {
    let mut r = rng::seeded(seed);
    let mut counts = vec![0u64; nx * ny];
    for t in dataset.observations() {
        let (x, y) = split(t, &mut r);
        if x >= nx || y >= ny {
            return Err(Error::SplitOutOfRange { x, y, nx, ny });
        }
        counts[x * ny + y] += 1;
    }
    let d = Dataset::from_counts(counts)?;
    ExperienceFn::fixed("data-self", d.log_freq())
}

/// `f(t) = log(m(t) * w(t) / N)`.
pub fn f_data_weighted(dataset: &Dataset, w: &[f64]) -> Result<ExperienceFn> {
    if w.len() != dataset.len() {
        return Err(Error::ShapeMismatch { expected: dataset.len(), got: w.len() });
    }
    if let Some((i, v)) = w.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::InvalidConfig(format!("weight w[{i}] = {v} must be finite and >= 0")));
    }
    let n = dataset.total() as f64;
    if n == 0.0 {
        return Err(Error::EmptyDataset);
    }
    let vals: Vec<f64> = dataset.counts().iter().zip(w).map(|(&m, &wi)| (m as f64 * wi / n).ln()).collect();
    if vals.iter().all(|v| *v == f64::NEG_INFINITY) {
        return Err(Error::AllZeroWeights);
    }
    ExperienceFn::fixed("data-weighted", vals)
}

/// `f(t) = log E_{t* ~ data}[a_{t*}(t)]`.
///
/// Each kernel row used by the data is normalized to a distribution first,
/// so every observation contributes equal mass.
pub fn f_data_augmented(dataset: &Dataset, kernel: &[Vec<f64>]) -> Result<ExperienceFn> {
    let n = dataset.len();
    if kernel.len() != n {
        return Err(Error::ShapeMismatch { expected: n, got: kernel.len() });
    }
    let total = dataset.total() as f64;
    if total == 0.0 {
        return Err(Error::EmptyDataset);
    }
    let mut acc = vec![0.0; n];
    for (row, (&m, a)) in dataset.counts().iter().zip(kernel).enumerate() {
        if m == 0 {
            continue;
        }
        if a.len() != n {
            return Err(Error::ShapeMismatch { expected: n, got: a.len() });
        }
        if a.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::DegenerateKernel { row });
        }
        let s: f64 = a.iter().sum();
        if s <= 0.0 {
            return Err(Error::DegenerateKernel { row });
        }
        for (o, v) in acc.iter_mut().zip(a) {
            *o += (m as f64 / total) * v / s;
        }
    }
    ExperienceFn::fixed("data-augmented", acc.into_iter().map(f64::ln).collect())
}

/// Exponentiated-payoff kernel `a_{t*}(t) = exp(R(t, t*) / temperature)`.
pub fn payoff_kernel(n: usize, temperature: f64, reward: impl Fn(usize, usize) -> f64) -> Vec<Vec<f64>> {
    (0..n).map(|ts| (0..n).map(|t| (reward(t, ts) / temperature).exp()).collect()).collect()
}

fn active_checks(pool: &[usize], u: &[f64], lambda: f64, nx: usize) -> Result<()> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    if !(lambda > 0.0) {
        return Err(Error::InvalidConfig(format!("lambda must be > 0, got {lambda}")));
    }
    if u.len() != nx {
        return Err(Error::ShapeMismatch { expected: nx, got: u.len() });
    }
    if let Some(&x) = pool.iter().find(|&&x| x >= nx) {
        return Err(Error::IndexOutOfRange { index: x, size: nx });
    }
    Ok(())
}

/// Active-learning experience on `X x Y`:
/// `f(x, y) = log p_pool(x, y) + lambda * u(x)` with labels from `oracle`.
pub fn f_active(
    pool: &[usize],
    oracle: impl Fn(usize) -> usize,
    u: &[f64],
    lambda: f64,
    nx: usize,
    ny: usize,
) -> Result<ExperienceFn> {
    active_checks(pool, u, lambda, nx)?;
    let mut counts = vec![0u64; nx * ny];
    for &x in pool {
        let y = oracle(x);
        if y >= ny {
            return Err(Error::IndexOutOfRange { index: y, size: ny });
        }
        counts[x * ny + y] += 1;
    }
    let d = Dataset::from_counts(counts)?;
    let vals: Vec<f64> = d.log_freq().iter().enumerate().map(|(t, l)| l + lambda * u[t / ny]).collect();
    ExperienceFn::fixed("active", vals)
}

/// Selection distribution over inputs, proportional to `p_pool(x) exp(lambda u(x))`.
pub fn selection_distribution(pool: &[usize], u: &[f64], lambda: f64, nx: usize) -> Result<Dist> {
    normalize_log(&selection_scores(pool, u, lambda, nx)?)
}

fn selection_scores(pool: &[usize], u: &[f64], lambda: f64, nx: usize) -> Result<Vec<f64>> {
    active_checks(pool, u, lambda, nx)?;
    let mut c = vec![0.0; nx];
    for &x in pool {
        c[x] += 1.0;
    }
    let n = pool.len() as f64;
    Ok(c.iter().zip(u).map(|(ci, ui)| (ci / n).ln() + lambda * ui).collect())
}

/// Most probable query under [`selection_distribution`]; ties go to the
/// lowest input index.
pub fn select_query(pool: &[usize], u: &[f64], lambda: f64, nx: usize) -> Result<usize> {
    let s = selection_scores(pool, u, lambda, nx)?;
    let mut best = 0;
    for (i, v) in s.iter().enumerate() {
        if *v > s[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Soft first-order logic over `[0, 1]`-valued atoms.
#[derive(Debug, Clone, PartialEq)]
pub enum SoftLogicExpr {
    Atom(String),
    /// `A & B = max(A + B - 1, 0)`
    StrongAnd(Box<SoftLogicExpr>, Box<SoftLogicExpr>),
    /// `A | B = min(A + B, 1)`
    Or(Box<SoftLogicExpr>, Box<SoftLogicExpr>),
    /// Mean of the children.
    Avg(Vec<SoftLogicExpr>),
    Not(Box<SoftLogicExpr>),
    /// Sugar for `!A | B`.
    Implies(Box<SoftLogicExpr>, Box<SoftLogicExpr>),
}

impl SoftLogicExpr {
    pub fn atom(name: &str) -> Self {
        Self::Atom(name.to_string())
    }

    pub fn and(a: Self, b: Self) -> Self {
        Self::StrongAnd(Box::new(a), Box::new(b))
    }

    pub fn or(a: Self, b: Self) -> Self {
        Self::Or(Box::new(a), Box::new(b))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn not(a: Self) -> Self {
        Self::Not(Box::new(a))
    }

    pub fn implies(a: Self, b: Self) -> Self {
        Self::Implies(Box::new(a), Box::new(b))
    }

    pub fn eval(&self, lookup: &dyn Fn(&str) -> Option<f64>) -> Result<f64> {
        Ok(match self {
            Self::Atom(name) => {
                let v = lookup(name).ok_or_else(|| Error::UnknownAtom(name.clone()))?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::AtomOutOfRange { atom: name.clone(), value: v });
                }
                v
            }
            Self::StrongAnd(a, b) => (a.eval(lookup)? + b.eval(lookup)? - 1.0).max(0.0),
            Self::Or(a, b) => (a.eval(lookup)? + b.eval(lookup)?).min(1.0),
            Self::Avg(xs) => {
                let mut s = 0.0;
                for x in xs {
                    s += x.eval(lookup)?;
                }
                s / xs.len() as f64
            }
            Self::Not(a) => 1.0 - a.eval(lookup)?,
            Self::Implies(a, b) => (1.0 - a.eval(lookup)? + b.eval(lookup)?).min(1.0),
        })
    }

    pub fn atoms(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_atoms(&mut out);
        out
    }

    fn collect_atoms(&self, out: &mut BTreeSet<String>) {
        match self {
            Self::Atom(n) => {
                out.insert(n.clone());
            }
            Self::StrongAnd(a, b) | Self::Or(a, b) | Self::Implies(a, b) => {
                a.collect_atoms(out);
                b.collect_atoms(out);
            }
            Self::Avg(xs) => xs.iter().for_each(|x| x.collect_atoms(out)),
            Self::Not(a) => a.collect_atoms(out),
        }
    }

    /// Parses the nested-array form, e.g. `["implies", ["atom", "A"], ["not", ["atom", "B"]]]`.
    pub fn from_json(v: &Value) -> Result<Self> {
        let bad = |m: &str| Error::InvalidConfig(format!("soft-logic expression: {m}: {v}"));
        let arr = v.as_array().ok_or_else(|| bad("expected an array"))?;
        let op = arr.first().and_then(Value::as_str).ok_or_else(|| bad("missing operator"))?;
        let args = &arr[1..];
        let sub = |i: usize| -> Result<Box<Self>> { Ok(Box::new(Self::from_json(&args[i])?)) };
        let arity = |n: usize| -> Result<()> {
            if args.len() == n {
                Ok(())
            } else {
                Err(bad(&format!("`{op}` takes {n} argument(s)")))
            }
        };
        match op {
            "atom" => {
                arity(1)?;
                let name = args[0].as_str().ok_or_else(|| bad("atom name must be a string"))?;
                Ok(Self::Atom(name.to_string()))
            }
            "and" | "&" => {
                arity(2)?;
                Ok(Self::StrongAnd(sub(0)?, sub(1)?))
            }
            "or" | "|" => {
                arity(2)?;
                Ok(Self::Or(sub(0)?, sub(1)?))
            }
            "implies" | "=>" => {
                arity(2)?;
                Ok(Self::Implies(sub(0)?, sub(1)?))
            }
            "not" | "!" => {
                arity(1)?;
                Ok(Self::Not(sub(0)?))
            }
            "avg" => {
                if args.is_empty() {
                    return Err(bad("`avg` needs at least one argument"));
                }
                Ok(Self::Avg(args.iter().map(Self::from_json).collect::<Result<_>>()?))
            }
            other => Err(bad(&format!("unknown operator `{other}`"))),
        }
    }

    pub fn to_json(&self) -> Value {
        use serde_json::json;
        match self {
            Self::Atom(n) => json!(["atom", n]),
            Self::StrongAnd(a, b) => json!(["and", a.to_json(), b.to_json()]),
            Self::Or(a, b) => json!(["or", a.to_json(), b.to_json()]),
            Self::Implies(a, b) => json!(["implies", a.to_json(), b.to_json()]),
            Self::Not(a) => json!(["not", a.to_json()]),
            Self::Avg(xs) => {
                let mut v = vec![json!("avg")];
                v.extend(xs.iter().map(Self::to_json));
                Value::Array(v)
            }
        }
    }
}

impl Serialize for SoftLogicExpr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_json().serialize(s)
    }
}

impl<'de> Deserialize<'de> for SoftLogicExpr {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Value::deserialize(d)?;
        Self::from_json(&v).map_err(serde::de::Error::custom)
    }
}

/// Per-configuration values of named atoms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomTable {
    pub size: usize,
    pub atoms: BTreeMap<String, Vec<f64>>,
}

impl AtomTable {
    pub fn new(size: usize) -> Self {
        Self { size, atoms: BTreeMap::new() }
    }

    pub fn with(mut self, name: &str, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.size {
            return Err(Error::ShapeMismatch { expected: self.size, got: values.len() });
        }
        self.atoms.insert(name.to_string(), values);
        Ok(self)
    }
}

pub fn eval_soft_logic(expr: &SoftLogicExpr, t: usize, table: &AtomTable) -> Result<f64> {
    if t >= table.size {
        return Err(Error::IndexOutOfRange { index: t, size: table.size });
    }
    expr.eval(&|name| table.atoms.get(name).map(|v| v[t]))
}

fn rule_values(expr: &SoftLogicExpr, table: &AtomTable) -> Result<Vec<f64>> {
    (0..table.size).map(|t| eval_soft_logic(expr, t, table)).collect()
}

/// `f(t) = expr(t)` for atoms given by a fixed table.
pub fn f_rule(expr: &SoftLogicExpr, table: &AtomTable) -> Result<ExperienceFn> {
    ExperienceFn::fixed("rule", rule_values(expr, table)?)
}

/// Rule experience whose atom table is rebuilt from the current model,
/// e.g. when a predicate is the model's own soft prediction.
pub fn f_rule_dynamic(
    expr: SoftLogicExpr,
    size: usize,
    atoms: impl Fn(Option<&TargetModel>) -> Result<AtomTable> + Send + Sync + 'static,
) -> ExperienceFn {
    ExperienceFn::dynamic("rule", size, move |m| rule_values(&expr, &atoms(m)?))
}

/// Pseudo-label experience `f(x, y) = log(p_data(x) * p_source(y|x))`.
pub fn f_model_mimic(inputs: &Dataset, source: &ConditionalSoftmaxModel) -> Result<ExperienceFn> {
    if inputs.len() != source.nx {
        return Err(Error::DomainMismatch(format!(
            "input dataset has {} configurations, source model has {} inputs",
            inputs.len(),
            source.nx
        )));
    }
    let lx = inputs.log_freq();
    let lp = source.log_probs();
    let ny = source.ny;
    let vals = lp.iter().enumerate().map(|(t, l)| lx[t / ny] + l).collect();
    ExperienceFn::fixed("model-mimic", vals)
}

/// Scoring experience `f(x, y) = log p_source(y|x)`.
pub fn f_model_score(source: &ConditionalSoftmaxModel, nx: usize, ny: usize) -> Result<ExperienceFn> {
    if source.nx != nx || source.ny != ny {
        return Err(Error::DomainMismatch(format!("source is {}x{}, domain is {nx}x{ny}", source.nx, source.ny)));
    }
    ExperienceFn::fixed("model-score", source.log_probs())
}

/// `f = sum_i lambda_i f_i`. A `-inf` in any term vetoes the configuration.
pub fn combine(terms: Vec<(f64, ExperienceFn)>) -> Result<ExperienceFn> {
    let first = terms.first().ok_or(Error::EmptyCombination)?;
    let size = first.1.size();
    for (l, f) in &terms {
        if !(*l > 0.0 && l.is_finite()) {
            return Err(Error::InvalidConfig(format!("combination weight must be > 0, got {l}")));
        }
        if f.size() != size {
            return Err(Error::DomainMismatch(format!(
                "experience `{}` has size {}, expected {size}",
                f.label(),
                f.size()
            )));
        }
    }
    let label = terms.iter().map(|(l, f)| format!("{l}*{}", f.label())).collect::<Vec<_>>().join("+");
    let theta_dependent = terms.iter().any(|(_, f)| f.theta_dependent());
    let gradable = terms.iter().all(|(_, f)| !f.theta_dependent() || f.has_grad());
    let terms = Arc::new(terms);
    let t2 = terms.clone();
    let eval: Evaluator = Arc::new(move |m| {
        let mut out = vec![0.0; size];
        for (l, f) in terms.iter() {
            for (o, v) in out.iter_mut().zip(f.eval(m)?) {
                *o += l * v;
            }
        }
        Ok(out)
    });
    let grad: Option<GradExpectation> = (theta_dependent && gradable).then(|| {
        Arc::new(move |m: &TargetModel, q: &Dist| {
            let mut out = vec![0.0; m.n_params()];
            for (l, f) in t2.iter() {
                let g = f.grad_expectation(m, q).expect("gradable terms")?;
                for (o, v) in out.iter_mut().zip(g) {
                    *o += l * v;
                }
            }
            Ok(out)
        }) as GradExpectation
    });
    Ok(ExperienceFn { size, label, theta_dependent, eval, grad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::SoftmaxModel;
    use proptest::prelude::*;

    fn abc() -> Dataset {
        Dataset::from_observations(3, &[0, 0, 1]).unwrap()
    }

    fn teacher(f: &[f64]) -> Dist {
        normalize_log(f).unwrap()
    }

    #[test]
    fn f_data_examples() {
        let f = f_data(&abc()).unwrap().eval(None).unwrap();
        assert_eq!(f[0], (2.0f64 / 3.0).ln());
        assert_eq!(f[2], f64::NEG_INFINITY);
        assert!(teacher(&f).tv(&abc().empirical()) < 1e-15);

        let one = Dataset::from_observations(4, &[2]).unwrap();
        assert_eq!(teacher(&f_data(&one).unwrap().eval(None).unwrap()).probs(), &[0.0, 0.0, 1.0, 0.0]);

        let flat = Dataset::from_counts(vec![5; 4]).unwrap();
        assert!(f_data(&flat).unwrap().eval(None).unwrap().iter().all(|v| (v + 4f64.ln()).abs() < 1e-15));

        assert_eq!(Dataset::from_counts(vec![0, 0]).unwrap_err(), Error::EmptyDataset);
    }

    #[test]
    fn f_data_self_examples() {
        // x = t, y fixed: same table as plain data experience on X.
        let d = abc();
        let f = f_data_self(&d, 3, 1, 0, |t, _| (t, 0)).unwrap().eval(None).unwrap();
        assert_eq!(f, f_data(&d).unwrap().eval(None).unwrap());

        // Corpus of 2-token sequences over {0,1,2}; t = 3 * first + second.
        let corpus = Dataset::from_observations(9, &[1, 1, 5]).unwrap();
        let f = f_data_self(&corpus, 3, 3, 0, |t, _| (t / 3, t % 3)).unwrap().eval(None).unwrap();
        assert!((f[1] - (2.0f64 / 3.0).ln()).abs() < 1e-15);
        assert!((f[5] - (1.0f64 / 3.0).ln()).abs() < 1e-15);
        assert_eq!(f.iter().filter(|v| v.is_finite()).count(), 2);

        let noisy = |t: usize, r: &mut crate::rng::Rng| (t, (rng::uniform(r) < 0.5) as usize);
        let a = f_data_self(&corpus, 9, 2, 42, noisy).unwrap().eval(None).unwrap();
        let b = f_data_self(&corpus, 9, 2, 42, noisy).unwrap().eval(None).unwrap();
        assert_eq!(a, b);

        assert!(matches!(f_data_self(&corpus, 2, 2, 0, |t, _| (t, 0)), Err(Error::SplitOutOfRange { .. })));
    }

    #[test]
    fn f_data_weighted_examples() {
        let d = abc();
        assert_eq!(
            f_data_weighted(&d, &[1.0; 3]).unwrap().eval(None).unwrap(),
            f_data(&d).unwrap().eval(None).unwrap()
        );
        let ab = Dataset::from_observations(2, &[0, 1]).unwrap();
        let f = f_data_weighted(&ab, &[2.0, 0.0]).unwrap().eval(None).unwrap();
        assert_eq!(teacher(&f).probs(), &[1.0, 0.0]);

        let w = [0.3, 1.7, 4.0];
        let w2: Vec<f64> = w.iter().map(|v| 2.0 * v).collect();
        let a = f_data_weighted(&d, &w).unwrap().eval(None).unwrap();
        let b = f_data_weighted(&d, &w2).unwrap().eval(None).unwrap();
        for (x, y) in a.iter().zip(&b) {
            if x.is_finite() {
                assert!((y - x - 2f64.ln()).abs() < 1e-14);
            }
        }
        assert!(teacher(&a).tv(&teacher(&b)) < 1e-15);

        assert_eq!(f_data_weighted(&d, &[0.0, 0.0, 3.0]).unwrap_err(), Error::AllZeroWeights);
        assert!(f_data_weighted(&d, &[-1.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn f_data_augmented_examples() {
        let d = abc();
        let ident: Vec<Vec<f64>> = (0..3).map(|i| (0..3).map(|j| (i == j) as u8 as f64).collect()).collect();
        let f = f_data_augmented(&d, &ident).unwrap().eval(None).unwrap();
        let g = f_data(&d).unwrap().eval(None).unwrap();
        for (a, b) in f.iter().zip(&g) {
            assert!(a == b || (a - b).abs() < 1e-15);
        }

        // 2-bit strings 00, 01, 10, 11; datum 00; R = -Hamming.
        let single = Dataset::from_observations(4, &[0]).unwrap();
        let k = payoff_kernel(4, 1.0, |t, ts| -((t ^ ts).count_ones() as f64));
        let q = teacher(&f_data_augmented(&single, &k).unwrap().eval(None).unwrap());
        let e = (-1f64).exp();
        let z = 1.0 + 2.0 * e + e * e;
        let want = [1.0 / z, e / z, e / z, e * e / z];
        for (a, b) in q.probs().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }

        let flat = vec![vec![1.0; 3]; 3];
        let f = f_data_augmented(&d, &flat).unwrap().eval(None).unwrap();
        assert!(f.iter().all(|v| (v - f[0]).abs() < 1e-15));

        let mut bad = flat.clone();
        bad[1] = vec![0.0; 3];
        assert_eq!(f_data_augmented(&d, &bad).unwrap_err(), Error::DegenerateKernel { row: 1 });
    }

    #[test]
    fn f_active_examples() {
        let pool = [0, 1];
        let oracle = |x: usize| x % 2;
        let sel = selection_distribution(&pool, &[0.0, 1.0], 1.0, 2).unwrap();
        assert!((sel.prob(1) / sel.prob(0) - 1f64.exp()).abs() < 1e-12);

        let tiny = f_active(&pool, oracle, &[0.0, 1.0], 1e-12, 2, 2).unwrap().eval(None).unwrap();
        let sup = f_data(&Dataset::from_observations(4, &[0, 3]).unwrap()).unwrap().eval(None).unwrap();
        assert!(teacher(&tiny).tv(&teacher(&sup)) < 1e-11);

        let u = [0.5, 2.0, 2.0, 1.0];
        let pool4 = [0, 1, 2, 3];
        assert_eq!(select_query(&pool4, &u, 1e6, 4).unwrap(), 1);
        let sel = selection_distribution(&[0, 1, 3], &u, 1e6, 4).unwrap();
        assert_eq!(sel.prob(1), 1.0);

        assert_eq!(f_active(&[], oracle, &[0.0; 2], 1.0, 2, 2).unwrap_err(), Error::EmptyPool);
    }

    fn ab(a: f64, b: f64) -> impl Fn(&str) -> Option<f64> {
        move |n| match n {
            "A" => Some(a),
            "B" => Some(b),
            _ => None,
        }
    }

    #[test]
    fn soft_logic_worked_values() {
        let (a, b) = (SoftLogicExpr::atom("A"), SoftLogicExpr::atom("B"));
        let and = SoftLogicExpr::and(a.clone(), b.clone());
        let or = SoftLogicExpr::or(a.clone(), b.clone());
        assert_eq!(and.eval(&ab(0.7, 0.6)).unwrap(), 0.7 + 0.6 - 1.0);
        assert_eq!(or.eval(&ab(0.7, 0.6)).unwrap(), 1.0);
        assert_eq!(SoftLogicExpr::not(a.clone()).eval(&ab(0.3, 0.0)).unwrap(), 0.7);
        assert_eq!(
            SoftLogicExpr::atom("A").eval(&ab(1.5, 0.0)).unwrap_err(),
            Error::AtomOutOfRange { atom: "A".into(), value: 1.5 }
        );
        assert_eq!(SoftLogicExpr::atom("C").eval(&ab(0.0, 0.0)).unwrap_err(), Error::UnknownAtom("C".into()));
    }

    #[test]
    fn soft_logic_boolean_truth_tables() {
        let (a, b) = (SoftLogicExpr::atom("A"), SoftLogicExpr::atom("B"));
        for ai in [false, true] {
            for bi in [false, true] {
                let look = ab(ai as u8 as f64, bi as u8 as f64);
                let v = |e: SoftLogicExpr| e.eval(&look).unwrap();
                assert_eq!(v(SoftLogicExpr::and(a.clone(), b.clone())), (ai && bi) as u8 as f64);
                assert_eq!(v(SoftLogicExpr::or(a.clone(), b.clone())), (ai || bi) as u8 as f64);
                assert_eq!(v(SoftLogicExpr::implies(a.clone(), b.clone())), (!ai || bi) as u8 as f64);
                assert_eq!(v(SoftLogicExpr::not(a.clone())), (!ai) as u8 as f64);
                assert_eq!(v(SoftLogicExpr::Avg(vec![a.clone()])), ai as u8 as f64);
            }
        }
    }

    #[test]
    fn soft_logic_json_roundtrip() {
        let v: Value = serde_json::from_str(r#"["implies", ["atom", "S"], ["and", ["or", ["not", ["atom","A"]], ["atom","B"]], ["avg", ["atom","A"], ["atom","B"]]]]"#).unwrap();
        let e = SoftLogicExpr::from_json(&v).unwrap();
        assert_eq!(e.to_json(), v);
        assert_eq!(e.atoms().into_iter().collect::<Vec<_>>(), vec!["A", "B", "S"]);
        assert!(SoftLogicExpr::from_json(&serde_json::json!(["xor", ["atom", "A"]])).is_err());
        assert!(SoftLogicExpr::from_json(&serde_json::json!(["not"])).is_err());
    }

    #[test]
    fn f_rule_examples() {
        let a = SoftLogicExpr::atom("A");
        let table = AtomTable::new(3).with("A", vec![0.1, 0.5, 0.9]).unwrap();
        let taut = f_rule(&SoftLogicExpr::or(a.clone(), SoftLogicExpr::not(a.clone())), &table).unwrap();
        assert_eq!(taut.eval(None).unwrap(), vec![1.0; 3]);
        let contra = f_rule(&SoftLogicExpr::and(a.clone(), SoftLogicExpr::not(a.clone())), &table).unwrap();
        assert_eq!(contra.eval(None).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn sentiment_but_rule() {
        // Domain X = {plain, a-but-b} x Y = {neg, pos}; y_b is the model's soft
        // sentiment on the clause after "but".
        let yb = 0.8;
        let s = SoftLogicExpr::atom("S");
        let pos = SoftLogicExpr::atom("Y");
        let ybe = SoftLogicExpr::atom("YB");
        let rule = SoftLogicExpr::implies(
            s,
            SoftLogicExpr::and(SoftLogicExpr::implies(pos.clone(), ybe.clone()), SoftLogicExpr::implies(ybe, pos)),
        );
        let table = AtomTable::new(4)
            .with("S", vec![0.0, 0.0, 1.0, 1.0])
            .unwrap()
            .with("Y", vec![0.0, 1.0, 0.0, 1.0])
            .unwrap()
            .with("YB", vec![yb; 4])
            .unwrap();
        let f = f_rule(&rule, &table).unwrap().eval(None).unwrap();
        assert!((f[3] - yb).abs() < 1e-15);
        assert!((f[2] - (1.0 - yb)).abs() < 1e-15);
        assert_eq!(&f[..2], &[1.0, 1.0]);
    }

    #[test]
    fn model_experiences() {
        let det = ConditionalSoftmaxModel::from_rows(&[Dist::point_mass(2, 1), Dist::point_mass(2, 0)]).unwrap();
        let inputs = Dataset::from_observations(2, &[0, 0, 1]).unwrap();
        let f = f_model_mimic(&inputs, &det).unwrap().eval(None).unwrap();
        let pseudo = f_data(&Dataset::from_observations(4, &[1, 1, 2]).unwrap()).unwrap().eval(None).unwrap();
        assert!(teacher(&f).tv(&teacher(&pseudo)) < 1e-15);

        let uni = ConditionalSoftmaxModel::zeros(2, 3);
        let f = f_model_mimic(&inputs, &uni).unwrap().eval(None).unwrap();
        let emp = inputs.empirical();
        for t in 0..6 {
            assert!((f[t] - (emp.log_probs()[t / 3] - 3f64.ln())).abs() < 1e-15);
        }
        assert!(f_model_score(&uni, 2, 3).unwrap().eval(None).unwrap().iter().all(|v| (v + 3f64.ln()).abs() < 1e-15));

        let mut r = rng::seeded(5);
        let theta: Vec<f64> = (0..6).map(|_| 2.0 * rng::uniform(&mut r)).collect();
        let src = ConditionalSoftmaxModel::from_logits(2, 3, theta).unwrap();
        let q = teacher(&f_model_mimic(&inputs, &src).unwrap().eval(None).unwrap());
        let p = src.probs();
        for t in 0..6 {
            assert!((q.prob(t) - emp.prob(t / 3) * p[t]).abs() < 1e-14);
        }

        let zero = ConditionalSoftmaxModel::from_logits(1, 2, vec![0.0, f64::NEG_INFINITY]).unwrap();
        assert_eq!(f_model_score(&zero, 1, 2).unwrap().eval(None).unwrap()[1], f64::NEG_INFINITY);
        assert!(matches!(f_model_mimic(&abc(), &uni), Err(Error::DomainMismatch(_))));
    }

    #[test]
    fn combine_examples() {
        let d = Dataset::from_observations(4, &[0, 1, 1, 3]).unwrap();
        let fd = f_data(&d).unwrap();
        let one = combine(vec![(1.0, fd.clone())]).unwrap();
        assert_eq!(one.eval(None).unwrap(), fd.eval(None).unwrap());

        let table = AtomTable::new(4).with("A", vec![0.2, 0.9, 0.4, 1.0]).unwrap();
        let rule = f_rule(&SoftLogicExpr::atom("A"), &table).unwrap();
        let both = combine(vec![(1.0, fd.clone()), (1.0, rule)]).unwrap().eval(None).unwrap();
        let emp = d.empirical();
        let w: Vec<f64> = (0..4).map(|t| emp.prob(t) * table.atoms["A"][t].exp()).collect();
        let want = Dist::from_weights(&w).unwrap();
        assert!(teacher(&both).tv(&want) < 1e-15);

        let shifted = combine(vec![(1.0, fd.clone()), (1.0, ExperienceFn::constant(4, 3.0).unwrap())]).unwrap();
        assert!(teacher(&shifted.eval(None).unwrap()).tv(&teacher(&fd.eval(None).unwrap())) < 1e-15);

        assert_eq!(combine(vec![]).unwrap_err(), Error::EmptyCombination);
    }

    #[test]
    fn theta_dependent_requires_model() {
        let f = ExperienceFn::dynamic("model-prob", 2, |m| Ok(m.unwrap().log_joint()));
        assert_eq!(f.eval(None).unwrap_err(), Error::ThetaRequired);
        let m = TargetModel::Softmax(SoftmaxModel::zeros(2));
        assert_eq!(f.eval(Some(&m)).unwrap(), vec![0.5f64.ln(); 2]);
        let c = combine(vec![(1.0, f), (2.0, ExperienceFn::constant(2, 0.0).unwrap())]).unwrap();
        assert!(c.theta_dependent());
        assert!(!c.has_grad());
    }

    fn arb_vals(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(prop_oneof![8 => -10.0..10.0f64, 1 => Just(f64::NEG_INFINITY)], n)
    }

    proptest! {
        #[test]
        fn soft_logic_stays_in_unit_interval_and_monotone(a in 0.0..=1.0f64, b in 0.0..=1.0f64, d in 0.0..0.5f64) {
            let (x, y) = (SoftLogicExpr::atom("A"), SoftLogicExpr::atom("B"));
            let a2 = (a + d).min(1.0);
            for e in [SoftLogicExpr::and(x.clone(), y.clone()), SoftLogicExpr::or(x.clone(), y.clone())] {
                let v = e.eval(&ab(a, b)).unwrap();
                prop_assert!((0.0..=1.0).contains(&v));
                prop_assert!(e.eval(&ab(a2, b)).unwrap() >= v);
            }
            let n = SoftLogicExpr::not(x.clone());
            prop_assert!(n.eval(&ab(a2, b)).unwrap() <= n.eval(&ab(a, b)).unwrap());
            let i = SoftLogicExpr::implies(x, y);
            let v = i.eval(&ab(a, b)).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
        }

        #[test]
        fn combine_is_linear(a in arb_vals(5), b in arb_vals(5), c in arb_vals(5), l in 0.1..3.0f64) {
            let fa = ExperienceFn::fixed("a", a.clone()).unwrap();
            let fb = ExperienceFn::fixed("b", b).unwrap();
            let fc = ExperienceFn::fixed("c", c).unwrap();
            let flat = combine(vec![(l, fa.clone()), (1.0, fb.clone()), (2.0, fc.clone())]).unwrap().eval(None).unwrap();
            let inner = combine(vec![(l, fa), (1.0, fb)]).unwrap();
            let nested = combine(vec![(1.0, inner), (2.0, fc)]).unwrap().eval(None).unwrap();
            for (x, y) in flat.iter().zip(&nested) {
                prop_assert!(x == y || (x - y).abs() < 1e-12);
            }
            for (i, x) in flat.iter().enumerate() {
                if a[i] == f64::NEG_INFINITY {
                    prop_assert_eq!(*x, f64::NEG_INFINITY);
                }
            }
        }
    }
}
