//! Named configurations that reproduce classical algorithms, the problem
//! bundles they run on, and equivalence checks against independent oracles.

pub mod oracles;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adversarial::{adversarial_run, AdversarialConfig, Discriminator, DiscriminatorMode};
use crate::dist::{normalize_log, Dist};
use crate::divergence::DivergenceFn;
use crate::error::{Error, Result};
use crate::experience::{
    combine, f_active, f_data, f_data_augmented, f_data_self, f_data_weighted, f_model_mimic, f_rule, payoff_kernel,
    select_query, AtomTable, Dataset, ExperienceFn, SoftLogicExpr,
};
use crate::mdp::{expected_return, f_reward, RewardMode, RewardSpec, TabularMDP};
use crate::models::{ConditionalSoftmaxModel, MixtureModel, SoftmaxModel, TargetModel};
use crate::solver::{
    run, run_online, schedule, ConfigDelta, RunOptions, RunStatus, SEConfig, Segment, Stopping, StudentMode, Trace,
    EPSILON_BETA,
};

/// Which algorithm a recipe reproduces; selects the problem wiring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecipeKind {
    SupervisedMle,
    SelfSupervisedMle,
    UnsupervisedMle,
    DataReweighting,
    DataAugmentation,
    ActiveLearning,
    PosteriorRegularization,
    UnifiedEm,
    PolicyGradient,
    IntrinsicReward,
    RlAsInference,
    KnowledgeDistillation,
    VanillaGan,
    Wgan,
    PpoGan,
    MultiplicativeWeights,
    InterpolationSchedule,
}

/// Problem inputs a recipe may need.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Input {
    Dataset,
    Factors,
    Weights,
    Payoff,
    Pool,
    Rule,
    SourceModel,
    Mdp,
    Intrinsic,
    Experts,
    DataDist,
}

/// Generator/discriminator knobs for adversarial recipes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversarialKnobs {
    pub mode: DiscriminatorMode,
    pub disc_steps: usize,
    pub disc_step_size: f64,
    pub gen_step_size: f64,
    #[serde(default)]
    pub reweighted: bool,
}

/// A plan segment in serializable form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSegment {
    pub label: String,
    pub start: usize,
    pub end: usize,
    #[serde(default)]
    pub delta: ConfigDelta,
}

/// Everything a recipe run is parameterized by, besides the problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipeSettings {
    pub config: SEConfig,
    /// Replaces `config.alpha`. Required by `unified-em`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Runs exactly this many outer iterations instead of stopping on the objective.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    /// Mixture components for latent-variable recipes.
    #[serde(default = "default_components")]
    pub components: usize,
    /// Uniform logit noise for the initial model, drawn from the run seed; 0 starts flat.
    #[serde(default)]
    pub init_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adversarial: Option<AdversarialKnobs>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<Vec<PlanSegment>>,
}

fn default_components() -> usize {
    2
}

impl RecipeSettings {
    fn new(config: SEConfig) -> Self {
        Self { config, alpha: None, iterations: None, components: 2, init_scale: 0.0, adversarial: None, plan: None }
    }

    /// The configuration after applying `alpha` and `iterations`.
    pub fn effective_config(&self) -> SEConfig {
        let mut c = self.config.clone();
        if let Some(a) = self.alpha {
            c.alpha = a;
        }
        if let Some(n) = self.iterations {
            c.stopping = Stopping { max_iter: n.max(1), tol: 0.0, patience: usize::MAX };
        }
        c
    }
}

/// A named, frozen configuration.
#[derive(Debug, Clone)]
pub struct Recipe {
    name: &'static str,
    aliases: &'static [&'static str],
    kind: RecipeKind,
    requires: &'static [Input],
    doc: &'static str,
    settings: RecipeSettings,
}

impl Recipe {
    pub fn name(&self) -> &'static str {
        self.name
    }
    pub fn aliases(&self) -> &'static [&'static str] {
        self.aliases
    }
    pub fn kind(&self) -> RecipeKind {
        self.kind
    }
    pub fn requires(&self) -> &'static [Input] {
        self.requires
    }
    pub fn doc(&self) -> &'static str {
        self.doc
    }
    /// A copy of the default settings; the registry itself cannot be mutated.
    pub fn settings(&self) -> RecipeSettings {
        self.settings.clone()
    }
    pub fn config(&self) -> SEConfig {
        self.settings.config.clone()
    }
}

fn cfg(alpha: f64, beta: f64, divergence: DivergenceFn) -> SEConfig {
    SEConfig { divergence, ..SEConfig::new(alpha, beta) }
}

fn pg_config() -> SEConfig {
    let mut c = SEConfig::new(1.0, 1.0);
    c.student = StudentMode::Gradient { steps: 1, step_size: 1.0, through_experience: true };
    c.stopping.max_iter = 2000;
    c
}

fn adversarial_settings(divergence: DivergenceFn, knobs: AdversarialKnobs, iterations: usize) -> RecipeSettings {
    let mut s = RecipeSettings::new(cfg(0.0, 1.0, divergence));
    s.adversarial = Some(knobs);
    s.iterations = Some(iterations);
    s
}

/// All recipes, one per algorithm.
pub fn registry() -> Vec<Recipe> {
    use Input::*;
    let lipschitz = DiscriminatorMode::LipschitzCritic { clip: 1.0, coords: None };
    let mut out = vec![
        Recipe {
            name: "supervised-mle",
            aliases: &["mle"],
            kind: RecipeKind::SupervisedMle,
            requires: &[Dataset],
            doc: "Maximum likelihood: data experience, cross entropy, alpha = 1, beta = epsilon.",
            settings: RecipeSettings::new(cfg(1.0, EPSILON_BETA, DivergenceFn::CrossEntropy)),
        },
        Recipe {
            name: "self-supervised-mle",
            aliases: &["self-supervised"],
            kind: RecipeKind::SelfSupervisedMle,
            requires: &[Dataset, Factors],
            doc: "Data experience on a pair domain split into (x, y); the default split reads t as (t / |Y|, t % |Y|).",
            settings: RecipeSettings::new(cfg(1.0, EPSILON_BETA, DivergenceFn::CrossEntropy)),
        },
        Recipe {
            name: "unsupervised-mle",
            aliases: &["em", "unsupervised"],
            kind: RecipeKind::UnsupervisedMle,
            requires: &[Dataset],
            doc: "EM for a mixture: q(x, y) = p_data(x) q(y|x), alpha = beta = 1.",
            settings: {
                let mut s = RecipeSettings::new(cfg(1.0, 1.0, DivergenceFn::CrossEntropy));
                s.init_scale = 1.0;
                s
            },
        },
        Recipe {
            name: "data-reweighting",
            aliases: &["reweighting"],
            kind: RecipeKind::DataReweighting,
            requires: &[Dataset, Weights],
            doc: "Instance-weighted data experience log(m(t) w(t) / N), alpha = 1, beta = epsilon.",
            settings: RecipeSettings::new(cfg(1.0, EPSILON_BETA, DivergenceFn::CrossEntropy)),
        },
        Recipe {
            name: "data-augmentation",
            aliases: &["raml", "augmentation"],
            kind: RecipeKind::DataAugmentation,
            requires: &[Dataset, Payoff],
            doc: "Reward-augmented maximum likelihood: kernel exp(R / temperature), alpha = 1, beta = epsilon.",
            settings: RecipeSettings::new(cfg(1.0, EPSILON_BETA, DivergenceFn::CrossEntropy)),
        },
        Recipe {
            name: "active-learning",
            aliases: &["active"],
            kind: RecipeKind::ActiveLearning,
            requires: &[Factors, Pool],
            doc: "Pool data plus lambda * uncertainty; reports the next query.",
            settings: RecipeSettings::new(cfg(1.0, EPSILON_BETA, DivergenceFn::CrossEntropy)),
        },
        Recipe {
            name: "posterior-regularization",
            aliases: &["pr"],
            kind: RecipeKind::PosteriorRegularization,
            requires: &[Dataset, Rule],
            doc: "EM with a weighted soft-logic rule in the experience, alpha = beta = 1.",
            settings: {
                let mut s = RecipeSettings::new(cfg(1.0, 1.0, DivergenceFn::CrossEntropy));
                s.init_scale = 1.0;
                s
            },
        },
        Recipe {
            name: "unified-em",
            aliases: &["uem"],
            kind: RecipeKind::UnifiedEm,
            requires: &[Dataset],
            doc: "Posterior-regularized EM with a free alpha; settings.alpha must be given.",
            settings: {
                let mut s = RecipeSettings::new(cfg(1.0, 1.0, DivergenceFn::CrossEntropy));
                s.init_scale = 1.0;
                s
            },
        },
        Recipe {
            name: "policy-gradient",
            aliases: &["pg"],
            kind: RecipeKind::PolicyGradient,
            requires: &[Mdp],
            doc: "f = log Q, alpha = beta = 1, one gradient step through the experience per iteration.",
            settings: RecipeSettings::new(pg_config()),
        },
        Recipe {
            name: "intrinsic-reward",
            aliases: &["intrinsic"],
            kind: RecipeKind::IntrinsicReward,
            requires: &[Mdp, Intrinsic],
            doc: "f = log(Q + Q_in) with an intrinsic reward table, alpha = beta = 1.",
            settings: RecipeSettings::new(pg_config()),
        },
        Recipe {
            name: "rl-as-inference",
            aliases: &["rl-inference"],
            kind: RecipeKind::RlAsInference,
            requires: &[Mdp],
            doc: "f = Q, alpha = beta = rho; the teacher is p exp(Q / rho) / Z.",
            settings: {
                let mut c = SEConfig::new(1.0, 1.0);
                c.stopping.max_iter = 2000;
                RecipeSettings::new(c)
            },
        },
        Recipe {
            name: "knowledge-distillation",
            aliases: &["distillation"],
            kind: RecipeKind::KnowledgeDistillation,
            requires: &[Dataset, SourceModel],
            doc: "Pseudo-labels from a source model, f = log p_data(x) + log p_source(y|x), alpha = 1, beta = epsilon.",
            settings: RecipeSettings::new(cfg(1.0, EPSILON_BETA, DivergenceFn::CrossEntropy)),
        },
        Recipe {
            name: "vanilla-gan",
            aliases: &["gan"],
            kind: RecipeKind::VanillaGan,
            requires: &[DataDist],
            doc: "Jensen-Shannon divergence, classifier discriminator, alpha = 0, beta = 1.",
            settings: adversarial_settings(
                DivergenceFn::Js,
                AdversarialKnobs {
                    mode: DiscriminatorMode::Classifier,
                    disc_steps: 5,
                    disc_step_size: 10.0,
                    gen_step_size: 1.0,
                    reweighted: false,
                },
                5000,
            ),
        },
        Recipe {
            name: "wgan",
            aliases: &[],
            kind: RecipeKind::Wgan,
            requires: &[DataDist],
            doc: "W1 divergence, 1-Lipschitz critic on an ordered domain, alpha = 0, beta = 1.",
            settings: adversarial_settings(
                DivergenceFn::w1(),
                AdversarialKnobs {
                    mode: lipschitz.clone(),
                    disc_steps: 5,
                    disc_step_size: 10.0,
                    gen_step_size: 0.01,
                    reweighted: false,
                },
                2000,
            ),
        },
        Recipe {
            name: "ppo-gan",
            aliases: &[],
            kind: RecipeKind::PpoGan,
            requires: &[DataDist],
            doc: "KL divergence with a Lipschitz critic (clip bound is a knob), alpha = 0, beta = 1.",
            settings: adversarial_settings(
                DivergenceFn::Kl,
                AdversarialKnobs {
                    mode: lipschitz,
                    disc_steps: 5,
                    disc_step_size: 10.0,
                    gen_step_size: 0.01,
                    reweighted: false,
                },
                2000,
            ),
        },
        Recipe {
            name: "multiplicative-weights",
            aliases: &["mw"],
            kind: RecipeKind::MultiplicativeWeights,
            requires: &[Experts],
            doc: "Online experts: f_tau = reward_tau, alpha = beta, exact student.",
            settings: RecipeSettings::new(SEConfig::new(1.0, 1.0)),
        },
        Recipe {
            name: "interpolation-schedule",
            aliases: &["schedule"],
            kind: RecipeKind::InterpolationSchedule,
            requires: &[],
            doc: "Piecewise plan over configurations; the default anneals beta from epsilon to 1.",
            settings: {
                let mut s = RecipeSettings::new(pg_config());
                s.init_scale = 0.5;
                s
            },
        },
    ];
    out.sort_by_key(|r| r.name);
    out
}

/// Resolves a name or alias.
pub fn lookup(name: &str) -> Result<Recipe> {
    registry()
        .into_iter()
        .find(|r| r.name == name || r.aliases.contains(&name))
        .ok_or_else(|| Error::NotFound(format!("recipe {name}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observations: Option<Vec<usize>>,
    /// Domain size; required with `observations`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<usize>,
}

impl DatasetSpec {
    pub fn dataset(&self) -> Result<Dataset> {
        match (&self.counts, &self.observations) {
            (Some(c), None) => Dataset::from_counts(c.clone()),
            (None, Some(o)) => {
                let n = self.size.ok_or_else(|| Error::MissingInput("dataset.size".into()))?;
                Dataset::from_observations(n, o)
            }
            _ => Err(Error::InvalidConfig("dataset needs exactly one of `counts`, `observations`".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSpec {
    pub pool: Vec<usize>,
    /// Oracle label for every input.
    pub labels: Vec<usize>,
    pub uncertainty: Vec<f64>,
    #[serde(default = "default_one")]
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleSpec {
    pub expr: Value,
    pub atoms: BTreeMap<String, Vec<f64>>,
    #[serde(default = "default_one")]
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomMdpSpec {
    pub seed: u64,
    pub states: usize,
    pub actions: usize,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertStream {
    /// `T x K` rewards.
    pub rewards: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<Vec<f64>>,
}

fn default_one() -> f64 {
    1.0
}

/// Problem data. Every field is optional; recipes declare what they need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ProblemBundle {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetSpec>,
    /// `(|X|, |Y|)` of a pair domain.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factors: Option<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    /// `payoff[t*][t] = R(t, t*)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payoff: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool: Option<PoolSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule: Option<RuleSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_model: Option<ConditionalSoftmaxModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mdp: Option<TabularMDP>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random_mdp: Option<RandomMdpSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intrinsic: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experts: Option<ExpertStream>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_data: Option<Vec<f64>>,
}

impl ProblemBundle {
    fn has(&self, input: Input) -> bool {
        match input {
            Input::Dataset => self.dataset.is_some(),
            Input::Factors => self.factors.is_some(),
            Input::Weights => self.weights.is_some(),
            Input::Payoff => self.payoff.is_some(),
            Input::Pool => self.pool.is_some(),
            Input::Rule => self.rule.is_some(),
            Input::SourceModel => self.source_model.is_some(),
            Input::Mdp => self.mdp.is_some() || self.random_mdp.is_some(),
            Input::Intrinsic => self.intrinsic.is_some(),
            Input::Experts => self.experts.is_some(),
            Input::DataDist => self.p_data.is_some() || self.dataset.is_some(),
        }
    }

    fn dataset(&self) -> Result<Dataset> {
        self.dataset.as_ref().ok_or_else(|| Error::MissingInput("dataset".into()))?.dataset()
    }

    fn factors(&self) -> Result<(usize, usize)> {
        self.factors.ok_or_else(|| Error::MissingInput("factors".into()))
    }

    pub fn mdp(&self) -> Result<TabularMDP> {
        match (&self.mdp, &self.random_mdp) {
            (Some(m), _) => Ok(m.clone()),
            (None, Some(r)) => TabularMDP::random(r.seed, r.states, r.actions, r.gamma),
            _ => Err(Error::MissingInput("mdp".into())),
        }
    }

    pub fn data_dist(&self) -> Result<Dist> {
        match &self.p_data {
            Some(p) => Dist::from_probs(p.clone()),
            None => Ok(self.dataset()?.empirical()),
        }
    }

    fn rule_experience(&self, size: usize) -> Result<(f64, ExperienceFn)> {
        let r = self.rule.as_ref().ok_or_else(|| Error::MissingInput("rule".into()))?;
        let expr = SoftLogicExpr::from_json(&r.expr)?;
        let mut table = AtomTable::new(size);
        for (k, v) in &r.atoms {
            table = table.with(k, v.clone())?;
        }
        Ok((r.weight, f_rule(&expr, &table)?))
    }

    /// Checks that every input the recipe declares is present.
    pub fn validate_for(&self, recipe: &Recipe) -> Result<()> {
        for &i in recipe.requires {
            if !self.has(i) {
                let name = serde_json::to_value(i).ok().and_then(|v| v.as_str().map(String::from));
                return Err(Error::MissingInput(name.unwrap_or_default()));
            }
        }
        if recipe.kind == RecipeKind::InterpolationSchedule && !self.has(Input::Mdp) && !self.has(Input::Dataset) {
            return Err(Error::MissingInput("mdp or dataset".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct RecipeOptions {
    pub seed: u64,
    /// Keep `q`, `theta` and student gradients in the trace.
    pub record_states: bool,
    pub timing: bool,
}

#[derive(Debug, Clone)]
pub struct RecipeRun {
    pub recipe: String,
    pub model: TargetModel,
    pub trace: Trace,
    /// Teacher distribution of the last iteration, when there is one.
    pub q: Option<Dist>,
    pub discriminator: Option<Discriminator>,
    /// Final scalar metrics.
    pub summary: BTreeMap<String, f64>,
}

fn init(model: TargetModel, settings: &RecipeSettings, seed: u64) -> Result<TargetModel> {
    if settings.init_scale > 0.0 {
        model.randomized(seed, settings.init_scale)
    } else {
        Ok(model)
    }
}

fn finish(trace: &mut Trace, settings: &RecipeSettings) {
    if settings.iterations.is_some() {
        trace.status = RunStatus::Completed;
    }
}

/// Runs `recipe` with `settings` on `problem`.
pub fn run_recipe(
    recipe: &Recipe,
    settings: &RecipeSettings,
    problem: &ProblemBundle,
    opts: &RecipeOptions,
) -> Result<RecipeRun> {
    problem.validate_for(recipe)?;
    let config = settings.effective_config();
    let run_opts = RunOptions { record_states: opts.record_states, timing: opts.timing, ..Default::default() };
    let mut summary = BTreeMap::new();
    let plain = |model: TargetModel, exp: ExperienceFn, ro: RunOptions| -> Result<RecipeRun> {
        let model = init(model, settings, opts.seed)?;
        let mut out = run(&config, &exp, &model, &ro)?;
        finish(&mut out.trace, settings);
        Ok(RecipeRun {
            recipe: recipe.name.into(),
            model: out.model,
            trace: out.trace,
            q: Some(out.q),
            discriminator: None,
            summary: BTreeMap::new(),
        })
    };
    let mut out = match recipe.kind {
        RecipeKind::SupervisedMle => {
            let d = problem.dataset()?;
            let ro = RunOptions { reference: Some(d.empirical()), ..run_opts };
            plain(TargetModel::Softmax(SoftmaxModel::zeros(d.len())), f_data(&d)?, ro)?
        }
        RecipeKind::SelfSupervisedMle => {
            let d = problem.dataset()?;
            let (nx, ny) = problem.factors()?;
            if d.len() != nx * ny {
                return Err(Error::DomainMismatch(format!("dataset has size {}, factors give {}", d.len(), nx * ny)));
            }
            let e = f_data_self(&d, nx, ny, opts.seed, |t, _| (t / ny, t % ny))?;
            let ro = RunOptions { reference: Some(d.empirical()), ..run_opts };
            plain(TargetModel::Softmax(SoftmaxModel::zeros(nx * ny)), e, ro)?
        }
        RecipeKind::DataReweighting => {
            let d = problem.dataset()?;
            let w = problem.weights.as_ref().ok_or_else(|| Error::MissingInput("weights".into()))?;
            plain(TargetModel::Softmax(SoftmaxModel::zeros(d.len())), f_data_weighted(&d, w)?, run_opts)?
        }
        RecipeKind::DataAugmentation => {
            let d = problem.dataset()?;
            let r = problem.payoff.as_ref().ok_or_else(|| Error::MissingInput("payoff".into()))?;
            let temp = problem.temperature.unwrap_or(1.0);
            if r.len() != d.len() {
                return Err(Error::ShapeMismatch { expected: d.len(), got: r.len() });
            }
            let kernel = payoff_kernel(d.len(), temp, |t, ts| r[ts].get(t).copied().unwrap_or(f64::NAN));
            plain(TargetModel::Softmax(SoftmaxModel::zeros(d.len())), f_data_augmented(&d, &kernel)?, run_opts)?
        }
        RecipeKind::ActiveLearning => {
            let (nx, ny) = problem.factors()?;
            let p = problem.pool.as_ref().ok_or_else(|| Error::MissingInput("pool".into()))?;
            if p.labels.len() != nx {
                return Err(Error::ShapeMismatch { expected: nx, got: p.labels.len() });
            }
            let e = f_active(&p.pool, |x| p.labels[x], &p.uncertainty, p.lambda, nx, ny)?;
            summary.insert("next_query".into(), select_query(&p.pool, &p.uncertainty, p.lambda, nx)? as f64);
            plain(TargetModel::Softmax(SoftmaxModel::zeros(nx * ny)), e, run_opts)?
        }
        RecipeKind::UnsupervisedMle | RecipeKind::PosteriorRegularization | RecipeKind::UnifiedEm => {
            if recipe.kind == RecipeKind::UnifiedEm && settings.alpha.is_none() {
                return Err(Error::MissingInput("settings.alpha".into()));
            }
            let d = problem.dataset()?;
            let (k, nx) = (settings.components, d.len());
            if k == 0 {
                return Err(Error::InvalidConfig("components must be >= 1".into()));
            }
            let emp = d.empirical();
            let data_term: Vec<f64> = (0..nx * k).map(|t| emp.log_probs()[t / k]).collect();
            let mut e = ExperienceFn::fixed("data", data_term)?;
            if recipe.kind == RecipeKind::PosteriorRegularization || problem.rule.is_some() {
                let (w, rule) = problem.rule_experience(nx * k)?;
                e = combine(vec![(1.0, e), (w, rule)])?;
            }
            let ro = RunOptions { x_marginal: Some(emp), record_states: true, ..run_opts };
            let mut r = plain(TargetModel::Mixture(MixtureModel::zeros(k, nx)), e, ro)?;
            let base = r.model.clone();
            let counts: Vec<f64> = d.counts().iter().map(|&c| c as f64).collect();
            let n = d.total() as f64;
            for rec in r.trace.records.iter_mut() {
                if let Some(th) = &rec.theta {
                    if let TargetModel::Mixture(m) = base.with_params(th)? {
                        rec.extra.insert("nll".into(), -m.log_likelihood(&counts) / n);
                    }
                }
                if !opts.record_states {
                    rec.q = None;
                    rec.theta = None;
                }
            }
            if let TargetModel::Mixture(m) = &r.model {
                summary.insert("nll".into(), -m.log_likelihood(&counts) / n);
            }
            r
        }
        RecipeKind::PolicyGradient | RecipeKind::IntrinsicReward | RecipeKind::RlAsInference => {
            let mdp = problem.mdp()?;
            let spec = match recipe.kind {
                RecipeKind::PolicyGradient => RewardSpec::mode(RewardMode::LogQ),
                RecipeKind::IntrinsicReward => {
                    RewardSpec { intrinsic: problem.intrinsic.clone(), ..RewardSpec::mode(RewardMode::LogQIntrinsic) }
                }
                _ => RewardSpec::mode(RewardMode::Q),
            };
            let re = f_reward(&mdp, &spec)?;
            summary.insert("reward_offset".into(), re.offset);
            let model = mdp.policy_model(ConditionalSoftmaxModel::zeros(mdp.n_states(), mdp.n_actions()))?;
            let r = plain(model, re.experience, run_opts)?;
            if let TargetModel::Conditional { policy, .. } = &r.model {
                summary.insert("expected_return".into(), expected_return(&mdp, policy)?);
            }
            r
        }
        RecipeKind::KnowledgeDistillation => {
            let d = problem.dataset()?;
            let src = problem.source_model.as_ref().ok_or_else(|| Error::MissingInput("source_model".into()))?;
            let e = f_model_mimic(&d, src)?;
            let model = TargetModel::conditional(ConditionalSoftmaxModel::zeros(src.nx, src.ny), d.empirical())?;
            plain(model, e, run_opts)?
        }
        RecipeKind::VanillaGan | RecipeKind::Wgan | RecipeKind::PpoGan => {
            let pd = problem.data_dist()?;
            let knobs = settings
                .adversarial
                .clone()
                .ok_or_else(|| Error::InvalidConfig("adversarial recipes need `adversarial` settings".into()))?;
            let ac = AdversarialConfig {
                se: config.clone(),
                mode: knobs.mode,
                disc_steps: knobs.disc_steps,
                disc_step_size: knobs.disc_step_size,
                gen_step_size: knobs.gen_step_size,
                outer_iters: settings.iterations.unwrap_or(config.stopping.max_iter),
                reweighted: knobs.reweighted,
            };
            let model = init(TargetModel::Softmax(SoftmaxModel::zeros(pd.len())), settings, opts.seed)?;
            let o = adversarial_run(&ac, &model, &pd, None)?;
            let p = o.model.joint()?;
            summary.insert("tv_to_data".into(), p.tv(&pd));
            summary
                .insert(config.divergence.name().into(), crate::divergence::divergence(&config.divergence, &p, &pd)?);
            RecipeRun {
                recipe: recipe.name.into(),
                model: o.model,
                trace: o.trace,
                q: None,
                discriminator: Some(o.discriminator),
                summary: BTreeMap::new(),
            }
        }
        RecipeKind::MultiplicativeWeights => {
            let ex = problem.experts.as_ref().ok_or_else(|| Error::MissingInput("experts".into()))?;
            let k = ex.rewards.first().map(Vec::len).ok_or_else(|| Error::MissingInput("experts.rewards".into()))?;
            let w0 = match &ex.initial {
                Some(w) => Dist::from_probs(w.clone())?,
                None => Dist::uniform(k),
            };
            let o = run_online(&w0, &ex.rewards, config.alpha)?;
            summary.insert("regret".into(), o.regret);
            summary.insert("expected_reward".into(), o.expected_reward);
            summary.insert("best_expert_reward".into(), o.best_expert_reward);
            let last = o.weights.last().expect("initial weights").clone();
            RecipeRun {
                recipe: recipe.name.into(),
                model: TargetModel::Softmax(SoftmaxModel::from_dist(&last)),
                trace: o.trace,
                q: Some(last),
                discriminator: None,
                summary: BTreeMap::new(),
            }
        }
        RecipeKind::InterpolationSchedule => {
            let (model, exp, plan) = if problem.has(Input::Mdp) {
                let mdp = problem.mdp()?;
                let re = f_reward(&mdp, &RewardSpec::mode(RewardMode::LogQ))?;
                let m = mdp.policy_model(ConditionalSoftmaxModel::zeros(mdp.n_states(), mdp.n_actions()))?;
                let plan = vec![
                    PlanSegment {
                        label: "anneal".into(),
                        start: 0,
                        end: 50,
                        delta: ConfigDelta { beta_anneal: Some((EPSILON_BETA, 1.0)), ..Default::default() },
                    },
                    PlanSegment {
                        label: "policy-gradient".into(),
                        start: 50,
                        end: 100,
                        delta: ConfigDelta { beta: Some(1.0), ..Default::default() },
                    },
                ];
                (m, re.experience, plan)
            } else {
                let d = problem.dataset()?;
                let plan = vec![
                    PlanSegment { label: "base".into(), start: 0, end: 20, delta: ConfigDelta::default() },
                    PlanSegment {
                        label: "anneal".into(),
                        start: 20,
                        end: 40,
                        delta: ConfigDelta {
                            beta_anneal: Some((EPSILON_BETA, 1.0)),
                            student: Some(StudentMode::Exact),
                            ..Default::default()
                        },
                    },
                ];
                let mut base = config.clone();
                base.student = StudentMode::Exact;
                return finish_schedule(
                    recipe,
                    settings,
                    &base,
                    TargetModel::Softmax(SoftmaxModel::zeros(d.len())),
                    f_data(&d)?,
                    plan,
                    &run_opts,
                    opts,
                );
            };
            let plan = settings.plan.clone().unwrap_or(plan);
            return finish_schedule(recipe, settings, &config, model, exp, plan, &run_opts, opts);
        }
    };
    out.summary.extend(summary);
    if let Some(r) = out.trace.last() {
        out.summary.insert("total".into(), r.total);
    }
    out.summary.insert("iterations".into(), out.trace.records.len() as f64);
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn finish_schedule(
    recipe: &Recipe,
    settings: &RecipeSettings,
    config: &SEConfig,
    model: TargetModel,
    exp: ExperienceFn,
    default_plan: Vec<PlanSegment>,
    run_opts: &RunOptions,
    opts: &RecipeOptions,
) -> Result<RecipeRun> {
    let plan: Vec<Segment> = settings
        .plan
        .clone()
        .unwrap_or(default_plan)
        .into_iter()
        .map(|s| Segment { label: s.label, start: s.start, end: s.end, delta: s.delta, experience: None })
        .collect();
    let model = init(model, settings, opts.seed)?;
    let out = schedule(&plan, config, &exp, &model, run_opts)?;
    let mut summary = BTreeMap::new();
    if let Some(r) = out.trace.last() {
        summary.insert("total".into(), r.total);
    }
    summary.insert("iterations".into(), out.trace.records.len() as f64);
    Ok(RecipeRun {
        recipe: recipe.name.into(),
        model: out.model,
        trace: out.trace,
        q: Some(out.q),
        discriminator: None,
        summary,
    })
}

/// How a recipe is compared to its oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Contract {
    PerIteration,
    FixedPoint,
    GradientDirection,
}

/// Outcome of [`check_equivalence`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub recipe: String,
    pub oracle: String,
    pub contract: Contract,
    pub tolerance: f64,
    pub max_deviation: f64,
    pub pass: bool,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub details: BTreeMap<String, f64>,
}

/// Oracle names with their aliases.
pub const ORACLES: &[(&str, &[&str])] = &[
    ("oracle-em", &["em"]),
    ("hedge", &[]),
    ("reinforce", &["exact-pg"]),
    ("direct-mle", &["mle"]),
    ("bayes-posterior", &["posterior"]),
    ("gan-optimum", &[]),
];

fn resolve_oracle(name: &str) -> Result<&'static str> {
    ORACLES
        .iter()
        .find(|(n, a)| *n == name || a.contains(&name))
        .map(|(n, _)| *n)
        .ok_or_else(|| Error::NotFound(format!("oracle {name}")))
}

fn plain_mdp(m: &TabularMDP) -> oracles::PlainMdp {
    let (ns, na) = (m.n_states(), m.n_actions());
    oracles::PlainMdp {
        trans: (0..ns).map(|s| (0..na).map(|a| m.transition_row(s, a).to_vec()).collect()).collect(),
        reward: m.rewards().chunks(na).map(<[f64]>::to_vec).collect(),
        gamma: m.gamma(),
        p0: m.p0().probs().to_vec(),
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn softmax(v: &[f64]) -> Vec<f64> {
    normalize_log(v).map(|d| d.probs().to_vec()).unwrap_or_else(|_| vec![f64::NAN; v.len()])
}

fn policy_rows(theta: &[f64], na: usize) -> Vec<Vec<f64>> {
    theta.chunks(na).map(softmax).collect()
}

/// Runs `recipe` (default settings) and `oracle` on `problem` and compares
/// them according to the pair's contract.
pub fn check_equivalence(
    recipe: &str,
    oracle: &str,
    problem: &ProblemBundle,
    tolerance: f64,
    seed: u64,
) -> Result<EquivalenceReport> {
    let r = lookup(recipe)?;
    let settings = r.settings();
    check_equivalence_with(&r, &settings, oracle, problem, tolerance, seed)
}

/// [`check_equivalence`] with explicit settings.
pub fn check_equivalence_with(
    r: &Recipe,
    settings: &RecipeSettings,
    oracle: &str,
    problem: &ProblemBundle,
    tolerance: f64,
    seed: u64,
) -> Result<EquivalenceReport> {
    let o = resolve_oracle(oracle)?;
    problem.validate_for(r)?;
    let incompatible = || Error::IncompatiblePair { recipe: r.name.into(), oracle: o.into() };
    let opts = RecipeOptions { seed, record_states: true, timing: false };
    let mut details = BTreeMap::new();
    let (contract, dev) = match (r.kind, o) {
        (RecipeKind::UnsupervisedMle, "oracle-em") => {
            let mut s = settings.clone();
            let iters = s.iterations.unwrap_or(20);
            s.iterations = Some(iters);
            let run = run_recipe(r, &s, problem, &opts)?;
            let d = problem.dataset()?;
            let counts: Vec<f64> = d.counts().iter().map(|&c| c as f64).collect();
            let k = s.components;
            let m0 = init(TargetModel::Mixture(MixtureModel::zeros(k, d.len())), &s, seed)?;
            let TargetModel::Mixture(m0) = m0 else { unreachable!() };
            let pi0 = softmax(&m0.mix);
            let phi0: Vec<Vec<f64>> = m0.comp.chunks(d.len()).map(softmax).collect();
            let steps = oracles::em(&counts, &pi0, &phi0, iters);
            let mut dev: f64 = 0.0;
            let mut monotone_violation: f64 = 0.0;
            for (rec, st) in run.trace.records.iter().zip(&steps) {
                dev = dev.max(max_abs_diff(rec.q.as_deref().unwrap_or(&[]), &st.q));
                let th = rec.theta.as_deref().unwrap_or(&[]);
                let pi = softmax(&th[..k.min(th.len())]);
                dev = dev.max(max_abs_diff(&pi, &st.pi));
                for (y, row) in st.phi.iter().enumerate() {
                    let lo = k + y * d.len();
                    let phi = th.get(lo..lo + d.len()).map(softmax).unwrap_or_default();
                    dev = dev.max(max_abs_diff(&phi, row));
                }
            }
            let nll: Vec<f64> = run.trace.records.iter().filter_map(|r| r.extra.get("nll").copied()).collect();
            for w in nll.windows(2) {
                monotone_violation = monotone_violation.max(w[1] - w[0]);
            }
            if run.trace.records.len() != steps.len() {
                dev = f64::INFINITY;
            }
            details.insert("iterations".into(), iters as f64);
            details.insert("nll_increase".into(), monotone_violation.max(0.0));
            details.insert("final_nll".into(), nll.last().copied().unwrap_or(f64::NAN));
            // The likelihood must never go up by more than round-off.
            let dev = if monotone_violation > 1e-12 { f64::INFINITY } else { dev };
            (Contract::PerIteration, dev)
        }
        (RecipeKind::MultiplicativeWeights, "hedge") => {
            let run = run_recipe(r, settings, problem, &opts)?;
            let ex = problem.experts.as_ref().ok_or_else(|| Error::MissingInput("experts".into()))?;
            let k = ex.rewards[0].len();
            let w0 = ex.initial.clone().unwrap_or(vec![1.0 / k as f64; k]);
            let alpha = settings.effective_config().alpha;
            let h = oracles::hedge(&w0, &ex.rewards, 1.0 / alpha);
            // Replay the weight trajectory of the online loop the recipe runs.
            let o = run_online(&Dist::from_probs(w0.clone())?, &ex.rewards, alpha)?;
            let mut dev: f64 = 0.0;
            for (a, b) in o.weights.iter().zip(&h) {
                dev = dev.max(max_abs_diff(a.probs(), b));
            }
            if o.weights.len() != h.len() {
                dev = f64::INFINITY;
            }
            dev = dev.max(max_abs_diff(run.model.joint()?.probs(), h.last().expect("initial")));
            details.insert("rounds".into(), ex.rewards.len() as f64);
            details.insert("regret".into(), run.summary["regret"]);
            (Contract::PerIteration, dev)
        }
        (RecipeKind::PolicyGradient, "reinforce") => {
            let mut s = settings.clone();
            s.iterations = Some(1);
            if s.init_scale == 0.0 {
                s.init_scale = 1.0;
            }
            let run = run_recipe(r, &s, problem, &opts)?;
            let rec = &run.trace.records[0];
            let g = rec
                .grad
                .clone()
                .ok_or_else(|| Error::InvalidConfig("policy-gradient check needs a gradient student".into()))?;
            let mdp = problem.mdp()?;
            let plain = plain_mdp(&mdp);
            let m0 =
                init(mdp.policy_model(ConditionalSoftmaxModel::zeros(mdp.n_states(), mdp.n_actions()))?, &s, seed)?;
            let pi = policy_rows(&m0.params(), mdp.n_actions());
            let pg = plain.policy_gradient(&pi).ok_or(Error::SingularSystem)?;
            let (shifted, _) = plain.shifted_for_log();
            let z = shifted.expected_return(&pi).ok_or(Error::SingularSystem)?;
            let dot: f64 = g.iter().zip(&pg).map(|(a, b)| a * b).sum();
            let ng = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            let np = pg.iter().map(|v| v * v).sum::<f64>().sqrt();
            let cos = dot / (ng * np);
            let ratio = ng / np;
            details.insert("cosine".into(), cos);
            details.insert("ratio".into(), ratio);
            details.insert("inv_z".into(), 1.0 / z);
            (Contract::GradientDirection, (1.0 - cos).abs().max((ratio - 1.0 / z).abs()))
        }
        (RecipeKind::RlAsInference, "bayes-posterior") => {
            let mut s = settings.clone();
            s.iterations = Some(1);
            let run = run_recipe(r, &s, problem, &opts)?;
            let q = run.trace.records[0].q.clone().unwrap_or_default();
            let mdp = problem.mdp()?;
            let plain = plain_mdp(&mdp);
            let m0 =
                init(mdp.policy_model(ConditionalSoftmaxModel::zeros(mdp.n_states(), mdp.n_actions()))?, &s, seed)?;
            let na = mdp.n_actions();
            let pi = policy_rows(&m0.params(), na);
            let qv = plain.q_values(&pi).ok_or(Error::SingularSystem)?;
            let p: Vec<f64> = (0..mdp.n_states() * na).map(|t| plain.p0[t / na] * pi[t / na][t % na]).collect();
            let f: Vec<f64> = qv.iter().flatten().copied().collect();
            let rho = s.effective_config().alpha;
            let want = oracles::tilt(&p, &f, rho);
            details.insert("rho".into(), rho);
            (Contract::FixedPoint, max_abs_diff(&q, &want))
        }
        (RecipeKind::PosteriorRegularization, "bayes-posterior") => {
            let mut s = settings.clone();
            s.iterations = Some(1);
            let run = run_recipe(r, &s, problem, &opts)?;
            let q = run.trace.records[0].q.clone().unwrap_or_default();
            let d = problem.dataset()?;
            let (k, nx) = (s.components, d.len());
            let m0 = init(TargetModel::Mixture(MixtureModel::zeros(k, nx)), &s, seed)?;
            let TargetModel::Mixture(m0) = m0 else { unreachable!() };
            let pi0 = softmax(&m0.mix);
            let phi0: Vec<Vec<f64>> = m0.comp.chunks(nx).map(softmax).collect();
            let rule = problem.rule.as_ref().ok_or_else(|| Error::MissingInput("rule".into()))?;
            let (_, fr) = problem.rule_experience(nx * k)?;
            let fr = fr.eval(None)?;
            let emp = d.empirical();
            let alpha = s.effective_config().alpha;
            let mut want = vec![0.0; nx * k];
            for x in 0..nx {
                if emp.prob(x) == 0.0 {
                    continue;
                }
                let row: Vec<f64> = (0..k).map(|y| pi0[y] * phi0[y][x]).collect();
                let f: Vec<f64> = (0..k).map(|y| rule.weight * fr[x * k + y]).collect();
                let t = oracles::tilt(&row.iter().map(|v| v.powf(1.0 / alpha)).collect::<Vec<_>>(), &f, alpha);
                for y in 0..k {
                    want[x * k + y] = emp.prob(x) * t[y];
                }
            }
            (Contract::FixedPoint, max_abs_diff(&q, &want))
        }
        (
            RecipeKind::SupervisedMle
            | RecipeKind::SelfSupervisedMle
            | RecipeKind::DataReweighting
            | RecipeKind::DataAugmentation
            | RecipeKind::KnowledgeDistillation,
            "direct-mle",
        ) => {
            let run = run_recipe(r, settings, problem, &opts)?;
            let d = problem.dataset()?;
            let counts: Vec<f64> = d.counts().iter().map(|&c| c as f64).collect();
            let p = run.model.joint()?;
            let dev = match r.kind {
                RecipeKind::SupervisedMle | RecipeKind::SelfSupervisedMle => {
                    let n: f64 = counts.iter().sum();
                    max_abs_diff(p.probs(), &counts.iter().map(|c| c / n).collect::<Vec<_>>())
                }
                RecipeKind::DataReweighting => {
                    let w = problem.weights.as_ref().ok_or_else(|| Error::MissingInput("weights".into()))?;
                    max_abs_diff(p.probs(), &oracles::weighted_frequencies(&counts, w))
                }
                RecipeKind::DataAugmentation => {
                    let pay = problem.payoff.as_ref().ok_or_else(|| Error::MissingInput("payoff".into()))?;
                    let want = oracles::exponentiated_payoff(&counts, pay, problem.temperature.unwrap_or(1.0));
                    max_abs_diff(p.probs(), &want)
                }
                _ => {
                    let src =
                        problem.source_model.as_ref().ok_or_else(|| Error::MissingInput("source_model".into()))?;
                    let TargetModel::Conditional { policy, .. } = &run.model else { unreachable!() };
                    let mut dev: f64 = 0.0;
                    for (x, &c) in counts.iter().enumerate() {
                        if c > 0.0 {
                            let a = softmax(&policy.theta[x * src.ny..(x + 1) * src.ny]);
                            let b = softmax(&src.theta[x * src.ny..(x + 1) * src.ny]);
                            dev = dev.max(max_abs_diff(&a, &b));
                        }
                    }
                    dev
                }
            };
            (Contract::FixedPoint, dev)
        }
        (RecipeKind::VanillaGan, "gan-optimum") => {
            let run = run_recipe(r, settings, problem, &opts)?;
            let pd = problem.data_dist()?;
            let p = run.model.joint()?;
            let tv = p.tv(&pd);
            let disc = crate::adversarial::discriminator_update(
                &run.discriminator.expect("adversarial run"),
                &p,
                &pd,
                5000,
                10.0,
            )?;
            let want = oracles::gan_optimum(pd.probs(), p.probs());
            let got: Vec<f64> = disc.phi.iter().map(|&v| crate::adversarial::sigmoid(v)).collect();
            let sd = max_abs_diff(&got, &want);
            details.insert("tv_to_data".into(), tv);
            details.insert("classifier_deviation".into(), sd);
            (Contract::FixedPoint, tv.max(sd))
        }
        _ => return Err(incompatible()),
    };
    Ok(EquivalenceReport {
        recipe: r.name.into(),
        oracle: o.into(),
        contract,
        tolerance,
        max_deviation: dev,
        pass: dev <= tolerance,
        details,
    })
}
