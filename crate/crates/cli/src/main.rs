//! `sekit` command-line front end: run a recipe, sweep a grid of overrides,
//! or check a recipe against an independent oracle.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use sekit::recipes::{self, check_equivalence_with, run_recipe, ProblemBundle, Recipe, RecipeOptions, RecipeSettings};
use sekit::solver::RunStatus;

const EXIT_OK: u8 = 0;
const EXIT_CONFIG: u8 = 1;
const EXIT_PARTIAL: u8 = 2;
const EXIT_CHECK_FAILED: u8 = 3;

#[derive(Parser)]
#[command(name = "sekit", version, about = "Teacher-student learning objectives on finite domains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration and write its trace and final model.
    Run(RunArgs),
    /// Run the cross-product of a config's `grid` section.
    Sweep(SweepArgs),
    /// Compare a recipe with an oracle; prints a JSON report.
    Check(CheckArgs),
    /// List recipes and oracles.
    Recipes,
}

#[derive(Args)]
struct Common {
    /// Run config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Recipe name or alias; overrides the config's recipe.
    #[arg(long)]
    recipe: Option<String>,
    /// Problem bundle (JSON); overrides the config's problem.
    #[arg(long)]
    problem: Option<PathBuf>,
    /// Seed; falls back to the config, then SEKIT_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted-key override, e.g. `settings.config.beta=0.5`. Values parse as JSON, else as strings.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Args)]
struct CheckArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    oracle: String,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
}

/// The on-disk run config. Unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    recipe: String,
    /// Partial recipe settings, merged over the recipe's defaults.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    settings: Option<Value>,
    /// Inline objective configuration, merged into `settings.config`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<Value>,
    /// A problem bundle, or a path to one relative to the config file.
    problem: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    out: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    overrides: Option<BTreeMap<String, Value>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    grid: Option<BTreeMap<String, Vec<Value>>>,
}

/// Everything needed to reproduce a run; written as resolved_config.json.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Resolved {
    recipe: String,
    settings: RecipeSettings,
    problem: ProblemBundle,
    seed: u64,
}

struct Loaded {
    value: Value,
    base_dir: PathBuf,
}

fn load(common: &Common) -> Result<Loaded> {
    let (mut value, base_dir) = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let v: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            if !v.is_object() {
                bail!("{}: config must be a JSON object", p.display());
            }
            (v, p.parent().map(Path::to_path_buf).unwrap_or_default())
        }
        None => (Value::Object(Map::new()), PathBuf::new()),
    };
    let obj = value.as_object_mut().expect("object");
    if let Some(r) = &common.recipe {
        obj.insert("recipe".into(), Value::String(r.clone()));
    }
    if let Some(p) = &common.problem {
        let abs = std::path::absolute(p).unwrap_or_else(|_| p.clone());
        obj.insert("problem".into(), Value::String(abs.display().to_string()));
    }
    if let Some(s) = common.seed {
        obj.insert("seed".into(), s.into());
    }
    if let Some(Value::Object(ov)) = obj.remove("overrides") {
        for (k, v) in ov {
            set_dotted(&mut value, &k, v)?;
        }
    } else if value.get("overrides").is_some() {
        bail!("`overrides` must be an object of dotted keys");
    }
    for o in &common.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| anyhow!("override `{o}` is not KEY=VALUE"))?;
        let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        set_dotted(&mut value, k.trim(), v)?;
    }
    Ok(Loaded { value, base_dir })
}

/// Sets `a.b.c` in a JSON object, creating intermediate objects.
fn set_dotted(root: &mut Value, key: &str, v: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("bad override key `{key}`");
    }
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        let obj = cur.as_object_mut().ok_or_else(|| anyhow!("override `{key}`: `{p}` is inside a non-object"))?;
        cur = obj.entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    let obj = cur.as_object_mut().ok_or_else(|| anyhow!("override `{key}` targets a non-object"))?;
    obj.insert(parts[parts.len() - 1].to_string(), v);
    Ok(())
}

/// Recursive object merge. A tagged object whose `kind` changes is replaced whole.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            let retag = matches!((b.get("kind"), p.get("kind")), (Some(x), Some(y)) if x != y);
            if retag {
                *b = p;
                return;
            }
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

fn resolve(value: Value, base_dir: &Path) -> Result<(Recipe, Resolved)> {
    let cfg: RunConfig = serde_json::from_value(value).context("invalid run config")?;
    let recipe = recipes::lookup(&cfg.recipe)?;
    let mut settings = serde_json::to_value(recipe.settings())?;
    if let Some(s) = cfg.settings {
        merge(&mut settings, s);
    }
    if let Some(c) = cfg.config {
        merge(&mut settings["config"], c);
    }
    let settings: RecipeSettings = serde_json::from_value(settings).context("invalid settings")?;
    settings.effective_config().validate()?;
    let problem = match cfg.problem {
        Value::String(p) => {
            let path = base_dir.join(&p);
            let text = fs::read_to_string(&path).with_context(|| format!("reading problem {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("invalid problem bundle {}", path.display()))?
        }
        v => serde_json::from_value(v).context("invalid problem bundle")?,
    };
    let seed = match cfg.seed {
        Some(s) => s,
        None => match std::env::var("SEKIT_SEED") {
            Ok(s) => s.trim().parse().with_context(|| format!("SEKIT_SEED={s} is not a u64"))?,
            Err(_) => 0,
        },
    };
    Ok((recipe.clone(), Resolved { recipe: recipe.name().into(), settings, problem, seed }))
}

fn out_dir(flag: &Option<PathBuf>, value: &Value, base_dir: &Path) -> PathBuf {
    match (flag, value.get("out").and_then(Value::as_str)) {
        (Some(p), _) => p.clone(),
        (None, Some(o)) => base_dir.join(o),
        (None, None) => PathBuf::from("sekit-out"),
    }
}

#[derive(Serialize)]
struct FinalModel<'a> {
    recipe: &'a str,
    status: RunStatus,
    model: &'a sekit::TargetModel,
    #[serde(skip_serializing_if = "Option::is_none")]
    discriminator: Option<&'a sekit::adversarial::Discriminator>,
    summary: &'a BTreeMap<String, f64>,
}

/// Runs a resolved config and writes its outputs. Returns the status and summary.
fn execute(recipe: &Recipe, resolved: &Resolved, out: &Path) -> Result<(RunStatus, BTreeMap<String, f64>)> {
    let opts = RecipeOptions { seed: resolved.seed, ..Default::default() };
    let run = run_recipe(recipe, &resolved.settings, &resolved.problem, &opts)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("trace.csv"), run.trace.to_csv())?;
    fs::write(out.join("trace.json"), run.trace.to_json())?;
    let fm = FinalModel {
        recipe: &run.recipe,
        status: run.trace.status,
        model: &run.model,
        discriminator: run.discriminator.as_ref(),
        summary: &run.summary,
    };
    fs::write(out.join("final_model.json"), serde_json::to_string_pretty(&fm)?)?;
    fs::write(out.join("resolved_config.json"), serde_json::to_string_pretty(resolved)?)?;
    Ok((run.trace.status, run.summary))
}

fn cmd_run(args: RunArgs) -> Result<u8> {
    let l = load(&args.common)?;
    if l.value.get("grid").is_some() {
        bail!("config has a `grid` section; use `sekit sweep`");
    }
    let out = out_dir(&args.out, &l.value, &l.base_dir);
    let (recipe, resolved) = resolve(l.value, &l.base_dir)?;
    let (status, _) = execute(&recipe, &resolved, &out)?;
    if status == RunStatus::NonConvergence {
        eprintln!("sekit: run did not converge within max_iter; outputs written to {}", out.display());
        return Ok(EXIT_PARTIAL);
    }
    Ok(EXIT_OK)
}

fn csv_cell(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        v => v.to_string(),
    }
}

/// A sweep cell's status and summary, or its error message.
type CellResult = std::result::Result<(RunStatus, BTreeMap<String, f64>), String>;

fn cmd_sweep(args: SweepArgs) -> Result<u8> {
    let mut l = load(&args.common)?;
    let grid: BTreeMap<String, Vec<Value>> = match l.value.as_object_mut().and_then(|o| o.remove("grid")) {
        Some(g) => serde_json::from_value(g).context("`grid` must map dotted keys to value lists")?,
        None => bail!("sweep config needs a `grid` section"),
    };
    if grid.is_empty() || grid.values().any(Vec::is_empty) {
        bail!("grid is empty");
    }
    let out = out_dir(&args.out, &l.value, &l.base_dir);
    let keys: Vec<&String> = grid.keys().collect();
    let mut cells: Vec<Vec<&Value>> = vec![vec![]];
    for k in &keys {
        cells = cells.into_iter().flat_map(|c| grid[*k].iter().map(move |v| [c.clone(), vec![v]].concat())).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(args.jobs).build()?;
    let width = cells.len().to_string().len().max(3);
    let results: Vec<(String, CellResult)> = pool.install(|| {
        cells
            .par_iter()
            .enumerate()
            .map(|(i, cell)| {
                let name = format!("cell_{i:0width$}");
                let res = (|| {
                    let mut v = l.value.clone();
                    for (k, val) in keys.iter().zip(cell) {
                        set_dotted(&mut v, k, (*val).clone())?;
                    }
                    let (recipe, resolved) = resolve(v, &l.base_dir)?;
                    execute(&recipe, &resolved, &out.join(&name))
                })()
                .map_err(|e| format!("{e:#}"));
                (name, res)
            })
            .collect()
    });
    let metrics: std::collections::BTreeSet<&String> =
        results.iter().filter_map(|(_, r)| r.as_ref().ok()).flat_map(|(_, s)| s.keys()).collect();
    fs::create_dir_all(&out)?;
    let mut w = csv::Writer::from_path(out.join("summary.csv"))?;
    let mut header = vec!["cell".to_string(), "status".to_string()];
    header.extend(keys.iter().map(|k| k.to_string()));
    header.extend(metrics.iter().map(|k| k.to_string()));
    header.push("error".into());
    w.write_record(&header)?;
    let mut failed = 0;
    for ((name, res), cell) in results.iter().zip(&cells) {
        let mut row = vec![name.clone()];
        match res {
            Ok((status, _)) => row.push(
                match status {
                    RunStatus::Converged => "converged",
                    RunStatus::Completed => "completed",
                    RunStatus::NonConvergence => {
                        failed += 1;
                        "nonconvergence"
                    }
                }
                .into(),
            ),
            Err(e) => {
                failed += 1;
                eprintln!("sekit: {name} failed: {e}");
                row.push("failed".into());
            }
        }
        row.extend(cell.iter().map(|v| csv_cell(v)));
        for m in &metrics {
            row.push(match res {
                Ok((_, s)) => s.get(*m).map(|v| v.to_string()).unwrap_or_default(),
                Err(_) => String::new(),
            });
        }
        row.push(res.as_ref().err().cloned().unwrap_or_default());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(if failed > 0 { EXIT_PARTIAL } else { EXIT_OK })
}

fn cmd_check(args: CheckArgs) -> Result<u8> {
    let l = load(&args.common)?;
    let (recipe, resolved) = resolve(l.value, &l.base_dir)?;
    let report =
        check_equivalence_with(&recipe, &resolved.settings, &args.oracle, &resolved.problem, args.tol, resolved.seed)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(if report.pass { EXIT_OK } else { EXIT_CHECK_FAILED })
}

fn cmd_recipes() -> Result<u8> {
    for r in recipes::registry() {
        let aliases = if r.aliases().is_empty() { String::new() } else { format!(" ({})", r.aliases().join(", ")) };
        println!("{}{aliases}: {}", r.name(), r.doc());
    }
    println!();
    for (o, _) in recipes::ORACLES {
        println!("oracle {o}");
    }
    Ok(EXIT_OK)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK });
        }
    };
    let res = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Check(a) => cmd_check(a),
        Command::Recipes => cmd_recipes(),
    };
    match res {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("sekit: {e:#}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}
