//! Command-line interface.
//!
//! Every run writes plain CSV results, a `manifest.json` that records inputs
//! (with SHA-256 digests), options and the seed, and a `timings.json`. The
//! manifest and result files depend only on inputs and options, never on the
//! thread count or wall clock, so repeated runs are byte-identical.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::{load_dataset, LoadOptions};
use crate::hazards::{EstimateOptions, Estimator, HazardSet};
use crate::inference::{
    bootstrap, ci_log_boot, ci_plain_boot, ci_plain_greenwood, ci_quantile_boot, BootstrapOptions, BootstrapResult,
    CiMethod, ConfInterval, Target,
};
use crate::model::{TransitionKind, TransitionModel};
use crate::probtrans::{aalen_johansen_with_variance, ProbTransEstimate};
use crate::ratetable::RateTable;
use crate::simulate::{self, ScenarioConfig, SimOptions, TruthMethod};

/// Directory searched for rate tables given by relative path, and for
/// `ratetable.csv` when no table is given.
pub const RATETABLE_DIR_ENV: &str = "MSREL_RATETABLE_DIR";

#[derive(Debug, Parser)]
#[command(name = "msrel", version, about = "Multi-state models with relative survival")]
pub struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate hazards, transition probabilities and confidence intervals.
    Estimate(EstimateArgs),
    /// Run a simulation scenario and report bias, SE and coverage.
    Simulate(SimulateArgs),
    /// Compute the true values of a simulation scenario.
    Truth(TruthArgs),
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// Long-format data CSV (id, trans, Tstart, Tstop, status, age, sex, date).
    #[arg(long)]
    pub data: PathBuf,
    /// Model JSON (default: illness-death with both death transitions split).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Rate table CSV.
    #[arg(long)]
    pub ratetable: Option<PathBuf>,
    /// Days per time unit of Tstart/Tstop.
    #[arg(long, default_value_t = 1.0)]
    pub time_scale: f64,
    /// Days per unit of the age column.
    #[arg(long, default_value_t = 1.0)]
    pub age_scale: f64,
    /// Start time of the transition probabilities.
    #[arg(long, default_value_t = 0.0)]
    pub s: f64,
    #[arg(long)]
    pub tmax: Option<f64>,
    /// Also report at every whole day.
    #[arg(long)]
    pub dense: bool,
    /// Bootstrap replicates (0: none).
    #[arg(long, default_value_t = 0)]
    pub boot: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Interval methods, comma separated, or `all` (default: plain.G, or all four with --boot).
    #[arg(long, value_delimiter = ',')]
    pub ci: Vec<String>,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    /// Report intervals only at these times (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub at: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthKind {
    Quadrature,
    MonteCarlo,
}

#[derive(Debug, Args)]
pub struct ScenarioArgs {
    /// Built-in scenario name or path to a scenario JSON.
    #[arg(long)]
    pub scenario: String,
    #[arg(long)]
    pub ratetable: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = TruthKind::Quadrature)]
    pub truth: TruthKind,
    /// Relative stopping tolerance of the quadrature.
    #[arg(long, default_value_t = 1e-4)]
    pub truth_tol: f64,
    /// Draws of the Monte Carlo truth.
    #[arg(long, default_value_t = 1_000_000)]
    pub truth_draws: usize,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// Subjects per dataset (default: from the scenario).
    #[arg(long)]
    pub n: Option<usize>,
    /// Replications (default: from the scenario).
    #[arg(long)]
    pub nsim: Option<usize>,
    #[arg(long)]
    pub boot: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    pub ci: Vec<String>,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TruthArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct InputRecord {
    role: &'static str,
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct OutputRecord {
    file: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<O: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    seed: Option<u64>,
    inputs: Vec<InputRecord>,
    options: O,
    flags: Vec<String>,
    outputs: Vec<OutputRecord>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn input(role: &'static str, path: &Path) -> Result<InputRecord> {
    Ok(InputRecord { role, path: path.display().to_string(), sha256: sha256_file(path)? })
}

/// Resolves a rate table: an explicit path (relative paths also tried under
/// the env directory), else `ratetable.csv` in the env directory, else none.
pub fn resolve_ratetable(arg: Option<&Path>) -> Option<PathBuf> {
    let dir = std::env::var_os(RATETABLE_DIR_ENV).map(PathBuf::from);
    match (arg, dir) {
        (Some(p), Some(d)) if !p.exists() && p.is_relative() => Some(d.join(p)),
        (Some(p), _) => Some(p.to_path_buf()),
        (None, Some(d)) => Some(d.join("ratetable.csv")),
        (None, None) => None,
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    Ok(BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))
}

fn parse_methods(raw: &[String], default: &[CiMethod]) -> Result<Vec<CiMethod>> {
    if raw.is_empty() {
        return Ok(default.to_vec());
    }
    if raw.iter().any(|r| r.trim() == "all") {
        return Ok(CiMethod::ALL.to_vec());
    }
    let mut out = Vec::new();
    for r in raw {
        let m: CiMethod = r.trim().parse()?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    Ok(out)
}

fn check_level(level: f64) -> Result<()> {
    if !(level > 0.0 && level < 1.0) {
        bail!("--level must lie in (0, 1), got {level}");
    }
    Ok(())
}

fn write_manifest<O: Serialize>(dir: &Path, mut m: Manifest<O>, files: &[&str]) -> Result<()> {
    for f in files {
        m.outputs.push(OutputRecord { file: f.to_string(), sha256: sha256_file(&dir.join(f))? });
    }
    let mut w = create(dir, "manifest.json")?;
    serde_json::to_writer_pretty(&mut w, &m)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn write_timings(dir: &Path, threads: usize, phases: &[(&str, f64)]) -> Result<()> {
    let mut map = serde_json::Map::new();
    map.insert("threads".into(), threads.into());
    for (k, v) in phases {
        map.insert(format!("{k}_seconds"), (*v).into());
    }
    let mut w = create(dir, "timings.json")?;
    serde_json::to_writer_pretty(&mut w, &map)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn fresh_seed() -> u64 {
    let seed = rand::random::<u64>();
    eprintln!("seed: {seed}");
    seed
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

pub fn run(cli: Cli) -> Result<i32> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be positive");
        }
        // ignore a second initialisation attempt within one process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Estimate(a) => run_estimate(&a),
        Command::Simulate(a) => run_simulate(&a),
        Command::Truth(a) => run_truth(&a),
    }
}

#[derive(Debug, Serialize)]
struct EstimateManifestOptions {
    time_scale: f64,
    age_scale: f64,
    s: f64,
    tmax: Option<f64>,
    dense: bool,
    boot: usize,
    ci: Vec<String>,
    level: f64,
    at: Vec<f64>,
}

pub fn run_estimate(a: &EstimateArgs) -> Result<i32> {
    let start = Instant::now();
    check_level(a.level)?;
    let default_ci: &[CiMethod] = if a.boot > 0 { &CiMethod::ALL } else { &[CiMethod::PlainGreenwood] };
    let methods = parse_methods(&a.ci, default_ci)?;
    if methods.iter().any(|m| m.needs_bootstrap()) && a.boot < 2 {
        bail!("bootstrap intervals need --boot of at least 2");
    }
    let seed = (a.boot > 0).then(|| a.seed.unwrap_or_else(fresh_seed));

    let mut inputs = vec![input("data", &a.data)?];
    let model = match &a.model {
        Some(p) => {
            inputs.push(input("model", p)?);
            TransitionModel::from_path(p).with_context(|| format!("model {}", p.display()))?
        }
        None => TransitionModel::illness_death(),
    };
    let model = Arc::new(model);
    let table = match resolve_ratetable(a.ratetable.as_deref()) {
        Some(p) => {
            inputs.push(input("ratetable", &p)?);
            RateTable::load(&p).with_context(|| format!("rate table {}", p.display()))?
        }
        None if model.splits().is_empty() => RateTable::zero(),
        None => bail!("the model splits transitions; give --ratetable or set {RATETABLE_DIR_ENV}"),
    };
    let load = LoadOptions { time_scale: a.time_scale, age_scale: a.age_scale, ..Default::default() };
    let data = load_dataset(&a.data, model.clone(), &load).with_context(|| format!("data {}", a.data.display()))?;
    let t_load = start.elapsed().as_secs_f64();

    let opts = EstimateOptions { dense: a.dense, extra_times: a.at.clone(), t_max: a.tmax };
    let estimator = Estimator::new(&data, &table, &opts)?;
    let hs = estimator.estimate()?;
    let p = aalen_johansen_with_variance(&hs, a.s, a.tmax)?;
    let t_est = start.elapsed().as_secs_f64() - t_load;

    let targets = ci_targets(&model);
    let boot = match seed {
        Some(seed) => {
            let bo = BootstrapOptions { b: a.boot, seed, s: a.s, t_max: a.tmax, at: None };
            Some(bootstrap(&estimator, &hs, &targets, &bo)?)
        }
        None => None,
    };
    let t_boot = start.elapsed().as_secs_f64() - t_load - t_est;

    if methods.contains(&CiMethod::PlainGreenwood) && !model.splits().is_empty() {
        eprintln!(
            "warning: plain.G treats population hazards as known; intervals for population transitions have zero \
             width and coverage of population-related targets is anti-conservative"
        );
    }

    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_hazards(&a.out, &model, &hs)?;
    write_probs(&a.out, &model, &p)?;
    write_ci(&a.out, &model, &hs, &p, &targets, boot.as_ref(), &methods, a.level, &a.at)?;

    let flags = flag_messages(&model, &hs, &p);
    for f in &flags {
        eprintln!("warning: {f}");
    }
    let options = EstimateManifestOptions {
        time_scale: a.time_scale,
        age_scale: a.age_scale,
        s: a.s,
        tmax: a.tmax,
        dense: a.dense,
        boot: a.boot,
        ci: methods.iter().map(|m| m.to_string()).collect(),
        level: a.level,
        at: a.at.clone(),
    };
    let manifest = Manifest {
        tool: "msrel",
        version: env!("CARGO_PKG_VERSION"),
        command: "estimate",
        seed,
        inputs,
        options,
        flags: flags.clone(),
        outputs: Vec::new(),
    };
    write_manifest(&a.out, manifest, &["hazards.csv", "probtrans.csv", "ci.csv"])?;
    write_timings(
        &a.out,
        rayon::current_num_threads(),
        &[("load", t_load), ("estimate", t_est), ("bootstrap", t_boot), ("total", start.elapsed().as_secs_f64())],
    )?;
    Ok(0)
}

fn flag_messages(model: &TransitionModel, hs: &HazardSet, p: &ProbTransEstimate) -> Vec<String> {
    let mut out = Vec::new();
    for (id, t) in &hs.flags().infinite_variance {
        out.push(format!("infinite Greenwood variance for {} from t = {t}", model.trans_label(*id)));
    }
    for (id, t) in &hs.flags().negative_excess {
        out.push(format!("negative excess cumulative hazard for {} from t = {t}", model.trans_label(*id)));
    }
    let ext = model.ext_states();
    for (t, i, j) in &p.flags.negative {
        out.push(format!("negative transition probability {}->{} from t = {t}", ext[*i].label, ext[*j].label));
    }
    out
}

/// Every extended hazard, and probabilities out of every transient state.
fn ci_targets(model: &TransitionModel) -> Vec<Target> {
    let ext = model.ext_states();
    let mut t: Vec<Target> = model.ext_transitions().iter().map(|e| Target::Hazard(e.id)).collect();
    for from in (0..ext.len()).filter(|&i| !ext[i].absorbing) {
        t.extend((0..ext.len()).map(|to| Target::Prob { from, to }));
    }
    t
}

fn kind_name(kind: TransitionKind) -> &'static str {
    match kind {
        TransitionKind::Observed => "observed",
        TransitionKind::Excess => "excess",
        TransitionKind::Population => "population",
    }
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn write_hazards(dir: &Path, model: &TransitionModel, hs: &HazardSet) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(dir, "hazards.csv")?);
    w.write_record(["trans", "label", "kind", "time", "cumhaz", "variance", "flag"])?;
    let parents = hs.observed().iter().filter(|e| model.split_of(e.trans).is_some());
    for e in hs.extended().iter().chain(parents) {
        let label = model.trans_label(e.trans);
        for ((t, v), var) in e.times.iter().zip(&e.values).zip(&e.variance) {
            let flag = if var.is_infinite() {
                "infinite_variance"
            } else if *v < 0.0 {
                "negative"
            } else {
                ""
            };
            w.write_record([
                e.trans.to_string(),
                label.clone(),
                kind_name(e.kind).into(),
                num(*t),
                num(*v),
                num(*var),
                flag.into(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_probs(dir: &Path, model: &TransitionModel, p: &ProbTransEstimate) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(dir, "probtrans.csv")?);
    w.write_record(["s", "time", "from", "to", "prob", "variance", "flag"])?;
    let ext = model.ext_states();
    let n = p.n_states();
    for (k, &t) in p.times.iter().enumerate() {
        for from in (0..n).filter(|&i| !ext[i].absorbing) {
            for to in 0..n {
                let var = p.variance.as_ref().map_or(f64::NAN, |v| v[k][from * n + to]);
                let prob = p.matrices[k][from * n + to];
                w.write_record([
                    num(p.s),
                    num(t),
                    ext[from].label.clone(),
                    ext[to].label.clone(),
                    num(prob),
                    num(var),
                    if prob < 0.0 { "negative" } else { "" }.into(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn write_ci(
    dir: &Path,
    model: &TransitionModel,
    hs: &HazardSet,
    p: &ProbTransEstimate,
    targets: &[Target],
    boot: Option<&BootstrapResult>,
    methods: &[CiMethod],
    level: f64,
    at: &[f64],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(dir, "ci.csv")?);
    w.write_record(["target", "time", "estimate", "method", "level", "lower", "upper", "flag"])?;
    let ext = model.ext_states();
    for (j, target) in targets.iter().enumerate() {
        let (label, times, est, gvar): (String, Vec<f64>, Vec<f64>, Vec<f64>) = match *target {
            Target::Hazard(id) => {
                let e = hs.get(id).expect("target from the model");
                let times = boot.map_or_else(|| e.times.clone(), |b| b.times[j].clone());
                let est = times.iter().map(|&t| e.value_at(t)).collect();
                let var = times.iter().map(|&t| e.variance_at(t)).collect();
                (format!("L:{}", model.trans_label(id)), times, est, var)
            }
            Target::Prob { from, to } => {
                let times = boot.map_or_else(|| p.times.clone(), |b| b.times[j].clone());
                let est = times.iter().map(|&t| p.entry_at(t, from, to)).collect();
                let var = times.iter().map(|&t| p.variance_at(t, from, to).unwrap_or(f64::NAN)).collect();
                (format!("P:{}->{}", ext[from].label, ext[to].label), times, est, var)
            }
        };
        let keep: Vec<usize> = (0..times.len()).filter(|&k| at.is_empty() || at.contains(&times[k])).collect();
        for &m in methods {
            let ci: ConfInterval = match m {
                CiMethod::PlainGreenwood => ci_plain_greenwood(&est, &gvar, level),
                CiMethod::PlainBoot => ci_plain_boot(&est, boot.expect("bootstrap"), j, level),
                CiMethod::LogBoot => ci_log_boot(&est, boot.expect("bootstrap"), j, level),
                CiMethod::QuantileBoot => ci_quantile_boot(boot.expect("bootstrap"), j, level),
            };
            for &k in &keep {
                let iv = ci.intervals[k];
                w.write_record([
                    label.clone(),
                    num(times[k]),
                    num(est[k]),
                    m.to_string(),
                    num(level),
                    num(iv.lower),
                    num(iv.upper),
                    serde_json::to_value(iv.flag)?.as_str().unwrap_or_default().to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

struct LoadedScenario {
    config: ScenarioConfig,
    table: RateTable,
    inputs: Vec<InputRecord>,
    truth: TruthMethod,
}

fn load_scenario(a: &ScenarioArgs, seed: u64) -> Result<LoadedScenario> {
    let config = ScenarioConfig::resolve(&a.scenario)?;
    let mut inputs = Vec::new();
    if Path::new(&a.scenario).exists() {
        inputs.push(input("scenario", Path::new(&a.scenario))?);
    }
    let table = match resolve_ratetable(a.ratetable.as_deref()) {
        Some(p) => {
            inputs.push(input("ratetable", &p)?);
            RateTable::load(&p).with_context(|| format!("rate table {}", p.display()))?
        }
        None => RateTable::demo(),
    };
    let truth = match a.truth {
        TruthKind::Quadrature => TruthMethod::Quadrature { tol: a.truth_tol, max_nodes: 1024 },
        TruthKind::MonteCarlo => TruthMethod::MonteCarlo { draws: a.truth_draws, seed },
    };
    Ok(LoadedScenario { config, table, inputs, truth })
}

#[derive(Debug, Serialize)]
struct ScenarioManifestOptions {
    scenario: ScenarioConfig,
    ratetable: &'static str,
    truth: TruthMethod,
    n_sim: Option<usize>,
    boot: Option<usize>,
    ci: Option<Vec<String>>,
    level: Option<f64>,
    censoring_rate_per_year: Option<f64>,
}

pub fn run_simulate(a: &SimulateArgs) -> Result<i32> {
    let start = Instant::now();
    check_level(a.level)?;
    let probe = ScenarioConfig::resolve(&a.scenario.scenario)?;
    let seed = a.seed.or(probe.seed).unwrap_or_else(fresh_seed);
    let LoadedScenario { mut config, table, inputs, truth } = load_scenario(&a.scenario, seed)?;
    if let Some(n) = a.n {
        config.n = n;
    }
    config.seed = Some(seed);
    config.validate()?;
    let mut opts = SimOptions::from_config(&config);
    opts.seed = seed;
    opts.truth = truth;
    opts.level = a.level;
    opts.methods = parse_methods(&a.ci, &CiMethod::ALL)?;
    if let Some(n) = a.nsim {
        opts.n_sim = n;
    }
    if let Some(b) = a.boot {
        opts.b = b;
    }
    if opts.n_sim == 0 {
        bail!("--nsim must be positive");
    }
    if opts.methods.iter().any(|m| m.needs_bootstrap()) && opts.b < 2 {
        bail!("bootstrap intervals need --boot of at least 2");
    }
    config.n_sim = opts.n_sim;
    config.bootstrap = opts.b;

    let out = simulate::run_simulation(&config, &table, &opts)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    out.report.write_csv(create(&a.out, "report.csv")?)?;
    out.report.write_long_csv(create(&a.out, "report_long.csv")?)?;
    out.truth.write_csv(create(&a.out, "truth.csv")?)?;
    let options = ScenarioManifestOptions {
        ratetable: if inputs.iter().any(|i| i.role == "ratetable") { "file" } else { "built-in demo" },
        scenario: config,
        truth,
        n_sim: Some(opts.n_sim),
        boot: Some(opts.b),
        ci: Some(opts.methods.iter().map(|m| m.to_string()).collect()),
        level: Some(opts.level),
        censoring_rate_per_year: Some(out.censoring_rate * crate::ratetable::DAYS_PER_YEAR),
    };
    let manifest = Manifest {
        tool: "msrel",
        version: env!("CARGO_PKG_VERSION"),
        command: "simulate",
        seed: Some(seed),
        inputs,
        options,
        flags: Vec::new(),
        outputs: Vec::new(),
    };
    write_manifest(&a.out, manifest, &["report.csv", "report_long.csv", "truth.csv"])?;
    write_timings(&a.out, rayon::current_num_threads(), &[("total", start.elapsed().as_secs_f64())])?;
    Ok(0)
}

pub fn run_truth(a: &TruthArgs) -> Result<i32> {
    let start = Instant::now();
    let probe = ScenarioConfig::resolve(&a.scenario.scenario)?;
    let seed = probe.seed.unwrap_or_default();
    let LoadedScenario { config, table, inputs, truth } = load_scenario(&a.scenario, seed)?;
    let tv = simulate::true_values(&config, &table, truth)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    tv.write_csv(create(&a.out, "truth.csv")?)?;
    let options = ScenarioManifestOptions {
        ratetable: if inputs.iter().any(|i| i.role == "ratetable") { "file" } else { "built-in demo" },
        scenario: config,
        truth,
        n_sim: None,
        boot: None,
        ci: None,
        level: None,
        censoring_rate_per_year: None,
    };
    let manifest = Manifest {
        tool: "msrel",
        version: env!("CARGO_PKG_VERSION"),
        command: "truth",
        seed: matches!(truth, TruthMethod::MonteCarlo { .. }).then_some(seed),
        inputs,
        options,
        flags: Vec::new(),
        outputs: Vec::new(),
    };
    write_manifest(&a.out, manifest, &["truth.csv"])?;
    write_timings(&a.out, rayon::current_num_threads(), &[("total", start.elapsed().as_secs_f64())])?;
    Ok(0)
}
