//! Simulation of illness-death cohorts with population mortality.
//!
//! Each subject gets age, sex and a calendar origin date. Relapse, excess
//! non-relapse death and population non-relapse death compete from time 0;
//! after a relapse at `r`, excess and population death after relapse
//! compete from `r`. Population deaths follow the rate table, excess and
//! relapse times follow exponential or Weibull hazards, optionally scaled by
//! `exp(beta * (age - mean age))`. Only the observed state sequence is kept,
//! subject to exponential censoring and a fixed follow-up horizon. Times are
//! in days; scenario rates are per year.

pub mod evaluate;
pub mod truth;

use std::path::Path;
use std::sync::Arc;

use chrono::{Days, NaiveDate};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Demographics, EventDataset, Sex, Subject, Visit};
use crate::model::{StateId, TransId, TransitionModel};
use crate::ratetable::{IndividualHazard, RateTable, DAYS_PER_YEAR};

pub use evaluate::{evaluate, run_replication, run_simulation, PerfRow, PerformanceReport, ReplicationResult, SimOptions, SimulationOutput};
pub use truth::{sim_targets, target_label, true_values, true_values_at, TrueValues, TruthMethod};

/// Evaluation times in years.
pub const EVAL_YEARS: [f64; 4] = [1.0, 2.0, 5.0, 10.0];

/// Evaluation times in whole days.
pub fn eval_days() -> Vec<f64> {
    EVAL_YEARS.iter().map(|y| (y * DAYS_PER_YEAR).round()).collect()
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed scenario JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unknown built-in scenario `{0}`")]
    UnknownScenario(String),
    #[error("truth integration did not converge within {nodes} nodes per axis (last change {change:e})")]
    NoConvergence { nodes: usize, change: f64 },
    #[error("censoring calibration failed: {0}")]
    Calibration(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Hazard(#[from] crate::hazards::HazardError),
    #[error(transparent)]
    ProbTrans(#[from] crate::probtrans::ProbTransError),
    #[error(transparent)]
    Inference(#[from] crate::inference::InferenceError),
}

/// Baseline hazard; `rate` is per year (per year to the `shape` for Weibull).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "lowercase")]
pub enum BaseHazard {
    Exponential { rate: f64 },
    /// Cumulative hazard `rate * t^shape`, `t` in years.
    Weibull { rate: f64, shape: f64 },
}

impl BaseHazard {
    /// Cumulative hazard at `t` days.
    pub fn cumulative_days(&self, t: f64) -> f64 {
        let y = t / DAYS_PER_YEAR;
        match *self {
            BaseHazard::Exponential { rate } => rate * y,
            BaseHazard::Weibull { rate, shape } => rate * y.powf(shape),
        }
    }

    /// Event time in days with hazard scaled by `mult`, given survival to `after` days.
    pub fn sample_after<R: Rng + ?Sized>(&self, mult: f64, after: f64, rng: &mut R) -> f64 {
        match *self {
            BaseHazard::Exponential { rate } => after + sample_exp(rng) / (rate * mult) * DAYS_PER_YEAR,
            BaseHazard::Weibull { rate, shape } => {
                sample_weibull_left_truncated(rate * mult, shape, after / DAYS_PER_YEAR, rng) * DAYS_PER_YEAR
            }
        }
    }

    fn validate(&self) -> Result<(), String> {
        match *self {
            BaseHazard::Exponential { rate } if rate > 0.0 && rate.is_finite() => Ok(()),
            BaseHazard::Weibull { rate, shape } if rate > 0.0 && shape > 0.0 && rate.is_finite() && shape.is_finite() => Ok(()),
            _ => Err(format!("invalid hazard {self:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionParams {
    #[serde(flatten)]
    pub hazard: BaseHazard,
    /// Log hazard ratio per year of age, centred at the mean age.
    #[serde(default)]
    pub beta_age: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioTransitions {
    pub relapse: TransitionParams,
    pub nrm_excess: TransitionParams,
    pub dar_excess: TransitionParams,
}

fn default_fraction() -> f64 {
    0.2
}
fn default_follow_up() -> f64 {
    10.0
}
fn default_n_sim() -> usize {
    200
}
fn default_boot() -> usize {
    100
}
fn default_origin() -> [NaiveDate; 2] {
    [NaiveDate::from_ymd_opt(1990, 1, 1).expect("date"), NaiveDate::from_ymd_opt(2000, 1, 1).expect("date")]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub n: usize,
    #[serde(default = "default_n_sim")]
    pub n_sim: usize,
    /// Uniform age at origin, years.
    pub age_range: [f64; 2],
    /// Uniform origin date range `[from, to)`.
    #[serde(default = "default_origin")]
    pub origin_range: [NaiveDate; 2],
    pub transitions: ScenarioTransitions,
    /// Censoring rate per year; calibrated from `censored_fraction` when absent.
    #[serde(default)]
    pub censoring_rate: Option<f64>,
    #[serde(default = "default_fraction")]
    pub censored_fraction: f64,
    #[serde(default = "default_follow_up")]
    pub follow_up_years: f64,
    #[serde(default = "default_boot")]
    pub bootstrap: usize,
    /// Run seed used when none is given on the command line.
    #[serde(default)]
    pub seed: Option<u64>,
}

const BUILTIN: [(&str, &str); 5] = [
    ("exp.small", include_str!("../../scenarios/exp.small.json")),
    ("exp.large", include_str!("../../scenarios/exp.large.json")),
    ("weibull", include_str!("../../scenarios/weibull.json")),
    ("cov.eff.pos", include_str!("../../scenarios/cov.eff.pos.json")),
    ("cov.eff.neg", include_str!("../../scenarios/cov.eff.neg.json")),
];

impl ScenarioConfig {
    pub fn builtin_names() -> impl Iterator<Item = &'static str> {
        BUILTIN.iter().map(|b| b.0)
    }

    pub fn builtin(name: &str) -> Result<Self, SimError> {
        let (_, json) = BUILTIN.iter().find(|b| b.0 == name).ok_or_else(|| SimError::UnknownScenario(name.to_string()))?;
        Self::from_json_str(json)
    }

    pub fn from_json_str(s: &str) -> Result<Self, SimError> {
        let c: Self = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimError> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    /// Built-in name or path to a JSON file.
    pub fn resolve(name_or_path: &str) -> Result<Self, SimError> {
        if BUILTIN.iter().any(|b| b.0 == name_or_path) {
            Self::builtin(name_or_path)
        } else {
            Self::load(name_or_path)
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        if self.n == 0 {
            return bad("n must be positive".into());
        }
        let [a0, a1] = self.age_range;
        if !(a0 >= 0.0 && a1 >= a0 && a1.is_finite()) {
            return bad(format!("invalid age range [{a0}, {a1}]"));
        }
        if self.origin_range[1] <= self.origin_range[0] {
            return bad("empty origin date range".into());
        }
        if !(self.follow_up_years > 0.0) {
            return bad("follow-up must be positive".into());
        }
        if !(self.censored_fraction > 0.0 && self.censored_fraction < 1.0) {
            return bad(format!("censored fraction {} outside (0, 1)", self.censored_fraction));
        }
        if let Some(r) = self.censoring_rate {
            if !(r >= 0.0 && r.is_finite()) {
                return bad(format!("invalid censoring rate {r}"));
            }
        }
        let covariates = self.name.starts_with("cov.eff");
        for (label, t) in self.transition_list() {
            t.hazard.validate().map_err(SimError::Config)?;
            if !t.beta_age.is_finite() {
                return bad(format!("{label}: invalid beta"));
            }
            if t.beta_age != 0.0 && !covariates {
                return bad(format!("{label}: covariate effects are only allowed in cov.eff scenarios"));
            }
            if t.beta_age != 0.0 && matches!(t.hazard, BaseHazard::Weibull { .. }) {
                return bad(format!("{label}: covariate effects are not combined with Weibull hazards"));
            }
        }
        Ok(())
    }

    fn transition_list(&self) -> [(&'static str, &TransitionParams); 3] {
        [
            ("relapse", &self.transitions.relapse),
            ("nrm_excess", &self.transitions.nrm_excess),
            ("dar_excess", &self.transitions.dar_excess),
        ]
    }

    pub fn horizon_days(&self) -> f64 {
        self.follow_up_years * DAYS_PER_YEAR
    }

    pub fn mean_age(&self) -> f64 {
        (self.age_range[0] + self.age_range[1]) / 2.0
    }

    pub fn origin_span_days(&self) -> u64 {
        (self.origin_range[1] - self.origin_range[0]).num_days() as u64
    }

    /// Hazard multipliers `(relapse, excess NRM, excess DaR)` for an age in years.
    pub fn multipliers(&self, age_years: f64) -> [f64; 3] {
        let c = age_years - self.mean_age();
        let t = &self.transitions;
        [(t.relapse.beta_age * c).exp(), (t.nrm_excess.beta_age * c).exp(), (t.dar_excess.beta_age * c).exp()]
    }
}

pub fn sample_exp<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    -(1.0 - rng.gen::<f64>()).ln()
}

/// Draw from a Weibull with cumulative hazard `a t^b` conditional on exceeding `r`.
pub fn sample_weibull_left_truncated<R: Rng + ?Sized>(a: f64, b: f64, r: f64, rng: &mut R) -> f64 {
    assert!(a > 0.0 && b > 0.0 && r >= 0.0);
    let u: f64 = 1.0 - rng.gen::<f64>();
    let t = (r.powf(b) - u.ln() / a).powf(1.0 / b);
    // guard against rounding to r when -ln(u)/a is negligible next to r^b
    if t > r {
        t
    } else {
        f64::from_bits(r.to_bits() + 1)
    }
}

/// Population death time after `after` days by inverse transform of the daily hazard.
pub fn sample_population_death<R: Rng + ?Sized>(ind: &IndividualHazard<'_>, after: f64, rng: &mut R) -> f64 {
    let mut e = sample_exp(rng);
    for p in ind.pieces(after.floor() as i64, i64::MAX) {
        let lo = (p.start as f64).max(after);
        if p.end == i64::MAX {
            return if p.rate > 0.0 { lo + e / p.rate } else { f64::INFINITY };
        }
        let mass = p.rate * (p.end as f64 - lo);
        if mass >= e && p.rate > 0.0 {
            return lo + e / p.rate;
        }
        e -= mass;
    }
    f64::INFINITY
}

/// Latent event times of one subject, in days; `None` when no relapse.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Latent {
    pub demographics: Demographics,
    pub relapse: f64,
    pub nrm_excess: f64,
    pub nrm_population: f64,
    pub after_relapse: Option<(f64, f64)>,
}

impl Latent {
    /// Time of leaving the study alive-state sequence (death), infinite when never.
    pub fn absorption(&self) -> f64 {
        let first = self.relapse.min(self.nrm_excess).min(self.nrm_population);
        match self.after_relapse {
            Some((e, p)) if first == self.relapse => e.min(p),
            _ => first,
        }
    }
}

pub fn draw_demographics<R: Rng + ?Sized>(config: &ScenarioConfig, rng: &mut R) -> Demographics {
    let sex = if rng.gen::<f64>() < 0.5 { Sex::Male } else { Sex::Female };
    let [a0, a1] = config.age_range;
    let age = a0 + (a1 - a0) * rng.gen::<f64>();
    let offset = rng.gen_range(0..config.origin_span_days());
    Demographics { age_days: age * DAYS_PER_YEAR, sex, origin: config.origin_range[0] + Days::new(offset) }
}

pub fn draw_latent<R: Rng + ?Sized>(config: &ScenarioConfig, table: &RateTable, rng: &mut R) -> Latent {
    let demo = draw_demographics(config, rng);
    let m = config.multipliers(demo.age_days / DAYS_PER_YEAR);
    let t = &config.transitions;
    let ind = table.individual(&demo);
    let relapse = t.relapse.hazard.sample_after(m[0], 0.0, rng);
    let nrm_excess = t.nrm_excess.hazard.sample_after(m[1], 0.0, rng);
    let nrm_population = sample_population_death(&ind, 0.0, rng);
    let after_relapse = (relapse < nrm_excess.min(nrm_population)).then(|| {
        let e = t.dar_excess.hazard.sample_after(m[2], relapse, rng);
        let p = sample_population_death(&ind, relapse, rng);
        (e, p)
    });
    Latent { demographics: demo, relapse, nrm_excess, nrm_population, after_relapse }
}

/// Observed trajectory of a subject censored at `end` days.
pub fn observe(latent: &Latent, id: String, end: f64) -> Subject {
    let v = |state: usize, entry: f64, exit: f64, event: Option<u32>| Visit { state: StateId(state), entry, exit, event: event.map(TransId) };
    let first = latent.relapse.min(latent.nrm_excess).min(latent.nrm_population);
    let mut visits = Vec::with_capacity(2);
    if first >= end {
        visits.push(v(0, 0.0, end, None));
    } else if first == latent.relapse {
        visits.push(v(0, 0.0, first, Some(1)));
        let (e, p) = latent.after_relapse.expect("drawn on relapse");
        let death = e.min(p);
        if death >= end {
            visits.push(v(1, first, end, None));
        } else {
            visits.push(v(1, first, death, Some(3)));
        }
    } else {
        visits.push(v(0, 0.0, first, Some(2)));
    }
    Subject { id, demographics: Some(latent.demographics), visits }
}

/// One simulated subject; `censoring_rate` is per day.
pub fn generate_subject<R: Rng + ?Sized>(
    config: &ScenarioConfig,
    table: &RateTable,
    censoring_rate: f64,
    id: String,
    rng: &mut R,
) -> Subject {
    let latent = draw_latent(config, table, rng);
    let c = if censoring_rate > 0.0 { sample_exp(rng) / censoring_rate } else { f64::INFINITY };
    observe(&latent, id, c.min(config.horizon_days()))
}

/// Simulated cohort of `config.n` subjects under the illness-death model.
pub fn generate_dataset<R: Rng + ?Sized>(
    config: &ScenarioConfig,
    table: &RateTable,
    censoring_rate: f64,
    rng: &mut R,
) -> Result<EventDataset, SimError> {
    let subjects = (1..=config.n).map(|i| generate_subject(config, table, censoring_rate, i.to_string(), rng)).collect();
    Ok(EventDataset::new(Arc::new(TransitionModel::illness_death()), subjects)?)
}

/// Fixed so that the censoring rate depends on the scenario only, not on the run seed.
const CALIBRATION_SEED: u64 = 0x6365_6e73;

/// Per-day censoring rate: the configured one, or one calibrated so the
/// expected share of subjects censored before death and before the
/// horizon equals `censored_fraction`.
pub fn censoring_rate(config: &ScenarioConfig, table: &RateTable) -> Result<f64, SimError> {
    if let Some(r) = config.censoring_rate {
        return Ok(r / DAYS_PER_YEAR);
    }
    calibrate_censoring(config, table, 20_000, CALIBRATION_SEED)
}

/// Bisection on the censoring rate with common random numbers over `m` latent subjects.
pub fn calibrate_censoring(config: &ScenarioConfig, table: &RateTable, m: usize, seed: u64) -> Result<f64, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = config.horizon_days();
    // a subject is randomly censored iff its censoring time E / rate falls before this
    let limits: Vec<(f64, f64)> = (0..m)
        .map(|_| {
            let l = draw_latent(config, table, &mut rng);
            (l.absorption().min(horizon), sample_exp(&mut rng))
        })
        .collect();
    let frac = |rate: f64| limits.iter().filter(|(lim, e)| e / rate < *lim).count() as f64 / m as f64;
    let target = config.censored_fraction;
    let (mut lo, mut hi) = (0.0, 1e-4);
    while frac(hi) < target {
        hi *= 2.0;
        if hi > 1.0 {
            return Err(SimError::Calibration(format!("cannot censor {target} of subjects")));
        }
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if frac(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
