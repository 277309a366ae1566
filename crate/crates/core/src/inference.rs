//! Bootstrap variances and confidence intervals.
//!
//! Replicates resample subjects with replacement, represented as subject
//! multiplicities, and re-run the full estimation on the replicate's own
//! event grid. Replicate curves are then read at the original grid times.
//! Replicate `b` draws from ChaCha8 stream `b` of the run seed, so results do
//! not depend on how replicates are scheduled across threads.
//!
//! Quantile intervals use linear interpolation between order statistics:
//! for sorted values `x[0..m]` and probability `p`, with `h = p (m - 1)`,
//! the quantile is `x[floor h] + (h - floor h) (x[floor h + 1] - x[floor h])`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::hazards::{Estimator, HazardError, HazardSet};
use crate::model::TransId;
use crate::probtrans::{aalen_johansen, ProbTransError, ProbTransEstimate};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("at least 2 bootstrap replicates are required, got {0}")]
    TooFewReplicates(usize),
    #[error("unknown target transition {0}")]
    UnknownTarget(TransId),
    #[error("unknown confidence interval method `{0}`")]
    UnknownMethod(String),
    #[error(transparent)]
    Hazard(#[from] HazardError),
    #[error(transparent)]
    ProbTrans(#[from] ProbTransError),
}

/// A quantity tracked across replicates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Target {
    /// Cumulative hazard of an extended transition.
    Hazard(TransId),
    /// Entry of `P(s, t)`, as extended-state indices.
    Prob { from: usize, to: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapOptions {
    pub b: usize,
    pub seed: u64,
    /// Start time for probability targets.
    pub s: f64,
    pub t_max: Option<f64>,
    /// Read replicates only at these times instead of the original grid.
    pub at: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult {
    pub b: usize,
    pub seed: Option<u64>,
    pub targets: Vec<Target>,
    /// Original grid times per target.
    pub times: Vec<Vec<f64>>,
    /// `values[target][time][replicate]`; NaN marks a missing value.
    pub values: Vec<Vec<Vec<f64>>>,
    /// Replicates with at least one missing value.
    pub n_incomplete: usize,
}

impl BootstrapResult {
    /// Non-missing replicate values of a target at one time index.
    pub fn replicates(&self, target: usize, k: usize) -> Vec<f64> {
        self.values[target][k].iter().copied().filter(|v| !v.is_nan()).collect()
    }

    /// Sample variance over non-missing replicates (denominator count - 1).
    pub fn variance(&self, target: usize) -> Vec<Option<f64>> {
        (0..self.times[target].len()).map(|k| sample_variance(&self.replicates(target, k))).collect()
    }

    pub fn target_index(&self, target: Target) -> Option<usize> {
        self.targets.iter().position(|&t| t == target)
    }
}

pub fn sample_variance(x: &[f64]) -> Option<f64> {
    if x.len() < 2 {
        return None;
    }
    let m = x.len() as f64;
    let mean = x.iter().sum::<f64>() / m;
    Some(x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0))
}

/// Multiplicities of one resample of `n` subjects with replacement.
pub fn resample_weights(n: usize, seed: u64, replicate: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate);
    let mut w = vec![0.0; n];
    for _ in 0..n {
        w[rng.gen_range(0..n)] += 1.0;
    }
    w
}

/// Seeded bootstrap of the given targets.
pub fn bootstrap(
    estimator: &Estimator,
    original: &HazardSet,
    targets: &[Target],
    opts: &BootstrapOptions,
) -> Result<BootstrapResult, InferenceError> {
    if opts.b < 2 {
        return Err(InferenceError::TooFewReplicates(opts.b));
    }
    let n = estimator.n_subjects();
    let plans: Vec<Vec<f64>> = (0..opts.b as u64).into_par_iter().map(|r| resample_weights(n, opts.seed, r)).collect();
    let mut res = bootstrap_from_weights(estimator, original, targets, &plans, opts.s, opts.t_max, opts.at.as_deref())?;
    res.seed = Some(opts.seed);
    Ok(res)
}

/// Bootstrap over explicit resamples given as subject multiplicities.
pub fn bootstrap_from_weights(
    estimator: &Estimator,
    original: &HazardSet,
    targets: &[Target],
    plans: &[Vec<f64>],
    s: f64,
    t_max: Option<f64>,
    at: Option<&[f64]>,
) -> Result<BootstrapResult, InferenceError> {
    let model = estimator.model();
    let hazard_idx: Vec<Option<usize>> = targets
        .iter()
        .map(|t| match *t {
            Target::Hazard(id) => model
                .ext_transitions()
                .iter()
                .position(|e| e.id == id)
                .map(Some)
                .ok_or(InferenceError::UnknownTarget(id)),
            Target::Prob { .. } => Ok(None),
        })
        .collect::<Result<_, _>>()?;
    let need_prob = targets.iter().any(|t| matches!(t, Target::Prob { .. }));
    let times: Vec<Vec<f64>> = match at {
        Some(at) => vec![at.to_vec(); targets.len()],
        None => {
            let prob_times = if need_prob { aalen_johansen(original, s, t_max)?.times } else { Vec::new() };
            targets
                .iter()
                .map(|t| match t {
                    Target::Hazard(_) => original.times().to_vec(),
                    Target::Prob { .. } => prob_times.clone(),
                })
                .collect()
        }
    };

    let run = |w: &Vec<f64>| -> Result<Vec<Vec<f64>>, InferenceError> {
        let hs = estimator.estimate_weighted(Some(w))?;
        let p: Option<ProbTransEstimate> = if need_prob { Some(aalen_johansen(&hs, s, t_max)?) } else { None };
        let occupied = |ext_state: usize| {
            let origin = model.ext_states()[ext_state].origin;
            model.is_absorbing(origin) || ever_at_risk(estimator, w, origin.0)
        };
        Ok(targets
            .iter()
            .zip(&hazard_idx)
            .zip(&times)
            .map(|((t, idx), ts)| match *t {
                Target::Hazard(_) => {
                    let i = idx.expect("hazard target");
                    let from = model.ext_transitions()[i].from;
                    let source = model.ext_states()[from].origin;
                    if !ever_at_risk(estimator, w, source.0) {
                        return vec![f64::NAN; ts.len()];
                    }
                    ts.iter().map(|&u| hs.value_at(i, u)).collect()
                }
                Target::Prob { from, to } => {
                    let p = p.as_ref().expect("probabilities");
                    if !occupied(from) {
                        return vec![f64::NAN; ts.len()];
                    }
                    ts.iter().map(|&u| p.entry_at(u, from, to)).collect()
                }
            })
            .collect())
    };
    let reps: Vec<Vec<Vec<f64>>> = plans.par_iter().map(run).collect::<Result<_, _>>()?;

    let n_incomplete = reps.iter().filter(|r| r.iter().any(|s| s.iter().any(|v| v.is_nan()))).count();
    let values = (0..targets.len())
        .map(|j| (0..times[j].len()).map(|k| reps.iter().map(|r| r[j][k]).collect()).collect())
        .collect();
    Ok(BootstrapResult { b: plans.len(), seed: None, targets: targets.to_vec(), times, values, n_incomplete })
}

fn ever_at_risk(estimator: &Estimator, weights: &[f64], state: usize) -> bool {
    estimator.occupancy(weights, state) > 0.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CiMethod {
    #[serde(rename = "plain.G")]
    PlainGreenwood,
    #[serde(rename = "plain.boot")]
    PlainBoot,
    #[serde(rename = "log.boot")]
    LogBoot,
    #[serde(rename = "q.boot")]
    QuantileBoot,
}

impl CiMethod {
    pub const ALL: [CiMethod; 4] = [CiMethod::PlainGreenwood, CiMethod::PlainBoot, CiMethod::LogBoot, CiMethod::QuantileBoot];

    pub fn needs_bootstrap(self) -> bool {
        self != CiMethod::PlainGreenwood
    }
}

impl fmt::Display for CiMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CiMethod::PlainGreenwood => "plain.G",
            CiMethod::PlainBoot => "plain.boot",
            CiMethod::LogBoot => "log.boot",
            CiMethod::QuantileBoot => "q.boot",
        })
    }
}

impl FromStr for CiMethod {
    type Err = InferenceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CiMethod::ALL.into_iter().find(|m| m.to_string() == s).ok_or_else(|| InferenceError::UnknownMethod(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CiFlag {
    Ok,
    /// Infinite variance; bounds are infinite.
    Unbounded,
    /// Log-scale interval with a non-positive estimate.
    Undefined,
    /// No usable replicates.
    Missing,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
    pub flag: CiFlag,
}

impl Interval {
    fn missing(flag: CiFlag) -> Self {
        Self { lower: f64::NAN, upper: f64::NAN, flag }
    }

    pub fn is_defined(&self) -> bool {
        matches!(self.flag, CiFlag::Ok | CiFlag::Unbounded)
    }

    pub fn contains(&self, x: f64) -> bool {
        self.is_defined() && self.lower <= x && x <= self.upper
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfInterval {
    pub method: CiMethod,
    pub level: f64,
    pub intervals: Vec<Interval>,
}

/// Two-sided standard normal quantile for a confidence level.
pub fn z_value(level: f64) -> f64 {
    assert!(level > 0.0 && level <= 1.0, "level must be in (0, 1]");
    if level == 1.0 {
        return f64::INFINITY;
    }
    Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(0.5 + level / 2.0)
}

/// `theta +/- z sqrt(var)`.
pub fn plain_interval(theta: f64, var: Option<f64>, level: f64) -> Interval {
    let Some(var) = var else { return Interval::missing(CiFlag::Missing) };
    if var.is_infinite() {
        return Interval { lower: f64::NEG_INFINITY, upper: f64::INFINITY, flag: CiFlag::Unbounded };
    }
    if var == 0.0 {
        return Interval { lower: theta, upper: theta, flag: CiFlag::Ok };
    }
    let half = z_value(level) * var.sqrt();
    Interval { lower: theta - half, upper: theta + half, flag: CiFlag::Ok }
}

/// `theta exp(+/- z sqrt(var) / theta)`.
pub fn log_interval(theta: f64, var: Option<f64>, level: f64) -> Interval {
    let Some(var) = var else { return Interval::missing(CiFlag::Missing) };
    if !(theta > 0.0) {
        return Interval::missing(CiFlag::Undefined);
    }
    if var.is_infinite() {
        return Interval { lower: 0.0, upper: f64::INFINITY, flag: CiFlag::Unbounded };
    }
    if var == 0.0 {
        return Interval { lower: theta, upper: theta, flag: CiFlag::Ok };
    }
    let f = (z_value(level) * var.sqrt() / theta).exp();
    Interval { lower: theta / f, upper: theta * f, flag: CiFlag::Ok }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty() && (0.0..=1.0).contains(&p));
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    if lo + 1 >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    sorted[lo] + (h - lo as f64) * (sorted[lo + 1] - sorted[lo])
}

pub fn quantile_interval(replicates: &[f64], level: f64) -> Interval {
    let mut x: Vec<f64> = replicates.iter().copied().filter(|v| !v.is_nan()).collect();
    if x.is_empty() {
        return Interval::missing(CiFlag::Missing);
    }
    x.sort_by(f64::total_cmp);
    let a = (1.0 - level) / 2.0;
    Interval { lower: quantile_sorted(&x, a), upper: quantile_sorted(&x, 1.0 - a), flag: CiFlag::Ok }
}

pub fn ci_plain_greenwood(estimate: &[f64], variance: &[f64], level: f64) -> ConfInterval {
    ConfInterval {
        method: CiMethod::PlainGreenwood,
        level,
        intervals: estimate.iter().zip(variance).map(|(&t, &v)| plain_interval(t, Some(v), level)).collect(),
    }
}

pub fn ci_plain_boot(estimate: &[f64], boot: &BootstrapResult, target: usize, level: f64) -> ConfInterval {
    let var = boot.variance(target);
    ConfInterval {
        method: CiMethod::PlainBoot,
        level,
        intervals: estimate.iter().zip(var).map(|(&t, v)| plain_interval(t, v, level)).collect(),
    }
}

pub fn ci_log_boot(estimate: &[f64], boot: &BootstrapResult, target: usize, level: f64) -> ConfInterval {
    let var = boot.variance(target);
    ConfInterval {
        method: CiMethod::LogBoot,
        level,
        intervals: estimate.iter().zip(var).map(|(&t, v)| log_interval(t, v, level)).collect(),
    }
}

pub fn ci_quantile_boot(boot: &BootstrapResult, target: usize, level: f64) -> ConfInterval {
    if boot.b < 40 && level >= 0.95 {
        log::warn!("quantile intervals from {} replicates are unreliable at level {}", boot.b, level);
    }
    ConfInterval {
        method: CiMethod::QuantileBoot,
        level,
        intervals: boot.values[target].iter().map(|reps| quantile_interval(reps, level)).collect(),
    }
}
