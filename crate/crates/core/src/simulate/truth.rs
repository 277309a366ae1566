//! True marginal estimands of a scenario.
//!
//! For fixed demographics the illness-death process is stepped one day at a
//! time. Within a day every hazard is held constant (exact for exponential
//! and population hazards, whose rate-table cells change only at whole
//! days), so occupation probabilities, transition flows and the time spent
//! in each transient state have closed forms. Expectations over the
//! demographic distribution then give the marginal probabilities, and the
//! marginal cumulative hazard of `h -> j` is the running sum of
//! `E[flow_j(d)] / E[time in h during day d]`, the risk-weighted average
//! that the pooled estimators target under independent censoring.

use chrono::Days;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{draw_demographics, eval_days, ScenarioConfig, SimError};
use crate::data::{Demographics, Sex};
use crate::inference::Target;
use crate::model::TransId;
use crate::ratetable::{RateTable, DAYS_PER_YEAR};

/// Extended transition ids of the illness-death model, in the order relapse,
/// excess NRM, population NRM, excess DaR, population DaR.
pub const HAZARD_IDS: [u32; 5] = [1, 4, 5, 6, 7];

/// Targets evaluated by the simulation: all extended hazards, then
/// `P(ARF -> j)(0, t)` for every extended state `j`.
pub fn sim_targets() -> Vec<Target> {
    HAZARD_IDS
        .iter()
        .map(|&id| Target::Hazard(TransId(id)))
        .chain((0..6).map(|to| Target::Prob { from: 0, to }))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum TruthMethod {
    /// Midpoint rule over age and origin date, both sexes; node counts are
    /// doubled until the largest relative change drops below `tol`.
    Quadrature { tol: f64, max_nodes: usize },
    MonteCarlo { draws: usize, seed: u64 },
}

impl Default for TruthMethod {
    fn default() -> Self {
        TruthMethod::Quadrature { tol: 1e-4, max_nodes: 512 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueValues {
    pub scenario: String,
    /// Whole days.
    pub times: Vec<f64>,
    pub targets: Vec<Target>,
    /// `values[target][time]`.
    pub values: Vec<Vec<f64>>,
    /// Age and origin nodes of the final quadrature, or draws for Monte Carlo.
    pub nodes: (usize, usize),
    /// Largest relative change at the last refinement (0 for Monte Carlo).
    pub change: f64,
}

impl TrueValues {
    pub fn get(&self, target: Target) -> Option<&[f64]> {
        self.targets.iter().position(|&t| t == target).map(|i| self.values[i].as_slice())
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["scenario", "target", "time_days", "time_years", "truth"])?;
        for (t, vals) in self.targets.iter().zip(&self.values) {
            for (&d, v) in self.times.iter().zip(vals) {
                out.write_record([
                    self.scenario.clone(),
                    target_label(*t),
                    format!("{d}"),
                    format!("{}", (d / DAYS_PER_YEAR * 100.0).round() / 100.0),
                    format!("{v:.12e}"),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

const EXT_LABELS: [&str; 6] = ["ARF", "Relapse", "NRM.e", "NRM.p", "DaR.e", "DaR.p"];
const HAZARD_LABELS: [&str; 5] = ["ARF->Relapse", "ARF->NRM.e", "ARF->NRM.p", "Relapse->DaR.e", "Relapse->DaR.p"];

pub fn target_label(t: Target) -> String {
    match t {
        Target::Hazard(id) => match HAZARD_IDS.iter().position(|&h| h == id.0) {
            Some(i) => format!("L:{}", HAZARD_LABELS[i]),
            None => format!("L:{}", id.0),
        },
        Target::Prob { from, to } => {
            let name = |i: usize| EXT_LABELS.get(i).map_or_else(|| i.to_string(), |s| s.to_string());
            format!("P:{}->{}", name(from), name(to))
        }
    }
}

/// Expected daily flows and occupation times, weighted over demographic nodes.
#[derive(Debug, Clone)]
struct Accum {
    /// `flow[k][d]` for the transitions of `HAZARD_IDS`.
    flow: [Vec<f64>; 5],
    /// Time spent in ARF and Relapse during day `d`.
    occ: [Vec<f64>; 2],
    /// State probabilities at the evaluation days.
    probs: Vec<[f64; 6]>,
}

impl Accum {
    fn new(days: usize, n_eval: usize) -> Self {
        Accum {
            flow: std::array::from_fn(|_| vec![0.0; days]),
            occ: std::array::from_fn(|_| vec![0.0; days]),
            probs: vec![[0.0; 6]; n_eval],
        }
    }

    fn add(&mut self, other: &Accum) {
        for (a, b) in self.flow.iter_mut().chain(self.occ.iter_mut()).zip(other.flow.iter().chain(other.occ.iter())) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        for (a, b) in self.probs.iter_mut().zip(&other.probs) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
}

/// `(1 - exp(-x)) / x`, continuous at 0.
fn phi1(x: f64) -> f64 {
    if x.abs() < 1e-8 {
        1.0 - x / 2.0
    } else {
        -(-x).exp_m1() / x
    }
}

/// Per-day cumulative baseline increments of relapse, excess NRM and excess DaR.
fn baseline_increments(config: &ScenarioConfig, days: usize) -> [Vec<f64>; 3] {
    let t = &config.transitions;
    let hz = [t.relapse.hazard, t.nrm_excess.hazard, t.dar_excess.hazard];
    std::array::from_fn(|k| (0..days).map(|d| hz[k].cumulative_days(d as f64 + 1.0) - hz[k].cumulative_days(d as f64)).collect())
}

struct Stepper<'a> {
    config: &'a ScenarioConfig,
    table: &'a RateTable,
    base: [Vec<f64>; 3],
    eval: Vec<usize>,
}

impl Stepper<'_> {
    fn days(&self) -> usize {
        self.base[0].len()
    }

    /// Adds `weight` times the trajectory of one demographic profile.
    fn add_node(&self, demo: &Demographics, weight: f64, acc: &mut Accum, pop: &mut Vec<f64>) {
        let days = self.days();
        pop.clear();
        let ind = self.table.individual(demo);
        for p in ind.pieces(0, days as i64) {
            let end = p.end.min(days as i64);
            pop.extend(std::iter::repeat(p.rate).take((end - p.start) as usize));
        }
        let m = self.config.multipliers(demo.age_days / DAYS_PER_YEAR);
        let (mut p1, mut p2) = (1.0, 0.0);
        let mut absorbed = [0.0; 4];
        let mut next_eval = 0;
        for d in 0..days {
            while next_eval < self.eval.len() && self.eval[next_eval] == d {
                acc.probs[next_eval].iter_mut().zip([p1, p2, absorbed[0], absorbed[1], absorbed[2], absorbed[3]]).for_each(|(a, v)| *a += weight * v);
                next_eval += 1;
            }
            let c = pop[d];
            let (ar, ane, ade) = (m[0] * self.base[0][d], m[1] * self.base[1][d], m[2] * self.base[2][d]);
            let a = ar + ane + c;
            let b = ade + c;
            let out1 = -p1 * (-a).exp_m1();
            let occ1 = if a > 0.0 { out1 / a } else { p1 };
            let flow_r = if a > 0.0 { out1 * ar / a } else { 0.0 };
            let eb = (-b).exp();
            let p2_next = p2 * eb + p1 * ar * eb * phi1(a - b);
            let deaths2 = (p2 + flow_r - p2_next).max(0.0);
            let occ2 = if b > 0.0 { deaths2 / b } else { p2 + flow_r / 2.0 };
            let flows = if a > 0.0 { [flow_r, out1 * ane / a, out1 * c / a] } else { [0.0; 3] };
            let flows2 = if b > 0.0 { [deaths2 * ade / b, deaths2 * c / b] } else { [0.0; 2] };
            for (k, f) in flows.iter().chain(&flows2).enumerate() {
                acc.flow[k][d] += weight * f;
            }
            acc.occ[0][d] += weight * occ1;
            acc.occ[1][d] += weight * occ2;
            absorbed[0] += flows[1];
            absorbed[1] += flows[2];
            absorbed[2] += flows2[0];
            absorbed[3] += flows2[1];
            p1 -= out1;
            p2 = p2_next;
        }
        while next_eval < self.eval.len() {
            acc.probs[next_eval].iter_mut().zip([p1, p2, absorbed[0], absorbed[1], absorbed[2], absorbed[3]]).for_each(|(a, v)| *a += weight * v);
            next_eval += 1;
        }
    }

    fn finish(&self, acc: &Accum) -> Vec<Vec<f64>> {
        let source = [0, 0, 0, 1, 1];
        let mut values = Vec::with_capacity(11);
        for k in 0..5 {
            let mut cum = 0.0;
            let mut out = Vec::with_capacity(self.eval.len());
            let mut next = 0;
            for d in 0..self.days() {
                while next < self.eval.len() && self.eval[next] == d {
                    out.push(cum);
                    next += 1;
                }
                let occ = acc.occ[source[k]][d];
                if occ > 0.0 {
                    cum += acc.flow[k][d] / occ;
                }
            }
            out.resize(self.eval.len(), cum);
            values.push(out);
        }
        for j in 0..6 {
            values.push(acc.probs.iter().map(|p| p[j]).collect());
        }
        values
    }
}

/// Midpoint strata of the integers `0..span` split into `k` contiguous chunks.
fn origin_strata(span: u64, k: usize) -> Vec<(u64, f64)> {
    let k = (k as u64).min(span);
    (0..k)
        .map(|i| {
            let lo = i * span / k;
            let hi = (i + 1) * span / k;
            ((lo + hi - 1) / 2, (hi - lo) as f64 / span as f64)
        })
        .collect()
}

fn age_nodes(range: [f64; 2], k: usize) -> Vec<(f64, f64)> {
    if range[1] == range[0] {
        return vec![(range[0], 1.0)];
    }
    let w = (range[1] - range[0]) / k as f64;
    (0..k).map(|i| (range[0] + (i as f64 + 0.5) * w, 1.0 / k as f64)).collect()
}

fn quadrature(stepper: &Stepper<'_>, n_age: usize, n_origin: usize) -> Vec<Vec<f64>> {
    let c = stepper.config;
    let ages = age_nodes(c.age_range, n_age);
    let origins = origin_strata(c.origin_span_days(), n_origin);
    let n_eval = stepper.eval.len();
    let parts: Vec<Accum> = ages
        .par_iter()
        .map(|&(age, wa)| {
            let mut acc = Accum::new(stepper.days(), n_eval);
            let mut buf = Vec::with_capacity(stepper.days());
            for &(off, wo) in &origins {
                for sex in [Sex::Male, Sex::Female] {
                    let demo = Demographics { age_days: age * DAYS_PER_YEAR, sex, origin: c.origin_range[0] + Days::new(off) };
                    stepper.add_node(&demo, wa * wo * 0.5, &mut acc, &mut buf);
                }
            }
            acc
        })
        .collect();
    let mut total = Accum::new(stepper.days(), n_eval);
    for p in &parts {
        total.add(p);
    }
    stepper.finish(&total)
}

fn max_rel_change(old: &[Vec<f64>], new: &[Vec<f64>]) -> f64 {
    old.iter()
        .flatten()
        .zip(new.iter().flatten())
        .map(|(a, b)| {
            let scale = b.abs().max(1e-12);
            (a - b).abs() / scale
        })
        .fold(0.0, f64::max)
}

/// True values at the standard evaluation days.
pub fn true_values(config: &ScenarioConfig, table: &RateTable, method: TruthMethod) -> Result<TrueValues, SimError> {
    true_values_at(config, table, &eval_days(), method)
}

/// True values at the given whole days (ascending).
pub fn true_values_at(
    config: &ScenarioConfig,
    table: &RateTable,
    times: &[f64],
    method: TruthMethod,
) -> Result<TrueValues, SimError> {
    config.validate()?;
    if times.iter().any(|t| t.fract() != 0.0 || *t < 0.0) || times.windows(2).any(|w| w[0] > w[1]) {
        return Err(SimError::Config("evaluation times must be ascending whole days".into()));
    }
    let days = times.last().map_or(0, |&t| t as usize);
    let stepper = Stepper { config, table, base: baseline_increments(config, days), eval: times.iter().map(|&t| t as usize).collect() };
    let (values, nodes, change) = match method {
        TruthMethod::Quadrature { tol, max_nodes } => {
            let mut k = 8;
            let mut prev = quadrature(&stepper, k, k);
            let mut change = f64::INFINITY;
            loop {
                k *= 2;
                if k > max_nodes {
                    return Err(SimError::NoConvergence { nodes: k / 2, change });
                }
                let next = quadrature(&stepper, k, k);
                change = max_rel_change(&prev, &next);
                log::debug!("truth quadrature {k} nodes per axis: change {change:e}");
                if change < tol {
                    break (next, (k, k), change);
                }
                prev = next;
            }
        }
        TruthMethod::MonteCarlo { draws, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let demos: Vec<Demographics> = (0..draws).map(|_| draw_demographics(config, &mut rng)).collect();
            let chunk = draws.div_ceil(64).max(1);
            let parts: Vec<Accum> = demos
                .par_chunks(chunk)
                .map(|ds| {
                    let mut acc = Accum::new(days, times.len());
                    let mut buf = Vec::with_capacity(days);
                    for d in ds {
                        stepper.add_node(d, 1.0 / draws as f64, &mut acc, &mut buf);
                    }
                    acc
                })
                .collect();
            let mut total = Accum::new(days, times.len());
            for p in &parts {
                total.add(p);
            }
            (stepper.finish(&total), (draws, 0), 0.0)
        }
    };
    Ok(TrueValues { scenario: config.name.clone(), times: times.to_vec(), targets: sim_targets(), values, nodes, change })
}
