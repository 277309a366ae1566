//! Cumulative transition hazards.
//!
//! Observed transitions get the Nelson-Aalen estimator with Greenwood
//! variance. A split death transition `h -> j` is replaced by a population
//! part, the risk-set average of the individual population hazards of those
//! in `h`, and an excess part, Nelson-Aalen minus population.
//!
//! The population part is accumulated per day. Day `d` covers `(d, d + 1]`;
//! its increment averages each individual's hazard for that day over the
//! subjects at risk at `d + 1`, and is zero when nobody is. Between day
//! boundaries the cumulative population hazard is linear.
//!
//! All estimates share one grid: every time at which some transition occurs,
//! plus any requested extra times and, optionally, every whole day.

use std::sync::Arc;

use thiserror::Error;

use crate::data::EventDataset;
use crate::model::{StateId, TransId, TransitionKind, TransitionModel};
use crate::ratetable::{Piece, RateTable};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HazardError {
    #[error("transition {0} is not an observed transition")]
    NotObserved(TransId),
    #[error("transition {0} is not split in the model")]
    NotSplit(TransId),
    #[error("subject `{0}` has no demographics but occupies a state with a split exit")]
    MissingDemographics(String),
    #[error("event on transition {trans} at time {time} with an empty risk set")]
    EmptyRiskSet { trans: TransId, time: f64 },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EstimateOptions {
    /// Also report at every whole day up to `t_max`.
    pub dense: bool,
    /// Extra reporting times, kept in every estimate.
    pub extra_times: Vec<f64>,
    /// Ignore follow-up after this time (default: last exit time).
    pub t_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CumHazEstimate {
    pub trans: TransId,
    pub kind: TransitionKind,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    /// Greenwood variance; the parent's for excess parts and zero for population parts.
    pub variance: Vec<f64>,
}

impl CumHazEstimate {
    /// Value at `t` read from the grid by last value carried forward.
    pub fn value_at(&self, t: f64) -> f64 {
        lvcf(&self.times, &self.values, t, 0.0)
    }

    pub fn variance_at(&self, t: f64) -> f64 {
        lvcf(&self.times, &self.variance, t, 0.0)
    }
}

pub(crate) fn lvcf(times: &[f64], values: &[f64], t: f64, before: f64) -> f64 {
    match times.partition_point(|&g| g <= t) {
        0 => before,
        k => values[k - 1],
    }
}

/// Cumulative population hazard of one state on the daily grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PopCurve {
    /// `cum[d]` is the cumulative hazard at whole day `d`.
    cum: Vec<f64>,
}

impl PopCurve {
    pub fn at(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        let last = self.cum.len() - 1;
        let d = t.floor() as usize;
        if d >= last {
            return self.cum[last];
        }
        let inc = self.cum[d + 1] - self.cum[d];
        self.cum[d] + (t - d as f64) * inc
    }

    pub fn daily(&self) -> &[f64] {
        &self.cum
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct HazardFlags {
    /// Transitions whose Greenwood variance became infinite, with the time it happened.
    pub infinite_variance: Vec<(TransId, f64)>,
    /// Excess transitions whose cumulative hazard went negative, with the first such grid time.
    pub negative_excess: Vec<(TransId, f64)>,
}

impl HazardFlags {
    pub fn is_empty(&self) -> bool {
        self.infinite_variance.is_empty() && self.negative_excess.is_empty()
    }
}

/// Hazard estimates for every transition of the extended model.
#[derive(Debug, Clone)]
pub struct HazardSet {
    model: Arc<TransitionModel>,
    times: Vec<f64>,
    /// Nelson-Aalen estimates of the observed transitions, split parents included.
    observed: Vec<CumHazEstimate>,
    /// Extended transitions, in model order.
    extended: Vec<CumHazEstimate>,
    counts: Vec<Vec<f64>>,
    at_risk: Vec<Vec<f64>>,
    pop: Vec<Option<PopCurve>>,
    flags: HazardFlags,
}

impl HazardSet {
    pub fn model(&self) -> &TransitionModel {
        &self.model
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Estimates of the extended model's transitions, in model order.
    pub fn extended(&self) -> &[CumHazEstimate] {
        &self.extended
    }

    /// Nelson-Aalen estimates of all observed transitions.
    pub fn observed(&self) -> &[CumHazEstimate] {
        &self.observed
    }

    /// Estimate for an extended or observed transition id.
    pub fn get(&self, id: TransId) -> Option<&CumHazEstimate> {
        self.extended.iter().find(|e| e.trans == id).or_else(|| self.observed.iter().find(|e| e.trans == id))
    }

    /// Weighted event count of an observed transition at each grid time.
    pub fn counts(&self, trans: TransId) -> &[f64] {
        &self.counts[trans.index()]
    }

    /// Weighted risk-set size of an observed state at each grid time.
    pub fn at_risk(&self, state: StateId) -> &[f64] {
        &self.at_risk[state.0]
    }

    /// Population curve of a state with a split exit.
    pub fn pop_curve(&self, state: StateId) -> Option<&PopCurve> {
        self.pop[state.0].as_ref()
    }

    pub fn flags(&self) -> &HazardFlags {
        &self.flags
    }

    /// Cumulative hazard of an extended transition at any time, including off-grid.
    pub fn value_at(&self, idx: usize, t: f64) -> f64 {
        let et = self.model.ext_transitions()[idx];
        let parent = &self.observed[et.parent.index()];
        let from = self.model.transition(et.parent).expect("parent exists").from;
        match et.kind {
            TransitionKind::Observed => parent.value_at(t),
            TransitionKind::Population => self.pop_at(from, t),
            TransitionKind::Excess => parent.value_at(t) - self.pop_at(from, t),
        }
    }

    fn pop_at(&self, state: StateId, t: f64) -> f64 {
        self.pop[state.0].as_ref().map_or(0.0, |c| c.at(t))
    }
}

struct PreparedVisit {
    subject: usize,
    state: usize,
    /// Grid indices `lo..hi` at which the visit is at risk.
    lo: usize,
    hi: usize,
    event: Option<(usize, usize)>,
}

struct PopVisit {
    subject: usize,
    state: usize,
    day_lo: usize,
    day_hi: usize,
    pieces: std::ops::Range<usize>,
}

/// A dataset laid out on its grid, ready to be estimated under any subject weights.
///
/// Weights are multiplicities: estimating with weight `k` for a subject is
/// the same as estimating on a dataset holding `k` copies of it.
pub struct Estimator {
    model: Arc<TransitionModel>,
    n_subjects: usize,
    times: Vec<f64>,
    /// Grid points reported regardless of events.
    fixed: Vec<bool>,
    visits: Vec<PreparedVisit>,
    pop_visits: Vec<PopVisit>,
    pieces: Vec<Piece>,
    n_days: usize,
}

impl Estimator {
    pub fn new(dataset: &EventDataset, table: &RateTable, opts: &EstimateOptions) -> Result<Self, HazardError> {
        let model = dataset.model_arc().clone();
        let max_exit = dataset
            .subjects()
            .iter()
            .flat_map(|s| s.visits.iter().map(|v| v.exit))
            .fold(0.0f64, f64::max);
        let t_max = opts.t_max.unwrap_or(max_exit);

        let mut times: Vec<(f64, bool)> = dataset
            .subjects()
            .iter()
            .flat_map(|s| s.visits.iter())
            .filter(|v| v.event.is_some() && v.exit <= t_max)
            .map(|v| (v.exit, false))
            .collect();
        times.extend(opts.extra_times.iter().filter(|&&t| t > 0.0 && t <= t_max).map(|&t| (t, true)));
        if opts.dense {
            times.extend((1..=t_max.floor() as i64).map(|d| (d as f64, true)));
        }
        times.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));
        times.dedup_by(|b, a| a.0 == b.0);
        let (times, fixed): (Vec<f64>, Vec<bool>) = times.into_iter().unzip();

        let split_source: Vec<bool> = (0..model.n_states())
            .map(|h| model.splits().iter().any(|s| model.transition(s.parent).expect("parent").from.0 == h))
            .collect();
        let n_days = t_max.ceil().max(0.0) as usize;

        let mut visits = Vec::new();
        let mut pop_visits = Vec::new();
        let mut pieces = Vec::new();
        for (i, s) in dataset.subjects().iter().enumerate() {
            for v in &s.visits {
                if v.entry >= t_max {
                    continue;
                }
                let exit = v.exit.min(t_max);
                let lo = times.partition_point(|&g| g <= v.entry);
                let hi = times.partition_point(|&g| g <= exit);
                let event = match v.event {
                    Some(ev) if v.exit <= t_max => Some((ev.index(), hi - 1)),
                    _ => None,
                };
                visits.push(PreparedVisit { subject: i, state: v.state.0, lo, hi, event });

                if split_source[v.state.0] {
                    let demo = s.demographics.ok_or_else(|| HazardError::MissingDemographics(s.id.clone()))?;
                    let day_lo = v.entry.floor() as usize;
                    let day_hi = (exit.floor() as usize).min(n_days);
                    if day_hi > day_lo {
                        let start = pieces.len();
                        pieces.extend(table.individual(&demo).pieces(day_lo as i64, day_hi as i64));
                        pop_visits.push(PopVisit { subject: i, state: v.state.0, day_lo, day_hi, pieces: start..pieces.len() });
                    }
                }
            }
        }
        Ok(Self { model, n_subjects: dataset.n_subjects(), times, fixed, visits, pop_visits, pieces, n_days })
    }

    pub fn n_subjects(&self) -> usize {
        self.n_subjects
    }

    pub fn model(&self) -> &Arc<TransitionModel> {
        &self.model
    }

    /// Weighted number of sojourns in an observed state.
    pub fn occupancy(&self, weights: &[f64], state: usize) -> f64 {
        self.visits.iter().filter(|v| v.state == state).map(|v| weights[v.subject]).sum()
    }

    /// Estimates with unit weights.
    pub fn estimate(&self) -> Result<HazardSet, HazardError> {
        self.estimate_weighted(None)
    }

    /// Estimates with per-subject multiplicities. Grid times with no events
    /// among the weighted subjects are dropped unless requested explicitly.
    pub fn estimate_weighted(&self, weights: Option<&[f64]>) -> Result<HazardSet, HazardError> {
        let model = &self.model;
        let g = self.times.len();
        let w = |i: usize| weights.map_or(1.0, |w| w[i]);
        if let Some(w) = weights {
            assert_eq!(w.len(), self.n_subjects, "one weight per subject");
        }

        let mut y = vec![vec![0.0; g + 1]; model.n_states()];
        let mut dn = vec![vec![0.0; g]; model.transitions().len()];
        for v in &self.visits {
            let wi = w(v.subject);
            if wi == 0.0 {
                continue;
            }
            y[v.state][v.lo] += wi;
            y[v.state][v.hi] -= wi;
            if let Some((t, k)) = v.event {
                dn[t][k] += wi;
            }
        }
        for row in &mut y {
            let mut acc = 0.0;
            for x in row.iter_mut() {
                acc += *x;
                *x = acc;
            }
            row.pop();
        }

        let active: Vec<usize> =
            (0..g).filter(|&k| self.fixed[k] || dn.iter().any(|row| row[k] > 0.0)).collect();
        let times: Vec<f64> = active.iter().map(|&k| self.times[k]).collect();
        let mut flags = HazardFlags::default();

        let mut observed = Vec::with_capacity(model.transitions().len());
        for t in model.transitions() {
            let (yh, dnt) = (&y[t.from.0], &dn[t.id.index()]);
            let (mut na, mut var) = (0.0, 0.0f64);
            let mut values = Vec::with_capacity(active.len());
            let mut variance = Vec::with_capacity(active.len());
            for &k in &active {
                let n = dnt[k];
                if n > 0.0 {
                    let r = yh[k];
                    if r <= 0.0 {
                        return Err(HazardError::EmptyRiskSet { trans: t.id, time: self.times[k] });
                    }
                    na += n / r;
                    if r == n {
                        if var.is_finite() {
                            flags.infinite_variance.push((t.id, self.times[k]));
                        }
                        var = f64::INFINITY;
                    } else {
                        var += n / (r * (r - n));
                    }
                }
                values.push(na);
                variance.push(var);
            }
            observed.push(CumHazEstimate { trans: t.id, kind: TransitionKind::Observed, times: times.clone(), values, variance });
        }

        let pop = self.population(weights);

        let mut extended = Vec::with_capacity(model.ext_transitions().len());
        for et in model.ext_transitions() {
            let parent = &observed[et.parent.index()];
            let from = model.transition(et.parent).expect("parent").from;
            let est = match et.kind {
                TransitionKind::Observed => parent.clone(),
                TransitionKind::Population => {
                    let curve = pop[from.0].as_ref().expect("population curve for split source");
                    CumHazEstimate {
                        trans: et.id,
                        kind: et.kind,
                        times: times.clone(),
                        values: times.iter().map(|&t| curve.at(t)).collect(),
                        variance: vec![0.0; times.len()],
                    }
                }
                TransitionKind::Excess => {
                    let curve = pop[from.0].as_ref().expect("population curve for split source");
                    let values: Vec<f64> =
                        times.iter().zip(&parent.values).map(|(&t, &na)| na - curve.at(t)).collect();
                    if let Some(k) = values.iter().position(|&v| v < 0.0) {
                        flags.negative_excess.push((et.id, times[k]));
                    }
                    CumHazEstimate { trans: et.id, kind: et.kind, times: times.clone(), values, variance: parent.variance.clone() }
                }
            };
            extended.push(est);
        }

        let counts = dn.iter().map(|row| active.iter().map(|&k| row[k]).collect()).collect();
        let at_risk = y.iter().map(|row| active.iter().map(|&k| row[k]).collect()).collect();
        Ok(HazardSet { model: model.clone(), times, observed, extended, counts, at_risk, pop, flags })
    }

    fn population(&self, weights: Option<&[f64]>) -> Vec<Option<PopCurve>> {
        let model = &self.model;
        let mut num: Vec<Option<Vec<f64>>> = vec![None; model.n_states()];
        let mut den: Vec<Option<Vec<f64>>> = vec![None; model.n_states()];
        for s in model.splits() {
            let h = model.transition(s.parent).expect("parent").from.0;
            num[h] = Some(vec![0.0; self.n_days + 1]);
            den[h] = Some(vec![0.0; self.n_days + 1]);
        }
        for pv in &self.pop_visits {
            let wi = weights.map_or(1.0, |w| w[pv.subject]);
            if wi == 0.0 {
                continue;
            }
            let (nm, dn) = (num[pv.state].as_mut().expect("split source"), den[pv.state].as_mut().expect("split source"));
            dn[pv.day_lo] += wi;
            dn[pv.day_hi] -= wi;
            for p in &self.pieces[pv.pieces.clone()] {
                let r = wi * p.rate;
                nm[p.start as usize] += r;
                nm[p.end as usize] -= r;
            }
        }
        num.into_iter()
            .zip(den)
            .map(|(nm, dn)| {
                let (nm, dn) = (nm?, dn?);
                let mut cum = Vec::with_capacity(self.n_days + 1);
                cum.push(0.0);
                let (mut a, mut b, mut acc) = (0.0, 0.0, 0.0);
                for d in 0..self.n_days {
                    a += nm[d];
                    b += dn[d];
                    if b > 0.0 {
                        acc += a / b;
                    }
                    cum.push(acc);
                }
                Some(PopCurve { cum })
            })
            .collect()
    }
}

/// Estimates every transition of the dataset's extended model.
pub fn estimate_hazards(dataset: &EventDataset, table: &RateTable, opts: &EstimateOptions) -> Result<HazardSet, HazardError> {
    Estimator::new(dataset, table, opts)?.estimate()
}

/// Nelson-Aalen estimate with Greenwood variance of one observed transition.
pub fn nelson_aalen(dataset: &EventDataset, trans: TransId) -> Result<CumHazEstimate, HazardError> {
    if dataset.model().transition(trans).is_none() {
        return Err(HazardError::NotObserved(trans));
    }
    let plain = dataset.with_model(Arc::new(dataset.model().without_splits()));
    let set = estimate_hazards(&plain, &RateTable::zero(), &EstimateOptions::default())?;
    Ok(set.observed[trans.index()].clone())
}

/// Greenwood variance of the Nelson-Aalen estimate at its grid times.
pub fn greenwood_var(dataset: &EventDataset, trans: TransId) -> Result<Vec<f64>, HazardError> {
    Ok(nelson_aalen(dataset, trans)?.variance)
}

/// Excess and population parts of a split transition.
pub fn split_hazards(
    dataset: &EventDataset,
    table: &RateTable,
    trans: TransId,
    opts: &EstimateOptions,
) -> Result<(CumHazEstimate, CumHazEstimate), HazardError> {
    let split = *dataset.model().split_of(trans).ok_or(HazardError::NotSplit(trans))?;
    let set = estimate_hazards(dataset, table, opts)?;
    Ok((set.get(split.excess).expect("excess").clone(), set.get(split.population).expect("population").clone()))
}
