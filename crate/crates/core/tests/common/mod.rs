//! Random illness-death datasets for property tests and the acceptance run.
#![allow(dead_code)]

use std::sync::Arc;

use chrono::{Days, NaiveDate};
use msrel::data::{Demographics, EventDataset, Sex, Subject, Visit};
use msrel::hazards::{EstimateOptions, Estimator, HazardSet};
use msrel::model::{build_model, StateId, StateSpec, TransId, TransitionModel, TransitionSpec};
use msrel::probtrans::{aalen_johansen_with_variance, ProbTransEstimate};
use msrel::ratetable::{RateTable, DAYS_PER_YEAR};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Demo table with hazards inflated so that population parts are visible
/// over the short follow-up of the random datasets.
pub fn strong_table() -> RateTable {
    RateTable::demo().scaled(40.0)
}

pub fn random_demographics(rng: &mut impl Rng) -> Demographics {
    let origin = NaiveDate::from_ymd_opt(1990, 1, 1).unwrap() + Days::new(rng.gen_range(0..3652));
    let sex = if rng.gen_bool(0.5) { Sex::Male } else { Sex::Female };
    Demographics { age_days: rng.gen_range(30.0..90.0) * DAYS_PER_YEAR, sex, origin }
}

/// A sojourn length; half the time rounded to whole days so that ties occur.
fn span(rng: &mut impl Rng, max: f64) -> f64 {
    let x: f64 = rng.gen_range(0.5..max);
    if rng.gen_bool(0.5) {
        x.ceil()
    } else {
        x
    }
}

/// Illness-death trajectory, with delayed entry for about one subject in five.
pub fn random_subject(rng: &mut impl Rng, id: usize) -> Subject {
    let v = |state: usize, entry: f64, exit: f64, event: Option<u32>| Visit { state: StateId(state), entry, exit, event: event.map(TransId) };
    let entry = if rng.gen_bool(0.2) { span(rng, 200.0) } else { 0.0 };
    let exit = entry + span(rng, 800.0);
    let u: f64 = rng.gen();
    let mut visits = Vec::new();
    if u < 0.35 {
        visits.push(v(0, entry, exit, Some(1)));
        let exit2 = exit + span(rng, 600.0);
        visits.push(v(1, exit, exit2, rng.gen_bool(0.6).then_some(3)));
    } else if u < 0.65 {
        visits.push(v(0, entry, exit, Some(2)));
    } else {
        visits.push(v(0, entry, exit, None));
    }
    Subject { id: id.to_string(), demographics: Some(random_demographics(rng)), visits }
}

pub fn random_subjects(seed: u64, n: usize) -> Vec<Subject> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| random_subject(&mut rng, i)).collect()
}

pub fn illness_death() -> Arc<TransitionModel> {
    Arc::new(TransitionModel::illness_death())
}

pub fn dataset(model: Arc<TransitionModel>, subjects: Vec<Subject>) -> EventDataset {
    EventDataset::new(model, subjects).expect("generated data is valid")
}

/// Two-state survival model, optionally with its death transition split.
pub fn survival_model(split: bool) -> Arc<TransitionModel> {
    let s = if split { vec![msrel::model::SplitSpec::Id(1)] } else { vec![] };
    Arc::new(build_model(&[StateSpec::transient("Alive"), StateSpec::absorbing("Dead")], &[TransitionSpec::new("Alive", "Dead")], &s).unwrap())
}

pub fn fit(data: &EventDataset, table: &RateTable) -> (HazardSet, ProbTransEstimate) {
    let hs = Estimator::new(data, table, &EstimateOptions::default()).unwrap().estimate().unwrap();
    let p = aalen_johansen_with_variance(&hs, 0.0, None).unwrap();
    (hs, p)
}

/// `|a - b|` within `k` units of rounding of the larger magnitude involved.
pub fn ulps_close(a: f64, b: f64, scale: f64, k: f64) -> bool {
    (a - b).abs() <= k * f64::EPSILON * scale.abs().max(a.abs()).max(b.abs()).max(f64::MIN_POSITIVE)
}

/// Kaplan-Meier survival and Greenwood variance at `t` from `(entry, exit, died)` triples.
pub fn kaplan_meier(obs: &[(f64, f64, bool)], t: f64) -> (f64, f64) {
    let mut times: Vec<f64> = obs.iter().filter(|o| o.2 && o.1 <= t).map(|o| o.1).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let (mut s, mut g) = (1.0, 0.0);
    for u in times {
        let y = obs.iter().filter(|o| o.0 < u && u <= o.1).count() as f64;
        let d = obs.iter().filter(|o| o.2 && o.1 == u).count() as f64;
        s *= 1.0 - d / y;
        if y > d {
            g += d / (y * (y - d));
        } else {
            g = f64::INFINITY;
        }
    }
    // once S hits 0 the variance is 0, not 0 * inf
    (s, if s == 0.0 { 0.0 } else { s * s * g })
}

pub type Check = Result<(), String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Check {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Excess plus population equals the parent's Nelson-Aalen at every grid
/// time, and split death columns add up to the unsplit death probability.
pub fn check_split_sums(subjects: Vec<Subject>, table: &RateTable) -> Check {
    let model = illness_death();
    let data = dataset(model.clone(), subjects);
    let (hs, p) = fit(&data, table);
    for sp in model.splits() {
        let (parent, e, pop) = (hs.get(sp.parent).unwrap(), hs.get(sp.excess).unwrap(), hs.get(sp.population).unwrap());
        for &t in hs.times() {
            let (na, ve, vp) = (parent.value_at(t), e.value_at(t), pop.value_at(t));
            ensure(ulps_close(ve + vp, na, vp, 4.0), || format!("split {}: {ve} + {vp} != {na} at {t}", sp.parent))?;
        }
    }
    let plain = data.with_model(Arc::new(model.without_splits()));
    let (_, q) = fit(&plain, &RateTable::zero());
    let ext = model.ext_states();
    for &t in &p.times {
        for (i, from) in ext.iter().enumerate().filter(|(_, s)| !s.absorbing) {
            for j in 0..model.n_states() {
                let sum: f64 = (0..ext.len()).filter(|&k| ext[k].origin.0 == j).map(|k| p.entry_at(t, i, k)).sum();
                let direct = q.entry_at(t, from.origin.0, j);
                ensure((sum - direct).abs() <= 1e-12, || format!("P[{i}][{j}] at {t}: {sum} vs {direct}"))?;
            }
        }
    }
    Ok(())
}

pub fn check_row_stochastic(subjects: Vec<Subject>, table: &RateTable) -> Check {
    let data = dataset(illness_death(), subjects);
    let (hs, _) = fit(&data, table);
    let starts = [0.0, hs.times().get(hs.times().len() / 3).copied().unwrap_or(0.0)];
    for s in starts {
        let p = msrel::probtrans::aalen_johansen(&hs, s, None).map_err(|e| e.to_string())?;
        let n = p.n_states();
        for (k, m) in p.matrices.iter().enumerate() {
            for i in 0..n {
                let row: f64 = m[i * n..(i + 1) * n].iter().sum();
                ensure((row - 1.0).abs() <= 1e-10, || format!("row {i} sums to {row} at {} (s = {s})", p.times[k]))?;
            }
        }
    }
    Ok(())
}

/// `P(s, t) = P(s, u) P(u, t)` for grid times `s < u < t`.
pub fn check_chapman_kolmogorov(subjects: Vec<Subject>, table: &RateTable) -> Check {
    let data = dataset(illness_death(), subjects);
    let (hs, p0) = fit(&data, table);
    let g = hs.times();
    if g.len() < 3 {
        return Ok(());
    }
    let (u, t) = (g[g.len() / 2], g[g.len() - 1]);
    let pu = msrel::probtrans::aalen_johansen(&hs, u, None).map_err(|e| e.to_string())?;
    let (a, b, c) = (p0.matrix_at(u), pu.matrix_at(t), p0.matrix_at(t));
    let n = p0.n_states();
    for i in 0..n {
        for j in 0..n {
            let prod: f64 = (0..n).map(|k| a[i * n + k] * b[k * n + j]).sum();
            ensure((prod - c[i * n + j]).abs() <= 1e-12, || format!("CK [{i}][{j}]: {prod} vs {}", c[i * n + j]))?;
        }
    }
    Ok(())
}

/// In the two-state model the Aalen-Johansen survival entry and its
/// variance are the Kaplan-Meier estimate with Greenwood's variance.
pub fn check_kaplan_meier(seed: u64, n: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut obs = Vec::new();
    let subjects: Vec<Subject> = (0..n)
        .map(|i| {
            let entry = if rng.gen_bool(0.3) { span(&mut rng, 50.0) } else { 0.0 };
            let exit = entry + span(&mut rng, 100.0);
            let died = rng.gen_bool(0.6);
            obs.push((entry, exit, died));
            Subject {
                id: i.to_string(),
                demographics: None,
                visits: vec![Visit { state: StateId(0), entry, exit, event: died.then_some(TransId(1)) }],
            }
        })
        .collect();
    let data = dataset(survival_model(false), subjects);
    let (_, p) = fit(&data, &RateTable::zero());
    for &t in &p.times {
        let (s, v) = kaplan_meier(&obs, t);
        let (ps, pv) = (p.entry_at(t, 0, 0), p.variance_at(t, 0, 0).unwrap());
        ensure((ps - s).abs() <= 1e-12, || format!("KM at {t}: {ps} vs {s}"))?;
        ensure((pv - v).abs() <= 1e-12, || format!("Greenwood at {t}: {pv} vs {v}"))?;
    }
    Ok(())
}

/// Adding a subject that enters at `a` leaves Nelson-Aalen estimates before
/// `a`, and population parts and probabilities up to day `floor(a)`, unchanged.
pub fn check_left_truncation_locality(subjects: Vec<Subject>, extra_seed: u64, table: &RateTable) -> Check {
    let model = illness_death();
    let mut rng = ChaCha8Rng::seed_from_u64(extra_seed);
    let mut newcomer = random_subject(&mut rng, 10_000);
    let a = span(&mut rng, 300.0) + 0.25;
    let shift = a - newcomer.visits[0].entry;
    for v in &mut newcomer.visits {
        v.entry += shift;
        v.exit += shift;
    }
    let (before, pb) = fit(&dataset(model.clone(), subjects.clone()), table);
    let mut more = subjects;
    more.push(newcomer);
    let (after, pa) = fit(&dataset(model.clone(), more), table);
    let times: Vec<f64> = before.times().iter().chain(after.times()).copied().filter(|&t| t < a).collect();
    for (k, e) in model.ext_transitions().iter().enumerate() {
        for &t in &times {
            let local = match e.kind {
                msrel::model::TransitionKind::Observed => true,
                _ => t <= a.floor(),
            };
            if local {
                let (x, y) = (before.value_at(k, t), after.value_at(k, t));
                ensure(x == y, || format!("{} changed at {t} < {a}: {x} vs {y}", e.id))?;
            }
        }
    }
    let n = pb.n_states();
    for &t in times.iter().filter(|&&t| t <= a.floor()) {
        for i in 0..n * n {
            let (x, y) = (pb.entry_at(t, i / n, i % n), pa.entry_at(t, i / n, i % n));
            ensure(x == y, || format!("P entry {i} changed at {t}: {x} vs {y}"))?;
        }
    }
    Ok(())
}

/// An all-zero rate table reproduces the unsplit estimates exactly.
pub fn check_zero_table(subjects: Vec<Subject>) -> Check {
    let model = illness_death();
    let data = dataset(model.clone(), subjects);
    let zero = RateTable::zero();
    let (hs, p) = fit(&data, &zero);
    let plain = data.with_model(Arc::new(model.without_splits()));
    let (hq, q) = fit(&plain, &zero);
    for sp in model.splits() {
        let (e, pop, na) = (hs.get(sp.excess).unwrap(), hs.get(sp.population).unwrap(), hq.get(sp.parent).unwrap());
        for &t in hs.times() {
            ensure(e.value_at(t) == na.value_at(t), || format!("excess {} differs at {t}", sp.excess))?;
            ensure(e.variance_at(t) == na.variance_at(t) || (e.variance_at(t).is_infinite() && na.variance_at(t).is_infinite()), || {
                format!("variance {} differs at {t}", sp.excess)
            })?;
            ensure(pop.value_at(t) == 0.0 && pop.variance_at(t) == 0.0, || format!("population {} nonzero at {t}", sp.population))?;
        }
    }
    let ext = model.ext_states();
    for &t in &p.times {
        for (i, from) in ext.iter().enumerate().filter(|(_, s)| !s.absorbing) {
            for (k, to) in ext.iter().enumerate() {
                let (x, vx) = (p.entry_at(t, i, k), p.variance_at(t, i, k).unwrap());
                let (y, vy) = if to.kind == msrel::model::TransitionKind::Population {
                    (0.0, 0.0)
                } else {
                    (q.entry_at(t, from.origin.0, to.origin.0), q.variance_at(t, from.origin.0, to.origin.0).unwrap())
                };
                ensure(x == y && vx == vy, || format!("P[{}][{}] at {t}: ({x}, {vx}) vs ({y}, {vy})", from.label, to.label))?;
            }
        }
    }
    Ok(())
}

fn visit(state: usize, entry: f64, exit: f64, event: Option<u32>) -> Visit {
    Visit { state: StateId(state), entry, exit, event: event.map(TransId) }
}

fn with_demo(id: &str, visits: Vec<Visit>) -> Subject {
    let demographics = Demographics { age_days: 20_000.0, sex: Sex::Female, origin: NaiveDate::from_ymd_opt(1995, 6, 1).unwrap() };
    Subject { id: id.into(), demographics: Some(demographics), visits }
}

/// Five illness-death subjects, one with delayed entry, and the daily hazard
/// of the constant rate table they are paired with.
pub fn micro_subjects() -> (Vec<Subject>, f64) {
    let subjects = vec![
        with_demo("1", vec![visit(0, 0.0, 2.0, Some(1)), visit(1, 2.0, 5.0, Some(3))]),
        with_demo("2", vec![visit(0, 0.0, 3.0, Some(2))]),
        with_demo("3", vec![visit(0, 0.0, 4.0, None)]),
        with_demo("4", vec![visit(0, 1.0, 4.5, Some(1)), visit(1, 4.5, 8.0, None)]),
        with_demo("5", vec![visit(0, 0.0, 7.0, None)]),
    ];
    (subjects, 0.01)
}

fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            for j in 0..n {
                c[i * n + j] += a[i * n + k] * b[k * n + j];
            }
        }
    }
    c
}

/// Worked by hand for `micro_subjects`:
///  ARF events: relapse at 2 (Y = 5), NRM at 3 (Y = 4), relapse at 4.5 (Y = 2);
///  Relapse event: death at 5 (Y = 2).
///  ARF is occupied on (0, 7] and Relapse on (2, 8], so with a constant
///  table the population parts are c t and c (t - 2).
pub fn check_micro_oracle() -> Check {
    let (subjects, c) = micro_subjects();
    let data = dataset(illness_death(), subjects);
    let (hs, p) = fit(&data, &RateTable::constant(c));
    ensure(hs.times() == [2.0, 3.0, 4.5, 5.0], || format!("grid {:?}", hs.times()))?;
    let rel = [0.2, 0.2, 0.7, 0.7];
    let nrm = [0.0, 0.25, 0.25, 0.25];
    let dar = [0.0, 0.0, 0.0, 0.5];
    let t = [2.0, 3.0, 4.5, 5.0];
    let expected: [(u32, [f64; 4], [f64; 4]); 5] = [
        (1, rel, [0.05, 0.05, 0.55, 0.55]),
        (4, std::array::from_fn(|k| nrm[k] - c * t[k]), [0.0, 1.0 / 12.0, 1.0 / 12.0, 1.0 / 12.0]),
        (5, std::array::from_fn(|k| c * t[k]), [0.0; 4]),
        (6, std::array::from_fn(|k| dar[k] - c * (t[k] - 2.0)), [0.0, 0.0, 0.0, 0.5]),
        (7, std::array::from_fn(|k| c * (t[k] - 2.0)), [0.0; 4]),
    ];
    for (id, vals, vars) in expected {
        let e = hs.get(TransId(id)).unwrap();
        for k in 0..4 {
            ensure((e.values[k] - vals[k]).abs() <= 1e-12, || format!("hazard {id} at {}: {} vs {}", t[k], e.values[k], vals[k]))?;
            ensure((e.variance[k] - vars[k]).abs() <= 1e-12, || format!("variance {id} at {}: {} vs {}", t[k], e.variance[k], vars[k]))?;
        }
    }
    // product of (I + dA) over the grid, increments written out per interval
    let n = 6;
    let mut prod = vec![0.0; n * n];
    (0..n).for_each(|i| prod[i * n + i] = 1.0);
    let mut prev = 0.0;
    for k in 0..4 {
        let dt = t[k] - prev;
        let dt_rel = (t[k] - 2.0).max(0.0) - (prev - 2.0).max(0.0);
        let (drel, dnrm, ddar) = (rel[k] - if k > 0 { rel[k - 1] } else { 0.0 }, nrm[k] - if k > 0 { nrm[k - 1] } else { 0.0 }, dar[k] - if k > 0 { dar[k - 1] } else { 0.0 });
        let mut m = vec![0.0; n * n];
        (0..n).for_each(|i| m[i * n + i] = 1.0);
        m[1] = drel;
        m[2] = dnrm - c * dt;
        m[3] = c * dt;
        m[0] = 1.0 - drel - dnrm;
        m[n + 4] = ddar - c * dt_rel;
        m[n + 5] = c * dt_rel;
        m[n + 1] = 1.0 - ddar;
        prod = matmul(&prod, &m, n);
        for i in 0..2 {
            for j in 0..n {
                let (x, y) = (p.entry_at(t[k], i, j), prod[i * n + j]);
                ensure((x - y).abs() <= 1e-12, || format!("P[{i}][{j}]({}) = {x}, hand {y}", t[k]))?;
            }
        }
        prev = t[k];
    }
    Ok(())
}

/// Two subjects, A dying at 3 and B censored at 5, under a constant table:
/// the four equally likely resamples have multiplicities (2,0), (1,1),
/// (1,1), (0,2), whose values at t = 3 are written down directly. The
/// (0,2) resample has no events, so its own grid is empty and its
/// probabilities stay at the identity.
pub fn check_two_subject_bootstrap() -> Check {
    use msrel::inference::{bootstrap_from_weights, sample_variance, Target};
    let c = 0.002;
    let alive = |id: &str, exit: f64, dies: bool| with_demo(id, vec![visit(0, 0.0, exit, dies.then_some(1))]);
    let data = dataset(survival_model(true), vec![alive("A", 3.0, true), alive("B", 5.0, false)]);
    let table = RateTable::constant(c);
    let est = Estimator::new(&data, &table, &EstimateOptions::default()).unwrap();
    let hs = est.estimate().unwrap();
    let plans = vec![vec![2.0, 0.0], vec![1.0, 1.0], vec![1.0, 1.0], vec![0.0, 2.0]];
    let split = data.model().splits()[0];
    let targets = [Target::Hazard(split.excess), Target::Hazard(split.population), Target::Prob { from: 0, to: 0 }, Target::Prob { from: 0, to: 1 }];
    let b = bootstrap_from_weights(&est, &hs, &targets, &plans, 0.0, None, None).map_err(|e| e.to_string())?;
    let na = [1.0, 0.5, 0.5, 0.0];
    let oracle: [Vec<f64>; 4] = [
        na.iter().map(|v| v - 3.0 * c).collect(),
        vec![3.0 * c; 4],
        na.iter().map(|v| 1.0 - v).collect(),
        vec![1.0 - 3.0 * c, 0.5 - 3.0 * c, 0.5 - 3.0 * c, 0.0],
    ];
    for (j, o) in oracle.iter().enumerate() {
        let k = b.times[j].iter().position(|&t| t == 3.0).ok_or("t = 3 not on the grid")?;
        let got = b.variance(j)[k].ok_or("missing variance")?;
        let want = sample_variance(o).unwrap();
        ensure((got - want).abs() <= 1e-12, || format!("target {j}: {got} vs {want}"))?;
    }
    Ok(())
}

/// Asymptotic Kolmogorov tail probability P(K > lambda).
fn kolmogorov_tail(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-sample KS p-value of `x` against the continuous CDF `cdf`.
pub fn ks_p_value(mut x: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    let d = x.iter().enumerate().fold(0.0f64, |d, (i, &v)| {
        let f = cdf(v);
        d.max(f - i as f64 / n).max((i + 1) as f64 / n - f)
    });
    let sn = n.sqrt();
    kolmogorov_tail((sn + 0.12 + 0.11 / sn) * d)
}

/// Left-truncated Weibull draws against 1 - exp(-a (t^b - r^b)); returns the p-value.
pub fn check_weibull_ks(a: f64, b: f64, r: f64, draws: usize, seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..draws).map(|_| msrel::simulate::sample_weibull_left_truncated(a, b, r, &mut rng)).collect();
    if let Some(bad) = x.iter().find(|&&t| t <= r) {
        return Err(format!("draw {bad} not beyond {r}"));
    }
    let p = ks_p_value(x, |t| -(-a * (t.powf(b) - r.powf(b))).exp_m1());
    ensure(p >= 0.001, || format!("KS p = {p:.2e} for a = {a}, b = {b}, r = {r}"))?;
    Ok(p)
}

/// Population death times under a constant daily hazard `c`, started at
/// `after`, must have the mean and variance of Exp(c) within 3 Monte Carlo SEs.
pub fn check_population_exp_moments(c: f64, after: f64, draws: usize, seed: u64) -> Check {
    let table = RateTable::constant(c);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let demo = random_demographics(&mut rng);
    let ind = table.individual(&demo);
    let x: Vec<f64> = (0..draws).map(|_| msrel::simulate::sample_population_death(&ind, after, &mut rng) - after).collect();
    let n = draws as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let (mu, sigma2) = (1.0 / c, 1.0 / (c * c));
    // exponential fourth central moment is 9 sigma^4
    let (se_mean, se_var) = ((sigma2 / n).sqrt(), sigma2 * (8.0 / n).sqrt());
    ensure((mean - mu).abs() <= 3.0 * se_mean, || format!("mean {mean} vs {mu} (se {se_mean})"))?;
    ensure((var - sigma2).abs() <= 3.0 * se_var, || format!("variance {var} vs {sigma2} (se {se_var})"))
}

/// Runs `f` inside a dedicated rayon pool of `threads` workers.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(f)
}

/// Report and truth of a simulation run as the CSV bytes the CLI would write.
pub fn simulation_bytes(
    config: &msrel::simulate::ScenarioConfig,
    table: &RateTable,
    opts: &msrel::simulate::SimOptions,
) -> Result<Vec<u8>, String> {
    let out = msrel::simulate::run_simulation(config, table, opts).map_err(|e| e.to_string())?;
    let mut buf = Vec::new();
    out.report.write_csv(&mut buf).map_err(|e| e.to_string())?;
    out.report.write_long_csv(&mut buf).map_err(|e| e.to_string())?;
    out.truth.write_csv(&mut buf).map_err(|e| e.to_string())?;
    buf.extend(format!("{:?}\n{:?}", out.censoring_rate.to_bits(), out.replications).into_bytes());
    Ok(buf)
}

/// Same bytes on a repeat and with 1, 2 and 4 worker threads.
pub fn check_simulation_determinism(
    config: &msrel::simulate::ScenarioConfig,
    table: &RateTable,
    opts: &msrel::simulate::SimOptions,
) -> Check {
    let first = simulation_bytes(config, table, opts)?;
    ensure(first == simulation_bytes(config, table, opts)?, || "repeated run differs".into())?;
    for threads in [1, 2, 4] {
        let other = with_threads(threads, || simulation_bytes(config, table, opts))?;
        ensure(first == other, || format!("{threads}-thread run differs"))?;
    }
    Ok(())
}

/// Bootstrap replicates bit-identical across thread counts.
pub fn check_bootstrap_determinism(seed: u64, n: usize, b: usize) -> Check {
    use msrel::inference::{bootstrap, BootstrapOptions, Target};
    let data = dataset(illness_death(), random_subjects(seed, n));
    let table = strong_table();
    let est = Estimator::new(&data, &table, &EstimateOptions::default()).map_err(|e| e.to_string())?;
    let hs = est.estimate().map_err(|e| e.to_string())?;
    let mut targets: Vec<Target> = hs.extended().iter().map(|e| Target::Hazard(e.trans)).collect();
    targets.extend((0..hs.model().n_ext_states()).map(|to| Target::Prob { from: 0, to }));
    let opts = BootstrapOptions { b, seed, s: 0.0, t_max: None, at: None };
    let run = || bootstrap(&est, &hs, &targets, &opts).map(|r| format!("{:?}", r)).map_err(|e| e.to_string());
    let first = run()?;
    for threads in [1, 3] {
        ensure(first == with_threads(threads, run)?, || format!("{threads}-thread bootstrap differs"))?;
    }
    Ok(())
}
