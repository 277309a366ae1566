//! Replications and performance measures.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::truth::{sim_targets, target_label, TrueValues, TruthMethod};
use super::{censoring_rate, eval_days, generate_dataset, true_values, ScenarioConfig, SimError};
use crate::hazards::{EstimateOptions, Estimator};
use crate::inference::{
    bootstrap, log_interval, plain_interval, quantile_interval, BootstrapOptions, CiMethod, Interval, Target,
};
use crate::probtrans::aalen_johansen_with_variance;
use crate::ratetable::{RateTable, DAYS_PER_YEAR};

#[derive(Debug, Clone, PartialEq)]
pub struct SimOptions {
    pub n_sim: usize,
    pub b: usize,
    pub level: f64,
    pub methods: Vec<CiMethod>,
    pub seed: u64,
    pub truth: TruthMethod,
}

impl SimOptions {
    pub fn from_config(config: &ScenarioConfig) -> Self {
        SimOptions {
            n_sim: config.n_sim,
            b: config.bootstrap,
            level: 0.95,
            methods: CiMethod::ALL.to_vec(),
            seed: config.seed.unwrap_or_default(),
            truth: TruthMethod::default(),
        }
    }
}

/// Estimates of one simulated dataset at the evaluation days, indexed `[target][time]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationResult {
    pub index: usize,
    pub estimates: Vec<Vec<f64>>,
    pub greenwood_var: Vec<Vec<f64>>,
    pub boot_var: Vec<Vec<Option<f64>>>,
    /// `intervals[method][target][time]`, methods as in `SimOptions::methods`.
    pub intervals: Vec<Vec<Vec<Interval>>>,
}

/// Simulates and analyses replication `index`; its randomness comes from
/// stream `index` of the run seed.
pub fn run_replication(
    config: &ScenarioConfig,
    table: &RateTable,
    censoring_rate: f64,
    opts: &SimOptions,
    index: usize,
) -> Result<ReplicationResult, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(index as u64);
    let boot_seed = rng.next_u64();
    let data = generate_dataset(config, table, censoring_rate, &mut rng)?;
    let times = eval_days();
    let est_opts = EstimateOptions { dense: false, extra_times: times.clone(), t_max: Some(config.horizon_days()) };
    let estimator = Estimator::new(&data, table, &est_opts)?;
    let hs = estimator.estimate()?;
    let p = aalen_johansen_with_variance(&hs, 0.0, None)?;
    let targets = sim_targets();

    let mut estimates = Vec::with_capacity(targets.len());
    let mut greenwood_var = Vec::with_capacity(targets.len());
    for t in &targets {
        let (e, v): (Vec<f64>, Vec<f64>) = match *t {
            Target::Hazard(id) => {
                let h = hs.get(id).expect("illness-death transition");
                times.iter().map(|&u| (h.value_at(u), h.variance_at(u))).unzip()
            }
            Target::Prob { from, to } => times
                .iter()
                .map(|&u| (p.entry_at(u, from, to), p.variance_at(u, from, to).expect("variance requested")))
                .unzip(),
        };
        estimates.push(e);
        greenwood_var.push(v);
    }

    let boot = if opts.methods.iter().any(|m| m.needs_bootstrap()) {
        let bo = BootstrapOptions { b: opts.b, seed: boot_seed, s: 0.0, t_max: None, at: Some(times.clone()) };
        Some(bootstrap(&estimator, &hs, &targets, &bo)?)
    } else {
        None
    };
    let boot_var: Vec<Vec<Option<f64>>> = (0..targets.len())
        .map(|j| boot.as_ref().map_or_else(|| vec![None; times.len()], |b| b.variance(j)))
        .collect();

    let intervals = opts
        .methods
        .iter()
        .map(|&m| {
            (0..targets.len())
                .map(|j| {
                    (0..times.len())
                        .map(|k| {
                            let theta = estimates[j][k];
                            match m {
                                CiMethod::PlainGreenwood => plain_interval(theta, Some(greenwood_var[j][k]), opts.level),
                                CiMethod::PlainBoot => plain_interval(theta, boot_var[j][k], opts.level),
                                CiMethod::LogBoot => log_interval(theta, boot_var[j][k], opts.level),
                                CiMethod::QuantileBoot => {
                                    quantile_interval(&boot.as_ref().expect("bootstrap").replicates(j, k), opts.level)
                                }
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    Ok(ReplicationResult { index, estimates, greenwood_var, boot_var, intervals })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerfRow {
    pub target: String,
    pub time_days: f64,
    pub truth: f64,
    pub mean: f64,
    /// `truth - mean`.
    pub abs_bias: f64,
    /// `(truth - mean) / truth`; missing when the truth is 0.
    pub rel_bias: Option<f64>,
    pub emp_se: Option<f64>,
    /// Mean over replications with a finite Greenwood variance.
    pub greenwood_se: f64,
    /// Replications whose Greenwood variance is infinite.
    pub greenwood_infinite: usize,
    pub boot_se: Option<f64>,
    /// Per method: share of defined intervals containing the truth.
    pub coverage: Vec<Option<f64>>,
    /// Per method: replications with a defined interval.
    pub n_defined: Vec<usize>,
    pub n_sim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerformanceReport {
    pub scenario: String,
    pub methods: Vec<CiMethod>,
    pub targets: Vec<Target>,
    pub rows: Vec<PerfRow>,
}

fn mean(x: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = x.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Performance measures of the replications against the truth.
pub fn evaluate(results: &[ReplicationResult], truth: &TrueValues, methods: &[CiMethod]) -> PerformanceReport {
    let mut rows = Vec::new();
    for (j, target) in truth.targets.iter().enumerate() {
        for (k, &day) in truth.times.iter().enumerate() {
            let theta = truth.values[j][k];
            let est: Vec<f64> = results.iter().map(|r| r.estimates[j][k]).collect();
            let m = mean(est.iter().copied()).unwrap_or(f64::NAN);
            let emp_se = crate::inference::sample_variance(&est).map(f64::sqrt);
            let gw: Vec<f64> = results.iter().map(|r| r.greenwood_var[j][k].sqrt()).collect();
            let greenwood_se = mean(gw.iter().copied().filter(|v| v.is_finite())).unwrap_or(f64::NAN);
            let greenwood_infinite = gw.iter().filter(|v| v.is_infinite()).count();
            let boot_se = mean(results.iter().filter_map(|r| r.boot_var[j][k]).map(f64::sqrt));
            let (coverage, n_defined) = (0..methods.len())
                .map(|mi| {
                    let defined: Vec<&Interval> =
                        results.iter().map(|r| &r.intervals[mi][j][k]).filter(|i| i.is_defined()).collect();
                    let hit = defined.iter().filter(|i| i.contains(theta)).count();
                    ((!defined.is_empty()).then(|| hit as f64 / defined.len() as f64), defined.len())
                })
                .unzip();
            rows.push(PerfRow {
                target: target_label(*target),
                time_days: day,
                truth: theta,
                mean: m,
                abs_bias: theta - m,
                rel_bias: (theta != 0.0).then(|| (theta - m) / theta),
                emp_se,
                greenwood_se,
                greenwood_infinite,
                boot_se,
                coverage,
                n_defined,
                n_sim: results.len(),
            });
        }
    }
    PerformanceReport { scenario: truth.scenario.clone(), methods: methods.to_vec(), targets: truth.targets.clone(), rows }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.10e}"))
}

fn years(day: f64) -> String {
    format!("{}", (day / DAYS_PER_YEAR * 100.0).round() / 100.0)
}

impl PerformanceReport {
    pub fn row(&self, target: Target, time_days: f64) -> Option<&PerfRow> {
        let label = target_label(target);
        self.rows.iter().find(|r| r.target == label && r.time_days == time_days)
    }

    pub fn method_index(&self, m: CiMethod) -> Option<usize> {
        self.methods.iter().position(|&x| x == m)
    }

    /// One row per target and time.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<String> = [
            "scenario", "target", "time_days", "time_years", "truth", "mean", "abs_bias", "rel_bias", "emp_se",
            "greenwood_se", "greenwood_infinite", "boot_se",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for m in &self.methods {
            header.push(format!("coverage_{m}"));
            header.push(format!("n_defined_{m}"));
        }
        header.push("n_sim".into());
        out.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                self.scenario.clone(),
                r.target.clone(),
                format!("{}", r.time_days),
                years(r.time_days),
                format!("{:.10e}", r.truth),
                format!("{:.10e}", r.mean),
                format!("{:.10e}", r.abs_bias),
                opt(r.rel_bias),
                opt(r.emp_se),
                format!("{:.10e}", r.greenwood_se),
                r.greenwood_infinite.to_string(),
                opt(r.boot_se),
            ];
            for (c, n) in r.coverage.iter().zip(&r.n_defined) {
                rec.push(opt(*c));
                rec.push(n.to_string());
            }
            rec.push(r.n_sim.to_string());
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Long format: one row per target, time, measure and method, for plotting.
    pub fn write_long_csv<W: std::io::Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["scenario", "target", "time_years", "measure", "method", "value"])?;
        for r in &self.rows {
            let mut put = |measure: &str, method: &str, v: Option<f64>| {
                out.write_record([&self.scenario, &r.target, &years(r.time_days), measure, method, &opt(v)])
            };
            put("rel_bias", "", r.rel_bias)?;
            put("abs_bias", "", Some(r.abs_bias))?;
            put("se", "empirical", r.emp_se)?;
            put("se", "greenwood", Some(r.greenwood_se))?;
            put("se", "bootstrap", r.boot_se)?;
            for (m, c) in self.methods.iter().zip(&r.coverage) {
                put("coverage", &m.to_string(), *c)?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SimulationOutput {
    pub truth: TrueValues,
    /// Per day.
    pub censoring_rate: f64,
    pub replications: Vec<ReplicationResult>,
    pub report: PerformanceReport,
}

/// Truth, all replications and their performance report.
pub fn run_simulation(config: &ScenarioConfig, table: &RateTable, opts: &SimOptions) -> Result<SimulationOutput, SimError> {
    config.validate()?;
    let truth = true_values(config, table, opts.truth)?;
    let rate = censoring_rate(config, table)?;
    let replications: Vec<ReplicationResult> = (0..opts.n_sim)
        .into_par_iter()
        .map(|i| run_replication(config, table, rate, opts, i))
        .collect::<Result<_, _>>()?;
    let report = evaluate(&replications, &truth, &opts.methods);
    Ok(SimulationOutput { truth, censoring_rate: rate, replications, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::CiFlag;
    use crate::model::TransId;

    fn truth(theta: f64) -> TrueValues {
        TrueValues {
            scenario: "t".into(),
            times: vec![365.0],
            targets: vec![Target::Hazard(TransId(1))],
            values: vec![vec![theta]],
            nodes: (1, 1),
            change: 0.0,
        }
    }

    fn rep(est: f64, iv: Interval) -> ReplicationResult {
        ReplicationResult {
            index: 0,
            estimates: vec![vec![est]],
            greenwood_var: vec![vec![0.04]],
            boot_var: vec![vec![Some(0.09)]],
            intervals: vec![vec![vec![iv]]],
        }
    }

    fn iv(lower: f64, upper: f64) -> Interval {
        Interval { lower, upper, flag: CiFlag::Ok }
    }

    #[test]
    fn exact_estimates() {
        let r = vec![rep(0.5, iv(0.4, 0.6)); 5];
        let rep = evaluate(&r, &truth(0.5), &[CiMethod::PlainBoot]);
        let row = &rep.rows[0];
        assert_eq!((row.abs_bias, row.rel_bias, row.emp_se), (0.0, Some(0.0), Some(0.0)));
        assert_eq!(row.coverage, vec![Some(1.0)]);
        assert!((row.greenwood_se - 0.2).abs() < 1e-15);
        assert!((row.boot_se.unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn two_point_empirical_se() {
        let (theta, delta) = (0.3, 0.05);
        let r = vec![rep(theta + delta, iv(0.0, 0.1)), rep(theta - delta, iv(0.0, 0.1))];
        let row = &evaluate(&r, &truth(theta), &[CiMethod::LogBoot]).rows[0];
        assert!(row.abs_bias.abs() < 1e-15);
        assert!((row.emp_se.unwrap() - delta * 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(row.coverage, vec![Some(0.0)]);
    }

    #[test]
    fn zero_truth_has_no_relative_bias() {
        let r = vec![rep(0.1, iv(0.0, 1.0))];
        let row = &evaluate(&r, &truth(0.0), &[CiMethod::PlainBoot]).rows[0];
        assert_eq!(row.rel_bias, None);
        assert!((row.abs_bias + 0.1).abs() < 1e-15);
        assert_eq!(row.emp_se, None);
    }

    #[test]
    fn undefined_intervals_are_excluded() {
        let undefined = Interval { lower: f64::NAN, upper: f64::NAN, flag: CiFlag::Undefined };
        let r = vec![rep(0.5, iv(0.4, 0.6)), rep(0.0, undefined)];
        let row = &evaluate(&r, &truth(0.5), &[CiMethod::LogBoot]).rows[0];
        assert_eq!(row.n_defined, vec![1]);
        assert_eq!(row.coverage, vec![Some(1.0)]);
    }

    #[test]
    fn replication_is_reproducible() {
        let mut c = ScenarioConfig::builtin("exp.small").unwrap();
        c.n = 200;
        let table = RateTable::demo();
        let opts = SimOptions { b: 5, ..SimOptions::from_config(&c) };
        let a = run_replication(&c, &table, 1e-4, &opts, 3).unwrap();
        let b = run_replication(&c, &table, 1e-4, &opts, 3).unwrap();
        assert_eq!(a, b);
        let other = run_replication(&c, &table, 1e-4, &opts, 4).unwrap();
        assert_ne!(a.estimates, other.estimates);
        // population hazards carry no Greenwood variance
        assert!(a.greenwood_var[2].iter().all(|&v| v == 0.0));
    }
}
