//! Aalen-Johansen transition probabilities on the extended model.
//!
//! `P(s, t)` is the product over grid times `u` in `(s, t]` of
//! `I + dA(u)`, where `dA(u)` holds the hazard increments of the extended
//! transitions since the previous grid time. Population increments between
//! grid times are therefore folded into the next factor. Diagonal entries
//! are minus the summed Nelson-Aalen increments of the observed exits, so
//! the two halves of a split transition together move exactly the observed
//! mass.
//!
//! The covariance recursion propagates the previous covariance through the
//! linearised factor and adds the multinomial plug-in covariance of the
//! current increments. Population increments count as known constants.

use thiserror::Error;

use crate::hazards::HazardSet;
use crate::model::TransitionKind;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProbTransError {
    #[error("hazard increments out of `{state}` exceed 1 at time {time}")]
    NegativeDiagonal { time: f64, state: String },
    #[error("invalid interval: s = {s}, t_max = {t_max}")]
    Interval { s: f64, t_max: f64 },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProbFlags {
    /// First grid time at which each `(from, to)` entry became negative.
    pub negative: Vec<(f64, usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbTransEstimate {
    pub s: f64,
    pub times: Vec<f64>,
    n: usize,
    /// Row-major `n x n` matrices, one per grid time.
    pub matrices: Vec<Vec<f64>>,
    /// Variance of every matrix entry, row-major like `matrices`.
    pub variance: Option<Vec<Vec<f64>>>,
    pub flags: ProbFlags,
}

impl ProbTransEstimate {
    pub fn n_states(&self) -> usize {
        self.n
    }

    fn index_at(&self, t: f64) -> Option<usize> {
        self.times.partition_point(|&g| g <= t).checked_sub(1)
    }

    /// `P(s, t)`, constant between grid times and the identity before the first.
    pub fn matrix_at(&self, t: f64) -> Vec<f64> {
        match self.index_at(t) {
            Some(k) => self.matrices[k].clone(),
            None => identity(self.n),
        }
    }

    pub fn entry_at(&self, t: f64, from: usize, to: usize) -> f64 {
        match self.index_at(t) {
            Some(k) => self.matrices[k][from * self.n + to],
            None => (from == to) as u8 as f64,
        }
    }

    pub fn variance_at(&self, t: f64, from: usize, to: usize) -> Option<f64> {
        let var = self.variance.as_ref()?;
        Some(match self.index_at(t) {
            Some(k) => var[k][from * self.n + to],
            None => 0.0,
        })
    }
}

fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

/// Aalen-Johansen estimate of `P(s, t)` for grid times `t` in `(s, t_max]`.
pub fn aalen_johansen(hazards: &HazardSet, s: f64, t_max: Option<f64>) -> Result<ProbTransEstimate, ProbTransError> {
    product_integral(hazards, s, t_max, false)
}

/// Aalen-Johansen estimate together with Greenwood-type entry variances.
pub fn aalen_johansen_with_variance(
    hazards: &HazardSet,
    s: f64,
    t_max: Option<f64>,
) -> Result<ProbTransEstimate, ProbTransError> {
    product_integral(hazards, s, t_max, true)
}

/// Greenwood-type variance of every entry of `P(s, t)` at each grid time.
pub fn greenwood_cov(hazards: &HazardSet, s: f64, t_max: Option<f64>) -> Result<Vec<Vec<f64>>, ProbTransError> {
    Ok(product_integral(hazards, s, t_max, true)?.variance.expect("requested"))
}

fn product_integral(
    hs: &HazardSet,
    s: f64,
    t_max: Option<f64>,
    with_var: bool,
) -> Result<ProbTransEstimate, ProbTransError> {
    let model = hs.model();
    let t_max = t_max.unwrap_or(f64::INFINITY);
    if !(s >= 0.0) || t_max < s {
        return Err(ProbTransError::Interval { s, t_max });
    }
    let n = model.n_ext_states();
    let ext = model.ext_transitions();
    let times = hs.times();
    let k0 = times.partition_point(|&g| g <= s);
    let k1 = times.partition_point(|&g| g <= t_max);

    // Observed exits of each extended state, for the diagonal.
    let mut parents: Vec<Vec<usize>> = vec![Vec::new(); n];
    for et in ext {
        let p = et.parent.index();
        if !parents[et.from].contains(&p) {
            parents[et.from].push(p);
        }
    }
    let observed = hs.observed();

    let mut prev_ext: Vec<f64> = (0..ext.len()).map(|i| hs.value_at(i, s)).collect();
    let mut prev_obs: Vec<f64> = observed.iter().map(|o| o.value_at(s)).collect();

    let mut p = identity(n);
    let mut var_rows: Vec<Vec<f64>> = if with_var { vec![vec![0.0; n * n]; n] } else { Vec::new() };
    let mut out_times = Vec::with_capacity(k1.saturating_sub(k0));
    let mut matrices = Vec::with_capacity(out_times.capacity());
    let mut variances = Vec::new();
    let mut flags = ProbFlags::default();
    let mut flagged = vec![false; n * n];

    let mut delta = vec![0.0; ext.len()];
    let mut diag = vec![0.0; n];
    for k in k0..k1 {
        let t = times[k];
        for (i, e) in hs.extended().iter().enumerate() {
            delta[i] = e.values[k] - prev_ext[i];
            prev_ext[i] = e.values[k];
        }
        let mut obs_delta = vec![0.0; observed.len()];
        for (j, o) in observed.iter().enumerate() {
            obs_delta[j] = o.values[k] - prev_obs[j];
            prev_obs[j] = o.values[k];
        }
        for h in 0..n {
            diag[h] = -parents[h].iter().map(|&j| obs_delta[j]).sum::<f64>();
            if 1.0 + diag[h] < -1e-12 {
                return Err(ProbTransError::NegativeDiagonal { time: t, state: model.ext_states()[h].label.clone() });
            }
        }

        let old = p.clone();
        for i in 0..n {
            for h in 0..n {
                let w = old[i * n + h];
                if w != 0.0 {
                    p[i * n + h] += w * diag[h];
                }
            }
            for (e, et) in ext.iter().enumerate() {
                let w = old[i * n + et.from];
                if w != 0.0 {
                    p[i * n + et.to] += w * delta[e];
                }
            }
        }

        if with_var {
            let b = {
                let mut b = identity(n);
                for h in 0..n {
                    b[h * n + h] += diag[h];
                }
                for (e, et) in ext.iter().enumerate() {
                    b[et.from * n + et.to] += delta[e];
                }
                b
            };
            let c = increment_covariances(hs, k, n);
            for (i, v) in var_rows.iter_mut().enumerate() {
                let mut tmp = vec![0.0; n * n];
                for a in 0..n {
                    for bb in 0..n {
                        let vab = v[a * n + bb];
                        if vab != 0.0 {
                            for jp in 0..n {
                                tmp[a * n + jp] += vab * b[bb * n + jp];
                            }
                        }
                    }
                }
                let mut next = vec![0.0; n * n];
                for a in 0..n {
                    for j in 0..n {
                        let baj = b[a * n + j];
                        if baj != 0.0 {
                            for jp in 0..n {
                                next[j * n + jp] += baj * tmp[a * n + jp];
                            }
                        }
                    }
                }
                for (h, ch) in c.iter().enumerate() {
                    if let Some(ch) = ch {
                        let w = old[i * n + h] * old[i * n + h];
                        if w != 0.0 {
                            for (x, y) in next.iter_mut().zip(ch) {
                                *x += w * y;
                            }
                        }
                    }
                }
                *v = next;
            }
            let mut entry_var = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    entry_var[i * n + j] = var_rows[i][j * n + j];
                }
            }
            variances.push(entry_var);
        }

        for (idx, &x) in p.iter().enumerate() {
            if x < 0.0 && !flagged[idx] {
                flagged[idx] = true;
                flags.negative.push((t, idx / n, idx % n));
            }
        }
        out_times.push(t);
        matrices.push(p.clone());
    }

    Ok(ProbTransEstimate { s, times: out_times, n, matrices, variance: with_var.then_some(variances), flags })
}

/// Covariance of row `h` of the increment matrix at grid index `k`, for every extended state `h`.
fn increment_covariances(hs: &HazardSet, k: usize, n: usize) -> Vec<Option<Vec<f64>>> {
    let model = hs.model();
    let mut out = vec![None; n];
    for (h, st) in model.ext_states().iter().enumerate() {
        if st.absorbing {
            continue;
        }
        let y = hs.at_risk(st.origin)[k];
        // (target column, event count) for each outgoing extended transition
        let cols: Vec<(usize, f64)> = model
            .ext_transitions()
            .iter()
            .filter(|et| et.from == h)
            .map(|et| {
                let count = match et.kind {
                    TransitionKind::Population => 0.0,
                    _ => hs.counts(et.parent)[k],
                };
                (et.to, count)
            })
            .collect();
        let n_tot: f64 = model.outgoing(st.origin).map(|t| hs.counts(t.id)[k]).sum();
        if y <= 0.0 || n_tot <= 0.0 {
            continue;
        }
        let y3 = y * y * y;
        let mut c = vec![0.0; n * n];
        for &(a, na) in &cols {
            for &(b, nb) in &cols {
                let d = if a == b { y } else { 0.0 };
                c[a * n + b] += na * (d - nb) / y3;
            }
            let ah = -na * (y - n_tot) / y3;
            c[a * n + h] += ah;
            c[h * n + a] += ah;
        }
        c[h * n + h] += n_tot * (y - n_tot) / y3;
        out[h] = Some(c);
    }
    out
}
