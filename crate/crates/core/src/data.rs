//! Long-format event-history data.
//!
//! Input rows follow the usual multi-state layout: one row per subject and
//! possible transition out of the state currently occupied, with entry time
//! `Tstart`, exit time `Tstop` and `status = 1` for the transition that
//! actually happened. Rows are folded into per-subject [`Visit`]s, one per
//! sojourn in a transient state. All times are days since the subject's
//! origin. A subject is at risk in a state over `(entry, exit]`.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{StateId, TransId, TransitionModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sex {
    Male,
    Female,
}

impl Sex {
    pub fn index(self) -> usize {
        match self {
            Sex::Male => 0,
            Sex::Female => 1,
        }
    }
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sex::Male => "M",
            Sex::Female => "F",
        })
    }
}

/// Maps raw sex codes to [`Sex`]. Matching is case-insensitive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SexCoding {
    pub male: Vec<String>,
    pub female: Vec<String>,
}

impl Default for SexCoding {
    fn default() -> Self {
        Self {
            male: vec!["M".into(), "male".into(), "1".into()],
            female: vec!["F".into(), "female".into(), "2".into()],
        }
    }
}

impl SexCoding {
    pub fn parse(&self, raw: &str) -> Option<Sex> {
        let raw = raw.trim();
        if self.male.iter().any(|c| c.eq_ignore_ascii_case(raw)) {
            Some(Sex::Male)
        } else if self.female.iter().any(|c| c.eq_ignore_ascii_case(raw)) {
            Some(Sex::Female)
        } else {
            None
        }
    }
}

/// Covariates used to match a subject against a rate table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Demographics {
    /// Age at time origin, in days.
    pub age_days: f64,
    pub sex: Sex,
    /// Calendar date of the time origin.
    pub origin: NaiveDate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransRecord {
    pub subject: String,
    pub trans: TransId,
    pub t_start: f64,
    pub t_stop: f64,
    pub status: bool,
    /// 1-based line in the source file, when read from one.
    pub line: Option<usize>,
}

/// One sojourn of a subject in a transient state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Visit {
    pub state: StateId,
    pub entry: f64,
    pub exit: f64,
    /// Transition taken at `exit`; `None` means censored.
    pub event: Option<TransId>,
}

impl Visit {
    #[inline]
    pub fn at_risk(&self, t: f64) -> bool {
        self.entry < t && t <= self.exit
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    pub demographics: Option<Demographics>,
    pub visits: Vec<Visit>,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read data: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column `{0}`")]
    MissingColumn(&'static str),
    #[error("{at}: {msg}")]
    Field { at: Location, msg: String },
    #[error("{at}: unknown transition id {trans}")]
    UnknownTrans { at: Location, trans: u32 },
    #[error("{at}: invalid interval ({start}, {stop}]")]
    Interval { at: Location, start: f64, stop: f64 },
    #[error("{at}: more than one event from the same state at time {time}")]
    CompetingEvents { at: Location, time: f64 },
    #[error("{at}: inconsistent trajectory: {msg}")]
    Trajectory { at: Location, msg: String },
    #[error("subject `{0}` has inconsistent demographics across rows")]
    Demographics(String),
    #[error("dataset has no subjects")]
    Empty,
}

/// Where a validation error was found.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Location {
    pub subject: String,
    pub line: Option<usize>,
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {} (subject `{}`)", l, self.subject),
            None => write!(f, "subject `{}`", self.subject),
        }
    }
}

fn at(subject: &str, line: Option<usize>) -> Location {
    Location { subject: subject.to_string(), line }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadOptions {
    /// Multiplier turning the file's time unit into days.
    pub time_scale: f64,
    /// Multiplier turning the file's age unit into days.
    pub age_scale: f64,
    pub sex: SexCoding,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { time_scale: 1.0, age_scale: 1.0, sex: SexCoding::default() }
    }
}

#[derive(Debug, Clone)]
pub struct EventDataset {
    model: Arc<TransitionModel>,
    subjects: Vec<Subject>,
}

impl EventDataset {
    /// Validates per-subject trajectories against the model.
    pub fn new(model: Arc<TransitionModel>, subjects: Vec<Subject>) -> Result<Self, DataError> {
        for s in &subjects {
            validate_visits(&model, s)?;
        }
        Ok(Self { model, subjects })
    }

    /// Folds long-format rows into visits and validates them.
    pub fn from_records(
        model: Arc<TransitionModel>,
        records: &[TransRecord],
        demographics: &HashMap<String, Demographics>,
    ) -> Result<Self, DataError> {
        let mut order: Vec<&str> = Vec::new();
        let mut by_subject: HashMap<&str, Vec<&TransRecord>> = HashMap::new();
        for r in records {
            let loc = || at(&r.subject, r.line);
            let trans = model
                .transition(r.trans)
                .ok_or_else(|| DataError::UnknownTrans { at: loc(), trans: r.trans.0 })?;
            let _ = trans;
            if !(r.t_start.is_finite() && r.t_stop.is_finite()) || r.t_start < 0.0 || r.t_stop <= r.t_start {
                return Err(DataError::Interval { at: loc(), start: r.t_start, stop: r.t_stop });
            }
            by_subject
                .entry(r.subject.as_str())
                .or_insert_with(|| {
                    order.push(r.subject.as_str());
                    Vec::new()
                })
                .push(r);
        }

        let mut subjects = Vec::with_capacity(order.len());
        for id in order {
            let rows = &by_subject[id];
            // A block is one sojourn: all rows sharing source state and entry time.
            let mut blocks: Vec<(StateId, f64, Vec<&TransRecord>)> = Vec::new();
            for &r in rows {
                let from = model.transition(r.trans).expect("checked above").from;
                match blocks.iter_mut().find(|(s, t, _)| *s == from && *t == r.t_start) {
                    Some(b) => b.2.push(r),
                    None => blocks.push((from, r.t_start, vec![r])),
                }
            }
            blocks.sort_by(|a, b| a.1.total_cmp(&b.1));
            let mut visits = Vec::with_capacity(blocks.len());
            for (state, entry, rows) in blocks {
                let first = rows[0];
                let mut event = None;
                for r in &rows {
                    if r.t_stop != first.t_stop {
                        return Err(DataError::Trajectory {
                            at: at(id, r.line),
                            msg: format!(
                                "rows leaving the same state at {} have different exit times ({} vs {})",
                                entry, first.t_stop, r.t_stop
                            ),
                        });
                    }
                    if rows.iter().filter(|o| o.trans == r.trans).count() > 1 {
                        return Err(DataError::Trajectory {
                            at: at(id, r.line),
                            msg: format!("transition {} listed twice for the same sojourn", r.trans),
                        });
                    }
                    if r.status {
                        if event.is_some() {
                            return Err(DataError::CompetingEvents { at: at(id, r.line), time: r.t_stop });
                        }
                        event = Some(r.trans);
                    }
                }
                visits.push(Visit { state, entry, exit: first.t_stop, event });
            }
            subjects.push(Subject { id: id.to_string(), demographics: demographics.get(id).copied(), visits });
        }
        if subjects.is_empty() {
            return Err(DataError::Empty);
        }
        Self::new(model, subjects)
    }

    /// The same subjects under another model with identical observed states
    /// and transitions (e.g. with splits added or removed).
    pub fn with_model(&self, model: Arc<TransitionModel>) -> Self {
        assert_eq!(model.states(), self.model.states(), "observed states differ");
        assert_eq!(model.transitions(), self.model.transitions(), "observed transitions differ");
        Self { model, subjects: self.subjects.clone() }
    }

    pub fn model(&self) -> &TransitionModel {
        &self.model
    }

    pub fn model_arc(&self) -> &Arc<TransitionModel> {
        &self.model
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    /// Number of subjects in `state` just before `t`.
    pub fn risk_set_size(&self, state: StateId, t: f64) -> usize {
        self.subjects
            .iter()
            .map(|s| s.visits.iter().filter(|v| v.state == state && v.at_risk(t)).count())
            .sum()
    }

    /// Sorted distinct times at which any transition occurs.
    pub fn event_times(&self) -> Vec<f64> {
        let mut times: Vec<f64> = self
            .subjects
            .iter()
            .flat_map(|s| s.visits.iter().filter(|v| v.event.is_some()).map(|v| v.exit))
            .collect();
        times.sort_by(f64::total_cmp);
        times.dedup();
        times
    }

    /// Expands visits back into long-format rows.
    pub fn to_records(&self) -> Vec<TransRecord> {
        let mut out = Vec::new();
        for s in &self.subjects {
            for v in &s.visits {
                for t in self.model.outgoing(v.state) {
                    out.push(TransRecord {
                        subject: s.id.clone(),
                        trans: t.id,
                        t_start: v.entry,
                        t_stop: v.exit,
                        status: v.event == Some(t.id),
                        line: None,
                    });
                }
            }
        }
        out
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), DataError> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["id", "trans", "Tstart", "Tstop", "status", "age", "sex", "date"])?;
        let demo: HashMap<&str, Option<Demographics>> =
            self.subjects.iter().map(|s| (s.id.as_str(), s.demographics)).collect();
        for r in self.to_records() {
            let (age, sex, date) = match demo[r.subject.as_str()] {
                Some(d) => (format!("{}", d.age_days), d.sex.to_string(), d.origin.format("%Y-%m-%d").to_string()),
                None => (String::new(), String::new(), String::new()),
            };
            wtr.write_record([
                r.subject.clone(),
                r.trans.to_string(),
                format!("{}", r.t_start),
                format!("{}", r.t_stop),
                (r.status as u8).to_string(),
                age,
                sex,
                date,
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn validate_visits(model: &TransitionModel, s: &Subject) -> Result<(), DataError> {
    let err = |msg: String| DataError::Trajectory { at: at(&s.id, None), msg };
    if s.visits.is_empty() {
        return Err(err("no records".into()));
    }
    for (k, v) in s.visits.iter().enumerate() {
        if v.state.0 >= model.n_states() {
            return Err(err(format!("unknown state index {}", v.state.0)));
        }
        if model.is_absorbing(v.state) {
            return Err(err(format!("record out of absorbing state `{}`", model.states()[v.state.0].name)));
        }
        if !(v.entry.is_finite() && v.exit.is_finite()) || v.entry < 0.0 || v.exit <= v.entry {
            return Err(DataError::Interval { at: at(&s.id, None), start: v.entry, stop: v.exit });
        }
        if let Some(ev) = v.event {
            match model.transition(ev) {
                Some(t) if t.from == v.state => {}
                _ => return Err(err(format!("transition {} cannot leave state `{}`", ev, model.states()[v.state.0].name))),
            }
        }
        if let Some(next) = s.visits.get(k + 1) {
            let target = match v.event {
                Some(ev) => model.transition(ev).expect("checked").to,
                None => return Err(err(format!("records continue after censoring at {}", v.exit))),
            };
            if next.state != target {
                return Err(err(format!(
                    "entered `{}` at {} but next record leaves `{}`",
                    model.states()[target.0].name,
                    v.exit,
                    model.states()[next.state.0].name
                )));
            }
            if next.entry != v.exit {
                return Err(err(format!("record starts at {} but previous sojourn ended at {}", next.entry, v.exit)));
            }
        }
    }
    Ok(())
}

/// Reads a long-format CSV with columns `id, trans, Tstart, Tstop, status, age, sex, date`.
pub fn load_dataset(
    path: impl AsRef<Path>,
    model: Arc<TransitionModel>,
    opts: &LoadOptions,
) -> Result<EventDataset, DataError> {
    let file = std::fs::File::open(path)?;
    read_dataset(file, model, opts)
}

pub fn read_dataset<R: Read>(
    reader: R,
    model: Arc<TransitionModel>,
    opts: &LoadOptions,
) -> Result<EventDataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &'static str| -> Result<usize, DataError> {
        headers.iter().position(|h| h == name).ok_or(DataError::MissingColumn(name))
    };
    let (c_id, c_trans, c_start, c_stop, c_status) =
        (col("id")?, col("trans")?, col("Tstart")?, col("Tstop")?, col("status")?);
    let (c_age, c_sex, c_date) = (col("age")?, col("sex")?, col("date")?);

    let mut records = Vec::new();
    let mut demographics: HashMap<String, Demographics> = HashMap::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map(|p| p.line() as usize);
        let id = row.get(c_id).unwrap_or("").to_string();
        let loc = || at(&id, line);
        let num = |c: usize, name: &str| -> Result<f64, DataError> {
            let raw = row.get(c).unwrap_or("");
            raw.parse::<f64>()
                .map_err(|_| DataError::Field { at: loc(), msg: format!("column `{}`: cannot parse `{}`", name, raw) })
        };
        let trans_raw = row.get(c_trans).unwrap_or("");
        let trans = trans_raw
            .parse::<u32>()
            .map_err(|_| DataError::Field { at: loc(), msg: format!("column `trans`: cannot parse `{}`", trans_raw) })?;
        let status = match row.get(c_status).unwrap_or("") {
            "0" => false,
            "1" => true,
            other => {
                return Err(DataError::Field { at: loc(), msg: format!("column `status`: expected 0 or 1, got `{}`", other) })
            }
        };
        let age = num(c_age, "age")? * opts.age_scale;
        if !(age >= 0.0 && age.is_finite()) {
            return Err(DataError::Field { at: loc(), msg: format!("negative or invalid age {}", age) });
        }
        let sex_raw = row.get(c_sex).unwrap_or("");
        let sex = opts
            .sex
            .parse(sex_raw)
            .ok_or_else(|| DataError::Field { at: loc(), msg: format!("column `sex`: unknown code `{}`", sex_raw) })?;
        let date_raw = row.get(c_date).unwrap_or("");
        let origin = NaiveDate::parse_from_str(date_raw, "%Y-%m-%d")
            .map_err(|_| DataError::Field { at: loc(), msg: format!("column `date`: expected YYYY-MM-DD, got `{}`", date_raw) })?;
        let demo = Demographics { age_days: age, sex, origin };
        match demographics.get(&id) {
            Some(prev) if *prev != demo => return Err(DataError::Demographics(id)),
            Some(_) => {}
            None => {
                demographics.insert(id.clone(), demo);
            }
        }
        records.push(TransRecord {
            subject: id.clone(),
            trans: TransId(trans),
            t_start: num(c_start, "Tstart")? * opts.time_scale,
            t_stop: num(c_stop, "Tstop")? * opts.time_scale,
            status,
            line,
        });
    }
    EventDataset::from_records(model, &records, &demographics)
}
