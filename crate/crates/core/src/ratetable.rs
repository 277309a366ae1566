//! Population mortality tables.
//!
//! A table holds a daily hazard for every (age in whole years, calendar
//! year, sex) cell. An individual's hazard on day `d` after their origin is
//! the value of the cell they occupy at time `d`; it is held constant over
//! `(d, d + 1]`. Age in years is `floor((age_days + d) / 365.241)` and the
//! calendar year is that of `origin + d` days. Lookups outside the table are
//! clamped to its edges.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use thiserror::Error;

use crate::data::{Demographics, Sex, SexCoding};

/// Days per year used for age arithmetic and qx conversion.
pub const DAYS_PER_YEAR: f64 = 365.241;

#[derive(Debug, Error)]
pub enum RateTableError {
    #[error("cannot read rate table: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed rate table CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("first line must be `#value: qx` or `#value: daily_hazard`, got `{0}`")]
    Directive(String),
    #[error("missing column `{0}`")]
    MissingColumn(&'static str),
    #[error("line {line}: {msg}")]
    Field { line: usize, msg: String },
    #[error("line {line}: qx = {qx} must be in [0, 1)")]
    Qx { line: usize, qx: f64 },
    #[error("line {line}: negative hazard {value}")]
    Negative { line: usize, value: f64 },
    #[error("line {line}: duplicate cell (age {age}, year {year}, sex {sex})")]
    Duplicate { line: usize, age: u32, year: i32, sex: Sex },
    #[error("gap in {axis} axis: {missing} is missing")]
    Gap { axis: &'static str, missing: i64 },
    #[error("missing cell (age {age}, year {year}, sex {sex})")]
    MissingCell { age: u32, year: i32, sex: Sex },
    #[error("rate table is empty")]
    Empty,
}

/// How the `value` column of a rate-table file is expressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueKind {
    /// Annual death probability.
    Qx,
    /// Hazard per day.
    DailyHazard,
}

impl ValueKind {
    fn directive(self) -> &'static str {
        match self {
            ValueKind::Qx => "#value: qx",
            ValueKind::DailyHazard => "#value: daily_hazard",
        }
    }
}

pub fn qx_to_daily(qx: f64) -> f64 {
    -(-qx).ln_1p() / DAYS_PER_YEAR
}

pub fn daily_to_qx(h: f64) -> f64 {
    -(-h * DAYS_PER_YEAR).exp_m1()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateTable {
    min_age: u32,
    max_age: u32,
    min_year: i32,
    max_year: i32,
    /// Indexed by `[sex][year - min_year][age - min_age]`.
    values: Vec<f64>,
}

impl RateTable {
    /// Builds a table from a function giving the daily hazard of each cell.
    pub fn from_fn(
        ages: std::ops::RangeInclusive<u32>,
        years: std::ops::RangeInclusive<i32>,
        mut f: impl FnMut(u32, i32, Sex) -> f64,
    ) -> Self {
        let (min_age, max_age) = (*ages.start(), *ages.end());
        let (min_year, max_year) = (*years.start(), *years.end());
        assert!(min_age <= max_age && min_year <= max_year, "empty axis");
        let mut values = Vec::new();
        for sex in [Sex::Male, Sex::Female] {
            for year in min_year..=max_year {
                for age in min_age..=max_age {
                    let v = f(age, year, sex);
                    assert!(v >= 0.0 && v.is_finite(), "invalid hazard {v}");
                    values.push(v);
                }
            }
        }
        Self { min_age, max_age, min_year, max_year, values }
    }

    /// A table with the same daily hazard everywhere.
    pub fn constant(daily: f64) -> Self {
        Self::from_fn(0..=0, 2000..=2000, |_, _, _| daily)
    }

    pub fn zero() -> Self {
        Self::constant(0.0)
    }

    /// Synthetic Gompertz-Makeham table used for demos and tests.
    ///
    /// Male annual hazard is `2e-4 + 4e-5 * exp(0.095 * age)`, female is 0.6
    /// times that, and both decline by 1.5% per calendar year after 2000.
    /// Values are rounded to six significant digits of qx, as a published
    /// table would be.
    pub fn demo() -> Self {
        Self::from_fn(0..=100, 1980..=2030, |age, year, sex| {
            let mut mu = 2e-4 + 4e-5 * (0.095 * age as f64).exp();
            if sex == Sex::Female {
                mu *= 0.6;
            }
            mu *= (-0.015 * (year - 2000) as f64).exp();
            let qx: f64 = format!("{:.5e}", -(-mu).exp_m1()).parse().expect("float");
            qx_to_daily(qx)
        })
    }

    pub fn ages(&self) -> std::ops::RangeInclusive<u32> {
        self.min_age..=self.max_age
    }

    pub fn years(&self) -> std::ops::RangeInclusive<i32> {
        self.min_year..=self.max_year
    }

    /// Daily hazard of a cell, clamping age and year to the table.
    pub fn cell(&self, age: i64, year: i32, sex: Sex) -> f64 {
        let a = age.clamp(self.min_age as i64, self.max_age as i64) as usize - self.min_age as usize;
        let y = year.clamp(self.min_year, self.max_year) - self.min_year;
        let n_age = (self.max_age - self.min_age + 1) as usize;
        let n_year = (self.max_year - self.min_year + 1) as usize;
        self.values[(sex.index() * n_year + y as usize) * n_age + a]
    }

    /// Returns a table with every hazard multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        assert!(factor >= 0.0);
        Self { values: self.values.iter().map(|v| v * factor).collect(), ..self.clone() }
    }

    pub fn individual<'a>(&'a self, demo: &Demographics) -> IndividualHazard<'a> {
        IndividualHazard { table: self, age_days: demo.age_days, sex: demo.sex, origin: demo.origin.num_days_from_ce() }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RateTableError> {
        Self::read(std::fs::File::open(path)?)
    }

    pub fn read<R: Read>(reader: R) -> Result<Self, RateTableError> {
        let mut buf = BufReader::new(reader);
        let mut first = String::new();
        buf.read_line(&mut first)?;
        let directive: String = first.trim().chars().filter(|c| !c.is_whitespace()).collect();
        let kind = match directive.as_str() {
            "#value:qx" => ValueKind::Qx,
            "#value:daily_hazard" => ValueKind::DailyHazard,
            _ => return Err(RateTableError::Directive(first.trim().to_string())),
        };
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(buf);
        let headers = rdr.headers()?.clone();
        let col = |name: &'static str| headers.iter().position(|h| h == name).ok_or(RateTableError::MissingColumn(name));
        let (c_age, c_year, c_sex, c_value) = (col("age")?, col("year")?, col("sex")?, col("value")?);
        let coding = SexCoding::default();

        let mut cells: HashMap<(Sex, i32, u32), f64> = HashMap::new();
        for row in rdr.records() {
            let row = row?;
            // the directive line precedes the CSV header
            let line = row.position().map(|p| p.line() as usize + 1).unwrap_or(0);
            let field = |c: usize| row.get(c).unwrap_or("");
            let bad = |name: &str, raw: &str| RateTableError::Field { line, msg: format!("column `{name}`: cannot parse `{raw}`") };
            let age: u32 = field(c_age).parse().map_err(|_| bad("age", field(c_age)))?;
            let year: i32 = field(c_year).parse().map_err(|_| bad("year", field(c_year)))?;
            let sex = coding.parse(field(c_sex)).ok_or_else(|| bad("sex", field(c_sex)))?;
            let value: f64 = field(c_value).parse().map_err(|_| bad("value", field(c_value)))?;
            let daily = match kind {
                ValueKind::Qx => {
                    if !(0.0..1.0).contains(&value) {
                        return Err(RateTableError::Qx { line, qx: value });
                    }
                    qx_to_daily(value)
                }
                ValueKind::DailyHazard => {
                    if !(value >= 0.0 && value.is_finite()) {
                        return Err(RateTableError::Negative { line, value });
                    }
                    value
                }
            };
            if cells.insert((sex, year, age), daily).is_some() {
                return Err(RateTableError::Duplicate { line, age, year, sex });
            }
        }
        if cells.is_empty() {
            return Err(RateTableError::Empty);
        }

        let axis = |name: &'static str, mut v: Vec<i64>| -> Result<(i64, i64), RateTableError> {
            v.sort_unstable();
            v.dedup();
            for w in v.windows(2) {
                if w[1] != w[0] + 1 {
                    return Err(RateTableError::Gap { axis: name, missing: w[0] + 1 });
                }
            }
            Ok((v[0], v[v.len() - 1]))
        };
        let (min_age, max_age) = axis("age", cells.keys().map(|k| k.2 as i64).collect())?;
        let (min_year, max_year) = axis("year", cells.keys().map(|k| k.1 as i64).collect())?;
        let (min_age, max_age, min_year, max_year) = (min_age as u32, max_age as u32, min_year as i32, max_year as i32);
        for sex in [Sex::Male, Sex::Female] {
            for year in min_year..=max_year {
                for age in min_age..=max_age {
                    if !cells.contains_key(&(sex, year, age)) {
                        return Err(RateTableError::MissingCell { age, year, sex });
                    }
                }
            }
        }
        Ok(Self::from_fn(min_age..=max_age, min_year..=max_year, |a, y, s| cells[&(s, y, a)]))
    }

    pub fn write<W: Write>(&self, mut w: W, kind: ValueKind) -> Result<(), RateTableError> {
        writeln!(w, "{}", kind.directive())?;
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["age", "year", "sex", "value"])?;
        for sex in [Sex::Male, Sex::Female] {
            for year in self.years() {
                for age in self.ages() {
                    let h = self.cell(age as i64, year, sex);
                    let v = match kind {
                        ValueKind::Qx => daily_to_qx(h),
                        ValueKind::DailyHazard => h,
                    };
                    wtr.write_record([age.to_string(), year.to_string(), sex.to_string(), format!("{v}")])?;
                }
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

/// A constant-hazard stretch of days `start..end`, i.e. the time interval `(start, end]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Piece {
    pub start: i64,
    pub end: i64,
    pub rate: f64,
}

/// Population hazard trajectory of one individual.
#[derive(Debug, Clone, Copy)]
pub struct IndividualHazard<'a> {
    table: &'a RateTable,
    age_days: f64,
    sex: Sex,
    /// Origin date as days from the common era.
    origin: i32,
}

impl<'a> IndividualHazard<'a> {
    fn age_years(&self, day: i64) -> i64 {
        ((self.age_days + day as f64) / DAYS_PER_YEAR).floor() as i64
    }

    fn year(&self, day: i64) -> i32 {
        NaiveDate::from_num_days_from_ce_opt(self.origin + day as i32).expect("date in range").year()
    }

    /// First day after `day` on which the integer age increments.
    fn next_birthday(&self, day: i64) -> i64 {
        let k = self.age_years(day);
        let mut c = (((k + 1) as f64) * DAYS_PER_YEAR - self.age_days).ceil() as i64;
        c = c.max(day + 1);
        while self.age_years(c) <= k {
            c += 1;
        }
        while c - 1 > day && self.age_years(c - 1) > k {
            c -= 1;
        }
        c
    }

    fn next_new_year(&self, day: i64) -> i64 {
        let y = self.year(day);
        NaiveDate::from_ymd_opt(y + 1, 1, 1).expect("date in range").num_days_from_ce() as i64 - self.origin as i64
    }

    /// Hazard in force over `(day, day + 1]`.
    pub fn rate_on_day(&self, day: i64) -> f64 {
        self.table.cell(self.age_years(day), self.year(day), self.sex)
    }

    /// Hazard of the cell occupied at time `t` (days).
    pub fn hazard(&self, t: f64) -> f64 {
        self.rate_on_day(t.floor() as i64)
    }

    /// Constant pieces covering day indices `from..to`.
    pub fn pieces(&self, from: i64, to: i64) -> Pieces<'a> {
        Pieces { ind: *self, day: from, end: to }
    }

    /// Integral of the hazard over `(from, to]`.
    pub fn cumulative(&self, from: f64, to: f64) -> f64 {
        assert!(from <= to, "cumulative over reversed interval ({from}, {to}]");
        if from == to {
            return 0.0;
        }
        let d0 = from.floor() as i64;
        let d1 = to.ceil() as i64;
        let mut sum = 0.0;
        for p in self.pieces(d0, d1) {
            let lo = (p.start as f64).max(from);
            let hi = (p.end as f64).min(to);
            if hi > lo {
                sum += p.rate * (hi - lo);
            }
        }
        sum
    }
}

pub struct Pieces<'a> {
    ind: IndividualHazard<'a>,
    day: i64,
    end: i64,
}

impl Iterator for Pieces<'_> {
    type Item = Piece;

    fn next(&mut self) -> Option<Piece> {
        if self.day >= self.end {
            return None;
        }
        let ind = &self.ind;
        let t = ind.table;
        let start = self.day;
        let age = ind.age_years(start);
        let year = ind.year(start);
        let next_age = if age >= t.max_age as i64 { i64::MAX } else { ind.next_birthday(start) };
        let next_year = if year >= t.max_year { i64::MAX } else { ind.next_new_year(start) };
        let end = next_age.min(next_year).min(self.end);
        self.day = end;
        Some(Piece { start, end, rate: t.cell(age, year, ind.sex) })
    }
}

pub fn individual_hazard(table: &RateTable, demo: &Demographics, t_days: f64) -> f64 {
    table.individual(demo).hazard(t_days)
}

pub fn cumulative_pop_hazard(table: &RateTable, demo: &Demographics, from_day: f64, to_day: f64) -> f64 {
    table.individual(demo).cumulative(from_day, to_day)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn date(y: i32, m: u32, d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, d).unwrap()
    }

    fn demo_at(age_years: f64, origin: NaiveDate) -> Demographics {
        Demographics { age_days: age_years * DAYS_PER_YEAR, sex: Sex::Male, origin }
    }

    /// Distinct value in every cell so lookups are identifiable.
    fn tagged() -> RateTable {
        RateTable::from_fn(50..=70, 1995..=2005, |a, y, s| (a as f64 + 100.0 * (y - 1995) as f64 + 1e4 * s.index() as f64) * 1e-9)
    }

    fn tag(t: &RateTable, a: i64, y: i32) -> f64 {
        t.cell(a, y, Sex::Male)
    }

    #[test]
    fn qx_conversion() {
        let h = qx_to_daily(0.01);
        let oracle = -(0.99f64).ln() / 365.241;
        assert!((h - oracle).abs() < 1e-18);
        assert!((h - 2.7517e-5).abs() < 1e-9);
        assert_eq!(qx_to_daily(0.0), 0.0);
        assert!((daily_to_qx(h) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn load_qx_and_errors() {
        let good = "#value: qx\nage,year,sex,value\n60,2000,M,0.01\n60,2000,F,0\n";
        let t = RateTable::read(good.as_bytes()).unwrap();
        assert!((t.cell(60, 2000, Sex::Male) - qx_to_daily(0.01)).abs() < 1e-20);
        assert_eq!(t.cell(60, 2000, Sex::Female), 0.0);

        let gap = "#value: qx\nage,year,sex,value\n60,1998,M,0.01\n60,1998,F,0.01\n60,2000,M,0.01\n60,2000,F,0.01\n";
        assert!(matches!(RateTable::read(gap.as_bytes()), Err(RateTableError::Gap { axis: "year", missing: 1999 })));
        let one = "#value: qx\nage,year,sex,value\n60,2000,M,1\n";
        assert!(matches!(RateTable::read(one.as_bytes()), Err(RateTableError::Qx { line: 3, .. })));
        let neg = "#value: daily_hazard\nage,year,sex,value\n60,2000,M,-1e-5\n";
        assert!(matches!(RateTable::read(neg.as_bytes()), Err(RateTableError::Negative { .. })));
        let neg_qx = "#value: qx\nage,year,sex,value\n60,2000,M,-0.1\n";
        assert!(matches!(RateTable::read(neg_qx.as_bytes()), Err(RateTableError::Qx { .. })));
        let dup = "#value: qx\nage,year,sex,value\n60,2000,M,0.01\n60,2000,M,0.02\n";
        assert!(matches!(RateTable::read(dup.as_bytes()), Err(RateTableError::Duplicate { .. })));
        let no_dir = "age,year,sex,value\n60,2000,M,0.01\n";
        assert!(matches!(RateTable::read(no_dir.as_bytes()), Err(RateTableError::Directive(_))));
        let missing_sex = "#value: qx\nage,year,sex,value\n60,2000,M,0.01\n";
        assert!(matches!(RateTable::read(missing_sex.as_bytes()), Err(RateTableError::MissingCell { .. })));
    }

    #[test]
    fn write_read_round_trip() {
        let t = RateTable::demo();
        let mut buf = Vec::new();
        t.write(&mut buf, ValueKind::DailyHazard).unwrap();
        assert_eq!(RateTable::read(buf.as_slice()).unwrap(), t);
        let mut buf = Vec::new();
        t.write(&mut buf, ValueKind::Qx).unwrap();
        let back = RateTable::read(buf.as_slice()).unwrap();
        for (a, b) in back.values.iter().zip(&t.values) {
            assert!((a - b).abs() <= 1e-12 * b);
        }
    }

    #[test]
    fn shipped_demo_table_matches() {
        let shipped = RateTable::read(include_str!("../data/demo_ratetable.csv").as_bytes()).unwrap();
        let demo = RateTable::demo();
        assert_eq!(shipped.ages(), demo.ages());
        assert_eq!(shipped.years(), demo.years());
        for (a, b) in shipped.values.iter().zip(&demo.values) {
            assert!((a - b).abs() <= 1e-12 * b);
        }
    }

    #[test]
    fn cell_lookup_by_age_and_year() {
        let t = tagged();
        let d = demo_at(60.0, date(2000, 1, 1));
        assert_eq!(individual_hazard(&t, &d, 0.0), tag(&t, 60, 2000));
        assert_eq!(individual_hazard(&t, &d, 366.0), tag(&t, 61, 2001));
        assert_eq!(individual_hazard(&t, &d, 365.9), tag(&t, 60, 2000));
        let ind = t.individual(&d);
        assert_eq!(ind.rate_on_day(366), tag(&t, 61, 2001));
        assert_eq!(ind.rate_on_day(365), tag(&t, 60, 2000));
        let old = demo_at(90.0, date(2000, 1, 1));
        assert_eq!(t.individual(&old).rate_on_day(0), tag(&t, 70, 2000));
        let late = demo_at(60.0, date(2020, 6, 1));
        assert_eq!(t.individual(&late).rate_on_day(0), tag(&t, 60, 2005));
        let young = demo_at(10.0, date(1980, 6, 1));
        assert_eq!(t.individual(&young).rate_on_day(0), tag(&t, 50, 1995));
    }

    #[test]
    fn cumulative_examples() {
        let c = 3e-5;
        let d = demo_at(60.0, date(2000, 1, 1));
        let t = RateTable::constant(c);
        assert!((cumulative_pop_hazard(&t, &d, 0.0, 100.0) - 100.0 * c).abs() < 1e-18);
        assert_eq!(cumulative_pop_hazard(&t, &d, 7.5, 7.5), 0.0);
        // 1e-5 for the last 10 days of 2000, then 2e-5 in 2001
        let t = RateTable::from_fn(0..=100, 2000..=2001, |_, y, _| if y == 2000 { 1e-5 } else { 2e-5 });
        let d = Demographics { age_days: 20000.0, sex: Sex::Female, origin: date(2000, 12, 22) };
        assert!((cumulative_pop_hazard(&t, &d, 0.0, 15.0) - 2.0e-4).abs() < 1e-18);
        assert!((cumulative_pop_hazard(&t, &d, 9.5, 10.5) - 1.5e-5).abs() < 1e-18);
    }

    /// Day-by-day summation oracle.
    fn brute_cumulative(ind: &IndividualHazard<'_>, from: f64, to: f64) -> f64 {
        let mut s = 0.0;
        let mut d = from.floor() as i64;
        while (d as f64) < to {
            let lo = (d as f64).max(from);
            let hi = ((d + 1) as f64).min(to);
            s += ind.rate_on_day(d) * (hi - lo);
            d += 1;
        }
        s
    }

    proptest! {
        #[test]
        fn pieces_match_daily_lookup(age in 0.0f64..110.0, origin in 0i64..20000, from in 0i64..3000, len in 0i64..3000) {
            let t = tagged();
            let d = Demographics { age_days: age * DAYS_PER_YEAR, sex: Sex::Female, origin: date(1985, 1, 1) + chrono::Days::new(origin as u64) };
            let ind = t.individual(&d);
            let mut day = from;
            for p in ind.pieces(from, from + len) {
                prop_assert_eq!(p.start, day);
                prop_assert!(p.end > p.start);
                for k in p.start..p.end {
                    prop_assert_eq!(ind.rate_on_day(k), p.rate);
                }
                day = p.end;
            }
            prop_assert_eq!(day, (from + len).max(from));
        }

        #[test]
        fn cumulative_additive_and_exact(age in 40.0f64..80.0, a in 0.0f64..4000.0, b in 0.0f64..4000.0, c in 0.0f64..4000.0) {
            let t = RateTable::demo();
            let d = demo_at(age, date(1992, 3, 17));
            let ind = t.individual(&d);
            let mut v = [a, b, c];
            v.sort_by(f64::total_cmp);
            let whole = ind.cumulative(v[0], v[2]);
            let parts = ind.cumulative(v[0], v[1]) + ind.cumulative(v[1], v[2]);
            prop_assert!((whole - parts).abs() <= 4.0 * f64::EPSILON * whole);
            let brute = brute_cumulative(&ind, v[0], v[2]);
            prop_assert!((whole - brute).abs() <= 1e-12 * brute.max(1e-300));
        }

        #[test]
        fn larger_qx_larger_increment(age in 40.0f64..80.0, a in 0.0f64..4000.0, len in 0.5f64..2000.0, k in 1.01f64..3.0) {
            let t = RateTable::demo();
            let bigger = t.scaled(k);
            let d = demo_at(age, date(1995, 7, 1));
            prop_assert!(bigger.individual(&d).cumulative(a, a + len) > t.individual(&d).cumulative(a, a + len));
        }
    }
}
