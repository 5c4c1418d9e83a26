//! Monthly calendars, series identifiers and calendar-aligned return panels.
//!
//! A [`ReturnPanel`] stores every series on one contiguous monthly calendar.
//! Missing observations are explicit `None` entries and are never imputed.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Shortest window accepted by [`ReturnPanel::extract_window`].
pub const MIN_WINDOW: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PanelError {
    #[error("duplicate observation for {series} at {month}")]
    DuplicateObservation { series: SeriesId, month: MonthIndex },
    #[error("dates of {series} are not strictly increasing at {month}")]
    NonIncreasingDates { series: SeriesId, month: MonthIndex },
    #[error("unknown series {0}")]
    UnknownSeries(SeriesId),
    #[error("month {0} is not on the panel calendar")]
    MonthOutsideCalendar(MonthIndex),
    #[error("window of {length} months ending {end} exceeds the calendar")]
    WindowExceedsCalendar { end: MonthIndex, length: usize },
    #[error("window length {0} is below the minimum of {MIN_WINDOW}")]
    WindowTooShort(usize),
    #[error("{field} for {series} at {month} must be strictly positive, got {value}")]
    NonPositive {
        field: &'static str,
        series: SeriesId,
        month: MonthIndex,
        value: f64,
    },
    #[error("{0} is not a fund series")]
    NotAFund(SeriesId),
    #[error("series is constant")]
    ConstantSeries,
    #[error("need at least {needed} values, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("invalid month '{0}', expected YYYY-MM")]
    BadMonth(String),
    #[error("invalid series kind '{0}'")]
    BadKind(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

/// A calendar month. Ordering follows the calendar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MonthIndex {
    year: i32,
    month: u8,
}

impl MonthIndex {
    pub fn new(year: i32, month: u32) -> Option<Self> {
        (1..=12).contains(&month).then_some(Self {
            year,
            month: month as u8,
        })
    }

    pub fn year(self) -> i32 {
        self.year
    }

    pub fn month(self) -> u32 {
        self.month as u32
    }

    /// Months since year 0, January.
    pub fn ordinal(self) -> i64 {
        self.year as i64 * 12 + (self.month as i64 - 1)
    }

    pub fn from_ordinal(ordinal: i64) -> Self {
        Self {
            year: ordinal.div_euclid(12) as i32,
            month: (ordinal.rem_euclid(12) + 1) as u8,
        }
    }

    pub fn succ(self) -> Self {
        self.add_months(1)
    }

    pub fn pred(self) -> Self {
        self.add_months(-1)
    }

    pub fn add_months(self, delta: i64) -> Self {
        Self::from_ordinal(self.ordinal() + delta)
    }

    /// Number of months from `self` to `later` (negative when `later` is earlier).
    pub fn months_until(self, later: MonthIndex) -> i64 {
        later.ordinal() - self.ordinal()
    }

    /// Inclusive range of consecutive months.
    pub fn range_inclusive(first: MonthIndex, last: MonthIndex) -> Vec<MonthIndex> {
        (first.ordinal()..=last.ordinal())
            .map(MonthIndex::from_ordinal)
            .collect()
    }
}

impl fmt::Display for MonthIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

impl FromStr for MonthIndex {
    type Err = PanelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || PanelError::BadMonth(s.to_string());
        let (y, m) = s.trim().split_once('-').ok_or_else(bad)?;
        if y.len() != 4 || m.len() != 2 {
            return Err(bad());
        }
        let year: i32 = y.parse().map_err(|_| bad())?;
        let month: u32 = m.parse().map_err(|_| bad())?;
        MonthIndex::new(year, month).ok_or_else(bad)
    }
}

impl Serialize for MonthIndex {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MonthIndex {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeriesKind {
    Fund,
    Factor,
    Benchmark,
}

impl SeriesKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SeriesKind::Fund => "fund",
            SeriesKind::Factor => "factor",
            SeriesKind::Benchmark => "benchmark",
        }
    }
}

impl FromStr for SeriesKind {
    type Err = PanelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "fund" => Ok(SeriesKind::Fund),
            "factor" => Ok(SeriesKind::Factor),
            "benchmark" => Ok(SeriesKind::Benchmark),
            other => Err(PanelError::BadKind(other.to_string())),
        }
    }
}

/// A series identifier: the kind plus an opaque token.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SeriesId {
    pub kind: SeriesKind,
    pub id: String,
}

impl SeriesId {
    pub fn new(kind: SeriesKind, id: impl Into<String>) -> Self {
        Self {
            kind,
            id: id.into(),
        }
    }

    pub fn fund(id: impl Into<String>) -> Self {
        Self::new(SeriesKind::Fund, id)
    }

    pub fn factor(id: impl Into<String>) -> Self {
        Self::new(SeriesKind::Factor, id)
    }

    pub fn benchmark(id: impl Into<String>) -> Self {
        Self::new(SeriesKind::Benchmark, id)
    }
}

impl fmt::Display for SeriesId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind.as_str(), self.id)
    }
}

/// One raw series as a list of dated observations.
pub type RawSeries = (SeriesId, Vec<(MonthIndex, f64)>);

/// A row of values aligned to a calendar; `None` marks a missing entry.
pub type Row = Vec<Option<f64>>;

/// Outcome of a paired window extraction.
#[derive(Debug, Clone, PartialEq)]
pub enum WindowOutcome {
    Complete { target: Vec<f64>, factor: Vec<f64> },
    Incomplete { missing: usize },
}

/// Calendar-aligned monthly panel of returns plus fund AUM and volume.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReturnPanel {
    calendar: Vec<MonthIndex>,
    series: BTreeMap<SeriesId, Row>,
    aum: BTreeMap<SeriesId, Row>,
    volume: BTreeMap<SeriesId, Row>,
}

fn place_on_calendar(
    first: MonthIndex,
    len: usize,
    id: &SeriesId,
    obs: &[(MonthIndex, f64)],
    row: &mut Row,
) -> Result<(), PanelError> {
    for &(month, value) in obs {
        let pos = first.months_until(month);
        if pos < 0 || pos as usize >= len {
            return Err(PanelError::MonthOutsideCalendar(month));
        }
        let slot = &mut row[pos as usize];
        if slot.is_some() {
            return Err(PanelError::DuplicateObservation {
                series: id.clone(),
                month,
            });
        }
        *slot = Some(value);
    }
    Ok(())
}

fn check_increasing(id: &SeriesId, obs: &[(MonthIndex, f64)]) -> Result<(), PanelError> {
    for pair in obs.windows(2) {
        if pair[1].0 == pair[0].0 {
            return Err(PanelError::DuplicateObservation {
                series: id.clone(),
                month: pair[1].0,
            });
        }
        if pair[1].0 < pair[0].0 {
            return Err(PanelError::NonIncreasingDates {
                series: id.clone(),
                month: pair[1].0,
            });
        }
    }
    Ok(())
}

impl ReturnPanel {
    /// Builds a panel on the contiguous calendar spanning every observation.
    ///
    /// A series listed more than once is merged; overlapping months are
    /// rejected as duplicates.
    pub fn align(raw: Vec<RawSeries>) -> Result<Self, PanelError> {
        for (id, obs) in &raw {
            check_increasing(id, obs)?;
        }
        let first = raw.iter().filter_map(|(_, o)| o.first().map(|x| x.0)).min();
        let last = raw.iter().filter_map(|(_, o)| o.last().map(|x| x.0)).max();
        let calendar = match (first, last) {
            (Some(a), Some(b)) => MonthIndex::range_inclusive(a, b),
            _ => Vec::new(),
        };
        let mut series: BTreeMap<SeriesId, Row> = BTreeMap::new();
        for (id, obs) in &raw {
            let row = series
                .entry(id.clone())
                .or_insert_with(|| vec![None; calendar.len()]);
            if let Some(&start) = calendar.first() {
                place_on_calendar(start, calendar.len(), id, obs, row)?;
            }
        }
        Ok(Self {
            calendar,
            series,
            aum: BTreeMap::new(),
            volume: BTreeMap::new(),
        })
    }

    /// Recovers the observations as raw series (missing entries dropped).
    pub fn to_raw(&self) -> Vec<RawSeries> {
        self.series
            .iter()
            .map(|(id, row)| (id.clone(), self.present(row)))
            .collect()
    }

    fn present(&self, row: &Row) -> Vec<(MonthIndex, f64)> {
        self.calendar
            .iter()
            .zip(row)
            .filter_map(|(m, v)| v.map(|v| (*m, v)))
            .collect()
    }

    pub fn with_aum(mut self, raw: Vec<RawSeries>) -> Result<Self, PanelError> {
        let rows = self.positive_rows("aum", raw)?;
        self.aum.extend(rows);
        Ok(self)
    }

    pub fn with_volume(mut self, raw: Vec<RawSeries>) -> Result<Self, PanelError> {
        let rows = self.positive_rows("volume", raw)?;
        self.volume.extend(rows);
        Ok(self)
    }

    fn positive_rows(
        &self,
        field: &'static str,
        raw: Vec<RawSeries>,
    ) -> Result<BTreeMap<SeriesId, Row>, PanelError> {
        let mut out: BTreeMap<SeriesId, Row> = BTreeMap::new();
        for (id, obs) in raw {
            if id.kind != SeriesKind::Fund {
                return Err(PanelError::NotAFund(id));
            }
            check_increasing(&id, &obs)?;
            if let Some(&(month, value)) = obs.iter().find(|(_, v)| !(*v > 0.0)) {
                return Err(PanelError::NonPositive {
                    field,
                    series: id,
                    month,
                    value,
                });
            }
            let row = out
                .entry(id.clone())
                .or_insert_with(|| vec![None; self.calendar.len()]);
            match self.calendar.first() {
                Some(&start) => place_on_calendar(start, self.calendar.len(), &id, &obs, row)?,
                None => {
                    if let Some(&(m, _)) = obs.first() {
                        return Err(PanelError::MonthOutsideCalendar(m));
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn calendar(&self) -> &[MonthIndex] {
        &self.calendar
    }

    pub fn is_empty(&self) -> bool {
        self.calendar.is_empty()
    }

    /// Position of `month` on the calendar.
    pub fn position(&self, month: MonthIndex) -> Option<usize> {
        let first = *self.calendar.first()?;
        let pos = first.months_until(month);
        (pos >= 0 && (pos as usize) < self.calendar.len()).then_some(pos as usize)
    }

    pub fn series_ids(&self) -> impl Iterator<Item = &SeriesId> {
        self.series.keys()
    }

    pub fn ids_of_kind(&self, kind: SeriesKind) -> Vec<SeriesId> {
        self.series.keys().filter(|s| s.kind == kind).cloned().collect()
    }

    pub fn row(&self, id: &SeriesId) -> Result<&Row, PanelError> {
        self.series
            .get(id)
            .ok_or_else(|| PanelError::UnknownSeries(id.clone()))
    }

    pub fn value(&self, id: &SeriesId, month: MonthIndex) -> Option<f64> {
        let pos = self.position(month)?;
        self.series.get(id)?[pos]
    }

    pub fn aum_at(&self, fund: &SeriesId, month: MonthIndex) -> Option<f64> {
        let pos = self.position(month)?;
        self.aum.get(fund)?[pos]
    }

    pub fn volume_at(&self, fund: &SeriesId, month: MonthIndex) -> Option<f64> {
        let pos = self.position(month)?;
        self.volume.get(fund)?[pos]
    }

    pub fn aum_rows(&self) -> &BTreeMap<SeriesId, Row> {
        &self.aum
    }

    pub fn volume_rows(&self) -> &BTreeMap<SeriesId, Row> {
        &self.volume
    }

    /// Copy of the panel with every series value at `month` replaced by `f(id, value)`.
    pub fn map_month(&self, month: MonthIndex, f: impl Fn(&SeriesId, f64) -> f64) -> Self {
        let mut out = self.clone();
        if let Some(pos) = self.position(month) {
            for (id, row) in out.series.iter_mut() {
                if let Some(v) = row[pos] {
                    row[pos] = Some(f(id, v));
                }
            }
        }
        out
    }

    fn window_bounds(&self, end: MonthIndex, length: usize) -> Result<(usize, usize), PanelError> {
        if length < MIN_WINDOW {
            return Err(PanelError::WindowTooShort(length));
        }
        let end_pos = self
            .position(end)
            .ok_or(PanelError::MonthOutsideCalendar(end))?;
        if length > end_pos + 1 {
            return Err(PanelError::WindowExceedsCalendar { end, length });
        }
        Ok((end_pos + 1 - length, end_pos + 1))
    }

    /// The `length` values of one series ending at `end`, or `None` if any is missing.
    pub fn series_window(
        &self,
        id: &SeriesId,
        end: MonthIndex,
        length: usize,
    ) -> Result<Option<Vec<f64>>, PanelError> {
        let row = self.row(id)?;
        let (lo, hi) = self.window_bounds(end, length)?;
        Ok(row[lo..hi].iter().copied().collect())
    }

    /// Paired target/factor rows of exactly `length` months ending at `end`.
    ///
    /// `Incomplete` counts the months where either series is missing.
    pub fn extract_window(
        &self,
        target: &SeriesId,
        factor: &SeriesId,
        end: MonthIndex,
        length: usize,
    ) -> Result<WindowOutcome, PanelError> {
        let y = self.row(target)?;
        let x = self.row(factor)?;
        let (lo, hi) = self.window_bounds(end, length)?;
        let missing = (lo..hi)
            .filter(|&t| y[t].is_none() || x[t].is_none())
            .count();
        if missing > 0 {
            return Ok(WindowOutcome::Incomplete { missing });
        }
        Ok(WindowOutcome::Complete {
            target: y[lo..hi].iter().map(|v| v.unwrap()).collect(),
            factor: x[lo..hi].iter().map(|v| v.unwrap()).collect(),
        })
    }

    /// All present values of a series up to and including `end`.
    pub fn history_through(&self, id: &SeriesId, end: MonthIndex) -> Result<Vec<f64>, PanelError> {
        let row = self.row(id)?;
        let end_pos = self
            .position(end)
            .ok_or(PanelError::MonthOutsideCalendar(end))?;
        Ok(row[..=end_pos].iter().flatten().copied().collect())
    }
}

/// Affine map used to z-score a row: `z = (x - mean) / sd`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub mean: f64,
    pub sd: f64,
}

impl Affine {
    pub const IDENTITY: Affine = Affine { mean: 0.0, sd: 1.0 };

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.sd
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.sd + self.mean
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation with an `n - 1` denominator.
pub fn sample_sd(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    (ss / (xs.len() as f64 - 1.0)).sqrt()
}

/// Z-scores a complete row using its sample mean and `n - 1` standard deviation.
pub fn standardize(row: &[f64]) -> Result<(Vec<f64>, Affine), PanelError> {
    if row.len() < 2 {
        return Err(PanelError::TooShort {
            needed: 2,
            got: row.len(),
        });
    }
    let m = mean(row);
    let sd = sample_sd(row);
    let scale = row.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    if !(sd > 1e-14 * scale.max(f64::MIN_POSITIVE)) {
        return Err(PanelError::ConstantSeries);
    }
    let affine = Affine { mean: m, sd };
    Ok((row.iter().map(|&x| affine.apply(x)).collect(), affine))
}

#[derive(Debug, Serialize, Deserialize)]
struct ReturnRecord {
    date: String,
    series_id: String,
    series_kind: String,
    #[serde(rename = "return")]
    value: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct AumRecord {
    date: String,
    fund_id: String,
    aum: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct VolumeRecord {
    date: String,
    fund_id: String,
    volume: f64,
}

fn io_err(path: &Path, e: impl fmt::Display) -> PanelError {
    PanelError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn group(rows: Vec<(SeriesId, MonthIndex, f64)>) -> Vec<RawSeries> {
    let mut map: BTreeMap<SeriesId, Vec<(MonthIndex, f64)>> = BTreeMap::new();
    for (id, m, v) in rows {
        map.entry(id).or_default().push((m, v));
    }
    // stable sort keeps duplicates adjacent so `align` reports them
    for obs in map.values_mut() {
        obs.sort_by_key(|o| o.0);
    }
    map.into_iter().collect()
}

/// Reads a `date,series_id,series_kind,return` file.
pub fn read_returns_csv(path: &Path) -> Result<Vec<RawSeries>, PanelError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let mut rows = Vec::new();
    for rec in rdr.deserialize::<ReturnRecord>() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        let kind: SeriesKind = rec.series_kind.parse()?;
        rows.push((
            SeriesId::new(kind, rec.series_id),
            rec.date.parse()?,
            rec.value,
        ));
    }
    Ok(group(rows))
}

/// Reads a `date,fund_id,aum` file.
pub fn read_aum_csv(path: &Path) -> Result<Vec<RawSeries>, PanelError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let mut rows = Vec::new();
    for rec in rdr.deserialize::<AumRecord>() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        rows.push((SeriesId::fund(rec.fund_id), rec.date.parse()?, rec.aum));
    }
    Ok(group(rows))
}

/// Reads a `date,fund_id,volume` file.
pub fn read_volume_csv(path: &Path) -> Result<Vec<RawSeries>, PanelError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let mut rows = Vec::new();
    for rec in rdr.deserialize::<VolumeRecord>() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        rows.push((SeriesId::fund(rec.fund_id), rec.date.parse()?, rec.volume));
    }
    Ok(group(rows))
}

/// Loads a panel from a returns file plus optional AUM and volume files.
pub fn load_panel(
    returns: &Path,
    aum: Option<&Path>,
    volume: Option<&Path>,
) -> Result<ReturnPanel, PanelError> {
    let mut panel = ReturnPanel::align(read_returns_csv(returns)?)?;
    if let Some(p) = aum {
        panel = panel.with_aum(read_aum_csv(p)?)?;
    }
    if let Some(p) = volume {
        panel = panel.with_volume(read_volume_csv(p)?)?;
    }
    Ok(panel)
}

/// Writes the panel's returns, date-major then by series id.
pub fn write_returns_csv(panel: &ReturnPanel, path: &Path) -> Result<(), PanelError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    for (t, month) in panel.calendar.iter().enumerate() {
        for (id, row) in &panel.series {
            if let Some(v) = row[t] {
                w.serialize(ReturnRecord {
                    date: month.to_string(),
                    series_id: id.id.clone(),
                    series_kind: id.kind.as_str().to_string(),
                    value: v,
                })
                .map_err(|e| io_err(path, e))?;
            }
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn write_aum_csv(panel: &ReturnPanel, path: &Path) -> Result<(), PanelError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    for (t, month) in panel.calendar.iter().enumerate() {
        for (id, row) in &panel.aum {
            if let Some(v) = row[t] {
                w.serialize(AumRecord {
                    date: month.to_string(),
                    fund_id: id.id.clone(),
                    aum: v,
                })
                .map_err(|e| io_err(path, e))?;
            }
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn write_volume_csv(panel: &ReturnPanel, path: &Path) -> Result<(), PanelError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    for (t, month) in panel.calendar.iter().enumerate() {
        for (id, row) in &panel.volume {
            if let Some(v) = row[t] {
                w.serialize(VolumeRecord {
                    date: month.to_string(),
                    fund_id: id.id.clone(),
                    volume: v,
                })
                .map_err(|e| io_err(path, e))?;
            }
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}
