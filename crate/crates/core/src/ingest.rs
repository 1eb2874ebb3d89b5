//! Parsing of constituent snapshot files and company history panels.
//!
//! Membership file layout:
//!
//! ```text
//! # effective_date=2004-04-08
//! ticker
//! AAA
//! BBB
//! ```
//!
//! Panel file layout: a `date` column followed by named numeric columns.
//! Empty cells are missing values and stay missing.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of calendar days a weekly request may fall back.
pub const LOOKBACK_DAYS: i64 = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IngestError {
    #[error("{file}:{line}: column `{column}`: {message}")]
    Parse {
        file: String,
        line: usize,
        column: String,
        message: String,
    },
    #[error("{file}: {message}")]
    Validation { file: String, message: String },
    #[error("no available date within {LOOKBACK_DAYS} days before {requested}")]
    UnresolvableWeek { requested: TradingDate },
}

/// A calendar day, serialized as `YYYY-MM-DD`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TradingDate(NaiveDate);

impl TradingDate {
    pub fn from_ymd(year: i32, month: u32, day: u32) -> Option<Self> {
        NaiveDate::from_ymd_opt(year, month, day).map(Self)
    }

    pub fn naive(self) -> NaiveDate {
        self.0
    }

    pub fn add_days(self, days: i64) -> Self {
        Self(self.0 + Duration::days(days))
    }

    /// Signed number of days from `earlier` to `self`.
    pub fn days_since(self, earlier: TradingDate) -> i64 {
        (self.0 - earlier.0).num_days()
    }

    pub fn is_friday(self) -> bool {
        self.0.weekday() == Weekday::Fri
    }
}

impl From<NaiveDate> for TradingDate {
    fn from(d: NaiveDate) -> Self {
        Self(d)
    }
}

impl FromStr for TradingDate {
    type Err = chrono::ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").map(Self)
    }
}

impl fmt::Display for TradingDate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0.format("%Y-%m-%d"))
    }
}

/// The index composition used for one nominal week.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MembershipSnapshot {
    pub requested_date: TradingDate,
    pub effective_date: TradingDate,
    pub constituents: BTreeSet<String>,
}

impl MembershipSnapshot {
    pub fn contains(&self, ticker: &str) -> bool {
        self.constituents.contains(ticker)
    }

    /// Whether `date` falls in the week ending on the requested date.
    pub fn covers(&self, date: TradingDate) -> bool {
        let back = self.requested_date.days_since(date);
        (0..=LOOKBACK_DAYS).contains(&back)
    }

    /// Writes the snapshot in the membership file format.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "# effective_date={}", self.effective_date)?;
        writeln!(out, "ticker")?;
        for t in &self.constituents {
            writeln!(out, "{t}")?;
        }
        Ok(())
    }
}

/// Parses a membership file. `source` names the file in error messages.
pub fn parse_membership_file(
    content: &[u8],
    requested_date: TradingDate,
    source: &str,
) -> Result<MembershipSnapshot, IngestError> {
    let text = std::str::from_utf8(content).map_err(|e| IngestError::Validation {
        file: source.to_string(),
        message: format!("not valid UTF-8: {e}"),
    })?;
    let parse_err = |line: usize, column: &str, message: String| IngestError::Parse {
        file: source.to_string(),
        line,
        column: column.to_string(),
        message,
    };

    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
    let (first_no, first) = match lines.next() {
        Some((n, l)) if !l.trim().is_empty() => (n, l),
        _ => {
            return Err(IngestError::Validation {
                file: source.to_string(),
                message: "empty file".into(),
            })
        }
    };
    let date_text = first
        .trim()
        .strip_prefix('#')
        .map(str::trim)
        .and_then(|rest| rest.strip_prefix("effective_date="))
        .ok_or_else(|| {
            parse_err(first_no, "effective_date", format!("expected `# effective_date=YYYY-MM-DD`, got `{first}`"))
        })?;
    let effective_date: TradingDate = date_text
        .parse()
        .map_err(|e| parse_err(first_no, "effective_date", format!("bad date `{date_text}`: {e}")))?;

    match lines.next() {
        Some((_, h)) if h.trim() == "ticker" => {}
        Some((n, h)) => return Err(parse_err(n, "ticker", format!("expected header `ticker`, got `{h}`"))),
        None => {
            return Err(IngestError::Validation {
                file: source.to_string(),
                message: "missing `ticker` header row".into(),
            })
        }
    }

    let mut constituents = BTreeSet::new();
    for (n, raw) in lines {
        let ticker = raw.trim();
        if ticker.is_empty() {
            if raw.is_empty() {
                continue;
            }
            return Err(parse_err(n, "ticker", "blank ticker".into()));
        }
        if ticker.contains(',') {
            return Err(parse_err(n, "ticker", format!("expected a single field, got `{ticker}`")));
        }
        if !constituents.insert(ticker.to_string()) {
            return Err(IngestError::Validation {
                file: source.to_string(),
                message: format!("duplicate ticker `{ticker}` at line {n}"),
            });
        }
    }

    let lag = requested_date.days_since(effective_date);
    if !(0..=LOOKBACK_DAYS).contains(&lag) {
        return Err(IngestError::Validation {
            file: source.to_string(),
            message: format!(
                "effective date {effective_date} is not within {LOOKBACK_DAYS} days before requested {requested_date}"
            ),
        });
    }

    Ok(MembershipSnapshot {
        requested_date,
        effective_date,
        constituents,
    })
}

/// Picks the latest available date no more than six days before `requested`.
///
/// `available` must be sorted ascending.
pub fn resolve_weekly_date(
    requested: TradingDate,
    available: &[TradingDate],
) -> Result<TradingDate, IngestError> {
    let idx = available.partition_point(|d| *d <= requested);
    match idx.checked_sub(1).map(|i| available[i]) {
        Some(d) if requested.days_since(d) <= LOOKBACK_DAYS => Ok(d),
        _ => Err(IngestError::UnresolvableWeek { requested }),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanelRow {
    pub date: TradingDate,
    /// One entry per panel feature, in `feature_names` order.
    pub values: Vec<Option<f64>>,
}

/// Date-ordered feature history for one company.
#[derive(Debug, Clone, PartialEq)]
pub struct CompanyPanel {
    pub ticker: String,
    pub feature_names: Vec<String>,
    pub rows: Vec<PanelRow>,
}

impl CompanyPanel {
    pub fn new(ticker: impl Into<String>, feature_names: Vec<String>) -> Self {
        Self {
            ticker: ticker.into(),
            feature_names,
            rows: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|f| f == name)
    }

    pub fn column(&self, name: &str) -> Option<Vec<Option<f64>>> {
        let j = self.column_index(name)?;
        Some(self.rows.iter().map(|r| r.values[j]).collect())
    }

    pub fn dates(&self) -> Vec<TradingDate> {
        self.rows.iter().map(|r| r.date).collect()
    }

    /// Appends a column, replacing any existing column of the same name.
    pub fn push_column(&mut self, name: &str, values: Vec<Option<f64>>) {
        assert_eq!(values.len(), self.rows.len(), "column length must match row count");
        match self.column_index(name) {
            Some(j) => {
                for (row, v) in self.rows.iter_mut().zip(values) {
                    row.values[j] = v;
                }
            }
            None => {
                self.feature_names.push(name.to_string());
                for (row, v) in self.rows.iter_mut().zip(values) {
                    row.values.push(v);
                }
            }
        }
    }

    pub fn remove_column(&mut self, name: &str) -> bool {
        match self.column_index(name) {
            Some(j) => {
                self.feature_names.remove(j);
                for row in &mut self.rows {
                    row.values.remove(j);
                }
                true
            }
            None => false,
        }
    }

    /// Serializes in the panel file format. Values use Rust's shortest
    /// round-trip float formatting, so parsing the output restores them exactly.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["date".to_string()];
        header.extend(self.feature_names.iter().cloned());
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![row.date.to_string()];
            rec.extend(row.values.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Parses a company panel and sorts its rows by date.
pub fn parse_company_panel(
    content: &[u8],
    ticker: &str,
    source: &str,
) -> Result<CompanyPanel, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(content);
    let header_err = |message: String| IngestError::Parse {
        file: source.to_string(),
        line: 1,
        column: "date".into(),
        message,
    };
    let headers = reader.headers().map_err(|e| header_err(e.to_string()))?.clone();
    if headers.get(0) != Some("date") {
        return Err(header_err(format!(
            "first column must be `date`, got `{}`",
            headers.get(0).unwrap_or("")
        )));
    }
    let feature_names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut seen = BTreeSet::new();
    for name in &feature_names {
        if name.is_empty() || !seen.insert(name.as_str()) {
            return Err(IngestError::Validation {
                file: source.to_string(),
                message: format!("empty or duplicate column name `{name}`"),
            });
        }
    }

    let mut panel = CompanyPanel::new(ticker, feature_names);
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| IngestError::Parse {
            file: source.to_string(),
            line,
            column: String::new(),
            message: e.to_string(),
        })?;
        if rec.len() != headers.len() {
            return Err(IngestError::Parse {
                file: source.to_string(),
                line,
                column: String::new(),
                message: format!("expected {} fields, found {}", headers.len(), rec.len()),
            });
        }
        let date_text = &rec[0];
        let date: TradingDate = date_text.parse().map_err(|e| IngestError::Parse {
            file: source.to_string(),
            line,
            column: "date".into(),
            message: format!("bad date `{date_text}`: {e}"),
        })?;
        let mut values = Vec::with_capacity(panel.feature_names.len());
        for (j, cell) in rec.iter().enumerate().skip(1) {
            if cell.is_empty() {
                values.push(None);
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| IngestError::Parse {
                file: source.to_string(),
                line,
                column: headers[j].to_string(),
                message: format!("non-numeric value `{cell}`"),
            })?;
            if !v.is_finite() {
                return Err(IngestError::Parse {
                    file: source.to_string(),
                    line,
                    column: headers[j].to_string(),
                    message: format!("non-finite value `{cell}`"),
                });
            }
            values.push(Some(v));
        }
        panel.rows.push(PanelRow { date, values });
    }

    panel.rows.sort_by_key(|r| r.date);
    if let Some(w) = panel.rows.windows(2).find(|w| w[0].date == w[1].date) {
        return Err(IngestError::Validation {
            file: source.to_string(),
            message: format!("duplicate date {}", w[0].date),
        });
    }
    Ok(panel)
}
