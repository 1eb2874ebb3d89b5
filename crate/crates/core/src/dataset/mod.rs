//! Turning a company panel into a labeled, normalized design matrix.
//!
//! The build chain is: membership indicator, lagged copies, sparse-column
//! removal, direction labels, timespan trimming, min-max normalization, mean
//! imputation, assembly. [`build_company_dataset`] runs it end to end; each
//! step is also exposed on its own.

pub mod io;

use std::ops::Range;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{CompanyPanel, MembershipSnapshot, TradingDate};

pub const IN_INDEX: &str = "in_index";
pub const DIRECTION: &str = "direction";
pub const LAG_SUFFIX: &str = "_lag1w";

pub const DEFAULT_MAX_MISSING_FRACTION: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DatasetError {
    #[error("{count} panel dates not covered by any snapshot week: {preview}")]
    UncoveredDates { count: usize, preview: String, dates: Vec<TradingDate> },
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("need at least 2 consecutive observed prices, found {usable} usable pairs")]
    InsufficientHistory { usable: usize },
    #[error("no row has every required column present")]
    EmptyTimespan,
    #[error("column has no observed values")]
    EmptyColumn,
    #[error("column `{column}` has no observed values")]
    EmptyNamedColumn { column: String },
    #[error("label column `{column}` holds non-binary value {value}")]
    NonBinaryLabel { column: String, value: f64 },
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
    #[error("split of {n} rows at fraction {fraction} leaves an empty part")]
    InvalidSplit { n: usize, fraction: f64 },
    #[error("need at least 5 rows to split, found {0}")]
    TooFewRows(usize),
}

/// What the dependent variable is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// Week-over-week price direction; `in_index` is a feature.
    #[default]
    Direction,
    /// The membership indicator itself is the label.
    Membership,
}

impl TargetMode {
    pub fn label_column(self) -> &'static str {
        match self {
            TargetMode::Direction => DIRECTION,
            TargetMode::Membership => IN_INDEX,
        }
    }
}

/// Per-feature normalization and imputation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMeta {
    pub name: String,
    pub raw_min: f64,
    pub raw_max: f64,
    /// Mean of the observed normalized values; also the imputation value.
    pub mean_used: f64,
    pub imputed_count: usize,
    /// `raw_min == raw_max`; every value was mapped to 0.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub ticker: String,
    pub dates: Vec<TradingDate>,
    pub feature_names: Vec<String>,
    /// n × m, every entry in [0, 1].
    pub x: DMatrix<f64>,
    pub y: Vec<u8>,
    pub column_meta: Vec<ColumnMeta>,
}

impl LabeledDataset {
    /// Checks the row alignment and value-range invariants.
    pub fn validate(&self) -> Result<(), DatasetError> {
        let n = self.dates.len();
        if self.x.nrows() != n || self.y.len() != n {
            return Err(DatasetError::Inconsistent(format!(
                "{} dates, {} matrix rows, {} labels",
                n,
                self.x.nrows(),
                self.y.len()
            )));
        }
        if self.x.ncols() != self.feature_names.len() || self.column_meta.len() != self.feature_names.len() {
            return Err(DatasetError::Inconsistent(format!(
                "{} columns, {} names, {} meta records",
                self.x.ncols(),
                self.feature_names.len(),
                self.column_meta.len()
            )));
        }
        if self.dates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DatasetError::Inconsistent("dates not strictly increasing".into()));
        }
        if let Some(v) = self.x.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DatasetError::Inconsistent(format!("matrix entry {v} outside [0, 1]")));
        }
        if let Some(v) = self.y.iter().find(|v| **v > 1) {
            return Err(DatasetError::Inconsistent(format!("label {v} not binary")));
        }
        Ok(())
    }

    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.x.row(i).iter().copied().collect()
    }

    pub fn y_f64(&self) -> Vec<f64> {
        self.y.iter().map(|&v| v as f64).collect()
    }

    /// Keeps only the named columns, in this dataset's column order.
    pub fn select_features(&self, names: &[String]) -> Result<LabeledDataset, DatasetError> {
        if let Some(missing) = names.iter().find(|n| !self.feature_names.contains(n)) {
            return Err(DatasetError::UnknownColumn(missing.clone()));
        }
        let keep: Vec<usize> = (0..self.feature_names.len())
            .filter(|&j| names.contains(&self.feature_names[j]))
            .collect();
        Ok(LabeledDataset {
            ticker: self.ticker.clone(),
            dates: self.dates.clone(),
            feature_names: keep.iter().map(|&j| self.feature_names[j].clone()).collect(),
            x: self.x.select_columns(&keep),
            y: self.y.clone(),
            column_meta: keep.iter().map(|&j| self.column_meta[j].clone()).collect(),
        })
    }

    pub fn slice_rows(&self, rows: Range<usize>) -> LabeledDataset {
        let len = rows.len();
        LabeledDataset {
            ticker: self.ticker.clone(),
            dates: self.dates[rows.clone()].to_vec(),
            feature_names: self.feature_names.clone(),
            x: self.x.rows(rows.start, len).into_owned(),
            y: self.y[rows].to_vec(),
            column_meta: self.column_meta.clone(),
        }
    }
}

/// Adds the `in_index` column: 1 when the ticker is in the snapshot whose
/// week (the six days up to and including its requested date) covers the
/// row's date, else 0.
pub fn attach_membership_indicator(
    panel: &CompanyPanel,
    snapshots: &[MembershipSnapshot],
) -> Result<CompanyPanel, DatasetError> {
    let mut ordered: Vec<&MembershipSnapshot> = snapshots.iter().collect();
    ordered.sort_by_key(|s| s.requested_date);

    let mut values = Vec::with_capacity(panel.len());
    let mut uncovered = Vec::new();
    for row in &panel.rows {
        let i = ordered.partition_point(|s| s.requested_date < row.date);
        match ordered.get(i).filter(|s| s.covers(row.date)) {
            Some(s) => values.push(Some(if s.contains(&panel.ticker) { 1.0 } else { 0.0 })),
            None => uncovered.push(row.date),
        }
    }
    if !uncovered.is_empty() {
        let preview = uncovered
            .iter()
            .take(5)
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(", ");
        return Err(DatasetError::UncoveredDates {
            count: uncovered.len(),
            preview,
            dates: uncovered,
        });
    }
    let mut out = panel.clone();
    out.push_column(IN_INDEX, values);
    Ok(out)
}

/// Direction labels aligned with the panel rows: `Some(1)` when the price rose
/// from the previous row, `Some(0)` when it fell or stayed flat, `None` for the
/// first row and wherever the row's own or previous price is missing.
pub fn attach_direction_label(
    panel: &CompanyPanel,
    price_column: &str,
) -> Result<Vec<Option<u8>>, DatasetError> {
    let prices = panel
        .column(price_column)
        .ok_or_else(|| DatasetError::UnknownColumn(price_column.to_string()))?;
    let mut labels = vec![None; prices.len()];
    for t in 1..prices.len() {
        if let (Some(prev), Some(cur)) = (prices[t - 1], prices[t]) {
            labels[t] = Some(u8::from(cur > prev));
        }
    }
    let usable = labels.iter().flatten().count();
    if usable == 0 {
        return Err(DatasetError::InsufficientHistory { usable });
    }
    Ok(labels)
}

/// Adds the direction labels as a 0/1 column named [`DIRECTION`].
pub fn add_direction_column(panel: &CompanyPanel, price_column: &str) -> Result<CompanyPanel, DatasetError> {
    let labels = attach_direction_label(panel, price_column)?;
    let mut out = panel.clone();
    out.push_column(DIRECTION, labels.into_iter().map(|l| l.map(f64::from)).collect());
    Ok(out)
}

pub fn lag_name(feature: &str) -> String {
    format!("{feature}{LAG_SUFFIX}")
}

/// Adds `<f>_lag1w` for each named feature: the previous weekly row's value.
pub fn attach_lagged_features(panel: &CompanyPanel, features: &[String]) -> Result<CompanyPanel, DatasetError> {
    let mut out = panel.clone();
    for f in features {
        let col = panel.column(f).ok_or_else(|| DatasetError::UnknownColumn(f.clone()))?;
        let mut lagged = Vec::with_capacity(col.len());
        if !col.is_empty() {
            lagged.push(None);
            lagged.extend_from_slice(&col[..col.len() - 1]);
        }
        out.push_column(&lag_name(f), lagged);
    }
    Ok(out)
}

/// Drops every column whose missing fraction strictly exceeds the threshold.
pub fn drop_sparse_columns(panel: &CompanyPanel, max_missing_fraction: f64) -> (CompanyPanel, Vec<String>) {
    let mut out = panel.clone();
    if panel.is_empty() {
        return (out, Vec::new());
    }
    let n = panel.len() as f64;
    let dropped: Vec<String> = panel
        .feature_names
        .iter()
        .enumerate()
        .filter(|(j, _)| {
            let missing = panel.rows.iter().filter(|r| r.values[*j].is_none()).count();
            missing as f64 / n > max_missing_fraction
        })
        .map(|(_, name)| name.clone())
        .collect();
    for name in &dropped {
        out.remove_column(name);
    }
    (out, dropped)
}

/// Restricts the panel to its longest usable stretch of rows.
///
/// Rows where every required column is missing split the panel into blocks.
/// Within a block, the usable run spans from the first to the last row that
/// has all required columns present; gaps inside it are kept for imputation.
/// The longest run wins, ties going to the later one.
pub fn trim_timespan(panel: &CompanyPanel, required: &[String]) -> Result<CompanyPanel, DatasetError> {
    let idx: Vec<usize> = required
        .iter()
        .map(|r| panel.column_index(r).ok_or_else(|| DatasetError::UnknownColumn(r.clone())))
        .collect::<Result<_, _>>()?;
    let complete = |t: usize| idx.iter().all(|&j| panel.rows[t].values[j].is_some());
    let dead = |t: usize| idx.iter().all(|&j| panel.rows[t].values[j].is_none());

    let mut best: Option<Range<usize>> = None;
    let mut consider = |first: Option<usize>, last: Option<usize>| {
        if let (Some(a), Some(b)) = (first, last) {
            let run = a..b + 1;
            if best.as_ref().is_none_or(|r| run.len() >= r.len()) {
                best = Some(run);
            }
        }
    };
    let (mut first, mut last) = (None, None);
    for t in 0..panel.len() {
        if !idx.is_empty() && dead(t) {
            consider(first.take(), last.take());
            continue;
        }
        if complete(t) {
            first.get_or_insert(t);
            last = Some(t);
        }
    }
    consider(first, last);

    let run = best.ok_or(DatasetError::EmptyTimespan)?;
    let mut out = panel.clone();
    out.rows = panel.rows[run].to_vec();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedColumn {
    pub values: Vec<Option<f64>>,
    pub raw_min: f64,
    pub raw_max: f64,
    pub degenerate: bool,
}

/// Min-max scaling over the observed values: `(x − min) / (max − min)`.
/// A constant column maps to 0.0.
pub fn normalize_column(values: &[Option<f64>]) -> Result<NormalizedColumn, DatasetError> {
    let (raw_min, raw_max) = values
        .iter()
        .flatten()
        .fold(None, |acc: Option<(f64, f64)>, &v| match acc {
            None => Some((v, v)),
            Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
        })
        .ok_or(DatasetError::EmptyColumn)?;
    let range = raw_max - raw_min;
    let degenerate = range == 0.0;
    let values = values
        .iter()
        .map(|v| {
            v.map(|x| {
                if degenerate {
                    0.0
                } else {
                    ((x - raw_min) / range).clamp(0.0, 1.0)
                }
            })
        })
        .collect();
    Ok(NormalizedColumn {
        values,
        raw_min,
        raw_max,
        degenerate,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImputedColumn {
    pub values: Vec<f64>,
    pub mean_used: f64,
    pub imputed_count: usize,
}

/// Replaces missing entries with the mean of the observed ones.
pub fn impute_missing(values: &[Option<f64>]) -> Result<ImputedColumn, DatasetError> {
    let observed: Vec<f64> = values.iter().flatten().copied().collect();
    if observed.is_empty() {
        return Err(DatasetError::EmptyColumn);
    }
    let mean_used = observed.iter().sum::<f64>() / observed.len() as f64;
    let imputed_count = values.len() - observed.len();
    Ok(ImputedColumn {
        values: values.iter().map(|v| v.unwrap_or(mean_used)).collect(),
        mean_used,
        imputed_count,
    })
}

/// Normalizes then imputes each named column in place.
pub fn normalize_and_impute(
    panel: &CompanyPanel,
    features: &[String],
) -> Result<(CompanyPanel, Vec<ColumnMeta>), DatasetError> {
    let mut out = panel.clone();
    let mut metas = Vec::with_capacity(features.len());
    for f in features {
        let col = panel.column(f).ok_or_else(|| DatasetError::UnknownColumn(f.clone()))?;
        let named = |e: DatasetError| match e {
            DatasetError::EmptyColumn => DatasetError::EmptyNamedColumn { column: f.clone() },
            other => other,
        };
        let norm = normalize_column(&col).map_err(named)?;
        let filled = impute_missing(&norm.values).map_err(named)?;
        metas.push(ColumnMeta {
            name: f.clone(),
            raw_min: norm.raw_min,
            raw_max: norm.raw_max,
            mean_used: filled.mean_used,
            imputed_count: filled.imputed_count,
            degenerate: norm.degenerate,
        });
        out.push_column(f, filled.values.into_iter().map(Some).collect());
    }
    Ok((out, metas))
}

/// Keeps the rows whose label column is present.
pub fn retain_labeled(panel: &CompanyPanel, label_column: &str) -> Result<CompanyPanel, DatasetError> {
    let j = panel
        .column_index(label_column)
        .ok_or_else(|| DatasetError::UnknownColumn(label_column.to_string()))?;
    let mut out = panel.clone();
    out.rows.retain(|r| r.values[j].is_some());
    Ok(out)
}

/// Packs a normalized, imputed panel into matrix form. Rows without a label
/// are skipped; `column_meta` must hold one record per feature.
pub fn assemble_dataset(
    panel: &CompanyPanel,
    label_column: &str,
    features: &[String],
    column_meta: &[ColumnMeta],
) -> Result<LabeledDataset, DatasetError> {
    let label_j = panel
        .column_index(label_column)
        .ok_or_else(|| DatasetError::UnknownColumn(label_column.to_string()))?;
    let cols: Vec<usize> = features
        .iter()
        .map(|f| panel.column_index(f).ok_or_else(|| DatasetError::UnknownColumn(f.clone())))
        .collect::<Result<_, _>>()?;
    let meta: Vec<ColumnMeta> = features
        .iter()
        .map(|f| {
            column_meta
                .iter()
                .find(|m| &m.name == f)
                .cloned()
                .ok_or_else(|| DatasetError::Inconsistent(format!("no column metadata for `{f}`")))
        })
        .collect::<Result<_, _>>()?;

    let mut dates = Vec::new();
    let mut y = Vec::new();
    let mut flat = Vec::new();
    for row in &panel.rows {
        let Some(label) = row.values[label_j] else { continue };
        let label = match label {
            0.0 => 0u8,
            1.0 => 1u8,
            value => {
                return Err(DatasetError::NonBinaryLabel {
                    column: label_column.to_string(),
                    value,
                })
            }
        };
        for (&j, f) in cols.iter().zip(features) {
            let v = row.values[j].ok_or_else(|| {
                DatasetError::Inconsistent(format!("`{f}` missing at {} after imputation", row.date))
            })?;
            flat.push(v);
        }
        dates.push(row.date);
        y.push(label);
    }
    let ds = LabeledDataset {
        ticker: panel.ticker.clone(),
        x: DMatrix::from_row_slice(dates.len(), features.len(), &flat),
        dates,
        feature_names: features.to_vec(),
        y,
        column_meta: meta,
    };
    ds.validate()?;
    Ok(ds)
}

/// Number of training rows for a chronological split: `ceil(fraction · n)`.
pub fn train_size(n: usize, train_fraction: f64) -> usize {
    // guard against products like 0.8 * 450 landing a hair above an integer
    let raw = train_fraction * n as f64;
    let nearest = raw.round();
    if (raw - nearest).abs() < 1e-9 {
        nearest as usize
    } else {
        raw.ceil() as usize
    }
}

/// First `ceil(fraction · n)` rows train, the rest test. No shuffling.
pub fn chronological_split(
    ds: &LabeledDataset,
    train_fraction: f64,
) -> Result<(LabeledDataset, LabeledDataset), DatasetError> {
    let n = ds.n_rows();
    if n < 5 {
        return Err(DatasetError::TooFewRows(n));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DatasetError::InvalidSplit { n, fraction: train_fraction });
    }
    let k = train_size(n, train_fraction);
    if k == 0 || k >= n {
        return Err(DatasetError::InvalidSplit { n, fraction: train_fraction });
    }
    Ok((ds.slice_rows(0..k), ds.slice_rows(k..n)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub price_column: String,
    pub lag_features: Vec<String>,
    pub max_missing_fraction: f64,
    pub train_fraction: f64,
    pub target: TargetMode,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            price_column: "price".into(),
            lag_features: vec!["total_return".into()],
            max_missing_fraction: DEFAULT_MAX_MISSING_FRACTION,
            train_fraction: 0.8,
            target: TargetMode::Direction,
        }
    }
}

/// A dataset plus the bookkeeping the `build` step records next to it.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBuild {
    pub dataset: LabeledDataset,
    pub dropped_columns: Vec<String>,
    pub timespan: (TradingDate, TradingDate),
    pub target: TargetMode,
}

/// Runs the whole build chain for one company.
///
/// Every panel column other than the price column and the label becomes a
/// feature, including both the raw and lagged form of each lagged variable.
pub fn build_company_dataset(
    panel: &CompanyPanel,
    snapshots: &[MembershipSnapshot],
    config: &DatasetConfig,
) -> Result<DatasetBuild, DatasetError> {
    let panel = attach_membership_indicator(panel, snapshots)?;
    let panel = attach_lagged_features(&panel, &config.lag_features)?;
    let (panel, dropped_columns) = drop_sparse_columns(&panel, config.max_missing_fraction);

    let label_column = config.target.label_column();
    let features: Vec<String> = panel
        .feature_names
        .iter()
        .filter(|f| **f != config.price_column && *f != label_column)
        .cloned()
        .collect();

    let mut required = features.clone();
    // labels come from consecutive prices, so they are taken before trimming
    let panel = match config.target {
        TargetMode::Direction => {
            required.push(config.price_column.clone());
            add_direction_column(&panel, &config.price_column)?
        }
        TargetMode::Membership => panel,
    };
    let panel = trim_timespan(&panel, &required)?;
    let timespan = (panel.rows[0].date, panel.rows[panel.len() - 1].date);

    let panel = retain_labeled(&panel, label_column)?;
    let (panel, metas) = normalize_and_impute(&panel, &features)?;
    let dataset = assemble_dataset(&panel, label_column, &features, &metas)?;
    Ok(DatasetBuild {
        dataset,
        dropped_columns,
        timespan,
        target: config.target,
    })
}
