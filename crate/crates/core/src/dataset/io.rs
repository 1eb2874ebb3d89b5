//! Dataset files: `date,y,<features...>` CSV plus a JSON sidecar with the
//! per-column metadata and build bookkeeping.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ColumnMeta, DatasetBuild, DatasetError, LabeledDataset, TargetMode};
use crate::ingest::TradingDate;

#[derive(Debug, Error)]
pub enum DatasetIoError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Invalid(#[from] DatasetError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub ticker: String,
    pub target: TargetMode,
    pub feature_names: Vec<String>,
    pub column_meta: Vec<ColumnMeta>,
    pub dropped_columns: Vec<String>,
    pub timespan_start: TradingDate,
    pub timespan_end: TradingDate,
    pub n_rows: usize,
}

impl DatasetSidecar {
    pub fn from_build(build: &DatasetBuild) -> Self {
        Self {
            ticker: build.dataset.ticker.clone(),
            target: build.target,
            feature_names: build.dataset.feature_names.clone(),
            column_meta: build.dataset.column_meta.clone(),
            dropped_columns: build.dropped_columns.clone(),
            timespan_start: build.timespan.0,
            timespan_end: build.timespan.1,
            n_rows: build.dataset.n_rows(),
        }
    }
}

pub fn write_dataset_csv<W: Write>(ds: &LabeledDataset, out: W) -> Result<(), DatasetIoError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["date".to_string(), "y".to_string()];
    header.extend(ds.feature_names.iter().cloned());
    w.write_record(&header)?;
    for i in 0..ds.n_rows() {
        let mut rec = vec![ds.dates[i].to_string(), ds.y[i].to_string()];
        rec.extend(ds.x.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset CSV back, taking ticker and column metadata from the sidecar.
pub fn read_dataset<R: Read>(csv_in: R, sidecar: &DatasetSidecar) -> Result<LabeledDataset, DatasetIoError> {
    let mut r = csv::Reader::from_reader(csv_in);
    let headers = r.headers()?.clone();
    let names: Vec<&str> = headers.iter().collect();
    if names.len() < 2 || names[0] != "date" || names[1] != "y" {
        return Err(DatasetIoError::Format {
            line: 1,
            message: "header must start with `date,y`".into(),
        });
    }
    if names[2..] != sidecar.feature_names.iter().map(String::as_str).collect::<Vec<_>>()[..] {
        return Err(DatasetIoError::Format {
            line: 1,
            message: "feature columns do not match the sidecar".into(),
        });
    }
    let m = names.len() - 2;
    let mut dates = Vec::new();
    let mut y = Vec::new();
    let mut flat = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        let bad = |message: String| DatasetIoError::Format { line, message };
        dates.push(rec[0].parse::<TradingDate>().map_err(|e| bad(format!("date: {e}")))?);
        y.push(rec[1].parse::<u8>().map_err(|e| bad(format!("y: {e}")))?);
        for j in 0..m {
            flat.push(rec[j + 2].parse::<f64>().map_err(|e| bad(format!("{}: {e}", names[j + 2])))?);
        }
    }
    let ds = LabeledDataset {
        ticker: sidecar.ticker.clone(),
        x: DMatrix::from_row_slice(dates.len(), m, &flat),
        dates,
        feature_names: sidecar.feature_names.clone(),
        y,
        column_meta: sidecar.column_meta.clone(),
    };
    ds.validate()?;
    Ok(ds)
}
