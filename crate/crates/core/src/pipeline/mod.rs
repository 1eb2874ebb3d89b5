//! End-to-end run over a set of companies: build, screen with the logit,
//! train and evaluate a network per company, and aggregate the results.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{
    CohortConfig, DatasetSettings, LogitSettings, MlpOverride, MlpSettings, PathsConfig, PipelineConfig,
    ResolvedMlp,
};

use crate::cohort::{cohort_report, CohortReport};
use crate::dataset::io::{write_dataset_csv, DatasetSidecar};
use crate::dataset::{build_company_dataset, chronological_split, LabeledDataset};
use crate::ingest::{parse_company_panel, parse_membership_file, CompanyPanel, MembershipSnapshot, TradingDate};
use crate::logit::{fit_dataset, select_features, LogitReport};
use crate::mlp::{evaluate, init_network, train, EvalReport, ModelFile, TrainOptions, TrainingMeta};
use crate::seed;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("no company succeeded ({} failed)", .0.len())]
    NoSuccess(Vec<CompanyFailure>),
    #[error("{0}")]
    Precondition(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompanyFailure {
    pub ticker: String,
    pub stage: String,
    pub message: String,
}

impl std::fmt::Display for CompanyFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} ({}): {}", self.ticker, self.stage, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompanyReport {
    pub ticker: String,
    pub n_rows: usize,
    pub train_rows: usize,
    pub test_rows: usize,
    pub timespan_start: TradingDate,
    pub timespan_end: TradingDate,
    pub dropped_columns: Vec<String>,
    pub features: Vec<String>,
    pub logit: LogitReport,
    /// Features with `p < alpha`, in dataset order.
    pub selected_features: Vec<String>,
    pub fallback_used: bool,
    /// What the network was trained on.
    pub mlp_features: Vec<String>,
    pub mlp: ResolvedMlp,
    pub final_loss: f64,
    pub eval: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub config: PipelineConfig,
    pub generator: String,
    pub cohort_sample: Option<Vec<String>>,
    pub companies: Vec<CompanyReport>,
    pub failures: Vec<CompanyFailure>,
    pub mean_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Text,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "json" => Ok(Self::Json),
            "text" => Ok(Self::Text),
            _ => Err(format!("unknown format `{s}` (json or text)")),
        }
    }
}

fn data_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Data(format!("{}: {e}", path.display()))
}

fn csv_files(dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| data_err(dir, e))? {
        let p = entry.map_err(|e| data_err(dir, e))?.path();
        if p.is_file() && p.extension().is_some_and(|x| x == "csv") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Reads every `<requested-date>.csv` in `dir`, ordered by requested date.
pub fn load_snapshots(dir: &Path) -> Result<Vec<MembershipSnapshot>, PipelineError> {
    let mut snaps = Vec::new();
    for p in csv_files(dir)? {
        let requested: TradingDate = stem(&p)
            .parse()
            .map_err(|e| data_err(&p, format!("file name is not a date: {e}")))?;
        let bytes = fs::read(&p).map_err(|e| data_err(&p, e))?;
        snaps.push(parse_membership_file(&bytes, requested, &p.display().to_string()).map_err(|e| PipelineError::Data(e.to_string()))?);
    }
    if snaps.is_empty() {
        return Err(data_err(dir, "no membership files"));
    }
    snaps.sort_by_key(|s| s.requested_date);
    Ok(snaps)
}

/// Reads `<ticker>.csv`; the ticker is the file stem.
pub fn load_panel(path: &Path) -> Result<CompanyPanel, PipelineError> {
    let bytes = fs::read(path).map_err(|e| data_err(path, e))?;
    parse_company_panel(&bytes, &stem(path), &path.display().to_string()).map_err(|e| PipelineError::Data(e.to_string()))
}

/// Tickers with a panel file in `dir`, sorted.
pub fn panel_tickers(dir: &Path) -> Result<Vec<String>, PipelineError> {
    Ok(csv_files(dir)?.iter().map(|p| stem(p)).collect())
}

struct Stage<'a> {
    ticker: &'a str,
}

impl Stage<'_> {
    fn fail(&self, stage: &str, e: impl std::fmt::Display) -> CompanyFailure {
        CompanyFailure {
            ticker: self.ticker.to_string(),
            stage: stage.to_string(),
            message: e.to_string(),
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(std::io::Error::other)?;
    text.push('\n');
    fs::write(path, text)
}

/// Picks the network inputs: the significant features, or else whichever
/// fallback features the dataset has.
pub fn mlp_inputs(ds: &LabeledDataset, selected: &[String], fallback: &[String]) -> (Vec<String>, bool) {
    if !selected.is_empty() {
        return (selected.to_vec(), false);
    }
    let present = ds.feature_names.iter().filter(|f| fallback.contains(f)).cloned().collect();
    (present, true)
}

fn run_company(
    config: &PipelineConfig,
    snapshots: &[MembershipSnapshot],
    ticker: &str,
) -> Result<CompanyReport, CompanyFailure> {
    let st = Stage { ticker };
    let path = config.paths.panels_dir.join(format!("{ticker}.csv"));
    let panel = load_panel(&path).map_err(|e| st.fail("ingest", e))?;

    let build = build_company_dataset(&panel, snapshots, &config.dataset_config()).map_err(|e| st.fail("dataset", e))?;
    let ds = &build.dataset;
    let (train_set, test_set) =
        chronological_split(ds, config.dataset.train_fraction).map_err(|e| st.fail("split", e))?;

    let fit = fit_dataset(&train_set, &config.logit_options()).map_err(|e| st.fail("logit", e))?;
    let logit = LogitReport::new(ticker, &fit, config.logit.alpha);
    let selected = select_features(&fit, config.logit.alpha);
    let (mlp_features, fallback_used) = mlp_inputs(ds, &selected, &config.logit.fallback_features);
    if mlp_features.is_empty() {
        return Err(st.fail("select", "no significant feature and no fallback feature present"));
    }

    let train_x = train_set.select_features(&mlp_features).map_err(|e| st.fail("select", e))?;
    let test_x = test_set.select_features(&mlp_features).map_err(|e| st.fail("select", e))?;
    let mlp = config.mlp.resolve(ticker, mlp_features.len());
    let net = init_network(&mlp.layer_sizes, mlp.init_seed).map_err(|e| st.fail("mlp", e))?;
    let opts = TrainOptions {
        epochs: mlp.epochs,
        learning_rate: mlp.learning_rate,
        batch_size: mlp.batch_size,
        seed: mlp.shuffle_seed,
    };
    let (net, history) = train(&net, &train_x, &opts).map_err(|e| st.fail("mlp", e))?;
    let final_loss = *history.last().expect("at least one epoch");
    let eval = evaluate(&net, &test_x, mlp.threshold).map_err(|e| st.fail("evaluate", e))?;

    let dir = config.paths.output_dir.join("companies").join(ticker);
    let artifacts = || -> Result<(), Box<dyn std::error::Error>> {
        fs::create_dir_all(&dir)?;
        write_dataset_csv(ds, fs::File::create(dir.join("dataset.csv"))?)?;
        write_json(&dir.join("dataset.json"), &DatasetSidecar::from_build(&build))?;
        write_json(&dir.join("logit.json"), &logit)?;
        let meta = TrainingMeta {
            seed: mlp.shuffle_seed,
            epochs: mlp.epochs,
            learning_rate: mlp.learning_rate,
            batch_size: mlp.batch_size,
            final_loss,
            train_rows: train_x.n_rows(),
        };
        write_json(&dir.join("model.json"), &ModelFile::new(ticker, &mlp_features, &net, meta))?;
        write_json(&dir.join("eval.json"), &eval)?;
        Ok(())
    };
    artifacts().map_err(|e| st.fail("artifacts", e))?;

    Ok(CompanyReport {
        ticker: ticker.to_string(),
        n_rows: ds.n_rows(),
        train_rows: train_set.n_rows(),
        test_rows: test_set.n_rows(),
        timespan_start: build.timespan.0,
        timespan_end: build.timespan.1,
        dropped_columns: build.dropped_columns.clone(),
        features: ds.feature_names.clone(),
        logit,
        selected_features: selected,
        fallback_used,
        mlp_features,
        mlp,
        final_loss,
        eval,
    })
}

/// Runs every company and writes `report.json`, `report.txt` and the
/// per-company artifacts under the output directory.
///
/// A company that fails at any stage is listed in `failures` and skipped.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineReport, PipelineError> {
    config.validate_paths()?;
    let snapshots = load_snapshots(&config.paths.membership_dir)?;
    let available = panel_tickers(&config.paths.panels_dir)?;

    let mut failures = Vec::new();
    let (tickers, cohort_sample) = if config.cohort.sample {
        let c: CohortReport = cohort_report(
            &snapshots,
            config.cohort.per_group,
            config.cohort.seed,
            config.cohort.allow_deficient,
        )
        .map_err(|e| PipelineError::Data(format!("cohort: {e}")))?;
        let mut run = Vec::new();
        for t in &c.sample {
            if available.binary_search(t).is_ok() {
                run.push(t.clone());
            } else {
                failures.push(CompanyFailure {
                    ticker: t.clone(),
                    stage: "ingest".into(),
                    message: "no panel file".into(),
                });
            }
        }
        (run, Some(c.sample))
    } else {
        (available, None)
    };
    if tickers.is_empty() && failures.is_empty() {
        return Err(PipelineError::Data(format!(
            "{}: no panel files",
            config.paths.panels_dir.display()
        )));
    }

    fs::create_dir_all(&config.paths.output_dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| PipelineError::Config(format!("workers: {e}")))?;
    let results: Vec<Result<CompanyReport, CompanyFailure>> =
        pool.install(|| tickers.par_iter().map(|t| run_company(config, &snapshots, t)).collect());

    let mut companies = Vec::new();
    for r in results {
        match r {
            Ok(c) => companies.push(c),
            Err(f) => failures.push(f),
        }
    }
    failures.sort_by(|a, b| a.ticker.cmp(&b.ticker));
    if companies.is_empty() {
        return Err(PipelineError::NoSuccess(failures));
    }
    let mean_accuracy = companies.iter().map(|c| c.eval.accuracy).sum::<f64>() / companies.len() as f64;
    let report = PipelineReport {
        config: config.clone(),
        generator: seed::GENERATOR.to_string(),
        cohort_sample,
        companies,
        failures,
        mean_accuracy,
    };
    fs::write(config.paths.output_dir.join("report.json"), render_report(&report, ReportFormat::Json)?)?;
    fs::write(config.paths.output_dir.join("report.txt"), render_report(&report, ReportFormat::Text)?)?;
    Ok(report)
}

/// Accuracy as a percentage with two decimals, e.g. `68.76%`.
pub fn format_accuracy(accuracy: f64) -> String {
    format!("{:.2}%", accuracy * 100.0)
}

pub fn render_report(report: &PipelineReport, format: ReportFormat) -> Result<Vec<u8>, PipelineError> {
    if report.companies.is_empty() {
        return Err(PipelineError::Precondition("report has no companies".into()));
    }
    let mut out = Vec::new();
    match format {
        ReportFormat::Json => {
            serde_json::to_writer_pretty(&mut out, report).map_err(std::io::Error::other)?;
            out.push(b'\n');
        }
        ReportFormat::Text => {
            let width = report
                .companies
                .iter()
                .map(|c| c.ticker.len())
                .chain(["Company Name".len()])
                .max()
                .unwrap_or(0);
            writeln!(out, "{:<width$} | Accuracy", "Company Name")?;
            for c in &report.companies {
                writeln!(out, "{:<width$} | {}", c.ticker, format_accuracy(c.eval.accuracy))?;
            }
            writeln!(out, "{:<width$} | {}", "Mean", format_accuracy(report.mean_accuracy))?;
            for f in &report.failures {
                writeln!(out, "skipped {f}")?;
            }
        }
    }
    Ok(out)
}
