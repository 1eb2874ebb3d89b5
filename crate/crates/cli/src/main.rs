//! `indexflow` command line.
//!
//! Every subcommand reads the same JSON configuration (`--config`, or the
//! file named by `INDEXFLOW_CONFIG`), and any config field can be set with a
//! flag of its dotted name, e.g. `--mlp.epochs 200` or `--dataset.train_fraction=0.75`.
//!
//! Exit codes: 0 success, 1 configuration or validation error, 2 data error,
//! 3 pipeline error (no company succeeded).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use indexflow_core::cohort::cohort_report;
use indexflow_core::dataset::chronological_split;
use indexflow_core::dataset::io::{read_dataset, write_dataset_csv, DatasetSidecar};
use indexflow_core::dataset::{build_company_dataset, LabeledDataset};
use indexflow_core::logit::{fit_dataset, LogitReport};
use indexflow_core::mlp::{evaluate, init_network, train, ModelFile, TrainOptions, TrainingMeta};
use indexflow_core::pipeline::{
    format_accuracy, load_panel, load_snapshots, mlp_inputs, render_report, run_pipeline, PipelineError,
    ReportFormat,
};
use indexflow_core::synth::{generate_corpus, write_corpus, SynthConfig};
use indexflow_core::{PipelineConfig, PipelineReport};

const CONFIG_ENV: &str = "INDEXFLOW_CONFIG";

#[derive(Parser)]
#[command(name = "indexflow", version, about = "Index membership driven price-direction pipeline")]
struct Cli {
    /// JSON configuration file.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    /// Root seed. Sets cohort.seed and mlp.seed to values derived from it
    /// (and is the synth seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus from a planted model.
    Synth(SynthArgs),
    /// Group tickers by membership count and sample a cohort.
    Cohort {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the labeled dataset for one company panel.
    Build {
        #[arg(long)]
        panel: PathBuf,
        /// Directory for `<ticker>.csv` and `<ticker>.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the logit screen on a built dataset.
    Logit {
        #[arg(long)]
        dataset: PathBuf,
        /// Fit on every row instead of the training split.
        #[arg(long)]
        all_rows: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a network on the training split of a built dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// Comma separated feature names.
        #[arg(long, value_delimiter = ',', conflicts_with = "logit")]
        features: Vec<String>,
        /// Use the selection (or fallback) from a `logit` report.
        #[arg(long)]
        logit: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a model on the test split of a built dataset.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the whole pipeline.
    Pipeline {
        #[arg(long, default_value = "text")]
        format: ReportFormat,
    },
    /// Render a saved pipeline report.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "text")]
        format: ReportFormat,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    companies: Option<usize>,
    #[arg(long)]
    weeks: Option<usize>,
    #[arg(long)]
    switch_prob: Option<f64>,
    #[arg(long)]
    missing_prob: Option<f64>,
    /// Expected Bayes accuracy the planted scale is calibrated to.
    #[arg(long, conflicts_with = "no_calibrate")]
    target_bayes: Option<f64>,
    /// Use the planted coefficients unscaled.
    #[arg(long)]
    no_calibrate: bool,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn config_error(e: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 1, error: e.into() }
}

fn data_error(e: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 2, error: e.into() }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let code = match e {
            PipelineError::Config(_) | PipelineError::Precondition(_) => 1,
            PipelineError::Data(_) | PipelineError::Io(_) => 2,
            PipelineError::NoSuccess(_) => 3,
        };
        Failure { code, error: e.into() }
    }
}

trait OrData<T> {
    fn data(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> OrData<T> for Result<T, E> {
    fn data(self) -> Result<T, Failure> {
        self.map_err(data_error)
    }
}

type Overrides = Vec<(String, String)>;

/// Pulls `--a.b value` and `--a.b=value` out of the argument list.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides), Failure> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            rest.push(a);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if !name.contains('.') {
            rest.push(a);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| config_error(anyhow!("--{name} needs a value")))?,
        };
        overrides.push((name, value));
    }
    Ok((rest, overrides))
}

fn load_config(cli: &Cli, overrides: &[(String, String)]) -> Result<PipelineConfig, Failure> {
    let mut config = match &cli.config {
        Some(p) => PipelineConfig::from_file(p)?,
        None => PipelineConfig::default(),
    };
    for (k, v) in overrides {
        config.set_dotted(k, v)?;
    }
    if let Some(s) = cli.seed {
        config.apply_root_seed(s);
    }
    config.validate()?;
    Ok(config)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).data()?;
    text.push('\n');
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| dir.display().to_string()).data()?;
    }
    fs::write(path, text).with_context(|| path.display().to_string()).data()
}

fn emit_json<T: serde::Serialize>(out: Option<&Path>, value: &T) -> Result<(), Failure> {
    match out {
        Some(p) => write_json(p, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value).data()?);
            Ok(())
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).with_context(|| path.display().to_string()).data()?;
    serde_json::from_str(&text).with_context(|| path.display().to_string()).data()
}

/// A dataset CSV plus its sidecar, `<stem>.json` next to it.
fn load_dataset(csv_path: &Path) -> Result<LabeledDataset, Failure> {
    let sidecar: DatasetSidecar = read_json(&csv_path.with_extension("json"))?;
    let file = fs::File::open(csv_path).with_context(|| csv_path.display().to_string()).data()?;
    read_dataset(file, &sidecar).with_context(|| csv_path.display().to_string()).data()
}

fn split(ds: &LabeledDataset, config: &PipelineConfig) -> Result<(LabeledDataset, LabeledDataset), Failure> {
    chronological_split(ds, config.dataset.train_fraction).data()
}

fn run(cli: Cli, overrides: Overrides) -> Result<(), Failure> {
    let config = load_config(&cli, &overrides)?;
    match cli.command {
        Command::Synth(a) => {
            let mut sc = SynthConfig::default();
            if let Some(s) = cli.seed {
                sc.seed = s;
            }
            sc.n_companies = a.companies.unwrap_or(sc.n_companies);
            sc.n_weeks = a.weeks.unwrap_or(sc.n_weeks);
            sc.switch_prob = a.switch_prob.unwrap_or(sc.switch_prob);
            sc.missing_prob = a.missing_prob.unwrap_or(sc.missing_prob);
            if a.no_calibrate {
                sc.target_bayes_accuracy = None;
            } else if let Some(t) = a.target_bayes {
                sc.target_bayes_accuracy = Some(t);
            }
            let corpus = generate_corpus(&sc).map_err(config_error)?;
            write_corpus(&corpus, &a.out).data()?;
            eprintln!(
                "wrote {} companies, {} weeks to {} (scale {:.4})",
                corpus.companies.len(),
                corpus.snapshots.len(),
                a.out.display(),
                corpus.truth.scale
            );
        }
        Command::Cohort { out } => {
            let snaps = load_snapshots(&config.paths.membership_dir)?;
            let c = &config.cohort;
            let report = cohort_report(&snaps, c.per_group, c.seed, c.allow_deficient).data()?;
            emit_json(out.as_deref(), &report)?;
        }
        Command::Build { panel, out } => {
            let snaps = load_snapshots(&config.paths.membership_dir)?;
            let panel = load_panel(&panel)?;
            let build = build_company_dataset(&panel, &snaps, &config.dataset_config())
                .with_context(|| panel.ticker.clone())
                .data()?;
            fs::create_dir_all(&out).with_context(|| out.display().to_string()).data()?;
            let csv_path = out.join(format!("{}.csv", panel.ticker));
            let file = fs::File::create(&csv_path).with_context(|| csv_path.display().to_string()).data()?;
            write_dataset_csv(&build.dataset, file).data()?;
            write_json(&csv_path.with_extension("json"), &DatasetSidecar::from_build(&build))?;
            eprintln!(
                "{}: {} rows, {} features, dropped {:?}",
                panel.ticker,
                build.dataset.n_rows(),
                build.dataset.n_features(),
                build.dropped_columns
            );
        }
        Command::Logit { dataset, all_rows, out } => {
            let ds = load_dataset(&dataset)?;
            let fit_on = if all_rows { ds.clone() } else { split(&ds, &config)?.0 };
            let fit = fit_dataset(&fit_on, &config.logit_options()).data()?;
            emit_json(out.as_deref(), &LogitReport::new(&ds.ticker, &fit, config.logit.alpha))?;
        }
        Command::Train { dataset, features, logit, out } => {
            let ds = load_dataset(&dataset)?;
            let features = match logit {
                Some(p) => {
                    let report: LogitReport = read_json(&p)?;
                    mlp_inputs(&ds, &report.selected, &config.logit.fallback_features).0
                }
                None if features.is_empty() => ds.feature_names.clone(),
                None => features,
            };
            if features.is_empty() {
                return Err(data_error(anyhow!("no features to train on")));
            }
            let (train_set, _) = split(&ds, &config)?;
            let train_set = train_set.select_features(&features).data()?;
            let mlp = config.mlp.resolve(&ds.ticker, train_set.n_features());
            let net = init_network(&mlp.layer_sizes, mlp.init_seed).map_err(config_error)?;
            let opts = TrainOptions {
                epochs: mlp.epochs,
                learning_rate: mlp.learning_rate,
                batch_size: mlp.batch_size,
                seed: mlp.shuffle_seed,
            };
            let (net, history) = train(&net, &train_set, &opts).data()?;
            let meta = TrainingMeta {
                seed: mlp.shuffle_seed,
                epochs: mlp.epochs,
                learning_rate: mlp.learning_rate,
                batch_size: mlp.batch_size,
                final_loss: *history.last().expect("epochs >= 1"),
                train_rows: train_set.n_rows(),
            };
            write_json(&out, &ModelFile::new(&ds.ticker, &train_set.feature_names, &net, meta))?;
        }
        Command::Evaluate { model, dataset, out } => {
            let file: ModelFile = read_json(&model)?;
            let net = file.model().data()?;
            let ds = load_dataset(&dataset)?;
            let (_, test) = split(&ds, &config)?;
            let test = test.select_features(&file.features).data()?;
            let report = evaluate(&net, &test, config.mlp.threshold).data()?;
            if let Some(p) = &out {
                write_json(p, &report)?;
            }
            println!("{} | {}", file.ticker, format_accuracy(report.accuracy));
        }
        Command::Pipeline { format } => {
            let report = run_pipeline(&config)?;
            for f in &report.failures {
                eprintln!("skipped {f}");
            }
            print!("{}", String::from_utf8_lossy(&render_report(&report, format)?));
        }
        Command::Report { input, format } => {
            let report: PipelineReport = read_json(&input)?;
            print!("{}", String::from_utf8_lossy(&render_report(&report, format)?));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(x) => x,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            return ExitCode::from(f.code);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strs(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn overrides_are_split_out() {
        let (rest, o) = split_overrides(strs(&[
            "indexflow",
            "--mlp.epochs",
            "5",
            "pipeline",
            "--dataset.train_fraction=0.75",
            "--format",
            "json",
            "--mlp.learning_rate",
            "-0.1",
        ]))
        .unwrap();
        assert_eq!(rest, strs(&["indexflow", "pipeline", "--format", "json"]));
        assert_eq!(
            o,
            vec![
                ("mlp.epochs".to_string(), "5".to_string()),
                ("dataset.train_fraction".to_string(), "0.75".to_string()),
                ("mlp.learning_rate".to_string(), "-0.1".to_string()),
            ]
        );
        assert_eq!(split_overrides(strs(&["x", "--mlp.epochs"])).unwrap_err().code, 1);
    }
}
