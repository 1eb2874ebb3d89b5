//! Synthetic membership series and company panels drawn from a planted
//! logistic model, so every stage of the pipeline can be checked against
//! known parameters.
//!
//! Per company, the generator draws (in this order, per weekly row) one
//! uniform value for each raw panel column in column order, then the label
//! uniform, then one deletion uniform per non-price column. Company streams
//! are seeded with `derive_seed(root, ticker)`; the membership chain uses
//! `derive_seed(root, "membership")`.

use std::collections::BTreeSet;
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{IN_INDEX, LAG_SUFFIX};
use crate::ingest::{CompanyPanel, MembershipSnapshot, PanelRow, TradingDate};
use crate::seed;
use crate::stats::sigmoid;

pub const PRICE_COLUMN: &str = "price";
pub const START_PRICE: f64 = 100.0;
pub const UP_STEP: f64 = 1.01;
pub const DOWN_STEP: f64 = 0.99;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid planted model: {0}")]
    InvalidModel(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// First nominal week of every synthetic series (a Friday).
pub fn first_friday() -> TradingDate {
    TradingDate::from_ymd(2002, 1, 4).expect("valid date")
}

pub fn weekly_dates(n_weeks: usize) -> Vec<TradingDate> {
    let start = first_friday();
    (0..n_weeks as i64).map(|k| start.add_days(7 * k)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedCoefficient {
    pub name: String,
    pub beta: f64,
}

/// Ground-truth label model `P(y = 1 | x) = σ(intercept + Σ βⱼ xⱼ)`.
///
/// Names refer to dataset columns: `in_index` comes from the membership
/// series, `<f>_lag1w` from the previous row's raw `<f>`, anything else is
/// a raw panel column of the same name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedModel {
    pub intercept: f64,
    pub coefficients: Vec<PlantedCoefficient>,
    pub noise_features: Vec<String>,
}

impl PlantedModel {
    pub fn new(intercept: f64, coefficients: &[(&str, f64)], noise_features: &[&str]) -> Self {
        Self {
            intercept,
            coefficients: coefficients
                .iter()
                .map(|(name, beta)| PlantedCoefficient { name: name.to_string(), beta: *beta })
                .collect(),
            noise_features: noise_features.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let mut seen = BTreeSet::new();
        for name in self.coefficients.iter().map(|c| &c.name).chain(&self.noise_features) {
            if name.is_empty() || name == PRICE_COLUMN || !seen.insert(name) {
                return Err(SynthError::InvalidModel(format!("feature `{name}` is empty, reserved or repeated")));
            }
        }
        if !self.intercept.is_finite() || self.coefficients.iter().any(|c| !c.beta.is_finite()) {
            return Err(SynthError::InvalidModel("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn beta(&self, name: &str) -> f64 {
        self.coefficients.iter().find(|c| c.name == name).map_or(0.0, |c| c.beta)
    }

    /// Multiplies the intercept and every coefficient by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            intercept: self.intercept * factor,
            coefficients: self
                .coefficients
                .iter()
                .map(|c| PlantedCoefficient { name: c.name.clone(), beta: c.beta * factor })
                .collect(),
            noise_features: self.noise_features.clone(),
        }
    }

    /// `σ(intercept + β·x)` for `x` in coefficient order.
    pub fn probability(&self, x: &[f64]) -> f64 {
        let eta = self.intercept + self.coefficients.iter().zip(x).map(|(c, v)| c.beta * v).sum::<f64>();
        sigmoid(eta)
    }

    /// Raw panel columns (excluding price) the model needs, sorted.
    pub fn panel_columns(&self) -> Vec<String> {
        let cols: BTreeSet<String> = self
            .coefficients
            .iter()
            .map(|c| &c.name)
            .chain(&self.noise_features)
            .filter(|n| *n != IN_INDEX)
            .map(|n| n.strip_suffix(LAG_SUFFIX).unwrap_or(n).to_string())
            .collect();
        cols.into_iter().collect()
    }
}

/// Two-state membership chain per company: week one includes each company
/// with probability 1/2, later weeks flip each company's state with
/// probability `switch_prob`.
pub fn generate_membership_series(
    tickers: &[String],
    n_weeks: usize,
    switch_prob: f64,
    seed: u64,
) -> Result<Vec<MembershipSnapshot>, SynthError> {
    if n_weeks == 0 || tickers.is_empty() {
        return Err(SynthError::InvalidArgument("need at least one week and one company".into()));
    }
    if !(0.0..=1.0).contains(&switch_prob) {
        return Err(SynthError::InvalidArgument(format!("switch_prob {switch_prob}")));
    }
    let mut rng = seed::rng(seed);
    let mut state: Vec<bool> = tickers.iter().map(|_| rng.gen::<f64>() < 0.5).collect();
    let mut out = Vec::with_capacity(n_weeks);
    for (week, date) in weekly_dates(n_weeks).into_iter().enumerate() {
        if week > 0 {
            for s in &mut state {
                if rng.gen::<f64>() < switch_prob {
                    *s = !*s;
                }
            }
        }
        out.push(MembershipSnapshot {
            requested_date: date,
            effective_date: date,
            constituents: tickers
                .iter()
                .zip(&state)
                .filter(|(_, s)| **s)
                .map(|(t, _)| t.clone())
                .collect(),
        });
    }
    Ok(out)
}

pub fn synthetic_tickers(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("SYN{i:03}")).collect()
}

/// Membership of one ticker across a snapshot series.
pub fn membership_path(snapshots: &[MembershipSnapshot], ticker: &str) -> Vec<bool> {
    snapshots.iter().map(|s| s.contains(ticker)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCompany {
    pub panel: CompanyPanel,
    /// Labels of rows `1..n` (row 0 has no predecessor).
    pub true_labels: Vec<u8>,
    /// Planted-model inputs for rows `1..n`, in coefficient order, before
    /// any cell deletion.
    pub planted_inputs: Vec<Vec<f64>>,
}

/// Draws one company's panel. `in_index[t]` is the company's membership in
/// week `t`; its length sets the number of weeks.
pub fn generate_company_panel(
    planted: &PlantedModel,
    ticker: &str,
    in_index: &[bool],
    missing_prob: f64,
    seed: u64,
) -> Result<SyntheticCompany, SynthError> {
    planted.validate()?;
    let n = in_index.len();
    if n < 3 {
        return Err(SynthError::InvalidArgument(format!("need at least 3 weeks, got {n}")));
    }
    if !(0.0..=1.0).contains(&missing_prob) {
        return Err(SynthError::InvalidArgument(format!("missing_prob {missing_prob}")));
    }
    let raw_cols = planted.panel_columns();
    let mut names = vec![PRICE_COLUMN.to_string()];
    names.extend(raw_cols.iter().cloned());
    let mut panel = CompanyPanel::new(ticker, names);

    let mut rng = seed::rng(seed);
    let mut prev_raw: Vec<f64> = Vec::new();
    let mut price = START_PRICE;
    let mut true_labels = Vec::with_capacity(n - 1);
    let mut planted_inputs = Vec::with_capacity(n - 1);

    for (t, date) in weekly_dates(n).into_iter().enumerate() {
        let raw: Vec<f64> = raw_cols.iter().map(|_| rng.gen::<f64>()).collect();
        let label_draw: f64 = rng.gen();
        if t > 0 {
            let inputs: Vec<f64> = planted
                .coefficients
                .iter()
                .map(|c| {
                    if c.name == IN_INDEX {
                        return f64::from(u8::from(in_index[t]));
                    }
                    let (base, lagged) = match c.name.strip_suffix(LAG_SUFFIX) {
                        Some(b) => (b, true),
                        None => (c.name.as_str(), false),
                    };
                    let j = raw_cols.iter().position(|r| r == base).expect("column derived from model");
                    if lagged {
                        prev_raw[j]
                    } else {
                        raw[j]
                    }
                })
                .collect();
            let label = u8::from(label_draw < planted.probability(&inputs));
            price *= if label == 1 { UP_STEP } else { DOWN_STEP };
            true_labels.push(label);
            planted_inputs.push(inputs);
        }
        let mut values = Vec::with_capacity(raw.len() + 1);
        values.push(Some(price));
        for v in &raw {
            let deleted = rng.gen::<f64>() < missing_prob;
            values.push((!deleted).then_some(*v));
        }
        panel.rows.push(PanelRow { date, values });
        prev_raw = raw;
    }
    Ok(SyntheticCompany {
        panel,
        true_labels,
        planted_inputs,
    })
}

/// Accuracy of the rule `σ(intercept + β·x) ≥ 1/2` against the realized labels.
pub fn bayes_accuracy(planted: &PlantedModel, company: &SyntheticCompany) -> f64 {
    bayes_accuracy_on(planted, company, 0..company.true_labels.len())
}

/// [`bayes_accuracy`] restricted to labeled rows `rows` (indices into
/// `true_labels`).
pub fn bayes_accuracy_on(planted: &PlantedModel, company: &SyntheticCompany, rows: Range<usize>) -> f64 {
    let n = rows.len();
    let hits = company.planted_inputs[rows.clone()]
        .iter()
        .zip(&company.true_labels[rows])
        .filter(|(x, y)| u8::from(planted.probability(x) >= 0.5) == **y)
        .count();
    hits as f64 / n as f64
}

/// `E[max(p, 1 − p)]` over the given inputs: the Bayes accuracy in
/// expectation over label noise.
pub fn expected_bayes_accuracy(planted: &PlantedModel, inputs: &[Vec<f64>]) -> f64 {
    inputs
        .iter()
        .map(|x| {
            let p = planted.probability(x);
            p.max(1.0 - p)
        })
        .sum::<f64>()
        / inputs.len() as f64
}

/// Finds the scale factor for `base` whose expected Bayes accuracy on
/// `n` rows of synthetic inputs equals `target`, by bisection on [0, 64].
pub fn calibrate_scale(base: &PlantedModel, target: f64, n: usize, seed: u64) -> Result<f64, SynthError> {
    if !(0.5..1.0).contains(&target) {
        return Err(SynthError::InvalidArgument(format!("target accuracy {target}")));
    }
    let path: Vec<bool> = {
        let mut rng = seed::rng(seed::derive_seed(seed, "calibration-membership"));
        (0..n + 1).map(|_| rng.gen::<f64>() < 0.5).collect()
    };
    let sample = generate_company_panel(base, "CALIBRATION", &path, 0.0, seed)?;
    let acc = |s: f64| expected_bayes_accuracy(&base.scaled(s), &sample.planted_inputs);
    let (mut lo, mut hi) = (0.0, 64.0);
    if acc(hi) < target {
        return Err(SynthError::InvalidArgument(format!("target {target} unreachable for this model")));
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if acc(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Direction of the planted model used by the default synthetic corpus:
/// the four variables the analysis singles out, plus two pure-noise columns.
/// The intercept centres the linear predictor at the mean input.
pub fn default_base_model() -> PlantedModel {
    PlantedModel::new(
        -1.0,
        &[
            (IN_INDEX, 1.0),
            ("trades", -1.0),
            ("sentiment", 1.0),
            ("total_return_lag1w", 1.0),
        ],
        &["noise_1", "noise_2"],
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_companies: usize,
    pub n_weeks: usize,
    pub switch_prob: f64,
    pub missing_prob: f64,
    pub seed: u64,
    /// Calibrate the planted scale to this expected Bayes accuracy; `None`
    /// uses `planted` as given.
    pub target_bayes_accuracy: Option<f64>,
    pub planted: PlantedModel,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_companies: 10,
            n_weeks: 2001,
            switch_prob: 0.02,
            missing_prob: 0.0,
            seed: 2002,
            target_bayes_accuracy: Some(0.75),
            planted: default_base_model(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompanyTruth {
    pub ticker: String,
    pub seed: u64,
    pub n_labeled: usize,
    pub bayes_accuracy: f64,
    pub weeks_in_index: usize,
}

/// Contents of `truth.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub config: SynthConfig,
    pub scale: f64,
    pub planted: PlantedModel,
    pub companies: Vec<CompanyTruth>,
    pub generator: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub snapshots: Vec<MembershipSnapshot>,
    pub companies: Vec<SyntheticCompany>,
    pub truth: SynthTruth,
}

pub fn generate_corpus(config: &SynthConfig) -> Result<SyntheticCorpus, SynthError> {
    config.planted.validate()?;
    let scale = match config.target_bayes_accuracy {
        Some(target) => calibrate_scale(&config.planted, target, config.n_weeks, config.seed)?,
        None => 1.0,
    };
    let planted = config.planted.scaled(scale);
    let tickers = synthetic_tickers(config.n_companies);
    let snapshots = generate_membership_series(
        &tickers,
        config.n_weeks,
        config.switch_prob,
        seed::derive_seed(config.seed, "membership"),
    )?;
    let mut companies = Vec::with_capacity(tickers.len());
    let mut truths = Vec::with_capacity(tickers.len());
    for t in &tickers {
        let path = membership_path(&snapshots, t);
        let company_seed = seed::derive_seed(config.seed, t);
        let c = generate_company_panel(&planted, t, &path, config.missing_prob, company_seed)?;
        truths.push(CompanyTruth {
            ticker: t.clone(),
            seed: company_seed,
            n_labeled: c.true_labels.len(),
            bayes_accuracy: bayes_accuracy(&planted, &c),
            weeks_in_index: path.iter().filter(|b| **b).count(),
        });
        companies.push(c);
    }
    Ok(SyntheticCorpus {
        snapshots,
        companies,
        truth: SynthTruth {
            config: config.clone(),
            scale,
            planted,
            companies: truths,
            generator: seed::GENERATOR.to_string(),
        },
    })
}

/// Writes `membership/<date>.csv`, `panels/<ticker>.csv` and `truth.json`.
pub fn write_corpus(corpus: &SyntheticCorpus, dir: &Path) -> Result<(), SynthError> {
    let mdir = dir.join("membership");
    let pdir = dir.join("panels");
    fs::create_dir_all(&mdir)?;
    fs::create_dir_all(&pdir)?;
    for s in &corpus.snapshots {
        let mut buf = Vec::new();
        s.write_csv(&mut buf)?;
        fs::write(mdir.join(format!("{}.csv", s.requested_date)), buf)?;
    }
    for c in &corpus.companies {
        let mut buf = Vec::new();
        c.panel.write_csv(&mut buf)?;
        fs::write(pdir.join(format!("{}.csv", c.panel.ticker)), buf)?;
    }
    fs::write(dir.join("truth.json"), serde_json::to_string_pretty(&corpus.truth)?)?;
    Ok(())
}
