use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::PipelineError;
use crate::dataset::{DatasetConfig, TargetMode, DEFAULT_MAX_MISSING_FRACTION, IN_INDEX};
use crate::logit::LogitOptions;
use crate::mlp::TrainOptions;
use crate::seed::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub membership_dir: PathBuf,
    pub panels_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            membership_dir: "data/membership".into(),
            panels_dir: "data/panels".into(),
            output_dir: "out".into(),
        }
    }
}

/// With `sample` off every panel in the panels directory is processed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortConfig {
    pub sample: bool,
    pub per_group: usize,
    pub seed: u64,
    pub allow_deficient: bool,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            sample: false,
            per_group: 10,
            seed: 2002,
            allow_deficient: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSettings {
    pub price_column: String,
    pub lag_features: Vec<String>,
    pub max_missing_fraction: f64,
    pub train_fraction: f64,
}

impl Default for DatasetSettings {
    fn default() -> Self {
        Self {
            price_column: "price".into(),
            lag_features: vec!["total_return".into()],
            max_missing_fraction: DEFAULT_MAX_MISSING_FRACTION,
            train_fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogitSettings {
    pub alpha: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Used, in dataset order, when no feature is significant.
    pub fallback_features: Vec<String>,
}

impl Default for LogitSettings {
    fn default() -> Self {
        let opts = LogitOptions::default();
        Self {
            alpha: 0.05,
            tol: opts.tol,
            max_iter: opts.max_iter,
            fallback_features: vec![
                IN_INDEX.into(),
                "total_return_lag1w".into(),
                "sentiment".into(),
                "trades".into(),
            ],
        }
    }
}

/// Per-company replacement for any of the global training settings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpOverride {
    pub layer_sizes: Option<Vec<usize>>,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpSettings {
    /// Sizes after the input layer; the input width is the number of features
    /// handed to the network.
    pub layer_sizes: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub threshold: f64,
    pub overrides: BTreeMap<String, MlpOverride>,
}

impl Default for MlpSettings {
    fn default() -> Self {
        let t = TrainOptions::default();
        Self {
            layer_sizes: vec![8, 1],
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            seed: 42,
            threshold: 0.5,
            overrides: BTreeMap::new(),
        }
    }
}

/// Effective training settings for one company.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedMlp {
    pub layer_sizes: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub threshold: f64,
    pub init_seed: u64,
    pub shuffle_seed: u64,
}

impl MlpSettings {
    pub fn company_seed(&self, ticker: &str) -> u64 {
        derive_seed(self.seed, ticker)
    }

    pub fn resolve(&self, ticker: &str, n_inputs: usize) -> ResolvedMlp {
        let o = self.overrides.get(ticker).cloned().unwrap_or_default();
        let mut layer_sizes = vec![n_inputs];
        layer_sizes.extend(o.layer_sizes.unwrap_or_else(|| self.layer_sizes.clone()));
        let s = self.company_seed(ticker);
        ResolvedMlp {
            layer_sizes,
            epochs: o.epochs.unwrap_or(self.epochs),
            learning_rate: o.learning_rate.unwrap_or(self.learning_rate),
            batch_size: o.batch_size.unwrap_or(self.batch_size),
            threshold: o.threshold.unwrap_or(self.threshold),
            init_seed: derive_seed(s, "init"),
            shuffle_seed: derive_seed(s, "shuffle"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub cohort: CohortConfig,
    pub dataset: DatasetSettings,
    pub logit: LogitSettings,
    pub mlp: MlpSettings,
    pub target_mode: TargetMode,
    /// Worker threads; 0 lets the pool pick.
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: PathsConfig::default(),
            cohort: CohortConfig::default(),
            dataset: DatasetSettings::default(),
            logit: LogitSettings::default(),
            mlp: MlpSettings::default(),
            target_mode: TargetMode::Direction,
            workers: 0,
        }
    }
}

fn config_err(msg: impl Into<String>) -> PipelineError {
    PipelineError::Config(msg.into())
}

fn check_layers(sizes: &[usize], what: &str) -> Result<(), PipelineError> {
    if sizes.is_empty() || sizes.contains(&0) || sizes.last() != Some(&1) {
        return Err(config_err(format!(
            "{what}: layer sizes must be positive and end in 1, got {sizes:?}"
        )));
    }
    Ok(())
}

fn check_training(lr: f64, epochs: usize, batch: usize, threshold: f64, what: &str) -> Result<(), PipelineError> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(config_err(format!("{what}: learning_rate must be positive, got {lr}")));
    }
    if epochs == 0 || batch == 0 {
        return Err(config_err(format!("{what}: epochs and batch_size must be at least 1")));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(config_err(format!("{what}: threshold must lie in (0, 1), got {threshold}")));
    }
    Ok(())
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        serde_json::from_str(text).map_err(|e| config_err(format!("config: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            price_column: self.dataset.price_column.clone(),
            lag_features: self.dataset.lag_features.clone(),
            max_missing_fraction: self.dataset.max_missing_fraction,
            train_fraction: self.dataset.train_fraction,
            target: self.target_mode,
        }
    }

    pub fn logit_options(&self) -> LogitOptions {
        LogitOptions {
            max_iter: self.logit.max_iter,
            tol: self.logit.tol,
        }
    }

    /// Replaces every module seed with one derived from `root`:
    /// `cohort.seed = derive_seed(root, "cohort")` and
    /// `mlp.seed = derive_seed(root, "mlp")`.
    pub fn apply_root_seed(&mut self, root: u64) {
        self.cohort.seed = derive_seed(root, "cohort");
        self.mlp.seed = derive_seed(root, "mlp");
    }

    /// Sets one field by dotted name, e.g. `mlp.epochs` = `200`.
    ///
    /// The value is read as JSON (numbers, booleans, arrays, objects); where
    /// the field holds a string a bare word is taken literally.
    pub fn set_dotted(&mut self, key: &str, raw: &str) -> Result<(), PipelineError> {
        let mut doc = serde_json::to_value(&*self).map_err(|e| config_err(e.to_string()))?;
        let parts: Vec<&str> = key.split('.').collect();
        let mut slot = &mut doc;
        for (i, part) in parts.iter().enumerate() {
            let Value::Object(map) = slot else {
                return Err(config_err(format!("unknown config key `{key}`")));
            };
            if !map.contains_key(*part) {
                if i != 2 || parts[..2] != ["mlp", "overrides"] {
                    return Err(config_err(format!("unknown config key `{key}`")));
                }
                let blank = serde_json::to_value(MlpOverride::default()).map_err(|e| config_err(e.to_string()))?;
                map.insert(part.to_string(), blank);
            }
            slot = map.get_mut(*part).expect("present");
        }
        let parsed = serde_json::from_str::<Value>(raw);
        *slot = match (&*slot, parsed) {
            (Value::String(_), Ok(Value::String(s))) => Value::String(s),
            (Value::String(_), _) => Value::String(raw.to_string()),
            (_, Ok(v)) => v,
            (_, Err(_)) => Value::String(raw.to_string()),
        };
        *self = serde_json::from_value(doc).map_err(|e| config_err(format!("--{key} {raw}: {e}")))?;
        Ok(())
    }

    /// Range and consistency checks that need no file system access.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let d = &self.dataset;
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return Err(config_err(format!("dataset.train_fraction must lie in (0, 1), got {}", d.train_fraction)));
        }
        if !(0.0..=1.0).contains(&d.max_missing_fraction) {
            return Err(config_err(format!(
                "dataset.max_missing_fraction must lie in [0, 1], got {}",
                d.max_missing_fraction
            )));
        }
        if d.price_column.is_empty() {
            return Err(config_err("dataset.price_column is empty"));
        }
        let l = &self.logit;
        if !(l.alpha > 0.0 && l.alpha < 1.0) {
            return Err(config_err(format!("logit.alpha must lie in (0, 1), got {}", l.alpha)));
        }
        if !(l.tol > 0.0) || l.max_iter == 0 {
            return Err(config_err("logit.tol must be positive and logit.max_iter at least 1"));
        }
        let m = &self.mlp;
        check_layers(&m.layer_sizes, "mlp")?;
        check_training(m.learning_rate, m.epochs, m.batch_size, m.threshold, "mlp")?;
        for (ticker, o) in &m.overrides {
            let what = format!("mlp.overrides.{ticker}");
            if let Some(sizes) = &o.layer_sizes {
                check_layers(sizes, &what)?;
            }
            check_training(
                o.learning_rate.unwrap_or(m.learning_rate),
                o.epochs.unwrap_or(m.epochs),
                o.batch_size.unwrap_or(m.batch_size),
                o.threshold.unwrap_or(m.threshold),
                &what,
            )?;
        }
        if self.cohort.sample && self.cohort.per_group == 0 {
            return Err(config_err("cohort.per_group must be at least 1"));
        }
        let p = &self.paths;
        let all = [&p.membership_dir, &p.panels_dir, &p.output_dir];
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                if all[i] == all[j] {
                    return Err(config_err(format!("paths must be distinct: {}", all[i].display())));
                }
            }
        }
        Ok(())
    }

    /// `validate` plus existence of the input directories.
    pub fn validate_paths(&self) -> Result<(), PipelineError> {
        self.validate()?;
        for (name, dir) in [
            ("paths.membership_dir", &self.paths.membership_dir),
            ("paths.panels_dir", &self.paths.panels_dir),
        ] {
            if !dir.is_dir() {
                return Err(config_err(format!("{name}: {} is not a directory", dir.display())));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        PipelineConfig::default().validate().unwrap();
        let json = serde_json::to_string(&PipelineConfig::default()).unwrap();
        assert_eq!(PipelineConfig::from_json(&json).unwrap(), PipelineConfig::default());
        assert_eq!(PipelineConfig::from_json("{}").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn dotted_overrides() {
        let mut c = PipelineConfig::default();
        c.set_dotted("mlp.epochs", "200").unwrap();
        c.set_dotted("mlp.layer_sizes", "[4,1]").unwrap();
        c.set_dotted("dataset.price_column", "close").unwrap();
        c.set_dotted("target_mode", "membership").unwrap();
        c.set_dotted("paths.output_dir", "/tmp/x").unwrap();
        c.set_dotted("cohort.sample", "true").unwrap();
        c.set_dotted("mlp.overrides.AAA.epochs", "7").unwrap();
        assert_eq!(c.mlp.epochs, 200);
        assert_eq!(c.mlp.layer_sizes, vec![4, 1]);
        assert_eq!(c.dataset.price_column, "close");
        assert_eq!(c.target_mode, TargetMode::Membership);
        assert_eq!(c.paths.output_dir, PathBuf::from("/tmp/x"));
        assert!(c.cohort.sample);
        assert_eq!(c.mlp.overrides["AAA"].epochs, Some(7));
        assert_eq!(c.mlp.resolve("AAA", 3).epochs, 7);
        assert_eq!(c.mlp.resolve("BBB", 3).epochs, 200);
        assert_eq!(c.mlp.resolve("BBB", 3).layer_sizes, vec![3, 4, 1]);

        assert!(matches!(c.set_dotted("mlp.nope", "1"), Err(PipelineError::Config(_))));
        assert!(matches!(c.set_dotted("mlp.epochs", "fast"), Err(PipelineError::Config(_))));
        assert!(matches!(c.set_dotted("target_mode", "price"), Err(PipelineError::Config(_))));
    }

    #[test]
    fn range_checks() {
        let bad: [(&str, &str); 7] = [
            ("dataset.train_fraction", "1.0"),
            ("dataset.train_fraction", "0"),
            ("dataset.max_missing_fraction", "1.5"),
            ("logit.alpha", "0"),
            ("mlp.layer_sizes", "[8,2]"),
            ("mlp.threshold", "1"),
            ("paths.output_dir", "\"data/panels\""),
        ];
        for (k, v) in bad {
            let mut c = PipelineConfig::default();
            c.set_dotted(k, v).unwrap();
            assert!(matches!(c.validate(), Err(PipelineError::Config(_))), "{k} = {v}");
        }
    }

    #[test]
    fn missing_input_dir_is_config_error() {
        let tmp = tempfile::tempdir().unwrap();
        let mut c = PipelineConfig::default();
        c.paths.membership_dir = tmp.path().join("m");
        c.paths.panels_dir = tmp.path().join("nope");
        c.paths.output_dir = tmp.path().join("out");
        std::fs::create_dir(&c.paths.membership_dir).unwrap();
        let err = c.validate_paths().unwrap_err();
        assert!(matches!(err, PipelineError::Config(ref m) if m.contains("panels_dir")), "{err}");
    }

    #[test]
    fn root_seed_is_derived() {
        let mut a = PipelineConfig::default();
        a.apply_root_seed(7);
        assert_eq!(a.cohort.seed, derive_seed(7, "cohort"));
        assert_eq!(a.mlp.seed, derive_seed(7, "mlp"));
        assert_ne!(a.cohort.seed, a.mlp.seed);
    }
}
