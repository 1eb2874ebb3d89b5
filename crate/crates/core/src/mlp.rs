//! Fully connected feedforward network with logistic activations at every
//! layer, trained by mini-batch gradient descent on binary cross-entropy.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::LabeledDataset;
use crate::seed;
use crate::stats::sigmoid;

/// Probabilities are clamped to `[ε, 1 − ε]` inside the loss logarithms.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MlpError {
    #[error("invalid layer sizes {0:?}: need at least two positive sizes ending in 1")]
    InvalidLayerSizes(Vec<usize>),
    #[error("expected input of length {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("input contains a non-finite value")]
    NonFinite,
    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("dataset has no rows")]
    EmptyData,
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkModel {
    pub layer_sizes: Vec<usize>,
    /// `weights[l]` is `layer_sizes[l+1] × layer_sizes[l]`, row-major.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

/// Same shapes as the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    fn zeros_like(model: &NetworkModel) -> Self {
        Self {
            weights: model.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: model.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += scale * y);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += scale * y);
        }
    }
}

/// Activations of every layer, input included.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    pub activations: Vec<Vec<f64>>,
}

impl ForwardPass {
    pub fn output(&self) -> f64 {
        self.activations.last().expect("at least one layer")[0]
    }
}

fn validate_sizes(layer_sizes: &[usize]) -> Result<(), MlpError> {
    if layer_sizes.len() < 2 || layer_sizes.contains(&0) || layer_sizes.last() != Some(&1) {
        return Err(MlpError::InvalidLayerSizes(layer_sizes.to_vec()));
    }
    Ok(())
}

/// Weights uniform on `±1/√fan_in`, biases zero.
pub fn init_network(layer_sizes: &[usize], seed: u64) -> Result<NetworkModel, MlpError> {
    validate_sizes(layer_sizes)?;
    let mut rng = seed::rng(seed);
    let mut weights = Vec::with_capacity(layer_sizes.len() - 1);
    let mut biases = Vec::with_capacity(layer_sizes.len() - 1);
    for pair in layer_sizes.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let bound = 1.0 / (fan_in as f64).sqrt();
        weights.push((0..fan_in * fan_out).map(|_| rng.gen_range(-bound..=bound)).collect());
        biases.push(vec![0.0; fan_out]);
    }
    Ok(NetworkModel {
        layer_sizes: layer_sizes.to_vec(),
        weights,
        biases,
    })
}

impl NetworkModel {
    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>() + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// Checks that parameter shapes chain with `layer_sizes`.
    pub fn validate(&self) -> Result<(), MlpError> {
        validate_sizes(&self.layer_sizes)?;
        let layers = self.layer_sizes.len() - 1;
        let ok = self.weights.len() == layers
            && self.biases.len() == layers
            && self.layer_sizes.windows(2).enumerate().all(|(l, p)| {
                self.weights[l].len() == p[0] * p[1] && self.biases[l].len() == p[1]
            });
        if ok {
            Ok(())
        } else {
            Err(MlpError::InvalidLayerSizes(self.layer_sizes.clone()))
        }
    }
}

/// `a_{l+1} = σ(W_l a_l + b_l)` through every layer.
pub fn forward(model: &NetworkModel, x: &[f64]) -> Result<ForwardPass, MlpError> {
    if x.len() != model.input_size() {
        return Err(MlpError::DimensionMismatch {
            expected: model.input_size(),
            got: x.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(MlpError::NonFinite);
    }
    let mut activations = Vec::with_capacity(model.layer_sizes.len());
    activations.push(x.to_vec());
    for (w, b) in model.weights.iter().zip(&model.biases) {
        let prev = activations.last().expect("input pushed");
        let fan_in = prev.len();
        let next: Vec<f64> = b
            .iter()
            .enumerate()
            .map(|(r, bias)| {
                let row = &w[r * fan_in..(r + 1) * fan_in];
                sigmoid(bias + row.iter().zip(prev).map(|(a, c)| a * c).sum::<f64>())
            })
            .collect();
        activations.push(next);
    }
    Ok(ForwardPass { activations })
}

/// `−[y ln ŷ + (1 − y) ln(1 − ŷ)]` with `ŷ` clamped to `[ε, 1 − ε]`.
pub fn bce_loss(output: f64, y: f64) -> f64 {
    let p = output.clamp(LOG_EPS, 1.0 - LOG_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Per-sample loss and its exact gradient by reverse accumulation.
///
/// With a logistic output and cross-entropy loss the output delta is
/// `ŷ − y`; hidden deltas are `(Wᵀ δ) ⊙ a(1 − a)`.
pub fn backprop_gradients(model: &NetworkModel, x: &[f64], y: u8) -> Result<(Gradients, f64), MlpError> {
    let pass = forward(model, x)?;
    let acts = &pass.activations;
    let target = y as f64;
    let loss = bce_loss(pass.output(), target);

    let layers = model.weights.len();
    let mut grads = Gradients::zeros_like(model);
    let mut delta = vec![pass.output() - target];
    for l in (0..layers).rev() {
        let prev = &acts[l];
        let fan_in = prev.len();
        for (r, d) in delta.iter().enumerate() {
            grads.biases[l][r] = *d;
            let row = &mut grads.weights[l][r * fan_in..(r + 1) * fan_in];
            row.iter_mut().zip(prev).for_each(|(g, a)| *g = d * a);
        }
        if l > 0 {
            let w = &model.weights[l];
            delta = (0..fan_in)
                .map(|c| {
                    let back: f64 = delta.iter().enumerate().map(|(r, d)| w[r * fan_in + c] * d).sum();
                    back * prev[c] * (1.0 - prev[c])
                })
                .collect();
        }
    }
    Ok((grads, loss))
}

/// Mean cross-entropy over a dataset.
pub fn mean_loss(model: &NetworkModel, ds: &LabeledDataset) -> Result<f64, MlpError> {
    if ds.n_rows() == 0 {
        return Err(MlpError::EmptyData);
    }
    let mut total = 0.0;
    for i in 0..ds.n_rows() {
        total += bce_loss(forward(model, &ds.row(i))?.output(), ds.y[i] as f64);
    }
    Ok(total / ds.n_rows() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 500,
            learning_rate: 0.1,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Mini-batch gradient descent. Each epoch reshuffles the rows with a
/// generator seeded from `opts.seed`, walks them in batches of
/// `batch_size` (the last may be short), and applies
/// `θ ← θ − lr · mean batch gradient`. Returns the mean training loss after
/// every epoch.
pub fn train(
    model: &NetworkModel,
    data: &LabeledDataset,
    opts: &TrainOptions,
) -> Result<(NetworkModel, Vec<f64>), MlpError> {
    model.validate()?;
    let n = data.n_rows();
    if n == 0 {
        return Err(MlpError::EmptyData);
    }
    if data.n_features() != model.input_size() {
        return Err(MlpError::DimensionMismatch {
            expected: model.input_size(),
            got: data.n_features(),
        });
    }
    if opts.batch_size == 0 || opts.epochs == 0 || !(opts.learning_rate >= 0.0) || !opts.learning_rate.is_finite() {
        return Err(MlpError::InvalidHyperparameter(format!(
            "epochs {}, learning rate {}, batch size {}",
            opts.epochs, opts.learning_rate, opts.batch_size
        )));
    }

    let rows: Vec<Vec<f64>> = (0..n).map(|i| data.row(i)).collect();
    let mut model = model.clone();
    let mut rng = seed::rng(opts.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(opts.epochs);

    for epoch in 1..=opts.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(opts.batch_size) {
            let mut sum = Gradients::zeros_like(&model);
            for &i in batch {
                let (g, _) = backprop_gradients(&model, &rows[i], data.y[i])?;
                sum.add_scaled(&g, 1.0);
            }
            let step = -opts.learning_rate / batch.len() as f64;
            let mut update = Gradients::zeros_like(&model);
            update.add_scaled(&sum, step);
            for (w, u) in model.weights.iter_mut().zip(&update.weights) {
                w.iter_mut().zip(u).for_each(|(a, b)| *a += b);
            }
            for (w, u) in model.biases.iter_mut().zip(&update.biases) {
                w.iter_mut().zip(u).for_each(|(a, b)| *a += b);
            }
        }
        let loss = mean_loss(&model, data)?;
        if !loss.is_finite() || model.weights.iter().chain(&model.biases).flatten().any(|w| !w.is_finite()) {
            return Err(MlpError::Diverged { epoch, loss });
        }
        history.push(loss);
    }
    Ok((model, history))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_test: usize,
    pub accuracy: f64,
    pub true_pos: usize,
    pub true_neg: usize,
    pub false_pos: usize,
    pub false_neg: usize,
    pub threshold: f64,
}

/// Classifies each row as 1 when the output is at or above `threshold`.
pub fn evaluate(model: &NetworkModel, test: &LabeledDataset, threshold: f64) -> Result<EvalReport, MlpError> {
    if test.n_rows() == 0 {
        return Err(MlpError::EmptyData);
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(MlpError::InvalidHyperparameter(format!("threshold {threshold}")));
    }
    let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
    for i in 0..test.n_rows() {
        let predicted = forward(model, &test.row(i))?.output() >= threshold;
        match (predicted, test.y[i] == 1) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
        }
    }
    let n_test = test.n_rows();
    Ok(EvalReport {
        n_test,
        accuracy: (tp + tn) as f64 / n_test as f64,
        true_pos: tp,
        true_neg: tn,
        false_pos: fp,
        false_neg: fn_,
        threshold,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub final_loss: f64,
    pub train_rows: usize,
}

/// Model file written by the `train` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub ticker: String,
    pub features: Vec<String>,
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub training: TrainingMeta,
}

impl ModelFile {
    pub fn new(ticker: &str, features: &[String], model: &NetworkModel, training: TrainingMeta) -> Self {
        Self {
            ticker: ticker.to_string(),
            features: features.to_vec(),
            layer_sizes: model.layer_sizes.clone(),
            weights: model.weights.clone(),
            biases: model.biases.clone(),
            training,
        }
    }

    pub fn model(&self) -> Result<NetworkModel, MlpError> {
        let m = NetworkModel {
            layer_sizes: self.layer_sizes.clone(),
            weights: self.weights.clone(),
            biases: self.biases.clone(),
        };
        m.validate()?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ColumnMeta;
    use crate::ingest::TradingDate;
    use nalgebra::DMatrix;

    fn dataset(rows: &[Vec<f64>], y: &[u8]) -> LabeledDataset {
        let m = rows[0].len();
        let start = TradingDate::from_ymd(2010, 1, 1).unwrap();
        LabeledDataset {
            ticker: "T".into(),
            dates: (0..rows.len() as i64).map(|k| start.add_days(7 * k)).collect(),
            feature_names: (0..m).map(|j| format!("f{j}")).collect(),
            x: DMatrix::from_fn(rows.len(), m, |i, j| rows[i][j]),
            y: y.to_vec(),
            column_meta: (0..m)
                .map(|j| ColumnMeta {
                    name: format!("f{j}"),
                    raw_min: 0.0,
                    raw_max: 1.0,
                    mean_used: 0.5,
                    imputed_count: 0,
                    degenerate: false,
                })
                .collect(),
        }
    }

    fn zero_model(sizes: &[usize]) -> NetworkModel {
        let mut m = init_network(sizes, 0).unwrap();
        m.weights.iter_mut().flatten().for_each(|w| *w = 0.0);
        m
    }

    #[test]
    fn init_shapes_and_determinism() {
        let a = init_network(&[4, 8, 1], 3).unwrap();
        let b = init_network(&[4, 8, 1], 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.weights[0].len(), 32);
        assert_eq!(a.weights[1].len(), 8);
        assert_eq!((a.biases[0].len(), a.biases[1].len()), (8, 1));
        assert!(a.weights[0].iter().all(|w| w.abs() <= 0.5));
        assert!(a.biases.iter().flatten().all(|b| *b == 0.0));
        assert_ne!(a, init_network(&[4, 8, 1], 4).unwrap());
    }

    #[test]
    fn init_rejects_bad_sizes() {
        for sizes in [vec![], vec![3], vec![3, 0, 1], vec![3, 2]] {
            assert!(matches!(init_network(&sizes, 0), Err(MlpError::InvalidLayerSizes(_))));
        }
    }

    #[test]
    fn zero_network_outputs_half() {
        let m = zero_model(&[3, 5, 1]);
        for x in [[0.0, 0.0, 0.0], [1.0, -7.0, 30.0]] {
            assert_eq!(forward(&m, &x).unwrap().output(), 0.5);
        }
        let single = zero_model(&[1, 1]);
        assert_eq!(forward(&single, &[0.0]).unwrap().output(), 0.5);
        assert!(matches!(forward(&m, &[1.0]), Err(MlpError::DimensionMismatch { .. })));
        assert_eq!(forward(&m, &[f64::NAN, 0.0, 0.0]).unwrap_err(), MlpError::NonFinite);
    }

    #[test]
    fn hand_built_forward() {
        let m = NetworkModel {
            layer_sizes: vec![2, 2, 1],
            weights: vec![vec![1.0, -1.0, 2.0, 0.0], vec![1.0, -2.0]],
            biases: vec![vec![0.0, -1.0], vec![1.0]],
        };
        let s = |v: f64| 1.0 / (1.0 + (-v).exp());
        // x = (1, 2): h1 = σ(1 − 2) = σ(−1), h2 = σ(2 − 1) = σ(1)
        let h1 = s(-1.0);
        let h2 = s(1.0);
        let expected = s(1.0 + h1 - 2.0 * h2);
        let out = forward(&m, &[1.0, 2.0]).unwrap().output();
        assert!((out - expected).abs() < 1e-12);
    }

    #[test]
    fn stationary_point_gives_zero_gradient() {
        // zero network outputs exactly 0.5; a "label" of 0.5 is not binary, so
        // build the stationary case with a saturated output instead
        let mut m = zero_model(&[2, 3, 1]);
        m.biases[1][0] = 40.0;
        let (g, loss) = backprop_gradients(&m, &[0.3, 0.7], 1).unwrap();
        assert!(loss < 1e-12);
        assert!(g.weights.iter().flatten().chain(g.biases.iter().flatten()).all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn output_bias_gradient_ignores_input_scale() {
        let m = zero_model(&[2, 3, 1]);
        let (a, _) = backprop_gradients(&m, &[0.4, 0.9], 1).unwrap();
        let (b, _) = backprop_gradients(&m, &[0.8, 1.8], 1).unwrap();
        assert_eq!(a.biases[1], b.biases[1]);
        assert_eq!(a.biases[1][0], -0.5);
    }

    #[test]
    fn saturated_outputs_keep_finite_loss() {
        let mut m = zero_model(&[1, 1]);
        m.biases[0][0] = -1e4;
        let (g, loss) = backprop_gradients(&m, &[0.0], 1).unwrap();
        assert!(loss.is_finite());
        assert!((loss - -(LOG_EPS.ln())).abs() < 1e-9);
        assert!(g.biases[0][0].is_finite());
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let ds = dataset(&[vec![0.1, 0.2], vec![0.9, 0.3], vec![0.5, 0.5]], &[0, 1, 1]);
        let m = init_network(&[2, 4, 1], 1).unwrap();
        let opts = TrainOptions { epochs: 5, learning_rate: 0.0, batch_size: 2, seed: 1 };
        let (trained, history) = train(&m, &ds, &opts).unwrap();
        assert_eq!(trained, m);
        assert_eq!(history.len(), 5);
    }

    #[test]
    fn training_is_deterministic() {
        let rows: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64 / 40.0, ((i * 7) % 40) as f64 / 40.0]).collect();
        let y: Vec<u8> = rows.iter().map(|r| u8::from(r[0] + r[1] > 1.0)).collect();
        let ds = dataset(&rows, &y);
        let m = init_network(&[2, 4, 1], 9).unwrap();
        let opts = TrainOptions { epochs: 20, learning_rate: 0.3, batch_size: 8, seed: 5 };
        let a = train(&m, &ds, &opts).unwrap();
        let b = train(&m, &ds, &opts).unwrap();
        assert_eq!(a, b);
        let c = train(&m, &ds, &TrainOptions { seed: 6, ..opts }).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn divergence_is_reported() {
        let ds = dataset(&[vec![1e4], vec![1e4]], &[1, 1]);
        let m = zero_model(&[1, 1]);
        let opts = TrainOptions { epochs: 5, learning_rate: 1e308, batch_size: 2, seed: 0 };
        let r = train(&m, &ds, &opts);
        assert!(matches!(r, Err(MlpError::Diverged { .. })), "{r:?}");
    }

    #[test]
    fn constant_half_predictor_accuracy_is_label_mean() {
        let m = zero_model(&[1, 1]);
        let ds = dataset(&[vec![0.0], vec![0.1], vec![0.2], vec![0.3]], &[1, 0, 1, 1]);
        let r = evaluate(&m, &ds, 0.5).unwrap();
        assert_eq!((r.true_pos, r.false_pos, r.true_neg, r.false_neg), (3, 1, 0, 0));
        assert_eq!(r.accuracy, 0.75);
    }

    #[test]
    fn hand_tallied_confusion_counts() {
        // one input, weight 10, bias −5: output ≥ 0.5 exactly when x ≥ 0.5
        let m = NetworkModel { layer_sizes: vec![1, 1], weights: vec![vec![10.0]], biases: vec![vec![-5.0]] };
        let xs = [0.1, 0.4, 0.5, 0.6, 0.9, 0.2];
        let ys = [0, 1, 1, 0, 1, 0];
        // predictions: 0 0 1 1 1 0 -> tp 2 (x=.5,.9), fp 1 (.6), tn 2 (.1,.2), fn 1 (.4)
        let ds = dataset(&xs.iter().map(|v| vec![*v]).collect::<Vec<_>>(), &ys);
        let r = evaluate(&m, &ds, 0.5).unwrap();
        assert_eq!((r.true_pos, r.false_pos, r.true_neg, r.false_neg), (2, 1, 2, 1));
        assert!((r.accuracy - 4.0 / 6.0).abs() < 1e-15);
        assert_eq!(r.n_test, 6);
    }

    #[test]
    fn raising_threshold_never_adds_positives() {
        let m = init_network(&[2, 3, 1], 4).unwrap();
        let rows: Vec<Vec<f64>> = (0..50).map(|i| vec![(i % 10) as f64 / 10.0, (i / 10) as f64 / 5.0]).collect();
        let ds = dataset(&rows, &vec![1; 50]);
        let mut prev = usize::MAX;
        for k in 1..100 {
            let r = evaluate(&m, &ds, k as f64 / 100.0).unwrap();
            let positives = r.true_pos + r.false_pos;
            assert!(positives <= prev);
            prev = positives;
        }
    }

    #[test]
    fn model_file_round_trip() {
        let m = init_network(&[3, 2, 1], 8).unwrap();
        let meta = TrainingMeta { seed: 8, epochs: 1, learning_rate: 0.1, batch_size: 4, final_loss: 0.69, train_rows: 10 };
        let file = ModelFile::new("T", &["a".into(), "b".into(), "c".into()], &m, meta);
        let text = serde_json::to_string(&file).unwrap();
        let back: ModelFile = serde_json::from_str(&text).unwrap();
        assert_eq!(back.model().unwrap(), m);
    }
}
