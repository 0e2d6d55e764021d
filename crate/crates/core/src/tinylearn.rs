//! Minimal supervised-learning core: multinomial logistic regression and a
//! one-hidden-layer tanh MLP, trained with mini-batch SGD on cross-entropy.
//!
//! Weights live in a single flat vector with a canonical layout, layer by
//! layer: the weight matrix row-major (one row per output unit), then that
//! layer's biases. Aggregation and serialization rely on this layout.
//!
//! All arithmetic is `f64` and every reduction runs in a fixed index order,
//! so identical inputs give bit-identical outputs on every platform.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LearnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid hyperparameters: {0}")]
    HyperParams(String),
}

pub type Result<T> = std::result::Result<T, LearnError>;

/// Model architecture. `hidden_units == 0` means logistic regression.
///
/// `arch_id` is canonical (`logreg-<f>x<c>` or `mlp-<f>x<h>x<c>`), so a
/// weight vector's id alone determines its shape.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ModelArch {
    pub arch_id: String,
    pub n_features: usize,
    pub n_classes: usize,
    pub hidden_units: usize,
}

impl ModelArch {
    pub fn logistic(n_features: usize, n_classes: usize) -> Self {
        Self::with_hidden(n_features, 0, n_classes)
    }

    pub fn mlp(n_features: usize, hidden_units: usize, n_classes: usize) -> Self {
        Self::with_hidden(n_features, hidden_units, n_classes)
    }

    fn with_hidden(n_features: usize, hidden_units: usize, n_classes: usize) -> Self {
        Self { arch_id: Self::canonical_id(n_features, hidden_units, n_classes), n_features, n_classes, hidden_units }
    }

    pub fn canonical_id(n_features: usize, hidden_units: usize, n_classes: usize) -> String {
        if hidden_units == 0 {
            format!("logreg-{n_features}x{n_classes}")
        } else {
            format!("mlp-{n_features}x{hidden_units}x{n_classes}")
        }
    }

    /// Parses a canonical architecture id back into its fields.
    pub fn from_id(arch_id: &str) -> Result<Self> {
        let bad = || LearnError::InvalidArch(format!("unrecognized arch_id {arch_id:?}"));
        let (kind, dims) = arch_id.split_once('-').ok_or_else(bad)?;
        let dims: Vec<usize> = dims.split('x').map(|d| d.parse::<usize>().map_err(|_| bad())).collect::<Result<_>>()?;
        let arch = match (kind, dims.as_slice()) {
            ("logreg", [f, c]) => Self::logistic(*f, *c),
            ("mlp", [f, h, c]) if *h > 0 => Self::mlp(*f, *h, *c),
            _ => return Err(bad()),
        };
        arch.validate()?;
        // Reject non-canonical spellings such as leading zeros.
        if arch.arch_id != arch_id {
            return Err(bad());
        }
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_features == 0 {
            return Err(LearnError::InvalidArch("n_features must be positive".into()));
        }
        if self.n_classes == 0 {
            return Err(LearnError::InvalidArch("n_classes must be positive".into()));
        }
        let expected = Self::canonical_id(self.n_features, self.hidden_units, self.n_classes);
        if self.arch_id != expected {
            return Err(LearnError::InvalidArch(format!(
                "arch_id {:?} does not match fields (expected {expected:?})",
                self.arch_id
            )));
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        if self.hidden_units == 0 {
            self.n_features * self.n_classes + self.n_classes
        } else {
            let h = self.hidden_units;
            self.n_features * h + h + h * self.n_classes + self.n_classes
        }
    }

    /// Flags, per parameter, whether the slot is a bias.
    fn bias_mask(&self) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.parameter_count());
        let mut layer = |rows: usize, cols: usize| {
            mask.extend(std::iter::repeat_n(false, rows * cols));
            mask.extend(std::iter::repeat_n(true, rows));
        };
        if self.hidden_units == 0 {
            layer(self.n_classes, self.n_features);
        } else {
            layer(self.hidden_units, self.n_features);
            layer(self.n_classes, self.hidden_units);
        }
        mask
    }
}

/// Flat model parameters tagged with their architecture id.
///
/// Length always matches the architecture. Finiteness is not enforced here
/// because received updates must be inspectable even when corrupted; the
/// aggregation path checks it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    arch_id: String,
    values: Vec<f64>,
}

impl WeightVector {
    pub fn new(arch_id: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        let arch_id = arch_id.into();
        let arch = ModelArch::from_id(&arch_id)?;
        if values.len() != arch.parameter_count() {
            return Err(LearnError::Shape(format!(
                "{arch_id} needs {} parameters, got {}",
                arch.parameter_count(),
                values.len()
            )));
        }
        Ok(Self { arch_id, values })
    }

    pub fn zeros(arch: &ModelArch) -> Self {
        Self { arch_id: arch.arch_id.clone(), values: vec![0.0; arch.parameter_count()] }
    }

    pub fn arch_id(&self) -> &str {
        &self.arch_id
    }

    pub fn arch(&self) -> ModelArch {
        ModelArch::from_id(&self.arch_id).expect("weight vector holds a validated arch id")
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Labelled samples. Rows are samples, columns features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDataset")]
pub struct Dataset {
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    n_classes: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDataset {
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    n_classes: usize,
}

impl TryFrom<RawDataset> for Dataset {
    type Error = LearnError;

    fn try_from(raw: RawDataset) -> Result<Self> {
        Dataset::new(raw.features, raw.labels, raw.n_classes)
    }
}

impl Dataset {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if features.is_empty() {
            return Err(LearnError::EmptyDataset);
        }
        if n_classes == 0 {
            return Err(LearnError::InvalidDataset("n_classes must be positive".into()));
        }
        if features.len() != labels.len() {
            return Err(LearnError::InvalidDataset(format!(
                "{} feature rows but {} labels",
                features.len(),
                labels.len()
            )));
        }
        let width = features[0].len();
        if width == 0 {
            return Err(LearnError::InvalidDataset("samples have no features".into()));
        }
        for (i, row) in features.iter().enumerate() {
            if row.len() != width {
                return Err(LearnError::InvalidDataset(format!(
                    "row {i} has {} features, expected {width}",
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(LearnError::InvalidDataset(format!("row {i} has a non-finite value")));
            }
        }
        if let Some((i, y)) = labels.iter().enumerate().find(|(_, &y)| y >= n_classes) {
            return Err(LearnError::InvalidDataset(format!("label {y} at row {i} outside [0, {n_classes})")));
        }
        Ok(Self { features, labels, n_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    /// Always false: a dataset holds at least one sample.
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.features[0].len()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let features = indices.iter().map(|&i| self.features[i].clone()).collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self::new(features, labels, self.n_classes)
    }

    /// Same features with replaced labels.
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Self> {
        Self::new(self.features.clone(), labels, self.n_classes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub epochs: u32,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub shuffle_seed: u64,
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(LearnError::HyperParams("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(LearnError::HyperParams("learning_rate must be positive".into()));
        }
        if self.batch_size < 1 {
            return Err(LearnError::HyperParams("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    /// Mean cross-entropy on the full training set after the last epoch.
    pub final_loss: f64,
    pub n_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct EvalMetrics {
    #[serde(with = "crate::lenient_f64")]
    #[schemars(with = "crate::lenient_f64::Schema")]
    pub loss: f64,
    pub accuracy: f64,
    pub n_samples: usize,
}

/// Fresh parameters: weights uniform in (-0.05, 0.05), biases zero.
pub fn init_weights(arch: &ModelArch, seed: u64) -> Result<WeightVector> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values =
        arch.bias_mask().into_iter().map(|is_bias| if is_bias { 0.0 } else { rng.random_range(-0.05..0.05) }).collect();
    Ok(WeightVector { arch_id: arch.arch_id.clone(), values })
}

fn check_shapes(arch: &ModelArch, data: &Dataset) -> Result<()> {
    if data.n_features() != arch.n_features {
        return Err(LearnError::Shape(format!(
            "{} expects {} features, data has {}",
            arch.arch_id,
            arch.n_features,
            data.n_features()
        )));
    }
    if data.n_classes() != arch.n_classes {
        return Err(LearnError::Shape(format!(
            "{} expects {} classes, data has {}",
            arch.arch_id,
            arch.n_classes,
            data.n_classes()
        )));
    }
    Ok(())
}

/// Forward pass for one sample. Fills `hidden` (tanh activations, MLP only)
/// and `logits`.
fn forward(arch: &ModelArch, w: &[f64], x: &[f64], hidden: &mut [f64], logits: &mut [f64]) {
    let f = arch.n_features;
    let c = arch.n_classes;
    let affine = |weights: &[f64], biases: &[f64], input: &[f64], out: &mut [f64]| {
        let width = input.len();
        for (k, o) in out.iter_mut().enumerate() {
            let row = &weights[k * width..(k + 1) * width];
            let mut acc = biases[k];
            for (wi, xi) in row.iter().zip(input) {
                acc += wi * xi;
            }
            *o = acc;
        }
    };
    if arch.hidden_units == 0 {
        affine(&w[..c * f], &w[c * f..c * f + c], x, logits);
    } else {
        let h = arch.hidden_units;
        let (w1, rest) = w.split_at(h * f);
        let (b1, rest) = rest.split_at(h);
        let (w2, b2) = rest.split_at(c * h);
        affine(w1, b1, x, hidden);
        for a in hidden.iter_mut() {
            *a = a.tanh();
        }
        affine(w2, b2, hidden, logits);
    }
}

/// Cross-entropy of `logits` against `label`; turns `logits` into softmax
/// probabilities in place.
fn softmax_xent(logits: &mut [f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted_label = logits[label] - max;
    let mut sum = 0.0;
    for z in logits.iter_mut() {
        *z = (*z - max).exp();
        sum += *z;
    }
    for p in logits.iter_mut() {
        *p /= sum;
    }
    sum.ln() - shifted_label
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Mean loss and gradient over the rows at `rows`.
fn batch_gradient(arch: &ModelArch, w: &[f64], data: &Dataset, rows: &[usize], grad: &mut [f64]) -> f64 {
    let f = arch.n_features;
    let c = arch.n_classes;
    let h = arch.hidden_units;
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut hidden = vec![0.0; h];
    let mut probs = vec![0.0; c];
    let mut delta_hidden = vec![0.0; h];
    let mut total = 0.0;
    for &r in rows {
        let x = &data.features[r];
        let y = data.labels[r];
        forward(arch, w, x, &mut hidden, &mut probs);
        total += softmax_xent(&mut probs, y);
        probs[y] -= 1.0;
        let dz = &probs;
        if h == 0 {
            let (gw, gb) = grad.split_at_mut(c * f);
            for k in 0..c {
                for j in 0..f {
                    gw[k * f + j] += dz[k] * x[j];
                }
                gb[k] += dz[k];
            }
        } else {
            let w2 = &w[h * f + h..h * f + h + c * h];
            let (gw1, rest) = grad.split_at_mut(h * f);
            let (gb1, rest) = rest.split_at_mut(h);
            let (gw2, gb2) = rest.split_at_mut(c * h);
            for k in 0..c {
                for i in 0..h {
                    gw2[k * h + i] += dz[k] * hidden[i];
                }
                gb2[k] += dz[k];
            }
            for i in 0..h {
                let mut back = 0.0;
                for k in 0..c {
                    back += w2[k * h + i] * dz[k];
                }
                delta_hidden[i] = back * (1.0 - hidden[i] * hidden[i]);
            }
            for i in 0..h {
                for j in 0..f {
                    gw1[i * f + j] += delta_hidden[i] * x[j];
                }
                gb1[i] += delta_hidden[i];
            }
        }
    }
    let n = rows.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    total / n
}

/// Mean cross-entropy over `data` and its analytic gradient.
pub fn loss_and_gradient(w: &WeightVector, data: &Dataset) -> Result<(f64, Vec<f64>)> {
    let arch = w.arch();
    check_shapes(&arch, data)?;
    let rows: Vec<usize> = (0..data.len()).collect();
    let mut grad = vec![0.0; w.len()];
    let loss = batch_gradient(&arch, &w.values, data, &rows, &mut grad);
    Ok((loss, grad))
}

/// Mini-batch SGD on cross-entropy. Sample order is reshuffled every epoch
/// from a generator seeded with `hp.shuffle_seed`.
pub fn train_local(w: &WeightVector, data: &Dataset, hp: &HyperParams) -> Result<(WeightVector, TrainStats)> {
    hp.validate()?;
    let arch = w.arch();
    check_shapes(&arch, data)?;
    let mut params = w.values.clone();
    let mut grad = vec![0.0; params.len()];
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(hp.shuffle_seed);
    for _ in 0..hp.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(hp.batch_size) {
            batch_gradient(&arch, &params, data, batch, &mut grad);
            for (p, g) in params.iter_mut().zip(&grad) {
                *p -= hp.learning_rate * g;
            }
        }
    }
    let trained = WeightVector { arch_id: w.arch_id.clone(), values: params };
    let final_loss = evaluate(&trained, data)?.loss;
    Ok((trained, TrainStats { final_loss, n_samples: data.len() }))
}

/// Mean cross-entropy and top-1 accuracy. Ties in the argmax go to the
/// lowest class index.
pub fn evaluate(w: &WeightVector, data: &Dataset) -> Result<EvalMetrics> {
    let arch = w.arch();
    check_shapes(&arch, data)?;
    let mut hidden = vec![0.0; arch.hidden_units];
    let mut logits = vec![0.0; arch.n_classes];
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (x, &y) in data.features.iter().zip(&data.labels) {
        forward(&arch, &w.values, x, &mut hidden, &mut logits);
        if argmax(&logits) == y {
            correct += 1;
        }
        loss += softmax_xent(&mut logits, y);
    }
    let n = data.len();
    Ok(EvalMetrics { loss: loss / n as f64, accuracy: correct as f64 / n as f64, n_samples: n })
}

/// Predicted class per row.
pub fn predict(w: &WeightVector, data: &Dataset) -> Result<Vec<usize>> {
    let arch = w.arch();
    check_shapes(&arch, data)?;
    let mut hidden = vec![0.0; arch.hidden_units];
    let mut logits = vec![0.0; arch.n_classes];
    Ok(data
        .features
        .iter()
        .map(|x| {
            forward(&arch, &w.values, x, &mut hidden, &mut logits);
            argmax(&logits)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn separable_toy() -> Dataset {
        // Two clusters on either side of x0 + x1 = 0, 10 points each.
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..10 {
            let t = i as f64 * 0.1;
            features.push(vec![1.0 + t, 0.5 - t * 0.3]);
            labels.push(1);
            features.push(vec![-1.0 - t, -0.5 + t * 0.2]);
            labels.push(0);
        }
        Dataset::new(features, labels, 2).unwrap()
    }

    fn random_dataset(rng: &mut ChaCha8Rng, n: usize, f: usize, c: usize) -> Dataset {
        let features = (0..n).map(|_| (0..f).map(|_| StandardNormal.sample(rng)).collect()).collect();
        let labels = (0..n).map(|_| rng.random_range(0..c)).collect();
        Dataset::new(features, labels, c).unwrap()
    }

    fn random_weights(rng: &mut ChaCha8Rng, arch: &ModelArch) -> WeightVector {
        let values = (0..arch.parameter_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
        WeightVector::new(arch.arch_id.clone(), values).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let arch = ModelArch::logistic(2, 2);
        assert_eq!(init_weights(&arch, 7).unwrap(), init_weights(&arch, 7).unwrap());
    }

    #[test]
    fn logistic_parameter_count() {
        let arch = ModelArch::logistic(3, 2);
        assert_eq!(arch.parameter_count(), 8);
        assert_eq!(init_weights(&arch, 0).unwrap().len(), 8);
    }

    #[test]
    fn seeds_give_different_weights_and_zero_biases() {
        let arch = ModelArch::logistic(3, 2);
        let a = init_weights(&arch, 1).unwrap();
        let b = init_weights(&arch, 2).unwrap();
        assert!(a.values().iter().zip(b.values()).any(|(x, y)| x != y));
        assert_eq!(&a.values()[6..], &[0.0, 0.0]);
        assert!(a.values()[..6].iter().all(|v| v.abs() < 0.05));
    }

    #[test]
    fn mlp_layout() {
        let arch = ModelArch::mlp(3, 4, 2);
        assert_eq!(arch.parameter_count(), 3 * 4 + 4 + 4 * 2 + 2);
        let w = init_weights(&arch, 3).unwrap();
        assert!(w.values()[12..16].iter().all(|&b| b == 0.0));
        assert!(w.values()[24..].iter().all(|&b| b == 0.0));
    }

    #[test]
    fn arch_id_round_trips() {
        for arch in [ModelArch::logistic(5, 3), ModelArch::mlp(2, 8, 4)] {
            assert_eq!(ModelArch::from_id(&arch.arch_id).unwrap(), arch);
        }
        assert!(ModelArch::from_id("logreg-02x2").is_err());
        assert!(ModelArch::from_id("mlp-2x0x2").is_err());
        assert!(ModelArch::from_id("cnn-2x2").is_err());
        let mut arch = ModelArch::logistic(2, 2);
        arch.n_classes = 3;
        assert!(arch.validate().is_err());
    }

    #[test]
    fn weight_vector_length_is_checked() {
        assert!(WeightVector::new("logreg-2x2", vec![0.0; 5]).is_err());
        assert!(WeightVector::new("logreg-2x2", vec![0.0; 6]).is_ok());
    }

    #[test]
    fn separable_toy_reaches_full_accuracy() {
        let data = separable_toy();
        let w0 = init_weights(&ModelArch::logistic(2, 2), 11).unwrap();
        let hp = HyperParams { epochs: 50, learning_rate: 0.5, batch_size: 4, shuffle_seed: 5 };
        let (w, stats) = train_local(&w0, &data, &hp).unwrap();
        let eval = evaluate(&w, &data).unwrap();
        assert_eq!(eval.accuracy, 1.0);
        assert!(eval.loss < 0.1, "loss {}", eval.loss);
        assert_eq!(stats.n_samples, 20);
        assert_eq!(stats.final_loss, eval.loss);
    }

    #[test]
    fn training_is_deterministic() {
        let data = separable_toy();
        let w0 = init_weights(&ModelArch::mlp(2, 3, 2), 4).unwrap();
        let hp = HyperParams { epochs: 5, learning_rate: 0.1, batch_size: 3, shuffle_seed: 9 };
        let a = train_local(&w0, &data, &hp).unwrap();
        let b = train_local(&w0, &data, &hp).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_epochs_rejected() {
        let data = separable_toy();
        let w0 = init_weights(&ModelArch::logistic(2, 2), 0).unwrap();
        let hp = HyperParams { epochs: 0, learning_rate: 0.1, batch_size: 1, shuffle_seed: 0 };
        assert!(matches!(train_local(&w0, &data, &hp), Err(LearnError::HyperParams(_))));
    }

    #[test]
    fn dimension_mismatch_is_a_shape_error() {
        let data = separable_toy();
        let w = init_weights(&ModelArch::logistic(3, 2), 0).unwrap();
        assert!(matches!(evaluate(&w, &data), Err(LearnError::Shape(_))));
        let hp = HyperParams { epochs: 1, learning_rate: 0.1, batch_size: 1, shuffle_seed: 0 };
        assert!(matches!(train_local(&w, &data, &hp), Err(LearnError::Shape(_))));
    }

    #[test]
    fn empty_dataset_rejected() {
        assert_eq!(Dataset::new(vec![], vec![], 2), Err(LearnError::EmptyDataset));
        let data = separable_toy();
        assert_eq!(data.subset(&[]), Err(LearnError::EmptyDataset));
    }

    #[test]
    fn dataset_validation() {
        assert!(Dataset::new(vec![vec![0.0]], vec![2], 2).is_err());
        assert!(Dataset::new(vec![vec![f64::NAN]], vec![0], 2).is_err());
        assert!(Dataset::new(vec![vec![0.0], vec![0.0, 1.0]], vec![0, 1], 2).is_err());
        let json = r#"{"features":[[1.0,2.0]],"labels":[5],"n_classes":2}"#;
        assert!(serde_json::from_str::<Dataset>(json).is_err());
    }

    #[test]
    fn random_weights_score_near_chance_on_uninformative_data() {
        // Labels independent of features: accuracy should sit at 0.5.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let features: Vec<Vec<f64>> =
            (0..200).map(|_| (0..2).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
        let labels: Vec<usize> = (0..200).map(|i| i % 2).collect();
        let data = Dataset::new(features, labels, 2).unwrap();
        for seed in 0..5 {
            let w = init_weights(&ModelArch::logistic(2, 2), seed).unwrap();
            let acc = evaluate(&w, &data).unwrap().accuracy;
            assert!((acc - 0.5).abs() <= 0.15, "seed {seed}: accuracy {acc}");
        }
    }

    #[test]
    fn evaluate_is_pure() {
        let data = separable_toy();
        let w = init_weights(&ModelArch::mlp(2, 5, 2), 2).unwrap();
        let a = evaluate(&w, &data).unwrap();
        let b = evaluate(&w, &data).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a, b);
    }

    /// Central differences on the loss, independent of the backward pass.
    fn finite_difference(w: &WeightVector, data: &Dataset, step: f64) -> Vec<f64> {
        (0..w.len())
            .map(|i| {
                let mut plus = w.values().to_vec();
                let mut minus = w.values().to_vec();
                plus[i] += step;
                minus[i] -= step;
                let lp = evaluate(&WeightVector::new(w.arch_id(), plus).unwrap(), data).unwrap().loss;
                let lm = evaluate(&WeightVector::new(w.arch_id(), minus).unwrap(), data).unwrap().loss;
                (lp - lm) / (2.0 * step)
            })
            .collect()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let archs = [ModelArch::logistic(3, 2), ModelArch::logistic(4, 3), ModelArch::mlp(3, 4, 3)];
        for case in 0..9 {
            let arch = &archs[case % archs.len()];
            let data = random_dataset(&mut rng, 12, arch.n_features, arch.n_classes);
            let w = random_weights(&mut rng, arch);
            let (_, analytic) = loss_and_gradient(&w, &data).unwrap();
            let numeric = finite_difference(&w, &data, 1e-5);
            let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
            let scale: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt().max(1e-12);
            assert!(diff / scale < 1e-5, "case {case} ({}): relative error {}", arch.arch_id, diff / scale);
        }
    }

    #[test]
    fn predict_agrees_with_evaluate() {
        let data = separable_toy();
        let w = init_weights(&ModelArch::logistic(2, 2), 8).unwrap();
        let preds = predict(&w, &data).unwrap();
        let correct = preds.iter().zip(data.labels()).filter(|(p, y)| p == y).count();
        assert_eq!(correct as f64 / data.len() as f64, evaluate(&w, &data).unwrap().accuracy);
    }
}
