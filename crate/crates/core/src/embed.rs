//! The attribute-embedding (SJE) classifier, a direct multinomial logistic
//! baseline, the fixed differentiable feature map both sit on, and their
//! SGD trainers.

use std::borrow::Cow;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SplitAssignment};
use crate::error::{Error, Result};
use crate::linalg::{dot, euclidean, sub, Matrix};
use crate::rng;

/// One tanh hidden layer: `θ(x) = tanh(xᵀW1 + b1)ᵀ W2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenLayer {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
}

impl HiddenLayer {
    pub fn new(w1: Matrix, b1: Vec<f64>, w2: Matrix) -> Result<Self> {
        if b1.len() != w1.cols() || w2.rows() != w1.cols() {
            return Err(Error::ShapeMismatch(format!(
                "hidden layer W1 {}x{}, b1 {}, W2 {}x{}",
                w1.rows(),
                w1.cols(),
                b1.len(),
                w2.rows(),
                w2.cols()
            )));
        }
        if !(w1.is_finite() && w2.is_finite() && b1.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidConfig("hidden layer has non-finite parameters".into()));
        }
        Ok(HiddenLayer { w1, b1, w2 })
    }

    /// Gaussian init scaled by fan-in, drawn from the `map` substream of `seed`.
    pub fn random(input_dim: usize, hidden_dim: usize, output_dim: usize, seed: u64) -> Self {
        let mut rng = rng::substream(seed, "map");
        let mut w1 = Matrix::zeros(input_dim, hidden_dim);
        let s1 = 1.0 / (input_dim as f64).sqrt();
        for v in w1.as_mut_slice() {
            *v = s1 * rng.sample::<f64, _>(StandardNormal);
        }
        let b1 = (0..hidden_dim)
            .map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut w2 = Matrix::zeros(hidden_dim, output_dim);
        let s2 = 1.0 / (hidden_dim as f64).sqrt();
        for v in w2.as_mut_slice() {
            *v = s2 * rng.sample::<f64, _>(StandardNormal);
        }
        HiddenLayer { w1, b1, w2 }
    }

    fn hidden(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut h = self.w1.left_mul(x)?;
        for (v, b) in h.iter_mut().zip(&self.b1) {
            *v = (*v + b).tanh();
        }
        Ok(h)
    }
}

/// The fixed feature extractor in front of every classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DifferentiableMap {
    Identity,
    Hidden(HiddenLayer),
}

impl DifferentiableMap {
    /// Output dimension for an input of dimension `input_dim`.
    pub fn output_dim(&self, input_dim: usize) -> Result<usize> {
        match self {
            DifferentiableMap::Identity => Ok(input_dim),
            DifferentiableMap::Hidden(layer) => {
                if layer.w1.rows() != input_dim {
                    return Err(Error::ShapeMismatch(format!(
                        "map expects input of dimension {}, got {input_dim}",
                        layer.w1.rows()
                    )));
                }
                Ok(layer.w2.cols())
            }
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            DifferentiableMap::Identity => Ok(x.to_vec()),
            DifferentiableMap::Hidden(layer) => {
                let h = layer.hidden(x)?;
                layer.w2.left_mul(&h)
            }
        }
    }

    /// Vector-Jacobian product: pulls a gradient w.r.t. `θ(x)` back to `x`.
    pub fn pullback(&self, x: &[f64], grad_out: &[f64]) -> Result<Vec<f64>> {
        match self {
            DifferentiableMap::Identity => {
                if grad_out.len() != x.len() {
                    return Err(Error::ShapeMismatch(format!(
                        "gradient of length {} for input of length {}",
                        grad_out.len(),
                        x.len()
                    )));
                }
                Ok(grad_out.to_vec())
            }
            DifferentiableMap::Hidden(layer) => {
                let h = layer.hidden(x)?;
                let mut g = layer.w2.mul_vec(grad_out)?;
                for (gi, hi) in g.iter_mut().zip(&h) {
                    *gi *= 1.0 - hi * hi;
                }
                layer.w1.mul_vec(&g)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictionRule {
    #[default]
    CompatibilityArgmax,
    NearestAttribute,
}

impl PredictionRule {
    pub fn as_str(&self) -> &'static str {
        match self {
            PredictionRule::CompatibilityArgmax => "compatibility-argmax",
            PredictionRule::NearestAttribute => "nearest-attribute",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "compatibility-argmax" => Some(PredictionRule::CompatibilityArgmax),
            "nearest-attribute" => Some(PredictionRule::NearestAttribute),
            _ => None,
        }
    }
}

/// Bilinear compatibility model `F(x, y) = θ(x)ᵀ W φ(y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    pub w: Matrix,
    pub normalize_class_attributes: bool,
    pub prediction_rule: PredictionRule,
}

impl EmbeddingModel {
    pub fn new(w: Matrix, normalize_class_attributes: bool, prediction_rule: PredictionRule) -> Result<Self> {
        if !w.is_finite() {
            return Err(Error::InvalidConfig("embedding weights are not finite".into()));
        }
        Ok(EmbeddingModel {
            w,
            normalize_class_attributes,
            prediction_rule,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn num_attributes(&self) -> usize {
        self.w.cols()
    }

    /// The class attribute table as the model sees it (row-normalized when
    /// the model was trained that way).
    pub fn class_table<'a>(&self, class_attributes: &'a Matrix) -> Result<Cow<'a, Matrix>> {
        if class_attributes.cols() != self.num_attributes() {
            return Err(Error::ShapeMismatch(format!(
                "class attributes have {} columns, model predicts {} attributes",
                class_attributes.cols(),
                self.num_attributes()
            )));
        }
        Ok(if self.normalize_class_attributes {
            Cow::Owned(class_attributes.l2_normalized_rows())
        } else {
            Cow::Borrowed(class_attributes)
        })
    }

    /// Checks `W` against the dimensions of `dataset` seen through `map`.
    pub fn check_against(&self, map: &DifferentiableMap, dataset: &Dataset) -> Result<()> {
        let d = map.output_dim(dataset.feature_dim())?;
        if d != self.feature_dim() || dataset.num_attributes() != self.num_attributes() {
            return Err(Error::ShapeMismatch(format!(
                "model is {}x{}, dataset needs {}x{}",
                self.feature_dim(),
                self.num_attributes(),
                d,
                dataset.num_attributes()
            )));
        }
        Ok(())
    }

    fn attributes_of_features(&self, features: &[f64]) -> Result<Vec<f64>> {
        self.w.left_mul(features)
    }

    /// Binds the model to a class table and a margin, giving a [`Classifier`].
    pub fn classifier<'a>(&'a self, class_attributes: &'a Matrix, margin: f64) -> Result<AttributeClassifier<'a>> {
        Ok(AttributeClassifier {
            model: self,
            table: self.class_table(class_attributes)?,
            margin,
        })
    }
}

/// `θ(x)ᵀ W φ`.
pub fn compatibility(map: &DifferentiableMap, model: &EmbeddingModel, x: &[f64], class_attr: &[f64]) -> Result<f64> {
    let attrs = predict_attributes(map, model, x)?;
    if class_attr.len() != attrs.len() {
        return Err(Error::ShapeMismatch(format!(
            "class attribute vector of length {}, model predicts {}",
            class_attr.len(),
            attrs.len()
        )));
    }
    if model.normalize_class_attributes {
        let n = crate::linalg::norm(class_attr);
        if n > 0.0 {
            return Ok(attrs.iter().zip(class_attr).map(|(a, c)| a * (c / n)).sum());
        }
    }
    Ok(dot(&attrs, class_attr))
}

/// Predicted attribute vector `θ(x) W`.
pub fn predict_attributes(map: &DifferentiableMap, model: &EmbeddingModel, x: &[f64]) -> Result<Vec<f64>> {
    let features = map.forward(x)?;
    model.attributes_of_features(&features)
}

pub fn predict_class(
    map: &DifferentiableMap,
    model: &EmbeddingModel,
    x: &[f64],
    class_attributes: &Matrix,
) -> Result<usize> {
    let table = model.class_table(class_attributes)?;
    let attrs = predict_attributes(map, model, x)?;
    Ok(classify_attributes(&attrs, &table, model.prediction_rule))
}

/// Applies `rule` to an already predicted attribute vector. Ties go to the
/// lowest class index.
pub fn classify_attributes(attrs: &[f64], table: &Matrix, rule: PredictionRule) -> usize {
    let mut best = 0;
    let mut best_value = f64::NAN;
    for c in 0..table.rows() {
        let value = match rule {
            PredictionRule::CompatibilityArgmax => dot(attrs, table.row(c)),
            PredictionRule::NearestAttribute => -euclidean(attrs, table.row(c)),
        };
        if c == 0 || value > best_value {
            best = c;
            best_value = value;
        }
    }
    best
}

/// Structured hinge evaluated on predicted attributes: the largest
/// `Δ + F(y) − F(y_true)` over competing classes, clamped at zero, together
/// with the most violating class when the loss is positive.
pub(crate) fn hinge(attrs: &[f64], table: &Matrix, y_true: usize, margin: f64) -> (f64, Option<usize>) {
    let true_score = dot(attrs, table.row(y_true));
    let mut worst: Option<(usize, f64)> = None;
    for c in (0..table.rows()).filter(|&c| c != y_true) {
        let v = margin + dot(attrs, table.row(c)) - true_score;
        if worst.is_none_or(|(_, w)| v > w) {
            worst = Some((c, v));
        }
    }
    match worst {
        Some((c, v)) if v > 0.0 => (v, Some(c)),
        Some((_, v)) if v.is_nan() => (f64::NAN, None),
        _ => (0.0, None),
    }
}

fn check_ranking_inputs(table: &Matrix, y_true: usize) -> Result<()> {
    if table.rows() < 2 {
        return Err(Error::InvalidConfig("ranking loss needs at least two classes".into()));
    }
    if y_true >= table.rows() {
        return Err(Error::InvalidConfig(format!(
            "label {y_true} out of range for {} classes",
            table.rows()
        )));
    }
    Ok(())
}

pub fn ranking_loss(
    map: &DifferentiableMap,
    model: &EmbeddingModel,
    x: &[f64],
    y_true: usize,
    class_attributes: &Matrix,
    margin: f64,
) -> Result<f64> {
    let table = model.class_table(class_attributes)?;
    check_ranking_inputs(&table, y_true)?;
    let attrs = predict_attributes(map, model, x)?;
    Ok(hinge(&attrs, &table, y_true, margin).0)
}

/// Subgradient of the ranking loss w.r.t. `W` at input `x`.
pub fn ranking_loss_grad_weights(
    map: &DifferentiableMap,
    model: &EmbeddingModel,
    x: &[f64],
    y_true: usize,
    class_attributes: &Matrix,
    margin: f64,
) -> Result<Matrix> {
    let table = model.class_table(class_attributes)?;
    check_ranking_inputs(&table, y_true)?;
    let features = map.forward(x)?;
    let attrs = model.attributes_of_features(&features)?;
    let mut grad = Matrix::zeros(model.feature_dim(), model.num_attributes());
    if let (_, Some(c)) = hinge(&attrs, &table, y_true, margin) {
        grad.add_outer(1.0, &features, &sub(table.row(c), table.row(y_true)));
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Ranking,
    CrossEntropy,
}

/// A classifier acting on mapped features `θ(x)`, exposing what the attack and
/// evaluation code needs: predictions, a loss and its feature gradient.
pub trait Classifier: Sync {
    fn loss_kind(&self) -> LossKind;

    fn num_classes(&self) -> usize;

    fn predict_features(&self, features: &[f64]) -> Result<usize>;

    fn loss_features(&self, features: &[f64], label: usize) -> Result<f64>;

    fn loss_grad_features(&self, features: &[f64], label: usize) -> Result<Vec<f64>>;

    fn predict(&self, map: &DifferentiableMap, x: &[f64]) -> Result<usize> {
        self.predict_features(&map.forward(x)?)
    }

    fn loss(&self, map: &DifferentiableMap, x: &[f64], label: usize) -> Result<f64> {
        self.loss_features(&map.forward(x)?, label)
    }
}

/// An [`EmbeddingModel`] bound to its class table and ranking margin.
#[derive(Debug, Clone)]
pub struct AttributeClassifier<'a> {
    model: &'a EmbeddingModel,
    table: Cow<'a, Matrix>,
    margin: f64,
}

impl<'a> AttributeClassifier<'a> {
    /// Binds to a table that is already in the model's normalization.
    pub(crate) fn bind(model: &'a EmbeddingModel, table: &'a Matrix, margin: f64) -> Self {
        AttributeClassifier {
            model,
            table: Cow::Borrowed(table),
            margin,
        }
    }

    pub fn model(&self) -> &EmbeddingModel {
        self.model
    }

    pub fn table(&self) -> &Matrix {
        &self.table
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }
}

impl Classifier for AttributeClassifier<'_> {
    fn loss_kind(&self) -> LossKind {
        LossKind::Ranking
    }

    fn num_classes(&self) -> usize {
        self.table.rows()
    }

    fn predict_features(&self, features: &[f64]) -> Result<usize> {
        let attrs = self.model.attributes_of_features(features)?;
        Ok(classify_attributes(&attrs, &self.table, self.model.prediction_rule))
    }

    fn loss_features(&self, features: &[f64], label: usize) -> Result<f64> {
        check_ranking_inputs(&self.table, label)?;
        let attrs = self.model.attributes_of_features(features)?;
        Ok(hinge(&attrs, &self.table, label, self.margin).0)
    }

    fn loss_grad_features(&self, features: &[f64], label: usize) -> Result<Vec<f64>> {
        check_ranking_inputs(&self.table, label)?;
        let attrs = self.model.attributes_of_features(features)?;
        match hinge(&attrs, &self.table, label, self.margin) {
            (_, Some(c)) => self.model.w.mul_vec(&sub(self.table.row(c), self.table.row(label))),
            _ => Ok(vec![0.0; features.len()]),
        }
    }
}

/// Multinomial logistic regression on `θ(x)`: logits `θ(x)ᵀV + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneralClassifier {
    pub v: Matrix,
    pub bias: Vec<f64>,
}

impl GeneralClassifier {
    pub fn new(v: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != v.cols() {
            return Err(Error::ShapeMismatch(format!(
                "bias of length {} for {} classes",
                bias.len(),
                v.cols()
            )));
        }
        if !(v.is_finite() && bias.iter().all(|b| b.is_finite())) {
            return Err(Error::InvalidConfig("classifier parameters are not finite".into()));
        }
        Ok(GeneralClassifier { v, bias })
    }

    pub fn feature_dim(&self) -> usize {
        self.v.rows()
    }

    pub fn check_against(&self, map: &DifferentiableMap, dataset: &Dataset) -> Result<()> {
        let d = map.output_dim(dataset.feature_dim())?;
        if d != self.feature_dim() || dataset.num_classes() != self.v.cols() {
            return Err(Error::ShapeMismatch(format!(
                "classifier is {}x{}, dataset needs {}x{}",
                self.feature_dim(),
                self.v.cols(),
                d,
                dataset.num_classes()
            )));
        }
        Ok(())
    }

    pub fn logits(&self, features: &[f64]) -> Result<Vec<f64>> {
        let mut z = self.v.left_mul(features)?;
        z.iter_mut().zip(&self.bias).for_each(|(z, b)| *z += b);
        Ok(z)
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.v.cols() {
            return Err(Error::InvalidConfig(format!(
                "label {label} out of range for {} classes",
                self.v.cols()
            )));
        }
        Ok(())
    }

    /// `softmax(z) − onehot(label)`.
    pub(crate) fn residual(&self, features: &[f64], label: usize) -> Result<Vec<f64>> {
        let mut p = softmax(&self.logits(features)?);
        p[label] -= 1.0;
        Ok(p)
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

pub(crate) fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl Classifier for GeneralClassifier {
    fn loss_kind(&self) -> LossKind {
        LossKind::CrossEntropy
    }

    fn num_classes(&self) -> usize {
        self.v.cols()
    }

    fn predict_features(&self, features: &[f64]) -> Result<usize> {
        let z = self.logits(features)?;
        let mut best = 0;
        for (c, &v) in z.iter().enumerate() {
            if v > z[best] {
                best = c;
            }
        }
        Ok(best)
    }

    fn loss_features(&self, features: &[f64], label: usize) -> Result<f64> {
        self.check_label(label)?;
        let z = self.logits(features)?;
        Ok(log_sum_exp(&z) - z[label])
    }

    fn loss_grad_features(&self, features: &[f64], label: usize) -> Result<Vec<f64>> {
        self.check_label(label)?;
        self.v.mul_vec(&self.residual(features, label)?)
    }
}

/// Cross-entropy gradient w.r.t. `(V, b)` at input `x`.
pub fn cross_entropy_grad_params(
    map: &DifferentiableMap,
    model: &GeneralClassifier,
    x: &[f64],
    label: usize,
) -> Result<(Matrix, Vec<f64>)> {
    model.check_label(label)?;
    let features = map.forward(x)?;
    let r = model.residual(&features, label)?;
    let mut gv = Matrix::zeros(model.v.rows(), model.v.cols());
    gv.add_outer(1.0, &features, &r);
    Ok((gv, r))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Δ(y_true, y) for y ≠ y_true.
    pub margin: f64,
    pub seed: u64,
    pub weight_init_sigma: f64,
    pub normalize_class_attributes: bool,
    pub prediction_rule: PredictionRule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            epochs: 30,
            margin: 1.0,
            seed: 0,
            weight_init_sigma: 0.01,
            normalize_class_attributes: false,
            prediction_rule: PredictionRule::CompatibilityArgmax,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return Err(Error::InvalidConfig(format!("margin must be >= 0, got {}", self.margin)));
        }
        if !(self.weight_init_sigma.is_finite() && self.weight_init_sigma >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "weight_init_sigma must be >= 0, got {}",
                self.weight_init_sigma
            )));
        }
        Ok(())
    }
}

/// A trained model with its mean per-epoch training loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Trained<M> {
    pub model: M,
    pub loss_history: Vec<f64>,
}

fn gaussian_matrix(rows: usize, cols: usize, sigma: f64, rng: &mut rng::StageRng) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for v in m.as_mut_slice() {
        *v = sigma * rng.sample::<f64, _>(StandardNormal);
    }
    m
}

/// Initial weights and the per-epoch sample-order stream shared by the
/// standard and adversarial SJE trainers.
pub(crate) fn sje_start(
    map: &DifferentiableMap,
    dataset: &Dataset,
    train: &[usize],
    config: &TrainConfig,
) -> Result<(EmbeddingModel, rng::StageRng)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidConfig("train split is empty".into()));
    }
    if dataset.num_classes() < 2 {
        return Err(Error::InvalidDataset("need at least two classes".into()));
    }
    let d = map.output_dim(dataset.feature_dim())?;
    let mut init = rng::substream(config.seed, "sje-init");
    let w = gaussian_matrix(d, dataset.num_attributes(), config.weight_init_sigma, &mut init);
    let model = EmbeddingModel {
        w,
        normalize_class_attributes: config.normalize_class_attributes,
        prediction_rule: config.prediction_rule,
    };
    Ok((model, rng::substream(config.seed, "sje-order")))
}

/// Descends `scale · ∂L/∂W` for one sample given its mapped features; returns
/// the loss before the step.
pub(crate) fn sje_step(
    w: &mut Matrix,
    features: &[f64],
    label: usize,
    table: &Matrix,
    margin: f64,
    scale: f64,
) -> Result<f64> {
    let attrs = w.left_mul(features)?;
    let (loss, worst) = hinge(&attrs, table, label, margin);
    if let Some(c) = worst {
        w.add_outer(-scale, features, &sub(table.row(c), table.row(label)));
    }
    Ok(loss)
}

pub(crate) fn finish_epoch(epoch: usize, total_loss: f64, n: usize, params_finite: bool) -> Result<f64> {
    let mean = total_loss / n as f64;
    if !mean.is_finite() || !params_finite {
        return Err(Error::Divergence { epoch });
    }
    Ok(mean)
}

pub(crate) fn mapped_features(map: &DifferentiableMap, dataset: &Dataset) -> Result<Vec<Vec<f64>>> {
    dataset.samples().iter().map(|s| map.forward(&s.features)).collect()
}

/// Plain per-sample SGD on the structured ranking loss.
pub fn train_sje(
    dataset: &Dataset,
    split: &SplitAssignment,
    map: &DifferentiableMap,
    config: &TrainConfig,
) -> Result<Trained<EmbeddingModel>> {
    let mut order = split.train.clone();
    let (mut model, mut rng) = sje_start(map, dataset, &order, config)?;
    let table = model.class_table(dataset.class_attributes())?.into_owned();
    let features = mapped_features(map, dataset)?;
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let label = dataset.sample(i).label;
            total += sje_step(&mut model.w, &features[i], label, &table, config.margin, config.learning_rate)?;
        }
        history.push(finish_epoch(epoch, total, order.len(), model.w.is_finite())?);
    }
    Ok(Trained {
        model,
        loss_history: history,
    })
}

pub(crate) fn general_start(
    map: &DifferentiableMap,
    dataset: &Dataset,
    train: &[usize],
    config: &TrainConfig,
) -> Result<(GeneralClassifier, rng::StageRng)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidConfig("train split is empty".into()));
    }
    let first = dataset.sample(train[0]).label;
    if dataset.num_classes() < 2 || train.iter().all(|&i| dataset.sample(i).label == first) {
        return Err(Error::InvalidDataset(
            "general classifier needs samples from at least two classes".into(),
        ));
    }
    let d = map.output_dim(dataset.feature_dim())?;
    let mut init = rng::substream(config.seed, "general-init");
    let v = gaussian_matrix(d, dataset.num_classes(), config.weight_init_sigma, &mut init);
    let model = GeneralClassifier {
        v,
        bias: vec![0.0; dataset.num_classes()],
    };
    Ok((model, rng::substream(config.seed, "general-order")))
}

/// Cross-entropy SGD step of size `scale`; returns the loss before the step.
pub(crate) fn general_step(model: &mut GeneralClassifier, features: &[f64], label: usize, scale: f64) -> Result<f64> {
    let z = model.logits(features)?;
    let loss = log_sum_exp(&z) - z[label];
    let r = model.residual(features, label)?;
    model.v.add_outer(-scale, features, &r);
    model.bias.iter_mut().zip(&r).for_each(|(b, g)| *b -= scale * g);
    Ok(loss)
}

/// Multinomial logistic regression by per-sample SGD on cross-entropy.
pub fn train_general(
    dataset: &Dataset,
    split: &SplitAssignment,
    map: &DifferentiableMap,
    config: &TrainConfig,
) -> Result<Trained<GeneralClassifier>> {
    let mut order = split.train.clone();
    let (mut model, mut rng) = general_start(map, dataset, &order, config)?;
    let features = mapped_features(map, dataset)?;
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            total += general_step(&mut model, &features[i], dataset.sample(i).label, config.learning_rate)?;
        }
        let finite = model.v.is_finite() && model.bias.iter().all(|b| b.is_finite());
        history.push(finish_epoch(epoch, total, order.len(), finite)?);
    }
    Ok(Trained {
        model,
        loss_history: history,
    })
}

/// Fraction of `indices` whose prediction matches the label.
pub fn accuracy<C: Classifier + ?Sized>(
    map: &DifferentiableMap,
    classifier: &C,
    dataset: &Dataset,
    indices: &[usize],
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::InvalidConfig("accuracy over an empty sample set".into()));
    }
    let mut correct = 0usize;
    for &i in indices {
        let s = dataset.sample(i);
        if classifier.predict(map, &s.features)? == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / indices.len() as f64)
}
