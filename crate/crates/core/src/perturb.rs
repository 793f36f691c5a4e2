//! Untargeted iterative fast gradient sign perturbations, projected onto an
//! l∞ ball around the original input.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FeatureBounds};
use crate::embed::{Classifier, DifferentiableMap, LossKind};
use crate::error::{Error, Result};
use crate::linalg::sign;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// Radius of the l∞ ball around the clean input.
    pub epsilon: f64,
    /// Step size of each signed-gradient step.
    pub alpha: f64,
    pub steps: usize,
    pub loss: LossKind,
}

impl AttackConfig {
    /// Uses `alpha = epsilon / steps`, which reaches the ball boundary on the
    /// last step without overshooting. A zero radius gets `alpha = 1`, the
    /// step being clipped away anyway.
    pub fn with_default_alpha(epsilon: f64, steps: usize, loss: LossKind) -> Self {
        let alpha = if epsilon > 0.0 && steps > 0 {
            epsilon / steps as f64
        } else {
            1.0
        };
        AttackConfig {
            epsilon,
            alpha,
            steps,
            loss,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::InvalidConfig(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::InvalidConfig(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbedSample {
    pub sample_id: usize,
    pub original: Vec<f64>,
    pub perturbed: Vec<f64>,
    pub true_label: usize,
    pub predicted_label_clean: usize,
    pub predicted_label_perturbed: usize,
    pub loss_before: f64,
    pub loss_after: f64,
}

impl PerturbedSample {
    pub fn flipped(&self) -> bool {
        self.predicted_label_perturbed != self.predicted_label_clean
    }

    /// Clean-correct and misclassified after the perturbation.
    pub fn is_eligible(&self) -> bool {
        self.predicted_label_clean == self.true_label && self.predicted_label_perturbed != self.true_label
    }
}

/// Gradient of the classifier loss w.r.t. the raw input, chained through `map`.
pub fn loss_grad_wrt_input<C: Classifier + ?Sized>(
    map: &DifferentiableMap,
    classifier: &C,
    x: &[f64],
    y_true: usize,
) -> Result<Vec<f64>> {
    let features = map.forward(x)?;
    let grad = classifier.loss_grad_features(&features, y_true)?;
    map.pullback(x, &grad)
}

fn check_loss_kind<C: Classifier + ?Sized>(classifier: &C, config: &AttackConfig) -> Result<()> {
    if classifier.loss_kind() != config.loss {
        return Err(Error::InvalidConfig(format!(
            "attack configured for {:?} loss but the classifier provides {:?}",
            config.loss,
            classifier.loss_kind()
        )));
    }
    Ok(())
}

/// Runs exactly `config.steps` signed-gradient steps from `x`, maximizing
/// the loss of `y_true`. Each iterate is clipped to `[x − ε, x + ε]` and then
/// to `bounds` when given.
pub fn ifgsm<C: Classifier + ?Sized>(
    map: &DifferentiableMap,
    classifier: &C,
    x: &[f64],
    y_true: usize,
    config: &AttackConfig,
    bounds: Option<&FeatureBounds>,
) -> Result<PerturbedSample> {
    config.validate()?;
    check_loss_kind(classifier, config)?;
    let eps = config.epsilon;
    let (low, high): (Vec<f64>, Vec<f64>) = x
        .iter()
        .enumerate()
        .map(|(dim, &v)| {
            let (mut lo, mut hi) = (v - eps, v + eps);
            if let Some(b) = bounds {
                let (bl, bh) = b.range(dim);
                lo = lo.max(bl);
                hi = hi.min(bh);
            }
            (lo, hi)
        })
        .unzip();

    let loss_before = classifier.loss(map, x, y_true)?;
    if !loss_before.is_finite() {
        return Err(Error::NonFiniteLoss { step: 0 });
    }
    let mut current = x.to_vec();
    for step in 0..config.steps {
        let grad = loss_grad_wrt_input(map, classifier, &current, y_true)?;
        for (i, (c, g)) in current.iter_mut().zip(&grad).enumerate() {
            *c = (*c + config.alpha * sign(*g)).clamp(low[i], high[i]);
        }
        if step + 1 < config.steps {
            let loss = classifier.loss(map, &current, y_true)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step: step + 1 });
            }
        }
    }
    let loss_after = classifier.loss(map, &current, y_true)?;
    if !loss_after.is_finite() || current.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLoss { step: config.steps });
    }
    Ok(PerturbedSample {
        sample_id: usize::MAX,
        predicted_label_clean: classifier.predict(map, x)?,
        predicted_label_perturbed: classifier.predict(map, &current)?,
        original: x.to_vec(),
        perturbed: current,
        true_label: y_true,
        loss_before,
        loss_after,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    pub n: usize,
    pub clean_acc: f64,
    pub adv_acc: f64,
    /// Fraction of samples whose predicted class changed.
    pub flip_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub samples: Vec<PerturbedSample>,
    pub summary: AttackSummary,
}

impl AttackOutcome {
    pub fn eligible(&self) -> impl Iterator<Item = &PerturbedSample> {
        self.samples.iter().filter(|s| s.is_eligible())
    }
}

/// Attacks every sample in `indices` independently. Output order follows
/// `indices` regardless of scheduling.
pub fn attack_dataset<C: Classifier + ?Sized>(
    map: &DifferentiableMap,
    classifier: &C,
    dataset: &Dataset,
    indices: &[usize],
    config: &AttackConfig,
) -> Result<AttackOutcome> {
    if indices.is_empty() {
        return Err(Error::InvalidConfig("attack over an empty sample set".into()));
    }
    config.validate()?;
    check_loss_kind(classifier, config)?;
    let samples = indices
        .par_iter()
        .map(|&id| {
            let s = dataset.sample(id);
            let mut out = ifgsm(map, classifier, &s.features, s.label, config, dataset.feature_bounds())?;
            out.sample_id = id;
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = samples.len();
    let count = |f: &dyn Fn(&PerturbedSample) -> bool| samples.iter().filter(|s| f(s)).count();
    let clean = count(&|s| s.predicted_label_clean == s.true_label);
    let adv = count(&|s| s.predicted_label_perturbed == s.true_label);
    let flips = count(&|s| s.flipped());
    let summary = AttackSummary {
        epsilon: config.epsilon,
        alpha: config.alpha,
        steps: config.steps,
        n,
        clean_acc: clean as f64 / n as f64,
        adv_acc: adv as f64 / n as f64,
        flip_rate: flips as f64 / n as f64,
    };
    Ok(AttackOutcome { samples, summary })
}

/// Per-sample attack records as CSV.
pub fn write_samples_csv(path: &Path, samples: &[PerturbedSample]) -> Result<()> {
    let to_err = |e: csv::Error| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    w.write_record([
        "sample_id",
        "true_label",
        "pred_clean",
        "pred_perturbed",
        "loss_before",
        "loss_after",
        "linf",
    ])
    .map_err(to_err)?;
    for s in samples {
        w.write_record([
            s.sample_id.to_string(),
            s.true_label.to_string(),
            s.predicted_label_clean.to_string(),
            s.predicted_label_perturbed.to_string(),
            format!("{}", s.loss_before),
            format!("{}", s.loss_after),
            format!("{}", crate::linalg::linf_distance(&s.original, &s.perturbed)),
        ])
        .map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::{EmbeddingModel, GeneralClassifier, PredictionRule};
    use crate::linalg::Matrix;

    fn linear() -> GeneralClassifier {
        GeneralClassifier::new(
            Matrix::from_rows(&[vec![1.0, -1.0], vec![0.5, 2.0]]).unwrap(),
            vec![0.1, -0.2],
        )
        .unwrap()
    }

    #[test]
    fn zero_radius_leaves_input_untouched() {
        let clf = linear();
        let cfg = AttackConfig::with_default_alpha(0.0, 5, LossKind::CrossEntropy);
        let out = ifgsm(&DifferentiableMap::Identity, &clf, &[0.3, -0.7], 0, &cfg, None).unwrap();
        assert_eq!(out.perturbed, out.original);
    }

    #[test]
    fn one_step_moves_along_gradient_sign_and_raises_loss() {
        let clf = linear();
        let id = DifferentiableMap::Identity;
        let x = [0.3, -0.7];
        let g = loss_grad_wrt_input(&id, &clf, &x, 0).unwrap();
        let cfg = AttackConfig {
            epsilon: 0.1,
            alpha: 0.05,
            steps: 1,
            loss: LossKind::CrossEntropy,
        };
        let out = ifgsm(&id, &clf, &x, 0, &cfg, None).unwrap();
        for i in 0..2 {
            assert_eq!(out.perturbed[i], x[i] + 0.05 * sign(g[i]));
        }
        // brute-force loss evaluation
        let before = clf.loss(&id, &x, 0).unwrap();
        let after = clf.loss(&id, &out.perturbed, 0).unwrap();
        assert_eq!(out.loss_before, before);
        assert_eq!(out.loss_after, after);
        assert!(after >= before);
    }

    #[test]
    fn zero_gradient_coordinate_is_not_moved() {
        // Column 1 of V is all zero in the direction of the second input.
        let clf = GeneralClassifier::new(Matrix::from_rows(&[vec![1.0, -1.0], vec![0.0, 0.0]]).unwrap(), vec![0.0, 0.0]).unwrap();
        let cfg = AttackConfig::with_default_alpha(0.2, 4, LossKind::CrossEntropy);
        let out = ifgsm(&DifferentiableMap::Identity, &clf, &[0.1, 0.9], 1, &cfg, None).unwrap();
        assert_eq!(out.perturbed[1], 0.9);
        assert_ne!(out.perturbed[0], 0.1);
    }

    #[test]
    fn satisfied_margin_gives_zero_gradient() {
        let model = EmbeddingModel::new(Matrix::identity(2), false, PredictionRule::CompatibilityArgmax).unwrap();
        let table = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let clf = model.classifier(&table, 1.0).unwrap();
        let g = loss_grad_wrt_input(&DifferentiableMap::Identity, &clf, &[3.0, 0.0], 0).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn bounds_are_respected() {
        let clf = linear();
        let cfg = AttackConfig::with_default_alpha(0.5, 3, LossKind::CrossEntropy);
        let bounds = FeatureBounds::Global { low: 0.0, high: 1.0 };
        let out = ifgsm(&DifferentiableMap::Identity, &clf, &[0.1, 0.95], 0, &cfg, Some(&bounds)).unwrap();
        assert!(out.perturbed.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn mismatched_loss_kind_rejected() {
        let clf = linear();
        let cfg = AttackConfig::with_default_alpha(0.1, 3, LossKind::Ranking);
        assert!(ifgsm(&DifferentiableMap::Identity, &clf, &[0.1, 0.2], 0, &cfg, None).is_err());
        let bad = AttackConfig { alpha: 0.0, ..AttackConfig::with_default_alpha(0.1, 3, LossKind::CrossEntropy) };
        assert!(bad.validate().is_err());
    }
}
