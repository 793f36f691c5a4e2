//! Adversarial training against freshly generated inner attacks, and the
//! normalized recovered-accuracy measure.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SplitAssignment};
use crate::embed::{
    finish_epoch, general_start, general_step, hinge, log_sum_exp, mapped_features, sje_start, sje_step,
    AttributeClassifier, DifferentiableMap, EmbeddingModel, GeneralClassifier, LossKind, TrainConfig, Trained,
};
use crate::error::{Error, Result};
use crate::linalg::sub;
use crate::perturb::{ifgsm, AttackConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustTrainConfig {
    pub base: TrainConfig,
    /// Inner attack, regenerated every SGD step against the current weights.
    pub attack: AttackConfig,
    /// Weight of the clean loss; `1 − mix_alpha` weights the adversarial loss.
    pub mix_alpha: f64,
    /// Ranking margin of the inner attack objective (attribute model only).
    pub attack_margin: f64,
}

impl RobustTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        self.attack.validate()?;
        if !(0.0..=1.0).contains(&self.mix_alpha) {
            return Err(Error::InvalidConfig(format!(
                "mix_alpha must lie in [0, 1], got {}",
                self.mix_alpha
            )));
        }
        if !(self.attack_margin.is_finite() && self.attack_margin >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "attack_margin must be >= 0, got {}",
                self.attack_margin
            )));
        }
        Ok(())
    }
}

/// Returns the adversarial input unless it cannot change the update: a
/// clean-only mix, or an attack that left the input exactly where it was.
/// In both cases the mixed objective equals the clean one, so the step falls
/// back to the standard trainer's arithmetic.
fn adversarial_input(mix_alpha: f64, x: &[f64], attack: impl FnOnce() -> Result<Vec<f64>>) -> Result<Option<Vec<f64>>> {
    if mix_alpha == 1.0 {
        return Ok(None);
    }
    let adv = attack()?;
    Ok(if adv == x { None } else { Some(adv) })
}

/// SJE training on `mix_alpha · L(x, y) + (1 − mix_alpha) · L(x̂, y)`.
pub fn adv_train_sje(
    dataset: &Dataset,
    split: &SplitAssignment,
    map: &DifferentiableMap,
    config: &RobustTrainConfig,
) -> Result<Trained<EmbeddingModel>> {
    config.validate()?;
    if config.attack.loss != LossKind::Ranking {
        return Err(Error::InvalidConfig("attribute model needs a ranking-loss inner attack".into()));
    }
    let base = &config.base;
    let mut order = split.train.clone();
    let (mut model, mut rng) = sje_start(map, dataset, &order, base)?;
    let table = model.class_table(dataset.class_attributes())?.into_owned();
    let features = mapped_features(map, dataset)?;
    let mix = config.mix_alpha;
    let mut history = Vec::with_capacity(base.epochs);
    for epoch in 0..base.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let s = dataset.sample(i);
            let adv = adversarial_input(mix, &s.features, || {
                let clf = AttributeClassifier::bind(&model, &table, config.attack_margin);
                Ok(ifgsm(map, &clf, &s.features, s.label, &config.attack, dataset.feature_bounds())?.perturbed)
            })?;
            match adv {
                None => {
                    total += sje_step(&mut model.w, &features[i], s.label, &table, base.margin, base.learning_rate)?;
                }
                Some(adv) => {
                    let adv_features = map.forward(&adv)?;
                    let clean_attrs = model.w.left_mul(&features[i])?;
                    let adv_attrs = model.w.left_mul(&adv_features)?;
                    let (clean_loss, clean_worst) = hinge(&clean_attrs, &table, s.label, base.margin);
                    let (adv_loss, adv_worst) = hinge(&adv_attrs, &table, s.label, base.margin);
                    let lr = base.learning_rate;
                    if let Some(c) = clean_worst {
                        model.w.add_outer(-lr * mix, &features[i], &sub(table.row(c), table.row(s.label)));
                    }
                    if let Some(c) = adv_worst {
                        model.w.add_outer(-lr * (1.0 - mix), &adv_features, &sub(table.row(c), table.row(s.label)));
                    }
                    total += mix * clean_loss + (1.0 - mix) * adv_loss;
                }
            }
        }
        history.push(finish_epoch(epoch, total, order.len(), model.w.is_finite())?);
    }
    Ok(Trained {
        model,
        loss_history: history,
    })
}

/// Adversarial training of the direct classifier on the same mixed objective.
pub fn adv_train_general(
    dataset: &Dataset,
    split: &SplitAssignment,
    map: &DifferentiableMap,
    config: &RobustTrainConfig,
) -> Result<Trained<GeneralClassifier>> {
    config.validate()?;
    if config.attack.loss != LossKind::CrossEntropy {
        return Err(Error::InvalidConfig("general classifier needs a cross-entropy inner attack".into()));
    }
    let base = &config.base;
    let mut order = split.train.clone();
    let (mut model, mut rng) = general_start(map, dataset, &order, base)?;
    let features = mapped_features(map, dataset)?;
    let mix = config.mix_alpha;
    let mut history = Vec::with_capacity(base.epochs);
    for epoch in 0..base.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let s = dataset.sample(i);
            let adv = adversarial_input(mix, &s.features, || {
                Ok(ifgsm(map, &model, &s.features, s.label, &config.attack, dataset.feature_bounds())?.perturbed)
            })?;
            match adv {
                None => {
                    total += general_step(&mut model, &features[i], s.label, base.learning_rate)?;
                }
                Some(adv) => {
                    let adv_features = map.forward(&adv)?;
                    let zc = model.logits(&features[i])?;
                    let za = model.logits(&adv_features)?;
                    let rc = model.residual(&features[i], s.label)?;
                    let ra = model.residual(&adv_features, s.label)?;
                    let lr = base.learning_rate;
                    model.v.add_outer(-lr * mix, &features[i], &rc);
                    model.v.add_outer(-lr * (1.0 - mix), &adv_features, &ra);
                    for ((b, gc), ga) in model.bias.iter_mut().zip(&rc).zip(&ra) {
                        *b -= lr * (mix * gc + (1.0 - mix) * ga);
                    }
                    let clean_loss = log_sum_exp(&zc) - zc[s.label];
                    let adv_loss = log_sum_exp(&za) - za[s.label];
                    total += mix * clean_loss + (1.0 - mix) * adv_loss;
                }
            }
        }
        let finite = model.v.is_finite() && model.bias.iter().all(|b| b.is_finite());
        history.push(finish_epoch(epoch, total, order.len(), finite)?);
    }
    Ok(Trained {
        model,
        loss_history: history,
    })
}

/// Share of the accuracy lost to the attack that the robust model wins back:
/// `(adv_robust − adv_standard) / (clean_standard − adv_standard)`, clamped
/// to `[0, 1]`. `None` when the attack cost the standard model nothing.
pub fn robustification_measure(clean_acc_standard: f64, adv_acc_standard: f64, adv_acc_robust: f64) -> Option<f64> {
    let lost = clean_acc_standard - adv_acc_standard;
    if lost <= 0.0 || !lost.is_finite() {
        return None;
    }
    Some(((adv_acc_robust - adv_acc_standard) / lost).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustificationReport {
    pub clean_acc_standard: f64,
    pub adv_acc_standard: f64,
    pub clean_acc_robust: f64,
    pub adv_acc_robust: f64,
    /// `null` when not applicable.
    pub measure: Option<f64>,
}

impl RobustificationReport {
    pub fn new(clean_acc_standard: f64, adv_acc_standard: f64, clean_acc_robust: f64, adv_acc_robust: f64) -> Result<Self> {
        for (name, v) in [
            ("clean_acc_standard", clean_acc_standard),
            ("adv_acc_standard", adv_acc_standard),
            ("clean_acc_robust", clean_acc_robust),
            ("adv_acc_robust", adv_acc_robust),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(RobustificationReport {
            clean_acc_standard,
            adv_acc_standard,
            clean_acc_robust,
            adv_acc_robust,
            measure: robustification_measure(clean_acc_standard, adv_acc_standard, adv_acc_robust),
        })
    }

    pub fn is_applicable(&self) -> bool {
        self.measure.is_some()
    }
}
