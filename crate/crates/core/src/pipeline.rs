//! End-to-end experiment stages shared by the CLI: configuration, dataset
//! preparation, training, sweeps, explanation runs and the run manifest.
//!
//! Every stage reads its inputs from and writes its outputs under the run's
//! output directory, so stages can be re-run independently. All randomness
//! derives from the global seed through named substreams.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{self, Dataset, DatasetPaths, SplitAssignment, SyntheticSpec};
use crate::embed::{
    accuracy, train_general, train_sje, DifferentiableMap, EmbeddingModel, GeneralClassifier, HiddenLayer, LossKind,
    PredictionRule, TrainConfig,
};
use crate::error::{Error, Result};
use crate::explain::{
    build_explanation, distance_analysis_robust, distance_analysis_standard, AttributeObservation, DistanceSummary,
    ExplainContext, Explanation, Gallery, RobustView,
};
use crate::model_io;
use crate::perturb::{attack_dataset, AttackConfig, AttackOutcome, AttackSummary};
use crate::rng::substream_seed;
use crate::robust::{adv_train_general, adv_train_sje, RobustTrainConfig, RobustificationReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Files,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub features: Option<PathBuf>,
    pub attributes: Option<PathBuf>,
    pub names: Option<PathBuf>,
    pub num_classes: usize,
    pub num_attributes: usize,
    pub feature_dim: usize,
    pub samples_per_class: usize,
    pub noise_sigma: f64,
    pub class_similarity: f64,
    /// (train, val, test) shares.
    pub split: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            features: None,
            attributes: None,
            names: None,
            num_classes: 10,
            num_attributes: 8,
            feature_dim: 16,
            samples_per_class: 50,
            noise_sigma: 0.05,
            class_similarity: 0.7,
            split: [0.6, 0.1, 0.3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapKind {
    Identity,
    Hidden,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapConfig {
    pub kind: MapKind,
    pub hidden_dim: usize,
    /// Output dimension of the hidden map; defaults to the input dimension.
    pub output_dim: Option<usize>,
}

impl Default for MapConfig {
    fn default() -> Self {
        MapConfig {
            kind: MapKind::Identity,
            hidden_dim: 32,
            output_dim: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SjeConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub margin: f64,
    pub weight_init_sigma: f64,
    pub normalize_class_attributes: bool,
    pub prediction_rule: PredictionRule,
}

impl Default for SjeConfig {
    fn default() -> Self {
        SjeConfig {
            learning_rate: 0.005,
            epochs: 100,
            margin: 0.05,
            weight_init_sigma: 0.01,
            normalize_class_attributes: false,
            prediction_rule: PredictionRule::CompatibilityArgmax,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneralConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub weight_init_sigma: f64,
}

impl Default for GeneralConfig {
    fn default() -> Self {
        GeneralConfig {
            learning_rate: 0.05,
            epochs: 100,
            weight_init_sigma: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpsilonScale {
    /// ε is multiplied by the mean per-dimension standard deviation of the
    /// training features.
    Relative,
    Absolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub epsilon: f64,
    pub epsilon_scale: EpsilonScale,
    pub steps: usize,
    /// Absolute step size; defaults to ε / steps.
    pub alpha: Option<f64>,
    /// Ranking margin of the attribute-model attack, as a multiple of the
    /// training margin.
    pub margin_factor: f64,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            epsilon: 0.6,
            epsilon_scale: EpsilonScale::Relative,
            steps: 10,
            alpha: None,
            margin_factor: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobustSection {
    /// Training ε, on the attack section's scale; defaults to the attack ε.
    pub epsilon: Option<f64>,
    pub steps: usize,
    pub mix_alpha: f64,
}

impl Default for RobustSection {
    fn default() -> Self {
        RobustSection {
            epsilon: None,
            steps: 10,
            mix_alpha: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    /// ε grid on the attack section's scale.
    pub epsilons: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            epsilons: vec![0.0, 0.15, 0.3, 0.45, 0.6, 0.9],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainSection {
    /// Discriminative attributes per side; defaults to min(A, 10).
    pub k: Option<usize>,
    /// Counter-examples per record.
    pub m: usize,
}

impl Default for ExplainSection {
    fn default() -> Self {
        ExplainSection { k: None, m: 5 }
    }
}

/// Complete configuration of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub map: MapConfig,
    pub sje: SjeConfig,
    pub general: GeneralConfig,
    pub attack: AttackSection,
    pub robust: RobustSection,
    pub sweep: SweepSection,
    pub explain: ExplainSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            out_dir: PathBuf::from("run"),
            data: DataConfig::default(),
            map: MapConfig::default(),
            sje: SjeConfig::default(),
            general: GeneralConfig::default(),
            attack: AttackSection::default(),
            robust: RobustSection::default(),
            sweep: SweepSection::default(),
            explain: ExplainSection::default(),
        }
    }
}

impl RunConfig {
    /// Parses TOML, applies `section.key=value` overrides on top, and
    /// rejects unknown keys.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("config file: {e}")))?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("override {item:?} is not key=value")))?;
            let value = parse_override_value(raw.trim());
            let parts: Vec<&str> = key.trim().split('.').collect();
            let (last, sections) = parts.split_last().expect("split yields one element");
            let mut cursor = &mut table;
            for section in sections {
                cursor = cursor
                    .entry(section.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| Error::InvalidConfig(format!("{section} is not a section")))?;
            }
            cursor.insert(last.to_string(), value);
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.sje_train_config().validate()?;
        self.general_train_config().validate()?;
        if self.attack.steps == 0 || self.robust.steps == 0 {
            return Err(Error::InvalidConfig("attack steps must be >= 1".into()));
        }
        if !(self.attack.epsilon.is_finite() && self.attack.epsilon >= 0.0) {
            return Err(Error::InvalidConfig("attack.epsilon must be >= 0".into()));
        }
        if !(self.attack.margin_factor.is_finite() && self.attack.margin_factor > 0.0) {
            return Err(Error::InvalidConfig("attack.margin_factor must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.robust.mix_alpha) {
            return Err(Error::InvalidConfig("robust.mix_alpha must lie in [0, 1]".into()));
        }
        if self.sweep.epsilons.iter().any(|e| !e.is_finite() || *e < 0.0) {
            return Err(Error::InvalidConfig("sweep epsilons must be >= 0".into()));
        }
        if self.explain.m == 0 || self.explain.k == Some(0) {
            return Err(Error::InvalidConfig("explain.k and explain.m must be >= 1".into()));
        }
        Ok(())
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        substream_seed(self.seed, stage)
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        let d = &self.data;
        SyntheticSpec {
            num_classes: d.num_classes,
            num_attributes: d.num_attributes,
            feature_dim: d.feature_dim,
            samples_per_class: d.samples_per_class,
            noise_sigma: d.noise_sigma,
            class_similarity: d.class_similarity,
            seed: self.stage_seed("data"),
        }
    }

    pub fn sje_train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.sje.learning_rate,
            epochs: self.sje.epochs,
            margin: self.sje.margin,
            seed: self.stage_seed("sje"),
            weight_init_sigma: self.sje.weight_init_sigma,
            normalize_class_attributes: self.sje.normalize_class_attributes,
            prediction_rule: self.sje.prediction_rule,
        }
    }

    pub fn general_train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.general.learning_rate,
            epochs: self.general.epochs,
            margin: 0.0,
            seed: self.stage_seed("general"),
            weight_init_sigma: self.general.weight_init_sigma,
            ..TrainConfig::default()
        }
    }

    pub fn attack_margin(&self) -> f64 {
        self.attack.margin_factor * self.sje.margin
    }

    pub fn explain_k(&self, num_attributes: usize) -> usize {
        self.explain.k.unwrap_or(10).min(num_attributes)
    }

    fn data_dir(&self) -> PathBuf {
        self.out_dir.join("data")
    }

    fn models_dir(&self) -> PathBuf {
        self.out_dir.join("models")
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    // Anything that is not valid TOML on its own is taken as a bare string.
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// A dataset with its split and feature map, ready for training.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: Dataset,
    pub split: SplitAssignment,
    pub map: DifferentiableMap,
    /// Mean per-dimension standard deviation of the training features.
    pub feature_scale: f64,
}

impl Prepared {
    pub fn new(cfg: &RunConfig, dataset: Dataset) -> Result<Self> {
        let split = data::split(&dataset, cfg.data.split, cfg.stage_seed("split"))?;
        let map = build_map(cfg, dataset.feature_dim());
        let feature_scale = dataset.mean_feature_std(&split.train);
        Ok(Prepared {
            dataset,
            split,
            map,
            feature_scale,
        })
    }

    /// Converts an ε on the configured scale to an absolute radius.
    pub fn absolute_epsilon(&self, cfg: &RunConfig, epsilon: f64) -> f64 {
        match cfg.attack.epsilon_scale {
            EpsilonScale::Absolute => epsilon,
            EpsilonScale::Relative => epsilon * self.feature_scale,
        }
    }

    pub fn relative_epsilon(&self, absolute: f64) -> f64 {
        if self.feature_scale > 0.0 {
            absolute / self.feature_scale
        } else {
            0.0
        }
    }

    pub fn attack_config(&self, cfg: &RunConfig, epsilon: f64, steps: usize, loss: LossKind) -> AttackConfig {
        let eps = self.absolute_epsilon(cfg, epsilon);
        let mut attack = AttackConfig::with_default_alpha(eps, steps, loss);
        if let Some(alpha) = cfg.attack.alpha {
            attack.alpha = alpha;
        }
        attack
    }
}

pub fn build_map(cfg: &RunConfig, input_dim: usize) -> DifferentiableMap {
    match cfg.map.kind {
        MapKind::Identity => DifferentiableMap::Identity,
        MapKind::Hidden => DifferentiableMap::Hidden(HiddenLayer::random(
            input_dim,
            cfg.map.hidden_dim,
            cfg.map.output_dim.unwrap_or(input_dim),
            cfg.stage_seed("map"),
        )),
    }
}

pub fn source_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match cfg.data.source {
        DataSource::Synthetic => data::generate_synthetic(&cfg.synthetic_spec()),
        DataSource::Files => {
            let missing = |what: &str| Error::InvalidConfig(format!("data.{what} is required for file input"));
            data::load_dataset(&DatasetPaths {
                features: cfg.data.features.clone().ok_or_else(|| missing("features"))?,
                attributes: cfg.data.attributes.clone().ok_or_else(|| missing("attributes"))?,
                names: cfg.data.names.clone().ok_or_else(|| missing("names"))?,
            })
        }
    }
}

/// The standard pair of classifiers.
#[derive(Debug, Clone)]
pub struct Models {
    pub sje: EmbeddingModel,
    pub general: GeneralClassifier,
}

pub fn train_standard(cfg: &RunConfig, prep: &Prepared) -> Result<Models> {
    let sje = train_sje(&prep.dataset, &prep.split, &prep.map, &cfg.sje_train_config())?.model;
    let general = train_general(&prep.dataset, &prep.split, &prep.map, &cfg.general_train_config())?.model;
    Ok(Models { sje, general })
}

pub fn robust_epsilon(cfg: &RunConfig) -> f64 {
    cfg.robust.epsilon.unwrap_or(cfg.attack.epsilon)
}

pub fn train_robust(cfg: &RunConfig, prep: &Prepared) -> Result<Models> {
    let eps = robust_epsilon(cfg);
    let sje_cfg = RobustTrainConfig {
        base: cfg.sje_train_config(),
        attack: prep.attack_config(cfg, eps, cfg.robust.steps, LossKind::Ranking),
        mix_alpha: cfg.robust.mix_alpha,
        attack_margin: cfg.attack_margin(),
    };
    let general_cfg = RobustTrainConfig {
        base: cfg.general_train_config(),
        attack: prep.attack_config(cfg, eps, cfg.robust.steps, LossKind::CrossEntropy),
        mix_alpha: cfg.robust.mix_alpha,
        attack_margin: cfg.attack_margin(),
    };
    Ok(Models {
        sje: adv_train_sje(&prep.dataset, &prep.split, &prep.map, &sje_cfg)?.model,
        general: adv_train_general(&prep.dataset, &prep.split, &prep.map, &general_cfg)?.model,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    Attribute,
    General,
}

impl ClassifierKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ClassifierKind::Attribute => "attribute",
            ClassifierKind::General => "general",
        }
    }
}

/// Attacks the test split of `prep` with the given classifier of `models`.
pub fn attack_models(
    cfg: &RunConfig,
    prep: &Prepared,
    models: &Models,
    kind: ClassifierKind,
    epsilon: f64,
    steps: usize,
) -> Result<AttackOutcome> {
    let ds = &prep.dataset;
    match kind {
        ClassifierKind::Attribute => {
            let clf = models.sje.classifier(ds.class_attributes(), cfg.attack_margin())?;
            let attack = prep.attack_config(cfg, epsilon, steps, LossKind::Ranking);
            attack_dataset(&prep.map, &clf, ds, &prep.split.test, &attack)
        }
        ClassifierKind::General => {
            let attack = prep.attack_config(cfg, epsilon, steps, LossKind::CrossEntropy);
            attack_dataset(&prep.map, &models.general, ds, &prep.split.test, &attack)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub epsilon_relative: f64,
    pub classifier: ClassifierKind,
    pub model: String,
    pub clean_acc: f64,
    pub adv_acc: f64,
    pub flip_rate: f64,
}

pub const SWEEP_HEADER: &str = "epsilon,epsilon_relative,classifier,model,clean_acc,adv_acc,flip_rate";
pub const ROBUSTIFICATION_HEADER: &str = "epsilon,clean_acc,adv_acc_standard,adv_acc_robust,measure";

/// Accuracy under attack for every (ε, classifier, model) combination,
/// ordered by ε, then classifier, then standard before robust.
pub fn sweep(cfg: &RunConfig, prep: &Prepared, standard: &Models, robust: Option<&Models>) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &eps in &cfg.sweep.epsilons {
        for kind in [ClassifierKind::General, ClassifierKind::Attribute] {
            let mut variants = vec![("standard", standard)];
            if let Some(r) = robust {
                variants.push(("robust", r));
            }
            for (name, models) in variants {
                let out = attack_models(cfg, prep, models, kind, eps, cfg.attack.steps)?;
                rows.push(SweepRow {
                    epsilon: out.summary.epsilon,
                    epsilon_relative: prep.relative_epsilon(out.summary.epsilon),
                    classifier: kind,
                    model: name.to_string(),
                    clean_acc: out.summary.clean_acc,
                    adv_acc: out.summary.adv_acc,
                    flip_rate: out.summary.flip_rate,
                });
            }
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epsilon,
            r.epsilon_relative,
            r.classifier.as_str(),
            r.model,
            r.clean_acc,
            r.adv_acc,
            r.flip_rate
        ));
    }
    out
}

/// Per-ε robustification table for one classifier; `NA` marks grid points
/// where the attack cost the standard model nothing.
pub fn robustification_csv(rows: &[SweepRow], kind: ClassifierKind) -> Result<String> {
    let mut out = format!("{ROBUSTIFICATION_HEADER}\n");
    let pick = |eps: f64, model: &str| {
        rows.iter()
            .find(|r| r.classifier == kind && r.model == model && r.epsilon == eps)
    };
    let mut seen = Vec::new();
    for r in rows.iter().filter(|r| r.classifier == kind && r.model == "standard") {
        if seen.contains(&r.epsilon) {
            continue;
        }
        seen.push(r.epsilon);
        let robust = pick(r.epsilon, "robust")
            .ok_or_else(|| Error::InvalidConfig("robustification table needs robust sweep rows".into()))?;
        let report = RobustificationReport::new(r.clean_acc, r.adv_acc, robust.clean_acc, robust.adv_acc)?;
        let measure = report.measure.map_or_else(|| "NA".to_string(), |m| format!("{m}"));
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epsilon, r.clean_acc, r.adv_acc, robust.adv_acc, measure
        ));
    }
    Ok(out)
}

/// Counts of how the attacked sample set was filtered before explanation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainCounts {
    pub attacked: usize,
    pub clean_correct: usize,
    pub eligible: usize,
    pub not_flipped: usize,
    pub clean_misclassified: usize,
    pub records: usize,
    pub not_explainable: usize,
    pub robust_eligible: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct ExplainResult {
    pub attack: AttackSummary,
    pub explanations: Vec<Explanation>,
    pub standard: Option<DistanceSummary>,
    pub robust: Option<DistanceSummary>,
    pub counts: ExplainCounts,
}

/// Attacks the test split with the attribute model, explains every eligible
/// sample and runs the distance analyses.
pub fn explain_run(
    cfg: &RunConfig,
    prep: &Prepared,
    standard: &EmbeddingModel,
    robust: Option<&EmbeddingModel>,
) -> Result<ExplainResult> {
    let ds = &prep.dataset;
    let attack = prep.attack_config(cfg, cfg.attack.epsilon, cfg.attack.steps, LossKind::Ranking);
    let clf = standard.classifier(ds.class_attributes(), cfg.attack_margin())?;
    let outcome = attack_dataset(&prep.map, &clf, ds, &prep.split.test, &attack)?;

    let robust_outcome = robust
        .map(|model| {
            let rclf = model.classifier(ds.class_attributes(), cfg.attack_margin())?;
            attack_dataset(&prep.map, &rclf, ds, &prep.split.test, &attack)
        })
        .transpose()?;

    let gallery = Gallery::build(&prep.map, standard, ds, &prep.split.train)?;
    let ctx = ExplainContext {
        map: &prep.map,
        model: standard,
        dataset: ds,
        gallery: &gallery,
        k: cfg.explain_k(ds.num_attributes()),
        m: cfg.explain.m,
    };

    let table = standard.class_table(ds.class_attributes())?.into_owned();
    let mut explanations = Vec::new();
    let mut clean_obs = Vec::new();
    let mut adv_obs = Vec::new();
    let mut robust_pairs = (Vec::new(), Vec::new());
    for (pos, p) in outcome.samples.iter().enumerate() {
        if !p.is_eligible() {
            continue;
        }
        let rview = match (robust, &robust_outcome) {
            (Some(model), Some(ro)) => Some(RobustView {
                model,
                perturbed: &ro.samples[pos],
            }),
            _ => None,
        };
        let explanation = build_explanation(&ctx, p, rview)?;
        if let Explanation::Explained(rec) = &explanation {
            clean_obs.push(AttributeObservation {
                sample_id: rec.sample_id,
                true_class: rec.true_class,
                predicted_class: p.predicted_label_clean,
                attributes: rec.clean_attrs.clone(),
            });
            let adv = AttributeObservation {
                sample_id: rec.sample_id,
                true_class: rec.true_class,
                predicted_class: rec.counter_class,
                attributes: rec.adv_attrs.clone(),
            };
            if let Some(r) = rec.robust.as_ref().filter(|r| r.predicted_class == rec.true_class) {
                robust_pairs.0.push(AttributeObservation {
                    sample_id: rec.sample_id,
                    true_class: rec.true_class,
                    predicted_class: r.predicted_class,
                    attributes: r.adv_attrs.clone(),
                });
                robust_pairs.1.push(adv.clone());
            }
            adv_obs.push(adv);
        }
        explanations.push(explanation);
    }

    let standard_summary = if clean_obs.is_empty() {
        None
    } else {
        Some(distance_analysis_standard(&clean_obs, &adv_obs, &table)?)
    };
    let robust_summary = if robust.is_some() && !robust_pairs.0.is_empty() {
        Some(distance_analysis_robust(&robust_pairs.0, &robust_pairs.1, &table)?)
    } else {
        None
    };
    let samples = &outcome.samples;
    let counts = ExplainCounts {
        attacked: samples.len(),
        clean_correct: samples.iter().filter(|s| s.predicted_label_clean == s.true_label).count(),
        eligible: samples.iter().filter(|s| s.is_eligible()).count(),
        not_flipped: samples
            .iter()
            .filter(|s| s.predicted_label_clean == s.true_label && s.predicted_label_perturbed == s.true_label)
            .count(),
        clean_misclassified: samples.iter().filter(|s| s.predicted_label_clean != s.true_label).count(),
        records: explanations
            .iter()
            .filter(|e| matches!(e, Explanation::Explained(_)))
            .count(),
        not_explainable: explanations
            .iter()
            .filter(|e| matches!(e, Explanation::NotExplainable { .. }))
            .count(),
        robust_eligible: robust.map(|_| robust_pairs.0.len()),
    };
    Ok(ExplainResult {
        attack: outcome.summary,
        explanations,
        standard: standard_summary,
        robust: robust_summary,
        counts,
    })
}

// ---------------------------------------------------------------------------
// File-backed stages.

pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub wall_clock_seconds: f64,
    pub artifacts: Vec<ArtifactDigest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: RunConfig,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    /// Every artifact digest across stages, keyed by relative path.
    pub fn digests(&self) -> BTreeMap<String, String> {
        self.stages
            .values()
            .flat_map(|s| s.artifacts.iter())
            .map(|a| (a.path.clone(), a.sha256.clone()))
            .collect()
    }

    /// Re-hashes every listed artifact under `out_dir` and compares.
    pub fn verify(&self, out_dir: &Path) -> Result<()> {
        for (path, digest) in self.digests() {
            let actual = file_digest(&out_dir.join(&path))?;
            if actual != digest {
                return Err(Error::InvalidDataset(format!("digest mismatch for {path}")));
            }
        }
        Ok(())
    }
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn manifest_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("manifest.json")
}

pub fn load_manifest(out_dir: &Path) -> Result<RunManifest> {
    let path = out_dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(serde_json::from_str(&text)?)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))
}

/// Tracks the files a stage writes so they land in the manifest.
struct StageWriter<'a> {
    cfg: &'a RunConfig,
    started: Instant,
    written: Vec<PathBuf>,
}

impl<'a> StageWriter<'a> {
    fn new(cfg: &'a RunConfig) -> Result<Self> {
        create_dir(&cfg.out_dir)?;
        Ok(StageWriter {
            cfg,
            started: Instant::now(),
            written: Vec::new(),
        })
    }

    fn write(&mut self, relative: &str, contents: &str) -> Result<()> {
        let path = self.cfg.out_dir.join(relative);
        if let Some(parent) = path.parent() {
            create_dir(parent)?;
        }
        model_io::write(&path, contents)?;
        self.track(relative);
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, relative: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(relative, &text)
    }

    fn track(&mut self, relative: &str) {
        self.written.push(PathBuf::from(relative));
    }

    fn finish(self, stage: &str) -> Result<Vec<PathBuf>> {
        let mut artifacts = Vec::new();
        for rel in &self.written {
            artifacts.push(ArtifactDigest {
                path: rel.to_string_lossy().replace('\\', "/"),
                sha256: file_digest(&self.cfg.out_dir.join(rel))?,
            });
        }
        let path = manifest_path(self.cfg);
        let mut manifest = match load_manifest(&self.cfg.out_dir) {
            Ok(m) if m.config == *self.cfg => m,
            _ => RunManifest {
                tool_version: TOOL_VERSION.to_string(),
                config: self.cfg.clone(),
                stages: BTreeMap::new(),
            },
        };
        manifest.stages.insert(
            stage.to_string(),
            StageRecord {
                wall_clock_seconds: self.started.elapsed().as_secs_f64(),
                artifacts,
            },
        );
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        model_io::write(&path, &text)?;
        Ok(self.written.iter().map(|p| self.cfg.out_dir.join(p)).collect())
    }
}

fn load_prepared(cfg: &RunConfig) -> Result<Prepared> {
    let dataset = data::load_dataset(&DatasetPaths::in_dir(&cfg.data_dir()))?;
    Prepared::new(cfg, dataset)
}

fn model_path(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.models_dir().join(name)
}

fn load_models(cfg: &RunConfig, prep: &Prepared, prefix: &str) -> Result<Models> {
    let sje = model_io::load_embedding_model(&model_path(cfg, &format!("{prefix}sje.model")))?;
    let general = model_io::load_general_classifier(&model_path(cfg, &format!("{prefix}general.model")))?;
    sje.check_against(&prep.map, &prep.dataset)?;
    general.check_against(&prep.map, &prep.dataset)?;
    Ok(Models { sje, general })
}

fn robust_models_exist(cfg: &RunConfig) -> bool {
    model_path(cfg, "robust_sje.model").exists() && model_path(cfg, "robust_general.model").exists()
}

/// Writes the dataset files and the split. Returns the written paths.
pub fn stage_generate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let mut w = StageWriter::new(cfg)?;
    let dataset = source_dataset(cfg)?;
    let prep = Prepared::new(cfg, dataset)?;
    create_dir(&cfg.data_dir())?;
    data::save_dataset(&prep.dataset, &DatasetPaths::in_dir(&cfg.data_dir()))?;
    // Reload as a check that what was written validates.
    data::load_dataset(&DatasetPaths::in_dir(&cfg.data_dir()))?;
    for f in ["data/features.csv", "data/attributes.csv", "data/names.txt"] {
        w.track(f);
    }
    w.write_json("data/split.json", &prep.split)?;
    w.finish("generate")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierAccuracy {
    pub train_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub prediction_rule: PredictionRule,
    pub attribute: ClassifierAccuracy,
    pub general: ClassifierAccuracy,
    /// `|attribute.test_acc − general.test_acc|`.
    pub test_acc_difference: f64,
}

pub fn clean_accuracies(prep: &Prepared, models: &Models) -> Result<(ClassifierAccuracy, ClassifierAccuracy)> {
    let ds = &prep.dataset;
    let clf = models.sje.classifier(ds.class_attributes(), 0.0)?;
    let attribute = ClassifierAccuracy {
        train_acc: accuracy(&prep.map, &clf, ds, &prep.split.train)?,
        test_acc: accuracy(&prep.map, &clf, ds, &prep.split.test)?,
    };
    let general = ClassifierAccuracy {
        train_acc: accuracy(&prep.map, &models.general, ds, &prep.split.train)?,
        test_acc: accuracy(&prep.map, &models.general, ds, &prep.split.test)?,
    };
    Ok((attribute, general))
}

fn test_split_nonempty(prep: &Prepared) -> Result<()> {
    if prep.split.test.is_empty() {
        return Err(Error::InvalidConfig("test split is empty".into()));
    }
    Ok(())
}

pub fn stage_train(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let mut w = StageWriter::new(cfg)?;
    let prep = load_prepared(cfg)?;
    test_split_nonempty(&prep)?;
    let models = train_standard(cfg, &prep)?;
    let (attribute, general) = clean_accuracies(&prep, &models)?;
    w.write("models/map.model", &model_io::map_to_string(&prep.map))?;
    w.write("models/sje.model", &model_io::embedding_model_to_string(&models.sje))?;
    w.write("models/general.model", &model_io::general_classifier_to_string(&models.general))?;
    w.write_json(
        "train_report.json",
        &TrainReport {
            prediction_rule: models.sje.prediction_rule,
            test_acc_difference: (attribute.test_acc - general.test_acc).abs(),
            attribute,
            general,
        },
    )?;
    w.finish("train")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustTrainReport {
    pub epsilon: f64,
    pub epsilon_relative: f64,
    pub mix_alpha: f64,
    pub attribute: RobustificationReport,
    pub general: RobustificationReport,
}

pub fn robustification_at(
    cfg: &RunConfig,
    prep: &Prepared,
    standard: &Models,
    robust: &Models,
    kind: ClassifierKind,
    epsilon: f64,
) -> Result<RobustificationReport> {
    let s = attack_models(cfg, prep, standard, kind, epsilon, cfg.attack.steps)?.summary;
    let r = attack_models(cfg, prep, robust, kind, epsilon, cfg.attack.steps)?.summary;
    RobustificationReport::new(s.clean_acc, s.adv_acc, r.clean_acc, r.adv_acc)
}

pub fn stage_robust_train(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let mut w = StageWriter::new(cfg)?;
    let prep = load_prepared(cfg)?;
    test_split_nonempty(&prep)?;
    let standard = load_models(cfg, &prep, "")?;
    let robust = train_robust(cfg, &prep)?;
    let eps = robust_epsilon(cfg);
    let report = RobustTrainReport {
        epsilon: prep.absolute_epsilon(cfg, eps),
        epsilon_relative: prep.relative_epsilon(prep.absolute_epsilon(cfg, eps)),
        mix_alpha: cfg.robust.mix_alpha,
        attribute: robustification_at(cfg, &prep, &standard, &robust, ClassifierKind::Attribute, eps)?,
        general: robustification_at(cfg, &prep, &standard, &robust, ClassifierKind::General, eps)?,
    };
    w.write("models/robust_sje.model", &model_io::embedding_model_to_string(&robust.sje))?;
    w.write(
        "models/robust_general.model",
        &model_io::general_classifier_to_string(&robust.general),
    )?;
    w.write_json("robust_report.json", &report)?;
    w.finish("robust-train")
}

pub fn stage_sweep(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let mut w = StageWriter::new(cfg)?;
    if cfg.sweep.epsilons.is_empty() {
        return Err(Error::InvalidConfig("sweep.epsilons is empty".into()));
    }
    let prep = load_prepared(cfg)?;
    test_split_nonempty(&prep)?;
    let standard = load_models(cfg, &prep, "")?;
    let robust = if robust_models_exist(cfg) {
        Some(load_models(cfg, &prep, "robust_")?)
    } else {
        None
    };
    let rows = sweep(cfg, &prep, &standard, robust.as_ref())?;
    w.write("sweep.csv", &sweep_csv(&rows))?;
    if robust.is_some() {
        w.write(
            "robustification_attribute.csv",
            &robustification_csv(&rows, ClassifierKind::Attribute)?,
        )?;
        w.write(
            "robustification_general.csv",
            &robustification_csv(&rows, ClassifierKind::General)?,
        )?;
    }
    w.finish("sweep")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainReport {
    pub attack: AttackSummary,
    pub counts: ExplainCounts,
    pub standard: Option<crate::explain::DistanceStats>,
    pub robust: Option<crate::explain::DistanceStats>,
}

pub fn stage_explain(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let mut w = StageWriter::new(cfg)?;
    let prep = load_prepared(cfg)?;
    test_split_nonempty(&prep)?;
    let standard = load_models(cfg, &prep, "")?;
    let robust = if robust_models_exist(cfg) {
        Some(load_models(cfg, &prep, "robust_")?)
    } else {
        None
    };
    let result = explain_run(cfg, &prep, &standard.sje, robust.as_ref().map(|m| &m.sje))?;
    let mut jsonl = String::new();
    for e in &result.explanations {
        jsonl.push_str(&serde_json::to_string(e)?);
        jsonl.push('\n');
    }
    w.write("explanations.jsonl", &jsonl)?;
    for (name, summary) in [("standard", &result.standard), ("robust", &result.robust)] {
        if let Some(s) = summary {
            w.write(&format!("distances_{name}.csv"), &s.to_csv())?;
            w.write_json(&format!("distances_{name}.json"), &s.stats)?;
        }
    }
    w.write_json(
        "explain_summary.json",
        &ExplainReport {
            attack: result.attack.clone(),
            counts: result.counts.clone(),
            standard: result.standard.as_ref().map(|s| s.stats.clone()),
            robust: result.robust.as_ref().map(|s| s.stats.clone()),
        },
    )?;
    w.finish("explain")
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Option<T>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(Some(serde_json::from_str(&text)?))
}

/// Renders a Markdown summary of whatever stages have run.
pub fn render_report(cfg: &RunConfig) -> Result<String> {
    let dir = &cfg.out_dir;
    let mut out = String::from("# attrex run report\n\n");
    out.push_str(&format!("- seed: {}\n\n", cfg.seed));
    if let Some(t) = read_json::<TrainReport>(&dir.join("train_report.json"))? {
        out.push_str("## Clean accuracy (test split)\n\n| classifier | train | test |\n|---|---|---|\n");
        out.push_str(&format!(
            "| attribute ({}) | {:.4} | {:.4} |\n| general | {:.4} | {:.4} |\n\n",
            t.prediction_rule.as_str(),
            t.attribute.train_acc,
            t.attribute.test_acc,
            t.general.train_acc,
            t.general.test_acc
        ));
    }
    if let Some(r) = read_json::<RobustTrainReport>(&dir.join("robust_report.json"))? {
        out.push_str(&format!(
            "## Adversarial training (epsilon {:.4}, relative {:.3}, mix {})\n\n",
            r.epsilon, r.epsilon_relative, r.mix_alpha
        ));
        out.push_str("| classifier | clean std | adv std | clean robust | adv robust | measure |\n|---|---|---|---|---|---|\n");
        for (name, rep) in [("attribute", &r.attribute), ("general", &r.general)] {
            out.push_str(&format!(
                "| {name} | {:.4} | {:.4} | {:.4} | {:.4} | {} |\n",
                rep.clean_acc_standard,
                rep.adv_acc_standard,
                rep.clean_acc_robust,
                rep.adv_acc_robust,
                rep.measure.map_or("n/a".to_string(), |m| format!("{m:.4}"))
            ));
        }
        out.push('\n');
    }
    let sweep_path = dir.join("sweep.csv");
    if sweep_path.exists() {
        let text = fs::read_to_string(&sweep_path)
            .map_err(|e| Error::io(format!("reading {}", sweep_path.display()), e))?;
        out.push_str("## Accuracy under attack\n\n```\n");
        out.push_str(&text);
        out.push_str("```\n\n");
    }
    if let Some(e) = read_json::<ExplainReport>(&dir.join("explain_summary.json"))? {
        let c = &e.counts;
        out.push_str(&format!(
            "## Explanations (epsilon {:.4})\n\n- attacked: {}\n- clean correct: {}\n- eligible (clean correct, flipped): {}\n- not flipped: {}\n- clean misclassified: {}\n- records: {}\n",
            e.attack.epsilon, c.attacked, c.clean_correct, c.eligible, c.not_flipped, c.clean_misclassified, c.records
        ));
        if let Some(n) = c.robust_eligible {
            out.push_str(&format!("- robust eligible: {n}\n"));
        }
        for (name, stats) in [("standard", &e.standard), ("robust", &e.robust)] {
            if let Some(s) = stats {
                out.push_str(&format!(
                    "- {name} distances: n={} mean d1={:.4} mean d2={:.4} median d1={:.4} median d2={:.4} overlap={:.4}\n",
                    s.n, s.mean_d1, s.mean_d2, s.median_d1, s.median_d2, s.overlap
                ));
            }
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn stage_report(cfg: &RunConfig) -> Result<(String, Vec<PathBuf>)> {
    cfg.validate()?;
    let mut w = StageWriter::new(cfg)?;
    let text = render_report(cfg)?;
    w.write("report.md", &text)?;
    Ok((text, w.finish("report")?))
}
