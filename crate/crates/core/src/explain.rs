//! Explanations of a class change: which attributes moved (clean vs counter
//! class, perturbed vs true class), which real counter-class samples look
//! most like the perturbed input, and how far predicted attributes travel
//! compared with the distance between class signatures.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::embed::{predict_attributes, DifferentiableMap, EmbeddingModel};
use crate::error::{Error, Result};
use crate::linalg::{euclidean, sub, Matrix};
use crate::perturb::PerturbedSample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredAttribute {
    pub index: usize,
    pub score: f64,
}

/// Indices of the `k` largest scores, descending, ties to the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Result<Vec<ScoredAttribute>> {
    if k == 0 || k > scores.len() {
        return Err(Error::InvalidConfig(format!(
            "k must lie in [1, {}], got {k}",
            scores.len()
        )));
    }
    let mut ranked: Vec<ScoredAttribute> = scores
        .iter()
        .enumerate()
        .map(|(index, &score)| ScoredAttribute { index, score })
        .collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)));
    ranked.truncate(k);
    Ok(ranked)
}

fn check_lengths(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "attribute vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Attributes where the clean prediction most exceeds the counter class
/// signature.
pub fn select_discriminative_clean(clean_attrs: &[f64], counter_class_attrs: &[f64], k: usize) -> Result<Vec<ScoredAttribute>> {
    check_lengths(clean_attrs, counter_class_attrs)?;
    top_k(&sub(clean_attrs, counter_class_attrs), k)
}

/// Attributes where the perturbed prediction most exceeds the true class
/// signature.
pub fn select_discriminative_adv(adv_attrs: &[f64], true_class_attrs: &[f64], k: usize) -> Result<Vec<ScoredAttribute>> {
    check_lengths(adv_attrs, true_class_attrs)?;
    top_k(&sub(adv_attrs, true_class_attrs), k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryEntry {
    pub sample_id: usize,
    pub attributes: Vec<f64>,
}

/// Predicted attributes of clean samples, grouped by ground-truth class.
#[derive(Debug, Clone, PartialEq)]
pub struct Gallery {
    by_class: Vec<Vec<GalleryEntry>>,
}

impl Gallery {
    pub fn build(map: &DifferentiableMap, model: &EmbeddingModel, dataset: &Dataset, indices: &[usize]) -> Result<Self> {
        let mut by_class = vec![Vec::new(); dataset.num_classes()];
        for &id in indices {
            let s = dataset.sample(id);
            by_class[s.label].push(GalleryEntry {
                sample_id: id,
                attributes: predict_attributes(map, model, &s.features)?,
            });
        }
        Ok(Gallery { by_class })
    }

    pub fn from_entries(num_classes: usize, entries: impl IntoIterator<Item = (usize, GalleryEntry)>) -> Result<Self> {
        let mut by_class = vec![Vec::new(); num_classes];
        for (class, entry) in entries {
            by_class
                .get_mut(class)
                .ok_or_else(|| Error::InvalidConfig(format!("gallery class {class} out of range")))?
                .push(entry);
        }
        Ok(Gallery { by_class })
    }

    pub fn class(&self, class: usize) -> &[GalleryEntry] {
        self.by_class.get(class).map_or(&[], Vec::as_slice)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterExample {
    pub sample_id: usize,
    pub distance: f64,
}

/// The `m` counter-class samples whose predicted attributes lie nearest
/// (L2) to `adv_attrs`, ascending, ties to the lower sample id. The first
/// entry is the single best counter-example.
pub fn select_counter_examples(adv_attrs: &[f64], counter_class: usize, gallery: &Gallery, m: usize) -> Result<Vec<CounterExample>> {
    if m == 0 {
        return Err(Error::InvalidConfig("m must be >= 1".into()));
    }
    let entries = gallery.class(counter_class);
    if entries.is_empty() {
        return Err(Error::EmptyGallery { class: counter_class });
    }
    let mut ranked = entries
        .iter()
        .map(|e| {
            check_lengths(adv_attrs, &e.attributes)?;
            Ok(CounterExample {
                sample_id: e.sample_id,
                distance: euclidean(adv_attrs, &e.attributes),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.sample_id.cmp(&b.sample_id)));
    ranked.truncate(m);
    Ok(ranked)
}

/// One sample's predicted attributes under some model and input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeObservation {
    pub sample_id: usize,
    pub true_class: usize,
    pub predicted_class: usize,
    pub attributes: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMode {
    Standard,
    Robust,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceStats {
    pub n: usize,
    pub mean_d1: f64,
    pub mean_d2: f64,
    pub median_d1: f64,
    pub median_d2: f64,
    /// Sum of bin-wise minima of the two normalized histograms.
    pub overlap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceSummary {
    pub mode: DistanceMode,
    pub sample_ids: Vec<usize>,
    pub d1_values: Vec<f64>,
    pub d2_values: Vec<f64>,
    pub stats: DistanceStats,
}

pub const OVERLAP_BINS: usize = 30;

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Overlap of the normalized histograms of `a` and `b` on a shared grid of
/// `bins` equal-width bins spanning both samples.
pub fn overlap_coefficient(a: &[f64], b: &[f64], bins: usize) -> f64 {
    if a.is_empty() || b.is_empty() || bins == 0 {
        return 0.0;
    }
    let lo = a.iter().chain(b).cloned().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(b).cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = hi - lo;
    let bin_of = |v: f64| {
        if width <= 0.0 {
            0
        } else {
            (((v - lo) / width * bins as f64) as usize).min(bins - 1)
        }
    };
    let histogram = |values: &[f64]| {
        let mut h = vec![0.0; bins];
        for &v in values {
            h[bin_of(v)] += 1.0;
        }
        let n = values.len() as f64;
        h.iter_mut().for_each(|c| *c /= n);
        h
    };
    let (ha, hb) = (histogram(a), histogram(b));
    ha.iter().zip(&hb).map(|(x, y)| x.min(*y)).sum()
}

impl DistanceSummary {
    fn from_values(mode: DistanceMode, sample_ids: Vec<usize>, d1: Vec<f64>, d2: Vec<f64>) -> Self {
        let stats = DistanceStats {
            n: d1.len(),
            mean_d1: mean(&d1),
            mean_d2: mean(&d2),
            median_d1: median(&d1),
            median_d2: median(&d2),
            overlap: overlap_coefficient(&d1, &d2, OVERLAP_BINS),
        };
        DistanceSummary {
            mode,
            sample_ids,
            d1_values: d1,
            d2_values: d2,
            stats,
        }
    }

    /// `sample_id,d1,d2` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,d1,d2\n");
        for ((id, d1), d2) in self.sample_ids.iter().zip(&self.d1_values).zip(&self.d2_values) {
            out.push_str(&format!("{id},{d1},{d2}\n"));
        }
        out
    }
}

fn check_alignment(first: &[AttributeObservation], second: &[AttributeObservation]) -> Result<()> {
    if first.len() != second.len() {
        return Err(Error::Alignment(format!(
            "{} and {} observations",
            first.len(),
            second.len()
        )));
    }
    for (a, b) in first.iter().zip(second) {
        if a.sample_id != b.sample_id || a.true_class != b.true_class {
            return Err(Error::Alignment(format!(
                "sample {} (class {}) paired with sample {} (class {})",
                a.sample_id, a.true_class, b.sample_id, b.true_class
            )));
        }
        check_lengths(&a.attributes, &b.attributes)?;
    }
    if first.is_empty() {
        return Err(Error::NoEligibleSamples);
    }
    Ok(())
}

fn require(obs: &AttributeObservation, correct: bool, what: &str) -> Result<()> {
    if (obs.predicted_class == obs.true_class) != correct {
        return Err(Error::Ineligible {
            sample_id: obs.sample_id,
            reason: format!(
                "{what} prediction {} vs true class {}",
                obs.predicted_class, obs.true_class
            ),
        });
    }
    Ok(())
}

fn signature_distance(class_attributes: &Matrix, a: usize, b: usize) -> Result<f64> {
    if a >= class_attributes.rows() || b >= class_attributes.rows() {
        return Err(Error::InvalidConfig(format!(
            "class index out of range for {} classes",
            class_attributes.rows()
        )));
    }
    Ok(euclidean(class_attributes.row(a), class_attributes.row(b)))
}

/// `d1 = ‖A_clean − Â_adv‖`, `d2 = ‖φ(y_true) − φ(y_adv)‖` over samples that
/// were classified correctly when clean and incorrectly when perturbed.
pub fn distance_analysis_standard(
    clean: &[AttributeObservation],
    adversarial: &[AttributeObservation],
    class_attributes: &Matrix,
) -> Result<DistanceSummary> {
    check_alignment(clean, adversarial)?;
    let mut ids = Vec::with_capacity(clean.len());
    let mut d1 = Vec::with_capacity(clean.len());
    let mut d2 = Vec::with_capacity(clean.len());
    for (c, a) in clean.iter().zip(adversarial) {
        require(c, true, "clean")?;
        require(a, false, "perturbed")?;
        ids.push(c.sample_id);
        d1.push(euclidean(&c.attributes, &a.attributes));
        d2.push(signature_distance(class_attributes, c.true_class, a.predicted_class)?);
    }
    Ok(DistanceSummary::from_values(DistanceMode::Standard, ids, d1, d2))
}

/// `d1 = ‖Â^r − Â‖` between a robust model that classifies its perturbed
/// input correctly and a standard model that does not; `d2` as in the
/// standard analysis.
pub fn distance_analysis_robust(
    robust_adversarial: &[AttributeObservation],
    standard_adversarial: &[AttributeObservation],
    class_attributes: &Matrix,
) -> Result<DistanceSummary> {
    check_alignment(robust_adversarial, standard_adversarial)?;
    let mut ids = Vec::with_capacity(robust_adversarial.len());
    let mut d1 = Vec::with_capacity(robust_adversarial.len());
    let mut d2 = Vec::with_capacity(robust_adversarial.len());
    for (r, s) in robust_adversarial.iter().zip(standard_adversarial) {
        require(r, true, "robust")?;
        require(s, false, "standard")?;
        ids.push(r.sample_id);
        d1.push(euclidean(&r.attributes, &s.attributes));
        d2.push(signature_distance(class_attributes, r.true_class, s.predicted_class)?);
    }
    Ok(DistanceSummary::from_values(DistanceMode::Robust, ids, d1, d2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedAttribute {
    pub index: usize,
    pub name: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustAttributes {
    pub predicted_class: usize,
    pub adv_attrs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub sample_id: usize,
    pub true_class: usize,
    pub true_class_name: String,
    pub counter_class: usize,
    pub counter_class_name: String,
    pub clean_attrs: Vec<f64>,
    pub adv_attrs: Vec<f64>,
    pub discriminative_clean: Vec<NamedAttribute>,
    pub discriminative_adv: Vec<NamedAttribute>,
    pub counter_examples: Vec<CounterExample>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub robust: Option<RobustAttributes>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum Explanation {
    Explained(ExplanationRecord),
    NotExplainable {
        sample_id: usize,
        true_class: usize,
        reason: String,
    },
}

/// Everything that stays fixed across the samples of one explanation run.
pub struct ExplainContext<'a> {
    pub map: &'a DifferentiableMap,
    pub model: &'a EmbeddingModel,
    pub dataset: &'a Dataset,
    pub gallery: &'a Gallery,
    /// Number of discriminative attributes per side.
    pub k: usize,
    /// Number of counter-examples.
    pub m: usize,
}

/// The robust model's view of the same sample, attacked against itself.
pub struct RobustView<'a> {
    pub model: &'a EmbeddingModel,
    pub perturbed: &'a PerturbedSample,
}

fn named(scored: Vec<ScoredAttribute>, names: &[String]) -> Vec<NamedAttribute> {
    scored
        .into_iter()
        .map(|s| NamedAttribute {
            index: s.index,
            name: names[s.index].clone(),
            score: s.score,
        })
        .collect()
}

/// Assembles the full explanation of one attacked sample. A sample the
/// attack did not push out of its true class is reported as not explainable.
pub fn build_explanation(
    ctx: &ExplainContext<'_>,
    perturbed: &PerturbedSample,
    robust: Option<RobustView<'_>>,
) -> Result<Explanation> {
    let true_class = perturbed.true_label;
    let counter_class = perturbed.predicted_label_perturbed;
    if counter_class == true_class {
        return Ok(Explanation::NotExplainable {
            sample_id: perturbed.sample_id,
            true_class,
            reason: "perturbed input is still assigned its true class".into(),
        });
    }
    let ds = ctx.dataset;
    let table = ctx.model.class_table(ds.class_attributes())?;
    let clean_attrs = predict_attributes(ctx.map, ctx.model, &perturbed.original)?;
    let adv_attrs = predict_attributes(ctx.map, ctx.model, &perturbed.perturbed)?;
    let k = ctx.k.min(ds.num_attributes());
    let discriminative_clean = select_discriminative_clean(&clean_attrs, table.row(counter_class), k)?;
    let discriminative_adv = select_discriminative_adv(&adv_attrs, table.row(true_class), k)?;
    let counter_examples = select_counter_examples(&adv_attrs, counter_class, ctx.gallery, ctx.m)?;
    let robust = robust
        .map(|r| -> Result<RobustAttributes> {
            if r.perturbed.sample_id != perturbed.sample_id {
                return Err(Error::Alignment(format!(
                    "robust record for sample {} attached to sample {}",
                    r.perturbed.sample_id, perturbed.sample_id
                )));
            }
            Ok(RobustAttributes {
                predicted_class: r.perturbed.predicted_label_perturbed,
                adv_attrs: predict_attributes(ctx.map, r.model, &r.perturbed.perturbed)?,
            })
        })
        .transpose()?;
    Ok(Explanation::Explained(ExplanationRecord {
        sample_id: perturbed.sample_id,
        true_class,
        true_class_name: ds.class_names()[true_class].clone(),
        counter_class,
        counter_class_name: ds.class_names()[counter_class].clone(),
        clean_attrs,
        adv_attrs,
        discriminative_clean: named(discriminative_clean, ds.attribute_names()),
        discriminative_adv: named(discriminative_adv, ds.attribute_names()),
        counter_examples,
        robust,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx(v: &[ScoredAttribute]) -> Vec<usize> {
        v.iter().map(|s| s.index).collect()
    }

    #[test]
    fn discriminative_examples() {
        assert_eq!(idx(&select_discriminative_clean(&[0.9, 0.1], &[0.1, 0.9], 1).unwrap()), vec![0]);
        let q = select_discriminative_clean(&[0.4, 0.6], &[0.4, 0.6], 2).unwrap();
        assert_eq!(idx(&q), vec![0, 1]);
        assert!(q.iter().all(|s| s.score == 0.0));
        assert_eq!(idx(&select_discriminative_adv(&[0.1, 0.9], &[0.9, 0.1], 1).unwrap()), vec![1]);
        let p = select_discriminative_adv(&[0.3, 0.3], &[0.3, 0.3], 1).unwrap();
        assert_eq!((p[0].index, p[0].score), (0, 0.0));
    }

    #[test]
    fn k_out_of_range() {
        assert!(select_discriminative_clean(&[0.1, 0.2], &[0.0, 0.0], 0).is_err());
        assert!(select_discriminative_clean(&[0.1, 0.2], &[0.0, 0.0], 3).is_err());
        assert!(select_discriminative_adv(&[0.1, 0.2], &[0.0], 1).is_err());
    }

    fn gallery(entries: &[(usize, usize, [f64; 2])]) -> Gallery {
        Gallery::from_entries(
            3,
            entries.iter().map(|&(class, id, a)| {
                (
                    class,
                    GalleryEntry {
                        sample_id: id,
                        attributes: a.to_vec(),
                    },
                )
            }),
        )
        .unwrap()
    }

    #[test]
    fn counter_examples_rank_and_tie_break() {
        let g = gallery(&[
            (1, 7, [1.0, 1.0]),
            (1, 4, [0.0, 1.0]),
            (1, 2, [1.0, 0.0]),
            (1, 9, [0.5, 0.5]),
            (2, 3, [0.5, 0.5]),
        ]);
        let r = select_counter_examples(&[0.5, 0.5], 1, &g, 10).unwrap();
        assert_eq!(r[0], CounterExample { sample_id: 9, distance: 0.0 });
        // Samples 2, 4 and 7 tie at distance sqrt(0.5).
        let ids: Vec<usize> = r.iter().map(|c| c.sample_id).collect();
        assert_eq!(ids, vec![9, 2, 4, 7]);
        assert_eq!(select_counter_examples(&[0.5, 0.5], 1, &g, 2).unwrap().len(), 2);
        assert!(matches!(
            select_counter_examples(&[0.5, 0.5], 0, &g, 2),
            Err(Error::EmptyGallery { class: 0 })
        ));
    }

    fn obs(id: usize, t: usize, p: usize, a: &[f64]) -> AttributeObservation {
        AttributeObservation {
            sample_id: id,
            true_class: t,
            predicted_class: p,
            attributes: a.to_vec(),
        }
    }

    #[test]
    fn standard_distances() {
        let phi = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let clean = [obs(0, 0, 0, &[1.0, 0.0]), obs(1, 0, 0, &[2.0, 2.0])];
        let adv = [obs(0, 0, 2, &[1.0, 0.0]), obs(1, 0, 1, &[-1.0, -2.0])];
        let s = distance_analysis_standard(&clean, &adv, &phi).unwrap();
        assert_eq!(s.d1_values, vec![0.0, 5.0]);
        // rows 0 and 2 are identical
        assert_eq!(s.d2_values, vec![0.0, 2f64.sqrt()]);
        assert_eq!(s.stats.n, 2);
        assert_eq!(s.to_csv().lines().next(), Some("sample_id,d1,d2"));
    }

    #[test]
    fn ineligible_and_misaligned_inputs() {
        let phi = Matrix::identity(2);
        let clean = [obs(0, 0, 1, &[1.0, 0.0])];
        let adv = [obs(0, 0, 1, &[0.0, 1.0])];
        assert!(matches!(
            distance_analysis_standard(&clean, &adv, &phi),
            Err(Error::Ineligible { .. })
        ));
        let robust = [obs(3, 0, 0, &[1.0, 0.0])];
        let standard = [obs(4, 0, 1, &[0.0, 1.0])];
        assert!(matches!(
            distance_analysis_robust(&robust, &standard, &phi),
            Err(Error::Alignment(_))
        ));
        assert!(matches!(
            distance_analysis_robust(&[], &[], &phi),
            Err(Error::NoEligibleSamples)
        ));
    }

    #[test]
    fn robust_distances_vanish_for_identical_predictions() {
        let phi = Matrix::identity(3);
        let r = [obs(5, 2, 2, &[0.1, 0.2, 0.3])];
        let s = [obs(5, 2, 0, &[0.1, 0.2, 0.3])];
        let out = distance_analysis_robust(&r, &s, &phi).unwrap();
        assert_eq!(out.d1_values, vec![0.0]);
        assert_eq!(out.d2_values, vec![2f64.sqrt()]);
        assert_eq!(out.mode, DistanceMode::Robust);
    }

    #[test]
    fn overlap_extremes() {
        assert!((overlap_coefficient(&[1.0, 2.0], &[1.0, 2.0], 30) - 1.0).abs() < 1e-12);
        assert_eq!(overlap_coefficient(&[0.0, 0.1], &[5.0, 5.1], 30), 0.0);
        assert_eq!(overlap_coefficient(&[1.0], &[1.0], 30), 1.0);
    }
}
