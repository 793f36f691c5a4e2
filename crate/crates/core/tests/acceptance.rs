//! Acceptance criteria, one test each. Every test writes a single
//! `criterion N PASS|FAIL` line with the measured values to stderr (written
//! through the raw handle so the harness does not capture it) and then
//! asserts.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use attrex::embed::{
    cross_entropy_grad_params, predict_attributes, ranking_loss_grad_weights, Classifier,
    DifferentiableMap, EmbeddingModel, GeneralClassifier, HiddenLayer, PredictionRule,
};
use attrex::explain::{
    select_counter_examples, select_discriminative_adv, select_discriminative_clean, Gallery, GalleryEntry,
};
use attrex::linalg::{dot, linf_distance, Matrix};
use attrex::perturb::loss_grad_wrt_input;
use attrex::pipeline::{
    attack_models, clean_accuracies, explain_run, load_manifest, robustification_at, robustification_csv,
    source_dataset, train_robust, train_standard, ClassifierKind, Prepared, RunConfig, SweepRow,
};
use attrex::robust::robustification_measure;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(id: u32, ok: bool, detail: &str) {
    let status = if ok { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {id} {status}: {detail}");
    assert!(ok, "criterion {id} failed: {detail}");
}

fn prepared(cfg: &RunConfig) -> Prepared {
    Prepared::new(cfg, source_dataset(cfg).unwrap()).unwrap()
}

// ---------------------------------------------------------------- criterion 1

const FD_STEP: f64 = 1e-7;
const KINK_TOL: f64 = 1e-6;
const POINTS: usize = 25;

fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = dot(analytic, analytic).sqrt().max(dot(numeric, numeric).sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn central_diff(params: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    (0..params.len())
        .map(|i| {
            let mut up = params.to_vec();
            let mut down = params.to_vec();
            up[i] += FD_STEP;
            down[i] -= FD_STEP;
            (f(&up) - f(&down)) / (2.0 * FD_STEP)
        })
        .collect()
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Margin terms `Δ + F(y) − F(y_true)` for every competing class, computed
/// from scratch.
fn margin_terms(attrs: &[f64], table: &Matrix, y: usize, margin: f64) -> Vec<f64> {
    (0..table.rows())
        .filter(|&c| c != y)
        .map(|c| margin + dot(attrs, table.row(c)) - dot(attrs, table.row(y)))
        .collect()
}

fn is_kink(terms: &[f64]) -> bool {
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let near_max = terms.iter().filter(|&&t| (t - max).abs() < KINK_TOL).count();
    max.abs() < KINK_TOL || near_max > 1
}

/// Zero-loss points have an exactly zero gradient on both sides and say
/// nothing about the derivative, so only active hinges are sampled.
fn is_active(terms: &[f64]) -> bool {
    terms.iter().any(|&t| t > 0.0)
}

#[test]
fn criterion_1_gradients_match_finite_differences() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (d, h, a, c) = (6, 5, 4, 5);
    let margin = 0.5;
    let maps = [
        DifferentiableMap::Identity,
        DifferentiableMap::Hidden(HiddenLayer::random(d, h, d, 7)),
    ];
    let mut worst = [0.0f64; 4];
    let mut accepted = [0usize; 4];
    let mut rejected = 0usize;

    for map in &maps {
        let out = map.output_dim(d).unwrap();
        let table = gaussian_matrix(&mut rng, c, a, 1.0);
        // Ranking loss: input and W gradients at random non-kink points.
        let mut n = 0;
        while n < POINTS {
            let w = gaussian_matrix(&mut rng, out, a, 1.0);
            let model = EmbeddingModel::new(w.clone(), false, PredictionRule::CompatibilityArgmax).unwrap();
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let y = rng.random_range(0..c);
            let attrs = predict_attributes(map, &model, &x).unwrap();
            let terms = margin_terms(&attrs, &table, y, margin);
            if is_kink(&terms) {
                rejected += 1;
                continue;
            }
            if !is_active(&terms) {
                continue;
            }
            let clf = model.classifier(&table, margin).unwrap();
            let gx = loss_grad_wrt_input(map, &clf, &x, y).unwrap();
            let fx = central_diff(&x, |p| clf.loss(map, p, y).unwrap());
            worst[0] = worst[0].max(rel_error(&gx, &fx));
            accepted[0] += 1;

            let gw = ranking_loss_grad_weights(map, &model, &x, y, &table, margin).unwrap();
            let fw = central_diff(w.as_slice(), |p| {
                let m = EmbeddingModel::new(
                    Matrix::from_vec(out, a, p.to_vec()).unwrap(),
                    false,
                    PredictionRule::CompatibilityArgmax,
                )
                .unwrap();
                m.classifier(&table, margin).unwrap().loss(map, &x, y).unwrap()
            });
            worst[1] = worst[1].max(rel_error(gw.as_slice(), &fw));
            accepted[1] += 1;
            n += 1;
        }
        // Cross-entropy: smooth everywhere, no rejection needed.
        for _ in 0..POINTS {
            let v = gaussian_matrix(&mut rng, out, c, 1.0);
            let b: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
            let model = GeneralClassifier::new(v.clone(), b.clone()).unwrap();
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let y = rng.random_range(0..c);
            let gx = loss_grad_wrt_input(map, &model, &x, y).unwrap();
            let fx = central_diff(&x, |p| model.loss(map, p, y).unwrap());
            worst[2] = worst[2].max(rel_error(&gx, &fx));
            accepted[2] += 1;

            let (gv, gb) = cross_entropy_grad_params(map, &model, &x, y).unwrap();
            let mut params = v.as_slice().to_vec();
            params.extend_from_slice(&b);
            let fp = central_diff(&params, |p| {
                let (pv, pb) = p.split_at(out * c);
                GeneralClassifier::new(Matrix::from_vec(out, c, pv.to_vec()).unwrap(), pb.to_vec())
                    .unwrap()
                    .loss(map, &x, y)
                    .unwrap()
            });
            let mut analytic = gv.as_slice().to_vec();
            analytic.extend_from_slice(&gb);
            worst[3] = worst[3].max(rel_error(&analytic, &fp));
            accepted[3] += 1;
        }
    }
    let elapsed = started.elapsed();
    let ok = worst.iter().all(|&e| e < 1e-4)
        && accepted.iter().all(|&n| n >= 20)
        && elapsed < Duration::from_secs(10);
    verdict(
        1,
        ok,
        &format!(
            "max rel err ranking/x {:.2e} ranking/W {:.2e} ce/x {:.2e} ce/(V,b) {:.2e}; points {:?}, {} kink rejections; {:.2?}",
            worst[0], worst[1], worst[2], worst[3], accepted, rejected, elapsed
        ),
    );
}

// ---------------------------------------------------------------- criterion 2

/// Pre-registered attack radius on the relative scale.
const ATTACK_EPSILON: f64 = 0.6;

#[test]
fn criterion_2_epsilon_ball_and_accuracy_drop() {
    let started = Instant::now();
    let cfg = RunConfig::default();
    let prep = prepared(&cfg);
    let models = train_standard(&cfg, &prep).unwrap();
    let mut total = 0;
    let mut outside = 0;
    let mut drop = 0.0;
    for kind in [ClassifierKind::Attribute, ClassifierKind::General] {
        let out = attack_models(&cfg, &prep, &models, kind, ATTACK_EPSILON, cfg.attack.steps).unwrap();
        for s in &out.samples {
            total += 1;
            if linf_distance(&s.original, &s.perturbed) > out.summary.epsilon + 1e-12 {
                outside += 1;
            }
        }
        if kind == ClassifierKind::Attribute {
            drop = out.summary.clean_acc - out.summary.adv_acc;
        }
    }
    let elapsed = started.elapsed();
    let ok = outside == 0 && drop >= 0.30 && elapsed < Duration::from_secs(60);
    verdict(
        2,
        ok,
        &format!(
            "{outside}/{total} perturbed samples outside the ball; attribute accuracy drop {:.1}pp at relative eps {ATTACK_EPSILON}; {elapsed:.2?}",
            100.0 * drop
        ),
    );
}

// ---------------------------------------------------------------- criterion 3

#[test]
fn criterion_3_adversarial_training_helps_and_zero_radius_is_exact() {
    let started = Instant::now();
    let cfg = RunConfig::default();
    let prep = prepared(&cfg);
    let standard = train_standard(&cfg, &prep).unwrap();
    let robust = train_robust(&cfg, &prep).unwrap();
    let eps = cfg.robust.epsilon.unwrap_or(cfg.attack.epsilon);
    let attr = robustification_at(&cfg, &prep, &standard, &robust, ClassifierKind::Attribute, eps).unwrap();
    let general = robustification_at(&cfg, &prep, &standard, &robust, ClassifierKind::General, eps).unwrap();
    let gain_attr = attr.adv_acc_robust - attr.adv_acc_standard;
    let gain_general = general.adv_acc_robust - general.adv_acc_standard;

    let mut zero = cfg.clone();
    zero.robust.epsilon = Some(0.0);
    let at_zero = train_robust(&zero, &prep).unwrap();
    let bits = |m: &Matrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let identical = bits(&at_zero.sje.w) == bits(&standard.sje.w)
        && bits(&at_zero.general.v) == bits(&standard.general.v)
        && at_zero.general.bias.iter().map(|v| v.to_bits()).eq(standard.general.bias.iter().map(|v| v.to_bits()));

    let elapsed = started.elapsed();
    let ok = gain_attr >= 0.10 && gain_general >= 0.10 && identical && elapsed < Duration::from_secs(300);
    verdict(
        3,
        ok,
        &format!(
            "adv acc attribute {:.3} -> {:.3}, general {:.3} -> {:.3}; eps=0 training bit-identical: {identical}; {elapsed:.2?}",
            attr.adv_acc_standard, attr.adv_acc_robust, general.adv_acc_standard, general.adv_acc_robust
        ),
    );
}

// ---------------------------------------------------------------- criterion 4

/// Exhaustive nearest-neighbour ranking: repeatedly take the remaining
/// entry with the smallest squared distance, lowest id on ties.
fn brute_force_neighbours(query: &[f64], entries: &[GalleryEntry], m: usize) -> Vec<(usize, f64)> {
    let mut remaining: Vec<(usize, f64)> = entries
        .iter()
        .map(|e| {
            let sq: f64 = query.iter().zip(&e.attributes).map(|(a, b)| (a - b) * (a - b)).sum();
            (e.sample_id, sq)
        })
        .collect();
    let mut out = Vec::new();
    while out.len() < m && !remaining.is_empty() {
        let mut best = 0;
        for i in 1..remaining.len() {
            let (id, sq) = remaining[i];
            let (bid, bsq) = remaining[best];
            if sq < bsq || (sq == bsq && id < bid) {
                best = i;
            }
        }
        let (id, sq) = remaining.swap_remove(best);
        out.push((id, sq.sqrt()));
    }
    out
}

#[test]
fn criterion_4_counter_examples_match_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut agree = 0;
    let mut ties_seen = 0;
    for instance in 0..100 {
        let classes = rng.random_range(1..=4);
        let dim = rng.random_range(1..=6);
        let size = rng.random_range(1..=50);
        // Coarse integer grids on most instances so distance ties are common.
        let coarse = instance % 4 != 0;
        let draw = |rng: &mut ChaCha8Rng| {
            if coarse {
                rng.random_range(0..3) as f64
            } else {
                rng.random_range(-1.0..1.0)
            }
        };
        let mut ids: Vec<usize> = (0..200).collect();
        ids.shuffle(&mut rng);
        let entries: Vec<(usize, GalleryEntry)> = ids[..size]
            .iter()
            .map(|&id| {
                let attributes = (0..dim).map(|_| draw(&mut rng)).collect();
                (rng.random_range(0..classes), GalleryEntry { sample_id: id, attributes })
            })
            .collect();
        let counter = entries[rng.random_range(0..size)].0;
        let gallery = Gallery::from_entries(classes, entries).unwrap();
        let query: Vec<f64> = (0..dim).map(|_| draw(&mut rng)).collect();
        let members = gallery.class(counter);
        let m = rng.random_range(1..=members.len() + 2);

        let got = select_counter_examples(&query, counter, &gallery, m).unwrap();
        let expected = brute_force_neighbours(&query, members, m);
        let got_pairs: Vec<(usize, f64)> = got.iter().map(|c| (c.sample_id, c.distance)).collect();
        if got_pairs == expected {
            agree += 1;
        }
        let distinct: BTreeSet<u64> = expected.iter().map(|(_, d)| d.to_bits()).collect();
        if distinct.len() < expected.len() {
            ties_seen += 1;
        }
    }
    verdict(
        4,
        agree == 100,
        &format!("{agree}/100 instances agree with exhaustive search ({ties_seen} with distance ties)"),
    );
}

// ---------------------------------------------------------------- criterion 5

/// Brute force: for each rank, scan for the largest unused score, lowest
/// index on ties.
fn brute_force_top_k(scores: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut used = vec![false; scores.len()];
    let mut out = Vec::new();
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for (i, &s) in scores.iter().enumerate() {
            if !used[i] && best.is_none_or(|b| s > scores[b]) {
                best = Some(i);
            }
        }
        let b = best.unwrap();
        used[b] = true;
        out.push((b, scores[b]));
    }
    out
}

#[test]
fn criterion_5_top_k_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut agree = 0;
    for instance in 0..100 {
        let a = rng.random_range(1..=20);
        let k = rng.random_range(1..=a);
        let coarse = instance % 3 != 0;
        let draw = |rng: &mut ChaCha8Rng| {
            if coarse {
                rng.random_range(0..5) as f64 * 0.25
            } else {
                rng.random_range(0.0..1.0)
            }
        };
        let predicted: Vec<f64> = (0..a).map(|_| draw(&mut rng)).collect();
        let signature: Vec<f64> = (0..a).map(|_| draw(&mut rng)).collect();
        let diffs: Vec<f64> = predicted.iter().zip(&signature).map(|(p, s)| p - s).collect();
        let expected = brute_force_top_k(&diffs, k);
        let pairs = |v: Vec<attrex::explain::ScoredAttribute>| v.into_iter().map(|s| (s.index, s.score)).collect::<Vec<_>>();
        let clean = pairs(select_discriminative_clean(&predicted, &signature, k).unwrap());
        let adv = pairs(select_discriminative_adv(&predicted, &signature, k).unwrap());
        if clean == expected && adv == expected {
            agree += 1;
        }
    }
    verdict(5, agree == 100, &format!("{agree}/100 instances agree with brute-force sort"));
}

// ---------------------------------------------------------------- criterion 6

#[test]
fn criterion_6_distance_regimes() {
    let started = Instant::now();
    let run = |similarity: f64| {
        let mut cfg = RunConfig::default();
        cfg.data.class_similarity = similarity;
        let prep = prepared(&cfg);
        let models = train_standard(&cfg, &prep).unwrap();
        explain_run(&cfg, &prep, &models.sje, None).unwrap().standard.unwrap().stats
    };
    let coarse = run(0.1);
    let fine = run(0.8);
    let elapsed = started.elapsed();
    let ok = coarse.mean_d1 < coarse.mean_d2 && fine.overlap > coarse.overlap && elapsed < Duration::from_secs(120);
    verdict(
        6,
        ok,
        &format!(
            "similarity 0.1: mean d1 {:.3} vs mean d2 {:.3} (n {}), overlap {:.3}; similarity 0.8: overlap {:.3} (n {}); {elapsed:.2?}",
            coarse.mean_d1, coarse.mean_d2, coarse.n, coarse.overlap, fine.overlap, fine.n
        ),
    );
}

// ---------------------------------------------------------------- criterion 7

#[test]
fn criterion_7_clean_accuracy_parity() {
    let cfg = RunConfig::default();
    let prep = prepared(&cfg);
    let models = train_standard(&cfg, &prep).unwrap();
    let (attribute, general) = clean_accuracies(&prep, &models).unwrap();
    let (a, g) = (attribute.test_acc, general.test_acc);
    let ok = a >= 0.95 && g >= 0.95 && (a - g).abs() <= 0.05;
    verdict(7, ok, &format!("clean test accuracy attribute {a:.3}, general {g:.3}"));
}

// ---------------------------------------------------------------- criterion 8

#[test]
fn criterion_8_robustification_measure_properties() {
    let full = robustification_measure(0.9, 0.4, 0.9);
    let none = robustification_measure(0.9, 0.4, 0.4);
    let no_drop = robustification_measure(0.9, 0.9, 0.7);
    let mut monotone = true;
    for (clean, adv) in [(1.0, 0.0), (0.9, 0.4), (0.8, 0.79), (0.95, 0.6)] {
        let mut last = f64::NEG_INFINITY;
        for i in 0..=100 {
            let r = robustification_measure(clean, adv, i as f64 / 100.0).unwrap();
            monotone &= r >= last && (0.0..=1.0).contains(&r);
            last = r;
        }
    }
    // The robustification table marks a grid point without any drop as NA.
    let row = |eps: f64, model: &str, clean: f64, adv: f64| SweepRow {
        epsilon: eps,
        epsilon_relative: eps,
        classifier: ClassifierKind::Attribute,
        model: model.into(),
        clean_acc: clean,
        adv_acc: adv,
        flip_rate: clean - adv,
    };
    let csv = robustification_csv(
        &[row(0.0, "standard", 1.0, 1.0), row(0.0, "robust", 1.0, 1.0), row(0.5, "standard", 1.0, 0.5), row(0.5, "robust", 1.0, 1.0)],
        ClassifierKind::Attribute,
    )
    .unwrap();
    let na_written = csv.lines().nth(1) == Some("0,1,1,1,NA") && csv.lines().nth(2) == Some("0.5,1,0.5,1,1");
    let ok = full == Some(1.0) && none == Some(0.0) && no_drop.is_none() && monotone && na_written;
    verdict(
        8,
        ok,
        &format!("R(full)={full:?} R(none)={none:?} R(no drop)={no_drop:?}; monotone on grid: {monotone}; NA row: {na_written}"),
    );
}

// ---------------------------------------------------------------- criterion 9

fn run_pipeline(dir: &Path, config: &Path) {
    for stage in ["generate", "train", "robust-train", "sweep", "explain"] {
        let status = Command::new(env!("CARGO_BIN_EXE_attrex"))
            .args([stage, "--config"])
            .arg(config)
            .arg("--out-dir")
            .arg(dir)
            .stderr(std::process::Stdio::null())
            .status()
            .unwrap();
        assert!(status.success(), "stage {stage} exited with {status}");
    }
}

#[test]
fn criterion_9_pipeline_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("run.toml");
    std::fs::write(&config, "seed = 7\n[data]\nclass_similarity = 0.7\n").unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_pipeline(&a, &config);
    run_pipeline(&b, &config);
    let (ma, mb) = (load_manifest(&a).unwrap(), load_manifest(&b).unwrap());
    let verified = ma.verify(&a).is_ok() && mb.verify(&b).is_ok();
    let (da, db) = (ma.digests(), mb.digests());
    let ok = verified && !da.is_empty() && da == db;
    verdict(
        9,
        ok,
        &format!(
            "{} artifact digests, identical across runs: {}; manifests verify: {verified}",
            da.len(),
            da == db
        ),
    );
}
