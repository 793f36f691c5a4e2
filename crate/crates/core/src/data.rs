//! Datasets: validated containers, CSV/names-file I/O, deterministic
//! synthetic generation and stratified splitting.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

/// Box constraints on feature values honored by the perturbation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FeatureBounds {
    Global { low: f64, high: f64 },
    PerDimension(Vec<(f64, f64)>),
}

impl FeatureBounds {
    pub fn range(&self, dim: usize) -> (f64, f64) {
        match self {
            FeatureBounds::Global { low, high } => (*low, *high),
            FeatureBounds::PerDimension(b) => b[dim],
        }
    }

    fn validate(&self, feature_dim: usize) -> Result<()> {
        let check = |low: f64, high: f64| {
            if !(low.is_finite() && high.is_finite() && low <= high) {
                return Err(Error::InvalidDataset(format!(
                    "invalid feature bounds [{low}, {high}]"
                )));
            }
            Ok(())
        };
        match self {
            FeatureBounds::Global { low, high } => check(*low, *high),
            FeatureBounds::PerDimension(b) => {
                if b.len() != feature_dim {
                    return Err(Error::InvalidDataset(format!(
                        "{} per-dimension bounds for feature dimension {feature_dim}",
                        b.len()
                    )));
                }
                b.iter().try_for_each(|&(l, h)| check(l, h))
            }
        }
    }
}

/// Labeled feature vectors plus the per-class attribute matrix (one row per
/// class, one column per attribute).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    class_attributes: Matrix,
    class_names: Vec<String>,
    attribute_names: Vec<String>,
    feature_dim: usize,
    feature_bounds: Option<FeatureBounds>,
}

impl Dataset {
    pub fn new(
        samples: Vec<Sample>,
        class_attributes: Matrix,
        class_names: Vec<String>,
        attribute_names: Vec<String>,
        feature_dim: usize,
        feature_bounds: Option<FeatureBounds>,
    ) -> Result<Self> {
        let num_classes = class_attributes.rows();
        if class_names.len() != num_classes {
            return Err(Error::InvalidDataset(format!(
                "{} class names for {num_classes} attribute rows",
                class_names.len()
            )));
        }
        if attribute_names.len() != class_attributes.cols() {
            return Err(Error::InvalidDataset(format!(
                "{} attribute names for {} attribute columns",
                attribute_names.len(),
                class_attributes.cols()
            )));
        }
        if !class_attributes.is_finite() {
            return Err(Error::InvalidDataset(
                "class attribute matrix has non-finite entries".into(),
            ));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != feature_dim {
                return Err(Error::InvalidDataset(format!(
                    "sample {i} has {} features, expected {feature_dim}",
                    s.features.len()
                )));
            }
            if s.label >= num_classes {
                return Err(Error::InvalidDataset(format!(
                    "sample {i} has label {} but there are {num_classes} classes",
                    s.label
                )));
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidDataset(format!(
                    "sample {i} has non-finite features"
                )));
            }
        }
        if let Some(b) = &feature_bounds {
            b.validate(feature_dim)?;
            for (i, s) in samples.iter().enumerate() {
                for (dim, &v) in s.features.iter().enumerate() {
                    let (low, high) = b.range(dim);
                    if v < low || v > high {
                        return Err(Error::InvalidDataset(format!(
                            "sample {i} feature {dim} = {v} lies outside [{low}, {high}]"
                        )));
                    }
                }
            }
        }
        Ok(Dataset {
            samples,
            class_attributes,
            class_names,
            attribute_names,
            feature_dim,
            feature_bounds,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, id: usize) -> &Sample {
        &self.samples[id]
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_attributes(&self) -> &Matrix {
        &self.class_attributes
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn attribute_names(&self) -> &[String] {
        &self.attribute_names
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.class_attributes.rows()
    }

    pub fn num_attributes(&self) -> usize {
        self.class_attributes.cols()
    }

    pub fn feature_bounds(&self) -> Option<&FeatureBounds> {
        self.feature_bounds.as_ref()
    }

    /// Mean over dimensions of the per-dimension standard deviation of the
    /// features at `indices`.
    pub fn mean_feature_std(&self, indices: &[usize]) -> f64 {
        if indices.is_empty() || self.feature_dim == 0 {
            return 0.0;
        }
        let n = indices.len() as f64;
        let mut total = 0.0;
        for dim in 0..self.feature_dim {
            let mean = indices
                .iter()
                .map(|&i| self.samples[i].features[dim])
                .sum::<f64>()
                / n;
            let var = indices
                .iter()
                .map(|&i| (self.samples[i].features[dim] - mean).powi(2))
                .sum::<f64>()
                / n;
            total += var.sqrt();
        }
        total / self.feature_dim as f64
    }
}

/// Parameters of the synthetic dataset generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub num_attributes: usize,
    pub feature_dim: usize,
    pub samples_per_class: usize,
    pub noise_sigma: f64,
    /// 0 gives disjoint class signatures, 1 collapses every class onto a
    /// shared base signature.
    pub class_similarity: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.num_classes < 2 {
            return fail(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.num_attributes < 2 {
            return fail(format!(
                "num_attributes must be >= 2, got {}",
                self.num_attributes
            ));
        }
        if self.feature_dim < self.num_attributes {
            return fail(format!(
                "feature_dim ({}) must be >= num_attributes ({})",
                self.feature_dim, self.num_attributes
            ));
        }
        if self.samples_per_class == 0 {
            return fail("samples_per_class must be >= 1".into());
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return fail(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if !(0.0..=1.0).contains(&self.class_similarity) {
            return fail(format!(
                "class_similarity must lie in [0, 1], got {}",
                self.class_similarity
            ));
        }
        if self.num_classes > self.num_attributes && self.num_attributes < 64 {
            let codes = (1u128 << self.num_attributes) - 1;
            if self.num_classes as u128 > codes {
                return fail(format!(
                    "{} attributes cannot give {} distinct class signatures",
                    self.num_attributes, self.num_classes
                ));
            }
        }
        Ok(())
    }
}

/// Binary class codes. With `C <= A` attribute `a` belongs to class `a mod C`,
/// so the codes are mutually orthogonal; otherwise each class draws a random
/// distinct non-zero code.
fn class_codes(spec: &SyntheticSpec, rng: &mut rng::StageRng) -> Vec<Vec<f64>> {
    let (c, a) = (spec.num_classes, spec.num_attributes);
    if c <= a {
        return (0..c)
            .map(|class| {
                (0..a)
                    .map(|attr| if attr % c == class { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
    }
    let mut codes: Vec<Vec<f64>> = Vec::with_capacity(c);
    while codes.len() < c {
        let code: Vec<f64> = (0..a)
            .map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
            .collect();
        if code.iter().all(|&v| v == 0.0) || codes.contains(&code) {
            continue;
        }
        codes.push(code);
    }
    codes
}

/// Draws a dataset whose features are a fixed random linear mix of the class
/// attribute signature plus isotropic gaussian noise.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let (c, a, d) = (spec.num_classes, spec.num_attributes, spec.feature_dim);
    let mut rng = rng::substream(spec.seed, "synthetic");

    let codes = class_codes(spec, &mut rng);
    let base: Vec<f64> = (0..a).map(|_| rng.random::<f64>()).collect();
    let s = spec.class_similarity;
    let signatures: Vec<Vec<f64>> = codes
        .iter()
        .map(|code| {
            code.iter()
                .zip(&base)
                .map(|(u, b)| (1.0 - s) * u + s * b)
                .collect()
        })
        .collect();
    let class_attributes = Matrix::from_rows(&signatures)?;

    let mut mixing = Matrix::zeros(d, a);
    for v in mixing.as_mut_slice() {
        *v = rng.sample::<f64, _>(StandardNormal);
    }

    let noise = Normal::new(0.0, spec.noise_sigma)
        .map_err(|e| Error::InvalidConfig(format!("noise_sigma: {e}")))?;
    let mut samples = Vec::with_capacity(c * spec.samples_per_class);
    for (label, signature) in signatures.iter().enumerate() {
        let center = mixing.mul_vec(signature)?;
        for _ in 0..spec.samples_per_class {
            let features = center
                .iter()
                .map(|m| m + noise.sample(&mut rng))
                .collect();
            samples.push(Sample { features, label });
        }
    }

    Dataset::new(
        samples,
        class_attributes,
        (0..c).map(|i| format!("class_{i}")).collect(),
        (0..a).map(|i| format!("attr_{i}")).collect(),
        d,
        None,
    )
}

/// Stratified train/validation/test partition of sample indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPart {
    Train,
    Val,
    Test,
}

impl SplitAssignment {
    pub fn part(&self, part: SplitPart) -> &[usize] {
        match part {
            SplitPart::Train => &self.train,
            SplitPart::Val => &self.val,
            SplitPart::Test => &self.test,
        }
    }
}

/// Largest-remainder apportionment of `n` items over `ratios`.
fn apportion(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let ideal: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, &x) in counts.iter_mut().zip(&ideal) {
        *c = x.floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&i, &j| {
        let (fi, fj) = (ideal[i] - ideal[i].floor(), ideal[j] - ideal[j].floor());
        fj.total_cmp(&fi).then(i.cmp(&j))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if ratios[i] > 0.0 {
            counts[i] += 1;
            left -= 1;
        }
    }
    counts
}

/// Splits `dataset` class by class so every part receives its share of each
/// class. `ratios` are (train, val, test).
pub fn split(dataset: &Dataset, ratios: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || ratios[0] <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "split ratios must be non-negative with a positive train share, got {ratios:?}"
        )));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "split ratios must sum to 1, got {total}"
        )));
    }
    let mut rng = rng::substream(seed, "split");
    let mut out = SplitAssignment {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        seed,
    };
    for class in 0..dataset.num_classes() {
        let mut members: Vec<usize> = dataset
            .samples()
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == class)
            .map(|(i, _)| i)
            .collect();
        if members.is_empty() {
            return Err(Error::ClassTooSmall {
                class,
                available: 0,
                parts: 1,
            });
        }
        members.shuffle(&mut rng);
        let mut counts = apportion(members.len(), &ratios);
        // Every class keeps at least one training sample, taken from the
        // part furthest above its ideal share.
        if counts[0] == 0 {
            let n = members.len() as f64;
            let surplus = |j: usize| counts[j] as f64 - ratios[j] * n;
            let donor = if surplus(1) >= surplus(2) { 1 } else { 2 };
            counts[donor] -= 1;
            counts[0] += 1;
        }
        let (train, rest) = members.split_at(counts[0]);
        let (val, test) = rest.split_at(counts[1]);
        out.train.extend_from_slice(train);
        out.val.extend_from_slice(val);
        out.test.extend_from_slice(test);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

/// Paths of the three files that make up a dataset on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetPaths {
    pub features: PathBuf,
    pub attributes: PathBuf,
    pub names: PathBuf,
}

impl DatasetPaths {
    pub fn in_dir(dir: &Path) -> Self {
        DatasetPaths {
            features: dir.join("features.csv"),
            attributes: dir.join("attributes.csv"),
            names: dir.join("names.txt"),
        }
    }
}

fn fmt_f64(v: f64) -> String {
    // Display prints the shortest string that parses back to the same bits.
    format!("{v}")
}

fn csv_error(path: &Path, err: csv::Error) -> Error {
    let line = err.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: err.to_string(),
    }
}

fn write_csv(path: &Path, header: Vec<String>, rows: Vec<Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn save_dataset(dataset: &Dataset, paths: &DatasetPaths) -> Result<()> {
    let d = dataset.feature_dim();
    let mut header: Vec<String> = (0..d).map(|i| format!("f{i}")).collect();
    header.push("label".into());
    let rows = dataset
        .samples()
        .iter()
        .map(|s| {
            let mut row: Vec<String> = s.features.iter().map(|&v| fmt_f64(v)).collect();
            row.push(s.label.to_string());
            row
        })
        .collect();
    write_csv(&paths.features, header, rows)?;

    let attrs = dataset.class_attributes();
    let header = (0..attrs.cols()).map(|i| format!("a{i}")).collect();
    let rows = (0..attrs.rows())
        .map(|r| attrs.row(r).iter().map(|&v| fmt_f64(v)).collect())
        .collect();
    write_csv(&paths.attributes, header, rows)?;

    let mut names = String::new();
    for c in dataset.class_names() {
        names.push_str(&format!("class:{c}\n"));
    }
    for a in dataset.attribute_names() {
        names.push_str(&format!("attr:{a}\n"));
    }
    match dataset.feature_bounds() {
        None => {}
        Some(FeatureBounds::Global { low, high }) => {
            names.push_str(&format!("bounds:{},{}\n", fmt_f64(*low), fmt_f64(*high)));
        }
        Some(FeatureBounds::PerDimension(b)) => {
            let parts: Vec<String> = b
                .iter()
                .map(|(l, h)| format!("{},{}", fmt_f64(*l), fmt_f64(*h)))
                .collect();
            names.push_str(&format!("bounds:{}\n", parts.join(";")));
        }
    }
    fs::write(&paths.names, names)
        .map_err(|e| Error::io(format!("writing {}", paths.names.display()), e))
}

fn parse_value(path: &Path, line: usize, field: &str) -> Result<f64> {
    let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("cannot parse {field:?} as a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::NonFiniteValue {
            path: path.to_path_buf(),
            line,
        });
    }
    Ok(v)
}

fn check_header(path: &Path, header: &csv::StringRecord, expected: &[String]) -> Result<()> {
    let found: Vec<&str> = header.iter().map(str::trim).collect();
    if found != expected {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected header {:?}, found {:?}", expected.join(","), found.join(",")),
        });
    }
    Ok(())
}

fn open_csv(path: &Path) -> Result<csv::Reader<fs::File>> {
    csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(format!("opening {}", path.display()), io),
            other => Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                message: format!("{other:?}"),
            },
        })
}

struct Names {
    classes: Vec<String>,
    attributes: Vec<String>,
    bounds: Option<FeatureBounds>,
}

fn parse_names(path: &Path) -> Result<Names> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut names = Names {
        classes: Vec::new(),
        attributes: Vec::new(),
        bounds: None,
    };
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let raw = raw.trim_end_matches('\r');
        if raw.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        if let Some(name) = raw.strip_prefix("class:") {
            if !names.attributes.is_empty() {
                return Err(bad("class entries must precede attr entries".into()));
            }
            names.classes.push(name.to_string());
        } else if let Some(name) = raw.strip_prefix("attr:") {
            names.attributes.push(name.to_string());
        } else if let Some(spec) = raw.strip_prefix("bounds:") {
            let mut pairs = Vec::new();
            for pair in spec.split(';') {
                let (l, h) = pair
                    .split_once(',')
                    .ok_or_else(|| bad(format!("malformed bounds pair {pair:?}")))?;
                pairs.push((parse_value(path, line, l)?, parse_value(path, line, h)?));
            }
            names.bounds = Some(if pairs.len() == 1 {
                FeatureBounds::Global {
                    low: pairs[0].0,
                    high: pairs[0].1,
                }
            } else {
                FeatureBounds::PerDimension(pairs)
            });
        } else {
            return Err(bad(format!("unrecognized entry {raw:?}")));
        }
    }
    Ok(names)
}

/// Reads and validates a dataset from its features CSV, attributes CSV and
/// names file.
pub fn load_dataset(paths: &DatasetPaths) -> Result<Dataset> {
    let names = parse_names(&paths.names)?;

    let path = paths.attributes.as_path();
    let mut reader = open_csv(path)?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let num_attributes = header.len();
    check_header(
        path,
        &header,
        &(0..num_attributes).map(|i| format!("a{i}")).collect::<Vec<_>>(),
    )?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != num_attributes {
            return Err(Error::DimensionMismatch {
                path: path.to_path_buf(),
                line,
                expected: num_attributes,
                found: record.len(),
            });
        }
        rows.push(
            record
                .iter()
                .map(|f| parse_value(path, line, f))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    if rows.len() != names.classes.len() {
        return Err(Error::InvalidDataset(format!(
            "{} has {} class rows but {} names {} classes",
            path.display(),
            rows.len(),
            paths.names.display(),
            names.classes.len()
        )));
    }
    let class_attributes = Matrix::from_rows(&rows)?;
    let num_classes = class_attributes.rows();

    let path = paths.features.as_path();
    let mut reader = open_csv(path)?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "empty header".into(),
        });
    }
    let feature_dim = header.len() - 1;
    let mut expected: Vec<String> = (0..feature_dim).map(|i| format!("f{i}")).collect();
    expected.push("label".into());
    check_header(path, &header, &expected)?;
    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != feature_dim + 1 {
            return Err(Error::DimensionMismatch {
                path: path.to_path_buf(),
                line,
                expected: feature_dim + 1,
                found: record.len(),
            });
        }
        let features = record
            .iter()
            .take(feature_dim)
            .map(|f| parse_value(path, line, f))
            .collect::<Result<Vec<_>>>()?;
        let raw_label = record[feature_dim].trim();
        let label: usize = raw_label.parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("cannot parse label {raw_label:?}"),
        })?;
        if label >= num_classes {
            return Err(Error::UnknownLabel {
                path: path.to_path_buf(),
                line,
                label,
                num_classes,
            });
        }
        samples.push(Sample { features, label });
    }

    Dataset::new(
        samples,
        class_attributes,
        names.classes,
        names.attributes,
        feature_dim,
        names.bounds,
    )
}
