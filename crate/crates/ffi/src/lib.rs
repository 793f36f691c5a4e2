//! C ABI over the attrex library.
//!
//! Every function returns an [`AttrexStatus`]. Objects are opaque handles
//! created by `*_new`, `*_generate`, `*_load` or `*_train` functions and
//! released with the matching `*_free`. On failure the message for the
//! calling thread is available from [`attrex_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use attrex::data::{self, Dataset, DatasetPaths, FeatureBounds, SplitAssignment, SyntheticSpec};
use attrex::embed::{
    self, Classifier, DifferentiableMap, EmbeddingModel, GeneralClassifier, HiddenLayer, LossKind, TrainConfig,
};
use attrex::linalg::Matrix;
use attrex::perturb::{ifgsm, AttackConfig};
use attrex::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttrexStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    InvalidData = 5,
    Numerical = 6,
    NotApplicable = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttrexSplitPart {
    Train = 0,
    Val = 1,
    Test = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct AttrexSyntheticSpec {
    pub num_classes: usize,
    pub num_attributes: usize,
    pub feature_dim: usize,
    pub samples_per_class: usize,
    pub noise_sigma: f64,
    pub class_similarity: f64,
    pub seed: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct AttrexDatasetInfo {
    pub num_samples: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub num_attributes: usize,
}

/// Training settings. `hidden_dim == 0` trains on raw features; otherwise a
/// fixed random tanh layer of that width (seeded by `seed`) precedes the model.
/// `margin` is ignored by the general classifier.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct AttrexTrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub margin: f64,
    pub weight_init_sigma: f64,
    pub seed: u64,
    pub hidden_dim: usize,
}

/// Attack settings. A non-positive `alpha` means `epsilon / steps`.
/// `margin` is the ranking margin used by the attribute classifier's loss.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct AttrexAttackConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    pub margin: f64,
}

pub struct AttrexDataset(Dataset);

pub struct AttrexSplit(SplitAssignment);

pub struct AttrexSjeModel {
    map: DifferentiableMap,
    model: EmbeddingModel,
    table: Matrix,
    bounds: Option<FeatureBounds>,
}

pub struct AttrexGeneralModel {
    map: DifferentiableMap,
    model: GeneralClassifier,
    bounds: Option<FeatureBounds>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(AttrexStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            _ if e.is_numerical() => AttrexStatus::Numerical,
            Error::Io { .. } => AttrexStatus::Io,
            Error::Parse { .. } | Error::Json(_) => AttrexStatus::Parse,
            Error::InvalidDataset(_)
            | Error::NonFiniteValue { .. }
            | Error::DimensionMismatch { .. }
            | Error::UnknownLabel { .. } => AttrexStatus::InvalidData,
            _ => AttrexStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure(AttrexStatus::InvalidArgument, message.into())
}

fn set_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AttrexStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AttrexStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(&message);
            status
        }
        Err(_) => {
            set_error("internal panic");
            AttrexStatus::Panic
        }
    }
}

unsafe fn obj<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure(AttrexStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| Failure(AttrexStatus::NullPointer, format!("{what} is null")))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure(AttrexStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure(AttrexStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn path<'a>(p: *const c_char, what: &str) -> Result<&'a Path, Failure> {
    if p.is_null() {
        return Err(Failure(AttrexStatus::NullPointer, format!("{what} is null")));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not UTF-8")))?;
    Ok(Path::new(s))
}

fn check_len(len: usize, expected: usize, what: &str) -> Result<(), Failure> {
    if len != expected {
        return Err(invalid(format!("{what} has length {len}, expected {expected}")));
    }
    Ok(())
}

fn give<T>(dst: *mut *mut T, value: T) -> Result<(), Failure> {
    let dst = unsafe { out(dst, "output handle")? };
    *dst = Box::into_raw(Box::new(value));
    Ok(())
}

fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(unsafe { Box::from_raw(p) });
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn attrex_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn attrex_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `spec` must point to a valid spec and `dataset` to writable storage.
#[no_mangle]
pub unsafe extern "C" fn attrex_dataset_generate(
    spec: *const AttrexSyntheticSpec,
    dataset: *mut *mut AttrexDataset,
) -> AttrexStatus {
    guard(|| {
        let s = obj(spec, "spec")?;
        let ds = data::generate_synthetic(&SyntheticSpec {
            num_classes: s.num_classes,
            num_attributes: s.num_attributes,
            feature_dim: s.feature_dim,
            samples_per_class: s.samples_per_class,
            noise_sigma: s.noise_sigma,
            class_similarity: s.class_similarity,
            seed: s.seed,
        })?;
        give(dataset, AttrexDataset(ds))
    })
}

/// Loads the features CSV, attributes CSV and names file.
///
/// # Safety
/// Paths must be NUL-terminated strings; `dataset` must be writable.
#[no_mangle]
pub unsafe extern "C" fn attrex_dataset_load(
    features: *const c_char,
    attributes: *const c_char,
    names: *const c_char,
    dataset: *mut *mut AttrexDataset,
) -> AttrexStatus {
    guard(|| {
        let paths = DatasetPaths {
            features: path(features, "features")?.to_path_buf(),
            attributes: path(attributes, "attributes")?.to_path_buf(),
            names: path(names, "names")?.to_path_buf(),
        };
        give(dataset, AttrexDataset(data::load_dataset(&paths)?))
    })
}

/// Writes `features.csv`, `attributes.csv` and `names.txt` into `dir`.
///
/// # Safety
/// `dataset` must be a live handle and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn attrex_dataset_save(dataset: *const AttrexDataset, dir: *const c_char) -> AttrexStatus {
    guard(|| {
        let ds = obj(dataset, "dataset")?;
        data::save_dataset(&ds.0, &DatasetPaths::in_dir(path(dir, "dir")?))?;
        Ok(())
    })
}

/// # Safety
/// `dataset` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn attrex_dataset_free(dataset: *mut AttrexDataset) {
    free(dataset)
}

/// # Safety
/// `dataset` must be a live handle and `info` writable.
#[no_mangle]
pub unsafe extern "C" fn attrex_dataset_info(
    dataset: *const AttrexDataset,
    info: *mut AttrexDatasetInfo,
) -> AttrexStatus {
    guard(|| {
        let ds = &obj(dataset, "dataset")?.0;
        *out(info, "info")? = AttrexDatasetInfo {
            num_samples: ds.len(),
            feature_dim: ds.feature_dim(),
            num_classes: ds.num_classes(),
            num_attributes: ds.num_attributes(),
        };
        Ok(())
    })
}

/// Copies sample `index` into `features` (length `feature_dim`) and `label`.
///
/// # Safety
/// `features` must hold `len` doubles; `label` must be writable.
#[no_mangle]
pub unsafe extern "C" fn attrex_dataset_sample(
    dataset: *const AttrexDataset,
    index: usize,
    features: *mut f64,
    len: usize,
    label: *mut usize,
) -> AttrexStatus {
    guard(|| {
        let ds = &obj(dataset, "dataset")?.0;
        if index >= ds.len() {
            return Err(invalid(format!("sample {index} out of range ({} samples)", ds.len())));
        }
        check_len(len, ds.feature_dim(), "features")?;
        let s = ds.sample(index);
        slice_mut(features, len, "features")?.copy_from_slice(&s.features);
        *out(label, "label")? = s.label;
        Ok(())
    })
}

/// Stratified split; `ratios` holds train, validation and test fractions.
///
/// # Safety
/// `ratios` must point to three doubles; `split` must be writable.
#[no_mangle]
pub unsafe extern "C" fn attrex_split_new(
    dataset: *const AttrexDataset,
    ratios: *const f64,
    seed: u64,
    split: *mut *mut AttrexSplit,
) -> AttrexStatus {
    guard(|| {
        let ds = &obj(dataset, "dataset")?.0;
        let r = slice(ratios, 3, "ratios")?;
        give(split, AttrexSplit(data::split(ds, [r[0], r[1], r[2]], seed)?))
    })
}

/// # Safety
/// `split` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn attrex_split_free(split: *mut AttrexSplit) {
    free(split)
}

fn part(split: &SplitAssignment, part: AttrexSplitPart) -> &[usize] {
    match part {
        AttrexSplitPart::Train => &split.train,
        AttrexSplitPart::Val => &split.val,
        AttrexSplitPart::Test => &split.test,
    }
}

/// # Safety
/// `split` must be a live handle and `len` writable.
#[no_mangle]
pub unsafe extern "C" fn attrex_split_len(
    split: *const AttrexSplit,
    which: AttrexSplitPart,
    len: *mut usize,
) -> AttrexStatus {
    guard(|| {
        *out(len, "len")? = part(&obj(split, "split")?.0, which).len();
        Ok(())
    })
}

/// Copies the sample indices of one part; `len` must equal its size.
///
/// # Safety
/// `indices` must hold `len` elements.
#[no_mangle]
pub unsafe extern "C" fn attrex_split_indices(
    split: *const AttrexSplit,
    which: AttrexSplitPart,
    indices: *mut usize,
    len: usize,
) -> AttrexStatus {
    guard(|| {
        let ids = part(&obj(split, "split")?.0, which);
        check_len(len, ids.len(), "indices")?;
        slice_mut(indices, len, "indices")?.copy_from_slice(ids);
        Ok(())
    })
}

fn train_setup<'a>(
    dataset: *const AttrexDataset,
    split: *const AttrexSplit,
    config: *const AttrexTrainConfig,
) -> Result<(&'a Dataset, &'a SplitAssignment, DifferentiableMap, TrainConfig), Failure> {
    let (ds, sp, c) = unsafe { (&obj(dataset, "dataset")?.0, &obj(split, "split")?.0, *obj(config, "config")?) };
    let map = match c.hidden_dim {
        0 => DifferentiableMap::Identity,
        h => DifferentiableMap::Hidden(HiddenLayer::random(ds.feature_dim(), h, ds.feature_dim(), c.seed)),
    };
    let tc = TrainConfig {
        learning_rate: c.learning_rate,
        epochs: c.epochs,
        margin: c.margin,
        seed: c.seed,
        weight_init_sigma: c.weight_init_sigma,
        ..TrainConfig::default()
    };
    Ok((ds, sp, map, tc))
}

/// Trains the attribute (SJE) classifier on the split's training part.
///
/// # Safety
/// All pointers must be live handles or valid structs; `model` writable.
#[no_mangle]
pub unsafe extern "C" fn attrex_sje_train(
    dataset: *const AttrexDataset,
    split: *const AttrexSplit,
    config: *const AttrexTrainConfig,
    model: *mut *mut AttrexSjeModel,
) -> AttrexStatus {
    guard(|| {
        let (ds, sp, map, tc) = train_setup(dataset, split, config)?;
        let trained = embed::train_sje(ds, sp, &map, &tc)?.model;
        let table = trained.class_table(ds.class_attributes())?.into_owned();
        let bounds = ds.feature_bounds().cloned();
        give(model, AttrexSjeModel { map, model: trained, table, bounds })
    })
}

/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn attrex_sje_free(model: *mut AttrexSjeModel) {
    free(model)
}

/// Number of attributes the model predicts.
///
/// # Safety
/// `model` must be a live handle and `len` writable.
#[no_mangle]
pub unsafe extern "C" fn attrex_sje_num_attributes(model: *const AttrexSjeModel, len: *mut usize) -> AttrexStatus {
    guard(|| {
        *out(len, "len")? = obj(model, "model")?.model.num_attributes();
        Ok(())
    })
}

/// # Safety
/// `x` must hold `x_len` doubles and `attributes` `attr_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn attrex_sje_predict_attributes(
    model: *const AttrexSjeModel,
    x: *const f64,
    x_len: usize,
    attributes: *mut f64,
    attr_len: usize,
) -> AttrexStatus {
    guard(|| {
        let m = obj(model, "model")?;
        let attrs = embed::predict_attributes(&m.map, &m.model, slice(x, x_len, "x")?)?;
        check_len(attr_len, attrs.len(), "attributes")?;
        slice_mut(attributes, attr_len, "attributes")?.copy_from_slice(&attrs);
        Ok(())
    })
}

/// # Safety
/// `x` must hold `x_len` doubles; `class` must be writable.
#[no_mangle]
pub unsafe extern "C" fn attrex_sje_predict_class(
    model: *const AttrexSjeModel,
    x: *const f64,
    x_len: usize,
    class: *mut usize,
) -> AttrexStatus {
    guard(|| {
        let m = obj(model, "model")?;
        let c = m.model.classifier(&m.table, 0.0)?.predict(&m.map, slice(x, x_len, "x")?)?;
        *out(class, "class")? = c;
        Ok(())
    })
}

#[allow(clippy::too_many_arguments)]
fn attack<C: Classifier>(
    map: &DifferentiableMap,
    clf: &C,
    bounds: Option<&FeatureBounds>,
    x: *const f64,
    len: usize,
    label: usize,
    config: &AttrexAttackConfig,
    loss: LossKind,
    perturbed: *mut f64,
) -> Result<(), Failure> {
    let x = unsafe { slice(x, len, "x")? };
    if label >= clf.num_classes() {
        return Err(invalid(format!("label {label} out of range")));
    }
    let mut cfg = AttackConfig::with_default_alpha(config.epsilon, config.steps, loss);
    if config.alpha > 0.0 {
        cfg.alpha = config.alpha;
    }
    let p = ifgsm(map, clf, x, label, &cfg, bounds)?;
    unsafe { slice_mut(perturbed, len, "perturbed")? }.copy_from_slice(&p.perturbed);
    Ok(())
}

/// Iterative signed-gradient attack on the attribute classifier. Writes the
/// perturbed input (same length as `x`) into `perturbed`.
///
/// # Safety
/// `x` and `perturbed` must hold `len` doubles; `config` must be valid.
#[no_mangle]
pub unsafe extern "C" fn attrex_sje_attack(
    model: *const AttrexSjeModel,
    x: *const f64,
    len: usize,
    label: usize,
    config: *const AttrexAttackConfig,
    perturbed: *mut f64,
) -> AttrexStatus {
    guard(|| {
        let m = obj(model, "model")?;
        let c = obj(config, "config")?;
        let clf = m.model.classifier(&m.table, c.margin)?;
        attack(&m.map, &clf, m.bounds.as_ref(), x, len, label, c, LossKind::Ranking, perturbed)
    })
}

/// Trains the softmax classifier on the split's training part.
///
/// # Safety
/// All pointers must be live handles or valid structs; `model` writable.
#[no_mangle]
pub unsafe extern "C" fn attrex_general_train(
    dataset: *const AttrexDataset,
    split: *const AttrexSplit,
    config: *const AttrexTrainConfig,
    model: *mut *mut AttrexGeneralModel,
) -> AttrexStatus {
    guard(|| {
        let (ds, sp, map, mut tc) = train_setup(dataset, split, config)?;
        tc.margin = 0.0;
        let trained = embed::train_general(ds, sp, &map, &tc)?.model;
        let bounds = ds.feature_bounds().cloned();
        give(model, AttrexGeneralModel { map, model: trained, bounds })
    })
}

/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn attrex_general_free(model: *mut AttrexGeneralModel) {
    free(model)
}

/// # Safety
/// `x` must hold `x_len` doubles; `class` must be writable.
#[no_mangle]
pub unsafe extern "C" fn attrex_general_predict_class(
    model: *const AttrexGeneralModel,
    x: *const f64,
    x_len: usize,
    class: *mut usize,
) -> AttrexStatus {
    guard(|| {
        let m = obj(model, "model")?;
        *out(class, "class")? = m.model.predict(&m.map, slice(x, x_len, "x")?)?;
        Ok(())
    })
}

/// Attack on the softmax classifier; `config.margin` is ignored.
///
/// # Safety
/// `x` and `perturbed` must hold `len` doubles; `config` must be valid.
#[no_mangle]
pub unsafe extern "C" fn attrex_general_attack(
    model: *const AttrexGeneralModel,
    x: *const f64,
    len: usize,
    label: usize,
    config: *const AttrexAttackConfig,
    perturbed: *mut f64,
) -> AttrexStatus {
    guard(|| {
        let m = obj(model, "model")?;
        let c = obj(config, "config")?;
        attack(&m.map, &m.model, m.bounds.as_ref(), x, len, label, c, LossKind::CrossEntropy, perturbed)
    })
}

/// Share of the standard model's accuracy drop recovered by the robust one.
/// Returns `NotApplicable` when the attack caused no drop.
///
/// # Safety
/// `measure` must be writable.
#[no_mangle]
pub unsafe extern "C" fn attrex_robustification_measure(
    clean_acc_standard: f64,
    adv_acc_standard: f64,
    adv_acc_robust: f64,
    measure: *mut f64,
) -> AttrexStatus {
    guard(|| {
        let dst = out(measure, "measure")?;
        for v in [clean_acc_standard, adv_acc_standard, adv_acc_robust] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(format!("accuracy {v} outside [0, 1]")));
            }
        }
        match attrex::robust::robustification_measure(clean_acc_standard, adv_acc_standard, adv_acc_robust) {
            Some(r) => {
                *dst = r;
                Ok(())
            }
            None => Err(Failure(AttrexStatus::NotApplicable, "no accuracy drop to recover".into())),
        }
    })
}
