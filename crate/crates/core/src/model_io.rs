//! Plain-text model files.
//!
//! ```text
//! attrex-model 1
//! kind sje
//! normalize_class_attributes false
//! prediction_rule compatibility-argmax
//! matrix w 16 8
//! <16 lines of 8 space-separated values>
//! ```
//!
//! The first line is the format tag, then `kind`, then `key value` metadata
//! lines, then one or more `matrix <name> <rows> <cols>` blocks holding the
//! values row-major, one matrix row per line. Values are printed as the
//! shortest decimal that reads back to the same 64-bit float, so a
//! save/load cycle is exact. Kinds: `sje` (matrix `w`), `general` (matrices
//! `v` and `bias`, the latter 1×C), `map-identity` (no matrices) and
//! `map-hidden` (matrices `w1`, `b1` as 1×h, `w2`).

use std::fs;
use std::path::Path;

use crate::embed::{DifferentiableMap, EmbeddingModel, GeneralClassifier, HiddenLayer, PredictionRule};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

const MAGIC: &str = "attrex-model 1";

struct ModelFile {
    kind: String,
    meta: Vec<(String, String)>,
    matrices: Vec<(String, Matrix)>,
}

impl ModelFile {
    fn render(&self) -> String {
        let mut out = format!("{MAGIC}\nkind {}\n", self.kind);
        for (k, v) in &self.meta {
            out.push_str(&format!("{k} {v}\n"));
        }
        for (name, m) in &self.matrices {
            out.push_str(&format!("matrix {name} {} {}\n", m.rows(), m.cols()));
            for r in 0..m.rows() {
                let row: Vec<String> = m.row(r).iter().map(|v| format!("{v}")).collect();
                out.push_str(&row.join(" "));
                out.push('\n');
            }
        }
        out
    }

    fn parse(text: &str, origin: &Path) -> Result<Self> {
        let bad = |line: usize, message: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
        match lines.next() {
            Some((_, l)) if l == MAGIC => {}
            _ => return Err(bad(1, format!("expected {MAGIC:?}"))),
        }
        let kind = match lines.next() {
            Some((_, l)) if l.starts_with("kind ") => l[5..].trim().to_string(),
            _ => return Err(bad(2, "expected `kind <name>`".into())),
        };
        let mut meta = Vec::new();
        let mut matrices = Vec::new();
        while let Some((n, line)) = lines.next() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap_or_default();
            if key != "matrix" {
                let value = parts.next().ok_or_else(|| bad(n, format!("missing value for {key}")))?;
                meta.push((key.to_string(), value.to_string()));
                continue;
            }
            let name = parts.next().ok_or_else(|| bad(n, "missing matrix name".into()))?;
            let dims: Vec<usize> = parts
                .map(|p| p.parse::<usize>().map_err(|_| bad(n, format!("bad dimension {p:?}"))))
                .collect::<Result<_>>()?;
            if dims.len() != 2 {
                return Err(bad(n, "matrix header needs rows and cols".into()));
            }
            let (rows, cols) = (dims[0], dims[1]);
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let (n, line) = lines.next().ok_or_else(|| bad(n, format!("matrix {name} truncated")))?;
                let values: Vec<f64> = line
                    .split_whitespace()
                    .map(|v| {
                        let x: f64 = v.parse().map_err(|_| bad(n, format!("bad value {v:?}")))?;
                        if x.is_finite() {
                            Ok(x)
                        } else {
                            Err(Error::NonFiniteValue {
                                path: origin.to_path_buf(),
                                line: n,
                            })
                        }
                    })
                    .collect::<Result<_>>()?;
                if values.len() != cols {
                    return Err(Error::DimensionMismatch {
                        path: origin.to_path_buf(),
                        line: n,
                        expected: cols,
                        found: values.len(),
                    });
                }
                data.extend(values);
            }
            matrices.push((name.to_string(), Matrix::from_vec(rows, cols, data)?));
        }
        Ok(ModelFile { kind, meta, matrices })
    }

    fn expect_kind(&self, kind: &str, origin: &Path) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                line: 2,
                message: format!("expected kind {kind}, found {}", self.kind),
            });
        }
        Ok(())
    }

    fn meta(&self, key: &str, origin: &Path) -> Result<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Parse {
                path: origin.to_path_buf(),
                line: 0,
                message: format!("missing {key}"),
            })
    }

    fn take(&mut self, name: &str, origin: &Path) -> Result<Matrix> {
        let pos = self.matrices.iter().position(|(n, _)| n == name).ok_or_else(|| Error::Parse {
            path: origin.to_path_buf(),
            line: 0,
            message: format!("missing matrix {name}"),
        })?;
        Ok(self.matrices.remove(pos).1)
    }
}

fn row_vector(v: &[f64]) -> Matrix {
    Matrix::from_vec(1, v.len(), v.to_vec()).expect("row vector")
}

fn vector_of(m: Matrix, name: &str, origin: &Path) -> Result<Vec<f64>> {
    if m.rows() != 1 {
        return Err(Error::Parse {
            path: origin.to_path_buf(),
            line: 0,
            message: format!("{name} must be a 1-row matrix"),
        });
    }
    Ok(m.as_slice().to_vec())
}

pub fn embedding_model_to_string(model: &EmbeddingModel) -> String {
    ModelFile {
        kind: "sje".into(),
        meta: vec![
            (
                "normalize_class_attributes".into(),
                model.normalize_class_attributes.to_string(),
            ),
            ("prediction_rule".into(), model.prediction_rule.as_str().into()),
        ],
        matrices: vec![("w".into(), model.w.clone())],
    }
    .render()
}

pub fn embedding_model_from_str(text: &str, origin: &Path) -> Result<EmbeddingModel> {
    let mut f = ModelFile::parse(text, origin)?;
    f.expect_kind("sje", origin)?;
    let normalize = match f.meta("normalize_class_attributes", origin)? {
        "true" => true,
        "false" => false,
        other => {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                line: 0,
                message: format!("bad normalize_class_attributes {other:?}"),
            })
        }
    };
    let rule_text = f.meta("prediction_rule", origin)?;
    let rule = PredictionRule::parse(rule_text).ok_or_else(|| Error::Parse {
        path: origin.to_path_buf(),
        line: 0,
        message: format!("unknown prediction_rule {rule_text:?}"),
    })?;
    EmbeddingModel::new(f.take("w", origin)?, normalize, rule)
}

pub fn general_classifier_to_string(model: &GeneralClassifier) -> String {
    ModelFile {
        kind: "general".into(),
        meta: vec![],
        matrices: vec![("v".into(), model.v.clone()), ("bias".into(), row_vector(&model.bias))],
    }
    .render()
}

pub fn general_classifier_from_str(text: &str, origin: &Path) -> Result<GeneralClassifier> {
    let mut f = ModelFile::parse(text, origin)?;
    f.expect_kind("general", origin)?;
    let v = f.take("v", origin)?;
    let bias = vector_of(f.take("bias", origin)?, "bias", origin)?;
    GeneralClassifier::new(v, bias)
}

pub fn map_to_string(map: &DifferentiableMap) -> String {
    match map {
        DifferentiableMap::Identity => ModelFile {
            kind: "map-identity".into(),
            meta: vec![],
            matrices: vec![],
        },
        DifferentiableMap::Hidden(layer) => ModelFile {
            kind: "map-hidden".into(),
            meta: vec![],
            matrices: vec![
                ("w1".into(), layer.w1.clone()),
                ("b1".into(), row_vector(&layer.b1)),
                ("w2".into(), layer.w2.clone()),
            ],
        },
    }
    .render()
}

pub fn map_from_str(text: &str, origin: &Path) -> Result<DifferentiableMap> {
    let mut f = ModelFile::parse(text, origin)?;
    match f.kind.as_str() {
        "map-identity" => Ok(DifferentiableMap::Identity),
        "map-hidden" => {
            let w1 = f.take("w1", origin)?;
            let b1 = vector_of(f.take("b1", origin)?, "b1", origin)?;
            let w2 = f.take("w2", origin)?;
            Ok(DifferentiableMap::Hidden(HiddenLayer::new(w1, b1, w2)?))
        }
        other => Err(Error::Parse {
            path: origin.to_path_buf(),
            line: 2,
            message: format!("expected a map kind, found {other}"),
        }),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

pub(crate) fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn save_embedding_model(path: &Path, model: &EmbeddingModel) -> Result<()> {
    write(path, &embedding_model_to_string(model))
}

pub fn load_embedding_model(path: &Path) -> Result<EmbeddingModel> {
    embedding_model_from_str(&read(path)?, path)
}

pub fn save_general_classifier(path: &Path, model: &GeneralClassifier) -> Result<()> {
    write(path, &general_classifier_to_string(model))
}

pub fn load_general_classifier(path: &Path) -> Result<GeneralClassifier> {
    general_classifier_from_str(&read(path)?, path)
}

pub fn save_map(path: &Path, map: &DifferentiableMap) -> Result<()> {
    write(path, &map_to_string(map))
}

pub fn load_map(path: &Path) -> Result<DifferentiableMap> {
    map_from_str(&read(path)?, path)
}
