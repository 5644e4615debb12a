//! Classifiers that measure representation quality: an RBF-SVM over
//! feature vectors and a small residual CNN over ground images whose pooled
//! penultimate layer doubles as a 512D feature extractor.

mod cnn;
mod svm;

pub use cnn::{train_reference_cnn, CnnParams, ReferenceCnn, CNN_FEATURE_DIM};
pub use svm::{default_gamma, rbf_kernel, train_svm, BinaryMachine, SvmParams, SvmProbe};

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::checkpoint::{read_blob, write_blob};
use crate::error::{Error, Result};

/// Anything that scores feature vectors per class.
pub trait Classifier {
    fn dim(&self) -> usize;
    /// Class ids in score-column order (ascending).
    fn classes(&self) -> &[usize];
    fn scores(&self, x: ArrayView2<f64>) -> Result<Array2<f64>>;

    /// Arg-max class per row; ties go to the lowest class id.
    fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<usize>> {
        let s = self.scores(x)?;
        Ok(s.rows().into_iter().map(|r| self.classes()[argmax(r.iter().copied())]).collect())
    }
}

/// Index of the first maximum.
pub fn argmax(v: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in v.enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best.0
}

/// Fraction of positions where `pred` equals `truth`.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "prediction/label length mismatch");
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

/// Validate a training set and return its sorted distinct classes.
pub(crate) fn check_labels(x: ArrayView2<f64>, labels: &[usize]) -> Result<Vec<usize>> {
    if x.nrows() != labels.len() {
        return Err(Error::dim(format!("{} feature rows for {} labels", x.nrows(), labels.len())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::config("probe features must be finite"));
    }
    let mut classes = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::DegenerateLabels(format!("need at least two classes, got {:?}", classes)));
    }
    Ok(classes)
}

/// Accuracy of `model` on labelled features.
pub fn evaluate_probe(model: &dyn Classifier, x: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    if x.nrows() != labels.len() {
        return Err(Error::dim(format!("{} feature rows for {} labels", x.nrows(), labels.len())));
    }
    Ok(accuracy(&model.predict(x)?, labels))
}

/// A trained probe of either kind.
#[derive(Debug, Clone)]
pub enum ProbeModel {
    Svm(SvmProbe),
    Cnn(Box<ReferenceCnn>),
}

impl ProbeModel {
    pub fn kind(&self) -> &'static str {
        match self {
            ProbeModel::Svm(_) => "svm-rbf",
            ProbeModel::Cnn(_) => "reference-cnn",
        }
    }

    pub fn train_accuracy(&self) -> f64 {
        match self {
            ProbeModel::Svm(m) => m.train_accuracy,
            ProbeModel::Cnn(m) => m.train_accuracy,
        }
    }

    /// Feature-space classifier (for the CNN: its head over 512D features).
    pub fn classifier(&self) -> &dyn Classifier {
        match self {
            ProbeModel::Svm(m) => m,
            ProbeModel::Cnn(m) => m.as_ref(),
        }
    }
}

const SVM_MAGIC: &str = "groundview-svm v1";

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list(s: &str, path: &Path) -> Result<Vec<usize>> {
    s.split(',')
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: format!("bad integer list {s:?}"),
            })
        })
        .collect()
}

impl SvmProbe {
    pub fn save(&self, path: &Path, fingerprint: &str) -> Result<()> {
        let header = vec![
            ("kind".to_string(), "svm-rbf".to_string()),
            ("c".to_string(), format!("{:?}", self.c)),
            ("gamma".to_string(), format!("{:?}", self.gamma)),
            ("classes".to_string(), join(&self.classes)),
            ("dim".to_string(), self.dim.to_string()),
            ("support".to_string(), join(&self.machines.iter().map(|m| m.support.nrows()).collect::<Vec<_>>())),
            ("train_accuracy".to_string(), format!("{:?}", self.train_accuracy)),
            ("fingerprint".to_string(), fingerprint.to_string()),
        ];
        let mut vals = Vec::new();
        for m in &self.machines {
            vals.push(m.rho);
            vals.extend(m.coef.iter().copied());
            vals.extend(m.support.iter().copied());
        }
        write_blob(path, SVM_MAGIC, &header, &vals)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, vals) = read_blob(path, SVM_MAGIC)?;
        let bad = |k: &str| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("missing or invalid header field {k}"),
        };
        let num = |k: &str| -> Result<f64> { h.get(k).and_then(|v| v.parse().ok()).ok_or_else(|| bad(k)) };
        let dim = num("dim")? as usize;
        let classes = parse_list(h.get("classes").ok_or_else(|| bad("classes"))?, path)?;
        let support = parse_list(h.get("support").ok_or_else(|| bad("support"))?, path)?;
        let mut it = vals.into_iter();
        let mut machines = Vec::new();
        for nsv in support {
            let rho = it.next().ok_or_else(|| bad("payload"))?;
            let coef: Vec<f64> = it.by_ref().take(nsv).collect();
            let sv: Vec<f64> = it.by_ref().take(nsv * dim).collect();
            if coef.len() != nsv || sv.len() != nsv * dim {
                return Err(bad("payload"));
            }
            machines.push(BinaryMachine {
                support: Array2::from_shape_vec((nsv, dim), sv).expect("shape"),
                coef: coef.into(),
                rho,
            });
        }
        if it.next().is_some() {
            return Err(bad("payload"));
        }
        Ok(Self {
            classes,
            c: num("c")?,
            gamma: num("gamma")?,
            machines,
            train_accuracy: num("train_accuracy")?,
            dim,
        })
    }
}

/// One row of a feature-quality table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    /// Block of the table, e.g. `embedding-probe`, `cgan-feature-probe`,
    /// `interpolated-probe`.
    pub feature_type: String,
    pub name: String,
    pub dimension: usize,
    pub accuracy: f64,
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "feature_type,name,dimension,accuracy")?;
    for r in rows {
        writeln!(f, "{},{},{},{:.4}", r.feature_type, r.name, r.dimension, r.accuracy)?;
    }
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .skip(1)
        .map(|(n, line)| {
            let bad = || Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg: format!("bad metrics row {line:?}"),
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(MetricsRow {
                feature_type: f[0].to_string(),
                name: f[1].to_string(),
                dimension: f[2].parse().map_err(|_| bad())?,
                accuracy: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}
