//! Confusion matrix, precision/recall, macro F1 and PR curves.

use std::fmt::Write as _;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Scalar, Tensor};

/// Number of evenly spaced score thresholds in a PR curve, 0 and 1 included.
pub const PR_THRESHOLDS: usize = 101;

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_rows(counts: Vec<Vec<usize>>) -> Result<Self> {
        let k = counts.len();
        if counts.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidInput(
                "confusion matrix must be square".into(),
            ));
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn from_predictions(truth: &[usize], pred: &[usize], classes: usize) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(crate::error::mismatch(
                "confusion",
                &[truth.len()],
                &[pred.len()],
            ));
        }
        let mut m = ConfusionMatrix::new(classes);
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= classes || p >= classes {
                return Err(Error::InvalidInput(format!(
                    "label pair ({t}, {p}) out of range"
                )));
            }
            m.counts[t][p] += 1;
        }
        Ok(m)
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    /// TP / predicted positives, 0 when nothing was predicted as `c`.
    pub fn precision(&self, c: usize) -> f64 {
        let col: usize = self.counts.iter().map(|r| r[c]).sum();
        if col == 0 {
            0.0
        } else {
            self.counts[c][c] as f64 / col as f64
        }
    }

    /// TP / actual positives, 0 for an absent class.
    pub fn recall(&self, c: usize) -> f64 {
        let row: usize = self.counts[c].iter().sum();
        if row == 0 {
            0.0
        } else {
            self.counts[c][c] as f64 / row as f64
        }
    }

    pub fn f1(&self, c: usize) -> f64 {
        let (p, r) = (self.precision(c), self.recall(c));
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    /// Unweighted mean of per-class F1, in percent.
    pub fn macro_f1(&self) -> f64 {
        let k = self.classes();
        if k == 0 {
            return 0.0;
        }
        100.0 * (0..k).map(|c| self.f1(c)).sum::<f64>() / k as f64
    }

    /// Each row divided by its total; rows of absent classes stay zero.
    pub fn row_normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|r| {
                let n: usize = r.iter().sum();
                r.iter()
                    .map(|&v| if n == 0 { 0.0 } else { v as f64 / n as f64 })
                    .collect()
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// One-vs-rest PR curve for scores of a single class. A sample counts as a
/// predicted positive when `score >= threshold`. With no predicted
/// positives precision is reported as 1.
pub fn pr_curve(scores: &[f64], positive: &[bool]) -> Vec<PrPoint> {
    let pos = positive.iter().filter(|&&p| p).count();
    (0..PR_THRESHOLDS)
        .map(|i| {
            let threshold = i as f64 / (PR_THRESHOLDS - 1) as f64;
            let (mut tp, mut fp) = (0usize, 0usize);
            for (&s, &p) in scores.iter().zip(positive) {
                if s >= threshold {
                    if p {
                        tp += 1;
                    } else {
                        fp += 1;
                    }
                }
            }
            PrPoint {
                threshold,
                precision: if tp + fp == 0 {
                    1.0
                } else {
                    tp as f64 / (tp + fp) as f64
                },
                recall: if pos == 0 {
                    0.0
                } else {
                    tp as f64 / pos as f64
                },
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub confusion: ConfusionMatrix,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    /// Percent.
    pub macro_f1: f64,
    pub pr_curves: Vec<Vec<PrPoint>>,
}

impl EvalReport {
    /// Build from `[n, classes]` scores and true labels; predictions are row argmaxes.
    pub fn from_scores<T: Scalar>(
        probs: &Tensor<T>,
        labels: &[usize],
        class_names: &[String],
    ) -> Result<Self> {
        let k = class_names.len();
        if probs.rank() != 2 || probs.shape()[1] != k || probs.shape()[0] != labels.len() {
            return Err(crate::error::mismatch(
                "evaluate",
                probs.shape(),
                &[labels.len(), k],
            ));
        }
        let pred = probs.argmax_rows();
        let confusion = ConfusionMatrix::from_predictions(labels, &pred, k)?;
        let scores = probs.to_f64_vec();
        let pr_curves = (0..k)
            .map(|c| {
                let s: Vec<f64> = scores.chunks(k).map(|r| r[c]).collect();
                let p: Vec<bool> = labels.iter().map(|&l| l == c).collect();
                pr_curve(&s, &p)
            })
            .collect();
        Ok(EvalReport {
            class_names: class_names.to_vec(),
            precision: (0..k).map(|c| confusion.precision(c)).collect(),
            recall: (0..k).map(|c| confusion.recall(c)).collect(),
            macro_f1: confusion.macro_f1(),
            confusion,
            pr_curves,
        })
    }

    /// Header `class,<names>`, then one row of counts per true class.
    pub fn confusion_csv(&self) -> String {
        let mut s = String::from("class");
        for n in &self.class_names {
            let _ = write!(s, ",{n}");
        }
        s.push('\n');
        for (n, row) in self.class_names.iter().zip(&self.confusion.counts) {
            s.push_str(n);
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn pr_csv(&self, class: usize) -> String {
        let mut s = String::from("threshold,precision,recall\n");
        for p in &self.pr_curves[class] {
            let _ = writeln!(s, "{:.2},{:.6},{:.6}", p.threshold, p.precision, p.recall);
        }
        s
    }
}

/// Run `model` over `data` in inference mode and score it.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    data: &LabeledDataset,
    batch: usize,
) -> Result<EvalReport> {
    if model.config.num_classes != data.num_classes() {
        return Err(crate::error::config(format!(
            "model has {} classes, data has {}",
            model.config.num_classes,
            data.num_classes()
        )));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let (x, labels) = data.batch(&idx)?;
    let probs = model.predict(&x.cast::<T>(), batch)?;
    EvalReport::from_scores(&probs, &labels, &data.class_names)
}
