//! Confusion-matrix accumulation, mIoU and mean F-score.
//!
//! Per class `c`, with `TP/FP/FN` read from the confusion matrix:
//!
//! ```text
//! IoU_c = TP / (TP + FP + FN)
//! F_c   = 2 TP / (2 TP + FP + FN) = 2 IoU_c / (1 + IoU_c)
//! ```
//!
//! Classes that appear in neither prediction nor truth have an empty union
//! and are left out of the means.

use std::fmt::Write as _;
use std::ops::AddAssign;

use crate::error::{Error, Result};
use crate::mask::Mask;

/// `counts[t][p]` = pixels of true class `t` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

/// Scores of one class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassScore {
    pub class: usize,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    /// `None` when the class has an empty union.
    pub iou: Option<f64>,
    pub fscore: Option<f64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != k * k {
            return Err(Error::Dimension(format!("{k} classes need {} counts, got {}", k * k, counts.len())));
        }
        Ok(Self { k, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one prediction/truth pair.
    pub fn accumulate(&mut self, pred: &Mask, truth: &Mask) -> Result<()> {
        if pred.height() != truth.height() || pred.width() != truth.width() {
            return Err(Error::Data(format!(
                "prediction {}x{} and truth {}x{} differ in shape",
                pred.height(),
                pred.width(),
                truth.height(),
                truth.width()
            )));
        }
        let w = truth.width();
        for (i, (&p, &t)) in pred.data().iter().zip(truth.data()).enumerate() {
            let (p, t) = (p as usize, t as usize);
            if p >= self.k || t >= self.k {
                return Err(Error::Data(format!(
                    "class out of range at pixel (y={}, x={}): truth {t}, prediction {p}, {} classes",
                    i / w,
                    i % w,
                    self.k
                )));
            }
        }
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            self.counts[t as usize * self.k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn class_score(&self, c: usize) -> ClassScore {
        let tp = self.get(c, c);
        let fn_ = (0..self.k).map(|p| self.get(c, p)).sum::<u64>() - tp;
        let fp = (0..self.k).map(|t| self.get(t, c)).sum::<u64>() - tp;
        let union = tp + fp + fn_;
        let (iou, fscore) = if union == 0 {
            (None, None)
        } else {
            (
                Some(tp as f64 / union as f64),
                Some(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64),
            )
        };
        ClassScore {
            class: c,
            tp,
            fp,
            fn_,
            iou,
            fscore,
        }
    }

    pub fn class_scores(&self) -> Vec<ClassScore> {
        (0..self.k).map(|c| self.class_score(c)).collect()
    }

    fn mean_of(&self, pick: impl Fn(&ClassScore) -> Option<f64>) -> Result<f64> {
        if self.total() == 0 {
            return Err(Error::State("no pixels accumulated".into()));
        }
        let vals: Vec<f64> = self.class_scores().iter().filter_map(pick).collect();
        Ok(vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Mean IoU over classes with a non-empty union.
    pub fn miou(&self) -> Result<f64> {
        self.mean_of(|s| s.iou)
    }

    /// Mean F-score over classes with a non-empty union.
    pub fn mfsc(&self) -> Result<f64> {
        self.mean_of(|s| s.fscore)
    }

    /// Checks `F_c == 2 IoU_c / (1 + IoU_c)` for every scored class.
    pub fn check_identity(&self, tol: f64) -> Result<()> {
        for s in self.class_scores() {
            if let (Some(iou), Some(f)) = (s.iou, s.fscore) {
                let expected = fscore_from_iou(iou);
                if (f - expected).abs() > tol {
                    return Err(Error::Numerical(format!(
                        "class {}: F-score {f} disagrees with 2 IoU / (1 + IoU) = {expected}",
                        s.class
                    )));
                }
            }
        }
        Ok(())
    }
}

impl AddAssign<&ConfusionMatrix> for ConfusionMatrix {
    fn add_assign(&mut self, rhs: &ConfusionMatrix) {
        assert_eq!(self.k, rhs.k, "merging confusion matrices of different class counts");
        self.counts.iter_mut().zip(&rhs.counts).for_each(|(a, b)| *a += b);
    }
}

pub fn fscore_from_iou(iou: f64) -> f64 {
    2.0 * iou / (1.0 + iou)
}

/// Summary of one evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Scores {
    pub miou: f64,
    pub mfsc: f64,
    /// IoU / F-score of class 1 (pothole); `None` if it never occurs.
    pub pothole_iou: Option<f64>,
    pub pothole_fsc: Option<f64>,
    pub per_class: Vec<ClassScore>,
    pub confusion: ConfusionMatrix,
}

impl Scores {
    pub const IDENTITY_TOL: f64 = 1e-12;

    pub fn from_confusion(cm: ConfusionMatrix) -> Result<Self> {
        cm.check_identity(Self::IDENTITY_TOL)?;
        let pothole = (cm.num_classes() > 1).then(|| cm.class_score(1));
        Ok(Self {
            miou: cm.miou()?,
            mfsc: cm.mfsc()?,
            pothole_iou: pothole.and_then(|s| s.iou),
            pothole_fsc: pothole.and_then(|s| s.fscore),
            per_class: cm.class_scores(),
            confusion: cm,
        })
    }
}

/// Percentage with two decimals.
pub fn percent(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

/// Markdown table with the columns `Methods | mIoU (%) | mFsc (%)`.
pub fn markdown_table(rows: &[(String, f64, f64)]) -> String {
    let mut out = String::from("| Methods | mIoU (%) | mFsc (%) |\n|---|---|---|\n");
    for (label, miou, mfsc) in rows {
        let _ = writeln!(out, "| {label} | {} | {} |", percent(*miou), percent(*mfsc));
    }
    out
}

/// Plain-text report of one evaluation.
pub fn scores_report(title: &str, s: &Scores) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# {title}\n");
    out.push_str(&markdown_table(&[("mean over classes".into(), s.miou, s.mfsc)]));
    if let (Some(i), Some(f)) = (s.pothole_iou, s.pothole_fsc) {
        let _ = writeln!(out, "| pothole class only | {} | {} |", percent(i), percent(f));
    }
    let _ = writeln!(out, "\n| class | TP | FP | FN | IoU (%) | Fsc (%) |\n|---|---|---|---|---|---|");
    for c in &s.per_class {
        let fmt = |v: Option<f64>| v.map(percent).unwrap_or_else(|| "n/a".into());
        let _ = writeln!(out, "| {} | {} | {} | {} | {} | {} |", c.class, c.tp, c.fp, c.fn_, fmt(c.iou), fmt(c.fscore));
    }
    let k = s.confusion.num_classes();
    let _ = writeln!(out, "\nconfusion matrix (rows = truth, columns = prediction):");
    for t in 0..k {
        let row: Vec<String> = (0..k).map(|p| s.confusion.get(t, p).to_string()).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
    out
}
