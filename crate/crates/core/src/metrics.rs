//! Confusion matrices, accuracy, precision/recall/F1 and mask overlap scores.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::imaging::MaskImage;

/// `counts[i][j]` = samples of true class `i` predicted as `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        ConfusionMatrix {
            n_classes,
            counts: vec![vec![0; n_classes]; n_classes],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn add(&mut self, label: usize, prediction: usize) -> Result<()> {
        let n = self.n_classes;
        if label >= n || prediction >= n {
            return Err(Error::dim(format!(
                "class out of range: label {label}, prediction {prediction}, {n} classes"
            )));
        }
        self.counts[label][prediction] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes).map(|c| self.counts[c][c]).sum()
    }

    /// One-vs-rest counts for class `c`.
    pub fn outcome(&self, c: usize) -> BinaryOutcome {
        let tp = self.counts[c][c];
        let fp = (0..self.n_classes).filter(|&i| i != c).map(|i| self.counts[i][c]).sum();
        let fn_ = (0..self.n_classes).filter(|&j| j != c).map(|j| self.counts[c][j]).sum();
        BinaryOutcome {
            tp,
            fp,
            fn_,
            tn: self.total() - tp - fp - fn_,
        }
    }

    /// Number of samples whose true class is `c`.
    pub fn support(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BinaryOutcome {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

pub fn confusion_matrix(predictions: &[usize], labels: &[usize], n_classes: usize) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(Error::dim(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(n_classes);
    for (&p, &l) in predictions.iter().zip(labels) {
        cm.add(l, p)?;
    }
    Ok(cm)
}

/// Correct predictions over all predictions.
pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::UndefinedMetric("accuracy of an empty confusion matrix".into()));
    }
    Ok(cm.trace() as f64 / total as f64)
}

/// A ratio whose denominator may be zero; such values are reported as 0 and flagged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub value: f64,
    pub undefined: bool,
}

impl Score {
    fn ratio(num: f64, den: f64) -> Score {
        if den == 0.0 {
            Score {
                value: 0.0,
                undefined: true,
            }
        } else {
            Score {
                value: num / den,
                undefined: false,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassScores {
    pub precision: Score,
    pub recall: Score,
    pub f1: Score,
}

impl ClassScores {
    pub fn from_outcome(o: BinaryOutcome) -> Self {
        let precision = Score::ratio(o.tp as f64, (o.tp + o.fp) as f64);
        let recall = Score::ratio(o.tp as f64, (o.tp + o.fn_) as f64);
        let (p, r) = (precision.value, recall.value);
        let f1 = Score::ratio(2.0 * p * r, p + r);
        ClassScores {
            precision,
            recall,
            f1,
        }
    }
}

/// How per-class scores are reduced to one number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Averaging {
    /// Unweighted mean over classes.
    #[default]
    Macro,
    /// Scores from pooled TP/FP/FN counts.
    Micro,
    /// Mean over classes weighted by support.
    Weighted,
}

impl Averaging {
    pub fn as_str(self) -> &'static str {
        match self {
            Averaging::Macro => "macro",
            Averaging::Micro => "micro",
            Averaging::Weighted => "weighted",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "macro" => Some(Averaging::Macro),
            "micro" => Some(Averaging::Micro),
            "weighted" => Some(Averaging::Weighted),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionRecallF1 {
    pub per_class: Vec<ClassScores>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn precision_recall_f1(cm: &ConfusionMatrix, averaging: Averaging) -> PrecisionRecallF1 {
    let n = cm.n_classes();
    let per_class: Vec<ClassScores> = (0..n).map(|c| ClassScores::from_outcome(cm.outcome(c))).collect();
    let mean = |f: &dyn Fn(&ClassScores) -> f64, w: &dyn Fn(usize) -> f64| -> f64 {
        let total: f64 = (0..n).map(w).sum();
        if total == 0.0 {
            return 0.0;
        }
        per_class.iter().enumerate().map(|(c, s)| w(c) * f(s)).sum::<f64>() / total
    };
    let (precision, recall, f1) = match averaging {
        Averaging::Macro | Averaging::Weighted => {
            let w = |c: usize| match averaging {
                Averaging::Weighted => cm.support(c) as f64,
                _ => 1.0,
            };
            (
                mean(&|s| s.precision.value, &w),
                mean(&|s| s.recall.value, &w),
                mean(&|s| s.f1.value, &w),
            )
        }
        Averaging::Micro => {
            let pooled = (0..n).map(|c| cm.outcome(c)).fold(
                BinaryOutcome {
                    tp: 0,
                    fp: 0,
                    fn_: 0,
                    tn: 0,
                },
                |a, o| BinaryOutcome {
                    tp: a.tp + o.tp,
                    fp: a.fp + o.fp,
                    fn_: a.fn_ + o.fn_,
                    tn: a.tn + o.tn,
                },
            );
            let s = ClassScores::from_outcome(pooled);
            (s.precision.value, s.recall.value, s.f1.value)
        }
    };
    PrecisionRecallF1 {
        per_class,
        precision,
        recall,
        f1,
    }
}

/// Pixel counts behind Dice and IoU; sums over several masks give pooled scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OverlapCounts {
    pub intersection: u64,
    pub predicted: u64,
    pub truth: u64,
}

impl OverlapCounts {
    pub fn from_masks(pred: &MaskImage, truth: &MaskImage) -> Result<Self> {
        pred.same_dims(truth)?;
        Ok(Self::from_pixels(pred.pixels(), truth.pixels()))
    }

    /// Counts over binary pixel slices of equal length.
    pub fn from_pixels(pred: &[u8], truth: &[u8]) -> Self {
        let mut c = OverlapCounts::default();
        for (&p, &t) in pred.iter().zip(truth) {
            c.intersection += (p & t) as u64;
            c.predicted += p as u64;
            c.truth += t as u64;
        }
        c
    }

    pub fn merge(&mut self, other: OverlapCounts) {
        self.intersection += other.intersection;
        self.predicted += other.predicted;
        self.truth += other.truth;
    }

    /// `2|P∩T| / (|P|+|T|)`; 1 when both are empty.
    pub fn dice(&self) -> f64 {
        let den = self.predicted + self.truth;
        if den == 0 {
            1.0
        } else {
            2.0 * self.intersection as f64 / den as f64
        }
    }

    /// `|P∩T| / |P∪T|`; 1 when both are empty.
    pub fn iou(&self) -> f64 {
        let union = self.predicted + self.truth - self.intersection;
        if union == 0 {
            1.0
        } else {
            self.intersection as f64 / union as f64
        }
    }
}

pub fn dice_coefficient(pred: &MaskImage, truth: &MaskImage) -> Result<f64> {
    Ok(OverlapCounts::from_masks(pred, truth)?.dice())
}

pub fn iou(pred: &MaskImage, truth: &MaskImage) -> Result<f64> {
    Ok(OverlapCounts::from_masks(pred, truth)?.iou())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class: Vec<ClassScores>,
    pub averaging: Averaging,
    pub dice: Option<f64>,
    pub iou: Option<f64>,
}

impl MetricReport {
    pub fn from_confusion(cm: &ConfusionMatrix, averaging: Averaging) -> Result<Self> {
        let prf = precision_recall_f1(cm, averaging);
        Ok(MetricReport {
            accuracy: accuracy(cm)?,
            precision: prf.precision,
            recall: prf.recall,
            f1: prf.f1,
            per_class: prf.per_class,
            averaging,
            dice: None,
            iou: None,
        })
    }

    pub fn with_overlap(mut self, overlap: OverlapCounts) -> Self {
        self.dice = Some(overlap.dice());
        self.iou = Some(overlap.iou());
        self
    }

    /// Column-wise `self - other` (the train/validation gap).
    pub fn difference(&self, other: &MetricReport) -> MetricReport {
        let sub = |a: Score, b: Score| Score {
            value: a.value - b.value,
            undefined: a.undefined || b.undefined,
        };
        let opt = |a: Option<f64>, b: Option<f64>| a.zip(b).map(|(x, y)| x - y);
        MetricReport {
            accuracy: self.accuracy - other.accuracy,
            precision: self.precision - other.precision,
            recall: self.recall - other.recall,
            f1: self.f1 - other.f1,
            per_class: self
                .per_class
                .iter()
                .zip(&other.per_class)
                .map(|(a, b)| ClassScores {
                    precision: sub(a.precision, b.precision),
                    recall: sub(a.recall, b.recall),
                    f1: sub(a.f1, b.f1),
                })
                .collect(),
            averaging: self.averaging,
            dice: opt(self.dice, other.dice),
            iou: opt(self.iou, other.iou),
        }
    }

    pub fn csv_header(n_classes: usize) -> String {
        let mut h = String::from("split,accuracy,precision,recall,f1");
        for c in 0..n_classes {
            write!(h, ",precision_{c},recall_{c},f1_{c}").unwrap();
        }
        h.push_str(",dice,iou");
        h
    }

    pub fn csv_row(&self, split: &str) -> String {
        let mut r = format!(
            "{split},{},{},{},{}",
            self.accuracy, self.precision, self.recall, self.f1
        );
        for s in &self.per_class {
            write!(r, ",{},{},{}", s.precision.value, s.recall.value, s.f1.value).unwrap();
        }
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        write!(r, ",{},{}", opt(self.dice), opt(self.iou)).unwrap();
        r
    }
}

/// Text table with training, validation and difference columns for accuracy and F1 (in %).
pub fn comparison_table(model: &str, train: &MetricReport, val: &MetricReport, params: usize) -> String {
    let pct = |v: f64| format!("{:.2}", 100.0 * v);
    let mut out = String::new();
    writeln!(
        out,
        "{:<12} | {:^26} | {:^26} | {:>10}",
        "Model", "Accuracy (%)", "F1-Score (%)", "Parameters"
    )
    .unwrap();
    writeln!(
        out,
        "{:<12} | {:>8} {:>8} {:>8} | {:>8} {:>8} {:>8} | {:>10}",
        "", "Training", "Valid.", "Diff.", "Training", "Valid.", "Diff.", ""
    )
    .unwrap();
    writeln!(
        out,
        "{:<12} | {:>8} {:>8} {:>8} | {:>8} {:>8} {:>8} | {:>10}",
        model,
        pct(train.accuracy),
        pct(val.accuracy),
        pct(train.accuracy - val.accuracy),
        pct(train.f1),
        pct(val.f1),
        pct(train.f1 - val.f1),
        params
    )
    .unwrap();
    out
}
