//! Confusion-matrix evaluation: overall accuracy, per-class IoU, mIoU.

use crate::error::{Error, Result};

/// Row = ground truth, column = prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.classes + pred] += 1;
    }

    pub fn at(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.at(c, c)).sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.at(c, p)).sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|t| self.at(t, c)).sum()
    }
}

/// How classes absent from both truth and prediction enter the mean IoU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MissingClassMode {
    /// Skip 0/0 classes (benchmark convention).
    Exclude,
    /// Count them as zero IoU.
    CountAsZero,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub oa: f64,
    /// None for classes absent from both truth and prediction.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub confusion: ConfusionMatrix,
}

pub fn evaluate(pred: &[usize], truth: &[usize], classes: usize) -> Result<Evaluation> {
    evaluate_with_mode(pred, truth, classes, MissingClassMode::Exclude)
}

pub fn evaluate_with_mode(
    pred: &[usize],
    truth: &[usize],
    classes: usize,
    missing: MissingClassMode,
) -> Result<Evaluation> {
    if pred.len() != truth.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} truth labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Contract("nothing to evaluate".into()));
    }
    let mut confusion = ConfusionMatrix::new(classes);
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= classes || t >= classes {
            return Err(Error::Validation(format!(
                "label out of range for {classes} classes: pred {p}, truth {t}"
            )));
        }
        confusion.add(t, p);
    }
    let oa = confusion.trace() as f64 / confusion.total() as f64;
    let mut per_class_iou = Vec::with_capacity(classes);
    let mut sum = 0.0;
    let mut included = 0usize;
    for c in 0..classes {
        let inter = confusion.at(c, c);
        let union = confusion.row_sum(c) + confusion.col_sum(c) - inter;
        if union == 0 {
            match missing {
                MissingClassMode::Exclude => per_class_iou.push(None),
                MissingClassMode::CountAsZero => {
                    per_class_iou.push(Some(0.0));
                    included += 1;
                }
            }
        } else {
            let iou = inter as f64 / union as f64;
            per_class_iou.push(Some(iou));
            sum += iou;
            included += 1;
        }
    }
    let miou = if included == 0 {
        0.0
    } else {
        sum / included as f64
    };
    Ok(Evaluation {
        oa,
        per_class_iou,
        miou,
        confusion,
    })
}

impl Evaluation {
    /// One record per class plus OA and mIoU.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,iou\n");
        for (c, iou) in self.per_class_iou.iter().enumerate() {
            match iou {
                Some(v) => out.push_str(&format!("{c},{v}\n")),
                None => out.push_str(&format!("{c},absent\n")),
            }
        }
        out.push_str(&format!("oa,{}\n", self.oa));
        out.push_str(&format!("miou,{}\n", self.miou));
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<8} {:>10}\n", "class", "IoU"));
        for (c, iou) in self.per_class_iou.iter().enumerate() {
            match iou {
                Some(v) => out.push_str(&format!("{:<8} {:>10.4}\n", c, v)),
                None => out.push_str(&format!("{:<8} {:>10}\n", c, "absent")),
            }
        }
        out.push_str(&format!("{:<8} {:>10.4}\n", "OA", self.oa));
        out.push_str(&format!("{:<8} {:>10.4}\n", "mIoU", self.miou));
        out
    }
}

/// Brute-force IoU over explicit index sets; `evaluate` is checked
/// against this in tests.
pub fn set_based_iou(pred: &[usize], truth: &[usize], class: usize) -> Option<f64> {
    let pred_set: std::collections::HashSet<usize> = pred
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == class)
        .map(|(i, _)| i)
        .collect();
    let truth_set: std::collections::HashSet<usize> = truth
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == class)
        .map(|(i, _)| i)
        .collect();
    let inter = pred_set.intersection(&truth_set).count();
    let union = pred_set.union(&truth_set).count();
    if union == 0 {
        None
    } else {
        Some(inter as f64 / union as f64)
    }
}
