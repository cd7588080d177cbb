use std::fmt::Write as _;

use crate::cloud::{Label, IGNORE};
use crate::error::{Error, Result};

/// Counts of (ground truth, prediction) pairs; rows are ground truth.
#[derive(Clone, Debug, PartialEq, Eq)]
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

    /// Builds a matrix from row-major counts.
    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::shape("confusion", format!("{} counts for {classes} classes", counts.len())));
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    /// Adds one pair per point. Points whose truth or prediction is
    /// [`IGNORE`] are skipped; the number skipped is returned.
    pub fn accumulate(&mut self, truth: &[Label], pred: &[Label]) -> Result<usize> {
        if truth.len() != pred.len() {
            return Err(Error::LabelCount {
                expected: truth.len(),
                actual: pred.len(),
            });
        }
        let mut skipped = 0;
        for (&t, &p) in truth.iter().zip(pred) {
            if t == IGNORE || p == IGNORE {
                skipped += 1;
                continue;
            }
            let (t, p) = (t as usize, p as usize);
            if t >= self.classes || p >= self.classes {
                return Err(Error::Config(format!(
                    "label {} outside the {} evaluated classes",
                    t.max(p),
                    self.classes
                )));
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(skipped)
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape("confusion", "cannot merge matrices of different class counts"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn true_positives(&self, class: usize) -> u64 {
        self.get(class, class)
    }

    pub fn false_positives(&self, class: usize) -> u64 {
        (0..self.classes).filter(|&t| t != class).map(|t| self.get(t, class)).sum()
    }

    pub fn false_negatives(&self, class: usize) -> u64 {
        (0..self.classes).filter(|&p| p != class).map(|p| self.get(class, p)).sum()
    }

    /// Fraction of counted points on the diagonal.
    pub fn accuracy(&self) -> f64 {
        let diag: u64 = (0..self.classes).map(|c| self.get(c, c)).sum();
        diag as f64 / self.total().max(1) as f64
    }
}

/// `TP / (TP + FP + FN)` per class; `None` where the denominator is zero.
pub fn iou_per_class(cm: &ConfusionMatrix) -> Vec<Option<f64>> {
    (0..cm.classes())
        .map(|c| {
            let tp = cm.true_positives(c);
            let denom = tp + cm.false_positives(c) + cm.false_negatives(c);
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect()
}

/// Mean IoU over the classes that have a non-zero denominator.
pub fn miou(cm: &ConfusionMatrix) -> Result<f64> {
    let present: Vec<f64> = iou_per_class(cm).into_iter().flatten().collect();
    if present.is_empty() {
        return Err(Error::NoClassPresent);
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// Per-class table plus the mean.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub confusion: ConfusionMatrix,
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
}

impl MetricsReport {
    pub fn new(confusion: ConfusionMatrix) -> Result<Self> {
        let iou = iou_per_class(&confusion);
        let miou = miou(&confusion)?;
        Ok(MetricsReport { confusion, iou, miou })
    }

    /// `class,tp,fp,fn,iou` rows then a `miou,<value>` line. Absent classes
    /// have an empty IoU field.
    pub fn to_csv(&self) -> String {
        let cm = &self.confusion;
        let mut s = String::from("class,tp,fp,fn,iou\n");
        for (c, iou) in self.iou.iter().enumerate() {
            let iou = iou.map_or(String::new(), |v| format!("{v:.6}"));
            let _ = writeln!(
                s,
                "{c},{},{},{},{iou}",
                cm.true_positives(c),
                cm.false_positives(c),
                cm.false_negatives(c)
            );
        }
        let _ = writeln!(s, "miou,{:.6}", self.miou);
        s
    }

    /// Aligned table for terminals, with optional class names.
    pub fn to_table(&self, names: Option<&[&str]>) -> String {
        let mut s = format!("{:<16} {:>10} {:>10} {:>10} {:>8}\n", "class", "tp", "fp", "fn", "iou");
        for (c, iou) in self.iou.iter().enumerate() {
            let name = names.and_then(|n| n.get(c)).map_or_else(|| c.to_string(), |n| n.to_string());
            let iou = iou.map_or_else(|| "-".to_string(), |v| format!("{:.4}", v));
            let cm = &self.confusion;
            let _ = writeln!(
                s,
                "{name:<16} {:>10} {:>10} {:>10} {iou:>8}",
                cm.true_positives(c),
                cm.false_positives(c),
                cm.false_negatives(c)
            );
        }
        let _ = writeln!(s, "{:<16} {:>43.4}", "mIoU", self.miou);
        s
    }
}
