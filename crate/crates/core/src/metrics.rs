//! Confusion matrix, per-class IoU and the metrics report.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossTerms;
use crate::quantizer::CodeUsageStats;

/// `C × C` counts, rows are ground truth and columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_classes * num_classes {
            return Err(Error::Data(format!("{} counts do not form a {num_classes}x{num_classes} matrix", counts.len())));
        }
        Ok(Self { num_classes, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one image. `width` is only used to name offending pixels.
    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8], width: usize, ignore: u8) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Data(format!("prediction has {} pixels, ground truth {}", pred.len(), gt.len())));
        }
        let c = self.num_classes;
        let w = width.max(1);
        // Validate first so a bad pixel leaves the matrix untouched.
        for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
            if g == ignore {
                continue;
            }
            if g as usize >= c || p as usize >= c {
                return Err(Error::Data(format!(
                    "pixel ({}, {}): ground truth {g} / prediction {p} outside [0, {c})",
                    i / w,
                    i % w
                )));
            }
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if g != ignore {
                self.counts[g as usize * c + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Data(format!(
                "cannot merge {}-class and {}-class confusion matrices",
                self.num_classes, other.num_classes
            )));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IouReport {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

/// `IoU_c = tp / (row + col - tp)`; classes with a zero denominator are
/// excluded from the mean.
pub fn iou_report(cm: &ConfusionMatrix) -> Result<IouReport> {
    if cm.total() == 0 {
        return Err(Error::Data("confusion matrix is empty; nothing was evaluated".into()));
    }
    let c = cm.num_classes;
    let per_class: Vec<Option<f64>> = (0..c)
        .map(|k| {
            let tp = cm.get(k, k);
            let row: u64 = (0..c).map(|j| cm.get(k, j)).sum();
            let col: u64 = (0..c).map(|j| cm.get(j, k)).sum();
            let denom = row + col - tp;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let miou = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok(IouReport { per_class, miou })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub name: String,
    pub iou: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodebookSummary {
    pub usage: f64,
    pub perplexity: f64,
}

impl From<&CodeUsageStats> for CodebookSummary {
    fn from(s: &CodeUsageStats) -> Self {
        Self { usage: s.usage_fraction, perplexity: s.perplexity }
    }
}

/// Serialized as `metrics.json`. `codebook` is null for runs without a quantizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "mIoU")]
    pub miou: f64,
    pub per_class: Vec<ClassIou>,
    pub codebook: Option<CodebookSummary>,
    pub loss: LossTerms,
}

impl MetricsReport {
    pub fn new(iou: &IouReport, names: &[String], codebook: Option<CodebookSummary>, loss: LossTerms) -> Self {
        let per_class = iou
            .per_class
            .iter()
            .enumerate()
            .map(|(i, &v)| ClassIou { name: names.get(i).cloned().unwrap_or_else(|| format!("class{i}")), iou: v })
            .collect();
        Self { miou: iou.miou, per_class, codebook, loss }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
