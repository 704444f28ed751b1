//! Confusion matrices, IoU, group means, IoU spread and the class-pair
//! loss gap with its upper bound.

use std::fmt::Write as _;

use crate::class_stats::GroupSplit;
use crate::error::{Error, Result};

/// Pixel counts indexed `[ground truth][prediction]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn update(&mut self, pred: &[u8], label: &[u8]) -> Result<()> {
        if pred.len() != label.len() {
            return Err(Error::shape(
                "confusion_update",
                format!("{} predictions for {} labels", pred.len(), label.len()),
            ));
        }
        for (&p, &g) in pred.iter().zip(label) {
            let (p, g) = (p as usize, g as usize);
            if p >= self.classes || g >= self.classes {
                return Err(Error::Index {
                    what: "class id",
                    index: p.max(g),
                    bound: self.classes,
                });
            }
            self.counts[g * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape("confusion merge", "class counts differ"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    fn truth_total(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.get(c, p)).sum()
    }

    fn pred_total(&self, c: usize) -> u64 {
        (0..self.classes).map(|g| self.get(g, c)).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IouReport {
    /// `None` for classes absent from the ground truth.
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
    pub miou_majority: f64,
    pub miou_minority: f64,
    /// Population standard deviation over present classes.
    pub iou_std: f64,
}

impl IouReport {
    pub fn present(&self) -> Vec<usize> {
        (0..self.iou.len()).filter(|&c| self.iou[c].is_some()).collect()
    }
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        f64::NAN
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// `iou(c) = tp / (tp + fp + fn)` over classes present in the ground truth.
pub fn iou_report(cm: &ConfusionMatrix, groups: &GroupSplit) -> Result<IouReport> {
    if cm.total() == 0 {
        return Err(Error::contract("IoU of an empty confusion matrix"));
    }
    let iou: Vec<Option<f64>> = (0..cm.classes)
        .map(|c| {
            let truth = cm.truth_total(c);
            if truth == 0 {
                return None;
            }
            let tp = cm.get(c, c);
            let union = truth + cm.pred_total(c) - tp;
            Some(tp as f64 / union as f64)
        })
        .collect();
    let pick = |keep: &dyn Fn(usize) -> bool| -> Vec<f64> {
        (0..cm.classes)
            .filter(|&c| keep(c))
            .filter_map(|c| iou[c])
            .collect()
    };
    let all = pick(&|_| true);
    let miou = mean(&all);
    let iou_std = (all.iter().map(|v| (v - miou).powi(2)).sum::<f64>() / all.len() as f64).sqrt();
    Ok(IouReport {
        miou,
        miou_majority: mean(&pick(&|c| groups.is_majority(c))),
        miou_minority: mean(&pick(&|c| !groups.is_majority(c))),
        iou_std,
        iou,
    })
}

/// Accumulates per-pixel losses by ground-truth class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassLossAccumulator {
    sum: Vec<f64>,
    count: Vec<u64>,
}

impl ClassLossAccumulator {
    pub fn new(classes: usize) -> Self {
        Self {
            sum: vec![0.0; classes],
            count: vec![0; classes],
        }
    }

    pub fn add(&mut self, class: usize, loss: f64) {
        self.sum[class] += loss;
        self.count[class] += 1;
    }

    /// Mean loss per class; `None` where no pixel of that class was seen.
    pub fn means(&self) -> Vec<Option<f64>> {
        self.sum
            .iter()
            .zip(&self.count)
            .map(|(&s, &n)| (n > 0).then(|| s / n as f64))
            .collect()
    }
}

/// `Σ_{i,j} |E_i − E_j|` over ordered class pairs.
pub fn fairness_gap(losses: &[f64]) -> Result<f64> {
    if losses.len() < 2 {
        return Err(Error::contract("fairness gap needs at least two classes"));
    }
    let mut gap = 0.0;
    for a in losses {
        for b in losses {
            gap += (a - b).abs();
        }
    }
    Ok(gap)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundCheck {
    pub gap: f64,
    pub bound: f64,
    pub holds: bool,
}

/// Compares the gap with `Σ_{i,j} (E_i + E_j)` over ordered pairs.
pub fn bound_check(losses: &[f64]) -> Result<BoundCheck> {
    if let Some(bad) = losses.iter().find(|&&e| !(e >= 0.0)) {
        return Err(Error::contract(format!("class loss {bad} is not nonnegative")));
    }
    let gap = fairness_gap(losses)?;
    let mut bound = 0.0;
    for a in losses {
        for b in losses {
            bound += a + b;
        }
    }
    Ok(BoundCheck {
        gap,
        bound,
        holds: gap <= bound + 1e-9,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FairnessReport {
    pub iou: IouReport,
    pub mean_loss: Vec<Option<f64>>,
    pub fairness_gap: f64,
    pub bound: BoundCheck,
}

pub fn fairness_report(
    cm: &ConfusionMatrix,
    losses: &ClassLossAccumulator,
    groups: &GroupSplit,
) -> Result<FairnessReport> {
    let iou = iou_report(cm, groups)?;
    let mean_loss = losses.means();
    let present: Vec<f64> = iou.present().iter().filter_map(|&c| mean_loss[c]).collect();
    let bound = bound_check(&present)?;
    Ok(FairnessReport {
        fairness_gap: bound.gap,
        bound,
        mean_loss,
        iou,
    })
}

/// One row per present class: `class_id,group,iou,mean_loss`.
pub fn report_csv(report: &FairnessReport, groups: &GroupSplit) -> String {
    let mut out = String::from("class_id,group,iou,mean_loss\n");
    for c in report.iou.present() {
        writeln!(
            out,
            "{c},{},{},{}",
            groups.label(c),
            report.iou.iou[c].unwrap_or(f64::NAN),
            report.mean_loss[c].unwrap_or(f64::NAN)
        )
        .unwrap();
    }
    out
}
