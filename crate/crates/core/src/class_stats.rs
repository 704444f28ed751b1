//! Class pixel distributions, fairness weights and majority/minority groups.

use std::fmt::Write as _;

use crate::data::{pixel_class_histogram, DatasetPack};
use crate::error::{Error, Result};

pub const DEFAULT_SMOOTHING: f64 = 1.0;
pub const DEFAULT_GROUP_THRESHOLD: f64 = 0.05;

/// Smoothed empirical pixel frequencies of a labelled dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDistribution {
    pub counts: Vec<u64>,
    pub p: Vec<f64>,
    pub eps: f64,
}

impl ClassDistribution {
    /// `p(c) = (count(c) + eps) / (total + C·eps)`.
    pub fn from_counts(counts: &[u64], eps: f64) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::contract("class distribution needs at least one class"));
        }
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(Error::contract(format!("smoothing eps {eps} must be nonnegative")));
        }
        let total: u64 = counts.iter().sum();
        let denom = total as f64 + counts.len() as f64 * eps;
        if denom <= 0.0 {
            return Err(Error::contract("empty dataset and zero smoothing"));
        }
        let p = counts.iter().map(|&n| (n as f64 + eps) / denom).collect();
        Ok(Self {
            counts: counts.to_vec(),
            p,
            eps,
        })
    }

    pub fn uniform(classes: usize) -> Self {
        Self {
            counts: vec![1; classes],
            p: vec![1.0 / classes as f64; classes],
            eps: 0.0,
        }
    }

    pub fn classes(&self) -> usize {
        self.p.len()
    }
}

pub fn estimate_distribution(pack: &DatasetPack, eps: f64) -> Result<ClassDistribution> {
    if pack.is_empty() {
        return Err(Error::contract("cannot estimate a distribution from an empty pack"));
    }
    ClassDistribution::from_counts(&pixel_class_histogram(pack), eps)
}

/// `w(c) = p'(c) / p(c)` with the uniform ideal `p'(c) = 1/C`.
pub fn class_weights(dist: &ClassDistribution) -> Vec<f64> {
    let c = dist.classes() as f64;
    dist.p.iter().map(|&p| 1.0 / (c * p)).collect()
}

/// `ln p'(c) − ln p(c)`.
pub fn log_ratio(dist: &ClassDistribution) -> Vec<f64> {
    let ln_ideal = -(dist.classes() as f64).ln();
    dist.p.iter().map(|&p| ln_ideal - p.ln()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupSplit {
    pub threshold: f64,
    pub majority: Vec<usize>,
    pub minority: Vec<usize>,
}

impl GroupSplit {
    pub fn is_majority(&self, class: usize) -> bool {
        self.majority.contains(&class)
    }

    pub fn label(&self, class: usize) -> &'static str {
        if self.is_majority(class) {
            "majority"
        } else {
            "minority"
        }
    }

    /// True when one side of the split is empty.
    pub fn is_degenerate(&self) -> bool {
        self.majority.is_empty() || self.minority.is_empty()
    }
}

pub fn split_groups(dist: &ClassDistribution, threshold: f64) -> Result<GroupSplit> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("group threshold {threshold} outside (0, 1)")));
    }
    let (majority, minority) = (0..dist.classes()).partition(|&c| dist.p[c] >= threshold);
    Ok(GroupSplit {
        threshold,
        majority,
        minority,
    })
}

/// CSV with header `class_id,count,p,weight,log_ratio,group`.
pub fn distribution_csv(dist: &ClassDistribution, groups: &GroupSplit) -> String {
    let weights = class_weights(dist);
    let logw = log_ratio(dist);
    let mut out = String::from("class_id,count,p,weight,log_ratio,group\n");
    for c in 0..dist.classes() {
        writeln!(
            out,
            "{c},{},{},{},{},{}",
            dist.counts[c],
            dist.p[c],
            weights[c],
            logw[c],
            groups.label(c)
        )
        .unwrap();
    }
    out
}
