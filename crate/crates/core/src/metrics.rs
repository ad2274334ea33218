//! Per-frame error records and the EPE / D1 aggregates.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricParams {
    pub d1_abs_threshold: f64,
    pub d1_rel_threshold: f64,
}

impl Default for MetricParams {
    fn default() -> Self {
        MetricParams {
            d1_abs_threshold: 3.0,
            d1_rel_threshold: 0.05,
        }
    }
}

impl MetricParams {
    pub fn validate(&self) -> Result<()> {
        if self.d1_abs_threshold.is_nan() || self.d1_abs_threshold <= 0.0 {
            return Err(Error::config("metrics.d1_abs_threshold", "must be > 0"));
        }
        if self.d1_rel_threshold.is_nan() || self.d1_rel_threshold <= 0.0 {
            return Err(Error::config("metrics.d1_rel_threshold", "must be > 0"));
        }
        Ok(())
    }

    /// A prediction is a D1 outlier when its error exceeds both the absolute
    /// and the relative threshold.
    pub fn is_outlier(&self, epe: f64, target: f64) -> bool {
        epe > self.d1_abs_threshold && epe > self.d1_rel_threshold * target.abs()
    }
}

/// One evaluated frame. Always measured with the weights held before the
/// frame's own update.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub index: usize,
    pub domain: Arc<str>,
    pub prediction: f64,
    pub target: f64,
    pub epe: f64,
    pub d1: bool,
    /// Weight version used for the prediction: the server round of the last
    /// applied dispatch for listeners, the number of local updates otherwise.
    pub round: u64,
}

impl FrameRecord {
    pub fn new(
        index: usize,
        domain: Arc<str>,
        prediction: f64,
        target: f64,
        round: u64,
        params: &MetricParams,
    ) -> Self {
        let epe = (prediction - target).abs();
        FrameRecord {
            index,
            domain,
            prediction,
            target,
            epe,
            d1: params.is_outlier(epe, target),
            round,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DomainMetrics {
    pub epe: f64,
    pub d1_percent: f64,
    pub frames: usize,
}

fn aggregate<'a>(records: impl Iterator<Item = &'a FrameRecord>, params: &MetricParams) -> DomainMetrics {
    let mut n = 0usize;
    let mut sum = 0.0;
    let mut outliers = 0usize;
    for r in records {
        n += 1;
        sum += r.epe;
        if params.is_outlier(r.epe, r.target) {
            outliers += 1;
        }
    }
    DomainMetrics {
        epe: sum / n as f64,
        d1_percent: 100.0 * outliers as f64 / n as f64,
        frames: n,
    }
}

/// Mean EPE and D1 % per domain, in first-appearance order of the domains.
/// The D1 flag is recomputed from `params`, so thresholds can be varied after
/// the run.
pub fn compute_metrics(records: &[FrameRecord], params: &MetricParams) -> Result<Vec<(Arc<str>, DomainMetrics)>> {
    if records.is_empty() {
        return Err(Error::EmptyGroup("no frame records".into()));
    }
    let mut order: Vec<Arc<str>> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&FrameRecord>> = BTreeMap::new();
    for r in records {
        let entry = groups.entry(&r.domain).or_default();
        if entry.is_empty() {
            order.push(r.domain.clone());
        }
        entry.push(r);
    }
    Ok(order
        .into_iter()
        .map(|d| {
            let m = aggregate(groups[&*d].iter().copied(), params);
            (d, m)
        })
        .collect())
}

pub fn overall_metrics(records: &[FrameRecord], params: &MetricParams) -> Result<DomainMetrics> {
    if records.is_empty() {
        return Err(Error::EmptyGroup("no frame records".into()));
    }
    Ok(aggregate(records.iter(), params))
}
