//! Segmentation metrics and prior-map cross-entropy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pmgm::PriorMap;
use crate::tensor::BinaryMask;

/// Default clamp for prior probabilities before taking logs.
pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Pixel counts for one class of one prediction/target pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub intersection: u64,
    pub union: u64,
    pub pred_area: u64,
    pub target_area: u64,
}

impl ConfusionCounts {
    pub fn from_masks(pred: &BinaryMask, target: &BinaryMask) -> Result<Self> {
        if pred.dims() != target.dims() {
            return Err(Error::dim("confusion counts", pred.dims(), target.dims()));
        }
        let mut c = Self::default();
        for (&p, &t) in pred.bits().iter().zip(target.bits()) {
            c.intersection += (p & t) as u64;
            c.union += (p | t) as u64;
            c.pred_area += p as u64;
            c.target_area += t as u64;
        }
        Ok(c)
    }

    /// Foreground and background counts of a pair.
    pub fn fg_bg(pred: &BinaryMask, target: &BinaryMask) -> Result<(Self, Self)> {
        Ok((
            Self::from_masks(pred, target)?,
            Self::from_masks(&pred.complement(), &target.complement())?,
        ))
    }

    /// IoU of the counts; 1.0 when both masks are empty.
    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            intersection: self.intersection + o.intersection,
            union: self.union + o.union,
            pred_area: self.pred_area + o.pred_area,
            target_area: self.target_area + o.target_area,
        }
    }
}

pub fn iou(pred: &BinaryMask, target: &BinaryMask) -> Result<f64> {
    Ok(ConfusionCounts::from_masks(pred, target)?.iou())
}

/// Foreground-background IoU: summed intersections over summed unions, with
/// foreground and background each counted as a class, across all pairs.
pub fn fb_iou(pairs: &[(&BinaryMask, &BinaryMask)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Config("FB-IoU needs at least one episode".into()));
    }
    let mut total = ConfusionCounts::default();
    for (pred, target) in pairs {
        let (fg, bg) = ConfusionCounts::fg_bg(pred, target)?;
        total = total + fg + bg;
    }
    Ok(total.iou())
}

/// Mean over classes of the per-class foreground IoU, where each class pools
/// intersections and unions over its episodes.
pub fn miou(records: &[(u32, &BinaryMask, &BinaryMask)]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Config("mIoU needs at least one episode".into()));
    }
    let mut per_class: BTreeMap<u32, ConfusionCounts> = BTreeMap::new();
    for &(class, pred, target) in records {
        let c = ConfusionCounts::from_masks(pred, target)?;
        let e = per_class.entry(class).or_default();
        *e = *e + c;
    }
    Ok(per_class.values().map(|c| c.iou()).sum::<f64>() / per_class.len() as f64)
}

/// Binary cross-entropy between a prior and a target mask (natural log),
/// with the prior clamped to `[epsilon, 1 - epsilon]`.
pub fn prior_cross_entropy(prior: &PriorMap, target: &BinaryMask, epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon < 0.5) {
        return Err(Error::Config(format!("epsilon {epsilon} must lie in (0, 0.5)")));
    }
    if prior.dims() != target.dims() {
        return Err(Error::dim("prior_cross_entropy", prior.dims(), target.dims()));
    }
    let sum: f64 = prior
        .values()
        .iter()
        .zip(target.bits())
        .map(|(&p, &y)| {
            let p = (p as f64).clamp(epsilon, 1.0 - epsilon);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(sum / target.len() as f64)
}

/// Per-episode inputs to [`aggregate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub class_id: u32,
    pub foreground: ConfusionCounts,
    pub background: ConfusionCounts,
    pub prior_ce: f64,
}

impl EpisodeRecord {
    pub fn new(
        class_id: u32,
        pred: &BinaryMask,
        target: &BinaryMask,
        prior: &PriorMap,
        epsilon: f64,
    ) -> Result<Self> {
        let (foreground, background) = ConfusionCounts::fg_bg(pred, target)?;
        Ok(Self {
            class_id,
            foreground,
            background,
            prior_ce: prior_cross_entropy(prior, target, epsilon)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub miou: f64,
    pub fb_iou: f64,
    pub prior_ce_mean: f64,
    pub prior_ce_std: f64,
    pub episode_count: usize,
}

impl MetricSummary {
    pub const CSV_HEADER: &'static str = "fold,miou,fb_iou,ce_mean,ce_std,n";

    pub fn csv_row(&self, fold: u32) -> String {
        format!(
            "{fold},{:.6},{:.6},{:.6},{:.6},{}",
            self.miou, self.fb_iou, self.prior_ce_mean, self.prior_ce_std, self.episode_count
        )
    }
}

/// Means over episodes, population standard deviation for the CE.
/// Summation runs in record order.
pub fn aggregate(records: &[EpisodeRecord]) -> Result<MetricSummary> {
    if records.is_empty() {
        return Err(Error::Config("cannot aggregate zero episodes".into()));
    }
    let n = records.len() as f64;

    let mut per_class: BTreeMap<u32, ConfusionCounts> = BTreeMap::new();
    let mut fb = ConfusionCounts::default();
    for r in records {
        let e = per_class.entry(r.class_id).or_default();
        *e = *e + r.foreground;
        fb = fb + r.foreground + r.background;
    }
    let miou = per_class.values().map(|c| c.iou()).sum::<f64>() / per_class.len() as f64;

    let mean = records.iter().map(|r| r.prior_ce).sum::<f64>() / n;
    let var = records
        .iter()
        .map(|r| (r.prior_ce - mean).powi(2))
        .sum::<f64>()
        / n;
    Ok(MetricSummary {
        miou,
        fb_iou: fb.iou(),
        prior_ce_mean: mean,
        prior_ce_std: var.sqrt(),
        episode_count: records.len(),
    })
}
