//! Aggregation of detections from one or more experts.
//!
//! All suppression is class-wise: detections only compete with detections of
//! the same class in the same image. Groups are processed independently (and
//! in parallel); results are re-assembled in canonical store order.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calib::{apply_calibrators, CalibratorSet};
use crate::detections::{concat_experts, rank_cmp, Detection, DetectionStore, ExpertId, ImageId};
use crate::error::{Error, Result};
use crate::geometry::{AxisAlignedBox, BBox, GeometryKind};

pub const DEFAULT_IOU_NMS: f64 = 0.65;
pub const DEFAULT_IOU_NMS_ROTATED: f64 = 0.35;
pub const DEFAULT_SIGMA_NMS: f64 = 0.4;
pub const DEFAULT_SIGMA_SV: f64 = 0.04;
pub const DEFAULT_TOP_K: usize = 100;
pub const DEFAULT_PRUNE_AFTER_SOFT: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NmsKind {
    Standard,
    SoftLinear,
    SoftGaussian,
}

impl NmsKind {
    pub fn is_soft(self) -> bool {
        !matches!(self, NmsKind::Standard)
    }
}

/// Aggregation settings. Every field has a default, so an empty JSON object
/// is a valid configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub nms_kind: NmsKind,
    /// Suppression threshold for standard and linear Soft NMS.
    /// Unset means 0.65 for axis-aligned and 0.35 for rotated boxes.
    pub iou_nms: Option<f64>,
    pub sigma_nms: f64,
    /// Unset means on for the soft variants (Refining NMS) and off for standard NMS.
    pub score_voting: Option<bool>,
    pub sigma_sv: f64,
    /// Detections scoring below this are dropped before suppression (inclusive keep).
    pub background_threshold: f64,
    pub top_k: usize,
    /// Soft-NMS rescored detections scoring below this are dropped.
    pub prune_after_soft: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            nms_kind: NmsKind::SoftLinear,
            iou_nms: None,
            sigma_nms: DEFAULT_SIGMA_NMS,
            score_voting: None,
            sigma_sv: DEFAULT_SIGMA_SV,
            background_threshold: 0.0,
            top_k: DEFAULT_TOP_K,
            prune_after_soft: DEFAULT_PRUNE_AFTER_SOFT,
        }
    }
}

impl FusionConfig {
    pub fn standard(iou_nms: f64) -> Self {
        Self {
            nms_kind: NmsKind::Standard,
            iou_nms: Some(iou_nms),
            ..Self::default()
        }
    }

    pub fn iou_threshold(&self, kind: GeometryKind) -> f64 {
        self.iou_nms.unwrap_or(match kind {
            GeometryKind::AxisAligned => DEFAULT_IOU_NMS,
            GeometryKind::Rotated => DEFAULT_IOU_NMS_ROTATED,
        })
    }

    pub fn voting_enabled(&self) -> bool {
        self.score_voting.unwrap_or(self.nms_kind.is_soft())
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Domain(format!("fusion config: {what}")))
            }
        };
        if let Some(t) = self.iou_nms {
            check(t > 0.0 && t <= 1.0, "iou_nms must be in (0, 1]")?;
        }
        check(
            self.sigma_nms > 0.0 && self.sigma_nms.is_finite(),
            "sigma_nms must be positive",
        )?;
        check(
            self.sigma_sv > 0.0 && self.sigma_sv.is_finite(),
            "sigma_sv must be positive",
        )?;
        check(
            (0.0..=1.0).contains(&self.background_threshold),
            "background_threshold must be in [0, 1]",
        )?;
        check(
            (0.0..=1.0).contains(&self.prune_after_soft),
            "prune_after_soft must be in [0, 1]",
        )?;
        check(self.top_k > 0, "top_k must be positive")
    }
}

fn per_group(
    store: &DetectionStore,
    f: impl Fn(&[Detection]) -> Vec<Detection> + Sync,
) -> DetectionStore {
    let groups: Vec<&[Detection]> = store.groups().map(|(_, _, g)| g).collect();
    let dets = groups
        .par_iter()
        .map(|g| f(g))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    DetectionStore::from_trusted(store.kind(), dets)
}

fn take_best(pending: &mut Vec<Detection>) -> Detection {
    let idx = pending
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| rank_cmp(a, b))
        .map(|(i, _)| i)
        .expect("pending is not empty");
    pending.swap_remove(idx)
}

/// Keeps detections with `score >= threshold`.
pub fn background_removal(store: &DetectionStore, threshold: f64) -> DetectionStore {
    store.filter(|d| d.score >= threshold)
}

/// Greedy class-wise NMS: the best remaining detection survives and every
/// remaining detection with IoU ≥ `iou_thr` against it is discarded.
pub fn standard_nms(store: &DetectionStore, iou_thr: f64) -> DetectionStore {
    per_group(store, |group| {
        let mut pending = group.to_vec();
        let mut kept = Vec::new();
        while !pending.is_empty() {
            let best = take_best(&mut pending);
            pending.retain(|d| d.bbox.iou(&best.bbox) < iou_thr);
            kept.push(best);
        }
        kept
    })
}

/// Soft NMS outcome: the survivors plus every input detection with the score
/// it held when it was selected or pruned.
#[derive(Debug, Clone)]
pub struct SoftNmsOutput {
    pub survivors: DetectionStore,
    pub rescored: DetectionStore,
}

/// Class-wise Soft NMS (linear or Gaussian rescoring) with pruning.
pub fn soft_nms_with_rescored(store: &DetectionStore, cfg: &FusionConfig) -> SoftNmsOutput {
    let iou_thr = cfg.iou_threshold(store.kind());
    let (kind, sigma, prune) = (cfg.nms_kind, cfg.sigma_nms, cfg.prune_after_soft);
    let groups: Vec<&[Detection]> = store.groups().map(|(_, _, g)| g).collect();
    let results: Vec<(Vec<Detection>, Vec<Detection>)> = groups
        .par_iter()
        .map(|group| {
            let mut pending = group.to_vec();
            let mut kept = Vec::new();
            let mut all = Vec::with_capacity(group.len());
            while !pending.is_empty() {
                let best = take_best(&mut pending);
                for d in pending.iter_mut() {
                    let iou = d.bbox.iou(&best.bbox);
                    match kind {
                        NmsKind::SoftLinear if iou >= iou_thr => d.score *= 1.0 - iou,
                        NmsKind::SoftGaussian => d.score *= (-iou * iou / sigma).exp(),
                        NmsKind::SoftLinear | NmsKind::Standard => {}
                    }
                }
                // Pruning inside the loop keeps the same survivors as pruning
                // afterwards: a sub-threshold detection only ever rescales
                // detections scored even lower.
                pending.retain(|d| {
                    if d.score < prune {
                        all.push(d.clone());
                        false
                    } else {
                        true
                    }
                });
                all.push(best.clone());
                if best.score >= prune {
                    kept.push(best);
                }
            }
            (kept, all)
        })
        .collect();
    let (kept, all): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    SoftNmsOutput {
        survivors: DetectionStore::from_trusted(store.kind(), kept.into_iter().flatten().collect()),
        rescored: DetectionStore::from_trusted(store.kind(), all.into_iter().flatten().collect()),
    }
}

pub fn soft_nms(store: &DetectionStore, cfg: &FusionConfig) -> DetectionStore {
    soft_nms_with_rescored(store, cfg).survivors
}

/// Weighted average of the raw boxes overlapping `target`, weighted by
/// `score * exp(-(1 - IoU)^2 / sigma_sv)`.
fn vote_box(target: &AxisAlignedBox, pool: &[Detection], sigma_sv: f64) -> AxisAlignedBox {
    let mut total = 0.0;
    let mut mean = [0.0f64; 4];
    for raw in pool {
        let BBox::Axis(b) = &raw.bbox else { continue };
        let iou = crate::geometry::iou_aabb(target, b);
        if iou <= 0.0 {
            continue;
        }
        let w = raw.score * (-(1.0 - iou).powi(2) / sigma_sv).exp();
        if w <= 0.0 {
            continue;
        }
        // running mean: a single contributing box is reproduced bit-for-bit
        total += w;
        let frac = w / total;
        for (m, v) in mean.iter_mut().zip([b.x_min, b.y_min, b.x_max, b.y_max]) {
            *m += frac * (v - *m);
        }
    }
    if total <= 0.0 {
        return *target;
    }
    if mean == [target.x_min, target.y_min, target.x_max, target.y_max] {
        // keeps the target's serialised width and height bits too
        return *target;
    }
    AxisAlignedBox::new(mean[0], mean[1], mean[2], mean[3]).unwrap_or(*target)
}

/// Refines each survivor's box from the same-image, same-class boxes of `raw`.
/// Scores are untouched; rotated boxes are returned as they are.
pub fn score_voting(
    survivors: &DetectionStore,
    raw: &DetectionStore,
    sigma_sv: f64,
) -> DetectionStore {
    if survivors.kind() == GeometryKind::Rotated {
        return survivors.clone();
    }
    per_group(survivors, |group| {
        let Some(first) = group.first() else {
            return Vec::new();
        };
        let pool = raw.group(&first.image_id, first.class_id);
        group
            .iter()
            .map(|d| match &d.bbox {
                BBox::Axis(b) => Detection {
                    bbox: BBox::Axis(vote_box(b, pool, sigma_sv)),
                    ..d.clone()
                },
                BBox::Rotated(_) => d.clone(),
            })
            .collect()
    })
}

/// Keeps the `k` best detections of every image, across classes.
pub fn top_k_survival(store: &DetectionStore, k: usize) -> DetectionStore {
    let mut by_image: BTreeMap<&ImageId, Vec<&Detection>> = BTreeMap::new();
    for d in store.iter() {
        by_image.entry(&d.image_id).or_default().push(d);
    }
    let dets = by_image
        .into_values()
        .flat_map(|mut dets| {
            dets.sort_by(|a, b| rank_cmp(a, b));
            dets.into_iter().take(k).cloned()
        })
        .collect();
    DetectionStore::from_trusted(store.kind(), dets)
}

/// Soft NMS, Score Voting over the rescored raw pool, then top-k.
pub fn refining_nms(store: &DetectionStore, cfg: &FusionConfig) -> DetectionStore {
    let soft = soft_nms_with_rescored(store, cfg);
    let voted = score_voting(&soft.survivors, &soft.rescored, cfg.sigma_sv);
    top_k_survival(&voted, cfg.top_k)
}

/// The configured aggregation: background removal, suppression, optional
/// Score Voting and top-k survival.
pub fn aggregate(store: &DetectionStore, cfg: &FusionConfig) -> DetectionStore {
    let store = background_removal(store, cfg.background_threshold);
    let (survivors, pool) = match cfg.nms_kind {
        NmsKind::Standard => (standard_nms(&store, cfg.iou_threshold(store.kind())), store),
        NmsKind::SoftLinear | NmsKind::SoftGaussian => {
            let soft = soft_nms_with_rescored(&store, cfg);
            (soft.survivors, soft.rescored)
        }
    };
    let refined = if cfg.voting_enabled() {
        score_voting(&survivors, &pool, cfg.sigma_sv)
    } else {
        survivors
    };
    top_k_survival(&refined, cfg.top_k)
}

/// Calibrates each expert, pools the calibrated detections and aggregates them.
///
/// Expert ids of the output are positions in `experts`.
pub fn fuse_pipeline(
    experts: &[DetectionStore],
    calibrators: &[CalibratorSet],
    cfg: &FusionConfig,
) -> Result<DetectionStore> {
    if experts.len() != calibrators.len() {
        return Err(Error::Arity {
            expected: experts.len(),
            found: calibrators.len(),
        });
    }
    cfg.validate()?;
    let calibrated: Vec<DetectionStore> = experts
        .iter()
        .zip(calibrators)
        .map(|(store, cals)| apply_calibrators(store, cals))
        .collect();
    let pooled = concat_experts(&calibrated)?;
    Ok(aggregate(&pooled, cfg))
}

/// Fraction of the detections contributed by each expert.
pub fn contribution_shares(store: &DetectionStore) -> BTreeMap<ExpertId, f64> {
    let mut counts: BTreeMap<ExpertId, usize> = BTreeMap::new();
    for d in store.iter() {
        *counts.entry(d.expert_id).or_insert(0) += 1;
    }
    let total = store.len().max(1) as f64;
    counts
        .into_iter()
        .map(|(e, n)| (e, n as f64 / total))
        .collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::calib::{CalibrationMethod, Calibrator, LinearCalibrator};
    use crate::detections::ClassId;
    use crate::geometry::RotatedBox;

    fn det(id: u64, image: i64, class_id: ClassId, xyxy: [f64; 4], score: f64) -> Detection {
        Detection {
            det_id: id,
            image_id: ImageId::from(image),
            class_id,
            bbox: BBox::Axis(AxisAlignedBox::new(xyxy[0], xyxy[1], xyxy[2], xyxy[3]).unwrap()),
            score,
            expert_id: 0,
        }
    }

    fn store(dets: Vec<Detection>) -> DetectionStore {
        DetectionStore::new(GeometryKind::AxisAligned, dets).unwrap()
    }

    fn ids(store: &DetectionStore) -> Vec<u64> {
        let mut v: Vec<u64> = store.iter().map(|d| d.det_id).collect();
        v.sort_unstable();
        v
    }

    fn score_of(store: &DetectionStore, id: u64) -> f64 {
        store.iter().find(|d| d.det_id == id).unwrap().score
    }

    #[test]
    fn background_removal_is_inclusive() {
        let s = store(vec![
            det(0, 1, 1, [0.0, 0.0, 1.0, 1.0], 0.04),
            det(1, 1, 1, [0.0, 0.0, 1.0, 1.0], 0.05),
            det(2, 1, 1, [0.0, 0.0, 1.0, 1.0], 0.9),
            det(3, 1, 1, [0.0, 0.0, 1.0, 1.0], 1.0),
        ]);
        assert_eq!(background_removal(&s, 0.0), s);
        assert_eq!(ids(&background_removal(&s, 0.05)), vec![1, 2, 3]);
        assert_eq!(ids(&background_removal(&s, 1.0)), vec![3]);
    }

    #[test]
    fn standard_nms_examples() {
        // IoU 0.9
        let s = store(vec![
            det(0, 1, 1, [0.0, 0.0, 10.0, 10.0], 0.9),
            det(1, 1, 1, [0.0, 0.0, 10.0, 9.0], 0.8),
        ]);
        assert_eq!(ids(&standard_nms(&s, 0.65)), vec![0]);

        let disjoint = store(vec![
            det(0, 1, 1, [0.0, 0.0, 1.0, 1.0], 0.9),
            det(1, 1, 1, [5.0, 5.0, 6.0, 6.0], 0.8),
        ]);
        assert_eq!(standard_nms(&disjoint, 0.65), disjoint);

        let classes = store(vec![
            det(0, 1, 1, [0.0, 0.0, 1.0, 1.0], 0.9),
            det(1, 1, 2, [0.0, 0.0, 1.0, 1.0], 0.8),
        ]);
        assert_eq!(standard_nms(&classes, 0.65).len(), 2);
    }

    #[test]
    fn nms_ties_prefer_lower_det_id() {
        let s = store(vec![
            det(7, 1, 1, [0.0, 0.0, 1.0, 1.0], 0.5),
            det(3, 1, 1, [0.0, 0.0, 1.0, 1.0], 0.5),
        ]);
        assert_eq!(ids(&standard_nms(&s, 0.5)), vec![3]);
    }

    #[test]
    fn linear_soft_nms_rescoring() {
        // IoU 0.7 with the survivor
        let s = store(vec![
            det(0, 1, 1, [0.0, 0.0, 10.0, 10.0], 0.9),
            det(1, 1, 1, [0.0, 0.0, 10.0, 7.0], 0.8),
            det(2, 1, 1, [0.0, 0.0, 10.0, 2.0], 0.5),
        ]);
        let cfg = FusionConfig {
            iou_nms: Some(0.3),
            ..FusionConfig::default()
        };
        let out = soft_nms(&s, &cfg);
        assert!((score_of(&out, 1) - 0.24).abs() < 1e-12);
        assert_eq!(score_of(&out, 0), 0.9);
        // IoU 0.2 < 0.3 with box 0; IoU 2/7 < 0.3 with box 1: untouched
        assert_eq!(score_of(&out, 2), 0.5);
    }

    #[test]
    fn gaussian_soft_nms_rescoring() {
        let cfg = FusionConfig {
            nms_kind: NmsKind::SoftGaussian,
            sigma_nms: 0.5,
            ..FusionConfig::default()
        };
        let disjoint = store(vec![
            det(0, 1, 1, [0.0, 0.0, 1.0, 1.0], 0.9),
            det(1, 1, 1, [5.0, 5.0, 6.0, 6.0], 0.8),
        ]);
        assert_eq!(score_of(&soft_nms(&disjoint, &cfg), 1), 0.8);

        // IoU exactly 0.5
        let s = store(vec![
            det(0, 1, 1, [0.0, 0.0, 10.0, 10.0], 0.9),
            det(1, 1, 1, [0.0, 0.0, 10.0, 5.0], 0.8),
        ]);
        let rescored = score_of(&soft_nms(&s, &cfg), 1);
        assert!((rescored - 0.8 * (-0.5f64).exp()).abs() < 1e-15);
        assert!((rescored - 0.48522).abs() < 1e-5);
    }

    #[test]
    fn soft_nms_prunes_low_scores() {
        let cfg = FusionConfig {
            iou_nms: Some(0.3),
            prune_after_soft: 0.1,
            ..FusionConfig::default()
        };
        let s = store(vec![
            det(0, 1, 1, [0.0, 0.0, 10.0, 10.0], 0.9),
            det(1, 1, 1, [0.0, 0.0, 10.0, 9.5], 0.8),
            det(2, 1, 1, [50.0, 0.0, 60.0, 10.0], 0.05),
        ]);
        let out = soft_nms_with_rescored(&s, &cfg);
        assert_eq!(ids(&out.survivors), vec![0]);
        assert_eq!(out.rescored.len(), 3);
    }

    #[test]
    fn voting_single_box_is_exact() {
        let raw = store(vec![
            det(0, 1, 1, [0.1, 0.7, 3.3, 9.9], 0.3),
            det(1, 1, 1, [50.0, 50.0, 60.0, 60.0], 0.9),
        ]);
        let survivors = raw.filter(|d| d.det_id == 0);
        assert_eq!(score_voting(&survivors, &raw, DEFAULT_SIGMA_SV), survivors);
    }

    #[test]
    fn voting_identical_boxes() {
        let raw = store(vec![
            det(0, 1, 1, [0.1, 0.7, 3.3, 9.9], 0.3),
            det(1, 1, 1, [0.1, 0.7, 3.3, 9.9], 0.77),
            det(2, 1, 1, [0.1, 0.7, 3.3, 9.9], 0.01),
        ]);
        let survivors = raw.filter(|d| d.det_id == 1);
        assert_eq!(score_voting(&survivors, &raw, DEFAULT_SIGMA_SV), survivors);
    }

    #[test]
    fn voting_vanishing_sigma_keeps_own_box() {
        let raw = store(vec![
            det(0, 1, 1, [0.0, 0.0, 10.0, 10.0], 0.5),
            det(1, 1, 1, [1.0, 1.0, 11.0, 11.0], 0.9),
            det(2, 1, 1, [0.0, 0.0, 10.0, 9.0], 0.9),
        ]);
        let survivors = raw.filter(|d| d.det_id == 0);
        assert_eq!(score_voting(&survivors, &raw, 1e-9), survivors);
        // with the default width the neighbours pull the box
        assert_ne!(score_voting(&survivors, &raw, DEFAULT_SIGMA_SV), survivors);
    }

    #[test]
    fn voting_weighted_average() {
        // IoU of the two boxes is 0.9: weight exp(-0.01 / 0.04)
        let raw = store(vec![
            det(0, 1, 1, [0.0, 0.0, 10.0, 10.0], 0.5),
            det(1, 1, 1, [0.0, 0.0, 10.0, 9.0], 0.5),
        ]);
        let survivors = raw.filter(|d| d.det_id == 0);
        let out = score_voting(&survivors, &raw, 0.04);
        let w = (-0.01f64 / 0.04).exp();
        let expected_ymax = (10.0 + w * 9.0) / (1.0 + w);
        let BBox::Axis(b) = out.detections()[0].bbox else {
            unreachable!()
        };
        assert!((b.y_max - expected_ymax).abs() < 1e-12);
        assert_eq!(out.detections()[0].score, 0.5);
    }

    #[test]
    fn voting_skips_rotated() {
        let r = |id, theta| Detection {
            det_id: id,
            image_id: ImageId::from(1),
            class_id: 1,
            bbox: BBox::Rotated(RotatedBox::new(0.0, 0.0, 4.0, 2.0, theta).unwrap()),
            score: 0.5,
            expert_id: 0,
        };
        let raw = DetectionStore::new(GeometryKind::Rotated, vec![r(0, 0.0), r(1, 0.1)]).unwrap();
        let survivors = raw.filter(|d| d.det_id == 0);
        assert_eq!(score_voting(&survivors, &raw, 0.04), survivors);
    }

    #[test]
    fn top_k_examples() {
        let s = store(vec![
            det(0, 1, 1, [0.0, 0.0, 1.0, 1.0], 0.3),
            det(1, 1, 2, [0.0, 0.0, 1.0, 1.0], 0.8),
            det(2, 1, 3, [0.0, 0.0, 1.0, 1.0], 0.5),
            det(3, 2, 1, [0.0, 0.0, 1.0, 1.0], 0.1),
        ]);
        assert_eq!(top_k_survival(&s, 10), s);
        assert!(top_k_survival(&s, 0).is_empty());
        assert_eq!(ids(&top_k_survival(&s, 1)), vec![1, 3]);
    }

    #[test]
    fn refining_nms_on_empty_store() {
        let empty = DetectionStore::empty(GeometryKind::AxisAligned);
        assert!(refining_nms(&empty, &FusionConfig::default()).is_empty());
    }

    #[test]
    fn pipeline_arity_and_identity() {
        let s = store(vec![
            det(0, 1, 1, [0.0, 0.0, 1.0, 1.0], 0.3),
            det(1, 1, 1, [5.0, 5.0, 6.0, 6.0], 0.8),
        ]);
        let cfg = FusionConfig::standard(0.65);
        assert!(matches!(
            fuse_pipeline(std::slice::from_ref(&s), &[], &cfg),
            Err(Error::Arity { .. })
        ));
        let out =
            fuse_pipeline(std::slice::from_ref(&s), &[CalibratorSet::identity()], &cfg).unwrap();
        // det_ids are re-issued when experts are pooled
        let content = |st: &DetectionStore| {
            st.iter()
                .map(|d| (d.bbox.to_wire(), d.score.to_bits()))
                .collect::<Vec<_>>()
        };
        assert_eq!(content(&out), content(&s));
    }

    #[test]
    fn pipeline_disjoint_experts_union() {
        let a = store(vec![det(0, 1, 1, [0.0, 0.0, 1.0, 1.0], 0.3)]);
        let b = store(vec![det(0, 1, 1, [5.0, 5.0, 6.0, 6.0], 0.8)]);
        let out = fuse_pipeline(
            &[a, b],
            &[CalibratorSet::identity(), CalibratorSet::identity()],
            &FusionConfig::default(),
        )
        .unwrap();
        assert_eq!(out.len(), 2);
        let shares = contribution_shares(&out);
        assert_eq!(shares[&0], 0.5);
        assert_eq!(shares[&1], 0.5);
    }

    #[test]
    fn pipeline_applies_calibration_first() {
        let a = store(vec![det(0, 1, 1, [0.0, 0.0, 1.0, 1.0], 0.8)]);
        let half = CalibratorSet::class_agnostic(
            CalibrationMethod::Linear,
            Calibrator::Linear(LinearCalibrator { a: 0.5, b: 0.0 }),
        );
        let out = fuse_pipeline(&[a], &[half], &FusionConfig::default()).unwrap();
        assert_eq!(out.detections()[0].score, 0.4);
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg: FusionConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, FusionConfig::default());
        assert_eq!(cfg.iou_threshold(GeometryKind::AxisAligned), 0.65);
        assert_eq!(cfg.iou_threshold(GeometryKind::Rotated), 0.35);
        assert_eq!(cfg.sigma_sv, 0.04);
        assert_eq!(cfg.top_k, 100);
        assert!(cfg.voting_enabled());
        assert!(!FusionConfig::standard(0.5).voting_enabled());
        assert!(serde_json::from_str::<FusionConfig>(r#"{"bogus": 1}"#).is_err());
        let cfg: FusionConfig =
            serde_json::from_str(r#"{"nms_kind": "soft-gaussian", "sigma_nms": 0.4}"#).unwrap();
        assert_eq!(cfg.nms_kind, NmsKind::SoftGaussian);
        assert!(FusionConfig {
            sigma_sv: 0.0,
            ..FusionConfig::default()
        }
        .validate()
        .is_err());
        assert!(FusionConfig {
            top_k: 0,
            ..FusionConfig::default()
        }
        .validate()
        .is_err());
    }

    fn arb_store() -> impl Strategy<Value = DetectionStore> {
        prop::collection::vec(
            (
                (0.0..30.0f64, 0.0..30.0f64, 1.0..15.0f64, 1.0..15.0f64),
                0.0..1.0f64,
                1..3i64,
                0..2i64,
            ),
            0..25,
        )
        .prop_map(|v| {
            store(
                v.into_iter()
                    .enumerate()
                    .map(|(i, ((x, y, w, h), s, img, c))| {
                        det(i as u64, img, c, [x, y, x + w, y + h], s)
                    })
                    .collect(),
            )
        })
    }

    proptest! {
        #[test]
        fn nms_idempotent_and_subset(s in arb_store(), thr in 0.1..1.0f64) {
            let once = standard_nms(&s, thr);
            prop_assert_eq!(standard_nms(&once, thr), once.clone());
            let all: std::collections::BTreeSet<u64> = s.iter().map(|d| d.det_id).collect();
            prop_assert!(once.iter().all(|d| all.contains(&d.det_id)));
        }

        #[test]
        fn gaussian_never_increases_scores(s in arb_store(), sigma in 0.05..2.0f64) {
            let cfg = FusionConfig { nms_kind: NmsKind::SoftGaussian, sigma_nms: sigma, ..FusionConfig::default() };
            let out = soft_nms(&s, &cfg);
            for d in out.iter() {
                prop_assert!(d.score <= score_of(&s, d.det_id));
            }
        }

        #[test]
        fn voting_preserves_scores_and_count(s in arb_store()) {
            let survivors = standard_nms(&s, 0.5);
            let voted = score_voting(&survivors, &s, DEFAULT_SIGMA_SV);
            prop_assert_eq!(voted.len(), survivors.len());
            for (a, b) in voted.iter().zip(survivors.iter()) {
                prop_assert_eq!(a.det_id, b.det_id);
                prop_assert_eq!(a.score.to_bits(), b.score.to_bits());
            }
        }
    }
}
