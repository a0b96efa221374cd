//! Detection-to-ground-truth matching.
//!
//! Two matchings are used: the max-IoU target ψ that pairs every detection
//! with its best same-class object (calibration targets), and the greedy
//! COCO-style TP assignment at an IoU threshold (precision, AP, recall).

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::detections::{
    ClassId, Detection, DetectionStore, ExpertId, GroundTruth, GroundTruthSet,
};

/// A detection's score paired with the IoU of its max-IoU same-class object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TargetPair {
    pub det_id: u64,
    pub score: f64,
    pub target_iou: f64,
    pub class_id: ClassId,
    pub expert_id: ExpertId,
}

/// Max IoU of `det` over the non-ignored ground truths given, 0 if none.
pub fn psi_target(det: &Detection, gts: &[GroundTruth]) -> f64 {
    gts.iter()
        .filter(|g| !g.ignore)
        .map(|g| det.bbox.iou(&g.bbox))
        .fold(0.0, f64::max)
}

/// One target pair per detection, in store order.
pub fn match_psi(dets: &DetectionStore, gts: &GroundTruthSet) -> Vec<TargetPair> {
    dets.iter()
        .map(|d| TargetPair {
            det_id: d.det_id,
            score: d.score,
            target_iou: psi_target(d, gts.group(&d.image_id, d.class_id)),
            class_id: d.class_id,
            expert_id: d.expert_id,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchOutcome {
    TruePositive,
    FalsePositive,
    /// Matched a crowd/ignore region: neither TP nor FP.
    Ignored,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DetMatch {
    pub det_id: u64,
    pub class_id: ClassId,
    pub score: f64,
    pub outcome: MatchOutcome,
    pub matched_gt: Option<u64>,
    /// IoU with the matched object, 0 when unmatched.
    pub iou: f64,
}

impl DetMatch {
    pub fn is_tp(&self) -> bool {
        self.outcome == MatchOutcome::TruePositive
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchResult {
    pub tau: f64,
    /// One entry per detection, in store order.
    pub matches: Vec<DetMatch>,
}

impl MatchResult {
    pub fn by_det_id(&self) -> BTreeMap<u64, &DetMatch> {
        self.matches.iter().map(|m| (m.det_id, m)).collect()
    }

    pub fn num_tp(&self) -> usize {
        self.matches.iter().filter(|m| m.is_tp()).count()
    }
}

/// Greedy assignment for one (image, class) group.
///
/// `dets` must be score-descending with det_id tie-breaks (store order). Each
/// detection takes the unmatched regular object of highest IoU ≥ `tau`
/// (lower gt_id on ties); failing that, an ignore region with IoU ≥ `tau`
/// absorbs it; otherwise it is a false positive.
pub fn greedy_match_group(dets: &[&Detection], gts: &[GroundTruth], tau: f64) -> Vec<DetMatch> {
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            let mut best_ignore: Option<(usize, f64)> = None;
            for (k, g) in gts.iter().enumerate() {
                let iou = d.bbox.iou(&g.bbox);
                if iou < tau {
                    continue;
                }
                let slot = if g.ignore {
                    &mut best_ignore
                } else if !taken[k] {
                    &mut best
                } else {
                    continue;
                };
                // gts are sorted by gt_id, so a strict comparison keeps the lower id on ties
                if slot.is_none_or(|(_, b)| iou > b) {
                    *slot = Some((k, iou));
                }
            }
            let (outcome, matched) = match (best, best_ignore) {
                (Some(m), _) => {
                    taken[m.0] = true;
                    (MatchOutcome::TruePositive, Some(m))
                }
                (None, Some(m)) => (MatchOutcome::Ignored, Some(m)),
                (None, None) => (MatchOutcome::FalsePositive, None),
            };
            DetMatch {
                det_id: d.det_id,
                class_id: d.class_id,
                score: d.score,
                outcome,
                matched_gt: matched.map(|(k, _)| gts[k].gt_id),
                iou: matched.map_or(0.0, |(_, iou)| iou),
            }
        })
        .collect()
}

/// Greedy TP assignment over every (image, class) group of `dets`.
pub fn greedy_tp_match(dets: &DetectionStore, gts: &GroundTruthSet, tau: f64) -> MatchResult {
    let groups: Vec<_> = dets.groups().collect();
    let matches = groups
        .par_iter()
        .map(|(img, cls, group)| {
            let refs: Vec<&Detection> = group.iter().collect();
            greedy_match_group(&refs, gts.group(img, *cls), tau)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    MatchResult { tau, matches }
}
