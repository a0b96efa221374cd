//! Localisation-aware calibration errors, reliability data and COCO-style
//! accuracy (AP, AR).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detections::{write_file, ClassId, Detection, DetectionStore, GroundTruthSet};
use crate::error::{Error, Result};
use crate::fuse::{aggregate, FusionConfig};
use crate::matching::{greedy_tp_match, match_psi, MatchOutcome};

pub const DEFAULT_BINS: usize = 25;
pub const DEFAULT_MAX_DETS: usize = 100;

/// The COCO threshold grid 0.50, 0.55, …, 0.95.
pub fn coco_taus() -> Vec<f64> {
    (0..10).map(|i| f64::from(50 + 5 * i) / 100.0).collect()
}

/// Index of the equal-width bin holding `score`; the last bin is closed at 1.
pub fn bin_index(score: f64, num_bins: usize) -> usize {
    let j = (score * num_bins as f64).floor();
    if j <= 0.0 {
        0
    } else {
        (j as usize).min(num_bins - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub count: usize,
    pub mean_conf: f64,
    /// Mean target IoU: over all members in reduced mode, over TPs otherwise.
    pub mean_iou: f64,
    /// 1 in reduced mode.
    pub precision: f64,
}

impl BinStats {
    pub const EMPTY: BinStats = BinStats {
        count: 0,
        mean_conf: 0.0,
        mean_iou: 0.0,
        precision: 0.0,
    };

    /// The accuracy a calibrated detector would match in this bin.
    pub fn target(&self) -> f64 {
        self.precision * self.mean_iou
    }

    pub fn gap(&self) -> f64 {
        (self.mean_conf - self.target()).abs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum BinWeighting {
    /// Bins (score, ψ-target) pairs; precision is taken as 1.
    Reduced,
    /// Validates TPs at `tau` and weights the TP mean IoU by bin precision.
    Precision { tau: f64 },
}

/// Per-class reliability bins. Only classes with at least one detection appear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBins {
    pub num_bins: usize,
    pub classes: BTreeMap<ClassId, Vec<BinStats>>,
}

#[derive(Default, Clone, Copy)]
struct Acc {
    count: usize,
    conf: f64,
    iou: f64,
    iou_count: usize,
    hits: usize,
}

impl Acc {
    fn finish(self, reduced: bool) -> BinStats {
        if self.count == 0 {
            return BinStats::EMPTY;
        }
        let n = self.count as f64;
        BinStats {
            count: self.count,
            mean_conf: self.conf / n,
            mean_iou: if self.iou_count == 0 {
                0.0
            } else {
                self.iou / self.iou_count as f64
            },
            precision: if reduced { 1.0 } else { self.hits as f64 / n },
        }
    }
}

impl ReliabilityBins {
    /// Reduced-mode bins from `(class, confidence, target)` triples.
    pub fn from_pairs(
        num_bins: usize,
        pairs: impl IntoIterator<Item = (ClassId, f64, f64)>,
    ) -> Self {
        let mut accs: BTreeMap<ClassId, Vec<Acc>> = BTreeMap::new();
        for (class, conf, target) in pairs {
            let acc = &mut accs
                .entry(class)
                .or_insert_with(|| vec![Acc::default(); num_bins])[bin_index(conf, num_bins)];
            acc.count += 1;
            acc.conf += conf;
            acc.iou += target;
            acc.iou_count += 1;
        }
        Self::finish(num_bins, accs, true)
    }

    fn finish(num_bins: usize, accs: BTreeMap<ClassId, Vec<Acc>>, reduced: bool) -> Self {
        let classes = accs
            .into_iter()
            .map(|(c, v)| (c, v.into_iter().map(|a| a.finish(reduced)).collect()))
            .collect();
        Self { num_bins, classes }
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn total_count(&self) -> usize {
        self.classes.values().flatten().map(|b| b.count).sum()
    }
}

/// Bins every detection by confidence.
///
/// In precision mode detections absorbed by ignore regions are left out.
pub fn build_bins(
    dets: &DetectionStore,
    gts: &GroundTruthSet,
    num_bins: usize,
    weighting: BinWeighting,
) -> Result<ReliabilityBins> {
    if num_bins == 0 {
        return Err(Error::Domain("bin count must be at least 1".into()));
    }
    match weighting {
        BinWeighting::Reduced => Ok(ReliabilityBins::from_pairs(
            num_bins,
            match_psi(dets, gts)
                .into_iter()
                .map(|p| (p.class_id, p.score, p.target_iou)),
        )),
        BinWeighting::Precision { tau } => {
            let mut accs: BTreeMap<ClassId, Vec<Acc>> = BTreeMap::new();
            for m in greedy_tp_match(dets, gts, tau).matches {
                if m.outcome == MatchOutcome::Ignored {
                    continue;
                }
                let acc = &mut accs
                    .entry(m.class_id)
                    .or_insert_with(|| vec![Acc::default(); num_bins])
                    [bin_index(m.score, num_bins)];
                acc.count += 1;
                acc.conf += m.score;
                if m.is_tp() {
                    acc.hits += 1;
                    acc.iou += m.iou;
                    acc.iou_count += 1;
                }
            }
            Ok(ReliabilityBins::finish(num_bins, accs, false))
        }
    }
}

/// Denominator used by LaACE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AceDenominator {
    #[default]
    NonEmpty,
    AllBins,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CalibrationErrors {
    pub laece: f64,
    pub laace: f64,
    pub lamce: f64,
}

/// The three errors for a single class's bins.
pub fn class_errors(bins: &[BinStats], ace: AceDenominator) -> CalibrationErrors {
    let total: usize = bins.iter().map(|b| b.count).sum();
    let occupied: Vec<&BinStats> = bins.iter().filter(|b| b.count > 0).collect();
    if occupied.is_empty() {
        return CalibrationErrors {
            laece: 0.0,
            laace: 0.0,
            lamce: 0.0,
        };
    }
    let laece = occupied
        .iter()
        .map(|b| b.count as f64 / total as f64 * b.gap())
        .sum();
    let denom = match ace {
        AceDenominator::NonEmpty => occupied.len(),
        AceDenominator::AllBins => bins.len(),
    };
    let laace = occupied.iter().map(|b| b.gap()).sum::<f64>() / denom as f64;
    let lamce = occupied.iter().map(|b| b.gap()).fold(0.0, f64::max);
    CalibrationErrors {
        laece,
        laace,
        lamce,
    }
}

/// Class-averaged errors. With no detections at all every error is 0.
pub fn calibration_errors(bins: &ReliabilityBins, ace: AceDenominator) -> CalibrationErrors {
    if bins.is_empty() {
        log::warn!("no class has detections; calibration errors reported as 0");
        return CalibrationErrors {
            laece: 0.0,
            laace: 0.0,
            lamce: 0.0,
        };
    }
    let per: Vec<CalibrationErrors> = bins
        .classes
        .values()
        .map(|b| class_errors(b, ace))
        .collect();
    let n = per.len() as f64;
    CalibrationErrors {
        laece: per.iter().map(|e| e.laece).sum::<f64>() / n,
        laace: per.iter().map(|e| e.laace).sum::<f64>() / n,
        lamce: per.iter().map(|e| e.lamce).sum::<f64>() / n,
    }
}

pub fn laece(bins: &ReliabilityBins) -> f64 {
    calibration_errors(bins, AceDenominator::NonEmpty).laece
}

pub fn laace(bins: &ReliabilityBins, ace: AceDenominator) -> f64 {
    calibration_errors(bins, ace).laace
}

pub fn lamce(bins: &ReliabilityBins) -> f64 {
    calibration_errors(bins, AceDenominator::NonEmpty).lamce
}

/// LaECE against precision-weighted TP IoU, with TPs validated at `tau`.
pub fn laece_precision(
    dets: &DetectionStore,
    gts: &GroundTruthSet,
    num_bins: usize,
    tau: f64,
) -> Result<f64> {
    Ok(laece(&build_bins(
        dets,
        gts,
        num_bins,
        BinWeighting::Precision { tau },
    )?))
}

/// How the precision envelope is summarised into a single AP value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApRule {
    /// Mean of the envelope sampled at recall 0, 0.01, …, 1.
    #[default]
    Coco101,
    /// Exact area under the envelope.
    Area,
}

/// AP of a ranked list of TP/FP flags against `num_gt` objects.
pub fn ap_from_ranked(tp_flags: &[bool], num_gt: usize, rule: ApRule) -> f64 {
    if num_gt == 0 || tp_flags.is_empty() {
        return 0.0;
    }
    let m = num_gt as f64;
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(tp_flags.len());
    let mut precision = Vec::with_capacity(tp_flags.len());
    for (i, &hit) in tp_flags.iter().enumerate() {
        tp += usize::from(hit);
        recall.push(tp as f64 / m);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    match rule {
        ApRule::Coco101 => {
            let mut sum = 0.0;
            for k in 0..=100 {
                let r = f64::from(k) / 100.0;
                let idx = recall.partition_point(|&x| x < r);
                if idx < recall.len() {
                    sum += precision[idx];
                }
            }
            sum / 101.0
        }
        // every TP raises recall by exactly 1/m
        ApRule::Area => {
            tp_flags
                .iter()
                .zip(&precision)
                .filter(|(hit, _)| **hit)
                .map(|(_, p)| p)
                .sum::<f64>()
                / m
        }
    }
}

/// The `max_dets` best detections of every (image, class) group.
pub fn cap_per_group(store: &DetectionStore, max_dets: usize) -> DetectionStore {
    store.filter_groups(|group| &group[..group.len().min(max_dets)])
}

/// Per-class TP/FP flags in global rank order after matching at `tau`;
/// detections absorbed by ignore regions are dropped.
fn ranked_flags(
    capped: &DetectionStore,
    gts: &GroundTruthSet,
    tau: f64,
) -> BTreeMap<ClassId, Vec<bool>> {
    let matches = greedy_tp_match(capped, gts, tau);
    let mut per_class: BTreeMap<ClassId, Vec<(&Detection, bool)>> = BTreeMap::new();
    for (d, m) in capped.iter().zip(&matches.matches) {
        debug_assert_eq!(d.det_id, m.det_id);
        if m.outcome != MatchOutcome::Ignored {
            per_class
                .entry(d.class_id)
                .or_default()
                .push((d, m.is_tp()));
        }
    }
    per_class
        .into_iter()
        .map(|(c, mut v)| {
            v.sort_by(|a, b| crate::detections::rank_cmp(a.0, b.0));
            (c, v.into_iter().map(|(_, hit)| hit).collect())
        })
        .collect()
}

/// AP per class (classes with at least one regular object) at each threshold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApTable {
    pub taus: Vec<f64>,
    /// Entry `[i]` is the AP at `taus[i]`.
    pub per_class: BTreeMap<ClassId, Vec<f64>>,
}

impl ApTable {
    /// Class-averaged AP at `taus[i]`.
    pub fn ap_at_index(&self, i: usize) -> f64 {
        mean(self.per_class.values().map(|v| v[i]))
    }

    /// Class-averaged AP at a listed threshold.
    pub fn ap_at(&self, tau: f64) -> Option<f64> {
        self.taus
            .iter()
            .position(|&t| t == tau)
            .map(|i| self.ap_at_index(i))
    }

    /// Mean over thresholds of the class-averaged AP.
    pub fn ap(&self) -> f64 {
        mean((0..self.taus.len()).map(|i| self.ap_at_index(i)))
    }

    /// Each class's AP averaged over thresholds.
    pub fn class_ap(&self) -> BTreeMap<ClassId, f64> {
        self.per_class
            .iter()
            .map(|(&c, v)| (c, mean(v.iter().copied())))
            .collect()
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// COCO-style AP of `dets` at every threshold of `taus`.
pub fn coco_ap(
    dets: &DetectionStore,
    gts: &GroundTruthSet,
    taus: &[f64],
    max_dets: usize,
    rule: ApRule,
) -> Result<ApTable> {
    if taus.is_empty() {
        return Err(Error::Domain(
            "at least one IoU threshold is required".into(),
        ));
    }
    let counts = gts.counts_per_class();
    if counts.is_empty() {
        log::warn!("no ground-truth objects; AP reported as 0");
    }
    let capped = cap_per_group(dets, max_dets);
    let flags: Vec<BTreeMap<ClassId, Vec<bool>>> = taus
        .par_iter()
        .map(|&t| ranked_flags(&capped, gts, t))
        .collect();
    let per_class = counts
        .iter()
        .map(|(&c, &m)| {
            let aps = flags
                .iter()
                .map(|f| f.get(&c).map_or(0.0, |v| ap_from_ranked(v, m, rule)))
                .collect();
            (c, aps)
        })
        .collect();
    Ok(ApTable {
        taus: taus.to_vec(),
        per_class,
    })
}

/// Class-averaged recall at each threshold.
pub fn recall_at(
    dets: &DetectionStore,
    gts: &GroundTruthSet,
    taus: &[f64],
    max_dets: usize,
) -> Vec<f64> {
    let counts = gts.counts_per_class();
    let capped = cap_per_group(dets, max_dets);
    taus.par_iter()
        .map(|&t| {
            let flags = ranked_flags(&capped, gts, t);
            mean(counts.iter().map(|(c, &m)| {
                let tp = flags.get(c).map_or(0, |v| v.iter().filter(|h| **h).count());
                tp as f64 / m as f64
            }))
        })
        .collect()
}

/// Recall averaged over `taus`.
pub fn average_recall(
    dets: &DetectionStore,
    gts: &GroundTruthSet,
    taus: &[f64],
    max_dets: usize,
) -> f64 {
    mean(recall_at(dets, gts, taus, max_dets).into_iter())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub taus: Vec<f64>,
    pub max_dets: usize,
    pub bins: usize,
    pub ap_rule: ApRule,
    pub ace: AceDenominator,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            taus: coco_taus(),
            max_dets: DEFAULT_MAX_DETS,
            bins: DEFAULT_BINS,
            ap_rule: ApRule::Coco101,
            ace: AceDenominator::NonEmpty,
        }
    }
}

impl EvalOptions {
    pub fn validate(&self) -> Result<()> {
        if self.taus.is_empty() || self.taus.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Domain(
                "IoU thresholds must be a non-empty list in [0, 1]".into(),
            ));
        }
        if self.bins == 0 || self.max_dets == 0 {
            return Err(Error::Domain("bins and max_dets must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub per_class_ap: BTreeMap<ClassId, f64>,
    pub ar: f64,
    pub recall50: f64,
    pub recall75: f64,
    pub laece: f64,
    pub laace: f64,
    pub lamce: f64,
    pub num_detections: usize,
    pub num_ground_truths: usize,
    pub ap_rule: ApRule,
    pub warnings: Vec<String>,
}

pub fn evaluate(
    dets: &DetectionStore,
    gts: &GroundTruthSet,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    opts.validate()?;
    let mut warnings = Vec::new();
    let table = coco_ap(dets, gts, &opts.taus, opts.max_dets, opts.ap_rule)?;
    let headline = coco_ap(dets, gts, &[0.5, 0.75], opts.max_dets, opts.ap_rule)?;
    let recalls = recall_at(dets, gts, &[0.5, 0.75], opts.max_dets);
    let bins = build_bins(dets, gts, opts.bins, BinWeighting::Reduced)?;
    if bins.is_empty() {
        warnings.push("no detections: calibration errors are 0".to_string());
    }
    if table.per_class.is_empty() {
        warnings.push("no ground-truth objects: AP and AR are 0".to_string());
    }
    let errors = calibration_errors(&bins, opts.ace);
    Ok(EvalReport {
        ap: table.ap(),
        ap50: headline.ap_at_index(0),
        ap75: headline.ap_at_index(1),
        per_class_ap: table.class_ap(),
        ar: average_recall(dets, gts, &opts.taus, opts.max_dets),
        recall50: recalls[0],
        recall75: recalls[1],
        laece: errors.laece,
        laace: errors.laace,
        lamce: errors.lamce,
        num_detections: dets.len(),
        num_ground_truths: gts.counts_per_class().values().sum(),
        ap_rule: opts.ap_rule,
        warnings,
    })
}

/// Formats a fraction as a percentage with four decimals.
pub fn pct(v: f64) -> String {
    format!("{:.4}", v * 100.0)
}

impl EvalReport {
    /// Aligned two-column table, values ×100.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<(String, String)> = vec![
            ("AP".into(), pct(self.ap)),
            ("AP50".into(), pct(self.ap50)),
            ("AP75".into(), pct(self.ap75)),
            ("AR".into(), pct(self.ar)),
            ("R@0.50".into(), pct(self.recall50)),
            ("R@0.75".into(), pct(self.recall75)),
            ("LaECE".into(), pct(self.laece)),
            ("LaACE".into(), pct(self.laace)),
            ("LaMCE".into(), pct(self.lamce)),
        ];
        for (c, ap) in &self.per_class_ap {
            rows.push((format!("AP[class {c}]"), pct(*ap)));
        }
        rows.push(("detections".into(), self.num_detections.to_string()));
        rows.push(("ground truths".into(), self.num_ground_truths.to_string()));
        format_table(
            &["metric", "value"],
            &rows
                .into_iter()
                .map(|(a, b)| vec![a, b])
                .collect::<Vec<_>>(),
        )
    }
}

/// Left-aligned first column, right-aligned others.
pub fn format_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let mut line = |cells: Vec<&str>| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, &w))| {
                if i == 0 {
                    format!("{c:<w$}")
                } else {
                    format!("{c:>w$}")
                }
            })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(header.to_vec());
    for row in rows {
        line(row.iter().map(String::as_str).collect());
    }
    out
}

/// A fusion setting varied by a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepParam {
    BackgroundThreshold,
    SigmaNms,
    IouNms,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    /// Detections per image entering suppression.
    pub mean_count_per_image: f64,
    pub surviving: usize,
    pub ap: f64,
}

/// Aggregates `store` once per value of `param` and evaluates AP.
pub fn sweep(
    store: &DetectionStore,
    gts: &GroundTruthSet,
    param: SweepParam,
    values: &[f64],
    cfg: &FusionConfig,
    opts: &EvalOptions,
) -> Result<Vec<SweepRow>> {
    opts.validate()?;
    let num_images = store.image_ids().len();
    values
        .iter()
        .map(|&v| {
            let mut cfg = cfg.clone();
            match param {
                SweepParam::BackgroundThreshold => cfg.background_threshold = v,
                SweepParam::SigmaNms => cfg.sigma_nms = v,
                SweepParam::IouNms => cfg.iou_nms = Some(v),
            }
            cfg.validate()?;
            let surviving = store
                .iter()
                .filter(|d| d.score >= cfg.background_threshold)
                .count();
            let fused = aggregate(store, &cfg);
            let ap = coco_ap(&fused, gts, &opts.taus, opts.max_dets, opts.ap_rule)?.ap();
            Ok(SweepRow {
                value: v,
                mean_count_per_image: if num_images == 0 {
                    0.0
                } else {
                    surviving as f64 / num_images as f64
                },
                surviving,
                ap,
            })
        })
        .collect()
}

/// Background-removal threshold sweep.
pub fn threshold_sweep(
    store: &DetectionStore,
    gts: &GroundTruthSet,
    thresholds: &[f64],
    cfg: &FusionConfig,
    opts: &EvalOptions,
) -> Result<Vec<SweepRow>> {
    sweep(
        store,
        gts,
        SweepParam::BackgroundThreshold,
        thresholds,
        cfg,
        opts,
    )
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    class: ClassId,
    bin: usize,
    lo: f64,
    hi: f64,
    count: usize,
    mean_conf: f64,
    mean_iou: f64,
    precision: f64,
}

const CSV_HEADER: &str = "class,bin,lo,hi,count,mean_conf,mean_iou,precision";

pub fn reliability_to_csv(bins: &ReliabilityBins) -> String {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    let j = bins.num_bins as f64;
    for (&class, stats) in &bins.classes {
        for (bin, s) in stats.iter().enumerate() {
            w.serialize(CsvRow {
                class,
                bin,
                lo: bin as f64 / j,
                hi: (bin + 1) as f64 / j,
                count: s.count,
                mean_conf: s.mean_conf,
                mean_iou: s.mean_iou,
                precision: s.precision,
            })
            .expect("writing to memory");
        }
    }
    let body = String::from_utf8(w.into_inner().expect("writing to memory")).expect("csv is utf-8");
    format!("{CSV_HEADER}\n{body}")
}

/// Parses reliability CSV. The bin count is taken from the rows; a
/// header-only file gives zero bins and no classes.
pub fn parse_reliability_csv(text: &str) -> Result<ReliabilityBins> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| Error::Parse(e.to_string()))?;
    if header.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
        return Err(Error::Parse(format!(
            "reliability csv header must be `{CSV_HEADER}`"
        )));
    }
    let mut classes: BTreeMap<ClassId, Vec<BinStats>> = BTreeMap::new();
    for row in rdr.deserialize::<CsvRow>() {
        let row = row.map_err(|e| Error::Parse(e.to_string()))?;
        let v = classes.entry(row.class).or_default();
        if row.bin != v.len() {
            return Err(Error::Parse(format!(
                "class {}: bins out of order at {}",
                row.class, row.bin
            )));
        }
        v.push(BinStats {
            count: row.count,
            mean_conf: row.mean_conf,
            mean_iou: row.mean_iou,
            precision: row.precision,
        });
    }
    let num_bins = classes.values().next().map_or(0, Vec::len);
    if classes.values().any(|v| v.len() != num_bins) {
        return Err(Error::Parse("classes have differing bin counts".into()));
    }
    Ok(ReliabilityBins { num_bins, classes })
}

/// One reliability diagram per class, laid out in a row.
pub fn reliability_to_svg(bins: &ReliabilityBins) -> String {
    const SIZE: f64 = 240.0;
    const PAD: f64 = 30.0;
    let panel = SIZE + 2.0 * PAD;
    let n = bins.classes.len().max(1) as f64;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
        w = panel * n,
        h = panel + 20.0
    );
    let j = bins.num_bins.max(1) as f64;
    for (k, (class, stats)) in bins.classes.iter().enumerate() {
        let ox = k as f64 * panel + PAD;
        let oy = PAD + 20.0;
        let _ = writeln!(svg, r#"<g transform="translate({ox},{oy})">"#);
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="-8" text-anchor="middle" font-size="12">class {class}</text>"#,
            SIZE / 2.0
        );
        let _ = writeln!(
            svg,
            r##"<rect x="0" y="0" width="{SIZE}" height="{SIZE}" fill="none" stroke="#000"/>"##
        );
        for (b, s) in stats.iter().enumerate().filter(|(_, s)| s.count > 0) {
            let h = s.target() * SIZE;
            let _ = writeln!(
                svg,
                r##"<rect x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="#4c72b0" stroke="#fff"/>"##,
                b as f64 / j * SIZE,
                SIZE - h,
                SIZE / j,
                h
            );
        }
        let _ = writeln!(
            svg,
            r##"<line x1="0" y1="{SIZE}" x2="{SIZE}" y2="0" stroke="#c44e52" stroke-dasharray="4 3"/>"##
        );
        let _ = writeln!(svg, "</g>");
    }
    svg.push_str("</svg>\n");
    svg
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReliabilityFormat {
    Csv,
    Svg,
}

pub fn reliability_export(
    bins: &ReliabilityBins,
    path: impl AsRef<Path>,
    format: ReliabilityFormat,
) -> Result<()> {
    let text = match format {
        ReliabilityFormat::Csv => reliability_to_csv(bins),
        ReliabilityFormat::Svg => reliability_to_svg(bins),
    };
    write_file(path.as_ref(), &text)
}

pub fn read_reliability_csv(path: impl AsRef<Path>) -> Result<ReliabilityBins> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_reliability_csv(&text)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::detections::{GroundTruth, ImageId};
    use crate::geometry::{AxisAlignedBox, BBox, GeometryKind};

    fn bx(x: [f64; 4]) -> BBox {
        BBox::Axis(AxisAlignedBox::new(x[0], x[1], x[2], x[3]).unwrap())
    }

    fn det(id: u64, image: i64, class_id: ClassId, x: [f64; 4], score: f64) -> Detection {
        Detection {
            det_id: id,
            image_id: ImageId::from(image),
            class_id,
            bbox: bx(x),
            score,
            expert_id: 0,
        }
    }

    fn gt(id: u64, image: i64, class_id: ClassId, x: [f64; 4]) -> GroundTruth {
        GroundTruth {
            gt_id: id,
            image_id: ImageId::from(image),
            class_id,
            bbox: bx(x),
            ignore: false,
        }
    }

    fn store(d: Vec<Detection>) -> DetectionStore {
        DetectionStore::new(GeometryKind::AxisAligned, d).unwrap()
    }

    fn gtset(g: Vec<GroundTruth>) -> GroundTruthSet {
        GroundTruthSet::new(GeometryKind::AxisAligned, g).unwrap()
    }

    const UNIT: [f64; 4] = [0.0, 0.0, 10.0, 10.0];

    #[test]
    fn binning_edges() {
        assert_eq!(bin_index(0.1, 25), 2);
        assert_eq!(bin_index(0.9, 25), 22);
        assert_eq!(bin_index(1.0, 25), 24);
        assert_eq!(bin_index(0.0, 25), 0);
        assert_eq!(bin_index(0.999, 1), 0);
        let bins = ReliabilityBins::from_pairs(25, [(1, 0.1, 0.1), (1, 0.9, 0.9)]);
        let occupied: Vec<usize> = bins.classes[&1]
            .iter()
            .enumerate()
            .filter(|(_, b)| b.count > 0)
            .map(|(j, _)| j)
            .collect();
        assert_eq!(occupied, vec![2, 22]);
        assert_eq!(laece(&bins), 0.0);
    }

    #[test]
    fn hand_example_errors() {
        let mut pairs = vec![(1, 0.1, 0.3); 9];
        pairs.push((1, 0.9, 0.9));
        let bins = ReliabilityBins::from_pairs(2, pairs);
        let e = calibration_errors(&bins, AceDenominator::NonEmpty);
        assert!((e.laece - 0.18).abs() < 1e-12);
        assert!((e.laace - 0.10).abs() < 1e-12);
        assert!((e.lamce - 0.20).abs() < 1e-12);
        assert!((laace(&bins, AceDenominator::AllBins) - 0.10).abs() < 1e-12);
        let sparse = ReliabilityBins::from_pairs(4, [(1, 0.1, 0.3)]);
        assert!((laace(&sparse, AceDenominator::AllBins) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn single_pair_and_empty() {
        let bins = ReliabilityBins::from_pairs(25, [(3, 0.9, 0.4)]);
        let e = calibration_errors(&bins, AceDenominator::NonEmpty);
        for v in [e.laece, e.laace, e.lamce] {
            assert!((v - 0.5).abs() < 1e-12);
        }
        let empty = ReliabilityBins::from_pairs(25, []);
        assert_eq!(laece(&empty), 0.0);
        assert_eq!(empty.total_count(), 0);
    }

    #[test]
    fn precision_weighted_examples() {
        let gts = gtset(vec![gt(1, 1, 1, UNIT)]);
        let s = store(vec![
            det(0, 1, 1, UNIT, 1.0),
            det(1, 1, 1, [50.0, 50.0, 60.0, 60.0], 1.0),
        ]);
        assert!((laece_precision(&s, &gts, 1, 0.5).unwrap() - 0.5).abs() < 1e-12);

        let fp = store(vec![det(0, 1, 1, [50.0, 50.0, 60.0, 60.0], 0.8)]);
        assert!((laece_precision(&fp, &gts, 25, 0.5).unwrap() - 0.8).abs() < 1e-12);

        let tp = store(vec![det(0, 1, 1, [0.0, 0.0, 10.0, 8.0], 0.8)]);
        assert!(laece_precision(&tp, &gts, 25, 0.5).unwrap() < 1e-12);
    }

    #[test]
    fn zero_bins_rejected() {
        let e = build_bins(&store(vec![]), &gtset(vec![]), 0, BinWeighting::Reduced);
        assert!(e.is_err());
    }

    #[test]
    fn ap_examples() {
        let gts = gtset(vec![gt(1, 1, 1, UNIT)]);
        let one = coco_ap(
            &store(vec![det(0, 1, 1, UNIT, 0.7)]),
            &gts,
            &coco_taus(),
            100,
            ApRule::Coco101,
        )
        .unwrap();
        assert_eq!(one.ap(), 1.0);
        let none = coco_ap(&store(vec![]), &gts, &[0.5], 100, ApRule::Coco101).unwrap();
        assert_eq!(none.ap(), 0.0);

        let two = gtset(vec![
            gt(1, 1, 1, UNIT),
            gt(2, 1, 1, [20.0, 20.0, 30.0, 30.0]),
        ]);
        let s = store(vec![
            det(0, 1, 1, UNIT, 0.9),
            det(1, 1, 1, [50.0, 50.0, 60.0, 60.0], 0.5),
        ]);
        let t = coco_ap(&s, &two, &[0.5], 100, ApRule::Coco101).unwrap();
        assert_eq!(t.ap(), 51.0 / 101.0);
        let a = coco_ap(&s, &two, &[0.5], 100, ApRule::Area).unwrap();
        assert_eq!(a.ap(), 0.5);
    }

    #[test]
    fn ap_excludes_classes_without_gt() {
        let gts = gtset(vec![gt(1, 1, 1, UNIT)]);
        let s = store(vec![det(0, 1, 1, UNIT, 0.7), det(1, 1, 2, UNIT, 0.9)]);
        let t = coco_ap(&s, &gts, &[0.5], 100, ApRule::Coco101).unwrap();
        assert_eq!(t.per_class.len(), 1);
        assert_eq!(t.ap(), 1.0);
        assert!(coco_ap(&s, &gts, &[], 100, ApRule::Coco101).is_err());
    }

    #[test]
    fn max_dets_caps_before_matching() {
        let gts = gtset(vec![gt(1, 1, 1, UNIT)]);
        let s = store(vec![
            det(0, 1, 1, [50.0, 50.0, 60.0, 60.0], 0.9),
            det(1, 1, 1, UNIT, 0.5),
        ]);
        let capped = coco_ap(&s, &gts, &[0.5], 1, ApRule::Coco101).unwrap();
        assert_eq!(capped.ap(), 0.0);
        assert_eq!(average_recall(&s, &gts, &[0.5], 1), 0.0);
        assert_eq!(average_recall(&s, &gts, &[0.5], 2), 1.0);
    }

    #[test]
    fn ar_examples() {
        let gts = gtset(vec![gt(1, 1, 1, UNIT)]);
        let perfect = store(vec![det(0, 1, 1, UNIT, 0.7)]);
        assert_eq!(average_recall(&perfect, &gts, &coco_taus(), 100), 1.0);
        assert_eq!(average_recall(&store(vec![]), &gts, &coco_taus(), 100), 0.0);
        let partial = store(vec![det(0, 1, 1, [0.0, 0.0, 10.0, 6.0], 0.7)]);
        assert!((average_recall(&partial, &gts, &coco_taus(), 100) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn evaluate_report_and_table() {
        let gts = gtset(vec![
            gt(1, 1, 1, UNIT),
            gt(2, 1, 1, [20.0, 20.0, 30.0, 30.0]),
        ]);
        let s = store(vec![
            det(0, 1, 1, UNIT, 1.0),
            det(1, 1, 1, [50.0, 50.0, 60.0, 60.0], 0.0),
        ]);
        let opts = EvalOptions {
            ap_rule: ApRule::Area,
            ..EvalOptions::default()
        };
        let r = evaluate(&s, &gts, &opts).unwrap();
        assert_eq!(r.ap, 0.5);
        assert_eq!(r.ap50, 0.5);
        assert_eq!(r.ap75, 0.5);
        assert_eq!(r.ar, 0.5);
        assert_eq!(r.laece, 0.0);
        assert_eq!(r.num_detections, 2);
        assert_eq!(r.num_ground_truths, 2);
        let table = r.to_table();
        assert!(table
            .lines()
            .any(|l| l.starts_with("AP ") && l.ends_with("50.0000")));
    }

    #[test]
    fn sweep_rows() {
        let gts = gtset(vec![gt(1, 1, 1, UNIT)]);
        let s = store(vec![
            det(0, 1, 1, UNIT, 1.0),
            det(1, 1, 1, [0.0, 0.0, 10.0, 9.0], 0.5),
            det(2, 1, 1, [50.0, 50.0, 60.0, 60.0], 0.02),
        ]);
        let cfg = FusionConfig::standard(0.65);
        let opts = EvalOptions::default();
        let rows = threshold_sweep(&s, &gts, &[0.0, 0.05, 1.0], &cfg, &opts).unwrap();
        let counts: Vec<usize> = rows.iter().map(|r| r.surviving).collect();
        assert_eq!(counts, vec![3, 2, 1]);
        let base = coco_ap(&aggregate(&s, &cfg), &gts, &opts.taus, 100, ApRule::Coco101)
            .unwrap()
            .ap();
        assert_eq!(rows[0].ap, base);
        assert!(sweep(&s, &gts, SweepParam::SigmaNms, &[0.0], &cfg, &opts).is_err());
    }

    #[test]
    fn csv_round_trip_and_shape() {
        let bins =
            ReliabilityBins::from_pairs(25, [(1, 0.13, 0.2), (2, 0.71, 0.5), (2, 0.3, 1.0 / 3.0)]);
        let text = reliability_to_csv(&bins);
        assert_eq!(text.lines().count(), 1 + 2 * 25);
        assert_eq!(parse_reliability_csv(&text).unwrap(), bins);
        assert_eq!(
            reliability_to_csv(&parse_reliability_csv(&text).unwrap()),
            text
        );

        let empty = ReliabilityBins::from_pairs(25, []);
        assert_eq!(reliability_to_csv(&empty), format!("{CSV_HEADER}\n"));
        assert!(parse_reliability_csv(&reliability_to_csv(&empty))
            .unwrap()
            .is_empty());
        assert!(parse_reliability_csv("a,b\n1,2\n").is_err());
    }

    #[test]
    fn svg_has_one_panel_per_class() {
        let bins = ReliabilityBins::from_pairs(10, [(1, 0.5, 0.5), (2, 0.5, 0.5)]);
        let svg = reliability_to_svg(&bins);
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<g ").count(), 2);
    }

    fn arb_pairs() -> impl Strategy<Value = Vec<(ClassId, f64, f64)>> {
        prop::collection::vec((0i64..3, 0.0..=1.0f64, 0.0..=1.0f64), 0..40)
    }

    proptest! {
        #[test]
        fn max_error_dominates(pairs in arb_pairs(), j in 1usize..30) {
            let bins = ReliabilityBins::from_pairs(j, pairs.clone());
            prop_assert_eq!(bins.total_count(), pairs.len());
            for stats in bins.classes.values() {
                prop_assert_eq!(stats.len(), j);
                let e = class_errors(stats, AceDenominator::NonEmpty);
                prop_assert!(e.lamce >= e.laece - 1e-15);
                prop_assert!(e.lamce >= e.laace - 1e-15);
            }
        }

        #[test]
        fn oracle_scores_have_zero_error(pairs in prop::collection::vec((0i64..3, 0.0..=1.0f64), 0..40), j in 1usize..30) {
            let bins = ReliabilityBins::from_pairs(j, pairs.iter().map(|&(c, t)| (c, t, t)));
            prop_assert!(laece(&bins) <= 1e-9);
        }

        #[test]
        fn recall_bounds_ap(flags in prop::collection::vec(any::<bool>(), 0..12), extra in 0usize..4) {
            let m = flags.iter().filter(|f| **f).count() + extra;
            if m > 0 {
                let recall = flags.iter().filter(|f| **f).count() as f64 / m as f64;
                prop_assert!(ap_from_ranked(&flags, m, ApRule::Area) <= recall + 1e-12);
                let ap = ap_from_ranked(&flags, m, ApRule::Coco101);
                prop_assert!((0.0..=1.0).contains(&ap));
            }
        }
    }
}
