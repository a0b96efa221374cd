//! Post-hoc calibrators mapping a detector's confidence to the expected IoU
//! with the object it overlaps most.
//!
//! Two families are supported: isotonic regression solved with the
//! pool-adjacent-violators algorithm, and a two-parameter least-squares line.
//! Either can be fitted once for all classes or once per class.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::detections::{write_file, ClassId, DetectionStore, GroundTruthSet};
use crate::error::{Error, Result};
use crate::matching::{match_psi, TargetPair};

/// Monotone piecewise-linear map through `knots`, constant outside them.
#[derive(Debug, Clone, PartialEq)]
pub struct IsotonicCalibrator {
    knots: Vec<(f64, f64)>,
}

impl IsotonicCalibrator {
    /// Validates x strictly increasing, y non-decreasing, both within [0, 1].
    pub fn from_knots(knots: Vec<(f64, f64)>) -> Result<Self> {
        if knots.is_empty() {
            return Err(Error::Domain(
                "isotonic calibrator needs at least one knot".into(),
            ));
        }
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !knots.iter().all(|&(x, y)| in_unit(x) && in_unit(y)) {
            return Err(Error::Domain("isotonic knots must lie in [0, 1]".into()));
        }
        if !knots
            .windows(2)
            .all(|w| w[0].0 < w[1].0 && w[0].1 <= w[1].1)
        {
            return Err(Error::Domain(
                "isotonic knots need strictly increasing x and non-decreasing y".into(),
            ));
        }
        Ok(Self { knots })
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    pub fn evaluate(&self, x: f64) -> f64 {
        let knots = &self.knots;
        let (first, last) = (knots[0], knots[knots.len() - 1]);
        if x <= first.0 {
            return first.1;
        }
        if x >= last.0 {
            return last.1;
        }
        // first index with knot.x > x; 1 <= hi < len here
        let hi = knots.partition_point(|&(kx, _)| kx <= x);
        let ((x0, y0), (x1, y1)) = (knots[hi - 1], knots[hi]);
        let t = (x - x0) / (x1 - x0);
        (y0 + t * (y1 - y0)).clamp(y0, y1)
    }
}

/// Least-squares isotonic fit of targets on scores.
///
/// Equal scores are pooled first, then adjacent violators are merged. One
/// knot is emitted per distinct score carrying its block mean.
pub fn fit_isotonic(pairs: &[TargetPair]) -> Result<IsotonicCalibrator> {
    if pairs.is_empty() {
        return Err(Error::Fit(
            "isotonic regression needs at least one pair".into(),
        ));
    }
    let points: Vec<(f64, f64)> = pairs.iter().map(|p| (p.score, p.target_iou)).collect();
    let knots = pava(&points);
    IsotonicCalibrator::from_knots(knots)
}

/// Pool-adjacent-violators over `(x, y)` points; returns `(x, fitted y)` per distinct x.
pub fn pava(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    // (x, sum of y, weight) per distinct x
    let mut pooled: Vec<(f64, f64, f64)> = Vec::new();
    for (x, y) in sorted {
        match pooled.last_mut() {
            Some(last) if last.0 == x => {
                last.1 += y;
                last.2 += 1.0;
            }
            _ => pooled.push((x, y, 1.0)),
        }
    }

    struct Block {
        sum: f64,
        weight: f64,
        len: usize,
    }
    impl Block {
        fn mean(&self) -> f64 {
            self.sum / self.weight
        }
    }

    let mut blocks: Vec<Block> = Vec::with_capacity(pooled.len());
    for &(_, sum, weight) in &pooled {
        blocks.push(Block {
            sum,
            weight,
            len: 1,
        });
        while blocks.len() > 1 {
            let n = blocks.len();
            if blocks[n - 2].mean() <= blocks[n - 1].mean() {
                break;
            }
            let top = blocks.pop().expect("len > 1");
            let below = blocks.last_mut().expect("len > 0");
            below.sum += top.sum;
            below.weight += top.weight;
            below.len += top.len;
        }
    }

    let mut knots = Vec::with_capacity(pooled.len());
    let mut xs = pooled.iter().map(|p| p.0);
    for block in &blocks {
        let mean = block.mean().clamp(0.0, 1.0);
        knots.extend(xs.by_ref().take(block.len).map(|x| (x, mean)));
    }
    knots
}

/// `clamp(slope * x + intercept, 0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearCalibrator {
    pub a: f64,
    pub b: f64,
}

impl LinearCalibrator {
    pub fn evaluate(&self, x: f64) -> f64 {
        (self.a * x + self.b).clamp(0.0, 1.0)
    }
}

/// Ordinary least squares of target on score.
pub fn fit_linear(pairs: &[TargetPair]) -> Result<LinearCalibrator> {
    if pairs.len() < 2 {
        return Err(Error::Fit(
            "linear regression needs at least two pairs".into(),
        ));
    }
    let n = pairs.len() as f64;
    let mean_x = pairs.iter().map(|p| p.score).sum::<f64>() / n;
    let mean_y = pairs.iter().map(|p| p.target_iou).sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for p in pairs {
        let dx = p.score - mean_x;
        sxx += dx * dx;
        sxy += dx * (p.target_iou - mean_y);
    }
    if sxx <= 0.0 {
        return Err(Error::Fit(
            "all scores are equal; the linear fit is singular".into(),
        ));
    }
    let a = sxy / sxx;
    Ok(LinearCalibrator {
        a,
        b: mean_y - a * mean_x,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Calibrator {
    Identity,
    Isotonic(IsotonicCalibrator),
    Linear(LinearCalibrator),
}

impl Calibrator {
    pub fn evaluate(&self, x: f64) -> f64 {
        match self {
            Calibrator::Identity => x.clamp(0.0, 1.0),
            Calibrator::Isotonic(c) => c.evaluate(x),
            Calibrator::Linear(c) => c.evaluate(x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMode {
    ClassAgnostic,
    ClassWise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMethod {
    Identity,
    Isotonic,
    Linear,
}

impl fmt::Display for CalibrationMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CalibrationMethod::Identity => "identity",
            CalibrationMethod::Isotonic => "isotonic",
            CalibrationMethod::Linear => "linear",
        })
    }
}

static IDENTITY: Calibrator = Calibrator::Identity;

/// The calibrator(s) of one expert.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibratorSet {
    mode: CalibrationMode,
    method: CalibrationMethod,
    shared: Option<Calibrator>,
    per_class: BTreeMap<ClassId, Calibrator>,
    warnings: Vec<String>,
}

impl CalibratorSet {
    /// Leaves scores untouched; used for a vanilla (uncalibrated) mixture.
    pub fn identity() -> Self {
        Self::class_agnostic(CalibrationMethod::Identity, Calibrator::Identity)
    }

    pub fn class_agnostic(method: CalibrationMethod, calibrator: Calibrator) -> Self {
        Self {
            mode: CalibrationMode::ClassAgnostic,
            method,
            shared: Some(calibrator),
            per_class: BTreeMap::new(),
            warnings: Vec::new(),
        }
    }

    pub fn class_wise(method: CalibrationMethod, per_class: BTreeMap<ClassId, Calibrator>) -> Self {
        Self {
            mode: CalibrationMode::ClassWise,
            method,
            shared: None,
            per_class,
            warnings: Vec::new(),
        }
    }

    pub fn mode(&self) -> CalibrationMode {
        self.mode
    }

    pub fn method(&self) -> CalibrationMethod {
        self.method
    }

    /// Number of fitted calibrators (1 in class-agnostic mode).
    pub fn len(&self) -> usize {
        match self.mode {
            CalibrationMode::ClassAgnostic => 1,
            CalibrationMode::ClassWise => self.per_class.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn per_class(&self) -> &BTreeMap<ClassId, Calibrator> {
        &self.per_class
    }

    /// Notes recorded while fitting, such as negative linear slopes.
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// The calibrator applied to `class_id`; identity for classes unseen at fit time.
    pub fn for_class(&self, class_id: ClassId) -> &Calibrator {
        match &self.shared {
            Some(c) => c,
            None => self.per_class.get(&class_id).unwrap_or(&IDENTITY),
        }
    }

    pub fn evaluate(&self, class_id: ClassId, score: f64) -> f64 {
        self.for_class(class_id).evaluate(score)
    }

    fn warn(&mut self, message: String) {
        warn!("{message}");
        self.warnings.push(message);
    }
}

fn fit_one(pairs: &[TargetPair], method: CalibrationMethod) -> Result<Calibrator> {
    match method {
        CalibrationMethod::Identity => Ok(Calibrator::Identity),
        CalibrationMethod::Isotonic => fit_isotonic(pairs).map(Calibrator::Isotonic),
        CalibrationMethod::Linear => fit_linear(pairs).map(Calibrator::Linear),
    }
}

/// Fits calibrators from target pairs already extracted with [`match_psi`].
pub fn fit_calibrator_set_from_pairs(
    pairs: &[TargetPair],
    mode: CalibrationMode,
    method: CalibrationMethod,
) -> Result<CalibratorSet> {
    if pairs.is_empty() {
        return Err(Error::Fit("no detections to fit calibrators on".into()));
    }
    let mut set = match mode {
        CalibrationMode::ClassAgnostic => {
            CalibratorSet::class_agnostic(method, fit_one(pairs, method)?)
        }
        CalibrationMode::ClassWise => {
            let mut by_class: BTreeMap<ClassId, Vec<TargetPair>> = BTreeMap::new();
            for p in pairs {
                by_class.entry(p.class_id).or_default().push(*p);
            }
            let mut notes = Vec::new();
            let mut per_class = BTreeMap::new();
            for (class_id, class_pairs) in by_class {
                let calibrator = if class_pairs.len() < 2 {
                    notes.push(format!(
                        "class {class_id}: {} pair(s), using identity",
                        class_pairs.len()
                    ));
                    Calibrator::Identity
                } else {
                    match fit_one(&class_pairs, method) {
                        Ok(c) => c,
                        Err(Error::Fit(reason)) => {
                            notes.push(format!("class {class_id}: {reason}, using identity"));
                            Calibrator::Identity
                        }
                        Err(e) => return Err(e),
                    }
                };
                per_class.insert(class_id, calibrator);
            }
            let mut set = CalibratorSet::class_wise(method, per_class);
            for note in notes {
                set.warn(note);
            }
            set
        }
    };

    let negative: Vec<String> = set
        .shared
        .iter()
        .map(|c| (None, c))
        .chain(set.per_class.iter().map(|(k, c)| (Some(*k), c)))
        .filter_map(|(class_id, c)| match c {
            Calibrator::Linear(l) if l.a < 0.0 => Some(match class_id {
                Some(k) => format!(
                    "class {k}: negative linear slope {} reverses the ranking",
                    l.a
                ),
                None => format!("negative linear slope {} reverses the ranking", l.a),
            }),
            _ => None,
        })
        .collect();
    for note in negative {
        set.warn(note);
    }
    Ok(set)
}

/// Fits calibrators on held-out detections and their ground truth.
pub fn fit_calibrator_set(
    dets: &DetectionStore,
    gts: &GroundTruthSet,
    mode: CalibrationMode,
    method: CalibrationMethod,
) -> Result<CalibratorSet> {
    fit_calibrator_set_from_pairs(&match_psi(dets, gts), mode, method)
}

/// Replaces every score by its calibrated value.
pub fn apply_calibrators(store: &DetectionStore, cals: &CalibratorSet) -> DetectionStore {
    store.map_scores(|d| cals.evaluate(d.class_id, d.score))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CalibratorFile {
    mode: CalibrationMode,
    method: CalibrationMethod,
    calibrators: Vec<CalibratorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CalibratorEntry {
    class_id: Option<ClassId>,
    #[serde(flatten)]
    model: CalibratorModel,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum CalibratorModel {
    Identity,
    Isotonic { knots: Vec<[f64; 2]> },
    Linear { a: f64, b: f64 },
}

impl From<&Calibrator> for CalibratorModel {
    fn from(c: &Calibrator) -> Self {
        match c {
            Calibrator::Identity => CalibratorModel::Identity,
            Calibrator::Isotonic(iso) => CalibratorModel::Isotonic {
                knots: iso.knots().iter().map(|&(x, y)| [x, y]).collect(),
            },
            Calibrator::Linear(l) => CalibratorModel::Linear { a: l.a, b: l.b },
        }
    }
}

impl TryFrom<CalibratorModel> for Calibrator {
    type Error = Error;

    fn try_from(m: CalibratorModel) -> Result<Self> {
        Ok(match m {
            CalibratorModel::Identity => Calibrator::Identity,
            CalibratorModel::Isotonic { knots } => Calibrator::Isotonic(
                IsotonicCalibrator::from_knots(knots.into_iter().map(|[x, y]| (x, y)).collect())?,
            ),
            CalibratorModel::Linear { a, b } => {
                if !(a.is_finite() && b.is_finite()) {
                    return Err(Error::Domain(
                        "linear calibrator parameters must be finite".into(),
                    ));
                }
                Calibrator::Linear(LinearCalibrator { a, b })
            }
        })
    }
}

pub fn calibrators_to_json(cals: &CalibratorSet) -> String {
    let calibrators = match &cals.shared {
        Some(c) => vec![CalibratorEntry {
            class_id: None,
            model: c.into(),
        }],
        None => cals
            .per_class
            .iter()
            .map(|(k, c)| CalibratorEntry {
                class_id: Some(*k),
                model: c.into(),
            })
            .collect(),
    };
    let file = CalibratorFile {
        mode: cals.mode,
        method: cals.method,
        calibrators,
    };
    let mut out = serde_json::to_string_pretty(&file).expect("calibrator files always serialise");
    out.push('\n');
    out
}

pub fn parse_calibrators(json: &str) -> Result<CalibratorSet> {
    let file: CalibratorFile = serde_json::from_str(json)?;
    match file.mode {
        CalibrationMode::ClassAgnostic => match file.calibrators.as_slice() {
            [entry] if entry.class_id.is_none() => {}
            _ => {
                return Err(Error::Domain(
                    "class-agnostic file needs exactly one calibrator without class_id".into(),
                ))
            }
        },
        CalibrationMode::ClassWise => {
            if file.calibrators.iter().any(|e| e.class_id.is_none()) {
                return Err(Error::Domain(
                    "class-wise calibrators need a class_id".into(),
                ));
            }
        }
    }
    let mut entries = file.calibrators.into_iter();
    match file.mode {
        CalibrationMode::ClassAgnostic => {
            let entry = entries.next().expect("checked above");
            Ok(CalibratorSet::class_agnostic(
                file.method,
                entry.model.try_into()?,
            ))
        }
        CalibrationMode::ClassWise => {
            let mut per_class = BTreeMap::new();
            for entry in entries {
                let class_id = entry.class_id.expect("checked above");
                if per_class
                    .insert(class_id, entry.model.try_into()?)
                    .is_some()
                {
                    return Err(Error::Domain(format!(
                        "duplicate calibrator for class {class_id}"
                    )));
                }
            }
            Ok(CalibratorSet::class_wise(file.method, per_class))
        }
    }
}

pub fn save_calibrators(cals: &CalibratorSet, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &calibrators_to_json(cals))
}

pub fn load_calibrators(path: impl AsRef<Path>) -> Result<CalibratorSet> {
    let path = path.as_ref();
    let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_calibrators(&json)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn pairs(points: &[(f64, f64)]) -> Vec<TargetPair> {
        points
            .iter()
            .enumerate()
            .map(|(i, &(score, target_iou))| TargetPair {
                det_id: i as u64,
                score,
                target_iou,
                class_id: 1,
                expert_id: 0,
            })
            .collect()
    }

    fn sse(points: &[(f64, f64)], f: impl Fn(f64) -> f64) -> f64 {
        points.iter().map(|&(x, y)| (y - f(x)).powi(2)).sum()
    }

    /// Exhaustive search over contiguous block partitions of the sorted,
    /// equal-x-pooled points; every monotone least-squares optimum is one of them.
    fn brute_force_isotonic_sse(points: &[(f64, f64)]) -> f64 {
        let mut sorted = points.to_vec();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut groups: Vec<Vec<f64>> = Vec::new();
        let mut last_x = f64::NAN;
        for (x, y) in sorted {
            if x == last_x {
                groups.last_mut().unwrap().push(y);
            } else {
                groups.push(vec![y]);
                last_x = x;
            }
        }
        let n = groups.len();
        let mut best = f64::INFINITY;
        for cuts in 0u32..(1 << (n - 1)) {
            let mut means = Vec::new();
            let mut total = 0.0;
            let mut block: Vec<f64> = Vec::new();
            for (i, g) in groups.iter().enumerate() {
                block.extend(g);
                if i == n - 1 || cuts & (1 << i) != 0 {
                    let mean = block.iter().sum::<f64>() / block.len() as f64;
                    total += block.iter().map(|y| (y - mean).powi(2)).sum::<f64>();
                    means.push(mean);
                    block.clear();
                }
            }
            if means.windows(2).all(|w| w[0] <= w[1]) {
                best = best.min(total);
            }
        }
        best
    }

    #[test]
    fn monotone_input_is_reproduced() {
        let pts = [(0.1, 0.2), (0.4, 0.3), (0.8, 0.9)];
        let cal = fit_isotonic(&pairs(&pts)).unwrap();
        for (x, y) in pts {
            assert_eq!(cal.evaluate(x), y);
        }
    }

    #[test]
    fn hand_run_pava() {
        let cal = fit_isotonic(&pairs(&[(0.1, 0.3), (0.2, 0.2), (0.3, 0.6)])).unwrap();
        let fitted: Vec<f64> = [0.1, 0.2, 0.3].iter().map(|&x| cal.evaluate(x)).collect();
        assert!((fitted[0] - 0.25).abs() < 1e-15);
        assert!((fitted[1] - 0.25).abs() < 1e-15);
        assert_eq!(fitted[2], 0.6);
    }

    #[test]
    fn constant_targets_give_constant_map() {
        let cal = fit_isotonic(&pairs(&[(0.9, 0.4), (0.1, 0.4), (0.5, 0.4)])).unwrap();
        for x in [0.0, 0.3, 0.77, 1.0] {
            assert_eq!(cal.evaluate(x), 0.4);
        }
    }

    #[test]
    fn equal_scores_are_pooled() {
        let cal = fit_isotonic(&pairs(&[(0.5, 0.2), (0.5, 0.6), (0.7, 0.9)])).unwrap();
        assert_eq!(cal.knots().len(), 2);
        assert!((cal.evaluate(0.5) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn interpolation_and_extrapolation() {
        let cal = IsotonicCalibrator::from_knots(vec![(0.2, 0.1), (0.6, 0.5)]).unwrap();
        assert_eq!(cal.evaluate(0.0), 0.1);
        assert_eq!(cal.evaluate(1.0), 0.5);
        assert!((cal.evaluate(0.4) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn invalid_knots_rejected() {
        assert!(IsotonicCalibrator::from_knots(vec![]).is_err());
        assert!(IsotonicCalibrator::from_knots(vec![(0.2, 0.5), (0.2, 0.6)]).is_err());
        assert!(IsotonicCalibrator::from_knots(vec![(0.2, 0.5), (0.3, 0.4)]).is_err());
        assert!(IsotonicCalibrator::from_knots(vec![(0.2, 1.5)]).is_err());
    }

    #[test]
    fn empty_inputs_fail() {
        assert!(matches!(fit_isotonic(&[]), Err(Error::Fit(_))));
        assert!(matches!(
            fit_calibrator_set_from_pairs(
                &[],
                CalibrationMode::ClassAgnostic,
                CalibrationMethod::Isotonic
            ),
            Err(Error::Fit(_))
        ));
    }

    #[test]
    fn linear_fits() {
        let id = fit_linear(&pairs(&[(0.1, 0.1), (0.5, 0.5), (0.9, 0.9)])).unwrap();
        assert!((id.a - 1.0).abs() < 1e-12 && id.b.abs() < 1e-12);
        let half = fit_linear(&pairs(&[(0.0, 0.0), (1.0, 0.5)])).unwrap();
        assert_eq!((half.a, half.b), (0.5, 0.0));
        assert!(matches!(
            fit_linear(&pairs(&[(0.3, 0.1), (0.3, 0.9)])),
            Err(Error::Fit(_))
        ));
        assert!(matches!(
            fit_linear(&pairs(&[(0.3, 0.1)])),
            Err(Error::Fit(_))
        ));
    }

    #[test]
    fn linear_output_is_clamped() {
        let l = LinearCalibrator { a: 2.0, b: -0.5 };
        assert_eq!(l.evaluate(0.1), 0.0);
        assert_eq!(l.evaluate(0.9), 1.0);
        assert_eq!(LinearCalibrator { a: 0.5, b: 0.0 }.evaluate(0.8), 0.4);
    }

    #[test]
    fn negative_slope_warns() {
        let set = fit_calibrator_set_from_pairs(
            &pairs(&[(0.1, 0.9), (0.9, 0.1)]),
            CalibrationMode::ClassAgnostic,
            CalibrationMethod::Linear,
        )
        .unwrap();
        assert_eq!(set.warnings().len(), 1);
        assert!(set.evaluate(1, 0.2) > set.evaluate(1, 0.8));
    }

    #[test]
    fn class_wise_fallbacks() {
        let mut ps = pairs(&[(0.1, 0.2), (0.5, 0.4), (0.9, 0.3)]);
        ps[2].class_id = 2;
        let set = fit_calibrator_set_from_pairs(
            &ps,
            CalibrationMode::ClassWise,
            CalibrationMethod::Isotonic,
        )
        .unwrap();
        assert_eq!(set.len(), 2);
        assert!(matches!(set.for_class(1), Calibrator::Isotonic(_)));
        assert_eq!(set.for_class(2), &Calibrator::Identity);
        assert_eq!(set.for_class(42), &Calibrator::Identity);
        assert_eq!(set.warnings().len(), 1);

        let ca = fit_calibrator_set_from_pairs(
            &ps,
            CalibrationMode::ClassAgnostic,
            CalibrationMethod::Isotonic,
        )
        .unwrap();
        assert_eq!(ca.len(), 1);
    }

    #[test]
    fn json_round_trip_on_fit_examples() {
        let sets = [
            fit_calibrator_set_from_pairs(
                &pairs(&[(0.1, 0.3), (0.2, 0.2), (0.3, 0.6)]),
                CalibrationMode::ClassAgnostic,
                CalibrationMethod::Isotonic,
            )
            .unwrap(),
            fit_calibrator_set_from_pairs(
                &pairs(&[(0.0, 0.0), (1.0, 0.5)]),
                CalibrationMode::ClassWise,
                CalibrationMethod::Linear,
            )
            .unwrap(),
            CalibratorSet::identity(),
        ];
        for set in sets {
            let json = calibrators_to_json(&set);
            let back = parse_calibrators(&json).unwrap();
            assert_eq!(calibrators_to_json(&back), json);
            for i in 0..=10_000 {
                let x = i as f64 / 10_000.0;
                assert_eq!(set.evaluate(1, x).to_bits(), back.evaluate(1, x).to_bits());
            }
        }
    }

    #[test]
    fn malformed_calibrator_files() {
        assert!(parse_calibrators("{").is_err());
        assert!(parse_calibrators(
            r#"{"mode": "class_agnostic", "method": "isotonic", "calibrators": []}"#
        )
        .is_err());
        assert!(parse_calibrators(
            r#"{"mode": "class_wise", "method": "linear", "calibrators": [{"class_id": null, "kind": "linear", "a": 1, "b": 0}]}"#
        )
        .is_err());
        assert!(parse_calibrators(
            r#"{"mode": "class_agnostic", "method": "isotonic", "calibrators": [{"class_id": null, "kind": "isotonic", "knots": [[0.5, 0.9], [0.6, 0.1]]}]}"#
        )
        .is_err());
    }

    fn arb_points(max: usize) -> impl Strategy<Value = Vec<(f64, f64)>> {
        // coarse grids produce equal scores and many violators
        prop::collection::vec((0u8..=10, 0u8..=20), 1..=max).prop_map(|v| {
            v.into_iter()
                .map(|(x, y)| (x as f64 / 10.0, y as f64 / 20.0))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn pava_matches_exhaustive_search(points in arb_points(6)) {
            let cal = fit_isotonic(&pairs(&points)).unwrap();
            let got = sse(&points, |x| cal.evaluate(x));
            let best = brute_force_isotonic_sse(&points);
            prop_assert!((got - best).abs() <= 1e-9, "pava {} vs exhaustive {}", got, best);
        }

        #[test]
        fn calibrators_are_monotone_and_bounded(points in arb_points(40), a in 0.0..1.0f64, b in 0.0..1.0f64) {
            let iso = Calibrator::Isotonic(fit_isotonic(&pairs(&points)).unwrap());
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(iso.evaluate(lo) <= iso.evaluate(hi));
            prop_assert!((0.0..=1.0).contains(&iso.evaluate(lo)));
            if let Ok(lin) = fit_linear(&pairs(&points)) {
                let lin_cal = Calibrator::Linear(lin);
                prop_assert!((0.0..=1.0).contains(&lin_cal.evaluate(lo)));
                if lin.a >= 0.0 {
                    prop_assert!(lin_cal.evaluate(lo) <= lin_cal.evaluate(hi));
                }
            }
        }
    }
}
