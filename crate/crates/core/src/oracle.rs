//! Oracle experiments on synthetic scenes: the Oracle MoE, a reference AP
//! implementation, a scene generator with controllable miscalibration and
//! the AP-optimality check for IoU-calibrated mixtures.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calib::{fit_calibrator_set, CalibrationMethod, CalibrationMode, CalibratorSet};
use crate::detections::{
    concat_experts, ClassId, Detection, DetectionStore, ExpertId, GroundTruth, GroundTruthSet,
    ImageId,
};
use crate::error::{Error, Result};
use crate::fuse::{aggregate, contribution_shares, fuse_pipeline, FusionConfig};
use crate::geometry::{AxisAlignedBox, BBox, GeometryKind};
use crate::matching::psi_target;
use crate::metrics::{
    average_recall, coco_ap, coco_taus, format_table, pct, ApRule, DEFAULT_MAX_DETS,
};

pub const DEFAULT_DEMO_SEED: u64 = 20_240_915;
pub const DEFAULT_THEOREM_SEED: u64 = 7;
/// Standard-NMS threshold used by the optimality check.
pub const THEOREM_IOU_NMS: f64 = 0.5;

/// Replaces every score by the detection's ψ-target IoU.
pub fn make_oracle_moe(stores: &[DetectionStore], gts: &GroundTruthSet) -> Vec<DetectionStore> {
    stores
        .iter()
        .map(|s| s.map_scores(|d| psi_target(d, gts.group(&d.image_id, d.class_id))))
        .collect()
}

/// Class-averaged 101-point AP at `tau`, computed straight from the
/// definition with quadratic loops. Shares no code with [`coco_ap`] beyond
/// box IoU; it exists to cross-check it.
pub fn brute_force_ap(dets: &DetectionStore, gts: &GroundTruthSet, tau: f64) -> f64 {
    let mut classes: Vec<ClassId> = gts
        .ground_truths()
        .iter()
        .filter(|g| !g.ignore)
        .map(|g| g.class_id)
        .collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for &c in &classes {
        total += brute_force_class_ap(dets.detections(), gts.ground_truths(), c, tau);
    }
    total / classes.len() as f64
}

fn brute_force_class_ap(dets: &[Detection], gts: &[GroundTruth], class: ClassId, tau: f64) -> f64 {
    let mut ranked: Vec<&Detection> = dets.iter().filter(|d| d.class_id == class).collect();
    ranked.sort_by(|a, b| {
        if a.score != b.score {
            b.score.partial_cmp(&a.score).unwrap()
        } else {
            a.det_id.cmp(&b.det_id)
        }
    });
    let objects: Vec<&GroundTruth> = gts.iter().filter(|g| g.class_id == class).collect();
    let m = objects.iter().filter(|g| !g.ignore).count();

    // images are independent, so walking the global ranking reproduces
    // per-image greedy matching
    let mut taken = vec![false; objects.len()];
    let mut flags: Vec<bool> = Vec::new();
    for d in ranked {
        let mut best: Option<usize> = None;
        let mut best_iou = -1.0;
        let mut hits_ignore = false;
        for (k, g) in objects.iter().enumerate() {
            if g.image_id != d.image_id {
                continue;
            }
            let iou = d.bbox.iou(&g.bbox);
            if iou < tau {
                continue;
            }
            if g.ignore {
                hits_ignore = true;
                continue;
            }
            if taken[k] {
                continue;
            }
            let better = match best {
                None => true,
                Some(b) => iou > best_iou || (iou == best_iou && g.gt_id < objects[b].gt_id),
            };
            if better {
                best = Some(k);
                best_iou = iou;
            }
        }
        match best {
            Some(k) => {
                taken[k] = true;
                flags.push(true);
            }
            None if hits_ignore => {}
            None => flags.push(false),
        }
    }

    let n = flags.len();
    let recall_at = |i: usize| flags[..=i].iter().filter(|f| **f).count() as f64 / m as f64;
    let precision_at =
        |i: usize| flags[..=i].iter().filter(|f| **f).count() as f64 / (i + 1) as f64;
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = f64::from(k) / 100.0;
        let mut first = None;
        for i in 0..n {
            if recall_at(i) >= r {
                first = Some(i);
                break;
            }
        }
        if let Some(i) = first {
            let mut best = 0.0;
            for j in i..n {
                let p = precision_at(j);
                if p > best {
                    best = p;
                }
            }
            sum += best;
        }
    }
    sum / 101.0
}

/// How an expert distorts IoU-calibrated scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Miscalibration {
    Identity,
    /// `x^gamma`: overconfident for gamma < 1, underconfident for gamma > 1.
    Power {
        gamma: f64,
    },
    /// `a·x + b`, clamped into [0, 1].
    Affine {
        a: f64,
        b: f64,
    },
}

impl Miscalibration {
    pub fn apply(&self, x: f64) -> f64 {
        let y = match *self {
            Miscalibration::Identity => x,
            Miscalibration::Power { gamma } => x.powf(gamma),
            Miscalibration::Affine { a, b } => a * x + b,
        };
        y.clamp(0.0, 1.0)
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Miscalibration::Power { gamma } if !(gamma > 0.0 && gamma.is_finite()) => Err(
                Error::Domain(format!("power miscalibration needs gamma > 0, got {gamma}")),
            ),
            Miscalibration::Affine { a, b } if !(a.is_finite() && b.is_finite()) => Err(
                Error::Domain("affine miscalibration needs finite coefficients".into()),
            ),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertSpec {
    #[serde(default)]
    pub name: String,
    /// Each box corner moves by up to this fraction of the box size.
    pub noise: f64,
    /// Probability of missing each object.
    pub miss_prob: f64,
    /// Expected number of false positives per image.
    pub fp_per_image: f64,
    pub miscalibration: Miscalibration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSceneSpec {
    pub num_images: usize,
    pub gts_per_image: usize,
    pub num_classes: usize,
    pub image_size: f64,
    pub min_box: f64,
    pub max_box: f64,
    /// Objects are pairwise disjoint with at least this gap in pixels.
    pub min_gt_separation: f64,
    /// False positives have IoU below this with every object.
    pub fp_max_iou: f64,
    /// Probability that an object is missed by every expert.
    #[serde(default)]
    pub shared_miss_prob: f64,
    pub experts: Vec<ExpertSpec>,
    pub seed: u64,
}

impl SyntheticSceneSpec {
    /// Scenes for the optimality check: three experts of differing quality.
    pub fn theorem_default() -> Self {
        let expert = |name: &str, noise, miss_prob, miscalibration| ExpertSpec {
            name: name.into(),
            noise,
            miss_prob,
            fp_per_image: 3.0,
            miscalibration,
        };
        Self {
            num_images: 4,
            gts_per_image: 5,
            num_classes: 2,
            image_size: 640.0,
            min_box: 32.0,
            max_box: 128.0,
            min_gt_separation: 48.0,
            fp_max_iou: 0.5,
            shared_miss_prob: 0.0,
            experts: vec![
                expert("a", 0.06, 0.2, Miscalibration::Power { gamma: 0.5 }),
                expert("b", 0.1, 0.3, Miscalibration::Identity),
                expert("c", 0.14, 0.4, Miscalibration::Power { gamma: 2.0 }),
            ],
            seed: DEFAULT_THEOREM_SEED,
        }
    }

    /// Two experts of similar quality, one overconfident, one underconfident.
    pub fn demo_default() -> Self {
        let expert = |name: &str, noise, miss_prob, gamma| ExpertSpec {
            name: name.into(),
            noise,
            miss_prob,
            fp_per_image: 100.0,
            miscalibration: Miscalibration::Power { gamma },
        };
        Self {
            num_images: 120,
            gts_per_image: 8,
            num_classes: 3,
            image_size: 800.0,
            min_box: 32.0,
            max_box: 128.0,
            min_gt_separation: 16.0,
            fp_max_iou: 0.5,
            shared_miss_prob: 0.3,
            experts: vec![
                // finds more objects, localises them less precisely
                expert("overconfident", 0.16, 0.05, 0.3),
                expert("underconfident", 0.08, 0.2, 3.0),
            ],
            seed: DEFAULT_DEMO_SEED,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |what: &str| Err(Error::Domain(format!("scene spec: {what}")));
        if self.num_classes == 0 {
            return fail("num_classes must be positive");
        }
        if !(self.min_box > 0.0 && self.min_box <= self.max_box && self.max_box < self.image_size) {
            return fail("box sizes must satisfy 0 < min_box <= max_box < image_size");
        }
        if !(self.min_gt_separation >= 0.0 && self.min_gt_separation.is_finite()) {
            return fail("min_gt_separation must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.shared_miss_prob) {
            return fail("shared_miss_prob must be in [0, 1]");
        }
        if !(self.fp_max_iou > 0.0 && self.fp_max_iou <= 1.0) {
            return fail("fp_max_iou must be in (0, 1]");
        }
        for e in &self.experts {
            if !(0.0..=1.0).contains(&e.miss_prob) {
                return fail("miss_prob must be in [0, 1]");
            }
            if !(e.noise >= 0.0 && e.noise < 0.5) {
                return fail("noise must be in [0, 0.5)");
            }
            if !(e.fp_per_image >= 0.0 && e.fp_per_image.is_finite()) {
                return fail("fp_per_image must be non-negative");
            }
            e.miscalibration.validate()?;
        }
        Ok(())
    }
}

/// One synthetic dataset: per-expert detections and the shared ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub experts: Vec<DetectionStore>,
    pub gts: GroundTruthSet,
}

/// Mixes a base seed with a stream index into an independent seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn axis(b: AxisAlignedBox) -> BBox {
    BBox::Axis(b)
}

fn place_objects(
    spec: &SyntheticSceneSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(ClassId, AxisAlignedBox)>> {
    let gap = spec.min_gt_separation;
    let mut placed: Vec<(ClassId, AxisAlignedBox)> = Vec::with_capacity(spec.gts_per_image);
    let mut attempts = 0;
    while placed.len() < spec.gts_per_image {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::Domain(
                "could not place separated objects; use fewer or smaller boxes".into(),
            ));
        }
        let w = rng.gen_range(spec.min_box..=spec.max_box);
        let h = rng.gen_range(spec.min_box..=spec.max_box);
        let x = rng.gen_range(0.0..=spec.image_size - w);
        let y = rng.gen_range(0.0..=spec.image_size - h);
        let b = AxisAlignedBox::new(x, y, x + w, y + h)?;
        let clear = placed.iter().all(|(_, o)| {
            b.x_min >= o.x_max + gap
                || o.x_min >= b.x_max + gap
                || b.y_min >= o.y_max + gap
                || o.y_min >= b.y_max + gap
        });
        if clear {
            let class = rng.gen_range(0..spec.num_classes) as ClassId + 1;
            placed.push((class, b));
        }
    }
    Ok(placed)
}

fn jitter(b: &AxisAlignedBox, noise: f64, rng: &mut ChaCha8Rng) -> AxisAlignedBox {
    let (w, h) = (b.width(), b.height());
    let mut d = |scale: f64| {
        if noise > 0.0 {
            rng.gen_range(-noise..=noise) * scale
        } else {
            0.0
        }
    };
    let x_min = b.x_min + d(w);
    let y_min = b.y_min + d(h);
    let x_max = (b.x_max + d(w)).max(x_min + 1e-3 * w);
    let y_max = (b.y_max + d(h)).max(y_min + 1e-3 * h);
    AxisAlignedBox::new(x_min, y_min, x_max, y_max).expect("jittered corners are ordered")
}

fn false_positive(
    spec: &SyntheticSceneSpec,
    objects: &[(ClassId, AxisAlignedBox)],
    rng: &mut ChaCha8Rng,
) -> (ClassId, AxisAlignedBox) {
    let mut class = rng.gen_range(0..spec.num_classes) as ClassId + 1;
    for _ in 0..64 {
        // poorly localised boxes of an object's class next to it; background
        // only for empty images
        let candidate =
            if let Some(&(c, o)) = objects.get(rng.gen_range(0..objects.len().max(1))) {
                class = c;
                let shift = rng.gen_range(0.3..0.9);
                let (sx, sy) = if rng.gen_bool(0.5) {
                    (shift, rng.gen_range(-0.2..0.2))
                } else {
                    (rng.gen_range(-0.2..0.2), shift)
                };
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let scale = rng.gen_range(0.7..1.4);
                let (w, h) = (o.width() * scale, o.height() * scale);
                let cx = (o.x_min + o.x_max) / 2.0 + sign * sx * o.width();
                let cy = (o.y_min + o.y_max) / 2.0 + sign * sy * o.height();
                AxisAlignedBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
            } else {
                let w = rng.gen_range(spec.min_box..=spec.max_box);
                let h = rng.gen_range(spec.min_box..=spec.max_box);
                let x = rng.gen_range(0.0..=spec.image_size - w);
                let y = rng.gen_range(0.0..=spec.image_size - h);
                AxisAlignedBox::new(x, y, x + w, y + h)
            }
            .expect("candidate corners are ordered");
        if objects
            .iter()
            .all(|(_, o)| crate::geometry::iou_aabb(&candidate, o) < spec.fp_max_iou)
        {
            return (class, candidate);
        }
    }
    // outside the image, so it overlaps nothing
    let s = spec.min_box;
    let x = spec.image_size + s;
    (
        class,
        AxisAlignedBox::new(x, x, x + s, x + s).expect("ordered"),
    )
}

/// Generates one dataset from `spec.seed`.
pub fn gen_synthetic(spec: &SyntheticSceneSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut gts = Vec::new();
    let mut raw: Vec<Vec<Detection>> = vec![Vec::new(); spec.experts.len()];
    for image in 1..=spec.num_images {
        let image_id = ImageId::from(image as i64);
        let objects = place_objects(spec, &mut rng)?;
        let image_gts: Vec<GroundTruth> = objects
            .iter()
            .enumerate()
            .map(|(k, &(class_id, b))| GroundTruth {
                gt_id: (gts.len() + k + 1) as u64,
                image_id: image_id.clone(),
                class_id,
                bbox: axis(b),
                ignore: false,
            })
            .collect();
        let hard: Vec<bool> = objects
            .iter()
            .map(|_| rng.gen_bool(spec.shared_miss_prob))
            .collect();
        for (e, expert) in spec.experts.iter().enumerate() {
            let mut boxes: Vec<(ClassId, AxisAlignedBox)> = Vec::new();
            for (&(class_id, b), &hard) in objects.iter().zip(&hard) {
                if !hard && !rng.gen_bool(expert.miss_prob) {
                    boxes.push((class_id, jitter(&b, expert.noise, &mut rng)));
                }
            }
            let whole = expert.fp_per_image.floor();
            let extra = usize::from(rng.gen_bool(expert.fp_per_image - whole));
            for _ in 0..(whole as usize + extra) {
                boxes.push(false_positive(spec, &objects, &mut rng));
            }
            for (class_id, b) in boxes {
                let same_class: Vec<GroundTruth> = image_gts
                    .iter()
                    .filter(|g| g.class_id == class_id)
                    .cloned()
                    .collect();
                let mut det = Detection {
                    det_id: raw[e].len() as u64,
                    image_id: image_id.clone(),
                    class_id,
                    bbox: axis(b),
                    score: 0.0,
                    expert_id: e as ExpertId,
                };
                det.score = expert.miscalibration.apply(psi_target(&det, &same_class));
                raw[e].push(det);
            }
        }
        gts.extend(image_gts);
    }
    let experts = raw
        .into_iter()
        .map(|dets| DetectionStore::new(GeometryKind::AxisAligned, dets))
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticData {
        experts,
        gts: GroundTruthSet::new(GeometryKind::AxisAligned, gts)?,
    })
}

/// Objects covered at IoU ≥ `tau` by at least one detection, per class.
/// Objects are disjoint, so each detection covers at most one of them.
fn covered_per_class(
    dets: &[&DetectionStore],
    gts: &GroundTruthSet,
    tau: f64,
) -> BTreeMap<ClassId, usize> {
    let mut covered: BTreeMap<ClassId, usize> = BTreeMap::new();
    for g in gts.ground_truths().iter().filter(|g| !g.ignore) {
        let hit = dets.iter().any(|s| {
            s.group(&g.image_id, g.class_id)
                .iter()
                .any(|d| d.bbox.iou(&g.bbox) >= tau)
        });
        *covered.entry(g.class_id).or_insert(0) += usize::from(hit);
    }
    covered
}

/// True when `fused` holds exactly one detection with ψ-IoU ≥ `tau` for every
/// object the raw detections cover, i.e. suppression removed every duplicate
/// and no true positive.
fn postprocessing_assumption_holds(
    fused: &DetectionStore,
    raw: &[&DetectionStore],
    gts: &GroundTruthSet,
    tau: f64,
) -> bool {
    let expected = covered_per_class(raw, gts, tau);
    let after = covered_per_class(&[fused], gts, tau);
    let above: BTreeMap<ClassId, usize> =
        fused
            .iter()
            .filter(|d| d.score >= tau)
            .fold(BTreeMap::new(), |mut acc, d| {
                *acc.entry(d.class_id).or_insert(0) += 1;
                acc
            });
    expected == after
        && expected
            .iter()
            .all(|(c, &n)| above.get(c).copied().unwrap_or(0) == n)
        && above.keys().all(|c| expected.contains_key(c))
}

fn objects_separated(gts: &GroundTruthSet, iou_nms: f64) -> bool {
    let all = gts.ground_truths();
    all.iter().enumerate().all(|(i, a)| {
        all[i + 1..]
            .iter()
            .filter(|b| b.image_id == a.image_id)
            .all(|b| a.bbox.iou(&b.bbox) < iou_nms)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassCheck {
    pub class_id: ClassId,
    pub n_tp: usize,
    pub m: usize,
    pub ap: f64,
    pub expected: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SceneCheck {
    pub scene: usize,
    pub seed: u64,
    pub tau: f64,
    pub classes: Vec<ClassCheck>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleCheckReport {
    pub scenes: usize,
    pub taus: Vec<f64>,
    pub ap_rule: ApRule,
    pub tolerance: f64,
    pub passed: usize,
    /// Candidate scenes discarded because the separation or post-processing
    /// assumption did not hold.
    pub rejected: usize,
    pub checks: Vec<SceneCheck>,
}

impl OracleCheckReport {
    pub fn all_passed(&self) -> bool {
        self.passed == self.scenes
    }
}

pub const THEOREM_TOLERANCE: f64 = 1e-9;
const MAX_ATTEMPTS: u64 = 1000;

/// Standard NMS at [`THEOREM_IOU_NMS`] without Score Voting.
pub fn theorem_config() -> FusionConfig {
    FusionConfig::standard(THEOREM_IOU_NMS)
}

/// Checks, on `scenes` generated scenes, that the Oracle MoE fused with `cfg`
/// reaches AP = N_TP/M for every class at every threshold.
///
/// Scenes whose objects overlap at the NMS threshold, or whose fusion leaves
/// a duplicate or drops a covered object, are regenerated from the next seed.
pub fn verify_theorem(
    spec: &SyntheticSceneSpec,
    cfg: &FusionConfig,
    scenes: usize,
    taus: &[f64],
) -> Result<OracleCheckReport> {
    spec.validate()?;
    cfg.validate()?;
    if taus.is_empty() {
        return Err(Error::Domain(
            "at least one IoU threshold is required".into(),
        ));
    }
    let iou_nms = cfg.iou_threshold(GeometryKind::AxisAligned);
    let results: Vec<(Vec<SceneCheck>, usize)> = (0..scenes)
        .into_par_iter()
        .map(|scene| {
            let mut rejected = 0;
            for attempt in 0..MAX_ATTEMPTS {
                let seed = derive_seed(spec.seed, ((scene as u64) << 20) | attempt);
                let data = gen_synthetic(&SyntheticSceneSpec {
                    seed,
                    ..spec.clone()
                })?;
                let oracle = make_oracle_moe(&data.experts, &data.gts);
                let identities = vec![CalibratorSet::identity(); oracle.len()];
                let fused = fuse_pipeline(&oracle, &identities, cfg)?;
                let raw: Vec<&DetectionStore> = data.experts.iter().collect();
                let valid = objects_separated(&data.gts, iou_nms)
                    && taus
                        .iter()
                        .all(|&t| postprocessing_assumption_holds(&fused, &raw, &data.gts, t));
                if !valid {
                    rejected += 1;
                    continue;
                }
                let checks = taus
                    .iter()
                    .map(|&tau| check_scene(scene, seed, tau, &fused, &raw, &data.gts))
                    .collect::<Result<Vec<_>>>()?;
                return Ok((checks, rejected));
            }
            Err(Error::Domain(format!(
                "scene {scene}: no valid scene in {MAX_ATTEMPTS} attempts"
            )))
        })
        .collect::<Result<_>>()?;
    let rejected = results.iter().map(|r| r.1).sum();
    let checks: Vec<SceneCheck> = results.into_iter().flat_map(|r| r.0).collect();
    let passed = (0..scenes)
        .filter(|s| checks.iter().filter(|c| c.scene == *s).all(|c| c.pass))
        .count();
    Ok(OracleCheckReport {
        scenes,
        taus: taus.to_vec(),
        ap_rule: ApRule::Area,
        tolerance: THEOREM_TOLERANCE,
        passed,
        rejected,
        checks,
    })
}

fn check_scene(
    scene: usize,
    seed: u64,
    tau: f64,
    fused: &DetectionStore,
    raw: &[&DetectionStore],
    gts: &GroundTruthSet,
) -> Result<SceneCheck> {
    let table = coco_ap(fused, gts, &[tau], usize::MAX, ApRule::Area)?;
    let covered = covered_per_class(raw, gts, tau);
    let classes: Vec<ClassCheck> = gts
        .counts_per_class()
        .into_iter()
        .map(|(class_id, m)| {
            let n_tp = covered.get(&class_id).copied().unwrap_or(0);
            let ap = table.per_class[&class_id][0];
            let expected = n_tp as f64 / m as f64;
            ClassCheck {
                class_id,
                n_tp,
                m,
                ap,
                expected,
                pass: (ap - expected).abs() <= THEOREM_TOLERANCE,
            }
        })
        .collect();
    let pass = classes.iter().all(|c| c.pass);
    Ok(SceneCheck {
        scene,
        seed,
        tau,
        classes,
        pass,
    })
}

impl OracleCheckReport {
    pub fn to_table(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .checks
            .iter()
            .flat_map(|s| {
                s.classes.iter().map(move |c| {
                    vec![
                        s.scene.to_string(),
                        format!("{:.2}", s.tau),
                        c.class_id.to_string(),
                        c.n_tp.to_string(),
                        c.m.to_string(),
                        pct(c.ap),
                        pct(c.expected),
                        if c.pass { "yes" } else { "NO" }.to_string(),
                    ]
                })
            })
            .collect();
        let mut out = format_table(
            &["scene", "tau", "class", "N_TP", "M", "AP", "N_TP/M", "pass"],
            &rows,
        );
        out.push_str(&format!(
            "pass {}/{} (rejected candidates: {})\n",
            self.passed, self.scenes, self.rejected
        ));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DemoRow {
    pub name: String,
    pub ap: f64,
    pub ap50: f64,
    pub ar: f64,
    pub detections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DemoReport {
    pub seed: u64,
    pub rows: Vec<DemoRow>,
    /// Share of fused detections per expert, keyed by expert position.
    pub vanilla_shares: BTreeMap<ExpertId, f64>,
    pub calibrated_shares: BTreeMap<ExpertId, f64>,
    pub expert_names: Vec<String>,
}

impl DemoReport {
    pub fn row(&self, name: &str) -> Option<&DemoRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Best AP among the single experts.
    pub fn best_single_ap(&self) -> f64 {
        self.rows
            .iter()
            .filter(|r| r.name != VANILLA && r.name != CALIBRATED)
            .map(|r| r.ap)
            .fold(0.0, f64::max)
    }

    pub fn to_table(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.name.clone(),
                    pct(r.ap),
                    pct(r.ap50),
                    pct(r.ar),
                    r.detections.to_string(),
                ]
            })
            .collect();
        let mut out = format_table(&["model", "AP", "AP50", "AR", "detections"], &rows);
        out.push('\n');
        let share_rows: Vec<Vec<String>> = self
            .expert_names
            .iter()
            .enumerate()
            .map(|(i, n)| {
                let e = i as ExpertId;
                vec![
                    n.clone(),
                    pct(self.vanilla_shares.get(&e).copied().unwrap_or(0.0)),
                    pct(self.calibrated_shares.get(&e).copied().unwrap_or(0.0)),
                ]
            })
            .collect();
        out.push_str(&format_table(
            &["expert", "vanilla share", "calibrated share"],
            &share_rows,
        ));
        out
    }
}

pub const VANILLA: &str = "vanilla MoE";
pub const CALIBRATED: &str = "calibrated MoE";

fn demo_row(name: &str, dets: &DetectionStore, gts: &GroundTruthSet) -> Result<DemoRow> {
    let taus = coco_taus();
    let table = coco_ap(dets, gts, &taus, DEFAULT_MAX_DETS, ApRule::Coco101)?;
    Ok(DemoRow {
        name: name.to_string(),
        ap: table.ap(),
        ap50: table.ap_at_index(0),
        ar: average_recall(dets, gts, &taus, DEFAULT_MAX_DETS),
        detections: dets.len(),
    })
}

/// Compares single experts with the vanilla and the calibrated mixture.
///
/// Class-agnostic isotonic calibrators are fitted on a second dataset drawn
/// from the same spec with a derived seed; evaluation uses `spec.seed`.
pub fn miscalibration_demo(spec: &SyntheticSceneSpec, cfg: &FusionConfig) -> Result<DemoReport> {
    cfg.validate()?;
    let test = gen_synthetic(spec)?;
    let held_out = gen_synthetic(&SyntheticSceneSpec {
        seed: derive_seed(spec.seed, 1),
        ..spec.clone()
    })?;
    let calibrators = held_out
        .experts
        .iter()
        .map(|s| {
            fit_calibrator_set(
                s,
                &held_out.gts,
                CalibrationMode::ClassAgnostic,
                CalibrationMethod::Isotonic,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let identities = vec![CalibratorSet::identity(); test.experts.len()];
    let vanilla = fuse_pipeline(&test.experts, &identities, cfg)?;
    let calibrated = fuse_pipeline(&test.experts, &calibrators, cfg)?;

    let names: Vec<String> = spec
        .experts
        .iter()
        .enumerate()
        .map(|(i, e)| {
            if e.name.is_empty() {
                format!("expert {i}")
            } else {
                e.name.clone()
            }
        })
        .collect();
    let mut rows = test
        .experts
        .iter()
        .zip(&names)
        .map(|(s, n)| demo_row(n, s, &test.gts))
        .collect::<Result<Vec<_>>>()?;
    rows.push(demo_row(VANILLA, &vanilla, &test.gts)?);
    rows.push(demo_row(CALIBRATED, &calibrated, &test.gts)?);
    Ok(DemoReport {
        seed: spec.seed,
        rows,
        vanilla_shares: contribution_shares(&vanilla),
        calibrated_shares: contribution_shares(&calibrated),
        expert_names: names,
    })
}

/// Pools `experts` and aggregates them without calibration.
pub fn vanilla_moe(experts: &[DetectionStore], cfg: &FusionConfig) -> Result<DetectionStore> {
    Ok(aggregate(&concat_experts(experts)?, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{build_bins, laece, BinWeighting};

    fn small_spec(seed: u64) -> SyntheticSceneSpec {
        SyntheticSceneSpec {
            num_images: 2,
            seed,
            ..SyntheticSceneSpec::theorem_default()
        }
    }

    #[test]
    fn oracle_moe_scores() {
        let data = gen_synthetic(&small_spec(3)).unwrap();
        let once = make_oracle_moe(&data.experts, &data.gts);
        let twice = make_oracle_moe(&once, &data.gts);
        assert_eq!(once, twice);
        for d in once.iter().flat_map(|s| s.iter()) {
            let target = psi_target(d, data.gts.group(&d.image_id, d.class_id));
            assert_eq!(d.score, target);
        }
        let bins = build_bins(
            &concat_experts(&once).unwrap(),
            &data.gts,
            25,
            BinWeighting::Reduced,
        )
        .unwrap();
        assert!(laece(&bins) <= 1e-9);
    }

    #[test]
    fn perfect_expert_scores_one() {
        let mut spec = small_spec(5);
        spec.experts = vec![ExpertSpec {
            name: String::new(),
            noise: 0.0,
            miss_prob: 0.0,
            fp_per_image: 0.0,
            miscalibration: Miscalibration::Identity,
        }];
        let data = gen_synthetic(&spec).unwrap();
        assert_eq!(data.experts[0].len(), data.gts.len());
        assert!(data.experts[0].iter().all(|d| d.score == 1.0));
    }

    #[test]
    fn full_miss_gives_only_false_positives() {
        let mut spec = small_spec(9);
        for e in &mut spec.experts {
            e.miss_prob = 1.0;
        }
        let data = gen_synthetic(&spec).unwrap();
        for s in &data.experts {
            assert!(s
                .iter()
                .all(|d| psi_target(d, data.gts.group(&d.image_id, d.class_id)) < spec.fp_max_iou));
        }
    }

    #[test]
    fn generation_is_seeded() {
        let a = gen_synthetic(&small_spec(11)).unwrap();
        let b = gen_synthetic(&small_spec(11)).unwrap();
        let c = gen_synthetic(&small_spec(12)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn objects_are_disjoint() {
        let data = gen_synthetic(&small_spec(4)).unwrap();
        assert!(objects_separated(&data.gts, f64::MIN_POSITIVE));
    }

    #[test]
    fn theorem_holds_on_a_few_scenes() {
        let report = verify_theorem(
            &SyntheticSceneSpec::theorem_default(),
            &theorem_config(),
            8,
            &[0.5, 0.75],
        )
        .unwrap();
        assert!(report.all_passed(), "{}", report.to_table());
        assert_eq!(report.checks.len(), 16);
    }

    #[test]
    fn theorem_edge_cases() {
        let mut spec = small_spec(2);
        spec.experts.truncate(1);
        spec.experts[0].miss_prob = 1.0;
        let report = verify_theorem(&spec, &theorem_config(), 2, &[0.5]).unwrap();
        assert!(report.all_passed());
        assert!(report
            .checks
            .iter()
            .flat_map(|s| &s.classes)
            .all(|c| c.ap == 0.0 && c.n_tp == 0));

        spec.experts[0] = ExpertSpec {
            name: String::new(),
            noise: 0.0,
            miss_prob: 0.0,
            fp_per_image: 2.0,
            miscalibration: Miscalibration::Identity,
        };
        let report = verify_theorem(&spec, &theorem_config(), 2, &[0.5, 0.75]).unwrap();
        assert!(report
            .checks
            .iter()
            .flat_map(|s| &s.classes)
            .all(|c| c.ap == 1.0));
    }

    #[test]
    fn miscalibrated_mixture_can_miss_the_bound() {
        // the raw (uncalibrated) mixture is not guaranteed to reach N_TP/M
        let spec = SyntheticSceneSpec::theorem_default();
        let cfg = theorem_config();
        let mut below = 0;
        for s in 0..20 {
            let data = gen_synthetic(&SyntheticSceneSpec {
                seed: s,
                ..spec.clone()
            })
            .unwrap();
            let fused = vanilla_moe(&data.experts, &cfg).unwrap();
            let raw: Vec<&DetectionStore> = data.experts.iter().collect();
            let check = check_scene(0, s, 0.5, &fused, &raw, &data.gts).unwrap();
            below += usize::from(!check.pass);
        }
        assert!(below > 0);
    }

    #[test]
    fn brute_force_matches_hand_values() {
        let data = gen_synthetic(&small_spec(21)).unwrap();
        let pooled = concat_experts(&data.experts).unwrap();
        for tau in [0.5, 0.75] {
            let fast = coco_ap(&pooled, &data.gts, &[tau], usize::MAX, ApRule::Coco101)
                .unwrap()
                .ap();
            assert_eq!(brute_force_ap(&pooled, &data.gts, tau), fast);
        }
    }

    #[test]
    fn identity_calibrators_reproduce_vanilla() {
        let spec = SyntheticSceneSpec {
            num_images: 5,
            ..SyntheticSceneSpec::demo_default()
        };
        let data = gen_synthetic(&spec).unwrap();
        let cfg = FusionConfig::default();
        let ids = vec![CalibratorSet::identity(); data.experts.len()];
        assert_eq!(
            fuse_pipeline(&data.experts, &ids, &cfg).unwrap(),
            vanilla_moe(&data.experts, &cfg).unwrap()
        );
    }

    #[test]
    fn miscalibration_functions() {
        assert_eq!(Miscalibration::Identity.apply(0.3), 0.3);
        assert_eq!(Miscalibration::Power { gamma: 2.0 }.apply(0.5), 0.25);
        assert_eq!(Miscalibration::Affine { a: 2.0, b: 0.5 }.apply(0.5), 1.0);
        assert!(Miscalibration::Power { gamma: 0.0 }.validate().is_err());
    }
}
