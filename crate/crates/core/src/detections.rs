//! Detections, ground truth, and their COCO-style JSON files.
//!
//! Detection files are COCO "results" arrays:
//! `[{"image_id", "category_id", "bbox", "score", "expert_id"?}, ...]`, where
//! `bbox` is `[x, y, w, h]` for axis-aligned stores and `[cx, cy, w, h, theta]`
//! for rotated ones. Ground-truth files are objects with an `"annotations"`
//! array of `{"image_id", "category_id", "bbox", "id", "iscrowd"?, "ignore"?}`.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, GeometryKind};

pub type ClassId = i64;
pub type ExpertId = u32;

/// Image key. Files may carry integer or string ids; both normalise to a string.
///
/// Ordering puts canonical integers first, numerically, then other strings
/// lexicographically.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ImageId(String);

impl ImageId {
    pub fn new(id: impl Into<String>) -> Self {
        ImageId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// The integer value when the key is a canonically formatted integer.
    pub fn as_int(&self) -> Option<i64> {
        self.0
            .parse::<i64>()
            .ok()
            .filter(|v| v.to_string() == self.0)
    }
}

impl From<i64> for ImageId {
    fn from(v: i64) -> Self {
        ImageId(v.to_string())
    }
}

impl From<&str> for ImageId {
    fn from(v: &str) -> Self {
        ImageId(v.to_string())
    }
}

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl Ord for ImageId {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self.as_int(), other.as_int()) {
            (Some(a), Some(b)) => a.cmp(&b),
            (Some(_), None) => Ordering::Less,
            (None, Some(_)) => Ordering::Greater,
            (None, None) => self.0.cmp(&other.0),
        }
    }
}

impl PartialOrd for ImageId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum WireImageId {
    Int(i64),
    Str(String),
}

impl From<WireImageId> for ImageId {
    fn from(w: WireImageId) -> Self {
        match w {
            WireImageId::Int(v) => ImageId::from(v),
            WireImageId::Str(s) => ImageId(s),
        }
    }
}

impl From<&ImageId> for WireImageId {
    fn from(id: &ImageId) -> Self {
        match id.as_int() {
            Some(v) => WireImageId::Int(v),
            None => WireImageId::Str(id.0.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub det_id: u64,
    pub image_id: ImageId,
    pub class_id: ClassId,
    pub bbox: BBox,
    pub score: f64,
    pub expert_id: ExpertId,
}

impl Detection {
    /// Canonical store order: image, class, score descending, det_id.
    pub fn canonical_cmp(&self, other: &Self) -> Ordering {
        self.image_id
            .cmp(&other.image_id)
            .then(self.class_id.cmp(&other.class_id))
            .then_with(|| rank_cmp(self, other))
    }
}

/// Score descending, ties broken by ascending det_id.
pub fn rank_cmp(a: &Detection, b: &Detection) -> Ordering {
    b.score.total_cmp(&a.score).then(a.det_id.cmp(&b.det_id))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub gt_id: u64,
    pub image_id: ImageId,
    pub class_id: ClassId,
    pub bbox: BBox,
    /// Crowd/ignore regions: never a calibration target, never counted in recall.
    pub ignore: bool,
}

type GroupKey = (ImageId, ClassId);

fn group_ranges<T>(items: &[T], key: impl Fn(&T) -> GroupKey) -> BTreeMap<GroupKey, Range<usize>> {
    let mut index = BTreeMap::new();
    let mut start = 0;
    while start < items.len() {
        let k = key(&items[start]);
        let mut end = start + 1;
        while end < items.len() && key(&items[end]) == k {
            end += 1;
        }
        index.insert(k, start..end);
        start = end;
    }
    index
}

/// An immutable, canonically ordered set of detections of a single geometry kind.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionStore {
    kind: GeometryKind,
    dets: Vec<Detection>,
    index: BTreeMap<GroupKey, Range<usize>>,
    experts: BTreeSet<ExpertId>,
}

impl DetectionStore {
    pub fn empty(kind: GeometryKind) -> Self {
        Self {
            kind,
            dets: Vec::new(),
            index: BTreeMap::new(),
            experts: BTreeSet::new(),
        }
    }

    /// Validates and indexes `dets`; input order is irrelevant.
    pub fn new(kind: GeometryKind, mut dets: Vec<Detection>) -> Result<Self> {
        let mut ids = BTreeSet::new();
        for d in &dets {
            if d.bbox.kind() != kind {
                return Err(Error::GeometryMismatch {
                    expected: kind,
                    found: d.bbox.kind(),
                });
            }
            if !(0.0..=1.0).contains(&d.score) {
                return Err(Error::Domain(format!(
                    "score {} of detection {} is outside [0, 1]",
                    d.score, d.det_id
                )));
            }
            if !ids.insert(d.det_id) {
                return Err(Error::Domain(format!("duplicate det_id {}", d.det_id)));
            }
        }
        dets.sort_by(Detection::canonical_cmp);
        let index = group_ranges(&dets, |d| (d.image_id.clone(), d.class_id));
        let experts = dets.iter().map(|d| d.expert_id).collect();
        Ok(Self {
            kind,
            dets,
            index,
            experts,
        })
    }

    pub fn kind(&self) -> GeometryKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.dets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dets.is_empty()
    }

    pub fn detections(&self) -> &[Detection] {
        &self.dets
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Detection> {
        self.dets.iter()
    }

    pub fn experts(&self) -> &BTreeSet<ExpertId> {
        &self.experts
    }

    /// Detections of one (image, class) group, score-descending.
    pub fn group(&self, image_id: &ImageId, class_id: ClassId) -> &[Detection] {
        self.index
            .get(&(image_id.clone(), class_id))
            .map_or(&[], |r| &self.dets[r.clone()])
    }

    /// All (image, class) groups in canonical order.
    pub fn groups(&self) -> impl Iterator<Item = (&ImageId, ClassId, &[Detection])> + '_ {
        self.index
            .iter()
            .map(|((img, cls), r)| (img, *cls, &self.dets[r.clone()]))
    }

    pub fn image_ids(&self) -> BTreeSet<&ImageId> {
        self.index.keys().map(|(img, _)| img).collect()
    }

    pub fn class_ids(&self) -> BTreeSet<ClassId> {
        self.index.keys().map(|(_, c)| *c).collect()
    }

    /// Keeps the detections satisfying `keep`; order is preserved.
    pub fn filter(&self, keep: impl Fn(&Detection) -> bool) -> Self {
        let dets = self.dets.iter().filter(|d| keep(d)).cloned().collect();
        Self::from_trusted(self.kind, dets)
    }

    /// Keeps, for every group, the sub-slice chosen by `pick`.
    pub fn filter_groups(&self, pick: impl Fn(&[Detection]) -> &[Detection]) -> Self {
        let dets = self
            .groups()
            .flat_map(|(_, _, g)| pick(g).to_vec())
            .collect();
        Self::from_trusted(self.kind, dets)
    }

    /// Replaces every score; values are clamped into [0, 1].
    pub fn map_scores(&self, f: impl Fn(&Detection) -> f64) -> Self {
        let dets = self
            .dets
            .iter()
            .map(|d| Detection {
                score: f(d).clamp(0.0, 1.0),
                ..d.clone()
            })
            .collect();
        Self::from_trusted(self.kind, dets)
    }

    /// Rebuilds from detections already known to satisfy the store invariants.
    pub(crate) fn from_trusted(kind: GeometryKind, dets: Vec<Detection>) -> Self {
        debug_assert!(dets.iter().all(|d| d.bbox.kind() == kind));
        Self::new(kind, dets).expect("detections satisfy store invariants")
    }

    pub fn into_detections(self) -> Vec<Detection> {
        self.dets
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthSet {
    kind: GeometryKind,
    gts: Vec<GroundTruth>,
    index: BTreeMap<GroupKey, Range<usize>>,
}

impl GroundTruthSet {
    pub fn new(kind: GeometryKind, mut gts: Vec<GroundTruth>) -> Result<Self> {
        let mut ids = BTreeSet::new();
        for g in &gts {
            if g.bbox.kind() != kind {
                return Err(Error::GeometryMismatch {
                    expected: kind,
                    found: g.bbox.kind(),
                });
            }
            if !ids.insert(g.gt_id) {
                return Err(Error::Domain(format!(
                    "duplicate annotation id {}",
                    g.gt_id
                )));
            }
        }
        gts.sort_by(|a, b| {
            a.image_id
                .cmp(&b.image_id)
                .then(a.class_id.cmp(&b.class_id))
                .then(a.gt_id.cmp(&b.gt_id))
        });
        let index = group_ranges(&gts, |g| (g.image_id.clone(), g.class_id));
        Ok(Self { kind, gts, index })
    }

    pub fn empty(kind: GeometryKind) -> Self {
        Self {
            kind,
            gts: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn kind(&self) -> GeometryKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.gts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gts.is_empty()
    }

    pub fn ground_truths(&self) -> &[GroundTruth] {
        &self.gts
    }

    /// Ground truths of one (image, class) group, ordered by gt_id.
    pub fn group(&self, image_id: &ImageId, class_id: ClassId) -> &[GroundTruth] {
        self.index
            .get(&(image_id.clone(), class_id))
            .map_or(&[], |r| &self.gts[r.clone()])
    }

    pub fn groups(&self) -> impl Iterator<Item = (&ImageId, ClassId, &[GroundTruth])> + '_ {
        self.index
            .iter()
            .map(|((img, cls), r)| (img, *cls, &self.gts[r.clone()]))
    }

    pub fn class_ids(&self) -> BTreeSet<ClassId> {
        self.index.keys().map(|(_, c)| *c).collect()
    }

    /// Number of non-ignored objects per class.
    pub fn counts_per_class(&self) -> BTreeMap<ClassId, usize> {
        let mut counts = BTreeMap::new();
        for g in self.gts.iter().filter(|g| !g.ignore) {
            *counts.entry(g.class_id).or_insert(0) += 1;
        }
        counts
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DetRecord {
    image_id: WireImageId,
    category_id: ClassId,
    bbox: Vec<f64>,
    score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    expert_id: Option<ExpertId>,
}

#[derive(Debug, Deserialize)]
struct GtFile {
    annotations: Vec<GtRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GtRecord {
    image_id: WireImageId,
    category_id: ClassId,
    bbox: Vec<f64>,
    id: u64,
    #[serde(default, skip_serializing_if = "is_zero")]
    iscrowd: u8,
    #[serde(default, skip_serializing_if = "is_zero")]
    ignore: u8,
}

fn is_zero(v: &u8) -> bool {
    *v == 0
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Parses a detection-results document; det_ids follow file order.
pub fn parse_detections(json: &str, kind: GeometryKind) -> Result<DetectionStore> {
    let records: Vec<DetRecord> = serde_json::from_str(json)?;
    let dets = records
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let bbox =
                BBox::from_wire(kind, &r.bbox).map_err(|e| annotate(e, &format!("record {i}")))?;
            Ok(Detection {
                det_id: i as u64,
                image_id: r.image_id.into(),
                class_id: r.category_id,
                bbox,
                score: r.score,
                expert_id: r.expert_id.unwrap_or(0),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    DetectionStore::new(kind, dets)
}

pub fn load_detections(path: impl AsRef<Path>, kind: GeometryKind) -> Result<DetectionStore> {
    parse_detections(&read_file(path.as_ref())?, kind)
}

pub fn parse_ground_truth(json: &str, kind: GeometryKind) -> Result<GroundTruthSet> {
    let file: GtFile = serde_json::from_str(json)?;
    let gts = file
        .annotations
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let bbox = BBox::from_wire(kind, &r.bbox)
                .map_err(|e| annotate(e, &format!("annotation {i}")))?;
            Ok(GroundTruth {
                gt_id: r.id,
                image_id: r.image_id.into(),
                class_id: r.category_id,
                bbox,
                ignore: r.iscrowd != 0 || r.ignore != 0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    GroundTruthSet::new(kind, gts)
}

pub fn load_ground_truth(path: impl AsRef<Path>, kind: GeometryKind) -> Result<GroundTruthSet> {
    parse_ground_truth(&read_file(path.as_ref())?, kind)
}

fn annotate(err: Error, context: &str) -> Error {
    match err {
        Error::Domain(msg) => Error::Domain(format!("{context}: {msg}")),
        Error::Parse(msg) => Error::Parse(format!("{context}: {msg}")),
        other => other,
    }
}

/// Serialises a store in canonical order, one record per line.
pub fn detections_to_json(store: &DetectionStore) -> String {
    let lines: Vec<String> = store
        .iter()
        .map(|d| {
            let record = DetRecord {
                image_id: (&d.image_id).into(),
                category_id: d.class_id,
                bbox: d.bbox.to_wire(),
                score: d.score,
                expert_id: Some(d.expert_id),
            };
            serde_json::to_string(&record).expect("detection records always serialise")
        })
        .collect();
    json_array(&lines)
}

pub fn ground_truth_to_json(gts: &GroundTruthSet) -> String {
    let lines: Vec<String> = gts
        .ground_truths()
        .iter()
        .map(|g| {
            let record = GtRecord {
                image_id: (&g.image_id).into(),
                category_id: g.class_id,
                bbox: g.bbox.to_wire(),
                id: g.gt_id,
                iscrowd: u8::from(g.ignore),
                ignore: 0,
            };
            serde_json::to_string(&record).expect("annotation records always serialise")
        })
        .collect();
    format!("{{\"annotations\": {}}}\n", json_array(&lines).trim_end())
}

fn json_array(lines: &[String]) -> String {
    if lines.is_empty() {
        return "[]\n".to_string();
    }
    format!("[\n{}\n]\n", lines.join(",\n"))
}

pub fn write_detections(store: &DetectionStore, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &detections_to_json(store))
}

pub fn write_ground_truth(gts: &GroundTruthSet, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &ground_truth_to_json(gts))
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(contents.as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Union of several experts' stores. Expert ids become list positions and
/// det_ids are re-issued in (position, canonical order) sequence.
pub fn concat_experts(stores: &[DetectionStore]) -> Result<DetectionStore> {
    let Some(first) = stores.first() else {
        return Ok(DetectionStore::empty(GeometryKind::AxisAligned));
    };
    let kind = first.kind();
    let mut dets = Vec::with_capacity(stores.iter().map(DetectionStore::len).sum());
    for (position, store) in stores.iter().enumerate() {
        if store.kind() != kind {
            return Err(Error::GeometryMismatch {
                expected: kind,
                found: store.kind(),
            });
        }
        for d in store.iter() {
            dets.push(Detection {
                det_id: dets.len() as u64,
                expert_id: position as ExpertId,
                ..d.clone()
            });
        }
    }
    DetectionStore::new(kind, dets)
}
