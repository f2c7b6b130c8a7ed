//! COCO-protocol detection evaluation.
//!
//! Detections are matched greedily in descending score order, per image,
//! against still-unmatched ground truth of the same class. Average
//! precision uses the 101-point interpolated recall grid. There is no
//! max-detections cap and no area-range breakdown.

pub(crate) mod io;
pub mod synth;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub use io::{parse_class_names, parse_detections, parse_ground_truth, to_jsonl};

pub type ClassId = i64;

/// Axis-aligned box: top-left corner plus extent, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BBox {
    fn from([x, y, w, h]: [f64; 4]) -> Self {
        Self { x, y, w, h }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) {
            return Err(invalid("box coordinates must be finite"));
        }
        if self.w < 0.0 || self.h < 0.0 {
            return Err(invalid(format!("box extent must be non-negative, got {}x{}", self.w, self.h)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub class_id: ClassId,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub image_id: String,
    pub class_id: ClassId,
    pub bbox: BBox,
}

/// Intersection over union. Zero whenever the union has zero area, so
/// degenerate boxes never match anything.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let iy = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MatchLabel {
    /// Index into the detection slice passed to [`match_detections`].
    pub detection: usize,
    pub score: f64,
    /// Index of the matched ground truth, `None` for a false positive.
    pub matched_gt: Option<usize>,
}

impl MatchLabel {
    pub fn is_true_positive(&self) -> bool {
        self.matched_gt.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MatchResult {
    /// One label per detection, in processing (descending score) order.
    pub labels: Vec<MatchLabel>,
    pub total_gt: usize,
    pub false_negatives: usize,
}

impl MatchResult {
    pub fn true_positives(&self) -> usize {
        self.labels.iter().filter(|l| l.is_true_positive()).count()
    }

    pub fn false_positives(&self) -> usize {
        self.labels.len() - self.true_positives()
    }

    pub fn tp_flags(&self) -> Vec<bool> {
        self.labels.iter().map(MatchLabel::is_true_positive).collect()
    }
}

/// Detection indices by descending score; equal scores keep input order.
fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

/// Greedy matching of single-class detections to ground truth.
///
/// Detections are visited by descending score (input order on ties) and
/// each takes the unmatched ground truth in the same image with the highest
/// IoU at or above `iou_threshold`; IoU ties go to the lowest ground-truth
/// index.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruthBox], iou_threshold: f64) -> MatchResult {
    let mut by_image: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_image.entry(g.image_id.as_str()).or_default().push(i);
    }
    let mut taken = vec![false; gts.len()];
    let labels = score_order(dets)
        .into_iter()
        .map(|d| {
            let det = &dets[d];
            let mut best: Option<(usize, f64)> = None;
            for &g in by_image.get(det.image_id.as_str()).map(Vec::as_slice).unwrap_or(&[]) {
                if taken[g] {
                    continue;
                }
                let overlap = iou(&det.bbox, &gts[g].bbox);
                if overlap >= iou_threshold && best.is_none_or(|(_, b)| overlap > b) {
                    best = Some((g, overlap));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
            }
            MatchLabel {
                detection: d,
                score: det.score,
                matched_gt: best.map(|(g, _)| g),
            }
        })
        .collect::<Vec<_>>();
    let matched = taken.iter().filter(|&&t| t).count();
    MatchResult {
        labels,
        total_gt: gts.len(),
        false_negatives: gts.len() - matched,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PrPoint {
    pub precision: f64,
    pub recall: f64,
}

/// Cumulative precision and recall after each detection. `tp_flags` must be
/// in descending score order. Empty when there is no ground truth.
pub fn pr_curve(tp_flags: &[bool], total_gt: usize) -> Vec<PrPoint> {
    if total_gt == 0 {
        return Vec::new();
    }
    let mut tp = 0usize;
    tp_flags
        .iter()
        .enumerate()
        .map(|(i, &is_tp)| {
            tp += usize::from(is_tp);
            PrPoint {
                precision: tp as f64 / (i + 1) as f64,
                recall: tp as f64 / total_gt as f64,
            }
        })
        .collect()
}

pub const RECALL_POINTS: usize = 101;

/// 101-point interpolated average precision.
pub fn average_precision(curve: &[PrPoint]) -> f64 {
    if curve.is_empty() {
        return 0.0;
    }
    let mut envelope: Vec<f64> = curve.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len() - 1).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let recalls: Vec<f64> = curve.iter().map(|p| p.recall).collect();
    let total: f64 = (0..RECALL_POINTS)
        .map(|k| {
            let r = k as f64 / (RECALL_POINTS - 1) as f64;
            let i = recalls.partition_point(|&x| x < r);
            envelope.get(i).copied().unwrap_or(0.0)
        })
        .sum();
    total / RECALL_POINTS as f64
}

/// The ten thresholds 0.50, 0.55, …, 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Thresholds averaged into the `ap50_95` / `map50_95` figures.
    pub iou_thresholds: Vec<f64>,
    pub excluded_class_ids: BTreeSet<ClassId>,
    /// Confidence cut-off for the reported precision/recall scalars.
    pub report_score_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: coco_thresholds(),
            excluded_class_ids: BTreeSet::new(),
            report_score_threshold: 0.0,
        }
    }
}

impl EvalConfig {
    pub fn ap50() -> Self {
        Self {
            iou_thresholds: vec![0.5],
            ..Self::default()
        }
    }

    pub fn excluding(mut self, ids: impl IntoIterator<Item = ClassId>) -> Self {
        self.excluded_class_ids.extend(ids);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.iou_thresholds.is_empty() {
            return Err(invalid("at least one IoU threshold is required"));
        }
        if self.iou_thresholds.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
            return Err(invalid("IoU thresholds must lie in (0, 1]"));
        }
        if self.iou_thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("IoU thresholds must be strictly increasing"));
        }
        if !(0.0..=1.0).contains(&self.report_score_threshold) {
            return Err(invalid("report score threshold must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCounts {
    pub iou_threshold: f64,
    pub ap: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: ClassId,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub name: Option<String>,
    pub num_gt: usize,
    pub num_detections: usize,
    /// At IoU 0.50 and the configured report score threshold.
    pub precision: f64,
    pub recall: f64,
    pub ap50: f64,
    /// Mean AP over the configured thresholds.
    pub ap50_95: f64,
    pub per_threshold: Vec<ThresholdCounts>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Included classes in ascending id order.
    pub per_class: Vec<ClassMetrics>,
    pub map50: f64,
    pub map50_95: f64,
    pub iou_thresholds: Vec<f64>,
    pub excluded_class_ids: Vec<ClassId>,
    pub report_score_threshold: f64,
}

impl EvalResult {
    pub fn class(&self, id: ClassId) -> Option<&ClassMetrics> {
        self.per_class.iter().find(|c| c.class_id == id)
    }

    pub fn attach_names(&mut self, names: &BTreeMap<ClassId, String>) {
        for c in &mut self.per_class {
            c.name = names.get(&c.class_id).cloned();
        }
    }
}

fn validate_records(dets: &[Detection], gts: &[GroundTruthBox]) -> Result<()> {
    for (i, d) in dets.iter().enumerate() {
        d.bbox
            .validate()
            .map_err(|e| invalid(format!("detection {i}: {e}")))?;
        if !(0.0..=1.0).contains(&d.score) {
            return Err(invalid(format!("detection {i}: score {} outside [0, 1]", d.score)));
        }
    }
    for (i, g) in gts.iter().enumerate() {
        g.bbox
            .validate()
            .map_err(|e| invalid(format!("ground truth {i}: {e}")))?;
    }
    Ok(())
}

fn class_ap(dets: &[Detection], gts: &[GroundTruthBox], threshold: f64) -> (f64, MatchResult) {
    let m = match_detections(dets, gts, threshold);
    // with no ground truth, detections are pure false positives: AP 0
    let ap = average_precision(&pr_curve(&m.tp_flags(), m.total_gt));
    (ap, m)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

/// Evaluates detections against ground truth.
///
/// Records of excluded classes are dropped from both sides before any
/// matching. Every remaining class that has ground truth or detections
/// enters the means with equal weight.
pub fn evaluate(dets: &[Detection], gts: &[GroundTruthBox], cfg: &EvalConfig) -> Result<EvalResult> {
    cfg.validate()?;
    validate_records(dets, gts)?;
    let mut classes: BTreeMap<ClassId, (Vec<Detection>, Vec<GroundTruthBox>)> = BTreeMap::new();
    for d in dets.iter().filter(|d| !cfg.excluded_class_ids.contains(&d.class_id)) {
        classes.entry(d.class_id).or_default().0.push(d.clone());
    }
    for g in gts.iter().filter(|g| !cfg.excluded_class_ids.contains(&g.class_id)) {
        classes.entry(g.class_id).or_default().1.push(g.clone());
    }
    if classes.is_empty() {
        return Err(invalid("no classes left to evaluate after exclusion"));
    }

    let per_class: Vec<ClassMetrics> = classes
        .iter()
        .map(|(&class_id, (cd, cg))| {
            let per_threshold: Vec<ThresholdCounts> = cfg
                .iou_thresholds
                .iter()
                .map(|&t| {
                    let (ap, m) = class_ap(cd, cg, t);
                    ThresholdCounts {
                        iou_threshold: t,
                        ap,
                        tp: m.true_positives(),
                        fp: m.false_positives(),
                        fn_: m.false_negatives,
                    }
                })
                .collect();
            let (ap50, m50) = class_ap(cd, cg, 0.5);
            let kept: Vec<&MatchLabel> = m50
                .labels
                .iter()
                .filter(|l| l.score >= cfg.report_score_threshold)
                .collect();
            let tp = kept.iter().filter(|l| l.is_true_positive()).count();
            let precision = if kept.is_empty() { 0.0 } else { tp as f64 / kept.len() as f64 };
            let recall = if cg.is_empty() { 0.0 } else { tp as f64 / cg.len() as f64 };
            ClassMetrics {
                class_id,
                name: None,
                num_gt: cg.len(),
                num_detections: cd.len(),
                precision,
                recall,
                ap50,
                ap50_95: mean(per_threshold.iter().map(|c| c.ap)),
                per_threshold,
            }
        })
        .collect();

    Ok(EvalResult {
        map50: mean(per_class.iter().map(|c| c.ap50)),
        map50_95: mean(per_class.iter().map(|c| c.ap50_95)),
        per_class,
        iou_thresholds: cfg.iou_thresholds.clone(),
        excluded_class_ids: cfg.excluded_class_ids.iter().copied().collect(),
        report_score_threshold: cfg.report_score_threshold,
    })
}
