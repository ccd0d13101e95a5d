//! Detection and tracking metrics.
//!
//! Average precision follows the interpolated 101-point recipe: detections
//! are ranked by score (ties: earlier frame, then earlier index), greedily
//! matched to the highest-IoU unmatched ground-truth box of their frame at
//! or above the IoU threshold, and the precision/recall staircase is
//! sampled at recalls 0.00, 0.01, ..., 1.00 with ceiling interpolation.
//! `map_suite` averages AP over IoU thresholds 0.50:0.05:0.95 and reports
//! the 0.50 and 0.75 cuts separately. Tracking quality uses CLEAR-MOT
//! accounting with identity carry-over.
//!
//! Every matching rule here is deterministic; ties never depend on hash
//! order or input permutation beyond the documented rank.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::boxes::{iou, BBox, DetectionSet};
use crate::error::{Error, Result};
use crate::tracker::TrackRecord;

/// IoU thresholds averaged by [`map_suite`]: 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (50..=95).step_by(5).map(|t| t as f64 / 100.0).collect()
}

fn group_by_frame(sets: &[DetectionSet]) -> Result<BTreeMap<u64, &[BBox]>> {
    let mut out: BTreeMap<u64, &[BBox]> = BTreeMap::new();
    for set in sets {
        if out.insert(set.frame_id, &set.boxes).is_some() {
            return Err(Error::invalid(format!(
                "frame {} appears twice",
                set.frame_id
            )));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
struct Ranked {
    frame: u64,
    index: usize,
    score: f64,
}

/// Detections in evaluation order: score descending, then frame, then
/// within-frame index.
fn rank_detections(dets: &BTreeMap<u64, &[BBox]>) -> Vec<Ranked> {
    let mut ranked = Vec::new();
    for (&frame, boxes) in dets {
        for (index, b) in boxes.iter().enumerate() {
            ranked.push(Ranked {
                frame,
                index,
                score: b.score,
            });
        }
    }
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.frame.cmp(&b.frame))
            .then(a.index.cmp(&b.index))
    });
    ranked
}

/// Greedy matching in rank order. Returns, per ranked detection, the index
/// of the ground-truth box it claimed in its own frame (`None` = false
/// positive). Each ground-truth box is claimed at most once; equal IoU
/// prefers the lower ground-truth index.
fn greedy_match(
    ranked: &[Ranked],
    dets: &BTreeMap<u64, &[BBox]>,
    gts: &BTreeMap<u64, &[BBox]>,
    iou_threshold: f64,
) -> Vec<Option<usize>> {
    let mut claimed: BTreeMap<u64, Vec<bool>> = gts
        .iter()
        .map(|(&f, boxes)| (f, vec![false; boxes.len()]))
        .collect();
    ranked
        .iter()
        .map(|r| {
            let det = &dets[&r.frame][r.index];
            let frame_gts = gts.get(&r.frame)?;
            let flags = claimed.get_mut(&r.frame)?;
            let mut best: Option<(usize, f64)> = None;
            for (gi, gt) in frame_gts.iter().enumerate() {
                if flags[gi] {
                    continue;
                }
                let v = iou(det, gt);
                if v >= iou_threshold && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((gi, v));
                }
            }
            let (gi, _) = best?;
            flags[gi] = true;
            Some(gi)
        })
        .collect()
}

fn validate_iou_threshold(t: f64) -> Result<()> {
    if !(0.0 < t && t <= 1.0) {
        return Err(Error::invalid(format!("IoU threshold {t} outside (0, 1]")));
    }
    Ok(())
}

/// 101-point interpolated average precision at one IoU threshold.
/// Errors when the ground truth contains no boxes at all.
pub fn average_precision(
    detections: &[DetectionSet],
    ground_truth: &[DetectionSet],
    iou_threshold: f64,
) -> Result<f64> {
    validate_iou_threshold(iou_threshold)?;
    let dets = group_by_frame(detections)?;
    let gts = group_by_frame(ground_truth)?;
    let total_gt: usize = gts.values().map(|b| b.len()).sum();
    if total_gt == 0 {
        return Err(Error::invalid(
            "average precision undefined without ground-truth boxes",
        ));
    }
    let ranked = rank_detections(&dets);
    let matches = greedy_match(&ranked, &dets, &gts, iou_threshold);

    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut curve = Vec::with_capacity(ranked.len());
    for m in &matches {
        if m.is_some() {
            tp += 1;
        } else {
            fp += 1;
        }
        curve.push((
            tp as f64 / total_gt as f64,
            tp as f64 / (tp + fp) as f64,
        ));
    }
    Ok(interpolated_ap(&curve))
}

/// Mean over 101 recall samples of the best precision achieved at or
/// beyond each recall.
fn interpolated_ap(curve: &[(f64, f64)]) -> f64 {
    let mut total = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let best = curve
            .iter()
            .filter(|(recall, _)| *recall >= r)
            .map(|&(_, precision)| precision)
            .fold(0.0, f64::max);
        total += best;
    }
    total / 101.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapSuite {
    /// Mean AP over the ten COCO thresholds 0.50:0.05:0.95.
    pub map_avg: f64,
    pub map_50: f64,
    pub map_75: f64,
}

pub fn map_suite(detections: &[DetectionSet], ground_truth: &[DetectionSet]) -> Result<MapSuite> {
    let mut sum = 0.0;
    let mut map_50 = 0.0;
    let mut map_75 = 0.0;
    for t in coco_thresholds() {
        let ap = average_precision(detections, ground_truth, t)?;
        sum += ap;
        if t == 0.5 {
            map_50 = ap;
        }
        if t == 0.75 {
            map_75 = ap;
        }
    }
    Ok(MapSuite {
        map_avg: sum / coco_thresholds().len() as f64,
        map_50,
        map_75,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CenterDistance {
    /// Mean absolute horizontal center offset over IoU-0.5 matches, px.
    pub x: f64,
    /// Mean absolute vertical center offset over IoU-0.5 matches, px.
    pub y: f64,
}

/// Center localization error over detections that match ground truth at
/// IoU 0.5. `None` when nothing matches (the metric is undefined there).
pub fn center_distance(
    detections: &[DetectionSet],
    ground_truth: &[DetectionSet],
) -> Result<Option<CenterDistance>> {
    let dets = group_by_frame(detections)?;
    let gts = group_by_frame(ground_truth)?;
    let ranked = rank_detections(&dets);
    let matches = greedy_match(&ranked, &dets, &gts, 0.5);
    let mut n = 0usize;
    let (mut sx, mut sy) = (0.0, 0.0);
    for (r, m) in ranked.iter().zip(&matches) {
        if let Some(gi) = m {
            let det = &dets[&r.frame][r.index];
            let gt = &gts[&r.frame][*gi];
            let (dcx, dcy) = det.center();
            let (gcx, gcy) = gt.center();
            sx += (dcx - gcx).abs();
            sy += (dcy - gcy).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Ok(None);
    }
    Ok(Some(CenterDistance {
        x: sx / n as f64,
        y: sy / n as f64,
    }))
}

// ---------------------------------------------------------------------------
// CLEAR-MOT
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotMetrics {
    /// `1 - (FN + FP + IDSW) / total_gt`; can be negative.
    pub mota: f64,
    pub id_switches: u64,
    pub false_positives: u64,
    pub false_negatives: u64,
    /// Ground-truth trajectory interruptions that later resume.
    pub fragments: u64,
    pub total_gt: u64,
}

fn records_by_frame(records: &[TrackRecord]) -> Result<BTreeMap<u64, Vec<(u64, BBox)>>> {
    let mut out: BTreeMap<u64, Vec<(u64, BBox)>> = BTreeMap::new();
    for r in records {
        let b = BBox::new(r.bbox[0], r.bbox[1], r.bbox[2], r.bbox[3], 1.0, 0)?;
        let frame = out.entry(r.frame).or_default();
        if frame.iter().any(|(id, _)| *id == r.track_id) {
            return Err(Error::invalid(format!(
                "track {} appears twice in frame {}",
                r.track_id, r.frame
            )));
        }
        frame.push((r.track_id, b));
    }
    Ok(out)
}

/// CLEAR-MOT accounting over track records. Correspondences carry over
/// between frames: a ground-truth object keeps its previously assigned
/// hypothesis while the pair still overlaps at the threshold; remaining
/// objects are matched greedily by descending IoU (ties: lower gt id, then
/// lower hypothesis id). A ground-truth object matching a different
/// hypothesis than before counts one identity switch.
pub fn mot_metrics(
    hypotheses: &[TrackRecord],
    ground_truth: &[TrackRecord],
    iou_threshold: f64,
) -> Result<MotMetrics> {
    validate_iou_threshold(iou_threshold)?;
    if ground_truth.is_empty() {
        return Err(Error::invalid("CLEAR-MOT undefined without ground truth"));
    }
    let gt_frames = records_by_frame(ground_truth)?;
    let hyp_frames = records_by_frame(hypotheses)?;

    let mut assignment: BTreeMap<u64, u64> = BTreeMap::new(); // gt id -> hyp id
    let mut covered: BTreeMap<u64, Vec<bool>> = BTreeMap::new(); // gt id -> per-observation flag
    let mut id_switches = 0u64;
    let mut false_positives = 0u64;
    let mut false_negatives = 0u64;
    let mut total_gt = 0u64;

    let frames: std::collections::BTreeSet<u64> = gt_frames
        .keys()
        .chain(hyp_frames.keys())
        .copied()
        .collect();
    for frame in frames {
        let empty = Vec::new();
        let gts = gt_frames.get(&frame).unwrap_or(&empty);
        let hyps = hyp_frames.get(&frame).unwrap_or(&empty);
        total_gt += gts.len() as u64;

        let mut gt_matched = vec![false; gts.len()];
        let mut hyp_matched = vec![false; hyps.len()];

        // 1) keep still-valid correspondences from earlier frames
        for (gi, (gt_id, gt_box)) in gts.iter().enumerate() {
            if let Some(&hyp_id) = assignment.get(gt_id) {
                if let Some(hi) = hyps.iter().position(|(h, _)| *h == hyp_id) {
                    if iou(gt_box, &hyps[hi].1) >= iou_threshold && !hyp_matched[hi] {
                        gt_matched[gi] = true;
                        hyp_matched[hi] = true;
                    }
                }
            }
        }

        // 2) match the rest greedily by IoU
        let mut candidates = Vec::new();
        for (gi, (_, gt_box)) in gts.iter().enumerate() {
            if gt_matched[gi] {
                continue;
            }
            for (hi, (_, hyp_box)) in hyps.iter().enumerate() {
                if hyp_matched[hi] {
                    continue;
                }
                let v = iou(gt_box, hyp_box);
                if v >= iou_threshold {
                    candidates.push((v, gi, hi));
                }
            }
        }
        candidates.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(gts[a.1].0.cmp(&gts[b.1].0))
                .then(hyps[a.2].0.cmp(&hyps[b.2].0))
        });
        for (_, gi, hi) in candidates {
            if gt_matched[gi] || hyp_matched[hi] {
                continue;
            }
            gt_matched[gi] = true;
            hyp_matched[hi] = true;
            let gt_id = gts[gi].0;
            let hyp_id = hyps[hi].0;
            if let Some(&prev) = assignment.get(&gt_id) {
                if prev != hyp_id {
                    id_switches += 1;
                }
            }
            assignment.insert(gt_id, hyp_id);
        }

        false_negatives += gt_matched.iter().filter(|m| !**m).count() as u64;
        false_positives += hyp_matched.iter().filter(|m| !**m).count() as u64;
        for (gi, (gt_id, _)) in gts.iter().enumerate() {
            covered.entry(*gt_id).or_default().push(gt_matched[gi]);
        }
    }

    let mut fragments = 0u64;
    for flags in covered.values() {
        let segments = flags
            .iter()
            .zip(std::iter::once(&false).chain(flags.iter()))
            .filter(|(cur, prev)| **cur && !**prev)
            .count() as u64;
        fragments += segments.saturating_sub(1);
    }

    Ok(MotMetrics {
        mota: 1.0 - (false_negatives + false_positives + id_switches) as f64 / total_gt as f64,
        id_switches,
        false_positives,
        false_negatives,
        fragments,
        total_gt,
    })
}

// ---------------------------------------------------------------------------
// Evaluation report
// ---------------------------------------------------------------------------

/// Everything a single evaluation run produces, serializable as stable
/// JSON (struct field order, no maps with nondeterministic iteration).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: u64,
    pub detections_evaluated: u64,
    pub map: MapSuite,
    /// `None` when no detection matched at IoU 0.5.
    pub center_distance: Option<CenterDistance>,
    /// `None` when tracking was not evaluated.
    pub mot: Option<MotMetrics>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Human-readable summary table.
    pub fn table(&self) -> String {
        let mut rows = vec![
            ("frames".to_string(), self.frames.to_string()),
            (
                "detections".to_string(),
                self.detections_evaluated.to_string(),
            ),
            ("mAP@avg".to_string(), format!("{:.4}", self.map.map_avg)),
            ("mAP@0.50".to_string(), format!("{:.4}", self.map.map_50)),
            ("mAP@0.75".to_string(), format!("{:.4}", self.map.map_75)),
        ];
        match &self.center_distance {
            Some(cd) => {
                rows.push(("CDx".to_string(), format!("{:.3} px", cd.x)));
                rows.push(("CDy".to_string(), format!("{:.3} px", cd.y)));
            }
            None => rows.push(("CDx/CDy".to_string(), "undefined (no matches)".to_string())),
        }
        if let Some(mot) = &self.mot {
            rows.push(("MOTA".to_string(), format!("{:.4}", mot.mota)));
            rows.push(("ID switches".to_string(), mot.id_switches.to_string()));
            rows.push(("false positives".to_string(), mot.false_positives.to_string()));
            rows.push(("false negatives".to_string(), mot.false_negatives.to_string()));
            rows.push(("fragments".to_string(), mot.fragments.to_string()));
        }
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            out.push_str(&format!("{k:width$}  {v}\n"));
        }
        out
    }
}

/// Compute the detection half of a report (mAP suite and center distance).
pub fn evaluate_detections(
    detections: &[DetectionSet],
    ground_truth: &[DetectionSet],
) -> Result<EvalReport> {
    let map = map_suite(detections, ground_truth)?;
    let cd = center_distance(detections, ground_truth)?;
    Ok(EvalReport {
        frames: ground_truth.len() as u64,
        detections_evaluated: detections.iter().map(|s| s.boxes.len() as u64).sum(),
        map,
        center_distance: cd,
        mot: None,
    })
}
