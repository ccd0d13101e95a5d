//! Axis-aligned detection boxes: IoU, greedy NMS, multi-teacher fusion, the
//! anchor grid, and anchor-to-groundtruth assignment.
//!
//! Boxes are half-open pixel rectangles in continuous coordinates; the area
//! of `(x_min, y_min, x_max, y_max)` is `(x_max - x_min) * (y_max - y_min)`.
//! All functions here are pure, and NMS resolves score ties deterministically
//! (larger area first, then lower `x_min`) so downstream outputs are
//! reproducible byte for byte.

use std::cmp::Ordering;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// IoU threshold used when fusing teacher detection sets.
pub const FUSION_IOU: f64 = 0.5;

/// Sensor modality a detection set came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    Rgb,
    Depth,
    Thermal,
    Audio,
    Fused,
    /// Annotation source for synthetic or labeled data.
    GroundTruth,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Depth => "depth",
            Modality::Thermal => "thermal",
            Modality::Audio => "audio",
            Modality::Fused => "fused",
            Modality::GroundTruth => "groundtruth",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "rgb" => Modality::Rgb,
            "depth" => Modality::Depth,
            "thermal" => Modality::Thermal,
            "audio" => Modality::Audio,
            "fused" => Modality::Fused,
            "groundtruth" => Modality::GroundTruth,
            other => return Err(Error::invalid(format!("unknown modality {other:?}"))),
        })
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One scored detection box. Construction validates the geometric
/// invariants, so every `BBox` in circulation is non-degenerate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub score: f64,
    pub class_id: u32,
}

impl BBox {
    pub fn new(
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
        score: f64,
        class_id: u32,
    ) -> Result<Self> {
        if ![x_min, y_min, x_max, y_max, score].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("box with non-finite field"));
        }
        if x_min >= x_max || y_min >= y_max {
            return Err(Error::invalid(format!(
                "degenerate box ({x_min}, {y_min}, {x_max}, {y_max})"
            )));
        }
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::invalid(format!("box score {score} outside [0,1]")));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
            score,
            class_id,
        })
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    /// Same geometry, different score.
    pub fn with_score(mut self, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) || !score.is_finite() {
            return Err(Error::invalid(format!("box score {score} outside [0,1]")));
        }
        self.score = score;
        Ok(self)
    }

    /// Clip to `[0, width] x [0, height]`; `None` if nothing remains.
    pub fn clipped(&self, width: f64, height: f64) -> Option<BBox> {
        let x0 = self.x_min.max(0.0);
        let y0 = self.y_min.max(0.0);
        let x1 = self.x_max.min(width);
        let y1 = self.y_max.min(height);
        if x0 < x1 && y0 < y1 {
            Some(BBox {
                x_min: x0,
                y_min: y0,
                x_max: x1,
                y_max: y1,
                ..*self
            })
        } else {
            None
        }
    }
}

/// Intersection over union of two valid boxes. Symmetric, in `[0, 1]`,
/// exactly 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Deterministic suppression priority: higher score first, then larger
/// area, then lower x_min.
fn priority_desc(a: &BBox, b: &BBox) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| b.area().total_cmp(&a.area()))
        .then_with(|| a.x_min.total_cmp(&b.x_min))
}

/// Greedy non-maximum suppression. The output is sorted by descending
/// score and no surviving pair has IoU strictly above `iou_threshold`.
/// Survivors keep their own score.
pub fn nms(boxes: &[BBox], iou_threshold: f64) -> Result<Vec<BBox>> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::invalid(format!(
            "nms threshold {iou_threshold} outside (0,1]"
        )));
    }
    let mut sorted: Vec<BBox> = boxes.to_vec();
    sorted.sort_by(priority_desc);
    let mut kept: Vec<BBox> = Vec::new();
    for candidate in sorted {
        if kept.iter().all(|k| iou(k, &candidate) <= iou_threshold) {
            kept.push(candidate);
        }
    }
    Ok(kept)
}

/// All detections for one frame from one source.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSet {
    pub frame_id: u64,
    pub source: Modality,
    pub boxes: Vec<BBox>,
}

impl DetectionSet {
    pub fn new(frame_id: u64, source: Modality, boxes: Vec<BBox>) -> Self {
        Self {
            frame_id,
            source,
            boxes,
        }
    }
}

/// Fuse per-teacher detection sets for one frame: concatenate everything,
/// then run NMS at [`FUSION_IOU`]. Surviving boxes keep their own scores,
/// so the fused score is the max over the overlapping cluster.
pub fn fuse_teachers(sets: &[DetectionSet]) -> Result<DetectionSet> {
    let first = sets
        .first()
        .ok_or_else(|| Error::invalid("fuse_teachers needs at least one set"))?;
    let mut all = Vec::new();
    for set in sets {
        if set.frame_id != first.frame_id {
            return Err(Error::invalid(format!(
                "fuse_teachers frame mismatch: {} vs {}",
                first.frame_id, set.frame_id
            )));
        }
        all.extend_from_slice(&set.boxes);
    }
    Ok(DetectionSet {
        frame_id: first.frame_id,
        source: Modality::Fused,
        boxes: nms(&all, FUSION_IOU)?,
    })
}

/// Feature-pyramid level the detector predicts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PyramidLevel {
    P3,
    P4,
    P5,
}

impl PyramidLevel {
    pub const ALL: [PyramidLevel; 3] = [PyramidLevel::P3, PyramidLevel::P4, PyramidLevel::P5];

    pub fn stride(self) -> usize {
        match self {
            PyramidLevel::P3 => 8,
            PyramidLevel::P4 => 16,
            PyramidLevel::P5 => 32,
        }
    }

    pub fn index(self) -> usize {
        match self {
            PyramidLevel::P3 => 0,
            PyramidLevel::P4 => 1,
            PyramidLevel::P5 => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PyramidLevel::P3 => "p3",
            PyramidLevel::P4 => "p4",
            PyramidLevel::P5 => "p5",
        }
    }
}

impl fmt::Display for PyramidLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Anchor-grid layout plus the IoU bands used for target assignment.
#[derive(Debug, Clone)]
pub struct AnchorConfig {
    /// (width factor, height factor) pairs; (1.4, 0.7) is a 2:1 box.
    pub aspect_ratios: [(f64, f64); 3],
    pub scale_multipliers: [f64; 3],
    /// Anchor edge length per level before ratio/scale, in pixels.
    pub base_sizes: [f64; 3],
    /// Anchors with max IoU at or above this are positive.
    pub positive_iou: f64,
    /// Anchors with max IoU below this are negative; between the two
    /// thresholds they are ignored.
    pub negative_iou: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            aspect_ratios: [(1.0, 1.0), (1.4, 0.7), (0.7, 1.4)],
            scale_multipliers: [1.0, 2f64.powf(1.0 / 3.0), 2f64.powf(2.0 / 3.0)],
            // twice the stride: P3 anchors start at 16 px, P5 at 64 px
            base_sizes: [16.0, 32.0, 64.0],
            positive_iou: 0.5,
            negative_iou: 0.4,
        }
    }
}

impl AnchorConfig {
    pub const ANCHORS_PER_CELL: usize = 9;
}

/// Anchors of one pyramid level, row-major over grid cells, 9 per cell
/// (ratios outer, scales inner).
#[derive(Debug, Clone)]
pub struct LevelAnchors {
    pub level: PyramidLevel,
    pub grid_height: usize,
    pub grid_width: usize,
    pub anchors: Vec<BBox>,
}

/// Lay out the anchor grid for an `image_size = (width, height)` image.
/// Requires both dimensions divisible by the largest stride so the grids
/// nest exactly.
pub fn generate_anchors(cfg: &AnchorConfig, image_size: (usize, usize)) -> Result<Vec<LevelAnchors>> {
    let (width, height) = image_size;
    let max_stride = PyramidLevel::ALL
        .iter()
        .map(|l| l.stride())
        .max()
        .expect("nonempty levels");
    if width == 0 || height == 0 || width % max_stride != 0 || height % max_stride != 0 {
        return Err(Error::invalid(format!(
            "image size {width}x{height} not divisible by stride {max_stride}"
        )));
    }
    let mut out = Vec::with_capacity(3);
    for level in PyramidLevel::ALL {
        let stride = level.stride();
        let gw = width / stride;
        let gh = height / stride;
        let base = cfg.base_sizes[level.index()];
        let mut anchors = Vec::with_capacity(gw * gh * AnchorConfig::ANCHORS_PER_CELL);
        for gy in 0..gh {
            for gx in 0..gw {
                let cx = (gx as f64 + 0.5) * stride as f64;
                let cy = (gy as f64 + 0.5) * stride as f64;
                for (rw, rh) in cfg.aspect_ratios {
                    for mult in cfg.scale_multipliers {
                        let w = base * mult * rw;
                        let h = base * mult * rh;
                        anchors.push(BBox {
                            x_min: cx - 0.5 * w,
                            y_min: cy - 0.5 * h,
                            x_max: cx + 0.5 * w,
                            y_max: cy + 0.5 * h,
                            score: 1.0,
                            class_id: 0,
                        });
                    }
                }
            }
        }
        out.push(LevelAnchors {
            level,
            grid_height: gh,
            grid_width: gw,
            anchors,
        });
    }
    Ok(out)
}

/// Training label for one anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    /// Matched to `groundtruth.boxes[gt_index]`.
    Positive { gt_index: usize },
    Negative,
    Ignore,
}

/// Assign every anchor a positive / negative / ignore label against one
/// frame's groundtruth. Positives take the argmax-IoU groundtruth; every
/// groundtruth additionally forces its single best-IoU anchor positive
/// (ties to the lower anchor index) so no object goes unclaimed.
pub fn assign_targets(
    anchors: &[BBox],
    groundtruth: &DetectionSet,
    cfg: &AnchorConfig,
) -> Vec<AnchorLabel> {
    if groundtruth.boxes.is_empty() {
        return vec![AnchorLabel::Negative; anchors.len()];
    }
    let mut labels = Vec::with_capacity(anchors.len());
    let mut best_for_gt: Vec<(f64, usize)> = vec![(0.0, usize::MAX); groundtruth.boxes.len()];
    for (ai, anchor) in anchors.iter().enumerate() {
        let mut best_iou = 0.0;
        let mut best_gt = 0;
        for (gi, gt) in groundtruth.boxes.iter().enumerate() {
            let v = iou(anchor, gt);
            if v > best_iou {
                best_iou = v;
                best_gt = gi;
            }
            if v > best_for_gt[gi].0 {
                best_for_gt[gi] = (v, ai);
            }
        }
        labels.push(if best_iou >= cfg.positive_iou {
            AnchorLabel::Positive { gt_index: best_gt }
        } else if best_iou < cfg.negative_iou {
            AnchorLabel::Negative
        } else {
            AnchorLabel::Ignore
        });
    }
    for (gi, &(v, ai)) in best_for_gt.iter().enumerate() {
        if v > 0.0 {
            labels[ai] = AnchorLabel::Positive { gt_index: gi };
        }
    }
    labels
}

// ---------------------------------------------------------------------------
// JSON-lines persistence
// ---------------------------------------------------------------------------

fn set_to_json(set: &DetectionSet) -> serde_json::Value {
    let boxes: Vec<serde_json::Value> = set
        .boxes
        .iter()
        .map(|b| {
            serde_json::json!([
                b.x_min,
                b.y_min,
                b.x_max,
                b.y_max,
                b.score,
                b.class_id
            ])
        })
        .collect();
    serde_json::json!({
        "frame": set.frame_id,
        "source": set.source.as_str(),
        "boxes": boxes,
    })
}

fn set_from_json(value: &serde_json::Value, path: &Path, line: usize) -> Result<DetectionSet> {
    let bad = |msg: &str| Error::format(path, format!("line {}: {msg}", line + 1));
    let frame = value
        .get("frame")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| bad("missing frame"))?;
    let source = Modality::parse(
        value
            .get("source")
            .and_then(|v| v.as_str())
            .ok_or_else(|| bad("missing source"))?,
    )?;
    let raw = value
        .get("boxes")
        .and_then(|v| v.as_array())
        .ok_or_else(|| bad("missing boxes array"))?;
    let mut boxes = Vec::with_capacity(raw.len());
    for entry in raw {
        let nums = entry.as_array().ok_or_else(|| bad("box not an array"))?;
        if nums.len() != 6 {
            return Err(bad("box needs 6 fields"));
        }
        let f = |i: usize| -> Result<f64> {
            nums[i]
                .as_f64()
                .ok_or_else(|| bad("box field not a number"))
        };
        boxes.push(BBox::new(
            f(0)?,
            f(1)?,
            f(2)?,
            f(3)?,
            f(4)?,
            f(5)? as u32,
        )?);
    }
    Ok(DetectionSet {
        frame_id: frame,
        source,
        boxes,
    })
}

/// Write one JSON object per frame, in input order.
pub fn write_detections_jsonl(path: &Path, sets: &[DetectionSet]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for set in sets {
        serde_json::to_writer(&mut file, &set_to_json(set))?;
        file.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_detections_jsonl(path: &Path) -> Result<Vec<DetectionSet>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut sets = Vec::new();
    for (line_no, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", line_no + 1)))?;
        sets.push(set_from_json(&value, path, line_no)?);
    }
    Ok(sets)
}
