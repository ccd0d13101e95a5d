//! Frame-to-frame tracking by greedy IoU association.
//!
//! The policy is deliberately simple and fully deterministic: per frame,
//! candidate (tracklet, detection) pairs at or above the IoU threshold are
//! taken in descending-IoU order (ties prefer the lower tracklet id, then
//! the earlier detection), each side matching at most once. Matched
//! tracklets extend; unmatched active tracklets go inactive and never come
//! back; unmatched detections spawn new tracklets only when their score
//! clears the initialization threshold. Low-score detections may therefore
//! extend an existing tracklet but never start one.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BBox, DetectionSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct TrackerConfig {
    /// Minimum IoU between a tracklet's last box and a detection for the
    /// pair to be considered a match.
    pub iou_threshold: f64,
    /// Unmatched detections must score strictly above this to start a
    /// tracklet.
    pub init_score: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            init_score: 0.8,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.iou_threshold && self.iou_threshold <= 1.0) {
            return Err(Error::invalid("iou_threshold must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.init_score) {
            return Err(Error::invalid("init_score must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// One tracked object. Ids increase monotonically across the tracker's
/// lifetime and history frames are strictly increasing.
#[derive(Debug, Clone)]
pub struct Tracklet {
    pub id: u64,
    pub active: bool,
    /// `(frame, box)` observations, in frame order.
    pub history: Vec<(u64, BBox)>,
}

impl Tracklet {
    pub fn last_box(&self) -> &BBox {
        &self.history.last().expect("tracklets are never empty").1
    }

    pub fn last_frame(&self) -> u64 {
        self.history.last().expect("tracklets are never empty").0
    }

    pub fn start_frame(&self) -> u64 {
        self.history[0].0
    }
}

#[derive(Debug)]
pub struct Tracker {
    cfg: TrackerConfig,
    tracklets: Vec<Tracklet>,
    last_frame: Option<u64>,
}

impl Tracker {
    pub fn new(cfg: TrackerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            tracklets: Vec::new(),
            last_frame: None,
        })
    }

    /// All tracklets ever created, in id order.
    pub fn tracklets(&self) -> &[Tracklet] {
        &self.tracklets
    }

    pub fn active_count(&self) -> usize {
        self.tracklets.iter().filter(|t| t.active).count()
    }

    /// Ingest one frame of detections. Frames must arrive in strictly
    /// increasing order (gaps are fine; revisits are not).
    pub fn step(&mut self, frame: u64, detections: &[BBox]) -> Result<()> {
        if let Some(last) = self.last_frame {
            if frame <= last {
                return Err(Error::invalid(format!(
                    "frame {frame} arrived after frame {last}"
                )));
            }
        }
        self.last_frame = Some(frame);

        // candidate pairs sorted by IoU descending, ties to the lower
        // tracklet id, then the earlier detection
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (ti, t) in self.tracklets.iter().enumerate() {
            if !t.active {
                continue;
            }
            for (di, d) in detections.iter().enumerate() {
                let v = iou(t.last_box(), d);
                if v >= self.cfg.iou_threshold {
                    candidates.push((v, ti, di));
                }
            }
        }
        candidates.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });

        let mut tracklet_taken = vec![false; self.tracklets.len()];
        let mut detection_taken = vec![false; detections.len()];
        for (_, ti, di) in candidates {
            if tracklet_taken[ti] || detection_taken[di] {
                continue;
            }
            tracklet_taken[ti] = true;
            detection_taken[di] = true;
            self.tracklets[ti].history.push((frame, detections[di]));
        }

        for (ti, t) in self.tracklets.iter_mut().enumerate() {
            if t.active && !tracklet_taken[ti] {
                t.active = false;
            }
        }

        for (di, d) in detections.iter().enumerate() {
            if !detection_taken[di] && d.score > self.cfg.init_score {
                let id = self.tracklets.len() as u64;
                self.tracklets.push(Tracklet {
                    id,
                    active: true,
                    history: vec![(frame, *d)],
                });
            }
        }
        Ok(())
    }
}

/// Run a tracker over per-frame detection sets, in the order given.
pub fn run_tracker(cfg: TrackerConfig, frames: &[DetectionSet]) -> Result<Tracker> {
    let mut tracker = Tracker::new(cfg)?;
    for set in frames {
        tracker.step(set.frame_id, &set.boxes)?;
    }
    Ok(tracker)
}

/// One line of track output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub frame: u64,
    pub track_id: u64,
    /// `[x_min, y_min, x_max, y_max]`
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

/// Flatten tracker state to records sorted by `(frame, track_id)`.
pub fn track_records(tracker: &Tracker) -> Vec<TrackRecord> {
    let mut out = Vec::new();
    for t in tracker.tracklets() {
        for (frame, b) in &t.history {
            out.push(TrackRecord {
                frame: *frame,
                track_id: t.id,
                bbox: [b.x_min, b.y_min, b.x_max, b.y_max],
            });
        }
    }
    out.sort_by_key(|r| (r.frame, r.track_id));
    out
}

pub fn write_tracks_jsonl(path: &Path, records: &[TrackRecord]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        serde_json::to_writer(&mut file, r)?;
        file.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_tracks_jsonl(path: &Path) -> Result<Vec<TrackRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (line_no, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TrackRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", line_no + 1)))?;
        out.push(record);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(x: f64, y: f64, score: f64) -> BBox {
        BBox::new(x, y, x + 10.0, y + 10.0, score, 0).unwrap()
    }

    #[test]
    fn parallel_objects_keep_their_ids_for_ten_frames() {
        let mut tracker = Tracker::new(TrackerConfig::default()).unwrap();
        for f in 0..10u64 {
            let a = square(10.0 + 2.0 * f as f64, 10.0, 0.9);
            let b = square(10.0 + 2.0 * f as f64, 60.0, 0.9);
            tracker.step(f, &[a, b]).unwrap();
        }
        let ts = tracker.tracklets();
        assert_eq!(ts.len(), 2);
        for (i, t) in ts.iter().enumerate() {
            assert_eq!(t.id, i as u64);
            assert!(t.active);
            assert_eq!(t.history.len(), 10);
            let frames: Vec<u64> = t.history.iter().map(|(f, _)| *f).collect();
            assert_eq!(frames, (0..10).collect::<Vec<_>>());
        }
        // id 0 stays the upper object
        assert!((ts[0].last_box().y_min - 10.0).abs() < 1e-12);
        assert!((ts[1].last_box().y_min - 60.0).abs() < 1e-12);
    }

    #[test]
    fn teleport_kills_the_track_and_spawns_a_new_id() {
        let mut tracker = Tracker::new(TrackerConfig::default()).unwrap();
        for f in 0..5u64 {
            tracker.step(f, &[square(10.0, 10.0, 0.9)]).unwrap();
        }
        tracker.step(5, &[square(70.0, 70.0, 0.9)]).unwrap();
        let ts = tracker.tracklets();
        assert_eq!(ts.len(), 2);
        assert!(!ts[0].active);
        assert_eq!(ts[0].history.len(), 5);
        assert!(ts[1].active);
        assert_eq!(ts[1].start_frame(), 5);
    }

    #[test]
    fn low_scores_extend_but_never_spawn() {
        let mut tracker = Tracker::new(TrackerConfig::default()).unwrap();
        tracker.step(0, &[square(10.0, 10.0, 0.3)]).unwrap();
        assert!(tracker.tracklets().is_empty(), "0.3 must not spawn");
        tracker.step(1, &[square(10.0, 10.0, 0.8)]).unwrap();
        assert!(tracker.tracklets().is_empty(), "exactly 0.8 must not spawn");
        tracker.step(2, &[square(10.0, 10.0, 0.9)]).unwrap();
        assert_eq!(tracker.tracklets().len(), 1);
        tracker.step(3, &[square(11.0, 10.0, 0.1)]).unwrap();
        let t = &tracker.tracklets()[0];
        assert_eq!(t.history.len(), 2, "low score should extend the match");
        assert!(t.active);
    }

    #[test]
    fn a_single_miss_retires_the_tracklet_forever() {
        let mut tracker = Tracker::new(TrackerConfig::default()).unwrap();
        tracker.step(0, &[square(10.0, 10.0, 0.9)]).unwrap();
        tracker.step(1, &[]).unwrap();
        assert!(!tracker.tracklets()[0].active);
        // same spot again: must spawn a fresh id, not resurrect id 0
        tracker.step(2, &[square(10.0, 10.0, 0.9)]).unwrap();
        let ts = tracker.tracklets();
        assert_eq!(ts.len(), 2);
        assert!(!ts[0].active);
        assert_eq!(ts[0].history.len(), 1);
        assert_eq!(ts[1].id, 1);
        assert_eq!(ts[1].start_frame(), 2);
    }

    #[test]
    fn out_of_order_frames_are_rejected() {
        let mut tracker = Tracker::new(TrackerConfig::default()).unwrap();
        tracker.step(5, &[]).unwrap();
        assert!(tracker.step(5, &[]).is_err());
        assert!(tracker.step(3, &[]).is_err());
        tracker.step(9, &[]).unwrap(); // gaps are fine
    }

    #[test]
    fn equal_iou_ties_go_to_the_lower_id() {
        let mut tracker = Tracker::new(TrackerConfig::default()).unwrap();
        // two identical detections spawn two tracklets
        tracker
            .step(0, &[square(10.0, 10.0, 0.9), square(10.0, 10.0, 0.9)])
            .unwrap();
        assert_eq!(tracker.tracklets().len(), 2);
        // one detection can extend only one of them: id 0 wins the tie
        tracker.step(1, &[square(10.0, 10.0, 0.5)]).unwrap();
        let ts = tracker.tracklets();
        assert_eq!(ts[0].history.len(), 2);
        assert!(ts[0].active);
        assert_eq!(ts[1].history.len(), 1);
        assert!(!ts[1].active);
    }

    #[test]
    fn greedy_matching_pairs_by_descending_iou() {
        let mut tracker = Tracker::new(TrackerConfig::default()).unwrap();
        let t0 = BBox::new(0.0, 0.0, 10.0, 10.0, 0.9, 0).unwrap();
        let t1 = BBox::new(4.0, 0.0, 14.0, 10.0, 0.9, 0).unwrap();
        tracker.step(0, &[t0, t1]).unwrap();
        let d_a = BBox::new(1.0, 0.0, 11.0, 10.0, 0.6, 0).unwrap();
        let d_b = BBox::new(5.0, 0.0, 15.0, 10.0, 0.6, 0).unwrap();
        tracker.step(1, &[d_b, d_a]).unwrap();
        let ts = tracker.tracklets();
        assert!((ts[0].last_box().x_min - d_a.x_min).abs() < 1e-12);
        assert!((ts[1].last_box().x_min - d_b.x_min).abs() < 1e-12);
        assert!(ts[0].active && ts[1].active);
    }

    #[test]
    fn histories_have_strictly_increasing_frames() {
        let mut tracker = Tracker::new(TrackerConfig::default()).unwrap();
        for f in [0u64, 2, 5, 9] {
            tracker.step(f, &[square(10.0, 10.0, 0.9)]).unwrap();
        }
        let frames: Vec<u64> = tracker.tracklets()[0]
            .history
            .iter()
            .map(|(f, _)| *f)
            .collect();
        assert_eq!(frames, vec![0, 2, 5, 9]);
        assert!(frames.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn records_serialize_with_the_documented_field_names() {
        let mut tracker = Tracker::new(TrackerConfig::default()).unwrap();
        tracker.step(0, &[square(1.0, 2.0, 0.9)]).unwrap();
        tracker.step(1, &[square(2.0, 2.0, 0.9)]).unwrap();
        let records = track_records(&tracker);
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].frame, 0);
        assert_eq!(records[0].track_id, 0);
        assert_eq!(records[0].bbox, [1.0, 2.0, 11.0, 12.0]);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tracks.jsonl");
        write_tracks_jsonl(&path, &records).unwrap();
        let raw = std::fs::read_to_string(&path).unwrap();
        let first_line = raw.lines().next().unwrap();
        assert!(first_line.contains("\"frame\":0"));
        assert!(first_line.contains("\"track_id\":0"));
        assert!(first_line.contains("\"box\":[1.0,2.0,11.0,12.0]"));
        assert_eq!(read_tracks_jsonl(&path).unwrap(), records);
    }

    #[test]
    fn run_tracker_consumes_detection_sets_in_order() {
        use crate::boxes::Modality;
        let frames = vec![
            DetectionSet::new(0, Modality::Fused, vec![square(10.0, 10.0, 0.9)]),
            DetectionSet::new(1, Modality::Fused, vec![square(12.0, 10.0, 0.9)]),
        ];
        let tracker = run_tracker(TrackerConfig::default(), &frames).unwrap();
        assert_eq!(tracker.tracklets().len(), 1);
        assert_eq!(tracker.tracklets()[0].history.len(), 2);
    }
}
