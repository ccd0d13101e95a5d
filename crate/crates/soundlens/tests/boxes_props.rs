//! Randomized properties of the box pipeline: NMS idempotence, fusion
//! order-invariance, and agreement with an independent pairwise-suppression
//! oracle.

use proptest::prelude::*;
use soundlens::boxes::{fuse_teachers, iou, nms, BBox, DetectionSet, Modality, FUSION_IOU};

/// Independent O(n^2) formulation of suppression: walk boxes in priority
/// order and knock out every lower-priority box that overlaps a survivor
/// above the threshold.
fn pairwise_oracle(boxes: &[BBox], threshold: f64) -> Vec<BBox> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| {
        boxes[j]
            .score
            .total_cmp(&boxes[i].score)
            .then_with(|| boxes[j].area().total_cmp(&boxes[i].area()))
            .then_with(|| boxes[i].x_min.total_cmp(&boxes[j].x_min))
    });
    let mut alive = vec![true; boxes.len()];
    for (pos, &i) in order.iter().enumerate() {
        if !alive[i] {
            continue;
        }
        for &j in &order[pos + 1..] {
            if alive[j] && iou(&boxes[i], &boxes[j]) > threshold {
                alive[j] = false;
            }
        }
    }
    order
        .into_iter()
        .filter(|&i| alive[i])
        .map(|i| boxes[i])
        .collect()
}

fn arb_box() -> impl Strategy<Value = BBox> {
    (0u32..20, 0u32..20, 1u32..10, 1u32..10, 0u32..=100).prop_map(|(x, y, w, h, s)| {
        BBox::new(
            x as f64,
            y as f64,
            (x + w) as f64,
            (y + h) as f64,
            s as f64 / 100.0,
            0,
        )
        .unwrap()
    })
}

fn arb_boxes(max: usize) -> impl Strategy<Value = Vec<BBox>> {
    prop::collection::vec(arb_box(), 0..max)
}

fn arb_threshold() -> impl Strategy<Value = f64> {
    (3u32..=9).prop_map(|t| t as f64 / 10.0)
}

/// Re-score boxes so every score is unique; ties are the one place where
/// ordering may legitimately differ.
fn uniquify_scores(boxes: Vec<BBox>) -> Vec<BBox> {
    boxes
        .into_iter()
        .enumerate()
        .map(|(i, b)| {
            let score = (b.score * 0.5 + i as f64 * 1e-3).min(1.0);
            b.with_score(score).unwrap()
        })
        .collect()
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
        let ab = iou(&a, &b);
        let ba = iou(&b, &a);
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn nms_is_idempotent(boxes in arb_boxes(10), threshold in arb_threshold()) {
        let once = nms(&boxes, threshold).unwrap();
        let twice = nms(&once, threshold).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn nms_survivors_never_overlap_above_threshold(
        boxes in arb_boxes(10),
        threshold in arb_threshold(),
    ) {
        let kept = nms(&boxes, threshold).unwrap();
        for i in 0..kept.len() {
            for j in i + 1..kept.len() {
                prop_assert!(iou(&kept[i], &kept[j]) <= threshold);
            }
        }
    }

    #[test]
    fn fusion_matches_pairwise_oracle(boxes in arb_boxes(10)) {
        let fused = fuse_teachers(&[DetectionSet::new(0, Modality::Rgb, boxes.clone())]).unwrap();
        let oracle = pairwise_oracle(&boxes, FUSION_IOU);
        prop_assert_eq!(fused.boxes, oracle);
    }

    #[test]
    fn fusion_is_order_invariant_with_unique_scores(
        a in arb_boxes(5),
        b in arb_boxes(5),
        c in arb_boxes(5),
    ) {
        let mut all = a;
        all.extend(b);
        all.extend(c);
        let all = uniquify_scores(all);
        let (x, rest) = all.split_at(all.len() / 3);
        let (y, z) = rest.split_at(rest.len() / 2);
        let forward = fuse_teachers(&[
            DetectionSet::new(0, Modality::Rgb, x.to_vec()),
            DetectionSet::new(0, Modality::Depth, y.to_vec()),
            DetectionSet::new(0, Modality::Thermal, z.to_vec()),
        ])
        .unwrap();
        let backward = fuse_teachers(&[
            DetectionSet::new(0, Modality::Thermal, z.to_vec()),
            DetectionSet::new(0, Modality::Rgb, x.to_vec()),
            DetectionSet::new(0, Modality::Depth, y.to_vec()),
        ])
        .unwrap();
        prop_assert_eq!(forward.boxes, backward.boxes);
    }
}
