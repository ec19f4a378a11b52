mod common;

use avclip::metrics::*;
use common::*;

#[test]
fn metrics_match_brute_force_twins_on_random_cases() {
    for seed in 0..20 {
        let case = random_case(seed);
        let bad = oracle_mismatches(&case);
        assert!(bad.is_empty(), "case {seed}: {bad:#?}");
    }
}

#[test]
fn random_cases_exercise_every_branch() {
    let mut ious = Vec::new();
    let mut group_sizes = std::collections::BTreeSet::new();
    let mut ks = std::collections::BTreeSet::new();
    for seed in 0..20 {
        let c = random_case(seed);
        ious.extend(c.records.iter().map(|r| r.iou(ThresholdMode::FIXED)));
        for g in group_by_image(&c.records) {
            group_sizes.insert(g.len());
        }
        ks.extend(c.multi.iter().map(|m| m.gts.len()));
    }
    assert!(ious.iter().any(|&v| v >= 0.5) && ious.iter().any(|&v| v > 0.0 && v < 0.5) && ious.iter().any(|&v| v == 0.0));
    assert_eq!(group_sizes.into_iter().collect::<Vec<_>>(), vec![1, 2, 3]);
    assert_eq!(ks.into_iter().collect::<Vec<_>>(), vec![1, 2, 3, 4]);
}

#[test]
fn twelve_record_detection_hand_case() {
    // Confidences 0.95..0.40; matched hits at ranks 1, 2, 4, 7; misses and false alarms elsewhere.
    let dets = [
        (0.95, true), (0.90, true), (0.85, false), (0.80, true), (0.75, false), (0.70, false),
        (0.65, true), (0.60, false), (0.55, false), (0.50, false), (0.45, false), (0.40, false),
    ];
    let positives = 6;
    let detections: Vec<Detection> = dets.iter().map(|&(c, h)| Detection { confidence: c, hit: h }).collect();
    let curve = pr_curve(&detections, positives);
    let (oap, of1) = o_ap_points(&dets, positives);
    assert!((average_precision(&curve) - oap).abs() < 1e-12);
    assert!((max_f1(&curve) - of1).abs() < 1e-12);
    // Envelope by hand: recall steps of 1/6 at precisions 1, 1, 3/4, 4/7.
    let hand = (1.0 + 1.0 + 0.75 + 4.0 / 7.0) / 6.0;
    assert!((oap - hand).abs() < 1e-12);
}

#[test]
fn constant_confidence_ap_is_the_base_rate() {
    let dets: Vec<Detection> = [true, false, false, false].iter().map(|&hit| Detection { confidence: 0.5, hit }).collect();
    let curve = pr_curve(&dets, 1);
    assert_eq!(curve.precision, vec![0.25]);
    assert_eq!(curve.recall, vec![1.0]);
    assert_eq!(average_precision(&curve), 0.25);
}

#[test]
fn l_shaped_mask_box() {
    let mut m = vec![false; 16 * 16];
    for y in 3..10 {
        m[y * 16 + 2] = true;
    }
    for x in 2..8 {
        m[9 * 16 + x] = true;
    }
    let b = mask_to_bbox(&m, 16).unwrap();
    assert_eq!(Some((b.x, b.y, b.w, b.h)), o_bbox(&m, 16));
    assert_eq!((b.x, b.y, b.w, b.h), (2, 3, 6, 7));
    assert_eq!(bbox_mask(&b, 16, 16).iter().filter(|&&v| v).count(), 42);
}
