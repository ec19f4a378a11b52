mod common;

use avclip::autodiff::Matrix;
use avclip::encoders::EmbeddingVector;
use avclip::grounding::{soft_threshold, SoftThreshold};
use avclip::llm_guidance::{decode_embedding, encode_embedding};
use avclip::losses::{area_regularization, symmetric_infonce, LossWeights};
use avclip::metrics::*;
use avclip::synthdata::Pairing;
use common::*;
use proptest::prelude::*;

fn unit(v: f64) -> bool {
    (0.0..=1.0).contains(&v)
}

fn summary(records: &[EvalRecord]) -> Vec<f64> {
    let matched: Vec<EvalRecord> = records.iter().filter(|r| r.pairing == Pairing::Matched).cloned().collect();
    let mut out = vec![
        ciou_success(&matched, 0.5, ThresholdMode::FIXED).unwrap(),
        auc(&matched, ThresholdMode::FIXED).unwrap(),
        auc(&matched, ThresholdMode::ADAPTIVE).unwrap(),
        loc_acc(records, ThresholdMode::FIXED).unwrap(),
    ];
    let (m, f) = segmentation_metrics(&matched, ThresholdMode::FIXED, DEFAULT_BETA2).unwrap();
    let d = detection_pr(records, ThresholdMode::FIXED).unwrap();
    let i = interactive_metrics(records).unwrap();
    out.extend([m, f, d.ap, d.max_f1, i.iiou, i.iauc, i.iiou_adaptive, i.iauc_adaptive]);
    out
}

fn matrix(values: &[f64], b: usize) -> Matrix {
    Matrix::from_vec(b, b, values[..b * b].to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn metrics_lie_in_unit_interval(seed in any::<u64>()) {
        let c = random_case(seed);
        for v in summary(&c.records) {
            prop_assert!(unit(v), "{v}");
        }
        let m = multisource_metrics(&c.multi, ThresholdMode::FIXED).unwrap();
        for v in [m.cap, m.piap, m.ciou_10, m.ciou_30, m.ciou_50, m.auc] {
            prop_assert!(unit(v));
        }
    }

    #[test]
    fn metrics_ignore_record_order(seed in any::<u64>(), rot in 1usize..10) {
        let c = random_case(seed);
        let mut shuffled = c.records.clone();
        shuffled.reverse();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        let (a, b) = (summary(&c.records), summary(&shuffled));
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12, "{a:?} vs {b:?}");
        }
        let mut multi = c.multi.clone();
        multi.reverse();
        let m1 = multisource_metrics(&c.multi, ThresholdMode::FIXED).unwrap();
        let m2 = multisource_metrics(&multi, ThresholdMode::FIXED).unwrap();
        prop_assert!((m1.cap - m2.cap).abs() < 1e-12 && (m1.piap - m2.piap).abs() < 1e-12);
        prop_assert_eq!(m1.ciou_50, m2.ciou_50);
    }

    #[test]
    fn curve_bounds(seed in any::<u64>()) {
        let c = random_case(seed);
        let d = detection_pr(&c.records, ThresholdMode::FIXED).unwrap();
        for (p, r) in d.curve.precision.iter().zip(&d.curve.recall) {
            prop_assert!(d.max_f1 >= f_beta(*p, *r, 1.0) - 1e-15);
        }
        prop_assert!(d.max_f1 <= 1.0);
        let matched: Vec<EvalRecord> = c.records.iter().filter(|r| r.pairing == Pairing::Matched).cloned().collect();
        let best = auc_thresholds()
            .iter()
            .map(|&t| ciou_success(&matched, t, ThresholdMode::FIXED).unwrap())
            .fold(0.0, f64::max);
        prop_assert!(auc(&matched, ThresholdMode::FIXED).unwrap() <= best + 1e-15);
    }

    #[test]
    fn adding_a_localized_record_never_lowers_loc_acc(seed in any::<u64>()) {
        let c = random_case(seed);
        let before = loc_acc(&c.records, ThresholdMode::FIXED).unwrap();
        let gt: Vec<bool> = (0..SIDE * SIDE).map(|i| i % SIDE < 4).collect();
        let heat = avclip::grounding::LocalizationHeatmap::new(SIDE, SIDE, gt.iter().map(|&g| if g { 0.9 } else { 0.1 }).collect()).unwrap();
        let mut more = c.records.clone();
        more.push(EvalRecord::new("extra", "extra", Some(0), Pairing::Matched, heat, gt).unwrap());
        prop_assert!(loc_acc(&more, ThresholdMode::FIXED).unwrap() >= before);
    }

    #[test]
    fn adding_a_confident_false_positive_never_raises_ap(seed in any::<u64>()) {
        let c = random_case(seed);
        let before = detection_pr(&c.records, ThresholdMode::FIXED).unwrap().ap;
        let heat = avclip::grounding::LocalizationHeatmap::new(SIDE, SIDE, vec![1.0; SIDE * SIDE]).unwrap();
        let mut more = c.records.clone();
        more.push(EvalRecord::new("fp", "fp", None, Pairing::Silent, heat, vec![false; SIDE * SIDE]).unwrap());
        prop_assert!(detection_pr(&more, ThresholdMode::FIXED).unwrap().ap <= before + 1e-15);
    }

    #[test]
    fn infonce_is_shift_and_permutation_invariant(
        values in prop::collection::vec(-5.0f64..5.0, 16),
        shift in -50.0f64..50.0,
        tau in 0.05f64..2.0,
    ) {
        let b = 4;
        let s = matrix(&values, b);
        let base = symmetric_infonce(&s, tau).unwrap();
        prop_assert!(base >= 0.0);
        let shifted = s.map(|v| v + shift);
        prop_assert!((symmetric_infonce(&shifted, tau).unwrap() - base).abs() < 1e-9);
        let perm = [2, 0, 3, 1];
        let mut p = Matrix::zeros(b, b);
        for i in 0..b {
            for j in 0..b {
                p.set(i, j, s.get(perm[i], perm[j]));
            }
        }
        prop_assert!((symmetric_infonce(&p, tau).unwrap() - base).abs() < 1e-9);
    }

    #[test]
    fn area_regularizer_is_nonnegative(pos in prop::collection::vec(0.0f64..1.0, 3), neg in prop::collection::vec(0.0f64..1.0, 6)) {
        prop_assert!(area_regularization(&pos, &neg, &LossWeights::default()) >= 0.0);
    }

    #[test]
    fn soft_threshold_stays_in_open_unit_interval(values in prop::collection::vec(-100.0f64..100.0, 1..64)) {
        for v in soft_threshold(&values, SoftThreshold::default()) {
            prop_assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn embedding_encoding_round_trips_bitwise(values in prop::collection::vec(-1e6f64..1e6, 1..32)) {
        prop_assume!(values.iter().any(|v| *v != 0.0));
        let e = EmbeddingVector::new(values).unwrap();
        prop_assert_eq!(decode_embedding(&encode_embedding(&e)).unwrap(), e);
    }
}
