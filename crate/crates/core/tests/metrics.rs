use nfhybrid_core::eval::{self, average_precision, auroc, closed_miou, fpr_at_tpr, open_miou};
use nfhybrid_core::scores::{self, ScoreKind};
use nfhybrid_core::segnet::PixelPrediction;
use proptest::prelude::*;

/// Scores drawn from a small grid so that ties are common.
fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..64)
        .prop_flat_map(|n| {
            (
                prop::collection::vec((0i32..12).prop_map(|v| v as f64 * 0.25 - 1.0), n),
                prop::collection::vec(any::<bool>(), n),
            )
        })
        .prop_filter("both classes", |(_, y)| y.contains(&true) && y.contains(&false))
}

proptest! {
    #[test]
    fn ranking_metrics_invariant_under_increasing_maps((s, y) in scored_labels(), a in 0.1f64..5.0, b in -3.0f64..3.0) {
        let exp: Vec<f64> = s.iter().map(|v| v.exp()).collect();
        let aff: Vec<f64> = s.iter().map(|v| a * v + b).collect();
        for t in [&exp, &aff] {
            prop_assert_eq!(average_precision(&s, &y).unwrap(), average_precision(t, &y).unwrap());
            prop_assert_eq!(auroc(&s, &y).unwrap(), auroc(t, &y).unwrap());
            prop_assert_eq!(fpr_at_tpr(&s, &y, 0.95).unwrap(), fpr_at_tpr(t, &y, 0.95).unwrap());
        }
    }

    #[test]
    fn auroc_of_negated_scores_complements(n in 2usize..64, seed in any::<u64>()) {
        // distinct scores
        let s: Vec<f64> = (0..n).map(|i| ((i as u64).wrapping_mul(0x9e37_79b9) ^ seed) as f64).collect();
        let y: Vec<bool> = (0..n).map(|i| (seed >> (i % 64)) & 1 == 1 || i == 0).collect();
        prop_assume!(y.contains(&false));
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        let sum = auroc(&s, &y).unwrap() + auroc(&neg, &y).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_lie_in_unit_interval((s, y) in scored_labels()) {
        for m in [average_precision(&s, &y).unwrap(), auroc(&s, &y).unwrap(), fpr_at_tpr(&s, &y, 0.95).unwrap()] {
            prop_assert!((0.0..=1.0).contains(&m));
        }
    }

    #[test]
    fn open_miou_never_exceeds_closed(
        n in 8usize..80,
        seed in any::<u64>(),
        levels in 1i32..6,
    ) {
        let k = 3;
        let mut state = seed | 1;
        let mut next = || { state ^= state << 13; state ^= state >> 7; state ^= state << 17; state };
        let mut labels = Vec::new();
        let mut anomaly = Vec::new();
        let mut pred = Vec::new();
        let mut scores = Vec::new();
        for i in 0..n {
            let is_anomaly = i == 0 || next() % 5 == 0;
            anomaly.push(is_anomaly);
            labels.push(if is_anomaly { -1 } else { (next() % k as u64) as i16 });
            pred.push((next() % k as u64) as usize);
            scores.push((next() % levels as u64) as f64);
        }
        prop_assume!(anomaly.contains(&false));
        let closed = closed_miou(&pred, &labels, k).unwrap().0;
        let open = open_miou(&pred, &scores, &labels, &anomaly, k, 0.95).unwrap().0;
        prop_assert!(open <= closed + 1e-15, "open {} closed {}", open, closed);
    }

    #[test]
    fn perfect_detector_leaves_miou_unchanged(n in 8usize..80, seed in any::<u64>()) {
        let k = 4;
        let mut state = seed | 1;
        let mut next = || { state ^= state << 13; state ^= state >> 7; state ^= state << 17; state };
        let anomaly: Vec<bool> = (0..n).map(|i| i == 0 || next() % 4 == 0).collect();
        prop_assume!(anomaly.contains(&false));
        let labels: Vec<i16> = anomaly.iter().map(|&a| if a { -1 } else { (next() % k as u64) as i16 }).collect();
        let pred: Vec<usize> = (0..n).map(|_| (next() % k as u64) as usize).collect();
        let scores: Vec<f64> = anomaly.iter().map(|&a| if a { 2.0 + (next() % 3) as f64 } else { (next() % 2) as f64 }).collect();
        let closed = closed_miou(&pred, &labels, k).unwrap();
        let open = open_miou(&pred, &scores, &labels, &anomaly, k, 0.95).unwrap();
        prop_assert_eq!(open, closed);
    }

    #[test]
    fn closed_miou_ignores_pixel_order(n in 4usize..60, seed in any::<u64>()) {
        let labels: Vec<i16> = (0..n).map(|i| ((seed >> (i % 60)) % 3) as i16).collect();
        let pred: Vec<usize> = (0..n).map(|i| ((seed >> ((i * 7) % 60)) % 3) as usize).collect();
        let mut rl = labels.clone();
        let mut rp = pred.clone();
        rl.reverse();
        rp.reverse();
        prop_assert_eq!(closed_miou(&pred, &labels, 3).unwrap(), closed_miou(&rp, &rl, 3).unwrap());
    }
}

fn prediction(class: Vec<f64>, classes: usize, ood: Vec<f64>) -> PixelPrediction {
    PixelPrediction {
        height: 1,
        width: class.len() / classes,
        classes,
        class_logits: class,
        ood_logits: Some(ood),
    }
}

fn logits(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-30.0f64..30.0, n)
}

proptest! {
    #[test]
    fn score_ranges((class, ood) in (1usize..20).prop_flat_map(|n| (logits(n * 4), logits(n * 2))), t in 0.25f64..4.0) {
        let p = prediction(class, 4, ood);
        let op = scores::score_op(&p, t).unwrap();
        let opms = scores::score_op_ms(&p, t).unwrap();
        let jsd = scores::score_jsd(&p, t).unwrap();
        for i in 0..op.values.len() {
            prop_assert!((0.0..=1.0).contains(&op.values[i]));
            prop_assert!((0.0..=1.0).contains(&opms.values[i]));
            prop_assert!(opms.values[i] <= op.values[i]);
            prop_assert!((0.0..=std::f64::consts::LN_2 + 1e-15).contains(&jsd.values[i]));
        }
        prop_assert!(scores::score_dh(&p).unwrap().values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn dh_decreases_in_every_class_logit(class in prop::collection::vec(-5.0f64..5.0, 3), ood in logits(2), c in 0usize..3, delta in 0.01f64..5.0) {
        let base = prediction(class.clone(), 3, ood.clone());
        let mut up = class;
        up[c] += delta;
        let bumped = prediction(up, 3, ood);
        prop_assert!(scores::score_dh(&bumped).unwrap().values[0] < scores::score_dh(&base).unwrap().values[0]);
    }

    #[test]
    fn metrics_agree_across_monotone_score_transform(class in logits(40), ood in logits(20), mask in prop::collection::vec(any::<bool>(), 10)) {
        prop_assume!(mask.contains(&true) && mask.contains(&false));
        // OP at T and its logit transform rank pixels identically
        let p = prediction(class, 4, ood);
        let y: Vec<bool> = mask;
        let op = scores::score_op(&p, 2.0).unwrap().values;
        let logit: Vec<f64> = p.ood_logits.as_ref().unwrap().chunks(2).map(|o| o[1] - o[0]).collect();
        // equal ranks up to floating ties at saturation
        let distinct = |v: &[f64]| { let mut s = v.to_vec(); s.sort_by(f64::total_cmp); s.dedup(); s.len() };
        prop_assume!(distinct(&op) == distinct(&logit));
        prop_assert_eq!(eval::auroc(&op, &y).unwrap(), eval::auroc(&logit, &y).unwrap());
        prop_assert_eq!(eval::average_precision(&op, &y).unwrap(), eval::average_precision(&logit, &y).unwrap());
    }
}

#[test]
fn score_kind_names_round_trip() {
    for k in ScoreKind::ALL {
        assert_eq!(k.name().parse::<ScoreKind>().unwrap(), k);
    }
}
