use nfhybrid_autodiff::{Graph, Tensor};
use nfhybrid_core::losses::{self, LossWeights, SegPredictions};
use nfhybrid_core::segnet::PredictionVars;
use nfhybrid_core::toydata::{IGNORE, NEG};
use nfhybrid_core::{Method, VariantConfig};
use proptest::prelude::*;

const K: usize = 3;

fn lse(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let l = lse(row);
    row.iter().map(|v| (v - l).exp()).collect()
}

fn mean_over(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Every segmentation-loss term written out with scalar arithmetic.
struct Oracle {
    cls: f64,
    d_in: f64,
    d_neg: f64,
    x: f64,
    jsd: f64,
}

fn oracle(class: &[f64], ood: &[f64], labels: &[i16]) -> Oracle {
    let rows: Vec<&[f64]> = class.chunks(K).collect();
    let oods: Vec<&[f64]> = ood.chunks(2).collect();
    let inl = |i: &usize| labels[*i] >= 0;
    let neg = |i: &usize| labels[*i] == NEG;
    let n = labels.len();
    let jsd_row = |r: &[f64]| {
        let p = softmax(r);
        let u = 1.0 / K as f64;
        let m: Vec<f64> = p.iter().map(|pi| 0.5 * (pi + u)).collect();
        let kl_p: f64 = p.iter().zip(&m).map(|(pi, mi)| if *pi > 0.0 { pi * (pi / mi).ln() } else { 0.0 }).sum();
        let kl_u: f64 = m.iter().map(|mi| u * (u / mi).ln()).sum();
        0.5 * (kl_p + kl_u)
    };
    Oracle {
        cls: mean_over((0..n).filter(inl).map(|i| lse(rows[i]) - rows[i][labels[i] as usize])),
        d_in: mean_over((0..n).filter(inl).map(|i| lse(oods[i]) - oods[i][0])),
        d_neg: mean_over((0..n).filter(neg).map(|i| lse(oods[i]) - oods[i][1])),
        x: mean_over((0..n).filter(neg).map(|i| lse(rows[i]))),
        jsd: mean_over((0..n).filter(neg).map(|i| jsd_row(rows[i]))),
    }
}

fn batch() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<i16>)> {
    (3usize..24).prop_flat_map(|n| {
        (
            prop::collection::vec(-6.0f64..6.0, n * K),
            prop::collection::vec(-6.0f64..6.0, n * 2),
            prop::collection::vec(prop::sample::select(vec![0i16, 1, 2, NEG, IGNORE]), n),
        )
    })
    .prop_map(|(c, o, mut l)| {
        // at least one inlier and one negative pixel
        l[0] = 1;
        l[1] = NEG;
        (c, o, l)
    })
}

fn preset(m: Method) -> VariantConfig {
    VariantConfig::preset(m)
}

proptest! {
    #[test]
    fn loss_seg_is_the_weighted_sum_of_its_terms(
        (class, ood, labels) in batch(),
        method in prop::sample::select(Method::ALL.to_vec()),
        bx in 0.0f64..1.0,
        bd in 0.0f64..1.0,
        bj in 0.0f64..1.0,
        bo in 0.0f64..2.0,
    ) {
        let n = labels.len();
        let v = preset(method);
        let w = LossWeights { beta_x: bx, beta_d: bd, beta_jsd: bj, ood_head_beta: bo };
        let mut g = Graph::new();
        let c = g.constant(Tensor::matrix(n, K, class.clone()).unwrap());
        let o = g.constant(Tensor::matrix(n, 2, ood.clone()).unwrap());
        let p = PredictionVars { class_logits: c, ood_logits: Some(o) };
        let l = losses::loss_seg(&mut g, &SegPredictions::single(p), &labels, &w, &v).unwrap();
        let want = oracle(&class, &ood, &labels);
        let mut expected = want.cls;
        if v.use_ood_head {
            expected += want.d_in + v.neg_d_weight(&w) * want.d_neg;
        }
        if v.use_energy {
            expected += bx * want.x;
        }
        if v.seg_jsd {
            expected += bj * want.jsd;
        }
        let got = g.value(l.total).item();
        prop_assert!((got - expected).abs() <= 1e-12 * expected.abs().max(1.0), "{got} vs {expected}");
        prop_assert!((g.value(l.cls).item() - want.cls).abs() <= 1e-12 * want.cls.max(1.0));
        prop_assert_eq!(l.x.is_some(), v.use_energy);
        prop_assert_eq!(l.d_inlier.is_some(), v.use_ood_head);
        prop_assert_eq!(l.jsd.is_some(), v.seg_jsd);
    }

    #[test]
    fn jsd_to_uniform_is_bounded_and_zero_at_uniform(row in prop::collection::vec(-20.0f64..20.0, K), shift in -5.0f64..5.0) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, K, row.clone()).unwrap());
        let j = losses::jsd_to_uniform_rows(&mut g, x).unwrap();
        let v = g.value(j).data()[0];
        prop_assert!((-1e-15..=std::f64::consts::LN_2).contains(&v));
        let flat = g.constant(Tensor::matrix(1, K, vec![shift; K]).unwrap());
        let j0 = losses::jsd_to_uniform_rows(&mut g, flat).unwrap();
        prop_assert!(g.value(j0).data()[0].abs() < 1e-15);
    }

    #[test]
    fn loss_x_is_shift_equivariant(row in prop::collection::vec(-6.0f64..6.0, 2 * K), c in -3.0f64..3.0) {
        let labels = [NEG, NEG];
        let eval = |r: Vec<f64>| {
            let mut g = Graph::new();
            let x = g.constant(Tensor::matrix(2, K, r).unwrap());
            let l = losses::loss_x(&mut g, x, &labels).unwrap().unwrap();
            g.value(l).item()
        };
        let shifted: Vec<f64> = row.iter().map(|v| v + c).collect();
        prop_assert!((eval(shifted) - eval(row) - c).abs() < 1e-12);
    }
}

#[test]
fn terms_without_support_are_absent() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::matrix(2, K, vec![0.1, 0.2, 0.3, 1.0, 0.0, -1.0]).unwrap());
    let o = g.constant(Tensor::matrix(2, 2, vec![0.0, 1.0, 2.0, 0.0]).unwrap());
    let labels = [0, IGNORE];
    assert!(losses::loss_x(&mut g, c, &labels).unwrap().is_none());
    assert!(losses::loss_d_negative(&mut g, o, &labels).unwrap().is_none());
    assert!(losses::loss_cls(&mut g, c, &[NEG, IGNORE]).is_err());
}

#[test]
fn routing_rejects_flow_gradients_with_auxiliary_negatives() {
    let mut v = VariantConfig::preset(Method::DenseHybrid);
    v.grads_to_flow.ld = true;
    let mut g = Graph::new();
    let s = g.param(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
    assert!(losses::route_gradients(&mut g, &v, s).is_err());
}
