use nfhybrid_core::eval::{self, closed_miou};
use nfhybrid_core::scores::ScoreKind;
use nfhybrid_core::segnet::{self, Heads, SegNetParams};
use nfhybrid_core::trainer::{self, Phase1Cache, TrainOptions, Trained};
use nfhybrid_core::{ExperimentConfig, Method, ScoreRegistry};

fn tiny() -> ExperimentConfig {
    ExperimentConfig {
        height: 24,
        width: 24,
        crop: 16,
        train_scenes: 3,
        test_scenes: 2,
        batch_size: 2,
        epochs_1: 2,
        epochs_2: 2,
        seg_hidden: vec![8],
        flow_hidden: vec![8],
        flow_layers: 2,
        anomaly_min_side: 3,
        anomaly_max_side: 5,
        ..ExperimentConfig::default()
    }
}

/// Equal isotropic covariances and equal priors: the Bayes rule picks the
/// nearest class mean.
fn nearest_mean(features: &[f64], means: &[Vec<f64>]) -> Vec<usize> {
    let d = means[0].len();
    features
        .chunks(d)
        .map(|x| {
            let dist = |m: &Vec<f64>| x.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            (0..means.len())
                .min_by(|&i, &j| dist(&means[i]).total_cmp(&dist(&means[j])))
                .unwrap()
        })
        .collect()
}

#[test]
fn phase1_matches_gaussian_discriminant_oracle() {
    let cfg = ExperimentConfig::default();
    let data = trainer::build_dataset(&cfg).unwrap();
    let means: Vec<Vec<f64>> = data.spec.scene.classes.iter().map(|g| g.mean.clone()).collect();
    let p1 = trainer::train_phase1(&cfg, &data).unwrap();
    let (mut learned, mut oracle, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for s in &data.test {
        let pred = segnet::forward(&p1.params, &s.features, s.height, s.width, Heads::ClassOnly).unwrap();
        learned.extend(pred.argmax());
        oracle.extend(nearest_mean(&s.features, &means));
        labels.extend_from_slice(&s.labels);
    }
    let learned = closed_miou(&learned, &labels, cfg.classes).unwrap().0;
    let oracle = closed_miou(&oracle, &labels, cfg.classes).unwrap().0;
    assert!(oracle >= 0.95, "oracle mIoU {oracle}");
    assert!(learned >= 0.95, "learned mIoU {learned}, oracle {oracle}");
}

fn random_weights_mean_auroc(kind: ScoreKind) -> f64 {
    let cfg = ExperimentConfig::default();
    let data = trainer::build_dataset(&cfg).unwrap();
    let scorers = ScoreRegistry::default();
    let mut total = 0.0;
    for seed in 0..10 {
        let params = SegNetParams::new(cfg.feature_dim, &cfg.seg_hidden, cfg.classes, 100 + seed).unwrap();
        let r = trainer::evaluate(&params, &data.test, &[kind], &scorers, "random", 0.95).unwrap();
        total += r[0].anomaly.as_ref().unwrap().auroc;
    }
    total / 10.0
}

#[test]
fn random_weights_are_chance_level() {
    for kind in [ScoreKind::Op, ScoreKind::OpMs, ScoreKind::Dh] {
        let mean = random_weights_mean_auroc(kind);
        assert!((0.4..=0.6).contains(&mean), "{} mean AUROC {mean}", kind.name());
    }
}

/// Test anomalies sit near the origin, where an untrained tanh network
/// produces small logits and hence near-uniform class posteriors; the
/// JSD score picks that up before any training.
#[test]
fn random_weights_jsd_reflects_input_norm() {
    let mean = random_weights_mean_auroc(ScoreKind::Jsd);
    assert!(mean > 0.55, "JSD mean AUROC {mean}");
}

#[test]
fn evaluation_is_repeatable_and_reports_each_score() {
    let cfg = tiny();
    let data = trainer::build_dataset(&cfg).unwrap();
    let params = SegNetParams::new(cfg.feature_dim, &cfg.seg_hidden, cfg.classes, 5).unwrap();
    let scorers = ScoreRegistry::default();
    let a = trainer::evaluate(&params, &data.test, &ScoreKind::ALL, &scorers, "m", 0.95).unwrap();
    let b = trainer::evaluate(&params, &data.test, &ScoreKind::ALL, &scorers, "m", 0.95).unwrap();
    assert_eq!(a.len(), 4);
    assert_eq!(a, b);
}

#[test]
fn record_has_one_loss_row_per_epoch_and_a_stable_fingerprint() {
    let cfg = ExperimentConfig {
        variant: "nflowjs".into(),
        ..tiny()
    };
    let (_, rec) = trainer::train(&cfg, None, TrainOptions::default()).unwrap();
    assert_eq!(rec.losses.len(), cfg.epochs_1 + cfg.epochs_2);
    let reparsed = ExperimentConfig::from_text(&cfg.to_text()).unwrap();
    assert_eq!(reparsed.fingerprint(), rec.fingerprint);
    assert!(rec.losses[cfg.epochs_1..].iter().all(|l| l.mle.is_some() && l.jsd.is_some()));
}

#[test]
fn checkpoint_round_trip_evaluates_identically() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let (trained, rec) = trainer::train(&cfg, Some(dir.path()), TrainOptions::default()).unwrap();
    let loaded = Trained::load(dir.path()).unwrap();
    assert_eq!(loaded.seg, trained.seg);
    assert_eq!(loaded.flow, trained.flow);
    let data = trainer::build_dataset(&cfg).unwrap();
    let r = trainer::evaluate(
        &loaded.seg,
        &data.test,
        &cfg.score_kinds().unwrap(),
        &ScoreRegistry::default(),
        Method::NfHybridLdLx.label(),
        cfg.tpr_target,
    )
    .unwrap();
    for (x, y) in r.iter().zip(&rec.reports) {
        assert_eq!(x.anomaly, y.anomaly);
        assert_eq!(x.closed_miou.to_bits(), y.closed_miou.to_bits());
    }
}

#[test]
fn full_grid_resumes_without_training_and_keeps_results() {
    let dir = tempfile::tempdir().unwrap();
    let configs: Vec<ExperimentConfig> = Method::ALL
        .iter()
        .map(|m| ExperimentConfig {
            variant: m.key().into(),
            ..tiny()
        })
        .collect();
    let mut cache = Phase1Cache::default();
    let first = trainer::run_grid(&configs, Some(dir.path()), &mut cache, TrainOptions::default()).unwrap();
    assert!(first.failures.is_empty(), "{:?}", first.failures);
    assert_eq!(first.trained_runs, 7);
    assert_eq!(cache.len(), 1);
    assert!(first.rows.len() >= 7);
    for r in &first.rows {
        let a = r.anomaly.as_ref().expect("anomaly metrics");
        assert!([a.ap, a.fpr95, a.auroc, a.open_miou, r.closed_miou].iter().all(|v| v.is_finite()));
    }
    let mut fresh_cache = Phase1Cache::default();
    let second = trainer::run_grid(&configs, Some(dir.path()), &mut fresh_cache, TrainOptions::default()).unwrap();
    assert_eq!(second.trained_runs, 0);
    assert!(fresh_cache.is_empty());
    let rows = |o: &trainer::GridOutcome| o.rows.iter().map(eval::EvalReport::csv_row).collect::<Vec<_>>();
    assert_eq!(rows(&first), rows(&second));
    assert_eq!(first.table(), second.table());
}

#[test]
fn single_config_grid_equals_train() {
    let cfg = ExperimentConfig {
        variant: "densehybrid".into(),
        ..tiny()
    };
    let grid = trainer::run_grid(std::slice::from_ref(&cfg), None, &mut Phase1Cache::default(), TrainOptions::default()).unwrap();
    let (_, rec) = trainer::train(&cfg, None, TrainOptions::default()).unwrap();
    let strip = |r: &eval::EvalReport| (r.anomaly.clone(), r.closed_miou.to_bits(), r.score);
    assert_eq!(
        grid.rows.iter().map(strip).collect::<Vec<_>>(),
        rec.reports.iter().map(strip).collect::<Vec<_>>()
    );
}

#[test]
fn unknown_variant_is_recorded_as_a_failure() {
    let good = tiny();
    let bad = ExperimentConfig {
        variant: "no-such-variant".into(),
        ..tiny()
    };
    let o = trainer::run_grid(&[bad, good], None, &mut Phase1Cache::default(), TrainOptions::default()).unwrap();
    assert_eq!(o.failures.len(), 1);
    assert_eq!(o.trained_runs, 1);
}
