use std::sync::OnceLock;

use proptest::prelude::*;
use qfd_core::config::RunConfig;
use qfd_core::dataset::Dataset;
use qfd_core::features::FeatureVariant;
use qfd_core::nn::{ArchConfig, ModelParams};
use qfd_core::pipeline::{
    evaluate, export_features, extract_features, feature_gap, load_features, load_model, prepare_datasets,
    run_experiment, save_model, train, train_variant, DatasetBundle, EarlyStopping, PipelineError, Progress, Suite,
    TrainConfig, FEATURES_BLOB, FEATURES_MANIFEST, FEATURE_DOMAINS, FEATURE_LABELS, MIN_IMPROVEMENT,
};
use qfd_core::quadsim::Domain;
use qfd_core::Exec;

fn tiny(per_class: usize) -> RunConfig {
    RunConfig {
        per_class,
        runs: 1,
        ..RunConfig::tiny()
    }
}

fn bundle() -> &'static DatasetBundle {
    static B: OnceLock<DatasetBundle> = OnceLock::new();
    B.get_or_init(|| prepare_datasets(&tiny(20), &[FeatureVariant::Nif, FeatureVariant::Cf], Exec::Parallel).unwrap())
}

fn normalized(v: FeatureVariant) -> (Dataset, Dataset) {
    let (_, s, t) = bundle().get(v).unwrap().prepare().unwrap();
    (s, t)
}

fn bits(p: &ModelParams<f32>) -> Vec<u32> {
    p.tensors().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn zero_lambda_adaptation_is_plain_training() {
    let cfg = tiny(20);
    let (s, t) = normalized(FeatureVariant::Nif);
    let init = ModelParams::init(&cfg.arch(FeatureVariant::Nif), 3).unwrap();
    let plain = TrainConfig { max_epochs: 4, patience: 4, ..cfg.train.clone() };
    let zero = TrainConfig { da_enabled: true, lambda: 0.0, ..plain.clone() };
    let (pa, ra) = train(&s, &t.healthy_subset(), &plain, init.clone(), Exec::Sequential).unwrap();
    let (pb, rb) = train(&s, &t.healthy_subset(), &zero, init, Exec::Parallel).unwrap();
    assert_eq!(bits(&pa), bits(&pb));
    for (a, b) in ra.epochs.iter().zip(&rb.epochs) {
        assert_eq!(a.ce.to_bits(), b.ce.to_bits());
        assert_eq!(a.total.to_bits(), b.total.to_bits());
    }
    assert!(rb.epochs[0].mmd > 0.0, "the alignment term was still evaluated");
}

/// Twenty noisy windows per class; each fault class raises one rotor
/// channel by three noise standard deviations.
fn toy_nif(t: usize, seed: u64) -> Dataset {
    use rand_distr::{Distribution, Normal};
    let mut rng = qfd_core::seed::rng_from(seed);
    let noise = Normal::new(0.0f32, 1.0).unwrap();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for label in 1..=5u8 {
        for _ in 0..20 {
            labels.push(label);
            for c in 0..7 {
                let shift = if label > 1 && c == label as usize + 1 { 3.0 } else { 0.0 };
                data.extend((0..t).map(|_| shift + noise.sample(&mut rng)));
            }
        }
    }
    Dataset::new(FeatureVariant::Nif, Domain::Source, t, data, labels).unwrap()
}

#[test]
fn cross_entropy_drops_below_chance_within_five_epochs() {
    let cfg = tiny(20);
    let s = toy_nif(cfg.window_len, 4);
    let tc = TrainConfig { max_epochs: 5, patience: 5, batch_size: 10, ..cfg.train.clone() };
    let init = ModelParams::init(&cfg.arch(FeatureVariant::Nif), 11).unwrap();
    let (_, r) = train(&s, &s.subset(&[]), &tc, init, Exec::Parallel).unwrap();
    let last = r.epochs.last().unwrap().ce;
    assert!(last < 5f64.ln(), "{:?}", r.epochs);
}

#[test]
fn untrained_model_is_at_chance_and_confusion_is_consistent() {
    use rand_distr::{Distribution, Normal};
    let cfg = tiny(200);
    let arch = cfg.arch(FeatureVariant::Nif);
    let mut rng = qfd_core::seed::rng_from(8);
    let noise = Normal::new(0.0f32, 1.0).unwrap();
    let labels: Vec<u8> = (0..1000).map(|i| (i % 5) as u8 + 1).collect();
    let data: Vec<f32> = (0..1000 * arch.sample_len()).map(|_| noise.sample(&mut rng)).collect();
    let unrelated = Dataset::new(FeatureVariant::Nif, Domain::Source, arch.window_len, data, labels).unwrap();

    let b = prepare_datasets(&cfg, &[FeatureVariant::Nif], Exec::Parallel).unwrap();
    let (_, flights, _) = b.variants[0].prepare().unwrap();
    let mut flight_acc = Vec::new();
    for seed in 0..10 {
        let p = ModelParams::init(&arch, seed).unwrap();
        for ds in [&unrelated, &flights] {
            let e = evaluate(&p, ds, Exec::Parallel).unwrap();
            let trace: usize = (0..5).map(|i| e.confusion[i][i]).sum();
            assert_eq!(trace, e.correct);
            assert_eq!(trace as f64 / e.count as f64, e.accuracy);
            for (row, count) in e.confusion.iter().zip(ds.class_counts()) {
                assert_eq!(row.iter().sum::<usize>(), count);
            }
        }
        let e = evaluate(&p, &unrelated, Exec::Parallel).unwrap();
        assert!((e.accuracy - 0.2).abs() <= 0.05, "seed {seed}: {}", e.accuracy);
        flight_acc.push(evaluate(&p, &flights, Exec::Parallel).unwrap().accuracy);
    }
    // Single untrained models may lean towards some classes of real
    // windows; over initialisations they average out to chance.
    let mean = flight_acc.iter().sum::<f64>() / flight_acc.len() as f64;
    assert!((mean - 0.2).abs() <= 0.05, "{flight_acc:?}");
}

#[test]
fn shape_mismatch_and_bad_alignment_sets_are_errors() {
    let cfg = tiny(20);
    let (s, t) = normalized(FeatureVariant::Nif);
    let cf = ModelParams::init(&cfg.arch(FeatureVariant::Cf), 1).unwrap();
    assert!(matches!(evaluate(&cf, &s, Exec::Sequential), Err(PipelineError::Nn(_))));
    let nif = ModelParams::init(&cfg.arch(FeatureVariant::Nif), 1).unwrap();
    let da = TrainConfig { da_enabled: true, ..cfg.train.clone() };
    let empty = t.subset(&[]);
    assert!(matches!(train(&s, &empty, &da, nif.clone(), Exec::Sequential), Err(PipelineError::Config(_))));
    assert!(matches!(train(&s, &t, &da, nif, Exec::Sequential), Err(PipelineError::Config(_))));
}

#[test]
fn adaptation_shrinks_the_healthy_feature_gap() {
    let cfg = tiny(20);
    let data = bundle().get(FeatureVariant::Nif).unwrap();
    let tc = TrainConfig { da_enabled: true, ..cfg.train.clone() };
    let m = train_variant(data, &cfg.arch(FeatureVariant::Nif), &tc, Exec::Parallel).unwrap();
    let (_, s, t) = data.prepare().unwrap();
    let init = ModelParams::init(&cfg.arch(FeatureVariant::Nif), qfd_core::seed::derive_seed(tc.seed, 5)).unwrap();
    let before = feature_gap(&init, &s.healthy_subset(), &t.healthy_subset(), Exec::Parallel).unwrap();
    let after = feature_gap(&m.params, &s.healthy_subset(), &t.healthy_subset(), Exec::Parallel).unwrap();
    assert_eq!(m.report.initial_gap, Some(before));
    assert!(after < before, "{before} -> {after}");
    let r = &m.report;
    assert!(r.epochs.last().unwrap().mmd < r.epochs[0].mmd);
}

#[test]
fn export_shape_and_byte_determinism() {
    let arch = ArchConfig::standard(7, 80);
    let p = ModelParams::<f32>::init(&arch, 2).unwrap();
    let make = |domain, shift: f32| {
        let labels: Vec<u8> = (0..4000).map(|i| (i / 800) as u8 + 1).collect();
        let data: Vec<f32> = (0..4000 * 7 * 80).map(|i| ((i % 977) as f32 / 488.0 - 1.0) + shift).collect();
        Dataset::new(FeatureVariant::Nif, domain, 80, data, labels).unwrap()
    };
    let s = make(Domain::Source, 0.0);
    let t = make(Domain::Target, 0.3);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let m = export_features(&p, &[&s, &t], a.path(), Exec::Parallel).unwrap();
    export_features(&p, &[&s, &t], b.path(), Exec::Sequential).unwrap();
    assert_eq!((m.rows, m.dim), (8000, 128));
    for f in [FEATURES_MANIFEST, FEATURES_BLOB, FEATURE_LABELS, FEATURE_DOMAINS] {
        assert!(std::fs::read(a.path().join(f)).unwrap() == std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let back = load_features(a.path()).unwrap();
    assert_eq!(back, extract_features(&p, &[&s, &t], Exec::Parallel).unwrap());
    assert_eq!(back.domains.iter().filter(|&&d| d == Domain::Target).count(), 4000);
    assert_eq!(back.labels[..4000], *s.labels());
}

#[test]
fn experiment_summaries_repeat_and_single_runs_have_zero_spread() {
    let cfg = tiny(20);
    let run = |exec| run_experiment(bundle(), &cfg, &Suite::ALL, exec).unwrap();
    let (a, models) = run(Exec::Parallel);
    let (b, _) = run(Exec::Sequential);
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(a.aggregates.len(), 6);
    assert!(a.aggregates.iter().all(|g| g.runs == 1 && g.std == 0.0));

    let (suite, _, m) = &models[1];
    let dir = tempfile::tempdir().unwrap();
    let tc = TrainConfig { da_enabled: suite.da(), ..cfg.train.clone() };
    save_model(dir.path(), m, &tc).unwrap();
    let (params, meta) = load_model(dir.path()).unwrap();
    assert_eq!(bits(&params), bits(&m.params));
    assert_eq!(meta.normalizer, m.normalizer);
    let (_, _, t) = bundle().get(suite.variant()).unwrap().prepare().unwrap();
    assert_eq!(Some(evaluate(&params, &t, Exec::Sequential).unwrap().accuracy), meta.target_accuracy);
}

/// Reference patience rule: stop once `patience` consecutive epochs fail to
/// beat the best loss by the minimum improvement.
fn oracle_stop(losses: &[f64], patience: usize) -> Option<usize> {
    let mut best = f64::INFINITY;
    let mut since = 0;
    for (i, &l) in losses.iter().enumerate() {
        if l < best - MIN_IMPROVEMENT {
            best = l;
            since = 0;
        } else {
            since += 1;
            if since == patience {
                return Some(i + 1);
            }
        }
    }
    None
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn early_stopping_matches_reference(losses in prop::collection::vec(0.0..2.0f64, 1..60), patience in 1usize..12) {
        let mut es = EarlyStopping::new(patience);
        let mut stopped = None;
        for (i, &l) in losses.iter().enumerate() {
            if es.observe(i + 1, l) == Progress::Stop {
                stopped = Some(i + 1);
                break;
            }
        }
        prop_assert_eq!(stopped, oracle_stop(&losses, patience));
        let seen = stopped.unwrap_or(losses.len());
        let best = losses[..seen].iter().position(|&l| l == losses[..seen].iter().cloned().fold(f64::INFINITY, f64::min));
        prop_assert!(es.best_epoch() >= 1 && es.best_epoch() <= seen);
        prop_assert!(losses[es.best_epoch() - 1] <= losses[best.unwrap()] + MIN_IMPROVEMENT);
    }
}
