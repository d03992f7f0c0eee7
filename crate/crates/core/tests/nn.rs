mod common;

use proptest::prelude::*;
use qfd_core::container::ContainerError;
use qfd_core::nn::{
    cross_entropy, features, load_checkpoint, mmd_linear, model_forward, save_checkpoint, softmax, ArchConfig, Mode,
    ModelParams, NnError,
};
use qfd_core::Exec;

#[test]
fn full_size_network_passes_double_precision_grad_check() {
    for (loss, report) in common::standard_grad_checks() {
        assert!(report.max_rel_error <= 1e-4, "{loss}: {report:?}");
        assert_eq!(report.layers.len(), 14, "{loss}");
        // The classifier head is untouched by an MMD-only loss, so only
        // layers up to dense1 must have probes there.
        let probed = report.layers.iter().filter(|l| l.checked > 0).count();
        assert!(probed >= 10, "{loss}: {report:?}");
    }
}

#[test]
fn uniform_prediction_values() {
    let p = softmax(&[0.7f64; 5]);
    assert!(p.iter().all(|v| (v - 0.2).abs() < 1e-15));
    let onehot = [1.0, 0.0, 0.0, 0.0, 0.0];
    assert!((cross_entropy(&onehot, &p) - 5f64.ln()).abs() < 1e-12);
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let arch = ArchConfig::standard(9, 80);
    let p = ModelParams::<f32>::init(&arch, 4).unwrap();
    let meta = serde_json::json!({ "note": "test" });
    save_checkpoint(dir.path(), &p, 4, meta.clone()).unwrap();
    let (q, m) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(m.meta, meta);
    for (a, b) in p.tensors().iter().zip(q.tensors()) {
        let ab: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
        let bb: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(ab, bb);
    }
    let blob = dir.path().join(qfd_core::nn::checkpoint::PARAMS);
    let mut bytes = std::fs::read(&blob).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    std::fs::write(&blob, &bytes).unwrap();
    assert!(matches!(
        load_checkpoint(dir.path()),
        Err(NnError::Container(ContainerError::Checksum { .. }))
    ));
    bytes.pop();
    std::fs::write(&blob, &bytes).unwrap();
    assert!(matches!(
        load_checkpoint(dir.path()),
        Err(NnError::Container(ContainerError::Truncated { .. }))
    ));
}

#[test]
fn eval_forward_ignores_dropout_seed_and_exec_mode() {
    let arch = ArchConfig::standard(7, 80);
    let p = ModelParams::<f32>::init(&arch, 8).unwrap();
    let n = 37;
    let x: Vec<f32> = (0..n * arch.sample_len()).map(|i| ((i * 7919) % 101) as f32 / 50.0 - 1.0).collect();
    let a = model_forward(&p, &x, n, Mode::Eval, 0.1, 1, Exec::Sequential).unwrap();
    let b = model_forward(&p, &x, n, Mode::Eval, 0.1, 2, Exec::Parallel).unwrap();
    assert_eq!(a.logits, b.logits);
    assert_eq!(a.features, features(&p, &x, n, Exec::Sequential).unwrap());
    let t1 = model_forward(&p, &x, n, Mode::Train, 0.1, 5, Exec::Parallel).unwrap();
    let t2 = model_forward(&p, &x, n, Mode::Train, 0.1, 5, Exec::Sequential).unwrap();
    assert_eq!(t1.logits, t2.logits);
    assert_ne!(t1.logits, a.logits);
}

fn rows(n: usize, d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, n * d)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_normalised_and_shift_invariant(z in prop::collection::vec(-30.0..30.0f64, 1..12), c in -100.0..100.0f64) {
        let p = softmax(&z);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-7);
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        for (a, b) in p.iter().zip(softmax(&shifted)) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        let z32: Vec<f32> = z.iter().map(|&v| v as f32).collect();
        prop_assert!((softmax(&z32).iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn linear_mmd_is_a_squared_mean_distance(
        (ns, nt, d) in (1usize..8, 1usize..8, 1usize..6),
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = qfd_core::seed::rng_from(seed);
        let mut draw = |n: usize| (0..n * d).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<f64>>();
        let s = draw(ns);
        let t = draw(nt);
        let st = mmd_linear(&s, ns, &t, nt, d).unwrap().value;
        let ts = mmd_linear(&t, nt, &s, ns, d).unwrap().value;
        prop_assert!(st >= 0.0);
        prop_assert!((st - ts).abs() <= 1e-12 * (1.0 + st));
        // Translating the target onto the source mean gives zero.
        let mean = |x: &[f64], n: usize| (0..d).map(|k| x.iter().skip(k).step_by(d).sum::<f64>() / n as f64).collect::<Vec<_>>();
        let (ms, mt) = (mean(&s, ns), mean(&t, nt));
        let moved: Vec<f64> = t.iter().enumerate().map(|(i, v)| v - mt[i % d] + ms[i % d]).collect();
        prop_assert!(mmd_linear(&s, ns, &moved, nt, d).unwrap().value <= 1e-20 + 1e-24 * st);
        let oracle: f64 = ms.iter().zip(&mt).map(|(a, b)| (a - b) * (a - b)).sum();
        prop_assert!((st - oracle).abs() <= 1e-12 * (1.0 + oracle));
    }

    #[test]
    fn identical_sets_have_zero_mmd(x in rows(6, 4)) {
        prop_assert_eq!(mmd_linear(&x, 6, &x, 6, 4).unwrap().value, 0.0);
    }
}
