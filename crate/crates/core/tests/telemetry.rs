use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shipnet_core::cost::Architecture;
use shipnet_core::telemetry::*;

#[test]
fn welford_matches_two_pass_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let d: Vec<f64> = (0..10_000).map(|_| rng.random_range(0.0..5.0)).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let s = summarize(d.iter().copied()).unwrap();
    assert!((s.mean - mean).abs() < 1e-9);
    assert!((s.variance - var).abs() < 1e-9);
    assert_eq!(s.min, d.iter().copied().fold(f64::INFINITY, f64::min));
    assert_eq!(s.max, d.iter().copied().fold(f64::NEG_INFINITY, f64::max));
}

#[test]
fn empty_run_dir_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(emit_tables(dir.path()).is_err());
}

#[test]
fn per_entity_files_merge_into_one_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut w1 = Recorder::new("run", worker_entity(0));
    let mut w2 = Recorder::new("run", worker_entity(1));
    let mut primary = Recorder::new("run", "Primary");
    for i in 0..3 {
        w1.record(Phase::PushGradients, std::time::Duration::from_millis(10 + i));
        w2.record(Phase::PushGradients, std::time::Duration::from_millis(20 + i));
    }
    primary.time(Phase::PushGlobalWeights, || ());
    for r in [&w1, &w2, &primary] {
        r.flush(dir.path()).unwrap();
    }
    assert_eq!(merge_timings(dir.path()).unwrap(), 7);
    write_completion(
        dir.path(),
        &Completion {
            run_id: "run".into(),
            architecture: Architecture::PAPER_PSV,
            wall_time_s: 7200.0,
        },
    )
    .unwrap();
    let rep = emit_tables(dir.path()).unwrap();
    assert_eq!(rep.tables.len(), 2);
    let push = &rep.tables[0];
    assert_eq!(push.phase, Phase::PushGradients);
    assert_eq!(push.rows[0].0, "Worker_001");
    assert!((push.rows[1].1.mean - 0.021).abs() < 1e-12);
    for t in &rep.tables {
        for (_, s) in &t.rows {
            assert!(s.min <= s.mean && s.mean <= s.max);
        }
    }
    // 2 h of 1 large + 4 small promo nodes
    assert!((rep.promo_cost.unwrap() - 2.0 * (1.584 + 4.0 * 0.396)).abs() < 1e-9);
    assert!(rep.text.contains("Training System Completion Time and Cost"));
    assert_eq!(rep.missing.len(), 14);
}
