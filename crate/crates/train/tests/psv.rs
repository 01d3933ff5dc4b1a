mod common;

use std::thread;
use std::time::Duration;

use shipnet_core::loss::FocalDiceParams;
use shipnet_core::optim::{sgd_step, CyclicSchedule, SgdConfig};
use shipnet_core::telemetry::{merge_timings, read_timings, worker_entity, Phase};
use shipnet_core::Tensor;
use shipnet_train::bundle::GradientBundle;
use shipnet_train::dataset::fetch_batch;
use shipnet_train::harness::{connect, run_psv_threads, scheduler_config};
use shipnet_train::keys;
use shipnet_train::psv::{decode_weights, Primary, PsvConfig, Worker};
use shipnet_train::scheduler::{permutation, Scheduler};
use shipnet_train::sn::{batch_loss_and_grads, SnConfig, SnTrainer};
use shipnet_train::TrainError;

fn psv_config(workers: usize, k: u32, batch: usize, epochs: u32) -> PsvConfig {
    PsvConfig {
        workers,
        accumulation: k,
        batch_size: batch,
        epochs,
        optimizer: SgdConfig {
            learning_rate: 3e-3,
            momentum: 0.9,
            weight_decay: 1e-5,
            cyclic: Some(CyclicSchedule {
                base_lr: 1e-3,
                max_lr: 5e-3,
                step_size: 3,
            }),
        },
        timeout: Duration::from_secs(60),
        ..PsvConfig::desk()
    }
}

fn bundle_of(model: &shipnet_core::unet::ModelState, worker: &str, version: u64, fill: f32) -> GradientBundle {
    GradientBundle {
        worker_id: worker.into(),
        model_version: version,
        micro_batch_count: 1,
        grads: model
            .params
            .iter()
            .map(|p| (p.name.clone(), Tensor::full(p.value.shape(), fill)))
            .collect(),
    }
}

#[test]
fn pushed_bundle_is_the_sum_of_its_micro_batches() {
    let (h, train, _) = common::populated(24, 0);
    let cfg = psv_config(1, 4, 5, 1);
    let model = common::tiny_model(10);
    let mut sched = Scheduler::start(common::client(&h), train.clone(), scheduler_config(&cfg), "t").unwrap();
    let _primary = Primary::start(common::client(&h), model.clone(), cfg.clone(), vec![], None, "t").unwrap();
    let mut worker = Worker::new(common::client(&h), "Worker_001", cfg.clone(), None, "t").unwrap();
    let mut c = common::client(&h);
    thread::scope(|s| {
        let sched_thread = s.spawn(|| sched.run());
        let worker_thread = s.spawn(|| worker.round());
        c.wait_for(keys::PSV_PUSHED, 1, Duration::from_secs(30)).unwrap().unwrap();
        let (bytes, _) = c.get(&keys::grad("Worker_001")).unwrap().unwrap();
        let pushed = GradientBundle::decode(&bytes).unwrap();
        assert_eq!((pushed.micro_batch_count, pushed.model_version), (4, 1));

        // Replay: the four tasks are the first 20 permutation entries.
        let perm = permutation(train.len(), cfg.seed, 0);
        let mut expect: Option<Vec<Tensor>> = None;
        for b in 0..4 {
            let keys: Vec<String> = perm[b * 5..b * 5 + 5].iter().map(|&i| train[i].clone()).collect();
            let (x, y) = fetch_batch(&mut c, &keys, Some((cfg.seed, 0))).unwrap();
            let (_, g) = batch_loss_and_grads(&model, &x, &y, &cfg.loss).unwrap();
            match &mut expect {
                None => expect = Some(g),
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, g)| a.add_assign(g).unwrap()),
            }
        }
        for ((name, got), want) in pushed.grads.iter().zip(expect.unwrap()) {
            let max_abs = got
                .data()
                .iter()
                .zip(want.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(max_abs <= 1e-6, "{name}: {max_abs:e}");
        }
        c.del(&keys::grad("Worker_001")).unwrap();
        c.incr(&keys::signal("Worker_001")).unwrap();
        assert!(worker_thread.join().unwrap().unwrap());
        c.incr(keys::RUN_FINISHED).unwrap();
        sched_thread.join().unwrap().unwrap();
    });
}

#[test]
fn zero_gradient_bundle_changes_nothing_but_the_version() {
    let h = common::server();
    let mut cfg = psv_config(1, 1, 1, 1);
    cfg.optimizer = SgdConfig {
        learning_rate: 1e-2,
        momentum: 0.9,
        weight_decay: 0.0,
        cyclic: None,
    };
    let model = common::tiny_model(11);
    let mut primary = Primary::start(common::client(&h), model.clone(), cfg, vec![], None, "t").unwrap();
    let mut c = common::client(&h);
    c.set(&keys::grad("Worker_001"), &bundle_of(&model, "Worker_001", 1, 0.0).encode()).unwrap();
    primary.apply(&keys::grad("Worker_001")).unwrap();
    assert_eq!(common::bits(primary.model()), common::bits(&model));
    assert_eq!(primary.version(), 2);
    let (bytes, _) = c.get(keys::WEIGHTS_GLOBAL).unwrap().unwrap();
    assert_eq!(decode_weights(&bytes).unwrap().0, 2);
    assert_eq!(c.counter(&keys::signal("Worker_001")).unwrap(), 1);
    assert!(!c.exists(&keys::grad("Worker_001")).unwrap());
}

#[test]
fn bundles_in_one_poll_are_applied_sequentially_by_worker_id() {
    let h = common::server();
    let cfg = psv_config(2, 1, 1, 1);
    let model = common::tiny_model(12);
    let mut primary = Primary::start(common::client(&h), model.clone(), cfg.clone(), vec![], None, "t").unwrap();
    let mut c = common::client(&h);
    let b2 = bundle_of(&model, "Worker_002", 1, -0.5);
    let b1 = bundle_of(&model, "Worker_001", 1, 0.25);
    c.set(&keys::grad("Worker_002"), &b2.encode()).unwrap();
    c.set(&keys::grad("Worker_001"), &b1.encode()).unwrap();
    c.incr(keys::PSV_PUSHED).unwrap();
    let pending = primary.poll().unwrap().unwrap();
    assert_eq!(pending, ["grad/Worker_001", "grad/Worker_002"]);
    for k in &pending {
        primary.apply(k).unwrap();
    }

    let mut oracle = model.clone();
    for (it, b) in [&b1, &b2].into_iter().enumerate() {
        b.load_into(&mut oracle).unwrap();
        sgd_step(&mut oracle.params, &cfg.optimizer, it as u64).unwrap();
    }
    assert_eq!(common::bits(primary.model()), common::bits(&oracle));
    assert_eq!(primary.iteration(), 2);
    // The second bundle was computed against version 1 but applied to 2.
    let st: Vec<u64> = primary.staleness().iter().map(|r| r.staleness()).collect();
    assert_eq!(st, [0, 1]);
}

#[test]
fn malformed_bundle_is_dropped_and_shape_mismatch_is_fatal() {
    let h = common::server();
    let cfg = psv_config(1, 1, 1, 1);
    let model = common::tiny_model(13);
    let mut primary = Primary::start(common::client(&h), model.clone(), cfg, vec![], None, "t").unwrap();
    let mut c = common::client(&h);
    c.set(&keys::grad("Worker_001"), b"not a bundle").unwrap();
    primary.apply(&keys::grad("Worker_001")).unwrap();
    assert_eq!(common::bits(primary.model()), common::bits(&model));
    assert_eq!(c.counter(&keys::signal("Worker_001")).unwrap(), 1);

    let mut bad = bundle_of(&model, "Worker_001", 1, 0.0);
    bad.grads[0].1 = Tensor::zeros(&[2]);
    c.set(&keys::grad("Worker_001"), &bad.encode()).unwrap();
    assert!(matches!(primary.apply(&keys::grad("Worker_001")), Err(TrainError::Fatal(_))));
    assert_eq!(c.counter(keys::RUN_ABORT).unwrap(), 1);
}

#[test]
fn one_worker_without_accumulation_tracks_single_node_training() {
    let (h, train, _) = common::populated(40, 0);
    let cfg = psv_config(1, 1, 4, 1);
    let out = run_psv_threads(h.addr(), common::tiny_model(14), &cfg, train.clone(), vec![], None, "t").unwrap();
    assert_eq!(out.steps, 10);

    let sn_cfg = SnConfig {
        shard_count: 1,
        batch_size: 4,
        epochs: 1,
        optimizer: cfg.optimizer,
        loss: FocalDiceParams::default(),
        seed: cfg.seed,
        augment: cfg.augment,
        threshold: cfg.threshold,
    };
    let mut sn = SnTrainer::new(common::tiny_model(14), sn_cfg, train, "t").unwrap();
    let mut c = common::client(&h);
    for _ in 0..10 {
        sn.step(&mut c).unwrap();
    }
    let d = common::model_rel_diff(&out.model, &sn.model);
    assert!(d <= 1e-5, "rel diff {d:e}");
    assert!(out.staleness.iter().all(|r| r.staleness() == 0));
}

#[test]
fn full_run_emits_every_phase_for_every_role() {
    let (h, train, val) = common::populated(32, 8);
    let dir = tempfile::tempdir().unwrap();
    let cfg = psv_config(2, 2, 4, 2);
    let out = run_psv_threads(h.addr(), common::tiny_model(15), &cfg, train, val, Some(dir.path()), "t").unwrap();
    // 2 epochs × 8 tasks, grouped by two per bundle.
    assert_eq!(out.workers.iter().map(|w| w.tasks).sum::<u64>(), 16);
    assert_eq!(out.steps, out.workers.iter().map(|w| w.bundles).sum::<u64>());
    assert_eq!(out.metrics.len(), 2);

    merge_timings(dir.path()).unwrap();
    let recs = read_timings(&dir.path().join("timings.csv")).unwrap();
    let has = |entity: &str, phase: Phase| recs.iter().any(|r| r.entity == entity && r.phase == phase);
    for w in 0..2 {
        let id = worker_entity(w);
        for phase in [
            Phase::ReadGlobalModel,
            Phase::RequestTask,
            Phase::WaitForTask,
            Phase::BuildAndProcessInput,
            Phase::PushGradients,
            Phase::WaitForGlobalUpdates,
            Phase::EpochCompletion,
            Phase::SaveLocalModel,
        ] {
            assert!(has(&id, phase), "{id} {phase:?}");
        }
        assert!(dir.path().join(format!("checkpoints/{id}/epoch_2.ckpt")).exists());
    }
    for phase in [Phase::PollForGradients, Phase::ReadGradientsAndUpdate, Phase::PushGlobalWeights] {
        assert!(has("Primary", phase), "{phase:?}");
    }
    assert!(has("Scheduler", Phase::SchedulerProcessRequest));
    assert!(has("Scheduler", Phase::SchedulerShuffle));
    assert!(dir.path().join("metrics.csv").exists());
    assert!(dir.path().join("staleness.csv").exists());
}

#[test]
fn restarted_worker_rejoins_and_the_run_completes() {
    let (h, train, _) = common::populated(30, 0);
    let cfg = psv_config(2, 2, 3, 2);
    let addr = h.addr();
    let mut sched = Scheduler::start(connect(addr).unwrap(), train, scheduler_config(&cfg), "t").unwrap();
    let mut primary = Primary::start(connect(addr).unwrap(), common::tiny_model(16), cfg.clone(), vec![], None, "t").unwrap();
    thread::scope(|s| {
        let st = s.spawn(|| sched.run());
        let steady = s.spawn(|| Worker::new(connect(addr).unwrap(), "Worker_001", cfg.clone(), None, "t").unwrap().run());
        let flaky = s.spawn(|| {
            let first = Worker::new(connect(addr).unwrap(), "Worker_002", cfg.clone(), None, "t")
                .unwrap()
                .crash_after(3)
                .run()
                .unwrap();
            let second = Worker::new(connect(addr).unwrap(), "Worker_002", cfg.clone(), None, "t").unwrap().run().unwrap();
            first.tasks + second.tasks
        });
        primary.run().unwrap();
        let a = steady.join().unwrap().unwrap().tasks;
        let b = flaky.join().unwrap();
        // 2 epochs × 10 tasks, each delivered once.
        assert_eq!(a + b, 20);
        st.join().unwrap().unwrap();
    });
}
