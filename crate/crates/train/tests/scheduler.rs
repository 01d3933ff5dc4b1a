mod common;

use std::collections::HashSet;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use shipnet_train::harness::{delivery_trial, DeliveryTrial};
use shipnet_train::keys;
use shipnet_train::scheduler::{
    decode_task, permutation, register_worker, request_task, resend_request, shuffle_epoch, wait_for_task,
    ProgressState, Scheduler, SchedulerConfig, Task,
};

fn key_set(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("chip/{i:06}")).collect()
}

/// Sends a request and lets the scheduler answer it on this thread.
fn ask(sched: &mut Scheduler, client: &mut shipnet_dataserver::Client, worker: &str) -> Task {
    let mut req = request_task(client, worker).unwrap();
    assert_eq!(sched.step().unwrap(), 1);
    wait_for_task(client, &mut req, Duration::from_secs(5)).unwrap()
}

#[test]
fn exactly_once_across_twenty_seeds() {
    let t0 = Instant::now();
    for seed in 0..20u64 {
        let trial = DeliveryTrial {
            workers: 4,
            keys: 1000,
            epochs: 3,
            batch_size: 7 + (seed as usize % 5) * 6,
            seed,
            restart_worker: None,
        };
        let report = delivery_trial(&trial).unwrap();
        for e in 0..3 {
            assert_eq!(report.discrepancies(e), (0, 0), "seed {seed} epoch {e}");
        }
    }
    eprintln!("20 delivery trials in {:.1?}", t0.elapsed());
}

#[test]
fn restarted_worker_gets_no_duplicates() {
    for seed in 0..3u64 {
        let report = delivery_trial(&DeliveryTrial {
            workers: 4,
            keys: 300,
            epochs: 2,
            batch_size: 10,
            seed,
            restart_worker: Some(1),
        })
        .unwrap();
        assert!(report.exactly_once(), "seed {seed}");
    }
}

#[test]
fn first_request_gets_permutation_prefix_and_repeats_are_idempotent() {
    let h = common::server();
    let keys = key_set(100);
    let mut sched = Scheduler::start(common::client(&h), keys.clone(), SchedulerConfig::new(10, 1, 5), "t").unwrap();
    let mut c = common::client(&h);
    let mut req = request_task(&mut c, "Worker_001").unwrap();
    sched.step().unwrap();
    let task = wait_for_task(&mut c, &mut req, Duration::from_secs(5)).unwrap();
    let perm = permutation(100, 5, 0);
    let expect: Vec<String> = perm[..10].iter().map(|&i| keys[i].clone()).collect();
    assert_eq!(task.keys, expect);

    // A retry of the same (worker, seq) gets the identical bytes and does
    // not move the cursor.
    let first = sched.handle_request("Worker_001", req.seq).unwrap();
    resend_request(&mut c, &req).unwrap();
    sched.step().unwrap();
    let (bytes, _) = c.get(&keys::task_response("Worker_001", req.seq)).unwrap().unwrap();
    assert_eq!(bytes, first);
    assert_eq!(decode_task(&bytes).unwrap().1, expect);
    assert_eq!(sched.state().cursor, 10);
}

#[test]
fn late_joiner_receives_live_cursor() {
    let h = common::server();
    let keys = key_set(100);
    let mut sched = Scheduler::start(common::client(&h), keys.clone(), SchedulerConfig::new(10, 1, 11), "t").unwrap();
    let mut a = common::client(&h);
    for _ in 0..5 {
        ask(&mut sched, &mut a, "Worker_001");
    }
    // Registering alone changes nothing.
    let mut b = common::client(&h);
    register_worker(&mut b, "Worker_002").unwrap();
    assert_eq!(sched.step().unwrap(), 0);
    assert_eq!(sched.state().cursor, 50);
    let task = ask(&mut sched, &mut b, "Worker_002");
    let perm = permutation(100, 11, 0);
    let expect: Vec<String> = perm[50..60].iter().map(|&i| keys[i].clone()).collect();
    assert_eq!(task.keys, expect);
}

#[test]
fn final_short_batch_then_done() {
    let h = common::server();
    let mut sched = Scheduler::start(common::client(&h), key_set(25), SchedulerConfig::new(10, 1, 0), "t").unwrap();
    let mut c = common::client(&h);
    let sizes: Vec<usize> = (0..4).map(|_| ask(&mut sched, &mut c, "w").keys.len()).collect();
    assert_eq!(sizes, [10, 10, 5, 0]);
    assert_eq!(c.counter(keys::EPOCH_COMPLETE).unwrap(), 1);
    assert!(sched.is_finished());
}

#[test]
fn restored_scheduler_continues_where_it_left_off() {
    let keys = key_set(60);
    let cfg = SchedulerConfig::new(8, 2, 21);
    let run = |stop_after: Option<usize>| -> Vec<Task> {
        let h = common::server();
        let mut c = common::client(&h);
        let mut sched = Scheduler::start(common::client(&h), keys.clone(), cfg.clone(), "t").unwrap();
        let mut out = Vec::new();
        loop {
            if Some(out.len()) == stop_after {
                // Replace the scheduler; the new one restores from the server.
                sched = Scheduler::start(common::client(&h), keys.clone(), cfg.clone(), "t").unwrap();
            }
            let t = ask(&mut sched, &mut c, "w");
            if t.is_done() {
                return out;
            }
            out.push(t);
        }
    };
    let straight = run(None);
    for stop in [1, 7, 8, 13] {
        let resumed = run(Some(stop));
        let strip = |v: &[Task]| v.iter().map(|t| (t.epoch, t.keys.clone())).collect::<Vec<_>>();
        assert_eq!(strip(&resumed), strip(&straight), "restart after {stop} tasks");
    }
}

#[test]
fn corrupt_progress_blob_refuses_to_start() {
    let h = common::server();
    let mut c = common::client(&h);
    c.set(keys::TASK_PROGRESS, b"SPRG garbage").unwrap();
    assert!(Scheduler::start(common::client(&h), key_set(10), SchedulerConfig::new(2, 1, 0), "t").is_err());
}

#[test]
fn progress_for_other_key_set_is_rejected() {
    let h = common::server();
    let mut c = common::client(&h);
    let mut sched = Scheduler::start(common::client(&h), key_set(10), SchedulerConfig::new(2, 1, 0), "t").unwrap();
    ask(&mut sched, &mut c, "w");
    assert!(Scheduler::start(common::client(&h), key_set(11), SchedulerConfig::new(2, 1, 0), "t").is_err());
}

#[test]
fn requests_are_served_in_ticket_order() {
    let h = common::server();
    let mut sched = Scheduler::start(common::client(&h), key_set(40), SchedulerConfig::new(5, 1, 2), "t").unwrap();
    let mut clients: Vec<_> = (0..4).map(|_| common::client(&h)).collect();
    let mut reqs: Vec<_> = clients
        .iter_mut()
        .enumerate()
        .map(|(i, c)| request_task(c, &format!("Worker_{:03}", 4 - i)).unwrap())
        .collect();
    sched.step().unwrap();
    let perm = permutation(40, 2, 0);
    for (i, (c, r)) in clients.iter_mut().zip(&mut reqs).enumerate() {
        let t = wait_for_task(c, r, Duration::from_secs(5)).unwrap();
        let expect: Vec<String> = perm[i * 5..i * 5 + 5].iter().map(|&j| format!("chip/{j:06}")).collect();
        assert_eq!(t.keys, expect, "arrival {i}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shuffle_is_a_deterministic_bijection(n in 20usize..400, seed in any::<u64>(), batch in 1usize..50) {
        let mut s = ProgressState::new(n, batch, seed).unwrap();
        while !s.is_exhausted() {
            s.advance();
        }
        let next = shuffle_epoch(&s, seed).unwrap();
        let again = shuffle_epoch(&s, seed).unwrap();
        prop_assert_eq!(&next, &again);
        let mut sorted = next.permutation.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        let moved = next.permutation.iter().zip(&s.permutation).filter(|(a, b)| a != b).count();
        prop_assert!(moved >= 10, "only {} positions changed", moved);
        let distinct: HashSet<_> = next.permutation.iter().collect();
        prop_assert_eq!(distinct.len(), n);
    }
}
