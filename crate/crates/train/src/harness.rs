//! Runs every PSv role as a thread of this process, each with its own data
//! server connection. Roles still share nothing but the server.

use std::net::SocketAddr;
use std::path::Path;
use std::thread;
use std::time::Duration;

use shipnet_core::metrics::MetricRow;
use shipnet_core::telemetry::worker_entity;
use shipnet_core::unet::ModelState;
use shipnet_dataserver::Client;

use crate::error::{Result, TrainError};
use crate::keys;
use crate::psv::{Primary, PsvConfig, StalenessRow, Worker, WorkerSummary};
use crate::scheduler::{Scheduler, SchedulerConfig};

const CONNECT_TIMEOUT: Duration = Duration::from_secs(10);

pub fn connect(addr: SocketAddr) -> Result<Client> {
    Ok(Client::connect_retry(addr, CONNECT_TIMEOUT)?)
}

#[derive(Debug)]
pub struct PsvOutcome {
    pub model: ModelState,
    pub steps: u64,
    pub metrics: Vec<MetricRow>,
    pub staleness: Vec<StalenessRow>,
    pub workers: Vec<WorkerSummary>,
}

pub fn scheduler_config(cfg: &PsvConfig) -> SchedulerConfig {
    SchedulerConfig {
        poll: cfg.poll,
        ..SchedulerConfig::new(cfg.batch_size, cfg.epochs, cfg.seed)
    }
}

/// Trains `model` with the scheduler, the primary and `cfg.workers` workers
/// on threads. The chips named by `train_keys` and `val_keys` must already
/// be on the server. The first failing role aborts the others.
pub fn run_psv_threads(
    addr: SocketAddr,
    model: ModelState,
    cfg: &PsvConfig,
    train_keys: Vec<String>,
    val_keys: Vec<String>,
    run_dir: Option<&Path>,
    run_id: &str,
) -> Result<PsvOutcome> {
    cfg.validate()?;
    let mut scheduler = Scheduler::start(connect(addr)?, train_keys, scheduler_config(cfg), run_id)?;
    let mut primary = Primary::start(connect(addr)?, model, cfg.clone(), val_keys, run_dir, run_id)?;
    let mut workers = (0..cfg.workers)
        .map(|i| Worker::new(connect(addr)?, &worker_entity(i), cfg.clone(), run_dir, run_id))
        .collect::<Result<Vec<_>>>()?;

    thread::scope(|s| {
        let sched = s.spawn(|| {
            let r = scheduler.run();
            if let Some(dir) = run_dir {
                scheduler.recorder().flush(dir)?;
            }
            r
        });
        let handles: Vec<_> = workers.iter_mut().map(|w| s.spawn(move || w.run())).collect();
        let mut errors: Vec<TrainError> = primary.run().err().into_iter().collect();
        let mut summaries = Vec::new();
        for h in handles {
            match h.join().expect("worker thread panicked") {
                Ok(sum) => summaries.push(sum),
                Err(e) => errors.push(e),
            }
        }
        if !errors.is_empty() {
            // Make sure the scheduler leaves its loop.
            if let Ok(mut c) = connect(addr) {
                let _ = c.incr(keys::RUN_ABORT);
            }
        }
        if let Err(e) = sched.join().expect("scheduler thread panicked") {
            errors.push(e);
        }
        // Report the root cause rather than the aborts it triggered.
        match errors.iter().position(|e| !matches!(e, TrainError::Aborted)) {
            Some(i) => Err(errors.swap_remove(i)),
            None if !errors.is_empty() => Err(TrainError::Aborted),
            None => Ok(summaries),
        }
    })
    .map(|summaries| PsvOutcome {
        steps: primary.iteration(),
        metrics: primary.metrics().to_vec(),
        staleness: primary.staleness().to_vec(),
        workers: summaries,
        model: primary.into_model(),
    })
}

/// One concurrent delivery experiment against a private server.
#[derive(Clone, Debug)]
pub struct DeliveryTrial {
    pub workers: usize,
    pub keys: usize,
    pub epochs: u32,
    pub batch_size: usize,
    pub seed: u64,
    /// This worker drops its connection after a few tasks and rejoins
    /// under the same id.
    pub restart_worker: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct DeliveryReport {
    pub key_set: Vec<String>,
    /// Keys received by workers, grouped by task epoch.
    pub delivered: Vec<Vec<String>>,
    pub tasks: usize,
}

impl DeliveryReport {
    /// (duplicates, omissions) of one epoch against the key set.
    pub fn discrepancies(&self, epoch: usize) -> (usize, usize) {
        let mut got = self.delivered.get(epoch).cloned().unwrap_or_default();
        got.sort();
        let before = got.len();
        got.dedup();
        let duplicates = before - got.len();
        let omissions = self.key_set.iter().filter(|k| got.binary_search(k).is_err()).count();
        (duplicates, omissions)
    }

    pub fn exactly_once(&self) -> bool {
        (0..self.delivered.len()).all(|e| self.discrepancies(e) == (0, 0))
    }
}

pub fn delivery_trial(trial: &DeliveryTrial) -> Result<DeliveryReport> {
    use shipnet_dataserver::{serve, ServerConfig};

    use crate::scheduler::{fetch_task, register_worker};

    let server = serve("127.0.0.1:0", ServerConfig::default())?;
    let addr = server.addr();
    let key_set: Vec<String> = (0..trial.keys).map(|i| format!("{}{i:06}", keys::TRAIN_PREFIX)).collect();
    let mut scheduler = Scheduler::start(
        connect(addr)?,
        key_set.clone(),
        SchedulerConfig::new(trial.batch_size, trial.epochs, trial.seed),
        "delivery",
    )?;
    let timeout = Duration::from_secs(60);
    let received = thread::scope(|s| -> Result<Vec<(u32, Vec<String>)>> {
        let sched = s.spawn(|| scheduler.run());
        let handles: Vec<_> = (0..trial.workers)
            .map(|w| {
                let restart = trial.restart_worker == Some(w);
                s.spawn(move || -> Result<Vec<(u32, Vec<String>)>> {
                    let id = worker_entity(w);
                    let mut client = connect(addr)?;
                    register_worker(&mut client, &id)?;
                    let mut got = Vec::new();
                    loop {
                        if restart && got.len() == 3 {
                            drop(client);
                            client = connect(addr)?;
                            register_worker(&mut client, &id)?;
                        }
                        let task = fetch_task(&mut client, &id, timeout)?;
                        if task.is_done() {
                            return Ok(got);
                        }
                        got.push((task.epoch, task.keys));
                    }
                })
            })
            .collect();
        let mut all = Vec::new();
        let mut err = None;
        for h in handles {
            match h.join().expect("worker thread panicked") {
                Ok(v) => all.extend(v),
                Err(e) => {
                    err.get_or_insert(e);
                }
            }
        }
        let mut c = connect(addr)?;
        c.incr(if err.is_some() { keys::RUN_ABORT } else { keys::RUN_FINISHED })?;
        let sched_result = sched.join().expect("scheduler thread panicked");
        if let Some(e) = err {
            return Err(e);
        }
        sched_result?;
        Ok(all)
    })?;
    let mut delivered = vec![Vec::new(); trial.epochs as usize];
    for (epoch, task_keys) in &received {
        delivered
            .get_mut(*epoch as usize)
            .ok_or_else(|| TrainError::Protocol(format!("task for epoch {epoch} beyond the run")))?
            .extend(task_keys.iter().cloned());
    }
    Ok(DeliveryReport {
        key_set,
        delivered,
        tasks: received.len(),
    })
}
