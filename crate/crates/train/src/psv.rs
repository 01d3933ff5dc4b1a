//! Parameter-server variant: a primary that owns the global model and
//! workers that accumulate gradients over K micro-batches.
//!
//! Each bundle the primary reads becomes its own optimizer step (bundles are
//! never averaged together), applied in worker-id order within a poll.
//! Bundles computed against older weights are still applied; the gap is
//! logged to `staleness.csv`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use shipnet_core::codec::put_u64;
use shipnet_core::loss::FocalDiceParams;
use shipnet_core::metrics::{MetricRow, DEFAULT_THRESHOLD};
use shipnet_core::optim::{sgd_step, SgdConfig};
use shipnet_core::telemetry::{Phase, Recorder};
use shipnet_core::unet::ModelState;
use shipnet_dataserver::Client;

use crate::bundle::GradientBundle;
use crate::dataset::fetch_batch;
use crate::error::{Result, TrainError};
use crate::eval::evaluate;
use crate::keys;
use crate::scheduler::{register_worker, request_task, wait_for_task};
use crate::sn::{append_metric, batch_loss_and_grads, checkpoint_path, metric_row};

pub const PRIMARY_ENTITY: &str = "Primary";
pub const STALENESS_FILE: &str = "staleness.csv";
const WAIT_SLICE: Duration = Duration::from_millis(200);

#[derive(Clone, Debug, PartialEq)]
pub struct PsvConfig {
    pub workers: usize,
    /// Micro-batches accumulated per pushed bundle (K).
    pub accumulation: u32,
    /// Keys per task (one micro-batch).
    pub batch_size: usize,
    pub epochs: u32,
    pub optimizer: SgdConfig,
    pub loss: FocalDiceParams,
    pub seed: u64,
    pub augment: bool,
    pub threshold: f32,
    pub poll: Duration,
    /// Longest a role waits for any single event before giving up.
    pub timeout: Duration,
}

impl PsvConfig {
    /// Desk defaults: 4 workers, K=4, batch 16, plain SGD at 1e-3 without
    /// momentum. Bundles arrive several versions stale, and stale steps with
    /// momentum 0.9 make the desk run oscillate between all-background and
    /// all-ship predictions.
    pub fn desk() -> Self {
        PsvConfig {
            workers: 4,
            accumulation: 4,
            batch_size: 16,
            epochs: 30,
            optimizer: SgdConfig {
                learning_rate: 1e-3,
                momentum: 0.0,
                weight_decay: 1e-5,
                cyclic: None,
            },
            loss: FocalDiceParams::default(),
            seed: 7,
            augment: true,
            threshold: DEFAULT_THRESHOLD,
            poll: Duration::from_millis(10),
            timeout: Duration::from_secs(600),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 || self.accumulation == 0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(TrainError::Config(
                "workers, accumulation, batch_size and epochs must be >= 1".into(),
            ));
        }
        self.optimizer.validate()?;
        self.loss.validate()?;
        Ok(())
    }
}

fn aborted(client: &mut Client) -> Result<bool> {
    Ok(client.counter(keys::RUN_ABORT)? > 0)
}

/// Waits until the counter at `key` reaches `min`, checking for an abort
/// between slices.
fn wait_counter(client: &mut Client, key: &str, min: u64, timeout: Duration) -> Result<u64> {
    let deadline = Instant::now() + timeout;
    loop {
        let now = Instant::now();
        if now >= deadline {
            return Err(TrainError::Timeout(format!("{key} did not reach {min}")));
        }
        if let Some(v) = client.wait_for(key, min, (deadline - now).min(WAIT_SLICE))? {
            return Ok(v);
        }
        if aborted(client)? {
            return Err(TrainError::Aborted);
        }
    }
}

/// Global weights payload: `u64 version | UNET checkpoint`.
pub fn encode_weights(version: u64, model: &ModelState) -> Vec<u8> {
    let mut out = Vec::new();
    put_u64(&mut out, version);
    out.extend_from_slice(&model.to_checkpoint_bytes());
    out
}

pub fn decode_weights(bytes: &[u8]) -> Result<(u64, ModelState)> {
    if bytes.len() < 8 {
        return Err(TrainError::Protocol("global weights payload truncated".into()));
    }
    let version = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    Ok((version, ModelState::from_checkpoint_bytes(&bytes[8..])?))
}

/// Stores the weights, then bumps the version counter, so a reader that sees
/// version v always finds a payload of version >= v. The primary is the only
/// writer of both keys.
fn publish_weights(client: &mut Client, model: &ModelState) -> Result<u64> {
    let version = client.counter(keys::WEIGHTS_VERSION)? + 1;
    client.set(keys::WEIGHTS_GLOBAL, &encode_weights(version, model))?;
    let bumped = client.incr(keys::WEIGHTS_VERSION)?;
    if bumped != version {
        return Err(TrainError::Protocol(format!(
            "weights version moved from {} to {bumped} under the primary",
            version - 1
        )));
    }
    Ok(version)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StalenessRow {
    pub worker: String,
    /// Weights version the bundle was computed against.
    pub computed_against: u64,
    /// Global version at the moment it was applied.
    pub applied_to: u64,
}

impl StalenessRow {
    pub fn staleness(&self) -> u64 {
        self.applied_to.saturating_sub(self.computed_against)
    }
}

pub struct Primary {
    client: Client,
    model: ModelState,
    config: PsvConfig,
    iteration: u64,
    version: u64,
    recorder: Recorder,
    run_dir: Option<PathBuf>,
    val_keys: Vec<String>,
    run_id: String,
    staleness: Vec<StalenessRow>,
    evaluated_epochs: u32,
    pushed_seen: u64,
    metrics: Vec<MetricRow>,
}

impl Primary {
    /// Publishes `model` as version 1 of the global weights.
    pub fn start(
        mut client: Client,
        model: ModelState,
        config: PsvConfig,
        val_keys: Vec<String>,
        run_dir: Option<&Path>,
        run_id: &str,
    ) -> Result<Primary> {
        config.validate()?;
        if let Some(d) = run_dir {
            fs::create_dir_all(d.join("checkpoints"))?;
        }
        let version = publish_weights(&mut client, &model)?;
        Ok(Primary {
            client,
            model,
            config,
            iteration: 0,
            version,
            recorder: Recorder::new(run_id, PRIMARY_ENTITY),
            run_dir: run_dir.map(Path::to_path_buf),
            val_keys,
            run_id: run_id.to_string(),
            staleness: Vec::new(),
            evaluated_epochs: 0,
            pushed_seen: 0,
            metrics: Vec::new(),
        })
    }

    pub fn model(&self) -> &ModelState {
        &self.model
    }

    pub fn into_model(self) -> ModelState {
        self.model
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Optimizer steps taken so far (one per applied bundle).
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn staleness(&self) -> &[StalenessRow] {
        &self.staleness
    }

    pub fn metrics(&self) -> &[MetricRow] {
        &self.metrics
    }

    pub fn recorder(&self) -> &Recorder {
        &self.recorder
    }

    /// Applies the bundle stored at `grad/<worker>`, publishes the new
    /// weights and signals the worker. Malformed bundles are dropped (the
    /// worker is still signalled); a shape mismatch is fatal.
    pub fn apply(&mut self, key: &str) -> Result<()> {
        let t0 = Instant::now();
        let worker = key.strip_prefix("grad/").unwrap_or(key).to_string();
        let Some((bytes, _)) = self.client.get(key)? else {
            return Ok(());
        };
        let decoded = GradientBundle::decode(&bytes).and_then(|b| {
            if b.micro_batch_count == 0 {
                return Err(TrainError::Protocol("bundle with zero micro-batches".into()));
            }
            b.load_into(&mut self.model)?;
            Ok(b)
        });
        let applied = match decoded {
            Ok(b) => {
                sgd_step(&mut self.model.params, &self.config.optimizer, self.iteration)?;
                self.iteration += 1;
                self.staleness.push(StalenessRow {
                    worker: worker.clone(),
                    computed_against: b.model_version,
                    applied_to: self.version,
                });
                true
            }
            Err(TrainError::Fatal(msg)) => {
                self.client.incr(keys::RUN_ABORT)?;
                return Err(TrainError::Fatal(format!("bundle from {worker}: {msg}")));
            }
            Err(e) => {
                eprintln!("primary: discarding bundle from {worker}: {e}");
                self.model.zero_grads();
                false
            }
        };
        self.client.del(key)?;
        self.recorder.record(Phase::ReadGradientsAndUpdate, t0.elapsed());
        if applied {
            let t1 = Instant::now();
            self.version = publish_weights(&mut self.client, &self.model)?;
            self.client.incr(&keys::signal(&worker))?;
            self.recorder.record(Phase::PushGlobalWeights, t1.elapsed());
        } else {
            self.client.incr(&keys::signal(&worker))?;
        }
        Ok(())
    }

    /// Blocks until at least one bundle is waiting. `None` once every worker
    /// has finished and nothing is left to apply.
    pub fn poll(&mut self) -> Result<Option<Vec<String>>> {
        let t0 = Instant::now();
        let deadline = t0 + self.config.timeout;
        loop {
            if aborted(&mut self.client)? {
                return Err(TrainError::Aborted);
            }
            let pending = self.client.keys("grad/")?;
            if !pending.is_empty() {
                self.recorder.record(Phase::PollForGradients, t0.elapsed());
                return Ok(Some(pending));
            }
            if self.client.counter(keys::PSV_WORKERS_DONE)? >= self.config.workers as u64 {
                return Ok(None);
            }
            self.evaluate_completed_epochs()?;
            if Instant::now() >= deadline {
                return Err(TrainError::Timeout("no gradients arrived".into()));
            }
            if let Some(v) = self.client.wait_for(keys::PSV_PUSHED, self.pushed_seen + 1, self.config.poll)? {
                self.pushed_seen = v;
            }
        }
    }

    fn evaluate_epoch(&mut self, epoch: u32) -> Result<()> {
        if self.val_keys.is_empty() {
            return Ok(());
        }
        let report = evaluate(
            &self.model,
            &mut self.client,
            &self.val_keys,
            self.config.threshold,
            &self.config.loss,
        )?;
        let row = metric_row(&self.run_id, epoch as usize, f64::NAN, &report);
        if let Some(dir) = &self.run_dir {
            append_metric(dir, &row)?;
            fs::write(checkpoint_path(dir, epoch), self.model.to_checkpoint_bytes())?;
        }
        self.metrics.push(row);
        Ok(())
    }

    /// Scores the global model once per epoch the scheduler has completed.
    /// The last epoch is scored after every worker has finished.
    fn evaluate_completed_epochs(&mut self) -> Result<()> {
        let complete = self.client.counter(keys::EPOCH_COMPLETE)?.min(self.config.epochs as u64 - 1) as u32;
        while self.evaluated_epochs < complete {
            self.evaluated_epochs += 1;
            self.evaluate_epoch(self.evaluated_epochs)?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        let result = self.run_inner();
        if let Some(dir) = &self.run_dir {
            self.recorder.flush(dir)?;
            self.write_staleness(dir)?;
        }
        if result.is_err() {
            let _ = self.client.incr(keys::RUN_ABORT);
        }
        result
    }

    fn run_inner(&mut self) -> Result<()> {
        while let Some(pending) = self.poll()? {
            for key in pending {
                self.apply(&key)?;
            }
            self.evaluate_completed_epochs()?;
        }
        self.evaluate_completed_epochs()?;
        while self.evaluated_epochs < self.config.epochs {
            self.evaluated_epochs += 1;
            self.evaluate_epoch(self.evaluated_epochs)?;
        }
        self.client.incr(keys::RUN_FINISHED)?;
        Ok(())
    }

    fn write_staleness(&self, dir: &Path) -> Result<()> {
        let mut f = fs::File::create(dir.join(STALENESS_FILE))?;
        writeln!(f, "worker,computed_against,applied_to,staleness")?;
        for r in &self.staleness {
            writeln!(f, "{},{},{},{}", r.worker, r.computed_against, r.applied_to, r.staleness())?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct WorkerSummary {
    pub tasks: u64,
    pub bundles: u64,
    pub local_saves: u64,
}

pub struct Worker {
    client: Client,
    id: String,
    config: PsvConfig,
    recorder: Recorder,
    run_dir: Option<PathBuf>,
    last_version: u64,
    epochs_seen: u64,
    epoch_mark: Instant,
    summary: WorkerSummary,
    /// Stop after this many tasks (simulates a crash in tests).
    task_limit: Option<u64>,
    crashed: bool,
}

impl Worker {
    pub fn new(mut client: Client, id: &str, config: PsvConfig, run_dir: Option<&Path>, run_id: &str) -> Result<Worker> {
        config.validate()?;
        register_worker(&mut client, id)?;
        let epochs_seen = client.counter(keys::EPOCH_COMPLETE)?;
        Ok(Worker {
            client,
            id: id.to_string(),
            config,
            recorder: Recorder::new(run_id, id),
            run_dir: run_dir.map(Path::to_path_buf),
            last_version: 0,
            epochs_seen,
            epoch_mark: Instant::now(),
            summary: WorkerSummary::default(),
            task_limit: None,
            crashed: false,
        })
    }

    /// The worker stops abruptly after `n` tasks, leaving any partial
    /// accumulation unpushed, like a killed process.
    pub fn crash_after(mut self, n: u64) -> Self {
        self.task_limit = Some(n);
        self
    }

    pub fn recorder(&self) -> &Recorder {
        &self.recorder
    }

    fn read_global(&mut self) -> Result<ModelState> {
        let t0 = Instant::now();
        wait_counter(&mut self.client, keys::WEIGHTS_VERSION, 1, self.config.timeout)?;
        let (bytes, _) = self
            .client
            .get(keys::WEIGHTS_GLOBAL)?
            .ok_or_else(|| TrainError::Protocol("global weights missing".into()))?;
        let (version, model) = decode_weights(&bytes)?;
        if version < self.last_version {
            return Err(TrainError::Protocol(format!(
                "global weights went from version {} back to {version}",
                self.last_version
            )));
        }
        self.last_version = version;
        self.recorder.record(Phase::ReadGlobalModel, t0.elapsed());
        Ok(model)
    }

    /// Saves the local model once per epoch the scheduler reports complete.
    fn check_epoch(&mut self, model: &ModelState) -> Result<()> {
        let complete = self.client.counter(keys::EPOCH_COMPLETE)?;
        if complete <= self.epochs_seen {
            return Ok(());
        }
        self.recorder.record(Phase::EpochCompletion, self.epoch_mark.elapsed());
        self.epoch_mark = Instant::now();
        self.epochs_seen = complete;
        let t0 = Instant::now();
        let bytes = model.to_checkpoint_bytes();
        if let Some(dir) = &self.run_dir {
            let dir = dir.join("checkpoints").join(&self.id);
            fs::create_dir_all(&dir)?;
            fs::write(dir.join(format!("epoch_{complete}.ckpt")), &bytes)?;
        }
        self.recorder.record(Phase::SaveLocalModel, t0.elapsed());
        self.summary.local_saves += 1;
        Ok(())
    }

    /// Blocks while an earlier bundle of ours is still unread.
    fn wait_grad_slot(&mut self) -> Result<()> {
        let key = keys::grad(&self.id);
        let sig = keys::signal(&self.id);
        let deadline = Instant::now() + self.config.timeout;
        while self.client.exists(&key)? {
            if Instant::now() >= deadline {
                return Err(TrainError::Timeout(format!("{key} was never consumed")));
            }
            let seen = self.client.counter(&sig)?;
            self.client.wait_for(&sig, seen + 1, WAIT_SLICE)?;
            if aborted(&mut self.client)? {
                return Err(TrainError::Aborted);
            }
        }
        Ok(())
    }

    /// One read / accumulate / push cycle. Returns false once the scheduler
    /// has nothing left to hand out.
    pub fn round(&mut self) -> Result<bool> {
        let mut model = self.read_global()?;
        let version = self.last_version;
        model.zero_grads();
        let mut count = 0u32;
        let mut done = false;
        for _ in 0..self.config.accumulation {
            if self.task_limit.is_some_and(|n| self.summary.tasks >= n) {
                self.crashed = true;
                return Ok(false);
            }
            let t0 = Instant::now();
            let mut req = request_task(&mut self.client, &self.id)?;
            let t1 = self.recorder.lap(Phase::RequestTask, t0);
            let task = wait_for_task(&mut self.client, &mut req, self.config.timeout)?;
            let t2 = self.recorder.lap(Phase::WaitForTask, t1);
            if task.is_done() {
                done = true;
                break;
            }
            self.summary.tasks += 1;
            let aug = self.config.augment.then_some((self.config.seed, task.epoch as u64));
            let (images, masks) = fetch_batch(&mut self.client, &task.keys, aug)?;
            let (loss, grads) = batch_loss_and_grads(&model, &images, &masks, &self.config.loss)?;
            if !loss.is_finite() {
                return Err(TrainError::State(format!("{}: loss diverged", self.id)));
            }
            model.accumulate_grads(&grads)?;
            count += 1;
            self.recorder.lap(Phase::BuildAndProcessInput, t2);
            self.check_epoch(&model)?;
        }
        if count > 0 {
            let t0 = Instant::now();
            let bundle = GradientBundle::from_model(&model, &self.id, version, count)?;
            self.wait_grad_slot()?;
            let sig = keys::signal(&self.id);
            let seen = self.client.counter(&sig)?;
            self.client.set(&keys::grad(&self.id), &bundle.encode())?;
            self.client.incr(keys::PSV_PUSHED)?;
            self.summary.bundles += 1;
            let t1 = self.recorder.lap(Phase::PushGradients, t0);
            wait_counter(&mut self.client, &sig, seen + 1, self.config.timeout)?;
            self.recorder.lap(Phase::WaitForGlobalUpdates, t1);
        }
        self.check_epoch(&model)?;
        Ok(!done)
    }

    pub fn run(&mut self) -> Result<WorkerSummary> {
        let result = (|| {
            while self.round()? {}
            Ok(())
        })();
        if let Some(dir) = &self.run_dir {
            self.recorder.flush(dir)?;
        }
        match result {
            Ok(()) => {
                if !self.crashed {
                    self.client.incr(keys::PSV_WORKERS_DONE)?;
                }
                Ok(self.summary.clone())
            }
            Err(e) => {
                let _ = self.client.incr(keys::RUN_ABORT);
                Err(e)
            }
        }
    }
}
