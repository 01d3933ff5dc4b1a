//! Request/deliver allocation of chip-key batches.
//!
//! Workers never talk to the scheduler directly. A worker takes a ticket
//! from `task/ticket`, writes a request row `task/req/<ticket>/<worker>/<seq>`
//! and bumps `task/pending`. The scheduler answers rows one at a time in
//! ticket order, writes `task/resp/<worker>/<seq>` and bumps
//! `task/signal/<worker>`.
//!
//! Request row body: u32 seq, u64 timestamp_ms. Response body: u32 epoch,
//! u32 key_count, then key_count × (u16 len, key). A response with no keys
//! means every epoch has been handed out.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shipnet_core::codec::{put_str, put_u32, put_u64, Reader};
use shipnet_core::telemetry::{wall_ms, Phase, Recorder};
use shipnet_dataserver::Client;

use crate::error::{Result, TrainError};
use crate::keys;

pub const DEFAULT_POLL: Duration = Duration::from_millis(10);
pub const SCHEDULER_ENTITY: &str = "Scheduler";
const PROGRESS_MAGIC: &[u8; 4] = b"SPRG";
const PROGRESS_VERSION: u32 = 1;

/// Deterministic permutation of `0..n` for one epoch.
pub fn permutation(n: usize, seed: u64, epoch: u32) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut rng);
    p
}

/// Position of the scheduler within the run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProgressState {
    pub epoch: u32,
    /// Index into `permutation`; `0 ≤ cursor ≤ permutation.len()`.
    pub cursor: usize,
    pub permutation: Vec<usize>,
    pub batch_size: usize,
    pub seed: u64,
}

impl ProgressState {
    pub fn new(key_count: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        Ok(ProgressState {
            epoch: 0,
            cursor: 0,
            permutation: permutation(key_count, seed, 0),
            batch_size,
            seed,
        })
    }

    pub fn remaining(&self) -> usize {
        self.permutation.len() - self.cursor
    }

    pub fn is_exhausted(&self) -> bool {
        self.cursor == self.permutation.len()
    }

    /// Hands out the next contiguous slice (short only at the end of the
    /// epoch) and moves the cursor past it.
    pub fn advance(&mut self) -> &[usize] {
        let start = self.cursor;
        self.cursor = (start + self.batch_size).min(self.permutation.len());
        &self.permutation[start..self.cursor]
    }
}

/// Starts the next epoch with a fresh permutation seeded by (seed, epoch).
pub fn shuffle_epoch(state: &ProgressState, seed: u64) -> Result<ProgressState> {
    if !state.is_exhausted() {
        return Err(TrainError::State(format!(
            "shuffle requested with {} keys of epoch {} undelivered",
            state.remaining(),
            state.epoch
        )));
    }
    let epoch = state.epoch + 1;
    Ok(ProgressState {
        epoch,
        cursor: 0,
        permutation: permutation(state.permutation.len(), seed, epoch),
        batch_size: state.batch_size,
        seed,
    })
}

/// Identifies the key set a checkpoint was taken against.
pub fn key_fingerprint(keys: &[String]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    for k in keys {
        h.update(k.as_bytes());
        h.update(b"\n");
    }
    h.finalize()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SavedProgress {
    pub state: ProgressState,
    pub epochs: u32,
    pub key_fingerprint: u32,
}

/// `SPRG | u32 version | u64 seed | u32 epoch | u64 cursor | u64 batch |
/// u64 key_count | u32 epochs | u32 key fingerprint | u32 crc32`
pub fn checkpoint_progress(state: &ProgressState, epochs: u32, key_fingerprint: u32) -> Vec<u8> {
    let mut out = Vec::with_capacity(56);
    out.extend_from_slice(PROGRESS_MAGIC);
    put_u32(&mut out, PROGRESS_VERSION);
    put_u64(&mut out, state.seed);
    put_u32(&mut out, state.epoch);
    put_u64(&mut out, state.cursor as u64);
    put_u64(&mut out, state.batch_size as u64);
    put_u64(&mut out, state.permutation.len() as u64);
    put_u32(&mut out, epochs);
    put_u32(&mut out, key_fingerprint);
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    out
}

pub fn restore_progress(blob: &[u8]) -> Result<SavedProgress> {
    let bad = |m: &str| TrainError::State(format!("progress checkpoint: {m}"));
    if blob.len() < 8 || &blob[..4] != PROGRESS_MAGIC {
        return Err(bad("missing magic"));
    }
    let (body, crc) = blob.split_at(blob.len() - 4);
    if crc32fast::hash(body).to_le_bytes() != crc {
        return Err(bad("checksum mismatch"));
    }
    let mut r = Reader::new(&body[4..]);
    let version = r.u32()?;
    if version != PROGRESS_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let seed = r.u64()?;
    let epoch = r.u32()?;
    let cursor = r.u64()? as usize;
    let batch_size = r.u64()? as usize;
    let key_count = r.u64()? as usize;
    let epochs = r.u32()?;
    let key_fingerprint = r.u32()?;
    if r.remaining() != 0 {
        return Err(bad("trailing bytes"));
    }
    if cursor > key_count || batch_size == 0 {
        return Err(bad("cursor or batch size out of range"));
    }
    Ok(SavedProgress {
        state: ProgressState {
            epoch,
            cursor,
            permutation: permutation(key_count, seed, epoch),
            batch_size,
            seed,
        },
        epochs,
        key_fingerprint,
    })
}

/// A batch of keys handed to one worker.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Task {
    pub worker_id: String,
    pub seq: u32,
    pub epoch: u32,
    pub keys: Vec<String>,
}

impl Task {
    /// The run has no more keys to hand out.
    pub fn is_done(&self) -> bool {
        self.keys.is_empty()
    }
}

pub fn encode_task(epoch: u32, task_keys: &[&str]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + task_keys.iter().map(|k| 2 + k.len()).sum::<usize>());
    put_u32(&mut out, epoch);
    put_u32(&mut out, task_keys.len() as u32);
    for k in task_keys {
        put_str(&mut out, k);
    }
    out
}

pub fn decode_task(bytes: &[u8]) -> Result<(u32, Vec<String>)> {
    let mut r = Reader::new(bytes);
    let epoch = r.u32()?;
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        out.push(r.string()?);
    }
    if r.remaining() != 0 {
        return Err(TrainError::Protocol("trailing bytes in task response".into()));
    }
    Ok((epoch, out))
}

fn encode_request(seq: u32, ts_ms: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(12);
    put_u32(&mut out, seq);
    put_u64(&mut out, ts_ms);
    out
}

#[derive(Clone, Debug)]
pub struct SchedulerConfig {
    pub batch_size: usize,
    pub epochs: u32,
    pub seed: u64,
    pub poll: Duration,
    /// How long a missing ticket may hold back later ones before it is
    /// treated as abandoned (its requester died between INCR and SET).
    pub gap_timeout: Duration,
}

impl SchedulerConfig {
    pub fn new(batch_size: usize, epochs: u32, seed: u64) -> Self {
        SchedulerConfig {
            batch_size,
            epochs,
            seed,
            poll: DEFAULT_POLL,
            gap_timeout: Duration::from_secs(2),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(TrainError::Config("scheduler batch_size and epochs must be >= 1".into()));
        }
        Ok(())
    }
}

pub struct Scheduler {
    client: Client,
    keys: Vec<String>,
    fingerprint: u32,
    config: SchedulerConfig,
    state: ProgressState,
    /// Every epoch has been handed out.
    finished: bool,
    /// Latest (seq, response) per worker, for idempotent re-delivery.
    last_served: HashMap<String, (u32, Vec<u8>)>,
    next_ticket: u64,
    gap_since: Option<Instant>,
    pending_seen: u64,
    recorder: Recorder,
}

impl Scheduler {
    /// Resumes from `task/progress` when present, otherwise starts epoch 0.
    pub fn start(mut client: Client, keys: Vec<String>, config: SchedulerConfig, run_id: &str) -> Result<Scheduler> {
        config.validate()?;
        if keys.is_empty() {
            return Err(TrainError::Config("scheduler has no keys to serve".into()));
        }
        let fingerprint = key_fingerprint(&keys);
        let state = match client.get(keys::TASK_PROGRESS)? {
            Some((blob, _)) => {
                let saved = restore_progress(&blob)?;
                if saved.key_fingerprint != fingerprint || saved.state.permutation.len() != keys.len() {
                    return Err(TrainError::State("progress checkpoint was taken over a different key set".into()));
                }
                if saved.state.batch_size != config.batch_size || saved.state.seed != config.seed {
                    return Err(TrainError::State("progress checkpoint batch size or seed differs from config".into()));
                }
                saved.state
            }
            None => ProgressState::new(keys.len(), config.batch_size, config.seed)?,
        };
        let finished = state.is_exhausted() && state.epoch + 1 >= config.epochs;
        let next_ticket = match client.keys(keys::TASK_REQ_PREFIX)?.first().and_then(|k| keys::parse_task_request(k)) {
            Some((t, _, _)) => t,
            None => client.counter(keys::TASK_TICKET)? + 1,
        };
        let pending_seen = client.counter(keys::TASK_PENDING)?;
        Ok(Scheduler {
            client,
            keys,
            fingerprint,
            config,
            state,
            finished,
            last_served: HashMap::new(),
            next_ticket,
            gap_since: None,
            pending_seen,
            recorder: Recorder::new(run_id, SCHEDULER_ENTITY),
        })
    }

    pub fn state(&self) -> &ProgressState {
        &self.state
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn recorder(&self) -> &Recorder {
        &self.recorder
    }

    /// Answers one request. A repeat of the worker's latest seq gets the
    /// original bytes again; anything else advances the cursor.
    pub fn handle_request(&mut self, worker: &str, seq: u32) -> Result<Vec<u8>> {
        if let Some((last, bytes)) = self.last_served.get(worker) {
            if *last == seq {
                return Ok(bytes.clone());
            }
            if seq < *last {
                return Err(TrainError::Protocol(format!("{worker} re-sent stale seq {seq} (latest {last})")));
            }
        }
        if let Some((bytes, _)) = self.client.get(&keys::task_response(worker, seq))? {
            // Answered before a scheduler restart and not yet collected.
            self.last_served.insert(worker.to_string(), (seq, bytes.clone()));
            return Ok(bytes);
        }
        let mut epoch_done = false;
        let bytes = if self.finished {
            encode_task(self.config.epochs, &[])
        } else {
            let epoch = self.state.epoch;
            let slice = self.state.advance();
            let picked: Vec<&str> = slice.iter().map(|&i| self.keys[i].as_str()).collect();
            let bytes = encode_task(epoch, &picked);
            if self.state.is_exhausted() {
                epoch_done = true;
                if self.state.epoch + 1 < self.config.epochs {
                    let t0 = Instant::now();
                    self.state = shuffle_epoch(&self.state, self.config.seed)?;
                    self.recorder.record(Phase::SchedulerShuffle, t0.elapsed());
                } else {
                    self.finished = true;
                }
            }
            bytes
        };
        self.client.set(
            keys::TASK_PROGRESS,
            &checkpoint_progress(&self.state, self.config.epochs, self.fingerprint),
        )?;
        if epoch_done {
            self.client.incr(keys::EPOCH_COMPLETE)?;
        }
        self.last_served.insert(worker.to_string(), (seq, bytes.clone()));
        Ok(bytes)
    }

    /// Serves every request row that is ready, in ticket order. Returns the
    /// number answered.
    pub fn step(&mut self) -> Result<usize> {
        let rows = self.client.keys(keys::TASK_REQ_PREFIX)?;
        let mut served = 0;
        for row in rows {
            let t0 = Instant::now();
            let Some((ticket, worker, seq)) = keys::parse_task_request(&row) else {
                eprintln!("scheduler: dropping malformed request row {row}");
                self.client.del(&row)?;
                continue;
            };
            if ticket > self.next_ticket {
                let since = *self.gap_since.get_or_insert(t0);
                if since.elapsed() < self.config.gap_timeout {
                    // An earlier ticket is still being written.
                    break;
                }
                eprintln!("scheduler: tickets {}..{ticket} never arrived; skipping", self.next_ticket);
            }
            self.gap_since = None;
            self.next_ticket = ticket + 1;
            let body_ok = match self.client.get(&row)? {
                Some((body, _)) => {
                    let mut r = Reader::new(&body);
                    body.len() == 12 && r.u32()? == seq
                }
                None => false,
            };
            if !body_ok {
                eprintln!("scheduler: request row {row} has a malformed body; dropped");
                self.client.del(&row)?;
                continue;
            }
            match self.handle_request(&worker, seq) {
                Ok(bytes) => {
                    self.client.set(&keys::task_response(&worker, seq), &bytes)?;
                }
                Err(TrainError::Protocol(msg)) => eprintln!("scheduler: {msg}"),
                Err(e) => return Err(e),
            }
            self.client.del(&row)?;
            self.client.incr(&keys::task_signal(&worker))?;
            self.recorder.record(Phase::SchedulerProcessRequest, t0.elapsed());
            served += 1;
        }
        Ok(served)
    }

    /// Serves until `run/finished` or `run/abort` is set.
    pub fn run(&mut self) -> Result<()> {
        loop {
            if self.client.counter(keys::RUN_ABORT)? > 0 {
                return Err(TrainError::Aborted);
            }
            if self.client.counter(keys::RUN_FINISHED)? > 0 {
                return Ok(());
            }
            if self.step()? == 0 {
                if let Some(v) = self.client.wait_for(keys::TASK_PENDING, self.pending_seen + 1, self.config.poll)? {
                    self.pending_seen = v;
                }
            }
        }
    }
}

/// Marks a worker as eligible. Eligibility is stateless: a (re)joining
/// worker simply receives the live cursor slice on its next request.
pub fn register_worker(client: &mut Client, worker: &str) -> Result<()> {
    client.set(&keys::task_worker(worker), &wall_ms().to_le_bytes())?;
    Ok(())
}

/// A request that has been queued but not yet collected.
#[derive(Clone, Debug)]
pub struct PendingRequest {
    pub worker: String,
    pub seq: u32,
    signal_seen: u64,
}

/// Queues a request for the worker's next task.
pub fn request_task(client: &mut Client, worker: &str) -> Result<PendingRequest> {
    let seq = client.incr(&keys::task_seq(worker))? as u32;
    let pending = PendingRequest {
        worker: worker.to_string(),
        seq,
        signal_seen: client.counter(&keys::task_signal(worker))?,
    };
    resend_request(client, &pending)?;
    Ok(pending)
}

/// Queues the same (worker, seq) again, e.g. after a timeout.
pub fn resend_request(client: &mut Client, req: &PendingRequest) -> Result<()> {
    let ticket = client.incr(keys::TASK_TICKET)?;
    client.set(
        &keys::task_request(ticket, &req.worker, req.seq),
        &encode_request(req.seq, wall_ms()),
    )?;
    client.incr(keys::TASK_PENDING)?;
    Ok(())
}

/// Blocks until the scheduler has answered `req`, then collects the answer.
pub fn wait_for_task(client: &mut Client, req: &mut PendingRequest, timeout: Duration) -> Result<Task> {
    let deadline = Instant::now() + timeout;
    let resp_key = keys::task_response(&req.worker, req.seq);
    let sig_key = keys::task_signal(&req.worker);
    loop {
        if let Some((bytes, _)) = client.get(&resp_key)? {
            client.del(&resp_key)?;
            let (epoch, task_keys) = decode_task(&bytes)?;
            return Ok(Task {
                worker_id: req.worker.clone(),
                seq: req.seq,
                epoch,
                keys: task_keys,
            });
        }
        let now = Instant::now();
        if now >= deadline {
            return Err(TrainError::Timeout(format!("no task for {} seq {}", req.worker, req.seq)));
        }
        if client.counter(keys::RUN_ABORT)? > 0 {
            return Err(TrainError::Aborted);
        }
        let slice = (deadline - now).min(Duration::from_millis(200));
        if let Some(v) = client.wait_for(&sig_key, req.signal_seen + 1, slice)? {
            req.signal_seen = v;
        }
    }
}

/// Request and collect in one call.
pub fn fetch_task(client: &mut Client, worker: &str, timeout: Duration) -> Result<Task> {
    let mut req = request_task(client, worker)?;
    wait_for_task(client, &mut req, timeout)
}
