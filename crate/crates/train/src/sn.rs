//! Single-node data-parallel trainer.
//!
//! Each batch is split into W contiguous shards that run forward/backward
//! on scoped threads against the same weights. Shard gradients are combined
//! in shard order, weighted by shard size, and one SGD step follows. Data
//! order uses the scheduler's permutation discipline so SN and PSv runs see
//! the same sequence.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Instant;

use shipnet_core::codec::{encode_named, put_u32, put_u64, Reader};
use shipnet_core::loss::{mean_focal_dice_loss, FocalDiceParams};
use shipnet_core::metrics::{MetricRow, DEFAULT_THRESHOLD};
use shipnet_core::optim::{sgd_step, CyclicSchedule, SgdConfig};
use shipnet_core::telemetry::{Phase, Recorder};
use shipnet_core::unet::ModelState;
use shipnet_core::Tensor;

use crate::dataset::{fetch_batch, ChipSource};
use crate::error::{Result, TrainError};
use crate::eval::{evaluate, EvalReport};
use crate::scheduler::permutation;

pub const SN_ENTITY: &str = "SN";
pub const METRICS_FILE: &str = "metrics.csv";
const SN_MAGIC: &[u8; 4] = b"SNCK";
const SN_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SnConfig {
    pub shard_count: usize,
    pub batch_size: usize,
    pub epochs: u32,
    pub optimizer: SgdConfig,
    pub loss: FocalDiceParams,
    /// Drives data order and augmentation.
    pub seed: u64,
    pub augment: bool,
    pub threshold: f32,
}

impl SnConfig {
    /// Desk defaults for a dataset of `dataset_size` chips: 4 shards, batch
    /// 16, 30 epochs, cyclic LR 1e-3..3e-3 with a half cycle of two epochs.
    pub fn desk(dataset_size: usize) -> Self {
        let batch_size = 16;
        let per_epoch = dataset_size.div_ceil(batch_size).max(1) as u64;
        SnConfig {
            shard_count: 4,
            batch_size,
            epochs: 30,
            optimizer: SgdConfig {
                learning_rate: 1e-3,
                momentum: 0.9,
                weight_decay: 1e-5,
                cyclic: Some(CyclicSchedule {
                    base_lr: 1e-3,
                    max_lr: 3e-3,
                    step_size: 2 * per_epoch,
                }),
            },
            loss: FocalDiceParams::default(),
            seed: 7,
            augment: true,
            threshold: DEFAULT_THRESHOLD,
        }
    }

    /// The full-scale optimizer: lr 1e-2, cyclic 1e-2..1e-1. At desk scale
    /// (512 chips, small U-Net) even 1e-3..1e-2 collapses to all-background
    /// in the second epoch, so `desk` stays at 1e-3..3e-3.
    pub fn full_scale(dataset_size: usize) -> Self {
        let mut cfg = Self::desk(dataset_size);
        cfg.optimizer.learning_rate = 1e-2;
        if let Some(c) = &mut cfg.optimizer.cyclic {
            c.base_lr = 1e-2;
            c.max_lr = 1e-1;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.shard_count == 0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(TrainError::Config("shard_count, batch_size and epochs must be >= 1".into()));
        }
        if self.batch_size % self.shard_count != 0 {
            return Err(TrainError::Config(format!(
                "batch_size {} is not divisible by shard_count {}",
                self.batch_size, self.shard_count
            )));
        }
        self.optimizer.validate()?;
        self.loss.validate()?;
        Ok(())
    }
}

/// Mean per-chip loss over the batch and its parameter gradients.
pub fn batch_loss_and_grads(
    model: &ModelState,
    images: &Tensor,
    masks: &Tensor,
    loss: &FocalDiceParams,
) -> Result<(f32, Vec<Tensor>)> {
    let pass = model.forward(images)?;
    let (l, upstream) = mean_focal_dice_loss(pass.output(), masks, loss)?;
    Ok((l, pass.param_grads(&upstream)?))
}

/// Splits the batch into `shards` contiguous parts, runs them in parallel
/// and returns the size-weighted mean loss and gradient. With equal shards
/// this equals the whole-batch gradient of the mean loss.
pub fn sharded_gradients(
    model: &ModelState,
    images: &Tensor,
    masks: &Tensor,
    shards: usize,
    loss: &FocalDiceParams,
) -> Result<(f32, Vec<Tensor>)> {
    let n = images.dims4()?[0];
    if n == 0 || shards == 0 {
        return Err(TrainError::State("empty batch or zero shards".into()));
    }
    let shards = shards.min(n);
    let bounds: Vec<(usize, usize)> = (0..shards).map(|s| (s * n / shards, (s + 1) * n / shards)).collect();
    let results: Vec<Result<(f32, Vec<Tensor>)>> = thread::scope(|scope| {
        let work = |&(a, b): &(usize, usize)| -> Result<(f32, Vec<Tensor>)> {
            batch_loss_and_grads(model, &images.slice_batch(a, b)?, &masks.slice_batch(a, b)?, loss)
        };
        let handles: Vec<_> = bounds[1..].iter().map(|r| scope.spawn(move || work(r))).collect();
        let mut out = vec![work(&bounds[0])];
        out.extend(handles.into_iter().map(|h| h.join().expect("shard thread panicked")));
        out
    });
    let mut total_loss = 0.0f64;
    let mut acc: Option<Vec<Tensor>> = None;
    for ((a, b), r) in bounds.iter().zip(results) {
        let (l, mut grads) = r?;
        let w = (b - a) as f32 / n as f32;
        total_loss += l as f64 * w as f64;
        for g in &mut grads {
            g.scale(w);
        }
        match &mut acc {
            None => acc = Some(grads),
            Some(sum) => {
                for (s, g) in sum.iter_mut().zip(&grads) {
                    s.add_assign(g)?;
                }
            }
        }
    }
    Ok((total_loss as f32, acc.expect("at least one shard")))
}

/// Resumable trainer state as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct SnCheckpoint {
    /// Parameter values and momentum buffers.
    pub model: ModelState,
    pub iteration: u64,
    pub epoch: u32,
    pub cursor: usize,
    pub seed: u64,
    pub batch_size: usize,
}

/// `SNCK | u32 version | u64 seed | u64 batch | u64 iteration | u32 epoch |
/// u64 cursor | UNET checkpoint | u32 count | count × (name, momentum) |
/// u32 crc32`
pub fn save_checkpoint(ck: &SnCheckpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(SN_MAGIC);
    put_u32(&mut out, SN_VERSION);
    put_u64(&mut out, ck.seed);
    put_u64(&mut out, ck.batch_size as u64);
    put_u64(&mut out, ck.iteration);
    put_u32(&mut out, ck.epoch);
    put_u64(&mut out, ck.cursor as u64);
    out.extend_from_slice(&ck.model.to_checkpoint_bytes());
    put_u32(&mut out, ck.model.params.len() as u32);
    for p in &ck.model.params {
        encode_named(&mut out, &p.name, &p.momentum);
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    out
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<SnCheckpoint> {
    let bad = |m: String| TrainError::State(format!("SN checkpoint: {m}"));
    if bytes.len() < 8 || &bytes[..4] != SN_MAGIC {
        return Err(bad("missing SNCK magic".into()));
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body).to_le_bytes() != crc {
        return Err(bad("checksum mismatch".into()));
    }
    let mut r = Reader::new(&body[4..]);
    let version = r.u32()?;
    if version != SN_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let seed = r.u64()?;
    let batch_size = r.u64()? as usize;
    let iteration = r.u64()?;
    let epoch = r.u32()?;
    let cursor = r.u64()? as usize;
    let (mut model, used) = ModelState::from_checkpoint_prefix(&body[4 + r.pos..])?;
    let mut r = Reader::new(&body[4 + r.pos + used..]);
    let count = r.u32()? as usize;
    if count != model.params.len() {
        return Err(bad(format!("{count} momentum buffers for {} parameters", model.params.len())));
    }
    for p in &mut model.params {
        let (name, m) = r.named_tensor()?;
        if name != p.name || m.shape() != p.value.shape() {
            return Err(bad(format!("momentum entry {name} does not match {}", p.name)));
        }
        p.momentum = m;
    }
    if r.remaining() != 0 {
        return Err(bad("trailing bytes".into()));
    }
    Ok(SnCheckpoint {
        model,
        iteration,
        epoch,
        cursor,
        seed,
        batch_size,
    })
}

/// Weights only, as a PSv worker saves them (no optimizer state).
pub fn save_weights_only(model: &ModelState) -> Vec<u8> {
    model.to_checkpoint_bytes()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub loss: f32,
    /// Epoch the step belonged to.
    pub epoch: u32,
    pub epoch_finished: bool,
}

pub struct SnTrainer {
    pub model: ModelState,
    config: SnConfig,
    keys: Vec<String>,
    iteration: u64,
    epoch: u32,
    cursor: usize,
    /// Built lazily at the first batch of an epoch so its cost lands in
    /// that batch's timing record.
    order: Option<Vec<usize>>,
    recorder: Recorder,
    run_id: String,
}

impl SnTrainer {
    pub fn new(model: ModelState, config: SnConfig, keys: Vec<String>, run_id: &str) -> Result<Self> {
        config.validate()?;
        if keys.is_empty() {
            return Err(TrainError::Config("no training keys".into()));
        }
        Ok(SnTrainer {
            model,
            config,
            keys,
            iteration: 0,
            epoch: 0,
            cursor: 0,
            order: None,
            recorder: Recorder::new(run_id, SN_ENTITY),
            run_id: run_id.to_string(),
        })
    }

    pub fn resume(ck: SnCheckpoint, config: SnConfig, keys: Vec<String>, run_id: &str) -> Result<Self> {
        if ck.seed != config.seed || ck.batch_size != config.batch_size {
            return Err(TrainError::State("checkpoint seed or batch size differs from config".into()));
        }
        if ck.cursor > keys.len() {
            return Err(TrainError::State("checkpoint cursor beyond the key set".into()));
        }
        let mut t = SnTrainer::new(ck.model, config, keys, run_id)?;
        t.iteration = ck.iteration;
        t.epoch = ck.epoch;
        t.cursor = ck.cursor;
        Ok(t)
    }

    pub fn checkpoint(&self) -> SnCheckpoint {
        SnCheckpoint {
            model: self.model.clone(),
            iteration: self.iteration,
            epoch: self.epoch,
            cursor: self.cursor,
            seed: self.config.seed,
            batch_size: self.config.batch_size,
        }
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn config(&self) -> &SnConfig {
        &self.config
    }

    pub fn recorder(&self) -> &Recorder {
        &self.recorder
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// One batch, one optimizer step.
    pub fn step(&mut self, source: &mut dyn ChipSource) -> Result<StepInfo> {
        if self.is_done() {
            return Err(TrainError::State("training already finished".into()));
        }
        let t0 = Instant::now();
        let order = self
            .order
            .get_or_insert_with(|| permutation(self.keys.len(), self.config.seed, self.epoch));
        let end = (self.cursor + self.config.batch_size).min(order.len());
        let batch: Vec<String> = order[self.cursor..end].iter().map(|&i| self.keys[i].clone()).collect();
        let aug = self.config.augment.then_some((self.config.seed, self.epoch as u64));
        let (images, masks) = fetch_batch(source, &batch, aug)?;
        let (loss, grads) = sharded_gradients(&self.model, &images, &masks, self.config.shard_count, &self.config.loss)?;
        if !loss.is_finite() {
            return Err(TrainError::State(format!("loss diverged at iteration {}", self.iteration)));
        }
        self.model.zero_grads();
        self.model.accumulate_grads(&grads)?;
        sgd_step(&mut self.model.params, &self.config.optimizer, self.iteration)?;
        self.iteration += 1;
        self.cursor = end;
        let epoch = self.epoch;
        let epoch_finished = self.cursor == self.keys.len();
        if epoch_finished {
            self.epoch += 1;
            self.cursor = 0;
            self.order = None;
        }
        self.recorder.record(Phase::SnBatch, t0.elapsed());
        Ok(StepInfo {
            loss,
            epoch,
            epoch_finished,
        })
    }

    /// Trains the remaining epochs. After each one: checkpoint
    /// `checkpoints/epoch_<n>.ckpt`, validation row in `metrics.csv`, timings
    /// flushed to the SN timing file.
    pub fn run(&mut self, source: &mut dyn ChipSource, val_keys: &[String], run_dir: &Path) -> Result<Vec<MetricRow>> {
        fs::create_dir_all(run_dir.join("checkpoints"))?;
        let mut rows = Vec::new();
        while !self.is_done() {
            let t_epoch = Instant::now();
            let (mut loss_sum, mut batches) = (0.0f64, 0usize);
            loop {
                let info = self.step(source)?;
                loss_sum += info.loss as f64;
                batches += 1;
                if info.epoch_finished {
                    break;
                }
            }
            self.recorder.record(Phase::SnEpoch, t_epoch.elapsed());
            let t_save = Instant::now();
            let path = checkpoint_path(run_dir, self.epoch);
            fs::write(&path, save_checkpoint(&self.checkpoint()))?;
            self.recorder.record(Phase::SnSaveModel, t_save.elapsed());
            let report = evaluate(&self.model, source, val_keys, self.config.threshold, &self.config.loss)?;
            let row = metric_row(&self.run_id, self.epoch as usize, loss_sum / batches as f64, &report);
            append_metric(run_dir, &row)?;
            self.recorder.flush(run_dir)?;
            rows.push(row);
        }
        Ok(rows)
    }
}

pub fn checkpoint_path(run_dir: &Path, epoch: u32) -> PathBuf {
    run_dir.join("checkpoints").join(format!("epoch_{epoch}.ckpt"))
}

pub fn metric_row(run_id: &str, epoch: usize, train_loss: f64, r: &EvalReport) -> MetricRow {
    MetricRow {
        run_id: run_id.to_string(),
        epoch,
        train_loss,
        loss: r.loss,
        iou: r.iou,
        mean_chip_iou: r.mean_chip_iou,
        tpr: r.summary.tpr,
        tnr: r.summary.tnr,
        balanced_accuracy: r.summary.balanced_accuracy,
    }
}

/// Appends one row, writing the header first when the file is new.
pub fn append_metric(run_dir: &Path, row: &MetricRow) -> Result<()> {
    let path = run_dir.join(METRICS_FILE);
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(&path)?;
    if fresh {
        writeln!(f, "{}", MetricRow::HEADER)?;
    }
    writeln!(f, "{}", row.to_csv())?;
    Ok(())
}
