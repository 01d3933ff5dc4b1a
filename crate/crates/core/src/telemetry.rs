//! Phase timing capture, per-entity summaries and the plain-text report.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use crate::cost::{estimate_cost, format_hms, Architecture, CostModel};
use crate::error::{Error, Result};

pub const TIMINGS_FILE: &str = "timings.csv";
pub const COMPLETION_FILE: &str = "completion.csv";
pub const TIMINGS_HEADER: &str = "run_id,entity,phase,duration_s,timestamp_ms";
pub const COMPLETION_HEADER: &str = "run_id,architecture,wall_time_s";

/// Closed enumeration of measured phases.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    SnBatch,
    SnEpoch,
    SnSaveModel,
    ReadGlobalModel,
    RequestTask,
    WaitForTask,
    SchedulerProcessRequest,
    SchedulerShuffle,
    BuildAndProcessInput,
    PushGradients,
    WaitForGlobalUpdates,
    PollForGradients,
    ReadGradientsAndUpdate,
    EpochCompletion,
    PushGlobalWeights,
    SaveLocalModel,
}

impl Phase {
    pub const SN: [Phase; 3] = [Phase::SnBatch, Phase::SnEpoch, Phase::SnSaveModel];

    pub const PSV: [Phase; 13] = [
        Phase::ReadGlobalModel,
        Phase::RequestTask,
        Phase::WaitForTask,
        Phase::SchedulerProcessRequest,
        Phase::SchedulerShuffle,
        Phase::BuildAndProcessInput,
        Phase::PushGradients,
        Phase::WaitForGlobalUpdates,
        Phase::PollForGradients,
        Phase::ReadGradientsAndUpdate,
        Phase::EpochCompletion,
        Phase::PushGlobalWeights,
        Phase::SaveLocalModel,
    ];

    pub fn all() -> impl Iterator<Item = Phase> {
        Self::SN.into_iter().chain(Self::PSV)
    }

    pub fn slug(&self) -> &'static str {
        match self {
            Phase::SnBatch => "sn_batch",
            Phase::SnEpoch => "sn_epoch",
            Phase::SnSaveModel => "sn_save_model",
            Phase::ReadGlobalModel => "read_global_model",
            Phase::RequestTask => "request_task",
            Phase::WaitForTask => "wait_for_task",
            Phase::SchedulerProcessRequest => "scheduler_process_request",
            Phase::SchedulerShuffle => "scheduler_shuffle",
            Phase::BuildAndProcessInput => "build_and_process_input",
            Phase::PushGradients => "push_gradients",
            Phase::WaitForGlobalUpdates => "wait_for_global_updates",
            Phase::PollForGradients => "poll_for_gradients",
            Phase::ReadGradientsAndUpdate => "read_gradients_and_update",
            Phase::EpochCompletion => "epoch_completion",
            Phase::PushGlobalWeights => "push_global_weights",
            Phase::SaveLocalModel => "save_local_model",
        }
    }

    pub fn title(&self) -> &'static str {
        match self {
            Phase::SnBatch => "Time Taken to Prepare and Train a Single Batch",
            Phase::SnEpoch => "Time Taken to Train a Single Epoch",
            Phase::SnSaveModel => "Time Taken to Save Model",
            Phase::ReadGlobalModel => "Time Taken to read Global Model",
            Phase::RequestTask => "Time Taken to Request Task",
            Phase::WaitForTask => "Time Taken to Wait for Task",
            Phase::SchedulerProcessRequest => "Time Taken for Scheduler to Process Request",
            Phase::SchedulerShuffle => "Time Taken for Scheduler to Shuffle Epoch Keys",
            Phase::BuildAndProcessInput => "Time Taken to Build and Process Input",
            Phase::PushGradients => "Time Taken to Push Gradients From Worker",
            Phase::WaitForGlobalUpdates => "Time Taken to Wait for Global Weight Updates",
            Phase::PollForGradients => "Time Taken for Primary to Poll for Gradients",
            Phase::ReadGradientsAndUpdate => "Time Taken to Read Gradients and Update Global Model",
            Phase::EpochCompletion => "Time Taken Per Epoch Completion",
            Phase::PushGlobalWeights => "Time Taken to Push Updated Global Weights to Data Server",
            Phase::SaveLocalModel => "Time Taken to Save Local Model",
        }
    }

    pub fn is_sn(&self) -> bool {
        Self::SN.contains(self)
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Phase::all()
            .find(|p| p.slug() == s)
            .ok_or_else(|| Error::Decode(format!("unknown phase '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimingRecord {
    pub run_id: String,
    pub entity: String,
    pub phase: Phase,
    pub duration_s: f64,
    pub timestamp_ms: u64,
}

impl TimingRecord {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{:.9},{}",
            self.run_id,
            self.entity,
            self.phase.slug(),
            self.duration_s,
            self.timestamp_ms
        )
    }

    pub fn parse_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        let bad = |what: &str| Error::Decode(format!("timing row '{line}': {what}"));
        if f.len() != 5 {
            return Err(bad("expected 5 fields"));
        }
        let duration_s: f64 = f[3].parse().map_err(|_| bad("duration"))?;
        if !(duration_s >= 0.0) {
            return Err(bad("negative duration"));
        }
        Ok(TimingRecord {
            run_id: f[0].to_string(),
            entity: f[1].to_string(),
            phase: f[2].parse()?,
            duration_s,
            timestamp_ms: f[4].parse().map_err(|_| bad("timestamp"))?,
        })
    }
}

pub fn worker_entity(worker: usize) -> String {
    format!("Worker_{:03}", worker + 1)
}

pub fn wall_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Buffers one entity's records in memory until flushed.
#[derive(Clone, Debug)]
pub struct Recorder {
    run_id: String,
    entity: String,
    records: Vec<TimingRecord>,
}

impl Recorder {
    pub fn new(run_id: impl Into<String>, entity: impl Into<String>) -> Self {
        Recorder {
            run_id: run_id.into(),
            entity: entity.into(),
            records: Vec::new(),
        }
    }

    pub fn entity(&self) -> &str {
        &self.entity
    }

    pub fn record(&mut self, phase: Phase, elapsed: Duration) {
        self.records.push(TimingRecord {
            run_id: self.run_id.clone(),
            entity: self.entity.clone(),
            phase,
            duration_s: elapsed.as_secs_f64(),
            timestamp_ms: wall_ms(),
        });
    }

    /// Records the time since `start` and returns a fresh start point.
    pub fn lap(&mut self, phase: Phase, start: Instant) -> Instant {
        let now = Instant::now();
        self.record(phase, now - start);
        now
    }

    pub fn time<T>(&mut self, phase: Phase, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.record(phase, start.elapsed());
        out
    }

    pub fn records(&self) -> &[TimingRecord] {
        &self.records
    }

    pub fn take_records(&mut self) -> Vec<TimingRecord> {
        std::mem::take(&mut self.records)
    }

    /// This entity's own file inside a run directory.
    pub fn file_path(&self, run_dir: &Path) -> PathBuf {
        run_dir.join(format!("timings.{}.csv", self.entity))
    }

    /// Writes the buffered records to the entity's own file (replacing it).
    pub fn flush(&self, run_dir: &Path) -> Result<PathBuf> {
        let path = self.file_path(run_dir);
        write_timings(&path, &self.records)?;
        Ok(path)
    }
}

pub fn write_timings(path: &Path, records: &[TimingRecord]) -> Result<()> {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(TIMINGS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    let tmp = path.with_extension("csv.tmp");
    fs::File::create(&tmp)?.write_all(out.as_bytes())?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn read_timings(path: &Path) -> Result<Vec<TimingRecord>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == TIMINGS_HEADER => {}
        _ => return Err(Error::Decode(format!("{} lacks the timings header", path.display()))),
    }
    lines.filter(|l| !l.trim().is_empty()).map(TimingRecord::parse_csv).collect()
}

/// Concatenates every per-entity `timings.<entity>.csv` into `timings.csv`.
pub fn merge_timings(run_dir: &Path) -> Result<usize> {
    let mut parts: Vec<PathBuf> = fs::read_dir(run_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.starts_with("timings.") && name.ends_with(".csv") && name != TIMINGS_FILE
        })
        .collect();
    parts.sort();
    let mut all = Vec::new();
    for p in parts {
        all.extend(read_timings(&p)?);
    }
    write_timings(&run_dir.join(TIMINGS_FILE), &all)?;
    Ok(all.len())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Completion {
    pub run_id: String,
    pub architecture: Architecture,
    pub wall_time_s: f64,
}

pub fn write_completion(run_dir: &Path, c: &Completion) -> Result<()> {
    fs::write(
        run_dir.join(COMPLETION_FILE),
        format!("{COMPLETION_HEADER}\n{},{},{:.6}\n", c.run_id, c.architecture, c.wall_time_s),
    )?;
    Ok(())
}

pub fn read_completion(run_dir: &Path) -> Result<Option<Completion>> {
    let path = run_dir.join(COMPLETION_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path)?;
    let row = text
        .lines()
        .nth(1)
        .ok_or_else(|| Error::Decode(format!("{} has no data row", path.display())))?;
    let f: Vec<&str> = row.split(',').collect();
    if f.len() != 3 {
        return Err(Error::Decode(format!("completion row '{row}'")));
    }
    Ok(Some(Completion {
        run_id: f[0].to_string(),
        architecture: f[1].parse()?,
        wall_time_s: f[2]
            .parse()
            .map_err(|_| Error::Decode(format!("completion wall time '{}'", f[2])))?,
    }))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SummaryRow {
    pub count: u64,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
    /// Sample variance (divisor n - 1), 0 for a single record.
    pub variance: f64,
}

/// Single-pass (Welford) summary; `None` for an empty selection.
pub fn summarize(durations: impl IntoIterator<Item = f64>) -> Option<SummaryRow> {
    let mut n = 0u64;
    let (mut mean, mut m2) = (0.0f64, 0.0f64);
    let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
    for x in durations {
        n += 1;
        let delta = x - mean;
        mean += delta / n as f64;
        m2 += delta * (x - mean);
        min = min.min(x);
        max = max.max(x);
    }
    (n > 0).then(|| SummaryRow {
        count: n,
        min,
        // Rounding can push the running mean a hair outside [min, max].
        mean: mean.clamp(min, max),
        max,
        variance: if n > 1 { m2 / (n - 1) as f64 } else { 0.0 },
    })
}

#[derive(Clone, Debug)]
pub struct PhaseTable {
    pub phase: Phase,
    /// Sorted by entity name.
    pub rows: Vec<(String, SummaryRow)>,
}

#[derive(Clone, Debug)]
pub struct Report {
    pub tables: Vec<PhaseTable>,
    pub missing: Vec<Phase>,
    pub completion: Option<Completion>,
    pub promo_cost: Option<f64>,
    pub full_cost: Option<f64>,
    pub text: String,
}

pub fn build_tables(records: &[TimingRecord]) -> Vec<PhaseTable> {
    let mut grouped: BTreeMap<Phase, BTreeMap<&str, Vec<f64>>> = BTreeMap::new();
    for r in records {
        grouped
            .entry(r.phase)
            .or_default()
            .entry(r.entity.as_str())
            .or_default()
            .push(r.duration_s);
    }
    Phase::all()
        .filter_map(|phase| {
            let by_entity = grouped.get(&phase)?;
            let rows = by_entity
                .iter()
                .filter_map(|(e, d)| Some((e.to_string(), summarize(d.iter().copied())?)))
                .collect();
            Some(PhaseTable { phase, rows })
        })
        .collect()
}

fn render_table(out: &mut String, title: &str, header: &[&str], rows: &[Vec<String>]) {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |out: &mut String, cells: &[String]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    let _ = writeln!(out, "{title}");
    line(out, &header.iter().map(|h| h.to_string()).collect::<Vec<_>>());
    let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    for r in rows {
        line(out, r);
    }
}

/// Renders every phase table plus the completion-time and cost table.
pub fn render_report(records: &[TimingRecord], completion: Option<Completion>) -> Result<Report> {
    let tables = build_tables(records);
    let present: BTreeSet<Phase> = tables.iter().map(|t| t.phase).collect();
    let missing: Vec<Phase> = Phase::all().filter(|p| !present.contains(p)).collect();

    let mut blocks = Vec::new();
    for t in &tables {
        let rows: Vec<Vec<String>> = t
            .rows
            .iter()
            .map(|(e, s)| {
                vec![
                    e.clone(),
                    format!("{:.6}", s.min),
                    format!("{:.6}", s.mean),
                    format!("{:.6}", s.max),
                    format!("{:.6}", s.variance),
                ]
            })
            .collect();
        let mut b = String::new();
        render_table(
            &mut b,
            &format!("{} (seconds)", t.phase.title()),
            &["Entity", "Min", "Mean", "Max", "Variance"],
            &rows,
        );
        blocks.push(b);
    }

    let (mut promo_cost, mut full_cost) = (None, None);
    let mut b = String::new();
    match &completion {
        Some(c) => {
            let promo = estimate_cost(c.wall_time_s, c.architecture, &CostModel::PROMO)?;
            let full = estimate_cost(c.wall_time_s, c.architecture, &CostModel::FULL)?;
            promo_cost = Some(promo);
            full_cost = Some(full);
            render_table(
                &mut b,
                "Training System Completion Time and Cost",
                &["Approach", "System Time", "Promo Cost", "Full Cost"],
                &[vec![
                    c.architecture.to_string(),
                    format_hms(c.wall_time_s),
                    format!("${promo:.2}"),
                    format!("${full:.2}"),
                ]],
            );
        }
        None => {
            let _ = writeln!(b, "Training System Completion Time and Cost");
            let _ = writeln!(b, "warning: no {COMPLETION_FILE}; completion time and cost unavailable");
        }
    }
    blocks.push(b);

    if !missing.is_empty() {
        let names: Vec<&str> = missing.iter().map(|p| p.slug()).collect();
        blocks.push(format!("coverage warning: no records for {} phase(s): {}\n", missing.len(), names.join(", ")));
    }

    Ok(Report {
        tables,
        missing,
        completion,
        promo_cost,
        full_cost,
        text: blocks.join("\n"),
    })
}

/// Reads `timings.csv` (and `completion.csv` when present) from a run directory.
pub fn emit_tables(run_dir: &Path) -> Result<Report> {
    let path = run_dir.join(TIMINGS_FILE);
    if !path.exists() {
        return Err(Error::State(format!("{} not found", path.display())));
    }
    let records = read_timings(&path)?;
    render_report(&records, read_completion(run_dir)?)
}
