//! Experiment harness: data server lifecycle, chip population, the training
//! roles, and the run directory report.

use std::fs;
use std::io::{BufRead, BufReader};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitStatus, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use shipnet_core::chipgen::ChipSpec;
use shipnet_core::cost::Architecture;
use shipnet_core::metrics::MetricRow;
use shipnet_core::telemetry::{
    emit_tables, merge_timings, worker_entity, write_completion, Completion, COMPLETION_FILE, TIMINGS_FILE,
};
use shipnet_core::unet::{build_unet, ModelState};
use shipnet_dataserver::{serve, Client, ServerConfig, ServerHandle};
use shipnet_train::dataset::{manifest, populate};
use shipnet_train::eval::{evaluate, EvalReport};
use shipnet_train::harness::{connect, run_psv_threads, scheduler_config};
use shipnet_train::keys::{self, TARGET_PREFIX, TRAIN_PREFIX, VAL_PREFIX};
use shipnet_train::psv::{Primary, Worker};
use shipnet_train::scheduler::Scheduler;
use shipnet_train::sn::{checkpoint_path, load_checkpoint, metric_row, SnTrainer, METRICS_FILE};

use crate::config::{Mode, RunConfig, ServerKeys};
use crate::error::{CliError, CliResult};

pub const RUN_CONFIG_FILE: &str = "run.cfg";
pub const REPORT_FILE: &str = "report.txt";
pub const TARGET_FILE: &str = "target.csv";

/// How long surviving roles get to exit after a failure before being killed.
const TEARDOWN_GRACE: Duration = Duration::from_secs(15);
const SUPERVISE_POLL: Duration = Duration::from_millis(50);

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Run every role as a thread of this process.
    pub in_process: bool,
    /// Binary used for child roles; defaults to the running executable.
    pub exe: Option<PathBuf>,
    /// Continue an SN run from this checkpoint.
    pub resume: Option<PathBuf>,
    /// Use this running data server instead of starting one.
    pub data_server: Option<SocketAddr>,
}

impl RunOptions {
    fn exe(&self) -> CliResult<PathBuf> {
        match &self.exe {
            Some(p) => Ok(p.clone()),
            None => Ok(std::env::current_exe()?),
        }
    }
}

/// A data server owned by the orchestrator, either a thread or a child.
pub enum DataServer {
    Thread(ServerHandle),
    Child { child: Child, addr: SocketAddr },
    External(SocketAddr),
}

impl DataServer {
    pub fn start(keys: &ServerKeys, opts: &RunOptions) -> CliResult<DataServer> {
        if let Some(addr) = opts.data_server {
            return Ok(DataServer::External(addr));
        }
        if opts.in_process {
            let handle = serve(
                keys.bind.as_str(),
                ServerConfig {
                    max_clients: keys.max_clients,
                    mem_cap: keys.mem_cap,
                },
            )
            .map_err(|e| CliError::Runtime(format!("cannot bind data server on {}: {e}", keys.bind)))?;
            return Ok(DataServer::Thread(handle));
        }
        let mut child = Command::new(opts.exe()?)
            .args(["serve-data", "--bind", &keys.bind])
            .args(["--mem-cap", &keys.mem_cap.to_string()])
            .args(["--max-clients", &keys.max_clients.to_string()])
            .stdout(Stdio::piped())
            .spawn()?;
        // The child announces its bound address on the first stdout line.
        let mut line = String::new();
        let stdout = child.stdout.take().expect("piped stdout");
        BufReader::new(stdout).read_line(&mut line)?;
        let addr = line
            .trim()
            .strip_prefix("listening on ")
            .and_then(|a| a.parse().ok())
            .ok_or_else(|| {
                let _ = child.kill();
                CliError::Runtime(format!("data server did not report its address (got '{}')", line.trim()))
            })?;
        Ok(DataServer::Child { child, addr })
    }

    pub fn addr(&self) -> SocketAddr {
        match self {
            DataServer::Thread(h) => h.addr(),
            DataServer::Child { addr, .. } | DataServer::External(addr) => *addr,
        }
    }

    pub fn stop(self) {
        drop(self);
    }
}

impl Drop for DataServer {
    fn drop(&mut self) {
        match self {
            DataServer::Thread(h) => h.shutdown(),
            DataServer::Child { child, .. } => {
                let _ = child.kill();
                let _ = child.wait();
            }
            DataServer::External(_) => {}
        }
    }
}

/// The target-style chips share the training geometry but not its scenery.
pub fn target_spec(cfg: &RunConfig) -> ChipSpec {
    let t = ChipSpec::target_style(cfg.data.target_seed);
    ChipSpec {
        cloud_prob: t.cloud_prob,
        land_prob: t.land_prob,
        glint_prob: t.glint_prob,
        noise: t.noise,
        water_tone: t.water_tone,
        seed: t.seed,
        ..cfg.data.spec.clone()
    }
}

#[derive(Clone, Debug, Default)]
pub struct Manifests {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub target: Vec<String>,
}

/// Training chips take indices `0..n`; validation chips continue from `n`
/// so no validation chip repeats a training chip.
pub fn populate_all(client: &mut Client, cfg: &RunConfig) -> CliResult<Manifests> {
    let (n, v) = (cfg.data.train_count, cfg.data.val_count);
    Ok(Manifests {
        train: populate(client, &cfg.data.spec, 0..n, TRAIN_PREFIX)?,
        val: populate(client, &cfg.data.spec, n..n + v, VAL_PREFIX)?,
        target: populate(client, &target_spec(cfg), 0..cfg.data.target_count, TARGET_PREFIX)?,
    })
}

#[derive(Debug)]
pub struct RunOutcome {
    pub wall_time_s: f64,
    pub metrics: Vec<MetricRow>,
    pub target: Option<EvalReport>,
    pub report: String,
}

fn architecture(cfg: &RunConfig) -> Architecture {
    match cfg.mode {
        Mode::Sn => Architecture::SingleNode,
        Mode::Psv => Architecture::ParameterServer {
            workers: cfg.psv.workers,
        },
    }
}

fn prepare_run_dir(run_dir: &Path, resume: bool) -> CliResult<()> {
    if !resume && run_dir.join(METRICS_FILE).exists() {
        return Err(CliError::Config(format!(
            "{} already holds a run; choose an empty output directory",
            run_dir.display()
        )));
    }
    fs::create_dir_all(run_dir.join("checkpoints"))?;
    Ok(())
}

/// Runs one full experiment into `run_dir` and writes its report. On
/// failure the report is still written from whatever the roles flushed.
pub fn orchestrate(cfg: &RunConfig, run_dir: &Path, opts: &RunOptions) -> CliResult<RunOutcome> {
    cfg.validate()?;
    prepare_run_dir(run_dir, opts.resume.is_some())?;
    let cfg_path = run_dir.join(RUN_CONFIG_FILE);
    fs::write(&cfg_path, cfg.to_ini())?;

    let server = DataServer::start(&cfg.server, opts)?;
    let addr = server.addr();
    let mut client = connect(addr)?;
    eprintln!("data server on {addr}; populating chips");
    let manifests = populate_all(&mut client, cfg)?;

    eprintln!("training ({:?}, run {})", cfg.mode, cfg.run_id);
    let t0 = Instant::now();
    let trained = match cfg.mode {
        Mode::Sn => train_sn(cfg, &mut client, &manifests, run_dir, opts),
        Mode::Psv if opts.in_process => train_psv_threads(cfg, addr, &manifests, run_dir),
        Mode::Psv => train_psv_processes(cfg, addr, &cfg_path, run_dir, opts).and_then(|()| {
            let path = checkpoint_path(run_dir, cfg.psv.epochs);
            Ok(ModelState::from_checkpoint_bytes(&fs::read(&path)?)?)
        }),
    };
    let wall_time_s = t0.elapsed().as_secs_f64();

    let finished = trained.and_then(|model| {
        write_completion(
            run_dir,
            &Completion {
                run_id: cfg.run_id.clone(),
                architecture: architecture(cfg),
                wall_time_s,
            },
        )?;
        if manifests.target.is_empty() {
            return Ok(None);
        }
        let r = evaluate(&model, &mut client, &manifests.target, cfg.threshold, &cfg.loss)?;
        let row = metric_row(&cfg.run_id, 0, f64::NAN, &r);
        fs::write(run_dir.join(TARGET_FILE), format!("{}\n{}\n", MetricRow::HEADER, row.to_csv()))?;
        Ok(Some(r))
    });
    drop(client);
    server.stop();

    let report = match render_run_report(run_dir) {
        Ok(text) => text,
        Err(e) => format!("report unavailable: {e}\n"),
    };
    let report = match &finished {
        Ok(_) => report,
        Err(e) => format!("RUN FAILED: {e}\n\n{report}"),
    };
    fs::write(run_dir.join(REPORT_FILE), &report)?;
    let target = finished?;
    Ok(RunOutcome {
        wall_time_s,
        metrics: read_metrics(&run_dir.join(METRICS_FILE))?,
        target,
        report,
    })
}

fn train_sn(
    cfg: &RunConfig,
    client: &mut Client,
    m: &Manifests,
    run_dir: &Path,
    opts: &RunOptions,
) -> CliResult<ModelState> {
    let sn = cfg.sn_config();
    let mut trainer = match &opts.resume {
        Some(path) => SnTrainer::resume(load_checkpoint(&fs::read(path)?)?, sn, m.train.clone(), &cfg.run_id)?,
        None => SnTrainer::new(build_unet(&cfg.model, cfg.seed)?, sn, m.train.clone(), &cfg.run_id)?,
    };
    let result = trainer.run(client, &m.val, run_dir);
    trainer.recorder().flush(run_dir)?;
    result?;
    Ok(trainer.model)
}

fn train_psv_threads(cfg: &RunConfig, addr: SocketAddr, m: &Manifests, run_dir: &Path) -> CliResult<ModelState> {
    let out = run_psv_threads(
        addr,
        build_unet(&cfg.model, cfg.seed)?,
        &cfg.psv_config(),
        m.train.clone(),
        m.val.clone(),
        Some(run_dir),
        &cfg.run_id,
    )?;
    Ok(out.model)
}

/// Launches the scheduler, the primary and every worker as child processes
/// and waits for all of them. The first failure aborts the run through the
/// data server; roles still alive after the grace period are killed.
fn train_psv_processes(
    cfg: &RunConfig,
    addr: SocketAddr,
    cfg_path: &Path,
    run_dir: &Path,
    opts: &RunOptions,
) -> CliResult<()> {
    let exe = opts.exe()?;
    let spawn = |role: &str, extra: &[&str]| -> CliResult<Child> {
        Ok(Command::new(&exe)
            .arg(role)
            .args(extra)
            .args(["--data-server", &addr.to_string()])
            .arg("--config")
            .arg(cfg_path)
            .arg("--out")
            .arg(run_dir)
            .stdout(Stdio::null())
            .spawn()?)
    };
    let mut roles: Vec<(String, Child)> = vec![
        ("Scheduler".into(), spawn("run-scheduler", &[])?),
        ("Primary".into(), spawn("run-primary", &[])?),
    ];
    for i in 0..cfg.psv.workers {
        let id = worker_entity(i);
        roles.push((id.clone(), spawn("run-worker", &["--id", &id])?));
    }
    supervise(roles, addr)
}

fn supervise(mut roles: Vec<(String, Child)>, addr: SocketAddr) -> CliResult<()> {
    let mut exited: Vec<Option<ExitStatus>> = vec![None; roles.len()];
    let mut failure: Option<String> = None;
    let mut deadline: Option<Instant> = None;
    while exited.iter().any(Option::is_none) {
        for (i, (name, child)) in roles.iter_mut().enumerate() {
            if exited[i].is_some() {
                continue;
            }
            if let Some(status) = child.try_wait()? {
                exited[i] = Some(status);
                if !status.success() && failure.is_none() {
                    failure = Some(format!("{name} exited with {status}"));
                    if let Ok(mut c) = connect(addr) {
                        let _ = c.incr(keys::RUN_ABORT);
                    }
                    deadline = Some(Instant::now() + TEARDOWN_GRACE);
                }
            }
        }
        if deadline.is_some_and(|d| Instant::now() >= d) {
            for (i, (_, child)) in roles.iter_mut().enumerate() {
                if exited[i].is_none() {
                    let _ = child.kill();
                    exited[i] = child.wait().ok();
                }
            }
        }
        thread::sleep(SUPERVISE_POLL);
    }
    match failure {
        Some(f) => Err(CliError::Runtime(f)),
        None => Ok(()),
    }
}

pub fn read_metrics(path: &Path) -> CliResult<Vec<MetricRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    fs::read_to_string(path)?
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| MetricRow::parse_csv(l).map_err(CliError::from))
        .collect()
}

fn describe(label: &str, r: &MetricRow) -> String {
    format!(
        "{label}: IoU {:.4}, mean chip IoU {:.4}, TPR {:.4}, TNR {:.4}, balanced accuracy {:.4}\n",
        r.iou, r.mean_chip_iou, r.tpr, r.tnr, r.balanced_accuracy
    )
}

/// Phase tables, the completion/cost table and the final scores of a run
/// directory. Per-entity timing files are merged first when needed.
pub fn render_run_report(run_dir: &Path) -> CliResult<String> {
    let has_parts = fs::read_dir(run_dir)?.filter_map(|e| e.ok()).any(|e| {
        let name = e.file_name().to_string_lossy().into_owned();
        name.starts_with("timings.") && name != TIMINGS_FILE
    });
    if has_parts {
        merge_timings(run_dir)?;
    }
    if !run_dir.join(TIMINGS_FILE).exists() {
        return Err(CliError::Runtime(format!("no timing records in {}", run_dir.display())));
    }
    let mut text = emit_tables(run_dir)?.text;
    if !run_dir.join(COMPLETION_FILE).exists() {
        text.push_str("run did not complete\n");
    }
    if let Some(last) = read_metrics(&run_dir.join(METRICS_FILE))?.last() {
        text.push('\n');
        text.push_str(&describe(&format!("Validation after epoch {}", last.epoch), last));
    }
    if let Some(t) = read_metrics(&run_dir.join(TARGET_FILE))?.first() {
        text.push_str(&describe("Target-style chips", t));
    }
    Ok(text)
}

// Single-role entry points used by the multi-process orchestration.

pub fn run_scheduler(cfg: &RunConfig, addr: SocketAddr, run_dir: Option<&Path>) -> CliResult<()> {
    let mut client = connect(addr)?;
    let keys = manifest(&mut client, TRAIN_PREFIX)?;
    if keys.is_empty() {
        return Err(CliError::Runtime(format!("no chips under '{TRAIN_PREFIX}' on {addr}")));
    }
    let mut sched = Scheduler::start(client, keys, scheduler_config(&cfg.psv_config()), &cfg.run_id)?;
    let result = sched.run();
    if let Some(dir) = run_dir {
        sched.recorder().flush(dir)?;
    }
    Ok(result?)
}

pub fn run_primary(cfg: &RunConfig, addr: SocketAddr, run_dir: Option<&Path>) -> CliResult<()> {
    let mut client = connect(addr)?;
    let val = manifest(&mut client, VAL_PREFIX)?;
    let model = build_unet(&cfg.model, cfg.seed)?;
    let mut primary = Primary::start(client, model, cfg.psv_config(), val, run_dir, &cfg.run_id)?;
    Ok(primary.run()?)
}

pub fn run_worker(cfg: &RunConfig, addr: SocketAddr, id: &str, run_dir: Option<&Path>) -> CliResult<()> {
    let mut worker = Worker::new(connect(addr)?, id, cfg.psv_config(), run_dir, &cfg.run_id)?;
    let sum = worker.run()?;
    eprintln!("{id}: {} tasks, {} bundles", sum.tasks, sum.bundles);
    Ok(())
}
