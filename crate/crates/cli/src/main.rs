use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use shipnet::bench::bench_io;
use shipnet::config::{Mode, RunConfig};
use shipnet::error::{CliError, CliResult};
use shipnet::run::{self, DataServer, RunOptions};
use shipnet_core::chipgen::ChipSpec;
use shipnet_dataserver::{serve, ServerConfig, DEFAULT_MEM_CAP};
use shipnet_train::dataset::{export_files, populate};
use shipnet_train::harness::connect;

#[derive(Parser)]
#[command(name = "shipnet", version, about = "Ship segmentation training on an in-memory tensor data server")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RoleArgs {
    #[arg(long)]
    data_server: SocketAddr,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory for timings, checkpoints and metrics.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Run every role as a thread of this process.
    #[arg(long)]
    in_process: bool,
    /// Use an already running data server.
    #[arg(long)]
    data_server: Option<SocketAddr>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the tensor data server until killed.
    ServeData {
        #[arg(long, default_value = "127.0.0.1:6380")]
        bind: String,
        #[arg(long, default_value_t = DEFAULT_MEM_CAP)]
        mem_cap: u64,
        #[arg(long, default_value_t = 10_000)]
        max_clients: usize,
    },
    /// Generate synthetic chips into a data server and optionally to files.
    GenData {
        /// Config file whose [data] section describes the chips.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        count: u64,
        #[arg(long)]
        data_server: Option<SocketAddr>,
        #[arg(long, default_value = "chip/")]
        prefix: String,
        /// Index of the first chip.
        #[arg(long, default_value_t = 0)]
        start: u64,
        /// Use the shifted target-style scenery.
        #[arg(long)]
        target: bool,
        /// Also write one file per chip into this directory.
        #[arg(long)]
        export: Option<PathBuf>,
    },
    RunScheduler(RoleArgs),
    RunPrimary(RoleArgs),
    RunWorker {
        #[arg(long)]
        id: String,
        #[command(flatten)]
        role: RoleArgs,
    },
    /// Single-node data-parallel training run.
    TrainSn {
        #[command(flatten)]
        train: TrainArgs,
        /// Continue from an SN checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Parameter-server training run: scheduler, primary and workers.
    TrainPsv {
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Print the timing, cost and score report of a run directory.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Compare loading chips from the data server with per-file reads.
    BenchIo {
        #[arg(long, default_value_t = 1000)]
        count: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Where chip files are written; a temporary directory by default.
        #[arg(long)]
        dir: Option<PathBuf>,
        #[arg(long)]
        data_server: Option<SocketAddr>,
    },
}

fn load(config: Option<&Path>) -> CliResult<RunConfig> {
    match config {
        Some(p) => RunConfig::from_file(p),
        None => Ok(RunConfig::default()),
    }
}

fn train(args: TrainArgs, mode: Mode, resume: Option<PathBuf>) -> CliResult<()> {
    let mut cfg = load(args.config.as_deref())?;
    cfg.mode = mode;
    let opts = RunOptions {
        in_process: args.in_process,
        exe: None,
        resume,
        data_server: args.data_server,
    };
    let out = run::orchestrate(&cfg, &args.out, &opts)?;
    print!("{}", out.report);
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::ServeData {
            bind,
            mem_cap,
            max_clients,
        } => {
            let handle = serve(bind.as_str(), ServerConfig { max_clients, mem_cap })
                .map_err(|e| CliError::Runtime(format!("cannot bind {bind}: {e}")))?;
            println!("listening on {}", handle.addr());
            std::io::stdout().flush()?;
            handle.join();
            Ok(())
        }
        Command::GenData {
            spec,
            count,
            data_server,
            prefix,
            start,
            target,
            export,
        } => {
            let cfg = load(spec.as_deref())?;
            let spec: ChipSpec = if target { run::target_spec(&cfg) } else { cfg.data.spec.clone() };
            spec.validate()?;
            let range = start..start + count;
            if let Some(addr) = data_server {
                let keys = populate(&mut connect(addr)?, &spec, range.clone(), &prefix)?;
                println!("stored {} chips under '{prefix}'", keys.len());
            }
            if let Some(dir) = export {
                std::fs::create_dir_all(&dir)?;
                let files = export_files(&spec, range, &dir)?;
                println!("wrote {} chip files to {}", files.len(), dir.display());
            }
            Ok(())
        }
        Command::RunScheduler(r) => run::run_scheduler(&load(r.config.as_deref())?, r.data_server, r.out.as_deref()),
        Command::RunPrimary(r) => run::run_primary(&load(r.config.as_deref())?, r.data_server, r.out.as_deref()),
        Command::RunWorker { id, role: r } => {
            run::run_worker(&load(r.config.as_deref())?, r.data_server, &id, r.out.as_deref())
        }
        Command::TrainSn { train: t, resume } => train(t, Mode::Sn, resume),
        Command::TrainPsv { train: t } => train(t, Mode::Psv, None),
        Command::Report { run_dir } => {
            print!("{}", run::render_run_report(&run_dir)?);
            Ok(())
        }
        Command::BenchIo {
            count,
            config,
            dir,
            data_server,
        } => {
            let cfg = load(config.as_deref())?;
            let server = DataServer::start(
                &cfg.server,
                &RunOptions {
                    in_process: true,
                    data_server,
                    ..RunOptions::default()
                },
            )?;
            let scratch = std::env::temp_dir().join(format!("shipnet-bench-{}", std::process::id()));
            let dir_path = dir.clone().unwrap_or_else(|| scratch.clone());
            let row = bench_io(server.addr(), &cfg.data.spec, count, &dir_path);
            if dir.is_none() {
                let _ = std::fs::remove_dir_all(&scratch);
            }
            print!("{}", row?.render());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
