//! `farm`: one binary for the server, the client, the simulator, the
//! supervisor, charts and the live demo.

mod demo;

use std::io::Write;
use std::net::TcpListener;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, AtomicU32};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use farm_core::chart::{render_svg, ChartSpec};
use farm_core::client::{run_client, ClientConfig};
use farm_core::ea::{EaConfig, EaWorkload};
use farm_core::server::net::{serve, NetOptions, ServeOutcome, StopHandle};
use farm_core::server::{FarmServer, LossPolicy, ServerConfig};
use farm_core::sim::scenario::scenario_policy;
use farm_core::sim::{load_scenario, mean_utilization, read_trace, run_scenario, write_trace, Engine};
use farm_core::supervisor::process::ProcessAdapter;
use farm_core::supervisor::template::TemplateAdapter;
use farm_core::supervisor::{format_log, run_supervisor, Action, SimAdapter, SupplyPolicy};
use farm_core::workload::{AnyKernel, TaskFarm, Workload};

#[derive(Parser)]
#[command(name = "farm", version, about = "Malleable task farming and fill-in scheduling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Hand out tasks to clients until the work runs out.
    Server(ServerArgs),
    /// Attach to a server and compute tasks until it is gone.
    Client(ClientArgs),
    /// Cluster scheduler simulator.
    #[command(subcommand)]
    Sim(SimCommand),
    /// Keep fill-in jobs supplied to a scheduler.
    Supervise(SuperviseArgs),
    /// Live run: EA server plus client processes under a changing slot budget.
    Demo(demo::DemoArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Taskfarm,
    Ea,
}

#[derive(Args)]
struct ServerArgs {
    /// Address to listen on; port 0 picks a free port (logged as event=listen).
    #[arg(long, default_value = "127.0.0.1:7878")]
    listen: String,
    /// Lease granted per heartbeat, in milliseconds.
    #[arg(long, default_value_t = 5000)]
    lease_ms: u64,
    /// Most tasks handed out per chunk.
    #[arg(long, default_value_t = 8)]
    chunk_max: u32,
    /// What happens to tasks held by a client whose lease expires
    /// [default: reschedule for taskfarm, drop for ea].
    #[arg(long)]
    loss_policy: Option<LossPolicy>,
    /// Interval of the expired-lease sweep, in milliseconds.
    #[arg(long, default_value_t = 250)]
    sweep_ms: u64,
    #[arg(long, value_enum, default_value = "taskfarm")]
    mode: Mode,
    /// Taskfarm: number of tasks.
    #[arg(long, default_value_t = 1000)]
    tasks: u64,
    /// Taskfarm: time each task takes on the client, in microseconds.
    #[arg(long, default_value_t = 1000)]
    work_us: u32,
    #[command(flatten)]
    ea: EaArgs,
    /// Directory for workload dumps; a final dump is written on exit.
    #[arg(long)]
    dump_dir: Option<PathBuf>,
    /// Seconds between periodic dumps.
    #[arg(long)]
    dump_every_s: Option<u64>,
}

#[derive(Args, Clone)]
struct EaArgs {
    /// EA: random seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// EA: number of atoms in the cluster.
    #[arg(long, default_value_t = 13)]
    atoms: usize,
    /// EA: pool capacity.
    #[arg(long, default_value_t = 20)]
    pool_size: usize,
    /// EA: smallest energy gap between two pool members.
    #[arg(long, default_value_t = 1e-3)]
    diversity_epsilon: f64,
    /// EA: children produced per task.
    #[arg(long, default_value_t = 2)]
    children: u32,
    /// EA: child evaluations before the run drains.
    #[arg(long, default_value_t = 50_000)]
    evaluations: u64,
}

impl EaArgs {
    fn config(&self) -> EaConfig {
        let children = self.children.max(1);
        EaConfig {
            n_atoms: self.atoms,
            pool_capacity: self.pool_size,
            diversity_epsilon: self.diversity_epsilon,
            n_children: children,
            generation_budget: self.evaluations.div_ceil(children as u64),
            seed: self.seed,
            ..Default::default()
        }
    }
}

#[derive(Args)]
struct ClientArgs {
    /// Server address.
    #[arg(long, env = "FARM_SERVER")]
    server: String,
    /// Tasks computed in parallel.
    #[arg(long, default_value_t = 1)]
    slots: u32,
    #[arg(long, default_value_t = 500)]
    heartbeat_ms: u64,
    /// Unanswered heartbeat intervals tolerated before giving up.
    #[arg(long, default_value_t = 4)]
    max_missed: u32,
    /// Tasks asked for per fetch; 0 means twice the slots.
    #[arg(long, default_value_t = 0)]
    chunk_size: u32,
}

#[derive(Subcommand)]
enum SimCommand {
    /// Simulate a scenario and write its load trace.
    Run(SimRunArgs),
    /// Render a load trace as an SVG chart.
    Plot(SimPlotArgs),
}

#[derive(Args)]
struct SimRunArgs {
    /// Built-in scenario (local, center, hlrn) or scenario file.
    scenario: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output CSV trace.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Output supervision log.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Override the scheduler's dispatch latency, in seconds.
    #[arg(long)]
    latency_s: Option<u64>,
    /// Run the normal workload only.
    #[arg(long)]
    no_fillin: bool,
    /// Report utilization over FROM:TO minutes instead of the whole run.
    #[arg(long, value_parser = parse_window)]
    window: Option<(u64, u64)>,
}

fn parse_window(s: &str) -> Result<(u64, u64), String> {
    let (a, b) = s.split_once(':').ok_or("expected FROM:TO")?;
    let a = a.parse().map_err(|_| format!("bad start {a:?}"))?;
    let b = b.parse().map_err(|_| format!("bad end {b:?}"))?;
    if a > b {
        return Err("window ends before it starts".into());
    }
    Ok((a, b))
}

#[derive(Args)]
struct SimPlotArgs {
    /// Input CSV trace.
    trace: PathBuf,
    /// Output SVG.
    #[arg(short = 'o', long)]
    output: PathBuf,
    #[arg(long, default_value = "CPU load")]
    title: String,
    #[arg(long, default_value = "#1f4e9c")]
    normal_color: String,
    #[arg(long, default_value = "#3a9d3a")]
    fillin_color: String,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PolicyArg {
    Static,
    Keep,
    Dynamic,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AdapterArg {
    Sim,
    Process,
    Template,
}

#[derive(Args)]
struct SuperviseArgs {
    #[arg(long, value_enum)]
    policy: PolicyArg,
    #[arg(long, value_enum, default_value = "sim")]
    adapter: AdapterArg,
    /// Seconds between ticks.
    #[arg(long, default_value_t = 60)]
    interval_s: u64,
    /// Stop after this many seconds [default: scenario horizon for sim, unlimited otherwise].
    #[arg(long)]
    horizon_s: Option<u64>,
    /// Job sizes for static and keep, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,4,8")]
    sizes: Vec<u32>,
    /// Static: jobs per size, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "40,20,30")]
    counts: Vec<u32>,
    /// Static: replace jobs that ended.
    #[arg(long)]
    maintain: bool,
    /// Keep: jobs of each size to keep queued.
    #[arg(long, default_value_t = 5)]
    min_queued: u32,
    /// Static and keep: job walltime in seconds.
    #[arg(long, default_value_t = 86_400)]
    walltime_s: u64,
    /// Dynamic: most fill-in jobs at once.
    #[arg(long, default_value_t = 24)]
    job_cap: u32,
    /// Dynamic: longest walltime in seconds.
    #[arg(long, default_value_t = 14_400)]
    max_walltime_s: u64,
    /// Consecutive failed queries tolerated before giving up.
    #[arg(long, default_value_t = 5)]
    retry_budget: u32,
    /// Write the supervision log here as well as to stderr.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Sim: scenario name or file for the background load.
    #[arg(long, default_value = "local")]
    scenario: String,
    /// Sim: random seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Sim: output CSV trace.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Process: slots available to client processes.
    #[arg(long, default_value_t = 4)]
    budget: u32,
    /// Process: server the spawned clients attach to.
    #[arg(long, env = "FARM_SERVER")]
    server: Option<String>,
    /// Template: submit command; may use {size} and {walltime}, prints the job id.
    #[arg(long)]
    submit_cmd: Option<String>,
    /// Template: cancel command; may use {job_id}.
    #[arg(long)]
    cancel_cmd: Option<String>,
    /// Template: query command printing free/queued/running/reservation lines.
    #[arg(long)]
    query_cmd: Option<String>,
}

impl SuperviseArgs {
    fn policy(&self) -> Result<SupplyPolicy> {
        if self.sizes.contains(&0) {
            bail!("--sizes must all be at least 1");
        }
        Ok(match self.policy {
            PolicyArg::Static => {
                if self.counts.len() != self.sizes.len() {
                    bail!("--counts needs one entry per size");
                }
                SupplyPolicy::StaticMix {
                    mix: self.sizes.iter().copied().zip(self.counts.iter().copied()).collect(),
                    walltime: self.walltime_s,
                    maintain: self.maintain,
                }
            }
            PolicyArg::Keep => SupplyPolicy::KeepQueued {
                sizes: self.sizes.clone(),
                min_queued: self.min_queued,
                walltime: self.walltime_s,
            },
            PolicyArg::Dynamic => {
                if self.job_cap == 0 {
                    bail!("--job-cap must be at least 1");
                }
                SupplyPolicy::DynamicFit {
                    interval: self.interval_s,
                    job_cap: self.job_cap,
                    max_walltime: self.max_walltime_s,
                }
            }
        })
    }
}

fn init_logging(default_level: &str) {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default_level))
        .format(|buf, record| writeln!(buf, "{}", record.args()))
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    // the simulator's per-action lines are available via --log
    init_logging(if matches!(cli.command, Command::Sim(_)) {
        "warn"
    } else {
        "info"
    });
    let result = match cli.command {
        Command::Server(a) => cmd_server(a),
        Command::Client(a) => cmd_client(a),
        Command::Sim(SimCommand::Run(a)) => cmd_sim_run(a),
        Command::Sim(SimCommand::Plot(a)) => cmd_sim_plot(a),
        Command::Supervise(a) => cmd_supervise(a),
        Command::Demo(a) => demo::run(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Raises `flag` on SIGTERM and SIGINT.
fn stop_on_signals(flag: &Arc<AtomicBool>) -> Result<()> {
    for sig in [signal_hook::consts::SIGTERM, signal_hook::consts::SIGINT] {
        signal_hook::flag::register(sig, flag.clone()).context("installing signal handler")?;
    }
    Ok(())
}

fn cmd_server(a: ServerArgs) -> Result<u8> {
    let default_policy = match a.mode {
        Mode::Taskfarm => LossPolicy::Reschedule,
        Mode::Ea => LossPolicy::Drop,
    };
    let cfg = ServerConfig {
        lease_ms: a.lease_ms,
        chunk_max: a.chunk_max,
        loss_policy: a.loss_policy.unwrap_or(default_policy),
        heartbeat_sweep_ms: a.sweep_ms,
    };
    let listener = TcpListener::bind(&a.listen).with_context(|| format!("binding {}", a.listen))?;
    let stop = StopHandle::new();
    stop_on_signals(&stop.flag())?;
    let opts = NetOptions {
        dump_dir: a.dump_dir.clone(),
        dump_every: a.dump_every_s.map(Duration::from_secs),
        status: None,
    };
    let outcome = match a.mode {
        Mode::Taskfarm => run_server(listener, cfg, TaskFarm::new(a.tasks, a.work_us), stop, opts)?,
        Mode::Ea => {
            let workload = EaWorkload::new(&a.ea.config()).context("seeding the pool")?;
            run_server(listener, cfg, workload, stop, opts)?
        }
    };
    info!("event=exit outcome={outcome:?}");
    Ok(0)
}

fn run_server<W: Workload + 'static>(
    listener: TcpListener,
    cfg: ServerConfig,
    workload: W,
    stop: StopHandle,
    opts: NetOptions,
) -> Result<ServeOutcome> {
    let server = FarmServer::new(cfg, workload);
    let (outcome, _) = serve(listener, server, stop, opts).context("serving")?;
    Ok(outcome)
}

fn cmd_client(a: ClientArgs) -> Result<u8> {
    if a.slots == 0 {
        bail!("--slots must be at least 1");
    }
    let cfg = ClientConfig {
        server_address: a.server,
        slots: a.slots,
        heartbeat_interval_ms: a.heartbeat_ms.max(1),
        max_missed_acks: a.max_missed,
        chunk_request_size: a.chunk_size,
    };
    let kill = Arc::new(AtomicBool::new(false));
    stop_on_signals(&kill)?;
    let status = run_client(&cfg, Arc::new(AnyKernel::default()), kill);
    info!("event=client_exit status={status:?}");
    Ok(status.code() as u8)
}

fn cmd_sim_run(a: SimRunArgs) -> Result<u8> {
    let mut cfg = load_scenario(&a.scenario).map_err(anyhow::Error::msg)?;
    if let Some(latency) = a.latency_s {
        cfg.cluster.dispatch_latency_s = latency;
    }
    let run = run_scenario(&cfg, a.seed, !a.no_fillin);
    if let Some(path) = &a.trace {
        write_trace(&run.trace, path).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = &a.log {
        std::fs::write(path, format_log(&run.actions)).with_context(|| format!("writing {}", path.display()))?;
    }
    let (from, to) = a.window.unwrap_or((0, cfg.cluster.horizon_min.saturating_sub(1)));
    let merges = run.actions.iter().filter(|x| x.reason == "merge").count() / 2;
    println!(
        "scenario={} seed={} utilization={:.4} window_min={from}:{to} normal_jobs={} fillin_actions={} merges={merges} max_running_fillin={} preemptions={}",
        a.scenario,
        a.seed,
        mean_utilization(&run.trace, from, to),
        run.normal_starts.len(),
        run.actions.len(),
        run.max_running_fillin,
        run.preemptions
    );
    Ok(0)
}

fn cmd_sim_plot(a: SimPlotArgs) -> Result<u8> {
    let samples = read_trace(&a.trace).with_context(|| format!("reading {}", a.trace.display()))?;
    let spec = ChartSpec {
        title: a.title,
        normal_color: a.normal_color,
        fillin_color: a.fillin_color,
        ..Default::default()
    };
    std::fs::write(&a.output, render_svg(&samples, &spec))
        .with_context(|| format!("writing {}", a.output.display()))?;
    Ok(0)
}

fn cmd_supervise(a: SuperviseArgs) -> Result<u8> {
    let policy = a.policy()?;
    let stop = Arc::new(AtomicBool::new(false));
    stop_on_signals(&stop)?;
    let horizon = a.horizon_s.unwrap_or(u64::MAX);
    let actions: Vec<Action> = match a.adapter {
        AdapterArg::Sim => {
            let cfg = load_scenario(&a.scenario).map_err(anyhow::Error::msg)?;
            let horizon = a.horizon_s.unwrap_or(cfg.horizon_secs()).min(cfg.horizon_secs());
            let jobs = farm_core::sim::background_mix(a.seed, &cfg.background, cfg.horizon_secs(), 1);
            let mut engine = Engine::new(&cfg.cluster, &cfg.reservations, jobs);
            if scenario_policy(&cfg).is_some() {
                info!("event=note scenario policy replaced by --policy");
            }
            let actions = {
                let mut adapter = SimAdapter {
                    engine: &mut engine,
                    requeue: cfg.fillin.requeue,
                };
                run_supervisor(&policy, &mut adapter, a.interval_s, horizon, &stop, a.retry_budget)
            };
            engine.run_to_end();
            if let Some(path) = &a.trace {
                write_trace(engine.trace(), path).with_context(|| format!("writing {}", path.display()))?;
            }
            actions
        }
        AdapterArg::Process => {
            let server = a
                .server
                .clone()
                .context("--server (or FARM_SERVER) is required with the process adapter")?;
            let exe = std::env::current_exe().context("locating the farm binary")?;
            let args = ["client", "--server", &server, "--slots", "{size}"]
                .map(String::from)
                .to_vec();
            let mut adapter = ProcessAdapter::new(exe.to_string_lossy(), args, Arc::new(AtomicU32::new(a.budget)));
            let actions = run_supervisor(&policy, &mut adapter, a.interval_s, horizon, &stop, a.retry_budget);
            let killed = adapter.shutdown(Duration::from_secs(5));
            if !killed.is_empty() {
                info!("event=killed_at_exit pids={killed:?}");
            }
            actions
        }
        AdapterArg::Template => {
            let (Some(submit), Some(cancel), Some(query)) = (&a.submit_cmd, &a.cancel_cmd, &a.query_cmd) else {
                bail!("the template adapter needs --submit-cmd, --cancel-cmd and --query-cmd");
            };
            let mut adapter = TemplateAdapter::new(submit.as_str(), cancel.as_str(), query.as_str());
            run_supervisor(&policy, &mut adapter, a.interval_s, horizon, &stop, a.retry_budget)
        }
    };
    if let Some(path) = &a.log {
        std::fs::write(path, format_log(&actions)).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(0)
}
