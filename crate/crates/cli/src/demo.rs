//! Live malleability demo. An EA server runs in-process while the
//! supervisor starts and kills real client processes to follow a scripted
//! slot budget. Writes a per-second trace, periodic pool dumps and the pids
//! of every client.

use std::fs;
use std::io::Write;
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU32, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::Args;
use log::{info, warn};

use farm_core::ea::pool::read_pool_index;
use farm_core::ea::EaWorkload;
use farm_core::server::net::{serve, NetOptions, ServeStatus, StopHandle};
use farm_core::server::{FarmServer, LossPolicy, ServerConfig};
use farm_core::supervisor::process::ProcessAdapter;
use farm_core::supervisor::{format_log, run_supervisor, SupplyPolicy};

use crate::EaArgs;

#[derive(Args)]
pub struct DemoArgs {
    /// Total run time in seconds.
    #[arg(long, default_value_t = 180)]
    duration_s: u64,
    /// Slot budget phases, comma separated; each lasts an equal share of the run.
    #[arg(long, value_delimiter = ',', default_value = "8,0,8")]
    budget: Vec<u32>,
    /// Slots per client process.
    #[arg(long, default_value_t = 1)]
    client_slots: u32,
    /// Output directory for trace.csv, supervise.log, pids.txt and dumps/.
    #[arg(long, default_value = "demo_out")]
    out_dir: PathBuf,
    /// Seconds between supervisor ticks.
    #[arg(long, default_value_t = 1)]
    interval_s: u64,
    /// Seconds between pool dumps.
    #[arg(long, default_value_t = 10)]
    dump_every_s: u64,
    /// Milliseconds between trace samples.
    #[arg(long, default_value_t = 1000)]
    sample_ms: u64,
    #[arg(long, default_value_t = 2000)]
    lease_ms: u64,
    #[arg(long, default_value_t = 250)]
    heartbeat_ms: u64,
    #[arg(long, default_value_t = 4)]
    max_missed: u32,
    #[arg(long, default_value = "drop")]
    loss_policy: LossPolicy,
    #[command(flatten)]
    ea: EaArgs,
}

const TRACE_HEADER: &str = "t_s,budget,live_clients,live_slots,completed_tasks";

pub fn run(a: DemoArgs) -> Result<u8> {
    if a.budget.is_empty() {
        bail!("--budget needs at least one phase");
    }
    if a.client_slots == 0 {
        bail!("--client-slots must be at least 1");
    }
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let dump_dir = a.out_dir.join("dumps");

    // effectively unlimited: the run ends on the clock, not on the budget
    let mut ea = a.ea.config();
    ea.generation_budget = u64::MAX;
    let workload = EaWorkload::new(&ea).context("seeding the pool")?;
    let cfg = ServerConfig {
        lease_ms: a.lease_ms,
        loss_policy: a.loss_policy,
        heartbeat_sweep_ms: 100,
        ..Default::default()
    };
    let listener = TcpListener::bind("127.0.0.1:0").context("binding the server socket")?;
    let addr = listener.local_addr()?.to_string();
    let stop_server = StopHandle::new();
    let status = Arc::new(Mutex::new(ServeStatus::default()));
    let server = {
        let opts = NetOptions {
            dump_dir: Some(dump_dir.clone()),
            dump_every: Some(Duration::from_secs(a.dump_every_s.max(1))),
            status: Some(status.clone()),
        };
        let stop = stop_server.clone();
        thread::spawn(move || serve(listener, FarmServer::new(cfg, workload), stop, opts))
    };

    let interrupted = Arc::new(AtomicBool::new(false));
    crate::stop_on_signals(&interrupted)?;
    let budget = Arc::new(AtomicU32::new(a.budget[0]));
    let finished = Arc::new(AtomicBool::new(false));
    let start = Instant::now();
    let phase = Duration::from_secs(a.duration_s) / a.budget.len() as u32;
    let scheduler = {
        let (budget, phases, finished) = (budget.clone(), a.budget.clone(), finished.clone());
        thread::spawn(move || {
            for (i, &slots) in phases.iter().enumerate() {
                let at = start + phase * i as u32;
                while Instant::now() < at {
                    if finished.load(Ordering::SeqCst) {
                        return;
                    }
                    thread::sleep(Duration::from_millis(20));
                }
                budget.store(slots, Ordering::SeqCst);
                info!("event=budget t_s={} slots={slots}", start.elapsed().as_secs());
            }
        })
    };
    let sampler = {
        let (budget, status, finished) = (budget.clone(), status.clone(), finished.clone());
        let path = a.out_dir.join("trace.csv");
        let every = Duration::from_millis(a.sample_ms.max(10));
        thread::spawn(move || -> std::io::Result<()> {
            let mut out = std::io::BufWriter::new(fs::File::create(path)?);
            writeln!(out, "{TRACE_HEADER}")?;
            let mut next = start;
            while !finished.load(Ordering::SeqCst) {
                let s = status.lock().unwrap_or_else(|e| e.into_inner()).clone();
                writeln!(
                    out,
                    "{},{},{},{},{}",
                    start.elapsed().as_secs(),
                    budget.load(Ordering::SeqCst),
                    s.live_clients,
                    s.live_slots,
                    s.counts.completed
                )?;
                next += every;
                while Instant::now() < next && !finished.load(Ordering::SeqCst) {
                    thread::sleep(Duration::from_millis(10));
                }
            }
            out.flush()
        })
    };

    let max_budget = *a.budget.iter().max().unwrap_or(&0);
    let policy = SupplyPolicy::StaticMix {
        mix: vec![(a.client_slots, max_budget.div_ceil(a.client_slots))],
        walltime: a.duration_s + 60,
        maintain: true,
    };
    let exe = std::env::current_exe().context("locating the farm binary")?;
    let client_args = [
        "client".to_string(),
        "--server".into(),
        addr.clone(),
        "--slots".into(),
        "{size}".into(),
        "--heartbeat-ms".into(),
        a.heartbeat_ms.to_string(),
        "--max-missed".into(),
        a.max_missed.to_string(),
    ];
    let mut adapter = ProcessAdapter::new(exe.to_string_lossy(), client_args.to_vec(), budget.clone());
    info!(
        "event=demo_start server={addr} duration_s={} budget={:?}",
        a.duration_s, a.budget
    );
    let actions = run_supervisor(
        &policy,
        &mut adapter,
        a.interval_s.max(1),
        a.duration_s,
        &interrupted,
        3,
    );
    finished.store(true, Ordering::SeqCst);

    stop_server.stop();
    let served = server.join().map_err(|_| anyhow::anyhow!("server thread panicked"))?;
    let bound = Duration::from_millis(2 * (a.max_missed as u64 + 1) * a.heartbeat_ms);
    let orphans = adapter.shutdown(bound);
    let _ = scheduler.join();
    let trace_written = sampler.join().map_err(|_| anyhow::anyhow!("sampler panicked"))?;

    let pids: String = adapter.spawned_pids().iter().map(|p| format!("{p}\n")).collect();
    fs::write(a.out_dir.join("pids.txt"), pids)?;
    fs::write(a.out_dir.join("supervise.log"), format_log(&actions))?;
    trace_written.context("writing trace.csv")?;

    let (_, server) = served.context("server did not shut down cleanly")?;
    let best = best_energy_per_dump(&dump_dir)?;
    let monotone = best.windows(2).all(|w| w[1] <= w[0]);
    println!(
        "demo clients_started={} clients_killed={} orphans={} dumps={} best_energy={:.6} monotone={monotone} {}",
        adapter.spawned_pids().len(),
        adapter.killed(),
        orphans.len(),
        best.len(),
        best.last().copied().unwrap_or(f64::NAN),
        server.report()
    );
    if !orphans.is_empty() {
        warn!("event=orphans pids={orphans:?}");
        return Ok(2);
    }
    if interrupted.load(Ordering::SeqCst) {
        return Ok(2);
    }
    Ok(0)
}

/// Best energy of every dump in order, periodic dumps first, then `final`.
pub fn best_energy_per_dump(dir: &std::path::Path) -> Result<Vec<f64>> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("dump_"))
        .collect();
    names.sort();
    names.push("final".into());
    let mut best = Vec::new();
    for name in names {
        let rows = read_pool_index(&dir.join(&name).join("pool.tsv"))?;
        if let Some(e) = rows.iter().map(|r| r.1).reduce(f64::min) {
            best.push(e);
        }
    }
    Ok(best)
}
