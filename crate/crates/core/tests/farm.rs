//! Server and clients talking over real sockets on localhost.

use std::net::TcpListener;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use farm_core::client::{run_client, ClientConfig, ExitStatus};
use farm_core::server::net::{serve, NetOptions, ServeOutcome, StopHandle};
use farm_core::server::{FarmServer, LossPolicy, ServerConfig};
use farm_core::workload::{TaskFarm, TaskFarmKernel};

fn start(
    total: u64,
    work_us: u32,
    cfg: ServerConfig,
) -> (
    String,
    StopHandle,
    thread::JoinHandle<(ServeOutcome, FarmServer<TaskFarm>)>,
) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let stop = StopHandle::new();
    let server = FarmServer::new(cfg, TaskFarm::new(total, work_us));
    let s = stop.clone();
    let handle = thread::spawn(move || serve(listener, server, s, NetOptions::default()).unwrap());
    (addr, stop, handle)
}

fn client(addr: &str, slots: u32, hb_ms: u64) -> ClientConfig {
    ClientConfig {
        server_address: addr.to_string(),
        slots,
        heartbeat_interval_ms: hb_ms,
        max_missed_acks: 4,
        chunk_request_size: 0,
    }
}

#[test]
fn three_clients_drain_the_farm() {
    let cfg = ServerConfig {
        lease_ms: 2000,
        chunk_max: 8,
        loss_policy: LossPolicy::Reschedule,
        heartbeat_sweep_ms: 20,
    };
    let (addr, _stop, server) = start(600, 50, cfg);
    let clients: Vec<_> = (0..3)
        .map(|i| {
            let cfg = client(&addr, i + 1, 100);
            thread::spawn(move || run_client(&cfg, Arc::new(TaskFarmKernel), Arc::default()))
        })
        .collect();
    for c in clients {
        assert_eq!(c.join().unwrap(), ExitStatus::Drained);
    }
    let (outcome, server) = server.join().unwrap();
    assert_eq!(outcome, ServeOutcome::Drained);
    assert_eq!(server.workload().completed(), 600);
    assert_eq!(server.workload().duplicates(), 0);
    assert_eq!(server.counts().completed, 600);
}

#[test]
fn drained_before_first_fetch() {
    let (addr, _stop, server) = start(0, 0, ServerConfig::default());
    // the server may already be gone, in which case the client sees a refused
    // connection or a shutdown notice
    let status = run_client(&client(&addr, 1, 50), Arc::new(TaskFarmKernel), Arc::default());
    assert_ne!(status, ExitStatus::Killed);
    let (outcome, server) = server.join().unwrap();
    assert_eq!(outcome, ServeOutcome::Drained);
    assert_eq!(server.counts().completed, 0);
}

/// A task ten heartbeat intervals long must not cost the client its lease.
#[test]
fn heartbeats_continue_during_long_compute() {
    let cfg = ServerConfig {
        lease_ms: 250,
        chunk_max: 1,
        loss_policy: LossPolicy::Reschedule,
        heartbeat_sweep_ms: 10,
    };
    let (addr, _stop, server) = start(2, 1_000_000, cfg);
    let status = run_client(&client(&addr, 1, 100), Arc::new(TaskFarmKernel), Arc::default());
    assert_eq!(status, ExitStatus::Drained);
    let (_, server) = server.join().unwrap();
    assert_eq!(server.expirations(), 0);
    assert_eq!(server.workload().completed(), 2);
}

#[test]
fn stopping_the_server_ends_every_client() {
    let cfg = ServerConfig {
        lease_ms: 2000,
        heartbeat_sweep_ms: 20,
        ..Default::default()
    };
    let (addr, stop, server) = start(1_000_000, 1000, cfg);
    let clients: Vec<_> = (0..5)
        .map(|_| {
            let cfg = client(&addr, 1, 100);
            thread::spawn(move || run_client(&cfg, Arc::new(TaskFarmKernel), Arc::default()))
        })
        .collect();
    thread::sleep(Duration::from_millis(500));
    let t0 = Instant::now();
    stop.stop();
    for c in clients {
        assert_ne!(c.join().unwrap(), ExitStatus::Killed);
    }
    assert!(t0.elapsed() < Duration::from_secs(2), "{:?}", t0.elapsed());
    let (outcome, server) = server.join().unwrap();
    assert_eq!(outcome, ServeOutcome::Stopped);
    let c = server.counts();
    assert_eq!(c.pending + c.in_flight + c.completed, 1_000_000);
}

#[test]
fn killed_client_work_is_rescheduled() {
    let cfg = ServerConfig {
        lease_ms: 300,
        chunk_max: 4,
        loss_policy: LossPolicy::Reschedule,
        heartbeat_sweep_ms: 10,
    };
    let (addr, _stop, server) = start(40, 20_000, cfg);
    let kill = Arc::new(AtomicBool::new(false));
    let victim = {
        let cfg = client(&addr, 1, 50);
        let kill = kill.clone();
        thread::spawn(move || run_client(&cfg, Arc::new(TaskFarmKernel), kill))
    };
    thread::sleep(Duration::from_millis(100));
    kill.store(true, Ordering::SeqCst);
    assert_eq!(victim.join().unwrap(), ExitStatus::Killed);
    let status = run_client(&client(&addr, 2, 50), Arc::new(TaskFarmKernel), Arc::default());
    assert_eq!(status, ExitStatus::Drained);
    let (_, server) = server.join().unwrap();
    assert_eq!(server.workload().completed(), 40);
    assert_eq!(server.workload().duplicates(), 0);
    assert!(server.expirations() >= 1);
}

#[test]
fn drop_policy_writes_off_lost_work() {
    let cfg = ServerConfig {
        lease_ms: 300,
        chunk_max: 4,
        loss_policy: LossPolicy::Drop,
        heartbeat_sweep_ms: 10,
    };
    let (addr, _stop, server) = start(40, 20_000, cfg);
    let kill = Arc::new(AtomicBool::new(false));
    let victim = {
        let cfg = client(&addr, 1, 50);
        let kill = kill.clone();
        thread::spawn(move || run_client(&cfg, Arc::new(TaskFarmKernel), kill))
    };
    thread::sleep(Duration::from_millis(100));
    kill.store(true, Ordering::SeqCst);
    victim.join().unwrap();
    // let the lease lapse before the survivor starts, so its Drained reply
    // cannot race the write-off
    thread::sleep(Duration::from_millis(500));
    run_client(&client(&addr, 1, 50), Arc::new(TaskFarmKernel), Arc::default());
    let (outcome, server) = server.join().unwrap();
    assert_eq!(outcome, ServeOutcome::Drained);
    let c = server.counts();
    assert!(c.dropped > 0);
    assert_eq!(c.completed + c.dropped, 40);
    assert_eq!(server.workload().completed(), c.completed);
}
