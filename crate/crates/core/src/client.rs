//! The farm client: registers, loops fetch, compute, submit, heartbeats on
//! its own thread and leaves as soon as the server is gone.

use std::io::BufReader;
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, info, warn};

use crate::protocol::{read_message, write_message, Message, ResultPayload, ShutdownReason, TaskPayload};
use crate::workload::{Kernel, POISONED_RESULT};

#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub server_address: String,
    pub slots: u32,
    pub heartbeat_interval_ms: u64,
    pub max_missed_acks: u32,
    /// Tasks asked for per fetch; 0 means `slots * 2`.
    pub chunk_request_size: u32,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            server_address: "127.0.0.1:7878".into(),
            slots: 1,
            heartbeat_interval_ms: 500,
            max_missed_acks: 4,
            chunk_request_size: 0,
        }
    }
}

impl ClientConfig {
    pub fn request_size(&self) -> u32 {
        if self.chunk_request_size == 0 {
            self.slots.max(1) * 2
        } else {
            self.chunk_request_size
        }
    }

    /// How long the client waits on a silent server before giving up.
    pub fn give_up_after(&self) -> Duration {
        Duration::from_millis(self.heartbeat_interval_ms * (self.max_missed_acks as u64 + 1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    /// The server has no more work.
    Drained,
    /// Heartbeats went unanswered, or the connection failed or was refused.
    ServerLost,
    /// Termination was requested from outside.
    Killed,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        match self {
            ExitStatus::Drained | ExitStatus::Killed => 0,
            ExitStatus::ServerLost => 2,
        }
    }
}

/// Runs `tasks` on up to `slots` threads. Results line up with tasks; a task
/// the kernel rejects yields the poisoned marker.
pub fn compute_chunk<K: Kernel + ?Sized>(kernel: &K, tasks: &[TaskPayload], slots: u32) -> Vec<ResultPayload> {
    let run = |t: &TaskPayload| kernel.compute(t).unwrap_or_else(|_| POISONED_RESULT.to_vec());
    let workers = (slots.max(1) as usize).min(tasks.len());
    if workers <= 1 {
        return tasks.iter().map(run).collect();
    }
    let next = AtomicU64::new(0);
    let slots_out: Vec<Mutex<Option<ResultPayload>>> = tasks.iter().map(|_| Mutex::new(None)).collect();
    thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed) as usize;
                if i >= tasks.len() {
                    break;
                }
                *slots_out[i].lock().unwrap() = Some(run(&tasks[i]));
            });
        }
    });
    slots_out
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every task computed"))
        .collect()
}

enum Event {
    Reply(Message),
    Lost(&'static str),
}

struct Link {
    writer: Mutex<TcpStream>,
    lost: AtomicBool,
}

impl Link {
    fn send(&self, msg: &Message) -> bool {
        let mut w = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        write_message(&mut *w, msg).is_ok()
    }

    fn close(&self) {
        let w = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let _ = w.shutdown(Shutdown::Both);
    }
}

/// Runs the client until the server drains, disappears, or `kill` is set.
/// An in-flight chunk is abandoned silently on kill; the server's lease
/// expiry reclaims it.
pub fn run_client<K: Kernel + Send + 'static>(cfg: &ClientConfig, kernel: Arc<K>, kill: Arc<AtomicBool>) -> ExitStatus {
    let interval = Duration::from_millis(cfg.heartbeat_interval_ms.max(1));
    let patience = cfg.give_up_after();
    let Some(stream) = connect(&cfg.server_address, patience) else {
        info!(
            "event=exit status=server_lost reason=connect_failed addr={}",
            cfg.server_address
        );
        return ExitStatus::ServerLost;
    };
    let link = match stream.try_clone() {
        Ok(w) => Arc::new(Link {
            writer: Mutex::new(w),
            lost: AtomicBool::new(false),
        }),
        Err(_) => return ExitStatus::ServerLost,
    };
    let last_ack = Arc::new(AtomicU64::new(0));
    let (tx, rx) = mpsc::channel();
    spawn_reader(stream, link.clone(), last_ack.clone(), tx.clone());

    let status = session(cfg, kernel, &kill, &link, &rx, &tx, last_ack, interval, patience);
    link.lost.store(true, Ordering::SeqCst);
    link.close();
    let reason = match status {
        ExitStatus::Drained => "drained",
        ExitStatus::ServerLost => "server_lost",
        ExitStatus::Killed => "killed",
    };
    info!("event=exit status={reason}");
    status
}

#[allow(clippy::too_many_arguments)]
fn session<K: Kernel + Send + 'static>(
    cfg: &ClientConfig,
    kernel: Arc<K>,
    kill: &AtomicBool,
    link: &Arc<Link>,
    rx: &Receiver<Event>,
    tx: &Sender<Event>,
    last_ack: Arc<AtomicU64>,
    interval: Duration,
    patience: Duration,
) -> ExitStatus {
    if !link.send(&Message::ClientHello {
        requested_slots: cfg.slots,
    }) {
        return ExitStatus::ServerLost;
    }
    let client_id = match wait(rx, kill, patience) {
        Ok(Message::HelloAck {
            client_id, lease_ms, ..
        }) => {
            info!(
                "event=registered client_id={client_id} lease_ms={lease_ms} slots={}",
                cfg.slots
            );
            client_id
        }
        Ok(other) => return unexpected(other),
        Err(status) => return status,
    };
    spawn_heartbeat(
        client_id,
        link.clone(),
        last_ack,
        tx.clone(),
        interval,
        cfg.max_missed_acks,
    );

    let request = Message::ChunkRequest {
        client_id,
        max_tasks: cfg.request_size(),
    };
    let mut results_submitted = 0u64;
    loop {
        if kill.load(Ordering::SeqCst) {
            return ExitStatus::Killed;
        }
        if !link.send(&request) {
            return ExitStatus::ServerLost;
        }
        let (chunk_id, tasks) = match wait(rx, kill, patience) {
            Ok(Message::TaskChunk { chunk_id, tasks }) => (chunk_id, tasks),
            Ok(Message::Drained) => {
                info!("event=drained client_id={client_id} results_submitted={results_submitted}");
                return ExitStatus::Drained;
            }
            Ok(other) => return unexpected(other),
            Err(status) => return status,
        };
        if tasks.is_empty() {
            // work is out with other clients and may come back
            thread::sleep(interval.min(Duration::from_millis(200)));
            continue;
        }
        let n = tasks.len();
        let results = match compute_detached(&kernel, tasks, cfg.slots, kill, link) {
            Ok(r) => r,
            Err(status) => return status,
        };
        if !link.send(&Message::ResultChunk { chunk_id, results }) {
            return ExitStatus::ServerLost;
        }
        match wait(rx, kill, patience) {
            Ok(Message::ResultAck { .. }) => results_submitted += n as u64,
            Ok(other) => return unexpected(other),
            Err(status) => return status,
        }
    }
}

/// Computes on a helper thread so that a kill or a lost server is noticed
/// while a long chunk is still running.
fn compute_detached<K: Kernel + Send + 'static>(
    kernel: &Arc<K>,
    tasks: Vec<TaskPayload>,
    slots: u32,
    kill: &AtomicBool,
    link: &Link,
) -> Result<Vec<ResultPayload>, ExitStatus> {
    let (done_tx, done_rx) = mpsc::channel();
    let kernel = kernel.clone();
    thread::spawn(move || {
        let _ = done_tx.send(compute_chunk(&*kernel, &tasks, slots));
    });
    loop {
        match done_rx.recv_timeout(Duration::from_millis(20)) {
            Ok(r) => return Ok(r),
            Err(RecvTimeoutError::Disconnected) => return Err(ExitStatus::ServerLost),
            Err(RecvTimeoutError::Timeout) => {
                if kill.load(Ordering::SeqCst) {
                    return Err(ExitStatus::Killed);
                }
                if link.lost.load(Ordering::SeqCst) {
                    return Err(ExitStatus::ServerLost);
                }
            }
        }
    }
}

fn unexpected(msg: Message) -> ExitStatus {
    match msg {
        Message::ShutdownNotice {
            reason: ShutdownReason::ServerStopping,
        } => {
            info!("event=shutdown_notice reason=server_stopping");
            ExitStatus::Drained
        }
        Message::ShutdownNotice {
            reason: ShutdownReason::Rejected,
        } => {
            info!("event=shutdown_notice reason=rejected");
            ExitStatus::ServerLost
        }
        other => {
            warn!("event=protocol_violation tag={:#04x}", other.tag());
            ExitStatus::ServerLost
        }
    }
}

/// Waits for the next reply from the server, watching the kill flag.
fn wait(rx: &Receiver<Event>, kill: &AtomicBool, patience: Duration) -> Result<Message, ExitStatus> {
    let deadline = Instant::now() + patience;
    loop {
        if kill.load(Ordering::SeqCst) {
            return Err(ExitStatus::Killed);
        }
        match rx.recv_timeout(Duration::from_millis(20)) {
            Ok(Event::Reply(m)) => return Ok(m),
            Ok(Event::Lost(reason)) => {
                debug!("event=link_lost reason={reason}");
                return Err(ExitStatus::ServerLost);
            }
            Err(RecvTimeoutError::Disconnected) => return Err(ExitStatus::ServerLost),
            Err(RecvTimeoutError::Timeout) if Instant::now() >= deadline => {
                debug!("event=link_lost reason=reply_timeout");
                return Err(ExitStatus::ServerLost);
            }
            Err(RecvTimeoutError::Timeout) => {}
        }
    }
}

fn connect(addr: &str, timeout: Duration) -> Option<TcpStream> {
    let addrs = addr.to_socket_addrs().ok()?;
    for a in addrs {
        if let Ok(s) = TcpStream::connect_timeout(&a, timeout) {
            let _ = s.set_nodelay(true);
            let _ = s.set_write_timeout(Some(timeout));
            return Some(s);
        }
    }
    None
}

fn spawn_reader(stream: TcpStream, link: Arc<Link>, last_ack: Arc<AtomicU64>, tx: Sender<Event>) {
    thread::spawn(move || {
        let mut reader = BufReader::new(stream);
        loop {
            match read_message(&mut reader) {
                Ok(Message::HeartbeatAck { seq }) => {
                    last_ack.fetch_max(seq, Ordering::SeqCst);
                }
                Ok(m) => {
                    if tx.send(Event::Reply(m)).is_err() {
                        return;
                    }
                }
                Err(_) => {
                    link.lost.store(true, Ordering::SeqCst);
                    let _ = tx.send(Event::Lost("connection_closed"));
                    return;
                }
            }
        }
    });
}

fn spawn_heartbeat(
    client_id: u64,
    link: Arc<Link>,
    last_ack: Arc<AtomicU64>,
    tx: Sender<Event>,
    interval: Duration,
    max_missed: u32,
) {
    thread::spawn(move || {
        let mut seq = 0u64;
        loop {
            if link.lost.load(Ordering::SeqCst) {
                return;
            }
            let missed = seq - last_ack.load(Ordering::SeqCst).min(seq);
            if missed >= max_missed.max(1) as u64 {
                link.lost.store(true, Ordering::SeqCst);
                let _ = tx.send(Event::Lost("heartbeats_unacked"));
                return;
            }
            seq += 1;
            if !link.send(&Message::Heartbeat { client_id, seq }) {
                link.lost.store(true, Ordering::SeqCst);
                let _ = tx.send(Event::Lost("heartbeat_write_failed"));
                return;
            }
            thread::sleep(interval);
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{is_poisoned, TaskFarm, TaskFarmKernel};

    #[test]
    fn compute_chunk_keeps_positions() {
        let tasks: Vec<_> = (0..4).map(|i| TaskFarm::task_payload(i, 100)).collect();
        let serial = compute_chunk(&TaskFarmKernel, &tasks, 1);
        let parallel = compute_chunk(&TaskFarmKernel, &tasks, 4);
        assert_eq!(serial.len(), 4);
        assert_eq!(serial, parallel);
    }

    #[test]
    fn malformed_task_is_poisoned() {
        let mut tasks: Vec<_> = (0..4).map(|i| TaskFarm::task_payload(i, 0)).collect();
        tasks[2] = vec![0x10, 1, 2];
        let out = compute_chunk(&TaskFarmKernel, &tasks, 3);
        assert_eq!(out.iter().filter(|r| is_poisoned(r)).count(), 1);
        assert!(is_poisoned(&out[2]));
    }

    #[test]
    fn request_size_defaults_to_twice_the_slots() {
        let cfg = ClientConfig {
            slots: 4,
            ..Default::default()
        };
        assert_eq!(cfg.request_size(), 8);
    }

    #[test]
    fn unreachable_server_is_lost() {
        let addr = std::net::TcpListener::bind("127.0.0.1:0")
            .unwrap()
            .local_addr()
            .unwrap();
        let cfg = ClientConfig {
            server_address: addr.to_string(),
            heartbeat_interval_ms: 50,
            ..Default::default()
        };
        let status = run_client(&cfg, Arc::new(TaskFarmKernel), Arc::default());
        assert_eq!(status, ExitStatus::ServerLost);
    }
}
