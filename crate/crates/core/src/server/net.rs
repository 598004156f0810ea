//! TCP front end for [`FarmServer`].
//!
//! One thread per connection reads frames, applies them to the shared state
//! under a single mutex and writes the reply after releasing it. A control
//! loop on the calling thread sweeps expired leases, dumps workload state
//! and decides when to stop.

use std::collections::HashMap;
use std::io::{self, BufReader};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, info, warn};

use super::{FarmServer, FetchOutcome, LedgerCounts, Millis, ServerError};
use crate::protocol::{read_message, write_message, Message, ShutdownReason, StreamError};
use crate::workload::Workload;

/// Cloneable flag that asks a running server to stop.
#[derive(Debug, Clone, Default)]
pub struct StopHandle(Arc<AtomicBool>);

impl StopHandle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn stop(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_stopped(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }

    /// The underlying flag, e.g. for registering with a signal handler.
    pub fn flag(&self) -> Arc<AtomicBool> {
        self.0.clone()
    }
}

#[derive(Debug, Clone, Default)]
pub struct NetOptions {
    /// Directory for periodic workload dumps (`dump_0000`, `dump_0001`, ...).
    pub dump_dir: Option<PathBuf>,
    pub dump_every: Option<Duration>,
    /// Refreshed after every sweep while serving.
    pub status: Option<Arc<Mutex<ServeStatus>>>,
}

/// What an observer can see of a running server.
#[derive(Debug, Clone, Default)]
pub struct ServeStatus {
    pub live_clients: usize,
    pub live_slots: u32,
    pub counts: LedgerCounts,
    pub report: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServeOutcome {
    /// Every task was completed or dropped.
    Drained,
    /// Stopped from outside before the work ran out.
    Stopped,
}

type Writer = Arc<Mutex<TcpStream>>;

struct Shared<W> {
    state: Mutex<FarmServer<W>>,
    conns: Mutex<HashMap<u64, Writer>>,
    closing: AtomicBool,
    next_conn: AtomicU64,
    start: Instant,
}

impl<W> Shared<W> {
    fn now(&self) -> Millis {
        self.start.elapsed().as_millis() as Millis
    }

    fn lock(&self) -> MutexGuard<'_, FarmServer<W>> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }
}

/// Runs the server on `listener` until it drains or `stop` is raised, then
/// notifies every live connection, closes the endpoint and hands the final
/// state back.
pub fn serve<W: Workload + 'static>(
    listener: TcpListener,
    server: FarmServer<W>,
    stop: StopHandle,
    opts: NetOptions,
) -> io::Result<(ServeOutcome, FarmServer<W>)> {
    let sweep = Duration::from_millis(server.config().heartbeat_sweep_ms.clamp(5, 1000));
    let shared = Arc::new(Shared {
        state: Mutex::new(server),
        conns: Mutex::new(HashMap::new()),
        closing: AtomicBool::new(false),
        next_conn: AtomicU64::new(1),
        start: Instant::now(),
    });
    info!("event=listen addr={}", listener.local_addr()?);
    listener.set_nonblocking(true)?;
    let workers: Arc<Mutex<Vec<JoinHandle<()>>>> = Arc::default();
    let acceptor = {
        let shared = shared.clone();
        let workers = workers.clone();
        thread::Builder::new()
            .name("accept".into())
            .spawn(move || accept_loop(listener, shared, workers))?
    };

    let mut dumps = 0u32;
    let mut last_dump = Instant::now();
    let outcome = loop {
        thread::sleep(sweep);
        let now = shared.now();
        let drained = {
            let mut state = shared.lock();
            state.sweep_expired(now);
            if let Some(status) = &opts.status {
                let snapshot = ServeStatus {
                    live_clients: state.live_clients(),
                    live_slots: state.live_slots(),
                    counts: state.counts(),
                    report: state.report(),
                };
                *status.lock().unwrap_or_else(|e| e.into_inner()) = snapshot;
            }
            state.is_drained()
        };
        if let (Some(dir), Some(every)) = (&opts.dump_dir, opts.dump_every) {
            if last_dump.elapsed() >= every {
                last_dump = Instant::now();
                dump(&shared, &dir.join(format!("dump_{dumps:04}")));
                dumps += 1;
            }
        }
        if drained {
            let state = shared.lock();
            info!("event=drain {}", state.report());
            break ServeOutcome::Drained;
        }
        if stop.is_stopped() {
            break ServeOutcome::Stopped;
        }
    };

    shared.lock().shutdown();
    shared.closing.store(true, Ordering::SeqCst);
    let _ = acceptor.join();
    let conns: Vec<Writer> = shared.conns.lock().unwrap().drain().map(|(_, w)| w).collect();
    for w in conns {
        let mut stream = w.lock().unwrap_or_else(|e| e.into_inner());
        let _ = write_message(
            &mut *stream,
            &Message::ShutdownNotice {
                reason: ShutdownReason::ServerStopping,
            },
        );
        let _ = stream.shutdown(Shutdown::Both);
    }
    for h in std::mem::take(&mut *workers.lock().unwrap()) {
        let _ = h.join();
    }
    if let Some(dir) = &opts.dump_dir {
        dump(&shared, &dir.join("final"));
    }
    let shared = Arc::try_unwrap(shared).map_err(|_| io::Error::other("connection threads still running"))?;
    let server = shared.state.into_inner().unwrap_or_else(|e| e.into_inner());
    info!("event=stopped outcome={outcome:?} {}", server.report());
    Ok((outcome, server))
}

fn dump<W: Workload>(shared: &Shared<W>, dir: &std::path::Path) {
    let result = std::fs::create_dir_all(dir).and_then(|_| shared.lock().workload().dump(dir));
    match result {
        Ok(()) => info!("event=dump dir={}", dir.display()),
        Err(e) => warn!("event=dump_failed dir={} error={e}", dir.display()),
    }
}

fn accept_loop<W: Workload + 'static>(
    listener: TcpListener,
    shared: Arc<Shared<W>>,
    workers: Arc<Mutex<Vec<JoinHandle<()>>>>,
) {
    while !shared.closing.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                if let Err(e) = start_connection(stream, &shared, &workers) {
                    warn!("event=connection_failed peer={peer} error={e}");
                }
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(10)),
            Err(e) => {
                warn!("event=accept_failed error={e}");
                thread::sleep(Duration::from_millis(50));
            }
        }
    }
}

fn start_connection<W: Workload + 'static>(
    stream: TcpStream,
    shared: &Arc<Shared<W>>,
    workers: &Mutex<Vec<JoinHandle<()>>>,
) -> io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    stream.set_write_timeout(Some(Duration::from_secs(5)))?;
    let writer: Writer = Arc::new(Mutex::new(stream.try_clone()?));
    let conn_id = shared.next_conn.fetch_add(1, Ordering::SeqCst);
    shared.conns.lock().unwrap().insert(conn_id, writer.clone());
    let shared = shared.clone();
    let handle = thread::Builder::new().name(format!("conn-{conn_id}")).spawn(move || {
        connection_loop(stream, &writer, &shared);
        shared.conns.lock().unwrap().remove(&conn_id);
    })?;
    let mut workers = workers.lock().unwrap();
    workers.retain(|h| !h.is_finished());
    workers.push(handle);
    Ok(())
}

fn connection_loop<W: Workload>(stream: TcpStream, writer: &Writer, shared: &Shared<W>) {
    let mut reader = BufReader::new(stream);
    let mut client: Option<u64> = None;
    loop {
        let msg = match read_message(&mut reader) {
            Ok(m) => m,
            Err(StreamError::Closed) => return,
            Err(e) => {
                debug!("event=connection_closed error={e}");
                return;
            }
        };
        let (reply, close) = respond(shared, &mut client, msg);
        if let Some(reply) = reply {
            let mut w = writer.lock().unwrap_or_else(|e| e.into_inner());
            if write_message(&mut *w, &reply).is_err() {
                return;
            }
            if close {
                let _ = w.shutdown(Shutdown::Both);
            }
        }
        if close {
            return;
        }
    }
}

/// Computes the reply to one frame under the state lock. The second value
/// says whether the connection should be closed after replying. `client`
/// is the id this connection registered under; result chunks carry no id of
/// their own.
fn respond<W: Workload>(shared: &Shared<W>, client: &mut Option<u64>, msg: Message) -> (Option<Message>, bool) {
    let now = shared.now();
    let mut state = shared.lock();
    let rejected = (
        Some(Message::ShutdownNotice {
            reason: ShutdownReason::Rejected,
        }),
        true,
    );
    let stopping = (
        Some(Message::ShutdownNotice {
            reason: ShutdownReason::ServerStopping,
        }),
        true,
    );
    match msg {
        Message::ClientHello { requested_slots } => match state.register_client(requested_slots, now) {
            Ok(ack) => {
                *client = Some(ack.client_id);
                (
                    Some(Message::HelloAck {
                        client_id: ack.client_id,
                        lease_ms: ack.lease_ms,
                        chunk_max: ack.chunk_max,
                    }),
                    false,
                )
            }
            Err(_) => rejected,
        },
        Message::ChunkRequest { client_id, max_tasks } => match state.fetch_chunk(client_id, max_tasks, now) {
            Ok(FetchOutcome::Chunk { chunk_id, tasks }) => (Some(Message::TaskChunk { chunk_id, tasks }), false),
            Ok(FetchOutcome::Retry) => (
                Some(Message::TaskChunk {
                    chunk_id: 0,
                    tasks: vec![],
                }),
                false,
            ),
            Ok(FetchOutcome::Drained) => (Some(Message::Drained), false),
            Err(ServerError::Rejected) => stopping,
            Err(_) => rejected,
        },
        Message::ResultChunk { chunk_id, results } => {
            let client_id = client.unwrap_or(0);
            match state.submit_results(client_id, chunk_id, results, now) {
                Ok(id) => (Some(Message::ResultAck { chunk_id: id }), false),
                Err(e) => {
                    info!("event=result_refused client_id={client_id} chunk_id={chunk_id} reason=\"{e}\"");
                    rejected
                }
            }
        }
        Message::Heartbeat { client_id, seq } => match state.heartbeat(client_id, seq, now) {
            Ok(seq) => (Some(Message::HeartbeatAck { seq }), false),
            Err(_) => rejected,
        },
        other => {
            warn!("event=protocol_violation tag={:#04x}", other.tag());
            (None, true)
        }
    }
}
