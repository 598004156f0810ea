//! The farm server: task ledger, client leases and the loss policy.
//!
//! [`FarmServer`] is a plain state machine with explicit timestamps; every
//! operation is a single mutation, so wrapping it in one mutex gives the
//! linearizable ledger the network layer in [`net`] relies on.

pub mod local;
pub mod net;

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use log::info;
use thiserror::Error;

use crate::protocol::{ResultPayload, TaskPayload};
use crate::workload::Workload;

/// Milliseconds since server start.
pub type Millis = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossPolicy {
    /// Tasks held by a lost client go back to the end of the queue.
    Reschedule,
    /// Tasks held by a lost client are written off.
    Drop,
}

impl fmt::Display for LossPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossPolicy::Reschedule => "reschedule",
            LossPolicy::Drop => "drop",
        })
    }
}

impl FromStr for LossPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "reschedule" => Ok(LossPolicy::Reschedule),
            "drop" => Ok(LossPolicy::Drop),
            other => Err(format!("unknown loss policy `{other}` (expected reschedule or drop)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub lease_ms: Millis,
    pub chunk_max: u32,
    pub loss_policy: LossPolicy,
    pub heartbeat_sweep_ms: Millis,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            lease_ms: 5000,
            chunk_max: 8,
            loss_policy: LossPolicy::Reschedule,
            heartbeat_sweep_ms: 250,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientLease {
    pub client_id: u64,
    pub deadline: Millis,
    pub outstanding_chunks: BTreeSet<u64>,
    pub slots: u32,
}

#[derive(Debug, Clone)]
struct Task {
    payload: TaskPayload,
}

#[derive(Debug, Default)]
struct TaskLedger {
    pending: VecDeque<Task>,
    in_flight: BTreeMap<u64, (u64, Vec<Task>)>,
    completed: u64,
    dropped: u64,
    generated: u64,
}

/// Snapshot of where every generated task currently is.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LedgerCounts {
    pub pending: u64,
    pub in_flight: u64,
    pub completed: u64,
    pub dropped: u64,
    pub generated: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HelloAck {
    pub client_id: u64,
    pub lease_ms: Millis,
    pub chunk_max: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FetchOutcome {
    Chunk {
        chunk_id: u64,
        tasks: Vec<TaskPayload>,
    },
    /// Nothing to hand out right now, but rescheduled work may still appear.
    Retry,
    Drained,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ServerError {
    #[error("client {0} holds no lease")]
    UnknownClient(u64),
    #[error("lease of client {0} expired")]
    LeaseExpired(u64),
    #[error("chunk {0} is not outstanding")]
    UnknownChunk(u64),
    #[error("server is shutting down")]
    Rejected,
    #[error("chunk {chunk_id} carried {got} results for {expected} tasks")]
    ResultCountMismatch { chunk_id: u64, expected: usize, got: usize },
}

pub struct FarmServer<W> {
    cfg: ServerConfig,
    workload: W,
    leases: BTreeMap<u64, ClientLease>,
    ledger: TaskLedger,
    /// chunk id -> client that had it acknowledged
    acked: HashMap<u64, u64>,
    next_client_id: u64,
    next_chunk_id: u64,
    exhausted: bool,
    stopping: bool,
    expirations: u64,
}

impl<W: Workload> FarmServer<W> {
    pub fn new(cfg: ServerConfig, mut workload: W) -> Self {
        let mut ledger = TaskLedger::default();
        let mut exhausted = false;
        if workload.prefill() {
            while let Some(payload) = workload.generate() {
                ledger.pending.push_back(Task { payload });
                ledger.generated += 1;
            }
            exhausted = true;
        }
        FarmServer {
            cfg,
            workload,
            leases: BTreeMap::new(),
            ledger,
            acked: HashMap::new(),
            next_client_id: 1,
            next_chunk_id: 1,
            exhausted,
            stopping: false,
            expirations: 0,
        }
    }

    pub fn config(&self) -> &ServerConfig {
        &self.cfg
    }

    pub fn workload(&self) -> &W {
        &self.workload
    }

    pub fn counts(&self) -> LedgerCounts {
        LedgerCounts {
            pending: self.ledger.pending.len() as u64,
            in_flight: self.ledger.in_flight.values().map(|(_, t)| t.len() as u64).sum(),
            completed: self.ledger.completed,
            dropped: self.ledger.dropped,
            generated: self.ledger.generated,
        }
    }

    pub fn lease(&self, client_id: u64) -> Option<&ClientLease> {
        self.leases.get(&client_id)
    }

    pub fn live_clients(&self) -> usize {
        self.leases.len()
    }

    /// Slots announced by the clients holding a live lease.
    pub fn live_slots(&self) -> u32 {
        self.leases.values().map(|l| l.slots).sum()
    }

    /// Leases expired so far.
    pub fn expirations(&self) -> u64 {
        self.expirations
    }

    pub fn is_stopping(&self) -> bool {
        self.stopping
    }

    pub fn register_client(&mut self, requested_slots: u32, now: Millis) -> Result<HelloAck, ServerError> {
        if self.stopping {
            return Err(ServerError::Rejected);
        }
        let client_id = self.next_client_id;
        self.next_client_id += 1;
        let deadline = now + self.cfg.lease_ms;
        self.leases.insert(
            client_id,
            ClientLease {
                client_id,
                deadline,
                outstanding_chunks: BTreeSet::new(),
                slots: requested_slots,
            },
        );
        info!("event=register client_id={client_id} slots={requested_slots} deadline_ms={deadline}");
        Ok(HelloAck {
            client_id,
            lease_ms: self.cfg.lease_ms,
            chunk_max: self.cfg.chunk_max,
        })
    }

    /// Hands out up to `min(max_tasks, chunk_max)` pending tasks.
    pub fn fetch_chunk(&mut self, client_id: u64, max_tasks: u32, now: Millis) -> Result<FetchOutcome, ServerError> {
        if self.stopping {
            return Err(ServerError::Rejected);
        }
        self.live_lease(client_id, now)?;
        let want = max_tasks.clamp(1, self.cfg.chunk_max.max(1)) as usize;
        self.top_up(want);
        if self.ledger.pending.is_empty() {
            let more_may_return = self.cfg.loss_policy == LossPolicy::Reschedule && !self.ledger.in_flight.is_empty();
            return Ok(if more_may_return {
                FetchOutcome::Retry
            } else {
                FetchOutcome::Drained
            });
        }
        let take = want.min(self.ledger.pending.len());
        let tasks: Vec<Task> = self.ledger.pending.drain(..take).collect();
        let chunk_id = self.next_chunk_id;
        self.next_chunk_id += 1;
        let payloads = tasks.iter().map(|t| t.payload.clone()).collect();
        self.ledger.in_flight.insert(chunk_id, (client_id, tasks));
        self.leases
            .get_mut(&client_id)
            .expect("lease checked above")
            .outstanding_chunks
            .insert(chunk_id);
        Ok(FetchOutcome::Chunk {
            chunk_id,
            tasks: payloads,
        })
    }

    /// Absorbs the results of an outstanding chunk exactly once.
    pub fn submit_results(
        &mut self,
        client_id: u64,
        chunk_id: u64,
        results: Vec<ResultPayload>,
        now: Millis,
    ) -> Result<u64, ServerError> {
        if client_id == 0 || client_id >= self.next_client_id {
            return Err(ServerError::UnknownClient(client_id));
        }
        if self.acked.get(&chunk_id) == Some(&client_id) {
            return Ok(chunk_id);
        }
        match self.ledger.in_flight.get(&chunk_id) {
            Some((owner, tasks)) if *owner == client_id => {
                if results.len() != tasks.len() {
                    return Err(ServerError::ResultCountMismatch {
                        chunk_id,
                        expected: tasks.len(),
                        got: results.len(),
                    });
                }
            }
            _ => return Err(ServerError::UnknownChunk(chunk_id)),
        }
        self.live_lease(client_id, now)?;
        let (_, tasks) = self.ledger.in_flight.remove(&chunk_id).expect("checked above");
        for (task, result) in tasks.iter().zip(&results) {
            self.workload.absorb(&task.payload, result);
        }
        self.ledger.completed += tasks.len() as u64;
        if let Some(lease) = self.leases.get_mut(&client_id) {
            lease.outstanding_chunks.remove(&chunk_id);
        }
        self.acked.insert(chunk_id, client_id);
        Ok(chunk_id)
    }

    pub fn heartbeat(&mut self, client_id: u64, seq: u64, now: Millis) -> Result<u64, ServerError> {
        self.live_lease(client_id, now)
            .map_err(|_| ServerError::UnknownClient(client_id))?;
        let lease = self.leases.get_mut(&client_id).expect("lease checked above");
        lease.deadline = now + self.cfg.lease_ms;
        Ok(seq)
    }

    /// Removes every lease whose deadline has passed and applies the loss
    /// policy to the chunks it held.
    pub fn sweep_expired(&mut self, now: Millis) -> Vec<u64> {
        let expired: Vec<u64> = self
            .leases
            .values()
            .filter(|l| l.deadline <= now)
            .map(|l| l.client_id)
            .collect();
        for &id in &expired {
            self.expire(id);
        }
        expired
    }

    /// Stops dispensing work; later hellos and fetches are rejected.
    pub fn shutdown(&mut self) {
        if !self.stopping {
            self.stopping = true;
            let c = self.counts();
            info!(
                "event=shutdown live_clients={} pending={} in_flight={} completed={} dropped={}",
                self.leases.len(),
                c.pending,
                c.in_flight,
                c.completed,
                c.dropped
            );
        }
    }

    /// True once the budget is spent and every generated task is either
    /// completed or dropped.
    pub fn is_drained(&mut self) -> bool {
        if !self.ledger.pending.is_empty() || !self.ledger.in_flight.is_empty() {
            return false;
        }
        self.top_up(1);
        self.ledger.pending.is_empty() && self.exhausted
    }

    pub fn report(&self) -> String {
        let c = self.counts();
        format!(
            "pending={} in_flight={} completed={} dropped={} generated={} {}",
            c.pending,
            c.in_flight,
            c.completed,
            c.dropped,
            c.generated,
            self.workload.report()
        )
    }

    fn top_up(&mut self, want: usize) {
        while !self.exhausted && self.ledger.pending.len() < want {
            match self.workload.generate() {
                Some(payload) => {
                    self.ledger.pending.push_back(Task { payload });
                    self.ledger.generated += 1;
                }
                None => self.exhausted = true,
            }
        }
    }

    /// Checks the lease, expiring it on the spot if its deadline passed.
    fn live_lease(&mut self, client_id: u64, now: Millis) -> Result<(), ServerError> {
        match self.leases.get(&client_id) {
            None => Err(ServerError::UnknownClient(client_id)),
            Some(l) if l.deadline <= now => {
                self.expire(client_id);
                Err(ServerError::LeaseExpired(client_id))
            }
            Some(_) => Ok(()),
        }
    }

    fn expire(&mut self, client_id: u64) {
        let Some(lease) = self.leases.remove(&client_id) else {
            return;
        };
        self.expirations += 1;
        let mut lost = 0u64;
        for chunk_id in &lease.outstanding_chunks {
            if let Some((_, tasks)) = self.ledger.in_flight.remove(chunk_id) {
                lost += tasks.len() as u64;
                match self.cfg.loss_policy {
                    LossPolicy::Reschedule => self.ledger.pending.extend(tasks),
                    LossPolicy::Drop => self.ledger.dropped += tasks.len() as u64,
                }
            }
        }
        info!(
            "event=expire client_id={client_id} chunks={} tasks={lost} policy={}",
            lease.outstanding_chunks.len(),
            self.cfg.loss_policy
        );
    }
}
