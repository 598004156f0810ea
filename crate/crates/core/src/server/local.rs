//! In-process driver: a deterministic client loop against a [`FarmServer`]
//! with a logical clock. Used for reproducible runs and for checking the
//! ledger without sockets.

use super::{FarmServer, FetchOutcome, ServerError};
use crate::workload::{Kernel, Workload, POISONED_RESULT};

/// Totals of a [`drive_to_drain`] run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocalRun {
    pub chunks: u64,
    pub tasks: u64,
}

/// Registers one client and runs fetch, compute, submit until the server
/// reports it is drained. Each round advances the clock by one millisecond
/// and heartbeats, so the lease never lapses.
pub fn drive_to_drain<W: Workload, K: Kernel>(
    server: &mut FarmServer<W>,
    kernel: &K,
    max_tasks: u32,
) -> Result<LocalRun, ServerError> {
    let mut now = 0;
    let client = server.register_client(1, now)?.client_id;
    let mut run = LocalRun { chunks: 0, tasks: 0 };
    loop {
        now += 1;
        server.heartbeat(client, now, now)?;
        match server.fetch_chunk(client, max_tasks, now)? {
            FetchOutcome::Drained => return Ok(run),
            // a single client never has anything in flight at this point
            FetchOutcome::Retry => unreachable!("no other client holds work"),
            FetchOutcome::Chunk { chunk_id, tasks } => {
                let results = tasks
                    .iter()
                    .map(|t| kernel.compute(t).unwrap_or_else(|_| POISONED_RESULT.to_vec()))
                    .collect();
                server.submit_results(client, chunk_id, results, now)?;
                run.chunks += 1;
                run.tasks += tasks.len() as u64;
            }
        }
    }
}
