//! The seam between the farm and the computation it distributes.
//!
//! The server sees a [`Workload`]: a task source and a result sink. Clients
//! see a [`Kernel`]: a pure function from task blob to result blob. The farm
//! itself never looks inside the blobs.

use std::io;
use std::path::Path;
use std::time::Duration;

use thiserror::Error;

use crate::ea::{self, payload::PAYLOAD_VERSION as EA_FORMAT};
use crate::protocol::{ResultPayload, TaskPayload};

/// First byte of a task-farm payload. EA payloads start with their own
/// version byte, so a client can tell the two apart without configuration.
pub const TASKFARM_FORMAT: u8 = 0x10;

/// Result blob returned for a task whose payload could not be processed.
pub const POISONED_RESULT: &[u8] = &[0xFF];

pub fn is_poisoned(result: &[u8]) -> bool {
    result == POISONED_RESULT
}

/// Server-side task source and result sink.
pub trait Workload: Send {
    /// Whether every task can be generated up front. Task-farm queues are
    /// filled at startup; EA tasks depend on the pool at dispatch time.
    fn prefill(&self) -> bool {
        false
    }

    /// Next task, or `None` once the budget is spent.
    fn generate(&mut self) -> Option<TaskPayload>;

    fn absorb(&mut self, task: &TaskPayload, result: &ResultPayload);

    /// One-line `key=value` summary for the lifecycle log.
    fn report(&self) -> String;

    fn dump(&self, _dir: &Path) -> io::Result<()> {
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KernelError {
    #[error("empty task payload")]
    Empty,
    #[error("unknown task format byte {0:#04x}")]
    UnknownFormat(u8),
    #[error("malformed task payload: {0}")]
    Malformed(String),
}

/// Client-side computation: pure per task.
pub trait Kernel: Sync {
    fn compute(&self, task: &[u8]) -> Result<ResultPayload, KernelError>;
}

/// Dispatches on the payload's format byte to the task-farm or EA kernel.
#[derive(Debug, Clone, Default)]
pub struct AnyKernel {
    pub ea: ea::EaKernel,
}

impl Kernel for AnyKernel {
    fn compute(&self, task: &[u8]) -> Result<ResultPayload, KernelError> {
        match task.first() {
            None => Err(KernelError::Empty),
            Some(&TASKFARM_FORMAT) => TaskFarmKernel.compute(task),
            Some(&EA_FORMAT) => self.ea.compute(task),
            Some(&b) => Err(KernelError::UnknownFormat(b)),
        }
    }
}

/// Synthetic independent tasks: `[1B format][8B task_id][4B work_us]`.
/// The result `[1B format][8B task_id][8B digest]` depends only on the id;
/// `work_us` is time the client spends on the task before answering.
#[derive(Debug)]
pub struct TaskFarm {
    total: u64,
    work_us: u32,
    issued: u64,
    seen: Vec<u32>,
    completed: u64,
    duplicates: u64,
    bad_results: u64,
}

impl TaskFarm {
    pub fn new(total: u64, work_us: u32) -> Self {
        TaskFarm {
            total,
            work_us,
            issued: 0,
            seen: vec![0; total as usize],
            completed: 0,
            duplicates: 0,
            bad_results: 0,
        }
    }

    pub fn completed(&self) -> u64 {
        self.completed
    }

    /// Results delivered for a task id that had already been absorbed.
    pub fn duplicates(&self) -> u64 {
        self.duplicates
    }

    pub fn bad_results(&self) -> u64 {
        self.bad_results
    }

    pub fn task_payload(task_id: u64, work_us: u32) -> TaskPayload {
        let mut out = vec![TASKFARM_FORMAT];
        out.extend_from_slice(&task_id.to_be_bytes());
        out.extend_from_slice(&work_us.to_be_bytes());
        out
    }

    pub fn digest(task_id: u64) -> u64 {
        (0..64).fold(task_id, |h, _| ea::splitmix64(h))
    }

    fn parse_id(bytes: &[u8], len: usize) -> Option<u64> {
        if bytes.len() != len || bytes[0] != TASKFARM_FORMAT {
            return None;
        }
        Some(u64::from_be_bytes(bytes[1..9].try_into().unwrap()))
    }
}

impl Workload for TaskFarm {
    fn prefill(&self) -> bool {
        true
    }

    fn generate(&mut self) -> Option<TaskPayload> {
        if self.issued >= self.total {
            return None;
        }
        let id = self.issued;
        self.issued += 1;
        Some(Self::task_payload(id, self.work_us))
    }

    fn absorb(&mut self, task: &TaskPayload, result: &ResultPayload) {
        let (Some(id), Some(rid)) = (Self::parse_id(task, 13), Self::parse_id(result, 17)) else {
            self.bad_results += 1;
            return;
        };
        let digest = u64::from_be_bytes(result[9..17].try_into().unwrap());
        if id != rid || digest != Self::digest(id) || id >= self.total {
            self.bad_results += 1;
            return;
        }
        let slot = &mut self.seen[id as usize];
        *slot += 1;
        if *slot == 1 {
            self.completed += 1;
        } else {
            self.duplicates += 1;
        }
    }

    fn report(&self) -> String {
        format!(
            "mode=taskfarm tasks_done={} duplicates={} bad_results={}",
            self.completed, self.duplicates, self.bad_results
        )
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TaskFarmKernel;

impl Kernel for TaskFarmKernel {
    fn compute(&self, task: &[u8]) -> Result<ResultPayload, KernelError> {
        if task.len() != 13 || task[0] != TASKFARM_FORMAT {
            return Err(KernelError::Malformed(format!(
                "task-farm task of {} bytes",
                task.len()
            )));
        }
        let id = u64::from_be_bytes(task[1..9].try_into().unwrap());
        let work_us = u32::from_be_bytes(task[9..13].try_into().unwrap());
        // simulated work: the answer does not depend on it
        std::thread::sleep(Duration::from_micros(work_us as u64));
        let digest = TaskFarm::digest(id);
        let mut out = vec![TASKFARM_FORMAT];
        out.extend_from_slice(&id.to_be_bytes());
        out.extend_from_slice(&digest.to_be_bytes());
        Ok(out)
    }
}
