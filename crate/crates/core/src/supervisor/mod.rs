//! Keeps fill-in jobs supplied.
//!
//! The supervisor sees the world only through a [`SchedulerAdapter`] and
//! never talks to the farm server. Each [`tick`] looks at the current state
//! and acts on it without remembering anything from earlier ticks, so the
//! loop can be restarted at any time.

pub mod process;
pub mod template;

use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};

use log::{info, warn};
use thiserror::Error;

use crate::sim::{Engine, Secs};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueuedJob {
    pub job_id: u64,
    pub size: u32,
    pub submitted: Secs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunningJob {
    pub job_id: u64,
    pub size: u32,
    pub started: Secs,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FillinState {
    pub now: Secs,
    /// Idle capacity, in the same units as job sizes.
    pub free_cores: u32,
    pub queued: Vec<QueuedJob>,
    pub running: Vec<RunningJob>,
    pub next_reservation: Option<Secs>,
    /// The computation behind the fill-in jobs has finished.
    pub drained: bool,
}

impl FillinState {
    pub fn queued_of_size(&self, size: u32) -> u32 {
        self.queued.iter().filter(|q| q.size == size).count() as u32
    }

    pub fn running_of_size(&self, size: u32) -> u32 {
        self.running.iter().filter(|r| r.size == size).count() as u32
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AdapterError {
    #[error("scheduler unavailable: {0}")]
    Unavailable(String),
}

/// The supervisor's only window on the scheduler.
pub trait SchedulerAdapter {
    fn query_state(&mut self) -> Result<FillinState, AdapterError>;
    fn submit(&mut self, size: u32, walltime: Secs) -> Result<u64, AdapterError>;
    fn cancel(&mut self, job_id: u64) -> Result<(), AdapterError>;
    /// Seconds since the supervisor started.
    fn now(&self) -> Secs;
    /// Lets the world run until `t`.
    fn advance_to(&mut self, t: Secs) -> Result<(), AdapterError>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SupplyPolicy {
    /// Submit a fixed mix of `(size, count)` at the start; with `maintain`,
    /// replace lost jobs on every tick.
    StaticMix {
        mix: Vec<(u32, u32)>,
        walltime: Secs,
        maintain: bool,
    },
    /// Keep at least `min_queued` jobs of each size waiting.
    KeepQueued {
        sizes: Vec<u32>,
        min_queued: u32,
        walltime: Secs,
    },
    /// Size one job to the idle capacity every interval, ending before the
    /// next reservation; at the job cap, fold the smallest running job into
    /// a larger one.
    DynamicFit {
        interval: Secs,
        job_cap: u32,
        max_walltime: Secs,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionKind {
    Submit { job_id: u64, size: u32, walltime: Secs },
    Cancel { job_id: u64, size: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Action {
    pub t: Secs,
    pub kind: ActionKind,
    pub reason: &'static str,
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ActionKind::Submit { job_id, size, walltime } => write!(
                f,
                "t={} action=submit job_id={job_id} size={size} walltime_s={walltime} reason={}",
                self.t, self.reason
            ),
            ActionKind::Cancel { job_id, size } => write!(
                f,
                "t={} action=cancel job_id={job_id} size={size} reason={}",
                self.t, self.reason
            ),
        }
    }
}

struct Actor<'a, A: ?Sized> {
    adapter: &'a mut A,
    now: Secs,
    actions: Vec<Action>,
}

impl<A: SchedulerAdapter + ?Sized> Actor<'_, A> {
    fn submit(&mut self, size: u32, walltime: Secs, reason: &'static str) -> Result<(), AdapterError> {
        let job_id = self.adapter.submit(size, walltime)?;
        self.actions.push(Action {
            t: self.now,
            kind: ActionKind::Submit { job_id, size, walltime },
            reason,
        });
        Ok(())
    }

    fn cancel(&mut self, job_id: u64, size: u32, reason: &'static str) -> Result<(), AdapterError> {
        self.adapter.cancel(job_id)?;
        self.actions.push(Action {
            t: self.now,
            kind: ActionKind::Cancel { job_id, size },
            reason,
        });
        Ok(())
    }
}

/// Looks at the scheduler once and submits or cancels what `policy` asks
/// for. Actions already performed are returned even if a later adapter call
/// fails; the error is logged and the tick simply ends early.
pub fn tick<A: SchedulerAdapter + ?Sized>(policy: &SupplyPolicy, adapter: &mut A, now: Secs) -> Vec<Action> {
    let mut actor = Actor {
        adapter,
        now,
        actions: Vec::new(),
    };
    if let Err(e) = tick_inner(policy, &mut actor) {
        warn!("event=tick_failed t={now} error=\"{e}\"");
    }
    actor.actions
}

fn tick_inner<A: SchedulerAdapter + ?Sized>(
    policy: &SupplyPolicy,
    actor: &mut Actor<'_, A>,
) -> Result<(), AdapterError> {
    let state = actor.adapter.query_state()?;
    if state.drained {
        return Ok(());
    }
    let now = actor.now;
    match policy {
        SupplyPolicy::StaticMix {
            mix,
            walltime,
            maintain,
        } => {
            if now != 0 && !maintain {
                return Ok(());
            }
            for &(size, count) in mix {
                let have = state.queued_of_size(size) + state.running_of_size(size);
                for _ in have..count {
                    actor.submit(size, *walltime, "static_mix")?;
                }
            }
        }
        SupplyPolicy::KeepQueued {
            sizes,
            min_queued,
            walltime,
        } => {
            for &size in sizes {
                for _ in state.queued_of_size(size)..*min_queued {
                    actor.submit(size, *walltime, "keep_queued")?;
                }
            }
        }
        SupplyPolicy::DynamicFit {
            interval,
            job_cap,
            max_walltime,
        } => {
            // jobs still waiting a whole interval after submission were
            // sized for a state that no longer exists
            let mut queued = Vec::new();
            for q in &state.queued {
                if now >= q.submitted + interval {
                    actor.cancel(q.job_id, q.size, "stale")?;
                } else {
                    queued.push(*q);
                }
            }
            let queued_size: u32 = queued.iter().map(|q| q.size).sum();
            let free = state.free_cores.saturating_sub(queued_size);
            if free == 0 {
                return Ok(());
            }
            let walltime = match state.next_reservation {
                Some(r) => (*max_walltime).min(r.saturating_sub(now).saturating_sub(*interval)),
                None => *max_walltime,
            };
            if walltime == 0 {
                return Ok(());
            }
            let jobs = state.running.len() + queued.len();
            if jobs < *job_cap as usize {
                actor.submit(free, walltime, "dynamic_fit")?;
            } else if let Some(smallest) = state
                .running
                .iter()
                .min_by_key(|r| (r.size, std::cmp::Reverse(r.job_id)))
            {
                actor.cancel(smallest.job_id, smallest.size, "merge")?;
                actor.submit(smallest.size + free, walltime, "merge")?;
            }
        }
    }
    Ok(())
}

/// Ticks every `interval` from 0 until `horizon` (exclusive) or until
/// `stop` is set. Gives up after `retry_budget` consecutive failed queries.
pub fn run_supervisor<A: SchedulerAdapter + ?Sized>(
    policy: &SupplyPolicy,
    adapter: &mut A,
    interval: Secs,
    horizon: Secs,
    stop: &AtomicBool,
    retry_budget: u32,
) -> Vec<Action> {
    let mut log = Vec::new();
    let mut failures = 0;
    let mut t = 0;
    while t < horizon && !stop.load(Ordering::SeqCst) {
        match adapter.advance_to(t).and_then(|_| adapter.query_state()) {
            Ok(_) => {
                failures = 0;
                for a in tick(policy, adapter, t) {
                    info!("{a}");
                    log.push(a);
                }
            }
            Err(e) => {
                failures += 1;
                warn!("event=adapter_unavailable t={t} failures={failures} error=\"{e}\"");
                if failures > retry_budget {
                    warn!("event=supervisor_gave_up t={t}");
                    break;
                }
            }
        }
        t += interval.max(1);
    }
    log
}

pub fn format_log(actions: &[Action]) -> String {
    actions.iter().map(|a| format!("{a}\n")).collect()
}

/// Drives an in-process simulation.
pub struct SimAdapter<'a> {
    pub engine: &'a mut Engine,
    pub requeue: bool,
}

impl SchedulerAdapter for SimAdapter<'_> {
    fn query_state(&mut self) -> Result<FillinState, AdapterError> {
        let v = self.engine.view();
        Ok(FillinState {
            now: v.now,
            free_cores: v.free_units,
            queued: v
                .queued_fillin
                .iter()
                .map(|&(job_id, size, submitted)| QueuedJob {
                    job_id,
                    size,
                    submitted,
                })
                .collect(),
            running: v
                .running_fillin
                .iter()
                .map(|&(job_id, size, started)| RunningJob { job_id, size, started })
                .collect(),
            next_reservation: v.next_reservation,
            drained: false,
        })
    }

    fn submit(&mut self, size: u32, walltime: Secs) -> Result<u64, AdapterError> {
        Ok(self.engine.submit_fillin(size, walltime, self.requeue))
    }

    fn cancel(&mut self, job_id: u64) -> Result<(), AdapterError> {
        self.engine.cancel(job_id);
        Ok(())
    }

    fn now(&self) -> Secs {
        self.engine.now()
    }

    fn advance_to(&mut self, t: Secs) -> Result<(), AdapterError> {
        self.engine.advance_to(t);
        Ok(())
    }
}
