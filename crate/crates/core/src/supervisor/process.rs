//! Local stand-in for a batch system: fill-in jobs are child processes,
//! and "free cores" is a slot budget that can change while running.

use std::collections::{BTreeMap, VecDeque};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use log::{info, warn};

use super::{AdapterError, FillinState, QueuedJob, RunningJob, SchedulerAdapter};
use crate::sim::Secs;

struct Job {
    child: Child,
    size: u32,
    started: Secs,
    deadline: Secs,
}

pub struct ProcessAdapter {
    start: Instant,
    budget: Arc<AtomicU32>,
    program: String,
    /// Arguments; `{size}` is replaced by the job size.
    args: Vec<String>,
    queue: VecDeque<(u64, u32, Secs, Secs)>,
    running: BTreeMap<u64, Job>,
    next_id: u64,
    drained: bool,
    spawned: Vec<u32>,
    killed: u64,
}

impl ProcessAdapter {
    pub fn new(program: impl Into<String>, args: Vec<String>, budget: Arc<AtomicU32>) -> Self {
        ProcessAdapter {
            start: Instant::now(),
            budget,
            program: program.into(),
            args,
            queue: VecDeque::new(),
            running: BTreeMap::new(),
            next_id: 1,
            drained: false,
            spawned: Vec::new(),
            killed: 0,
        }
    }

    /// Pids of every process ever started.
    pub fn spawned_pids(&self) -> &[u32] {
        &self.spawned
    }

    /// Processes killed to honour the budget, a walltime or a cancel.
    pub fn killed(&self) -> u64 {
        self.killed
    }

    pub fn running_slots(&self) -> u32 {
        self.running.values().map(|j| j.size).sum()
    }

    pub fn running_jobs(&self) -> usize {
        self.running.len()
    }

    /// Reaps, enforces the budget and walltimes, and starts queued jobs.
    pub fn poll(&mut self) {
        let now = self.now();
        let mut exited = Vec::new();
        for (&id, job) in self.running.iter_mut() {
            if let Ok(Some(status)) = job.child.try_wait() {
                info!("event=client_exit job_id={id} pid={} status={status}", job.child.id());
                if status.success() {
                    self.drained = true;
                }
                exited.push(id);
            }
        }
        for id in exited {
            self.running.remove(&id);
        }
        let expired: Vec<u64> = self
            .running
            .iter()
            .filter(|(_, j)| j.deadline <= now)
            .map(|(&id, _)| id)
            .collect();
        for id in expired {
            self.kill(id, "walltime");
        }
        let budget = self.budget.load(Ordering::SeqCst);
        while self.running_slots() > budget {
            let victim = self
                .running
                .iter()
                .max_by_key(|(&id, j)| (j.size, j.started, id))
                .map(|(&id, _)| id)
                .expect("slots in use imply a running job");
            self.kill(victim, "preempted");
        }
        let mut i = 0;
        while i < self.queue.len() {
            let (id, size, walltime, _) = self.queue[i];
            if self.running_slots() + size <= budget {
                self.queue.remove(i);
                self.spawn(id, size, walltime);
            } else {
                i += 1;
            }
        }
    }

    /// Waits up to `grace` for every running process to exit on its own,
    /// then kills the rest. Returns the pids that had to be killed.
    pub fn shutdown(&mut self, grace: Duration) -> Vec<u32> {
        self.queue.clear();
        let deadline = Instant::now() + grace;
        while !self.running.is_empty() && Instant::now() < deadline {
            self.running.retain(|_, j| !matches!(j.child.try_wait(), Ok(Some(_))));
            thread::sleep(Duration::from_millis(20));
        }
        let mut survivors = Vec::new();
        for (_, mut job) in std::mem::take(&mut self.running) {
            survivors.push(job.child.id());
            let _ = job.child.kill();
            let _ = job.child.wait();
        }
        survivors
    }

    fn spawn(&mut self, id: u64, size: u32, walltime: Secs) {
        let args: Vec<String> = self
            .args
            .iter()
            .map(|a| a.replace("{size}", &size.to_string()))
            .collect();
        match Command::new(&self.program)
            .args(&args)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .spawn()
        {
            Ok(child) => {
                let now = self.now();
                info!("event=client_start job_id={id} pid={} size={size}", child.id());
                self.spawned.push(child.id());
                self.running.insert(
                    id,
                    Job {
                        child,
                        size,
                        started: now,
                        deadline: now + walltime,
                    },
                );
            }
            Err(e) => warn!("event=spawn_failed job_id={id} error={e}"),
        }
    }

    fn kill(&mut self, id: u64, reason: &str) {
        if let Some(mut job) = self.running.remove(&id) {
            info!("event=client_kill job_id={id} pid={} reason={reason}", job.child.id());
            let _ = job.child.kill();
            let _ = job.child.wait();
            self.killed += 1;
        }
    }
}

impl SchedulerAdapter for ProcessAdapter {
    fn query_state(&mut self) -> Result<FillinState, AdapterError> {
        self.poll();
        Ok(FillinState {
            now: self.now(),
            free_cores: self.budget.load(Ordering::SeqCst).saturating_sub(self.running_slots()),
            queued: self
                .queue
                .iter()
                .map(|&(job_id, size, _, submitted)| QueuedJob {
                    job_id,
                    size,
                    submitted,
                })
                .collect(),
            running: self
                .running
                .iter()
                .map(|(&job_id, j)| RunningJob {
                    job_id,
                    size: j.size,
                    started: j.started,
                })
                .collect(),
            next_reservation: None,
            drained: self.drained,
        })
    }

    fn submit(&mut self, size: u32, walltime: Secs) -> Result<u64, AdapterError> {
        let id = self.next_id;
        self.next_id += 1;
        self.queue.push_back((id, size.max(1), walltime, self.now()));
        self.poll();
        Ok(id)
    }

    fn cancel(&mut self, job_id: u64) -> Result<(), AdapterError> {
        self.queue.retain(|q| q.0 != job_id);
        self.kill(job_id, "cancelled");
        Ok(())
    }

    fn now(&self) -> Secs {
        self.start.elapsed().as_secs()
    }

    fn advance_to(&mut self, t: Secs) -> Result<(), AdapterError> {
        let target = self.start + Duration::from_secs(t);
        loop {
            self.poll();
            let now = Instant::now();
            if now >= target {
                return Ok(());
            }
            thread::sleep((target - now).min(Duration::from_millis(100)));
        }
    }
}
