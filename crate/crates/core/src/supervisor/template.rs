//! Adapter for a real batch system driven through shell command templates.
//!
//! `submit` may use `{size}` and `{walltime}` (seconds) and must print the
//! new job id as the first integer on stdout. `cancel` may use `{job_id}`.
//! `query` must print lines of the form
//!
//! ```text
//! free <cores>
//! queued <job_id> <size> <submitted_s>
//! running <job_id> <size> <started_s>
//! reservation <start_s>
//! ```
//!
//! Unknown lines are ignored.

use std::process::Command;
use std::thread;
use std::time::{Duration, Instant};

use super::{AdapterError, FillinState, QueuedJob, RunningJob, SchedulerAdapter};
use crate::sim::Secs;

#[derive(Debug, Clone)]
pub struct TemplateAdapter {
    pub submit: String,
    pub cancel: String,
    pub query: String,
    start: Instant,
}

impl TemplateAdapter {
    pub fn new(submit: impl Into<String>, cancel: impl Into<String>, query: impl Into<String>) -> Self {
        TemplateAdapter {
            submit: submit.into(),
            cancel: cancel.into(),
            query: query.into(),
            start: Instant::now(),
        }
    }

    fn run(&self, cmd: &str) -> Result<String, AdapterError> {
        let out = Command::new("sh")
            .arg("-c")
            .arg(cmd)
            .output()
            .map_err(|e| AdapterError::Unavailable(format!("`{cmd}`: {e}")))?;
        if !out.status.success() {
            return Err(AdapterError::Unavailable(format!("`{cmd}` exited with {}", out.status)));
        }
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    }
}

pub fn parse_query_output(text: &str, now: Secs) -> FillinState {
    let mut state = FillinState {
        now,
        ..Default::default()
    };
    for line in text.lines() {
        let w: Vec<&str> = line.split_whitespace().collect();
        let num = |i: usize| w.get(i).and_then(|v| v.parse::<u64>().ok());
        match (w.first().copied(), num(1), num(2), num(3)) {
            (Some("free"), Some(free), _, _) => state.free_cores = free as u32,
            (Some("queued"), Some(job_id), Some(size), Some(submitted)) => state.queued.push(QueuedJob {
                job_id,
                size: size as u32,
                submitted,
            }),
            (Some("running"), Some(job_id), Some(size), Some(started)) => state.running.push(RunningJob {
                job_id,
                size: size as u32,
                started,
            }),
            (Some("reservation"), Some(start), _, _) => {
                state.next_reservation = Some(state.next_reservation.map_or(start, |r| r.min(start)))
            }
            _ => {}
        }
    }
    state
}

impl SchedulerAdapter for TemplateAdapter {
    fn query_state(&mut self) -> Result<FillinState, AdapterError> {
        Ok(parse_query_output(&self.run(&self.query)?, self.now()))
    }

    fn submit(&mut self, size: u32, walltime: Secs) -> Result<u64, AdapterError> {
        let cmd = self
            .submit
            .replace("{size}", &size.to_string())
            .replace("{walltime}", &walltime.to_string());
        let out = self.run(&cmd)?;
        out.split(|c: char| !c.is_ascii_digit())
            .find(|s| !s.is_empty())
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| AdapterError::Unavailable(format!("`{cmd}` printed no job id")))
    }

    fn cancel(&mut self, job_id: u64) -> Result<(), AdapterError> {
        self.run(&self.cancel.replace("{job_id}", &job_id.to_string()))
            .map(|_| ())
    }

    fn now(&self) -> Secs {
        self.start.elapsed().as_secs()
    }

    fn advance_to(&mut self, t: Secs) -> Result<(), AdapterError> {
        let target = self.start + Duration::from_secs(t);
        let now = Instant::now();
        if target > now {
            thread::sleep(target - now);
        }
        Ok(())
    }
}
