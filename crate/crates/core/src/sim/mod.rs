//! Deterministic discrete-event simulator of a batch cluster with two job
//! classes: fixed-size normal jobs scheduled first come, first served, and
//! preemptible fill-in jobs that only get cores nobody else wants.
//!
//! Time is kept in whole seconds. The machine is a pool of allocation units
//! (cores, or whole nodes for node-granular clusters); traces report cores.

pub mod config;
pub mod engine;
pub mod scenario;

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use thiserror::Error;

pub use config::{parse_config, BackgroundConfig, ClusterConfig, ConfigError, FillinConfig, PolicyKind, SimConfig};
pub use engine::{Engine, SimView};
pub use scenario::{builtin_scenario, load_scenario, run_scenario, ScenarioRun, BUILTIN_SCENARIOS};

/// Simulated seconds since the start of the run.
pub type Secs = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum JobClass {
    Normal,
    FillIn,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobSpec {
    pub job_id: u64,
    /// Allocation units requested.
    pub cores: u32,
    pub walltime: Secs,
    /// How long the job actually runs if left alone; never above `walltime`.
    pub runtime: Secs,
    pub submit_time: Secs,
    pub job_class: JobClass,
    pub requeue_on_preempt: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReservationKind {
    /// Takes `units` out of service, e.g. for administrative use.
    Mask { units: u32 },
    /// A job that needs the entire machine.
    Machine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Reservation {
    pub start: Secs,
    pub end: Secs,
    pub kind: ReservationKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadSample {
    pub t_min: u64,
    pub normal_cores: u64,
    pub fillin_cores: u64,
    pub capacity: u64,
}

impl LoadSample {
    pub fn total(&self) -> u64 {
        self.normal_cores + self.fillin_cores
    }
}

/// Mean of `(normal + fillin) / capacity` over samples with
/// `from <= t_min <= to`. Samples with zero capacity are skipped.
pub fn mean_utilization(samples: &[LoadSample], from: u64, to: u64) -> f64 {
    let ratios: Vec<f64> = samples
        .iter()
        .filter(|s| s.t_min >= from && s.t_min <= to && s.capacity > 0)
        .map(|s| s.total() as f64 / s.capacity as f64)
        .collect();
    if ratios.is_empty() {
        return 0.0;
    }
    ratios.iter().sum::<f64>() / ratios.len() as f64
}

pub const TRACE_HEADER: &str = "t_min,normal_cores,fillin_cores,capacity";

pub fn format_trace(samples: &[LoadSample]) -> String {
    let mut out = String::with_capacity(24 * (samples.len() + 1));
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for s in samples {
        out.push_str(&format!(
            "{},{},{},{}\n",
            s.t_min, s.normal_cores, s.fillin_cores, s.capacity
        ));
    }
    out
}

pub fn write_trace(samples: &[LoadSample], path: &Path) -> io::Result<()> {
    let annotate = |e: io::Error| io::Error::new(e.kind(), format!("{}: {e}", path.display()));
    let mut w = BufWriter::new(File::create(path).map_err(annotate)?);
    w.write_all(format_trace(samples).as_bytes()).map_err(annotate)?;
    w.flush().map_err(annotate)
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("row {row}: {message}")]
    Parse { row: usize, message: String },
}

pub fn parse_trace(text: &str) -> Result<Vec<LoadSample>, TraceError> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == TRACE_HEADER => {}
        _ => {
            return Err(TraceError::Parse {
                row: 1,
                message: format!("expected header `{TRACE_HEADER}`"),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(TraceError::Parse {
                row,
                message: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let mut v = [0u64; 4];
        for (slot, f) in v.iter_mut().zip(&fields) {
            *slot = f.trim().parse().map_err(|_| TraceError::Parse {
                row,
                message: format!("`{f}` is not a non-negative integer"),
            })?;
        }
        out.push(LoadSample {
            t_min: v[0],
            normal_cores: v[1],
            fillin_cores: v[2],
            capacity: v[3],
        });
    }
    Ok(out)
}

pub fn read_trace(path: &Path) -> Result<Vec<LoadSample>, TraceError> {
    let io_err = |source| TraceError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut text = String::new();
    for line in BufReader::new(File::open(path).map_err(io_err)?).lines() {
        text.push_str(&line.map_err(io_err)?);
        text.push('\n');
    }
    parse_trace(&text)
}

/// Poisson stream of normal jobs with sizes, walltimes and runtimes drawn
/// from `bg`. Job ids count up from `first_id` in submission order.
pub fn background_mix(seed: u64, bg: &BackgroundConfig, horizon: Secs, first_id: u64) -> Vec<JobSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jobs = Vec::new();
    let mut next_id = first_id;
    let mut make = |rng: &mut ChaCha8Rng, submit_time: Secs| {
        let cores = bg.draw_size(rng);
        let wall_min = rng.random_range(bg.walltime_min_min..=bg.walltime_max_min);
        let walltime = wall_min * 60;
        let fraction = if bg.runtime_fraction_min < bg.runtime_fraction_max {
            rng.random_range(bg.runtime_fraction_min..=bg.runtime_fraction_max)
        } else {
            bg.runtime_fraction_max
        };
        let runtime = ((walltime as f64 * fraction).round() as Secs).clamp(1, walltime);
        let job = JobSpec {
            job_id: next_id,
            cores,
            walltime,
            runtime,
            submit_time,
            job_class: JobClass::Normal,
            requeue_on_preempt: false,
        };
        next_id += 1;
        job
    };
    for _ in 0..bg.initial_jobs {
        jobs.push(make(&mut rng, 0));
    }
    if bg.rate_per_hour > 0.0 {
        let gaps = Exp::new(bg.rate_per_hour / 3600.0).expect("rate validated by the config parser");
        let mut t = 0.0f64;
        loop {
            t += gaps.sample(&mut rng);
            if t >= horizon as f64 {
                break;
            }
            let job = make(&mut rng, t as Secs);
            jobs.push(job);
        }
    }
    jobs
}
