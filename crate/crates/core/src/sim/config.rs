//! Scenario files: line-oriented `[section]` headers with `key = value`
//! pairs and `#` comments.
//!
//! ```text
//! [cluster]
//! units = 744              # allocation units (cores or nodes)
//! cores_per_unit = 24
//! dispatch_latency_s = 60  # scheduler reaction time
//! horizon_min = 1100
//! fillin_job_cap = 24      # optional limit on running fill-in jobs
//!
//! [background]
//! rate_per_hour = 14
//! initial_jobs = 120
//! sizes = 1,2,4,8,16,32
//! size_weights = 6,5,4,3,2,1
//! walltime_min_min = 510
//! walltime_max_min = 510
//! runtime_fraction_min = 0.1
//! runtime_fraction_max = 1.0
//!
//! [fillin]
//! policy = dynamic         # off | static | keep | dynamic
//! sizes = 1,4,8            # static and keep
//! counts = 40,20,30        # static
//! min_queued = 5           # keep
//! maintain = false         # static: refill losses on every tick
//! interval_s = 60
//! walltime_min = 240       # longest fill-in walltime
//! requeue = false          # preempted fill-in jobs go back to the queue
//!
//! [reservations]
//! admin = mask 0 200 40    # name = mask <start_min> <end_min> <units>
//! drain = machine 1010 1020
//! ```

use std::collections::HashSet;

use rand::Rng;
use thiserror::Error;

use super::{Reservation, ReservationKind, Secs};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("line {line} [{section}]: {message}")]
pub struct ConfigError {
    pub line: usize,
    pub section: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterConfig {
    pub units: u32,
    pub cores_per_unit: u32,
    pub dispatch_latency_s: Secs,
    pub horizon_min: u64,
    pub fillin_job_cap: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundConfig {
    pub rate_per_hour: f64,
    pub initial_jobs: u32,
    pub sizes: Vec<u32>,
    pub size_weights: Vec<f64>,
    pub walltime_min_min: u64,
    pub walltime_max_min: u64,
    pub runtime_fraction_min: f64,
    pub runtime_fraction_max: f64,
}

impl BackgroundConfig {
    pub fn draw_size<R: Rng>(&self, rng: &mut R) -> u32 {
        let total: f64 = self.size_weights.iter().sum();
        let mut x = rng.random_range(0.0..total);
        for (s, w) in self.sizes.iter().zip(&self.size_weights) {
            if x < *w {
                return *s;
            }
            x -= w;
        }
        *self.sizes.last().expect("sizes validated non-empty")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    Off,
    Static,
    Keep,
    Dynamic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FillinConfig {
    pub policy: PolicyKind,
    pub sizes: Vec<u32>,
    pub counts: Vec<u32>,
    pub min_queued: u32,
    pub maintain: bool,
    pub interval_s: Secs,
    pub walltime_min: u64,
    pub requeue: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub cluster: ClusterConfig,
    pub background: BackgroundConfig,
    pub fillin: FillinConfig,
    pub reservations: Vec<Reservation>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            cluster: ClusterConfig {
                units: 24,
                cores_per_unit: 1,
                dispatch_latency_s: 0,
                horizon_min: 1000,
                fillin_job_cap: None,
            },
            background: BackgroundConfig {
                rate_per_hour: 0.0,
                initial_jobs: 0,
                sizes: vec![1],
                size_weights: vec![1.0],
                walltime_min_min: 60,
                walltime_max_min: 60,
                runtime_fraction_min: 1.0,
                runtime_fraction_max: 1.0,
            },
            fillin: FillinConfig {
                policy: PolicyKind::Off,
                sizes: vec![1],
                counts: vec![0],
                min_queued: 0,
                maintain: false,
                interval_s: 60,
                walltime_min: 1440,
                requeue: false,
            },
            reservations: Vec::new(),
        }
    }
}

impl SimConfig {
    pub fn horizon_secs(&self) -> Secs {
        self.cluster.horizon_min * 60
    }
}

struct Parser<'a> {
    line: usize,
    section: &'a str,
}

impl Parser<'_> {
    fn err(&self, message: impl Into<String>) -> ConfigError {
        ConfigError {
            line: self.line,
            section: self.section.to_string(),
            message: message.into(),
        }
    }

    fn num<T: std::str::FromStr>(&self, key: &str, value: &str) -> Result<T, ConfigError> {
        value
            .parse()
            .map_err(|_| self.err(format!("`{key}`: cannot parse `{value}`")))
    }

    fn list<T: std::str::FromStr>(&self, key: &str, value: &str) -> Result<Vec<T>, ConfigError> {
        value.split(',').map(|v| self.num(key, v.trim())).collect()
    }

    fn boolean(&self, key: &str, value: &str) -> Result<bool, ConfigError> {
        match value {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            _ => Err(self.err(format!("`{key}`: expected true or false, got `{value}`"))),
        }
    }
}

pub fn parse_config(text: &str) -> Result<SimConfig, ConfigError> {
    let mut cfg = SimConfig::default();
    let mut section = String::new();
    let mut seen = HashSet::new();
    let mut weights_given = false;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        let p = Parser {
            line: i + 1,
            section: &section,
        };
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim();
            if !["cluster", "background", "fillin", "reservations"].contains(&name) {
                return Err(p.err(format!("unknown section `{name}`")));
            }
            section = name.to_string();
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(p.err(format!("expected `key = value`, got `{line}`")));
        };
        let (key, value) = (key.trim(), value.trim());
        if section.is_empty() {
            return Err(p.err("key outside of any section"));
        }
        if !seen.insert((section.clone(), key.to_string())) {
            return Err(p.err(format!("duplicate key `{key}`")));
        }
        match (section.as_str(), key) {
            ("cluster", "units") => cfg.cluster.units = p.num(key, value)?,
            ("cluster", "cores_per_unit") => cfg.cluster.cores_per_unit = p.num(key, value)?,
            ("cluster", "dispatch_latency_s") => cfg.cluster.dispatch_latency_s = p.num(key, value)?,
            ("cluster", "horizon_min") => cfg.cluster.horizon_min = p.num(key, value)?,
            ("cluster", "fillin_job_cap") => cfg.cluster.fillin_job_cap = Some(p.num(key, value)?),
            ("background", "rate_per_hour") => cfg.background.rate_per_hour = p.num(key, value)?,
            ("background", "initial_jobs") => cfg.background.initial_jobs = p.num(key, value)?,
            ("background", "sizes") => cfg.background.sizes = p.list(key, value)?,
            ("background", "size_weights") => {
                cfg.background.size_weights = p.list(key, value)?;
                weights_given = true;
            }
            ("background", "walltime_min_min") => cfg.background.walltime_min_min = p.num(key, value)?,
            ("background", "walltime_max_min") => cfg.background.walltime_max_min = p.num(key, value)?,
            ("background", "runtime_fraction_min") => cfg.background.runtime_fraction_min = p.num(key, value)?,
            ("background", "runtime_fraction_max") => cfg.background.runtime_fraction_max = p.num(key, value)?,
            ("fillin", "policy") => {
                cfg.fillin.policy = match value {
                    "off" => PolicyKind::Off,
                    "static" => PolicyKind::Static,
                    "keep" => PolicyKind::Keep,
                    "dynamic" => PolicyKind::Dynamic,
                    _ => return Err(p.err(format!("unknown policy `{value}`"))),
                }
            }
            ("fillin", "sizes") => cfg.fillin.sizes = p.list(key, value)?,
            ("fillin", "counts") => cfg.fillin.counts = p.list(key, value)?,
            ("fillin", "min_queued") => cfg.fillin.min_queued = p.num(key, value)?,
            ("fillin", "maintain") => cfg.fillin.maintain = p.boolean(key, value)?,
            ("fillin", "interval_s") => cfg.fillin.interval_s = p.num(key, value)?,
            ("fillin", "walltime_min") => cfg.fillin.walltime_min = p.num(key, value)?,
            ("fillin", "requeue") => cfg.fillin.requeue = p.boolean(key, value)?,
            ("reservations", _) => cfg.reservations.push(parse_reservation(&p, value)?),
            _ => return Err(p.err(format!("unknown key `{key}`"))),
        }
    }
    if !weights_given {
        cfg.background.size_weights = vec![1.0; cfg.background.sizes.len()];
    }
    validate(&cfg).map_err(|message| ConfigError {
        line: text.lines().count(),
        section: "validation".into(),
        message,
    })?;
    Ok(cfg)
}

fn parse_reservation(p: &Parser<'_>, value: &str) -> Result<Reservation, ConfigError> {
    let words: Vec<&str> = value.split_whitespace().collect();
    let minutes = |w: &str| -> Result<Secs, ConfigError> { Ok(p.num::<u64>("reservation", w)? * 60) };
    let r = match words.as_slice() {
        ["mask", start, end, units] => Reservation {
            start: minutes(start)?,
            end: minutes(end)?,
            kind: ReservationKind::Mask {
                units: p.num("reservation", units)?,
            },
        },
        ["machine", start, end] => Reservation {
            start: minutes(start)?,
            end: minutes(end)?,
            kind: ReservationKind::Machine,
        },
        _ => {
            return Err(p.err(format!(
                "expected `mask <start> <end> <units>` or `machine <start> <end>`, got `{value}`"
            )))
        }
    };
    if r.end <= r.start {
        return Err(p.err("reservation must end after it starts"));
    }
    Ok(r)
}

fn validate(cfg: &SimConfig) -> Result<(), String> {
    let c = &cfg.cluster;
    if c.units == 0 || c.cores_per_unit == 0 {
        return Err("cluster needs at least one unit of at least one core".into());
    }
    if c.fillin_job_cap == Some(0) {
        return Err("fillin_job_cap must be at least 1".into());
    }
    let b = &cfg.background;
    if !(b.rate_per_hour >= 0.0 && b.rate_per_hour.is_finite()) {
        return Err(format!(
            "rate_per_hour must be finite and non-negative, got {}",
            b.rate_per_hour
        ));
    }
    if b.sizes.is_empty() || b.sizes.iter().any(|&s| s == 0 || s > c.units) {
        return Err(format!("background sizes must lie in 1..={}", c.units));
    }
    if b.size_weights.len() != b.sizes.len()
        || b.size_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite()))
        || b.size_weights.iter().sum::<f64>() <= 0.0
    {
        return Err("size_weights must be non-negative, not all zero, one per size".into());
    }
    if b.walltime_min_min == 0 || b.walltime_min_min > b.walltime_max_min {
        return Err("walltime range must satisfy 0 < walltime_min_min <= walltime_max_min".into());
    }
    if !(0.0 < b.runtime_fraction_min
        && b.runtime_fraction_min <= b.runtime_fraction_max
        && b.runtime_fraction_max <= 1.0)
    {
        return Err("runtime fractions must satisfy 0 < min <= max <= 1".into());
    }
    let f = &cfg.fillin;
    if f.sizes.contains(&0) {
        return Err("fill-in sizes must be at least 1".into());
    }
    if f.policy == PolicyKind::Static && f.counts.len() != f.sizes.len() {
        return Err("static policy needs one count per size".into());
    }
    if f.interval_s == 0 || f.walltime_min == 0 {
        return Err("fill-in interval and walltime must be positive".into());
    }
    if f.policy == PolicyKind::Dynamic && c.fillin_job_cap.is_none() {
        return Err("dynamic policy needs cluster.fillin_job_cap".into());
    }
    for r in &cfg.reservations {
        if let ReservationKind::Mask { units } = r.kind {
            if units >= c.units {
                return Err("a mask reservation must leave at least one unit".into());
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_section() {
        let text = "\
# comment
[cluster]
units = 10
cores_per_unit = 24
dispatch_latency_s = 60
horizon_min = 100
fillin_job_cap = 4

[background]
rate_per_hour = 2.5
sizes = 1, 2
size_weights = 3,1

[fillin]
policy = keep
sizes = 1,4
min_queued = 5
requeue = true

[reservations]
admin = mask 0 20 3
big = machine 90 95   # trailing comment
";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.cluster.units, 10);
        assert_eq!(cfg.cluster.fillin_job_cap, Some(4));
        assert_eq!(cfg.background.size_weights, vec![3.0, 1.0]);
        assert_eq!(cfg.fillin.policy, PolicyKind::Keep);
        assert!(cfg.fillin.requeue);
        assert_eq!(cfg.reservations.len(), 2);
        assert_eq!(cfg.reservations[1].start, 90 * 60);
        assert_eq!(cfg.reservations[0].kind, ReservationKind::Mask { units: 3 });
    }

    #[test]
    fn errors_carry_line_and_section() {
        let e = parse_config("[cluster]\nunits = ten\n").unwrap_err();
        assert_eq!((e.line, e.section.as_str()), (2, "cluster"));
        let e = parse_config("[fillin]\n\nbogus = 1\n").unwrap_err();
        assert_eq!((e.line, e.section.as_str()), (3, "fillin"));
        let e = parse_config("[nope]\n").unwrap_err();
        assert_eq!(e.line, 1);
        let e = parse_config("[reservations]\nx = machine 5 2\n").unwrap_err();
        assert_eq!((e.line, e.section.as_str()), (2, "reservations"));
        assert!(parse_config("[background]\nrate_per_hour = -1\n").is_err());
        assert!(parse_config("[cluster]\nunits = 4\nunits = 5\n").is_err());
    }
}
