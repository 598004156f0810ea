//! Built-in scenarios and the run loop that couples the simulator with a
//! supervisor.

use std::path::Path;
use std::sync::atomic::AtomicBool;

use super::config::{parse_config, ConfigError, PolicyKind, SimConfig};
use super::{background_mix, Engine, LoadSample, Secs};
use crate::supervisor::{run_supervisor, Action, SimAdapter, SupplyPolicy};

pub const BUILTIN_SCENARIOS: [(&str, &str); 3] = [
    ("local", include_str!("../../scenarios/local.conf")),
    ("center", include_str!("../../scenarios/center.conf")),
    ("hlrn", include_str!("../../scenarios/hlrn.conf")),
];

pub fn builtin_scenario(name: &str) -> Option<SimConfig> {
    BUILTIN_SCENARIOS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| parse_config(text).expect("built-in scenarios parse"))
}

/// A built-in scenario name or the path of a scenario file.
pub fn load_scenario(name_or_path: &str) -> Result<SimConfig, String> {
    if let Some(cfg) = builtin_scenario(name_or_path) {
        return Ok(cfg);
    }
    let path = Path::new(name_or_path);
    let text = std::fs::read_to_string(path).map_err(|e| {
        let names: Vec<&str> = BUILTIN_SCENARIOS.iter().map(|(n, _)| *n).collect();
        format!(
            "{name_or_path}: not a built-in scenario ({}) and not readable: {e}",
            names.join(", ")
        )
    })?;
    parse_config(&text).map_err(|e: ConfigError| format!("{}: {e}", path.display()))
}

/// The supply policy a scenario asks for, if any.
pub fn scenario_policy(cfg: &SimConfig) -> Option<SupplyPolicy> {
    let f = &cfg.fillin;
    let walltime: Secs = f.walltime_min * 60;
    match f.policy {
        PolicyKind::Off => None,
        PolicyKind::Static => Some(SupplyPolicy::StaticMix {
            mix: f.sizes.iter().copied().zip(f.counts.iter().copied()).collect(),
            walltime,
            maintain: f.maintain,
        }),
        PolicyKind::Keep => Some(SupplyPolicy::KeepQueued {
            sizes: f.sizes.clone(),
            min_queued: f.min_queued,
            walltime,
        }),
        PolicyKind::Dynamic => Some(SupplyPolicy::DynamicFit {
            interval: f.interval_s,
            job_cap: cfg.cluster.fillin_job_cap.unwrap_or(u32::MAX),
            max_walltime: walltime,
        }),
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub trace: Vec<LoadSample>,
    pub normal_starts: Vec<(u64, Secs)>,
    pub actions: Vec<Action>,
    pub max_running_fillin: u32,
    pub preemptions: u64,
}

/// Simulates `cfg` to its horizon. With `fillin` false the supervisor is
/// not run at all.
pub fn run_scenario(cfg: &SimConfig, seed: u64, fillin: bool) -> ScenarioRun {
    let horizon = cfg.horizon_secs();
    let jobs = background_mix(seed, &cfg.background, horizon, 1);
    let mut engine = Engine::new(&cfg.cluster, &cfg.reservations, jobs);
    let mut actions = Vec::new();
    if let (true, Some(policy)) = (fillin, scenario_policy(cfg)) {
        let mut adapter = SimAdapter {
            engine: &mut engine,
            requeue: cfg.fillin.requeue,
        };
        actions = run_supervisor(
            &policy,
            &mut adapter,
            cfg.fillin.interval_s,
            horizon,
            &AtomicBool::new(false),
            0,
        );
    }
    engine.run_to_end();
    ScenarioRun {
        trace: engine.trace().to_vec(),
        normal_starts: engine.normal_starts().to_vec(),
        actions,
        max_running_fillin: engine.max_running_fillin(),
        preemptions: engine.preemptions(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_parse() {
        for (name, _) in BUILTIN_SCENARIOS {
            assert!(builtin_scenario(name).is_some());
        }
        assert!(load_scenario("no-such-scenario").is_err());
    }

    #[test]
    fn idle_cluster_stays_idle() {
        let mut cfg = SimConfig::default();
        cfg.cluster.horizon_min = 30;
        let run = run_scenario(&cfg, 1, true);
        assert_eq!(run.trace.len(), 30);
        assert!(run.trace.iter().all(|s| s.normal_cores == 0 && s.fillin_cores == 0));
        assert!(run.actions.is_empty());
    }
}
