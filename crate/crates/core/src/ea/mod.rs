//! Asynchronous pool-based evolutionary search for low-energy Lennard-Jones
//! cluster geometries.
//!
//! The server keeps a [`Pool`] and turns it into [`EaTask`]s on demand;
//! clients run [`make_children`] (crossover, mutation, relaxation) and send
//! the children back, which are merged into the pool in whatever order they
//! arrive. Lost tasks can simply be dropped.

pub mod lj;
pub mod minimize;
pub mod ops;
pub mod payload;
pub mod pool;

use std::io;
use std::path::Path;

pub use lj::{lj_energy, lj_gradient, LjError};
pub use minimize::{local_minimize, MinimizeError, MinimizeSettings, Relaxed};
pub use ops::{make_children, random_candidate, EaError, EaTask, OperatorSettings, TaskGenerator};
pub use pool::Pool;

use crate::protocol::{ResultPayload, TaskPayload};
use crate::workload::{is_poisoned, Kernel, KernelError, Workload};

pub type Vec3 = [f64; 3];

/// Known global minimum of the 13-atom LJ cluster (Mackay icosahedron).
pub const LJ13_GLOBAL_MINIMUM: f64 = -44.326801;

/// A cluster geometry in reduced length units with its reduced energy.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub coords: Vec<Vec3>,
    pub energy: f64,
    pub id: u64,
    pub seed: u64,
}

/// SplitMix64 finalizer; a bijection on `u64`.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Centred 13-atom icosahedron (12 vertices plus centre) with
/// centre-to-vertex distance `radius`.
pub fn icosahedron13(radius: f64) -> Vec<Vec3> {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let scale = radius / (1.0 + phi * phi).sqrt();
    let mut atoms = vec![[0.0; 3]];
    for &a in &[-1.0, 1.0] {
        for &b in &[-phi, phi] {
            atoms.push([0.0, a * scale, b * scale]);
            atoms.push([a * scale, b * scale, 0.0]);
            atoms.push([b * scale, 0.0, a * scale]);
        }
    }
    atoms
}

#[derive(Debug, Clone)]
pub struct EaConfig {
    pub n_atoms: usize,
    pub pool_capacity: usize,
    pub diversity_epsilon: f64,
    pub n_children: u32,
    /// Number of tasks to hand out before the run drains.
    pub generation_budget: u64,
    pub seed: u64,
    pub operators: OperatorSettings,
}

impl Default for EaConfig {
    fn default() -> Self {
        EaConfig {
            n_atoms: 13,
            pool_capacity: 20,
            diversity_epsilon: 1e-3,
            n_children: 2,
            generation_budget: 1000,
            seed: 1,
            operators: OperatorSettings::default(),
        }
    }
}

/// The server half of the EA: owns the pool.
#[derive(Debug)]
pub struct EaWorkload {
    pool: Pool,
    generator: TaskGenerator,
    budget: u64,
    evaluations: u64,
    poisoned: u64,
    best_history: Vec<f64>,
}

impl EaWorkload {
    /// Seeds the pool with relaxed random clusters.
    pub fn new(cfg: &EaConfig) -> Result<Self, EaError> {
        let mut pool = Pool::new(cfg.pool_capacity.max(2), cfg.diversity_epsilon);
        let mut attempt = 0u64;
        let max_attempts = 20 * cfg.pool_capacity as u64 + 20;
        while pool.len() < pool.capacity() && attempt < max_attempts {
            let seed = splitmix64(cfg.seed.rotate_left(17) ^ attempt);
            if let Ok(c) = random_candidate(cfg.n_atoms, seed, attempt, &cfg.operators.minimize) {
                pool.merge(c);
            }
            attempt += 1;
        }
        if pool.len() < 2 {
            return Err(EaError::PoolTooSmall(pool.len()));
        }
        let best = pool.best().map(|b| b.energy).unwrap_or(f64::INFINITY);
        Ok(EaWorkload {
            pool,
            generator: TaskGenerator::new(cfg.seed, cfg.n_children),
            budget: cfg.generation_budget,
            evaluations: 0,
            poisoned: 0,
            best_history: vec![best],
        })
    }

    pub fn pool(&self) -> &Pool {
        &self.pool
    }

    /// Children merged or rejected so far (excludes poisoned ones).
    pub fn evaluations(&self) -> u64 {
        self.evaluations
    }

    pub fn best_energy(&self) -> f64 {
        self.pool.best().map(|b| b.energy).unwrap_or(f64::INFINITY)
    }

    /// Best energy after seeding and after every absorbed result.
    pub fn best_history(&self) -> &[f64] {
        &self.best_history
    }
}

impl Workload for EaWorkload {
    fn generate(&mut self) -> Option<TaskPayload> {
        if self.generator.issued() >= self.budget {
            return None;
        }
        let task = self.generator.next_task(&self.pool).ok()?;
        Some(payload::encode_task(&task))
    }

    fn absorb(&mut self, _task: &TaskPayload, result: &ResultPayload) {
        if is_poisoned(result) {
            self.poisoned += 1;
            return;
        }
        let Ok(children) = payload::decode_children(result) else {
            self.poisoned += 1;
            return;
        };
        for child in children {
            match child {
                Some(c) => {
                    self.evaluations += 1;
                    self.pool.merge(c);
                }
                None => self.poisoned += 1,
            }
        }
        self.best_history.push(self.best_energy());
    }

    fn report(&self) -> String {
        format!(
            "mode=ea evaluations={} poisoned={} pool_size={} best_energy={:.6}",
            self.evaluations,
            self.poisoned,
            self.pool.len(),
            self.best_energy()
        )
    }

    fn dump(&self, dir: &Path) -> io::Result<()> {
        self.pool.dump(dir)
    }
}

/// The client half of the EA.
#[derive(Debug, Clone, Default)]
pub struct EaKernel {
    pub operators: OperatorSettings,
}

impl Kernel for EaKernel {
    fn compute(&self, task: &[u8]) -> Result<ResultPayload, KernelError> {
        let task = payload::decode_task(task).map_err(|e| KernelError::Malformed(e.to_string()))?;
        let children = make_children(&task, &self.operators).map_err(|e| KernelError::Malformed(e.to_string()))?;
        let children: Vec<Option<Candidate>> = children.into_iter().map(Result::ok).collect();
        Ok(payload::encode_children(&children))
    }
}
