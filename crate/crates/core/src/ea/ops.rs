//! Genetic operators: random seeding, cut-plane crossover, Gaussian mutation,
//! and rank-weighted parent selection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use super::minimize::{local_minimize, MinimizeError, MinimizeSettings};
use super::pool::Pool;
use super::{splitmix64, Candidate, Vec3};

/// Closest approach allowed when scattering atoms for a fresh start.
pub const MIN_SEPARATION: f64 = 0.5;

#[derive(Debug, Clone, Copy)]
pub struct OperatorSettings {
    /// Per-atom probability of a Gaussian kick.
    pub p_mut: f64,
    /// Standard deviation of the kick, per coordinate.
    pub sigma_mut: f64,
    pub minimize: MinimizeSettings,
}

impl Default for OperatorSettings {
    fn default() -> Self {
        OperatorSettings {
            p_mut: 0.1,
            sigma_mut: 0.2,
            minimize: MinimizeSettings::default(),
        }
    }
}

/// Work unit: produce `n_children` offspring of two parents.
#[derive(Debug, Clone, PartialEq)]
pub struct EaTask {
    pub parent_a: Candidate,
    pub parent_b: Candidate,
    pub n_children: u32,
    pub seed: u64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EaError {
    #[error("pool holds {0} members, need at least 2")]
    PoolTooSmall(usize),
    #[error("parents have {0} and {1} atoms")]
    AtomCountMismatch(usize, usize),
    #[error(transparent)]
    Minimize(#[from] MinimizeError),
}

/// Scatters `n` atoms uniformly in a sphere of radius `1.2 * n^(1/3)`,
/// rejecting any placement closer than [`MIN_SEPARATION`] to an earlier atom.
pub fn random_cluster(n: usize, rng: &mut impl Rng) -> Vec<Vec3> {
    let radius = 1.2 * (n as f64).cbrt();
    let mut atoms: Vec<Vec3> = Vec::with_capacity(n);
    while atoms.len() < n {
        let p: Vec3 = [
            rng.random_range(-radius..radius),
            rng.random_range(-radius..radius),
            rng.random_range(-radius..radius),
        ];
        if norm2(&p) > radius * radius {
            continue;
        }
        if atoms.iter().all(|a| dist2(a, &p) >= MIN_SEPARATION * MIN_SEPARATION) {
            atoms.push(p);
        }
    }
    atoms
}

/// A relaxed random cluster; `seed` fully determines it.
pub fn random_candidate(n: usize, seed: u64, id: u64, settings: &MinimizeSettings) -> Result<Candidate, MinimizeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let relaxed = local_minimize(&random_cluster(n, &mut rng), settings)?;
    Ok(Candidate {
        coords: relaxed.coords,
        energy: relaxed.energy,
        id,
        seed,
    })
}

/// Produces the task's children: crossover, mutation, then relaxation.
/// Children that fail to relax come back as `Err` and are skipped at merge.
pub fn make_children(task: &EaTask, ops: &OperatorSettings) -> Result<Vec<Result<Candidate, MinimizeError>>, EaError> {
    let starts = offspring_geometries(task, ops)?;
    Ok(starts
        .iter()
        .enumerate()
        .map(|(i, coords)| {
            let child_seed = splitmix64(task.seed ^ splitmix64(i as u64));
            local_minimize(coords, &ops.minimize).map(|r| Candidate {
                coords: r.coords,
                energy: r.energy,
                id: child_seed,
                seed: task.seed,
            })
        })
        .collect())
}

/// Unrelaxed offspring of a task (crossover plus mutation), in the order
/// [`make_children`] relaxes them.
pub fn offspring_geometries(task: &EaTask, ops: &OperatorSettings) -> Result<Vec<Vec<Vec3>>, EaError> {
    let n = task.parent_a.coords.len();
    if n != task.parent_b.coords.len() {
        return Err(EaError::AtomCountMismatch(n, task.parent_b.coords.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    let kick = Normal::new(0.0, ops.sigma_mut).expect("sigma_mut must be finite and non-negative");
    let mut out = Vec::with_capacity(task.n_children as usize);
    for _ in 0..task.n_children {
        let mut coords = cut_plane_crossover(&task.parent_a.coords, &task.parent_b.coords, &mut rng);
        for atom in coords.iter_mut() {
            if rng.random_bool(ops.p_mut) {
                for x in atom.iter_mut() {
                    *x += kick.sample(&mut rng);
                }
            }
        }
        out.push(coords);
    }
    Ok(out)
}

/// Deaven-Ho style mating: both parents are centred and randomly rotated;
/// atoms of `a` above the z = 0 plane are joined with the lowest atoms of `b`.
pub fn cut_plane_crossover(a: &[Vec3], b: &[Vec3], rng: &mut impl Rng) -> Vec<Vec3> {
    let n = a.len();
    let mut a = centred(a);
    let mut b = centred(b);
    let ra = random_rotation(rng);
    let rb = random_rotation(rng);
    a.iter_mut().for_each(|p| *p = rotate(&ra, p));
    b.iter_mut().for_each(|p| *p = rotate(&rb, p));
    a.sort_by(|p, q| q[2].total_cmp(&p[2]));
    b.sort_by(|p, q| p[2].total_cmp(&q[2]));
    let from_a = a
        .iter()
        .filter(|p| p[2] > 0.0)
        .count()
        .clamp(1, n.saturating_sub(1).max(1));
    let mut child: Vec<Vec3> = a[..from_a].to_vec();
    child.extend_from_slice(&b[..n - from_a]);
    child
}

fn centred(coords: &[Vec3]) -> Vec<Vec3> {
    let n = coords.len() as f64;
    let mut c = [0.0; 3];
    for p in coords {
        for k in 0..3 {
            c[k] += p[k] / n;
        }
    }
    coords.iter().map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]]).collect()
}

type Mat3 = [[f64; 3]; 3];

/// Uniformly distributed rotation from a random unit quaternion.
fn random_rotation(rng: &mut impl Rng) -> Mat3 {
    let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
    let tau = std::f64::consts::TAU;
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let (w, x, y, z) = (
        a * (tau * u2).sin(),
        a * (tau * u2).cos(),
        b * (tau * u3).sin(),
        b * (tau * u3).cos(),
    );
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - z * w),
            2.0 * (x * z + y * w),
        ],
        [
            2.0 * (x * y + z * w),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - x * w),
        ],
        [
            2.0 * (x * z - y * w),
            2.0 * (y * z + x * w),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

fn rotate(m: &Mat3, p: &Vec3) -> Vec3 {
    [
        m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2],
        m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2],
        m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2],
    ]
}

fn norm2(p: &Vec3) -> f64 {
    p[0] * p[0] + p[1] * p[1] + p[2] * p[2]
}

fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    norm2(&[a[0] - b[0], a[1] - b[1], a[2] - b[2]])
}

/// Smallest interatomic distance.
pub fn min_distance(coords: &[Vec3]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..coords.len() {
        for j in (i + 1)..coords.len() {
            best = best.min(dist2(&coords[i], &coords[j]));
        }
    }
    best.sqrt()
}

/// Server-side task factory. Parents are drawn by linear rank weighting
/// (rank r of n gets weight n - r + 1); seeds come from a bijective mix of a
/// counter, so no two tasks share one.
#[derive(Debug, Clone)]
pub struct TaskGenerator {
    rng: ChaCha8Rng,
    seed_base: u64,
    issued: u64,
    n_children: u32,
}

impl TaskGenerator {
    pub fn new(seed: u64, n_children: u32) -> Self {
        TaskGenerator {
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed_base: splitmix64(seed),
            issued: 0,
            n_children,
        }
    }

    pub fn issued(&self) -> u64 {
        self.issued
    }

    pub fn next_task(&mut self, pool: &Pool) -> Result<EaTask, EaError> {
        let members = pool.members();
        let n = members.len();
        if n < 2 {
            return Err(EaError::PoolTooSmall(n));
        }
        let first = pick_rank(n, None, &mut self.rng);
        let second = pick_rank(n, Some(first), &mut self.rng);
        let seed = splitmix64(self.seed_base.wrapping_add(self.issued));
        self.issued += 1;
        Ok(EaTask {
            parent_a: members[first].clone(),
            parent_b: members[second].clone(),
            n_children: self.n_children,
            seed,
        })
    }
}

fn pick_rank(n: usize, exclude: Option<usize>, rng: &mut impl Rng) -> usize {
    let weight = |i: usize| if Some(i) == exclude { 0 } else { n - i };
    let total: usize = (0..n).map(weight).sum();
    let mut ticket = rng.random_range(0..total);
    for i in 0..n {
        let w = weight(i);
        if ticket < w {
            return i;
        }
        ticket -= w;
    }
    unreachable!("ticket exceeds total weight")
}
