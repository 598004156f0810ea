//! Fixed-capacity, energy-sorted population with an energy-gap diversity rule.

use std::cmp::Ordering;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use super::Candidate;

#[derive(Debug, Clone, PartialEq)]
pub struct Pool {
    capacity: usize,
    diversity_epsilon: f64,
    members: Vec<Candidate>,
}

/// Total order used for ranking: energy, then id.
fn rank_cmp(a: &Candidate, b: &Candidate) -> Ordering {
    a.energy.total_cmp(&b.energy).then(a.id.cmp(&b.id))
}

impl Pool {
    pub fn new(capacity: usize, diversity_epsilon: f64) -> Self {
        assert!(capacity >= 1, "pool capacity must be at least 1");
        Pool {
            capacity,
            diversity_epsilon,
            members: Vec::with_capacity(capacity + 1),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn diversity_epsilon(&self) -> f64 {
        self.diversity_epsilon
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Members, best first.
    pub fn members(&self) -> &[Candidate] {
        &self.members
    }

    pub fn best(&self) -> Option<&Candidate> {
        self.members.first()
    }

    pub fn worst(&self) -> Option<&Candidate> {
        self.members.last()
    }

    /// Offers `child` to the pool; returns whether it was taken.
    ///
    /// A child whose energy lies within `diversity_epsilon` of existing
    /// members replaces them only if it ranks below all of them. Otherwise it
    /// enters when the pool has room or it beats the current worst member,
    /// which is then evicted.
    pub fn merge(&mut self, child: Candidate) -> bool {
        if !child.energy.is_finite() {
            return false;
        }
        let eps = self.diversity_epsilon;
        let mut neighbours = Vec::new();
        for (i, m) in self.members.iter().enumerate() {
            if (m.energy - child.energy).abs() < eps {
                if rank_cmp(m, &child) != Ordering::Greater {
                    return false;
                }
                neighbours.push(i);
            }
        }
        if neighbours.is_empty() && self.members.len() >= self.capacity {
            match self.members.last() {
                Some(w) if rank_cmp(&child, w) == Ordering::Less => {}
                _ => return false,
            }
        }
        for i in neighbours.into_iter().rev() {
            self.members.remove(i);
        }
        let at = self.members.partition_point(|m| rank_cmp(m, &child) == Ordering::Less);
        self.members.insert(at, child);
        self.members.truncate(self.capacity);
        true
    }

    /// Writes one XYZ file per member plus `pool.tsv` (rank, energy, id).
    pub fn dump(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        let mut index = io::BufWriter::new(fs::File::create(dir.join("pool.tsv"))?);
        writeln!(index, "rank\tenergy\tid")?;
        for (rank, m) in self.members.iter().enumerate() {
            let rank = rank + 1;
            writeln!(index, "{rank}\t{:.10}\t{}", m.energy, m.id)?;
            let mut xyz = io::BufWriter::new(fs::File::create(dir.join(format!("rank_{rank:03}.xyz")))?);
            writeln!(xyz, "{}", m.coords.len())?;
            writeln!(xyz, "energy={:.10} id={} seed={}", m.energy, m.id, m.seed)?;
            for c in &m.coords {
                writeln!(xyz, "LJ {:.10} {:.10} {:.10}", c[0], c[1], c[2])?;
            }
            xyz.flush()?;
        }
        index.flush()
    }
}

/// Reads the `(rank, energy, id)` rows of a `pool.tsv` index.
pub fn read_pool_index(path: &Path) -> io::Result<Vec<(usize, f64, u64)>> {
    let text = fs::read_to_string(path)?;
    let bad = |line: usize| {
        io::Error::new(
            io::ErrorKind::InvalidData,
            format!("{}:{line}: bad pool row", path.display()),
        )
    };
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let mut f = line.split('\t');
        let (Some(r), Some(e), Some(id), None) = (f.next(), f.next(), f.next(), f.next()) else {
            return Err(bad(n + 1));
        };
        rows.push((
            r.parse().map_err(|_| bad(n + 1))?,
            e.parse().map_err(|_| bad(n + 1))?,
            id.parse().map_err(|_| bad(n + 1))?,
        ));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(id: u64, energy: f64) -> Candidate {
        Candidate {
            coords: vec![[0.0; 3], [1.12, 0.0, 0.0]],
            energy,
            id,
            seed: id,
        }
    }

    fn energies(p: &Pool) -> Vec<f64> {
        p.members().iter().map(|m| m.energy).collect()
    }

    #[test]
    fn empty_pool_takes_anything() {
        let mut p = Pool::new(3, 1e-3);
        assert!(p.merge(cand(1, 5.0)));
        assert_eq!(p.len(), 1);
    }

    #[test]
    fn full_pool_rejects_worse_child() {
        let mut p = Pool::new(2, 1e-3);
        p.merge(cand(1, -2.0));
        p.merge(cand(2, -1.0));
        let before = p.clone();
        assert!(!p.merge(cand(3, 0.0)));
        assert_eq!(p, before);
    }

    #[test]
    fn evicts_worst_on_overflow() {
        let mut p = Pool::new(2, 1e-3);
        p.merge(cand(1, -2.0));
        p.merge(cand(2, -1.0));
        assert!(p.merge(cand(3, -1.5)));
        assert_eq!(energies(&p), vec![-2.0, -1.5]);
    }

    #[test]
    fn diversity_gap() {
        let mut p = Pool::new(5, 1e-3);
        p.merge(cand(1, -2.0));
        assert!(!p.merge(cand(2, -1.9995)));
        // a lower twin replaces its neighbour instead of crowding it
        assert!(p.merge(cand(3, -2.0004)));
        assert_eq!(p.len(), 1);
        assert_eq!(p.best().unwrap().id, 3);
    }

    #[test]
    fn non_finite_rejected() {
        let mut p = Pool::new(2, 1e-3);
        assert!(!p.merge(cand(1, f64::NAN)));
        assert!(p.is_empty());
    }

    #[test]
    fn dump_and_index() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = Pool::new(3, 1e-3);
        p.merge(cand(4, -1.0));
        p.merge(cand(9, -3.0));
        p.dump(dir.path()).unwrap();
        let rows = read_pool_index(&dir.path().join("pool.tsv")).unwrap();
        assert_eq!(rows, vec![(1, -3.0, 9), (2, -1.0, 4)]);
        let xyz = std::fs::read_to_string(dir.path().join("rank_001.xyz")).unwrap();
        assert!(xyz.starts_with("2\nenergy=-3.0000000000 id=9"));
    }
}
