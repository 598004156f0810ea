//! Lennard-Jones 12-6 pair potential in reduced units (epsilon = sigma = 1).

use super::Vec3;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LjError {
    #[error("need at least two atoms, got {0}")]
    TooFewAtoms(usize),
    #[error("non-finite energy: atoms {0} and {1} coincide or a coordinate is not finite")]
    NonFinite(usize, usize),
}

fn check(coords: &[Vec3]) -> Result<(), LjError> {
    if coords.len() < 2 {
        return Err(LjError::TooFewAtoms(coords.len()));
    }
    Ok(())
}

#[inline]
fn delta(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Total energy `sum_{i<j} 4 (r^-12 - r^-6)`.
pub fn lj_energy(coords: &[Vec3]) -> Result<f64, LjError> {
    check(coords)?;
    let mut e = 0.0;
    for i in 0..coords.len() {
        for j in (i + 1)..coords.len() {
            let d = delta(&coords[i], &coords[j]);
            let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
            if r2 <= 0.0 || !r2.is_finite() {
                return Err(LjError::NonFinite(i, j));
            }
            let inv6 = 1.0 / (r2 * r2 * r2);
            e += 4.0 * (inv6 * inv6 - inv6);
        }
    }
    if !e.is_finite() {
        return Err(LjError::NonFinite(0, 1));
    }
    Ok(e)
}

/// Analytic gradient of [`lj_energy`] with respect to every coordinate.
pub fn lj_gradient(coords: &[Vec3]) -> Result<Vec<Vec3>, LjError> {
    lj_energy_and_gradient(coords).map(|(_, g)| g)
}

/// Energy and gradient in one pass over the pairs.
pub fn lj_energy_and_gradient(coords: &[Vec3]) -> Result<(f64, Vec<Vec3>), LjError> {
    check(coords)?;
    let n = coords.len();
    let mut grad = vec![[0.0; 3]; n];
    let mut e = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let d = delta(&coords[i], &coords[j]);
            let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
            if r2 <= 0.0 || !r2.is_finite() {
                return Err(LjError::NonFinite(i, j));
            }
            let inv2 = 1.0 / r2;
            let inv6 = inv2 * inv2 * inv2;
            e += 4.0 * (inv6 * inv6 - inv6);
            // dE/dr * 1/r
            let f = (-48.0 * inv6 * inv6 + 24.0 * inv6) * inv2;
            for k in 0..3 {
                grad[i][k] += f * d[k];
                grad[j][k] -= f * d[k];
            }
        }
    }
    if !e.is_finite() || grad.iter().flatten().any(|g| !g.is_finite()) {
        return Err(LjError::NonFinite(0, 1));
    }
    Ok((e, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(r: f64) -> Vec<Vec3> {
        vec![[0.0, 0.0, 0.0], [r, 0.0, 0.0]]
    }

    #[test]
    fn pair_minimum() {
        let r = 2f64.powf(1.0 / 6.0);
        assert!((lj_energy(&pair(r)).unwrap() + 1.0).abs() < 1e-14);
        let g = lj_gradient(&pair(r)).unwrap();
        for v in g.iter().flatten() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn zero_crossing() {
        assert_eq!(lj_energy(&pair(1.0)).unwrap(), 0.0);
    }

    #[test]
    fn equilateral_triangle() {
        let s = 2f64.powf(1.0 / 6.0);
        let tri = vec![[0.0, 0.0, 0.0], [s, 0.0, 0.0], [s / 2.0, s * 3f64.sqrt() / 2.0, 0.0]];
        assert!((lj_energy(&tri).unwrap() + 3.0).abs() < 1e-12);
    }

    #[test]
    fn coincident_atoms() {
        assert_eq!(lj_energy(&pair(0.0)), Err(LjError::NonFinite(0, 1)));
        assert!(lj_gradient(&pair(0.0)).is_err());
        let nan = vec![[0.0, 0.0, 0.0], [f64::NAN, 0.0, 0.0]];
        assert!(lj_energy(&nan).is_err());
    }

    #[test]
    fn single_atom_rejected() {
        assert_eq!(lj_energy(&[[0.0; 3]]), Err(LjError::TooFewAtoms(1)));
    }

    #[test]
    fn net_force_vanishes() {
        let coords = vec![
            [0.1, 0.2, -0.3],
            [1.1, 0.0, 0.4],
            [-0.5, 1.0, 0.2],
            [0.3, -0.9, 1.0],
            [1.2, 1.1, -0.7],
        ];
        let g = lj_gradient(&coords).unwrap();
        for k in 0..3 {
            let s: f64 = g.iter().map(|v| v[k]).sum();
            assert!(s.abs() < 1e-12, "component {k} sums to {s}");
        }
    }
}
