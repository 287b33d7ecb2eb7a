//! Canonical sphere construction, spiral ordering and the two reconstruction
//! distances (Chamfer and EMD).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::assignment;
use crate::error::{Error, Result};
use crate::pcio::{norm, PointCloud};

/// Golden angle `pi * (3 - sqrt 5)`.
pub fn golden_angle() -> f64 {
    PI * (3.0 - 5f64.sqrt())
}

/// Unit vectors laid out along a Fibonacci spiral starting at the north
/// pole. The index order is the serialization order.
#[derive(Clone, Debug, PartialEq)]
pub struct CanonicalSphere {
    points: Vec<[f64; 3]>,
}

impl CanonicalSphere {
    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The same points in another row order. Used to check that per-point
    /// networks are permutation equivariant; the result is no longer in
    /// spiral order.
    pub fn permuted(&self, order: &[usize]) -> CanonicalSphere {
        CanonicalSphere {
            points: order.iter().map(|&i| self.points[i]).collect(),
        }
    }
}

pub fn fibonacci_sphere(m: usize) -> Result<CanonicalSphere> {
    if m == 0 {
        return Err(Error::domain("sphere needs at least one point"));
    }
    let ga = golden_angle();
    let points = (0..m)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / m as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = i as f64 * ga;
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect();
    Ok(CanonicalSphere { points })
}

/// Index of the canonical point nearest to `p` (lowest index on ties).
pub fn spiral_rank(sphere: &CanonicalSphere, p: [f64; 3]) -> Result<usize> {
    let n = norm(p);
    if !((n - 1.0).abs() <= 1e-3) {
        return Err(Error::domain(format!("spiral_rank needs a unit vector, got norm {n}")));
    }
    Ok(nearest_index(sphere.points(), p))
}

#[inline]
pub fn sq_dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Nearest point in `set` to `q`; ties go to the lower index.
pub fn nearest_index(set: &[[f64; 3]], q: [f64; 3]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, &p) in set.iter().enumerate() {
        let d = sq_dist(p, q);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// For each point of `from`, the nearest index in `to` and its squared
/// distance.
pub fn nearest_neighbors(from: &[[f64; 3]], to: &[[f64; 3]]) -> Vec<(usize, f64)> {
    from.iter()
        .map(|&q| {
            let j = nearest_index(to, q);
            (j, sq_dist(q, to[j]))
        })
        .collect()
}

/// Averaged squared-distance Chamfer distance between two point sets.
pub fn chamfer_points(x: &[[f64; 3]], y: &[[f64; 3]]) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::domain("chamfer distance needs nonempty clouds"));
    }
    let fwd: f64 = nearest_neighbors(x, y).iter().map(|t| t.1).sum::<f64>() / x.len() as f64;
    let bwd: f64 = nearest_neighbors(y, x).iter().map(|t| t.1).sum::<f64>() / y.len() as f64;
    Ok(fwd + bwd)
}

pub fn chamfer_distance(x: &PointCloud, y: &PointCloud) -> Result<f64> {
    chamfer_points(&x.to_f64(), &y.to_f64())
}

/// Largest set size for which `EmdMode::Auto` uses the exact solver.
pub const EXACT_EMD_LIMIT: usize = 256;

/// Auction tolerance as a fraction of the joint diameter.
pub const AUCTION_EPS_FRACTION: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmdMode {
    Exact,
    Approximate,
    /// Exact up to [`EXACT_EMD_LIMIT`] points, auction above.
    Auto,
}

impl EmdMode {
    pub fn resolve(self, n: usize) -> EmdMode {
        match self {
            EmdMode::Auto if n <= EXACT_EMD_LIMIT => EmdMode::Exact,
            EmdMode::Auto => EmdMode::Approximate,
            other => other,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EmdOutcome {
    /// Mean matched (unsquared) distance.
    pub value: f64,
    /// `assignment[i]` is the index in `y` matched to `x[i]`.
    pub assignment: Vec<usize>,
    /// Solver actually used.
    pub mode: EmdMode,
    /// Upper bound on `value - optimum`; zero for the exact solver.
    pub tolerance: f64,
}

/// Earth mover's distance between equal-size sets: the mean Euclidean
/// distance under the best bijection.
pub fn emd_points(x: &[[f64; 3]], y: &[[f64; 3]], mode: EmdMode) -> Result<EmdOutcome> {
    if x.len() != y.len() {
        return Err(Error::domain(format!(
            "emd needs equal-size sets, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::domain("emd needs nonempty sets"));
    }
    let n = x.len();
    let mut costs = Vec::with_capacity(n * n);
    for &a in x {
        for &b in y {
            costs.push(sq_dist(a, b).sqrt());
        }
    }
    let mode = mode.resolve(n);
    let (assignment, tolerance) = match mode {
        EmdMode::Exact => (assignment::hungarian(&costs, n), 0.0),
        _ => {
            let eps = AUCTION_EPS_FRACTION * joint_diameter(x, y);
            (assignment::auction(&costs, n, eps), eps)
        }
    };
    let value = assignment::assignment_cost(&costs, n, &assignment) / n as f64;
    Ok(EmdOutcome {
        value,
        assignment,
        mode,
        tolerance,
    })
}

pub fn emd(x: &PointCloud, y: &PointCloud, mode: EmdMode) -> Result<EmdOutcome> {
    emd_points(&x.to_f64(), &y.to_f64(), mode)
}

fn joint_diameter(x: &[[f64; 3]], y: &[[f64; 3]]) -> f64 {
    let all: Vec<[f64; 3]> = x.iter().chain(y).copied().collect();
    let mut d: f64 = 0.0;
    for (i, &a) in all.iter().enumerate() {
        for &b in &all[i + 1..] {
            d = d.max(sq_dist(a, b));
        }
    }
    d.sqrt()
}
