//! Desk-scale reference solver for the original constrained formulation:
//! minimize the summed similar-pair quadratic form subject to every
//! dissimilar pair exceeding unit distance and `M` positive semidefinite.
//!
//! Projected gradient descent with an exact-penalty term for the dissimilar
//! constraints; the PSD constraint is enforced by eigen-projection each step.
//! O(d^3) per iteration, so it refuses dimensions above a small bound. This
//! exists as a correctness oracle for the factorized SGD solver, never as a
//! production path.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::metric::{Dataset, PairSet};

pub const DEFAULT_MAX_DIM: usize = 64;

/// A full `d x d` symmetric PSD Mahalanobis matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MahalanobisMatrix {
    pub d: usize,
    pub values: DMatrix<f64>,
}

impl MahalanobisMatrix {
    /// Quadratic form (x-y)^T M (x-y).
    pub fn pair_distance_sq(&self, x: &[f32], y: &[f32]) -> f64 {
        let d = self.d;
        let delta: Vec<f64> = x.iter().zip(y).map(|(&a, &b)| a as f64 - b as f64).collect();
        let mut total = 0.0;
        for a in 0..d {
            let mut row_acc = 0.0;
            for b in 0..d {
                row_acc += self.values[(a, b)] * delta[b];
            }
            total += delta[a] * row_acc;
        }
        total
    }
}

/// Projects a symmetric matrix onto the PSD cone: eigendecompose and clamp
/// negative eigenvalues to zero. Nearest PSD matrix in Frobenius norm.
pub fn psd_project(m: &DMatrix<f64>) -> Result<MahalanobisMatrix> {
    if m.nrows() != m.ncols() {
        return Err(Error::Shape {
            expected: (m.nrows(), m.nrows()),
            got: (m.nrows(), m.ncols()),
        });
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("non-finite entries in matrix".into()));
    }
    // symmetrize first; callers may carry ~1e-8 asymmetry from accumulation
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let q = eig.eigenvectors;
    let projected = &q * DMatrix::from_diagonal(&vals) * q.transpose();
    // reconstruction leaves tiny asymmetry; symmetrize once more
    let projected = (&projected + projected.transpose()) * 0.5;
    Ok(MahalanobisMatrix {
        d: projected.nrows(),
        values: projected,
    })
}

#[derive(Debug, Clone)]
pub struct PgdConfig {
    pub step: f64,
    pub iters: usize,
    pub max_dim: usize,
    /// Initial penalty weight on violated dissimilar constraints.
    pub penalty: f64,
    /// Constraint slack tolerated when deciding whether to escalate.
    pub constraint_tol: f64,
}

impl Default for PgdConfig {
    fn default() -> Self {
        PgdConfig {
            step: 0.05,
            iters: 500,
            max_dim: DEFAULT_MAX_DIM,
            penalty: 1.0,
            constraint_tol: 1e-3,
        }
    }
}

fn penalized_objective(
    m: &MahalanobisMatrix,
    data: &Dataset,
    pairs: &PairSet,
    mu: f64,
) -> f64 {
    let mut obj = 0.0;
    for &(i, j) in &pairs.similar {
        obj += m.pair_distance_sq(data.vector(i), data.vector(j));
    }
    for &(i, j) in &pairs.dissimilar {
        let dist = m.pair_distance_sq(data.vector(i), data.vector(j));
        obj += mu * (1.0 - dist).max(0.0);
    }
    obj
}

/// Gradient of the penalized objective: sum of delta*delta^T over similar
/// pairs minus mu times the same over violated dissimilar pairs.
fn penalized_gradient(
    m: &MahalanobisMatrix,
    data: &Dataset,
    pairs: &PairSet,
    mu: f64,
) -> DMatrix<f64> {
    let d = data.d();
    let mut grad = DMatrix::zeros(d, d);
    let mut add_outer = |i: usize, j: usize, w: f64| {
        let x = data.vector(i);
        let y = data.vector(j);
        for a in 0..d {
            let da = x[a] as f64 - y[a] as f64;
            for b in 0..d {
                let db = x[b] as f64 - y[b] as f64;
                grad[(a, b)] += w * da * db;
            }
        }
    };
    for &(i, j) in &pairs.similar {
        add_outer(i, j, 1.0);
    }
    for &(i, j) in &pairs.dissimilar {
        if m.pair_distance_sq(data.vector(i), data.vector(j)) < 1.0 {
            add_outer(i, j, -mu);
        }
    }
    grad
}

fn max_violation(m: &MahalanobisMatrix, data: &Dataset, pairs: &PairSet) -> f64 {
    pairs
        .dissimilar
        .iter()
        .map(|&(i, j)| (1.0 - m.pair_distance_sq(data.vector(i), data.vector(j))).max(0.0))
        .fold(0.0, f64::max)
}

/// Projected gradient descent on the penalized Eq.-(1)-style objective.
///
/// Starts from M = I. Each iteration takes a gradient step, projects onto
/// the PSD cone, and halves the step if the penalized objective went up.
/// Every 100 iterations the penalty weight doubles while any dissimilar
/// constraint is violated beyond the tolerance.
pub fn pgd_solve(data: &Dataset, pairs: &PairSet, config: &PgdConfig) -> Result<MahalanobisMatrix> {
    let d = data.d();
    if d > config.max_dim {
        return Err(Error::Config(format!(
            "dimension {d} exceeds baseline solver bound {}",
            config.max_dim
        )));
    }
    if pairs.is_empty() {
        return Err(Error::Config("baseline solver needs at least one pair".into()));
    }
    pairs.validate(data.n())?;

    let mut m = MahalanobisMatrix {
        d,
        values: DMatrix::identity(d, d),
    };
    let mut step = config.step;
    let mut mu = config.penalty;
    let mut obj = penalized_objective(&m, data, pairs, mu);

    for iter in 0..config.iters {
        let grad = penalized_gradient(&m, data, pairs, mu);
        let candidate = psd_project(&(&m.values - &grad * step))?;
        let cand_obj = penalized_objective(&candidate, data, pairs, mu);
        if cand_obj <= obj {
            m = candidate;
            obj = cand_obj;
        } else {
            step *= 0.5;
        }
        if (iter + 1) % 100 == 0 && max_violation(&m, data, pairs) > config.constraint_tol {
            mu *= 2.0;
            obj = penalized_objective(&m, data, pairs, mu);
        }
    }
    Ok(m)
}
