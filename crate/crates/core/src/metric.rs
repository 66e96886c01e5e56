//! Factorized Mahalanobis metric: the low-rank factor `L`, the pairwise
//! hinge objective and its gradients.
//!
//! The learned metric is `M = L^T L` with `L` of shape `k x d`, `k <= d`,
//! which keeps `M` positive semidefinite without any projection step. The
//! objective pulls similar pairs together and pushes dissimilar pairs past a
//! margin:
//!
//! ```text
//! sum_{(x,y) in S} ||L(x-y)||^2  +  lambda * sum_{(x,y) in D} max(0, margin - ||L(x-y)||^2)
//! ```
//!
//! Storage is `f32` (matching the wire format); dot products and gradient
//! accumulation run in `f64`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// A dense feature dataset: `n` vectors of dimension `d`, optionally labeled.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    d: usize,
    vectors: Vec<f32>, // n * d, row-major
    labels: Option<Vec<i64>>,
}

impl Dataset {
    pub fn new(d: usize, vectors: Vec<f32>, labels: Option<Vec<i64>>) -> Result<Self> {
        if d == 0 || vectors.len() % d != 0 {
            return Err(Error::Config(format!(
                "vector storage length {} is not a multiple of d={}",
                vectors.len(),
                d
            )));
        }
        let n = vectors.len() / d;
        if !vectors.iter().all(|v| v.is_finite()) {
            return Err(Error::Config("dataset contains non-finite values".into()));
        }
        if let Some(ref l) = labels {
            if l.len() != n {
                return Err(Error::Config(format!(
                    "{} labels for {} samples",
                    l.len(),
                    n
                )));
            }
        }
        Ok(Dataset {
            d,
            vectors,
            labels,
        })
    }

    pub fn n(&self) -> usize {
        self.vectors.len() / self.d
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.d..(i + 1) * self.d]
    }

    pub fn labels(&self) -> Option<&[i64]> {
        self.labels.as_deref()
    }

    pub fn label(&self, i: usize) -> Option<i64> {
        self.labels.as_ref().map(|l| l[i])
    }
}

/// The `k x d` factor `L` of the Mahalanobis matrix `M = L^T L`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricFactor {
    pub k: usize,
    pub d: usize,
    pub values: Vec<f32>, // row-major
}

impl MetricFactor {
    pub fn new(k: usize, d: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != k * d {
            return Err(Error::Shape {
                expected: (k, d),
                got: (values.len() / d.max(1), d),
            });
        }
        Ok(MetricFactor { k, d, values })
    }

    pub fn zeros(k: usize, d: usize) -> Self {
        MetricFactor {
            k,
            d,
            values: vec![0.0; k * d],
        }
    }

    /// Identity on the first `k` coordinates (exact identity when `k == d`).
    pub fn identity(k: usize, d: usize) -> Self {
        let mut m = Self::zeros(k, d);
        for r in 0..k.min(d) {
            m.values[r * d + r] = 1.0;
        }
        m
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.values[r * self.d..(r + 1) * self.d]
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }
}

/// One additive `k x d` update to `L`, produced by a worker mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientDelta {
    pub k: usize,
    pub d: usize,
    pub values: Vec<f32>,
}

impl GradientDelta {
    pub fn zeros(k: usize, d: usize) -> Self {
        GradientDelta {
            k,
            d,
            values: vec![0.0; k * d],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

/// Similar/dissimilar supervision: index pairs into a [`Dataset`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairSet {
    pub similar: Vec<(usize, usize)>,
    pub dissimilar: Vec<(usize, usize)>,
}

impl PairSet {
    pub fn validate(&self, n: usize) -> Result<()> {
        for &(i, j) in self.similar.iter().chain(self.dissimilar.iter()) {
            if i >= n {
                return Err(Error::IndexOutOfRange { index: i, n });
            }
            if j >= n {
                return Err(Error::IndexOutOfRange { index: j, n });
            }
            if i == j {
                return Err(Error::Config(format!("degenerate pair ({i}, {i})")));
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.similar.is_empty() && self.dissimilar.is_empty()
    }
}

/// Optimization hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    /// Tradeoff weight on the dissimilar hinge term.
    pub lambda: f64,
    /// Hinge threshold: dissimilar pairs should exceed this squared distance.
    pub margin: f64,
    pub learning_rate: f64,
    pub batch_similar: usize,
    pub batch_dissimilar: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            lambda: 1.0,
            margin: 1.0,
            learning_rate: 0.01,
            batch_similar: 500,
            batch_dissimilar: 500,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        if self.margin <= 0.0 || !self.margin.is_finite() {
            return Err(Error::Config("margin must be > 0".into()));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        if self.batch_similar == 0 && self.batch_dissimilar == 0 {
            return Err(Error::Config("empty batch composition".into()));
        }
        Ok(())
    }
}

fn check_dims(l: &MetricFactor, x: &[f32], y: &[f32]) -> Result<()> {
    if x.len() != l.d {
        return Err(Error::Dimension {
            expected: l.d,
            got: x.len(),
        });
    }
    if y.len() != l.d {
        return Err(Error::Dimension {
            expected: l.d,
            got: y.len(),
        });
    }
    Ok(())
}

/// Computes `u = L(x - y)` into `u_out` (length `k`), accumulating in f64.
fn project_diff(l: &MetricFactor, x: &[f32], y: &[f32], u_out: &mut [f64]) {
    for (r, u) in u_out.iter_mut().enumerate() {
        let row = l.row(r);
        let mut acc = 0.0f64;
        for j in 0..l.d {
            acc += row[j] as f64 * (x[j] as f64 - y[j] as f64);
        }
        *u = acc;
    }
}

/// Squared Mahalanobis distance `||L(x-y)||^2`. Cost O(kd).
pub fn pair_distance_sq(l: &MetricFactor, x: &[f32], y: &[f32]) -> Result<f64> {
    check_dims(l, x, y)?;
    let mut u = vec![0.0f64; l.k];
    project_diff(l, x, y, &mut u);
    Ok(u.iter().map(|v| v * v).sum())
}

/// Full objective over a pair set: similar squared distances plus the
/// weighted dissimilar hinge.
pub fn objective(
    l: &MetricFactor,
    data: &Dataset,
    pairs: &PairSet,
    hp: &Hyperparams,
) -> Result<f64> {
    pairs.validate(data.n())?;
    let mut total = 0.0f64;
    for &(i, j) in &pairs.similar {
        total += pair_distance_sq(l, data.vector(i), data.vector(j))?;
    }
    for &(i, j) in &pairs.dissimilar {
        let dist = pair_distance_sq(l, data.vector(i), data.vector(j))?;
        total += hp.lambda * (hp.margin - dist).max(0.0);
    }
    Ok(total)
}

/// Accumulates `weight * grad` of one pair's loss into `acc` (k*d, f64,
/// row-major) and returns the pair's loss term (unweighted).
///
/// The gradient is the rank-1 outer product `c * u * delta^T` with
/// `u = L * delta`; it is accumulated row by row without materializing
/// `delta * delta^T`, so cost stays O(kd).
fn accumulate_pair_gradient(
    acc: &mut [f64],
    l: &MetricFactor,
    x: &[f32],
    y: &[f32],
    is_similar: bool,
    hp: &Hyperparams,
    weight: f64,
    u_buf: &mut [f64],
) -> f64 {
    project_diff(l, x, y, u_buf);
    let dist: f64 = u_buf.iter().map(|v| v * v).sum();
    let (coef, loss) = if is_similar {
        (2.0, dist)
    } else if dist < hp.margin {
        // active hinge; at the kink (dist == margin) the inactive branch is used
        (-2.0 * hp.lambda, hp.lambda * (hp.margin - dist))
    } else {
        (0.0, 0.0)
    };
    if coef != 0.0 {
        let d = l.d;
        for (r, &u) in u_buf.iter().enumerate() {
            let c = weight * coef * u;
            let row = &mut acc[r * d..(r + 1) * d];
            for j in 0..d {
                row[j] += c * (x[j] as f64 - y[j] as f64);
            }
        }
    }
    loss
}

/// Gradient of a single pair's loss with respect to `L`.
pub fn pair_gradient(
    l: &MetricFactor,
    x: &[f32],
    y: &[f32],
    is_similar: bool,
    hp: &Hyperparams,
) -> Result<GradientDelta> {
    check_dims(l, x, y)?;
    let mut acc = vec![0.0f64; l.k * l.d];
    let mut u = vec![0.0f64; l.k];
    accumulate_pair_gradient(&mut acc, l, x, y, is_similar, hp, 1.0, &mut u);
    Ok(GradientDelta {
        k: l.k,
        d: l.d,
        values: acc.iter().map(|&v| v as f32).collect(),
    })
}

/// Mini-batch gradient plus the matching batch objective.
///
/// Each sub-batch is averaged separately, so the step size is insensitive to
/// batch-size changes. The returned objective uses the same normalization:
/// `mean_S ||L delta||^2 + lambda * mean_D hinge`.
pub fn minibatch_gradient_with_objective(
    l: &MetricFactor,
    data: &Dataset,
    batch_similar: &[(usize, usize)],
    batch_dissimilar: &[(usize, usize)],
    hp: &Hyperparams,
) -> Result<(GradientDelta, f64)> {
    if batch_similar.is_empty() && batch_dissimilar.is_empty() {
        return Err(Error::Config("empty mini-batch".into()));
    }
    let n = data.n();
    let mut acc = vec![0.0f64; l.k * l.d];
    let mut u = vec![0.0f64; l.k];
    let mut obj = 0.0f64;
    if !batch_similar.is_empty() {
        let w = 1.0 / batch_similar.len() as f64;
        let mut loss_sum = 0.0;
        for &(i, j) in batch_similar {
            if i >= n || j >= n {
                return Err(Error::IndexOutOfRange { index: i.max(j), n });
            }
            loss_sum +=
                accumulate_pair_gradient(&mut acc, l, data.vector(i), data.vector(j), true, hp, w, &mut u);
        }
        obj += w * loss_sum;
    }
    if !batch_dissimilar.is_empty() {
        let w = 1.0 / batch_dissimilar.len() as f64;
        let mut loss_sum = 0.0;
        for &(i, j) in batch_dissimilar {
            if i >= n || j >= n {
                return Err(Error::IndexOutOfRange { index: i.max(j), n });
            }
            loss_sum += accumulate_pair_gradient(
                &mut acc,
                l,
                data.vector(i),
                data.vector(j),
                false,
                hp,
                w,
                &mut u,
            );
        }
        obj += w * loss_sum;
    }
    let delta = GradientDelta {
        k: l.k,
        d: l.d,
        values: acc.iter().map(|&v| v as f32).collect(),
    };
    Ok((delta, obj))
}

/// Mini-batch gradient: per-sub-batch mean of pair gradients.
pub fn minibatch_gradient(
    l: &MetricFactor,
    data: &Dataset,
    batch_similar: &[(usize, usize)],
    batch_dissimilar: &[(usize, usize)],
    hp: &Hyperparams,
) -> Result<GradientDelta> {
    minibatch_gradient_with_objective(l, data, batch_similar, batch_dissimilar, hp)
        .map(|(delta, _)| delta)
}

/// Returns `delta` scaled by `factor` (e.g. `-eta` to pre-scale for descent).
pub fn scale_delta(delta: &GradientDelta, factor: f64) -> GradientDelta {
    GradientDelta {
        k: delta.k,
        d: delta.d,
        values: delta
            .values
            .iter()
            .map(|&v| (v as f64 * factor) as f32)
            .collect(),
    }
}

/// Returns `L + scale * delta`.
pub fn apply_delta(l: &MetricFactor, delta: &GradientDelta, scale: f64) -> Result<MetricFactor> {
    let mut out = l.clone();
    apply_delta_in_place(&mut out, delta, scale)?;
    Ok(out)
}

/// In-place `L += scale * delta`.
pub fn apply_delta_in_place(
    l: &mut MetricFactor,
    delta: &GradientDelta,
    scale: f64,
) -> Result<()> {
    if delta.k != l.k || delta.d != l.d {
        return Err(Error::Shape {
            expected: (l.k, l.d),
            got: (delta.k, delta.d),
        });
    }
    for (v, &g) in l.values.iter_mut().zip(delta.values.iter()) {
        *v = (*v as f64 + scale * g as f64) as f32;
    }
    Ok(())
}

/// Gaussian initialization, sigma = 1/sqrt(d), deterministic per seed
/// (ChaCha8 stream).
pub fn init_factor(k: usize, d: usize, seed: u64) -> Result<MetricFactor> {
    if k == 0 || k > d {
        return Err(Error::Config(format!("need 1 <= k <= d, got k={k}, d={d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, 1.0 / (d as f32).sqrt()).expect("valid sigma");
    let values = (0..k * d).map(|_| normal.sample(&mut rng)).collect();
    Ok(MetricFactor { k, d, values })
}
