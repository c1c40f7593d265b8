//! Exact t-SNE on policy features.
//!
//! Affinities are computed in the input space with a per-point Gaussian
//! whose bandwidth is found by bisection on the row entropy, symmetrized,
//! and matched by a Student-t (one degree of freedom) kernel in 2-D through
//! gradient descent on KL(P || Q). The optimizer follows the usual recipe:
//! early exaggeration, a two-phase momentum schedule and per-coordinate gains.
//!
//! Sums across points are accumulated in 128-bit fixed point, which is
//! associative, so results do not depend on point order: permuting the
//! input rows (and their initial coordinates) permutes the output exactly.

use crate::env::Action;
use crate::error::{shape_err, Error, Result};
use crate::network::PolicyNetwork;
use crate::rng;
use crate::tensor::Tensor;

const BISECTION_STEPS: usize = 50;
const ENTROPY_TOLERANCE: f64 = 1e-5;
const MIN_GAIN: f64 = 0.01;
const INIT_STD: f64 = 1e-4;

/// Order-independent accumulator: each term is rounded to a multiple of
/// 2^-64 and summed exactly as an integer.
#[derive(Debug, Clone, Copy, Default)]
struct FixedSum(i128);

impl FixedSum {
    const SCALE: f64 = 18_446_744_073_709_551_616.0;

    fn add(&mut self, v: f64) {
        self.0 += (v * Self::SCALE) as i128;
    }

    fn value(self) -> f64 {
        self.0 as f64 / Self::SCALE
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    /// Iterations during which P is exaggerated.
    pub exaggeration_iters: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    /// Iteration at which momentum switches to `final_momentum`.
    pub momentum_switch: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch: 250,
            seed: 0,
        }
    }
}

impl TsneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.perplexity >= 2.0) {
            return Err(Error::Config(format!("perplexity must be at least 2, got {}", self.perplexity)));
        }
        if self.iterations == 0 {
            return Err(Error::Config("t-SNE needs at least one iteration".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("t-SNE learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Perplexity actually used for `n` points: at most `(n - 1) / 3`, but never
/// below 2.
pub fn effective_perplexity(perplexity: f64, n: usize) -> f64 {
    perplexity.min(((n as f64 - 1.0) / 3.0).max(2.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub points: Vec<[f64; 2]>,
    pub action_tags: Vec<Action>,
    pub source_indices: Vec<usize>,
}

impl Embedding {
    pub fn new(points: Vec<[f64; 2]>, action_tags: Vec<Action>, source_indices: Vec<usize>) -> Result<Self> {
        if points.len() != action_tags.len() || points.len() != source_indices.len() {
            return shape_err(format!(
                "embedding lengths differ: {} points, {} tags, {} indices",
                points.len(),
                action_tags.len(),
                source_indices.len()
            ));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Usage("embedding contains non-finite coordinates".into()));
        }
        Ok(Self {
            points,
            action_tags,
            source_indices,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Symmetric joint affinities, `n x n` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Affinities {
    pub n: usize,
    pub p: Vec<f64>,
}

impl Affinities {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.p[i * self.n + j]
    }
}

fn rows_of(features: &Tensor) -> Result<(usize, usize)> {
    if features.ndim() != 2 {
        return shape_err(format!("features must be [n, d], got {:?}", features.shape()));
    }
    let (n, d) = (features.shape()[0], features.shape()[1]);
    if n < 4 {
        return Err(Error::Usage(format!("t-SNE needs at least 4 points, got {n}")));
    }
    if !features.is_finite() {
        return Err(Error::Usage("features contain non-finite values".into()));
    }
    Ok((n, d))
}

fn squared_distances(features: &Tensor) -> Result<(usize, Vec<f64>)> {
    let (n, d) = rows_of(features)?;
    let x = features.data();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let mut acc = 0.0f64;
            for k in 0..d {
                let diff = x[i * d + k] as f64 - x[j * d + k] as f64;
                acc += diff * diff;
            }
            dist[i * n + j] = acc;
            dist[j * n + i] = acc;
        }
    }
    Ok((n, dist))
}

/// Gaussian conditional distribution for one row at precision `beta`, and
/// its Shannon entropy in nats. `offset` is subtracted from every distance
/// for numerical range and cancels out after normalization.
fn row_distribution(dists: &[f64], self_idx: usize, beta: f64, offset: f64, out: &mut [f64]) -> f64 {
    let mut sum = FixedSum::default();
    for (j, (&d, o)) in dists.iter().zip(out.iter_mut()).enumerate() {
        *o = if j == self_idx { 0.0 } else { (-(d - offset) * beta).exp() };
        sum.add(*o);
    }
    let sum = sum.value();
    let mut weighted = FixedSum::default();
    for (j, (&d, o)) in dists.iter().zip(out.iter_mut()).enumerate() {
        if j != self_idx {
            *o /= sum;
            weighted.add((d - offset) * *o);
        }
    }
    sum.ln() + beta * weighted.value()
}

/// Conditional affinities `p_{j|i}` (`n x n`, each row sums to 1), with each
/// row's bandwidth bisected so its perplexity matches the target.
pub fn conditional_affinities(features: &Tensor, perplexity: f64) -> Result<Vec<f64>> {
    let (n, dist) = squared_distances(features)?;
    let perp = effective_perplexity(perplexity, n);
    let target = perp.ln();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let row = &dist[i * n..(i + 1) * n];
        let out = &mut p[i * n..(i + 1) * n];
        let offset = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, &d)| d)
            .fold(f64::INFINITY, f64::min);
        let spread = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, &d)| d - offset)
            .fold(0.0, f64::max);
        if spread == 0.0 {
            // every neighbor equidistant (e.g. duplicates): uniform row
            for (j, o) in out.iter_mut().enumerate() {
                *o = if j == i { 0.0 } else { 1.0 / (n - 1) as f64 };
            }
            continue;
        }
        let mut beta = 1.0;
        let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
        for _ in 0..BISECTION_STEPS {
            let h = row_distribution(row, i, beta, offset, out);
            let diff = h - target;
            if diff.abs() < ENTROPY_TOLERANCE {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
        row_distribution(row, i, beta, offset, out);
    }
    Ok(p)
}

/// Joint affinities `p_ij = (p_{j|i} + p_{i|j}) / 2n`.
pub fn pairwise_affinities(features: &Tensor, perplexity: f64) -> Result<Affinities> {
    let cond = conditional_affinities(features, perplexity)?;
    let n = features.shape()[0];
    let mut p = vec![0.0; n * n];
    let denom = 2.0 * n as f64;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i * n + j] = (cond[i * n + j] + cond[j * n + i]) / denom;
            }
        }
    }
    Ok(Affinities { n, p })
}

/// Unnormalized Student-t kernel values and their sum.
fn student_t(points: &[[f64; 2]], num: &mut [f64]) -> f64 {
    let n = points.len();
    let mut total = FixedSum::default();
    for i in 0..n {
        num[i * n + i] = 0.0;
        for j in i + 1..n {
            let dx = points[i][0] - points[j][0];
            let dy = points[i][1] - points[j][1];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            num[i * n + j] = v;
            num[j * n + i] = v;
            total.add(2.0 * v);
        }
    }
    total.value()
}

/// `KL(P || Q)` for the given low-dimensional layout.
pub fn kl_divergence(p: &Affinities, points: &[[f64; 2]]) -> f64 {
    let n = p.n;
    assert_eq!(points.len(), n);
    let mut num = vec![0.0; n * n];
    let total = student_t(points, &mut num);
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            let pij = p.p[i * n + j];
            if i != j && pij > 0.0 {
                let q = (num[i * n + j] / total).max(f64::MIN_POSITIVE);
                kl += pij * (pij / q).ln();
            }
        }
    }
    kl
}

/// Initial layout: isotropic Gaussian with standard deviation 1e-4.
pub fn initial_points(n: usize, seed: u64) -> Vec<[f64; 2]> {
    let mut r = rng::seeded(seed);
    (0..n)
        .map(|_| {
            let x = INIT_STD * rng::gaussian(&mut r);
            let y = INIT_STD * rng::gaussian(&mut r);
            [x, y]
        })
        .collect()
}

/// Gradient descent from `init`. `observe` sees the layout after every
/// iteration (iteration index is 1-based).
pub fn optimize(
    p: &Affinities,
    init: &[[f64; 2]],
    cfg: &TsneConfig,
    mut observe: impl FnMut(usize, &[[f64; 2]]),
) -> Result<Vec<[f64; 2]>> {
    cfg.validate()?;
    let n = p.n;
    if init.len() != n {
        return shape_err(format!("{} initial points for {n} affinity rows", init.len()));
    }
    let mut y = init.to_vec();
    let mut velocity = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut num = vec![0.0; n * n];
    let mut grad = vec![[0.0f64; 2]; n];
    for iter in 0..cfg.iterations {
        let exaggeration = if iter < cfg.exaggeration_iters {
            cfg.early_exaggeration
        } else {
            1.0
        };
        let momentum = if iter < cfg.momentum_switch {
            cfg.initial_momentum
        } else {
            cfg.final_momentum
        };
        let total = student_t(&y, &mut num);
        for i in 0..n {
            let mut g = [FixedSum::default(); 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = num[i * n + j];
                let coeff = (exaggeration * p.p[i * n + j] - w / total) * w;
                g[0].add(coeff * (y[i][0] - y[j][0]));
                g[1].add(coeff * (y[i][1] - y[j][1]));
            }
            grad[i] = [4.0 * g[0].value(), 4.0 * g[1].value()];
        }
        for i in 0..n {
            for d in 0..2 {
                let same_sign = (grad[i][d] > 0.0) == (velocity[i][d] > 0.0);
                gains[i][d] = if same_sign {
                    gains[i][d] * 0.8
                } else {
                    gains[i][d] + 0.2
                }
                .max(MIN_GAIN);
                velocity[i][d] = momentum * velocity[i][d] - cfg.learning_rate * gains[i][d] * grad[i][d];
                y[i][d] += velocity[i][d];
            }
        }
        let mut sum = [FixedSum::default(); 2];
        for pt in &y {
            sum[0].add(pt[0]);
            sum[1].add(pt[1]);
        }
        let mean = [sum[0].value() / n as f64, sum[1].value() / n as f64];
        for pt in &mut y {
            pt[0] -= mean[0];
            pt[1] -= mean[1];
        }
        observe(iter + 1, &y);
    }
    Ok(y)
}

/// Full pipeline: affinities, seeded initialization, optimization.
pub fn embed(features: &Tensor, cfg: &TsneConfig) -> Result<Vec<[f64; 2]>> {
    cfg.validate()?;
    let p = pairwise_affinities(features, cfg.perplexity)?;
    let init = initial_points(p.n, cfg.seed);
    optimize(&p, &init, cfg, |_, _| {})
}

/// Penultimate (post-ReLU) activations for each observation, `[n, 64]`.
pub fn extract_features(net: &PolicyNetwork, observations: &[Tensor]) -> Result<Tensor> {
    if observations.is_empty() {
        return Err(Error::Usage("no observations to extract features from".into()));
    }
    let mut data = Vec::new();
    for obs in observations {
        data.extend_from_slice(net.forward(obs)?.hidden().data());
    }
    let dim = data.len() / observations.len();
    Tensor::new(vec![observations.len(), dim], data)
}

/// Fraction of each point's `k` nearest neighbors (Euclidean, excluding the
/// point itself) that share its label, averaged over points.
pub fn knn_purity<L: PartialEq>(points: &[[f64; 2]], labels: &[L], k: usize) -> f64 {
    assert_eq!(points.len(), labels.len());
    let n = points.len();
    if n < 2 || k == 0 {
        return 0.0;
    }
    let k = k.min(n - 1);
    let mut total = 0.0;
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        order.clear();
        order.extend((0..n).filter(|&j| j != i).map(|j| {
            let dx = points[i][0] - points[j][0];
            let dy = points[i][1] - points[j][1];
            (dx * dx + dy * dy, j)
        }));
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let same = order[..k].iter().filter(|&&(_, j)| labels[j] == labels[i]).count();
        total += same as f64 / k as f64;
    }
    total / n as f64
}
