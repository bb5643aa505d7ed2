//! Distances between particle clouds and flow diagnostics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{run_flow, FlowConfig, ParticleCloud, PathAverager};
use crate::numerics::rng::{particle_streams, stream_id, tags};
use crate::numerics::{linalg, Mat, RandomStream};
use crate::targets::{ou_moment_curve, EnergyModel, GaussianMoments};

/// Largest cloud solved by exact assignment.
pub const MAX_EXACT_PARTICLES: usize = 512;

/// Minimum-cost perfect matching on a square cost matrix; entry `i` of the
/// result is the column assigned to row `i`.
///
/// Shortest augmenting paths with dual potentials, `O(n³)`.
pub fn optimal_assignment(cost: &Mat) -> Vec<usize> {
    let n = cost.rows();
    assert_eq!(n, cost.cols(), "assignment needs a square cost matrix");
    if n == 0 {
        return Vec::new();
    }
    // 1-based arrays; column 0 is a virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[owner[j] - 1] = j - 1;
    }
    assignment
}

/// An optimal coupling between two uniform empirical measures of equal
/// size, stored as a permutation.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    /// Particle `i` of the source goes to particle `assignment[i]`.
    pub assignment: Vec<usize>,
    /// `(1/N)·Σᵢ c(aᵢ, b_{σ(i)})` for the ground cost used.
    pub cost: f64,
}

impl TransportPlan {
    /// The doubly-stochastic coupling matrix with entries `1/N`.
    pub fn coupling(&self) -> Mat {
        let n = self.assignment.len();
        let mut m = Mat::zeros(n, n);
        for (i, &j) in self.assignment.iter().enumerate() {
            m[(i, j)] = 1.0 / n as f64;
        }
        m
    }
}

fn pair_cost(a: &[f64], b: &[f64], order: u32) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    if order == 1 {
        sq.sqrt()
    } else {
        sq
    }
}

fn check_pair(a: &Mat, b: &Mat, order: u32) -> Result<()> {
    if order != 1 && order != 2 {
        return Err(Error::Contract(format!("Wasserstein order must be 1 or 2, got {order}")));
    }
    if a.shape() != b.shape() {
        return Err(Error::Contract(format!("clouds have shapes {:?} and {:?}", a.shape(), b.shape())));
    }
    if a.rows() == 0 {
        return Err(Error::Contract("clouds are empty".into()));
    }
    if a.rows() > MAX_EXACT_PARTICLES {
        return Err(Error::Size(format!(
            "{} particles exceeds the exact-assignment cap of {MAX_EXACT_PARTICLES}; subsample into minibatches",
            a.rows()
        )));
    }
    Ok(())
}

/// Ground-cost matrix: Euclidean distance (order 1) or its square (order 2).
pub fn cost_matrix(a: &Mat, b: &Mat, order: u32) -> Mat {
    let n = a.rows();
    let mut c = Mat::zeros(n, b.rows());
    for i in 0..n {
        for j in 0..b.rows() {
            c[(i, j)] = pair_cost(a.row(i), b.row(j), order);
        }
    }
    c
}

/// Optimal plan for the ground cost of the given order.
pub fn transport_plan(a: &Mat, b: &Mat, order: u32) -> Result<TransportPlan> {
    check_pair(a, b, order)?;
    let c = cost_matrix(a, b, order);
    let assignment = optimal_assignment(&c);
    let mut total = 0.0;
    for (i, &j) in assignment.iter().enumerate() {
        total += c[(i, j)];
    }
    Ok(TransportPlan { assignment, cost: total / a.rows() as f64 })
}

/// `W₁` (mean matched distance) or `W₂` (root mean squared matched
/// distance) between two equal-size uniform empirical measures.
pub fn wasserstein_exact(a: &Mat, b: &Mat, order: u32) -> Result<f64> {
    let plan = transport_plan(a, b, order)?;
    Ok(if order == 1 { plan.cost } else { plan.cost.sqrt() })
}

/// Closed-form `W₂` between Gaussians.
pub fn w2_gaussian(a: &GaussianMoments, b: &GaussianMoments) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Contract("Gaussians differ in dimension".into()));
    }
    linalg::cholesky(&a.covariance)?;
    linalg::cholesky(&b.covariance)?;
    let mean_sq: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let rb = linalg::psd_sqrt(&b.covariance)?;
    let cross = linalg::psd_sqrt(&rb.matmul(&a.covariance).matmul(&rb))?;
    let tr = linalg::trace(&a.covariance) + linalg::trace(&b.covariance) - 2.0 * linalg::trace(&cross);
    Ok((mean_sq + tr.max(0.0)).sqrt())
}

/// Sample mean and unbiased sample covariance.
pub fn empirical_moments(cloud: &Mat) -> Result<GaussianMoments> {
    let (n, d) = cloud.shape();
    if n < 2 {
        return Err(Error::Contract(format!("moments need at least 2 particles, got {n}")));
    }
    let mean = cloud.column_means();
    let mut cov = Mat::zeros(d, d);
    for row in cloud.iter_rows() {
        for i in 0..d {
            let di = row[i] - mean[i];
            for j in 0..d {
                cov[(i, j)] += di * (row[j] - mean[j]);
            }
        }
    }
    let cov = cov.map(|x| x / (n - 1) as f64);
    GaussianMoments::new_unchecked(mean, cov)
}

/// Root mean per-coordinate variance: a scalar spread summary.
pub fn sample_spread(cloud: &Mat) -> Result<f64> {
    let m = empirical_moments(cloud)?;
    Ok((linalg::trace(&m.covariance) / m.dim() as f64).sqrt())
}

/// The 1-Lipschitz test functions supported by [`mse_estimate`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestFunction {
    Coordinate(usize),
    /// `min(|z|, cap)` in one dimension.
    ClampedNorm(f64),
}

impl TestFunction {
    pub fn eval(&self, z: &[f64]) -> f64 {
        match *self {
            TestFunction::Coordinate(i) => z[i],
            TestFunction::ClampedNorm(cap) => z.iter().map(|x| x * x).sum::<f64>().sqrt().min(cap),
        }
    }

    /// `E[ψ(Z)]` for `Z ~ N(mean, var·I)`; `var = 0` is a point mass.
    fn gaussian_expectation(&self, mean: &[f64], var: f64) -> Result<f64> {
        match *self {
            TestFunction::Coordinate(i) => Ok(mean[i]),
            TestFunction::ClampedNorm(cap) => {
                if mean.len() != 1 {
                    return Err(Error::Contract("the clamped-norm oracle is one-dimensional".into()));
                }
                if var == 0.0 {
                    return Ok(self.eval(mean));
                }
                let (m, s) = (mean[0], var.sqrt());
                // Composite Simpson over ±12σ, split at the kinks ±cap.
                let (lo, hi) = (m - 12.0 * s, m + 12.0 * s);
                let mut knots = vec![lo, hi];
                knots.extend([-cap, 0.0, cap].into_iter().filter(|k| *k > lo && *k < hi));
                knots.sort_by(|a, b| a.total_cmp(b));
                let f = |z: f64| z.abs().min(cap) * (-0.5 * ((z - m) / s).powi(2)).exp() / (s * std::f64::consts::TAU.sqrt());
                let mut total = 0.0;
                for w in knots.windows(2) {
                    let n = 2000;
                    let dz = (w[1] - w[0]) / n as f64;
                    let mut acc = f(w[0]) + f(w[1]);
                    for k in 1..n {
                        acc += f(w[0] + k as f64 * dz) * if k % 2 == 1 { 4.0 } else { 2.0 };
                    }
                    total += acc * dz / 3.0;
                }
                Ok(total)
            }
        }
    }
}

/// Isotropic Gaussian start `N(mean, variance·I)`; `variance = 0` starts
/// every chain at `mean`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitialGaussian {
    pub mean: Vec<f64>,
    pub variance: f64,
}

impl InitialGaussian {
    /// `n` draws, draw `i` from its own initialization stream.
    pub fn sample(&self, seed: u64, n: usize) -> Result<ParticleCloud> {
        if !(self.variance >= 0.0) {
            return Err(Error::Config(format!("initial variance must be >= 0, got {}", self.variance)));
        }
        let d = self.mean.len();
        let sd = self.variance.sqrt();
        let mut m = Mat::zeros(n, d);
        for i in 0..n {
            let mut s = RandomStream::new(seed, stream_id(tags::INIT, i as u64));
            let xi = s.draw_gaussian(d);
            for j in 0..d {
                m[(i, j)] = self.mean[j] + sd * xi[j];
            }
        }
        ParticleCloud::new(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MseEstimate {
    pub mse: f64,
    pub std_error: f64,
    /// `∫ψ ρ_T` from the analytic moments.
    pub reference: f64,
    pub repetitions: usize,
    pub total_time: f64,
}

/// Monte-Carlo MSE of the single-chain path average against `∫ψ ρ_T`,
/// over `repetitions` independent chains. Requires a standard-normal target.
pub fn mse_estimate(
    target: &EnergyModel,
    psi: TestFunction,
    config: &FlowConfig,
    initial: &InitialGaussian,
    repetitions: usize,
    seed: u64,
) -> Result<MseEstimate> {
    if !target.has_ou_oracle() {
        return Err(Error::Contract(format!("target `{}` has no analytic flow marginals", target.name())));
    }
    if repetitions == 0 || config.num_steps == 0 {
        return Err(Error::Contract("need at least one repetition and one step".into()));
    }
    if initial.mean.len() != target.dim() {
        return Err(Error::Contract("initial mean does not match the target dimension".into()));
    }
    if let TestFunction::Coordinate(i) = psi {
        if i >= target.dim() {
            return Err(Error::Contract(format!("coordinate {i} out of range")));
        }
    }
    let t = config.total_time();
    let (mu, var): (Vec<f64>, Vec<f64>) = initial.mean.iter().map(|&m| ou_moment_curve(m, initial.variance, t)).unzip();
    let reference = psi.gaussian_expectation(&mu, var[0])?;

    let start = initial.sample(seed, repetitions)?;
    let mut streams = particle_streams(seed, tags::PARTICLE, 0, repetitions);
    let mut avg = PathAverager::new(repetitions);
    let mut vals = vec![0.0; repetitions];
    run_flow(&start, target, config, &mut streams, |k, c| {
        for (v, z) in vals.iter_mut().zip(c.samples().iter_rows()) {
            *v = psi.eval(z);
        }
        avg.observe(k, &vals);
    })?;
    let sq: Vec<f64> = avg.per_particle()?.iter().map(|a| (a - reference).powi(2)).collect();
    let r = repetitions as f64;
    let mse = sq.iter().sum::<f64>() / r;
    let std_error = if repetitions > 1 {
        (sq.iter().map(|s| (s - mse).powi(2)).sum::<f64>() / (r - 1.0) / r).sqrt()
    } else {
        0.0
    };
    Ok(MseEstimate { mse, std_error, reference, repetitions, total_time: t })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}
