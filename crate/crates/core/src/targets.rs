//! Target distributions given as unnormalized log-densities.
//!
//! An [`EnergyModel`] wraps a scalar [`DiffFn`] returning `log p̃(z)`; for the
//! two toy potentials that is `−U(z)`. Gaussian and mixture targets also
//! carry their log normalizer and an exact sampler, which the oracles use.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::function::{evaluate_batch, gradient_batch, DiffFn};
use crate::numerics::graph::{logsumexp, Graph, Var};
use crate::numerics::linalg;
use crate::numerics::{Mat, ParamMap, ParamSpec, RandomStream};

/// Anything the Langevin kernel can be pointed at: a log-density with
/// gradients, evaluated one point per row.
pub trait Target: Sync {
    fn dim(&self) -> usize;

    /// `(log p̃(zᵢ), ∇ log p̃(zᵢ))` for every row `zᵢ`.
    fn log_density_grad(&self, z: &Mat) -> Result<(Vec<f64>, Mat)>;
}

/// Mean and covariance of a Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMoments {
    pub mean: Vec<f64>,
    pub covariance: Mat,
}

impl GaussianMoments {
    /// Validated constructor: the covariance must be symmetric positive definite.
    pub fn new(mean: Vec<f64>, covariance: Mat) -> Result<Self> {
        let m = Self::new_unchecked(mean, covariance)?;
        linalg::cholesky(&m.covariance)?;
        Ok(m)
    }

    /// Shape checks only; empirical covariances may be singular.
    pub fn new_unchecked(mean: Vec<f64>, covariance: Mat) -> Result<Self> {
        if covariance.shape() != (mean.len(), mean.len()) {
            return Err(Error::Contract(format!(
                "covariance {:?} does not match mean of length {}",
                covariance.shape(),
                mean.len()
            )));
        }
        Ok(Self { mean, covariance })
    }

    pub fn scalar(mean: f64, variance: f64) -> Result<Self> {
        Self::new(vec![mean], Mat::scalar(variance))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn variance(&self, i: usize) -> f64 {
        self.covariance[(i, i)]
    }
}

/// Exact solution of the Fokker–Planck equation for Langevin dynamics
/// towards `N(0, 1)` started from `N(mu0, var0)`:
/// `μ_t = μ₀e^{−t/2}`, `σ²_t = 1 + (σ₀² − 1)e^{−t}`.
pub fn ou_analytic_moments(mu0: f64, var0: f64, t: f64) -> Result<GaussianMoments> {
    if !(var0 > 0.0) || !(t >= 0.0) {
        return Err(Error::Contract(format!("need var0 > 0 and t >= 0, got var0={var0}, t={t}")));
    }
    let (mean, var) = ou_moment_curve(mu0, var0, t);
    GaussianMoments::scalar(mean, var)
}

/// The same curve without validation; `t = ∞` gives the stationary moments.
pub fn ou_moment_curve(mu0: f64, var0: f64, t: f64) -> (f64, f64) {
    (mu0 * (-t / 2.0).exp(), 1.0 + (var0 - 1.0) * (-t).exp())
}

#[derive(Clone, Debug)]
enum ExactSampler {
    Gaussian { mean: Vec<f64>, chol: Mat },
    Mixture { log_weights: Vec<f64>, components: Vec<(Vec<f64>, Mat)> },
}

/// An unnormalized log-density `log p̃(z)` with gradient access.
#[derive(Clone, Debug)]
pub struct EnergyModel {
    name: String,
    dim: usize,
    function: Arc<dyn DiffFn>,
    params: ParamMap,
    log_normalizer: Option<f64>,
    sampler: Option<ExactSampler>,
    stationary: Option<GaussianMoments>,
    ou_oracle: bool,
}

impl EnergyModel {
    pub fn new(name: impl Into<String>, function: Arc<dyn DiffFn>, params: ParamMap) -> Result<Self> {
        params.check_signature(&function.signature())?;
        if function.output_dim() != 1 {
            return Err(Error::Contract("an energy model needs a scalar log-density".into()));
        }
        Ok(Self {
            name: name.into(),
            dim: function.input_dim(),
            function,
            params,
            log_normalizer: None,
            sampler: None,
            stationary: None,
            ou_oracle: false,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn function(&self) -> &dyn DiffFn {
        self.function.as_ref()
    }

    pub fn function_handle(&self) -> Arc<dyn DiffFn> {
        self.function.clone()
    }

    pub fn params(&self) -> &ParamMap {
        &self.params
    }

    /// `ln ∫ p̃`, when known in closed form.
    pub fn log_normalizer(&self) -> Option<f64> {
        self.log_normalizer
    }

    /// Moments of the normalized target when it is Gaussian.
    pub fn gaussian_moments(&self) -> Option<&GaussianMoments> {
        self.stationary.as_ref()
    }

    /// True for the standard-normal target whose Langevin marginals are
    /// given by [`ou_analytic_moments`].
    pub fn has_ou_oracle(&self) -> bool {
        self.ou_oracle
    }

    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        Ok(self.log_density_batch(&Mat::row_vector(z.to_vec()))?[0])
    }

    pub fn log_density_batch(&self, z: &Mat) -> Result<Vec<f64>> {
        Ok(evaluate_batch(self.function.as_ref(), &self.params, z)?.into_vec())
    }

    /// The potential `U(z) = −log p̃(z)`.
    pub fn potential(&self, z: &[f64]) -> Result<f64> {
        Ok(-self.log_density(z)?)
    }

    /// Independent exact draws, for targets that support it.
    pub fn sample_exact(&self, stream: &mut RandomStream, n: usize) -> Option<Mat> {
        let sampler = self.sampler.as_ref()?;
        let mut out = Mat::zeros(n, self.dim);
        for i in 0..n {
            let (mean, chol) = match sampler {
                ExactSampler::Gaussian { mean, chol } => (mean, chol),
                ExactSampler::Mixture { log_weights, components } => {
                    let u = stream.uniform();
                    let mut acc = 0.0;
                    let mut k = components.len() - 1;
                    for (j, lw) in log_weights.iter().enumerate() {
                        acc += lw.exp();
                        if u < acc {
                            k = j;
                            break;
                        }
                    }
                    (&components[k].0, &components[k].1)
                }
            };
            let eps = stream.draw_gaussian(self.dim);
            for r in 0..self.dim {
                let s: f64 = (0..=r).map(|c| chol[(r, c)] * eps[c]).sum();
                out[(i, r)] = mean[r] + s;
            }
        }
        Some(out)
    }
}

/// Rows per chunk when targets are evaluated in parallel. Fixed so results
/// never depend on the worker count.
pub const CHUNK_ROWS: usize = 256;

impl Target for EnergyModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density_grad(&self, z: &Mat) -> Result<(Vec<f64>, Mat)> {
        if z.cols() != self.dim {
            return Err(Error::Contract(format!("target has dimension {}, points have {}", self.dim, z.cols())));
        }
        if z.rows() <= CHUNK_ROWS {
            let g = gradient_batch(self.function.as_ref(), &self.params, z, false)?;
            return Ok((g.values, g.input));
        }
        let starts: Vec<usize> = (0..z.rows()).step_by(CHUNK_ROWS).collect();
        let parts: Vec<Result<(Vec<f64>, Mat)>> = starts
            .par_iter()
            .map(|&s| {
                let chunk = z.slice_rows(s, (s + CHUNK_ROWS).min(z.rows()));
                let g = gradient_batch(self.function.as_ref(), &self.params, &chunk, false)?;
                Ok((g.values, g.input))
            })
            .collect();
        let mut values = Vec::with_capacity(z.rows());
        let mut grads = Vec::with_capacity(parts.len());
        for p in parts {
            let (v, g) = p?;
            values.extend(v);
            grads.push(g);
        }
        let refs: Vec<&Mat> = grads.iter().collect();
        Ok((values, Mat::vcat(&refs)))
    }
}

/// First toy potential: a ring of radius 2 modulated by two bumps in `z₂`.
/// `U(z) = ½((‖z‖−2)/0.4)² − ln(e^{−½((z₂−4)/2)²} + e^{−½((z₂+2)/0.2)²})`.
#[derive(Clone, Debug)]
pub struct RingBimodal;

impl DiffFn for RingBimodal {
    fn signature(&self) -> Vec<ParamSpec> {
        Vec::new()
    }
    fn input_dim(&self) -> usize {
        2
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn forward(&self, g: &Graph, _p: &[Var], z: Var) -> Var {
        let ring = g.scale(g.square(g.offset(g.norm_rows(z), -2.0)), 0.5 / (0.4 * 0.4));
        let z2 = g.slice_cols(z, 1, 1);
        let upper = g.scale(g.square(g.offset(z2, -4.0)), -0.5 / (2.0 * 2.0));
        let lower = g.scale(g.square(g.offset(z2, 2.0)), -0.5 / (0.2 * 0.2));
        let mix = g.logsumexp_rows(g.concat(upper, lower));
        g.sub(mix, ring)
    }
}

/// Second toy potential: two sinusoidal wells,
/// `U(z) = −ln(e^{−½((z₂−w₁)/0.35)²} + e^{−½((z₂−w₁+w₂)/0.35)²})` with
/// `w₁ = sin(2πz₁/4)` and `w₂ = 3·exp(−½((z₁−1)/0.6)²)`.
#[derive(Clone, Debug)]
pub struct SineWells;

impl DiffFn for SineWells {
    fn signature(&self) -> Vec<ParamSpec> {
        Vec::new()
    }
    fn input_dim(&self) -> usize {
        2
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn forward(&self, g: &Graph, _p: &[Var], z: Var) -> Var {
        let z1 = g.slice_cols(z, 0, 1);
        let z2 = g.slice_cols(z, 1, 1);
        let w1 = g.sin(g.scale(z1, std::f64::consts::TAU / 4.0));
        let w2 = g.scale(g.exp(g.scale(g.square(g.offset(z1, -1.0)), -0.5 / (0.6 * 0.6))), 3.0);
        let d1 = g.sub(z2, w1);
        let d2 = g.add(d1, w2);
        let k = -0.5 / (0.35 * 0.35);
        g.logsumexp_rows(g.concat(g.scale(g.square(d1), k), g.scale(g.square(d2), k)))
    }
}

/// `−½(z−μ)ᵀP(z−μ)` with a fixed precision matrix `P`.
#[derive(Clone, Debug)]
pub struct GaussianLogDensity {
    pub mean: Vec<f64>,
    pub precision: Mat,
}

impl DiffFn for GaussianLogDensity {
    fn signature(&self) -> Vec<ParamSpec> {
        Vec::new()
    }
    fn input_dim(&self) -> usize {
        self.mean.len()
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn forward(&self, g: &Graph, _p: &[Var], z: Var) -> Var {
        quadratic_form(g, z, &self.mean, &self.precision, -0.5)
    }
}

/// `k·(z−μ)ᵀP(z−μ)` per row.
fn quadratic_form(g: &Graph, z: Var, mean: &[f64], precision: &Mat, k: f64) -> Var {
    let neg_mean = g.constant(Mat::row_vector(mean.iter().map(|m| -m).collect()));
    let d = g.add_row(z, neg_mean);
    let pd = g.matmul(d, g.constant(precision.clone()));
    g.scale(g.sum_cols(g.mul(pd, d)), k)
}

/// Normalized log-density of a finite Gaussian mixture.
#[derive(Clone, Debug)]
pub struct MixtureLogDensity {
    pub log_weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub precisions: Vec<Mat>,
    /// `log wₖ − ½ ln det(2πΣₖ)` per component.
    offsets: Vec<f64>,
}

impl DiffFn for MixtureLogDensity {
    fn signature(&self) -> Vec<ParamSpec> {
        Vec::new()
    }
    fn input_dim(&self) -> usize {
        self.means[0].len()
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn forward(&self, g: &Graph, _p: &[Var], z: Var) -> Var {
        let terms: Vec<Var> = (0..self.means.len())
            .map(|k| g.offset(quadratic_form(g, z, &self.means[k], &self.precisions[k], -0.5), self.offsets[k]))
            .collect();
        g.logsumexp_rows(g.concat_all(&terms))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ToyPotential {
    RingBimodal,
    SineWells,
}

impl std::str::FromStr for ToyPotential {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ring_bimodal" => Ok(Self::RingBimodal),
            "sine_wells" => Ok(Self::SineWells),
            other => Err(Error::Config(format!("unknown toy potential `{other}`"))),
        }
    }
}

pub fn make_toy_potential(name: &str) -> Result<EnergyModel> {
    let (label, f): (&str, Arc<dyn DiffFn>) = match name.parse()? {
        ToyPotential::RingBimodal => ("ring_bimodal", Arc::new(RingBimodal)),
        ToyPotential::SineWells => ("sine_wells", Arc::new(SineWells)),
    };
    EnergyModel::new(label, f, ParamMap::new())
}

/// `N(mean, covariance)` with log density `−½(z−μ)ᵀΣ⁻¹(z−μ)` up to the
/// stored normalizer `½ ln det(2πΣ)`.
pub fn make_gaussian(mean: Vec<f64>, covariance: Mat) -> Result<EnergyModel> {
    let moments = GaussianMoments::new(mean.clone(), covariance.clone())?;
    let precision = linalg::spd_inverse(&covariance)?;
    let chol = linalg::cholesky(&covariance)?;
    let d = mean.len() as f64;
    let log_norm = 0.5 * (d * std::f64::consts::TAU.ln() + linalg::spd_log_det(&covariance)?);
    let mut model = EnergyModel::new("gaussian", Arc::new(GaussianLogDensity { mean: mean.clone(), precision }), ParamMap::new())?;
    model.log_normalizer = Some(log_norm);
    model.sampler = Some(ExactSampler::Gaussian { mean, chol });
    model.stationary = Some(moments);
    Ok(model)
}

/// `N(0, I_d)`; in one dimension this is the Ornstein–Uhlenbeck oracle target.
pub fn standard_normal(dim: usize) -> EnergyModel {
    let mut m = make_gaussian(vec![0.0; dim], Mat::identity(dim)).expect("identity is SPD");
    m.name = if dim == 1 { "ou".into() } else { format!("standard_normal_{dim}d") };
    m.ou_oracle = true;
    m
}

/// Normalized Gaussian mixture; weights are renormalized.
pub fn make_mixture(weights: &[f64], means: Vec<Vec<f64>>, covariances: Vec<Mat>) -> Result<EnergyModel> {
    if weights.is_empty() || weights.len() != means.len() || means.len() != covariances.len() {
        return Err(Error::Config("mixture needs matching, non-empty weights, means and covariances".into()));
    }
    if weights.iter().any(|w| !(*w > 0.0)) {
        return Err(Error::Config("mixture weights must be positive".into()));
    }
    let total: f64 = weights.iter().sum();
    let log_weights: Vec<f64> = weights.iter().map(|w| (w / total).ln()).collect();
    let d = means[0].len();
    let mut precisions = Vec::new();
    let mut offsets = Vec::new();
    let mut components = Vec::new();
    for ((m, c), lw) in means.iter().zip(&covariances).zip(&log_weights) {
        if m.len() != d {
            return Err(Error::Config("mixture components disagree on dimension".into()));
        }
        precisions.push(linalg::spd_inverse(c)?);
        offsets.push(lw - 0.5 * (d as f64 * std::f64::consts::TAU.ln() + linalg::spd_log_det(c)?));
        components.push((m.clone(), linalg::cholesky(c)?));
    }
    let f = MixtureLogDensity { log_weights: log_weights.clone(), means, precisions, offsets };
    let mut model = EnergyModel::new("mixture", Arc::new(f), ParamMap::new())?;
    model.log_normalizer = Some(0.0);
    model.sampler = Some(ExactSampler::Mixture { log_weights, components });
    Ok(model)
}

/// Equal-weight, unit-covariance blobs at `(−2, 0)` and `(2, 0)`.
pub fn two_gaussians() -> EnergyModel {
    let mut m = make_mixture(
        &[0.5, 0.5],
        vec![vec![-2.0, 0.0], vec![2.0, 0.0]],
        vec![Mat::identity(2), Mat::identity(2)],
    )
    .expect("valid mixture");
    m.name = "two_gaussians".into();
    m
}

/// Names accepted by [`by_name`].
pub const REGISTRY: &[&str] = &["ou", "standard_normal_2d", "ring_bimodal", "sine_wells", "two_gaussians"];

/// Target registry used by experiment configs.
pub fn by_name(name: &str) -> Result<EnergyModel> {
    match name {
        "ou" => Ok(standard_normal(1)),
        "standard_normal_2d" => Ok(standard_normal(2)),
        "ring_bimodal" | "sine_wells" => make_toy_potential(name),
        "two_gaussians" => Ok(two_gaussians()),
        other => Err(Error::Config(format!("unknown target `{other}` (known: {})", REGISTRY.join(", ")))),
    }
}

/// `ln ∫ e^{log p̃}` by a tensor-product midpoint rule over a 2-D box.
/// Used to cross-check normalizers and well masses of the toy targets.
pub fn grid_log_mass(model: &EnergyModel, lo: [f64; 2], hi: [f64; 2], n: usize, region: impl Fn(f64, f64) -> bool) -> Result<f64> {
    let (dx, dy) = ((hi[0] - lo[0]) / n as f64, (hi[1] - lo[1]) / n as f64);
    let mut pts = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let (x, y) = (lo[0] + (i as f64 + 0.5) * dx, lo[1] + (j as f64 + 0.5) * dy);
            if region(x, y) {
                pts.push([x, y]);
            }
        }
    }
    if pts.is_empty() {
        return Ok(f64::NEG_INFINITY);
    }
    let vals = model.log_density_batch(&Mat::from_rows(&pts))?;
    Ok(logsumexp(&vals) + (dx * dy).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::function::check_gradient;

    #[test]
    fn ring_bimodal_closed_form_points() {
        let m = make_toy_potential("ring_bimodal").unwrap();
        let u0 = 12.5 - ((-2.0f64).exp() + (-50.0f64).exp()).ln();
        assert!((m.potential(&[0.0, 0.0]).unwrap() - u0).abs() < 1e-12);
        assert!((u0 - 14.5).abs() < 1e-9);
        let u2 = -((-2.0f64).exp() + (-50.0f64).exp()).ln();
        assert!((m.potential(&[2.0, 0.0]).unwrap() - u2).abs() < 1e-12);
    }

    #[test]
    fn sine_wells_at_zero_abscissa() {
        let m = make_toy_potential("sine_wells").unwrap();
        for z2 in [-1.0, 0.0, 0.4, 2.0] {
            let w2 = 3.0 * (-0.5f64 * (1.0 / 0.6f64).powi(2)).exp();
            let a = -0.5 * (z2 / 0.35f64).powi(2);
            let b = -0.5 * ((z2 + w2) / 0.35f64).powi(2);
            let expect = logsumexp(&[a, b]);
            assert!((m.log_density(&[0.0, z2]).unwrap() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_names_are_config_errors() {
        assert!(matches!(make_toy_potential("banana"), Err(Error::Config(_))));
        assert!(matches!(by_name("nope"), Err(Error::Config(_))));
    }

    #[test]
    fn gaussian_examples() {
        let g = make_gaussian(vec![0.0, 0.0], Mat::identity(2)).unwrap();
        assert_eq!(g.log_density(&[1.0, 1.0]).unwrap(), -1.0);
        let g1 = make_gaussian(vec![0.0], Mat::scalar(4.0)).unwrap();
        assert_eq!(g1.log_density(&[2.0]).unwrap(), -0.5);
        assert!(matches!(
            make_gaussian(vec![0.0, 0.0], Mat::from_rows(&[[1.0, 2.0], [2.0, 1.0]])),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn gaussian_gradient_is_minus_precision_times_offset() {
        let cov = Mat::from_rows(&[[2.0, 0.5], [0.5, 1.0]]);
        let g = make_gaussian(vec![1.0, -1.0], cov.clone()).unwrap();
        let z = Mat::from_rows(&[[0.3, 0.7]]);
        let (_, grad) = g.log_density_grad(&z).unwrap();
        let p = linalg::spd_inverse(&cov).unwrap();
        let d = [0.3 - 1.0, 0.7 + 1.0];
        for i in 0..2 {
            let expect = -(p[(i, 0)] * d[0] + p[(i, 1)] * d[1]);
            assert!((grad[(0, i)] - expect).abs() < 1e-12);
        }
        assert!(check_gradient(g.function(), g.params(), &[0.3, 0.7], 1e-5).unwrap() < 1e-6);
    }

    #[test]
    fn ou_moments_examples() {
        let m0 = ou_analytic_moments(3.0, 4.0, 0.0).unwrap();
        assert_eq!((m0.mean[0], m0.variance(0)), (3.0, 4.0));
        let m2 = ou_analytic_moments(3.0, 4.0, 2.0).unwrap();
        assert!((m2.mean[0] - 3.0 * (-1.0f64).exp()).abs() < 1e-15);
        assert!((m2.mean[0] - 1.10364).abs() < 1e-5);
        assert!((m2.variance(0) - 1.40601).abs() < 1e-5);
        let inf = ou_moment_curve(3.0, 4.0, f64::INFINITY);
        assert_eq!(inf, (0.0, 1.0));
        assert!(ou_analytic_moments(0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn ou_moments_match_fine_ode_integration() {
        // Independent oracle: RK4 on dμ/dt = −μ/2, dσ²/dt = 1 − σ².
        let (mut mu, mut var) = (3.0f64, 4.0f64);
        let dt = 1e-3;
        let f = |m: f64, v: f64| (-0.5 * m, 1.0 - v);
        for _ in 0..2000 {
            let k1 = f(mu, var);
            let k2 = f(mu + 0.5 * dt * k1.0, var + 0.5 * dt * k1.1);
            let k3 = f(mu + 0.5 * dt * k2.0, var + 0.5 * dt * k2.1);
            let k4 = f(mu + dt * k3.0, var + dt * k3.1);
            mu += dt / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
            var += dt / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
        }
        let m = ou_analytic_moments(3.0, 4.0, 2.0).unwrap();
        assert!((m.mean[0] - mu).abs() < 1e-12);
        assert!((m.variance(0) - var).abs() < 1e-12);
    }

    #[test]
    fn mixture_is_normalized_and_samples_both_blobs() {
        let m = two_gaussians();
        let log_mass = grid_log_mass(&m, [-10.0, -8.0], [10.0, 8.0], 400, |_, _| true).unwrap();
        assert!(log_mass.abs() < 1e-4, "{log_mass}");
        let mut s = RandomStream::new(1, 1);
        let xs = m.sample_exact(&mut s, 4000).unwrap();
        let right = xs.iter_rows().filter(|r| r[0] > 0.0).count() as f64 / 4000.0;
        assert!((right - 0.5).abs() < 0.04);
    }
}
