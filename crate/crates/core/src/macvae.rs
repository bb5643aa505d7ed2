//! The flow-based variational autoencoder.
//!
//! A [`LatentVariableModel`] defines `log p_θ(x, z)`. Inference draws
//! `z₀ = Q_φ(x, ω)`, runs the Langevin flow on `z ↦ log p_θ(x, z)`, distills
//! the first flow steps back into `Q_φ`, and updates `θ` on the flow path.
//! A planar normalizing-flow encoder is provided as a baseline.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::amortize::{distill_step, make_teacher_batch_conditioned, DistillConfig, Distiller, ImplicitGenerator};
use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::numerics::function::load_params;
use crate::numerics::graph::softplus;
use crate::numerics::linalg;
use crate::numerics::nets::Linear;
use crate::numerics::optim::Optimizer;
use crate::numerics::rng::{stream_id, tags};
use crate::numerics::{evaluate_batch, gradient_batch, jacobians, DiffFn, Graph, Mat, ParamMap, ParamSpec, RandomStream, Var};
use crate::targets::{EnergyModel, GaussianMoments, Target};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Likelihood {
    /// Independent bits; the decoder emits logits.
    Bernoulli,
    /// One-hot vectors; the decoder emits class logits.
    CategoricalOneHot,
    /// Isotropic Gaussian with fixed standard deviation around the decoder output.
    Gaussian { sigma: f64 },
}

impl Likelihood {
    fn log_prob(&self, g: &Graph, x: Var, out: Var) -> Var {
        match *self {
            Likelihood::Bernoulli => g.sub(g.sum_cols(g.mul(x, out)), g.sum_cols(g.softplus(out))),
            Likelihood::CategoricalOneHot => g.sub(g.sum_cols(g.mul(x, out)), g.logsumexp_rows(out)),
            Likelihood::Gaussian { sigma } => {
                let d = g.shape(x).1 as f64;
                let sq = g.sum_cols(g.square(g.sub(x, out)));
                g.offset(g.scale(sq, -0.5 / (sigma * sigma)), -0.5 * d * (LN_2PI + 2.0 * sigma.ln()))
            }
        }
    }

    fn check_data(&self, x: &Mat) -> Result<()> {
        for (i, row) in x.iter_rows().enumerate() {
            let ok = match self {
                Likelihood::Bernoulli => row.iter().all(|v| (0.0..=1.0).contains(v)),
                Likelihood::CategoricalOneHot => {
                    row.iter().all(|v| *v == 0.0 || *v == 1.0) && row.iter().sum::<f64>() == 1.0
                }
                Likelihood::Gaussian { sigma } => *sigma > 0.0 && row.iter().all(|v| v.is_finite()),
            };
            if !ok {
                return Err(Error::Numeric(format!("observation {i} is invalid for the {self:?} likelihood")));
            }
        }
        Ok(())
    }
}

/// `log p(z) + log p_θ(x | decoder(z))` as a function of `x ⊕ z`, with the
/// decoder parameters as its parameters.
#[derive(Clone, Debug)]
pub struct JointDensity {
    pub prior: EnergyModel,
    pub decoder: Arc<dyn DiffFn>,
    pub likelihood: Likelihood,
}

impl JointDensity {
    pub fn data_dim(&self) -> usize {
        self.decoder.output_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.prior.dim()
    }
}

impl DiffFn for JointDensity {
    fn signature(&self) -> Vec<ParamSpec> {
        self.decoder.signature()
    }
    fn input_dim(&self) -> usize {
        self.data_dim() + self.latent_dim()
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn forward(&self, g: &Graph, p: &[Var], input: Var) -> Var {
        let dx = self.data_dim();
        let x = g.slice_cols(input, 0, dx);
        let z = g.slice_cols(input, dx, self.latent_dim());
        let pp = load_params(g, self.prior.params(), false);
        let prior = g.offset(self.prior.function().forward(g, &pp, z), -self.prior.log_normalizer().unwrap_or(0.0));
        let out = self.decoder.forward(g, p, z);
        g.add(prior, self.likelihood.log_prob(g, x, out))
    }
}

#[derive(Clone, Debug)]
pub struct LatentVariableModel {
    pub joint: Arc<JointDensity>,
    pub params: ParamMap,
}

impl LatentVariableModel {
    pub fn new(prior: EnergyModel, decoder: Arc<dyn DiffFn>, likelihood: Likelihood, params: ParamMap) -> Result<Self> {
        if decoder.input_dim() != prior.dim() {
            return Err(Error::Contract(format!(
                "decoder takes {} inputs, prior has dimension {}",
                decoder.input_dim(),
                prior.dim()
            )));
        }
        params.check_signature(&decoder.signature())?;
        Ok(Self { joint: Arc::new(JointDensity { prior, decoder, likelihood }), params })
    }

    pub fn data_dim(&self) -> usize {
        self.joint.data_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.joint.latent_dim()
    }

    fn xz(&self, x: &Mat, z: &Mat) -> Result<Mat> {
        if x.rows() != z.rows() || x.cols() != self.data_dim() || z.cols() != self.latent_dim() {
            return Err(Error::Contract(format!(
                "expected x n×{} and z n×{}, got {:?} and {:?}",
                self.data_dim(),
                self.latent_dim(),
                x.shape(),
                z.shape()
            )));
        }
        self.joint.likelihood.check_data(x)?;
        Ok(Mat::hcat(&[x, z]))
    }

    /// `log p_θ(xᵢ, zᵢ)` per row.
    pub fn joint_log_density_batch(&self, x: &Mat, z: &Mat) -> Result<Vec<f64>> {
        let v = evaluate_batch(self.joint.as_ref(), &self.params, &self.xz(x, z)?)?.into_vec();
        if let Some(i) = v.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("non-finite joint log-density at row {i}")));
        }
        Ok(v)
    }

    pub fn joint_log_density(&self, x: &[f64], z: &[f64]) -> Result<f64> {
        Ok(self.joint_log_density_batch(&Mat::row_vector(x.to_vec()), &Mat::row_vector(z.to_vec()))?[0])
    }

    /// The posterior `z ↦ log p_θ(xᵢ, z)` with one observation per row.
    pub fn posterior(&self, xs: Mat) -> ConditionedPosterior<'_> {
        ConditionedPosterior { model: self, xs }
    }

    /// `∇θ` of `mean_i log p_θ(xᵢ, zᵢ)`, and that mean.
    pub fn theta_gradient(&self, x: &Mat, z: &Mat) -> Result<(f64, ParamMap)> {
        let xz = self.xz(x, z)?;
        let g = gradient_batch(self.joint.as_ref(), &self.params, &xz, true)?;
        let n = x.rows() as f64;
        let grad = g.params.expect("requested").scaled(1.0 / n);
        Ok((g.values.iter().sum::<f64>() / n, grad))
    }
}

/// Spelled-out form of [`LatentVariableModel::joint_log_density`].
pub fn joint_log_density(model: &LatentVariableModel, x: &[f64], z: &[f64]) -> Result<f64> {
    model.joint_log_density(x, z)
}

/// Langevin target for a batch of latent particles, particle `i` conditioned
/// on observation `xs[i]`.
pub struct ConditionedPosterior<'a> {
    model: &'a LatentVariableModel,
    xs: Mat,
}

impl Target for ConditionedPosterior<'_> {
    fn dim(&self) -> usize {
        self.model.latent_dim()
    }

    fn log_density_grad(&self, z: &Mat) -> Result<(Vec<f64>, Mat)> {
        let xz = self.model.xz(&self.xs, z)?;
        let g = gradient_batch(self.model.joint.as_ref(), &self.model.params, &xz, false)?;
        Ok((g.values, g.input.slice_cols(self.model.data_dim(), self.model.latent_dim())))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboEstimate {
    pub value: f64,
    pub std_error: f64,
    pub samples: usize,
}

pub(crate) fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Smallest `|det ∂z/∂ω|` accepted by the change-of-variables estimators.
pub const JACOBIAN_FLOOR: f64 = 1e-12;

/// `log q(z)` for samples `z = f(c, ω)` of an invertible generator, by
/// change of variables: `log N(ω; 0, I) − ln|det ∂f/∂ω|`.
pub fn generator_log_density(gen: &ImplicitGenerator, inputs: &Mat) -> Result<(Mat, Vec<f64>)> {
    if !gen.is_invertible() {
        return Err(Error::Contract("density evaluation needs an invertible generator".into()));
    }
    let c = gen.cond_dim();
    let d = gen.noise_dim();
    let (z, jac) = jacobians(gen.network(), &gen.params, inputs, c..c + d)?;
    let mut logq = Vec::with_capacity(inputs.rows());
    for (i, j) in jac.iter().enumerate() {
        let det = linalg::determinant(j);
        if !(det.abs() >= JACOBIAN_FLOOR) {
            return Err(Error::Numeric(format!("singular generator Jacobian at sample {i} (|det| = {:e})", det.abs())));
        }
        let w = &inputs.row(i)[c..];
        let base = -0.5 * w.iter().map(|x| x * x).sum::<f64>() - 0.5 * d as f64 * LN_2PI;
        logq.push(base - det.abs().ln());
    }
    Ok((z, logq))
}

/// Monte-Carlo ELBO `E[log p(x, z) − log q(z|x)]` for an invertible
/// inference generator, with its standard error.
pub fn elbo_estimate(model: &LatentVariableModel, gen: &ImplicitGenerator, x: &[f64], m: usize, stream: &mut RandomStream) -> Result<ElboEstimate> {
    if m == 0 {
        return Err(Error::Contract("need at least one sample".into()));
    }
    if gen.cond_dim() != x.len() || gen.output_dim() != model.latent_dim() {
        return Err(Error::Contract("inference generator does not match the model".into()));
    }
    let xs = crate::amortize::repeat_row(x, m);
    let noise = stream.gaussian_mat(m, gen.noise_dim());
    let inputs = gen.inputs(&xs, &noise)?;
    let (z, logq) = generator_log_density(gen, &inputs)?;
    let logp = model.joint_log_density_batch(&xs, &z)?;
    let terms: Vec<f64> = logp.iter().zip(&logq).map(|(p, q)| p - q).collect();
    let (value, std_error) = mean_and_se(&terms);
    Ok(ElboEstimate { value, std_error, samples: m })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacVaeOptions {
    pub epochs: usize,
    /// Whether the decoder parameters are trained.
    pub learn_theta: bool,
    pub theta_learning_rate: f64,
    /// ELBO samples per observation logged each epoch (0 disables).
    pub elbo_samples: usize,
    /// Decay both learning rates linearly to zero over the run.
    #[serde(default)]
    pub linear_decay: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacVaeEpoch {
    pub epoch: usize,
    pub distill_distance: f64,
    /// `mean log p_θ(x, z)` over the path used for the θ-step.
    pub path_log_joint: f64,
    /// Mean over observations, when the inference network is invertible.
    pub elbo: Option<f64>,
}

/// Three-step training: flow from the inference samples, distill the first
/// `distill.substeps` flow steps into the inference network, then ascend
/// `mean log p_θ(x, z_k)` over the path `z₁ … z_K` in `θ` (over `z₀` when
/// the flow is disabled with `K = 0`, in which case nothing is distilled).
///
/// Every epoch draws `distill.batch_size` latent samples per observation.
pub fn train_macvae(
    model: &mut LatentVariableModel,
    inference: &mut ImplicitGenerator,
    data: &Mat,
    flow: &FlowConfig,
    distill: &DistillConfig,
    options: &MacVaeOptions,
    seed: u64,
) -> Result<Vec<MacVaeEpoch>> {
    if data.rows() == 0 {
        return Err(Error::Contract("training data is empty".into()));
    }
    flow.validate()?;
    distill.validate()?;
    if inference.cond_dim() != model.data_dim() || inference.output_dim() != model.latent_dim() {
        return Err(Error::Contract("inference generator does not match the model".into()));
    }
    model.joint.likelihood.check_data(data)?;
    let s = distill.batch_size;
    let mut rows = Vec::with_capacity(data.rows() * s);
    for i in 0..data.rows() {
        rows.extend(std::iter::repeat_n(i, s));
    }
    let conds = data.select_rows(&rows);
    let substeps = distill.substeps.min(flow.num_steps).max(1);
    let steps = flow.num_steps.max(substeps);
    let mut distiller = Distiller::new(distill.clone(), None)?;
    let mut theta_opt = Optimizer::adam(options.theta_learning_rate);
    let mut log = Vec::with_capacity(options.epochs);
    for epoch in 0..options.epochs {
        if options.linear_decay {
            let f = 1.0 - epoch as f64 / options.epochs as f64;
            distiller.optimizer.learning_rate = distill.learning_rate * f;
            theta_opt.learning_rate = options.theta_learning_rate * f;
        }
        let mut gs = RandomStream::new(seed, stream_id(tags::GENERATOR_NOISE, epoch as u64));
        let batch = {
            let post = model.posterior(conds.clone());
            let h = if flow.num_steps == 0 { 0.0 } else { flow.step_size };
            make_teacher_batch_conditioned(inference, &conds, &post, h, steps, &mut gs, true).map_err(|e| match e {
                Error::Divergence { step, particle } => {
                    Error::Numeric(format!("flow diverged in epoch {epoch} at step {step}, particle {particle}"))
                }
                other => other,
            })?
        };
        let mut distance = f64::NAN;
        if flow.num_steps > 0 {
            let mut teach = batch.clone();
            teach.teacher = batch.path[substeps - 1].clone();
            let mut ss = RandomStream::new(seed, stream_id(tags::STUDENT_NOISE, epoch as u64));
            distance = distill_step(inference, &teach, distill, &mut distiller.optimizer, None, &mut ss)?.distance;
        }
        let path: Vec<&Mat> = if flow.num_steps == 0 {
            vec![batch.generated.samples()]
        } else {
            batch.path[..flow.num_steps].iter().map(|c| c.samples()).collect()
        };
        let zs = Mat::vcat(&path);
        let xs = Mat::vcat(&vec![&conds; path.len()]);
        let (path_log_joint, grad) = model.theta_gradient(&xs, &zs)?;
        if options.learn_theta {
            theta_opt.ascend(&mut model.params, &grad);
        }
        let elbo = if options.elbo_samples > 0 && inference.is_invertible() {
            let mut es = RandomStream::new(seed, stream_id(tags::EVALUATION, epoch as u64));
            let mut total = 0.0;
            for x in data.iter_rows() {
                total += elbo_estimate(model, inference, x, options.elbo_samples, &mut es)?.value;
            }
            Some(total / data.rows() as f64)
        } else {
            None
        };
        log.push(MacVaeEpoch { epoch, distill_distance: distance, path_log_joint, elbo });
    }
    Ok(log)
}

/// The linear-Gaussian model `z ~ N(0, I)`, `x | z ~ N(zW + b, σ²I)` with
/// its closed-form posterior and evidence.
#[derive(Clone, Debug, PartialEq)]
pub struct ConjugateGaussian {
    /// `latent × data`.
    pub weight: Mat,
    pub bias: Vec<f64>,
    pub sigma: f64,
}

impl ConjugateGaussian {
    /// A fixed 2-latent, 3-data instance.
    pub fn example() -> Self {
        Self { weight: Mat::from_rows(&[[1.0, -0.5, 0.3], [0.2, 0.8, -1.0]]), bias: vec![0.1, 0.0, -0.2], sigma: 0.7 }
    }

    pub fn latent_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn data_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn model(&self) -> Result<LatentVariableModel> {
        let (dz, dx) = self.weight.shape();
        let params = ParamMap::new()
            .with("weight", &[dz, dx], self.weight.as_slice().to_vec())?
            .with("bias", &[dx], self.bias.clone())?;
        LatentVariableModel::new(
            crate::targets::standard_normal(dz),
            Arc::new(Linear { input: dz, output: dx }),
            Likelihood::Gaussian { sigma: self.sigma },
            params,
        )
    }

    fn posterior_covariance(&self) -> Result<Mat> {
        let s2 = self.sigma * self.sigma;
        let mut prec = self.weight.matmul_t(&self.weight).map(|v| v / s2);
        for i in 0..self.latent_dim() {
            prec[(i, i)] += 1.0;
        }
        linalg::spd_inverse(&prec)
    }

    /// `z | x ~ N(Σ W (x − b)/σ², Σ)` with `Σ = (I + WWᵀ/σ²)⁻¹`.
    pub fn posterior(&self, x: &[f64]) -> Result<GaussianMoments> {
        let cov = self.posterior_covariance()?;
        let r: Vec<f64> = x.iter().zip(&self.bias).map(|(a, b)| (a - b) / (self.sigma * self.sigma)).collect();
        let wr = self.weight.matmul(&Mat::column_vector(r));
        GaussianMoments::new(cov.matmul(&wr).into_vec(), cov)
    }

    /// `ln N(x; b, WᵀW + σ²I)`.
    pub fn log_marginal(&self, x: &[f64]) -> Result<f64> {
        let mut c = self.weight.t_matmul(&self.weight);
        for i in 0..self.data_dim() {
            c[(i, i)] += self.sigma * self.sigma;
        }
        let d: Vec<f64> = x.iter().zip(&self.bias).map(|(a, b)| a - b).collect();
        let inv = linalg::spd_inverse(&c)?;
        let dv = Mat::column_vector(d.clone());
        let q = dv.t_matmul(&inv.matmul(&dv))[(0, 0)];
        Ok(-0.5 * (q + linalg::spd_log_det(&c)? + self.data_dim() as f64 * LN_2PI))
    }

    /// An invertible generator drawing exactly from `p(z | x)`.
    pub fn exact_posterior_sampler(&self) -> Result<ImplicitGenerator> {
        let (dz, dx) = self.weight.shape();
        let cov = self.posterior_covariance()?;
        let chol = linalg::cholesky(&cov)?;
        // Row convention: z = xP + ζLᵀ + c with P = WᵀΣ/σ² and c = −bP.
        let p = self.weight.transpose().matmul(&cov).map(|v| v / (self.sigma * self.sigma));
        let c: Vec<f64> = (0..dz).map(|j| -(0..dx).map(|i| self.bias[i] * p[(i, j)]).sum::<f64>()).collect();
        let w = Mat::vcat(&[&p, &chol.transpose()]);
        let params = ParamMap::new().with("weight", &[dx + dz, dz], w.into_vec())?.with("bias", &[dz], c)?;
        ImplicitGenerator::new(Arc::new(Linear { input: dx + dz, output: dz }), params, dx, true)
    }
}

/// Planar-flow encoder: `z₀ = μ(x) + σ(x)⊙ε` from a linear encoder, then
/// `z ← z + û·tanh(wᵀz + b)` per layer with `û` chosen so that `ûᵀw ≥ −1`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanarFlowStack {
    pub data_dim: usize,
    pub latent_dim: usize,
    pub layers: usize,
}

impl PlanarFlowStack {
    pub fn signature(&self) -> Vec<ParamSpec> {
        let mut sig = vec![
            ParamSpec::new("encoder.weight", &[self.data_dim, 2 * self.latent_dim]),
            ParamSpec::new("encoder.bias", &[2 * self.latent_dim]),
        ];
        for k in 0..self.layers {
            sig.push(ParamSpec::new(format!("planar{k}.u"), &[self.latent_dim]));
            sig.push(ParamSpec::new(format!("planar{k}.w"), &[self.latent_dim]));
            sig.push(ParamSpec::new(format!("planar{k}.b"), &[]));
        }
        sig
    }

    /// Small random `u`, `w`; encoder at zero (so `q₀ = N(0, I)`).
    pub fn init(&self, stream: &mut RandomStream) -> ParamMap {
        ParamMap::from_fn(&self.signature(), |spec, _| {
            if spec.name.ends_with(".u") || spec.name.ends_with(".w") {
                0.1 * stream.gaussian()
            } else {
                0.0
            }
        })
    }

    /// `(z_K, log q_K(z_K))` per row of `x`, one `ε` row each. Records onto `g`.
    fn forward(&self, g: &Graph, p: &[Var], x: Var, eps: &Mat) -> (Var, Var) {
        let d = self.latent_dim;
        let enc = g.add_row(g.matmul(x, p[0]), p[1]);
        let mu = g.slice_cols(enc, 0, d);
        let log_sigma = g.slice_cols(enc, d, d);
        let e = g.constant(eps.clone());
        let mut z = g.add(mu, g.mul(g.exp(log_sigma), e));
        let base: f64 = -0.5 * d as f64 * LN_2PI;
        let eps_sq = g.constant(Mat::column_vector(eps.iter_rows().map(|r| -0.5 * r.iter().map(|v| v * v).sum::<f64>() + base).collect()));
        let mut logq = g.sub(eps_sq, g.sum_cols(log_sigma));
        for k in 0..self.layers {
            let (u, w, b) = (p[2 + 3 * k], p[3 + 3 * k], p[4 + 3 * k]);
            let wt = g.transpose(w);
            let wu = g.matmul(u, wt);
            let m = g.offset(g.softplus(wu), -1.0);
            let w_sq = g.sum(g.square(w));
            let coef = g.mul(g.sub(m, wu), g.exp(g.neg(g.log(w_sq))));
            let u_hat = g.add(u, g.mul_scalar(w, coef));
            let a = g.add_row(g.matmul(z, wt), b);
            let t = g.tanh(a);
            z = g.add(z, g.matmul(t, u_hat));
            let psi = g.offset(g.neg(g.square(t)), 1.0);
            let uw = g.matmul(u_hat, wt);
            let det = g.offset(g.mul_scalar(psi, uw), 1.0);
            logq = g.sub(logq, g.log(det));
        }
        (z, logq)
    }

    /// Per-row ELBO terms `log p(x, z_K) − log q_K(z_K)` on graph `g`.
    fn elbo_terms(&self, g: &Graph, p: &[Var], model: &LatentVariableModel, xs: &Mat, eps: &Mat) -> Var {
        let x = g.constant(xs.clone());
        let (z, logq) = self.forward(g, p, x, eps);
        let mp = load_params(g, &model.params, false);
        let logp = model.joint.forward(g, &mp, g.concat(x, z));
        g.sub(logp, logq)
    }
}

/// One planar ELBO term `log p(x, z_K) − log q_K(z_K)` as a function of
/// `x` and the stack parameters, at a fixed base draw `ε`.
#[derive(Clone, Debug)]
pub struct PlanarElboFn {
    pub stack: PlanarFlowStack,
    pub model: LatentVariableModel,
    pub eps: Vec<f64>,
}

impl DiffFn for PlanarElboFn {
    fn signature(&self) -> Vec<ParamSpec> {
        self.stack.signature()
    }
    fn input_dim(&self) -> usize {
        self.stack.data_dim
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn forward(&self, g: &Graph, p: &[Var], input: Var) -> Var {
        let n = g.shape(input).0;
        let eps = Mat::from_rows(&vec![self.eps.clone(); n]);
        let (z, logq) = self.stack.forward(g, p, input, &eps);
        let mp = load_params(g, &self.model.params, false);
        let logp = self.model.joint.forward(g, &mp, g.concat(input, z));
        g.sub(logp, logq)
    }
}

/// Monte-Carlo planar-flow ELBO at one observation.
pub fn planar_nf_elbo(
    stack: &PlanarFlowStack,
    params: &ParamMap,
    model: &LatentVariableModel,
    x: &[f64],
    m: usize,
    stream: &mut RandomStream,
) -> Result<ElboEstimate> {
    params.check_signature(&stack.signature())?;
    if m == 0 || x.len() != stack.data_dim || model.latent_dim() != stack.latent_dim {
        return Err(Error::Contract("planar ELBO: bad sample count or dimensions".into()));
    }
    let xs = crate::amortize::repeat_row(x, m);
    let eps = stream.gaussian_mat(m, stack.latent_dim);
    let g = Graph::new();
    let p = load_params(&g, params, false);
    let terms = g.value(stack.elbo_terms(&g, &p, model, &xs, &eps)).into_vec();
    if terms.iter().any(|t| !t.is_finite()) {
        return Err(Error::Numeric("planar flow produced a non-finite ELBO term".into()));
    }
    let (value, std_error) = mean_and_se(&terms);
    Ok(ElboEstimate { value, std_error, samples: m })
}

/// Reparameterized stochastic ascent on the mean planar ELBO over `data`.
pub fn train_planar(
    stack: &PlanarFlowStack,
    params: &mut ParamMap,
    model: &LatentVariableModel,
    data: &Mat,
    samples_per_point: usize,
    iterations: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    params.check_signature(&stack.signature())?;
    let mut opt = Optimizer::adam(learning_rate);
    let rows: Vec<usize> = (0..data.rows()).flat_map(|i| std::iter::repeat_n(i, samples_per_point)).collect();
    let xs = data.select_rows(&rows);
    let mut curve = Vec::with_capacity(iterations);
    for it in 0..iterations {
        let eps = RandomStream::new(seed, stream_id(tags::STUDENT_NOISE, it as u64)).gaussian_mat(xs.rows(), stack.latent_dim);
        let g = Graph::new();
        let p = load_params(&g, params, true);
        let obj = g.mean(stack.elbo_terms(&g, &p, model, &xs, &eps));
        curve.push(g.scalar(obj));
        let grads = g.backward(obj);
        let mut grad = params.clone();
        for (e, v) in grad.entries_mut().iter_mut().zip(&p) {
            e.values = grads.wrt(*v).into_vec();
        }
        opt.ascend(params, &grad);
        if !params.iter_values().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!("planar flow parameters diverged at iteration {it}")));
        }
    }
    Ok(curve)
}

/// `m(a) = −1 + softplus(a)`, the map keeping planar layers invertible.
pub fn planar_constraint(a: f64) -> f64 {
    -1.0 + softplus(a)
}

/// Mean over observations of the per-coordinate variance of latent draws.
pub fn per_observation_variance(gen: &ImplicitGenerator, data: &Mat, s: usize, stream: &mut RandomStream) -> Result<f64> {
    let mut total = 0.0;
    for x in data.iter_rows() {
        let c = gen.sample(x, stream, s)?;
        let m = crate::metrics::empirical_moments(c.samples())?;
        total += linalg::trace(&m.covariance) / m.dim() as f64;
    }
    Ok(total / data.rows() as f64)
}
