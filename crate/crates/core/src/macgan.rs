//! Energy-based density estimation with a flow-guided generator.
//!
//! The model is `p_θ(x) ∝ e^{U(x; θ)}`. Each epoch pushes generator samples
//! through the Langevin flow toward `p_θ`, distills the result back into the
//! generator, and takes one ascent step on `E_data[U] − E_gen[U]`, using
//! fresh generator draws for the negative phase.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::amortize::{distill_step, make_teacher_batch_conditioned, DistillConfig, Distiller, ImplicitGenerator, Regularizer};
use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::macvae::{generator_log_density, mean_and_se};
use crate::metrics::{wasserstein_exact, MAX_EXACT_PARTICLES};
use crate::numerics::function::load_params;
use crate::numerics::graph::logsumexp;
use crate::numerics::optim::Optimizer;
use crate::numerics::rng::{stream_id, tags};
use crate::numerics::{evaluate_batch, DiffFn, Graph, Mat, ParamMap, RandomStream};
use crate::targets::EnergyModel;

/// A scalar network `U(x; θ)` over data space with its regularizer.
#[derive(Clone, Debug)]
pub struct EnergyNet {
    network: Arc<dyn DiffFn>,
    pub params: ParamMap,
    pub regularizer: Regularizer,
}

impl EnergyNet {
    /// Clip mode clips `params` immediately.
    pub fn new(network: Arc<dyn DiffFn>, params: ParamMap, regularizer: Regularizer) -> Result<Self> {
        params.check_signature(&network.signature())?;
        if network.output_dim() != 1 {
            return Err(Error::Contract("an energy needs a scalar output".into()));
        }
        if let Regularizer::WeightClip(c) | Regularizer::GradientPenalty(c) = regularizer {
            if !(c > 0.0) {
                return Err(Error::Config(format!("regularizer constant must be > 0, got {c}")));
            }
        }
        if matches!(regularizer, Regularizer::GradientPenalty(_)) {
            let g = Graph::new();
            let p = load_params(&g, &params, false);
            if network.input_gradient(&g, &p, g.constant(Mat::zeros(1, network.input_dim()))).is_none() {
                return Err(Error::Contract("gradient penalty needs a network with an input-gradient graph".into()));
            }
        }
        let mut e = Self { network, params, regularizer };
        e.enforce();
        Ok(e)
    }

    pub fn network(&self) -> &dyn DiffFn {
        self.network.as_ref()
    }

    pub fn dim(&self) -> usize {
        self.network.input_dim()
    }

    fn enforce(&mut self) {
        if let Regularizer::WeightClip(c) = self.regularizer {
            self.params.clip(c);
        }
    }

    /// `U(x)` for every row.
    pub fn energy(&self, x: &Mat) -> Result<Vec<f64>> {
        let u = evaluate_batch(self.network.as_ref(), &self.params, x)?.into_vec();
        if let Some(i) = u.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("energy is not finite at row {i}")));
        }
        Ok(u)
    }

    /// The current `p̃_θ` as a flow target.
    pub fn target(&self) -> Result<EnergyModel> {
        EnergyModel::new("energy", self.network.clone(), self.params.clone())
    }
}

fn check_batches(energy: &EnergyNet, data: &Mat, model: &Mat) -> Result<()> {
    if data.rows() == 0 || model.rows() == 0 {
        return Err(Error::Contract("data and model batches must be nonempty".into()));
    }
    if data.cols() != energy.dim() || model.cols() != energy.dim() {
        return Err(Error::Contract(format!(
            "batches have {} and {} columns, energy expects {}",
            data.cols(),
            model.cols(),
            energy.dim()
        )));
    }
    Ok(())
}

/// `∂/∂θ (mean_data U − mean_model U)` and the value of that difference.
/// Both batches enter as constants.
pub fn mle_gradient(energy: &EnergyNet, data: &Mat, model: &Mat) -> Result<(f64, ParamMap)> {
    check_batches(energy, data, model)?;
    let g = Graph::new();
    let p = load_params(&g, &energy.params, true);
    let ud = energy.network.forward(&g, &p, g.constant(data.clone()));
    let um = energy.network.forward(&g, &p, g.constant(model.clone()));
    let obj = g.sub(g.mean(ud), g.mean(um));
    let value = g.scalar(obj);
    let grads = g.backward(obj);
    let mut grad = energy.params.clone();
    for (e, v) in grad.entries_mut().iter_mut().zip(&p) {
        e.values = grads.wrt(*v).into_vec();
    }
    Ok((value, grad))
}

/// One ascent step of `θ` on the regularized surrogate. The penalty is
/// evaluated at interpolates between paired rows of the two batches.
/// Returns the unregularized surrogate before the step.
pub fn theta_step(energy: &mut EnergyNet, data: &Mat, model: &Mat, optimizer: &mut Optimizer, stream: &mut RandomStream) -> Result<f64> {
    let (value, mut grad) = mle_gradient(energy, data, model)?;
    if let Regularizer::GradientPenalty(lambda) = energy.regularizer {
        let n = data.rows().min(model.rows());
        let mut mix = Mat::zeros(n, data.cols());
        for i in 0..n {
            let e = stream.uniform();
            for j in 0..data.cols() {
                mix[(i, j)] = e * data[(i, j)] + (1.0 - e) * model[(i, j)];
            }
        }
        let g = Graph::new();
        let p = load_params(&g, &energy.params, true);
        let dx = energy.network.input_gradient(&g, &p, g.constant(mix)).expect("checked at construction");
        let excess = g.relu(g.offset(g.norm_rows(dx), -1.0));
        let pen = g.scale(g.mean(g.square(excess)), lambda);
        let grads = g.backward(pen);
        for (e, v) in grad.entries_mut().iter_mut().zip(&p) {
            for (a, b) in e.values.iter_mut().zip(grads.wrt(*v).as_slice()) {
                *a -= b;
            }
        }
    }
    optimizer.ascend(&mut energy.params, &grad);
    energy.enforce();
    if !energy.params.iter_values().all(|x| x.is_finite()) {
        return Err(Error::Numeric("energy parameters became non-finite".into()));
    }
    Ok(value)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `(m_e − e)·l_r / (m_e − 50)` over `m_e` epochs; for `m_e ≤ 50` the
    /// denominator becomes `m_e`.
    Paper,
}

/// Learning rate at `epoch` of `epochs`.
pub fn lr_schedule(schedule: LrSchedule, base: f64, epoch: usize, epochs: usize) -> f64 {
    match schedule {
        LrSchedule::Constant => base,
        LrSchedule::Paper => {
            let (m, e) = (epochs as f64, epoch as f64);
            let denom = if epochs > 50 { m - 50.0 } else { m };
            base * (m - e) / denom
        }
    }
}

fn default_theta_lr() -> f64 {
    1e-4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MacGanOptions {
    pub epochs: usize,
    #[serde(default = "default_theta_lr")]
    pub theta_learning_rate: f64,
    /// Applied to both the `θ` rate and the distillation rate.
    #[serde(default)]
    pub schedule: LrSchedule,
    /// Data rows per `θ`-step; 0 uses the distillation batch size.
    #[serde(default)]
    pub data_batch: usize,
    /// Evaluate the MLE bound every this many epochs (0 disables).
    #[serde(default)]
    pub bound_every: usize,
    #[serde(default)]
    pub bound_samples: usize,
}

impl MacGanOptions {
    pub fn new(epochs: usize) -> Self {
        Self { epochs, theta_learning_rate: 1e-4, schedule: LrSchedule::Constant, data_batch: 0, bound_every: 0, bound_samples: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacGanEpoch {
    pub epoch: usize,
    /// NaN when the flow is disabled.
    pub distill_distance: f64,
    pub e_data_u: f64,
    pub e_gen_u: f64,
    /// Exact `W₁` between the negative-phase samples and the data batch,
    /// both truncated to a common size.
    pub w1_diag: f64,
    /// `max|θ|` after the update.
    pub max_abs_theta: f64,
    pub log_z: Option<f64>,
    pub bound: Option<MleBoundReport>,
}

fn data_batch(data: &Mat, n: usize, stream: &mut RandomStream) -> Mat {
    if n >= data.rows() {
        return data.clone();
    }
    let mut idx: Vec<usize> = (0..data.rows()).collect();
    for i in 0..n {
        let j = i + stream.index(data.rows() - i);
        idx.swap(i, j);
    }
    data.select_rows(&idx[..n])
}

/// Flow-guided training. Per epoch:
///
/// 1. `distill.batch_size` generator samples run `flow.num_steps` Langevin
///    steps toward the current `p_θ`;
/// 2. one distillation update pulls the generator toward the flowed
///    samples (skipped when `flow.num_steps = 0`);
/// 3. fresh generator samples form the negative phase of one `θ`-step.
///
/// `distill.substeps` is not used: the flow length is `flow.num_steps`.
pub fn train_macgan(
    energy: &mut EnergyNet,
    generator: &mut ImplicitGenerator,
    data: &Mat,
    flow: &FlowConfig,
    distill: &DistillConfig,
    options: &MacGanOptions,
    seed: u64,
) -> Result<Vec<MacGanEpoch>> {
    if data.rows() == 0 {
        return Err(Error::Contract("training data is empty".into()));
    }
    flow.validate()?;
    distill.validate()?;
    if generator.cond_dim() != 0 || generator.output_dim() != energy.dim() || data.cols() != energy.dim() {
        return Err(Error::Contract("generator, energy and data dimensions disagree".into()));
    }
    if !(options.theta_learning_rate > 0.0) {
        return Err(Error::Config(format!("theta_learning_rate must be > 0, got {}", options.theta_learning_rate)));
    }
    let s = distill.batch_size;
    let nd = if options.data_batch == 0 { s } else { options.data_batch };
    let conds = Mat::zeros(s, 0);
    let mut distiller = Distiller::new(distill.clone(), None)?;
    let mut theta_opt = Optimizer::adam(options.theta_learning_rate);
    let mut log = Vec::with_capacity(options.epochs);
    for epoch in 0..options.epochs {
        distiller.optimizer.learning_rate = lr_schedule(options.schedule, distill.learning_rate, epoch, options.epochs);
        theta_opt.learning_rate = lr_schedule(options.schedule, options.theta_learning_rate, epoch, options.epochs);
        let mut gs = RandomStream::new(seed, stream_id(tags::GENERATOR_NOISE, epoch as u64));
        let mut distance = f64::NAN;
        if flow.num_steps > 0 {
            let target = energy.target()?;
            let batch = make_teacher_batch_conditioned(generator, &conds, &target, flow.step_size, flow.num_steps, &mut gs, false)
                .map_err(|e| match e {
                    Error::Divergence { step, particle } => {
                        Error::Numeric(format!("flow diverged in epoch {epoch} at step {step}, particle {particle}"))
                    }
                    other => other,
                })?;
            let mut ss = RandomStream::new(seed, stream_id(tags::STUDENT_NOISE, epoch as u64));
            distance = distill_step(generator, &batch, distill, &mut distiller.optimizer, None, &mut ss)?.distance;
        }
        let model = generator.generate(&generator.inputs(&conds, &gs.gaussian_mat(s, generator.noise_dim()))?)?;
        let mut ds = RandomStream::new(seed, stream_id(tags::DATA, epoch as u64));
        let xb = data_batch(data, nd, &mut ds);
        let e_data_u = mean(&energy.energy(&xb)?);
        let e_gen_u = mean(&energy.energy(&model)?);
        let m = xb.rows().min(model.rows()).min(MAX_EXACT_PARTICLES);
        let w1_diag = wasserstein_exact(&xb.slice_rows(0, m), &model.slice_rows(0, m), 1)?;
        let mut cs = RandomStream::new(seed, stream_id(tags::CRITIC, epoch as u64));
        theta_step(energy, &xb, &model, &mut theta_opt, &mut cs)?;
        let (mut log_z, mut bound) = (None, None);
        if options.bound_every > 0 && generator.is_invertible() && (epoch + 1) % options.bound_every == 0 {
            let mut es = RandomStream::new(seed, stream_id(tags::EVALUATION, epoch as u64));
            let rep = mle_bound_check(energy, generator, data, options.bound_samples, &mut es)?;
            log_z = Some(rep.log_z);
            bound = Some(rep);
        }
        log.push(MacGanEpoch {
            epoch,
            distill_distance: distance,
            e_data_u,
            e_gen_u,
            w1_diag,
            max_abs_theta: energy.params.max_abs(),
            log_z,
            bound,
        });
    }
    Ok(log)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Per-epoch metrics as CSV.
pub fn write_epoch_csv(log: &[MacGanEpoch], mut w: impl Write) -> Result<()> {
    writeln!(w, "epoch,e_data_u,e_gen_u,w1_diag,distill_distance,log_z_if_available")?;
    for e in log {
        let lz = e.log_z.map(|v| format!("{v:e}")).unwrap_or_default();
        writeln!(w, "{},{:e},{:e},{:e},{:e},{}", e.epoch, e.e_data_u, e.e_gen_u, e.w1_diag, e.distill_distance, lz)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogPartition {
    pub value: f64,
    pub std_error: f64,
    pub samples: usize,
}

/// Samples `x = G(ω)`, their `log q(x)` and `U(x)`.
fn generator_draws(energy: &EnergyNet, gen: &ImplicitGenerator, m: usize, stream: &mut RandomStream) -> Result<(Vec<f64>, Vec<f64>)> {
    if gen.cond_dim() != 0 || gen.output_dim() != energy.dim() {
        return Err(Error::Contract("generator does not match the energy".into()));
    }
    let noise = stream.gaussian_mat(m, gen.noise_dim());
    let (x, logq) = generator_log_density(gen, &gen.inputs(&Mat::zeros(m, 0), &noise)?)?;
    Ok((energy.energy(&x)?, logq))
}

/// Importance estimate of `ln ∫ e^U` with proposal `q_φ`:
/// `ln (1/M) Σ e^{U(xᵢ)}/q(xᵢ)`, with a delta-method standard error.
pub fn log_partition_estimate(energy: &EnergyNet, gen: &ImplicitGenerator, m: usize, stream: &mut RandomStream) -> Result<LogPartition> {
    if m < 2 {
        return Err(Error::Contract("need at least two samples".into()));
    }
    let (u, logq) = generator_draws(energy, gen, m, stream)?;
    let lw: Vec<f64> = u.iter().zip(&logq).map(|(u, q)| u - q).collect();
    Ok(log_mean_exp(&lw))
}

fn log_mean_exp(lw: &[f64]) -> LogPartition {
    let m = lw.len();
    let value = logsumexp(lw) - (m as f64).ln();
    // weights relative to their mean
    let r: Vec<f64> = lw.iter().map(|l| (l - value).exp()).collect();
    let var = r.iter().map(|x| (x - 1.0).powi(2)).sum::<f64>() / (m as f64 - 1.0);
    LogPartition { value, std_error: (var / m as f64).sqrt(), samples: m }
}

/// The two sides of the Jensen bound on the average data log-likelihood:
///
/// `mean U(data) − ln Z ≤ E_data[U] − E_q[U] + E_q[ln q]`,
///
/// with `ln Z` from [`log_partition_estimate`] on the same draws used for
/// the `q` expectations. `gap = rhs − lhs`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MleBoundReport {
    pub lhs: f64,
    pub lhs_se: f64,
    pub rhs: f64,
    pub rhs_se: f64,
    pub gap: f64,
    pub gap_se: f64,
    pub e_data_u: f64,
    pub e_data_u_se: f64,
    pub e_gen_u: f64,
    pub e_gen_u_se: f64,
    pub e_gen_log_q: f64,
    pub e_gen_log_q_se: f64,
    pub log_z: f64,
    pub log_z_se: f64,
}

pub fn mle_bound_check(energy: &EnergyNet, gen: &ImplicitGenerator, data: &Mat, m: usize, stream: &mut RandomStream) -> Result<MleBoundReport> {
    if data.rows() == 0 {
        return Err(Error::Contract("data is empty".into()));
    }
    if m < 2 {
        return Err(Error::Contract("need at least two generator samples".into()));
    }
    if data.cols() != energy.dim() {
        return Err(Error::Contract("data does not match the energy".into()));
    }
    let (ed, ed_se) = mean_and_se(&energy.energy(data)?);
    let (u, logq) = generator_draws(energy, gen, m, stream)?;
    let (eu, eu_se) = mean_and_se(&u);
    let (eq, eq_se) = mean_and_se(&logq);
    let lw: Vec<f64> = u.iter().zip(&logq).map(|(u, q)| u - q).collect();
    let (elw, elw_se) = mean_and_se(&lw);
    let lz = log_mean_exp(&lw);
    // gap = ln mean(w) − mean(ln w), delta method on the pair (w/w̄, ln w)
    let mf = m as f64;
    let r: Vec<f64> = lw.iter().map(|l| (l - lz.value).exp()).collect();
    let rbar = mean(&r);
    let cov = r.iter().zip(&lw).map(|(a, b)| (a - rbar) * (b - elw)).sum::<f64>() / (mf - 1.0);
    let gap_var = lz.std_error.powi(2) + elw_se.powi(2) - 2.0 * cov / mf;
    let lhs = ed - lz.value;
    let rhs = ed - elw;
    Ok(MleBoundReport {
        lhs,
        lhs_se: ed_se.hypot(lz.std_error),
        rhs,
        rhs_se: ed_se.hypot(elw_se),
        gap: rhs - lhs,
        gap_se: gap_var.max(0.0).sqrt(),
        e_data_u: ed,
        e_data_u_se: ed_se,
        e_gen_u: eu,
        e_gen_u_se: eu_se,
        e_gen_log_q: eq,
        e_gen_log_q_se: eq_se,
        log_z: lz.value,
        log_z_se: lz.std_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::nets::{Identity, Linear};
    use crate::numerics::ParamSpec;
    use crate::numerics::Var;

    /// `U(x; θ) = −(x − θ)²/2` in 1-D.
    #[derive(Debug)]
    struct Quadratic;

    impl DiffFn for Quadratic {
        fn signature(&self) -> Vec<ParamSpec> {
            vec![ParamSpec::new("theta", &[1])]
        }
        fn input_dim(&self) -> usize {
            1
        }
        fn output_dim(&self) -> usize {
            1
        }
        fn forward(&self, g: &Graph, p: &[Var], x: Var) -> Var {
            g.scale(g.square(g.add_row(x, g.neg(p[0]))), -0.5)
        }
    }

    fn quadratic(theta: f64) -> EnergyNet {
        let p = ParamMap::new().with("theta", &[1], vec![theta]).unwrap();
        EnergyNet::new(Arc::new(Quadratic), p, Regularizer::None).unwrap()
    }

    #[test]
    fn quadratic_gradient_is_mean_difference() {
        let e = quadratic(0.3);
        let data = Mat::column_vector(vec![1.0, 2.0, 4.0]);
        let model = Mat::column_vector(vec![-1.0, 0.5]);
        let (_, g) = mle_gradient(&e, &data, &model).unwrap();
        assert!((g.get("theta").unwrap().values[0] - (7.0 / 3.0 + 0.25)).abs() < 1e-14);
        let (v, g) = mle_gradient(&e, &data, &data).unwrap();
        assert_eq!((v, g.get("theta").unwrap().values[0]), (0.0, 0.0));
        assert!(matches!(mle_gradient(&e, &Mat::zeros(0, 1), &model), Err(Error::Contract(_))));
    }

    #[test]
    fn paper_schedule() {
        assert_eq!(lr_schedule(LrSchedule::Paper, 1e-4, 50, 150), 1e-4);
        assert_eq!(lr_schedule(LrSchedule::Paper, 1e-3, 150, 150), 0.0);
        assert!((lr_schedule(LrSchedule::Paper, 1.0, 0, 20) - 1.0).abs() < 1e-15);
        assert_eq!(lr_schedule(LrSchedule::Constant, 0.5, 7, 9), 0.5);
    }

    fn linear_gen(scale: f64) -> ImplicitGenerator {
        let p = ParamMap::new()
            .with("weight", &[2, 2], vec![scale, 0.0, 0.0, scale])
            .unwrap()
            .with("bias", &[2], vec![0.0, 0.0])
            .unwrap();
        ImplicitGenerator::new(Arc::new(Linear { input: 2, output: 2 }), p, 0, true).unwrap()
    }

    /// `U = −‖x‖²/2` via a confined zero network.
    fn gaussian_energy() -> EnergyNet {
        let net = crate::numerics::nets::Confined { inner: crate::numerics::nets::Constant { dim: 2, value: 0.0 }, strength: 0.5 };
        EnergyNet::new(Arc::new(net), ParamMap::new(), Regularizer::None).unwrap()
    }

    #[test]
    fn matched_generator_is_exact() {
        let e = gaussian_energy();
        let gen = ImplicitGenerator::new(Arc::new(Identity { dim: 2 }), ParamMap::new(), 0, true).unwrap();
        let lz = log_partition_estimate(&e, &gen, 64, &mut RandomStream::new(1, 1)).unwrap();
        assert!((lz.value - (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        assert!(lz.std_error < 1e-10);
        let data = Mat::from_rows(&[[0.1, 0.2], [-1.0, 0.5]]);
        let rep = mle_bound_check(&e, &gen, &data, 64, &mut RandomStream::new(1, 2)).unwrap();
        assert!(rep.gap.abs() < 1e-12 && rep.gap_se < 1e-10);
    }

    #[test]
    fn wide_generator_leaves_a_gap() {
        let e = gaussian_energy();
        let rep = mle_bound_check(&e, &linear_gen(2.0), &Mat::from_rows(&[[0.0, 0.0]]), 4000, &mut RandomStream::new(2, 2)).unwrap();
        assert!(rep.gap > 3.0 * rep.gap_se, "{rep:?}");
        assert!(rep.lhs <= rep.rhs);
    }

    #[test]
    fn clip_holds_after_theta_step() {
        let p = ParamMap::new().with("weight", &[1, 1], vec![0.5]).unwrap().with("bias", &[1], vec![0.0]).unwrap();
        let mut e = EnergyNet::new(Arc::new(Linear { input: 1, output: 1 }), p, Regularizer::WeightClip(0.1)).unwrap();
        assert!(e.params.max_abs() <= 0.1);
        let data = Mat::column_vector(vec![3.0, 4.0]);
        let model = Mat::column_vector(vec![-3.0, 0.0]);
        theta_step(&mut e, &data, &model, &mut Optimizer::sgd(10.0), &mut RandomStream::new(0, 0)).unwrap();
        assert!(e.params.max_abs() <= 0.1);
    }
}
