//! Amortized distillation of flow transformations into implicit generators.
//!
//! A round draws samples from the current generator, pushes them through a
//! few Langevin steps (the teacher), and moves the generator parameters to
//! reduce a sample distance between fresh generator output (the student)
//! and the teacher. The teacher is a constant of the update.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{flow_streams, langevin_step, Noise, ParticleCloud};
use crate::metrics::optimal_assignment;
use crate::numerics::function::load_params;
use crate::numerics::optim::Optimizer;
use crate::numerics::{evaluate_batch, DiffFn, Graph, Mat, ParamMap, RandomStream, Var};
use crate::targets::Target;

/// `(condition ⊕ noise) ↦ sample`.
#[derive(Clone, Debug)]
pub struct ImplicitGenerator {
    network: Arc<dyn DiffFn>,
    pub params: ParamMap,
    cond_dim: usize,
    noise_dim: usize,
    invertible: bool,
}

impl ImplicitGenerator {
    pub fn new(network: Arc<dyn DiffFn>, params: ParamMap, cond_dim: usize, invertible: bool) -> Result<Self> {
        params.check_signature(&network.signature())?;
        let input = network.input_dim();
        if input < cond_dim {
            return Err(Error::Contract(format!("network input {input} is smaller than the condition {cond_dim}")));
        }
        let noise_dim = input - cond_dim;
        if invertible && noise_dim != network.output_dim() {
            return Err(Error::Contract(format!(
                "invertible mode needs noise dimension {noise_dim} to equal output dimension {}",
                network.output_dim()
            )));
        }
        Ok(Self { network, params, cond_dim, noise_dim, invertible })
    }

    pub fn network(&self) -> &dyn DiffFn {
        self.network.as_ref()
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn output_dim(&self) -> usize {
        self.network.output_dim()
    }

    pub fn is_invertible(&self) -> bool {
        self.invertible
    }

    /// Network inputs `conditions ⊕ noise`, one row per sample.
    pub fn inputs(&self, conditions: &Mat, noise: &Mat) -> Result<Mat> {
        if conditions.cols() != self.cond_dim || noise.cols() != self.noise_dim || conditions.rows() != noise.rows() {
            return Err(Error::Contract(format!(
                "generator expects conditions n×{} and noise n×{}, got {:?} and {:?}",
                self.cond_dim,
                self.noise_dim,
                conditions.shape(),
                noise.shape()
            )));
        }
        Ok(Mat::hcat(&[conditions, noise]))
    }

    pub fn generate(&self, inputs: &Mat) -> Result<Mat> {
        evaluate_batch(self.network.as_ref(), &self.params, inputs)
    }

    /// `S` draws at one condition, noise taken from `stream`.
    pub fn sample(&self, condition: &[f64], stream: &mut RandomStream, s: usize) -> Result<ParticleCloud> {
        if s == 0 {
            return Err(Error::Contract("need at least one sample".into()));
        }
        let conds = repeat_row(condition, s);
        let noise = stream.gaussian_mat(s, self.noise_dim);
        ParticleCloud::new(self.generate(&self.inputs(&conds, &noise)?)?)
    }
}

/// `n` copies of `row` as an `n × row.len()` matrix.
pub fn repeat_row(row: &[f64], n: usize) -> Mat {
    let mut data = Vec::with_capacity(n * row.len());
    for _ in 0..n {
        data.extend_from_slice(row);
    }
    Mat::from_vec(n, row.len(), data)
}

/// Spelled-out form of [`ImplicitGenerator::sample`].
pub fn sample_generator(gen: &ImplicitGenerator, condition: &[f64], stream: &mut RandomStream, s: usize) -> Result<ParticleCloud> {
    gen.sample(condition, stream, s)
}

/// Generator output and its Langevin continuation.
#[derive(Clone, Debug)]
pub struct TeacherBatch {
    /// The generator inputs that produced `generated`.
    pub inputs: Mat,
    pub generated: ParticleCloud,
    /// After `substeps` Langevin steps.
    pub teacher: ParticleCloud,
    /// Clouds after steps `1..=substeps`, when requested.
    pub path: Vec<ParticleCloud>,
}

impl TeacherBatch {
    pub fn conditions(&self, cond_dim: usize) -> Mat {
        self.inputs.slice_cols(0, cond_dim)
    }
}

/// Draws generator noise from `stream`, then seeds per-particle Langevin
/// streams from the next word of `stream`, and runs `substeps` steps.
pub fn make_teacher_batch_conditioned(
    gen: &ImplicitGenerator,
    conditions: &Mat,
    target: &dyn Target,
    h: f64,
    substeps: usize,
    stream: &mut RandomStream,
    keep_path: bool,
) -> Result<TeacherBatch> {
    let n = conditions.rows();
    if n == 0 {
        return Err(Error::Contract("teacher batch needs at least one sample".into()));
    }
    let noise = stream.gaussian_mat(n, gen.noise_dim);
    let inputs = gen.inputs(conditions, &noise)?;
    let generated = ParticleCloud::new(gen.generate(&inputs)?)?;
    let mut streams = flow_streams(stream.next_u64(), n);
    let mut cloud = generated.clone();
    let mut path = Vec::new();
    for k in 1..=substeps {
        cloud = langevin_step(&cloud, target, h, Noise::Streams(&mut streams), k)?;
        if keep_path {
            path.push(cloud.clone());
        }
    }
    Ok(TeacherBatch { inputs, generated, teacher: cloud, path })
}

/// Teacher batch of `s` samples at one condition.
pub fn make_teacher_batch(
    gen: &ImplicitGenerator,
    condition: &[f64],
    target: &dyn Target,
    h: f64,
    substeps: usize,
    stream: &mut RandomStream,
    s: usize,
) -> Result<ParticleCloud> {
    if substeps == 0 {
        return Err(Error::Contract("a teacher batch needs at least one flow step".into()));
    }
    Ok(make_teacher_batch_conditioned(gen, &repeat_row(condition, s), target, h, substeps, stream, false)?.teacher)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    /// Mean squared distance between samples sharing a noise seed.
    Euclidean,
    /// Squared `W₂` via exact assignment within each condition group.
    ExactOt,
    /// Dual `W₁` through a trained critic.
    Critic,
}

fn default_critic_steps() -> usize {
    5
}

fn default_inner_steps() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub distance: DistanceKind,
    #[serde(default = "default_inner_steps")]
    pub inner_steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Langevin steps distilled per round.
    pub substeps: usize,
    /// Critic updates per generator update in critic mode.
    #[serde(default = "default_critic_steps")]
    pub critic_steps: usize,
}

impl DistillConfig {
    pub fn new(distance: DistanceKind, learning_rate: f64, batch_size: usize, substeps: usize) -> Self {
        Self { distance, inner_steps: 1, learning_rate, batch_size, substeps, critic_steps: 5 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || (self.distance == DistanceKind::ExactOt && self.batch_size < 2) {
            return Err(Error::Config(format!("batch_size {} too small for {:?}", self.batch_size, self.distance)));
        }
        if self.inner_steps == 0 {
            return Err(Error::Config("inner_steps must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    None,
    /// Every parameter clipped to `[−c, c]` after each update.
    WeightClip(f64),
    /// `λ·mean((‖∇ₓf(x̂)‖ − 1)₊²)` at random interpolates `x̂`.
    GradientPenalty(f64),
}

/// A scalar network trained on the dual form of `W₁`.
#[derive(Clone, Debug)]
pub struct Critic {
    network: Arc<dyn DiffFn>,
    pub params: ParamMap,
    pub regularizer: Regularizer,
    pub optimizer: Optimizer,
}

impl Critic {
    pub fn new(network: Arc<dyn DiffFn>, params: ParamMap, regularizer: Regularizer, optimizer: Optimizer) -> Result<Self> {
        params.check_signature(&network.signature())?;
        if network.output_dim() != 1 {
            return Err(Error::Contract("a critic needs a scalar output".into()));
        }
        if matches!(regularizer, Regularizer::GradientPenalty(_)) {
            let g = Graph::new();
            let p = load_params(&g, &params, false);
            let x = g.constant(Mat::zeros(1, network.input_dim()));
            if network.input_gradient(&g, &p, x).is_none() {
                return Err(Error::Contract("gradient penalty needs a network with an input-gradient graph".into()));
            }
        }
        let mut c = Self { network, params, regularizer, optimizer };
        c.enforce();
        Ok(c)
    }

    pub fn network(&self) -> &dyn DiffFn {
        self.network.as_ref()
    }

    pub fn input_dim(&self) -> usize {
        self.network.input_dim()
    }

    fn enforce(&mut self) {
        if let Regularizer::WeightClip(c) = self.regularizer {
            self.params.clip(c);
        }
    }

    /// `mean f(real) − mean f(fake)`.
    pub fn objective(&self, real: &Mat, fake: &Mat) -> Result<f64> {
        let fr = evaluate_batch(self.network.as_ref(), &self.params, real)?;
        let ff = evaluate_batch(self.network.as_ref(), &self.params, fake)?;
        Ok(fr.sum() / fr.rows() as f64 - ff.sum() / ff.rows() as f64)
    }

    /// One ascent step on the regularized dual objective; returns the
    /// unregularized objective before the step.
    pub fn update(&mut self, real: &Mat, fake: &Mat, stream: &mut RandomStream) -> Result<f64> {
        if real.shape() != fake.shape() {
            return Err(Error::Contract(format!("real {:?} and fake {:?} batches differ", real.shape(), fake.shape())));
        }
        let g = Graph::new();
        let p = load_params(&g, &self.params, true);
        let fr = self.network.forward(&g, &p, g.constant(real.clone()));
        let ff = self.network.forward(&g, &p, g.constant(fake.clone()));
        let gap = g.sub(g.mean(fr), g.mean(ff));
        let value = g.scalar(gap);
        let obj = match self.regularizer {
            Regularizer::GradientPenalty(lambda) => {
                let n = real.rows();
                let mut mix = Mat::zeros(n, real.cols());
                for i in 0..n {
                    let e = stream.uniform();
                    for j in 0..real.cols() {
                        mix[(i, j)] = e * real[(i, j)] + (1.0 - e) * fake[(i, j)];
                    }
                }
                let dx = self
                    .network
                    .input_gradient(&g, &p, g.constant(mix))
                    .expect("checked at construction");
                let excess = g.relu(g.offset(g.norm_rows(dx), -1.0));
                g.sub(gap, g.scale(g.mean(g.square(excess)), lambda))
            }
            _ => gap,
        };
        let grads = g.backward(obj);
        let mut grad = self.params.clone();
        for (e, v) in grad.entries_mut().iter_mut().zip(&p) {
            e.values = grads.wrt(*v).into_vec();
        }
        self.optimizer.ascend(&mut self.params, &grad);
        self.enforce();
        if !self.params.iter_values().all(|x| x.is_finite()) {
            return Err(Error::Numeric("critic parameters became non-finite".into()));
        }
        Ok(value)
    }
}

/// Free-function form of [`Critic::update`].
pub fn critic_update(critic: &mut Critic, real: &Mat, fake: &Mat, stream: &mut RandomStream) -> Result<f64> {
    critic.update(real, fake, stream)
}

/// Rows grouped by identical condition, in order of first appearance.
pub fn condition_groups(conditions: &Mat) -> Vec<Vec<usize>> {
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, row) in conditions.iter_rows().enumerate() {
        let key: Vec<u64> = row.iter().map(|x| x.to_bits()).collect();
        let g = *index.entry(key).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(i);
    }
    if groups.is_empty() && conditions.rows() > 0 {
        groups.push((0..conditions.rows()).collect());
    }
    groups
}

/// Per-row teacher targets for the student rows under an order-2 exact
/// assignment inside each condition group.
pub fn ot_targets(student: &Mat, teacher: &Mat, groups: &[Vec<usize>]) -> Mat {
    let mut out = Mat::zeros(student.rows(), student.cols());
    for g in groups {
        let s = student.select_rows(g);
        let t = teacher.select_rows(g);
        let cost = crate::metrics::cost_matrix(&s, &t, 2);
        for (a, b) in optimal_assignment(&cost).into_iter().enumerate() {
            out.row_mut(g[a]).copy_from_slice(teacher.row(g[b]));
        }
    }
    out
}

/// Mean squared row distance; the reported distance in the two
/// sample-matching modes is its square root for `exact_ot`.
fn mean_sq_dist(a: &Mat, b: &Mat) -> f64 {
    let total: f64 = a.iter_rows().zip(b.iter_rows()).map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>()).sum();
    total / a.rows() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    /// The configured distance before the update: mean squared distance
    /// (euclidean), `W₂` (exact_ot) or the critic's dual estimate.
    pub distance: f64,
    /// The same quantity after the update on the same batch (not reported
    /// in critic mode).
    pub distance_after: Option<f64>,
}

/// Generator update state: the optimizer and, in critic mode, the critic.
#[derive(Clone, Debug)]
pub struct Distiller {
    pub config: DistillConfig,
    pub optimizer: Optimizer,
    pub critic: Option<Critic>,
}

impl Distiller {
    pub fn new(config: DistillConfig, critic: Option<Critic>) -> Result<Self> {
        config.validate()?;
        let lr = config.learning_rate;
        Ok(Self { config, optimizer: Optimizer::adam(lr), critic })
    }

    pub fn with_optimizer(mut self, optimizer: Optimizer) -> Self {
        self.optimizer = optimizer;
        self
    }

    /// One distillation update of `gen` against `batch.teacher`.
    pub fn distill_step(&mut self, gen: &mut ImplicitGenerator, batch: &TeacherBatch, stream: &mut RandomStream) -> Result<DistillReport> {
        distill_step(gen, batch, &self.config, &mut self.optimizer, self.critic.as_mut(), stream)
    }
}

fn generator_grad(gen: &ImplicitGenerator, inputs: &Mat, loss: impl Fn(&Graph, Var) -> Var) -> (f64, ParamMap) {
    let g = Graph::new();
    let p = load_params(&g, &gen.params, true);
    let out = gen.network.forward(&g, &p, g.constant(inputs.clone()));
    let l = loss(&g, out);
    let value = g.scalar(l);
    let grads = g.backward(l);
    let mut grad = gen.params.clone();
    for (e, v) in grad.entries_mut().iter_mut().zip(&p) {
        e.values = grads.wrt(*v).into_vec();
    }
    (value, grad)
}

fn sq_loss(g: &Graph, out: Var, target: &Mat) -> Var {
    let d = g.sub(out, g.constant(target.clone()));
    g.mean(g.sum_cols(g.square(d)))
}

/// Moves `gen.params` to reduce the configured distance to
/// `batch.teacher`. The teacher samples are never modified.
///
/// * euclidean: the student is the generator at the teacher's own inputs.
/// * exact_ot: the student uses fresh noise at the same conditions; the
///   assignment is solved once per call and held fixed through the inner
///   steps.
/// * critic: `critic_steps` critic updates on (condition ⊕ teacher) versus
///   (condition ⊕ student), then generator steps on `−mean f(student)`.
pub fn distill_step(
    gen: &mut ImplicitGenerator,
    batch: &TeacherBatch,
    config: &DistillConfig,
    optimizer: &mut Optimizer,
    mut critic: Option<&mut Critic>,
    stream: &mut RandomStream,
) -> Result<DistillReport> {
    config.validate()?;
    let teacher = batch.teacher.samples();
    if batch.inputs.rows() != teacher.rows() || teacher.cols() != gen.output_dim() {
        return Err(Error::Contract("teacher batch does not match the generator".into()));
    }
    let n = teacher.rows();
    let conds = batch.conditions(gen.cond_dim);
    let report = match config.distance {
        DistanceKind::Euclidean => {
            let mut first = None;
            for _ in 0..config.inner_steps {
                let (v, grad) = generator_grad(gen, &batch.inputs, |g, out| sq_loss(g, out, teacher));
                first.get_or_insert(v);
                optimizer.descend(&mut gen.params, &grad);
            }
            let after = mean_sq_dist(&gen.generate(&batch.inputs)?, teacher);
            DistillReport { distance: first.expect("inner_steps >= 1"), distance_after: Some(after) }
        }
        DistanceKind::ExactOt => {
            let noise = stream.gaussian_mat(n, gen.noise_dim);
            let inputs = gen.inputs(&conds, &noise)?;
            let groups = condition_groups(&conds);
            let matched = ot_targets(&gen.generate(&inputs)?, teacher, &groups);
            let mut first = None;
            for _ in 0..config.inner_steps {
                let (v, grad) = generator_grad(gen, &inputs, |g, out| sq_loss(g, out, &matched));
                first.get_or_insert(v);
                optimizer.descend(&mut gen.params, &grad);
            }
            let student = gen.generate(&inputs)?;
            let after = mean_sq_dist(&student, &ot_targets(&student, teacher, &groups));
            DistillReport { distance: first.expect("inner_steps >= 1").sqrt(), distance_after: Some(after.sqrt()) }
        }
        DistanceKind::Critic => {
            let critic = critic
                .as_deref_mut()
                .ok_or_else(|| Error::Contract("critic mode needs a critic".into()))?;
            if critic.input_dim() != gen.cond_dim + gen.output_dim() {
                return Err(Error::Contract("critic input must be condition ⊕ sample".into()));
            }
            let real = Mat::hcat(&[&conds, teacher]);
            let noise = stream.gaussian_mat(n, gen.noise_dim);
            let inputs = gen.inputs(&conds, &noise)?;
            let mut estimate = 0.0;
            for _ in 0..config.critic_steps {
                let fake = Mat::hcat(&[&conds, &gen.generate(&inputs)?]);
                estimate = critic.update(&real, &fake, stream)?;
            }
            let cnet = critic.network.clone();
            let cparams = critic.params.clone();
            let cond_dim = gen.cond_dim;
            for _ in 0..config.inner_steps {
                let (_, grad) = generator_grad(gen, &inputs, |g, out| {
                    let cp = load_params(g, &cparams, false);
                    let x = if cond_dim == 0 { out } else { g.concat(g.constant(conds.clone()), out) };
                    g.neg(g.mean(cnet.forward(g, &cp, x)))
                });
                optimizer.descend(&mut gen.params, &grad);
            }
            DistillReport { distance: estimate, distance_after: None }
        }
    };
    if !gen.params.iter_values().all(|x| x.is_finite()) {
        return Err(Error::Numeric("generator parameters became non-finite".into()));
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub distance: f64,
    pub mean: Vec<f64>,
    pub spread: f64,
}

/// Repeated distillation of an unconditional generator toward `target`:
/// each round builds a fresh teacher batch from the current generator.
pub fn distill_to_target(
    gen: &mut ImplicitGenerator,
    target: &dyn Target,
    h: f64,
    distiller: &mut Distiller,
    rounds: usize,
    seed: u64,
) -> Result<Vec<RoundLog>> {
    use crate::numerics::rng::{stream_id, tags};
    if gen.cond_dim != 0 {
        return Err(Error::Contract("distill_to_target drives an unconditional generator".into()));
    }
    let s = distiller.config.batch_size;
    let conds = Mat::zeros(s, 0);
    let mut log = Vec::with_capacity(rounds);
    for r in 0..rounds {
        let mut gs = RandomStream::new(seed, stream_id(tags::GENERATOR_NOISE, r as u64));
        let batch = make_teacher_batch_conditioned(gen, &conds, target, h, distiller.config.substeps, &mut gs, false)?;
        let mut ss = RandomStream::new(seed, stream_id(tags::STUDENT_NOISE, r as u64));
        let rep = distiller.distill_step(gen, &batch, &mut ss)?;
        let m = crate::metrics::empirical_moments(batch.generated.samples())?;
        let spread = (crate::numerics::linalg::trace(&m.covariance) / m.dim() as f64).sqrt();
        log.push(RoundLog { round: r, distance: rep.distance, mean: m.mean, spread });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::nets::{Identity, Linear, NoisePassthrough};
    use crate::targets::standard_normal;

    fn identity_gen(d: usize) -> ImplicitGenerator {
        ImplicitGenerator::new(Arc::new(Identity { dim: d }), ParamMap::new(), 0, true).unwrap()
    }

    #[test]
    fn identity_generator_returns_raw_noise() {
        let gen = ImplicitGenerator::new(Arc::new(NoisePassthrough { cond_dim: 1, dim: 2 }), ParamMap::new(), 1, true).unwrap();
        let a = gen.sample(&[0.0], &mut RandomStream::new(4, 4), 5).unwrap();
        let raw = RandomStream::new(4, 4).gaussian_mat(5, 2);
        assert_eq!(a.samples(), &raw);
        assert_eq!(a, gen.sample(&[0.0], &mut RandomStream::new(4, 4), 5).unwrap());
        assert!(matches!(gen.sample(&[0.0, 1.0], &mut RandomStream::new(4, 4), 5), Err(Error::Contract(_))));
    }

    #[test]
    fn teacher_batch_composition() {
        let gen = identity_gen(1);
        let t = standard_normal(1);
        let mut s = RandomStream::new(1, 2);
        let batch = make_teacher_batch_conditioned(&gen, &Mat::zeros(6, 0), &t, 0.1, 1, &mut s, false).unwrap();
        let mut o = RandomStream::new(1, 2);
        let gen_cloud = gen.sample(&[], &mut o, 6).unwrap();
        let mut streams = flow_streams(o.next_u64(), 6);
        let one = langevin_step(&gen_cloud, &t, 0.1, Noise::Streams(&mut streams), 1).unwrap();
        assert_eq!(batch.teacher, one);
        let h0 = make_teacher_batch(&gen, &[], &t, 0.0, 3, &mut RandomStream::new(1, 2), 6).unwrap();
        assert_eq!(h0, gen_cloud);
    }

    #[test]
    fn euclidean_zero_when_teacher_equals_student() {
        let lin = Linear { input: 1, output: 1 };
        let params = ParamMap::new().with("weight", &[1, 1], vec![0.7]).unwrap().with("bias", &[1], vec![0.2]).unwrap();
        let mut gen = ImplicitGenerator::new(Arc::new(lin), params.clone(), 0, true).unwrap();
        let inputs = Mat::column_vector(vec![0.5, -1.0, 2.0]);
        let cloud = ParticleCloud::new(gen.generate(&inputs).unwrap()).unwrap();
        let batch = TeacherBatch { inputs, generated: cloud.clone(), teacher: cloud, path: vec![] };
        let cfg = DistillConfig::new(DistanceKind::Euclidean, 0.1, 3, 1);
        let rep = distill_step(&mut gen, &batch, &cfg, &mut Optimizer::sgd(0.1), None, &mut RandomStream::new(0, 0)).unwrap();
        assert_eq!(rep.distance, 0.0);
        assert_eq!(gen.params, params);
    }

    #[test]
    fn critic_mode_requires_critic() {
        let mut gen = identity_gen(1);
        let c = ParticleCloud::from_rows(&[[0.0], [1.0]]).unwrap();
        let batch = TeacherBatch { inputs: c.samples().clone(), generated: c.clone(), teacher: c, path: vec![] };
        let cfg = DistillConfig::new(DistanceKind::Critic, 0.1, 2, 1);
        let err = distill_step(&mut gen, &batch, &cfg, &mut Optimizer::sgd(0.1), None, &mut RandomStream::new(0, 0));
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn groups_follow_first_appearance() {
        let c = Mat::from_rows(&[[1.0], [0.0], [1.0], [2.0], [0.0]]);
        assert_eq!(condition_groups(&c), vec![vec![0, 2], vec![1, 4], vec![3]]);
        assert_eq!(condition_groups(&Mat::zeros(3, 0)), vec![vec![0, 1, 2]]);
    }

    #[test]
    fn clip_bounds_critic_parameters() {
        let lin = Linear { input: 1, output: 1 };
        let params = ParamMap::new().with("weight", &[1, 1], vec![3.0]).unwrap().with("bias", &[1], vec![-2.0]).unwrap();
        let mut c = Critic::new(Arc::new(lin), params, Regularizer::WeightClip(0.01), Optimizer::sgd(1.0)).unwrap();
        assert!(c.params.max_abs() <= 0.01);
        let real = Mat::column_vector(vec![5.0, 5.1]);
        let fake = Mat::column_vector(vec![0.0, 0.1]);
        c.update(&real, &fake, &mut RandomStream::new(0, 0)).unwrap();
        assert!(c.params.max_abs() <= 0.01);
        assert_eq!(c.objective(&real, &real).unwrap(), 0.0);
    }
}
