//! The discretized Langevin flow.
//!
//! One step moves every particle by
//! `z ← z + (h/2)·∇log p̃(z) + √h·ξ`, `ξ ~ N(0, I)`, with one random stream
//! per particle. The trajectory `z₀ … z_K` and its path average over
//! clouds `1..=K` approximate the flow's marginal at time `T = hK`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::{particle_streams, tags};
use crate::numerics::{evaluate_batch, DiffFn, Mat, ParamMap, RandomStream};
use crate::targets::Target;

/// `N` particles in `d` dimensions, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleCloud {
    samples: Mat,
}

impl ParticleCloud {
    pub fn new(samples: Mat) -> Result<Self> {
        if samples.rows() == 0 {
            return Err(Error::Contract("a particle cloud needs at least one particle".into()));
        }
        if !samples.all_finite() {
            return Err(Error::Numeric("particle cloud has non-finite entries".into()));
        }
        Ok(Self { samples })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(Mat::from_rows(rows))
    }

    /// `n` copies of one point.
    pub fn constant(point: &[f64], n: usize) -> Result<Self> {
        Self::new(Mat::from_rows(&vec![point; n]))
    }

    /// `n` draws from `N(mean, diag(std²))` out of one stream.
    pub fn gaussian(mean: &[f64], std: &[f64], n: usize, stream: &mut RandomStream) -> Result<Self> {
        let d = mean.len();
        let mut m = stream.gaussian_mat(n, d);
        for i in 0..n {
            for (j, x) in m.row_mut(i).iter_mut().enumerate() {
                *x = mean[j] + std[j] * *x;
            }
        }
        Self::new(m)
    }

    pub fn samples(&self) -> &Mat {
        &self.samples
    }

    pub fn into_samples(self) -> Mat {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        self.samples.row(i)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSchedule {
    #[default]
    Fixed,
    /// `h_k = h₀·k^{−1/3}` for `k = 1, 2, …`.
    Decreasing,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub step_size: f64,
    pub num_steps: usize,
    #[serde(default)]
    pub schedule: StepSchedule,
}

impl FlowConfig {
    pub fn new(step_size: f64, num_steps: usize) -> Self {
        Self { step_size, num_steps, schedule: StepSchedule::Fixed }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size >= 0.0) || !self.step_size.is_finite() {
            return Err(Error::Config(format!("step_size must be finite and >= 0, got {}", self.step_size)));
        }
        Ok(())
    }

    /// Step size used by step `k` (1-based).
    pub fn step_size_at(&self, k: usize) -> f64 {
        match self.schedule {
            StepSchedule::Fixed => self.step_size,
            StepSchedule::Decreasing => self.step_size * (k.max(1) as f64).powf(-1.0 / 3.0),
        }
    }

    pub fn total_time(&self) -> f64 {
        (1..=self.num_steps).map(|k| self.step_size_at(k)).sum()
    }
}

/// Source of the diffusion noise.
pub enum Noise<'a> {
    /// One stream per particle, advanced by `d` normals per step.
    Streams(&'a mut [RandomStream]),
    /// Drift only.
    Off,
}

/// One Langevin step; `step` is only used to label divergence errors.
pub fn langevin_step(cloud: &ParticleCloud, target: &dyn Target, h: f64, noise: Noise<'_>, step: usize) -> Result<ParticleCloud> {
    if !(h >= 0.0) {
        return Err(Error::Contract(format!("step size must be >= 0, got {h}")));
    }
    let (n, d) = cloud.samples.shape();
    if target.dim() != d {
        return Err(Error::Contract(format!("target has dimension {}, cloud has {d}", target.dim())));
    }
    if h == 0.0 {
        if let Noise::Streams(s) = noise {
            check_streams(s, n)?;
        }
        return Ok(cloud.clone());
    }
    let (_, grad) = target.log_density_grad(&cloud.samples)?;
    if let Some(k) = grad.as_slice().iter().position(|x| !x.is_finite()) {
        return Err(Error::Divergence { step, particle: k / d });
    }
    let mut next = cloud.samples.clone();
    let drift = 0.5 * h;
    let sd = h.sqrt();
    match noise {
        Noise::Off => {
            for (z, g) in next.as_mut_slice().iter_mut().zip(grad.as_slice()) {
                *z += drift * g;
            }
        }
        Noise::Streams(streams) => {
            check_streams(streams, n)?;
            next.as_mut_slice()
                .par_chunks_mut(d)
                .zip(grad.as_slice().par_chunks(d))
                .zip(streams.par_iter_mut())
                .for_each(|((z, g), s)| {
                    for (zi, gi) in z.iter_mut().zip(g) {
                        *zi += drift * gi + sd * s.gaussian();
                    }
                });
        }
    }
    if let Some(k) = next.as_slice().iter().position(|x| !x.is_finite()) {
        return Err(Error::Divergence { step, particle: k / d });
    }
    Ok(ParticleCloud { samples: next })
}

fn check_streams(streams: &[RandomStream], n: usize) -> Result<()> {
    if streams.len() != n {
        return Err(Error::Contract(format!("{} noise streams for {n} particles", streams.len())));
    }
    Ok(())
}

/// Runs `config.num_steps` steps, calling `observe(k, cloud)` on every cloud
/// `k = 0..=K`, and returns the final cloud.
pub fn run_flow(
    initial: &ParticleCloud,
    target: &dyn Target,
    config: &FlowConfig,
    streams: &mut [RandomStream],
    mut observe: impl FnMut(usize, &ParticleCloud),
) -> Result<ParticleCloud> {
    config.validate()?;
    observe(0, initial);
    let mut cloud = initial.clone();
    for k in 1..=config.num_steps {
        cloud = langevin_step(&cloud, target, config.step_size_at(k), Noise::Streams(streams), k)?;
        observe(k, &cloud);
    }
    Ok(cloud)
}

/// The standard per-particle streams for a flow rooted at `seed`.
pub fn flow_streams(seed: u64, n: usize) -> Vec<RandomStream> {
    particle_streams(seed, tags::PARTICLE, 0, n)
}

/// Clouds `z₀ … z_K`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowTrajectory {
    clouds: Vec<ParticleCloud>,
}

impl FlowTrajectory {
    pub fn new(clouds: Vec<ParticleCloud>) -> Result<Self> {
        let first = clouds.first().ok_or_else(|| Error::Contract("a trajectory needs its initial cloud".into()))?;
        let shape = first.samples.shape();
        if clouds.iter().any(|c| c.samples.shape() != shape) {
            return Err(Error::Contract("trajectory clouds disagree in shape".into()));
        }
        Ok(Self { clouds })
    }

    pub fn clouds(&self) -> &[ParticleCloud] {
        &self.clouds
    }

    /// Number of steps `K`.
    pub fn num_steps(&self) -> usize {
        self.clouds.len() - 1
    }

    pub fn initial(&self) -> &ParticleCloud {
        &self.clouds[0]
    }

    pub fn last(&self) -> &ParticleCloud {
        self.clouds.last().expect("non-empty")
    }

    /// Long-form CSV: `step,particle,z0,z1,…`.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let d = self.initial().dim();
        let header: Vec<String> = ["step".to_string(), "particle".to_string()]
            .into_iter()
            .chain((0..d).map(|j| format!("z{j}")))
            .collect();
        writeln!(w, "{}", header.join(","))?;
        for (k, c) in self.clouds.iter().enumerate() {
            for (i, row) in c.samples.iter_rows().enumerate() {
                write!(w, "{k},{i}")?;
                for x in row {
                    write!(w, ",{x}")?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

/// Full trajectory from `initial` with streams rooted at `seed`.
pub fn simulate_flow(initial: &ParticleCloud, target: &dyn Target, config: &FlowConfig, seed: u64) -> Result<FlowTrajectory> {
    let mut streams = flow_streams(seed, initial.len());
    let mut clouds = Vec::with_capacity(config.num_steps + 1);
    run_flow(initial, target, config, &mut streams, |_, c| clouds.push(c.clone()))?;
    FlowTrajectory::new(clouds)
}

/// Same dynamics as [`simulate_flow`], keeping only the last cloud.
pub fn simulate_final(initial: &ParticleCloud, target: &dyn Target, config: &FlowConfig, seed: u64) -> Result<ParticleCloud> {
    let mut streams = flow_streams(seed, initial.len());
    run_flow(initial, target, config, &mut streams, |_, _| {})
}

/// Running mean of a scalar test function over clouds `1..=K`, per particle.
#[derive(Clone, Debug)]
pub struct PathAverager {
    sums: Vec<f64>,
    clouds: usize,
}

impl PathAverager {
    pub fn new(n: usize) -> Self {
        Self { sums: vec![0.0; n], clouds: 0 }
    }

    /// Adds `ψ` evaluated on one cloud (skipped for `step == 0`).
    pub fn observe(&mut self, step: usize, psi_values: &[f64]) {
        if step == 0 {
            return;
        }
        for (s, v) in self.sums.iter_mut().zip(psi_values) {
            *s += v;
        }
        self.clouds += 1;
    }

    /// Per-particle path averages.
    pub fn per_particle(&self) -> Result<Vec<f64>> {
        if self.clouds == 0 {
            return Err(Error::Contract("path average needs K >= 1".into()));
        }
        Ok(self.sums.iter().map(|s| s / self.clouds as f64).collect())
    }

    /// Average over particles and clouds.
    pub fn mean(&self) -> Result<f64> {
        let p = self.per_particle()?;
        Ok(p.iter().sum::<f64>() / p.len() as f64)
    }
}

/// `(1/K)·Σ_{k=1..K} mean_i ψ(z_k⁽ⁱ⁾)`; the initial cloud is excluded.
pub fn path_average(traj: &FlowTrajectory, psi: &dyn DiffFn, params: &ParamMap) -> Result<f64> {
    if traj.num_steps() == 0 {
        return Err(Error::Contract("path average needs K >= 1".into()));
    }
    if psi.output_dim() != 1 {
        return Err(Error::Contract("path average needs a scalar test function".into()));
    }
    let mut acc = PathAverager::new(traj.initial().len());
    for (k, c) in traj.clouds().iter().enumerate().skip(1) {
        acc.observe(k, evaluate_batch(psi, params, c.samples())?.as_slice());
    }
    acc.mean()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::nets::{Constant, Projection};
    use crate::targets::{standard_normal, two_gaussians};

    #[test]
    fn zero_step_is_identity() {
        let t = two_gaussians();
        let c = ParticleCloud::from_rows(&[[0.5, -1.0], [3.0, 2.0]]).unwrap();
        let mut s = flow_streams(1, 2);
        assert_eq!(langevin_step(&c, &t, 0.0, Noise::Streams(&mut s), 1).unwrap(), c);
    }

    #[test]
    fn drift_only_hand_value() {
        let t = standard_normal(1);
        let c = ParticleCloud::from_rows(&[[4.0]]).unwrap();
        let next = langevin_step(&c, &t, 0.01, Noise::Off, 1).unwrap();
        assert!((next.particle(0)[0] - 3.98).abs() < 1e-15);
    }

    #[test]
    fn noise_uses_the_particle_streams() {
        let t = standard_normal(2);
        let c = ParticleCloud::from_rows(&[[1.0, 0.0], [0.0, -1.0]]).unwrap();
        let h = 0.04;
        let next = langevin_step(&c, &t, h, Noise::Streams(&mut flow_streams(9, 2)), 1).unwrap();
        let mut oracle = flow_streams(9, 2);
        for i in 0..2 {
            let xi = oracle[i].draw_gaussian(2);
            for j in 0..2 {
                let z = c.particle(i)[j];
                assert_eq!(next.particle(i)[j], z + 0.5 * h * (-z) + h.sqrt() * xi[j]);
            }
        }
    }

    #[test]
    fn divergence_names_step_and_particle() {
        let t = standard_normal(1);
        let c = ParticleCloud::from_rows(&[[0.0], [1e308]]).unwrap();
        let err = langevin_step(&c, &t, 10.0, Noise::Off, 7).unwrap_err();
        assert!(matches!(err, Error::Divergence { step: 7, particle: 1 }), "{err:?}");
    }

    #[test]
    fn trajectory_shape_and_k0() {
        let t = standard_normal(1);
        let c = ParticleCloud::from_rows(&[[1.0], [2.0]]).unwrap();
        let k0 = simulate_flow(&c, &t, &FlowConfig::new(0.1, 0), 3).unwrap();
        assert_eq!(k0.clouds(), std::slice::from_ref(&c));
        let traj = simulate_flow(&c, &t, &FlowConfig::new(0.1, 5), 3).unwrap();
        assert_eq!(traj.num_steps(), 5);
        assert_eq!(traj.last(), &simulate_final(&c, &t, &FlowConfig::new(0.1, 5), 3).unwrap());
        assert!(matches!(path_average(&k0, &Constant { dim: 1, value: 1.0 }, &ParamMap::new()), Err(Error::Contract(_))));
    }

    #[test]
    fn path_average_examples() {
        let frozen = ParticleCloud::from_rows(&[[2.0, 0.0]]).unwrap();
        let traj = FlowTrajectory::new(vec![ParticleCloud::from_rows(&[[100.0, 0.0]]).unwrap(), frozen.clone(), frozen]).unwrap();
        let one = path_average(&traj, &Constant { dim: 2, value: 1.0 }, &ParamMap::new()).unwrap();
        assert_eq!(one, 1.0);
        let z1 = path_average(&traj, &Projection { dim: 2, index: 0 }, &ParamMap::new()).unwrap();
        assert_eq!(z1, 2.0);
    }

    #[test]
    fn decreasing_schedule() {
        let c = FlowConfig { step_size: 0.8, num_steps: 8, schedule: StepSchedule::Decreasing };
        assert_eq!(c.step_size_at(1), 0.8);
        assert!((c.step_size_at(8) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn csv_dump() {
        let c = ParticleCloud::from_rows(&[[1.0, 2.5]]).unwrap();
        let traj = FlowTrajectory::new(vec![c.clone(), c]).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,particle,z0,z1\n0,0,1,2.5\n1,0,1,2.5\n");
    }
}
