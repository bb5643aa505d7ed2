//! Experiment specifications: a TOML document with a common header and a
//! kind-specific `[experiment]` table.

use std::fmt;
use std::path::{Path, PathBuf};

use ctflow::amortize::{DistanceKind, DistillConfig};
use ctflow::flow::{FlowConfig, StepSchedule};
use ctflow::macgan::LrSchedule;
use ctflow::metrics::TestFunction;
use ctflow::targets;
use serde::{Deserialize, Serialize};

pub const SPEC_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub version: u32,
    /// A name from the target registry.
    pub target: String,
    /// One independent replica per seed.
    pub seeds: Vec<u64>,
    pub output: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow: Option<FlowConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distill: Option<DistillConfig>,
    pub experiment: Experiment,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MacVaeVariant {
    /// Four one-hot observations, categorical decoder.
    OneHot,
    /// The linear-Gaussian model with a closed-form posterior.
    Conjugate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Experiment {
    FlowOracle {
        particles: usize,
        initial_mean: f64,
        initial_variance: f64,
        /// Moment rows are written every this many steps.
        record_every: usize,
    },
    MseRate {
        /// Chain lengths `K`; each uses `h = c·K^{−1/3}`.
        ks: Vec<usize>,
        c: f64,
        repetitions: usize,
        initial_mean: f64,
        initial_variance: f64,
        test_function: TestFunction,
    },
    W2Decay {
        times: Vec<f64>,
        particles: usize,
        replicas: usize,
        initial_mean: f64,
        initial_variance: f64,
    },
    Prop1Collapse {
        rounds: usize,
        methods: Vec<DistanceKind>,
        hidden: Vec<usize>,
        /// Output-layer weights are scaled by this after initialization.
        output_gain: f64,
        output_bias: Vec<f64>,
        /// Reference chains run this many times the distilled flow length.
        reference_multiplier: usize,
        samples: usize,
    },
    MacvaeSynthetic {
        variant: MacVaeVariant,
        methods: Vec<DistanceKind>,
        epochs: usize,
        learn_theta: bool,
        theta_learning_rate: f64,
        linear_decay: bool,
        hidden: usize,
        coupling_layers: usize,
        /// Draws per observation for latent variances and means.
        eval_samples: usize,
        /// Draws per observation for ELBO estimates.
        elbo_samples: usize,
    },
    MacganMixture {
        epochs: usize,
        theta_learning_rate: f64,
        schedule: LrSchedule,
        clip: f64,
        confinement: f64,
        energy_hidden: Vec<usize>,
        generator_hidden: usize,
        coupling_layers: usize,
        data_points: usize,
        heldout_points: usize,
        bound_every: usize,
        bound_samples: usize,
        eval_samples: usize,
    },
    HSweep {
        grid: Vec<f64>,
        total_time: f64,
        particles: usize,
        initial_mean: Vec<f64>,
        initial_variance: f64,
        /// Chains for the MSE column on targets with an OU oracle (0 skips).
        mse_repetitions: usize,
    },
    BoundCheck {
        generator_scales: Vec<f64>,
        samples: usize,
        data_points: usize,
    },
}

impl Experiment {
    pub fn kind(&self) -> &'static str {
        match self {
            Experiment::FlowOracle { .. } => "flow_oracle",
            Experiment::MseRate { .. } => "mse_rate",
            Experiment::W2Decay { .. } => "w2_decay",
            Experiment::Prop1Collapse { .. } => "prop1_collapse",
            Experiment::MacvaeSynthetic { .. } => "macvae_synthetic",
            Experiment::MacganMixture { .. } => "macgan_mixture",
            Experiment::HSweep { .. } => "h_sweep",
            Experiment::BoundCheck { .. } => "bound_check",
        }
    }
}

/// Every problem found in a spec, each tied to a field path.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidationError {
    pub problems: Vec<(String, String)>,
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid spec:")?;
        for (field, msg) in &self.problems {
            write!(f, "\n  {field}: {msg}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ValidationError {}

struct Checker(Vec<(String, String)>);

impl Checker {
    fn check(&mut self, ok: bool, field: &str, msg: impl Into<String>) {
        if !ok {
            self.0.push((field.to_string(), msg.into()));
        }
    }

    fn positive(&mut self, v: f64, field: &str) {
        self.check(v > 0.0 && v.is_finite(), field, format!("must be a positive number, got {v}"));
    }

    fn nonzero(&mut self, v: usize, field: &str) {
        self.check(v > 0, field, "must be at least 1");
    }
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self, ValidationError> {
        let spec: ExperimentSpec = toml::from_str(text).map_err(|e| ValidationError {
            problems: vec![("<document>".into(), e.to_string().trim().replace('\n', " "))],
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, ValidationError> {
        let text = std::fs::read_to_string(path).map_err(|e| ValidationError {
            problems: vec![("<file>".into(), format!("{}: {e}", path.display()))],
        })?;
        Self::from_toml(&text)
    }

    /// The normalized document: defaults filled in, fixed key order.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("specs always serialize")
    }

    /// The canonical form without `output`: what was run, not where it was
    /// written. This is the copy stored next to the results.
    pub fn recorded(&self) -> String {
        let mut table = toml::Table::try_from(self).expect("specs always serialize");
        table.remove("output");
        toml::to_string(&table).expect("tables always serialize")
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        let mut c = Checker(Vec::new());
        c.check(self.version == SPEC_VERSION, "version", format!("unsupported version {}, expected {SPEC_VERSION}", self.version));
        let target = targets::by_name(&self.target);
        c.check(target.is_ok(), "target", format!("unknown target `{}` (known: {})", self.target, targets::REGISTRY.join(", ")));
        let dim = target.as_ref().map(|t| t.dim()).ok();
        let exact = target.as_ref().map(|t| t.sample_exact(&mut ctflow::numerics::RandomStream::new(0, 0), 1).is_some()).unwrap_or(true);
        let oracle = target.as_ref().map(|t| t.has_ou_oracle()).unwrap_or(true);
        c.check(!self.seeds.is_empty(), "seeds", "must list at least one seed");
        let mut sorted = self.seeds.clone();
        sorted.sort();
        sorted.dedup();
        c.check(sorted.len() == self.seeds.len(), "seeds", "must not repeat");
        c.check(!self.output.as_os_str().is_empty(), "output", "must name a directory");
        if let Some(f) = &self.flow {
            if let Err(e) = f.validate() {
                c.check(false, "flow", e.to_string());
            }
        }
        if let Some(d) = &self.distill {
            if let Err(e) = d.validate() {
                c.check(false, "distill", e.to_string());
            }
        }
        let needs_flow = |c: &mut Checker| c.check(self.flow.is_some(), "flow", format!("required for {}", self.experiment.kind()));
        let needs_distill = |c: &mut Checker| c.check(self.distill.is_some(), "distill", format!("required for {}", self.experiment.kind()));
        match &self.experiment {
            Experiment::FlowOracle { particles, initial_variance, record_every, .. } => {
                needs_flow(&mut c);
                c.check(oracle, "target", "flow_oracle needs a target with analytic flow marginals");
                c.nonzero(*particles, "experiment.particles");
                c.nonzero(*record_every, "experiment.record_every");
                c.check(*initial_variance >= 0.0, "experiment.initial_variance", "must be >= 0");
            }
            Experiment::MseRate { ks, c: scale, repetitions, initial_variance, test_function, .. } => {
                c.check(oracle, "target", "mse_rate needs a target with analytic flow marginals");
                c.check(ks.len() >= 2 && ks.iter().all(|k| *k > 0), "experiment.ks", "needs at least two positive chain lengths");
                c.positive(*scale, "experiment.c");
                c.nonzero(*repetitions, "experiment.repetitions");
                c.check(*initial_variance >= 0.0, "experiment.initial_variance", "must be >= 0");
                if let (TestFunction::Coordinate(i), Some(d)) = (test_function, dim) {
                    c.check(*i < d, "experiment.test_function", format!("coordinate {i} out of range for dimension {d}"));
                }
            }
            Experiment::W2Decay { times, particles, replicas, initial_variance, .. } => {
                needs_flow(&mut c);
                c.check(oracle && dim == Some(1), "target", "w2_decay needs the one-dimensional OU target");
                c.check(!times.is_empty() && times.iter().all(|t| *t >= 0.0 && t.is_finite()), "experiment.times", "needs finite times >= 0");
                c.check(*particles >= 2, "experiment.particles", "must be at least 2");
                c.check(*replicas >= 2, "experiment.replicas", "must be at least 2");
                c.positive(*initial_variance, "experiment.initial_variance");
                if let Some(f) = &self.flow {
                    c.check(f.schedule == StepSchedule::Fixed, "flow.schedule", "w2_decay needs a fixed step size");
                    c.positive(f.step_size, "flow.step_size");
                }
            }
            Experiment::Prop1Collapse { rounds, methods, hidden, output_gain, output_bias, reference_multiplier, samples } => {
                needs_flow(&mut c);
                needs_distill(&mut c);
                c.nonzero(*rounds, "experiment.rounds");
                c.check(!methods.is_empty() && !methods.contains(&DistanceKind::Critic), "experiment.methods", "list euclidean and/or exact_ot");
                c.check(!hidden.is_empty() && hidden.iter().all(|h| *h > 0), "experiment.hidden", "needs positive layer widths");
                c.check(output_gain.is_finite(), "experiment.output_gain", "must be finite");
                if let Some(d) = dim {
                    c.check(output_bias.len() == d, "experiment.output_bias", format!("needs {d} entries"));
                }
                c.nonzero(*reference_multiplier, "experiment.reference_multiplier");
                c.check((2..=ctflow::metrics::MAX_EXACT_PARTICLES).contains(samples), "experiment.samples", "must be in 2..=512");
            }
            Experiment::MacvaeSynthetic { variant, methods, epochs, theta_learning_rate, hidden, coupling_layers, eval_samples, elbo_samples, .. } => {
                needs_flow(&mut c);
                needs_distill(&mut c);
                c.check(dim == Some(2) && self.target == "standard_normal_2d", "target", "the latent prior must be standard_normal_2d");
                c.check(!methods.is_empty() && !methods.contains(&DistanceKind::Critic), "experiment.methods", "list euclidean and/or exact_ot");
                if *variant == MacVaeVariant::Conjugate {
                    c.check(methods.len() == 1, "experiment.methods", "the conjugate variant takes one method");
                }
                c.nonzero(*epochs, "experiment.epochs");
                c.positive(*theta_learning_rate, "experiment.theta_learning_rate");
                c.nonzero(*hidden, "experiment.hidden");
                c.nonzero(*coupling_layers, "experiment.coupling_layers");
                c.check(*eval_samples >= 2, "experiment.eval_samples", "must be at least 2");
                c.check(*elbo_samples >= 2, "experiment.elbo_samples", "must be at least 2");
            }
            Experiment::MacganMixture {
                epochs,
                theta_learning_rate,
                clip,
                confinement,
                energy_hidden,
                generator_hidden,
                coupling_layers,
                data_points,
                heldout_points,
                bound_every,
                bound_samples,
                eval_samples,
                ..
            } => {
                needs_flow(&mut c);
                needs_distill(&mut c);
                c.check(exact, "target", "macgan_mixture draws its data from a target with an exact sampler");
                c.nonzero(*epochs, "experiment.epochs");
                c.positive(*theta_learning_rate, "experiment.theta_learning_rate");
                c.positive(*clip, "experiment.clip");
                c.positive(*confinement, "experiment.confinement");
                c.check(!energy_hidden.is_empty() && energy_hidden.iter().all(|h| *h > 0), "experiment.energy_hidden", "needs positive layer widths");
                c.nonzero(*generator_hidden, "experiment.generator_hidden");
                c.nonzero(*coupling_layers, "experiment.coupling_layers");
                c.nonzero(*data_points, "experiment.data_points");
                let cap = ctflow::metrics::MAX_EXACT_PARTICLES;
                c.check((2..=cap).contains(heldout_points), "experiment.heldout_points", "must be in 2..=512");
                c.check((2..=cap).contains(eval_samples), "experiment.eval_samples", "must be in 2..=512");
                c.check(*eval_samples == *heldout_points, "experiment.eval_samples", "must equal heldout_points");
                if *bound_every > 0 {
                    c.check(*bound_samples >= 2, "experiment.bound_samples", "must be at least 2 when bound_every > 0");
                }
            }
            Experiment::HSweep { grid, total_time, particles, initial_mean, initial_variance, .. } => {
                c.check(!grid.is_empty() && grid.iter().all(|h| *h > 0.0 && h.is_finite()), "experiment.grid", "needs positive step sizes");
                c.positive(*total_time, "experiment.total_time");
                c.check((2..=ctflow::metrics::MAX_EXACT_PARTICLES).contains(particles), "experiment.particles", "must be in 2..=512");
                c.check(exact, "target", "h_sweep compares against exact target draws");
                if let Some(d) = dim {
                    c.check(initial_mean.len() == d, "experiment.initial_mean", format!("needs {d} entries"));
                }
                c.check(*initial_variance >= 0.0, "experiment.initial_variance", "must be >= 0");
            }
            Experiment::BoundCheck { generator_scales, samples, data_points } => {
                c.check(exact, "target", "bound_check draws its data from a target with an exact sampler");
                c.check(!generator_scales.is_empty() && generator_scales.iter().all(|s| *s > 0.0), "experiment.generator_scales", "needs positive scales");
                c.check(*samples >= 2, "experiment.samples", "must be at least 2");
                c.nonzero(*data_points, "experiment.data_points");
            }
        }
        if c.0.is_empty() {
            Ok(())
        } else {
            Err(ValidationError { problems: c.0 })
        }
    }
}
