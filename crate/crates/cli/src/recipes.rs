//! One function per experiment kind. Each runs a single seed and returns its
//! files and summary; nothing here touches the filesystem.

use std::sync::Arc;

use ctflow::amortize::{distill_to_target, DistanceKind, DistillConfig, Distiller, ImplicitGenerator, Regularizer};
use ctflow::error::{Error, Result};
use ctflow::flow::{flow_streams, run_flow, simulate_final, FlowConfig};
use ctflow::macgan::{train_macgan, write_epoch_csv, EnergyNet, LrSchedule, MacGanOptions};
use ctflow::macvae::{
    elbo_estimate, per_observation_variance, train_macvae, ConjugateGaussian, LatentVariableModel, Likelihood, MacVaeOptions,
};
use ctflow::metrics::{
    empirical_moments, log_log_slope, mse_estimate, sample_spread, w2_gaussian, wasserstein_exact, InitialGaussian, TestFunction,
};
use ctflow::numerics::nets::{Activation, Confined, Coupling, Linear, Mlp};
use ctflow::numerics::rng::{stream_id, tags};
use ctflow::numerics::{Mat, ParamMap, RandomStream};
use ctflow::targets::{self, ou_moment_curve, EnergyModel, GaussianMoments};
use rayon::prelude::*;
use serde_json::{json, Map, Value};

use crate::artifact::{num, opt, points_table, PlotMap, SeedOutput, Table};
use crate::spec::{Experiment, ExperimentSpec, MacVaeVariant};

fn stream(seed: u64, tag: u64, index: u64) -> RandomStream {
    RandomStream::new(seed, stream_id(tag, index))
}

/// Seed of the `index`-th independent replica under `seed` (SplitMix64).
pub fn replica_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ (index.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn method_name(kind: DistanceKind) -> &'static str {
    match kind {
        DistanceKind::Euclidean => "euclidean",
        DistanceKind::ExactOt => "exact_ot",
        DistanceKind::Critic => "critic",
    }
}

/// Per-coordinate mean and unbiased variance, averaged over coordinates.
fn pooled_moments(samples: &Mat) -> (f64, f64) {
    let (n, d) = samples.shape();
    let means = samples.column_means();
    let mut var = 0.0;
    for j in 0..d {
        var += samples.iter_rows().map(|r| (r[j] - means[j]).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    }
    (means.iter().sum::<f64>() / d as f64, var / d as f64)
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

pub fn run_seed(spec: &ExperimentSpec, seed: u64) -> Result<SeedOutput> {
    let target = targets::by_name(&spec.target)?;
    match &spec.experiment {
        Experiment::FlowOracle { particles, initial_mean, initial_variance, record_every } => {
            flow_oracle(&target, flow(spec), *particles, *initial_mean, *initial_variance, *record_every, seed)
        }
        Experiment::MseRate { ks, c, repetitions, initial_mean, initial_variance, test_function } => {
            let init = InitialGaussian { mean: vec![*initial_mean; target.dim()], variance: *initial_variance };
            mse_rate(&target, ks, *c, *repetitions, &init, *test_function, seed)
        }
        Experiment::W2Decay { times, particles, replicas, initial_mean, initial_variance } => {
            w2_decay(&target, flow(spec).step_size, times, *particles, *replicas, *initial_mean, *initial_variance, seed)
        }
        Experiment::Prop1Collapse { .. } => prop1_collapse(spec, &target, seed),
        Experiment::MacvaeSynthetic { variant: MacVaeVariant::OneHot, .. } => macvae_one_hot(spec, &target, seed),
        Experiment::MacvaeSynthetic { variant: MacVaeVariant::Conjugate, .. } => macvae_conjugate(spec, seed),
        Experiment::MacganMixture { .. } => macgan_mixture(spec, &target, seed),
        Experiment::HSweep { grid, total_time, particles, initial_mean, initial_variance, mse_repetitions } => {
            let init = InitialGaussian { mean: initial_mean.clone(), variance: *initial_variance };
            h_sweep(&target, grid, *total_time, *particles, &init, *mse_repetitions, seed)
        }
        Experiment::BoundCheck { generator_scales, samples, data_points } => {
            bound_check(&target, generator_scales, *samples, *data_points, seed)
        }
    }
}

fn flow(spec: &ExperimentSpec) -> &FlowConfig {
    spec.flow.as_ref().expect("validated spec carries a flow config")
}

fn distill(spec: &ExperimentSpec) -> &DistillConfig {
    spec.distill.as_ref().expect("validated spec carries a distill config")
}

fn flow_oracle(target: &EnergyModel, flow: &FlowConfig, n: usize, m0: f64, v0: f64, every: usize, seed: u64) -> Result<SeedOutput> {
    let init = InitialGaussian { mean: vec![m0; target.dim()], variance: v0 }.sample(seed, n)?;
    let mut streams = flow_streams(seed, n);
    let mut table = Table::new(&["step", "t", "mean", "variance", "analytic_mean", "analytic_variance"]);
    let mut t = 0.0;
    let mut last = (0.0, 0.0, 0.0, 0.0);
    run_flow(&init, target, flow, &mut streams, |k, c| {
        if k > 0 {
            t += flow.step_size_at(k);
        }
        if k % every == 0 || k == flow.num_steps {
            let (mean, var) = pooled_moments(c.samples());
            let (am, av) = ou_moment_curve(m0, v0, t);
            table.row([k.to_string(), num(t), num(mean), num(var), num(am), num(av)]);
            last = (mean, var, am, av);
        }
    })?;
    let (mean, variance, am, av) = last;
    let plots = ["mean", "variance", "analytic_mean", "analytic_variance"].map(|s| PlotMap::new("flow_moments", s, "t", s)).to_vec();
    Ok(SeedOutput {
        artifacts: vec![table.finish("moments.csv", plots)],
        summary: json!({
            "particles": n,
            "steps": flow.num_steps,
            "total_time": t,
            "mean": mean,
            "variance": variance,
            "analytic_mean": am,
            "analytic_variance": av,
            "mean_error": mean - am,
            "variance_error": variance - av,
        }),
    })
}

fn mse_rate(target: &EnergyModel, ks: &[usize], c: f64, reps: usize, init: &InitialGaussian, psi: TestFunction, seed: u64) -> Result<SeedOutput> {
    let rows = ks
        .par_iter()
        .map(|&k| {
            let h = c * (k as f64).powf(-1.0 / 3.0);
            Ok((k, h, mse_estimate(target, psi, &FlowConfig::new(h, k), init, reps, seed)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut table = Table::new(&["k", "h", "total_time", "mse", "std_error", "reference"]);
    for (k, h, e) in &rows {
        table.row([k.to_string(), num(*h), num(e.total_time), num(e.mse), num(e.std_error), num(e.reference)]);
    }
    let x: Vec<f64> = rows.iter().map(|r| r.0 as f64).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.2.mse).collect();
    Ok(SeedOutput {
        artifacts: vec![table.finish("mse.csv", vec![PlotMap::new("mse_rate", "mse", "k", "mse")])],
        summary: json!({ "slope": log_log_slope(&x, &y), "mse": y, "ks": ks, "repetitions": reps }),
    })
}

#[allow(clippy::too_many_arguments)]
fn w2_decay(target: &EnergyModel, h: f64, times: &[f64], n: usize, replicas: usize, m0: f64, v0: f64, seed: u64) -> Result<SeedOutput> {
    let steps: Vec<usize> = times.iter().map(|t| (t / h).round() as usize).collect();
    let kmax = steps.iter().copied().max().unwrap_or(0);
    let reference = GaussianMoments::scalar(0.0, 1.0)?;
    let per_replica = (0..replicas as u64)
        .into_par_iter()
        .map(|r| {
            let rs = replica_seed(seed, r);
            let init = InitialGaussian { mean: vec![m0], variance: v0 }.sample(rs, n)?;
            let mut streams = flow_streams(rs, n);
            let mut out = vec![f64::NAN; steps.len()];
            let mut failure = None;
            run_flow(&init, target, &FlowConfig::new(h, kmax), &mut streams, |k, c| {
                for (slot, _) in steps.iter().enumerate().filter(|(_, s)| **s == k) {
                    match empirical_moments(c.samples()).and_then(|m| w2_gaussian(&m, &reference)) {
                        Ok(w) => out[slot] = w,
                        Err(e) => failure = Some(e),
                    }
                }
            })?;
            match failure {
                Some(e) => Err(e),
                None => Ok(out),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let w0 = w2_gaussian(&GaussianMoments::scalar(m0, v0)?, &reference)?;
    let mut table = Table::new(&["t", "steps", "analytic", "lemma", "empirical", "std_error", "z"]);
    let (mut worst_rel, mut worst_z) = (0.0f64, 0.0f64);
    for (i, &k) in steps.iter().enumerate() {
        let t = k as f64 * h;
        let analytic = w2_gaussian(&targets::ou_analytic_moments(m0, v0, t)?, &reference)?;
        let lemma = (-t / 2.0).exp() * w0;
        let column: Vec<f64> = per_replica.iter().map(|r| r[i]).collect();
        let (emp, se) = mean_se(&column);
        let z = (emp - analytic) / se;
        worst_rel = worst_rel.max(if analytic > 0.0 { (lemma - analytic).abs() / analytic } else { (lemma - analytic).abs() });
        worst_z = worst_z.max(z.abs());
        table.row([num(t), k.to_string(), num(analytic), num(lemma), num(emp), num(se), num(z)]);
    }
    let plots = ["analytic", "lemma", "empirical"].map(|s| PlotMap::new("w2_decay", s, "t", s)).to_vec();
    Ok(SeedOutput {
        artifacts: vec![table.finish("w2.csv", plots)],
        summary: json!({ "initial_w2": w0, "max_lemma_rel_err": worst_rel, "max_abs_z": worst_z, "replicas": replicas }),
    })
}

fn prop1_collapse(spec: &ExperimentSpec, target: &EnergyModel, seed: u64) -> Result<SeedOutput> {
    let Experiment::Prop1Collapse { rounds, methods, hidden, output_gain, output_bias, reference_multiplier, samples } = &spec.experiment else {
        unreachable!()
    };
    let h = flow(spec).step_size;
    let d = target.dim();
    let mut dims = vec![d];
    dims.extend(hidden);
    dims.push(d);
    let net = Mlp::new(&dims, Activation::Tanh);
    let mut params = net.init(&mut stream(seed, tags::PARAM_INIT, 0));
    let out = hidden.len();
    for e in params.entries_mut() {
        if e.name == format!("layer{out}.weight") {
            e.values.iter_mut().for_each(|v| *v *= output_gain);
        } else if e.name == format!("layer{out}.bias") {
            e.values.clone_from(output_bias);
        }
    }
    let base = ImplicitGenerator::new(Arc::new(net), params, 0, true)?;
    let initial = base.sample(&[], &mut stream(seed, tags::EVALUATION, 0), *samples)?;

    let trained = methods
        .par_iter()
        .map(|&method| {
            let mut gen = base.clone();
            let mut config = distill(spec).clone();
            config.distance = method;
            let mut distiller = Distiller::new(config, None)?;
            let log = distill_to_target(&mut gen, target, h, &mut distiller, *rounds, seed)?;
            let last = gen.sample(&[], &mut stream(seed, tags::EVALUATION, 1), *samples)?;
            Ok((method, log, last))
        })
        .collect::<Result<Vec<_>>>()?;
    let length = rounds * distill(spec).substeps * reference_multiplier;
    let reference = simulate_final(&initial, target, &FlowConfig::new(h, length), seed)?;

    let mut artifacts = Vec::new();
    let mut per_method = Map::new();
    for (method, log, last) in &trained {
        let name = method_name(*method);
        let mut rounds_table = Table::new(&["round", "distance", "spread"]);
        for r in log {
            rounds_table.row([r.round.to_string(), num(r.distance), num(r.spread)]);
        }
        artifacts.push(rounds_table.finish(format!("rounds_{name}.csv"), vec![PlotMap::new("prop1_rounds", name, "round", "spread")]));
        artifacts.push(points_table(last.samples()).finish(format!("samples_{name}.csv"), vec![PlotMap::new("prop1_scatter", name, "z0", "z1")]));
        per_method.insert(
            name.into(),
            json!({
                "spread": sample_spread(last.samples())?,
                "w1_reference": wasserstein_exact(last.samples(), reference.samples(), 1)?,
                "final_distance": log.last().map(|r| r.distance),
            }),
        );
    }
    artifacts.push(points_table(reference.samples()).finish("reference.csv", vec![PlotMap::new("prop1_scatter", "reference", "z0", "z1")]));
    let spread = |m: &str| per_method.get(m).and_then(|v| v["spread"].as_f64());
    let ratio = match (spread("euclidean"), spread("exact_ot")) {
        (Some(e), Some(o)) => Some(e / o),
        _ => None,
    };
    Ok(SeedOutput {
        artifacts,
        summary: json!({
            "methods": per_method,
            "reference_spread": sample_spread(reference.samples())?,
            "reference_steps": length,
            "spread_ratio": ratio,
        }),
    })
}

fn latent_table(gen: &ImplicitGenerator, data: &Mat, s: usize, seed: u64) -> Result<Table> {
    let mut t = Table::new(&["observation", "z0", "z1"]);
    for (i, x) in data.iter_rows().enumerate() {
        let c = gen.sample(x, &mut stream(seed, tags::EVALUATION, 1000 + i as u64), s)?;
        for z in c.samples().iter_rows() {
            t.row([i.to_string(), num(z[0]), num(z[1])]);
        }
    }
    Ok(t)
}

fn macvae_one_hot(spec: &ExperimentSpec, prior: &EnergyModel, seed: u64) -> Result<SeedOutput> {
    let Experiment::MacvaeSynthetic { methods, epochs, learn_theta, theta_learning_rate, linear_decay, hidden, coupling_layers, eval_samples, .. } =
        &spec.experiment
    else {
        unreachable!()
    };
    let data = Mat::identity(4);
    let options = MacVaeOptions {
        epochs: *epochs,
        learn_theta: *learn_theta,
        theta_learning_rate: *theta_learning_rate,
        elbo_samples: 0,
        linear_decay: *linear_decay,
    };
    let trained = methods
        .par_iter()
        .map(|&method| {
            let decoder = Mlp::new(&[2, *hidden, 4], Activation::Tanh);
            let dp = decoder.init(&mut stream(seed, tags::PARAM_INIT, 0));
            let mut model = LatentVariableModel::new(prior.clone(), Arc::new(decoder), Likelihood::CategoricalOneHot, dp)?;
            let net = Coupling::new(4, 2, *hidden, *coupling_layers);
            let gp = net.init(&mut stream(seed, tags::PARAM_INIT, 1));
            let mut gen = ImplicitGenerator::new(Arc::new(net), gp, 4, true)?;
            let mut config = distill(spec).clone();
            config.distance = method;
            let log = train_macvae(&mut model, &mut gen, &data, flow(spec), &config, &options, seed)?;
            let variance = per_observation_variance(&gen, &data, *eval_samples, &mut stream(seed, tags::EVALUATION, 0))?;
            Ok((method, log, gen, variance))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut artifacts = Vec::new();
    let mut variances = Map::new();
    for (method, log, gen, variance) in &trained {
        let name = method_name(*method);
        let mut t = Table::new(&["epoch", "distill_distance", "path_log_joint"]);
        for e in log {
            t.row([e.epoch.to_string(), num(e.distill_distance), num(e.path_log_joint)]);
        }
        artifacts.push(t.finish(format!("epochs_{name}.csv"), vec![PlotMap::new("macvae_training", name, "epoch", "distill_distance")]));
        let latents = latent_table(gen, &data, *eval_samples, seed)?;
        artifacts.push(latents.finish(format!("latents_{name}.csv"), vec![PlotMap::new("macvae_latents", name, "z0", "z1").grouped("observation")]));
        variances.insert(name.into(), json!(variance));
    }
    let v = |m: &str| variances.get(m).and_then(Value::as_f64);
    let ratio = match (v("exact_ot"), v("euclidean")) {
        (Some(o), Some(e)) => Some(o / e),
        _ => None,
    };
    Ok(SeedOutput { artifacts, summary: json!({ "variance": variances, "variance_ratio": ratio }) })
}

fn macvae_conjugate(spec: &ExperimentSpec, seed: u64) -> Result<SeedOutput> {
    let Experiment::MacvaeSynthetic { methods, epochs, learn_theta, theta_learning_rate, linear_decay, eval_samples, elbo_samples, .. } = &spec.experiment
    else {
        unreachable!()
    };
    let cg = ConjugateGaussian::example();
    let mut model = cg.model()?;
    let data = Mat::from_rows(&[[0.5, -1.0, 0.8], [-0.3, 0.4, 0.0], [1.2, 0.3, -0.9], [0.0, 0.0, 0.0]]);
    let (dx, dz) = (cg.data_dim(), cg.latent_dim());
    // start from the prior: noise passed straight through
    let mut w = vec![0.0; (dx + dz) * dz];
    for j in 0..dz {
        w[(dx + j) * dz + j] = 1.0;
    }
    let params = ParamMap::new().with("weight", &[dx + dz, dz], w)?.with("bias", &[dz], vec![0.0; dz])?;
    let mut gen = ImplicitGenerator::new(Arc::new(Linear { input: dx + dz, output: dz }), params, dx, true)?;
    let mut config = distill(spec).clone();
    config.distance = methods[0];
    let options = MacVaeOptions {
        epochs: *epochs,
        learn_theta: *learn_theta,
        theta_learning_rate: *theta_learning_rate,
        elbo_samples: 0,
        linear_decay: *linear_decay,
    };
    let log = train_macvae(&mut model, &mut gen, &data, flow(spec), &config, &options, seed)?;

    let mut table = Table::new(&[
        "observation", "mean0", "mean1", "analytic_mean0", "analytic_mean1", "var0", "var1", "analytic_var0", "analytic_var1",
        "elbo", "elbo_se", "log_marginal", "z",
    ]);
    let (mut worst_mean, mut worst_z) = (0.0f64, 0.0f64);
    for (i, x) in data.iter_rows().enumerate() {
        let post = cg.posterior(x)?;
        let c = gen.sample(x, &mut stream(seed, tags::EVALUATION, i as u64), *eval_samples)?;
        let m = empirical_moments(c.samples())?;
        let e = elbo_estimate(&model, &gen, x, *elbo_samples, &mut stream(seed, tags::EVALUATION, 100 + i as u64))?;
        let lm = cg.log_marginal(x)?;
        let z = (lm - e.value) / e.std_error;
        for j in 0..dz {
            worst_mean = worst_mean.max((m.mean[j] - post.mean[j]).abs());
        }
        worst_z = worst_z.max(z.abs());
        table.row([
            i.to_string(),
            num(m.mean[0]),
            num(m.mean[1]),
            num(post.mean[0]),
            num(post.mean[1]),
            num(m.covariance[(0, 0)]),
            num(m.covariance[(1, 1)]),
            num(post.covariance[(0, 0)]),
            num(post.covariance[(1, 1)]),
            num(e.value),
            num(e.std_error),
            num(lm),
            num(z),
        ]);
    }
    let name = method_name(methods[0]);
    let mut epochs_table = Table::new(&["epoch", "distill_distance", "path_log_joint"]);
    for e in &log {
        epochs_table.row([e.epoch.to_string(), num(e.distill_distance), num(e.path_log_joint)]);
    }
    Ok(SeedOutput {
        artifacts: vec![
            table.finish("posterior.csv", vec![]),
            epochs_table.finish(format!("epochs_{name}.csv"), vec![PlotMap::new("macvae_training", name, "epoch", "distill_distance")]),
            latent_table(&gen, &data, *eval_samples, seed)?
                .finish(format!("latents_{name}.csv"), vec![PlotMap::new("macvae_latents", name, "z0", "z1").grouped("observation")]),
        ],
        summary: json!({ "max_mean_error": worst_mean, "max_abs_elbo_z": worst_z }),
    })
}

fn macgan_mixture(spec: &ExperimentSpec, target: &EnergyModel, seed: u64) -> Result<SeedOutput> {
    let Experiment::MacganMixture {
        epochs,
        theta_learning_rate,
        schedule,
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
    } = &spec.experiment
    else {
        unreachable!()
    };
    let d = target.dim();
    let exact = |index, n| target.sample_exact(&mut stream(seed, tags::REFERENCE, index), n).expect("validated: exact sampler");
    let data = exact(0, *data_points);
    let heldout = exact(1, *heldout_points);

    let mut dims = vec![d];
    dims.extend(energy_hidden);
    dims.push(1);
    let mlp = Mlp::new(&dims, Activation::Tanh);
    let ep = mlp.init(&mut stream(seed, tags::PARAM_INIT, 0));
    let mut energy = EnergyNet::new(Arc::new(Confined { inner: mlp, strength: *confinement }), ep, Regularizer::WeightClip(*clip))?;
    let net = Coupling::new(0, d, *generator_hidden, *coupling_layers);
    let gp = net.init(&mut stream(seed, tags::PARAM_INIT, 1));
    let mut gen = ImplicitGenerator::new(Arc::new(net), gp, 0, true)?;
    let options = MacGanOptions {
        epochs: *epochs,
        theta_learning_rate: *theta_learning_rate,
        schedule: *schedule,
        data_batch: 0,
        bound_every: *bound_every,
        bound_samples: *bound_samples,
    };
    let log = train_macgan(&mut energy, &mut gen, &data, flow(spec), distill(spec), &options, seed)?;
    let last = gen.sample(&[], &mut stream(seed, tags::EVALUATION, 0), *eval_samples)?;

    let mut epochs_csv = Vec::new();
    write_epoch_csv(&log, &mut epochs_csv)?;
    let mut bounds = Table::new(&["epoch", "lhs", "lhs_se", "rhs", "rhs_se", "gap", "gap_se", "log_z", "log_z_se"]);
    let (mut min_gap, mut min_gap_margin) = (f64::INFINITY, f64::INFINITY);
    for e in &log {
        if let Some(b) = &e.bound {
            bounds.row([e.epoch.to_string(), num(b.lhs), num(b.lhs_se), num(b.rhs), num(b.rhs_se), num(b.gap), num(b.gap_se), num(b.log_z), num(b.log_z_se)]);
            min_gap = min_gap.min(b.gap);
            min_gap_margin = min_gap_margin.min(b.gap + 3.0 * b.gap_se);
        }
    }
    let checks = log.iter().filter(|e| e.bound.is_some()).count();
    let right = last.samples().iter_rows().filter(|r| r[0] > 0.0).count() as f64 / last.len() as f64;
    let max_theta = log.iter().map(|e| e.max_abs_theta).fold(0.0, f64::max);
    let lr_schedule = match schedule {
        LrSchedule::Constant => "constant",
        LrSchedule::Paper => "paper",
    };
    Ok(SeedOutput {
        artifacts: vec![
            crate::artifact::Artifact {
                name: "epochs.csv".into(),
                bytes: epochs_csv,
                plots: vec![
                    PlotMap::new("macgan_training", "w1_diag", "epoch", "w1_diag"),
                    PlotMap::new("macgan_training", "e_data_u", "epoch", "e_data_u"),
                    PlotMap::new("macgan_training", "e_gen_u", "epoch", "e_gen_u"),
                ],
            },
            bounds.finish("bounds.csv", vec![PlotMap::new("macgan_bound", "gap", "epoch", "gap")]),
            points_table(last.samples()).finish("samples.csv", vec![PlotMap::new("macgan_scatter", "generator", "z0", "z1")]),
            points_table(&heldout).finish("heldout.csv", vec![PlotMap::new("macgan_scatter", "heldout", "z0", "z1")]),
        ],
        summary: json!({
            "w1_heldout": wasserstein_exact(last.samples(), &heldout, 1)?,
            "right_fraction": right,
            "min_mode_fraction": right.min(1.0 - right),
            "bound_checks": checks,
            "min_gap": if checks > 0 { Some(min_gap) } else { None },
            "min_gap_plus_3se": if checks > 0 { Some(min_gap_margin) } else { None },
            "max_abs_theta": max_theta,
            "clip": clip,
            "schedule": lr_schedule,
        }),
    })
}

fn h_sweep(target: &EnergyModel, grid: &[f64], total_time: f64, n: usize, init: &InitialGaussian, mse_reps: usize, seed: u64) -> Result<SeedOutput> {
    let start = init.sample(seed, n)?;
    let reference = target
        .sample_exact(&mut stream(seed, tags::REFERENCE, 0), n)
        .ok_or_else(|| Error::Config(format!("target `{}` has no exact sampler", target.name())))?;
    let rows = grid
        .par_iter()
        .map(|&h| {
            let k = ((total_time / h).round() as usize).max(1);
            let config = FlowConfig::new(h, k);
            let last = simulate_final(&start, target, &config, seed)?;
            let w1 = wasserstein_exact(last.samples(), &reference, 1)?;
            let mse = if target.has_ou_oracle() && mse_reps > 0 {
                Some(mse_estimate(target, TestFunction::Coordinate(0), &config, init, mse_reps, seed)?)
            } else {
                None
            };
            Ok((h, k, w1, mse))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut table = Table::new(&["h", "steps", "total_time", "w1", "mse", "mse_std_error"]);
    for (h, k, w1, mse) in &rows {
        table.row([num(*h), k.to_string(), num(*k as f64 * h), num(*w1), opt(mse.as_ref().map(|m| m.mse)), opt(mse.as_ref().map(|m| m.std_error))]);
    }
    let w1: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let (lo, hi) = w1.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), w| (lo.min(*w), hi.max(*w)));
    Ok(SeedOutput {
        artifacts: vec![table.finish("sweep.csv", vec![PlotMap::new("h_sweep", "w1", "h", "w1")])],
        summary: json!({ "h": grid, "w1": w1, "max_over_min": hi / lo }),
    })
}

fn bound_check(target: &EnergyModel, scales: &[f64], m: usize, n: usize, seed: u64) -> Result<SeedOutput> {
    let d = target.dim();
    let data = target
        .sample_exact(&mut stream(seed, tags::REFERENCE, 0), n)
        .ok_or_else(|| Error::Config(format!("target `{}` has no exact sampler", target.name())))?;
    let energy = EnergyNet::new(target.function_handle(), target.params().clone(), Regularizer::None)?;
    let center = data.column_means();
    let rows = scales
        .par_iter()
        .enumerate()
        .map(|(i, &s)| {
            let mut w = vec![0.0; d * d];
            for j in 0..d {
                w[j * d + j] = s;
            }
            let params = ParamMap::new().with("weight", &[d, d], w)?.with("bias", &[d], center.clone())?;
            let gen = ImplicitGenerator::new(Arc::new(Linear { input: d, output: d }), params, 0, true)?;
            Ok((s, ctflow::macgan::mle_bound_check(&energy, &gen, &data, m, &mut stream(seed, tags::EVALUATION, i as u64))?))
        })
        .collect::<Result<Vec<_>>>()?;
    let exact = target.log_normalizer();
    let mut table = Table::new(&["scale", "lhs", "lhs_se", "rhs", "rhs_se", "gap", "gap_se", "log_z", "log_z_se", "exact_log_z"]);
    for (s, b) in &rows {
        table.row([num(*s), num(b.lhs), num(b.lhs_se), num(b.rhs), num(b.rhs_se), num(b.gap), num(b.gap_se), num(b.log_z), num(b.log_z_se), opt(exact)]);
    }
    let min_gap = rows.iter().map(|r| r.1.gap).fold(f64::INFINITY, f64::min);
    let min_margin = rows.iter().map(|r| r.1.gap + 3.0 * r.1.gap_se).fold(f64::INFINITY, f64::min);
    Ok(SeedOutput {
        artifacts: vec![table.finish(
            "bound.csv",
            vec![PlotMap::new("bound_check", "gap", "scale", "gap"), PlotMap::new("bound_check", "log_z", "scale", "log_z")],
        )],
        summary: json!({ "min_gap": min_gap, "min_gap_plus_3se": min_margin, "exact_log_z": exact }),
    })
}
