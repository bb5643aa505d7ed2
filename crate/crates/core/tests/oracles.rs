use ctflow::flow::{simulate_final, FlowConfig, ParticleCloud};
use ctflow::metrics::{empirical_moments, log_log_slope, mse_estimate, w2_gaussian, InitialGaussian, TestFunction};
use ctflow::numerics::RandomStream;
use ctflow::targets::{ou_analytic_moments, standard_normal, GaussianMoments};

/// Exact MSE of the path average `(1/K) Σ_{k=1..K} z_k` of the discretized
/// OU chain `z_k = a z_{k−1} + √h ξ_k`, `a = 1 − h/2`, against the
/// continuous-time mean `m₀ e^{−T/2}`.
fn discrete_ou_mse(h: f64, k: usize, m0: f64, v0: f64) -> f64 {
    let a: f64 = 1.0 - h / 2.0;
    let kf = k as f64;
    let (mut mean_sum, mut var_sum) = (0.0, 0.0);
    for j in 1..=k {
        let a2j = a.powi(2 * j as i32);
        let vj = a2j * v0 + h * (1.0 - a2j) / (1.0 - a * a);
        mean_sum += a.powi(j as i32) * m0;
        // v_j times (1 + 2 Σ_{m=1}^{K−j} a^m)
        let tail = a * (1.0 - a.powi((k - j) as i32)) / (1.0 - a);
        var_sum += vj * (1.0 + 2.0 * tail);
    }
    let bias = mean_sum / kf - m0 * (-h * kf / 2.0).exp();
    bias * bias + var_sum / (kf * kf)
}

#[test]
fn oracle_matches_brute_force_covariance_sum() {
    let (h, k, m0, v0) = (0.3, 12, 1.5, 2.0);
    let a: f64 = 1.0 - h / 2.0;
    let v = |j: usize| a.powi(2 * j as i32) * v0 + h * (1.0 - a.powi(2 * j as i32)) / (1.0 - a * a);
    let mut var = 0.0;
    let mut mean = 0.0;
    for j in 1..=k {
        mean += a.powi(j as i32) * m0;
        for l in 1..=k {
            var += a.powi((j as i32 - l as i32).abs()) * v(j.min(l));
        }
    }
    let kf = k as f64;
    let want = (mean / kf - m0 * (-h * kf / 2.0).exp()).powi(2) + var / (kf * kf);
    assert!((discrete_ou_mse(h, k, m0, v0) - want).abs() < 1e-14);
}

#[test]
fn mse_estimate_agrees_with_exact_oracle() {
    let t = standard_normal(1);
    for (h, k, m0, v0) in [(0.1, 50, 3.0, 4.0), (0.05, 200, 0.0, 0.0)] {
        let est = mse_estimate(&t, TestFunction::Coordinate(0), &FlowConfig::new(h, k), &InitialGaussian { mean: vec![m0], variance: v0 }, 4000, 9).unwrap();
        let exact = discrete_ou_mse(h, k, m0, v0);
        assert!((est.mse - exact).abs() < 4.0 * est.std_error, "h={h} K={k}: {} vs {exact} (se {})", est.mse, est.std_error);
    }
}

#[test]
fn oracle_rate_along_shrinking_steps() {
    let ks = [100.0, 400.0, 1600.0, 6400.0];
    let mse: Vec<f64> = ks.iter().map(|&k: &f64| discrete_ou_mse(k.powf(-1.0 / 3.0), k as usize, 0.0, 0.0)).collect();
    let slope = log_log_slope(&ks, &mse);
    assert!((-1.0..=-0.4).contains(&slope), "{slope}");
    // the longer chain wins from a biased start
    assert!((discrete_ou_mse(1e-2, 100, 3.0, 4.0) - 2.98).abs() < 0.01);
    assert!((discrete_ou_mse(1e-2, 1600, 3.0, 4.0) - 0.40).abs() < 0.01);
}

#[test]
fn flow_tracks_ou_moments() {
    let t = standard_normal(1);
    let start = ParticleCloud::gaussian(&[3.0], &[2.0], 4000, &mut RandomStream::new(1, 1)).unwrap();
    let cloud = simulate_final(&start, &t, &FlowConfig::new(1e-2, 100), 2).unwrap();
    let m = empirical_moments(cloud.samples()).unwrap();
    let want = ou_analytic_moments(3.0, 4.0, 1.0).unwrap();
    assert!((m.mean[0] - want.mean[0]).abs() < 0.1);
    assert!((m.covariance[(0, 0)] - want.variance(0)).abs() < 0.2);
}

#[test]
fn w2_decay_curve() {
    let target = GaussianMoments::scalar(0.0, 1.0).unwrap();
    let w0 = w2_gaussian(&ou_analytic_moments(3.0, 1.0, 0.0).unwrap(), &target).unwrap();
    for t in [0.0, 0.5, 1.0, 2.0, 4.0] {
        let wt = w2_gaussian(&ou_analytic_moments(3.0, 1.0, t).unwrap(), &target).unwrap();
        let lemma = (-t / 2.0f64).exp() * w0;
        assert!(((wt - lemma) / lemma).abs() < 1e-10, "t={t}");
    }
    // with σ₀ ≠ 1 the exponential curve only bounds the true distance
    let w0 = w2_gaussian(&ou_analytic_moments(3.0, 4.0, 0.0).unwrap(), &target).unwrap();
    for t in [0.5, 1.0, 2.0, 4.0] {
        let wt = w2_gaussian(&ou_analytic_moments(3.0, 4.0, t).unwrap(), &target).unwrap();
        let lemma = (-t / 2.0f64).exp() * w0;
        assert!(wt < lemma && (wt - lemma).abs() / lemma > 1e-4, "t={t}");
    }
}
