//! A fast property suite covering the numerical core, runnable from the
//! installed binary.

use std::sync::Arc;

use ctflow::amortize::{ImplicitGenerator, Regularizer};
use ctflow::catalog::gradient_audit;
use ctflow::flow::{simulate_final, FlowConfig};
use ctflow::macgan::{mle_bound_check, EnergyNet};
use ctflow::metrics::{cost_matrix, transport_plan, w2_gaussian, wasserstein_exact, InitialGaussian};
use ctflow::numerics::nets::Linear;
use ctflow::numerics::{Mat, ParamMap, RandomStream};
use ctflow::targets::{ou_analytic_moments, standard_normal, GaussianMoments};

pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, result: ctflow::Result<(bool, String)>) -> Check {
    match result {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check { name, passed: false, detail: format!("error: {e}") },
    }
}

/// Minimum of `Σ cost[i, σ(i)]` over every permutation (Heap's algorithm).
pub fn brute_force_assignment(cost: &Mat) -> f64 {
    let n = cost.rows();
    let mut perm: Vec<usize> = (0..n).collect();
    let total = |p: &[usize]| (0..n).map(|i| cost[(i, p[i])]).sum::<f64>();
    let mut best = total(&perm);
    let mut c = vec![0; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(total(&perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

fn ulps(a: f64, b: f64) -> u64 {
    (a.to_bits() as i64 - b.to_bits() as i64).unsigned_abs()
}

fn gradients() -> ctflow::Result<(bool, String)> {
    let audit = gradient_audit(11, 10, 1e-6)?;
    let worst = audit.iter().max_by(|a, b| a.worst.total_cmp(&b.worst)).expect("catalog is non-empty");
    Ok((worst.worst <= 1e-5, format!("{} functions, worst {:.2e} ({})", audit.len(), worst.worst, worst.name)))
}

fn transport() -> ctflow::Result<(bool, String)> {
    let mut s = RandomStream::new(4, 0);
    let mut worst = 0;
    let mut ordered = true;
    for trial in 0..60 {
        let n = 1 + trial % 6;
        let d = 1 + trial % 3;
        let (a, b) = (s.gaussian_mat(n, d), s.gaussian_mat(n, d));
        for order in [1, 2] {
            let exact = brute_force_assignment(&cost_matrix(&a, &b, order)) / n as f64;
            let got = transport_plan(&a, &b, order)?.cost;
            worst = worst.max(ulps(exact, got));
        }
        ordered &= wasserstein_exact(&a, &b, 1)? <= wasserstein_exact(&a, &b, 2)? * (1.0 + 1e-12);
    }
    Ok((worst <= 4 && ordered, format!("60 pairs, worst {worst} ulps, W1 <= W2: {ordered}")))
}

fn ou_moments() -> ctflow::Result<(bool, String)> {
    let target = standard_normal(1);
    let init = InitialGaussian { mean: vec![3.0], variance: 4.0 }.sample(1, 4000)?;
    let last = simulate_final(&init, &target, &FlowConfig::new(1e-2, 200), 1)?;
    let m = ctflow::metrics::empirical_moments(last.samples())?;
    let exact = ou_analytic_moments(3.0, 4.0, 2.0)?;
    let (dm, dv) = (m.mean[0] - exact.mean[0], m.covariance[(0, 0)] - exact.variance(0));
    Ok((dm.abs() < 0.1 && dv.abs() < 0.2, format!("mean off by {dm:.4}, variance off by {dv:.4}")))
}

fn lemma_curve() -> ctflow::Result<(bool, String)> {
    let reference = GaussianMoments::scalar(0.0, 1.0)?;
    let w0 = w2_gaussian(&GaussianMoments::scalar(2.0, 1.0)?, &reference)?;
    let mut worst = 0.0f64;
    for t in [0.0, 0.5, 1.0, 2.0, 4.0] {
        let w = w2_gaussian(&ou_analytic_moments(2.0, 1.0, t)?, &reference)?;
        worst = worst.max(((-t / 2.0f64).exp() * w0 - w).abs() / w);
    }
    Ok((worst < 1e-10, format!("worst relative error {worst:.1e}")))
}

fn jensen_bound() -> ctflow::Result<(bool, String)> {
    let target = standard_normal(2);
    let energy = EnergyNet::new(target.function_handle(), target.params().clone(), Regularizer::None)?;
    let data = target.sample_exact(&mut RandomStream::new(2, 0), 500).expect("gaussian sampler");
    let mut worst = f64::INFINITY;
    for scale in [0.5, 1.0, 2.0] {
        let params = ParamMap::new().with("weight", &[2, 2], vec![scale, 0.0, 0.0, scale])?.with("bias", &[2], vec![0.0, 0.0])?;
        let gen = ImplicitGenerator::new(Arc::new(Linear { input: 2, output: 2 }), params, 0, true)?;
        let b = mle_bound_check(&energy, &gen, &data, 2000, &mut RandomStream::new(2, 1))?;
        worst = worst.min(b.gap);
    }
    // a matched generator gives a gap of zero up to rounding
    Ok((worst >= -1e-12, format!("smallest gap {worst:.2e}")))
}

fn determinism() -> ctflow::Result<(bool, String)> {
    let target = ctflow::targets::two_gaussians();
    let init = InitialGaussian { mean: vec![0.0, 0.0], variance: 1.0 }.sample(3, 300)?;
    let run = |threads| -> ctflow::Result<Vec<u64>> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().expect("thread pool");
        let last = pool.install(|| simulate_final(&init, &target, &FlowConfig::new(0.05, 50), 3))?;
        Ok(last.samples().as_slice().iter().map(|v| v.to_bits()).collect())
    };
    let (a, b) = (run(1)?, run(3)?);
    Ok((a == b, "flow bits equal under 1 and 3 workers".into()))
}

pub fn run_all() -> Vec<Check> {
    vec![
        check("gradients", gradients()),
        check("transport", transport()),
        check("ou_moments", ou_moments()),
        check("lemma_curve", lemma_curve()),
        check("jensen_bound", jensen_bound()),
        check("determinism", determinism()),
    ]
}
