use std::sync::Arc;

use ctflow::amortize::{DistanceKind, DistillConfig, ImplicitGenerator, Regularizer};
use ctflow::flow::FlowConfig;
use ctflow::macgan::{log_partition_estimate, mle_bound_check, mle_gradient, train_macgan, EnergyNet, MacGanOptions};
use ctflow::numerics::nets::{Activation, Confined, Constant, Coupling, Identity, Linear, Mlp};
use ctflow::numerics::{DiffFn, Mat, ParamMap, RandomStream};
use ctflow::targets::two_gaussians;

fn mlp_energy(seed: u64, reg: Regularizer) -> EnergyNet {
    let mlp = Mlp::new(&[2, 8, 8, 1], Activation::Tanh);
    let p = mlp.init(&mut RandomStream::new(seed, 1));
    EnergyNet::new(Arc::new(Confined { inner: mlp, strength: 0.1 }), p, reg).unwrap()
}

fn gaussian_energy(dim: usize) -> EnergyNet {
    EnergyNet::new(Arc::new(Confined { inner: Constant { dim, value: 0.0 }, strength: 0.5 }), ParamMap::new(), Regularizer::None).unwrap()
}

fn scaled_gen(scale: f64, shift: f64) -> ImplicitGenerator {
    let p = ParamMap::new()
        .with("weight", &[2, 2], vec![scale, 0.0, 0.0, scale])
        .unwrap()
        .with("bias", &[2], vec![shift, 0.0])
        .unwrap();
    ImplicitGenerator::new(Arc::new(Linear { input: 2, output: 2 }), p, 0, true).unwrap()
}

fn coupling_gen(seed: u64) -> ImplicitGenerator {
    let c = Coupling::new(0, 2, 8, 2);
    let mut p = c.init(&mut RandomStream::new(seed, 2));
    let mut s = RandomStream::new(seed, 3);
    p.iter_values_mut().for_each(|v| *v += 0.2 * s.gaussian());
    ImplicitGenerator::new(Arc::new(c), p, 0, true).unwrap()
}

#[test]
fn mle_gradient_matches_finite_differences() {
    let e = mlp_energy(4, Regularizer::None);
    let mut s = RandomStream::new(4, 9);
    let (data, model) = (s.gaussian_mat(16, 2), s.gaussian_mat(12, 2));
    let (_, grad) = mle_gradient(&e, &data, &model).unwrap();
    let objective = |p: &ParamMap| {
        let mut probe = e.clone();
        probe.params = p.clone();
        let ud = probe.energy(&data).unwrap();
        let um = probe.energy(&model).unwrap();
        ud.iter().sum::<f64>() / ud.len() as f64 - um.iter().sum::<f64>() / um.len() as f64
    };
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    let mut probe = e.params.clone();
    for (ei, entry) in e.params.entries().iter().enumerate() {
        for k in 0..entry.values.len() {
            let x = entry.values[k];
            probe.entries_mut()[ei].values[k] = x + eps;
            let up = objective(&probe);
            probe.entries_mut()[ei].values[k] = x - eps;
            let down = objective(&probe);
            probe.entries_mut()[ei].values[k] = x;
            let fd = (up - down) / (2.0 * eps);
            let ad = grad.entries()[ei].values[k];
            worst = worst.max((ad - fd).abs() / (fd.abs() + eps.sqrt()));
        }
    }
    assert!(worst < 1e-5, "{worst:e}");
}

#[test]
fn jensen_bound_holds_over_grid() {
    let mix = two_gaussians();
    let datasets = [
        mix.sample_exact(&mut RandomStream::new(1, 1), 64).unwrap(),
        Mat::from_rows(&[[0.0, 0.0]]),
        RandomStream::new(1, 2).gaussian_mat(32, 2),
    ];
    let energies = [gaussian_energy(2), mlp_energy(5, Regularizer::None), mlp_energy(6, Regularizer::WeightClip(0.5))];
    let gens = [scaled_gen(0.5, 0.0), scaled_gen(1.0, 0.0), scaled_gen(2.0, 1.0), coupling_gen(7)];
    let mut s = RandomStream::new(8, 8);
    for e in &energies {
        for g in &gens {
            for d in &datasets {
                let r = mle_bound_check(e, g, d, 500, &mut s).unwrap();
                assert!(r.gap >= -3.0 * r.gap_se, "{r:?}");
                assert!(r.lhs_se >= 0.0 && r.rhs_se >= 0.0 && r.gap_se >= 0.0);
                assert!([r.lhs, r.rhs, r.log_z, r.e_gen_log_q].iter().all(|v| v.is_finite()));
            }
        }
    }
}

#[test]
fn mismatched_width_gap_is_the_kl() {
    // KL(N(0, 4I) ‖ N(0, I)) in 2-D = 2 · ½(4 − 1 − ln 4)
    let kl = 3.0 - 4f64.ln();
    let r = mle_bound_check(&gaussian_energy(2), &scaled_gen(2.0, 0.0), &Mat::from_rows(&[[0.0, 0.0]]), 20000, &mut RandomStream::new(3, 3)).unwrap();
    assert!(r.gap > 3.0 * r.gap_se);
    // the importance estimate of ln Z is itself noisy for this wide proposal
    assert!((r.gap - kl).abs() < 0.25, "{r:?}");
}

#[test]
fn log_partition_diagnostics() {
    let gen = ImplicitGenerator::new(Arc::new(Identity { dim: 2 }), ParamMap::new(), 0, true).unwrap();
    let lz = log_partition_estimate(&gaussian_energy(2), &gen, 1000, &mut RandomStream::new(1, 1)).unwrap();
    assert!((lz.value - std::f64::consts::TAU.ln()).abs() < 1e-12);
    // U ≡ 0 is not integrable: the weights have infinite variance, so √M·se
    // grows with M instead of settling
    let flat = EnergyNet::new(Arc::new(Constant { dim: 1, value: 0.0 }), ParamMap::new(), Regularizer::None).unwrap();
    let g1 = ImplicitGenerator::new(Arc::new(Identity { dim: 1 }), ParamMap::new(), 0, true).unwrap();
    let small = log_partition_estimate(&flat, &g1, 100, &mut RandomStream::new(2, 2)).unwrap();
    let big = log_partition_estimate(&flat, &g1, 100_000, &mut RandomStream::new(2, 3)).unwrap();
    let scaled = |l: &ctflow::macgan::LogPartition| l.std_error * (l.samples as f64).sqrt();
    assert!(scaled(&big) > 3.0 * scaled(&small), "{small:?} {big:?}");
    let wide = scaled_gen(1.5, 0.0);
    let a = log_partition_estimate(&gaussian_energy(2), &wide, 100, &mut RandomStream::new(2, 4)).unwrap();
    let b = log_partition_estimate(&gaussian_energy(2), &wide, 100_000, &mut RandomStream::new(2, 5)).unwrap();
    assert!(scaled(&b) < 2.0 * scaled(&a), "{a:?} {b:?}");
    assert!(log_partition_estimate(&flat, &g1, 1, &mut RandomStream::new(2, 2)).is_err());
}

#[test]
fn flow_free_training_ascends_the_surrogate() {
    let mix = two_gaussians();
    let data = mix.sample_exact(&mut RandomStream::new(2, 1), 256).unwrap();
    let mut e = mlp_energy(9, Regularizer::WeightClip(1.0));
    let mut g = coupling_gen(3);
    let before = g.params.clone();
    let mut opts = MacGanOptions::new(60);
    opts.theta_learning_rate = 1e-2;
    let dc = DistillConfig::new(DistanceKind::ExactOt, 1e-3, 128, 1);
    let log = train_macgan(&mut e, &mut g, &data, &FlowConfig::new(0.05, 0), &dc, &opts, 1).unwrap();
    assert_eq!(g.params, before);
    let gap = |r: &[ctflow::macgan::MacGanEpoch]| r.iter().map(|x| x.e_data_u - x.e_gen_u).sum::<f64>() / r.len() as f64;
    assert!(gap(&log[50..]) > gap(&log[..10]) + 0.1);
    assert!(log.iter().all(|x| x.max_abs_theta <= 1.0 && x.distill_distance.is_nan()));
}

#[test]
fn training_is_deterministic_and_clipped() {
    let mix = two_gaussians();
    let data = mix.sample_exact(&mut RandomStream::new(2, 1), 128).unwrap();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let mut e = mlp_energy(9, Regularizer::WeightClip(0.3));
            let mut g = coupling_gen(3);
            let mut opts = MacGanOptions::new(8);
            opts.theta_learning_rate = 1e-2;
            opts.bound_every = 4;
            opts.bound_samples = 64;
            let dc = DistillConfig::new(DistanceKind::ExactOt, 1e-3, 64, 1);
            let log = train_macgan(&mut e, &mut g, &data, &FlowConfig::new(0.05, 3), &dc, &opts, 5).unwrap();
            (log, e.params, g.params)
        })
    };
    let (a, b) = (run(1), run(3));
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
    assert!(a.0.iter().all(|x| x.max_abs_theta <= 0.3));
    assert_eq!(a.0.iter().filter(|x| x.bound.is_some()).count(), 2);
    assert_eq!(Confined { inner: Constant { dim: 2, value: 0.0 }, strength: 0.5 }.output_dim(), 1);
}
