use ctflow::catalog::gradient_audit;
use ctflow::numerics::nets::{Activation, Mlp};
use ctflow::numerics::{check_gradient, evaluate, gradient, DiffFn, ParamMap};

fn small_mlp() -> (Mlp, ParamMap) {
    let mlp = Mlp::new(&[2, 2, 1], Activation::Tanh);
    let p = ParamMap::new()
        .with("layer0.weight", &[2, 2], vec![0.5, -0.3, 0.8, 0.2])
        .unwrap()
        .with("layer0.bias", &[2], vec![0.1, -0.1])
        .unwrap()
        .with("layer1.weight", &[2, 1], vec![1.5, -0.7])
        .unwrap()
        .with("layer1.bias", &[1], vec![0.2])
        .unwrap();
    (mlp, p)
}

#[test]
fn two_layer_tanh_matches_hand_values() {
    let (mlp, p) = small_mlp();
    let x = [0.3, 0.7];
    // frozen from a hand evaluation in double precision
    let y = evaluate(&mlp, &p, &x).unwrap()[0];
    assert!((y - 1.239356251898672).abs() < 1e-14);
    let g = gradient(&mlp, &p, &x).unwrap();
    assert!((g.input[0] - 0.6232125369297796).abs() < 1e-14);
    assert!((g.input[1] - 0.5223280785603811).abs() < 1e-14);
    let w0 = &g.params.get("layer0.weight").unwrap().values;
    let want = [0.2482419979006502, -0.20947587376202922, 0.5792313284348505, -0.4887770387780682];
    for (a, b) in w0.iter().zip(want) {
        assert!((a - b).abs() < 1e-14);
    }
    assert!((g.params.get("layer1.bias").unwrap().values[0] - 1.0).abs() < 1e-15);
}

#[test]
fn two_layer_tanh_against_independent_formula() {
    let (mlp, p) = small_mlp();
    let w0: [[f64; 2]; 2] = [[0.5, -0.3], [0.8, 0.2]];
    let (b0, w1, b1): ([f64; 2], [f64; 2], f64) = ([0.1, -0.1], [1.5, -0.7], 0.2);
    for x in [[0.3f64, 0.7], [-1.2, 0.4], [2.0, -2.5]] {
        let h: Vec<f64> = (0..2).map(|j| (x[0] * w0[0][j] + x[1] * w0[1][j] + b0[j]).tanh()).collect();
        let y = h[0] * w1[0] + h[1] * w1[1] + b1;
        let d: Vec<f64> = (0..2).map(|j| w1[j] * (1.0 - h[j] * h[j])).collect();
        let g = gradient(&mlp, &p, &x).unwrap();
        assert!((g.value - y).abs() < 1e-14);
        for i in 0..2 {
            let dx: f64 = (0..2).map(|j| w0[i][j] * d[j]).sum();
            assert!((g.input[i] - dx).abs() < 1e-14);
        }
        assert!(check_gradient(&mlp, &p, &x, 1e-6).unwrap() < 1e-7);
    }
    assert_eq!(mlp.output_dim(), 1);
}

#[test]
fn every_shipped_function_passes_gradient_check() {
    let audit = gradient_audit(11, 10, 1e-6).unwrap();
    assert!(audit.len() >= 20);
    for a in &audit {
        assert!(a.worst <= 1e-5, "{}: {:e}", a.name, a.worst);
    }
}
