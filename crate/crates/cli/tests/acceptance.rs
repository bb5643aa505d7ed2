//! The ten acceptance criteria, one PASS/FAIL line each. Run with
//! `cargo test -p ctflow-cli --test acceptance -- --nocapture` to see them.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use ctflow::catalog::gradient_audit;
use ctflow::metrics::{cost_matrix, transport_plan, wasserstein_exact};
use ctflow::numerics::RandomStream;
use ctflow_cli::selftest::brute_force_assignment;
use ctflow_cli::{run, ExperimentSpec, Manifest};
use serde_json::Value;

/// Pre-build reference thresholds.
const PROP1_W1_THRESHOLD: f64 = 0.75;
const MACGAN_W1_THRESHOLD: f64 = 0.5;

fn experiments() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../experiments")
}

fn run_in(name: &str, out: &Path) -> Manifest {
    let mut spec = ExperimentSpec::load(&experiments().join(name)).unwrap();
    spec.output = out.join(name.replace('/', "_").trim_end_matches(".toml"));
    run(&spec).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn first(m: &Manifest) -> &Value {
    &m.summaries[0].summary
}

fn f(v: &Value, path: &[&str]) -> f64 {
    path.iter().fold(v, |v, k| &v[*k]).as_f64().unwrap_or(f64::NAN)
}

struct Report {
    lines: Vec<(usize, bool, String)>,
}

impl Report {
    fn record(&mut self, n: usize, passed: bool, limit: Duration, took: Duration, detail: String) {
        let ok = passed && took <= limit;
        let line = format!("criterion {n:>2}: {}  {detail} [{:.1}s, limit {}s]", if ok { "PASS" } else { "FAIL" }, took.as_secs_f64(), limit.as_secs());
        println!("{line}");
        self.lines.push((n, ok, line));
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed())
}

fn ulps(a: f64, b: f64) -> u64 {
    (a.to_bits() as i64 - b.to_bits() as i64).unsigned_abs()
}

#[test]
fn acceptance() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let mut r = Report { lines: Vec::new() };
    let secs = Duration::from_secs;

    let (m, t) = timed(|| run_in("flow_oracle.toml", out));
    let s = first(&m);
    let (dm, dv) = (f(s, &["mean_error"]), f(s, &["variance_error"]));
    r.record(1, dm.abs() <= 0.05 && dv.abs() <= 0.10, secs(30), t, format!("mean error {dm:+.4}, variance error {dv:+.4}"));

    let (m, t) = timed(|| run_in("mse_rate.toml", out));
    let slope = f(first(&m), &["slope"]);
    r.record(2, (-1.0..=-0.4).contains(&slope), secs(300), t, format!("log-log slope {slope:.3}"));

    let (m, t) = timed(|| run_in("w2_decay.toml", out));
    let (rel, z) = (f(first(&m), &["max_lemma_rel_err"]), f(first(&m), &["max_abs_z"]));
    r.record(3, rel < 1e-10 && z <= 3.0, secs(60), t, format!("curve rel. err {rel:.1e}, empirical max |z| {z:.2}"));

    let ((worst, ordered), t) = timed(|| {
        let mut s = RandomStream::new(2024, 0);
        let (mut worst, mut ordered) = (0, true);
        for trial in 0..100 {
            let n = 1 + trial % 6;
            let d = 1 + trial % 3;
            let (a, b) = (s.gaussian_mat(n, d), s.gaussian_mat(n, d));
            for order in [1, 2] {
                let exact = brute_force_assignment(&cost_matrix(&a, &b, order)) / n as f64;
                worst = worst.max(ulps(exact, transport_plan(&a, &b, order).unwrap().cost));
            }
            ordered &= wasserstein_exact(&a, &b, 1).unwrap() <= wasserstein_exact(&a, &b, 2).unwrap();
        }
        (worst, ordered)
    });
    r.record(4, worst <= 4 && ordered, secs(10), t, format!("100 pairs, worst {worst} ulps from enumeration, W1 <= W2 on all: {ordered}"));

    let (audit, t) = timed(|| gradient_audit(11, 10, 1e-6).unwrap());
    let worst = audit.iter().map(|a| a.worst).fold(0.0, f64::max);
    r.record(5, worst <= 1e-5, secs(30), t, format!("{} functions, worst relative error {worst:.2e}", audit.len()));

    let (m, t) = timed(|| run_in("prop1_collapse.toml", out));
    let s = first(&m);
    let ratio = f(s, &["spread_ratio"]);
    let w1 = f(s, &["methods", "exact_ot", "w1_reference"]);
    r.record(6, ratio < 0.2 && w1 < PROP1_W1_THRESHOLD, secs(180), t, format!("spread ratio {ratio:.3}, exact_ot W1 to reference {w1:.3} (< {PROP1_W1_THRESHOLD})"));

    let ((hot, conj), t) = timed(|| (run_in("macvae_one_hot.toml", out), run_in("macvae_conjugate.toml", out)));
    let ratio = f(first(&hot), &["variance_ratio"]);
    let (dmean, z) = (f(first(&conj), &["max_mean_error"]), f(first(&conj), &["max_abs_elbo_z"]));
    r.record(7, ratio >= 25.0 && dmean < 0.1 && z <= 3.0, secs(180), t, format!("variance ratio {ratio:.1}, posterior mean error {dmean:.3}, ELBO max |z| {z:.2}"));

    let (m, t) = timed(|| run_in("macgan_mixture.toml", out));
    let s = first(&m);
    let (w1, occ, margin, theta, clip) =
        (f(s, &["w1_heldout"]), f(s, &["min_mode_fraction"]), f(s, &["min_gap_plus_3se"]), f(s, &["max_abs_theta"]), f(s, &["clip"]));
    let checks = s["bound_checks"].as_u64().unwrap_or(0);
    r.record(
        8,
        w1 < MACGAN_W1_THRESHOLD && occ >= 0.25 && checks > 0 && margin >= 0.0 && theta <= clip,
        secs(300),
        t,
        format!("W1 {w1:.3} (< {MACGAN_W1_THRESHOLD}), smaller mode {occ:.3}, min gap+3se {margin:.3} over {checks} checks, max|θ| {theta:.3} <= {clip}"),
    );

    let (m, t) = timed(|| run_in("h_sweep.toml", out));
    let spread = f(first(&m), &["max_over_min"]);
    r.record(9, spread <= 1.3, secs(300), t, format!("max/min final W1 over the grid {spread:.3}"));

    let (mismatches, t) = timed(|| {
        let mut names: Vec<PathBuf> = std::fs::read_dir(experiments().join("smoke")).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        let mut bad = Vec::new();
        for p in &names {
            let mut spec = ExperimentSpec::load(p).unwrap();
            let mut hashes = Vec::new();
            for (i, threads) in [1, 3, 1].into_iter().enumerate() {
                spec.output = out.join(format!("det{i}"));
                let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
                let m = pool.install(|| run(&spec)).unwrap();
                hashes.push(m.files.iter().map(|f| f.sha256.clone()).collect::<Vec<_>>());
            }
            if hashes.iter().any(|h| *h != hashes[0]) {
                bad.push(p.file_name().unwrap().to_string_lossy().into_owned());
            }
        }
        (names.len(), bad)
    });
    let (count, bad) = mismatches;
    r.record(10, bad.is_empty(), secs(120), t, format!("{count} smoke specs rerun on 1, 3, 1 workers; mismatched: {bad:?}"));

    let failed: Vec<&String> = r.lines.iter().filter(|l| !l.1).map(|l| &l.2).collect();
    assert!(failed.is_empty(), "failed criteria:\n{failed:#?}");
}
