use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use ctflow_cli::{emit_plotdata, run, sweep_h, CliError, ExperimentSpec, Manifest};

fn spec(text: &str, out: &Path) -> ExperimentSpec {
    let mut s = ExperimentSpec::from_toml(text).expect("valid spec");
    s.output = out.to_path_buf();
    s
}

fn smoke(name: &str) -> String {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../experiments/smoke").join(format!("{name}.toml"));
    fs::read_to_string(p).unwrap()
}

const FLOW_ORACLE: &str = r#"
version = 1
target = "ou"
seeds = [7]
output = "unused"

[flow]
step_size = 1e-3
num_steps = 2000

[experiment]
kind = "flow_oracle"
particles = 10000
initial_mean = 3.0
initial_variance = 4.0
record_every = 500
"#;

#[test]
fn flow_oracle_summary_tracks_analytic_moments() {
    let dir = tempfile::tempdir().unwrap();
    let m = run(&spec(FLOW_ORACLE, &dir.path().join("o"))).unwrap();
    let s = m.summary(7).unwrap();
    let f = |k: &str| s[k].as_f64().unwrap();
    assert!((f("analytic_mean") - 3.0 * (-1.0f64).exp()).abs() < 1e-12);
    assert!((f("analytic_variance") - (1.0 + 3.0 * (-2.0f64).exp())).abs() < 1e-12);
    assert!(f("mean_error").abs() < 0.05, "{s}");
    assert!(f("variance_error").abs() < 0.10, "{s}");
    let csv = fs::read_to_string(dir.path().join("o/seed-7/moments.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "step,t,mean,variance,analytic_mean,analytic_variance");
    assert_eq!(csv.lines().count(), 1 + 5);
}

#[test]
fn duplicate_runs_hash_identically() {
    let dir = tempfile::tempdir().unwrap();
    let text = smoke("prop1_collapse");
    let a = run(&spec(&text, &dir.path().join("a"))).unwrap();
    let b = run(&spec(&text, &dir.path().join("b"))).unwrap();
    assert_eq!(a.hashes(), b.hashes());
    assert_eq!(a.summaries, b.summaries);
    // rerunning into an existing output replaces it
    let c = run(&spec(&text, &dir.path().join("a"))).unwrap();
    assert_eq!(a, c);
}

#[test]
fn manifest_hashes_match_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let m = run(&spec(&smoke("bound_check"), &out)).unwrap();
    assert_eq!(Manifest::load(&out.join("manifest.json")).unwrap(), m);
    for f in &m.files {
        let bytes = fs::read(out.join(&f.path)).unwrap();
        assert_eq!(bytes.len() as u64, f.bytes);
        assert_eq!(hex_sha(&bytes), f.sha256, "{}", f.path);
    }
    assert!(!dir.path().join("o.partial").exists());
}

fn hex_sha(bytes: &[u8]) -> String {
    use sha2::Digest;
    sha2::Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn unknown_target_names_the_field() {
    let text = FLOW_ORACLE.replace(r#"target = "ou""#, r#"target = "banana""#);
    let err = ExperimentSpec::from_toml(&text).unwrap_err();
    assert_eq!(err.problems[0].0, "target");
    assert!(err.problems[0].1.contains("banana"));
}

#[test]
fn validation_lists_every_problem() {
    let text = FLOW_ORACLE.replace("seeds = [7]", "seeds = []").replace("particles = 10000", "particles = 0").replace("version = 1", "version = 9");
    let err = ExperimentSpec::from_toml(&text).unwrap_err();
    let fields: Vec<&str> = err.problems.iter().map(|p| p.0.as_str()).collect();
    assert_eq!(fields, ["version", "seeds", "experiment.particles"]);
}

#[test]
fn unknown_keys_and_missing_sections_are_rejected() {
    let err = ExperimentSpec::from_toml(&FLOW_ORACLE.replace("record_every = 500", "record_every = 500\ncolour = 3")).unwrap_err();
    assert!(err.to_string().contains("colour"), "{err}");
    let no_flow = FLOW_ORACLE.replace("[flow]\nstep_size = 1e-3\nnum_steps = 2000\n", "");
    let err = ExperimentSpec::from_toml(&no_flow).unwrap_err();
    assert_eq!(err.problems[0].0, "flow");
    let err = ExperimentSpec::from_toml(&FLOW_ORACLE.replace("flow_oracle", "teleport")).unwrap_err();
    assert!(err.to_string().contains("teleport"), "{err}");
}

#[test]
fn canonical_form_round_trips() {
    let s = ExperimentSpec::from_toml(&smoke("macgan_mixture")).unwrap();
    let again = ExperimentSpec::from_toml(&s.canonical()).unwrap();
    assert_eq!(s, again);
    assert_eq!(s.canonical(), again.canonical());
    // defaults are written out
    assert!(s.canonical().contains("critic_steps = 5"));
}

#[test]
fn single_element_sweep_equals_run() {
    let dir = tempfile::tempdir().unwrap();
    let base = smoke("h_sweep");
    let one = base.replace("grid = [0.05, 0.1]", "grid = [0.1]");
    let ran = run(&spec(&one, &dir.path().join("run"))).unwrap();
    let swept = sweep_h(&spec(&base, &dir.path().join("sweep")), &[0.1]).unwrap();
    assert_eq!(ran, swept);
    let csv = fs::read_to_string(dir.path().join("sweep/seed-1/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    let err = sweep_h(&spec(&smoke("bound_check"), &dir.path().join("x")), &[0.1]).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn sweep_rows_share_total_time() {
    let dir = tempfile::tempdir().unwrap();
    run(&spec(&smoke("h_sweep"), &dir.path().join("o"))).unwrap();
    let csv = fs::read_to_string(dir.path().join("o/seed-2/sweep.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[2].parse::<f64>().unwrap(), 1.0, "{line}");
        assert!(!cols[4].is_empty(), "OU targets report an MSE column");
    }
}

#[test]
fn empty_manifest_gives_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.json");
    fs::write(&path, r#"{"format": "ctflow-manifest/1"}"#).unwrap();
    let written = emit_plotdata(&path, None).unwrap();
    assert_eq!(written, vec![dir.path().join("plotdata/plotdata.csv")]);
    assert_eq!(fs::read_to_string(&written[0]).unwrap(), "series,x,y,seed\n");
}

#[test]
fn mse_plotdata_is_k_against_mse() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let m = run(&spec(&smoke("mse_rate"), &out)).unwrap();
    emit_plotdata(&out.join("manifest.json"), None).unwrap();
    let text = fs::read_to_string(out.join("plotdata/mse_rate.csv")).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    for (r, (k, seed)) in rows.iter().zip([(10, 1), (40, 1), (10, 2), (40, 2)]) {
        assert_eq!(r[0], "mse");
        assert_eq!(r[1], k.to_string());
        assert_eq!(r[3], seed.to_string());
        let mse = m.summary(seed).unwrap()["mse"][if k == 10 { 0 } else { 1 }].as_f64().unwrap();
        assert_eq!(r[2].parse::<f64>().unwrap(), mse);
    }
}

#[test]
fn prop1_plotdata_has_a_scatter_per_method() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    run(&spec(&smoke("prop1_collapse"), &out)).unwrap();
    emit_plotdata(&out.join("manifest.json"), None).unwrap();
    let text = fs::read_to_string(out.join("plotdata/prop1_scatter.csv")).unwrap();
    for series in ["euclidean", "exact_ot", "reference"] {
        assert_eq!(text.lines().filter(|l| l.starts_with(&format!("{series},"))).count(), 64, "{series}");
    }
    let all = fs::read_to_string(out.join("plotdata/plotdata.csv")).unwrap();
    assert!(all.lines().any(|l| l.starts_with("prop1_rounds/exact_ot,")));
}

#[test]
fn plotdata_refuses_modified_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    run(&spec(&smoke("bound_check"), &out)).unwrap();
    fs::write(out.join("seed-1/bound.csv"), "scale,gap\n1,0\n").unwrap();
    assert!(matches!(emit_plotdata(&out.join("manifest.json"), None), Err(CliError::Usage(_))));
}

#[test]
fn divergence_leaves_no_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let text = FLOW_ORACLE.replace("step_size = 1e-3", "step_size = 5.0");
    let err = run(&spec(&text, &out)).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
    assert!(!out.exists());
    assert!(!dir.path().join("o.partial").exists());
}

#[test]
fn refuses_to_replace_foreign_directories() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("keep.txt"), "x").unwrap();
    let err = run(&spec(&smoke("bound_check"), dir.path())).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(dir.path().join("keep.txt").exists());
}

fn binary(args: &[&str], cwd: &Path) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_ctflow")).args(args).current_dir(cwd).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr))
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.toml");
    fs::write(&good, smoke("bound_check").replace("out/smoke/bound_check", "result")).unwrap();
    let (code, _) = binary(&["run", "good.toml"], dir.path());
    assert_eq!(code, 0);
    assert!(dir.path().join("result/manifest.json").exists());
    let (code, text) = binary(&["plotdata", "result/manifest.json"], dir.path());
    assert_eq!(code, 0, "{text}");

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, FLOW_ORACLE.replace(r#"target = "ou""#, r#"target = "banana""#)).unwrap();
    let (code, text) = binary(&["run", "bad.toml"], dir.path());
    assert_eq!(code, 2);
    assert!(text.contains("target: unknown target `banana`"), "{text}");

    let diverging = dir.path().join("diverging.toml");
    fs::write(&diverging, FLOW_ORACLE.replace("step_size = 1e-3", "step_size = 5.0")).unwrap();
    let (code, text) = binary(&["run", "diverging.toml", "--output", "d"], dir.path());
    assert_eq!(code, 3, "{text}");
    assert!(!dir.path().join("d").exists());

    let (code, _) = binary(&["sweep-h", "good.toml", "--grid", "0.1,0.2"], dir.path());
    assert_eq!(code, 2);
    let (code, _) = binary(&["frobnicate"], dir.path());
    assert_eq!(code, 2);
}
