use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_jointgp"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin().args(args).current_dir(dir).output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const CONFIG: &str = r#"
seed = 5
[simulate]
scale = 4
[data]
plots = "sim/train_plots.csv"
signals = "sim/train_signals.csv"
holdout_plots = "sim/holdout_plots.csv"
holdout_signals = "sim/holdout_signals.csv"
[knots]
x_file = "sim/alpha_heights.csv"
[sampler]
n_iter = 300
n_burn = 150
n_chains = 2
latent_thin = 5
[predict]
fit_dir = "fit"
max_samples = 60
[score]
fit_dir = "fit"
predict_dir = "pred"
"#;

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    ok(&run(&["simulate", "--config", "run.toml", "--out", "sim"], dir.path()));
    dir
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p: PathBuf = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect()
}

fn metrics(path: &Path) -> BTreeMap<String, f64> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let (k, v) = l.split_once('=').unwrap();
            (k.to_string(), v.parse().unwrap())
        })
        .collect()
}

#[test]
fn simulate_fit_predict_score() {
    let ws = workspace();
    let d = ws.path();
    for f in ["plots.csv", "signals.csv", "train_plots.csv", "holdout_signals.csv", "truth.csv", "simulation.toml"] {
        assert!(d.join("sim").join(f).exists(), "{f}");
    }
    ok(&run(&["fit", "--config", "run.toml", "--out", "fit"], d));
    let fit = files(&d.join("fit"));
    for f in ["chain_1.csv", "chain_2.csv", "trace_1.csv", "latents_2.csv", "summary.csv", "fit.toml", "knots_x.csv"] {
        assert!(fit.contains_key(f), "{f}");
    }
    let chain = String::from_utf8(fit["chain_1.csv"].clone()).unwrap();
    assert_eq!(chain.lines().count(), 1 + 150);
    assert!(chain.starts_with("sigma2_u,a,gamma,c,sigma2_v,phi_v,tau2_y,tau2_z_1"));

    ok(&run(&["predict", "--config", "run.toml", "--out", "pred"], d));
    let pred = files(&d.join("pred"));
    for f in ["pred_z.csv", "pred_y.csv", "pred_y_given_z.csv", "draws_y.csv", "predict.toml"] {
        assert!(pred.contains_key(f), "{f}");
    }
    let n_hold = fs::read_to_string(d.join("sim/holdout_plots.csv")).unwrap().lines().count() - 1;
    let py = String::from_utf8(pred["pred_y.csv"].clone()).unwrap();
    assert_eq!(py.lines().next().unwrap(), "s1,s2,median,q025,q975,width");
    assert_eq!(py.lines().count(), 1 + n_hold);

    ok(&run(&["score", "--config", "run.toml", "--out", "score"], d));
    let m = metrics(&d.join("score/metrics.txt"));
    for prefix in ["z", "y", "joint", "y_given_z"] {
        for k in ["rmspe", "crps", "grs", "coverage", "width"] {
            let v = m[&format!("{prefix}_{k}")];
            assert!(v.is_finite(), "{prefix}_{k}");
        }
        assert!((0.0..=100.0).contains(&m[&format!("{prefix}_coverage")]));
    }
    for k in ["dic", "p_d", "gg_g", "gg_p", "gg_d"] {
        assert!(m[k].is_finite(), "{k}");
    }
    assert!((m["gg_d"] - m["gg_g"] - m["gg_p"]).abs() < 1e-9 * m["gg_d"].abs());
}

#[test]
fn same_seed_same_bytes() {
    let ws = workspace();
    let d = ws.path();
    ok(&run(&["fit", "--config", "run.toml", "--out", "a"], d));
    ok(&run(&["fit", "--config", "run.toml", "--out", "b"], d));
    ok(&run(&["fit", "--config", "run.toml", "--out", "c", "--seed", "6"], d));
    let (a, b, c) = (files(&d.join("a")), files(&d.join("b")), files(&d.join("c")));
    let csv = |m: &BTreeMap<String, Vec<u8>>| -> BTreeMap<String, Vec<u8>> {
        m.iter().filter(|(k, _)| k.ends_with(".csv")).map(|(k, v)| (k.clone(), v.clone())).collect()
    };
    assert_eq!(csv(&a), csv(&b));
    assert_ne!(a["chain_1.csv"], c["chain_1.csv"]);
}

#[test]
fn chains_flag_overrides_config() {
    let ws = workspace();
    let d = ws.path();
    ok(&run(&["fit", "--config", "run.toml", "--out", "one", "--chains", "1"], d));
    let f = files(&d.join("one"));
    assert!(f.contains_key("chain_1.csv"));
    assert!(!f.contains_key("chain_2.csv"));
}

#[test]
fn select_knots_writes_requested_counts() {
    let ws = workspace();
    let d = ws.path();
    fs::write(
        d.join("knots.toml"),
        "[data]\nplots = \"sim/train_plots.csv\"\nsignals = \"sim/train_signals.csv\"\n[knots]\nn_x = 3\nn_u = 4\nn_v = 5\ngrid_resolution = 6\n",
    )
    .unwrap();
    ok(&run(&["select-knots", "--config", "knots.toml", "--out", "k"], d));
    let rows = |f: &str| fs::read_to_string(d.join("k").join(f)).unwrap().lines().count() - 1;
    assert_eq!(rows("knots_x.csv"), 3);
    assert_eq!(rows("knots_u.csv"), 4);
    assert_eq!(rows("knots_v.csv"), 5);
    assert_eq!(rows("knot_objective.csv"), 1 + 5 + 6);
}

fn stderr_line(out: &Output) -> String {
    let s = String::from_utf8_lossy(&out.stderr).into_owned();
    assert_eq!(s.trim_end().lines().count(), 1, "{s}");
    s.trim_end().to_string()
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.toml"), "[sampler]\nn_iters = 10\n").unwrap();
    let out = run(&["fit", "--config", "bad.toml", "--out", "o"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_line(&out).starts_with("E_CONFIG: "));
    assert!(!d.join("o").exists());

    let out = run(&["fit", "--out", "o"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_line(&out).contains("data.plots"));
}

#[test]
fn data_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("p.csv"), "s1,s2,y\n0,0,1\n1,0,2\n").unwrap();
    fs::write(d.join("s.csv"), "s1,s2,x,z\n0,0,0.5,oops\n").unwrap();
    fs::write(d.join("run.toml"), "[data]\nplots = \"p.csv\"\nsignals = \"s.csv\"\n").unwrap();
    let out = run(&["fit", "--config", "run.toml", "--out", "o"], d);
    assert_eq!(out.status.code(), Some(3));
    let line = stderr_line(&out);
    assert!(line.starts_with("E_DATA: "), "{line}");
    assert!(line.contains("s.csv"), "{line}");

    fs::write(d.join("run.toml"), "[data]\nplots = \"missing.csv\"\nsignals = \"s.csv\"\n").unwrap();
    let out = run(&["fit", "--config", "run.toml", "--out", "o"], d);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn failed_command_removes_its_outputs_only() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // simulate writes the full tables before the split fails
    fs::write(d.join("run.toml"), "[simulate]\nscale = 5\nholdout_fraction = 1.5\n").unwrap();
    let out = run(&["simulate", "--config", "run.toml", "--out", "fresh"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(!d.join("fresh").exists());

    fs::create_dir(d.join("existing")).unwrap();
    fs::write(d.join("existing/keep.txt"), "mine").unwrap();
    let out = run(&["simulate", "--config", "run.toml", "--out", "existing"], d);
    assert_eq!(out.status.code(), Some(2));
    let left: Vec<_> = fs::read_dir(d.join("existing")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(left, vec![std::ffi::OsString::from("keep.txt")]);
}
