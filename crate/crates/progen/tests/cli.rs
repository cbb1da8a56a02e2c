use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_progen");

/// Overrides that shrink the run to a few seconds.
const SMALL: &[&str] = &[
    "data.history_len=4",
    "data.horizon=4",
    "model.st_channels=4",
    "model.hidden_dim=8",
    "model.embed_dim_time=4",
    "model.embed_dim_pos=4",
    "model.n_res_blocks=1",
    "model.cheb_order=2",
    "train.epochs=2",
    "train.batch_size=8",
    "train.max_windows_per_epoch=32",
    "train.max_val_windows=16",
    "sampler.n_steps=20",
    "sampler.n_samples=3",
];

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("PROGEN_SEED")
        .output()
        .expect("binary runs")
}

fn run_small(dir: &Path, args: &[&str], extra: &[&str]) -> Output {
    let mut all: Vec<&str> = args.to_vec();
    for s in SMALL.iter().chain(extra) {
        all.push("--set");
        all.push(s);
    }
    run(dir, &all)
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A synthetic dataset in `dir/data`.
fn synth(dir: &Path) -> PathBuf {
    ok(&run(dir, &["synth", "--nodes", "4", "--steps", "300", "--out-dir", "data", "--seed", "3"]));
    dir.join("data/config.toml")
}

fn train(dir: &Path, extra: &[&str]) -> Output {
    run_small(dir, &["train", "--config", "data/config.toml", "--out", "run/model.ckpt", "--quiet"], extra)
}

fn forecast(dir: &Path, mode: &str, out: &str, extra: &[&str]) -> Output {
    run_small(
        dir,
        &[
            "forecast",
            "--config",
            "data/config.toml",
            "--checkpoint",
            "run/model.ckpt",
            "--mode",
            mode,
            "--out",
            out,
        ],
        extra,
    )
}

#[test]
fn synth_writes_inputs() {
    let dir = TempDir::new().unwrap();
    synth(dir.path());
    let series = fs::read_to_string(dir.path().join("data/series.csv")).unwrap();
    assert_eq!(series.lines().count(), 302);
    assert!(series.starts_with("# steps_per_day=288,start_weekday=0\n"));
    let edges = fs::read_to_string(dir.path().join("data/edges.csv")).unwrap();
    assert!(edges.contains("# nodes=4"));
    let cfg = fs::read_to_string(dir.path().join("data/config.toml")).unwrap();
    assert!(cfg.contains("seed = 3"));
}

#[test]
fn synth_rejects_single_node() {
    let dir = TempDir::new().unwrap();
    let o = run(dir.path(), &["synth", "--nodes", "1", "--out-dir", "data"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error:"));
    assert!(!dir.path().join("data/series.csv").exists());
}

#[test]
fn usage_errors_and_help() {
    let dir = TempDir::new().unwrap();
    assert_eq!(run(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(dir.path(), &["train"]).status.code(), Some(1));
    assert_eq!(run(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn unknown_config_key_fails_before_writing() {
    let dir = TempDir::new().unwrap();
    synth(dir.path());
    let o = train(dir.path(), &["train.epochz=3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("epochz"), "{}", stderr(&o));
    assert!(!dir.path().join("run").exists());
    let o = train(dir.path(), &["train.learning_rate=0.5"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn zero_epochs_writes_initial_model() {
    let dir = TempDir::new().unwrap();
    synth(dir.path());
    ok(&train(dir.path(), &["train.epochs=0"]));
    let curve = fs::read_to_string(dir.path().join("run/model_loss.csv")).unwrap();
    let rows: Vec<&str> = curve.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0], "epoch,train_loss,val_loss");
    assert!(rows[1].starts_with("0,"));
    assert!(dir.path().join("run/model.ckpt").exists());
}

#[test]
fn train_forecast_evaluate_pipeline() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    synth(d);
    let o = train(d, &[]);
    ok(&o);
    assert!(String::from_utf8_lossy(&o.stdout).contains("config digest: "));
    let curve = fs::read_to_string(d.join("run/model_loss.csv")).unwrap();
    assert_eq!(curve.lines().filter(|l| !l.starts_with('#')).count(), 1 + 3);
    assert!(curve.starts_with("# seed=3,best_epoch="));

    // pure mode: S·H·N·D rows plus metadata and header
    ok(&forecast(d, "subvp_only", "out/sub.csv", &[]));
    let ens = fs::read_to_string(d.join("out/sub.csv")).unwrap();
    assert_eq!(ens.lines().count(), 2 + 3 * 4 * 4);
    assert!(ens.lines().next().unwrap().contains("mode=subvp_only,selection=none,oracle=false"));
    assert!(d.join("out/sub_truth.csv").exists());
    assert!(!d.join("out/sub_trace.csv").exists());

    // adaptive oracle mode writes a trace and the tracked best mean
    ok(&forecast(d, "adaptive", "out/ad.csv", &[]));
    let trace = fs::read_to_string(d.join("out/ad_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 2 + 20);
    assert!(d.join("out/ad_best.csv").exists());
    assert!(fs::read_to_string(d.join("out/ad.csv")).unwrap().contains("selection=oracle,oracle=true"));

    // label-free adaptive needs calibration traces
    let o = forecast(d, "adaptive", "out/free.csv", &["sampler.oracle=false"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).to_lowercase().contains("label"), "{}", stderr(&o));
    let mut args = vec!["--calibration", "out/ad_trace.csv"];
    args.extend(["--window-index", "1", "--split", "val"]);
    let o = run_small(
        d,
        &[
            &["forecast", "--config", "data/config.toml", "--checkpoint", "run/model.ckpt", "--mode", "adaptive", "--out", "out/cal.csv"][..],
            &args[..],
        ]
        .concat(),
        &["sampler.oracle=false"],
    );
    ok(&o);
    let cal = fs::read_to_string(d.join("out/cal.csv")).unwrap();
    assert!(cal.contains("selection=calibrated,oracle=false"));
    assert!(cal.contains("split=val,window_index=1"));

    // evaluate to stdout and to a file
    let o = run(d, &["evaluate", "--pred", "out/ad.csv", "--truth", "out/ad_truth.csv"]);
    ok(&o);
    let report = String::from_utf8_lossy(&o.stdout).into_owned();
    assert!(report.contains("mode=adaptive"));
    assert!(report.contains("oracle=true"));
    for metric in ["mae,", "rmse,", "crps,", "mis,", "crps_normalized,"] {
        assert!(report.contains(metric), "{report}");
    }
    ok(&run(d, &["evaluate", "--pred", "out/ad.csv", "--truth", "out/ad_truth.csv", "--out", "out/report.csv"]));
    assert_eq!(fs::read_to_string(d.join("out/report.csv")).unwrap(), report);

    // bad window index and mismatched architecture
    let o = forecast(d, "subvp_only", "out/x.csv", &[]);
    ok(&o);
    let o = run_small(
        d,
        &["forecast", "--config", "data/config.toml", "--checkpoint", "run/model.ckpt", "--window-index", "100000", "--out", "out/y.csv"],
        &[],
    );
    assert_eq!(o.status.code(), Some(1));
    let o = forecast(d, "subvp_only", "out/z.csv", &["model.hidden_dim=16"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!d.join("out/z.csv").exists());
}

#[test]
fn evaluate_metric_identities() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    // one sample: CRPS equals MAE
    fs::write(d.join("p.csv"), "sample,horizon,node,feature,value\n0,0,0,0,1\n0,0,1,0,4\n").unwrap();
    fs::write(d.join("t.csv"), "horizon,node,feature,value\n0,0,0,2\n0,1,0,2\n").unwrap();
    let o = run(d, &["evaluate", "--pred", "p.csv", "--truth", "t.csv"]);
    ok(&o);
    let text = String::from_utf8_lossy(&o.stdout).into_owned();
    let get = |k: &str| -> String {
        text.lines().find_map(|l| l.strip_prefix(&format!("{k},"))).unwrap().to_string()
    };
    assert_eq!(get("mae"), "1.5");
    assert_eq!(get("crps"), "1.5");
    assert_eq!(get("mis"), "NaN");
    // shape mismatch is an error
    fs::write(d.join("t2.csv"), "horizon,node,feature,value\n0,0,0,2\n").unwrap();
    assert_eq!(run(d, &["evaluate", "--pred", "p.csv", "--truth", "t2.csv"]).status.code(), Some(1));
    assert_eq!(run(d, &["evaluate", "--pred", "missing.csv", "--truth", "t.csv"]).status.code(), Some(1));
}

#[test]
fn runs_are_byte_reproducible() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    for d in [a.path(), b.path()] {
        synth(d);
        ok(&train(d, &[]));
        ok(&forecast(d, "adaptive", "out/f.csv", &[]));
    }
    for f in ["data/series.csv", "run/model.ckpt", "run/model_loss.csv", "out/f.csv", "out/f_trace.csv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn seed_precedence() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    synth(d);
    let digest = |o: &Output| {
        String::from_utf8_lossy(&o.stdout)
            .lines()
            .find_map(|l| l.strip_prefix("config digest: ").map(str::to_string))
            .unwrap()
    };
    let base = ["train", "--config", "data/config.toml", "--out", "run/m.ckpt", "--quiet", "--set", "train.epochs=0"];
    let mut args: Vec<&str> = base.to_vec();
    for s in SMALL {
        args.extend(["--set", s]);
    }
    let with_flag = {
        let mut a = args.clone();
        a.extend(["--seed", "9"]);
        run(d, &a)
    };
    let with_env = Command::new(BIN).args(&args).current_dir(d).env("PROGEN_SEED", "9").output().unwrap();
    let both = {
        let mut a = args.clone();
        a.extend(["--seed", "9"]);
        Command::new(BIN).args(&a).current_dir(d).env("PROGEN_SEED", "4").output().unwrap()
    };
    let file_only = run(d, &args);
    for o in [&with_flag, &with_env, &both, &file_only] {
        ok(o);
    }
    assert_eq!(digest(&with_flag), digest(&with_env));
    assert_eq!(digest(&with_flag), digest(&both));
    assert_ne!(digest(&with_flag), digest(&file_only));
    let bad = Command::new(BIN).args(&args).current_dir(d).env("PROGEN_SEED", "x").output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn verify_suites() {
    let dir = TempDir::new().unwrap();
    for suite in ["kernels", "lyapunov", "gradients", "analytic"] {
        let out = format!("{suite}.csv");
        let o = run(dir.path(), &["verify", "--suite", suite, "--out", &out]);
        ok(&o);
        let table = fs::read_to_string(dir.path().join(&out)).unwrap();
        assert!(table.starts_with("check,measured,tolerance,status,note\n"));
        assert!(table.lines().skip(1).all(|l| l.contains(",pass,")), "{table}");
    }
    let o = run(dir.path(), &["verify", "--suite", "lyapunov", "--alpha", "1.5"]);
    ok(&o);
    assert!(String::from_utf8_lossy(&o.stdout).contains("unstable"));
}
