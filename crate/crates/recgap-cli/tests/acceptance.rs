//! CLI acceptance: byte-identical outputs across reruns and thread counts,
//! plus the exit-code and output-shape contract.

use std::fs;
use std::path::Path;
use std::process::Command;

fn recgap() -> Command {
    Command::new(env!("CARGO_BIN_EXE_recgap"))
}

fn read(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("cannot read {}: {e}", path.display()))
}

fn write_fixture_log(path: &Path) {
    fs::write(
        path,
        "user_id,item_id,timestamp\n\
         u1,a,1\nu1,b,2\nu2,b,1\nu2,c,2\nu3,c,1\n",
    )
    .unwrap();
}

#[test]
fn acceptance_8_determinism_across_reruns_and_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.cfg");
    fs::write(
        &config,
        "users = 1200\n\
         items = 150\n\
         latent_dim = 4\n\
         session_rate = 0.6\n\
         horizon_seconds = 345600\n\
         retrain_every_seconds = 172800\n\
         datasets = 2\n\
         serve_k = 5\n\
         k_values = 1,5,10\n\
         beta_values = 0.0,0.3,0.6\n\
         models = mf-knn f=4 reg=0.1 alpha=10 iters=2 m=10; popularity; random\n\
         seed = 11\n",
    )
    .unwrap();

    let run = |out: &str, threads: &str| {
        let status = recgap()
            .args([
                "experiment",
                "--config",
                config.to_str().unwrap(),
                "--out",
                dir.path().join(out).to_str().unwrap(),
                "--threads",
                threads,
            ])
            .status()
            .unwrap();
        assert!(status.success(), "experiment run failed");
    };
    run("a", "8");
    run("b", "1");

    for file in ["results.csv", "msr_report.json", "plot_msr.csv", "manifest.cfg"] {
        let a = read(&dir.path().join("a").join(file));
        let b = read(&dir.path().join("b").join(file));
        assert_eq!(a, b, "{file} differs between --threads 8 and --threads 1");
    }

    // Re-running from the emitted manifest reproduces the results exactly.
    let status = recgap()
        .args([
            "experiment",
            "--config",
            dir.path().join("a/manifest.cfg").to_str().unwrap(),
            "--out",
            dir.path().join("c").to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(
        read(&dir.path().join("a/results.csv")),
        read(&dir.path().join("c/results.csv")),
        "manifest re-run changed results.csv"
    );

    // Simulation outputs are byte-identical across reruns too.
    let sim_config = dir.path().join("sim.cfg");
    fs::write(
        &sim_config,
        "users = 400\nitems = 80\nlatent_dim = 4\nsession_rate = 1.0\n\
         horizon_seconds = 259200\nretrain_every_seconds = 86400\nserve_k = 5\n\
         models = popularity; random\nseed = 3\n",
    )
    .unwrap();
    for out in ["s1", "s2"] {
        let status = recgap()
            .args([
                "simulate",
                "--config",
                sim_config.to_str().unwrap(),
                "--out",
                dir.path().join(out).to_str().unwrap(),
            ])
            .status()
            .unwrap();
        assert!(status.success());
    }
    for file in [
        "history.csv",
        "live_clicks.csv",
        "recs_model0.csv",
        "recs_model1.csv",
        "run_manifest.json",
        "manifest.cfg",
    ] {
        assert_eq!(
            read(&dir.path().join("s1").join(file)),
            read(&dir.path().join("s2").join(file)),
            "{file} differs between identical simulate runs"
        );
    }
    println!("ACCEPTANCE 8 (CLI determinism incl. --threads 1 vs 8): PASS");
}

#[test]
fn recgap_threads_env_var_is_honored_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.csv");
    write_fixture_log(&log);
    let model = dir.path().join("model.json");
    assert!(recgap()
        .args([
            "train",
            "--log",
            log.to_str().unwrap(),
            "--spec",
            "mf-knn f=2 reg=0.1 alpha=5 iters=2 m=2",
            "--out",
            model.to_str().unwrap(),
        ])
        .status()
        .unwrap()
        .success());

    let eval = |env: Option<(&str, &str)>| {
        let mut cmd = recgap();
        cmd.args([
            "eval-offline",
            "--log",
            log.to_str().unwrap(),
            "--model",
            model.to_str().unwrap(),
            "--val",
            "loo",
            "--k",
            "2",
        ]);
        if let Some((key, value)) = env {
            cmd.env(key, value);
        }
        let out = cmd.output().unwrap();
        assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
        out.stdout
    };
    let plain = eval(None);
    let pinned = eval(Some(("RECGAP_THREADS", "1")));
    assert_eq!(plain, pinned);

    let bad = recgap()
        .args(["ingest", "--log", log.to_str().unwrap()])
        .env("RECGAP_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn eval_offline_prints_recall_json_on_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.csv");
    write_fixture_log(&log);
    let model = dir.path().join("model.json");
    let status = recgap()
        .args([
            "train",
            "--log",
            log.to_str().unwrap(),
            "--spec",
            "popularity",
            "--out",
            model.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());

    let output = recgap()
        .args([
            "eval-offline",
            "--log",
            log.to_str().unwrap(),
            "--model",
            model.to_str().unwrap(),
            "--val",
            "lloo",
            "--beta",
            "0.3",
            "--k",
            "10",
        ])
        .output()
        .unwrap();
    assert!(output.status.success());
    let json: serde_json::Value = serde_json::from_slice(&output.stdout).unwrap();
    assert_eq!(json["metric"], "recall");
    assert_eq!(json["val"], "lloo");
    assert_eq!(json["beta"], 0.3);
    assert_eq!(json["k"], 10);
    assert!(json["value"].is_number());
    assert_eq!(json["n_users"], 3);
}

#[test]
fn exit_codes_follow_the_contract() {
    // Unknown subcommand and unknown flag: usage error, exit 2.
    let out = recgap().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = recgap().args(["ingest", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    // Runtime failure: structured error line on stderr, exit 1.
    let out = recgap()
        .args(["ingest", "--log", "/nonexistent/x.csv"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("error: "), "stderr was: {stderr}");
}

#[test]
fn failed_runs_leave_no_partial_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let bad_log = dir.path().join("bad.csv");
    fs::write(&bad_log, "user_id,item_id,timestamp\nu1,a,notatime\n").unwrap();
    let out_file = dir.path().join("normalized.csv");
    let out = recgap()
        .args([
            "ingest",
            "--log",
            bad_log.to_str().unwrap(),
            "--out",
            out_file.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("line 2"), "stderr was: {stderr}");
    assert!(!out_file.exists(), "partial output left behind");
}

#[test]
fn malformed_recommendation_logs_are_rejected_with_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.csv");
    write_fixture_log(&log);
    let recs = dir.path().join("recs.csv");
    fs::write(&recs, "timestamp,user_id,item_ids\n100,u1,a|a\n").unwrap();
    let out = recgap()
        .args([
            "eval-online",
            "--recs",
            recs.to_str().unwrap(),
            "--log",
            log.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}
