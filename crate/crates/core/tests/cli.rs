use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn molsem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_molsem")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_scenario_exits_with_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = molsem(&["sim-sir", "--scenario", "scenario7", "--out", path(dir.path())]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("scenario7"));
}

#[test]
fn bad_arguments_and_config_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = path(dir.path());
    assert_eq!(code(&molsem(&["sim-sir", "--bogus"])), 2);
    assert_eq!(code(&molsem(&["sim-sir", "--dt", "4", "--scenario", "scenario1", "--out", out])), 2);
    assert_eq!(code(&molsem(&["eval", "--n-m", "100,200", "--out", out])), 2);
    let conf = dir.path().join("bad.toml");
    fs::write(&conf, "[sir]\ndt = \"fast\"\n").unwrap();
    assert_eq!(code(&molsem(&["sim-sir", "--config", path(&conf), "--out", out])), 2);
}

#[test]
fn sim_sir_writes_one_row_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let o = molsem(&["sim-sir", "--out", path(dir.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for (name, t_s) in [("scenario1", 4.0), ("scenario2", 3.0)] {
        let csv = fs::read_to_string(dir.path().join(format!("sir_{name}.csv"))).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("t_s,sir,sir_db"));
        assert_eq!(lines.count(), (5.0 * t_s / 0.01_f64).round() as usize);
    }
    let manifest = fs::read_to_string(dir.path().join("sim-sir.manifest.json")).unwrap();
    let m: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    assert_eq!(m["command"], "sim-sir");
    assert_eq!(m["outputs"].as_array().unwrap().len(), 4);
    assert_eq!(m["outputs"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn tolerance_breach_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("tight.toml");
    fs::write(&conf, "[physics]\nn_particles = 2000\ntolerance = 1e-9\n").unwrap();
    let o = molsem(&["validate-physics", "--scenario", "scenario1", "--config", path(&conf), "--out", path(dir.path())]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(dir.path().join("physics_scenario1.csv").exists());
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("small.toml");
    fs::write(&conf, "[physics]\nn_particles = 10000\n").unwrap();
    let mut csvs = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.path().join(threads);
        let o = molsem(&[
            "validate-physics",
            "--scenario",
            "scenario2",
            "--config",
            path(&conf),
            "--threads",
            threads,
            "--out",
            path(&out),
        ]);
        assert!(matches!(code(&o), 0 | 3), "{}", stderr(&o));
        csvs.push(fs::read(out.join("physics_scenario2.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
}

#[test]
fn wrong_artifacts_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let conf = d.join("small.toml");
    fs::write(
        &conf,
        "[data]\nn_train = 120\nn_test = 40\n[experiment.surrogate]\nn_pairs = 2000\nmax_epochs = 2\n\
         [experiment.train]\nmax_epochs = 1\n[experiment.classifier]\nepochs = 1\n[fidelity]\nheld_out_pairs = 2000\n",
    )
    .unwrap();
    let c = path(&conf);
    let data = d.join("data");
    let fit = d.join("fit");
    let train = d.join("train");
    assert_eq!(code(&molsem(&["gen-data", "--config", c, "--out", path(&data)])), 0);
    assert_eq!(code(&molsem(&["fit-channel", "--config", c, "--out", path(&fit)])), 0);
    let sur = fit.join("surrogate.ck");
    let o = molsem(&["train", "--config", c, "--data", path(&data), "--surrogate", path(&sur), "--out", path(&train)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    // A classifier checkpoint where a semantic model is expected.
    let o = molsem(&[
        "eval",
        "--data",
        path(&data),
        "--model",
        path(&train.join("classifier.ck")),
        "--out",
        path(&d.join("e1")),
    ]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("role mismatch"), "{}", stderr(&o));

    // A dataset file where a checkpoint is expected.
    let o = molsem(&["train", "--data", path(&data), "--surrogate", path(&data.join("train.msds")), "--out", path(&d.join("e2"))]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));

    // Missing inputs.
    assert_eq!(code(&molsem(&["eval", "--data", path(&data), "--out", path(&d.join("e3"))])), 2);
    let o = molsem(&["train", "--data", path(&d.join("nowhere")), "--surrogate", path(&sur), "--out", path(&d.join("e4"))]);
    assert_eq!(code(&o), 1);

    // A manifest replayed under another command.
    let o = molsem(&["sim-sir", "--manifest", path(&fit.join("fit-channel.manifest.json")), "--out", path(&d.join("e5"))]);
    assert_eq!(code(&o), 2);
}
