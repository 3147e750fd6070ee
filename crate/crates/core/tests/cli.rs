use std::path::Path;
use std::process::{Command, Output};

fn mdcast(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdcast"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

const SMALL: &str = r#"
seed = 1
out_dir = "out"
[simgen]
n_steps = 500
[window]
H = 4
L = 2
[train]
backbone = "linear"
max_epochs = 2
[rollout]
T = 20
"#;

#[test]
fn gen_data_writes_split_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), SMALL).unwrap();
    let o = mdcast(dir.path(), &["-c", "c.toml", "gen-data"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("train  350"), "{stdout}");
    let run = dir.path().join("out/default");
    for f in ["data/train.xyz", "data/valid.xyz", "data/test.xyz", "data/manifest.json", "config.toml"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let manifest = std::fs::read_to_string(run.join("data/manifest.json")).unwrap();
    assert!(manifest.contains("\"train_frames\": 350"), "{manifest}");
}

#[test]
fn set_overrides_the_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), SMALL).unwrap();
    let o = mdcast(dir.path(), &["-c", "c.toml", "--set", "run_id=\"alt\"", "--set", "simgen.n_steps=300", "gen-data"]);
    assert_eq!(code(&o), 0);
    let snap = std::fs::read_to_string(dir.path().join("out/alt/config.toml")).unwrap();
    assert!(snap.contains("n_steps = 300"), "{snap}");
}

#[test]
fn config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[train]\nlearning_rat = 0.1\n").unwrap();
    let o = mdcast(dir.path(), &["-c", "bad.toml", "train"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rat"));

    let o = mdcast(dir.path(), &["-c", "missing.toml", "gen-data"]);
    assert_eq!(code(&o), 1);

    let o = mdcast(dir.path(), &["--set", "simgen.valid_frac=0.5", "gen-data"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("split"));

    // Nothing generated yet.
    let o = mdcast(dir.path(), &["--set", "out_dir=\"empty\"", "thresholds"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("gen-data"));
}

#[test]
fn runtime_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("t.xyz"), "2\nProperties=species:S:1:pos:R:3\nA 0 0 0\n").unwrap();
    let o = mdcast(dir.path(), &["diffusivity", "--trajectory", "t.xyz"]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn fit_morse_partial_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("species_i,species_j,d,energy\n");
    for k in 0..20 {
        let d = 1.6 + 0.15 * k as f64;
        let e = 0.5 * (1.0 - (-1.3f64 * (d - 2.4)).exp()).powi(2) - 0.1;
        csv.push_str(&format!("A,A,{d},{e}\n"));
    }
    std::fs::write(dir.path().join("ok.csv"), &csv).unwrap();
    let o = mdcast(dir.path(), &["fit-morse", "--samples", "ok.csv"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let fitted = std::fs::read_to_string(dir.path().join("runs/default/morse_fit.csv")).unwrap();
    assert!(fitted.lines().count() == 2, "{fitted}");

    for _ in 0..5 {
        csv.push_str("A,B,2.0,1.0\n");
    }
    std::fs::write(dir.path().join("bad.csv"), &csv).unwrap();
    let o = mdcast(dir.path(), &["fit-morse", "--samples", "bad.csv"]);
    assert_eq!(code(&o), 3);
    let report = std::fs::read_to_string(dir.path().join("runs/default/morse_fit_report.csv")).unwrap();
    assert!(report.contains("A,A,") && report.contains("A,B,"), "{report}");
}

#[test]
fn full_chain_produces_reports() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), SMALL).unwrap();
    for cmd in ["gen-data", "train", "rollout", "evaluate", "diffusivity"] {
        let o = mdcast(dir.path(), &["-c", "c.toml", cmd]);
        assert_eq!(code(&o), 0, "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let metrics = std::fs::read_to_string(dir.path().join("out/default/metrics.csv")).unwrap();
    assert!(metrics.starts_with("metric,value,units,threshold_table,M,seed\n"));
    assert!(metrics.contains("V_r,"));
    let log = std::fs::read_to_string(dir.path().join("out/default/rollout_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 21);
}

#[test]
fn help_lists_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [(&str, &[&str]); 9] = [
        ("gen-data", &["simgen.n_atoms", "simgen.train_frac", "simgen.thermostat"]),
        ("fit-morse", &["morse.samples_file"]),
        ("thresholds", &["morse.granularity"]),
        ("train", &["train.lambda", "train.M", "window.H", "window.normalize"]),
        ("rollout", &["rollout.T", "rollout.pii", "rollout.freeze_policy"]),
        ("evaluate", &["eval.M", "eval.threshold_table"]),
        ("ablate", &["eval.ablation_lambda", "eval.replicates"]),
        ("sweep-lambda", &["eval.lambdas"]),
        ("diffusivity", &["eval.fit_start", "eval.msd_origins"]),
    ];
    for (cmd, keys) in cases {
        let o = mdcast(dir.path(), &[cmd, "--help"]);
        assert_eq!(code(&o), 0);
        let text = String::from_utf8(o.stdout).unwrap();
        for k in keys {
            assert!(text.contains(k), "{cmd} --help does not mention {k}");
        }
    }
}
