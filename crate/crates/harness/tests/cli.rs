use std::fs;
use std::process::Command;

fn igar() -> Command {
    Command::new(env!("CARGO_BIN_EXE_igar"))
}

#[test]
fn bench_generate_then_run_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let suite = dir.path().join("spatial.json");
    let st = igar()
        .args(["bench", "generate", "--suite", "spatial", "--seed", "3", "--cases", "2", "--out"])
        .arg(&suite)
        .status()
        .unwrap();
    assert!(st.success());
    let first = fs::read(&suite).unwrap();
    igar().args(["bench", "generate", "--suite", "spatial", "--seed", "3", "--cases", "2", "--out"]).arg(&suite).status().unwrap();
    assert_eq!(fs::read(&suite).unwrap(), first);

    let out = dir.path().join("run");
    let o = igar()
        .args(["run", "--igar", "--rollouts", "2", "--suite"])
        .arg(&suite)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.starts_with("suite,variant,sr,lgs,ivar_mean,rollouts,seed\n"));
    assert_eq!(stdout.lines().count(), 6);
    assert_eq!(fs::read_to_string(out.join("report.csv")).unwrap(), stdout);

    assert_eq!(igar().arg("report").arg(&out).output().unwrap().status.code(), Some(0));
    fs::write(out.join("report.csv"), stdout.replace("Normal,100.0", "Normal,90.0")).unwrap();
    assert_eq!(igar().arg("report").arg(&out).output().unwrap().status.code(), Some(3));
}

#[test]
fn config_file_with_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "rollouts = 1\nintervention = true\nsuites = [{ generate = \"object\", cases = 1, seed = 4 }]\n").unwrap();
    let o = igar().arg("run").arg("--config").arg(&cfg).args(["--no-igar", "--out"]).arg(dir.path().join("o")).output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    // the flag wins: without recalibration every variant is a fake success
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.lines().skip(1).all(|l| l.split(',').nth(2) == Some("100.0")), "{table}");
}

#[test]
fn output_directory_defaults_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "rollouts = 1\nsuites = [{ generate = \"goal\", cases = 1 }]\n").unwrap();
    let st = igar().arg("run").arg("--config").arg(&cfg).env("IGAR_OUT_DIR", dir.path().join("env")).status().unwrap();
    assert!(st.success());
    assert!(dir.path().join("env/manifest.json").is_file());
}

#[test]
fn configuration_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "rollouts = 0\n").unwrap();
    assert_eq!(igar().arg("run").arg("--config").arg(&bad).output().unwrap().status.code(), Some(1));
    fs::write(&bad, "nonsense = true\n").unwrap();
    assert_eq!(igar().arg("run").arg("--config").arg(&bad).output().unwrap().status.code(), Some(1));
    let missing = igar().args(["run", "--suite", "/nonexistent/suite.json"]).output().unwrap();
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("/nonexistent/suite.json"));
    assert_eq!(igar().args(["run", "--weights", "/nonexistent.bin"]).output().unwrap().status.code(), Some(1));
}

#[test]
fn sweep_and_heatmap_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "rollouts = 1\nsuites = [{ generate = \"spatial\", cases = 1, seed = 1 }]\n").unwrap();
    let o = igar()
        .arg("sweep")
        .arg("--config")
        .arg(&cfg)
        .args(["--axis", "rho", "--values", "0.2,0.4", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(dir.path().join("sweep_rho.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 2 * 5);

    let o = igar()
        .arg("heatmap")
        .arg("--config")
        .arg(&cfg)
        .args(["--igar", "--case", "spatial-000", "--variant", "V2", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("heatmaps/spatial-000/V2/tokens.json").is_file());
    let o = igar().arg("heatmap").arg("--config").arg(&cfg).args(["--case", "nope", "--out"]).arg(dir.path()).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_saves_loadable_weights() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("policy.bin");
    let st = igar().args(["train", "--scenes", "20", "--epochs", "2", "--out"]).arg(&w).status().unwrap();
    assert!(st.success());
    let o = igar()
        .args(["run", "--rollouts", "1", "--weights"])
        .arg(&w)
        .arg("--out")
        .arg(dir.path().join("o"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
}
