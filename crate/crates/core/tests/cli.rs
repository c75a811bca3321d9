//! End-to-end runs of the `fpc` binary.

use std::fs;
use std::process::Command;

const CONFIG: &str = r#"
pipeline = "forward"
seed = 5

[grid]
kind = "desk1d"
nodes = 31

[time]
nodes = 16
horizon = 1.0

[problem]
s = 0.5
q = "0.1*(1 + x*t)"
exterior = "exp(-4*(x+2.4)^2)*ind_w1"

[dn]
node_stride = 2
slot_stride = 2
"#;

fn fpc(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_fpc")).args(args).output().expect("binary runs")
}

#[test]
fn subcommands_write_outputs_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, CONFIG).unwrap();
    for (cmd, table) in [("assemble", "eigenvalues.csv"), ("forward", "solution.csv"), ("adjoint", "adjoint.csv"), ("dn", "dn.csv")] {
        let out = dir.path().join(cmd);
        let o = fpc(&[cmd, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "9"]);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(out.join(table).exists(), "{cmd} wrote no {table}");
        let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["pipeline"], cmd);
        assert_eq!(manifest["seed"], 9);
        assert_eq!(manifest["status"], "ok");
    }
}

#[test]
fn invalid_config_fails_with_key_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, CONFIG.replace("s = 0.5", "s = 0.4\nb = [\"0.2\"]")).unwrap();
    let o = fpc(&["forward", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("problem.b"), "{err}");
}
