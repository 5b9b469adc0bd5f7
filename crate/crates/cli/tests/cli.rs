use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ndo-ness"))
}

fn write_config(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

const SMALL: &str = "model = \"B\"\nn_sites = 3\nseed = 1\nn_samples = 200\nn_diagonal_samples = 400\nmax_iterations = 12\neval_every = 4\ncheckpoint_every = 4\n";

#[test]
fn run_then_resume_then_compare_then_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "c.toml", SMALL);
    let out_a = tmp.path().join("a");
    let out_b = tmp.path().join("b");

    let a = bin().args(["run", config.to_str().unwrap(), "--exact-sums", "--output", out_a.to_str().unwrap()]).output().unwrap();
    let summary = stdout_json(&a);
    assert_eq!(summary["iterations"], 12);
    assert_eq!(summary["exact_sums"], true);

    let half = bin()
        .args(["run", config.to_str().unwrap(), "--exact-sums", "--max-iter", "8", "--output", out_b.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(stdout_json(&half)["iterations"], 8);
    let rest =
        bin().args(["run", config.to_str().unwrap(), "--exact-sums", "--resume", "--output", out_b.to_str().unwrap()]).output().unwrap();
    let resumed = stdout_json(&rest);
    assert_eq!(resumed["final_cost"], summary["final_cost"]);

    let table = bin().args(["compare", out_a.to_str().unwrap(), out_b.to_str().unwrap()]).output().unwrap();
    assert!(table.status.success());
    let text = String::from_utf8(table.stdout).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.starts_with("run,model,n_sites"));

    let ck = out_a.join("checkpoint.bin");
    let exact = bin().args(["exact", config.to_str().unwrap(), "--checkpoint", ck.to_str().unwrap()]).output().unwrap();
    let report = stdout_json(&exact);
    assert_eq!(report["checkpoint_fidelity"], summary["fidelity"]);
    assert!(report["residual"].as_f64().unwrap() < 1e-10);
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "c.toml", SMALL);
    let run = |seed: &str, dir: &str| {
        let out = tmp.path().join(dir);
        stdout_json(
            &bin()
                .args(["run", config.to_str().unwrap(), "--max-iter", "3", "--seed", seed, "--output", out.to_str().unwrap()])
                .output()
                .unwrap(),
        )
    };
    let (a, b, c) = (run("7", "x"), run("7", "y"), run("8", "z"));
    assert_eq!(a["seed"], 7);
    assert_eq!(a["final_cost"], b["final_cost"]);
    assert_ne!(a["final_cost"], c["final_cost"]);
}

#[test]
fn configuration_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = bin().args(["run", tmp.path().join("nope.toml").to_str().unwrap()]).output().unwrap();
    assert_eq!(missing.status.code(), Some(1));

    let unknown = write_config(tmp.path(), "u.toml", "n_sites = 3\nlearning_rat = 0.1\n");
    assert_eq!(bin().args(["run", unknown.to_str().unwrap()]).output().unwrap().status.code(), Some(1));

    let invalid = write_config(tmp.path(), "i.toml", "n_sites = 3\nbeta_rw = 1.5\n");
    assert_eq!(bin().args(["run", invalid.to_str().unwrap()]).output().unwrap().status.code(), Some(1));

    assert_eq!(bin().args(["compare"]).output().unwrap().status.code(), Some(1));
    assert_eq!(bin().args(["frobnicate"]).output().unwrap().status.code(), Some(1));
    assert_eq!(bin().arg("--help").output().unwrap().status.code(), Some(0));
}

#[test]
fn incompatible_runs_are_refused_unless_mixed() {
    let tmp = tempfile::tempdir().unwrap();
    let c3 = write_config(tmp.path(), "c3.toml", SMALL);
    let c4 = write_config(tmp.path(), "c4.toml", &SMALL.replace("n_sites = 3", "n_sites = 4"));
    let (d3, d4) = (tmp.path().join("d3"), tmp.path().join("d4"));
    for (c, d) in [(&c3, &d3), (&c4, &d4)] {
        let out =
            bin().args(["run", c.to_str().unwrap(), "--exact-sums", "--max-iter", "2", "--output", d.to_str().unwrap()]).output().unwrap();
        assert!(out.status.success());
    }
    let dirs = [d3.to_str().unwrap(), d4.to_str().unwrap()];
    assert_eq!(bin().arg("compare").args(dirs).output().unwrap().status.code(), Some(1));
    assert!(bin().arg("compare").args(dirs).arg("--length-sweep").output().unwrap().status.success());
    assert!(bin().arg("compare").args(dirs).arg("--allow-mixed").output().unwrap().status.success());
}
