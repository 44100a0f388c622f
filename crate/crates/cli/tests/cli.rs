use std::process::Command;

fn socbench() -> Command {
    Command::new(env!("CARGO_BIN_EXE_socbench"))
}

#[test]
fn run_writes_curves_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.toml");
    std::fs::write(
        &config,
        "losses = [\"adjoint-matching\", \"reinforce\"]\noutput = \"unused\"\n\
         [setting]\nsetting = \"lq1d\"\n\
         [train]\niterations = 4\nbatch_size = 8\nsteps = 10\neval_every = 2\neval_batch = 32\n\
         [control]\nhidden = [8]\n",
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = socbench()
        .args(["run", "--config"])
        .arg(&config)
        .arg("--output")
        .arg(&out_dir)
        .args(["--eval-measure", "optimal"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["runs"].as_array().unwrap().len(), 2);
    assert_eq!(manifest["spec"]["train"]["eval_measure"], "optimal");
    let curve = std::fs::read_to_string(out_dir.join("curve_reinforce_0.csv")).unwrap();
    assert!(curve.starts_with("iter,l2_error,l2_error_ema,loss,grad_norm,ess,wall_ms\n"));
    assert_eq!(curve.lines().count(), 4);
}

#[test]
fn log_variance_and_moment_are_equivalent() {
    let out = socbench()
        .args(["equivalence", "--setting", "lq1d", "--pairs", "log-variance:moment", "--m", "2000", "--chunks", "10"])
        .args(["-k", "10", "--hidden", "8"])
        .output()
        .unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}");
    assert!(text.starts_with("PASS log-variance"));
}

#[test]
fn class_pairs_expand_to_every_member_pair() {
    let out = socbench()
        .args(["equivalence", "--setting", "lq1d", "--pairs", "class:IV", "--m", "200", "--chunks", "4"])
        .args(["-k", "5", "--hidden", "4"])
        .output()
        .unwrap();
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 1);
}

#[test]
fn oracle_check_passes_on_the_scalar_lq_problem() {
    let out = socbench()
        .args(["oracle", "--setting", "lq1d", "--check", "--m", "20000", "--steps", "100", "--probes", "4"])
        .output()
        .unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}");
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 4);
}

#[test]
fn variance_prints_one_row_per_loss() {
    let out = socbench()
        .args(["variance", "--setting", "lq1d", "--losses", "adjoint-matching,reinforce"])
        .args(["--m-per-sample", "8", "--samples", "5", "-k", "5", "--hidden", "4"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 3);
}

#[test]
fn unknown_losses_are_usage_errors() {
    let out = socbench().args(["variance", "--losses", "bogus"]).output().unwrap();
    assert!(!out.status.success());
    let out = socbench().args(["equivalence", "--pairs", "class:VII"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
