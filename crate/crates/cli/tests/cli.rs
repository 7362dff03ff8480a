use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "vae.steps=20",
    "vae.hidden=[8]",
    "vae.latent_dim=3",
    "policy.steps=20",
    "policy.hidden=[8]",
    "policy.modes=2",
    "policy.var_scale=0",
    "env.n_relevant=4",
    "env.n_adversarial=4",
    "env.n_task_demos=2",
    "env.n_eval_episodes=4",
    "env.episodes_per_round=2",
];

fn behret(out: &Path, args: &[&str], extra: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_behret"));
    cmd.arg("--out").arg(out);
    for s in TINY.iter().chain(extra) {
        cmd.args(["--set", s]);
    }
    cmd.args(args).output().expect("spawn behret")
}

fn ok(o: &Output) -> String {
    assert!(
        o.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn staged_commands_produce_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(&behret(out, &["gen-data"], &[]));
    ok(&behret(out, &["train-embedder"], &[]));
    let text = ok(&behret(out, &["retrieve"], &[]));
    assert!(text.contains("precision"));
    ok(&behret(out, &["train-policy"], &[]));
    let text = ok(&behret(out, &["evaluate"], &[]));
    assert!(text.starts_with("success rate"));
    for f in [
        "config.json",
        "prior.jsonl",
        "task.jsonl",
        "embedder.json",
        "embedder.bin",
        "scores.csv",
        "separation.csv",
        "retrieved.jsonl",
        "policy.json",
        "policy.bin",
        "eval.csv",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
}

#[test]
fn pipeline_prints_metrics_header() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&behret(dir.path(), &["--seed", "3", "pipeline"], &["method=mixture"]));
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "seed,method,delta,n_retrieved,fraction_retrieved,precision,recall,success_rate,wall_seconds"
    );
    assert!(lines.next().unwrap().starts_with("3,mixture,"));
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(csv.starts_with("seed,method,delta,"));
}

#[test]
fn sweep_separation_and_interventions() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&behret(dir.path(), &["sweep-delta", "--deltas", "0.5,1.0"], &[]));
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().last().unwrap().contains(",1,0,0.0000,"));

    let text = ok(&behret(dir.path(), &["separation"], &[]));
    assert!(text.starts_with("timestep,label,mean_normalized_score,count"));
    assert!(text.contains(",A,") && text.contains(",B,"));

    let text = ok(&behret(dir.path(), &["interventions", "--rounds", "1"], &["method=task_only"]));
    assert_eq!(text.lines().count(), 3);
    assert!(dir.path().join("interventions.csv").exists());
}

#[test]
fn failures_exit_nonzero_with_stage() {
    let dir = tempfile::tempdir().unwrap();
    let o = behret(dir.path(), &["pipeline"], &["no.such.key=1"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("stage `config`"));

    let o = behret(dir.path(), &["evaluate", "--policy", "/nonexistent/policy.json"], &[]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("stage `policy`"));

    let missing = dir.path().join("missing.jsonl");
    let o = behret(dir.path(), &["pipeline"], &[&format!("paths.prior={}", missing.display())]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("stage `data`"));
}
