use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
n_p = 2
n_min = 2
n_max = 2
t_tm = 300
t_ego = 200
pretrain_steps = 300
eval_episodes = 4
test_episodes = 4
meta_episodes_per_head = 1
expansion_episodes = 4

[learner]
hidden_dims = [16]
head_hidden_dims = [8]
batch_episodes = 4
"#;

fn macop(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_macop"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn train_evaluate_and_analyze_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let (run_a, run_b) = (tmp.path().join("a"), tmp.path().join("b"));
    let s = stdout(&macop(&["train", "--algo", "macop", "--config", p(&cfg), "--seed", "1", "--out", p(&run_a)]));
    assert!(s.contains("\"algo\": \"macop\""));
    macop(&["train", "--algo", "finetune", "--config", p(&cfg), "--out", p(&run_b)]);
    for f in ["state.json", "ego.json", "log.csv", "config.toml", "alpha.json", "run.json"] {
        assert!(run_a.join(f).exists(), "{f}");
    }

    let csv = tmp.path().join("eval.csv");
    let s = stdout(&macop(&["evaluate", "--ego", p(&run_a), "--evalset", p(&run_a), p(&run_b), "--out", p(&csv)]));
    assert!(s.starts_with("grand mean"));
    assert!(fs::read_to_string(&csv).unwrap().lines().last().unwrap().starts_with("grand_mean,"));

    let s = stdout(&macop(&["analyze", "bwt", "--run", p(&run_a)]));
    assert!(s.starts_with("BWT "));
    let s = stdout(&macop(&["analyze", "bwt", "--run", p(&run_a), "--replay", "finetune"]));
    assert!(s.starts_with("BWT "));
    let xp = tmp.path().join("xp.csv");
    let s = stdout(&macop(&["analyze", "crossplay", "--run", p(&run_a), "--episodes", "2", "--out", p(&xp)]));
    assert!(s.contains("ratio"));
    assert!(fs::read_to_string(&xp).unwrap().starts_with("teammate\\partner"));

    // resuming a finished run leaves it unchanged
    let before = fs::read_to_string(run_a.join("ego.json")).unwrap();
    macop(&["resume", "--dir", p(&run_a)]);
    assert_eq!(fs::read_to_string(run_a.join("ego.json")).unwrap(), before);
}

#[test]
fn rank_sum_and_theory_commands() {
    let s = stdout(&macop(&["analyze", "rank-sum", "--a", "0.61", "0.72", "0.55", "0.80", "0.66", "--b", "0.41", "0.52", "0.49", "0.38", "0.60"]));
    assert!(s.contains("rank_sum_a 39") && s.contains("verdict +"), "{s}");
    let s = stdout(&macop(&["analyze", "theory", "--pairs", "20", "--samples", "200"]));
    assert!(!s.is_empty());
}

#[test]
fn bad_input_fails_with_message() {
    let out = Command::new(env!("CARGO_BIN_EXE_macop"))
        .args(["train", "--algo", "nope", "--out", "/tmp/never"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
}
