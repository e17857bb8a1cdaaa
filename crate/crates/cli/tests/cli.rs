use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seeds = [1]

[data]
universe_speakers = 30
train_speakers = 20
eval_speakers = 10
train_utterances_per_speaker = 4
teacher_utterances_per_speaker = 6
target_trials = 60
nontarget_trials = 60

[teacher]
dims = [32, 16]
[teacher.train]
epochs = 2

[student]
dims = [16, 16]
[student.train]
epochs = 1

[ablation]
gammas = [2.0]

[sweep]
budget = 40
speaker_counts = [10, 20]
"#;

fn dkd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dkd"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("DKD_OUT")
        .args(args)
        .output()
        .expect("binary runs")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    dir
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn gen_data_is_byte_reproducible() {
    let dir = setup();
    for out in ["a", "b"] {
        let o = dkd(dir.path(), &["--config", "small.toml", "--out", out, "gen-data"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["data/train.tsv", "data/teacher_train.tsv", "data/eval.tsv", "data/trials.tsv", "manifest-gen-data.json"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn config_errors_exit_with_code_2() {
    let dir = setup();
    fs::write(dir.path().join("bad.toml"), "[data]\nlatent = 3\n").unwrap();
    let o = dkd(dir.path(), &["--config", "bad.toml", "gen-data"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("latent"), "{}", stderr(&o));

    fs::write(dir.path().join("bad.toml"), "[student.train]\nmomentum = 1.5\n").unwrap();
    let o = dkd(dir.path(), &["--config", "bad.toml", "--out", "x", "sweep-speakers"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("student.train.momentum"), "{}", stderr(&o));
}

#[test]
fn distill_without_teacher_exits_with_code_3() {
    let dir = setup();
    let o = dkd(dir.path(), &["--config", "small.toml", "--out", "o", "distill", "--mode", "dkd"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("train-teacher"), "{}", stderr(&o));
}

#[test]
fn report_rejects_empty_results() {
    let dir = setup();
    fs::write(dir.path().join("empty.csv"), "").unwrap();
    let o = dkd(dir.path(), &["--out", "r", "report", "empty.csv"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("empty input"), "{}", stderr(&o));
}

#[test]
fn ablation_runs_four_arms_and_reports() {
    let dir = setup();
    let base = ["--config", "small.toml", "--out", "o"];
    let o = dkd(dir.path(), &[&base[..], &["train-teacher"]].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    let o = dkd(dir.path(), &[&base[..], &["ablate-gamma"]].concat());
    assert!(o.status.success(), "{}", stderr(&o));

    let csv = fs::read_to_string(dir.path().join("o/ablation.csv")).unwrap();
    let arms: Vec<&str> = csv
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(arms, ["none", "cosine_embedding", "conventional_kld", "dkd_gamma_2"]);

    let o = dkd(dir.path(), &["--out", "o/report", "report", "o/ablation.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let md = String::from_utf8(o.stdout).unwrap();
    assert!(md.contains("dkd_gamma_2"), "{md}");
    assert!(dir.path().join("o/report/report.md").exists());
}

#[test]
fn dkd_out_sets_the_default_output_directory() {
    let dir = setup();
    let o = Command::new(env!("CARGO_BIN_EXE_dkd"))
        .current_dir(dir.path())
        .env("DKD_OUT", "from-env")
        .env("RUST_LOG", "warn")
        .args(["--config", "small.toml", "gen-data"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("from-env/data/trials.tsv").exists());
    assert!(!dir.path().join("runs").exists());
}

#[test]
fn eval_scores_a_checkpoint() {
    let dir = setup();
    let base = ["--config", "small.toml", "--out", "o"];
    assert!(dkd(dir.path(), &[&base[..], &["train-teacher"]].concat()).status.success());
    let o = dkd(
        dir.path(),
        &["--config", "small.toml", "--out", "e", "eval", "--checkpoint", "o/teacher/model.ckpt", "--scores"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let json = String::from_utf8(o.stdout).unwrap();
    assert!(json.contains("\"eer\""), "{json}");
    let scores = fs::read_to_string(dir.path().join("e/scores.tsv")).unwrap();
    assert!(scores.lines().count() >= 120);
}
