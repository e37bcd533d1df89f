use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
[corpus]
train_speakers = 12
train_utts = 4
eval_speakers = 4
eval_utts = 3
phones = 12
[asr]
hidden = 32
rank = 8
epochs = 1
train_utts = 2
[ctdnn]
conv_channels = 4,8
td_width = 32
bottleneck = 32
feature_dim = 16
epochs = 1
[ivector]
components = 8
ubm_iterations = 2
kmeans_iterations = 1
tv_rank = 10
tv_iterations = 2
[backend]
lda_dim = 5
plda_iterations = 3
train_utts = 4
";

fn xldv(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xldv"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("XLDV_RUN_DIR")
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tiny(dir: &Path) {
    std::fs::write(dir.join("tiny.ini"), TINY).unwrap();
}

#[test]
fn unknown_key_is_a_config_error() {
    let t = tempfile::tempdir().unwrap();
    std::fs::write(t.path().join("bad.ini"), "[ctdnn]\nepoch = 3\n").unwrap();
    let o = xldv(t.path(), &["--config", "bad.ini", "validate-config"]);
    assert_eq!(o.status.code(), Some(1));
    let e = stderr(&o);
    assert!(e.starts_with("xldv-error kind="), "{e}");
    assert!(e.contains("exit=1"), "{e}");
    assert!(e.contains("ctdnn.epoch") && e.contains("line 2"), "{e}");

    let o = xldv(t.path(), &["--set", "ivector.componets=8", "validate-config"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn validate_config_lists_every_value() {
    let t = tempfile::tempdir().unwrap();
    let o = xldv(t.path(), &["--set", "ctdnn.epochs=2", "validate-config"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("ctdnn.epochs"));
    assert!(out.contains("ivector.tv_rank"));
    assert!(out.contains("backend.lda_dim"));
    let line = out.lines().find(|l| l.contains("ctdnn.epochs")).unwrap();
    assert!(line.contains('2'), "{line}");
}

#[test]
fn bad_usage_exits_one() {
    let t = tempfile::tempdir().unwrap();
    let o = xldv(t.path(), &["no-such-stage"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("kind=usage"));
    let o = xldv(t.path(), &["--set", "ctdnn.epochs=two", "validate-config"]);
    assert_eq!(o.status.code(), Some(1));
    let o = xldv(t.path(), &["--help"]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn missing_input_names_the_file() {
    let t = tempfile::tempdir().unwrap();
    tiny(t.path());
    let o = xldv(t.path(), &["--config", "tiny.ini", "eval"]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("exit=2"), "{e}");
    assert!(e.contains("trials/A-A.tsv"), "{e}");
    let o = xldv(t.path(), &["--config", "tiny.ini", "feats"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("corpus"), "{}", stderr(&o));
}

#[test]
fn run_all_then_rerun_is_up_to_date() {
    let t = tempfile::tempdir().unwrap();
    tiny(t.path());
    let o = xldv(t.path(), &["--config", "tiny.ini", "all"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.lines().filter(|l| l.ends_with("\tran")).count() == 11, "{out}");
    let dir = out.lines().find_map(|l| l.strip_prefix("run-dir\t")).unwrap().to_string();
    let dir = t.path().join(dir);
    let results = std::fs::read_to_string(dir.join("results/results.tsv")).unwrap();
    assert_eq!(results.lines().count(), 10);
    assert!(results.starts_with("System\tMetric\t"));
    assert!(dir.join("run_manifest.json").exists());
    assert!(dir.join("report.txt").exists());

    let o = xldv(t.path(), &["--config", "tiny.ini", "all"]);
    assert_eq!(o.status.code(), Some(0));
    let again = stdout(&o);
    assert_eq!(again.lines().filter(|l| l.ends_with("\tup-to-date")).count(), 11, "{again}");
    assert_eq!(std::fs::read_to_string(dir.join("results/results.tsv")).unwrap(), results);

    // A lone downstream stage reruns only itself.
    std::fs::remove_file(dir.join("results/results.tsv")).unwrap();
    let o = xldv(t.path(), &["--config", "tiny.ini", "eval"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("eval\tran"));
    assert_eq!(std::fs::read_to_string(dir.join("results/results.tsv")).unwrap(), results);
    let o = xldv(t.path(), &["--config", "tiny.ini", "score"]);
    assert!(stdout(&o).contains("score\tup-to-date"));

    // Corrupt model => format error, exit 2.
    std::fs::write(dir.join("models/backend-d-vector.nnck"), b"garbage").unwrap();
    let o = xldv(t.path(), &["--config", "tiny.ini", "score"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn run_dir_depends_on_config() {
    let t = tempfile::tempdir().unwrap();
    let a = stdout(&xldv(t.path(), &["run-dir"]));
    let b = stdout(&xldv(t.path(), &["--seed", "2", "run-dir"]));
    let c = stdout(&xldv(t.path(), &["--run-dir", "elsewhere", "run-dir"]));
    assert_ne!(a, b);
    assert!(a.trim().starts_with("runs"), "{a}");
    assert!(c.trim().starts_with("elsewhere"), "{c}");
}
