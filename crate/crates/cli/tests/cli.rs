use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn labelnoise(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_labelnoise")).current_dir(dir).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = labelnoise(dir, args);
    assert_eq!(code(&o), 0, "{args:?}\nstderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

const SMALL_EXPERIMENT: &str = r#"
name = "small"
trials = 2
methods = ["baseline", "forward", "revision_alpha", "anchor_estimate"]
true_t = "circulant:0.3"

[dataset]
source = "blobs"
classes = 4
dim = 6
n_per_class = 60
noise_sigma = 1.0
seed = 5
test_per_class = 30
class_means = [
  [4.0, 0.0, 0.0, 0.0, 0.0, 0.0],
  [0.0, 4.0, 0.0, 0.0, 0.0, 0.0],
  [0.0, 0.0, 4.0, 0.0, 0.0, 0.0],
  [0.0, 0.0, 0.0, 4.0, 0.0, 0.0],
]

[train]
epochs = 4

[revision]
epochs = 2
"#;

#[test]
fn exit_codes_follow_the_contract() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&labelnoise(d, &["--help"])), 0);
    assert_eq!(code(&labelnoise(d, &["bogus"])), 1);
    assert_eq!(code(&labelnoise(d, &["eval"])), 1);
    assert_eq!(code(&labelnoise(d, &["inject", "--data", "x.txt", "--matrix", "not-a-preset"])), 1);
    assert_eq!(code(&labelnoise(d, &["experiment", "--workers", "0"])), 1);
    let missing = labelnoise(d, &["eval", "--model", "missing.txt", "--data", "missing.txt"]);
    assert_eq!(code(&missing), 2);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("missing.txt"));
    fs::write(d.join("bad.toml"), "trials = \"many\"").unwrap();
    assert_eq!(code(&labelnoise(d, &["experiment", "--config", "bad.toml"])), 1);
}

#[test]
fn single_model_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-data", "--n-per-class", "60", "--dim", "6", "--separation", "8", "-o", "clean.txt"]);
    let clean = fs::read_to_string(d.join("clean.txt")).unwrap();
    assert!(clean.starts_with("240 6 4\n"));
    assert!(clean.lines().nth(1).unwrap().starts_with("0,-,"));

    ok(d, &["inject", "--data", "clean.txt", "--matrix", "circulant:0.3", "-o", "noisy.txt", "--seed", "2"]);
    let noisy = fs::read_to_string(d.join("noisy.txt")).unwrap();
    assert!(!noisy.lines().nth(1).unwrap().split(',').nth(1).unwrap().contains('-'));

    // Training needs noisy labels.
    assert_eq!(code(&labelnoise(d, &["train", "--data", "clean.txt"])), 1);
    let out = ok(d, &["train", "--data", "noisy.txt", "--loss", "reweight", "--matrix", "circulant:0.3", "--epochs", "3", "--model", "m.txt"]);
    assert!(out.starts_with("loss=reweight"));
    let history = fs::read_to_string(d.join("m.history.csv")).unwrap();
    assert_eq!(history.lines().next().unwrap(), "epoch,train_loss,val_loss,val_acc");
    assert!(fs::read_to_string(d.join("m.txt")).unwrap().starts_with("mlp "));

    let eval = ok(d, &["eval", "--model", "m.txt", "--data", "clean.txt"]);
    assert!(eval.starts_with("test_loss=") && eval.contains("test_acc="));

    let t = ok(d, &["estimate-t", "--model", "m.txt", "--data", "noisy.txt"]);
    assert_eq!(t.lines().count(), 4);
    for line in t.lines() {
        let sum: f64 = line.split(' ').map(|x| x.parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-6, "{line}");
    }
}

#[test]
fn matrix_validation_can_be_bypassed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-data", "--classes", "2", "--dim", "2", "--n-per-class", "20", "-o", "clean.txt"]);
    ok(d, &["inject", "--data", "clean.txt", "--matrix", "identity@2", "-o", "noisy.txt"]);
    fs::write(d.join("loose.txt"), "0.9 0.2\n0.1 0.9\n").unwrap();
    let strict = labelnoise(d, &["train", "--data", "noisy.txt", "--loss", "forward", "--matrix", "loose.txt", "--epochs", "1"]);
    assert_eq!(code(&strict), 2);
    assert!(String::from_utf8_lossy(&strict.stderr).contains("row 0"));
    ok(d, &["train", "--data", "noisy.txt", "--loss", "forward", "--matrix", "loose.txt", "--epochs", "1", "--no-validate"]);
}

#[test]
fn revise_writes_its_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-data", "--n-per-class", "40", "--dim", "6", "--separation", "8", "-o", "clean.txt"]);
    ok(d, &["inject", "--data", "clean.txt", "--matrix", "circulant:0.2", "-o", "noisy.txt"]);
    fs::write(d.join("cfg.toml"), "[train]\nepochs = 3\n").unwrap();
    let out = ok(d, &["revise", "--config", "cfg.toml", "--data", "noisy.txt", "--mode", "softmax", "--epochs", "2", "--out", "rev"]);
    assert!(out.starts_with("mode=softmax"));
    for f in ["revised_model.txt", "t_hat.txt", "delta.txt", "t_final.txt", "revision_history.csv"] {
        assert!(d.join("rev").join(f).exists(), "{f}");
    }
    assert_eq!(code(&labelnoise(d, &["revise", "--data", "noisy.txt", "--model", "rev/revised_model.txt"])), 1);
}

#[test]
fn experiment_report_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("exp.toml"), SMALL_EXPERIMENT).unwrap();
    ok(d, &["experiment", "--config", "exp.toml", "--out", "a", "--workers", "2"]);
    ok(d, &["experiment", "--config", "exp.toml", "--out", "b", "--workers", "1"]);

    let strip = |p: &Path| -> Vec<String> {
        fs::read_to_string(p).unwrap().lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect()
    };
    let a = strip(&d.join("a/trials.csv"));
    assert_eq!(a, strip(&d.join("b/trials.csv")));
    assert_eq!(a[0], "method,dataset,seed,test_loss,test_acc,rre");
    assert_eq!(a.len(), 1 + 4 * 2);
    for f in ["summary.csv", "test_acc.svg", "test_loss.svg", "rre.svg", "config.toml", "true_t.txt", "matrices/anchor_estimate_seed0.txt"] {
        assert!(d.join("a").join(f).exists(), "{f}");
    }
    let meta = fs::read_to_string(d.join("a/config.toml")).unwrap();
    assert!(meta.contains("published revision learning rate: 0.0000005"));

    let summary = fs::read_to_string(d.join("a/summary.csv")).unwrap();
    let rebuilt = ok(d, &["report", "a", "--out", "r"]);
    assert_eq!(rebuilt, summary);
    assert_eq!(fs::read_to_string(d.join("r/summary.csv")).unwrap(), summary);
}
