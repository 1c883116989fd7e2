//! End-to-end runs of the `brca` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn brca(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_brca"))
        .args(args)
        .env_remove("BRCA_OUTPUT_ROOT")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// A temp dir holding a small train/test corpus pair.
fn workspace() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("train.txt"),
        "the cat sat on the mat\nA short line.\nbytes all the way down\n",
    )
    .unwrap();
    fs::write(dir.path().join("test.txt"), "held out text\nanother one\n").unwrap();
    dir
}

fn path_arg(p: &Path) -> String {
    p.to_str().unwrap().to_owned()
}

/// `train` on the workspace corpus with a few tiny epochs.
fn train(dir: &Path, out: &Path, extra: &[&str]) -> Output {
    let train = format!("data.train={}", path_arg(&dir.join("train.txt")));
    let test = format!("data.test={}", path_arg(&dir.join("test.txt")));
    let out = path_arg(out);
    let mut args = vec![
        "--out", &out, "-o", &train, "-o", &test, "-o", "model.n=2", "-o", "train.epochs=2",
        "-o", "train.steps_per_epoch=2", "-o", "train.lr0=0.01",
    ];
    args.extend_from_slice(extra);
    args.push("train");
    brca(&args)
}

fn files_with_extension(dir: &Path, ext: &str) -> Vec<PathBuf> {
    let mut found = Vec::new();
    let Ok(entries) = fs::read_dir(dir) else { return found };
    for e in entries.flatten() {
        let p = e.path();
        if p.is_dir() {
            found.extend(files_with_extension(&p, ext));
        } else if p.extension().is_some_and(|x| x == ext) {
            found.push(p);
        }
    }
    found
}

#[test]
fn inspect_reports_depth_and_recursions() {
    let o = brca(&["-o", "model.n=8", "inspect", "--length", "1023"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("padded length          1024"), "{text}");
    assert!(text.contains("recursions             8"), "{text}");
    assert!(text.contains("parameterized layers   160"), "{text}");
    assert!(text.contains("executed layers        161"), "{text}");

    let o = brca(&["-o", "model.n=2", "inspect", "--length", "1023"]);
    assert!(stdout(&o).contains("parameterized layers   40"));

    let o = brca(&["inspect", "--length", "3"]);
    let text = stdout(&o);
    assert!(text.contains("padded length          4"), "{text}");
    assert!(text.contains("recursions             0"), "{text}");
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(brca(&["inspect", "--length", "0"]).status.code(), Some(1));
    assert_eq!(brca(&["-o", "model.nope=3", "inspect"]).status.code(), Some(1));
    assert_eq!(brca(&["-o", "model.n=3", "inspect"]).status.code(), Some(1));
    assert_eq!(brca(&["no-such-command"]).status.code(), Some(1));
}

#[test]
fn missing_corpus_fails_without_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let missing = format!("data.train={}", path_arg(&dir.path().join("absent.txt")));
    let o = brca(&["--out", &path_arg(&out), "-o", &missing, "-o", "model.n=2", "train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("absent.txt"));
    assert!(files_with_extension(&out, "ckpt").is_empty());
}

#[test]
fn training_writes_artifacts_and_is_deterministic() {
    let dir = workspace();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = train(dir.path(), out, &["--seed", "4"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for name in ["config.toml", "manifest.json", "metrics.csv", "latest.ckpt", "model.ckpt"] {
        assert!(a.join(name).is_file(), "missing {name}");
    }
    let metrics = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3, "{metrics}");
    assert_eq!(metrics, fs::read_to_string(b.join("metrics.csv")).unwrap());
    assert_eq!(fs::read(a.join("model.ckpt")).unwrap(), fs::read(b.join("model.ckpt")).unwrap());

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["train_seed"], 4);
    let resolved = fs::read_to_string(a.join("config.toml")).unwrap();
    assert!(resolved.contains("n = 2"), "{resolved}");

    let other = dir.path().join("c");
    assert!(train(dir.path(), &other, &["--seed", "5"]).status.success());
    assert_ne!(metrics, fs::read_to_string(other.join("metrics.csv")).unwrap());
}

#[test]
fn checkpoints_describe_and_evaluate() {
    let dir = workspace();
    let out = dir.path().join("run");
    assert!(train(dir.path(), &out, &[]).status.success());
    let model = out.join("model.ckpt");
    let before = fs::read(&model).unwrap();

    let o = brca(&["checkpoint", &path_arg(&model)]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("kind = brca"), "{}", stdout(&o));

    let eval_out = dir.path().join("eval");
    let test = format!("data.test={}", path_arg(&dir.path().join("test.txt")));
    let train_data = format!("data.train={}", path_arg(&dir.path().join("train.txt")));
    let o = brca(&[
        "--out", &path_arg(&eval_out), "-o", &train_data, "-o", &test, "-o", "eval.sample_count=4",
        "eval", "--checkpoint", &path_arg(&model),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!files_with_extension(&eval_out, "json").is_empty());
    assert_eq!(fs::read(&model).unwrap(), before, "input checkpoint was modified");

    let mut corrupt = before.clone();
    let mid = corrupt.len() / 2;
    corrupt[mid] ^= 0x10;
    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, corrupt).unwrap();
    assert_eq!(brca(&["checkpoint", &path_arg(&bad)]).status.code(), Some(2));
}

#[test]
fn resuming_an_epoch_checkpoint_matches_the_full_run() {
    let dir = workspace();
    let full = dir.path().join("full");
    assert!(train(dir.path(), &full, &[]).status.success());

    let tail = dir.path().join("tail");
    let resume = path_arg(&full.join("checkpoints").join("epoch_000.ckpt"));
    let train_data = format!("data.train={}", path_arg(&dir.path().join("train.txt")));
    let o = brca(&["--out", &path_arg(&tail), "-o", &train_data, "train", "--resume", &resume]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read(tail.join("model.ckpt")).unwrap(),
        fs::read(full.join("model.ckpt")).unwrap()
    );
    let last = |p: &Path| fs::read_to_string(p.join("metrics.csv")).unwrap().lines().last().unwrap().to_owned();
    assert_eq!(last(&tail), last(&full));
}
