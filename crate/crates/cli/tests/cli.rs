use std::path::Path;
use std::process::Command;

use coco_cli::commands::{self, CONFIG_ECHO};
use coco_cli::RunConfig;
use cocolora_core::checkpoint;
use cocolora_core::data::{kfold_split, load_jsonl, read_meta};
use cocolora_core::{Family, Model};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cocolora"))
}

fn run(dir: &Path, args: &[&str]) -> (i32, String, String) {
    let out = bin().current_dir(dir).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn small(extra: &[(&str, &str)]) -> RunConfig {
    let mut base = vec![
        ("data.n_samples", "120"),
        ("data.d_text", "8"),
        ("data.d_a", "4"),
        ("model.depth", "2"),
        ("model.rank", "2"),
        ("model.context_dim", "4"),
        ("train.epochs", "2"),
    ];
    base.extend_from_slice(extra);
    let overrides: Vec<(String, String)> = base.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    RunConfig::load(None, &overrides).unwrap()
}

#[test]
fn generate_data_writes_n_lines_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = run(dir.path(), &["generate-data", "--out", "a", "--data.n_samples=100"]);
    assert_eq!(code, 0, "{err}");
    run(dir.path(), &["generate-data", "--out", "b", "--data.n_samples=100"]);
    let a = std::fs::read(dir.path().join("a/data.jsonl")).unwrap();
    assert_eq!(a.iter().filter(|&&c| c == b'\n').count(), 100);
    assert_eq!(a, std::fs::read(dir.path().join("b/data.jsonl")).unwrap());
    assert_eq!(
        std::fs::read(dir.path().join("a/meta.csv")).unwrap(),
        std::fs::read(dir.path().join("b/meta.csv")).unwrap()
    );

    let mut ds = load_jsonl(&dir.path().join("a/data.jsonl"), Some(2)).unwrap();
    ds.attach_meta(&read_meta(&dir.path().join("a/meta.csv")).unwrap())
        .unwrap();
    assert_eq!(ds.len(), 100);
    assert!(ds.has_audio() && ds.has_meta());
    for s in &ds.samples {
        assert!(s.y < 2);
        assert!(s.x.iter().chain(s.a.as_ref().unwrap()).all(|v| v.is_finite()));
        assert!((0.0..=0.5).contains(&s.meta.unwrap()));
    }
    // Reloaded data matches a fresh draw bit for bit.
    let cfg = RunConfig::load(None, &[("data.n_samples".into(), "100".into())]).unwrap();
    let fresh = commands::generate_data(&cfg).unwrap();
    assert_eq!(ds, fresh);
}

#[test]
fn zero_epochs_checkpoint_equals_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(&[("train.epochs", "0"), ("model.family", "coco")]);
    let (model, history) = commands::train_to(&cfg, dir.path()).unwrap();
    assert!(history.is_empty());
    let data = commands::load_data(&cfg, 0).unwrap();
    let init = Model::new(commands::model_config(&cfg, Family::Coco, &data, 0), 0).unwrap();
    assert_eq!(model, init);
    assert_eq!(checkpoint::load(&dir.path().join("model.cclr")).unwrap(), init);
    let hist = std::fs::read_to_string(dir.path().join("history.csv")).unwrap();
    assert_eq!(hist, "epoch,loss,nll,kl\n");
}

#[test]
fn train_is_reproducible_and_echoes_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(&[("model.family", "clora"), ("train.epochs", "3")]);
    commands::train_to(&cfg, &dir.path().join("a")).unwrap();
    commands::train_to(&cfg, &dir.path().join("b")).unwrap();
    for f in ["model.cclr", "history.csv", CONFIG_ECHO] {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(f)).unwrap(),
            std::fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    let hist = std::fs::read_to_string(dir.path().join("a/history.csv")).unwrap();
    assert_eq!(hist.lines().count(), 4);

    // The echo reproduces the run on its own.
    let echo = dir.path().join("a").join(CONFIG_ECHO);
    let again = RunConfig::load(Some(&echo), &[]).unwrap();
    assert_eq!(again.echo(), cfg.echo());

    let bytes = std::fs::read(dir.path().join("a/model.cclr")).unwrap();
    let model = checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(checkpoint::to_bytes(&model), bytes);
}

#[test]
fn compare_row_counts_and_shared_splits() {
    let cfg = small(&[
        ("eval.families", "lora"),
        ("eval.folds", "2"),
        ("eval.seeds", "0"),
        ("train.epochs", "1"),
    ]);
    let report = commands::compare(&cfg).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert_eq!(report.summaries.len(), 1);
    let csv = report.to_csv();
    assert_eq!(csv.lines().count(), 1 + 2 + 1);

    let cfg = small(&[
        ("eval.families", "lora,coco,fusion"),
        ("eval.folds", "3"),
        ("eval.seeds", "4,5"),
        ("train.epochs", "1"),
    ]);
    let report = commands::compare(&cfg).unwrap();
    assert_eq!(report.rows.len(), 3 * 3 * 2);
    for (seed, folds) in &report.splits {
        assert_eq!(*folds, kfold_split(120, 3, *seed).unwrap());
    }
    // Every (fold, seed) cell was run for every family.
    for r in report.rows.iter().filter(|r| r.family == Family::Lora) {
        for f in [Family::Coco, Family::Fusion] {
            assert!(report
                .rows
                .iter()
                .any(|o| o.family == f && o.fold == r.fold && o.seed == r.seed));
        }
    }
    assert!(report.to_text().contains("fusion"));
}

#[test]
fn compare_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(&[("eval.families", "blob,coco"), ("eval.folds", "2"), ("eval.seeds", "1")]);
    commands::compare_to(&cfg, &dir.path().join("a")).unwrap();
    commands::compare_to(&cfg, &dir.path().join("b")).unwrap();
    for f in ["compare.csv", "compare.txt"] {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(f)).unwrap(),
            std::fs::read(dir.path().join("b").join(f)).unwrap()
        );
    }
}

#[test]
fn eval_writes_json_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(&[("model.family", "coco")]);
    commands::train_to(&cfg, dir.path()).unwrap();
    let s = commands::eval_to(&cfg, &dir.path().join("model.cclr"), &dir.path().join("e")).unwrap();
    assert_eq!(s.n, 120);
    assert_eq!(s.per_bucket.len(), 5);
    let csv = std::fs::read_to_string(dir.path().join("e/eval.csv")).unwrap();
    assert!(csv.starts_with("metric,value\nn,120\nauc,"));
    assert!(dir.path().join("e/eval.json").exists());
    assert!(dir.path().join("e/buckets.csv").exists());
}

#[test]
fn grad_check_passes_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "grad-check",
        "--model.depth=2",
        "--model.rank=4",
        "--model.context_dim=8",
        "--data.n_samples=20",
    ];
    let (code, stdout, err) = run(dir.path(), &[&args[..], &["--out", "a"]].concat());
    assert_eq!(code, 0, "{err}");
    assert_eq!(stdout.lines().count(), 5);
    run(dir.path(), &[&args[..], &["--out", "b"]].concat());
    assert_eq!(
        std::fs::read(dir.path().join("a/grad_check.csv")).unwrap(),
        std::fs::read(dir.path().join("b/grad_check.csv")).unwrap()
    );
}

#[test]
fn grad_check_failure_exits_with_numeric_code() {
    let dir = tempfile::tempdir().unwrap();
    // No real gradient meets a zero-width tolerance, so every family fails
    // and the report names the worst coordinate.
    let (code, _, err) = run(
        dir.path(),
        &[
            "grad-check",
            "--grad_check.tolerance=1e-300",
            "--eval.families=coco",
            "--data.n_samples=10",
        ],
    );
    assert_eq!(code, 4, "{err}");
    assert!(
        err.contains("coco: max relative error") && err.contains("analytic"),
        "{err}"
    );
    assert!(dir.path().join("out/grad_check.csv").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = run(dir.path(), &["train", "--train.lr=0", "--model.rank=99", "--nope.x=1"]);
    assert_eq!(code, 2);
    assert_eq!(err.lines().count(), 4, "{err}");

    std::fs::write(
        dir.path().join("bad.jsonl"),
        "{\"x\":[1.0],\"y\":0}\n{\"x\":[1.0],\"y\":7}\n",
    )
    .unwrap();
    let (code, _, err) = run(dir.path(), &["train", "--data.input=bad.jsonl"]);
    assert_eq!(code, 3);
    assert!(err.contains("bad.jsonl:2"), "{err}");

    std::fs::write(
        dir.path().join("text.jsonl"),
        "{\"x\":[1.0,2.0,3.0],\"y\":0}\n{\"x\":[0.5,2.0,1.0],\"y\":1}\n",
    )
    .unwrap();
    let (code, _, err) = run(
        dir.path(),
        &[
            "train",
            "--data.input=text.jsonl",
            "--model.family=coco",
            "--model.rank=2",
        ],
    );
    assert_eq!(code, 3, "{err}");

    let (code, _, _) = run(
        dir.path(),
        &[
            "train",
            "--data.input=text.jsonl",
            "--model.family=lora",
            "--model.rank=2",
            "--train.lr=1e300",
        ],
    );
    assert_eq!(code, 4);

    let (code, _, _) = run(dir.path(), &["--help"]);
    assert_eq!(code, 0);
}
