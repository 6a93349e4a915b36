use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use unlearnlab_core::eval::EvalReport;
use unlearnlab_core::ModelState;

const TINY: &[&str] = &[
    "--model.d_model=8",
    "--model.n_heads=2",
    "--model.n_layers=1",
    "--model.d_ff=16",
    "--model.ctx=64",
    "--batch_size=4",
];

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_unlearnlab"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin()
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn unlearnlab")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        stdout(o),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn corpus(dir: &Path) -> PathBuf {
    ok(&run(
        dir,
        &[
            "synth",
            "--out",
            "d.jsonl",
            "--retain",
            "8",
            "--forget",
            "4",
            "--holdout",
            "4",
            "--eval-general",
            "3",
        ],
    ));
    dir.join("d.jsonl")
}

fn train(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "train-base",
        "--data",
        "d.jsonl",
        "--out",
        out,
        "--epochs=2",
        "--lr=3e-3",
    ];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    run(dir, &args)
}

fn meta(path: &Path) -> serde_json::Value {
    let mut p = path.as_os_str().to_owned();
    p.push(".meta.json");
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn train_base_writes_a_loadable_deterministic_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    ok(&train(dir.path(), "a.ulf", &[]));
    ok(&train(dir.path(), "b.ulf", &[]));
    let a = fs::read(dir.path().join("a.ulf")).unwrap();
    assert_eq!(&a[..4], b"ULF1");
    assert_eq!(a, fs::read(dir.path().join("b.ulf")).unwrap());
    let m = ModelState::load(dir.path().join("a.ulf")).unwrap();
    assert_eq!(m.config().d_model, 8);
    assert!(!m.has_adapters());
    let log = fs::read_to_string(dir.path().join("a.ulf.log.jsonl")).unwrap();
    assert!(log.lines().count() >= 2);
    assert_eq!(meta(&dir.path().join("a.ulf"))["config"]["epochs"], 2);
}

#[test]
fn overrides_beat_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    fs::write(
        dir.path().join("c.json"),
        r#"{"epochs": 7, "alpha": 3.0, "seed": 5}"#,
    )
    .unwrap();
    ok(&train(
        dir.path(),
        "a.ulf",
        &["--config", "c.json", "--seed", "9"],
    ));
    let m = meta(&dir.path().join("a.ulf"));
    assert_eq!(m["config"]["epochs"], 2);
    assert_eq!(m["config"]["seed"], 9);
    assert_eq!(m["config"]["alpha"], 3.0);
}

#[test]
fn unlearn_with_zero_epochs_copies_the_base() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    ok(&train(dir.path(), "base.ulf", &[]));
    let o = run(
        dir.path(),
        &[
            "unlearn",
            "--base",
            "base.ulf",
            "--data",
            "d.jsonl",
            "--out",
            "u.ulf",
            "--epochs=0",
        ],
    );
    ok(&o);
    assert_eq!(
        fs::read(dir.path().join("base.ulf")).unwrap(),
        fs::read(dir.path().join("u.ulf")).unwrap()
    );
}

#[test]
fn unlearn_runs_and_records_the_effective_config() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    ok(&train(dir.path(), "base.ulf", &[]));
    let o = run(
        dir.path(),
        &[
            "unlearn",
            "--base",
            "base.ulf",
            "--data",
            "d.jsonl",
            "--out",
            "u.ulf",
            "--forget_loss=EUL",
            "--use_retain=true",
            "--use_augmentation=true",
            "--epochs=2",
            "--batch_size=4",
        ],
    );
    ok(&o);
    assert!(stdout(&o).contains("forget_obj"));
    let m = meta(&dir.path().join("u.ulf"));
    assert_eq!(m["config"]["forget_loss"], "EUL");
    assert_eq!(m["config"]["use_augmentation"], true);
    assert_ne!(
        fs::read(dir.path().join("base.ulf")).unwrap(),
        fs::read(dir.path().join("u.ulf")).unwrap()
    );
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    ok(&train(dir.path(), "base.ulf", &[]));
    let base = [
        "unlearn", "--base", "base.ulf", "--data", "d.jsonl", "--out", "u.ulf",
    ];
    for extra in [
        &["--bogus=1"][..],
        &["--epochs=many"],
        &["--forget_loss=FOO"],
        &["--lr=-1"],
    ] {
        let mut args = base.to_vec();
        args.extend_from_slice(extra);
        assert_eq!(run(dir.path(), &args).status.code(), Some(1), "{extra:?}");
    }
    assert_eq!(run(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(
        run(dir.path(), &["eval", "--base", "base.ulf"])
            .status
            .code(),
        Some(1)
    );
    assert!(!dir.path().join("u.ulf").exists());
}

#[test]
fn numerical_abort_exits_two_and_keeps_the_log() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    ok(&train(dir.path(), "base.ulf", &[]));
    let o = run(
        dir.path(),
        &[
            "unlearn",
            "--base",
            "base.ulf",
            "--data",
            "d.jsonl",
            "--out",
            "u.ulf",
            "--lr=1e300",
            "--epochs=3",
        ],
    );
    assert_eq!(
        o.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(String::from_utf8_lossy(&o.stderr).contains("numerical abort"));
    assert!(!dir.path().join("u.ulf").exists());
    let log = fs::read_to_string(dir.path().join("u.ulf.log.jsonl")).unwrap();
    assert!(!log.is_empty());
}

#[test]
fn augment_counts_and_passthrough() {
    let dir = tempfile::tempdir().unwrap();
    let retain = r#"{"id":"r1","input":"Q? ","output":"One. Two.","split":"retain","task":"qa"}"#;
    fs::write(
        dir.path().join("d.jsonl"),
        format!(
            "{}\n{retain}\n",
            r#"{"id":"f1","input":"Tell me.","output":"A b. C d! E f?","split":"forget","task":"completion"}"#
        ),
    )
    .unwrap();
    let o = run(
        dir.path(),
        &["augment", "--data", "d.jsonl", "--out", "a.jsonl"],
    );
    ok(&o);
    assert!(stdout(&o).contains("forget=1"));
    assert!(stdout(&o).contains("forget=3"));
    let text = fs::read_to_string(dir.path().join("a.jsonl")).unwrap();
    assert_eq!(text.lines().filter(|l| l.contains("\"forget\"")).count(), 3);
    assert!(text.lines().any(|l| l == retain));
}

#[test]
fn augment_is_a_fixpoint_on_single_sentence_outputs() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("d.jsonl"),
        r#"{"id":"f1","input":"x","output":"Only one sentence.","split":"forget","task":"qa"}"#,
    )
    .unwrap();
    ok(&run(
        dir.path(),
        &["augment", "--data", "d.jsonl", "--out", "a.jsonl"],
    ));
    ok(&run(
        dir.path(),
        &["augment", "--data", "a.jsonl", "--out", "b.jsonl"],
    ));
    assert_eq!(
        fs::read(dir.path().join("a.jsonl")).unwrap(),
        fs::read(dir.path().join("b.jsonl")).unwrap()
    );
}

#[test]
fn eval_prints_scores_and_writes_a_valid_report() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    ok(&train(dir.path(), "base.ulf", &[]));
    let o = run(
        dir.path(),
        &[
            "eval", "--base", "base.ulf", "--model", "base.ulf", "--data", "d.jsonl", "--report",
            "r.json",
        ],
    );
    ok(&o);
    let out = stdout(&o);
    let value = |name: &str| -> f64 {
        let line = out.lines().find(|l| l.starts_with(name)).unwrap();
        let v = line.split_whitespace().nth(1).unwrap();
        assert_eq!(v.split('.').nth(1).unwrap().len(), 3, "{line}");
        v.parse().unwrap()
    };
    assert_eq!(value("capability"), 1.0);
    let mean = (value("mia") + value("tas") + value("capability")) / 3.0;
    assert!((value("final") - mean).abs() <= 0.0005 + 1e-12);
    let report = EvalReport::load(dir.path().join("r.json")).unwrap();
    assert_eq!(report.capability, 1.0);
    assert_eq!(
        report.metadata.model_checkpoint.as_deref(),
        Some("base.ulf")
    );
    assert_eq!(report.metadata.extra["model_meta"]["command"], "train-base");
}

#[test]
fn gradcheck_passes_by_default() {
    let o = bin().arg("gradcheck").output().unwrap();
    ok(&o);
    let out = stdout(&o);
    let read = |key: &str| -> f64 {
        let line = out.lines().find(|l| l.starts_with(key)).unwrap();
        line.split_whitespace().nth(1).unwrap().parse().unwrap()
    };
    assert!(read("dual_max_rel") <= 1e-10);
    assert!(read("fd_max_rel") <= 1e-4);
}

#[test]
fn gradcheck_catches_a_corrupted_rule() {
    let o = bin()
        .args(["gradcheck", "--corrupt-rule"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}
