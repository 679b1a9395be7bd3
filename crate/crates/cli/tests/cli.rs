use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set",
    "world.n_train=30",
    "--set",
    "world.n_test=8",
    "--set",
    "alm_train.epochs=1",
    "--set",
    "alm_train.validation_size=4",
    "--set",
    "agm_train.epochs=2",
    "--set",
    "agm_train.validation_size=4",
];

fn ltg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ltg"))
        .current_dir(dir)
        .env_remove("LTG_OUTPUT_ROOT")
        .args(args)
        .output()
        .expect("ltg runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = ltg(dir, args);
    assert!(
        out.status.success(),
        "ltg {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(TINY.iter().copied()).collect()
}

fn pipeline(dir: &Path) {
    ok(dir, &with_tiny(&["gen-data", "--out", "data", "--seed", "3", "--char-sub-rate", "0.2"]));
    ok(dir, &with_tiny(&["train-alm", "--data", "data", "--out", "run", "--seed", "5"]));
    ok(dir, &with_tiny(&["train-agm", "--data", "data", "--alm", "run/alm.ckpt", "--out", "run", "--seed", "5"]));
    ok(
        dir,
        &[
            "predict", "--data", "data/test.jsonl", "--alm", "run/alm.ckpt", "--agm", "run/agm.ckpt", "--out",
            "run/pred.jsonl", "--beam", "2",
        ],
    );
    ok(
        dir,
        &["eval", "--predictions", "run/pred.jsonl", "--data", "data/test.jsonl", "--out", "run/report.json"],
    );
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn gen_data_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        ok(d, &with_tiny(&["gen-data", "--out", "data", "--seed", "9", "--char-sub-rate", "0.3"]));
    }
    for f in ["train.jsonl", "test.jsonl", "test_corrupted.jsonl"] {
        assert_eq!(read(a.path().join("data").join(f)), read(b.path().join("data").join(f)), "{f}");
    }
    let c = tempfile::tempdir().unwrap();
    ok(c.path(), &with_tiny(&["gen-data", "--out", "data", "--seed", "10"]));
    assert_ne!(read(a.path().join("data/train.jsonl")), read(c.path().join("data/train.jsonl")));
}

#[test]
fn pipeline_rerun_is_bit_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    for f in ["alm.ckpt", "agm.ckpt", "alm_log.jsonl", "agm_log.jsonl", "pred.jsonl", "report.json"] {
        assert_eq!(read(a.path().join("run").join(f)), read(b.path().join("run").join(f)), "{f}");
    }
}

#[test]
fn output_root_prefixes_relative_paths() {
    let root = tempfile::tempdir().unwrap();
    let cwd = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ltg"))
        .current_dir(cwd.path())
        .env("LTG_OUTPUT_ROOT", root.path())
        .args(with_tiny(&["gen-data", "--out", "data"]))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(root.path().join("data/train.jsonl").exists());
    assert!(!cwd.path().join("data").exists());
}

#[test]
fn eval_on_missing_file_names_it() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &with_tiny(&["gen-data", "--out", "data"]));
    let out = ltg(d.path(), &["eval", "--predictions", "missing.jsonl", "--data", "data/test.jsonl"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.jsonl"));
}

#[test]
fn locked_output_directory_is_refused() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &with_tiny(&["gen-data", "--out", "data"]));
    std::fs::create_dir_all(d.path().join("run")).unwrap();
    std::fs::write(d.path().join("run/.ltg.lock"), "").unwrap();
    let out = ltg(d.path(), &with_tiny(&["train-alm", "--data", "data", "--out", "run"]));
    assert!(!out.status.success());
    assert!(!d.path().join("run/alm.ckpt").exists());
}

#[test]
fn bad_config_is_rejected() {
    let d = tempfile::tempdir().unwrap();
    let out = ltg(d.path(), &["gen-data", "--out", "data", "--set", "world.n_trian=3"]);
    assert!(!out.status.success());
    let out = ltg(d.path(), &["gen-data", "--out", "data", "--set", "agm_train.corruption_prob=1.5"]);
    assert!(!out.status.success());
}

#[test]
fn ablation_needs_three_seeds() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &with_tiny(&["gen-data", "--out", "data"]));
    let out = ltg(d.path(), &with_tiny(&["ablate", "--data", "data", "--out", "abl", "--seeds", "0,1"]));
    assert!(!out.status.success());
}

#[test]
fn gradcheck_passes() {
    let d = tempfile::tempdir().unwrap();
    let stdout = ok(d.path(), &["gradcheck", "--coords", "16"]);
    assert_eq!(stdout.matches("PASS").count(), 2, "{stdout}");
}
