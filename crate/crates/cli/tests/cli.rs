use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_cwcl");

fn write_config(dir: &Path, name: &str, out: &Path, extra_train: &str) -> PathBuf {
    let text = format!(
        r#"seed = 3
out_dir = "{out}"
stage = "full"

[dataset]
kind = "synthetic"
num_classes = 4
side = 8
train_size = 48
test_size = 16

[noise]
kind = "symmetric"
rate = 0.25

[train]
batch_size = 16
epochs_stage1 = 1
epochs_stage2 = 1
gamma = 0.01
checkpoint_every = 1
ema_decay = 0.9
{extra_train}

[backbone]
stem_width = 8
widths = [8, 16]
blocks = [1, 1]
strides = [1, 2]
"#,
        out = out.display()
    );
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn cwcl(args: &[&str]) -> Output {
    cwcl_env(args, None)
}

fn cwcl_env(args: &[&str], device: Option<&str>) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args).env_remove("CWCL_DEVICE").env("RUST_LOG", "warn");
    if let Some(d) = device {
        cmd.env("CWCL_DEVICE", d);
    }
    cmd.output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn inject_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = write_config(tmp.path(), "a.toml", &tmp.path().join("a"), "");
    let b = write_config(tmp.path(), "b.toml", &tmp.path().join("b"), "");
    for c in [&a, &b] {
        let o = cwcl(&["inject", "--config", s(c)]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let na = std::fs::read(tmp.path().join("a/noise.csv")).unwrap();
    let nb = std::fs::read(tmp.path().join("b/noise.csv")).unwrap();
    assert!(!na.is_empty());
    assert_eq!(na, nb);
}

#[test]
fn zero_rate_flips_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let c = write_config(tmp.path(), "c.toml", &tmp.path().join("run"), "");
    let o = cwcl(&["inject", "--config", s(&c), "--noise-rate", "0"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("empirical noise rate 0.0000"), "{}", stdout(&o));
}

#[test]
fn bad_configs_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let c = write_config(tmp.path(), "c.toml", &tmp.path().join("run"), "");
    let o = cwcl(&["train", "--config", s(&c), "--lambda", "1.5"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("lambda"), "{}", stderr(&o));

    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "seed = 1\nout_dir = \"x\"\n[noise]\nkind = \"sideways\"\nrate = 0.2\n").unwrap();
    assert_eq!(cwcl(&["inject", "--config", s(&bad)]).status.code(), Some(2));

    let missing = tmp.path().join("missing.toml");
    assert_eq!(cwcl(&["inject", "--config", s(&missing)]).status.code(), Some(2));
}

#[test]
fn device_must_be_cpu() {
    let tmp = tempfile::tempdir().unwrap();
    let c = write_config(tmp.path(), "c.toml", &tmp.path().join("run"), "");
    let o = cwcl_env(&["inject", "--config", s(&c)], Some("cuda:0"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("CWCL_DEVICE"), "{}", stderr(&o));
    let o = cwcl_env(&["inject", "--config", s(&c)], Some("cpu"));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn runtime_failures_exit_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let c = write_config(tmp.path(), "c.toml", &tmp.path().join("run"), "");
    // No sample can reach certainty after one epoch, and there is nothing to fall back on.
    let o = cwcl(&["train", "--config", s(&c), "--gamma", "1.0"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("lower gamma"), "{}", stderr(&o));
}

#[test]
fn dry_run_touches_no_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let c = write_config(tmp.path(), "c.toml", &out, "");
    let o = cwcl(&["train", "--config", s(&c), "--dry-run"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("parameters"), "{}", stdout(&o));
    assert!(!out.join("ckpt").exists());
}

#[test]
fn train_eval_resume_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let run_a = tmp.path().join("a");
    let run_b = tmp.path().join("b");
    let ca = write_config(tmp.path(), "a.toml", &run_a, "");
    let cb = write_config(tmp.path(), "b.toml", &run_b, "");
    for c in [&ca, &cb] {
        let o = cwcl(&["train", "--config", s(c)]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    for f in ["metrics.csv", "summary.json", "run.json", "config.toml", "noise.csv", "confident/round-0.csv"] {
        assert!(run_a.join(f).exists(), "missing {f}");
    }

    // The final checkpoint evaluates to the logged accuracy.
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(run_a.join("summary.json")).unwrap()).unwrap();
    let last = run_a.join("ckpt/stage2-0002");
    let o = cwcl(&["eval", "--config", s(&ca), "--checkpoint", s(&last)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let ema: f64 = stdout(&o)
        .lines()
        .find_map(|l| l.strip_prefix("ema "))
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    assert!((ema - summary["final_test_acc_ema"].as_f64().unwrap()).abs() < 1e-9);
    assert!(last.join("eval.json").exists());

    // A different config may not continue this run.
    let o = cwcl(&["train", "--config", s(&ca), "--resume", "--lambda", "0.5"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    // The same config resumes a finished run without retraining.
    let before = std::fs::read(run_a.join("metrics.csv")).unwrap();
    let o = cwcl(&["train", "--config", s(&ca), "--resume"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(std::fs::read(run_a.join("metrics.csv")).unwrap(), before);

    // Identical settings give identical results, hence zero spread.
    let report = tmp.path().join("report");
    let o = cwcl(&["report", s(&run_a), s(&run_b), "--out", s(&report)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = stdout(&o);
    assert!(table.contains("stage1+2"), "{table}");
    assert!(table.contains("± 0.00"), "{table}");
    assert!(report.join("report.txt").exists());
    let svg = std::fs::read_to_string(report.join("curves.svg")).unwrap();
    assert!(svg.starts_with("<svg"));

    // Corrupting a tensor file is caught on load.
    let model = last.join("model.tensors");
    let mut bytes = std::fs::read(&model).unwrap();
    bytes[20] ^= 1;
    std::fs::write(&model, bytes).unwrap();
    let o = cwcl(&["eval", "--config", s(&ca), "--checkpoint", s(&last)]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn report_warns_on_mixed_settings() {
    let tmp = tempfile::tempdir().unwrap();
    let run_a = tmp.path().join("a");
    let run_b = tmp.path().join("b");
    let ca = write_config(tmp.path(), "a.toml", &run_a, "");
    let cb = write_config(tmp.path(), "b.toml", &run_b, "tau_cwcl = 0.7");
    for c in [&ca, &cb] {
        let o = cwcl(&["train", "--config", s(c), "--stage", "1-only"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let o = cwcl(&["report", s(&run_a), s(&run_b), "--out", s(&tmp.path().join("r"))]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("mixed"), "{}", stdout(&o));
    assert!(stderr(&o).contains("mixes 2 configurations"), "{}", stderr(&o));

    let o = cwcl(&["report", s(&tmp.path().join("nowhere")), "--out", s(&tmp.path().join("r2"))]);
    assert_ne!(o.status.code(), Some(0));
}
