use std::path::Path;
use std::process::{Command, Output};

fn mare(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mare"));
    cmd.args(args).env_remove("MARE_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn synth(dir: &Path, seed: &str, n: &str) -> Output {
    mare(&["synth", "--out", dir.to_str().unwrap(), "--examples", n, "--seed", seed], &[])
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn synth_is_byte_identical_for_a_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    assert_eq!(code(&synth(a.path(), "4", "50")), 0);
    assert_eq!(code(&synth(b.path(), "4", "50")), 0);
    let env = mare(
        &["synth", "--out", c.path().to_str().unwrap(), "--examples", "50"],
        &[("MARE_SEED", "4")],
    );
    assert_eq!(code(&env), 0);
    for f in ["train.jsonl", "val.jsonl", "test.jsonl", "stats.json"] {
        assert_eq!(read(&a.path().join(f)), read(&b.path().join(f)), "{f}");
        assert_eq!(read(&a.path().join(f)), read(&c.path().join(f)), "{f}");
    }
    let lines = String::from_utf8(read(&a.path().join("train.jsonl"))).unwrap();
    assert_eq!(lines.lines().count(), 40);
    let manifest: serde_json::Value = serde_json::from_slice(&read(&a.path().join("manifest.json"))).unwrap();
    assert_eq!(manifest["command"], "synth");
    assert_eq!(manifest["seed"], 4);

    let d = tempfile::tempdir().unwrap();
    synth(d.path(), "5", "50");
    assert_ne!(read(&a.path().join("train.jsonl")), read(&d.path().join("train.jsonl")));
}

#[test]
fn invalid_input_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = mare(&["synth", "--out", dir.path().to_str().unwrap(), "--num-aspects", "0"], &[]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    let out = mare(&["train", "--out", dir.path().to_str().unwrap()], &[]);
    assert_eq!(code(&out), 2);
    let out = mare(&["frobnicate"], &[]);
    assert_eq!(code(&out), 2);
    let missing = dir.path().join("nope.json");
    let out = mare(
        &["eval", "--checkpoint", missing.to_str().unwrap(), "--data", "x", "--out", dir.path().to_str().unwrap()],
        &[],
    );
    assert_eq!(code(&out), 1);
}

#[test]
fn train_eval_inspect_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&synth(d, "1", "120")), 0);
    std::fs::write(
        d.join("run.toml"),
        "seed = 3\n[data]\ntrain = \"train.jsonl\"\nval = \"val.jsonl\"\n\
         [model]\nnum_layers = 2\nnum_heads = 2\nmodel_dim = 8\nffn_dim = 16\n\
         [train]\nmax_epochs = 2\nbatch_size = 16\n",
    )
    .unwrap();
    let run = d.join("run");
    let out = mare(
        &["train", "--config", d.join("run.toml").to_str().unwrap(), "--out", run.to_str().unwrap()],
        &[],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["manifest.json", "metrics.jsonl", "checkpoint.json", "val_report.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let metrics = mare::run::read_metrics(&run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.len(), 2);
    let manifest: serde_json::Value = serde_json::from_slice(&read(&run.join("manifest.json"))).unwrap();
    assert_eq!(manifest["seed"], 3);

    let ev = d.join("eval");
    let ckpt = run.join("checkpoint.json");
    let out = mare(
        &[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            d.join("test.jsonl").to_str().unwrap(),
            "--out",
            ev.to_str().unwrap(),
            "--probe",
            "5",
        ],
        &[],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["report.json", "report.csv", "report.md", "probe_summary.json"] {
        assert!(ev.join(f).exists(), "{f}");
    }
    let csv = String::from_utf8(read(&ev.join("report.csv"))).unwrap();
    assert!(csv.starts_with("aspect0 S,aspect0 ACC"));

    let inspect = mare(
        &["inspect", "--checkpoint", ckpt.to_str().unwrap(), "--data", d.join("test.jsonl").to_str().unwrap(), "--n", "2"],
        &[],
    );
    assert_eq!(code(&inspect), 0);
    let text = String::from_utf8(inspect.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with('#')).count(), 2);
    assert!(text.contains("  aspect1: "));

    // Labels only: rationale metrics are impossible.
    let no_gold = d.join("no_gold.jsonl");
    std::fs::write(&no_gold, "{\"tokens\": [\"the\", \"beer\"], \"labels\": {\"0\": 1}}\n").unwrap();
    let out = mare(
        &["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", no_gold.to_str().unwrap(), "--out", ev.to_str().unwrap()],
        &[],
    );
    assert_ne!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stderr).contains("gold"));
}
