use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_nar-decode"));
    c.env_remove("NAR_SEED");
    c
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

const SPEC: &str = r#"{"vocab_size": 8, "max_len": 6, "feat_dim": 6, "count": 60}"#;
const CONFIG: &str = r#"{
    "model": {"d_model": 8, "d_ff": 16, "enc_layers": 2, "dec_layers": 1},
    "train": {"batch_size": 8, "max_steps": 4, "warmup": 10, "split": [0.5, 0.25, 0.25]}
}"#;

/// gen-data, train, decode, eval and bench in `dir`; returns every produced
/// file except the timing reports.
fn pipeline(dir: &Path, methods: &[&str]) -> Vec<(String, Vec<u8>)> {
    write(&dir.join("spec.json"), SPEC);
    write(&dir.join("config.json"), CONFIG);
    let data = dir.join("data.jsonl");
    ok(bin()
        .args(["gen-data", "--spec"])
        .arg(dir.join("spec.json"))
        .arg("--out")
        .arg(&data)
        .output()
        .unwrap());
    let mut files = vec!["data.jsonl".to_string()];
    let mut ckpts = Vec::new();
    for m in methods {
        let ckpt = dir.join(format!("{m}.ckpt.json"));
        ok(bin()
            .args(["train", "--method", m, "--data"])
            .arg(&data)
            .arg("--config")
            .arg(dir.join("config.json"))
            .arg("--ckpt")
            .arg(&ckpt)
            .output()
            .unwrap());
        let hyp = dir.join(format!("{m}.hyp.jsonl"));
        ok(bin()
            .args(["decode", "--split", "test", "--ckpt"])
            .arg(&ckpt)
            .arg("--data")
            .arg(&data)
            .arg("--out")
            .arg(&hyp)
            .output()
            .unwrap());
        let report = dir.join(format!("{m}-eval"));
        ok(bin()
            .arg("eval")
            .arg("--ref")
            .arg(&data)
            .arg("--hyp")
            .arg(&hyp)
            .arg("--report")
            .arg(&report)
            .output()
            .unwrap());
        files.push(format!("{m}.ckpt.json"));
        files.push(format!("{m}.hyp.jsonl"));
        for f in ["eval.json", "eval.csv", "length_buckets.csv"] {
            files.push(format!("{m}-eval/{f}"));
        }
        ckpts.push(ckpt.display().to_string());
    }
    ok(bin()
        .args(["bench", "--reps", "1", "--limit", "5", "--ckpts", &ckpts.join(","), "--data"])
        .arg(&data)
        .arg("--report")
        .arg(dir.join("bench"))
        .output()
        .unwrap());
    files.push("bench/iterations.csv".into());
    for f in ["bench.json", "bench.csv"] {
        assert!(dir.join("bench").join(f).exists());
    }
    files
        .into_iter()
        .map(|f| {
            let bytes = std::fs::read(dir.join(&f)).unwrap();
            (f, bytes)
        })
        .collect()
}

#[test]
fn reruns_are_byte_identical() {
    let methods = ["ctc", "maskctc", "ar"];
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let fa = pipeline(a.path(), &methods);
    let fb = pipeline(b.path(), &methods);
    assert_eq!(fa.len(), fb.len());
    for ((name, x), (_, y)) in fa.iter().zip(&fb) {
        assert!(x == y, "{name} differs between runs");
    }
}

#[test]
fn seed_variable_overrides_the_spec() {
    let dir = tempfile::tempdir().unwrap();
    let gen = |name: &str, seed: Option<&str>| {
        let mut c = bin();
        if let Some(s) = seed {
            c.env("NAR_SEED", s);
        }
        ok(c.args(["gen-data", "--count", "3", "--out"]).arg(dir.path().join(name)).output().unwrap());
        std::fs::read(dir.path().join(name)).unwrap()
    };
    let plain = gen("a", None);
    assert_eq!(plain, gen("b", Some("1")));
    assert_ne!(plain, gen("c", Some("2")));
    let bad = bin()
        .env("NAR_SEED", "x")
        .args(["gen-data", "--out"])
        .arg(dir.path().join("d"))
        .output()
        .unwrap();
    assert!(!bad.status.success());
}

#[test]
fn failures_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.jsonl");
    let out = bin()
        .args(["train", "--method", "ctc", "--data"])
        .arg(&missing)
        .arg("--ckpt")
        .arg(dir.path().join("m.json"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.jsonl"));

    let out = bin().args(["train", "--method", "nope"]).output().unwrap();
    assert!(!out.status.success());

    write(&dir.path().join("bad.json"), "{ not json");
    let out = bin()
        .args(["gen-data", "--spec"])
        .arg(dir.path().join("bad.json"))
        .arg("--out")
        .arg(dir.path().join("x"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.json"));
}
