use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn patchlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patchlab"))
        .args(args)
        .env_remove("PATCHLAB_THREADS")
        .output()
        .expect("spawn patchlab")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

/// The machine-readable error line.
fn error_line(o: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&o.stderr);
    let line = stderr
        .lines()
        .find(|l| l.starts_with("{\"error\""))
        .expect("error line");
    serde_json::from_str(line).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"
[model]
n_layers = 2
n_heads = 2
d_model = 8
d_head = 4
d_mlp = 8
vocab_size = 20
max_seq = 24
norm_eps = 1e-5

[train]
steps = 3
batch_size = 4
planted_locus = { layer = 1, heads = [0], probability = 0.25 }
"#;

fn tiny_checkpoint(dir: &Path) -> PathBuf {
    let cfg = dir.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let ckpt = dir.join("tiny.ckpt");
    let o = patchlab(&["train-toy", "--config", s(&cfg), "--out", s(&ckpt)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    ckpt
}

fn assert_meta(v: &Value) {
    let m = &v["meta"];
    assert_eq!(m["tool"], "patchlab");
    for k in ["tool_version", "config_digest", "checkpoint_digest"] {
        assert!(m[k].is_string(), "{k} missing in {m}");
    }
    assert!(m["seed"].is_u64());
    assert!(v["config"].is_object());
}

#[test]
fn help_and_version_succeed() {
    assert_eq!(code(&patchlab(&["--help"])), 0);
    assert_eq!(code(&patchlab(&["--version"])), 0);
    assert_eq!(code(&patchlab(&["sweep-heads", "--help"])), 0);
}

#[test]
fn usage_errors_exit_2_with_one_json_line() {
    let o = patchlab(&["frobnicate"]);
    assert_eq!(code(&o), 2);
    let e = error_line(&o);
    assert_eq!(e["error"]["kind"], "usage");
    assert_eq!(e["error"]["exit_code"], 2);
    assert_eq!(code(&patchlab(&["sweep-layers", "--mock"])), 2);
    assert_eq!(code(&patchlab(&["trace", "--checkpoint", "x"])), 2);
}

#[test]
fn config_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = patchlab(&[
        "eval-formats",
        "--checkpoint",
        "/no/such.ckpt",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 3);
    assert_eq!(error_line(&o)["error"]["kind"], "config");

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "trials = 3\nfrobs = 1\n").unwrap();
    let o = patchlab(&[
        "sweep-layers",
        "--mock",
        "--config",
        s(&bad),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 3);

    std::fs::write(
        &bad,
        "[protocol]\nkind = \"fraction_sweep\"\nlayer = 1\nheads = [0]\n",
    )
    .unwrap();
    let o = patchlab(&[
        "sweep-layers",
        "--mock",
        "--config",
        s(&bad),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 3, "kind mismatch");

    let o = Command::new(env!("CARGO_BIN_EXE_patchlab"))
        .args(["sweep-layers", "--mock", "--out", s(&out)])
        .env("PATCHLAB_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&o), 3);
    assert!(!out.exists(), "nothing written on a config error");
}

#[test]
fn mock_sweeps_find_planted_steps_and_flags_override_files() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    std::fs::write(
        &spec,
        "trials = 3\nseed = 5\n[protocol]\nlayer = 3\nparity = \"even\"\n",
    )
    .unwrap();
    let out = dir.path().join("heads");
    let o = patchlab(&[
        "sweep-heads",
        "--mock",
        "--config",
        s(&spec),
        "--trials",
        "4",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(&out.join("head_subset_sweep.json"));
    assert_meta(&v);
    assert_eq!(v["config"]["trials"], 4);
    assert_eq!(v["config"]["seed"], 5);
    assert_eq!(v["result"]["step"], 4.0);
    assert!(out.join("head_subset_sweep.csv").is_file());
    assert!(out.join("head_subset_sweep.svg").is_file());

    let out = dir.path().join("frac");
    let o = patchlab(&[
        "sweep-fraction",
        "--mock",
        "--layer",
        "3",
        "--heads",
        "0,2,4,6",
        "--lambdas",
        "0:1:0.1",
        "--trials",
        "3",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(
        json(&out.join("fraction_sweep.json"))["result"]["step"],
        0.6
    );

    let out = dir.path().join("report");
    let o = patchlab(&["report", "--input", s(dir.path()), "--out", s(&out)]);
    assert_eq!(code(&o), 0);
    let rows = json(&out.join("summary.json"))["result"]
        .as_array()
        .unwrap()
        .len();
    assert_eq!(rows, 2);
}

#[test]
fn trace_then_lens_and_inputs_stay_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(dir.path());
    let before = std::fs::read(&ckpt).unwrap();
    let prompt = dir.path().join("p.txt");
    std::fs::write(&prompt, "Q:9.8 9.11A:\n").unwrap();
    let trace = dir.path().join("t.trace");
    let o = patchlab(&[
        "trace",
        "--checkpoint",
        s(&ckpt),
        "--prompt-file",
        s(&prompt),
        "--out",
        s(&trace),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let trace_bytes = std::fs::read(&trace).unwrap();

    let lens = dir.path().join("lens");
    let o = patchlab(&[
        "logit-lens",
        "--checkpoint",
        s(&ckpt),
        "--trace",
        s(&trace),
        "--out",
        s(&lens),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_meta(&json(&lens.join("lens.json")));

    let attr = dir.path().join("attr");
    let o = patchlab(&[
        "attribution",
        "--checkpoint",
        s(&ckpt),
        "--trace",
        s(&trace),
        "--out",
        s(&attr),
    ]);
    assert_eq!(code(&o), 0);
    assert_meta(&json(&attr.join("attribution.json")));

    let plan = dir.path().join("plan.toml");
    std::fs::write(
        &plan,
        "kind = \"transplant\"\nsource = \"simple\"\nlayer = 1\nheads = [0]\n",
    )
    .unwrap();
    let patched = dir.path().join("patch.json");
    let o = patchlab(&[
        "patch",
        "--checkpoint",
        s(&ckpt),
        "--plan",
        s(&plan),
        "--pair",
        "9.8,9.11",
        "--out",
        s(&patched),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_meta(&json(&patched));

    std::fs::write(
        &plan,
        "kind = \"transplant\"\nsource = \"simple\"\nlayer = 9\nheads = [0]\n",
    )
    .unwrap();
    let o = patchlab(&[
        "patch",
        "--checkpoint",
        s(&ckpt),
        "--plan",
        s(&plan),
        "--pair",
        "9.8,9.11",
        "--out",
        s(&patched),
    ]);
    assert_eq!(code(&o), 3, "layer out of range is a config error");

    let eval = dir.path().join("eval");
    let o = patchlab(&[
        "eval-formats",
        "--checkpoint",
        s(&ckpt),
        "--max-pairs",
        "5",
        "--out",
        s(&eval),
    ]);
    assert_eq!(code(&o), 0);
    assert_meta(&json(&eval.join("eval_formats.json")));

    assert_eq!(std::fs::read(&ckpt).unwrap(), before);
    assert_eq!(std::fs::read(&trace).unwrap(), trace_bytes);
}

#[test]
fn sae_commands_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(dir.path());
    let sae = dir.path().join("sae.bin");
    let acts = dir.path().join("acts.bin");
    let o = patchlab(&[
        "sae-train",
        "--checkpoint",
        s(&ckpt),
        "--layer",
        "1",
        "--max-pairs",
        "40",
        "--steps",
        "50",
        "--k",
        "4",
        "--expansion",
        "2",
        "--out",
        s(&sae),
        "--save-acts",
        s(&acts),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_meta(&json(&dir.path().join("sae.bin.json")));
    let o = patchlab(&[
        "sae-train",
        "--acts",
        s(&acts),
        "--steps",
        "10",
        "--k",
        "2",
        "--expansion",
        "1",
        "--out",
        s(&dir.path().join("s2.bin")),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let out = dir.path().join("an");
    let o = patchlab(&[
        "sae-analyze",
        "--checkpoint",
        s(&ckpt),
        "--sae",
        s(&sae),
        "--top-n",
        "4",
        "--trials",
        "10",
        "--feature",
        "0",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(&out.join("features.json"));
    assert_meta(&v);
    assert_eq!(v["result"]["head_correlation"].as_array().unwrap().len(), 2);
}

const TINY_PIPELINE: &str = r#"
[train.model]
n_layers = 2
n_heads = 2
d_model = 8
d_head = 4
d_mlp = 8
vocab_size = 20
max_seq = 24
norm_eps = 1e-5

[train.train]
steps = 3
batch_size = 4
planted_locus = { layer = 1, heads = [0], probability = 0.25 }

[eval]
max_pairs = 6

[sweep]
trials = 3
bidirectional_trials = 3
lambdas = [0.0, 0.5, 1.0]

[neurons]
count = 2
alphas = [0.0, -1.0]

[sae]
max_pairs = 20
trials = 5
top_n = 4
[sae.sae]
steps = 20
k = 2
expansion = 1
"#;

#[test]
fn reproduce_all_is_deterministic_and_guards_its_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("p.toml");
    std::fs::write(&cfg, TINY_PIPELINE).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = patchlab(&["reproduce-all", "--config", s(&cfg), "--out", s(out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(!out.join("INCOMPLETE").exists());
    }
    let manifest = json(&a.join("manifest.json"));
    assert_meta(&manifest);
    let files = manifest["result"]["files"].as_array().unwrap();
    assert!(files.len() > 20);
    for f in files {
        let name = f["file"].as_str().unwrap();
        assert_eq!(
            std::fs::read(a.join(name)).unwrap(),
            std::fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
    assert_eq!(
        std::fs::read(a.join("manifest.json")).unwrap(),
        std::fs::read(b.join("manifest.json")).unwrap()
    );

    let o = patchlab(&["reproduce-all", "--config", s(&cfg), "--out", s(&a)]);
    assert_eq!(code(&o), 3, "non-empty output directory");

    // a failing stage names itself and leaves the run marked incomplete
    let broken = dir.path().join("broken.toml");
    std::fs::write(
        &broken,
        format!("{TINY_PIPELINE}\n[sweep.locus]\nlayer = 7\nheads = [0]\n"),
    )
    .unwrap();
    let c = dir.path().join("c");
    let o = patchlab(&["reproduce-all", "--config", s(&broken), "--out", s(&c)]);
    assert_ne!(code(&o), 0);
    let e = error_line(&o);
    assert_eq!(e["error"]["stage"], "04_head_sweep");
    assert!(c.join("INCOMPLETE").is_file());
    assert!(c.join("01_train/model.ckpt").is_file());
}
