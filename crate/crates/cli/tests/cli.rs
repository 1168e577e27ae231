use std::path::Path;
use std::process::{Command, Output};

fn unibind(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unibind"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn ok(o: Output) -> String {
    assert_eq!(
        code(&o),
        0,
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn small_bundle(dir: &Path) {
    ok(unibind(
        &[
            "synth",
            "generate",
            "--out",
            "bundle",
            "--categories",
            "4",
            "--samples",
            "8",
            "--dim",
            "8",
            "--descriptions",
            "12",
            "--k",
            "5",
            "--seed",
            "1",
        ],
        dir,
    ));
}

#[test]
fn help_and_usage_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&unibind(&["--help"], dir.path())), 0);
    assert_eq!(code(&unibind(&["--version"], dir.path())), 0);
    assert_eq!(code(&unibind(&["frobnicate"], dir.path())), 1);
    assert_eq!(code(&unibind(&["gradcheck", "--dim", "x"], dir.path())), 1);
    assert_eq!(code(&unibind(&["eval", "zeroshot", "--centers", "c"], dir.path())), 1);
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(unibind(
        &["gradcheck", "--dim", "8", "--batch", "4", "--seed", "0"],
        dir.path(),
    ));
    let report: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(report["pass"], true);
    assert!(report["max_rel_error"].as_f64().unwrap() < 1e-3);
    ok(unibind(
        &[
            "gradcheck",
            "--dim",
            "5",
            "--dim-out",
            "7",
            "--batch",
            "3",
            "--symmetric",
        ],
        dir.path(),
    ));
    assert_eq!(code(&unibind(&["gradcheck", "--batch", "1"], dir.path())), 2);
}

#[test]
fn pipeline_run_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    small_bundle(dir.path());
    let stdout = ok(unibind(
        &["pipeline", "run", "--config", "bundle/pipeline.toml", "--out", "a"],
        dir.path(),
    ));
    assert!(stdout.contains("diagnostics post"));
    ok(unibind(
        &["pipeline", "run", "--config", "bundle/pipeline.toml", "--out", "b"],
        dir.path(),
    ));
    ok(unibind(
        &[
            "pipeline",
            "run",
            "--config",
            "bundle/pipeline.toml",
            "--out",
            "c",
            "--dump-projection",
        ],
        dir.path(),
    ));
    for f in [
        "manifest.json",
        "adapters/m0.adapter",
        "eval/m1/zeroshot_post_prompt_mean.json",
        "retrieval/m1_to_m0_pre.json",
        "diagnostics_post.json",
    ] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        assert!(a == std::fs::read(dir.path().join("b").join(f)).unwrap(), "{f} differs");
    }
    assert!(dir.path().join("c/projection_pre.csv").is_file());
    assert!(!dir.path().join("a/projection_pre.csv").exists());
}

#[test]
fn pipeline_missing_input_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    small_bundle(dir.path());
    std::fs::remove_file(dir.path().join("bundle/m1/test_labels.jsonl")).unwrap();
    let o = unibind(
        &["pipeline", "run", "--config", "bundle/pipeline.toml", "--out", "run"],
        dir.path(),
    );
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("inputs stage"), "{err}");
    assert!(err.contains("test_labels.jsonl"), "{err}");
    assert!(!dir.path().join("run").exists());
}

#[test]
fn stage_by_stage_commands() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_bundle(d);

    let out = ok(unibind(
        &[
            "kb",
            "build",
            "--records",
            "bundle/kb/records.jsonl",
            "--embeddings",
            "bundle/kb/embeddings.ubem",
            "--out",
            "kb",
        ],
        d,
    ));
    assert!(out.contains("112 records"), "{out}");
    let stats = ok(unibind(&["kb", "stats", "--kb", "kb", "--json"], d));
    let stats: serde_json::Value = serde_json::from_str(&stats).unwrap();
    assert_eq!(stats["by_source"]["llm_category"], 48);
    assert_eq!(stats["by_category"]["class02"]["mllm_data"], 16);

    ok(unibind(
        &[
            "centers",
            "localize",
            "--kb",
            "kb",
            "--prompts",
            "bundle/prompts.ubem",
            "--k",
            "20",
            "--out",
            "centers.bin",
        ],
        d,
    ));
    ok(unibind(
        &[
            "centers",
            "sweep",
            "--kb",
            "kb",
            "--prompts",
            "bundle/prompts.ubem",
            "--ks",
            "2,4",
            "--out-dir",
            "sweep",
        ],
        d,
    ));
    assert!(d.join("sweep/centers_k4.bin").is_file());

    std::fs::write(
        d.join("train.conf"),
        "learning_rate = 0.003\nepochs = 5 # short\nbatch_size = 16\n",
    )
    .unwrap();
    ok(unibind(
        &[
            "train",
            "--kb",
            "kb",
            "--pairs",
            "bundle/m0/train_pairs.jsonl",
            "--visual",
            "bundle/m0/train.ubem",
            "--modality",
            "m0",
            "--config",
            "train.conf",
            "--out",
            "m0.adapter",
            "--report",
            "train.json",
        ],
        d,
    ));
    assert_eq!(json(&d.join("train.json"))["loss_history"].as_array().unwrap().len(), 5);

    for mode in ["center_max", "prompt_mean"] {
        ok(unibind(
            &[
                "eval",
                "zeroshot",
                "--centers",
                "centers.bin",
                "--queries",
                "bundle/m0/test.ubem",
                "--labels",
                "bundle/m0/test_labels.jsonl",
                "--mode",
                mode,
                "--adapter",
                "m0.adapter",
                "--report",
                "zs.json",
                "--predictions",
                "preds.jsonl",
            ],
            d,
        ));
        let r = json(&d.join("zs.json"));
        assert_eq!(r["mode"], mode);
        assert_eq!(r["sample_count"], 32);
        let text = std::fs::read_to_string(d.join("zs.json")).unwrap();
        assert!(text.contains("\"top1_accuracy\": 0.") || text.contains("\"top1_accuracy\": 1.000000"));
    }
    assert_eq!(
        std::fs::read_to_string(d.join("preds.jsonl")).unwrap().lines().count(),
        32
    );

    ok(unibind(
        &[
            "eval",
            "retrieval",
            "--queries",
            "bundle/m0/test.ubem",
            "--gallery",
            "bundle/m1/test.ubem",
            "--query-labels",
            "bundle/m0/test_labels.jsonl",
            "--gallery-labels",
            "bundle/m1/test_labels.jsonl",
            "--ks",
            "1,5",
            "--report",
            "ret.json",
        ],
        d,
    ));
    let r = json(&d.join("ret.json"));
    assert_eq!(r["direction"], "A_TO_B");
    assert!(r["recall_at"]["5"].as_f64().unwrap() >= r["recall_at"]["1"].as_f64().unwrap());

    // instance-level relevance: each m0 test sample is relevant to itself
    let ids: Vec<String> = std::fs::read_to_string(d.join("bundle/m0/test_labels.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["id"]
                .as_str()
                .unwrap()
                .to_string()
        })
        .collect();
    let rel: String = ids
        .iter()
        .map(|id| format!("{{\"query_id\":\"{id}\",\"relevant\":[\"{id}\"]}}\n"))
        .collect();
    std::fs::write(d.join("rel.jsonl"), rel).unwrap();
    ok(unibind(
        &[
            "eval",
            "retrieval",
            "--queries",
            "bundle/m0/test.ubem",
            "--gallery",
            "bundle/m0/test.ubem",
            "--relevance",
            "rel.jsonl",
            "--report",
            "self.json",
        ],
        d,
    ));
    assert_eq!(json(&d.join("self.json"))["recall_at"]["1"], 1.0);

    let out = ok(unibind(
        &[
            "diagnostics",
            "--queries",
            "bundle/m0/test.ubem",
            "--labels",
            "bundle/m0/test_labels.jsonl",
            "--queries",
            "bundle/m1/test.ubem",
            "--labels",
            "bundle/m1/test_labels.jsonl",
        ],
        d,
    ));
    let diag: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!(diag["modality_gap"].as_f64().unwrap() > 0.0);
}

#[test]
fn data_and_numerical_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_bundle(d);
    ok(unibind(
        &[
            "kb",
            "build",
            "--records",
            "bundle/kb/records.jsonl",
            "--embeddings",
            "bundle/kb/embeddings.ubem",
            "--out",
            "kb",
        ],
        d,
    ));
    ok(unibind(
        &[
            "centers",
            "localize",
            "--kb",
            "kb",
            "--prompts",
            "bundle/prompts.ubem",
            "--k",
            "3",
            "--out",
            "c.bin",
        ],
        d,
    ));

    std::fs::write(
        d.join("bad_labels.jsonl"),
        "{\"id\":\"x\",\"category\":\"nope\"}\n".repeat(32),
    )
    .unwrap();
    let o = unibind(
        &[
            "eval",
            "zeroshot",
            "--centers",
            "c.bin",
            "--queries",
            "bundle/m0/test.ubem",
            "--labels",
            "bad_labels.jsonl",
            "--report",
            "r.json",
        ],
        d,
    );
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope"));

    std::fs::write(d.join("broken.jsonl"), "{\"id\":\"a\",\"category\":\"b\"}\nnot json\n").unwrap();
    let o = unibind(
        &[
            "eval",
            "zeroshot",
            "--centers",
            "c.bin",
            "--queries",
            "bundle/m0/test.ubem",
            "--labels",
            "broken.jsonl",
            "--report",
            "r.json",
        ],
        d,
    );
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));

    // flag combination that parses but is meaningless
    let o = unibind(
        &[
            "eval",
            "retrieval",
            "--queries",
            "bundle/m0/test.ubem",
            "--gallery",
            "bundle/m1/test.ubem",
            "--report",
            "r.json",
        ],
        d,
    );
    assert_eq!(code(&o), 1);

    // an adapter whose first weight is NaN
    std::fs::write(d.join("t.conf"), "epochs = 1\nbatch_size = 8\n").unwrap();
    ok(unibind(
        &[
            "train",
            "--kb",
            "kb",
            "--pairs",
            "bundle/m0/train_pairs.jsonl",
            "--visual",
            "bundle/m0/train.ubem",
            "--modality",
            "m0",
            "--config",
            "t.conf",
            "--out",
            "a.adapter",
        ],
        d,
    ));
    let mut bytes = std::fs::read(d.join("a.adapter")).unwrap();
    let first_weight = bytes.iter().position(|&b| b == b'\n').unwrap() + 1 + 20;
    bytes[first_weight..first_weight + 4].copy_from_slice(&f32::NAN.to_le_bytes());
    std::fs::write(d.join("nan.adapter"), bytes).unwrap();
    let o = unibind(
        &[
            "eval",
            "zeroshot",
            "--centers",
            "c.bin",
            "--queries",
            "bundle/m0/test.ubem",
            "--labels",
            "bundle/m0/test_labels.jsonl",
            "--adapter",
            "nan.adapter",
            "--report",
            "r.json",
        ],
        d,
    );
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}
