use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn hml(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hml"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = hml(args);
    assert!(
        out.status.success(),
        "hml {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn err_json(args: &[&str]) -> Value {
    let out = hml(args);
    assert!(!out.status.success(), "hml {args:?} unexpectedly succeeded");
    serde_json::from_slice(&out.stderr).expect("stderr is one JSON object")
}

fn last_json(stdout: &str) -> Value {
    serde_json::from_str(stdout.lines().last().unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn count_chain_prints_four() {
    let dir = tempfile::tempdir().unwrap();
    let chain = dir.path().join("chain.txt");
    std::fs::write(&chain, "r\nr > a\nr > a > b\n").unwrap();
    assert_eq!(ok(&["count", s(&chain)]).trim(), "4");
    let v: Value = serde_json::from_str(&ok(&["count", s(&chain), "--brute-force", "--json"])).unwrap();
    assert_eq!(v["count"], "4");
    assert_eq!(v["brute_force"], "4");
}

#[test]
fn builtin_trees_validate_and_count() {
    let v: Value = serde_json::from_str(&ok(&["validate", "builtin:substrate", "--json"])).unwrap();
    assert_eq!(v["nodes"], 24);
    assert_eq!(v["table"][0]["path"], "Substrate");
    let text = ok(&["validate", "builtin:relief"]);
    assert!(text.contains("nodes: 7"));
    let v: Value = serde_json::from_str(&ok(&["count", "builtin:relief", "--brute-force", "--json"])).unwrap();
    assert_eq!(v["count"], "65");
}

#[test]
fn evaluate_annotations_against_themselves() {
    let dir = tempfile::tempdir().unwrap();
    let ann = dir.path().join("ann.csv");
    std::fs::write(
        &ann,
        "sample_id,Relief,Bedforms\n\
         a,Relief > Flat (0-10cm),Bedforms > Ripples > Symmetric (wave)\n\
         b,\"Relief > Wall (>3m, vertical)\",\n\
         c,Relief,Bedforms > Scour;Bedforms > Bioturbated\n",
    )
    .unwrap();
    let report = dir.path().join("report.json");
    let per_node = dir.path().join("nodes.csv");
    let out = ok(&[
        "evaluate",
        s(&ann),
        s(&ann),
        "builtin:relief",
        "builtin:bedforms",
        "--report",
        s(&report),
        "--per-node",
        s(&per_node),
    ]);
    let v = last_json(&out);
    assert_eq!(v["ap"], 1.0);
    let full: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(full["schema_version"], 1);
    assert_eq!(full["ap"], 1.0);
    assert!(std::fs::read_to_string(&per_node).unwrap().starts_with("category,path,"));
}

#[test]
fn errors_are_machine_readable() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.txt");
    let e = err_json(&["count", s(&missing)]);
    assert_eq!(e["error"], "file-not-found");
    assert!(e["file"].as_str().unwrap().ends_with("nope.txt"));

    let ann = dir.path().join("ann.csv");
    std::fs::write(&ann, "sample_id,Relief\na,Relief\n").unwrap();
    let e = err_json(&["evaluate", s(&ann), s(&ann), "builtin:relief", "builtin:bedforms"]);
    assert_eq!(e["error"], "schema-mismatch");
    assert!(e["file"].as_str().unwrap().ends_with("ann.csv"));
    assert_eq!(e["field"], "Bedforms");

    let e = err_json(&["validate", "builtin:colour"]);
    assert_eq!(e["error"], "usage");
}

fn pipeline(dir: &Path, seed: &str) -> (Value, Value, String) {
    let gen_cfg = dir.join("gen.json");
    std::fs::write(
        &gen_cfg,
        r#"{"hierarchies": ["builtin:relief", "builtin:bedforms"],
            "generator": {"n_samples": 500}}"#,
    )
    .unwrap();
    let train_cfg = dir.join("train.json");
    std::fs::write(
        &train_cfg,
        r#"{"epochs": 25, "warmup_to_peak_epoch": 3, "batch_size": 64,
            "peak_lr": 3e-3, "start_end_lr": 3e-4,
            "architecture": {"hidden_dim": 64, "dropout": 0.2}}"#,
    )
    .unwrap();
    let data = dir.join("data");
    ok(&["generate", s(&gen_cfg), "--seed", seed, "--out", s(&data)]);
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    let trees: Vec<String> = manifest["hierarchies"]
        .as_array()
        .unwrap()
        .iter()
        .map(|h| data.join(h.as_str().unwrap()).to_string_lossy().into_owned())
        .collect();
    let p = |name: &str| data.join(name).to_string_lossy().into_owned();
    let with_trees = |head: &[&str]| -> Vec<String> {
        let mut v: Vec<String> = head.iter().map(|x| x.to_string()).collect();
        v.extend(trees.iter().cloned());
        v
    };
    let run = |args: Vec<String>, tail: &[&str]| {
        let mut a: Vec<&str> = args.iter().map(String::as_str).collect();
        a.extend_from_slice(tail);
        ok(&a)
    };

    let mut baseline_args: Vec<String> = vec!["baseline".into()];
    baseline_args.extend(trees.iter().cloned());
    baseline_args.push(p("test_ground_truth.csv"));
    let baseline = last_json(&run(baseline_args, &["--trials", "4", "--seed", seed]));

    let model = dir.join("model.json");
    let log = run(
        with_trees(&["train", &p("train_features.csv"), &p("train_annotations.csv")]),
        &[
            "--config",
            s(&train_cfg),
            "--seed",
            seed,
            "--out",
            s(&model),
            "--validation-features",
            &p("validation_features.csv"),
            "--validation-annotations",
            &p("validation_annotations.csv"),
        ],
    );
    assert_eq!(log.lines().count(), 25);
    let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert!(first["validation"]["loss"].is_number());

    let preds = dir.join("preds.jsonl");
    run(
        with_trees(&["predict", s(&model), &p("test_features.csv")]),
        &["--out", s(&preds)],
    );
    let bits = dir.join("bits.jsonl");
    run(
        with_trees(&["constrain", s(&preds)]),
        &["--out", s(&bits), "--binarize"],
    );
    let report = dir.join("report.json");
    let raw = last_json(&run(
        with_trees(&["evaluate", s(&preds), &p("test_ground_truth.csv")]),
        &["--report", s(&report)],
    ));
    let from_bits = last_json(&run(
        with_trees(&["evaluate", s(&bits), &p("test_ground_truth.csv")]),
        &[],
    ));
    assert_eq!(raw, from_bits);
    (baseline, raw, std::fs::read_to_string(report).unwrap())
}

#[test]
fn generate_baseline_train_evaluate() {
    let a = tempfile::tempdir().unwrap();
    let (baseline, trained, report) = pipeline(a.path(), "5");
    for metric in ["ap", "hml_ap", "singular_f1"] {
        let t = trained[metric].as_f64().unwrap();
        let b = baseline[metric]["mean"].as_f64().unwrap();
        assert!(t > b, "{metric}: trained {t} vs baseline {b}");
    }

    let b = tempfile::tempdir().unwrap();
    let (_, _, again) = pipeline(b.path(), "5");
    assert_eq!(report, again, "same seeds must give byte-identical reports");
}
