//! End-to-end runs of the `idfree` binary on a small deterministic corpus.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_idfree"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// 14 users x 12 items, dense enough that every user holds out a validation
/// and a test item. Feature rows align with first-appearance item order
/// because user 0 touches every item first.
fn write_corpus(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let interactions = dir.join("interactions.tsv");
    let mut rows = String::from("user_id\titem_id\n");
    for i in 0..12 {
        rows.push_str(&format!("u0\ti{i}\n"));
    }
    for u in 1..14u64 {
        for i in 0..12u64 {
            // deterministic pseudo-random pattern, ~10 items per user
            if (u * 7 + i * 13) % 12 < 10 {
                rows.push_str(&format!("u{u}\ti{i}\n"));
            }
        }
    }
    std::fs::write(&interactions, rows).unwrap();

    let text = dir.join("text.csv");
    let visual = dir.join("visual.csv");
    let mut t = String::new();
    let mut v = String::new();
    for i in 0..12u64 {
        let row: Vec<String> = (0..5u64)
            .map(|c| format!("{:.4}", (((i * 31 + c * 17 + 3) % 97) as f64 / 97.0) - 0.5))
            .collect();
        t.push_str(&(row.join(",") + "\n"));
        let row: Vec<String> = (0..4u64)
            .map(|c| format!("{:.4}", (((i * 53 + c * 29 + 11) % 89) as f64 / 89.0) - 0.5))
            .collect();
        v.push_str(&(row.join(",") + "\n"));
    }
    std::fs::write(&text, t).unwrap();
    std::fs::write(&visual, v).unwrap();
    (interactions, text, visual)
}

fn prepare_into(dir: &Path, out: &str, seed: &str) -> PathBuf {
    let (inter, text, visual) = write_corpus(dir);
    let out_dir = dir.join(out);
    let output = run(&[
        "prepare",
        "--interactions",
        inter.to_str().unwrap(),
        "--text",
        text.to_str().unwrap(),
        "--visual",
        visual.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--seed",
        seed,
        "--k",
        "3",
    ]);
    assert!(output.status.success(), "prepare failed: {}", stderr_of(&output));
    out_dir
}

#[test]
fn prepare_writes_expected_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = prepare_into(dir.path(), "prep", "11");
    for name in [
        "meta.json",
        "id_maps.json",
        "train.tsv",
        "val.tsv",
        "test.tsv",
        "item_text.idfv",
        "item_visual.idfv",
        "user_text.idfv",
        "user_visual.idfv",
        "graph_user_text.idfg",
        "graph_user_visual.idfg",
        "graph_item_text.idfg",
        "graph_item_visual.idfg",
    ] {
        assert!(out.join(name).exists(), "missing {name}");
    }
    let graphs = std::fs::read_dir(&out)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .file_name()
                .to_string_lossy()
                .ends_with(".idfg")
        })
        .count();
    assert_eq!(graphs, 4);
}

#[test]
fn prepare_same_seed_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = prepare_into(dir.path(), "a", "42");
    let b = prepare_into(dir.path(), "b", "42");
    for entry in std::fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(
            std::fs::read(a.join(&name)).unwrap(),
            std::fs::read(b.join(&name)).unwrap(),
            "{name:?} differs"
        );
    }
}

#[test]
fn prepare_missing_input_names_path() {
    let dir = tempfile::tempdir().unwrap();
    let (inter, text, _) = write_corpus(dir.path());
    let output = run(&[
        "prepare",
        "--interactions",
        inter.to_str().unwrap(),
        "--text",
        text.to_str().unwrap(),
        "--visual",
        dir.path().join("missing.idfv").to_str().unwrap(),
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(2));
    assert!(stderr_of(&output).contains("missing.idfv"));
}

fn train_quick(data: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--data",
        data.to_str().unwrap(),
        "--d",
        "8",
        "--batch-size",
        "32",
        "--max-epochs",
        "4",
        "--patience",
        "4",
        "--k",
        "3",
        "--layers",
        "2",
        "--seed",
        "5",
    ];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn train_evaluate_export_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let data = prepare_into(dir.path(), "prep", "11");

    let out = train_quick(&data, &[]);
    assert!(out.status.success(), "train failed: {}", stderr_of(&out));
    let summary: serde_json::Value = serde_json::from_str(stdout_of(&out).trim()).unwrap();
    assert!(summary["best_epoch"].as_u64().unwrap() >= 1);
    assert!(data.join("checkpoint.idfc").exists());
    let metrics = std::fs::read_to_string(data.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    let first: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    assert!(first["l_total"].as_f64().unwrap().is_finite());
    assert!(first["val_recall@20"].as_f64().is_some());
    // config echo includes hash and seed
    let err = stderr_of(&out);
    assert!(err.contains("resolved config (hash "));
    assert!(err.contains("seed: 5"));

    let eval = run(&[
        "evaluate",
        "--data",
        data.to_str().unwrap(),
        "--checkpoint",
        data.join("checkpoint.idfc").to_str().unwrap(),
        "--split",
        "test",
        "--k",
        "5,10,20",
    ]);
    assert!(eval.status.success(), "evaluate failed: {}", stderr_of(&eval));
    let report: serde_json::Value = serde_json::from_str(stdout_of(&eval).trim()).unwrap();
    assert_eq!(report["ks"], serde_json::json!([5, 10, 20]));
    assert!(report["n_evaluated_users"].as_u64().unwrap() > 0);

    let emb = dir.path().join("emb");
    let export = run(&[
        "export-embeddings",
        "--checkpoint",
        data.join("checkpoint.idfc").to_str().unwrap(),
        "--out",
        emb.to_str().unwrap(),
    ]);
    assert!(export.status.success(), "export failed: {}", stderr_of(&export));
    // exported containers round-trip through the feature loader
    let users = idfree_core::dataset::load_features(
        &emb.join("user_embeddings.idfv"),
        idfree_core::dataset::Modality::Text,
        Some(14),
    )
    .unwrap();
    assert_eq!(users.dim(), 8);
    let items = idfree_core::dataset::load_features(
        &emb.join("item_embeddings.idfv"),
        idfree_core::dataset::Modality::Text,
        Some(12),
    )
    .unwrap();
    assert_eq!(items.dim(), 8);
}

#[test]
fn train_same_seed_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = prepare_into(dir.path(), "prep", "11");
    let ck_a = dir.path().join("a.idfc");
    let ck_b = dir.path().join("b.idfc");
    let m_a = dir.path().join("a.jsonl");
    let m_b = dir.path().join("b.jsonl");
    for (ck, m) in [(&ck_a, &m_a), (&ck_b, &m_b)] {
        let out = train_quick(
            &data,
            &["--out", ck.to_str().unwrap(), "--metrics-out", m.to_str().unwrap()],
        );
        assert!(out.status.success());
    }
    assert_eq!(std::fs::read(&ck_a).unwrap(), std::fs::read(&ck_b).unwrap());
    assert_eq!(std::fs::read(&m_a).unwrap(), std::fs::read(&m_b).unwrap());
}

#[test]
fn loss_log_and_profile_flags() {
    let dir = tempfile::tempdir().unwrap();
    let data = prepare_into(dir.path(), "prep", "11");
    let out = train_quick(&data, &["--log-losses", "--profile"]);
    assert!(out.status.success(), "{}", stderr_of(&out));

    // one JSON object per training step
    let losses = std::fs::read_to_string(data.join("losses.jsonl")).unwrap();
    assert!(!losses.trim().is_empty());
    for line in losses.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let total = v["l_total"].as_f64().unwrap();
        let parts = v["l_rec"].as_f64().unwrap()
            + v["l_align_user"].as_f64().unwrap()
            + v["l_align_item"].as_f64().unwrap();
        assert_eq!(total, parts);
    }

    // profile adds wall-clock and per-stage milliseconds to each epoch line
    let metrics = std::fs::read_to_string(data.join("metrics.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    assert!(first["seconds"].as_f64().unwrap() > 0.0);
    assert!(first["profile"]["forward_ms"].as_f64().is_some());
    assert!(first["profile"]["eval_ms"].as_f64().is_some());
}

#[test]
fn baseline_model_flag_works() {
    let dir = tempfile::tempdir().unwrap();
    let data = prepare_into(dir.path(), "prep", "11");
    let out = train_quick(&data, &["--model", "lightgcn-sl"]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let err = stderr_of(&out);
    assert!(err.contains("\"use_align\":false"));
    assert!(err.contains("\"use_asg\":false"));
}

#[test]
fn ablate_report_has_requested_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = prepare_into(dir.path(), "prep", "11");
    let rows = dir.path().join("rows.json");
    std::fs::write(
        &rows,
        r#"[
            {"name": "all-on", "flags": {"use_pe": true, "use_asg": true, "use_static_graphs": true, "use_age": true, "use_align": true}},
            {"name": "-PE", "flags": {"use_pe": false, "use_asg": true, "use_static_graphs": true, "use_age": true, "use_align": true}}
        ]"#,
    )
    .unwrap();
    let out = run(&[
        "ablate",
        "--data",
        data.to_str().unwrap(),
        "--rows",
        rows.to_str().unwrap(),
        "--d",
        "8",
        "--batch-size",
        "32",
        "--max-epochs",
        "3",
        "--patience",
        "3",
        "--k",
        "3",
        "--layers",
        "2",
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let report: serde_json::Value = serde_json::from_str(stdout_of(&out).trim()).unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["name"], "all-on");
    assert!(rows[1]["recall@20"].as_f64().is_some());
    assert!(stderr_of(&out).contains("| row | R@5 | R@20 |"));
}

#[test]
fn ablate_empty_rows_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = prepare_into(dir.path(), "prep", "11");
    let rows = dir.path().join("rows.json");
    std::fs::write(&rows, "[]").unwrap();
    let out = run(&[
        "ablate",
        "--data",
        data.to_str().unwrap(),
        "--rows",
        rows.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn transfer_dimension_mismatch_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = prepare_into(dir.path(), "prep", "11");
    let out = train_quick(&data, &[]);
    assert!(out.status.success());

    // second corpus with a narrower text width
    let other_dir = dir.path().join("other");
    std::fs::create_dir(&other_dir).unwrap();
    let (inter, _, visual) = write_corpus(&other_dir);
    let narrow = other_dir.join("narrow.csv");
    let mut t = String::new();
    for i in 0..12u64 {
        t.push_str(&format!("{:.3},{:.3},{:.3}\n", i as f64 * 0.1, 0.5 - i as f64 * 0.05, 0.2));
    }
    std::fs::write(&narrow, t).unwrap();
    let prep2 = other_dir.join("prep2");
    let ok = run(&[
        "prepare",
        "--interactions",
        inter.to_str().unwrap(),
        "--text",
        narrow.to_str().unwrap(),
        "--visual",
        visual.to_str().unwrap(),
        "--out",
        prep2.to_str().unwrap(),
    ]);
    assert!(ok.status.success(), "{}", stderr_of(&ok));

    let eval = run(&[
        "evaluate",
        "--data",
        data.to_str().unwrap(),
        "--checkpoint",
        data.join("checkpoint.idfc").to_str().unwrap(),
        "--split",
        "test",
        "--transfer-data",
        prep2.to_str().unwrap(),
    ]);
    assert_eq!(eval.status.code(), Some(2));
    let msg = stderr_of(&eval);
    assert!(msg.contains('5') && msg.contains('3'), "should name both widths: {msg}");
}

#[test]
fn gradcheck_passes_and_prints_per_op_lines() {
    for seed in ["7", "3", "11"] {
        let out = run(&["gradcheck", "--seed", seed]);
        assert!(out.status.success(), "seed {seed}: {}", stderr_of(&out));
        let text = stdout_of(&out);
        assert!(text.contains("matmul"));
        assert!(text.contains("end_to_end_loss"));
        assert!(!text.contains("FAIL"));
    }
}

#[test]
fn unknown_arguments_exit_with_usage_code() {
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(&["train", "--no-such-flag", "1"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let data = prepare_into(dir.path(), "prep", "11");
    // invalid hyperparameter is a config error -> usage exit code
    let out = run(&["train", "--data", data.to_str().unwrap(), "--tau", "-0.5"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_exits_clean() {
    let out = run(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout_of(&out).contains("prepare"));
}
