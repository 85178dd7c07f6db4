//! End-to-end checks of the `odontic` binary: artifacts, determinism, and
//! exit codes.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY_CONFIG: &str = "\
[dataset]
num_images = 8
anterior_per_image = [3, 3]
posterior_per_image = [1, 2]
feature_dim = 48
noise_level = 0.0

[train]
steps = 25
batch_size = 2
num_queries = 8
embed_dim = 8
hidden_dim = 24
";

fn odontic(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_odontic"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "command failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_tiny_config(dir: &Path) {
    std::fs::write(dir.join("tiny.toml"), TINY_CONFIG).unwrap();
}

fn read(dir: &Path, rel: &str) -> Vec<u8> {
    std::fs::read(dir.join(rel)).unwrap()
}

#[test]
fn synth_same_seed_twice_is_byte_identical() {
    let dir = TempDir::new().unwrap();
    write_tiny_config(dir.path());
    for out in ["a", "b"] {
        let r = odontic(dir.path(), &["synth", "--config", "tiny.toml", "--seed", "7", "--out", out]);
        assert_success(&r);
    }
    assert_eq!(read(dir.path(), "a/dataset.json"), read(dir.path(), "b/dataset.json"));
}

#[test]
fn train_writes_model_trace_and_report() {
    let dir = TempDir::new().unwrap();
    write_tiny_config(dir.path());
    let r = odontic(dir.path(), &["train", "--config", "tiny.toml", "--seed", "3", "--out", "t"]);
    assert_success(&r);

    let model: serde_json::Value =
        serde_json::from_slice(&read(dir.path(), "t/model.json")).unwrap();
    assert_eq!(model["format_version"], 1);
    assert_eq!(model["q"], 8);

    let trace = String::from_utf8(read(dir.path(), "t/loss_trace.csv")).unwrap();
    let lines: Vec<&str> = trace.lines().collect();
    assert_eq!(lines[0], "step,total,cls,box,dn");
    assert_eq!(lines.len(), 26, "header plus one row per step");

    let report: serde_json::Value = serde_json::from_slice(&read(dir.path(), "t/eval.json")).unwrap();
    assert!(report["ap"].is_number());
}

#[test]
fn eval_on_perfect_self_predictions_scores_ap_one() {
    let dir = TempDir::new().unwrap();
    write_tiny_config(dir.path());
    let r = odontic(dir.path(), &["synth", "--config", "tiny.toml", "--seed", "5", "--out", "d"]);
    assert_success(&r);

    // Echo every ground-truth annotation back as a full-confidence detection.
    let gt: serde_json::Value = serde_json::from_slice(&read(dir.path(), "d/dataset.json")).unwrap();
    let results: Vec<serde_json::Value> = gt["annotations"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| {
            serde_json::json!({
                "image_id": a["image_id"],
                "category_id": a["category_id"],
                "bbox": a["bbox"],
                "score": 1.0,
            })
        })
        .collect();
    std::fs::write(dir.path().join("results.json"), serde_json::to_string(&results).unwrap())
        .unwrap();

    let r = odontic(
        dir.path(),
        &["eval", "--gt", "d/dataset.json", "--pred", "results.json", "--out", "e"],
    );
    assert_success(&r);
    let report: serde_json::Value = serde_json::from_slice(&read(dir.path(), "e/eval.json")).unwrap();
    assert_eq!(report["ap"], 1.0);
    assert_eq!(report["ap50"], 1.0);
    assert_eq!(report["ap75"], 1.0);
}

#[test]
fn eval_model_mode_writes_pr_csv_and_optional_svg() {
    let dir = TempDir::new().unwrap();
    write_tiny_config(dir.path());
    assert_success(&odontic(dir.path(), &["train", "--config", "tiny.toml", "--out", "t"]));

    let r = odontic(dir.path(), &["eval", "--config", "tiny.toml", "--model", "t/model.json", "--out", "e1"]);
    assert_success(&r);
    let csv = String::from_utf8(read(dir.path(), "e1/pr_curve.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "label,iou_threshold,recall,precision,score");
    assert!(!dir.path().join("e1/pr_curve.svg").exists());

    let r = odontic(
        dir.path(),
        &["eval", "--config", "tiny.toml", "--model", "t/model.json", "--svg", "--out", "e2"],
    );
    assert_success(&r);
    let svg = String::from_utf8(read(dir.path(), "e2/pr_curve.svg")).unwrap();
    assert!(svg.starts_with("<svg "));
}

#[test]
fn match_dump_pairs_every_annotation() {
    let dir = TempDir::new().unwrap();
    write_tiny_config(dir.path());
    let r = odontic(dir.path(), &["match", "--config", "tiny.toml", "--image-index", "2", "--out", "m"]);
    assert_success(&r);
    let dump: serde_json::Value =
        serde_json::from_slice(&read(dir.path(), "m/assignment.json")).unwrap();
    assert_eq!(dump["image_id"], 2);
    let outcomes = dump["assignment"]["outcomes"].as_array().unwrap();
    assert_eq!(outcomes.len(), dump["predictions"].as_array().unwrap().len());
    let matched = outcomes.iter().filter(|o| o["outcome"] == "matched").count();
    // Pseudo predictions cover every annotation, so all of them match.
    assert_eq!(matched, dump["ground_truth"].as_array().unwrap().len());
}

#[test]
fn dn_sample_emits_groups_times_annotations_queries() {
    let dir = TempDir::new().unwrap();
    write_tiny_config(dir.path());
    let r = odontic(
        dir.path(),
        &["dn-sample", "--config", "tiny.toml", "--groups", "4", "--p", "0.5", "--out", "d"],
    );
    assert_success(&r);
    let dump: serde_json::Value =
        serde_json::from_slice(&read(dir.path(), "d/denoising_queries.json")).unwrap();
    assert_eq!(dump["rule"], "conditional");
    // 3 anterior annotations per scene in the tiny config, 4 groups.
    assert_eq!(dump["queries"].as_array().unwrap().len(), 12);
}

#[test]
fn ablate_prints_all_four_rows() {
    let dir = TempDir::new().unwrap();
    write_tiny_config(dir.path());
    let r = odontic(dir.path(), &["ablate", "--config", "tiny.toml", "--out", "a"]);
    assert_success(&r);
    let stdout = String::from_utf8_lossy(&r.stdout);
    for row in ["baseline", "+TMA", "+CCDN", "+both"] {
        assert!(stdout.contains(row), "missing row {row} in:\n{stdout}");
    }
    let rows: serde_json::Value = serde_json::from_slice(&read(dir.path(), "a/ablation.json")).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 4);
}

#[test]
fn usage_problems_exit_2() {
    let dir = TempDir::new().unwrap();
    write_tiny_config(dir.path());

    let unknown_flag = odontic(dir.path(), &["synth", "--bogus"]);
    assert_eq!(unknown_flag.status.code(), Some(2));

    let missing_config = odontic(dir.path(), &["train", "--config", "nope.toml"]);
    assert_eq!(missing_config.status.code(), Some(2));

    let missing_model = odontic(dir.path(), &["eval", "--config", "tiny.toml", "--model", "nope.json"]);
    assert_eq!(missing_model.status.code(), Some(2));

    let no_eval_mode = odontic(dir.path(), &["eval", "--config", "tiny.toml"]);
    assert_eq!(no_eval_mode.status.code(), Some(2));

    let conflicting = odontic(
        dir.path(),
        &["eval", "--model", "a.json", "--gt", "b.json", "--pred", "c.json"],
    );
    assert_eq!(conflicting.status.code(), Some(2));

    let bad_index = odontic(dir.path(), &["match", "--config", "tiny.toml", "--image-index", "99"]);
    assert_eq!(bad_index.status.code(), Some(2));
}

#[test]
fn malformed_inputs_exit_1() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("broken.toml"), "[dataset\n").unwrap();
    let r = odontic(dir.path(), &["synth", "--config", "broken.toml"]);
    assert_eq!(r.status.code(), Some(1));

    std::fs::write(dir.path().join("empty.json"), "{}").unwrap();
    write_tiny_config(dir.path());
    let r = odontic(dir.path(), &["eval", "--config", "tiny.toml", "--model", "empty.json"]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn infeasible_dataset_spec_exits_1_with_message() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[dataset]\nfeature_dim = 3\n").unwrap();
    let r = odontic(dir.path(), &["synth", "--config", "bad.toml"]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("feature_dim"));
}
