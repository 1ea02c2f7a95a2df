//! End-to-end command-line flows, driven through the compiled binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_toxigan"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn");
    assert!(
        out.status.success(),
        "command failed with {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(
        &path,
        r#"
[run]
mode = "full"
max_epoch = 3
checkpoint_keep_last = 2

[data.synthetic]
classes = 2
neutral_words = 12
toxic_words_per_class = 6
mix_rate = 0.6
min_len = 3
max_len = 6
examples_per_class = 60
seed = 77

[model]
embed_dim = 8
hidden = 12
disc_hidden = 16

[embedding]
backend = "hashed_bag"
dim = 32
seed = 5

[train]
mle_epochs = 2
mle_batch_size = 32
gen_batch = 8
disc_real_per_class = 8

[ballast]
target = 20
fewshot_k = 3
"#,
    )
    .unwrap();
    path
}

fn latest_checkpoint(output_dir: &Path) -> PathBuf {
    let dir = output_dir.join("checkpoints");
    let mut names: Vec<PathBuf> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("no checkpoint dir {}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .collect();
    names.sort();
    names.pop().expect("at least one checkpoint")
}

/// Non-comment JSONL lines parsed as JSON values.
fn data_lines(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn train_writes_every_artifact_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());

    let mut logs = Vec::new();
    for name in ["a", "b"] {
        let out_dir = dir.path().join(name);
        run_ok(bin().args([
            "train",
            "--config",
            config.to_str().unwrap(),
            "--output-dir",
            out_dir.to_str().unwrap(),
        ]));
        for artifact in ["effective_config.toml", "train_log.csv", "curves.csv", "summary.json"]
        {
            assert!(out_dir.join(artifact).exists(), "{artifact} missing");
        }
        let summary: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap())
                .unwrap();
        assert_eq!(summary["summary"]["epochs_run"], 3);
        assert!(summary["augmentation_budget"].is_object());

        // keep_last = 2 bounds the retained checkpoints.
        let kept: Vec<String> = std::fs::read_dir(out_dir.join("checkpoints"))
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        assert_eq!(kept.len(), 2, "kept {kept:?}");

        let log = std::fs::read(out_dir.join("train_log.csv")).unwrap();
        let text = String::from_utf8(log.clone()).unwrap();
        assert!(
            text.starts_with("epoch,class,step_kind,g_loss,d_loss,grad_norm,ballast_size,reward_mean"),
            "unexpected header in {text}"
        );
        logs.push(log);
    }
    assert_eq!(logs[0], logs[1], "rerun with identical config must be byte-identical");
}

#[test]
fn generate_is_deterministic_and_labels_its_output() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let out_dir = dir.path().join("run");
    run_ok(bin().args([
        "train",
        "--config",
        config.to_str().unwrap(),
        "--output-dir",
        out_dir.to_str().unwrap(),
    ]));
    let checkpoint = latest_checkpoint(&out_dir);

    let gen = |name: &str, seed: &str| -> PathBuf {
        let path = dir.path().join(name);
        run_ok(bin().args([
            "generate",
            "--checkpoint",
            checkpoint.to_str().unwrap(),
            "--budget",
            "toxic1=4,toxic2=3",
            "--seed",
            seed,
            "--out",
            path.to_str().unwrap(),
        ]));
        path
    };
    let first = gen("aug_a.jsonl", "11");
    let second = gen("aug_b.jsonl", "11");
    let third = gen("aug_c.jsonl", "12");

    assert_eq!(
        std::fs::read(&first).unwrap(),
        std::fs::read(&second).unwrap(),
        "same checkpoint and seed must generate identical files"
    );
    assert_ne!(
        std::fs::read(&first).unwrap(),
        std::fs::read(&third).unwrap(),
        "different seeds should not collide"
    );

    let text = std::fs::read_to_string(&first).unwrap();
    let comments: Vec<&str> = text.lines().filter(|l| l.starts_with("# ")).collect();
    assert!(comments.iter().any(|l| l.contains("sha256=")), "provenance header missing");
    assert!(comments.iter().any(|l| l.contains("budget: 1=4,2=3")), "budget header missing");

    let rows = data_lines(&first);
    assert_eq!(rows.len(), 7);
    assert_eq!(rows.iter().filter(|r| r["label"] == "toxic1").count(), 4);
    assert_eq!(rows.iter().filter(|r| r["label"] == "toxic2").count(), 3);
    for row in &rows {
        assert_eq!(row["source"], "generated");
        assert!(row["text"].as_str().is_some_and(|t| !t.is_empty()));
    }
}

#[test]
fn empty_budget_generates_a_header_only_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let out_dir = dir.path().join("run");
    run_ok(bin().args([
        "train",
        "--config",
        config.to_str().unwrap(),
        "--output-dir",
        out_dir.to_str().unwrap(),
    ]));
    let checkpoint = latest_checkpoint(&out_dir);
    let out = dir.path().join("aug_empty.jsonl");
    run_ok(bin().args([
        "generate",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]));
    assert!(data_lines(&out).is_empty());
    assert!(std::fs::read_to_string(&out).unwrap().lines().count() >= 1);
}

fn write_eval_jsonl(path: &Path, per_class: usize, offset: usize) {
    use std::fmt::Write as _;
    let mut body = String::new();
    for i in 0..per_class {
        let k = offset + i;
        writeln!(
            body,
            r#"{{"text": "calm w{} w{}", "label": "neutral"}}"#,
            k % 7,
            (k + 3) % 7
        )
        .unwrap();
        writeln!(
            body,
            r#"{{"text": "slur{} calm jab{}", "label": "bad"}}"#,
            k % 5,
            (k + 2) % 5
        )
        .unwrap();
        writeln!(
            body,
            r#"{{"text": "hex{} w{} hex{}", "label": "worse"}}"#,
            k % 5,
            k % 7,
            (k + 1) % 5
        )
        .unwrap();
    }
    std::fs::write(path, body).unwrap();
}

#[test]
fn evaluate_reports_per_seed_and_mean_rows_per_method() {
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("train.jsonl");
    let test = dir.path().join("test.jsonl");
    let aug = dir.path().join("aug.jsonl");
    write_eval_jsonl(&train, 12, 0);
    write_eval_jsonl(&test, 6, 100);
    write_eval_jsonl(&aug, 4, 200);
    let out = dir.path().join("report.csv");

    run_ok(bin().args([
        "evaluate",
        "--train",
        train.to_str().unwrap(),
        "--test",
        test.to_str().unwrap(),
        "--aug",
        aug.to_str().unwrap(),
        "--neutral-label",
        "neutral",
        "--toxic-label",
        "bad",
        "--toxic-label",
        "worse",
        "--seeds",
        "3,4",
        "--downstream-epochs",
        "10",
        "--out",
        out.to_str().unwrap(),
    ]));

    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "method,seed,accuracy,macro_f1,hate_f1");
    // Two methods x (2 seeds + mean).
    assert_eq!(lines.len(), 1 + 6, "got:\n{text}");
    for method in ["baseline", "augmented"] {
        let rows: Vec<&&str> =
            lines.iter().filter(|l| l.starts_with(&format!("{method},"))).collect();
        assert_eq!(rows.len(), 3, "rows for {method}");
        assert!(rows.iter().any(|r| r.split(',').nth(1) == Some("mean")));
        for row in rows {
            for cell in row.split(',').skip(2) {
                let v: f64 = cell.parse().unwrap();
                assert!((0.0..=1.0).contains(&v), "metric out of range in {row}");
            }
        }
    }
}

#[test]
fn export_embeddings_writes_one_row_per_example() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let out_dir = dir.path().join("run");
    run_ok(bin().args([
        "train",
        "--config",
        config.to_str().unwrap(),
        "--output-dir",
        out_dir.to_str().unwrap(),
    ]));
    let checkpoint = latest_checkpoint(&out_dir);

    let aug = dir.path().join("aug.jsonl");
    run_ok(bin().args([
        "generate",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--budget",
        "1=5",
        "--out",
        aug.to_str().unwrap(),
    ]));

    let out = dir.path().join("embeddings.csv");
    run_ok(bin().args([
        "export-embeddings",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--data",
        aug.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]));

    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let header: Vec<&str> = lines[0].split(',').collect();
    assert_eq!(&header[..2], ["source", "label"]);
    assert_eq!(header.len(), 2 + 32, "expected the configured embedding width");
    assert_eq!(lines.len(), 1 + 5, "one row per generated example");
    for line in &lines[1..] {
        assert!(line.starts_with("generated,toxic1,"), "got {line}");
    }
}

#[test]
fn ablate_sweeps_every_mode_with_shared_data() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let out_dir = dir.path().join("sweep");
    run_ok(bin().args([
        "ablate",
        "--config",
        config.to_str().unwrap(),
        "--output-dir",
        out_dir.to_str().unwrap(),
        "--seeds",
        "5",
        "--max-epoch",
        "2",
    ]));

    let text = std::fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "mode,seed,epochs,provider_calls,ballast_refinements,avg_toxicity");
    assert_eq!(lines.len(), 1 + 3, "one row per mode:\n{text}");
    let row_for = |mode: &str| -> Vec<String> {
        lines
            .iter()
            .find(|l| l.starts_with(&format!("{mode},")))
            .unwrap_or_else(|| panic!("no row for {mode} in:\n{text}"))
            .split(',')
            .map(str::to_string)
            .collect()
    };
    let no_ballast = row_for("no_ballast");
    assert_eq!(no_ballast[3], "0", "no_ballast must not call the provider");
    assert_eq!(no_ballast[4], "0", "no_ballast must not refine");
    let full = row_for("full");
    assert_ne!(full[3], "0", "full mode refreshes neutrals every epoch");
    for mode in ["full", "no_ballast", "no_toxicity_step"] {
        assert!(
            out_dir.join("ablate").join(format!("{mode}_seed5_log.csv")).exists(),
            "missing per-run log for {mode}"
        );
    }
}

#[test]
fn config_and_usage_errors_exit_with_code_2_and_runtime_errors_with_1() {
    let dir = tempfile::tempdir().unwrap();

    // Unknown configuration field.
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[run]\nmax_epochs = 3\n").unwrap();
    let out = bin()
        .args(["train", "--config", bad.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "unknown field should exit 2");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("max_epochs"), "error should name the field, got: {stderr}");

    // Usage error from the argument parser.
    let out = bin().args(["train"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "missing required flag should exit 2");

    // Runtime error: checkpoint file that does not exist.
    let out = bin()
        .args([
            "generate",
            "--checkpoint",
            dir.path().join("nope.json").to_str().unwrap(),
            "--out",
            dir.path().join("x.jsonl").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "missing checkpoint should exit 1");
}
