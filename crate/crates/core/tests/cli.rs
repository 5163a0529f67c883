use std::fs;
use std::path::{Path, PathBuf};

use randes::checkpoint;
use randes::cli::{run_with, EXIT_CONFIG, EXIT_INTEGRITY, EXIT_IO, EXIT_OK, EXIT_STRUCTURAL};
use randes::superposition::{MANIFEST_FILE, MULTI_DELTA_FILE};
use randes::tensor::Tensor;

struct Outcome {
    code: i32,
    stdout: String,
    stderr: String,
}

fn randes<S: AsRef<str>>(args: &[S]) -> Outcome {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv = std::iter::once("randes").chain(args.iter().map(AsRef::as_ref));
    let code = run_with(argv, &mut out, &mut err);
    Outcome {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

fn p(path: &Path) -> String {
    path.display().to_string()
}

/// Small synthetic checkpoints: `base.rdck` and `task{i}.rdck`.
fn synth(dir: &Path, tasks: usize) -> PathBuf {
    let out = dir.join("ck");
    let r = randes(&[
        "synth", "--out", &p(&out), "--seed", "7", "--tasks", &tasks.to_string(), "--width", "4", "--blocks", "3",
    ]);
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    out
}

fn model_flag(ck: &Path, id: &str, i: usize) -> [String; 2] {
    ["--model".into(), format!("{id}={}", p(&ck.join(format!("task{i}.rdck"))))]
}

fn compress(ck: &Path, store: &Path, ids: &[(&str, usize)], extra: &[&str]) -> Outcome {
    let mut args = vec!["compress".to_string(), "--base".into(), p(&ck.join("base.rdck")), "--out".into(), p(store)];
    for (id, i) in ids {
        args.extend(model_flag(ck, id, *i));
    }
    args.extend(extra.iter().map(|s| s.to_string()));
    randes(&args)
}

#[test]
fn single_model_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let ck = synth(dir.path(), 1);
    let store = dir.path().join("store");
    let r = compress(&ck, &store, &[("a", 0)], &["--lambda", "1"]);
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    let summary: serde_json::Value = serde_json::from_str(&r.stdout).unwrap();
    assert_eq!(summary["tasks"][0]["task_id"], "a");

    let out = dir.path().join("a.rdck");
    let r = randes(&["retrieve", "--store", &p(&store), "--base", &p(&ck.join("base.rdck")), "--task", "a", "--out", &p(&out)]);
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    let original = fs::read(ck.join("task0.rdck")).unwrap();
    let retrieved = fs::read(&out).unwrap();
    assert_eq!(checkpoint::payload_sha256(&original).unwrap(), checkpoint::payload_sha256(&retrieved).unwrap());
    assert!(checkpoint::decode(&retrieved).unwrap().bit_eq(&checkpoint::decode(&original).unwrap()));
}

#[test]
fn every_task_is_retrievable() {
    let dir = tempfile::tempdir().unwrap();
    let ck = synth(dir.path(), 3);
    let store = dir.path().join("store");
    assert_eq!(compress(&ck, &store, &[("a", 0), ("b", 1), ("c", 2)], &["--lambda", "0.5"]).code, EXIT_OK);
    for id in ["a", "b", "c"] {
        let out = dir.path().join(format!("{id}.rdck"));
        let r = randes(&["retrieve", "--store", &p(&store), "--base", &p(&ck.join("base.rdck")), "--task", id, "--out", &p(&out)]);
        assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
        assert_eq!(checkpoint::read(&out).unwrap().len(), 2 * 3 + 2);
    }
    assert!(!store.join(".randes.lock").exists());
}

#[test]
fn error_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ck = synth(dir.path(), 2);
    let store = dir.path().join("store");

    assert_eq!(compress(&ck, &store, &[("a", 0), ("a", 1)], &[]).code, EXIT_CONFIG);
    assert_eq!(compress(&ck, &store, &[("a", 0)], &["--mode", "rd"]).code, EXIT_CONFIG);
    assert_eq!(compress(&ck, &store, &[("a", 0)], &["--lambda", "3"]).code, EXIT_CONFIG);
    assert_eq!(compress(&ck, &store, &[("a", 0)], &["--mode", "rd", "--allow-non-orthogonal"]).code, EXIT_OK);

    let missing = randes(&["compress", "--base", &p(&ck.join("nope.rdck")), "--model", &format!("a={}", p(&ck.join("task0.rdck"))), "--out", &p(&store)]);
    assert_eq!(missing.code, EXIT_IO);

    let mut bad = checkpoint::read(ck.join("task1.rdck")).unwrap();
    *bad.get_mut("blocks.1.mlp.weight").unwrap() = Tensor::zeros(&[4, 5]);
    checkpoint::write(ck.join("task9.rdck"), &bad).unwrap();
    let r = compress(&ck, &store, &[("a", 0), ("bad", 9)], &[]);
    assert_eq!(r.code, EXIT_STRUCTURAL);
    assert!(r.stderr.contains("blocks.1.mlp.weight"), "{}", r.stderr);

    assert_eq!(compress(&ck, &store, &[("a", 0), ("b", 1)], &[]).code, EXIT_OK);
    let out = dir.path().join("x.rdck");
    let retrieve = |base: &Path, task: &str| {
        randes(&["retrieve", "--store", &p(&store), "--base", &p(base), "--task", task, "--out", &p(&out)]).code
    };
    assert_eq!(retrieve(&ck.join("task0.rdck"), "a"), EXIT_INTEGRITY);
    assert_eq!(retrieve(&ck.join("base.rdck"), "zzz"), EXIT_CONFIG);
    assert_eq!(retrieve(&ck.join("base.rdck"), "b"), EXIT_OK);

    fs::write(ck.join("garbage.rdck"), b"not a checkpoint").unwrap();
    assert_eq!(retrieve(&ck.join("garbage.rdck"), "a"), EXIT_INTEGRITY);
    assert_eq!(randes(&["compress"]).code, EXIT_CONFIG);
}

#[test]
fn add_then_remove_restores_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let ck = synth(dir.path(), 3);
    let store = dir.path().join("store");
    assert_eq!(compress(&ck, &store, &[("a", 0), ("b", 1)], &[]).code, EXIT_OK);
    let manifest = fs::read(store.join(MANIFEST_FILE)).unwrap();
    let md = checkpoint::read(store.join(MULTI_DELTA_FILE)).unwrap();
    let base = p(&ck.join("base.rdck"));

    let mut add = vec!["add".to_string(), "--store".into(), p(&store), "--base".into(), base.clone()];
    add.extend(model_flag(&ck, "c", 2));
    assert_eq!(randes(&add).code, EXIT_OK);
    assert_ne!(fs::read(store.join(MANIFEST_FILE)).unwrap(), manifest);
    assert_eq!(randes(&add).code, EXIT_CONFIG);

    let mut wrong = vec!["remove".to_string(), "--store".into(), p(&store), "--base".into(), base.clone()];
    wrong.extend(model_flag(&ck, "c", 1));
    assert_eq!(randes(&wrong).code, EXIT_INTEGRITY);

    let mut remove = vec!["remove".to_string(), "--store".into(), p(&store), "--base".into(), base];
    remove.extend(model_flag(&ck, "c", 2));
    assert_eq!(randes(&remove).code, EXIT_OK);
    assert_eq!(fs::read(store.join(MANIFEST_FILE)).unwrap(), manifest);
    let after = checkpoint::read(store.join(MULTI_DELTA_FILE)).unwrap();
    assert!(randes::tensor::sub(&after, &md).unwrap().max_abs() <= 1e-6);
}

#[test]
fn hot_adds_grow_only_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let ck = synth(dir.path(), 12);
    let store = dir.path().join("store");
    assert_eq!(compress(&ck, &store, &[("t0", 0)], &[]).code, EXIT_OK);
    let payload = fs::metadata(store.join(MULTI_DELTA_FILE)).unwrap().len();
    let mut manifest = fs::metadata(store.join(MANIFEST_FILE)).unwrap().len();
    for i in 1..12 {
        let mut args = vec!["add".to_string(), "--store".into(), p(&store), "--base".into(), p(&ck.join("base.rdck"))];
        args.extend(model_flag(&ck, &format!("t{i}"), i));
        assert_eq!(randes(&args).code, EXIT_OK);
        assert_eq!(fs::metadata(store.join(MULTI_DELTA_FILE)).unwrap().len(), payload);
        let m = fs::metadata(store.join(MANIFEST_FILE)).unwrap().len();
        assert!(m > manifest && m - manifest < 1024);
        manifest = m;
    }
}

#[test]
fn eight_task_store_is_about_one_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("ck");
    assert_eq!(randes(&["synth", "--out", &p(&ck), "--tasks", "8"]).code, EXIT_OK);
    let store = dir.path().join("store");
    let ids: Vec<(String, usize)> = (0..8).map(|i| (format!("task{i}"), i)).collect();
    let ids: Vec<(&str, usize)> = ids.iter().map(|(s, i)| (s.as_str(), *i)).collect();
    let r = compress(&ck, &store, &ids, &["--lambda", "0.5"]);
    assert_eq!(r.code, EXIT_OK);
    let total: u64 = [MULTI_DELTA_FILE, MANIFEST_FILE]
        .iter()
        .map(|f| fs::metadata(store.join(f)).unwrap().len())
        .sum();
    let one = fs::metadata(ck.join("task0.rdck")).unwrap().len();
    assert!((total as f64) < 1.05 * one as f64, "{total} vs {one}");
}

#[test]
fn inputs_are_never_modified() {
    let dir = tempfile::tempdir().unwrap();
    let ck = synth(dir.path(), 2);
    let hash = |f: &str| checkpoint::sha256_hex(&fs::read(ck.join(f)).unwrap());
    let before: Vec<String> = ["base.rdck", "task0.rdck", "task1.rdck"].iter().map(|f| hash(f)).collect();
    let store = dir.path().join("store");
    assert_eq!(compress(&ck, &store, &[("a", 0), ("b", 1)], &[]).code, EXIT_OK);
    let r = randes(&["retrieve", "--store", &p(&store), "--base", &p(&ck.join("base.rdck")), "--task", "a", "--out", &p(&ck.join("base.rdck"))]);
    assert_eq!(r.code, EXIT_CONFIG);
    let after: Vec<String> = ["base.rdck", "task0.rdck", "task1.rdck"].iter().map(|f| hash(f)).collect();
    assert_eq!(before, after);
}

#[test]
fn analyze_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let ck = synth(dir.path(), 3);
    let store = dir.path().join("store");
    assert_eq!(compress(&ck, &store, &[("a", 0), ("b", 1), ("c", 2)], &["--lambda", "0.5"]).code, EXIT_OK);

    let mut args = vec!["analyze".to_string(), "--base".into(), p(&ck.join("base.rdck")), "--store".into(), p(&store)];
    for (id, i) in [("a", 0), ("b", 1), ("c", 2)] {
        args.extend(model_flag(&ck, id, i));
    }
    let r = randes(&args);
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    let reports: serde_json::Value = serde_json::from_str(&r.stdout).unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 3);
    assert_eq!(reports[0]["lambda"], 0.5);
    let (d, e) = (reports[1]["direct_norm"].as_f64().unwrap(), reports[1]["expansion_norm"].as_f64().unwrap());
    assert!((d - e).abs() <= 1e-5 * d);

    let out = dir.path().join("report");
    let mut args = vec!["analyze".to_string(), "--base".into(), p(&ck.join("base.rdck")), "--mode".into(), "identity".into(), "--out".into(), p(&out)];
    for (id, i) in [("a", 0), ("b", 1)] {
        args.extend(model_flag(&ck, id, i));
    }
    assert_eq!(randes(&args).code, EXIT_OK);
    assert!(out.join("report.json").exists());
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

fn sweep_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("sweep_config.json");
    fs::write(&path, body).unwrap();
    path
}

const SMALL: &str = r#""num_tasks": 2,
    "arch": {"width": 6, "blocks": 2, "d_in": 3, "d_out": 2},
    "train": {"n_train": 64, "n_heldout": 32, "pretrain_steps": 40, "finetune_steps": 40}"#;

#[test]
fn lambda_sweep_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = sweep_config(dir.path(), &format!("{{ \"axis\": \"lambda\", {SMALL} }}"));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let r = randes(&["sweep", "--config", &p(&cfg), "--out", &p(out)]);
        assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    }
    for f in ["sweep.json", "sweep.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
    let csv = fs::read_to_string(a.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| l.contains(",avg,")).count(), 10);

    let r = randes(&["report", "--input", &p(&a.join("sweep.json"))]);
    assert_eq!(r.code, EXIT_OK);
    let summary: serde_json::Value = serde_json::from_str(&r.stdout).unwrap();
    assert_eq!(summary["points"], 10);

    let r = randes(&["sweep", "--config", &p(&cfg), "--grid", "0.2:0.6:0.2"]);
    assert_eq!(r.code, EXIT_OK);
    let result: serde_json::Value = serde_json::from_str(&r.stdout).unwrap();
    assert_eq!(result["points"].as_array().unwrap().len(), 3);
}

#[test]
fn mode_sweep_has_six_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = sweep_config(
        dir.path(),
        &format!(
            "{{ \"axis\": \"mode\", \"lambda\": 0.5, \"settings\": [\"identity\", \"shuffle\", \"shift\", \"rsf\", \"srsf\", \"rd\"], {SMALL} }}"
        ),
    );
    let out = dir.path().join("out");
    assert_eq!(randes(&["sweep", "--config", &p(&cfg), "--out", &p(&out)]).code, EXIT_OK);
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| l.contains(",avg,")).count(), 6);

    let bad = sweep_config(dir.path(), r#"{ "axis": "depth" }"#);
    assert_eq!(randes(&["sweep", "--config", &p(&bad)]).code, EXIT_CONFIG);
}
