use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use aguit::datasets::load_annotation_table;
use aguit::evaluation::OracleClassifier;
use aguit::trainer::TrainingConfig;

fn aguit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aguit"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn make_data(out: &Path, n: usize, seed: u64) -> Output {
    aguit(&["make-synthetic-data", "--out-dir", p(out), "--n", &n.to_string(), "--seed", &seed.to_string()])
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                files.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn synthetic_data_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    assert!(make_data(&a, 40, 7).status.success());
    assert!(make_data(&b, 40, 7).status.success());
    assert!(make_data(&c, 40, 8).status.success());
    let (ta, tb, tc) = (tree(&a), tree(&b), tree(&c));
    assert_eq!(ta.len(), 40 * 2 + 2);
    assert!(ta == tb);
    assert!(ta != tc);
}

#[test]
fn synthetic_table_parses_and_marginals_are_balanced() {
    let dir = tempfile::tempdir().unwrap();
    assert!(make_data(dir.path(), 2000, 7).status.success());
    let index = load_annotation_table(&dir.path().join("attributes.txt"), &[]).unwrap();
    assert_eq!(index.names, ["warm_hue", "large_size", "border"]);
    assert_eq!(index.entries.len(), 2000);
    for a in 0..3 {
        let pos = index.entries.iter().filter(|(_, l)| l.values()[a] == 1).count();
        let frac = pos as f64 / 2000.0;
        assert!((0.45..=0.55).contains(&frac), "attribute {a}: {frac}");
    }
}

#[test]
fn missing_data_root_is_a_user_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let out = aguit(&["train", "--preset", "desk", "--data-root", p(&missing), "--out-dir", p(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains(p(&missing)));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(aguit(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(aguit(&["train"]).status.code(), Some(1));
    assert_eq!(aguit(&["--help"]).status.code(), Some(0));
}

#[test]
fn unwritable_output_is_an_internal_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("file");
    fs::write(&file, b"x").unwrap();
    let out = make_data(&file.join("sub"), 4, 1);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_translate_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(make_data(&data, 48, 3).status.success());

    let mut cfg = TrainingConfig::desk();
    cfg.checkpoint_interval = 2;
    cfg.log_interval = 1;
    cfg.batch_size = 4;
    let config = dir.path().join("desk.toml");
    fs::write(&config, cfg.to_toml()).unwrap();

    let run = dir.path().join("run");
    let out = aguit(&[
        "train",
        "--config",
        p(&config),
        "--data-root",
        p(&data),
        "--out-dir",
        p(&run),
        "--iterations",
        "3",
        "--labeled-fraction",
        "0.1",
        "--seed",
        "4",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("checkpoints/iter_0000002/meta.json").exists());
    assert!(run.join("checkpoints/final/networks.safetensors").exists());
    let log = fs::read_to_string(run.join("loss_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let meta: serde_json::Value =
        serde_json::from_slice(&fs::read(run.join("checkpoints/final/meta.json")).unwrap()).unwrap();
    assert_eq!(meta["config"]["labeled_fraction"], 0.1);
    assert_eq!(meta["config"]["seed"], 4);

    let ckpt = run.join("checkpoints/final");
    let input = data.join("images").join("000000.png");
    let output = dir.path().join("out.png");
    let plan = r#"[{"op":"hold"},{"op":"hold"},{"op":"hold"},{"op":"hold"},{"op":"hold"},{"op":"hold"},{"op":"hold"},{"op":"hold"},{"op":"value","v":1.0},{"op":"hold"},{"op":"reverse"}]"#;
    let out = aguit(&["translate", "--checkpoint", p(&ckpt), "--input", p(&input), "--output", p(&output), "--plan", plan]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let img = image::open(&output).unwrap();
    assert_eq!((img.width(), img.height()), (32, 32));

    let out = aguit(&["translate", "--checkpoint", p(&ckpt), "--input", p(&input), "--output", p(&output), "--plan", "[]"]);
    assert_eq!(out.status.code(), Some(1));

    let oracle = dir.path().join("oracle.safetensors");
    OracleClassifier::new(3, 3, 0).save(&oracle).unwrap();
    let eval_dir = dir.path().join("eval");
    let out = aguit(&[
        "evaluate",
        "--checkpoint",
        p(&ckpt),
        "--data-root",
        p(&data),
        "--out-dir",
        p(&eval_dir),
        "--oracle",
        p(&oracle),
        "--k",
        "2",
        "--diversity-sources",
        "3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(eval_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["images"], 48);
    assert_eq!(report["attribute_accuracy"].as_array().unwrap().len(), 3);
    assert_eq!(report["identity_diversity"], 0.0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("content preservation"));
}
