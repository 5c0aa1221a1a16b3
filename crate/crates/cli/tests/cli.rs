use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use image::{Rgb, RgbImage};
use trademark_attention::dataset::{DatasetManifest, ImageRecord, Purpose};
use trademark_attention::features::{read_store, write_store};
use trademark_attention::retrieval::{average_precision_at_k, similarity};

fn tmr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tmr"))
        .args(args)
        .env_remove("TMR_CACHE_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = tmr(args);
    assert!(
        out.status.success(),
        "tmr {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Desk preset with everything under `root`, adjusted by `edit`.
fn write_config(root: &Path, edit: impl FnOnce(&mut toml::Table)) -> PathBuf {
    let text = ok(&["--desk", "config"]);
    let mut table: toml::Table = text.parse().unwrap();
    edit(&mut table);
    let path = root.join("pipeline.toml");
    fs::write(&path, toml::to_string(&table).unwrap()).unwrap();
    path
}

fn files_in(dir: &Path) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    files
}

#[test]
fn config_round_trips_through_its_file() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&["--desk", "config"]);
    let path = dir.path().join("a.toml");
    fs::write(&path, &text).unwrap();
    let again = ok(&["-c", s(&path), "config"]);
    // relative paths are resolved against the file, everything else is unchanged
    let strip = |t: &str| -> toml::Table {
        let mut table: toml::Table = t.parse().unwrap();
        table.remove("paths");
        table
    };
    assert_eq!(strip(&text), strip(&again));
    let paths = again.parse::<toml::Table>().unwrap()["paths"].clone();
    assert_eq!(paths["cache"].as_str().unwrap(), s(&dir.path().join("cache")));
}

#[test]
fn flags_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), |_| {});
    let out = ok(&["-c", s(&config), "--seed", "9", "--cache-dir", "/tmp/elsewhere", "config"]);
    let table: toml::Table = out.parse().unwrap();
    assert_eq!(table["seed"].as_integer(), Some(9));
    assert_eq!(table["synthesis"]["rng_seed"].as_integer(), Some(9));
    assert_eq!(table["paths"]["cache"].as_str(), Some("/tmp/elsewhere"));
}

#[test]
fn cache_root_comes_from_the_environment() {
    let out = Command::new(env!("CARGO_BIN_EXE_tmr"))
        .args(["config"])
        .env("TMR_CACHE_DIR", "/tmp/from-env")
        .output()
        .unwrap();
    let table: toml::Table = String::from_utf8(out.stdout).unwrap().parse().unwrap();
    assert_eq!(table["paths"]["cache"].as_str(), Some("/tmp/from-env"));
}

#[test]
fn gen_ptl_is_reproducible_and_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["--desk", "--seed", "3", "gen-ptl", "--out", s(out), "--count", "6"]);
    }
    let images = files_in(&a.join("images"));
    assert_eq!(images.len(), 6);
    assert_eq!(files_in(&a.join("masks")).len(), 6);
    for img in images {
        let twin = b.join("images").join(img.file_name().unwrap());
        assert_eq!(fs::read(&img).unwrap(), fs::read(twin).unwrap());
    }
    assert_eq!(
        fs::read(a.join("manifest.jsonl")).unwrap().len(),
        fs::read(b.join("manifest.jsonl")).unwrap().len()
    );
}

#[test]
fn missing_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let models = dir.path().join("models");
    assert!(!tmr(&["--desk", "train-segmenter", "--ptl", "/no/such/manifest.jsonl"]).status.success());
    assert!(!tmr(&["--desk", "train-cam"]).status.success());
    assert!(!tmr(&["--desk", "--models-dir", s(&models), "extract", "--method", "ATRHA_MAC", "--catalog", "/nope"])
        .status
        .success());
    assert!(!tmr(&["extract", "--method", "NOT_A_METHOD"]).status.success());
}

#[test]
fn extract_resume_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let bench = root.join("bench");
    ok(&["--desk", "--seed", "5", "gen-bench", "--out", s(&bench), "--identities", "5", "--overlays", "2"]);
    let config = write_config(root, |t| {
        let paths = t["paths"].as_table_mut().unwrap();
        paths.insert("catalog".into(), s(&bench.join("catalog.jsonl")).into());
        paths.insert("eval".into(), s(&bench.join("eval.jsonl")).into());
        t["eval"].as_table_mut().unwrap().insert("k".into(), 4.into());
    });
    let c = s(&config);

    let first = ok(&["-c", c, "extract", "--method", "MAC"]);
    assert!(first.contains("15 descriptors (15 new)"), "{first}");
    let store_path = PathBuf::from(first.trim().rsplit(" in ").next().unwrap());
    let store = read_store(&store_path).unwrap();
    assert_eq!(store.tag, "MAC");
    let catalog = DatasetManifest::read(&bench.join("catalog.jsonl")).unwrap();
    assert_eq!(store.ids, catalog.records.iter().map(|r| r.id.clone()).collect::<Vec<_>>());

    // an interrupted run leaves a prefix; the next run fills in only the rest
    write_store(&store_path, &store.tag, store.dim, &store.ids[..9], &store.values[..9 * store.dim]).unwrap();
    let resumed = ok(&["-c", c, "extract", "--method", "MAC"]);
    assert!(resumed.contains("15 descriptors (6 new)"), "{resumed}");
    assert_eq!(read_store(&store_path).unwrap().values, store.values);
    assert!(ok(&["-c", c, "extract", "--method", "MAC"]).contains("(0 new)"));

    ok(&["-c", c, "evaluate", "--method", "MAC"]);
    let jsonl = fs::read_to_string(root.join("reports/MAC.jsonl")).unwrap();
    let summary: serde_json::Value = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
    assert!(summary["nar"].is_number());
    assert!(fs::read_to_string(root.join("reports/MAC.txt")).unwrap().contains("MAP@4"));

    // brute-force MAP@4 from the stored vectors
    let eval = DatasetManifest::read(&bench.join("eval.jsonl")).unwrap();
    let mut total = 0.0;
    for q in &eval.records {
        let qi = store.ids.iter().position(|id| *id == q.id).unwrap();
        let row = |i: usize| &store.values[i * store.dim..(i + 1) * store.dim];
        let rel = q.relevant_ids.as_ref().unwrap();
        let mut scored: Vec<(f64, bool, &str)> = (0..store.ids.len())
            .filter(|&i| i != qi)
            .map(|i| (similarity(row(qi), row(i)).unwrap(), rel.contains(&store.ids[i]), store.ids[i].as_str()))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(b.2)));
        total += average_precision_at_k(scored.iter().map(|x| x.2), rel, 4).unwrap();
    }
    let oracle = total / eval.len() as f64;
    assert!((summary["map_at_k"].as_f64().unwrap() - oracle).abs() < 1e-12);

    let wrong = tmr(&["-c", c, "evaluate", "--method", "SPOC", "--store", s(&store_path)]);
    assert!(!wrong.status.success());
    assert!(String::from_utf8_lossy(&wrong.stderr).contains("configured method is SPOC"));
}

#[test]
fn whitened_methods_fit_and_reuse_a_whitening() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let bench = root.join("bench");
    ok(&["--desk", "gen-bench", "--out", s(&bench), "--identities", "4", "--overlays", "2"]);
    let config = write_config(root, |t| {
        t["paths"].as_table_mut().unwrap().insert("catalog".into(), s(&bench.join("catalog.jsonl")).into());
        t["features"].as_table_mut().unwrap().insert("whitening_dims".into(), 8.into());
    });
    let out = ok(&["-c", s(&config), "extract", "--method", "RMAC"]);
    assert!(out.contains("12 descriptors"), "{out}");
    let whitenings: Vec<_> = files_in(&root.join("models"))
        .into_iter()
        .filter(|p| p.file_name().unwrap().to_str().unwrap().starts_with("whitening-RMAC-"))
        .collect();
    assert_eq!(whitenings.len(), 1);
    let store = read_store(&PathBuf::from(out.trim().rsplit(" in ").next().unwrap())).unwrap();
    assert_eq!(store.dim, 8);
}

#[test]
fn cache_lock_blocks_a_second_run() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    fs::create_dir_all(&cache).unwrap();
    fs::write(cache.join(".lock"), "1").unwrap();
    let bench = dir.path().join("bench");
    ok(&["--desk", "gen-bench", "--out", s(&bench), "--identities", "2", "--overlays", "1"]);
    let out = tmr(&[
        "--desk",
        "--cache-dir",
        s(&cache),
        "--models-dir",
        s(&dir.path().join("models")),
        "extract",
        "--method",
        "MAC",
        "--catalog",
        s(&bench.join("catalog.jsonl")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("in use"));
}

#[test]
fn train_segmenter_then_remove_text() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let ptl = root.join("ptl");
    ok(&["--desk", "gen-ptl", "--out", s(&ptl), "--count", "8"]);
    let models = root.join("models");
    let out = ok(&[
        "--desk",
        "--models-dir",
        s(&models),
        "train-segmenter",
        "--ptl",
        s(&ptl.join("manifest.jsonl")),
        "--epochs",
        "1",
    ]);
    assert!(out.contains("segmenter saved"), "{out}");
    assert!(models.join("segmenter/weights.safetensors").exists());
    assert!(models.join("segmenter/train_log.jsonl").exists());

    // blank marks have no foreground whatever the segmenter says, so all fall back
    let blank = root.join("blank");
    fs::create_dir_all(blank.join("images")).unwrap();
    let records = (0..3)
        .map(|i| {
            let rel = format!("images/b{i}.png");
            RgbImage::from_pixel(40 + i * 10, 40, Rgb([255, 255, 255])).save(blank.join(&rel)).unwrap();
            ImageRecord::new(format!("b{i}"), rel)
        })
        .collect();
    DatasetManifest::new(Purpose::Catalog, records).write(&blank.join("manifest.jsonl")).unwrap();
    let cleaned = root.join("cleaned");
    let out = ok(&[
        "--desk",
        "--models-dir",
        s(&models),
        "remove-text",
        "--catalog",
        s(&blank.join("manifest.jsonl")),
        "--out",
        s(&cleaned),
        "--dump",
    ]);
    assert!(out.contains("3 fell back"), "{out}");
    let manifest = DatasetManifest::read(&cleaned.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.records.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(), ["b0", "b1", "b2"]);
    assert!(cleaned.join("debug/b0.mask.png").exists());
    assert!(cleaned.join("debug/b0.inpainted.png").exists());
}

#[test]
fn train_cam_logs_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let types = root.join("types");
    ok(&["--desk", "gen-types", "--out", s(&types), "--per-class", "6"]);
    let config = write_config(root, |t| {
        t["paths"].as_table_mut().unwrap().insert("type_catalog".into(), s(&types.join("manifest.jsonl")).into());
        let cam = t["cam"].as_table_mut().unwrap();
        cam.insert("per_class".into(), 4.into());
        cam.insert("validation_total".into(), 6.into());
        cam.insert("epochs".into(), 1.into());
        cam.insert("batch_size".into(), 4.into());
    });
    let out = ok(&["-c", s(&config), "train-cam"]);
    assert!(out.contains("validation accuracy"), "{out}");
    let log = fs::read_to_string(root.join("models/cam/train_log.jsonl")).unwrap();
    let last: serde_json::Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
    assert!(last["validation_accuracy"].is_number());
    assert_eq!(log.lines().filter(|l| l.contains("\"loss\"")).count(), 1);
}
