use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

use floodlens::synth::{self, SynthConfig};

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/smoke")
}

/// Smoke fixture with a single architecture and two horizons.
fn floodlens(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_floodlens"))
        .arg("--config")
        .arg(fixture_dir().join("floodlens.toml"))
        .arg("--output")
        .arg(out.join("out"))
        .arg("--cache-dir")
        .arg(out.join("cache"))
        .args(["--architectures", "transfer_head", "--horizons", "1,2"])
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("FLOODLENS_CACHE_DIR")
        .env_remove("FLOODLENS_WIKI_BASE")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_before_build_dataset_is_a_stage_dependency_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = floodlens(dir.path(), &["train"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let msg = stderr(&o);
    assert!(msg.contains("floodlens build-dataset"), "{msg}");
}

#[test]
fn unknown_config_key_is_a_user_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[paths]\ndisaster = \"x.csv\"\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_floodlens"))
        .arg("--config")
        .arg(&cfg)
        .arg("ingest")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("disaster"), "{}", stderr(&o));
}

#[test]
fn missing_input_file_is_an_environment_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = floodlens(
        dir.path(),
        &["--disasters", "/nonexistent/disasters.csv", "ingest"],
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn held_lock_refuses_a_second_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(dir.path().join("out")).unwrap();
    fs::write(dir.path().join("out/.floodlens.lock"), "1\n").unwrap();
    let o = floodlens(dir.path(), &["ingest"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("locked"), "{}", stderr(&o));
}

fn sha(path: &Path) -> String {
    hex::encode(Sha256::digest(fs::read(path).unwrap()))
}

fn files(dir: &Path, root: &Path, out: &mut BTreeMap<String, String>) {
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            files(&p, root, out);
        } else {
            out.insert(
                p.strip_prefix(root).unwrap().to_string_lossy().into_owned(),
                sha(&p),
            );
        }
    }
}

#[test]
fn stages_are_isolated_and_manifest_is_complete() {
    let dir = tempfile::tempdir().unwrap();
    let o = floodlens(dir.path(), &["all"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("out");
    assert!(!out.join(".floodlens.lock").exists());

    let mut on_disk = BTreeMap::new();
    files(&out, &out, &mut on_disk);
    on_disk.remove("run_manifest.json");
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("run_manifest.json")).unwrap()).unwrap();
    let listed: BTreeMap<String, String> =
        serde_json::from_value(manifest["artifacts"].clone()).unwrap();
    assert_eq!(listed, on_disk);
    assert_eq!(manifest["stages"].as_array().unwrap().len(), 7);

    let cases = [
        ("features.csv", "ingest"),
        ("corpus.jsonl", "fetch-text"),
        ("embeddings/transfer_head.bin", "embed"),
        ("states/transfer_head/head.safetensors", "embed"),
        ("datasets/h2_transfer_head.csv", "build-dataset"),
        ("models/h1_statistical.json", "train"),
        ("predictions/h2_baseline.csv", "evaluate"),
        ("report.csv", "report"),
        ("figures/roc_transfer_head_1.png", "report"),
    ];
    for (artifact, stage) in cases {
        let before = fs::read(out.join(artifact)).unwrap();
        fs::remove_file(out.join(artifact)).unwrap();
        let o = floodlens(dir.path(), &[stage]);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
        assert_eq!(
            fs::read(out.join(artifact)).unwrap(),
            before,
            "{artifact} changed after rerunning {stage}"
        );
    }
}

#[test]
fn cache_dir_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("env-cache");
    let o = Command::new(env!("CARGO_BIN_EXE_floodlens"))
        .arg("--config")
        .arg(fixture_dir().join("floodlens.toml"))
        .arg("--output")
        .arg(dir.path().join("out"))
        .arg("ingest")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let o = Command::new(env!("CARGO_BIN_EXE_floodlens"))
        .arg("--config")
        .arg(fixture_dir().join("floodlens.toml"))
        .arg("--output")
        .arg(dir.path().join("out"))
        .arg("fetch-text")
        .env("FLOODLENS_CACHE_DIR", &cache)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let cached: Vec<_> = fs::read_dir(&cache).unwrap().collect();
    assert!(!cached.is_empty());
}

#[test]
fn checked_in_fixture_matches_the_generator() {
    let dir = tempfile::tempdir().unwrap();
    synth::generate(&SynthConfig::default())
        .unwrap()
        .write(dir.path())
        .unwrap();
    for name in ["disasters.csv", "damage.csv", "wiki_pages.json"] {
        assert_eq!(
            fs::read(dir.path().join(name)).unwrap(),
            fs::read(fixture_dir().join(name)).unwrap(),
            "{name} is stale; regenerate with `floodlens synth --out fixtures/smoke`"
        );
    }
}
