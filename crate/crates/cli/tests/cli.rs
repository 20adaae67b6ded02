use std::path::Path;
use std::process::{Command, Output};

use hprobe::dataset;
use hprobe::hpak::HpakFile;

fn run(store: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hprobe"))
        .arg("--store")
        .arg(store)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(store: &Path, args: &[&str]) {
    let out = run(store, args);
    assert!(
        out.status.success(),
        "`hprobe {}` exited {:?}: {}",
        args.join(" "),
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

const SMALL_SYNTH: &[&str] = &["synth", "--seed", "1", "--dim", "64", "--layers", "0", "1"];

fn small_run(store: &Path) {
    ok(store, &["create-dataset", "--num-samples", "200", "--seed", "1"]);
    ok(store, SMALL_SYNTH);
}

#[test]
fn help_for_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    for sub in [
        "create-dataset",
        "eval-probe",
        "intervene",
        "similarity",
        "synth",
        "grid",
        "report",
    ] {
        let out = run(dir.path(), &[sub, "--help"]);
        assert_eq!(out.status.code(), Some(0), "{sub}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"), "{sub}");
    }
    assert_eq!(run(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path();
    assert_eq!(run(store, &[]).status.code(), Some(2));
    assert_eq!(run(store, &["no-such-command"]).status.code(), Some(2));
    assert_eq!(run(store, &["create-dataset", "--num-samples", "lots"]).status.code(), Some(2));
    // Three step counts do not divide 1000 evenly.
    let out = run(store, &["create-dataset", "--steps-range", "1", "3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error[usage]"));
    // Missing dataset.
    assert_eq!(run(store, &["eval-probe"]).status.code(), Some(2));
}

#[test]
fn corrupt_activations_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path();
    small_run(store);
    let hpak = store.join("tree/oracle/activations.hpak");
    let bytes = std::fs::read(&hpak).unwrap();
    std::fs::write(&hpak, &bytes[..bytes.len() / 2]).unwrap();
    let out = run(store, &["eval-probe", "--steps", "50"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error[data-integrity]"));
}

#[test]
fn degenerate_activations_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path();
    small_run(store);
    let hpak = store.join("tree/oracle/activations.hpak");
    let mut f = HpakFile::read(&hpak).unwrap();
    for block in &mut f.data {
        block.iter_mut().for_each(|v| *v = 1.0);
    }
    f.write(&hpak).unwrap();
    let out = run(store, &["eval-probe", "--steps", "50"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error[numerical]"));
}

#[test]
fn default_dataset_is_balanced() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path();
    ok(store, &["create-dataset"]);
    let path = store.join("tree/dataset.jsonl");
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 1000);
    let examples = dataset::read_dataset(&path).unwrap();
    assert_eq!(examples.iter().filter(|e| e.steps == 1).count(), 500);
    assert_eq!(examples.iter().filter(|e| e.steps == 2).count(), 500);
    assert!(examples.iter().all(|e| (1..=2).contains(&e.tree.depth_max())));
    assert!(store.join("tree/dataset.composition.json").is_file());
}

#[test]
fn one_artifact_per_projection_dimension() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path();
    small_run(store);
    ok(
        store,
        &["eval-probe", "--seed", "1", "--steps", "100", "--layers", "1", "--proj-dims", "2", "3", "4", "5"],
    );
    let layer = store.join("tree/oracle/1");
    for p in 2..=5 {
        assert!(layer.join(format!("probe-distance-p{p}.json")).is_file(), "p={p}");
        assert!(layer.join(format!("subspace-p{p}.json")).is_file(), "p={p}");
    }
    assert!(!layer.join("probe-distance-p6.json").exists());
    assert!(!store.join("tree/oracle/0/eval.json").exists());
    let eval: serde_json::Value =
        serde_json::from_slice(&std::fs::read(layer.join("eval.json")).unwrap()).unwrap();
    assert_eq!(eval.as_array().unwrap().len(), 4);
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let probe = ["eval-probe", "--seed", "2", "--steps", "100", "--layers", "0"];
    for store in [a.path(), b.path()] {
        small_run(store);
        ok(store, &probe);
    }
    for file in [
        "dataset.jsonl",
        "oracle/activations.hpak",
        "oracle/responses.jsonl",
        "oracle/0/split.json",
        "oracle/0/pca.json",
        "oracle/0/probe-distance-p5.json",
        "oracle/0/probe-depth.json",
        "oracle/0/eval.json",
    ] {
        let x = std::fs::read(a.path().join("tree").join(file)).unwrap();
        let y = std::fs::read(b.path().join("tree").join(file)).unwrap();
        assert!(x == y, "{file} differs between runs");
    }
}

#[test]
fn manifest_records_inputs_and_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path();
    small_run(store);
    ok(store, &["eval-probe", "--seed", "1", "--steps", "50", "--layers", "0"]);
    let m: serde_json::Value = serde_json::from_slice(
        &std::fs::read(store.join("tree/oracle/manifest-eval-probe.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(m["command"], "eval-probe");
    assert_eq!(m["seed"], 1);
    assert!(m["config_hash"].as_str().unwrap().len() == 64);
    let outputs = m["outputs"].as_array().unwrap();
    assert!(!outputs.is_empty());
    for o in outputs {
        assert!(Path::new(o.as_str().unwrap()).is_file(), "{o}");
    }
    assert!(outputs.iter().any(|o| o.as_str().unwrap().ends_with("eval.json")));
    let inputs = m["inputs"].as_object().unwrap();
    assert!(inputs.keys().any(|k| k.ends_with("dataset.jsonl")));
    assert!(inputs.keys().any(|k| k.ends_with("activations.hpak")));
    assert!(inputs.values().all(|h| h.as_str().unwrap().len() == 64));
}
