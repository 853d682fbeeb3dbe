use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[dataset]
kind = "blobs"
blob_classes = 4
blob_shape = [1, 12, 12]
train_per_class = 24
test_per_class = 8
tasks = 2

[model]
filters = [4, 8]
hidden = 16

[buffer]
size = 20
batch_size = 8

[training]
batch_size = 8
epochs = 2

[seeds]
list = [0, 1]
"#;

fn scommer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scommer")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    path.to_str().unwrap().to_string()
}

fn read(path: impl AsRef<Path>) -> String {
    fs::read_to_string(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

#[test]
fn run_writes_self_describing_artifacts_and_seed_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("run");
    let o = scommer(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));

    for seed in [0, 1] {
        let dir = out.join(format!("seed-{seed}"));
        let info: serde_json::Value = serde_json::from_str(&read(dir.join("run.json"))).unwrap();
        assert_eq!(info["seed"], seed);
        assert!(info["engine_version"].is_string());
        for f in ["config.toml", "tasks.json", "metrics.tsv", "summary.json", "accuracy_matrix.tsv", "checkpoint.bin"] {
            assert!(dir.join(f).exists(), "missing {f}");
        }
    }
    let summary = read(out.join("summary.tsv"));
    let class_il = summary.lines().find(|l| l.contains("\tclass_il\t")).expect("class_il row");
    assert!(class_il.contains(" ± "), "{class_il}");
    assert!(class_il.split('\t').nth(4) == Some("2"), "{class_il}");
    assert!(stdout(&o).contains("class_il"));
}

#[test]
fn identical_invocations_give_identical_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let mut texts = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        let o = scommer(&["run", "--config", &cfg, "--seed", "3", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        let dir = out.join("seed-3");
        texts.push((
            read(dir.join("metrics.tsv")),
            read(dir.join("summary.json")),
            fs::read(dir.join("checkpoint.bin")).unwrap(),
        ));
    }
    assert!(texts[0] == texts[1]);
}

#[test]
fn override_changes_exactly_one_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let mut configs = Vec::new();
    for extra in [None, Some("gamma=0")] {
        let out = tmp.path().join(if extra.is_some() { "g0" } else { "base" });
        let mut args = vec!["run", "--config", &cfg, "--seed", "0", "--out", out.to_str().unwrap()];
        if let Some(e) = extra {
            args.extend(["--override", e]);
        }
        let o = scommer(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        configs.push(read(out.join("seed-0/config.toml")).parse::<toml::Table>().unwrap());
    }
    let mut diffs = Vec::new();
    for (section, v) in &configs[0] {
        for (key, a) in v.as_table().unwrap() {
            let b = &configs[1][section][key];
            if a != b {
                diffs.push(format!("{section}.{key}"));
            }
        }
    }
    assert_eq!(diffs, ["training.gamma"]);
    assert_eq!(configs[1]["training"]["gamma"].as_float(), Some(0.0));
}

#[test]
fn invalid_config_is_rejected_with_itemized_messages() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let o = scommer(&[
        "run",
        "--config",
        &cfg,
        "--override",
        "training.gamma=-1",
        "--override",
        "ema.rate=2",
        "--out",
        tmp.path().join("x").to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("gamma") && err.contains("ema.rate"), "{err}");

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[training]\nlearning_rate = 0.1\n").unwrap();
    let o = scommer(&["run", "--config", bad.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn missing_dataset_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("no-such-data");
    let o = scommer(&[
        "run",
        "--override",
        &format!("dataset.path={:?}", missing.to_str().unwrap()),
        "--seed",
        "0",
        "--out",
        tmp.path().join("x").to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("no-such-data"), "{}", stderr(&o));
}

#[test]
fn ablation_rows_follow_the_component_pattern_and_er_matches_direct_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("abl");
    let o = scommer(&["ablate", "--config", &cfg, "--seed", "0", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = read(out.join("ablation.tsv"));
    let rows: Vec<Vec<&str>> = table.lines().skip(1).map(|l| l.split('\t').collect()).collect();
    let pattern: Vec<[&str; 3]> = rows.iter().map(|r| [r[1], r[2], r[3]]).collect();
    assert_eq!(
        pattern,
        [
            ["true", "true", "true"],
            ["true", "true", "false"],
            ["false", "true", "false"],
            ["true", "false", "false"],
            ["false", "false", "false"],
        ]
    );
    let refs: Vec<&str> = rows.iter().map(|r| r[7]).collect();
    assert_eq!(refs, ["69.19", "67.38", "61.88", "49.44", "44.79"]);
    assert!(stdout(&o).contains("paper, full scale — not a target"));

    let direct = tmp.path().join("er");
    let o = scommer(&["run", "--config", &cfg, "--seed", "0", "--method", "er", "--out", direct.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read(out.join("er/seed-0/metrics.tsv")), read(direct.join("seed-0/metrics.tsv")));
    assert_eq!(
        fs::read(out.join("er/seed-0/checkpoint.bin")).unwrap(),
        fs::read(direct.join("seed-0/checkpoint.bin")).unwrap()
    );
}

#[test]
fn verify_lists_every_invariant_and_passes() {
    let o = scommer(&["verify"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    let text = stdout(&o);
    for id in scommer::verify::invariant_ids() {
        assert!(text.lines().any(|l| l.starts_with("PASS") && l.contains(id)), "{id} missing");
    }
}

#[test]
fn export_writes_tasks_and_lists_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("export");
    let o = scommer(&["export", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let tasks: serde_json::Value = serde_json::from_str(&read(out.join("tasks.json"))).unwrap();
    assert_eq!(tasks.as_array().unwrap().len(), 2);
    assert_eq!(tasks[1]["classes"], serde_json::json!([2, 3]));

    let run = tmp.path().join("run");
    assert!(scommer(&["run", "--config", &cfg, "--seed", "0", "--out", run.to_str().unwrap()]).status.success());
    let o = scommer(&[
        "export",
        "--checkpoint",
        run.join("seed-0/checkpoint.bin").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let listing = read(out.join("checkpoint.tsv"));
    assert!(listing.lines().any(|l| l.starts_with("working.")));
    assert!(listing.lines().any(|l| l.starts_with("stable.")));
}
