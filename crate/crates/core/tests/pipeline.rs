use scommer::config::{DatasetKind, Method, RunConfig};
use scommer::data::{load_idx_dir, read_idx, write_idx, IdxArray};
use scommer::experiment::{load_data, make_tasks, run_on, write_run, RunResult};
use scommer::trainer::AuditEvent;

fn tiny(method: Method) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.method.name = method;
    cfg.dataset.kind = DatasetKind::Blobs;
    cfg.dataset.blob_classes = 6;
    cfg.dataset.train_per_class = Some(20);
    cfg.dataset.test_per_class = Some(10);
    cfg.dataset.tasks = 3;
    cfg.model.filters = [4, 8];
    cfg.model.hidden = 16;
    cfg.buffer.size = 24;
    cfg.buffer.batch_size = 8;
    cfg.training.batch_size = 8;
    cfg.training.epochs = 3;
    cfg.dropout.warmup_epochs = 1;
    cfg.ema.alpha = 0.9;
    cfg.training.audit = true;
    cfg
}

fn run(cfg: &RunConfig, seed: u64) -> RunResult {
    let split = load_data(cfg).unwrap();
    let tasks = make_tasks(cfg, &split).unwrap();
    run_on(cfg, seed, &split, &tasks).unwrap()
}

#[test]
fn runs_are_deterministic_per_seed() {
    let cfg = tiny(Method::Scommer);
    let a = run(&cfg, 4);
    let b = run(&cfg, 4);
    let c = run(&cfg, 5);
    assert_eq!(a.checkpoint, b.checkpoint);
    assert_eq!(a.scalar_metrics(), b.scalar_metrics());
    assert_eq!(a.audit, b.audit);
    assert_ne!(a.checkpoint, c.checkpoint);
}

#[test]
fn metrics_are_well_formed_for_every_method() {
    for method in [Method::Scommer, Method::Er, Method::Sgd, Method::Joint] {
        let r = run(&tiny(method), 0);
        let t = r.tasks.len();
        let inference = r.stable.as_ref().unwrap_or(&r.working);
        for i in 0..t {
            for j in 0..t {
                let entry = inference.class_il.get(i, j);
                if method == Method::Joint && i + 1 < t {
                    assert!(entry.is_none());
                } else {
                    assert_eq!(entry.is_some(), j <= i, "{method:?} ({i}, {j})");
                }
                if let Some(v) = entry {
                    assert!((0.0..=1.0).contains(&v));
                }
            }
        }
        let total: f64 = r.recency.iter().sum();
        assert!((total - 1.0).abs() < 1e-9, "{method:?} recency sums to {total}");
        let f = r.final_inference();
        for (c, ti) in f.class_il.iter().zip(&f.task_il) {
            assert!(ti >= c);
        }
        assert_eq!(r.stable.is_some(), method == Method::Scommer);
    }
}

#[test]
fn schedule_follows_epoch_and_task_boundaries() {
    let cfg = tiny(Method::Scommer);
    let r = run(&cfg, 1);
    let log = r.audit.unwrap();
    let mut epoch_refreshes = 0;
    let mut task_refreshes = 0;
    let mut evals = 0;
    for e in &log.events {
        match *e {
            AuditEvent::Step {
                semantic_changed,
                hetero_changed,
                stable_changed,
                ema_fired,
                counter_delta,
                expected_delta,
                ..
            } => {
                assert!(!semantic_changed && !hetero_changed);
                assert!(!stable_changed || ema_fired);
                assert_eq!(counter_delta, expected_delta);
            }
            AuditEvent::EpochEnd { epoch, semantic_changed, semantic_refreshed, hetero_changed, .. } => {
                assert_eq!(semantic_refreshed, epoch >= cfg.dropout.warmup_epochs);
                assert!(semantic_refreshed || !semantic_changed);
                assert!(!hetero_changed);
                epoch_refreshes += semantic_changed as usize;
            }
            AuditEvent::TaskEnd { semantic_changed, hetero_changed, .. } => {
                assert!(!semantic_changed);
                task_refreshes += hetero_changed as usize;
            }
            AuditEvent::Eval { counters_changed, working_changed, stable_changed, .. } => {
                assert!(!counters_changed && !working_changed && !stable_changed);
                evals += 1;
            }
        }
    }
    assert!(epoch_refreshes > 0);
    assert_eq!(task_refreshes, cfg.dataset.tasks);
    assert_eq!(evals, cfg.dataset.tasks);
}

#[test]
fn zero_rate_keeps_long_term_memory_at_initialization() {
    let mut cfg = tiny(Method::Scommer);
    cfg.ema.rate = 0.0;
    let r = run(&cfg, 2);
    let stable: Vec<_> = r.checkpoint.tensors.iter().filter(|(n, _)| n.starts_with("stable.")).collect();
    let split = load_data(&cfg).unwrap();
    let init = scommer::experiment::build_network(&cfg, &split, 2).unwrap();
    let mut ck = scommer::checkpoint::Checkpoint::default();
    ck.add_network("stable", &init);
    for (name, t) in stable {
        assert_eq!(Some(t), ck.get(name), "{name}");
    }
}

#[test]
fn artifacts_describe_the_run() {
    let cfg = tiny(Method::Scommer);
    let r = run(&cfg, 0);
    let dir = tempfile::tempdir().unwrap();
    write_run(dir.path(), &cfg, &r).unwrap();
    let copied = RunConfig::load(&dir.path().join("config.toml")).unwrap();
    assert_eq!(copied, cfg);
    let metrics = std::fs::read_to_string(dir.path().join("metrics.tsv")).unwrap();
    assert!(metrics.lines().skip(1).all(|l| l.split('\t').count() == 5));
    let audit = std::fs::read_to_string(dir.path().join("audit.jsonl")).unwrap();
    assert_eq!(audit.lines().count(), r.audit.as_ref().unwrap().events.len());
    let back = scommer::checkpoint::Checkpoint::load(&dir.path().join("checkpoint.bin")).unwrap();
    assert_eq!(back, r.checkpoint);
}

#[test]
fn idx_directories_round_trip_and_bad_files_name_their_path() {
    let dir = tempfile::tempdir().unwrap();
    let images = IdxArray { dims: vec![3, 2, 2], data: (0..12).collect() };
    let labels = IdxArray { dims: vec![3], data: vec![0, 1, 1] };
    for (split, n) in [("train", 3), ("t10k", 3)] {
        write_idx(&dir.path().join(format!("{split}-images-idx3-ubyte")), &images).unwrap();
        write_idx(&dir.path().join(format!("{split}-labels-idx1-ubyte")), &labels).unwrap();
        assert_eq!(read_idx(&dir.path().join(format!("{split}-images-idx3-ubyte"))).unwrap().dims[0], n);
    }
    let split = load_idx_dir(dir.path()).unwrap();
    assert_eq!(split.train.len(), 3);
    assert_eq!(split.train.item(1)[0], 4.0 / 255.0);

    let broken = dir.path().join("train-labels-idx1-ubyte");
    std::fs::write(&broken, [0u8, 0, 0x08, 0x01, 0, 0, 0, 9, 1]).unwrap();
    let err = load_idx_dir(dir.path()).unwrap_err().to_string();
    assert!(err.contains("train-labels-idx1-ubyte"), "{err}");
}

#[test]
fn shipped_configs_parse_and_validate() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(root).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen > 0);
}

#[test]
fn mnist_image_headers_are_read_exactly() {
    let desk = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-desk");
    let arr = read_idx(&desk.join("train-images-idx3-ubyte.gz")).unwrap();
    assert_eq!(arr.dims, [7996, 28, 28]);
    assert_eq!(arr.data.len(), 7996 * 28 * 28);
    if let Ok(dir) = std::env::var("SCOMMER_MNIST_DIR") {
        let split = load_idx_dir(std::path::Path::new(&dir)).unwrap();
        assert_eq!(split.train.len(), 60_000);
        assert_eq!(split.test.len(), 10_000);
    }
}
