//! End-to-end command tests: the whole flow on a toy synthetic config,
//! exit codes, rerun safety, and report determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TOY_CONFIG: &str = "
seed = 7
dataset.num_classes = 8
dataset.per_class = 12
dataset.visual_dim = 16
dataset.text_dim = 12
dataset.class_margin = 4.0
dataset.view_noise = 0.5
split.old_class_count = 4
split.labeled_fraction = 0.5
encoder.backbone_dim = 24
encoder.joint_dim = 16
encoder.token_dim = 12
encoder.max_tokens = 8
tes.token_count = 3
tes.epochs = 40
tes.batch_size = 24
tes.learning_rate = 0.01
model.projection_dim = 16
model.hidden_dim = 32
train.epochs = 25
train.batch_size = 24
estimate.k_min = 4
estimate.k_max = 12
";

struct Workspace {
    root: PathBuf,
}

impl Workspace {
    fn new(tag: &str) -> Self {
        let root = std::env::temp_dir().join(format!(
            "mmgcd-cli-{tag}-{}-{}",
            std::process::id(),
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .unwrap()
                .subsec_nanos()
        ));
        std::fs::create_dir_all(&root).unwrap();
        Self { root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn write_config(&self, text: &str) -> PathBuf {
        let path = self.path("run.cfg");
        std::fs::write(&path, text).unwrap();
        path
    }
}

impl Drop for Workspace {
    fn drop(&mut self) {
        std::fs::remove_dir_all(&self.root).ok();
    }
}

fn mmgcd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmgcd"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "command failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_pipeline_runs_and_reports() {
    let ws = Workspace::new("full");
    let cfg = ws.write_config(TOY_CONFIG);
    let out_dir = ws.path("out");
    let run = |args: &[&str]| {
        let out = mmgcd(args);
        assert_success(&out);
        out
    };

    let out = run(&[
        "split",
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&out_dir),
        "--overwrite",
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("96 instances"), "split counts: {stdout}");
    assert!(stdout.contains("4 old"));
    for artifact in [
        "split.json",
        "dataset.jsonl",
        "train_view.jsonl",
        "report.txt",
    ] {
        assert!(out_dir.join(artifact).is_file(), "missing {artifact}");
    }

    let split = out_dir.join("split.json");
    run(&[
        "tes-train",
        "--config",
        path_str(&cfg),
        "--split",
        path_str(&split),
        "--out",
        path_str(&out_dir),
        "--overwrite",
    ]);
    assert!(out_dir.join("tes.ckpt").is_file());
    assert!(out_dir.join("embeddings.cache").is_file());

    run(&[
        "train",
        "--config",
        path_str(&cfg),
        "--split",
        path_str(&split),
        "--tes",
        path_str(&out_dir.join("tes.ckpt")),
        "--out",
        path_str(&out_dir),
        "--overwrite",
    ]);
    assert!(out_dir.join("dual.ckpt").is_file());
    let report = std::fs::read_to_string(out_dir.join("report.txt")).unwrap();
    assert!(report.contains("final.acc_all = "));
    assert!(report.contains("epoch.0024.loss.total = "));

    let out = run(&[
        "eval",
        "--config",
        path_str(&cfg),
        "--split",
        path_str(&split),
        "--checkpoint",
        path_str(&out_dir.join("dual.ckpt")),
        "--cache",
        path_str(&out_dir.join("embeddings.cache")),
        "--ss-kmeans",
        "--concat-tes",
        "--out",
        path_str(&out_dir),
        "--overwrite",
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("parametric"));
    assert!(stdout.contains("ss-kmeans"));
    assert!(stdout.contains("concat-tes"));
    let report = std::fs::read_to_string(out_dir.join("report.txt")).unwrap();
    for key in ["final.acc_all", "sskmeans.acc_all", "concat.acc_all"] {
        assert!(report.contains(key), "report lacks {key}");
    }

    let out = run(&[
        "estimate-k",
        "--config",
        path_str(&cfg),
        "--split",
        path_str(&split),
        "--cache",
        path_str(&out_dir.join("embeddings.cache")),
        "--out",
        path_str(&out_dir),
        "--overwrite",
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("concat"), "estimate output: {stdout}");
    let report = std::fs::read_to_string(out_dir.join("report.txt")).unwrap();
    assert!(report.contains("estimate.visual.k_hat = "));
    assert!(report.contains("estimate.concat.k_hat = "));
    assert!(report.contains("estimate.concat.score.0004 = "));
}

#[test]
fn config_errors_exit_with_code_2() {
    let ws = Workspace::new("cfg");
    let cfg = ws.write_config("bogus.key = 1\ntes.tau_a = -3\n");
    let out = mmgcd(&[
        "split",
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&ws.path("out")),
        "--overwrite",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("unknown key"), "stderr: {stderr}");
    assert!(
        stderr.contains("tau_a"),
        "all violations reported: {stderr}"
    );

    // missing input files are configuration-class failures too
    let cfg = ws.write_config(TOY_CONFIG);
    let out = mmgcd(&[
        "tes-train",
        "--config",
        path_str(&cfg),
        "--split",
        path_str(&ws.path("absent.json")),
        "--out",
        path_str(&ws.path("out")),
        "--overwrite",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_code_3() {
    let ws = Workspace::new("rt");
    let cfg = ws.write_config(TOY_CONFIG);
    let out_dir = ws.path("out");
    assert_success(&mmgcd(&[
        "split",
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&out_dir),
        "--overwrite",
    ]));
    // a corrupt checkpoint is a runtime failure
    let bad = ws.path("bad.ckpt");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    let out = mmgcd(&[
        "eval",
        "--config",
        path_str(&cfg),
        "--split",
        path_str(&out_dir.join("split.json")),
        "--checkpoint",
        path_str(&bad),
        "--out",
        path_str(&out_dir),
        "--overwrite",
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn split_rerun_is_byte_identical() {
    let ws = Workspace::new("det");
    let cfg = ws.write_config(TOY_CONFIG);
    let (a, b) = (ws.path("a"), ws.path("b"));
    for dir in [&a, &b] {
        assert_success(&mmgcd(&[
            "split",
            "--config",
            path_str(&cfg),
            "--out",
            path_str(dir),
            "--overwrite",
        ]));
    }
    assert_eq!(
        std::fs::read(a.join("split.json")).unwrap(),
        std::fs::read(b.join("split.json")).unwrap(),
        "same config and seed must produce identical split files"
    );
    assert_eq!(
        std::fs::read(a.join("dataset.jsonl")).unwrap(),
        std::fs::read(b.join("dataset.jsonl")).unwrap()
    );
}

#[test]
fn fresh_run_directories_without_overwrite() {
    let ws = Workspace::new("fresh");
    let cfg = ws.write_config(TOY_CONFIG);
    let out_dir = ws.path("out");
    for _ in 0..2 {
        assert_success(&mmgcd(&[
            "split",
            "--config",
            path_str(&cfg),
            "--out",
            path_str(&out_dir),
        ]));
    }
    let runs: Vec<_> = std::fs::read_dir(&out_dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("run-"))
        .collect();
    assert_eq!(runs.len(), 2, "each invocation gets a fresh run directory");
    for run in runs {
        assert!(run.path().join("split.json").is_file());
    }
}

#[test]
fn seed_override_changes_the_split() {
    let ws = Workspace::new("seed");
    let cfg = ws.write_config(TOY_CONFIG);
    let (a, b) = (ws.path("a"), ws.path("b"));
    assert_success(&mmgcd(&[
        "split",
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&a),
        "--overwrite",
    ]));
    assert_success(&mmgcd(&[
        "split",
        "--config",
        path_str(&cfg),
        "--seed",
        "99",
        "--out",
        path_str(&b),
        "--overwrite",
    ]));
    assert_ne!(
        std::fs::read(a.join("split.json")).unwrap(),
        std::fs::read(b.join("split.json")).unwrap()
    );
    let report = std::fs::read_to_string(b.join("report.txt")).unwrap();
    assert!(report.contains("config.seed = 99"));
}

#[test]
fn eval_requires_something_to_evaluate() {
    let ws = Workspace::new("evalarg");
    let cfg = ws.write_config(TOY_CONFIG);
    let out_dir = ws.path("out");
    assert_success(&mmgcd(&[
        "split",
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&out_dir),
        "--overwrite",
    ]));
    let out = mmgcd(&[
        "eval",
        "--config",
        path_str(&cfg),
        "--split",
        path_str(&out_dir.join("split.json")),
        "--out",
        path_str(&out_dir),
        "--overwrite",
    ]);
    assert_eq!(out.status.code(), Some(2));
    // --concat-tes without a cache is a usage error as well
    let out = mmgcd(&[
        "eval",
        "--config",
        path_str(&cfg),
        "--split",
        path_str(&out_dir.join("split.json")),
        "--concat-tes",
        "--out",
        path_str(&out_dir),
        "--overwrite",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn checkpoint_class_mismatch_is_reported() {
    let ws = Workspace::new("mismatch");
    let cfg = ws.write_config(TOY_CONFIG);
    let out_dir = ws.path("out");
    let run = |args: &[&str]| {
        let out = mmgcd(args);
        assert_success(&out);
    };
    run(&[
        "split",
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&out_dir),
        "--overwrite",
    ]);
    run(&[
        "tes-train",
        "--config",
        path_str(&cfg),
        "--split",
        path_str(&out_dir.join("split.json")),
        "--out",
        path_str(&out_dir),
        "--overwrite",
    ]);
    run(&[
        "train",
        "--config",
        path_str(&cfg),
        "--split",
        path_str(&out_dir.join("split.json")),
        "--tes",
        path_str(&out_dir.join("tes.ckpt")),
        "--out",
        path_str(&out_dir),
        "--overwrite",
    ]);
    // a split with fewer classes makes the checkpoint incompatible
    let small = TOY_CONFIG.replace("dataset.num_classes = 8", "dataset.num_classes = 6");
    let small_cfg = ws.path("small.cfg");
    std::fs::write(&small_cfg, small).unwrap();
    let small_out = ws.path("small");
    run(&[
        "split",
        "--config",
        path_str(&small_cfg),
        "--out",
        path_str(&small_out),
        "--overwrite",
    ]);
    let out = mmgcd(&[
        "eval",
        "--config",
        path_str(&small_cfg),
        "--split",
        path_str(&small_out.join("split.json")),
        "--checkpoint",
        path_str(&out_dir.join("dual.ckpt")),
        "--out",
        path_str(&small_out),
        "--overwrite",
    ]);
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("classes"), "stderr: {stderr}");
}

#[test]
fn eval_is_deterministic_across_reruns() {
    let ws = Workspace::new("evaldet");
    let cfg = ws.write_config(TOY_CONFIG);
    let out_dir = ws.path("out");
    let run = |args: &[&str]| assert_success(&mmgcd(args));
    run(&[
        "split",
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&out_dir),
        "--overwrite",
    ]);
    run(&[
        "tes-train",
        "--config",
        path_str(&cfg),
        "--split",
        path_str(&out_dir.join("split.json")),
        "--out",
        path_str(&out_dir),
        "--overwrite",
    ]);
    let mut reports = Vec::new();
    for name in ["e1", "e2"] {
        let dir = ws.path(name);
        run(&[
            "eval",
            "--config",
            path_str(&cfg),
            "--split",
            path_str(&out_dir.join("split.json")),
            "--cache",
            path_str(&out_dir.join("embeddings.cache")),
            "--ss-kmeans",
            "--concat-tes",
            "--out",
            path_str(&dir),
            "--overwrite",
        ]);
        let text = std::fs::read_to_string(dir.join("report.txt")).unwrap();
        // strip the wall-clock line; everything else must match exactly
        let stable: Vec<&str> = text
            .lines()
            .filter(|l| !l.starts_with("wallclock_seconds"))
            .collect();
        reports.push(stable.join("\n"));
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn manifest_dataset_round_trips_through_pretrained_encoder() {
    // Export a synthetic run's manifest and encoder archive, then drive
    // the pipeline from the manifest with the pretrained backend.
    let ws = Workspace::new("manifest");
    let cfg = ws.write_config(TOY_CONFIG);
    let out_dir = ws.path("out");
    assert_success(&mmgcd(&[
        "split",
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&out_dir),
        "--overwrite",
    ]));
    // build the archive through the library (the CLI ships no exporter)
    let config = mmgcd_core::config::PipelineConfig::parse(TOY_CONFIG).unwrap();
    let (_, params) = mmgcd_core::data::make_synthetic_dataset(&config.synthetic_spec()).unwrap();
    let encoder = mmgcd_core::encoder::EncoderStack::synthetic(
        &params,
        &config.encoder_dims(),
        config.encoder_seed(),
    )
    .unwrap();
    let archive = ws.path("encoder.mmenc");
    encoder.save_archive(&archive).unwrap();

    let manifest_cfg = format!(
        "{TOY_CONFIG}\ndataset.kind = manifest\ndataset.manifest = {}\nencoder.backend = pretrained\nencoder.weights = {}\n",
        out_dir.join("dataset.jsonl").display(),
        archive.display()
    );
    let manifest_cfg_path = ws.path("manifest.cfg");
    std::fs::write(&manifest_cfg_path, manifest_cfg).unwrap();
    let m_out = ws.path("mout");
    assert_success(&mmgcd(&[
        "split",
        "--config",
        path_str(&manifest_cfg_path),
        "--out",
        path_str(&m_out),
        "--overwrite",
    ]));
    assert_success(&mmgcd(&[
        "tes-train",
        "--config",
        path_str(&manifest_cfg_path),
        "--split",
        path_str(&m_out.join("split.json")),
        "--out",
        path_str(&m_out),
        "--overwrite",
    ]));
    assert!(m_out.join("embeddings.cache").is_file());
}
