//! End-to-end behaviour of the pipeline commands on a tiny configuration.

use std::fs;
use std::path::Path;
use std::process::Command;

use osd_cli::checkpoint::{self, encode_knowledge, Provenance};
use osd_cli::commands::{
    cmd_analyze, cmd_eval, cmd_gen, cmd_index, cmd_pipeline, cmd_train_docs, cmd_train_task,
    max_cross_product, Layout, EMPTY_RELEVANT_GUIDANCE, HARD_AUDIT_TOLERANCE,
};
use osd_cli::RunConfig;
use osd_core::benchmark::Method;
use osd_core::{TaskType, Variant};

fn tiny(out: &Path) -> RunConfig {
    let text = format!(
        r#"
seeds = [0]
out_dir = "{}"
jobs = 1

[world]
n_entities = 40
task_entities = 40
n_relations = 6
n_docs = 8
task_docs = 8
per_doc = 2
multi_source = 10

[model]
vocab_size = 128
d_model = 16
n_layers = 1
n_heads = 2
d_ff = 32
max_seq = 32

[train.task]
learning_rate = 0.01
epochs = 3
batch_size = 8

[train.knowledge]
learning_rate = 0.01
epochs = 4
batch_size = 8

[sweep]
k_list = [1, 3]
n_eval = 8

[analysis]
n_irrelevant = 10
"#,
        out.display()
    );
    RunConfig::from_toml(&text).unwrap()
}

fn trained(out: &Path) -> RunConfig {
    let config = tiny(out);
    cmd_gen(&config).unwrap();
    cmd_train_task(&config).unwrap();
    cmd_train_docs(&config).unwrap();
    config
}

fn osd(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_osd"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, config: &RunConfig) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, config.to_toml()).unwrap();
    path.display().to_string()
}

#[test]
fn gen_writes_files_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny(&dir.path().join("out"));
    let a = cmd_gen(&config).unwrap();
    let layout = Layout::new(&config.out_dir);
    for p in [
        layout.world(),
        layout.task_world(),
        layout.corpus(),
        layout.vocab(),
        layout.model(),
        layout.instances(TaskType::Qa),
        layout.task_corpus(TaskType::Qa),
        layout.config_echo(),
    ] {
        assert!(p.exists(), "{} missing", p.display());
    }
    assert_eq!(a.n_docs, 8);
    let b = cmd_gen(&config).unwrap();
    assert_eq!(a, b);
    let echoed = RunConfig::from_toml(&fs::read_to_string(layout.config_echo()).unwrap()).unwrap();
    assert_eq!(echoed, config);
    assert!(cmd_index(&config).unwrap() > 0);
    assert!(layout.index().exists());
}

#[test]
fn binary_prints_hash_and_honours_out_dir_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny(&dir.path().join("from-config"));
    let cfg_path = write_config(dir.path(), &config);

    let env_out = dir.path().join("from-env");
    let out = Command::new(env!("CARGO_BIN_EXE_osd"))
        .args(["gen", "--config", &cfg_path])
        .env(osd_cli::OUT_DIR_ENV, &env_out)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(stdout.contains("corpus hash: "), "{stdout}");
    assert!(env_out.join("corpus.jsonl").exists());
    assert!(!dir.path().join("from-config").exists());

    let flag_out = dir.path().join("from-flag");
    let again = Command::new(env!("CARGO_BIN_EXE_osd"))
        .args([
            "gen",
            "--config",
            &cfg_path,
            "--out",
            &flag_out.display().to_string(),
        ])
        .env(osd_cli::OUT_DIR_ENV, &env_out)
        .output()
        .unwrap();
    assert!(again.status.success());
    assert!(flag_out.join("corpus.jsonl").exists());
    // same seed, same hash
    assert_eq!(String::from_utf8_lossy(&again.stdout), stdout);
}

#[test]
fn capacity_violation_exits_nonzero_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny(&dir.path().join("out"));
    config.world.n_docs = 100;
    let cfg_path = write_config(dir.path(), &config);
    let out = osd(&["gen", "--config", &cfg_path]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("facts but only"), "{stderr}");
}

#[test]
fn unknown_config_key_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[world]\nn_doc = 3\n").unwrap();
    let out = osd(&["gen", "--config", &path.display().to_string()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_doc"));
}

#[test]
fn soft_and_hard_need_the_task_checkpoint_but_entangled_does_not() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny(&dir.path().join("out"));
    cmd_gen(&config).unwrap();
    for v in [Variant::Soft, Variant::Hard] {
        config.train.variants = vec![v];
        let err = format!("{:#}", cmd_train_docs(&config).unwrap_err());
        assert!(err.contains("train-task"), "{err}");
    }
    config.train.variants = vec![Variant::Entangled];
    let s = cmd_train_docs(&config).unwrap();
    assert_eq!((s.trained, s.reused), (8, 0));
}

#[test]
fn hard_checkpoints_pass_the_orthogonality_audit_on_reload() {
    let dir = tempfile::tempdir().unwrap();
    let config = trained(&dir.path().join("out"));
    let layout = Layout::new(&config.out_dir);
    let task = checkpoint::load(&layout.task_checkpoint(0, TaskType::Qa))
        .unwrap()
        .into_task()
        .unwrap();
    let world: osd_core::benchmark::SyntheticWorld =
        serde_json::from_str(&fs::read_to_string(layout.world()).unwrap()).unwrap();
    for doc in &world.doc_ids {
        let path = layout.knowledge_checkpoint(0, Variant::Hard, TaskType::Qa, doc);
        let know = checkpoint::load(&path).unwrap().into_knowledge().unwrap();
        assert!(max_cross_product(&task, &know).unwrap() <= HARD_AUDIT_TOLERANCE);
        assert!(osd_cli::commands::report_path(&path).exists());
    }
}

#[test]
fn rerun_reuses_valid_checkpoints_and_retrains_damaged_ones() {
    let dir = tempfile::tempdir().unwrap();
    let config = trained(&dir.path().join("out"));
    let layout = Layout::new(&config.out_dir);
    let s = cmd_train_docs(&config).unwrap();
    assert_eq!((s.trained, s.reused), (0, 24));
    let t = cmd_train_task(&config).unwrap();
    assert_eq!((t.trained, t.reused), (0, 1));

    let victim = layout.knowledge_checkpoint(0, Variant::Soft, TaskType::Qa, "doc0003");
    let original = fs::read(&victim).unwrap();
    let mut damaged = original.clone();
    let n = damaged.len();
    damaged[n - 20] ^= 0xff;
    fs::write(&victim, &damaged).unwrap();
    assert!(matches!(
        checkpoint::load(&victim),
        Err(osd_cli::CheckpointError::Checksum { .. })
    ));
    let s = cmd_train_docs(&config).unwrap();
    assert_eq!((s.trained, s.reused), (1, 23));
    // deterministic retraining reproduces the original bytes
    assert_eq!(fs::read(&victim).unwrap(), original);
}

#[test]
fn trained_checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let config = trained(&dir.path().join("out"));
    let layout = Layout::new(&config.out_dir);
    for v in [Variant::Entangled, Variant::Soft, Variant::Hard] {
        let path = layout.knowledge_checkpoint(0, v, TaskType::Qa, "doc0000");
        let bytes = fs::read(&path).unwrap();
        let ckpt = checkpoint::decode(&bytes).unwrap();
        let prov = Provenance {
            task_type: ckpt.header.task_type,
            base_hash: ckpt.header.base_hash.clone(),
            fingerprint: ckpt.header.fingerprint.clone(),
        };
        let know = ckpt.into_knowledge().unwrap();
        assert_eq!(encode_knowledge(&know, &prov), bytes);
    }
}

#[test]
fn control_only_sweep_runs_without_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny(&dir.path().join("out"));
    cmd_gen(&config).unwrap();
    config.sweep.methods = vec![Method::NoAdapter];
    let report = cmd_eval(&config).unwrap();
    assert_eq!(report.failed_cells(), 0);
    assert_eq!(report.cells.len(), 2);
    assert_eq!(report.control_flat, Some(true));
    let reports = Layout::new(&config.out_dir).reports();
    assert!(reports.join("sweep.csv").exists());
    assert!(reports.join("sweep.json").exists());
    assert!(reports.join("config.resolved.toml").exists());
}

#[test]
fn sweep_with_no_adapters_fails_only_when_every_cell_fails() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny(&dir.path().join("out"));
    cmd_gen(&config).unwrap();
    // control cells succeed, adapter cells fail: the command succeeds
    let report = cmd_eval(&config).unwrap();
    assert!(report.failed_cells() > 0 && report.failed_cells() < report.cells.len());
    assert!(report.to_csv().contains("failed"));
    config.sweep.methods = vec![Method::Soft];
    let err = format!("{:#}", cmd_eval(&config).unwrap_err());
    assert!(err.contains("every sweep cell failed"), "{err}");
}

#[test]
fn k_override_sets_the_sweep_columns() {
    let dir = tempfile::tempdir().unwrap();
    let config = trained(&dir.path().join("out"));
    let cfg_path = write_config(dir.path(), &config);
    let out = osd(&[
        "eval",
        "--config",
        &cfg_path,
        "--k",
        "1,2",
        "--weight-mode",
        "score",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = fs::read_to_string(Layout::new(&config.out_dir).reports().join("sweep.csv")).unwrap();
    let ks: std::collections::BTreeSet<&str> = csv
        .lines()
        .skip(1)
        .filter(|l| l.starts_with("soft,"))
        .map(|l| l.split(',').nth(1).unwrap())
        .collect();
    assert_eq!(ks.into_iter().collect::<Vec<_>>(), vec!["1", "2"]);
    let echoed = fs::read_to_string(
        Layout::new(&config.out_dir)
            .reports()
            .join("config.resolved.toml"),
    )
    .unwrap();
    assert!(echoed.contains("weight_mode = \"score\""), "{echoed}");
}

#[test]
fn analysis_covers_all_variants_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let config = trained(&dir.path().join("out"));
    let reports = Layout::new(&config.out_dir).reports();
    let report = cmd_analyze(&config).unwrap();
    assert_eq!(report.sections.len(), 6);
    for v in ["entangled", "soft", "hard"] {
        assert!(reports.join(format!("similarity_{v}.csv")).exists());
    }
    let hard: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(reports.join("similarity_hard.json")).unwrap())
            .unwrap();
    for s in hard["sections"].as_array().unwrap() {
        assert!(s["relevant_mean"].is_f64() && s["irrelevant_mean"].is_f64());
    }
    let csv = fs::read(reports.join("similarity_soft.csv")).unwrap();
    cmd_analyze(&config).unwrap();
    assert_eq!(fs::read(reports.join("similarity_soft.csv")).unwrap(), csv);
}

#[test]
fn analysis_without_multi_source_instances_explains_itself() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny(&dir.path().join("out"));
    config.world.multi_source = 0;
    cmd_gen(&config).unwrap();
    let err = format!("{:#}", cmd_analyze(&config).unwrap_err());
    assert!(err.contains(EMPTY_RELEVANT_GUIDANCE), "{err}");
}

#[test]
fn commands_before_gen_point_at_gen() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny(&dir.path().join("out"));
    let err = format!("{:#}", cmd_train_task(&config).unwrap_err());
    assert!(err.contains("osd gen"), "{err}");
}

#[test]
fn pipeline_trains_every_stage_with_logging_disabled() {
    // no logger is installed in this test binary, so log macros are inert
    let dir = tempfile::tempdir().unwrap();
    let config = tiny(dir.path());
    let (sweep, analysis) = cmd_pipeline(&config).unwrap();
    let layout = Layout::new(&config.out_dir);
    assert!(layout.task_checkpoint(0, TaskType::Qa).exists());
    for variant in Variant::ALL {
        assert!(layout
            .knowledge_checkpoint(0, variant, TaskType::Qa, "doc0000")
            .exists());
    }
    assert_eq!(sweep.failed_cells(), 0);
    assert_eq!(analysis.sections.len(), 6);
}
