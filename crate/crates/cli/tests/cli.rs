use std::path::Path;
use std::process::{Command, Output};

fn lfprobe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lfprobe"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tiny_config(dir: &Path) -> String {
    format!(
        r#"[run]
seed = 7

[model]
d_model = 8
n_layers = 2
max_context = 24

[pretrain]
corpus_docs = 40
doc_len = 12
steps = 4
batch_size = 4

[finetune]
n_prefixes = 8
steps = 2
batch_size = 8
mini_batch_size = 4
learning_rate = 3e-4
completion_len = 6

[selection]
top_k = 2

[sae]
activation_docs = 10
n_examples = 200

[probe]
n_triples = 30
logistic_epochs = 10

[analysis]
strong_positive_threshold = -100.0
ablation_completions = 3
generations = 5

[paths]
work_dir = "{}"

[explain]
features_per_layer = 1
"#,
        dir.join("work").display()
    )
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.toml");
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn init_config_is_a_valid_config() {
    let o = lfprobe(&["init-config", "--work-dir", "out"]);
    assert!(o.status.success());
    let cfg = lfprobe::pipeline::PipelineConfig::from_toml(&stdout(&o)).unwrap();
    assert_eq!(cfg, lfprobe::pipeline::PipelineConfig::desk("out"));
}

#[test]
fn dry_run_touches_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config(dir.path()));
    let o = lfprobe(&["--config", &cfg, "--dry-run", "all"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for stage in [
        "finetune",
        "sample-activations",
        "train-sae",
        "probe",
        "report",
    ] {
        assert!(text.contains(&format!("stage {stage}\n")), "{text}");
    }
    assert!(!dir.path().join("work").exists());
}

#[test]
fn config_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let text = tiny_config(dir.path()).replace("[probe]\n", "[probe]\nridge = 1\n");
    let cfg = write_config(dir.path(), &text);
    let o = lfprobe(&["--config", &cfg, "report"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("ridge") && err.contains("line"), "{err}");

    let o = lfprobe(&["report"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("--config"));

    let missing = tiny_config(dir.path()).replace("[analysis]", "[extra]");
    let cfg = write_config(dir.path(), &missing);
    assert!(!lfprobe(&["--config", &cfg, "finetune"]).status.success());
}

#[test]
fn full_run_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config(dir.path()));
    let work = dir.path().join("work");
    let o = lfprobe(&["--config", &cfg, "all"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(work.join("summary.json")).unwrap()).unwrap();
    for key in ["tau", "p_value", "sign_accuracy", "ablation", "baseline"] {
        assert!(summary.get(key).is_some(), "{key}");
    }
    let trace = std::fs::read_to_string(work.join("reward_trace.csv")).unwrap();
    assert!(trace.starts_with("step,mean_reward,mean_kl\n"));

    let tuned = std::fs::read(work.join("tuned.lfpm")).unwrap();
    let report = std::fs::read(work.join("summary.json")).unwrap();
    assert!(lfprobe(&["--config", &cfg, "finetune"]).status.success());
    assert_eq!(std::fs::read(work.join("tuned.lfpm")).unwrap(), tuned);
    assert!(lfprobe(&["--config", &cfg, "report"]).status.success());
    assert_eq!(std::fs::read(work.join("summary.json")).unwrap(), report);

    let o = lfprobe(&["--config", &cfg, "ablate"]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("ablate: mean reward"));
    assert!(work.join("ablation.json").exists());

    // a different seed gives a different model
    assert!(lfprobe(&["--config", &cfg, "--seed", "8", "finetune"])
        .status
        .success());
    assert_ne!(std::fs::read(work.join("tuned.lfpm")).unwrap(), tuned);
}
