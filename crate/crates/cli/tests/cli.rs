use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3
max_len = 15
synth_users = 200
synth_items = 60
synth_branching = 2
synth_depth = 2
synth_d_cont = 16
synth_d_collab = 8
levels = 2
codebook_size = 8
code_dim = 6
hidden = [16]
q_epochs = 4
d_model = 16
layers = 1
heads = 2
ff_dim = 32
d_proj = 8
d_moe = 16
epochs = 1
beam_width = 20
valid_users = 20
"#;

fn semrec(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semrec"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out-dir")
        .arg(out)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("out");
    for stage in ["synth", "train-tokenizer", "dedup", "train-recommender", "evaluate", "report"] {
        let o = semrec(&[stage], &cfg, &out);
        assert!(o.status.success(), "{stage} failed: {}", stderr(&o));
        let line = String::from_utf8_lossy(&o.stdout);
        assert!(line.starts_with(&format!("{stage}: ")), "{line}");
    }
    for f in ["sids.tsv", "metrics.json", "recommendations.tsv", "report.json", "report.svg", "recommender.ckpt"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["model"]["overall"]["recall_10"].is_number());
}

#[test]
fn evaluate_before_training_names_the_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("out");
    let o = semrec(&["evaluate"], &cfg, &out);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains(&out.display().to_string()), "{err}");
}

#[test]
fn changed_codebook_size_is_a_hash_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("out");
    for stage in ["synth", "train-tokenizer"] {
        assert!(semrec(&[stage], &cfg, &out).status.success());
    }
    let changed = write_config(dir.path(), &TINY.replace("codebook_size = 8", "codebook_size = 16"));
    let o = semrec(&["dedup"], &changed, &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("hash"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{TINY}\nlearning_rate = 0.1\n"));
    let o = semrec(&["synth"], &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn bad_subcommand_exits_one() {
    let o = Command::new(env!("CARGO_BIN_EXE_semrec")).arg("train-everything").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}
