use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 4

[corpus]
n_speakers = 4
utts_per_speaker = 6
transcript_len = [3, 6]
template_speakers = 3
template_utts = 4

[asr]
epochs = 15
batch_size = 4

[asr.model]
encoder_layers = 1
decoder_layers = 1
model_dim = 16
heads = 2
ffn_dim = 32
dropout = 0.0

[sv]
epochs = 2

[attack]
n_targets = 2
variants = 8
max_iters = 40
frames = 16

[svd]
rows = 4

[synth]
griffin_lim_iters = 2
utts_per_target = 2

[metrics]
enroll_utts = 2
decode_max_len = 12
"#;

fn ghostvec(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ghostvec")).args(args).arg("--out").arg(out).output().unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY).unwrap();
    path.display().to_string()
}

#[test]
fn missing_prerequisite_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = ghostvec(dir.path(), &["score"]);
    assert_eq!(out.status.code(), Some(2));
    let line = String::from_utf8_lossy(&out.stderr);
    let last: serde_json::Value = serde_json::from_str(line.lines().last().unwrap()).unwrap();
    assert_eq!(last["error"], "missing_prerequisite");
    assert_eq!(last["stage"], "score");
}

#[test]
fn bad_config_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    for text in ["sede = 1\n", "[svd]\nrows = 500\n", "[attack]\nn_targets = 99\n"] {
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, text).unwrap();
        let out = ghostvec(dir.path(), &["corpus", "--config", path.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(3), "{text}");
    }
}

#[test]
fn unchanged_stage_is_a_cache_hit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let first = ghostvec(dir.path(), &["corpus", "--config", &cfg]);
    assert!(first.status.success());
    assert!(String::from_utf8_lossy(&first.stderr).contains("[corpus] done"));
    let second = ghostvec(dir.path(), &["corpus", "--config", &cfg]);
    assert!(String::from_utf8_lossy(&second.stderr).contains("[corpus] cache hit"));
    let forced = ghostvec(dir.path(), &["corpus", "--config", &cfg, "--force"]);
    assert!(String::from_utf8_lossy(&forced.stderr).contains("[corpus] done"));
    let reseeded = ghostvec(dir.path(), &["corpus", "--config", &cfg, "--seed", "5"]);
    assert!(String::from_utf8_lossy(&reseeded.stderr).contains("[corpus] done"));

    let ledger = std::fs::read_to_string(dir.path().join("ledger.jsonl")).unwrap();
    assert_eq!(ledger.lines().count(), 4);
}

#[test]
fn tiny_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = ghostvec(dir.path(), &["all", "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report/report.json")).unwrap()).unwrap();
    assert!(report.to_string().contains("Target/GhostVec"));
    for f in ["score/cer.json", "score/extras.json", "report/report.txt", "report/projection.tsv", "synth/voice_map.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let again = ghostvec(dir.path(), &["all", "--config", &cfg]);
    assert!(again.status.success());
    assert_eq!(String::from_utf8_lossy(&again.stderr).matches("cache hit").count(), 8);
}
