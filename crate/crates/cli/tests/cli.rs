use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ovsp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ovsp")).args(args).output().expect("spawn ovsp")
}

fn generate(dir: &Path) -> PathBuf {
    let out = ovsp(&["generate", dir.to_str().unwrap(), "--seed", "0"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let path = PathBuf::from(String::from_utf8(out.stdout).unwrap().trim());
    assert!(path.exists());
    path
}

fn all_zero_vectors(model: &str) -> bool {
    model
        .lines()
        .filter(|l| l.starts_with("predicate\t") || l.starts_with("phi\t"))
        .all(|l| l.rsplit('\t').next().unwrap().split(' ').all(|h| h == "0000000000000000"))
}

#[test]
fn pipeline_reports_every_mode() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = generate(tmp.path());
    let out = ovsp(&["pipeline", "-c", cfg.to_str().unwrap(), "-q"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let names: Vec<&str> = stdout.lines().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(names, ["combined", "distributional", "distributional+kb", "formal"]);
    for l in stdout.lines() {
        assert!(l.contains("MAP ") && l.contains("W-MAP ") && l.contains("MRR "), "{l}");
    }
    let work = tmp.path().join("work");
    for f in ["significance.tsv", "report.combined.txt", "run.formal.tsv", "model.distributional.txt"] {
        assert!(work.join(f).exists(), "missing {f}");
    }
    assert!(all_zero_vectors(&fs::read_to_string(work.join("model.formal.txt")).unwrap()));
}

#[test]
fn stagewise_formal_training_keeps_embeddings_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = generate(tmp.path());
    let cfg = cfg.to_str().unwrap();
    for stage in ["build-kb", "extract-lf", "sfe-extract", "select-features"] {
        let out = ovsp(&[stage, "-c", cfg, "-q"]);
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = ovsp(&["train", "-c", cfg, "--mode", "formal", "-q"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let model = fs::read_to_string(tmp.path().join("work/model.formal.txt")).unwrap();
    assert!(model.contains("\nomega\t"));
    assert!(all_zero_vectors(&model));

    let out = ovsp(&["answer", "-c", cfg, "--mode", "formal", "-q"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = ovsp(&["evaluate", "-c", cfg, "--mode", "formal", "-q"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("work/report.formal.txt").exists());
}

#[test]
fn unknown_query_in_run_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = generate(tmp.path());
    let run = tmp.path().join("bad.tsv");
    fs::write(&run, "no_such_query\t1\tNation001\t0.5\n").unwrap();
    let out = ovsp(&["evaluate", "-c", cfg.to_str().unwrap(), "--run", run.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_query"));
}

#[test]
fn missing_input_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let work = tmp.path().join("work");
    let missing = tmp.path().join("absent.tsv");
    let out = ovsp(&["build-kb", "--workdir", work.to_str().unwrap(), "--kb", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn malformed_config_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("config.json");
    fs::write(&cfg, r#"{"model":{"dim":0}}"#).unwrap();
    let out = ovsp(&["build-kb", "-c", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
