use std::path::Path;
use std::process::{Command, Output};

fn fixtures() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn timewarp(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_timewarp"))
        .arg("--config")
        .arg(config)
        .arg("--output-dir")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

#[test]
fn missing_dependency_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = timewarp(&fixtures().join("run.toml"), dir.path(), &["permute"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("trim"));
}

#[test]
fn missing_credential_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("http.toml");
    std::fs::write(
        &config,
        format!(
            "output_dir = \"out\"\n[corpus]\npath = \"{}\"\n[backend]\nkind = \"http\"\nendpoint = \"http://127.0.0.1:9/v1/chat/completions\"\ncredential_env = \"TIMEWARP_TEST_UNSET_KEY\"\n",
            fixtures().join("corpus20.jsonl").display()
        ),
    )
    .unwrap();
    let out = dir.path().join("out");
    for stage in ["ingest", "trim", "permute"] {
        assert!(timewarp(&config, &out, &[stage]).status.success());
    }
    let o = timewarp(&config, &out, &["gen-explicit"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("TIMEWARP_TEST_UNSET_KEY"));
}

#[test]
fn bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "output_dir = \"out\"\n[corpus]\npath = \"nope.jsonl\"\n").unwrap();
    assert_eq!(timewarp(&config, dir.path(), &["ingest"]).status.code(), Some(2));
}

#[test]
fn changed_seed_reruns_seeded_stages_only() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixtures().join("run.toml");
    assert!(timewarp(&config, dir.path(), &["run-all"]).status.success());
    let o = timewarp(&config, dir.path(), &["--seed", "8", "run-all"]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    let status = |stage: &str| {
        stdout
            .lines()
            .find(|l| l.starts_with(&format!("{stage} ")))
            .unwrap()
            .to_string()
    };
    assert!(status("ingest").contains("skipped"));
    assert!(status("trim").contains("skipped"));
    assert!(status("permute").contains("ran"));
    assert!(status("verify-loss").contains("ran"));
}

#[test]
fn force_reruns_and_verify_prints_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixtures().join("run.toml");
    assert!(timewarp(&config, dir.path(), &["verify-loss"]).status.success());
    let o = timewarp(&config, dir.path(), &["--force", "verify-loss"]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.starts_with("verify-loss   ran"));
    assert!(stdout.contains("\"loss\""));
}

#[test]
fn template_overrides_invalidate_generation() {
    let dir = tempfile::tempdir().unwrap();
    let prompts = dir.path().join("prompts");
    std::fs::create_dir(&prompts).unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        format!(
            "output_dir = \"out\"\n[corpus]\npath = \"{}\"\n[backend]\ntemplates_dir = \"prompts\"\n",
            fixtures().join("corpus20.jsonl").display()
        ),
    )
    .unwrap();
    let out = dir.path().join("out");
    assert!(timewarp(&config, &out, &["run-all"]).status.success());

    let builtin = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/assets/prompts/oe_qa_gen.txt");
    let text = std::fs::read_to_string(builtin).unwrap();
    std::fs::write(prompts.join("oe_qa_gen.txt"), format!("{text}\nKeep questions short.\n")).unwrap();
    let o = timewarp(&config, &out, &["gen-explicit"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("gen-explicit  ran"));

    std::fs::write(prompts.join("oe_qa_gen.txt"), "no header\n").unwrap();
    assert_eq!(timewarp(&config, &out, &["gen-explicit"]).status.code(), Some(2));
}
