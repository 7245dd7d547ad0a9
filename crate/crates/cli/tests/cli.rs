use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn fixture(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
        .to_str()
        .unwrap()
        .to_owned()
}

fn posthoc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_posthoc"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn missing_corpus_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b.bank");
    let o = posthoc(&[
        "calibrate",
        "--corpus",
        "/nonexistent/corpus.txt",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("corpus"));
    assert!(!out.exists());
}

#[test]
fn out_of_range_tau_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b.bank");
    let corpus = fixture("corpus.txt");
    let o = posthoc(&[
        "calibrate",
        "--corpus",
        &corpus,
        "--out",
        out.to_str().unwrap(),
        "--tau",
        "1.5",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn zero_threads_is_a_usage_error() {
    let o = posthoc(&[
        "--threads",
        "0",
        "probe",
        "--manifest",
        &fixture("manifests/llama.manifest"),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn probe_prints_named_paths() {
    let o = posthoc(&["probe", "--manifest", &fixture("manifests/llama.manifest")]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("layers=model.layers\n"), "{text}");
    assert!(text.contains("layers.method=named-path\n"));
    assert!(text.contains("num_layers=32\n"));
    assert!(!text.contains("fallback"));
}

#[test]
fn probe_reports_ambiguity() {
    let o = posthoc(&[
        "probe",
        "--manifest",
        &fixture("manifests/ambiguous.manifest"),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("ambiguous layers"));
}

#[test]
fn inspect_reads_bank_and_rejects_truncation() {
    let bank = fixture("rigged.bank");
    let o = posthoc(&["inspect", "--routers", &bank]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("checksum=ok"));
    assert!(text.contains("checkpoints=3,7,11"));
    assert!(text.contains("params_per_router=2080"));

    let dir = tempfile::tempdir().unwrap();
    let cut = dir.path().join("cut.bank");
    let bytes = fs::read(&bank).unwrap();
    fs::write(&cut, &bytes[..bytes.len() - 100]).unwrap();
    let o = posthoc(&["inspect", "--routers", cut.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("truncated"));
}

fn report(theta: &str, dir: &std::path::Path) -> serde_json::Value {
    let path = dir.join(format!("report-{theta}.json"));
    let o = posthoc(&[
        "generate",
        "--model-config",
        &fixture("model.cfg"),
        "--routers",
        &fixture("rigged.bank"),
        "--prompt",
        "The old engineer",
        "--theta",
        theta,
        "--max-tokens",
        "8",
        "--report",
        path.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&path).unwrap();
    assert!(text
        .lines()
        .nth(1)
        .unwrap()
        .trim_start()
        .starts_with("\"timestamp\""));
    serde_json::from_str(&text).unwrap()
}

#[test]
fn generate_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let off = report("1.0", dir.path());
    let on = report("0.5", dir.path());
    assert_eq!(off["report"]["exit_rate"], 0.0);
    assert_eq!(
        off["report"]["histogram"]["final"],
        off["report"]["tokens_total"]
    );
    assert_eq!(on["report"]["exit_rate"], 1.0);
    assert_eq!(
        on["report"]["histogram"]["L7"],
        on["report"]["tokens_total"]
    );
    assert_eq!(on["run_config"]["runtime"]["exit_threshold"], 0.5);
    assert_eq!(on["report"]["output_tokens"].as_array().unwrap().len(), 8);
}

#[test]
fn sweep_prints_each_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sweep.json");
    let o = posthoc(&[
        "sweep",
        "--model-config",
        &fixture("model.cfg"),
        "--routers",
        &fixture("rigged.bank"),
        "--prompts",
        &fixture("prompts.txt"),
        "--max-prompts",
        "4",
        "--report",
        path.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    let thetas: Vec<f64> = v["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["theta"].as_f64().unwrap())
        .collect();
    assert_eq!(thetas.len(), 4);
    assert!(thetas.windows(2).all(|w| w[0] > w[1]));
    assert_eq!(v["prompts"], 4);
}
