use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn cyclecert(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cyclecert"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn read_json(path: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

fn listing(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    names
}

struct SchemaDir(PathBuf);

impl jsonschema::Retrieve for SchemaDir {
    fn retrieve(&self, uri: &jsonschema::Uri<String>) -> Result<Value, Box<dyn std::error::Error + Send + Sync>> {
        let name = uri.as_str().rsplit('/').next().unwrap_or_default();
        Ok(serde_json::from_str(&fs::read_to_string(self.0.join(name))?)?)
    }
}

fn assert_schema(name: &str, doc: &Value) {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas");
    let schema = read_json(dir.join(name));
    let validator = jsonschema::options().with_retriever(SchemaDir(dir)).build(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(doc).map(|e| format!("{} at {}", e, e.instance_path())).collect();
    assert!(errors.is_empty(), "{name}: {errors:?}");
}

fn assert_error_report(out: &Output, dir: &Path, kind: &str) {
    assert_eq!(out.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stderr: Value = serde_json::from_slice(&out.stderr).expect("stderr is the error JSON");
    assert_eq!(stderr["error"]["kind"], kind);
    let file = read_json(dir.join("error.json"));
    assert_eq!(file, stderr);
    assert_schema("error.schema.json", &file);
}

#[test]
fn simulate_writes_csvs() {
    let dir = TempDir::new().unwrap();
    let out = cyclecert(&["simulate", "--system", "harmonic", "--h", "1e-3", "--horizon", "13"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(listing(dir.path()), ["crossings.csv", "trajectory.csv"]);
    let crossings = fs::read_to_string(dir.path().join("crossings.csv")).unwrap();
    // header plus two returns near 2π and 4π
    assert_eq!(crossings.lines().count(), 3, "{crossings}");
}

#[test]
fn negative_existence_exits_one() {
    let dir = TempDir::new().unwrap();
    let out = cyclecert(&["certify-existence", "--system", "linear-stable", "--h", "1e-3"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let cert = read_json(dir.path().join("existence.json"));
    assert_eq!(cert["verdict"], "failed");
    assert_eq!(cert["diagnostics"][0]["kind"], "no-return");
    assert_schema("existence.schema.json", &cert);
}

#[test]
fn attraction_refused_without_existence() {
    let dir = TempDir::new().unwrap();
    let out = cyclecert(&["certify-attraction", "--system", "linear-stable", "--h", "1e-3"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("attraction.json").exists());
    let err = read_json(dir.path().join("error.json"));
    assert_eq!(err["error"]["kind"], "precondition");
    assert_schema("error.schema.json", &err);
}

#[test]
fn blocking_errors_exit_two() {
    let dir = TempDir::new().unwrap();
    let out = cyclecert(&["certify-existence", "--system", "no-such-system"], dir.path());
    assert_error_report(&out, dir.path(), "unknown-system");

    let dir = TempDir::new().unwrap();
    let out = cyclecert(&["certify-existence", "--preset", "vdp-example1", "--gamma=-1"], dir.path());
    assert_error_report(&out, dir.path(), "invalid-parameter");

    let dir = TempDir::new().unwrap();
    let out = cyclecert(&["certify-existence", "--gamma", "-1"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let stderr: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(stderr["error"]["kind"], "usage");

    let dir = TempDir::new().unwrap();
    let out = cyclecert(&["simulate", "--system", "harmonic", "--x0", "1,0,0"], dir.path());
    assert_error_report(&out, dir.path(), "dimension-mismatch");

    let dir = TempDir::new().unwrap();
    let out = cyclecert(&["error-curve", "--system", "harmonic"], dir.path());
    assert_error_report(&out, dir.path(), "invalid-parameter");
}

#[test]
fn existence_output_is_byte_identical_across_runs_and_threads() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let args = ["certify-existence", "--preset", "vdp-example1", "--h", "2e-4"];
    let first = cyclecert(&args, a.path());
    let second = Command::new(env!("CARGO_BIN_EXE_cyclecert"))
        .args(args)
        .arg("--out")
        .arg(b.path())
        .env("CYCLECERT_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(first.status.code(), second.status.code());
    assert_eq!(listing(a.path()), ["existence.json", "steps.csv", "tube.csv"]);
    for name in listing(a.path()) {
        assert!(fs::read(a.path().join(&name)).unwrap() == fs::read(b.path().join(&name)).unwrap(), "{name} differs");
    }
    assert_schema("existence.schema.json", &read_json(a.path().join("existence.json")));
}

#[test]
fn constants_and_config_file() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("run.json");
    fs::write(&config, r#"{"system": {"id": "vanderpol", "params": {"p": 0.3}}, "x0": [1.8929, -0.5383], "h": 2e-4}"#).unwrap();
    let out_dir = dir.path().join("out");
    let out = cyclecert(&["constants", "--config", config.to_str().unwrap()], &out_dir);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(listing(&out_dir), ["constants.json"]);
    let constants = read_json(out_dir.join("constants.json"));
    assert_schema("constants.schema.json", &constants);
    assert!(constants["L"].as_f64().unwrap() > 1.0);
}
