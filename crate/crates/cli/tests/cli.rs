use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vicl_core::synthetic::{write_synthetic, SyntheticSpec};

const DEMO_TOML: &str = r#"[dataset]
manifest = "manifest.jsonl"
kind = "emotion"

[run]
mode = "vicl"

[clients.embedder]
endpoint = "mock:clustered"
[clients.scorer]
endpoint = "mock:clustered"
[clients.generator]
endpoint = "mock:echo-label"
model_id = "echo"
"#;

fn vicl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vicl"))
        .args(args)
        .current_dir(dir)
        .env_remove("VICL_ENDPOINT")
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn demo() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic(dir.path(), &SyntheticSpec::default()).unwrap();
    fs::write(dir.path().join("demo.toml"), DEMO_TOML).unwrap();
    dir
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests")
}

#[test]
fn help_matches_golden_files() {
    let cwd = fixtures();
    let mut cases = vec![("help.txt".to_string(), vec!["--help".to_string()])];
    for c in [
        "build-index",
        "summarize",
        "retrieve",
        "run",
        "sweep",
        "unlearn",
        "analyze-flow",
        "mock-serve",
    ] {
        cases.push((
            format!("help-{c}.txt"),
            vec![c.to_string(), "--help".to_string()],
        ));
    }
    for (file, args) in cases {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let out = vicl(&cwd, &args);
        assert!(out.status.success(), "{args:?}");
        let golden = fs::read_to_string(cwd.join("golden").join(&file)).unwrap();
        assert_eq!(stdout(&out), golden, "{file}");
    }
}

#[test]
fn top_level_help_names_every_subcommand() {
    let text = fs::read_to_string(fixtures().join("golden/help.txt")).unwrap();
    for c in [
        "build-index",
        "summarize",
        "retrieve",
        "run",
        "sweep",
        "unlearn",
        "analyze-flow",
        "mock-serve",
    ] {
        assert!(text.contains(c), "{c}");
    }
}

#[test]
fn bogus_mode_is_a_usage_error() {
    let dir = demo();
    let out = vicl(
        dir.path(),
        &["run", "--mode", "bogus", "--config", "demo.toml"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
    let out = vicl(
        dir.path(),
        &["run", "--config", "demo.toml", "--set", "run.colour=1"],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_manifest_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("demo.toml"), DEMO_TOML).unwrap();
    let out = vicl(dir.path(), &["run", "--config", "demo.toml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unreachable_endpoint_is_a_client_error() {
    let dir = demo();
    let out = Command::new(env!("CARGO_BIN_EXE_vicl"))
        .args([
            "build-index",
            "--config",
            "demo.toml",
            "--set",
            "clients.embedder.retries=0",
        ])
        .current_dir(dir.path())
        .env("VICL_ENDPOINT", "http://127.0.0.1:9")
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn vicl_run_over_mocks_writes_records() {
    let dir = demo();
    let out = vicl(
        dir.path(),
        &["run", "--mode", "vicl", "--config", "demo.toml"],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(stdout(&out).starts_with("accuracy 1.000000 (90/90)"));
    let text = fs::read_to_string(dir.path().join("work/results-vicl.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 91);
    assert_eq!(lines[0]["type"], "header");
    assert_eq!(lines[0]["config"]["run"]["mode"], "vicl");
    assert_eq!(lines[1]["query_id"], "class0_t0000");
    assert_eq!(lines[1]["demo_ids"].as_array().unwrap().len(), 4);
}

#[test]
fn analyze_flow_fixture_has_one_row_per_layer() {
    let out = vicl(
        &fixtures(),
        &["analyze-flow", "--trace", "fixtures/t1.json"],
    );
    assert!(out.status.success());
    let text = stdout(&out);
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "layer,s_wp,s_pq,s_vq,s_ww");
    assert_eq!(rows.len(), 1 + 3);
    for (l, row) in rows[1..].iter().enumerate() {
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells[0], l.to_string());
        assert!(cells[1..]
            .iter()
            .all(|c| c.parse::<f64>().unwrap().is_finite()));
    }
}

#[test]
fn analyze_flow_per_trace_writes_a_directory() {
    let dir = tempfile::tempdir().unwrap();
    let t1 = fixtures().join("fixtures/t1.json");
    fs::copy(&t1, dir.path().join("a.json")).unwrap();
    fs::copy(&t1, dir.path().join("b.json")).unwrap();
    let args = [
        "analyze-flow",
        "--trace",
        "a.json",
        "--trace",
        "b.json",
        "--aggregate",
        "per-trace",
        "-o",
        "out",
    ];
    assert!(vicl(dir.path(), &args).status.success());
    let a = fs::read(dir.path().join("out/a.csv")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("out/b.csv")).unwrap());
    let side: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("out/a.json")).unwrap()).unwrap();
    assert_eq!(side["num_layers"], 3);
    assert_eq!(side["head_averaged"].as_array().unwrap().len(), 3);
    // mean over two identical traces equals either one
    let mean = vicl(
        dir.path(),
        &["analyze-flow", "--trace", "a.json", "--trace", "b.json"],
    );
    assert_eq!(mean.stdout, a);
}

#[test]
fn invalid_trace_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut bundle: serde_json::Value =
        serde_json::from_slice(&fs::read(fixtures().join("fixtures/t1.json")).unwrap()).unwrap();
    bundle["target_position"] = serde_json::json!(99);
    fs::write(dir.path().join("bad.json"), bundle.to_string()).unwrap();
    let out = vicl(dir.path(), &["analyze-flow", "--trace", "bad.json"]);
    assert_eq!(out.status.code(), Some(2));
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

#[test]
fn reruns_overwrite_outputs_with_identical_bytes() {
    let dir = demo();
    let runs: [&[&str]; 8] = [
        &["build-index", "-c", "demo.toml"],
        &["summarize", "-c", "demo.toml"],
        &["retrieve", "-c", "demo.toml", "--query", "class2_t0005"],
        &["run", "-c", "demo.toml"],
        &["run", "-c", "demo.toml", "--mode", "icl"],
        &[
            "sweep",
            "-c",
            "demo.toml",
            "--axis",
            "demo-count",
            "--values",
            "1,2,3,4",
        ],
        &["unlearn", "-c", "demo.toml", "--seed", "42"],
        &["analyze-flow", "--trace", "t1.json", "-o", "flow.csv"],
    ];
    fs::copy(
        fixtures().join("fixtures/t1.json"),
        dir.path().join("t1.json"),
    )
    .unwrap();
    let mut first_stdout = Vec::new();
    for args in runs {
        let out = vicl(dir.path(), args);
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        first_stdout.push(out.stdout);
    }
    let first = snapshot(dir.path());
    for (args, before) in runs.iter().zip(&first_stdout) {
        let out = vicl(dir.path(), args);
        assert_eq!(&out.stdout, before, "{args:?}");
    }
    let second = snapshot(dir.path());
    assert_eq!(
        first.keys().collect::<Vec<_>>(),
        second.keys().collect::<Vec<_>>()
    );
    for (k, v) in &first {
        assert!(second[k] == *v, "{} changed between runs", k.display());
    }
    assert!(first.contains_key(Path::new("work/sweep-demo_count.csv")));
    assert!(first.contains_key(Path::new("work/unlearn/spec.json")));
    assert!(first.contains_key(Path::new("flow.json")));
}
