//! Writes a small synthetic experiment: `manifest.jsonl`, `images/`,
//! `demo.toml` wired to the in-process mocks, and a seeded trace bundle.
//!
//! cargo run -p vicl-core --example make_demo -- <dir>

use std::path::PathBuf;

use vicl_core::client::trace::{synthetic_trace, TraceLayout};
use vicl_core::synthetic::{write_synthetic, SyntheticSpec};

const DEMO_TOML: &str = r#"[dataset]
manifest = "manifest.jsonl"
kind = "emotion"

[run]
mode = "vicl"
demo_count = 4
pool_size = 20
strategy = "iois"

[clients.embedder]
endpoint = "mock:clustered"
model_id = "clustered"
[clients.scorer]
endpoint = "mock:clustered"
model_id = "clustered"
[clients.generator]
endpoint = "mock:echo-label"
model_id = "echo"

[paths]
work_dir = "work"
"#;

fn main() -> vicl_core::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "demo".into()));
    let manifest = write_synthetic(&dir, &SyntheticSpec::default())?;
    std::fs::write(dir.join("demo.toml"), DEMO_TOML).map_err(|e| vicl_core::Error::io(&dir, e))?;
    let trace = synthetic_trace(1, 3, 2, &TraceLayout::spread(12));
    let json = serde_json::to_string(&trace).expect("trace serializes");
    std::fs::write(dir.join("trace.json"), json).map_err(|e| vicl_core::Error::io(&dir, e))?;
    println!("{}", manifest.display());
    Ok(())
}
