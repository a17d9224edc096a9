//! JSON Lines results: one header line, then one line per record.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::RunRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    /// Always `"header"`; distinguishes the line from records.
    #[serde(rename = "type")]
    pub kind: String,
    /// The effective configuration of the run.
    pub config: serde_json::Value,
    pub git_describe: String,
    pub seed: u64,
}

impl RunHeader {
    pub fn new(config: serde_json::Value, seed: u64) -> Self {
        Self {
            kind: "header".into(),
            config,
            git_describe: git_describe(),
            seed,
        }
    }
}

/// `git describe` of the working directory, or `"unknown"` outside a
/// repository.
pub fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .stderr(std::process::Stdio::null())
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

pub struct RecordWriter<W: Write> {
    out: W,
}

impl<W: Write> RecordWriter<W> {
    pub fn new(mut out: W, header: &RunHeader) -> Result<Self> {
        write_line(&mut out, header)?;
        Ok(Self { out })
    }

    pub fn write(&mut self, record: &RunRecord) -> Result<()> {
        write_line(&mut self.out, record)?;
        self.out.flush().map_err(|e| Error::io("<records>", e))
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

fn write_line<W: Write, T: Serialize>(out: &mut W, value: &T) -> Result<()> {
    let mut line = serde_json::to_vec(value).expect("record serializes");
    line.push(b'\n');
    out.write_all(&line).map_err(|e| Error::io("<records>", e))
}

pub fn read_records(path: &Path) -> Result<(RunHeader, Vec<RunRecord>)> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = std::io::BufReader::new(f).lines();
    let bad = |line: usize, e: serde_json::Error| Error::Manifest {
        line,
        message: format!("{}: {e}", path.display()),
    };
    let first = lines
        .next()
        .ok_or(Error::NoRecords)?
        .map_err(|e| Error::io(path, e))?;
    let header: RunHeader = serde_json::from_str(&first).map_err(|e| bad(1, e))?;
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            records.push(serde_json::from_str(&line).map_err(|e| bad(i + 2, e))?);
        }
    }
    Ok((header, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_then_records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let header = RunHeader::new(serde_json::json!({"mode": "vicl"}), 42);
        let rec = RunRecord {
            query_id: "q1".into(),
            demo_ids: vec!["a".into()],
            prompt_sha256: "00".repeat(32),
            raw_output: "joy".into(),
            prediction: Some("joy".into()),
            gold: "joy".into(),
            correct: true,
            audit: vec![],
            error: None,
        };
        let mut w = RecordWriter::new(Vec::new(), &header).unwrap();
        w.write(&rec).unwrap();
        let bytes = w.into_inner();
        std::fs::write(&path, &bytes).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        assert!(text.starts_with("{\"type\":\"header\""));
        assert!(!text.contains("\"audit\""));
        let (h, rs) = read_records(&path).unwrap();
        assert_eq!(h, header);
        assert_eq!(rs, vec![rec]);
    }
}
