//! JSON Lines dataset manifests.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{labels_equal, DatasetKind, DemonstrationCandidate, ImageRef, LabelSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Candidates,
    Test,
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub image_path: String,
    pub label: String,
    pub sublabel: Option<String>,
    pub split: Split,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub candidates: Vec<DemonstrationCandidate>,
    pub tests: Vec<DemonstrationCandidate>,
    pub labels: LabelSet,
}

/// Loads a manifest. Relative image paths resolve against the manifest's
/// directory.
pub fn load_manifest(path: &Path, kind: DatasetKind) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest(&text, &base, kind)
}

pub fn parse_manifest(text: &str, base: &Path, kind: DatasetKind) -> Result<Dataset> {
    let mut candidates = Vec::new();
    let mut tests = Vec::new();
    let mut labels: Vec<String> = Vec::new();
    let mut ids = HashSet::new();

    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(line).map_err(|e| Error::Manifest {
            line: line_no,
            message: e.to_string(),
        })?;
        if record.id.is_empty() {
            return Err(Error::Manifest {
                line: line_no,
                message: "empty id".into(),
            });
        }
        if record.label.trim().is_empty() {
            return Err(Error::Manifest {
                line: line_no,
                message: "empty label".into(),
            });
        }
        if !ids.insert(record.id.clone()) {
            return Err(Error::DuplicateId(record.id));
        }
        if !labels.iter().any(|l| labels_equal(l, &record.label)) {
            labels.push(record.label.clone());
        }
        let image_path = PathBuf::from(&record.image_path);
        let image_path = if image_path.is_absolute() {
            image_path
        } else {
            base.join(image_path)
        };
        let candidate = DemonstrationCandidate {
            id: record.id,
            image: ImageRef::Path(image_path),
            question: kind.question().to_string(),
            answer: record.label,
            sublabel: record.sublabel,
        };
        match record.split {
            Split::Candidates => candidates.push(candidate),
            Split::Test => tests.push(candidate),
        }
    }

    if candidates.is_empty() && tests.is_empty() {
        return Err(Error::NoRecords);
    }
    Ok(Dataset {
        candidates,
        tests,
        labels: LabelSet::new(labels, kind)?,
    })
}
