//! Synthetic labeled datasets whose image bytes carry a `class<K>_` tag, so
//! the clustered mock embeds each class to its own basis vector.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{Dataset, ManifestRecord, Split};
use crate::types::{DatasetKind, DemonstrationCandidate, ImageRef, LabelSet};

const LABEL_NAMES: [&str; 8] = [
    "amusement",
    "anger",
    "awe",
    "contentment",
    "disgust",
    "excitement",
    "fear",
    "sadness",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub candidates_per_class: usize,
    pub tests_per_class: usize,
    /// Sub-classes per class; 0 leaves items without one.
    pub sublabels_per_class: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 3,
            candidates_per_class: 10,
            tests_per_class: 30,
            sublabels_per_class: 2,
        }
    }
}

pub fn class_label(k: usize) -> String {
    LABEL_NAMES
        .get(k)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("class{k}"))
}

fn items(spec: &SyntheticSpec, split: Split) -> Vec<ManifestRecord> {
    let (per_class, tag) = match split {
        Split::Candidates => (spec.candidates_per_class, 'c'),
        Split::Test => (spec.tests_per_class, 't'),
    };
    (0..per_class * spec.classes)
        .map(|i| {
            let k = i % spec.classes;
            let j = i / spec.classes;
            let id = format!("class{k}_{tag}{i:04}");
            ManifestRecord {
                image_path: format!("images/{id}.img"),
                label: class_label(k),
                sublabel: (spec.sublabels_per_class > 0)
                    .then(|| format!("{}/{}", class_label(k), j % spec.sublabels_per_class)),
                split,
                id,
            }
        })
        .collect()
}

fn records(spec: &SyntheticSpec) -> Result<Vec<ManifestRecord>> {
    if spec.classes == 0 || spec.candidates_per_class == 0 {
        return Err(Error::InvalidArgument(
            "synthetic data needs at least one class and one candidate per class".into(),
        ));
    }
    let mut out = items(spec, Split::Candidates);
    out.extend(items(spec, Split::Test));
    Ok(out)
}

fn image_bytes(id: &str) -> Vec<u8> {
    format!("{id} synthetic pixels").into_bytes()
}

/// The dataset held in memory, images inline.
pub fn synthetic_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    let kind = DatasetKind::Emotion;
    let mut data = Dataset {
        candidates: Vec::new(),
        tests: Vec::new(),
        labels: LabelSet::new((0..spec.classes).map(class_label).collect(), kind)?,
    };
    for r in records(spec)? {
        let c = DemonstrationCandidate {
            image: ImageRef::Inline(image_bytes(&r.id)),
            id: r.id,
            question: kind.question().to_string(),
            answer: r.label,
            sublabel: r.sublabel,
        };
        match r.split {
            Split::Candidates => data.candidates.push(c),
            Split::Test => data.tests.push(c),
        }
    }
    Ok(data)
}

/// Writes `manifest.jsonl` and `images/` under `dir`; returns the manifest
/// path.
pub fn write_synthetic(dir: &Path, spec: &SyntheticSpec) -> Result<PathBuf> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let manifest = dir.join("manifest.jsonl");
    let mut out = Vec::new();
    for r in records(spec)? {
        let path = dir.join(&r.image_path);
        std::fs::write(&path, image_bytes(&r.id)).map_err(|e| Error::io(&path, e))?;
        serde_json::to_writer(&mut out, &r).expect("record serializes");
        out.push(b'\n');
    }
    std::fs::File::create(&manifest)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}
