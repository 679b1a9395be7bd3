use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SceneInstance, WorldConfig};
use crate::error::{Error, Result};

pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// First line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub schema_version: u32,
    pub world_config: WorldConfig,
    pub seed: u64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub instances: Vec<SceneInstance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

/// Writes the header line and one JSON record per instance.
pub fn save_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        serde_json::to_writer(&mut w, &dataset.header)?;
        w.write_all(b"\n")?;
        for inst in &dataset.instances {
            serde_json::to_writer(&mut w, inst)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Parse {
            line: 1,
            message: "empty dataset file".into(),
        })?
        .map_err(|e| Error::io(path, e))?;
    // Check the version before the rest of the header so a newer layout
    // reports as a version problem rather than a parse error.
    let raw: serde_json::Value = serde_json::from_str(&first).map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    let version = raw
        .get("schema_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::Parse {
            line: 1,
            message: "header lacks schema_version".into(),
        })?;
    if version != DATASET_SCHEMA_VERSION as u64 {
        return Err(Error::SchemaVersion {
            what: "dataset",
            found: version as u32,
            expected: DATASET_SCHEMA_VERSION,
        });
    }
    let header: DatasetHeader = serde_json::from_value(raw).map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    let mut instances = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: SceneInstance = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 2,
            message: e.to_string(),
        })?;
        instances.push(inst);
    }
    Ok(Dataset { header, instances })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataworld::generate_dataset;

    fn small() -> Dataset {
        let cfg = WorldConfig {
            n_train: 12,
            n_test: 0,
            ..WorldConfig::default()
        };
        generate_dataset(&cfg, 7).unwrap().train
    }

    #[test]
    fn round_trip() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train.jsonl");
        save_dataset(&p, &d).unwrap();
        assert_eq!(load_dataset(&p).unwrap(), d);
    }

    #[test]
    fn unknown_schema_version_is_rejected() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train.jsonl");
        save_dataset(&p, &d).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let bumped = text.replacen("\"schema_version\":1", "\"schema_version\":99", 1);
        std::fs::write(&p, bumped).unwrap();
        match load_dataset(&p) {
            Err(Error::SchemaVersion { found: 99, .. }) => {}
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_line_cites_its_number() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train.jsonl");
        save_dataset(&p, &d).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        let cut = &lines[4][..lines[4].len() / 2];
        lines[4] = cut;
        std::fs::write(&p, lines.join("\n")).unwrap();
        match load_dataset(&p) {
            Err(Error::Parse { line: 5, .. }) => {}
            other => panic!("expected parse error on line 5, got {other:?}"),
        }
    }
}
