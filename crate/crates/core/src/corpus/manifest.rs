use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Retrieval,
    Query,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Retrieval => "retrieval",
            Split::Query => "query",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "retrieval" => Ok(Split::Retrieval),
            "query" => Ok(Split::Query),
            other => Err(Error::Argument(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub id: String,
    pub label: u32,
    pub frame_count: usize,
    pub source: PathBuf,
    pub split: Split,
}

/// A list of video records. On disk: one JSON object per line with keys
/// `id`, `label`, `frame_count`, `source`, `split`. Relative sources are
/// resolved against the manifest's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub records: Vec<VideoRecord>,
    pub num_classes: u32,
}

impl Manifest {
    pub fn new(records: Vec<VideoRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Argument(format!("duplicate record id {}", r.id)));
            }
            if r.frame_count == 0 {
                return Err(Error::Argument(format!("record {} has no frames", r.id)));
            }
        }
        let num_classes = records.iter().map(|r| r.label + 1).max().unwrap_or(0);
        Ok(Self {
            records,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new(""));
        let mut out = String::new();
        for r in &self.records {
            let mut r = r.clone();
            if let Ok(rel) = r.source.strip_prefix(base) {
                r.source = rel.to_path_buf();
            }
            out.push_str(&serde_json::to_string(&r).expect("record serializes"));
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Parses a manifest and checks that every referenced source exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut r: VideoRecord = serde_json::from_str(line)
                .map_err(|e| Error::format(path, format!("line {}: {e}", lineno + 1)))?;
            if r.source.is_relative() {
                r.source = base.join(&r.source);
            }
            if !r.source.exists() {
                return Err(Error::format(
                    path,
                    format!("line {}: missing source {}", lineno + 1, r.source.display()),
                ));
            }
            records.push(r);
        }
        Self::new(records).map_err(|e| Error::format(path, e.to_string()))
    }
}
