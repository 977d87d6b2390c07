//! Checkpoint file: `CHNK`, u32 version, u64 header length, JSON header, then
//! every tensor listed in the header as little-endian f64, row-major.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::optim::AdamState;
use crate::encoder::{ModelState, Param};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CHNK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume training bit-for-bit at an epoch boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: ModelState,
    pub adam: AdamState,
    /// Number of completed epochs.
    pub epoch: usize,
    pub global_step: u64,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    group: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    epoch: usize,
    global_step: u64,
    adam_step: u64,
    tensors: Vec<TensorEntry>,
}

const GROUPS: [&str; 3] = ["param", "adam_m", "adam_v"];

impl Checkpoint {
    fn tensors(&self) -> impl Iterator<Item = (&'static str, &str, &Array2<f64>)> {
        let names = self.model.params.iter().map(|p| p.name.as_str());
        let params = self.model.params.iter().map(|p| &p.value);
        let m = self.adam.m.iter();
        let v = self.adam.v.iter();
        names
            .clone()
            .zip(params)
            .map(|(n, t)| (GROUPS[0], n, t))
            .chain(names.clone().zip(m).map(|(n, t)| (GROUPS[1], n, t)))
            .chain(names.zip(v).map(|(n, t)| (GROUPS[2], n, t)))
    }

    /// Writes atomically via a temporary sibling file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let header = Header {
            config: self.config.clone(),
            epoch: self.epoch,
            global_step: self.global_step,
            adam_step: self.adam.step,
            tensors: self
                .tensors()
                .map(|(group, name, t)| TensorEntry {
                    name: name.to_string(),
                    group: group.to_string(),
                    rows: t.nrows(),
                    cols: t.ncols(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Internal(e.to_string()))?;
        let tmp = path.with_extension("chnk.tmp");
        let write = || -> std::io::Result<()> {
            let mut w = BufWriter::new(fs::File::create(&tmp)?);
            w.write_all(CHECKPOINT_MAGIC)?;
            w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
            w.write_all(&(json.len() as u64).to_le_bytes())?;
            w.write_all(&json)?;
            for (_, _, t) in self.tensors() {
                for v in t.iter() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            w.into_inner()?.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |msg: &str| Error::format(path, msg);
        if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| bad(&format!("bad header: {e}")))?;
        let mut payload = &body[hlen..];
        let expected: usize = header.tensors.iter().map(|t| t.rows * t.cols * 8).sum();
        if payload.len() != expected {
            return Err(bad(&format!(
                "payload has {} bytes, header describes {expected}",
                payload.len()
            )));
        }
        let mut groups: [Vec<Param>; 3] = Default::default();
        for entry in header.tensors {
            let g = GROUPS
                .iter()
                .position(|&g| g == entry.group)
                .ok_or_else(|| bad(&format!("unknown tensor group {}", entry.group)))?;
            let n = entry.rows * entry.cols;
            let (chunk, rest) = payload.split_at(n * 8);
            payload = rest;
            let data: Vec<f64> = chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let value = Array2::from_shape_vec((entry.rows, entry.cols), data).expect("sized");
            groups[g].push(Param {
                name: entry.name,
                value,
            });
        }
        let [params, m, v] = groups;
        let model = ModelState::from_params(header.config.encoder.clone(), params)
            .map_err(|e| bad(&e.to_string()))?;
        let aligned = |moments: &[Param]| {
            moments.len() == model.params.len()
                && moments
                    .iter()
                    .zip(&model.params)
                    .all(|(a, p)| a.name == p.name && a.value.dim() == p.value.dim())
        };
        if !aligned(&m) || !aligned(&v) {
            return Err(bad("optimizer moments do not match parameters"));
        }
        Ok(Self {
            config: header.config,
            model,
            adam: AdamState {
                step: header.adam_step,
                m: m.into_iter().map(|p| p.value).collect(),
                v: v.into_iter().map(|p| p.value).collect(),
            },
            epoch: header.epoch,
            global_step: header.global_step,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn sample() -> Checkpoint {
        let config = TrainConfig {
            encoder: EncoderConfig {
                frame_dim: 6,
                model_dim: 4,
                ffn_dim: 8,
                hash_hidden: 4,
                clip_length: 3,
                code_bits: 5,
                ..EncoderConfig::default()
            },
            ..TrainConfig::default()
        };
        let model = ModelState::init(config.encoder.clone(), 3).unwrap();
        let mut adam = AdamState::new(&model);
        adam.step = 7;
        adam.m[0].fill(0.25);
        adam.v[1].fill(1.5);
        Checkpoint {
            config,
            model,
            adam,
            epoch: 2,
            global_step: 7,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.chnk");
        let ck = sample();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.chnk");
        sample().save(&path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Format { .. })));
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Format { .. })));
        assert!(matches!(
            Checkpoint::load(dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }
}
