//! Frozen frame feature extraction: a seeded, randomly initialized toy CNN
//! maps every frame of a frame-archive corpus to a D-dimensional vector, and
//! the result is written as a feature-file corpus.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    read_frame_archive, write_feature_file, FeatureSequence, FrameGeometry, Manifest, VideoRecord,
};
use crate::encoder::{frame_encode_rows, EncoderConfig, FrameEncoderKind, ModelState};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractorConfig {
    pub seed: u64,
    pub geometry: FrameGeometry,
    pub widths: [usize; 2],
    pub feature_dim: usize,
    /// Rescale every feature dimension to zero mean and unit variance over the corpus.
    pub standardize: bool,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            geometry: FrameGeometry::default(),
            widths: [32, 64],
            feature_dim: 128,
            standardize: true,
        }
    }
}

/// The frozen network. Only its `cnn.*` tensors are used.
pub fn extractor_model(cfg: &ExtractorConfig) -> Result<ModelState> {
    let enc = EncoderConfig {
        frame_encoder: FrameEncoderKind::ToyCnn {
            geometry: cfg.geometry,
            widths: cfg.widths,
        },
        frame_dim: cfg.feature_dim,
        model_dim: 1,
        ffn_dim: 1,
        hash_hidden: 1,
        clip_length: 1,
        code_bits: 1,
        ..EncoderConfig::default()
    };
    ModelState::init(enc, derive_seed(cfg.seed, &[stream::EXTRACTOR]))
}

/// L×D features of one frame archive.
pub fn extract_video(model: &ModelState, record: &VideoRecord) -> Result<Array2<f64>> {
    let frames = read_frame_archive(&record.source)?;
    let l = frames.shape()[0];
    let flat = frames
        .mapv(f64::from)
        .into_shape_with_order((l, frames.len() / l.max(1)))
        .map_err(|e| Error::Internal(e.to_string()))?;
    frame_encode_rows(model, flat)
}

fn column_stats(features: &[Array2<f64>]) -> (Array1<f64>, Array1<f64>) {
    let dim = features[0].ncols();
    let count: usize = features.iter().map(|f| f.nrows()).sum();
    let mut mean = Array1::<f64>::zeros(dim);
    for f in features {
        mean += &f.sum_axis(Axis(0));
    }
    mean /= count as f64;
    let mut var = Array1::<f64>::zeros(dim);
    for f in features {
        var += &(f - &mean).mapv(|v| v * v).sum_axis(Axis(0));
    }
    var /= count as f64;
    let std = var.mapv(|v| if v > 1e-12 { v.sqrt() } else { 1.0 });
    (mean, std)
}

/// Extracts features for every record of `manifest` into `out_dir` as
/// `<id>.chnf`, writes `out_dir/manifest.jsonl` and returns the new manifest.
pub fn extract_corpus(
    manifest: &Manifest,
    cfg: &ExtractorConfig,
    out_dir: impl AsRef<Path>,
) -> Result<Manifest> {
    if manifest.is_empty() {
        return Err(Error::Argument("manifest has no records".into()));
    }
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let model = extractor_model(cfg)?;
    let mut features: Vec<Array2<f64>> = manifest
        .records
        .par_iter()
        .map(|r| extract_video(&model, r))
        .collect::<Result<_>>()?;
    if cfg.standardize {
        let (mean, std) = column_stats(&features);
        for f in &mut features {
            *f = (&*f - &mean) / &std;
        }
    }
    let records = manifest
        .records
        .par_iter()
        .zip(features.par_iter())
        .map(|(r, f)| {
            let source = out_dir.join(format!("{}.chnf", r.id));
            write_feature_file(&FeatureSequence::new(f.mapv(|v| v as f32))?, &source)?;
            Ok(VideoRecord {
                source,
                ..r.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let out = Manifest::new(records)?;
    out.write(out_dir.join("manifest.jsonl"))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, read_feature_file, SynthConfig};

    #[test]
    fn extraction_is_deterministic_and_standardized() {
        let dir = tempfile::tempdir().unwrap();
        let frames =
            generate_synthetic_corpus(&SynthConfig::new(4, 2, 6, 1, 3), dir.path().join("f"))
                .unwrap();
        let cfg = ExtractorConfig {
            widths: [4, 8],
            feature_dim: 16,
            ..ExtractorConfig::default()
        };
        let a = extract_corpus(&frames, &cfg, dir.path().join("a")).unwrap();
        let b = extract_corpus(&frames, &cfg, dir.path().join("b")).unwrap();
        assert_eq!(a.len(), 4);
        let mut all = Vec::new();
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(
                std::fs::read(&ra.source).unwrap(),
                std::fs::read(&rb.source).unwrap()
            );
            let f = read_feature_file(&ra.source).unwrap();
            assert_eq!((f.len(), f.dim()), (6, 16));
            all.push(f.0.mapv(f64::from));
        }
        let (mean, std) = column_stats(&all);
        assert!(mean.iter().all(|m| m.abs() < 1e-5));
        assert!(std.iter().all(|s| (s - 1.0).abs() < 1e-4 || *s == 1.0));
        let reloaded = Manifest::load(dir.path().join("a/manifest.jsonl")).unwrap();
        assert_eq!(reloaded, a);
    }

    #[test]
    fn differently_seeded_extractors_differ() {
        let a = extractor_model(&ExtractorConfig::default()).unwrap();
        let b = extractor_model(&ExtractorConfig {
            seed: 1,
            ..ExtractorConfig::default()
        })
        .unwrap();
        assert_ne!(a.get("cnn.conv1.weight"), b.get("cnn.conv1.weight"));
    }
}
