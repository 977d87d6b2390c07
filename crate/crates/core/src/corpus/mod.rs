//! Video records, on-disk formats and the synthetic corpus generator.

mod files;
mod manifest;
mod synth;

pub use files::{
    read_feature_file, read_frame_archive, read_frames, write_feature_file, write_frame_archive,
    FEATURE_MAGIC, FORMAT_VERSION, FRAME_MAGIC,
};
pub use manifest::{Manifest, Split, VideoRecord};
pub use synth::{
    generate_synthetic_corpus, plan_video, render_frame, synthesize_video, Background, SynthConfig,
    SyntheticVideo, VideoPlan,
};

use ndarray::{Array2, Array4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Error, Result};

/// Channel count and spatial size of raw frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl FrameGeometry {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn pixels(&self) -> usize {
        self.channels * self.height * self.width
    }
}

impl Default for FrameGeometry {
    fn default() -> Self {
        Self::new(3, 32, 32)
    }
}

/// A clip of raw frames, shape T×C×H×W, values in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence(pub Array4<f32>);

impl FrameSequence {
    pub fn len(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn geometry(&self) -> FrameGeometry {
        let s = self.0.shape();
        FrameGeometry::new(s[1], s[2], s[3])
    }
}

/// Frame-level feature vectors, shape T×D, all finite.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence(pub Array2<f32>);

impl FeatureSequence {
    pub fn new(features: Array2<f32>) -> Result<Self> {
        ensure_arg!(
            features.iter().all(|v| v.is_finite()),
            "feature sequence contains non-finite values"
        );
        Ok(Self(features))
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }
}

/// Decoded content of one video: either every raw frame or every frame feature.
#[derive(Debug, Clone, PartialEq)]
pub enum VideoData {
    Frames(Array4<f32>),
    Features(Array2<f32>),
}

impl VideoData {
    pub fn frame_count(&self) -> usize {
        match self {
            VideoData::Frames(f) => f.shape()[0],
            VideoData::Features(f) => f.nrows(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoadedVideo {
    pub record: VideoRecord,
    pub data: VideoData,
}

/// Reads a record's source, dispatching on the file magic.
pub fn load_record(record: &VideoRecord) -> Result<VideoData> {
    let path = &record.source;
    let mut magic = [0u8; 4];
    {
        use std::io::Read;
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        f.read_exact(&mut magic)
            .map_err(|_| Error::format(path, "file shorter than magic"))?;
    }
    let data = match &magic {
        m if m == FRAME_MAGIC => VideoData::Frames(read_frame_archive(path)?),
        m if m == FEATURE_MAGIC => VideoData::Features(read_feature_file(path)?.0),
        _ => return Err(Error::format(path, "unknown magic")),
    };
    if data.frame_count() != record.frame_count {
        return Err(Error::format(
            path,
            format!(
                "manifest says {} frames, file holds {}",
                record.frame_count,
                data.frame_count()
            ),
        ));
    }
    Ok(data)
}

/// Loads every record of a manifest, rejecting videos shorter than `clip_len`.
pub fn load_videos(manifest: &Manifest, clip_len: usize) -> Result<Vec<LoadedVideo>> {
    if let Some(r) = manifest.records.iter().find(|r| r.frame_count < clip_len) {
        return Err(Error::Argument(format!(
            "record {} has {} frames, fewer than clip length {clip_len}",
            r.id, r.frame_count
        )));
    }
    manifest
        .records
        .par_iter()
        .map(|r| {
            Ok(LoadedVideo {
                record: r.clone(),
                data: load_record(r)?,
            })
        })
        .collect()
}
