//! Self-supervised video hashing: synthetic and on-disk video corpora, clip
//! augmentation, a transformer clip encoder with hash and frame-order heads,
//! contrastive / order / scene losses, affinity-propagation scene discovery,
//! training, and Hamming-ranking retrieval evaluation.

pub mod affinity;
pub mod augment;
pub mod autograd;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod extract;
pub mod losses;
pub mod retrieval;
pub mod rng;
pub mod trainer;

pub use affinity::{affinity_propagation, APConfig, APResult, Preference};
pub use augment::{AugConfig, ClipPair, ClipView};
pub use corpus::{
    FeatureSequence, FrameGeometry, FrameSequence, LoadedVideo, Manifest, Split, SynthConfig,
    VideoData, VideoRecord,
};
pub use encoder::{EncoderConfig, FrameEncoderKind, ModelState};
pub use error::{Error, Result};
pub use losses::{LossConfig, LossReport, Tasks};
pub use retrieval::{map_at_k, pr_curve, BinaryCode, CodeBook, PrPoint};
pub use trainer::{Checkpoint, TrainConfig, Trainer};
