//! Two-view clip construction: one uniform frame per equal-duration segment,
//! and one spatial transform drawn per clip and applied to all its frames.

use ndarray::{Array2, Array3, Array4, ArrayView3, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{FeatureSequence, FrameGeometry, FrameSequence, LoadedVideo, VideoData};
use crate::error::{ensure_arg, Error, Result};
use crate::rng::{rng_for, Rng};

/// T frame indices into a video of length L, one per segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipIndices(pub Vec<usize>);

impl ClipIndices {
    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

/// Half-open bounds `[floor(t·L/T), floor((t+1)·L/T))` of segment `t`.
pub fn segment_bounds(len: usize, clip_len: usize, t: usize) -> (usize, usize) {
    (t * len / clip_len, (t + 1) * len / clip_len)
}

fn check_lengths(len: usize, clip_len: usize) -> Result<()> {
    ensure_arg!(clip_len >= 1, "clip length must be at least 1");
    ensure_arg!(
        len >= clip_len,
        "video has {len} frames, fewer than clip length {clip_len}"
    );
    Ok(())
}

pub fn segment_sample(len: usize, clip_len: usize, rng: &mut Rng) -> Result<ClipIndices> {
    check_lengths(len, clip_len)?;
    Ok(ClipIndices(
        (0..clip_len)
            .map(|t| {
                let (lo, hi) = segment_bounds(len, clip_len, t);
                rng.random_range(lo..hi)
            })
            .collect(),
    ))
}

/// Deterministic middle frame of every segment; used for evaluation clips.
pub fn center_sample(len: usize, clip_len: usize) -> Result<ClipIndices> {
    check_lengths(len, clip_len)?;
    Ok(ClipIndices(
        (0..clip_len)
            .map(|t| {
                let (lo, hi) = segment_bounds(len, clip_len, t);
                lo + (hi - lo - 1) / 2
            })
            .collect(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugConfig {
    pub crop_scale_min: f64,
    pub crop_scale_max: f64,
    pub jitter_strength: f64,
    pub grayscale_prob: f64,
    /// Std-dev of additive Gaussian noise on pre-extracted features.
    pub feature_noise_sigma: f64,
    pub spatial: bool,
    pub temporal: bool,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            crop_scale_min: 0.5,
            crop_scale_max: 1.0,
            jitter_strength: 0.4,
            grayscale_prob: 0.2,
            feature_noise_sigma: 0.0,
            spatial: true,
            temporal: true,
        }
    }
}

impl AugConfig {
    pub fn validate(&self) -> Result<()> {
        ensure_arg!(
            self.crop_scale_min > 0.0
                && self.crop_scale_min <= self.crop_scale_max
                && self.crop_scale_max <= 1.0,
            "crop scale range [{}, {}] must lie in (0, 1]",
            self.crop_scale_min,
            self.crop_scale_max
        );
        ensure_arg!(
            self.jitter_strength >= 0.0 && self.jitter_strength < 1.0,
            "jitter strength must be in [0, 1)"
        );
        ensure_arg!(
            (0.0..=1.0).contains(&self.grayscale_prob),
            "grayscale probability must be in [0, 1]"
        );
        ensure_arg!(
            self.feature_noise_sigma >= 0.0 && self.feature_noise_sigma.is_finite(),
            "feature noise sigma must be finite and non-negative"
        );
        Ok(())
    }
}

/// Crop box plus colour transform shared by every frame of one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialSpec {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub grayscale: bool,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
}

impl SpatialSpec {
    pub fn identity(geometry: FrameGeometry) -> Self {
        Self {
            top: 0,
            left: 0,
            height: geometry.height,
            width: geometry.width,
            grayscale: false,
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
        }
    }
}

pub fn draw_spatial_spec(
    rng: &mut Rng,
    cfg: &AugConfig,
    geometry: FrameGeometry,
) -> Result<SpatialSpec> {
    cfg.validate()?;
    let FrameGeometry { height, width, .. } = geometry;
    let scale = if cfg.crop_scale_max > cfg.crop_scale_min {
        rng.random_range(cfg.crop_scale_min..=cfg.crop_scale_max)
    } else {
        cfg.crop_scale_min
    };
    let side = scale.sqrt();
    let ch = ((height as f64 * side).round() as usize).clamp(1, height);
    let cw = ((width as f64 * side).round() as usize).clamp(1, width);
    let top = rng.random_range(0..=height - ch);
    let left = rng.random_range(0..=width - cw);
    let j = cfg.jitter_strength;
    let factor = |rng: &mut Rng| {
        if j > 0.0 {
            rng.random_range(1.0 - j..=1.0 + j) as f32
        } else {
            1.0
        }
    };
    let brightness = factor(rng);
    let contrast = factor(rng);
    let saturation = factor(rng);
    let grayscale = cfg.grayscale_prob > 0.0 && rng.random_bool(cfg.grayscale_prob);
    Ok(SpatialSpec {
        top,
        left,
        height: ch,
        width: cw,
        grayscale,
        brightness,
        contrast,
        saturation,
    })
}

fn luminance(frame: &Array3<f32>, y: usize, x: usize) -> f32 {
    let r = frame[[0, y, x]] as f64;
    let g = frame[[1, y, x]] as f64;
    let b = frame[[2, y, x]] as f64;
    (0.299 * r + 0.587 * g + 0.114 * b) as f32
}

/// Crops to the spec's box and resizes back to H×W with bilinear sampling at
/// pixel centres.
fn crop_resize(frame: ArrayView3<f32>, spec: &SpatialSpec) -> Array3<f32> {
    let (c, h, w) = frame.dim();
    if spec.top == 0 && spec.left == 0 && spec.height == h && spec.width == w {
        return frame.to_owned();
    }
    let sy = spec.height as f64 / h as f64;
    let sx = spec.width as f64 / w as f64;
    let mut out = Array3::<f32>::zeros((c, h, w));
    for y in 0..h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (spec.height - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(spec.height - 1);
        let wy = fy - y0 as f64;
        for x in 0..w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (spec.width - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(spec.width - 1);
            let wx = fx - x0 as f64;
            for ch in 0..c {
                let p = |yy: usize, xx: usize| frame[[ch, spec.top + yy, spec.left + xx]] as f64;
                let v = (1.0 - wy) * ((1.0 - wx) * p(y0, x0) + wx * p(y0, x1))
                    + wy * ((1.0 - wx) * p(y1, x0) + wx * p(y1, x1));
                out[[ch, y, x]] = v as f32;
            }
        }
    }
    out
}

fn color_ops(frame: &mut Array3<f32>, spec: &SpatialSpec) {
    let (c, h, w) = frame.dim();
    if spec.brightness != 1.0 {
        frame.mapv_inplace(|v| (v * spec.brightness).clamp(0.0, 1.0));
    }
    if spec.contrast != 1.0 {
        let mean = if c == 3 {
            let mut s = 0.0f64;
            for y in 0..h {
                for x in 0..w {
                    s += luminance(frame, y, x) as f64;
                }
            }
            (s / (h * w) as f64) as f32
        } else {
            frame.mean().unwrap_or(0.0)
        };
        frame.mapv_inplace(|v| ((v - mean) * spec.contrast + mean).clamp(0.0, 1.0));
    }
    if c == 3 && (spec.saturation != 1.0 || spec.grayscale) {
        for y in 0..h {
            for x in 0..w {
                let g = luminance(frame, y, x);
                for ch in 0..3 {
                    let v = frame[[ch, y, x]];
                    let v = if spec.saturation != 1.0 {
                        ((v - g) * spec.saturation + g).clamp(0.0, 1.0)
                    } else {
                        v
                    };
                    frame[[ch, y, x]] = v;
                }
                if spec.grayscale {
                    let g = luminance(frame, y, x).clamp(0.0, 1.0);
                    for ch in 0..3 {
                        frame[[ch, y, x]] = g;
                    }
                }
            }
        }
    }
}

pub fn apply_spatial(frames: &FrameSequence, spec: &SpatialSpec) -> Result<FrameSequence> {
    let g = frames.geometry();
    ensure_arg!(
        spec.height >= 1
            && spec.width >= 1
            && spec.top + spec.height <= g.height
            && spec.left + spec.width <= g.width,
        "crop box {}x{} at ({}, {}) exceeds {}x{} frame",
        spec.height,
        spec.width,
        spec.top,
        spec.left,
        g.height,
        g.width
    );
    let mut out = Array4::<f32>::zeros(frames.0.raw_dim());
    for (src, mut dst) in frames.0.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
        let mut f = crop_resize(src, spec);
        color_ops(&mut f, spec);
        dst.assign(&f);
    }
    Ok(FrameSequence(out))
}

/// One augmented clip, in whichever modality the video is stored.
#[derive(Debug, Clone, PartialEq)]
pub enum ClipView {
    Frames(FrameSequence),
    Features(FeatureSequence),
}

impl ClipView {
    pub fn len(&self) -> usize {
        match self {
            ClipView::Frames(f) => f.len(),
            ClipView::Features(f) => f.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedView {
    pub clip: ClipView,
    pub indices: ClipIndices,
    /// `None` in feature mode.
    pub spec: Option<SpatialSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipPair {
    pub source_id: String,
    pub view1: AugmentedView,
    pub view2: AugmentedView,
}

fn gather_frames(frames: &Array4<f32>, idx: &ClipIndices) -> FrameSequence {
    FrameSequence(frames.select(Axis(0), idx.as_slice()))
}

fn gather_features(features: &Array2<f32>, idx: &ClipIndices) -> Array2<f32> {
    features.select(Axis(0), idx.as_slice())
}

/// Builds one augmented view from its own random stream.
pub fn make_view(
    video: &LoadedVideo,
    clip_len: usize,
    cfg: &AugConfig,
    rng: &mut Rng,
) -> Result<AugmentedView> {
    cfg.validate()?;
    let len = video.data.frame_count();
    let indices = if cfg.temporal {
        segment_sample(len, clip_len, rng)?
    } else {
        center_sample(len, clip_len)?
    };
    match &video.data {
        VideoData::Frames(frames) => {
            let clip = gather_frames(frames, &indices);
            let spec = if cfg.spatial {
                draw_spatial_spec(rng, cfg, clip.geometry())?
            } else {
                SpatialSpec::identity(clip.geometry())
            };
            let clip = apply_spatial(&clip, &spec)?;
            Ok(AugmentedView {
                clip: ClipView::Frames(clip),
                indices,
                spec: Some(spec),
            })
        }
        VideoData::Features(features) => {
            let mut clip = gather_features(features, &indices);
            if cfg.spatial && cfg.feature_noise_sigma > 0.0 {
                let normal = Normal::new(0.0, cfg.feature_noise_sigma)
                    .map_err(|e| Error::Argument(e.to_string()))?;
                clip.mapv_inplace(|v| v + normal.sample(rng) as f32);
            }
            Ok(AugmentedView {
                clip: ClipView::Features(FeatureSequence::new(clip)?),
                indices,
                spec: None,
            })
        }
    }
}

/// Two views of one video, each from the stream seeded by its entry of `seeds`.
pub fn make_pair(
    video: &LoadedVideo,
    seeds: (u64, u64),
    clip_len: usize,
    cfg: &AugConfig,
) -> Result<ClipPair> {
    let view1 = make_view(video, clip_len, cfg, &mut rng_for(seeds.0, &[]))?;
    let view2 = make_view(video, clip_len, cfg, &mut rng_for(seeds.1, &[]))?;
    Ok(ClipPair {
        source_id: video.record.id.clone(),
        view1,
        view2,
    })
}

/// Deterministic evaluation clip: mid-segment frames, no spatial transform.
pub fn eval_clip(video: &LoadedVideo, clip_len: usize) -> Result<ClipView> {
    let indices = center_sample(video.data.frame_count(), clip_len)?;
    Ok(match &video.data {
        VideoData::Frames(f) => ClipView::Frames(gather_frames(f, &indices)),
        VideoData::Features(f) => ClipView::Features(FeatureSequence(gather_features(f, &indices))),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Split, VideoRecord};
    use proptest::prelude::*;

    fn rng(seed: u64) -> crate::rng::Rng {
        rng_for(seed, &[99])
    }

    fn video(data: VideoData) -> LoadedVideo {
        LoadedVideo {
            record: VideoRecord {
                id: "x".into(),
                label: 0,
                frame_count: data.frame_count(),
                source: "x".into(),
                split: Split::Train,
            },
            data,
        }
    }

    fn random_frames(t: usize, seed: u64) -> FrameSequence {
        let mut r = rng(seed);
        FrameSequence(Array4::from_shape_fn((t, 3, 6, 7), |_| {
            r.random_range(0.0..=1.0)
        }))
    }

    fn no_spatial() -> AugConfig {
        AugConfig {
            crop_scale_min: 1.0,
            crop_scale_max: 1.0,
            jitter_strength: 0.0,
            grayscale_prob: 0.0,
            ..AugConfig::default()
        }
    }

    #[test]
    fn full_length_clip_is_identity_indices() {
        let idx = segment_sample(6, 6, &mut rng(0)).unwrap();
        assert_eq!(idx.0, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn ten_frames_five_segments_bounds() {
        for s in 0..50 {
            let idx = segment_sample(10, 5, &mut rng(s)).unwrap();
            for (t, &i) in idx.0.iter().enumerate() {
                assert!(i == 2 * t || i == 2 * t + 1);
            }
        }
    }

    #[test]
    fn short_video_rejected() {
        assert!(matches!(
            segment_sample(3, 5, &mut rng(0)),
            Err(Error::Argument(_))
        ));
        assert!(center_sample(3, 5).is_err());
    }

    #[test]
    fn center_sample_picks_segment_middles() {
        assert_eq!(
            center_sample(32, 8).unwrap().0,
            vec![1, 5, 9, 13, 17, 21, 25, 29]
        );
        assert_eq!(center_sample(5, 5).unwrap().0, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn identity_spec_from_disabled_ranges() {
        let g = FrameGeometry::new(3, 6, 7);
        let spec = draw_spatial_spec(&mut rng(3), &no_spatial(), g).unwrap();
        assert_eq!(spec, SpatialSpec::identity(g));
    }

    #[test]
    fn same_rng_state_same_spec() {
        let g = FrameGeometry::default();
        let cfg = AugConfig::default();
        assert_eq!(
            draw_spatial_spec(&mut rng(5), &cfg, g).unwrap(),
            draw_spatial_spec(&mut rng(5), &cfg, g).unwrap()
        );
    }

    #[test]
    fn invalid_ranges_rejected() {
        let g = FrameGeometry::default();
        let mut cfg = AugConfig::default();
        cfg.crop_scale_min = 0.0;
        assert!(draw_spatial_spec(&mut rng(0), &cfg, g).is_err());
        let mut cfg = AugConfig::default();
        cfg.jitter_strength = -0.1;
        assert!(draw_spatial_spec(&mut rng(0), &cfg, g).is_err());
        let mut cfg = AugConfig::default();
        cfg.crop_scale_max = 1.5;
        assert!(draw_spatial_spec(&mut rng(0), &cfg, g).is_err());
    }

    #[test]
    fn identity_spec_leaves_frames_untouched() {
        let f = random_frames(3, 1);
        let out = apply_spatial(&f, &SpatialSpec::identity(f.geometry())).unwrap();
        assert_eq!(out, f);
    }

    #[test]
    fn grayscale_is_idempotent_on_gray_frames() {
        let mut r = rng(2);
        let mut a = Array4::<f32>::zeros((2, 3, 5, 5));
        for t in 0..2 {
            for y in 0..5 {
                for x in 0..5 {
                    let v: f32 = r.random_range(0.0..=1.0);
                    for c in 0..3 {
                        a[[t, c, y, x]] = v;
                    }
                }
            }
        }
        let f = FrameSequence(a);
        let mut spec = SpatialSpec::identity(f.geometry());
        spec.grayscale = true;
        assert_eq!(apply_spatial(&f, &spec).unwrap(), f);
    }

    #[test]
    fn crop_outside_frame_rejected() {
        let f = random_frames(1, 0);
        let mut spec = SpatialSpec::identity(f.geometry());
        spec.top = 2;
        assert!(matches!(apply_spatial(&f, &spec), Err(Error::Argument(_))));
    }

    #[test]
    fn spatial_transform_applies_identically_to_every_frame() {
        // A clip of one frame repeated must stay a clip of one frame repeated.
        let one = random_frames(1, 8);
        let rep = FrameSequence(Array4::from_shape_fn((4, 3, 6, 7), |(_, c, y, x)| {
            one.0[[0, c, y, x]]
        }));
        let spec = draw_spatial_spec(&mut rng(4), &AugConfig::default(), rep.geometry()).unwrap();
        let out = apply_spatial(&rep, &spec).unwrap();
        let first = out.0.index_axis(Axis(0), 0).to_owned();
        for t in 1..4 {
            assert_eq!(out.0.index_axis(Axis(0), t), first);
        }
        assert!(out.0.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn pair_without_randomness_has_identical_views() {
        let v = video(VideoData::Frames(random_frames(5, 3).0));
        let p = make_pair(&v, (1, 2), 5, &no_spatial()).unwrap();
        assert_eq!(p.view1.clip, p.view2.clip);
    }

    #[test]
    fn swapping_seeds_swaps_views() {
        let v = video(VideoData::Frames(random_frames(12, 4).0));
        let cfg = AugConfig::default();
        let a = make_pair(&v, (10, 20), 4, &cfg).unwrap();
        let b = make_pair(&v, (20, 10), 4, &cfg).unwrap();
        assert_eq!(a.view1, b.view2);
        assert_eq!(a.view2, b.view1);
        assert_ne!(a.view1, a.view2);
    }

    #[test]
    fn feature_mode_noise_defaults_to_zero() {
        let feats = Array2::from_shape_fn((8, 3), |(i, j)| (i * 3 + j) as f32);
        let v = video(VideoData::Features(feats.clone()));
        let view = make_view(&v, 4, &AugConfig::default(), &mut rng(1)).unwrap();
        let ClipView::Features(ref f) = view.clip else {
            panic!()
        };
        assert_eq!(f.0, feats.select(Axis(0), &view.indices.0));
        let cfg = AugConfig {
            feature_noise_sigma: 0.5,
            ..AugConfig::default()
        };
        let noisy = make_view(&v, 4, &cfg, &mut rng(1)).unwrap();
        assert_ne!(noisy.clip, view.clip);
    }

    proptest! {
        #[test]
        fn indices_increase_within_segments(len in 1usize..200, t in 1usize..50, seed in any::<u64>()) {
            prop_assume!(len >= t);
            let idx = segment_sample(len, t, &mut rng(seed)).unwrap();
            prop_assert_eq!(idx.0.len(), t);
            for (k, &i) in idx.0.iter().enumerate() {
                let (lo, hi) = segment_bounds(len, t, k);
                prop_assert!(lo <= i && i < hi);
                if k > 0 { prop_assert!(idx.0[k - 1] < i); }
            }
        }
    }
}
