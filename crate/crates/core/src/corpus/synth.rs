//! Procedural videos whose class is a (shape, motion direction) pair. Both
//! directions of a shape share appearance, so only frame order tells them
//! apart. Each video cuts between `scene_changes + 1` textured backgrounds.

use std::path::Path;

use ndarray::{Array3, Array4, Axis};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::files::write_frame_archive;
use super::{FrameGeometry, Manifest, Split, VideoRecord};
use crate::error::{ensure_arg, Error, Result};
use crate::rng::{derive_seed, rng_for, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    #[default]
    Textured,
    /// Zero background with no sensor noise.
    Black,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_videos: usize,
    pub num_classes: usize,
    pub frames_per_video: usize,
    pub scene_changes: usize,
    pub seed: u64,
    pub geometry: FrameGeometry,
    pub background: Background,
    pub draw_objects: bool,
    pub split: Split,
    /// Prefix of generated record ids.
    pub id_prefix: String,
}

impl SynthConfig {
    pub fn new(
        num_videos: usize,
        num_classes: usize,
        frames_per_video: usize,
        scene_changes: usize,
        seed: u64,
    ) -> Self {
        Self {
            num_videos,
            num_classes,
            frames_per_video,
            scene_changes,
            seed,
            geometry: FrameGeometry::default(),
            background: Background::Textured,
            draw_objects: true,
            split: Split::Train,
            id_prefix: "v".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure_arg!(self.num_classes >= 1, "num_classes must be at least 1");
        ensure_arg!(
            self.num_videos >= self.num_classes,
            "num_videos ({}) must be at least num_classes ({})",
            self.num_videos,
            self.num_classes
        );
        ensure_arg!(
            self.frames_per_video >= 2 * (self.scene_changes + 1),
            "frames_per_video ({}) must be at least 2*(scene_changes+1) = {}",
            self.frames_per_video,
            2 * (self.scene_changes + 1)
        );
        let g = self.geometry;
        ensure_arg!(
            (g.channels == 1 || g.channels == 3) && g.height >= 4 && g.width >= 4,
            "unsupported frame geometry {g:?}"
        );
        Ok(())
    }

    fn record_id(&self, index: usize) -> String {
        format!("{}{index:05}", self.id_prefix)
    }
}

const NUM_SHAPES: usize = 8;

#[derive(Debug, Clone, PartialEq)]
struct SceneStyle {
    base: [f32; 3],
    stripe_amp: f32,
    stripe_freq: f32,
    stripe_angle: f32,
    stripe_phase: f32,
}

/// Everything needed to render any frame of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoPlan {
    pub label: u32,
    pub shape: usize,
    pub expanding: bool,
    color: [f32; 3],
    center: (f32, f32),
    drift: (f32, f32),
    radius: (f32, f32),
    scenes: Vec<SceneStyle>,
    /// First frame index of every scene after the first.
    pub cuts: Vec<usize>,
    noise_seed: u64,
    frames: usize,
    background: Background,
    draw_objects: bool,
}

impl VideoPlan {
    pub fn scene_of(&self, t: usize) -> usize {
        self.cuts.iter().filter(|&&c| t >= c).count()
    }
}

fn hue_to_rgb(h: f32) -> [f32; 3] {
    let f = |n: f32| {
        let k = (n + h * 6.0) % 6.0;
        1.0 - (k.min(4.0 - k).clamp(0.0, 1.0))
    };
    [f(5.0), f(3.0), f(1.0)]
}

fn class_color(pair: usize) -> [f32; 3] {
    // golden-ratio hue stepping keeps neighbouring classes far apart
    let h = (pair as f32 * 0.618_034) % 1.0;
    let c = hue_to_rgb(h);
    [0.15 + 0.8 * c[0], 0.15 + 0.8 * c[1], 0.15 + 0.8 * c[2]]
}

pub fn plan_video(cfg: &SynthConfig, index: usize) -> VideoPlan {
    let seed = derive_seed(cfg.seed, &[stream::CORPUS, index as u64]);
    let mut rng = rng_for(seed, &[0]);
    let label = (index % cfg.num_classes) as u32;
    let pair = label as usize / 2;
    let l = cfg.frames_per_video;
    let s = cfg.scene_changes;

    let r_lo = 0.10 + rng.random_range(0.0..0.04);
    let r_hi = 0.34 + rng.random_range(0.0..0.06);
    let center = (rng.random_range(0.38..0.62), rng.random_range(0.38..0.62));
    let angle = rng.random_range(0.0..std::f32::consts::TAU);
    let speed = rng.random_range(0.0..0.15);
    let scenes = (0..=s)
        .map(|_| {
            let grey = rng.random_range(0.2..0.5);
            let mut tint = || grey + rng.random_range(-0.04..0.04);
            SceneStyle {
                base: [tint(), tint(), tint()],
                stripe_amp: rng.random_range(0.03..0.12),
                stripe_freq: rng.random_range(0.5..3.0),
                stripe_angle: rng.random_range(0.0..std::f32::consts::PI),
                stripe_phase: rng.random_range(0.0..std::f32::consts::TAU),
            }
        })
        .collect();

    // Cut points uniform over layouts where every scene spans at least
    // max(2, 3L / (4(s+1))) frames, so scenes stay roughly balanced.
    let min_len = (3 * l / (4 * (s + 1))).max(2);
    let slack = l - min_len * (s + 1);
    let mut offsets: Vec<usize> = (0..s).map(|_| rng.random_range(0..=slack)).collect();
    offsets.sort_unstable();
    let cuts = offsets
        .iter()
        .enumerate()
        .map(|(k, o)| min_len * (k + 1) + o)
        .collect();

    VideoPlan {
        label,
        shape: pair % NUM_SHAPES,
        expanding: label.is_multiple_of(2),
        color: class_color(pair),
        center,
        drift: (speed * angle.cos(), speed * angle.sin()),
        radius: (r_lo, r_hi),
        scenes,
        cuts,
        noise_seed: derive_seed(seed, &[1]),
        frames: l,
        background: cfg.background,
        draw_objects: cfg.draw_objects,
    }
}

fn inside(shape: usize, dx: f32, dy: f32) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    match shape {
        0 => dx * dx + dy * dy <= 1.0,
        1 => ax.max(ay) <= 0.8,
        2 => ax + ay <= 1.0,
        3 => (ax <= 0.3 && ay <= 1.0) || (ay <= 0.3 && ax <= 1.0),
        4 => {
            let r2 = dx * dx + dy * dy;
            (0.3..=1.0).contains(&r2)
        }
        5 => dy <= 0.7 && dy >= 2.0 * ax - 1.0,
        6 => ax <= 1.0 && ay <= 0.35,
        _ => ay <= 1.0 && ax <= 0.35,
    }
}

/// Renders frame `t` as C×H×W in [0,1].
pub fn render_frame(plan: &VideoPlan, t: usize, geometry: FrameGeometry) -> Array3<f32> {
    let FrameGeometry {
        channels,
        height,
        width,
    } = geometry;
    let progress = if plan.frames > 1 {
        t as f32 / (plan.frames - 1) as f32
    } else {
        0.0
    };
    let grow = if plan.expanding {
        progress
    } else {
        1.0 - progress
    };
    let radius = plan.radius.0 + (plan.radius.1 - plan.radius.0) * grow;
    let cx = plan.center.0 + plan.drift.0 * (progress - 0.5);
    let cy = plan.center.1 + plan.drift.1 * (progress - 0.5);
    let scene = &plan.scenes[plan.scene_of(t)];
    let mut noise_rng = rng_for(plan.noise_seed, &[t as u64]);
    let (sin_a, cos_a) = scene.stripe_angle.sin_cos();

    let mut rgb = Array3::<f32>::zeros((3, height, width));
    for y in 0..height {
        for x in 0..width {
            let u = (x as f32 + 0.5) / width as f32;
            let v = (y as f32 + 0.5) / height as f32;
            let mut bg = [0.0f32; 3];
            if plan.background == Background::Textured {
                let stripe = scene.stripe_amp
                    * (std::f32::consts::TAU * scene.stripe_freq * (u * cos_a + v * sin_a)
                        + scene.stripe_phase)
                        .sin();
                for c in 0..3 {
                    bg[c] = scene.base[c] + stripe;
                }
            }
            // 2x2 supersampled coverage
            let mut cover = 0.0f32;
            if plan.draw_objects {
                for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                    let su = (x as f32 + ox) / width as f32;
                    let sv = (y as f32 + oy) / height as f32;
                    if inside(plan.shape, (su - cx) / radius, (sv - cy) / radius) {
                        cover += 0.25;
                    }
                }
            }
            for c in 0..3 {
                let mut p = bg[c] * (1.0 - cover) + plan.color[c] * cover;
                if plan.background == Background::Textured {
                    p += noise_rng.random_range(-0.02..0.02);
                }
                rgb[[c, y, x]] = p.clamp(0.0, 1.0);
            }
        }
    }
    if channels == 3 {
        rgb
    } else {
        let mut gray = Array3::<f32>::zeros((1, height, width));
        for y in 0..height {
            for x in 0..width {
                gray[[0, y, x]] =
                    (0.299 * rgb[[0, y, x]] + 0.587 * rgb[[1, y, x]] + 0.114 * rgb[[2, y, x]])
                        .clamp(0.0, 1.0);
            }
        }
        gray
    }
}

/// An in-memory synthetic video with its ground-truth scene label per frame.
#[derive(Debug, Clone)]
pub struct SyntheticVideo {
    pub id: String,
    pub label: u32,
    pub frames: Array4<f32>,
    pub scene_of_frame: Vec<usize>,
}

pub fn synthesize_video(cfg: &SynthConfig, index: usize) -> SyntheticVideo {
    let plan = plan_video(cfg, index);
    let g = cfg.geometry;
    let mut frames = Array4::<f32>::zeros((plan.frames, g.channels, g.height, g.width));
    for (t, mut slot) in frames.axis_iter_mut(Axis(0)).enumerate() {
        slot.assign(&render_frame(&plan, t, g));
    }
    SyntheticVideo {
        id: cfg.record_id(index),
        label: plan.label,
        scene_of_frame: (0..plan.frames).map(|t| plan.scene_of(t)).collect(),
        frames,
    }
}

/// Renders the corpus into `out_dir` (one `<id>.chnv` archive per video plus
/// `manifest.jsonl`) and returns the manifest. Output depends only on `cfg`.
pub fn generate_synthetic_corpus(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let records = (0..cfg.num_videos)
        .into_par_iter()
        .map(|i| {
            let video = synthesize_video(cfg, i);
            let source = out_dir.join(format!("{}.chnv", video.id));
            write_frame_archive(&video.frames, &source)?;
            Ok(VideoRecord {
                id: video.id,
                label: video.label,
                frame_count: cfg.frames_per_video,
                source,
                split: cfg.split,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest::new(records)?;
    manifest.write(out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
