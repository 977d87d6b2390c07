//! Desk-scale pipeline: synthetic corpus → frozen feature extraction →
//! training → codes → mAP, plus the task-toggle ablation grid.

use std::path::Path;

use crate::augment::AugConfig;
use crate::corpus::{generate_synthetic_corpus, load_videos, LoadedVideo, SynthConfig};
use crate::encoder::{EncoderConfig, FrameEncoderKind, ModelState};
use crate::error::{Error, Result};
use crate::extract::{extract_corpus, ExtractorConfig};
use crate::losses::Tasks;
use crate::retrieval::{encode_corpus, map_at_k, CodeBook};
use crate::trainer::{StepLog, TrainConfig, Trainer};

/// CL, CL+FOV, CL+SCR, CL+FOV+SCR.
pub const ABLATION_GRID: [Tasks; 4] = [
    Tasks::CL,
    Tasks {
        contrastive: true,
        order: true,
        scene: false,
    },
    Tasks {
        contrastive: true,
        order: false,
        scene: true,
    },
    Tasks {
        contrastive: true,
        order: true,
        scene: true,
    },
];

/// 200 videos, 10 classes, 32 frames, one scene change.
pub fn toy_corpus_config(seed: u64) -> SynthConfig {
    SynthConfig::new(200, 10, 32, 1, seed)
}

/// Feature-mode training on 128-D extracted features: T=8, K=16, B=32, 50
/// epochs, four attention heads, base learning rate 1e-3 and feature noise
/// standing in for pixel-space augmentation.
pub fn toy_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        epochs: 50,
        batch_size: 32,
        base_lr: 1e-3,
        augment: AugConfig {
            feature_noise_sigma: 0.3,
            ..AugConfig::default()
        },
        encoder: EncoderConfig {
            frame_encoder: FrameEncoderKind::Identity,
            frame_dim: 128,
            model_dim: 64,
            ffn_dim: 128,
            hash_hidden: 64,
            num_heads: 4,
            clip_length: 8,
            code_bits: 16,
            ..EncoderConfig::default()
        },
        ..TrainConfig::default()
    }
}

/// Renders the corpus under `dir/frames`, extracts features to
/// `dir/features` and loads them.
pub fn build_feature_corpus(
    synth: &SynthConfig,
    extractor: &ExtractorConfig,
    dir: &Path,
    clip_len: usize,
) -> Result<Vec<LoadedVideo>> {
    let frames = generate_synthetic_corpus(synth, dir.join("frames"))?;
    let features = extract_corpus(&frames, extractor, dir.join("features"))?;
    load_videos(&features, clip_len)
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub model: ModelState,
    pub history: Vec<StepLog>,
    pub codes: CodeBook,
    pub map: f64,
}

impl RunOutcome {
    pub fn final_loss(&self) -> f64 {
        self.history.last().map_or(f64::NAN, |l| l.report.total)
    }
}

/// Trains on `videos` and scores mAP@`k` with the same set as queries and
/// database (self matches excluded).
pub fn train_and_evaluate(
    videos: &[LoadedVideo],
    cfg: &TrainConfig,
    k: usize,
) -> Result<RunOutcome> {
    let mut trainer = Trainer::new(cfg.clone())?;
    let mut history = Vec::new();
    trainer.fit(videos, None, &mut |l| history.push(*l))?;
    let codes = encode_corpus(&trainer.model, videos)?;
    let map = map_at_k(&codes, &codes, k)?;
    Ok(RunOutcome {
        model: trainer.model,
        history,
        codes,
        map,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub tasks: Tasks,
    pub seed: u64,
    pub map: f64,
    pub final_loss: f64,
}

/// Runs every task combination of the grid for every seed.
pub fn run_ablation(
    videos: &[LoadedVideo],
    base: &TrainConfig,
    grid: &[Tasks],
    seeds: &[u64],
    k: usize,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &tasks in grid {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.loss.tasks = tasks;
            let out = train_and_evaluate(videos, &cfg, k)?;
            log::info!(
                "ablation {} seed={seed} map@{k}={:.4}",
                tasks.label(),
                out.map
            );
            rows.push(AblationRow {
                tasks,
                seed,
                map: out.map,
                final_loss: out.final_loss(),
            });
        }
    }
    Ok(rows)
}

pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Argument("median of an empty set".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Median mAP over seeds for each task combination, in grid order.
pub fn summarize(rows: &[AblationRow]) -> Result<Vec<(Tasks, f64)>> {
    let mut order: Vec<Tasks> = Vec::new();
    for r in rows {
        if !order.contains(&r.tasks) {
            order.push(r.tasks);
        }
    }
    order
        .into_iter()
        .map(|t| {
            let maps: Vec<f64> = rows
                .iter()
                .filter(|r| r.tasks == t)
                .map(|r| r.map)
                .collect();
            Ok((t, median(&maps)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_cases() {
        assert_eq!(median(&[3.0, 1.0, 2.0]).unwrap(), 2.0);
        assert_eq!(median(&[4.0, 1.0]).unwrap(), 2.5);
        assert!(median(&[]).is_err());
    }

    #[test]
    fn grid_labels() {
        let labels: Vec<String> = ABLATION_GRID.iter().map(|t| t.label()).collect();
        assert_eq!(labels, ["CL", "CL+FOV", "CL+SCR", "CL+FOV+SCR"]);
    }

    #[test]
    fn tiny_pipeline_runs_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let synth = SynthConfig::new(8, 2, 12, 1, 5);
        let extractor = ExtractorConfig {
            widths: [4, 8],
            feature_dim: 16,
            ..ExtractorConfig::default()
        };
        let mut cfg = toy_train_config(0);
        cfg.epochs = 2;
        cfg.batch_size = 4;
        cfg.encoder.frame_dim = 16;
        cfg.encoder.clip_length = 4;
        cfg.encoder.model_dim = 8;
        cfg.encoder.ffn_dim = 8;
        cfg.encoder.hash_hidden = 8;
        let videos = build_feature_corpus(&synth, &extractor, dir.path(), 4).unwrap();
        let rows = run_ablation(&videos, &cfg, &ABLATION_GRID, &[0, 1], 3).unwrap();
        assert_eq!(rows.len(), 8);
        assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.map)));
        assert_eq!(summarize(&rows).unwrap().len(), 4);
    }
}
