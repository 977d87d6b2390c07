//! Self-supervised training: augmented view pairs, combined objective, Adam
//! with a step-decayed learning rate, and resumable checkpoints.

mod checkpoint;
mod config;
mod objective;
mod optim;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{lr_schedule, TrainConfig, Trainable};
pub use objective::{cluster_batch, evaluate, pooled_frames, Objective};
pub use optim::{AdamParams, AdamState};

use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::augment::{make_pair, ClipPair};
use crate::corpus::LoadedVideo;
use crate::encoder::{ClipBatch, ModelState};
use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::rng::{derive_seed, rng_for, stream};

/// One logged optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub report: LossReport,
}

impl fmt::Display for StepLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} step={} L_c={:.6} L_o={:.6} L_s={:.6} L={:.6} lr={:.3e}",
            self.epoch,
            self.step,
            self.report.contrastive,
            self.report.order,
            self.report.scene,
            self.report.total,
            self.lr
        )
    }
}

/// Seeds of the two views of video `index` in `epoch`.
pub fn view_seeds(seed: u64, epoch: usize, index: usize) -> (u64, u64) {
    let s = |v| derive_seed(seed, &[stream::VIEW, epoch as u64, index as u64, v]);
    (s(0), s(1))
}

/// Order in which the training videos are visited in `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, &[stream::SHUFFLE, epoch as u64]));
    order
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: ModelState,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub global_step: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = ModelState::init(config.encoder.clone(), config.seed)?;
        let adam = AdamState::new(&model);
        Ok(Self {
            config,
            model,
            adam,
            epoch: 0,
            global_step: 0,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.config.validate()?;
        Ok(Self {
            config: ck.config,
            model: ck.model,
            adam: ck.adam,
            epoch: ck.epoch,
            global_step: ck.global_step,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            model: self.model.clone(),
            adam: self.adam.clone(),
            epoch: self.epoch,
            global_step: self.global_step,
        }
    }

    fn hyper(&self) -> AdamParams {
        AdamParams {
            beta1: self.config.beta1,
            beta2: self.config.beta2,
            eps: self.config.adam_eps,
        }
    }

    /// One optimizer step on a batch of view pairs at learning rate `lr`.
    pub fn step_with_lr(&mut self, pairs: &[ClipPair], lr: f64) -> Result<StepLog> {
        if pairs.is_empty() {
            return Err(Error::Argument("empty training batch".into()));
        }
        let step = self.global_step + 1;
        let ids = || {
            pairs
                .iter()
                .map(|p| p.source_id.clone())
                .collect::<Vec<_>>()
        };
        let views = pairs
            .iter()
            .map(|p| &p.view1.clip)
            .chain(pairs.iter().map(|p| &p.view2.clip));
        let batch = ClipBatch::from_views(views)?;
        let objective = match evaluate(
            &self.model,
            &batch,
            &self.config.loss,
            &self.config.ap,
            None,
        ) {
            Ok(o) => o,
            Err(Error::Numeric(_)) => return Err(Error::NonFiniteLoss { step, ids: ids() }),
            Err(e) => return Err(e),
        };
        let finite = objective.report.total.is_finite()
            && objective
                .grads
                .iter()
                .all(|g| g.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::NonFiniteLoss { step, ids: ids() });
        }
        let hp = self.hyper();
        let trainable = self.config.trainable;
        self.adam
            .update(&mut self.model, &objective.grads, lr, hp, |n| {
                trainable.includes(n)
            });
        self.global_step = step;
        Ok(StepLog {
            epoch: self.epoch,
            step,
            lr,
            report: objective.report,
        })
    }

    /// One step at the scheduled learning rate of the current epoch.
    pub fn step(&mut self, pairs: &[ClipPair]) -> Result<StepLog> {
        self.step_with_lr(pairs, lr_schedule(self.epoch, &self.config))
    }

    /// View pairs for the given training videos in the current epoch.
    pub fn make_batch(&self, videos: &[LoadedVideo], indices: &[usize]) -> Result<Vec<ClipPair>> {
        let (seed, epoch) = (self.config.seed, self.epoch);
        let clip_len = self.config.encoder.clip_length;
        indices
            .par_iter()
            .map(|&i| {
                make_pair(
                    &videos[i],
                    view_seeds(seed, epoch, i),
                    clip_len,
                    &self.config.augment,
                )
            })
            .collect()
    }

    /// Runs one full epoch over `videos`, calling `log` after every step.
    pub fn run_epoch(
        &mut self,
        videos: &[LoadedVideo],
        log: &mut dyn FnMut(&StepLog),
    ) -> Result<()> {
        if videos.is_empty() {
            return Err(Error::Argument("no training videos".into()));
        }
        let order = epoch_order(self.config.seed, self.epoch, videos.len());
        for chunk in order.chunks(self.config.batch_size) {
            let pairs = self.make_batch(videos, chunk)?;
            let entry = self.step(&pairs)?;
            log::info!("{entry}");
            log(&entry);
        }
        self.epoch += 1;
        Ok(())
    }

    /// Trains until `config.epochs` epochs are complete. With a checkpoint
    /// directory, writes `epoch_NNNN.chnk` every `checkpoint_every` epochs and
    /// `final.chnk` at the end.
    pub fn fit(
        &mut self,
        videos: &[LoadedVideo],
        checkpoint_dir: Option<&Path>,
        log: &mut dyn FnMut(&StepLog),
    ) -> Result<Option<PathBuf>> {
        if let Some(dir) = checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        while self.epoch < self.config.epochs {
            self.run_epoch(videos, log)?;
            let every = self.config.checkpoint_every;
            if let Some(dir) = checkpoint_dir {
                if every > 0 && self.epoch.is_multiple_of(every) {
                    self.checkpoint()
                        .save(dir.join(format!("epoch_{:04}.chnk", self.epoch)))?;
                }
            }
        }
        match checkpoint_dir {
            Some(dir) => {
                let path = dir.join("final.chnk");
                self.checkpoint().save(&path)?;
                Ok(Some(path))
            }
            None => Ok(None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Split, VideoData, VideoRecord};
    use crate::encoder::EncoderConfig;
    use crate::losses::Tasks;
    use ndarray::Array2;
    use rand::Rng as _;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            epochs: 2,
            base_lr: 1e-3,
            encoder: EncoderConfig {
                frame_dim: 6,
                model_dim: 8,
                ffn_dim: 8,
                hash_hidden: 8,
                clip_length: 4,
                code_bits: 6,
                ..EncoderConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn videos(n: usize, len: usize, dim: usize) -> Vec<LoadedVideo> {
        (0..n)
            .map(|i| {
                let mut rng = rng_for(i as u64, &[]);
                let f = Array2::from_shape_fn((len, dim), |(t, _)| {
                    (if t < len / 2 { 0.0 } else { 1.0 }) + rng.random_range(0.0..0.3f32)
                });
                LoadedVideo {
                    record: VideoRecord {
                        id: format!("t{i}"),
                        label: (i % 2) as u32,
                        frame_count: len,
                        source: "x".into(),
                        split: Split::Train,
                    },
                    data: VideoData::Features(f),
                }
            })
            .collect()
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let vids = videos(4, 12, 6);
        let mut t = Trainer::new(tiny_config()).unwrap();
        let before = t.model.clone();
        let pairs = t.make_batch(&vids, &[0, 1, 2, 3]).unwrap();
        let log = t.step_with_lr(&pairs, 0.0).unwrap();
        assert!(log.report.total.is_finite());
        assert_eq!(t.model, before);
    }

    #[test]
    fn disabled_terms_report_zero() {
        let vids = videos(4, 12, 6);
        let mut cfg = tiny_config();
        cfg.loss.tasks = Tasks::CL;
        let mut t = Trainer::new(cfg).unwrap();
        let pairs = t.make_batch(&vids, &[0, 1, 2, 3]).unwrap();
        let log = t.step(&pairs).unwrap();
        assert_eq!(log.report.order, 0.0);
        assert_eq!(log.report.scene, 0.0);
        assert_eq!(log.report.total, log.report.contrastive);
    }

    #[test]
    fn order_head_group_freezes_the_rest() {
        let vids = videos(4, 12, 6);
        let mut cfg = tiny_config();
        cfg.trainable = Trainable::OrderHead;
        let mut t = Trainer::new(cfg).unwrap();
        let before = t.model.clone();
        let pairs = t.make_batch(&vids, &[0, 1, 2, 3]).unwrap();
        t.step(&pairs).unwrap();
        for (a, b) in t.model.params.iter().zip(&before.params) {
            assert_eq!(
                a.value != b.value,
                a.name.starts_with("order."),
                "{}",
                a.name
            );
        }
    }

    #[test]
    fn fit_is_deterministic() {
        let vids = videos(6, 12, 6);
        let run = || {
            let mut t = Trainer::new(tiny_config()).unwrap();
            let mut logs = Vec::new();
            t.fit(&vids, None, &mut |l| logs.push(*l)).unwrap();
            (t.model, logs)
        };
        let (m1, l1) = run();
        let (m2, l2) = run();
        assert_eq!(m1, m2);
        assert_eq!(l1, l2);
        assert_eq!(l1.len(), 4);
        assert!(l1[0].to_string().starts_with("epoch=0 step=1 L_c="));
    }

    #[test]
    fn resume_matches_uninterrupted_training() {
        let vids = videos(6, 12, 6);
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config();
        cfg.epochs = 3;
        let mut full = Trainer::new(cfg.clone()).unwrap();
        full.fit(&vids, None, &mut |_| {}).unwrap();

        cfg.epochs = 1;
        let mut first = Trainer::new(cfg).unwrap();
        let path = first
            .fit(&vids, Some(dir.path()), &mut |_| {})
            .unwrap()
            .unwrap();
        let mut ck = Checkpoint::load(path).unwrap();
        ck.config.epochs = 3;
        let mut resumed = Trainer::from_checkpoint(ck).unwrap();
        resumed.fit(&vids, None, &mut |_| {}).unwrap();
        assert_eq!(resumed.global_step, full.global_step);
        for (a, b) in resumed.model.params.iter().zip(&full.model.params) {
            let diff = (&a.value - &b.value)
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(diff <= 1e-7, "{}: {diff}", a.name);
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_batch_ids() {
        let vids = videos(2, 12, 6);
        let mut t = Trainer::new(tiny_config()).unwrap();
        t.model.get_mut("hash.fc1.weight").unwrap()[[0, 0]] = f64::NAN;
        let pairs = t.make_batch(&vids, &[0, 1]).unwrap();
        match t.step(&pairs) {
            Err(Error::NonFiniteLoss { step, ids }) => {
                assert_eq!(step, 1);
                assert_eq!(ids, vec!["t0".to_string(), "t1".to_string()]);
            }
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }
}
