use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::affinity::APConfig;
use crate::augment::AugConfig;
use crate::encoder::EncoderConfig;
use crate::error::{ensure_arg, Error, Result};
use crate::losses::LossConfig;

/// Which parameters the optimizer may move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Trainable {
    #[default]
    All,
    /// Only the frame order head.
    OrderHead,
}

impl Trainable {
    pub fn includes(&self, name: &str) -> bool {
        match self {
            Trainable::All => true,
            Trainable::OrderHead => name.starts_with("order."),
        }
    }
}

/// Training configuration, loadable from TOML. Every key is optional; missing
/// keys take the defaults below.
///
/// ```toml
/// seed = 0
/// epochs = 50
/// batch_size = 32
/// base_lr = 1e-4
/// lr_decay = 0.9
/// decay_every = 20
/// min_lr = 1e-5
/// beta1 = 0.9
/// beta2 = 0.999
/// adam_eps = 1e-8
/// checkpoint_every = 0      # epochs; 0 writes only the final checkpoint
/// trainable = "all"         # or "order_head"
///
/// [loss]     # tau, scene_tau, binarize, tasks = { contrastive, order, scene }
/// [augment]  # crop_scale_min/max, jitter_strength, grayscale_prob,
///            # feature_noise_sigma, spatial, temporal
/// [encoder]  # frame_encoder, frame_dim, model_dim, num_layers, num_heads,
///            # ffn_dim, hash_hidden, clip_length, code_bits
/// [ap]       # damping, max_iter, convergence_iter, preference, noise_seed
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub min_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub checkpoint_every: usize,
    pub trainable: Trainable,
    pub loss: LossConfig,
    pub augment: AugConfig,
    pub encoder: EncoderConfig,
    pub ap: APConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 50,
            batch_size: 32,
            base_lr: 1e-4,
            lr_decay: 0.9,
            decay_every: 20,
            min_lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            checkpoint_every: 0,
            trainable: Trainable::All,
            loss: LossConfig::default(),
            augment: AugConfig::default(),
            encoder: EncoderConfig::default(),
            ap: APConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Full-scale preset: batch 128, 25-frame clips of 4096-D features.
    pub fn full_scale() -> Self {
        Self {
            batch_size: 128,
            encoder: EncoderConfig {
                frame_dim: 4096,
                model_dim: 256,
                ffn_dim: 1024,
                hash_hidden: 256,
                clip_length: 25,
                ..EncoderConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure_arg!(self.batch_size >= 1, "batch_size must be at least 1");
        ensure_arg!(
            self.min_lr > 0.0 && self.base_lr >= self.min_lr,
            "need base_lr >= min_lr > 0"
        );
        ensure_arg!(
            self.lr_decay > 0.0 && self.lr_decay <= 1.0 && self.decay_every >= 1,
            "lr decay must be in (0, 1] with a positive period"
        );
        ensure_arg!(
            (0.0..1.0).contains(&self.beta1)
                && (0.0..1.0).contains(&self.beta2)
                && self.adam_eps > 0.0,
            "invalid Adam hyperparameters"
        );
        self.loss.validate()?;
        self.augment.validate()?;
        self.encoder.validate()?;
        self.ap.validate()?;
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// `max(min_lr, base_lr · decay^floor(epoch / decay_every))`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let steps = (epoch / cfg.decay_every) as i32;
    (cfg.base_lr * cfg.lr_decay.powi(steps)).max(cfg.min_lr)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, &cfg), 1e-4);
        assert_eq!(lr_schedule(19, &cfg), 1e-4);
        assert!((lr_schedule(20, &cfg) - 9e-5).abs() < 1e-18);
        assert_eq!(lr_schedule(10_000, &cfg), 1e-5);
    }

    #[test]
    fn schedule_is_monotone_and_floored() {
        let cfg = TrainConfig::default();
        let mut prev = f64::INFINITY;
        for e in 0..2000 {
            let lr = lr_schedule(e, &cfg);
            assert!(lr <= prev && lr >= cfg.min_lr);
            prev = lr;
        }
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let cfg = TrainConfig::full_scale();
        assert_eq!(
            TrainConfig::from_toml_str(&cfg.to_toml_string()).unwrap(),
            cfg
        );
        let partial =
            TrainConfig::from_toml_str("epochs = 3\n[loss.tasks]\nscene = false\n").unwrap();
        assert_eq!(partial.epochs, 3);
        assert!(!partial.loss.tasks.scene && partial.loss.tasks.order);
        assert!(matches!(
            TrainConfig::from_toml_str("bogus = 1"),
            Err(Error::Config(_))
        ));
        assert!(TrainConfig::from_toml_str("min_lr = 0.1").is_err());
    }
}
