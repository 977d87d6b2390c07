use ndarray::Array2;
use rand_distr::{Distribution, Normal};

use super::config::{EncoderConfig, FrameEncoderKind};
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};

/// How a tensor is initialised.
#[derive(Debug, Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    /// N(0, gain / fan_in) with fan_in = rows
    Scaled(f64),
    /// N(0, gain / fan_in) with fan_in = cols (conv filters are Cout×fan_in)
    ScaledCols(f64),
    Normal(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Array2<f64>,
}

/// All trainable tensors of the encoder, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: EncoderConfig,
    pub params: Vec<Param>,
}

fn layout(cfg: &EncoderConfig) -> Vec<(String, (usize, usize), Init)> {
    let mut out: Vec<(String, (usize, usize), Init)> = Vec::new();
    let mut add = |name: String, shape: (usize, usize), init: Init| out.push((name, shape, init));
    let d = cfg.model_dim;
    if let FrameEncoderKind::ToyCnn { geometry, widths } = cfg.frame_encoder {
        let chans = [geometry.channels, widths[0], widths[1], cfg.frame_dim];
        for i in 0..3 {
            add(
                format!("cnn.conv{}.weight", i + 1),
                (chans[i + 1], chans[i] * 9),
                Init::ScaledCols(2.0),
            );
            add(
                format!("cnn.conv{}.bias", i + 1),
                (1, chans[i + 1]),
                Init::Zeros,
            );
        }
    }
    add("input.weight".into(), (cfg.frame_dim, d), Init::Scaled(1.0));
    add("input.bias".into(), (1, d), Init::Zeros);
    add("cls".into(), (1, d), Init::Normal(0.02));
    add("pos".into(), (cfg.clip_length + 1, d), Init::Normal(1.0));
    for l in 0..cfg.num_layers {
        let p = format!("layers.{l}");
        add(format!("{p}.ln1.gamma"), (1, d), Init::Ones);
        add(format!("{p}.ln1.beta"), (1, d), Init::Zeros);
        for proj in ["q", "k", "v", "out"] {
            add(format!("{p}.attn.{proj}.weight"), (d, d), Init::Scaled(1.0));
            add(format!("{p}.attn.{proj}.bias"), (1, d), Init::Zeros);
        }
        add(format!("{p}.ln2.gamma"), (1, d), Init::Ones);
        add(format!("{p}.ln2.beta"), (1, d), Init::Zeros);
        add(
            format!("{p}.ffn.fc1.weight"),
            (d, cfg.ffn_dim),
            Init::Scaled(2.0),
        );
        add(format!("{p}.ffn.fc1.bias"), (1, cfg.ffn_dim), Init::Zeros);
        add(
            format!("{p}.ffn.fc2.weight"),
            (cfg.ffn_dim, d),
            Init::Scaled(1.0),
        );
        add(format!("{p}.ffn.fc2.bias"), (1, d), Init::Zeros);
    }
    add(
        "hash.fc1.weight".into(),
        (d, cfg.hash_hidden),
        Init::Scaled(2.0),
    );
    add("hash.fc1.bias".into(), (1, cfg.hash_hidden), Init::Zeros);
    add(
        "hash.fc2.weight".into(),
        (cfg.hash_hidden, cfg.code_bits),
        Init::Scaled(1.0),
    );
    add("hash.fc2.bias".into(), (1, cfg.code_bits), Init::Zeros);
    add(
        "order.weight".into(),
        (d, cfg.order_classes()),
        Init::Scaled(1.0),
    );
    add("order.bias".into(), (1, cfg.order_classes()), Init::Zeros);
    out
}

impl ModelState {
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = layout(&config)
            .into_iter()
            .enumerate()
            .map(|(i, (name, (r, c), init))| {
                let mut rng = rng_for(seed, &[stream::INIT, i as u64]);
                let mut normal = |std: f64| {
                    let n = Normal::new(0.0, std).expect("positive std");
                    Array2::from_shape_fn((r, c), |_| n.sample(&mut rng))
                };
                let value = match init {
                    Init::Zeros => Array2::zeros((r, c)),
                    Init::Ones => Array2::ones((r, c)),
                    Init::Scaled(g) => normal((g / r as f64).sqrt()),
                    Init::ScaledCols(g) => normal((g / c as f64).sqrt()),
                    Init::Normal(std) => normal(std),
                };
                Param { name, value }
            })
            .collect();
        Ok(Self { config, params })
    }

    /// Builds a state from named tensors, checking names and shapes against the config.
    pub fn from_params(config: EncoderConfig, params: Vec<Param>) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != params.len() {
            return Err(Error::Argument(format!(
                "expected {} tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape, _), p) in expected.iter().zip(&params) {
            if *name != p.name || *shape != p.value.dim() {
                return Err(Error::Argument(format!(
                    "tensor {} {:?} does not match expected {name} {shape:?}",
                    p.name,
                    p.value.dim()
                )));
            }
        }
        let state = Self { config, params };
        state.check_finite()?;
        Ok(state)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.index_of(name).map(|i| &self.params[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.index_of(name).map(|i| &mut self.params[i].value)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn check_finite(&self) -> Result<()> {
        match self
            .params
            .iter()
            .find(|p| p.value.iter().any(|v| !v.is_finite()))
        {
            Some(p) => Err(Error::Numeric(format!(
                "parameter {} is not finite",
                p.name
            ))),
            None => Ok(()),
        }
    }
}
