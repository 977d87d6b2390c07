use ndarray::{Array2, Zip};

use crate::encoder::ModelState;

/// Adam moments for every parameter tensor, aligned with `ModelState::params`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(state: &ModelState) -> Self {
        let zeros = || {
            state
                .params
                .iter()
                .map(|p| Array2::zeros(p.value.raw_dim()))
                .collect()
        };
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected Adam update on the parameters selected by `mask`.
    pub fn update(
        &mut self,
        state: &mut ModelState,
        grads: &[Array2<f64>],
        lr: f64,
        hp: AdamParams,
        mask: impl Fn(&str) -> bool,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - hp.beta1.powi(t);
        let c2 = 1.0 - hp.beta2.powi(t);
        for (i, p) in state.params.iter_mut().enumerate() {
            if !mask(&p.name) {
                continue;
            }
            Zip::from(&mut p.value)
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(&grads[i])
                .for_each(|w, m, v, &g| {
                    *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
                    *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
                    let mhat = *m / c1;
                    let vhat = *v / c2;
                    *w -= lr * mhat / (vhat.sqrt() + hp.eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, ModelState};

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let cfg = EncoderConfig {
            frame_dim: 2,
            model_dim: 2,
            ffn_dim: 2,
            hash_hidden: 2,
            clip_length: 2,
            code_bits: 2,
            ..EncoderConfig::default()
        };
        let mut s = ModelState::init(cfg, 0).unwrap();
        let before = s.clone();
        let grads: Vec<_> = s.params.iter().map(|p| p.value.mapv(|_| -3.0)).collect();
        let mut opt = AdamState::new(&s);
        let hp = AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        opt.update(&mut s, &grads, 0.01, hp, |n| n != "cls");
        for (a, b) in s.params.iter().zip(&before.params) {
            for (x, y) in a.value.iter().zip(b.value.iter()) {
                if a.name == "cls" {
                    assert_eq!(x, y);
                } else {
                    assert!((x - y - 0.01).abs() < 1e-8);
                }
            }
        }
    }
}
