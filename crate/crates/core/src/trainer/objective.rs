use ndarray::{Array2, Axis};
use rayon::prelude::*;

use crate::affinity::{cluster_video_frames, APConfig};
use crate::encoder::{forward, ClipBatch, ModelState};
use crate::error::{Error, Result};
use crate::losses::{
    contrastive_loss, frame_row, order_loss, scene_loss, LossConfig, LossReport, SceneAssignment,
};

/// Loss terms, parameter gradients and the scene clustering used for them.
#[derive(Debug, Clone)]
pub struct Objective {
    pub report: LossReport,
    /// Aligned with `ModelState::params`.
    pub grads: Vec<Array2<f64>>,
    pub assignments: Vec<SceneAssignment>,
}

/// Pooled frames of video `video`: its T rows from the first view followed by
/// its T rows from the second.
pub fn pooled_frames(
    frames: &Array2<f64>,
    video: usize,
    batch: usize,
    clip_len: usize,
) -> Array2<f64> {
    let rows: Vec<usize> = (0..2)
        .flat_map(|v| (0..clip_len).map(move |t| frame_row(v, video, t, batch, clip_len)))
        .collect();
    frames.select(Axis(0), &rows)
}

/// Clusters every video's pooled frames independently (in parallel).
pub fn cluster_batch(
    frames: &Array2<f64>,
    batch: usize,
    clip_len: usize,
    ap: &APConfig,
) -> Result<Vec<SceneAssignment>> {
    (0..batch)
        .into_par_iter()
        .map(|i| {
            let pooled = pooled_frames(frames, i, batch, clip_len);
            cluster_video_frames(pooled.view(), ap).map(|(_, a)| a)
        })
        .collect()
}

/// Evaluates the enabled loss terms on a batch laid out as all first views
/// followed by all second views, and backpropagates their sum.
///
/// When `fixed` is given those scene assignments are used instead of running
/// the clustering, which makes the objective a smooth function of the
/// parameters for finite-difference checks.
pub fn evaluate(
    state: &ModelState,
    batch: &ClipBatch,
    cfg: &LossConfig,
    ap: &APConfig,
    fixed: Option<&[SceneAssignment]>,
) -> Result<Objective> {
    cfg.validate()?;
    let mut pass = forward(state, batch)?;
    let t = state.config.clip_length;
    if pass.num_clips % 2 != 0 {
        return Err(Error::Argument(format!(
            "batch of {} clips is not a set of view pairs",
            pass.num_clips
        )));
    }
    let b = pass.num_clips / 2;
    let mut report = LossReport::default();
    let mut terms = Vec::new();
    let mut assignments = Vec::new();

    if cfg.tasks.contrastive {
        let codes = if cfg.binarize { pass.b } else { pass.h };
        let (v, g) = contrastive_loss(pass.value(codes).view(), cfg.tau)?;
        report.contrastive = v;
        terms.push(pass.tape.scalar_loss(codes, v, g));
    }
    if cfg.tasks.order {
        let (v, g) = order_loss(pass.value(pass.order_logits).view(), t)?;
        report.order = v;
        let logits = pass.order_logits;
        terms.push(pass.tape.scalar_loss(logits, v, g));
    }
    if cfg.tasks.scene {
        let frames = pass.value(pass.frames).clone();
        assignments = match fixed {
            Some(a) => a.to_vec(),
            None => cluster_batch(&frames, b, t, ap)?,
        };
        let (v, g) = scene_loss(frames.view(), &assignments, t, cfg.scene_tau)?;
        report.scene = v;
        let fv = pass.frames;
        terms.push(pass.tape.scalar_loss(fv, v, g));
    }
    report.total = report.contrastive + report.order + report.scene;

    let root = pass.tape.sum(terms);
    let mut grads = pass.tape.backward(root);
    let grads = pass
        .params
        .iter()
        .zip(&state.params)
        .map(|(&var, p)| grads.take_or_zeros(var, p.value.dim()))
        .collect();
    Ok(Objective {
        report,
        grads,
        assignments,
    })
}
