//! Clip-level contrastive loss over hash codes, per-frame order
//! classification, and intra-video prototypical contrast between frames and
//! scene exemplars. Each returns its value and the gradient with respect to
//! its input matrix.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tasks {
    pub contrastive: bool,
    pub order: bool,
    pub scene: bool,
}

impl Default for Tasks {
    fn default() -> Self {
        Self {
            contrastive: true,
            order: true,
            scene: true,
        }
    }
}

impl Tasks {
    pub const CL: Tasks = Tasks {
        contrastive: true,
        order: false,
        scene: false,
    };

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.contrastive {
            parts.push("CL");
        }
        if self.order {
            parts.push("FOV");
        }
        if self.scene {
            parts.push("SCR");
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Temperature of the clip-level contrastive term.
    pub tau: f64,
    /// Temperature of the prototypical term.
    pub scene_tau: f64,
    /// Contrast binarized codes (straight-through) instead of real codes.
    pub binarize: bool,
    pub tasks: Tasks,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            scene_tau: 0.5,
            binarize: true,
            tasks: Tasks::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        ensure_arg!(
            self.tau > 0.0 && self.scene_tau > 0.0,
            "temperatures must be positive"
        );
        ensure_arg!(
            self.tasks.contrastive || self.tasks.order || self.tasks.scene,
            "at least one loss term must be enabled"
        );
        Ok(())
    }
}

/// Per-step loss terms; disabled terms are exactly zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub contrastive: f64,
    pub order: f64,
    pub scene: f64,
    pub total: f64,
}

pub fn cosine_sim(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("cosine similarity of a zero vector".into()));
    }
    Ok((a.dot(&b) / (na * nb)).clamp(-1.0, 1.0))
}

fn normalize_rows(x: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if norms.iter().any(|&n| n == 0.0 || !n.is_finite()) {
        return Err(Error::Numeric("zero or non-finite code vector".into()));
    }
    Ok((&x / &norms.view().insert_axis(Axis(1)), norms))
}

/// Maps dL/dU for row-normalised U = X/‖X‖ back to dL/dX.
fn through_normalization(gu: Array2<f64>, u: &Array2<f64>, norms: &Array1<f64>) -> Array2<f64> {
    let radial = (&gu * u).sum_axis(Axis(1)).insert_axis(Axis(1));
    (gu - u * &radial) / norms.view().insert_axis(Axis(1))
}

/// Contrastive loss over `codes` (2B×K; rows `0..B` are first views, `B..2B`
/// the second views of the same videos). For each anchor the other view of
/// its video is the positive; both views of every other video are negatives.
pub fn contrastive_loss(codes: ArrayView2<f64>, tau: f64) -> Result<(f64, Array2<f64>)> {
    let n = codes.nrows();
    ensure_arg!(
        n >= 2 && n.is_multiple_of(2),
        "contrastive loss needs 2B rows with B >= 1, got {n}"
    );
    ensure_arg!(tau > 0.0, "temperature must be positive");
    let b = n / 2;
    let (u, norms) = normalize_rows(codes)?;
    let sim = u.dot(&u.t());
    let mut g = Array2::<f64>::zeros((n, n));
    let mut total = 0.0;
    for a in 0..n {
        let pos = (a + b) % n;
        let max = (0..n)
            .filter(|&j| j != a)
            .map(|j| sim[[a, j]] / tau)
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..n)
            .filter(|&j| j != a)
            .map(|j| (sim[[a, j]] / tau - max).exp())
            .sum();
        total += -(sim[[a, pos]] / tau - max) + denom.ln();
        for j in (0..n).filter(|&j| j != a) {
            let p = (sim[[a, j]] / tau - max).exp() / denom;
            let target = if j == pos { 1.0 } else { 0.0 };
            g[[a, j]] = (p - target) / (tau * n as f64);
        }
    }
    let gu = (&g + &g.t()).dot(&u);
    Ok((total / n as f64, through_normalization(gu, &u, &norms)))
}

/// Mean cross-entropy of per-frame position logits; row `r` has label `r % T`.
pub fn order_loss(logits: ArrayView2<f64>, clip_len: usize) -> Result<(f64, Array2<f64>)> {
    let (rows, classes) = logits.dim();
    ensure_arg!(
        classes == clip_len,
        "expected {clip_len} order classes, got {classes}"
    );
    ensure_arg!(
        rows > 0 && rows % clip_len == 0,
        "rows must be a multiple of clip length"
    );
    let mut grad = Array2::<f64>::zeros((rows, classes));
    let mut total = 0.0;
    for (r, row) in logits.rows().into_iter().enumerate() {
        let label = r % clip_len;
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let denom: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        total += -(row[label] - max) + denom.ln();
        let mut g = grad.row_mut(r);
        for (k, &v) in row.iter().enumerate() {
            g[k] = (v - max).exp() / denom - if k == label { 1.0 } else { 0.0 };
        }
    }
    grad /= rows as f64;
    Ok((total / rows as f64, grad))
}

/// Scene clustering of one video's pooled frames: prototype vectors and, for
/// each of the 2T pooled frames (first view then second view), the index of
/// its prototype.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneAssignment {
    pub prototypes: Array2<f64>,
    pub labels: Vec<usize>,
}

impl SceneAssignment {
    pub fn num_clusters(&self) -> usize {
        self.prototypes.nrows()
    }
}

/// Row of frame `t` of video `video`, view `view`, in a 2B·T frame matrix.
pub fn frame_row(view: usize, video: usize, t: usize, batch: usize, clip_len: usize) -> usize {
    (view * batch + video) * clip_len + t
}

/// Prototypical contrastive loss of frame representations (2B·T × d) against
/// their video's scene prototypes, which are treated as constants. Videos
/// with a single cluster contribute zero; the mean runs over all 2B·T frames.
pub fn scene_loss(
    frames: ArrayView2<f64>,
    assignments: &[SceneAssignment],
    clip_len: usize,
    tau: f64,
) -> Result<(f64, Array2<f64>)> {
    ensure_arg!(tau > 0.0, "temperature must be positive");
    let batch = assignments.len();
    let (rows, dim) = frames.dim();
    ensure_arg!(
        batch > 0 && rows == 2 * batch * clip_len,
        "expected {} frame rows for {batch} videos, got {rows}",
        2 * batch * clip_len
    );
    let mut grad = Array2::<f64>::zeros((rows, dim));
    let mut total = 0.0;
    for (i, a) in assignments.iter().enumerate() {
        if a.labels.len() != 2 * clip_len {
            return Err(Error::Internal(format!(
                "video {i}: {} labels for {} pooled frames",
                a.labels.len(),
                2 * clip_len
            )));
        }
        let k = a.num_clusters();
        if k == 0 || a.labels.iter().any(|&l| l >= k) {
            return Err(Error::Internal(format!(
                "video {i}: empty or invalid cluster assignment"
            )));
        }
        if k == 1 {
            continue;
        }
        let (protos, _) = normalize_rows(a.prototypes.view())?;
        for (q, &label) in a.labels.iter().enumerate() {
            let row = frame_row(q / clip_len, i, q % clip_len, batch, clip_len);
            let f = frames.row(row);
            let norm = f.dot(&f).sqrt();
            if norm == 0.0 {
                return Err(Error::Numeric("zero frame representation".into()));
            }
            let fhat = &f / norm;
            let sims = protos.dot(&fhat);
            let max = sims.fold(f64::NEG_INFINITY, |m, &s| m.max(s / tau));
            let denom: f64 = sims.iter().map(|&s| (s / tau - max).exp()).sum();
            total += -(sims[label] / tau - max) + denom.ln();
            // d/dsim_k = (p_k - [k=label]) / tau ; dsim_k/df = (c_k - sim_k f̂) / ‖f‖
            let mut gf = Array1::<f64>::zeros(dim);
            for c in 0..k {
                let p = (sims[c] / tau - max).exp() / denom;
                let coef = (p - if c == label { 1.0 } else { 0.0 }) / tau;
                gf.scaled_add(coef, &protos.row(c));
                gf.scaled_add(-coef * sims[c], &fhat);
            }
            grad.row_mut(row).assign(&(gf / norm));
        }
    }
    let count = rows as f64;
    grad /= count;
    Ok((total / count, grad))
}
